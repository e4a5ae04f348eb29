//! Row-granularity PIM access model.
//!
//! One memory read delivers a fixed group of `G` whole key/value vectors, so
//! touching any token in a group costs the entire group. A [`LayoutMap`]
//! places tokens into groups; [`count_fetches`] turns a selection into the
//! groups it touches, and [`CostModel`] turns those counts into latency and
//! energy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterStore;
use crate::error::{Error, Result};
use crate::types::SelectionMask;

/// Vectors per fetch for HBM3 bursts with d_h = 128.
pub const DEFAULT_GROUP_SIZE: usize = 8;
pub const DEFAULT_BANKS_PER_CHANNEL: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PimGeometry {
    /// Tokens delivered by one fetch (G).
    pub group_size: usize,
    /// Start every cluster at a fresh group.
    pub row_align_clusters: bool,
    /// Informational only; bank parallelism is folded into the fetch count.
    pub banks_per_channel: usize,
}

impl Default for PimGeometry {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
            row_align_clusters: true,
            banks_per_channel: DEFAULT_BANKS_PER_CHANNEL,
        }
    }
}

impl PimGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Parameter("group size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub group: usize,
    pub slot: usize,
}

/// Physical placement of every token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutMap {
    token_to_slot: Vec<Option<Slot>>,
    occupancy: Vec<usize>,
}

impl LayoutMap {
    pub fn slot(&self, token: usize) -> Option<Slot> {
        self.token_to_slot.get(token).copied().flatten()
    }

    /// Real tokens per group; the rest of each group is padding.
    pub fn occupancy(&self) -> &[usize] {
        &self.occupancy
    }

    pub fn num_groups(&self) -> usize {
        self.occupancy.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.token_to_slot.iter().flatten().count()
    }

    pub fn padding_slots(&self, geom: &PimGeometry) -> usize {
        self.occupancy.iter().map(|o| geom.group_size - o).sum()
    }
}

/// Accumulates placements group by group.
struct LayoutBuilder {
    g: usize,
    map: LayoutMap,
}

impl LayoutBuilder {
    fn new(g: usize, tokens: usize) -> Self {
        Self {
            g,
            map: LayoutMap {
                token_to_slot: vec![None; tokens],
                occupancy: Vec::new(),
            },
        }
    }

    fn start_group(&mut self) {
        if self.map.occupancy.last().is_some_and(|&o| o > 0) {
            self.map.occupancy.push(0);
        }
    }

    fn place(&mut self, token: usize) -> Result<()> {
        if self.map.occupancy.last().is_none_or(|&o| o == self.g) {
            self.map.occupancy.push(0);
        }
        let group = self.map.occupancy.len() - 1;
        let slot = self.map.occupancy[group];
        if token >= self.map.token_to_slot.len() {
            self.map.token_to_slot.resize(token + 1, None);
        }
        if self.map.token_to_slot[token]
            .replace(Slot { group, slot })
            .is_some()
        {
            return Err(Error::Invariant(format!("token {token} placed twice")));
        }
        self.map.occupancy[group] += 1;
        Ok(())
    }

    fn finish(mut self) -> LayoutMap {
        if self.map.occupancy.last() == Some(&0) {
            self.map.occupancy.pop();
        }
        self.map
    }
}

/// Positional placement: token i lands in group i / G, slot i % G.
pub fn layout_sequential(len: usize, geom: &PimGeometry) -> Result<LayoutMap> {
    geom.validate()?;
    let mut b = LayoutBuilder::new(geom.group_size, len);
    for t in 0..len {
        b.place(t)?;
    }
    Ok(b.finish())
}

/// Cluster-contiguous placement: clusters in id order, members ascending,
/// then the unclustered tokens in position order. With row alignment every
/// cluster (and the unclustered tail) starts a fresh group.
pub fn layout_clustered(store: &ClusterStore, geom: &PimGeometry) -> Result<LayoutMap> {
    geom.validate()?;
    if !store.is_initialized() {
        return Err(Error::NotInitialized);
    }
    let mut b = LayoutBuilder::new(geom.group_size, store.token_count());
    for cluster in store.clusters() {
        if geom.row_align_clusters {
            b.start_group();
        }
        for &t in &cluster.members {
            b.place(t)?;
        }
    }
    if geom.row_align_clusters {
        b.start_group();
    }
    for &t in store.unclustered() {
        b.place(t)?;
    }
    Ok(b.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FetchStats {
    /// Distinct groups touched.
    pub fetches: usize,
    /// `fetches × G`: every fetched vector is computed on.
    pub processed_tokens: usize,
    /// Tokens actually selected.
    pub useful_tokens: usize,
    pub waste_ratio: f64,
}

pub fn count_fetches(
    mask: &SelectionMask,
    layout: &LayoutMap,
    geom: &PimGeometry,
) -> Result<FetchStats> {
    geom.validate()?;
    let mut groups = Vec::with_capacity(mask.len());
    for t in mask.iter() {
        let slot = layout
            .slot(t)
            .ok_or(Error::LayoutInconsistency { token: t })?;
        groups.push(slot.group);
    }
    groups.sort_unstable();
    groups.dedup();
    let fetches = groups.len();
    let processed = fetches * geom.group_size;
    let useful = mask.len();
    let waste_ratio = if processed == 0 {
        0.0
    } else {
        (processed - useful) as f64 / processed as f64
    };
    Ok(FetchStats {
        fetches,
        processed_tokens: processed,
        useful_tokens: useful,
        waste_ratio,
    })
}

/// Linear latency/energy model over fetch counts. Units are arbitrary;
/// reports normalize against the full-cache baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub t_fetch: f64,
    pub t_gemv: f64,
    pub t_overhead: f64,
    pub e_fetch: f64,
    pub e_gemv: f64,
    pub e_overhead: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            t_fetch: 1.0,
            t_gemv: 1.0,
            t_overhead: 0.0,
            e_fetch: 1.0,
            e_gemv: 1.0,
            e_overhead: 0.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_fetch", self.t_fetch),
            ("t_gemv", self.t_gemv),
            ("t_overhead", self.t_overhead),
            ("e_fetch", self.e_fetch),
            ("e_gemv", self.e_gemv),
            ("e_overhead", self.e_overhead),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub latency: f64,
    pub energy: f64,
}

pub fn cost(stats: &FetchStats, model: &CostModel) -> Cost {
    let f = stats.fetches as f64;
    let p = stats.processed_tokens as f64;
    Cost {
        latency: model.t_overhead + f * model.t_fetch + p * model.t_gemv,
        energy: model.e_overhead + f * model.e_fetch + p * model.e_gemv,
    }
}

/// Geometry, cost rates and the remapping write cost, as read from a
/// `key = value` file.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PimConfig {
    pub geometry: PimGeometry,
    pub cost: CostModel,
    /// Cost charged once per token written into its clustered location.
    pub write_cost_per_token: f64,
}

impl PimConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    /// Parses `key = value` lines. `#` starts a comment; unknown keys and
    /// malformed values are errors. Missing keys keep their defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Config {
                path: path.to_path_buf(),
                line: n + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "group_size" => {
                    cfg.geometry.group_size =
                        value.parse().map_err(|e| err(format!("{key}: {e}")))?
                }
                "row_align" => {
                    cfg.geometry.row_align_clusters = match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        _ => {
                            return Err(err(format!(
                                "row_align: expected a boolean, got {value:?}"
                            )))
                        }
                    }
                }
                "t_fetch" => cfg.cost.t_fetch = num()?,
                "t_gemv" => cfg.cost.t_gemv = num()?,
                "t_overhead" => cfg.cost.t_overhead = num()?,
                "e_fetch" => cfg.cost.e_fetch = num()?,
                "e_gemv" => cfg.cost.e_gemv = num()?,
                "e_overhead" => cfg.cost.e_overhead = num()?,
                "write_cost_per_token" => cfg.write_cost_per_token = num()?,
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        cfg.geometry.validate()?;
        cfg.cost.validate()?;
        if !(cfg.write_cost_per_token >= 0.0 && cfg.write_cost_per_token.is_finite()) {
            return Err(Error::Parameter("write_cost_per_token must be >= 0".into()));
        }
        Ok(cfg)
    }
}
