//! Replays a trace through a set of selection policies and collects
//! per-step fetch, cost and quality records.
//!
//! STARC masks are counted against the clustered layout; every other policy
//! is counted against the positional layout. Normalized metrics divide by a
//! full-cache baseline that is always evaluated, whether or not `full` is in
//! the policy list.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::attention::{dense_attend, output_error, recall_against, sparse_attend};
use crate::clustering::{ClusterStore, ClusteringConfig};
use crate::error::{Error, Result};
use crate::pim::{cost, count_fetches, layout_clustered, layout_sequential, FetchStats, PimConfig};
use crate::retrieval::{
    select_full, select_page_quest, select_sparq, select_starc, select_token_oracle, select_window,
    PageIndex, RetrievalBudget,
};
use crate::types::SelectionMask;
use crate::workload::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    Full,
    Window,
    TokenOracle,
    Sparq { r: usize },
    Page { size: usize },
    Starc,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Full => f.write_str("full"),
            Policy::Window => f.write_str("window"),
            Policy::TokenOracle => f.write_str("token_oracle"),
            Policy::Sparq { r } => write!(f, "sparq:{r}"),
            Policy::Page { size } => write!(f, "page:{size}"),
            Policy::Starc => f.write_str("starc"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let param = |p: &str| {
            p.parse::<usize>().ok().filter(|&v| v >= 1).ok_or_else(|| {
                Error::Parameter(format!("policy {s:?}: expected a positive integer"))
            })
        };
        match s.split_once(':') {
            None => match s {
                "full" => Ok(Policy::Full),
                "window" => Ok(Policy::Window),
                "token_oracle" => Ok(Policy::TokenOracle),
                "starc" => Ok(Policy::Starc),
                _ => Err(Error::Parameter(format!("unknown policy {s:?}"))),
            },
            Some(("sparq", r)) => Ok(Policy::Sparq { r: param(r)? }),
            Some(("page", size)) => Ok(Policy::Page { size: param(size)? }),
            Some(_) => Err(Error::Parameter(format!("unknown policy {s:?}"))),
        }
    }
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A fully resolved experiment over one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub policies: Vec<Policy>,
    pub budget: RetrievalBudget,
    pub pim: PimConfig,
    pub clustering: ClusteringConfig,
    /// Seed for K-means passes.
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn new(policies: Vec<Policy>, budget: usize) -> Result<Self> {
        Ok(Self {
            policies,
            budget: RetrievalBudget::new(budget)?,
            pim: PimConfig::default(),
            clustering: ClusteringConfig::default(),
            seed: 0,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::Parameter("at least one policy is required".into()));
        }
        self.pim.geometry.validate()?;
        self.pim.cost.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub policy: Policy,
    pub mask_size: usize,
    pub recall: f64,
    pub fetches: usize,
    pub processed_tokens: usize,
    pub waste_ratio: f64,
    pub latency: f64,
    pub energy: f64,
    pub output_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: Policy,
    pub budget: usize,
    pub steps: usize,
    pub mean_mask_size: f64,
    pub mean_recall: f64,
    pub mean_fetches: f64,
    pub mean_processed_tokens: f64,
    pub max_processed_tokens: usize,
    pub mean_waste_ratio: f64,
    pub mean_latency: f64,
    pub mean_energy: f64,
    pub mean_output_error: f64,
    pub normalized_latency: f64,
    pub normalized_energy: f64,
    /// One-time cost of writing clustered tokens into place (STARC only).
    pub remap_write_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub records: Vec<StepRecord>,
    pub summaries: Vec<PolicySummary>,
}

impl RunReport {
    pub fn summary(&self, policy: Policy) -> Option<&PolicySummary> {
        self.summaries.iter().find(|s| s.policy == policy)
    }

    pub fn records_for(&self, policy: Policy) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.policy == policy)
    }
}

fn dedup_policies(policies: &[Policy]) -> Vec<Policy> {
    let mut out: Vec<Policy> = Vec::with_capacity(policies.len());
    for &p in policies {
        if out.contains(&p) {
            warn!("policy {p} listed twice; evaluating it once");
        } else {
            out.push(p);
        }
    }
    out
}

/// Replays every decoding step of `trace` under each policy in `spec`.
///
/// Fails with [`Error::Invariant`] as soon as a budget or fetch bound is
/// violated.
pub fn run(trace: &Trace, spec: &ExperimentSpec) -> Result<RunReport> {
    spec.validate()?;
    if trace.prefill_len() == 0 {
        return Err(Error::Parameter("trace has no prefill tokens".into()));
    }
    let policies = dedup_policies(&spec.policies);
    let geom = spec.pim.geometry;
    let b = spec.budget.tokens();
    let g = geom.group_size;

    let mut cache = trace.prefill_cache()?;
    let mut store = None;
    if policies.contains(&Policy::Starc) {
        let mut s = ClusterStore::new(spec.clustering)?;
        s.initial_cluster(&cache, spec.seed)?;
        store = Some(s);
    }
    let mut pages: BTreeMap<usize, PageIndex> = BTreeMap::new();
    for p in &policies {
        if let Policy::Page { size } = *p {
            pages.insert(size, PageIndex::new(trace.d_h(), size)?);
        }
    }
    let sequential = layout_sequential(trace.total_len(), &geom)?;

    let mut records = Vec::with_capacity(trace.decode_len() * policies.len());
    let mut baseline = Vec::with_capacity(trace.decode_len());
    for step in 0..trace.decode_len() {
        let t = trace.prefill_len() + step;
        match store.as_mut() {
            Some(s) => {
                s.append_token(&mut cache, trace.key(t), trace.value(t), spec.seed)?;
            }
            None => {
                cache.push(trace.key(t), trace.value(t))?;
            }
        }
        for index in pages.values_mut() {
            index.sync(&cache)?;
        }
        let q = trace.query(step);
        let l = cache.len();

        // ground truth for recall: exact top-min(B, L)
        let top_budget = RetrievalBudget::new(b.min(l))?;
        let top = select_token_oracle(q, &cache, top_budget)?;
        let dense = dense_attend(q, &cache)?;
        let full_stats = count_fetches(&select_full(&cache), &sequential, &geom)?;
        baseline.push(cost(&full_stats, &spec.pim.cost));

        let clustered = match &store {
            Some(s) => Some(layout_clustered(s, &geom)?),
            None => None,
        };

        for &policy in &policies {
            let (mask, stats) = match policy {
                Policy::Full => (select_full(&cache), full_stats),
                Policy::Window => {
                    let m = select_window(&cache, spec.budget);
                    let st = count_fetches(&m, &sequential, &geom)?;
                    (m, st)
                }
                Policy::TokenOracle => {
                    let m = if b <= l {
                        top.clone()
                    } else {
                        select_token_oracle(q, &cache, spec.budget)?
                    };
                    let st = count_fetches(&m, &sequential, &geom)?;
                    (m, st)
                }
                Policy::Sparq { r } => {
                    let m = select_sparq(q, &cache, r, spec.budget)?;
                    let st = count_fetches(&m, &sequential, &geom)?;
                    (m, st)
                }
                Policy::Page { size } => {
                    let m = select_page_quest(q, &pages[&size], spec.budget)?;
                    let st = count_fetches(&m, &sequential, &geom)?;
                    (m, st)
                }
                Policy::Starc => {
                    let s = store.as_ref().expect("store exists when starc is listed");
                    let layout = clustered.as_ref().expect("layout built with store");
                    let sel = select_starc(q, s, spec.budget)?;
                    let m = sel.attended();
                    let st = count_fetches(&m, layout, &geom)?;
                    if sel.included_tokens.len() > b {
                        return Err(Error::Invariant(format!(
                            "step {step}: starc included {} tokens over budget {b}",
                            sel.included_tokens.len()
                        )));
                    }
                    if geom.row_align_clusters {
                        let bound = sel.included_tokens.len()
                            + sel.ranked_cluster_ids.len() * (g - 1)
                            + sel.recent_tokens.len().div_ceil(g) * g;
                        if st.processed_tokens > bound {
                            return Err(Error::Invariant(format!(
                                "step {step}: starc processed {} tokens, bound {bound}",
                                st.processed_tokens
                            )));
                        }
                    }
                    (m, st)
                }
            };
            check_stats(step, policy, &mask, &stats, b, g)?;
            let c = cost(&stats, &spec.pim.cost);
            let out = sparse_attend(q, &cache, &mask)?;
            records.push(StepRecord {
                step,
                policy,
                mask_size: mask.len(),
                recall: recall_against(&mask, &top),
                fetches: stats.fetches,
                processed_tokens: stats.processed_tokens,
                waste_ratio: stats.waste_ratio,
                latency: c.latency,
                energy: c.energy,
                output_error: output_error(&out, &dense)?,
            });
        }
        if step % 256 == 0 {
            debug!("step {step}/{} (L = {l})", trace.decode_len());
        }
    }

    let base_latency = mean(baseline.iter().map(|c| c.latency));
    let base_energy = mean(baseline.iter().map(|c| c.energy));
    let clustered_tokens = store
        .as_ref()
        .map_or(0, |s| s.token_count() - s.unclustered().len());
    let summaries = policies
        .iter()
        .map(|&policy| {
            let rs: Vec<&StepRecord> = records.iter().filter(|r| r.policy == policy).collect();
            let m = |f: fn(&StepRecord) -> f64| mean(rs.iter().map(|r| f(r)));
            let mean_latency = m(|r| r.latency);
            let mean_energy = m(|r| r.energy);
            let normalized_latency = if policy == Policy::Full {
                1.0
            } else {
                mean_latency / base_latency
            };
            let normalized_energy = if policy == Policy::Full {
                1.0
            } else {
                mean_energy / base_energy
            };
            PolicySummary {
                policy,
                budget: b,
                steps: rs.len(),
                mean_mask_size: m(|r| r.mask_size as f64),
                mean_recall: m(|r| r.recall),
                mean_fetches: m(|r| r.fetches as f64),
                mean_processed_tokens: m(|r| r.processed_tokens as f64),
                max_processed_tokens: rs.iter().map(|r| r.processed_tokens).max().unwrap_or(0),
                mean_waste_ratio: m(|r| r.waste_ratio),
                mean_latency,
                mean_energy,
                mean_output_error: m(|r| r.output_error),
                normalized_latency,
                normalized_energy,
                remap_write_cost: if policy == Policy::Starc {
                    clustered_tokens as f64 * spec.pim.write_cost_per_token
                } else {
                    0.0
                },
            }
        })
        .collect();
    Ok(RunReport { records, summaries })
}

fn check_stats(
    step: usize,
    policy: Policy,
    mask: &SelectionMask,
    stats: &FetchStats,
    b: usize,
    g: usize,
) -> Result<()> {
    let budgeted = !matches!(policy, Policy::Full | Policy::Starc);
    if budgeted && mask.len() > b {
        return Err(Error::Invariant(format!(
            "step {step}: {policy} selected {} tokens over budget {b}",
            mask.len()
        )));
    }
    if stats.fetches < mask.len().div_ceil(g) || stats.processed_tokens < stats.useful_tokens {
        return Err(Error::Invariant(format!(
            "step {step}: {policy} fetch stats {stats:?} inconsistent"
        )));
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs `spec` once per distinct budget, in ascending order.
pub fn sweep(
    trace: &Trace,
    spec: &ExperimentSpec,
    budgets: &[usize],
) -> Result<Vec<(usize, RunReport)>> {
    if budgets.is_empty() {
        return Err(Error::Parameter("sweep needs at least one budget".into()));
    }
    let mut distinct = budgets.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != budgets.len() {
        warn!("duplicate budgets in {budgets:?}; running {distinct:?}");
    }
    distinct
        .into_iter()
        .map(|b| {
            let spec = ExperimentSpec {
                budget: RetrievalBudget::new(b)?,
                ..spec.clone()
            };
            Ok((b, run(trace, &spec)?))
        })
        .collect()
}

/// Averages per-policy summaries across reports (typically one per seed).
///
/// Means are averaged, `max_processed_tokens` is the overall maximum and
/// `steps` is the total. Policies appear in first-seen order; reports must
/// share one budget.
pub fn aggregate_summaries(reports: &[RunReport]) -> Result<Vec<PolicySummary>> {
    let first = reports.first().ok_or(Error::EmptyInput("reports"))?;
    let mut out = Vec::with_capacity(first.summaries.len());
    for s0 in &first.summaries {
        let group: Vec<&PolicySummary> = reports
            .iter()
            .filter_map(|r| r.summary(s0.policy))
            .collect();
        if group.len() != reports.len() || group.iter().any(|s| s.budget != s0.budget) {
            return Err(Error::Parameter(format!(
                "policy {} missing or run at different budgets across reports",
                s0.policy
            )));
        }
        let m = |f: fn(&PolicySummary) -> f64| mean(group.iter().map(|s| f(s)));
        out.push(PolicySummary {
            policy: s0.policy,
            budget: s0.budget,
            steps: group.iter().map(|s| s.steps).sum(),
            mean_mask_size: m(|s| s.mean_mask_size),
            mean_recall: m(|s| s.mean_recall),
            mean_fetches: m(|s| s.mean_fetches),
            mean_processed_tokens: m(|s| s.mean_processed_tokens),
            max_processed_tokens: group
                .iter()
                .map(|s| s.max_processed_tokens)
                .max()
                .unwrap_or(0),
            mean_waste_ratio: m(|s| s.mean_waste_ratio),
            mean_latency: m(|s| s.mean_latency),
            mean_energy: m(|s| s.mean_energy),
            mean_output_error: m(|s| s.mean_output_error),
            normalized_latency: m(|s| s.normalized_latency),
            normalized_energy: m(|s| s.normalized_energy),
            remap_write_cost: m(|s| s.remap_write_cost),
        });
    }
    Ok(out)
}

pub fn write_records_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_summary_csv(path: &Path, summaries: &[PolicySummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_json(path: &Path, summaries: &[PolicySummary]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, summaries)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate, SyntheticConfig};

    fn small_trace(seed: u64) -> Trace {
        generate(&SyntheticConfig {
            d_h: 16,
            prefill_len: 256,
            decode_len: 200,
            n_components: 8,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn policy_names_round_trip() {
        for s in [
            "full",
            "window",
            "token_oracle",
            "sparq:8",
            "page:16",
            "starc",
        ] {
            assert_eq!(s.parse::<Policy>().unwrap().to_string(), s);
        }
        for bad in ["", "sparq", "sparq:0", "page:x", "quest:16", "oracle"] {
            assert!(bad.parse::<Policy>().is_err(), "{bad}");
        }
    }

    #[test]
    fn full_normalizes_to_one() {
        let spec = ExperimentSpec::new(vec![Policy::Full], 64).unwrap();
        let report = run(&small_trace(0), &spec).unwrap();
        let s = report.summary(Policy::Full).unwrap();
        assert_eq!((s.normalized_latency, s.normalized_energy), (1.0, 1.0));
        assert_eq!(s.steps, 200);
        assert_eq!(s.mean_recall, 1.0);
        assert!(report.records.iter().all(|r| r.output_error < 1e-5));
    }

    #[test]
    fn oracle_with_budget_covering_cache() {
        let trace = small_trace(1);
        let spec = ExperimentSpec::new(vec![Policy::TokenOracle], trace.total_len()).unwrap();
        let report = run(&trace, &spec).unwrap();
        for r in &report.records {
            let l = trace.prefill_len() + r.step + 1;
            assert_eq!(r.recall, 1.0);
            assert_eq!(r.processed_tokens, l.div_ceil(8) * 8);
        }
    }

    #[test]
    fn all_policies_run_and_respect_budget() {
        let policies = [
            "full",
            "window",
            "token_oracle",
            "sparq:4",
            "page:16",
            "starc",
        ]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
        let spec = ExperimentSpec::new(policies, 64).unwrap();
        let report = run(&small_trace(2), &spec).unwrap();
        assert_eq!(report.records.len(), 6 * 200);
        for r in &report.records {
            assert!((0.0..=1.0).contains(&r.recall));
            if !matches!(r.policy, Policy::Full | Policy::Starc) {
                assert!(r.mask_size <= 64);
            }
        }
        // STARC never attends more than B plus the pending tokens
        for r in report.records_for(Policy::Starc) {
            assert!(r.mask_size <= 64 + 127);
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let spec = ExperimentSpec::new(vec![Policy::Starc, Policy::Page { size: 16 }], 96).unwrap();
        let a = run(&small_trace(3), &spec).unwrap();
        let b = run(&small_trace(3), &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_averages_across_seeds() {
        let spec = ExperimentSpec::new(vec![Policy::Window, Policy::Starc], 48).unwrap();
        let reports: Vec<RunReport> = (5..7)
            .map(|s| run(&small_trace(s), &spec).unwrap())
            .collect();
        let agg = aggregate_summaries(&reports).unwrap();
        assert_eq!(agg.len(), 2);
        let (a, b) = (
            reports[0].summary(Policy::Starc).unwrap(),
            reports[1].summary(Policy::Starc).unwrap(),
        );
        let s = &agg[1];
        assert_eq!(s.policy, Policy::Starc);
        assert_eq!(s.steps, 400);
        assert!((s.mean_recall - (a.mean_recall + b.mean_recall) / 2.0).abs() < 1e-12);
        assert_eq!(
            s.max_processed_tokens,
            a.max_processed_tokens.max(b.max_processed_tokens)
        );
        assert!(aggregate_summaries(&[]).is_err());
    }

    #[test]
    fn sweep_dedups_budgets() {
        let trace = small_trace(4);
        let spec = ExperimentSpec::new(vec![Policy::Window], 1).unwrap();
        let out = sweep(&trace, &spec, &[64, 32, 64]).unwrap();
        assert_eq!(
            out.iter().map(|(b, _)| *b).collect::<Vec<_>>(),
            vec![32, 64]
        );
        let single = sweep(&trace, &spec, &[32]).unwrap();
        let direct = run(
            &trace,
            &ExperimentSpec::new(vec![Policy::Window], 32).unwrap(),
        )
        .unwrap();
        assert_eq!(single[0].1, direct);
        assert!(sweep(&trace, &spec, &[]).is_err());
    }

    #[test]
    fn empty_policy_list_is_rejected() {
        let spec = ExperimentSpec::new(vec![], 16).unwrap();
        assert!(run(&small_trace(0), &spec).is_err());
    }

    #[test]
    fn records_csv_round_trip() {
        let spec = ExperimentSpec::new(vec![Policy::Starc, Policy::Sparq { r: 4 }], 32).unwrap();
        let report = run(&small_trace(5), &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.csv");
        write_records_csv(&path, &report.records).unwrap();
        let back = read_records_csv(&path).unwrap();
        assert_eq!(back.len(), report.records.len());
        assert_eq!(back[0].policy, report.records[0].policy);
        assert_eq!(back[0].processed_tokens, report.records[0].processed_tokens);
        write_summary_json(&dir.path().join("s.json"), &report.summaries).unwrap();
        write_summary_csv(&dir.path().join("s.csv"), &report.summaries).unwrap();
    }
}
