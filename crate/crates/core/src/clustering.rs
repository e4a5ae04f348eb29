//! Online spherical K-means over key vectors.
//!
//! Prefill keys are clustered once; afterwards every `interval` decoding
//! tokens are clustered on their own and appended as a new generation.
//! Earlier clusters are never revisited, so a cluster's members and centroid
//! are fixed from the moment it is created.
//!
//! Assignment and the iteration objective use cosine similarity against unit
//! "concept" directions (the normalized sum of the members' unit keys), which
//! makes the objective non-increasing per round. The centroid stored on each
//! [`Cluster`] is the plain arithmetic mean of the member keys: that is the
//! vector retrieval scores against with a raw dot product.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{HeadVector, KvCache};

pub const DEFAULT_ITERS: usize = 15;
pub const DEFAULT_INTERVAL: usize = 128;
pub const DEFAULT_TOKENS_PER_CLUSTER: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: usize,
    /// Token indices, ascending.
    pub members: Vec<usize>,
    /// Arithmetic mean of the member keys.
    pub centroid: HeadVector,
    /// Clustering pass that created this cluster (0 = prefill).
    pub generation: usize,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Result of one spherical K-means run over a slice of rows.
///
/// Cluster members are positions in the input slice, and clusters are ordered
/// by their lowest member.
#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    pub clusters: Vec<Cluster>,
    /// Σ (1 − cos(row, concept of its cluster)) after each assignment round.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

/// K-means++ seeding under cosine distance. Returns the chosen rows.
pub fn kmeanspp_init(rows: &[&[f32]], k: usize, seed: u64) -> Result<Vec<HeadVector>> {
    let unit = unit_rows(rows)?;
    if k == 0 || k > rows.len() {
        return Err(Error::InfeasibleK {
            k,
            rows: rows.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kmeanspp_indices(&unit, k, &mut rng)
        .into_iter()
        .map(|i| HeadVector::new(rows[i].to_vec()))
        .collect()
}

/// Spherical K-means with K-means++ seeding, at most `iters` rounds.
pub fn spherical_kmeans(
    rows: &[&[f32]],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeansOutcome> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("k-means input"));
    }
    if iters == 0 {
        return Err(Error::Parameter(
            "k-means needs at least one iteration".into(),
        ));
    }
    if k == 0 || k > rows.len() {
        return Err(Error::InfeasibleK {
            k,
            rows: rows.len(),
        });
    }
    let unit = unit_rows(rows)?;
    let n = unit.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = kmeanspp_indices(&unit, k, &mut rng)
        .into_iter()
        .map(|i| unit[i].clone())
        .collect();

    let mut assign = vec![usize::MAX; n];
    let mut history = Vec::with_capacity(iters);
    let mut iterations = 0;
    for _ in 0..iters {
        iterations += 1;
        let mut next: Vec<(usize, f64)> = unit.par_iter().map(|x| nearest(x, &centers)).collect();
        repair_empty(&unit, &mut centers, &mut next);
        history.push(next.iter().map(|&(_, sim)| 1.0 - sim).sum());

        let changed = next.iter().zip(&assign).any(|(&(j, _), &a)| j != a);
        for (a, (j, _)) in assign.iter_mut().zip(next) {
            *a = j;
        }
        if !changed {
            break;
        }
        update_centers(&unit, &assign, &mut centers);
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &j) in assign.iter().enumerate() {
        members[j].push(i);
    }
    members.retain(|m| !m.is_empty());
    members.sort_by_key(|m| m[0]);
    let clusters = members
        .into_iter()
        .enumerate()
        .map(|(id, members)| {
            let centroid = mean_centroid(rows, &members);
            Cluster {
                id,
                members,
                centroid,
                generation: 0,
            }
        })
        .collect();

    Ok(KMeansOutcome {
        clusters,
        objective_history: history,
        iterations,
    })
}

fn unit_rows(rows: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    let d = rows.first().map_or(0, |r| r.len());
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: r.len(),
                });
            }
            let n = r.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateVector(format!(
                    "key row {i} has zero norm"
                )));
            }
            Ok(r.iter().map(|&x| f64::from(x) / n).collect())
        })
        .collect()
}

fn sim(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Most similar center; ties go to the lowest center index.
fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let s = sim(x, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn kmeanspp_indices(unit: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = unit.len();
    let mut chosen = Vec::with_capacity(k);
    let mut is_chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    is_chosen[first] = true;

    // distance of every row to its nearest chosen seed
    let mut dist: Vec<f64> = unit
        .iter()
        .map(|x| cosine_distance(x, &unit[first]))
        .collect();
    while chosen.len() < k {
        let weights: Vec<f64> = dist
            .iter()
            .zip(&is_chosen)
            .map(|(&d, &c)| if c { 0.0 } else { d * d })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every remaining row coincides with a seed
            let free: Vec<usize> = (0..n).filter(|&i| !is_chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        is_chosen[pick] = true;
        for (d, x) in dist.iter_mut().zip(unit) {
            *d = d.min(cosine_distance(x, &unit[pick]));
        }
    }
    chosen
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    (1.0 - sim(a, b)).max(0.0)
}

/// Gives every empty center the row farthest from its own center, taken
/// from a cluster that can spare it.
fn repair_empty(unit: &[Vec<f64>], centers: &mut [Vec<f64>], assign: &mut [(usize, f64)]) {
    let mut counts = vec![0usize; centers.len()];
    for &(j, _) in assign.iter() {
        counts[j] += 1;
    }
    for j in 0..centers.len() {
        if counts[j] > 0 {
            continue;
        }
        let donor = assign
            .iter()
            .enumerate()
            .filter(|(_, &(c, _))| counts[c] > 1)
            .fold(
                None,
                |best: Option<(usize, f64)>, (i, &(_, s))| match best {
                    Some((_, bs)) if bs <= s => best,
                    _ => Some((i, s)),
                },
            );
        let Some((i, _)) = donor else { break };
        counts[assign[i].0] -= 1;
        counts[j] += 1;
        centers[j] = unit[i].clone();
        assign[i] = (j, sim(&unit[i], &centers[j]));
    }
}

fn update_centers(unit: &[Vec<f64>], assign: &[usize], centers: &mut [Vec<f64>]) {
    let d = unit[0].len();
    let mut sums = vec![vec![0.0f64; d]; centers.len()];
    let mut first = vec![None; centers.len()];
    for (i, (x, &j)) in unit.iter().zip(assign).enumerate() {
        first[j].get_or_insert(i);
        for (s, v) in sums[j].iter_mut().zip(x) {
            *s += v;
        }
    }
    for ((c, s), f) in centers.iter_mut().zip(sums).zip(first) {
        let Some(f) = f else { continue };
        let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        *c = if n > 0.0 {
            s.into_iter().map(|v| v / n).collect()
        } else {
            unit[f].clone()
        };
    }
}

fn mean_centroid(rows: &[&[f32]], members: &[usize]) -> HeadVector {
    let d = rows[members[0]].len();
    let mut sum = vec![0.0f64; d];
    for &i in members {
        for (s, &v) in sum.iter_mut().zip(rows[i]) {
            *s += f64::from(v);
        }
    }
    let inv = members.len() as f64;
    let mean: Vec<f32> = sum.into_iter().map(|s| (s / inv) as f32).collect();
    if mean.iter().all(|&v| v == 0.0) {
        warn!(
            "cluster with first member {} has a zero-norm mean; using that member's key",
            members[0]
        );
        return HeadVector::new(rows[members[0]].to_vec()).expect("validated row");
    }
    HeadVector::new(mean).expect("mean of finite rows")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusteringConfig {
    /// Decoding tokens accumulated before an incremental pass (I).
    pub interval: usize,
    /// Cluster count is `max(1, tokens / tokens_per_cluster)`.
    pub tokens_per_cluster: usize,
    pub iters: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            interval: DEFAULT_INTERVAL,
            tokens_per_cluster: DEFAULT_TOKENS_PER_CLUSTER,
            iters: DEFAULT_ITERS,
        }
    }
}

impl ClusteringConfig {
    pub fn cluster_count(&self, tokens: usize) -> usize {
        (tokens / self.tokens_per_cluster).max(1).min(tokens)
    }
}

/// Append-only cluster list plus the buffer of not-yet-clustered tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStore {
    config: ClusteringConfig,
    clusters: Vec<Cluster>,
    unclustered: Vec<usize>,
    generations: usize,
    initialized: bool,
}

impl ClusterStore {
    pub fn new(config: ClusteringConfig) -> Result<Self> {
        if config.interval == 0 || config.tokens_per_cluster == 0 || config.iters == 0 {
            return Err(Error::Parameter(format!(
                "clustering interval, divisor and iterations must be >= 1: {config:?}"
            )));
        }
        Ok(Self {
            config,
            clusters: Vec::new(),
            unclustered: Vec::new(),
            generations: 0,
            initialized: false,
        })
    }

    /// Builds an initialized store from explicit member lists and centroids.
    ///
    /// Clusters get ids in the given order and generation 0. Members must be
    /// disjoint across clusters and the unclustered buffer.
    pub fn from_parts(
        config: ClusteringConfig,
        clusters: Vec<(Vec<usize>, HeadVector)>,
        unclustered: Vec<usize>,
    ) -> Result<Self> {
        let mut store = Self::new(config)?;
        let mut seen = std::collections::HashSet::new();
        for (id, (mut members, centroid)) in clusters.into_iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Parameter(format!("cluster {id} has no members")));
            }
            members.sort_unstable();
            for &m in &members {
                if !seen.insert(m) {
                    return Err(Error::Parameter(format!("token {m} appears twice")));
                }
            }
            store.clusters.push(Cluster {
                id,
                members,
                centroid,
                generation: 0,
            });
        }
        for &m in &unclustered {
            if !seen.insert(m) {
                return Err(Error::Parameter(format!("token {m} appears twice")));
            }
        }
        store.unclustered = unclustered;
        store.generations = 1;
        store.initialized = true;
        Ok(store)
    }

    pub fn config(&self) -> &ClusteringConfig {
        &self.config
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn unclustered(&self) -> &[usize] {
        &self.unclustered
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Number of completed clustering passes.
    pub fn generations(&self) -> usize {
        self.generations
    }

    /// Total tokens tracked, clustered or not.
    pub fn token_count(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum::<usize>() + self.unclustered.len()
    }

    /// Clusters the prefill rows of `cache` as generation 0.
    ///
    /// Rows past the prefill are fed through the incremental path.
    pub fn initial_cluster(&mut self, cache: &KvCache, seed: u64) -> Result<()> {
        if self.initialized {
            return Err(Error::AlreadyInitialized);
        }
        let n = cache.prefill_len();
        if n == 0 {
            return Err(Error::EmptyInput("prefill"));
        }
        let tokens: Vec<usize> = (0..n).collect();
        self.cluster_tokens(cache, &tokens, seed)?;
        self.initialized = true;
        for t in n..cache.len() {
            self.observe(cache, t, seed)?;
        }
        Ok(())
    }

    /// Appends a decoded key/value pair to `cache` and tracks its token,
    /// running an incremental pass once `interval` tokens are pending.
    /// Returns the new token index.
    pub fn append_token(
        &mut self,
        cache: &mut KvCache,
        key: &[f32],
        value: &[f32],
        seed: u64,
    ) -> Result<usize> {
        if !self.initialized {
            return Err(Error::NotInitialized);
        }
        let t = cache.push(key, value)?;
        self.observe(cache, t, seed)?;
        Ok(t)
    }

    fn observe(&mut self, cache: &KvCache, token: usize, seed: u64) -> Result<()> {
        self.unclustered.push(token);
        if self.unclustered.len() >= self.config.interval {
            let pending = std::mem::take(&mut self.unclustered);
            self.cluster_tokens(cache, &pending, seed)?;
        }
        Ok(())
    }

    fn cluster_tokens(&mut self, cache: &KvCache, tokens: &[usize], seed: u64) -> Result<()> {
        let rows: Vec<&[f32]> = tokens.iter().map(|&t| cache.key(t)).collect();
        let k = self.config.cluster_count(tokens.len());
        let outcome = spherical_kmeans(
            &rows,
            k,
            self.config.iters,
            pass_seed(seed, self.generations),
        )?;
        let generation = self.generations;
        let base = self.clusters.len();
        self.clusters
            .extend(outcome.clusters.into_iter().map(|c| Cluster {
                id: base + c.id,
                members: c.members.into_iter().map(|p| tokens[p]).collect(),
                centroid: c.centroid,
                generation,
            }));
        self.generations += 1;
        Ok(())
    }
}

fn pass_seed(seed: u64, generation: usize) -> u64 {
    seed ^ (generation as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[cfg(test)]
mod tests {
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    }

    fn as_slices(rows: &[Vec<f32>]) -> Vec<&[f32]> {
        rows.iter().map(Vec::as_slice).collect()
    }

    fn prefill_cache(rows: &[Vec<f32>]) -> KvCache {
        let d = rows[0].len();
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        KvCache::from_prefill(d, flat.clone(), flat).unwrap()
    }

    #[test]
    fn kmeanspp_identical_rows() {
        let rows = vec![vec![0.5f32, -1.0, 2.0]; 4];
        let seeds = kmeanspp_init(&as_slices(&rows), 1, 99).unwrap();
        assert_eq!(seeds, vec![HeadVector::new(rows[0].clone()).unwrap()]);
    }

    #[test]
    fn kmeanspp_splits_antipodes() {
        let mut rows = vec![vec![1.0f32, 0.0, 0.0]; 8];
        rows.extend(vec![vec![-1.0f32, 0.0, 0.0]; 8]);
        let seeds = kmeanspp_init(&as_slices(&rows), 2, 0).unwrap();
        let signs: Vec<f32> = seeds.iter().map(|s| s[0]).collect();
        assert!(signs.contains(&1.0) && signs.contains(&-1.0), "{signs:?}");
    }

    #[test]
    fn kmeanspp_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = gaussian_rows(&mut rng, 16, 8);
        let a = kmeanspp_init(&as_slices(&rows), 4, 7).unwrap();
        let b = kmeanspp_init(&as_slices(&rows), 4, 7).unwrap();
        assert_eq!(a, b);
        let distinct: std::collections::HashSet<Vec<u32>> = a
            .iter()
            .map(|v| v.iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn kmeanspp_errors() {
        let rows = vec![vec![1.0f32, 0.0]; 3];
        assert!(matches!(
            kmeanspp_init(&as_slices(&rows), 4, 0),
            Err(Error::InfeasibleK { k: 4, rows: 3 })
        ));
        let zero = vec![vec![0.0f32, 0.0]];
        assert!(matches!(
            kmeanspp_init(&as_slices(&zero), 1, 0),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn k_equal_rows_gives_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = gaussian_rows(&mut rng, 12, 6);
        // duplicates still end up one per cluster
        rows[5] = rows[2].clone();
        let out = spherical_kmeans(&as_slices(&rows), rows.len(), DEFAULT_ITERS, 4).unwrap();
        assert_eq!(out.clusters.len(), rows.len());
        for (i, c) in out.clusters.iter().enumerate() {
            assert_eq!(c.members, vec![i]);
            assert_eq!(c.centroid.as_slice(), rows[i].as_slice());
        }
    }

    #[test]
    fn separated_blobs_do_not_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = 8;
        let sigma = 0.1f32;
        let mut rows = Vec::new();
        for blob in 0..2 {
            for _ in 0..32 {
                let mut r: Vec<f32> = (0..d)
                    .map(|_| sigma * Distribution::<f32>::sample(&StandardNormal, &mut rng))
                    .collect();
                r[blob] += 1.0;
                rows.push(r);
            }
        }
        let out = spherical_kmeans(&as_slices(&rows), 2, DEFAULT_ITERS, 0).unwrap();
        assert_eq!(out.clusters.len(), 2);
        for c in &out.clusters {
            let blob = c.members[0] / 32;
            assert!(c.members.iter().all(|m| m / 32 == blob), "{:?}", c.members);
        }
    }

    #[test]
    fn objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = gaussian_rows(&mut rng, 64, 16);
        let out = spherical_kmeans(&as_slices(&rows), 2, 15, 3).unwrap();
        assert!(out.iterations <= 15);
        for w in out.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", out.objective_history);
        }
    }

    #[test]
    fn kmeans_errors() {
        assert!(matches!(
            spherical_kmeans(&[], 1, 15, 0),
            Err(Error::EmptyInput(_))
        ));
        let rows = vec![vec![1.0f32, 0.0]];
        assert!(spherical_kmeans(&as_slices(&rows), 1, 0, 0).is_err());
    }

    #[test]
    fn antipodal_members_fall_back_to_first_key() {
        let rows = [vec![1.0f32, 0.0], vec![-1.0, 0.0]];
        let c = mean_centroid(&as_slices(&rows), &[0, 1]);
        assert_eq!(c.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn initial_cluster_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = gaussian_rows(&mut rng, 2048, 8);
        let mut store = ClusterStore::new(ClusteringConfig::default()).unwrap();
        store.initial_cluster(&prefill_cache(&rows), 1).unwrap();
        assert_eq!(store.clusters().len(), 64);
        assert!(store.unclustered().is_empty());

        let small = gaussian_rows(&mut rng, 16, 8);
        let mut store = ClusterStore::new(ClusteringConfig::default()).unwrap();
        store.initial_cluster(&prefill_cache(&small), 1).unwrap();
        assert_eq!(store.clusters().len(), 1);
        assert!(matches!(
            store.initial_cluster(&prefill_cache(&small), 1),
            Err(Error::AlreadyInitialized)
        ));
    }

    #[test]
    fn initial_cluster_partitions_prefill() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows = gaussian_rows(&mut rng, 96, 8);
        let mut store = ClusterStore::new(ClusteringConfig::default()).unwrap();
        store.initial_cluster(&prefill_cache(&rows), 9).unwrap();
        assert_eq!(store.clusters().len(), 3);
        let mut all: Vec<usize> = store
            .clusters()
            .iter()
            .flat_map(|c| c.members.clone())
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..96).collect::<Vec<_>>());
    }

    #[test]
    fn incremental_pass_at_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = gaussian_rows(&mut rng, 256, 8);
        let mut cache = prefill_cache(&rows);
        let mut store = ClusterStore::new(ClusteringConfig::default()).unwrap();
        store.initial_cluster(&cache, 2).unwrap();
        let before = store.clusters().to_vec();
        let decode = gaussian_rows(&mut rng, 128, 8);
        for row in &decode[..127] {
            store.append_token(&mut cache, row, row, 2).unwrap();
        }
        assert_eq!(store.unclustered().len(), 127);
        assert_eq!(store.clusters(), before.as_slice());

        store
            .append_token(&mut cache, &decode[127], &decode[127], 2)
            .unwrap();
        assert!(store.unclustered().is_empty());
        assert_eq!(store.clusters().len(), before.len() + 4);
        assert_eq!(&store.clusters()[..before.len()], before.as_slice());
        assert!(store.clusters()[before.len()..]
            .iter()
            .all(|c| c.generation == 1));
    }

    #[test]
    fn append_requires_initialization() {
        let mut cache = KvCache::new(2).unwrap();
        let mut store = ClusterStore::new(ClusteringConfig::default()).unwrap();
        assert!(matches!(
            store.append_token(&mut cache, &[1.0, 0.0], &[0.0, 1.0], 0),
            Err(Error::NotInitialized)
        ));
    }

    #[test]
    fn from_parts_rejects_overlap() {
        let v = HeadVector::new(vec![1.0]).unwrap();
        let cfg = ClusteringConfig::default();
        assert!(ClusterStore::from_parts(
            cfg,
            vec![(vec![0, 1], v.clone()), (vec![1], v.clone())],
            vec![]
        )
        .is_err());
        assert!(ClusterStore::from_parts(cfg, vec![(vec![0], v.clone())], vec![0]).is_err());
        assert!(ClusterStore::from_parts(cfg, vec![(vec![2, 0], v)], vec![1]).is_ok());
    }
}
