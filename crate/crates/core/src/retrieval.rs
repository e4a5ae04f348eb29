//! Selection policies. Each produces the set of tokens attended at one
//! decoding step under a token budget B.
//!
//! All scores are raw dot products computed through the same kernel, and all
//! rankings break ties toward the lower id, so policies that reduce to one
//! another (singleton clusters, one-token pages, SparQ with r = d_h) yield
//! identical masks.

use std::cmp::Ordering;

use crate::clustering::ClusterStore;
use crate::error::{Error, Result};
use crate::types::{dot_unchecked, KvCache, SelectionMask};

pub const DEFAULT_PAGE_SIZE: usize = 16;

/// Number of tokens a policy may retrieve per step (B).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RetrievalBudget(usize);

impl RetrievalBudget {
    pub fn new(tokens: usize) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Parameter("budget must be >= 1".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(self) -> usize {
        self.0
    }
}

/// Outcome of cluster-granularity retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSelection {
    /// Clusters that contributed tokens, best first. The last one may be
    /// truncated.
    pub ranked_cluster_ids: Vec<usize>,
    /// Budgeted tokens, at most B.
    pub included_tokens: SelectionMask,
    pub truncated_cluster_id: Option<usize>,
    /// Not-yet-clustered tokens, attended on top of the budget.
    pub recent_tokens: Vec<usize>,
}

impl ClusterSelection {
    /// Everything the step attends to: budgeted plus recent tokens.
    pub fn attended(&self) -> SelectionMask {
        self.included_tokens.union(&SelectionMask::from_indices(
            self.recent_tokens.iter().copied(),
        ))
    }
}

fn check_query(q: &[f32], d_h: usize) -> Result<()> {
    if q.len() != d_h {
        return Err(Error::Dimension {
            expected: d_h,
            actual: q.len(),
        });
    }
    Ok(())
}

/// Descending by score, then ascending by id.
fn by_score_desc(a: &(usize, f32), b: &(usize, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Ids of the `b` best-scoring entries.
fn top_b(mut scored: Vec<(usize, f32)>, b: usize) -> SelectionMask {
    if b < scored.len() {
        scored.select_nth_unstable_by(b - 1, by_score_desc);
        scored.truncate(b);
    }
    SelectionMask::from_indices(scored.into_iter().map(|(i, _)| i))
}

/// `q · μ_j` for every cluster, in cluster-id order.
pub fn score_clusters(q: &[f32], store: &ClusterStore) -> Result<Vec<(usize, f32)>> {
    if !store.is_initialized() {
        return Err(Error::NotInitialized);
    }
    store
        .clusters()
        .iter()
        .map(|c| {
            check_query(q, c.centroid.dim())?;
            Ok((c.id, dot_unchecked(q, &c.centroid)))
        })
        .collect()
}

/// Greedy cluster retrieval: whole clusters in score order until the next one
/// would overflow B, then that cluster's lowest-index members fill the rest.
pub fn select_starc(
    q: &[f32],
    store: &ClusterStore,
    budget: RetrievalBudget,
) -> Result<ClusterSelection> {
    let mut scores = score_clusters(q, store)?;
    scores.sort_by(by_score_desc);

    let b = budget.tokens();
    let mut included = Vec::with_capacity(b);
    let mut ranked = Vec::new();
    let mut truncated = None;
    for (id, _) in scores {
        if included.len() == b {
            break;
        }
        let members = &store.clusters()[id].members;
        let room = b - included.len();
        if members.len() > room {
            included.extend_from_slice(&members[..room]);
            truncated = Some(id);
        } else {
            included.extend_from_slice(members);
        }
        ranked.push(id);
    }
    Ok(ClusterSelection {
        ranked_cluster_ids: ranked,
        included_tokens: SelectionMask::from_indices(included),
        truncated_cluster_id: truncated,
        recent_tokens: store.unclustered().to_vec(),
    })
}

pub fn select_full(cache: &KvCache) -> SelectionMask {
    SelectionMask::all(cache.len())
}

/// The `min(B, L)` most recent tokens.
pub fn select_window(cache: &KvCache, budget: RetrievalBudget) -> SelectionMask {
    let l = cache.len();
    SelectionMask::from_indices(l.saturating_sub(budget.tokens())..l)
}

/// Exact token-wise top-B by `q · k_i`.
pub fn select_token_oracle(
    q: &[f32],
    cache: &KvCache,
    budget: RetrievalBudget,
) -> Result<SelectionMask> {
    check_query(q, cache.d_h())?;
    let scored = cache
        .keys()
        .enumerate()
        .map(|(i, k)| (i, dot_unchecked(q, k)))
        .collect();
    Ok(top_b(scored, budget.tokens()))
}

/// The `r` components of `q` with the largest magnitude, ascending by index.
pub fn sparq_components(q: &[f32], r: usize) -> Result<Vec<usize>> {
    if r == 0 || r > q.len() {
        return Err(Error::Parameter(format!(
            "sparq r = {r} outside 1..={}",
            q.len()
        )));
    }
    let mut dims: Vec<usize> = (0..q.len()).collect();
    dims.sort_by(|&a, &b| q[b].abs().total_cmp(&q[a].abs()).then(a.cmp(&b)));
    dims.truncate(r);
    dims.sort_unstable();
    Ok(dims)
}

/// Top-B by an approximate score that only reads the `r` largest-magnitude
/// query components.
pub fn select_sparq(
    q: &[f32],
    cache: &KvCache,
    r: usize,
    budget: RetrievalBudget,
) -> Result<SelectionMask> {
    check_query(q, cache.d_h())?;
    let dims = sparq_components(q, r)?;
    let scored = cache
        .keys()
        .enumerate()
        .map(|(i, k)| (i, dims.iter().map(|&d| q[d] * k[d]).sum::<f32>()))
        .collect();
    Ok(top_b(scored, budget.tokens()))
}

/// Per-page element-wise key bounds over positional pages.
#[derive(Debug, Clone, PartialEq)]
pub struct PageIndex {
    page_size: usize,
    d_h: usize,
    len: usize,
    min_keys: Vec<f32>,
    max_keys: Vec<f32>,
}

impl PageIndex {
    pub fn new(d_h: usize, page_size: usize) -> Result<Self> {
        if page_size == 0 {
            return Err(Error::Parameter("page size must be >= 1".into()));
        }
        Ok(Self {
            page_size,
            d_h,
            len: 0,
            min_keys: Vec::new(),
            max_keys: Vec::new(),
        })
    }

    /// Extends the index with the next token's key.
    pub fn push_key(&mut self, key: &[f32]) -> Result<()> {
        check_query(key, self.d_h)?;
        if self.len.is_multiple_of(self.page_size) {
            self.min_keys.extend_from_slice(key);
            self.max_keys.extend_from_slice(key);
        } else {
            let start = self.min_keys.len() - self.d_h;
            for (d, &k) in key.iter().enumerate() {
                let lo = &mut self.min_keys[start + d];
                *lo = lo.min(k);
                let hi = &mut self.max_keys[start + d];
                *hi = hi.max(k);
            }
        }
        self.len += 1;
        Ok(())
    }

    /// Brings the index up to date with every row of `cache`.
    pub fn sync(&mut self, cache: &KvCache) -> Result<()> {
        for t in self.len..cache.len() {
            self.push_key(cache.key(t))?;
        }
        Ok(())
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn num_pages(&self) -> usize {
        self.min_keys.len() / self.d_h
    }

    /// Tokens covered.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn min_key(&self, page: usize) -> &[f32] {
        &self.min_keys[page * self.d_h..(page + 1) * self.d_h]
    }

    pub fn max_key(&self, page: usize) -> &[f32] {
        &self.max_keys[page * self.d_h..(page + 1) * self.d_h]
    }

    pub fn page_tokens(&self, page: usize) -> std::ops::Range<usize> {
        let start = page * self.page_size;
        start..(start + self.page_size).min(self.len)
    }

    /// Upper bound on `q · k` for any key inside `page`.
    pub fn page_score(&self, q: &[f32], page: usize) -> f32 {
        self.min_key(page)
            .iter()
            .zip(self.max_key(page))
            .zip(q)
            .map(|((&lo, &hi), &qd)| (qd * lo).max(qd * hi))
            .sum()
    }
}

pub fn build_page_index(cache: &KvCache, page_size: usize) -> Result<PageIndex> {
    let mut index = PageIndex::new(cache.d_h(), page_size)?;
    index.sync(cache)?;
    Ok(index)
}

/// Page-granularity retrieval: best pages first, last page truncated to its
/// lowest indices if B is not a page multiple.
pub fn select_page_quest(
    q: &[f32],
    index: &PageIndex,
    budget: RetrievalBudget,
) -> Result<SelectionMask> {
    check_query(q, index.d_h)?;
    let full_pages = index.len() / index.page_size;
    let mut scored: Vec<(usize, f32)> = (0..full_pages)
        .map(|p| (p, index.page_score(q, p)))
        .collect();
    scored.sort_by(by_score_desc);
    // A short trailing page would shift the fill off page boundaries, so it
    // only competes once every complete page is already in.
    if full_pages < index.num_pages() {
        scored.push((full_pages, index.page_score(q, full_pages)));
    }
    let b = budget.tokens();
    let mut selected = Vec::with_capacity(b.min(index.len()));
    for (page, _) in scored {
        let room = b - selected.len();
        if room == 0 {
            break;
        }
        selected.extend(index.page_tokens(page).take(room));
    }
    Ok(SelectionMask::from_indices(selected))
}
