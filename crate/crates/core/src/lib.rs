//! Clustering-based KV-cache remapping for sparse attention on
//! row-granularity processing-in-memory hardware.
//!
//! Keys are grouped by online spherical K-means; clusters are placed
//! contiguously so that a whole-row memory fetch brings in tokens that tend
//! to be selected together. The crate provides the clustering, the cluster
//! retrieval policy and its token/page baselines, exact sparse attention with
//! recall metrics, a fetch-count and cost model for row-granularity PIM, and a
//! synthetic workload generator with a binary trace format.

pub mod attention;
pub mod clustering;
pub mod error;
pub mod experiment;
pub mod pim;
pub mod retrieval;
pub mod types;
pub mod workload;

pub use attention::{dense_attend, output_error, recall_rate, sparse_attend, AttentionOutput};
pub use clustering::{
    kmeanspp_init, spherical_kmeans, Cluster, ClusterStore, ClusteringConfig, KMeansOutcome,
};
pub use error::{Error, Result};
pub use experiment::{
    aggregate_summaries, run, sweep, ExperimentSpec, Policy, PolicySummary, RunReport, StepRecord,
};
pub use pim::{
    cost, count_fetches, layout_clustered, layout_sequential, Cost, CostModel, FetchStats,
    LayoutMap, PimConfig, PimGeometry,
};
pub use retrieval::{
    build_page_index, score_clusters, select_full, select_page_quest, select_sparq, select_starc,
    select_token_oracle, select_window, ClusterSelection, PageIndex, RetrievalBudget,
};
pub use types::{cosine_similarity, dot, HeadVector, KvCache, SelectionMask};
pub use workload::{generate, load_trace, save_trace, SyntheticConfig, Trace};
