//! Frozen-embedding evaluation: extraction, linear probe, k-NN,
//! k-means with AMI/DBI, cross-magnification consistency gaps,
//! zero-shot segmentation, and PCA export.

pub mod cluster;
pub mod consistency;
pub mod embed;
pub mod metrics;
pub mod pca;
pub mod probe;
pub mod segment;

pub use cluster::{ami, dbi, kmeans, KmeansResult};
pub use consistency::{consistency_analysis, gaps, ConsistencyReport};
pub use embed::{embed_tiles, read_embeddings, write_embeddings, EmbedFilter, EmbeddingSet, RowMeta, WhichNet};
pub use metrics::{named_f1, Metrics};
pub use pca::{pca_export, pca_project, PcaRow};
pub use probe::{knn_classify, knn_predict, macro_f1, train_probe, ProbeConfig, ProbeModel, TrainedOn};
pub use segment::{consistency_pct, gt_grid, pool_grids, seg_metrics, segment, SegReport};
