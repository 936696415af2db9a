//! Sample-quality metrics, embedding geometry, and the fine-tuning-mode
//! benchmark.

mod bench;
mod geometry;
mod metrics;
mod report;

pub use bench::{benchmark_modes, throughput_probe, BenchReport, BenchRow, BenchSetup};
pub use geometry::{embedding_geometry, EmbeddingGeometry};
pub use metrics::{diversity, frechet_gauss, mean_cov, sliced_w2, FrechetResult};
pub use report::{metric_report, ClassMetrics, MetricReport, OverallMetrics};
