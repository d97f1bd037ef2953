//! Image metrics, feature-space proxies, statistics and report writers.

pub mod analysis;
pub mod features;
pub mod metrics;
pub mod report;
pub mod stats;

pub use analysis::{compare, iou_trend, summarize, Comparison, Metric, SampleMetrics};
pub use features::{fid_proxy, lpips_proxy, FeatureNet, FeatureNetSpec};
pub use metrics::{metric_l1, metric_psnr, metric_ssim, PSNR_CAP};
pub use stats::{bootstrap_se, mann_whitney_u, spearman, Alternative};
