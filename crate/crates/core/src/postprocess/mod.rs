//! Binary region extraction from reconstructions and the evaluation metrics.

mod canny;
mod metrics;

pub use canny::{canny_edges, canny_region, CannyConfig};
pub use metrics::{ede, evaluate, iou, rpd, write_metric_rows, MetricReport};
