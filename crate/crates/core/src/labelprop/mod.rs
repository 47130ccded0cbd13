//! Label propagation through video by patch-feature affinity, with the
//! region, contour, part and keypoint scores used to judge it.

mod eval;
mod propagate;
mod scores;

pub use eval::{
    downsample_labels, evaluate_video, load_videos, run_eval, save_videos, upsample_labels, EvalVideo, FeatureExtractor, IdentityFeatures,
    MetricsReport, Task, VideoScores,
};
pub use propagate::{hard_labels, normalize_rows, one_hot, propagate_frame, PropagationConfig, PropagationContext};
pub use scores::{boundary, boundary_f, boundary_tolerance, jaccard, miou, pck};
