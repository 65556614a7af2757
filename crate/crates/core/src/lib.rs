//! Batch-norm folding and layer-wise relevance propagation for small
//! feed-forward and convolutional ReLU networks.

pub mod error;
pub mod fusion;
pub mod heatmap;
pub mod kernels;
pub mod lrp;
pub mod model;
pub mod netpbm;
pub mod par;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use fusion::{fuse_network, FusionPolicy, FusionReport};
pub use heatmap::{render_heatmap, Heatmap, Normalization};
pub use lrp::{explain, BiasPolicy, LrpConfig, PoolRule, RelevanceTrace, SeedClass};
pub use model::{load_model, save_model, Conv2d, Dense, ForwardPass, Layer, Network, Placement};
pub use tensor::{BnParams, Tensor};
