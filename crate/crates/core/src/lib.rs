//! Deformably-scaled transposed convolution.
//!
//! A transposed convolution scatters each input vector through a `K^D` kernel
//! onto a fixed output grid. The deformable variant lets a learned head move
//! every scatter target to a real-valued location, then spreads the value
//! over nearby output points with bilinear or Gaussian-mixture weights.

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod cases;
pub mod error;
pub mod grid;
pub mod harness;
pub mod heads;
pub mod kernels;
pub mod layer;
pub mod scatter;
pub mod tensor;

pub use autodiff::{
    backward, fd_gradient, gradcheck, mse_loss_and_grad, GradBundle, GradcheckOptions, GradcheckReport, ParamSelector,
};
pub use cases::{case_grid, compare_with_oracle, random_case, OracleComparison, RandomCase};
pub use error::{DstcError, Result};
pub use grid::{make_ref_grid, Extents, FPoint, IPoint, LocationMap, RefGrid};
pub use harness::{
    gen_task, highfreq_energy, train, Dataset, OptimState, OptimizerConfig, TaskKind, ToyTask, TrainOptions,
    TrainResult,
};
pub use heads::{ConvHead, OffsetField, OffsetMode, ScoreField, ScoreMode};
pub use kernels::{GaussianBank, DEFAULT_K_SIGMA, FINAL_LAYER_VARIANCES, INTERMEDIATE_VARIANCES};
pub use layer::{
    forward, forward_cached, init_layer, load_params, parameter_count, save_params, zero_params, DstcConfig,
    ForwardCache, LayerParams, OffsetSetting, ParamBreakdown, ParamGroup, ScoreSetting, Variant,
};
pub use scatter::{dstc_forward, scatter_oracle, strided_conv, tc_forward, Interpolation, WeightKernel};
pub use tensor::{FeatureMap, Tensor};
