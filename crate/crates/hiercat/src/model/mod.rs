//! Model architectures: the unified structured-output model and the
//! specialist-pipeline baseline it replaces.

pub mod baseline;
pub mod encoder;
pub mod unified;

pub use baseline::{Pipeline, PipelinePrediction, TemplateModel};
pub use encoder::{Encoder, Features};
pub use unified::{
    count_parameters, ForwardOpts, InputKind, LevelLatents, LevelLogits, Outputs,
    ParameterAccounting, UnifiedModel, UnifiedModelConfig, Variant, RESNET50_PARAMS,
};
