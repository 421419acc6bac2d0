//! Dense tensors, reverse-mode differentiation, optimizers and checkpoints.

mod checkpoint;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{finite_difference_check, GradCheckReport, REL_ERROR_FLOOR};
pub use optim::{adam_step, cosine_lr, AdamConfig, OptimizerState};
pub use params::{trunc_normal, ParamId, ParamStore, Parameter, INIT_STD};
pub use params::hex;
pub use rng::{Seeds, StreamRng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Storage precision of trainable parameters. Arithmetic is always `f64`;
/// under `F32` every optimizer update is rounded to the nearest `f32`, so a
/// 32-bit checkpoint round-trips exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "f32" | "32" => Ok(Self::F32),
            "f64" | "64" => Ok(Self::F64),
            other => Err(crate::error::Error::Input(format!("unknown precision `{other}`"))),
        }
    }
}
