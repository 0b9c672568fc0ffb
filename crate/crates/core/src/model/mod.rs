//! Toy depth network with low-rank adapters and an EMA teacher.

pub mod checkpoint;
mod layers;
mod net;
mod params;

pub use checkpoint::Checkpoint;
pub use layers::{lora_forward, Linear, LoraLinear, Norm};
pub use net::{clone_to_teacher, ema_update, Block, NetConfig, StudentNet, TeacherNet};
pub use params::{Bound, Param, ParamId, ParamKind, ParamStore, TuneScope};
