pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod ops;
pub mod params;
pub mod sequential;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Mode, Parameter, Tape, Var};
pub use init::{InitKind, InitScheme};
pub use params::ParamStore;
pub use sequential::{build_sequential, LayerSpec, SeqOutput, SequentialNet};
pub use tensor::{Scalar, Shape, Tensor5};
pub use nets::{build_network, denoise, Arch, Network, NetworkSpec};
pub use volume::Volume;
pub use losses::{make_loss, LossConfig, LossKind, LossNetSpec, SsimParams};
pub use optim::{Adam, AdamConfig};
