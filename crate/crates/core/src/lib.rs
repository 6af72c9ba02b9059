pub mod config;
pub mod container;
pub mod contrast;
pub mod data;
pub mod encoder;
pub mod error;
pub mod params;
pub mod pipeline;
pub mod promptlm;
pub mod prototypes;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use container::Container;
pub use contrast::{NegativeQueue, Temperatures};
pub use data::{TimeSeries, TsToken};
pub use encoder::{Decoder, Encoder, EncoderConfig, ProjectionHead};
pub use error::{Error, Result};
pub use params::{Adam, ParamKind, ParamStore};
pub use prototypes::{PrototypeSet, VocabMatrix};
pub use tape::{Gradients, Segments, Tape, Var};
pub use tensor::Tensor;
pub use config::{RunConfig, Task};
pub use pipeline::{Checkpoint, Event, Report};
pub use promptlm::{FrozenLM, SoftPrompt};
