//! Joint network, transducer loss, greedy decoding and the full model.

pub mod decode;
pub mod joint;
pub mod loss;
pub mod model;
pub mod wer;

pub use decode::{greedy_decode, GreedyModel};
pub use joint::Joint;
pub use loss::{rnnt_loss, Lattice, BLANK};
pub use model::{BatchForward, BatchItem, CacheInput, ContextConfig, Decoded, ModelConfig, Transducer, UtteranceContext};
pub use wer::{align, matched_positions, wer, EditOp, ErrorCounts};
