//! Corpus representation, file formats, clip-aware batching and the
//! synthetic dependency corpus.

pub mod corpus;
pub mod io;
pub mod serialize;
pub mod synthetic;

pub use corpus::{Annotations, Clip, Corpus, Utterance};
pub use io::{load_corpus, store_corpus, ManifestRecord};
pub use serialize::{plan_clips, serialize, BatchPlan, SlotStep};
pub use synthetic::{generate, SyntheticSpec, SyntheticVocab};
