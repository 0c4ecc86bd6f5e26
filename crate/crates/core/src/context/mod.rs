//! Cross-utterance context: the cache, the two fusion layouts and
//! attention pooling.

pub mod cache;
pub mod fusion;
pub mod pool;

pub use cache::{CacheEntry, ContextCache};
pub use fusion::{context_rows, fuse_frame_concat, fuse_pooled};
pub use pool::{AttentionPool, DensePool, PoolOutput};
