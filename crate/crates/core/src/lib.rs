//! Streaming spoken-language understanding with a purely convolutional
//! intent classifier.
//!
//! Audio is turned into 41-dimensional filterbank frames ([`feat`]), run
//! through a stack of valid convolutions whose outputs are max-pooled over
//! time ([`nn`]), and classified by a small fully connected head. Because
//! the pooling is a max, the conv stack can be run on overlapping segments
//! while audio is still arriving and the per-segment embeddings merged by
//! an elementwise max ([`stream`]); only the last segment and the head
//! remain after the final sample.

pub mod feat;
pub mod nn;
pub mod stream;
pub mod train;
pub mod data;
pub mod weights;
