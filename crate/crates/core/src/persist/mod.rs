//! Binary checkpoint container.

mod checkpoint;

pub use checkpoint::{
    check_compatible, load_checkpoint, save_checkpoint, write_atomic, Checkpoint, Provenance, RngState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
