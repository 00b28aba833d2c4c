//! On-disk formats: WAV ingestion, the AVT1 tensor container and checkpoints.

pub mod avt;
pub mod checkpoint;
pub mod wav;

pub use avt::{AvtData, AvtFile};
pub use checkpoint::Checkpoint;
pub use wav::{read_wav, write_wav};
