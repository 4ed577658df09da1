//! Experiment plumbing: replay buffer, on-disk formats, run configuration,
//! the four phases (pretrain, collect, adapt, evaluate), and the CLI that
//! drives them. One writer per run directory; evaluation only reads.

pub mod buffer;
pub mod cli;
pub mod config;
pub mod formats;
pub mod phases;

pub use buffer::ReplayBuffer;
pub use config::{CollectDriver, DatasetPolicy, RunConfig};
pub use formats::{
    export_metrics, read_metrics, Checkpoint, DatasetMeta, MetricsWriter, OfflineDataset,
    RewardDataset,
};
