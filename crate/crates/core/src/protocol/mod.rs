//! Round protocol: server procedure, device update, loss-weight schedule,
//! communication ledger and the per-round metrics stream.

mod config;
mod device;
mod ledger;
mod metrics;
mod schedule;
mod server;

pub use config::{
    device_seed, mix_seed, DatasetSpec, Mode, PartitionConfig, PreparedData, RunConfig, Schedule,
};
pub use device::{device_update, download_components, round_weights, upload_components, RoundUpdate};
pub use ledger::{CommLedger, RoundTraffic};
pub use metrics::{metrics_csv_bytes, read_metrics_csv, write_metrics_csv, write_metrics_jsonl, RoundMetrics};
pub use schedule::rho_schedule;
pub use server::{
    aggregate_deltas, evaluate, evaluate_mean, run_config, select_devices, selection_size, GlobalState,
    Simulation,
};
