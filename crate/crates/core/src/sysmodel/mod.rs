//! Scenario configuration, channel generation, rates and dataset files.

mod channel;
mod config;
mod dataset;
mod rates;

pub use channel::{
    gen_channels, numerical_rank, ula_steering, ura_shape, ura_steering, ChannelSample,
};
pub use config::{
    dbm_to_watts, default_noise_power, path_loss, watts_to_dbm, SystemConfig, BANDWIDTH_HZ,
    NOISE_PSD_DBM_HZ, RHO0_LIN_FITTED, RHO0_LIN_NOMINAL,
};
pub use dataset::{dataset_read, dataset_read_expect, dataset_write, read_samples, write_samples};
pub use rates::{
    achievable_rates, cascaded_channel, effective_channel, rates_from_effective,
    reflection_vector, simulate_rx, RateReport, POWER_SLACK,
};
