//! Experiment driver: datasets, configuration, sweeps and CSV tables.

pub mod config;
pub mod csvio;
pub mod data;
pub mod experiments;

pub use config::{parse_key_values, read_config_file, DataSource, ExperimentConfig, KeyValues, KEYS};
pub use data::{generate_synthetic, load_csv_dataset, CsvSchema, SyntheticDatasetSpec};
pub use experiments::{
    factorizations, grid, lr_modulation_ab, mu_lambda_suite, run_experiment, sweep_tradeoff,
    GridCell, LrAbRow, MuLambdaReport, MuLambdaRow, ProductGroup, SweepOutcome, TradeoffRow,
    LR_AB_BATCH, LR_AB_CSV_HEADER, LR_AB_LEARNERS, LR_AB_STABILITY_EDGE_ALPHA0, MU_LAMBDA_CSV_HEADER,
    TRADEOFF_CSV_HEADER,
};
