//! Declarative experiments: configuration, seeded parallel execution, CSV
//! output and cross-run comparison.
//!
//! Every random component draws from a stream derived from the master seed,
//! a component label and the replica index, so identical configs produce
//! byte-identical output whatever the thread count.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{Algorithm, ExperimentConfig, LruSpec, PopularitySpec, TopologySpec};
pub use experiment::{
    aggregate_series, build_cells, build_topology, cell_misses, cell_std_error, emit_series, load_popularity,
    paired_std_error, read_summary, run_experiment, topology_digest, ResultRecord, SeriesPoint, SummaryRow,
};
pub use report::{compare_report, RecordSet, Report, ReportRow};
