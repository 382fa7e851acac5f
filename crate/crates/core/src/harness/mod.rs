//! Workload generation, block replay, verification and statistics: the
//! experimental methodology at desk scale.

mod run;
mod workload;

pub use run::{
    block_mutations, collect_stats, replay, verify, ReplayMode, ReplayOptions, ReplayReport,
    StatsReport, VerifyReport,
};
pub use workload::{generate, parse_workload, write_workload, Op, Workload, WorkloadMode, WorkloadSpec};
