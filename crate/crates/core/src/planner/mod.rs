//! FLOPs cost model and budgeted per-block rate selection.

mod flops;
mod mckp;
mod report;

pub use flops::{
    attention_share, block_overhead_flops, build_cost_table, feature_map_flops, flops_at_rate, flops_attention,
    monotone_crossover, AttentionDims, CostTable, ACTIVATION_FLOPS, POWER_FLOPS, SOFTMAX_FLOPS_PER_SCORE,
};
pub use mckp::{
    brute_force_mckp, brute_force_mckp_matrices, homogeneous_select, lowest_error_blocks, solve_mckp,
    solve_mckp_matrices, Budget, RatePlan, BRUTE_FORCE_MAX_BLOCKS, DEFAULT_BUDGET_UNITS,
};
pub use report::{asymptotic_reduction, standard_grid, reduction_report, ReductionReport, REPORT_CSV_HEADER};
