//! Occupancy-aware node specialization: given a histogram of node
//! occupancies and a per-capacity space function, choose the set of k
//! storage variants that minimizes total bytes.
//!
//! The optimum over all specialization functions is attained by a normalized
//! one, i.e. a partition of `[1, n]` into k consecutive intervals where each
//! interval maps to its right endpoint. That reduces the search to a
//! dynamic program over interval costs `c(i, j) = s(j) * (F_j - F_{i-1})`
//! with witness backtracking to recover the split points.
//!
//! Non-monotone space functions (a dense 256-slot layout undercutting large
//! sparse layouts) are handled by first taking the monotone envelope
//! `s'(i) = min_{i <= l <= n} s(l)`, solving under `s'`, and remapping each
//! chosen specialization to the cheapest capacity at or above it under the
//! original `s`.

mod dp;
mod plan;

pub use dp::{
    brute_force, cumulative, interval_cost, monotone_envelope, pareto_sweep, remap, solve,
    Histogram, SpaceFunction, SpecializationPlan, INFEASIBLE,
};
pub use plan::{read_histogram_csv, write_sweep_csv, PlanFile};
