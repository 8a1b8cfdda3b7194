//! Paired t-tests, Benjamini–Yekutieli correction and per-(group × phase)
//! aggregation of representational change.

mod aggregate;
mod fdr;
mod special;
mod ttest;

pub use aggregate::{
    aggregate_group_phase, interference_breakdown, AfterReduction, AnalysisOptions, BreakdownRow,
    GroupPhaseStat,
};
pub use fdr::{by_correction, by_thresholds, harmonic};
pub use special::{ln_gamma, regularized_incomplete_beta, student_t_cdf};
pub use ttest::{mean_and_se, paired_t_one_sided, PairedTTest};
