//! L∞ PGD attacks on the reference network and BMU displacement analysis.

mod displacement;
mod pgd;
mod ttest;

pub use displacement::{
    curves_csv, displacement_experiment, raw_distances_csv, ttest_csv, DisplacementCurve,
    DisplacementMetric, DisplacementReport,
};
pub use pgd::{pgd_attack, PgdConfig};
pub use ttest::{
    ln_gamma, regularized_incomplete_beta, student_t_cdf, two_sided_p, welch_t_test, TTestResult,
};
