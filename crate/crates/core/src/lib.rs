//! Sensitivity analysis for matched observational studies with several
//! outcomes.
//!
//! The crate covers the whole pipeline: a validated matched design, the
//! sum-statistic score constants for the supported test statistics,
//! randomization inference at `Gamma = 1`, single-outcome worst-case bounds,
//! the joint minimax program in which one vector of hidden biases has to
//! explain away every outcome at once, familywise error control through
//! closed testing, brute-force oracles, and a Monte Carlo power harness.

pub mod design;
pub mod error;
pub mod minimax;
pub mod multiplicity;
pub mod normal;
pub mod oracle;
pub mod randomization;
pub mod sensitivity;
pub mod simulation;
pub mod stats;

mod ipm;

pub use design::{
    apply_hypothesis, load_design, read_design, AdjustedOutcomes, Alternative, ColumnSchema,
    Gamma, HypothesisSpec, MatchedDesign, Member, NullKind, Stratum,
};
pub use error::{Result, SensiError};
pub use minimax::{
    implied_probability, minimax_rejects, solve_minimax, zeta, zeta_one_sided,
    AssignmentProbabilities, Certificate, MinimaxProblem, MinimaxSolution, SolverConfig,
    NEG_SENTINEL,
};
pub use multiplicity::{
    closed_testing, closed_testing_with, gamma_star, holm_combine, sequential_rejection, ClosedTestingResult,
    ClosedTestingRule, GammaChangepoint, GammaSearch, HolmResult, IntersectionNull,
    RejectionState, SuccessorRule,
};
pub use oracle::OracleResult;
pub use randomization::{deviate, exact_tail_probability, uniform_moments, MomentPair};
pub use sensitivity::{
    separable_two_sided, separable_worst_case, single_outcome_qp, stratum_candidates,
    worst_case_pvalue, Direction, WorstCaseBound, WorstCasePValue,
};
pub use simulation::{run_power_study, PowerReport, SimulationScenario};
pub use stats::{ScoreColumn, ScoreMatrix, StatisticKind};
