use proptest::prelude::*;

use sensi_core::minimax::objective;
use sensi_core::multiplicity::all_intersections;
use sensi_core::oracle::{grid_minimax, objective_at_u, random_instance};
use sensi_core::randomization::exact_tail_count;
use sensi_core::stats::score_column;
use sensi_core::{
    apply_hypothesis, closed_testing_with, deviate, gamma_star, holm_combine, minimax_rejects, run_power_study,
    separable_worst_case, sequential_rejection, single_outcome_qp, solve_minimax, uniform_moments,
    worst_case_pvalue, zeta, Alternative, AssignmentProbabilities, ClosedTestingRule, Direction, Gamma,
    GammaSearch, HypothesisSpec, MatchedDesign, Member, MinimaxProblem, NullKind, ScoreMatrix,
    SimulationScenario, SolverConfig, StatisticKind, Stratum,
};

/// Strata of two to four members with `k` outcomes in [-5, 5]. When
/// `flip` is set for a stratum every member but one is labeled treated.
fn design_strategy(k: usize, max_strata: usize) -> impl Strategy<Value = MatchedDesign> {
    prop::collection::vec(
        (2usize..=4, any::<bool>()).prop_flat_map(move |(n, flip)| {
            (
                Just(n),
                Just(flip),
                0..n,
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, k), n),
            )
        }),
        2..=max_strata,
    )
    .prop_map(move |blocks| {
        let strata = blocks
            .into_iter()
            .enumerate()
            .map(|(i, (_, flip, special, values))| Stratum {
                id: format!("s{i}"),
                members: values
                    .into_iter()
                    .enumerate()
                    .map(|(j, outcomes)| Member {
                        treated: (j == special) != flip,
                        outcomes,
                    })
                    .collect(),
                flipped: false,
            })
            .collect();
        MatchedDesign::new(strata, (1..=k).map(|j| format!("y{j}")).collect()).unwrap()
    })
}

fn pairs_strategy(max_pairs: usize) -> impl Strategy<Value = MatchedDesign> {
    prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..=max_pairs).prop_map(|v| {
        let pairs: Vec<_> = v.into_iter().map(|(a, b)| (vec![a], vec![b])).collect();
        MatchedDesign::from_pairs(&pairs).unwrap()
    })
}

fn scores(design: &MatchedDesign, kind: StatisticKind) -> ScoreMatrix {
    let columns = (0..design.n_outcomes())
        .map(|j| score_column(design, &design.outcome_column(j), kind).unwrap())
        .collect();
    ScoreMatrix { columns }
}

fn nondegenerate(s: &ScoreMatrix, d: &MatchedDesign) -> bool {
    (0..s.n_outcomes()).all(|k| uniform_moments(s, d, k).variance > 1e-9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonicalization_is_idempotent(d in design_strategy(2, 8)) {
        let once = d.canonicalized().unwrap();
        prop_assert_eq!(&once, &d);
        prop_assert_eq!(once.canonicalized().unwrap(), once);
        prop_assert!(d.strata().iter().all(|s| s.members.iter().filter(|m| m.treated).count() == 1));
    }

    #[test]
    fn hypotheses_only_touch_treated_values(d in design_strategy(1, 8), tau in -3.0f64..3.0) {
        let sharp = apply_hypothesis(&d, &HypothesisSpec::sharp(1, Alternative::TwoSided)).unwrap();
        prop_assert_eq!(sharp.column(0), &d.outcome_column(0)[..]);
        let spec = HypothesisSpec { nulls: vec![NullKind::Additive(tau)], alternatives: vec![Alternative::TwoSided] };
        let f = apply_hypothesis(&d, &spec).unwrap();
        let r = d.outcome_column(0);
        let mut pos = 0;
        for s in d.strata() {
            for j in 0..s.len() {
                if !s.originally_treated(j) {
                    prop_assert_eq!(f.column(0)[pos], r[pos]);
                } else {
                    prop_assert!((f.column(0)[pos] - (r[pos] - tau)).abs() < 1e-12);
                }
                pos += 1;
            }
        }
    }

    #[test]
    fn observed_statistic_is_the_treated_score_sum(d in design_strategy(1, 8)) {
        for kind in [StatisticKind::MeanDifference, StatisticKind::AlignedRank] {
            let col = score_column(&d, &d.outcome_column(0), kind).unwrap();
            let sum: f64 = d.treated_indices().iter().map(|&i| col.q[i]).sum();
            prop_assert_eq!(col.t_obs, sum);
        }
    }

    #[test]
    fn aligned_ranks_sum_to_triangular_number(d in design_strategy(1, 8)) {
        prop_assume!(d.strata().iter().all(|s| !s.flipped));
        let col = score_column(&d, &d.outcome_column(0), StatisticKind::AlignedRank).unwrap();
        let n = d.n_total() as f64;
        prop_assert!((col.q.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn huber_scores_are_odd_in_the_pair(d in pairs_strategy(20)) {
        let kind = StatisticKind::huber();
        let col = score_column(&d, &d.outcome_column(0), kind).unwrap();
        let swapped: Vec<(Vec<f64>, Vec<f64>)> = d
            .strata()
            .iter()
            .map(|s| (s.members[1].outcomes.clone(), s.members[0].outcomes.clone()))
            .collect();
        let e = MatchedDesign::from_pairs(&swapped).unwrap();
        let other = score_column(&e, &e.outcome_column(0), kind).unwrap();
        for (a, b) in col.q.iter().zip(&other.q) {
            prop_assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_pairs_negates_the_mean_difference_deviate(d in pairs_strategy(20)) {
        let s = scores(&d, StatisticKind::MeanDifference);
        prop_assume!(nondegenerate(&s, &d));
        let swapped: Vec<(Vec<f64>, Vec<f64>)> = d
            .strata()
            .iter()
            .map(|st| (st.members[1].outcomes.clone(), st.members[0].outcomes.clone()))
            .collect();
        let e = MatchedDesign::from_pairs(&swapped).unwrap();
        let t = scores(&e, StatisticKind::MeanDifference);
        let (m1, m2) = (uniform_moments(&s, &d, 0), uniform_moments(&t, &e, 0));
        prop_assert!((m1.mean - m2.mean).abs() < 1e-12);
        let d1 = deviate(s.column(0).t_obs, m1).unwrap();
        let d2 = deviate(t.column(0).t_obs, m2).unwrap();
        prop_assert!((d1 + d2).abs() < 1e-9);
    }

    #[test]
    fn exact_tail_spans_zero_to_one(d in design_strategy(1, 8)) {
        let col = score_column(&d, &d.outcome_column(0), StatisticKind::AlignedRank).unwrap();
        let offsets = d.offsets();
        let blocks = || offsets.windows(2).map(|w| &col.q[w[0]..w[1]]);
        let lo: f64 = blocks().map(|b| b.iter().copied().fold(f64::INFINITY, f64::min)).sum();
        let hi: f64 = blocks().map(|b| b.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum();
        let (c, n) = exact_tail_count(&col.q, offsets, lo, 1e6).unwrap();
        prop_assert_eq!(c, n);
        let (c, _) = exact_tail_count(&col.q, offsets, hi + 1.0, 1e6).unwrap();
        prop_assert_eq!(c, 0);
    }

    #[test]
    fn separable_means_are_monotone_in_gamma(d in design_strategy(1, 10), g in 1.0f64..5.0, step in 0.01f64..3.0) {
        let s = scores(&d, StatisticKind::AlignedRank);
        prop_assume!(nondegenerate(&s, &d));
        let (a, b) = (Gamma::new(g).unwrap(), Gamma::new(g + step).unwrap());
        let hi = |x| separable_worst_case(&s, &d, 0, x, Direction::Maximize).unwrap().mean;
        let lo = |x| separable_worst_case(&s, &d, 0, x, Direction::Minimize).unwrap().mean;
        prop_assert!(hi(b) >= hi(a) - 1e-9);
        prop_assert!(lo(b) <= lo(a) + 1e-9);
    }

    #[test]
    fn separable_mean_dominates_binary_confounders(
        d in design_strategy(1, 8),
        g in 1.0f64..8.0,
        bits in prop::collection::vec(any::<bool>(), 32),
    ) {
        let s = scores(&d, StatisticKind::MeanDifference);
        prop_assume!(nondegenerate(&s, &d));
        let gamma = Gamma::new(g).unwrap();
        let u: Vec<f64> = (0..d.n_total()).map(|i| f64::from(u8::from(bits[i]))).collect();
        let rho = AssignmentProbabilities::from_confounder(d.offsets(), &u, gamma).rho;
        let q = &s.column(0).q;
        let mean: f64 = q.iter().zip(&rho).map(|(a, b)| a * b).sum();
        let hi = separable_worst_case(&s, &d, 0, gamma, Direction::Maximize).unwrap().mean;
        let lo = separable_worst_case(&s, &d, 0, gamma, Direction::Minimize).unwrap().mean;
        prop_assert!(mean <= hi + 1e-9 && mean >= lo - 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn worst_case_pvalue_dominates_any_binary_confounder(
        d in design_strategy(1, 8),
        g in 1.0f64..5.0,
        bits in prop::collection::vec(any::<bool>(), 32),
    ) {
        let s = scores(&d, StatisticKind::AlignedRank);
        prop_assume!(nondegenerate(&s, &d));
        let gamma = Gamma::new(g).unwrap();
        let config = SolverConfig::uncertified();
        let worst = worst_case_pvalue(&s, &d, 0, Alternative::TwoSided, gamma, &config).unwrap();
        let u: Vec<f64> = (0..d.n_total()).map(|i| f64::from(u8::from(bits[i]))).collect();
        let rho = AssignmentProbabilities::from_confounder(d.offsets(), &u, gamma).rho;
        let q = &s.column(0).q;
        let (mut m, mut v) = (0.0, 0.0);
        for w in d.offsets().windows(2) {
            let e: f64 = (w[0]..w[1]).map(|i| q[i] * rho[i]).sum();
            let e2: f64 = (w[0]..w[1]).map(|i| q[i] * q[i] * rho[i]).sum();
            m += e;
            v += e2 - e * e;
        }
        prop_assume!(v > 1e-9);
        let d2 = (s.column(0).t_obs - m).powi(2) / v;
        prop_assert!(worst.deviate <= d2 * (1.0 + 1e-7) + 1e-9);
    }

    #[test]
    fn qp_is_no_worse_than_the_separable_choice(d in design_strategy(1, 8), g in 1.0f64..5.0) {
        let s = scores(&d, StatisticKind::AlignedRank);
        prop_assume!(nondegenerate(&s, &d));
        let gamma = Gamma::new(g).unwrap();
        let config = SolverConfig::uncertified();
        let qp = single_outcome_qp(&s, &d, 0, Alternative::TwoSided, gamma, 0.05, &config).unwrap();
        let problem = MinimaxProblem::new(&d, &s, &[0], &[Alternative::TwoSided], 0.05, gamma).unwrap();
        for dir in [Direction::Maximize, Direction::Minimize] {
            let sep = separable_worst_case(&s, &d, 0, gamma, dir).unwrap();
            let rho = AssignmentProbabilities::from_confounder(d.offsets(), &sep.u, gamma).rho;
            let z = zeta(&problem, 0, &rho);
            prop_assert!(qp.y <= z + 1e-7 * (1.0 + z.abs()));
        }
    }

    #[test]
    fn joint_solution_is_feasible_and_dominates_single_outcomes(seed in 0u64..100_000) {
        let p = random_instance(seed, 12, 3).unwrap();
        let config = SolverConfig::uncertified();
        let s = solve_minimax(&p, &config).unwrap();
        prop_assert!(s.rho.is_feasible(1e-9));
        for k in 0..p.outcomes.len() {
            let single = MinimaxProblem { outcomes: vec![p.outcomes[k].clone()], ..p.clone() };
            let y = solve_minimax(&single, &config).unwrap().y;
            prop_assert!(s.y >= y - 1e-7 * (1.0 + y.abs()), "joint {} below single {}", s.y, y);
        }
    }

    #[test]
    fn joint_value_is_nonincreasing_in_gamma(seed in 0u64..100_000, step in 0.05f64..2.0) {
        let p = random_instance(seed, 12, 3).unwrap();
        let config = SolverConfig::uncertified();
        let a = solve_minimax(&p, &config).unwrap().y;
        let q = p.with_gamma(Gamma::new(p.gamma.value() + step).unwrap());
        let b = solve_minimax(&q, &config).unwrap().y;
        prop_assert!(b <= a + 1e-7 * (1.0 + a.abs()));
    }

    #[test]
    fn one_sided_statistic_far_below_never_rejects(d in design_strategy(1, 8), g in 1.0f64..10.0) {
        let mut s = scores(&d, StatisticKind::MeanDifference);
        prop_assume!(nondegenerate(&s, &d));
        let lo: f64 = d.offsets().windows(2)
            .map(|w| s.column(0).q[w[0]..w[1]].iter().copied().fold(f64::INFINITY, f64::min))
            .sum();
        s.columns[0].t_obs = lo - 100.0;
        let p = MinimaxProblem::new(&d, &s, &[0], &[Alternative::Greater], 0.05, Gamma::new(g).unwrap()).unwrap();
        prop_assert!(!minimax_rejects(&p, &SolverConfig::uncertified()).unwrap());
    }

    #[test]
    fn closed_testing_contains_holm(d in design_strategy(3, 10), g in 1.0f64..2.0, shift in 0.0f64..4.0) {
        // push treated values up so that some hypotheses reject
        let strata: Vec<Stratum> = d.strata().iter().map(|s| {
            let mut s = s.clone();
            for m in s.members.iter_mut().filter(|m| m.treated) {
                for v in &mut m.outcomes { *v += shift; }
            }
            s
        }).collect();
        let d = MatchedDesign::new(strata, d.outcome_names().to_vec()).unwrap();
        let s = scores(&d, StatisticKind::AlignedRank);
        prop_assume!(nondegenerate(&s, &d));
        let gamma = Gamma::new(g).unwrap();
        let config = SolverConfig::uncertified();
        let alts = vec![Alternative::TwoSided; 3];
        let p: Vec<f64> = (0..3)
            .map(|k| worst_case_pvalue(&s, &d, k, Alternative::TwoSided, gamma, &config).unwrap().p)
            .collect();
        let holm = holm_combine(&p, 0.05);
        let closed = closed_testing_with(3, |h| match h.outcomes[..] {
            [j] => Ok(p[j] <= 0.05),
            _ => minimax_rejects(&MinimaxProblem::new(&d, &s, &h.outcomes, &alts, 0.05, gamma)?, &config),
        }).unwrap();
        for k in 0..3 {
            prop_assert!(!holm.reject[k] || closed.reject[k]);
        }
        prop_assert!(closed.trace.len() <= all_intersections(3).unwrap().len() + 1);
    }

    #[test]
    fn oracle_and_solver_objectives_agree(seed in 0u64..100_000, us in prop::collection::vec(0.0f64..1.0, 12)) {
        let p = random_instance(seed, 12, 3).unwrap();
        let u = &us[..p.n_total()];
        let rho = AssignmentProbabilities::from_confounder(&p.offsets, u, p.gamma).rho;
        let a = objective_at_u(&p, u);
        let b = objective(&p, &rho);
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn shifting_u_within_a_stratum_changes_nothing(seed in 0u64..100_000, us in prop::collection::vec(0.0f64..1.0, 12), c in -2.0f64..2.0) {
        let p = random_instance(seed, 12, 3).unwrap();
        let u = us[..p.n_total()].to_vec();
        let mut shifted = u.clone();
        for v in &mut shifted[p.offsets[0]..p.offsets[1]] {
            *v += c;
        }
        let a = objective_at_u(&p, &u);
        let b = objective_at_u(&p, &shifted);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn grid_value_bounds_the_solver_and_refinement_helps(seed in 0u64..100_000) {
        let p = random_instance(seed, 6, 2).unwrap();
        let y = solve_minimax(&p, &SolverConfig::uncertified()).unwrap().y;
        let coarse = grid_minimax(&p, 11, 0).unwrap().value;
        let fine = grid_minimax(&p, 11, 3).unwrap().value;
        prop_assert!(fine <= coarse);
        prop_assert!(fine >= y - 1e-6 * (1.0 + y.abs()));
    }

    #[test]
    fn gamma_star_honours_its_bracket(d in design_strategy(2, 12), shift in 1.0f64..4.0) {
        let strata: Vec<Stratum> = d.strata().iter().map(|s| {
            let mut s = s.clone();
            for m in s.members.iter_mut().filter(|m| m.treated) {
                for v in &mut m.outcomes { *v += shift; }
            }
            s
        }).collect();
        let d = MatchedDesign::new(strata, d.outcome_names().to_vec()).unwrap();
        let s = scores(&d, StatisticKind::AlignedRank);
        prop_assume!(nondegenerate(&s, &d));
        let config = SolverConfig::uncertified();
        let alts = vec![Alternative::TwoSided; 2];
        let reject = |g: Gamma| minimax_rejects(&MinimaxProblem::new(&d, &s, &[0, 1], &alts, 0.05, g)?, &config);
        let cp = gamma_star("minimax", &reject, &GammaSearch::default()).unwrap();
        prop_assume!(cp.anomalies.is_empty() && cp.bracket > 0.0);
        prop_assert!(cp.bracket <= 1e-3);
        prop_assert!(reject(Gamma::new(cp.gamma_star - cp.bracket).unwrap()).unwrap());
        prop_assert!(!reject(Gamma::new(cp.gamma_star + cp.bracket).unwrap()).unwrap());
    }
}

#[test]
fn sequential_rejection_stops_within_the_number_of_nulls() {
    for k in 1..=4 {
        let nulls = all_intersections(k).unwrap();
        let trace = sequential_rejection(&nulls, |_| Ok(true), &ClosedTestingRule).unwrap();
        assert!(trace.len() <= nulls.len() + 1);
        assert_eq!(trace.last().unwrap().rejected.len(), nulls.len());
    }
}

#[test]
fn power_is_nonincreasing_in_gamma() {
    let text = "tau = 0.4, 0.3\npairs = 60\ngammas = 1, 1.2, 1.5, 2\nreps = 60\nseed = 5\n";
    let scenario = SimulationScenario::parse(text).unwrap();
    let report = run_power_study(&scenario, &SolverConfig::uncertified()).unwrap();
    assert_eq!(report.violations.bonferroni_over_minimax, 0);
    for method in ["separate", "minimax"] {
        let rates: Vec<_> = scenario
            .gammas
            .iter()
            .map(|&g| report.row(g, method).unwrap().overall)
            .collect();
        for w in rates.windows(2) {
            assert!(w[1].rate <= w[0].rate + 2.0 * w[0].se.max(w[1].se), "{method}: {rates:?}");
        }
    }
}
