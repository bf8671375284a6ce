//! Brute-force reference computations, written independently of the solver:
//! their own probability map, their own moment formulas and no shared
//! optimization code. Used to certify small solves and in tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{Alternative, Gamma, MatchedDesign};
use crate::error::{Result, SensiError};
use crate::minimax::{threshold, MinimaxProblem, OutcomeTerm, NEG_SENTINEL};
use crate::sensitivity::{Direction, WorstCaseBound};
use crate::stats::ScoreMatrix;

pub const BINARY_MAX_N: usize = 20;
pub const GRID_MAX_N: usize = 8;
pub const GRID_MAX_OUTCOMES: usize = 3;
const MAX_STRATUM_PATTERNS: usize = 200_000;
const FINEST_STEP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    pub argmin_u: Vec<f64>,
    /// Smallest per-stratum grid resolution actually used.
    pub resolution: usize,
    pub refinement_steps: usize,
}

/// Probabilities `Gamma^u_j / sum Gamma^u_j'` for one stratum.
fn stratum_probs(u: &[f64], gamma: f64) -> Vec<f64> {
    let w: Vec<f64> = u.iter().map(|&x| gamma.powf(x)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// `(E, Var)` of one stratum's contribution under probabilities `p`.
fn stratum_moments(q: &[f64], p: &[f64]) -> (f64, f64) {
    let e: f64 = q.iter().zip(p).map(|(a, b)| a * b).sum();
    let e2: f64 = q.iter().zip(p).map(|(a, b)| a * a * b).sum();
    (e, e2 - e * e)
}

/// Exhaustive search over binary confounders of a single stratum for the
/// extreme mean in `direction`, ties broken by larger variance. Returns
/// `(mean, variance, u)`.
pub fn binary_extreme_stratum(q: &[f64], gamma: Gamma, direction: Direction) -> (f64, f64, Vec<f64>) {
    let n = q.len();
    assert!(n <= BINARY_MAX_N, "stratum too large for binary enumeration");
    let mut best: Option<(f64, f64, u32)> = None;
    for mask in 0u32..(1 << n) {
        let u: Vec<f64> = (0..n).map(|j| (mask >> j & 1) as f64).collect();
        let (e, v) = stratum_moments(q, &stratum_probs(&u, gamma.value()));
        let key = match direction {
            Direction::Maximize => e,
            Direction::Minimize => -e,
        };
        let better = match best {
            None => true,
            Some((bk, bv, _)) => {
                let tol = 1e-12 * bk.abs().max(key.abs()).max(1e-300);
                key > bk + tol || ((key - bk).abs() <= tol && v > bv)
            }
        };
        if better {
            best = Some((key, v, mask));
        }
    }
    let (key, v, mask) = best.unwrap();
    let mean = match direction {
        Direction::Maximize => key,
        Direction::Minimize => -key,
    };
    (mean, v, (0..n).map(|j| (mask >> j & 1) as f64).collect())
}

/// Exhaustive search over all binary `u in {0,1}^N` for the extreme total
/// mean of outcome `k`, ties broken by larger total variance.
pub fn enumerate_binary_u(
    scores: &ScoreMatrix,
    design: &MatchedDesign,
    k: usize,
    gamma: Gamma,
    direction: Direction,
) -> Result<WorstCaseBound> {
    let n = design.n_total();
    if n > BINARY_MAX_N {
        return Err(SensiError::CapExceeded {
            size: n as f64,
            cap: BINARY_MAX_N as f64,
        });
    }
    let col = scores.column(k);
    let offsets = design.offsets();
    let mut best: Option<(f64, f64, u64)> = None;
    for mask in 0u64..(1 << n) {
        let mut mean = 0.0;
        let mut var = 0.0;
        for w in offsets.windows(2) {
            let u: Vec<f64> = (w[0]..w[1]).map(|g| (mask >> g & 1) as f64).collect();
            let (e, v) = stratum_moments(&col.q[w[0]..w[1]], &stratum_probs(&u, gamma.value()));
            mean += e;
            var += v;
        }
        let key = match direction {
            Direction::Maximize => mean,
            Direction::Minimize => -mean,
        };
        let better = match best {
            None => true,
            Some((bk, bv, _)) => {
                let tol = 1e-12 * bk.abs().max(key.abs()).max(1.0);
                key > bk + tol || ((key - bk).abs() <= tol && var > bv)
            }
        };
        if better {
            best = Some((key, var, mask));
        }
    }
    let (key, variance, mask) = best.unwrap();
    let mean = match direction {
        Direction::Maximize => key,
        Direction::Minimize => -key,
    };
    let u: Vec<f64> = (0..n).map(|g| (mask >> g & 1) as f64).collect();
    let deviate = if variance > 0.0 {
        (col.t_obs - mean) / variance.sqrt()
    } else {
        f64::NAN
    };
    Ok(WorstCaseBound {
        gamma: gamma.value(),
        direction,
        mean,
        variance,
        deviate,
        u,
    })
}

/// Every value of `t(z)` over the assignments with one treated member per
/// stratum, by recursion over strata.
pub fn assignment_statistics(q: &[f64], offsets: &[usize], cap: usize) -> Result<Vec<f64>> {
    let size: f64 = offsets.windows(2).map(|w| (w[1] - w[0]) as f64).product();
    if size > cap as f64 {
        return Err(SensiError::CapExceeded {
            size,
            cap: cap as f64,
        });
    }
    fn walk(q: &[f64], offsets: &[usize], i: usize, acc: f64, out: &mut Vec<f64>) {
        if i + 1 == offsets.len() {
            out.push(acc);
            return;
        }
        for g in offsets[i]..offsets[i + 1] {
            walk(q, offsets, i + 1, acc + q[g], out);
        }
    }
    let mut out = Vec::with_capacity(size as usize);
    walk(q, offsets, 0, 0.0, &mut out);
    Ok(out)
}

/// Objective of a joint problem at a confounder `u`, computed from scratch.
pub fn objective_at_u(problem: &MinimaxProblem, u: &[f64]) -> f64 {
    combine(problem, &totals_at(problem, u))
}

fn combine(problem: &MinimaxProblem, totals: &[(f64, f64)]) -> f64 {
    let mut best = NEG_SENTINEL;
    for (o, &(e, v)) in problem.outcomes.iter().zip(totals) {
        let d = o.t_obs - e;
        let value = match o.alternative {
            Alternative::Greater if d < 0.0 => NEG_SENTINEL,
            Alternative::Less if d > 0.0 => NEG_SENTINEL,
            _ => d * d - o.threshold * v,
        };
        best = best.max(value);
    }
    best
}

fn totals_at(problem: &MinimaxProblem, u: &[f64]) -> Vec<(f64, f64)> {
    let gamma = problem.gamma.value();
    let mut totals = vec![(0.0, 0.0); problem.outcomes.len()];
    for w in problem.offsets.windows(2) {
        let p = stratum_probs(&u[w[0]..w[1]], gamma);
        for (k, o) in problem.outcomes.iter().enumerate() {
            let (e, v) = stratum_moments(&o.q[w[0]..w[1]], &p);
            totals[k].0 += e;
            totals[k].1 += v;
        }
    }
    totals
}

/// Signed distance of a one-sided outcome from switching off; negative
/// when it is off. Infinite for two-sided outcomes.
fn on_margin(alternative: Alternative, d: f64) -> f64 {
    match alternative {
        Alternative::Greater => d,
        Alternative::Less => -d,
        Alternative::TwoSided => f64::INFINITY,
    }
}

/// Smoothed maximum `mu log sum exp(zeta_k / mu)` over the outcomes that
/// are switched on; the plain maximum when `mu == 0`.
fn smoothed(problem: &MinimaxProblem, u: &[f64], mu: f64) -> f64 {
    if mu == 0.0 {
        return objective_at_u(problem, u);
    }
    smoothed_with_barrier(problem, u, mu, &[])
}

/// `smoothed` minus `mu sum log(-margin_k)` over the outcomes in `off`,
/// which keeps them switched off; infinite once one of them turns on.
fn smoothed_with_barrier(problem: &MinimaxProblem, u: &[f64], mu: f64, off: &[usize]) -> f64 {
    let totals = totals_at(problem, u);
    let mut barrier = 0.0;
    for &k in off {
        let o = &problem.outcomes[k];
        let m = -on_margin(o.alternative, o.t_obs - totals[k].0);
        if !(m > 0.0) {
            return f64::INFINITY;
        }
        barrier -= mu * m.ln();
    }
    let values: Vec<f64> = problem
        .outcomes
        .iter()
        .zip(&totals)
        .filter_map(|(o, &(e, v))| {
            let d = o.t_obs - e;
            (on_margin(o.alternative, d) >= 0.0).then_some(d * d - o.threshold * v)
        })
        .collect();
    if values.is_empty() {
        return NEG_SENTINEL + barrier;
    }
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + mu * values.iter().map(|v| ((v - top) / mu).exp()).sum::<f64>().ln() + barrier
}

/// Per-stratum grid of confounder patterns with smallest entry zero.
struct StratumGrid {
    patterns: Vec<Vec<f64>>,
    /// `contrib[p][k] = (E, Var)` of outcome `k` under pattern `p`.
    contrib: Vec<Vec<(f64, f64)>>,
    resolution: usize,
}

fn stratum_grid(problem: &MinimaxProblem, lo: usize, hi: usize, resolution: usize) -> StratumGrid {
    let n = hi - lo;
    let mut r = resolution.max(2);
    while (r as f64).powi(n as i32) - ((r - 1) as f64).powi(n as i32) > MAX_STRATUM_PATTERNS as f64 {
        r -= 1;
    }
    let mut patterns = Vec::new();
    let mut digits = vec![0usize; n];
    loop {
        if digits.contains(&0) {
            patterns.push(digits.iter().map(|&d| d as f64 / (r - 1) as f64).collect::<Vec<f64>>());
        }
        let mut j = 0;
        while j < n {
            digits[j] += 1;
            if digits[j] < r {
                break;
            }
            digits[j] = 0;
            j += 1;
        }
        if j == n {
            break;
        }
    }
    let gamma = problem.gamma.value();
    let contrib = patterns
        .iter()
        .map(|u| {
            let p = stratum_probs(u, gamma);
            problem
                .outcomes
                .iter()
                .map(|o| stratum_moments(&o.q[lo..hi], &p))
                .collect()
        })
        .collect();
    StratumGrid {
        patterns,
        contrib,
        resolution: r,
    }
}

/// Upper bound on the joint optimum from a per-stratum grid over
/// `u in [0,1]^N`, coordinate descent over the pattern choices, and a
/// shrinking pattern search in `u`.
pub fn grid_minimax(problem: &MinimaxProblem, resolution: usize, refine: usize) -> Result<OracleResult> {
    let n = problem.n_total();
    if n > GRID_MAX_N || problem.outcomes.len() > GRID_MAX_OUTCOMES {
        return Err(SensiError::CapExceeded {
            size: n as f64,
            cap: GRID_MAX_N as f64,
        });
    }
    let offsets = &problem.offsets;
    if problem.gamma.is_one() {
        let u = vec![0.0; n];
        return Ok(OracleResult {
            value: objective_at_u(problem, &u),
            argmin_u: u,
            resolution,
            refinement_steps: 0,
        });
    }
    let grids: Vec<StratumGrid> = offsets
        .windows(2)
        .map(|w| stratum_grid(problem, w[0], w[1], resolution))
        .collect();
    let kk = problem.outcomes.len();

    let eval = |choice: &[usize]| -> f64 {
        let mut totals = vec![(0.0, 0.0); kk];
        for (g, &c) in grids.iter().zip(choice) {
            for (t, &(e, v)) in totals.iter_mut().zip(&g.contrib[c]) {
                t.0 += e;
                t.1 += v;
            }
        }
        combine(problem, &totals)
    };

    // starts: uniform, then every outcome's extreme patterns in both directions
    let mut starts: Vec<Vec<usize>> = vec![grids.iter().map(all_zero_index).collect()];
    for k in 0..kk {
        for sign in [1.0, -1.0] {
            starts.push(
                grids
                    .iter()
                    .map(|g| {
                        (0..g.patterns.len())
                            .max_by(|&a, &b| {
                                (sign * g.contrib[a][k].0)
                                    .total_cmp(&(sign * g.contrib[b][k].0))
                                    .then(g.contrib[a][k].1.total_cmp(&g.contrib[b][k].1))
                            })
                            .unwrap()
                    })
                    .collect(),
            );
        }
    }
    let mut best_choice = starts[0].clone();
    let mut best_value = eval(&best_choice);
    for mut choice in starts {
        let mut value = eval(&choice);
        for _sweep in 0..100 {
            let mut improved = false;
            for i in 0..grids.len() {
                let keep = choice[i];
                let mut local_best = (value, keep);
                for c in 0..grids[i].patterns.len() {
                    choice[i] = c;
                    let v = eval(&choice);
                    if v < local_best.0 {
                        local_best = (v, c);
                    }
                }
                choice[i] = local_best.1;
                if local_best.1 != keep {
                    improved = true;
                    value = local_best.0;
                }
            }
            if !improved {
                break;
            }
        }
        if value < best_value {
            best_value = value;
            best_choice = choice;
        }
    }
    let mut u: Vec<f64> = Vec::with_capacity(n);
    for (g, &c) in grids.iter().zip(&best_choice) {
        u.extend_from_slice(&g.patterns[c]);
    }
    let min_res = grids.iter().map(|g| g.resolution).min().unwrap_or(resolution);

    // continuous refinement on a smoothed then exact maximum
    let scale = best_value.abs().max(
        problem
            .outcomes
            .iter()
            .map(|o| o.t_obs.abs().powi(2) + o.q.iter().map(|x| x * x).sum::<f64>())
            .fold(0.0, f64::max),
    );
    let mut steps = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let directions = search_directions(n, &mut rng);
    let h0 = 1.0 / (min_res - 1) as f64;
    let mut value = objective_at_u(problem, &u);
    for pass in 0..refine.max(1) {
        let mus: Vec<f64> = if pass == 0 {
            (2..=10).map(|e| scale * 10f64.powi(-e)).chain([0.0]).collect()
        } else {
            vec![0.0]
        };
        for mu in mus {
            steps += pattern_search(problem, &mut u, mu, &directions, h0);
        }
        let v = objective_at_u(problem, &u);
        let stalled = v >= value;
        value = value.min(v);
        if stalled && pass > 0 {
            break;
        }
    }
    // quasi-Newton polish of the smoothed maximum, then one more exact pass
    let mut polished = quasi_newton_polish(problem, &u, scale);
    steps += pattern_search(problem, &mut polished, 0.0, &directions, h0 * 1e-3);
    if objective_at_u(problem, &polished) < objective_at_u(problem, &u) {
        u = polished;
    }
    let final_value = objective_at_u(problem, &u);
    Ok(OracleResult {
        value: final_value.min(best_value),
        argmin_u: if final_value <= best_value {
            u
        } else {
            let mut g = Vec::with_capacity(n);
            for (grid, &c) in grids.iter().zip(&best_choice) {
                g.extend_from_slice(&grid.patterns[c]);
            }
            g
        },
        resolution: min_res,
        refinement_steps: steps,
    })
}

fn all_zero_index(g: &StratumGrid) -> usize {
    g.patterns.iter().position(|p| p.iter().all(|&x| x == 0.0)).unwrap()
}

fn search_directions(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut dirs = Vec::new();
    for j in 0..n {
        for s in [1.0, -1.0] {
            let mut d = vec![0.0; n];
            d[j] = s;
            dirs.push(d);
        }
    }
    for j in 0..n {
        for l in j + 1..n {
            for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut d = vec![0.0; n];
                d[j] = a;
                d[l] = b;
                dirs.push(d);
            }
        }
    }
    for _ in 0..4 * n {
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let d: Vec<f64> = d.iter().map(|x| x / norm).collect();
        dirs.push(d.iter().map(|x| -x).collect());
        dirs.push(d);
    }
    dirs
}

/// BFGS on the smoothed maximum in the unconstrained coordinates
/// `u = sin^2(v)`, with central-difference gradients and the smoothing
/// level lowered from `1e-2 scale` to `1e-10 scale`, started slightly
/// inside the box. Returns the point with
/// the lowest exact objective met along the way.
fn quasi_newton_polish(problem: &MinimaxProblem, u0: &[f64], scale: f64) -> Vec<f64> {
    let n = u0.len();
    let to_u = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x.sin().powi(2)).collect() };
    // One-sided outcomes that are off at the start stay off.
    let totals = totals_at(problem, u0);
    let off: Vec<usize> = (0..problem.outcomes.len())
        .filter(|&k| {
            let o = &problem.outcomes[k];
            on_margin(o.alternative, o.t_obs - totals[k].0) < 0.0
        })
        .collect();
    // Start inside the box, where sin^2 is not stationary, and away from
    // the switching boundaries of those outcomes.
    let start = push_off(problem, u0, &off);
    let inside = |eps: f64| -> Vec<f64> { start.iter().map(|x| eps + (1.0 - 2.0 * eps) * x).collect() };
    let eps = [1e-2, 1e-4, 1e-6, 1e-8]
        .into_iter()
        .find(|&e| smoothed_with_barrier(problem, &inside(e), scale, &off).is_finite())
        .unwrap_or(0.0);
    let mut v: Vec<f64> = inside(eps).iter().map(|x| x.sqrt().asin()).collect();
    let mut best_u = u0.to_vec();
    let mut best = objective_at_u(problem, u0);
    for e in 2..=10 {
        let mu = scale * 10f64.powi(-e);
        let f = |v: &[f64]| smoothed_with_barrier(problem, &to_u(v), mu, &off);
        // coordinates that reached 0 or 1 are stuck there; pull them back in
        let current = to_u(&v);
        if let Some(e) = [1e-3, 1e-5, 1e-7].into_iter().find(|&e| {
            let inner: Vec<f64> = current.iter().map(|x| e + (1.0 - 2.0 * e) * x).collect();
            smoothed_with_barrier(problem, &inner, mu, &off).is_finite()
        }) {
            v = current.iter().map(|x| (e + (1.0 - 2.0 * e) * x).sqrt().asin()).collect();
        }
        let grad = |v: &[f64]| -> Vec<f64> {
            let mut g = vec![0.0; n];
            let mut t = v.to_vec();
            for j in 0..n {
                let h = 1e-6 * (1.0 + v[j].abs());
                t[j] = v[j] + h;
                let up = f(&t);
                t[j] = v[j] - h;
                let down = f(&t);
                t[j] = v[j];
                g[j] = (up - down) / (2.0 * h);
            }
            g
        };
        let mut h_inv = vec![0.0; n * n];
        for j in 0..n {
            h_inv[j * n + j] = 1.0;
        }
        let mut fv = f(&v);
        let mut g = grad(&v);
        for _ in 0..200 {
            let d: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h_inv[i * n + j] * g[j]).sum::<f64>()).collect();
            let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(slope < 0.0 && slope.is_finite()) {
                break;
            }
            let mut step = 1.0;
            let mut next = None;
            while step > 1e-12 {
                let trial: Vec<f64> = v.iter().zip(&d).map(|(x, dx)| x + step * dx).collect();
                let ft = f(&trial);
                if ft <= fv + 1e-4 * step * slope {
                    next = Some((trial, ft));
                    break;
                }
                step *= 0.5;
            }
            let Some((v_new, f_new)) = next else { break };
            let g_new = grad(&v_new);
            let sv: Vec<f64> = v_new.iter().zip(&v).map(|(a, b)| a - b).collect();
            let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy: f64 = sv.iter().zip(&yv).map(|(a, b)| a * b).sum();
            if sy > 1e-300 {
                // inverse update H <- (I - r s y') H (I - r y s') + r s s'
                let r = 1.0 / sy;
                let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h_inv[i * n + j] * yv[j]).sum()).collect();
                let yhy: f64 = yv.iter().zip(&hy).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    for j in 0..n {
                        h_inv[i * n + j] += (1.0 + r * yhy) * r * sv[i] * sv[j] - r * (hy[i] * sv[j] + sv[i] * hy[j]);
                    }
                }
            }
            let converged = fv - f_new <= 1e-15 * fv.abs().max(scale);
            v = v_new;
            fv = f_new;
            g = g_new;
            let u = to_u(&v);
            let exact = objective_at_u(problem, &u);
            if exact < best {
                best = exact;
                best_u = u;
            }
            if converged {
                break;
            }
        }
    }
    best_u
}

/// Moves `u0` until every outcome in `off` is off by a margin of
/// `1e-3 (1 + |t_k|)`, by steps along a finite-difference ascent direction
/// of the smallest margin. Returns `u0` unchanged when that fails.
fn push_off(problem: &MinimaxProblem, u0: &[f64], off: &[usize]) -> Vec<f64> {
    if off.is_empty() {
        return u0.to_vec();
    }
    let worst = |u: &[f64]| -> (f64, usize) {
        let totals = totals_at(problem, u);
        off.iter()
            .map(|&k| {
                let o = &problem.outcomes[k];
                let m = -on_margin(o.alternative, o.t_obs - totals[k].0);
                (m / (1e-3 * (1.0 + o.t_obs.abs())), k)
            })
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
    };
    let mut u: Vec<f64> = u0.iter().map(|x| x.clamp(0.0, 1.0)).collect();
    for _ in 0..100 {
        let (m, k) = worst(&u);
        if m >= 1.0 {
            return u;
        }
        let o = &problem.outcomes[k];
        let margin = |u: &[f64]| -on_margin(o.alternative, o.t_obs - totals_at(problem, u)[k].0);
        let mut g = vec![0.0; u.len()];
        let mut t = u.clone();
        for j in 0..u.len() {
            let h = 1e-7;
            t[j] = (u[j] + h).min(1.0);
            let up = margin(&t);
            t[j] = (u[j] - h).max(0.0);
            let down = margin(&t);
            t[j] = u[j];
            g[j] = (up - down) / 2.0;
        }
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            break;
        }
        let moved = [1e-4, 1e-3, 1e-2, 1e-1]
            .into_iter()
            .map(|step| -> Vec<f64> { u.iter().zip(&g).map(|(x, gx)| (x + step * gx / norm).clamp(0.0, 1.0)).collect() })
            .map(|cand| (worst(&cand).0, cand))
            .filter(|(w, _)| *w > m)
            .min_by(|a, b| (a.0 - 1.0).abs().total_cmp(&(b.0 - 1.0).abs()));
        match moved {
            Some((_, cand)) => u = cand,
            None => break,
        }
    }
    u0.to_vec()
}

/// Best-improvement pattern search; the step doubles after a success and
/// halves after a failure. Returns the number of accepted moves.
fn pattern_search(
    problem: &MinimaxProblem,
    u: &mut [f64],
    mu: f64,
    directions: &[Vec<f64>],
    h0: f64,
) -> usize {
    let mut h = h0;
    let mut current = smoothed(problem, u, mu);
    let mut moves = 0;
    let mut trial = u.to_vec();
    while h >= FINEST_STEP {
        let mut best: Option<(f64, usize)> = None;
        for (idx, d) in directions.iter().enumerate() {
            let mut moved = false;
            for ((t, &x), &dx) in trial.iter_mut().zip(u.iter()).zip(d) {
                *t = (x + h * dx).clamp(0.0, 1.0);
                moved |= *t != x;
            }
            if !moved {
                continue;
            }
            let v = smoothed(problem, &trial, mu);
            if v < current && best.is_none_or(|(bv, _)| v < bv) {
                best = Some((v, idx));
            }
        }
        match best {
            Some((v, idx)) => {
                for (x, &dx) in u.iter_mut().zip(&directions[idx]) {
                    *x = (*x + h * dx).clamp(0.0, 1.0);
                }
                current = v;
                moves += 1;
                h = (2.0 * h).min(0.25);
            }
            None => h *= 0.5,
        }
        if moves > 200_000 {
            break;
        }
    }
    moves
}

/// `Gamma` values used by the random instance families.
pub const INSTANCE_GAMMAS: [f64; 5] = [1.0, 1.5, 2.0, 5.0, 10.0];

/// Random joint problem with at most `n_max` members (strata of two to four)
/// and one to `k_max` outcomes. Scores are uniform on `[-2, 2]`, the observed
/// statistic is the score sum of a random assignment shifted away from the
/// uniform mean, and roughly one outcome in four is one-sided.
pub fn random_instance(seed: u64, n_max: usize, k_max: usize) -> Result<MinimaxProblem> {
    if n_max < 2 || k_max == 0 {
        return Err(SensiError::invalid("instances need n_max >= 2 and k_max >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets = vec![0];
    loop {
        let room = n_max - offsets.last().unwrap();
        if room < 2 || (offsets.len() > 1 && rng.random_bool(0.25)) {
            break;
        }
        let size = rng.random_range(2..=room.min(4));
        offsets.push(offsets.last().unwrap() + size);
    }
    let n = *offsets.last().unwrap();
    let k = rng.random_range(1..=k_max);
    let alpha = 0.05;
    let outcomes = (0..k)
        .map(|index| {
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut t_obs = 0.0;
            for w in offsets.windows(2) {
                t_obs += q[rng.random_range(w[0]..w[1])];
            }
            t_obs += rng.random_range(-1.0..1.0);
            let alternative = match rng.random_range(0..8) {
                0 => Alternative::Greater,
                1 => Alternative::Less,
                _ => Alternative::TwoSided,
            };
            OutcomeTerm {
                index,
                q,
                t_obs,
                alternative,
                threshold: threshold(alternative, alpha, k),
            }
        })
        .collect();
    let gamma = Gamma::new(INSTANCE_GAMMAS[rng.random_range(0..INSTANCE_GAMMAS.len())])?;
    Ok(MinimaxProblem {
        offsets,
        outcomes,
        gamma,
        alpha,
    })
}

/// Two outcomes whose worst cases pull the controls of each triple in
/// opposite directions: outcome one is explained by raising the second
/// control, outcome two by raising the third. A shared confounder cannot do
/// both, so the joint optimum exceeds both single-outcome optima and sits at
/// a fractional `u`. Two triples and a pair, lightly perturbed by `seed`.
pub fn opposed_instance(seed: u64, gamma: Gamma) -> MinimaxProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = vec![0, 3, 6, 8];
    let mut jitter = |x: f64| x + rng.random_range(-0.1..0.1);
    let mut q1 = Vec::new();
    let mut q2 = Vec::new();
    for _ in 0..2 {
        q1.extend([jitter(1.0), jitter(1.0), jitter(-2.0)]);
        q2.extend([jitter(1.0), jitter(-2.0), jitter(1.0)]);
    }
    q1.extend([jitter(1.0), jitter(-1.0)]);
    q2.extend([jitter(1.0), jitter(-1.0)]);
    // treated member first in every stratum
    let t1 = q1[0] + q1[3] + q1[6];
    let t2 = q2[0] + q2[3] + q2[6];
    let alpha = 0.05;
    let outcomes = [(q1, t1), (q2, t2)]
        .into_iter()
        .enumerate()
        .map(|(index, (q, t_obs))| OutcomeTerm {
            index,
            q,
            t_obs,
            alternative: Alternative::TwoSided,
            threshold: threshold(Alternative::TwoSided, alpha, 2),
        })
        .collect();
    MinimaxProblem {
        offsets,
        outcomes,
        gamma,
        alpha,
    }
}

/// The problem restricted to its `k`-th outcome, keeping that outcome's
/// threshold.
pub fn single_term(problem: &MinimaxProblem, k: usize) -> MinimaxProblem {
    MinimaxProblem {
        outcomes: vec![problem.outcomes[k].clone()],
        ..problem.clone()
    }
}
