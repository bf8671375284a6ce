//! Interior-point engine for
//!
//! ```text
//! minimize   max_p f_p(rho)
//! subject to f_c(rho) < 0                      for every constraint piece c
//!            sum_j rho_ij = 1                   for every stratum i
//!            s_i <= rho_ij <= Gamma s_i
//! ```
//!
//! where every piece has the form
//! `f(rho) = quad (t - mu)^2 + lin (t - mu) - var V` with `mu = q' rho`,
//! `V = sum_i rho_i' q_i^2 - (rho_i' q_i)^2` and `quad, var >= 0`. Each piece
//! is convex in `rho`, so the problem is convex and the method converges to
//! the global minimum.
//!
//! The engine is a primal-dual path-following method on the epigraph form,
//! with an explicit slack per piece and a predictor step choosing the
//! centering. Steps are accepted by backtracking on the barrier function
//! plus an exact penalty on the piece residuals. Its Newton system is block
//! diagonal per stratum plus a low-rank term with at most two columns per piece. It
//! is solved with per-stratum Cholesky factors, the stratum equality
//! eliminated in closed form, and a small dense saddle system in the
//! low-rank multipliers and the epigraph variable, so one iteration costs
//! `O(N P^2)`. Stopping uses a certified gap: the Lagrangian linearized at
//! the iterate and minimized over the polytope bounds the optimum below.

use crate::error::{Result, SensiError};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Piece<'a> {
    pub q: &'a [f64],
    pub t: f64,
    pub quad: f64,
    pub lin: f64,
    pub var: f64,
}

impl<'a> Piece<'a> {
    pub fn zeta(q: &'a [f64], t: f64, threshold: f64) -> Self {
        Piece {
            q,
            t,
            quad: 1.0,
            lin: 0.0,
            var: threshold,
        }
    }

    /// `sign (mu - t) <= 0`, written as a piece.
    pub fn linear(q: &'a [f64], t: f64, sign: f64) -> Self {
        Piece {
            q,
            t,
            quad: 0.0,
            lin: -sign,
            var: 0.0,
        }
    }

    fn scaled(&self, by: f64) -> Self {
        Piece {
            quad: self.quad * by,
            lin: self.lin * by,
            var: self.var * by,
            ..*self
        }
    }

    /// Value at `rho`, with per-stratum means `rho_i' q_i` written to `means`.
    fn eval(&self, offsets: &[usize], rho: &[f64], means: &mut [f64]) -> f64 {
        let mut mu = 0.0;
        let mut v = 0.0;
        for (i, w) in offsets.windows(2).enumerate() {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for g in w[0]..w[1] {
                let x = self.q[g];
                m1 += rho[g] * x;
                m2 += rho[g] * x * x;
            }
            means[i] = m1;
            mu += m1;
            v += m2 - m1 * m1;
        }
        let d = self.t - mu;
        self.quad * d * d + self.lin * d - self.var * v
    }

    pub fn value(&self, offsets: &[usize], rho: &[f64]) -> f64 {
        let mut means = vec![0.0; offsets.len() - 1];
        self.eval(offsets, rho, &mut means)
    }

    /// `(mu, V)` at `rho`.
    pub fn moments(&self, offsets: &[usize], rho: &[f64]) -> (f64, f64) {
        let m = crate::randomization::moments(self.q, offsets, rho);
        (m.mean, m.variance)
    }

    fn mean_from(&self, means: &[f64]) -> f64 {
        means.iter().sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EngineOptions {
    /// Certified gap, relative to the objective scale, at which to stop.
    pub gap_tol: f64,
    pub max_iterations: usize,
    /// Largest relative gap accepted when steps stop making progress.
    pub stall_gap: f64,
    /// Return as soon as the objective drops below this raw value.
    pub stop_below: Option<f64>,
    /// Return as soon as the sign of the optimum is certain.
    pub sign_only: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-9,
            max_iterations: 300,
            stall_gap: 1e-6,
            stop_below: None,
            sign_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stop {
    Converged,
    BelowTarget,
    SignDecided,
}

#[derive(Debug, Clone)]
pub(crate) struct EngineResult {
    pub rho: Vec<f64>,
    pub s: Vec<f64>,
    /// `max_p f_p` at `rho`, raw units.
    pub value: f64,
    /// Certified lower bound on the optimum, raw units.
    pub lower_bound: f64,
    pub newton_steps: usize,
    pub stop: Stop,
}

pub(crate) struct Program<'a> {
    pub offsets: &'a [usize],
    pub gamma: f64,
    pub objective: Vec<Piece<'a>>,
    pub constraints: Vec<Piece<'a>>,
}

impl Program<'_> {
    pub fn max_value(&self, rho: &[f64]) -> f64 {
        self.objective
            .iter()
            .map(|p| p.value(self.offsets, rho))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn uniform_rho(offsets: &[usize]) -> Vec<f64> {
    let mut rho = vec![0.0; *offsets.last().unwrap()];
    for w in offsets.windows(2) {
        let p = 1.0 / (w[1] - w[0]) as f64;
        rho[w[0]..w[1]].fill(p);
    }
    rho
}

/// Charnes-Cooper scalars strictly between `max rho / Gamma` and `min rho`.
fn interior_s(offsets: &[usize], rho: &[f64], gamma: f64) -> Vec<f64> {
    offsets
        .windows(2)
        .map(|w| {
            let block = &rho[w[0]..w[1]];
            let lo = block.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = block.iter().copied().fold(0.0, f64::max);
            0.5 * (lo + hi / gamma)
        })
        .collect()
}

/// Smallest value of `c' rho_i` over one stratum's feasible set. The
/// vertices put weight `Gamma s` on the `k` smallest coefficients and `s`
/// on the rest.
fn stratum_linear_min(c: &mut [f64], gamma: f64) -> f64 {
    c.sort_by(f64::total_cmp);
    let n = c.len();
    let total: f64 = c.iter().sum();
    let mut best = total / n as f64;
    let mut prefix = 0.0;
    for k in 1..n {
        prefix += c[k - 1];
        let v = (gamma * prefix + total - prefix) / (gamma * k as f64 + (n - k) as f64);
        best = best.min(v);
    }
    best
}

pub(crate) fn minimize_max(
    program: &Program<'_>,
    start: Option<&[f64]>,
    opts: &EngineOptions,
) -> Result<EngineResult> {
    let offsets = program.offsets;
    if program.objective.is_empty() {
        return Err(SensiError::invalid("engine needs at least one objective piece"));
    }
    let rho0 = match start {
        Some(r) => r.to_vec(),
        None => uniform_rho(offsets),
    };
    if program.gamma <= 1.0 + 1e-12 {
        let rho = uniform_rho(offsets);
        let value = program.max_value(&rho);
        let s = offsets.windows(2).map(|w| 1.0 / (w[1] - w[0]) as f64).collect();
        return Ok(EngineResult {
            rho,
            s,
            value,
            lower_bound: value,
            newton_steps: 0,
            stop: Stop::Converged,
        });
    }
    for c in &program.constraints {
        if c.value(offsets, &rho0) >= 0.0 {
            return Err(SensiError::invalid("engine start violates a constraint piece"));
        }
    }

    // Common scale for the objective pieces, measured at the start.
    let mut scale: f64 = 0.0;
    for p in &program.objective {
        let (mu, v) = p.moments(offsets, &rho0);
        let d = p.t - mu;
        scale = scale.max(p.quad * d * d + p.var * v + p.lin.abs() * (d.abs() + v.sqrt()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        scale = 1.0;
    }
    let objective: Vec<Piece> = program.objective.iter().map(|p| p.scaled(1.0 / scale)).collect();
    let engine = Engine::new(offsets, program.gamma, objective, program.constraints.clone());
    let s0 = interior_s(offsets, &rho0, program.gamma);
    let mut result = engine.run(rho0, s0, scale, opts)?;
    result.value = program.max_value(&result.rho);
    result.lower_bound = result.lower_bound.min(result.value);
    Ok(result)
}

struct Engine<'a> {
    offsets: &'a [usize],
    gamma: f64,
    objective: Vec<Piece<'a>>,
    constraints: Vec<Piece<'a>>,
    n: usize,
    strata: usize,
}

/// Slacks of the linear constraints and piece values at a primal point.
struct Eval {
    /// `rho - s` per member.
    a: Vec<f64>,
    /// `Gamma s - rho` per member.
    b: Vec<f64>,
    /// Piece values, objective pieces first.
    f: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

/// Iterate: primal point, piece slacks `w` and all multipliers.
struct Iterate {
    rho: Vec<f64>,
    s: Vec<f64>,
    y: f64,
    /// Slack of each piece; `f_p - y + w_p = 0` (objective) and
    /// `f_c + w_c = 0` (constraints) hold at convergence.
    w: Vec<f64>,
    la: Vec<f64>,
    lb: Vec<f64>,
    lw: Vec<f64>,
}

/// Factored Newton matrix at one iterate.
struct Factor {
    blocks: BlockSolver,
    cols: Vec<Vec<f64>>,
    /// Column of each piece gradient.
    piece_cols: Vec<usize>,
    u: Vec<Vec<f64>>,
    lu: Vec<f64>,
    pivots: Vec<usize>,
}

/// Newton step in every primal and dual variable.
struct Direction {
    dz: Vec<f64>,
    dy: f64,
    da: Vec<f64>,
    db: Vec<f64>,
    dw: Vec<f64>,
    dla: Vec<f64>,
    dlb: Vec<f64>,
    dlw: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(
        offsets: &'a [usize],
        gamma: f64,
        objective: Vec<Piece<'a>>,
        constraints: Vec<Piece<'a>>,
    ) -> Self {
        Self {
            offsets,
            gamma,
            objective,
            constraints,
            n: *offsets.last().unwrap(),
            strata: offsets.len() - 1,
        }
    }

    fn dim(&self) -> usize {
        self.n + self.strata
    }

    fn z_rho(&self, i: usize, g: usize) -> usize {
        g + i
    }

    fn z_s(&self, i: usize) -> usize {
        self.offsets[i + 1] + i
    }

    fn n_obj(&self) -> usize {
        self.objective.len()
    }

    fn pieces(&self) -> impl Iterator<Item = &Piece<'a>> {
        self.objective.iter().chain(self.constraints.iter())
    }

    fn eval(&self, rho: &[f64], s: &[f64], with_grads: bool) -> Option<Eval> {
        let mut a = vec![0.0; self.n];
        let mut b = vec![0.0; self.n];
        for (i, w) in self.offsets.windows(2).enumerate() {
            for g in w[0]..w[1] {
                a[g] = rho[g] - s[i];
                b[g] = self.gamma * s[i] - rho[g];
                if !(a[g] > 0.0 && b[g] > 0.0) {
                    return None;
                }
            }
        }
        let mut means = vec![0.0; self.strata];
        let mut f = Vec::new();
        let mut grads = Vec::new();
        for p in self.pieces() {
            f.push(p.eval(self.offsets, rho, &mut means));
            if with_grads {
                let mu = p.mean_from(&means);
                let lead = -(2.0 * p.quad * (p.t - mu) + p.lin);
                let mut grad = vec![0.0; self.n];
                for (i, w) in self.offsets.windows(2).enumerate() {
                    for k in w[0]..w[1] {
                        let x = p.q[k];
                        grad[k] = lead * x - p.var * (x * x - 2.0 * means[i] * x);
                    }
                }
                grads.push(grad);
            }
        }
        Some(Eval { a, b, f, grads })
    }

    fn value(&self, ev: &Eval) -> f64 {
        ev.f[..self.n_obj()].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `f_p - y + w_p` for objective pieces and `f_c + w_c` for constraints.
    fn residuals(&self, ev: &Eval, y: f64, w: &[f64]) -> Vec<f64> {
        let np = self.n_obj();
        (0..w.len())
            .map(|p| if p < np { ev.f[p] - y + w[p] } else { ev.f[p] + w[p] })
            .collect()
    }

    fn complementarity(ev: &Eval, it: &Iterate) -> f64 {
        dotp(&ev.a, &it.la) + dotp(&ev.b, &it.lb) + dotp(&it.w, &it.lw)
    }

    /// Weak-duality bound from the current multipliers: the Lagrangian is
    /// convex, so its linearization at `rho` minimized over the polytope
    /// bounds the optimum from below.
    fn lower_bound(&self, ev: &Eval, it: &Iterate) -> f64 {
        let np = self.n_obj();
        let total: f64 = it.lw[..np].iter().sum();
        if !(total > 0.0) {
            return f64::NEG_INFINITY;
        }
        let mut c = vec![0.0; self.n];
        let mut bound = 0.0;
        for (idx, g) in ev.grads.iter().enumerate() {
            let w = it.lw[idx] / total;
            bound += w * ev.f[idx];
            for (ck, gk) in c.iter_mut().zip(g) {
                *ck += w * gk;
            }
        }
        bound -= dotp(&c, &it.rho);
        for w in self.offsets.windows(2) {
            bound += stratum_linear_min(&mut c[w[0]..w[1]], self.gamma);
        }
        bound
    }

    fn factor(&self, ev: &Eval, it: &Iterate) -> Option<Factor> {
        let dim = self.dim();
        let np = self.n_obj();
        let gamma = self.gamma;

        // per-stratum dense blocks over (rho_i, s_i)
        let mut blocks: Vec<Vec<f64>> = Vec::with_capacity(self.strata);
        for w in self.offsets.windows(2) {
            let ni = w[1] - w[0];
            let mi = ni + 1;
            let mut blk = vec![0.0; mi * mi];
            for (j, g) in (w[0]..w[1]).enumerate() {
                let wa = it.la[g] / ev.a[g];
                let wb = it.lb[g] / ev.b[g];
                blk[j * mi + j] += wa + wb;
                blk[ni * mi + ni] += wa + gamma * gamma * wb;
                let off = -wa - gamma * wb;
                blk[j * mi + ni] += off;
                blk[ni * mi + j] += off;
            }
            for (idx, p) in self.pieces().enumerate() {
                if p.var == 0.0 {
                    continue;
                }
                let wgt = 2.0 * p.var * it.lw[idx];
                let q = &p.q[w[0]..w[1]];
                for j in 0..ni {
                    for l in 0..ni {
                        blk[j * mi + l] += wgt * q[j] * q[l];
                    }
                }
            }
            blocks.push(blk);
        }
        let blocks = BlockSolver::new(self, blocks)?;

        // Low-rank columns: each piece gradient with weight lambda / w (tied
        // to y for objective pieces) and q with weight 2 quad lambda.
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut diag: Vec<f64> = Vec::new();
        let mut tied: Vec<bool> = Vec::new();
        let mut piece_cols = Vec::new();
        for (idx, p) in self.pieces().enumerate() {
            let lam = it.lw[idx];
            let mut col = vec![0.0; dim];
            for (i, w) in self.offsets.windows(2).enumerate() {
                for k in w[0]..w[1] {
                    col[self.z_rho(i, k)] = ev.grads[idx][k];
                }
            }
            piece_cols.push(cols.len());
            cols.push(col);
            diag.push(it.w[idx] / lam);
            tied.push(idx < np);
            if p.quad > 0.0 {
                let mut qc = vec![0.0; dim];
                for (i, w) in self.offsets.windows(2).enumerate() {
                    for k in w[0]..w[1] {
                        qc[self.z_rho(i, k)] = p.q[k];
                    }
                }
                cols.push(qc);
                diag.push(1.0 / (2.0 * p.quad * lam));
                tied.push(false);
            }
        }

        // With c_a the multiplier of column a, dz = B^-1 rhs - sum u_a c_a
        // and (c, dy) solve the saddle system
        //   (D + C' B^-1 C) c + e dy = C' B^-1 rhs,   e' c = -rhs_y.
        let u: Vec<Vec<f64>> = cols.iter().map(|c| blocks.apply(self, c)).collect();
        let r = cols.len();
        let k = r + 1;
        let mut kkt = vec![0.0; k * k];
        for a in 0..r {
            for b in 0..=a {
                let v = dotp(&cols[a], &u[b]);
                kkt[a * k + b] = v;
                kkt[b * k + a] = v;
            }
            kkt[a * k + a] += diag[a];
            if tied[a] {
                kkt[a * k + r] = 1.0;
                kkt[r * k + a] = 1.0;
            }
        }
        let pivots = lu_factor(&mut kkt, k)?;
        Some(Factor {
            blocks,
            cols,
            piece_cols,
            u,
            lu: kkt,
            pivots,
        })
    }

    /// Primal-dual Newton step toward the central path point with
    /// complementarity `mu`, also driving the piece residuals to zero.
    fn direction(&self, fac: &Factor, ev: &Eval, it: &Iterate, res: &[f64], mu: f64) -> Option<Direction> {
        let dim = self.dim();
        let np = self.n_obj();
        let gamma = self.gamma;
        let mut rhs = vec![0.0; dim];
        let mut rhs_y = -1.0;
        for (i, w) in self.offsets.windows(2).enumerate() {
            let zs = self.z_s(i);
            for g in w[0]..w[1] {
                let ia = mu / ev.a[g];
                let ib = mu / ev.b[g];
                rhs[self.z_rho(i, g)] += ia - ib;
                rhs[zs] += -ia + gamma * ib;
            }
        }
        for (idx, grad) in ev.grads.iter().enumerate() {
            let c = (mu + it.lw[idx] * res[idx]) / it.w[idx];
            for (i, w) in self.offsets.windows(2).enumerate() {
                for k in w[0]..w[1] {
                    rhs[self.z_rho(i, k)] -= c * grad[k];
                }
            }
            if idx < np {
                rhs_y += c;
            }
        }
        let v0 = fac.blocks.apply(self, &rhs);
        let r = fac.cols.len();
        let mut small = vec![0.0; r + 1];
        for a in 0..r {
            small[a] = dotp(&fac.cols[a], &v0);
        }
        small[r] = -rhs_y;
        let sol = lu_solve(&fac.lu, &fac.pivots, r + 1, &small);
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut dz = v0;
        for (c, uc) in sol[..r].iter().zip(&fac.u) {
            for (x, ui) in dz.iter_mut().zip(uc) {
                *x -= c * ui;
            }
        }
        self.project_sum_zero(&mut dz);
        let dy = sol[r];

        let mut da = vec![0.0; self.n];
        let mut db = vec![0.0; self.n];
        for (i, w) in self.offsets.windows(2).enumerate() {
            let ds = dz[self.z_s(i)];
            for g in w[0]..w[1] {
                let dr = dz[self.z_rho(i, g)];
                da[g] = dr - ds;
                db[g] = gamma * ds - dr;
            }
        }
        let dw: Vec<f64> = ev
            .grads
            .iter()
            .enumerate()
            .map(|(idx, grad)| {
                let mut v = -res[idx];
                for (i, w) in self.offsets.windows(2).enumerate() {
                    for k in w[0]..w[1] {
                        v -= grad[k] * dz[self.z_rho(i, k)];
                    }
                }
                if idx < np {
                    v + dy
                } else {
                    v
                }
            })
            .collect();
        let dual = |sl: &[f64], lam: &[f64], d: &[f64]| -> Vec<f64> {
            sl.iter()
                .zip(lam)
                .zip(d)
                .map(|((s, l), ds)| mu / s - l - l / s * ds)
                .collect()
        };
        Some(Direction {
            dla: dual(&ev.a, &it.la, &da),
            dlb: dual(&ev.b, &it.lb, &db),
            // Read from the saddle solution, which holds
            // (lambda / w)(g' dz - dy) without the cancellation of forming it.
            dlw: (0..dw.len())
                .map(|p| (mu + it.lw[p] * res[p]) / it.w[p] - it.lw[p] + sol[fac.piece_cols[p]])
                .collect(),
            dz,
            dy,
            da,
            db,
            dw,
        })
    }

    /// Removes the rounding error that moves `drho_i` off `sum = 0`.
    fn project_sum_zero(&self, dz: &mut [f64]) {
        for (i, w) in self.offsets.windows(2).enumerate() {
            let lo = self.z_rho(i, w[0]);
            let hi = self.z_rho(i, w[1]);
            let mean = dz[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            for v in &mut dz[lo..hi] {
                *v -= mean;
            }
        }
    }

    /// Barrier objective plus an exact penalty on the piece residuals.
    fn merit(&self, ev: &Eval, y: f64, w: &[f64], mu: f64, penalty: f64) -> f64 {
        let logs: f64 = ev.a.iter().chain(&ev.b).chain(w).map(|v| v.ln()).sum();
        let res: f64 = self.residuals(ev, y, w).iter().map(|r| r.abs()).sum();
        y - mu * logs + penalty * res
    }

    fn run(&self, rho: Vec<f64>, s: Vec<f64>, scale: f64, opts: &EngineOptions) -> Result<EngineResult> {
        let np = self.n_obj();
        let m = (2 * self.n + np + self.constraints.len()) as f64;
        let mut ev = self
            .eval(&rho, &s, true)
            .ok_or_else(|| SensiError::invalid("engine start is not interior"))?;
        let y = self.value(&ev) + 1.0;
        let w: Vec<f64> = (0..ev.f.len())
            .map(|p| if p < np { y - ev.f[p] } else { -ev.f[p] })
            .collect();
        // Centered start whose objective multipliers sum to one.
        let mu0 = 1.0 / w[..np].iter().map(|h| 1.0 / h).sum::<f64>();
        let mut it = Iterate {
            la: ev.a.iter().map(|v| mu0 / v).collect(),
            lb: ev.b.iter().map(|v| mu0 / v).collect(),
            lw: w.iter().map(|v| mu0 / v).collect(),
            rho,
            s,
            y,
            w,
        };
        let mut best_lb = f64::NEG_INFINITY;
        let mut penalty: f64 = 1.0;

        // Lowest objective seen at a feasible iterate; returned on exit.
        let mut best = (f64::INFINITY, Vec::new(), Vec::new());
        let finish = |best: (f64, Vec<f64>, Vec<f64>), best_lb: f64, iter: usize, done: Option<Stop>| {
            let (value, rho, s) = best;
            let gap = value - best_lb;
            let stop = match done {
                Some(stop) => stop,
                None if gap <= opts.stall_gap => Stop::Converged,
                None => {
                    return Err(SensiError::SolverStalled {
                        incumbent: value * scale,
                        gap: gap * scale,
                        iterations: iter,
                    })
                }
            };
            Ok(EngineResult {
                rho,
                s,
                value: value * scale,
                lower_bound: best_lb.min(value) * scale,
                newton_steps: iter,
                stop,
            })
        };

        for iter in 0..=opts.max_iterations {
            let current = self.value(&ev);
            if current < best.0 && ev.f[np..].iter().all(|&f| f <= 0.0) {
                best = (current, it.rho.clone(), it.s.clone());
            }
            let value = best.0;
            best_lb = best_lb.max(self.lower_bound(&ev, &it));
            let gap = value - best_lb;
            let done = if opts.stop_below.is_some_and(|t| value * scale < t) {
                Some(Stop::BelowTarget)
            } else if opts.sign_only && (value < 0.0 || best_lb > 0.0) {
                Some(Stop::SignDecided)
            } else if gap <= opts.gap_tol {
                Some(Stop::Converged)
            } else {
                None
            };
            let stalled = iter == opts.max_iterations;
            let fac = if done.is_none() && !stalled {
                self.factor(&ev, &it)
            } else {
                None
            };
            let Some(fac) = fac else {
                return finish(best, best_lb, iter, done);
            };

            let res = self.residuals(&ev, it.y, &it.w);
            let mu = Self::complementarity(&ev, &it) / m;
            // predictor: how far the pure Newton step gets sets the centering
            let sigma = match self.direction(&fac, &ev, &it, &res, 0.0) {
                Some(d) => {
                    let ap = max_step(&ev.a, &d.da)
                        .min(max_step(&ev.b, &d.db))
                        .min(max_step(&it.w, &d.dw))
                        .min(1.0);
                    let ad = max_step(&it.la, &d.dla)
                        .min(max_step(&it.lb, &d.dlb))
                        .min(max_step(&it.lw, &d.dlw))
                        .min(1.0);
                    let comp = |sl: &[f64], dsl: &[f64], l: &[f64], dl: &[f64]| -> f64 {
                        (0..sl.len())
                            .map(|j| (sl[j] + ap * dsl[j]) * (l[j] + ad * dl[j]))
                            .sum()
                    };
                    let mu_aff = (comp(&ev.a, &d.da, &it.la, &d.dla)
                        + comp(&ev.b, &d.db, &it.lb, &d.dlb)
                        + comp(&it.w, &d.dw, &it.lw, &d.dlw))
                        / m;
                    (mu_aff.max(0.0) / mu).powi(3).clamp(1e-3, 1.0)
                }
                None => 1.0,
            };
            // Slacks must stay large enough to absorb the piece residuals, so
            // the target is not cut below them.
            let infeasibility = res
                .iter()
                .zip(&it.lw)
                .map(|(r, l)| (r * l).abs())
                .fold(0.0, f64::max);
            let target = (sigma * mu).max(infeasibility.min(mu));
            let Some(d) = self.direction(&fac, &ev, &it, &res, target) else {
                return finish(best, best_lb, iter, None);
            };
            let amax = (0.995
                * max_step(&ev.a, &d.da)
                    .min(max_step(&ev.b, &d.db))
                    .min(max_step(&it.w, &d.dw)))
            .min(1.0);
            let ad = (0.995
                * max_step(&it.la, &d.dla)
                    .min(max_step(&it.lb, &d.dlb))
                    .min(max_step(&it.lw, &d.dlw)))
            .min(1.0);

            // Backtrack on the merit function at the target.
            let lam_max = it
                .lw
                .iter()
                .zip(&d.dlw)
                .map(|(l, dl)| (l + dl).abs().max(*l))
                .fold(0.0, f64::max);
            penalty = penalty.max(2.0 * lam_max);
            let res_norm: f64 = res.iter().map(|r| r.abs()).sum();
            let slope = d.dy
                - target
                    * (d.da.iter().zip(&ev.a).map(|(x, v)| x / v).sum::<f64>()
                        + d.db.iter().zip(&ev.b).map(|(x, v)| x / v).sum::<f64>()
                        + d.dw.iter().zip(&it.w).map(|(x, v)| x / v).sum::<f64>())
                - penalty * res_norm;
            if !(slope < 0.0) {
                // not a descent direction: the linear algebra has lost accuracy
                return finish(best, best_lb, iter, None);
            }
            let phi = self.merit(&ev, it.y, &it.w, target, penalty);
            let mut alpha = amax;
            let mut next = None;
            while alpha > 1e-12 {
                let mut rho_new = it.rho.clone();
                let mut s_new = it.s.clone();
                for (i, w) in self.offsets.windows(2).enumerate() {
                    for g in w[0]..w[1] {
                        rho_new[g] += alpha * d.dz[self.z_rho(i, g)];
                    }
                    s_new[i] += alpha * d.dz[self.z_s(i)];
                }
                let y_new = it.y + alpha * d.dy;
                let w_new: Vec<f64> = it.w.iter().zip(&d.dw).map(|(v, dv)| v + alpha * dv).collect();
                if let Some(e) = self.eval(&rho_new, &s_new, false) {
                    let change = self.merit(&e, y_new, &w_new, target, penalty) - phi;
                    if change <= 1e-4 * alpha * slope {
                        next = Some((rho_new, s_new, y_new, w_new));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((mut rho_new, mut s_new, y_new, w_new)) = next else {
                return finish(best, best_lb, iter, None);
            };
            let before = (rho_new.clone(), s_new.clone());
            renormalize(self.offsets, &mut rho_new, &mut s_new);
            let ev_new = match self.eval(&rho_new, &s_new, true) {
                Some(e) => e,
                None => {
                    (rho_new, s_new) = before;
                    self.eval(&rho_new, &s_new, true)
                        .ok_or_else(|| SensiError::invalid("iterate left the polytope"))?
                }
            };
            let update = |lam: &mut [f64], dl: &[f64], sl: &[f64]| {
                for j in 0..lam.len() {
                    let v = lam[j] + ad * dl[j];
                    // keep each multiplier within a wide band around mu / slack
                    let centre = target / sl[j];
                    lam[j] = v.clamp(centre * 1e-10, centre * 1e10);
                }
            };
            update(&mut it.la, &d.dla, &ev_new.a);
            update(&mut it.lb, &d.dlb, &ev_new.b);
            update(&mut it.lw, &d.dlw, &w_new);
            it.rho = rho_new;
            it.s = s_new;
            it.y = y_new;
            it.w = w_new;
            ev = ev_new;
        }
        unreachable!("the final iteration always returns")
    }
}

/// Largest step along `d` keeping `x + step d >= 0`.
fn max_step(x: &[f64], d: &[f64]) -> f64 {
    x.iter()
        .zip(d)
        .filter(|(_, &dv)| dv < 0.0)
        .map(|(&xv, &dv)| -xv / dv)
        .fold(f64::INFINITY, f64::min)
}

/// In-place LU factorization with partial pivoting.
fn lu_factor(a: &mut [f64], n: usize) -> Option<Vec<usize>> {
    let mut pivots = vec![0; n];
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if !(a[piv * n + col].abs() > 0.0) || !a[piv * n + col].is_finite() {
            return None;
        }
        pivots[col] = piv;
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
        }
        let d = a[col * n + col];
        for i in col + 1..n {
            let f = a[i * n + col] / d;
            a[i * n + col] = f;
            if f == 0.0 {
                continue;
            }
            for k in col + 1..n {
                a[i * n + k] -= f * a[col * n + k];
            }
        }
    }
    Some(pivots)
}

fn lu_solve(lu: &[f64], pivots: &[usize], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for (col, &p) in pivots.iter().enumerate() {
        x.swap(col, p);
    }
    for i in 0..n {
        let mut sum = x[i];
        for k in 0..i {
            sum -= lu[i * n + k] * x[k];
        }
        x[i] = sum;
    }
    for i in (0..n).rev() {
        let mut sum = x[i];
        for k in i + 1..n {
            sum -= lu[i * n + k] * x[k];
        }
        x[i] = sum / lu[i * n + i];
    }
    x
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Restores `sum rho_i = 1` after rounding drift. Ratios, and hence the
/// Gamma constraints, are unchanged.
fn renormalize(offsets: &[usize], rho: &mut [f64], s: &mut [f64]) {
    for (i, w) in offsets.windows(2).enumerate() {
        let total: f64 = rho[w[0]..w[1]].iter().sum();
        for v in &mut rho[w[0]..w[1]] {
            *v /= total;
        }
        s[i] /= total;
    }
}

/// Solves the per-stratum block systems with the equality
/// `sum_j drho_ij = 0` eliminated.
struct BlockSolver {
    chol: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    sigma: Vec<f64>,
}

impl BlockSolver {
    fn new(engine: &Engine<'_>, blocks: Vec<Vec<f64>>) -> Option<Self> {
        let mut chol = Vec::with_capacity(blocks.len());
        let mut ws = Vec::with_capacity(blocks.len());
        let mut sigma = Vec::with_capacity(blocks.len());
        for (i, b) in blocks.into_iter().enumerate() {
            let mi = engine.offsets[i + 1] - engine.offsets[i] + 1;
            let l = regularized_cholesky(b, mi)?;
            let mut a = vec![1.0; mi];
            a[mi - 1] = 0.0;
            let w = chol_solve(&l, mi, &a);
            let sg: f64 = w[..mi - 1].iter().sum();
            chol.push(l);
            ws.push(w);
            sigma.push(sg);
        }
        Some(Self {
            chol,
            w: ws,
            sigma,
        })
    }

    fn apply(&self, engine: &Engine<'_>, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; r.len()];
        for i in 0..self.chol.len() {
            let lo = engine.z_rho(i, engine.offsets[i]);
            let hi = engine.z_s(i) + 1;
            let mi = hi - lo;
            let x = chol_solve(&self.chol[i], mi, &r[lo..hi]);
            let coef = x[..mi - 1].iter().sum::<f64>() / self.sigma[i];
            for j in 0..mi {
                out[lo + j] = x[j] - coef * self.w[i][j];
            }
        }
        out
    }
}

/// Cholesky factor of `a`, shifting the diagonal by a growing multiple of
/// its largest entry when rounding makes the matrix numerically indefinite.
fn regularized_cholesky(mut a: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let top = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    let mut shift = 0.0;
    for _ in 0..6 {
        if let Some(l) = cholesky(&a, n) {
            return Some(l);
        }
        let next = if shift == 0.0 { 1e-14 * top } else { shift * 100.0 };
        for i in 0..n {
            a[i * n + i] += next - shift;
        }
        shift = next;
    }
    None
}

/// Lower Cholesky factor of a symmetric positive definite row-major matrix.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

pub(crate) fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut sum = y[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    y
}
