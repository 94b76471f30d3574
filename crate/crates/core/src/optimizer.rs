//! Proximal projected gradient on the reduced cost, with Armijo backtracking
//! and Barzilai-Borwein step guesses, plus deterministic multistart runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::drift::{BoxBounds, ControlPath, CostSpec};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::real::Real;
use crate::reduced::{gradient_from, kkt_residual, prox, vi_residual, Evaluation, GradientPath, KktResidual, Problem};

/// Smooth-plus-`L1` objective over nodal controls.
pub trait Objective<T: Real>: Sync {
    /// Whatever the gradient needs from a cost evaluation.
    type Eval: Send;

    fn time(&self) -> &TimeGrid<T>;
    fn dim(&self) -> usize;
    fn cost_spec(&self) -> &CostSpec<T>;
    fn bounds(&self) -> &BoxBounds<T>;
    /// Value of `smooth(u) + delta * sum_n w_n |u(t_n)|`.
    fn evaluate(&self, u: &ControlPath<T>) -> Result<(T, Self::Eval)>;
    fn gradient(&self, u: &ControlPath<T>, eval: &Self::Eval) -> Result<GradientPath<T>>;
}

impl<T: Real> Objective<T> for Problem<T> {
    type Eval = Evaluation<T>;

    fn time(&self) -> &TimeGrid<T> {
        &self.time
    }

    fn dim(&self) -> usize {
        self.grid.dim()
    }

    fn cost_spec(&self) -> &CostSpec<T> {
        &self.cost
    }

    fn bounds(&self) -> &BoxBounds<T> {
        &self.bounds
    }

    fn evaluate(&self, u: &ControlPath<T>) -> Result<(T, Evaluation<T>)> {
        let e = Problem::evaluate(self, u)?;
        Ok((e.cost.objective, e))
    }

    fn gradient(&self, _u: &ControlPath<T>, eval: &Evaluation<T>) -> Result<GradientPath<T>> {
        gradient_from(self, eval)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig<T> {
    pub max_iters: usize,
    pub step0: T,
    pub c1: T,
    pub backtrack: T,
    pub max_backtracks: usize,
    pub vi_tol: T,
    pub seeds: Vec<u64>,
}

impl<T: Real> Default for OptimConfig<T> {
    fn default() -> Self {
        Self {
            max_iters: 200,
            step0: T::one(),
            c1: T::lit(1e-4),
            backtrack: T::half(),
            max_backtracks: 40,
            vi_tol: T::lit(1e-6),
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl<T: Real> OptimConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.step0 > T::zero()) {
            return Err(Error::InvalidArgument("step0 must be > 0".into()));
        }
        if !(self.c1 > T::zero() && self.c1 < T::one()) {
            return Err(Error::InvalidArgument("c1 must lie in (0, 1)".into()));
        }
        if !(self.backtrack > T::zero() && self.backtrack < T::one()) {
            return Err(Error::InvalidArgument("backtrack must lie in (0, 1)".into()));
        }
        if !(self.vi_tol > T::zero()) {
            return Err(Error::InvalidArgument("vi_tol must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
    LinesearchFailure,
}

impl Termination {
    pub fn name(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIters => "max_iters",
            Termination::LinesearchFailure => "linesearch_failure",
        }
    }
}

/// One row of the iteration log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord<T> {
    pub iter: usize,
    pub cost: T,
    pub vi_residual: T,
    /// Step accepted to reach this iterate (0 for the start point).
    pub step: T,
}

#[derive(Debug, Clone)]
pub struct OptimResult<T> {
    pub control: ControlPath<T>,
    pub history: Vec<IterRecord<T>>,
    pub kkt: KktResidual<T>,
    pub gradient: GradientPath<T>,
    pub iterations: usize,
    pub termination: Termination,
    /// Every iterate satisfied the box.
    pub feasible: bool,
}

impl<T: Real> OptimResult<T> {
    pub fn final_cost(&self) -> T {
        self.history[self.history.len() - 1].cost
    }

    pub fn costs(&self) -> Vec<T> {
        self.history.iter().map(|r| r.cost).collect()
    }

    /// Writes the iteration log `iter,cost,vi_residual,step`.
    pub fn write_iterations<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        use crate::grid::fmt17;
        writeln!(w, "iter,cost,vi_residual,step")?;
        for r in &self.history {
            writeln!(w, "{},{},{},{}", r.iter, fmt17(r.cost), fmt17(r.vi_residual), fmt17(r.step))?;
        }
        Ok(())
    }
}

/// `gamma ||d||^2 + nu ||d'||^2` on the time grid.
fn metric_sq<T: Real>(d: &ControlPath<T>, cost: &CostSpec<T>) -> T {
    let mut m = cost.gamma * d.dot(d);
    if cost.nu > T::zero() {
        let time = d.time();
        let dt = time.dt();
        for n in 0..time.nt() {
            for (a, b) in d.node(n).iter().zip(d.node(n + 1)) {
                let s = (*b - *a) / dt;
                m += cost.nu * dt * s * s;
            }
        }
    }
    m
}

fn pin_endpoints<T: Real>(u: &mut ControlPath<T>, bounds: &BoxBounds<T>) {
    let nt = u.time().nt();
    for n in [0, nt] {
        for (j, v) in u.node_mut(n).iter_mut().enumerate() {
            *v = bounds.clamp(j, T::zero());
        }
    }
}

/// Minimises the objective from `initial`.
///
/// With `nu = 0` the step is `u+ = P(shrink_{a delta/gamma}(u - a g / gamma))`,
/// `g` the `L^2` gradient; with `nu > 0` the `H^1` gradient replaces `g / gamma`
/// and the endpoint values stay pinned at the projection of zero.
pub fn optimize<T: Real, O: Objective<T>>(
    objective: &O,
    initial: &ControlPath<T>,
    config: &OptimConfig<T>,
) -> Result<OptimResult<T>> {
    config.validate()?;
    let cost = objective.cost_spec().clone();
    let bounds = objective.bounds();
    let pinned = cost.nu > T::zero();
    let mut u = crate::drift::project_box(initial, bounds);
    if pinned {
        pin_endpoints(&mut u, bounds);
    }
    let (mut f, ev) = objective.evaluate(&u)?;
    let mut g = objective.gradient(&u, &ev)?;
    let mut vi = vi_residual(&u, &g.l2, cost.delta, bounds, pinned);
    let mut history = vec![IterRecord { iter: 0, cost: f, vi_residual: vi, step: T::zero() }];
    let mut feasible = bounds.contains(&u);
    let mut alpha = config.step0;
    let min_step = T::lit(1e-4);
    let max_step = T::lit(1e4);
    // Below this a "decrease" is rounding noise in the cost.
    let tiny = T::lit(1e-10);
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;
    for it in 1..=config.max_iters {
        if vi <= config.vi_tol {
            termination = Termination::Converged;
            break;
        }
        let direction = if pinned { g.active.clone() } else { g.l2.scaled(T::one() / cost.gamma) };
        let tau_unit = cost.delta / cost.gamma;
        let mut accepted = None;
        let mut a = alpha;
        for _ in 0..=config.max_backtracks {
            if a < config.step0 * tiny {
                break;
            }
            let mut cand = prox(&u.axpy(-a, &direction), a * tau_unit, bounds);
            if pinned {
                pin_endpoints(&mut cand, bounds);
            }
            let d = cand.sub(&u);
            let m = metric_sq(&d, &cost);
            if m == T::zero() {
                break;
            }
            let (fc, evc) = objective.evaluate(&cand)?;
            if fc <= f - config.c1 / a * m {
                accepted = Some((cand, fc, evc, d, m));
                break;
            }
            a *= config.backtrack;
        }
        let Some((cand, fc, evc, s, s_m)) = accepted else {
            termination = Termination::LinesearchFailure;
            break;
        };
        let g_new = objective.gradient(&cand, &evc)?;
        let sy = s.dot(&g_new.l2.sub(&g.l2));
        alpha = if sy > T::zero() { (s_m / sy).max(min_step).min(max_step) } else { config.step0 };
        u = cand;
        f = fc;
        g = g_new;
        vi = vi_residual(&u, &g.l2, cost.delta, bounds, pinned);
        feasible &= bounds.contains(&u);
        history.push(IterRecord { iter: it, cost: f, vi_residual: vi, step: a });
        iterations = it;
    }
    if termination == Termination::MaxIters && vi <= config.vi_tol {
        termination = Termination::Converged;
    }
    let kkt = kkt_residual(&u, &g.l2, cost.delta, bounds, None, pinned);
    Ok(OptimResult { control: u, history, kkt, gradient: g, iterations, termination, feasible })
}

/// Admissible pseudo-random start: nodal values uniform in the box (or in
/// `[-1, 1]` along unbounded components).
pub fn random_control<T: Real>(time: &TimeGrid<T>, dim: usize, bounds: &BoxBounds<T>, seed: u64) -> ControlPath<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = ControlPath::zeros(time, dim);
    let c = u.components();
    for (i, v) in u.data_mut().iter_mut().enumerate() {
        let j = i % c;
        let lo = bounds.lower()[j].max(-T::one());
        let hi = bounds.upper()[j].min(T::one());
        let s: f64 = rng.gen();
        *v = lo + (hi - lo) * T::lit(s);
    }
    u
}

#[derive(Debug, Clone)]
pub struct MultiStartReport<T> {
    pub seeds: Vec<u64>,
    pub runs: Vec<OptimResult<T>>,
    /// `distances[i][j] = || u_i - u_j ||`.
    pub distances: Vec<Vec<T>>,
    pub max_distance: T,
    pub max_norm: T,
    pub uniqueness_tol: T,
    pub agree: bool,
}

/// Runs [`optimize`] from one random start per seed (in parallel, results in
/// seed order) and compares the minimisers.
pub fn multi_start<T: Real, O: Objective<T>>(
    objective: &O,
    config: &OptimConfig<T>,
    uniqueness_tol: T,
) -> Result<MultiStartReport<T>> {
    if config.seeds.len() < 2 {
        return Err(Error::InvalidArgument("multistart needs at least two seeds".into()));
    }
    let runs: Vec<OptimResult<T>> = config
        .seeds
        .par_iter()
        .map(|s| {
            let u0 = random_control(objective.time(), objective.dim(), objective.bounds(), *s);
            optimize(objective, &u0, config)
        })
        .collect::<Result<_>>()?;
    let k = runs.len();
    let mut distances = vec![vec![T::zero(); k]; k];
    let mut max_distance = T::zero();
    for i in 0..k {
        for j in i + 1..k {
            let d = runs[i].control.sub(&runs[j].control).norm();
            distances[i][j] = d;
            distances[j][i] = d;
            max_distance = max_distance.max(d);
        }
    }
    let max_norm = runs.iter().fold(T::zero(), |m, r| m.max(r.control.norm()));
    Ok(MultiStartReport {
        seeds: config.seeds.clone(),
        runs,
        distances,
        max_distance,
        max_norm,
        uniqueness_tol,
        agree: max_distance <= uniqueness_tol,
    })
}

/// Nodes where every component is zero (`|u| <= 1e-10`).
pub fn zero_node_count<T: Real>(u: &ControlPath<T>) -> usize {
    let tol = T::lit(crate::reduced::ZERO_TOL);
    (0..u.time().node_count()).filter(|n| u.node(*n).iter().all(|v| v.abs() <= tol)).count()
}
