//! Reduced cost `J(u) = J(G(u), u)`, its gradients, multiplier reconstruction
//! and the probes built on the linearised state.

use crate::adjoint::{solve_adjoint, AdjointOptions, AdjointTrajectory};
use crate::drift::{
    control_cost_terms, BoxBounds, ControlCosts, ControlPath, CostSpec, DriftSpec, A0,
};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, solve_tangent, ForwardOptions, Source, StateTrajectory};
use crate::grid::{partial_derivative, weighted_sobolev_norm, GridSpec, ScalarField, TimeGrid};
use crate::real::Real;

/// Everything needed to evaluate the reduced cost for a given control.
#[derive(Debug, Clone)]
pub struct Problem<T> {
    pub grid: GridSpec<T>,
    pub time: TimeGrid<T>,
    pub rho0: ScalarField<T>,
    pub source: Source<T>,
    pub a0: A0<T>,
    pub cost: CostSpec<T>,
    pub bounds: BoxBounds<T>,
    pub forward: ForwardOptions<T>,
    pub adjoint: AdjointOptions,
}

impl<T: Real> Problem<T> {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn drift(&self, control: &ControlPath<T>) -> DriftSpec<T> {
        DriftSpec::new(self.a0.clone(), control.clone())
    }

    pub fn zero_control(&self) -> ControlPath<T> {
        ControlPath::zeros(&self.time, self.dim())
    }

    pub fn state(&self, control: &ControlPath<T>, opts: &ForwardOptions<T>) -> Result<StateTrajectory<T>> {
        solve_forward(&self.rho0, &self.drift(control), &self.source, &self.time, opts)
    }

    /// Forward solve and cost breakdown.
    pub fn evaluate(&self, control: &ControlPath<T>) -> Result<Evaluation<T>> {
        self.evaluate_with(control, &self.forward)
    }

    pub fn evaluate_with(&self, control: &ControlPath<T>, opts: &ForwardOptions<T>) -> Result<Evaluation<T>> {
        let state = self.state(control, opts)?;
        let cost = cost_breakdown(control, &state, &self.cost)?;
        Ok(Evaluation { control: control.clone(), cost, state })
    }

    pub fn adjoint_of(&self, eval: &Evaluation<T>) -> Result<AdjointTrajectory<T>> {
        solve_adjoint(&self.cost, eval.state.drift(), &self.time, &self.grid, &self.adjoint)
    }
}

/// Terms of the reduced cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown<T> {
    /// `int_0^T int theta rho`, trapezoid over the time nodes.
    pub running: T,
    /// `int phi rho(T)`.
    pub terminal: T,
    pub controls: ControlCosts<T>,
    /// `running + terminal + gamma/2 L2sq + nu/2 H1sq`.
    pub smooth: T,
    /// `smooth + delta L1` with the exact piecewise-linear `L1`.
    pub total: T,
    /// `smooth + delta L1` with the nodal (trapezoid) `L1`; this is the value
    /// the optimiser decreases.
    pub objective: T,
}

#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub control: ControlPath<T>,
    pub cost: CostBreakdown<T>,
    pub state: StateTrajectory<T>,
}

fn cost_breakdown<T: Real>(
    control: &ControlPath<T>,
    state: &StateTrajectory<T>,
    cost: &CostSpec<T>,
) -> Result<CostBreakdown<T>> {
    let grid = *state.grid();
    let time = *state.time();
    let dim = grid.dim();
    let vol = grid.cell_volume();
    let mut running = T::zero();
    let mut terminal = T::zero();
    let theta_zero = cost.theta.is_zero();
    state.for_each_state(|n, rho| {
        let t = time.t(n);
        if !theta_zero {
            let mut s = T::zero();
            for (i, r) in rho.iter().enumerate() {
                s += cost.theta.eval(&grid.point(i), t, dim) * *r;
            }
            running += time.weight(n) * s * vol;
        }
        if n == time.nt() {
            let mut s = T::zero();
            for (i, r) in rho.iter().enumerate() {
                s += cost.phi.eval(&grid.point(i), t, dim) * *r;
            }
            terminal = s * vol;
        }
        Ok(())
    })?;
    let controls = control_cost_terms(control, cost.l1_norm);
    let half = T::half();
    let smooth = running + terminal + half * cost.gamma * controls.l2sq + half * cost.nu * controls.h1sq;
    let total = smooth + cost.delta * controls.l1;
    let objective = smooth + cost.delta * controls.l1_lumped;
    if !objective.is_finite() {
        return Err(Error::NonFinite("reduced cost".into()));
    }
    Ok(CostBreakdown { running, terminal, controls, smooth, total, objective })
}

/// `J(u)` with the exact control-cost quadrature.
pub fn reduced_cost<T: Real>(control: &ControlPath<T>, problem: &Problem<T>) -> Result<T> {
    Ok(problem.evaluate(control)?.cost.total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    L2,
    H1Tilde,
}

/// Gradient of the smooth part of the reduced cost at one control.
#[derive(Debug, Clone)]
pub struct GradientPath<T> {
    /// `int div(e rho) q` per node and component (`e` the unit control
    /// direction), direct assembly.
    pub integral: ControlPath<T>,
    /// Same quantity from `-int rho e . grad q`.
    pub integral_ibp: ControlPath<T>,
    /// `max |integral - integral_ibp|`.
    pub discrepancy: T,
    /// `gamma u + integral + nu * (discrete -u'')`: the L2 gradient.
    pub l2: ControlPath<T>,
    /// Gradient in the active metric: `l2` when `nu = 0`, otherwise
    /// `u + h1_riesz(integral)`.
    pub active: ControlPath<T>,
    pub metric: Metric,
}

/// `int d_r(rho) q` and `int d_r(x_r rho) q` for every node, plus the
/// integrated-by-parts variants.
pub fn assemble_integrals<T: Real>(
    state: &StateTrajectory<T>,
    adjoint: &AdjointTrajectory<T>,
) -> Result<(ControlPath<T>, ControlPath<T>)> {
    let grid = *state.grid();
    if !grid.same_as(adjoint.grid()) || state.time() != adjoint.time() {
        return Err(Error::GridMismatch("state and adjoint grids differ".into()));
    }
    let time = *state.time();
    let dim = grid.dim();
    let vol = grid.cell_volume();
    let mut direct = ControlPath::zeros(&time, dim);
    let mut ibp = ControlPath::zeros(&time, dim);
    let coords: Vec<[T; 2]> = grid.points();
    let all_stored = state.stride() == 1 || adjoint.stride() > 1;
    let mut work = |n: usize, rho: &[T], q: &[T]| -> Result<()> {
        let rho_f = ScalarField { grid, values: rho.to_vec() };
        let q_f = ScalarField { grid, values: q.to_vec() };
        for r in 0..dim {
            let xr_rho = ScalarField {
                grid,
                values: rho.iter().zip(&coords).map(|(v, x)| *v * x[r]).collect(),
            };
            let d_rho = partial_derivative(&rho_f, r);
            let d_xrho = partial_derivative(&xr_rho, r);
            let d_q = partial_derivative(&q_f, r);
            let (mut a, mut b, mut c, mut e) = (T::zero(), T::zero(), T::zero(), T::zero());
            for i in 0..rho.len() {
                a += d_rho.values[i] * q[i];
                b += d_xrho.values[i] * q[i];
                c -= rho[i] * d_q.values[i];
                e -= xr_rho.values[i] * d_q.values[i];
            }
            direct.node_mut(n)[r] = a * vol;
            direct.node_mut(n)[dim + r] = b * vol;
            ibp.node_mut(n)[r] = c * vol;
            ibp.node_mut(n)[dim + r] = e * vol;
        }
        Ok(())
    };
    if all_stored {
        adjoint.for_each_state(|n, q| {
            let rho = state.state(n)?;
            work(n, &rho.values, q)
        })?;
    } else {
        state.for_each_state(|n, rho| work(n, rho, &adjoint.state(n)?.values))?;
    }
    Ok((direct, ibp))
}

/// Discrete `-nu u''` matching the derivative of `nu/2 int |u'|^2` divided by
/// the trapezoid weights.
fn h1_term<T: Real>(u: &ControlPath<T>, nu: T) -> ControlPath<T> {
    let time = *u.time();
    let nt = time.nt();
    let c = u.components();
    let dt2 = time.dt() * time.dt();
    let mut out = ControlPath::zeros(&time, u.dim());
    if nu == T::zero() {
        return out;
    }
    for j in 0..c {
        for n in 0..=nt {
            let v = if n == 0 {
                T::two() * (u.node(0)[j] - u.node(1)[j])
            } else if n == nt {
                T::two() * (u.node(nt)[j] - u.node(nt - 1)[j])
            } else {
                T::two() * u.node(n)[j] - u.node(n - 1)[j] - u.node(n + 1)[j]
            };
            out.node_mut(n)[j] = nu * v / dt2;
        }
    }
    out
}

/// Gradient from a finished forward run.
pub fn gradient_from<T: Real>(problem: &Problem<T>, eval: &Evaluation<T>) -> Result<GradientPath<T>> {
    let adjoint = problem.adjoint_of(eval)?;
    let (integral, integral_ibp) = assemble_integrals(&eval.state, &adjoint)?;
    Ok(finish_gradient(&eval.control, integral, integral_ibp, &problem.cost))
}

pub(crate) fn finish_gradient<T: Real>(
    u: &ControlPath<T>,
    integral: ControlPath<T>,
    integral_ibp: ControlPath<T>,
    cost: &CostSpec<T>,
) -> GradientPath<T> {
    let discrepancy = integral
        .data()
        .iter()
        .zip(integral_ibp.data())
        .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
    let mut l2 = u.scaled(cost.gamma).axpy(T::one(), &integral);
    if cost.nu > T::zero() {
        l2 = l2.axpy(T::one(), &h1_term(u, cost.nu));
    }
    let (active, metric) = if cost.nu > T::zero() {
        let mu = h1_riesz(&integral, cost.gamma, cost.nu).unwrap_or_else(|_| integral.clone());
        let mut g = u.axpy(T::one(), &mu);
        let nt = u.time().nt();
        for n in [0, nt] {
            g.node_mut(n).iter_mut().for_each(|v| *v = T::zero());
        }
        (g, Metric::H1Tilde)
    } else {
        (l2.clone(), Metric::L2)
    };
    GradientPath { integral, integral_ibp, discrepancy, l2, active, metric }
}

/// Forward run, adjoint run and gradient assembly at `control`.
pub fn reduced_gradient<T: Real>(control: &ControlPath<T>, problem: &Problem<T>) -> Result<GradientPath<T>> {
    let eval = problem.evaluate(control)?;
    gradient_from(problem, &eval)
}

/// Thomas algorithm for `a_i x_{i-1} + b_i x_i + c_i x_{i+1} = d_i`.
pub fn solve_tridiagonal<T: Real>(a: &[T], b: &[T], c: &[T], d: &[T]) -> Result<Vec<T>> {
    let n = d.len();
    if a.len() != n || b.len() != n || c.len() != n {
        return Err(Error::InvalidArgument("tridiagonal bands must have equal length".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut cp = vec![T::zero(); n];
    let mut dp = vec![T::zero(); n];
    let mut m = b[0];
    if m == T::zero() {
        return Err(Error::NonFinite("zero pivot in tridiagonal solve".into()));
    }
    cp[0] = c[0] / m;
    dp[0] = d[0] / m;
    for i in 1..n {
        m = b[i] - a[i] * cp[i - 1];
        if m == T::zero() {
            return Err(Error::NonFinite("zero pivot in tridiagonal solve".into()));
        }
        cp[i] = c[i] / m;
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m;
    }
    let mut x = dp;
    for i in (0..n - 1).rev() {
        let next = x[i + 1];
        x[i] -= cp[i] * next;
    }
    Ok(x)
}

/// Solves `(-nu d^2/dt^2 + gamma) mu = rhs`, `mu(0) = mu(T) = 0`, with the
/// three-point second difference on the interior nodes, per component.
pub fn h1_riesz<T: Real>(rhs: &ControlPath<T>, gamma: T, nu: T) -> Result<ControlPath<T>> {
    if !(nu > T::zero()) {
        return Err(Error::NotApplicable("h1_riesz needs nu > 0".into()));
    }
    let time = *rhs.time();
    let nt = time.nt();
    let m = nt - 1;
    let k = nu / (time.dt() * time.dt());
    let a = vec![-k; m];
    let b = vec![T::two() * k + gamma; m];
    let c = vec![-k; m];
    let mut out = ControlPath::zeros(&time, rhs.dim());
    for j in 0..rhs.components() {
        let d: Vec<T> = (1..nt).map(|n| rhs.node(n)[j]).collect();
        let x = solve_tridiagonal(&a, &b, &c, &d)?;
        for (i, v) in x.into_iter().enumerate() {
            out.node_mut(i + 1)[j] = v;
        }
    }
    Ok(out)
}

/// Componentwise soft-thresholding.
#[inline]
pub fn shrink<T: Real>(v: T, tau: T) -> T {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        T::zero()
    }
}

/// `P_box(shrink_tau(v))` at every node.
pub fn prox<T: Real>(v: &ControlPath<T>, tau: T, bounds: &BoxBounds<T>) -> ControlPath<T> {
    let mut out = v.clone();
    let c = out.components();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        *x = bounds.clamp(i % c, shrink(*x, tau));
    }
    out
}

/// Nodes entering residual norms: all of them, or the interior ones when the
/// endpoints are pinned.
fn node_range(nt: usize, pinned: bool) -> std::ops::Range<usize> {
    if pinned {
        1..nt
    } else {
        0..nt + 1
    }
}

fn trap_norm_over<T: Real>(v: &ControlPath<T>, pinned: bool) -> T {
    let time = *v.time();
    let mut s = T::zero();
    for n in node_range(time.nt(), pinned) {
        s += time.weight(n) * v.node(n).iter().map(|x| *x * *x).sum::<T>();
    }
    s.sqrt()
}

/// `|| u - P_box(shrink_delta(u - g)) ||` in the trapezoid `L^2` norm, `g`
/// being the `delta`-free `L^2` gradient.
pub fn vi_residual<T: Real>(u: &ControlPath<T>, g: &ControlPath<T>, delta: T, bounds: &BoxBounds<T>, pinned: bool) -> T {
    let step = prox(&u.sub(g), delta, bounds);
    trap_norm_over(&u.sub(&step), pinned)
}

/// Multipliers of the optimality system.
#[derive(Debug, Clone)]
pub struct Multipliers<T> {
    /// Element of `delta * d|u|`.
    pub lambda_hat: ControlPath<T>,
    pub lambda_plus: ControlPath<T>,
    pub lambda_minus: ControlPath<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual<T> {
    /// Trapezoid norm of `g + lambda_hat + lambda_plus - lambda_minus`.
    pub stationarity: T,
    /// `max |lambda_plus (ub - u)|`.
    pub complement_upper: T,
    /// `max |lambda_minus (u - ua)|`.
    pub complement_lower: T,
    /// Violation of `lambda_hat = delta sgn(u)` off zero and `|lambda_hat| <= delta` on zero,
    /// plus any negative part of `lambda_plus`, `lambda_minus`.
    pub sign_consistency: T,
    pub vi_residual: T,
}

impl<T: Real> KktResidual<T> {
    pub fn max(&self) -> T {
        self.stationarity
            .max(self.complement_upper)
            .max(self.complement_lower)
            .max(self.sign_consistency)
            .max(self.vi_residual)
    }
}

/// Values with `|u| <= ZERO_TOL` count as zero.
pub const ZERO_TOL: f64 = 1e-10;

/// Reconstructs multipliers from the `delta`-free gradient `g`.
///
/// Off the zero set `lambda_hat = delta sgn(u)`; on it `lambda_hat` is `-g`
/// clipped to `[-delta, delta]`. Whatever stationarity residual remains at an
/// active bound is assigned to the matching box multiplier.
pub fn reconstruct_multipliers<T: Real>(
    u: &ControlPath<T>,
    g: &ControlPath<T>,
    delta: T,
    bounds: &BoxBounds<T>,
) -> Multipliers<T> {
    let c = u.components();
    let zero = T::lit(ZERO_TOL);
    let mut lambda_hat = ControlPath::zeros(u.time(), u.dim());
    let mut lambda_plus = lambda_hat.clone();
    let mut lambda_minus = lambda_hat.clone();
    for i in 0..u.data().len() {
        let (x, gi) = (u.data()[i], g.data()[i]);
        let lh = if x.abs() > zero { delta * x.signum() } else { (-gi).max(-delta).min(delta) };
        lambda_hat.data_mut()[i] = lh;
        let r = gi + lh;
        let j = i % c;
        if x >= bounds.upper()[j] && r < T::zero() {
            lambda_plus.data_mut()[i] = -r;
        } else if x <= bounds.lower()[j] && r > T::zero() {
            lambda_minus.data_mut()[i] = r;
        }
    }
    Multipliers { lambda_hat, lambda_plus, lambda_minus }
}

/// Residuals of the first-order system at `u` with `delta`-free gradient `g`.
pub fn kkt_residual<T: Real>(
    u: &ControlPath<T>,
    g: &ControlPath<T>,
    delta: T,
    bounds: &BoxBounds<T>,
    multipliers: Option<&Multipliers<T>>,
    pinned: bool,
) -> KktResidual<T> {
    let owned;
    let m = match multipliers {
        Some(m) => m,
        None => {
            owned = reconstruct_multipliers(u, g, delta, bounds);
            &owned
        }
    };
    let c = u.components();
    let zero = T::lit(ZERO_TOL);
    let nt = u.time().nt();
    let mut station = ControlPath::zeros(u.time(), u.dim());
    let (mut cu, mut cl, mut sign) = (T::zero(), T::zero(), T::zero());
    for n in node_range(nt, pinned) {
        for j in 0..c {
            let i = n * c + j;
            let x = u.data()[i];
            let lh = m.lambda_hat.data()[i];
            let lp = m.lambda_plus.data()[i];
            let lm = m.lambda_minus.data()[i];
            station.data_mut()[i] = g.data()[i] + lh + lp - lm;
            cu = cu.max((lp * (bounds.upper()[j] - x)).abs());
            cl = cl.max((lm * (x - bounds.lower()[j])).abs());
            let s = if x.abs() > zero { (lh - delta * x.signum()).abs() } else { (lh.abs() - delta).max(T::zero()) };
            sign = sign.max(s).max((-lp).max(T::zero())).max((-lm).max(T::zero()));
        }
    }
    KktResidual {
        stationarity: trap_norm_over(&station, pinned),
        complement_upper: cu,
        complement_lower: cl,
        sign_consistency: sign,
        vi_residual: vi_residual(u, g, delta, bounds, pinned),
    }
}

/// Fitted order of the linearisation remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport<T> {
    pub eps: Vec<T>,
    /// `max_n || G(u + eps du)(t_n) - G(u)(t_n) - eps DG(u)[du](t_n) ||_{L^2}`.
    pub remainders: Vec<T>,
    /// Least-squares slope of `log R` against `log eps`.
    pub slope: T,
    /// `max_n || DG(u)[du](t_n) || / int_0^{t_n} |du|`, the limit of the
    /// Lipschitz ratio along `du`.
    pub lipschitz_ratio: T,
    /// Whether every `u +- eps du` stays inside the box.
    pub interior: bool,
}

/// Least-squares slope of `log y` against `log x` over positive pairs.
pub fn loglog_slope<T: Real>(x: &[T], y: &[T]) -> T {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > T::zero() && **b > T::zero())
        .map(|(a, b)| (a.to_f64_lossy().ln(), b.to_f64_lossy().ln()))
        .collect();
    if pts.len() < 2 {
        return T::nan();
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    T::lit(sxy / sxx)
}

/// `int_0^{t_n} |v(s)| ds` per node, componentwise norm, trapezoid.
pub(crate) fn cumulative_abs<T: Real>(v: &ControlPath<T>) -> Vec<T> {
    let time = *v.time();
    let norm = |n: usize| v.node(n).iter().map(|x| x.abs()).sum::<T>();
    let mut acc = vec![T::zero(); time.node_count()];
    for n in 1..time.node_count() {
        acc[n] = acc[n - 1] + time.dt() * T::half() * (norm(n - 1) + norm(n));
    }
    acc
}

/// Compares finite perturbations of the state with the linearised state.
pub fn frechet_probe<T: Real>(
    control: &ControlPath<T>,
    direction: &ControlPath<T>,
    eps_ladder: &[T],
    problem: &Problem<T>,
) -> Result<ProbeReport<T>> {
    if eps_ladder.len() < 4 || eps_ladder.windows(2).any(|w| !(w[1] < w[0])) || !(eps_ladder[eps_ladder.len() - 1] > T::zero()) {
        return Err(Error::InvalidArgument("eps ladder must be strictly decreasing, positive, >= 4 points".into()));
    }
    let drift = problem.drift(control);
    let opts = ForwardOptions { stride: 1, ..problem.forward.clone() };
    let tan = solve_tangent(&problem.rho0, &drift, &problem.source, direction, &problem.time, &opts)?;
    let frozen = opts.frozen(tan.base.schedule());
    let vol = problem.grid.cell_volume();
    let mut remainders = Vec::with_capacity(eps_ladder.len());
    let mut interior = true;
    for &eps in eps_ladder {
        let up = control.axpy(eps, direction);
        interior &= problem.bounds.contains(&up) && problem.bounds.contains(&control.axpy(-eps, direction));
        let pert = problem.state(&up, &frozen)?;
        let mut worst = T::zero();
        pert.for_each_state(|n, rho| {
            let base = tan.base.state(n)?;
            let s: T = rho
                .iter()
                .zip(&base.values)
                .zip(&tan.sigma[n])
                .map(|((p, b), d)| {
                    let r = *p - *b - eps * *d;
                    r * r
                })
                .sum();
            worst = worst.max((s * vol).sqrt());
            Ok(())
        })?;
        remainders.push(worst);
    }
    let cum = cumulative_abs(direction);
    let mut lipschitz_ratio = T::zero();
    for (n, s) in tan.sigma.iter().enumerate() {
        if cum[n] > T::zero() {
            let norm = (s.iter().map(|v| *v * *v).sum::<T>() * vol).sqrt();
            lipschitz_ratio = lipschitz_ratio.max(norm / cum[n]);
        }
    }
    let slope = if remainders.iter().all(|r| *r == T::zero()) { T::two() } else { loglog_slope(eps_ladder, &remainders) };
    Ok(ProbeReport { eps: eps_ladder.to_vec(), remainders, slope, lipschitz_ratio, interior })
}

/// The computable uniqueness constant and its ratio against `gamma / T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallnessCertificate<T> {
    pub k_tilde: T,
    /// `K T / gamma`.
    pub ratio: T,
    pub pass: bool,
    /// `T = 0`: the ratio vanishes trivially.
    pub degenerate: bool,
    pub c_universal: T,
}

/// Norms feeding the uniqueness constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallnessInputs<T> {
    pub t_final: T,
    pub gamma: T,
    /// `sum_{j=1..3} sup |grad^j a0|`; multiplied by `T` for the `L^1_T` norm.
    pub a0_c2b: T,
    /// `max(|ua|, |ub|)`.
    pub box_max: T,
    pub rho0_h2_2: T,
    /// `|| g ||_{H^2_2}` of the time-independent source.
    pub g_h2_2: T,
    pub phi_h1_1: T,
    /// `int_0^T || theta(t) ||_{H^1_1} dt`.
    pub theta_h1_1_int: T,
}

pub fn smallness_from_inputs<T: Real>(inp: &SmallnessInputs<T>, c: T) -> SmallnessCertificate<T> {
    let t = inp.t_final;
    let growth = t * inp.a0_c2b + t * inp.box_max;
    let data = (inp.rho0_h2_2 + t * inp.g_h2_2) * (inp.phi_h1_1 + inp.theta_h1_1_int);
    // Without tracking data the cost is strictly convex whatever the box.
    let k = if data == T::zero() { T::zero() } else { c * (c * growth).exp() * data };
    let degenerate = t == T::zero();
    let ratio = if degenerate { T::zero() } else { k * t / inp.gamma };
    SmallnessCertificate { k_tilde: k, ratio, pass: ratio < T::two(), degenerate, c_universal: c }
}

pub fn smallness_inputs<T: Real>(problem: &Problem<T>) -> Result<SmallnessInputs<T>> {
    let grid = &problem.grid;
    let time = &problem.time;
    let dim = grid.dim();
    let sup = problem.a0.sup_derivative_norms(dim);
    let theta = &problem.cost.theta;
    let theta_h1_1_int = if theta.is_time_dependent() {
        let mut s = T::zero();
        for n in 0..time.node_count() {
            let f = ScalarField::from_fn(grid, |x| theta.eval(x, time.t(n), dim));
            s += time.weight(n) * weighted_sobolev_norm(&f, 1, 1)?;
        }
        s
    } else {
        time.t_final() * weighted_sobolev_norm(&ScalarField::from_fn(grid, |x| theta.eval(x, T::zero(), dim)), 1, 1)?
    };
    let phi = ScalarField::from_fn(grid, |x| problem.cost.phi.eval(x, time.t_final(), dim));
    let g_h2_2 = if problem.source.is_zero() {
        T::zero()
    } else {
        weighted_sobolev_norm(&problem.source.sample(grid), 2, 2)?
    };
    Ok(SmallnessInputs {
        t_final: time.t_final(),
        gamma: problem.cost.gamma,
        a0_c2b: sup[0] + sup[1] + sup[2],
        box_max: problem.bounds.max_euclidean(),
        rho0_h2_2: weighted_sobolev_norm(&problem.rho0, 2, 2)?,
        g_h2_2,
        phi_h1_1: weighted_sobolev_norm(&phi, 1, 1)?,
        theta_h1_1_int,
    })
}

/// Evaluates the uniqueness constant with universal constant `c_universal`.
pub fn smallness_certificate<T: Real>(problem: &Problem<T>, c_universal: T) -> Result<SmallnessCertificate<T>> {
    Ok(smallness_from_inputs(&smallness_inputs(problem)?, c_universal))
}

/// Problem with default solver options.
pub fn make_problem<T: Real>(
    rho0: ScalarField<T>,
    time: TimeGrid<T>,
    a0: A0<T>,
    cost: CostSpec<T>,
    bounds: BoxBounds<T>,
) -> Problem<T> {
    Problem {
        grid: rho0.grid,
        time,
        rho0,
        source: Source::Zero,
        a0,
        cost,
        bounds,
        forward: ForwardOptions::default(),
        adjoint: AdjointOptions::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{Potential, TrackPath};
    use crate::forward::Scheme;
    use crate::grid::{integrate, make_grid, sample_function, DensityPreset};

    fn base(theta: Potential<f64>, phi: Potential<f64>, gamma: f64, delta: f64, nu: f64, n: usize, nt: usize) -> Problem<f64> {
        let g = make_grid::<f64>(1, &[-8.0], &[8.0], &[n]).unwrap();
        let t = TimeGrid::new(1.0, nt).unwrap();
        let rho0 = sample_function(&g, &DensityPreset::Gaussian { center: [0.0, 0.0], variance: 0.5 });
        let cost = CostSpec::new(gamma, delta, nu, theta, phi).unwrap();
        make_problem(rho0, t, A0::Zero, cost, BoxBounds::uniform(1, -2.0, 2.0).unwrap())
    }

    fn well(c: f64) -> Potential<f64> {
        Potential::GaussianWell { center: [c, 0.0], weight: 1.0 }
    }

    #[test]
    fn cost_examples() {
        let p = base(Potential::Zero, Potential::Zero, 1.0, 0.0, 0.0, 64, 16);
        assert_eq!(reduced_cost(&p.zero_control(), &p).unwrap(), 0.0);

        let p = base(Potential::Zero, well(1.0), 1.0, 0.0, 0.0, 64, 16);
        let phi = ScalarField::from_fn(&p.grid, |x| p.cost.phi.eval(x, 1.0, 1));
        let want = integrate(&phi.mul(&p.rho0));
        assert!((reduced_cost(&p.zero_control(), &p).unwrap() - want).abs() < 1e-14);

        let p = base(Potential::Zero, Potential::Zero, 0.7, 0.3, 0.0, 64, 16);
        let u = ControlPath::constant(&p.time, &[0.5], &[-0.25]);
        let c2 = 0.25 + 0.0625;
        let want = 0.7 * c2 / 2.0 + 0.3 * 0.75;
        assert!((reduced_cost(&u, &p).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn zero_adjoint_gives_gamma_u() {
        let p = base(Potential::Zero, Potential::Zero, 0.9, 0.0, 0.0, 64, 16);
        let u = ControlPath::from_fn(&p.time, 1, |t| (vec![t], vec![-0.5 * t]));
        let g = reduced_gradient(&u, &p).unwrap();
        assert_eq!(g.l2, u.scaled(0.9));
        assert_eq!(g.metric, Metric::L2);
    }

    #[test]
    fn even_data_has_no_translation_gradient() {
        let p = base(well(0.0), well(0.0), 1.0, 0.0, 0.0, 128, 32);
        let u = ControlPath::constant(&p.time, &[0.0], &[0.3]);
        let g = reduced_gradient(&u, &p).unwrap();
        for n in 0..=32 {
            assert!(g.integral.node(n)[0].abs() < 1e-12);
            assert!(g.integral.node(n)[1].abs() > 1e-4);
        }
    }

    #[test]
    fn assemblies_agree() {
        let mut gaps = Vec::new();
        for n in [128, 256] {
            let p = base(well(1.0), well(1.5), 0.1, 0.0, 0.0, n, n / 2);
            let u = ControlPath::from_fn(&p.time, 1, |t| (vec![0.5 * t], vec![0.1]));
            let g = reduced_gradient(&u, &p).unwrap();
            gaps.push(g.discrepancy);
        }
        // central differences sum by parts exactly away from the boundary
        assert!(gaps.iter().all(|g| *g < 1e-12), "{gaps:?}");
    }

    #[test]
    fn tridiagonal_solves_known_system() {
        let x = solve_tridiagonal::<f64>(&[0.0, 1.0, 1.0], &[4.0, 4.0, 4.0], &[1.0, 1.0, 0.0], &[5.0, 6.0, 5.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn riesz_examples() {
        let t = TimeGrid::<f64>::new(1.0, 64).unwrap();
        let z = h1_riesz(&ControlPath::zeros(&t, 1), 1.0, 0.5).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
        assert!(matches!(h1_riesz(&ControlPath::zeros(&t, 1), 1.0, 0.0), Err(Error::NotApplicable(_))));

        let mut errs = Vec::new();
        for nt in [64, 128] {
            let t = TimeGrid::<f64>::new(2.0, nt).unwrap();
            let pi = std::f64::consts::PI;
            let (gamma, nu) = (0.3, 0.7);
            let k = nu * pi * pi / 4.0 + gamma;
            let rhs = ControlPath::from_fn(&t, 1, |s| (vec![k * (pi * s / 2.0).sin()], vec![0.0]));
            let mu = h1_riesz(&rhs, gamma, nu).unwrap();
            let e = (0..=nt).fold(0.0f64, |m, n| m.max((mu.node(n)[0] - (pi * t.t(n) / 2.0).sin()).abs()));
            errs.push(e);
        }
        assert!((errs[0] / errs[1] - 4.0).abs() < 0.2);

        let t = TimeGrid::<f64>::new(1.0, 64).unwrap();
        let rhs = ControlPath::from_fn(&t, 1, |s| (vec![1.0 + s], vec![0.0]));
        let mu = h1_riesz(&rhs, 2.0, 1e-8).unwrap();
        for n in 8..56 {
            assert!((mu.node(n)[0] - rhs.node(n)[0] / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn riesz_of_full_gradient_is_the_h1_gradient() {
        let p = base(well(1.0), well(1.0), 0.5, 0.0, 0.2, 64, 32);
        let u = ControlPath::from_fn(&p.time, 1, |t| (vec![(3.0 * t).sin() * t * (1.0 - t)], vec![t * (1.0 - t)]));
        let g = reduced_gradient(&u, &p).unwrap();
        let via_full = h1_riesz(&g.l2, 0.5, 0.2).unwrap();
        for n in 1..32 {
            for j in 0..2 {
                assert!((via_full.node(n)[j] - g.active.node(n)[j]).abs() < 1e-10);
            }
        }
        assert_eq!(g.metric, Metric::H1Tilde);
    }

    #[test]
    fn riesz_is_positive_definite() {
        let t = TimeGrid::<f64>::new(1.0, 32).unwrap();
        let f = ControlPath::from_fn(&t, 1, |s| (vec![(7.0 * s).cos()], vec![s - 0.3]));
        let mu = h1_riesz(&f, 0.4, 0.1).unwrap();
        assert!(mu.dot(&f) > 0.0);
    }

    #[test]
    fn kkt_examples() {
        let t = TimeGrid::<f64>::new(1.0, 8).unwrap();
        let b = BoxBounds::uniform(1, -1.0, 1.0).unwrap();
        let u = ControlPath::constant(&t, &[0.3], &[-0.2]);
        let zero_g = ControlPath::zeros(&t, 1);
        let r = kkt_residual(&u, &zero_g, 0.0, &b, None, false);
        assert_eq!(r.max(), 0.0);

        let small = ControlPath::from_fn(&t, 1, |s| (vec![0.05 * s], vec![-0.08]));
        let r = kkt_residual(&ControlPath::zeros(&t, 1), &small, 0.1, &b, None, false);
        assert_eq!(r.max(), 0.0);

        let at_top = ControlPath::constant(&t, &[1.0], &[1.0]);
        let push = ControlPath::constant(&t, &[-0.5], &[-2.0]);
        let m = reconstruct_multipliers(&at_top, &push, 0.0, &b);
        assert!(m.lambda_plus.data().iter().all(|v| *v > 0.0));
        let r = kkt_residual(&at_top, &push, 0.0, &b, None, false);
        assert_eq!((r.vi_residual, r.complement_upper, r.stationarity), (0.0, 0.0, 0.0));
    }

    #[test]
    fn frechet_remainder_is_quadratic() {
        let mut p = base(well(1.0), well(1.0), 1.0, 0.0, 0.0, 128, 64);
        p.forward.scheme = Scheme::Muscl;
        let u = ControlPath::from_fn(&p.time, 1, |t| (vec![0.3 * t], vec![0.1]));
        let du = ControlPath::from_fn(&p.time, 1, |t| (vec![1.0 - t], vec![0.5 * t]));
        let r = frechet_probe(&u, &du, &[0.2, 0.1, 0.05, 0.025, 0.0125], &p).unwrap();
        assert!(r.slope > 1.8 && r.slope < 2.2, "{:?}", r);
        assert!(r.interior);
        let z = frechet_probe(&u, &ControlPath::zeros(&p.time, 1), &[0.2, 0.1, 0.05, 0.025], &p).unwrap();
        assert!(z.remainders.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn smallness_examples() {
        let p = base(well(1.0), well(1.0), 1e6, 0.0, 0.0, 64, 16);
        let c = smallness_certificate(&p, 1.0).unwrap();
        assert!(c.pass && c.ratio < 1e-2, "{c:?}");
        let mut inp = smallness_inputs(&p).unwrap();
        inp.t_final = 0.0;
        let d = smallness_from_inputs(&inp, 1.0);
        assert!(d.degenerate && d.ratio == 0.0 && d.pass);
        let tracking = Potential::Tracking { weight: 1.0, path: TrackPath::new(vec![(0.0, [0.0, 0.0])]).unwrap() };
        let q = base(tracking, Potential::Zero, 1.0, 0.0, 0.0, 64, 16);
        assert!(smallness_certificate(&q, 1.0).unwrap().k_tilde.is_finite());
    }

    #[test]
    fn loglog_fit() {
        let x = [1.0, 0.5, 0.25, 0.125];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        assert!((loglog_slope(&x, &y) - 2.0).abs() < 1e-12);
    }
}
