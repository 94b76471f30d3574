//! Independent reference solutions: exact densities under affine flows,
//! moment ODEs, finite differences of the reduced cost and Lipschitz probes.

use crate::drift::{control_cost_terms, BoxBounds, ControlPath, CostSpec, DriftSpec, Potential, A0};
use crate::error::{Error, Result};
use crate::forward::{solve_forward, ForwardOptions, Scheme, Source};
use crate::grid::{make_grid, sample_function, DensityPreset, GridSpec, Point, TimeGrid};
use crate::optimizer::Objective;
use crate::real::Real;
use crate::reduced::{cumulative_abs, finish_gradient, loglog_slope, GradientPath, Problem};

const GAUSS5_X: [f64; 5] = [-0.906_179_845_938_664, -0.538_469_310_105_683_1, 0.0, 0.538_469_310_105_683_1, 0.906_179_845_938_664];
const GAUSS5_W: [f64; 5] = [0.236_926_885_056_189_1, 0.478_628_670_499_366_5, 0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1];

/// Per-axis affine map `psi(x)_r = scale_r x_r + shift_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFlow<T> {
    pub dim: usize,
    pub scale: [T; 2],
    pub shift: [T; 2],
}

impl<T: Real> AffineFlow<T> {
    pub fn identity(dim: usize) -> Self {
        Self { dim, scale: [T::one(); 2], shift: [T::zero(); 2] }
    }

    pub fn jacdet(&self) -> T {
        self.scale[..self.dim].iter().fold(T::one(), |p, s| p * *s)
    }

    pub fn apply(&self, x: &Point<T>) -> Point<T> {
        let mut y = *x;
        for r in 0..self.dim {
            y[r] = self.scale[r] * x[r] + self.shift[r];
        }
        y
    }

    pub fn invert(&self, y: &Point<T>) -> Point<T> {
        let mut x = *y;
        for r in 0..self.dim {
            x[r] = (y[r] - self.shift[r]) / self.scale[r];
        }
        x
    }

    /// `to o from^-1`, the flow from the time of `from` to the time of `to`.
    pub fn between(from: &Self, to: &Self) -> Self {
        let mut f = Self::identity(from.dim);
        for r in 0..from.dim {
            let s = to.scale[r] / from.scale[r];
            f.scale[r] = s;
            f.shift[r] = to.shift[r] - s * from.shift[r];
        }
        f
    }
}

/// Diagonal part and offset of an affine `a0`.
fn affine_parts<T: Real>(a0: &A0<T>) -> Result<([T; 2], [T; 2])> {
    match a0 {
        A0::Zero => Ok(([T::zero(); 2], [T::zero(); 2])),
        A0::Constant { b } => Ok(([T::zero(); 2], *b)),
        A0::Affine { a, b } if a[0][1] == T::zero() && a[1][0] == T::zero() => Ok(([a[0][0], a[1][1]], *b)),
        other => Err(Error::UnsupportedDrift(format!("{other:?} has no closed-form flow"))),
    }
}

/// Flow map `psi_t` of `x' = a(t, x)` started at time 0.
///
/// Along axis `r`, `x' = alpha(t) x + beta(t)` with `alpha = A_rr + u2_r` and
/// `beta = b_r + u1_r`, so `psi_t(x) = Phi (x + int_0^t exp(-U) beta)` with
/// `U = int_0^t alpha` and `Phi = exp(U)`. `U` is exact for piecewise-linear
/// controls; the second integral uses five-point Gauss per segment.
pub fn affine_flow<T: Real>(drift: &DriftSpec<T>, t: T) -> Result<AffineFlow<T>> {
    let (diag, off) = affine_parts(&drift.a0)?;
    let control = &drift.control;
    let time = control.time();
    let dim = control.dim();
    if t < T::zero() || t > time.t_final() * (T::one() + T::lit(1e-12)) {
        return Err(Error::InvalidArgument("flow time outside [0, T]".into()));
    }
    let mut flow = AffineFlow::identity(dim);
    for r in 0..dim {
        let alpha = |s: T| diag[r] + control.value_at(s).1[r];
        let beta = |s: T| off[r] + control.value_at(s).0[r];
        let mut u_acc = T::zero();
        let mut b_acc = T::zero();
        let mut n = 0;
        while n < time.nt() && time.t(n) < t {
            let t0 = time.t(n);
            let t1 = time.t(n + 1).min(t);
            let h = t1 - t0;
            let a0v = alpha(t0);
            let slope = (alpha(t1) - a0v) / h;
            for (xg, wg) in GAUSS5_X.iter().zip(GAUSS5_W) {
                let tau = T::half() * h * (T::one() + T::lit(*xg));
                let s = t0 + tau;
                let u_s = u_acc + a0v * tau + T::half() * slope * tau * tau;
                b_acc += T::half() * h * T::lit(wg) * (-u_s).exp() * beta(s);
            }
            u_acc += T::half() * h * (a0v + alpha(t1));
            n += 1;
        }
        let phi = u_acc.exp();
        flow.scale[r] = phi;
        flow.shift[r] = phi * b_acc;
    }
    Ok(flow)
}

/// `rho(t, x) = rho0(psi_t^-1(x)) / det D psi_t` for a source-free affine flow.
pub fn affine_exact_density<T: Real>(
    rho0: &DensityPreset<T>,
    drift: &DriftSpec<T>,
    t: T,
    points: &[Point<T>],
) -> Result<Vec<T>> {
    let flow = affine_flow(drift, t)?;
    let det = flow.jacdet();
    Ok(points.iter().map(|x| rho0.eval(&flow.invert(x), flow.dim) / det).collect())
}

/// Mean and per-axis variance at every time node.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPath<T> {
    pub dim: usize,
    pub mean: Vec<[T; 2]>,
    pub variance: Vec<[T; 2]>,
}

/// RK4 for `m' = u1 + m u2`, `v' = 2 v u2` (zero `a0`).
pub fn moment_ode<T: Real>(control: &ControlPath<T>, x0: [T; 2], v0: [T; 2], time: &TimeGrid<T>) -> Result<MomentPath<T>> {
    moment_ode_affine(&A0::Zero, control, x0, v0, time)
}

/// RK4 for `m' = b + u1 + (A + u2) m`, `v' = 2 (A + u2) v` with diagonal `A`.
pub fn moment_ode_affine<T: Real>(
    a0: &A0<T>,
    control: &ControlPath<T>,
    x0: [T; 2],
    v0: [T; 2],
    time: &TimeGrid<T>,
) -> Result<MomentPath<T>> {
    let (diag, off) = affine_parts(a0)?;
    let dim = control.dim();
    if v0[..dim].iter().any(|v| !(*v > T::zero())) {
        return Err(Error::InvalidArgument("initial variance must be positive".into()));
    }
    let rhs = |t: T, m: T, v: T, r: usize| {
        let (u1, u2) = control.value_at(t);
        let alpha = diag[r] + u2[r];
        (off[r] + u1[r] + alpha * m, T::two() * alpha * v)
    };
    let dt = time.dt();
    let mut mean = vec![x0];
    let mut variance = vec![v0];
    let (mut m, mut v) = (x0, v0);
    for n in 0..time.nt() {
        let t = time.t(n);
        for r in 0..dim {
            let k1 = rhs(t, m[r], v[r], r);
            let k2 = rhs(t + T::half() * dt, m[r] + T::half() * dt * k1.0, v[r] + T::half() * dt * k1.1, r);
            let k3 = rhs(t + T::half() * dt, m[r] + T::half() * dt * k2.0, v[r] + T::half() * dt * k2.1, r);
            let k4 = rhs(t + dt, m[r] + dt * k3.0, v[r] + dt * k3.1, r);
            let sixth = dt / T::lit(6.0);
            m[r] += sixth * (k1.0 + T::two() * k2.0 + T::two() * k3.0 + k4.0);
            v[r] += sixth * (k1.1 + T::two() * k2.1 + T::two() * k3.1 + k4.1);
        }
        mean.push(m);
        variance.push(v);
    }
    Ok(MomentPath { dim, mean, variance })
}

/// Closed-form moments at time `t` for constant controls and zero `a0`.
pub fn moments_closed_form<T: Real>(u1: T, u2: T, x0: T, v0: T, t: T) -> (T, T) {
    let e = (u2 * t).exp();
    let m = if u2 == T::zero() { x0 + u1 * t } else { x0 * e + u1 * (e - T::one()) / u2 };
    (m, v0 * e * e)
}

/// `(J(u + eps d) - J(u - eps d)) / (2 eps)` with the step schedule of the
/// base run shared by both evaluations.
pub fn fd_directional_derivative<T: Real>(
    problem: &Problem<T>,
    control: &ControlPath<T>,
    direction: &ControlPath<T>,
    eps: T,
) -> Result<T> {
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument("eps must be > 0".into()));
    }
    let base = problem.state(control, &problem.forward)?;
    let frozen = problem.forward.frozen(base.schedule());
    let plus = problem.evaluate_with(&control.axpy(eps, direction), &frozen)?;
    let minus = problem.evaluate_with(&control.axpy(-eps, direction), &frozen)?;
    Ok((plus.cost.total - minus.cost.total) / (T::two() * eps))
}

/// `max_n ||G(u)(t_n) - G(v)(t_n)||_{L^2} / int_0^{t_n} |u - v|`.
pub fn lipschitz_probe<T: Real>(problem: &Problem<T>, u: &ControlPath<T>, v: &ControlPath<T>) -> Result<T> {
    let cum = cumulative_abs(&u.sub(v));
    if !(cum[cum.len() - 1] > T::zero()) {
        return Err(Error::DegenerateProbe("controls coincide".into()));
    }
    let opts = ForwardOptions { stride: 1, ..problem.forward.clone() };
    let gu = problem.state(u, &opts)?;
    let gv = problem.state(v, &opts.frozen(gu.schedule()))?;
    let vol = problem.grid.cell_volume();
    let mut ratio = T::zero();
    gv.for_each_state(|n, rho| {
        if cum[n] > T::zero() {
            let base = gu.state(n)?;
            let s: T = rho.iter().zip(&base.values).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
            ratio = ratio.max((s * vol).sqrt() / cum[n]);
        }
        Ok(())
    })?;
    Ok(ratio)
}

/// `E[p(X, t)]` for `X ~ N(mean, diag(var))`.
fn expected_potential<T: Real>(p: &Potential<T>, mean: &[T; 2], var: &[T; 2], t: T, dim: usize) -> T {
    let quad = |c: &[T; 2]| (0..dim).map(|r| (mean[r] - c[r]) * (mean[r] - c[r]) + var[r]).sum::<T>();
    match p {
        Potential::Zero => T::zero(),
        Potential::Quadratic { center, weight } => *weight * quad(center),
        Potential::Tracking { weight, path } => *weight * quad(&path.at(t)),
        Potential::GaussianWell { center, weight } => {
            let mut prod = T::one();
            for r in 0..dim {
                let s = T::one() + T::two() * var[r];
                let d = mean[r] - center[r];
                prod *= (-d * d / s).exp() / s.sqrt();
            }
            *weight * (T::one() - prod)
        }
    }
}

/// Reduced cost restricted to the moment dynamics: the state is `(m, v)` and
/// potentials are averaged over the Gaussian with those moments. For quadratic
/// and tracking potentials this average only depends on `(m, v)`, so it is the
/// exact whole-space cost of any density with those moments.
#[derive(Debug, Clone)]
pub struct MomentProblem<T> {
    pub time: TimeGrid<T>,
    pub dim: usize,
    pub a0: A0<T>,
    pub x0: [T; 2],
    pub v0: [T; 2],
    pub cost: CostSpec<T>,
    pub bounds: BoxBounds<T>,
    /// Central-difference step for the gradient.
    pub fd_eps: T,
}

impl<T: Real> MomentProblem<T> {
    pub fn new(time: TimeGrid<T>, dim: usize, a0: A0<T>, x0: [T; 2], v0: [T; 2], cost: CostSpec<T>, bounds: BoxBounds<T>) -> Result<Self> {
        affine_parts(&a0)?;
        Ok(Self { time, dim, a0, x0, v0, cost, bounds, fd_eps: T::lit(1e-6) })
    }

    /// Moment version of a grid problem; `x0`, `v0` are the moments of `rho0`.
    pub fn from_problem(problem: &Problem<T>) -> Result<Self> {
        let m = crate::grid::moments(&problem.rho0)?;
        Self::new(problem.time, problem.dim(), problem.a0.clone(), m.mean, m.variance, problem.cost.clone(), problem.bounds.clone())
    }

    /// `int theta + phi(T)` with the same trapezoid weights as the grid cost.
    pub fn state_cost(&self, control: &ControlPath<T>) -> Result<T> {
        let path = moment_ode_affine(&self.a0, control, self.x0, self.v0, &self.time)?;
        let mut running = T::zero();
        for n in 0..self.time.node_count() {
            let t = self.time.t(n);
            running += self.time.weight(n) * expected_potential(&self.cost.theta, &path.mean[n], &path.variance[n], t, self.dim);
        }
        let nt = self.time.nt();
        let terminal = expected_potential(&self.cost.phi, &path.mean[nt], &path.variance[nt], self.time.t_final(), self.dim);
        Ok(running + terminal)
    }

    pub fn objective_value(&self, control: &ControlPath<T>) -> Result<T> {
        let c = control_cost_terms(control, self.cost.l1_norm);
        let half = T::half();
        Ok(self.state_cost(control)? + half * self.cost.gamma * c.l2sq + half * self.cost.nu * c.h1sq + self.cost.delta * c.l1_lumped)
    }

    pub fn moments(&self, control: &ControlPath<T>) -> Result<MomentPath<T>> {
        moment_ode_affine(&self.a0, control, self.x0, self.v0, &self.time)
    }
}

impl<T: Real> Objective<T> for MomentProblem<T> {
    type Eval = ();

    fn time(&self) -> &TimeGrid<T> {
        &self.time
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn cost_spec(&self) -> &CostSpec<T> {
        &self.cost
    }

    fn bounds(&self) -> &BoxBounds<T> {
        &self.bounds
    }

    fn evaluate(&self, u: &ControlPath<T>) -> Result<(T, ())> {
        Ok((self.objective_value(u)?, ()))
    }

    /// Central differences of the state cost per nodal value, divided by the
    /// trapezoid weight to give the `L^2` representer.
    fn gradient(&self, u: &ControlPath<T>, _eval: &()) -> Result<GradientPath<T>> {
        let mut integral = ControlPath::zeros(&self.time, self.dim);
        let c = u.components();
        let mut work = u.clone();
        for i in 0..u.data().len() {
            let n = i / c;
            let base = u.data()[i];
            let h = self.fd_eps * (T::one() + base.abs());
            work.data_mut()[i] = base + h;
            let fp = self.state_cost(&work)?;
            work.data_mut()[i] = base - h;
            let fm = self.state_cost(&work)?;
            work.data_mut()[i] = base;
            integral.data_mut()[i] = (fp - fm) / (T::two() * h) / self.time.weight(n);
        }
        Ok(finish_gradient(u, integral.clone(), integral, &self.cost))
    }
}

/// Errors and fitted orders of a refinement study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport<T> {
    pub scheme: Scheme,
    pub n: Vec<usize>,
    pub l1_error: Vec<T>,
    /// Observed order between consecutive resolutions.
    pub pairwise_order: Vec<T>,
    /// Least-squares slope of `-log error` against `log n`.
    pub order: T,
}

/// Dilation scenario in 1-d: `rho0 = N(0, v0)` on `[-8, 8]`, `u2 = c`,
/// `u1 = 0`, zero source, `T = 1`.
pub fn dilation_study<T: Real>(scheme: Scheme, ns: &[usize], c: T, v0: T, nt: usize) -> Result<ConvergenceReport<T>> {
    let time = TimeGrid::new(T::one(), nt)?;
    let control = ControlPath::constant(&time, &[T::zero()], &[c]);
    let drift = DriftSpec::new(A0::Zero, control);
    let preset = DensityPreset::Gaussian { center: [T::zero(); 2], variance: v0 };
    let mut l1_error = Vec::with_capacity(ns.len());
    for &n in ns {
        let grid = make_grid(1, &[T::lit(-8.0)], &[T::lit(8.0)], &[n])?;
        l1_error.push(l1_error_against_oracle(&grid, &preset, &drift, &time, scheme)?);
    }
    let pairwise_order = l1_error.windows(2).zip(ns.windows(2)).map(|(e, n)| {
        (e[0] / e[1]).ln() / (T::from_usize_lossy(n[1]) / T::from_usize_lossy(n[0])).ln()
    }).collect();
    let logn: Vec<T> = ns.iter().map(|n| T::from_usize_lossy(*n)).collect();
    let order = -loglog_slope(&logn, &l1_error);
    Ok(ConvergenceReport { scheme, n: ns.to_vec(), l1_error, pairwise_order, order })
}

/// `sum |rho_h(T) - rho(T, x_i)| h` for a source-free affine scenario.
pub fn l1_error_against_oracle<T: Real>(
    grid: &GridSpec<T>,
    preset: &DensityPreset<T>,
    drift: &DriftSpec<T>,
    time: &TimeGrid<T>,
    scheme: Scheme,
) -> Result<T> {
    let rho0 = sample_function(grid, preset);
    let opts = ForwardOptions::with_scheme(scheme);
    let traj = solve_forward(&rho0, drift, &Source::Zero, time, &opts)?;
    let exact = affine_exact_density(preset, drift, time.t_final(), &grid.points())?;
    let rho = traj.terminal();
    Ok(rho.values.iter().zip(&exact).map(|(a, b)| (*a - *b).abs()).sum::<T>() * grid.cell_volume())
}
