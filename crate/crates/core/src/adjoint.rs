//! Backward semi-Lagrangian solver for the adjoint transport problem
//! `-d_t q - a . grad q = -theta`, `q(T) = -phi`.
//!
//! Along `x' = a(t, x)` the adjoint satisfies `dq/ds = theta`, so one step reads
//! `q(t_n, x) = q(t_{n+1}, X) - dt * theta(t_mid, X_mid)` with `X` the RK4
//! foot of the characteristic through `x`. Feet whose cubic stencil would leave
//! the grid are followed analytically all the way to `T`, so potentials that
//! grow like `|x|^2` are never extrapolated from grid data.

use crate::drift::{CostSpec, DriftSpec, Potential};
use crate::error::{Error, Result};
use crate::forward::{drift_rate, EnergyCertificate, StateTrajectory};
use crate::grid::{interpolate_point, weighted_sobolev_norm, GridSpec, Point, ScalarField, TimeGrid};
use crate::real::Real;

/// Exact value of a potential preset at `(x, t)`.
pub fn potential_eval<T: Real>(preset: &Potential<T>, x: &Point<T>, t: T, dim: usize) -> T {
    preset.eval(x, t, dim)
}

/// Weight exponent `k0 = 3 + floor(d / 2)` of the negative-index norm used for
/// confining potentials.
pub fn confining_k0(dim: usize) -> i32 {
    3 + (dim / 2) as i32
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointOptions {
    /// Clip interpolated values to the range of their stencil.
    pub limit: bool,
    pub stride: usize,
    pub memory_budget: usize,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self { limit: false, stride: 1, memory_budget: 64 << 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointDiagnostics<T> {
    pub t: T,
    pub l2: T,
    /// `|| q ||_{H^0_{-k0}}`, recorded for confining potentials.
    pub h0_negk: Option<T>,
    /// Cells whose foot was traced analytically to `T`.
    pub traced: usize,
}

#[derive(Debug, Clone)]
pub struct AdjointTrajectory<T> {
    grid: GridSpec<T>,
    time: TimeGrid<T>,
    stride: usize,
    snapshots: Vec<Option<Vec<T>>>,
    diagnostics: Vec<AdjointDiagnostics<T>>,
    theta: Potential<T>,
    phi: Potential<T>,
    drift: DriftSpec<T>,
    limit: bool,
}

impl<T: Real> AdjointTrajectory<T> {
    pub fn grid(&self) -> &GridSpec<T> {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid<T> {
        &self.time
    }

    pub fn diagnostics(&self) -> &[AdjointDiagnostics<T>] {
        &self.diagnostics
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn drift(&self) -> &DriftSpec<T> {
        &self.drift
    }

    pub fn theta(&self) -> &Potential<T> {
        &self.theta
    }

    fn tracer(&self) -> Tracer<'_, T> {
        Tracer {
            grid: &self.grid,
            time: &self.time,
            drift: &self.drift,
            theta: &self.theta,
            phi: &self.phi,
            limit: self.limit,
        }
    }

    /// Adjoint at node `n`, recomputed backwards from the next checkpoint if
    /// it was not stored.
    pub fn state(&self, n: usize) -> Result<ScalarField<T>> {
        let mut k = n;
        while self.snapshots[k].is_none() {
            k += 1;
        }
        let mut q = self.snapshots[k].clone().unwrap_or_default();
        let tracer = self.tracer();
        for step in (n..k).rev() {
            q = tracer.step(&q, step)?.0;
        }
        ScalarField::from_values(&self.grid, q)
    }

    /// Visits every node in increasing time order, rebuilding each segment
    /// between checkpoints backwards before handing it out.
    pub fn for_each_state(&self, mut f: impl FnMut(usize, &[T]) -> Result<()>) -> Result<()> {
        let tracer = self.tracer();
        let last = self.snapshots.len() - 1;
        let mut n = 0;
        while n <= last {
            if let Some(q) = &self.snapshots[n] {
                f(n, q)?;
                n += 1;
                continue;
            }
            let mut k = n;
            while self.snapshots[k].is_none() {
                k += 1;
            }
            let mut segment: Vec<Vec<T>> = Vec::with_capacity(k - n);
            let mut q = self.snapshots[k].clone().unwrap_or_default();
            for step in (n..k).rev() {
                q = tracer.step(&q, step)?.0;
                segment.push(q.clone());
            }
            for (j, q) in segment.iter().rev().enumerate() {
                f(n + j, q)?;
            }
            n = k;
        }
        Ok(())
    }
}

struct Tracer<'a, T> {
    grid: &'a GridSpec<T>,
    time: &'a TimeGrid<T>,
    drift: &'a DriftSpec<T>,
    theta: &'a Potential<T>,
    phi: &'a Potential<T>,
    limit: bool,
}

impl<T: Real> Tracer<'_, T> {
    fn rk4(&self, x: Point<T>, t: T, h: T) -> Point<T> {
        let d = self.drift;
        let half = T::half();
        let add = |x: &Point<T>, k: &[T; 2], s: T| [x[0] + s * k[0], x[1] + s * k[1]];
        let k1 = d.at(t, &x);
        let k2 = d.at(t + half * h, &add(&x, &k1, half * h));
        let k3 = d.at(t + half * h, &add(&x, &k2, half * h));
        let k4 = d.at(t + h, &add(&x, &k3, h));
        let six = T::lit(6.0);
        let mut out = x;
        for r in 0..2 {
            out[r] += h / six * (k1[r] + T::two() * (k2[r] + k3[r]) + k4[r]);
        }
        out
    }

    /// Midpoint and endpoint of the characteristic through `x` over step `n`.
    fn foot(&self, x: Point<T>, n: usize) -> Result<(Point<T>, Point<T>)> {
        let half = self.time.dt() * T::half();
        let t = self.time.t(n);
        let mid = self.rk4(x, t, half);
        let end = self.rk4(mid, t + half, half);
        let bound = T::lit(1e150);
        if !(end[0].abs() < bound && end[1].abs() < bound && mid[0].abs() < bound && mid[1].abs() < bound) {
            return Err(Error::CharacteristicEscape { x: x[0].to_f64_lossy(), y: x[1].to_f64_lossy() });
        }
        Ok((mid, end))
    }

    /// `q(t_n, x)` from the characteristic followed up to `T`.
    fn trace_to_end(&self, mut x: Point<T>, n: usize) -> Result<T> {
        let dim = self.grid.dim();
        let dt = self.time.dt();
        let mut acc = T::zero();
        for k in n..self.time.nt() {
            let (mid, end) = self.foot(x, k)?;
            acc += dt * self.theta.eval(&mid, self.time.t(k) + dt * T::half(), dim);
            x = end;
        }
        Ok(-self.phi.eval(&x, self.time.t_final(), dim) - acc)
    }

    /// One backward step `q(t_{n+1}) -> q(t_n)`; returns the new values and the
    /// number of analytically traced cells.
    fn step(&self, next: &[T], n: usize) -> Result<(Vec<T>, usize)> {
        let dim = self.grid.dim();
        let dt = self.time.dt();
        let t_mid = self.time.t(n) + dt * T::half();
        let field = ScalarField { grid: *self.grid, values: next.to_vec() };
        let mut out = Vec::with_capacity(next.len());
        let mut traced = 0;
        for idx in 0..self.grid.cell_count() {
            let x = self.grid.point(idx);
            let (mid, end) = self.foot(x, n)?;
            let s = interpolate_point(&field, &end, self.limit);
            let carried = if s.cubic && !s.clamped {
                s.value
            } else {
                traced += 1;
                self.trace_to_end(end, n + 1)?
            };
            let q = carried - dt * self.theta.eval(&mid, t_mid, dim);
            if !q.is_finite() {
                return Err(Error::NonFinite(format!("adjoint at step {n}")));
            }
            out.push(q);
        }
        Ok((out, traced))
    }
}

fn diagnose<T: Real>(grid: &GridSpec<T>, q: &[T], t: T, confining: bool, traced: usize) -> Result<AdjointDiagnostics<T>> {
    let f = ScalarField { grid: *grid, values: q.to_vec() };
    let h0_negk = if confining {
        Some(weighted_sobolev_norm(&f, 0, -confining_k0(grid.dim()))?)
    } else {
        None
    };
    Ok(AdjointDiagnostics { t, l2: f.l2_norm(), h0_negk, traced })
}

/// Integrates the adjoint backwards from `q(T) = -phi`.
pub fn solve_adjoint<T: Real>(
    cost: &CostSpec<T>,
    drift: &DriftSpec<T>,
    time: &TimeGrid<T>,
    grid: &GridSpec<T>,
    opts: &AdjointOptions,
) -> Result<AdjointTrajectory<T>> {
    if drift.control.time() != time || drift.dim() != grid.dim() {
        return Err(Error::GridMismatch("drift does not match the adjoint grids".into()));
    }
    let nt = time.nt();
    let cells = grid.cell_count();
    let mut stride = opts.stride.max(1);
    if (nt + 1).saturating_mul(cells) > opts.memory_budget {
        let keep = (opts.memory_budget / cells.max(1)).max(2);
        stride = stride.max((nt + 1).div_ceil(keep - 1));
    }
    let confining = cost.theta.is_confining() || cost.phi.is_confining();
    let tracer = Tracer {
        grid,
        time,
        drift,
        theta: &cost.theta,
        phi: &cost.phi,
        limit: opts.limit,
    };
    let dim = grid.dim();
    let mut q: Vec<T> = (0..cells).map(|i| -cost.phi.eval(&grid.point(i), time.t_final(), dim)).collect();
    let mut snapshots: Vec<Option<Vec<T>>> = vec![None; nt + 1];
    let mut diagnostics = vec![diagnose(grid, &q, time.t_final(), confining, 0)?; nt + 1];
    snapshots[nt] = Some(q.clone());
    for n in (0..nt).rev() {
        let (next, traced) = tracer.step(&q, n)?;
        q = next;
        diagnostics[n] = diagnose(grid, &q, time.t(n), confining, traced)?;
        if n % stride == 0 {
            snapshots[n] = Some(q.clone());
        }
    }
    Ok(AdjointTrajectory {
        grid: *grid,
        time: *time,
        stride,
        snapshots,
        diagnostics,
        theta: cost.theta.clone(),
        phi: cost.phi.clone(),
        drift: drift.clone(),
        limit: opts.limit,
    })
}

/// Backward Gronwall check `N_n <= (1 + C dt L_n) N_{n+1} + dt ||theta||` of
/// the `H^0_{-k0}` norm of the adjoint.
pub fn adjoint_certificate<T: Real>(adjoint: &AdjointTrajectory<T>, c_cert: T) -> Result<EnergyCertificate<T>> {
    let grid = *adjoint.grid();
    let time = *adjoint.time();
    let k = -confining_k0(grid.dim());
    let mut norms = Vec::with_capacity(time.node_count());
    adjoint.for_each_state(|_, q| {
        norms.push(weighted_sobolev_norm(&ScalarField { grid, values: q.to_vec() }, 0, k)?);
        Ok(())
    })?;
    let dt = time.dt();
    let dim = grid.dim();
    let slack = T::lit(64.0) * T::epsilon();
    let (mut lhs, mut rhs, mut rate) = (Vec::new(), Vec::new(), Vec::new());
    let mut fitted = T::zero();
    for n in (0..time.nt()).rev() {
        let l = drift_rate(adjoint.drift(), &grid, time.t(n), 0, k).max(drift_rate(
            adjoint.drift(),
            &grid,
            time.t(n + 1),
            0,
            k,
        ));
        let th = ScalarField::from_fn(&grid, |x| adjoint.theta().eval(x, time.t(n) + dt * T::half(), dim));
        let g = weighted_sobolev_norm(&th, 0, k)?;
        let excess = norms[n] - norms[n + 1] - dt * g - slack * norms[n + 1];
        if excess > T::zero() {
            let need = if l > T::zero() && norms[n + 1] > T::zero() {
                excess / (dt * l * norms[n + 1])
            } else {
                T::infinity()
            };
            fitted = fitted.max(need);
        }
        lhs.push(norms[n]);
        rhs.push((T::one() + c_cert * dt * l) * norms[n + 1] + dt * g + slack * norms[n + 1]);
        rate.push(l);
    }
    let pass = lhs.iter().zip(&rhs).all(|(a, b)| a <= b);
    Ok(EnergyCertificate { m: 0, k, norms, lhs, rhs, rate, fitted_c: fitted, c_cert, pass })
}

/// Per-step defect of the duality identity `d/dt int rho q = int theta rho`
/// (zero source), with both sides integrated by the trapezoid rule.
pub fn duality_defect<T: Real>(state: &StateTrajectory<T>, adjoint: &AdjointTrajectory<T>) -> Result<Vec<T>> {
    let grid = *state.grid();
    if !grid.same_as(adjoint.grid()) || state.time() != adjoint.time() {
        return Err(Error::GridMismatch("state and adjoint runs differ".into()));
    }
    let time = *state.time();
    let vol = grid.cell_volume();
    let dim = grid.dim();
    let mut pairing = Vec::with_capacity(time.node_count());
    let mut work = Vec::with_capacity(time.node_count());
    let mut qs: Vec<Vec<T>> = Vec::with_capacity(time.node_count());
    adjoint.for_each_state(|_, q| {
        qs.push(q.to_vec());
        Ok(())
    })?;
    state.for_each_state(|n, rho| {
        let t = time.t(n);
        let mut p = T::zero();
        let mut w = T::zero();
        for (i, r) in rho.iter().enumerate() {
            p += *r * qs[n][i];
            w += *r * adjoint.theta().eval(&grid.point(i), t, dim);
        }
        pairing.push(p * vol);
        work.push(w * vol);
        Ok(())
    })?;
    let dt = time.dt();
    Ok((0..time.nt())
        .map(|n| pairing[n + 1] - pairing[n] - dt * T::half() * (work[n] + work[n + 1]))
        .collect())
}
