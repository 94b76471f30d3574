//! Control paths, the controlled drift `a0(t,x) + u1(t) + x * u2(t)`, the
//! admissible box and the control-cost quadrature.

use std::io::{self, BufRead, Write};

use crate::error::{Error, Result};
use crate::grid::{fmt17, Point, TimeGrid};
use crate::real::Real;

/// Nodal values of `u = (u1, u2)` on a time grid, continuous piecewise-linear
/// in between.
///
/// Storage is node-major: node `n` owns `data[n * 2d .. (n + 1) * 2d]`, the
/// first `d` entries being `u1` and the last `d` being `u2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath<T> {
    time: TimeGrid<T>,
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> ControlPath<T> {
    pub fn zeros(time: &TimeGrid<T>, dim: usize) -> Self {
        Self {
            time: *time,
            dim,
            data: vec![T::zero(); time.node_count() * 2 * dim],
        }
    }

    /// Constant-in-time control.
    pub fn constant(time: &TimeGrid<T>, u1: &[T], u2: &[T]) -> Self {
        let dim = u1.len();
        let mut p = Self::zeros(time, dim);
        for n in 0..time.node_count() {
            let node = p.node_mut(n);
            node[..dim].copy_from_slice(u1);
            node[dim..].copy_from_slice(u2);
        }
        p
    }

    /// Samples `f(t) -> (u1, u2)` at the nodes.
    pub fn from_fn(time: &TimeGrid<T>, dim: usize, f: impl Fn(T) -> (Vec<T>, Vec<T>)) -> Self {
        let mut p = Self::zeros(time, dim);
        for n in 0..time.node_count() {
            let (a, b) = f(time.t(n));
            let node = p.node_mut(n);
            node[..dim].copy_from_slice(&a[..dim]);
            node[dim..].copy_from_slice(&b[..dim]);
        }
        p
    }

    pub fn from_data(time: &TimeGrid<T>, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != time.node_count() * 2 * dim {
            return Err(Error::InvalidArgument(format!(
                "control data has {} entries, expected {}",
                data.len(),
                time.node_count() * 2 * dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("control path".into()));
        }
        Ok(Self { time: *time, dim, data })
    }

    pub fn time(&self) -> &TimeGrid<T> {
        &self.time
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of scalar components per node, `2d`.
    pub fn components(&self) -> usize {
        2 * self.dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn node(&self, n: usize) -> &[T] {
        let c = self.components();
        &self.data[n * c..(n + 1) * c]
    }

    pub fn node_mut(&mut self, n: usize) -> &mut [T] {
        let c = self.components();
        &mut self.data[n * c..(n + 1) * c]
    }

    /// `(u1(t), u2(t))` by linear interpolation between nodes.
    pub fn value_at(&self, t: T) -> ([T; 2], [T; 2]) {
        let nt = self.time.nt();
        let s = (t / self.time.dt()).max(T::zero()).min(T::from_usize_lossy(nt));
        let mut i = s.floor().to_usize().unwrap_or(0);
        if i >= nt {
            i = nt - 1;
        }
        let f = s - T::from_usize_lossy(i);
        let a = self.node(i);
        let b = self.node(i + 1);
        let d = self.dim;
        let mut u1 = [T::zero(); 2];
        let mut u2 = [T::zero(); 2];
        for r in 0..d {
            u1[r] = a[r] + f * (b[r] - a[r]);
            u2[r] = a[d + r] + f * (b[d + r] - a[d + r]);
        }
        (u1, u2)
    }

    /// Discrete `L^2(0,T)` inner product with trapezoid weights.
    pub fn dot(&self, other: &ControlPath<T>) -> T {
        trap_dot(&self.time, self.components(), &self.data, &other.data)
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// `self + s * dir`.
    pub fn axpy(&self, s: T, dir: &ControlPath<T>) -> ControlPath<T> {
        let data = self.data.iter().zip(&dir.data).map(|(a, b)| *a + s * *b).collect();
        ControlPath { time: self.time, dim: self.dim, data }
    }

    pub fn sub(&self, other: &ControlPath<T>) -> ControlPath<T> {
        self.axpy(-T::one(), other)
    }

    pub fn scaled(&self, s: T) -> ControlPath<T> {
        let data = self.data.iter().map(|a| *a * s).collect();
        ControlPath { time: self.time, dim: self.dim, data }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Writes the control CSV `t,u1_1..u1_d,u2_1..u2_d`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = vec!["t".to_string()];
        for j in 1..=2 {
            for r in 1..=self.dim {
                header.push(format!("u{j}_{r}"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for n in 0..self.time.node_count() {
            let mut row = vec![fmt17(self.time.t(n))];
            row.extend(self.node(n).iter().map(|v| fmt17(*v)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads a control CSV; the node count must match `time`.
    pub fn read_csv<R: BufRead>(r: R, time: &TimeGrid<T>, dim: usize) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::InvalidArgument(e.to_string()))?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 1 + 2 * dim {
                return Err(Error::InvalidArgument(format!(
                    "control csv line {}: expected {} columns",
                    lineno + 1,
                    1 + 2 * dim
                )));
            }
            for f in &fields[1..] {
                let v: f64 = f.trim().parse().map_err(|_| {
                    Error::InvalidArgument(format!("control csv line {}: bad number `{f}`", lineno + 1))
                })?;
                data.push(T::lit(v));
            }
            rows += 1;
        }
        if rows != time.node_count() {
            return Err(Error::InvalidArgument(format!(
                "control csv has {rows} rows, time grid has {} nodes",
                time.node_count()
            )));
        }
        Self::from_data(time, dim, data)
    }
}

pub(crate) fn trap_dot<T: Real>(time: &TimeGrid<T>, comps: usize, a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for n in 0..time.node_count() {
        let mut row = T::zero();
        for c in 0..comps {
            row += a[n * comps + c] * b[n * comps + c];
        }
        s += time.weight(n) * row;
    }
    s
}

/// Box `ua <= u(t) <= ub`, one bound pair per control component.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds<T> {
    ua: Vec<T>,
    ub: Vec<T>,
}

impl<T: Real> BoxBounds<T> {
    pub fn new(ua: Vec<T>, ub: Vec<T>) -> Result<Self> {
        if ua.len() != ub.len() || !ua.len().is_multiple_of(2) || ua.is_empty() {
            return Err(Error::InvalidArgument("bounds need 2d entries each".into()));
        }
        if ua.iter().zip(&ub).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument("bounds must satisfy ua <= ub".into()));
        }
        Ok(Self { ua, ub })
    }

    /// Same interval for every component.
    pub fn uniform(dim: usize, lo: T, hi: T) -> Result<Self> {
        Self::new(vec![lo; 2 * dim], vec![hi; 2 * dim])
    }

    /// No constraint at all.
    pub fn unbounded(dim: usize) -> Self {
        Self {
            ua: vec![T::neg_infinity(); 2 * dim],
            ub: vec![T::infinity(); 2 * dim],
        }
    }

    pub fn lower(&self) -> &[T] {
        &self.ua
    }

    pub fn upper(&self) -> &[T] {
        &self.ub
    }

    /// `max(|ua|, |ub|)` with `|.|` the Euclidean norm on `R^{2d}`.
    pub fn max_euclidean(&self) -> T {
        let n = |v: &[T]| v.iter().map(|x| *x * *x).sum::<T>().sqrt();
        n(&self.ua).max(n(&self.ub))
    }

    #[inline]
    pub fn clamp(&self, c: usize, v: T) -> T {
        v.max(self.ua[c]).min(self.ub[c])
    }

    pub fn contains(&self, u: &ControlPath<T>) -> bool {
        let c = u.components();
        u.data()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= self.ua[i % c] && *v <= self.ub[i % c])
    }
}

/// Componentwise clamp of every node onto the box.
pub fn project_box<T: Real>(control: &ControlPath<T>, bounds: &BoxBounds<T>) -> ControlPath<T> {
    let mut out = control.clone();
    let c = out.components();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = bounds.clamp(i % c, *v);
    }
    out
}

/// Uncontrolled part of the drift.
#[derive(Debug, Clone, PartialEq)]
pub enum A0<T> {
    Zero,
    Constant { b: [T; 2] },
    /// `A x + b`, with `a[r][i] = dA_r/dx_i`.
    Affine { a: [[T; 2]; 2], b: [T; 2] },
    /// `omega (-y, x)`; two dimensions only.
    Rotation { omega: T },
    /// `c exp(-|x|^2 / (2 sigma^2))`, componentwise amplitude `c`.
    GaussianBump { c: [T; 2], sigma: T },
}

impl<T: Real> A0<T> {
    /// Parses a named preset.
    ///
    /// * `zero`, `constant: [b_1..b_d]`, `affine: [A row-major (d*d), b (d)]`,
    ///   `rotation: [omega]`, `gaussian-bump: [c_1..c_d, sigma]`.
    pub fn from_name(name: &str, params: &[T], dim: usize) -> Result<Self> {
        let bad = |what: &str| Error::InvalidArgument(format!("a0 preset `{name}`: {what}"));
        let vec = |s: &[T]| {
            let mut v = [T::zero(); 2];
            v[..dim].copy_from_slice(&s[..dim]);
            v
        };
        match name {
            "zero" => Ok(Self::Zero),
            "constant" => {
                if params.len() != dim {
                    return Err(bad("expected d values"));
                }
                Ok(Self::Constant { b: vec(params) })
            }
            "affine" => {
                if params.len() != dim * dim + dim {
                    return Err(bad("expected d*d matrix entries then d offsets"));
                }
                let mut a = [[T::zero(); 2]; 2];
                for r in 0..dim {
                    for i in 0..dim {
                        a[r][i] = params[r * dim + i];
                    }
                }
                Ok(Self::Affine { a, b: vec(&params[dim * dim..]) })
            }
            "rotation" => {
                if dim != 2 || params.len() != 1 {
                    return Err(bad("needs d = 2 and one parameter"));
                }
                Ok(Self::Rotation { omega: params[0] })
            }
            "gaussian-bump" => {
                if params.len() != dim + 1 || !(params[dim] > T::zero()) {
                    return Err(bad("expected d amplitudes and a positive width"));
                }
                Ok(Self::GaussianBump { c: vec(params), sigma: params[dim] })
            }
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn eval(&self, x: &Point<T>, dim: usize) -> [T; 2] {
        match self {
            Self::Zero => [T::zero(); 2],
            Self::Constant { b } => *b,
            Self::Affine { a, b } => {
                let mut v = *b;
                for r in 0..dim {
                    for i in 0..dim {
                        v[r] += a[r][i] * x[i];
                    }
                }
                v
            }
            Self::Rotation { omega } => [-*omega * x[1], *omega * x[0]],
            Self::GaussianBump { c, sigma } => {
                let g = bump(x, *sigma, dim);
                [c[0] * g, if dim == 2 { c[1] * g } else { T::zero() }]
            }
        }
    }

    /// Jacobian `J[r][i] = d a0_r / d x_i`.
    pub fn jacobian(&self, x: &Point<T>, dim: usize) -> [[T; 2]; 2] {
        let z = T::zero();
        match self {
            Self::Zero | Self::Constant { .. } => [[z; 2]; 2],
            Self::Affine { a, .. } => *a,
            Self::Rotation { omega } => [[z, -*omega], [*omega, z]],
            Self::GaussianBump { c, sigma } => {
                let (grad, _, _) = bump_derivatives(x, *sigma, dim);
                let mut j = [[z; 2]; 2];
                for r in 0..dim {
                    for i in 0..dim {
                        j[r][i] = c[r] * grad[i];
                    }
                }
                j
            }
        }
    }

    /// Frobenius norms of the second and third derivative tensors at `x`.
    pub fn higher_derivative_norms(&self, x: &Point<T>, dim: usize) -> [T; 2] {
        match self {
            Self::GaussianBump { c, sigma } => {
                let (_, hess, third) = bump_derivatives(x, *sigma, dim);
                let cn = (c[0] * c[0] + c[1] * c[1]).sqrt();
                let mut h2 = T::zero();
                let mut h3 = T::zero();
                for i in 0..dim {
                    for j in 0..dim {
                        h2 += hess[i][j] * hess[i][j];
                        for k in 0..dim {
                            h3 += third[i][j][k] * third[i][j][k];
                        }
                    }
                }
                [cn * h2.sqrt(), cn * h3.sqrt()]
            }
            _ => [T::zero(); 2],
        }
    }

    /// `sup_x |grad^j a0|` (Frobenius) for `j = 1, 2, 3`, in closed form
    /// except for the bump, whose radial profile is maximised on a fine
    /// one-dimensional grid.
    pub fn sup_derivative_norms(&self, dim: usize) -> [T; 3] {
        let z = T::zero();
        match self {
            Self::Zero | Self::Constant { .. } => [z; 3],
            Self::Affine { a, .. } => {
                let mut s = z;
                for r in 0..dim {
                    for i in 0..dim {
                        s += a[r][i] * a[r][i];
                    }
                }
                [s.sqrt(), z, z]
            }
            Self::Rotation { omega } => [omega.abs() * T::two().sqrt(), z, z],
            Self::GaussianBump { sigma, .. } => {
                let mut best = [z; 3];
                let steps = 20_000;
                for s in 0..=steps {
                    let r = *sigma * T::lit(8.0 * s as f64 / steps as f64);
                    let x = [r, z];
                    let j = self.jacobian(&x, dim);
                    let mut f1 = z;
                    for a in 0..dim {
                        for b in 0..dim {
                            f1 += j[a][b] * j[a][b];
                        }
                    }
                    let [f2, f3] = self.higher_derivative_norms(&x, dim);
                    best[0] = best[0].max(f1.sqrt());
                    best[1] = best[1].max(f2);
                    best[2] = best[2].max(f3);
                }
                best
            }
        }
    }

    /// Whether the flow of `a0 + u1 + x * u2` stays axis-separable and affine.
    pub fn is_affine_diagonal(&self) -> bool {
        match self {
            Self::Zero | Self::Constant { .. } => true,
            Self::Affine { a, .. } => a[0][1] == T::zero() && a[1][0] == T::zero(),
            _ => false,
        }
    }
}

fn bump<T: Real>(x: &Point<T>, sigma: T, dim: usize) -> T {
    let mut r2 = T::zero();
    for r in 0..dim {
        r2 += x[r] * x[r];
    }
    (-r2 / (T::two() * sigma * sigma)).exp()
}

type BumpDerivs<T> = ([T; 2], [[T; 2]; 2], [[[T; 2]; 2]; 2]);

fn bump_derivatives<T: Real>(x: &Point<T>, sigma: T, dim: usize) -> BumpDerivs<T> {
    let g = bump(x, sigma, dim);
    let s2 = sigma * sigma;
    let s4 = s2 * s2;
    let s6 = s4 * s2;
    let delta = |i: usize, j: usize| if i == j { T::one() } else { T::zero() };
    let mut grad = [T::zero(); 2];
    let mut hess = [[T::zero(); 2]; 2];
    let mut third = [[[T::zero(); 2]; 2]; 2];
    for i in 0..dim {
        grad[i] = -x[i] / s2 * g;
        for j in 0..dim {
            hess[i][j] = (x[i] * x[j] / s4 - delta(i, j) / s2) * g;
            for k in 0..dim {
                third[i][j][k] = (-x[i] * x[j] * x[k] / s6
                    + (delta(i, j) * x[k] + delta(i, k) * x[j] + delta(j, k) * x[i]) / s4)
                    * g;
            }
        }
    }
    (grad, hess, third)
}

/// `a0` together with the control acting on it.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSpec<T> {
    pub a0: A0<T>,
    pub control: ControlPath<T>,
}

impl<T: Real> DriftSpec<T> {
    pub fn new(a0: A0<T>, control: ControlPath<T>) -> Self {
        Self { a0, control }
    }

    pub fn dim(&self) -> usize {
        self.control.dim()
    }

    /// `a(t, x; u)` at a single point.
    #[inline]
    pub fn at(&self, t: T, x: &Point<T>) -> [T; 2] {
        let (u1, u2) = self.control.value_at(t);
        self.at_with(&u1, &u2, x)
    }

    /// Drift with the control values already interpolated at the current time.
    #[inline]
    pub fn at_with(&self, u1: &[T; 2], u2: &[T; 2], x: &Point<T>) -> [T; 2] {
        let d = self.dim();
        let mut v = self.a0.eval(x, d);
        for r in 0..d {
            v[r] += u1[r] + x[r] * u2[r];
        }
        v
    }

    /// Jacobian of the full drift at `(t, x)`.
    pub fn jacobian(&self, t: T, x: &Point<T>) -> [[T; 2]; 2] {
        let d = self.dim();
        let (_, u2) = self.control.value_at(t);
        let mut j = self.a0.jacobian(x, d);
        for r in 0..d {
            j[r][r] += u2[r];
        }
        j
    }

    pub fn divergence(&self, t: T, x: &Point<T>) -> T {
        let j = self.jacobian(t, x);
        (0..self.dim()).map(|r| j[r][r]).sum()
    }
}

/// Evaluates `a0(t,x) + u1(t) + x * u2(t)` at each point.
pub fn eval_drift<T: Real>(spec: &DriftSpec<T>, t: T, points: &[Point<T>]) -> Vec<[T; 2]> {
    let (u1, u2) = spec.control.value_at(t);
    points.iter().map(|x| spec.at_with(&u1, &u2, x)).collect()
}

/// Piecewise-linear reference path `x_d(t)`, held constant outside its nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackPath<T> {
    nodes: Vec<(T, [T; 2])>,
}

impl<T: Real> TrackPath<T> {
    pub fn new(mut nodes: Vec<(T, [T; 2])>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidArgument("track path needs at least one node".into()));
        }
        nodes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[(T, [T; 2])] {
        &self.nodes
    }

    pub fn at(&self, t: T) -> [T; 2] {
        let first = &self.nodes[0];
        if t <= first.0 {
            return first.1;
        }
        for w in self.nodes.windows(2) {
            let (t0, x0) = w[0];
            let (t1, x1) = w[1];
            if t <= t1 {
                let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { T::one() };
                return [x0[0] + f * (x1[0] - x0[0]), x0[1] + f * (x1[1] - x0[1])];
            }
        }
        self.nodes[self.nodes.len() - 1].1
    }
}

/// Running and terminal cost densities.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential<T> {
    Zero,
    /// `w (1 - exp(-|x - c|^2))`.
    GaussianWell { center: [T; 2], weight: T },
    /// `w |x - c|^2`.
    Quadratic { center: [T; 2], weight: T },
    /// `w |x - x_d(t)|^2`.
    Tracking { weight: T, path: TrackPath<T> },
}

impl<T: Real> Potential<T> {
    /// Exact value at `(x, t)`.
    pub fn eval(&self, x: &Point<T>, t: T, dim: usize) -> T {
        let dist2 = |c: &[T; 2]| {
            let mut s = T::zero();
            for r in 0..dim {
                let d = x[r] - c[r];
                s += d * d;
            }
            s
        };
        match self {
            Self::Zero => T::zero(),
            Self::GaussianWell { center, weight } => *weight * (T::one() - (-dist2(center)).exp()),
            Self::Quadratic { center, weight } => *weight * dist2(center),
            Self::Tracking { weight, path } => *weight * dist2(&path.at(t)),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero => true,
            Self::GaussianWell { weight, .. } | Self::Quadratic { weight, .. } | Self::Tracking { weight, .. } => {
                *weight == T::zero()
            }
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(self, Self::Tracking { .. })
    }

    /// Grows like `|x|^2`, i.e. not square integrable on the whole space.
    pub fn is_confining(&self) -> bool {
        matches!(self, Self::Quadratic { .. } | Self::Tracking { .. }) && !self.is_zero()
    }
}

/// Pointwise norm used in the `L^1` control cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum L1Norm {
    /// `sum_j |u_j|`, the norm matching componentwise complementarity.
    #[default]
    Componentwise,
    /// Euclidean norm on `R^{2d}`.
    Euclidean,
}

/// Weights and potentials of the ensemble cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec<T> {
    pub gamma: T,
    pub delta: T,
    pub nu: T,
    pub theta: Potential<T>,
    pub phi: Potential<T>,
    pub l1_norm: L1Norm,
}

impl<T: Real> CostSpec<T> {
    pub fn new(gamma: T, delta: T, nu: T, theta: Potential<T>, phi: Potential<T>) -> Result<Self> {
        if !(gamma > T::zero()) {
            return Err(Error::InvalidArgument(format!("gamma = {gamma} must be > 0")));
        }
        if !(delta >= T::zero()) || !(nu >= T::zero()) {
            return Err(Error::InvalidArgument("delta and nu must be >= 0".into()));
        }
        Ok(Self {
            gamma,
            delta,
            nu,
            theta,
            phi,
            l1_norm: L1Norm::Componentwise,
        })
    }
}

/// The three control-cost integrals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlCosts<T> {
    /// `int |u|^2 dt`, trapezoid on the nodes.
    pub l2sq: T,
    /// `int |u| dt`, exact per linear segment for the componentwise norm.
    pub l1: T,
    /// `int |u'|^2 dt`, exact for piecewise-linear paths.
    pub h1sq: T,
    /// `sum_n w_n |u(t_n)|`: the nodal (trapezoid) `L^1` value whose proximal
    /// map is exact soft-thresholding.
    pub l1_lumped: T,
}

/// `int_0^dt |a + (b - a) s / dt| ds` for a scalar linear segment.
fn segment_abs<T: Real>(a: T, b: T, dt: T) -> T {
    if a * b >= T::zero() {
        dt * (a.abs() + b.abs()) * T::half()
    } else {
        dt * (a * a + b * b) / (T::two() * (a.abs() + b.abs()))
    }
}

pub fn control_cost_terms<T: Real>(control: &ControlPath<T>, norm: L1Norm) -> ControlCosts<T> {
    let tg = control.time();
    let dt = tg.dt();
    let mut l2sq = T::zero();
    let mut l1 = T::zero();
    let mut l1_lumped = T::zero();
    let mut h1sq = T::zero();
    for n in 0..tg.node_count() {
        let u = control.node(n);
        let w = tg.weight(n);
        l2sq += w * u.iter().map(|v| *v * *v).sum::<T>();
        l1_lumped += w * pointwise_norm(u, norm);
        if norm == L1Norm::Euclidean {
            l1 += w * pointwise_norm(u, norm);
        }
        if n + 1 < tg.node_count() {
            let v = control.node(n + 1);
            let mut slope2 = T::zero();
            for (a, b) in u.iter().zip(v) {
                let s = (*b - *a) / dt;
                slope2 += s * s;
                if norm == L1Norm::Componentwise {
                    l1 += segment_abs(*a, *b, dt);
                }
            }
            h1sq += dt * slope2;
        }
    }
    ControlCosts { l2sq, l1, h1sq, l1_lumped }
}

pub(crate) fn pointwise_norm<T: Real>(u: &[T], norm: L1Norm) -> T {
    match norm {
        L1Norm::Componentwise => u.iter().map(|v| v.abs()).sum(),
        L1Norm::Euclidean => u.iter().map(|v| *v * *v).sum::<T>().sqrt(),
    }
}
