//! Tensor grids on a truncated box, cell-centred scalar fields and the
//! discrete calculus used by every solver (derivatives, midpoint quadrature,
//! weighted Sobolev norms, moments, interpolation).

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::real::Real;

/// A point in the plane; the second coordinate is ignored when `dim == 1`.
pub type Point<T> = [T; 2];

/// Uniform tensor grid of `n[0] x n[1]` cells over `[lo, hi]`.
///
/// For one-dimensional grids the second axis is a dummy axis with a single
/// cell, so `n[1] == 1` and it never contributes to volumes or norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<T> {
    dim: usize,
    lo: [T; 2],
    hi: [T; 2],
    n: [usize; 2],
    h: [T; 2],
}

/// Builds a grid, validating bounds and cell counts.
pub fn make_grid<T: Real>(dim: usize, lo: &[T], hi: &[T], n: &[usize]) -> Result<GridSpec<T>> {
    if dim != 1 && dim != 2 {
        return Err(Error::InvalidGrid(format!("dimension {dim} not in {{1, 2}}")));
    }
    if lo.len() != dim || hi.len() != dim || n.len() != dim {
        return Err(Error::InvalidGrid(format!(
            "expected {dim} entries for lo/hi/n, got {}/{}/{}",
            lo.len(),
            hi.len(),
            n.len()
        )));
    }
    let mut g = GridSpec {
        dim,
        lo: [T::zero(); 2],
        hi: [T::one(); 2],
        n: [1; 2],
        h: [T::one(); 2],
    };
    for r in 0..dim {
        if !lo[r].is_finite() || !hi[r].is_finite() {
            return Err(Error::InvalidGrid(format!("axis {r}: non-finite bounds")));
        }
        if hi[r] <= lo[r] {
            return Err(Error::InvalidGrid(format!("axis {r}: hi must exceed lo")));
        }
        if n[r] < 8 {
            return Err(Error::InvalidGrid(format!("axis {r}: n = {} < 8", n[r])));
        }
        g.lo[r] = lo[r];
        g.hi[r] = hi[r];
        g.n[r] = n[r];
        g.h[r] = (hi[r] - lo[r]) / T::from_usize_lossy(n[r]);
    }
    Ok(g)
}

impl<T: Real> GridSpec<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lo(&self) -> &[T] {
        &self.lo[..self.dim]
    }

    pub fn hi(&self) -> &[T] {
        &self.hi[..self.dim]
    }

    pub fn n(&self) -> &[usize] {
        &self.n[..self.dim]
    }

    pub fn h(&self) -> &[T] {
        &self.h[..self.dim]
    }

    pub fn cell_count(&self) -> usize {
        self.n[0] * self.n[1]
    }

    /// Volume of one cell, the weight of midpoint quadrature.
    pub fn cell_volume(&self) -> T {
        let mut v = T::one();
        for r in 0..self.dim {
            v *= self.h[r];
        }
        v
    }

    /// Measure of the whole box.
    pub fn domain_volume(&self) -> T {
        let mut v = T::one();
        for r in 0..self.dim {
            v *= self.hi[r] - self.lo[r];
        }
        v
    }

    /// Cell-centre coordinate `lo + (i + 1/2) h` along `axis`.
    #[inline]
    pub fn center(&self, axis: usize, i: usize) -> T {
        if axis >= self.dim {
            return T::zero();
        }
        self.lo[axis] + (T::from_usize_lossy(i) + T::half()) * self.h[axis]
    }

    /// Face coordinate `lo + i h` along `axis` (`i` in `0..=n`).
    #[inline]
    pub fn face(&self, axis: usize, i: usize) -> T {
        self.lo[axis] + T::from_usize_lossy(i) * self.h[axis]
    }

    #[inline]
    pub fn index(&self, i0: usize, i1: usize) -> usize {
        i0 * self.n[1] + i1
    }

    #[inline]
    pub fn unindex(&self, idx: usize) -> (usize, usize) {
        (idx / self.n[1], idx % self.n[1])
    }

    /// Coordinates of the centre of cell `idx` (row-major, axis 0 slowest).
    #[inline]
    pub fn point(&self, idx: usize) -> Point<T> {
        let (i0, i1) = self.unindex(idx);
        [self.center(0, i0), self.center(1, i1)]
    }

    pub fn points(&self) -> Vec<Point<T>> {
        (0..self.cell_count()).map(|i| self.point(i)).collect()
    }

    /// Euclidean norm of a point, honouring the grid dimension.
    #[inline]
    pub fn norm(&self, x: &Point<T>) -> T {
        if self.dim == 1 {
            x[0].abs()
        } else {
            (x[0] * x[0] + x[1] * x[1]).sqrt()
        }
    }

    pub fn same_as(&self, other: &GridSpec<T>) -> bool {
        self == other
    }
}

/// Uniform time grid `t_n = n T / nt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    t_final: T,
    nt: usize,
    dt: T,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(t_final: T, nt: usize) -> Result<Self> {
        if !(t_final > T::zero()) || !t_final.is_finite() {
            return Err(Error::InvalidTimeGrid(format!("T = {t_final} must be positive")));
        }
        if nt < 2 {
            return Err(Error::InvalidTimeGrid(format!("nt = {nt} < 2")));
        }
        Ok(Self {
            t_final,
            nt,
            dt: t_final / T::from_usize_lossy(nt),
        })
    }

    pub fn t_final(&self) -> T {
        self.t_final
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn node_count(&self) -> usize {
        self.nt + 1
    }

    #[inline]
    pub fn t(&self, n: usize) -> T {
        self.t_final * T::from_usize_lossy(n) / T::from_usize_lossy(self.nt)
    }

    /// Trapezoid weight of node `n`.
    #[inline]
    pub fn weight(&self, n: usize) -> T {
        if n == 0 || n == self.nt {
            self.dt * T::half()
        } else {
            self.dt
        }
    }
}

/// Real values attached to the cells of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<T> {
    pub grid: GridSpec<T>,
    pub values: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn zeros(grid: &GridSpec<T>) -> Self {
        Self {
            grid: *grid,
            values: vec![T::zero(); grid.cell_count()],
        }
    }

    pub fn from_fn(grid: &GridSpec<T>, f: impl Fn(&Point<T>) -> T) -> Self {
        let values = (0..grid.cell_count()).map(|i| f(&grid.point(i))).collect();
        Self { grid: *grid, values }
    }

    pub fn from_values(grid: &GridSpec<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.cell_count() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} cells",
                values.len(),
                grid.cell_count()
            )));
        }
        Ok(Self { grid: *grid, values })
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// Pointwise product with another field on the same grid.
    pub fn mul(&self, other: &ScalarField<T>) -> ScalarField<T> {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| *a * *b)
            .collect();
        ScalarField { grid: self.grid, values }
    }

    /// Discrete `L^2` inner product by midpoint quadrature.
    pub fn dot(&self, other: &ScalarField<T>) -> T {
        let s: T = self.values.iter().zip(&other.values).map(|(a, b)| *a * *b).sum();
        s * self.grid.cell_volume()
    }

    pub fn l2_norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// Writes the snapshot CSV (`x[,y],value`, 17 significant digits).
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        if self.grid.dim == 1 {
            writeln!(w, "x,value")?;
        } else {
            writeln!(w, "x,y,value")?;
        }
        for (idx, v) in self.values.iter().enumerate() {
            let p = self.grid.point(idx);
            if self.grid.dim == 1 {
                writeln!(w, "{},{}", fmt17(p[0]), fmt17(*v))?;
            } else {
                writeln!(w, "{},{},{}", fmt17(p[0]), fmt17(p[1]), fmt17(*v))?;
            }
        }
        Ok(())
    }
}

/// Decimal rendering with 17 significant digits, enough to round-trip `f64`.
pub fn fmt17<T: Real>(v: T) -> String {
    format!("{:.16e}", v.to_f64_lossy())
}

/// Mass, mean and per-axis variance of a field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentState<T> {
    pub mass: T,
    pub mean: [T; 2],
    pub variance: [T; 2],
}

/// Analytic initial densities and sources.
#[derive(Debug, Clone, PartialEq)]
pub enum DensityPreset<T> {
    /// Normal density centred at `center` with isotropic variance `variance`.
    Gaussian { center: [T; 2], variance: T },
    /// Mixture `w N(c1, v1) + (1 - w) N(c2, v2)`.
    BimodalGaussian {
        weight: T,
        center1: [T; 2],
        variance1: T,
        center2: [T; 2],
        variance2: T,
    },
    Constant(T),
    Zero,
}

impl<T: Real> DensityPreset<T> {
    /// Parses a named preset with a flat parameter list.
    ///
    /// * `gaussian`: `[x0_1..x0_d, v0]`
    /// * `bimodal-gaussian`: `[w, c1_1..c1_d, v1, c2_1..c2_d, v2]`
    /// * `constant`: `[c]`
    /// * `zero`: `[]`
    pub fn from_name(name: &str, params: &[T], dim: usize) -> Result<Self> {
        let bad = |what: &str| {
            Error::InvalidArgument(format!("preset `{name}`: {what} (got {} parameters)", params.len()))
        };
        let point = |s: &[T]| {
            let mut p = [T::zero(); 2];
            p[..dim].copy_from_slice(&s[..dim]);
            p
        };
        match name {
            "gaussian" => {
                if params.len() != dim + 1 {
                    return Err(bad("expected center and variance"));
                }
                let variance = params[dim];
                if !(variance > T::zero()) {
                    return Err(bad("variance must be positive"));
                }
                Ok(Self::Gaussian { center: point(params), variance })
            }
            "bimodal-gaussian" => {
                if params.len() != 2 * dim + 3 {
                    return Err(bad("expected weight and two (center, variance) pairs"));
                }
                let v1 = params[1 + dim];
                let v2 = params[2 + 2 * dim];
                if !(v1 > T::zero() && v2 > T::zero()) {
                    return Err(bad("variances must be positive"));
                }
                Ok(Self::BimodalGaussian {
                    weight: params[0],
                    center1: point(&params[1..]),
                    variance1: v1,
                    center2: point(&params[2 + dim..]),
                    variance2: v2,
                })
            }
            "constant" => {
                if params.len() != 1 {
                    return Err(bad("expected one value"));
                }
                Ok(Self::Constant(params[0]))
            }
            "zero" => Ok(Self::Zero),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    /// Exact evaluation at `x`.
    pub fn eval(&self, x: &Point<T>, dim: usize) -> T {
        match self {
            Self::Gaussian { center, variance } => gaussian_density(x, center, *variance, dim),
            Self::BimodalGaussian {
                weight,
                center1,
                variance1,
                center2,
                variance2,
            } => {
                *weight * gaussian_density(x, center1, *variance1, dim)
                    + (T::one() - *weight) * gaussian_density(x, center2, *variance2, dim)
            }
            Self::Constant(c) => *c,
            Self::Zero => T::zero(),
        }
    }
}

/// `(2 pi v)^(-d/2) exp(-|x - c|^2 / (2 v))`.
pub fn gaussian_density<T: Real>(x: &Point<T>, c: &Point<T>, v: T, dim: usize) -> T {
    let mut r2 = T::zero();
    for r in 0..dim {
        let dx = x[r] - c[r];
        r2 += dx * dx;
    }
    let norm = (T::two() * T::PI() * v).powf(T::lit(-(dim as f64) / 2.0));
    norm * (-r2 / (T::two() * v)).exp()
}

/// Samples a preset at the cell centres.
pub fn sample_function<T: Real>(grid: &GridSpec<T>, preset: &DensityPreset<T>) -> ScalarField<T> {
    let dim = grid.dim;
    ScalarField::from_fn(grid, |x| preset.eval(x, dim))
}

/// Second-order finite difference along `axis`: central in the interior,
/// one-sided second order in the first and last cell.
pub fn partial_derivative<T: Real>(field: &ScalarField<T>, axis: usize) -> ScalarField<T> {
    let g = &field.grid;
    let mut out = ScalarField::zeros(g);
    if axis >= g.dim {
        return out;
    }
    let n = g.n[axis];
    let h = g.h[axis];
    let inv2h = T::one() / (T::two() * h);
    let three = T::lit(3.0);
    let four = T::lit(4.0);
    let stride = if axis == 0 { g.n[1] } else { 1 };
    let lines = g.cell_count() / n;
    for line in 0..lines {
        let base = if axis == 0 { line } else { line * g.n[1] };
        let at = |i: usize| field.values[base + i * stride];
        for i in 0..n {
            let d = if i == 0 {
                (-three * at(0) + four * at(1) - at(2)) * inv2h
            } else if i == n - 1 {
                (three * at(n - 1) - four * at(n - 2) + at(n - 3)) * inv2h
            } else {
                (at(i + 1) - at(i - 1)) * inv2h
            };
            out.values[base + i * stride] = d;
        }
    }
    out
}

/// Midpoint quadrature `sum(values) * cell volume`.
pub fn integrate<T: Real>(field: &ScalarField<T>) -> T {
    let s: T = field.values.iter().copied().sum();
    s * field.grid.cell_volume()
}

/// Weight of the `H^m_k` norms: `1 + |x|^k` for `k > 0`, `1` for `k = 0`,
/// `(1 + |x|)^k` for `k < 0`.
#[inline]
pub fn sobolev_weight<T: Real>(radius: T, k: i32) -> T {
    match k {
        0 => T::one(),
        k if k > 0 => T::one() + radius.powi(k),
        k => (T::one() + radius).powi(k),
    }
}

/// `sum_{|alpha| <= m} || w D^alpha f ||_{L^2}` with discrete derivatives.
pub fn weighted_sobolev_norm<T: Real>(field: &ScalarField<T>, m: usize, k: i32) -> Result<T> {
    if m > 2 {
        return Err(Error::UnsupportedOrder(m));
    }
    let g = &field.grid;
    let weights: Vec<T> = (0..g.cell_count())
        .map(|i| sobolev_weight(g.norm(&g.point(i)), k))
        .collect();
    let wnorm = |f: &ScalarField<T>| -> T {
        let s: T = f
            .values
            .iter()
            .zip(&weights)
            .map(|(v, w)| {
                let x = *v * *w;
                x * x
            })
            .sum();
        (s * g.cell_volume()).sqrt()
    };
    let mut total = wnorm(field);
    if m >= 1 {
        let first: Vec<ScalarField<T>> = (0..g.dim).map(|r| partial_derivative(field, r)).collect();
        for d in &first {
            total += wnorm(d);
        }
        if m == 2 {
            for r in 0..g.dim {
                for s in r..g.dim {
                    total += wnorm(&partial_derivative(&first[r], s));
                }
            }
        }
    }
    Ok(total)
}

/// Mass, mean and per-axis variance by midpoint quadrature.
pub fn moments<T: Real>(field: &ScalarField<T>) -> Result<MomentState<T>> {
    let g = &field.grid;
    let mass = integrate(field);
    if mass == T::zero() || !mass.is_finite() {
        return Err(Error::ZeroMass);
    }
    let vol = g.cell_volume();
    let mut mean = [T::zero(); 2];
    for r in 0..g.dim {
        let s: T = field
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| *v * g.point(i)[r])
            .sum();
        mean[r] = s * vol / mass;
    }
    let mut variance = [T::zero(); 2];
    for r in 0..g.dim {
        let s: T = field
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let d = g.point(i)[r] - mean[r];
                *v * d * d
            })
            .sum();
        variance[r] = s * vol / mass;
    }
    Ok(MomentState { mass, mean, variance })
}

/// Interpolation stencil along one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisStencil<T> {
    pub start: usize,
    pub len: usize,
    pub w: [T; 4],
    /// The query lay outside `[first centre, last centre]` and was clamped.
    pub clamped: bool,
    /// A full four-point cubic stencil was available.
    pub cubic: bool,
}

impl<T: Real> AxisStencil<T> {
    pub(crate) fn new(grid: &GridSpec<T>, axis: usize, x: T) -> Self {
        let n = grid.n[axis];
        let s_raw = (x - grid.lo[axis]) / grid.h[axis] - T::half();
        let top = T::from_usize_lossy(n - 1);
        let mut clamped = false;
        let s = if !(s_raw >= T::zero()) {
            clamped = true;
            T::zero()
        } else if s_raw > top {
            clamped = true;
            top
        } else {
            s_raw
        };
        let mut i = s.floor().to_usize().unwrap_or(0);
        if i > n - 2 {
            i = n - 2;
        }
        let f = s - T::from_usize_lossy(i);
        if i >= 1 && i + 3 <= n {
            let one = T::one();
            let two = T::two();
            let six = T::lit(6.0);
            let w = [
                -f * (f - one) * (f - two) / six,
                (f + one) * (f - one) * (f - two) / two,
                -(f + one) * f * (f - two) / two,
                (f + one) * f * (f - one) / six,
            ];
            Self { start: i - 1, len: 4, w, clamped, cubic: true }
        } else {
            Self {
                start: i,
                len: 2,
                w: [T::one() - f, f, T::zero(), T::zero()],
                clamped,
                cubic: false,
            }
        }
    }

    /// Trivial stencil for the dummy axis of a 1-D grid.
    fn unit() -> Self {
        Self {
            start: 0,
            len: 1,
            w: [T::one(), T::zero(), T::zero(), T::zero()],
            clamped: false,
            cubic: true,
        }
    }
}

/// Result of evaluating a field off-grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<T> {
    pub value: T,
    /// The point was outside the hull of cell centres and was clamped.
    pub clamped: bool,
    /// Every axis used the four-point cubic stencil.
    pub cubic: bool,
}

/// Tensor-product piecewise-cubic interpolation at one point.
///
/// When `limit` is set the result is clipped to the range of the stencil
/// values, which keeps interpolation from creating new extrema.
pub fn interpolate_point<T: Real>(field: &ScalarField<T>, x: &Point<T>, limit: bool) -> Sample<T> {
    let g = &field.grid;
    let s0 = AxisStencil::new(g, 0, x[0]);
    let s1 = if g.dim == 2 { AxisStencil::new(g, 1, x[1]) } else { AxisStencil::unit() };
    let mut value = T::zero();
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for a in 0..s0.len {
        let mut row = T::zero();
        for b in 0..s1.len {
            let v = field.values[g.index(s0.start + a, s1.start + b)];
            if limit {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            row += s1.w[b] * v;
        }
        value += s0.w[a] * row;
    }
    if limit {
        value = value.max(lo).min(hi);
    }
    Sample {
        value,
        clamped: s0.clamped || s1.clamped,
        cubic: s0.cubic && s1.cubic,
    }
}

/// Interpolates at many points; the flag reports whether any point was
/// outside the hull of cell centres.
pub fn interpolate<T: Real>(field: &ScalarField<T>, points: &[Point<T>]) -> (Vec<T>, bool) {
    let mut flagged = false;
    let values = points
        .iter()
        .map(|p| {
            let s = interpolate_point(field, p, false);
            flagged |= s.clamped;
            s.value
        })
        .collect();
    (values, flagged)
}
