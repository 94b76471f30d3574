//! Conservative finite-volume integration of `d_t rho + div(a rho) = g`.
//!
//! Faces carry `F = a_face * rho_upwind`, with `rho_upwind` either the cell
//! value (`upwind-fv`, forward Euler) or a minmod-limited MUSCL
//! reconstruction (`muscl-fv`, SSP-RK2). Boundary faces let mass leave but
//! never enter; whatever leaves is booked per step so the mass balance can be
//! audited exactly.

use std::str::FromStr;

use crate::drift::{ControlPath, DriftSpec};
use crate::error::{Error, Result};
use crate::grid::{gaussian_density, sobolev_weight, weighted_sobolev_norm, GridSpec, Point, ScalarField, TimeGrid};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    #[default]
    Upwind,
    Muscl,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Upwind => "upwind-fv",
            Scheme::Muscl => "muscl-fv",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upwind-fv" | "upwind" => Ok(Scheme::Upwind),
            "muscl-fv" | "muscl" => Ok(Scheme::Muscl),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }
}

/// Time-independent source term `g`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Source<T> {
    #[default]
    Zero,
    /// `rate * N(center, variance)`.
    Gaussian { center: [T; 2], variance: T, rate: T },
}

impl<T: Real> Source<T> {
    /// `zero`, or `gaussian: [center_1..center_d, variance, rate]`.
    pub fn from_name(name: &str, params: &[T], dim: usize) -> Result<Self> {
        match name {
            "zero" => Ok(Source::Zero),
            "gaussian" => {
                if params.len() != dim + 2 || !(params[dim] > T::zero()) {
                    return Err(Error::InvalidArgument(
                        "gaussian source expects d centre coordinates, a positive variance and a rate".into(),
                    ));
                }
                let mut center = [T::zero(); 2];
                center[..dim].copy_from_slice(&params[..dim]);
                Ok(Source::Gaussian { center, variance: params[dim], rate: params[dim + 1] })
            }
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn eval(&self, x: &Point<T>, dim: usize) -> T {
        match self {
            Source::Zero => T::zero(),
            Source::Gaussian { center, variance, rate } => *rate * gaussian_density(x, center, *variance, dim),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Source::Zero => true,
            Source::Gaussian { rate, .. } => *rate == T::zero(),
        }
    }

    pub fn sample(&self, grid: &GridSpec<T>) -> ScalarField<T> {
        ScalarField::from_fn(grid, |x| self.eval(x, grid.dim()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOptions<T> {
    pub scheme: Scheme,
    /// Target Courant number. MUSCL runs use half of it to stay TVD.
    pub cfl: T,
    /// Largest admissible number of substeps per time step.
    pub max_substeps: usize,
    /// Store every `stride`-th state (endpoints always).
    pub stride: usize,
    /// Upper bound on stored values, `snapshots * cells`; above it the stride
    /// grows and missing states are recomputed on demand.
    pub memory_budget: usize,
    /// Substep counts to reuse instead of deriving them from the drift.
    pub schedule: Option<Vec<usize>>,
}

impl<T: Real> Default for ForwardOptions<T> {
    fn default() -> Self {
        Self {
            scheme: Scheme::Upwind,
            cfl: T::lit(0.9),
            max_substeps: 4096,
            stride: 1,
            memory_budget: 64 << 20,
            schedule: None,
        }
    }
}

impl<T: Real> ForwardOptions<T> {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self { scheme, ..Self::default() }
    }

    /// Same options, substeps frozen to `schedule`.
    pub fn frozen(&self, schedule: &[usize]) -> Self {
        Self { schedule: Some(schedule.to_vec()), ..self.clone() }
    }
}

/// Diagnostics at time node `t_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics<T> {
    pub t: T,
    pub mass: T,
    pub min: T,
    pub l2: T,
    /// `|| rho ||_{H^0_2}`.
    pub h0k2: T,
    /// Mass that left through the boundary during `(t_{n-1}, t_n]`.
    pub outflow: T,
    /// Mass injected by `g` during `(t_{n-1}, t_n]`.
    pub injected: T,
}

#[derive(Debug, Clone)]
struct Replay<T> {
    drift: DriftSpec<T>,
    source: Source<T>,
    scheme: Scheme,
}

/// States and diagnostics of one forward run.
#[derive(Debug, Clone)]
pub struct StateTrajectory<T> {
    grid: GridSpec<T>,
    time: TimeGrid<T>,
    stride: usize,
    snapshots: Vec<Option<Vec<T>>>,
    diagnostics: Vec<StepDiagnostics<T>>,
    schedule: Vec<usize>,
    replay: Replay<T>,
}

impl<T: Real> StateTrajectory<T> {
    pub fn grid(&self) -> &GridSpec<T> {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid<T> {
        &self.time
    }

    pub fn scheme(&self) -> Scheme {
        self.replay.scheme
    }

    pub fn drift(&self) -> &DriftSpec<T> {
        &self.replay.drift
    }

    pub fn diagnostics(&self) -> &[StepDiagnostics<T>] {
        &self.diagnostics
    }

    /// Substeps used in each of the `nt` time steps.
    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Steps whose state is held in memory.
    pub fn stored_steps(&self) -> Vec<usize> {
        (0..self.snapshots.len()).filter(|n| self.snapshots[*n].is_some()).collect()
    }

    pub fn is_stored(&self, n: usize) -> bool {
        self.snapshots[n].is_some()
    }

    /// State at node `n`, recomputed from the preceding checkpoint if needed.
    pub fn state(&self, n: usize) -> Result<ScalarField<T>> {
        let mut k = n;
        while self.snapshots[k].is_none() {
            k -= 1;
        }
        let mut rho = self.snapshots[k].clone().unwrap_or_default();
        if k < n {
            let stepper = self.stepper();
            for step in k..n {
                stepper.advance(&mut rho, step, self.schedule[step], None)?;
            }
        }
        ScalarField::from_values(&self.grid, rho)
    }

    pub fn initial(&self) -> ScalarField<T> {
        ScalarField { grid: self.grid, values: self.snapshots[0].clone().unwrap_or_default() }
    }

    pub fn terminal(&self) -> ScalarField<T> {
        let last = self.snapshots.len() - 1;
        ScalarField { grid: self.grid, values: self.snapshots[last].clone().unwrap_or_default() }
    }

    /// Visits every node in order, replaying segments between checkpoints.
    pub fn for_each_state(&self, mut f: impl FnMut(usize, &[T]) -> Result<()>) -> Result<()> {
        let stepper = self.stepper();
        let mut cur: Vec<T> = Vec::new();
        for n in 0..self.snapshots.len() {
            match &self.snapshots[n] {
                Some(s) => {
                    f(n, s)?;
                    if n + 1 < self.snapshots.len() && self.snapshots[n + 1].is_none() {
                        cur.clone_from(s);
                    }
                }
                None => {
                    stepper.advance(&mut cur, n - 1, self.schedule[n - 1], None)?;
                    f(n, &cur)?;
                }
            }
        }
        Ok(())
    }

    fn stepper(&self) -> Stepper<'_, T> {
        Stepper::new(&self.grid, &self.time, &self.replay.drift, &self.replay.source, self.replay.scheme)
    }

    /// `|mass(T) - mass(0) - injected|`.
    pub fn boundary_leak(&self) -> T {
        let d = &self.diagnostics;
        let injected: T = d.iter().map(|s| s.injected).sum();
        (d[d.len() - 1].mass - d[0].mass - injected).abs()
    }

    /// Total mass that left through the boundary.
    pub fn total_outflow(&self) -> T {
        self.diagnostics.iter().map(|s| s.outflow).sum()
    }
}

/// `|mass(T) - mass(0) - int int g|` from the stored diagnostics.
pub fn boundary_leak<T: Real>(trajectory: &StateTrajectory<T>) -> T {
    trajectory.boundary_leak()
}

/// Line of cells along one axis: `n` cells at `base + i * stride`.
#[derive(Clone, Copy)]
struct Line {
    base: usize,
    stride: usize,
    n: usize,
}

struct Stepper<'a, T> {
    grid: &'a GridSpec<T>,
    time: &'a TimeGrid<T>,
    control: &'a ControlPath<T>,
    scheme: Scheme,
    /// `a0_r` at the faces of each axis, face `f` of line `l` at `l * (n + 1) + f`.
    a0_face: [Vec<T>; 2],
    /// Face coordinate along the axis, same layout.
    x_face: [Vec<T>; 2],
    source: Option<Vec<T>>,
}

impl<'a, T: Real> Stepper<'a, T> {
    fn new(
        grid: &'a GridSpec<T>,
        time: &'a TimeGrid<T>,
        drift: &'a DriftSpec<T>,
        source: &Source<T>,
        scheme: Scheme,
    ) -> Self {
        let dim = grid.dim();
        let mut a0_face = [Vec::new(), Vec::new()];
        let mut x_face = [Vec::new(), Vec::new()];
        for axis in 0..dim {
            let other = 1 - axis;
            let n = grid.n()[axis];
            for l in 0..Self::line_count(grid, axis) {
                for f in 0..=n {
                    let mut x = [T::zero(); 2];
                    x[axis] = grid.face(axis, f);
                    if dim == 2 {
                        x[other] = grid.center(other, l);
                    }
                    a0_face[axis].push(drift.a0.eval(&x, dim)[axis]);
                    x_face[axis].push(x[axis]);
                }
            }
        }
        let source = (!source.is_zero()).then(|| source.sample(grid).values);
        Self { grid, time, control: &drift.control, scheme, a0_face, x_face, source }
    }

    fn line_count(grid: &GridSpec<T>, axis: usize) -> usize {
        if grid.dim() == 1 {
            1
        } else {
            grid.n()[1 - axis]
        }
    }

    fn line(&self, axis: usize, l: usize) -> Line {
        let n1 = if self.grid.dim() == 2 { self.grid.n()[1] } else { 1 };
        if axis == 0 {
            Line { base: l, stride: n1, n: self.grid.n()[0] }
        } else {
            Line { base: l * n1, stride: 1, n: n1 }
        }
    }

    /// Area of a face normal to `axis`.
    fn face_area(&self, axis: usize) -> T {
        if self.grid.dim() == 1 {
            T::one()
        } else {
            self.grid.h()[1 - axis]
        }
    }

    fn face_velocity(&self, axis: usize, fi: usize, u1: &[T; 2], u2: &[T; 2]) -> T {
        self.a0_face[axis][fi] + u1[axis] + self.x_face[axis][fi] * u2[axis]
    }

    fn effective_cfl(&self, cfl: T) -> T {
        match self.scheme {
            Scheme::Upwind => cfl,
            Scheme::Muscl => cfl * T::half(),
        }
    }

    /// Smallest substep count keeping both the Courant number and the
    /// per-cell outflow fraction below the target over `[t_n, t_{n+1}]`.
    fn substeps(&self, step: usize, cfl: T, cap: usize) -> Result<usize> {
        let dim = self.grid.dim();
        let mut rate = T::zero();
        let mut out = vec![T::zero(); self.grid.cell_count()];
        for t in [self.time.t(step), self.time.t(step + 1)] {
            let (u1, u2) = self.control.value_at(t);
            let mut courant = T::zero();
            out.iter_mut().for_each(|v| *v = T::zero());
            for axis in 0..dim {
                let h = self.grid.h()[axis];
                let mut amax = T::zero();
                for l in 0..Self::line_count(self.grid, axis) {
                    let line = self.line(axis, l);
                    for f in 0..=line.n {
                        let a = self.face_velocity(axis, l * (line.n + 1) + f, &u1, &u2);
                        amax = amax.max(a.abs());
                        if f > 0 && a > T::zero() {
                            out[line.base + (f - 1) * line.stride] += a / h;
                        }
                        if f < line.n && a < T::zero() {
                            out[line.base + f * line.stride] -= a / h;
                        }
                    }
                }
                courant += amax / h;
            }
            let worst = out.iter().fold(T::zero(), |m, v| m.max(*v));
            rate = rate.max(courant).max(worst);
        }
        if !rate.is_finite() {
            return Err(Error::NonFinite("drift speed".into()));
        }
        let need = (self.time.dt() * rate / self.effective_cfl(cfl)).ceil();
        let need = need.to_f64_lossy().max(1.0);
        if need > cap as f64 {
            return Err(Error::CflUnderflow { needed: need as usize, cap });
        }
        Ok(need as usize)
    }

    /// Writes `-div F(rho)` into `out` and returns the boundary outflow rate.
    fn transport(&self, rho: &[T], t: T, out: &mut [T], scratch: &mut Scratch<T>) -> T {
        let (u1, u2) = self.control.value_at(t);
        out.iter_mut().for_each(|v| *v = T::zero());
        let mut outflow = T::zero();
        for axis in 0..self.grid.dim() {
            let h = self.grid.h()[axis];
            let area = self.face_area(axis);
            for l in 0..Self::line_count(self.grid, axis) {
                let line = self.line(axis, l);
                scratch.load(rho, line);
                scratch.slopes(self.scheme);
                let n = line.n;
                let mut f_prev = T::zero();
                for f in 0..=n {
                    let a = self.face_velocity(axis, l * (n + 1) + f, &u1, &u2);
                    let flux = scratch.face_value(f, a).map_or(T::zero(), |v| a * v);
                    if f == 0 {
                        outflow -= flux * area;
                    } else {
                        out[line.base + (f - 1) * line.stride] -= (flux - f_prev) / h;
                    }
                    if f == n {
                        outflow += flux * area;
                    }
                    f_prev = flux;
                }
            }
        }
        outflow
    }

    /// Linearisation of [`Self::transport`] about `rho` in the direction
    /// `(sigma, du)`, with the upwind and limiter branches frozen at `rho`.
    fn transport_tangent(
        &self,
        rho: &[T],
        sigma: &[T],
        t: T,
        dir: &ControlPath<T>,
        out: &mut [T],
        scratch: &mut Scratch<T>,
        dscratch: &mut Scratch<T>,
    ) {
        let (u1, u2) = self.control.value_at(t);
        let (d1, d2) = dir.value_at(t);
        out.iter_mut().for_each(|v| *v = T::zero());
        for axis in 0..self.grid.dim() {
            let h = self.grid.h()[axis];
            for l in 0..Self::line_count(self.grid, axis) {
                let line = self.line(axis, l);
                scratch.load(rho, line);
                scratch.slopes(self.scheme);
                dscratch.load(sigma, line);
                dscratch.slopes_frozen(self.scheme, scratch);
                let n = line.n;
                let mut f_prev = T::zero();
                for f in 0..=n {
                    let fi = l * (n + 1) + f;
                    let a = self.face_velocity(axis, fi, &u1, &u2);
                    let da = d1[axis] + self.x_face[axis][fi] * d2[axis];
                    let flux = match (scratch.face_value(f, a), dscratch.face_value(f, a)) {
                        (Some(r), Some(s)) => da * r + a * s,
                        _ => T::zero(),
                    };
                    if f > 0 {
                        out[line.base + (f - 1) * line.stride] -= (flux - f_prev) / h;
                    }
                    f_prev = flux;
                }
            }
        }
    }

    /// Advances `rho` (and optionally the tangent `sigma`) across step `step`.
    /// Returns `(outflow, injected)` mass.
    fn advance(
        &self,
        rho: &mut [T],
        step: usize,
        substeps: usize,
        mut tangent: Option<(&mut Vec<T>, &ControlPath<T>)>,
    ) -> Result<(T, T)> {
        let cells = rho.len();
        let tau = self.time.dt() / T::from_usize_lossy(substeps);
        let vol = self.grid.cell_volume();
        let mut scratch = Scratch::new(self.grid);
        let mut dscratch = Scratch::new(self.grid);
        let mut k1 = vec![T::zero(); cells];
        let mut k2 = vec![T::zero(); cells];
        let mut stage = vec![T::zero(); cells];
        let mut dk1 = Vec::new();
        let mut dk2 = Vec::new();
        let mut dstage = Vec::new();
        if tangent.is_some() {
            dk1 = vec![T::zero(); cells];
            dk2 = vec![T::zero(); cells];
            dstage = vec![T::zero(); cells];
        }
        let mut outflow = T::zero();
        let mut injected = T::zero();
        let t0 = self.time.t(step);
        for k in 0..substeps {
            let tk = t0 + tau * T::from_usize_lossy(k);
            match self.scheme {
                Scheme::Upwind => {
                    if let Some((sigma, dir)) = tangent.as_mut() {
                        self.transport_tangent(rho, sigma, tk, dir, &mut dk1, &mut scratch, &mut dscratch);
                        for i in 0..cells {
                            sigma[i] += tau * dk1[i];
                        }
                    }
                    outflow += tau * self.transport(rho, tk, &mut k1, &mut scratch);
                    for i in 0..cells {
                        rho[i] += tau * k1[i];
                    }
                }
                Scheme::Muscl => {
                    let half = T::half();
                    let o1 = self.transport(rho, tk, &mut k1, &mut scratch);
                    for i in 0..cells {
                        stage[i] = rho[i] + tau * k1[i];
                    }
                    let o2 = self.transport(&stage, tk + tau, &mut k2, &mut scratch);
                    if let Some((sigma, dir)) = tangent.as_mut() {
                        self.transport_tangent(rho, sigma, tk, dir, &mut dk1, &mut scratch, &mut dscratch);
                        for i in 0..cells {
                            dstage[i] = sigma[i] + tau * dk1[i];
                        }
                        self.transport_tangent(&stage, &dstage, tk + tau, dir, &mut dk2, &mut scratch, &mut dscratch);
                        for i in 0..cells {
                            sigma[i] = half * sigma[i] + half * (dstage[i] + tau * dk2[i]);
                        }
                    }
                    for i in 0..cells {
                        rho[i] = half * rho[i] + half * (stage[i] + tau * k2[i]);
                    }
                    outflow += half * tau * (o1 + o2);
                }
            }
            if let Some(g) = &self.source {
                for i in 0..cells {
                    rho[i] += tau * g[i];
                }
                injected += tau * vol * g.iter().copied().sum::<T>();
            }
        }
        Ok((outflow, injected))
    }
}

/// Per-line working storage for reconstructions.
struct Scratch<T> {
    vals: Vec<T>,
    slope: Vec<T>,
    /// Minmod branch per cell: 0 none, 1 backward difference, 2 forward.
    branch: Vec<u8>,
    n: usize,
}

impl<T: Real> Scratch<T> {
    fn new(grid: &GridSpec<T>) -> Self {
        let m = grid.n().iter().take(grid.dim()).copied().max().unwrap_or(0);
        Self { vals: vec![T::zero(); m], slope: vec![T::zero(); m], branch: vec![0; m], n: 0 }
    }

    fn load(&mut self, field: &[T], line: Line) {
        self.n = line.n;
        for i in 0..line.n {
            self.vals[i] = field[line.base + i * line.stride];
        }
    }

    fn slopes(&mut self, scheme: Scheme) {
        let n = self.n;
        if scheme == Scheme::Upwind {
            return;
        }
        self.slope[0] = T::zero();
        self.branch[0] = 0;
        self.slope[n - 1] = T::zero();
        self.branch[n - 1] = 0;
        for i in 1..n - 1 {
            let p = self.vals[i] - self.vals[i - 1];
            let q = self.vals[i + 1] - self.vals[i];
            let (s, b) = if p * q <= T::zero() {
                (T::zero(), 0)
            } else if p.abs() <= q.abs() {
                (p, 1)
            } else {
                (q, 2)
            };
            self.slope[i] = s;
            self.branch[i] = b;
        }
    }

    /// Slopes of a perturbation using the branches chosen for `base`.
    fn slopes_frozen(&mut self, scheme: Scheme, base: &Scratch<T>) {
        let n = self.n;
        if scheme == Scheme::Upwind {
            return;
        }
        for i in 0..n {
            self.slope[i] = match base.branch[i] {
                1 => self.vals[i] - self.vals[i - 1],
                2 => self.vals[i + 1] - self.vals[i],
                _ => T::zero(),
            };
        }
    }

    /// Upwind reconstruction at face `f` for velocity `a`; `None` on an
    /// inflow boundary face.
    #[inline]
    fn face_value(&self, f: usize, a: T) -> Option<T> {
        let muscl = |i: usize, sign: T| self.vals[i] + sign * T::half() * self.slope_or_zero(i);
        if a >= T::zero() {
            (f > 0).then(|| muscl(f - 1, T::one()))
        } else {
            (f < self.n).then(|| muscl(f, -T::one()))
        }
    }

    #[inline]
    fn slope_or_zero(&self, i: usize) -> T {
        self.slope.get(i).copied().unwrap_or_else(T::zero)
    }
}

struct DiagWeights<T> {
    w2: Vec<T>,
}

impl<T: Real> DiagWeights<T> {
    fn new(grid: &GridSpec<T>) -> Self {
        let w2 = (0..grid.cell_count())
            .map(|i| {
                let w = sobolev_weight(grid.norm(&grid.point(i)), 2);
                w * w
            })
            .collect();
        Self { w2 }
    }

    fn measure(&self, grid: &GridSpec<T>, rho: &[T], t: T, outflow: T, injected: T) -> StepDiagnostics<T> {
        let vol = grid.cell_volume();
        let mut mass = T::zero();
        let mut sq = T::zero();
        let mut wsq = T::zero();
        let mut min = T::infinity();
        for (v, w2) in rho.iter().zip(&self.w2) {
            mass += *v;
            sq += *v * *v;
            wsq += *w2 * *v * *v;
            min = min.min(*v);
        }
        StepDiagnostics {
            t,
            mass: mass * vol,
            min,
            l2: (sq * vol).sqrt(),
            h0k2: (wsq * vol).sqrt(),
            outflow,
            injected,
        }
    }
}

fn effective_stride(requested: usize, nodes: usize, cells: usize, budget: usize) -> usize {
    let requested = requested.max(1);
    if nodes.saturating_mul(cells) <= budget {
        return requested;
    }
    let keep = (budget / cells.max(1)).max(2);
    requested.max(nodes.div_ceil(keep - 1))
}

fn check_inputs<T: Real>(rho0: &ScalarField<T>, drift: &DriftSpec<T>, time: &TimeGrid<T>) -> Result<()> {
    if !rho0.all_finite() {
        return Err(Error::NonFinite("initial density".into()));
    }
    if drift.control.time() != time {
        return Err(Error::GridMismatch("control time grid differs from the run".into()));
    }
    if drift.dim() != rho0.grid.dim() {
        return Err(Error::GridMismatch("control dimension differs from the grid".into()));
    }
    Ok(())
}

fn resolve_schedule<T: Real>(stepper: &Stepper<'_, T>, opts: &ForwardOptions<T>, nt: usize) -> Result<Vec<usize>> {
    match &opts.schedule {
        Some(s) if s.len() == nt => Ok(s.clone()),
        Some(s) => Err(Error::InvalidArgument(format!("schedule has {} entries, need {nt}", s.len()))),
        None => (0..nt).map(|n| stepper.substeps(n, opts.cfl, opts.max_substeps)).collect(),
    }
}

/// Integrates the controlled Liouville equation over `time`.
pub fn solve_forward<T: Real>(
    rho0: &ScalarField<T>,
    drift: &DriftSpec<T>,
    source: &Source<T>,
    time: &TimeGrid<T>,
    opts: &ForwardOptions<T>,
) -> Result<StateTrajectory<T>> {
    check_inputs(rho0, drift, time)?;
    let grid = rho0.grid;
    let stepper = Stepper::new(&grid, time, drift, source, opts.scheme);
    let nt = time.nt();
    let schedule = resolve_schedule(&stepper, opts, nt)?;
    let stride = effective_stride(opts.stride, nt + 1, grid.cell_count(), opts.memory_budget);
    let weights = DiagWeights::new(&grid);

    let mut rho = rho0.values.clone();
    let mut snapshots = Vec::with_capacity(nt + 1);
    let mut diagnostics = Vec::with_capacity(nt + 1);
    snapshots.push(Some(rho.clone()));
    diagnostics.push(weights.measure(&grid, &rho, time.t(0), T::zero(), T::zero()));
    for n in 0..nt {
        let (outflow, injected) = stepper.advance(&mut rho, n, schedule[n], None)?;
        let diag = weights.measure(&grid, &rho, time.t(n + 1), outflow, injected);
        if !diag.mass.is_finite() || !diag.l2.is_finite() {
            return Err(Error::NonFinite(format!("density at step {}", n + 1)));
        }
        diagnostics.push(diag);
        let keep = (n + 1) % stride == 0 || n + 1 == nt;
        snapshots.push(keep.then(|| rho.clone()));
    }
    Ok(StateTrajectory {
        grid,
        time: *time,
        stride,
        snapshots,
        diagnostics,
        schedule,
        replay: Replay { drift: drift.clone(), source: source.clone(), scheme: opts.scheme },
    })
}

/// Base run together with the linearised state `DG(u)[du]` at every node.
#[derive(Debug, Clone)]
pub struct TangentTrajectory<T> {
    pub base: StateTrajectory<T>,
    pub sigma: Vec<Vec<T>>,
}

/// Solves the state equation and its linearisation in the control direction
/// `direction`, i.e. `d_t s + div(a s) = -div(abar rho)` with
/// `abar = du1 + x * du2`, discretised as the exact derivative of the scheme.
pub fn solve_tangent<T: Real>(
    rho0: &ScalarField<T>,
    drift: &DriftSpec<T>,
    source: &Source<T>,
    direction: &ControlPath<T>,
    time: &TimeGrid<T>,
    opts: &ForwardOptions<T>,
) -> Result<TangentTrajectory<T>> {
    check_inputs(rho0, drift, time)?;
    if direction.time() != time || direction.dim() != drift.dim() {
        return Err(Error::GridMismatch("direction layout differs from the control".into()));
    }
    let grid = rho0.grid;
    let stepper = Stepper::new(&grid, time, drift, source, opts.scheme);
    let nt = time.nt();
    let schedule = resolve_schedule(&stepper, opts, nt)?;
    let weights = DiagWeights::new(&grid);
    let mut rho = rho0.values.clone();
    let mut sigma = vec![T::zero(); rho.len()];
    let mut snapshots = vec![Some(rho.clone())];
    let mut sig = vec![sigma.clone()];
    let mut diagnostics = vec![weights.measure(&grid, &rho, time.t(0), T::zero(), T::zero())];
    for n in 0..nt {
        let (outflow, injected) = stepper.advance(&mut rho, n, schedule[n], Some((&mut sigma, direction)))?;
        let diag = weights.measure(&grid, &rho, time.t(n + 1), outflow, injected);
        if !diag.mass.is_finite() || sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tangent run at step {}", n + 1)));
        }
        diagnostics.push(diag);
        snapshots.push(Some(rho.clone()));
        sig.push(sigma.clone());
    }
    let base = StateTrajectory {
        grid,
        time: *time,
        stride: 1,
        snapshots,
        diagnostics,
        schedule,
        replay: Replay { drift: drift.clone(), source: source.clone(), scheme: opts.scheme },
    };
    Ok(TangentTrajectory { base, sigma: sig })
}

/// Discrete Gronwall check of a weighted Sobolev norm along a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyCertificate<T> {
    pub m: usize,
    pub k: i32,
    /// `N_n` for `n = 0..=nt`.
    pub norms: Vec<T>,
    /// `N_{n+1}`, one entry per step.
    pub lhs: Vec<T>,
    /// `(1 + C dt L_n) N_n + dt G_n` with `C = c_cert`.
    pub rhs: Vec<T>,
    /// Drift bound `L_n` per step.
    pub rate: Vec<T>,
    /// Smallest `C` for which every step satisfies the recursion.
    pub fitted_c: T,
    pub c_cert: T,
    pub pass: bool,
}

/// `L_n` entering the energy recursion.
///
/// `m = k = 0` uses `sup |div a|`. Otherwise the `C^m_b` norm of `grad a`
/// (sum of sup-Frobenius norms of derivatives of orders `1..=m+1`), plus for
/// `k != 0` the linear-growth term `|k| sup |a| / (1 + |x|)`, which controls
/// the commutator between the weight and the transport.
pub fn drift_rate<T: Real>(drift: &DriftSpec<T>, grid: &GridSpec<T>, t: T, m: usize, k: i32) -> T {
    let dim = grid.dim();
    let mut div_sup = T::zero();
    let mut jac_sup = T::zero();
    let mut hi_sup = [T::zero(); 2];
    let mut growth = T::zero();
    for idx in 0..grid.cell_count() {
        let x = grid.point(idx);
        let j = drift.jacobian(t, &x);
        let mut fro = T::zero();
        let mut div = T::zero();
        for r in 0..dim {
            div += j[r][r];
            for i in 0..dim {
                fro += j[r][i] * j[r][i];
            }
        }
        div_sup = div_sup.max(div.abs());
        jac_sup = jac_sup.max(fro.sqrt());
        let h = drift.a0.higher_derivative_norms(&x, dim);
        hi_sup[0] = hi_sup[0].max(h[0]);
        hi_sup[1] = hi_sup[1].max(h[1]);
        if k != 0 {
            let a = drift.at(t, &x);
            let speed = (a[0] * a[0] + a[1] * a[1]).sqrt();
            growth = growth.max(speed / (T::one() + grid.norm(&x)));
        }
    }
    if m == 0 && k == 0 {
        return div_sup;
    }
    let mut l = jac_sup;
    for h in hi_sup.iter().take(m.min(2)) {
        l += *h;
    }
    l + T::lit(k.unsigned_abs() as f64) * growth
}

/// Checks `N_{n+1} <= (1 + C dt L_n) N_n + dt ||g||_{H^m_k}` along `trajectory`,
/// with `L_n` the larger of the drift bounds at both ends of the step.
pub fn energy_certificate<T: Real>(
    trajectory: &StateTrajectory<T>,
    source: &Source<T>,
    m: usize,
    k: i32,
    c_cert: T,
) -> Result<EnergyCertificate<T>> {
    let grid = *trajectory.grid();
    let time = *trajectory.time();
    let drift = trajectory.drift();
    let mut norms = Vec::with_capacity(time.node_count());
    trajectory.for_each_state(|_, rho| {
        let f = ScalarField { grid, values: rho.to_vec() };
        norms.push(weighted_sobolev_norm(&f, m, k)?);
        Ok(())
    })?;
    let g_norm = if source.is_zero() {
        T::zero()
    } else {
        weighted_sobolev_norm(&source.sample(&grid), m, k)?
    };
    let rates: Vec<T> = (0..=time.nt()).map(|n| drift_rate(drift, &grid, time.t(n), m, k)).collect();
    let dt = time.dt();
    let slack = T::lit(64.0) * T::epsilon();
    let mut lhs = Vec::with_capacity(time.nt());
    let mut rhs = Vec::with_capacity(time.nt());
    let mut rate = Vec::with_capacity(time.nt());
    let mut fitted = T::zero();
    for n in 0..time.nt() {
        let l = rates[n].max(rates[n + 1]);
        let excess = norms[n + 1] - norms[n] - dt * g_norm - slack * norms[n];
        if excess > T::zero() {
            let need = if l > T::zero() && norms[n] > T::zero() {
                excess / (dt * l * norms[n])
            } else {
                T::infinity()
            };
            fitted = fitted.max(need);
        }
        lhs.push(norms[n + 1]);
        rhs.push((T::one() + c_cert * dt * l) * norms[n] + dt * g_norm + slack * norms[n]);
        rate.push(l);
    }
    let pass = lhs.iter().zip(&rhs).all(|(a, b)| a <= b);
    Ok(EnergyCertificate { m, k, norms, lhs, rhs, rate, fitted_c: fitted, c_cert, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::A0;
    use crate::grid::{integrate, make_grid, moments, sample_function, DensityPreset};

    fn setup(n: usize, nt: usize) -> (GridSpec<f64>, TimeGrid<f64>, ScalarField<f64>) {
        let g = make_grid(1, &[-8.0], &[8.0], &[n]).unwrap();
        let t = TimeGrid::new(1.0, nt).unwrap();
        let rho0 = sample_function(&g, &DensityPreset::Gaussian { center: [0.0, 0.0], variance: 0.25 });
        (g, t, rho0)
    }

    #[test]
    fn zero_drift_is_frozen() {
        let (_, t, rho0) = setup(64, 16);
        let drift = DriftSpec::new(A0::Zero, ControlPath::zeros(&t, 1));
        for scheme in [Scheme::Upwind, Scheme::Muscl] {
            let tr = solve_forward(&rho0, &drift, &Source::Zero, &t, &ForwardOptions::with_scheme(scheme)).unwrap();
            assert_eq!(tr.terminal().values, rho0.values);
            assert_eq!(tr.boundary_leak(), 0.0);
        }
    }

    #[test]
    fn translation_moves_the_mean() {
        let (_, t, rho0) = setup(256, 256);
        let drift = DriftSpec::new(A0::Zero, ControlPath::constant(&t, &[1.0], &[0.0]));
        let up = solve_forward(&rho0, &drift, &Source::Zero, &t, &ForwardOptions::default()).unwrap();
        let mu = solve_forward(&rho0, &drift, &Source::Zero, &t, &ForwardOptions::with_scheme(Scheme::Muscl)).unwrap();
        let e_up = (moments(&up.terminal()).unwrap().mean[0] - 1.0).abs();
        let e_mu = (moments(&mu.terminal()).unwrap().mean[0] - 1.0).abs();
        assert!(e_up < 5e-2, "{e_up}");
        assert!(e_mu < 1e-3, "{e_mu}");
    }

    #[test]
    fn dilation_grows_the_variance() {
        let (_, t, rho0) = setup(512, 256);
        let c = 0.5;
        let drift = DriftSpec::new(A0::Zero, ControlPath::constant(&t, &[0.0], &[c]));
        let tr = solve_forward(&rho0, &drift, &Source::Zero, &t, &ForwardOptions::with_scheme(Scheme::Muscl)).unwrap();
        let v = moments(&tr.terminal()).unwrap().variance[0];
        let want = 0.25 * (2.0 * c).exp();
        assert!((v - want).abs() < 5e-3 * want, "{v} vs {want}");
    }

    #[test]
    fn mass_balance_is_exact() {
        let (_, t, rho0) = setup(64, 32);
        let drift = DriftSpec::new(A0::Zero, ControlPath::constant(&t, &[6.0], &[0.3]));
        for scheme in [Scheme::Upwind, Scheme::Muscl] {
            let tr = solve_forward(&rho0, &drift, &Source::Zero, &t, &ForwardOptions::with_scheme(scheme)).unwrap();
            let d = tr.diagnostics();
            assert!(tr.total_outflow() > 1e-3);
            for w in d.windows(2) {
                assert!((w[1].mass - w[0].mass + w[1].outflow).abs() < 1e-14);
            }
            assert!((tr.boundary_leak() - (d[0].mass - d[d.len() - 1].mass).abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn source_injects_mass() {
        let (_, t, rho0) = setup(128, 16);
        let drift = DriftSpec::new(A0::Zero, ControlPath::zeros(&t, 1));
        let src = Source::Gaussian { center: [0.0, 0.0], variance: 1.0, rate: 0.5 };
        let tr = solve_forward(&rho0, &drift, &src, &t, &ForwardOptions::default()).unwrap();
        let d = tr.diagnostics();
        assert!((d[d.len() - 1].mass - d[0].mass - 0.5).abs() < 1e-6);
        assert!(tr.boundary_leak() < 1e-13);
    }

    #[test]
    fn substepping_kicks_in_for_fast_drifts() {
        let (_, t, rho0) = setup(128, 4);
        let drift = DriftSpec::new(A0::Zero, ControlPath::constant(&t, &[0.0], &[2.0]));
        let tr = solve_forward(&rho0, &drift, &Source::Zero, &t, &ForwardOptions::default()).unwrap();
        assert!(tr.schedule().iter().all(|s| *s > 1));
        assert!(tr.diagnostics().iter().all(|d| d.min >= 0.0));
        let opts = ForwardOptions { max_substeps: 2, ..ForwardOptions::default() };
        assert!(matches!(
            solve_forward(&rho0, &drift, &Source::Zero, &t, &opts),
            Err(Error::CflUnderflow { cap: 2, .. })
        ));
    }

    #[test]
    fn checkpoint_replay_is_bit_identical() {
        let (_, t, rho0) = setup(64, 20);
        let ctrl = ControlPath::from_fn(&t, 1, |s| (vec![s.sin()], vec![0.3 * s]));
        let drift = DriftSpec::new(A0::GaussianBump { c: [0.4, 0.0], sigma: 1.0 }, ctrl);
        for scheme in [Scheme::Upwind, Scheme::Muscl] {
            let full = solve_forward(&rho0, &drift, &Source::Zero, &t, &ForwardOptions::with_scheme(scheme)).unwrap();
            let opts = ForwardOptions { memory_budget: 64 * 5, ..ForwardOptions::with_scheme(scheme) };
            let thin = solve_forward(&rho0, &drift, &Source::Zero, &t, &opts).unwrap();
            assert!(thin.stride() > 1);
            assert!(thin.stored_steps().len() < 21);
            let mut seen = 0;
            thin.for_each_state(|n, rho| {
                assert_eq!(rho, full.state(n).unwrap().values.as_slice());
                seen += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(seen, 21);
            assert_eq!(thin.state(13).unwrap().values, full.state(13).unwrap().values);
        }
    }

    #[test]
    fn two_dimensional_rotation_conserves() {
        let g = make_grid::<f64>(2, &[-5.0, -5.0], &[5.0, 5.0], &[48, 48]).unwrap();
        let t = TimeGrid::new(1.0, 20).unwrap();
        let rho0 = sample_function(&g, &DensityPreset::Gaussian { center: [1.0, 0.0], variance: 0.3 });
        let drift = DriftSpec::new(A0::Rotation { omega: 1.0 }, ControlPath::zeros(&t, 2));
        let tr = solve_forward(&rho0, &drift, &Source::Zero, &t, &ForwardOptions::with_scheme(Scheme::Muscl)).unwrap();
        let m = moments(&tr.terminal()).unwrap();
        let lost = tr.total_outflow();
        assert!((integrate(&tr.terminal()) - integrate(&rho0) + lost).abs() < 1e-13, "{lost}");
        assert!((m.mean[0] - 1f64.cos()).abs() < 2e-2 && (m.mean[1] - 1f64.sin()).abs() < 2e-2);
    }

    #[test]
    fn tangent_matches_difference_quotient() {
        let (_, t, rho0) = setup(128, 32);
        let ctrl = ControlPath::from_fn(&t, 1, |s| (vec![0.3 * s], vec![0.2 - 0.1 * s]));
        let dir = ControlPath::from_fn(&t, 1, |s| (vec![1.0 - s], vec![0.5 * s]));
        for scheme in [Scheme::Upwind, Scheme::Muscl] {
            let drift = DriftSpec::new(A0::GaussianBump { c: [0.5, 0.0], sigma: 1.5 }, ctrl.clone());
            let opts = ForwardOptions::with_scheme(scheme);
            let tan = solve_tangent(&rho0, &drift, &Source::Zero, &dir, &t, &opts).unwrap();
            let frozen = opts.frozen(tan.base.schedule());
            let eps = 1e-6;
            let plus = DriftSpec::new(drift.a0.clone(), ctrl.axpy(eps, &dir));
            let minus = DriftSpec::new(drift.a0.clone(), ctrl.axpy(-eps, &dir));
            let rp = solve_forward(&rho0, &plus, &Source::Zero, &t, &frozen).unwrap().terminal();
            let rm = solve_forward(&rho0, &minus, &Source::Zero, &t, &frozen).unwrap().terminal();
            let s = &tan.sigma[32];
            let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..s.len() {
                let fd = (rp.values[i] - rm.values[i]) / (2.0 * eps);
                assert!((fd - s[i]).abs() < 1e-6 * scale, "{scheme:?} cell {i}: {fd} vs {}", s[i]);
            }
        }
    }

    #[test]
    fn energy_decay_under_constant_divergence() {
        let (_, t, rho0) = setup(256, 128);
        let c = 0.6;
        let drift = DriftSpec::new(A0::Zero, ControlPath::constant(&t, &[0.0], &[c]));
        let tr = solve_forward(&rho0, &drift, &Source::Zero, &t, &ForwardOptions::default()).unwrap();
        let cert = energy_certificate(&tr, &Source::Zero, 0, 0, 2.0).unwrap();
        assert!(cert.pass);
        assert!(cert.fitted_c <= 0.5 + 1e-9);
        let exact = cert.norms[0] * (-c / 2.0).exp();
        let last = cert.norms[cert.norms.len() - 1];
        assert!(last <= exact * (1.0 + 1e-3));
        assert!(last >= exact * 0.97);
    }

    #[test]
    fn single_precision_forward() {
        let g = make_grid::<f32>(1, &[-8.0], &[8.0], &[64]).unwrap();
        let t = TimeGrid::new(1.0f32, 16).unwrap();
        let rho0 = sample_function(&g, &DensityPreset::Gaussian { center: [0.0, 0.0], variance: 1.0 });
        let drift = DriftSpec::new(A0::Zero, ControlPath::constant(&t, &[0.5], &[0.1]));
        let tr = solve_forward(&rho0, &drift, &Source::Zero, &t, &ForwardOptions::default()).unwrap();
        assert!((tr.diagnostics()[16].mass - 1.0).abs() < 1e-5);
    }
}
