//! JSON run configuration: strict schema, defaults and conversion into a
//! [`Problem`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::drift::{BoxBounds, ControlPath, CostSpec, Potential, TrackPath, A0};
use crate::error::{Error, Result};
use crate::forward::{ForwardOptions, Scheme, Source};
use crate::grid::{make_grid, sample_function, DensityPreset, GridSpec, TimeGrid};
use crate::optimizer::OptimConfig;
use crate::reduced::{make_problem, Problem};

fn schema(key: &str, message: impl Into<String>) -> Error {
    Error::Schema { key: key.to_string(), message: message.into() }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(rename = "T")]
    pub t_final: f64,
    pub nt: usize,
}

/// Named preset with a flat parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetConfig {
    pub preset: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl PresetConfig {
    fn zero() -> Self {
        Self { preset: "zero".into(), params: Vec::new() }
    }
}

/// `zero`, `gaussian-well`, `quadratic` or `tracking` (the path comes from
/// `cost.track_path`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub preset: String,
    #[serde(default)]
    pub center: Vec<f64>,
    #[serde(default = "one")]
    pub weight: f64,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self { preset: "zero".into(), center: Vec::new(), weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub gamma: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub nu: f64,
    #[serde(default)]
    pub theta: PotentialConfig,
    #[serde(default)]
    pub phi: PotentialConfig,
    /// Rows `[t, x_1, .., x_d]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_path: Option<Vec<Vec<f64>>>,
}

/// Missing sides are unbounded.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ua: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ub: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub max_iters: usize,
    pub step0: f64,
    pub c1: f64,
    pub backtrack: f64,
    pub vi_tol: f64,
    pub seeds: Vec<u64>,
}

impl Default for OptimSection {
    fn default() -> Self {
        let d = OptimConfig::<f64>::default();
        Self { max_iters: d.max_iters, step0: d.step0, c1: d.c1, backtrack: d.backtrack, vi_tol: d.vi_tol, seeds: d.seeds }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write every `stride`-th state snapshot.
    pub stride: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), stride: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Constants {
    #[serde(rename = "C_universal")]
    pub c_universal: f64,
    #[serde(rename = "C_cert")]
    pub c_cert: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self { c_universal: 1.0, c_cert: 2.0 }
    }
}

/// Initial or evaluation control: constant values, or a CSV file written by
/// a previous run (`t,u1_..,u2_..`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u1: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u2: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

fn default_scheme() -> String {
    Scheme::Upwind.name().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub rho0: PresetConfig,
    #[serde(default = "PresetConfig::zero")]
    pub source: PresetConfig,
    #[serde(default = "PresetConfig::zero")]
    pub a0: PresetConfig,
    pub cost: CostConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub constants: Constants,
    /// `upwind-fv` or `muscl-fv`.
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default)]
    pub control: ControlConfig,
}

/// Strict parse followed by semantic validation.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        schema(&key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_config(&text)
}

fn point(v: &[f64], dim: usize, key: &str) -> Result<[f64; 2]> {
    if v.len() != dim {
        return Err(schema(key, format!("expected {dim} coordinates, got {}", v.len())));
    }
    let mut p = [0.0; 2];
    p[..dim].copy_from_slice(v);
    Ok(p)
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_spec()?;
        self.time_grid()?;
        self.scheme()?;
        self.rho0_preset()?;
        self.source()?;
        self.a0()?;
        self.cost_spec()?;
        self.box_bounds()?;
        self.optim_config()?;
        if self.output.stride == 0 {
            return Err(schema("output.stride", "must be >= 1"));
        }
        if !(self.constants.c_universal > 0.0) || !(self.constants.c_cert > 0.0) {
            return Err(schema("constants", "constants must be > 0"));
        }
        if self.control.csv.is_some() && (self.control.u1.is_some() || self.control.u2.is_some()) {
            return Err(schema("control", "give either `csv` or constant `u1`/`u2`, not both"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn grid_spec(&self) -> Result<GridSpec<f64>> {
        make_grid(self.grid.dim, &self.grid.lo, &self.grid.hi, &self.grid.n).map_err(|e| schema("grid", e.to_string()))
    }

    pub fn time_grid(&self) -> Result<TimeGrid<f64>> {
        TimeGrid::new(self.time.t_final, self.time.nt).map_err(|e| schema("time", e.to_string()))
    }

    pub fn scheme(&self) -> Result<Scheme> {
        self.scheme.parse().map_err(|_| schema("scheme", format!("unknown scheme `{}` (upwind-fv, muscl-fv)", self.scheme)))
    }

    pub fn rho0_preset(&self) -> Result<DensityPreset<f64>> {
        DensityPreset::from_name(&self.rho0.preset, &self.rho0.params, self.dim()).map_err(|e| schema("rho0", e.to_string()))
    }

    pub fn source(&self) -> Result<Source<f64>> {
        Source::from_name(&self.source.preset, &self.source.params, self.dim()).map_err(|e| schema("source", e.to_string()))
    }

    pub fn a0(&self) -> Result<A0<f64>> {
        A0::from_name(&self.a0.preset, &self.a0.params, self.dim()).map_err(|e| schema("a0", e.to_string()))
    }

    fn potential(&self, p: &PotentialConfig, key: &str) -> Result<Potential<f64>> {
        let dim = self.dim();
        let center = |k: &str| {
            if p.center.is_empty() {
                Ok([0.0; 2])
            } else {
                point(&p.center, dim, k)
            }
        };
        Ok(match p.preset.as_str() {
            "zero" => Potential::Zero,
            "gaussian-well" => Potential::GaussianWell { center: center(&format!("{key}.center"))?, weight: p.weight },
            "quadratic" => Potential::Quadratic { center: center(&format!("{key}.center"))?, weight: p.weight },
            "tracking" => {
                let rows = self
                    .cost
                    .track_path
                    .as_ref()
                    .ok_or_else(|| schema("cost.track_path", "required by the tracking preset"))?;
                let mut nodes = Vec::with_capacity(rows.len());
                for row in rows {
                    if row.len() != dim + 1 {
                        return Err(schema("cost.track_path", format!("rows must be [t, x_1..x_{dim}]")));
                    }
                    nodes.push((row[0], point(&row[1..], dim, "cost.track_path")?));
                }
                let path = TrackPath::new(nodes).map_err(|e| schema("cost.track_path", e.to_string()))?;
                Potential::Tracking { weight: p.weight, path }
            }
            other => return Err(schema(&format!("{key}.preset"), format!("unknown potential `{other}`"))),
        })
    }

    pub fn cost_spec(&self) -> Result<CostSpec<f64>> {
        let c = &self.cost;
        if !(c.gamma > 0.0 && c.delta >= 0.0 && c.nu >= 0.0) {
            let key = if !(c.gamma > 0.0) {
                "cost.gamma"
            } else if !(c.delta >= 0.0) {
                "cost.delta"
            } else {
                "cost.nu"
            };
            return Err(schema(key, format!("assumption γ>0, δ≥0, ν≥0 violated (gamma = {}, delta = {}, nu = {})", c.gamma, c.delta, c.nu)));
        }
        let theta = self.potential(&c.theta, "cost.theta")?;
        let phi = self.potential(&c.phi, "cost.phi")?;
        CostSpec::new(c.gamma, c.delta, c.nu, theta, phi).map_err(|e| schema("cost", e.to_string()))
    }

    pub fn box_bounds(&self) -> Result<BoxBounds<f64>> {
        let comps = 2 * self.dim();
        let side = |v: &Option<Vec<f64>>, fill: f64, key: &str| -> Result<Vec<f64>> {
            match v {
                None => Ok(vec![fill; comps]),
                Some(v) if v.len() == 1 => Ok(vec![v[0]; comps]),
                Some(v) if v.len() == comps => Ok(v.clone()),
                Some(v) => Err(schema(key, format!("expected 1 or {comps} values, got {}", v.len()))),
            }
        };
        let ua = side(&self.bounds.ua, f64::NEG_INFINITY, "bounds.ua")?;
        let ub = side(&self.bounds.ub, f64::INFINITY, "bounds.ub")?;
        BoxBounds::new(ua, ub).map_err(|e| schema("bounds", e.to_string()))
    }

    pub fn optim_config(&self) -> Result<OptimConfig<f64>> {
        let o = &self.optim;
        let cfg = OptimConfig {
            max_iters: o.max_iters,
            step0: o.step0,
            c1: o.c1,
            backtrack: o.backtrack,
            vi_tol: o.vi_tol,
            seeds: o.seeds.clone(),
            ..OptimConfig::default()
        };
        cfg.validate().map_err(|e| schema("optim", e.to_string()))?;
        Ok(cfg)
    }

    pub fn problem(&self) -> Result<Problem<f64>> {
        let grid = self.grid_spec()?;
        let rho0 = sample_function(&grid, &self.rho0_preset()?);
        let mut p = make_problem(rho0, self.time_grid()?, self.a0()?, self.cost_spec()?, self.box_bounds()?);
        p.source = self.source()?;
        p.forward = ForwardOptions::with_scheme(self.scheme()?);
        Ok(p)
    }

    /// Control from the `control` section (zero when absent).
    pub fn control(&self, base_dir: &Path) -> Result<ControlPath<f64>> {
        let time = self.time_grid()?;
        let d = self.dim();
        if let Some(csv) = &self.control.csv {
            let path = if csv.is_absolute() { csv.clone() } else { base_dir.join(csv) };
            let file = std::fs::File::open(&path)
                .map_err(|e| Error::Io { path: path.display().to_string(), message: e.to_string() })?;
            return ControlPath::read_csv(std::io::BufReader::new(file), &time, d);
        }
        let comp = |v: &Option<Vec<f64>>, key: &str| -> Result<Vec<f64>> {
            match v {
                None => Ok(vec![0.0; d]),
                Some(v) if v.len() == d => Ok(v.clone()),
                Some(v) => Err(schema(key, format!("expected {d} values, got {}", v.len()))),
            }
        };
        Ok(ControlPath::constant(&time, &comp(&self.control.u1, "control.u1")?, &comp(&self.control.u2, "control.u2")?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"{
        "grid": {"dim": 1, "lo": [-8], "hi": [8], "n": [64]},
        "time": {"T": 1, "nt": 16},
        "rho0": {"preset": "gaussian", "params": [0, 0.5]},
        "cost": {"gamma": 0.1}
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MIN).unwrap();
        assert_eq!(c.scheme, "upwind-fv");
        assert_eq!(c.a0.preset, "zero");
        assert_eq!(c.optim.seeds.len(), 5);
        assert_eq!(c.constants.c_cert, 2.0);
        let p = c.problem().unwrap();
        assert_eq!(p.grid.n()[0], 64);
        assert!(p.bounds.upper()[0].is_infinite());
    }

    #[test]
    fn round_trip() {
        let c = parse_config(MIN).unwrap();
        assert_eq!(parse_config(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MIN.replace("\"gamma\"", "\"gamm\"");
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("gamm"), "{err}");
        let text = MIN.replace("\"cost\"", "\"extra\": 1, \"cost\"");
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn gamma_must_be_positive() {
        let text = MIN.replace("\"gamma\": 0.1", "\"gamma\": 0");
        let err = parse_config(&text).unwrap_err();
        match &err {
            Error::Schema { key, message } => {
                assert_eq!(key, "cost.gamma");
                assert!(message.contains("γ>0, δ≥0, ν≥0"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tracking_needs_path() {
        let text = MIN.replace("\"gamma\": 0.1", "\"gamma\": 0.1, \"theta\": {\"preset\": \"tracking\"}");
        assert!(matches!(parse_config(&text), Err(Error::Schema { key, .. }) if key == "cost.track_path"));
        let text = MIN.replace(
            "\"gamma\": 0.1",
            "\"gamma\": 0.1, \"theta\": {\"preset\": \"tracking\"}, \"track_path\": [[0, 0], [1, 0.6]]",
        );
        assert!(parse_config(&text).unwrap().cost_spec().unwrap().theta.is_time_dependent());
    }

    #[test]
    fn bad_presets_and_lengths() {
        assert!(parse_config(&MIN.replace("\"gaussian\"", "\"gauss\"")).is_err());
        assert!(parse_config(&MIN.replace("\"n\": [64]", "\"n\": [64, 64]")).is_err());
        let text = MIN.replace("\"cost\"", "\"bounds\": {\"ua\": [-1, -1, -1]}, \"cost\"");
        assert!(matches!(parse_config(&text), Err(Error::Schema { key, .. }) if key == "bounds.ua"));
        assert!(parse_config(&MIN.replace("\"cost\"", "\"scheme\": \"weno\", \"cost\"")).is_err());
    }

    #[test]
    fn constant_control() {
        let text = MIN.replace("\"cost\"", "\"control\": {\"u1\": [0.5]}, \"cost\"");
        let c = parse_config(&text).unwrap();
        let u = c.control(Path::new(".")).unwrap();
        assert_eq!(u.node(3), &[0.5, 0.0]);
    }
}
