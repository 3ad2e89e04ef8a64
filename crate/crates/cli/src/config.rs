//! Run configuration: one JSON document per run, validated into core types.

use std::path::Path;

use curvedflat::algebra::{builtin_pair, CustomPairData, InvolutionSpec, SymmetricPair};
use curvedflat::convergence::{RATIO_BAND, RESIDUAL_FLOOR};
use curvedflat::dressing::{self, default_lambda_samples, LoopSpec, MAX_DEPTH};
use curvedflat::grid::Grid;
use curvedflat::linalg::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "CURVEDFLAT_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.to_string() }
}

/// A complex number written as `[re, im]`.
pub type ComplexJson = [f64; 2];
/// A square matrix written as rows of `[re, im]` entries.
pub type MatrixJson = Vec<Vec<ComplexJson>>;

fn to_complex(c: &ComplexJson) -> Complex64 {
    Complex64::new(c[0], c[1])
}

fn to_matrix(field: &str, m: &MatrixJson) -> Result<Mat, ConfigError> {
    let n = m.len();
    if n == 0 || m.iter().any(|row| row.len() != n) {
        return Err(invalid(field, "matrix must be square and non-empty"));
    }
    Ok(Mat::from_fn(n, n, |i, k| to_complex(&m[i][k])))
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pair: PairConfig,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default, rename = "loop")]
    pub loop_block: Option<LoopConfig>,
    #[serde(default)]
    pub flow: Option<FlowConfig>,
    #[serde(default)]
    pub verification: VerificationConfig,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub policy: Policy,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    Lenient,
    Strict,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    /// Builtin family name (`sun_son`), or a label for a custom pair.
    pub name: String,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub custom: Option<CustomPairConfig>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InvolutionConfig {
    pub conjugates: bool,
    pub transposes: bool,
    pub j: MatrixJson,
    pub sign: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CustomPairConfig {
    pub tau: InvolutionConfig,
    pub sigma: InvolutionConfig,
    pub basis_u0: Vec<MatrixJson>,
    pub basis_u1: Vec<MatrixJson>,
    pub basis_a: Vec<MatrixJson>,
    #[serde(default = "one")]
    pub form_normalization: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub extents: Vec<[f64; 2]>,
    pub points: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub poles: Vec<ComplexJson>,
    /// Defaults to the top-level seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "yes")]
    pub mirror: bool,
}

fn default_rank() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub b_index: usize,
    pub j: u32,
    pub t_range: [f64; 2],
    pub samples: usize,
    /// Grid for the flow family; defaults to the main grid.
    #[serde(default)]
    pub grid: Option<GridConfig>,
    /// Level `n` of the conserved density `(Q_{c,n}, a_i)`.
    #[serde(default = "default_density_level")]
    pub density_level: usize,
    /// Second flow for the commutation check; defaults to `(a_2, 5, −0.03)` (or `a_1` when `r = 1`).
    #[serde(default)]
    pub commute_with: Option<FlowTermConfig>,
}

fn default_density_level() -> usize {
    2
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTermConfig {
    pub b_index: usize,
    pub j: u32,
    pub t: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub lambda_samples: Option<Vec<ComplexJson>>,
    /// Deepest `Q` level whose recursion, closedness and generation are checked.
    pub depth: usize,
    /// Depth of the `[Q_{a₁}, Q_{a₂}]` coefficient check.
    pub coefficient_depth: usize,
    /// Repeat residuals on the refined grid and check the observed order.
    pub convergence: bool,
    /// λ step of the flat-abelian Richardson difference.
    pub delta: f64,
    pub tolerances: Tolerances,
    pub tamper: Option<TamperConfig>,
    pub eds_samples: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            lambda_samples: None,
            depth: 4,
            coefficient_depth: 6,
            convergence: true,
            delta: 1e-2,
            tolerances: Tolerances::default(),
            tamper: None,
            eds_samples: 20,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub algebra: f64,
    /// Product identity, entirety, reality, parity and coefficient residuals.
    pub exact: f64,
    pub sigma: f64,
    /// Absolute bound on finite-difference residuals when the convergence study is off.
    pub residual: f64,
    pub ratio_band: [f64; 2],
    pub floor: f64,
    /// `C` in the conserved-quantity allowance `C·(h⁴ + h_t⁴)`.
    pub drift_constant: f64,
    /// Relative signed flux balance of the conserved integral.
    pub balance: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            algebra: 1e-12,
            exact: 1e-9,
            sigma: 1e-8,
            residual: 1e-5,
            ratio_band: [RATIO_BAND.0, RATIO_BAND.1],
            floor: RESIDUAL_FLOOR,
            drift_constant: 1.0,
            balance: 1e-4,
        }
    }
}

/// Adds `amount` times the first basis vector of `𝒰₁ ∩ 𝒜⊥` to `v` at the grid point
/// nearest `point`, on every grid the check uses.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TamperConfig {
    pub point: Vec<f64>,
    pub amount: f64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// Checks every block that is present; the builders below can then only fail on
    /// numerical grounds.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let pair = self.pair()?;
        if let Some(g) = &self.grid {
            build_grid("grid", g)?;
        }
        if let Some(l) = &self.loop_block {
            if l.poles.is_empty() {
                return Err(invalid("loop.poles", "at least one pole is required"));
            }
            if l.rank == 0 || l.rank >= pair.n() {
                return Err(invalid("loop.rank", format!("must lie in 1..{}", pair.n())));
            }
        }
        if let Some(f) = &self.flow {
            if f.b_index >= pair.rank() {
                return Err(invalid("flow.b_index", format!("pair has rank {}", pair.rank())));
            }
            if f.j % 2 == 0 || f.j < 3 {
                return Err(invalid("flow.j", "j must be odd and at least 3"));
            }
            if f.samples < 5 || f.samples % 2 == 0 {
                return Err(invalid("flow.samples", "need an odd count of at least 5"));
            }
            if !(f.t_range[0] < f.t_range[1]) {
                return Err(invalid("flow.t_range", "expected [t0, t1] with t0 < t1"));
            }
            if let Some(g) = &f.grid {
                build_grid("flow.grid", g)?;
            } else if self.grid.is_none() {
                return Err(invalid("flow.grid", "no flow grid and no main grid"));
            }
            if f.density_level + f.j as usize > MAX_DEPTH {
                return Err(invalid("flow.density_level", format!("density_level + j exceeds {MAX_DEPTH}")));
            }
            if let Some(c) = &f.commute_with {
                if c.b_index >= pair.rank() {
                    return Err(invalid("flow.commute_with.b_index", format!("pair has rank {}", pair.rank())));
                }
                if c.j % 2 == 0 || c.j < 3 {
                    return Err(invalid("flow.commute_with.j", "j must be odd and at least 3"));
                }
            }
        }
        let v = &self.verification;
        if v.depth + 1 > MAX_DEPTH || v.coefficient_depth > MAX_DEPTH {
            return Err(invalid("verification.depth", format!("depth bound is {MAX_DEPTH}")));
        }
        if !(v.delta > 0.0) {
            return Err(invalid("verification.delta", "must be positive"));
        }
        if let Some(t) = &v.tamper {
            let r = self.grid.as_ref().map_or(0, |g| g.points.len());
            if t.point.len() != r {
                return Err(invalid("verification.tamper.point", format!("expected {r} coordinates")));
            }
        }
        let band = v.tolerances.ratio_band;
        if !(band[0] > 0.0 && band[0] < band[1]) {
            return Err(invalid("verification.tolerances.ratio_band", "expected [low, high] with 0 < low < high"));
        }
        Ok(())
    }

    pub fn pair(&self) -> Result<SymmetricPair, ConfigError> {
        match &self.pair.custom {
            None => {
                let n = self.pair.n.ok_or_else(|| invalid("pair.n", "builtin pairs need n"))?;
                builtin_pair(&self.pair.name, n).map_err(|e| invalid("pair", e))
            }
            Some(c) => {
                let inv = |field: &str, i: &InvolutionConfig| -> Result<InvolutionSpec, ConfigError> {
                    InvolutionSpec::new(i.conjugates, i.transposes, to_matrix(&format!("{field}.j"), &i.j)?, i.sign)
                        .map_err(|e| invalid(field, e))
                };
                let mats = |field: &str, ms: &[MatrixJson]| -> Result<Vec<Mat>, ConfigError> {
                    ms.iter().enumerate().map(|(k, m)| to_matrix(&format!("{field}[{k}]"), m)).collect()
                };
                let data = CustomPairData {
                    name: self.pair.name.clone(),
                    tau: inv("pair.custom.tau", &c.tau)?,
                    sigma: inv("pair.custom.sigma", &c.sigma)?,
                    basis_u0: mats("pair.custom.basis_u0", &c.basis_u0)?,
                    basis_u1: mats("pair.custom.basis_u1", &c.basis_u1)?,
                    basis_a: mats("pair.custom.basis_a", &c.basis_a)?,
                    form_normalization: c.form_normalization,
                };
                SymmetricPair::custom(data).map_err(|e| invalid("pair.custom", e))
            }
        }
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        let g = self.grid.as_ref().ok_or_else(|| invalid("grid", "this command needs a grid block"))?;
        build_grid("grid", g)
    }

    pub fn flow_grid(&self) -> Result<Grid, ConfigError> {
        match self.flow.as_ref().and_then(|f| f.grid.as_ref()) {
            Some(g) => build_grid("flow.grid", g),
            None => self.grid(),
        }
    }

    /// `None` when no loop block is given (the vacuum, `f = I`).
    pub fn loop_spec(&self) -> Option<LoopSpec> {
        self.loop_block.as_ref().map(|l| LoopSpec {
            poles: l.poles.iter().map(to_complex).collect(),
            seed: l.seed.unwrap_or(self.seed),
            rank: l.rank,
            mirror: l.mirror,
        })
    }

    pub fn reality_loop(&self, pair: &SymmetricPair) -> Result<dressing::RealityLoop, dressing::DressingError> {
        match self.loop_spec() {
            Some(spec) => dressing::make_reality_loop(&spec, pair),
            None => Ok(dressing::RealityLoop::identity(pair.n())),
        }
    }

    pub fn lambda_samples(&self) -> Vec<Complex64> {
        match &self.verification.lambda_samples {
            Some(s) => s.iter().map(to_complex).collect(),
            None => default_lambda_samples(),
        }
    }

    pub fn strict(&self) -> bool {
        self.policy == Policy::Strict
    }
}

fn build_grid(field: &str, g: &GridConfig) -> Result<Grid, ConfigError> {
    if g.extents.len() != g.points.len() {
        return Err(invalid(format!("{field}.points"), "one point count per extent is required"));
    }
    let extents: Vec<(f64, f64)> = g.extents.iter().map(|e| (e[0], e[1])).collect();
    Grid::new(&extents, &g.points).map_err(|e| invalid(field, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{ "pair": { "name": "sun_son", "n": 3 } }"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.pair().unwrap().n(), 3);
        assert!(cfg.loop_spec().is_none());
        assert_eq!(cfg.verification.depth, 4);
        assert!(!cfg.strict());
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = RunConfig::from_json("{\n  \"pair\": { \"name\": \"sun_son\", \"n\": 3, }\n}").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        let err = RunConfig::from_json(r#"{ "pair": { "name": "sun_son", "n": 3 }, "gird": {} }"#).unwrap_err();
        assert!(err.to_string().contains("gird"));
    }

    #[test]
    fn validation_names_the_field() {
        let even = r#"{ "pair": { "name": "sun_son", "n": 3 },
            "grid": { "extents": [[-1, 1], [-1, 1]], "points": [16, 17] } }"#;
        assert!(matches!(RunConfig::from_json(even), Err(ConfigError::Invalid { field, .. }) if field == "grid"));
        let even_j = r#"{ "pair": { "name": "sun_son", "n": 3 },
            "grid": { "extents": [[-1, 1], [-1, 1]], "points": [17, 17] },
            "flow": { "b_index": 0, "j": 4, "t_range": [-0.1, 0.1], "samples": 9 } }"#;
        assert!(matches!(RunConfig::from_json(even_j), Err(ConfigError::Invalid { field, .. }) if field == "flow.j"));
        let unknown = r#"{ "pair": { "name": "sp_n", "n": 3 } }"#;
        assert!(matches!(RunConfig::from_json(unknown), Err(ConfigError::Invalid { field, .. }) if field == "pair"));
    }
}
