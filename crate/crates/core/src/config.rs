//! Experiment configuration (JSON).
//!
//! ```json
//! {
//!   "system": { "example": "one" },
//!   "sigma_w2": 0.5,
//!   "cost": { "q": [[1,0,0],[0,1,0],[0,0,1]], "r": [[10,0],[0,1]] },
//!   "horizon": 100,
//!   "id_protocol": { "n_rollouts": 100, "rollout_len": 5, "sigma_u2": 1.0 },
//!   "delta": 0.05,
//!   "seed": 0
//! }
//! ```
//!
//! `system` is one of `{"example": "one" | "two"}`,
//! `{"matrices": {"a": [[..]], "b": [[..]]}}` or
//! `{"random": {"n_x": 3, "n_u": 2, "rho_min": 0.5, "rho_max": 0.95}}`.
//! Unknown fields are rejected.

use crate::evaluation::CostMatrices;
use crate::experiments::{random_stable_plant, DesignSettings};
use crate::linalg::Matrix;
use crate::lti::{example_system_one, example_system_two, IdProtocol, LtiSystem, RngStream};
use crate::sdp::SolverSettings;
use crate::Error;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleSystem {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSource {
    Example(ExampleSystem),
    Matrices {
        #[serde(with = "crate::linalg::rows")]
        a: Matrix,
        #[serde(with = "crate::linalg::rows")]
        b: Matrix,
    },
    Random {
        n_x: usize,
        n_u: usize,
        #[serde(default = "default_rho_min")]
        rho_min: f64,
        #[serde(default = "default_rho_max")]
        rho_max: f64,
    },
}

fn default_rho_min() -> f64 {
    0.5
}

fn default_rho_max() -> f64 {
    0.95
}

fn default_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreCommitConfig {
    pub t_sw: Vec<usize>,
    pub n_realizations: usize,
}

impl Default for ExploreCommitConfig {
    fn default() -> Self {
        Self {
            t_sw: (1..20).map(|k| 5 * k).collect(),
            n_realizations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSource,
    pub sigma_w2: f64,
    pub cost: CostMatrices,
    pub horizon: usize,
    #[serde(default)]
    pub id_protocol: IdProtocol,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub explore_commit: ExploreCommitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSettings>,
}

/// Stream index for plant generation; experiments draw from index 0.
const PLANT_STREAM: u64 = 1;

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, Error> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("field `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("field `{field}`: {msg}")));
        if !(self.sigma_w2 >= 0.0 && self.sigma_w2.is_finite()) {
            return bad("sigma_w2", format!("must be finite and >= 0, got {}", self.sigma_w2));
        }
        if self.horizon < 2 {
            return bad("horizon", format!("must be >= 2, got {}", self.horizon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta", format!("must lie in (0, 1), got {}", self.delta));
        }
        let (n_x, n_u) = match &self.system {
            SystemSource::Example(_) => (3, 2),
            SystemSource::Matrices { a, b } => {
                if !a.is_square() || a.nrows() == 0 {
                    return bad("system.matrices.a", format!("must be square, got {}x{}", a.nrows(), a.ncols()));
                }
                if b.nrows() != a.nrows() || b.ncols() == 0 {
                    return bad(
                        "system.matrices.b",
                        format!("must have {} rows and >= 1 column, got {}x{}", a.nrows(), b.nrows(), b.ncols()),
                    );
                }
                (a.nrows(), b.ncols())
            }
            SystemSource::Random { n_x, n_u, rho_min, rho_max } => {
                if *n_x == 0 || *n_u == 0 {
                    return bad("system.random", "n_x and n_u must be >= 1".into());
                }
                if !(0.0 < *rho_min && rho_min <= rho_max && *rho_max < 1.0) {
                    return bad(
                        "system.random",
                        format!("need 0 < rho_min <= rho_max < 1, got [{rho_min}, {rho_max}]"),
                    );
                }
                (*n_x, *n_u)
            }
        };
        if self.cost.n_x() != n_x {
            return bad("cost.q", format!("must be {n_x}x{n_x}, got {0}x{0}", self.cost.n_x()));
        }
        if self.cost.n_u() != n_u {
            return bad("cost.r", format!("must be {n_u}x{n_u}, got {0}x{0}", self.cost.n_u()));
        }
        let idp = &self.id_protocol;
        if idp.n_rollouts == 0 {
            return bad("id_protocol.n_rollouts", "must be >= 1".into());
        }
        if idp.rollout_len < 2 {
            return bad("id_protocol.rollout_len", format!("must be >= 2, got {}", idp.rollout_len));
        }
        if !(idp.sigma_u2 >= 0.0 && idp.sigma_u2.is_finite()) {
            return bad("id_protocol.sigma_u2", format!("must be finite and >= 0, got {}", idp.sigma_u2));
        }
        let ec = &self.explore_commit;
        if ec.n_realizations == 0 {
            return bad("explore_commit.n_realizations", "must be >= 1".into());
        }
        if let Some(t) = ec.t_sw.iter().find(|&&t| t <= 1 || t >= self.horizon) {
            return bad("explore_commit.t_sw", format!("{t} outside (1, {})", self.horizon));
        }
        if let Some(grid) = &self.p_grid {
            if grid.is_empty() || grid.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
                return bad("p_grid", "must be a nonempty list of positive numbers".into());
            }
        }
        if let Some(s) = &self.solver {
            s.validate().map_err(|e| Error::Config(format!("field `solver`: {e}")))?;
        }
        Ok(())
    }

    /// The true plant. Random plants are drawn from the config seed.
    pub fn system(&self) -> Result<LtiSystem, Error> {
        Ok(match &self.system {
            SystemSource::Example(ExampleSystem::One) => example_system_one(self.sigma_w2),
            SystemSource::Example(ExampleSystem::Two) => example_system_two(self.sigma_w2),
            SystemSource::Matrices { a, b } => LtiSystem::new(a.clone(), b.clone(), self.sigma_w2)?,
            SystemSource::Random { n_x, n_u, rho_min, rho_max } => {
                let mut rng = RngStream::new(self.seed, PLANT_STREAM);
                random_stable_plant(*n_x, *n_u, *rho_min, *rho_max, self.sigma_w2, &mut rng)?
            }
        })
    }

    pub fn rng(&self) -> RngStream {
        RngStream::new(self.seed, 0)
    }

    pub fn solver_settings(&self) -> SolverSettings {
        self.solver.unwrap_or_default()
    }

    pub fn design_settings(&self) -> DesignSettings {
        DesignSettings {
            p_grid: self.p_grid.clone(),
            solver: self.solver_settings(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "system": {"example": "one"},
        "sigma_w2": 0.5,
        "cost": {"q": [[1,0,0],[0,1,0],[0,0,1]], "r": [[10,0],[0,1]]},
        "horizon": 100
    }"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_json_str(BASE).unwrap();
        assert_eq!(cfg.id_protocol, IdProtocol::default());
        assert_eq!(cfg.delta, 0.05);
        assert_eq!(cfg.system().unwrap(), example_system_one(0.5));
    }

    #[test]
    fn missing_noise_names_field() {
        let text = BASE.replace("\"sigma_w2\": 0.5,", "");
        let err = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("sigma_w2"), "{err}");
    }

    #[test]
    fn unknown_and_bad_fields_are_located() {
        let text = BASE.replace("\"horizon\": 100", "\"horizon\": 100, \"horizn\": 3");
        let err = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("horizn") && err.contains("line"), "{err}");

        let text = BASE.replace("\"r\": [[10,0],[0,1]]", "\"r\": [[10,0],[0,-1]]");
        let err = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("cost"), "{err}");

        let text = BASE.replace("[[10,0],[0,1]]", "[[1]]");
        let err = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("cost.r"), "{err}");

        let text = BASE.replace("\"horizon\": 100", "\"horizon\": 100, \"explore_commit\": {\"t_sw\": [100], \"n_realizations\": 3}");
        let err = ExperimentConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(err.contains("explore_commit.t_sw"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let mut cfg = ExperimentConfig::from_json_str(BASE).unwrap();
        cfg.system = SystemSource::Random { n_x: 3, n_u: 2, rho_min: 0.6, rho_max: 0.9 };
        cfg.p_grid = Some(vec![0.1, 1.0]);
        let back = ExperimentConfig::from_json_str(&cfg.to_json_string().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.system().unwrap(), back.system().unwrap());
    }
}
