//! Pipeline configuration: a TOML file with a canonical serialization.
//!
//! The canonical form is a fixpoint — loading a config and re-serializing
//! it always yields the same bytes, and the run id is derived from the
//! digest of that form, so a run can detect config drift on resume.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::categories;
use crate::cpr::Pattern;
use crate::rational::Rational;
use crate::store::sha256_hex;

/// Which model role an endpoint serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Proposer,
    Solver,
    Judge,
    Vqa,
    CycleJudge,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Proposer,
        Role::Solver,
        Role::Judge,
        Role::Vqa,
        Role::CycleJudge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Proposer => "proposer",
            Role::Solver => "solver",
            Role::Judge => "judge",
            Role::Vqa => "vqa",
            Role::CycleJudge => "cycle_judge",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Mock,
}

/// Tunables for the deterministic in-process mock backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockOptions {
    /// Seed for the mock's pure response function; defaults to the master seed.
    pub mock_seed: Option<u64>,
    /// Fraction of embedded image facts the mock VQA is able to recall, in [0,1].
    pub fidelity: f64,
    /// Artificial per-request latency, for concurrency tests.
    pub latency_ms: u64,
    /// Fraction of judge completions emitted malformed (request-hash keyed).
    pub malform_fraction: f64,
    /// Image generation fails permanently when the prompt contains this marker.
    pub fail_prompt_contains: Option<String>,
    /// Degenerate proposer: every completion is the same text.
    pub always_same_completion: bool,
}

impl Default for MockOptions {
    fn default() -> Self {
        MockOptions {
            mock_seed: None,
            fidelity: 1.0,
            latency_ms: 0,
            malform_fraction: 0.0,
            fail_prompt_contains: None,
            always_same_completion: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub backend: BackendKind,
    #[serde(default)]
    pub base_url: String,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockOptions>,
}

fn default_model_name() -> String {
    "mock-umm".into()
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub master_seed: u64,
    pub rollouts_per_prompt: usize,
    pub judge_threshold: Rational,
    pub reflection_min_gap: Rational,
    pub prompts_per_category: usize,
    pub reseed_cadence: usize,
    pub reseed_demo_count: usize,
    pub parallelism: usize,
    /// Category ids to run; defaults to the full registry.
    pub categories: Vec<String>,
    pub mixture_targets: BTreeMap<Pattern, usize>,
    /// Groups dropped by the solver beyond this rate abort the stage.
    pub solver_failure_ceiling: Rational,
    /// Benchmark instances file for the cycle stage.
    pub benchmark_path: Option<String>,
    pub endpoints: BTreeMap<Role, EndpointConfig>,
}

pub fn default_mixture_targets() -> BTreeMap<Pattern, usize> {
    BTreeMap::from([
        (Pattern::Generation, 5000),
        (Pattern::Caption, 5000),
        (Pattern::Judgement, 3000),
        (Pattern::Reflection, 1000),
    ])
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            master_seed: 0,
            rollouts_per_prompt: 8,
            judge_threshold: Rational::int(7),
            reflection_min_gap: Rational::int(2),
            prompts_per_category: 500,
            reseed_cadence: 20,
            reseed_demo_count: 3,
            parallelism: 4,
            categories: categories::registry().iter().map(|c| c.id.into()).collect(),
            mixture_targets: default_mixture_targets(),
            solver_failure_ceiling: Rational::new(1, 20),
            benchmark_path: None,
            endpoints: BTreeMap::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rollouts_per_prompt < 2 {
            return Err(invalid(
                "rollouts_per_prompt must be >= 2 (reflection mining needs two candidates)",
            ));
        }
        let zero = Rational::zero();
        let ten = Rational::int(10);
        if self.judge_threshold < zero || self.judge_threshold > ten {
            return Err(invalid("judge_threshold must lie in [0, 10]"));
        }
        if self.reflection_min_gap < zero {
            return Err(invalid("reflection_min_gap must be >= 0"));
        }
        if self.prompts_per_category == 0 {
            return Err(invalid("prompts_per_category must be positive"));
        }
        if self.reseed_cadence == 0 || self.reseed_demo_count == 0 {
            return Err(invalid("reseed_cadence and reseed_demo_count must be positive"));
        }
        if self.parallelism == 0 {
            return Err(invalid("parallelism must be positive"));
        }
        if self.categories.is_empty() {
            return Err(invalid("categories must name at least one registry id"));
        }
        for id in &self.categories {
            categories::by_id(id).map_err(|e| invalid(e.to_string()))?;
        }
        for pattern in Pattern::ALL {
            match self.mixture_targets.get(&pattern) {
                Some(0) | None => {
                    return Err(invalid(format!(
                        "mixture_targets.{pattern} must be present and positive"
                    )));
                }
                Some(_) => {}
            }
        }
        if self.solver_failure_ceiling < zero || self.solver_failure_ceiling > Rational::one() {
            return Err(invalid("solver_failure_ceiling must lie in [0, 1]"));
        }
        for role in Role::ALL {
            let ep = self
                .endpoints
                .get(&role)
                .ok_or_else(|| invalid(format!("missing endpoint for role {role}")))?;
            if ep.timeout_secs == 0 {
                return Err(invalid(format!("endpoint {role}: timeout must be > 0")));
            }
            if ep.max_retries > 8 {
                return Err(invalid(format!("endpoint {role}: max_retries must be <= 8")));
            }
            if ep.max_in_flight == 0 {
                return Err(invalid(format!("endpoint {role}: max_in_flight must be >= 1")));
            }
            match ep.backend {
                BackendKind::Remote if ep.base_url.trim().is_empty() => {
                    return Err(invalid(format!("endpoint {role}: remote backend needs base_url")));
                }
                _ => {}
            }
            if let Some(mock) = &ep.mock {
                if !(0.0..=1.0).contains(&mock.fidelity) {
                    return Err(invalid(format!("endpoint {role}: mock fidelity must be in [0,1]")));
                }
                if !(0.0..=1.0).contains(&mock.malform_fraction) {
                    return Err(invalid(format!(
                        "endpoint {role}: mock malform_fraction must be in [0,1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical serialization; a fixpoint under load + serialize.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex digest of the canonical form; identifies the run.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_canonical_toml().as_bytes())
    }

    pub fn endpoint(&self, role: Role) -> &EndpointConfig {
        self.endpoints
            .get(&role)
            .expect("validated config has all roles")
    }

    /// The selected categories, resolved against the registry in registry order.
    pub fn selected_categories(&self) -> Vec<&'static categories::CategorySpec> {
        categories::registry()
            .iter()
            .filter(|c| self.categories.iter().any(|id| id == c.id))
            .collect()
    }

    /// A fully mocked config, used by tests and offline runs.
    pub fn mock_default(master_seed: u64) -> Self {
        let mut cfg = PipelineConfig {
            master_seed,
            ..PipelineConfig::default()
        };
        for role in Role::ALL {
            cfg.endpoints.insert(
                role,
                EndpointConfig {
                    backend: BackendKind::Mock,
                    base_url: String::new(),
                    model_name: "mock-umm".into(),
                    timeout_secs: default_timeout(),
                    max_retries: default_retries(),
                    max_in_flight: default_in_flight(),
                    mock: Some(MockOptions::default()),
                },
            );
        }
        cfg
    }
}
