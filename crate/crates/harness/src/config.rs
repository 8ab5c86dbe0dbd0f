//! Experiment configuration, loaded from TOML or JSON.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::oracle::OracleConfig;

/// Version of the emitted CSV/JSON schemas.
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ToyStability,
    Geometry,
    Steering,
    Framework,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::ToyStability => "toy-stability",
            ExperimentKind::Geometry => "geometry",
            ExperimentKind::Steering => "steer",
            ExperimentKind::Framework => "framework",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyStabilityConfig {
    pub dims: Vec<usize>,
    pub n_inputs: usize,
    /// Concept changes at which the oracle direction is compared.
    pub rho_grid: Vec<f64>,
    /// Concept change for the KL ratio.
    pub rho_ratio: f64,
    /// Inputs are `N(0, input_scale² I)`.
    pub input_scale: f64,
    /// Curvature probes for the critical radius.
    pub curvature_probes: usize,
    pub oracle: OracleConfig,
    pub min_median_cosine: f64,
    pub min_median_ratio: f64,
    pub min_spearman_r: f64,
    pub max_spearman_p: f64,
    /// Affine models in the `1 − cos` versus `ρ` slope sweep; 0 skips it.
    pub slope_models: usize,
    pub slope_dim: usize,
    pub slope_rho: (f64, f64),
    pub slope_points: usize,
    pub min_slope: f64,
}

impl Default for ToyStabilityConfig {
    fn default() -> Self {
        Self {
            dims: vec![4, 8, 16],
            n_inputs: 300,
            rho_grid: vec![0.01, 0.03, 0.1, 0.3, 1.0],
            rho_ratio: 0.1,
            input_scale: 1.0,
            curvature_probes: 16,
            oracle: OracleConfig::default(),
            min_median_cosine: 0.99,
            min_median_ratio: 1.3,
            min_spearman_r: 0.2,
            max_spearman_p: 0.01,
            slope_models: 20,
            slope_dim: 8,
            slope_rho: (1e-3, 1e-1),
            slope_points: 9,
            min_slope: 1.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub dims: Vec<usize>,
    pub layers: usize,
    pub hidden_mult: usize,
    pub vocab_mult: usize,
    pub n_inputs: usize,
    /// Number of independently drawn networks per width.
    pub n_nets: usize,
    pub weight_scale: f64,
    pub jitter: f64,
    pub input_scale: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            dims: vec![16],
            layers: 6,
            hidden_mult: 2,
            vocab_mult: 4,
            n_inputs: 20,
            n_nets: 5,
            weight_scale: 0.3,
            jitter: 0.1,
            input_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringExperimentConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden_mult: usize,
    pub vocab: usize,
    pub layer: usize,
    pub n_pairs: usize,
    pub n_contexts: usize,
    /// Contrastive contexts per class for the CAA/ActAdd/ITI directions.
    pub n_contrast: usize,
    /// Concept regimes to run. `decomposable` pairs share one difference
    /// vector; `heterogeneous` pairs do not. Thresholds apply to the
    /// decomposable regime only.
    pub regimes: Vec<ConceptRegime>,
    pub weight_scale: f64,
    pub jitter: f64,
    pub input_scale: f64,
    pub reg_constant: f64,
    pub max_steps: usize,
    pub targets: Vec<f64>,
    pub bisection_tol: f64,
    /// Sign-probe step as a fraction of `η`.
    pub sign_probe_fraction: f64,
    pub calibration_window: (f64, f64),
    pub min_contexts: usize,
    pub max_binomial_p: f64,
}

impl Default for SteeringExperimentConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            layers: 4,
            hidden_mult: 2,
            vocab: 64,
            layer: 1,
            n_pairs: 4,
            n_contexts: 60,
            n_contrast: 16,
            regimes: vec![ConceptRegime::Decomposable, ConceptRegime::Heterogeneous],
            weight_scale: 0.5,
            jitter: 0.1,
            input_scale: 1.0,
            reg_constant: 1.0,
            max_steps: 30,
            targets: vec![0.3, 0.5, 0.7, 0.9],
            bisection_tol: 1e-3,
            sign_probe_fraction: 1e-4,
            calibration_window: (0.9, 0.92),
            min_contexts: 30,
            max_binomial_p: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptRegime {
    Decomposable,
    Heterogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameworkConfig {
    pub dims: Vec<usize>,
    pub n_draws: usize,
    /// Monte-Carlo covectors per bound check.
    pub n_covectors: usize,
    /// Spread of log-eigenvalues of the random metrics (natural-log units).
    pub log_spread: f64,
    pub relative_eta: f64,
    pub diagonal_eta: f64,
    /// Random metrics in the optimality sweep.
    pub optimality_metrics: usize,
    /// Feasible perturbations per metric in the optimality sweep.
    pub optimality_samples: usize,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        Self {
            dims: vec![6],
            n_draws: 1000,
            n_covectors: 20,
            log_spread: 6.0,
            relative_eta: 0.5,
            diagonal_eta: 0.3,
            optimality_metrics: 20,
            optimality_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: String,
    /// Base seed; per-case seeds are derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub toy_stability: ToyStabilityConfig,
    pub geometry: GeometryConfig,
    pub steering: SteeringExperimentConfig,
    pub framework: FrameworkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION.into(),
            seed: 20_240_601,
            output_dir: PathBuf::from("results"),
            toy_stability: ToyStabilityConfig::default(),
            geometry: GeometryConfig::default(),
            steering: SteeringExperimentConfig::default(),
            framework: FrameworkConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.format_version != FORMAT_VERSION {
            bail!("unsupported format_version {:?} (expected {FORMAT_VERSION:?})", self.format_version);
        }
        let t = &self.toy_stability;
        if t.dims.is_empty() || t.dims.iter().any(|&d| d < 2) || t.n_inputs == 0 {
            bail!("toy_stability needs at least one width ≥ 2 and n_inputs ≥ 1");
        }
        check_ascending("toy_stability.rho_grid", &t.rho_grid)?;
        if t.slope_models > 0 && (t.slope_dim < 2 || t.slope_points < 2 || !(0.0 < t.slope_rho.0 && t.slope_rho.0 < t.slope_rho.1)) {
            bail!("toy_stability slope sweep needs slope_dim ≥ 2, slope_points ≥ 2 and 0 < ρ_lo < ρ_hi");
        }
        if !(t.rho_ratio > 0.0) || !(t.input_scale > 0.0) {
            bail!("toy_stability.rho_ratio and input_scale must be positive");
        }
        let g = &self.geometry;
        if g.dims.is_empty() || g.dims.iter().any(|&d| d < 2) || g.layers == 0 || g.n_inputs == 0 || g.n_nets == 0 {
            bail!("geometry counts must be ≥ 1 and widths ≥ 2");
        }
        let s = &self.steering;
        if s.dim < 2 || s.layers == 0 || s.layer > s.layers || s.n_pairs == 0 || s.n_contexts == 0 {
            bail!("steering needs dim ≥ 2, 1 ≤ layers, layer ≤ layers and ≥ 1 pair and context");
        }
        if 2 * s.n_pairs >= s.vocab {
            bail!("steering.vocab must exceed twice the number of pairs");
        }
        if s.regimes.is_empty() {
            bail!("steering.regimes must name at least one regime");
        }
        if s.n_contrast < 2 {
            bail!("steering.n_contrast must be at least 2");
        }
        check_ascending("steering.targets", &s.targets)?;
        if s.targets.iter().any(|&t| t >= 1.0) {
            bail!("steering.targets must lie in (0, 1)");
        }
        let f = &self.framework;
        if f.dims.is_empty() || f.dims.iter().any(|&d| d < 2) || f.n_draws == 0 || f.n_covectors == 0 || f.optimality_metrics == 0 {
            bail!("framework counts must be ≥ 1 and widths ≥ 2");
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    /// `output_dir` is blanked first since it does not affect any result.
    pub fn hash(&self) -> String {
        let canonical = Self { output_dir: PathBuf::new(), ..self.clone() };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

fn check_ascending(name: &str, v: &[f64]) -> anyhow::Result<()> {
    if v.is_empty() || v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) || v.windows(2).any(|w| w[0] >= w[1]) {
        bail!("{name} must be nonempty, positive and strictly ascending");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), ExperimentConfig::default().hash());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: ExperimentConfig = toml::from_str("seed = 3\n[toy_stability]\ndims = [4]\nn_inputs = 5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.toy_stability.dims, vec![4]);
        assert_eq!(cfg.toy_stability.rho_ratio, 0.1);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_grids() {
        let mut cfg = ExperimentConfig::default();
        cfg.toy_stability.rho_grid = vec![0.1, 0.01];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.steering.targets = vec![0.5, 1.0];
        assert!(cfg.validate().is_err());
        let unknown = toml::from_str::<ExperimentConfig>("bogus = 1\n");
        assert!(unknown.is_err());
    }
}
