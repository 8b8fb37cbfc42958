//! Config file parsing and command-line overrides.
//!
//! Configuration is TOML with three sections — `[kernel]`, `[family]`,
//! `[experiment]` — all optional; every field has a default and can be
//! overridden by a flag.  An explicitly supplied config file must not be
//! empty.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use voterlab::kernels::{kernel_uniform, Neighbourhood, WalkKernel};
use voterlab::rates::{Family, Perturbation, PerturbationKind, RateModel};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub family: FamilySection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    /// Spatial dimension, 2 or 3.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// `nearest` (2d neighbours) or `moore` (8 neighbours, d = 2 only).
    #[serde(default = "default_kind")]
    pub kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySection {
    /// voter | qvoter | lotka-volterra | affine | geometric | threshold
    #[serde(default = "default_family")]
    pub name: String,
    /// q-voter exponent (used when `name = "qvoter"`).
    #[serde(default = "default_q")]
    pub q: f64,
    /// Lotka-Volterra competition rates.
    #[serde(default = "default_alpha")]
    pub alpha0: f64,
    #[serde(default = "default_alpha")]
    pub alpha1: f64,
    /// Affine mixing weight / geometric ratio.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Perturbation-scale Lotka-Volterra offsets.
    #[serde(default)]
    pub beta0: f64,
    #[serde(default)]
    pub beta1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: u64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Torus side length; 0 selects the infinite lattice.
    #[serde(default)]
    pub torus: i64,
    /// Scale parameter N for rescaled runs.
    #[serde(default = "default_n_scale")]
    pub n_scale: f64,
    /// Ring size for the cancellative commands.
    #[serde(default = "default_ring")]
    pub ring: usize,
    /// Number of occupied sites in the initial square blob.
    #[serde(default = "default_initial_ones")]
    pub initial_ones: usize,
    /// Horizon grid for coalescing estimates.
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<f64>,
    /// Worker threads; 0 = all available cores.
    #[serde(default)]
    pub threads: usize,
    /// Output directory.
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_dim() -> usize {
    2
}
fn default_kind() -> String {
    "nearest".into()
}
fn default_family() -> String {
    "qvoter".into()
}
fn default_q() -> f64 {
    0.95
}
fn default_alpha() -> f64 {
    0.5
}
fn default_theta() -> f64 {
    0.5
}
fn default_seed() -> u64 {
    1
}
fn default_replicates() -> u64 {
    10_000
}
fn default_horizon() -> f64 {
    1.0
}
fn default_n_scale() -> f64 {
    10_000.0
}
fn default_ring() -> usize {
    4
}
fn default_initial_ones() -> usize {
    9
}
fn default_t_grid() -> Vec<f64> {
    vec![1e2, 1e3, 1e4]
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl Default for KernelSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}
impl Default for FamilySection {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}
impl Default for ExperimentSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

impl Config {
    /// Loads a config file; an empty or whitespace-only file is a usage
    /// error, and parse failures carry the TOML line/field diagnostics.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        if text.trim().is_empty() {
            bail!("config file {} is empty; see `voterlab --help` for the schema", path.display());
        }
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn kernel(&self) -> Result<WalkKernel> {
        let nbhd = match (self.kernel.kind.as_str(), self.kernel.dim) {
            ("nearest", d @ (2 | 3)) => Neighbourhood::nearest_neighbour(d),
            ("moore", 2) => Neighbourhood::moore2(),
            ("moore", d) => bail!("kernel.kind = \"moore\" requires dim = 2, got {d}"),
            (kind, _) => bail!("unknown kernel.kind {kind:?} (expected \"nearest\" or \"moore\")"),
        };
        Ok(kernel_uniform(&nbhd))
    }

    pub fn family(&self) -> Result<Family> {
        Ok(match self.family.name.as_str() {
            "voter" => Family::Voter,
            "qvoter" => Family::QVoter { q: self.family.q },
            "lotka-volterra" => Family::LotkaVolterra {
                alpha0: self.family.alpha0,
                alpha1: self.family.alpha1,
            },
            "affine" => Family::Affine { alpha: self.family.alpha },
            "geometric" => Family::Geometric { theta: self.family.theta },
            "threshold" => Family::Threshold,
            other => bail!(
                "unknown family.name {other:?} (expected voter, qvoter, lotka-volterra, \
                 affine, geometric, or threshold)"
            ),
        })
    }

    pub fn model(&self) -> Result<RateModel> {
        Ok(RateModel::new(self.family()?, self.kernel()?))
    }

    /// The small-perturbation description of the configured family, for the
    /// rescaled commands.
    pub fn perturbation(&self) -> Result<Perturbation> {
        let kind = match self.family.name.as_str() {
            "qvoter" => PerturbationKind::QVoter,
            "lotka-volterra" => PerturbationKind::LotkaVolterra {
                beta0: self.family.beta0,
                beta1: self.family.beta1,
            },
            "affine" => PerturbationKind::Affine,
            "geometric" => PerturbationKind::Geometric,
            other => bail!("family.name {other:?} has no perturbation form (use qvoter, \
                            lotka-volterra, affine, or geometric)"),
        };
        Ok(Perturbation::new(kind, self.kernel()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_a_valid_model() {
        let cfg = Config::default();
        assert_eq!(cfg.kernel.dim, 2);
        assert_eq!(cfg.family.name, "qvoter");
        cfg.kernel().unwrap();
        cfg.model().unwrap();
        cfg.perturbation().unwrap();
    }

    #[test]
    fn empty_config_is_a_usage_error() {
        let dir = std::env::temp_dir().join("voterlab-cli-empty-config");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.toml");
        std::fs::write(&path, "  \n").unwrap();
        let err = Config::load(&path).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn unknown_fields_are_rejected_with_diagnostics() {
        let err = toml::from_str::<Config>("[experiment]\nsped = 3\n").unwrap_err();
        assert!(err.to_string().contains("sped"));
    }

    #[test]
    fn moore_kernel_requires_two_dimensions() {
        let mut cfg = Config::default();
        cfg.kernel.kind = "moore".into();
        cfg.kernel.dim = 3;
        assert!(cfg.kernel().is_err());
        cfg.kernel.dim = 2;
        assert_eq!(cfg.kernel().unwrap().neighbourhood().len(), 8);
    }

    #[test]
    fn threshold_family_has_no_perturbation_form() {
        let mut cfg = Config::default();
        cfg.family.name = "threshold".into();
        cfg.model().unwrap();
        assert!(cfg.perturbation().is_err());
    }
}
