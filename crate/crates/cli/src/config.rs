//! Run configuration.
//!
//! The canonical form is the compact JSON of the config with object keys
//! sorted; the config hash is the SHA-256 of that text with `output_dir`
//! removed, so moving the output does not invalidate artifacts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hstar_core::domains::AnnulusProblem;
use hstar_core::solver::{build_grid, Grid, SolveOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: AnnulusProblem,
    /// Nodes per axis for `solve`, `verify` and `sweep-p`.
    pub resolution: usize,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub verify: VerifyOptions,
    #[serde(default)]
    pub oracle: OracleOptions,
    #[serde(default)]
    pub sweep: SweepOptions,
    #[serde(default)]
    pub domain_check: DomainCheckOptions,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds the boundary-sampling direction jitter.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyOptions {
    /// Certified-layer margin for the pairing, sign and dilation checks.
    pub margin: usize,
    /// Margin for level-surface extraction. One keeps every cube whose corners
    /// are all free, so levels close to the inner boundary are still meshed.
    pub level_margin: usize,
    pub levels: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { margin: 2, level_margin: 1, levels: vec![0.2, 0.5, 0.8], lambdas: vec![0.1, 0.05, 0.025] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleOptions {
    pub resolutions: Vec<usize>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { resolutions: vec![33, 65] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    pub p_values: Vec<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { p_values: vec![1.5, 2.0, 3.0, 4.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainCheckOptions {
    pub samples: usize,
    /// Radius of the tangent gauge balls probed at boundary samples.
    pub probe_radius: f64,
    pub probe_samples: usize,
}

impl Default for DomainCheckOptions {
    fn default() -> Self {
        DomainCheckOptions { samples: 400, probe_radius: 0.05, probe_samples: 64 }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    fn validate(&self) -> Result<()> {
        let v = &self.verify;
        if v.margin == 0 || v.level_margin == 0 {
            bail!("verify margins must be at least 1");
        }
        if let Some(t) = v.levels.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            bail!("verify.levels must lie in (0, 1), got {t}");
        }
        if let Some(l) = v.lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            bail!("verify.lambdas must be positive, got {l}");
        }
        if self.domain_check.samples == 0 || self.domain_check.probe_samples == 0 {
            bail!("domain_check sample counts must be positive");
        }
        if !(self.domain_check.probe_radius > 0.0) {
            bail!("domain_check.probe_radius must be positive");
        }
        // surfaces grid-size errors at load time
        self.grid()?;
        for &n in &self.oracle.resolutions {
            self.grid_at(n)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        self.grid_at(self.resolution)
    }

    pub fn grid_at(&self, n: usize) -> Result<Grid> {
        Ok(build_grid(&self.problem, [n; 3])?)
    }

    /// Sorted-key compact JSON.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("output_dir");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
