//! JSON experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergence::{DivMethod, HutchinsonConfig};
use crate::error::{LabError, Result};
use crate::guidance::GuidanceConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::Schedule;
use crate::target::{GaussianMixture, MixtureSpec, TargetPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Verify,
    TraceDivergence,
    SweepBeta,
    SweepOmega,
    SampleCompare,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::Verify,
        ExperimentKind::TraceDivergence,
        ExperimentKind::SweepBeta,
        ExperimentKind::SweepOmega,
        ExperimentKind::SampleCompare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Verify => "verify",
            ExperimentKind::TraceDivergence => "trace_divergence",
            ExperimentKind::SweepBeta => "sweep_beta",
            ExperimentKind::SweepOmega => "sweep_omega",
            ExperimentKind::SampleCompare => "sample_compare",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| LabError::Config(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsConfig {
    pub conditional: MixtureSpec,
    pub unconditional: MixtureSpec,
}

/// Ring radius of the default unconditional mixture.
pub const RING_RADIUS: f64 = 4.0;
/// Component variance of the default unconditional mixture.
pub const RING_VARIANCE: f64 = 1e-4;
/// Variance of the default conditional target.
pub const CONDITIONAL_VARIANCE: f64 = 2.5e-5;

impl Default for TargetsConfig {
    /// Four near-point modes on a circle of radius 4 in the plane; the
    /// condition selects the mode at `(4, 0)` with a tighter spread.
    fn default() -> Self {
        let means: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_2;
                vec![RING_RADIUS * a.cos(), RING_RADIUS * a.sin()]
            })
            .collect();
        let unconditional = MixtureSpec::isotropic(&[0.25; 4], &means, &[RING_VARIANCE; 4]);
        let conditional = MixtureSpec::isotropic(&[1.0], &[means[0].clone()], &[CONDITIONAL_VARIANCE]);
        Self {
            conditional,
            unconditional,
        }
    }
}

impl TargetsConfig {
    pub fn build(&self) -> Result<TargetPair> {
        TargetPair::new(
            GaussianMixture::new(self.conditional.clone())?,
            GaussianMixture::new(self.unconditional.clone())?,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Damping values for the divergence profile.
    #[serde(default = "default_profile_betas")]
    pub profile_beta: Vec<f64>,
    /// Damping values for the component sweep.
    #[serde(default = "default_beta_sweep")]
    pub beta: Vec<f64>,
    #[serde(default = "default_omega_sweep")]
    pub omega: Vec<f64>,
    #[serde(default = "default_gamma_sweep")]
    pub gamma: Vec<f64>,
}

fn default_profile_betas() -> Vec<f64> {
    vec![0.0, 0.1, 0.5, 1.0]
}

/// Eight log-spaced values from 0.1 to 20.
fn default_beta_sweep() -> Vec<f64> {
    (0..8).map(|k| 0.1 * 200f64.powf(k as f64 / 7.0)).collect()
}

fn default_omega_sweep() -> Vec<f64> {
    vec![1.0, 3.0, 7.0, 15.0]
}

fn default_gamma_sweep() -> Vec<f64> {
    vec![4.0]
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            profile_beta: default_profile_betas(),
            beta: default_beta_sweep(),
            omega: default_omega_sweep(),
            gamma: default_gamma_sweep(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must match the kind given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub targets: TargetsConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub sweeps: SweepConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub hutchinson: HutchinsonConfig,
    /// How profiles and sweeps evaluate divergences.
    #[serde(default)]
    pub divergence_method: DivMethod,
    /// Reference trajectories averaged in the divergence profile and sweep.
    #[serde(default = "default_profile_trajectories")]
    pub profile_trajectories: usize,
    /// Terminal samples per rule in comparisons.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_n_perm")]
    pub n_perm: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_profile_trajectories() -> usize {
    8
}
fn default_n_samples() -> usize {
    1000
}
fn default_n_perm() -> usize {
    200
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            schedule: Schedule::default(),
            targets: TargetsConfig::default(),
            guidance: GuidanceConfig::default(),
            sweeps: SweepConfig::default(),
            sampler: SamplerConfig::default(),
            hutchinson: HutchinsonConfig::default(),
            divergence_method: DivMethod::Exact,
            profile_trajectories: default_profile_trajectories(),
            n_samples: default_n_samples(),
            n_perm: default_n_perm(),
            output_dir: default_output_dir(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every block needed by `kind`, before any computation.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(LabError::Config(format!("config is for {k}, but {kind} was requested")));
            }
        }
        self.schedule.validate()?;
        self.guidance.validate()?;
        self.sampler.validate(&self.schedule)?;
        self.hutchinson.validate()?;
        if let DivMethod::Hutchinson(h) = &self.divergence_method {
            h.validate()?;
        }
        self.targets.build()?;
        let nonempty = |name: &str, v: &[f64]| {
            if v.is_empty() {
                Err(LabError::Config(format!("sweep list {name} must be non-empty")))
            } else if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                Err(LabError::Config(format!("sweep list {name} must hold finite values >= 0")))
            } else {
                Ok(())
            }
        };
        match kind {
            ExperimentKind::Verify => {}
            ExperimentKind::TraceDivergence => nonempty("profile_beta", &self.sweeps.profile_beta)?,
            ExperimentKind::SweepBeta => nonempty("beta", &self.sweeps.beta)?,
            ExperimentKind::SweepOmega => {
                nonempty("omega", &self.sweeps.omega)?;
                nonempty("gamma", &self.sweeps.gamma)?;
                if self.sweeps.omega.iter().any(|w| *w <= 0.0) {
                    return Err(LabError::Config("omega sweep values must be > 0".into()));
                }
            }
            ExperimentKind::SampleCompare => {}
        }
        if matches!(kind, ExperimentKind::TraceDivergence | ExperimentKind::SweepBeta) && self.profile_trajectories == 0 {
            return Err(LabError::Config("profile_trajectories must be >= 1".into()));
        }
        if matches!(kind, ExperimentKind::SweepOmega | ExperimentKind::SampleCompare) {
            if self.n_samples < 2 {
                return Err(LabError::Config("n_samples must be >= 2".into()));
            }
            if self.n_perm < 100 {
                return Err(LabError::Config("n_perm must be >= 100".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_kind() {
        let c = ExperimentConfig::default();
        for k in ExperimentKind::ALL {
            c.validate(k).unwrap();
            assert_eq!(k.as_str().parse::<ExperimentKind>().unwrap(), k);
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = ExperimentConfig::default();
        c.kind = Some(ExperimentKind::SweepBeta);
        c.divergence_method = DivMethod::Hutchinson(HutchinsonConfig {
            probes: 16,
            ..HutchinsonConfig::default()
        });
        c.sweeps.beta = vec![0.1, 1.0 / 3.0, 7.0];
        let text = c.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_guidance_block() {
        let c = ExperimentConfig::from_json(r#"{"guidance": {"rule": "cfg", "omega_ref": 3.0}}"#).unwrap();
        assert_eq!(c.guidance.rule, crate::guidance::GuidanceRule::Cfg);
        assert_eq!(c.guidance.beta, 0.1);
    }

    #[test]
    fn malformed_configs_rejected() {
        let c = ExperimentConfig::from_json(r#"{"guidance": {"omega_ref": 2.0, "omega_min": 5.0}}"#).unwrap();
        assert!(matches!(c.validate(ExperimentKind::Verify), Err(LabError::Config(_))));
        assert!(ExperimentConfig::from_json(r#"{"guidence": {}}"#).is_err());
        let c = ExperimentConfig::from_json(r#"{"sweeps": {"beta": []}}"#).unwrap();
        assert!(c.validate(ExperimentKind::SweepBeta).is_err());
        assert!(c.validate(ExperimentKind::Verify).is_ok());
        let c = ExperimentConfig::from_json(r#"{"kind": "verify"}"#).unwrap();
        assert!(c.validate(ExperimentKind::SweepOmega).is_err());
    }

    #[test]
    fn default_targets_are_the_ring() {
        let pair = TargetsConfig::default().build().unwrap();
        assert_eq!(pair.dim(), 2);
        assert_eq!(pair.unconditional.num_components(), 4);
        assert_eq!(pair.conditional.mean(0), &[4.0, 0.0]);
        assert!((pair.unconditional.mean(1)[1] - 4.0).abs() < 1e-15);
    }
}
