//! Divergence of vector fields: exact (analytic oracle), Hutchinson trace
//! estimation from central-difference directional derivatives, and a dense
//! finite-difference reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, LabError, Result};
use crate::field::{VectorField, VelocityField};
use crate::guidance::{
    guidance_breakdown, GuidanceComponent, GuidanceConfig, GuidanceField, GuidanceRule, NormalSource,
};
use crate::io::{fmt_f64, CsvTable};
use crate::sampler::TrajectoryRecord;
use crate::schedule::Schedule;
use crate::target::{dot, norm2, TargetPair};

/// Largest dimension accepted by [`divergence_fd_dense`].
pub const FD_DENSE_MAX_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDist {
    #[default]
    Rademacher,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HutchinsonConfig {
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub probe_dist: ProbeDist,
    /// Relative step; the absolute step is `fd_step (1 + |x|_inf)`.
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_probes() -> usize {
    64
}
fn default_fd_step() -> f64 {
    1e-4
}

impl Default for HutchinsonConfig {
    fn default() -> Self {
        Self {
            probes: default_probes(),
            probe_dist: ProbeDist::Rademacher,
            fd_step: default_fd_step(),
            seed: 0,
        }
    }
}

impl HutchinsonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probes == 0 {
            return Err(LabError::Config("hutchinson probes must be >= 1".into()));
        }
        if !(1e-6..=1e-2).contains(&self.fd_step) {
            return Err(LabError::Config(format!(
                "hutchinson fd_step must lie in [1e-6, 1e-2], got {}",
                self.fd_step
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEstimate {
    pub value: f64,
    /// Sample standard deviation over probes divided by `sqrt(K)`; infinite for `K = 1`.
    pub stderr: f64,
    pub probes_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DivMethod {
    Exact,
    Hutchinson(HutchinsonConfig),
    FiniteDifference { step: f64 },
}

impl Default for DivMethod {
    fn default() -> Self {
        DivMethod::Exact
    }
}

/// Divergence of `field` at `(x, t)` by the requested method.
pub fn divergence_with(field: &dyn VectorField, t: f64, x: &[f64], method: &DivMethod) -> Result<f64> {
    check_len(field.dim(), x.len())?;
    match method {
        DivMethod::Exact => field.exact_divergence(x, t).ok_or_else(|| {
            LabError::Capability("exact divergence requested for a field without an analytic Jacobian".into())
        }),
        DivMethod::Hutchinson(cfg) => divergence_hutchinson(field, t, x, cfg).map(|e| e.value),
        DivMethod::FiniteDifference { step } => divergence_fd_dense(field, t, x, *step),
    }
}

/// Exact divergences of the conditional and unconditional velocities and
/// of the unit residual `g = v_c - v_u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDivergence {
    pub cond: f64,
    pub uncond: f64,
    pub g: f64,
}

/// `div v = D a_t - b_t Delta log p` for each side and
/// `div g = -b_t (Delta log p^c - Delta log p^u)`.
pub fn divergence_exact(pair: &TargetPair, schedule: &Schedule, t: f64, x: &[f64]) -> Result<PairDivergence> {
    check_len(pair.dim(), x.len())?;
    let mc = pair.conditional.at(schedule, t)?;
    let mu = pair.unconditional.at(schedule, t)?;
    let coef = mc.coefficients();
    let lc = mc.laplacian_log_density(x);
    let lu = mu.laplacian_log_density(x);
    let d = x.len() as f64;
    Ok(PairDivergence {
        cond: d * coef.a - coef.b * lc,
        uncond: d * coef.a - coef.b * lu,
        g: -coef.b * (lc - lu),
    })
}

/// Exact divergences of every guidance component at `(x, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceDivergence {
    pub g: f64,
    pub g_par: f64,
    pub g_perp: f64,
    pub g_tilde: f64,
    pub omega_t: f64,
}

/// Closed-form divergence of `g`, `g_par`, `g_perp` and `g_tilde`.
///
/// With `u = s^k` the score behind the normal (`n = b_t u`) and
/// `phi = <g, u> / |u|^2`, `g_par = phi u` and
/// `div g_par = phi tr(H^k) + [u^T J_g u + g^T H^k u] / |u|^2 - 2 phi u^T H^k u / |u|^2`
/// where `J_g = -b_t (H^c - H^u)`. Only Hessian-vector products are needed.
pub fn guidance_divergence_exact(
    pair: &TargetPair,
    schedule: &Schedule,
    config: &GuidanceConfig,
    t: f64,
    x: &[f64],
) -> Result<GuidanceDivergence> {
    check_len(pair.dim(), x.len())?;
    let mc = pair.conditional.at(schedule, t)?;
    let mu = pair.unconditional.at(schedule, t)?;
    let (v_u, v_c) = (mu.velocity(x), mc.velocity(x));
    let bd = guidance_breakdown(&v_u, &v_c, x, t, schedule, config)?;
    let b = mc.coefficients().b;
    let lc = mc.laplacian_log_density(x);
    let lu = mu.laplacian_log_density(x);
    let div_g = -b * (lc - lu);

    let div_par = if bd.degenerate {
        0.0
    } else {
        let (mk, lk) = match config.normal_source {
            NormalSource::Conditional => (&mc, lc),
            NormalSource::Unconditional => (&mu, lu),
        };
        let u = mk.score(x);
        let uu = norm2(&u);
        let hc_u = mc.hessian_vec(x, &u);
        let hu_u = mu.hessian_vec(x, &u);
        let hk_u = match config.normal_source {
            NormalSource::Conditional => &hc_u,
            NormalSource::Unconditional => &hu_u,
        };
        let phi = dot(&bd.g, &u) / uu;
        let u_jg_u = -b * (dot(&u, &hc_u) - dot(&u, &hu_u));
        let g_hk_u = dot(&bd.g, hk_u);
        let u_hk_u = dot(&u, hk_u);
        phi * lk + (u_jg_u + g_hk_u) / uu - 2.0 * phi * u_hk_u / uu
    };
    let g_tilde = match config.rule {
        GuidanceRule::Cfg => bd.omega_t * div_g,
        GuidanceRule::AdaMaG => bd.omega_t * (div_g + (config.beta - 1.0) * div_par),
    };
    Ok(GuidanceDivergence {
        g: div_g,
        g_par: div_par,
        g_perp: div_g - div_par,
        g_tilde,
        omega_t: bd.omega_t,
    })
}

fn draw_probe(rng: &mut ChaCha8Rng, dist: ProbeDist, d: usize) -> Vec<f64> {
    match dist {
        ProbeDist::Rademacher => (0..d)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect(),
        ProbeDist::Gaussian => (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    }
}

/// The per-probe samples `xi^T J xi` behind a Hutchinson estimate, in
/// probe-index order. Probe `k` draws from its own ChaCha8 stream `k`.
pub fn hutchinson_samples(
    field: &dyn VectorField,
    t: f64,
    x: &[f64],
    config: &HutchinsonConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_len(field.dim(), x.len())?;
    let d = x.len();
    let h = config.fd_step * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let samples: Vec<f64> = (0..config.probes)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(k as u64);
            let xi = draw_probe(&mut rng, config.probe_dist, d);
            let plus: Vec<f64> = x.iter().zip(&xi).map(|(x, e)| x + h * e).collect();
            let minus: Vec<f64> = x.iter().zip(&xi).map(|(x, e)| x - h * e).collect();
            let fp = field.eval(&plus, t);
            let fm = field.eval(&minus, t);
            xi.iter()
                .zip(fp.iter().zip(&fm))
                .map(|(e, (p, m))| e * (p - m) / (2.0 * h))
                .sum()
        })
        .collect();
    if let Some(probe) = samples.iter().position(|v| !v.is_finite()) {
        return Err(LabError::Estimation { probe });
    }
    Ok(samples)
}

/// Hutchinson estimate `mean_k xi_k^T J xi_k` with central-difference JVPs.
pub fn divergence_hutchinson(
    field: &dyn VectorField,
    t: f64,
    x: &[f64],
    config: &HutchinsonConfig,
) -> Result<DivergenceEstimate> {
    let samples = hutchinson_samples(field, t, x, config)?;
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    let stderr = if samples.len() < 2 {
        f64::INFINITY
    } else {
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    };
    Ok(DivergenceEstimate {
        value: mean,
        stderr,
        probes_used: samples.len(),
    })
}

/// `sum_i [v_i(x + h e_i) - v_i(x - h e_i)] / 2h` with absolute step `h`.
pub fn divergence_fd_dense(field: &dyn VectorField, t: f64, x: &[f64], step: f64) -> Result<f64> {
    check_len(field.dim(), x.len())?;
    let d = x.len();
    if d > FD_DENSE_MAX_DIM {
        return Err(LabError::Capability(format!(
            "dense finite differences limited to D <= {FD_DENSE_MAX_DIM}, got {d}"
        )));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(LabError::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut p = x.to_vec();
    let mut total = 0.0;
    for i in 0..d {
        p[i] = x[i] + step;
        let fp = field.eval(&p, t)[i];
        p[i] = x[i] - step;
        let fm = field.eval(&p, t)[i];
        p[i] = x[i];
        total += (fp - fm) / (2.0 * step);
    }
    Ok(total)
}

/// Label attached to the profile column that reproduces CFG.
pub const CFG_LABEL: &str = "recovers CFG";

/// Per-state normalized divergence magnitudes along reference trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub betas: Vec<f64>,
    pub times: Vec<f64>,
    /// Mean `|div v^c| / D` per state.
    pub div_cond: Vec<f64>,
    /// Mean `|div v^u| / D` per state.
    pub div_uncond: Vec<f64>,
    /// Mean `|div g_tilde| / (omega(t) D)` per beta, then per state: the
    /// damped residual at unit strength, so the `beta = 1` column is `|div g| / D`.
    pub div_g_tilde: Vec<Vec<f64>>,
}

impl ProfileTable {
    pub fn column_name(beta: f64) -> String {
        format!("div_g_beta_{beta}")
    }

    /// Column labels; the `beta = 1` column is marked as the CFG case.
    pub fn labels(&self) -> Vec<(String, String)> {
        self.betas
            .iter()
            .filter(|b| **b == 1.0)
            .map(|b| (Self::column_name(*b), CFG_LABEL.to_string()))
            .collect()
    }

    pub fn to_table(&self) -> CsvTable {
        let mut header = vec!["step".to_string(), "t".into(), "div_cond".into(), "div_uncond".into()];
        header.extend(self.betas.iter().map(|b| Self::column_name(*b)));
        let mut table = CsvTable::new(header);
        for k in 0..self.times.len() {
            let mut row = vec![
                k.to_string(),
                fmt_f64(self.times[k]),
                fmt_f64(self.div_cond[k]),
                fmt_f64(self.div_uncond[k]),
            ];
            row.extend(self.div_g_tilde.iter().map(|col| fmt_f64(col[k])));
            table.push(row);
        }
        table
    }
}

/// Divergence profile of `v^c`, `v^u` and `g_tilde / omega(t)` at each beta, evaluated
/// at the states of `trajectories` (which must share one time grid) and
/// averaged over them. Every beta column uses `base` with beta changed and
/// the strength fixed at 1.
pub fn divergence_profile(
    pair: &TargetPair,
    schedule: &Schedule,
    base: &GuidanceConfig,
    betas: &[f64],
    trajectories: &[TrajectoryRecord],
    method: &DivMethod,
) -> Result<ProfileTable> {
    let first = trajectories
        .first()
        .ok_or_else(|| LabError::Config("divergence profile needs at least one trajectory".into()))?;
    let times = first.times.clone();
    if trajectories.iter().any(|r| r.times != times) {
        return Err(LabError::Config("profile trajectories must share one time grid".into()));
    }
    let d = pair.dim() as f64;
    let configs: Vec<GuidanceConfig> = betas
        .iter()
        .map(|b| GuidanceConfig {
            rule: GuidanceRule::AdaMaG,
            beta: *b,
            omega_ref: 1.0,
            omega_min: 1.0,
            gamma: 0.0,
            ..*base
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    // (state index, trajectory) -> [cond, uncond, g_tilde per beta]
    let per_state: Vec<Vec<Vec<f64>>> = (0..times.len())
        .into_par_iter()
        .map(|k| {
            let t = times[k];
            trajectories
                .iter()
                .map(|r| {
                    let x = &r.states[k];
                    let mut vals = Vec::with_capacity(2 + configs.len());
                    match method {
                        DivMethod::Exact => {
                            let p = divergence_exact(pair, schedule, t, x)?;
                            vals.push(p.cond);
                            vals.push(p.uncond);
                            for c in &configs {
                                vals.push(guidance_divergence_exact(pair, schedule, c, t, x)?.g_tilde);
                            }
                        }
                        _ => {
                            for target in [&pair.conditional, &pair.unconditional] {
                                let f = VelocityField { target, schedule };
                                vals.push(divergence_with(&f, t, x, method)?);
                            }
                            for c in &configs {
                                let f = GuidanceField {
                                    pair,
                                    schedule,
                                    config: *c,
                                    component: GuidanceComponent::Guided,
                                };
                                vals.push(divergence_with(&f, t, x, method)?);
                            }
                        }
                    }
                    Ok(vals.into_iter().map(|v| v.abs() / d).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()
        })
        .collect::<Result<_>>()?;
    let n = trajectories.len() as f64;
    let mean = |col: usize| -> Vec<f64> {
        per_state
            .iter()
            .map(|rows| rows.iter().map(|r| r[col]).sum::<f64>() / n)
            .collect()
    };
    Ok(ProfileTable {
        betas: betas.to_vec(),
        times,
        div_cond: mean(0),
        div_uncond: mean(1),
        div_g_tilde: (0..configs.len()).map(|j| mean(2 + j)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AffineField, FnField, VelocityField};
    use crate::guidance::{GuidanceComponent, GuidanceField};
    use crate::target::{GaussianMixture, MixtureSpec};

    fn iso_pair(d: usize, mc: f64, vc: f64, mu: f64, vu: f64) -> TargetPair {
        TargetPair::new(
            GaussianMixture::isotropic(vec![mc; d], vc).unwrap(),
            GaussianMixture::isotropic(vec![mu; d], vu).unwrap(),
        )
        .unwrap()
    }

    fn mixture_pair() -> TargetPair {
        let c = GaussianMixture::new(MixtureSpec::isotropic(
            &[0.6, 0.4],
            &[vec![1.0, 0.5, -0.3], vec![-0.8, 0.2, 1.1]],
            &[0.3, 0.7],
        ))
        .unwrap();
        let u = GaussianMixture::new(MixtureSpec::isotropic(
            &[0.2, 0.5, 0.3],
            &[vec![1.0, 0.5, -0.3], vec![-0.8, 0.2, 1.1], vec![0.0, -1.5, 0.4]],
            &[0.5, 1.0, 0.4],
        ))
        .unwrap();
        TargetPair::new(c, u).unwrap()
    }

    #[test]
    fn identical_targets_have_zero_guidance_divergence() {
        let p = mixture_pair();
        let pair = TargetPair::new(p.conditional.clone(), p.conditional.clone()).unwrap();
        let s = Schedule::default();
        for t in [0.1, 0.5, 0.95] {
            let d = divergence_exact(&pair, &s, t, &[0.3, -0.2, 0.7]).unwrap();
            assert_eq!(d.g, 0.0);
            assert_eq!(d.cond, d.uncond);
        }
    }

    #[test]
    fn shifted_equal_covariance_has_zero_divergence() {
        let pair = iso_pair(2, 1.5, 0.7, -0.5, 0.7);
        let s = Schedule::default();
        let field = GuidanceField {
            pair: &pair,
            schedule: &s,
            config: GuidanceConfig::cfg(1.0),
            component: GuidanceComponent::Raw,
        };
        for (t, x) in [(0.2, [0.1, 0.4]), (0.7, [-1.0, 2.0])] {
            assert!(divergence_exact(&pair, &s, t, &x).unwrap().g.abs() < 1e-12);
            assert!(divergence_fd_dense(&field, t, &x, 1e-4).unwrap().abs() <= 1e-6);
        }
    }

    #[test]
    fn unequal_covariance_matches_trace_gap() {
        let pair = iso_pair(2, 0.0, 0.25, 0.0, 1.0);
        let s = Schedule::default();
        let t = 0.9;
        let x = [0.0, 0.0];
        let d = divergence_exact(&pair, &s, t, &x).unwrap();
        let pc = pair.conditional.at(&s, t).unwrap().posterior(&x);
        let pu = pair.unconditional.at(&s, t).unwrap().posterior(&x);
        let (a, sg) = (t, 1.0 - t);
        let expect = -(a / sg.powi(3)) * (pu.cov_trace - pc.cov_trace);
        assert!((d.g - expect).abs() <= 1e-8 * expect.abs());
    }

    #[test]
    fn velocity_divergence_matches_fd() {
        let p = mixture_pair();
        let s = Schedule::default();
        let x = [0.2, -0.1, 0.9];
        let t = 0.6;
        let d = divergence_exact(&p, &s, t, &x).unwrap();
        let vc = VelocityField {
            target: &p.conditional,
            schedule: &s,
        };
        let fd = divergence_fd_dense(&vc, t, &x, 1e-4).unwrap();
        assert!((fd - d.cond).abs() < 1e-6 * d.cond.abs().max(1.0));
    }

    #[test]
    fn guidance_components_match_fd() {
        let p = mixture_pair();
        let s = Schedule::default();
        for source in [NormalSource::Conditional, NormalSource::Unconditional] {
            let cfg = GuidanceConfig {
                normal_source: source,
                ..GuidanceConfig::adamag(5.0, 0.3, 2.0)
            };
            for (t, x) in [(0.3, [0.2, -0.1, 0.9]), (0.85, [0.9, 0.4, -0.2])] {
                let exact = guidance_divergence_exact(&p, &s, &cfg, t, &x).unwrap();
                for (comp, want) in [
                    (GuidanceComponent::Raw, exact.g),
                    (GuidanceComponent::Parallel, exact.g_par),
                    (GuidanceComponent::Orthogonal, exact.g_perp),
                    (GuidanceComponent::Guided, exact.g_tilde),
                ] {
                    let f = GuidanceField {
                        pair: &p,
                        schedule: &s,
                        config: cfg,
                        component: comp,
                    };
                    let fd = divergence_fd_dense(&f, t, &x, 1e-5).unwrap();
                    let tol = 1e-5 * (1.0 + want.abs());
                    assert!((fd - want).abs() < tol, "{source:?} {comp:?} t={t}: fd {fd} exact {want}");
                }
            }
        }
    }

    #[test]
    fn fd_dense_examples() {
        let id = AffineField::new(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.0; 3]);
        assert!((divergence_fd_dense(&id, 0.0, &[0.3, 1.0, -2.0], 1e-3).unwrap() - 3.0).abs() < 1e-12);
        let rot = FnField::new(2, |x: &[f64], _| vec![-x[1], x[0]]);
        assert_eq!(divergence_fd_dense(&rot, 0.0, &[0.5, 0.7], 1e-3).unwrap(), 0.0);
        let big = FnField::new(65, |x: &[f64], _| x.to_vec());
        assert!(matches!(
            divergence_fd_dense(&big, 0.0, &[0.0; 65], 1e-3),
            Err(LabError::Capability(_))
        ));
    }

    #[test]
    fn hutchinson_linear_field_rademacher_is_exact() {
        // diagonal plus antisymmetric: xi^T A xi = tr A for every sign probe
        let a = vec![2.0, 1.5, -0.5, -1.5, -1.0, 0.25, 0.5, -0.25, 3.0];
        let f = AffineField::new(3, a, vec![0.1, 0.2, 0.3]);
        for k in [1, 2, 17] {
            let cfg = HutchinsonConfig {
                probes: k,
                ..HutchinsonConfig::default()
            };
            let e = divergence_hutchinson(&f, 0.0, &[1.0, -2.0, 0.5], &cfg).unwrap();
            assert!((e.value - 4.0).abs() < 1e-10);
            if k > 1 {
                assert!(e.stderr <= 1e-10);
            } else {
                assert!(e.stderr.is_infinite());
            }
            assert_eq!(e.probes_used, k);
        }
    }

    #[test]
    fn hutchinson_deterministic_and_reports_bad_probe() {
        let p = mixture_pair();
        let s = Schedule::default();
        let f = GuidanceField {
            pair: &p,
            schedule: &s,
            config: GuidanceConfig::default(),
            component: GuidanceComponent::Guided,
        };
        let cfg = HutchinsonConfig {
            probes: 32,
            seed: 11,
            ..HutchinsonConfig::default()
        };
        let x = [0.2, 0.3, -0.4];
        let a = divergence_hutchinson(&f, 0.4, &x, &cfg).unwrap();
        let b = divergence_hutchinson(&f, 0.4, &x, &cfg).unwrap();
        assert_eq!(a, b);
        let nan = FnField::new(2, |x: &[f64], _| {
            if x[0] > 0.0 {
                vec![f64::NAN, 0.0]
            } else {
                x.to_vec()
            }
        });
        let err = divergence_hutchinson(&nan, 0.0, &[0.0, 0.0], &cfg).unwrap_err();
        assert!(matches!(err, LabError::Estimation { .. }));
    }

    #[test]
    fn hutchinson_config_validation() {
        let bad = HutchinsonConfig {
            probes: 0,
            ..HutchinsonConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = HutchinsonConfig {
            fd_step: 0.5,
            ..HutchinsonConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gaussian_probes_have_identity_second_moment() {
        let mut acc = [[0.0; 3]; 3];
        let n = 20000;
        for k in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            rng.set_stream(k);
            let xi = draw_probe(&mut rng, ProbeDist::Gaussian, 3);
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j] += xi[i] * xi[j] / n as f64;
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((acc[i][j] - want).abs() < 0.05);
            }
        }
    }

    #[test]
    fn method_dispatch() {
        let f = FnField::new(2, |x: &[f64], _| vec![x[0] * x[0], x[1]]);
        let x = [1.5, 0.0];
        assert!(matches!(
            divergence_with(&f, 0.0, &x, &DivMethod::Exact),
            Err(LabError::Capability(_))
        ));
        let fd = divergence_with(&f, 0.0, &x, &DivMethod::FiniteDifference { step: 1e-4 }).unwrap();
        assert!((fd - 4.0).abs() < 1e-8);
    }
}
