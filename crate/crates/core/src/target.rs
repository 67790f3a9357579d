//! Closed-form Gaussian-mixture targets.
//!
//! A mixture `sum_j w_j N(mu_j, Sigma_j)` pushed through the interpolation
//! path has the exact marginal `sum_j w_j N(alpha_t mu_j, alpha_t^2 Sigma_j + sigma_t^2 I)`.
//! Every component covariance is diagonalised once at construction
//! (`Sigma = U diag(lambda) U^T`), so the marginal covariance at any `t` is
//! `U diag(alpha^2 lambda + sigma^2) U^T` and all solves reduce to scalings
//! in the eigenbasis.
//!
//! Densities, scores, Hessians and posterior moments of `X_1 | X_t = x`
//! are exact up to floating point.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, LabError, Result};
use crate::schedule::{PathCoefficients, PathPoint, Schedule};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One mixture component as it appears in experiment configs.
///
/// Exactly one of `cov_diag` and `cov_full` must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_full: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub dim: usize,
    pub components: Vec<ComponentSpec>,
}

impl MixtureSpec {
    /// Isotropic components `N(mean_j, var_j I)`.
    pub fn isotropic(weights: &[f64], means: &[Vec<f64>], variances: &[f64]) -> Self {
        let dim = means.first().map_or(0, Vec::len);
        let components = weights
            .iter()
            .zip(means)
            .zip(variances)
            .map(|((&weight, mean), &var)| ComponentSpec {
                weight,
                mean: mean.clone(),
                cov_diag: Some(vec![var; mean.len()]),
                cov_full: None,
            })
            .collect();
        Self { dim, components }
    }
}

#[derive(Debug, Clone)]
enum Covariance {
    Diagonal {
        var: Vec<f64>,
        sd: Vec<f64>,
    },
    Full {
        eigvals: Vec<f64>,
        eigvecs: DMatrix<f64>,
        chol: DMatrix<f64>,
    },
}

impl Covariance {
    fn eigvals(&self) -> &[f64] {
        match self {
            Covariance::Diagonal { var, .. } => var,
            Covariance::Full { eigvals, .. } => eigvals,
        }
    }

    /// `U^T v`
    fn to_eigen(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Covariance::Diagonal { .. } => v.to_vec(),
            Covariance::Full { eigvecs, .. } => {
                (eigvecs.transpose() * DVector::from_column_slice(v)).as_slice().to_vec()
            }
        }
    }

    /// `U w`
    fn from_eigen(&self, w: &[f64]) -> Vec<f64> {
        match self {
            Covariance::Diagonal { .. } => w.to_vec(),
            Covariance::Full { eigvecs, .. } => {
                (eigvecs * DVector::from_column_slice(w)).as_slice().to_vec()
            }
        }
    }

    fn eigvecs(&self) -> Option<&DMatrix<f64>> {
        match self {
            Covariance::Diagonal { .. } => None,
            Covariance::Full { eigvecs, .. } => Some(eigvecs),
        }
    }
}

#[derive(Debug, Clone)]
struct Component {
    mean: Vec<f64>,
    cov: Covariance,
}

/// Immutable Gaussian mixture in `R^dim`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Component>,
    spec: MixtureSpec,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = LabError;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        GaussianMixture::new(spec)
    }
}

impl GaussianMixture {
    pub fn new(spec: MixtureSpec) -> Result<Self> {
        let dim = spec.dim;
        if dim == 0 {
            return Err(LabError::InvalidTarget("dimension must be positive".into()));
        }
        if spec.components.is_empty() {
            return Err(LabError::InvalidTarget("mixture needs at least one component".into()));
        }
        let weights: Vec<f64> = spec.components.iter().map(|c| c.weight).collect();
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(LabError::InvalidTarget("weights must be positive and finite".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidTarget(format!("weights sum to {total}, expected 1")));
        }
        let mut components = Vec::with_capacity(spec.components.len());
        for (j, c) in spec.components.iter().enumerate() {
            if c.mean.len() != dim || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(LabError::InvalidTarget(format!(
                    "component {j}: mean must have {dim} finite entries"
                )));
            }
            let cov = match (&c.cov_diag, &c.cov_full) {
                (Some(diag), None) => diagonal_cov(j, dim, diag)?,
                (None, Some(full)) => full_cov(j, dim, full)?,
                _ => {
                    return Err(LabError::InvalidTarget(format!(
                        "component {j}: exactly one of cov_diag and cov_full is required"
                    )))
                }
            };
            components.push(Component {
                mean: c.mean.clone(),
                cov,
            });
        }
        Ok(Self {
            dim,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            components,
            spec,
        })
    }

    /// Single isotropic Gaussian `N(mean, var I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        Self::new(MixtureSpec::isotropic(&[1.0], &[mean], &[var]))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, j: usize) -> &[f64] {
        &self.components[j].mean
    }

    /// Eigenvalues of component `j`'s covariance.
    pub fn cov_eigvals(&self, j: usize) -> &[f64] {
        self.components[j].cov.eigvals()
    }

    /// Eigenvectors (columns) of component `j`'s covariance, `None` for diagonal storage.
    pub fn cov_eigvecs(&self, j: usize) -> Option<&DMatrix<f64>> {
        self.components[j].cov.eigvecs()
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    /// View of the marginal density of `X_t`.
    pub fn at(&self, schedule: &Schedule, t: f64) -> Result<Marginal<'_>> {
        let path = schedule.eval(t)?;
        Ok(Marginal::new(self, path))
    }

    /// Exact marginal mixture of `X_t`: same weights, components
    /// `N(alpha mu_j, alpha^2 Sigma_j + sigma^2 I)`.
    pub fn marginal_at(&self, schedule: &Schedule, t: f64) -> Result<GaussianMixture> {
        let p = schedule.eval(t)?;
        let (a2, s2) = (p.alpha * p.alpha, p.sigma * p.sigma);
        let components = self
            .spec
            .components
            .iter()
            .map(|c| ComponentSpec {
                weight: c.weight,
                mean: c.mean.iter().map(|m| p.alpha * m).collect(),
                cov_diag: c
                    .cov_diag
                    .as_ref()
                    .map(|d| d.iter().map(|v| a2 * v + s2).collect()),
                cov_full: c.cov_full.as_ref().map(|m| {
                    m.iter()
                        .enumerate()
                        .map(|(i, row)| {
                            row.iter()
                                .enumerate()
                                .map(|(k, v)| a2 * v + if i == k { s2 } else { 0.0 })
                                .collect()
                        })
                        .collect()
                }),
            })
            .collect();
        GaussianMixture::new(MixtureSpec {
            dim: self.dim,
            components,
        })
    }

    /// `count` i.i.d. draws, deterministic for a fixed seed.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng, count)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<Vec<f64>> {
        let picker = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        (0..count)
            .map(|_| {
                let comp = &self.components[picker.sample(rng)];
                let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let offset = match &comp.cov {
                    Covariance::Diagonal { sd, .. } => {
                        z.iter().zip(sd).map(|(z, s)| z * s).collect::<Vec<_>>()
                    }
                    Covariance::Full { chol, .. } => {
                        (chol * DVector::from_vec(z)).as_slice().to_vec()
                    }
                };
                comp.mean.iter().zip(offset).map(|(m, o)| m + o).collect()
            })
            .collect()
    }
}

fn diagonal_cov(j: usize, dim: usize, diag: &[f64]) -> Result<Covariance> {
    if diag.len() != dim {
        return Err(LabError::InvalidTarget(format!(
            "component {j}: cov_diag must have {dim} entries"
        )));
    }
    if diag.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(LabError::InvalidTarget(format!(
            "component {j}: covariance is not positive-definite"
        )));
    }
    Ok(Covariance::Diagonal {
        var: diag.to_vec(),
        sd: diag.iter().map(|v| v.sqrt()).collect(),
    })
}

fn full_cov(j: usize, dim: usize, rows: &[Vec<f64>]) -> Result<Covariance> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(LabError::InvalidTarget(format!(
            "component {j}: cov_full must be {dim}x{dim}"
        )));
    }
    let m = DMatrix::from_fn(dim, dim, |r, c| rows[r][c]);
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for r in 0..dim {
        for c in 0..r {
            if (m[(r, c)] - m[(c, r)]).abs() > 1e-12 * scale {
                return Err(LabError::InvalidTarget(format!(
                    "component {j}: covariance is not symmetric"
                )));
            }
        }
    }
    let sym = (&m + m.transpose()) * 0.5;
    let chol = Cholesky::new(sym.clone()).ok_or_else(|| {
        LabError::InvalidTarget(format!("component {j}: covariance is not positive-definite"))
    })?;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(LabError::InvalidTarget(format!(
            "component {j}: covariance is numerically singular"
        )));
    }
    Ok(Covariance::Full {
        eigvals: eig.eigenvalues.as_slice().to_vec(),
        eigvecs: eig.eigenvectors,
        chol: chol.l(),
    })
}

/// Posterior moments of `X_1` given `X_t = x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub mean: Vec<f64>,
    pub cov_trace: f64,
}

/// Per-point evaluation of every marginal component.
struct PointEval {
    /// Responsibilities `r_j(x)`.
    resp: Vec<f64>,
    log_density: f64,
    /// `U_j^T (x - alpha mu_j)` per component.
    z: Vec<Vec<f64>>,
}

/// The marginal of a target at a fixed time.
///
/// Query methods panic if `x` does not have the target's dimension; the
/// free functions in this module check lengths and return errors instead.
#[derive(Debug, Clone)]
pub struct Marginal<'a> {
    target: &'a GaussianMixture,
    path: PathPoint,
    coef: PathCoefficients,
    /// Marginal eigen-variances `alpha^2 lambda + sigma^2` per component.
    scales: Vec<Vec<f64>>,
    /// `log w_j - (D log 2pi + log det C_j) / 2`.
    log_norm: Vec<f64>,
}

impl<'a> Marginal<'a> {
    fn new(target: &'a GaussianMixture, path: PathPoint) -> Self {
        let (a2, s2) = (path.alpha * path.alpha, path.sigma * path.sigma);
        let scales: Vec<Vec<f64>> = target
            .components
            .iter()
            .map(|c| c.cov.eigvals().iter().map(|l| a2 * l + s2).collect())
            .collect();
        let log_norm = scales
            .iter()
            .zip(&target.log_weights)
            .map(|(c, lw)| {
                lw - 0.5 * (target.dim as f64 * LN_2PI + c.iter().map(|v| v.ln()).sum::<f64>())
            })
            .collect();
        Self {
            target,
            path,
            coef: path.coefficients(),
            scales,
            log_norm,
        }
    }

    pub fn path(&self) -> PathPoint {
        self.path
    }

    pub fn coefficients(&self) -> PathCoefficients {
        self.coef
    }

    pub fn dim(&self) -> usize {
        self.target.dim
    }

    pub(crate) fn num_components(&self) -> usize {
        self.target.components.len()
    }

    /// Mean, marginal eigen-variances, log normalizer and eigenbasis of
    /// component `j` (`None` for diagonal covariances).
    pub(crate) fn component_parts(&self, j: usize) -> (&[f64], &[f64], f64, Option<&DMatrix<f64>>) {
        let comp = &self.target.components[j];
        (&comp.mean, &self.scales[j], self.log_norm[j], comp.cov.eigvecs())
    }

    fn evaluate(&self, x: &[f64]) -> PointEval {
        assert_eq!(x.len(), self.target.dim, "point dimension mismatch");
        let alpha = self.path.alpha;
        let mut z = Vec::with_capacity(self.target.components.len());
        let mut logs = Vec::with_capacity(self.target.components.len());
        for ((comp, c), ln) in self.target.components.iter().zip(&self.scales).zip(&self.log_norm) {
            let diff: Vec<f64> = x.iter().zip(&comp.mean).map(|(x, m)| x - alpha * m).collect();
            let zj = comp.cov.to_eigen(&diff);
            let quad: f64 = zj.iter().zip(c).map(|(z, c)| z * z / c).sum();
            logs.push(ln - 0.5 * quad);
            z.push(zj);
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let log_density = max + sum.ln();
        let resp = logs.iter().map(|l| (l - log_density).exp()).collect();
        PointEval {
            resp,
            log_density,
            z,
        }
    }

    /// `-C_j^{-1} (x - alpha mu_j)`, the score of component `j`'s marginal.
    fn component_score(&self, j: usize, z: &[f64]) -> Vec<f64> {
        let w: Vec<f64> = z.iter().zip(&self.scales[j]).map(|(z, c)| -z / c).collect();
        self.target.components[j].cov.from_eigen(&w)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.evaluate(x).log_density
    }

    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        self.evaluate(x).resp
    }

    /// `grad_x log p_t(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let ev = self.evaluate(x);
        let mut s = vec![0.0; self.dim()];
        for (j, zj) in ev.z.iter().enumerate() {
            let sj = self.component_score(j, zj);
            axpy(&mut s, ev.resp[j], &sj);
        }
        s
    }

    /// Posterior mean and covariance trace of `X_1 | X_t = x`, combining the
    /// per-component conjugate posteriors by the law of total variance.
    pub fn posterior(&self, x: &[f64]) -> PosteriorMoments {
        let ev = self.evaluate(x);
        let (alpha, s2) = (self.path.alpha, self.path.sigma * self.path.sigma);
        let mut means = Vec::with_capacity(ev.z.len());
        let mut traces = Vec::with_capacity(ev.z.len());
        for (j, zj) in ev.z.iter().enumerate() {
            let comp = &self.target.components[j];
            let lam = comp.cov.eigvals();
            let c = &self.scales[j];
            let gain: Vec<f64> = zj
                .iter()
                .zip(lam)
                .zip(c)
                .map(|((z, l), c)| alpha * l * z / c)
                .collect();
            let shift = comp.cov.from_eigen(&gain);
            means.push(comp.mean.iter().zip(shift).map(|(m, d)| m + d).collect::<Vec<_>>());
            traces.push(lam.iter().zip(c).map(|(l, c)| l * s2 / c).sum::<f64>());
        }
        let mut mean = vec![0.0; self.dim()];
        for (r, m) in ev.resp.iter().zip(&means) {
            axpy(&mut mean, *r, m);
        }
        let cov_trace = ev
            .resp
            .iter()
            .zip(&means)
            .zip(&traces)
            .map(|((r, m), tr)| r * (tr + dist2(m, &mean)))
            .sum();
        PosteriorMoments { mean, cov_trace }
    }

    /// `Delta log p_t(x)` from the mixture Hessian
    /// `sum_j r_j (-C_j^{-1} + s_j s_j^T) - s s^T`.
    pub fn laplacian_log_density(&self, x: &[f64]) -> f64 {
        let ev = self.evaluate(x);
        let mut s = vec![0.0; self.dim()];
        let mut acc = 0.0;
        for (j, zj) in ev.z.iter().enumerate() {
            let sj = self.component_score(j, zj);
            let inv_trace: f64 = self.scales[j].iter().map(|c| 1.0 / c).sum();
            acc += ev.resp[j] * (norm2(&sj) - inv_trace);
            axpy(&mut s, ev.resp[j], &sj);
        }
        acc - norm2(&s)
    }

    /// `Delta log p_t(x) = (alpha^2 tr Cov[X_1 | x] - D sigma^2) / sigma^4`.
    pub fn laplacian_from_posterior(&self, x: &[f64]) -> f64 {
        let p = self.posterior(x);
        let (alpha, s2) = (self.path.alpha, self.path.sigma * self.path.sigma);
        (alpha * alpha * p.cov_trace - self.dim() as f64 * s2) / (s2 * s2)
    }

    /// Hessian-vector product `grad^2 log p_t(x) v`.
    pub fn hessian_vec(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim(), "vector dimension mismatch");
        let ev = self.evaluate(x);
        let mut out = vec![0.0; self.dim()];
        let mut s = vec![0.0; self.dim()];
        for (j, zj) in ev.z.iter().enumerate() {
            let comp = &self.target.components[j];
            let sj = self.component_score(j, zj);
            let ve = comp.cov.to_eigen(v);
            let scaled: Vec<f64> = ve.iter().zip(&self.scales[j]).map(|(v, c)| v / c).collect();
            let cinv_v = comp.cov.from_eigen(&scaled);
            let r = ev.resp[j];
            let sv = dot(&sj, v);
            for i in 0..out.len() {
                out[i] += r * (sj[i] * sv - cinv_v[i]);
            }
            axpy(&mut s, r, &sj);
        }
        let sv = dot(&s, v);
        axpy(&mut out, -sv, &s);
        out
    }

    /// Dense Hessian of `log p_t` at `x`.
    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        let mut e = vec![0.0; d];
        for k in 0..d {
            e[k] = 1.0;
            let col = self.hessian_vec(x, &e);
            h.set_column(k, &DVector::from_vec(col));
            e[k] = 0.0;
        }
        h
    }

    /// Marginal velocity `a_t x - b_t s_t(x)`.
    pub fn velocity(&self, x: &[f64]) -> Vec<f64> {
        let s = self.score(x);
        let PathCoefficients { a, b } = self.coef;
        x.iter().zip(&s).map(|(x, s)| a * x - b * s).collect()
    }

    /// Marginal velocity from the denoiser predictions,
    /// `dalpha E[X_1 | x] + dsigma E[X_0 | x]` with
    /// `E[X_0 | x] = (x - alpha E[X_1 | x]) / sigma`.
    pub fn velocity_from_predictors(&self, x: &[f64]) -> Vec<f64> {
        let x1 = self.posterior(x).mean;
        let p = self.path;
        x.iter()
            .zip(&x1)
            .map(|(x, x1)| {
                let x0 = (x - p.alpha * x1) / p.sigma;
                p.dalpha * x1 + p.dsigma * x0
            })
            .collect()
    }
}

/// A conditional/unconditional target pair sharing one dimension.
#[derive(Debug, Clone)]
pub struct TargetPair {
    pub conditional: GaussianMixture,
    pub unconditional: GaussianMixture,
}

impl TargetPair {
    pub fn new(conditional: GaussianMixture, unconditional: GaussianMixture) -> Result<Self> {
        if conditional.dim() != unconditional.dim() {
            return Err(LabError::InvalidTarget(format!(
                "conditional dim {} != unconditional dim {}",
                conditional.dim(),
                unconditional.dim()
            )));
        }
        Ok(Self {
            conditional,
            unconditional,
        })
    }

    pub fn dim(&self) -> usize {
        self.conditional.dim()
    }
}

pub fn marginal_at(target: &GaussianMixture, schedule: &Schedule, t: f64) -> Result<GaussianMixture> {
    target.marginal_at(schedule, t)
}

pub fn log_density(target: &GaussianMixture, schedule: &Schedule, t: f64, x: &[f64]) -> Result<f64> {
    check_len(target.dim(), x.len())?;
    Ok(target.at(schedule, t)?.log_density(x))
}

pub fn score(target: &GaussianMixture, schedule: &Schedule, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_len(target.dim(), x.len())?;
    Ok(target.at(schedule, t)?.score(x))
}

pub fn laplacian_log_density(
    target: &GaussianMixture,
    schedule: &Schedule,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    check_len(target.dim(), x.len())?;
    Ok(target.at(schedule, t)?.laplacian_log_density(x))
}

pub fn posterior(
    target: &GaussianMixture,
    schedule: &Schedule,
    t: f64,
    x: &[f64],
) -> Result<PosteriorMoments> {
    check_len(target.dim(), x.len())?;
    Ok(target.at(schedule, t)?.posterior(x))
}

pub fn velocity(target: &GaussianMixture, schedule: &Schedule, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_len(target.dim(), x.len())?;
    Ok(target.at(schedule, t)?.velocity(x))
}

/// Mass of `p_t` inside a box covering every component out to 9 standard
/// deviations, by adaptive Simpson quadrature. Only `D <= 2` is supported.
pub fn marginal_mass(target: &GaussianMixture, schedule: &Schedule, t: f64, tol: f64) -> Result<f64> {
    let m = target.at(schedule, t)?;
    let d = target.dim();
    if d > 2 {
        return Err(LabError::Capability(format!(
            "quadrature mass check supports D <= 2, got D = {d}"
        )));
    }
    let alpha = m.path.alpha;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut min_sd = f64::INFINITY;
    for (comp, c) in target.components.iter().zip(&m.scales) {
        let max_var = c.iter().copied().fold(0.0, f64::max);
        min_sd = min_sd.min(c.iter().copied().fold(f64::INFINITY, f64::min).sqrt());
        let r = 9.0 * max_var.sqrt();
        for i in 0..d {
            lo[i] = lo[i].min(alpha * comp.mean[i] - r);
            hi[i] = hi[i].max(alpha * comp.mean[i] + r);
        }
    }
    let panels = |a: f64, b: f64| (((b - a) / min_sd).ceil() as usize).clamp(16, 4096);
    if d == 1 {
        return Ok(integrate_panels(
            &|x: f64| m.log_density(&[x]).exp(),
            lo[0],
            hi[0],
            panels(lo[0], hi[0]),
            tol,
        ));
    }
    let inner = |y: f64| {
        integrate_panels(
            &|x: f64| m.log_density(&[x, y]).exp(),
            lo[0],
            hi[0],
            panels(lo[0], hi[0]),
            tol,
        )
    };
    Ok(integrate_panels(&inner, lo[1], hi[1], panels(lo[1], hi[1]), tol))
}

fn integrate_panels(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize, tol: f64) -> f64 {
    let h = (b - a) / n as f64;
    let per = tol / n as f64;
    (0..n)
        .map(|k| {
            let (l, r) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let (fl, fm, fr) = (f(l), f(0.5 * (l + r)), f(r));
            let whole = (r - l) / 6.0 * (fl + 4.0 * fm + fr);
            adaptive_simpson(f, l, r, fl, fm, fr, whole, per, 40)
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}
