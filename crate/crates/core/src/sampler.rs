//! Fixed-step Euler integration of the guided flow `v_u + g_tilde` from
//! noise (`t_start`) to data (`t_end`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::{
    divergence_exact, divergence_hutchinson, guidance_divergence_exact, DivergenceEstimate,
    GuidanceDivergence, HutchinsonConfig, PairDivergence,
};
use crate::error::{check_len, LabError, Result};
use crate::field::VectorField;
use crate::guidance::{
    guidance_breakdown, pair_velocities, GuidanceBreakdown, GuidanceComponent, GuidanceConfig,
    GuidanceField,
};
use crate::io::{fmt_f64, write_json, CsvTable};
use crate::schedule::Schedule;
use crate::target::{norm2, GaussianMixture, TargetPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_t_start")]
    pub t_start: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default)]
    pub record_diagnostics: bool,
    #[serde(default)]
    pub seed: u64,
    /// Pair trajectory `2k + 1` with the negated noise of trajectory `2k`.
    #[serde(default)]
    pub antithetic: bool,
    /// Adds a Hutchinson estimate of `div g_tilde` to recorded diagnostics.
    #[serde(default)]
    pub hutchinson: Option<HutchinsonConfig>,
}

fn default_steps() -> usize {
    30
}
fn default_t_start() -> f64 {
    Schedule::default().t_min
}
fn default_t_end() -> f64 {
    Schedule::default().t_max
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            t_start: default_t_start(),
            t_end: default_t_end(),
            record_diagnostics: false,
            seed: 0,
            antithetic: false,
            hutchinson: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        schedule.validate()?;
        if self.steps == 0 {
            return Err(LabError::Config("sampler steps must be >= 1".into()));
        }
        if !(self.t_start < self.t_end) {
            return Err(LabError::Config(format!(
                "need t_start < t_end, got {} and {}",
                self.t_start, self.t_end
            )));
        }
        schedule.check(self.t_start)?;
        schedule.check(self.t_end)?;
        if let Some(h) = &self.hutchinson {
            h.validate()?;
        }
        Ok(())
    }

    /// Uniform grid of `steps + 1` times; both endpoints exact.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.steps;
        let dt = (self.t_end - self.t_start) / n as f64;
        (0..=n)
            .map(|k| match k {
                0 => self.t_start,
                k if k == n => self.t_end,
                k => self.t_start + k as f64 * dt,
            })
            .collect()
    }
}

/// Base velocity, conditional velocity and guidance at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEval {
    pub v_u: Vec<f64>,
    pub v_c: Vec<f64>,
    pub breakdown: GuidanceBreakdown,
}

impl FlowEval {
    /// `v_u + g_tilde`.
    pub fn velocity(&self) -> Vec<f64> {
        self.v_u
            .iter()
            .zip(&self.breakdown.g_tilde)
            .map(|(u, g)| u + g)
            .collect()
    }
}

/// Divergence diagnostics recorded at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub pair: Option<PairDivergence>,
    pub guidance: Option<GuidanceDivergence>,
    pub hutchinson: Option<DivergenceEstimate>,
}

/// A guided flow the sampler can integrate.
pub trait GuidedFlow: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], t: f64) -> Result<FlowEval>;

    fn diagnostics(&self, x: &[f64], t: f64, hutchinson: Option<&HutchinsonConfig>) -> Result<StepDiagnostics>;
}

/// Guidance between the exact velocities of an analytic pair.
#[derive(Debug, Clone, Copy)]
pub struct PairFlow<'a> {
    pub pair: &'a TargetPair,
    pub schedule: &'a Schedule,
    pub guidance: GuidanceConfig,
}

impl GuidedFlow for PairFlow<'_> {
    fn dim(&self) -> usize {
        self.pair.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Result<FlowEval> {
        let (v_u, v_c) = pair_velocities(self.pair, self.schedule, t, x)?;
        let breakdown = guidance_breakdown(&v_u, &v_c, x, t, self.schedule, &self.guidance)?;
        Ok(FlowEval { v_u, v_c, breakdown })
    }

    fn diagnostics(&self, x: &[f64], t: f64, hutchinson: Option<&HutchinsonConfig>) -> Result<StepDiagnostics> {
        let pair = divergence_exact(self.pair, self.schedule, t, x)?;
        let guidance = guidance_divergence_exact(self.pair, self.schedule, &self.guidance, t, x)?;
        let hutchinson = match hutchinson {
            Some(cfg) => {
                let f = GuidanceField {
                    pair: self.pair,
                    schedule: self.schedule,
                    config: self.guidance,
                    component: GuidanceComponent::Guided,
                };
                Some(divergence_hutchinson(&f, t, x, cfg)?)
            }
            None => None,
        };
        Ok(StepDiagnostics {
            pair: Some(pair),
            guidance: Some(guidance),
            hutchinson,
        })
    }
}

/// A base field plus an arbitrary guidance field added at unit strength.
///
/// Reported as CFG at `omega = 1` with `v_c = v_u + g`, so `g_tilde = g`.
pub struct AdditiveFlow<'a> {
    pub base: &'a dyn VectorField,
    pub guidance: &'a dyn VectorField,
    pub schedule: &'a Schedule,
}

impl GuidedFlow for AdditiveFlow<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Result<FlowEval> {
        self.schedule.check(t)?;
        let v_u = self.base.eval(x, t);
        let g = self.guidance.eval(x, t);
        check_len(v_u.len(), g.len())?;
        let v_c: Vec<f64> = v_u.iter().zip(&g).map(|(u, g)| u + g).collect();
        let mut breakdown = guidance_breakdown(&v_u, &v_c, x, t, self.schedule, &GuidanceConfig::cfg(1.0))?;
        // keep g bit-exact rather than (v_u + g) - v_u
        breakdown.g_tilde = g.clone();
        breakdown.g = g;
        Ok(FlowEval { v_u, v_c, breakdown })
    }

    fn diagnostics(&self, x: &[f64], t: f64, hutchinson: Option<&HutchinsonConfig>) -> Result<StepDiagnostics> {
        let hutchinson = match hutchinson {
            Some(cfg) => Some(divergence_hutchinson(self.guidance, t, x, cfg)?),
            None => None,
        };
        Ok(StepDiagnostics {
            pair: None,
            guidance: None,
            hutchinson,
        })
    }
}

/// Everything evaluated at the start of one Euler step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub eval: FlowEval,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// `steps + 1` grid times.
    pub times: Vec<f64>,
    /// `steps + 1` states; the last is the terminal sample.
    pub states: Vec<Vec<f64>>,
    /// `|g_tilde|` at each of the `steps` evaluation points.
    pub g_tilde_norm: Vec<f64>,
    /// Full per-step record, present when diagnostics are recorded.
    pub steps: Vec<StepRecord>,
}

impl TrajectoryRecord {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn dim(&self) -> usize {
        self.terminal().len()
    }

    /// One row per state. Diagnostic columns are empty on the terminal row
    /// and absent when diagnostics were not recorded.
    pub fn to_table(&self) -> CsvTable {
        let d = self.dim();
        let mut header: Vec<String> = vec!["step".into(), "t".into()];
        header.extend((0..d).map(|i| format!("x_{i}")));
        header.push("g_tilde_norm".into());
        let diag = !self.steps.is_empty();
        if diag {
            for name in ["v_u", "v_c", "g", "g_par", "g_perp", "g_tilde"] {
                header.extend((0..d).map(|i| format!("{name}_{i}")));
            }
            header.extend(
                [
                    "omega_t",
                    "degenerate",
                    "div_cond",
                    "div_uncond",
                    "div_g",
                    "div_g_par",
                    "div_g_perp",
                    "div_g_tilde",
                    "hutchinson_div_g_tilde",
                    "hutchinson_stderr",
                ]
                .map(String::from),
            );
        }
        let width = header.len();
        let mut table = CsvTable::new(header);
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![k.to_string(), fmt_f64(*t)];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            row.push(opt(self.g_tilde_norm.get(k).copied()));
            if diag {
                if let Some(s) = self.steps.get(k) {
                    let b = &s.eval.breakdown;
                    for v in [&s.eval.v_u, &s.eval.v_c, &b.g, &b.g_par, &b.g_perp, &b.g_tilde] {
                        row.extend(v.iter().map(|v| fmt_f64(*v)));
                    }
                    row.push(fmt_f64(b.omega_t));
                    row.push((b.degenerate as u8).to_string());
                    let p = s.diagnostics.pair;
                    let g = s.diagnostics.guidance;
                    let h = s.diagnostics.hutchinson;
                    row.push(opt(p.map(|p| p.cond)));
                    row.push(opt(p.map(|p| p.uncond)));
                    row.push(opt(g.map(|g| g.g)));
                    row.push(opt(g.map(|g| g.g_par)));
                    row.push(opt(g.map(|g| g.g_perp)));
                    row.push(opt(g.map(|g| g.g_tilde)));
                    row.push(opt(h.map(|h| h.value)));
                    row.push(opt(h.map(|h| h.stderr)));
                }
                row.resize(width, String::new());
            }
            table.push(row);
        }
        table
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Euler integration of `flow` from `x0` over the sampler grid.
pub fn integrate_flow(
    flow: &dyn GuidedFlow,
    x0: &[f64],
    schedule: &Schedule,
    config: &SamplerConfig,
) -> Result<TrajectoryRecord> {
    config.validate(schedule)?;
    check_len(flow.dim(), x0.len())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Config("initial state must be finite".into()));
    }
    let times = config.grid();
    let mut states = Vec::with_capacity(times.len());
    let mut norms = Vec::with_capacity(config.steps);
    let mut steps = Vec::new();
    let mut x = x0.to_vec();
    states.push(x.clone());
    for k in 0..config.steps {
        let t = times[k];
        let dt = times[k + 1] - t;
        let eval = flow.eval(&x, t)?;
        norms.push(norm2(&eval.breakdown.g_tilde).sqrt());
        let v = eval.velocity();
        let next: Vec<f64> = x.iter().zip(&v).map(|(x, v)| x + dt * v).collect();
        if config.record_diagnostics {
            let diagnostics = flow.diagnostics(&x, t, config.hutchinson.as_ref())?;
            steps.push(StepRecord { t, eval, diagnostics });
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Integration { last_valid_step: k });
        }
        x = next;
        states.push(x.clone());
    }
    Ok(TrajectoryRecord {
        times,
        states,
        g_tilde_norm: norms,
        steps,
    })
}

/// Guided Euler sampling between the exact velocities of `pair`.
pub fn integrate(
    x0: &[f64],
    pair: &TargetPair,
    schedule: &Schedule,
    guidance: &GuidanceConfig,
    config: &SamplerConfig,
) -> Result<TrajectoryRecord> {
    guidance.validate()?;
    let flow = PairFlow {
        pair,
        schedule,
        guidance: *guidance,
    };
    integrate_flow(&flow, x0, schedule, config)
}

/// Standard-normal initial state for trajectory `index`.
///
/// Each index reads its own ChaCha8 stream of `seed`; with `antithetic`,
/// odd indices reuse the previous even index's draw negated.
pub fn initial_noise(seed: u64, index: usize, dim: usize, antithetic: bool) -> Vec<f64> {
    let (stream, sign) = if antithetic {
        ((index / 2) as u64, if index % 2 == 1 { -1.0 } else { 1.0 })
    } else {
        (index as u64, 1.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..dim).map(|_| sign * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            f64::INFINITY
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
        };
        Self { mean, stderr }
    }
}

/// Per-state averages over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub times: Vec<f64>,
    /// Mean `|g_tilde|` per step (`steps` entries).
    pub mean_g_tilde_norm: Vec<f64>,
    /// Mean `log p^u_t(x_t)` per state (`steps + 1` entries).
    pub log_p_uncond: Vec<MeanStderr>,
    /// Mean `log p^c_t(x_t)` per state.
    pub log_p_cond: Vec<MeanStderr>,
}

impl BatchSummary {
    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new([
            "step",
            "t",
            "mean_g_tilde_norm",
            "mean_log_p_uncond",
            "stderr_log_p_uncond",
            "mean_log_p_cond",
            "stderr_log_p_cond",
        ]);
        for k in 0..self.times.len() {
            let g = self.mean_g_tilde_norm.get(k).map(|v| fmt_f64(*v)).unwrap_or_default();
            let (u, c) = (self.log_p_uncond[k], self.log_p_cond[k]);
            t.push(vec![
                k.to_string(),
                fmt_f64(self.times[k]),
                g,
                fmt_f64(u.mean),
                fmt_f64(u.stderr),
                fmt_f64(c.mean),
                fmt_f64(c.stderr),
            ]);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    /// `n x D` terminal states, in trajectory-index order.
    pub terminals: Vec<Vec<f64>>,
    pub summary: BatchSummary,
    /// Full records, kept only when diagnostics were requested.
    pub trajectories: Vec<TrajectoryRecord>,
}

/// `n` independent trajectories from seeded noise, summarized against the
/// oracle marginals of `oracle`.
pub fn batch_integrate_flow(
    flow: &dyn GuidedFlow,
    oracle: &TargetPair,
    schedule: &Schedule,
    config: &SamplerConfig,
    n: usize,
) -> Result<BatchResult> {
    if n == 0 {
        return Err(LabError::Config("batch size must be >= 1".into()));
    }
    config.validate(schedule)?;
    check_len(oracle.dim(), flow.dim())?;
    let d = flow.dim();
    let records: Vec<TrajectoryRecord> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x0 = initial_noise(config.seed, i, d, config.antithetic);
            integrate_flow(flow, &x0, schedule, config)
        })
        .collect::<Result<_>>()?;
    let times = config.grid();
    let log_p = |target: &GaussianMixture| -> Result<Vec<MeanStderr>> {
        times
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let m = target.at(schedule, *t)?;
                let vals: Vec<f64> = records.iter().map(|r| m.log_density(&r.states[k])).collect();
                Ok(MeanStderr::of(&vals))
            })
            .collect()
    };
    let log_p_uncond = log_p(&oracle.unconditional)?;
    let log_p_cond = log_p(&oracle.conditional)?;
    let mean_g_tilde_norm = (0..config.steps)
        .map(|k| records.iter().map(|r| r.g_tilde_norm[k]).sum::<f64>() / n as f64)
        .collect();
    let terminals = records.iter().map(|r| r.terminal().to_vec()).collect();
    Ok(BatchResult {
        terminals,
        summary: BatchSummary {
            times,
            mean_g_tilde_norm,
            log_p_uncond,
            log_p_cond,
        },
        trajectories: if config.record_diagnostics { records } else { Vec::new() },
    })
}

/// [`batch_integrate_flow`] for guidance between the velocities of `pair`.
pub fn batch_integrate(
    pair: &TargetPair,
    schedule: &Schedule,
    guidance: &GuidanceConfig,
    config: &SamplerConfig,
    n: usize,
) -> Result<BatchResult> {
    guidance.validate()?;
    let flow = PairFlow {
        pair,
        schedule,
        guidance: *guidance,
    };
    batch_integrate_flow(&flow, pair, schedule, config, n)
}
