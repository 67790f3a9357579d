use guidance_lab::config::ExperimentConfig;
use guidance_lab::divergence::{
    divergence_fd_dense, divergence_profile, guidance_divergence_exact, DivMethod, HutchinsonConfig, CFG_LABEL,
};
use guidance_lab::experiments::{random_points, reference_profile, ring_pair, trajectories};
use guidance_lab::field::VectorField;
use guidance_lab::guidance::{GuidanceComponent, GuidanceConfig, GuidanceField};
use guidance_lab::sampler::SamplerConfig;
use guidance_lab::schedule::Schedule;

#[test]
fn profile_rows_match_across_methods() {
    let pair = ring_pair(0.5, 0.25).unwrap();
    let s = Schedule::default();
    let sampler = SamplerConfig {
        steps: 8,
        ..SamplerConfig::default()
    };
    let refs = trajectories(&pair, &s, &GuidanceConfig::cfg(1.0), &sampler, 2).unwrap();
    let betas = [0.1, 1.0];
    let base = GuidanceConfig::default();
    let exact = divergence_profile(&pair, &s, &base, &betas, &refs, &DivMethod::Exact).unwrap();
    let fd = divergence_profile(&pair, &s, &base, &betas, &refs, &DivMethod::FiniteDifference { step: 1e-5 }).unwrap();
    let hutch = divergence_profile(
        &pair,
        &s,
        &base,
        &betas,
        &refs,
        &DivMethod::Hutchinson(HutchinsonConfig {
            probes: 4096,
            ..HutchinsonConfig::default()
        }),
    )
    .unwrap();
    for k in 0..exact.times.len() {
        let scale = exact.div_cond[k].max(1.0);
        assert!((exact.div_cond[k] - fd.div_cond[k]).abs() < 1e-5 * scale);
        for b in 0..betas.len() {
            let e = exact.div_g_tilde[b][k];
            assert!((e - fd.div_g_tilde[b][k]).abs() < 1e-5 * e.max(1.0));
            assert!((e - hutch.div_g_tilde[b][k]).abs() < 0.1 * e.max(0.1), "{e} {}", hutch.div_g_tilde[b][k]);
        }
    }
    assert_eq!(exact.labels(), vec![("div_g_beta_1".to_string(), CFG_LABEL.to_string())]);
}

#[test]
fn cfg_row_is_raw_residual() {
    let mut cfg = ExperimentConfig::default();
    cfg.sampler.steps = 10;
    cfg.profile_trajectories = 2;
    let p = reference_profile(&cfg, &[1.0]).unwrap();
    let pair = cfg.targets.build().unwrap();
    let refs = trajectories(
        &pair,
        &cfg.schedule,
        &GuidanceConfig::cfg(1.0),
        &SamplerConfig {
            record_diagnostics: false,
            ..cfg.sampler
        },
        2,
    )
    .unwrap();
    for (k, &t) in p.times.iter().enumerate() {
        let raw: f64 = refs
            .iter()
            .map(|r| {
                guidance_divergence_exact(&pair, &cfg.schedule, &cfg.guidance, t, &r.states[k])
                    .unwrap()
                    .g
                    .abs()
                    / 2.0
            })
            .sum::<f64>()
            / 2.0;
        assert!((p.div_g_tilde[0][k] - raw).abs() <= 1e-12 * raw.max(1e-300), "{} {raw}", p.div_g_tilde[0][k]);
    }
}

#[test]
fn guided_field_divergence_vs_dense_fd_both_rules() {
    let pair = ring_pair(0.5, 0.25).unwrap();
    let s = Schedule::default();
    for config in [GuidanceConfig::cfg(3.0), GuidanceConfig::adamag(7.0, 0.1, 4.0)] {
        let f = GuidanceField {
            pair: &pair,
            schedule: &s,
            config,
            component: GuidanceComponent::Guided,
        };
        for (t, x) in random_points(&pair, &s, 20, (0.1, 0.9), 5).unwrap() {
            let e = f.exact_divergence(&x, t).unwrap();
            let fd = divergence_fd_dense(&f, t, &x, 1e-5).unwrap();
            assert!((e - fd).abs() < 1e-5 * e.abs().max(1.0), "{e} {fd}");
        }
    }
}
