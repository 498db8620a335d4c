use std::collections::BTreeSet;

use htdc_core::GateMode;
use htdc_harness::gen::MixWeights;
use htdc_harness::metrics::Confusion;
use htdc_harness::sweep::parse_values;
use htdc_harness::{
    generate, run, sweep, BackendSpec, Decoder, Family, HarnessConfig, Recipe, SweepAxis, TaskInstance,
};

fn data(family: Family, count: usize, seed: u64) -> Vec<TaskInstance> {
    generate(&Recipe {
        family,
        count,
        vocab_size: 24,
        num_layers: 16,
        seed,
        weights: None,
    })
    .unwrap()
}

fn mixed(count: usize) -> Vec<TaskInstance> {
    generate(&Recipe {
        family: Family::Mixed,
        count,
        vocab_size: 24,
        num_layers: 16,
        seed: 3,
        weights: Some(MixWeights {
            calm: 1.0,
            oscillating: 1.0,
            prior_bias: 1.0,
            procedural: 3.0,
        }),
    })
    .unwrap()
}

#[test]
fn calm_steps_never_trigger() {
    let r = run(
        &HarnessConfig::default(),
        &data(Family::Calm, 100, 1),
        &BackendSpec::Synthetic,
    )
    .unwrap();
    assert_eq!(r.trigger_rate, 0.0);
    assert_eq!(r.n_fwd, 1.0);
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn oscillating_steps_always_trigger() {
    let ds = data(Family::Oscillating, 100, 2);
    let r = run(&HarnessConfig::default(), &ds, &BackendSpec::Synthetic).unwrap();
    assert_eq!(r.trigger_rate, 1.0);
    assert_eq!(r.n_fwd, 3.0);
    assert!(r.instances.iter().all(|i| i.hes > 1.0));
}

#[test]
fn prior_bias_split_is_exact() {
    let ds = data(Family::PriorBias, 200, 0);
    let yes = ds.iter().filter(|i| i.ground_truth == "yes").count();
    assert_eq!(yes, 100);
}

#[test]
fn f1_matches_an_independent_count() {
    let ds = mixed(300);
    let r = run(&HarnessConfig::default(), &ds, &BackendSpec::Synthetic).unwrap();
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for i in &r.instances {
        let said_yes = i.chosen.as_deref() == Some("yes");
        let is_yes = i.truth == "yes";
        tp += f64::from(u8::from(said_yes && is_yes));
        fp += f64::from(u8::from(said_yes && !is_yes));
        fn_ += f64::from(u8::from(!said_yes && is_yes));
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    let f1 = 2.0 * precision * recall / (precision + recall);
    assert!((r.f1 - f1).abs() < 1e-12, "{} vs {f1}", r.f1);
    let c = r.confusion;
    assert_eq!((c.tp + c.fp + c.fn_ + c.tn) as usize, r.decoded);
}

#[test]
fn f1_is_zero_without_positives() {
    let mut c = Confusion::default();
    c.add("no", "no", "yes");
    assert_eq!(c.f1(), 0.0);
}

#[test]
fn trigger_rate_is_non_increasing_in_w_min() {
    let ds = mixed(200);
    let s = sweep(
        &HarnessConfig::default(),
        &ds,
        &BackendSpec::Synthetic,
        SweepAxis::WMin,
        &parse_values("0,0.25,0.5,0.75,1.0"),
    )
    .unwrap();
    let rates: Vec<f64> = s.rows.iter().map(|r| r.report.trigger_rate).collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
    assert_eq!(*rates.last().unwrap(), 0.0);
    assert!(rates[0] > rates[4]);
}

#[test]
fn zero_noise_zeroes_the_visual_signal() {
    let ds = data(Family::Mixed, 200, 4)
        .into_iter()
        .filter(|i| i.id.starts_with("proc-"))
        .collect::<Vec<_>>();
    assert!(!ds.is_empty());
    let mut cfg = HarnessConfig::default();
    cfg.calibration.gate_mode = GateMode::Static;
    let s = sweep(
        &cfg,
        &ds,
        &BackendSpec::Synthetic,
        SweepAxis::SigmaNoise,
        &parse_values("0,0.8"),
    )
    .unwrap();
    assert_eq!(s.rows[0].report.max_abs_d_v, 0.0);
    assert!(s.rows[1].report.max_abs_d_v > 0.0);
}

#[test]
fn static_mode_ignores_the_hesitation_knobs() {
    let ds = mixed(150);
    let mut a = HarnessConfig::default();
    a.calibration.gate_mode = GateMode::Static;
    let mut b = a.clone();
    b.hesitation.delta = 3.0;
    b.hesitation.tau_kw = 0.2;
    b.hesitation.w_min = 0.99;
    b.hesitation.layer_depth_k = Some(3);
    let (ra, rb) = (
        run(&a, &ds, &BackendSpec::Synthetic).unwrap(),
        run(&b, &ds, &BackendSpec::Synthetic).unwrap(),
    );
    let picks = |r: &htdc_harness::RunReport| r.instances.iter().map(|i| i.chosen.clone()).collect::<Vec<_>>();
    assert_eq!(picks(&ra), picks(&rb));
    assert_eq!((ra.n_fwd, rb.n_fwd), (3.0, 3.0));
}

#[test]
fn lambda_zero_matches_regular_decoding() {
    let ds = mixed(200);
    let mut cfg = HarnessConfig::default();
    cfg.calibration.lambda_v = 0.0;
    cfg.calibration.lambda_x = 0.0;
    let htdc = run(&cfg, &ds, &BackendSpec::Synthetic).unwrap();
    cfg.run.decoder = Decoder::Regular;
    let reg = run(&cfg, &ds, &BackendSpec::Synthetic).unwrap();
    assert_eq!(htdc.accuracy, reg.accuracy);
    assert_eq!(htdc.flip_rate, 0.0);
    assert!(htdc.trigger_rate > 0.0);
}

#[test]
fn regular_decoding_agrees_with_htdc_off_trigger() {
    let ds = mixed(300);
    let cfg = HarnessConfig::default();
    let htdc = run(&cfg, &ds, &BackendSpec::Synthetic).unwrap();
    let mut rc = cfg.clone();
    rc.run.decoder = Decoder::Regular;
    let reg = run(&rc, &ds, &BackendSpec::Synthetic).unwrap();
    for (h, r) in htdc.instances.iter().zip(&reg.instances) {
        assert_eq!(h.w_t, r.w_t);
        if !h.triggered {
            assert_eq!(h.chosen, r.chosen, "{}", h.id);
        }
    }
}

#[test]
fn seed_changes_only_noisy_instances() {
    let ds = mixed(120);
    let mut cfg = HarnessConfig::default();
    cfg.calibration.gate_mode = GateMode::Static;
    let a = run(&cfg, &ds, &BackendSpec::Synthetic).unwrap();
    cfg.run.seed = 99;
    let b = run(&cfg, &ds, &BackendSpec::Synthetic).unwrap();
    assert_ne!(a.fingerprint, b.fingerprint);
    assert_ne!(a.config_fingerprint, b.config_fingerprint);
    let scripted: BTreeSet<&str> = ds
        .iter()
        .filter(|i| !i.id.starts_with("proc-"))
        .map(|i| i.id.as_str())
        .collect();
    for (x, y) in a.instances.iter().zip(&b.instances) {
        if scripted.contains(x.id.as_str()) {
            assert_eq!(x.chosen, y.chosen);
        }
    }
}
