use std::path::PathBuf;

use proptest::prelude::*;
use spa_core::golden::{self, StoredTensor};
use spa_core::harness::fit::group_digest;
use spa_core::harness::gradcheck::{analytic_gradients, compare_gradients, numeric_gradients, probe};
use spa_core::harness::regression::{load_cases, Outcome};
use spa_core::harness::*;
use spa_core::sequence::validate_video;
use spa_core::{CompressorConfig, EventMode, ParamGroup, PreparedVideo, SpaError, SpaModel, Tape, Tensor};

fn toy_spec() -> SyntheticVideoSpec {
    SyntheticVideoSpec::new(2, 1, 2, 8, 0)
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../golden")
}

// ---- generate ----

#[test]
fn generated_videos_have_requested_counts_and_are_deterministic() {
    let spec = SyntheticVideoSpec::new(4, 2, 3, 5, 9);
    let (frames, sentences) = generate::<f64>(&spec).unwrap();
    assert_eq!((frames.len(), sentences.len()), (4, 2));
    let (again, again_s) = generate::<f64>(&spec).unwrap();
    for (a, b) in frames.iter().zip(&again) {
        assert_eq!(a.vision_tokens, b.vision_tokens);
        assert_eq!(a.time_seconds.to_bits(), b.time_seconds.to_bits());
    }
    for (a, b) in sentences.iter().zip(&again_s) {
        assert_eq!((a.start.to_bits(), a.end.to_bits()), (b.start.to_bits(), b.end.to_bits()));
        assert_eq!(a.tokens, b.tokens);
    }
}

#[test]
fn infeasible_specs_are_rejected() {
    let mut spec = SyntheticVideoSpec::new(2, 30, 1, 2, 0);
    assert!(generate::<f64>(&spec).is_err());
    spec.sentences = 1;
    spec.l_s_min = 0;
    assert!(generate::<f64>(&spec).is_err());
    assert!(generate::<f64>(&SyntheticVideoSpec::new(0, 0, 1, 2, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_specs_yield_valid_videos(
        n in 1usize..20, m in 0usize..20, lv in 1usize..5, d in 1usize..6, seed in any::<u64>(),
        step in 0.05f64..3.0, lo in 1usize..4, extra in 0usize..4,
    ) {
        let spec = SyntheticVideoSpec {
            l_s_min: lo,
            l_s_max: lo + extra,
            frame_step: step,
            min_sentence_seconds: 0.0,
            ..SyntheticVideoSpec::new(n, m, lv, d, seed)
        };
        let (frames, sentences) = generate::<f64>(&spec).unwrap();
        prop_assert!(validate_video(&frames, &sentences).is_ok());
        prop_assert_eq!(frames.len(), n);
        prop_assert_eq!(sentences.len(), m);
        for s in &sentences {
            prop_assert!(s.end <= spec.duration() + 1e-9);
            prop_assert!((lo..=lo + extra).contains(&s.tokens.shape()[0]));
        }
    }
}

// ---- gradcheck ----

#[test]
fn toy_gradcheck_passes_in_both_modes() {
    for mode in [EventMode::FrameConditioned, EventMode::PaperLiteral] {
        let config = CompressorConfig { mode, ..CompressorConfig::toy() };
        let report = gradcheck(&config, &toy_spec(), &GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        for g in ParamGroup::ALL {
            let r = report.group(g).unwrap();
            assert_eq!(r.status, GroupStatus::Pass, "{report}");
            assert!(r.elements > 0);
        }
    }
}

#[test]
fn frozen_time_encoder_is_reported_and_receives_no_gradient() {
    let options = GradcheckOptions {
        frozen: vec![ParamGroup::TimeEncoder],
        ..Default::default()
    };
    let report = gradcheck(&CompressorConfig::toy(), &toy_spec(), &options).unwrap();
    assert!(report.passed());
    assert_eq!(report.group(ParamGroup::TimeEncoder).unwrap().status, GroupStatus::Frozen);

    let config = CompressorConfig::toy();
    let model = SpaModel::<f64>::new(&config).unwrap();
    let (frames, sentences) = generate::<f64>(&toy_spec()).unwrap();
    let video = PreparedVideo::new(&config, &frames, &sentences).unwrap();
    let mut tape = Tape::with_frozen([ParamGroup::TimeEncoder]);
    let trace = model.record(&mut tape, &video).unwrap();
    let upstream = Tensor::full(tape.value(trace.output).unwrap().shape().to_vec(), 1.0);
    let grads = tape.backward(trace.output, &upstream).unwrap();
    let time: Vec<_> = tape.params().iter().filter(|b| b.group == ParamGroup::TimeEncoder).collect();
    assert!(!time.is_empty() && time.iter().all(|b| b.frozen));
    for b in &time {
        assert!(matches!(grads.get(b.var), Err(SpaError::NotDifferentiable { .. })));
    }
    assert!(grads.named().keys().all(|k| !k.starts_with("time.")));
}

#[test]
fn corrupted_gradient_fails_the_check() {
    let config = CompressorConfig::toy();
    let mut model = SpaModel::<f64>::new(&config).unwrap();
    let (frames, sentences) = generate::<f64>(&toy_spec()).unwrap();
    let video = PreparedVideo::new(&config, &frames, &sentences).unwrap();
    let p = probe(&[1, config.output_tokens(2), config.d], 1);
    let mut analytic = analytic_gradients(&model, &video, &p, &[]).unwrap();
    let numeric = numeric_gradients(&mut model, &video, &p, 1e-5, &[]).unwrap();
    assert!(compare_gradients(&model, &analytic, &numeric, &[], 1e-4).unwrap().passed());

    // a 1% error in one FFN weight
    let g = analytic.get_mut("scene.layer0.ffn.w1").unwrap();
    g.data_mut()[3] *= 1.01;
    let report = compare_gradients(&model, &analytic, &numeric, &[], 1e-4).unwrap();
    assert!(!report.passed());
    let ffn = report.group(ParamGroup::Ffn).unwrap();
    assert_eq!(ffn.status, GroupStatus::Fail);
    assert_eq!(ffn.worst.as_deref(), Some("scene.layer0.ffn.w1"));
    assert_eq!(report.group(ParamGroup::Attention).unwrap().status, GroupStatus::Pass);

    analytic.remove("event.queries");
    assert!(compare_gradients(&model, &analytic, &numeric, &[], 1e-4).is_err());
}

#[test]
fn gradcheck_rejects_non_positive_tolerance() {
    for tolerance in [0.0, -1e-4, f64::NAN] {
        let options = GradcheckOptions { tolerance, ..Default::default() };
        assert!(gradcheck(&CompressorConfig::toy(), &toy_spec(), &options).is_err());
    }
}

// ---- fit ----

#[test]
fn toy_fit_halves_the_loss_and_keeps_frozen_groups() {
    let result = fit(&CompressorConfig::toy(), &toy_spec(), &FitConfig::default()).unwrap();
    assert_eq!(result.losses.len(), 201);
    assert!(result.final_loss() <= 0.5 * result.initial_loss(), "{:?}", (result.initial_loss(), result.final_loss()));
    assert_eq!(result.frozen_digest_before, result.frozen_digest_after);

    // compressor groups did move
    let untouched = SpaModel::<f64>::new(&CompressorConfig::toy()).unwrap();
    let trained = [ParamGroup::Queries, ParamGroup::Attention, ParamGroup::Ffn, ParamGroup::LayerNorm];
    assert_ne!(group_digest(&untouched, &trained), group_digest(&result.model, &trained));
    assert_eq!(
        group_digest(&untouched, &[ParamGroup::TimeEncoder]),
        group_digest(&result.model, &[ParamGroup::TimeEncoder])
    );

    let mut csv = Vec::new();
    result.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("step,loss\n0,"));
    assert_eq!(text.lines().count(), 202);
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let cfg = FitConfig { steps: 5, learning_rate: 0.0, ..Default::default() };
    let result = fit(&CompressorConfig::toy(), &toy_spec(), &cfg).unwrap();
    assert!(result.losses.iter().all(|l| l.to_bits() == result.losses[0].to_bits()));
}

#[test]
fn self_target_stays_at_zero() {
    let cfg = FitConfig { steps: 20, teacher: Teacher::SelfInitial, ..Default::default() };
    let result = fit(&CompressorConfig::toy(), &toy_spec(), &cfg).unwrap();
    assert!(result.losses.iter().all(|&l| l <= 1e-10), "{:?}", result.losses);
}

#[test]
fn fit_errors() {
    let toy = CompressorConfig::toy();
    assert!(fit(&toy, &toy_spec(), &FitConfig { steps: 0, ..Default::default() }).is_err());
    assert!(fit(&toy, &toy_spec(), &FitConfig { learning_rate: -0.1, ..Default::default() }).is_err());
    match fit(&toy, &toy_spec(), &FitConfig { steps: 50, learning_rate: 1e300, ..Default::default() }) {
        Err(SpaError::Divergence { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.losses)),
    }
}

// ---- golden regression ----

#[test]
fn checked_in_golden_files_verify() {
    let cases = load_cases(golden_dir().join("cases.ini")).unwrap();
    assert!(cases.len() >= 4);
    for result in verify(&cases, golden_dir()).unwrap() {
        assert!(result.passed(), "{result}");
    }
}

#[test]
fn golden_emit_verify_and_sensitivity() {
    let cases = load_cases(golden_dir().join("cases.ini")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit(&cases, dir.path()).unwrap();
    assert!(verify(&cases, dir.path()).unwrap().iter().all(|r| r.passed()));

    let path = dir.path().join("toy-conditioned.spat");
    let mut t: Tensor<f64> = golden::read_tensor(&path).unwrap().into_tensor();
    t.data_mut()[7] += 1e-6;
    golden::write_tensor(&path, &t).unwrap();
    let results = verify(&cases, dir.path()).unwrap();
    let bad: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].name, "toy-conditioned");
    match &bad[0].outcome {
        Outcome::Mismatch { index, .. } => assert_eq!(*index, t.multi_index(7)),
        other => panic!("{other:?}"),
    }

    std::fs::remove_file(dir.path().join("wide.spat")).unwrap();
    let missing = verify(&cases, dir.path()).unwrap();
    assert!(matches!(missing.iter().find(|r| r.name == "wide").unwrap().outcome, Outcome::Missing(_)));
}

#[test]
fn golden_modes_differ() {
    let read = |name: &str| -> Tensor<f64> {
        match golden::read_tensor(golden_dir().join(format!("{name}.spat"))).unwrap() {
            StoredTensor::F64(t) => t,
            StoredTensor::F32(_) => panic!("{name} stored as f32"),
        }
    };
    let literal = read("toy-literal");
    let conditioned = read("toy-conditioned");
    assert_eq!(literal.shape(), conditioned.shape());
    // the scene block is shared, the event blocks are not
    let s = 2;
    let d = 8;
    assert_eq!(literal.data()[..s * d], conditioned.data()[..s * d]);
    assert!(literal.max_abs_diff(&conditioned).unwrap() > 1e-6);
}

#[test]
fn single_precision_golden_is_stored_narrow() {
    match golden::read_tensor(golden_dir().join("toy-conditioned-f32.spat")).unwrap() {
        StoredTensor::F32(t) => assert_eq!(t.shape(), &[1, 2 + 2 * 3, 8]),
        StoredTensor::F64(_) => panic!("expected f32"),
    }
}
