mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use spa_core::compressor::{EventParams, FusionParams, SceneParams};
use spa_core::harness::{generate, SyntheticVideoSpec};
use spa_core::params::Initializer;
use spa_core::{
    aggregate_scene, assemble, extract_events, fuse_vision_asr, layer_norm, CompressorConfig, EventMode,
    PreparedVideo, SpaError, SpaModel, Tape, Tensor,
};

fn fusion_params(seed: u64, d: usize, heads: usize) -> FusionParams<f64> {
    let mut p = FusionParams::new(d, heads, 3 * d, true, &mut Initializer::new(seed)).unwrap();
    // non-trivial norms so scale/shift are exercised
    let mut r = rng(seed ^ 0xabc);
    p.asr_norm = random_layer_norm(&mut r, d);
    p.vision_norm = random_layer_norm(&mut r, d);
    p.ffn_norm = random_layer_norm(&mut r, d);
    p
}

/// `[N, L_v, D]` tensor split into per-frame matrices.
fn frames_of(v: &Tensor<f64>) -> Vec<Mat> {
    let (n, lv, d) = (v.shape()[1], v.shape()[2], v.shape()[3]);
    (0..n)
        .map(|i| to_mat(&v.slice(1, i, 1).unwrap().into_reshaped(vec![lv, d]).unwrap()))
        .collect()
}

fn vision_flat(v: &Tensor<f64>, p: &FusionParams<f64>) -> Tensor<f64> {
    let s = v.shape();
    layer_norm(v, &p.vision_norm).unwrap().into_reshaped(vec![s[0], s[1] * s[2], s[3]]).unwrap()
}

#[test]
fn fusion_matches_naive_composition() {
    let mut r = rng(30);
    for trial in 0..20 {
        let (la, n, lv) = if trial == 0 { (2, 2, 2) } else { (r.random_range(1..5), r.random_range(1..4), r.random_range(1..4)) };
        let a = random_tensor(&mut r, &[1, la, 4]);
        let v = random_tensor(&mut r, &[1, n, lv, 4]);
        let p = fusion_params(trial, 4, 2);
        let got = fuse_vision_asr(&a, &v, &p).unwrap();
        let (want, _) = fusion(&to_mat(&a), &frames_of(&v), &p);
        assert!(max_diff(&to_mat(&got), &want) < 1e-10);
    }
}

#[test]
fn fusion_errors() {
    let p = fusion_params(0, 4, 2);
    let a = Tensor::<f64>::zeros(vec![1, 2, 4]);
    assert!(fuse_vision_asr(&a, &Tensor::zeros(vec![1, 0, 3, 4]), &p).is_err());
    assert!(fuse_vision_asr(&Tensor::zeros(vec![1, 0, 4]), &Tensor::full(vec![1, 1, 1, 4], 1.0), &p).is_err());
    assert!(matches!(
        fuse_vision_asr(&a, &Tensor::zeros(vec![1, 2, 3]), &p),
        Err(SpaError::Shape { .. })
    ));
}

#[test]
fn scene_matches_layer_by_layer_oracle() {
    let mut r = rng(31);
    for trial in 0..20 {
        let (s, layers) = if trial == 0 { (2, 2) } else { (r.random_range(1..4), r.random_range(1..4)) };
        let p = SceneParams::new(6, 3, s, layers, 12, true, &mut Initializer::new(trial)).unwrap();
        let len = r.random_range(0..4);
        let a = random_tensor(&mut r, &[1, len, 6]);
        let len = r.random_range(1..5);
        let vf = random_tensor(&mut r, &[1, len, 6]);
        let got = aggregate_scene(&a, &vf, &p).unwrap();
        assert_eq!(got.shape(), &[1, s, 6]);
        assert!(max_diff(&to_mat(&got), &scene(&to_mat(&a), &to_mat(&vf), &p)) < 1e-10);
    }
}

#[test]
fn scene_queries_broadcast_over_batch() {
    let mut r = rng(32);
    let p = SceneParams::new(4, 2, 3, 1, 8, true, &mut Initializer::new(1)).unwrap();
    let a = random_tensor(&mut r, &[2, 2, 4]);
    let vf = random_tensor(&mut r, &[2, 3, 4]);
    let got = aggregate_scene(&a, &vf, &p).unwrap();
    for b in 0..2 {
        let ab = to_mat(&a.slice(0, b, 1).unwrap());
        let vb = to_mat(&vf.slice(0, b, 1).unwrap());
        assert!(max_diff(&to_mat(&got.slice(0, b, 1).unwrap()), &scene(&ab, &vb, &p)) < 1e-10);
    }
}

#[test]
fn events_match_oracle_in_both_modes() {
    let mut r = rng(33);
    for trial in 0..20 {
        let (e, layers) = if trial == 0 { (1, 1) } else { (r.random_range(1..4), r.random_range(1..3)) };
        let p = EventParams::new(4, 2, e, layers, 8, true, &mut Initializer::new(trial)).unwrap();
        let n = r.random_range(1..4);
        let len = r.random_range(0..3);
        let a = random_tensor(&mut r, &[1, len, 4]);
        let len = r.random_range(1..3);
        let sc = random_tensor(&mut r, &[1, len, 4]);
        let v = random_tensor(&mut r, &[1, n, 2, 4]);
        for mode in [EventMode::PaperLiteral, EventMode::FrameConditioned] {
            let got = extract_events(&a, &sc, &v, &p, mode).unwrap();
            assert_eq!(got.shape(), &[1, n, e, 4]);
            let want: Mat = events(&to_mat(&a), &to_mat(&sc), &frames_of(&v), &p, mode).concat();
            assert!(max_diff(&to_mat(&got), &want) < 1e-10, "{mode:?}");
        }
    }
}

#[test]
fn unknown_mode_is_an_error() {
    assert!(matches!("frame-literal".parse::<EventMode>(), Err(SpaError::UnknownMode(_))));
}

#[test]
fn zeroed_branches_leave_normalized_inputs() {
    let mut r = rng(34);
    let mut fusion_p = fusion_params(1, 4, 2);
    fusion_p.zero_branch_outputs();
    let a = random_tensor(&mut r, &[1, 3, 4]);
    let v = random_tensor(&mut r, &[1, 2, 2, 4]);
    assert!(fuse_vision_asr(&a, &v, &fusion_p).unwrap().max_abs_diff(&layer_norm(&a, &fusion_p.asr_norm).unwrap()).unwrap() == 0.0);

    let mut scene_p = SceneParams::new(4, 2, 1, 2, 8, true, &mut Initializer::new(2)).unwrap();
    scene_p.zero_branch_outputs();
    let h = aggregate_scene(&a, &vision_flat(&v, &fusion_p), &scene_p).unwrap();
    let q = layer_norm(&scene_p.queries, &scene_p.query_norm).unwrap();
    assert_eq!(h.data(), q.data());

    let mut event_p = EventParams::new(4, 2, 3, 2, 8, true, &mut Initializer::new(3)).unwrap();
    event_p.zero_branch_outputs();
    let q = layer_norm(&event_p.queries, &event_p.query_norm).unwrap();
    for mode in [EventMode::PaperLiteral, EventMode::FrameConditioned] {
        let ev = extract_events(&a, &h, &v, &event_p, mode).unwrap();
        for i in 0..2 {
            assert_eq!(ev.slice(1, i, 1).unwrap().data(), q.data());
        }
    }
}

#[test]
fn scene_ignores_frame_order_and_context_order() {
    let mut r = rng(35);
    for trial in 0..20 {
        let p = fusion_params(trial, 4, 2);
        let sp = SceneParams::new(4, 2, 3, 2, 8, true, &mut Initializer::new(trial + 100)).unwrap();
        let n = r.random_range(2..5);
        let a = random_tensor(&mut r, &[1, 3, 4]);
        let v = random_tensor(&mut r, &[1, n, 2, 4]);
        // reverse the frames
        let parts: Vec<Tensor<f64>> = (0..n).rev().map(|i| v.slice(1, i, 1).unwrap()).collect();
        let v_rev = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 1).unwrap();

        let fused = fuse_vision_asr(&a, &v, &p).unwrap();
        let fused_rev = fuse_vision_asr(&a, &v_rev, &p).unwrap();
        assert!(fused.max_abs_diff(&fused_rev).unwrap() <= 1e-12);

        let h = aggregate_scene(&fused, &vision_flat(&v, &p), &sp).unwrap();
        let h_rev = aggregate_scene(&fused_rev, &vision_flat(&v_rev, &p), &sp).unwrap();
        assert!(h.max_abs_diff(&h_rev).unwrap() <= 1e-12);

        // moving ASR rows to the end of M_s changes nothing either
        let empty = Tensor::zeros(vec![1, 0, 4]);
        let m = Tensor::concat(&[&vision_flat(&v, &p), &fused], 1).unwrap();
        let h_swapped = aggregate_scene(&empty, &m, &sp).unwrap();
        assert!(h.max_abs_diff(&h_swapped).unwrap() <= 1e-12);
    }
}

fn model(config: &CompressorConfig) -> SpaModel<f64> {
    SpaModel::new(config).unwrap()
}

fn small_config(seed: u64, mode: EventMode) -> CompressorConfig {
    CompressorConfig {
        d: 8,
        heads: 2,
        s: 3,
        e: 2,
        l_s: 2,
        l_e: 2,
        l_v: 3,
        mode,
        seed,
        ..CompressorConfig::toy()
    }
}

#[test]
fn paper_literal_events_repeat_across_frames() {
    for seed in 0..10 {
        let c = small_config(seed, EventMode::PaperLiteral);
        let (frames, sentences) = generate::<f64>(&SyntheticVideoSpec::new(4, 2, 3, 8, seed)).unwrap();
        let out = model(&c).forward(&frames, &sentences).unwrap();
        let blocks = out.frame_blocks();
        let events = |b: &Tensor<f64>| b.slice(1, 1, c.e).unwrap();
        for b in &blocks[1..] {
            assert!(events(b).max_abs_diff(&events(&blocks[0])).unwrap() < 1e-12);
        }
    }
}

#[test]
fn frame_conditioned_events_follow_their_frame() {
    let mut smallest = f64::INFINITY;
    for seed in 0..10 {
        let c = small_config(seed, EventMode::FrameConditioned);
        let (frames, sentences) = generate::<f64>(&SyntheticVideoSpec::new(4, 2, 3, 8, seed)).unwrap();
        let out = model(&c).forward(&frames, &sentences).unwrap();
        let blocks = out.frame_blocks();
        for i in 0..blocks.len() {
            for j in i + 1..blocks.len() {
                let gap = blocks[i].slice(1, 1, c.e).unwrap().max_abs_diff(&blocks[j].slice(1, 1, c.e).unwrap()).unwrap();
                smallest = smallest.min(gap);
            }
        }
    }
    assert!(smallest > 1e-8, "closest pair of event blocks: {smallest}");
}

// ---- assembly ----

fn random_assembly(seed: u64, b: usize, s: usize, n: usize, e: usize, d: usize) -> (Tensor<f64>, Tensor<f64>, Vec<Tensor<f64>>) {
    let mut r = rng(seed);
    let scene = random_tensor(&mut r, &[b, s, d]);
    let events = random_tensor(&mut r, &[b, n, e, d]);
    let stamps = (0..n).map(|_| random_tensor(&mut r, &[d])).collect();
    (scene, events, stamps)
}

proptest! {
    #[test]
    fn assembly_matches_index_walk(seed in any::<u64>(), b in 1usize..3, s in 1usize..5, n in 0usize..5, e in 1usize..4, d in 1usize..4) {
        let (scene, events, stamps) = random_assembly(seed, b, s, n, e, d);
        let rep = assemble(&scene, &events, &stamps).unwrap();
        let flat = rep.flattened();
        let total = s + n * (1 + e);
        prop_assert_eq!(flat.shape(), &[b, total, d]);
        for g in 0..b {
            for t in 0..total {
                for k in 0..d {
                    let want = if t < s {
                        scene.data()[(g * s + t) * d + k]
                    } else {
                        let (i, j) = ((t - s) / (1 + e), (t - s) % (1 + e));
                        if j == 0 {
                            stamps[i].data()[k]
                        } else {
                            events.data()[((g * n + i) * e + j - 1) * d + k]
                        }
                    };
                    prop_assert_eq!(flat.data()[(g * total + t) * d + k].to_bits(), want.to_bits());
                }
            }
        }
        // blocks tile the output: scene, then timestamp and events per frame
        let blocks = rep.blocks();
        prop_assert_eq!(blocks.len(), 1 + 2 * n);
        prop_assert_eq!((blocks[0].start, blocks[0].end), (0, s));
        for i in 0..n {
            let (stamp, ev) = (&blocks[1 + 2 * i], &blocks[2 + 2 * i]);
            prop_assert_eq!((stamp.start, stamp.end), (s + i * (1 + e), s + i * (1 + e) + 1));
            prop_assert_eq!((ev.start, ev.end), (stamp.end, stamp.end + e));
            let fb = rep.frame_block(i).unwrap();
            prop_assert_eq!(&fb.data()[..d], stamps[i].data());
        }
        prop_assert_eq!(rep.scene_block(), scene);
    }
}

#[test]
fn default_token_count() {
    let (scene, events, stamps) = random_assembly(1, 1, 64, 144, 32, 1);
    let rep = assemble(&scene, &events, &stamps).unwrap();
    assert_eq!(rep.token_count(), 4816);
    assert_eq!(CompressorConfig::default().output_tokens(144), 4816);
}

#[test]
fn empty_video_and_timestamp_mismatch() {
    let (scene, events, _) = random_assembly(2, 1, 3, 0, 2, 4);
    assert_eq!(assemble(&scene, &events, &[]).unwrap().flattened(), &scene);
    let (scene, events, mut stamps) = random_assembly(3, 1, 3, 2, 2, 4);
    stamps.pop();
    assert!(assemble(&scene, &events, &stamps).is_err());
}

// ---- end to end ----

/// Naive forward of the whole model on one prepared video.
fn model_oracle(m: &SpaModel<f64>, video: &PreparedVideo<f64>) -> Mat {
    let a = to_mat(&video.asr);
    let frames = frames_of(&video.vision);
    let (fused, vf) = fusion(&a, &frames, &m.fusion);
    let sc = scene(&fused, &vf, &m.scene);
    let ev = events(&fused, &sc, &frames, &m.event, m.config.mode);
    let mut out = sc;
    for (i, block) in ev.into_iter().enumerate() {
        out.push(time_encoding(video.frame_times[i], &m.time_encoder));
        out.extend(block);
    }
    out
}

#[test]
fn model_matches_naive_pipeline() {
    for seed in 0..8 {
        for mode in [EventMode::PaperLiteral, EventMode::FrameConditioned] {
            let c = small_config(seed, mode);
            let sentences = (seed % 3) as usize; // includes the no-speech case
            let (frames, sents) = generate::<f64>(&SyntheticVideoSpec::new(3, sentences, 3, 8, seed)).unwrap();
            let m = model(&c);
            let video = PreparedVideo::new(&c, &frames, &sents).unwrap();
            let got = m.forward_prepared(&video).unwrap();
            assert!(max_diff(&to_mat(got.flattened()), &model_oracle(&m, &video)) < 1e-10);
        }
    }
}

#[test]
fn shape_law_over_random_configs() {
    let mut r = rng(36);
    for trial in 0..20 {
        let heads = r.random_range(1..4);
        let c = CompressorConfig {
            d: heads * r.random_range(1..4),
            heads,
            s: r.random_range(1..6),
            e: r.random_range(1..5),
            l_s: r.random_range(1..3),
            l_e: r.random_range(1..3),
            l_v: r.random_range(1..4),
            mode: if trial % 2 == 0 { EventMode::PaperLiteral } else { EventMode::FrameConditioned },
            seed: trial,
            ..CompressorConfig::default()
        };
        let n = r.random_range(1..6);
        let (frames, sentences) = generate::<f64>(&SyntheticVideoSpec::new(n, r.random_range(0..4), c.l_v, c.d, trial)).unwrap();
        let out = model(&c).forward(&frames, &sentences).unwrap();
        assert_eq!(out.flattened().shape(), &[1, c.s + n * (1 + c.e), c.d]);
        assert_eq!(out.frame_count(), n);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let c = small_config(7, EventMode::FrameConditioned);
    let (frames, sentences) = generate::<f64>(&SyntheticVideoSpec::new(3, 2, 3, 8, 7)).unwrap();
    let a = model(&c).forward(&frames, &sentences).unwrap();
    let b = model(&c).forward(&frames, &sentences).unwrap();
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.flattened()), bits(b.flattened()));
}

#[test]
fn single_precision_tracks_double() {
    let c = small_config(8, EventMode::FrameConditioned);
    let (f64_frames, f64_sentences) = generate::<f64>(&SyntheticVideoSpec::new(3, 2, 3, 8, 8)).unwrap();
    let (f32_frames, f32_sentences) = generate::<f32>(&SyntheticVideoSpec::new(3, 2, 3, 8, 8)).unwrap();
    let wide = SpaModel::<f64>::new(&c).unwrap().forward(&f64_frames, &f64_sentences).unwrap();
    let narrow = SpaModel::<f32>::new(&c).unwrap().forward(&f32_frames, &f32_sentences).unwrap();
    let diff = wide.flattened().max_abs_diff(&narrow.flattened().cast()).unwrap();
    assert!(diff < 1e-4, "{diff}");
}

#[test]
fn recorded_parameters_match_visited_names() {
    use spa_core::Parameters;
    let c = small_config(9, EventMode::FrameConditioned);
    let m = model(&c);
    let (frames, sentences) = generate::<f64>(&SyntheticVideoSpec::new(2, 1, 3, 8, 9)).unwrap();
    let video = PreparedVideo::new(&c, &frames, &sentences).unwrap();
    let mut tape = Tape::new();
    m.record(&mut tape, &video).unwrap();
    let mut bound: Vec<String> = tape.params().iter().map(|p| p.name.clone()).collect();
    bound.sort();
    let mut visited = Vec::new();
    m.visit("", &mut |name, _, _| visited.push(name.to_string()));
    visited.sort();
    assert_eq!(bound, visited);
}

#[test]
fn mismatched_video_is_rejected() {
    let c = small_config(10, EventMode::FrameConditioned);
    let (frames, sentences) = generate::<f64>(&SyntheticVideoSpec::new(2, 1, 4, 8, 10)).unwrap();
    assert!(model(&c).forward(&frames, &sentences).is_err());
}
