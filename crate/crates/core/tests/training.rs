//! Training-loop behaviour on tiny synthetic data.

use std::collections::BTreeSet;

use c2sdg_core::dataio::synth_benchmark;
use c2sdg_core::rng::stream;
use c2sdg_core::styleaug::make_style_batch;
use c2sdg_core::trainer::{contrastive_phase, segmentation_phase, train_on, train_step};
use c2sdg_core::{Arch, AugConfig, BenchmarkSpec, Dataset, ModelState, ParamId, Sample, StyleMode, Tensor, TrainConfig};

fn tiny_arch(cfd: bool) -> Arch {
    Arch {
        channels: 4,
        depth: 1,
        cfd,
        ..Arch::default()
    }
}

fn tiny_data(per_split: usize) -> Dataset {
    let spec = BenchmarkSpec {
        height: 16,
        width: 16,
        train_count: per_split,
        test_count: per_split,
        ..BenchmarkSpec::default()
    };
    Dataset::new(synth_benchmark(&spec, 11).unwrap())
}

fn batch(data: &Dataset, n: usize) -> (Vec<Sample>, Vec<Sample>) {
    let source: Vec<Sample> = data.domain("A").into_iter().take(n).cloned().collect();
    let mut rngs: Vec<_> = (0..n as u64).map(|i| stream(5, &[i])).collect();
    let styled = make_style_batch(&source, StyleMode::BA, &AugConfig::default(), &mut rngs).unwrap();
    (source, styled)
}

fn snapshot(state: &ModelState, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| state.model.store.get(id).clone()).collect()
}

fn all_params(state: &ModelState) -> Vec<Tensor> {
    state.model.store.iter().map(|(_, _, t)| t.clone()).collect()
}

#[test]
fn zero_learning_rate_keeps_parameters_bitwise() {
    let data = tiny_data(4);
    let (src, aug) = batch(&data, 2);
    let mut state = ModelState::new(tiny_arch(true), 1, 0.99).unwrap();
    let before = all_params(&state);
    let r = train_step(&mut state, &src, Some(&aug), 0.0, None).unwrap();
    assert!(r.l_str.is_some());
    assert_eq!(all_params(&state), before);
}

#[test]
fn phase_key_sets_are_exact() {
    let data = tiny_data(4);
    let (src, aug) = batch(&data, 2);
    let mut state = ModelState::new(tiny_arch(true), 2, 0.99).unwrap();
    let net = &state.model.net;
    let prompt = net.prompt.logits;
    let seg: BTreeSet<ParamId> = net
        .stem_params()
        .into_iter()
        .chain([prompt])
        .chain(net.backbone_params())
        .collect();
    let con: BTreeSet<ParamId> = std::iter::once(prompt).chain(net.projector_params()).collect();
    let r = train_step(&mut state, &src, Some(&aug), 0.01, None).unwrap();
    assert_eq!(r.seg_keys, seg);
    assert_eq!(r.con_keys, con);
    assert_eq!(&r.seg_keys, state.seg_opt.members());
    assert_eq!(&r.con_keys, state.con_opt.members());
}

#[test]
fn contrastive_phase_leaves_stem_and_backbone_bitwise() {
    let data = tiny_data(4);
    let (src, aug) = batch(&data, 2);
    let mut state = ModelState::new(tiny_arch(true), 3, 0.99).unwrap();
    let mut reference = state.clone();
    let frozen: Vec<ParamId> = {
        let net = &state.model.net;
        net.stem_params().into_iter().chain(net.backbone_params()).collect()
    };
    segmentation_phase(&mut state, &src, Some(&aug), 0.01).unwrap();
    let after_seg = snapshot(&state, &frozen);
    let prompt_after_seg = state.model.store.get(state.model.net.prompt.logits).clone();
    contrastive_phase(&mut state, &src, &aug, 0.01, None).unwrap();
    assert_eq!(snapshot(&state, &frozen), after_seg);
    assert_ne!(state.model.store.get(state.model.net.prompt.logits), &prompt_after_seg);

    // a full step is exactly the two phases in order
    train_step(&mut reference, &src, Some(&aug), 0.01, None).unwrap();
    assert_eq!(all_params(&reference), all_params(&state));
}

#[test]
fn baseline_never_runs_the_contrastive_phase() {
    let data = tiny_data(4);
    let (src, aug) = batch(&data, 2);
    let mut state = ModelState::new(tiny_arch(false), 4, 0.99).unwrap();
    let proj = state.model.net.projector_params();
    let before = snapshot(&state, &proj);
    let r = train_step(&mut state, &src, Some(&aug), 0.01, None).unwrap();
    assert!(r.l_str.is_none() && r.con_keys.is_empty());
    assert_eq!(snapshot(&state, &proj), before);
    assert!(contrastive_phase(&mut state, &src, &aug, 0.01, None).is_err());

    // without an augmented view the contrastive phase is skipped too
    let mut full = ModelState::new(tiny_arch(true), 4, 0.99).unwrap();
    let r = train_step(&mut full, &src, None, 0.01, None).unwrap();
    assert!(r.l_sty.is_none());
}

#[test]
fn overfits_a_single_batch() {
    let data = tiny_data(4);
    let (src, _) = batch(&data, 4);
    let arch = Arch {
        channels: 8,
        depth: 2,
        ..Arch::default()
    };
    let decreasing_seeds = (0..3)
        .filter(|&seed| {
            let mut state = ModelState::new(arch.clone(), seed, 0.99).unwrap();
            let losses: Vec<f64> = (0..50)
                .map(|_| train_step(&mut state, &src, None, 0.01, None).unwrap().l_seg)
                .collect();
            assert!(losses[49] < losses[0]);
            losses[..10].windows(2).all(|w| w[1] < w[0])
        })
        .count();
    assert!(decreasing_seeds >= 1);
}

#[test]
fn style_margin_bounds_the_style_loss() {
    let data = tiny_data(4);
    let (src, aug) = batch(&data, 2);
    let mut state = ModelState::new(tiny_arch(true), 5, 0.99).unwrap();
    for _ in 0..5 {
        let r = train_step(&mut state, &src, Some(&aug), 0.01, Some(1.0)).unwrap();
        let l = r.l_sty.unwrap();
        assert!((0.0..=1.0).contains(&l));
    }
}

#[test]
fn mismatched_batches_are_rejected() {
    let data = tiny_data(4);
    let (src, aug) = batch(&data, 2);
    let mut state = ModelState::new(tiny_arch(true), 6, 0.99).unwrap();
    assert!(train_step(&mut state, &src, Some(&aug[..1]), 0.01, None).is_err());
    assert!(train_step(&mut state, &[], None, 0.01, None).is_err());
}

fn tiny_config(out: &std::path::Path) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        channels: 4,
        depth: 1,
        out_dir: out.to_path_buf(),
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let data = tiny_data(4);
    let dir = tempfile::tempdir().unwrap();
    let a = train_on(&tiny_config(&dir.path().join("a")), &data).unwrap();
    let b = train_on(&tiny_config(&dir.path().join("b")), &data).unwrap();
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a.metrics), read(&b.metrics));
    assert_eq!(read(&a.final_checkpoint), read(&b.final_checkpoint));
    assert_eq!(read(&a.best_checkpoint), read(&b.best_checkpoint));
}

#[test]
fn metrics_rows_are_steps_plus_evaluations() {
    let data = tiny_data(5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = train_on(&cfg, &data).unwrap();
    // 5 samples in batches of 2 -> 3 steps per epoch
    assert_eq!(out.steps, 6);
    let text = std::fs::read_to_string(&out.metrics).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let evals = rows.iter().filter(|r| !r.split(',').nth(6).unwrap().is_empty()).count();
    assert_eq!(evals, 2 * 3);
    assert_eq!(rows.len(), out.steps + evals);
    for r in rows.iter().filter(|r| !r.split(',').nth(6).unwrap().is_empty()) {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f.len(), 9);
        assert!(f[1..6].iter().all(|v| v.is_empty()));
        for v in &f[7..] {
            let d: f64 = v.parse().unwrap();
            assert!((0.0..=100.0).contains(&d));
        }
    }
    let lrs: Vec<f64> = rows
        .iter()
        .filter(|r| r.split(',').nth(6).unwrap().is_empty())
        .map(|r| r.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn single_step_run_starts_with_the_first_mode() {
    let data = tiny_data(4);
    let dir = tempfile::tempdir().unwrap();
    let base = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..tiny_config(dir.path())
    };
    let all_modes = train_on(&TrainConfig { out_dir: dir.path().join("all"), ..base.clone() }, &data).unwrap();
    assert_eq!(all_modes.steps, 1);
    let ba_only = TrainConfig {
        out_dir: dir.path().join("ba"),
        enable_sl: false,
        enable_fr: false,
        ..base.clone()
    };
    let ba_only = train_on(&ba_only, &data).unwrap();
    let sl_only = TrainConfig {
        out_dir: dir.path().join("sl"),
        enable_ba: false,
        enable_fr: false,
        ..base
    };
    let sl_only = train_on(&sl_only, &data).unwrap();
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    assert_eq!(read(&all_modes.final_checkpoint), read(&ba_only.final_checkpoint));
    assert_ne!(read(&all_modes.final_checkpoint), read(&sl_only.final_checkpoint));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = tiny_data(4);
    let (src, aug) = batch(&data, 2);
    let mut state = ModelState::new(tiny_arch(true), 7, 0.99).unwrap();
    train_step(&mut state, &src, Some(&aug), 0.01, None).unwrap();
    state.epoch = 3;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    state.save(&path).unwrap();
    let back = ModelState::load(&path).unwrap();
    assert_eq!(back.to_tensors(), state.to_tensors());
    assert_eq!(back.epoch, 3);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(ModelState::load(&path).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let data = tiny_data(2);
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(dir.path());
    for cfg in [
        TrainConfig { lr0: 0.0, ..base.clone() },
        TrainConfig { epochs: 0, ..base.clone() },
        TrainConfig { batch_size: 0, ..base.clone() },
        TrainConfig { style_margin: Some(-1.0), ..base.clone() },
        TrainConfig { source: "Z".into(), ..base.clone() },
    ] {
        assert!(train_on(&cfg, &data).is_err());
    }
}
