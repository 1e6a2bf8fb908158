mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::ap_sweep;
use slgnet::harness::checkpoint::{load_run, save_run, RunMeta};
use slgnet::harness::data::{apply_policy, heatmap, SynthConfig, NOISE_STD};
use slgnet::harness::gradcheck::check_function;
use slgnet::harness::{
    ablate, average_precision, evaluate, gradcheck, partition, synthesize, AdamW, CaptionPolicy, ConditionMix, OptimizerConfig, Role, RunConfig,
    SceneCondition, TrainMode, Trainer,
};
use slgnet::{ModuleKind, Tensor};

fn tiny() -> RunConfig {
    RunConfig { image_size: 32, depth: 2, width: 16, heads: 2, epochs: 1, train_samples: 16, val_samples: 16, base_lr: 1e-2, ..RunConfig::default() }
}

fn synth(n: usize, mix: ConditionMix, seed: u64) -> Vec<slgnet::harness::SyntheticSample> {
    synthesize(n, mix, seed, &SynthConfig { image_size: 64, cell: 8 }, CaptionPolicy::Structured).unwrap()
}

#[test]
fn synthesis_is_deterministic() {
    let a = synth(6, ConditionMix::default(), 3);
    let b = synth(6, ConditionMix::default(), 3);
    let c = synth(6, ConditionMix::default(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.visible.bitwise_eq(&y.visible) && x.thermal.bitwise_eq(&y.thermal));
        assert_eq!((&x.heatmap, &x.caption, x.condition), (&y.heatmap, &y.caption, y.condition));
    }
    assert!(a.iter().zip(&c).any(|(x, y)| !x.visible.bitwise_eq(&y.visible)));
    // sample i depends only on (seed, i)
    let longer = synth(9, ConditionMix::default(), 3);
    assert!(longer[5].thermal.bitwise_eq(&a[5].thermal));
}

#[test]
fn synthesis_rejects_degenerate_requests() {
    let cfg = SynthConfig { image_size: 8, cell: 8 };
    assert!(synthesize(1, ConditionMix::default(), 0, &cfg, CaptionPolicy::Structured).is_err());
    let cfg = SynthConfig { image_size: 64, cell: 8 };
    assert!(synthesize(0, ConditionMix::default(), 0, &cfg, CaptionPolicy::Structured).is_err());
}

/// Mean over the disk minus mean over a ring just outside it.
fn disk_contrast(plane: &[f64], size: usize, d: &slgnet::harness::data::Disk) -> f64 {
    let (mut inside, mut ni, mut ring, mut nr) = (0.0, 0, 0.0, 0);
    for y in 0..size {
        for x in 0..size {
            let dist = ((x as f64 + 0.5 - d.cx).powi(2) + (y as f64 + 0.5 - d.cy).powi(2)).sqrt();
            let v = plane[y * size + x];
            if dist <= d.r {
                inside += v;
                ni += 1;
            } else if dist > d.r + 1.0 && dist <= d.r + 4.0 {
                ring += v;
                nr += 1;
            }
        }
    }
    inside / ni as f64 - ring / nr as f64
}

#[test]
fn night_hides_targets_in_the_visible_band() {
    let night = synth(40, ConditionMix::only(SceneCondition::Night), 9);
    let day = synth(40, ConditionMix::only(SceneCondition::Day), 9);
    let luma = |s: &slgnet::harness::SyntheticSample| s.visible.data()[..64 * 64].to_vec();
    for s in &night {
        let plane = luma(s);
        for d in &s.targets {
            let clutter_nearby = s.clutter.iter().any(|c| (c.cx - d.cx).hypot(c.cy - d.cy) < c.r + d.r + 5.0);
            if !clutter_nearby {
                assert!(disk_contrast(&plane, 64, d).abs() <= NOISE_STD, "night target visible in {}", s.id);
            }
        }
        // the thermal band still carries them
        let thermal = s.thermal.data();
        assert!(s.targets.iter().all(|d| disk_contrast(thermal, 64, d) > 0.1));
    }
    let strong = day.iter().flat_map(|s| s.targets.iter().map(move |d| disk_contrast(&luma(s), 64, d).abs())).filter(|c| *c > 0.1).count();
    let total: usize = day.iter().map(|s| s.targets.len()).sum();
    assert_eq!(strong, total);
}

#[test]
fn crossover_hides_targets_in_the_thermal_band() {
    for s in synth(30, ConditionMix::only(SceneCondition::ThermalCrossover), 2) {
        for d in &s.targets {
            let clutter_nearby = s.clutter.iter().any(|c| (c.cx - d.cx).hypot(c.cy - d.cy) < c.r + d.r + 5.0);
            if !clutter_nearby {
                assert!(disk_contrast(s.thermal.data(), 64, d).abs() <= NOISE_STD);
            }
        }
    }
}

#[test]
fn heatmap_agrees_with_analytic_cell_overlap() {
    for s in synth(30, ConditionMix::default(), 5) {
        let g = 8;
        for ty in 0..g {
            for tx in 0..g {
                // nearest point of the cell's pixel-centre box to each disk centre
                let (lo_x, hi_x) = ((tx * 8) as f64 + 0.5, (tx * 8 + 7) as f64 + 0.5);
                let (lo_y, hi_y) = ((ty * 8) as f64 + 0.5, (ty * 8 + 7) as f64 + 0.5);
                let touches = s.targets.iter().any(|d| (d.cx.clamp(lo_x, hi_x) - d.cx).hypot(d.cy.clamp(lo_y, hi_y) - d.cy) <= d.r);
                if s.heatmap[ty * g + tx] == 1.0 {
                    assert!(touches);
                }
            }
        }
        for d in &s.targets {
            let (cx, cy) = (d.cx as usize / 8, d.cy as usize / 8);
            assert_eq!(s.heatmap[cy * g + cx], 1.0, "centre cell of a target must be marked");
        }
        assert_eq!(heatmap(&s.targets, 64, 8), s.heatmap);
        assert!(s.heatmap.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn captions_follow_the_condition_and_policy() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for s in synth(20, ConditionMix::default(), 1) {
        let env = s.caption.slots()[0];
        let expected = match s.condition {
            SceneCondition::Day => "clear daytime",
            SceneCondition::Night => "dark night",
            SceneCondition::Overexposed => "overexposed glare",
            SceneCondition::ThermalCrossover => "warm afternoon",
        };
        assert_eq!(env, expected);
        let list = apply_policy(&mut r, &s.caption, CaptionPolicy::CategoryList);
        assert!(list.slots().iter().all(|slot| *slot == "person car bicycle"));
        let noisy = apply_policy(&mut r, &s.caption, CaptionPolicy::FreeFormNoisy);
        let mut a: Vec<&str> = s.caption.slots().iter().flat_map(|x| x.split_whitespace()).collect();
        let mut b: Vec<&str> = noisy.slots().iter().flat_map(|x| x.split_whitespace()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}

#[test]
fn partition_is_total_and_disjoint() {
    let cfg = RunConfig::default();
    let model = cfg.build_model().unwrap();
    for mode in TrainMode::ALL {
        let p = partition(&model, mode).unwrap();
        let frozen: Vec<_> = p.ids(Role::Frozen).collect();
        let adapter: Vec<_> = p.ids(Role::Adapter).collect();
        assert_eq!(frozen.len() + adapter.len(), model.store.len());
        assert!(frozen.iter().all(|id| !adapter.contains(id)));
        for (id, prm) in model.store.iter() {
            let role = p.get(id).role;
            match mode {
                TrainMode::Full => assert_eq!(role, Role::Adapter),
                TrainMode::Adapter => assert_eq!(role == Role::Frozen, prm.module == ModuleKind::Backbone),
                TrainMode::Baseline => {
                    let expect = prm.name.starts_with("backbone.patch_embed") || prm.module == ModuleKind::TaskHead;
                    assert_eq!(role == Role::Adapter, expect, "{}", prm.name);
                }
                _ => {}
            }
        }
    }
    let full = partition(&model, TrainMode::Full).unwrap();
    assert_eq!(full.trainable_fraction(), 1.0);
    let adapter = partition(&model, TrainMode::Adapter).unwrap();
    assert!(adapter.trainable_fraction() <= 0.20, "fraction {}", adapter.trainable_fraction());
    assert_eq!(adapter.params_total(), model.store.numel(None));
    assert_eq!(adapter.params_total() - adapter.params_trainable(), model.store.numel(Some(ModuleKind::Backbone)));
}

#[test]
fn layer_decay_schedule() {
    let o = OptimizerConfig::default();
    let lr = o.effective_lr(0, 5);
    assert!((lr - 1e-4 * 0.7f64.powi(5)).abs() < 1e-20);
    assert!((lr - 1.68e-5).abs() < 1e-7);
    assert_eq!(o.effective_lr(5, 5), 1e-4);

    let mut model = RunConfig::default().build_model().unwrap();
    let trainer = Trainer::new(&mut model, TrainMode::Adapter, o.clone()).unwrap();
    let max = trainer.partition.max_depth;
    for (id, prm) in model.store.iter() {
        match trainer.partition.get(id).role {
            Role::Frozen => assert_eq!(trainer.optimizer.lr_of(id), None),
            Role::Adapter => assert_eq!(trainer.optimizer.lr_of(id), Some(o.base_lr * o.layer_decay.powi((max - prm.stage_depth) as i32))),
        }
    }
}

#[test]
fn invalid_optimizer_settings_are_rejected() {
    let model = tiny().build_model().unwrap();
    let part = partition(&model, TrainMode::Adapter).unwrap();
    let bad = OptimizerConfig { layer_decay: 1.5, ..Default::default() };
    assert!(AdamW::new(bad, &model.store, &part).is_err());
}

#[test]
fn frozen_parameters_survive_adapter_training() {
    let cfg = tiny();
    let mut model = cfg.build_model().unwrap();
    let before = model.store.clone();
    let data = cfg.train_set().unwrap();
    let mut trainer = Trainer::new(&mut model, TrainMode::Adapter, OptimizerConfig { batch_size: 4, ..cfg.optimizer_config() }).unwrap();
    for step in 0..100 {
        let idx: Vec<usize> = (0..4).map(|k| (step * 4 + k) % data.len()).collect();
        let (inputs, targets) = data.batch(&idx).unwrap();
        trainer.step(&mut model, &inputs, &targets).unwrap();
    }
    assert_eq!(trainer.optimizer.steps(), 100);
    let mut moved = false;
    for ((id, a), (_, b)) in before.iter().zip(model.store.iter()) {
        if trainer.partition.get(id).role == Role::Frozen {
            assert!(a.tensor.bitwise_eq(&b.tensor), "{} changed", a.name);
        } else {
            moved |= !a.tensor.bitwise_eq(&b.tensor);
        }
    }
    assert!(moved);
}

#[test]
fn one_epoch_lowers_validation_loss() {
    let cfg = RunConfig { epochs: 1, train_samples: 64, val_samples: 32, ..RunConfig::ablation() };
    let (_, _, report) = cfg.run(TrainMode::SaLgm).unwrap();
    assert!(report.epochs[0].val_loss < report.initial.loss, "{} vs {}", report.epochs[0].val_loss, report.initial.loss);
}

#[test]
fn training_is_reproducible() {
    let cfg = tiny();
    let (_, _, a) = cfg.run(TrainMode::SaLgm).unwrap();
    let (_, _, b) = cfg.run(TrainMode::SaLgm).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn average_precision_reference_cases() {
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let perfect: Vec<f64> = labels.iter().map(|l| l * 2.0 - 1.0).collect();
    assert_eq!(average_precision(&perfect, &labels), 1.0);
    let constant = [0.3; 8];
    assert!((average_precision(&constant, &labels) - 3.0 / 8.0).abs() < 1e-15);
    assert_eq!(average_precision(&constant, &[0.0; 8]), 0.0);
}

#[test]
fn average_precision_matches_threshold_sweep() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let n = r.random_range(1..60);
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..8) as f64) / 8.0).collect();
        let labels: Vec<f64> = (0..n).map(|_| if r.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        assert!((average_precision(&scores, &labels) - ap_sweep(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn evaluation_reports_day_night_breakdown() {
    let cfg = tiny();
    let model = cfg.build_model().unwrap();
    let m = evaluate(&model, &cfg.val_set().unwrap(), TrainMode::SaLgm.pathways(), 4).unwrap();
    assert!(m.condition_breakdown.contains_key("day") && m.condition_breakdown.contains_key("night"));
    let n: usize = ["day", "night"].iter().map(|k| m.condition_breakdown[*k].samples).sum();
    assert_eq!(n, cfg.val_samples);
    let per_condition: usize = m.condition_breakdown.iter().filter(|(k, _)| k.starts_with("condition/")).map(|(_, g)| g.samples).sum();
    assert_eq!(per_condition, cfg.val_samples);
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let cfg = tiny();
    let (model, val, report) = cfg.run(TrainMode::SaLgm).unwrap();
    let part = partition(&model, TrainMode::SaLgm).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.slg");
    save_run(&path, &model, &part, &RunMeta { mode: TrainMode::SaLgm, config: cfg.clone() }).unwrap();
    let (loaded, loaded_part, meta) = load_run(&path).unwrap();
    assert_eq!(meta.config, cfg);
    assert_eq!(loaded_part, part);
    let again = evaluate(&loaded, &val, TrainMode::SaLgm.pathways(), cfg.batch_size).unwrap();
    assert_eq!(again, report.final_metrics);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_run(&path).is_err());
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"width": 32, "colour": "blue"}"#).unwrap();
    assert!(RunConfig::from_json_file(&path).is_err());
    std::fs::write(&path, r#"{"width": 32, "heads": 2}"#).unwrap();
    let c = RunConfig::from_json_file(&path).unwrap();
    assert_eq!((c.width, c.heads, c.depth), (32, 2, RunConfig::default().depth));
}

#[test]
fn gradcheck_linear_graph_is_exact() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r);
    let err = check_function(&x, |t, v| {
        let wv = t.constant(w.clone());
        let y = t.matmul(v, wv)?;
        let y = t.scale(y, 3.0)?;
        t.sum_all(y)
    })
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn gradcheck_is_deterministic() {
    let a = gradcheck("lgm", 4).unwrap();
    let b = gradcheck("lgm", 4).unwrap();
    assert_eq!(a, b);
    assert!(a.passed);
    assert!(gradcheck("nonsense", 0).is_err());
}

#[test]
fn ablation_needs_three_seeds() {
    assert!(ablate(&[1, 2], &tiny(), |_| {}).is_err());
}
