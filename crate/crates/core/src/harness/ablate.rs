//! Multi-seed comparison of training modes and caption policies.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::CaptionPolicy;
use crate::harness::eval::{predict, score};
use crate::harness::partition::TrainMode;

/// Epoch whose validation loss is compared across seeds.
pub const STABILITY_EPOCH: usize = 5;
/// Required gap between the full model and the baseline.
pub const MIN_GAIN: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: String,
    pub policy: String,
    pub token_ap: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionCausality {
    /// Night-group token AP with each sample's own caption, per seed.
    pub truthful: Vec<f64>,
    /// Same samples with captions drawn from a shuffled validation set.
    pub permuted: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub epoch: usize,
    pub adapter_val_loss: Vec<f64>,
    pub full_val_loss: Vec<f64>,
    pub adapter_std: f64,
    pub full_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    pub cells: Vec<Cell>,
    /// Mean token AP of the full model minus that of the baseline.
    pub delta: f64,
    pub caption_causality: CaptionCausality,
    pub stability: Stability,
    pub checks: Vec<Check>,
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cell(mode: TrainMode, policy: CaptionPolicy, token_ap: Vec<f64>) -> Cell {
    let (mean, std) = mean_std(&token_ap);
    Cell { mode: mode.name().into(), policy: policy.name().into(), token_ap, mean, std }
}

impl AblationReport {
    pub fn cell(&self, mode: TrainMode, policy: CaptionPolicy) -> Option<&Cell> {
        self.cells.iter().find(|c| c.mode == mode.name() && c.policy == policy.name())
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Runs every mode/policy cell for each seed. Modes that do not read
/// captions are trained once per seed and reported under every policy.
pub fn ablate(seeds: &[u64], base: &RunConfig, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    if base.epochs < STABILITY_EPOCH {
        return Err(Error::Config(format!("ablation needs at least {STABILITY_EPOCH} epochs")));
    }
    let ap = |mode: TrainMode, policy: CaptionPolicy| (mode, policy, Vec::new());
    let mut baseline = ap(TrainMode::Baseline, CaptionPolicy::Structured);
    let mut sa = ap(TrainMode::Sa, CaptionPolicy::Structured);
    let mut lgm: Vec<_> = CaptionPolicy::ALL.iter().map(|&p| ap(TrainMode::SaLgm, p)).collect();
    let mut adapter = ap(TrainMode::Adapter, CaptionPolicy::Structured);
    let mut full = ap(TrainMode::Full, CaptionPolicy::Structured);
    let mut causality = CaptionCausality { truthful: Vec::new(), permuted: Vec::new() };
    let mut adapter_loss = Vec::new();
    let mut full_loss = Vec::new();

    for &seed in seeds {
        let cfg = RunConfig { seed, ..base.clone() };
        for (mode, _, out) in [&mut baseline, &mut sa] {
            progress(&format!("seed {seed}: {mode}"));
            let (_, _, report) = cfg.run(*mode)?;
            out.push(report.final_metrics.token_ap);
        }
        for (mode, policy, out) in lgm.iter_mut() {
            progress(&format!("seed {seed}: {mode} / {}", policy.name()));
            let (model, val, report) = RunConfig { caption_policy: *policy, ..cfg.clone() }.run(*mode)?;
            out.push(report.final_metrics.token_ap);
            if *policy == CaptionPolicy::Structured {
                let truthful = report.final_metrics.condition_breakdown.get("night").map_or(0.0, |m| m.token_ap);
                let mut perm: Vec<usize> = (0..val.len()).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee));
                let logits = predict(&model, &val, mode.pathways(), cfg.batch_size, Some(&perm))?;
                let permuted = score(&val, &logits)?.condition_breakdown.get("night").map_or(0.0, |m| m.token_ap);
                causality.truthful.push(truthful);
                causality.permuted.push(permuted);
            }
        }
        for ((mode, _, out), losses) in [(&mut adapter, &mut adapter_loss), (&mut full, &mut full_loss)] {
            progress(&format!("seed {seed}: {mode}"));
            let (_, _, report) = cfg.run(*mode)?;
            out.push(report.final_metrics.token_ap);
            losses.push(report.epochs[STABILITY_EPOCH - 1].val_loss);
        }
    }

    let mut cells = Vec::new();
    for (mode, _, aps) in [&baseline, &sa] {
        for p in CaptionPolicy::ALL {
            cells.push(cell(*mode, p, aps.clone()));
        }
    }
    for (mode, policy, aps) in &lgm {
        cells.push(cell(*mode, *policy, aps.clone()));
    }
    for (mode, policy, aps) in [&adapter, &full] {
        cells.push(cell(*mode, *policy, aps.clone()));
    }
    let (_, adapter_std) = mean_std(&adapter_loss);
    let (_, full_std) = mean_std(&full_loss);
    let stability = Stability { epoch: STABILITY_EPOCH, adapter_val_loss: adapter_loss, full_val_loss: full_loss, adapter_std, full_std };

    let mut report = AblationReport {
        seeds: seeds.to_vec(),
        config: base.clone(),
        cells,
        delta: 0.0,
        caption_causality: causality,
        stability,
        checks: Vec::new(),
    };
    let m = |mode, policy| report.cell(mode, policy).expect("cell present").clone();
    let base_c = m(TrainMode::Baseline, CaptionPolicy::Structured);
    let sa_c = m(TrainMode::Sa, CaptionPolicy::Structured);
    let st = m(TrainMode::SaLgm, CaptionPolicy::Structured);
    let ff = m(TrainMode::SaLgm, CaptionPolicy::FreeFormNoisy);
    let cat = m(TrainMode::SaLgm, CaptionPolicy::CategoryList);
    report.delta = st.mean - base_c.mean;
    let pooled = ((st.std.powi(2) + ff.std.powi(2) + cat.std.powi(2)) / 3.0).sqrt();
    let (truthful, _) = mean_std(&report.caption_causality.truthful);
    let (permuted, _) = mean_std(&report.caption_causality.permuted);
    report.checks = vec![
        Check {
            name: "component_ordering".into(),
            passed: base_c.mean < sa_c.mean && sa_c.mean < st.mean && report.delta >= MIN_GAIN,
            detail: format!("baseline {:.4} < +sa {:.4} < +sa+lgm {:.4}, delta {:.4} >= {MIN_GAIN}", base_c.mean, sa_c.mean, st.mean, report.delta),
        },
        Check {
            name: "prompt_granularity".into(),
            passed: cat.mean <= ff.mean && ff.mean <= st.mean && cat.mean - st.mean <= pooled,
            detail: format!("category-list {:.4} <= free-form-noisy {:.4} <= structured {:.4}; pooled std {:.4}", cat.mean, ff.mean, st.mean, pooled),
        },
        Check {
            name: "caption_causality".into(),
            passed: permuted < truthful,
            detail: format!("night token AP permuted {permuted:.4} < truthful {truthful:.4}"),
        },
        Check {
            name: "tuning_stability".into(),
            passed: report.stability.adapter_std <= report.stability.full_std,
            detail: format!(
                "epoch-{STABILITY_EPOCH} val-loss std adapter {:.5} <= full {:.5}",
                report.stability.adapter_std, report.stability.full_std
            ),
        },
    ];
    Ok(report)
}
