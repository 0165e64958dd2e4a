//! Experiment harness: seeded training loop with CTC loss, pooled-WER
//! evaluation, best-dev checkpointing, and multi-seed regime comparisons.
//!
//! A run directory receives `config.json` (the exact configuration echo),
//! `metrics.csv` (deterministic per-epoch rows), `timing.csv` and
//! `report.json` (wall-clock step times live here, never in `metrics.csv`,
//! so reruns of the same seed reproduce `metrics.csv` byte for byte), plus
//! `best/` and `final/` checkpoints.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptConfig;
use crate::backbone::{Regime, ViTConfig};
use crate::checkpoint;
use crate::ctc::{ctc_forward_loss, greedy_decode, CtcOutcome};
use crate::data::{augment, load_split, AugmentConfig, Split, SyntheticSpec, VideoSample};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SignModel};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{check_positive, Bound};
use crate::tape::Tape;
use crate::wer::{align_and_count, pooled, WerBreakdown};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Backbone preset name understood by [`ViTConfig::by_name`].
    pub backbone: String,
    pub regime: Regime,
    pub adapt: AdaptConfig,
    pub data: SyntheticSpec,
    pub augment: AugmentConfig,
    /// When false, training samples get the deterministic evaluation
    /// transform instead of random crop / flip / temporal rescale.
    pub augment_train: bool,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate is divided by `lr_decay_factor` after each listed epoch.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epoch interval between WER evaluations; the final epoch always
    /// evaluates.
    pub eval_every: usize,
    /// Stop once train WER drops below this percentage (checked on
    /// evaluation epochs).
    pub early_stop_train_wer: Option<f64>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: "desk".into(),
            regime: Regime::AdaptSign,
            adapt: AdaptConfig::default(),
            data: SyntheticSpec::default(),
            augment: AugmentConfig::default(),
            augment_train: true,
            epochs: 40,
            lr: 1e-4,
            lr_decay_epochs: vec![20, 30],
            lr_decay_factor: 5.0,
            weight_decay: 1e-3,
            batch_size: 2,
            eval_every: 1,
            early_stop_train_wer: None,
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        ViTConfig::by_name(&self.backbone)?;
        self.adapt.validate()?;
        self.data.validate()?;
        check_positive("learning rate", self.lr)?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.lr_decay_factor <= 1.0 {
            return Err(Error::Config(format!(
                "lr decay factor must exceed 1, got {}",
                self.lr_decay_factor
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "negative weight decay {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch size and eval interval must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in force during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.lr / self.lr_decay_factor.powi(decays as i32)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vit: ViTConfig::by_name(&self.backbone)?,
            adapt: self.adapt.clone(),
            regime: self.regime,
            vocab: self.data.vocab,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One deterministic `metrics.csv` row. WER cells are empty on epochs
/// without an evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_wer: Option<f64>,
    pub dev_wer: Option<f64>,
    pub test_wer: Option<f64>,
    pub trainable_params: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ExperimentConfig,
    pub rows: Vec<MetricsRow>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_dev_wer: f64,
    pub final_train_wer: f64,
    pub final_dev_wer: f64,
    pub final_test_wer: f64,
    /// Median wall-clock seconds per optimizer step after 5 warm-up steps.
    pub median_step_seconds: f64,
    pub total_steps: usize,
    pub trainable_params: u64,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleEval {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub breakdown: WerBreakdown,
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    xs[xs.len() / 2]
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    write_text(path, &json)
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,train_loss,train_wer,dev_wer,test_wer,trainable_params\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            fmt_cell(r.train_wer),
            fmt_cell(r.dev_wer),
            fmt_cell(r.test_wer),
            r.trainable_params
        ));
    }
    out
}

/// Greedy-decodes every sample with the evaluation transform and pools the
/// edit-operation counts over the split.
pub fn evaluate_model<E: Elem>(
    model: &SignModel<E>,
    samples: &[VideoSample],
    aug: &AugmentConfig,
) -> Result<(WerBreakdown, Vec<SampleEval>)> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let vocab = model.cfg.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut evals = Vec::with_capacity(samples.len());
    for sample in samples {
        if let Some(&g) = sample.transcript.iter().find(|&&g| g == 0 || g > vocab) {
            return Err(Error::Incompatible(format!(
                "sample {} uses gloss {g} but the model vocabulary is 1..={vocab}",
                sample.id
            )));
        }
        let eval_view = augment(sample, aug, false, &mut rng)?;
        let frames = eval_view.frames_as::<E>();
        let mut tape = Tape::new();
        let (_, out) = model.forward(&mut tape, &frames, false, false)?;
        let hypothesis = greedy_decode(tape.value(out.lattice));
        let breakdown = align_and_count(&sample.transcript, &hypothesis)?;
        evals.push(SampleEval {
            id: sample.id.clone(),
            reference: sample.transcript.clone(),
            hypothesis,
            breakdown,
        });
    }
    let total = pooled(evals.iter().map(|e| &e.breakdown))?;
    Ok((total, evals))
}

/// Loads a checkpoint and evaluates it on one stored split.
pub fn evaluate_checkpoint<E: Elem>(
    ckpt_dir: &Path,
    data_root: &Path,
    split: Split,
    aug: &AugmentConfig,
) -> Result<(WerBreakdown, Vec<SampleEval>)> {
    let model = checkpoint::load::<E>(ckpt_dir)?;
    let (spec, samples) = load_split(data_root, split)?;
    if spec.vocab != model.cfg.vocab {
        return Err(Error::Incompatible(format!(
            "checkpoint vocabulary {} does not match dataset vocabulary {}",
            model.cfg.vocab, spec.vocab
        )));
    }
    evaluate_model(&model, &samples, aug)
}

fn load_all_splits(
    cfg: &ExperimentConfig,
    data_root: &Path,
) -> Result<[Vec<VideoSample>; 3]> {
    let mut out: [Vec<VideoSample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (slot, split) in out.iter_mut().zip(Split::ALL) {
        let (spec, samples) = load_split(data_root, split)?;
        if spec != cfg.data {
            return Err(Error::Config(format!(
                "dataset at {} was generated from a different spec than the \
                 experiment config; regenerate it or update the config",
                data_root.display()
            )));
        }
        if samples.is_empty() {
            return Err(Error::Dataset(format!("{} split is empty", split.as_str())));
        }
        *slot = samples;
    }
    Ok(out)
}

/// Runs the full training loop and writes the run directory.
pub fn train<E: Elem>(
    cfg: &ExperimentConfig,
    data_root: &Path,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    write_json(&out_dir.join("config.json"), cfg)?;

    let [train_set, dev_set, test_set] = load_all_splits(cfg, data_root)?;
    let vocab = cfg.data.vocab;
    let mut model = SignModel::<E>::build(model_cfg, cfg.seed)?;
    let trainable_params = model.store.trainable_params();
    let mut adam = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut step_times: Vec<f64> = Vec::new();
    let mut timing_lines = String::from("epoch,median_step_seconds\n");
    let mut best_dev = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stopped_early = false;
    let mut final_wers = (f64::NAN, f64::NAN, f64::NAN);

    let mut epoch = 0usize;
    while epoch < cfg.epochs {
        epoch += 1;
        let adam_cfg = AdamConfig {
            lr: cfg.lr_at(epoch),
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut infeasible = 0usize;
        let mut seen = 0usize;
        let mut epoch_steps: Vec<f64> = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let start = Instant::now();
            let mut tape = Tape::new();
            let bound = Bound::bind(&model.store, &mut tape, true);
            let mut batch_losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let sample = augment(&train_set[idx], &cfg.augment, cfg.augment_train, &mut rng)?;
                let frames = sample.frames_as::<E>();
                let out = model.forward_bound(&mut tape, &bound, &frames, false)?;
                seen += 1;
                match ctc_forward_loss(&mut tape, out.lattice, &sample.transcript, vocab)? {
                    CtcOutcome::Loss(l) => {
                        loss_sum += tape.value(l).data()[0].to_f64();
                        loss_count += 1;
                        batch_losses.push(l);
                    }
                    CtcOutcome::Infeasible => infeasible += 1,
                }
            }
            if let Some((&first, rest)) = batch_losses.split_first() {
                let sum = rest.iter().fold(first, |acc, &l| tape.add(acc, l));
                let mean = tape.scale(sum, 1.0 / batch_losses.len() as f64);
                let grads = tape.backward(mean);
                adam.step(&mut model.store, &bound.collect_grads(&grads), &adam_cfg)?;
                epoch_steps.push(start.elapsed().as_secs_f64());
            }
        }
        if infeasible * 2 > seen {
            return Err(Error::Dataset(format!(
                "{infeasible} of {seen} training clips this epoch cannot fit their \
                 transcripts after temporal downsampling; lengthen clips (more frames \
                 per gloss), shorten sentences, or narrow the temporal rescale range"
            )));
        }
        timing_lines.push_str(&format!("{epoch},{:.6}\n", median(epoch_steps.clone())));
        step_times.extend(epoch_steps);

        let mut row = MetricsRow {
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            train_wer: None,
            dev_wer: None,
            test_wer: None,
            trainable_params,
        };
        let evaluating = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        if evaluating {
            let (train_wer, _) = evaluate_model(&model, &train_set, &cfg.augment)?;
            let (dev_wer, _) = evaluate_model(&model, &dev_set, &cfg.augment)?;
            let (test_wer, _) = evaluate_model(&model, &test_set, &cfg.augment)?;
            row.train_wer = Some(train_wer.wer());
            row.dev_wer = Some(dev_wer.wer());
            row.test_wer = Some(test_wer.wer());
            final_wers = (train_wer.wer(), dev_wer.wer(), test_wer.wer());
            if dev_wer.wer() < best_dev {
                best_dev = dev_wer.wer();
                best_epoch = epoch;
                checkpoint::save(&out_dir.join("best"), &model)?;
            }
            if let Some(threshold) = cfg.early_stop_train_wer {
                if train_wer.wer() < threshold {
                    stopped_early = true;
                }
            }
        }
        rows.push(row);
        if stopped_early {
            break;
        }
    }
    if rows.last().map_or(true, |r| r.dev_wer.is_none()) {
        let (train_wer, _) = evaluate_model(&model, &train_set, &cfg.augment)?;
        let (dev_wer, _) = evaluate_model(&model, &dev_set, &cfg.augment)?;
        let (test_wer, _) = evaluate_model(&model, &test_set, &cfg.augment)?;
        final_wers = (train_wer.wer(), dev_wer.wer(), test_wer.wer());
        if let Some(row) = rows.last_mut() {
            row.train_wer = Some(final_wers.0);
            row.dev_wer = Some(final_wers.1);
            row.test_wer = Some(final_wers.2);
        }
    }
    checkpoint::save(&out_dir.join("final"), &model)?;

    let total_steps = step_times.len();
    let warm: Vec<f64> = if step_times.len() > 5 {
        step_times[5..].to_vec()
    } else {
        step_times
    };
    let report = TrainReport {
        config: cfg.clone(),
        epochs_run: epoch,
        stopped_early,
        best_epoch,
        best_dev_wer: best_dev,
        final_train_wer: final_wers.0,
        final_dev_wer: final_wers.1,
        final_test_wer: final_wers.2,
        median_step_seconds: median(warm),
        total_steps,
        trainable_params,
        out_dir: out_dir.to_path_buf(),
        rows,
    };
    write_text(&out_dir.join("metrics.csv"), &metrics_csv(&report.rows))?;
    write_text(&out_dir.join("timing.csv"), &timing_lines)?;
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRow {
    pub regime: Regime,
    pub seed: u64,
    pub dev_wer: f64,
    pub test_wer: f64,
    pub step_seconds: f64,
    pub trainable_params: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: Regime,
    pub dev_wer: f64,
    pub test_wer: f64,
    pub step_seconds: f64,
    /// Median step time relative to the frozen regime, when present.
    pub step_ratio_vs_frozen: Option<f64>,
    pub trainable_params: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<RunRow>,
    pub medians: Vec<RegimeSummary>,
}

impl ComparisonReport {
    pub fn median_for(&self, regime: Regime) -> Option<&RegimeSummary> {
        self.medians.iter().find(|m| m.regime == regime)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("regime,seed,dev_wer,test_wer,step_seconds,trainable_params\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{}\n",
                r.regime, r.seed, r.dev_wer, r.test_wer, r.step_seconds, r.trainable_params
            ));
        }
        out
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>6} {:>10} {:>10} {:>10} {:>12}\n",
            "regime", "seed", "dev WER", "test WER", "step (s)", "trainable"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>6} {:>10.2} {:>10.2} {:>10.4} {:>12}\n",
                r.regime.to_string(),
                r.seed,
                r.dev_wer,
                r.test_wer,
                r.step_seconds,
                r.trainable_params
            ));
        }
        out.push_str(&format!(
            "\nmedians over seeds\n{:<12} {:>10} {:>10} {:>10} {:>10} {:>12}\n",
            "regime", "dev WER", "test WER", "step (s)", "vs frozen", "trainable"
        ));
        for m in &self.medians {
            let ratio = m
                .step_ratio_vs_frozen
                .map(|r| format!("{r:.2}x"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{:<12} {:>10.2} {:>10.2} {:>10.4} {:>10} {:>12}\n",
                m.regime.to_string(),
                m.dev_wer,
                m.test_wer,
                m.step_seconds,
                ratio,
                m.trainable_params
            ));
        }
        out
    }
}

fn run_dir_name(regime: Regime, seed: u64) -> String {
    let tag: String = regime
        .to_string()
        .chars()
        .filter(|c| *c != '(' && *c != ')')
        .collect();
    format!("{tag}-seed{seed}")
}

/// Trains every (regime, seed) combination on one shared dataset and
/// summarizes per-regime medians. Runs execute on up to `parallel` threads;
/// each run stays single-threaded and deterministic, and results are
/// reported in input order.
pub fn run_comparison<E: Elem>(
    base: &ExperimentConfig,
    regimes: &[Regime],
    seeds: &[u64],
    data_root: &Path,
    out_root: &Path,
    parallel: usize,
) -> Result<ComparisonReport> {
    if regimes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one regime and one seed".into()));
    }
    let jobs: Vec<(Regime, u64)> = regimes
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<TrainReport>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = parallel.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (regime, seed) = jobs[i];
                let mut cfg = base.clone();
                cfg.regime = regime;
                cfg.seed = seed;
                let out_dir = out_root.join(run_dir_name(regime, seed));
                let report = train::<E>(&cfg, data_root, &out_dir);
                results.lock().expect("no poisoned runs")[i] = Some(report);
            });
        }
    });

    let mut rows = Vec::with_capacity(jobs.len());
    for ((regime, seed), slot) in jobs.iter().zip(results.into_inner().expect("joined")) {
        let report = slot.expect("every job ran")?;
        rows.push(RunRow {
            regime: *regime,
            seed: *seed,
            dev_wer: report.final_dev_wer,
            test_wer: report.final_test_wer,
            step_seconds: report.median_step_seconds,
            trainable_params: report.trainable_params,
        });
    }

    let mut medians = Vec::with_capacity(regimes.len());
    for &regime in regimes {
        let of = |f: fn(&RunRow) -> f64| {
            median(
                rows.iter()
                    .filter(|r| r.regime == regime)
                    .map(f)
                    .collect::<Vec<_>>(),
            )
        };
        let trainable = rows
            .iter()
            .find(|r| r.regime == regime)
            .map_or(0, |r| r.trainable_params);
        medians.push(RegimeSummary {
            regime,
            dev_wer: of(|r| r.dev_wer),
            test_wer: of(|r| r.test_wer),
            step_seconds: of(|r| r.step_seconds),
            step_ratio_vs_frozen: None,
            trainable_params: trainable,
        });
    }
    if let Some(frozen) = medians
        .iter()
        .find(|m| m.regime == Regime::Frozen)
        .map(|m| m.step_seconds)
    {
        if frozen > 0.0 {
            for m in medians.iter_mut() {
                m.step_ratio_vs_frozen = Some(m.step_seconds / frozen);
            }
        }
    }

    let report = ComparisonReport { rows, medians };
    std::fs::create_dir_all(out_root)
        .map_err(|e| Error::io(out_root.display().to_string(), e))?;
    write_text(&out_root.join("compare.csv"), &report.csv())?;
    write_text(&out_root.join("compare.txt"), &report.text_table())?;
    write_json(&out_root.join("compare.json"), &report)?;
    Ok(report)
}
