//! Command-line harness around the core crate: dataset generation, training,
//! evaluation, regime comparison, cost accounting, gradient checking, and
//! attention-map export.
//!
//! Output paths are names under the directory given by `ADAPTSIGN_OUT_ROOT`
//! (default `./runs`); absolute or explicitly relative paths are used as-is.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use adaptsign_core::backbone::Regime;
use adaptsign_core::cost::{count_flops, overhead_report, scaling_report};
use adaptsign_core::ctc::{ctc_forward_loss, greedy_decode, read_lattice_csv, CtcOutcome};
use adaptsign_core::data::{augment, generate_dataset, load_split};
use adaptsign_core::dump::dump_attention;
use adaptsign_core::gradcheck::primitive_grad_suite;
use adaptsign_core::train::{evaluate_checkpoint, run_comparison, train};
use adaptsign_core::{
    checkpoint, AugmentConfig, ExperimentConfig, Split, SyntheticSpec, Tape, ViTConfig,
    WerBreakdown,
};

#[derive(Parser)]
#[command(name = "adaptsign", version, about = "Sign-language recognition experiments with a frozen transformer backbone and lightweight adaptation modules")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/dev/test splits.
    GenData {
        /// JSON file holding a dataset spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Seed override applied on top of the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory name.
        #[arg(long, default_value = "data")]
        out: String,
    },
    /// Train a model and write metrics, checkpoints, and a run report.
    Train {
        /// JSON experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: String,
        /// Run directory name.
        #[arg(long, default_value = "train")]
        out: String,
        /// Training regime override (frozen, full, partial(n), adaptsign).
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split, or score a stored lattice CSV.
    Eval {
        #[arg(long, required_unless_present = "lattice")]
        checkpoint: Option<String>,
        #[arg(long, required_unless_present = "lattice")]
        data: Option<String>,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Write per-sample decode results to this JSON file.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Score a `[steps x classes]` log-probability CSV instead of a
        /// checkpoint (classes = vocabulary + blank).
        #[arg(long)]
        lattice: Option<PathBuf>,
        /// Comma-separated gloss ids for the lattice loss.
        #[arg(long)]
        labels: Option<String>,
    },
    /// Train every regime over a seed list and tabulate medians.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "compare")]
        out: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Comma-separated regimes.
        #[arg(long, default_value = "frozen,full,partial(1),partial(2),adaptsign", value_delimiter = ',')]
        regimes: Vec<String>,
        /// Worker threads; each run itself stays single-threaded.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Print parameter counts, MAC accounting, overhead bands, and scaling.
    Flops {
        #[arg(long, default_value = "b16")]
        backbone: String,
        /// Clip length used for the per-run totals.
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long, default_value_t = 6)]
        vocab: usize,
        /// Use projected multiscale keys/values instead of the lightweight
        /// default.
        #[arg(long)]
        projected: bool,
    },
    /// Finite-difference check of every differentiable primitive.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export spatial attention and cross-frame gate maps for one sample.
    DumpAttn {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "attn")]
        out: String,
    },
}

fn out_root() -> PathBuf {
    std::env::var_os("ADAPTSIGN_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("./runs"))
}

fn resolve(name: &str) -> PathBuf {
    let path = Path::new(name);
    if path.is_absolute() || name.starts_with("./") || name.starts_with("../") {
        path.to_path_buf()
    } else {
        out_root().join(name)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_experiment(config: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match config {
        Some(path) => read_json(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(s.parse::<Split>()?)
}

fn parse_regime(s: &str) -> Result<Regime> {
    Ok(s.parse::<Regime>()?)
}

fn print_wer(label: &str, b: &WerBreakdown, samples: usize) {
    println!(
        "{label}: WER {:.2}% (sub {}, del {}, ins {}, ref {}) over {samples} samples",
        b.wer(),
        b.sub,
        b.del,
        b.ins,
        b.ref_len
    );
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { spec, seed, out } => {
            let mut spec: SyntheticSpec = match spec {
                Some(path) => read_json(&path)?,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let dir = resolve(&out);
            generate_dataset(&spec, &dir)?;
            println!(
                "wrote {}/{}/{} samples to {}",
                spec.train,
                spec.dev,
                spec.test,
                dir.display()
            );
        }
        Cmd::Train {
            config,
            data,
            out,
            regime,
            seed,
            epochs,
        } => {
            let mut cfg = load_experiment(config.as_ref())?;
            if let Some(r) = regime {
                cfg.regime = parse_regime(&r)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let report = train::<f32>(&cfg, &resolve(&data), &resolve(&out))?;
            println!(
                "trained {} for {} epochs ({} steps, median step {:.4}s, {} trainable params)",
                cfg.regime,
                report.epochs_run,
                report.total_steps,
                report.median_step_seconds,
                report.trainable_params
            );
            println!(
                "train WER {:.2}%  dev WER {:.2}%  test WER {:.2}%  (best dev {:.2}% at epoch {})",
                report.final_train_wer,
                report.final_dev_wer,
                report.final_test_wer,
                report.best_dev_wer,
                report.best_epoch
            );
            println!("run directory: {}", report.out_dir.display());
        }
        Cmd::Eval {
            checkpoint,
            data,
            split,
            samples,
            lattice,
            labels,
        } => {
            if let Some(path) = lattice {
                let lattice = read_lattice_csv(&path)?;
                let vocab = lattice.last_dim() - 1;
                let hypothesis = greedy_decode(&lattice);
                println!(
                    "lattice {}: {} steps, {} classes, greedy decode {:?}",
                    path.display(),
                    lattice.rows(),
                    vocab + 1,
                    hypothesis
                );
                if let Some(labels) = labels {
                    let labels: Vec<usize> = labels
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .context("parsing --labels")?;
                    let mut tape = Tape::<f64>::new();
                    let v = tape.leaf(lattice, false);
                    match ctc_forward_loss(&mut tape, v, &labels, vocab)? {
                        CtcOutcome::Loss(l) => {
                            println!("ctc loss for {labels:?}: {}", tape.value(l).item())
                        }
                        CtcOutcome::Infeasible => {
                            println!("ctc loss for {labels:?}: infeasible (lattice too short)")
                        }
                    }
                }
                return Ok(());
            }
            let ckpt = resolve(&checkpoint.expect("required by clap"));
            let data = resolve(&data.expect("required by clap"));
            let split = parse_split(&split)?;
            let (pooled, evals) =
                evaluate_checkpoint::<f32>(&ckpt, &data, split, &AugmentConfig::default())?;
            print_wer(split.as_str(), &pooled, evals.len());
            if let Some(path) = samples {
                let json = serde_json::to_string_pretty(&evals)?;
                std::fs::write(&path, json)
                    .with_context(|| format!("writing {}", path.display()))?;
                println!("per-sample results: {}", path.display());
            }
        }
        Cmd::Compare {
            config,
            data,
            out,
            seeds,
            regimes,
            parallel,
        } => {
            let cfg = load_experiment(config.as_ref())?;
            let regimes: Vec<Regime> = regimes
                .iter()
                .map(|s| parse_regime(s))
                .collect::<Result<_>>()?;
            let workers = parallel.unwrap_or_else(|| {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            });
            let report = run_comparison::<f32>(
                &cfg,
                &regimes,
                &seeds,
                &resolve(&data),
                &resolve(&out),
                workers,
            )?;
            print!("{}", report.text_table());
            println!("written to {}", resolve(&out).display());
        }
        Cmd::Flops {
            backbone,
            frames,
            vocab,
            projected,
        } => {
            let vit = ViTConfig::by_name(&backbone)?;
            let mut adapt = adaptsign_core::AdaptConfig::default();
            adapt.multiscale_projected = projected;
            let cost = count_flops(&vit, &adapt, vocab, frames);
            print!("{}", cost.text_table(frames == 1));
            println!();
            print!("{}", overhead_report(&vit, &adapt).text_table());
            println!();
            print!("{}", scaling_report(&vit, &adapt, &[16, 49, 196]).text_table());
        }
        Cmd::GradCheck { tol } => {
            let mut failed = 0usize;
            for (name, report) in primitive_grad_suite(tol) {
                let ok = report.passed();
                if !ok {
                    failed += 1;
                }
                println!(
                    "{:<18} max rel err {:.3e}  {}",
                    name,
                    report.max_rel_err(),
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                bail!("{failed} primitive gradient checks failed at tol {tol}");
            }
            println!("all primitive gradients match finite differences at tol {tol}");
        }
        Cmd::DumpAttn {
            checkpoint: ckpt,
            data,
            split,
            index,
            out,
        } => {
            let model = checkpoint::load::<f32>(&resolve(&ckpt))?;
            let split = parse_split(&split)?;
            let (_, samples) = load_split(&resolve(&data), split)?;
            let Some(sample) = samples.get(index) else {
                bail!(
                    "index {index} out of range; {} split has {} samples",
                    split.as_str(),
                    samples.len()
                );
            };
            let aug = AugmentConfig {
                crop: model.cfg.vit.image,
                ..AugmentConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let view = augment(sample, &aug, false, &mut rng)?;
            let dir = resolve(&out);
            let dump = dump_attention(&model, &view.frames_as::<f32>(), &dir)?;
            println!(
                "wrote {} files ({} frames, {}x{} spatial maps, {} gate maps) to {}",
                dump.files.len(),
                dump.spatial.len(),
                dump.side,
                dump.side,
                dump.gates.len(),
                dir.display()
            );
        }
    }
    Ok(())
}
