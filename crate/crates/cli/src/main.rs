use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use umamba::bench::{bench_scan, ScanBenchCfg};
use umamba::gradcheck::run_suite;
use umamba::metrics::instance::{instances_from_semantic, InstanceCfg};
use umamba::metrics::report::{EvalReport, InstanceCase, SemanticCase};
use umamba::network::checkpoint::Checkpoint;
use umamba::network::sliding::SlidingCfg;
use umamba::network::{Network, NetworkPlan, Variant};
use umamba::pipeline::planner::{plan_configuration, PlannerCfg, DEFAULT_MEMORY_BUDGET};
use umamba::pipeline::synth::{synth_generate, SynthSpec, SynthTask};
use umamba::pipeline::{DatasetFingerprint, DatasetManifest, Split};
use umamba::tensor::{io, LabelMap};
use umamba::train::{predict_labels, train_observed, OptimCfg, TrainCfg};
use umamba::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "umamba", version, about = "Hybrid CNN/state-space segmentation: plan, train, predict, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Fingerprint a dataset and print the derived network plan as JSON.
    Plan {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MEMORY_BUDGET)]
        memory_budget: u64,
        #[arg(long, default_value = "enc")]
        variant: Variant,
        #[arg(long, default_value_t = 32)]
        base_channels: usize,
        /// Write the plan here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic 2D dataset with its manifest.
    Synth {
        #[arg(long)]
        task: SynthTask,
        #[arg(long, default_value_t = 20)]
        n_train: usize,
        #[arg(long, default_value_t = 5)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; writes checkpoint.umck, train.log, plan.json and fingerprint.json.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Plan file; derived from the dataset when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Overrides the plan's variant.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        /// Optimizer steps per epoch; one pass over the training cases by default.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = DEFAULT_MEMORY_BUDGET)]
        memory_budget: u64,
        #[arg(long, default_value_t = 32)]
        base_channels: usize,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Random flips and intensity scaling of training patches.
        #[arg(long)]
        augment: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window prediction; writes one label map per case as <id>.umtn.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score label maps <pred>/<id>.umtn against the manifest's labels.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Surface tolerance for NSD in physical units.
        #[arg(long, default_value_t = 1.0)]
        tolerance: f64,
        /// Score cell instances (background/interior/boundary maps) by F1 instead.
        #[arg(long)]
        instance: bool,
        /// IoU threshold for instance matching.
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampled elements per input tensor.
        #[arg(long, default_value_t = 24)]
        per_input: usize,
    },
    /// Time the selective scan across sequence lengths.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        repeats: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn entries(m: &DatasetManifest, split: SplitArg) -> Vec<&umamba::pipeline::CaseEntry> {
    m.cases
        .iter()
        .filter(|c| match split {
            SplitArg::Train => c.split == Split::Train,
            SplitArg::Test => c.split == Split::Test,
            SplitArg::All => true,
        })
        .collect()
}

fn derive_plan(fp: &DatasetFingerprint, memory_budget: u64, variant: Variant, base: usize) -> Result<NetworkPlan> {
    let cfg = PlannerCfg {
        memory_budget,
        base_channels: base,
        variant,
    };
    let outcome = plan_configuration(fp, &cfg)?;
    for w in &outcome.warnings {
        eprintln!("warning\t{w}");
    }
    Ok(outcome.plan)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Plan {
            manifest,
            memory_budget,
            variant,
            base_channels,
            out,
        } => {
            let (m, root) = DatasetManifest::load(&manifest)?;
            let fp = DatasetFingerprint::compute(&m, &root)?;
            let plan = derive_plan(&fp, memory_budget, variant, base_channels)?;
            emit(out.as_deref(), &format!("{}\n", plan.to_json()))
        }
        Command::Synth {
            task,
            n_train,
            n_test,
            size,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                task,
                n_train,
                n_test,
                size,
                seed,
            };
            let m = synth_generate(&spec, &out)?;
            println!("wrote {} cases to {}", m.cases.len(), out.join("manifest.json").display());
            Ok(())
        }
        Command::Train {
            manifest,
            plan,
            variant,
            seed,
            epochs,
            iterations,
            lr,
            memory_budget,
            base_channels,
            checkpoint_every,
            augment,
            resume,
            out,
        } => {
            let (m, root) = DatasetManifest::load(&manifest)?;
            let train_set = m.load_split(&root, Split::Train)?;
            let fp = DatasetFingerprint::from_samples(&m, &train_set)?;
            let mut plan = match plan {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    NetworkPlan::from_json(&text)?
                }
                None => derive_plan(&fp, memory_budget, variant.unwrap_or(Variant::Enc), base_channels)?,
            };
            if let Some(v) = variant {
                plan.variant = v;
            }
            plan.validate()?;
            if plan.n_classes != m.n_classes || plan.in_channels != fp.in_channels {
                return Err(Error::Plan(format!(
                    "plan expects {} classes and {} channels, dataset has {} and {}",
                    plan.n_classes, plan.in_channels, m.n_classes, fp.in_channels
                )));
            }
            let samples: Vec<_> = train_set.into_iter().map(|s| fp.normalize_sample(s)).collect();
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_text(&out.join("plan.json"), &plan.to_json())?;
            write_text(
                &out.join("fingerprint.json"),
                &serde_json::to_string_pretty(&fp).expect("fingerprint serializes"),
            )?;
            let cfg = TrainCfg {
                optim: OptimCfg {
                    lr,
                    epochs,
                    iterations_per_epoch: iterations,
                    ..OptimCfg::default()
                },
                seed,
                augment,
                checkpoint_every,
                out_dir: Some(out.clone()),
                ..TrainCfg::default()
            };
            let resume = resume.map(Checkpoint::<f32>::load).transpose()?;
            let outcome = train_observed(&plan, &samples, &cfg, resume, &mut |epoch, loss| {
                eprintln!("epoch {epoch} loss {loss}");
            })?;
            let last = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} epochs; final loss {last}; checkpoint {}",
                outcome.checkpoint.epoch,
                out.join("checkpoint.umck").display()
            );
            Ok(())
        }
        Command::Predict {
            checkpoint,
            manifest,
            split,
            overlap,
            out,
        } => {
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            let (m, root) = DatasetManifest::load(&manifest)?;
            let fp = DatasetFingerprint::compute(&m, &root)?;
            let mut net = Network::<f32>::build(&ck.plan, ck.seed)?;
            net.load_params(ck.params)?;
            let sliding = SlidingCfg {
                overlap,
                ..SlidingCfg::default()
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let cases = entries(&m, split);
            for entry in &cases {
                let s = fp.normalize_sample(m.load_case(&root, entry)?);
                let labels = predict_labels(&net, &s.image, &sliding)?;
                io::write(out.join(format!("{}.umtn", s.id)), &labels)?;
            }
            println!("wrote {} label maps to {}", cases.len(), out.display());
            Ok(())
        }
        Command::Evaluate {
            manifest,
            pred,
            split,
            tolerance,
            instance,
            iou,
            out,
        } => {
            let (m, root) = DatasetManifest::load(&manifest)?;
            let inst_cfg = InstanceCfg::default();
            let mut semantic = Vec::new();
            let mut instances = Vec::new();
            for entry in entries(&m, split) {
                let s = m.load_case(&root, entry)?;
                let path = pred.join(format!("{}.umtn", s.id));
                let p: LabelMap = io::read(&path).map_err(|e| Error::Dataset(format!("case {}: {e}", s.id)))?;
                if instance {
                    let (pi, gi) = (instances_from_semantic(&p, &inst_cfg)?, instances_from_semantic(&s.label, &inst_cfg)?);
                    instances.push(InstanceCase::score(&s.id, &pi, &gi, iou)?);
                } else {
                    semantic.push(SemanticCase::score(&s.id, &p, &s.label, m.n_classes, &s.spacing, tolerance)?);
                }
            }
            let report = if instance {
                EvalReport::Instance {
                    iou_threshold: iou,
                    cases: instances,
                }
            } else {
                EvalReport::Semantic {
                    class_names: m.class_names[1..].to_vec(),
                    tolerance,
                    cases: semantic,
                }
            };
            emit(out.as_deref(), &report.to_text())
        }
        Command::Gradcheck { seed, per_input } => {
            let results = run_suite(seed, per_input)?;
            let mut stdout = std::io::stdout().lock();
            for r in &results {
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                writeln!(stdout, "{}\t{:.3e}\t{}\t{verdict}", r.name, r.max_rel_err, r.checked).expect("stdout");
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numeric(format!("gradient check failed for {}", failed.join(","))))
            }
        }
        Command::BenchScan {
            lengths,
            repeats,
            channels,
            state,
            out,
        } => {
            let cfg = ScanBenchCfg {
                lengths,
                repeats,
                channels,
                state,
                ..ScanBenchCfg::default()
            };
            emit(out.as_deref(), &bench_scan(&cfg)?.to_text())
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error\tusage\t{}", one_line(first));
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error\t{}\t{}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_VALIDATION })
        }
    }
}
