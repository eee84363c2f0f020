use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mork_core::calibration::{calibrate_model, PredictorParams, PredictorTable};
use mork_core::cluster::ModelClusters;
use mork_core::container::ModelContainer;
use mork_core::report::{self, StatsFile, StatsHeader};
use mork_core::runtime::{hybrid_forward, HybridConfig, HybridModel, OutcomeCounts, PredictorMode, SkipStats};
use mork_core::sim::{simulate, SimConfig};
use mork_core::sweep;
use mork_core::synth;
use mork_core::tensor_file::{read_batch, write_batch};

#[derive(Parser)]
#[command(name = "mork", version, about = "Hybrid zero-output prediction for quantized ReLU networks")]
struct Cli {
    /// Seed for every random choice (synthetic models and inputs).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML file with [accel], [accel.dram] and [cost] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Label each prediction against exact evaluation.
    #[arg(long, global = true)]
    oracle: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    /// Two clustered ReLU layers with signed inputs.
    Sweep,
    /// One wide, highly sparse ReLU layer with a linear head.
    Sparse,
    /// A random model with conv, BN and residual layers.
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Off,
    Hybrid,
    BinaryOnly,
    ProxyOnly,
}

impl Mode {
    fn core(self) -> PredictorMode {
        match self {
            Mode::Off => PredictorMode::Off,
            Mode::Hybrid => PredictorMode::Hybrid,
            Mode::BinaryOnly => PredictorMode::BinaryOnly,
            Mode::ProxyOnly => PredictorMode::ProxyOnly,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Mode::Off => "off",
            Mode::Hybrid => "hybrid",
            Mode::BinaryOnly => "binary_only",
            Mode::ProxyOnly => "proxy_only",
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic model container and a matching input batch.
    Synth {
        #[arg(long, value_enum, default_value = "sweep")]
        fixture: Fixture,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
    },
    /// Fit predictor parameters from calibration samples.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group neurons into proxy clusters.
    Cluster {
        #[arg(long)]
        model: PathBuf,
        /// Drop graph edges wider than this many degrees.
        #[arg(long)]
        max_angle: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference with the predictor and report skips.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, value_enum, default_value = "hybrid")]
        mode: Mode,
        /// Re-gate the stored parameters at this threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Write the output activations here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the accelerator and write a stats file.
    Sim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, value_enum, default_value = "hybrid")]
        mode: Mode,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep thresholds for the hybrid and binary-only predictors.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        thresholds: Vec<f64>,
        /// CSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a predictor run against its predictor-off baseline.
    Report {
        baseline: PathBuf,
        predicted: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<ModelContainer> {
    ModelContainer::load(path).with_context(|| format!("loading {}", path.display()))
}

fn sim_config(path: Option<&Path>) -> Result<SimConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(SimConfig::from_toml(&text)?)
        }
        None => Ok(SimConfig::default()),
    }
}

fn disabled_table(c: &ModelContainer) -> PredictorTable {
    PredictorTable {
        threshold: 1.0,
        layers: c
            .model
            .layers()
            .iter()
            .map(|l| vec![PredictorParams::disabled(); l.neurons])
            .collect(),
    }
}

struct Parts {
    clusters: ModelClusters,
    params: PredictorTable,
}

fn parts(c: &ModelContainer, mode: Mode) -> Result<Parts> {
    let params = match (&c.params, mode) {
        (Some(p), _) => p.clone(),
        (None, Mode::Off | Mode::ProxyOnly) => disabled_table(c),
        (None, _) => bail!("container has no predictor parameters; run `mork calibrate` first"),
    };
    let clusters = c.clusters.clone().unwrap_or_else(|| ModelClusters::unclustered(&c.model));
    Ok(Parts { clusters, params })
}

fn predictor_config(mode: Mode, threshold: Option<f64>, oracle: bool) -> HybridConfig {
    let mut cfg = HybridConfig::default().with_mode(mode.core()).with_oracle(oracle);
    cfg.threshold = threshold;
    cfg
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            fixture,
            model,
            samples,
            count,
        } => {
            let (m, batch) = match fixture {
                Fixture::Sweep => {
                    let m = synth::sweep_fixture(cli.seed);
                    let b = synth::input_batch(&m, count, 64, cli.seed.wrapping_add(1));
                    (m, b)
                }
                Fixture::Sparse => {
                    let m = synth::sparse_workload(cli.seed, 512, 1024);
                    let b = synth::sign_batch(&m, count, 1, cli.seed.wrapping_add(1));
                    (m, b)
                }
                Fixture::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
                    let m = synth::random_model(&mut rng, &synth::RandomModelSpec::default());
                    let b = synth::input_batch(&m, count, 64, cli.seed.wrapping_add(1));
                    (m, b)
                }
            };
            ModelContainer::new(m, None, None)?.save(&model)?;
            write_batch(&samples, &batch)?;
            eprintln!("wrote {} and {} samples to {}", model.display(), batch.len(), samples.display());
        }
        Cmd::Calibrate {
            model,
            samples,
            threshold,
            out,
        } => {
            let mut c = load(&model)?;
            let batch = read_batch(&samples)?;
            let table = calibrate_model(&c.model, &batch, threshold)?;
            let total: usize = table.layers.iter().map(Vec::len).sum();
            eprintln!(
                "calibrated on {} samples: {} of {} neurons enabled at T = {}",
                batch.len(),
                table.enabled_count(),
                total,
                threshold
            );
            c.params = Some(table);
            c.save(&out)?;
        }
        Cmd::Cluster { model, max_angle, out } => {
            let mut c = load(&model)?;
            let clusters = ModelClusters::build(&c.model, max_angle);
            for (i, l) in clusters.layers.iter().enumerate() {
                eprintln!(
                    "layer {i}: {} clusters, {} members, {} singletons",
                    l.clusters.len(),
                    l.member_count(),
                    l.singletons.len()
                );
            }
            c.clusters = Some(clusters);
            c.save(&out)?;
        }
        Cmd::Run {
            model,
            inputs,
            mode,
            threshold,
            out,
        } => {
            let c = load(&model)?;
            let p = parts(&c, mode)?;
            let hm = HybridModel {
                model: &c.model,
                clusters: &p.clusters,
                params: &p.params,
            };
            let cfg = predictor_config(mode, threshold, cli.oracle);
            let batch = read_batch(&inputs)?;
            let mut per_layer = vec![(SkipStats::default(), OutcomeCounts::default()); c.model.len()];
            let mut outputs = Vec::with_capacity(batch.len());
            for x in &batch {
                let r = hybrid_forward(hm, x, &cfg)?;
                for (acc, l) in per_layer.iter_mut().zip(&r.layers) {
                    acc.0.merge(&l.stats);
                    if let Some(o) = l.outcome_counts() {
                        acc.1.merge(&o);
                    }
                }
                outputs.push(r.output().cloned().unwrap_or_else(|| x.clone()));
            }
            println!("layer elements skipped binary_dots macs_executed macs_skipped");
            for (i, (s, _)) in per_layer.iter().enumerate() {
                println!(
                    "{i} {} {} {} {} {}",
                    s.elements, s.skipped, s.binary_dots, s.macs_executed, s.macs_skipped
                );
            }
            if cli.oracle {
                println!("layer correct_zero incorrect_zero correct_nonzero incorrect_nonzero not_predicted");
                for (i, (_, o)) in per_layer.iter().enumerate() {
                    println!(
                        "{i} {} {} {} {} {}",
                        o.correct_zero, o.incorrect_zero, o.correct_nonzero, o.incorrect_nonzero, o.not_predicted
                    );
                }
            }
            if let Some(out) = out {
                write_batch(&out, &outputs)?;
            }
        }
        Cmd::Sim {
            model,
            inputs,
            mode,
            threshold,
            out,
        } => {
            let sc = sim_config(cli.config.as_deref())?;
            let c = load(&model)?;
            let p = parts(&c, mode)?;
            let hm = HybridModel {
                model: &c.model,
                clusters: &p.clusters,
                params: &p.params,
            };
            let batch = read_batch(&inputs)?;
            let cfg = predictor_config(mode, threshold, cli.oracle);
            let predictor = match mode {
                Mode::Off => None,
                _ => Some(&cfg),
            };
            let stats = simulate(hm, &batch, &sc.accel, &sc.cost, predictor)?;
            eprintln!(
                "{} cycles ({:.6} s), energy {:.1}",
                stats.total.counts.cycles,
                stats.seconds(&sc.accel),
                stats.total.energy
            );
            let file = StatsFile {
                header: StatsHeader {
                    model_hash: c.model_hash()?,
                    predictor: mode.name().into(),
                    threshold: threshold.or(c.params.as_ref().map(|t| t.threshold)).filter(|_| predictor.is_some()),
                    inputs: batch.len(),
                    seed: cli.seed,
                },
                stats,
            };
            fs::write(&out, file.to_jsonl())?;
        }
        Cmd::Sweep {
            model,
            inputs,
            thresholds,
            out,
        } => {
            let c = load(&model)?;
            let p = parts(&c, Mode::Hybrid)?;
            let hm = HybridModel {
                model: &c.model,
                clusters: &p.clusters,
                params: &p.params,
            };
            let batch = read_batch(&inputs)?;
            let rows = sweep::sweep(hm, &batch, &thresholds)?;
            let csv = sweep::to_csv(&rows)?;
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Cmd::Report {
            baseline,
            predicted,
            csv,
        } => {
            let read = |p: &Path| -> Result<StatsFile> {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                StatsFile::from_jsonl(&text).with_context(|| format!("parsing {}", p.display()))
            };
            let (b, p) = (read(&baseline)?, read(&predicted)?);
            let rows = report::compare(&b, &p)?;
            print!("{}", report::to_text(&b.header, &p.header, &rows));
            if let Some(path) = csv {
                fs::write(path, report::to_csv(&rows)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
