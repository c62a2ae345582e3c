//! `cgpnas`: architecture search, retraining, evaluation and export.

mod config;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use cgpnas::catalog::TensorShape;
use cgpnas::data::{load_cifar10, load_synthetic, mean_subtract, split, synthetic_dataset, Dataset, Scenario};
use cgpnas::evaluator::{retrain, Evaluator, FailureReason, FitnessResult, SurrogateEvaluator, TrainingEvaluator};
use cgpnas::evolution::{history_csv, initialize, load_checkpoint, save_checkpoint, step, EvolutionState};
use cgpnas::genome::Genotype;
use cgpnas::nn::{coverage_graph, grad_check, save_weights, BuildOptions, Network, Tensor4};
use cgpnas::phenotype::decode;
use cgpnas::rng::{derive_stream, seeded};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;

use config::{parse_override, ConfigError, DataSource, RunConfig};

const AFTER_HELP: &str = "\
Exit codes:
  0    success
  1    internal or I/O error, or gradient check above tolerance
  2    configuration or usage error
  3    dataset error
  4    genotype or architecture error
  130  interrupted (a final checkpoint was written)

Environment:
  CGPNAS_DATA_DIR  CIFAR-10 binary directory when data_path is unset";

#[derive(Parser)]
#[command(name = "cgpnas", version, about = "Evolutionary CNN architecture search", after_help = AFTER_HELP)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset for data sizes, training schedules and generation budget.
    #[arg(long, global = true)]
    scenario: Option<Scenario>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use a surrogate fitness instead of training, e.g.
    /// `target_active_count(25)`.
    #[arg(long, global = true)]
    surrogate: Option<String>,
    /// Output directory for `search`, output file for the other commands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_override)]
    set: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the evolutionary search.
    Search {
        /// Continues from a checkpoint written by an earlier search.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Retrains a genotype with the retrain schedule and reports test
    /// accuracy.
    Retrain {
        genotype: PathBuf,
        /// Also saves the trained weights.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Computes the fitness of one genotype.
    Eval { genotype: PathBuf },
    /// Renders a genotype's architecture.
    Export {
        genotype: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Dot)]
        format: Format,
    },
    /// Compares analytic and numeric gradients in 64-bit mode.
    Gradcheck {
        /// Genotype to check; defaults to a graph using every node kind.
        genotype: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 8)]
        image_size: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Dot,
    Json,
}

#[derive(Debug)]
enum Failure {
    Internal(String),
    Config(String),
    Data(String),
    Genotype(String),
    Interrupted,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Internal(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Genotype(_) => 4,
            Failure::Interrupted => 130,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Interrupted => eprintln!("interrupted; checkpoint written"),
                Failure::Internal(m) | Failure::Config(m) | Failure::Data(m) | Failure::Genotype(m) => {
                    eprintln!("error: {m}")
                }
            }
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg = resolve_config(&cli.common, matches!(cli.command, Command::Search { .. }))?;
    let out = cli.common.out.clone();
    match cli.command {
        Command::Search { resume } => search(&cfg, resume.as_deref()),
        Command::Retrain { genotype, weights } => cmd_retrain(&cfg, &genotype, out.as_deref(), weights.as_deref()),
        Command::Eval { genotype } => eval(&cfg, &genotype, out.as_deref()),
        Command::Export { genotype, format } => export(&cfg, &genotype, format, out.as_deref()),
        Command::Gradcheck {
            genotype,
            samples,
            eps,
            tolerance,
            image_size,
            batch,
        } => gradcheck(&cfg, genotype.as_deref(), samples, eps, tolerance, image_size, batch),
    }
}

fn resolve_config(common: &Common, out_is_dir: bool) -> Outcome<RunConfig> {
    let text = match &common.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| Failure::Config(format!("cannot read {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(s) = &common.surrogate {
        overrides.push(("surrogate".into(), s.clone()));
    }
    if let (true, Some(out)) = (out_is_dir, &common.out) {
        overrides.push(("output_dir".into(), out.display().to_string()));
    }
    Ok(RunConfig::resolve(common.scenario, text.as_deref(), &overrides)?)
}

fn read_genotype(path: &Path) -> Outcome<Genotype> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Genotype(format!("cannot read {}: {e}", path.display())))?;
    text.parse()
        .map_err(|e| Failure::Genotype(format!("{}: {e}", path.display())))
}

fn load_source(cfg: &RunConfig) -> Outcome<(Dataset, Option<Dataset>)> {
    let data = |e: cgpnas::data::DataError| Failure::Data(e.to_string());
    match cfg.dataset {
        DataSource::Cifar10 => {
            let dir = cfg
                .data_path
                .clone()
                .or_else(|| std::env::var_os("CGPNAS_DATA_DIR").map(PathBuf::from))
                .ok_or_else(|| Failure::Data("CIFAR-10 location unknown: set data_path or CGPNAS_DATA_DIR".into()))?;
            let c = load_cifar10(&dir).map_err(data)?;
            Ok((c.train, Some(c.test)))
        }
        DataSource::Synthetic => Ok((synthetic_dataset(cfg.synthetic, cfg.synthetic_seed), None)),
        DataSource::File => {
            let path = cfg
                .data_path
                .as_ref()
                .ok_or_else(|| Failure::Data("dataset = file needs data_path".into()))?;
            Ok((load_synthetic(path).map_err(data)?, None))
        }
    }
}

/// Mean-subtracted search split.
fn load_search_data(cfg: &RunConfig) -> Outcome<(Dataset, Dataset)> {
    let (source, _) = load_source(cfg)?;
    let (mut train, mut val) = split(&source, cfg.split_spec()).map_err(|e| Failure::Data(e.to_string()))?;
    mean_subtract(&mut train, &mut [&mut val]).map_err(|e| Failure::Data(e.to_string()))?;
    Ok((train, val))
}

/// Full training set and a held-out test set, mean-subtracted. Synthetic
/// test data is a fresh draw from the same class templates; file datasets
/// hold out their validation split.
fn load_retrain_data(cfg: &RunConfig) -> Outcome<(Dataset, Dataset)> {
    let (source, test) = load_source(cfg)?;
    let (mut train, mut test) = match (cfg.dataset, test) {
        (_, Some(test)) => (source, test),
        (DataSource::Synthetic, None) => {
            let spec = cgpnas::data::SyntheticSpec {
                samples: cfg.val_n,
                ..cfg.synthetic
            };
            (source, synthetic_dataset(spec, cfg.synthetic_seed.wrapping_add(1)))
        }
        (_, None) => split(&source, cfg.split_spec()).map_err(|e| Failure::Data(e.to_string()))?,
    };
    mean_subtract(&mut train, &mut [&mut test]).map_err(|e| Failure::Data(e.to_string()))?;
    Ok((train, test))
}

fn data_shape(cfg: &RunConfig) -> Outcome<(TensorShape, usize)> {
    match cfg.data_shape() {
        Some(s) => Ok(s),
        None => {
            let (ds, _) = load_source(cfg)?;
            Ok((ds.shape(), ds.classes))
        }
    }
}

fn build_evaluator(cfg: &RunConfig) -> Outcome<Box<dyn Evaluator>> {
    match &cfg.surrogate {
        Some(s) => {
            let (input, classes) = data_shape(cfg)?;
            Ok(Box::new(SurrogateEvaluator::new(*s, input, classes)))
        }
        None => {
            let (train, val) = load_search_data(cfg)?;
            Ok(Box::new(TrainingEvaluator {
                train,
                val,
                cfg: cfg.search.clone(),
            }))
        }
    }
}

/// Writes `contents` to a sibling temp file first so readers never see a
/// partial file.
fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(tmp, path)
}

fn result_line(generation: u64, index: usize, g: &Genotype, r: &FitnessResult) -> String {
    serde_json::json!({
        "generation": generation,
        "index": index,
        "active_count": g.active_count(),
        "result": r,
    })
    .to_string()
}

fn architecture_dot(g: &Genotype, shape: Option<(TensorShape, usize)>) -> String {
    let graph = decode(g);
    match shape.and_then(|(input, classes)| graph.infer_shapes(input, classes).ok()) {
        Some(shaped) => shaped.to_dot(),
        None => graph.to_dot(),
    }
}

fn write_outputs(dir: &Path, state: &EvolutionState, shape: Option<(TensorShape, usize)>) -> Outcome {
    write_atomic(&dir.join("checkpoint.txt"), save_checkpoint(state).as_bytes())?;
    write_atomic(&dir.join("history.csv"), history_csv(&state.history).as_bytes())?;
    write_atomic(&dir.join("best.genotype"), state.parent.genotype.to_string().as_bytes())?;
    write_atomic(&dir.join("best.dot"), architecture_dot(&state.parent.genotype, shape).as_bytes())?;
    Ok(())
}

fn search(cfg: &RunConfig, resume: Option<&Path>) -> Outcome {
    let evaluator = build_evaluator(cfg)?;
    let shape = data_shape(cfg).ok();
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;

    let mut state = match resume {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let state = load_checkpoint(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            if state.evaluator_id != evaluator.id() {
                return Err(Failure::Config(format!(
                    "checkpoint was written with evaluator {:?}, configuration gives {:?}",
                    state.evaluator_id,
                    evaluator.id()
                )));
            }
            if state.parent.genotype.config() != &cfg.cgp {
                return Err(Failure::Config("checkpoint genome settings differ from the configuration".into()));
            }
            state
        }
        None => initialize(&cfg.cgp, cfg.lambda, cfg.seed, evaluator.as_ref())
            .map_err(|e| Failure::Config(e.to_string()))?,
    };

    let manifest = format!(
        "# cgpnas {}\n# evaluator {}\n{}",
        env!("CARGO_PKG_VERSION"),
        evaluator.id(),
        cfg.to_text()
    );
    write_atomic(&dir.join("manifest.cfg"), manifest.as_bytes())?;
    let mut results = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(dir.join("results.jsonl"))?;
    if resume.is_none() {
        writeln!(results, "{}", result_line(0, 0, &state.parent.genotype, &state.parent.result))?;
    }
    write_outputs(dir, &state, shape)?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        // A second handler cannot be installed in the same process; searches
        // run once per process, so the error is ignored.
        let _ = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst));
    }

    eprintln!(
        "generation {}/{}: parent fitness {:.4}",
        state.generation,
        cfg.generations,
        state.parent.fitness()
    );
    while state.generation < cfg.generations {
        if stop.load(Ordering::SeqCst) {
            write_outputs(dir, &state, shape)?;
            return Err(Failure::Interrupted);
        }
        let offspring = step(&mut state, evaluator.as_ref()).map_err(|e| Failure::Internal(e.to_string()))?;
        for (i, ind) in offspring.iter().enumerate() {
            writeln!(results, "{}", result_line(state.generation, i + 1, &ind.genotype, &ind.result))?;
        }
        write_outputs(dir, &state, shape)?;
        let fits: Vec<String> = offspring.iter().map(|o| format!("{:.4}", o.fitness())).collect();
        eprintln!(
            "generation {}/{}: parent fitness {:.4}, offspring [{}], {} active nodes",
            state.generation,
            cfg.generations,
            state.parent.fitness(),
            fits.join(", "),
            state.parent.genotype.active_count()
        );
    }
    println!(
        "best fitness {} (initial {}) after {} generations; outputs in {}",
        state.parent.fitness(),
        state.initial_fitness,
        state.generation,
        dir.display()
    );
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Outcome {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_retrain(cfg: &RunConfig, path: &Path, out: Option<&Path>, weights: Option<&Path>) -> Outcome {
    let genotype = read_genotype(path)?;
    let (input, classes) = data_shape(cfg)?;
    let shaped = decode(&genotype)
        .infer_shapes(input, classes)
        .map_err(|e| Failure::Genotype(format!("{}: {e}", FailureReason::InvalidArchitecture)))?;
    let (train, test) = load_retrain_data(cfg)?;
    let trained = retrain(&genotype, &train, &test, &cfg.retrain, &mut derive_stream(cfg.seed, 0, 0));
    let r = &trained.result;
    let summary = serde_json::json!({
        "genotype": path.display().to_string(),
        "test_accuracy": r.test_accuracy,
        "param_count": r.param_count,
        "phenotype_param_count": shaped.param_count(),
        "epochs": r.epochs_trained,
        "accuracies": r.val_accuracies,
        "wall_seconds": r.wall_seconds,
        "failure": r.failure,
    });
    emit(&format!("{}\n", serde_json::to_string_pretty(&summary).expect("json")), out)?;
    if let Some(reason) = &r.failure {
        return Err(Failure::Genotype(reason.to_string()));
    }
    if let (Some(p), Some(net)) = (weights, &trained.network) {
        save_weights(net, File::create(p)?).map_err(|e| Failure::Internal(e.to_string()))?;
    }
    Ok(())
}

fn eval(cfg: &RunConfig, path: &Path, out: Option<&Path>) -> Outcome {
    let genotype = read_genotype(path)?;
    let evaluator = build_evaluator(cfg)?;
    let result = evaluator.evaluate(&genotype, &mut derive_stream(cfg.seed, 0, 0));
    emit(&format!("{}\n", result.to_json()), out)
}

fn export(cfg: &RunConfig, path: &Path, format: Format, out: Option<&Path>) -> Outcome {
    let genotype = read_genotype(path)?;
    let (input, classes) = data_shape(cfg)?;
    let shaped = decode(&genotype)
        .infer_shapes(input, classes)
        .map_err(|e| Failure::Genotype(format!("{}: {e}", FailureReason::InvalidArchitecture)));
    let text = match format {
        Format::Dot => match shaped {
            Ok(s) => s.to_dot(),
            Err(_) => decode(&genotype).to_dot(),
        },
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&shaped?.to_json()).expect("json")),
    };
    emit(&text, out)
}

fn gradcheck(
    cfg: &RunConfig,
    path: Option<&Path>,
    samples: usize,
    eps: f64,
    tolerance: f64,
    image_size: usize,
    batch: usize,
) -> Outcome {
    let input = TensorShape::new(image_size, image_size, 3);
    let classes = cfg.data_shape().map_or(3, |(_, k)| k);
    let graph = match path {
        Some(p) => decode(&read_genotype(p)?),
        None => coverage_graph(),
    };
    let shaped = graph
        .infer_shapes(input, classes)
        .map_err(|e| Failure::Genotype(format!("{}: {e}", FailureReason::InvalidArchitecture)))?;
    let mut rng = seeded(cfg.seed);
    let mut net: Network<f64> = Network::build(&shaped, &mut rng, BuildOptions::default());
    let x = Tensor4::from_vec(
        batch,
        image_size,
        image_size,
        3,
        (0..batch * input.elements()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let report = grad_check(&mut net, &x, &labels, eps, samples, &mut rng).map_err(|e| Failure::Internal(e.to_string()))?;
    let pass = report.max_rel_error < tolerance;
    println!(
        "{}",
        serde_json::json!({
            "checked": report.checked,
            "max_rel_error": report.max_rel_error,
            "worst": report.worst,
            "tolerance": tolerance,
            "pass": pass,
        })
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Internal(format!(
            "max relative error {:.3e} exceeds {tolerance:e}",
            report.max_rel_error
        )))
    }
}
