//! Modified (1 + lambda) evolution strategy.
//!
//! Each generation:
//! 1. derive lambda offspring from the parent by forced mutation;
//! 2. evaluate them concurrently, one thread per offspring;
//! 3. if no offspring beats the parent, neutral-mutate the parent (its
//!    cached fitness is kept because the phenotype is unchanged);
//! 4. keep the fittest individual, preferring offspring on ties.
//!
//! Mutation randomness comes from the state's own generator; each
//! evaluation gets a stream derived from `(seed, generation, index)`, so a
//! run is reproducible regardless of thread scheduling.

use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluator::{Evaluator, FailureReason, FitnessResult};
use crate::genome::{forced_mutation, neutral_mutation, random_genotype, CgpConfig, GenomeError, Genotype};
use crate::rng::{derive_stream, seeded, Rng, RngState};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "cgpnas-checkpoint";
pub const CSV_HEADER: &str = "generation,parent_fitness,offspring_fitnesses,parent_active_count,parent_param_count,elapsed_seconds";

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("lambda must be at least 1")]
    InvalidLambda,
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub genotype: Genotype,
    pub result: FitnessResult,
}

impl Individual {
    pub fn fitness(&self) -> f64 {
        self.result.fitness
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub generation: u64,
    pub parent_fitness: f64,
    pub offspring_fitnesses: Vec<f64>,
    pub parent_active_count: usize,
    pub parent_param_count: usize,
    /// Cumulative evaluation wall time reported by the evaluator, counting
    /// each generation's concurrent evaluations by their slowest member.
    pub elapsed_seconds: f64,
}

impl GenerationRecord {
    pub fn csv_row(&self) -> String {
        let offspring: Vec<String> = self.offspring_fitnesses.iter().map(f64::to_string).collect();
        format!(
            "{},{},{},{},{},{}",
            self.generation,
            self.parent_fitness,
            offspring.join(";"),
            self.parent_active_count,
            self.parent_param_count,
            self.elapsed_seconds
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(format!("expected 6 fields, found {}", f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        let int = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
        Ok(GenerationRecord {
            generation: int(f[0])? as u64,
            parent_fitness: num(f[1])?,
            offspring_fitnesses: if f[2].is_empty() {
                Vec::new()
            } else {
                f[2].split(';').map(num).collect::<Result<_, _>>()?
            },
            parent_active_count: int(f[3])?,
            parent_param_count: int(f[4])?,
            elapsed_seconds: num(f[5])?,
        })
    }
}

/// Renders a history as CSV with header.
pub fn history_csv(history: &[GenerationRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionState {
    pub seed: u64,
    pub lambda: usize,
    pub generation: u64,
    pub parent: Individual,
    /// Fitness of the first parent, before any generation ran.
    pub initial_fitness: f64,
    /// Recorded so a resumed run can refuse a different evaluator.
    pub evaluator_id: String,
    pub rng: RngState,
    pub elapsed_seconds: f64,
    pub evaluations: u64,
    pub history: Vec<GenerationRecord>,
}

/// Outcome of [`select_elite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elite {
    Parent,
    Offspring(usize),
}

/// Highest fitness wins; an offspring equal to the parent beats it, and
/// equal offspring resolve to the lowest index.
pub fn select_elite(parent: f64, offspring: &[f64]) -> Elite {
    let mut best = Elite::Parent;
    let mut best_fitness = parent;
    for (i, &f) in offspring.iter().enumerate() {
        let better = match best {
            Elite::Parent => f >= best_fitness,
            Elite::Offspring(_) => f > best_fitness,
        };
        if better {
            best = Elite::Offspring(i);
            best_fitness = f;
        }
    }
    best
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "evaluator panicked".into())
}

/// Runs the evaluator, turning panics and out-of-range fitness into a zero
/// fitness result so that one bad candidate never stops the run.
fn guarded(evaluator: &dyn Evaluator, genotype: &Genotype, mut rng: Rng) -> FitnessResult {
    match panic::catch_unwind(AssertUnwindSafe(|| evaluator.evaluate(genotype, &mut rng))) {
        Ok(r) if (0.0..=1.0).contains(&r.fitness) => r,
        Ok(r) => FitnessResult::failed(
            FailureReason::EvaluatorError(format!("fitness {} outside [0, 1]", r.fitness)),
            r.param_count,
        ),
        Err(payload) => FitnessResult::failed(FailureReason::EvaluatorError(panic_message(payload)), 0),
    }
}

fn evaluate_all(evaluator: &dyn Evaluator, genotypes: &[Genotype], seed: u64, generation: u64) -> Vec<FitnessResult> {
    let stream = |i: usize| derive_stream(seed, generation, i as u64 + 1);
    if genotypes.len() == 1 {
        return vec![guarded(evaluator, &genotypes[0], stream(0))];
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = genotypes
            .iter()
            .enumerate()
            .map(|(i, g)| scope.spawn(move || guarded(evaluator, g, stream(i))))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|p| {
                    FitnessResult::failed(FailureReason::EvaluatorError(panic_message(p)), 0)
                })
            })
            .collect()
    })
}

/// Draws and evaluates the first parent (generation 0).
pub fn initialize(
    config: &CgpConfig,
    lambda: usize,
    seed: u64,
    evaluator: &dyn Evaluator,
) -> Result<EvolutionState, EvolutionError> {
    if lambda == 0 {
        return Err(EvolutionError::InvalidLambda);
    }
    config.validate()?;
    let mut rng = seeded(seed);
    let genotype = random_genotype(config, &mut rng)?;
    let result = guarded(evaluator, &genotype, derive_stream(seed, 0, 0));
    Ok(EvolutionState {
        seed,
        lambda,
        generation: 0,
        initial_fitness: result.fitness,
        elapsed_seconds: result.wall_seconds,
        parent: Individual { genotype, result },
        evaluator_id: evaluator.id(),
        rng: RngState::capture(&rng),
        evaluations: 1,
        history: Vec::new(),
    })
}

/// Advances `state` by one generation and returns the evaluated offspring
/// in index order.
pub fn step(state: &mut EvolutionState, evaluator: &dyn Evaluator) -> Result<Vec<Individual>, EvolutionError> {
    if state.lambda == 0 {
        return Err(EvolutionError::InvalidLambda);
    }
    let mut rng = state.rng.restore();
    let generation = state.generation + 1;
    let offspring: Vec<Genotype> = (0..state.lambda)
        .map(|_| forced_mutation(&state.parent.genotype, &mut rng))
        .collect::<Result<_, _>>()?;
    let results = evaluate_all(evaluator, &offspring, state.seed, generation);
    state.evaluations += results.len() as u64;
    let fitnesses: Vec<f64> = results.iter().map(|r| r.fitness).collect();

    let best = fitnesses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best <= state.parent.fitness() {
        state.parent.genotype = neutral_mutation(&state.parent.genotype, &mut rng);
    }
    if let Elite::Offspring(i) = select_elite(state.parent.fitness(), &fitnesses) {
        state.parent = Individual {
            genotype: offspring[i].clone(),
            result: results[i].clone(),
        };
    }

    state.elapsed_seconds += results.iter().map(|r| r.wall_seconds).fold(0.0, f64::max);
    state.generation = generation;
    state.rng = RngState::capture(&rng);
    state.history.push(GenerationRecord {
        generation,
        parent_fitness: state.parent.fitness(),
        offspring_fitnesses: fitnesses,
        parent_active_count: state.parent.genotype.active_count(),
        parent_param_count: state.parent.result.param_count,
        elapsed_seconds: state.elapsed_seconds,
    });
    Ok(offspring
        .into_iter()
        .zip(results)
        .map(|(genotype, result)| Individual { genotype, result })
        .collect())
}

/// Steps until `generations` have run in total, calling `sink` after every
/// generation. Stops early, after the current generation, once `stop` is
/// set.
pub fn run(
    state: &mut EvolutionState,
    generations: u64,
    evaluator: &dyn Evaluator,
    sink: &mut dyn FnMut(&EvolutionState) -> Result<(), EvolutionError>,
    stop: Option<&AtomicBool>,
) -> Result<(), EvolutionError> {
    while state.generation < generations {
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            break;
        }
        step(state, evaluator)?;
        sink(state)?;
    }
    Ok(())
}

/// Initializes and runs a fresh search.
pub fn evolve(
    config: &CgpConfig,
    lambda: usize,
    generations: u64,
    seed: u64,
    evaluator: &dyn Evaluator,
    sink: &mut dyn FnMut(&EvolutionState) -> Result<(), EvolutionError>,
) -> Result<EvolutionState, EvolutionError> {
    let mut state = initialize(config, lambda, seed, evaluator)?;
    run(&mut state, generations, evaluator, sink, None)?;
    Ok(state)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes a state as versioned text closed by a SHA-256 of everything
/// before the final line.
pub fn save_checkpoint(state: &EvolutionState) -> String {
    let mut body = String::new();
    let _ = writeln!(body, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
    let _ = writeln!(body, "seed={}", state.seed);
    let _ = writeln!(body, "lambda={}", state.lambda);
    let _ = writeln!(body, "generation={}", state.generation);
    let _ = writeln!(body, "initial_fitness={}", state.initial_fitness);
    let _ = writeln!(body, "evaluator={}", state.evaluator_id);
    let _ = writeln!(body, "rng={}", state.rng);
    let _ = writeln!(body, "elapsed_seconds={}", state.elapsed_seconds);
    let _ = writeln!(body, "evaluations={}", state.evaluations);
    let _ = writeln!(body, "parent_result={}", state.parent.result.to_json());
    let genotype = state.parent.genotype.to_string();
    let _ = writeln!(body, "parent_genotype_lines={}", genotype.lines().count());
    body.push_str(&genotype);
    if !genotype.ends_with('\n') {
        body.push('\n');
    }
    let _ = writeln!(body, "history_rows={}", state.history.len());
    for r in &state.history {
        let _ = writeln!(body, "{}", r.csv_row());
    }
    let digest = hex(&Sha256::digest(body.as_bytes()));
    let _ = writeln!(body, "end sha256={digest}");
    body
}

pub fn load_checkpoint(text: &str) -> Result<EvolutionState, EvolutionError> {
    let corrupt = |m: String| EvolutionError::CorruptCheckpoint(m);
    let first = text.lines().next().unwrap_or_default();
    let version = first
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|v| v.trim().strip_prefix('v'))
        .ok_or_else(|| corrupt("missing checkpoint header".into()))?;
    let version: u32 = version.parse().map_err(|_| corrupt(format!("bad version {version:?}")))?;
    if version != CHECKPOINT_VERSION {
        return Err(EvolutionError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let body_end = text
        .trim_end_matches('\n')
        .rfind('\n')
        .map(|i| i + 1)
        .ok_or_else(|| corrupt("truncated".into()))?;
    let (body, trailer) = text.split_at(body_end);
    let digest = trailer
        .trim_end()
        .strip_prefix("end sha256=")
        .ok_or_else(|| corrupt("missing end marker (truncated file?)".into()))?;
    if digest != hex(&Sha256::digest(body.as_bytes())) {
        return Err(corrupt("checksum mismatch".into()));
    }

    let mut lines = body.lines().skip(1);
    let mut field = |key: &str| -> Result<String, EvolutionError> {
        let line = lines.next().ok_or_else(|| corrupt(format!("missing {key}")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .map(str::to_string)
            .ok_or_else(|| corrupt(format!("expected {key}=, found {line:?}")))
    };
    fn parse<T: std::str::FromStr>(key: &str, v: String) -> Result<T, EvolutionError> {
        v.parse().map_err(|_| EvolutionError::CorruptCheckpoint(format!("bad {key}: {v:?}")))
    }
    let seed = parse("seed", field("seed")?)?;
    let lambda = parse("lambda", field("lambda")?)?;
    let generation = parse("generation", field("generation")?)?;
    let initial_fitness = parse("initial_fitness", field("initial_fitness")?)?;
    let evaluator_id = field("evaluator")?;
    let rng = field("rng")?.parse::<RngState>().map_err(|e| corrupt(format!("rng: {e}")))?;
    let elapsed_seconds = parse("elapsed_seconds", field("elapsed_seconds")?)?;
    let evaluations = parse("evaluations", field("evaluations")?)?;
    let result: FitnessResult =
        serde_json::from_str(&field("parent_result")?).map_err(|e| corrupt(format!("parent_result: {e}")))?;
    let n: usize = parse("parent_genotype_lines", field("parent_genotype_lines")?)?;
    let genotype_text: String = (0..n)
        .map(|_| lines.next().map(|l| format!("{l}\n")))
        .collect::<Option<String>>()
        .ok_or_else(|| corrupt("genotype truncated".into()))?;
    let genotype: Genotype = genotype_text.parse().map_err(|e| corrupt(format!("genotype: {e}")))?;
    let rows: usize = {
        let line = lines.next().ok_or_else(|| corrupt("missing history_rows".into()))?;
        let v = line
            .strip_prefix("history_rows=")
            .ok_or_else(|| corrupt(format!("expected history_rows=, found {line:?}")))?;
        parse("history_rows", v.to_string())?
    };
    let history = (0..rows)
        .map(|_| {
            let line = lines.next().ok_or_else(|| corrupt("history truncated".into()))?;
            GenerationRecord::parse_csv_row(line).map_err(|e| corrupt(format!("history: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if lines.next().is_some() {
        return Err(corrupt("unexpected trailing lines".into()));
    }
    Ok(EvolutionState {
        seed,
        lambda,
        generation,
        parent: Individual { genotype, result },
        initial_fitness,
        evaluator_id,
        rng,
        elapsed_seconds,
        evaluations,
        history,
    })
}
