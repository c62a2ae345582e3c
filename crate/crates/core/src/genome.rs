//! Fixed-length CGP genotype, active-node computation and mutation operators.
//!
//! Node numbering: input nodes occupy ids `0..inputs` and sit in column 0.
//! Grid nodes follow column by column, so the node in grid column `g` and row
//! `r` has id `inputs + g * rows + r`. A grid node in column `g` may read from
//! any node whose column lies within the `levels_back` columns before it,
//! where the input column counts as the column before grid column 0.
//! Output genes may point at any input or grid node.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, FunctionSetId, DEFAULT_CHANNELS};
use crate::phenotype;
use crate::rng::Rng;

/// Attempts allowed before initialization or mutation gives up.
pub const MAX_ATTEMPTS: usize = 10_000;

const TEXT_MAGIC: &str = "cgpnas-genotype v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenomeError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no genotype within the active-node window after {0} attempts")]
    ConfigInfeasible(usize),
    #[error("mutation did not satisfy its constraints after {0} attempts")]
    MutationStuck(usize),
    #[error("invalid genotype: {0}")]
    InvalidGene(String),
    #[error("malformed genotype text at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// Grid geometry and mutation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgpConfig {
    pub rows: usize,
    pub cols: usize,
    pub levels_back: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub mutation_rate: f64,
    /// Inclusive bounds on the number of active grid nodes.
    pub min_active: usize,
    pub max_active: usize,
    pub function_set: FunctionSetId,
    /// Output-channel variants of the convolutional blocks in the catalog.
    pub channels: Vec<usize>,
}

impl Default for CgpConfig {
    fn default() -> Self {
        CgpConfig {
            rows: 5,
            cols: 30,
            levels_back: 10,
            inputs: 1,
            outputs: 1,
            mutation_rate: 0.05,
            min_active: 10,
            max_active: 50,
            function_set: FunctionSetId::ConvSet,
            channels: DEFAULT_CHANNELS.to_vec(),
        }
    }
}

impl CgpConfig {
    pub fn validate(&self) -> Result<(), GenomeError> {
        let bad = |m: &str| Err(GenomeError::InvalidConfig(m.to_string()));
        if self.rows == 0 || self.cols == 0 || self.levels_back == 0 {
            return bad("rows, cols and levels_back must be positive");
        }
        if self.inputs == 0 || self.outputs == 0 {
            return bad("inputs and outputs must be positive");
        }
        if self.levels_back > self.cols {
            return bad("levels_back must not exceed cols");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("mutation_rate must lie in [0, 1]");
        }
        if self.min_active > self.max_active || self.max_active > self.grid_len() {
            return bad("need min_active <= max_active <= rows * cols");
        }
        if self.max_active == 0 {
            return bad("max_active must be positive");
        }
        Catalog::with_channels(self.function_set, &self.channels)?;
        Ok(())
    }

    pub fn grid_len(&self) -> usize {
        self.rows * self.cols
    }

    /// Inputs plus grid nodes.
    pub fn node_count(&self) -> usize {
        self.inputs + self.grid_len()
    }

    pub fn catalog(&self) -> Catalog {
        Catalog::with_channels(self.function_set, &self.channels)
            .expect("validated configuration has a valid catalog")
    }

    /// Grid column of a grid-node id.
    pub fn column_of(&self, node: usize) -> usize {
        (node - self.inputs) / self.rows
    }

    /// Half-open id range a grid node in column `col` may connect to.
    pub fn connection_range(&self, col: usize) -> (usize, usize) {
        let hi = self.inputs + col * self.rows;
        let lo = if col >= self.levels_back {
            self.inputs + (col - self.levels_back) * self.rows
        } else {
            0
        };
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeGene {
    pub function_id: usize,
    /// Unary functions ignore the second entry.
    pub inputs: [usize; 2],
}

/// Active grid-node ids in ascending (and therefore topological) order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActiveSet {
    pub nodes: Vec<usize>,
}

impl ActiveSet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.nodes.binary_search(&node).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Genotype {
    config: CgpConfig,
    genes: Vec<NodeGene>,
    outputs: Vec<usize>,
}

impl Genotype {
    /// Assembles a genotype, checking length, function ids and every
    /// connection constraint. The active-node window is not enforced here;
    /// see [`Genotype::within_active_window`].
    pub fn from_parts(
        config: CgpConfig,
        genes: Vec<NodeGene>,
        outputs: Vec<usize>,
    ) -> Result<Self, GenomeError> {
        config.validate()?;
        let g = Genotype {
            config,
            genes,
            outputs,
        };
        g.check_structure()?;
        Ok(g)
    }

    fn check_structure(&self) -> Result<(), GenomeError> {
        let cfg = &self.config;
        let err = |m: String| Err(GenomeError::InvalidGene(m));
        if self.genes.len() != cfg.grid_len() {
            return err(format!("expected {} node genes, got {}", cfg.grid_len(), self.genes.len()));
        }
        if self.outputs.len() != cfg.outputs {
            return err(format!("expected {} output genes, got {}", cfg.outputs, self.outputs.len()));
        }
        let n_funcs = cfg.catalog().len();
        for (j, gene) in self.genes.iter().enumerate() {
            let id = cfg.inputs + j;
            if gene.function_id >= n_funcs {
                return err(format!("node {id}: function id {} out of range", gene.function_id));
            }
            let (lo, hi) = cfg.connection_range(cfg.column_of(id));
            for &src in &gene.inputs {
                if src < lo || src >= hi {
                    return err(format!("node {id}: input {src} outside [{lo}, {hi})"));
                }
            }
        }
        for &o in &self.outputs {
            if o >= cfg.node_count() {
                return err(format!("output gene {o} out of range"));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &CgpConfig {
        &self.config
    }

    pub fn genes(&self) -> &[NodeGene] {
        &self.genes
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    /// Gene of a grid node, by node id.
    pub fn gene(&self, node: usize) -> &NodeGene {
        &self.genes[node - self.config.inputs]
    }

    pub fn is_input(&self, node: usize) -> bool {
        node < self.config.inputs
    }

    /// Backward reachability from the output genes.
    pub fn active_nodes(&self) -> ActiveSet {
        let catalog = self.config.catalog();
        let mut seen = vec![false; self.config.node_count()];
        let mut stack: Vec<usize> = self.outputs.clone();
        while let Some(node) = stack.pop() {
            if self.is_input(node) || seen[node] {
                continue;
            }
            seen[node] = true;
            let gene = self.gene(node);
            let arity = catalog.get(gene.function_id).map_or(1, |f| f.arity());
            stack.extend_from_slice(&gene.inputs[..arity]);
        }
        ActiveSet {
            nodes: (self.config.inputs..self.config.node_count())
                .filter(|&n| seen[n])
                .collect(),
        }
    }

    pub fn active_count(&self) -> usize {
        self.active_nodes().len()
    }

    pub fn within_active_window(&self) -> bool {
        let n = self.active_count();
        (self.config.min_active..=self.config.max_active).contains(&n)
    }

    /// Checks structure plus the active-node window.
    pub fn validate(&self) -> Result<(), GenomeError> {
        self.check_structure()?;
        if !self.within_active_window() {
            return Err(GenomeError::InvalidGene(format!(
                "{} active nodes outside [{}, {}]",
                self.active_count(),
                self.config.min_active,
                self.config.max_active
            )));
        }
        Ok(())
    }
}

/// Draws a genotype uniformly over every gene's domain, resampling wholesale
/// until the active-node window holds.
pub fn random_genotype(config: &CgpConfig, rng: &mut Rng) -> Result<Genotype, GenomeError> {
    config.validate()?;
    let n_funcs = config.catalog().len();
    for _ in 0..MAX_ATTEMPTS {
        let genes = (0..config.grid_len())
            .map(|j| {
                let (lo, hi) = config.connection_range(config.column_of(config.inputs + j));
                NodeGene {
                    function_id: rng.gen_range(0..n_funcs),
                    inputs: [rng.gen_range(lo..hi), rng.gen_range(lo..hi)],
                }
            })
            .collect();
        let outputs = (0..config.outputs)
            .map(|_| rng.gen_range(0..config.node_count()))
            .collect();
        let g = Genotype {
            config: config.clone(),
            genes,
            outputs,
        };
        if g.within_active_window() {
            return Ok(g);
        }
    }
    Err(GenomeError::ConfigInfeasible(MAX_ATTEMPTS))
}

/// Which genes a mutation pass may touch.
#[derive(Clone, Copy)]
enum Scope<'a> {
    All,
    InactiveOnly(&'a ActiveSet),
}

/// Resamples each permitted gene field with probability `rate`. Returns the
/// child and the number of fields that were resampled.
fn resample_fields(g: &Genotype, rate: f64, scope: Scope<'_>, rng: &mut Rng) -> (Genotype, usize) {
    let cfg = &g.config;
    let n_funcs = cfg.catalog().len();
    let mut child = g.clone();
    let mut resampled = 0;
    for (j, gene) in child.genes.iter_mut().enumerate() {
        let id = cfg.inputs + j;
        if let Scope::InactiveOnly(active) = scope {
            if active.contains(id) {
                continue;
            }
        }
        if rng.gen_bool(rate) {
            gene.function_id = rng.gen_range(0..n_funcs);
            resampled += 1;
        }
        let (lo, hi) = cfg.connection_range(cfg.column_of(id));
        for slot in gene.inputs.iter_mut() {
            if rng.gen_bool(rate) {
                *slot = rng.gen_range(lo..hi);
                resampled += 1;
            }
        }
    }
    if let Scope::All = scope {
        for o in child.outputs.iter_mut() {
            if rng.gen_bool(rate) {
                *o = rng.gen_range(0..cfg.node_count());
                resampled += 1;
            }
        }
    }
    (child, resampled)
}

/// Point mutation counting the resampled fields. Exposed for statistical tests.
#[doc(hidden)]
pub fn point_mutation_counted(g: &Genotype, rng: &mut Rng) -> Result<(Genotype, usize), GenomeError> {
    for _ in 0..MAX_ATTEMPTS {
        let (child, n) = resample_fields(g, g.config.mutation_rate, Scope::All, rng);
        if child.within_active_window() {
            return Ok((child, n));
        }
    }
    Err(GenomeError::MutationStuck(MAX_ATTEMPTS))
}

/// Standard CGP point mutation. The whole mutation is repeated from `g`
/// until the child's active-node count is inside the window.
pub fn point_mutation(g: &Genotype, rng: &mut Rng) -> Result<Genotype, GenomeError> {
    point_mutation_counted(g, rng).map(|(child, _)| child)
}

/// Point mutation repeated until the decoded active graph differs from `g`'s.
pub fn forced_mutation(g: &Genotype, rng: &mut Rng) -> Result<Genotype, GenomeError> {
    for _ in 0..MAX_ATTEMPTS {
        let child = point_mutation(g, rng)?;
        if !phenotype::same_phenotype(g, &child) {
            return Ok(child);
        }
    }
    Err(GenomeError::MutationStuck(MAX_ATTEMPTS))
}

/// Resamples only genes of inactive nodes; the phenotype is unchanged.
pub fn neutral_mutation(g: &Genotype, rng: &mut Rng) -> Genotype {
    let active = g.active_nodes();
    resample_fields(g, g.config.mutation_rate, Scope::InactiveOnly(&active), rng).0
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "{TEXT_MAGIC}")?;
        let channels: Vec<String> = c.channels.iter().map(|x| x.to_string()).collect();
        writeln!(
            f,
            "rows={} cols={} levels_back={} inputs={} outputs={} mutation_rate={} min_active={} max_active={} function_set={} channels={}",
            c.rows,
            c.cols,
            c.levels_back,
            c.inputs,
            c.outputs,
            c.mutation_rate,
            c.min_active,
            c.max_active,
            c.function_set,
            channels.join(",")
        )?;
        for gene in &self.genes {
            writeln!(f, "{},{},{}", gene.function_id, gene.inputs[0], gene.inputs[1])?;
        }
        for o in &self.outputs {
            writeln!(f, "output {o}")?;
        }
        Ok(())
    }
}

fn parse_header(line: &str) -> Result<CgpConfig, String> {
    let mut cfg = CgpConfig::default();
    let mut seen = BTreeSet::new();
    for field in line.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| format!("bad field `{field}`"))?;
        let num = || value.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        match key {
            "rows" => cfg.rows = num()?,
            "cols" => cfg.cols = num()?,
            "levels_back" => cfg.levels_back = num()?,
            "inputs" => cfg.inputs = num()?,
            "outputs" => cfg.outputs = num()?,
            "min_active" => cfg.min_active = num()?,
            "max_active" => cfg.max_active = num()?,
            "mutation_rate" => cfg.mutation_rate = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "function_set" => cfg.function_set = value.parse().map_err(|e: CatalogError| e.to_string())?,
            "channels" => {
                cfg.channels = value
                    .split(',')
                    .map(|c| c.parse::<usize>().map_err(|e| format!("channels: {e}")))
                    .collect::<Result<_, _>>()?
            }
            other => return Err(format!("unknown header key `{other}`")),
        }
        seen.insert(key.to_string());
    }
    if seen.len() != 10 {
        return Err("header must list all ten configuration fields".into());
    }
    Ok(cfg)
}

impl FromStr for Genotype {
    type Err = GenomeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut lines = s
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let perr = |line: usize, msg: String| GenomeError::Parse { line, msg };
        match lines.next() {
            Some((_, TEXT_MAGIC)) => {}
            Some((n, other)) => return Err(perr(n, format!("expected `{TEXT_MAGIC}`, found `{other}`"))),
            None => return Err(perr(0, "empty input".into())),
        }
        let (hn, header) = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
        let config = parse_header(header).map_err(|m| perr(hn, m))?;
        let mut genes = Vec::with_capacity(config.grid_len());
        let mut outputs = Vec::new();
        for (n, line) in lines {
            if let Some(rest) = line.strip_prefix("output ") {
                outputs.push(rest.trim().parse().map_err(|e| perr(n, format!("output: {e}")))?);
                continue;
            }
            if !outputs.is_empty() {
                return Err(perr(n, "node gene after output genes".into()));
            }
            let fields: Vec<usize> = line
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| perr(n, e.to_string()))?;
            let [function_id, a, b] = fields[..] else {
                return Err(perr(n, format!("expected 3 fields, got {}", fields.len())));
            };
            genes.push(NodeGene {
                function_id,
                inputs: [a, b],
            });
        }
        Genotype::from_parts(config, genes, outputs)
    }
}
