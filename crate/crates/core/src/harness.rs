//! Experiment configuration, step-size tuning, grid execution and report
//! files.
//!
//! A configuration is a flat `key = value` text file; `#` starts a comment.
//! Relative paths in it are resolved against the file's directory.
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `problem` | `quadratic` or `logreg` | required |
//! | `nodes` | number of nodes `n` | required |
//! | `dim`, `kappa` | quadratic dimension and target condition number | required for quadratics |
//! | `seed` | generator and shuffle seed | `0` |
//! | `dataset` | LIBSVM file | required for logreg |
//! | `normalize`, `shuffle` | feature scaling, seeded shuffle before sharding | `false` |
//! | `graph` | `cycle`, `star`, `complete` or `edge_list` | required |
//! | `edges` | `i-j` pairs separated by commas, for `edge_list` | |
//! | `laziness` | Metropolis laziness in `[0, 1)` | `0` |
//! | `methods` | comma list of `GTA1`, `GTA2`, `GTA3`, `custom` | `GTA1,GTA2,GTA3` |
//! | `nc`, `ng` | comma lists forming the `(n_c, n_g)` grid | `1` |
//! | `nc.<method>`, `ng.<method>` | per-method grid override | |
//! | `custom.w1` .. `custom.w4` | `mixing`, `identity`, `spanning_tree` or `average` | required for `custom` |
//! | `tune_min_exp`, `tune_max_exp` | step sizes `2^-t` for `t` in this range | `0`, `20` |
//! | `budget.iterations` | outer iterations per run | `10000` (quadratic), `1000` (logreg) |
//! | `budget.communications`, `budget.gradients` | optional caps on rounds and per-node gradients | |
//! | `tune_budget` | outer iterations per tuning run | a quarter of the run budget |
//! | `output` | output directory | `out` |
//! | `z1` | `bound` or `exact` for `norm(Z_1^{n_c} - I)` | `bound` |

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fmt::g17;
use crate::gta::{self, GtaConfig, GtaError, RunTrace};
use crate::problems::{self, LoadOptions, ObjectiveSuite, ProblemError, QuadraticSpec};
use crate::theory::{self, SpectralParams, TheoryError, Z1Policy};
use crate::topology::{
    build_graph, metropolis_weights, strategy_for, CommMatrix, CommunicationStrategy, Graph, GraphKind, Method, MixingMatrix, TopologyError,
};

/// Absolute slack between measured contraction and theory `rho`.
pub const CONTRACTION_SLACK: f64 = 0.02;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{cell}: every step size diverged ({})", summarize_candidates(.candidates))]
    AllDiverged { cell: String, candidates: Vec<Candidate> },
    #[error("{cell}: {source}")]
    Cell { cell: String, source: GtaError },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Gta(#[from] GtaError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn summarize_candidates(c: &[Candidate]) -> String {
    c.iter()
        .map(|c| format!("2^-{}: {}", c.exponent, c.failure.as_deref().unwrap_or("ok")))
        .collect::<Vec<_>>()
        .join("; ")
}

impl HarnessError {
    /// Process exit code: 2 config, 3 parse, 4 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Topology(_) => 2,
            HarnessError::Parse { .. } | HarnessError::Problem(ProblemError::Parse { .. }) => 3,
            HarnessError::AllDiverged { .. }
            | HarnessError::Cell {
                source: GtaError::Diverged { .. },
                ..
            }
            | HarnessError::Gta(GtaError::Diverged { .. }) => 4,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ProblemConfig {
    Quadratic(QuadraticSpec),
    LogReg { dataset: PathBuf, options: LoadOptions },
}

/// What fills a slot of a custom strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotPreset {
    Mixing,
    Identity,
    SpanningTree,
    Average,
}

impl SlotPreset {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "mixing" => Some(SlotPreset::Mixing),
            "identity" => Some(SlotPreset::Identity),
            "spanning_tree" => Some(SlotPreset::SpanningTree),
            "average" => Some(SlotPreset::Average),
            _ => None,
        }
    }
}

/// One `(method, n_c, n_g)` combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cell {
    pub method: Method,
    pub n_c: u32,
    pub n_g: u32,
}

impl Cell {
    /// Stem of the trace file, e.g. `GTA2_nc5_ng1`.
    pub fn stem(&self) -> String {
        format!("{}_nc{}_ng{}", self.method.name(), self.n_c, self.n_g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Budget {
    pub iterations: usize,
    pub communications: Option<u64>,
    pub gradients: Option<u64>,
}

impl Budget {
    /// Outer iterations for a cell: the run budget, shortened so that
    /// communication rounds and per-node gradient evaluations stay within
    /// their caps. At least one iteration.
    pub fn iterations_for(&self, n_c: u32, n_g: u32) -> usize {
        let mut it = self.iterations as u64;
        if let Some(c) = self.communications {
            it = it.min(c / n_c as u64);
        }
        if let Some(g) = self.gradients {
            it = it.min(g / n_g as u64);
        }
        it.max(1) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub nodes: usize,
    pub seed: u64,
    pub graph: GraphKindConfig,
    pub laziness: f64,
    pub cells: Vec<Cell>,
    pub custom: Option<[SlotPreset; 4]>,
    pub tune_exponents: (u32, u32),
    pub budget: Budget,
    pub tune_budget: Option<usize>,
    pub output: PathBuf,
    pub z1: Z1Policy,
    /// The key/value pairs as read, echoed into the manifest.
    pub echo: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphKindConfig {
    pub kind: String,
    pub edges: Option<Vec<(usize, usize)>>,
}

const KNOWN_KEYS: &[&str] = &[
    "problem",
    "nodes",
    "dim",
    "kappa",
    "seed",
    "dataset",
    "normalize",
    "shuffle",
    "graph",
    "edges",
    "laziness",
    "methods",
    "nc",
    "ng",
    "custom.w1",
    "custom.w2",
    "custom.w3",
    "custom.w4",
    "tune_min_exp",
    "tune_max_exp",
    "budget.iterations",
    "budget.communications",
    "budget.gradients",
    "tune_budget",
    "output",
    "z1",
];

fn known_key(key: &str) -> bool {
    if KNOWN_KEYS.contains(&key) {
        return true;
    }
    match key.split_once('.') {
        Some(("nc" | "ng", m)) => m.parse::<Method>().is_ok(),
        _ => false,
    }
}

/// Raw `key -> (line, value)` entries.
struct RawConfig(BTreeMap<String, (usize, String)>);

impl RawConfig {
    fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| HarnessError::Parse {
                line,
                msg: format!("expected key = value, got '{content}'"),
            })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if !known_key(&key) {
                return Err(HarnessError::Parse {
                    line,
                    msg: format!("unknown key '{key}'"),
                });
            }
            if value.is_empty() {
                return Err(HarnessError::Parse {
                    line,
                    msg: format!("empty value for '{key}'"),
                });
            }
            if map.insert(key.clone(), (line, value)).is_some() {
                return Err(HarnessError::Parse {
                    line,
                    msg: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(RawConfig(map))
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str, HarnessError> {
        self.get(key)
            .ok_or_else(|| HarnessError::Config(format!("missing required key '{key}'")))
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, HarnessError> {
        match self.0.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| HarnessError::Parse {
                line: *line,
                msg: format!("invalid value '{v}' for '{key}'"),
            }),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, HarnessError> {
        match self.0.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|item| {
                    item.trim().parse().map_err(|_| HarnessError::Parse {
                        line: *line,
                        msg: format!("invalid item '{}' in '{key}'", item.trim()),
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    fn flag(&self, key: &str) -> Result<bool, HarnessError> {
        Ok(self.typed::<bool>(key)?.unwrap_or(false))
    }

    fn line(&self, key: &str) -> usize {
        self.0.get(key).map(|(l, _)| *l).unwrap_or(0)
    }
}

fn parse_edges(text: &str, line: usize) -> Result<Vec<(usize, usize)>, HarnessError> {
    text.split(',')
        .map(|pair| {
            let pair = pair.trim();
            let (a, b) = pair.split_once('-').ok_or_else(|| HarnessError::Parse {
                line,
                msg: format!("edge '{pair}' must look like i-j"),
            })?;
            let node = |s: &str| {
                s.trim().parse::<usize>().map_err(|_| HarnessError::Parse {
                    line,
                    msg: format!("bad node '{s}'"),
                })
            };
            Ok((node(a)?, node(b)?))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Parses configuration text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let raw = RawConfig::parse(text)?;
        let cfg_err = |m: String| HarnessError::Config(m);

        let nodes: usize = raw.typed("nodes")?.ok_or_else(|| cfg_err("missing required key 'nodes'".into()))?;
        if nodes == 0 {
            return Err(cfg_err("nodes must be positive".into()));
        }
        let seed: u64 = raw.typed("seed")?.unwrap_or(0);
        let problem_name = raw.require("problem")?;
        let problem = match problem_name {
            "quadratic" => {
                let d = raw.typed("dim")?.ok_or_else(|| cfg_err("quadratic problems need 'dim'".into()))?;
                let kappa_target = raw
                    .typed("kappa")?
                    .ok_or_else(|| cfg_err("quadratic problems need 'kappa'".into()))?;
                ProblemConfig::Quadratic(QuadraticSpec {
                    n: nodes,
                    d,
                    kappa_target,
                    seed,
                })
            }
            "logreg" => {
                let dataset = base.join(raw.require("dataset")?);
                let shuffle_seed = if raw.flag("shuffle")? { Some(seed) } else { None };
                ProblemConfig::LogReg {
                    dataset,
                    options: LoadOptions {
                        normalize: raw.flag("normalize")?,
                        shuffle_seed,
                    },
                }
            }
            other => {
                return Err(HarnessError::Parse {
                    line: raw.line("problem"),
                    msg: format!("unknown problem '{other}'"),
                })
            }
        };

        let kind = raw.require("graph")?.to_string();
        kind.parse::<GraphKind>().map_err(|_| HarnessError::Parse {
            line: raw.line("graph"),
            msg: format!("unknown graph kind '{kind}'"),
        })?;
        let edges = match raw.get("edges") {
            Some(text) => Some(parse_edges(text, raw.line("edges"))?),
            None => None,
        };
        let laziness = raw.typed("laziness")?.unwrap_or(0.0);

        let methods: Vec<Method> = raw.list("methods")?.unwrap_or_else(|| Method::NAMED.to_vec());
        if methods.is_empty() {
            return Err(cfg_err("methods must not be empty".into()));
        }
        let default_nc: Vec<u32> = raw.list("nc")?.unwrap_or_else(|| vec![1]);
        let default_ng: Vec<u32> = raw.list("ng")?.unwrap_or_else(|| vec![1]);
        let mut cells = Vec::new();
        for &method in &methods {
            let ncs: Vec<u32> = raw.list(&format!("nc.{}", method.name()))?.unwrap_or_else(|| default_nc.clone());
            let ngs: Vec<u32> = raw.list(&format!("ng.{}", method.name()))?.unwrap_or_else(|| default_ng.clone());
            if ncs.is_empty() || ngs.is_empty() || ncs.contains(&0) || ngs.contains(&0) {
                return Err(cfg_err(format!("{method}: n_c and n_g lists must be nonempty and positive")));
            }
            for &n_c in &ncs {
                for &n_g in &ngs {
                    let cell = Cell { method, n_c, n_g };
                    if !cells.contains(&cell) {
                        cells.push(cell);
                    }
                }
            }
        }

        let custom = if methods.contains(&Method::Custom) {
            let mut slots = [SlotPreset::Mixing; 4];
            for (i, slot) in slots.iter_mut().enumerate() {
                let key = format!("custom.w{}", i + 1);
                let v = raw.require(&key)?;
                *slot = SlotPreset::parse(v).ok_or_else(|| HarnessError::Parse {
                    line: raw.line(&key),
                    msg: format!("unknown slot preset '{v}'"),
                })?;
            }
            Some(slots)
        } else {
            None
        };

        let lo = raw.typed("tune_min_exp")?.unwrap_or(0u32);
        let hi = raw.typed("tune_max_exp")?.unwrap_or(20u32);
        if lo > hi || hi > 60 {
            return Err(cfg_err(format!(
                "tuning exponents must satisfy 0 <= min <= max <= 60, got {lo}..{hi}"
            )));
        }
        let default_iters = match problem {
            ProblemConfig::Quadratic(_) => 10_000,
            ProblemConfig::LogReg { .. } => 1_000,
        };
        let budget = Budget {
            iterations: raw.typed("budget.iterations")?.unwrap_or(default_iters),
            communications: raw.typed("budget.communications")?,
            gradients: raw.typed("budget.gradients")?,
        };
        if budget.iterations == 0 || budget.communications == Some(0) || budget.gradients == Some(0) {
            return Err(cfg_err("budgets must be positive".into()));
        }
        let tune_budget: Option<usize> = raw.typed("tune_budget")?;
        if tune_budget == Some(0) {
            return Err(cfg_err("tune_budget must be positive".into()));
        }
        let z1 = match raw.get("z1") {
            None => Z1Policy::Bound,
            Some(v) => v.parse().map_err(|_| HarnessError::Parse {
                line: raw.line("z1"),
                msg: format!("z1 must be bound or exact, got '{v}'"),
            })?,
        };
        let output = base.join(raw.get("output").unwrap_or("out"));
        let echo = raw.0.iter().map(|(k, (_, v))| (k.clone(), v.clone())).collect();

        Ok(ExperimentConfig {
            problem,
            nodes,
            seed,
            graph: GraphKindConfig { kind, edges },
            laziness,
            cells,
            custom,
            tune_exponents: (lo, hi),
            budget,
            tune_budget,
            output,
            z1,
            echo,
        })
    }

    /// Outer iterations of each tuning run for a cell.
    pub fn tune_iterations(&self, cell: &Cell) -> usize {
        self.tune_budget
            .unwrap_or_else(|| (self.budget.iterations_for(cell.n_c, cell.n_g) / 4).max(1))
    }

    pub fn build_suite(&self) -> Result<ObjectiveSuite, HarnessError> {
        Ok(match &self.problem {
            ProblemConfig::Quadratic(spec) => problems::generate_quadratic(spec)?,
            ProblemConfig::LogReg { dataset, options } => {
                let ds = problems::load_libsvm(dataset, self.nodes, *options)?;
                problems::logreg_suite(&ds)?
            }
        })
    }

    pub fn build_graph(&self) -> Result<Graph, HarnessError> {
        let kind: GraphKind = self.graph.kind.parse()?;
        Ok(build_graph(kind, self.nodes, self.graph.edges.as_deref())?)
    }

    pub fn build_mixing(&self) -> Result<MixingMatrix, HarnessError> {
        Ok(metropolis_weights(&self.build_graph()?, self.laziness)?)
    }

    /// The communication strategy of a cell over mixing matrix `w`.
    pub fn build_strategy(&self, w: &MixingMatrix, method: Method, n_c: u32) -> Result<CommunicationStrategy, HarnessError> {
        let custom = match (method, self.custom) {
            (Method::Custom, Some(slots)) => {
                let n = w.n();
                let mut mats = Vec::with_capacity(4);
                for preset in slots {
                    mats.push(match preset {
                        SlotPreset::Mixing => w.as_comm().clone(),
                        SlotPreset::Identity => CommMatrix::identity(n),
                        SlotPreset::SpanningTree => metropolis_weights(&w.graph().spanning_tree(), self.laziness)?.as_comm().clone(),
                        SlotPreset::Average => CommMatrix::new(CommMatrix::averaging(n).matrix().clone(), Some(w.graph()))?,
                    });
                }
                Some([mats[0].clone(), mats[1].clone(), mats[2].clone(), mats[3].clone()])
            }
            _ => None,
        };
        Ok(strategy_for(method, w, n_c, custom)?)
    }
}

/// Outcome of one tuning candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub exponent: u32,
    pub alpha: f64,
    pub final_opt_err: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    pub alpha: f64,
    pub candidates: Vec<Candidate>,
}

/// Runs every `alpha = 2^-t` for `t` in `exponents` from `x0 = 0` for
/// `iterations` outer iterations and returns the one with the smallest final
/// optimization error, preferring larger steps on ties. Diverged candidates
/// are excluded.
pub fn tune_step_size(
    suite: &ObjectiveSuite,
    strategy: &CommunicationStrategy,
    n_g: u32,
    iterations: usize,
    exponents: (u32, u32),
) -> Result<TuneResult, HarnessError> {
    let x0 = vec![0.0; suite.n() * suite.d()];
    let candidates: Vec<Candidate> = (exponents.0..=exponents.1)
        .into_par_iter()
        .map(|t| {
            let alpha = (-(t as f64)).exp2();
            let cfg = GtaConfig::new(strategy.clone(), alpha, n_g, iterations);
            match gta::run(suite, &cfg, &x0) {
                Ok(trace) => Candidate {
                    exponent: t,
                    alpha,
                    final_opt_err: Some(trace.final_error().opt_err),
                    failure: None,
                },
                Err(e) => Candidate {
                    exponent: t,
                    alpha,
                    final_opt_err: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    // Candidates are ordered by increasing t, i.e. decreasing alpha, so a
    // strict comparison keeps the larger step on ties.
    let best =
        candidates
            .iter()
            .filter_map(|c| c.final_opt_err.map(|e| (c.alpha, e)))
            .fold(None::<(f64, f64)>, |best, (a, e)| match best {
                Some((_, be)) if e >= be => best,
                _ => Some((a, e)),
            });
    match best {
        Some((alpha, _)) => Ok(TuneResult { alpha, candidates }),
        None => Err(HarnessError::AllDiverged {
            cell: String::new(),
            candidates,
        }),
    }
}

/// Theory quantities for one cell at its tuned step size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryRow {
    pub cell: Cell,
    pub beta: f64,
    /// `beta_i^{n_c}`.
    pub betas_pow: [f64; 4],
    pub alpha: f64,
    pub step_bound: Option<f64>,
    pub admissible: bool,
    /// `rho(B(n_c, n_g))`, or the fully connected rate, at the tuned step.
    pub rho: Option<f64>,
    pub lambda_u: Option<f64>,
    pub measured_contraction: Option<f64>,
    pub note: String,
}

impl TheoryRow {
    /// Measured contraction within [`CONTRACTION_SLACK`] of `rho`; `None`
    /// when not applicable (inadmissible step or missing values).
    pub fn within_theory(&self) -> Option<bool> {
        match (self.admissible, self.rho, self.measured_contraction) {
            (true, Some(rho), Some(m)) => Some(m <= rho + CONTRACTION_SLACK),
            _ => None,
        }
    }
}

/// Evaluates the theory for a strategy at step size `alpha`.
pub fn theory_row(
    cell: Cell,
    strategy: &CommunicationStrategy,
    suite: &ObjectiveSuite,
    alpha: f64,
    z1: Z1Policy,
    measured_contraction: Option<f64>,
) -> TheoryRow {
    let p = SpectralParams::from_strategy(strategy, cell.n_g, alpha, suite.l(), suite.mu(), z1);
    let beta = strategy.matrix(0).beta().max(strategy.matrix(2).beta());
    let mut row = TheoryRow {
        cell,
        beta,
        betas_pow: p.powered(),
        alpha,
        step_bound: None,
        admissible: false,
        rho: None,
        lambda_u: None,
        measured_contraction,
        note: String::new(),
    };
    let fully_connected = matches!(cell.method, Method::Gta2 | Method::Gta3) && strategy.matrix(0).beta() == 0.0;
    if fully_connected {
        let limit = theory::fully_connected_step_limit(&p);
        row.step_bound = Some(limit);
        row.admissible = if cell.n_g == 1 { alpha <= limit } else { alpha < limit };
        row.rho = theory::fully_connected_rates(cell.method, &p).ok().and_then(|r| r.rate().ok());
        row.note = "fully connected".into();
        if !row.admissible {
            row.note.push_str("; empirically stable beyond theory");
        }
        return row;
    }
    let bound = theory::step_bound_multi(&p);
    match bound {
        Ok(b) => {
            row.step_bound = Some(b);
            row.admissible = alpha < b;
        }
        Err(e) => row.note = e.to_string(),
    }
    row.rho = theory::build_e_and_b(&p).ok().and_then(|m| m.b.spectral_radius().ok());
    if cell.n_g == 1 {
        row.lambda_u = theory::rate_bound_lambda_u(&p).ok();
    }
    if row.note.is_empty() {
        row.note = if row.admissible {
            "admissible".into()
        } else {
            "empirically stable beyond theory".into()
        };
    }
    row
}

/// Everything produced for one grid cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub tune: TuneResult,
    pub trace: RunTrace,
    pub theory: TheoryRow,
}

/// Common-step-size ordering check `rho(B_1) >= rho(B_2) >= rho(B_3)` for one
/// `(n_c, n_g)` pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub n_c: u32,
    pub n_g: u32,
    pub alpha: f64,
    pub rhos: [f64; 3],
    pub holds: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub beta: f64,
    pub suite_constants: SuiteConstants,
    pub cells: Vec<CellResult>,
    pub ordering: Vec<OrderingCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteConstants {
    pub n: usize,
    pub d: usize,
    pub l: f64,
    pub mu: f64,
    pub kappa: f64,
}

impl SuiteConstants {
    fn of(s: &ObjectiveSuite) -> Self {
        SuiteConstants {
            n: s.n(),
            d: s.d(),
            l: s.l(),
            mu: s.mu(),
            kappa: s.kappa(),
        }
    }
}

fn annotate(cell: &Cell) -> impl Fn(HarnessError) -> HarnessError + '_ {
    move |e| match e {
        HarnessError::AllDiverged { candidates, .. } => HarnessError::AllDiverged {
            cell: cell.stem(),
            candidates,
        },
        HarnessError::Gta(source) => HarnessError::Cell { cell: cell.stem(), source },
        other => other,
    }
}

/// Tunes and runs one cell.
pub fn run_cell(cfg: &ExperimentConfig, suite: &ObjectiveSuite, w: &MixingMatrix, cell: Cell) -> Result<CellResult, HarnessError> {
    let strategy = cfg.build_strategy(w, cell.method, cell.n_c)?;
    let tune = tune_step_size(suite, &strategy, cell.n_g, cfg.tune_iterations(&cell), cfg.tune_exponents).map_err(annotate(&cell))?;
    let iterations = cfg.budget.iterations_for(cell.n_c, cell.n_g);
    let gcfg = GtaConfig::new(strategy.clone(), tune.alpha, cell.n_g, iterations);
    let trace =
        gta::run(suite, &gcfg, &vec![0.0; suite.n() * suite.d()]).map_err(|source| HarnessError::Cell { cell: cell.stem(), source })?;
    let theory = theory_row(cell, &strategy, suite, tune.alpha, cfg.z1, trace.measured_contraction());
    Ok(CellResult { cell, tune, trace, theory })
}

fn ordering_checks(cells: &[CellResult], beta: f64, suite: &ObjectiveSuite) -> Vec<OrderingCheck> {
    let mut pairs: Vec<(u32, u32)> = cells.iter().map(|c| (c.cell.n_c, c.cell.n_g)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut out = Vec::new();
    if beta == 0.0 || beta >= 1.0 {
        return out;
    }
    for (n_c, n_g) in pairs {
        let tuned: Vec<f64> = cells
            .iter()
            .filter(|c| c.cell.n_c == n_c && c.cell.n_g == n_g && c.cell.method != Method::Custom)
            .map(|c| c.tune.alpha)
            .collect();
        if tuned.len() < 3 {
            continue;
        }
        let cap = 1.0 / (n_g as f64 * suite.l());
        let alpha = tuned.iter().cloned().fold(cap, f64::min);
        let mut rhos = [0.0; 3];
        let mut ok = true;
        for (i, m) in Method::NAMED.into_iter().enumerate() {
            let rho = SpectralParams::for_method(m, beta, n_c, n_g, alpha, suite.l(), suite.mu(), suite.n())
                .and_then(|p| theory::build_e_and_b(&p))
                .and_then(|mm| mm.b.spectral_radius());
            match rho {
                Ok(r) => rhos[i] = r,
                Err(_) => ok = false,
            }
        }
        if ok {
            let holds = rhos[0] >= rhos[1] * (1.0 - 1e-10) && rhos[1] >= rhos[2] * (1.0 - 1e-10);
            out.push(OrderingCheck {
                n_c,
                n_g,
                alpha,
                rhos,
                holds,
            });
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(g17).unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub fn write_summary_csv<W: Write>(cells: &[CellResult], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "method,n_c,n_g,alpha,beta,iterations,final_opt_err,final_x_consensus_err,final_y_consensus_err,measured_contraction,theory_rho,step_bound,admissible"
    )?;
    for c in cells {
        let e = c.trace.final_error();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.cell.method,
            c.cell.n_c,
            c.cell.n_g,
            g17(c.tune.alpha),
            g17(c.theory.beta),
            c.trace.iterations(),
            g17(e.opt_err),
            g17(e.x_consensus),
            g17(e.y_consensus),
            opt(c.trace.measured_contraction()),
            opt(c.theory.rho),
            opt(c.theory.step_bound),
            c.theory.admissible
        )?;
    }
    Ok(())
}

pub fn write_theory_csv<W: Write>(rows: &[TheoryRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "method,n_c,n_g,beta,b1,b2,b3,b4,alpha,step_bound,admissible,rho,lambda_u,measured_contraction,within_theory,note"
    )?;
    for r in rows {
        let [b1, b2, b3, b4] = r.betas_pow;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.cell.method,
            r.cell.n_c,
            r.cell.n_g,
            g17(r.beta),
            g17(b1),
            g17(b2),
            g17(b3),
            g17(b4),
            g17(r.alpha),
            opt(r.step_bound),
            r.admissible,
            opt(r.rho),
            opt(r.lambda_u),
            opt(r.measured_contraction),
            r.within_theory().map(|b| b.to_string()).unwrap_or_default(),
            r.note.replace(',', ";")
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    crate_name: &'static str,
    crate_version: &'static str,
    seed: u64,
    config: &'a BTreeMap<String, String>,
    suite: SuiteConstants,
    beta: f64,
    cells: Vec<ManifestCell>,
}

#[derive(Serialize)]
struct ManifestCell {
    method: Method,
    n_c: u32,
    n_g: u32,
    alpha: f64,
    iterations: usize,
    trace: String,
}

/// Tunes and runs every cell (in parallel), then writes one trace CSV per
/// cell plus `summary.csv`, `theory.csv` and `manifest.json` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutput, HarnessError> {
    let suite = cfg.build_suite()?;
    let w = cfg.build_mixing()?;
    let results: Vec<CellResult> = cfg
        .cells
        .par_iter()
        .map(|&cell| run_cell(cfg, &suite, &w, cell))
        .collect::<Result<_, _>>()?;

    fs::create_dir_all(out).map_err(io_err(out))?;
    for r in &results {
        let path = out.join(format!("{}.csv", r.cell.stem()));
        let mut f = create(&path)?;
        r.trace.write_csv(&mut f).and_then(|_| f.flush()).map_err(io_err(&path))?;
    }
    let path = out.join("summary.csv");
    let mut f = create(&path)?;
    write_summary_csv(&results, &mut f).and_then(|_| f.flush()).map_err(io_err(&path))?;

    let rows: Vec<TheoryRow> = results.iter().map(|r| r.theory.clone()).collect();
    let path = out.join("theory.csv");
    let mut f = create(&path)?;
    write_theory_csv(&rows, &mut f).and_then(|_| f.flush()).map_err(io_err(&path))?;

    let constants = SuiteConstants::of(&suite);
    let manifest = Manifest {
        crate_name: env!("CARGO_PKG_NAME"),
        crate_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: &cfg.echo,
        suite: constants,
        beta: w.beta(),
        cells: results
            .iter()
            .map(|r| ManifestCell {
                method: r.cell.method,
                n_c: r.cell.n_c,
                n_g: r.cell.n_g,
                alpha: r.tune.alpha,
                iterations: r.trace.iterations(),
                trace: format!("{}.csv", r.cell.stem()),
            })
            .collect(),
    };
    let path = out.join("manifest.json");
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f).and_then(|_| f.flush()).map_err(io_err(&path))?;

    let ordering = ordering_checks(&results, w.beta(), &suite);
    Ok(ExperimentOutput {
        dir: out.to_path_buf(),
        beta: w.beta(),
        suite_constants: constants,
        cells: results,
        ordering,
    })
}

/// Tunes every cell over the quarter-budget horizon, runs it, and returns
/// theory rows (written to `out/theory.csv` when `out` is given).
pub fn theory_report(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(Vec<TheoryRow>, Vec<OrderingCheck>), HarnessError> {
    let suite = cfg.build_suite()?;
    let w = cfg.build_mixing()?;
    let results: Vec<CellResult> = cfg
        .cells
        .par_iter()
        .map(|&cell| run_cell(cfg, &suite, &w, cell))
        .collect::<Result<_, _>>()?;
    let rows: Vec<TheoryRow> = results.iter().map(|r| r.theory.clone()).collect();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("theory.csv");
        let mut f = create(&path)?;
        write_theory_csv(&rows, &mut f).and_then(|_| f.flush()).map_err(io_err(&path))?;
    }
    Ok((rows, ordering_checks(&results, w.beta(), &suite)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
        # two nodes, one dimension
        problem = quadratic
        nodes = 2
        dim = 1
        kappa = 1
        seed = 3
        graph = complete
        methods = GTA3
        budget.iterations = 50
    ";

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(
            cfg.cells,
            vec![Cell {
                method: Method::Gta3,
                n_c: 1,
                n_g: 1
            }]
        );
        assert_eq!(cfg.output, PathBuf::from("/base/out"));
        assert_eq!(cfg.tune_exponents, (0, 20));
        assert_eq!(cfg.tune_iterations(&cfg.cells[0]), 12);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let err = ExperimentConfig::parse("problem = quadratic\nnodes = two\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, HarnessError::Parse { line: 2, .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
        let err = ExperimentConfig::parse("problem = quadratic\nbogus = 1\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, HarnessError::Parse { line: 2, .. }));
        let err = ExperimentConfig::parse("nodes = 1\nnodes = 2\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, HarnessError::Parse { line: 2, .. }));
        let err = ExperimentConfig::parse("nodes = 2\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn per_method_grids() {
        let text = format!("{MINIMAL}\nmethods = GTA1, GTA3\n").replace("methods = GTA3\n", "");
        let text = format!("{text}nc = 1,5\nng.GTA3 = 1,2\n");
        let cfg = ExperimentConfig::parse(&text, Path::new(".")).unwrap();
        let stems: Vec<String> = cfg.cells.iter().map(Cell::stem).collect();
        assert_eq!(
            stems,
            [
                "GTA1_nc1_ng1",
                "GTA1_nc5_ng1",
                "GTA3_nc1_ng1",
                "GTA3_nc1_ng2",
                "GTA3_nc5_ng1",
                "GTA3_nc5_ng2"
            ]
        );
    }

    #[test]
    fn budget_caps() {
        let b = Budget {
            iterations: 1000,
            communications: Some(500),
            gradients: Some(3000),
        };
        assert_eq!(b.iterations_for(1, 1), 500);
        assert_eq!(b.iterations_for(5, 1), 100);
        assert_eq!(b.iterations_for(1, 10), 300);
        assert_eq!(b.iterations_for(1000, 1), 1);
    }

    #[test]
    fn scalar_tuning_picks_unit_step() {
        let suite = problems::quadratic_suite(
            vec![nalgebra::DMatrix::from_element(1, 1, 1.0)],
            vec![nalgebra::DVector::from_element(1, -1.0)],
        )
        .unwrap();
        let w = MixingMatrix::new(nalgebra::DMatrix::identity(1, 1), &Graph::complete(1).unwrap()).unwrap();
        let s = strategy_for(Method::Gta3, &w, 1, None).unwrap();
        let t = tune_step_size(&suite, &s, 1, 5, (0, 20)).unwrap();
        assert_eq!(t.alpha, 1.0);
        assert_eq!(t.candidates.len(), 21);
    }

    #[test]
    fn all_divergent_candidates_error() {
        let suite = problems::quadratic_suite(
            vec![nalgebra::DMatrix::from_element(1, 1, 1e6)],
            vec![nalgebra::DVector::from_element(1, -1.0)],
        )
        .unwrap();
        let w = MixingMatrix::new(nalgebra::DMatrix::identity(1, 1), &Graph::complete(1).unwrap()).unwrap();
        let s = strategy_for(Method::Gta1, &w, 1, None).unwrap();
        let err = tune_step_size(&suite, &s, 1, 200, (0, 3)).unwrap_err();
        match err {
            HarnessError::AllDiverged { candidates, .. } => {
                assert_eq!(candidates.len(), 4);
                assert!(candidates.iter().all(|c| c.failure.is_some()));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn custom_presets_build() {
        let text = "problem = quadratic\nnodes = 6\ndim = 2\nkappa = 5\ngraph = cycle\nmethods = custom\n\
                    custom.w1 = mixing\ncustom.w2 = spanning_tree\ncustom.w3 = mixing\ncustom.w4 = identity\n";
        let cfg = ExperimentConfig::parse(text, Path::new(".")).unwrap();
        let w = cfg.build_mixing().unwrap();
        let s = cfg.build_strategy(&w, Method::Custom, 2).unwrap();
        assert!(s.is_identity_slot(3));
        assert!(s.matrix(1).beta() > s.matrix(0).beta());
        let bad = text.replace("custom.w4 = identity", "custom.w4 = average");
        let cfg = ExperimentConfig::parse(&bad, Path::new(".")).unwrap();
        assert!(cfg.build_strategy(&w, Method::Custom, 1).is_err());
    }
}
