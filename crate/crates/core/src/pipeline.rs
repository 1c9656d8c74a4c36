//! Source to loop program, and loop program to outputs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::astgen::opt::{optimize, OptOptions, OptReport};
use crate::astgen::{generate, Ast};
use crate::frontend::dsl::parse_program;
use crate::frontend::FrontendError;
use crate::pdg::validate::validate;
use crate::pdg::{build, Pdg, PdgError};
use crate::polysched::donation::find_donations;
use crate::polysched::memory::{augment, MemoryOptions, MemoryPlan};
use crate::polysched::{schedule, Schedule, ScheduleError, Tree};
use crate::runtime::exec::{execute, Backend, Donations, ExecOptions, Execution};
use crate::runtime::{RuntimeError, DYNAMIC_BOUND_CAP};
use crate::transforms::{apply, TransformOptions};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Pdg(#[from] PdgError),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

impl Error {
    /// Mistakes in the input, as opposed to failures of the compiler.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Frontend(_) | Error::Pdg(_) | Error::Invalid(_) => true,
            Error::Runtime(e) => !matches!(e, RuntimeError::Cycle { .. } | RuntimeError::Other(_)),
            Error::Schedule(_) => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompileOptions {
    pub transforms: TransformOptions,
    /// Tensors at least this large are swapped to the host between uses;
    /// `None` disables swapping.
    pub swap_threshold: Option<u64>,
    pub ast: OptOptions,
    pub donate: bool,
    /// Bound values used for size estimates.
    pub bindings: BTreeMap<String, i64>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            transforms: TransformOptions::default(),
            swap_threshold: Some(1 << 20),
            ast: OptOptions::default(),
            donate: true,
            bindings: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Compiled {
    pub pdg: Pdg,
    pub schedule: Schedule,
    /// Schedule tree with memory ops placed.
    pub tree: Tree,
    pub plan: MemoryPlan,
    pub ast: Ast,
    pub ast_report: OptReport,
    pub donations: Donations,
    pub log: Vec<String>,
}

pub fn compile_graph(mut g: Pdg, opts: &CompileOptions) -> Result<Compiled, Error> {
    let log = apply(&mut g, &opts.transforms);
    if let Some(d) = validate(&g).into_iter().next() {
        return Err(Error::Invalid(format!("`{}`: {}", g.node(d.node).name, d.msg)));
    }
    let s = schedule(&g)?;
    let bounds = g.bound_env(&opts.bindings, DYNAMIC_BOUND_CAP)?;
    let mopts = MemoryOptions { swap_threshold: opts.swap_threshold, bounds };
    let (tree, plan) = augment(&mut g, s.tree.clone(), &mopts);
    let donations = if opts.donate { find_donations(&g) } else { Donations::new() };
    let raw = generate(&g, &tree);
    let (ast, ast_report) = optimize(&g, &raw, &opts.ast);
    Ok(Compiled { pdg: g, schedule: s, tree, plan, ast, ast_report, donations, log })
}

pub fn compile(src: &str, opts: &CompileOptions) -> Result<Compiled, Error> {
    let p = parse_program(src)?;
    compile_graph(build(&p)?, opts)
}

pub fn run(c: &Compiled, backend: &dyn Backend, opts: &ExecOptions) -> Result<Execution, Error> {
    let mut o = opts.clone();
    o.donations = c.donations.clone();
    Ok(execute(&c.pdg, &c.ast, backend, &o)?)
}
