use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rtensor::astgen::dump as dump_ast;
use rtensor::pdg::dot::to_dot;
use rtensor::pipeline::{compile, run, CompileOptions, Compiled, Error};
use rtensor::polysched::dump::{dump_schedule, dump_tree};
use rtensor::runtime::exec::{CpuBackend, ExecOptions};
use rtensor::runtime::oracle::{reference_execute, OracleOptions};
use rtensor::transforms::TransformOptions;

#[derive(Parser)]
#[command(name = "rtensor", version, about = "Compile and run recurrent-tensor programs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile and print the transform log and schedule.
    Compile(Common),
    /// Compile and execute; prints outputs.
    Run(Common),
    /// Execute with the reference interpreter.
    Oracle(Common),
    /// Print one intermediate form.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "schedule")]
        what: DumpKind,
    },
    /// Compile, execute, and print run statistics.
    Stats(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum DumpKind {
    Dot,
    Schedule,
    Tree,
    Ast,
    Trace,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct Common {
    /// Program source (`.rtl`).
    file: PathBuf,
    /// Bound values, e.g. `T=8,B=2`.
    #[arg(long, value_parser = parse_bindings)]
    bind: Option<BTreeMap<String, i64>>,
    #[arg(long)]
    device_bytes: Option<u64>,
    /// Swap tensors of at least this many bytes to the host.
    #[arg(long)]
    swap_threshold: Option<u64>,
    #[arg(long)]
    block_bytes: Option<u64>,
    #[arg(long)]
    no_vectorize: bool,
    #[arg(long)]
    no_incrementalize: bool,
    #[arg(long)]
    no_fuse: bool,
    #[arg(long)]
    no_swap: bool,
    #[arg(long)]
    no_donate: bool,
    /// Most loop iterations peeled by the loop optimizer.
    #[arg(long)]
    peel: Option<usize>,
    /// Skip peeling, promotion and memory-op elision.
    #[arg(long)]
    no_loop_opts: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_bindings(s: &str) -> Result<BTreeMap<String, i64>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got `{p}`"))?;
            let v = v.trim().parse::<i64>().map_err(|e| format!("`{p}`: {e}"))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

impl Common {
    fn source(&self) -> Result<String, Failure> {
        std::fs::read_to_string(&self.file).map_err(|e| Failure::User(format!("{}: {e}", self.file.display())))
    }

    fn bindings(&self) -> BTreeMap<String, i64> {
        self.bind.clone().unwrap_or_default()
    }

    fn compile_options(&self) -> CompileOptions {
        let mut o = CompileOptions {
            transforms: TransformOptions {
                vectorize: !self.no_vectorize,
                incrementalize: !self.no_incrementalize,
                fuse: !self.no_fuse,
                block_bytes: self.block_bytes,
            },
            donate: !self.no_donate,
            bindings: self.bindings(),
            ..Default::default()
        };
        if self.no_swap {
            o.swap_threshold = None;
        } else if self.swap_threshold.is_some() {
            o.swap_threshold = self.swap_threshold;
        }
        if let Some(p) = self.peel {
            o.ast.peel = p;
        }
        if self.no_loop_opts {
            o.ast = rtensor::astgen::opt::OptOptions { peel: 0, promote: false, elide: false };
        }
        o
    }

    fn exec_options(&self, trace: bool) -> ExecOptions {
        ExecOptions { bindings: self.bindings(), seed: self.seed, device_bytes: self.device_bytes, trace, timeline: trace, ..Default::default() }
    }

    fn compile(&self) -> Result<Compiled, Failure> {
        Ok(compile(&self.source()?, &self.compile_options())?)
    }

    fn emit(&self, text: String) -> Result<(), Failure> {
        match &self.out {
            Some(p) => std::fs::write(p, text).map_err(|e| Failure::User(format!("{}: {e}", p.display()))),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn main_inner(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Compile(c) => {
            let p = c.compile()?;
            let text = match c.format {
                Format::Json => json(&serde_json::json!({
                    "log": p.log,
                    "schedule": dump_schedule(&p.pdg, &p.schedule),
                    "ast_report": format!("{:?}", p.ast_report),
                    "donations": p.donations.len(),
                })),
                Format::Text => {
                    let mut s: String = p.log.iter().map(|l| format!("{l}\n")).collect();
                    s.push_str(&dump_schedule(&p.pdg, &p.schedule));
                    s
                }
            };
            c.emit(text)
        }
        Cmd::Run(c) => {
            let p = c.compile()?;
            let ex = run(&p, &CpuBackend, &c.exec_options(false))?;
            let text = match c.format {
                Format::Json => json(&ex.outputs.to_json()),
                Format::Text => ex.outputs.to_text(),
            };
            c.emit(text)
        }
        Cmd::Oracle(c) => {
            let g = rtensor::pdg::build(&rtensor::frontend::dsl::parse_program(&c.source()?).map_err(Error::from)?).map_err(Error::from)?;
            let o = OracleOptions { bindings: c.bindings(), seed: c.seed, ..Default::default() };
            let out = reference_execute(&g, &o).map_err(Error::from)?;
            let text = match c.format {
                Format::Json => json(&out.to_json()),
                Format::Text => out.to_text(),
            };
            c.emit(text)
        }
        Cmd::Dump { common: c, what } => {
            let p = c.compile()?;
            let text = match what {
                DumpKind::Dot => to_dot(&p.pdg),
                DumpKind::Schedule => dump_schedule(&p.pdg, &p.schedule),
                DumpKind::Tree => dump_tree(&p.pdg, &p.tree),
                DumpKind::Ast => {
                    let mut s = String::new();
                    if !p.ast.assume.is_empty() {
                        s.push_str(&format!("# assumes {:?}\n", p.ast.assume));
                    }
                    s.push_str(&dump_ast(&p.pdg, &p.ast.body));
                    if let Some(g) = &p.ast.general {
                        s.push_str("# otherwise\n");
                        s.push_str(&dump_ast(&p.pdg, g));
                    }
                    s
                }
                DumpKind::Trace => {
                    let ex = run(&p, &CpuBackend, &c.exec_options(true))?;
                    ex.trace.iter().map(|l| format!("{l}\n")).collect()
                }
            };
            c.emit(text)
        }
        Cmd::Stats(c) => {
            let p = c.compile()?;
            let ex = run(&p, &CpuBackend, &c.exec_options(false))?;
            let text = match c.format {
                Format::Json => ex.stats.to_json() + "\n",
                Format::Text => ex.stats.to_kv(),
            };
            c.emit(text)
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
