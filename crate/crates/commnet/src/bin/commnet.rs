//! Command-line front end: parse processes, export nets, dump transition
//! systems, check weak bisimilarity (optionally up to loss) and replay
//! proof scripts.
//!
//! Exit codes: 0 success/equivalent, 1 inequivalent or failed step,
//! 2 usage/parse error, 3 resource guard tripped.

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use commnet::ast::{ChannelId, Process};
use commnet::bisim::{check_up_to_loss, BisimError, BisimOutcome, LossSpec};
use commnet::dsl;
use commnet::export::{to_dot, to_pnml, RenderOptions};
use commnet::net::{to_net, to_net_named};
use commnet::rewrite::{self, ReplayError};
use commnet::semantics::{build_lts, AbstractionParams, ExploreError, Mode};

#[derive(Parser)]
#[command(name = "commnet", version, about = "communication-net workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check two processes for weak bisimilarity, optionally up to loss.
    Check {
        /// Process file, or builtin:<name>.
        a: String,
        /// Process file, or builtin:<name>.
        b: String,
        /// Comma-separated channels made lossy on both sides.
        #[arg(long, value_delimiter = ',', value_name = "CHANNELS")]
        up_to_loss: Vec<String>,
        #[command(flatten)]
        params: ParamArgs,
        /// Emit a machine-readable report.
        #[arg(long)]
        json: bool,
    },
    /// Replay a proof script against a start process.
    Replay {
        /// Script file, or the builtin "paper-proof".
        script: String,
        /// Start process file, or builtin:<name>.
        #[arg(long)]
        start: String,
        /// Model check every step at the given parameters.
        #[arg(long)]
        validate: bool,
        /// Stop after this many steps.
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Render a process's communication net.
    Export {
        /// Process file, or builtin:<name>.
        file: String,
        #[arg(long, value_enum, default_value_t = Format::Dot)]
        format: Format,
        /// Draw loser/duplicator/duploser transitions explicitly instead
        /// of folding them into place glyphs (DOT only).
        #[arg(long)]
        explicit_unreliability: bool,
    },
    /// Dump the abstracted labelled transition system.
    Lts {
        /// Process file, or builtin:<name>.
        file: String,
        #[command(flatten)]
        params: ParamArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Dot,
    Pnml,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Saturating,
    Hard,
}

#[derive(Args)]
struct ParamArgs {
    /// Number of packets the environment may inject in total.
    #[arg(long, default_value_t = 1)]
    budget: u32,
    /// Per-place token cap; counts above it collapse to ⊤.
    #[arg(long, default_value_t = 1)]
    cap: u32,
    #[arg(long, value_enum, default_value_t = ModeArg::Saturating)]
    mode: ModeArg,
    /// Number of packet colors.
    #[arg(long, default_value_t = 1)]
    colors: u16,
    /// State-count guard (also settable via COMMNET_STATE_LIMIT).
    #[arg(long)]
    state_limit: Option<usize>,
}

impl ParamArgs {
    fn resolve(&self) -> Result<AbstractionParams, CliError> {
        let state_limit = match self.state_limit {
            Some(n) => n,
            None => match std::env::var("COMMNET_STATE_LIMIT") {
                Ok(v) => v.parse().map_err(|_| {
                    CliError::Usage(format!("bad COMMNET_STATE_LIMIT value {v:?}"))
                })?,
                Err(_) => 1_000_000,
            },
        };
        Ok(AbstractionParams {
            env_budget: self.budget,
            cap: self.cap,
            mode: match self.mode {
                ModeArg::Saturating => Mode::Saturating,
                ModeArg::Hard => Mode::Hard,
            },
            colors: self.colors,
            state_limit,
        })
    }

    fn echo(&self, params: &AbstractionParams) -> String {
        format!(
            "budget={} cap={} mode={} colors={} state-limit={}",
            params.env_budget,
            params.cap,
            match params.mode {
                Mode::Saturating => "saturating",
                Mode::Hard => "hard",
            },
            params.colors,
            params.state_limit
        )
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    StateLimit(ExploreError),
    Step { code: u8, message: String },
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::StateLimit(_) => 3,
            CliError::Step { code, .. } => *code,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::StateLimit(e) => e.to_string(),
            CliError::Step { message, .. } => message.clone(),
        }
    }
}

impl From<BisimError> for CliError {
    fn from(e: BisimError) -> Self {
        match e {
            BisimError::Explore(inner) => CliError::StateLimit(inner),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<ExploreError> for CliError {
    fn from(e: ExploreError) -> Self {
        CliError::StateLimit(e)
    }
}

fn load_process(arg: &str) -> Result<Process, CliError> {
    if let Some(name) = arg.strip_prefix("builtin:") {
        return dsl::builtin(name).map_err(|e| CliError::Usage(e.to_string()));
    }
    let text = std::fs::read_to_string(arg)
        .map_err(|e| CliError::Usage(format!("cannot read {arg}: {e}")))?;
    dsl::parse_process(&text).map_err(|e| {
        CliError::Usage(format!(
            "{arg}:{}..{}: parse error: {e}",
            e.span.start, e.span.end
        ))
    })
}

#[derive(Serialize)]
struct ParamsReport {
    budget: u32,
    cap: u32,
    mode: &'static str,
    colors: u16,
    state_limit: usize,
}

#[derive(Serialize)]
struct CexReport {
    depth: usize,
    labels: Vec<String>,
    text: String,
}

#[derive(Serialize)]
struct CheckReport {
    command: &'static str,
    verdict: &'static str,
    params: ParamsReport,
    up_to_loss: Vec<String>,
    states: [usize; 2],
    quotient_states: [usize; 2],
    audited: bool,
    counterexample: Option<CexReport>,
}

fn cmd_check(
    a: &str,
    b: &str,
    up_to_loss: &[String],
    args: &ParamArgs,
    json: bool,
) -> Result<u8, CliError> {
    let pa = load_process(a)?;
    let pb = load_process(b)?;
    let params = args.resolve()?;
    let spec = LossSpec::new(up_to_loss.iter().map(ChannelId::new).collect());
    let outcome = check_up_to_loss(&pa, &pb, &spec, &params)?;
    let audited = audit(&outcome);
    let (nl, nr) = outcome.state_counts();
    let (ql, qr) = outcome.quotient_counts();
    let verdict = if outcome.is_equivalent() {
        "equivalent"
    } else {
        "inequivalent"
    };
    if json {
        let report = CheckReport {
            command: "check",
            verdict,
            params: ParamsReport {
                budget: params.env_budget,
                cap: params.cap,
                mode: match params.mode {
                    Mode::Saturating => "saturating",
                    Mode::Hard => "hard",
                },
                colors: params.colors,
                state_limit: params.state_limit,
            },
            up_to_loss: up_to_loss.to_vec(),
            states: [nl, nr],
            quotient_states: [ql, qr],
            audited,
            counterexample: outcome.counterexample().map(|cex| CexReport {
                depth: cex.depth(),
                labels: cex.labels().iter().map(|l| l.to_string()).collect(),
                text: outcome
                    .counterexample_text_capped(10_000)
                    .unwrap_or_default(),
            }),
        };
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("verdict: {verdict}");
        println!("params: {}", args.echo(&params));
        println!("states: left={nl} right={nr}");
        println!("quotient: left={ql} right={qr}");
        println!("audit: {}", if audited { "ok" } else { "FAILED" });
        if let Some(text) = outcome.counterexample_text_capped(10_000) {
            println!("counterexample (attacker strategy):");
            print!("{text}");
        }
    }
    if !audited {
        return Err(CliError::Step {
            code: 1,
            message: "internal self-audit of the verdict failed".into(),
        });
    }
    Ok(if outcome.is_equivalent() { 0 } else { 1 })
}

fn audit(outcome: &BisimOutcome) -> bool {
    if outcome.is_equivalent() {
        outcome.audit_witness()
    } else {
        outcome.audit_counterexample()
    }
}

fn load_script(arg: &str) -> Result<rewrite::ProofScript, CliError> {
    if let Some(script) = rewrite::builtin_script(arg.trim_end_matches(".cnproof")) {
        return Ok(script);
    }
    let text = std::fs::read_to_string(arg)
        .map_err(|e| CliError::Usage(format!("cannot read {arg}: {e}")))?;
    rewrite::parse_script(&text).map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_replay(
    script: &str,
    start: &str,
    validate: bool,
    steps: Option<usize>,
    args: &ParamArgs,
) -> Result<u8, CliError> {
    let mut script = load_script(script)?;
    if let Some(n) = steps {
        script.steps.truncate(n);
    }
    let start = load_process(start)?;
    let params = args.resolve()?;
    match rewrite::replay(&script, &start, validate, &params) {
        Ok((final_term, reports)) => {
            for report in &reports {
                let status = match report.validated {
                    Some(true) => " checked",
                    Some(false) => " NOT BISIMILAR",
                    None => "",
                };
                println!(
                    "step {}: {} {} {}{status}",
                    report.index, report.rule, report.direction, report.binding
                );
            }
            println!("params: {}", args.echo(&params));
            println!("final: {final_term}");
            Ok(0)
        }
        Err(e) => {
            let code = match &e {
                ReplayError::UnknownRule { .. } => 2,
                ReplayError::Validation { source: BisimError::Explore(_), .. } => 3,
                _ => 1,
            };
            Err(CliError::Step { code, message: e.to_string() })
        }
    }
}

fn cmd_export(file: &str, format: Format, explicit: bool) -> Result<u8, CliError> {
    let p = load_process(file)?;
    let net = to_net_named(&p);
    match format {
        Format::Dot => {
            let opts = RenderOptions {
                sugar_glyphs: !explicit,
                include_marking: false,
            };
            print!("{}", to_dot(&net, &opts));
        }
        Format::Pnml => print!("{}", to_pnml(&net)),
    }
    Ok(0)
}

fn cmd_lts(file: &str, args: &ParamArgs) -> Result<u8, CliError> {
    let p = load_process(file)?;
    let params = args.resolve()?;
    let net = to_net(&p);
    let lts = build_lts(&net, &params)?;
    println!("params: {}", args.echo(&params));
    println!("states: {}", lts.states.len());
    println!("edges: {}", lts.num_edges());
    for (i, config) in lts.states.iter().enumerate() {
        let counts: Vec<String> = config
            .counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != commnet::semantics::Count::Fin(0))
            .map(|(slot, c)| {
                let place = &net.places[slot / params.colors as usize].id;
                if params.colors > 1 {
                    format!("{place}#{}:{c}", slot % params.colors as usize)
                } else {
                    format!("{place}:{c}")
                }
            })
            .collect();
        println!("state {i}: {{{}}}/{}", counts.join(","), config.budget_left);
        for (label, target) in &lts.edges[i] {
            println!("  {} -> {target}", label.display(&net));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Check { a, b, up_to_loss, params, json } => {
            cmd_check(a, b, up_to_loss, params, *json)
        }
        Command::Replay { script, start, validate, steps, params } => {
            cmd_replay(script, start, *validate, *steps, params)
        }
        Command::Export { file, format, explicit_unreliability } => {
            cmd_export(file, *format, *explicit_unreliability)
        }
        Command::Lts { file, params } => cmd_lts(file, params),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
