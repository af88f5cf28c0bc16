//! `ldp`: card validation, payload encoding, delegate serving, client
//! calls, routing queries and experiment runs.
//!
//! Exit codes: 0 success, 1 validation or detection failure, 2 usage error,
//! 3 runtime error.

use std::fmt::Display;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use ldp_core::delegates::{profiles_from_env, DelegateServer, ServerOptions};
use ldp_core::identity::validate_card;
use ldp_core::payload::{encode_a2a, encode_mode0, encode_mode1};
use ldp_core::routing::{route, DelegatePool, RoutingPolicy, TaskSpec};
use ldp_core::session::{run_handshake, tcp_dial, HelloOptions, SessionConfig, SessionError};
use ldp_core::simharness::{render_report, run_experiment, Experiment, ReportFormat, DEFAULT_SEED};
use ldp_core::trust::{evaluate_scenario, policy_set, AttackScenario, NonceStore, TrustDomainPolicy, DEFAULT_NONCE_WINDOW_SECS, SCENARIO_EPOCH_MS};
use ldp_core::wire::{ManualClock, NonceSource, Signer};
use ldp_core::{fixtures, DelegateIdentityCard, ModeSet, PayloadMode, SemanticFrame};

#[derive(Debug, Error)]
enum CliError {
    /// Input was read but rejected: invalid card, detected attack, denial.
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(name = "ldp", version, about = "Delegate protocol toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    #[default]
    Human,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EncodeMode {
    Text,
    Frame,
    A2a,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check an identity card file.
    ValidateCard {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: OutputFormat,
    },
    /// Encode a task and print its bytes and token estimate.
    Encode {
        #[arg(long, value_enum)]
        mode: EncodeMode,
        /// Task text (text and a2a modes), or a frame when no spec is given.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        frame_spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: OutputFormat,
    },
    /// Run mock delegates from a pool file behind the TCP transport.
    Serve {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7400")]
        listen: String,
        /// Trust-domain policy enforced on every connection.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Payload modes the delegates accept, e.g. `text,frame`.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<PayloadMode>>,
        /// Seeds delegate keys and session ids.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Open a session, submit one task, print the result and close.
    Call {
        /// host:port of a delegate server.
        endpoint: String,
        #[arg(long)]
        task: PathBuf,
        /// Session proposal; defaults to semantic frames, basic audit.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Caller identity card; defaults to a research-domain orchestrator.
        #[arg(long)]
        caller: Option<PathBuf>,
        /// Delegate to address on a multi-delegate server.
        #[arg(long)]
        delegate: Option<String>,
        #[arg(long, value_enum, default_value_t)]
        format: OutputFormat,
    },
    /// Pick a delegate for a task.
    Route {
        #[arg(long)]
        policy: RoutingPolicy,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, value_enum, default_value_t)]
        format: OutputFormat,
    },
    /// Trust-domain policy tools.
    Policy {
        #[command(subcommand)]
        action: PolicyCommand,
    },
    /// Run a deterministic experiment and emit its report.
    Experiment {
        experiment: Experiment,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum PolicyCommand {
    /// Evaluate one scenario against a policy and print the outcome.
    Check {
        policy: PathBuf,
        scenario: PathBuf,
        /// Verifier clock for replay checks, in Unix milliseconds.
        #[arg(long, default_value_t = SCENARIO_EPOCH_MS)]
        now_ms: u64,
        #[arg(long, value_enum, default_value_t)]
        format: OutputFormat,
    },
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn validate_card_cmd(file: &Path, format: OutputFormat) -> CliResult {
    let card: DelegateIdentityCard = parse(file)?;
    let report = validate_card(&card);
    match format {
        OutputFormat::Json => print_json(&json!({ "valid": report.is_valid(), "violations": report.violations })),
        OutputFormat::Human if report.is_valid() => println!("{}: valid", card.delegate_id),
        OutputFormat::Human => {
            for v in &report.violations {
                println!("{}: {}", v.field, v.reason);
            }
        }
    }
    if report.is_valid() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{} violation(s)", report.len())))
    }
}

fn encode_cmd(mode: EncodeMode, input: Option<&Path>, frame_spec: Option<&Path>, format: OutputFormat) -> CliResult {
    let need_input = || input.ok_or_else(|| CliError::Usage(format!("--in is required for --mode {mode:?}").to_lowercase()));
    let encoded = match mode {
        EncodeMode::Text => encode_mode0(&read(need_input()?)?),
        EncodeMode::A2a => encode_a2a(&read(need_input()?)?),
        EncodeMode::Frame => {
            let path = frame_spec.or(input).ok_or_else(|| CliError::Usage("--mode frame needs --frame-spec or --in".into()))?;
            let frame: SemanticFrame = parse(path)?;
            encode_mode1(&frame).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?
        }
    };
    match format {
        OutputFormat::Json => print_json(&json!({
            "mode": encoded.mode(),
            "encoded": encoded.as_str(),
            "token_estimate": encoded.token_estimate(),
        })),
        OutputFormat::Human => {
            println!("{}", encoded.as_str());
            println!("tokens: {}", encoded.token_estimate());
        }
    }
    Ok(())
}

fn serve_cmd(pool: &Path, listen: &str, policy: Option<&Path>, modes: Option<Vec<PayloadMode>>, seed: Option<u64>) -> CliResult {
    let pool = DelegatePool::from_json(&read(pool)?).map_err(|e| CliError::Invalid(format!("{}: {e}", pool.display())))?;
    let policy = policy.map(|p| read(p).and_then(|t| TrustDomainPolicy::from_json(&t).map_err(|e| CliError::Invalid(e.to_string())))).transpose()?;
    let modes = match modes {
        Some(m) => ModeSet::new(m).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ModeSet::encodable(),
    };
    let opts = ServerOptions {
        policy,
        seed,
        ..ServerOptions::default()
    };
    let server = DelegateServer::new(profiles_from_env(pool.entries(), &modes), opts).map_err(|e| CliError::Invalid(e.to_string()))?;
    let listener = TcpListener::bind(listen).map_err(|e| runtime(format!("bind {listen}: {e}")))?;
    let addr = listener.local_addr().map_err(runtime)?;
    println!("listening on {addr}");
    for id in server.delegate_ids() {
        println!("  delegate {id}");
    }
    std::io::stdout().flush().map_err(runtime)?;
    Arc::new(server).serve(listener).map_err(runtime)
}

fn session_failure(e: SessionError) -> CliError {
    match &e {
        SessionError::Rejected(outcome) => CliError::Invalid(format!("rejected by {}: {}", outcome.mechanism, outcome.detail)),
        SessionError::Denied(reason) => CliError::Invalid(format!("denied: {reason}")),
        SessionError::Invalid { .. } | SessionError::BudgetExceeded { .. } | SessionError::ModeViolation { .. } => CliError::Invalid(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn session_failure_json(e: &SessionError) -> Value {
    match e {
        SessionError::Rejected(outcome) => json!({ "error": "rejected", "detection": outcome }),
        SessionError::Denied(reason) => json!({ "error": "denied", "denial": reason }),
        other => json!({ "error": other.to_string() }),
    }
}

/// The frame sent when the session runs at mode 1.
fn frame_for(task: &TaskSpec) -> SemanticFrame {
    let task_type = serde_json::to_value(task.domain)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| "task".into());
    SemanticFrame {
        task_type,
        instruction: task.prompt.clone(),
        input: String::new(),
        expected_output_format: "text".into(),
        labels: None,
    }
}

fn call_cmd(endpoint: &str, task: &Path, config: Option<&Path>, caller: Option<&Path>, delegate: Option<String>, format: OutputFormat) -> CliResult {
    let task: TaskSpec = parse(task)?;
    let proposal: SessionConfig = match config {
        Some(p) => parse(p)?,
        None => SessionConfig::default(),
    };
    let caller: DelegateIdentityCard = match caller {
        Some(p) => parse(p)?,
        None => fixtures::default_caller_card(),
    };
    let signer = Arc::new(Signer::generate(caller.delegate_id.clone(), NonceSource::os()));
    let hello = HelloOptions {
        target_delegate: delegate,
        task_hint: Some(task.required_skill.clone()),
    };
    let fail = |e: SessionError| {
        if format == OutputFormat::Json {
            print_json(&session_failure_json(&e));
        }
        session_failure(e)
    };
    let transport = tcp_dial(endpoint).map_err(|e| runtime(format!("connect {endpoint}: {e}")))?;
    let mut session = run_handshake(transport, signer, &caller, &ModeSet::encodable(), proposal, hello).map_err(fail)?;
    let payload = if session.config().payload_mode >= PayloadMode::SemanticFrame {
        encode_mode1(&frame_for(&task)).map_err(|e| CliError::Invalid(e.to_string()))?
    } else {
        encode_mode0(&task.prompt)
    };
    let outcome = session.submit_task(&payload, &task.required_skill, Some(task.domain)).map_err(fail)?;
    let session_id = session.session_id().to_owned();
    let accepted = session.config().clone();
    session.close().map_err(fail)?;

    match format {
        OutputFormat::Json => print_json(&json!({
            "session_id": session_id,
            "config": accepted,
            "fallbacks": outcome.fallbacks,
            "result": outcome.result,
        })),
        OutputFormat::Human => {
            let r = &outcome.result;
            println!("session {session_id} at mode {}", accepted.payload_mode);
            for f in &outcome.fallbacks {
                println!("fallback {}: {} -> {} ({} ms)", f.failure, f.from_mode, f.to_mode, f.recovery_ms);
            }
            println!("result (task {}, mode {}, {} tokens, {} ms):", r.task_id, r.mode, r.token_estimate, r.simulated_latency_ms);
            println!("{}", r.output);
            println!("provenance:");
            print_json(&r.provenance);
        }
    }
    Ok(())
}

fn route_cmd(policy: RoutingPolicy, pool: &Path, task: &Path, seed: u64, format: OutputFormat) -> CliResult {
    let pool = DelegatePool::from_json(&read(pool)?).map_err(|e| CliError::Invalid(format!("{}: {e}", pool.display())))?;
    let task: TaskSpec = parse(task)?;
    let decision = route(&pool, &task, policy, seed).map_err(|e| CliError::Invalid(e.to_string()))?;
    match format {
        OutputFormat::Json => print_json(&decision),
        OutputFormat::Human => {
            println!("{} -> {} ({} ms expected)", decision.policy, decision.chosen, decision.expected_latency_ms);
            println!("{}", decision.rationale);
        }
    }
    Ok(())
}

fn policy_check_cmd(policy: &Path, scenario: &Path, now_ms: u64, format: OutputFormat) -> CliResult {
    let policy = TrustDomainPolicy::from_json(&read(policy)?).map_err(|e| CliError::Invalid(format!("{}: {e}", policy.display())))?;
    let scenario: AttackScenario = parse(scenario)?;
    let store = NonceStore::new(DEFAULT_NONCE_WINDOW_SECS, Arc::new(ManualClock::new(now_ms)));
    let outcome = evaluate_scenario(&policy_set([policy]), &store, &scenario);
    match format {
        OutputFormat::Json => print_json(&outcome),
        OutputFormat::Human => println!("{outcome}"),
    }
    if outcome.detected {
        Err(CliError::Invalid(format!("{} detected by {}", scenario.id, outcome.mechanism)))
    } else {
        Ok(())
    }
}

fn experiment_cmd(experiment: Experiment, seed: u64, out: Option<&Path>, format: ReportFormat, config: Option<&Path>) -> CliResult {
    let config = config.map(read).transpose()?;
    let report = run_experiment(experiment, seed, config.as_deref()).map_err(|e| CliError::Invalid(e.to_string()))?;
    let bytes = render_report(&report, format).map_err(runtime)?;
    match out {
        Some(path) => {
            std::fs::write(path, &bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            eprintln!("wrote {} rows to {}", report.rows.len(), path.display());
        }
        None => std::io::stdout().write_all(&bytes).map_err(runtime)?,
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::ValidateCard { file, format } => validate_card_cmd(&file, format),
        Command::Encode { mode, input, frame_spec, format } => encode_cmd(mode, input.as_deref(), frame_spec.as_deref(), format),
        Command::Serve { pool, listen, policy, modes, seed } => serve_cmd(&pool, &listen, policy.as_deref(), modes, seed),
        Command::Call { endpoint, task, config, caller, delegate, format } => {
            call_cmd(&endpoint, &task, config.as_deref(), caller.as_deref(), delegate, format)
        }
        Command::Route { policy, pool, task, seed, format } => route_cmd(policy, &pool, &task, seed, format),
        Command::Policy { action: PolicyCommand::Check { policy, scenario, now_ms, format } } => {
            policy_check_cmd(&policy, &scenario, now_ms, format)
        }
        Command::Experiment { experiment, seed, out, format, config } => {
            experiment_cmd(experiment, seed, out.as_deref(), format, config.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ldp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
