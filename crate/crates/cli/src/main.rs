//! `flowfill`: run the action server, check flows offline, fire one-shot
//! webhook requests, serve stub APIs and replay scenarios.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowfill::flow::{parse_flow, validate_flow, FlowDocument};
use flowfill::harness::{parse_scenario, parse_stub_rules, run_scenario, start_stub};
use flowfill::nodes::NodeRegistry;
use flowfill::protocol::ActionRequest;
use flowfill::server::{self, AppState, LogLevel, ServerConfig, ADMIN_TOKEN_ENV, DEFAULT_BIND};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tracing_subscriber::filter::LevelFilter;

const EXIT_INVALID: u8 = 1;
const EXIT_BIND: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;
const EXIT_CLIENT: u8 = 4;
const EXIT_SERVER: u8 = 5;
const EXIT_SCENARIO: u8 = 6;

#[derive(Parser)]
#[command(
    name = "flowfill",
    version,
    about = "Flow-based fulfillment for chatbot custom actions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deploy a flow and serve the webhook plus the admin API.
    Run(RunArgs),
    /// Validate a flow file without serving it.
    Check {
        #[arg(long)]
        flow: PathBuf,
        /// Print the report as JSON, in the same shape as a rejected deploy.
        #[arg(long)]
        json: bool,
    },
    /// Send one action request and print the response.
    Send {
        /// Webhook URL, e.g. http://127.0.0.1:5055/webhook
        #[arg(long)]
        url: String,
        #[arg(long)]
        action: String,
        /// Slot value as name=value; the literal `null` clears the slot.
        #[arg(long = "slot", value_name = "NAME=VALUE")]
        slots: Vec<String>,
        #[arg(long, default_value = "cli")]
        sender: String,
    },
    /// Serve canned responses from a stub rules file.
    Stub {
        #[arg(long)]
        rules: PathBuf,
        #[arg(long, default_value = "127.0.0.1:5101")]
        bind: String,
    },
    /// Replay a scenario file against a running webhook.
    Scenario {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        url: String,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flow to deploy at startup. Without it the server starts empty.
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_BIND)]
    bind: String,
    /// Fail a branch on a missing placeholder instead of rendering "".
    #[arg(long)]
    strict_templates: bool,
    #[arg(long, default_value = "info", value_parser = clap::value_parser!(LogLevel))]
    log_level: LogLevel,
    /// How long executions on a replaced flow may keep running.
    #[arg(long, default_value_t = 30_000)]
    drain_timeout_ms: u64,
    /// Overrides a flow variable, e.g. --var weather_key=abc123
    #[arg(long = "var", value_name = "NAME=VALUE")]
    vars: Vec<String>,
    #[arg(long, env = ADMIN_TOKEN_ENV, hide_env_values = true)]
    admin_token: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime starts");
    let code = match cli.command {
        Command::Run(args) => rt.block_on(run(args)),
        Command::Check { flow, json } => check(&flow, json),
        Command::Send {
            url,
            action,
            slots,
            sender,
        } => rt.block_on(send(&url, &action, &slots, &sender)),
        Command::Stub { rules, bind } => rt.block_on(stub(&rules, &bind)),
        Command::Scenario { file, url, json } => rt.block_on(scenario(&file, &url, json)),
    };
    ExitCode::from(code)
}

fn split_pair(raw: &str) -> Result<(&str, &str), String> {
    match raw.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k, v)),
        _ => Err(format!("expected NAME=VALUE, got '{raw}'")),
    }
}

fn read_flow(path: &Path) -> Result<FlowDocument, String> {
    let body = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_flow(&body).map_err(|e| format!("{}: {e}", path.display()))
}

fn print_json(v: &Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("json values serialize")
    );
}

async fn run(args: RunArgs) -> u8 {
    let filter = match args.log_level {
        LogLevel::Error => LevelFilter::ERROR,
        LogLevel::Warn => LevelFilter::WARN,
        LogLevel::Info => LevelFilter::INFO,
        LogLevel::Debug => LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(filter)
        .with_writer(std::io::stderr)
        .init();

    let config = ServerConfig {
        bind_address: args.bind,
        flow_path: args.flow,
        strict_templates: args.strict_templates,
        drain_timeout_ms: args.drain_timeout_ms,
        log_level: args.log_level,
        admin_token: args.admin_token,
    };
    let state = AppState::from_config(&config);

    if let Some(path) = &config.flow_path {
        let mut doc = match read_flow(path) {
            Ok(doc) => doc,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_INVALID;
            }
        };
        for raw in &args.vars {
            match split_pair(raw) {
                Ok((k, v)) => doc.set_var(k, json!(v)),
                Err(e) => {
                    eprintln!("error: --var {e}");
                    return EXIT_INVALID;
                }
            }
        }
        if let Err(e) = state.engine.deploy(&doc) {
            eprint!("{}", e.report);
            return EXIT_INVALID;
        }
    } else if !args.vars.is_empty() {
        eprintln!("error: --var needs --flow");
        return EXIT_INVALID;
    }

    let addr = match config.socket_addr() {
        Ok(addr) => addr,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_BIND;
        }
    };
    let listener = match TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {addr}: {e}");
            return EXIT_BIND;
        }
    };
    println!(
        "flowfill listening on http://{addr} (flow version {})",
        state.engine.version()
    );
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match server::serve_with_shutdown(listener, state, shutdown).await {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: server stopped: {e}");
            EXIT_BIND
        }
    }
}

fn check(path: &Path, as_json: bool) -> u8 {
    let doc = match read_flow(path) {
        Ok(doc) => doc,
        Err(e) => {
            if as_json {
                print_json(&json!({ "error": e }));
            } else {
                eprintln!("error: {e}");
            }
            return EXIT_INVALID;
        }
    };
    let report = validate_flow(&doc, &NodeRegistry::standard());
    if as_json {
        print_json(&serde_json::to_value(&report).expect("reports serialize"));
    } else {
        print!("{report}");
    }
    if report.is_deployable() {
        0
    } else {
        EXIT_INVALID
    }
}

async fn send(url: &str, action: &str, slots: &[String], sender: &str) -> u8 {
    let mut map = BTreeMap::new();
    for raw in slots {
        match split_pair(raw) {
            Ok((k, "null")) => map.insert(k.to_string(), Value::Null),
            Ok((k, v)) => map.insert(k.to_string(), json!(v)),
            Err(e) => {
                eprintln!("error: --slot {e}");
                return EXIT_CLIENT;
            }
        };
    }
    let request = ActionRequest::new(action, sender, map);
    let resp = reqwest::Client::new()
        .post(url)
        .header("content-type", "application/json")
        .body(request.to_bytes())
        .send()
        .await;
    let resp = match resp {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: request to {url} failed: {e}");
            return EXIT_TRANSPORT;
        }
    };
    let status = resp.status();
    let body = match resp.bytes().await {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: reading response from {url} failed: {e}");
            return EXIT_TRANSPORT;
        }
    };
    match serde_json::from_slice::<Value>(&body) {
        Ok(v) => print_json(&v),
        Err(_) => println!("{}", String::from_utf8_lossy(&body)),
    }
    if status.is_server_error() {
        eprintln!("HTTP {status}");
        EXIT_SERVER
    } else if status.is_client_error() {
        eprintln!("HTTP {status}");
        EXIT_CLIENT
    } else {
        0
    }
}

async fn stub(path: &Path, bind: &str) -> u8 {
    let rules = match std::fs::read(path)
        .map_err(|e| e.to_string())
        .and_then(|body| parse_stub_rules(&body).map_err(|e| e.to_string()))
    {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_INVALID;
        }
    };
    let addr = match bind.parse() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: invalid bind address '{bind}': {e}");
            return EXIT_BIND;
        }
    };
    let handle = match start_stub(rules.rules, addr).await {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: cannot bind {addr}: {e}");
            return EXIT_BIND;
        }
    };
    println!("stub '{}' listening on {}", rules.name, handle.base_url());
    let _ = tokio::signal::ctrl_c().await;
    handle.stop().await;
    0
}

async fn scenario(path: &Path, url: &str, as_json: bool) -> u8 {
    let scenario = match std::fs::read(path)
        .map_err(|e| e.to_string())
        .and_then(|body| parse_scenario(&body).map_err(|e| e.to_string()))
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return EXIT_INVALID;
        }
    };
    let report = run_scenario(&scenario, url).await;
    if as_json {
        print_json(&report.to_json());
    } else {
        print!("{}", report.summary());
    }
    if report.passed {
        0
    } else {
        EXIT_SCENARIO
    }
}
