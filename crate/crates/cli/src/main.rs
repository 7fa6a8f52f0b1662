//! `mvtn`: data generation, training, evaluation and diagnostics for
//! learned multi-view camera placement.
//!
//! Every command accepts `--config run.json`, `--workers N` and any
//! `--dotted.name value` override of the run configuration. Exit codes:
//! 0 success, 1 usage error, 2 runtime failure, 3 gradcheck failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use commands::CliError;
use config::{parse_overrides, resolve, RunConfig};

#[derive(Parser)]
#[command(name = "mvtn", version, about = "Differentiable multi-view rendering with learned camera viewpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by `data.synthetic`.
    GenData(Common),
    /// Train a classifier and write a checkpoint plus metrics.
    Train(Common),
    /// Accuracy of a checkpoint on both splits.
    Eval(Common),
    /// Accuracy under random test-time rotations.
    Robustness(Common),
    /// Shape retrieval with optional LFDA projection.
    Retrieve(Common),
    /// Render preview views of a mesh (`--mesh m.off --config circular --views 12`).
    Render(Common),
    /// Export learned view angles and per-class densities.
    ViewsDist(Common),
    /// Finite-difference checks of the renderer and the full pipeline.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON (for `render`, also a view layout name).
    #[arg(long)]
    config: Option<String>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// `--dotted.name value` overrides of the run configuration.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Robustness(_) => "robustness",
            Command::Retrieve(_) => "retrieve",
            Command::Render(_) => "render",
            Command::ViewsDist(_) => "views-dist",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::Train(c)
            | Command::Eval(c)
            | Command::Robustness(c)
            | Command::Retrieve(c)
            | Command::Render(c)
            | Command::ViewsDist(c)
            | Command::Gradcheck(c) => c,
        }
    }

    /// Short flag names that map to a command-specific path.
    fn aliases(&self) -> Vec<(&'static str, &'static str)> {
        let mut a = vec![("out", "output_dir")];
        a.extend(match self {
            Command::GenData(_) => vec![("seed", "data.synthetic.seed")],
            Command::Robustness(_) => vec![("seed", "robustness.seed"), ("views", "train.views")],
            Command::Render(_) => vec![("seed", "train.seed"), ("views", "preview.views"), ("layout", "preview.config")],
            Command::Gradcheck(_) => vec![("seed", "gradcheck.seed"), ("views", "train.views")],
            _ => vec![("seed", "train.seed"), ("views", "train.views")],
        });
        a
    }
}

const LAYOUTS: [&str; 3] = ["circular", "spherical", "random"];

fn setup(cmd: &Command) -> Result<RunConfig, CliError> {
    let common = cmd.common();
    let mut overrides = parse_overrides(&common.overrides).map_err(|e| CliError::Usage(e.0))?;
    let mut config = common.config.clone();
    let mut workers = common.workers;
    let mut rest = Vec::new();
    for (k, v) in overrides.drain(..) {
        match k.as_str() {
            "config" => config = Some(v),
            "workers" => workers = Some(v.parse().map_err(|_| CliError::Usage(format!("--workers {v:?} is not a count")))?),
            _ => rest.push((k, v)),
        }
    }
    let mut file = config.map(PathBuf::from);
    if let (Command::Render(_), Some(name)) = (cmd, file.as_ref().and_then(|f| f.to_str())) {
        if LAYOUTS.contains(&name) {
            rest.insert(0, ("preview.config".into(), name.into()));
            file = None;
        }
    }
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Usage(format!("--workers: {e}")))?;
    }
    let env_seed = std::env::var("MVTN_SEED").ok();
    resolve(file.as_deref(), &rest, &cmd.aliases(), env_seed.as_deref()).map_err(|e| CliError::Usage(e.0))
}

fn prepare_output(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = &cfg.output_dir;
    let io = |e: std::io::Error| CliError::Runtime { module: "io", variant: format!("{:?}", e.kind()), message: format!("{}: {e}", dir.display()) };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut echo = serde_json::to_string_pretty(cfg).expect("config serializes");
    echo.push('\n');
    std::fs::write(dir.join("config.json"), echo).map_err(io)
}

fn log(cfg: &RunConfig, command: &str, outcome: &str) {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let line = format!("{t} {command} {outcome}\n");
    use std::io::Write;
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(cfg.output_dir.join("run.log")) {
        let _ = f.write_all(line.as_bytes());
    }
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<String, CliError> {
    match cmd {
        Command::GenData(_) => commands::gen_data(cfg),
        Command::Train(_) => commands::train_cmd(cfg),
        Command::Eval(_) => commands::eval(cfg),
        Command::Robustness(_) => commands::robustness(cfg),
        Command::Retrieve(_) => commands::retrieve(cfg),
        Command::Render(_) => commands::render(cfg),
        Command::ViewsDist(_) => commands::views_dist(cfg),
        Command::Gradcheck(_) => commands::gradcheck(cfg),
    }
}

fn fail(e: CliError) -> ! {
    eprintln!("{e}");
    std::process::exit(e.exit_code());
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let cmd = &cli.command;
    let cfg = setup(cmd).unwrap_or_else(|e| fail(e));
    prepare_output(&cfg).unwrap_or_else(|e| fail(e));
    match dispatch(cmd, &cfg) {
        Ok(summary) => {
            log(&cfg, cmd.name(), &summary);
            println!("{summary}");
        }
        Err(e) => {
            log(&cfg, cmd.name(), &e.to_string());
            fail(e);
        }
    }
}
