use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tdg_core::error::TdgError;
use tdg_core::run::{Method, Pipeline, RunConfig, Stage, StageOutcome};
use tdg_server::{port_from_env, AppState, ServerConfig};

#[derive(Parser)]
#[command(name = "tdg", version, about = "Find, score and augment challenging subgroups of a text classifier")]
struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Recompute even if the artifact exists.
    #[arg(long)]
    force: bool,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Interference gate for selection.
    #[arg(long, allow_hyphen_values = true)]
    ic_gate: Option<f64>,
    /// Originals per accepted example when mixing.
    #[arg(long)]
    ratio: Option<f64>,
    /// Comma-separated evaluation methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Run directory, replacing the config's.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load or generate the dataset.
    Ingest(Common),
    /// Train one target model per seed.
    Train(Common),
    /// Cluster dev under each representation.
    Discover(Common),
    /// Estimate GC/IC for the top error clusters.
    Estimate(Common),
    /// Pick a representation and apply the interference gate.
    Select(Common),
    /// Serve live labeling sessions for one seed.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Defaults to $TDG_PORT, then 8080.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Run the augmentation sessions headlessly with the oracle.
    AugmentOracle(Common),
    /// Build every evaluation method's model.
    Assemble(Common),
    /// Score all methods on devtest.
    Evaluate(Common),
    /// Write the human-readable summary.
    Report(Common),
    /// Run a range of stages in order.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ingest")]
        from: Stage,
        #[arg(long, default_value = "report")]
        to: Stage,
    },
    /// Print the default config as TOML.
    DefaultConfig,
}

fn load_config(c: &Common) -> Result<RunConfig, TdgError> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| TdgError::Config(format!("cannot read {}: {e}", c.config.display())))?;
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| TdgError::Config(format!("{}: {e}", c.config.display())))?;
    if let Some(s) = &c.seed_list {
        cfg.seeds = s.clone();
    }
    if let Some(g) = c.ic_gate {
        cfg.estimate.estimator.ic_gate = g;
    }
    if let Some(r) = c.ratio {
        cfg.augment.ratio = r;
    }
    if let Some(m) = &c.methods {
        cfg.evaluate.methods = m.iter().map(|s| s.parse()).collect::<Result<Vec<Method>, _>>()?;
    }
    if let Some(d) = &c.output_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

fn run_stages(c: &Common, from: Stage, to: Stage) -> Result<(), TdgError> {
    let p = Pipeline::new(load_config(c)?)?;
    for (stage, outcome) in p.run_range(from, to, c.force)? {
        let what = match outcome {
            StageOutcome::Ran => "done",
            StageOutcome::UpToDate => "up to date",
        };
        eprintln!("{:<15} {what}  {}", stage.as_str(), p.path(stage.artifact()).display());
    }
    if to == Stage::Report {
        eprintln!("summary: {}", p.path("report/summary.txt").display());
    }
    Ok(())
}

fn serve(c: &Common, seed: u64, host: IpAddr, port: Option<u16>) -> Result<(), TdgError> {
    let p = Pipeline::new(load_config(c)?)?;
    let live = p.live_context(seed)?;
    let server = ServerConfig::from_env().map_err(TdgError::Config)?;
    let port = match port {
        Some(p) => p,
        None => port_from_env().map_err(TdgError::Config)?,
    };
    let state = AppState::open(live, p.live_dir(), server)?;
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("serving seed {seed} on http://{host}:{port}");
    rt.block_on(tdg_server::serve(state, SocketAddr::new(host, port)))?;
    Ok(())
}

fn exit_code(e: &TdgError) -> u8 {
    match e {
        TdgError::Config(_) | TdgError::Parse { .. } => 2,
        TdgError::Dependency(_) | TdgError::Stale(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();

    let single = |c: &Common, s: Stage| run_stages(c, s, s);
    let res = match &cli.command {
        Command::Ingest(c) => single(c, Stage::Ingest),
        Command::Train(c) => single(c, Stage::Train),
        Command::Discover(c) => single(c, Stage::Discover),
        Command::Estimate(c) => single(c, Stage::Estimate),
        Command::Select(c) => single(c, Stage::Select),
        Command::AugmentOracle(c) => single(c, Stage::AugmentOracle),
        Command::Assemble(c) => single(c, Stage::Assemble),
        Command::Evaluate(c) => single(c, Stage::Evaluate),
        Command::Report(c) => single(c, Stage::Report),
        Command::Run { common, from, to } => run_stages(common, *from, *to),
        Command::Serve {
            common,
            seed,
            host,
            port,
        } => serve(common, *seed, *host, *port),
        Command::DefaultConfig => toml::to_string_pretty(&RunConfig::default())
            .map(|s| print!("{s}"))
            .map_err(|e| TdgError::Config(e.to_string())),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
