use clap::{Args, Parser, Subcommand};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use steerflow::bench::{bench_sched, BenchConfig, Layout};
use steerflow::scene::Scene;
use steerflow::scheduler::RoleConfig;
use steerflow::steering::{self, BatchSpec, Server, ServerConfig, Session, SessionConfig};
use steerflow::thermal::{coupling_loop, CouplingConfig, RegulatorParams, TwoNodeRegulator};

#[derive(Parser)]
#[command(name = "steerflow", version, about = "Interactive steering of 2D lattice-Boltzmann flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the steering server.
    Serve(ServeArgs),
    /// Run a detached high-resolution batch and write field dumps.
    Batch(BatchArgs),
    /// Compare scheduler load balance of coalesced and uniform tasks.
    BenchSched(BenchArgs),
    /// Run the thermal comfort coupling and log each exchange.
    Comfort(ComfortArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 7400)]
    port: u16,
    #[arg(long, default_value_t = 7401)]
    ws_port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Level-0 grid as NXxNY; overrides the scene's plan.
    #[arg(long, value_parser = parse_res)]
    base_res: Option<[usize; 2]>,
    #[arg(long)]
    max_level: Option<u32>,
    #[arg(long)]
    budget_ms: Option<u64>,
    #[arg(long, default_value_t = 4)]
    slaves: usize,
    /// Defaults to one per four slaves.
    #[arg(long)]
    traders: Option<usize>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    dump_frames: Option<PathBuf>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    dump_every: u64,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    level: u32,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    out: PathBuf,
    /// Dump interval in steps; 0 writes only the first and last state.
    #[arg(long, default_value_t = 1000)]
    dump_every: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 4)]
    slaves: usize,
    #[arg(long)]
    traders: Option<usize>,
    #[arg(long, conflicts_with = "coalesced")]
    blocks: bool,
    #[arg(long)]
    coalesced: bool,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    leaf_cells: usize,
    #[arg(long, default_value_t = 0)]
    level: u32,
    /// Write the threaded solver trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ComfortArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    exchanges: usize,
    #[arg(long, default_value_t = 10)]
    cfd_steps_per_exchange: usize,
    /// Regulator parameters as JSON; missing fields take defaults.
    #[arg(long)]
    regulator: Option<PathBuf>,
    /// Stop early once the per-step change falls below this (°C).
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
    /// Coupling log destination; standard output if absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_res(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or("expected NXxNY")?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([n(a)?, n(b)?])
}

fn roles(slaves: usize, traders: Option<usize>) -> Result<RoleConfig, String> {
    match traders {
        Some(t) => RoleConfig::new(slaves, t),
        None => RoleConfig::with_default_traders(slaves),
    }
    .map_err(|e| e.to_string())
}

fn load_scene(path: &Path) -> Result<Scene, String> {
    Scene::load(path).map_err(|e| e.to_string())
}

fn serve(args: ServeArgs) -> Result<(), String> {
    let mut scene = match &args.scene {
        Some(p) => load_scene(p)?,
        None => Scene::default(),
    };
    if let Some(res) = args.base_res {
        scene.plan.base_resolution = res;
    }
    if let Some(l) = args.max_level {
        scene.plan.max_level = l;
    }
    if let Some(b) = args.budget_ms {
        scene.plan.budget_ms = b;
    }
    let config = SessionConfig {
        roles: roles(args.slaves, args.traders)?,
        frame_dump_dir: args.dump_frames,
        dump_every: args.dump_every,
        ..SessionConfig::default()
    };
    let session = Session::start(scene, config).map_err(|e| e.to_string())?;
    let token = std::env::var(steering::TOKEN_ENV).ok().filter(|t| !t.is_empty());
    if token.is_none() {
        log::warn!("{} is not set; clients are not authenticated", steering::TOKEN_ENV);
    }
    let server = Server::start(
        session,
        ServerConfig {
            port: args.port,
            ws_port: args.ws_port,
            token,
            static_dir: args.static_dir,
            bind: Some(args.bind),
        },
    )
    .map_err(|e| e.to_string())?;
    println!("tcp {} websocket ws://{}/steer", server.tcp_addr, server.ws_addr);
    server.wait();
    Ok(())
}

fn batch(args: BatchArgs) -> Result<(), String> {
    let scene = load_scene(&args.scene)?;
    let spec = BatchSpec {
        level: args.level,
        steps: args.steps,
        dump_every: args.dump_every,
        out_dir: args.out,
    };
    let summary = steering::run_standalone(&scene, &spec).map_err(|e| e.to_string())?;
    println!(
        "level {} ({}x{}), {} steps, {} dump files in {}",
        summary.level,
        summary.nx,
        summary.ny,
        summary.steps,
        summary.dumps.len(),
        spec.out_dir.display()
    );
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), String> {
    let scene = load_scene(&args.scene)?;
    let layout = if args.blocks { Layout::Blocks } else { Layout::Coalesced };
    let mut config = BenchConfig::new(roles(args.slaves, args.traders)?, layout);
    config.steps = args.steps;
    config.max_leaf_cells = args.leaf_cells;
    config.level = args.level;
    let report = bench_sched(&scene, &config).map_err(|e| e.to_string())?;
    if let Some(path) = &args.trace {
        let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        report
            .trace
            .write_jsonl(BufWriter::new(file))
            .map_err(|e| format!("{}: {e}", path.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn comfort(args: ComfortArgs) -> Result<(), String> {
    let scene = load_scene(&args.scene)?;
    let params = match &args.regulator {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str::<RegulatorParams>(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => RegulatorParams::default(),
    };
    let config = CouplingConfig {
        n_cfd_steps: args.cfd_steps_per_exchange.max(1),
        max_exchanges: args.exchanges,
        tolerance_c: args.tolerance,
    };
    let mut out: Box<dyn Write> = match &args.log {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| format!("{}: {e}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut write_err = None;
    let outcome = coupling_loop(&scene, &TwoNodeRegulator { params }, &config, |record, _| {
        if write_err.is_none() {
            write_err = record.write_jsonl(&mut out).err();
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(e) = write_err {
        return Err(e.to_string());
    }
    out.flush().map_err(|e| e.to_string())?;
    drop(out);
    eprintln!(
        "{} exchanges, converged: {}, core {:.4} °C, mean skin {:.4} °C",
        outcome.exchanges,
        outcome.converged,
        outcome.state.core_c,
        outcome.state.skin_c.iter().sum::<f64>() / outcome.state.skin_c.len().max(1) as f64
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Batch(a) => batch(a),
        Command::BenchSched(a) => bench(a),
        Command::Comfort(a) => comfort(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
