use std::fs::File;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use flatproxy::config::{load_config_file, MeshConfig};
use flatproxy::live::{self, LiveOptions, LiveProxy};
use flatproxy::sim::{self, Jitter, Mode, Row, SimLayer, Sweep};

#[derive(Parser, Debug)]
#[command(name = "flatproxy", version, about = "Flat service-mesh proxy: config checks, simulation and a live HTTP mode")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a config file.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a simulated sweep and write CSV.
    Sim(SimArgs),
    /// Serve HTTP on a local listener through the chain.
    Live(LiveArgs),
    /// Summarize a CSV written by `sim`.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ask a running live instance to reload its config.
    Reload {
        #[arg(long)]
        admin: SocketAddr,
        /// Defaults to the file the instance was started with.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "envoy,sockmap,toe,flatproxy")]
    modes: Vec<Mode>,
    #[arg(long, default_value = "l4")]
    layer: SimLayer,
    #[arg(long, value_delimiter = ',', default_value = "10000,40000,100000,200000,400000")]
    rate: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "16")]
    connections: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    cores: Vec<usize>,
    /// Simulated seconds per sweep point.
    #[arg(long, default_value_t = 0.05)]
    duration: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1024)]
    request_bytes: u64,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    n_workers: usize,
    /// Proxy hops per request (2 puts a proxy on both sides).
    #[arg(long, default_value_t = 1)]
    hops: usize,
    /// Enable lognormal service-time jitter.
    #[arg(long)]
    jitter: bool,
}

#[derive(Args, Debug)]
struct LiveArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Seconds to run; until interrupted if absent.
    #[arg(long)]
    duration: Option<f64>,
    /// Start N local echo servers and point every cluster at them.
    #[arg(long)]
    spawn_stubs: Option<usize>,
    #[arg(long, default_value_t = 4)]
    n_workers: usize,
    /// Line-oriented control socket (STATS, RELOAD [path]).
    #[arg(long)]
    admin: Option<SocketAddr>,
}

/// Exit 2: bad usage or config. Exit 1: anything else.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Unreadable and invalid files both count as config errors.
fn load(path: &Path) -> Result<MeshConfig, Failure> {
    load_config_file(path).map_err(|e| Failure::Usage(e.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLATPROXY_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Command::Validate { config } => cmd_validate(&config),
        Command::Sim(a) => cmd_sim(a),
        Command::Live(a) => cmd_live(a),
        Command::Report { input, out } => cmd_report(&input, out.as_deref()),
        Command::Reload { admin, config } => cmd_reload(admin, config),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let cfg = load(path)?;
    println!(
        "ok: {} listeners, {} routes, {} clusters, chain [{}]",
        cfg.listeners.len(),
        cfg.routes.len(),
        cfg.clusters.len(),
        cfg.chain.nodes.join(", ")
    );
    Ok(())
}

fn cmd_sim(a: SimArgs) -> Result<(), Failure> {
    if let Some(p) = &a.config {
        load(p)?;
    }
    if !(a.duration.is_finite() && a.duration > 0.0) {
        return Err(Failure::Usage(anyhow::anyhow!("duration must be positive")));
    }
    let mut sweep = Sweep {
        layer: a.layer,
        modes: a.modes,
        rates: a.rate,
        connections: a.connections,
        cores: a.cores,
        duration_ns: (a.duration * 1e9).round() as u64,
        seed: a.seed,
        request_bytes: a.request_bytes,
        ..Sweep::default()
    };
    sweep.topology.n_workers = a.n_workers.max(1);
    sweep.topology.hops = a.hops.max(1);
    if a.jitter {
        sweep.topology.jitter = Some(Jitter::default());
    }
    sweep.validate().map_err(|e| Failure::Usage(anyhow::anyhow!(e)))?;

    let rows = sim::compare_modes(&sweep);
    let csv = sim::csv_string(&rows);
    // Summary goes to stderr when stdout carries the CSV.
    let mut summary: Box<dyn Write> = match &a.out {
        Some(p) => {
            std::fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
            Box::new(io::stdout())
        }
        None => {
            io::stdout().write_all(csv.as_bytes())?;
            Box::new(io::stderr())
        }
    };
    write_summary(&mut summary, &rows)?;
    Ok(())
}

fn write_summary(w: &mut dyn Write, rows: &[Row]) -> io::Result<()> {
    let mut modes: Vec<Mode> = rows.iter().map(|r| r.mode).collect();
    modes.dedup();
    for m in modes {
        let of: Vec<&Row> = rows.iter().filter(|r| r.mode == m).collect();
        let min_mean = of.iter().map(|r| r.mean_ns).fold(f64::INFINITY, f64::min);
        let max_rps = of.iter().map(|r| r.responses_per_s).fold(0.0, f64::max);
        let max_bps = of.iter().map(|r| r.throughput_bps).fold(0.0, f64::max);
        let loss: u64 = of.iter().map(|r| r.loss).sum();
        writeln!(
            w,
            "{m}: {} points, best mean {:.0} ns, peak {:.0} resp/s, peak {:.3} Gbps, loss {loss}",
            of.len(),
            min_mean,
            max_rps,
            max_bps / 1e9
        )?;
    }
    writeln!(w, "headline: {}", sim::headline(rows))
}

fn cmd_report(input: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let f = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let rows = sim::read_csv(f).map_err(|e| Failure::Usage(anyhow::anyhow!("{}: {e}", input.display())))?;
    match out {
        Some(p) => {
            let mut f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_summary(&mut f, &rows)?;
        }
        None => write_summary(&mut io::stdout(), &rows)?,
    }
    Ok(())
}

fn cmd_live(a: LiveArgs) -> Result<(), Failure> {
    let cfg = load(&a.config)?;
    let stubs = match a.spawn_stubs {
        Some(n) if n > 0 => live::spawn_echo_stubs(n).context("spawning stubs")?,
        _ => Vec::new(),
    };
    let opts = LiveOptions {
        listen: a.listen,
        n_workers: a.n_workers.max(1),
        admin: a.admin,
        config_path: Some(a.config.clone()),
        endpoint_override: (!stubs.is_empty()).then(|| live::stub_endpoints(&stubs)),
        ..LiveOptions::default()
    };
    let proxy = LiveProxy::start(cfg, opts).with_context(|| format!("starting on {}", a.listen))?;
    let mut out = io::stdout();
    writeln!(out, "listening {}", proxy.local_addr())?;
    if let Some(ad) = proxy.admin_addr() {
        writeln!(out, "admin {ad}")?;
    }
    for s in &stubs {
        writeln!(out, "stub {} {}", s.name, s.addr)?;
    }
    out.flush()?;

    let (tx, rx) = crossbeam_channel::bounded::<()>(1);
    ctrlc::set_handler(move || {
        let _ = tx.try_send(());
    })
    .context("installing interrupt handler")?;
    let start = Instant::now();
    match a.duration {
        Some(s) => {
            let _ = rx.recv_timeout(Duration::from_secs_f64(s.max(0.0)));
        }
        None => {
            let _ = rx.recv();
        }
    }
    log::info!("stopping after {:?}", start.elapsed());
    let snap = proxy.shutdown();
    writeln!(out, "{}", serde_json::to_string_pretty(&snap).unwrap_or_default())?;
    for s in &stubs {
        writeln!(out, "stub {} hits {}", s.name, s.hits())?;
    }
    Ok(())
}

fn cmd_reload(admin: SocketAddr, config: Option<PathBuf>) -> Result<(), Failure> {
    let cmd = match &config {
        Some(p) => {
            // Fail early on a broken file.
            load(p)?;
            let abs = std::fs::canonicalize(p).unwrap_or_else(|_| p.clone());
            format!("RELOAD {}", abs.display())
        }
        None => "RELOAD".to_owned(),
    };
    let reply = live::send_admin(admin, &cmd).with_context(|| format!("contacting {admin}"))?;
    println!("{reply}");
    if let Some(err) = reply.strip_prefix("ERR ") {
        return Err(Failure::Usage(anyhow::anyhow!("reload rejected: {err}")));
    }
    Ok(())
}
