use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sensert_core::bench::{run_sweep, ExperimentConfig};
use sensert_core::broker::{Broker, BrokerConfig};
use sensert_core::clock::parse_time_ms;
use sensert_core::decoders::DecoderRegistry;
use sensert_core::metadata::MetadataStore;
use sensert_core::rts::{
    threshold::rules_from_json, DataMonitor, EventBus, FeedHandler, MessageFiler, MessageRouter, Route, RtCoffee,
    ThresholdWatch,
};
use sensert_core::simfleet::{
    fleet_from_json, run_fleet, scenario_by_name, standard_fleet, DeconzGateway, FleetConfig, ZigbeeTranslator,
};
use sensert_core::stack::{default_rules, run_demo, StackConfig, StackError};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "sensert", version, about = "Real-time streaming stack for smart-building sensors")]
struct Cli {
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// Stack configuration (JSON) used by `demo` and `bench`.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one MQTT broker, optionally bridged to others.
    Broker(BrokerArgs),
    /// Run a simulated device fleet against running brokers.
    Sim(SimArgs),
    /// Run the real-time server against a broker.
    Rts(RtsArgs),
    /// Query or load the device metadata store.
    Meta(MetaArgs),
    /// Measure latency at the four tap points over a fleet-size sweep.
    Bench(BenchArgs),
    /// Run brokers, RTS and a scripted scenario in one process.
    Demo(DemoArgs),
}

#[derive(Args)]
struct BrokerArgs {
    /// Broker configuration (JSON): listen address and bridge rules.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Listen address when no config file is given.
    #[arg(long, default_value = "127.0.0.1:1883")]
    listen: String,
    #[arg(long, default_value = "10s", value_parser = humantime::parse_duration)]
    stats_interval: Duration,
}

#[derive(Args)]
struct SimArgs {
    /// Comma-separated `name=addr` pairs for local, ttn and zigbee.
    #[arg(long, value_parser = parse_brokers)]
    brokers: Brokers,
    /// Fleet file (JSON list of device profiles); defaults to the standard mixed fleet.
    #[arg(long, value_name = "PATH")]
    fleet: Option<PathBuf>,
    /// Size of the standard fleet when no fleet file is given.
    #[arg(long, default_value_t = 45)]
    count: usize,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = 300.0)]
    duration: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
}

#[derive(Clone, Debug, Default)]
struct Brokers {
    local: Option<String>,
    ttn: Option<String>,
    zigbee: Option<String>,
}

fn parse_brokers(raw: &str) -> Result<Brokers, String> {
    let mut out = Brokers::default();
    for part in raw.split(',').filter(|p| !p.is_empty()) {
        let (name, addr) = part.split_once('=').ok_or_else(|| format!("expected name=addr, got {part}"))?;
        let slot = match name.trim() {
            "local" => &mut out.local,
            "ttn" => &mut out.ttn,
            "zigbee" => &mut out.zigbee,
            other => return Err(format!("unknown broker name {other}")),
        };
        *slot = Some(addr.trim().to_owned());
    }
    if out.local.is_none() {
        return Err("a local broker is required".into());
    }
    Ok(out)
}

#[derive(Args)]
struct RtsArgs {
    #[arg(long)]
    broker: String,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7000")]
    monitor_listen: String,
    /// Threshold rules (JSON list); defaults to co2 above 1000 ppm.
    #[arg(long, value_name = "PATH")]
    rules: Option<PathBuf>,
    /// Republishing routes (JSON list).
    #[arg(long, value_name = "PATH")]
    routes: Option<PathBuf>,
    #[arg(long, default_value = "10s", value_parser = humantime::parse_duration)]
    stats_interval: Duration,
}

#[derive(Args)]
struct MetaArgs {
    /// Directory holding the metadata journals.
    #[arg(long, default_value = "meta")]
    store: PathBuf,
    #[command(subcommand)]
    command: MetaCommand,
}

#[derive(Subcommand)]
enum MetaCommand {
    /// Append containers, reparents and device records from a JSONL file.
    Import { file: PathBuf },
    /// Device record in effect at a time.
    Asof { device_id: String, time: String },
    /// Devices inside a container, transitively.
    Ls {
        container_id: String,
        #[arg(long)]
        at: Option<String>,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,20,45,100")]
    sweep: Vec<usize>,
    #[arg(long, default_value_t = 120.0)]
    duration: f64,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value = "coffee")]
    scenario: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 100.0)]
    speed: f64,
    /// Directory for the bench CSVs of the run.
    #[arg(long, default_value = "demo-out")]
    out: PathBuf,
    /// Store readings under this directory.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    match runtime.block_on(dispatch(cli)) {
        Ok(code) => code,
        Err(e) => {
            if let Some(StackError::PortConflict(addr)) = e.downcast_ref::<StackError>() {
                eprintln!("error: port conflict on {addr}");
                return ExitCode::from(2);
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

async fn dispatch(cli: Cli) -> Result<ExitCode> {
    let stack_config = match &cli.config {
        Some(path) => StackConfig::from_json(&read(path)?)?,
        None => StackConfig::default(),
    };
    match cli.command {
        Command::Broker(a) => broker(a).await,
        Command::Sim(a) => sim(a).await,
        Command::Rts(a) => rts(a).await,
        Command::Meta(a) => meta(a),
        Command::Bench(a) => bench(a, stack_config).await,
        Command::Demo(a) => demo(a, stack_config).await,
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

async fn broker(args: BrokerArgs) -> Result<ExitCode> {
    let config = match &args.config {
        Some(path) => BrokerConfig::from_json(&read(path)?)?,
        None => BrokerConfig::new(&args.listen),
    };
    let broker = Broker::new();
    let handle = match broker.serve(&config).await {
        Ok(h) => h,
        Err(e) => return Err(StackError::from(e).into()),
    };
    println!("broker listening on {}", handle.local_addr());
    let mut ticker = tokio::time::interval(args.stats_interval);
    ticker.tick().await;
    loop {
        tokio::select! {
            _ = tokio::signal::ctrl_c() => break,
            _ = ticker.tick() => {
                let s = handle.stats();
                tracing::info!(msgs_in = s.msgs_in, msgs_out = s.msgs_out, drops = s.drops, sessions = s.live_sessions, "broker stats");
            }
        }
    }
    handle.stop().await;
    Ok(ExitCode::SUCCESS)
}

async fn sim(args: SimArgs) -> Result<ExitCode> {
    let scenario = match &args.scenario {
        Some(name) => Some(scenario_by_name(name).with_context(|| format!("unknown scenario {name}"))?),
        None => None,
    };
    let profiles = match (&args.fleet, &scenario) {
        (Some(path), _) => fleet_from_json(&read(path)?)?,
        (None, Some(s)) => s.profiles(),
        (None, None) => standard_fleet(args.count),
    };
    let local = args.brokers.local.clone().expect("checked by the parser");
    let ttn = args.brokers.ttn.clone().unwrap_or_else(|| local.clone());
    let mut config = FleetConfig::new(local, ttn).seed(args.seed).speed(args.speed);
    let mut zigbee = None;
    if let Some(addr) = &args.brokers.zigbee {
        let gateway = DeconzGateway::bind("127.0.0.1:0").await?;
        let translator = ZigbeeTranslator::new(gateway.url(), addr.clone()).spawn();
        if !translator.wait_connected(Duration::from_secs(10)).await {
            bail!("could not reach the zigbee broker at {addr}");
        }
        config = config.deconz(gateway.sender());
        zigbee = Some((gateway, translator));
    }
    let cancel = config.cancel.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            cancel.cancel();
        }
    });
    let duration = scenario.as_ref().map_or(args.duration, |s| s.duration_s);
    let report = run_fleet(&profiles, scenario.as_ref(), duration, &config).await?;
    if let Some((gateway, translator)) = zigbee {
        translator.stop().await;
        gateway.stop().await;
    }
    println!(
        "emitted {} readings from {} devices; dropped {}, undelivered {}",
        report.log.len(),
        profiles.len(),
        report.total_dropped(),
        report.undelivered
    );
    Ok(ExitCode::SUCCESS)
}

async fn rts(args: RtsArgs) -> Result<ExitCode> {
    let rules = match &args.rules {
        Some(path) => rules_from_json(&read(path)?)?,
        None => default_rules(),
    };
    let routes: Vec<Route> = match &args.routes {
        Some(path) => serde_json::from_str(&read(path)?)?,
        None => Vec::new(),
    };
    let bus = EventBus::new();
    let monitor = DataMonitor::bind(&args.monitor_listen).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            anyhow::Error::from(StackError::PortConflict(args.monitor_listen.clone()))
        } else {
            e.into()
        }
    })?;
    println!("data monitor listening on {}", monitor.local_addr());
    let mut deployments = vec![bus.deploy(monitor)];
    if let Some(root) = &args.data_root {
        deployments.push(bus.deploy(MessageFiler::new(root.clone())));
    }
    deployments.push(bus.deploy(ThresholdWatch::new(rules)));
    deployments.push(bus.deploy(RtCoffee));
    if !routes.is_empty() {
        deployments.push(bus.deploy(MessageRouter::new(routes)));
    }
    let feed = FeedHandler::new(args.broker.clone(), DecoderRegistry::with_builtin());
    let feed_stats = feed.stats();
    deployments.push(bus.deploy(feed));

    let mut ticker = tokio::time::interval(args.stats_interval);
    ticker.tick().await;
    loop {
        tokio::select! {
            _ = tokio::signal::ctrl_c() => break,
            _ = ticker.tick() => {
                let (received, published, dead) = feed_stats.snapshot();
                tracing::info!(received, published, dead_letters = dead, connected = feed_stats.is_connected(), "feed stats");
            }
        }
    }
    while let Some(d) = deployments.pop() {
        d.undeploy_within(Duration::from_secs(5)).await;
    }
    Ok(ExitCode::SUCCESS)
}

fn time_arg(raw: &str) -> Result<u64> {
    parse_time_ms(raw).with_context(|| format!("not a time: {raw}"))
}

fn meta(args: MetaArgs) -> Result<ExitCode> {
    let store = MetadataStore::open(&args.store)?;
    match args.command {
        MetaCommand::Import { file } => {
            let summary = store.import(&file)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        MetaCommand::Asof { device_id, time } => match store.get_asof(&device_id, time_arg(&time)?) {
            Some(rec) => println!("{}", serde_json::to_string_pretty(&rec)?),
            None => {
                eprintln!("no record for {device_id} at {time}");
                return Ok(ExitCode::FAILURE);
            }
        },
        MetaCommand::Ls { container_id, at } => {
            let t = match at {
                Some(raw) => time_arg(&raw)?,
                None => u64::MAX,
            };
            for id in store.devices_in(&container_id, t)? {
                println!("{id}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

async fn bench(args: BenchArgs, stack: StackConfig) -> Result<ExitCode> {
    let mut config = ExperimentConfig::new(0, args.duration);
    config.seed = args.seed;
    config.stack = stack;
    config.out_dir = Some(args.out.clone());
    let results = run_sweep(&args.sweep, &config).await?;
    for r in &results {
        println!("{}", r.report());
    }
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

async fn demo(args: DemoArgs, mut stack: StackConfig) -> Result<ExitCode> {
    let scenario = scenario_by_name(&args.scenario).with_context(|| format!("unknown scenario {}", args.scenario))?;
    if args.data_root.is_some() {
        stack.data_root = args.data_root.clone();
    }
    let outcome = run_demo(&stack, &scenario, args.seed, args.speed).await?;
    outcome.bench.write_outputs(&args.out)?;
    println!("scenario: {}", outcome.scenario);
    println!("detected: {}", outcome.observed.join(", "));
    println!("expected: {}", outcome.expected.join(", "));
    let audit = &outcome.bench.audit;
    println!(
        "audit: subscriptions balanced {}, drained {}, feed balanced {}",
        audit.subscriptions_balanced(),
        audit.drained(),
        audit.feed_balanced()
    );
    if let Some(filer) = stack.data_root.as_ref() {
        println!("readings stored under {}", filer.display());
    }
    println!("bench CSVs in {}", args.out.display());
    if outcome.matched() {
        println!("result: match");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("result: mismatch");
        Ok(ExitCode::FAILURE)
    }
}
