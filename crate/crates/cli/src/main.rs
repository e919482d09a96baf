use std::io::{BufReader, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use atms_cli::bench::{self, BenchPlan, Transports};
use atms_cli::load_scenario;
use atms_core::latency::{summarize, BenchReport, HttpMode, LatencySample};
use atms_core::mqtt::server::{self, BrokerConfig};
use atms_core::mqtt::{ClientOptions, MqttClient, QoS};
use atms_core::occupancy::{self, LineConfig};
use atms_core::sim::{self, Clock, RunOptions, Simulator};
use atms_core::{now_ms, topic, EarthModel};
use atms_gateway::GatewayConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "atms",
    version,
    about = "Transit telemetry bus, gateway, simulator and benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the MQTT broker.
    Broker {
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = server::DEFAULT_PORT)]
        port: u16,
    },
    /// Run the REST and WebSocket gateway.
    Serve(ServeArgs),
    /// Train simulator.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Transport latency comparison.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Passenger counting.
    #[command(subcommand)]
    Occupancy(OccupancyCommand),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "ATMS_BROKER", default_value = "127.0.0.1:1883")]
    broker: String,
    #[arg(long, env = "ATMS_PORT", default_value_t = atms_gateway::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Fare ledger (JSON lines). In memory when omitted.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// User registry. Defaults to `users.json` beside the ledger.
    #[arg(long)]
    users: Option<PathBuf>,
    /// Scenario whose routes define stations and fares.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    staleness_s: u64,
}

#[derive(Subcommand)]
enum SimCommand {
    /// Publish the scenario's fix streams.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, env = "ATMS_BROKER", default_value = "127.0.0.1:1883")]
        broker: String,
        /// Real-time multiplier.
        #[arg(long, default_value_t = 1)]
        speedup: u32,
        /// Publish as fast as possible with scenario timestamps.
        #[arg(long)]
        no_wait: bool,
        /// Stop after this many fixes per train.
        #[arg(long)]
        fixes: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Mqtt,
    Http,
    Both,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Measure and write a report with raw samples.
    Run {
        #[arg(long, value_enum, default_value = "both")]
        transport: TransportArg,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        qos: u8,
        #[arg(long, default_value = "per-request")]
        http_mode: HttpMode,
        #[arg(long, default_value_t = 50)]
        delay_ms: u64,
        #[arg(long, default_value_t = 0)]
        jitter_ms: u64,
        /// Use a running broker instead of an embedded one.
        #[arg(long)]
        broker: Option<String>,
        /// Use a running gateway (`host:port`) instead of an embedded one.
        #[arg(long)]
        gateway: Option<String>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Recompute a summary from a report or a bare sample array.
    Summarize { input: PathBuf },
}

#[derive(Subcommand)]
enum OccupancyCommand {
    /// Count line crossings in a JSON-lines track file.
    Replay {
        tracks: PathBuf,
        #[arg(long)]
        line_y: f64,
        #[arg(long, default_value_t = LineConfig::DEFAULT_HYSTERESIS_PX)]
        hysteresis_px: f64,
        /// Boarding moves towards the top of the image.
        #[arg(long)]
        upward: bool,
        /// Also publish the readings for this vehicle topic.
        #[arg(long, requires = "broker")]
        vehicle_topic: Option<String>,
        #[arg(long)]
        broker: Option<String>,
    },
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let level = std::env::var("RUST_LOG")
        .ok()
        .and_then(|l| l.parse().ok())
        .unwrap_or(tracing::Level::INFO);
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Broker { host, port } => broker(SocketAddr::new(host, port)).await,
        Command::Serve(args) => serve(args).await,
        Command::Sim(SimCommand::Run {
            scenario,
            broker,
            speedup,
            no_wait,
            fixes,
        }) => {
            let clock = if no_wait {
                Clock::Simulated
            } else {
                Clock::Wall { speedup }
            };
            simulate(scenario, broker, clock, fixes).await
        }
        Command::Bench(BenchCommand::Run {
            transport,
            n,
            warmup,
            qos,
            http_mode,
            delay_ms,
            jitter_ms,
            broker,
            gateway,
            out,
        }) => {
            let plan = BenchPlan {
                transports: match transport {
                    TransportArg::Mqtt => Transports::Mqtt,
                    TransportArg::Http => Transports::Http,
                    TransportArg::Both => Transports::Both,
                },
                n,
                warmup,
                qos: QoS::from_u8(qos).context("qos must be 0 or 1")?,
                http_mode,
                delay: Duration::from_millis(delay_ms),
                jitter: Duration::from_millis(jitter_ms),
                broker,
                gateway,
            };
            let report = bench::run(&plan).await?;
            std::fs::write(&out, report.to_json_pretty())
                .with_context(|| format!("writing {}", out.display()))?;
            print_report(&report);
            println!("report written to {}", out.display());
            Ok(())
        }
        Command::Bench(BenchCommand::Summarize { input }) => {
            let text = std::fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let samples: Vec<LatencySample> = match BenchReport::from_json(&text) {
                Ok(r) => r.samples,
                Err(_) => serde_json::from_str(&text)
                    .context("expected a report or an array of samples")?,
            };
            print_report(&summarize(&samples)?);
            Ok(())
        }
        Command::Occupancy(OccupancyCommand::Replay {
            tracks,
            line_y,
            hysteresis_px,
            upward,
            vehicle_topic,
            broker,
        }) => replay(tracks, line_y, hysteresis_px, upward, vehicle_topic, broker).await,
    }
}

async fn broker(bind: SocketAddr) -> anyhow::Result<()> {
    let handle = server::start(BrokerConfig {
        bind,
        ..Default::default()
    })
    .await
    .with_context(|| format!("binding {bind}"))?;
    println!("broker listening on {}", handle.local_addr());
    tokio::signal::ctrl_c().await?;
    handle.shutdown().await;
    Ok(())
}

async fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let mut config = GatewayConfig::new(SocketAddr::new(args.host, args.port), args.broker);
    config.users = args
        .users
        .or_else(|| args.ledger.as_ref().map(|l| l.with_file_name("users.json")));
    config.ledger = args.ledger;
    config.staleness = Duration::from_secs(args.staleness_s);
    if let Some(path) = &args.scenario {
        config.routes = load_scenario(path)?.routes;
    }
    let handle = atms_gateway::start(config).await?;
    println!("gateway listening on http://{}", handle.local_addr());
    tokio::signal::ctrl_c().await?;
    handle.shutdown().await;
    Ok(())
}

async fn simulate(
    scenario: PathBuf,
    broker: String,
    clock: Clock,
    fixes: Option<u64>,
) -> anyhow::Result<()> {
    let simulator = Simulator::new(load_scenario(&scenario)?, EarthModel::default())?;
    let trains = simulator.scenario().trains.len();
    let (client, _) = MqttClient::connect(ClientOptions::new(
        &broker,
        format!("sim-{}", std::process::id()),
    ))
    .await
    .with_context(|| format!("connecting to {broker}"))?;
    let options = RunOptions {
        clock,
        fixes_per_train: fixes,
    };
    let summary = tokio::select! {
        r = sim::run(simulator, client.clone(), options) => r?,
        _ = tokio::signal::ctrl_c() => {
            client.disconnect().await;
            return Ok(());
        }
    };
    client.disconnect().await;
    println!(
        "{trains} trains, {} fixes published, {} failed",
        summary.published, summary.failed
    );
    if summary.failed > 0 {
        bail!("{} publishes failed", summary.failed);
    }
    Ok(())
}

async fn replay(
    tracks: PathBuf,
    line_y: f64,
    hysteresis_px: f64,
    upward: bool,
    vehicle_topic: Option<String>,
    broker: Option<String>,
) -> anyhow::Result<()> {
    let file =
        std::fs::File::open(&tracks).with_context(|| format!("opening {}", tracks.display()))?;
    let samples = occupancy::read_track_stream(BufReader::new(file))?;
    let config = LineConfig {
        line_y,
        hysteresis_px,
        entering: if upward {
            occupancy::EntryDirection::Upward
        } else {
            occupancy::EntryDirection::Downward
        },
    };
    let readings = occupancy::replay(&samples, config).readings(now_ms());
    let mut out = std::io::stdout().lock();
    for r in &readings {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    if let (Some(t), Some(broker)) = (vehicle_topic, broker) {
        let address = topic::parse(&t).with_context(|| format!("vehicle topic {t}"))?;
        let (client, _) = MqttClient::connect(ClientOptions::new(
            &broker,
            format!("occupancy-{}", std::process::id()),
        ))
        .await
        .with_context(|| format!("connecting to {broker}"))?;
        for r in &readings {
            occupancy::publish_reading(&client, &address, r).await?;
        }
        client.disconnect().await;
    }
    Ok(())
}

fn print_report(r: &BenchReport) {
    let ms = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2} ms"));
    println!("samples  mqtt {}  http {}", r.counts.mqtt, r.counts.http);
    println!(
        "failures mqtt {}  http {}",
        r.failures.mqtt, r.failures.http
    );
    println!("phi_m    {}", ms(r.phi_m_ms));
    println!("phi_h    {}", ms(r.phi_h_ms));
    println!("p50      mqtt {}  http {}", ms(r.p50.mqtt), ms(r.p50.http));
    println!("p95      mqtt {}  http {}", ms(r.p95.mqtt), ms(r.p95.http));
    if let Some(ratio) = r.ratio {
        println!("ratio    {ratio:.3}");
    }
}
