use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sdqkd::agent::KeyResponse;
use sdqkd::controlplane::{route, IfaceRef, PathConstraints, PhysicalLinkRequest, VirtualLinkRequest};
use sdqkd::document::to_document;
use sdqkd::harness::{load_scenario, madrid_scenario, Scenario, Simulation};
use sdqkd::lkms::AppEndpoint;
use sdqkd::FiberSpec;

/// Desk-scale emulator of a software-defined QKD network.
#[derive(Debug, Parser)]
#[command(name = "sdqkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file and print or save its metrics.
    Run {
        file: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the built-in Madrid three-node scenario.
    Madrid {
        #[command(flatten)]
        run: RunArgs,
        /// Print the scenario document instead of running it.
        #[arg(long)]
        print_scenario: bool,
    },
    /// Topology inspection.
    Topo {
        #[command(subcommand)]
        command: TopoCommand,
    },
    /// Create links on a freshly built network and print the result.
    Link {
        #[command(subcommand)]
        command: LinkCommand,
    },
    /// Key delivery between two applications.
    Key {
        #[command(subcommand)]
        command: KeyCommand,
    },
    /// Metrics export.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
    /// Serve the northbound API over HTTP for manual poking.
    Serve {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Write metrics here instead of stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Source {
    /// Scenario document; the Madrid scenario when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum TopoCommand {
    /// Controller view once every physical link is up.
    Show {
        #[command(flatten)]
        source: Source,
    },
}

#[derive(Debug, Subcommand)]
enum LinkCommand {
    CreatePhysical {
        #[command(flatten)]
        source: Source,
        /// Transmitter as NODE:IFACE.
        #[arg(long)]
        tx: String,
        /// Receiver as NODE:IFACE.
        #[arg(long)]
        rx: String,
        #[arg(long, default_value_t = 0.0)]
        km: f64,
        /// Loss of one passive element in dB; repeatable.
        #[arg(long = "component-db")]
        component_db: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        classical: u32,
        /// Place the pilot after this classical channel.
        #[arg(long)]
        pilot_after: Option<u32>,
        #[arg(long)]
        id: Option<String>,
    },
    CreateVirtual {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = 0)]
        min_bits: u64,
        #[arg(long)]
        id: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
enum KeyCommand {
    /// Draw keys for APP and fetch the same keys at PEER.
    Get {
        #[command(flatten)]
        source: Source,
        /// Initiator as APP@NODE.
        #[arg(long)]
        app: String,
        /// Responder as APP@NODE.
        #[arg(long)]
        peer: String,
        #[arg(long)]
        bits: u64,
        #[arg(long, default_value_t = 1)]
        count: u64,
        /// Seconds of key generation before the request.
        #[arg(long, default_value_t = 2.0)]
        at: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
enum MetricsCommand {
    /// Run the scenario and print its metrics document.
    Dump {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
    },
}

fn core<T>(r: Result<T, sdqkd::Error>) -> anyhow::Result<T> {
    r.map_err(|e| anyhow!("{}: {e}", e.code()))
}

fn load(path: &Path) -> anyhow::Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    core(load_scenario(&text)).with_context(|| format!("loading {}", path.display()))
}

fn scenario(source: &Source) -> anyhow::Result<Scenario> {
    match &source.scenario {
        Some(p) => load(p),
        None => Ok(madrid_scenario()),
    }
}

fn print(text: &str) {
    // a reader that went away (`| head`) is not worth a panic
    let _ = writeln!(std::io::stdout().lock(), "{}", text.trim_end());
}

fn run(mut s: Scenario, args: &RunArgs) -> anyhow::Result<()> {
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    if let Some(d) = args.duration {
        s.duration_s = d;
    }
    let report = core(sdqkd::harness::run(&s))?;
    let doc = to_document(&report);
    match &args.metrics {
        Some(p) => std::fs::write(p, doc + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => print(&doc),
    }
    Ok(())
}

fn iface(arg: &str) -> anyhow::Result<IfaceRef> {
    match arg.split_once(':') {
        Some((node, iface)) if !node.is_empty() && !iface.is_empty() => Ok(IfaceRef::new(node, iface)),
        _ => bail!("expected NODE:IFACE, got `{arg}`"),
    }
}

fn app(arg: &str) -> anyhow::Result<AppEndpoint> {
    match arg.split_once('@') {
        Some((app, node)) if !app.is_empty() && !node.is_empty() => Ok(AppEndpoint::new(app, node)),
        _ => bail!("expected APP@NODE, got `{arg}`"),
    }
}

/// Network with nodes and physical links up, before any workload.
fn built(s: Scenario) -> anyhow::Result<Simulation> {
    core(Simulation::new(Scenario { workload: vec![], ..s }))
}

fn link(command: LinkCommand) -> anyhow::Result<()> {
    let link = match command {
        LinkCommand::CreatePhysical {
            source,
            tx,
            rx,
            km,
            component_db,
            classical,
            pilot_after,
            id,
        } => {
            let mut sim = built(scenario(&source)?)?;
            core(sim.network_mut().create_physical_link(PhysicalLinkRequest {
                link_id: id,
                a: iface(&tx)?,
                b: iface(&rx)?,
                fiber: FiberSpec::new(km, component_db),
                n_classical: classical,
                pilot_after_channel: pilot_after,
                rate_profile: None,
            }))?
        }
        LinkCommand::CreateVirtual {
            source,
            a,
            b,
            min_bits,
            id,
        } => {
            let mut sim = built(scenario(&source)?)?;
            core(sim.network_mut().create_virtual_link(VirtualLinkRequest {
                link_id: id,
                node_a: a,
                node_b: b,
                constraints: PathConstraints {
                    min_available_bits: min_bits,
                },
            }))?
        }
    };
    print(&to_document(&link));
    Ok(())
}

fn key_get(source: &Source, initiator: &str, responder: &str, bits: u64, count: u64, at: f64, seed: Option<u64>) -> anyhow::Result<()> {
    let (initiator, responder) = (app(initiator)?, app(responder)?);
    let mut s = scenario(source)?;
    s.duration_s = at;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let mut sim = built(s)?;
    core(sim.run())?;
    let net = sim.network_mut();
    core(net.connect_app(&initiator.node_id, &initiator.app_id, Some(&responder.app_id)))?;
    core(net.connect_app(&responder.node_id, &responder.app_id, Some(&initiator.app_id)))?;
    let session = match net.open_session(&initiator, &responder, bits) {
        Ok(s) => s,
        // no shared link: relay through trusted nodes
        Err(e) if e.code() == "no_key_association" => {
            core(net.create_virtual_link(VirtualLinkRequest {
                link_id: None,
                node_a: initiator.node_id.clone(),
                node_b: responder.node_id.clone(),
                constraints: PathConstraints::default(),
            }))?;
            core(net.open_session(&initiator, &responder, bits))?
        }
        Err(e) => return core(Err(e)),
    };
    let drawn = core(net.get_key(&session.session_id, &initiator.app_id, count, bits))?;
    let ids: Vec<_> = drawn.iter().map(|k| k.key_id.clone()).collect();
    let fetched = core(net.fetch_keys(&session.session_id, &responder.app_id, &ids))?;
    let out = json!({
        "serving_link": session.serving_link,
        "initiator": KeyResponse::new(&session.session_id, &drawn),
        "peer": KeyResponse::new(&session.session_id, &fetched),
        "match": drawn == fetched,
    });
    print(&to_document(&out));
    Ok(())
}

fn serve(source: &Source, bind: &str) -> anyhow::Result<()> {
    let s = scenario(source)?;
    let tick_us = ((s.tick_s * 1e6).round() as u64).max(1);
    let mut sim = built(s)?;
    let server = tiny_http::Server::http(bind).map_err(|e| anyhow!("binding {bind}: {e}"))?;
    println!("listening on http://{}", server.server_addr());
    std::io::stdout().flush()?;
    let start = Instant::now();
    let mut sim_us = 0u64;
    for mut request in server.incoming_requests() {
        // simulated time follows the wall clock in whole ticks
        let net = sim.network_mut();
        let wall_us = start.elapsed().as_micros() as u64;
        while sim_us + tick_us <= wall_us {
            sim_us += tick_us;
            net.set_time_us(sim_us);
            core(net.advance(tick_us))?;
        }
        let mut body = String::new();
        let response = match request.as_reader().read_to_string(&mut body) {
            Ok(_) => {
                let url = request.url();
                let path = url.split_once('?').map_or(url, |(p, _)| p).to_string();
                route(net, request.method().as_str(), &path, &body)
            }
            Err(e) => sdqkd::controlplane::ApiResponse {
                status: 400,
                body: to_document(&json!({ "code": "bad_request", "message": e.to_string() })),
            },
        };
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
        let reply = tiny_http::Response::from_string(response.body)
            .with_status_code(response.status)
            .with_header(header);
        if let Err(e) = request.respond(reply) {
            eprintln!("warning: response not sent: {e}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { file, run: args } => load(&file).and_then(|s| run(s, &args)),
        Command::Madrid { run: args, print_scenario } => {
            if print_scenario {
                print(&to_document(&madrid_scenario()));
                Ok(())
            } else {
                run(madrid_scenario(), &args)
            }
        }
        Command::Topo {
            command: TopoCommand::Show { source },
        } => scenario(&source)
            .and_then(built)
            .map(|sim| print(&to_document(&sim.network().state()))),
        Command::Link { command } => link(command),
        Command::Key {
            command:
                KeyCommand::Get {
                    source,
                    app,
                    peer,
                    bits,
                    count,
                    at,
                    seed,
                },
        } => key_get(&source, &app, &peer, bits, count, at, seed),
        Command::Metrics {
            command: MetricsCommand::Dump { source, seed, duration },
        } => scenario(&source).and_then(|s| {
            run(
                s,
                &RunArgs {
                    seed,
                    duration,
                    metrics: None,
                },
            )
        }),
        Command::Serve { source, bind } => serve(&source, &bind),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
