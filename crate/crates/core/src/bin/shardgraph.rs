use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value as Json};

use shardgraph::compare::{compare, CompareOptions, Comparison};
use shardgraph::gen::{generate, GenConfig, Model, Optimizer};
use shardgraph::ir::{parse_module, print_module, Module, Topology};
use shardgraph::profitability::{decide, CostModel, ProfitOptions};
use shardgraph::simulator::cost::cost;
use shardgraph::simulator::{inputs, peak_memory, run, RunOptions};
use shardgraph::transform::{apply, apply_partial_sharding, batch_collectives, demote_allgather_precision};
use shardgraph::{redundancy, Error, Result};

#[derive(Parser)]
#[command(name = "shardgraph", version, about = "Shard the weight update of data-parallel training graphs across replicas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replica redundancy of every instruction, or sharding decisions with --profit.
    Analyze {
        input: PathBuf,
        #[arg(long)]
        profit: bool,
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Rewrite a module into sharding, main and unsharding programs.
    Transform {
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Shard every supported cluster regardless of cost.
        #[arg(long)]
        force: bool,
        /// Shard within these groups: `all` or `rows`.
        #[arg(long)]
        groups: Option<String>,
        /// Merge independent collectives.
        #[arg(long)]
        batch: bool,
        /// Gather weights in reduced precision where consumers convert anyway.
        #[arg(long)]
        demote: bool,
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Run a module on every replica.
    Simulate {
        input: PathBuf,
        /// Entry arguments per replica; random when omitted.
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long, env = "SHARDGRAPH_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        target: Target,
    },
    /// Modeled communication, compute and memory.
    Cost {
        input: PathBuf,
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Baseline against transformed: numerics, step time and memory.
    Compare {
        input: PathBuf,
        /// Program runs to simulate on both sides.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Cost and memory only.
        #[arg(long)]
        no_simulate: bool,
        /// Largest accepted relative difference for float outputs; integer
        /// outputs must match exactly.
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        no_batch: bool,
        #[arg(long)]
        no_demote: bool,
        #[arg(long, env = "SHARDGRAPH_SEED", default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        target: Target,
        #[command(flatten)]
        cost: CostArgs,
    },
    /// Emit a synthetic training module.
    Gen {
        model: String,
        #[arg(long, default_value_t = 4)]
        replicas: usize,
        /// `ring` or `RxC`.
        #[arg(long, default_value = "ring")]
        topology: String,
        #[arg(long)]
        optimizer: Option<String>,
        /// Loop trip count.
        #[arg(long, default_value_t = 10)]
        steps: u64,
        /// Emit a single training step without a loop.
        #[arg(long)]
        no_loop: bool,
        /// Examples per replica.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        layers: Option<usize>,
        /// Run forward and backward matmuls in bf16.
        #[arg(long)]
        bf16: bool,
        #[arg(long)]
        outfeed_every: Option<u64>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

/// Overrides of the module's replica set.
#[derive(Args)]
struct Target {
    #[arg(long)]
    replicas: Option<usize>,
    /// `ring` or `RxC`.
    #[arg(long)]
    topology: Option<String>,
}

#[derive(Args)]
struct CostArgs {
    /// JSON with mem_bandwidth, link_bandwidth and per_message_latency.
    #[arg(long = "cost-model", alias = "model")]
    cost_model: Option<PathBuf>,
    #[arg(long)]
    mem_bandwidth: Option<f64>,
    #[arg(long)]
    link_bandwidth: Option<f64>,
    #[arg(long)]
    latency: Option<f64>,
}

impl CostArgs {
    fn model(&self) -> Result<CostModel> {
        let mut cm = match &self.cost_model {
            Some(p) => serde_json::from_str(&read(p)?)?,
            None => CostModel::default(),
        };
        cm.mem_bandwidth = self.mem_bandwidth.unwrap_or(cm.mem_bandwidth);
        cm.link_bandwidth = self.link_bandwidth.unwrap_or(cm.link_bandwidth);
        cm.per_message_latency = self.latency.unwrap_or(cm.per_message_latency);
        cm.validate().map_err(Error::Invalid)?;
        Ok(cm)
    }
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))
}

fn load(p: &Path, t: &Target) -> Result<Module> {
    let m = parse_module(&read(p)?)?;
    let topo = match (&t.topology, t.replicas) {
        (None, None) => return Ok(m),
        (Some(s), n) => Topology::parse(s, n).map_err(Error::Invalid)?,
        (None, Some(n)) => match m.topology {
            Topology::Ring(_) => Topology::Ring(n),
            Topology::Mesh { .. } => Topology::parse("ring", Some(n)).map_err(Error::Invalid)?,
        },
    };
    m.retargeted(topo)
}

/// Writes to stdout; a closed pipe is not an error.
fn say(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => say(&format!("{text}\n")),
    }
}

fn pretty(j: &Json) -> String {
    serde_json::to_string_pretty(j).expect("JSON values serialize")
}

fn table(rows: &[(String, String, String)]) -> String {
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let w2 = rows.iter().map(|r| r.2.len()).max().unwrap_or(0);
    rows.iter().map(|(a, b, c)| format!("{a:<w0$}  {b:>w1$}  {c:>w2$}\n")).collect()
}

fn ms(s: f64) -> String {
    format!("{:.4} ms", s * 1e3)
}

fn mib(b: usize) -> String {
    format!("{:.3} MiB", b as f64 / (1 << 20) as f64)
}

fn report(c: &Comparison) -> String {
    let (b, t) = (&c.baseline, &c.transformed);
    let row = |k: &str, x: String, y: String| (k.to_string(), x, y);
    let mut rows = vec![
        row("", "baseline".into(), "transformed".into()),
        row("step time", ms(b.step_time), ms(t.step_time)),
        row("compute", ms(b.compute_time), ms(t.compute_time)),
        row("collectives", ms(b.collective_time), ms(t.collective_time)),
        row("weight update", ms(b.update_time), ms(t.update_time)),
        row("update share", format!("{:.1}%", b.update_share * 100.0), format!("{:.1}%", t.update_share * 100.0)),
        row("collective rounds/step", format!("{:.1}", b.collective_rounds), format!("{:.1}", t.collective_rounds)),
        row("peak memory", mib(c.baseline_memory.peak), mib(c.transformed_memory.peak)),
    ];
    if let Some(n) = &c.numerics {
        rows.push(row("max abs diff", String::new(), format!("{:e}", n.max_abs_diff)));
        rows.push(row("max rel diff", String::new(), format!("{:e}", n.max_rel_diff)));
    }
    format!(
        "{}clusters sharded: {}/{}\nspeedup: {:.3}x\nmemory saving: {:.1}%\n",
        table(&rows),
        c.sharded,
        c.clusters,
        c.speedup,
        c.memory_saving * 100.0
    )
}

fn execute(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Analyze { input, profit, target, cost } => {
            let m = load(&input, &target)?;
            let j = if profit {
                let d = decide(&m, &cost.model()?, &ProfitOptions::default());
                json!({
                    "clusters": d.iter().map(|d| d.to_json()).collect::<Vec<_>>(),
                    "summary": {"clusters": d.len(), "sharded": d.iter().filter(|d| d.shard).count()},
                })
            } else {
                redundancy::analyze(&m).to_json()
            };
            say(&format!("{}\n", pretty(&j)))?;
        }
        Command::Transform { input, out_dir, force, groups, batch, demote, target, cost } => {
            let m = load(&input, &target)?;
            let mut r = match groups.as_deref() {
                None => {
                    let opts = ProfitOptions { force: force.then_some(true), ..Default::default() };
                    apply(&m, &decide(&m, &cost.model()?, &opts))?
                }
                Some("all") => apply_partial_sharding(&m, &shardgraph::ir::ReplicaGroups::All)?,
                Some("rows") => apply_partial_sharding(&m, &m.topology.rows())?,
                Some(g) => return Err(Error::Invalid(format!("unknown groups `{g}` (all or rows)"))),
            };
            if demote {
                r.main = demote_allgather_precision(&r.main);
            }
            if batch {
                r.main = batch_collectives(&r.main);
            }
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("main.ir"), print_module(&r.main))?;
            fs::write(out_dir.join("shard.ir"), print_module(&r.shard_program))?;
            fs::write(out_dir.join("unshard.ir"), print_module(&r.unshard_program))?;
            fs::write(out_dir.join("manifest.json"), pretty(&r.manifest.to_json()))?;
            let sharded = r.manifest.decisions.iter().filter(|d| d["decision"] == "shard").count();
            say(&format!("sharded {sharded} of {} clusters; wrote {}\n", r.manifest.decisions.len(), out_dir.display()))?;
        }
        Command::Simulate { input, inputs: args, seed, out, target } => {
            let m = load(&input, &target)?;
            let ins = match args {
                Some(p) => inputs::from_json(&serde_json::from_str(&read(&p)?)?)?,
                None => inputs::random_inputs(&m, seed),
            };
            let r = run(&m, &ins, &RunOptions::default())?;
            let outfeeds: Vec<Json> = r
                .outfeeds
                .iter()
                .map(|log| log.iter().map(|(n, v)| json!({"instruction": n, "value": v.to_json()})).collect())
                .collect();
            let j = json!({
                "replicas": r.outputs.iter().map(|v| v.to_json()).collect::<Vec<_>>(),
                "outfeeds": outfeeds,
            });
            emit(out.as_deref(), &pretty(&j))?;
        }
        Command::Cost { input, target, cost: c } => {
            let m = load(&input, &target)?;
            let mut j = serde_json::to_value(cost(&m, &c.model()?))?;
            j["memory"] = serde_json::to_value(peak_memory(&m))?;
            say(&format!("{}\n", pretty(&j)))?;
        }
        Command::Compare { input, steps, no_simulate, tolerance, force, no_batch, no_demote, seed, json, target, cost } => {
            let m = load(&input, &target)?;
            let opts = CompareOptions {
                cost_model: cost.model()?,
                profit: ProfitOptions { force: force.then_some(true), ..Default::default() },
                batch: !no_batch,
                demote: !no_demote,
                simulate_runs: (!no_simulate).then_some(steps),
                seed,
            };
            let c = compare(&m, &opts)?;
            say(&report(&c))?;
            if let Some(p) = json {
                fs::write(p, pretty(&serde_json::to_value(&c)?))?;
            }
            if let Some(n) = &c.numerics {
                if n.max_rel_diff.is_nan() || n.max_rel_diff > tolerance {
                    eprintln!("relative difference {:e} exceeds tolerance {tolerance:e}", n.max_rel_diff);
                    return Ok(ExitCode::from(1));
                }
            }
        }
        Command::Gen { model, replicas, topology, optimizer, steps, no_loop, batch, layers, bf16, outfeed_every, out } => {
            let model: Model = model.parse()?;
            let mut cfg = GenConfig::new(model, replicas);
            cfg.topology = Topology::parse(&topology, Some(replicas)).map_err(Error::Invalid)?;
            if let Some(o) = optimizer {
                cfg.optimizer = o.parse::<Optimizer>()?;
            }
            cfg.loop_steps = (!no_loop).then_some(steps);
            cfg.batch = batch;
            cfg.layers = layers;
            cfg.bf16_forward = bf16;
            cfg.outfeed_every = outfeed_every;
            emit(out.as_deref(), &print_module(&generate(&cfg)?))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
