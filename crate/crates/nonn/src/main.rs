use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use nonn::config::{PipelineConfig, ProfilesConfig};
use nonn::formats::{self, load_contributions, load_head, load_images, load_program, load_trace, read_json, save_network, write_json};
use nonn::runtime::{self, NonnOptions, SplitOptions, WorkerConfig};
use nonn_core::arch::{wrn, ArchitectureDescriptor, StudentTemplate};
use nonn_core::community::{combine_into_partitions, detect};
use nonn_core::graph::{self, build, build_ah_matrix, default_eps_act, Rule};
use nonn_core::losses::{activation_loss, kd_loss, PartitionedActivations};
use nonn_core::math::argmax;
use nonn_core::partition::{solve_with_assignment, PartitionError, PartitionPlan};
use nonn_core::simulator::{estimate, split_exchange, Deployment};
use nonn_core::trace::FilterMask;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// NoNN partitioning, inference and analysis tools. Results go to stdout as
/// JSON; summaries and logs go to stderr (`NONN_LOG` sets verbosity).
#[derive(Debug, Parser)]
#[command(name = "nonn", version)]
struct Cli {
    /// Seed for every randomized step (default 0, or the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RuleArg {
    Ah,
    Ca,
}

impl From<RuleArg> for Rule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Ah => Rule::Ah,
            RuleArg::Ca => Rule::Ca,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Load and validate an activation trace.
    TraceValidate {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Build the filter network of a trace.
    GraphBuild {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value = "ah")]
        rule: RuleArg,
        /// Use the matrix form of the AH rule (no activity floor).
        #[arg(long)]
        matrix: bool,
        #[arg(long)]
        eps_act: Option<f64>,
        /// Also write `network.json` and `network.bin` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect filter communities.
    Communities {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum, default_value = "ah")]
        rule: RuleArg,
        #[arg(long)]
        eps_act: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Also merge the communities into this many partitions.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run the full partitioning pipeline.
    Partition {
        #[arg(long)]
        config: PathBuf,
    },
    /// Parameter and FLOP counts.
    Cost {
        #[arg(long, value_enum, default_value = "wrn")]
        arch: ArchArg,
        #[arg(long, default_value_t = 16)]
        depth: usize,
        #[arg(long, default_value_t = 2)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Square input side.
        #[arg(long, default_value_t = 32)]
        input: usize,
        /// Descriptor or student-template JSON, for the `descriptor` and `student` arch kinds.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Partition size for `student`.
        #[arg(long, default_value_t = 0)]
        partition: usize,
    },
    /// Evaluate distillation and activation-transfer losses.
    LossesEval {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run programs in this process.
    InferLocal {
        /// Program directory; repeat for a NoNN ensemble.
        #[arg(long = "program", required = true)]
        programs: Vec<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        /// Head applied to the concatenated program outputs.
        #[arg(long)]
        fc: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Serve a program over TCP until SHUTDOWN.
    Worker {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        program: Option<PathBuf>,
        /// Delay before each reply.
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
    /// Run NoNN inference across workers.
    #[command(alias = "infer")]
    InferDistributed {
        /// Comma-separated worker addresses, in student order.
        #[arg(long, value_delimiter = ',', required = true)]
        workers: Vec<String>,
        #[arg(long)]
        fc: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Programs to load onto the workers first, comma-separated.
        #[arg(long, value_delimiter = ',')]
        programs: Vec<PathBuf>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
        /// Zero-fill students that fail.
        #[arg(long)]
        degraded: bool,
        #[arg(long)]
        limit: Option<usize>,
        /// Send SHUTDOWN to every worker afterwards.
        #[arg(long)]
        shutdown: bool,
    },
    /// Horizontal-split execution over a localhost mesh.
    SplitBaseline {
        #[arg(long)]
        program: PathBuf,
        #[arg(long, default_value_t = 2)]
        devices: usize,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Latency and energy estimate of a partition plan.
    Simulate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        /// Student template JSON; default is the built-in template.
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Accuracy under every subset of failed students.
    Robustness {
        #[arg(long)]
        contributions: PathBuf,
        /// Also write the curve as CSV (`size,count,min,mean,max`).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    Wrn,
    Descriptor,
    Student,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(anyhow::Error),
    Budget(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Budget(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Budget(e) | Failure::Other(e) => e,
        }
    }
}

fn invalid<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Validation(e.into())
}

fn other<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Other(e.into())
}

type Outcome = Result<(Value, String), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NONN_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok((value, summary)) => {
            let mut out = std::io::stdout().lock();
            let _ = serde_json::to_writer_pretty(&mut out, &value);
            let _ = writeln!(out);
            eprintln!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            let kind = match f {
                Failure::Validation(_) => "validation",
                Failure::Budget(_) => "budget",
                Failure::Other(_) => "runtime",
            };
            println!("{}", json!({ "error": format!("{:#}", f.error()), "kind": kind }));
            ExitCode::from(f.code())
        }
    }
}

fn limited(images: formats::ImageSet, limit: Option<usize>) -> formats::ImageSet {
    match limit {
        Some(n) => images.truncate(n),
        None => images,
    }
}

fn run(cli: Cli) -> Outcome {
    let seed = cli.seed.unwrap_or(0);
    match cli.cmd {
        Cmd::TraceValidate { trace } => {
            let t = load_trace(&trace).map_err(invalid)?;
            let acc = t.trace.eval_accuracy(&FilterMask::all(t.trace.n_filters())).map_err(invalid)?;
            let v = json!({
                "n_filters": t.trace.n_filters(),
                "n_images": t.trace.n_images(),
                "n_classes": t.trace.n_classes(),
                "clamped": t.clamped,
                "max_activity": t.trace.max_activity(),
                "accuracy": acc,
            });
            let s = format!(
                "trace ok: {} filters, {} images, {} classes, {} clamped, accuracy {:.4}",
                t.trace.n_filters(),
                t.trace.n_images(),
                t.trace.n_classes(),
                t.clamped,
                acc
            );
            Ok((v, s))
        }
        Cmd::GraphBuild { trace, rule, matrix, eps_act, out } => {
            let t = load_trace(&trace).map_err(invalid)?.trace;
            let net = if matrix {
                if matches!(rule, RuleArg::Ca) {
                    return Err(invalid(anyhow!("the matrix form exists only for the AH rule")));
                }
                build_ah_matrix(&t)
            } else {
                build(&t, rule.into(), eps_act.unwrap_or_else(|| default_eps_act(&t)))
            };
            if let Some(dir) = &out {
                save_network(dir, &net).map_err(other)?;
            }
            let upper = net.upper_triangle();
            let edges = upper.iter().filter(|w| **w > 0.0).count();
            let v = json!({
                "n_nodes": net.n_nodes(),
                "rule": net.rule,
                "eps_act": net.eps_act,
                "matrix": matrix,
                "total_weight": net.total_weight(),
                "n_edges": edges,
                "upper_triangle": upper,
            });
            Ok((v, format!("network: {} nodes, {} edges, total weight {:.6e}", net.n_nodes(), edges, net.total_weight())))
        }
        Cmd::Communities { trace, rule, eps_act, gamma, k } => {
            let t = load_trace(&trace).map_err(invalid)?.trace;
            let net = build(&t, rule.into(), eps_act.unwrap_or_else(|| default_eps_act(&t)));
            let a = detect(&net, gamma, seed).map_err(invalid)?;
            let partitions = match k {
                Some(k) => Some(combine_into_partitions(&a, k).map_err(invalid)?),
                None => None,
            };
            let s = format!(
                "{} communities plus {} isolated filters, modularity {:.6}",
                a.n_connected(),
                a.isolated().len(),
                a.modularity
            );
            Ok((json!({ "assignment": a, "communities": a.communities(), "partitions": partitions }), s))
        }
        Cmd::Partition { config } => partition(&config, cli.seed),
        Cmd::Cost { arch, depth, width, classes, input, file, partition } => {
            let desc: ArchitectureDescriptor = match arch {
                ArchArg::Wrn => wrn(depth, width, classes, input).map_err(invalid)?,
                ArchArg::Descriptor => read_json(file.as_deref().ok_or_else(|| invalid(anyhow!("--file is required")))?).map_err(invalid)?,
                ArchArg::Student => {
                    let template = match &file {
                        Some(f) => read_json(f).map_err(invalid)?,
                        None => StudentTemplate::cifar10(),
                    };
                    template.instantiate(partition).map_err(invalid)?
                }
            };
            let cost = desc.cost().map_err(invalid)?;
            let s = format!("{:.3}M params, {:.1}M FLOPs", cost.params as f64 / 1e6, cost.flops as f64 / 1e6);
            Ok((json!({ "params": cost.params, "flops": cost.flops, "layers": desc.layers.len() }), s))
        }
        Cmd::LossesEval { input } => losses_eval(&input),
        Cmd::InferLocal { programs, images, fc, limit } => {
            let programs: Vec<_> = programs.iter().map(|p| load_program(p)).collect::<Result<_, _>>().map_err(invalid)?;
            let images = limited(load_images(&images).map_err(invalid)?, limit);
            let head = fc.map(|p| load_head(&p)).transpose().map_err(invalid)?;
            let mut outputs = Vec::with_capacity(images.len());
            let mut predictions = Vec::with_capacity(images.len());
            for n in 0..images.len() {
                let x = images.image(n);
                let mut cat = Vec::new();
                for p in &programs {
                    cat.extend(p.infer(&x).map_err(invalid)?);
                }
                predictions.push(match &head {
                    Some(h) if h.width == cat.len() => h.predict(&cat),
                    Some(h) => return Err(invalid(anyhow!("head expects {} inputs, programs produce {}", h.width, cat.len()))),
                    None => argmax(&cat),
                });
                outputs.push(cat);
            }
            let acc = accuracy(&predictions, &images.labels);
            let s = format!("{} images, accuracy {:.4}", images.len(), acc);
            Ok((json!({ "predictions": predictions, "accuracy": acc, "outputs": outputs }), s))
        }
        Cmd::Worker { listen, program, delay_ms } => {
            let program = program.map(|p| load_program(&p)).transpose().map_err(invalid)?.map(Arc::new);
            let listener = std::net::TcpListener::bind(&listen).with_context(|| format!("binding {listen}")).map_err(other)?;
            let addr = listener.local_addr().map_err(other)?;
            eprintln!("worker listening on {addr}");
            runtime::serve(listener, WorkerConfig { program, delay: Duration::from_millis(delay_ms) }).map_err(other)?;
            Ok((json!({ "listen": addr.to_string(), "stopped": true }), "worker stopped".into()))
        }
        Cmd::InferDistributed { workers, fc, images, programs, timeout_ms, degraded, limit, shutdown } => {
            let head = load_head(&fc).map_err(invalid)?;
            let images = limited(load_images(&images).map_err(invalid)?, limit);
            let programs: Vec<_> = programs.iter().map(|p| load_program(p)).collect::<Result<_, _>>().map_err(invalid)?;
            let opts = NonnOptions { timeout: Duration::from_millis(timeout_ms), degraded };
            let result = runtime::run_nonn(&workers, (!programs.is_empty()).then_some(&programs[..]), &head, &images, opts);
            if shutdown {
                for w in &workers {
                    let _ = runtime::shutdown_worker(w, opts.timeout);
                }
            }
            let r = result.map_err(other)?;
            let acc = r.accuracy(&images.labels);
            let failed = r.outcomes.iter().filter(|o| o.prediction.is_none()).count();
            let s = format!(
                "{} images over {} workers, accuracy {:.4}, {} failed, {} response bytes",
                images.len(),
                workers.len(),
                acc,
                failed,
                r.stats.response_bytes
            );
            Ok((json!({ "accuracy": acc, "run": r }), s))
        }
        Cmd::SplitBaseline { program, devices, images, limit, timeout_ms } => {
            let p = load_program(&program).map_err(invalid)?;
            let images = limited(load_images(&images).map_err(invalid)?, limit);
            let analytic = split_exchange(p.descriptor(), devices).map_err(invalid)?;
            let r = runtime::run_horizontal_split(&p, devices, &images, SplitOptions { timeout: Duration::from_millis(timeout_ms) })
                .map_err(|e| match e {
                    runtime::RuntimeError::Indivisible { .. } => invalid(e),
                    e => other(e),
                })?;
            let per_image: u64 = analytic.iter().map(|l| l.total_bytes).sum();
            let acc = accuracy(&r.predictions, &images.labels);
            let s = format!(
                "{}-way split, {} images, {} exchange bytes per image (analytic {}), accuracy {:.4}",
                devices,
                images.len(),
                r.stats.layer_exchange_payload_bytes / images.len().max(1) as u64,
                per_image,
                acc
            );
            Ok((json!({ "accuracy": acc, "analytic": analytic, "analytic_bytes_per_image": per_image, "run": r }), s))
        }
        Cmd::Simulate { plan, profiles, template } => {
            let plan: PartitionPlan = read_json(&plan).map_err(invalid)?;
            let cfg: ProfilesConfig = read_json(&profiles).map_err(invalid)?;
            if cfg.profiles.is_empty() {
                return Err(invalid(anyhow!("no device profiles")));
            }
            let template: StudentTemplate = match template {
                Some(t) => read_json(&t).map_err(invalid)?,
                None => StudentTemplate::cifar10(),
            };
            let input_bytes = 4 * template.backbone.input.numel() as u64;
            let total: usize = plan.sizes.iter().sum();
            let head_flops = (2 * cfg.n_classes * total + cfg.n_classes) as u64;
            let flops: Vec<u64> = plan.costs.iter().map(|c| c.flops).collect();
            let deployment = Deployment::nonn(&flops, input_bytes, &plan.sizes, head_flops);
            let est = estimate(&deployment, &cfg.expanded(deployment.n_nodes()), cfg.images, cfg.overlap).map_err(invalid)?;
            let s = format!(
                "latency {:.3} ms ({:.3} compute, {:.3} communication), energy {:.4} J",
                est.latency_seconds * 1e3,
                est.compute_seconds * 1e3,
                est.comm_seconds * 1e3,
                est.total_energy_joules
            );
            Ok((json!({ "deployment": deployment, "estimate": est }), s))
        }
        Cmd::Robustness { contributions, csv } => {
            let c = load_contributions(&contributions).map_err(invalid)?;
            let curve = c.failure_curve().map_err(invalid)?;
            if let Some(path) = &csv {
                let mut text = String::from("size,count,min,mean,max\n");
                for r in &curve {
                    text.push_str(&format!("{},{},{},{},{}\n", r.size, r.count, r.min, r.mean, r.max));
                }
                formats::write_file(path, text.as_bytes()).map_err(other)?;
            }
            let s = curve
                .iter()
                .map(|r| format!("{} active: {} subsets, mean accuracy {:.4}", r.size, r.count, r.mean))
                .collect::<Vec<_>>()
                .join("\n");
            Ok((json!({ "n_students": c.n_students(), "curve": curve }), s))
        }
    }
}

fn accuracy(predictions: &[usize], labels: &[u32]) -> f64 {
    let correct = predictions.iter().zip(labels).filter(|(p, l)| **p == **l as usize).count();
    correct as f64 / labels.len().max(1) as f64
}

fn partition(config: &Path, seed_flag: Option<u64>) -> Outcome {
    let cfg = PipelineConfig::load(config).map_err(invalid)?;
    cfg.check_files().map_err(invalid)?;
    let seed = seed_flag.unwrap_or(cfg.seed);
    let loaded = load_trace(&cfg.trace_path).map_err(invalid)?;
    let t = &loaded.trace;
    let template = cfg.template().map_err(invalid)?;
    cfg.budgets.validate().map_err(invalid)?;
    let eps_act = cfg.eps_act.unwrap_or_else(|| default_eps_act(t));
    let net = graph::build(t, cfg.rule, eps_act);
    let assignment = detect(&net, cfg.gamma, seed).map_err(invalid)?;
    info!("{} communities, modularity {:.6}", assignment.n_connected(), assignment.modularity);
    let plan = solve_with_assignment(t, &assignment, cfg.k, &cfg.budgets, &template).map_err(|e| match e {
        PartitionError::OverBudget { .. } => Failure::Budget(e.into()),
        e => invalid(e),
    })?;
    if let Some(dir) = &cfg.output_dir {
        write_json(&dir.join("plan.json"), &plan).map_err(other)?;
        write_json(&dir.join("assignment.json"), &assignment).map_err(other)?;
    }
    let mut s = format!(
        "{} partitions of sizes {:?}, {} dropped, delta_val {:.6}",
        plan.partitions.len(),
        plan.sizes,
        plan.dropped.len(),
        plan.delta_val
    );
    if !plan.balanced {
        s.push_str(&format!("\nwarning: partition sizes differ by more than {:.0}%", 100.0 * plan.budgets.imbalance));
    }
    Ok((serde_json::to_value(&plan).map_err(other)?, s))
}

#[derive(Debug, Deserialize, Serialize)]
struct KdCase {
    student: Vec<f64>,
    teacher: Vec<f64>,
    label: usize,
    alpha: f64,
    tau: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct ActivationCase {
    teacher: Vec<Vec<f64>>,
    student: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct LossInput {
    #[serde(default)]
    kd: Vec<KdCase>,
    #[serde(default)]
    activation: Vec<ActivationCase>,
}

fn losses_eval(path: &Path) -> Outcome {
    let input: LossInput = read_json(path).map_err(invalid)?;
    let kd: Vec<f64> = input
        .kd
        .iter()
        .map(|c| kd_loss(&c.student, &c.teacher, c.label, c.alpha, c.tau))
        .collect::<Result<_, _>>()
        .map_err(invalid)?;
    let act: Vec<f64> = input
        .activation
        .into_iter()
        .map(|c| activation_loss(&PartitionedActivations::new(c.teacher), &PartitionedActivations::new(c.student)))
        .collect::<Result<_, _>>()
        .map_err(invalid)?;
    let s = format!("{} kd values, {} activation-loss values", kd.len(), act.len());
    Ok((json!({ "kd": kd, "activation": act }), s))
}
