//! `ladistill`: train teachers, build distillation datasets, distill students,
//! evaluate policies and run the whole experiment.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use ladistill::distill::{self, DistillConfig, DistillDataset};
use ladistill::env::write_trace;
use ladistill::evalkit::{self, EvalConfig, PolicySpec, ReportBundle, ScenarioSuite};
use ladistill::linksim::{sample_scenario, RandomizationRanges};
use ladistill::net::{self, DenseNet};
use ladistill::pipeline::{self, ReproduceConfig};
use ladistill::rl::{self, ReplayBuffer, TrainHooks, TrainerConfig};
use ladistill::Exec;

#[derive(Parser, Debug)]
#[command(name = "ladistill", version, about = "RL link adaptation with policy distillation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single actor, fixed schedules, reproducible artifacts.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Also render SVG charts.
    #[arg(long, global = true)]
    svg: bool,
    /// Print the subcommand's default config as JSON and exit.
    #[arg(long, global = true)]
    init_config: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a DQN teacher under domain randomization.
    TrainTeacher {
        /// Write one sampled scenario to <out>/scenario.json.
        #[arg(long)]
        dump_scenario: bool,
    },
    /// Build a distillation dataset from a trained teacher.
    GenDistillData {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_enum, default_value_t = DataMode::Fresh)]
        mode: DataMode,
        /// Replay dump (replay mode).
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Rows to generate (fresh mode).
        #[arg(long, default_value_t = 100_000)]
        n: usize,
    },
    /// Distill a student from one or more datasets.
    Distill {
        /// Several datasets are shuffled together (multi-policy).
        #[arg(long = "dataset", num_args = 1..)]
        datasets: Vec<PathBuf>,
        /// Student shape, e.g. 3x32, or explicit widths 16,32,32,28.
        #[arg(long)]
        student: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate policies on the benchmark scenarios.
    Evaluate {
        /// `olla`, `fixed:<m>`, `<file>.ldnn` or `<name>=<file>.ldnn`.
        #[arg(long = "policy", num_args = 1..)]
        policies: Vec<String>,
        /// Policy the others are compared against (default: the first).
        #[arg(long)]
        reference: Option<String>,
        #[arg(long, value_delimiter = ',')]
        scenarios: Option<Vec<String>>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Write per-step traces of this many episodes per policy and scenario.
        #[arg(long)]
        trace: Option<usize>,
        /// Write the benchmark UE configs to <out>/scenarios.json.
        #[arg(long)]
        dump_scenario: bool,
    },
    /// Full experiment: teachers, students, control, evaluation, tables.
    ReproducePaper {
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum DataMode {
    Fresh,
    Replay,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Profile {
    Full,
    Desk,
    Smoke,
}

/// Raised for bad invocations and unreadable configs; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TeacherRun {
    trainer: TrainerConfig,
    ranges: RandomizationRanges,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DataRun {
    ranges: RandomizationRanges,
    alpha: f64,
    seed: u64,
}

impl Default for DataRun {
    fn default() -> Self {
        Self {
            ranges: RandomizationRanges::standard(),
            alpha: ladistill::env::DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalRun {
    eval: EvalConfig,
    /// Overrides every scenario's frozen seed when set.
    seed: Option<u64>,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        fs::read_to_string(path).map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config file {}: {e}", path.display())))
}

fn print_default<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn exec_for(g: &Global) -> Exec {
    if g.deterministic {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn parse_dims(spec: &str) -> anyhow::Result<Vec<usize>> {
    let dims = if let Some((d, w)) = spec.split_once('x') {
        let d: usize = d
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad student shape {spec:?}")))?;
        let w: usize = w
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad student shape {spec:?}")))?;
        net::mlp_dims(d, w)
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| usage(format!("bad student widths {spec:?}")))?
    };
    net::check_dims(&dims).map_err(|e| usage(e.to_string()))?;
    Ok(dims)
}

fn cmd_train_teacher(g: &Global, dump_scenario: bool) -> anyhow::Result<()> {
    if g.init_config {
        return print_default(&TeacherRun::default());
    }
    let mut run: TeacherRun = load_config(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        run.trainer.seed = seed;
    }
    run.trainer.deterministic |= g.deterministic;
    run.trainer.validate().map_err(|e| usage(e.to_string()))?;
    run.ranges.validate().map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(&g.out)?;
    if dump_scenario {
        write_json(
            &g.out.join("scenario.json"),
            &sample_scenario(&run.ranges, run.trainer.seed)?,
        )?;
    }
    let hooks = TrainHooks {
        checkpoint_dir: (run.trainer.checkpoint_every > 0).then(|| g.out.join("checkpoints")),
    };
    let out = rl::train_teacher(&run.trainer, &run.ranges, &hooks)?;
    out.net.save(g.out.join("teacher.ldnn"))?;
    out.replay.save(g.out.join("replay.ldrp"))?;
    rl::write_train_log(g.out.join("train_log.csv"), &out.log)?;
    let manifest = serde_json::json!({
        "command": "train-teacher",
        "seed": run.trainer.seed,
        "deterministic": run.trainer.deterministic,
        "config": run,
        "env_steps": out.env_steps,
        "learn_steps": out.learn_steps,
        "model_sha256": out.net.fingerprint(),
        "replay_len": out.replay.len(),
    });
    write_json(&g.out.join("manifest.json"), &manifest)?;
    println!(
        "teacher: {} params, {} env steps, {} learn steps, mean return {:.4}",
        out.net.param_count(),
        out.env_steps,
        out.learn_steps,
        out.mean_episode_return
    );
    println!("wrote {}", g.out.join("teacher.ldnn").display());
    Ok(())
}

fn cmd_gen_distill_data(
    g: &Global,
    teacher: &Path,
    mode: DataMode,
    replay: Option<&Path>,
    n: usize,
) -> anyhow::Result<()> {
    if g.init_config {
        return print_default(&DataRun::default());
    }
    let mut run: DataRun = load_config(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        run.seed = seed;
    }
    let net = DenseNet::load(teacher).with_context(|| format!("loading teacher {}", teacher.display()))?;
    let data = match mode {
        DataMode::Fresh => distill::gen_dataset(&net, &run.ranges, n, run.seed, run.alpha, exec_for(g))?,
        DataMode::Replay => {
            let Some(path) = replay else {
                bail!(usage("--mode replay needs --replay <file>"));
            };
            let rb = ReplayBuffer::load(path).with_context(|| format!("loading replay {}", path.display()))?;
            distill::from_replay(&net, &rb, &run.ranges.tag)?
        }
    };
    fs::create_dir_all(&g.out)?;
    let path = g.out.join("dataset.ldds");
    data.save(&path)?;
    write_json(
        &g.out.join("manifest.json"),
        &serde_json::json!({
            "command": "gen-distill-data",
            "seed": run.seed,
            "deterministic": g.deterministic,
            "config": run,
            "teacher": teacher,
            "meta": data.meta(),
            "dataset_sha256": data.fingerprint(),
        }),
    )?;
    println!("dataset: {} rows -> {}", data.len(), path.display());
    Ok(())
}

struct DistillArgs<'a> {
    datasets: &'a [PathBuf],
    student: Option<&'a str>,
    tau: Option<f64>,
    epochs: Option<usize>,
    lr: Option<f64>,
}

fn cmd_distill(g: &Global, a: DistillArgs<'_>) -> anyhow::Result<()> {
    if g.init_config {
        return print_default(&DistillConfig::default());
    }
    if a.datasets.is_empty() {
        return Err(usage("distill needs at least one --dataset"));
    }
    let mut cfg: DistillConfig = load_config(g.config.as_deref())?;
    if let Some(s) = a.student {
        cfg.dims = parse_dims(s)?;
    }
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let parts = a
        .datasets
        .iter()
        .map(|p| DistillDataset::load(p).with_context(|| format!("loading dataset {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let data = if parts.len() == 1 {
        parts.into_iter().next().expect("one dataset")
    } else {
        let agg = distill::aggregate_shuffle(&parts, cfg.seed)?;
        log::info!("aggregated {} datasets into {} rows", parts.len(), agg.len());
        println!("aggregated {} datasets: {} rows", parts.len(), agg.len());
        agg
    };
    let out = distill::distill(&data, &cfg)?;
    fs::create_dir_all(&g.out)?;
    out.student.save(g.out.join("student.ldnn"))?;
    distill::write_epoch_log(g.out.join("distill_log.csv"), &out.log)?;
    write_json(
        &g.out.join("manifest.json"),
        &serde_json::json!({
            "command": "distill",
            "seed": cfg.seed,
            "deterministic": g.deterministic,
            "config": cfg,
            "datasets": a.datasets,
            "rows": data.len(),
            "best_epoch": out.best_epoch,
            "model_sha256": out.student.fingerprint(),
        }),
    )?;
    println!(
        "student {:?}: {} params, best epoch {} of {}",
        cfg.dims,
        out.student.param_count(),
        out.best_epoch,
        cfg.epochs
    );
    Ok(())
}

enum Loaded {
    Olla,
    Fixed(usize),
    Net(String, DenseNet),
}

fn parse_policy(spec: &str) -> anyhow::Result<Loaded> {
    if spec == "olla" {
        return Ok(Loaded::Olla);
    }
    if let Some(m) = spec.strip_prefix("fixed:") {
        let m: usize = m.parse().map_err(|_| usage(format!("bad fixed policy {spec:?}")))?;
        return Ok(Loaded::Fixed(m));
    }
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let n = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.into());
            (n, p)
        }
    };
    let net = DenseNet::load(&path).with_context(|| format!("loading policy {}", path.display()))?;
    Ok(Loaded::Net(name, net))
}

struct EvaluateArgs<'a> {
    policies: &'a [String],
    reference: Option<&'a str>,
    scenarios: Option<&'a [String]>,
    episodes: Option<usize>,
    trace: Option<usize>,
    dump_scenario: bool,
}

fn cmd_evaluate(g: &Global, a: EvaluateArgs<'_>) -> anyhow::Result<()> {
    if g.init_config {
        return print_default(&EvalRun::default());
    }
    if a.policies.is_empty() {
        return Err(usage("evaluate needs at least one --policy"));
    }
    let mut run: EvalRun = load_config(g.config.as_deref())?;
    if let Some(n) = a.episodes {
        run.eval.n_episodes = n;
    }
    if g.seed.is_some() {
        run.seed = g.seed;
    }
    let suite = match a.scenarios {
        Some(names) => ScenarioSuite::standard()
            .subset(names)
            .map_err(|e| usage(e.to_string()))?,
        None => ScenarioSuite::standard(),
    };
    let loaded = a
        .policies
        .iter()
        .map(|s| parse_policy(s))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let specs: Vec<PolicySpec<'_>> = loaded
        .iter()
        .map(|l| match l {
            Loaded::Olla => PolicySpec::olla(),
            Loaded::Fixed(m) => PolicySpec::Fixed(*m),
            Loaded::Net(n, net) => PolicySpec::greedy(n, net),
        })
        .collect();
    let names: Vec<String> = specs.iter().map(|s| s.name()).collect();
    let reference = match a.reference {
        Some(r) if names.iter().any(|n| n == r) => r.to_string(),
        Some(r) => bail!(usage(format!("reference {r:?} is not among the policies {names:?}"))),
        None => names[0].clone(),
    };
    fs::create_dir_all(&g.out)?;
    if a.dump_scenario {
        write_json(&g.out.join("scenarios.json"), &suite)?;
    }
    let exec = exec_for(g);
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for sc in &suite.scenarios {
        let seed = run.seed.unwrap_or(sc.eval_seed);
        let rs = specs
            .iter()
            .map(|p| evalkit::evaluate(p, sc, &run.eval, seed, exec))
            .collect::<ladistill::Result<Vec<_>>>()?;
        let r_ref = rs.iter().find(|r| r.policy == reference).expect("reference evaluated");
        for r in &rs {
            let mut c = evalkit::relative_gain(r, r_ref);
            c.mode = "evaluate".into();
            rows.push(c);
            println!(
                "{:6} {:20} T {:.4}  BLER {:.4}  r {:.4}",
                sc.name, r.policy, r.mean_throughput, r.bler, r.mean_reward
            );
        }
        if let Some(n) = a.trace {
            for p in &specs {
                let eps = evalkit::trace_episodes(p, sc, n, seed, run.eval.alpha)?;
                let f = fs::File::create(g.out.join(format!("trace_{}_{}.csv", sc.name, p.name())))?;
                write_trace(f, &eps)?;
            }
        }
        reports.extend(rs);
    }
    let manifest = serde_json::json!({
        "command": "evaluate",
        "seed": run.seed,
        "deterministic": g.deterministic,
        "config": run,
        "policies": a.policies,
        "reference": reference,
        "scenarios": suite.scenarios.iter().map(|s| serde_json::json!({
            "name": s.name, "eval_seed": run.seed.unwrap_or(s.eval_seed)
        })).collect::<Vec<_>>(),
        "model_sha256": loaded.iter().filter_map(|l| match l {
            Loaded::Net(n, net) => Some((n.clone(), net.fingerprint())),
            _ => None,
        }).collect::<std::collections::BTreeMap<_, _>>(),
    });
    evalkit::report_write(
        &ReportBundle {
            reports: &reports,
            comparisons: &rows,
            control: &[],
            manifest: &manifest,
            svg: g.svg,
        },
        &g.out,
    )?;
    println!("reports in {}", g.out.display());
    Ok(())
}

fn cmd_reproduce(g: &Global, profile: Profile) -> anyhow::Result<()> {
    let base = match profile {
        Profile::Full => ReproduceConfig::default(),
        Profile::Desk => ReproduceConfig::desk(),
        Profile::Smoke => ReproduceConfig::smoke(),
    };
    if g.init_config {
        return print_default(&base);
    }
    let mut cfg = match g.config.as_deref() {
        Some(p) => load_config::<ReproduceConfig>(Some(p))?,
        None => base,
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.deterministic |= g.deterministic;
    cfg.svg |= g.svg;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let o = pipeline::reproduce(&cfg, Some(&g.out), exec_for(g))?;
    println!(
        "{:16} {:14} {:6} {:>9} {:>9} {:>9}",
        "mode", "student", "scen", "dT%", "dBLER%", "dr%"
    );
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:+.2}"));
    for r in o.baseline_rows.iter().chain(&o.table2).chain(&o.control_rows) {
        println!(
            "{:16} {:14} {:6} {:>9} {:>9} {:>9}",
            r.mode,
            r.student,
            r.scenario,
            fmt(r.delta_throughput),
            fmt(r.delta_bler),
            fmt(r.delta_reward)
        );
    }
    println!("{} table rows, outputs in {}", o.table2.len(), g.out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global.clone();
    ladistill::exec::with_jobs(g.jobs, move || match &cli.cmd {
        Cmd::TrainTeacher { dump_scenario } => cmd_train_teacher(&g, *dump_scenario),
        Cmd::GenDistillData {
            teacher,
            mode,
            replay,
            n,
        } => cmd_gen_distill_data(&g, teacher, *mode, replay.as_deref(), *n),
        Cmd::Distill {
            datasets,
            student,
            tau,
            epochs,
            lr,
        } => cmd_distill(
            &g,
            DistillArgs {
                datasets,
                student: student.as_deref(),
                tau: *tau,
                epochs: *epochs,
                lr: *lr,
            },
        ),
        Cmd::Evaluate {
            policies,
            reference,
            scenarios,
            episodes,
            trace,
            dump_scenario,
        } => cmd_evaluate(
            &g,
            EvaluateArgs {
                policies,
                reference: reference.as_deref(),
                scenarios: scenarios.as_deref(),
                episodes: *episodes,
                trace: *trace,
                dump_scenario: *dump_scenario,
            },
        ),
        Cmd::ReproducePaper { profile } => cmd_reproduce(&g, *profile),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_err = e.is::<UsageError>()
                || matches!(e.downcast_ref::<ladistill::Error>(), Some(ladistill::Error::Config(_)));
            ExitCode::from(if config_err { 2 } else { 1 })
        }
    }
}
