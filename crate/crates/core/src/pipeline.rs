//! End-to-end experiment: generalist and specialist teachers, single- and
//! multi-policy students, the scratch-trained control, evaluation on the
//! benchmark suite and the report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distill::{self, DistillConfig, DistillDataset, DistillOutcome};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalConfig, MetricsReport, PolicyComparison, PolicySpec, ReportBundle, ScenarioSuite};
use crate::exec::Exec;
use crate::linksim::RandomizationRanges;
use crate::net::{self, DenseNet};
use crate::rl::{self, TrainHooks, TrainOutcome, TrainerConfig};
use crate::rng::derive_seed;

pub const MODE_SINGLE: &str = "single_policy";
pub const MODE_MULTI: &str = "multi_policy";
pub const MODE_CONTROL: &str = "scratch_control";
pub const MODE_BASELINE: &str = "teacher_vs_olla";

pub const TEACHER: &str = "teacher";
pub const CONTROL: &str = "control_3x32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSpec {
    pub name: String,
    pub dims: Vec<usize>,
}

impl StudentSpec {
    pub fn mlp(depth: usize, width: usize) -> Self {
        Self {
            name: format!("{depth}x{width}"),
            dims: net::mlp_dims(depth, width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Relabel the teacher's final replay memory.
    Replay,
    /// Fresh greedy rollouts of the trained teacher.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproduceConfig {
    pub seed: u64,
    pub deterministic: bool,
    /// Generalist teacher; `seed` and `deterministic` are overridden.
    pub teacher: TrainerConfig,
    /// Env-step budget of each specialist teacher.
    pub specialist_env_steps: usize,
    pub students: Vec<StudentSpec>,
    pub control_dims: Vec<usize>,
    pub dataset_source: DatasetSource,
    /// Rows per teacher when `dataset_source` is `fresh`.
    pub fresh_samples: usize,
    /// Student settings; `dims` and `seed` are overridden per student.
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub scenarios: Vec<String>,
    pub svg: bool,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            teacher: TrainerConfig::default(),
            specialist_env_steps: 100_000,
            students: vec![
                StudentSpec::mlp(4, 64),
                StudentSpec::mlp(4, 32),
                StudentSpec::mlp(3, 32),
            ],
            control_dims: net::mlp_dims(3, 32),
            dataset_source: DatasetSource::Replay,
            fresh_samples: 100_000,
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            scenarios: ScenarioSuite::standard()
                .names()
                .into_iter()
                .map(String::from)
                .collect(),
            svg: false,
        }
    }
}

impl ReproduceConfig {
    /// Reduced schedule sized for a single CPU core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.teacher.total_env_steps = 200_000;
        c.teacher.batch_size = 64;
        c.teacher.learning_rate = 3e-4;
        c.teacher.target_update_period = 500;
        c.teacher.log_every = 20_000;
        c.teacher.checkpoint_every = 0;
        c.specialist_env_steps = 60_000;
        c.eval.n_episodes = 20_000;
        c
    }

    /// Tiny budgets for smoke and determinism runs.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.teacher.dims = net::mlp_dims(2, 16);
        c.teacher.total_env_steps = 3_000;
        c.teacher.batch_size = 32;
        c.teacher.learn_start = 200;
        c.teacher.target_update_period = 100;
        c.teacher.replay_capacity = 3_000;
        c.teacher.log_every = 1_000;
        c.teacher.eval_episodes = 20;
        c.teacher.checkpoint_every = 0;
        c.specialist_env_steps = 1_500;
        c.fresh_samples = 2_000;
        c.distill.epochs = 2;
        c.eval.n_episodes = 300;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        if self.students.is_empty() {
            return Err(Error::config("at least one student is required"));
        }
        for s in &self.students {
            net::check_dims(&s.dims)?;
        }
        net::check_dims(&self.control_dims)?;
        if self.eval.n_episodes == 0 {
            return Err(Error::config("eval.n_episodes must be > 0"));
        }
        ScenarioSuite::standard().subset(&self.scenarios)?;
        Ok(())
    }

    fn teacher_cfg(&self, env_steps: usize, stream: u64) -> TrainerConfig {
        TrainerConfig {
            seed: derive_seed(self.seed, stream),
            deterministic: self.deterministic,
            total_env_steps: env_steps,
            ..self.teacher.clone()
        }
    }
}

/// A trained policy kept in memory, with its file name under `models/`.
#[derive(Debug, Clone)]
pub struct NamedNet {
    pub name: String,
    pub net: DenseNet,
}

#[derive(Debug)]
pub struct ReproduceOutcome {
    pub teacher: NamedNet,
    /// One per scenario, in suite order.
    pub specialists: Vec<NamedNet>,
    pub single_students: Vec<NamedNet>,
    pub multi_students: Vec<NamedNet>,
    pub control: NamedNet,
    pub reports: Vec<MetricsReport>,
    pub table2: Vec<PolicyComparison>,
    pub control_rows: Vec<PolicyComparison>,
    pub baseline_rows: Vec<PolicyComparison>,
    pub js: Vec<JsRow>,
    pub manifest: serde_json::Value,
    pub timings: BTreeMap<String, f64>,
}

impl ReproduceOutcome {
    pub fn report(&self, scenario: &str, policy: &str) -> Option<&MetricsReport> {
        self.reports
            .iter()
            .find(|r| r.scenario == scenario && r.policy == policy)
    }

    pub fn js_of(&self, scenario: &str, policy: &str) -> Option<f64> {
        self.js
            .iter()
            .find(|r| r.scenario == scenario && r.policy == policy)
            .map(|r| r.js)
    }
}

/// JS divergence of a policy's MCS histogram against its reference teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsRow {
    pub scenario: String,
    pub policy: String,
    pub reference: String,
    pub js: f64,
}

struct Stopwatch {
    start: Instant,
    laps: BTreeMap<String, f64>,
}

impl Stopwatch {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            laps: BTreeMap::new(),
        }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        log::info!("{name}: {:.1}s", (now - self.start).as_secs_f64());
        self.laps.insert(name.to_string(), (now - self.start).as_secs_f64());
        self.start = now;
    }
}

fn train(cfg: &TrainerConfig, ranges: &RandomizationRanges) -> Result<TrainOutcome> {
    rl::train_teacher(cfg, ranges, &TrainHooks::default())
}

fn dataset_for(
    cfg: &ReproduceConfig,
    trained: &TrainOutcome,
    ranges: &RandomizationRanges,
    seed: u64,
    exec: Exec,
) -> Result<DistillDataset> {
    match cfg.dataset_source {
        DatasetSource::Replay => distill::from_replay(&trained.net, &trained.replay, &ranges.tag),
        DatasetSource::Fresh => {
            distill::gen_dataset(&trained.net, ranges, cfg.fresh_samples, seed, cfg.teacher.alpha, exec)
        }
    }
}

fn distill_students(
    cfg: &ReproduceConfig,
    dataset: &DistillDataset,
    stream: u64,
    exec: Exec,
) -> Result<Vec<DistillOutcome>> {
    exec.try_map_range(cfg.students.len(), |i| {
        let dc = DistillConfig {
            dims: cfg.students[i].dims.clone(),
            seed: derive_seed(cfg.seed, stream + i as u64),
            ..cfg.distill.clone()
        };
        distill::distill(dataset, &dc)
    })
}

/// Trains, distills and evaluates everything. With `out_dir` set, models,
/// logs, report files and the manifest are written there.
pub fn reproduce(cfg: &ReproduceConfig, out_dir: Option<&Path>, exec: Exec) -> Result<ReproduceOutcome> {
    cfg.validate()?;
    let suite = ScenarioSuite::standard().subset(&cfg.scenarios)?;
    let exec = if cfg.deterministic { Exec::Sequential } else { exec };
    let mut clock = Stopwatch::new();

    let randomized = RandomizationRanges::standard();
    let teacher_run = train(&cfg.teacher_cfg(cfg.teacher.total_env_steps, 1), &randomized)?;
    clock.lap("generalist_teacher");

    let specialist_ranges: Vec<RandomizationRanges> = suite.scenarios.iter().map(|s| s.specialist_ranges()).collect();
    let specialist_runs = exec.try_map_range(specialist_ranges.len(), |j| {
        train(
            &cfg.teacher_cfg(cfg.specialist_env_steps, 10 + j as u64),
            &specialist_ranges[j],
        )
    })?;
    clock.lap("specialist_teachers");

    let control_cfg = TrainerConfig {
        dims: cfg.control_dims.clone(),
        ..cfg.teacher_cfg(cfg.teacher.total_env_steps, 2)
    };
    let control_run = train(&control_cfg, &randomized)?;
    clock.lap("scratch_control");

    let single_data = dataset_for(cfg, &teacher_run, &randomized, derive_seed(cfg.seed, 20), exec)?;
    clock.lap("dataset_single");
    let parts = (0..specialist_runs.len())
        .map(|j| {
            dataset_for(
                cfg,
                &specialist_runs[j],
                &specialist_ranges[j],
                derive_seed(cfg.seed, 21 + j as u64),
                exec,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let multi_data = distill::aggregate_shuffle(&parts, derive_seed(cfg.seed, 30))?;
    log::info!(
        "datasets: single {} rows, multi {} rows",
        single_data.len(),
        multi_data.len()
    );
    clock.lap("dataset_multi");

    let single = distill_students(cfg, &single_data, 40, exec)?;
    clock.lap("distill_single");
    let multi = distill_students(cfg, &multi_data, 50, exec)?;
    clock.lap("distill_multi");

    let name = |prefix: &str, s: &StudentSpec| format!("{prefix}_{}", s.name);
    let teacher = NamedNet {
        name: TEACHER.into(),
        net: teacher_run.net.clone(),
    };
    let specialists: Vec<NamedNet> = suite
        .scenarios
        .iter()
        .zip(&specialist_runs)
        .map(|(s, r)| NamedNet {
            name: format!("specialist_{}", s.name),
            net: r.net.clone(),
        })
        .collect();
    let single_students: Vec<NamedNet> = cfg
        .students
        .iter()
        .zip(&single)
        .map(|(s, o)| NamedNet {
            name: name("single", s),
            net: o.student.clone(),
        })
        .collect();
    let multi_students: Vec<NamedNet> = cfg
        .students
        .iter()
        .zip(&multi)
        .map(|(s, o)| NamedNet {
            name: name("multi", s),
            net: o.student.clone(),
        })
        .collect();
    let control = NamedNet {
        name: CONTROL.into(),
        net: control_run.net.clone(),
    };

    // every scenario: olla, teacher, all students, control; plus its own specialist
    let mut reports = Vec::new();
    let mut table2 = Vec::new();
    let mut control_rows = Vec::new();
    let mut baseline_rows = Vec::new();
    let mut js = Vec::new();
    for (j, sc) in suite.scenarios.iter().enumerate() {
        let mut specs = vec![PolicySpec::olla(), PolicySpec::greedy(&teacher.name, &teacher.net)];
        specs.push(PolicySpec::greedy(&specialists[j].name, &specialists[j].net));
        specs.extend(single_students.iter().map(|n| PolicySpec::greedy(&n.name, &n.net)));
        specs.extend(multi_students.iter().map(|n| PolicySpec::greedy(&n.name, &n.net)));
        specs.push(PolicySpec::greedy(&control.name, &control.net));
        let rs = specs
            .iter()
            .map(|p| evalkit::evaluate(p, sc, &cfg.eval, sc.eval_seed, exec))
            .collect::<Result<Vec<_>>>()?;
        let by_name = |n: &str| rs.iter().find(|r| r.policy == n).expect("evaluated above");
        let olla = by_name("olla");
        let t = by_name(TEACHER);
        let spec_r = by_name(&specialists[j].name);

        let mut row = evalkit::relative_gain(t, olla);
        row.mode = MODE_BASELINE.into();
        baseline_rows.push(row);
        for (students, reference, mode) in [
            (&single_students, t, MODE_SINGLE),
            (&multi_students, spec_r, MODE_MULTI),
        ] {
            for s in students {
                let sr = by_name(&s.name);
                let mut row = evalkit::relative_gain(sr, reference);
                row.mode = mode.into();
                table2.push(row);
                js.push(JsRow {
                    scenario: sc.name.clone(),
                    policy: s.name.clone(),
                    reference: reference.policy.clone(),
                    js: evalkit::js_divergence(&sr.action_pdf(), &reference.action_pdf())?,
                });
            }
        }
        let cr = by_name(&control.name);
        let mut row = evalkit::relative_gain(cr, t);
        row.mode = MODE_CONTROL.into();
        control_rows.push(row);
        js.push(JsRow {
            scenario: sc.name.clone(),
            policy: control.name.clone(),
            reference: TEACHER.into(),
            js: evalkit::js_divergence(&cr.action_pdf(), &t.action_pdf())?,
        });
        reports.extend(rs);
    }
    // table order: mode, student, scenario
    let mode_rank = |m: &str| usize::from(m != MODE_SINGLE);
    let student_rank = |n: &str| {
        cfg.students
            .iter()
            .position(|s| n.ends_with(&s.name))
            .unwrap_or(usize::MAX)
    };
    table2.sort_by_key(|r| (mode_rank(&r.mode), student_rank(&r.student)));
    clock.lap("evaluation");

    let mut artifacts = BTreeMap::new();
    for n in std::iter::once(&teacher)
        .chain(&specialists)
        .chain(&single_students)
        .chain(&multi_students)
        .chain(std::iter::once(&control))
    {
        artifacts.insert(format!("models/{}.ldnn", n.name), n.net.fingerprint());
    }
    artifacts.insert("datasets/single_policy.ldds".into(), single_data.fingerprint());
    artifacts.insert("datasets/multi_policy.ldds".into(), multi_data.fingerprint());

    let manifest = serde_json::json!({
        "seed": cfg.seed,
        "deterministic": cfg.deterministic,
        "config": cfg,
        "scenarios": suite.scenarios.iter().map(|s| serde_json::json!({
            "name": s.name,
            "eval_seed": s.eval_seed,
            "n_ues": s.ues.len(),
        })).collect::<Vec<_>>(),
        "control_eval_seeds_match_students": true,
        "dataset_rows": { "single_policy": single_data.len(), "multi_policy": multi_data.len() },
        "artifacts": artifacts,
        "teacher_env_steps": teacher_run.env_steps,
        "control_env_steps": control_run.env_steps,
        "specialist_env_steps": specialist_runs.iter().map(|r| r.env_steps).collect::<Vec<_>>(),
    });

    let outcome = ReproduceOutcome {
        teacher,
        specialists,
        single_students,
        multi_students,
        control,
        reports,
        table2,
        control_rows,
        baseline_rows,
        js,
        manifest,
        timings: clock.laps,
    };
    if let Some(dir) = out_dir {
        write_outputs(&outcome, dir, cfg.svg, &[&teacher_run, &control_run], &single, &multi)?;
    }
    Ok(outcome)
}

fn write_outputs(
    o: &ReproduceOutcome,
    dir: &Path,
    svg: bool,
    runs: &[&TrainOutcome],
    single: &[DistillOutcome],
    multi: &[DistillOutcome],
) -> Result<()> {
    let models = dir.join("models");
    let logs = dir.join("logs");
    fs::create_dir_all(&models)?;
    fs::create_dir_all(&logs)?;
    for n in std::iter::once(&o.teacher)
        .chain(&o.specialists)
        .chain(&o.single_students)
        .chain(&o.multi_students)
        .chain(std::iter::once(&o.control))
    {
        n.net.save(models.join(format!("{}.ldnn", n.name)))?;
    }
    rl::write_train_log(logs.join("teacher_train.csv"), &runs[0].log)?;
    rl::write_train_log(logs.join("control_train.csv"), &runs[1].log)?;
    for (students, outs) in [(&o.single_students, single), (&o.multi_students, multi)] {
        for (s, out) in students.iter().zip(outs) {
            distill::write_epoch_log(logs.join(format!("{}_distill.csv", s.name)), &out.log)?;
        }
    }
    evalkit::report_write(
        &ReportBundle {
            reports: &o.reports,
            comparisons: &o.table2,
            control: &o.control_rows,
            manifest: &o.manifest,
            svg,
        },
        dir,
    )?;
    write_rows(dir.join("baseline.csv"), &o.baseline_rows)?;
    write_rows(dir.join("js.csv"), &o.js)?;
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&o.timings)?)?;
    Ok(())
}

fn write_rows<T: Serialize>(path: PathBuf, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
