//! Benchmark scenarios, evaluation metrics, relative gain/loss, action and
//! throughput distributions, and report files.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::baseline::{OllaPolicy, OllaState};
use crate::env::{EpisodeRecord, FixedAction, LinkEnv, Policy, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linksim::{AntennaArray, LinkModel, RandomizationRanges, ScenarioConfig};
use crate::mcs::NUM_MCS;
use crate::net::DenseNet;
use crate::rl::GreedyPolicy;
use crate::rng::{derive_seed, rng_from_seed, stream};

pub const DEFAULT_EPISODES: usize = 5_000;

/// A named benchmark: a fixed list of UE links evaluated side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScenario {
    pub name: String,
    pub ues: Vec<ScenarioConfig>,
    /// Default evaluation seed.
    pub eval_seed: u64,
}

impl BenchmarkScenario {
    /// Ranges covering exactly the UE configurations of this benchmark; used
    /// to train a scenario-specific teacher.
    pub fn specialist_ranges(&self) -> RandomizationRanges {
        fn distinct<T: PartialEq + Copy>(xs: impl Iterator<Item = T>) -> Vec<T> {
            let mut out = Vec::new();
            for x in xs {
                if !out.contains(&x) {
                    out.push(x);
                }
            }
            out
        }
        let u = &self.ues;
        let n_indoor = u.iter().filter(|c| c.indoor).count();
        RandomizationRanges {
            tag: self.name.clone(),
            antenna_array: distinct(u.iter().map(|c| c.antenna_array)),
            cell_radius_m: distinct(u.iter().map(|c| c.cell_radius_m)),
            bandwidth_mhz: distinct(u.iter().map(|c| c.bandwidth_mhz)),
            n_subbands: distinct(u.iter().map(|c| c.n_subbands)),
            dl_tx_power_w: distinct(u.iter().map(|c| c.dl_tx_power_w)),
            ue_antennas: distinct(u.iter().map(|c| c.ue_antennas)),
            max_rank: distinct(u.iter().map(|c| c.max_rank)),
            max_dl_tx: distinct(u.iter().map(|c| c.max_dl_tx)),
            n_fb_ues: distinct(u.iter().map(|c| c.n_fb_ues)),
            n_mbb_ues: distinct(u.iter().map(|c| c.n_mbb_ues)),
            fb_speed_mps: distinct(u.iter().map(|c| c.fb_speed_mps)),
            mbb_speed_mps: distinct(u.iter().map(|c| c.mbb_speed_mps)),
            indoor_prob: vec![n_indoor as f64 / u.len().max(1) as f64],
            cqi_period_ttis: distinct(u.iter().map(|c| c.cqi_period_ttis)),
            cqi_delay_ttis: distinct(u.iter().map(|c| c.cqi_delay_ttis)),
            link: u.first().map(|c| c.link).unwrap_or_default(),
        }
    }
}

/// The three held-out benchmarks: SCSU, MIMO and mMIMO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSuite {
    pub scenarios: Vec<BenchmarkScenario>,
}

#[allow(clippy::too_many_arguments)]
fn bench_ue(
    name: &str,
    antenna_array: AntennaArray,
    radius: f64,
    bandwidth_mhz: f64,
    n_subbands: u32,
    power_w: f64,
    n_fb_ues: u32,
    speed: f64,
    indoor: bool,
    seed: u64,
) -> ScenarioConfig {
    let mut c = ScenarioConfig {
        tag: name.to_string(),
        antenna_array,
        cell_radius_m: radius,
        bandwidth_mhz,
        n_subbands,
        dl_tx_power_w: power_w,
        ue_antennas: 4,
        max_rank: 2,
        max_dl_tx: 5,
        n_fb_ues,
        n_mbb_ues: 0,
        fb_speed_mps: speed,
        mbb_speed_mps: 1.5,
        indoor_prob: if indoor { 1.0 } else { 0.0 },
        indoor,
        cqi_period_ttis: 5,
        cqi_delay_ttis: 2,
        link: LinkModel::default(),
        mean_sinr_db: 0.0,
        fading_rho: 0.0,
        fading_sigma_db: 0.0,
        seed,
    };
    c.rederive();
    c
}

const BENCH_RADII_M: [f64; 10] = [166.0, 250.0, 300.0, 450.0, 600.0, 750.0, 900.0, 1000.0, 1100.0, 1200.0];
const BENCH_SPEEDS_MPS: [f64; 3] = [3.0, 7.0, 20.0];

impl ScenarioSuite {
    pub fn standard() -> Self {
        let multi = |name: &str, arr: AntennaArray, bw: f64, sb: u32, p: f64, seed: u64| BenchmarkScenario {
            name: name.to_string(),
            ues: BENCH_RADII_M
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    bench_ue(
                        name,
                        arr,
                        r,
                        bw,
                        sb,
                        p,
                        10,
                        BENCH_SPEEDS_MPS[i % 3],
                        i % 3 == 1,
                        seed + i as u64,
                    )
                })
                .collect(),
            eval_seed: seed,
        };
        Self {
            scenarios: vec![
                BenchmarkScenario {
                    name: "SCSU".into(),
                    ues: vec![bench_ue(
                        "SCSU",
                        AntennaArray::Mimo4,
                        300.0,
                        40.0,
                        106,
                        40.0,
                        1,
                        3.0,
                        false,
                        0x5C50,
                    )],
                    eval_seed: 0x5C50,
                },
                multi("MIMO", AntennaArray::Mimo4, 40.0, 106, 40.0, 0x0313_0000),
                multi("mMIMO", AntennaArray::Mmimo64, 100.0, 273, 80.0, 0x3313_0000),
            ],
        }
    }

    pub fn get(&self, name: &str) -> Option<&BenchmarkScenario> {
        self.scenarios.iter().find(|s| s.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.scenarios.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn subset(&self, names: &[String]) -> Result<Self> {
        let scenarios = names
            .iter()
            .map(|n| {
                self.get(n)
                    .cloned()
                    .ok_or_else(|| Error::config(format!("unknown scenario {n:?}; known: {:?}", self.names())))
            })
            .collect::<Result<_>>()?;
        Ok(Self { scenarios })
    }
}

impl Default for ScenarioSuite {
    fn default() -> Self {
        Self::standard()
    }
}

/// What to evaluate. Each UE stream builds its own instance, so stateful
/// policies never share state across streams.
#[derive(Debug, Clone)]
pub enum PolicySpec<'a> {
    Greedy { name: String, net: &'a DenseNet },
    Olla { state: OllaState, link: LinkModel },
    Fixed(usize),
}

impl<'a> PolicySpec<'a> {
    pub fn greedy(name: impl Into<String>, net: &'a DenseNet) -> Self {
        Self::Greedy { name: name.into(), net }
    }

    pub fn olla() -> Self {
        Self::Olla {
            state: OllaState::default(),
            link: LinkModel::default(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Greedy { name, .. } => name.clone(),
            Self::Olla { .. } => "olla".into(),
            Self::Fixed(m) => format!("fixed{m}"),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Policy + 'a>> {
        Ok(match self {
            Self::Greedy { net, .. } => Box::new(GreedyPolicy { net }),
            Self::Olla { state, link } => Box::new(OllaPolicy::new(*state, *link)?),
            Self::Fixed(m) if *m < NUM_MCS => Box::new(FixedAction(*m)),
            Self::Fixed(m) => return Err(Error::domain(format!("fixed action {m} outside 0..{NUM_MCS}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: DEFAULT_EPISODES,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub n_episodes: usize,
    /// Mean per-episode throughput credit (SE per occupied TTI).
    pub mean_throughput: f64,
    /// Failed transmissions over all transmissions, retransmissions included.
    pub bler: f64,
    /// Mean undiscounted episode reward.
    pub mean_reward: f64,
    pub transmissions: u64,
    pub failures: u64,
    /// Per-episode throughput, UE streams concatenated in order.
    pub throughput_samples: Vec<f64>,
    /// Per-episode undiscounted reward, aligned with `throughput_samples`.
    pub reward_samples: Vec<f64>,
    pub action_counts: Vec<u64>,
}

impl MetricsReport {
    /// Normalized MCS histogram over all transmissions.
    pub fn action_pdf(&self) -> [f64; NUM_MCS] {
        let total: u64 = self.action_counts.iter().sum();
        let mut p = [0.0; NUM_MCS];
        if total > 0 {
            for (o, c) in p.iter_mut().zip(&self.action_counts) {
                *o = *c as f64 / total as f64;
            }
        }
        p
    }
}

struct StreamStats {
    throughput: Vec<f64>,
    reward: Vec<f64>,
    transmissions: u64,
    failures: u64,
    counts: [u64; NUM_MCS],
}

fn run_stream(
    policy: &PolicySpec<'_>,
    ue: &ScenarioConfig,
    episodes: usize,
    seed: u64,
    alpha: f64,
) -> Result<StreamStats> {
    let mut env = LinkEnv::new(ue.clone(), seed, alpha)?;
    let mut p = policy.build()?;
    let mut s = StreamStats {
        throughput: Vec::with_capacity(episodes),
        reward: Vec::with_capacity(episodes),
        transmissions: 0,
        failures: 0,
        counts: [0; NUM_MCS],
    };
    for _ in 0..episodes {
        let ep = env.run_episode(&mut p)?;
        s.throughput.push(ep.throughput());
        s.reward.push(ep.infos.iter().map(|i| i.reward).sum());
        for i in &ep.infos {
            s.transmissions += 1;
            s.failures += u64::from(!i.success);
            s.counts[i.action as usize] += 1;
        }
    }
    Ok(s)
}

/// Episodes for UE stream `k` when `n` are split over `ues` streams.
fn stream_share(n: usize, ues: usize, k: usize) -> usize {
    n / ues + usize::from(k < n % ues)
}

/// Runs `cfg.n_episodes` episodes of `policy` on `scenario`, split as evenly
/// as possible over its UE streams. Each UE stream is seeded from `seed`
/// alone, so every policy sees the same channel and decoding draws.
pub fn evaluate(
    policy: &PolicySpec<'_>,
    scenario: &BenchmarkScenario,
    cfg: &EvalConfig,
    seed: u64,
    exec: Exec,
) -> Result<MetricsReport> {
    if scenario.ues.is_empty() {
        return Err(Error::config(format!("scenario {} has no UEs", scenario.name)));
    }
    let base = derive_seed(seed, stream::EVAL);
    let n_ues = scenario.ues.len();
    let streams = exec.try_map_range(n_ues, |k| {
        run_stream(
            policy,
            &scenario.ues[k],
            stream_share(cfg.n_episodes, n_ues, k),
            derive_seed(base, k as u64),
            cfg.alpha,
        )
    })?;
    let mut counts = vec![0u64; NUM_MCS];
    let (mut tx, mut fails) = (0, 0);
    let mut throughput = Vec::with_capacity(cfg.n_episodes);
    let mut reward = Vec::with_capacity(cfg.n_episodes);
    for s in streams {
        tx += s.transmissions;
        fails += s.failures;
        counts.iter_mut().zip(s.counts).for_each(|(a, b)| *a += b);
        throughput.extend(s.throughput);
        reward.extend(s.reward);
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MetricsReport {
        scenario: scenario.name.clone(),
        policy: policy.name(),
        seed,
        n_episodes: cfg.n_episodes,
        mean_throughput: mean(&throughput),
        bler: if tx == 0 { 0.0 } else { fails as f64 / tx as f64 },
        mean_reward: mean(&reward),
        transmissions: tx,
        failures: fails,
        throughput_samples: throughput,
        reward_samples: reward,
        action_counts: counts,
    })
}

/// The first `n` episodes of UE stream 0, exactly as [`evaluate`] plays them.
pub fn trace_episodes(
    policy: &PolicySpec<'_>,
    scenario: &BenchmarkScenario,
    n: usize,
    seed: u64,
    alpha: f64,
) -> Result<Vec<EpisodeRecord>> {
    let ue = scenario
        .ues
        .first()
        .ok_or_else(|| Error::config(format!("scenario {} has no UEs", scenario.name)))?;
    let mut env = LinkEnv::new(ue.clone(), derive_seed(derive_seed(seed, stream::EVAL), 0), alpha)?;
    let mut p = policy.build()?;
    (0..n).map(|_| env.run_episode(&mut p)).collect()
}

/// Evaluates every scenario of the suite with its frozen seed.
pub fn evaluate_suite(
    policy: &PolicySpec<'_>,
    suite: &ScenarioSuite,
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<Vec<MetricsReport>> {
    suite
        .scenarios
        .iter()
        .map(|s| evaluate(policy, s, cfg, s.eval_seed, exec))
        .collect()
}

/// Relative gain/loss in percent of a student against a reference policy.
/// `None` marks an undefined value (zero reference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub mode: String,
    pub student: String,
    pub reference: String,
    pub scenario: String,
    pub delta_throughput: Option<f64>,
    pub delta_bler: Option<f64>,
    pub delta_reward: Option<f64>,
}

/// `100·(s − t)/|t|`, `None` when `t` is zero.
pub fn relative_change(student: f64, reference: f64) -> Option<f64> {
    if reference == 0.0 || !reference.is_finite() || !student.is_finite() {
        None
    } else {
        Some(100.0 * (student - reference) / reference.abs())
    }
}

pub fn relative_gain(student: &MetricsReport, reference: &MetricsReport) -> PolicyComparison {
    PolicyComparison {
        mode: String::new(),
        student: student.policy.clone(),
        reference: reference.policy.clone(),
        scenario: reference.scenario.clone(),
        delta_throughput: relative_change(student.mean_throughput, reference.mean_throughput),
        delta_bler: relative_change(student.bler, reference.bler),
        delta_reward: relative_change(student.mean_reward, reference.mean_reward),
    }
}

/// Normalized MCS histogram of greedy rollouts totalling `n_steps`
/// transmissions (the last episode is cut short).
pub fn action_pdf(
    policy: &PolicySpec<'_>,
    scenario: &BenchmarkScenario,
    n_steps: usize,
    seed: u64,
) -> Result<[f64; NUM_MCS]> {
    if n_steps == 0 {
        return Err(Error::domain("action_pdf needs n_steps > 0"));
    }
    if scenario.ues.is_empty() {
        return Err(Error::config(format!("scenario {} has no UEs", scenario.name)));
    }
    let base = derive_seed(seed, stream::EVAL);
    let n_ues = scenario.ues.len();
    let mut counts = [0u64; NUM_MCS];
    for k in 0..n_ues {
        let quota = stream_share(n_steps, n_ues, k);
        let mut env = LinkEnv::new(scenario.ues[k].clone(), derive_seed(base, k as u64), DEFAULT_ALPHA)?;
        let mut p = policy.build()?;
        let mut taken = 0;
        'episodes: while taken < quota {
            let mut state = env.reset();
            loop {
                let a = p.act(&state);
                let r = env.step(a)?;
                p.feedback(&r.info);
                counts[a] += 1;
                taken += 1;
                if taken == quota {
                    break 'episodes;
                }
                match r.next_state {
                    Some(s) => state = s,
                    None => break,
                }
            }
        }
    }
    let mut pdf = [0.0; NUM_MCS];
    for (o, c) in pdf.iter_mut().zip(counts) {
        *o = c as f64 / n_steps as f64;
    }
    Ok(pdf)
}

/// Jensen-Shannon divergence in nats; lies in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::domain(format!("length mismatch {} vs {}", p.len(), q.len())));
    }
    for d in [p, q] {
        let s: f64 = d.iter().sum();
        if d.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::domain("inputs must be probability vectors"));
        }
    }
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (2.0 * x / (x + y)).ln())
            .sum()
    };
    Ok((0.5 * (kl_to_mid(p, q) + kl_to_mid(q, p))).clamp(0.0, std::f64::consts::LN_2))
}

/// Empirical CDF as `(value, fraction ≤ value)` pairs, one per distinct value.
pub fn throughput_cdf(samples: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::domain("throughput_cdf needs at least one sample"));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    Ok(out)
}

/// Bootstrap standard error of the relative throughput change between two
/// reports evaluated on the same seeds. Episodes are resampled in pairs.
pub fn bootstrap_delta_throughput(
    student: &MetricsReport,
    reference: &MetricsReport,
    n_resamples: usize,
    seed: u64,
) -> Result<f64> {
    let (s, t) = (&student.throughput_samples, &reference.throughput_samples);
    if s.len() != t.len() || s.is_empty() {
        return Err(Error::domain("bootstrap needs paired, non-empty samples"));
    }
    if n_resamples < 2 {
        return Err(Error::domain("bootstrap needs at least 2 resamples"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, stream::EVAL));
    let n = s.len();
    let mut deltas = Vec::with_capacity(n_resamples);
    for _ in 0..n_resamples {
        let (mut ss, mut ts) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            ss += s[i];
            ts += t[i];
        }
        if let Some(d) = relative_change(ss, ts) {
            deltas.push(d);
        }
    }
    let m = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let var = deltas.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (deltas.len() - 1) as f64;
    Ok(var.sqrt())
}

/// Everything [`report_write`] emits.
#[derive(Debug, Clone)]
pub struct ReportBundle<'a> {
    pub reports: &'a [MetricsReport],
    /// Table rows: distillation mode × student × scenario.
    pub comparisons: &'a [PolicyComparison],
    /// Rows for the scratch-trained control, kept out of the table.
    pub control: &'a [PolicyComparison],
    pub manifest: &'a serde_json::Value,
    pub svg: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Table2Row {
    mode: String,
    student: String,
    reference: String,
    scenario: String,
    delta_t: Option<f64>,
    delta_bler: Option<f64>,
    delta_r: Option<f64>,
    control: bool,
}

impl Table2Row {
    fn new(c: &PolicyComparison, control: bool) -> Self {
        Self {
            mode: c.mode.clone(),
            student: c.student.clone(),
            reference: c.reference.clone(),
            scenario: c.scenario.clone(),
            delta_t: c.delta_throughput,
            delta_bler: c.delta_bler,
            delta_r: c.delta_reward,
            control,
        }
    }

    fn into_comparison(self) -> PolicyComparison {
        PolicyComparison {
            mode: self.mode,
            student: self.student,
            reference: self.reference,
            scenario: self.scenario,
            delta_throughput: self.delta_t,
            delta_bler: self.delta_bler,
            delta_reward: self.delta_r,
        }
    }
}

fn write_comparisons(path: &Path, rows: &[PolicyComparison], control: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in rows {
        w.serialize(Table2Row::new(c, control))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a comparison table written by [`report_write`].
pub fn read_table2(path: impl AsRef<Path>) -> Result<Vec<PolicyComparison>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Table2Row>()
        .map(|row| Ok(row?.into_comparison()))
        .collect()
}

/// Writes `table2.csv`, `control.csv`, `metrics.csv`, `cdf_<scenario>.csv`,
/// `pdf_<scenario>.csv`, `manifest.json` and, if requested, one SVG chart per
/// scenario and distribution.
pub fn report_write(bundle: &ReportBundle<'_>, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    write_comparisons(&dir.join("table2.csv"), bundle.comparisons, false)?;
    write_comparisons(&dir.join("control.csv"), bundle.control, true)?;

    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    w.write_record([
        "scenario",
        "policy",
        "seed",
        "n_episodes",
        "throughput",
        "bler",
        "reward",
    ])?;
    for r in bundle.reports {
        w.write_record([
            r.scenario.clone(),
            r.policy.clone(),
            r.seed.to_string(),
            r.n_episodes.to_string(),
            r.mean_throughput.to_string(),
            r.bler.to_string(),
            r.mean_reward.to_string(),
        ])?;
    }
    w.flush()?;

    let mut scenarios: Vec<&str> = Vec::new();
    for r in bundle.reports {
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
    }
    for sc in scenarios {
        let reports: Vec<&MetricsReport> = bundle.reports.iter().filter(|r| r.scenario == sc).collect();
        let mut cdfs = Vec::with_capacity(reports.len());
        let mut w = csv::Writer::from_path(dir.join(format!("cdf_{sc}.csv")))?;
        w.write_record(["policy", "throughput", "cdf"])?;
        for r in &reports {
            let cdf = if r.throughput_samples.is_empty() {
                Vec::new()
            } else {
                throughput_cdf(&r.throughput_samples)?
            };
            for (v, f) in &cdf {
                w.write_record([r.policy.clone(), v.to_string(), f.to_string()])?;
            }
            cdfs.push((r.policy.clone(), cdf));
        }
        w.flush()?;

        let pdfs: Vec<(String, [f64; NUM_MCS])> = reports.iter().map(|r| (r.policy.clone(), r.action_pdf())).collect();
        let mut w = csv::Writer::from_path(dir.join(format!("pdf_{sc}.csv")))?;
        let mut header = vec!["mcs".to_string()];
        header.extend(pdfs.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for m in 0..NUM_MCS {
            let mut row = vec![m.to_string()];
            row.extend(pdfs.iter().map(|(_, p)| p[m].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;

        if bundle.svg {
            fs::write(
                dir.join(format!("cdf_{sc}.svg")),
                svg::cdf_chart(&format!("{sc}: throughput CDF"), &cdfs),
            )?;
            fs::write(
                dir.join(format!("pdf_{sc}.svg")),
                svg::pdf_chart(&format!("{sc}: MCS PDF"), &pdfs),
            )?;
        }
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(bundle.manifest)?,
    )?;
    Ok(())
}

mod svg {
    use std::fmt::Write;

    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 8] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];

    fn frame(
        title: &str,
        x_label: &str,
        y_label: &str,
        x_max: f64,
        y_max: f64,
        body: &str,
        legend: &[String],
    ) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = write!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
            W / 2.0
        );
        let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD, PAD);
        let _ = write!(
            s,
            r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#
        );
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{x_label} (max {x_max:.3})</text>"#,
            W / 2.0,
            H - 15.0
        );
        let _ = write!(
            s,
            r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{y_label} (max {y_max:.3})</text>"#,
            H / 2.0,
            H / 2.0
        );
        s.push_str(body);
        for (i, name) in legend.iter().enumerate() {
            let y = PAD + 14.0 * i as f64;
            let c = COLORS[i % COLORS.len()];
            let _ = write!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/>"#,
                W - PAD - 110.0,
                y - 9.0
            );
            let _ = write!(s, r#"<text x="{}" y="{y}">{name}</text>"#, W - PAD - 95.0);
        }
        s.push_str("</svg>\n");
        s
    }

    fn sx(x: f64, max: f64) -> f64 {
        PAD + (W - 2.0 * PAD) * if max > 0.0 { x / max } else { 0.0 }
    }

    fn sy(y: f64, max: f64) -> f64 {
        H - PAD - (H - 2.0 * PAD) * if max > 0.0 { y / max } else { 0.0 }
    }

    pub(super) fn cdf_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
        let x_max = series
            .iter()
            .flat_map(|(_, c)| c.iter().map(|p| p.0))
            .fold(0.0f64, f64::max);
        let mut body = String::new();
        for (i, (_, cdf)) in series.iter().enumerate() {
            let mut d = format!("M{},{}", sx(0.0, x_max), sy(0.0, 1.0));
            let mut prev = 0.0;
            for (x, f) in cdf {
                let _ = write!(
                    d,
                    " L{:.1},{:.1} L{:.1},{:.1}",
                    sx(*x, x_max),
                    sy(prev, 1.0),
                    sx(*x, x_max),
                    sy(*f, 1.0)
                );
                prev = *f;
            }
            let _ = write!(
                body,
                r#"<path d="{d}" stroke="{}" fill="none" stroke-width="1.5"/>"#,
                COLORS[i % COLORS.len()]
            );
        }
        let legend: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
        frame(title, "throughput", "CDF", x_max, 1.0, &body, &legend)
    }

    pub(super) fn pdf_chart(title: &str, series: &[(String, [f64; super::NUM_MCS])]) -> String {
        let y_max = series
            .iter()
            .flat_map(|(_, p)| p.iter().copied())
            .fold(0.0f64, f64::max);
        let n = super::NUM_MCS as f64;
        let slot = (W - 2.0 * PAD) / n;
        let bar = slot / (series.len().max(1) as f64 + 0.5);
        let mut body = String::new();
        for (i, (_, p)) in series.iter().enumerate() {
            for (m, v) in p.iter().enumerate() {
                let x = PAD + slot * m as f64 + bar * i as f64;
                let top = sy(*v, y_max);
                let _ = write!(
                    body,
                    r#"<rect x="{x:.1}" y="{top:.1}" width="{bar:.1}" height="{:.1}" fill="{}"/>"#,
                    H - PAD - top,
                    COLORS[i % COLORS.len()]
                );
            }
        }
        let legend: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
        frame(title, "MCS index", "probability", n - 1.0, y_max, &body, &legend)
    }
}
