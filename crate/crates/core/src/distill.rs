//! Offline policy distillation: build `(state, teacher Q-vector)` datasets,
//! either from fresh greedy rollouts or from the teacher's replay memory,
//! merge datasets from several teachers, and fit a student by minimizing the
//! temperature-scaled KL divergence to the teacher's action distribution.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{LinkEnv, StateVector, STATE_DIM};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linksim::{sample_scenario, RandomizationRanges};
use crate::mcs::NUM_MCS;
use crate::net::{self, argmax, AdamConfig, ByteReader, DenseNet, OptimState};
use crate::rl::ReplayBuffer;
use crate::rng::{derive_seed, rng_from_seed, stream};

/// States recorded per randomized scenario by [`gen_dataset`].
pub const SAMPLES_PER_SCENARIO: usize = 2_000;

const DATASET_MAGIC: &[u8; 4] = b"LDDS";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillSample {
    pub state: StateVector,
    /// Unnormalized teacher Q-values.
    pub q_teacher: [f64; NUM_MCS],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    FreshSim,
    ReplayReuse,
    /// Shuffled union of other datasets.
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub teacher_ids: Vec<String>,
    pub scenario_tags: Vec<String>,
    pub generator: Generator,
    pub seed: u64,
    pub count: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Samples plus the metadata fixed at creation.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillDataset {
    samples: Vec<DistillSample>,
    meta: DatasetMeta,
}

/// Short identifier for a teacher: the first 16 hex digits of its fingerprint.
pub fn teacher_id(teacher: &DenseNet) -> String {
    teacher.fingerprint()[..16].to_string()
}

impl DistillDataset {
    fn new(
        samples: Vec<DistillSample>,
        teacher_ids: Vec<String>,
        scenario_tags: Vec<String>,
        generator: Generator,
        seed: u64,
    ) -> Self {
        let meta = DatasetMeta {
            teacher_ids,
            scenario_tags,
            generator,
            seed,
            count: samples.len(),
            state_dim: STATE_DIM,
            action_dim: NUM_MCS,
        };
        Self { samples, meta }
    }

    pub fn samples(&self) -> &[DistillSample] {
        &self.samples
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Dataset file: `b"LDDS"`, u32 version, u32 state dim, u32 action dim,
    /// u64 count, u32 metadata length, metadata JSON, then `count` rows of
    /// 16 state f64 followed by 28 Q f64. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata is plain data");
        let mut out = Vec::with_capacity(24 + meta.len() + self.len() * 8 * (STATE_DIM + NUM_MCS));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.state_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.meta.action_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for s in &self.samples {
            for v in s.state.0.iter().chain(&s.q_teacher) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(r.error_at(0, "bad magic, not a distillation dataset"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(r.error_at(4, format!("unsupported dataset version {version}")));
        }
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        if state_dim != STATE_DIM || action_dim != NUM_MCS {
            return Err(r.error_at(
                8,
                format!("dims {state_dim}×{action_dim}, expected {STATE_DIM}×{NUM_MCS}"),
            ));
        }
        let count = r.u64()? as usize;
        let meta_len = r.u32()? as usize;
        let meta_at = r.pos() as u64;
        let meta: DatasetMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| r.error_at(meta_at, format!("metadata JSON: {e}")))?;
        if meta.count != count {
            return Err(r.error_at(meta_at, format!("metadata count {} != header {count}", meta.count)));
        }
        let row = 8 * (STATE_DIM + NUM_MCS);
        if r.remaining() != count * row {
            return Err(r.error_at(
                r.pos() as u64,
                format!("expected {} payload bytes, found {}", count * row, r.remaining()),
            ));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let mut state = [0.0; STATE_DIM];
            let mut q = [0.0; NUM_MCS];
            for v in state.iter_mut().chain(q.iter_mut()) {
                *v = r.f64()?;
            }
            samples.push(DistillSample {
                state: StateVector(state),
                q_teacher: q,
            });
        }
        Ok(Self { samples, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn fingerprint(&self) -> String {
        net::sha256_hex(&self.to_bytes())
    }
}

/// Runs the teacher greedily over freshly randomized scenarios, recording
/// `(state, Q_teacher(state))` at every step, [`SAMPLES_PER_SCENARIO`] per
/// scenario, until `n_samples` rows exist. Scenarios run in parallel; the
/// result does not depend on the execution mode.
pub fn gen_dataset(
    teacher: &DenseNet,
    ranges: &RandomizationRanges,
    n_samples: usize,
    seed: u64,
    alpha: f64,
    exec: Exec,
) -> Result<DistillDataset> {
    ranges.validate()?;
    let n_scenarios = n_samples.div_ceil(SAMPLES_PER_SCENARIO);
    let base = derive_seed(seed, stream::DATASET);
    let chunks = exec.try_map_range(n_scenarios, |k| {
        let quota = SAMPLES_PER_SCENARIO.min(n_samples - k * SAMPLES_PER_SCENARIO);
        let sc_seed = derive_seed(base, k as u64);
        let cfg = sample_scenario(ranges, sc_seed)?;
        let mut env = LinkEnv::new(cfg, derive_seed(sc_seed, stream::EPISODE_ENV), alpha)?;
        let mut out = Vec::with_capacity(quota);
        while out.len() < quota {
            let mut state = env.reset();
            loop {
                let q = teacher.forward(state.as_slice());
                out.push(DistillSample { state, q_teacher: q });
                if out.len() == quota {
                    break;
                }
                match env.step(argmax(&q))?.next_state {
                    Some(s) => state = s,
                    None => break,
                }
            }
        }
        Ok::<_, Error>(out)
    })?;
    Ok(DistillDataset::new(
        chunks.into_iter().flatten().collect(),
        vec![teacher_id(teacher)],
        vec![ranges.tag.clone()],
        Generator::FreshSim,
        seed,
    ))
}

/// Relabels every state held in the teacher's replay memory with the final
/// teacher's Q-values. One row per stored transition, oldest first.
pub fn from_replay(teacher: &DenseNet, replay: &ReplayBuffer, scenario_tag: &str) -> Result<DistillDataset> {
    if replay.is_empty() {
        return Err(Error::config("replay memory is empty"));
    }
    let states: Vec<StateVector> = replay.iter().map(|t| t.state).collect();
    let mut samples = Vec::with_capacity(states.len());
    for chunk in states.chunks(4_096) {
        let q = teacher.forward_batch(net::stack_rows(chunk.iter().map(|s| s.as_slice()), STATE_DIM).view());
        for (s, row) in chunk.iter().zip(q.outer_iter()) {
            let mut qt = [0.0; NUM_MCS];
            qt.iter_mut().zip(row.iter()).for_each(|(a, b)| *a = *b);
            samples.push(DistillSample {
                state: *s,
                q_teacher: qt,
            });
        }
    }
    Ok(DistillDataset::new(
        samples,
        vec![teacher_id(teacher)],
        vec![scenario_tag.to_string()],
        Generator::ReplayReuse,
        0,
    ))
}

/// Concatenates the datasets and applies one seeded shuffle. Metadata keeps
/// every source teacher and scenario tag, in input order, deduplicated.
pub fn aggregate_shuffle(datasets: &[DistillDataset], seed: u64) -> Result<DistillDataset> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::config("aggregate_shuffle needs at least one dataset"))?;
    for d in datasets {
        if d.meta.state_dim != first.meta.state_dim || d.meta.action_dim != first.meta.action_dim {
            return Err(Error::config(format!(
                "dimension mismatch: {}×{} vs {}×{}",
                d.meta.state_dim, d.meta.action_dim, first.meta.state_dim, first.meta.action_dim
            )));
        }
    }
    let mut samples: Vec<DistillSample> = datasets.iter().flat_map(|d| d.samples.iter().copied()).collect();
    samples.shuffle(&mut rng_from_seed(derive_seed(seed, stream::SHUFFLE)));
    let mut teachers = Vec::new();
    let mut tags = Vec::new();
    for d in datasets {
        for t in &d.meta.teacher_ids {
            if !teachers.contains(t) {
                teachers.push(t.clone());
            }
        }
        for t in &d.meta.scenario_tags {
            if !tags.contains(t) {
                tags.push(t.clone());
            }
        }
    }
    Ok(DistillDataset::new(
        samples,
        teachers,
        tags,
        Generator::Aggregated,
        seed,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub dims: Vec<usize>,
    pub tau: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction held out for best-checkpoint selection.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            dims: net::mlp_dims(3, 32),
            tau: net::DEFAULT_TAU,
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 512,
            validation_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_kl: f64,
    pub val_kl: f64,
    pub val_agreement: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: DenseNet,
    pub log: Vec<EpochLog>,
    /// 1-based epoch of the returned parameters; 0 when no epoch ran.
    pub best_epoch: usize,
    pub train_size: usize,
    pub validation_size: usize,
}

fn batch_matrices(samples: &[DistillSample], idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
    let x = net::stack_rows(idx.iter().map(|&i| samples[i].state.as_slice()), STATE_DIM);
    let t = net::stack_rows(idx.iter().map(|&i| samples[i].q_teacher.as_slice()), NUM_MCS);
    (x, t)
}

/// Mean KL and argmax agreement of `student` against the teacher labels.
pub fn score(student: &DenseNet, samples: &[DistillSample], idx: &[usize], tau: f64) -> Result<(f64, f64)> {
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut kl = 0.0;
    let mut agree = 0usize;
    for chunk in idx.chunks(4_096) {
        let (x, t) = batch_matrices(samples, chunk);
        let q = student.forward_batch(x.view());
        kl += net::kl_loss_batch(t.view(), q.view(), tau)?.0;
        for (qs, qt) in q.outer_iter().zip(t.outer_iter()) {
            if argmax(qs.as_slice().unwrap()) == argmax(qt.as_slice().unwrap()) {
                agree += 1;
            }
        }
    }
    Ok((kl / idx.len() as f64, agree as f64 / idx.len() as f64))
}

/// Argmax agreement between a student and a dataset's teacher labels.
pub fn agreement(student: &DenseNet, dataset: &DistillDataset) -> Result<f64> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    Ok(score(student, &dataset.samples, &idx, 1.0)?.1)
}

/// Trains a fresh student on `dataset` with minibatch Adam on the mean KL
/// loss and returns the parameters with the lowest held-out KL.
pub fn distill(dataset: &DistillDataset, cfg: &DistillConfig) -> Result<DistillOutcome> {
    if dataset.is_empty() {
        return Err(Error::config("distillation dataset is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be > 0"));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::config("validation_fraction must lie in [0, 1)"));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::domain(format!("tau must be > 0, got {}", cfg.tau)));
    }
    let mut student = DenseNet::init(&cfg.dims, cfg.seed)?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, stream::SHUFFLE));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64 * cfg.validation_fraction).ceil() as usize).min(dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut optim = OptimState::new(&student, AdamConfig::with_lr(cfg.learning_rate));
    let mut best = student.clone();
    let mut best_kl = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let samples = &dataset.samples;
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let (x, t) = batch_matrices(samples, chunk);
            let loss = net::train_step(
                &mut student,
                x.view(),
                |q| net::kl_loss_batch(t.view(), q.view(), cfg.tau).expect("tau validated above"),
                &mut optim,
            )
            .map_err(|e| match e {
                Error::Training { step, reason } => Error::Training {
                    step,
                    reason: format!("epoch {epoch}: {reason}"),
                },
                other => other,
            })?;
            sum += loss * chunk.len() as f64;
        }
        let train_kl = sum / train_idx.len() as f64;
        let (val_kl, val_agreement) = if val_idx.is_empty() {
            (train_kl, f64::NAN)
        } else {
            score(&student, samples, &val_idx, cfg.tau)?
        };
        let improved = val_kl < best_kl;
        if improved {
            best_kl = val_kl;
            best = student.clone();
            best_epoch = epoch;
        }
        log::debug!("epoch {epoch} train KL {train_kl:.5} val KL {val_kl:.5} agree {val_agreement:.4}");
        log.push(EpochLog {
            epoch,
            train_kl,
            val_kl,
            val_agreement,
            best: improved,
        });
    }
    Ok(DistillOutcome {
        student: if cfg.epochs == 0 { student } else { best },
        log,
        best_epoch,
        train_size: train_idx.len(),
        validation_size: val_idx.len(),
    })
}

pub fn write_epoch_log(path: impl AsRef<Path>, rows: &[EpochLog]) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Transition;

    fn teacher() -> DenseNet {
        DenseNet::init(&net::mlp_dims(2, 16), 42).unwrap()
    }

    #[test]
    fn empty_request_gives_empty_dataset() {
        let d = gen_dataset(
            &teacher(),
            &RandomizationRanges::standard(),
            0,
            1,
            0.5,
            Exec::Sequential,
        )
        .unwrap();
        assert!(d.is_empty());
        assert_eq!(d.meta().count, 0);
        assert_eq!(d.meta().generator, Generator::FreshSim);
        assert_eq!(d.meta().teacher_ids, vec![teacher_id(&teacher())]);
    }

    #[test]
    fn rows_hold_teacher_q_of_their_state() {
        let t = teacher();
        let d = gen_dataset(&t, &RandomizationRanges::standard(), 5_000, 3, 0.5, Exec::Parallel).unwrap();
        assert_eq!(d.len(), 5_000);
        for s in d.samples().iter().step_by(5) {
            assert_eq!(s.q_teacher, t.forward(s.state.as_slice()));
        }
    }

    #[test]
    fn generation_is_deterministic_across_modes() {
        let t = teacher();
        let r = RandomizationRanges::standard();
        let a = gen_dataset(&t, &r, 4_500, 9, 0.5, Exec::Sequential).unwrap();
        let b = gen_dataset(&t, &r, 4_500, 9, 0.5, Exec::Parallel).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn file_round_trip() {
        let d = gen_dataset(
            &teacher(),
            &RandomizationRanges::standard(),
            300,
            2,
            0.5,
            Exec::Parallel,
        )
        .unwrap();
        let bytes = d.to_bytes();
        let back = DistillDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[8] = 17;
        assert!(matches!(
            DistillDataset::from_bytes(&bad),
            Err(Error::Format { offset: 8, .. })
        ));
        assert!(DistillDataset::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    fn replay_of(k: usize) -> ReplayBuffer {
        let mut rb = ReplayBuffer::new(k).unwrap();
        for i in 0..k {
            rb.push(Transition {
                state: StateVector([i as f64 / k as f64; STATE_DIM]),
                action: (i % 28) as u8,
                reward: 1.0,
                next_state: None,
                done: true,
            });
        }
        rb
    }

    #[test]
    fn replay_reuse_relabels_with_final_teacher() {
        let rb = replay_of(50);
        let mut t = teacher();
        let d = from_replay(&t, &rb, "randomized").unwrap();
        assert_eq!(d.len(), 50);
        assert_eq!(d.meta().generator, Generator::ReplayReuse);
        assert_eq!(from_replay(&t, &rb, "randomized").unwrap(), d);
        t.layers_mut()[0].weights *= 1.5;
        let d2 = from_replay(&t, &rb, "randomized").unwrap();
        assert_ne!(d2.samples()[10].q_teacher, d.samples()[10].q_teacher);
        let direct = t.forward(d2.samples()[10].state.as_slice());
        for (a, b) in d2.samples()[10].q_teacher.iter().zip(direct) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(from_replay(&t, &ReplayBuffer::new(4).unwrap(), "x").is_err());
    }

    fn sample_key(s: &DistillSample) -> Vec<u64> {
        s.state.0.iter().chain(&s.q_teacher).map(|v| v.to_bits()).collect()
    }

    #[test]
    fn aggregation_preserves_the_multiset() {
        let t = teacher();
        let parts: Vec<DistillDataset> = [100, 200, 300]
            .iter()
            .enumerate()
            .map(|(i, n)| from_replay(&t, &replay_of(*n), &format!("tag{i}")).unwrap())
            .collect();
        let agg = aggregate_shuffle(&parts, 5).unwrap();
        assert_eq!(agg.len(), 600);
        assert_eq!(agg.meta().scenario_tags, vec!["tag0", "tag1", "tag2"]);
        let mut before: Vec<_> = parts.iter().flat_map(|d| d.samples().iter().map(sample_key)).collect();
        let mut after: Vec<_> = agg.samples().iter().map(sample_key).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);

        let single = aggregate_shuffle(&parts[1..2], 5).unwrap();
        assert_ne!(single.samples(), parts[1].samples());
        assert!(aggregate_shuffle(&[], 0).is_err());
    }

    #[test]
    fn aggregation_rejects_dimension_mismatch() {
        let t = teacher();
        let a = from_replay(&t, &replay_of(10), "a").unwrap();
        let mut b = a.clone();
        b.meta.action_dim = 29;
        assert!(matches!(aggregate_shuffle(&[a, b], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_return_initial_student() {
        let d = from_replay(&teacher(), &replay_of(64), "x").unwrap();
        let cfg = DistillConfig {
            epochs: 0,
            seed: 3,
            ..DistillConfig::default()
        };
        let out = distill(&d, &cfg).unwrap();
        assert_eq!(out.student, DenseNet::init(&cfg.dims, 3).unwrap());
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn distillation_leaves_teacher_untouched_and_best_kl_decreases() {
        let t = teacher();
        let before = t.fingerprint();
        let d = gen_dataset(&t, &RandomizationRanges::standard(), 4_000, 1, 0.5, Exec::Parallel).unwrap();
        let out = distill(
            &d,
            &DistillConfig {
                epochs: 6,
                tau: 0.1,
                ..DistillConfig::default()
            },
        )
        .unwrap();
        assert_eq!(t.fingerprint(), before);
        let bests: Vec<f64> = out.log.iter().filter(|e| e.best).map(|e| e.val_kl).collect();
        assert!(!bests.is_empty());
        assert!(bests.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out.validation_size, 200);
    }
}
