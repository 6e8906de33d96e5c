//! Episodic MDP over one UE link: each episode is the lifespan of a packet,
//! from its first transmission to delivery or drop after N attempts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linksim::{cqi_to_sinr_db, LinkSim, ScenarioConfig, TxOutcome};
use crate::mcs::{self, NUM_MCS};

pub const STATE_DIM: usize = 16;

/// Default retransmission penalty coefficient.
pub const DEFAULT_ALPHA: f64 = 0.5;

const ACK_EWMA_FACTOR: f64 = 0.1;
const SINR_SCALE_DB: f64 = 40.0;
const HARQ_HISTORY: usize = 4;

/// The agent's observation. Indices 0..=10 are dynamic, 11..=15 semi-static:
///
/// | idx | feature |
/// |-----|---------|
/// | 0 | CQI / 15 |
/// | 1 | CQI age / 10 TTIs |
/// | 2 | SINR implied by the CQI / 40 dB |
/// | 3..=6 | HARQ ACK bits for t−1 … t−4 |
/// | 7 | attempt index n / N |
/// | 8 | effective SINR of the packet so far / 40 dB (0 before the first attempt) |
/// | 9 | ACK moving average |
/// | 10 | last MCS / 27 |
/// | 11 | antenna array (0 = MIMO4, 1 = mMIMO64) |
/// | 12 | bandwidth / 100 MHz |
/// | 13 | DL power / 100 W |
/// | 14 | UE speed / 30 m/s |
/// | 15 | indoor flag |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub [f64; STATE_DIM]);

impl StateVector {
    pub const SINR_EST: usize = 2;
    pub const ATTEMPT: usize = 7;
    pub const FIRST_SEMI_STATIC: usize = 11;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// CQI-implied SINR estimate in dB, as the inner loop sees it.
    pub fn sinr_est_db(&self) -> f64 {
        self.0[Self::SINR_EST] * SINR_SCALE_DB
    }

    pub fn semi_static(&self) -> &[f64] {
        &self.0[Self::FIRST_SEMI_STATIC..]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub max_tx: u32,
}

impl RewardConfig {
    pub fn new(alpha: f64, max_tx: u32) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        if max_tx == 0 {
            return Err(Error::config("max_tx (N) must be >= 1"));
        }
        Ok(Self { alpha, max_tx })
    }

    /// `SE_m` on success, `−α·n` on a failure at 0-based attempt `n`.
    /// The first failure therefore costs nothing.
    pub fn reward(&self, action: usize, success: bool, attempt: u32) -> f64 {
        if success {
            mcs::spectral_efficiency(action)
        } else {
            -self.alpha * attempt as f64
        }
    }
}

/// One environment step as stored for learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateVector,
    pub action: u8,
    pub reward: f64,
    /// `None` marks a terminal step; bootstrapping must skip it.
    pub next_state: Option<StateVector>,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Delivered,
    Dropped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub transitions: Vec<Transition>,
    pub infos: Vec<StepInfo>,
    pub outcome: Outcome,
    pub attempts_used: u32,
    /// SE of the successful attempt, 0 for a drop.
    pub delivered_se: f64,
}

impl EpisodeRecord {
    /// Per-TTI throughput credit: SE of the delivering attempt divided by the
    /// TTIs the packet occupied; 0 for drops.
    pub fn throughput(&self) -> f64 {
        match self.outcome {
            Outcome::Delivered => self.delivered_se / self.attempts_used as f64,
            Outcome::Dropped => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub tti: u64,
    pub attempt: u32,
    pub action: u8,
    pub success: bool,
    pub effective_sinr_db: f64,
    pub instantaneous_sinr_db: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Option<StateVector>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Anything that picks an MCS from a state. Stateful policies (OLLA) also
/// receive the HARQ feedback of every transmission they chose.
pub trait Policy {
    fn act(&mut self, state: &StateVector) -> usize;

    fn feedback(&mut self, _info: &StepInfo) {}
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn act(&mut self, state: &StateVector) -> usize {
        (**self).act(state)
    }

    fn feedback(&mut self, info: &StepInfo) {
        (**self).feedback(info)
    }
}

/// Always transmits with the same MCS.
#[derive(Debug, Clone, Copy)]
pub struct FixedAction(pub usize);

impl Policy for FixedAction {
    fn act(&mut self, _state: &StateVector) -> usize {
        self.0
    }
}

/// Episodic link-adaptation environment wrapping one [`LinkSim`].
#[derive(Debug, Clone)]
pub struct LinkEnv {
    sim: LinkSim,
    reward: RewardConfig,
    in_episode: bool,
    attempt: u32,
    harq: [f64; HARQ_HISTORY],
    ack_ewma: f64,
    last_mcs: usize,
    semi_static: [f64; STATE_DIM - StateVector::FIRST_SEMI_STATIC],
    cqi_sinr: [f64; 16],
}

impl LinkEnv {
    pub fn new(cfg: ScenarioConfig, seed: u64, alpha: f64) -> Result<Self> {
        let reward = RewardConfig::new(alpha, cfg.max_dl_tx)?;
        let semi_static = [
            cfg.antenna_array.code(),
            cfg.bandwidth_mhz / 100.0,
            cfg.dl_tx_power_w / 100.0,
            cfg.fb_speed_mps / 30.0,
            if cfg.indoor { 1.0 } else { 0.0 },
        ];
        let mut cqi_sinr = [0.0; 16];
        for (k, s) in cqi_sinr.iter_mut().enumerate() {
            *s = cqi_to_sinr_db(k as u8, &cfg.link)?;
        }
        Ok(Self {
            sim: LinkSim::new(cfg, seed)?,
            reward,
            in_episode: false,
            attempt: 0,
            harq: [1.0; HARQ_HISTORY],
            ack_ewma: 0.9,
            last_mcs: 0,
            semi_static,
            cqi_sinr,
        })
    }

    pub fn sim(&self) -> &LinkSim {
        &self.sim
    }

    pub fn config(&self) -> &ScenarioConfig {
        self.sim.config()
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn in_episode(&self) -> bool {
        self.in_episode
    }

    /// Starts a new packet and returns the first observation.
    pub fn reset(&mut self) -> StateVector {
        self.sim.begin_packet();
        self.in_episode = true;
        self.attempt = 0;
        self.observe()
    }

    pub fn observe(&self) -> StateVector {
        let st = self.sim.state();
        let mut s = [0.0; STATE_DIM];
        s[0] = st.last_cqi as f64 / 15.0;
        s[1] = st.cqi_age_ttis as f64 / 10.0;
        s[2] = self.cqi_sinr[st.last_cqi as usize] / SINR_SCALE_DB;
        s[3..3 + HARQ_HISTORY].copy_from_slice(&self.harq);
        s[7] = self.attempt as f64 / self.reward.max_tx as f64;
        s[8] = self.sim.packet_effective_sinr_db().unwrap_or(0.0) / SINR_SCALE_DB;
        s[9] = self.ack_ewma;
        s[10] = self.last_mcs as f64 / (NUM_MCS - 1) as f64;
        s[StateVector::FIRST_SEMI_STATIC..].copy_from_slice(&self.semi_static);
        StateVector(s)
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if action >= NUM_MCS {
            return Err(Error::domain(format!("action {action} outside 0..{NUM_MCS}")));
        }
        if !self.in_episode {
            return Err(Error::state("step called outside an episode; call reset first"));
        }
        let TxOutcome {
            success,
            effective_sinr_db,
            instantaneous_sinr_db,
            attempt,
            packet_done,
        } = self.sim.transmit(action)?;
        let reward = self.reward.reward(action, success, attempt);

        let ack = if success { 1.0 } else { 0.0 };
        self.harq.rotate_right(1);
        self.harq[0] = ack;
        self.ack_ewma = (1.0 - ACK_EWMA_FACTOR) * self.ack_ewma + ACK_EWMA_FACTOR * ack;
        self.last_mcs = action;
        self.attempt = attempt + 1;

        let next_state = if packet_done {
            self.in_episode = false;
            None
        } else {
            Some(self.observe())
        };
        Ok(StepResult {
            next_state,
            reward,
            done: packet_done,
            info: StepInfo {
                tti: self.sim.state().tti,
                attempt,
                action: action as u8,
                success,
                effective_sinr_db,
                instantaneous_sinr_db,
                reward,
            },
        })
    }

    /// Runs one full episode under `policy`.
    pub fn run_episode<P: Policy + ?Sized>(&mut self, policy: &mut P) -> Result<EpisodeRecord> {
        let mut state = self.reset();
        let mut transitions = Vec::with_capacity(self.reward.max_tx as usize);
        let mut infos = Vec::with_capacity(self.reward.max_tx as usize);
        loop {
            let action = policy.act(&state);
            let r = self.step(action)?;
            policy.feedback(&r.info);
            transitions.push(Transition {
                state,
                action: action as u8,
                reward: r.reward,
                next_state: r.next_state,
                done: r.done,
            });
            infos.push(r.info);
            match r.next_state {
                Some(s) => state = s,
                None => break,
            }
        }
        let last = infos.last().expect("episode has at least one step");
        let (outcome, delivered_se) = if last.success {
            (Outcome::Delivered, mcs::spectral_efficiency(last.action as usize))
        } else {
            (Outcome::Dropped, 0.0)
        };
        Ok(EpisodeRecord {
            attempts_used: infos.len() as u32,
            transitions,
            infos,
            outcome,
            delivered_se,
        })
    }
}

/// `Σ γ^n r_n` over the episode's steps.
pub fn episode_return(ep: &EpisodeRecord, gamma: f64) -> f64 {
    let mut g = 1.0;
    let mut total = 0.0;
    for t in &ep.transitions {
        total += g * t.reward;
        g *= gamma;
    }
    total
}

/// Writes episode traces as `tti,n,action,sinr_eff,success,reward`.
pub fn write_trace<W: Write>(w: W, episodes: &[EpisodeRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["tti", "n", "action", "sinr_eff", "success", "reward"])?;
    for ep in episodes {
        for i in &ep.infos {
            wr.write_record([
                i.tti.to_string(),
                i.attempt.to_string(),
                i.action.to_string(),
                format!("{:.4}", i.effective_sinr_db),
                (i.success as u8).to_string(),
                format!("{:.6}", i.reward),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linksim::{sample_scenario, RandomizationRanges};

    fn cfg() -> ScenarioConfig {
        sample_scenario(&RandomizationRanges::standard(), 21).unwrap()
    }

    fn env_with(mean: f64, alpha: f64) -> LinkEnv {
        LinkEnv::new(cfg().with_channel(mean, 1.0, 0.5), 8, alpha).unwrap()
    }

    #[test]
    fn reset_starts_at_attempt_zero() {
        let mut env = LinkEnv::new(cfg(), 1, DEFAULT_ALPHA).unwrap();
        let s = env.reset();
        assert_eq!(s.0[StateVector::ATTEMPT], 0.0);
        assert_eq!(s.0[8], 0.0);
        assert!(s.is_finite());
    }

    #[test]
    fn semi_static_features_stay_fixed() {
        let c = cfg();
        let mut env = LinkEnv::new(c.clone(), 1, DEFAULT_ALPHA).unwrap();
        let first = env.reset().semi_static().to_vec();
        assert_eq!(first[0], c.antenna_array.code());
        assert_eq!(first[1], c.bandwidth_mhz / 100.0);
        let mut p = FixedAction(14);
        for _ in 0..200 {
            let ep = env.run_episode(&mut p).unwrap();
            for t in &ep.transitions {
                assert_eq!(t.state.semi_static(), first.as_slice());
            }
        }
    }

    #[test]
    fn identical_seed_gives_identical_reset_state() {
        let mut a = LinkEnv::new(cfg(), 3, DEFAULT_ALPHA).unwrap();
        let mut b = LinkEnv::new(cfg(), 3, DEFAULT_ALPHA).unwrap();
        assert_eq!(a.reset(), b.reset());
    }

    #[test]
    fn reward_on_success_is_se_of_action() {
        let mut env = env_with(200.0, DEFAULT_ALPHA);
        env.reset();
        let r = env.step(10).unwrap();
        assert!(r.done && r.info.success);
        assert_eq!(r.reward, 2.5703);
        assert!(r.next_state.is_none());
    }

    #[test]
    fn failure_penalties_follow_attempt_index() {
        let mut env = env_with(-200.0, 0.5);
        env.reset();
        let rewards: Vec<f64> = (0..5).map(|_| env.step(3).unwrap().reward).collect();
        assert_eq!(rewards, vec![0.0, -0.5, -1.0, -1.5, -2.0]);
        assert!(matches!(env.step(3), Err(Error::State(_))));
    }

    #[test]
    fn out_of_range_action_is_a_domain_error() {
        let mut env = env_with(10.0, 0.5);
        env.reset();
        assert!(matches!(env.step(28), Err(Error::Domain(_))));
    }

    #[test]
    fn step_before_reset_is_a_state_error() {
        let mut env = env_with(10.0, 0.5);
        assert!(matches!(env.step(0), Err(Error::State(_))));
    }

    #[test]
    fn episode_return_examples() {
        let mut env = env_with(200.0, 0.5);
        let ep = env.run_episode(&mut FixedAction(7)).unwrap();
        assert_eq!(episode_return(&ep, 1.0), mcs::spectral_efficiency(7));

        let mut env = env_with(-200.0, 0.5);
        let ep = env.run_episode(&mut FixedAction(7)).unwrap();
        assert_eq!(ep.outcome, Outcome::Dropped);
        assert_eq!(episode_return(&ep, 1.0), -5.0);
        assert_eq!(episode_return(&ep, 0.0), ep.transitions[0].reward);
        assert_eq!(ep.throughput(), 0.0);
    }

    #[test]
    fn delivered_iff_last_step_succeeded() {
        let mut env = LinkEnv::new(cfg(), 5, DEFAULT_ALPHA).unwrap();
        let mut p = FixedAction(16);
        for _ in 0..2000 {
            let ep = env.run_episode(&mut p).unwrap();
            assert!(ep.attempts_used >= 1 && ep.attempts_used <= 5);
            assert_eq!(ep.outcome == Outcome::Delivered, ep.infos.last().unwrap().success);
            assert!(ep.transitions.last().unwrap().done);
        }
    }

    #[test]
    fn trace_csv_layout() {
        let mut env = env_with(-200.0, 0.5);
        let ep = env.run_episode(&mut FixedAction(2)).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &[ep]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("tti,n,action,sinr_eff,success,reward"));
        assert_eq!(lines.count(), 5);
    }
}
