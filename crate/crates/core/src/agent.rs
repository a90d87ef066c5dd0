//! Deep Q-learning agents: experience replay, epsilon-greedy exploration,
//! and fixed-target training loops for the four network variants.
//!
//! One gradient step runs per environment step once the replay buffer
//! holds a full minibatch; the target network is refreshed from the online
//! network every `target_sync_steps` gradient steps. Epsilon decays
//! linearly per environment step. Invalid actions are masked both at
//! selection time and inside the bootstrap max/argmax.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::env::{
    mask_from_features, valid_action_mask, ActionIndex, EnvError, Episode, RoadConfig,
};
use crate::net::{AdamHyper, Architecture, Gradients, NetError, QNetwork};
use crate::rng::stream;
use crate::scenario::{generate_scenario, ScenarioError, ScenarioSpec};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("non-finite loss {loss} at episode {episode}, env step {env_step}")]
    NonFiniteLoss { episode: u64, env_step: u64, loss: f64 },
    #[error("invalid train config: {0}")]
    Config(String),
}

/// Q-learning flavor. Double variants decouple action selection (online
/// network) from action evaluation (target network); dueling variants use
/// the two-stream architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Dqn,
    Ddqn,
    Dueling,
    D3qn,
}

impl Variant {
    pub fn architecture(self) -> Architecture {
        match self {
            Variant::Dqn | Variant::Ddqn => Architecture::Standard,
            Variant::Dueling | Variant::D3qn => Architecture::Dueling,
        }
    }

    pub fn uses_double_estimation(self) -> bool {
        matches!(self, Variant::Ddqn | Variant::D3qn)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Dqn => "dqn",
            Variant::Ddqn => "ddqn",
            Variant::Dueling => "dueling",
            Variant::D3qn => "d3qn",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dqn" => Ok(Variant::Dqn),
            "ddqn" => Ok(Variant::Ddqn),
            "dueling" => Ok(Variant::Dueling),
            "d3qn" => Ok(Variant::D3qn),
            other => Err(format!("unknown variant `{other}` (expected dqn|ddqn|dueling|d3qn)")),
        }
    }
}

/// Training hyper-parameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: Variant,
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub target_sync_steps: u64,
    pub replay_capacity: usize,
    pub episodes: u64,
    pub seed: u64,
    /// Optional global L2 gradient clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ddqn,
            gamma: 0.99,
            lr: 0.0005,
            batch: 64,
            eps_start: 1.0,
            eps_end: 0.001,
            eps_decay_steps: 10_000,
            target_sync_steps: 100,
            replay_capacity: 100_000,
            episodes: 2000,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(AgentError::Config("gamma must be in (0, 1)".into()));
        }
        if self.eps_end > self.eps_start {
            return Err(AgentError::Config("eps_end must not exceed eps_start".into()));
        }
        if self.batch == 0 {
            return Err(AgentError::Config("batch must be >= 1".into()));
        }
        if self.eps_decay_steps == 0 {
            return Err(AgentError::Config("eps_decay_steps must be >= 1".into()));
        }
        if self.target_sync_steps == 0 {
            return Err(AgentError::Config("target_sync_steps must be >= 1".into()));
        }
        if self.replay_capacity < self.batch {
            return Err(AgentError::Config("replay_capacity must hold at least one batch".into()));
        }
        Ok(())
    }
}

/// One replay tuple. States are stored as flat feature vectors; the valid
/// action mask of either state can be recovered from the features.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: ActionIndex,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Bounded FIFO of experiences with uniform minibatch sampling.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    items: VecDeque<Experience>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    /// Appends an experience, evicting the oldest when full.
    pub fn push(&mut self, exp: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(exp);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, index: usize) -> &Experience {
        &self.items[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    /// Uniform sample of distinct indices (without replacement within one
    /// minibatch).
    pub fn sample_indices(&self, rng: &mut impl Rng, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(rng, self.items.len(), amount.min(self.items.len())).into_vec()
    }
}

/// Linear epsilon schedule: `eps_start` at step 0 down to `eps_end` at
/// `eps_decay_steps`, constant afterwards.
pub fn epsilon(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.eps_decay_steps {
        cfg.eps_end
    } else {
        let frac = step as f64 / cfg.eps_decay_steps as f64;
        cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac
    }
}

/// Masked argmax with lowest-index tie-breaking. Falls back to the always
/// valid no-vehicle action if the mask is empty.
pub fn greedy_action(q: &[f64], mask: &[bool]) -> ActionIndex {
    debug_assert_eq!(q.len(), mask.len());
    let mut best: Option<(usize, f64)> = None;
    for (j, (&qv, &ok)) in q.iter().zip(mask).enumerate() {
        if !ok {
            continue;
        }
        match best {
            Some((_, bq)) if qv <= bq => {}
            _ => best = Some((j, qv)),
        }
    }
    match best {
        Some((j, _)) => ActionIndex::from_output_index(j),
        None => ActionIndex::NONE,
    }
}

/// Epsilon-greedy action over valid actions. With probability `1 - eps`
/// the masked argmax; otherwise uniform over valid actions. At `eps <= 0`
/// no random draw is consumed, so the choice is a pure function of `q`
/// and `mask`.
pub fn select_action(q: &[f64], mask: &[bool], eps: f64, rng: &mut impl Rng) -> ActionIndex {
    if eps > 0.0 && rng.gen::<f64>() < eps {
        let valid: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(j, &ok)| ok.then_some(j))
            .collect();
        let j = valid[rng.gen_range(0..valid.len())];
        return ActionIndex::from_output_index(j);
    }
    greedy_action(q, mask)
}

/// TD targets for a minibatch.
///
/// Terminal transitions bootstrap nothing (`y = r`). Otherwise:
/// plain variants use `y = r + gamma * max_a' Q_target(s', a')`; double
/// variants select `a*` with the online network and evaluate it with the
/// target network. Both the max and the argmax range over the valid
/// actions of `s'`.
pub fn compute_targets(
    batch: &[&Experience],
    online: &QNetwork,
    target: &QNetwork,
    variant: Variant,
    gamma: f64,
    road: &RoadConfig,
) -> Result<Vec<f64>, NetError> {
    let mut targets = Vec::with_capacity(batch.len());
    for exp in batch {
        if exp.done {
            targets.push(exp.reward);
            continue;
        }
        let mask = mask_from_features(&exp.next_state, target.k, road);
        let q_target = target.forward(&exp.next_state)?;
        let bootstrap = if variant.uses_double_estimation() {
            let q_online = online.forward(&exp.next_state)?;
            let a_star = greedy_action(&q_online, &mask);
            q_target[a_star.output_index()]
        } else {
            let a_star = greedy_action(&q_target, &mask);
            q_target[a_star.output_index()]
        };
        targets.push(exp.reward + gamma * bootstrap);
    }
    Ok(targets)
}

/// Per-episode training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub ret: f64,
    pub steps: u64,
    pub collided: bool,
    pub established: bool,
    pub epsilon_at_end: f64,
    pub mean_loss: f64,
}

/// Training history, exportable as a comma-separated table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub episodes: Vec<EpisodeRecord>,
}

impl TrainReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("episode,return,steps,collided,established,epsilon_at_end,mean_loss\n");
        for r in &self.episodes {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.episode, r.ret, r.steps, r.collided, r.established, r.epsilon_at_end, r.mean_loss
            )
            .expect("string write");
        }
        out
    }

    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|r| r.ret).collect()
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub network: QNetwork,
    pub target_network: QNetwork,
    pub report: TrainReport,
    pub grad_steps: u64,
    pub target_syncs: u64,
    pub env_steps: u64,
}

/// Runs a full training loop: a fresh random scenario per episode,
/// epsilon-greedy rollouts feeding the replay buffer, one minibatch
/// gradient step per environment step after warm-up, and periodic target
/// synchronization. Fully reproducible from `cfg.seed`.
pub fn train(cfg: &TrainConfig, road: &RoadConfig, spec: &ScenarioSpec) -> Result<TrainOutput, AgentError> {
    cfg.validate()?;
    road.validate()?;

    // Independent sub-streams of the master seed, one per noise source.
    let mut init_rng = stream(cfg.seed, 0);
    let mut scenario_rng = stream(cfg.seed, 1);
    let mut noise_rng = stream(cfg.seed, 2);
    let mut policy_rng = stream(cfg.seed, 3);
    let mut replay_rng = stream(cfg.seed, 4);

    let mut online = QNetwork::new(cfg.variant.architecture(), road.pad_size, &mut init_rng);
    let mut target = online.clone();
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    let hyper = AdamHyper::with_lr(cfg.lr);

    let mut report = TrainReport::default();
    let mut env_steps: u64 = 0;
    let mut grad_steps: u64 = 0;
    let mut target_syncs: u64 = 0;

    for ep in 0..cfg.episodes {
        let initial = generate_scenario(spec, road, &mut scenario_rng)?;
        let mut episode = Episode::new(initial, road.clone());
        let mut ret = 0.0;
        let mut loss_sum = 0.0;
        let mut loss_count = 0u64;

        while !episode.is_done() {
            let features = episode.state().features();
            let mask = valid_action_mask(episode.state(), road);
            let q = online.forward(&features)?;
            let eps = epsilon(env_steps, cfg);
            let action = select_action(&q, &mask, eps, &mut policy_rng);
            let outcome = episode.step(action, &mut noise_rng)?;
            ret += outcome.reward;
            buffer.push(Experience {
                state: features,
                action,
                reward: outcome.reward,
                next_state: outcome.next_state.features(),
                done: outcome.done,
            });
            env_steps += 1;

            if buffer.len() >= cfg.batch {
                let indices = buffer.sample_indices(&mut replay_rng, cfg.batch);
                let batch: Vec<&Experience> = indices.iter().map(|&i| buffer.get(i)).collect();
                let targets = compute_targets(&batch, &online, &target, cfg.variant, cfg.gamma, road)?;
                let mut acc = Gradients::zeros_like(&online);
                let mut batch_loss = 0.0;
                for (exp, &y) in batch.iter().zip(&targets) {
                    let (loss, grads) = online.backward(&exp.state, exp.action.output_index(), y)?;
                    batch_loss += loss;
                    acc.add_assign(&grads);
                }
                let scale = 1.0 / cfg.batch as f64;
                acc.scale(scale);
                batch_loss *= scale;
                if !batch_loss.is_finite() {
                    return Err(AgentError::NonFiniteLoss { episode: ep, env_step: env_steps, loss: batch_loss });
                }
                if let Some(max_norm) = cfg.grad_clip {
                    acc.clip_l2_norm(max_norm);
                }
                online.adam_step(&acc, &hyper);
                grad_steps += 1;
                loss_sum += batch_loss;
                loss_count += 1;
                if grad_steps % cfg.target_sync_steps == 0 {
                    target = online.clone();
                    target_syncs += 1;
                }
            }
        }

        report.episodes.push(EpisodeRecord {
            episode: ep,
            ret,
            steps: episode.step_index(),
            collided: episode.collided(),
            established: episode.established(),
            epsilon_at_end: epsilon(env_steps, cfg),
            mean_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 },
        });
    }

    Ok(TrainOutput { network: online, target_network: target, report, grad_steps, target_syncs, env_steps })
}
