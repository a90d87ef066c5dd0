//! Desk-scale laboratory for dynamic queue-jump-lane (DQJL) coordination.
//!
//! A centralized controller watches a two-lane road segment and instructs
//! connected non-emergency vehicles, one per step, to yield so that an
//! emergency vehicle can pass on a cleared lane. The crate provides:
//!
//! - [`env`]: the stochastic road MDP (padded state matrix, yielding
//!   kinematics with random reaction times and braking noise, collision
//!   detection, reward, termination),
//! - [`scenario`]: random collision-free initial road environments,
//! - [`net`]: a from-scratch MLP Q-function (standard and dueling heads)
//!   with exact backpropagation and Adam,
//! - [`agent`]: experience replay, epsilon-greedy exploration, and
//!   fixed-target training loops for DQN, DDQN, Dueling DQN, and 3DQN,
//! - [`rollout`]: greedy rollouts producing yielding time indicators,
//!   EMV passing-time simulation against a siren-style benchmark, and
//!   density/speed sensitivity sweeps,
//! - [`chart`]: dependency-free SVG line charts for reports.

pub mod agent;
pub mod chart;
pub mod env;
pub mod net;
pub mod rng;
pub mod rollout;
pub mod scenario;

pub use agent::{train, ReplayBuffer, TrainConfig, TrainOutput, TrainReport, Variant};
pub use env::{
    pad_state, valid_action_mask, ActionIndex, Episode, EnvError, Lane, PaddedState, RoadConfig,
    StepOutcome, VehicleState,
};
pub use net::{Architecture, QNetwork};
pub use rollout::{
    generate_indicator, run_sweep, simulate_emv_passing, IndicatorResult, PassingTimeResult,
    Policy, PolicyKind, SweepConfig, SweepTable,
};
pub use scenario::{generate_scenario, ScenarioSpec, VehicleCount};
