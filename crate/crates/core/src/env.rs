//! Two-lane road environment: the queue-jump coordination MDP.
//!
//! The state is a fixed-size matrix of vehicle rows (real vehicles first,
//! zero-filled trivial rows after). One step instructs at most one vehicle
//! to yield, then advances every real vehicle synchronously: continuing
//! vehicles hold speed, instructed vehicles idle through a random reaction
//! window and then brake with lane-dependent Gaussian noise. Upper-lane
//! vehicles that braked to a stop pull over into the lower lane when the
//! target slot is free. The reward penalizes upper-lane occupancy per step
//! and collisions with a large fixed penalty.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Columns per vehicle row in the network feature matrix:
/// front position, lane, speed, yield status, comfort deceleration, length.
pub const FEATURES_PER_VEHICLE: usize = 6;

/// Smallest deceleration a braking vehicle applies, in m/s^2. Gaussian
/// noise may push a sampled deceleration to zero or below; braking
/// vehicles must keep making progress toward a stop.
pub const MIN_BRAKING_DECEL_MPS2: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("{n} vehicles do not fit a padded state of size {pad_size}")]
    TooManyVehicles { n: usize, pad_size: usize },
    #[error("reaction success probability {p} is outside (0, 1]")]
    InvalidProbability { p: f64 },
    #[error("action {action} is not valid in the current state")]
    InvalidAction { action: i32 },
    #[error("invalid road config: {0}")]
    InvalidConfig(String),
    #[error("episode is already finished")]
    EpisodeFinished,
}

/// Static parameters of the road segment and the driver model.
#[derive(Debug, Clone)]
pub struct RoadConfig {
    /// Length of the segment, m (`L`).
    pub segment_length_m: f64,
    /// Minimum safety gap between same-lane vehicles, m (`d`).
    pub min_gap_m: f64,
    /// Temporal step length, s.
    pub dt_s: f64,
    /// Number of rows in the padded state (`K`).
    pub pad_size: usize,
    /// Background traffic speed, m/s (`v_b`); also bounds the episode length.
    pub background_speed_mps: f64,
    /// Mean driver perception reaction time, s.
    pub mean_reaction_s: f64,
    /// Deceleration noise std for pull-overs (upper lane), m/s^2.
    pub sigma_pullover: f64,
    /// Deceleration noise std for braking until stop (lower lane), m/s^2.
    pub sigma_brake: f64,
    /// Reward applied to a colliding step.
    pub collision_reward: f64,
    /// Maximum allowable EMV speed, m/s.
    pub emv_max_speed_mps: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self {
            segment_length_m: 150.0,
            min_gap_m: 0.2,
            dt_s: 0.2,
            pad_size: 20,
            background_speed_mps: 5.0,
            mean_reaction_s: 2.3,
            sigma_pullover: 0.8,
            sigma_brake: 0.5,
            collision_reward: -2000.0,
            emv_max_speed_mps: 10.0,
        }
    }
}

impl RoadConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.segment_length_m > 0.0) {
            return Err(EnvError::InvalidConfig("segment_length_m must be > 0".into()));
        }
        if !(self.dt_s > 0.0) {
            return Err(EnvError::InvalidConfig("dt_s must be > 0".into()));
        }
        if self.pad_size < 1 {
            return Err(EnvError::InvalidConfig("pad_size must be >= 1".into()));
        }
        if !(self.min_gap_m >= 0.0) {
            return Err(EnvError::InvalidConfig("min_gap_m must be >= 0".into()));
        }
        let p = self.reaction_success_prob();
        if !(p > 0.0 && p <= 1.0) {
            return Err(EnvError::InvalidProbability { p });
        }
        if !(self.background_speed_mps > 0.0) {
            return Err(EnvError::InvalidConfig("background_speed_mps must be > 0".into()));
        }
        Ok(())
    }

    /// Per-step probability that an instructed driver starts braking.
    pub fn reaction_success_prob(&self) -> f64 {
        self.dt_s / self.mean_reaction_s
    }

    /// Episode step cap: the slowest compliant schedule lets background
    /// traffic traverse the whole segment once.
    pub fn episode_step_cap(&self) -> u64 {
        (self.segment_length_m / (self.background_speed_mps * self.dt_s)).ceil() as u64
    }
}

/// Lane position. The upper lane is the one cleared for the EMV; yielding
/// upper-lane vehicles pull over into the lower lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    Upper,
    Lower,
}

impl Lane {
    pub fn as_feature(self) -> f64 {
        match self {
            Lane::Upper => 0.0,
            Lane::Lower => 1.0,
        }
    }

    pub fn from_index(i: u8) -> Option<Lane> {
        match i {
            0 => Some(Lane::Upper),
            1 => Some(Lane::Lower),
            _ => None,
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Lane::Upper => 0,
            Lane::Lower => 1,
        }
    }
}

/// One non-EMV row of the state matrix.
///
/// `reaction_steps_left` and `yield_issued_step` are latent bookkeeping:
/// the controller never observes them and they are not part of the
/// network features.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    /// Front bumper position along the segment, m.
    pub front_pos_m: f64,
    pub lane: Lane,
    /// Speed, m/s; clamped at zero, never negative.
    pub speed_mps: f64,
    /// Absorbing yield status: once set it never clears.
    pub yielding: bool,
    /// Most comfortable deceleration magnitude, m/s^2 (> 0 for real rows).
    pub comfort_decel_mps2: f64,
    /// Vehicle length, m (> 0 for real rows).
    pub length_m: f64,
    /// Zero-filled padding row; never moves, collides, or earns reward.
    pub trivial: bool,
    /// Remaining reaction steps before braking starts (latent).
    pub reaction_steps_left: u32,
    /// Step index at which this vehicle was instructed to yield (latent).
    pub yield_issued_step: Option<u64>,
}

impl VehicleState {
    /// A zero-filled padding row.
    pub fn trivial_row() -> Self {
        Self {
            front_pos_m: 0.0,
            lane: Lane::Upper,
            speed_mps: 0.0,
            yielding: false,
            comfort_decel_mps2: 0.0,
            length_m: 0.0,
            trivial: true,
            reaction_steps_left: 0,
            yield_issued_step: None,
        }
    }

    pub fn rear_pos_m(&self) -> f64 {
        self.front_pos_m - self.length_m
    }

    /// Whole vehicle past the segment end; frozen and non-interacting.
    pub fn departed(&self, segment_length_m: f64) -> bool {
        self.rear_pos_m() > segment_length_m
    }

    fn feature_row(&self) -> [f64; FEATURES_PER_VEHICLE] {
        [
            self.front_pos_m,
            self.lane.as_feature(),
            self.speed_mps,
            if self.yielding { 1.0 } else { 0.0 },
            self.comfort_decel_mps2,
            self.length_m,
        ]
    }
}

/// Fixed-size state matrix: `n_real` real rows followed by trivial rows.
/// Real-row order is stable across an episode, so index `i` names the same
/// vehicle throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedState {
    rows: Vec<VehicleState>,
    n_real: usize,
}

impl PaddedState {
    pub fn rows(&self) -> &[VehicleState] {
        &self.rows
    }

    pub fn real_rows(&self) -> &[VehicleState] {
        &self.rows[..self.n_real]
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn pad_size(&self) -> usize {
        self.rows.len()
    }

    /// Flat feature vector of length `6 * pad_size`, row-major.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows.len() * FEATURES_PER_VEHICLE);
        for row in &self.rows {
            out.extend_from_slice(&row.feature_row());
        }
        out
    }

    /// Count of real upper-lane vehicles still inside the segment.
    pub fn upper_lane_blockers(&self, cfg: &RoadConfig) -> usize {
        self.real_rows()
            .iter()
            .filter(|v| v.lane == Lane::Upper && v.rear_pos_m() <= cfg.segment_length_m)
            .count()
    }

    pub(crate) fn rows_mut(&mut self) -> &mut [VehicleState] {
        &mut self.rows
    }
}

/// Pads real vehicle rows with zero-filled trivial rows up to `pad_size`.
pub fn pad_state(real_rows: Vec<VehicleState>, pad_size: usize) -> Result<PaddedState, EnvError> {
    let n = real_rows.len();
    if n > pad_size {
        return Err(EnvError::TooManyVehicles { n, pad_size });
    }
    let mut rows = real_rows;
    for row in &mut rows {
        row.trivial = false;
    }
    rows.resize_with(pad_size, VehicleState::trivial_row);
    Ok(PaddedState { rows, n_real: n })
}

/// Controller action: instruct vehicle `m` to yield, or `-1` for no one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionIndex(i32);

impl ActionIndex {
    /// No vehicle instructed this step.
    pub const NONE: ActionIndex = ActionIndex(-1);

    pub fn vehicle(index: usize) -> Self {
        ActionIndex(index as i32)
    }

    pub fn value(self) -> i32 {
        self.0
    }

    pub fn vehicle_index(self) -> Option<usize> {
        (self.0 >= 0).then_some(self.0 as usize)
    }

    /// Position of this action in network output / mask order:
    /// output 0 is "no vehicle", output `i + 1` is vehicle `i`.
    pub fn output_index(self) -> usize {
        (self.0 + 1) as usize
    }

    pub fn from_output_index(j: usize) -> Self {
        ActionIndex(j as i32 - 1)
    }
}

impl std::fmt::Display for ActionIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: PaddedState,
    pub reward: f64,
    pub done: bool,
    pub collided: bool,
    pub dqjl_established: bool,
}

/// Validity flags in output order (`K + 1` entries, index 0 = action `-1`).
///
/// Instructing vehicle `i` is valid iff row `i` is real, not yet yielding,
/// and its rear is still inside the segment.
pub fn valid_action_mask(state: &PaddedState, cfg: &RoadConfig) -> Vec<bool> {
    let mut mask = vec![false; state.pad_size() + 1];
    mask[0] = true;
    for (i, row) in state.real_rows().iter().enumerate() {
        mask[i + 1] = !row.yielding && row.rear_pos_m() < cfg.segment_length_m;
    }
    mask
}

/// Validity flags recovered from a flat feature vector (replayed
/// experiences store features only). A row is real iff its length is
/// positive: trivial rows are all-zero and real vehicles have positive
/// length by invariant.
pub fn mask_from_features(features: &[f64], pad_size: usize, cfg: &RoadConfig) -> Vec<bool> {
    debug_assert_eq!(features.len(), pad_size * FEATURES_PER_VEHICLE);
    let mut mask = vec![false; pad_size + 1];
    mask[0] = true;
    for i in 0..pad_size {
        let row = &features[i * FEATURES_PER_VEHICLE..(i + 1) * FEATURES_PER_VEHICLE];
        let (x, z, l) = (row[0], row[3], row[5]);
        mask[i + 1] = l > 0.0 && z == 0.0 && x - l < cfg.segment_length_m;
    }
    mask
}

/// Draws the number of steps until an instructed driver starts braking:
/// geometric with support >= 1 and success probability `dt / mean_reaction`,
/// sampled by inversion from a single uniform draw.
pub fn sample_reaction_steps(
    rng: &mut impl Rng,
    dt_s: f64,
    mean_reaction_s: f64,
) -> Result<u32, EnvError> {
    let p = dt_s / mean_reaction_s;
    if !(p > 0.0 && p <= 1.0) {
        return Err(EnvError::InvalidProbability { p });
    }
    let u: f64 = rng.gen();
    if p >= 1.0 {
        return Ok(1);
    }
    Ok(((1.0 - u).ln() / (1.0 - p).ln()).floor() as u32 + 1)
}

/// Draws the braking deceleration for a vehicle in its active braking
/// phase: comfort deceleration plus lane-dependent Gaussian noise, clamped
/// so braking always makes progress. Consumes exactly one standard-normal
/// draw.
pub fn sample_deceleration(rng: &mut impl Rng, vehicle: &VehicleState, cfg: &RoadConfig) -> f64 {
    let sigma = match vehicle.lane {
        Lane::Upper => cfg.sigma_pullover,
        Lane::Lower => cfg.sigma_brake,
    };
    let eps: f64 = rng.sample(StandardNormal);
    (vehicle.comfort_decel_mps2 + sigma * eps).max(MIN_BRAKING_DECEL_MPS2)
}

/// True iff some ordered same-lane pair of real, non-departed vehicles
/// (follower `i` behind leader `j`) violates the safety gap:
/// `front_i + d > rear_j`.
pub fn check_collision(state: &PaddedState, cfg: &RoadConfig) -> bool {
    let rows = state.real_rows();
    for (ii, follower) in rows.iter().enumerate() {
        if follower.departed(cfg.segment_length_m) {
            continue;
        }
        for (jj, leader) in rows.iter().enumerate() {
            if ii == jj || leader.lane != follower.lane || leader.departed(cfg.segment_length_m) {
                continue;
            }
            if follower.front_pos_m <= leader.front_pos_m
                && follower.front_pos_m + cfg.min_gap_m > leader.rear_pos_m()
            {
                return true;
            }
        }
    }
    false
}

/// Step reward: the collision penalty alone on a colliding step, otherwise
/// minus the number of real upper-lane vehicles still inside the segment.
pub fn compute_reward(state_after: &PaddedState, collided: bool, cfg: &RoadConfig) -> f64 {
    if collided {
        cfg.collision_reward
    } else {
        -(state_after.upper_lane_blockers(cfg) as f64)
    }
}

/// The queue-jump lane is established once no real vehicle blocks the
/// upper lane inside the segment.
pub fn lane_cleared(state: &PaddedState, cfg: &RoadConfig) -> bool {
    state.upper_lane_blockers(cfg) == 0
}

fn instruct(row: &mut VehicleState, rng: &mut impl Rng, cfg: &RoadConfig, step_index: u64) -> Result<(), EnvError> {
    row.yielding = true;
    row.reaction_steps_left = sample_reaction_steps(rng, cfg.dt_s, cfg.mean_reaction_s)?;
    row.yield_issued_step = Some(step_index);
    Ok(())
}

/// The lower-lane slot `[rear - d, front + d]` a pulling-over vehicle
/// would occupy must be free of real, non-departed lower-lane vehicles.
fn pullover_slot_free(rows: &[VehicleState], n_real: usize, target: usize, cfg: &RoadConfig) -> bool {
    let slot_lo = rows[target].rear_pos_m() - cfg.min_gap_m;
    let slot_hi = rows[target].front_pos_m + cfg.min_gap_m;
    for (j, other) in rows[..n_real].iter().enumerate() {
        if j == target || other.lane != Lane::Lower || other.departed(cfg.segment_length_m) {
            continue;
        }
        if other.rear_pos_m() < slot_hi && slot_lo < other.front_pos_m {
            return false;
        }
    }
    true
}

/// Advances every real vehicle one step. Draw order: one standard-normal
/// deceleration draw per actively braking vehicle, in row order. Position
/// updates use the speed held at the start of the step; lane flips are
/// evaluated after all rows have moved, in row order.
fn advance(state: &mut PaddedState, cfg: &RoadConfig, rng: &mut impl Rng) {
    let n_real = state.n_real;
    let dt = cfg.dt_s;
    let rows = state.rows_mut();
    for row in rows[..n_real].iter_mut() {
        if row.departed(cfg.segment_length_m) {
            continue;
        }
        if !row.yielding {
            row.front_pos_m += row.speed_mps * dt;
        } else if row.reaction_steps_left > 0 {
            row.front_pos_m += row.speed_mps * dt;
            row.reaction_steps_left -= 1;
        } else if row.speed_mps > 0.0 {
            let decel = sample_deceleration(rng, row, cfg);
            row.front_pos_m += row.speed_mps * dt;
            row.speed_mps = (row.speed_mps - decel * dt).max(0.0);
        }
    }
    for i in 0..n_real {
        let row = &rows[i];
        if row.lane == Lane::Upper
            && row.yielding
            && row.speed_mps == 0.0
            && !row.departed(cfg.segment_length_m)
            && pullover_slot_free(rows, n_real, i, cfg)
        {
            rows[i].lane = Lane::Lower;
        }
    }
}

/// One environment transition under a single-vehicle action.
///
/// `step_index` is the index of the step being taken; it is recorded on a
/// newly instructed vehicle for yielding-time bookkeeping.
pub fn step(
    state: &PaddedState,
    action: ActionIndex,
    cfg: &RoadConfig,
    rng: &mut impl Rng,
    step_index: u64,
) -> Result<StepOutcome, EnvError> {
    let mask = valid_action_mask(state, cfg);
    if !mask[action.output_index()] {
        return Err(EnvError::InvalidAction { action: action.value() });
    }
    let instructed: &[usize] = match action.vehicle_index() {
        Some(i) => &[i][..],
        None => &[],
    };
    step_instructed(state, instructed, cfg, rng, step_index)
}

/// One environment transition instructing a set of vehicles at once.
///
/// The learned controller uses [`step`] (at most one instruction per step);
/// the siren-style benchmark broadcasts, so it may instruct several
/// vehicles in the same step. Reaction draws happen per instructed vehicle
/// in ascending row order, before any kinematics draws.
pub fn step_instructed(
    state: &PaddedState,
    instructed: &[usize],
    cfg: &RoadConfig,
    rng: &mut impl Rng,
    step_index: u64,
) -> Result<StepOutcome, EnvError> {
    let mask = valid_action_mask(state, cfg);
    let mut next = state.clone();
    for &i in instructed {
        if i >= state.pad_size() || !mask[i + 1] {
            return Err(EnvError::InvalidAction { action: i as i32 });
        }
        instruct(&mut next.rows_mut()[i], rng, cfg, step_index)?;
    }
    advance(&mut next, cfg, rng);
    let collided = check_collision(&next, cfg);
    let reward = compute_reward(&next, collided, cfg);
    let cleared = lane_cleared(&next, cfg);
    let dqjl_established = cleared && !collided;
    let done = collided || cleared;
    Ok(StepOutcome { next_state: next, reward, done, collided, dqjl_established })
}

/// A bounded episode: owns the current state and step counter and enforces
/// the step cap. The noise source stays with the caller so that rollouts
/// can pin it independently of policy decisions.
#[derive(Debug, Clone)]
pub struct Episode {
    state: PaddedState,
    cfg: RoadConfig,
    step_index: u64,
    cap: u64,
    done: bool,
    collided: bool,
    established: bool,
}

impl Episode {
    pub fn new(initial: PaddedState, cfg: RoadConfig) -> Self {
        let established = lane_cleared(&initial, &cfg);
        let cap = cfg.episode_step_cap();
        Self { state: initial, cfg, step_index: 0, cap, done: established, collided: false, established }
    }

    pub fn state(&self) -> &PaddedState {
        &self.state
    }

    pub fn config(&self) -> &RoadConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn step_cap(&self) -> u64 {
        self.cap
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn collided(&self) -> bool {
        self.collided
    }

    pub fn established(&self) -> bool {
        self.established
    }

    /// Takes one step. Cap expiry marks the episode done but not
    /// established.
    pub fn step(&mut self, action: ActionIndex, rng: &mut impl Rng) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let mut outcome = step(&self.state, action, &self.cfg, rng, self.step_index)?;
        self.state = outcome.next_state.clone();
        self.step_index += 1;
        self.collided = outcome.collided;
        self.established = outcome.dqjl_established;
        if self.step_index >= self.cap {
            outcome.done = true;
        }
        self.done = outcome.done;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn car(x: f64, lane: Lane, v: f64) -> VehicleState {
        VehicleState {
            front_pos_m: x,
            lane,
            speed_mps: v,
            yielding: false,
            comfort_decel_mps2: 3.5,
            length_m: 4.5,
            trivial: false,
            reaction_steps_left: 0,
            yield_issued_step: None,
        }
    }

    fn cfg() -> RoadConfig {
        RoadConfig::default()
    }

    #[test]
    fn pad_state_appends_trivial_rows() {
        let state = pad_state(vec![car(10.0, Lane::Upper, 5.0); 3], 5).unwrap();
        assert_eq!(state.n_real(), 3);
        assert_eq!(state.pad_size(), 5);
        assert!(state.rows()[3].trivial && state.rows()[4].trivial);
        assert_eq!(state.features().len(), 30);
    }

    #[test]
    fn pad_state_identity_when_full() {
        let rows = vec![car(10.0, Lane::Upper, 5.0); 4];
        let state = pad_state(rows.clone(), 4).unwrap();
        assert_eq!(state.n_real(), 4);
        assert_eq!(state.real_rows(), &rows[..]);
    }

    #[test]
    fn pad_state_rejects_overflow() {
        let err = pad_state(vec![car(10.0, Lane::Upper, 5.0); 5], 4).unwrap_err();
        assert!(matches!(err, EnvError::TooManyVehicles { n: 5, pad_size: 4 }));
    }

    #[test]
    fn mask_rules() {
        let mut yielding = car(20.0, Lane::Upper, 5.0);
        yielding.yielding = true;
        let state = pad_state(vec![yielding, car(40.0, Lane::Lower, 5.0), car(60.0, Lane::Upper, 5.0)], 4).unwrap();
        let mask = valid_action_mask(&state, &cfg());
        assert_eq!(mask, vec![true, false, true, true, false]);
    }

    #[test]
    fn mask_all_trivial() {
        let state = pad_state(vec![], 3).unwrap();
        assert_eq!(valid_action_mask(&state, &cfg()), vec![true, false, false, false]);
    }

    #[test]
    fn mask_from_features_matches_state_mask() {
        let mut rng = seeded(11);
        for _ in 0..50 {
            let n = rng.gen_range(0..5);
            let mut rows = Vec::new();
            for _ in 0..n {
                let mut v = car(rng.gen_range(4.6..160.0), if rng.gen_bool(0.5) { Lane::Upper } else { Lane::Lower }, 5.0);
                v.yielding = rng.gen_bool(0.3);
                rows.push(v);
            }
            let state = pad_state(rows, 5).unwrap();
            assert_eq!(
                valid_action_mask(&state, &cfg()),
                mask_from_features(&state.features(), 5, &cfg())
            );
        }
    }

    #[test]
    fn reaction_probability_value() {
        let c = cfg();
        assert!((c.reaction_success_prob() - 0.086_956_521_739_130_43).abs() < 1e-15);
    }

    #[test]
    fn reaction_steps_rejects_bad_probability() {
        let mut rng = seeded(0);
        assert!(sample_reaction_steps(&mut rng, 3.0, 2.3).is_err());
        assert!(sample_reaction_steps(&mut rng, 0.0, 2.3).is_err());
    }

    #[test]
    fn reaction_steps_empirical_mean() {
        let mut rng = seeded(123);
        let n = 100_000;
        let total: u64 = (0..n)
            .map(|_| sample_reaction_steps(&mut rng, 0.2, 2.3).unwrap() as u64)
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 11.5).abs() / 11.5 < 0.02, "mean {mean}");
    }

    // Golden value frozen from the seeded generator (seed 42, p = 0.2/2.3).
    #[test]
    fn reaction_steps_golden_first_draw() {
        let mut rng = seeded(42);
        let k = sample_reaction_steps(&mut rng, 0.2, 2.3).unwrap();
        assert_eq!(k, GOLDEN_REACTION_SEED42);
    }

    const GOLDEN_REACTION_SEED42: u32 = 4;

    #[test]
    fn deceleration_statistics() {
        let c = cfg();
        let mut rng = seeded(7);
        let n = 100_000;
        let upper = car(10.0, Lane::Upper, 5.0);
        let lower = car(10.0, Lane::Lower, 5.0);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let b = sample_deceleration(&mut rng, &upper, &c);
            sum += b;
            sum_sq += b * b;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!((mean - 3.5).abs() / 3.5 < 0.01, "pull-over mean {mean}");
        assert!((std - 0.8).abs() / 0.8 < 0.03, "pull-over std {std}");

        let mut sum_sq = 0.0;
        let mut sum = 0.0;
        for _ in 0..n {
            let b = sample_deceleration(&mut rng, &lower, &c);
            sum += b;
            sum_sq += b * b;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!((std - 0.5).abs() / 0.5 < 0.03, "brake std {std}");
    }

    #[test]
    fn deceleration_degenerate_noise() {
        let mut c = cfg();
        c.sigma_pullover = 0.0;
        let mut rng = seeded(9);
        let v = car(10.0, Lane::Upper, 5.0);
        for _ in 0..100 {
            assert_eq!(sample_deceleration(&mut rng, &v, &c), 3.5);
        }
    }

    #[test]
    fn constant_speed_row() {
        let state = pad_state(vec![car(10.0, Lane::Upper, 5.0)], 2).unwrap();
        let mut rng = seeded(1);
        let out = step(&state, ActionIndex::NONE, &cfg(), &mut rng, 0).unwrap();
        let row = &out.next_state.rows()[0];
        assert_eq!(row.front_pos_m, 11.0);
        assert_eq!(row.speed_mps, 5.0);
        assert!(!row.yielding);
    }

    #[test]
    fn reaction_window_keeps_speed() {
        let mut v = car(10.0, Lane::Upper, 5.0);
        v.yielding = true;
        v.reaction_steps_left = 3;
        let state = pad_state(vec![v], 2).unwrap();
        let mut rng = seeded(1);
        let out = step(&state, ActionIndex::NONE, &cfg(), &mut rng, 0).unwrap();
        let row = &out.next_state.rows()[0];
        assert_eq!(row.front_pos_m, 11.0);
        assert_eq!(row.speed_mps, 5.0);
        assert_eq!(row.reaction_steps_left, 2);
    }

    #[test]
    fn stopped_upper_vehicle_pulls_over() {
        let mut v = car(30.0, Lane::Upper, 0.4);
        v.yielding = true;
        v.reaction_steps_left = 0;
        let state = pad_state(vec![v], 2).unwrap();
        let mut rng = seeded(1);
        // One braking step at >= 0.1 m/s^2 may not stop it; iterate a few.
        let mut episode = Episode::new(state, cfg());
        let mut flipped = false;
        for _ in 0..20 {
            if episode.is_done() {
                break;
            }
            let out = episode.step(ActionIndex::NONE, &mut rng).unwrap();
            let row = &out.next_state.rows()[0];
            if row.lane == Lane::Lower {
                assert_eq!(row.speed_mps, 0.0);
                flipped = true;
                break;
            }
        }
        assert!(flipped);
    }

    #[test]
    fn pullover_blocked_by_occupied_slot_then_retries() {
        let mut upper = car(30.0, Lane::Upper, 0.0);
        upper.yielding = true;
        // Lower-lane vehicle driving through the target slot.
        let lower = car(31.0, Lane::Lower, 5.0);
        let state = pad_state(vec![upper, lower], 3).unwrap();
        let mut rng = seeded(1);
        let out = step(&state, ActionIndex::NONE, &cfg(), &mut rng, 0).unwrap();
        assert_eq!(out.next_state.rows()[0].lane, Lane::Upper);
        assert_eq!(out.next_state.rows()[0].speed_mps, 0.0);
        // After the lower vehicle clears the slot, the flip goes through.
        let out2 = step(&out.next_state, ActionIndex::NONE, &cfg(), &mut rng, 1).unwrap();
        assert_eq!(out2.next_state.rows()[0].lane, Lane::Lower);
    }

    #[test]
    fn collision_inequality() {
        let c = cfg();
        let leader = car(50.0, Lane::Upper, 5.0); // rear at 45.5
        let mut follower = car(45.4, Lane::Upper, 5.0);
        let state = pad_state(vec![follower.clone(), leader.clone()], 3).unwrap();
        assert!(check_collision(&state, &c), "45.6 > 45.5 collides");

        follower.front_pos_m = 45.2;
        let state = pad_state(vec![follower.clone(), leader.clone()], 3).unwrap();
        assert!(!check_collision(&state, &c), "45.4 <= 45.5 is safe");

        follower.front_pos_m = 49.0;
        follower.lane = Lane::Lower;
        let state = pad_state(vec![follower, leader], 3).unwrap();
        assert!(!check_collision(&state, &c), "different lanes never collide");
    }

    #[test]
    fn reward_cases() {
        let c = cfg();
        let state = pad_state(
            vec![car(10.0, Lane::Upper, 5.0), car(30.0, Lane::Upper, 5.0), car(60.0, Lane::Upper, 5.0)],
            5,
        )
        .unwrap();
        assert_eq!(compute_reward(&state, false, &c), -3.0);
        assert_eq!(compute_reward(&state, true, &c), -2000.0);

        let cleared = pad_state(vec![car(10.0, Lane::Lower, 0.0), car(200.0, Lane::Upper, 5.0)], 5).unwrap();
        assert_eq!(compute_reward(&cleared, false, &c), 0.0);
    }

    #[test]
    fn instruction_flags_vehicle_and_draws_reaction() {
        let state = pad_state(vec![car(10.0, Lane::Upper, 5.0)], 2).unwrap();
        let mut rng = seeded(5);
        let out = step(&state, ActionIndex::vehicle(0), &cfg(), &mut rng, 7).unwrap();
        let row = &out.next_state.rows()[0];
        assert!(row.yielding);
        assert_eq!(row.yield_issued_step, Some(7));
        // Instructed this step: reaction window consumed one step already.
        assert!(row.reaction_steps_left < u32::MAX);
        assert_eq!(row.front_pos_m, 11.0);
    }

    #[test]
    fn invalid_action_is_rejected() {
        let state = pad_state(vec![car(10.0, Lane::Upper, 5.0)], 3).unwrap();
        let mut rng = seeded(5);
        let err = step(&state, ActionIndex::vehicle(2), &cfg(), &mut rng, 0).unwrap_err();
        assert!(matches!(err, EnvError::InvalidAction { action: 2 }));
    }

    #[test]
    fn episode_cap_and_initial_establishment() {
        let c = cfg();
        assert_eq!(c.episode_step_cap(), 150);
        let empty = pad_state(vec![], 3).unwrap();
        let episode = Episode::new(empty, c);
        assert!(episode.is_done());
        assert!(episode.established());
    }

    #[test]
    fn step_determinism_bit_for_bit() {
        let state = pad_state(
            vec![car(10.0, Lane::Upper, 5.0), car(30.0, Lane::Lower, 5.0), car(60.0, Lane::Upper, 5.0)],
            5,
        )
        .unwrap();
        let c = cfg();
        let run = || {
            let mut rng = seeded(99);
            let mut s = state.clone();
            let mut outs = Vec::new();
            for t in 0..40 {
                let action = if t == 0 { ActionIndex::vehicle(0) } else { ActionIndex::NONE };
                let out = step(&s, action, &c, &mut rng, t).unwrap();
                s = out.next_state.clone();
                outs.push((s.clone(), out.reward, out.done, out.collided));
            }
            outs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trivial_rows_are_inert() {
        let rows = vec![car(10.0, Lane::Upper, 5.0), car(30.0, Lane::Lower, 5.0)];
        let c = cfg();
        let small = pad_state(rows.clone(), 2).unwrap();
        let big = pad_state(rows, 6).unwrap();
        let mut rng_a = seeded(3);
        let mut rng_b = seeded(3);
        let out_a = step(&small, ActionIndex::vehicle(0), &c, &mut rng_a, 0).unwrap();
        let out_b = step(&big, ActionIndex::vehicle(0), &c, &mut rng_b, 0).unwrap();
        assert_eq!(out_a.reward, out_b.reward);
        assert_eq!(out_a.next_state.real_rows(), out_b.next_state.real_rows());
        for row in &out_b.next_state.rows()[2..] {
            assert_eq!(row, &VehicleState::trivial_row());
        }
    }
}
