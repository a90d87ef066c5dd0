//! Random, collision-free initial road environments.
//!
//! Vehicle attributes follow the training distribution: lengths uniform in
//! [4, 5.5] m, comfort decelerations normal around 3.5 m/s^2 truncated to a
//! physical range, lanes split by a Bernoulli draw, all speeds equal to the
//! background traffic speed. Positions are sampled per lane with rejection
//! until every same-lane pair keeps more than the minimum safety gap.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::env::{check_collision, pad_state, EnvError, Lane, PaddedState, RoadConfig, VehicleState};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("could not place vehicle {placed} of {requested} within the retry budget; density infeasible")]
    InfeasibleDensity { placed: usize, requested: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("scenario file parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Requested traffic volume: an explicit vehicle count, or an average
/// spacing in metres of road per vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VehicleCount {
    Count(usize),
    SpacingMPerVeh(f64),
}

impl VehicleCount {
    pub fn resolve(self, segment_length_m: f64) -> usize {
        match self {
            VehicleCount::Count(n) => n,
            VehicleCount::SpacingMPerVeh(s) => (segment_length_m / s + 1e-9).floor() as usize,
        }
    }
}

/// Distributional controls for scenario generation.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub count: VehicleCount,
    /// Vehicle length range, m (uniform).
    pub length_range_m: (f64, f64),
    /// Comfort deceleration mean and std, m/s^2 (normal).
    pub decel_mean_mps2: f64,
    pub decel_std_mps2: f64,
    /// Open truncation interval for deceleration draws, m/s^2.
    pub decel_bounds_mps2: (f64, f64),
    /// Probability a vehicle starts on the upper lane.
    pub upper_lane_prob: f64,
    /// Initial speed of every vehicle, m/s.
    pub background_speed_mps: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            count: VehicleCount::SpacingMPerVeh(12.5),
            length_range_m: (4.0, 5.5),
            decel_mean_mps2: 3.5,
            decel_std_mps2: 1.0,
            decel_bounds_mps2: (0.5, 8.0),
            upper_lane_prob: 0.5,
            background_speed_mps: 5.0,
        }
    }
}

const PLACEMENT_RETRIES: usize = 1000;

/// Generates a padded, collision-free initial state.
///
/// Per vehicle, the draw order is: lane, length, truncated deceleration
/// (rejection), then position (rejection against already placed same-lane
/// vehicles). Rows are sorted by front position before padding, so vehicle
/// indices run upstream to downstream.
pub fn generate_scenario(
    spec: &ScenarioSpec,
    cfg: &RoadConfig,
    rng: &mut impl Rng,
) -> Result<PaddedState, ScenarioError> {
    let n = spec.count.resolve(cfg.segment_length_m);
    if n > cfg.pad_size {
        return Err(EnvError::TooManyVehicles { n, pad_size: cfg.pad_size }.into());
    }
    let mut rows: Vec<VehicleState> = Vec::with_capacity(n);
    for placed in 0..n {
        let lane = if rng.gen_bool(spec.upper_lane_prob) { Lane::Upper } else { Lane::Lower };
        let length = rng.gen_range(spec.length_range_m.0..spec.length_range_m.1);
        let decel = loop {
            let eps: f64 = rng.sample(StandardNormal);
            let b = spec.decel_mean_mps2 + spec.decel_std_mps2 * eps;
            if b > spec.decel_bounds_mps2.0 && b < spec.decel_bounds_mps2.1 {
                break b;
            }
        };
        let mut front = None;
        for _ in 0..PLACEMENT_RETRIES {
            let x = rng.gen_range(length..cfg.segment_length_m);
            let clear = rows.iter().filter(|o| o.lane == lane).all(|o| {
                x + cfg.min_gap_m < o.rear_pos_m() || o.front_pos_m + cfg.min_gap_m < x - length
            });
            if clear {
                front = Some(x);
                break;
            }
        }
        let Some(front) = front else {
            return Err(ScenarioError::InfeasibleDensity { placed, requested: n });
        };
        rows.push(VehicleState {
            front_pos_m: front,
            lane,
            speed_mps: spec.background_speed_mps,
            yielding: false,
            comfort_decel_mps2: decel,
            length_m: length,
            trivial: false,
            reaction_steps_left: 0,
            yield_issued_step: None,
        });
    }
    rows.sort_by(|a, b| a.front_pos_m.total_cmp(&b.front_pos_m));
    let state = pad_state(rows, cfg.pad_size)?;
    debug_assert!(!check_collision(&state, cfg));
    Ok(state)
}

const SCENARIO_HEADER: &str = "x_m,lane,v_mps,yielding,decel_mps2,length_m";

/// Serializes the real rows of a state, one vehicle per record. Floats use
/// the shortest representation that parses back to the identical bits, so
/// export/import round-trips exactly.
pub fn scenario_to_string(state: &PaddedState) -> String {
    let mut out = String::new();
    out.push_str(SCENARIO_HEADER);
    out.push('\n');
    for row in state.real_rows() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.front_pos_m,
            row.lane.index(),
            row.speed_mps,
            u8::from(row.yielding),
            row.comfort_decel_mps2,
            row.length_m
        )
        .expect("string write");
    }
    out
}

/// Parses a scenario file back into a padded state.
pub fn scenario_from_str(text: &str, pad_size: usize) -> Result<PaddedState, ScenarioError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == SCENARIO_HEADER => {}
        Some((i, _)) => {
            return Err(ScenarioError::Parse { line: i + 1, message: format!("expected header `{SCENARIO_HEADER}`") })
        }
        None => return Err(ScenarioError::Parse { line: 1, message: "empty scenario file".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 6 {
            return Err(ScenarioError::Parse { line: line_no, message: format!("expected 6 fields, got {}", fields.len()) });
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64, ScenarioError> {
            let v: f64 = s.parse().map_err(|_| ScenarioError::Parse { line: line_no, message: format!("bad {what}: `{s}`") })?;
            if !v.is_finite() {
                return Err(ScenarioError::Parse { line: line_no, message: format!("non-finite {what}: `{s}`") });
            }
            Ok(v)
        };
        let lane = match fields[1].trim() {
            "0" => Lane::Upper,
            "1" => Lane::Lower,
            other => return Err(ScenarioError::Parse { line: line_no, message: format!("bad lane: `{other}`") }),
        };
        let yielding = match fields[3].trim() {
            "0" => false,
            "1" => true,
            other => return Err(ScenarioError::Parse { line: line_no, message: format!("bad yielding flag: `{other}`") }),
        };
        rows.push(VehicleState {
            front_pos_m: parse_f64(fields[0], "position")?,
            lane,
            speed_mps: parse_f64(fields[2], "speed")?,
            yielding,
            comfort_decel_mps2: parse_f64(fields[4], "deceleration")?,
            length_m: parse_f64(fields[5], "length")?,
            trivial: false,
            reaction_steps_left: 0,
            yield_issued_step: None,
        });
    }
    Ok(pad_state(rows, pad_size)?)
}

pub fn write_scenario_file(state: &PaddedState, path: &Path) -> Result<(), ScenarioError> {
    Ok(std::fs::write(path, scenario_to_string(state))?)
}

pub fn read_scenario_file(path: &Path, pad_size: usize) -> Result<PaddedState, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    scenario_from_str(&text, pad_size)
}
