//! Closed-loop execution: planners emit handle-position plans, which are
//! interpolated into impedance setpoints and tracked through the door
//! simulator with periodic replanning and optional disturbances.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{observe, Observation, ObservationNoise};
use crate::door::{self, DoorError, DoorState, ForceSample, SceneConfig};
use crate::geometry::Vec2;

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Door(#[from] DoorError),
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("planner returned {got} plans for {expected} requests")]
    PlanCount { got: usize, expected: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("trace record {record}: {message}")]
    Format { record: usize, message: String },
}

/// Maps physics ticks onto plan states and replanning boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TickClock {
    pub physics_per_state: usize,
    pub replan_every: usize,
}

impl TickClock {
    pub fn new(physics_per_state: usize, replan_every: usize) -> Self {
        Self {
            physics_per_state,
            replan_every,
        }
    }

    pub fn ticks_per_plan(&self) -> usize {
        self.physics_per_state * self.replan_every
    }

    pub fn tick_within_plan(&self, tick: usize) -> usize {
        tick % self.ticks_per_plan()
    }

    pub fn state_index(&self, tick: usize) -> usize {
        self.tick_within_plan(tick) / self.physics_per_state
    }
}

/// Position and velocity setpoint for tick `tick_within_plan` of a plan.
///
/// Plan state `s` is reached at tick `s * physics_per_state`; in between,
/// the command moves linearly toward state `s + 1`. Past the final state the
/// command holds it with zero velocity.
pub fn inverse_dynamics(
    plan: &[Vec2],
    tick_within_plan: usize,
    physics_per_state: usize,
    dt: f64,
) -> (Vec2, Vec2) {
    let Some(last) = plan.last() else {
        return (Vec2::ZERO, Vec2::ZERO);
    };
    let s = tick_within_plan / physics_per_state;
    if s + 1 >= plan.len() {
        return (*last, Vec2::ZERO);
    }
    let frac = (tick_within_plan % physics_per_state) as f64 / physics_per_state as f64;
    let (a, b) = (plan[s], plan[s + 1]);
    let velocity = (b - a) * (1.0 / (physics_per_state as f64 * dt));
    (a.lerp(b, frac), velocity)
}

/// Periodic setpoint impulses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceSpec {
    pub frequency: f64,
    /// Offset magnitude in meters.
    pub deviation: f64,
    /// Ticks each impulse is held.
    pub duration_ticks: usize,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            frequency: 1.5,
            deviation: 0.03,
            duration_ticks: 60,
        }
    }
}

impl DisturbanceSpec {
    pub fn period_ticks(&self, dt: f64) -> usize {
        ((1.0 / (self.frequency * dt)).round() as usize).max(1)
    }
}

/// Produces the disturbance offset for each tick. An impulse starts every
/// period (the first one after a full period), points in a freshly drawn
/// random direction and lasts `duration_ticks`.
#[derive(Clone, Debug)]
pub struct DisturbanceInjector {
    spec: DisturbanceSpec,
    period: usize,
    rng: ChaCha8Rng,
    current: Vec2,
    until: usize,
}

impl DisturbanceInjector {
    pub fn new(spec: DisturbanceSpec, dt: f64, rng: ChaCha8Rng) -> Self {
        Self {
            spec,
            period: spec.period_ticks(dt),
            rng,
            current: Vec2::ZERO,
            until: 0,
        }
    }

    /// Must be called with consecutive ticks starting at zero.
    pub fn offset(&mut self, tick: usize) -> Vec2 {
        if self.spec.deviation == 0.0 || self.spec.frequency <= 0.0 {
            return Vec2::ZERO;
        }
        if tick > 0 && tick % self.period == 0 {
            let dir: f64 = self.rng.gen_range(-PI..PI);
            self.current = Vec2::from_angle(dir) * self.spec.deviation;
            self.until = tick + self.spec.duration_ticks;
        }
        if tick < self.until {
            self.current
        } else {
            Vec2::ZERO
        }
    }
}

/// Everything a planner may see when asked for a new plan.
#[derive(Clone, Debug)]
pub struct PlanRequest<'a> {
    /// Ground truth, only for privileged planners.
    pub scene: &'a SceneConfig,
    pub door: DoorState,
    pub observation: Observation,
    /// End-effector setpoint at the last executed tick.
    pub state: Vec2,
    /// Raw force measured on the last executed tick.
    pub force: Vec2,
    /// Seed for any sampling the planner does for this request.
    pub noise_seed: u64,
}

pub trait Planner {
    /// Plans for several episodes at once; one result per request.
    fn plan_batch(&mut self, requests: &[PlanRequest<'_>]) -> Vec<Result<Vec<Vec2>, String>>;
}

/// Follows the true arc from the current opening angle.
#[derive(Clone, Copy, Debug)]
pub struct OraclePlanner {
    pub horizon: usize,
    pub angle_step: f64,
}

impl Planner for OraclePlanner {
    fn plan_batch(&mut self, requests: &[PlanRequest<'_>]) -> Vec<Result<Vec<Vec2>, String>> {
        requests
            .iter()
            .map(|r| Ok(door::oracle_plan(r.scene, r.door.angle, self.horizon, self.angle_step)))
            .collect()
    }
}

/// Holds the current setpoint.
#[derive(Clone, Copy, Debug)]
pub struct NullPlanner {
    pub horizon: usize,
}

impl Planner for NullPlanner {
    fn plan_batch(&mut self, requests: &[PlanRequest<'_>]) -> Vec<Result<Vec<Vec2>, String>> {
        requests.iter().map(|r| Ok(vec![r.state; self.horizon])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub physics_per_state: usize,
    /// Plan states executed between replans.
    pub replan_every: usize,
    pub observation_noise: ObservationNoise,
    pub disturbance: Option<DisturbanceSpec>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            physics_per_state: 8,
            replan_every: 8,
            observation_noise: ObservationNoise::default(),
            disturbance: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    /// Simulated time at the end of the tick.
    pub time: f64,
    pub angle: f64,
    pub angular_velocity: f64,
    pub ee_position: Vec2,
    /// Planned setpoint before the disturbance offset.
    pub command: Vec2,
    pub disturbance: Vec2,
    pub force: ForceSample,
    pub plan_index: usize,
    pub state_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Success,
    Timeout,
    GraspLost,
    PlannerFault,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub scene: SceneConfig,
    pub ticks: Vec<TickRecord>,
    pub termination: Termination,
    pub diagnostic: Option<String>,
}

impl EpisodeTrace {
    pub fn succeeded(&self) -> bool {
        door::check_success(self, &self.scene)
    }

    /// Largest harmful force over the ticks of each executed plan state.
    pub fn state_harmful_forces(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        let mut key = None;
        for t in &self.ticks {
            let k = (t.plan_index, t.state_index);
            if key == Some(k) {
                let last = out.last_mut().expect("open state");
                *last = last.max(t.force.harmful);
            } else {
                out.push(t.force.harmful);
                key = Some(k);
            }
        }
        out
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Episode<'a> {
    scene: &'a SceneConfig,
    state: DoorState,
    setpoint: Vec2,
    force: ForceSample,
    plan: Vec<Vec2>,
    plan_index: usize,
    observe_rng: ChaCha8Rng,
    disturbance: Option<DisturbanceInjector>,
    ticks: Vec<TickRecord>,
    done: Option<(Termination, Option<String>)>,
}

/// Runs one episode per scene, in lockstep so the planner can batch its
/// requests. Each episode depends only on its own scene (including the
/// scene seed), never on the other members of the batch.
pub fn rollout_batch<P: Planner + ?Sized>(
    scenes: &[SceneConfig],
    planner: &mut P,
    cfg: &RolloutConfig,
) -> Result<Vec<EpisodeTrace>, RuntimeError> {
    if cfg.physics_per_state == 0 || cfg.replan_every == 0 {
        return Err(RuntimeError::Config("tick counts must be positive".into()));
    }
    for s in scenes {
        s.validate()?;
    }
    let clock = TickClock::new(cfg.physics_per_state, cfg.replan_every);
    let mut episodes: Vec<Episode> = scenes
        .iter()
        .map(|scene| Episode {
            scene,
            state: DoorState::default(),
            setpoint: door::handle_position(scene, 0.0),
            force: ForceSample::default(),
            plan: Vec::new(),
            plan_index: 0,
            observe_rng: stream_rng(scene.seed, 1),
            disturbance: cfg
                .disturbance
                .map(|d| DisturbanceInjector::new(d, scene.dt, stream_rng(scene.seed, 2))),
            ticks: Vec::with_capacity(scene.max_ticks()),
            done: None,
        })
        .collect();
    let mut tick = 0;
    loop {
        let active: Vec<usize> = (0..episodes.len())
            .filter(|&i| episodes[i].done.is_none())
            .collect();
        if active.is_empty() {
            break;
        }
        let within = clock.tick_within_plan(tick);
        if within == 0 {
            let requests: Vec<PlanRequest> = active
                .iter()
                .map(|&i| {
                    let e = &mut episodes[i];
                    PlanRequest {
                        scene: e.scene,
                        door: e.state,
                        observation: observe(
                            e.scene,
                            &e.state,
                            &mut e.observe_rng,
                            &cfg.observation_noise,
                        ),
                        state: e.setpoint,
                        force: e.force.raw,
                        noise_seed: splitmix(e.scene.seed ^ splitmix(e.plan_index as u64)),
                    }
                })
                .collect();
            let plans = planner.plan_batch(&requests);
            if plans.len() != requests.len() {
                return Err(RuntimeError::PlanCount {
                    got: plans.len(),
                    expected: requests.len(),
                });
            }
            for (&i, plan) in active.iter().zip(plans) {
                let e = &mut episodes[i];
                e.plan_index += 1;
                match plan {
                    Ok(p) if !p.is_empty() && p.iter().all(|v| v.is_finite()) => e.plan = p,
                    Ok(p) if p.is_empty() => {
                        e.done = Some((Termination::PlannerFault, Some("empty plan".into())))
                    }
                    Ok(_) => {
                        e.done = Some((
                            Termination::PlannerFault,
                            Some("plan contains non-finite states".into()),
                        ))
                    }
                    Err(msg) => e.done = Some((Termination::PlannerFault, Some(msg))),
                }
            }
        }
        for &i in &active {
            let e = &mut episodes[i];
            if e.done.is_some() {
                continue;
            }
            let (command, velocity) =
                inverse_dynamics(&e.plan, within, cfg.physics_per_state, e.scene.dt);
            let offset = e.disturbance.as_mut().map_or(Vec2::ZERO, |d| d.offset(tick));
            let r = match door::step(e.scene, &e.state, command, velocity, offset, e.scene.dt) {
                Ok(r) => r,
                Err(err) => {
                    e.done = Some((Termination::PlannerFault, Some(err.to_string())));
                    continue;
                }
            };
            e.ticks.push(TickRecord {
                time: (tick + 1) as f64 * e.scene.dt,
                angle: r.door_state.angle,
                angular_velocity: r.door_state.angular_velocity,
                ee_position: r.ee_position,
                command,
                disturbance: offset,
                force: r.force,
                plan_index: e.plan_index - 1,
                state_index: clock.state_index(tick),
            });
            e.state = r.door_state;
            e.setpoint = command + offset;
            e.force = r.force;
            if !r.grasp_intact {
                e.done = Some((Termination::GraspLost, None));
            } else if e.state.angle >= e.scene.success_angle {
                e.done = Some((Termination::Success, None));
            } else if tick + 1 >= e.scene.max_ticks() {
                e.done = Some((Termination::Timeout, None));
            }
        }
        tick += 1;
    }
    Ok(episodes
        .into_iter()
        .map(|e| {
            let (termination, diagnostic) = e.done.expect("finished");
            EpisodeTrace {
                scene: e.scene.clone(),
                ticks: e.ticks,
                termination,
                diagnostic,
            }
        })
        .collect())
}

pub fn rollout<P: Planner + ?Sized>(
    scene: &SceneConfig,
    planner: &mut P,
    cfg: &RolloutConfig,
) -> Result<EpisodeTrace, RuntimeError> {
    Ok(rollout_batch(std::slice::from_ref(scene), planner, cfg)?
        .pop()
        .expect("one trace"))
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    version: u32,
    scene: SceneConfig,
    termination: Termination,
    diagnostic: Option<String>,
    ticks: usize,
}

/// Writes each trace as a header line (format version, scene, termination
/// and tick count) followed by one line per tick.
pub fn write_traces(traces: &[EpisodeTrace], path: &Path) -> Result<(), RuntimeError> {
    let mut w = BufWriter::new(File::create(path)?);
    for trace in traces {
        let header = TraceHeader {
            version: TRACE_FORMAT_VERSION,
            scene: trace.scene.clone(),
            termination: trace.termination,
            diagnostic: trace.diagnostic.clone(),
            ticks: trace.ticks.len(),
        };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for tick in &trace.ticks {
            serde_json::to_writer(&mut w, tick).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<EpisodeTrace>, RuntimeError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let mut out = Vec::new();
    let format = |record: usize, e: &dyn std::fmt::Display| RuntimeError::Format {
        record,
        message: e.to_string(),
    };
    while let Some((i, line)) = lines.next() {
        let line = line?;
        let header: TraceHeader = serde_json::from_str(&line).map_err(|e| format(i + 1, &e))?;
        if header.version != TRACE_FORMAT_VERSION {
            return Err(format(i + 1, &format!("format version {}", header.version)));
        }
        let mut ticks = Vec::with_capacity(header.ticks);
        for _ in 0..header.ticks {
            let Some((j, line)) = lines.next() else {
                return Err(format(i + 1, &"trace ends before its last tick"));
            };
            ticks.push(serde_json::from_str(&line?).map_err(|e| format(j + 1, &e))?);
        }
        out.push(EpisodeTrace {
            scene: header.scene,
            ticks,
            termination: header.termination,
            diagnostic: header.diagnostic,
        });
    }
    Ok(out)
}
