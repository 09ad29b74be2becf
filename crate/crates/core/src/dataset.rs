//! Randomized scene sampling, noisy scene observations, oracle-labelled
//! demonstrations and the line-delimited episode file format.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::door::{self, DoorError, DoorState, ForceSample, SceneConfig};
use crate::geometry::Vec2;
use crate::model::Normalizer;
use crate::runtime::{inverse_dynamics, TickClock};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("invalid ranges: {0}")]
    InvalidRanges(String),
    #[error(transparent)]
    Door(#[from] DoorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("record {record}: format version {found}, expected {expected}")]
    Version {
        record: usize,
        found: u32,
        expected: u32,
    },
    #[error("record {record}: truncated")]
    Truncated { record: usize },
    #[error("record {record}: {message}")]
    Schema { record: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Always consume one draw so degenerate ranges keep the stream aligned.
        let u: f64 = rng.gen();
        self.min + u * (self.max - self.min)
    }

    fn check(&self, name: &str) -> Result<(), DatasetError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(DatasetError::InvalidRanges(format!(
                "{name}: [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn overlaps(&self, other: &Range) -> bool {
        self.min <= other.max && other.min <= self.max
    }
}

/// Door geometry for one scene pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub hinge_x: Range,
    pub hinge_y: Range,
    pub radius: Range,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Seen,
    Unseen,
}

impl std::fmt::Display for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pool::Seen => "seen",
            Pool::Unseen => "unseen",
        })
    }
}

impl std::str::FromStr for Pool {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seen" => Ok(Pool::Seen),
            "unseen" => Ok(Pool::Unseen),
            other => Err(format!("unknown pool {other:?} (expected seen|unseen)")),
        }
    }
}

/// Randomization ranges for every scene field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneRanges {
    pub seen: PoolGeometry,
    pub unseen: PoolGeometry,
    pub initial_angle: Range,
    /// Probability that a door opens counter-clockwise.
    pub positive_sign_probability: f64,
    pub door_inertia: Range,
    pub hinge_damping: Range,
    pub hinge_friction: Range,
    pub controller_stiffness: Range,
    pub controller_damping: Range,
    pub grasp_break_distance: f64,
    pub success_angle: f64,
    pub dt: f64,
    pub episode_time_budget: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            seen: PoolGeometry {
                hinge_x: Range::new(0.4, 0.8),
                hinge_y: Range::new(-0.3, 0.3),
                radius: Range::new(0.5, 0.95),
            },
            unseen: PoolGeometry {
                hinge_x: Range::new(0.82, 1.0),
                hinge_y: Range::new(-0.3, 0.3),
                radius: Range::new(0.96, 1.1),
            },
            initial_angle: Range::new(-PI, PI),
            positive_sign_probability: 0.5,
            door_inertia: Range::new(2.0, 10.0),
            hinge_damping: Range::new(0.5, 3.0),
            hinge_friction: Range::new(0.0, 1.5),
            controller_stiffness: Range::new(300.0, 1200.0),
            controller_damping: Range::new(10.0, 60.0),
            grasp_break_distance: 0.08,
            success_angle: 30f64.to_radians(),
            dt: 0.01,
            episode_time_budget: 12.0,
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for (name, g) in [("seen", &self.seen), ("unseen", &self.unseen)] {
            g.hinge_x.check(&format!("{name}.hinge_x"))?;
            g.hinge_y.check(&format!("{name}.hinge_y"))?;
            g.radius.check(&format!("{name}.radius"))?;
            if g.radius.min <= 0.0 {
                return Err(DatasetError::InvalidRanges(format!("{name}.radius must be positive")));
            }
        }
        let disjoint = !self.seen.radius.overlaps(&self.unseen.radius)
            || !self.seen.hinge_x.overlaps(&self.unseen.hinge_x)
            || !self.seen.hinge_y.overlaps(&self.unseen.hinge_y);
        if !disjoint {
            return Err(DatasetError::InvalidRanges(
                "seen and unseen geometry ranges overlap".into(),
            ));
        }
        self.initial_angle.check("initial_angle")?;
        self.door_inertia.check("door_inertia")?;
        self.hinge_damping.check("hinge_damping")?;
        self.hinge_friction.check("hinge_friction")?;
        self.controller_stiffness.check("controller_stiffness")?;
        self.controller_damping.check("controller_damping")?;
        if !(0.0..=1.0).contains(&self.positive_sign_probability) {
            return Err(DatasetError::InvalidRanges(
                "positive_sign_probability outside [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn pool(&self, pool: Pool) -> &PoolGeometry {
        match pool {
            Pool::Seen => &self.seen,
            Pool::Unseen => &self.unseen,
        }
    }
}

pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &SceneRanges,
    pool: Pool,
) -> Result<SceneConfig, DatasetError> {
    ranges.validate()?;
    let g = ranges.pool(pool);
    let hinge_position = Vec2::new(g.hinge_x.sample(rng), g.hinge_y.sample(rng));
    let door_radius = g.radius.sample(rng);
    let initial_angle = ranges.initial_angle.sample(rng);
    let u: f64 = rng.gen();
    let opening_sign = if u < ranges.positive_sign_probability { 1.0 } else { -1.0 };
    let scene = SceneConfig {
        hinge_position,
        door_radius,
        initial_angle,
        opening_sign,
        door_inertia: ranges.door_inertia.sample(rng),
        hinge_damping: ranges.hinge_damping.sample(rng),
        hinge_friction: ranges.hinge_friction.sample(rng),
        controller_stiffness: ranges.controller_stiffness.sample(rng),
        controller_damping: ranges.controller_damping.sample(rng),
        grasp_break_distance: ranges.grasp_break_distance,
        success_angle: ranges.success_angle,
        dt: ranges.dt,
        episode_time_budget: ranges.episode_time_budget,
        seed: rng.gen(),
    };
    scene.validate()?;
    Ok(scene)
}

/// Noisy low-dimensional description of the scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub hinge_estimate: Vec2,
    pub radius_estimate: f64,
    pub angle_estimate: f64,
    pub opening_sign: f64,
}

/// Standard deviations of the observation noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationNoise {
    pub hinge: f64,
    pub radius: f64,
    pub angle: f64,
}

impl Default for ObservationNoise {
    fn default() -> Self {
        Self {
            hinge: 0.01,
            radius: 0.01,
            angle: 0.02,
        }
    }
}

impl ObservationNoise {
    pub const NONE: ObservationNoise = ObservationNoise {
        hinge: 0.0,
        radius: 0.0,
        angle: 0.0,
    };
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    z * std
}

pub fn observe<R: Rng + ?Sized>(
    scene: &SceneConfig,
    state: &DoorState,
    rng: &mut R,
    noise: &ObservationNoise,
) -> Observation {
    let hx = scene.hinge_position.x + gaussian(rng, noise.hinge);
    let hy = scene.hinge_position.y + gaussian(rng, noise.hinge);
    let r = scene.door_radius + gaussian(rng, noise.radius);
    let a = state.angle + gaussian(rng, noise.angle);
    Observation {
        hinge_estimate: Vec2::new(hx, hy),
        radius_estimate: r.max(1e-6),
        angle_estimate: a,
        opening_sign: scene.opening_sign,
    }
}

/// How demonstrations are rolled out and labelled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    /// Label states per record.
    pub horizon: usize,
    /// Physics ticks between recorded steps (and between plan states).
    pub controller_rate: usize,
    /// Plan states executed before the demonstrator replans.
    pub replan_every: usize,
    /// Opening angle between consecutive plan states.
    pub angle_step: f64,
    /// Radius of the disc from which the demonstrator draws a setpoint
    /// offset at every replan. Zero gives a perfect demonstrator.
    pub expert_noise: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            horizon: 32,
            controller_rate: 8,
            replan_every: 8,
            angle_step: FRAC_PI_2 / 128.0,
            expert_noise: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    pub observation: Observation,
    /// Setpoint of the end effector at the last executed tick.
    pub state: Vec2,
    /// Raw force measured on the last executed tick.
    pub force: Vec2,
    pub labels: Vec<Vec2>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub scene: SceneConfig,
    pub steps: Vec<DemoStep>,
}

/// Result of rolling out the demonstrator on one scene.
#[derive(Clone, Debug)]
pub struct DemoRun {
    pub demo: Demonstration,
    /// Per-tick force samples of the executed rollout.
    pub forces: Vec<ForceSample>,
    pub grasp_lost: bool,
}

/// Rolls the oracle arc plan out through the door simulator, recording one
/// step every `controller_rate` ticks until the door reaches the success
/// angle or the time budget runs out.
pub fn run_demo<R: Rng + ?Sized>(
    scene: &SceneConfig,
    cfg: &DemoConfig,
    noise: &ObservationNoise,
    rng: &mut R,
) -> Result<DemoRun, DatasetError> {
    scene.validate()?;
    if cfg.horizon == 0 || cfg.controller_rate == 0 || cfg.replan_every == 0 {
        return Err(DatasetError::InvalidRanges("demo counts must be positive".into()));
    }
    let clock = TickClock::new(cfg.controller_rate, cfg.replan_every);
    let mut state = DoorState::default();
    let mut setpoint = door::handle_position(scene, 0.0);
    let mut force = ForceSample::default();
    let mut plan = Vec::new();
    let mut offset = Vec2::ZERO;
    let mut steps = Vec::new();
    let mut forces = Vec::new();
    let mut grasp_lost = false;
    for tick in 0..scene.max_ticks() {
        if tick % cfg.controller_rate == 0 {
            steps.push(DemoStep {
                observation: observe(scene, &state, rng, noise),
                state: setpoint,
                force: force.raw,
                labels: door::oracle_plan(scene, state.angle, cfg.horizon, cfg.angle_step),
            });
        }
        let within = clock.tick_within_plan(tick);
        if within == 0 {
            plan = door::oracle_plan(scene, state.angle, cfg.horizon, cfg.angle_step);
            offset = if cfg.expert_noise > 0.0 {
                let dir: f64 = rng.gen_range(-PI..PI);
                let r = cfg.expert_noise * rng.gen::<f64>().sqrt();
                Vec2::from_angle(dir) * r
            } else {
                Vec2::ZERO
            };
        }
        let (cmd, vel) = inverse_dynamics(&plan, within, cfg.controller_rate, scene.dt);
        let cmd = cmd + offset;
        let r = door::step(scene, &state, cmd, vel, Vec2::ZERO, scene.dt)?;
        forces.push(r.force);
        state = r.door_state;
        setpoint = cmd;
        force = r.force;
        if !r.grasp_intact {
            grasp_lost = true;
            break;
        }
        if state.angle >= scene.success_angle {
            break;
        }
    }
    Ok(DemoRun {
        demo: Demonstration {
            scene: scene.clone(),
            steps,
        },
        forces,
        grasp_lost,
    })
}

/// One labelled demonstration, or `None` when the grasp broke.
pub fn generate_demo<R: Rng + ?Sized>(
    scene: &SceneConfig,
    cfg: &DemoConfig,
    noise: &ObservationNoise,
    rng: &mut R,
) -> Result<Option<Demonstration>, DatasetError> {
    let run = run_demo(scene, cfg, noise, rng)?;
    Ok((!run.grasp_lost).then_some(run.demo))
}

/// `count` demonstrations from `pool`; scenes whose demonstration loses the
/// grasp are resampled. Returns the demonstrations and the discard count.
pub fn generate_split<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &SceneRanges,
    pool: Pool,
    count: usize,
    cfg: &DemoConfig,
    noise: &ObservationNoise,
) -> Result<(Vec<Demonstration>, usize), DatasetError> {
    let mut demos = Vec::with_capacity(count);
    let mut discarded = 0;
    while demos.len() < count {
        let scene = sample_scene(rng, ranges, pool)?;
        match generate_demo(&scene, cfg, noise, rng)? {
            Some(d) => demos.push(d),
            None => discarded += 1,
        }
    }
    Ok((demos, discarded))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub seen_train: usize,
    pub seen_test: usize,
    pub unseen_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            seen_train: 2000,
            seen_test: 200,
            unseen_test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub global_seed: u64,
    pub counts: SplitCounts,
    /// Demonstrations discarded for grasp loss and resampled, per split.
    pub discarded: SplitCounts,
    pub horizon: usize,
    pub ranges: SceneRanges,
    pub demo: DemoConfig,
    pub observation_noise: ObservationNoise,
    pub normalization: Option<Normalizer>,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const SEEN_TEST_FILE: &str = "seen_test.jsonl";
pub const UNSEEN_TEST_FILE: &str = "unseen_test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct RecordOut<'a> {
    version: u32,
    scene: &'a SceneConfig,
    steps: &'a [DemoStep],
}

#[derive(Deserialize)]
struct RecordIn {
    scene: SceneConfig,
    steps: Vec<DemoStep>,
}

#[derive(Deserialize)]
struct RecordVersion {
    version: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one JSON record per line.
pub fn write_dataset(demos: &[Demonstration], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for d in demos {
        let rec = RecordOut {
            version: DATASET_FORMAT_VERSION,
            scene: &d.scene,
            steps: &d.steps,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| DatasetError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Parses one record; `index` is 1-based and used in error reports.
pub fn parse_record(line: &str, index: usize) -> Result<Demonstration, DatasetError> {
    let classify = |e: serde_json::Error| {
        if e.is_eof() {
            DatasetError::Truncated { record: index }
        } else {
            DatasetError::Schema {
                record: index,
                message: e.to_string(),
            }
        }
    };
    let v: RecordVersion = serde_json::from_str(line).map_err(classify)?;
    if v.version != DATASET_FORMAT_VERSION {
        return Err(DatasetError::Version {
            record: index,
            found: v.version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let rec: RecordIn = serde_json::from_str(line).map_err(classify)?;
    let schema = |message: String| DatasetError::Schema {
        record: index,
        message,
    };
    rec.scene
        .validate()
        .map_err(|e| schema(e.to_string()))?;
    let horizon = rec.steps.first().map_or(0, |s| s.labels.len());
    for (i, s) in rec.steps.iter().enumerate() {
        if s.labels.len() != horizon {
            return Err(schema(format!(
                "step {i} has {} labels, expected {horizon}",
                s.labels.len()
            )));
        }
    }
    Ok(Demonstration {
        scene: rec.scene,
        steps: rec.steps,
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<Demonstration>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut demos = Vec::new();
    let mut horizon = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let d = parse_record(&line, i + 1)?;
        if let Some(l) = d.steps.first().map(|s| s.labels.len()) {
            match horizon {
                None => horizon = Some(l),
                Some(h) if h != l => {
                    return Err(DatasetError::Schema {
                        record: i + 1,
                        message: format!("label horizon {l} differs from {h}"),
                    })
                }
                _ => {}
            }
        }
        demos.push(d);
    }
    Ok(demos)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
        record: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(DatasetError::Version {
            record: 0,
            found: m.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixed_ranges() -> SceneRanges {
        let geom = |v: f64| PoolGeometry {
            hinge_x: Range::fixed(v),
            hinge_y: Range::fixed(0.1),
            radius: Range::fixed(v),
        };
        SceneRanges {
            seen: geom(0.7),
            unseen: geom(1.0),
            initial_angle: Range::fixed(0.5),
            positive_sign_probability: 1.0,
            door_inertia: Range::fixed(4.0),
            hinge_damping: Range::fixed(1.0),
            hinge_friction: Range::fixed(0.2),
            controller_stiffness: Range::fixed(800.0),
            controller_damping: Range::fixed(30.0),
            ..SceneRanges::default()
        }
    }

    #[test]
    fn degenerate_ranges_give_the_determined_scene() {
        let ranges = fixed_ranges();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_scene(&mut rng, &ranges, Pool::Seen).unwrap();
        assert_eq!(s.hinge_position, Vec2::new(0.7, 0.1));
        assert_eq!(s.door_radius, 0.7);
        assert_eq!(s.initial_angle, 0.5);
        assert_eq!(s.opening_sign, 1.0);
        assert_eq!(s.door_inertia, 4.0);
        assert_eq!(s.controller_stiffness, 800.0);
        let u = sample_scene(&mut rng, &ranges, Pool::Unseen).unwrap();
        assert_eq!(u.door_radius, 1.0);
    }

    #[test]
    fn same_seed_same_scene() {
        let ranges = SceneRanges::default();
        let a = sample_scene(&mut ChaCha8Rng::seed_from_u64(9), &ranges, Pool::Seen).unwrap();
        let b = sample_scene(&mut ChaCha8Rng::seed_from_u64(9), &ranges, Pool::Seen).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut r = SceneRanges::default();
        r.door_inertia = Range::new(3.0, 2.0);
        assert!(matches!(
            sample_scene(&mut ChaCha8Rng::seed_from_u64(0), &r, Pool::Seen),
            Err(DatasetError::InvalidRanges(_))
        ));
        let mut r = SceneRanges::default();
        r.unseen = r.seen;
        assert!(r.validate().is_err());
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let ranges = SceneRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_scene(&mut rng, &ranges, Pool::Seen).unwrap();
        let st = DoorState {
            angle: 0.2,
            angular_velocity: 0.1,
        };
        let o = observe(&s, &st, &mut rng, &ObservationNoise::NONE);
        assert_eq!(o.hinge_estimate, s.hinge_position);
        assert_eq!(o.radius_estimate, s.door_radius);
        assert_eq!(o.angle_estimate, 0.2);
        assert_eq!(o.opening_sign, s.opening_sign);
        let a = observe(&s, &st, &mut ChaCha8Rng::seed_from_u64(5), &ObservationNoise::default());
        let b = observe(&s, &st, &mut ChaCha8Rng::seed_from_u64(5), &ObservationNoise::default());
        assert_eq!(a, b);
    }

    #[test]
    fn record_errors_carry_index() {
        let ranges = SceneRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_scene(&mut rng, &ranges, Pool::Seen).unwrap();
        let line = serde_json::to_string(&RecordOut {
            version: 1,
            scene: &s,
            steps: &[],
        })
        .unwrap();
        assert!(parse_record(&line, 3).is_ok());
        let bumped = line.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            parse_record(&bumped, 4),
            Err(DatasetError::Version { record: 4, found: 2, .. })
        ));
        assert!(matches!(
            parse_record(&line[..line.len() / 2], 5),
            Err(DatasetError::Truncated { record: 5 })
        ));
        let broken = line.replacen("\"door_radius\"", "\"door_radios\"", 1);
        assert!(matches!(
            parse_record(&broken, 6),
            Err(DatasetError::Schema { record: 6, .. })
        ));
    }
}
