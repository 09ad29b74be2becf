use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safediff_core::dataset::{
    generate_split, observe, read_dataset, sample_scene, write_dataset, DatasetError, DemoConfig,
    DemoStep, Demonstration, Observation, ObservationNoise, Pool, SceneRanges,
};
use safediff_core::door::DoorState;
use safediff_core::Vec2;

fn demos(seed: u64, pool: Pool, count: usize) -> Vec<Demonstration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_split(
        &mut rng,
        &SceneRanges::default(),
        pool,
        count,
        &DemoConfig::default(),
        &ObservationNoise::default(),
    )
    .unwrap()
    .0
}

#[test]
fn every_label_lies_on_its_arc() {
    for (seed, pool) in [(1, Pool::Seen), (2, Pool::Unseen)] {
        for d in demos(seed, pool, 40) {
            for s in &d.steps {
                assert_eq!(s.labels.len(), DemoConfig::default().horizon);
                for l in &s.labels {
                    let r = (*l - d.scene.hinge_position).norm();
                    assert!((r - d.scene.door_radius).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn empty_and_hundred_demo_datasets_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    write_dataset(&[], &path).unwrap();
    assert!(read_dataset(&path).unwrap().is_empty());

    let set = demos(3, Pool::Seen, 100);
    let path = dir.path().join("full.jsonl");
    write_dataset(&set, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), set);
}

#[test]
fn corrupted_record_is_reported_by_index() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&demos(4, Pool::Seen, 10), &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[6] = lines[6].replacen("\"door_radius\":", "\"door_radius\":\"x\",\"_\":", 1);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    match read_dataset(&path) {
        Err(DatasetError::Schema { record, .. }) => assert_eq!(record, 7),
        other => panic!("expected a schema error, got {other:?}"),
    }
    lines.truncate(7);
    let half = lines[6].len() / 2;
    lines[6].truncate(half);
    std::fs::write(&path, lines.join("\n")).unwrap();
    assert!(matches!(read_dataset(&path), Err(DatasetError::Truncated { record: 7 })));
}

#[test]
fn observation_noise_has_the_configured_spread() {
    let s = sample_scene(&mut ChaCha8Rng::seed_from_u64(5), &SceneRanges::default(), Pool::Seen)
        .unwrap();
    let noise = ObservationNoise::default();
    let state = DoorState {
        angle: 0.3,
        angular_velocity: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 40_000;
    let obs: Vec<Observation> = (0..n).map(|_| observe(&s, &state, &mut rng, &noise)).collect();
    let std = |f: &dyn Fn(&Observation) -> f64| {
        let m = obs.iter().map(f).sum::<f64>() / n as f64;
        (obs.iter().map(|o| (f(o) - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let checks = [
        (std(&|o| o.hinge_estimate.x), noise.hinge),
        (std(&|o| o.hinge_estimate.y), noise.hinge),
        (std(&|o| o.radius_estimate), noise.radius),
        (std(&|o| o.angle_estimate), noise.angle),
    ];
    for (got, want) in checks {
        assert!((got / want - 1.0).abs() < 0.03, "{got} vs {want}");
    }
}

fn arbitrary_finite() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |v| v.is_finite())
}

fn vec2() -> impl Strategy<Value = Vec2> {
    (arbitrary_finite(), arbitrary_finite()).prop_map(|(x, y)| Vec2::new(x, y))
}

fn step_strategy() -> impl Strategy<Value = DemoStep> {
    (
        vec2(),
        arbitrary_finite(),
        arbitrary_finite(),
        vec2(),
        vec2(),
        prop::collection::vec(vec2(), 3),
    )
        .prop_map(|(hinge, radius, angle, state, force, labels)| DemoStep {
            observation: Observation {
                hinge_estimate: hinge,
                radius_estimate: radius,
                angle_estimate: angle,
                opening_sign: -1.0,
            },
            state,
            force,
            labels,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_scenes_respect_their_pool(seed in any::<u64>()) {
        let ranges = SceneRanges::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pool in [Pool::Seen, Pool::Unseen] {
            let other = match pool { Pool::Seen => Pool::Unseen, Pool::Unseen => Pool::Seen };
            let s = sample_scene(&mut rng, &ranges, pool).unwrap();
            let inside = |p: Pool| {
                let g = ranges.pool(p);
                g.hinge_x.contains(s.hinge_position.x)
                    && g.hinge_y.contains(s.hinge_position.y)
                    && g.radius.contains(s.door_radius)
            };
            prop_assert!(inside(pool));
            prop_assert!(!inside(other));
            prop_assert!(ranges.initial_angle.contains(s.initial_angle));
            prop_assert!(s.opening_sign == 1.0 || s.opening_sign == -1.0);
            prop_assert!(ranges.door_inertia.contains(s.door_inertia));
            prop_assert!(ranges.hinge_damping.contains(s.hinge_damping));
            prop_assert!(ranges.hinge_friction.contains(s.hinge_friction));
            prop_assert!(ranges.controller_stiffness.contains(s.controller_stiffness));
            prop_assert!(ranges.controller_damping.contains(s.controller_damping));
        }
    }

    #[test]
    fn records_round_trip_any_finite_double(steps in prop::collection::vec(step_strategy(), 0..4)) {
        let scene = sample_scene(&mut ChaCha8Rng::seed_from_u64(1), &SceneRanges::default(), Pool::Seen).unwrap();
        let demo = Demonstration { scene, steps };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_dataset(std::slice::from_ref(&demo), &path).unwrap();
        let back = read_dataset(&path).unwrap();
        prop_assert_eq!(back.len(), 1);
        let bits = |d: &Demonstration| -> Vec<u64> {
            d.steps.iter().flat_map(|s| {
                let mut v = vec![
                    s.observation.hinge_estimate.x, s.observation.hinge_estimate.y,
                    s.observation.radius_estimate, s.observation.angle_estimate,
                    s.state.x, s.state.y, s.force.x, s.force.y,
                ];
                v.extend(s.labels.iter().flat_map(|l| [l.x, l.y]));
                v.into_iter().map(f64::to_bits).collect::<Vec<_>>()
            }).collect()
        };
        prop_assert_eq!(bits(&back[0]), bits(&demo));
    }
}
