//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safediff_cli::commands::{CHECKPOINT_FILE, LOSS_FILE, REPORT_FILE, STEP_LOSS_FILE, TRACES_FILE};
use safediff_core::benchmark::{evaluate, safety_rates, MetricReport};
use safediff_core::dataset::{
    read_dataset, sample_scene, Demonstration, Pool, SceneRanges, MANIFEST_FILE, SEEN_TEST_FILE,
    TRAIN_FILE, UNSEEN_TEST_FILE,
};
use safediff_core::door::{decompose_force, handle_position, handle_tangent, SceneConfig};
use safediff_core::model::check::denoiser_gradient_error;
use safediff_core::model::{NetworkConfig, SafeDiffModel};
use safediff_core::runtime::{
    read_traces, rollout_batch, EpisodeTrace, OraclePlanner, RolloutConfig, Termination,
};
use safediff_core::Vec2;
use safediff_nn::check::{max_relative_error, numeric_gradient};
use safediff_nn::layers::{film, MultiHeadAttention, ResBlock, SelfAttentionBlock};
use safediff_nn::{Graph, ParamStore, Tensor, Var};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: u64, detail: String) -> Check {
    ensure(
        elapsed <= Duration::from_secs(limit_secs),
        format!("{detail}; {:.1}s (limit {limit_secs}s)", elapsed.as_secs_f64()),
    )
}

fn cli(args: &[&str]) {
    let mut full = vec!["safediff"];
    full.extend_from_slice(args);
    if let Err(e) = safediff_cli::run(full.iter().copied()) {
        panic!("safediff {}: {e}", args.join(" "));
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn fuzz_scene(rng: &mut ChaCha8Rng) -> SceneConfig {
    let pool = if rng.gen_bool(0.5) { Pool::Seen } else { Pool::Unseen };
    sample_scene(rng, &SceneRanges::default(), pool).expect("default ranges")
}

fn force_identity() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1_000_000 {
        let magnitude = 10f64.powf(rng.gen_range(-3.0..3.0));
        let f = Vec2::from_angle(rng.gen_range(-10.0..10.0)) * magnitude;
        let t = Vec2::from_angle(rng.gen_range(-10.0..10.0));
        let s = decompose_force(f, t).map_err(|e| e.to_string())?;
        let lhs = s.effective * s.effective + s.harmful * s.harmful;
        let rhs = f.dot(f);
        worst = worst.max((lhs - rhs).abs() / rhs);
    }
    let ok = worst < 1e-9;
    within(start.elapsed(), 5, format!("max relative error {worst:.2e} over 1e6 pairs"))
        .and_then(|d| ensure(ok, d))
}

fn geometry() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scenes: Vec<SceneConfig> = (0..1000).map(|_| fuzz_scene(&mut rng)).collect();
    let (mut arc, mut ortho, mut fd) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..1_000_000 {
        let s = &scenes[i % scenes.len()];
        let theta = rng.gen_range(-7.0..7.0);
        let h = handle_position(s, theta);
        arc = arc.max(((h - s.hinge_position).norm() - s.door_radius).abs());
        let t = handle_tangent(s, theta);
        ortho = ortho.max(t.dot(h - s.hinge_position).abs());
        if i % 10 == 0 {
            let delta = 1e-7;
            let d = handle_position(s, theta + delta) - h;
            fd = fd.max((d * (1.0 / d.norm()) - t).norm());
        }
    }
    let ok = arc < 1e-9 && ortho < 1e-12 && fd < 1e-6;
    within(
        start.elapsed(),
        10,
        format!("arc error {arc:.1e} m, tangent·radius {ortho:.1e}, finite-difference {fd:.1e}"),
    )
    .and_then(|d| ensure(ok, d))
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Gradient error of `build` with respect to each of its inputs, through a
/// random linear read-out.
fn primitive_error(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let readout = |g: &mut Graph, y: Var| {
        let w = g.constant(rand_tensor(g.shape(y), 99));
        let prod = g.mul(y, w).unwrap();
        g.sum(prod)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = build(&mut g, &vars);
    let loss = readout(&mut g, y);
    g.backward(loss);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).map_or(vec![0.0; t.len()], |s| s.to_vec());
        let numeric = numeric_gradient(t.data(), 1e-6, |probe| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, o)| {
                    let v = if i == j { Tensor::new(o.shape(), probe.to_vec()).unwrap() } else { o.clone() };
                    g.input(v)
                })
                .collect();
            let y = build(&mut g, &vars);
            let l = readout(&mut g, y);
            g.value(l).item()
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-3));
    }
    worst
}

/// Gradient error of a parameterized block with respect to its input and
/// every parameter.
fn block_error(store: &ParamStore, input: Tensor, build: impl Fn(&mut Graph, &ParamStore, Var) -> Var) -> f64 {
    let eval = |store: &ParamStore, x: Tensor| {
        let mut g = Graph::new();
        let x = g.input(x);
        let y = build(&mut g, store, x);
        let w = g.constant(rand_tensor(g.shape(y), 98));
        let prod = g.mul(y, w).unwrap();
        let l = g.sum(prod);
        (g, x, l)
    };
    let (mut g, x, l) = eval(store, input.clone());
    g.backward(l);
    let value = |store: &ParamStore, x: Tensor| {
        let (g, _, l) = eval(store, x);
        g.value(l).item()
    };
    let numeric = numeric_gradient(input.data(), 1e-6, |probe| {
        value(store, Tensor::new(input.shape(), probe.to_vec()).unwrap())
    });
    let mut worst = max_relative_error(g.grad(x).unwrap(), &numeric, 1e-3);
    let grads: Vec<_> = g.param_grads().map(|(id, gr)| (id, gr.map(|s| s.to_vec()))).collect();
    for (id, grad) in grads {
        let base = store.value(id).clone();
        let mut scratch = store.clone();
        let numeric = numeric_gradient(base.data(), 1e-6, |probe| {
            scratch.value_mut(id).data_mut().copy_from_slice(probe);
            value(&scratch, input.clone())
        });
        let analytic = grad.unwrap_or(vec![0.0; base.len()]);
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-3));
    }
    worst
}

fn gradients() -> Check {
    let start = Instant::now();
    let r = rand_tensor;
    let mut errors: Vec<(&str, f64)> = vec![
        ("add", primitive_error(vec![r(&[4, 5], 1), r(&[5], 2)], |g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", primitive_error(vec![r(&[4, 5], 3), r(&[4, 5], 4)], |g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", primitive_error(vec![r(&[2, 4, 5], 5), r(&[2, 1, 5], 6)], |g, v| g.mul(v[0], v[1]).unwrap())),
        ("scale", primitive_error(vec![r(&[4, 5], 7)], |g, v| g.scale(v[0], -1.3))),
        ("matmul", primitive_error(vec![r(&[2, 4, 5], 8), r(&[5, 3], 9)], |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("batched matmul", primitive_error(vec![r(&[2, 3, 4, 5], 10), r(&[2, 3, 5, 2], 11)], |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("softmax", primitive_error(vec![r(&[4, 5], 12)], |g, v| g.softmax(v[0]))),
        ("layer_norm", primitive_error(vec![r(&[4, 5], 13)], |g, v| g.layer_norm(v[0]))),
        ("gelu", primitive_error(vec![r(&[4, 5], 14)], |g, v| g.gelu(v[0]))),
        ("clamp", primitive_error(
            vec![Tensor::from_fn(&[4, 5], |i| [-2.0, -0.4, 0.3, 0.9, 2.5][i % 5] + 0.01 * i as f64)],
            |g, v| g.clamp(v[0], -1.5, 1.5),
        )),
        ("reshape", primitive_error(vec![r(&[4, 5], 15)], |g, v| g.reshape(v[0], &[2, 10]).unwrap())),
        ("transpose", primitive_error(vec![r(&[4, 5], 16)], |g, v| g.transpose(v[0]).unwrap())),
        ("permute", primitive_error(vec![r(&[2, 3, 4], 17)], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap())),
        ("concat", primitive_error(vec![r(&[4, 5], 18), r(&[4, 2], 19)], |g, v| g.concat(&[v[0], v[1]], 1).unwrap())),
        ("narrow", primitive_error(vec![r(&[4, 5], 20)], |g, v| g.narrow(v[0], 1, 1, 3).unwrap())),
        ("unfold_time", primitive_error(vec![r(&[2, 4, 5], 21)], |g, v| g.unfold_time(v[0], 3).unwrap())),
        ("mse", primitive_error(vec![r(&[4, 5], 22), r(&[4, 5], 23)], |g, v| g.mse(v[0], v[1]).unwrap())),
        ("mean", primitive_error(vec![r(&[4, 5], 24)], |g, v| g.mean(v[0]))),
        ("film", primitive_error(vec![r(&[2, 4, 5], 25), r(&[2, 5], 26), r(&[2, 5], 27)], |g, v| {
            film(g, v[0], v[1], v[2]).unwrap()
        })),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut store = ParamStore::new();
    let attn = SelfAttentionBlock::new(&mut store, &mut rng, "s", 4, 2).unwrap();
    errors.push(("self attention", block_error(&store, r(&[2, 3, 4], 31), |g, s, x| attn.forward(g, s, x).unwrap())));
    let mut store = ParamStore::new();
    let cross = MultiHeadAttention::new(&mut store, &mut rng, "c", 4, 3, 2).unwrap();
    let ctx = r(&[2, 5, 3], 32);
    errors.push(("cross attention", block_error(&store, r(&[2, 3, 4], 33), |g, s, x| {
        let c = g.constant(ctx.clone());
        cross.forward(g, s, x, c).unwrap()
    })));
    let mut store = ParamStore::new();
    let res = ResBlock::new(&mut store, &mut rng, "r", 3, 4).unwrap();
    errors.push(("residual block", block_error(&store, r(&[2, 5, 3], 34), |g, s, x| res.forward(g, s, x).unwrap())));
    let toy = NetworkConfig {
        horizon: 8,
        widths: vec![8, 8],
        heads: 2,
        cond_dim: 8,
        time_dim: 8,
        force_tokens: 2,
        force_dim: 8,
        vision_only: false,
    };
    errors.push(("denoiser", denoiser_gradient_error(&toy, 1).map_err(|e| e.to_string())?));
    let (name, worst) = errors
        .iter()
        .copied()
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let ok = worst < 1e-4;
    within(
        start.elapsed(),
        120,
        format!("{} checks, worst relative error {worst:.1e} ({name})", errors.len()),
    )
    .and_then(|d| ensure(ok, d))
}

/// Shared products of the desk-scale pipeline.
struct Desk {
    data: PathBuf,
    vt: SafeDiffModel,
    train_time: Duration,
    runs: BTreeMap<&'static str, Vec<EpisodeTrace>>,
}

impl Desk {
    fn build(root: &Path) -> Desk {
        let data = root.join("data");
        cli(&["gen-data", "--seed", "7", "--out", p(&data)]);
        let start = Instant::now();
        let vt_dir = root.join("vt");
        let v_dir = root.join("v");
        cli(&["train", "--seed", "1", "--data", p(&data), "--out", p(&vt_dir)]);
        cli(&["train", "--seed", "1", "--vision-only", "--data", p(&data), "--out", p(&v_dir)]);
        let train_time = start.elapsed() / 2;
        let runs = [
            ("vt-seen", &vt_dir, "seen", false),
            ("vt-unseen", &vt_dir, "unseen", false),
            ("v-unseen", &v_dir, "unseen", false),
            ("vt-unseen-disturbed", &vt_dir, "unseen", true),
            ("v-unseen-disturbed", &v_dir, "unseen", true),
        ]
        .into_iter()
        .map(|(name, model, pool, disturbed)| {
            let out = root.join(name);
            let ckpt = model.join(CHECKPOINT_FILE);
            let mut args = vec!["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--pool", pool, "--out", p(&out)];
            if disturbed {
                args.push("--disturbance");
            }
            cli(&args);
            (name, read_traces(&out.join(TRACES_FILE)).expect("eval traces"))
        })
        .collect();
        Desk {
            vt: SafeDiffModel::load(&vt_dir.join(CHECKPOINT_FILE)).expect("V+T checkpoint"),
            data,
            train_time,
            runs,
        }
    }

    fn report(&self, run: &str, label: &str) -> MetricReport {
        evaluate(&self.runs[run], &[5.0, 10.0, 15.0, 20.0], label, run, "")
    }

    fn seen_test(&self) -> Vec<Demonstration> {
        read_dataset(&self.data.join(SEEN_TEST_FILE)).expect("seen test split")
    }
}

fn plan_inputs(demos: &[Demonstration]) -> Vec<(usize, (safediff_core::dataset::Observation, Vec2, Vec2))> {
    demos
        .iter()
        .enumerate()
        .flat_map(|(i, d)| {
            [0, d.steps.len() / 2]
                .into_iter()
                .map(move |k| (i, (d.steps[k].observation, d.steps[k].state, d.steps[k].force)))
        })
        .collect()
}

fn diffusion_sanity(desk: &Desk) -> Check {
    let demos = desk.seen_test();
    let inputs = plan_inputs(&demos);
    let seeds: Vec<u64> = (0..inputs.len() as u64).collect();
    let raw: Vec<_> = inputs.iter().map(|(_, x)| *x).collect();
    let plans = desk.vt.planner().plan_raw(&raw, &seeds).map_err(|e| e.to_string())?;
    let (mut total, mut count) = (0.0, 0usize);
    for ((i, _), plan) in inputs.iter().zip(&plans) {
        let s = &demos[*i].scene;
        for q in plan {
            total += ((*q - s.hinge_position).norm() - s.door_radius).abs();
            count += 1;
        }
    }
    let dist = total / count as f64;
    let sur = desk.report("vt-seen", "V+T").success_rate();
    let ok = dist < 0.02 && sur >= 0.95 && desk.train_time <= Duration::from_secs(30 * 60);
    ensure(
        ok,
        format!(
            "distance to arc {dist:.4} m over {} plans, seen SuR {:.1}%, training {:.0}s per model",
            plans.len(),
            100.0 * sur,
            desk.train_time.as_secs_f64()
        ),
    )
}

fn conditioning_sensitivity(desk: &Desk) -> Check {
    let demos = desk.seen_test();
    let raw: Vec<_> = demos.iter().take(50).map(|d| (d.steps[0].observation, d.steps[0].state, d.steps[0].force)).collect();
    let moved: Vec<_> = raw
        .iter()
        .map(|(o, s, f)| {
            let mut o = *o;
            o.radius_estimate += 0.1;
            (o, *s, *f)
        })
        .collect();
    let seeds: Vec<u64> = (0..raw.len() as u64).collect();
    let planner = desk.vt.planner();
    let a = planner.plan_raw(&raw, &seeds).map_err(|e| e.to_string())?;
    let b = planner.plan_raw(&moved, &seeds).map_err(|e| e.to_string())?;
    let (mut total, mut n) = (0.0, 0);
    for (pa, pb) in a.iter().zip(&b) {
        for (x, y) in pa.iter().zip(pb) {
            total += (*x - *y).norm();
            n += 1;
        }
    }
    let shift = total / n as f64;
    let noise = safediff_core::dataset::ObservationNoise::default().radius;
    ensure(
        shift > noise,
        format!("radius estimate +0.1 m moves plan states by {shift:.4} m (observation noise {noise} m)"),
    )
}

fn ablation(desk: &Desk) -> Check {
    let vt = desk.report("vt-unseen", "V+T");
    let v = desk.report("v-unseen", "V");
    let (_, vt80) = vt.safety_rates_at(10.0).expect("threshold 10");
    let (_, v80) = v.safety_rates_at(10.0).expect("threshold 10");
    let (vt80, v80) = (vt80.unwrap_or(0.0), v80.unwrap_or(0.0));
    let ok = vt.average_harmful_force < v.average_harmful_force && vt80 >= v80 + 0.10;
    ensure(
        ok,
        format!(
            "unseen AHF {:.2} N (V+T) vs {:.2} N (V); SaR-80@10N {:.1}% vs {:.1}%",
            vt.average_harmful_force,
            v.average_harmful_force,
            100.0 * vt80,
            100.0 * v80
        ),
    )
}

fn disturbance(desk: &Desk) -> Check {
    let vt = desk.report("vt-unseen-disturbed", "V+T");
    let v = desk.report("v-unseen-disturbed", "V");
    let ok = vt.success_rate() >= v.success_rate() + 0.15
        && vt.average_harmful_force < v.average_harmful_force;
    ensure(
        ok,
        format!(
            "disturbed unseen SuR {:.1}% (V+T) vs {:.1}% (V); AHF {:.2} N vs {:.2} N",
            100.0 * vt.success_rate(),
            100.0 * v.success_rate(),
            vt.average_harmful_force,
            v.average_harmful_force
        ),
    )
}

fn seen_scenes(desk: &Desk) -> Vec<SceneConfig> {
    desk.seen_test().into_iter().map(|d| d.scene).collect()
}

fn oracle_baseline(desk: &Desk, corpora: &mut Vec<Vec<EpisodeTrace>>) -> Check {
    let scenes = seen_scenes(desk);
    let manifest = safediff_core::dataset::read_manifest(&desk.data.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
    let mut oracle = OraclePlanner {
        horizon: manifest.horizon,
        angle_step: manifest.demo.angle_step,
    };
    let noiseless = RolloutConfig {
        observation_noise: safediff_core::dataset::ObservationNoise::NONE,
        ..RolloutConfig::default()
    };

    // Calibration: the same plans integrated with a ten times finer step.
    let fine: Vec<SceneConfig> = scenes
        .iter()
        .take(20)
        .map(|s| SceneConfig { dt: s.dt / 10.0, ..s.clone() })
        .collect();
    let fine_cfg = RolloutConfig {
        physics_per_state: noiseless.physics_per_state * 10,
        ..noiseless
    };
    let fine_traces = rollout_batch(&fine, &mut oracle, &fine_cfg).map_err(|e| e.to_string())?;
    let calibration = peak_harmful(&fine_traces);
    let bound = 1.0;

    let start = Instant::now();
    let traces = rollout_batch(&scenes, &mut oracle, &noiseless).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let peak = peak_harmful(&traces);
    let sur = traces.iter().filter(|t| t.succeeded()).count() as f64 / traces.len() as f64;
    corpora.push(traces);
    let ok = peak < bound && calibration < bound && sur >= 0.99;
    within(
        elapsed,
        120,
        format!(
            "peak per-tick harmful force {peak:.3} N (fine-step calibration {calibration:.3} N, bound {bound} N), SuR {:.1}% on {} scenes",
            100.0 * sur,
            scenes.len()
        ),
    )
    .and_then(|d| ensure(ok, d))
}

fn peak_harmful(traces: &[EpisodeTrace]) -> f64 {
    traces
        .iter()
        .flat_map(|t| t.ticks.iter().map(|k| k.force.harmful))
        .fold(0.0, f64::max)
}

/// Metrics recomputed from scratch with no shared code.
fn brute_force(traces: &[EpisodeTrace], f: f64) -> (usize, usize, usize, f64) {
    let mut successes = 0;
    let (mut safe, mut sub_safe) = (0, 0);
    let (mut sum, mut ticks) = (0.0, 0usize);
    for t in traces {
        for k in &t.ticks {
            sum += k.force.harmful;
            ticks += 1;
        }
        let reached = t.ticks.iter().enumerate().any(|(i, k)| {
            k.angle >= t.scene.success_angle
                && !(i + 1 == t.ticks.len() && t.termination == Termination::GraspLost)
        });
        if !reached {
            continue;
        }
        successes += 1;
        let mut peaks: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for k in &t.ticks {
            let e = peaks.entry((k.plan_index, k.state_index)).or_insert(0.0);
            *e = e.max(k.force.harmful);
        }
        let below = peaks.values().filter(|&&v| v < f).count();
        if 100 * below >= 95 * peaks.len() {
            safe += 1;
        }
        if 100 * below >= 80 * peaks.len() {
            sub_safe += 1;
        }
    }
    (successes, safe, sub_safe, if ticks == 0 { 0.0 } else { sum / ticks as f64 })
}

fn metric_equivalence(corpora: &[Vec<EpisodeTrace>]) -> Check {
    let sweep: Vec<f64> = (1..=60).map(|i| i as f64 * 0.5).collect();
    let mut checked = 0;
    for (c, traces) in corpora.iter().enumerate() {
        let report = evaluate(traces, &sweep, "", "", "");
        let mut previous = (0.0, 0.0);
        for (i, &f) in sweep.iter().enumerate() {
            let (successes, safe, sub_safe, ahf) = brute_force(traces, f);
            let counts = &report.thresholds[i];
            if report.num_success != successes
                || counts.num_safe != safe
                || counts.num_sub_safe != sub_safe
                || report.average_harmful_force.to_bits() != ahf.to_bits()
                || (report.success_rate() - successes as f64 / traces.len().max(1) as f64).abs() > 0.0
            {
                return Err(format!("corpus {c} differs from the recount at {f} N"));
            }
            if let (Some(s95), Some(s80)) = safety_rates(traces, f) {
                if s80 < s95 || s95 < previous.0 || s80 < previous.1 {
                    return Err(format!("corpus {c}: monotonicity or dominance broken at {f} N"));
                }
                previous = (s95, s80);
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{} corpora x {} thresholds agree exactly; SaR monotone in f and SaR-80 >= SaR-95",
        corpora.len(),
        checked / corpora.len().max(1)
    ))
}

fn determinism(root: &Path) -> Check {
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    let config = root.join("small.json");
    std::fs::write(&config, r#"{"train": {"epochs": 5}}"#).map_err(|e| e.to_string())?;
    let run = |dir: &Path| {
        let data = dir.join("data");
        let model = dir.join("model");
        let eval = dir.join("eval");
        cli(&["gen-data", "--seed", "11", "--count", "100", "--config", p(&config), "--out", p(&data)]);
        cli(&["train", "--seed", "12", "--data", p(&data), "--config", p(&config), "--out", p(&model)]);
        let ckpt = model.join(CHECKPOINT_FILE);
        cli(&["eval", "--data", p(&data), "--checkpoint", p(&ckpt), "--pool", "unseen", "--disturbance", "--config", p(&config), "--out", p(&eval)]);
    };
    let (a, b) = (root.join("first"), root.join("second"));
    run(&a);
    run(&b);
    let files = [
        "data/".to_string() + TRAIN_FILE,
        "data/".to_string() + SEEN_TEST_FILE,
        "data/".to_string() + UNSEEN_TEST_FILE,
        "data/".to_string() + MANIFEST_FILE,
        "model/".to_string() + LOSS_FILE,
        "model/".to_string() + STEP_LOSS_FILE,
        "model/".to_string() + CHECKPOINT_FILE,
        "eval/".to_string() + TRACES_FILE,
        "eval/".to_string() + REPORT_FILE,
    ];
    for f in &files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical across two runs", files.len()))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut lines: Vec<(String, Check)> = Vec::new();
    let mut record = |id: &str, name: &str, check: Check| {
        let status = if check.is_ok() { "PASS" } else { "FAIL" };
        let detail = check.as_ref().map_or_else(|e| e.clone(), |d| d.clone());
        println!("[{status}] {id} {name}: {detail}");
        lines.push((id.to_string(), check));
    };

    record("A1", "force decomposition identity", force_identity());
    record("A2", "geometry suite", geometry());
    record("A3", "gradient integrity", gradients());

    let desk = Desk::build(&root.path().join("desk"));
    record("A4", "diffusion sanity", diffusion_sanity(&desk));
    record("A5", "ablation direction", ablation(&desk));
    record("A6", "disturbance direction", disturbance(&desk));
    let mut corpora: Vec<Vec<EpisodeTrace>> = desk.runs.values().cloned().collect();
    record("A7", "oracle safety baseline", oracle_baseline(&desk, &mut corpora));
    record("A8", "metric oracle equivalence", metric_equivalence(&corpora));
    record("A9", "determinism", determinism(&root.path().join("repeat")));
    record("P", "conditioning sensitivity", conditioning_sensitivity(&desk));

    let failed: Vec<&str> = lines.iter().filter(|(_, c)| c.is_err()).map(|(id, _)| id.as_str()).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
