use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safediff_core::benchmark::{evaluate, report_csv, report_text, MetricReport};
use safediff_core::dataset::{
    generate_split, read_dataset, read_manifest, write_dataset, write_manifest, DatasetManifest,
    Demonstration, Pool, SplitCounts, DATASET_FORMAT_VERSION, MANIFEST_FILE, SEEN_TEST_FILE,
    TRAIN_FILE, UNSEEN_TEST_FILE,
};
use safediff_core::door::SceneConfig;
use safediff_core::model::{self, ModelConfig, Normalizer, SafeDiffModel, TrainingSet};
use safediff_core::runtime::{
    rollout_batch, write_traces, EpisodeTrace, OraclePlanner, Planner, RolloutConfig, Termination,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::{CliError, EpisodeArgs, EvalArgs, GenDataArgs, PlannerKind, ReportArgs, RolloutArgs, TrainArgs};

pub const RUN_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const STEP_LOSS_FILE: &str = "step_loss.csv";
pub const TRAIN_RUN_FILE: &str = "train.json";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const REPORT_FILE: &str = "report.csv";
pub const RUN_FILE: &str = "run.json";

/// Scenes handed to one planner batch during evaluation.
const EVAL_CHUNK: usize = 64;

fn data_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(data_err(dir))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("record serializes") + "\n";
    std::fs::write(path, text).map_err(data_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(data_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn echo<T: Serialize>(command: &str, value: &T) {
    eprintln!(
        "{command}: {}",
        serde_json::to_string(value).expect("config serializes")
    );
}

fn split_seed(seed: u64, split: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split);
    rng
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    if let Some(n) = args.count {
        cfg.counts = SplitCounts {
            seen_train: n,
            seen_test: n / 10,
            unseen_test: n / 10,
        };
    }
    cfg.ranges.validate()?;
    echo("gen-data", &(&cfg.counts, &cfg.ranges, &cfg.demo, args.seed));
    let out = &args.common.out;
    create_dir(out)?;
    let splits = [
        (TRAIN_FILE, Pool::Seen, cfg.counts.seen_train),
        (SEEN_TEST_FILE, Pool::Seen, cfg.counts.seen_test),
        (UNSEEN_TEST_FILE, Pool::Unseen, cfg.counts.unseen_test),
    ];
    let mut discarded = [0usize; 3];
    let mut train_demos = Vec::new();
    for (i, (file, pool, count)) in splits.into_iter().enumerate() {
        let mut rng = split_seed(args.seed, i as u64);
        let (demos, dropped) = generate_split(
            &mut rng,
            &cfg.ranges,
            pool,
            count,
            &cfg.demo,
            &cfg.observation_noise,
        )?;
        discarded[i] = dropped;
        write_dataset(&demos, &out.join(file))?;
        eprintln!("gen-data: {file}: {} demonstrations, {dropped} discarded", demos.len());
        if i == 0 {
            train_demos = demos;
        }
    }
    let normalization = if train_demos.is_empty() {
        None
    } else {
        Some(Normalizer::fit(&train_demos)?)
    };
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        global_seed: args.seed,
        counts: cfg.counts,
        discarded: SplitCounts {
            seen_train: discarded[0],
            seen_test: discarded[1],
            unseen_test: discarded[2],
        },
        horizon: cfg.demo.horizon,
        ranges: cfg.ranges,
        demo: cfg.demo,
        observation_noise: cfg.observation_noise,
        normalization,
    };
    write_manifest(&manifest, &out.join(MANIFEST_FILE))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainRun {
    pub format_version: u32,
    pub seed: u64,
    pub dataset_seed: u64,
    pub train_demonstrations: usize,
    pub model: ModelConfig,
    pub train: model::TrainConfig,
    pub epochs_completed: usize,
    pub final_loss: Option<f64>,
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    let manifest = read_manifest(&args.data.join(MANIFEST_FILE))?;
    let demos = read_dataset(&args.data.join(TRAIN_FILE))?;
    let normalizer = manifest.normalization.clone().ok_or_else(|| {
        CliError::Data(format!(
            "{}: dataset has no training demonstrations",
            args.data.display()
        ))
    })?;
    cfg.model.network.horizon = manifest.horizon;
    cfg.model.network.vision_only |= args.vision_only;
    cfg.train.seed = args.seed.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    echo("train", &(&cfg.model, &cfg.train, args.seed));

    let out = &args.common.out;
    create_dir(out)?;
    let mut model = SafeDiffModel::new(cfg.model.clone(), normalizer, args.seed)?;
    let set = TrainingSet::build(&demos, &model)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;

    let loss_path = out.join(LOSS_FILE);
    let mut loss_file = BufWriter::new(File::create(&loss_path).map_err(data_err(&loss_path))?);
    writeln!(loss_file, "epoch,loss").map_err(data_err(&loss_path))?;
    let mut epoch_error = None;
    let mut completed = 0;
    let result = model::train(&mut model, &set, &cfg.train, |epoch, loss, m| {
        if epoch_error.is_some() {
            return;
        }
        completed = epoch + 1;
        eprintln!("train: epoch {epoch} loss {loss:.6}");
        let written = writeln!(loss_file, "{epoch},{loss}")
            .and_then(|_| loss_file.flush())
            .map_err(data_err(&loss_path));
        epoch_error = written.err().or_else(|| m.save(&ckpt).err().map(CliError::from));
    });
    if let Some(e) = epoch_error {
        return Err(e);
    }
    let report = result.map_err(|e| match CliError::from(e) {
        CliError::Numeric(m) => CliError::Numeric(format!(
            "{m}; last good checkpoint after {completed} epochs kept at {}",
            ckpt.display()
        )),
        other => other,
    })?;

    let step_path = out.join(STEP_LOSS_FILE);
    let mut steps = String::from("step,loss\n");
    for (i, l) in report.step_losses.iter().enumerate() {
        steps.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&step_path, steps).map_err(data_err(&step_path))?;
    write_json(
        &TrainRun {
            format_version: RUN_FORMAT_VERSION,
            seed: args.seed,
            dataset_seed: manifest.global_seed,
            train_demonstrations: demos.len(),
            model: cfg.model,
            train: cfg.train,
            epochs_completed: completed,
            final_loss: report.epoch_losses.last().copied(),
        },
        &out.join(TRAIN_RUN_FILE),
    )
}

/// Identifies the planner, scenes and settings behind a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub format_version: u32,
    pub planner: String,
    pub pool: String,
    pub condition: String,
    pub seed: Option<u64>,
    pub dataset_seed: u64,
    pub scenes: usize,
    pub thresholds: Vec<f64>,
    pub rollout: RolloutConfig,
    pub model: Option<ModelConfig>,
    pub model_init_seed: Option<u64>,
}

enum LoadedPlanner {
    Oracle(OraclePlanner),
    Model(Box<SafeDiffModel>),
}

impl LoadedPlanner {
    fn label(&self) -> &'static str {
        match self {
            LoadedPlanner::Oracle(_) => "oracle",
            LoadedPlanner::Model(m) if m.vision_only() => "V",
            LoadedPlanner::Model(_) => "V+T",
        }
    }
}

struct Episodes {
    manifest: DatasetManifest,
    scenes: Vec<SceneConfig>,
    planner: LoadedPlanner,
    rollout: RolloutConfig,
    condition: &'static str,
}

fn split_file(pool: Pool) -> &'static str {
    match pool {
        Pool::Seen => SEEN_TEST_FILE,
        Pool::Unseen => UNSEEN_TEST_FILE,
    }
}

fn mix_seed(scene_seed: u64, seed: u64) -> u64 {
    let mut z = scene_seed ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn load_episodes(args: &EpisodeArgs, cfg: &ExperimentConfig) -> Result<Episodes, CliError> {
    let manifest = read_manifest(&args.data.join(MANIFEST_FILE))?;
    let demos: Vec<Demonstration> = read_dataset(&args.data.join(split_file(args.pool)))?;
    let mut scenes: Vec<SceneConfig> = demos.into_iter().map(|d| d.scene).collect();
    if let Some(seed) = args.seed {
        for s in &mut scenes {
            s.seed = mix_seed(s.seed, seed);
        }
    }
    let planner = match args.planner {
        PlannerKind::Oracle => {
            if args.vision_only {
                return Err(CliError::Usage("--vision-only needs the safediff planner".into()));
            }
            LoadedPlanner::Oracle(OraclePlanner {
                horizon: manifest.horizon,
                angle_step: manifest.demo.angle_step,
            })
        }
        PlannerKind::Safediff => {
            let path = args.checkpoint.as_ref().ok_or_else(|| {
                CliError::Usage("the safediff planner needs --checkpoint".into())
            })?;
            let model = SafeDiffModel::load(path)?;
            if args.vision_only && !model.vision_only() {
                return Err(CliError::Usage(format!(
                    "--vision-only given but {} has a tactile branch",
                    path.display()
                )));
            }
            LoadedPlanner::Model(Box::new(model))
        }
    };
    let mut rollout = cfg.rollout;
    if let Some(h) = args.replan_every {
        rollout.replan_every = h;
    }
    rollout.disturbance = args.disturbance.then_some(cfg.disturbance);
    Ok(Episodes {
        manifest,
        scenes,
        planner,
        rollout,
        condition: if args.disturbance { "disturbed" } else { "clean" },
    })
}

/// Rolls scenes out in fixed chunks spread over the available cores. Every
/// episode is independent of its batch mates, so the result does not depend
/// on the number of workers.
fn parallel_rollout<P, F>(
    scenes: &[SceneConfig],
    make_planner: F,
    cfg: &RolloutConfig,
) -> Result<Vec<EpisodeTrace>, CliError>
where
    P: Planner,
    F: Fn() -> P + Sync,
{
    let chunks: Vec<&[SceneConfig]> = scenes.chunks(EVAL_CHUNK).collect();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(chunks.len())
        .max(1);
    let mut results: Vec<Option<Result<Vec<EpisodeTrace>, CliError>>> =
        (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let chunks = &chunks;
                let make_planner = &make_planner;
                s.spawn(move || {
                    let mut planner = make_planner();
                    (w..chunks.len())
                        .step_by(workers)
                        .map(|i| (i, rollout_batch(chunks[i], &mut planner, cfg).map_err(CliError::from)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("rollout worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut traces = Vec::with_capacity(scenes.len());
    for r in results {
        traces.extend(r.expect("every chunk ran")?);
    }
    Ok(traces)
}

fn run_scenes(ep: &Episodes, scenes: &[SceneConfig]) -> Result<Vec<EpisodeTrace>, CliError> {
    match &ep.planner {
        LoadedPlanner::Oracle(p) => parallel_rollout(scenes, || *p, &ep.rollout),
        LoadedPlanner::Model(m) => parallel_rollout(scenes, || m.planner(), &ep.rollout),
    }
}

fn log_faults(traces: &[EpisodeTrace]) {
    for (i, t) in traces.iter().enumerate() {
        if t.termination == Termination::PlannerFault {
            eprintln!(
                "warning: episode {i} planner fault: {}",
                t.diagnostic.as_deref().unwrap_or("")
            );
        }
    }
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    let thresholds = args.thresholds.clone().unwrap_or(cfg.thresholds.clone());
    let ep = load_episodes(&args.episode, &cfg)?;
    let (model, model_init_seed) = match &ep.planner {
        LoadedPlanner::Model(m) => (Some(m.config.clone()), Some(m.init_seed)),
        LoadedPlanner::Oracle(_) => (None, None),
    };
    let run = EvalRun {
        format_version: RUN_FORMAT_VERSION,
        planner: ep.planner.label().to_string(),
        pool: args.episode.pool.to_string(),
        condition: ep.condition.to_string(),
        seed: args.episode.seed,
        dataset_seed: ep.manifest.global_seed,
        scenes: ep.scenes.len(),
        thresholds: thresholds.clone(),
        rollout: ep.rollout,
        model,
        model_init_seed,
    };
    echo("eval", &run);
    let out = &args.common.out;
    create_dir(out)?;
    let traces = run_scenes(&ep, &ep.scenes)?;
    log_faults(&traces);
    write_traces(&traces, &out.join(TRACES_FILE))?;
    let report = evaluate(&traces, &thresholds, &run.planner, &run.pool, &run.condition);
    let report_path = out.join(REPORT_FILE);
    std::fs::write(&report_path, report_csv(std::slice::from_ref(&report)))
        .map_err(data_err(&report_path))?;
    write_json(&run, &out.join(RUN_FILE))?;
    print!("{}", report_text(std::slice::from_ref(&report)));
    Ok(())
}

pub fn rollout(args: &RolloutArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(args.common.config.as_deref())?;
    let ep = load_episodes(&args.episode, &cfg)?;
    let scene = ep.scenes.get(args.scene_id).cloned().ok_or_else(|| {
        CliError::Usage(format!(
            "scene {} out of range; the {} split has {} scenes",
            args.scene_id,
            args.episode.pool,
            ep.scenes.len()
        ))
    })?;
    echo("rollout", &(ep.planner.label(), args.scene_id, &ep.rollout));
    let out = &args.common.out;
    create_dir(out)?;
    let traces = run_scenes(&ep, std::slice::from_ref(&scene))?;
    log_faults(&traces);
    write_traces(&traces, &out.join(TRACES_FILE))?;
    let t = &traces[0];
    println!(
        "{} scene {}: {:?} after {} ticks, max angle {:.3} rad",
        ep.planner.label(),
        args.scene_id,
        t.termination,
        t.ticks.len(),
        t.ticks.iter().map(|k| k.angle).fold(0.0, f64::max)
    );
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    if args.runs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let mut rows: Vec<MetricReport> = Vec::with_capacity(args.runs.len());
    let mut thresholds = args.thresholds.clone();
    for dir in &args.runs {
        let run: EvalRun = read_json(&dir.join(RUN_FILE))?;
        if run.format_version != RUN_FORMAT_VERSION {
            return Err(CliError::Data(format!(
                "{}: run format version {}",
                dir.join(RUN_FILE).display(),
                run.format_version
            )));
        }
        let thr = thresholds.get_or_insert_with(|| run.thresholds.clone());
        let traces = safediff_core::runtime::read_traces(&dir.join(TRACES_FILE))
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.join(TRACES_FILE).display())))?;
        rows.push(evaluate(&traces, thr, &run.planner, &run.pool, &run.condition));
    }
    create_dir(&args.out)?;
    let path = args.out.join(REPORT_FILE);
    std::fs::write(&path, report_csv(&rows)).map_err(data_err(&path))?;
    print!("{}", report_text(&rows));
    Ok(())
}

/// Paths of the files `eval` writes into `dir`.
pub fn eval_outputs(dir: &Path) -> [PathBuf; 3] {
    [dir.join(TRACES_FILE), dir.join(REPORT_FILE), dir.join(RUN_FILE)]
}
