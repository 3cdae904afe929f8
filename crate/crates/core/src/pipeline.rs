//! End-to-end runs over a [`RunConfig`]: dataset generation, training with
//! metrics and checkpoints, evaluation, and single-episode traces. Every
//! artifact embeds a schema version; run directories also hold the resolved
//! config.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::credit::teacher_score;
use crate::error::{Error, Result};
use crate::policy::{load_checkpoint, save_checkpoint, Checkpoint, PolicyParams};
use crate::rollout::{derive_seed, probe_answerability, run_episode, EpisodeSpec, EpisodeTrace, NetworkAgent};
use crate::synth::{filtered_chunk, generate, read_dataset, write_dataset, SynthConfig, TaskInstance};
use crate::trainer::{evaluate, EvalReport, StepMetrics, Trainer, TrainerSnapshot};
use crate::vocab::Vocabulary;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EVAL_CURVE_FILE: &str = "eval_curve.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.json";

/// File locations inside a data directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub eval: PathBuf,
}

impl DataPaths {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            vocab: dir.join("vocab.json"),
            train: dir.join("train.jsonl"),
            eval: dir.join("eval.jsonl"),
        }
    }
}

pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<TaskInstance>,
    pub eval: Vec<TaskInstance>,
}

/// Generates both splits in memory. The eval split uses a seed derived from
/// the train seed, so the two never share an RNG stream.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let vocab = Vocabulary::generate(&cfg.vocab)?;
    let train = generate(&cfg.synth, &vocab, cfg.data.train_size)?;
    let eval_synth = SynthConfig {
        seed: derive_seed(cfg.synth.seed, &[1]),
        ..cfg.synth
    };
    let eval = generate(&eval_synth, &vocab, cfg.data.eval_size)?;
    Ok(Dataset { vocab, train, eval })
}

pub fn gen_data(cfg: &RunConfig) -> Result<DataPaths> {
    cfg.validate()?;
    let data = build_dataset(cfg)?;
    fs::create_dir_all(&cfg.io.data_dir)?;
    let paths = DataPaths::new(&cfg.io.data_dir);
    data.vocab.save(&paths.vocab)?;
    write_dataset(&paths.train, &data.train)?;
    write_dataset(&paths.eval, &data.eval)?;
    Ok(paths)
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let paths = DataPaths::new(&cfg.io.data_dir);
    if !paths.vocab.exists() {
        return Err(Error::config(
            "io.data_dir",
            format!("{} has no vocab.json; run gen-data first", cfg.io.data_dir.display()),
        ));
    }
    let vocab = Vocabulary::load(&paths.vocab)?;
    if vocab.len() != cfg.model.vocab_size {
        return Err(Error::config(
            "model.vocab_size",
            format!("is {} but {} holds {} tokens", cfg.model.vocab_size, paths.vocab.display(), vocab.len()),
        ));
    }
    Ok(Dataset {
        train: read_dataset(&paths.train)?,
        eval: read_dataset(&paths.eval)?,
        vocab,
    })
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub metrics: StepMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurvePoint {
    pub schema_version: u32,
    pub step: u64,
    pub report: EvalReport,
}

pub fn snapshot_to_checkpoint(snap: &TrainerSnapshot, cfg: &RunConfig) -> Checkpoint {
    Checkpoint {
        params: snap.params.clone(),
        extra: vec![
            ("reference".into(), snap.reference.as_slice().to_vec()),
            ("adam_m".into(), snap.adam_m.clone()),
            ("adam_v".into(), snap.adam_v.clone()),
        ],
        meta: serde_json::json!({
            "step": snap.step,
            "round": snap.round,
            "adam_t": snap.adam_t,
            "mode": cfg.reward.mode,
            "seed": cfg.seed,
        }),
    }
}

/// The trainer state in `ckpt`, or `None` for a parameters-only archive.
pub fn checkpoint_to_snapshot(ckpt: Checkpoint) -> Result<Option<TrainerSnapshot>> {
    let section = |name: &str| ckpt.extra.iter().find(|(n, _)| n == name).map(|(_, v)| v.clone());
    let (Some(reference), Some(adam_m), Some(adam_v)) = (section("reference"), section("adam_m"), section("adam_v")) else {
        return Ok(None);
    };
    let field = |k: &str| {
        ckpt.meta
            .get(k)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format(format!("checkpoint meta lacks `{k}`")))
    };
    let mut ref_params = ckpt.params.clone();
    if reference.len() != ref_params.len() {
        return Err(Error::Format("reference section has the wrong length".into()));
    }
    ref_params.as_mut_slice().copy_from_slice(&reference);
    Ok(Some(TrainerSnapshot {
        reference: ref_params,
        adam_m,
        adam_v,
        adam_t: field("adam_t")?,
        step: field("step")?,
        round: field("round")?,
        params: ckpt.params,
    }))
}

pub fn write_config_echo(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.io.out_dir)?;
    fs::write(cfg.io.out_dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps_completed: u64,
    pub interrupted: bool,
    pub checkpoint: PathBuf,
    pub last: Option<StepMetrics>,
}

/// Trains until `train.total_steps` or until `stop` is raised, then writes a
/// final checkpoint. With `io.checkpoint` set, a full trainer checkpoint
/// resumes (appending to the metrics stream) and a parameters-only one
/// seeds a fresh run.
pub fn train(cfg: &RunConfig, stop: &AtomicBool, mut on_step: impl FnMut(&StepMetrics)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    write_config_echo(cfg)?;
    let out = &cfg.io.out_dir;

    let (params, resume) = match &cfg.io.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.params.config() != &cfg.model {
                return Err(Error::config("io.checkpoint", "model config differs from the run config"));
            }
            let params = ckpt.params.clone();
            (params, checkpoint_to_snapshot(ckpt)?)
        }
        None => (PolicyParams::init(cfg.model)?, None),
    };
    let mut trainer = Trainer::new(
        params,
        cfg.train,
        cfg.rollout,
        cfg.reward.mode,
        *data.vocab.specials(),
        &data.train,
        cfg.seed,
    )?;
    let appending = resume.is_some();
    if let Some(snap) = resume {
        trainer.resume(snap)?;
    }

    let open = |name: &str| -> Result<BufWriter<File>> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(appending)
            .truncate(!appending)
            .open(out.join(name))?;
        Ok(BufWriter::new(f))
    };
    let mut metrics_out = open(METRICS_FILE)?;
    let mut curve_out = if cfg.eval.every > 0 { Some(open(EVAL_CURVE_FILE)?) } else { None };

    let final_path = out.join(CHECKPOINT_FILE);
    let save = |trainer: &Trainer, path: &Path| save_checkpoint(path, &snapshot_to_checkpoint(&trainer.snapshot(), cfg));
    let mut last = None;
    let mut interrupted = false;
    while trainer.step_index() < cfg.train.total_steps {
        if stop.load(Ordering::SeqCst) {
            interrupted = true;
            break;
        }
        let m = match trainer.step() {
            Ok(m) => m,
            Err(e) => {
                metrics_out.flush()?;
                save(&trainer, &final_path)?;
                return Err(e);
            }
        };
        serde_json::to_writer(
            &mut metrics_out,
            &MetricsRecord {
                schema_version: METRICS_SCHEMA_VERSION,
                metrics: m.clone(),
            },
        )?;
        metrics_out.write_all(b"\n")?;
        metrics_out.flush()?;
        on_step(&m);
        let done = trainer.step_index();
        if cfg.io.checkpoint_every > 0 && done % cfg.io.checkpoint_every == 0 {
            save(&trainer, &out.join(format!("checkpoint-{done:06}.bin")))?;
        }
        if let Some(w) = curve_out.as_mut() {
            if done % cfg.eval.every == 0 {
                let report = eval_params(cfg, trainer.params(), &data)?;
                serde_json::to_writer(
                    &mut *w,
                    &EvalCurvePoint {
                        schema_version: REPORT_SCHEMA_VERSION,
                        step: done,
                        report,
                    },
                )?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
        }
        last = Some(m);
    }
    save(&trainer, &final_path)?;
    write_metrics_csv(&out.join(METRICS_FILE), &out.join(METRICS_CSV))?;
    if cfg.io.trace {
        let mut traced = cfg.clone();
        traced.io.checkpoint = Some(final_path.clone());
        trace(&traced, Split::Eval, 0)?;
    }
    Ok(TrainOutcome {
        steps_completed: trainer.step_index(),
        interrupted,
        checkpoint: final_path,
        last,
    })
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)?;
        if rec.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported metrics schema {}", rec.schema_version)));
        }
        out.push(rec.metrics);
    }
    Ok(out)
}

/// Rewrites the CSV view of a metrics stream.
pub fn write_metrics_csv(jsonl: &Path, csv_path: &Path) -> Result<()> {
    let rows = read_metrics(jsonl)?;
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::Format(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters named by `io.checkpoint`, else the run's final checkpoint.
pub fn load_params(cfg: &RunConfig) -> Result<(PathBuf, PolicyParams)> {
    let path = cfg.io.checkpoint.clone().unwrap_or_else(|| cfg.io.out_dir.join(CHECKPOINT_FILE));
    if !path.exists() {
        return Err(Error::config(
            "io.checkpoint",
            format!("{} does not exist; train first or set io.checkpoint", path.display()),
        ));
    }
    let params = load_checkpoint(&path)?.params;
    if params.config() != &cfg.model {
        return Err(Error::config("io.checkpoint", "model config differs from the run config"));
    }
    Ok((path, params))
}

fn eval_params(cfg: &RunConfig, params: &PolicyParams, data: &Dataset) -> Result<EvalReport> {
    let agent = NetworkAgent {
        params,
        eos: data.vocab.specials().eos,
    };
    evaluate(
        &agent,
        &data.eval,
        &cfg.rollout,
        cfg.eval.sampling,
        data.vocab.specials(),
        cfg.eval.k,
        cfg.seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub schema_version: u32,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
    pub config: RunConfig,
}

/// Average@k evaluation on the eval split, written to `eval.json`.
pub fn eval(cfg: &RunConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let (checkpoint, params) = load_params(cfg)?;
    let out = EvalOutput {
        schema_version: REPORT_SCHEMA_VERSION,
        report: eval_params(cfg, &params, &data)?,
        checkpoint,
        config: cfg.clone(),
    };
    fs::create_dir_all(&cfg.io.out_dir)?;
    fs::write(cfg.io.out_dir.join(EVAL_FILE), serde_json::to_string_pretty(&out)?)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Re-runs one episode under the eval sampling parameters and decodes it,
/// with the teacher score of every memory write and an answerability probe.
pub fn trace(cfg: &RunConfig, split: Split, index: usize) -> Result<(PathBuf, EpisodeTrace)> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let (_, params) = load_params(cfg)?;
    let tasks = match split {
        Split::Train => &data.train,
        Split::Eval => &data.eval,
    };
    let task = tasks.get(index).ok_or_else(|| {
        Error::config("index", format!("split has {} tasks, index {index} is out of range", tasks.len()))
    })?;
    let specials = data.vocab.specials();
    let agent = NetworkAgent {
        params: &params,
        eos: specials.eos,
    };
    let spec = EpisodeSpec {
        query_index: index,
        group_index: 0,
        seed: derive_seed(cfg.seed, &[4, index as u64]),
    };
    let episode = run_episode(&agent, task, &cfg.rollout, cfg.eval.sampling, specials, spec)?;
    let mut trace = EpisodeTrace::new(&episode, task, &data.vocab);
    for (tt, turn) in trace.turns.iter_mut().zip(&episode.turns) {
        let c_t = filtered_chunk(task, turn.chunk_span)?;
        tt.teacher_score = Some(teacher_score(
            &params,
            specials,
            &task.query,
            &c_t,
            &turn.memory_in,
            &turn.memory_out.tokens,
            true,
        )?);
    }
    trace.probe = Some(probe_answerability(
        &agent,
        task,
        &episode,
        &cfg.rollout,
        cfg.eval.sampling,
        specials,
        cfg.eval.probe_gamma,
        derive_seed(cfg.seed, &[5, index as u64]),
    )?);
    fs::create_dir_all(&cfg.io.out_dir)?;
    let name = match split {
        Split::Train => format!("trace-train-{index}.json"),
        Split::Eval => format!("trace-eval-{index}.json"),
    };
    let path = cfg.io.out_dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&trace)?)?;
    Ok((path, trace))
}
