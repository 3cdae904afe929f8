use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::buffer::{build_optim_batch, group_survives, Buffer, Fill, OptimBatch, ScoredGroup};
use super::optim::{lr_at, AdamW};
use super::surrogate::{reference_rows, surrogate_stats, Surrogate};
use super::TrainConfig;
use crate::credit::{average_at_k, build_samples, RewardMode};
use crate::error::{Error, Result};
use crate::policy::{loss_and_grads, FrozenParams, PolicyParams, SamplingParams};
use crate::rollout::{chunk_document, derive_seed, run_episode, run_group, Agent, ChunkingConfig, EpisodeSpec, NetworkAgent};
use crate::synth::TaskInstance;
use crate::vocab::Specials;

/// One line of the training metrics stream. Contains no wall-clock data so
/// identical runs produce identical streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mode: RewardMode,
    pub updated: bool,
    pub version: u64,
    pub rounds: usize,
    pub lr: f64,
    /// Outcome EM over every rollout sampled during this step.
    pub em: f64,
    pub sub_em: f64,
    pub mean_reward: f64,
    pub kl: f64,
    pub objective: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub resp_len: f64,
    pub surviving_fraction: f64,
    pub batch_samples: usize,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
    pub p_mean: Option<f64>,
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerSnapshot {
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
    pub step: u64,
    pub round: u64,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    chunking: ChunkingConfig,
    mode: RewardMode,
    specials: Specials,
    tasks: &'a [TaskInstance],
    seed: u64,
    params: PolicyParams,
    reference: FrozenParams,
    optim: AdamW,
    buffer: Buffer,
    step: u64,
    round: u64,
    last_batch: Option<OptimBatch>,
}

impl<'a> Trainer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: PolicyParams,
        cfg: TrainConfig,
        chunking: ChunkingConfig,
        mode: RewardMode,
        specials: Specials,
        tasks: &'a [TaskInstance],
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        chunking.validate(params.config())?;
        let first = tasks.first().ok_or_else(|| Error::config("io.data_dir", "dataset is empty"))?;
        chunk_document(&first.doc, chunking.chunk_len)?;
        let target = cfg.buffer_target.unwrap_or(cfg.rollout_batch * cfg.group_size);
        Ok(Self {
            reference: params.snapshot(),
            optim: AdamW::new(&params),
            buffer: Buffer::new(target),
            cfg,
            chunking,
            mode,
            specials,
            tasks,
            seed,
            params,
            step: 0,
            round: 0,
            last_batch: None,
        })
    }

    pub fn resume(&mut self, snap: TrainerSnapshot) -> Result<()> {
        if snap.params.config() != self.params.config() {
            return Err(Error::Format("checkpoint model config differs from the run config".into()));
        }
        self.optim = AdamW::from_state(&snap.params, snap.adam_m, snap.adam_v, snap.adam_t);
        self.reference = snap.reference.snapshot();
        self.params = snap.params;
        self.step = snap.step;
        self.round = snap.round;
        Ok(())
    }

    pub fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot {
            params: self.params.clone(),
            reference: self.reference.thaw(),
            adam_m: self.optim.m.clone(),
            adam_v: self.optim.v.clone(),
            adam_t: self.optim.t,
            step: self.step,
            round: self.round,
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// The batch consumed by the most recent update.
    pub fn last_batch(&self) -> Option<&OptimBatch> {
        self.last_batch.as_ref()
    }

    /// Collects rollouts until the buffer emits, then applies `inner_epochs`
    /// updates. A step that hits the round cap makes no update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let cfg = self.cfg;
        let mut rounds = 0;
        let (mut episodes, mut correct, mut sub, mut resp) = (0usize, 0usize, 0.0, 0usize);
        let (mut groups_seen, mut groups_kept) = (0usize, 0usize);
        let ready = loop {
            if rounds == cfg.max_rounds_per_step {
                break None;
            }
            rounds += 1;
            let old = self.params.snapshot();
            let agent = NetworkAgent {
                params: &old,
                eos: self.specials.eos,
            };
            let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[1, self.round]));
            let picks: Vec<usize> = (0..cfg.rollout_batch).map(|_| pick.gen_range(0..self.tasks.len())).collect();
            let round = self.round;
            self.round += 1;
            let groups = picks
                .par_iter()
                .enumerate()
                .map(|(q, &ti)| {
                    let task = &self.tasks[ti];
                    let seed = derive_seed(self.seed, &[2, round, q as u64]);
                    run_group(&agent, task, &self.chunking, cfg.group_size, cfg.sampling, &self.specials, q, seed)
                        .map(|eps| (ti, eps))
                })
                .collect::<Result<Vec<_>>>()?;
            for (_, eps) in &groups {
                for e in eps {
                    episodes += 1;
                    correct += e.outcome_reward as usize;
                    sub += e.sub_em;
                    resp += e.turns.iter().map(|t| t.memory_out.tokens.len()).sum::<usize>() + e.answer.tokens.len();
                }
            }
            groups_seen += groups.len();
            let surviving: Vec<_> = groups
                .into_iter()
                .filter(|(_, eps)| group_survives(&eps.iter().map(|e| e.outcome_reward).collect::<Vec<_>>()))
                .collect();
            groups_kept += surviving.len();
            let scored = surviving
                .par_iter()
                .map(|(ti, eps)| {
                    let task = &self.tasks[*ti];
                    Ok(ScoredGroup {
                        task_id: task.id,
                        samples: build_samples(&old, &self.specials, task, eps, self.mode)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if let Fill::Ready(gs) = self.buffer.push(scored) {
                break Some(gs);
            }
        };

        let lr = lr_at(&cfg, self.step);
        let mut metrics = StepMetrics {
            step: self.step,
            mode: self.mode,
            updated: false,
            version: self.params.version(),
            rounds,
            lr,
            em: correct as f64 / episodes.max(1) as f64,
            sub_em: sub / episodes.max(1) as f64,
            mean_reward: 0.0,
            kl: 0.0,
            objective: 0.0,
            clip_fraction: 0.0,
            grad_norm: 0.0,
            resp_len: resp as f64 / episodes.max(1) as f64,
            surviving_fraction: groups_kept as f64 / groups_seen.max(1) as f64,
            batch_samples: 0,
            p_min: None,
            p_max: None,
            p_mean: None,
        };
        self.step += 1;
        let Some(groups) = ready else {
            return Ok(metrics);
        };

        let batch = build_optim_batch(groups, self.mode, &cfg)?;
        let ref_rows = if cfg.beta > 0.0 {
            reference_rows(&self.reference, &batch)?
        } else {
            Vec::new()
        };
        let surrogate = Surrogate::new(&batch, &ref_rows, &cfg);
        let seqs = surrogate.sequences();
        let stats = surrogate_stats(&self.params, &surrogate)?;
        let saved = (self.params.clone(), self.optim.clone());
        let step = metrics.step;
        let restore = |this: &mut Self, e: Error| -> Error {
            this.params = saved.0.clone();
            this.optim = saved.1.clone();
            match e {
                Error::Numeric { component } => Error::Numeric {
                    component: format!("{component} at step {step}"),
                },
                other => other,
            }
        };
        for _ in 0..cfg.inner_epochs {
            let (_, mut grads) = match loss_and_grads(&self.params, &seqs, &surrogate) {
                Ok(v) => v,
                Err(e) => return Err(restore(self, e)),
            };
            let norm = grads.norm();
            metrics.grad_norm = norm;
            if let Some(max) = cfg.max_grad_norm {
                if norm > max {
                    let scale = max / norm;
                    grads.data.iter_mut().for_each(|g| *g *= scale);
                }
            }
            self.optim.step(&mut self.params, &grads, lr, &cfg);
            if !self.params.all_finite() {
                return Err(restore(self, Error::numeric("parameters after update")));
            }
        }

        metrics.updated = true;
        metrics.version = self.params.version();
        metrics.kl = stats.kl_mean;
        metrics.objective = stats.objective;
        metrics.clip_fraction = stats.clip_fraction;
        metrics.batch_samples = batch.samples.len();
        metrics.mean_reward = batch.samples.iter().map(|s| s.reward).sum::<f64>() / batch.samples.len().max(1) as f64;
        if let Some(s) = batch.score_stats {
            metrics.p_min = Some(s.min);
            metrics.p_max = Some(s.max);
            metrics.p_mean = Some(s.mean);
        }
        self.last_batch = Some(batch);
        Ok(metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub num_tasks: usize,
    pub em: f64,
    pub sub_em: f64,
    pub per_run_em: Vec<f64>,
    pub per_run_sub_em: Vec<f64>,
}

/// `k` independent rollout passes over `tasks`, reported as average@k.
pub fn evaluate(
    agent: &dyn Agent,
    tasks: &[TaskInstance],
    chunking: &ChunkingConfig,
    sampling: SamplingParams,
    specials: &Specials,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::config("io.data_dir", "dataset is empty"));
    }
    let mut per_run_em = Vec::with_capacity(k);
    let mut per_run_sub_em = Vec::with_capacity(k);
    for run in 0..k {
        let results = tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let spec = EpisodeSpec {
                    query_index: i,
                    group_index: run,
                    seed: derive_seed(seed, &[3, run as u64, i as u64]),
                };
                run_episode(agent, task, chunking, sampling, specials, spec).map(|e| (e.outcome_reward as f64, e.sub_em))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = results.len() as f64;
        per_run_em.push(results.iter().map(|r| r.0).sum::<f64>() / n);
        per_run_sub_em.push(results.iter().map(|r| r.1).sum::<f64>() / n);
    }
    Ok(EvalReport {
        k,
        num_tasks: tasks.len(),
        em: average_at_k(&per_run_em)?,
        sub_em: average_at_k(&per_run_sub_em)?,
        per_run_em,
        per_run_sub_em,
    })
}
