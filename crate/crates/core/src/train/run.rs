use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::PhasingSchedule;
use crate::error::{Error, Result};
use crate::model::{model_flops, ActivationMode, Model, Phase};
use crate::sharing::Census;
use crate::tensor::{GradMode, Graph, Real, Tensor};
use crate::topology::{apportion, erk_init, erk_plan_for_budget, ErkPlan, Regrowth, TopologyController, UpdateReport};

use super::checkpoint::Checkpoint;
use super::config::{InitScheme, RunConfig};
use super::data::{load_dataset, Dataset, Splits};
use super::metrics::{MetricRow, MetricSink, PreactRow, Split};
use super::optim::{grad_norm_sum, Sgd};

/// Epochs covered by the early gradient-norm statistic.
pub const EARLY_EPOCHS: u32 = 5;

const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the config's output directory.
    pub out_dir: Option<PathBuf>,
    /// Writes zero wallclock so that metric files are reproducible.
    pub deterministic: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub t: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm_sum: f64,
    pub update: Option<UpdateReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub positive_preact_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub step: u64,
    pub lr: f64,
    pub beta: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Mean over the epoch's steps.
    pub grad_norm_sum: f64,
    pub density: f64,
    pub active_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub steps: u64,
    pub steps_per_epoch: usize,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub final_sparsity: f64,
    pub target_sparsity: Option<f64>,
    pub active_count: usize,
    pub census: Census,
    pub macs: f64,
    pub dense_macs: u64,
    pub topology_updates: u64,
    /// Median per-step `grad_norm_sum` over the first [`EARLY_EPOCHS`] epochs.
    pub early_grad_norm_median: f64,
    pub dyrelu_sites: usize,
    pub wallclock: f64,
    pub epochs: Vec<EpochLog>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            // First maximum wins.
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}

/// Mask plan with equal density in every stored tensor.
fn uniform_plan(shapes: &[Vec<usize>], budget: f64) -> Result<ErkPlan> {
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let shares: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let counts = apportion(budget.round() as usize, &shares, &sizes)?;
    Ok(ErkPlan {
        densities: counts.iter().zip(&sizes).map(|(&c, &n)| c as f64 / n as f64).collect(),
        counts,
        global_density: budget / total as f64,
    })
}

/// One training run: model, optimizer, topology controller and schedule.
pub struct Trainer {
    cfg: RunConfig,
    data: Splits,
    model: Model<f32>,
    opt: Sgd<f32>,
    ctrl: Option<TopologyController>,
    phasing: Option<PhasingSchedule>,
    steps_per_epoch: usize,
    step: u64,
    epoch: u32,
    updates: u64,
    sink: MetricSink,
    deterministic: bool,
    started: Instant,
    early_norms: Vec<f64>,
    epochs: Vec<EpochLog>,
}

impl Trainer {
    /// Builds the model and applies the sparse initialisation.
    pub fn new(cfg: RunConfig, data: Splits) -> Result<Self> {
        cfg.validate()?;
        for d in [&data.train, &data.test] {
            if d.shape != cfg.arch.input {
                return Err(Error::Config(format!(
                    "dataset samples are {:?} but the model expects {:?}",
                    d.shape, cfg.arch.input
                )));
            }
            if d.classes > cfg.arch.classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, model has {}",
                    d.classes, cfg.arch.classes
                )));
            }
        }
        if data.train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let steps_per_epoch = data.train.len().div_ceil(cfg.train.batch_size);
        let mut model = Model::<f32>::build(&cfg.arch, cfg.seed)?;
        let ctrl = if cfg.topology.dense {
            None
        } else {
            let tcfg = cfg.topology.controller(steps_per_epoch, cfg.seed);
            let maskable = model.layout().maskable();
            let budget = ((1.0 - tcfg.initial_sparsity()) * maskable as f64).round();
            let shapes = model.layout().stored_shapes();
            let plan = match cfg.topology.init {
                InitScheme::Erk => erk_plan_for_budget(&shapes, budget)?,
                InitScheme::Uniform => uniform_plan(&shapes, budget)?,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::MAX);
            erk_init(&mut model.store.masked, &plan, &mut rng)?;
            let mut c = TopologyController::new(tcfg, maskable)?;
            c.sync(&model.store.masked);
            Some(c)
        };
        let phasing = match cfg.arch.activation {
            ActivationMode::DyreluPhased => Some(cfg.phasing()?),
            ActivationMode::Relu => None,
        };
        let opt = Sgd::new(&model.store, cfg.train.momentum, cfg.train.weight_decay);
        Ok(Self {
            cfg,
            data,
            model,
            opt,
            ctrl,
            phasing,
            steps_per_epoch,
            step: 0,
            epoch: 0,
            updates: 0,
            sink: MetricSink::memory(),
            deterministic: false,
            started: Instant::now(),
            early_norms: Vec::new(),
            epochs: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint written for the same config.
    pub fn resume(cfg: RunConfig, data: Splits, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.hash() {
            return Err(Error::State(format!(
                "checkpoint config hash {:016x} does not match {:016x}",
                ckpt.config_hash,
                cfg.hash()
            )));
        }
        let mut t = Self::new(cfg, data)?;
        let r = ckpt.restore(&t.cfg.arch)?;
        t.model = r.model;
        t.opt = r.optimizer;
        match (t.ctrl.as_mut(), &r.controller) {
            (Some(c), Some(s)) => c.restore(s),
            (None, None) => {}
            _ => return Err(Error::State("controller presence differs from config".into())),
        }
        t.step = r.step;
        t.epoch = r.next_epoch;
        Ok(t)
    }

    pub fn with_sink(mut self, sink: MetricSink) -> Self {
        self.sink = sink;
        self
    }

    pub fn set_deterministic(&mut self, on: bool) {
        self.deterministic = on;
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn controller(&self) -> Option<&TopologyController> {
        self.ctrl.as_ref()
    }

    pub fn data(&self) -> &Splits {
        &self.data
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.train.epochs as u64 * self.steps_per_epoch as u64
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.train.epochs
    }

    fn wallclock(&self) -> f64 {
        if self.deterministic {
            0.0
        } else {
            self.started.elapsed().as_secs_f64()
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.cfg.hash(),
            &self.model,
            &self.opt,
            self.ctrl.as_ref().map(TopologyController::state),
            self.step,
            self.epoch,
        )
    }

    /// Applies the epoch-level activation blend.
    fn apply_phasing(&mut self, epoch: u32) {
        if let Some(p) = &self.phasing {
            if self.model.dyrelu_sites() > 0 {
                self.model.set_beta(p.beta(epoch as f64));
                self.opt.sync(&self.model.store);
            }
        }
    }

    /// One iteration on the training samples `idx`. Topology updates run
    /// after the optimizer step when `t` hits the update interval.
    pub fn train_step(&mut self, idx: &[usize], lr: f64) -> Result<StepOutcome> {
        self.step += 1;
        let t = self.step;
        let update = t <= self.total_steps() && self.ctrl.as_ref().is_some_and(|c| c.is_update_step(t));
        let dense_grads = update && self.cfg.topology.regrowth == Regrowth::Gradient;
        let mut g = Graph::new(if dense_grads { GradMode::Dense } else { GradMode::Masked });
        let (x, labels) = self.data.train.batch::<f32>(idx)?;
        let x = g.constant(x);
        let out = self.model.forward(&mut g, x, Phase::Train)?;
        let loss = g.softmax_cross_entropy(out.logits, &labels)?;
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(self.non_finite(t, format!("loss is {loss_value}")));
        }
        let correct = accuracy(g.value(out.logits), &labels);
        g.backward(loss)?;
        let grads = self.model.gradients(&g);
        let gns = grad_norm_sum(&self.model.store, &grads);
        if !gns.is_finite() {
            return Err(self.non_finite(t, format!("gradient norm is {gns}")));
        }
        self.model.update_running_stats(&out.bn_stats);
        self.opt.step(&mut self.model.store, &grads, lr)?;
        let report = match self.ctrl.as_mut() {
            Some(c) if update => {
                let g = dense_grads.then_some(grads.masked.as_slice());
                let r = c.update(t, &mut self.model.store.masked, g)?;
                self.opt.reset(&r.pruned);
                self.opt.reset(&r.grown);
                self.updates += 1;
                Some(r)
            }
            _ => None,
        };
        let acc = correct as f64 / labels.len() as f64;
        if self.epoch < EARLY_EPOCHS {
            self.early_norms.push(gns);
        }
        if t.is_multiple_of(self.cfg.train.log_every) || report.is_some() {
            let row = MetricRow {
                step: t,
                epoch: self.epoch,
                split: Split::Train,
                loss: loss_value,
                accuracy: acc,
                s_current: self.model.sparsity(),
                active_count: self.model.store.active_count(),
                beta: self.model.beta(),
                grad_norm_sum: gns,
                positive_preact_fraction: out.preact_fraction(),
                wallclock: self.wallclock(),
            };
            self.sink.write(&row)?;
            for (site, &(p, n)) in out.preact.iter().enumerate() {
                self.sink.write_preact(&PreactRow {
                    step: t,
                    layer_id: self.model.layout().acts[site].name.clone(),
                    positive_fraction: if n == 0 { 0.0 } else { p as f64 / n as f64 },
                    beta: self.model.beta(),
                })?;
            }
        }
        Ok(StepOutcome {
            t,
            loss: loss_value,
            accuracy: acc,
            grad_norm_sum: gns,
            update: report,
        })
    }

    fn non_finite(&mut self, step: u64, what: String) -> Error {
        let _ = self.sink.flush();
        Error::NonFinite {
            step,
            detail: format!("{what}; last metric rows:\n{}", self.sink.dump_recent()),
        }
    }

    /// Loss, accuracy and positive pre-activation fraction on `data`
    /// (at most `limit` samples), using running BatchNorm statistics.
    pub fn evaluate(&self, data: &Dataset, limit: Option<usize>) -> Result<EvalStats> {
        evaluate(&self.model, data, limit)
    }

    /// Runs the next epoch: blend update, steps, test evaluation.
    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let e = self.epoch;
        self.apply_phasing(e);
        let lr = self.cfg.train.lr_at(e);
        let batches = self
            .data
            .train
            .epoch_batches(self.cfg.train.batch_size, self.cfg.seed, e as u64, true);
        let (mut loss, mut acc, mut gns) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let s = self.train_step(idx, lr)?;
            loss += s.loss;
            acc += s.accuracy;
            gns += s.grad_norm_sum;
        }
        let n = batches.len() as f64;
        let test = self.evaluate(&self.data.test, self.cfg.train.eval_limit)?;
        let row = MetricRow {
            step: self.step,
            epoch: e,
            split: Split::Test,
            loss: test.loss,
            accuracy: test.accuracy,
            s_current: self.model.sparsity(),
            active_count: self.model.store.active_count(),
            beta: self.model.beta(),
            grad_norm_sum: gns / n,
            positive_preact_fraction: test.positive_preact_fraction,
            wallclock: self.wallclock(),
        };
        self.sink.write(&row)?;
        self.sink.flush()?;
        let log = EpochLog {
            epoch: e,
            step: self.step,
            lr,
            beta: self.model.beta(),
            train_loss: loss / n,
            train_accuracy: acc / n,
            test_loss: test.loss,
            test_accuracy: test.accuracy,
            grad_norm_sum: gns / n,
            density: 1.0 - self.model.sparsity(),
            active_count: self.model.store.active_count(),
        };
        self.epochs.push(log.clone());
        self.epoch += 1;
        Ok(log)
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let flops = model_flops(&self.model)?;
        let last = self.epochs.last();
        Ok(RunSummary {
            name: self.cfg.name.clone(),
            seed: self.cfg.seed,
            config_hash: format!("{:016x}", self.cfg.hash()),
            steps: self.step,
            steps_per_epoch: self.steps_per_epoch,
            final_test_accuracy: last.map_or(f64::NAN, |l| l.test_accuracy),
            final_test_loss: last.map_or(f64::NAN, |l| l.test_loss),
            final_sparsity: self.model.sparsity(),
            target_sparsity: self.ctrl.as_ref().map(|c| c.config().s_max),
            active_count: self.model.store.active_count(),
            census: self.model.census(),
            macs: flops.macs,
            dense_macs: flops.dense_macs,
            topology_updates: self.updates,
            early_grad_norm_median: median(&self.early_norms),
            dyrelu_sites: self.model.dyrelu_sites(),
            wallclock: self.wallclock(),
            epochs: self.epochs.clone(),
        })
    }

    /// Trains the remaining epochs.
    pub fn run_to_end(&mut self, verbose: bool) -> Result<RunSummary> {
        while !self.is_finished() {
            let log = self.train_epoch()?;
            if verbose {
                eprintln!(
                    "[{}] epoch {:>3} step {:>6} loss {:.4} test acc {:.4} density {:.5} beta {:.2}",
                    self.cfg.name, log.epoch, log.step, log.train_loss, log.test_accuracy, log.density, log.beta
                );
            }
        }
        self.summary()
    }
}

pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, limit: Option<usize>) -> Result<EvalStats> {
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    if n == 0 {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let (mut loss, mut correct, mut pos, mut total) = (0.0, 0usize, 0usize, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut g = Graph::new(GradMode::Masked);
        let (x, labels) = data.batch::<T>(chunk)?;
        let x = g.constant(x);
        let out = model.forward(&mut g, x, Phase::Eval)?;
        let l = g.softmax_cross_entropy(out.logits, &labels)?;
        loss += g.value(l).data()[0].as_f64() * chunk.len() as f64;
        correct += accuracy(g.value(out.logits), &labels);
        for &(p, t) in &out.preact {
            pos += p;
            total += t;
        }
    }
    Ok(EvalStats {
        loss: loss / n as f64,
        accuracy: correct as f64 / n as f64,
        positive_preact_fraction: if total == 0 { 0.0 } else { pos as f64 / total as f64 },
    })
}

/// Outcome of [`run`].
pub struct RunOutput {
    pub summary: RunSummary,
    pub trainer: Trainer,
    pub out_dir: Option<PathBuf>,
}

pub(crate) fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads the data, trains to completion and writes `metrics.csv`,
/// `preact.csv`, `summary.json`, `config.toml` and `checkpoint.bin` when an
/// output directory is set.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutput> {
    let data = load_dataset(&cfg.data)?;
    run_with_data(cfg, data, opts)
}

pub fn run_with_data(cfg: &RunConfig, data: Splits, opts: &RunOptions) -> Result<RunOutput> {
    let out_dir = opts.out_dir.clone().or_else(|| cfg.out_dir.clone());
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    if let Some(dir) = &out_dir {
        trainer = trainer.with_sink(MetricSink::create(dir)?);
        let path = dir.join("config.toml");
        std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    }
    finish(trainer, out_dir, opts)
}

/// Continues `cfg` from `ckpt`, appending to the metric files in the output
/// directory.
pub fn resume_run(cfg: &RunConfig, ckpt: &Checkpoint, opts: &RunOptions) -> Result<RunOutput> {
    let data = load_dataset(&cfg.data)?;
    let out_dir = opts.out_dir.clone().or_else(|| cfg.out_dir.clone());
    let mut trainer = Trainer::resume(cfg.clone(), data, ckpt)?;
    if let Some(dir) = &out_dir {
        trainer = trainer.with_sink(MetricSink::append(dir)?);
    }
    finish(trainer, out_dir, opts)
}

fn finish(mut trainer: Trainer, out_dir: Option<PathBuf>, opts: &RunOptions) -> Result<RunOutput> {
    trainer.set_deterministic(opts.deterministic);
    let summary = trainer.run_to_end(opts.verbose)?;
    if let Some(dir) = &out_dir {
        trainer.checkpoint().save(&dir.join("checkpoint.bin"))?;
        write_json(&dir.join("summary.json"), &summary)?;
    }
    Ok(RunOutput {
        summary,
        trainer,
        out_dir,
    })
}
