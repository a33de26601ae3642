//! Teacher and student training, ensemble soft labels, and perplexity.
//!
//! Optimization is plain SGD with global-norm clipping, a learning-rate decay
//! on validation plateaus and optional parameter averaging once validation
//! has stalled for a configured number of epochs.

use std::fmt;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::data::{bptt_batches, BpttBatch, TokenStream};
use crate::error::{Error, Result};
use crate::loss::{self, DistillLossSpec};
use crate::model::{LmModel, LmState};
use crate::regularization::{self, RegContext};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: DistillLossSpec,
    pub lr: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt_len: usize,
    pub seed: u64,
    /// Non-improving epochs before averaging starts; 0 disables averaging.
    pub asgd_trigger_patience: usize,
    /// Learning-rate factor applied after an epoch that did not improve
    /// validation perplexity.
    pub lr_decay_on_plateau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: DistillLossSpec::default(),
            lr: 1.0,
            grad_clip: 0.25,
            epochs: 10,
            batch_size: 4,
            bptt_len: 16,
            seed: 0,
            asgd_trigger_patience: 0,
            lr_decay_on_plateau: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config(format!("grad_clip must be > 0, got {}", self.grad_clip)));
        }
        if self.batch_size == 0 || self.bptt_len == 0 {
            return Err(Error::config("batch_size and bptt_len must be at least 1"));
        }
        if !(self.lr_decay_on_plateau > 0.0 && self.lr_decay_on_plateau <= 1.0) {
            return Err(Error::config(format!(
                "lr_decay_on_plateau must be in (0, 1], got {}",
                self.lr_decay_on_plateau
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ppl: f64,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.6} valid_ppl={:.6} lr={:.6}",
            self.epoch, self.train_loss, self.valid_ppl, self.lr
        )
    }
}

/// Per-position teacher distributions for successive batches of one epoch.
pub trait SoftLabelSource {
    fn vocab_size(&self) -> usize;
    /// Called at the start of every epoch with the lane count.
    fn reset(&mut self, batch: usize);
    /// `[batch·T × V]` probabilities, rows in lane-major order.
    fn soft_labels(&mut self, batch: &BpttBatch) -> Result<Tensor>;
}

/// Teacher that puts all mass on the observed next word.
#[derive(Clone, Debug)]
pub struct OneHotOracle {
    pub vocab_size: usize,
}

impl SoftLabelSource for OneHotOracle {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn reset(&mut self, _batch: usize) {}

    fn soft_labels(&mut self, batch: &BpttBatch) -> Result<Tensor> {
        let n = batch.targets.len();
        let mut q = Tensor::zeros(&[n, self.vocab_size]);
        for (i, &y) in batch.targets.iter().enumerate() {
            q.data_mut()[i * self.vocab_size + y] = 1.0;
        }
        Ok(q)
    }
}

/// Frozen models whose output distributions are averaged.
#[derive(Clone, Debug)]
pub struct TeacherEnsemble {
    members: Vec<LmModel>,
    seeds: Vec<u64>,
}

impl TeacherEnsemble {
    pub fn new(members: Vec<LmModel>, seeds: Vec<u64>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::config("teacher ensemble needs at least one member"));
        };
        let v = first.vocab_size();
        if let Some(m) = members.iter().find(|m| m.vocab_size() != v) {
            return Err(Error::config(format!(
                "teacher vocabulary sizes differ: {v} vs {}",
                m.vocab_size()
            )));
        }
        Ok(TeacherEnsemble { members, seeds })
    }

    pub fn members(&self) -> &[LmModel] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    pub fn zero_states(&self, batch: usize) -> Vec<LmState> {
        self.members.iter().map(|m| LmState::zeros(m.config(), batch)).collect()
    }

    /// Arithmetic mean of the members' `[batch·T × V]` distributions. Members
    /// run in parallel; the mean is reduced in member order.
    pub fn predict(&self, tokens: &[usize], batch: usize, states: &[LmState]) -> Result<(Tensor, Vec<LmState>)> {
        if states.len() != self.members.len() {
            return Err(Error::Contract(format!(
                "{} states for {} teacher members",
                states.len(),
                self.members.len()
            )));
        }
        let outs: Vec<(Tensor, LmState)> = self
            .members
            .par_iter()
            .zip(states.par_iter())
            .map(|(m, s)| m.predict(tokens, batch, s))
            .collect::<Result<_>>()?;
        let mut outs = outs.into_iter();
        let (first, first_state) = outs.next().expect("non-empty ensemble");
        let mut sum: Vec<f64> = first.data().iter().map(|lp| lp.exp()).collect();
        let mut new_states = vec![first_state];
        for (lp, s) in outs {
            for (acc, v) in sum.iter_mut().zip(lp.data()) {
                *acc += v.exp();
            }
            new_states.push(s);
        }
        let k = self.members.len() as f64;
        if self.members.len() > 1 {
            for v in &mut sum {
                *v /= k;
            }
        }
        Ok((Tensor::new(first.shape().to_vec(), sum)?, new_states))
    }
}

/// Feeds an ensemble the same lanes as the student, carrying its states.
pub struct TeacherRunner<'a> {
    ensemble: &'a TeacherEnsemble,
    states: Vec<LmState>,
    temperature: f64,
}

impl<'a> TeacherRunner<'a> {
    pub fn new(ensemble: &'a TeacherEnsemble, temperature: f64) -> Result<Self> {
        if !(temperature >= 1.0) {
            return Err(Error::config(format!("temperature must be >= 1, got {temperature}")));
        }
        Ok(TeacherRunner {
            ensemble,
            states: Vec::new(),
            temperature,
        })
    }
}

impl SoftLabelSource for TeacherRunner<'_> {
    fn vocab_size(&self) -> usize {
        self.ensemble.vocab_size()
    }

    fn reset(&mut self, batch: usize) {
        self.states = self.ensemble.zero_states(batch);
    }

    fn soft_labels(&mut self, batch: &BpttBatch) -> Result<Tensor> {
        if self.states.is_empty() {
            self.reset(batch.batch);
        }
        let (q, states) = self.ensemble.predict(&batch.inputs, batch.batch, &self.states)?;
        self.states = states;
        if self.temperature == 1.0 {
            Ok(q)
        } else {
            loss::temperature_softmax(&q.map(|p| p.max(f64::MIN_POSITIVE).ln()), self.temperature)
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    norm
}

/// Running mean of parameter snapshots.
#[derive(Clone, Debug)]
struct Averager {
    mean: Vec<Vec<f64>>,
    count: u64,
}

impl Averager {
    fn new(model: &LmModel) -> Self {
        Averager {
            mean: model.tensors().iter().map(|t| t.data().to_vec()).collect(),
            count: 1,
        }
    }

    fn update(&mut self, model: &LmModel) {
        self.count += 1;
        let n = self.count as f64;
        for (m, t) in self.mean.iter_mut().zip(model.tensors()) {
            for (a, &p) in m.iter_mut().zip(t.data()) {
                *a += (p - *a) / n;
            }
        }
    }

    fn apply(&self, model: &LmModel) -> LmModel {
        let mut out = model.clone();
        for (t, m) in out.tensors_mut().iter_mut().zip(&self.mean) {
            t.data_mut().copy_from_slice(m);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// SGD state for one model. Drives single steps so callers can observe the
/// parameter trajectory.
pub struct Trainer<'t> {
    model: LmModel,
    cfg: TrainConfig,
    lr: f64,
    ctx: RegContext,
    state: LmState,
    teacher: Option<&'t mut dyn SoftLabelSource>,
    averager: Option<Averager>,
    steps: u64,
    epoch: usize,
    batch_in_epoch: usize,
}

impl<'t> Trainer<'t> {
    pub fn new(model: LmModel, cfg: TrainConfig, teacher: Option<&'t mut dyn SoftLabelSource>) -> Result<Self> {
        cfg.validate()?;
        match (&teacher, cfg.loss.variant.needs_teacher()) {
            (None, true) => {
                return Err(Error::config(format!("loss {} needs a teacher", cfg.loss.variant)));
            }
            (Some(_), false) => {
                return Err(Error::config("loss ce_only does not use a teacher"));
            }
            (Some(t), true) if t.vocab_size() != model.vocab_size() => {
                return Err(Error::config(format!(
                    "teacher vocabulary {} differs from student vocabulary {}",
                    t.vocab_size(),
                    model.vocab_size()
                )));
            }
            _ => {}
        }
        let state = LmState::zeros(model.config(), cfg.batch_size);
        let ctx = RegContext::train(cfg.seed);
        Ok(Trainer {
            lr: cfg.lr,
            model,
            cfg,
            ctx,
            state,
            teacher,
            averager: None,
            steps: 0,
            epoch: 0,
            batch_in_epoch: 0,
        })
    }

    pub fn model(&self) -> &LmModel {
        &self.model
    }

    pub fn into_model(self) -> LmModel {
        self.model
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Zero hidden state for student and teacher.
    pub fn begin_epoch(&mut self) {
        self.epoch += 1;
        self.batch_in_epoch = 0;
        self.state = LmState::zeros(self.model.config(), self.cfg.batch_size);
        if let Some(t) = self.teacher.as_deref_mut() {
            t.reset(self.cfg.batch_size);
        }
    }

    /// Model used for evaluation: the running average once averaging has
    /// started, otherwise the current parameters.
    pub fn eval_model(&self) -> LmModel {
        match &self.averager {
            Some(a) => a.apply(&self.model),
            None => self.model.clone(),
        }
    }

    pub fn start_averaging(&mut self) {
        if self.averager.is_none() {
            self.averager = Some(Averager::new(&self.model));
        }
    }

    pub fn is_averaging(&self) -> bool {
        self.averager.is_some()
    }

    /// One forward/backward/update on `batch`. The incoming hidden state is
    /// treated as a constant.
    pub fn step(&mut self, batch: &BpttBatch) -> Result<StepReport> {
        let (epoch, index) = (self.epoch, self.batch_in_epoch);
        let report = self.step_inner(batch).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch} batch {index}: {msg}")),
            other => other,
        })?;
        self.batch_in_epoch += 1;
        Ok(report)
    }

    fn step_inner(&mut self, batch: &BpttBatch) -> Result<StepReport> {
        let q = match self.teacher.as_deref_mut() {
            Some(t) => Some(t.soft_labels(batch)?),
            None => None,
        };
        self.ctx.begin_sequence();
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true)?;
        let out = self.model.forward(
            &mut tape,
            &bound,
            &batch.inputs,
            batch.batch,
            &self.state,
            &mut self.ctx,
        )?;
        let mut total = loss::distill_loss(&mut tape, out.log_probs, &self.cfg.loss, &batch.targets, q.as_ref())?;
        let reg = &self.model.config().dropout;
        if let Some(penalty) = regularization::activation_reg(
            &mut tape,
            &out.dropped_outputs,
            &out.raw_outputs,
            reg.ar_weight,
            reg.tar_weight,
        )? {
            total = tape.add(total, penalty)?;
        }
        let loss_value = tape.value(total).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss_value}")));
        }
        let grads = tape.backward(total)?;
        let mut g: Vec<Vec<f64>> = bound
            .vars
            .iter()
            .zip(self.model.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
            .collect();
        let grad_norm = clip_global_norm(&mut g, self.cfg.grad_clip);
        let lr = self.lr;
        for (t, g) in self.model.tensors_mut().iter_mut().zip(g) {
            for (p, gv) in t.data_mut().iter_mut().zip(&g) {
                *p -= lr * gv;
            }
            t.set_grad(g)?;
        }
        if let Some(a) = self.averager.as_mut() {
            a.update(&self.model);
        }
        self.state = out.state;
        self.steps += 1;
        Ok(StepReport {
            loss: loss_value,
            grad_norm,
        })
    }
}

pub struct TrainOutcome {
    /// Parameters with the best validation perplexity.
    pub best: LmModel,
    pub best_valid_ppl: f64,
    /// Parameters after the last epoch.
    pub last: LmModel,
    pub log: Vec<EpochLog>,
}

/// Full training run. `on_epoch` sees each log entry as it is produced.
pub fn train(
    model: LmModel,
    train: &TokenStream,
    valid: &TokenStream,
    teacher: Option<&mut dyn SoftLabelSource>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let batches = bptt_batches(train, cfg.batch_size, cfg.bptt_len)?;
    let mut trainer = Trainer::new(model, cfg.clone(), teacher)?;
    let mut best: Option<(f64, LmModel)> = None;
    let mut stalled = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        trainer.begin_epoch();
        let lr = trainer.lr();
        let mut loss_sum = 0.0;
        for batch in &batches {
            loss_sum += trainer.step(batch)?.loss;
        }
        let eval = trainer.eval_model();
        let valid_ppl = perplexity(&eval, valid, cfg.bptt_len)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            valid_ppl,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|(b, _)| valid_ppl < *b) {
            best = Some((valid_ppl, eval));
            stalled = 0;
        } else {
            stalled += 1;
            trainer.lr *= cfg.lr_decay_on_plateau;
            if cfg.asgd_trigger_patience > 0 && stalled >= cfg.asgd_trigger_patience {
                trainer.start_averaging();
            }
        }
    }
    let last = trainer.eval_model();
    let (best_valid_ppl, best) = best.unwrap_or((f64::INFINITY, last.clone()));
    Ok(TrainOutcome {
        best,
        best_valid_ppl,
        last,
        log,
    })
}

/// Sum of `−ln P(target)` and the number of targets over a single lane,
/// evaluated in windows of `window` tokens with carried state.
pub fn total_nll(model: &LmModel, stream: &TokenStream, window: usize) -> Result<(f64, usize)> {
    if stream.len() < 2 {
        return Err(Error::Data("perplexity needs at least two tokens".into()));
    }
    let window = window.max(1);
    let v = model.vocab_size();
    let mut state = LmState::zeros(model.config(), 1);
    let mut nll = 0.0;
    let mut count = 0;
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + window).min(stream.len() - 1);
        let inputs = &stream.ids[start..end];
        let (lp, next) = model.predict(inputs, 1, &state)?;
        for (i, &y) in stream.ids[start + 1..end + 1].iter().enumerate() {
            nll -= lp.data()[i * v + y];
        }
        count += end - start;
        state = next;
        start = end;
    }
    Ok((nll, count))
}

/// `exp` of the mean per-token negative log-likelihood, `<eos>` included.
pub fn perplexity(model: &LmModel, stream: &TokenStream, window: usize) -> Result<f64> {
    let (nll, n) = total_nll(model, stream, window)?;
    Ok((nll / n as f64).exp())
}

/// Mean per-token `KL(teacher ‖ student)` over a single lane of `stream`.
pub fn distillation_gap(
    teacher: &TeacherEnsemble,
    student: &LmModel,
    stream: &TokenStream,
    window: usize,
) -> Result<f64> {
    if stream.len() < 2 {
        return Err(Error::Data("distillation gap needs at least two tokens".into()));
    }
    let mut t_states = teacher.zero_states(1);
    let mut s_state = LmState::zeros(student.config(), 1);
    let mut total = 0.0;
    let mut count = 0;
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + window.max(1)).min(stream.len() - 1);
        let inputs = &stream.ids[start..end];
        let (q, ts) = teacher.predict(inputs, 1, &t_states)?;
        let (lp, ss) = student.predict(inputs, 1, &s_state)?;
        total += loss::mean_kl_divergence(&q, &lp)? * (end - start) as f64;
        count += end - start;
        t_states = ts;
        s_state = ss;
        start = end;
    }
    Ok(total / count as f64)
}
