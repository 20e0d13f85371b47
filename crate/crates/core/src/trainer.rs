//! Total objective, two-stage training and protocol evaluation.

use std::io::Write;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{Labels, MultimodalBatch};
use crate::bottleneck::{cyclic_token_ib_loss, label_ib_loss, pool_label_latent, Sampling};
use crate::config::ExperimentConfig;
use crate::data::{Label, MultimodalSample, Task};
use crate::error::{Error, Result};
use crate::fusion::task_loss;
use crate::metrics::MetricReport;
use crate::model::CyinModel;
use crate::params::{ParamGroup, ParamStore};
use crate::protocols::{random_mask_clamped, PresenceMask, Protocol};
use crate::rng::{self, StreamRng};
use crate::tape::{Gradients, Matrix, Tape, Var};
use crate::translation::translation_loss;

/// Scalar loss components of one step. Absent components are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub task: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tib: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lib: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cyc: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    /// `task + (tib + lib) / beta + gamma * (rec + cyc)` from the components.
    pub fn recombined(&self, beta: f64, gamma: f64) -> f64 {
        let z = |v: Option<f64>| v.unwrap_or(0.0);
        self.task + (z(self.tib) + z(self.lib)) / beta + gamma * (z(self.rec) + z(self.cyc))
    }

    fn components(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("task", Some(self.task)),
            ("tib", self.tib),
            ("lib", self.lib),
            ("rec", self.rec),
            ("cyc", self.cyc),
            ("total", Some(self.total)),
        ]
    }
}

/// Tape nodes of the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub task: Var,
    pub tib: Option<Var>,
    pub lib: Option<Var>,
    pub rec: Option<Var>,
    pub cyc: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn bundle(&self, tape: &Tape) -> LossBundle {
        let s = |v: Option<Var>| v.map(|v| tape.scalar(v));
        LossBundle {
            task: tape.scalar(self.task),
            tib: s(self.tib),
            lib: s(self.lib),
            rec: s(self.rec),
            cyc: s(self.cyc),
            total: tape.scalar(self.total),
        }
    }
}

fn add_opt(tape: &mut Tape, a: Option<Var>, b: Option<Var>) -> Option<Var> {
    match (a, b) {
        (Some(a), Some(b)) => Some(tape.add(a, b)),
        (a, None) => a,
        (None, b) => b,
    }
}

/// Builds the full objective for one batch.
///
/// IB and translation losses use the complete view. With a `mask`, the task
/// loss is the mean of the complete-view and masked-view prediction losses;
/// without one it is the complete-view loss alone. Translation losses are
/// built only when `gamma > 0`, so translators get no gradient otherwise.
pub fn total_loss(
    tape: &mut Tape,
    model: &CyinModel,
    batch: &MultimodalBatch,
    mask: Option<&PresenceMask>,
    gamma: f64,
    noise: &mut StreamRng,
) -> Result<LossVars> {
    let u = model.num_modalities();
    let rows = batch.num_samples * batch.seq_len;
    if batch.num_modalities() != u || batch.modalities.iter().any(|m| m.nrows() != rows) {
        return Err(Error::Data(format!(
            "stored batch must hold all {u} modalities with {rows} token rows each"
        )));
    }
    if batch.labels.len() != batch.num_samples {
        return Err(Error::Data(format!("{} labels for {} samples", batch.labels.len(), batch.num_samples)));
    }
    let ablation = model.ablation();
    let beta = model.config.ib.beta;
    let mut sampling = Sampling::Train(noise);
    let view = model.encode(tape, batch, &mut sampling)?;

    let mut tib = None;
    let mut lib = None;
    if let Some(b) = &model.bottleneck {
        if let Some(decoders) = &b.decoders {
            tib = Some(cyclic_token_ib_loss(
                tape,
                &model.store,
                &view.latents,
                &view.reprs,
                decoders,
                beta,
                ablation.tib_cross_terms(),
            )?);
        }
        if let Some(predictors) = &b.predictors {
            let pooled = view
                .latents
                .iter()
                .map(|l| pool_label_latent(tape, l, batch.seq_len))
                .collect::<Result<Vec<_>>>()?;
            lib = Some(label_ib_loss(tape, &model.store, &pooled, &batch.labels, predictors, beta, &mut sampling)?);
        }
    }

    let complete_pred = model.fuse_and_predict(tape, &view.samples(), batch.seq_len)?;
    let mut task = task_loss(tape, &complete_pred, &batch.labels)?;
    if let Some(mask) = mask {
        let (_, masked_pred) = model.forward_masked(tape, batch, mask, &mut sampling)?;
        let masked = task_loss(tape, &masked_pred, &batch.labels)?;
        let both = tape.add(task, masked);
        task = tape.scale(both, 0.5);
    }

    let (mut rec, mut cyc) = (None, None);
    if gamma > 0.0 {
        let tl = translation_loss(
            tape,
            &model.store,
            &view.latents,
            &model.translators,
            ablation.uses_cycle(),
            model.config.translation.detach_targets,
        )?;
        rec = Some(tl.rec);
        cyc = tl.cyc;
    }

    let mut total = task;
    if let Some(ib) = add_opt(tape, tib, lib) {
        let w = tape.scale(ib, 1.0 / beta);
        total = tape.add(total, w);
    }
    if let Some(tr) = add_opt(tape, rec, cyc) {
        let w = tape.scale(tr, gamma);
        total = tape.add(total, w);
    }
    Ok(LossVars { task, tib, lib, rec, cyc, total })
}

/// AdamW with one learning rate per parameter group.
///
/// Parameters without a gradient in a step are left untouched, including
/// weight decay, and their moment estimates do not advance.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr_encoder: f64,
    lr_other: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    state: Vec<Option<(Matrix, Matrix, i32)>>,
}

impl AdamW {
    pub fn new(cfg: &ExperimentConfig, num_params: usize) -> Self {
        let t = &cfg.train;
        Self {
            lr_encoder: t.lr_encoder,
            lr_other: t.lr_other,
            beta1: t.adam_beta1,
            beta2: t.adam_beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
            state: vec![None; num_params],
        }
    }

    /// Applies one update with gradients scaled by `grad_scale`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, grad_scale: f64) {
        let ids: Vec<_> = grads.param_grads().map(|(id, _)| id).collect();
        for id in ids {
            let g = grads.param(id).expect("listed") * grad_scale;
            let lr = match store.group(id) {
                ParamGroup::Encoder => self.lr_encoder,
                ParamGroup::Other => self.lr_other,
            };
            let slot = &mut self.state[id.index()];
            let (m, v, t) = slot.get_or_insert_with(|| (Matrix::zeros(g.dim()), Matrix::zeros(g.dim()), 0));
            *t += 1;
            m.zip_mut_with(&g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(&g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let c1 = 1.0 - self.beta1.powi(*t);
            let c2 = 1.0 - self.beta2.powi(*t);
            let (eps, wd) = (self.eps, self.weight_decay);
            let w = store.value_mut(id);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + eps) + wd * *w;
                *w = (*w - lr * update) as f32 as f64;
            });
        }
    }
}

/// Euclidean norm over every parameter gradient.
pub fn global_grad_norm(grads: &Gradients) -> f64 {
    grads.param_grads().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: u8,
    /// Target missing rate of the masked view, if one was drawn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mr: Option<f64>,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub grad_norm: f64,
}

/// Probe objective on a fixed batch, noise and mask at both ends of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub mean_total: f64,
    pub probe_start: f64,
    pub probe_end: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CyinModel,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// One JSON object per step.
    pub fn log_jsonl(&self) -> String {
        let mut out = Vec::new();
        for s in &self.steps {
            serde_json::to_writer(&mut out, s).expect("record serializes");
            writeln!(out).expect("write to vec");
        }
        String::from_utf8(out).expect("utf8 json")
    }
}

fn check_finite(step: usize, bundle: &LossBundle) -> Result<()> {
    for (name, v) in bundle.components() {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::Divergence { step, component: format!("{name} loss") });
            }
        }
    }
    Ok(())
}

fn batch_of(samples: &[MultimodalSample], idx: &[usize], cfg: &ExperimentConfig) -> Result<MultimodalBatch> {
    MultimodalBatch::from_samples(samples, idx, cfg.data.task, cfg.data.num_classes)
}

struct Probe {
    batch: MultimodalBatch,
    mask: PresenceMask,
}

impl Probe {
    fn new(samples: &[MultimodalSample], cfg: &ExperimentConfig) -> Result<Self> {
        let n = samples.len().min(cfg.train.batch_size);
        let idx: Vec<usize> = (0..n).collect();
        let batch = batch_of(samples, &idx, cfg)?;
        let mr = cfg.train.mr_curriculum[cfg.train.mr_curriculum.len() / 2];
        let mut r = rng::stream(cfg.train.seed, "probe-mask", 0);
        let mask = random_mask_clamped(n, cfg.data.num_modalities, mr, &mut r)?;
        Ok(Self { batch, mask })
    }

    fn total(&self, model: &CyinModel, stage: u8) -> Result<f64> {
        let mut tape = Tape::new();
        let mut noise = rng::stream(model.config.train.seed, "probe-noise", 0);
        let (mask, gamma) = match stage {
            1 => (None, 0.0),
            _ => (Some(&self.mask), model.config.train.gamma),
        };
        let vars = total_loss(&mut tape, model, &self.batch, mask, gamma, &mut noise)?;
        Ok(tape.scalar(vars.total))
    }
}

/// Aborts with the first parameter tensor an update left non-finite.
fn check_params(step: usize, store: &ParamStore) -> Result<()> {
    match store.ids().find(|&id| store.value(id).iter().any(|v| !v.is_finite())) {
        Some(id) => Err(Error::Divergence { step, component: format!("parameter {}", store.name(id)) }),
        None => Ok(()),
    }
}

/// Two-stage training on `samples`, reporting each finished epoch.
pub fn train_observed(
    cfg: &ExperimentConfig,
    samples: &[MultimodalSample],
    mut observer: impl FnMut(&EpochRecord, &CyinModel),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("train"));
    }
    let mut model = CyinModel::new(cfg)?;
    let t = &cfg.train;
    let mut opt = AdamW::new(cfg, model.store.len());
    let probe = Probe::new(samples, cfg)?;
    let stage1 = t.stage1_epochs();
    let u = cfg.data.num_modalities;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0usize;
    for epoch in 0..t.epochs {
        let stage: u8 = if epoch < stage1 { 1 } else { 2 };
        let probe_start = probe.total(&model, stage)?;
        order.shuffle(&mut rng::stream(t.seed, "shuffle", epoch as u64));
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(t.batch_size) {
            let batch = batch_of(samples, chunk, cfg)?;
            let (mask, mr, gamma) = if stage == 1 {
                (None, None, 0.0)
            } else {
                let mut r = rng::stream(t.seed, "curriculum", step as u64);
                let mr = t.mr_curriculum[r.random_range(0..t.mr_curriculum.len())];
                let mask = random_mask_clamped(chunk.len(), u, mr, &mut r)?;
                (Some(mask), Some(mr), t.gamma)
            };
            let mut noise = rng::stream(t.seed, "reparam", step as u64);
            let mut tape = Tape::new();
            let vars = total_loss(&mut tape, &model, &batch, mask.as_ref(), gamma, &mut noise)?;
            let losses = vars.bundle(&tape);
            check_finite(step, &losses)?;
            let grads = tape.backward(vars.total);
            let norm = global_grad_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::Divergence { step, component: "gradient norm".into() });
            }
            let scale = if t.clip_norm > 0.0 && norm > t.clip_norm { t.clip_norm / norm } else { 1.0 };
            opt.step(&mut model.store, &grads, scale);
            check_params(step, &model.store)?;
            sum += losses.total;
            count += 1;
            steps.push(StepRecord { step, epoch, stage, mr, losses, grad_norm: norm });
            step += 1;
        }
        let probe_end = probe.total(&model, stage)?;
        let rec = EpochRecord { epoch, stage, mean_total: sum / count as f64, probe_start, probe_end };
        observer(&rec, &model);
        epochs.push(rec);
    }
    Ok(TrainOutcome { model, steps, epochs })
}

pub fn train(cfg: &ExperimentConfig, samples: &[MultimodalSample]) -> Result<TrainOutcome> {
    train_observed(cfg, samples, |_, _| {})
}

/// Fits only the translators on frozen complete-view latents (means path)
/// and returns the pair-averaged forward reconstruction loss before each
/// step, followed by the final value.
pub fn fit_translators(model: &mut CyinModel, samples: &[MultimodalSample], steps: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("fit_translators"));
    }
    let cfg = model.config.clone();
    let n = samples.len().min(cfg.train.batch_size);
    let mut opt = AdamW::new(&cfg, model.store.len());
    let mut history = Vec::with_capacity(steps + 1);
    let eval_idx: Vec<usize> = (0..n).collect();
    let rec_on = |model: &CyinModel, idx: &[usize], tape: &mut Tape| -> Result<Var> {
        let batch = batch_of(samples, idx, &cfg)?;
        let view = model.encode(tape, &batch, &mut Sampling::Eval)?;
        let frozen: Vec<_> = view
            .latents
            .iter()
            .map(|l| {
                let v = tape.constant(tape.value(l.sample).clone());
                crate::bottleneck::BottleneckLatent { mu: v, sigma: v, sample: v, noise: None, modality: l.modality }
            })
            .collect();
        Ok(translation_loss(tape, &model.store, &frozen, &model.translators, false, true)?.rec)
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for step in 0..steps {
        let mut probe = Tape::new();
        let v = rec_on(model, &eval_idx, &mut probe)?;
        history.push(probe.scalar(v));
        if step % samples.len().div_ceil(n) == 0 {
            order.shuffle(&mut rng::stream(cfg.train.seed, "translator-shuffle", step as u64));
        }
        let k = step % samples.len().div_ceil(n);
        let chunk = &order[k * n..((k + 1) * n).min(samples.len())];
        let mut tape = Tape::new();
        let loss = rec_on(model, chunk, &mut tape)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Divergence { step, component: "rec loss".into() });
        }
        let grads = tape.backward(loss);
        let norm = global_grad_norm(&grads);
        let clip = cfg.train.clip_norm;
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        opt.step(&mut model.store, &grads, scale);
    }
    let mut probe = Tape::new();
    let v = rec_on(model, &eval_idx, &mut probe)?;
    history.push(probe.scalar(v));
    Ok(history)
}

/// Means-path predictions under `mask`, batched.
pub fn predict_all(model: &CyinModel, samples: &[MultimodalSample], mask: &PresenceMask) -> Result<Matrix> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("predict_all"));
    }
    let cfg = &model.config;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(cfg.train.batch_size) {
        let batch = batch_of(samples, chunk, cfg)?;
        parts.push(model.predict(&batch, &mask.slice(chunk))?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("uniform widths"))
}

/// Metrics under `protocol`, with the protocol mask drawn from `mask_seed`.
pub fn evaluate(model: &CyinModel, samples: &[MultimodalSample], protocol: &Protocol, mask_seed: u64) -> Result<MetricReport> {
    let u = model.num_modalities();
    protocol.validate(u)?;
    let mask = protocol.mask(samples.len(), u, mask_seed)?;
    let out = predict_all(model, samples, &mask)?;
    match model.task() {
        Task::Regression => {
            let preds: Vec<f64> = out.column(0).to_vec();
            let labels: Vec<f64> = samples.iter().map(|s| s.label.as_f64()).collect();
            MetricReport::regression(&preds, &labels, protocol.clone(), mask_seed)
        }
        Task::Classification => {
            let preds: Vec<usize> = out
                .rows()
                .into_iter()
                .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0)
                .collect();
            let labels = samples
                .iter()
                .map(|s| match s.label {
                    Label::Class(c) => Ok(c as usize),
                    Label::Regression(_) => Err(Error::TaskMismatch("regression label in a classification set".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            MetricReport::classification(&preds, &labels, model.config.data.num_classes, protocol.clone(), mask_seed)
        }
    }
}

/// Labels of `samples` in the layout used by the loss functions.
pub fn labels_of(samples: &[MultimodalSample], task: Task, num_classes: usize) -> Result<Labels> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    Ok(MultimodalBatch::from_samples(samples, &idx, task, num_classes)?.labels)
}
