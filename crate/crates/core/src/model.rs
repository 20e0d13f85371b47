//! The assembled network: encoders, bottlenecks, translators, fusion and head.

use crate::batch::MultimodalBatch;
use crate::bottleneck::{BottleneckLatent, IbDecoder, IbEncoder, LabelPredictor, Sampling};
use crate::config::{Ablation, ExperimentConfig};
use crate::data::Task;
use crate::encoders::ModalityEncoder;
use crate::error::{Error, Result};
use crate::fusion::{fuse_all, predict, FusionNetwork, Prediction, PredictionHead};
use crate::params::{ParamId, ParamStore};
use crate::protocols::{apply_mask, PresenceMask};
use crate::rng;
use crate::tape::{Matrix, Tape, Var};
use crate::translation::{cra_translate, Combine, TranslatorBank};

use ndarray::Array2;

/// IB encoders plus the decoders and predictors behind the two IB losses.
#[derive(Debug, Clone)]
pub struct BottleneckModules {
    pub encoders: Vec<IbEncoder>,
    /// `decoders[s][t]`; present only when the token-level IB is on.
    pub decoders: Option<Vec<Vec<IbDecoder>>>,
    /// Present only when the label-level IB is on.
    pub predictors: Option<Vec<LabelPredictor>>,
}

#[derive(Debug, Clone)]
pub struct CyinModel {
    pub config: ExperimentConfig,
    pub store: ParamStore,
    pub encoders: Vec<ModalityEncoder>,
    pub bottleneck: Option<BottleneckModules>,
    pub translators: TranslatorBank,
    pub fusion: FusionNetwork,
    pub head: PredictionHead,
}

/// Encoded view of one batch: unimodal representations and their latents.
///
/// Without the informative space the latents are the representations
/// themselves (`mu = sample = F_u`).
pub struct EncodedView {
    pub reprs: Vec<Var>,
    pub latents: Vec<BottleneckLatent>,
}

impl EncodedView {
    pub fn samples(&self) -> Vec<Var> {
        self.latents.iter().map(|l| l.sample).collect()
    }
}

impl CyinModel {
    /// Builds and initializes every module from `config.train.seed`.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = &config.data;
        let u = spec.num_modalities;
        let ablation = config.train.ablation;
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.train.seed, "init", 0);
        let rep = config.encoder.rep_dim;
        let encoders = (0..u)
            .map(|m| ModalityEncoder::new(&mut store, m, spec.feat_dims[m], rep, config.encoder.mixing, &mut r))
            .collect();
        let bottleneck = ablation.uses_bottleneck().then(|| {
            let encoders = (0..u).map(|m| IbEncoder::new(&mut store, m, rep, &config.ib, &mut r)).collect();
            let decoders = ablation.uses_tib().then(|| {
                (0..u)
                    .map(|s| (0..u).map(|t| IbDecoder::new(&mut store, s, t, rep, &config.ib, &mut r)).collect())
                    .collect()
            });
            let predictors = ablation.uses_lib().then(|| {
                (0..u)
                    .map(|m| LabelPredictor::new(&mut store, m, spec.task, spec.num_classes, &config.ib, &mut r))
                    .collect()
            });
            BottleneckModules { encoders, decoders, predictors }
        });
        let dim = config.fusion_dim();
        let translators = TranslatorBank::new(&mut store, u, dim, &config.translation, &mut r)?;
        let fusion = FusionNetwork::new(&mut store, u, dim, &config.fusion, &mut r)?;
        let head = PredictionHead::new(
            &mut store,
            fusion.output_dim(),
            config.fusion.head_hidden,
            spec.task,
            spec.num_classes,
            &mut r,
        )?;
        Ok(Self { config: config.clone(), store, encoders, bottleneck, translators, fusion, head })
    }

    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn ablation(&self) -> Ablation {
        self.config.train.ablation
    }

    pub fn task(&self) -> Task {
        self.config.data.task
    }

    pub fn translator_params(&self) -> Vec<ParamId> {
        self.translators.params()
    }

    /// Encoders and IB encoders for every modality of `batch`.
    pub fn encode(&self, tape: &mut Tape, batch: &MultimodalBatch, sampling: &mut Sampling) -> Result<EncodedView> {
        let u = self.num_modalities();
        if batch.num_modalities() != u {
            return Err(Error::dim("batch modalities", u, batch.num_modalities()));
        }
        let mut reprs = Vec::with_capacity(u);
        let mut latents = Vec::with_capacity(u);
        for (m, enc) in self.encoders.iter().enumerate() {
            let x = tape.input(batch.modalities[m].clone());
            let f = enc.encode(tape, &self.store, x, batch.seq_len)?;
            let latent = match &self.bottleneck {
                Some(b) => b.encoders[m].encode(tape, &self.store, f, sampling)?,
                None => BottleneckLatent { mu: f, sigma: f, sample: f, noise: None, modality: m },
            };
            reprs.push(f);
            latents.push(latent);
        }
        Ok(EncodedView { reprs, latents })
    }

    /// Replaces each missing latent with the translations of the present
    /// modalities of the same sample, combined per the configured rule.
    ///
    /// Translators act token-wise, so evaluating every translator on the
    /// whole batch and selecting rows by presence gives, for each sample,
    /// exactly the combination over that sample's present modalities.
    pub fn substitute_missing(&self, tape: &mut Tape, latents: &[Var], mask: &PresenceMask, seq_len: usize) -> Result<Vec<Var>> {
        let u = self.num_modalities();
        if latents.len() != u || mask.num_modalities() != u {
            return Err(Error::Arity { context: "substitute_missing".into(), required: u, actual: latents.len() });
        }
        let rows = mask.num_samples() * seq_len;
        if tape.shape(latents[0]).0 != rows {
            return Err(Error::dim("substitute_missing token rows", rows, tape.shape(latents[0]).0));
        }
        let column = |tape: &mut Tape, f: &dyn Fn(&[bool]) -> f64| {
            let col = Array2::from_shape_fn((rows, 1), |(r, _)| f(mask.row(r / seq_len)));
            tape.constant(col)
        };
        let mut out = latents.to_vec();
        for m in 0..u {
            if (0..mask.num_samples()).all(|i| mask.is_present(i, m)) {
                continue;
            }
            let mut acc: Option<Var> = None;
            for j in (0..u).filter(|&j| j != m) {
                if !(0..mask.num_samples()).any(|i| mask.is_present(i, j) && !mask.is_present(i, m)) {
                    continue;
                }
                let t = cra_translate(tape, &self.store, self.translators.get(j, m)?, latents[j])?;
                let pj = column(tape, &|row| if row[j] { 1.0 } else { 0.0 });
                let t = tape.mul_col(t, pj);
                acc = Some(match acc {
                    Some(a) => tape.add(a, t),
                    None => t,
                });
            }
            let mut acc = acc.expect("every row keeps a modality");
            if self.config.translation.combine == Combine::Mean {
                let inv = column(tape, &|row| {
                    let k = (0..u).filter(|&j| j != m && row[j]).count();
                    1.0 / k.max(1) as f64
                });
                acc = tape.mul_col(acc, inv);
            }
            let keep = column(tape, &|row| if row[m] { 1.0 } else { 0.0 });
            let fill = column(tape, &|row| if row[m] { 0.0 } else { 1.0 });
            let kept = tape.mul_col(latents[m], keep);
            let filled = tape.mul_col(acc, fill);
            out[m] = tape.add(kept, filled);
        }
        Ok(out)
    }

    pub fn fuse_and_predict(&self, tape: &mut Tape, latents: &[Var], seq_len: usize) -> Result<Prediction> {
        let fm = fuse_all(tape, &self.store, &self.fusion, latents, seq_len)?;
        predict(tape, &self.store, &self.head, fm)
    }

    /// Masked view: missing raw inputs zeroed, encoded, and (unless ablated)
    /// missing latents replaced by translations.
    pub fn forward_masked(
        &self,
        tape: &mut Tape,
        batch: &MultimodalBatch,
        mask: &PresenceMask,
        sampling: &mut Sampling,
    ) -> Result<(EncodedView, Prediction)> {
        let masked = apply_mask(batch, mask)?;
        let view = self.encode(tape, &masked.batch, sampling)?;
        let mut inputs = view.samples();
        if self.ablation().substitutes_translations() && !mask.is_complete() {
            inputs = self.substitute_missing(tape, &inputs, mask, batch.seq_len)?;
        }
        let pred = self.fuse_and_predict(tape, &inputs, batch.seq_len)?;
        Ok((view, pred))
    }

    /// Deterministic predictions on the means path: regression scores
    /// (`N x 1`) or class probabilities (`N x V`).
    pub fn predict(&self, batch: &MultimodalBatch, mask: &PresenceMask) -> Result<Matrix> {
        let mut tape = Tape::new();
        let (_, pred) = self.forward_masked(&mut tape, batch, mask, &mut Sampling::Eval)?;
        Ok(tape.value(pred.output()).clone())
    }
}
