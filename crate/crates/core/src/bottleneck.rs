//! Gaussian information bottlenecks at token and label level.
//!
//! An IB encoder maps each token of a unimodal representation to a diagonal
//! Gaussian `N(mu, sigma^2)` and draws `b = mu + sigma * z`. The KL to the
//! standard normal prior is taken in closed form, summed over channels and
//! averaged over tokens (and samples). The token-level objective decodes the
//! sampled latent of a source modality into a target modality's
//! representation; the label-level objective pools the token posteriors of a
//! modality and predicts the label from a pooled sample.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::Labels;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Matrix, Tape, Var};

/// Lower bound added to every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IbConfig {
    pub bottleneck_dim: usize,
    pub beta: f64,
    pub hidden_dim: usize,
}

impl Default for IbConfig {
    fn default() -> Self {
        Self { bottleneck_dim: 128, beta: 16.0, hidden_dim: 256 }
    }
}

impl IbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_dim < 1 {
            return Err(Error::Config("ib.bottleneck_dim must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("ib.beta must be a positive real, got {}", self.beta)));
        }
        if self.hidden_dim < 1 {
            return Err(Error::Config("ib.hidden_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether latents are sampled (training) or collapsed to their means.
pub enum Sampling<'a> {
    Train(&'a mut StreamRng),
    Eval,
}

impl Sampling<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Sampling::Train(_))
    }

    fn noise(&mut self, rows: usize, cols: usize) -> Option<Matrix> {
        match self {
            Sampling::Train(rng) => Some(standard_normal(rng, rows, cols)),
            Sampling::Eval => None,
        }
    }
}

pub fn standard_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// `mu + sigma * z` with fresh standard-normal `z`.
pub fn reparameterize<R: Rng>(mu: &Matrix, sigma: &Matrix, rng: &mut R) -> Matrix {
    let z = standard_normal(rng, mu.nrows(), mu.ncols());
    mu + &(sigma * &z)
}

/// Posterior parameters and sample for a sequence of tokens.
#[derive(Debug, Clone)]
pub struct BottleneckLatent {
    pub mu: Var,
    pub sigma: Var,
    pub sample: Var,
    /// Noise used for `sample`; `None` in evaluation mode.
    pub noise: Option<Matrix>,
    pub modality: usize,
}

impl BottleneckLatent {
    /// Build from explicit parameters (sigma must already be positive).
    pub fn from_parts(tape: &mut Tape, mu: Var, sigma: Var, modality: usize, sampling: &mut Sampling) -> Self {
        let (rows, cols) = tape.shape(mu);
        let noise = sampling.noise(rows, cols);
        let sample = match &noise {
            Some(z) => {
                let zv = tape.constant(z.clone());
                let scaled = tape.mul(sigma, zv);
                tape.add(mu, scaled)
            }
            None => mu,
        };
        Self { mu, sigma, sample, noise, modality }
    }
}

/// Per-modality Gaussian IB encoder `E_S : F_S -> B_S`, applied per token.
#[derive(Debug, Clone)]
pub struct IbEncoder {
    pub modality: usize,
    pub hidden: Linear,
    pub mu_head: Linear,
    pub sigma_head: Linear,
}

impl IbEncoder {
    pub fn new(store: &mut ParamStore, modality: usize, input_dim: usize, cfg: &IbConfig, rng: &mut StreamRng) -> Self {
        let name = format!("ib{modality}");
        let g = ParamGroup::Other;
        let hidden = Linear::new(store, &format!("{name}.hidden"), input_dim, cfg.hidden_dim, g, rng);
        let mu_head = Linear::new(store, &format!("{name}.mu"), cfg.hidden_dim, cfg.bottleneck_dim, g, rng);
        let sigma_head = Linear::new(store, &format!("{name}.sigma"), cfg.hidden_dim, cfg.bottleneck_dim, g, rng);
        Self { modality, hidden, mu_head, sigma_head }
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, repr: Var, sampling: &mut Sampling) -> Result<BottleneckLatent> {
        let (_, cols) = tape.shape(repr);
        if cols != self.hidden.in_dim {
            return Err(Error::dim(format!("IB encoder for modality {}", self.modality), self.hidden.in_dim, cols));
        }
        if !tape.value(repr).iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite representation into IB encoder {}", self.modality)));
        }
        let h = self.hidden.forward(tape, store, repr);
        let h = tape.tanh(h);
        let mu = self.mu_head.forward(tape, store, h);
        let pre = self.sigma_head.forward(tape, store, h);
        let sp = tape.softplus(pre);
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
        if !tape.value(mu).iter().chain(tape.value(sigma).iter()).all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite posterior parameters in IB encoder {}", self.modality)));
        }
        Ok(BottleneckLatent::from_parts(tape, mu, sigma, self.modality, sampling))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.hidden.params(), self.mu_head.params(), self.sigma_head.params()].concat()
    }
}

/// IB decoder `D_{S->T}` from a source bottleneck to a target representation.
#[derive(Debug, Clone)]
pub struct IbDecoder {
    pub source: usize,
    pub target: usize,
    pub mlp: Mlp,
}

impl IbDecoder {
    pub fn new(store: &mut ParamStore, source: usize, target: usize, out_dim: usize, cfg: &IbConfig, rng: &mut StreamRng) -> Self {
        let mlp = Mlp::new(
            store,
            &format!("ibdec{source}to{target}"),
            &[cfg.bottleneck_dim, cfg.hidden_dim, out_dim],
            Activation::Tanh,
            ParamGroup::Other,
            rng,
        );
        Self { source, target, mlp }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// Per-modality label predictor `P_S`.
#[derive(Debug, Clone)]
pub struct LabelPredictor {
    pub modality: usize,
    pub mlp: Mlp,
    pub task: Task,
}

impl LabelPredictor {
    pub fn new(store: &mut ParamStore, modality: usize, task: Task, num_classes: usize, cfg: &IbConfig, rng: &mut StreamRng) -> Self {
        let out = match task {
            Task::Regression => 1,
            Task::Classification => num_classes,
        };
        let mlp = Mlp::new(
            store,
            &format!("labelpred{modality}"),
            &[cfg.bottleneck_dim, cfg.hidden_dim, out],
            Activation::Tanh,
            ParamGroup::Other,
            rng,
        );
        Self { modality, mlp, task }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

fn check_sigma(values: &Matrix) -> Result<()> {
    if let Some(bad) = values.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Domain(format!("sigma must be strictly positive, found {bad}")));
    }
    Ok(())
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))`, summed over channels and
/// averaged over rows.
pub fn gaussian_kl_value(mu: &Matrix, sigma: &Matrix) -> Result<f64> {
    if mu.dim() != sigma.dim() {
        return Err(Error::dim("gaussian_kl", format!("{:?}", mu.dim()), format!("{:?}", sigma.dim())));
    }
    check_sigma(sigma)?;
    let total: f64 = mu
        .iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| -0.5 * ((s * s).ln() + 1.0 - m * m - s * s))
        .sum();
    Ok(total / mu.nrows() as f64)
}

/// Tape version of [`gaussian_kl_value`].
pub fn gaussian_kl(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    if tape.shape(mu) != tape.shape(sigma) {
        return Err(Error::dim("gaussian_kl", format!("{:?}", tape.shape(mu)), format!("{:?}", tape.shape(sigma))));
    }
    check_sigma(tape.value(sigma))?;
    let rows = tape.shape(mu).0 as f64;
    let log_s = tape.ln(sigma);
    let log_var = tape.scale(log_s, 2.0);
    let mu2 = tape.square(mu);
    let s2 = tape.square(sigma);
    let a = tape.add_scalar(log_var, 1.0);
    let a = tape.sub(a, mu2);
    let a = tape.sub(a, s2);
    let total = tape.sum(a);
    Ok(tape.scale(total, -0.5 / rows))
}

/// Mean over rows of the per-row squared Euclidean distance.
pub fn mean_row_sq_dist(tape: &mut Tape, a: Var, b: Var) -> Var {
    let rows = tape.shape(a).0 as f64;
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / rows)
}

/// Token-level IB for one direction: `KL + beta * ||f_T - D(b_S)||^2`,
/// averaged over tokens.
pub fn token_ib_loss(
    tape: &mut Tape,
    store: &ParamStore,
    source: &BottleneckLatent,
    target: Var,
    decoder: &IbDecoder,
    beta: f64,
) -> Result<Var> {
    let (src_rows, _) = tape.shape(source.sample);
    let (tgt_rows, tgt_cols) = tape.shape(target);
    if src_rows != tgt_rows {
        return Err(Error::dim(
            format!("token IB {}->{} token count", decoder.source, decoder.target),
            src_rows,
            tgt_rows,
        ));
    }
    if tgt_cols != decoder.mlp.out_dim() {
        return Err(Error::dim(
            format!("token IB {}->{} target width", decoder.source, decoder.target),
            decoder.mlp.out_dim(),
            tgt_cols,
        ));
    }
    let kl = gaussian_kl(tape, source.mu, source.sigma)?;
    let decoded = decoder.mlp.forward(tape, store, source.sample);
    let rec = mean_row_sq_dist(tape, target, decoded);
    let rec = tape.scale(rec, beta);
    Ok(tape.add(kl, rec))
}

/// Weights of each directed term in the cyclic token-level objective.
///
/// Self terms `S->S` each get `1/U`; each cross term `S->T` gets `1/(2P)`
/// with `P = U(U-1)/2` unordered pairs. Equivalently: the mean over unordered
/// pairs `{S, T}` of `(L_SS + L_TT)/2 + (L_ST + L_TS)/2`. Without cyclic
/// interaction only the self terms remain.
pub fn cyclic_term_weights(num_modalities: usize, cross_terms: bool) -> Vec<((usize, usize), f64)> {
    let u = num_modalities;
    let pairs = (u * (u - 1) / 2) as f64;
    let mut out = Vec::new();
    for s in 0..u {
        out.push(((s, s), 1.0 / u as f64));
    }
    if cross_terms {
        for s in 0..u {
            for t in 0..u {
                if s != t {
                    out.push(((s, t), 0.5 / pairs));
                }
            }
        }
    }
    out
}

/// Cyclic token-level IB over all self and cross directions.
///
/// `decoders[s][t]` decodes modality `s`'s bottleneck into modality `t`'s
/// representation.
pub fn cyclic_token_ib_loss(
    tape: &mut Tape,
    store: &ParamStore,
    latents: &[BottleneckLatent],
    reprs: &[Var],
    decoders: &[Vec<IbDecoder>],
    beta: f64,
    cross_terms: bool,
) -> Result<Var> {
    let u = latents.len();
    if u < 2 || reprs.len() != u || decoders.len() != u {
        return Err(Error::Arity { context: "cyclic token IB".into(), required: 2, actual: u.min(reprs.len()) });
    }
    let mut acc: Option<Var> = None;
    for ((s, t), w) in cyclic_term_weights(u, cross_terms) {
        let term = token_ib_loss(tape, store, &latents[s], reprs[t], &decoders[s][t], beta)?;
        let term = tape.scale(term, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    Ok(acc.expect("at least two modalities"))
}

/// Pool a token posterior into one Gaussian per sample: mean of the means,
/// and `sigma_bar^2` = mean of the variances.
pub fn pool_label_latent(tape: &mut Tape, latent: &BottleneckLatent, seq_len: usize) -> Result<(Var, Var)> {
    let (rows, _) = tape.shape(latent.mu);
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::dim("pool_label_latent rows", format!("a multiple of {seq_len}"), rows));
    }
    let mu_bar = tape.group_mean(latent.mu, seq_len);
    let var = tape.square(latent.sigma);
    let var_bar = tape.group_mean(var, seq_len);
    let sigma_bar = tape.sqrt(var_bar);
    Ok((mu_bar, sigma_bar))
}

/// Batch-mean absolute error between an `N x 1` prediction and labels.
pub fn mean_abs_error(tape: &mut Tape, pred: Var, target: Var) -> Var {
    let d = tape.sub(pred, target);
    let a = tape.abs(d);
    tape.mean(a)
}

/// Batch-mean cross-entropy of logits against a one-hot matrix.
pub fn cross_entropy_logits(tape: &mut Tape, logits: Var, one_hot: Var) -> Var {
    let logp = tape.log_softmax(logits);
    let picked = tape.mul(logp, one_hot);
    let s = tape.sum(picked);
    let n = tape.shape(logits).0 as f64;
    tape.scale(s, -1.0 / n)
}

fn prediction_term(tape: &mut Tape, logits: Var, labels: &Labels, task: Task) -> Result<Var> {
    if labels.task() != task {
        return Err(Error::TaskMismatch(format!("{} predictor given {} labels", task, labels.task())));
    }
    let n = tape.shape(logits).0;
    if labels.len() != n {
        return Err(Error::dim("label count", n, labels.len()));
    }
    Ok(match task {
        Task::Regression => {
            let y = tape.constant(labels.regression_column()?);
            mean_abs_error(tape, logits, y)
        }
        Task::Classification => {
            let oh = labels.one_hot()?;
            if oh.ncols() != tape.shape(logits).1 {
                return Err(Error::dim("class count", tape.shape(logits).1, oh.ncols()));
            }
            let oh = tape.constant(oh);
            cross_entropy_logits(tape, logits, oh)
        }
    })
}

/// Label-level IB averaged over modalities.
///
/// `pooled[s]` holds modality `s`'s pooled `(mu_bar, sigma_bar)`, each
/// `N x C_B`. In training mode a pooled sample is drawn by
/// reparameterization; in evaluation mode the pooled mean is used.
pub fn label_ib_loss(
    tape: &mut Tape,
    store: &ParamStore,
    pooled: &[(Var, Var)],
    labels: &Labels,
    predictors: &[LabelPredictor],
    beta: f64,
    sampling: &mut Sampling,
) -> Result<Var> {
    if pooled.is_empty() || pooled.len() != predictors.len() {
        return Err(Error::Arity { context: "label IB".into(), required: 1, actual: pooled.len().min(predictors.len()) });
    }
    let mut acc: Option<Var> = None;
    for (&(mu, sigma), pred) in pooled.iter().zip(predictors) {
        let latent = BottleneckLatent::from_parts(tape, mu, sigma, pred.modality, sampling);
        let kl = gaussian_kl(tape, mu, sigma)?;
        let logits = pred.mlp.forward(tape, store, latent.sample);
        let p = prediction_term(tape, logits, labels, pred.task)?;
        let p = tape.scale(p, beta);
        let term = tape.add(kl, p);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    Ok(tape.scale(acc.expect("nonempty"), 1.0 / pooled.len() as f64))
}
