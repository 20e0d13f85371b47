//! Pairwise cross-modal attention fusion and the prediction head.
//!
//! For each fused pair `(j, k)` a stack of blocks lets `B_j` (then the running
//! fused sequence) attend over `B_k`. The final sequence of each pair is
//! reduced to one vector per sample and all pairs are concatenated into the
//! multimodal representation `F_M`.

use serde::{Deserialize, Serialize};

use crate::batch::Labels;
use crate::bottleneck::{cross_entropy_logits, mean_abs_error};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `Z = Y + LN(q)`, `M = FF(LN(Z)) + LN(Z)`.
    #[default]
    Literal,
    /// `Z = LN(q + Y)`, `M = LN(Z + FF(Z))`.
    PostNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Last,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub num_heads: usize,
    pub num_layers: usize,
    pub ff_hidden: usize,
    pub head_hidden: usize,
    pub norm: NormPlacement,
    pub reduction: Reduction,
    /// Fuse each pair in both query directions.
    pub symmetric: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            num_heads: 8,
            num_layers: 2,
            ff_hidden: 256,
            head_hidden: 128,
            norm: NormPlacement::Literal,
            reduction: Reduction::Last,
            symmetric: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.num_heads == 0 || latent_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "fusion.num_heads = {} must divide the latent dimension {latent_dim}",
                self.num_heads
            )));
        }
        if self.num_layers < 1 {
            return Err(Error::Config("fusion.num_layers must be >= 1".into()));
        }
        if self.ff_hidden < 1 || self.head_hidden < 1 {
            return Err(Error::Config("fusion hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self, latent_dim: usize) -> usize {
        latent_dim / self.num_heads
    }
}

/// Fused pairs as `(query, key)` modality indices: ordered by index gap, then
/// by lower index, so `U = 3` gives `(0,1), (1,2), (0,2)`. In symmetric mode
/// each pair is followed by its reverse.
pub fn pair_order(num_modalities: usize, symmetric: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for gap in 1..num_modalities {
        for j in 0..num_modalities - gap {
            out.push((j, j + gap));
            if symmetric {
                out.push((j + gap, j));
            }
        }
    }
    out
}

/// One cross-modal attention block `r`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub dim: usize,
    pub heads: usize,
    pub norm: NormPlacement,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_query: LayerNorm,
    pub ln_fused: LayerNorm,
    pub ff: Mlp,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, cfg: &FusionConfig, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate(dim)?;
        let g = ParamGroup::Other;
        Ok(Self {
            dim,
            heads: cfg.num_heads,
            norm: cfg.norm,
            wq: Linear::without_bias(store, &format!("{name}.wq"), dim, dim, g, rng),
            wk: Linear::without_bias(store, &format!("{name}.wk"), dim, dim, g, rng),
            wv: Linear::without_bias(store, &format!("{name}.wv"), dim, dim, g, rng),
            wo: Linear::without_bias(store, &format!("{name}.wo"), dim, dim, g, rng),
            ln_query: LayerNorm::new(store, &format!("{name}.ln_query"), dim, g),
            ln_fused: LayerNorm::new(store, &format!("{name}.ln_fused"), dim, g),
            ff: Mlp::new(store, &format!("{name}.ff"), &[dim, cfg.ff_hidden, dim], Activation::Relu, g, rng),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            p.extend(l.params());
        }
        p.extend(self.ln_query.params());
        p.extend(self.ln_fused.params());
        p.extend(self.ff.params());
        p
    }
}

fn check_latent(tape: &Tape, v: Var, dim: usize, seq_len: usize, what: &str) -> Result<()> {
    let (rows, cols) = tape.shape(v);
    if cols != dim {
        return Err(Error::dim(format!("{what} width"), dim, cols));
    }
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::dim(format!("{what} rows"), format!("a multiple of {seq_len}"), rows));
    }
    Ok(())
}

/// Multi-head attention output `Y = Concat(heads) W_o` before any residual.
pub fn multihead(tape: &mut Tape, store: &ParamStore, block: &AttentionBlock, query: Var, key_value: Var, seq_len: usize) -> Result<Var> {
    check_latent(tape, query, block.dim, seq_len, "attention query")?;
    check_latent(tape, key_value, block.dim, seq_len, "attention key/value")?;
    if tape.shape(query).0 != tape.shape(key_value).0 {
        return Err(Error::dim("attention batch rows", tape.shape(query).0, tape.shape(key_value).0));
    }
    let q = block.wq.forward(tape, store, query);
    let k = block.wk.forward(tape, store, key_value);
    let v = block.wv.forward(tape, store, key_value);
    let scale = 1.0 / (block.dim as f64).sqrt();
    let heads = tape.attention(q, k, v, block.heads, seq_len, seq_len, scale);
    Ok(block.wo.forward(tape, store, heads))
}

/// One full block: attention, residual and normalization, feed-forward.
pub fn cross_modal_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: &AttentionBlock,
    query: Var,
    key_value: Var,
    seq_len: usize,
) -> Result<Var> {
    let y = multihead(tape, store, block, query, key_value, seq_len)?;
    Ok(match block.norm {
        NormPlacement::Literal => {
            let nq = block.ln_query.forward(tape, store, query);
            let z = tape.add(y, nq);
            let nz = block.ln_fused.forward(tape, store, z);
            let f = block.ff.forward(tape, store, nz);
            tape.add(f, nz)
        }
        NormPlacement::PostNorm => {
            let s = tape.add(query, y);
            let z = block.ln_query.forward(tape, store, s);
            let f = block.ff.forward(tape, store, z);
            let s2 = tape.add(z, f);
            block.ln_fused.forward(tape, store, s2)
        }
    })
}

/// The `R`-block stack for one `(query, key)` pair.
#[derive(Debug, Clone)]
pub struct PairFuser {
    pub query: usize,
    pub key: usize,
    pub blocks: Vec<AttentionBlock>,
}

impl PairFuser {
    pub fn new(store: &mut ParamStore, query: usize, key: usize, dim: usize, cfg: &FusionConfig, rng: &mut StreamRng) -> Result<Self> {
        let blocks = (0..cfg.num_layers)
            .map(|r| AttentionBlock::new(store, &format!("fusion.p{query}_{key}.b{r}"), dim, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { query, key, blocks })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(AttentionBlock::params).collect()
    }
}

/// `M^{j,k}_R` reduced to one `C_B` vector per sample (`N x C_B`).
pub fn fuse_pair(
    tape: &mut Tape,
    store: &ParamStore,
    fuser: &PairFuser,
    latent_j: Var,
    latent_k: Var,
    seq_len: usize,
    reduction: Reduction,
) -> Result<Var> {
    let mut m = latent_j;
    for block in &fuser.blocks {
        m = cross_modal_attention(tape, store, block, m, latent_k, seq_len)?;
    }
    Ok(match reduction {
        Reduction::Last => tape.group_last(m, seq_len),
        Reduction::Mean => tape.group_mean(m, seq_len),
    })
}

#[derive(Debug, Clone)]
pub struct FusionNetwork {
    pub num_modalities: usize,
    pub latent_dim: usize,
    pub reduction: Reduction,
    pub pairs: Vec<PairFuser>,
}

impl FusionNetwork {
    pub fn new(store: &mut ParamStore, num_modalities: usize, latent_dim: usize, cfg: &FusionConfig, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate(latent_dim)?;
        if num_modalities < 2 {
            return Err(Error::Arity { context: "fusion".into(), required: 2, actual: num_modalities });
        }
        let pairs = pair_order(num_modalities, cfg.symmetric)
            .into_iter()
            .map(|(j, k)| PairFuser::new(store, j, k, latent_dim, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { num_modalities, latent_dim, reduction: cfg.reduction, pairs })
    }

    pub fn output_dim(&self) -> usize {
        self.pairs.len() * self.latent_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.pairs.iter().flat_map(PairFuser::params).collect()
    }
}

/// `F_M = Concat(M^{j,k}_R over fused pairs)`, shape `N x (pairs * C_B)`.
pub fn fuse_all(tape: &mut Tape, store: &ParamStore, net: &FusionNetwork, latents: &[Var], seq_len: usize) -> Result<Var> {
    if latents.len() != net.num_modalities {
        return Err(Error::Arity { context: "fuse_all latents".into(), required: net.num_modalities, actual: latents.len() });
    }
    let parts = net
        .pairs
        .iter()
        .map(|p| fuse_pair(tape, store, p, latents[p.query], latents[p.key], seq_len, net.reduction))
        .collect::<Result<Vec<_>>>()?;
    let fm = tape.concat_cols(&parts);
    if !tape.value(fm).iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite multimodal representation".into()));
    }
    Ok(fm)
}

/// `y_hat = MLP(F_M)`.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub task: Task,
    pub num_classes: usize,
    pub mlp: Mlp,
}

impl PredictionHead {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        task: Task,
        num_classes: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let out = match task {
            Task::Regression => 1,
            Task::Classification if num_classes >= 2 => num_classes,
            Task::Classification => return Err(Error::Config(format!("classification needs >= 2 classes, got {num_classes}"))),
        };
        let mlp = Mlp::new(store, "head", &[input_dim, hidden, out], Activation::Relu, ParamGroup::Other, rng);
        Ok(Self { task, num_classes, mlp })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Prediction {
    /// `N x 1` scores.
    Regression(Var),
    /// Raw logits and their row-softmax, both `N x V`.
    Classification { logits: Var, probs: Var },
}

impl Prediction {
    /// Scores for regression, probabilities for classification.
    pub fn output(&self) -> Var {
        match *self {
            Prediction::Regression(v) => v,
            Prediction::Classification { probs, .. } => probs,
        }
    }
}

pub fn predict(tape: &mut Tape, store: &ParamStore, head: &PredictionHead, fm: Var) -> Result<Prediction> {
    let (_, cols) = tape.shape(fm);
    if cols != head.mlp.in_dim() {
        return Err(Error::dim("prediction head input", head.mlp.in_dim(), cols));
    }
    let out = head.mlp.forward(tape, store, fm);
    Ok(match head.task {
        Task::Regression => Prediction::Regression(out),
        Task::Classification => {
            let probs = tape.softmax(out);
            Prediction::Classification { logits: out, probs }
        }
    })
}

/// Batch-mean absolute error, or batch-mean cross-entropy against one-hot labels.
pub fn task_loss(tape: &mut Tape, pred: &Prediction, labels: &Labels) -> Result<Var> {
    let rows = tape.shape(pred.output()).0;
    if labels.len() != rows {
        return Err(Error::dim("task loss labels", rows, labels.len()));
    }
    match (pred, labels) {
        (Prediction::Regression(v), Labels::Regression(_)) => {
            let y = tape.constant(labels.regression_column()?);
            Ok(mean_abs_error(tape, *v, y))
        }
        (Prediction::Classification { logits, .. }, Labels::Classification { .. }) => {
            let oh = labels.one_hot()?;
            if oh.ncols() != tape.shape(*logits).1 {
                return Err(Error::dim("task loss classes", tape.shape(*logits).1, oh.ncols()));
            }
            let oh = tape.constant(oh);
            Ok(cross_entropy_logits(tape, *logits, oh))
        }
        (Prediction::Regression(_), _) => Err(Error::TaskMismatch("regression prediction with class labels".into())),
        (Prediction::Classification { .. }, _) => Err(Error::TaskMismatch("class prediction with regression labels".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bottleneck::standard_normal;
    use crate::gradcheck;
    use crate::rng;
    use crate::tape::Matrix;
    use ndarray::{array, s, Array2, Axis};
    use proptest::prelude::*;

    fn cfg(heads: usize, layers: usize) -> FusionConfig {
        FusionConfig { num_heads: heads, num_layers: layers, ff_hidden: 3, head_hidden: 4, ..Default::default() }
    }

    fn set_eye(store: &mut ParamStore, l: &Linear) {
        store.set(l.weight, Array2::eye(l.in_dim));
    }

    fn ln_rows(x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.mapv_inplace(|v| (v - mean) / (var + 1e-5).sqrt());
        }
        out
    }

    fn softmax_row(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    /// Plain evaluation of one literal block for a single sample with `H = 1`.
    fn manual_block(store: &ParamStore, b: &AttentionBlock, q_in: &Matrix, kv: &Matrix) -> Matrix {
        let q = q_in.dot(store.value(b.wq.weight));
        let k = kv.dot(store.value(b.wk.weight));
        let v = kv.dot(store.value(b.wv.weight));
        let scores = q.dot(&k.t()) / (b.dim as f64).sqrt();
        let mut p = Array2::zeros(scores.dim());
        for (i, row) in scores.rows().into_iter().enumerate() {
            for (j, x) in softmax_row(&row.to_vec()).into_iter().enumerate() {
                p[[i, j]] = x;
            }
        }
        let y = p.dot(&v).dot(store.value(b.wo.weight));
        let z = &y + &ln_rows(q_in);
        let nz = ln_rows(&z);
        let l0 = &b.ff.layers[0];
        let l1 = &b.ff.layers[1];
        let h = (nz.dot(store.value(l0.weight)) + store.value(l0.bias.unwrap())).mapv(|x| x.max(0.0));
        let f = h.dot(store.value(l1.weight)) + store.value(l1.bias.unwrap());
        f + nz
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(pair_order(2, false), vec![(0, 1)]);
        assert_eq!(pair_order(3, false), vec![(0, 1), (1, 2), (0, 2)]);
        assert_eq!(pair_order(3, true).len(), 6);
        for u in 2..7 {
            assert_eq!(pair_order(u, false).len(), u * (u - 1) / 2);
        }
    }

    #[test]
    fn head_divisibility_is_checked() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init", 0);
        let err = FusionNetwork::new(&mut store, 2, 6, &cfg(4, 1), &mut r);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn single_key_attention_returns_value_token() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init", 0);
        let b = AttentionBlock::new(&mut store, "b", 2, &cfg(1, 1), &mut r).unwrap();
        for l in [&b.wq, &b.wk, &b.wv, &b.wo] {
            set_eye(&mut store, l);
        }
        let mut tape = Tape::new();
        let q = tape.constant(array![[0.3, -2.0]]);
        let kv = tape.constant(array![[1.5, 0.25]]);
        let y = multihead(&mut tape, &store, &b, q, kv, 1).unwrap();
        assert_eq!(tape.value(y), &array![[1.5, 0.25]]);
        let m = cross_modal_attention(&mut tape, &store, &b, q, kv, 1).unwrap();
        assert_eq!(tape.shape(m), (1, 2));
    }

    #[test]
    fn block_matches_manual_evaluation() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init", 0);
        let b = AttentionBlock::new(&mut store, "b", 2, &cfg(1, 1), &mut r).unwrap();
        store.set(b.wq.weight, array![[0.5, -0.3], [0.2, 0.8]]);
        store.set(b.wk.weight, array![[1.0, 0.4], [-0.6, 0.1]]);
        store.set(b.wv.weight, array![[0.7, 0.0], [0.3, -0.9]]);
        store.set(b.wo.weight, array![[1.1, 0.2], [-0.4, 0.6]]);
        let q_in = array![[0.9, -0.2], [0.1, 0.4]];
        let kv = array![[-0.5, 1.2], [0.8, 0.3]];
        let mut tape = Tape::new();
        let qv = tape.constant(q_in.clone());
        let kvv = tape.constant(kv.clone());
        let m = cross_modal_attention(&mut tape, &store, &b, qv, kvv, 2).unwrap();
        let manual = manual_block(&store, &b, &q_in, &kv);
        assert!((tape.value(m) - &manual).iter().all(|v| v.abs() < 1e-8), "{:?} vs {manual:?}", tape.value(m));
    }

    #[test]
    fn two_layer_pair_matches_composition_and_reduces_last_token() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(4, "init", 0);
        let f = PairFuser::new(&mut store, 0, 1, 2, &cfg(1, 2), &mut r).unwrap();
        let mut dr = rng::stream(4, "x", 0);
        let bj = standard_normal(&mut dr, 3, 2);
        let bk = standard_normal(&mut dr, 3, 2);
        let mut tape = Tape::new();
        let (vj, vk) = (tape.constant(bj.clone()), tape.constant(bk.clone()));
        let out = fuse_pair(&mut tape, &store, &f, vj, vk, 3, Reduction::Last).unwrap();
        let m1 = manual_block(&store, &f.blocks[0], &bj, &bk);
        let m2 = manual_block(&store, &f.blocks[1], &m1, &bk);
        let last = m2.slice(s![2..3, ..]).to_owned();
        assert!((tape.value(out) - &last).iter().all(|v| v.abs() < 1e-8));
        let mean = fuse_pair(&mut tape, &store, &f, vj, vk, 3, Reduction::Mean).unwrap();
        let mm = m2.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        assert!((tape.value(mean) - &mm).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn identical_inputs_are_finite() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(4, "init", 0);
        let f = PairFuser::new(&mut store, 0, 1, 4, &cfg(2, 1), &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(array![[0.5, 0.5, 0.5, 0.5], [1.0, -1.0, 1.0, -1.0]]);
        let out = fuse_pair(&mut tape, &store, &f, x, x, 2, Reduction::Last).unwrap();
        assert!(tape.value(out).iter().all(|v| v.is_finite()));
    }

    fn network(u: usize, dim: usize, heads: usize, symmetric: bool, seed: u64) -> (ParamStore, FusionNetwork) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "init", 0);
        let c = FusionConfig { symmetric, ..cfg(heads, 1) };
        let net = FusionNetwork::new(&mut store, u, dim, &c, &mut r).unwrap();
        (store, net)
    }

    #[test]
    fn fuse_all_dimensions() {
        for u in 2..5 {
            let (store, net) = network(u, 4, 2, false, 1);
            let mut tape = Tape::new();
            let mut dr = rng::stream(1, "x", 0);
            let lats: Vec<Var> = (0..u).map(|_| tape.constant(standard_normal(&mut dr, 6, 4))).collect();
            let fm = fuse_all(&mut tape, &store, &net, &lats, 3).unwrap();
            assert_eq!(tape.shape(fm), (2, u * (u - 1) / 2 * 4));
            assert!(matches!(fuse_all(&mut tape, &store, &net, &lats[1..], 3), Err(Error::Arity { .. })));
        }
    }

    proptest! {
        #[test]
        fn attention_rows_are_distributions(vals in prop::collection::vec(-3.0f64..3.0, 16), seed in 0u64..50) {
            let mut store = ParamStore::new();
            let mut r = rng::stream(seed, "init", 0);
            let b = AttentionBlock::new(&mut store, "b", 4, &cfg(2, 1), &mut r).unwrap();
            let x = Array2::from_shape_vec((4, 4), vals).unwrap();
            let mut tape = Tape::new();
            let q = tape.constant(x.clone());
            let kv = tape.constant(x.mapv(|v| v * 0.5 - 0.1));
            let y = multihead(&mut tape, &store, &b, q, kv, 2).unwrap();
            let attn = (0..y.index())
                .rev()
                .find_map(|i| tape.attention_probs(crate::tape::Var::from_index(i)))
                .unwrap();
            prop_assert_eq!(attn.len(), 2 * 2);
            for p in attn {
                for row in p.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    fn head(store: &mut ParamStore, input: usize, task: Task, v: usize) -> PredictionHead {
        let mut r = rng::stream(2, "head", 0);
        PredictionHead::new(store, input, 4, task, v, &mut r).unwrap()
    }

    #[test]
    fn zero_head_predictions() {
        let mut store = ParamStore::new();
        let hr = head(&mut store, 3, Task::Regression, 0);
        let mut store_c = ParamStore::new();
        let hc = head(&mut store_c, 3, Task::Classification, 4);
        for (st, h) in [(&mut store, &hr), (&mut store_c, &hc)] {
            for id in h.params() {
                let d = st.value(id).dim();
                st.set(id, Array2::zeros(d));
            }
        }
        let mut tape = Tape::new();
        let fm = tape.constant(array![[0.3, 1.0, -2.0], [5.0, 0.0, 1.0]]);
        let pr = predict(&mut tape, &store, &hr, fm).unwrap();
        assert!(tape.value(pr.output()).iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let fm = tape.constant(array![[0.3, 1.0, -2.0], [5.0, 0.0, 1.0]]);
        let pc = predict(&mut tape, &store_c, &hc, fm).unwrap();
        assert!(tape.value(pc.output()).iter().all(|&v| (v - 0.25).abs() < 1e-15), "{:?}", tape.value(pc.output()));
    }

    #[test]
    fn probabilities_normalized() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 3, Task::Classification, 5);
        let mut tape = Tape::new();
        let mut dr = rng::stream(3, "x", 0);
        let fm = tape.constant(standard_normal(&mut dr, 7, 3) * 4.0);
        let p = predict(&mut tape, &store, &h, fm).unwrap();
        for row in tape.value(p.output()).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn task_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(array![[0.0], [2.0]]);
        let l = task_loss(&mut tape, &Prediction::Regression(p), &Labels::Regression(vec![1.0, 1.0])).unwrap();
        assert_eq!(tape.scalar(l), 1.0);
        let l0 = task_loss(&mut tape, &Prediction::Regression(p), &Labels::Regression(vec![0.0, 2.0])).unwrap();
        assert_eq!(tape.scalar(l0), 0.0);
        let logits = tape.constant(array![[800.0, 0.0, 0.0], [0.0, 0.0, 800.0]]);
        let probs = tape.softmax(logits);
        let pred = Prediction::Classification { logits, probs };
        let lc = task_loss(&mut tape, &pred, &Labels::Classification { classes: vec![0, 2], num_classes: 3 }).unwrap();
        assert_eq!(tape.scalar(lc), 0.0);
        assert!(matches!(task_loss(&mut tape, &pred, &Labels::Regression(vec![0.0, 1.0])), Err(Error::TaskMismatch(_))));
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        for task in [Task::Regression, Task::Classification] {
            let (mut store, net) = network(2, 4, 2, false, 6);
            let h = head(&mut store, net.output_dim(), task, 3);
            let mut dr = rng::stream(6, "x", 0);
            let lat_ids: Vec<ParamId> = (0..2)
                .map(|m| store.add(format!("latent{m}"), standard_normal(&mut dr, 4, 4), ParamGroup::Other))
                .collect();
            let labels = match task {
                Task::Regression => Labels::Regression(vec![0.7, -1.2]),
                Task::Classification => Labels::Classification { classes: vec![1, 2], num_classes: 3 },
            };
            let mut ids = lat_ids.clone();
            ids.extend(net.params());
            ids.extend(h.params());
            let report = gradcheck::check_params(&store, &ids, 1e-6, |st| {
                let mut tape = Tape::new();
                let lats: Vec<Var> = lat_ids.iter().map(|&id| tape.param(st, id)).collect();
                let fm = fuse_all(&mut tape, st, &net, &lats, 2).unwrap();
                let p = predict(&mut tape, st, &h, fm).unwrap();
                let l = task_loss(&mut tape, &p, &labels).unwrap();
                (tape, l)
            });
            assert!(report.max_rel_error < 1e-4, "{task}: {report:?}");
        }
    }

    /// Copy every fusion parameter of pair `(j, k)` in `from` to pair
    /// `(pi[j], pi[k])` in `to`.
    fn permute_network(from: &ParamStore, net: &FusionNetwork, to: &mut ParamStore, pi: &[usize]) {
        for p in &net.pairs {
            let src = format!("fusion.p{}_{}.", p.query, p.key);
            let dst = format!("fusion.p{}_{}.", pi[p.query], pi[p.key]);
            for id in p.params() {
                let name = from.name(id).replacen(&src, &dst, 1);
                let target = to.find(&name).unwrap();
                to.set(target, from.value(id).clone());
            }
        }
    }

    #[test]
    fn modality_permutation_preserves_prediction() {
        let u = 3;
        let dim = 2;
        let (store_a, net_a) = network(u, dim, 1, true, 11);
        let (mut store_b, net_b) = network(u, dim, 1, true, 99);
        let pi = [2usize, 0, 1];
        permute_network(&store_a, &net_a, &mut store_b, &pi);
        let mut ha_store = store_a.clone();
        let ha = head(&mut ha_store, net_a.output_dim(), Task::Regression, 0);
        let mut hb_store = store_b.clone();
        let hb = head(&mut hb_store, net_b.output_dim(), Task::Regression, 0);
        for id in ha.params() {
            let v = ha_store.value(id).clone();
            hb_store.set(id, v);
        }
        // Reorder the head's input rows to follow the permuted pair blocks.
        let w_a = ha_store.value(ha.mlp.layers[0].weight).clone();
        let mut w_b = w_a.clone();
        for (slot_a, p) in net_a.pairs.iter().enumerate() {
            let slot_b = net_b.pairs.iter().position(|q| q.query == pi[p.query] && q.key == pi[p.key]).unwrap();
            w_b.slice_mut(s![slot_b * dim..(slot_b + 1) * dim, ..])
                .assign(&w_a.slice(s![slot_a * dim..(slot_a + 1) * dim, ..]));
        }
        hb_store.set(hb.mlp.layers[0].weight, w_b);

        let mut dr = rng::stream(11, "x", 0);
        let xs: Vec<Matrix> = (0..u).map(|_| standard_normal(&mut dr, 6, dim)).collect();
        let mut xb = xs.clone();
        for m in 0..u {
            xb[pi[m]] = xs[m].clone();
        }
        let run = |store: &ParamStore, net: &FusionNetwork, h: &PredictionHead, x: &[Matrix]| {
            let mut tape = Tape::new();
            let lats: Vec<Var> = x.iter().map(|m| tape.constant(m.clone())).collect();
            let fm = fuse_all(&mut tape, store, net, &lats, 3).unwrap();
            let p = predict(&mut tape, store, h, fm).unwrap();
            tape.value(p.output()).clone()
        };
        let pa = run(&ha_store, &net_a, &ha, &xs);
        let pb = run(&hb_store, &net_b, &hb, &xb);
        assert!((&pa - &pb).iter().all(|v| v.abs() < 1e-12), "{pa:?} vs {pb:?}");
    }
}
