//! Modality-specific encoders mapping raw tokens to unimodal representations.
//!
//! Each encoder is a per-token affine map and tanh, followed by one token
//! mixing layer: single-head self-attention with a residual connection, an
//! Elman recurrence, or nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMixing {
    #[default]
    Attention,
    Recurrent,
    None,
}

#[derive(Debug, Clone)]
enum Mixer {
    None,
    Attention { query: ParamId, key: ParamId, value: ParamId },
    Recurrent { hidden: ParamId },
}

#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub modality: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub projection: Linear,
    mixer: Mixer,
}

impl ModalityEncoder {
    pub fn new(
        store: &mut ParamStore,
        modality: usize,
        input_dim: usize,
        output_dim: usize,
        mixing: EncoderMixing,
        rng: &mut StreamRng,
    ) -> Self {
        let name = format!("encoder{modality}");
        let g = ParamGroup::Encoder;
        let projection = Linear::new(store, &format!("{name}.proj"), input_dim, output_dim, g, rng);
        let mixer = match mixing {
            EncoderMixing::None => Mixer::None,
            EncoderMixing::Attention => Mixer::Attention {
                query: store.add_xavier(format!("{name}.attn.query"), output_dim, output_dim, g, rng),
                key: store.add_xavier(format!("{name}.attn.key"), output_dim, output_dim, g, rng),
                value: store.add_xavier(format!("{name}.attn.value"), output_dim, output_dim, g, rng),
            },
            EncoderMixing::Recurrent => {
                let hidden = store.add_xavier(format!("{name}.rnn.hidden"), output_dim, output_dim, g, rng);
                store.value_mut(hidden).mapv_inplace(|v| (v * 0.5) as f32 as f64);
                Mixer::Recurrent { hidden }
            }
        };
        Self { modality, input_dim, output_dim, projection, mixer }
    }

    pub fn mixing(&self) -> EncoderMixing {
        match self.mixer {
            Mixer::None => EncoderMixing::None,
            Mixer::Attention { .. } => EncoderMixing::Attention,
            Mixer::Recurrent { .. } => EncoderMixing::Recurrent,
        }
    }

    /// `F_u = E_u(X_u)` for stacked tokens `(N*L) x C_u`, giving `(N*L) x C_rep`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, seq_len: usize) -> Result<Var> {
        let (rows, cols) = tape.shape(tokens);
        if cols != self.input_dim {
            return Err(Error::dim(format!("encoder for modality {}", self.modality), self.input_dim, cols));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::dim(
                format!("encoder for modality {} token rows", self.modality),
                format!("a multiple of seq_len {seq_len}"),
                rows,
            ));
        }
        let h = self.projection.forward(tape, store, tokens);
        let h = tape.tanh(h);
        Ok(match &self.mixer {
            Mixer::None => h,
            Mixer::Attention { query, key, value } => {
                let (wq, wk, wv) = (tape.param(store, *query), tape.param(store, *key), tape.param(store, *value));
                let q = tape.matmul(h, wq);
                let k = tape.matmul(h, wk);
                let v = tape.matmul(h, wv);
                let scale = 1.0 / (self.output_dim as f64).sqrt();
                let a = tape.attention(q, k, v, 1, seq_len, seq_len, scale);
                tape.add(h, a)
            }
            Mixer::Recurrent { hidden } => {
                let w = tape.param(store, *hidden);
                tape.recurrent(h, w, seq_len)
            }
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.projection.params();
        match &self.mixer {
            Mixer::None => {}
            Mixer::Attention { query, key, value } => p.extend([*query, *key, *value]),
            Mixer::Recurrent { hidden } => p.push(*hidden),
        }
        p
    }
}
