//! Cascaded residual autoencoder (CRA) translators between bottleneck spaces.
//!
//! A translator `Gamma_{S->T}` is a stack of residual autoencoder blocks acting
//! on each token independently. Block 1 reads `B_S`; block `i > 1` reads
//! `B_S` plus the running sum of all earlier block outputs; the last block's
//! output is the translation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bottleneck::BottleneckLatent;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslationConfig {
    /// Default number of RA blocks per translator.
    pub num_blocks: usize,
    /// Encoder widths of each RA block; the decoder mirrors them back.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Per-direction overrides keyed `"s->t"`.
    pub pair_blocks: BTreeMap<String, usize>,
    pub combine: Combine,
    /// Treat the reconstruction target `B_T` as a constant.
    pub detach_targets: bool,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            widths: vec![64, 32, 16],
            activation: Activation::Tanh,
            pair_blocks: BTreeMap::new(),
            combine: Combine::Sum,
            detach_targets: false,
        }
    }
}

pub fn pair_key(source: usize, target: usize) -> String {
    format!("{source}->{target}")
}

impl TranslationConfig {
    pub fn blocks_for(&self, source: usize, target: usize) -> usize {
        self.pair_blocks.get(&pair_key(source, target)).copied().unwrap_or(self.num_blocks)
    }

    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::Config("translation.num_blocks must be >= 1".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("translation.widths entries must be >= 1".into()));
        }
        for (key, &n) in &self.pair_blocks {
            let parsed = key
                .split_once("->")
                .and_then(|(s, t)| Some((s.trim().parse::<usize>().ok()?, t.trim().parse::<usize>().ok()?)));
            match parsed {
                Some((s, t)) if s != t && s < num_modalities && t < num_modalities => {}
                _ => return Err(Error::Config(format!("translation.pair_blocks key {key:?} is not a valid \"s->t\" pair"))),
            }
            if n < 1 {
                return Err(Error::Config(format!("translation.pair_blocks[{key}] must be >= 1")));
            }
        }
        Ok(())
    }
}

/// `Gamma_{source->target}`.
#[derive(Debug, Clone)]
pub struct CraTranslator {
    pub source: usize,
    pub target: usize,
    pub latent_dim: usize,
    /// Each block maps `C_B -> widths... -> ...widths -> C_B`.
    pub blocks: Vec<Mlp>,
}

impl CraTranslator {
    pub fn new(
        store: &mut ParamStore,
        source: usize,
        target: usize,
        latent_dim: usize,
        num_blocks: usize,
        widths: &[usize],
        activation: Activation,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::Config(format!("translator {source}->{target} needs at least one block")));
        }
        let mut dims = vec![latent_dim];
        dims.extend_from_slice(widths);
        dims.extend(widths.iter().rev().skip(1));
        dims.push(latent_dim);
        let blocks = (0..num_blocks)
            .map(|i| Mlp::new(store, &format!("cra{source}to{target}.ra{i}"), &dims, activation, ParamGroup::Other, rng))
            .collect();
        Ok(Self { source, target, latent_dim, blocks })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(Mlp::params).collect()
    }
}

/// Apply the cascade to stacked tokens (`rows x C_B`).
pub fn cra_translate(tape: &mut Tape, store: &ParamStore, translator: &CraTranslator, latent: Var) -> Result<Var> {
    let (_, cols) = tape.shape(latent);
    if cols != translator.latent_dim {
        return Err(Error::dim(
            format!("translator {}->{} input", translator.source, translator.target),
            translator.latent_dim,
            cols,
        ));
    }
    let mut running: Option<Var> = None;
    let mut out = latent;
    for block in &translator.blocks {
        let input = match running {
            Some(acc) => tape.add(latent, acc),
            None => latent,
        };
        out = block.forward(tape, store, input);
        running = Some(match running {
            Some(acc) => tape.add(acc, out),
            None => out,
        });
    }
    Ok(out)
}

/// Mean squared error over every element.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim("mse operands", format!("{:?}", tape.shape(a)), format!("{:?}", tape.shape(b))));
    }
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// `||B_T - Gamma_{S->T}(B_S)||^2` as an elementwise mean.
pub fn forward_rec_loss(tape: &mut Tape, translated: Var, target: &BottleneckLatent) -> Result<Var> {
    mse(tape, translated, target.sample)
}

/// Round trip `B_S -> Gamma_{S->T} -> Gamma_{T->S}` compared with `B_S`.
pub fn reverse_cyc_loss(
    tape: &mut Tape,
    store: &ParamStore,
    forward: &CraTranslator,
    reverse: &CraTranslator,
    source: &BottleneckLatent,
) -> Result<Var> {
    if forward.target != reverse.source || forward.source != reverse.target {
        return Err(Error::Config(format!(
            "translator pair mismatch: forward {}->{} with reverse {}->{}",
            forward.source, forward.target, reverse.source, reverse.target
        )));
    }
    if forward.source != source.modality {
        return Err(Error::Config(format!(
            "translator {}->{} applied to latent of modality {}",
            forward.source, forward.target, source.modality
        )));
    }
    let there = cra_translate(tape, store, forward, source.sample)?;
    let back = cra_translate(tape, store, reverse, there)?;
    mse(tape, source.sample, back)
}

/// All `U(U-1)` directed translators, addressed by `(source, target)`.
#[derive(Debug, Clone)]
pub struct TranslatorBank {
    num_modalities: usize,
    translators: Vec<CraTranslator>,
}

impl TranslatorBank {
    pub fn new(store: &mut ParamStore, num_modalities: usize, latent_dim: usize, cfg: &TranslationConfig, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate(num_modalities)?;
        let mut translators = Vec::new();
        for s in 0..num_modalities {
            for t in 0..num_modalities {
                if s != t {
                    translators.push(CraTranslator::new(
                        store,
                        s,
                        t,
                        latent_dim,
                        cfg.blocks_for(s, t),
                        &cfg.widths,
                        cfg.activation,
                        rng,
                    )?);
                }
            }
        }
        Ok(Self { num_modalities, translators })
    }

    pub fn from_translators(num_modalities: usize, translators: Vec<CraTranslator>) -> Result<Self> {
        for s in 0..num_modalities {
            for t in 0..num_modalities {
                if s != t && !translators.iter().any(|tr| tr.source == s && tr.target == t) {
                    return Err(Error::Config(format!("missing translator {s}->{t}")));
                }
            }
        }
        Ok(Self { num_modalities, translators })
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    pub fn get(&self, source: usize, target: usize) -> Result<&CraTranslator> {
        self.translators
            .iter()
            .find(|t| t.source == source && t.target == target)
            .ok_or_else(|| Error::Config(format!("no translator {source}->{target}")))
    }

    pub fn translators(&self) -> &[CraTranslator] {
        &self.translators
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.translators.iter().flat_map(CraTranslator::params).collect()
    }
}

/// Translate every remained source into the missing modality and add the
/// results (or average them under [`Combine::Mean`]).
pub fn combine_translations(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &TranslatorBank,
    remained: &[(usize, Var)],
    missing: usize,
    mode: Combine,
) -> Result<Var> {
    if remained.is_empty() {
        return Err(Error::Arity { context: format!("combine into modality {missing}"), required: 1, actual: 0 });
    }
    if remained.iter().any(|&(j, _)| j == missing) {
        return Err(Error::Config(format!("modality {missing} is both remained and missing")));
    }
    let mut acc: Option<Var> = None;
    for &(j, latent) in remained {
        let out = cra_translate(tape, store, bank.get(j, missing)?, latent)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, out),
            None => out,
        });
    }
    let sum = acc.expect("nonempty");
    Ok(match mode {
        Combine::Sum => sum,
        Combine::Mean => tape.scale(sum, 1.0 / remained.len() as f64),
    })
}

/// Pair-averaged translation losses over all ordered pairs.
#[derive(Debug, Clone, Copy)]
pub struct TranslationLosses {
    pub rec: Var,
    /// `None` when the reverse cycle is disabled.
    pub cyc: Option<Var>,
}

/// Forward reconstruction and reverse cycle losses over all ordered pairs
/// `S != T`, each averaged over the number of pairs.
pub fn translation_loss(
    tape: &mut Tape,
    store: &ParamStore,
    latents: &[BottleneckLatent],
    bank: &TranslatorBank,
    with_cycle: bool,
    detach_targets: bool,
) -> Result<TranslationLosses> {
    let u = bank.num_modalities();
    if latents.len() != u {
        return Err(Error::Arity { context: "translation loss needs the complete view".into(), required: u, actual: latents.len() });
    }
    for (i, l) in latents.iter().enumerate() {
        if l.modality != i {
            return Err(Error::Config(format!("latent at position {i} belongs to modality {}", l.modality)));
        }
    }
    let pairs = (u * (u - 1)) as f64;
    let mut rec: Option<Var> = None;
    let mut cyc: Option<Var> = None;
    let accumulate = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v),
            None => v,
        });
    };
    for s in 0..u {
        for t in 0..u {
            if s == t {
                continue;
            }
            let fwd = bank.get(s, t)?;
            let translated = cra_translate(tape, store, fwd, latents[s].sample)?;
            let r = if detach_targets {
                let target = tape.constant(tape.value(latents[t].sample).clone());
                mse(tape, translated, target)?
            } else {
                forward_rec_loss(tape, translated, &latents[t])?
            };
            accumulate(tape, &mut rec, r);
            if with_cycle {
                let c = reverse_cyc_loss(tape, store, fwd, bank.get(t, s)?, &latents[s])?;
                accumulate(tape, &mut cyc, c);
            }
        }
    }
    let rec = tape.scale(rec.expect("at least one pair"), 1.0 / pairs);
    let cyc = cyc.map(|c| tape.scale(c, 1.0 / pairs));
    Ok(TranslationLosses { rec, cyc })
}
