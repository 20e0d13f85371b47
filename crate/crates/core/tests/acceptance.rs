//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! A criterion listed in `KNOWN_INFEASIBLE` still runs and still prints FAIL
//! when it fails; it does not turn the process exit code red.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use cyin_core::bottleneck::{gaussian_kl_value, reparameterize, token_ib_loss};
use cyin_core::checkpoint::{decode_checkpoint, encode_checkpoint, model_from_checkpoint};
use cyin_core::data::{decode_dataset, encode_dataset};
use cyin_core::gradcheck::check_params;
use cyin_core::metrics::{acc7, accuracy, binary_f1, mae, pearson_corr, per_class_f1, weighted_f1};
use cyin_core::nn::Mlp;
use cyin_core::params::ParamStore;
use cyin_core::protocols::{compute_mr, fixed_mask, random_mask};
use cyin_core::rng;
use cyin_core::trainer::{fit_translators, total_loss, LossVars};
use cyin_core::translation::{combine_translations, cra_translate, Combine, CraTranslator, TranslatorBank};
use cyin_core::{
    evaluate, read_dataset, save_checkpoint, load_checkpoint, train, train_observed, write_dataset, Ablation,
    BottleneckLatent, CyinModel, Dataset, Error, ExperimentConfig, FormatError, Matrix, MultimodalBatch,
    PresenceMask, Protocol, Sampling, Tape, Task,
};
use ndarray::{array, Array2};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = Result<String, String>;

/// Criteria that cannot pass as written; the analysis lives in the decisions ledger.
const KNOWN_INFEASIBLE: &[(usize, &str)] =
    &[(6, "MR 0.7 exceeds the (U-1)/U = 2/3 bound implied by the at-least-one-present invariant")];

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

// 1. closed-form KL against stratified Monte Carlo.
fn kl_closed_form() -> Outcome {
    let n = 1_000_000usize;
    let normal = Normal::standard();
    let mut pick = rng::stream(1, "kl-pairs", 0);
    let mut worst = 0.0f64;
    for pair in 0..50u64 {
        let mu: f64 = pick.random_range(-2.0..2.0);
        let sigma: f64 = pick.random_range(0.1..3.0);
        let mut r = rng::stream(1, "kl-mc", pair);
        let mut acc = 0.0;
        for i in 0..n {
            let u = (i as f64 + r.random::<f64>()) / n as f64;
            let z = normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
            let b = mu + sigma * z;
            acc += (-0.5 * z * z - sigma.ln()) - (-0.5 * b * b);
        }
        let mc = acc / n as f64;
        let exact = gaussian_kl_value(&array![[mu]], &array![[sigma]]).map_err(e2s)?;
        let err = (mc - exact).abs();
        worst = worst.max(err);
        ensure(err < 0.01, format!("pair {pair} (mu {mu:.3}, sigma {sigma:.3}): mc {mc:.5} vs {exact:.5}"))?;
    }
    Ok(format!("50 pairs, max |mc - closed form| = {worst:.2e}"))
}

// 2. reparameterization moments and the evaluation path.
fn reparameterization() -> Outcome {
    let n = 100_000;
    let mut r = rng::stream(2, "reparam", 0);
    let s = reparameterize(&Array2::from_elem((n, 1), 1.0), &Array2::from_elem((n, 1), 2.0), &mut r);
    let mean = s.sum() / n as f64;
    let var = s.mapv(|v| (v - mean) * (v - mean)).sum() / (n as f64 - 1.0);
    ensure((0.98..=1.02).contains(&mean), format!("mean {mean}"))?;
    ensure((3.9..=4.1).contains(&var), format!("variance {var}"))?;
    let mut tape = Tape::new();
    let mu = tape.constant(array![[0.3, -1.7], [2.0, 0.0]]);
    let sigma = tape.constant(array![[0.5, 1.5], [2.0, 0.1]]);
    let lat = BottleneckLatent::from_parts(&mut tape, mu, sigma, 0, &mut Sampling::Eval);
    ensure(tape.value(lat.sample) == tape.value(mu), "eval sample differs from mu")?;
    let mut cfg = ExperimentConfig::desk();
    cfg.data.num_samples = 4;
    let model = CyinModel::new(&cfg).map_err(e2s)?;
    let data = Dataset::generate(&cfg.data).map_err(e2s)?;
    let batch = MultimodalBatch::from_samples(&data.samples, &[0, 1, 2, 3], cfg.data.task, 0).map_err(e2s)?;
    let mut tape = Tape::new();
    let view = model.encode(&mut tape, &batch, &mut Sampling::Eval).map_err(e2s)?;
    for l in &view.latents {
        ensure(tape.value(l.sample) == tape.value(l.mu), "model eval latent differs from mu")?;
    }
    Ok(format!("mean {mean:.4}, variance {var:.4}, eval returns mu exactly"))
}

fn grad_config(task: Task) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.data.num_modalities = 2;
    c.data.feat_dims = vec![3, 3];
    c.data.seq_len = 2;
    c.data.latent_dim = 2;
    c.data.distractor_dim = 1;
    c.data.num_samples = 2;
    c.data.task = task;
    c.data.num_classes = if task == Task::Classification { 3 } else { 0 };
    c.encoder.rep_dim = 3;
    c.ib.bottleneck_dim = 2;
    c.ib.hidden_dim = 3;
    c.ib.beta = 4.0;
    c.translation.widths = vec![2];
    c.fusion.num_heads = 1;
    c.fusion.ff_hidden = 3;
    c.fusion.head_hidden = 3;
    c
}

fn worst_param(rep: &cyin_core::gradcheck::GradCheckReport) -> &str {
    rep.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|p| p.0.as_str()).unwrap_or("-")
}

// 3. analytic gradients against central differences.
fn gradient_correctness() -> Outcome {
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for task in [Task::Regression, Task::Classification] {
        let cfg = grad_config(task);
        let model = CyinModel::new(&cfg).map_err(e2s)?;
        let data = Dataset::generate(&cfg.data).map_err(e2s)?;
        let batch = MultimodalBatch::from_samples(&data.samples, &[0, 1], task, cfg.data.num_classes).map_err(e2s)?;
        let mask = PresenceMask::from_rows(vec![vec![true, false], vec![false, true]]).map_err(e2s)?;
        let ids: Vec<_> = model.store.ids().collect();
        let run = |store: &ParamStore, pick: &dyn Fn(&LossVars) -> cyin_core::Var| {
            let mut m = model.clone();
            m.store = store.clone();
            let mut tape = Tape::new();
            let mut noise = rng::stream(3, "gradcheck-noise", 0);
            let vars = total_loss(&mut tape, &m, &batch, Some(&mask), 10.0, &mut noise).expect("loss builds");
            let root = pick(&vars);
            (tape, root)
        };
        let mut checks: Vec<(&str, Box<dyn Fn(&LossVars) -> cyin_core::Var>)> = vec![
            ("task", Box::new(|v| v.task)),
            ("label IB", Box::new(|v| v.lib.expect("lib"))),
        ];
        if task == Task::Regression {
            checks.push(("cyclic token IB", Box::new(|v| v.tib.expect("tib"))));
            checks.push(("forward rec", Box::new(|v| v.rec.expect("rec"))));
            checks.push(("reverse cyc", Box::new(|v| v.cyc.expect("cyc"))));
            checks.push(("total", Box::new(|v| v.total)));
        }
        for (name, pick) in &checks {
            let rep = check_params(&model.store, &ids, 1e-4, |s| run(s, pick.as_ref()));
            ensure(rep.analytic_norm > 0.0, format!("{task:?} {name}: zero gradient"))?;
            worst = worst.max(rep.max_rel_error);
            ensure(rep.max_rel_error < 1e-4, format!("{task:?} {name}: relative error {:.2e} (worst {})", rep.max_rel_error, worst_param(&rep)))?;
            lines.push(format!("{name}/{task:?}"));
        }
        if task == Task::Regression {
            let b = model.bottleneck.as_ref().expect("bottleneck");
            let dec = &b.decoders.as_ref().expect("decoders")[0][1];
            let rep = check_params(&model.store, &ids, 1e-4, |s| {
                let mut m = model.clone();
                m.store = s.clone();
                let mut tape = Tape::new();
                let mut noise = rng::stream(3, "gradcheck-noise", 1);
                let view = m.encode(&mut tape, &batch, &mut Sampling::Train(&mut noise)).expect("encode");
                let l = token_ib_loss(&mut tape, &m.store, &view.latents[0], view.reprs[1], dec, m.config.ib.beta)
                    .expect("token IB");
                (tape, l)
            });
            ensure(rep.analytic_norm > 0.0, "token IB: zero gradient")?;
            worst = worst.max(rep.max_rel_error);
            ensure(rep.max_rel_error < 1e-4, format!("token IB 0->1: relative error {:.2e}", rep.max_rel_error))?;
            lines.push("token IB 0->1".into());
        }
    }
    Ok(format!("{} losses, max relative error {worst:.2e}", lines.len()))
}

fn eval_mlp(store: &ParamStore, mlp: &Mlp, x: &Matrix) -> Matrix {
    let mut h = x.clone();
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = h.dot(store.value(layer.weight));
        if let Some(b) = layer.bias {
            h = &h + store.value(b);
        }
        if i + 1 < mlp.layers.len() {
            h = h.mapv(|v| mlp.activation.eval(v));
        }
    }
    h
}

fn translate_value(store: &ParamStore, t: &CraTranslator, x: &Matrix) -> Result<Matrix, String> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = cra_translate(&mut tape, store, t, v).map_err(e2s)?;
    Ok(tape.value(out).clone())
}

// 4. CRA cascade against a hand unrolled evaluation.
fn cra_faithfulness() -> Outcome {
    let mut store = ParamStore::new();
    let mut r = rng::stream(4, "init", 0);
    let act = cyin_core::nn::Activation::Tanh;
    let deep = CraTranslator::new(&mut store, 0, 1, 4, 3, &[3, 2], act, &mut r).map_err(e2s)?;
    let shallow = CraTranslator::new(&mut store, 1, 0, 4, 1, &[3, 2], act, &mut r).map_err(e2s)?;
    let mut fill = rng::stream(4, "weights", 0);
    for id in store.ids().collect::<Vec<_>>() {
        let d = store.value(id).dim();
        store.set(id, Array2::from_shape_fn(d, |_| fill.random_range(-0.6..0.6)));
    }
    let x = Array2::from_shape_fn((5, 4), |_| fill.random_range(-1.5..1.5));
    let b = &deep.blocks;
    let ra1 = eval_mlp(&store, &b[0], &x);
    let ra2 = eval_mlp(&store, &b[1], &(&x + &ra1));
    let ra3 = eval_mlp(&store, &b[2], &(&(&x + &ra1) + &ra2));
    let out = translate_value(&store, &deep, &x)?;
    let err = (&out - &ra3).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(err < 1e-10, format!("depth-3 deviation {err:.2e}"))?;
    let one = translate_value(&store, &shallow, &x)?;
    ensure(one == eval_mlp(&store, &shallow.blocks[0], &x), "depth-1 differs from RA_1")?;
    Ok(format!("depth-3 max deviation {err:.2e}, depth-1 exact"))
}

// 5. multi-source combination with constant-output translators.
fn multi_source_combination() -> Outcome {
    let mut store = ParamStore::new();
    let mut r = rng::stream(5, "init", 0);
    let act = cyin_core::nn::Activation::Tanh;
    let mut ts = Vec::new();
    for s in 0..3 {
        for t in 0..3 {
            if s != t {
                ts.push(CraTranslator::new(&mut store, s, t, 2, 2, &[3], act, &mut r).map_err(e2s)?);
            }
        }
    }
    let bank = TranslatorBank::from_translators(3, ts).map_err(e2s)?;
    let consts = [array![[1.5, -2.0]], array![[0.25, 4.0]]];
    for (j, c) in consts.iter().enumerate() {
        let t = bank.get(j, 2).map_err(e2s)?;
        for id in t.params() {
            let d = store.value(id).dim();
            store.set(id, Array2::zeros(d));
        }
        let last = t.blocks.last().and_then(|b| b.layers.last()).and_then(|l| l.bias).expect("bias");
        store.set(last, c.clone());
    }
    let mut tape = Tape::new();
    let x0 = tape.constant(array![[0.3, 0.1], [0.9, -0.2], [-1.0, 2.0]]);
    let x1 = tape.constant(array![[-0.5, 0.6], [0.0, 0.4], [3.0, 1.0]]);
    let both = combine_translations(&mut tape, &store, &bank, &[(0, x0), (1, x1)], 2, Combine::Sum).map_err(e2s)?;
    for row in tape.value(both).rows() {
        ensure(row.to_vec() == vec![1.75, 2.0], format!("sum row {row}"))?;
    }
    let one = combine_translations(&mut tape, &store, &bank, &[(1, x1)], 2, Combine::Sum).map_err(e2s)?;
    let direct = cra_translate(&mut tape, &store, bank.get(1, 2).map_err(e2s)?, x1).map_err(e2s)?;
    ensure(tape.value(one) == tape.value(direct), "single source differs from its translator")?;
    Ok("sum of constants exact, single source exact".into())
}

// 6. missing-rate protocols.
fn missing_protocols() -> Outcome {
    let (n, u) = (1000, 3);
    for set in [vec![0], vec![1], vec![2], vec![0, 1], vec![0, 2], vec![1, 2], vec![0, 1, 2]] {
        let m = fixed_mask(n, &set, u).map_err(e2s)?;
        let want = 1.0 - set.len() as f64 / u as f64;
        ensure(compute_mr(&m) == want, format!("fixed {set:?}: mr {} vs {want}", compute_mr(&m)))?;
    }
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for k in 1..=7 {
        let target = k as f64 / 10.0;
        match random_mask(n, u, target, 6) {
            Ok(m) => {
                let dev = (compute_mr(&m) - target).abs();
                worst = worst.max(dev);
                if dev > 1.0 / 3000.0 {
                    failures.push(format!("target {target}: mr {}", compute_mr(&m)));
                }
                if m.rows().any(|r| !r.iter().any(|&p| p)) {
                    failures.push(format!("target {target}: empty row"));
                }
            }
            Err(e) => failures.push(format!("target {target}: {e}")),
        }
    }
    if failures.is_empty() {
        Ok(format!("fixed masks exact, random max deviation {worst:.2e}"))
    } else {
        Err(failures.join("; "))
    }
}

/// Equality up to the last bits of a square root.
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-15
}

// 7. metric oracles; everything else compares with `==`.
fn metric_oracles() -> Outcome {
    let y = [-3.0, -1.2, 0.4, 2.6];
    ensure(acc7(&y, &y).map_err(e2s)? == 1.0, "acc7 identity")?;
    ensure(acc7(&[2.4], &[2.0]).map_err(e2s)? == 1.0, "acc7 rounding")?;
    ensure(acc7(&[-3.0, -2.0, 0.0, 3.0], &[-3.0, -3.0, 0.0, 3.0]).map_err(e2s)? == 2.5 / 3.0, "acc7 class-balanced")?;
    ensure(binary_f1(&[-0.1, 2.0, 0.0], &[-2.0, 0.5, 1.0]).map_err(e2s)? == 1.0, "f1 perfect")?;
    ensure(binary_f1(&[0.0, 1.0], &[-1.0, -2.0]).map_err(e2s)? == 0.0, "f1 all wrong")?;
    ensure(binary_f1(&[-1.0, 1.0, 1.0], &[-1.0, -1.0, 1.0]).map_err(e2s)? == 2.0 / 3.0, "f1 weighted")?;
    ensure(mae(&y, &y).map_err(e2s)? == 0.0, "mae identity")?;
    ensure(close(pearson_corr(&y, &y).map_err(e2s)?, 1.0), "corr identity")?;
    let neg: Vec<f64> = y.iter().map(|v| -v).collect();
    ensure(close(pearson_corr(&neg, &y).map_err(e2s)?, -1.0), "corr negation")?;
    ensure(mae(&[0.0, 1.0, 2.0], &[0.0, 2.0, 4.0]).map_err(e2s)? == 1.0, "mae example")?;
    ensure(close(pearson_corr(&[0.0, 1.0, 2.0], &[0.0, 2.0, 4.0]).map_err(e2s)?, 1.0), "corr example")?;
    ensure(accuracy(&[0, 1, 2], &[0, 1, 2]).map_err(e2s)? == 1.0, "acc perfect")?;
    ensure(weighted_f1(&[0, 1, 2], &[0, 1, 2], 3).map_err(e2s)? == 1.0, "wf1 perfect")?;
    ensure(accuracy(&[1], &[1]).map_err(e2s)? == 1.0, "acc single")?;
    ensure(weighted_f1(&[1], &[1], 4).map_err(e2s)? == 1.0, "wf1 single")?;
    ensure(accuracy(&[0, 1, 1, 1], &[0, 0, 1, 2]).map_err(e2s)? == 0.5, "acc example")?;
    let pc = per_class_f1(&[0, 1, 1, 1], &[0, 0, 1, 2], 3).map_err(e2s)?;
    ensure(pc[0].0 == 2.0 / 3.0 && pc[1].0 == 0.5 && pc[2].0 == 0.0, format!("per-class f1 {pc:?}"))?;
    let w = weighted_f1(&[0, 1, 1, 1], &[0, 0, 1, 2], 3).map_err(e2s)?;
    ensure(w == 0.5 * (2.0 / 3.0) + 0.25 * 0.5, format!("wf1 example {w}"))?;
    let mut r = rng::stream(7, "affine", 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(3..40);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
        let l: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let (a, b) = (r.random_range(0.01..50.0), r.random_range(-10.0..10.0));
        let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        let d = (pearson_corr(&q, &l).map_err(e2s)? - pearson_corr(&p, &l).map_err(e2s)?).abs();
        worst = worst.max(d);
    }
    ensure(worst < 1e-9, format!("affine invariance deviation {worst:.2e}"))?;
    Ok(format!(
        "all examples pass; wF1 example is {w:.6} by the support-weighted definition (listed as 0.5, class-1 F1 listed as 2/3); affine max deviation {worst:.1e}"
    ))
}

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.data.num_samples = 240;
    c.train.epochs = 4;
    c.train.stage_split = 0.5;
    c
}

// 8. two-stage contract.
fn two_stage_contract() -> Outcome {
    let cfg = small_config();
    let data = Dataset::generate(&cfg.data).map_err(e2s)?;
    let init = CyinModel::new(&cfg).map_err(e2s)?;
    let tids = init.translator_params();
    let mut frozen = true;
    let stage1 = cfg.train.stage1_epochs();
    let out = train_observed(&cfg, &data.samples, |rec, model| {
        if rec.stage == 1 {
            frozen &= tids.iter().all(|&id| model.store.value(id) == init.store.value(id));
        }
    })
    .map_err(e2s)?;
    ensure(stage1 > 0 && frozen, "translator parameters moved during stage 1")?;
    let moved = tids.iter().any(|&id| out.model.store.value(id) != init.store.value(id));
    ensure(moved, "translators never trained in stage 2")?;
    let mut worst = 0.0f64;
    for s in &out.steps {
        let gamma = if s.stage == 1 { 0.0 } else { cfg.train.gamma };
        let d = (s.losses.recombined(cfg.ib.beta, gamma) - s.losses.total).abs();
        worst = worst.max(d);
        ensure(d <= 1e-9, format!("step {}: recombination off by {d:.2e}", s.step))?;
    }
    Ok(format!(
        "translators bit-identical through {stage1} stage-1 epochs; recombination max error {worst:.1e} over {} steps",
        out.steps.len()
    ))
}

fn ablation_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.data.num_samples = 2000;
    c.data.latent_dim = 4;
    c.data.noise_scale = 0.1;
    c
}

// 9. full CyIN vs no translated latents under random:0.7.
fn directional_ablation() -> Outcome {
    let cfg = ablation_config();
    let data = Dataset::generate(&cfg.data).map_err(e2s)?;
    let (tr, te) = data.split(1.0 - cfg.train.test_fraction);
    let maes = |ablation: Ablation| -> Result<Vec<f64>, String> {
        let mut c = cfg.clone();
        c.train.ablation = ablation;
        let model = train(&c, &tr.samples).map_err(e2s)?.model;
        (0..5)
            .map(|s| {
                evaluate(&model, &te.samples, &Protocol::Random(0.7), s)
                    .map_err(e2s)
                    .map(|r| r.get("mae").expect("mae"))
            })
            .collect()
    };
    let (full, ablated) = std::thread::scope(|sc| {
        let a = sc.spawn(|| maes(Ablation::Full));
        let b = sc.spawn(|| maes(Ablation::NoTranslatedLatents));
        (a.join().expect("full run"), b.join().expect("ablated run"))
    });
    let (full, ablated) = (full?, ablated?);
    let wins = full.iter().zip(&ablated).filter(|(f, a)| f < a).count();
    let msg = format!("full {full:.3?} vs no_translated_latents {ablated:.3?}: {wins}/5 seeds lower");
    ensure(wins >= 4, msg.clone())?;
    Ok(msg)
}

// 10. translators alone on the stage-1 informative space.
fn translation_learnability() -> Outcome {
    let mut cfg = ablation_config();
    cfg.train.stage_split = 1.0;
    let data = Dataset::generate(&cfg.data).map_err(e2s)?;
    let mut model = train(&cfg, &data.samples).map_err(e2s)?.model;
    let before = model.store.clone();
    let h = fit_translators(&mut model, &data.samples, 200).map_err(e2s)?;
    let tids = model.translator_params();
    for id in model.store.ids() {
        if !tids.contains(&id) {
            ensure(model.store.value(id) == before.value(id), "a non-translator parameter moved")?;
        }
    }
    let ratio = h[200] / h[0];
    let msg = format!("forward rec {:.4} -> {:.4} after 200 steps (ratio {ratio:.3}, limit 0.25)", h[0], h[200]);
    ensure(ratio < 0.25, msg.clone())?;
    Ok(msg)
}

fn reports(cfg: &ExperimentConfig) -> Result<(String, String), String> {
    let data = Dataset::generate(&cfg.data).map_err(e2s)?;
    let (tr, te) = data.split(1.0 - cfg.train.test_fraction);
    let out = train(cfg, &tr.samples).map_err(e2s)?;
    let mut text = String::new();
    for p in ["complete", "fixed:0", "fixed:1,2", "random:0.5"] {
        let p: Protocol = p.parse().map_err(e2s)?;
        text.push_str(&evaluate(&out.model, &te.samples, &p, 3).map_err(e2s)?.to_json());
        text.push('\n');
    }
    Ok((text, out.log_jsonl()))
}

// 11. determinism.
fn determinism() -> Outcome {
    let cfg = small_config();
    let (a, log_a) = reports(&cfg)?;
    let (b, log_b) = reports(&cfg)?;
    ensure(a == b, "metric reports differ between runs")?;
    ensure(log_a == log_b, "training logs differ between runs")?;
    Ok(format!("{} bytes of metric reports identical, training logs identical", a.len()))
}

// 12. dataset and checkpoint round trips, corruption errors.
fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_config();
    let data = Dataset::generate(&cfg.data).map_err(e2s)?;
    let path = dir.path().join("synthetic.cyin");
    write_dataset(&cfg.data, &data.samples, &path).map_err(e2s)?;
    let (spec, samples) = read_dataset(&path).map_err(e2s)?;
    ensure(spec == cfg.data, "spec changed on round trip")?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    ensure(encode_dataset(&spec, &samples).map_err(e2s)? == bytes, "re-encoded dataset differs")?;
    for (a, b) in data.samples.iter().zip(&samples) {
        ensure(a.label == b.label && a.sample_id == b.sample_id, "label or id changed")?;
        for (x, y) in a.modalities.iter().zip(&b.modalities) {
            ensure(x.mapv(|v| v as f32 as f64) == *y, "features changed")?;
        }
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    ensure(matches!(decode_dataset(&bad), Err(FormatError::Magic { .. })), "dataset magic")?;
    let mut bad = bytes.clone();
    bad[4] = 0x7f;
    ensure(matches!(decode_dataset(&bad), Err(FormatError::Version { .. })), "dataset version")?;
    ensure(matches!(decode_dataset(&bytes[..bytes.len() - 5]), Err(FormatError::Truncated { .. })), "dataset truncation")?;
    let mut long = bytes.clone();
    long.extend_from_slice(&[0, 0, 0]);
    ensure(matches!(decode_dataset(&long), Err(FormatError::Trailing { .. })), "dataset trailing bytes")?;

    let (tr, te) = data.split(1.0 - cfg.train.test_fraction);
    let model = train(&cfg, &tr.samples).map_err(e2s)?.model;
    let ck = dir.path().join("model.cyck");
    save_checkpoint(&model, &ck).map_err(e2s)?;
    let back = load_checkpoint(&ck).map_err(e2s)?;
    ensure(back.store == model.store && back.config == model.config, "checkpoint contents changed")?;
    for p in [Protocol::Complete, Protocol::Random(0.5)] {
        let a = evaluate(&model, &te.samples, &p, 0).map_err(e2s)?.to_json();
        let b = evaluate(&back, &te.samples, &p, 0).map_err(e2s)?.to_json();
        ensure(a == b, format!("{p:?} metrics differ after reload"))?;
    }
    let cb = encode_checkpoint(&model);
    let fmt = |r: Result<CyinModel, Error>| match r {
        Err(Error::Format(f)) => Some(f),
        _ => None,
    };
    let load = |b: &[u8]| decode_checkpoint(b).and_then(model_from_checkpoint);
    let mut bad = cb.clone();
    bad[1] = b'Z';
    ensure(matches!(fmt(load(&bad)), Some(FormatError::Magic { .. })), "checkpoint magic")?;
    let mut bad = cb.clone();
    bad[4] = 0x33;
    ensure(matches!(fmt(load(&bad)), Some(FormatError::Version { .. })), "checkpoint version")?;
    ensure(matches!(fmt(load(&cb[..cb.len() - 64])), Some(FormatError::Truncated { .. })), "checkpoint truncation")?;
    let mut long = cb.clone();
    long.push(1);
    ensure(matches!(fmt(load(&long)), Some(FormatError::Trailing { .. })), "checkpoint trailing bytes")?;
    let mut bad = cb.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x10;
    ensure(matches!(fmt(load(&bad)), Some(FormatError::Field { ref field, .. }) if field == "checksum"), "checkpoint checksum")?;
    Ok(format!("dataset ({} bytes) and checkpoint ({} bytes) lossless; magic/version/truncation/trailing/checksum errors", bytes.len(), cb.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("KL closed form vs Monte Carlo", kl_closed_form),
        ("reparameterization moments and eval mean", reparameterization),
        ("analytic vs finite-difference gradients", gradient_correctness),
        ("CRA cascade faithfulness", cra_faithfulness),
        ("multi-source combination", multi_source_combination),
        ("missing protocols", missing_protocols),
        ("metric oracles", metric_oracles),
        ("two-stage contract", two_stage_contract),
        ("directional ablation, translated latents", directional_ablation),
        ("translation learnability", translation_learnability),
        ("determinism", determinism),
        ("round trips and corruption", round_trips),
    ];
    let filter: Option<usize> = std::env::var("CYIN_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut blocking = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if filter.is_some_and(|f| f != id) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                let known = KNOWN_INFEASIBLE.iter().find(|(k, _)| *k == id);
                match known {
                    Some((_, why)) => println!("criterion {id:>2} FAIL  {name} ({secs:.1}s): {detail} [known infeasible: {why}]"),
                    None => {
                        blocking += 1;
                        println!("criterion {id:>2} FAIL  {name} ({secs:.1}s): {detail}");
                    }
                }
            }
        }
    }
    if blocking > 0 {
        eprintln!("{blocking} acceptance criteria failed");
        std::process::exit(1);
    }
}
