//! Shared test fixtures and an independent f64 reference of the model.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rupformer_core::kpi::{Features, N_FEATURES};
use rupformer_core::loss::{total_loss, LossWeights};
use rupformer_core::model::{param_count, Hyperparams, ModelInput, Mode, RupFormer};
use rupformer_core::tape::Tape;
use rupformer_core::time::CalendarIndex;

pub const WEIGHTS: LossWeights = LossWeights { alpha: 0.9, beta: 1.2 };

pub fn tiny() -> Hyperparams {
    Hyperparams {
        d_emb: 4,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        d_ff: 8,
        input_len: 2,
        output_len: 2,
        ..Hyperparams::default()
    }
}

pub fn random_meta(rng: &mut ChaCha8Rng) -> CalendarIndex {
    CalendarIndex {
        month: rng.random_range(0..12),
        weekday: rng.random_range(0..7),
        hour: rng.random_range(0..24),
        minute_slot: rng.random_range(0..4),
        carrier: rng.random_range(0..21),
    }
}

pub fn random_features(rng: &mut ChaCha8Rng) -> Features {
    let mut f = [0.0; N_FEATURES];
    f.iter_mut().for_each(|v| *v = rng.random::<f32>());
    f
}

pub fn random_input(hp: &Hyperparams, batch: usize, rng: &mut ChaCha8Rng) -> ModelInput {
    let (n, m) = (hp.input_len, hp.output_len);
    ModelInput {
        batch,
        encoder_features: (0..batch * n).map(|_| random_features(rng)).collect(),
        encoder_meta: (0..batch * n).map(|_| random_meta(rng)).collect(),
        decoder_features: (0..batch * m).map(|_| random_features(rng)).collect(),
        decoder_meta: (0..batch * m).map(|_| random_meta(rng)).collect(),
    }
}

// ---------------------------------------------------------------------------
// f64 reference implementation, written from the layer definitions.

pub type Mat = Vec<Vec<f64>>;
pub type Params = HashMap<String, Vec<f64>>;

pub fn params_f64(model: &RupFormer) -> Params {
    model
        .params()
        .iter()
        .map(|(_, name, t)| (name.to_owned(), t.data().iter().map(|&v| f64::from(v)).collect()))
        .collect()
}

pub fn linear(p: &Params, name: &str, x: &Mat) -> Mat {
    let w = &p[&format!("{name}.weight")];
    let b = &p[&format!("{name}.bias")];
    let out_dim = b.len();
    let in_dim = w.len() / out_dim;
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), in_dim);
            (0..out_dim).map(|o| b[o] + (0..in_dim).map(|i| row[i] * w[i * out_dim + o]).sum::<f64>()).collect()
        })
        .collect()
}

pub fn layer_norm(p: &Params, name: &str, x: &Mat) -> Mat {
    let g = &p[&format!("{name}.gain")];
    let b = &p[&format!("{name}.bias")];
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn attention(p: &Params, name: &str, query: &Mat, memory: &Mat, batch: usize, lq: usize, lk: usize, heads: usize, causal: bool) -> Mat {
    let q = linear(p, &format!("{name}.q"), query);
    let k = linear(p, &format!("{name}.k"), memory);
    let v = linear(p, &format!("{name}.v"), memory);
    let d = q[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; batch * lq];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..lq {
                let visible = if causal { i + 1 } else { lk };
                let scores: Vec<f64> = (0..visible)
                    .map(|j| {
                        (0..dh).map(|c| q[b * lq + i][h * dh + c] * k[b * lk + j][h * dh + c]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for c in 0..dh {
                        ctx[b * lq + i][h * dh + c] += e / z * v[b * lk + j][h * dh + c];
                    }
                }
            }
        }
    }
    linear(p, &format!("{name}.o"), &ctx)
}

pub fn feed_forward(p: &Params, name: &str, x: &Mat) -> Mat {
    let h: Mat = linear(p, &format!("{name}.up"), x)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    linear(p, &format!("{name}.down"), &h)
}

pub fn embed(p: &Params, features: &[Features], meta: &[CalendarIndex], seq: usize, pos: &str, d: usize) -> Mat {
    let x: Mat = features.iter().map(|f| f.iter().map(|&v| f64::from(v)).collect()).collect();
    let mut out = linear(p, "embed.proj", &x);
    for (t, row) in out.iter_mut().enumerate() {
        let m = meta[t];
        for (table, idx) in [
            (pos, t % seq),
            ("embed.month", m.month),
            ("embed.weekday", m.weekday),
            ("embed.hour", m.hour),
            ("embed.minute", m.minute_slot),
            ("embed.carrier", m.carrier),
        ] {
            let tab = &p[table];
            for c in 0..d {
                row[c] += tab[idx * d + c];
            }
        }
    }
    out
}

pub fn reference_head(p: &Params, hp: &Hyperparams, input: &ModelInput) -> Mat {
    let (n, m, b, d) = (hp.input_len, hp.output_len, input.batch, hp.d_emb);
    let mut z = embed(p, &input.encoder_features, &input.encoder_meta, n, "embed.enc_pos", d);
    for l in 0..hp.encoder_layers {
        let a = attention(p, &format!("encoder.{l}.self_attn"), &z, &z, b, n, n, hp.heads, false);
        z = layer_norm(p, &format!("encoder.{l}.norm1"), &add(&z, &a));
        let f = feed_forward(p, &format!("encoder.{l}.ff"), &z);
        z = layer_norm(p, &format!("encoder.{l}.norm2"), &add(&z, &f));
    }
    let mut y = embed(p, &input.decoder_features, &input.decoder_meta, m, "embed.dec_pos", d);
    for l in 0..hp.decoder_layers {
        let s = attention(p, &format!("decoder.{l}.self_attn"), &y, &y, b, m, m, hp.heads, true);
        y = layer_norm(p, &format!("decoder.{l}.norm1"), &add(&y, &s));
        let c = attention(p, &format!("decoder.{l}.cross_attn"), &y, &z, b, m, n, hp.heads, false);
        y = layer_norm(p, &format!("decoder.{l}.norm2"), &add(&y, &c));
        let f = feed_forward(p, &format!("decoder.{l}.ff"), &y);
        y = layer_norm(p, &format!("decoder.{l}.norm3"), &add(&y, &f));
    }
    linear(p, "head", &y)
}

pub fn reference_loss(head: &Mat, targets: &[Features], quantiles: &[f32]) -> f64 {
    let n_det = N_FEATURES - 1;
    let rows = targets.len() as f64;
    let mut sq = 0.0;
    for (h, t) in head.iter().zip(targets) {
        for c in 0..n_det {
            sq += (h[c] - f64::from(t[c])).powi(2);
        }
    }
    let mut pin = 0.0;
    for (i, &q) in quantiles.iter().enumerate() {
        let q = f64::from(q);
        for (h, t) in head.iter().zip(targets) {
            let e = f64::from(t[n_det]) - h[n_det + i];
            pin += if e > 0.0 { q * e } else { (q - 1.0) * e } / rows;
        }
    }
    f64::from(WEIGHTS.alpha) * sq / (rows * n_det as f64) + f64::from(WEIGHTS.beta) * pin
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Worst relative error between tape gradients of the total loss and central
/// differences of the f64 reference, over every scalar parameter.
pub struct GradientCheck {
    pub checked: usize,
    pub worst: f64,
    pub at: String,
}

pub fn gradient_check(hp: &Hyperparams, seed: u64) -> GradientCheck {
    let model = RupFormer::new(hp.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let input = random_input(hp, 2, &mut rng);
    let targets: Vec<Features> = (0..2 * hp.output_len).map(|_| random_features(&mut rng)).collect();

    let mut tape = Tape::new();
    let head = model.forward(&mut tape, &input, &mut Mode::Eval).unwrap();
    let loss = total_loss(&mut tape, head, &targets, &hp.quantiles, WEIGHTS).unwrap();
    let analytic_loss = f64::from(tape.value(loss)[0]);
    let grads = tape.backward(loss).unwrap();

    let base = params_f64(&model);
    let oracle = |p: &Params| reference_loss(&reference_head(p, hp, &input), &targets, &hp.quantiles);
    assert!((oracle(&base) - analytic_loss).abs() < 1e-5);

    let h = 1e-3;
    let mut out = GradientCheck { checked: 0, worst: 0.0, at: String::new() };
    for (id, name, t) in model.params().iter() {
        let analytic = grads.get(id).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut p = base.clone();
            p.get_mut(name).unwrap()[i] += h;
            let up = oracle(&p);
            p.get_mut(name).unwrap()[i] -= 2.0 * h;
            let down = oracle(&p);
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(f64::from(a), numeric);
            if e > out.worst {
                out.worst = e;
                out.at = format!("{name}[{i}]: analytic {} numeric {numeric}", a);
            }
            out.checked += 1;
        }
    }
    assert_eq!(out.checked, param_count(hp));
    out
}
