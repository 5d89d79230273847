//! Double-precision reference forward pass of the toy transformer, written
//! independently of the library's f32 kernels.

#![allow(dead_code)]

use std::collections::HashMap;

use steerbridge::numerics::SeededRng;
use steerbridge::toy_models::{
    init_model, loss_and_grad, ModelConfig, TrainingSequence, TransformerModel,
};

pub struct Reference {
    n_layers: usize,
    d: usize,
    heads: usize,
    ff: usize,
    vocab: usize,
}

/// Matches [`micro_model`].
pub const MICRO: Reference = Reference {
    n_layers: 2,
    d: 16,
    heads: 2,
    ff: 32,
    vocab: 11,
};

pub type Params = HashMap<String, Vec<f64>>;

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * r * g + b)
        .collect()
}

/// `x W + b` with `W` stored `d_in x d_out` row-major.
fn affine(x: &[f64], w: &[f64], b: &[f64], d_out: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for j in 0..d_out {
            y[j] += xi * w[i * d_out + j];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

impl Reference {
    fn seq_loss(&self, p: &Params, tokens: &[u32], target_start: usize) -> (f64, usize) {
        let (d, hd) = (self.d, self.d / self.heads);
        let t_len = tokens.len();
        let mut xs: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                (0..d)
                    .map(|k| p["tok_emb"][tok as usize * d + k] + p["pos_emb"][t * d + k])
                    .collect()
            })
            .collect();
        for l in 1..=self.n_layers {
            let g = |name: &str| &p[&format!("block{l}.{name}")];
            let qkv: Vec<Vec<f64>> = xs
                .iter()
                .map(|x| {
                    affine(
                        &layer_norm(x, g("ln1_g"), g("ln1_b")),
                        g("w_qkv"),
                        g("b_qkv"),
                        3 * d,
                    )
                })
                .collect();
            let mut attn = vec![vec![0.0; d]; t_len];
            for h in 0..self.heads {
                for i in 0..t_len {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..hd)
                                .map(|k| qkv[i][h * hd + k] * qkv[j][d + h * hd + k])
                                .sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        for k in 0..hd {
                            attn[i][h * hd + k] += ej / z * qkv[j][2 * d + h * hd + k];
                        }
                    }
                }
            }
            for (x, a) in xs.iter_mut().zip(&attn) {
                let o = affine(a, g("w_o"), g("b_o"), d);
                x.iter_mut().zip(o).for_each(|(x, o)| *x += o);
                let hidden: Vec<f64> = affine(
                    &layer_norm(x, g("ln2_g"), g("ln2_b")),
                    g("w_fc"),
                    g("b_fc"),
                    self.ff,
                )
                .into_iter()
                .map(gelu)
                .collect();
                let z = affine(&hidden, g("w_proj"), g("b_proj"), d);
                x.iter_mut().zip(z).for_each(|(x, z)| *x += z);
            }
        }
        let mut loss = 0.0;
        let mut count = 0;
        for t in 0..t_len - 1 {
            if t + 1 < target_start {
                continue;
            }
            let h = layer_norm(&xs[t], &p["lnf_g"], &p["lnf_b"]);
            let logits = affine(&h, &p["w_unembed"], &vec![0.0; self.vocab], self.vocab);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - logits[tokens[t + 1] as usize];
            count += 1;
        }
        (loss, count)
    }

    pub fn loss(&self, p: &Params, batch: &[TrainingSequence]) -> f64 {
        let (mut total, mut count) = (0.0, 0);
        for s in batch {
            let (l, c) = self.seq_loss(p, &s.tokens, s.target_start);
            total += l;
            count += c;
        }
        total / count as f64
    }
}

pub fn params_of(model: &TransformerModel) -> Params {
    model
        .param_groups()
        .into_iter()
        .map(|(name, r)| (name, model.params()[r].iter().map(|&v| v as f64).collect()))
        .collect()
}

pub fn micro_model() -> TransformerModel {
    let cfg = ModelConfig {
        model_id: "micro".into(),
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 11,
        max_seq_len: 12,
        seed: 5,
    };
    let mut model = init_model(cfg).unwrap();
    // Move away from the tiny-weight init so every path carries signal.
    let mut rng = SeededRng::new(9);
    for p in model.params_mut() {
        *p += (0.15 * rng.normal()) as f32;
    }
    model
}

pub fn batch() -> Vec<TrainingSequence> {
    vec![
        TrainingSequence {
            tokens: vec![3, 7, 2, 9, 4, 4, 10, 1, 5],
            target_start: 4,
        },
        TrainingSequence {
            tokens: vec![8, 6, 2, 5, 1, 3, 7],
            target_start: 3,
        },
    ]
}

/// Norm-relative error of the analytic gradient per parameter group,
/// against central differences of the reference loss. A group whose true
/// gradient vanishes reports the analytic norm instead.
pub fn group_errors() -> Vec<(String, f64)> {
    let model = micro_model();
    let data = batch();
    let (_, grad) = loss_and_grad(&model, &data).unwrap();
    let base = params_of(&model);
    let eps = 1e-5;
    let mut out = Vec::new();
    for (name, range) in model.param_groups() {
        let (mut diff_sq, mut fd_sq, mut an_sq) = (0.0, 0.0, 0.0);
        let mut p = base.clone();
        for i in 0..range.len() {
            let orig = p[&name][i];
            p.get_mut(&name).unwrap()[i] = orig + eps;
            let up = MICRO.loss(&p, &data);
            p.get_mut(&name).unwrap()[i] = orig - eps;
            let down = MICRO.loss(&p, &data);
            p.get_mut(&name).unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = grad[range.start + i] as f64;
            diff_sq += (fd - an).powi(2);
            fd_sq += fd * fd;
            an_sq += an * an;
        }
        let rel = if fd_sq > 1e-20 {
            (diff_sq / fd_sq).sqrt()
        } else {
            an_sq.sqrt()
        };
        out.push((name, rel));
    }
    out
}
