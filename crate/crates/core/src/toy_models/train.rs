//! Batched forward with an activation tape, the matching backward pass, and
//! an Adam training loop.

use serde::{Deserialize, Serialize};

use super::kernels::{
    add_column_sums, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear,
    softmax_prefix, Operand,
};
use super::TransformerModel;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// One training sequence. Next-token loss is taken for every position whose
/// target index is `>= target_start`, so `target_start = 1` is plain
/// language modelling and `target_start = prompt_len` trains completions only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub tokens: Vec<u32>,
    pub target_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 32,
            steps: 200,
            seed: 42,
        }
    }
}

struct BlockTape {
    x_hat1: Vec<f32>,
    rstd1: Vec<f32>,
    h1: Vec<f32>,
    qkv: Vec<f32>,
    probs: Vec<f32>,
    attn: Vec<f32>,
    x_hat2: Vec<f32>,
    rstd2: Vec<f32>,
    h2: Vec<f32>,
    f_pre: Vec<f32>,
    f_act: Vec<f32>,
}

struct Batch {
    tokens: Vec<u32>,
    /// Target token per row, or `None` when the row carries no loss.
    targets: Vec<Option<u32>>,
    n_seq: usize,
    seq_len: usize,
}

fn assemble(model: &TransformerModel, seqs: &[&TrainingSequence]) -> Result<Batch> {
    let cfg = model.config();
    let seq_len = seqs.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
    if seq_len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: seq_len,
            max: cfg.max_seq_len,
        });
    }
    let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
    let mut targets = Vec::with_capacity(seqs.len() * seq_len);
    for s in seqs {
        if s.tokens.len() < 2 || s.target_start == 0 || s.target_start >= s.tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "training sequence of length {} with target_start {}",
                s.tokens.len(),
                s.target_start
            )));
        }
        if let Some(&bad) = s.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} outside vocabulary"
            )));
        }
        for t in 0..seq_len {
            tokens.push(s.tokens.get(t).copied().unwrap_or(0));
            let target = t + 1;
            targets.push(
                (target >= s.target_start && target < s.tokens.len()).then(|| s.tokens[target]),
            );
        }
    }
    Ok(Batch {
        tokens,
        targets,
        n_seq: seqs.len(),
        seq_len,
    })
}

/// Mean next-token cross-entropy over the batch and its gradient with respect
/// to every parameter, laid out like [`TransformerModel::params`].
pub fn loss_and_grad(
    model: &TransformerModel,
    batch: &[TrainingSequence],
) -> Result<(f32, Vec<f32>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let refs: Vec<&TrainingSequence> = batch.iter().collect();
    let b = assemble(model, &refs)?;
    Ok(loss_and_grad_batch(model, &b))
}

fn loss_and_grad_batch(model: &TransformerModel, batch: &Batch) -> (f32, Vec<f32>) {
    let cfg = model.config();
    let lay = model.layout();
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (h_count, hd) = (cfg.n_heads, cfg.head_dim());
    let (bs, t_len) = (batch.n_seq, batch.seq_len);
    let n = bs * t_len;
    let scale = 1.0 / (hd as f32).sqrt();

    // ---- forward ----
    let tok_emb = model.p(&lay.tok_emb);
    let pos_emb = model.p(&lay.pos_emb);
    let mut x = Vec::with_capacity(n * d);
    for (row, &tok) in batch.tokens.iter().enumerate() {
        let t = row % t_len;
        let te = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let pe = &pos_emb[t * d..(t + 1) * d];
        x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
    }

    let mut tapes = Vec::with_capacity(lay.blocks.len());
    for blk in &lay.blocks {
        let (h1, x_hat1, rstd1) = layer_norm(&x, model.p(&blk.ln1_g), model.p(&blk.ln1_b), d);
        let qkv = linear(&h1, model.p(&blk.w_qkv), model.p(&blk.b_qkv), n, d, 3 * d);
        let mut probs = vec![0.0f32; bs * h_count * t_len * t_len];
        let mut attn = vec![0.0f32; n * d];
        for s in 0..bs {
            let q_base = s * t_len * 3 * d;
            for h in 0..h_count {
                let off = h * hd;
                let p = &mut probs[(s * h_count + h) * t_len * t_len..][..t_len * t_len];
                gemm(
                    t_len,
                    hd,
                    t_len,
                    scale,
                    Operand::n(&qkv[q_base + off..], 3 * d),
                    Operand::t(&qkv[q_base + d + off..], 3 * d),
                    0.0,
                    p,
                    t_len,
                );
                for (i, row) in p.chunks_exact_mut(t_len).enumerate() {
                    softmax_prefix(row, i + 1);
                }
                gemm(
                    t_len,
                    t_len,
                    hd,
                    1.0,
                    Operand::n(p, t_len),
                    Operand::n(&qkv[q_base + 2 * d + off..], 3 * d),
                    0.0,
                    &mut attn[s * t_len * d + off..],
                    d,
                );
            }
        }
        let y = linear(&attn, model.p(&blk.w_o), model.p(&blk.b_o), n, d, d);
        x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        let (h2, x_hat2, rstd2) = layer_norm(&x, model.p(&blk.ln2_g), model.p(&blk.ln2_b), d);
        let f_pre = linear(&h2, model.p(&blk.w_fc), model.p(&blk.b_fc), n, d, f);
        let f_act: Vec<f32> = f_pre.iter().map(|&u| gelu(u)).collect();
        let z = linear(&f_act, model.p(&blk.w_proj), model.p(&blk.b_proj), n, f, d);
        x.iter_mut().zip(&z).for_each(|(a, b)| *a += b);
        tapes.push(BlockTape {
            x_hat1,
            rstd1,
            h1,
            qkv,
            probs,
            attn,
            x_hat2,
            rstd2,
            h2,
            f_pre,
            f_act,
        });
    }
    let (hf, x_hatf, rstdf) = layer_norm(&x, model.p(&lay.lnf_g), model.p(&lay.lnf_b), d);
    let mut logits = vec![0.0f32; n * v];
    gemm(
        n,
        d,
        v,
        1.0,
        Operand::n(&hf, d),
        Operand::n(model.p(&lay.w_unembed), v),
        0.0,
        &mut logits,
        v,
    );

    // ---- loss; logits become dlogits in place ----
    let count = batch.targets.iter().filter(|t| t.is_some()).count().max(1) as f32;
    let mut loss = 0.0f64;
    for (row, target) in logits.chunks_exact_mut(v).zip(&batch.targets) {
        match target {
            Some(tgt) => {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for l in row.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                let tgt = *tgt as usize;
                loss -= ((row[tgt] / sum) as f64).ln();
                for l in row.iter_mut() {
                    *l /= sum * count;
                }
                row[tgt] -= 1.0 / count;
            }
            None => row.fill(0.0),
        }
    }
    let dlogits = logits;
    let loss = (loss / count as f64) as f32;

    // ---- backward ----
    let mut g = vec![0.0f32; lay.total];
    gemm(
        d,
        n,
        v,
        1.0,
        Operand::t(&hf, d),
        Operand::n(&dlogits, v),
        1.0,
        &mut g[lay.w_unembed.clone()],
        v,
    );
    let mut dhf = vec![0.0f32; n * d];
    gemm(
        n,
        v,
        d,
        1.0,
        Operand::n(&dlogits, v),
        Operand::t(model.p(&lay.w_unembed), v),
        0.0,
        &mut dhf,
        d,
    );
    let mut dx = vec![0.0f32; n * d];
    ln_backward_into(
        &mut g,
        &lay.lnf_g,
        &lay.lnf_b,
        &dhf,
        &x_hatf,
        &rstdf,
        model.p(&lay.lnf_g),
        d,
        &mut dx,
    );

    let mut dp = vec![0.0f32; t_len * t_len];
    for (blk, tape) in lay.blocks.iter().zip(&tapes).rev() {
        // MLP
        gemm(
            f,
            n,
            d,
            1.0,
            Operand::t(&tape.f_act, f),
            Operand::n(&dx, d),
            1.0,
            &mut g[blk.w_proj.clone()],
            d,
        );
        add_column_sums(&dx, d, &mut g[blk.b_proj.clone()]);
        let mut df = vec![0.0f32; n * f];
        gemm(
            n,
            d,
            f,
            1.0,
            Operand::n(&dx, d),
            Operand::t(model.p(&blk.w_proj), d),
            0.0,
            &mut df,
            f,
        );
        df.iter_mut()
            .zip(&tape.f_pre)
            .for_each(|(g, &u)| *g *= gelu_grad(u));
        gemm(
            d,
            n,
            f,
            1.0,
            Operand::t(&tape.h2, d),
            Operand::n(&df, f),
            1.0,
            &mut g[blk.w_fc.clone()],
            f,
        );
        add_column_sums(&df, f, &mut g[blk.b_fc.clone()]);
        let mut dh2 = vec![0.0f32; n * d];
        gemm(
            n,
            f,
            d,
            1.0,
            Operand::n(&df, f),
            Operand::t(model.p(&blk.w_fc), f),
            0.0,
            &mut dh2,
            d,
        );
        ln_backward_into(
            &mut g,
            &blk.ln2_g,
            &blk.ln2_b,
            &dh2,
            &tape.x_hat2,
            &tape.rstd2,
            model.p(&blk.ln2_g),
            d,
            &mut dx,
        );

        // attention output projection
        gemm(
            d,
            n,
            d,
            1.0,
            Operand::t(&tape.attn, d),
            Operand::n(&dx, d),
            1.0,
            &mut g[blk.w_o.clone()],
            d,
        );
        add_column_sums(&dx, d, &mut g[blk.b_o.clone()]);
        let mut dattn = vec![0.0f32; n * d];
        gemm(
            n,
            d,
            d,
            1.0,
            Operand::n(&dx, d),
            Operand::t(model.p(&blk.w_o), d),
            0.0,
            &mut dattn,
            d,
        );

        // attention core
        let mut dqkv = vec![0.0f32; n * 3 * d];
        for s in 0..bs {
            let base = s * t_len * 3 * d;
            for h in 0..h_count {
                let off = h * hd;
                let p = &tape.probs[(s * h_count + h) * t_len * t_len..][..t_len * t_len];
                let d_out = &dattn[s * t_len * d + off..];
                gemm(
                    t_len,
                    hd,
                    t_len,
                    1.0,
                    Operand::n(d_out, d),
                    Operand::t(&tape.qkv[base + 2 * d + off..], 3 * d),
                    0.0,
                    &mut dp,
                    t_len,
                );
                gemm(
                    t_len,
                    t_len,
                    hd,
                    1.0,
                    Operand::t(p, t_len),
                    Operand::n(d_out, d),
                    0.0,
                    &mut dqkv[base + 2 * d + off..],
                    3 * d,
                );
                // dS = P * (dP - rowsum(P * dP)), folded with the score scale.
                for (prow, dprow) in p.chunks_exact(t_len).zip(dp.chunks_exact_mut(t_len)) {
                    let dot: f32 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                    for (ds, &pv) in dprow.iter_mut().zip(prow) {
                        *ds = pv * (*ds - dot) * scale;
                    }
                }
                let ds = &dp;
                gemm(
                    t_len,
                    t_len,
                    hd,
                    1.0,
                    Operand::n(ds, t_len),
                    Operand::n(&tape.qkv[base + d + off..], 3 * d),
                    0.0,
                    &mut dqkv[base + off..],
                    3 * d,
                );
                gemm(
                    t_len,
                    t_len,
                    hd,
                    1.0,
                    Operand::t(ds, t_len),
                    Operand::n(&tape.qkv[base + off..], 3 * d),
                    0.0,
                    &mut dqkv[base + d + off..],
                    3 * d,
                );
            }
        }
        gemm(
            d,
            n,
            3 * d,
            1.0,
            Operand::t(&tape.h1, d),
            Operand::n(&dqkv, 3 * d),
            1.0,
            &mut g[blk.w_qkv.clone()],
            3 * d,
        );
        add_column_sums(&dqkv, 3 * d, &mut g[blk.b_qkv.clone()]);
        let mut dh1 = vec![0.0f32; n * d];
        gemm(
            n,
            3 * d,
            d,
            1.0,
            Operand::n(&dqkv, 3 * d),
            Operand::t(model.p(&blk.w_qkv), 3 * d),
            0.0,
            &mut dh1,
            d,
        );
        ln_backward_into(
            &mut g,
            &blk.ln1_g,
            &blk.ln1_b,
            &dh1,
            &tape.x_hat1,
            &tape.rstd1,
            model.p(&blk.ln1_g),
            d,
            &mut dx,
        );
    }

    for (row, &tok) in batch.tokens.iter().enumerate() {
        let t = row % t_len;
        let grad_row = &dx[row * d..(row + 1) * d];
        let te = &mut g[lay.tok_emb.start + tok as usize * d..][..d];
        te.iter_mut().zip(grad_row).for_each(|(a, b)| *a += b);
        let pe = &mut g[lay.pos_emb.start + t * d..][..d];
        pe.iter_mut().zip(grad_row).for_each(|(a, b)| *a += b);
    }
    (loss, g)
}

#[allow(clippy::too_many_arguments)]
fn ln_backward_into(
    g: &mut [f32],
    gamma_range: &std::ops::Range<usize>,
    beta_range: &std::ops::Range<usize>,
    dy: &[f32],
    x_hat: &[f32],
    rstd: &[f32],
    gamma: &[f32],
    d: usize,
    dx: &mut [f32],
) {
    let mut d_gamma = vec![0.0f32; d];
    let mut d_beta = vec![0.0f32; d];
    layer_norm_backward(dy, x_hat, rstd, gamma, d, &mut d_gamma, &mut d_beta, dx);
    g[gamma_range.clone()]
        .iter_mut()
        .zip(&d_gamma)
        .for_each(|(a, b)| *a += b);
    g[beta_range.clone()]
        .iter_mut()
        .zip(&d_beta)
        .for_each(|(a, b)| *a += b);
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.98;
const ADAM_EPS: f32 = 1e-8;
const CLIP_NORM: f32 = 1.0;

/// Linear warmup over the first tenth of training (at most 100 steps), then
/// cosine decay to a tenth of the peak rate.
fn lr_at(step: usize, hyper: &TrainHyper) -> f32 {
    let warmup = (hyper.steps / 10).clamp(1, 100);
    if step < warmup {
        return hyper.lr * (step + 1) as f32 / warmup as f32;
    }
    let span = (hyper.steps - warmup).max(1) as f32;
    let progress = (step - warmup) as f32 / span;
    let cosine = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
    hyper.lr * (0.1 + 0.9 * cosine)
}

/// Trains with Adam on shuffled mini-batches, returning the loss of every
/// step. Batches are drawn epoch by epoch from a permutation seeded by
/// `hyper.seed`, so the whole run is deterministic.
pub fn train(
    model: &mut TransformerModel,
    corpus: &[TrainingSequence],
    hyper: &TrainHyper,
) -> Result<Vec<f32>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = SeededRng::new(hyper.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let total = model.params().len();
    let (mut m1, mut m2) = (vec![0.0f32; total], vec![0.0f32; total]);
    let mut history = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let mut picked = Vec::with_capacity(hyper.batch_size);
        while picked.len() < hyper.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                order = rng.permutation(corpus.len());
                cursor = 0;
            }
            picked.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let batch = assemble(model, &picked)?;
        let (loss, mut grad) = loss_and_grad_batch(model, &batch);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        history.push(loss);

        let norm = grad.iter().map(|g| g * g).sum::<f32>().sqrt();
        if norm > CLIP_NORM {
            let s = CLIP_NORM / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let lr = lr_at(step, hyper);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let params = model.params_mut();
        for i in 0..total {
            let gi = grad[i];
            m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * gi;
            m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = m1[i] / bc1;
            let vh = m2[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        if !model.all_finite() {
            return Err(Error::Diverged { step, loss });
        }
    }
    Ok(history)
}
