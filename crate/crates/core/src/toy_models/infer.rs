//! Inference path: chunked forward passes over a key/value cache.
//!
//! A whole-prompt forward is one chunk; greedy decoding feeds one token per
//! chunk afterwards. Both share `run_chunk`, so captures and interventions
//! behave identically in either mode.

use std::collections::BTreeMap;

use super::kernels::{gelu, gemm, layer_norm, linear, softmax_prefix, Operand};
use super::{InjectionSchedule, InterventionSpec, TransformerModel};
use crate::error::{Error, Result};
use crate::intervention::blend;

/// Per-layer key/value rows for every position processed so far.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl DecodeState {
    pub fn new(model: &TransformerModel) -> Self {
        Self {
            keys: vec![Vec::new(); model.n_layers()],
            values: vec![Vec::new(); model.n_layers()],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

struct ChunkOutput {
    /// Row-major logits for the requested rows.
    logits: Vec<f32>,
    /// Final-row residual state per captured layer.
    captured: BTreeMap<usize, Vec<f64>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum LogitRows {
    All,
    Last,
}

fn run_chunk(
    model: &TransformerModel,
    tokens: &[u32],
    state: &mut DecodeState,
    capture: &[usize],
    edit: Option<(usize, &InterventionSpec)>,
    logit_rows: LogitRows,
) -> Result<ChunkOutput> {
    let cfg = model.config();
    let (d, n) = (cfg.d_model, tokens.len());
    let start = state.len;
    if start + n > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: start + n,
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let lay = model.layout();
    let tok_emb = model.p(&lay.tok_emb);
    let pos_emb = model.p(&lay.pos_emb);
    let mut x = Vec::with_capacity(n * d);
    for (i, &t) in tokens.iter().enumerate() {
        let te = &tok_emb[t as usize * d..(t as usize + 1) * d];
        let pe = &pos_emb[(start + i) * d..(start + i + 1) * d];
        x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
    }

    let (h_count, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f32).sqrt();
    let total = start + n;
    let mut captured = BTreeMap::new();
    let mut scores = vec![0.0f32; n * total];
    let mut attn = vec![0.0f32; n * d];

    for (l, b) in lay.blocks.iter().enumerate() {
        let (h1, _, _) = layer_norm(&x, model.p(&b.ln1_g), model.p(&b.ln1_b), d);
        let qkv = linear(&h1, model.p(&b.w_qkv), model.p(&b.b_qkv), n, d, 3 * d);
        let keys = &mut state.keys[l];
        let values = &mut state.values[l];
        for row in qkv.chunks_exact(3 * d) {
            keys.extend_from_slice(&row[d..2 * d]);
            values.extend_from_slice(&row[2 * d..]);
        }
        for h in 0..h_count {
            let off = h * hd;
            gemm(
                n,
                hd,
                total,
                scale,
                Operand::n(&qkv[off..], 3 * d),
                Operand::t(&keys[off..], d),
                0.0,
                &mut scores,
                total,
            );
            for (i, row) in scores.chunks_exact_mut(total).enumerate() {
                softmax_prefix(row, start + i + 1);
            }
            gemm(
                n,
                total,
                hd,
                1.0,
                Operand::n(&scores, total),
                Operand::n(&values[off..], d),
                0.0,
                &mut attn[off..],
                d,
            );
        }
        let y = linear(&attn, model.p(&b.w_o), model.p(&b.b_o), n, d, d);
        x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        let (h2, _, _) = layer_norm(&x, model.p(&b.ln2_g), model.p(&b.ln2_b), d);
        let mut f = linear(&h2, model.p(&b.w_fc), model.p(&b.b_fc), n, d, cfg.d_ff);
        f.iter_mut().for_each(|v| *v = gelu(*v));
        let z = linear(&f, model.p(&b.w_proj), model.p(&b.b_proj), n, cfg.d_ff, d);
        x.iter_mut().zip(&z).for_each(|(a, b)| *a += b);

        let layer_index = l + 1;
        if let Some((row, spec)) = edit {
            if spec.layer_index == layer_index {
                let slot = &mut x[row * d..(row + 1) * d];
                let current: Vec<f64> = slot.iter().map(|&v| v as f64).collect();
                let blended = blend(&current, &spec.injected_vector, spec.alpha)?;
                slot.iter_mut()
                    .zip(&blended)
                    .for_each(|(s, v)| *s = *v as f32);
            }
        }
        if capture.contains(&layer_index) {
            let last = &x[(n - 1) * d..];
            captured.insert(layer_index, last.iter().map(|&v| v as f64).collect());
        }
    }
    state.len = total;

    let rows = match logit_rows {
        LogitRows::All => &x[..],
        LogitRows::Last => &x[(n - 1) * d..],
    };
    let rows_n = rows.len() / d;
    let (hf, _, _) = layer_norm(rows, model.p(&lay.lnf_g), model.p(&lay.lnf_b), d);
    let v = cfg.vocab_size;
    let mut logits = vec![0.0f32; rows_n * v];
    gemm(
        rows_n,
        d,
        v,
        1.0,
        Operand::n(&hf, d),
        Operand::n(model.p(&lay.w_unembed), v),
        0.0,
        &mut logits,
        v,
    );
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("forward"));
    }
    Ok(ChunkOutput { logits, captured })
}

/// Result of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One logit vector per input position.
    pub logits: Vec<Vec<f32>>,
    /// Final-token residual state for each captured 1-based layer.
    pub captured: BTreeMap<usize, Vec<f64>>,
}

/// Full forward pass over `tokens`.
///
/// `capture_layers` lists 1-based blocks whose output at the final position
/// is returned (widened to `f64`). An intervention edits the final position
/// at the output of its block before the next block runs; a capture at the
/// same block sees the edited state.
pub fn forward(
    model: &TransformerModel,
    tokens: &[u32],
    capture_layers: &[usize],
    intervention: Option<&InterventionSpec>,
) -> Result<ForwardOutput> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    check_layers(model, capture_layers)?;
    if let Some(spec) = intervention {
        spec.validate(model.config())?;
    }
    let mut state = DecodeState::new(model);
    let edit = intervention.map(|s| (tokens.len() - 1, s));
    let out = run_chunk(
        model,
        tokens,
        &mut state,
        capture_layers,
        edit,
        LogitRows::All,
    )?;
    let v = model.config().vocab_size;
    Ok(ForwardOutput {
        logits: out.logits.chunks_exact(v).map(<[f32]>::to_vec).collect(),
        captured: out.captured,
    })
}

fn check_layers(model: &TransformerModel, layers: &[usize]) -> Result<()> {
    match layers.iter().find(|&&l| l == 0 || l > model.n_layers()) {
        Some(bad) => Err(Error::InvalidArgument(format!(
            "layer {bad} outside 1..={}",
            model.n_layers()
        ))),
        None => Ok(()),
    }
}

fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding. Returns the generated tokens, excluding the prompt and
/// the stop token.
///
/// With an intervention, the injected vector is blended into the last prompt
/// position (and, for [`InjectionSchedule::EveryStep`], into each generated
/// position as it is processed), rescaled to that position's residual norm.
pub fn generate_greedy(
    model: &TransformerModel,
    prompt: &[u32],
    max_new_tokens: usize,
    stop_token: Option<u32>,
    intervention: Option<&InterventionSpec>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let max = model.config().max_seq_len;
    if prompt.len() + max_new_tokens > max {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + max_new_tokens,
            max,
        });
    }
    if let Some(spec) = intervention {
        spec.validate(model.config())?;
    }
    let mut generated = Vec::new();
    if max_new_tokens == 0 {
        return Ok(generated);
    }
    let mut state = DecodeState::new(model);
    let edit = intervention.map(|s| (prompt.len() - 1, s));
    let mut out = run_chunk(model, prompt, &mut state, &[], edit, LogitRows::Last)?;
    loop {
        let next = argmax(&out.logits);
        if Some(next) == stop_token {
            break;
        }
        generated.push(next);
        if generated.len() == max_new_tokens {
            break;
        }
        let step_edit = intervention
            .filter(|s| s.schedule == InjectionSchedule::EveryStep)
            .map(|s| (0, s));
        out = run_chunk(model, &[next], &mut state, &[], step_edit, LogitRows::Last)?;
    }
    Ok(generated)
}
