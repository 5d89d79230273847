//! Minimal pre-norm decoder-only transformer.
//!
//! Each block is `x + attn(ln1(x))` followed by `x + mlp(ln2(x))`, with
//! learned positional embeddings, GELU MLPs and an untied unembedding.
//! "Layer `l` hidden state" always means the residual stream emitted by
//! block `l` (1-based), which is where captures and interventions happen.

mod infer;
pub(crate) mod kernels;
mod train;

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub use infer::{forward, generate_greedy, DecodeState, ForwardOutput};
pub use train::{loss_and_grad, train, TrainHyper, TrainingSequence};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_layers < 2 {
            return bad(format!("n_layers must be >= 2, got {}", self.n_layers));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} is too small", self.vocab_size));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Offsets of one block's tensors inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector. The order
/// fields are allocated in is the order they are stored on disk.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_unembed: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut next = 0;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let d = c.d_model;
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.max_seq_len * d);
        let blocks = (0..c.n_layers)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * c.d_ff),
                b_fc: take(c.d_ff),
                w_proj: take(c.d_ff * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_unembed = take(d * c.vocab_size);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_unembed,
            total: next,
        }
    }

    fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut g = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let l = i + 1;
            for (name, r) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("w_qkv", &b.w_qkv),
                ("b_qkv", &b.b_qkv),
                ("w_o", &b.w_o),
                ("b_o", &b.b_o),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w_fc", &b.w_fc),
                ("b_fc", &b.b_fc),
                ("w_proj", &b.w_proj),
                ("b_proj", &b.b_proj),
            ] {
                g.push((format!("block{l}.{name}"), r.clone()));
            }
        }
        g.push(("lnf_g".to_string(), self.lnf_g.clone()));
        g.push(("lnf_b".to_string(), self.lnf_b.clone()));
        g.push(("w_unembed".to_string(), self.w_unembed.clone()));
        g
    }
}

/// Architecture config plus a flat `f32` parameter vector.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f32>,
}

const INIT_STD: f64 = 0.02;

/// Builds a model with scaled-normal weights drawn from `SeededRng(config.seed)`.
///
/// Matrices get `N(0, 0.02^2)`; the two projections that write into the
/// residual stream are further divided by `sqrt(2 * n_layers)`. Layer-norm
/// gains start at one and every bias at zero.
pub fn init_model(config: ModelConfig) -> Result<TransformerModel> {
    config.validate()?;
    let layout = Layout::new(&config);
    let mut params = vec![0.0f32; layout.total];
    let mut rng = SeededRng::new(config.seed);
    let mut fill = |r: &Range<usize>, std: f64, params: &mut [f32]| {
        for p in &mut params[r.clone()] {
            *p = (rng.normal() * std) as f32;
        }
    };
    let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    fill(&layout.tok_emb, INIT_STD, &mut params);
    fill(&layout.pos_emb, INIT_STD, &mut params);
    for b in &layout.blocks {
        params[b.ln1_g.clone()].fill(1.0);
        params[b.ln2_g.clone()].fill(1.0);
        fill(&b.w_qkv, INIT_STD, &mut params);
        fill(&b.w_o, resid_std, &mut params);
        fill(&b.w_fc, INIT_STD, &mut params);
        fill(&b.w_proj, resid_std, &mut params);
    }
    params[layout.lnf_g.clone()].fill(1.0);
    fill(&layout.w_unembed, INIT_STD, &mut params);
    Ok(TransformerModel {
        config,
        layout,
        params,
    })
}

impl TransformerModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Named parameter tensors as ranges into [`params`](Self::params), in
    /// storage order.
    pub fn param_groups(&self) -> Vec<(String, Range<usize>)> {
        self.layout.groups()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn p(&self, r: &Range<usize>) -> &[f32] {
        &self.params[r.clone()]
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.params.len() * 4);
        self.write_to(&mut buf)?;
        crate::io_util::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io_util::read_artifact(path)?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| match e {
            Error::Format { detail, .. } => Error::Format {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }

    /// Checkpoint layout: `b"TOYM"`, version `u32`, config JSON length `u32`
    /// and bytes, parameter count `u64`, then parameters as little-endian
    /// `f32` in [`param_groups`](Self::param_groups) order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: Default::default(),
            detail,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = read_u32(r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg)?;
        let config: ModelConfig = serde_json::from_slice(&cfg)?;
        config.validate()?;
        let layout = Layout::new(&config);
        let mut count = [0u8; 8];
        r.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        if count != layout.total {
            return Err(fmt(format!(
                "{count} parameters stored, config implies {}",
                layout.total
            )));
        }
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw)?;
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            config,
            layout,
            params,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TOYM";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// When the injected vector is applied during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSchedule {
    /// Only the last prompt token, i.e. the position the teacher state was
    /// read from. Generated tokens see the edit through attention.
    PromptFinal,
    /// The last prompt token and every generated token as it is fed back.
    #[default]
    EveryStep,
}

/// A residual-stream edit at the output of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    /// 1-based block index.
    pub layer_index: usize,
    pub alpha: f64,
    pub injected_vector: Vec<f64>,
    pub schedule: InjectionSchedule,
}

impl InterventionSpec {
    pub fn new(layer_index: usize, alpha: f64, injected_vector: Vec<f64>) -> Self {
        Self {
            layer_index,
            alpha,
            injected_vector,
            schedule: InjectionSchedule::default(),
        }
    }

    pub fn with_schedule(mut self, schedule: InjectionSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidIntervention(m));
        if self.layer_index == 0 || self.layer_index > config.n_layers {
            return bad(format!(
                "layer {} outside 1..={}",
                self.layer_index, config.n_layers
            ));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha {} must be finite and >= 0", self.alpha));
        }
        if self.injected_vector.len() != config.d_model {
            return bad(format!(
                "injected vector has length {}, d_model is {}",
                self.injected_vector.len(),
                config.d_model
            ));
        }
        if self.injected_vector.iter().any(|v| !v.is_finite()) {
            return bad("injected vector is not finite".into());
        }
        Ok(())
    }
}
