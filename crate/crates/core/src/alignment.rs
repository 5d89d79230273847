//! Affine maps `h_S ≈ W h_T + b` between two models' hidden states.
//!
//! Ridge and lasso fits both leave the bias unpenalized by centering inputs
//! and targets on their training means. Ridge minimizes
//! `||Y - X Wᵀ - 1 bᵀ||² + λ||W||²` (residual unscaled); lasso minimizes
//! `(1 / 2N) ||Y - X Wᵀ - 1 bᵀ||² + λ||W||₁`. These are the conventions under
//! which `λ = 0.1` (ridge) and `λ = 1e-4` (lasso) are the customary values.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpora::{Domain, QAItem, Tokenizer};
use crate::error::{Error, Result};
use crate::io_util::{read_artifact, read_artifact_string, with_suffix, write_atomic};
use crate::numerics::{cholesky_solve, row_l2_normalize, soft_threshold, DenseMatrix, SeededRng};
use crate::toy_models::{forward, TransformerModel};

/// Final-token hidden states of one model at one layer, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub model_id: String,
    pub layer_index: usize,
    pub relative_depth: f64,
    /// `None` when the rows mix domains.
    pub domain: Option<Domain>,
    pub item_ids: Vec<String>,
    pub matrix: DenseMatrix,
    pub normalized: bool,
}

impl ActivationSet {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    /// Copy with every row scaled to unit L2 norm.
    pub fn normalized(&self) -> Result<Self> {
        Ok(Self {
            matrix: row_l2_normalize(&self.matrix)?,
            normalized: true,
            ..self.clone()
        })
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.item_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<Self> {
        let index = self.index_by_id();
        let rows = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::MissingActivation(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            item_ids: ids.to_vec(),
            matrix: self.matrix.select_rows(&rows),
            ..self.clone()
        })
    }

    /// Rows for `items`, in that order.
    pub fn select_items(&self, items: &[QAItem]) -> Result<Self> {
        let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
        self.select(&ids)
    }

    /// Writes `<stem>.actb` (raw `f32` rows) and `<stem>.json` (provenance).
    ///
    /// Binary layout: `b"ACTB"`, version `u32`, rows `u32`, cols `u32`, then
    /// little-endian `f32` values row-major. Values are narrowed to `f32`,
    /// which is lossless for activations read straight off a model.
    pub fn save(&self, stem: &Path, seed: u64) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.matrix.data().len() * 4);
        buf.extend_from_slice(ACT_MAGIC);
        buf.extend_from_slice(&ACT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.matrix.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.matrix.cols() as u32).to_le_bytes());
        for &v in self.matrix.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        write_atomic(&with_suffix(stem, "actb"), &buf)?;
        let meta = ActivationMeta {
            model_id: self.model_id.clone(),
            layer_index: self.layer_index,
            relative_depth: self.relative_depth,
            domain: self.domain,
            item_ids: self.item_ids.clone(),
            seed,
            normalized: self.normalized,
        };
        write_atomic(
            &with_suffix(stem, "json"),
            &serde_json::to_vec_pretty(&meta)?,
        )
    }

    /// Reads a pair written by [`save`](Self::save), returning the set and
    /// the recorded seed.
    pub fn load(stem: &Path) -> Result<(Self, u64)> {
        let bin_path = with_suffix(stem, "actb");
        let bytes = read_artifact(&bin_path)?;
        let fmt = |detail: String| Error::Format {
            path: bin_path.clone(),
            detail,
        };
        if bytes.len() < 16 || &bytes[..4] != ACT_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != ACT_VERSION {
            return Err(fmt(format!("unsupported version {}", word(4))));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        if bytes.len() != 16 + rows * cols * 4 {
            return Err(fmt(format!("{} bytes for {rows}x{cols}", bytes.len())));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let meta: ActivationMeta =
            serde_json::from_str(&read_artifact_string(&with_suffix(stem, "json"))?)?;
        if meta.item_ids.len() != rows {
            return Err(fmt(format!(
                "{} item ids for {rows} rows",
                meta.item_ids.len()
            )));
        }
        Ok((
            Self {
                model_id: meta.model_id,
                layer_index: meta.layer_index,
                relative_depth: meta.relative_depth,
                domain: meta.domain,
                item_ids: meta.item_ids,
                matrix: DenseMatrix::new(rows, cols, data)?,
                normalized: meta.normalized,
            },
            meta.seed,
        ))
    }
}

const ACT_MAGIC: &[u8; 4] = b"ACTB";
const ACT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ActivationMeta {
    model_id: String,
    layer_index: usize,
    relative_depth: f64,
    domain: Option<Domain>,
    item_ids: Vec<String>,
    seed: u64,
    normalized: bool,
}

fn common_domain(items: &[QAItem]) -> Option<Domain> {
    let first = items.first()?.domain;
    items.iter().all(|i| i.domain == first).then_some(first)
}

/// Final-token states of every prompt at each of `layers`, one
/// [`ActivationSet`] per layer (same order). Rows are not normalized.
pub fn extract_activations_multi(
    model: &TransformerModel,
    tokenizer: &Tokenizer,
    items: &[QAItem],
    layers: &[usize],
) -> Result<Vec<ActivationSet>> {
    if items.is_empty() {
        return Err(Error::InsufficientData("no items to extract".into()));
    }
    let d = model.d_model();
    let mut data: Vec<Vec<f64>> = vec![Vec::with_capacity(items.len() * d); layers.len()];
    for item in items {
        let tokens = tokenizer.encode(&item.prompt)?;
        let out = forward(model, &tokens, layers, None).map_err(|e| match e {
            Error::SequenceTooLong { .. } => Error::PromptTooLong {
                item_id: item.id.clone(),
                source: Box::new(e),
            },
            other => other,
        })?;
        for (buf, layer) in data.iter_mut().zip(layers) {
            buf.extend_from_slice(&out.captured[layer]);
        }
    }
    let item_ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
    let domain = common_domain(items);
    layers
        .iter()
        .zip(data)
        .map(|(&layer, buf)| {
            Ok(ActivationSet {
                model_id: model.config().model_id.clone(),
                layer_index: layer,
                relative_depth: layer as f64 / model.n_layers() as f64,
                domain,
                item_ids: item_ids.clone(),
                matrix: DenseMatrix::new(items.len(), d, buf)?,
                normalized: false,
            })
        })
        .collect()
}

pub fn extract_activations(
    model: &TransformerModel,
    tokenizer: &Tokenizer,
    items: &[QAItem],
    layer_index: usize,
) -> Result<ActivationSet> {
    Ok(extract_activations_multi(model, tokenizer, items, &[layer_index])?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    Ridge,
    Lasso,
    PermutationRidge,
}

impl RegKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegKind::Ridge => "ridge",
            RegKind::Lasso => "lasso",
            RegKind::PermutationRidge => "permutation_ridge",
        }
    }

    fn code(self) -> u8 {
        match self {
            RegKind::Ridge => 0,
            RegKind::Lasso => 1,
            RegKind::PermutationRidge => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(RegKind::Ridge),
            1 => Some(RegKind::Lasso),
            2 => Some(RegKind::PermutationRidge),
            _ => None,
        }
    }
}

/// A fitted affine map from teacher space (`d_T`) to student space (`d_S`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mapper {
    /// `d_S x d_T`.
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub reg_kind: RegKind,
    pub lambda: f64,
    pub source_model_id: String,
    pub source_layer: usize,
    pub target_model_id: String,
    pub target_layer: usize,
    pub train_domain: Option<Domain>,
    pub train_item_count: usize,
    /// Fraction of exactly-zero weights (lasso only).
    pub sparsity: Option<f64>,
    /// False when lasso hit `max_iter` before meeting `tol`.
    pub converged: bool,
}

impl Mapper {
    /// A mapper with empty provenance, mostly for tests and demos.
    pub fn from_parts(
        weights: DenseMatrix,
        bias: Vec<f64>,
        reg_kind: RegKind,
        lambda: f64,
    ) -> Self {
        Self {
            weights,
            bias,
            reg_kind,
            lambda,
            source_model_id: String::new(),
            source_layer: 0,
            target_model_id: String::new(),
            target_layer: 0,
            train_domain: None,
            train_item_count: 0,
            sparsity: None,
            converged: true,
        }
    }

    fn with_provenance(mut self, h_t: &ActivationSet, h_s: &ActivationSet) -> Self {
        self.source_model_id = h_t.model_id.clone();
        self.source_layer = h_t.layer_index;
        self.target_model_id = h_s.model_id.clone();
        self.target_layer = h_s.layer_index;
        self.train_domain = h_t.domain;
        self.train_item_count = h_t.len();
        self
    }

    /// `X Wᵀ + 1 bᵀ` for every row of `x`.
    pub fn predict(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.weights.cols() {
            return Err(crate::error::dim_err(
                "Mapper::predict",
                format!(
                    "inputs have {} columns, mapper expects {}",
                    x.cols(),
                    self.weights.cols()
                ),
            ));
        }
        let mut out = DenseMatrix::zeros(x.rows(), self.weights.rows());
        for r in 0..x.rows() {
            let y = self.weights.matvec(x.row(r))?;
            for ((o, v), b) in out.row_mut(r).iter_mut().zip(y).zip(&self.bias) {
                *o = v + b;
            }
        }
        Ok(out)
    }

    /// Writes `<stem>.mapw` and a `<stem>.json` provenance sidecar.
    ///
    /// Binary layout: `b"MAPW"`, version `u32`, `d_S u32`, `d_T u32`,
    /// reg-kind `u8` (0 ridge, 1 lasso, 2 permutation), λ `f64`, weights
    /// row-major then bias, all little-endian `f64`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (ds, dt) = (self.weights.rows(), self.weights.cols());
        let mut buf = Vec::with_capacity(25 + (ds * dt + ds) * 8);
        buf.extend_from_slice(MAP_MAGIC);
        buf.extend_from_slice(&MAP_VERSION.to_le_bytes());
        buf.extend_from_slice(&(ds as u32).to_le_bytes());
        buf.extend_from_slice(&(dt as u32).to_le_bytes());
        buf.push(self.reg_kind.code());
        buf.extend_from_slice(&self.lambda.to_le_bytes());
        for v in self.weights.data().iter().chain(&self.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(&with_suffix(stem, "mapw"), &buf)?;
        let meta = MapperMeta {
            reg_kind: self.reg_kind,
            lambda: self.lambda,
            source_model_id: self.source_model_id.clone(),
            source_layer: self.source_layer,
            target_model_id: self.target_model_id.clone(),
            target_layer: self.target_layer,
            train_domain: self.train_domain,
            train_item_count: self.train_item_count,
            sparsity: self.sparsity,
            converged: self.converged,
        };
        write_atomic(
            &with_suffix(stem, "json"),
            &serde_json::to_vec_pretty(&meta)?,
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin_path = with_suffix(stem, "mapw");
        let bytes = read_artifact(&bin_path)?;
        let fmt = |detail: String| Error::Format {
            path: bin_path.clone(),
            detail,
        };
        let mut r = bytes.as_slice();
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt("truncated".into()))?;
        if &magic != MAP_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut &[u8]| -> Result<u32> {
            r.read_exact(&mut word)
                .map_err(|_| fmt("truncated".into()))?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next_u32(&mut r)?;
        if version != MAP_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let ds = next_u32(&mut r)? as usize;
        let dt = next_u32(&mut r)? as usize;
        if r.len() != 1 + 8 + (ds * dt + ds) * 8 {
            return Err(fmt(format!("{} payload bytes for {ds}x{dt}", r.len())));
        }
        let kind = RegKind::from_code(r[0]).ok_or_else(|| fmt(format!("reg kind {}", r[0])))?;
        let values: Vec<f64> = r[1..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let lambda = values[0];
        let weights = DenseMatrix::new(ds, dt, values[1..1 + ds * dt].to_vec())?;
        let bias = values[1 + ds * dt..].to_vec();
        let meta: MapperMeta =
            serde_json::from_str(&read_artifact_string(&with_suffix(stem, "json"))?)?;
        if meta.reg_kind != kind || meta.lambda.to_bits() != lambda.to_bits() {
            return Err(fmt("sidecar disagrees with binary header".into()));
        }
        Ok(Self {
            weights,
            bias,
            reg_kind: kind,
            lambda,
            source_model_id: meta.source_model_id,
            source_layer: meta.source_layer,
            target_model_id: meta.target_model_id,
            target_layer: meta.target_layer,
            train_domain: meta.train_domain,
            train_item_count: meta.train_item_count,
            sparsity: meta.sparsity,
            converged: meta.converged,
        })
    }
}

const MAP_MAGIC: &[u8; 4] = b"MAPW";
const MAP_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct MapperMeta {
    reg_kind: RegKind,
    lambda: f64,
    source_model_id: String,
    source_layer: usize,
    target_model_id: String,
    target_layer: usize,
    train_domain: Option<Domain>,
    train_item_count: usize,
    sparsity: Option<f64>,
    converged: bool,
}

fn check_pair(h_t: &ActivationSet, h_s: &ActivationSet, lambda: f64) -> Result<()> {
    if h_t.item_ids != h_s.item_ids {
        return Err(Error::ItemMismatch(format!(
            "teacher ({} rows) and student ({} rows) item ids differ",
            h_t.len(),
            h_s.len()
        )));
    }
    if h_t.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 paired rows, got {}",
            h_t.len()
        )));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda {lambda} must be > 0"
        )));
    }
    Ok(())
}

struct Centered {
    x: DenseMatrix,
    y: DenseMatrix,
    x_mean: Vec<f64>,
    y_mean: Vec<f64>,
}

fn center(x: &DenseMatrix, y: &DenseMatrix) -> Centered {
    let x_mean = x.column_means();
    let y_mean = y.column_means();
    Centered {
        x: x.sub_row_vector(&x_mean),
        y: y.sub_row_vector(&y_mean),
        x_mean,
        y_mean,
    }
}

/// `b = ȳ - W x̄`.
fn intercept(weights: &DenseMatrix, x_mean: &[f64], y_mean: &[f64]) -> Result<Vec<f64>> {
    let wx = weights.matvec(x_mean)?;
    Ok(y_mean.iter().zip(wx).map(|(y, w)| y - w).collect())
}

fn ridge_solve(x: &DenseMatrix, y: &DenseMatrix, lambda: f64) -> Result<(DenseMatrix, Vec<f64>)> {
    let c = center(x, y);
    let mut gram = c.x.t_matmul(&c.x)?;
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) + lambda);
    }
    let rhs = c.x.t_matmul(&c.y)?;
    let weights = cholesky_solve(&gram, &rhs)?.transpose();
    let bias = intercept(&weights, &c.x_mean, &c.y_mean)?;
    Ok((weights, bias))
}

/// Closed-form ridge through the centered normal equations
/// `(X̃ᵀX̃ + λI) Wᵀ = X̃ᵀỸ`.
pub fn fit_ridge(h_t: &ActivationSet, h_s: &ActivationSet, lambda: f64) -> Result<Mapper> {
    check_pair(h_t, h_s, lambda)?;
    let (weights, bias) = ridge_solve(&h_t.matrix, &h_s.matrix, lambda)?;
    Ok(Mapper::from_parts(weights, bias, RegKind::Ridge, lambda).with_provenance(h_t, h_s))
}

/// Ridge on targets whose rows were shuffled by `SeededRng(seed)`, which
/// breaks the item pairing while keeping both marginals.
pub fn fit_permutation_control(
    h_t: &ActivationSet,
    h_s: &ActivationSet,
    lambda: f64,
    seed: u64,
) -> Result<Mapper> {
    check_pair(h_t, h_s, lambda)?;
    let perm = SeededRng::new(seed).permutation(h_s.len());
    let shuffled = h_s.matrix.select_rows(&perm);
    let (weights, bias) = ridge_solve(&h_t.matrix, &shuffled, lambda)?;
    Ok(
        Mapper::from_parts(weights, bias, RegKind::PermutationRidge, lambda)
            .with_provenance(h_t, h_s),
    )
}

pub const LASSO_DEFAULT_MAX_ITER: usize = 5000;
pub const LASSO_DEFAULT_TOL: f64 = 1e-4;

/// Outcome of coordinate descent for one output dimension.
#[derive(Debug, Clone)]
pub(crate) struct LassoSolution {
    pub w: Vec<f64>,
    pub converged: bool,
    /// Objective after each full sweep, when tracing.
    #[cfg_attr(not(test), allow(dead_code))]
    pub objectives: Vec<f64>,
}

/// Cyclic coordinate descent on `(1/2N)||y - Xw||² + λ||w||₁` using the
/// scaled Gram matrix `G = XᵀX / N` and `c = Xᵀy / N`. `yy` is `yᵀy / N`,
/// needed only for traced objectives.
pub(crate) fn lasso_coordinate_descent(
    gram: &DenseMatrix,
    c: &[f64],
    yy: f64,
    lambda: f64,
    max_iter: usize,
    tol: f64,
    trace: bool,
) -> LassoSolution {
    let p = c.len();
    let mut w = vec![0.0; p];
    let mut gw = vec![0.0; p];
    let mut objectives = Vec::new();
    let objective = |w: &[f64], gw: &[f64]| {
        let quad: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
        let lin: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        0.5 * yy - lin + 0.5 * quad + lambda * l1
    };
    let mut converged = false;
    for _ in 0..max_iter {
        let mut max_change = 0.0f64;
        for k in 0..p {
            let gkk = gram.get(k, k);
            if gkk <= 0.0 {
                continue;
            }
            let rho = c[k] - gw[k] + gkk * w[k];
            let new = soft_threshold(rho, lambda) / gkk;
            let delta = new - w[k];
            if delta != 0.0 {
                w[k] = new;
                // G is symmetric, so row k doubles as column k.
                for (g, &gk) in gw.iter_mut().zip(gram.row(k)) {
                    *g += delta * gk;
                }
                max_change = max_change.max(delta.abs());
            }
        }
        if trace {
            objectives.push(objective(&w, &gw));
        }
        if max_change < tol {
            converged = true;
            break;
        }
    }
    LassoSolution {
        w,
        converged,
        objectives,
    }
}

/// Per-output-dimension lasso by coordinate descent with soft thresholding.
/// Stops each dimension when no coefficient moves by `tol` or more in a
/// sweep, or after `max_iter` sweeps (then `converged` is false).
pub fn fit_lasso(
    h_t: &ActivationSet,
    h_s: &ActivationSet,
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Mapper> {
    check_pair(h_t, h_s, lambda)?;
    let c = center(&h_t.matrix, &h_s.matrix);
    let n = h_t.len() as f64;
    let scale = 1.0 / n;
    let raw = c.x.t_matmul(&c.x)?;
    let (gr, gc) = (raw.rows(), raw.cols());
    let gram = DenseMatrix::new(
        gr,
        gc,
        raw.into_data().into_iter().map(|v| v * scale).collect(),
    )?;
    let xty = c.x.t_matmul(&c.y)?;
    let (dt, ds) = (h_t.dim(), h_s.dim());
    let mut weights = DenseMatrix::zeros(ds, dt);
    let mut all_converged = true;
    for j in 0..ds {
        let cj: Vec<f64> = (0..dt).map(|k| xty.get(k, j) * scale).collect();
        let sol = lasso_coordinate_descent(&gram, &cj, 0.0, lambda, max_iter, tol, false);
        all_converged &= sol.converged;
        weights.row_mut(j).copy_from_slice(&sol.w);
    }
    let zeros = weights.data().iter().filter(|&&v| v == 0.0).count();
    let sparsity = zeros as f64 / (ds * dt).max(1) as f64;
    let bias = intercept(&weights, &c.x_mean, &c.y_mean)?;
    let mut mapper =
        Mapper::from_parts(weights, bias, RegKind::Lasso, lambda).with_provenance(h_t, h_s);
    mapper.sparsity = Some(sparsity);
    mapper.converged = all_converged;
    Ok(mapper)
}

/// Held-out R² averaged uniformly over output dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R2Report {
    pub r2: f64,
    /// Output dimensions skipped because the test targets were constant.
    pub excluded_dims: usize,
}

/// Per-dimension `1 - SS_res / SS_tot` with `SS_tot` about the test-set
/// column mean, averaged uniformly. Constant target dimensions are skipped.
pub fn r2_score(
    mapper: &Mapper,
    h_t_test: &ActivationSet,
    h_s_test: &ActivationSet,
) -> Result<R2Report> {
    if h_t_test.item_ids != h_s_test.item_ids {
        return Err(Error::ItemMismatch("test item ids differ".into()));
    }
    let pred = mapper.predict(&h_t_test.matrix)?;
    r2_from_predictions(&pred, &h_s_test.matrix)
}

pub fn r2_from_predictions(pred: &DenseMatrix, truth: &DenseMatrix) -> Result<R2Report> {
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
        return Err(crate::error::dim_err(
            "r2",
            format!(
                "predictions {}x{} vs targets {}x{}",
                pred.rows(),
                pred.cols(),
                truth.rows(),
                truth.cols()
            ),
        ));
    }
    let means = truth.column_means();
    let (mut total, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for (j, mean) in means.iter().enumerate() {
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for r in 0..truth.rows() {
            let y = truth.get(r, j);
            ss_res += (y - pred.get(r, j)).powi(2);
            ss_tot += (y - mean).powi(2);
        }
        if ss_tot == 0.0 {
            excluded += 1;
            continue;
        }
        total += 1.0 - ss_res / ss_tot;
        used += 1;
    }
    if used == 0 {
        return Err(Error::ZeroVariance(
            "every target dimension is constant on the test set".into(),
        ));
    }
    Ok(R2Report {
        r2: total / used as f64,
        excluded_dims: excluded,
    })
}
