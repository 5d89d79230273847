//! Steering the student with projected teacher states: depth mapping,
//! projection, blending, opportunity sets, the `(l_T, l_S, alpha)` sweep and
//! the R²–Δ correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{ActivationSet, Mapper};
use crate::corpora::{QAItem, Tokenizer};
use crate::error::{dim_err, Error, Result};
use crate::evaluation::{correction_rate, score_item};
use crate::numerics::l2_norm;
use crate::toy_models::{generate_greedy, InjectionSchedule, InterventionSpec, TransformerModel};

/// Relative depths probed for both teacher and student.
pub const DEPTH_GRID: [f64; 4] = [0.25, 0.50, 0.75, 0.90];

/// Intervention strengths swept per layer combination.
pub const ALPHA_GRID: [f64; 8] = [0.25, 0.5, 0.8, 1.0, 2.0, 3.0, 5.0, 10.0];

/// Maps a relative depth in `(0, 1]` to a 1-based block index:
/// `clamp(round(l * n_layers), 1, n_layers)`.
pub fn relative_depth_to_layer(l: f64, n_layers: usize) -> usize {
    let idx = (l * n_layers as f64).round();
    (idx.max(1.0) as usize).min(n_layers)
}

/// `W h + b`.
pub fn project(mapper: &Mapper, h_t: &[f64]) -> Result<Vec<f64>> {
    let mut out = mapper.weights.matvec(h_t)?;
    out.iter_mut().zip(&mapper.bias).for_each(|(o, b)| *o += b);
    Ok(out)
}

const BLEND_NORM_MIN: f64 = 1e-12;

/// `(1 - alpha) h + alpha * (p / |p|) * |h|`.
///
/// The projected vector contributes only its direction; its magnitude is
/// taken from the student state it replaces. `alpha = 0` returns
/// `h_student` unchanged.
pub fn blend(h_student: &[f64], h_projected: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if h_student.len() != h_projected.len() {
        return Err(dim_err(
            "blend",
            format!("{} vs {}", h_student.len(), h_projected.len()),
        ));
    }
    if alpha == 0.0 {
        return Ok(h_student.to_vec());
    }
    let hn = l2_norm(h_student);
    if !(hn > BLEND_NORM_MIN) {
        return Err(Error::ZeroNorm { row: 0 });
    }
    let pn = l2_norm(h_projected);
    if !(pn > BLEND_NORM_MIN) {
        return Err(Error::ZeroNorm { row: 1 });
    }
    let k = alpha * hn / pn;
    Ok(h_student
        .iter()
        .zip(h_projected)
        .map(|(h, p)| (1.0 - alpha) * h + k * p)
        .collect())
}

/// Items the teacher gets right and the student gets wrong, in key order.
pub fn find_opportunity_set(
    teacher_scores: &BTreeMap<String, bool>,
    student_scores: &BTreeMap<String, bool>,
) -> Result<Vec<String>> {
    if teacher_scores.len() != student_scores.len()
        || teacher_scores
            .keys()
            .any(|k| !student_scores.contains_key(k))
    {
        return Err(Error::ItemMismatch(
            "teacher and student score maps cover different items".into(),
        ));
    }
    Ok(teacher_scores
        .iter()
        .filter(|(k, &t)| t && !student_scores[*k])
        .map(|(k, _)| k.clone())
        .collect())
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson_r needs two equal-length series of at least 2 points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance("pearson_r input is constant".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One point of the `(l_T, l_S, alpha)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub l_t: f64,
    pub l_s: f64,
    pub alpha: f64,
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        let on_grid = |l: f64| DEPTH_GRID.contains(&l);
        if !on_grid(self.l_t) || !on_grid(self.l_s) {
            return Err(Error::InvalidArgument(format!(
                "depths ({}, {}) are not on the grid {DEPTH_GRID:?}",
                self.l_t, self.l_s
            )));
        }
        if !ALPHA_GRID.contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} is not on the grid {ALPHA_GRID:?}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Depths and strengths a sweep visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub depths: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            depths: DEPTH_GRID.to_vec(),
            alphas: ALPHA_GRID.to_vec(),
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.alphas.is_empty() {
            return Err(Error::InvalidArgument(
                "sweep grid must be non-empty".into(),
            ));
        }
        if let Some(l) = self.depths.iter().find(|&&l| !(l > 0.0 && l <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "depth {l} is outside (0, 1]"
            )));
        }
        if let Some(a) = self.alphas.iter().find(|&&a| !(a.is_finite() && a >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "alpha {a} must be finite and >= 0"
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.depths.len() * self.depths.len() * self.alphas.len()
    }
}

/// Generation settings shared by every intervention run.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings<'a> {
    pub tokenizer: &'a Tokenizer,
    pub max_new_tokens: usize,
    pub schedule: InjectionSchedule,
}

/// Generates with the student for each item, blending the projected teacher
/// state into block `relative_depth_to_layer(l_S)`. Output order follows
/// `items`; `alpha` is not restricted to the sweep grid here.
pub fn run_intervention(
    student: &TransformerModel,
    mapper: &Mapper,
    teacher_acts: &ActivationSet,
    items: &[QAItem],
    l_s: f64,
    alpha: f64,
    gen: &GenerationSettings<'_>,
) -> Result<Vec<(String, String)>> {
    let layer = relative_depth_to_layer(l_s, student.n_layers());
    if mapper.target_layer != layer {
        return Err(Error::InvalidArgument(format!(
            "mapper targets student layer {}, intervention injects at {layer}",
            mapper.target_layer
        )));
    }
    if mapper.weights.rows() != student.d_model() {
        return Err(dim_err(
            "run_intervention",
            format!(
                "mapper output {} vs student d_model {}",
                mapper.weights.rows(),
                student.d_model()
            ),
        ));
    }
    let index = teacher_acts.index_by_id();
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let row = *index
            .get(item.id.as_str())
            .ok_or_else(|| Error::MissingActivation(item.id.clone()))?;
        let h_t = teacher_acts.matrix.row(row);
        let unit: Vec<f64> = {
            let n = l2_norm(h_t);
            if !(n > BLEND_NORM_MIN) {
                return Err(Error::ZeroNorm { row });
            }
            h_t.iter().map(|v| v / n).collect()
        };
        let projected = project(mapper, &unit)?;
        let spec = InterventionSpec::new(layer, alpha, projected).with_schedule(gen.schedule);
        let prompt = gen.tokenizer.encode(&item.prompt)?;
        let tokens = generate_greedy(
            student,
            &prompt,
            gen.max_new_tokens,
            Some(gen.tokenizer.eos_id()),
            Some(&spec),
        )
        .map_err(|e| match e {
            Error::SequenceTooLong { .. } => Error::PromptTooLong {
                item_id: item.id.clone(),
                source: Box::new(e),
            },
            other => other,
        })?;
        out.push((item.id.clone(), gen.tokenizer.decode_full(&prompt, &tokens)));
    }
    Ok(out)
}

/// One cell of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub config: InterventionConfig,
    pub opportunity_count: usize,
    pub corrected_count: usize,
    /// Percentage of opportunity items flipped to correct; `None` when the
    /// opportunity set is empty.
    pub delta: Option<f64>,
    /// Held-out ridge R² of the mapper used for this cell.
    pub r2_at_layers: f64,
}

/// Mapper for one `(l_T, l_S)` combination plus its held-out R².
#[derive(Debug, Clone)]
pub struct CellMapper {
    pub l_t: f64,
    pub l_s: f64,
    pub mapper: Mapper,
    pub r2: f64,
}

/// Intervened generations of one sweep cell, kept for score dumps.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub config: InterventionConfig,
    pub scores: BTreeMap<String, bool>,
}

/// Evaluates every `(l_T, l_S, alpha)` cell of `grid` on the opportunity
/// set.
///
/// `teacher_acts` maps each teacher depth (by [`depth_key`]) to final-token
/// teacher activations covering the opportunity items. Records come back
/// ordered by `(l_T, l_S, alpha)` following the grid order.
pub fn sweep(
    student: &TransformerModel,
    mappers: &[CellMapper],
    teacher_acts: &BTreeMap<String, ActivationSet>,
    opportunity: &[QAItem],
    baseline: &BTreeMap<String, bool>,
    grid: &SweepGrid,
    gen: &GenerationSettings<'_>,
) -> Result<(Vec<SweepRecord>, Vec<CellOutcome>)> {
    grid.validate()?;
    let ids: Vec<String> = opportunity.iter().map(|i| i.id.clone()).collect();
    let mut records = Vec::with_capacity(grid.cells());
    let mut outcomes = Vec::with_capacity(grid.cells());
    for &l_t in &grid.depths {
        for &l_s in &grid.depths {
            let cell = mappers
                .iter()
                .find(|m| m.l_t == l_t && m.l_s == l_s)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no mapper for depths ({l_t}, {l_s})"))
                })?;
            let acts = teacher_acts.get(&depth_key(l_t)).ok_or_else(|| {
                Error::InvalidArgument(format!("no teacher activations at depth {l_t}"))
            })?;
            for &alpha in &grid.alphas {
                let config = InterventionConfig { l_t, l_s, alpha };
                let generations =
                    run_intervention(student, &cell.mapper, acts, opportunity, l_s, alpha, gen)?;
                let scores: BTreeMap<String, bool> = generations
                    .iter()
                    .zip(opportunity)
                    .map(|((id, text), item)| Ok((id.clone(), score_item(text, item)?.correct)))
                    .collect::<Result<_>>()?;
                let delta = correction_rate(baseline, &scores, &ids).ok();
                let corrected = ids.iter().filter(|id| scores[*id]).count();
                records.push(SweepRecord {
                    config,
                    opportunity_count: ids.len(),
                    corrected_count: corrected,
                    delta,
                    r2_at_layers: cell.r2,
                });
                outcomes.push(CellOutcome { config, scores });
            }
        }
    }
    Ok((records, outcomes))
}

/// Key used for depth-indexed maps, e.g. `"0.75"`.
pub fn depth_key(l: f64) -> String {
    format!("{l:.2}")
}

/// The record with the highest Δ (first one on ties); `None` if no record
/// has a defined Δ.
pub fn peak_record(records: &[SweepRecord]) -> Option<&SweepRecord> {
    let mut best: Option<&SweepRecord> = None;
    for r in records {
        if let Some(d) = r.delta {
            if best.and_then(|b| b.delta).is_none_or(|bd| d > bd) {
                best = Some(r);
            }
        }
    }
    best
}

/// Distinct values of `key` in order of first appearance.
fn distinct<T: PartialEq + Copy>(
    records: &[SweepRecord],
    key: impl Fn(&SweepRecord) -> T,
) -> Vec<T> {
    let mut out = Vec::new();
    for r in records {
        let k = key(r);
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

/// Mean Δ per alpha across all layer combinations with a defined Δ, in the
/// order alphas first appear.
pub fn alpha_profile(records: &[SweepRecord]) -> Vec<(f64, Option<f64>)> {
    distinct(records, |r| r.config.alpha)
        .into_iter()
        .map(|a| {
            let ds: Vec<f64> = records
                .iter()
                .filter(|r| r.config.alpha == a)
                .filter_map(|r| r.delta)
                .collect();
            let mean = (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64);
            (a, mean)
        })
        .collect()
}

/// Pearson r between each layer combination's mapper R² and its peak Δ
/// over alpha. `None` when fewer than two cells have a defined Δ or either
/// series is constant.
pub fn r2_delta_correlation(records: &[SweepRecord]) -> Option<f64> {
    let mut pairs = Vec::new();
    for (l_t, l_s) in distinct(records, |r| (r.config.l_t, r.config.l_s)) {
        let cell: Vec<&SweepRecord> = records
            .iter()
            .filter(|r| r.config.l_t == l_t && r.config.l_s == l_s)
            .collect();
        let peak = cell
            .iter()
            .filter_map(|r| r.delta)
            .fold(None, |acc: Option<f64>, d| {
                Some(acc.map_or(d, |a| a.max(d)))
            });
        if let Some(peak) = peak {
            pairs.push((cell[0].r2_at_layers, peak));
        }
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    pearson_r(&x, &y).ok()
}
