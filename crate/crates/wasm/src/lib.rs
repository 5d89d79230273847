//! Browser bindings for three small steerbridge operations: residual
//! blending, ridge/lasso/permutation mapper fits on synthetic data, and
//! answer scoring. Errors come back as empty vectors or `"error: ..."`
//! strings so every export also runs natively in tests.

use steerbridge::alignment::{
    fit_lasso, fit_permutation_control, fit_ridge, r2_score, ActivationSet,
};
use steerbridge::corpora::{render_prompt, Domain, QAItem};
use steerbridge::evaluation::{extract_numeric_gold, number_tokens, score_item, score_numeric};
use steerbridge::intervention;
use steerbridge::numerics::{row_l2_normalize, DenseMatrix, SeededRng};
use wasm_bindgen::prelude::*;

/// `(1 - alpha) h + alpha |h| p / |p|`; empty on mismatched or zero-norm
/// input.
#[wasm_bindgen]
pub fn blend(h_student: Vec<f64>, h_projected: Vec<f64>, alpha: f64) -> Vec<f64> {
    intervention::blend(&h_student, &h_projected, alpha).unwrap_or_default()
}

/// Intervention strengths swept by the pipeline.
#[wasm_bindgen]
pub fn alpha_grid() -> Vec<f64> {
    intervention::ALPHA_GRID.to_vec()
}

const TEST_ROWS: usize = 200;

fn activation_set(name: &str, m: DenseMatrix) -> ActivationSet {
    ActivationSet {
        model_id: name.into(),
        layer_index: 1,
        relative_depth: 0.75,
        domain: None,
        item_ids: (0..m.rows()).map(|i| format!("row-{i}")).collect(),
        matrix: m,
        normalized: true,
    }
}

fn synthetic_pair(
    seed: u32,
    n: usize,
    d_t: usize,
    d_s: usize,
    sparse: bool,
) -> steerbridge::Result<[ActivationSet; 2]> {
    let mut rng = SeededRng::new(seed as u64);
    let mut w = DenseMatrix::zeros(d_s, d_t);
    for j in 0..d_s {
        if sparse {
            let k = rng.below(d_t);
            w.set(j, k, 1.0 + rng.uniform());
        } else {
            for k in 0..d_t {
                w.set(j, k, rng.normal() / (d_t as f64).sqrt());
            }
        }
    }
    let x = DenseMatrix::new(n, d_t, (0..n * d_t).map(|_| rng.normal()).collect())?;
    let x = row_l2_normalize(&x)?;
    let mut y = x.matmul(&w.transpose())?;
    for r in 0..n {
        for v in y.row_mut(r) {
            *v += 0.01 * rng.normal();
        }
    }
    Ok([activation_set("teacher", x), activation_set("student", y)])
}

fn compare(
    seed: u32,
    n_train: usize,
    d_t: usize,
    d_s: usize,
    sparse: bool,
) -> steerbridge::Result<Vec<f64>> {
    let [x, y] = synthetic_pair(seed, n_train + TEST_ROWS, d_t, d_s, sparse)?;
    let train: Vec<String> = x.item_ids[..n_train].to_vec();
    let test: Vec<String> = x.item_ids[n_train..].to_vec();
    let (xt, yt) = (x.select(&train)?, y.select(&train)?);
    let (xe, ye) = (x.select(&test)?, y.select(&test)?);
    let ridge = fit_ridge(&xt, &yt, 0.1)?;
    let lasso = fit_lasso(&xt, &yt, 1e-4, 5000, 1e-4)?;
    let perm = fit_permutation_control(&xt, &yt, 0.1, seed as u64)?;
    Ok(vec![
        r2_score(&ridge, &xe, &ye)?.r2,
        r2_score(&lasso, &xe, &ye)?.r2,
        r2_score(&perm, &xe, &ye)?.r2,
        lasso.sparsity.unwrap_or(0.0),
    ])
}

/// Fits ridge (λ = 0.1), lasso (λ = 1e-4) and the permutation control on
/// `n_train` synthetic pairs generated by a sparse or dense linear map, and
/// scores them on 200 fresh pairs. Returns
/// `[r2_ridge, r2_lasso, r2_permutation, lasso_sparsity]`, or an empty
/// vector on bad arguments.
#[wasm_bindgen]
pub fn compare_mappers(
    seed: u32,
    n_train: usize,
    d_t: usize,
    d_s: usize,
    sparse: bool,
) -> Vec<f64> {
    if n_train < 2 || d_t == 0 || d_s == 0 || n_train > 5000 || d_t * d_s > 65_536 {
        return Vec::new();
    }
    compare(seed, n_train, d_t, d_s, sparse).unwrap_or_default()
}

/// Scores `generated` the way the pipeline does. For `"verbal"` the
/// references are one per line; for `"math"` the reference is a gold
/// solution ending in `#### <number>` or a bare number.
#[wasm_bindgen]
pub fn score_answer(generated: &str, domain: &str, reference: &str) -> String {
    let report = match domain {
        "verbal" => {
            let refs: Vec<String> = reference
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let Some(best) = refs.first().cloned() else {
                return "error: no reference answers".into();
            };
            let item = QAItem {
                id: "demo".into(),
                domain: Domain::Verbal,
                question: String::new(),
                prompt: render_prompt(""),
                best_answer: best,
                correct_answers: refs,
                gold_solution: None,
            };
            match score_item(generated, &item) {
                Ok(r) => r,
                Err(e) => return format!("error: {e}"),
            }
        }
        "math" => {
            let gold = if reference.contains("####") {
                extract_numeric_gold(reference)
            } else {
                number_tokens(reference)
                    .first()
                    .map(|(_, v)| *v)
                    .ok_or_else(|| steerbridge::Error::NumericParse(reference.into()))
            };
            match gold {
                Ok(g) => score_numeric(generated, g, "demo"),
                Err(e) => return format!("error: {e}"),
            }
        }
        other => return format!("error: unknown domain {other:?}"),
    };
    let mut out = String::from(if report.correct {
        "correct"
    } else {
        "incorrect"
    });
    if let Some(m) = report.matched_reference {
        out.push_str(&format!("\nmatched: {m}"));
    }
    out.push_str(&format!(
        "\nanswer segment: {:?}",
        report.extracted_answer_segment
    ));
    if !report.delimiter_found {
        out.push_str("\n(no \"Answer:\" found; scored the whole text)");
    }
    out
}
