//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; the process exits nonzero if
//! any criterion fails.
//!
//! Criteria 2, 5, 6, 7, 9 and 11 share one run of the default pipeline
//! (roughly 10-15 minutes on one CPU core).

mod support;

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;
use steerbridge::alignment::{
    extract_activations, fit_lasso, fit_ridge, r2_score, ActivationSet, Mapper, RegKind,
};
use steerbridge::corpora::{read_jsonl, Domain, QAItem};
use steerbridge::evaluation::{extract_numeric_gold, score_numeric, score_verbal};
use steerbridge::experiments::{
    corpus_gen, dissociate, extract, fit_mappers, read_csv, report, run_all, run_sweep, train_pair,
    ControlRow, RunConfig, RunLayout, Splits, SweepRow,
};
use steerbridge::intervention::{
    blend, relative_depth_to_layer, run_intervention, GenerationSettings, ALPHA_GRID,
};
use steerbridge::numerics::{l2_norm, row_l2_normalize, DenseMatrix, SeededRng};
use steerbridge::toy_models::{generate_greedy, InjectionSchedule, TransformerModel};
use tempfile::TempDir;
use walkdir::WalkDir;

type Outcome = Result<(bool, String), Box<dyn StdError>>;
type Peaks = Vec<(Domain, usize, f64)>;

fn main() {
    let mut failed = Vec::new();
    let mut check = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".into()),
        };
        println!(
            "criterion {n:>2} {} {name} [{:.1}s]: {detail}",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        if !ok {
            failed.push(n);
        }
    };

    check(1, "ridge oracle equivalence", &mut ridge_oracle);
    check(3, "lasso structure", &mut lasso_structure);
    check(4, "blend identities", &mut blend_identities);
    check(8, "gradient check", &mut gradient_check);
    check(10, "metric fixtures", &mut metric_fixtures);

    println!("running the default pipeline once for the remaining criteria...");
    let run = match FullRun::execute() {
        Ok(run) => Some(run),
        Err(e) => {
            println!("default pipeline failed: {e}");
            None
        }
    };
    let with_run = |f: fn(&FullRun) -> Outcome| {
        let run = run.as_ref();
        move || match run {
            Some(r) => f(r),
            None => Err("default pipeline did not complete".into()),
        }
    };
    check(
        2,
        "mapping-condition ordering",
        &mut with_run(controls_ordering),
    );
    check(5, "self-pairing fixed point", &mut with_run(self_pairing));
    check(
        6,
        "correction existence",
        &mut with_run(correction_existence),
    );
    check(
        7,
        "dissociation ordering",
        &mut with_run(dissociation_ordering),
    );
    check(9, "determinism", &mut with_run(determinism));
    check(11, "grid cardinalities", &mut with_run(grid_cardinalities));

    if failed.is_empty() {
        println!("all 11 criteria passed");
    } else {
        failed.sort_unstable();
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn acts(name: &str, m: DenseMatrix) -> ActivationSet {
    ActivationSet {
        model_id: name.into(),
        layer_index: 1,
        relative_depth: 0.75,
        domain: None,
        item_ids: (0..m.rows()).map(|i| format!("r{i}")).collect(),
        matrix: m,
        normalized: false,
    }
}

fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn split_rows(a: &ActivationSet, n_train: usize) -> (ActivationSet, ActivationSet) {
    let ids = &a.item_ids;
    (
        a.select(&ids[..n_train]).unwrap(),
        a.select(&ids[n_train..]).unwrap(),
    )
}

/// Solves `a x = b` for square `a` by Gaussian elimination with partial
/// pivoting. `b` has several right-hand sides.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let p = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, p);
        b.swap(col, p);
        let (pivot_a, pivot_b) = (a[col].clone(), b[col].clone());
        for r in col + 1..n {
            let f = a[r][col] / pivot_a[col];
            a[r].iter_mut()
                .zip(&pivot_a)
                .skip(col)
                .for_each(|(v, p)| *v -= f * p);
            b[r].iter_mut().zip(&pivot_b).for_each(|(v, p)| *v -= f * p);
        }
    }
    let mut x = vec![vec![0.0; b[0].len()]; n];
    for r in (0..n).rev() {
        for c in 0..b[0].len() {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k][c]).sum();
            x[r][c] = (b[r][c] - s) / a[r][r];
        }
    }
    x
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / l2_norm(b).max(1e-300)
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    if !root.exists() {
        return BTreeMap::new();
    }
    WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_path_buf();
            (rel, fs::read(e.path()).unwrap())
        })
        .collect()
}

fn copy_tree(from: &Path, to: &Path, skip: &[&str]) {
    for (rel, bytes) in files_under(from) {
        if skip.iter().any(|s| rel.starts_with(s)) {
            continue;
        }
        let dst = to.join(&rel);
        fs::create_dir_all(dst.parent().unwrap()).unwrap();
        fs::write(dst, bytes).unwrap();
    }
}

/// Paths present in both trees whose bytes differ, plus paths in only one.
fn tree_diff(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    out.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
    out
}

// ------------------------------------------------------- fast criteria

fn ridge_oracle() -> Outcome {
    let (n, d_t, d_s, lambda) = (50, 8, 6, 0.1);
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for problem in 0..20 {
        let mut rng = SeededRng::new(1000 + problem);
        let x = gaussian(&mut rng, n, d_t);
        let w_true = gaussian(&mut rng, d_s, d_t);
        let mut y = x.matmul(&w_true.transpose())?;
        for r in 0..n {
            for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                *v += 0.5 * rng.normal() + c as f64;
            }
        }
        let mapper = fit_ridge(&acts("t", x.clone()), &acts("s", y.clone()), lambda)?;

        // Augmented normal equations with an unpenalized intercept column.
        let aug = |r: usize, c: usize| if c < d_t { x.get(r, c) } else { 1.0 };
        let lhs: Vec<Vec<f64>> = (0..=d_t)
            .map(|i| {
                (0..=d_t)
                    .map(|j| {
                        let g: f64 = (0..n).map(|r| aug(r, i) * aug(r, j)).sum();
                        g + if i == j && i < d_t { lambda } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let rhs: Vec<Vec<f64>> = (0..=d_t)
            .map(|i| {
                (0..d_s)
                    .map(|j| (0..n).map(|r| aug(r, i) * y.get(r, j)).sum())
                    .collect()
            })
            .collect();
        let sol = gauss_solve(lhs, rhs);
        let w_oracle: Vec<f64> = (0..d_s)
            .flat_map(|j| (0..d_t).map(move |k| (j, k)))
            .map(|(j, k)| sol[k][j])
            .collect();
        let b_oracle: Vec<f64> = (0..d_s).map(|j| sol[d_t][j]).collect();
        worst = worst
            .max(rel_err(mapper.weights.data(), &w_oracle))
            .max(rel_err(&mapper.bias, &b_oracle));
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-6 && secs < 10.0,
        format!(
            "max relative error {worst:.2e} (tol 1e-6) over 20 problems in {secs:.2}s (limit 10s)"
        ),
    ))
}

fn lasso_structure() -> Outcome {
    // 1-sparse ground truth: each student coordinate copies one teacher
    // coordinate with a gain in [1, 2).
    let (d_t, d_s, n) = (20, 5, 200);
    let mut rng = SeededRng::new(7);
    let mut w = DenseMatrix::zeros(d_s, d_t);
    for j in 0..d_s {
        w.set(j, rng.below(d_t), 1.0 + rng.uniform());
    }
    let x = gaussian(&mut rng, n, d_t);
    let y = x.matmul(&w.transpose())?;
    let sparse = fit_lasso(&acts("t", x), &acts("s", y), 1e-4, 5000, 1e-4)?;
    let support_ok = (0..d_s)
        .all(|j| (0..d_t).all(|k| (sparse.weights.get(j, k) != 0.0) == (w.get(j, k) != 0.0)));

    // Dense ground truth: a random rotation of unit-norm inputs, fitted on
    // fewer pairs than dimensions so the penalty shape decides the answer.
    let (d, n_train, n_test) = (32, 24, 200);
    let mut dense_ok = true;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let mut rng = SeededRng::new(100 + seed);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = l2_norm(&v);
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
        let rot = DenseMatrix::from_rows(&basis)?;
        let x = row_l2_normalize(&gaussian(&mut rng, n_train + n_test, d))?;
        let y = x.matmul(&rot.transpose())?;
        let (xt, xe) = split_rows(&acts("t", x), n_train);
        let (yt, ye) = split_rows(&acts("s", y), n_train);
        let r_ridge = r2_score(&fit_ridge(&xt, &yt, 0.1)?, &xe, &ye)?.r2;
        let r_lasso = r2_score(&fit_lasso(&xt, &yt, 1e-4, 5000, 1e-4)?, &xe, &ye)?.r2;
        dense_ok &= r_lasso < r_ridge;
        detail.push(format!("{r_ridge:.3}/{r_lasso:.3}"));
    }
    Ok((
        support_ok && dense_ok,
        format!(
            "1-sparse support recovered: {support_ok}; dense rotation ridge/lasso R² per seed: {}",
            detail.join(", ")
        ),
    ))
}

fn blend_identities() -> Outcome {
    let s = 0.5;
    let unit: [Vec<f64>; 4] = [
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, -1.0, 0.0, 0.0],
        vec![s, s, s, s],
        vec![s, -s, s, -s],
    ];
    let mut exact = true;
    let mut worst_norm: f64 = 0.0;
    for h in &unit {
        for p in &unit {
            exact &= blend(h, p, 0.0)? == *h;
            let expected: Vec<f64> = h.iter().zip(p).map(|(h, p)| 2.0 * p - h).collect();
            exact &= blend(h, p, 2.0)? == expected;
        }
    }
    let mut rng = SeededRng::new(3);
    for _ in 0..200 {
        let h: Vec<f64> = (0..48).map(|_| 3.0 * rng.normal()).collect();
        let p: Vec<f64> = (0..48).map(|_| rng.normal()).collect();
        let out = blend(&h, &p, 1.0)?;
        worst_norm = worst_norm.max((l2_norm(&out) - l2_norm(&h)).abs() / l2_norm(&h));
    }
    Ok((
        exact && worst_norm <= 1e-9,
        format!("alpha=0 and alpha=2 exact on unit fixtures: {exact}; worst alpha=1 relative norm drift {worst_norm:.1e} (tol 1e-9)"),
    ))
}

fn gradient_check() -> Outcome {
    let errors = support::reference::group_errors();
    let (name, worst) = errors
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .ok_or("no parameter groups")?;
    Ok((
        errors.iter().all(|(_, e)| *e < 1e-3),
        format!(
            "{} groups, worst {name} at {worst:.2e} (tol 1e-3)",
            errors.len()
        ),
    ))
}

fn verbal_item(best: &str, correct: &[&str]) -> QAItem {
    QAItem {
        id: "fixture".into(),
        domain: Domain::Verbal,
        question: "What is the capital of Belmora?".into(),
        prompt: "Question: What is the capital of Belmora? Answer:".into(),
        best_answer: best.into(),
        correct_answers: correct.iter().map(|s| s.to_string()).collect(),
        gold_solution: None,
    }
}

fn metric_fixtures() -> Outcome {
    let zorvane = verbal_item("Zorvane", &["Zorvane", "the city of Zorvane"]);
    let cold = verbal_item("cold", &["cold", "it is cold"]);
    let cases: Vec<(&str, bool)> = vec![
        (
            "verbal substring",
            score_verbal("Question: x Answer: the capital is Zorvane", &zorvane).correct,
        ),
        (
            "verbal case variant",
            score_verbal("Answer: zorVANE", &zorvane).correct,
        ),
        (
            "verbal unrelated",
            !score_verbal("Answer: a large river", &zorvane).correct,
        ),
        (
            "verbal paraphrase is conservative",
            !score_verbal("Answer: it is chilly", &cold).correct,
        ),
        (
            "gold #### 82",
            extract_numeric_gold("steps... #### 82")? == 82.0,
        ),
        (
            "gold #### $1,234",
            extract_numeric_gold("#### $1,234")? == 1234.0,
        ),
        (
            "gold without marker errors",
            extract_numeric_gold("no marker").is_err(),
        ),
        (
            "numeric 82 apples",
            score_numeric("Answer: 82 apples", 82.0, "f").correct,
        ),
        (
            "numeric $1,234",
            score_numeric("Answer: $1,234", 1234.0, "f").correct,
        ),
        (
            "numeric 83 vs 82",
            !score_numeric("Answer: 83", 82.0, "f").correct,
        ),
        (
            "numeric paraphrase is conservative",
            !score_numeric("Answer: eighty-two", 82.0, "f").correct,
        ),
    ];
    let failing: Vec<&str> = cases
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    Ok((
        failing.is_empty(),
        if failing.is_empty() {
            format!("{} fixtures exact", cases.len())
        } else {
            format!("failing: {}", failing.join(", "))
        },
    ))
}

// --------------------------------------------------- pipeline criteria

struct FullRun {
    _dir: TempDir,
    root: PathBuf,
    cfg: RunConfig,
    stage_secs: Vec<(&'static str, f64)>,
}

impl FullRun {
    fn execute() -> Result<Self, Box<dyn StdError>> {
        let dir = tempfile::tempdir()?;
        let root = dir.path().join("default");
        let cfg = RunConfig::default();
        type Stage = fn(&RunConfig, &Path) -> steerbridge::Result<()>;
        let stages: [(&'static str, Stage); 7] = [
            ("corpus_gen", corpus_gen),
            ("train_pair", train_pair),
            ("extract", extract),
            ("fit_mappers", fit_mappers),
            ("sweep", run_sweep),
            ("dissociate", dissociate),
            ("report", report),
        ];
        let mut stage_secs = Vec::new();
        for (name, stage) in stages {
            let t = Instant::now();
            stage(&cfg, &root)?;
            stage_secs.push((name, t.elapsed().as_secs_f64()));
        }
        let timings: Vec<String> = stage_secs
            .iter()
            .map(|(n, s)| format!("{n} {s:.0}s"))
            .collect();
        println!("default pipeline: {}", timings.join(", "));
        Ok(Self {
            _dir: dir,
            root,
            cfg,
            stage_secs,
        })
    }

    fn layout(&self) -> RunLayout {
        RunLayout::new(&self.root)
    }

    fn secs(&self, names: &[&str]) -> f64 {
        self.stage_secs
            .iter()
            .filter(|(n, _)| names.contains(n))
            .map(|(_, s)| s)
            .sum()
    }

    fn model(&self, id: &str) -> steerbridge::Result<TransformerModel> {
        TransformerModel::load(&self.layout().model(id))
    }
}

fn controls_ordering(run: &FullRun) -> Outcome {
    let rows: Vec<ControlRow> = read_csv(&run.layout().controls())?;
    let mut ok = true;
    let mut detail = Vec::new();
    for domain in [Domain::Verbal, Domain::Math] {
        let r2 = |kind: RegKind| {
            rows.iter()
                .find(|r| {
                    r.domain == domain && r.l_t == 0.75 && r.l_s == 0.75 && r.condition == kind
                })
                .ok_or_else(|| format!("no {kind:?} row for {domain:?} at 0.75/0.75"))
        };
        let (ridge, lasso, perm) = (
            r2(RegKind::Ridge)?,
            r2(RegKind::Lasso)?,
            r2(RegKind::PermutationRidge)?,
        );
        let pairs = ridge.n_train + ridge.n_test;
        ok &= pairs >= 400 && ridge.r2 > lasso.r2 && perm.r2 < 0.05 && ridge.r2 - perm.r2 >= 0.3;
        detail.push(format!(
            "{} ({pairs} pairs): ridge {:.3} lasso {:.3} permutation {:.3}",
            domain.as_str(),
            ridge.r2,
            lasso.r2,
            perm.r2
        ));
    }
    let secs = run.secs(&["extract", "fit_mappers"]);
    ok &= secs < 300.0;
    Ok((
        ok,
        format!(
            "{}; extraction + fitting {secs:.0}s (limit 300s)",
            detail.join("; ")
        ),
    ))
}

fn test_items(run: &FullRun, domain: Domain) -> Result<Vec<QAItem>, Box<dyn StdError>> {
    let layout = run.layout();
    let splits: Splits = serde_json::from_slice(&fs::read(layout.splits())?)?;
    let items = read_jsonl(&layout.corpus(domain))?;
    let (_, test) = splits.get(domain);
    Ok(items.into_iter().filter(|i| test.contains(&i.id)).collect())
}

fn self_pairing(run: &FullRun) -> Outcome {
    let student = run.model(&run.cfg.student.model_id)?;
    let tok = run.cfg.tokenizer();
    let items: Vec<QAItem> = test_items(run, Domain::Verbal)?
        .into_iter()
        .take(100)
        .collect();
    let max_new = run.cfg.sweep.max_new_tokens(Domain::Verbal);
    let baseline: Vec<String> = items
        .iter()
        .map(|item| {
            let prompt = tok.encode(&item.prompt)?;
            let gen = generate_greedy(&student, &prompt, max_new, Some(tok.eos_id()), None)?;
            Ok(tok.decode_full(&prompt, &gen))
        })
        .collect::<steerbridge::Result<_>>()?;
    let mut changed = BTreeMap::new();
    for schedule in [InjectionSchedule::PromptFinal, InjectionSchedule::EveryStep] {
        let gen = GenerationSettings {
            tokenizer: &tok,
            max_new_tokens: max_new,
            schedule,
        };
        let mut per_layer = Vec::new();
        for layer in 1..=student.n_layers() {
            let own = extract_activations(&student, &tok, &items, layer)?;
            let mut identity = Mapper::from_parts(
                DenseMatrix::identity(student.d_model()),
                vec![0.0; student.d_model()],
                RegKind::Ridge,
                0.1,
            );
            identity.target_layer = layer;
            let l_s = layer as f64 / student.n_layers() as f64;
            assert_eq!(relative_depth_to_layer(l_s, student.n_layers()), layer);
            let out = run_intervention(&student, &identity, &own, &items, l_s, 1.0, &gen)?;
            per_layer.push(
                out.iter()
                    .zip(&baseline)
                    .filter(|((_, a), b)| a != *b)
                    .count(),
            );
        }
        changed.insert(format!("{schedule:?}"), per_layer);
    }
    let prompt_final = &changed["PromptFinal"];
    Ok((
        prompt_final.iter().all(|&c| c == 0),
        format!(
            "changed generations of 100 per student layer: prompt-final hook {:?}; every-step hook {:?} (a fixed vector overwrites generated positions it was not read from, so no fixed point is expected there)",
            prompt_final, changed["EveryStep"]
        ),
    ))
}

fn sweep_peaks(root: &Path) -> Result<Peaks, Box<dyn StdError>> {
    let layout = RunLayout::new(root);
    let mut out = Vec::new();
    for domain in [Domain::Verbal, Domain::Math] {
        let rows: Vec<SweepRow> = read_csv(&layout.sweep_csv(domain))?;
        let opportunities = rows.first().map_or(0, |r| r.opportunities);
        let peak = rows
            .iter()
            .filter_map(|r| r.delta_pct)
            .fold(f64::NEG_INFINITY, f64::max);
        out.push((domain, opportunities, peak));
    }
    Ok(out)
}

fn correction_existence(run: &FullRun) -> Outcome {
    let peaks = sweep_peaks(&run.root)?;
    let steps_ok = run.cfg.training.teacher_steps >= 5 * run.cfg.training.student_steps;
    let total = run.secs(&[
        "corpus_gen",
        "train_pair",
        "extract",
        "fit_mappers",
        "sweep",
        "dissociate",
        "report",
    ]);
    let ok = steps_ok && total < 1800.0 && peaks.iter().all(|(_, n, p)| *n > 0 && *p > 0.0);

    // The same sweep with the injection confined to the last prompt token,
    // for comparison only.
    let dir = tempfile::tempdir()?;
    let mut alt = run.cfg.clone();
    alt.sweep.schedule = InjectionSchedule::PromptFinal;
    copy_tree(
        &run.root,
        dir.path(),
        &["sweep", "report.md", "config.toml"],
    );
    fs::write(dir.path().join("config.toml"), alt.to_toml_string()?)?;
    run_sweep(&alt, dir.path())?;
    let alt_peaks = sweep_peaks(dir.path())?;

    let fmt = |p: &[(Domain, usize, f64)]| {
        p.iter()
            .map(|(d, n, v)| format!("{} peak {v:.1}% of {n}", d.as_str()))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Ok((
        ok,
        format!(
            "teacher/student steps {}/{}; every-step hook: {}; pipeline {total:.0}s (limit 1800s) [prompt-final hook for comparison: {}]",
            run.cfg.training.teacher_steps,
            run.cfg.training.student_steps,
            fmt(&peaks),
            fmt(&alt_peaks)
        ),
    ))
}

#[derive(Deserialize)]
struct TransferRow {
    tqa_in: f64,
    tqa_to_gsm: f64,
    gsm_in: f64,
    gsm_to_tqa: f64,
}

impl TransferRow {
    fn margin(&self) -> f64 {
        (self.tqa_in - self.tqa_to_gsm).min(self.gsm_in - self.gsm_to_tqa)
    }
}

fn dissociation_ordering(run: &FullRun) -> Outcome {
    let layout = run.layout();
    let main: Vec<TransferRow> = read_csv(&layout.dissociation())?;
    let main = main.first().ok_or("empty dissociation table")?;
    let grid: Vec<TransferRow> = read_csv(&layout.dissociation_grid())?;
    let ordered = grid.iter().filter(|r| r.margin() > 0.0).count();
    let ok = main.margin() >= 0.3 && grid.len() == 16 && ordered >= 14;
    Ok((
        ok,
        format!(
            "verbal in {:.3} vs to-math {:.3}, math in {:.3} vs to-verbal {:.3}, margin {:.3} (need 0.3); grid ordered in {ordered}/{} cells (need 14)",
            main.tqa_in,
            main.tqa_to_gsm,
            main.gsm_in,
            main.gsm_to_tqa,
            main.margin(),
            grid.len()
        ),
    ))
}

fn determinism(run: &FullRun) -> Outcome {
    let dir = tempfile::tempdir()?;

    // Whole pipeline twice at the smoke scale, training and sweep included.
    let smoke = RunConfig::smoke();
    let (a, b) = (dir.path().join("smoke_a"), dir.path().join("smoke_b"));
    run_all(&smoke, &a)?;
    run_all(&smoke, &b)?;
    let (ta, tb) = (files_under(&a), files_under(&b));
    let smoke_diff = tree_diff(&ta, &tb);

    // Default scale: regenerate the corpus, reuse the trained pair, and redo
    // extraction, fitting and dissociation.
    let redo = dir.path().join("default_redo");
    corpus_gen(&run.cfg, &redo)?;
    copy_tree(&run.root.join("models"), &redo.join("models"), &[]);
    extract(&run.cfg, &redo)?;
    fit_mappers(&run.cfg, &redo)?;
    dissociate(&run.cfg, &redo)?;
    let original = files_under(&run.root);
    let redone = files_under(&redo);
    let default_diff: Vec<PathBuf> = redone
        .iter()
        .filter(|(k, v)| original.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();

    // Greedy decoding with the trained teacher, twice.
    let teacher = run.model(&run.cfg.teacher.model_id)?;
    let tok = run.cfg.tokenizer();
    let mut greedy_same = true;
    for item in test_items(run, Domain::Math)?.iter().take(20) {
        let prompt = tok.encode(&item.prompt)?;
        let once = generate_greedy(&teacher, &prompt, 100, Some(tok.eos_id()), None)?;
        let twice = generate_greedy(&teacher, &prompt, 100, Some(tok.eos_id()), None)?;
        greedy_same &= once == twice;
    }

    let ok = smoke_diff.is_empty() && default_diff.is_empty() && greedy_same && ta.len() > 50;
    Ok((
        ok,
        format!(
            "smoke runs: {} files, {} differ; default-scale redo: {} files, {} differ; greedy repeat identical: {greedy_same}",
            ta.len(),
            smoke_diff.len(),
            redone.len(),
            default_diff.len()
        ),
    ))
}

fn grid_cardinalities(run: &FullRun) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for domain in [Domain::Verbal, Domain::Math] {
        let rows: Vec<SweepRow> = read_csv(&run.layout().sweep_csv(domain))?;
        let mut layer_pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.l_t, r.l_s)).collect();
        layer_pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        layer_pairs.dedup();
        let mut alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        let per_pair_ok = layer_pairs
            .iter()
            .all(|p| rows.iter().filter(|r| (r.l_t, r.l_s) == *p).count() == ALPHA_GRID.len());
        ok &= rows.len() == 128
            && layer_pairs.len() == 16
            && per_pair_ok
            && alphas == [0.25, 0.5, 0.8, 1.0, 2.0, 3.0, 5.0, 10.0];
        detail.push(format!(
            "{}: {} rows, {} layer pairs, alphas {alphas:?}",
            domain.as_str(),
            rows.len(),
            layer_pairs.len()
        ));
    }
    Ok((ok, detail.join("; ")))
}
