use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SeedUse};
use crate::alignment::{
    extract_activations_multi, fit_lasso, fit_permutation_control, fit_ridge, r2_score,
    ActivationSet, Mapper, RegKind,
};
use crate::corpora::{
    gen_math_task, gen_verbal_task, read_jsonl, split_items, write_jsonl, Domain, QAItem,
};
use crate::dissociation::{
    run_dissociation, run_layer_dissociation, write_grid_csv, write_summary_csv, DepthActivations,
    PairedActivations,
};
use crate::error::{Error, Result};
use crate::evaluation::{score_item, write_score_dump, ScoreDumpRow};
use crate::intervention::{
    alpha_profile, depth_key, find_opportunity_set, peak_record, r2_delta_correlation,
    relative_depth_to_layer, sweep, CellMapper, GenerationSettings, SweepRecord,
};
use crate::io_util::{read_artifact, write_atomic};
use crate::toy_models::{generate_greedy, init_model, train, TransformerModel};

const CONFIG_FILE: &str = "config.toml";

/// Where every artifact of a run lives, relative to the output directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn corpus(&self, domain: Domain) -> PathBuf {
        self.root.join("corpus").join(format!("{domain}.jsonl"))
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join("corpus").join("splits.json")
    }

    pub fn model(&self, model_id: &str) -> PathBuf {
        self.root.join("models").join(format!("{model_id}.toym"))
    }

    pub fn loss_curves(&self) -> PathBuf {
        self.root.join("models").join("loss_curves.csv")
    }

    /// Stem of an activation cache (`.actb` + `.json`).
    pub fn activations(&self, model_id: &str, domain: Domain, depth: f64) -> PathBuf {
        self.root
            .join("activations")
            .join(format!("{model_id}_{domain}_l{}", depth_key(depth)))
    }

    /// Stem of a mapper file (`.mapw` + `.json`).
    pub fn mapper(&self, domain: Domain, l_t: f64, l_s: f64, kind: RegKind) -> PathBuf {
        self.root.join("mappers").join(format!(
            "{domain}_t{}_s{}_{}",
            depth_key(l_t),
            depth_key(l_s),
            kind.as_str()
        ))
    }

    pub fn controls(&self) -> PathBuf {
        self.root.join("mappers").join("controls.csv")
    }

    pub fn sweep_csv(&self, domain: Domain) -> PathBuf {
        self.root.join("sweep").join(format!("{domain}_sweep.csv"))
    }

    pub fn alpha_profile(&self, domain: Domain) -> PathBuf {
        self.root
            .join("sweep")
            .join(format!("{domain}_alpha_profile.csv"))
    }

    pub fn scores(&self, domain: Domain) -> PathBuf {
        self.root
            .join("sweep")
            .join(format!("{domain}_scores.jsonl"))
    }

    pub fn peak(&self) -> PathBuf {
        self.root.join("sweep").join("peak_delta.csv")
    }

    pub fn correlation(&self) -> PathBuf {
        self.root.join("sweep").join("r2_delta_correlation.csv")
    }

    pub fn dissociation(&self) -> PathBuf {
        self.root.join("dissociation").join("dissociation.csv")
    }

    pub fn dissociation_grid(&self) -> PathBuf {
        self.root.join("dissociation").join("layer_grid.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

/// Writes the resolved config, refusing to mix artifacts from different
/// configs in one directory. `fresh` stages (corpus generation) replace it.
fn record_config(cfg: &RunConfig, layout: &RunLayout, fresh: bool) -> Result<()> {
    cfg.validate()?;
    let text = cfg.to_toml_string()?;
    let path = layout.config();
    if !fresh {
        match std::fs::read_to_string(&path) {
            Ok(existing) if existing != text => {
                return Err(Error::InvalidConfig(format!(
                    "{} was produced with a different config; rerun from corpus-gen",
                    layout.root().display()
                )))
            }
            Ok(_) => return Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingArtifact(path))
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_atomic(&path, text.as_bytes())
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_artifact(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub verbal_train: Vec<String>,
    pub verbal_test: Vec<String>,
    pub math_train: Vec<String>,
    pub math_test: Vec<String>,
}

impl Splits {
    pub fn get(&self, domain: Domain) -> (&[String], &[String]) {
        match domain {
            Domain::Verbal => (&self.verbal_train, &self.verbal_test),
            Domain::Math => (&self.math_train, &self.math_test),
        }
    }
}

fn load_corpus(layout: &RunLayout, domain: Domain) -> Result<Vec<QAItem>> {
    read_jsonl(&layout.corpus(domain))
}

fn load_splits(layout: &RunLayout) -> Result<Splits> {
    let bytes = read_artifact(&layout.splits())?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn check_fits(cfg: &RunConfig, items: &[QAItem]) -> Result<()> {
    let tok = cfg.tokenizer();
    for arch in [&cfg.teacher, &cfg.student] {
        for item in items {
            let seq = item.training_sequence(&tok)?;
            let prompt = tok.encode(&item.prompt)?.len();
            let need = seq
                .tokens
                .len()
                .max(prompt + cfg.sweep.max_new_tokens(item.domain));
            if need > arch.max_seq_len {
                return Err(Error::PromptTooLong {
                    item_id: item.id.clone(),
                    source: Box::new(Error::SequenceTooLong {
                        len: need,
                        max: arch.max_seq_len,
                    }),
                });
            }
        }
    }
    Ok(())
}

/// Generates both corpora and the train/test split used for mapper fitting
/// and the sweep.
pub fn corpus_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let layout = RunLayout::new(out);
    record_config(cfg, &layout, true)?;
    let verbal = gen_verbal_task(cfg.sub_seed(SeedUse::VerbalCorpus), cfg.corpus.verbal_items);
    let math = gen_math_task(cfg.sub_seed(SeedUse::MathCorpus), cfg.corpus.math_items);
    check_fits(cfg, &verbal)?;
    check_fits(cfg, &math)?;
    write_jsonl(&layout.corpus(Domain::Verbal), &verbal)?;
    write_jsonl(&layout.corpus(Domain::Math), &math)?;
    let ids = |items: &[QAItem]| items.iter().map(|i| i.id.clone()).collect::<Vec<_>>();
    let (verbal_train, verbal_test) =
        split_items(&ids(&verbal), cfg.corpus.train_fraction, cfg.seed)?;
    let (math_train, math_test) = split_items(&ids(&math), cfg.corpus.train_fraction, cfg.seed)?;
    let splits = Splits {
        verbal_train,
        verbal_test,
        math_train,
        math_test,
    };
    write_atomic(&layout.splits(), &serde_json::to_vec_pretty(&splits)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    model_id: String,
    step: usize,
    loss: f32,
}

/// Trains teacher and student on the shared mixed corpus (all items of both
/// domains); only the number of steps differs.
pub fn train_pair(cfg: &RunConfig, out: &Path) -> Result<()> {
    let layout = RunLayout::new(out);
    record_config(cfg, &layout, false)?;
    let tok = cfg.tokenizer();
    let mut items = load_corpus(&layout, Domain::Verbal)?;
    items.extend(load_corpus(&layout, Domain::Math)?);
    let corpus = items
        .iter()
        .map(|i| i.training_sequence(&tok))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (model_cfg, hyper) in [
        (cfg.teacher_config(), cfg.teacher_hyper()),
        (cfg.student_config(), cfg.student_hyper()),
    ] {
        let mut model = init_model(model_cfg.clone())?;
        let losses = train(&mut model, &corpus, &hyper)?;
        model.save(&layout.model(&model_cfg.model_id))?;
        rows.extend(losses.into_iter().enumerate().map(|(step, loss)| LossRow {
            model_id: model_cfg.model_id.clone(),
            step: step + 1,
            loss,
        }));
    }
    write_csv(&layout.loss_curves(), rows)
}

fn load_pair(cfg: &RunConfig, layout: &RunLayout) -> Result<(TransformerModel, TransformerModel)> {
    let teacher = TransformerModel::load(&layout.model(&cfg.teacher.model_id))?;
    let student = TransformerModel::load(&layout.model(&cfg.student.model_id))?;
    if teacher.config() != &cfg.teacher_config() || student.config() != &cfg.student_config() {
        return Err(Error::InvalidConfig(
            "checkpoints do not match the run config; rerun train-pair".into(),
        ));
    }
    Ok((teacher, student))
}

/// Caches final-token activations of every item at every grid depth, for
/// both models and both domains. Rows are stored unnormalized.
pub fn extract(cfg: &RunConfig, out: &Path) -> Result<()> {
    let layout = RunLayout::new(out);
    record_config(cfg, &layout, false)?;
    let (teacher, student) = load_pair(cfg, &layout)?;
    let tok = cfg.tokenizer();
    for domain in Domain::ALL {
        let items = load_corpus(&layout, domain)?;
        for model in [&teacher, &student] {
            let layers: Vec<usize> = cfg
                .sweep
                .depth_grid
                .iter()
                .map(|&l| relative_depth_to_layer(l, model.n_layers()))
                .collect();
            let sets = extract_activations_multi(model, &tok, &items, &layers)?;
            for (mut set, &depth) in sets.into_iter().zip(&cfg.sweep.depth_grid) {
                set.relative_depth = depth;
                set.save(
                    &layout.activations(&model.config().model_id, domain, depth),
                    cfg.seed,
                )?;
            }
        }
    }
    Ok(())
}

fn load_acts(
    layout: &RunLayout,
    model_id: &str,
    domain: Domain,
    depth: f64,
) -> Result<ActivationSet> {
    Ok(ActivationSet::load(&layout.activations(model_id, domain, depth))?.0)
}

/// One row of the controls table: a mapping condition at one layer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub domain: Domain,
    pub teacher_id: String,
    pub student_id: String,
    pub l_t: f64,
    pub l_s: f64,
    pub condition: RegKind,
    pub lambda: f64,
    pub r2: f64,
    pub excluded_dims: usize,
    pub sparsity: Option<f64>,
    pub converged: bool,
    pub n_train: usize,
    pub n_test: usize,
}

/// Fits ridge, lasso and the permutation control for every layer pair and
/// domain on the training split; R² is measured on the test split.
pub fn fit_mappers(cfg: &RunConfig, out: &Path) -> Result<()> {
    let layout = RunLayout::new(out);
    record_config(cfg, &layout, false)?;
    let splits = load_splits(&layout)?;
    let a = &cfg.alignment;
    let mut rows = Vec::new();
    for domain in Domain::ALL {
        let (train_ids, test_ids) = splits.get(domain);
        for &l_t in &cfg.sweep.depth_grid {
            let teacher = load_acts(&layout, &cfg.teacher.model_id, domain, l_t)?.normalized()?;
            let (t_train, t_test) = (teacher.select(train_ids)?, teacher.select(test_ids)?);
            for &l_s in &cfg.sweep.depth_grid {
                let student =
                    load_acts(&layout, &cfg.student.model_id, domain, l_s)?.normalized()?;
                let (s_train, s_test) = (student.select(train_ids)?, student.select(test_ids)?);
                let fits = [
                    fit_ridge(&t_train, &s_train, a.ridge_lambda)?,
                    fit_lasso(
                        &t_train,
                        &s_train,
                        a.lasso_lambda,
                        a.lasso_max_iter,
                        a.lasso_tol,
                    )?,
                    fit_permutation_control(&t_train, &s_train, a.ridge_lambda, cfg.seed)?,
                ];
                for mapper in fits {
                    let r2 = r2_score(&mapper, &t_test, &s_test)?;
                    mapper.save(&layout.mapper(domain, l_t, l_s, mapper.reg_kind))?;
                    rows.push(ControlRow {
                        domain,
                        teacher_id: cfg.teacher.model_id.clone(),
                        student_id: cfg.student.model_id.clone(),
                        l_t,
                        l_s,
                        condition: mapper.reg_kind,
                        lambda: mapper.lambda,
                        r2: r2.r2,
                        excluded_dims: r2.excluded_dims,
                        sparsity: mapper.sparsity,
                        converged: mapper.converged,
                        n_train: train_ids.len(),
                        n_test: test_ids.len(),
                    });
                }
            }
        }
    }
    write_csv(&layout.controls(), rows)
}

/// One row of a sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub teacher_id: String,
    pub student_id: String,
    pub l_t: f64,
    pub l_s: f64,
    pub alpha: f64,
    pub opportunities: usize,
    pub corrected: usize,
    /// Empty when the opportunity set is empty.
    pub delta_pct: Option<f64>,
    pub r2_ridge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakRow {
    pub domain: Domain,
    pub teacher_id: String,
    pub student_id: String,
    pub l_t: Option<f64>,
    pub l_s: Option<f64>,
    pub alpha: Option<f64>,
    pub opportunities: usize,
    pub corrected: Option<usize>,
    pub delta_pct: Option<f64>,
    pub baseline_teacher_correct: usize,
    pub baseline_student_correct: usize,
    pub test_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub student_id: String,
    pub alpha: f64,
    pub mean_delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub domain: Domain,
    pub pearson_r: Option<f64>,
}

fn generate_all(
    model: &TransformerModel,
    items: &[QAItem],
    cfg: &RunConfig,
    domain: Domain,
) -> Result<BTreeMap<String, (bool, Option<String>)>> {
    let tok = cfg.tokenizer();
    items
        .iter()
        .map(|item| {
            let prompt = tok.encode(&item.prompt)?;
            let gen = generate_greedy(
                model,
                &prompt,
                cfg.sweep.max_new_tokens(domain),
                Some(tok.eos_id()),
                None,
            )?;
            let report = score_item(&tok.decode_full(&prompt, &gen), item)?;
            Ok((item.id.clone(), (report.correct, report.matched_reference)))
        })
        .collect()
}

fn condition_label(l_t: f64, l_s: f64, alpha: f64) -> String {
    format!("lt={}_ls={}_alpha={alpha}", depth_key(l_t), depth_key(l_s))
}

/// Runs the `(l_T, l_S, alpha)` grid for each domain on its test split.
pub fn run_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let layout = RunLayout::new(out);
    record_config(cfg, &layout, false)?;
    let (teacher, student) = load_pair(cfg, &layout)?;
    let splits = load_splits(&layout)?;
    let controls: Vec<ControlRow> = read_csv(&layout.controls())?;
    let tok = cfg.tokenizer();
    let grid = cfg.sweep.grid();
    let mut peaks = Vec::new();
    let mut correlations = Vec::new();
    for domain in Domain::ALL {
        let (_, test_ids) = splits.get(domain);
        let by_id: BTreeMap<String, QAItem> = load_corpus(&layout, domain)?
            .into_iter()
            .map(|i| (i.id.clone(), i))
            .collect();
        let test: Vec<QAItem> = test_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::ItemMismatch(format!("split id {id} not in corpus")))
            })
            .collect::<Result<_>>()?;

        let teacher_base = generate_all(&teacher, &test, cfg, domain)?;
        let student_base = generate_all(&student, &test, cfg, domain)?;
        let flags = |m: &BTreeMap<String, (bool, Option<String>)>| -> BTreeMap<String, bool> {
            m.iter().map(|(k, v)| (k.clone(), v.0)).collect()
        };
        let (t_flags, s_flags) = (flags(&teacher_base), flags(&student_base));
        let opportunity_ids = find_opportunity_set(&t_flags, &s_flags)?;
        let opportunity: Vec<QAItem> = opportunity_ids.iter().map(|id| by_id[id].clone()).collect();

        let mut dump = Vec::new();
        for (condition, base) in [
            ("baseline_teacher", &teacher_base),
            ("baseline_student", &student_base),
        ] {
            dump.extend(base.iter().map(|(id, (correct, matched))| ScoreDumpRow {
                item_id: id.clone(),
                condition: condition.into(),
                correct: *correct,
                matched_reference: matched.clone(),
            }));
        }

        let mut mappers = Vec::new();
        let mut teacher_acts = BTreeMap::new();
        for &l_t in &grid.depths {
            teacher_acts.insert(
                depth_key(l_t),
                load_acts(&layout, &cfg.teacher.model_id, domain, l_t)?,
            );
            for &l_s in &grid.depths {
                let mapper = Mapper::load(&layout.mapper(domain, l_t, l_s, RegKind::Ridge))?;
                let r2 = controls
                    .iter()
                    .find(|r| {
                        r.domain == domain
                            && r.l_t == l_t
                            && r.l_s == l_s
                            && r.condition == RegKind::Ridge
                    })
                    .map(|r| r.r2)
                    .ok_or_else(|| Error::MissingArtifact(layout.controls()))?;
                mappers.push(CellMapper {
                    l_t,
                    l_s,
                    mapper,
                    r2,
                });
            }
        }
        let gen = GenerationSettings {
            tokenizer: &tok,
            max_new_tokens: cfg.sweep.max_new_tokens(domain),
            schedule: cfg.sweep.schedule,
        };
        let (records, outcomes) = if opportunity.is_empty() {
            (empty_records(&mappers, &grid.alphas), Vec::new())
        } else {
            sweep(
                &student,
                &mappers,
                &teacher_acts,
                &opportunity,
                &s_flags,
                &grid,
                &gen,
            )?
        };
        for outcome in &outcomes {
            let c = outcome.config;
            dump.extend(outcome.scores.iter().map(|(id, correct)| ScoreDumpRow {
                item_id: id.clone(),
                condition: condition_label(c.l_t, c.l_s, c.alpha),
                correct: *correct,
                matched_reference: None,
            }));
        }
        write_score_dump(&layout.scores(domain), &dump)?;

        let ids = (&cfg.teacher.model_id, &cfg.student.model_id);
        write_csv(
            &layout.sweep_csv(domain),
            records.iter().map(|r| sweep_row(r, ids)),
        )?;
        write_csv(
            &layout.alpha_profile(domain),
            alpha_profile(&records)
                .into_iter()
                .map(|(alpha, mean)| AlphaRow {
                    student_id: cfg.student.model_id.clone(),
                    alpha,
                    mean_delta_pct: mean,
                }),
        )?;
        let peak = peak_record(&records);
        peaks.push(PeakRow {
            domain,
            teacher_id: ids.0.clone(),
            student_id: ids.1.clone(),
            l_t: peak.map(|p| p.config.l_t),
            l_s: peak.map(|p| p.config.l_s),
            alpha: peak.map(|p| p.config.alpha),
            opportunities: opportunity.len(),
            corrected: peak.map(|p| p.corrected_count),
            delta_pct: peak.and_then(|p| p.delta),
            baseline_teacher_correct: t_flags.values().filter(|&&c| c).count(),
            baseline_student_correct: s_flags.values().filter(|&&c| c).count(),
            test_items: test.len(),
        });
        correlations.push(CorrelationRow {
            domain,
            pearson_r: r2_delta_correlation(&records),
        });
    }
    write_csv(&layout.peak(), peaks)?;
    write_csv(&layout.correlation(), correlations)
}

/// Records for a domain with nothing to correct: every cell is present
/// with Δ undefined.
fn empty_records(mappers: &[CellMapper], alphas: &[f64]) -> Vec<SweepRecord> {
    mappers
        .iter()
        .flat_map(|m| {
            alphas.iter().map(move |&alpha| SweepRecord {
                config: crate::intervention::InterventionConfig {
                    l_t: m.l_t,
                    l_s: m.l_s,
                    alpha,
                },
                opportunity_count: 0,
                corrected_count: 0,
                delta: None,
                r2_at_layers: m.r2,
            })
        })
        .collect()
}

fn sweep_row(r: &SweepRecord, (teacher, student): (&String, &String)) -> SweepRow {
    SweepRow {
        teacher_id: teacher.clone(),
        student_id: student.clone(),
        l_t: r.config.l_t,
        l_s: r.config.l_s,
        alpha: r.config.alpha,
        opportunities: r.opportunity_count,
        corrected: r.corrected_count,
        delta_pct: r.delta,
        r2_ridge: r.r2_at_layers,
    }
}

/// Cross-domain transfer at the configured depth pair and over the grid.
pub fn dissociate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let layout = RunLayout::new(out);
    record_config(cfg, &layout, false)?;
    let protocol = cfg.dissociation_protocol();
    let load_all = |model_id: &str, domain: Domain| -> Result<DepthActivations> {
        cfg.sweep
            .depth_grid
            .iter()
            .map(|&l| Ok((depth_key(l), load_acts(&layout, model_id, domain, l)?)))
            .collect()
    };
    let (t, s) = (&cfg.teacher.model_id, &cfg.student.model_id);
    let tv = load_all(t, Domain::Verbal)?;
    let tm = load_all(t, Domain::Math)?;
    let sv = load_all(s, Domain::Verbal)?;
    let sm = load_all(s, Domain::Math)?;
    let d = &cfg.dissociation;
    let pick = |m: &DepthActivations, l: f64| m[&depth_key(l)].clone();
    let verbal = PairedActivations::new(pick(&tv, d.l_t), pick(&sv, d.l_s))?;
    let math = PairedActivations::new(pick(&tm, d.l_t), pick(&sm, d.l_s))?;
    let main = run_dissociation(&verbal, &math, d.l_t, d.l_s, &protocol)?;
    write_summary_csv(&layout.dissociation(), &[main])?;
    let grid = run_layer_dissociation(&tv, &tm, &sv, &sm, &cfg.sweep.depth_grid, &protocol)?;
    write_grid_csv(&layout.dissociation_grid(), &grid)
}

#[derive(Debug, Deserialize)]
struct DissociationRow {
    tqa_in: f64,
    tqa_to_gsm: f64,
    gsm_in: f64,
    gsm_to_tqa: f64,
    confirmed: bool,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.digits$}"))
}

/// Summarizes the other stages' CSVs as Markdown.
pub fn report(cfg: &RunConfig, out: &Path) -> Result<()> {
    let layout = RunLayout::new(out);
    record_config(cfg, &layout, false)?;
    let controls: Vec<ControlRow> = read_csv(&layout.controls())?;
    let peaks: Vec<PeakRow> = read_csv(&layout.peak())?;
    let corr: Vec<CorrelationRow> = read_csv(&layout.correlation())?;
    let diss: Vec<DissociationRow> = read_csv(&layout.dissociation())?;
    let grid: Vec<DissociationRow> = read_csv(&layout.dissociation_grid())?;

    let mut md = String::new();
    let _ = writeln!(md, "# Run report\n");
    let _ = writeln!(
        md,
        "Teacher `{}` ({} layers, d={}), student `{}` ({} layers, d={}), seed {}.\n",
        cfg.teacher.model_id,
        cfg.teacher.n_layers,
        cfg.teacher.d_model,
        cfg.student.model_id,
        cfg.student.n_layers,
        cfg.student.d_model,
        cfg.seed
    );
    let _ = writeln!(md, "## Mapping conditions at l_T = l_S = 0.75\n");
    let _ = writeln!(
        md,
        "| domain | ridge R² | lasso R² | permutation R² |\n|---|---|---|---|"
    );
    for domain in Domain::ALL {
        let get = |kind: RegKind| {
            controls
                .iter()
                .find(|r| {
                    r.domain == domain && r.l_t == 0.75 && r.l_s == 0.75 && r.condition == kind
                })
                .map(|r| r.r2)
        };
        let _ = writeln!(
            md,
            "| {domain} | {} | {} | {} |",
            fmt_opt(get(RegKind::Ridge), 3),
            fmt_opt(get(RegKind::Lasso), 3),
            fmt_opt(get(RegKind::PermutationRidge), 3)
        );
    }
    let _ = writeln!(md, "\n## Sweep\n");
    let _ = writeln!(
        md,
        "| domain | teacher correct | student correct | opportunities | peak Δ % | at (l_T, l_S, α) | Pearson r (R², peak Δ) |\n|---|---|---|---|---|---|---|"
    );
    for p in &peaks {
        let r = corr
            .iter()
            .find(|c| c.domain == p.domain)
            .and_then(|c| c.pearson_r);
        let at = match (p.l_t, p.l_s, p.alpha) {
            (Some(t), Some(s), Some(a)) => format!("({t}, {s}, {a})"),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            md,
            "| {} | {}/{} | {}/{} | {} | {} | {at} | {} |",
            p.domain,
            p.baseline_teacher_correct,
            p.test_items,
            p.baseline_student_correct,
            p.test_items,
            p.opportunities,
            fmt_opt(p.delta_pct, 1),
            fmt_opt(r, 3)
        );
    }
    let _ = writeln!(md, "\n## Cross-domain transfer\n");
    let _ = writeln!(
        md,
        "| verbal in | verbal → math | math in | math → verbal | confirmed |\n|---|---|---|---|---|"
    );
    for d in &diss {
        let _ = writeln!(
            md,
            "| {:.3} | {:.3} | {:.3} | {:.3} | {} |",
            d.tqa_in, d.tqa_to_gsm, d.gsm_in, d.gsm_to_tqa, d.confirmed
        );
    }
    let confirmed = grid.iter().filter(|d| d.confirmed).count();
    let _ = writeln!(
        md,
        "\nLayer grid: confirmed in {confirmed}/{} cells.",
        grid.len()
    );
    write_atomic(&layout.report(), md.as_bytes())
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<()> {
    corpus_gen(cfg, out)?;
    train_pair(cfg, out)?;
    extract(cfg, out)?;
    fit_mappers(cfg, out)?;
    run_sweep(cfg, out)?;
    dissociate(cfg, out)?;
    report(cfg, out)
}
