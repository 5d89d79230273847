use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpora::{Domain, Tokenizer};
use crate::dissociation::DissociationProtocol;
use crate::error::{Error, Result};
use crate::intervention::{SweepGrid, ALPHA_GRID, DEPTH_GRID};
use crate::numerics::SeededRng;
use crate::toy_models::{InjectionSchedule, ModelConfig, TrainHyper};

/// Architecture of one model in the pair. Vocabulary size comes from the
/// shared tokenizer and the init seed from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub model_id: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub verbal_items: usize,
    pub math_items: usize,
    pub train_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            verbal_items: 817,
            math_items: 400,
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub teacher_steps: usize,
    pub student_steps: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 32,
            teacher_steps: 1500,
            student_steps: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub ridge_lambda: f64,
    pub lasso_lambda: f64,
    pub lasso_max_iter: usize,
    pub lasso_tol: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            ridge_lambda: 0.1,
            lasso_lambda: 1e-4,
            lasso_max_iter: crate::alignment::LASSO_DEFAULT_MAX_ITER,
            lasso_tol: crate::alignment::LASSO_DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub depth_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub max_new_tokens_verbal: usize,
    pub max_new_tokens_math: usize,
    pub schedule: InjectionSchedule,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            depth_grid: DEPTH_GRID.to_vec(),
            alpha_grid: ALPHA_GRID.to_vec(),
            max_new_tokens_verbal: 50,
            max_new_tokens_math: 100,
            schedule: InjectionSchedule::EveryStep,
        }
    }
}

impl SweepConfig {
    pub fn grid(&self) -> SweepGrid {
        SweepGrid {
            depths: self.depth_grid.clone(),
            alphas: self.alpha_grid.clone(),
        }
    }

    pub fn max_new_tokens(&self, domain: Domain) -> usize {
        match domain {
            Domain::Verbal => self.max_new_tokens_verbal,
            Domain::Math => self.max_new_tokens_math,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DissociationConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub lambda: f64,
    pub l_t: f64,
    pub l_s: f64,
}

impl Default for DissociationConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 100,
            lambda: 0.1,
            l_t: 0.75,
            l_s: 0.75,
        }
    }
}

/// Everything a pipeline run depends on. All randomness derives from
/// `seed`, so the resolved config alone reproduces every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    pub training: TrainingConfig,
    pub alignment: AlignmentConfig,
    pub sweep: SweepConfig,
    pub dissociation: DissociationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus: CorpusConfig::default(),
            teacher: ArchConfig {
                model_id: "teacher".into(),
                n_layers: 8,
                d_model: 64,
                n_heads: 4,
                d_ff: 256,
                max_seq_len: 160,
            },
            student: ArchConfig {
                model_id: "student".into(),
                n_layers: 4,
                d_model: 48,
                n_heads: 2,
                d_ff: 192,
                max_seq_len: 160,
            },
            training: TrainingConfig::default(),
            alignment: AlignmentConfig::default(),
            sweep: SweepConfig::default(),
            dissociation: DissociationConfig::default(),
        }
    }
}

/// Independent seed streams drawn from the run seed.
#[derive(Debug, Clone, Copy)]
pub(crate) enum SeedUse {
    VerbalCorpus = 1,
    MathCorpus = 2,
    TeacherInit = 3,
    StudentInit = 4,
    TeacherBatches = 5,
    StudentBatches = 6,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&crate::io_util::read_artifact_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// A pipeline small enough to run end to end in seconds. Useful for
    /// smoke and determinism checks, not for the experimental claims.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.corpus.verbal_items = 60;
        c.corpus.math_items = 60;
        c.teacher.n_layers = 4;
        c.teacher.d_model = 16;
        c.teacher.n_heads = 2;
        c.teacher.d_ff = 32;
        c.student.n_layers = 2;
        c.student.d_model = 8;
        c.student.n_heads = 2;
        c.student.d_ff = 16;
        c.training.teacher_steps = 10;
        c.training.student_steps = 2;
        c.training.batch_size = 8;
        c.alignment.lasso_max_iter = 200;
        c.sweep.max_new_tokens_verbal = 8;
        c.sweep.max_new_tokens_math = 8;
        c.dissociation.n_train = 30;
        c.dissociation.n_test = 20;
        c
    }

    pub(crate) fn sub_seed(&self, purpose: SeedUse) -> u64 {
        SeededRng::with_stream(self.seed, purpose as u64).next_u64()
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::default()
    }

    fn model_config(&self, arch: &ArchConfig, purpose: SeedUse) -> ModelConfig {
        ModelConfig {
            model_id: arch.model_id.clone(),
            n_layers: arch.n_layers,
            d_model: arch.d_model,
            n_heads: arch.n_heads,
            d_ff: arch.d_ff,
            vocab_size: self.tokenizer().vocab_size(),
            max_seq_len: arch.max_seq_len,
            seed: self.sub_seed(purpose),
        }
    }

    pub fn teacher_config(&self) -> ModelConfig {
        self.model_config(&self.teacher, SeedUse::TeacherInit)
    }

    pub fn student_config(&self) -> ModelConfig {
        self.model_config(&self.student, SeedUse::StudentInit)
    }

    pub fn teacher_hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.training.lr,
            batch_size: self.training.batch_size,
            steps: self.training.teacher_steps,
            seed: self.sub_seed(SeedUse::TeacherBatches),
        }
    }

    pub fn student_hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.training.lr,
            batch_size: self.training.batch_size,
            steps: self.training.student_steps,
            seed: self.sub_seed(SeedUse::StudentBatches),
        }
    }

    pub fn dissociation_protocol(&self) -> DissociationProtocol {
        DissociationProtocol {
            n_train: self.dissociation.n_train,
            n_test: self.dissociation.n_test,
            lambda: self.dissociation.lambda,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.teacher_config().validate()?;
        self.student_config().validate()?;
        if self.teacher.model_id == self.student.model_id {
            return bad("teacher and student need distinct model ids".into());
        }
        if self.corpus.verbal_items < 2 || self.corpus.math_items < 2 {
            return bad("each domain needs at least 2 items".into());
        }
        if !(self.corpus.train_fraction > 0.0 && self.corpus.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction {} must lie in (0, 1)",
                self.corpus.train_fraction
            ));
        }
        if !(self.training.lr > 0.0) || self.training.batch_size == 0 {
            return bad("lr and batch_size must be positive".into());
        }
        let a = &self.alignment;
        if !(a.ridge_lambda > 0.0 && a.lasso_lambda > 0.0 && a.lasso_tol > 0.0)
            || a.lasso_max_iter == 0
        {
            return bad("alignment lambdas, tol and max_iter must be positive".into());
        }
        self.sweep
            .grid()
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let d = &self.dissociation;
        if !self.sweep.depth_grid.contains(&d.l_t) || !self.sweep.depth_grid.contains(&d.l_s) {
            return bad(format!(
                "dissociation depths ({}, {}) must be on the depth grid",
                d.l_t, d.l_s
            ));
        }
        if d.n_train < 2 || d.n_test < 1 || !(d.lambda > 0.0) {
            return bad("dissociation needs n_train >= 2, n_test >= 1 and lambda > 0".into());
        }
        Ok(())
    }
}
