//! One JSON document configures every subcommand. Sections are optional in
//! the file; each command demands the sections it needs and fails the
//! contract when one is missing. Unknown keys anywhere are an error —
//! silent typos in experiment configs destroy reproducibility.

use serde::{Deserialize, Serialize};

use loza_core::data::PasskeyConfig;
use loza_core::pipeline::PilotConfig;
use loza_core::{ModelConfig, SparsePattern};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    /// Attention pattern for training-scale runs; absent means the desk
    /// default (1 sink block, 3 local, size 16).
    pub pattern: Option<SparsePattern>,
    pub train: Option<TrainSection>,
    pub calibrate: Option<CalibrateSection>,
    pub pilot: Option<PilotSection>,
    pub bench: Option<BenchSection>,
}

/// Schedule and data recipe for `train`; `eval` and `rewind-train` reuse
/// the recipe so every phase sees the same distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Retraining budget after a rewind.
    pub sparse_steps: usize,
    pub lr: f64,
    pub grammar_len: usize,
    pub passkey: PasskeyConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateSection {
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub l1_lambda: f64,
    #[serde(default)]
    pub distill: bool,
    pub samples: usize,
    /// Fraction of layers `sparsify` and `rewind-train` convert, taken
    /// from the front of the calibration ranking.
    pub sparsify_ratio: f64,
}

/// The five-variant study, self-contained apart from the shared `model`
/// and `pattern` sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSection {
    pub sparsify_ratio: f64,
    pub warmup_steps: usize,
    pub train_steps: usize,
    pub sparse_train_steps: usize,
    pub calib_steps: usize,
    pub lr: f64,
    pub calib_lr: f64,
    #[serde(default)]
    pub l1_lambda: f64,
    #[serde(default)]
    pub distill: bool,
    pub grammar_len: usize,
    pub passkey: PasskeyConfig,
    pub train_samples: usize,
    pub calib_samples: usize,
    pub eval_samples: usize,
    /// Seeds averaged over; `--seed` replaces the whole list with one.
    pub seeds: Vec<u64>,
}

impl PilotSection {
    pub fn assemble(&self, model: ModelConfig, pattern: SparsePattern) -> PilotConfig {
        PilotConfig {
            model,
            pattern,
            sparsify_ratio: self.sparsify_ratio,
            warmup_steps: self.warmup_steps,
            train_steps: self.train_steps,
            sparse_train_steps: self.sparse_train_steps,
            calib_steps: self.calib_steps,
            lr: self.lr,
            calib_lr: self.calib_lr,
            l1_lambda: self.l1_lambda,
            distill: self.distill,
            grammar_len: self.grammar_len,
            passkey: self.passkey,
            train_samples: self.train_samples,
            calib_samples: self.calib_samples,
            eval_samples: self.eval_samples,
        }
    }
}

fn production_pattern() -> SparsePattern {
    SparsePattern::production()
}

fn four_ranks() -> usize {
    4
}

/// Analytic cost sweep. Costed at the production-shaped pattern by default
/// even when the training sections use the desk pattern: the claims under
/// test are about the production shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub context_lens: Vec<usize>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// One mode mix per entry: the fraction of layers run sparse.
    pub sparse_fractions: Vec<f64>,
    #[serde(default = "production_pattern")]
    pub pattern: SparsePattern,
    #[serde(default = "four_ranks")]
    pub balance_ranks: usize,
}
