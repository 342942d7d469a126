//! The procedure end to end: warmup-train a dense model, calibrate per-layer
//! gates with the backbone frozen, rank layers by gate value, sparsify the
//! lowest, rewind to the warmup checkpoint and retrain — plus the five-variant
//! comparison protocol used to sanity-check the whole idea at desk scale.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_model, encode_model, CheckpointError};
use crate::data::{grammar_sample, passkey_sample, DataError, PasskeyConfig, Sample};
use crate::graph::Graph;
use crate::mask::SparsePattern;
use crate::model::{ConfigError, LayerMode, Model, ModelConfig, Trainable};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{NumericsError, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineError {
    /// A training/calibration call was asked to run zero steps.
    NoSteps,
    /// No seeds given for a multi-seed run.
    NoSeeds,
    EmptyData,
    /// Warmup must strictly precede the end of training (it is the rewind
    /// target, not the final state).
    BadSchedule { warmup: usize, total: usize },
    /// Calibration starts from a dense model; some layer wasn't Full.
    ModesNotFull { layer: usize },
    /// A parameter or the loss went non-finite during training.
    Diverged { step: usize },
    /// The rewind checkpoint was produced under a different model shape.
    CheckpointMismatch,
    Task(DataError),
    Config(ConfigError),
    Checkpoint(CheckpointError),
    Model(NumericsError),
}

impl core::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PipelineError::NoSteps => write!(f, "step count must be at least 1"),
            PipelineError::NoSeeds => write!(f, "need at least one seed"),
            PipelineError::EmptyData => write!(f, "data batch list is empty"),
            PipelineError::BadSchedule { warmup, total } => write!(
                f,
                "warmup ({warmup} steps) must be shorter than training ({total} steps)"
            ),
            PipelineError::ModesNotFull { layer } => {
                write!(f, "calibration requires all layers Full; layer {layer} is not")
            }
            PipelineError::Diverged { step } => {
                write!(f, "training diverged at step {step} (non-finite value)")
            }
            PipelineError::CheckpointMismatch => {
                write!(f, "rewind checkpoint config does not match the model")
            }
            PipelineError::Task(e) => write!(f, "task error: {e}"),
            PipelineError::Config(e) => write!(f, "config error: {e}"),
            PipelineError::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
            PipelineError::Model(e) => write!(f, "model error: {e}"),
        }
    }
}

impl core::error::Error for PipelineError {}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        PipelineError::Task(e)
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e)
    }
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        PipelineError::Checkpoint(e)
    }
}

impl From<NumericsError> for PipelineError {
    fn from(e: NumericsError) -> Self {
        PipelineError::Model(e)
    }
}

// ── training ──

/// One Adam step over the backbone on one sample. Returns the loss before
/// the update.
fn adam_step(
    model: &mut Model,
    opt: &mut Adam,
    sample: &Sample,
    step: usize,
) -> Result<f64, PipelineError> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &sample.tokens, Some(&sample.targets), Trainable::All)?;
    let loss_node = fwd.loss.expect("targets were given");
    let loss = g.value(loss_node).item();
    if !loss.is_finite() {
        return Err(PipelineError::Diverged { step });
    }
    g.backward(loss_node)?;
    opt.begin_step();
    let mut slot = 0;
    let mut finite = true;
    model.visit_params_mut(&mut |_, t| {
        if let Some(grad) = g.grad(fwd.backbone_nodes[slot]) {
            opt.update(slot, t.data_mut(), grad);
        }
        finite &= t.all_finite();
        slot += 1;
    });
    if !finite {
        return Err(PipelineError::Diverged { step });
    }
    Ok(loss)
}

fn backbone_sizes(model: &Model) -> Vec<usize> {
    let mut sizes = Vec::new();
    model.visit_params(&mut |_, t| sizes.push(t.numel()));
    sizes
}

/// Trains all parameters for `steps` Adam steps, cycling `data` round-robin.
/// Returns the last step's loss.
pub fn train_steps(
    model: &mut Model,
    data: &[Sample],
    steps: usize,
    lr: f64,
) -> Result<f64, PipelineError> {
    if steps == 0 {
        return Err(PipelineError::NoSteps);
    }
    if data.is_empty() {
        return Err(PipelineError::EmptyData);
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        &backbone_sizes(model),
    );
    let mut last = 0.0;
    for step in 0..steps {
        last = adam_step(model, &mut opt, &data[step % data.len()], step)?;
    }
    Ok(last)
}

/// A trained model plus the serialized warmup state it can be rewound to.
pub struct TrainOutcome {
    pub model: Model,
    /// Checkpoint bytes captured after `warmup_steps` optimizer steps.
    pub warmup: Vec<u8>,
    pub final_loss: f64,
}

/// Trains `model` from scratch for `total_steps`, snapshotting the rewind
/// checkpoint after `warmup_steps` (0 snapshots the initialization). One
/// continuous Adam run; the snapshot does not disturb optimizer state.
pub fn train_model(
    mut model: Model,
    data: &[Sample],
    warmup_steps: usize,
    total_steps: usize,
    lr: f64,
) -> Result<TrainOutcome, PipelineError> {
    if total_steps == 0 {
        return Err(PipelineError::NoSteps);
    }
    if warmup_steps >= total_steps {
        return Err(PipelineError::BadSchedule {
            warmup: warmup_steps,
            total: total_steps,
        });
    }
    if data.is_empty() {
        return Err(PipelineError::EmptyData);
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        &backbone_sizes(&model),
    );
    let mut warmup = None;
    let mut final_loss = 0.0;
    for step in 0..total_steps {
        if step == warmup_steps {
            warmup = Some(encode_model(&model));
        }
        final_loss = adam_step(&mut model, &mut opt, &data[step % data.len()], step)?;
    }
    Ok(TrainOutcome {
        model,
        warmup: warmup.expect("warmup_steps < total_steps"),
        final_loss,
    })
}

// ── calibration ──

/// Final gate values and the layer ranking they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Blend weight per layer, each in (0,1).
    pub alphas: Vec<f64>,
    /// Layer indices sorted by ascending alpha; ties keep the lower index
    /// first. The front of this list is what gets sparsified.
    pub ranking: Vec<usize>,
    pub steps_run: usize,
    pub final_loss: f64,
}

/// Trains only the per-layer blend gates (backbone frozen bit-for-bit) on
/// `data`, with every layer running both attention branches. Reports the
/// final gate values and ranking; the model comes back with all modes Full
/// and gates reset, so calibration is a pure measurement.
///
/// `l1_lambda` adds `λ·Σ α` to the loss (0 disables). `distill` swaps the
/// task loss for mean squared error against the dense model's own logits.
pub fn calibrate(
    model: &mut Model,
    pattern: SparsePattern,
    data: &[Sample],
    steps: usize,
    lr: f64,
    l1_lambda: f64,
    distill: bool,
) -> Result<CalibrationResult, PipelineError> {
    if steps == 0 {
        return Err(PipelineError::NoSteps);
    }
    if data.is_empty() {
        return Err(PipelineError::EmptyData);
    }
    if let Some(layer) = model.modes.iter().position(|m| !matches!(m, LayerMode::Full)) {
        return Err(PipelineError::ModesNotFull { layer });
    }
    let n_layers = model.config.n_layers;

    // The distillation target is the dense model's output, computed before
    // any mode is switched.
    let refs: Vec<Option<Tensor>> = if distill {
        data.iter()
            .map(|s| model.forward_inference(&s.tokens).map(Some))
            .collect::<Result<_, _>>()?
    } else {
        vec![None; data.len()]
    };

    for mode in model.modes.iter_mut() {
        *mode = LayerMode::Blended { pattern };
    }
    for gate in model.gates.iter_mut() {
        *gate = Tensor::scalar(0.0); // α = 0.5: both branches heard equally
    }

    let mut opt = Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        &vec![1; n_layers],
    );
    let mut final_loss = 0.0;
    for step in 0..steps {
        let idx = step % data.len();
        let sample = &data[idx];
        let mut g = Graph::new();
        let fwd = model.forward(
            &mut g,
            &sample.tokens,
            (!distill).then_some(sample.targets.as_slice()),
            Trainable::Gates,
        )?;
        let task = match &refs[idx] {
            Some(target) => {
                // MSE against the frozen dense logits.
                let t = g.leaf(target.clone());
                let neg = g.scale(t, -1.0);
                let diff = g.add(fwd.logits, neg)?;
                let sq = g.mul(diff, diff)?;
                let s = g.sum(sq);
                g.scale(s, 1.0 / target.numel() as f64)
            }
            None => fwd.loss.expect("targets were given"),
        };
        let loss_node = if l1_lambda != 0.0 {
            let mut acc = None;
            for raw in fwd.gate_nodes.iter() {
                let a = g.sigmoid(raw.expect("every layer is blended"));
                acc = Some(match acc {
                    None => a,
                    Some(prev) => g.add(prev, a)?,
                });
            }
            let pen = g.scale(acc.expect("n_layers >= 1"), l1_lambda);
            g.add(task, pen)?
        } else {
            task
        };
        final_loss = g.value(loss_node).item();
        if !final_loss.is_finite() {
            return Err(PipelineError::Diverged { step });
        }
        g.backward(loss_node)?;
        opt.begin_step();
        for (slot, raw) in fwd.gate_nodes.iter().enumerate() {
            let raw = raw.expect("every layer is blended");
            if let Some(grad) = g.grad(raw) {
                opt.update(slot, model.gates[slot].data_mut(), grad);
            }
        }
    }

    let alphas = model.alphas();
    let mut ranking: Vec<usize> = (0..n_layers).collect();
    // Stable sort: equal alphas keep ascending index order.
    ranking.sort_by(|&a, &b| alphas[a].partial_cmp(&alphas[b]).expect("sigmoid is finite"));

    for mode in model.modes.iter_mut() {
        *mode = LayerMode::Full;
    }
    for gate in model.gates.iter_mut() {
        *gate = Tensor::scalar(0.0);
    }
    Ok(CalibrationResult {
        alphas,
        ranking,
        steps_run: steps,
        final_loss,
    })
}

// ── selection ──

/// Sets `selection` layers to streaming-sparse and everything else to Full.
/// Parameters are untouched; only the dispatch changes.
pub fn apply_selection(model: &mut Model, selection: &[usize], pattern: SparsePattern) {
    for mode in model.modes.iter_mut() {
        *mode = LayerMode::Full;
    }
    for &layer in selection {
        assert!(layer < model.config.n_layers, "selection index out of range");
        model.modes[layer] = LayerMode::Sparse { pattern };
    }
}

/// Sparsifies the `⌊ratio·n_layers⌋` layers at the front of `ranking` (the
/// lowest-gated ones) and returns that selection.
pub fn sparsify(
    model: &mut Model,
    ranking: &[usize],
    ratio: f64,
    pattern: SparsePattern,
) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&ratio), "ratio must be in [0, 1]");
    assert_eq!(ranking.len(), model.config.n_layers, "ranking covers all layers");
    let k = ((ratio * ranking.len() as f64) as usize).min(ranking.len());
    let selection = ranking[..k].to_vec();
    apply_selection(model, &selection, pattern);
    selection
}

/// The hand-crafted baseline: sparsify one of every two adjacent layers
/// (the odd indices). A single layer has no second adjacent layer, so the
/// selection is empty.
pub fn interleaved_selection(n_layers: usize) -> Vec<usize> {
    (1..n_layers).step_by(2).collect()
}

/// Restores the warmup checkpoint bit-for-bit, applies `selection` as
/// sparse layers and retrains every parameter for `steps`. `steps == 0`
/// returns the rewound model untouched.
pub fn rewind_and_train(
    w0: &[u8],
    expected: &ModelConfig,
    selection: &[usize],
    pattern: SparsePattern,
    data: &[Sample],
    steps: usize,
    lr: f64,
) -> Result<Model, PipelineError> {
    let mut model = decode_model(w0)?;
    if model.config != *expected {
        return Err(PipelineError::CheckpointMismatch);
    }
    apply_selection(&mut model, selection, pattern);
    if steps > 0 {
        train_steps(&mut model, data, steps, lr)?;
    }
    Ok(model)
}

// ── evaluation ──

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of scored positions whose argmax logit equals the target.
pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64, NumericsError> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in samples {
        let logits = model.forward_inference(&s.tokens)?;
        let v = logits.cols();
        for i in s.scored_positions() {
            if argmax(&logits.data()[i * v..(i + 1) * v]) == s.targets[i] {
                hits += 1;
            }
            total += 1;
        }
    }
    assert!(total > 0, "no scored positions in the evaluation set");
    Ok(hits as f64 / total as f64)
}

/// Mean next-token cross-entropy over the evaluation sequences.
pub fn mean_lm_loss(model: &Model, samples: &[Sample]) -> Result<f64, NumericsError> {
    assert!(!samples.is_empty(), "empty evaluation set");
    let mut total = 0.0;
    for s in samples {
        total += model.lm_loss(&s.tokens)?;
    }
    Ok(total / samples.len() as f64)
}

// ── pilot protocol ──

/// Everything the five-variant comparison needs. The short task is a
/// within-window grammar walk; the long task is passkey retrieval with the
/// needle outside the streaming window, so only layers that really carry
/// long-range information are penalized by sparsification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotConfig {
    pub model: ModelConfig,
    pub pattern: SparsePattern,
    /// Fraction of layers to sparsify after calibration.
    pub sparsify_ratio: f64,
    pub warmup_steps: usize,
    pub train_steps: usize,
    /// Retraining budget after rewind, identical for every trained variant.
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
}

/// Metrics for the five pilot variants, flat for JSON output. Accuracies
/// are in [0,1]; `*_trained` variants were rewound and retrained with the
/// same budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotReport {
    pub full_lm_loss: f64,
    pub full_short_task_acc: f64,
    pub full_long_task_acc: f64,
    pub interleaved_lm_loss: f64,
    pub interleaved_short_task_acc: f64,
    pub interleaved_long_task_acc: f64,
    pub interleaved_trained_lm_loss: f64,
    pub interleaved_trained_short_task_acc: f64,
    pub interleaved_trained_long_task_acc: f64,
    pub calibrated_lm_loss: f64,
    pub calibrated_short_task_acc: f64,
    pub calibrated_long_task_acc: f64,
    pub calibrated_trained_lm_loss: f64,
    pub calibrated_trained_short_task_acc: f64,
    pub calibrated_trained_long_task_acc: f64,
}

impl PilotReport {
    fn zero() -> Self {
        PilotReport {
            full_lm_loss: 0.0,
            full_short_task_acc: 0.0,
            full_long_task_acc: 0.0,
            interleaved_lm_loss: 0.0,
            interleaved_short_task_acc: 0.0,
            interleaved_long_task_acc: 0.0,
            interleaved_trained_lm_loss: 0.0,
            interleaved_trained_short_task_acc: 0.0,
            interleaved_trained_long_task_acc: 0.0,
            calibrated_lm_loss: 0.0,
            calibrated_short_task_acc: 0.0,
            calibrated_long_task_acc: 0.0,
            calibrated_trained_lm_loss: 0.0,
            calibrated_trained_short_task_acc: 0.0,
            calibrated_trained_long_task_acc: 0.0,
        }
    }

    fn for_each_field(&mut self, mut f: impl FnMut(&mut f64)) {
        f(&mut self.full_lm_loss);
        f(&mut self.full_short_task_acc);
        f(&mut self.full_long_task_acc);
        f(&mut self.interleaved_lm_loss);
        f(&mut self.interleaved_short_task_acc);
        f(&mut self.interleaved_long_task_acc);
        f(&mut self.interleaved_trained_lm_loss);
        f(&mut self.interleaved_trained_short_task_acc);
        f(&mut self.interleaved_trained_long_task_acc);
        f(&mut self.calibrated_lm_loss);
        f(&mut self.calibrated_short_task_acc);
        f(&mut self.calibrated_long_task_acc);
        f(&mut self.calibrated_trained_lm_loss);
        f(&mut self.calibrated_trained_short_task_acc);
        f(&mut self.calibrated_trained_long_task_acc);
    }
}

/// Alternating grammar/passkey stream: even slots short-range, odd slots
/// long-range, so every training phase sees both dependencies.
pub fn mixed_stream(
    n: usize,
    grammar_len: usize,
    pk: &PasskeyConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                grammar_sample(grammar_len, rng)
            } else {
                passkey_sample(pk, rng)
            }
        })
        .collect()
}

fn eval_triple(
    model: &Model,
    grammar: &[Sample],
    passkey: &[Sample],
) -> Result<(f64, f64, f64), NumericsError> {
    Ok((
        mean_lm_loss(model, grammar)?,
        accuracy(model, grammar)?,
        accuracy(model, passkey)?,
    ))
}

/// One full protocol run under one seed: train the dense base (capturing
/// the rewind checkpoint), then measure it, the interleaved-sparsified
/// model, its retrained form, the calibration-sparsified model, and its
/// retrained form.
pub fn pilot_single(cfg: &PilotConfig, seed: u64) -> Result<PilotReport, PipelineError> {
    cfg.passkey.validate_against(&cfg.pattern)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let model_seed: u64 = master.random();
    let train_seed: u64 = master.random();
    let calib_seed: u64 = master.random();
    let eval_seed: u64 = master.random();

    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = model_seed;
    let model = Model::build(model_cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_seed);
    let train = mixed_stream(cfg.train_samples, cfg.grammar_len, &cfg.passkey, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(calib_seed);
    let calib_data = mixed_stream(cfg.calib_samples, cfg.grammar_len, &cfg.passkey, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let eval_grammar: Vec<Sample> = (0..cfg.eval_samples)
        .map(|_| grammar_sample(cfg.grammar_len, &mut rng))
        .collect();
    let eval_passkey: Vec<Sample> = (0..cfg.eval_samples)
        .map(|_| passkey_sample(&cfg.passkey, &mut rng))
        .collect();

    let outcome = train_model(model, &train, cfg.warmup_steps, cfg.train_steps, cfg.lr)?;
    let full = outcome.model;
    let w0 = outcome.warmup;
    let (full_lm, full_short, full_long) = eval_triple(&full, &eval_grammar, &eval_passkey)?;

    let inter_sel = interleaved_selection(cfg.model.n_layers);
    let mut interleaved = full.clone();
    apply_selection(&mut interleaved, &inter_sel, cfg.pattern);
    let (int_lm, int_short, int_long) = eval_triple(&interleaved, &eval_grammar, &eval_passkey)?;

    let interleaved_trained = rewind_and_train(
        &w0,
        &full.config,
        &inter_sel,
        cfg.pattern,
        &train,
        cfg.sparse_train_steps,
        cfg.lr,
    )?;
    let (int_t_lm, int_t_short, int_t_long) =
        eval_triple(&interleaved_trained, &eval_grammar, &eval_passkey)?;

    let mut calibrated = full.clone();
    let calib = calibrate(
        &mut calibrated,
        cfg.pattern,
        &calib_data,
        cfg.calib_steps,
        cfg.calib_lr,
        cfg.l1_lambda,
        cfg.distill,
    )?;
    let calib_sel = sparsify(&mut calibrated, &calib.ranking, cfg.sparsify_ratio, cfg.pattern);
    let (cal_lm, cal_short, cal_long) = eval_triple(&calibrated, &eval_grammar, &eval_passkey)?;

    let calibrated_trained = rewind_and_train(
        &w0,
        &full.config,
        &calib_sel,
        cfg.pattern,
        &train,
        cfg.sparse_train_steps,
        cfg.lr,
    )?;
    let (cal_t_lm, cal_t_short, cal_t_long) =
        eval_triple(&calibrated_trained, &eval_grammar, &eval_passkey)?;

    Ok(PilotReport {
        full_lm_loss: full_lm,
        full_short_task_acc: full_short,
        full_long_task_acc: full_long,
        interleaved_lm_loss: int_lm,
        interleaved_short_task_acc: int_short,
        interleaved_long_task_acc: int_long,
        interleaved_trained_lm_loss: int_t_lm,
        interleaved_trained_short_task_acc: int_t_short,
        interleaved_trained_long_task_acc: int_t_long,
        calibrated_lm_loss: cal_lm,
        calibrated_short_task_acc: cal_short,
        calibrated_long_task_acc: cal_long,
        calibrated_trained_lm_loss: cal_t_lm,
        calibrated_trained_short_task_acc: cal_t_short,
        calibrated_trained_long_task_acc: cal_t_long,
    })
}

/// Runs [`pilot_single`] per seed and averages every metric, in the order
/// the seeds are given (deterministic aggregation).
pub fn run_pilot(cfg: &PilotConfig, seeds: &[u64]) -> Result<PilotReport, PipelineError> {
    if seeds.is_empty() {
        return Err(PipelineError::NoSeeds);
    }
    let mut mean = PilotReport::zero();
    for &seed in seeds {
        let r = pilot_single(cfg, seed)?;
        let mut fields = Vec::new();
        let mut r = r;
        r.for_each_field(|f| fields.push(*f));
        let mut i = 0;
        mean.for_each_field(|f| {
            *f += fields[i];
            i += 1;
        });
    }
    let k = seeds.len() as f64;
    mean.for_each_field(|f| *f /= k);
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VOCAB_SIZE;

    fn tiny_config(n_layers: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            latent_dim: None,
            ffn_dim: 16,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 32,
            seed,
        }
    }

    fn grammar_batch(n: usize, len: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| grammar_sample(len, &mut rng)).collect()
    }

    #[test]
    fn calibration_is_inert_when_the_window_covers_the_sequence() {
        // Sequences shorter than the window make both branches identical,
        // so gate gradients are exactly zero and α never leaves 0.5.
        let mut m = Model::build(tiny_config(3, 11)).unwrap();
        let before = m.param_digest();
        let data = grammar_batch(2, 16, 1);
        let p = SparsePattern::desk(); // window 64 > 16
        let r = calibrate(&mut m, p, &data, 5, 0.05, 0.0, false).unwrap();
        assert_eq!(r.alphas, vec![0.5; 3]);
        assert_eq!(r.ranking, vec![0, 1, 2], "ties break toward lower index");
        assert_eq!(r.steps_run, 5);
        assert_eq!(m.param_digest(), before, "backbone frozen");
        assert!(m.modes.iter().all(|mo| matches!(mo, LayerMode::Full)));
        assert!(m.gates.iter().all(|g| g.item() == 0.0), "gates reset");
    }

    #[test]
    fn calibration_moves_gates_when_branches_differ() {
        let mut m = Model::build(tiny_config(2, 3)).unwrap();
        let before = m.param_digest();
        // Window 4 ≪ 24: sparse and full branches genuinely differ.
        let p = SparsePattern::new(1, 1, 2).unwrap();
        let data = grammar_batch(2, 24, 2);
        let r = calibrate(&mut m, p, &data, 8, 0.1, 0.0, false).unwrap();
        assert_eq!(m.param_digest(), before);
        assert!(r.alphas.iter().any(|&a| a != 0.5), "some gate moved");
        assert!(r.alphas.iter().all(|&a| a > 0.0 && a < 1.0));
        let mut sorted = r.ranking.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1], "ranking is a permutation");
    }

    #[test]
    fn calibration_distillation_path_runs_frozen() {
        let mut m = Model::build(tiny_config(2, 9)).unwrap();
        let before = m.param_digest();
        let p = SparsePattern::new(1, 1, 2).unwrap();
        let data = grammar_batch(2, 20, 7);
        let r = calibrate(&mut m, p, &data, 6, 0.1, 0.01, true).unwrap();
        assert_eq!(m.param_digest(), before);
        assert!(r.final_loss.is_finite());
        assert!(r.alphas.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn calibration_contract_errors() {
        let mut m = Model::build(tiny_config(2, 4)).unwrap();
        let p = SparsePattern::desk();
        let data = grammar_batch(1, 12, 3);
        assert!(matches!(
            calibrate(&mut m, p, &data, 0, 0.1, 0.0, false),
            Err(PipelineError::NoSteps)
        ));
        assert!(matches!(
            calibrate(&mut m, p, &[], 3, 0.1, 0.0, false),
            Err(PipelineError::EmptyData)
        ));
        m.modes[1] = LayerMode::Sparse { pattern: p };
        assert!(matches!(
            calibrate(&mut m, p, &data, 3, 0.1, 0.0, false),
            Err(PipelineError::ModesNotFull { layer: 1 })
        ));
    }

    #[test]
    fn sparsify_takes_the_ranking_prefix() {
        let mut m = Model::build(tiny_config(8, 5)).unwrap();
        let before = m.param_digest();
        let ranking = vec![3, 1, 0, 2, 7, 6, 5, 4];
        let p = SparsePattern::desk();

        let sel = sparsify(&mut m, &ranking, 0.5, p);
        assert_eq!(sel, vec![3, 1, 0, 2]);
        let sparse: Vec<usize> = (0..8).filter(|&i| m.modes[i].is_sparse()).collect();
        assert_eq!(sparse, vec![0, 1, 2, 3]);
        assert_eq!(m.param_digest(), before, "modes only, parameters untouched");

        assert!(sparsify(&mut m, &ranking, 0.0, p).is_empty());
        assert!(m.modes.iter().all(|mo| matches!(mo, LayerMode::Full)));

        assert_eq!(sparsify(&mut m, &ranking, 1.0, p).len(), 8);
        assert!(m.modes.iter().all(|mo| mo.is_sparse()));
    }

    #[test]
    fn interleaved_selection_picks_odd_indices() {
        assert_eq!(interleaved_selection(4), vec![1, 3]);
        assert!(interleaved_selection(1).is_empty());
        let s = interleaved_selection(8);
        assert_eq!(s.len(), 4);
        assert!(s.windows(2).all(|w| w[1] - w[0] == 2), "never adjacent");
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_corpus() {
        let m = Model::build(tiny_config(2, 6)).unwrap();
        let data = grammar_batch(2, 24, 5);
        let initial = mean_lm_loss(&m, &data).unwrap();
        let out = train_model(m, &data, 2, 50, 1e-2).unwrap();
        let trained = mean_lm_loss(&out.model, &data).unwrap();
        assert!(
            trained < initial,
            "loss should drop: {initial} -> {trained}"
        );
        assert!(out.final_loss.is_finite());
    }

    #[test]
    fn zero_step_rewind_restores_warmup_bitwise() {
        let m = Model::build(tiny_config(2, 8)).unwrap();
        let data = grammar_batch(2, 20, 9);
        let out = train_model(m, &data, 3, 8, 1e-2).unwrap();
        let w0_model = decode_model(&out.warmup).unwrap();
        assert_ne!(
            w0_model.param_digest(),
            out.model.param_digest(),
            "training after warmup changed something"
        );
        let p = SparsePattern::desk();
        let rewound =
            rewind_and_train(&out.warmup, &out.model.config, &[0], p, &data, 0, 1e-2).unwrap();
        assert_eq!(rewound.param_digest(), w0_model.param_digest());
        assert!(matches!(rewound.modes[0], LayerMode::Sparse { .. }));
        assert!(matches!(rewound.modes[1], LayerMode::Full));
    }

    #[test]
    fn rewind_rejects_mismatched_config() {
        let m = Model::build(tiny_config(2, 8)).unwrap();
        let data = grammar_batch(2, 20, 9);
        let out = train_model(m, &data, 1, 3, 1e-2).unwrap();
        let other = tiny_config(3, 8);
        assert!(matches!(
            rewind_and_train(
                &out.warmup,
                &other,
                &[],
                SparsePattern::desk(),
                &data,
                0,
                1e-2
            ),
            Err(PipelineError::CheckpointMismatch)
        ));
    }

    #[test]
    fn train_schedule_contracts() {
        let m = Model::build(tiny_config(2, 8)).unwrap();
        let data = grammar_batch(1, 12, 1);
        assert!(matches!(
            train_model(m.clone(), &data, 0, 0, 1e-2),
            Err(PipelineError::NoSteps)
        ));
        assert!(matches!(
            train_model(m.clone(), &data, 5, 5, 1e-2),
            Err(PipelineError::BadSchedule { .. })
        ));
        assert!(matches!(
            train_model(m, &[], 0, 2, 1e-2),
            Err(PipelineError::EmptyData)
        ));
    }

    fn micro_pilot_config() -> PilotConfig {
        PilotConfig {
            model: ModelConfig {
                max_seq_len: 24,
                ..tiny_config(2, 0)
            },
            pattern: SparsePattern::new(1, 1, 2).unwrap(),
            sparsify_ratio: 0.5,
            warmup_steps: 1,
            train_steps: 4,
            sparse_train_steps: 2,
            calib_steps: 2,
            lr: 1e-2,
            calib_lr: 0.1,
            l1_lambda: 0.0,
            distill: false,
            grammar_len: 12,
            passkey: PasskeyConfig {
                seq_len: 24,
                needle_pos: 5,
                digits: 1,
            },
            train_samples: 4,
            calib_samples: 2,
            eval_samples: 2,
        }
    }

    #[test]
    fn pilot_is_deterministic_and_in_range() {
        let cfg = micro_pilot_config();
        let a = run_pilot(&cfg, &[7]).unwrap();
        let b = run_pilot(&cfg, &[7]).unwrap();
        assert_eq!(a, b, "same seed, same report");
        let mut a2 = a.clone();
        a2.for_each_field(|f| assert!(f.is_finite()));
        for acc in [
            a.full_short_task_acc,
            a.full_long_task_acc,
            a.interleaved_short_task_acc,
            a.interleaved_long_task_acc,
            a.interleaved_trained_short_task_acc,
            a.interleaved_trained_long_task_acc,
            a.calibrated_short_task_acc,
            a.calibrated_long_task_acc,
            a.calibrated_trained_short_task_acc,
            a.calibrated_trained_long_task_acc,
        ] {
            assert!((0.0..=1.0).contains(&acc), "accuracy {acc} out of range");
        }
    }

    #[test]
    fn pilot_mean_averages_seeds() {
        let cfg = micro_pilot_config();
        let a = pilot_single(&cfg, 1).unwrap();
        let b = pilot_single(&cfg, 2).unwrap();
        let mean = run_pilot(&cfg, &[1, 2]).unwrap();
        assert!((mean.full_lm_loss - (a.full_lm_loss + b.full_lm_loss) / 2.0).abs() < 1e-15);
        assert!(matches!(run_pilot(&cfg, &[]), Err(PipelineError::NoSeeds)));
    }
}
