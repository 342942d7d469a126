//! `loza` — train, calibrate, sparsify and cost a small blended-attention
//! transformer from one JSON config.
//!
//! Every subcommand is a pure function of (config, input files, seed):
//! run it twice with the same inputs and the outputs are byte-identical.
//! Exit codes: 0 success, 1 contract violation (bad flags, bad config,
//! missing prerequisite artifacts), 2 I/O or integrity failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use loza_core::checkpoint::{decode_model, encode_model, CheckpointError};
use loza_core::costmodel::{
    cost_report, decode_kv_reads, rank_balance, Phase, RankAssignment, RankBalance,
};
use loza_core::data::grammar_sample;
use loza_core::pipeline::{
    calibrate, mean_lm_loss, mixed_stream, rewind_and_train, run_pilot, sparsify, train_model,
    CalibrationResult, PipelineError,
};
use loza_core::pipeline::accuracy;
use loza_core::runtime::{Decoder, RuntimeError};
use loza_core::model::ConfigError;
use loza_core::tensor::NumericsError;
use loza_core::{LayerMode, Model, ModelConfig, SparsePattern};

use config::FileConfig;

// ── errors and exit codes ──

#[derive(Debug)]
enum CliError {
    /// The invocation or its inputs violate a documented precondition.
    Contract(String),
    /// Reading, writing, or decoding an artifact failed.
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Contract(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Contract(m) | CliError::Io(m) => write!(f, "{m}"),
        }
    }
}

fn contract(msg: impl Into<String>) -> CliError {
    CliError::Contract(msg.into())
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            // A corrupt checkpoint is an artifact-integrity failure; every
            // other pipeline error is a violated precondition.
            PipelineError::Checkpoint(inner) => CliError::Io(inner.to_string()),
            other => CliError::Contract(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Contract(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Contract(e.to_string())
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        CliError::Contract(e.to_string())
    }
}

// ── argument surface ──

#[derive(Parser)]
#[command(
    name = "loza",
    about = "Desk-scale laboratory for calibrated attention sparsification",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config (sections: model, pattern, train, calibrate,
    /// pilot, bench).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input model checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's model seed; all randomness flows from it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SelectionArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Calibration result JSON produced by `calibrate`.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the dense model; writes `<out>` and the rewind point `<out>.w0`.
    Train(CommonArgs),
    /// Train only the blend gates on a frozen checkpoint; writes the gate
    /// values and layer ranking as JSON.
    Calibrate(CommonArgs),
    /// Convert the lowest-gated layers of a checkpoint to streaming sparse
    /// attention.
    Sparsify(SelectionArgs),
    /// Rewind to a warmup checkpoint, apply the calibrated selection, and
    /// retrain everything.
    RewindTrain(SelectionArgs),
    /// Report lm loss and short/long task accuracy for a checkpoint.
    Eval(CommonArgs),
    /// Run the five-variant comparison and write the mean report.
    RunPilot(CommonArgs),
    /// Write the analytic cost sweep as CSV plus a rank-balance summary.
    BenchCost(CommonArgs),
    /// Greedy-decode from a checkpoint, streaming per-step KV costs as TSV.
    DecodeDemo(CommonArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; anything else is a usage
            // error and exits 1.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Calibrate(a) => cmd_calibrate(&a),
        Cmd::Sparsify(a) => cmd_sparsify(&a),
        Cmd::RewindTrain(a) => cmd_rewind_train(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::RunPilot(a) => cmd_run_pilot(&a),
        Cmd::BenchCost(a) => cmd_bench_cost(&a),
        Cmd::DecodeDemo(a) => cmd_decode_demo(&a),
    }
}

// ── shared plumbing ──

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    let path = path
        .as_ref()
        .ok_or_else(|| contract("this command needs --config <file>"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| contract(format!("config {}: {e}", path.display())))
}

fn load_model(path: &Option<PathBuf>, what: &str) -> Result<Model, CliError> {
    let path = path
        .as_ref()
        .ok_or_else(|| contract(format!("{what} needs --checkpoint <model>")))?;
    let bytes = fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    Ok(decode_model(&bytes)?)
}

fn want_out<'a>(args: &'a CommonArgs, what: &str) -> Result<&'a Path, CliError> {
    args.out
        .as_deref()
        .ok_or_else(|| contract(format!("{what} needs --out <file>")))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn require<T>(section: &Option<T>, name: &str) -> Result<T, CliError>
where
    T: Clone,
{
    section
        .clone()
        .ok_or_else(|| contract(format!("config is missing the `{name}` section")))
}

/// Per-purpose seeds drawn in a fixed order from the one user seed, so
/// training, calibration and evaluation data never share a stream.
struct SubSeeds {
    model: u64,
    train: u64,
    calib: u64,
    eval: u64,
}

fn sub_seeds(seed: u64) -> SubSeeds {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    SubSeeds {
        model: master.random(),
        train: master.random(),
        calib: master.random(),
        eval: master.random(),
    }
}

fn effective_seed(args: &CommonArgs, cfg: &FileConfig) -> u64 {
    args.seed
        .or_else(|| cfg.model.as_ref().map(|m| m.seed))
        .unwrap_or(0)
}

fn pattern_or_desk(cfg: &FileConfig) -> SparsePattern {
    cfg.pattern.unwrap_or_else(SparsePattern::desk)
}

/// The checkpoint must have the architecture the config describes; the
/// stored seed is provenance, not shape, so it is not compared.
fn check_architecture(want: &ModelConfig, actual: &ModelConfig) -> Result<(), CliError> {
    let mut want = want.clone();
    want.seed = actual.seed;
    if want != *actual {
        return Err(contract(
            "checkpoint architecture differs from the config's `model` section",
        ));
    }
    Ok(())
}

fn load_calibration(path: &Option<PathBuf>, model: &Model) -> Result<CalibrationResult, CliError> {
    let path = path.as_ref().ok_or_else(|| {
        contract(
            "no calibration result given: run `calibrate` first and pass its \
             output as --calibration <file>",
        )
    })?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let result: CalibrationResult = serde_json::from_str(&text)
        .map_err(|e| CliError::Io(format!("calibration result {}: {e}", path.display())))?;

    let n = model.config.n_layers;
    let mut seen = vec![false; n];
    for &layer in &result.ranking {
        if layer >= n || seen[layer] {
            return Err(contract(format!(
                "calibration ranking is not a permutation of the model's {n} layers"
            )));
        }
        seen[layer] = true;
    }
    if result.ranking.len() != n {
        return Err(contract(format!(
            "calibration ranking covers {} layers, the checkpoint has {n}",
            result.ranking.len()
        )));
    }
    Ok(result)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ── subcommands ──

fn cmd_train(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let model_sec = require(&cfg.model, "model")?;
    let train_sec = require(&cfg.train, "train")?;
    let pattern = pattern_or_desk(&cfg);
    train_sec
        .passkey
        .validate_against(&pattern)
        .map_err(|e| contract(e.to_string()))?;

    let seeds = sub_seeds(effective_seed(args, &cfg));
    let mut model_cfg = model_sec;
    model_cfg.seed = seeds.model;
    let model = Model::build(model_cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seeds.train);
    let data = mixed_stream(
        train_sec.train_samples,
        train_sec.grammar_len,
        &train_sec.passkey,
        &mut rng,
    );
    let outcome = train_model(
        model,
        &data,
        train_sec.warmup_steps,
        train_sec.total_steps,
        train_sec.lr,
    )?;

    let out = want_out(args, "train")?;
    let w0_path = PathBuf::from(format!("{}.w0", out.display()));
    write_bytes(out, &encode_model(&outcome.model))?;
    write_bytes(&w0_path, &outcome.warmup)?;
    println!(
        "trained {} steps (warmup snapshot at {}), final loss {:.6}",
        train_sec.total_steps, train_sec.warmup_steps, outcome.final_loss
    );
    println!("wrote {} and {}", out.display(), w0_path.display());
    Ok(())
}

fn cmd_calibrate(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let model_sec = require(&cfg.model, "model")?;
    let train_sec = require(&cfg.train, "train")?;
    let cal_sec = require(&cfg.calibrate, "calibrate")?;
    let pattern = pattern_or_desk(&cfg);

    let mut model = load_model(&args.checkpoint, "calibrate")?;
    check_architecture(&model_sec, &model.config)?;

    let seeds = sub_seeds(effective_seed(args, &cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.calib);
    let data = mixed_stream(
        cal_sec.samples,
        train_sec.grammar_len,
        &train_sec.passkey,
        &mut rng,
    );
    let result = calibrate(
        &mut model,
        pattern,
        &data,
        cal_sec.steps,
        cal_sec.lr,
        cal_sec.l1_lambda,
        cal_sec.distill,
    )?;

    let out = want_out(args, "calibrate")?;
    write_json(out, &result)?;
    println!(
        "calibrated {} steps, final loss {:.6}",
        result.steps_run, result.final_loss
    );
    println!("ranking (most sparsifiable first): {:?}", result.ranking);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sparsify(args: &SelectionArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common.config)?;
    let cal_sec = require(&cfg.calibrate, "calibrate")?;
    let pattern = pattern_or_desk(&cfg);

    let mut model = load_model(&args.common.checkpoint, "sparsify")?;
    if let Some(model_sec) = &cfg.model {
        check_architecture(model_sec, &model.config)?;
    }
    let calibration = load_calibration(&args.calibration, &model)?;

    let selection = sparsify(
        &mut model,
        &calibration.ranking,
        cal_sec.sparsify_ratio,
        pattern,
    );
    let out = want_out(&args.common, "sparsify")?;
    write_bytes(out, &encode_model(&model))?;
    println!(
        "sparsified {} of {} layers: {:?}",
        selection.len(),
        model.config.n_layers,
        selection
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_rewind_train(args: &SelectionArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common.config)?;
    let model_sec = require(&cfg.model, "model")?;
    let train_sec = require(&cfg.train, "train")?;
    let cal_sec = require(&cfg.calibrate, "calibrate")?;
    let pattern = pattern_or_desk(&cfg);

    let w0_path = args
        .common
        .checkpoint
        .as_ref()
        .ok_or_else(|| contract("rewind-train needs --checkpoint <warmup checkpoint>"))?;
    let w0 = fs::read(w0_path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", w0_path.display())))?;
    // The ranking permutation check needs the layer count before training,
    // so peek at the rewound model first.
    let rewound = decode_model(&w0)?;
    let calibration = load_calibration(&args.calibration, &rewound)?;

    let seeds = sub_seeds(effective_seed(&args.common, &cfg));
    let mut expected = model_sec;
    expected.seed = seeds.model;

    let k = (cal_sec.sparsify_ratio * rewound.config.n_layers as f64) as usize;
    let selection = &calibration.ranking[..k.min(calibration.ranking.len())];

    let mut rng = ChaCha8Rng::seed_from_u64(seeds.train);
    let data = mixed_stream(
        train_sec.train_samples,
        train_sec.grammar_len,
        &train_sec.passkey,
        &mut rng,
    );
    let model = rewind_and_train(
        &w0,
        &expected,
        selection,
        pattern,
        &data,
        train_sec.sparse_steps,
        train_sec.lr,
    )?;

    let out = want_out(&args.common, "rewind-train")?;
    write_bytes(out, &encode_model(&model))?;
    println!(
        "rewound and retrained {} steps with sparse layers {:?}",
        train_sec.sparse_steps, selection
    );
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    lm_loss: f64,
    short_task_acc: f64,
    long_task_acc: f64,
}

fn cmd_eval(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let model_sec = require(&cfg.model, "model")?;
    let train_sec = require(&cfg.train, "train")?;

    let model = load_model(&args.checkpoint, "eval")?;
    check_architecture(&model_sec, &model.config)?;

    let seeds = sub_seeds(effective_seed(args, &cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.eval);
    let grammar: Vec<_> = (0..train_sec.eval_samples)
        .map(|_| grammar_sample(train_sec.grammar_len, &mut rng))
        .collect();
    let passkey: Vec<_> = (0..train_sec.eval_samples)
        .map(|_| loza_core::data::passkey_sample(&train_sec.passkey, &mut rng))
        .collect();

    let report = EvalReport {
        lm_loss: mean_lm_loss(&model, &grammar)?,
        short_task_acc: accuracy(&model, &grammar)?,
        long_task_acc: accuracy(&model, &passkey)?,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(out) = &args.out {
        write_bytes(out, format!("{text}\n").as_bytes())?;
    }
    Ok(())
}

fn cmd_run_pilot(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let model_sec = require(&cfg.model, "model")?;
    let pilot_sec = require(&cfg.pilot, "pilot")?;
    let pattern = pattern_or_desk(&cfg);

    let seeds = match args.seed {
        Some(s) => vec![s],
        None => pilot_sec.seeds.clone(),
    };
    let pilot_cfg = pilot_sec.assemble(model_sec, pattern);
    let report = run_pilot(&pilot_cfg, &seeds)?;

    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(out) => {
            write_bytes(out, format!("{text}\n").as_bytes())?;
            println!("wrote {}", out.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn balance_json(balance: &RankBalance) -> serde_json::Value {
    serde_json::json!({
        "cv": balance.cv,
        "max_over_mean": balance.max_over_mean,
        "per_rank_flops": balance.per_rank_flops.iter().map(|f| f.to_string()).collect::<Vec<_>>(),
    })
}

fn cmd_bench_cost(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let bench = require(&cfg.bench, "bench")?;
    if bench.context_lens.is_empty() || bench.sparse_fractions.is_empty() {
        return Err(contract(
            "bench needs at least one context length and one sparse fraction",
        ));
    }

    let modes_for = |frac: f64| -> Result<(Vec<LayerMode>, usize), CliError> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(contract(format!("sparse fraction {frac} is not in [0, 1]")));
        }
        let k = (frac * bench.n_layers as f64) as usize;
        let mut modes = vec![
            LayerMode::Sparse {
                pattern: bench.pattern
            };
            k
        ];
        modes.resize(bench.n_layers, LayerMode::Full);
        Ok((modes, k))
    };

    let mut csv = String::from("context_len,phase,mode_mix,attention_flops,kv_rows,ratio_vs_full\n");
    let per_pair_flops = 4 * bench.n_heads as u128 * bench.head_dim as u128;
    for &n in &bench.context_lens {
        for &frac in &bench.sparse_fractions {
            let (modes, k) = modes_for(frac)?;
            let mix = format!("{k}_of_{}_sparse", bench.n_layers);
            for phase in [Phase::Prefill, Phase::Decode] {
                let report = cost_report(n, &modes, bench.n_heads, bench.head_dim, phase);
                // Prefill totals are FLOPs; decode totals are KV rows. The
                // other column follows from the 2-FLOP-per-MAC convention.
                let (flops, rows) = match phase {
                    Phase::Prefill => (report.total, report.total / per_pair_flops),
                    Phase::Decode => (report.total * per_pair_flops, report.total),
                };
                csv.push_str(&format!(
                    "{n},{},{mix},{flops},{rows},{:.6}\n",
                    phase.as_str(),
                    report.ratio_vs_full
                ));
            }
        }
    }

    let out = want_out(args, "bench-cost")?;
    write_bytes(out, csv.as_bytes())?;

    // Rank-balance study at the largest context: the levelled layer split
    // against the worst-case head packing, both on a half-sparse stack.
    let n_bal = *bench.context_lens.iter().max().expect("non-empty");
    let (half, _) = modes_for(0.5)?;
    if bench.balance_ranks == 0
        || bench.n_heads % bench.balance_ranks != 0
        || (bench.n_layers * bench.n_heads) % bench.balance_ranks != 0
    {
        return Err(contract(format!(
            "balance_ranks {} must divide n_heads {} and the head grid",
            bench.balance_ranks, bench.n_heads
        )));
    }
    let layer = RankAssignment::layer_level(&half, bench.n_heads, bench.balance_ranks);
    let heads = RankAssignment::head_level_adversarial(&half, bench.n_heads, bench.balance_ranks);
    let summary = serde_json::json!({
        "context_len": n_bal,
        "n_ranks": bench.balance_ranks,
        "layer_level": balance_json(&rank_balance(&layer, n_bal, bench.head_dim).expect("constructed assignment is valid")),
        "head_level_adversarial": balance_json(&rank_balance(&heads, n_bal, bench.head_dim).expect("constructed assignment is valid")),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn cmd_decode_demo(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = match &args.config {
        Some(_) => load_config(&args.config)?,
        None => FileConfig::default(),
    };
    let pattern = pattern_or_desk(&cfg);
    let model = load_model(&args.checkpoint, "decode-demo")?;

    let max_seq = model.config.max_seq_len;
    let prompt_len = cfg
        .train
        .as_ref()
        .map(|t| t.grammar_len)
        .unwrap_or(32)
        .min(max_seq.saturating_sub(1));
    let steps = 32.min(max_seq - prompt_len);
    if prompt_len == 0 || steps == 0 {
        return Err(contract(format!(
            "model's max_seq_len {max_seq} leaves no room to decode"
        )));
    }

    let seeds = sub_seeds(effective_seed(args, &cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.eval);
    let prompt = grammar_sample(prompt_len, &mut rng).tokens;

    let mut dec = Decoder::new(&model)?;
    let logits = dec.prefill(&prompt)?;
    let vocab = logits.cols();
    let mut next = argmax(&logits.data()[(prompt.len() - 1) * vocab..]);

    let sparse_mode = LayerMode::Sparse { pattern };
    let mut tsv = String::from("position\ttoken\trows_read_full\trows_read_sparse\n");
    for _ in 0..steps {
        let fed = next;
        let row = dec.decode_step(fed)?;
        let t = dec.pos();
        let full_rows = decode_kv_reads(t, &LayerMode::Full);
        let sparse_rows = decode_kv_reads(t, &sparse_mode);
        tsv.push_str(&format!("{t}\t{fed}\t{full_rows}\t{sparse_rows}\n"));
        next = argmax(&row);
    }

    print!("{tsv}");
    if let Some(out) = &args.out {
        write_bytes(out, tsv.as_bytes())?;
    }
    Ok(())
}
