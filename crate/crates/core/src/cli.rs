//! The `imputer` command-line tool.
//!
//! ```text
//! imputer gen-data  --task multimodal --examples 2000 --seed 1 --out train.jsonl
//! imputer train     --config run.toml [--resume ckpt.impx] [--seed N] [--workers N]
//! imputer align     --checkpoint ctc.impx --data train.jsonl --out aligned.jsonl
//! imputer decode    --checkpoint model.impx --data test.jsonl --out hyps.jsonl [--trace t.jsonl]
//! imputer eval      --hyps hyps.jsonl --data test.jsonl
//! imputer selfcheck
//! ```
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
//! (including a failed self-check), 4 infeasible data.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecodeConfig, Strategy};
use crate::dp::ctc_viterbi;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use crate::optim::OptimizerConfig;
use crate::policies::{MaskingPolicy, RollinConfig};
use crate::selfcheck::{run_selfcheck, DpFns, SelfcheckConfig};
use crate::trainer::{
    decode_dataset, fresh_checkpoint, pool, score_hypotheses, train_with, Dataset, ImScoring,
    InfeasiblePolicy, MetricRecord, Objective, SyntheticSpec, Task, TrainConfig,
};
use crate::types::{LabelSeq, PartialAlignment, Symbol, Vocab};

pub const VERSION: &str = concat!("imputer ", env!("CARGO_PKG_VERSION"));

#[derive(Parser)]
#[command(name = "imputer", version, about = "Alignment-based non-autoregressive sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    GenData(GenDataArgs),
    /// Train a model from a run configuration
    Train(TrainArgs),
    /// Replace expert alignments with CTC Viterbi alignments
    Align(AlignArgs),
    /// Decode a dataset with a trained model
    Decode(DecodeArgs),
    /// Score hypotheses against references
    Eval(EvalArgs),
    /// Run the built-in verification suites
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "unimodal")]
    task: Task,
    #[arg(long, default_value_t = 100)]
    examples: usize,
    #[arg(long, default_value_t = 4)]
    num_tokens: u32,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 1)]
    min_frames: usize,
    #[arg(long, default_value_t = 3)]
    max_frames: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    chain_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the symbol embeddings; keep it fixed across train and test sets
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint; the step counter carries on
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Override the configured output directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Hypotheses, one JSON record per line
    #[arg(long)]
    out: PathBuf,
    /// Per-commit decoding trace
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    block_size: usize,
    #[arg(long, default_value = "plain")]
    strategy: Strategy,
    /// Commitments per iteration for the topk strategy
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyps: PathBuf,
    /// Reference dataset
    #[arg(long)]
    data: PathBuf,
    /// Also write the report here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per suite
    #[arg(long, default_value_t = 1000)]
    instances: usize,
}

/// Parse `args` (program name first), run the command and return the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Align(a) => cmd_align(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selfcheck(a) => return cmd_selfcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 3,
        Error::Infeasible(_) => 4,
        _ => 2,
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        task: a.task,
        num_examples: a.examples,
        num_tokens: a.num_tokens,
        min_len: a.min_len,
        max_len: a.max_len,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        feature_dim: a.feature_dim,
        noise: a.noise,
        chain_prob: a.chain_prob,
        seed: a.seed,
        world_seed: a.world_seed,
    };
    let data = crate::trainer::gen_synthetic(&spec)?;
    data.save(&a.out)?;
    let feasible = data
        .iter()
        .filter(|ex| ex.labels.len() <= ex.features.frames())
        .count();
    let frames = data.iter().map(|ex| ex.features.frames());
    let (lo, hi) = frames.fold((usize::MAX, 0), |(lo, hi), f| (lo.min(f), hi.max(f)));
    println!("wrote {} examples to {}", data.len(), a.out.display());
    if !data.is_empty() {
        println!("frames per example {lo}..={hi}; feasible {feasible}/{}", data.len());
    }
    Ok(())
}

/// Model section of a run file. The seed comes from the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub kernel_width: usize,
    pub conv_stride: usize,
    pub num_tokens: u32,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            feature_dim: m.feature_dim,
            hidden: m.hidden,
            heads: m.heads,
            layers: m.layers,
            ffn_dim: m.ffn_dim,
            kernel_width: m.kernel_width,
            conv_stride: m.conv_stride,
            num_tokens: m.num_tokens,
            dropout: m.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub objective: Objective,
    pub steps: u64,
    #[serde(default)]
    pub im_scoring: ImScoring,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub infeasible: InfeasiblePolicy,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_batch() -> usize {
    32
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RollinSection {
    pub shift_prob: f64,
    pub masking: MaskingPolicy,
}

impl Default for RollinSection {
    fn default() -> Self {
        let r = RollinConfig::default();
        RollinSection {
            shift_prob: r.shift_prob,
            masking: r.masking,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
}

/// A run file. Every source of randomness derives from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub rollin: RollinSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a run file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out_dir);
        rebase(&mut cfg.data.train);
        if let Some(e) = cfg.data.eval.as_mut() {
            rebase(e);
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            feature_dim: m.feature_dim,
            hidden: m.hidden,
            heads: m.heads,
            layers: m.layers,
            ffn_dim: m.ffn_dim,
            kernel_width: m.kernel_width,
            conv_stride: m.conv_stride,
            num_tokens: m.num_tokens,
            dropout: m.dropout,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            objective: t.objective,
            rollin: RollinConfig {
                shift_prob: self.rollin.shift_prob,
                masking: self.rollin.masking,
                seed: self.seed,
            },
            im_scoring: t.im_scoring,
            batch_size: t.batch_size,
            steps: t.steps,
            seed: self.seed,
            infeasible: t.infeasible,
            optimizer: self.optimizer,
            eval_every: t.eval_every,
            decode: self.decode,
            workers: t.workers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()
    }

    /// The configuration as TOML, prefixed with the tool version.
    pub fn resolved_toml(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        Ok(format!("# resolved configuration\nversion = \"{VERSION}\"\n{body}"))
    }
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint.impx";

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(w) = a.workers {
        cfg.train.workers = w;
    }
    if let Some(dir) = a.out_dir {
        cfg.out_dir = dir;
    }
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let train_cfg = cfg.train_config();
    let vocab = model_cfg.vocab();
    let train_set = Dataset::load(&cfg.data.train, &vocab)?;
    let eval_set = cfg
        .data
        .eval
        .as_ref()
        .map(|p| Dataset::load(p, &vocab))
        .transpose()?;

    let start = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let found = ModelConfig {
                seed: model_cfg.seed,
                ..ckpt.params.config().clone()
            };
            if found != model_cfg {
                return Err(Error::Config(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            ckpt
        }
        None => fresh_checkpoint(ModelParams::init(&model_cfg)?),
    };

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let resolved = cfg.out_dir.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.resolved_toml()?).map_err(|e| Error::io(&resolved, e))?;

    let metrics_path = cfg.out_dir.join(METRICS);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let write_record = |log: &mut BufWriter<File>, r: &MetricRecord| -> Result<()> {
        serde_json::to_writer(&mut *log, r)
            .map_err(std::io::Error::from)
            .and_then(|_| log.write_all(b"\n"))
            .map_err(|e| Error::io(&metrics_path, e))
    };
    let outcome = train_with(&train_cfg, start, &train_set, eval_set.as_ref(), |r| {
        write_record(&mut log, r)
    });
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let run = outcome?;

    let ckpt_path = cfg.out_dir.join(CHECKPOINT);
    save_checkpoint(&run.checkpoint, &ckpt_path)?;
    let last = run.metrics.last();
    println!(
        "{}: {} steps, now at step {}; last loss {}; skipped {} infeasible",
        train_cfg.objective.name(),
        run.metrics.len(),
        run.checkpoint.step,
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.loss)),
        run.skipped
    );
    if let Some(ter) = last.and_then(|r| r.eval_ter) {
        println!("eval TER {ter:.4}");
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let params = ckpt.params;
    if params.config().conv_stride != 1 {
        return Err(Error::Config(
            "expert alignments need one slot per frame (conv_stride = 1)".into(),
        ));
    }
    let mut data = Dataset::load(&a.data, &params.vocab())?;
    let aligned: Vec<Result<Option<_>>> = pool(a.workers)?.install(|| {
        data.examples
            .par_iter()
            .map(|ex| {
                let slots = ex.features.frames();
                let lattice = params.forward(&ex.features, &PartialAlignment::all_masked(slots))?;
                match ctc_viterbi(&lattice, &ex.labels) {
                    Ok(al) => Ok(Some(al)),
                    Err(Error::Infeasible(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect()
    });
    let mut kept = Vec::with_capacity(data.len());
    let mut skipped = 0;
    for (mut ex, al) in data.examples.drain(..).zip(aligned) {
        match al? {
            Some(al) => {
                ex.expert_alignment = Some(al);
                kept.push(ex);
            }
            None => {
                eprintln!("warning: {} is infeasible, dropped", ex.id);
                skipped += 1;
            }
        }
    }
    let out = Dataset::new(kept);
    out.save(&a.out)?;
    println!(
        "aligned {} examples ({skipped} infeasible skipped) to {}",
        out.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Hypothesis {
    id: String,
    labels: Vec<Symbol>,
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let cfg = DecodeConfig {
        block_size: a.block_size,
        strategy: a.strategy,
        k: a.k,
    };
    cfg.validate()?;
    let params = load_checkpoint(&a.checkpoint)?.params;
    let data = Dataset::load(&a.data, &params.vocab())?;
    let decoded = pool(a.workers)?.install(|| decode_dataset(&params, &data, &cfg))?;

    let file = File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut out = BufWriter::new(file);
    for (ex, (hyp, _)) in data.iter().zip(&decoded) {
        let line = Hypothesis {
            id: ex.id.clone(),
            labels: hyp.ids().to_vec(),
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(std::io::Error::from)
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(&a.out, e))?;
    }
    out.flush().map_err(|e| Error::io(&a.out, e))?;

    if let Some(path) = &a.trace {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (ex, (_, trace)) in data.iter().zip(&decoded) {
            trace
                .write_jsonl(&ex.id, &mut out)
                .map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
    }
    println!("decoded {} examples to {}", data.len(), a.out.display());
    Ok(())
}

fn read_hypotheses(path: &Path) -> Result<Vec<Hypothesis>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    // references are only scored, so accept any token id
    let vocab = Vocab::new(u32::MAX - 1)?;
    let data = Dataset::load(&a.data, &vocab)?;
    let mut by_id = std::collections::HashMap::new();
    for h in read_hypotheses(&a.hyps)? {
        let id = h.id.clone();
        if by_id.insert(id.clone(), h).is_some() {
            return Err(Error::InvalidInput(format!("duplicate hypothesis for {id}")));
        }
    }
    let mut hyps = Vec::with_capacity(data.len());
    for ex in &data {
        let h = by_id
            .remove(&ex.id)
            .ok_or_else(|| Error::InvalidInput(format!("no hypothesis for {}", ex.id)))?;
        hyps.push(LabelSeq::new(h.labels, &vocab)?);
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(Error::InvalidInput(format!("hypothesis {extra} has no reference")));
    }
    let report = score_hypotheses(&hyps, &data);
    let text = serde_json::to_string(&report).expect("report serializes");
    println!("{text}");
    if let Some(path) = &a.out {
        fs::write(path, format!("{text}\n")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_selfcheck(a: SelfcheckArgs) -> i32 {
    let cfg = SelfcheckConfig {
        seed: a.seed,
        instances: a.instances,
    };
    let results = run_selfcheck(&DpFns::default(), &cfg);
    for r in &results {
        println!("{r}");
    }
    if results.iter().all(|r| r.passed) {
        println!("all {} suites passed", results.len());
        0
    } else {
        3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RUN: &str = r#"
seed = 3
out_dir = "out"

[data]
train = "train.jsonl"

[model]
hidden = 8
heads = 2
layers = 1

[train]
objective = "imputer_dp"
steps = 5

[rollin]
masking = { kind = "bernoulli", p = 0.5 }

[decode]
block_size = 4
strategy = "rightmost_last"
"#;

    #[test]
    fn run_config_parses_and_resolves() {
        let cfg = RunConfig::parse(RUN).unwrap();
        assert_eq!(cfg.model.hidden, 8);
        assert_eq!(cfg.model.feature_dim, 16);
        assert_eq!(cfg.train.batch_size, 32);
        let t = cfg.train_config();
        assert_eq!(t.rollin.masking, MaskingPolicy::Bernoulli { p: 0.5 });
        assert_eq!(t.rollin.shift_prob, 0.2);
        assert_eq!(t.seed, 3);
        assert_eq!(cfg.model_config().seed, 3);
        assert_eq!(t.decode.strategy, Strategy::RightmostLast);
        cfg.validate().unwrap();

        let text = cfg.resolved_toml().unwrap();
        assert!(text.contains(VERSION));
        let body: String = text.lines().filter(|l| !l.starts_with("version")).collect::<Vec<_>>().join("\n");
        assert_eq!(RunConfig::parse(&body).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = RUN.replace("hidden = 8", "hidden = 8\nwidth = 3");
        assert!(matches!(RunConfig::parse(&bad), Err(Error::Config(_))));
        let bad = format!("{RUN}\n[extra]\nx = 1\n");
        assert!(RunConfig::parse(&bad).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Numeric("nan".into())), 3);
        assert_eq!(exit_code(&Error::Infeasible("x".into())), 4);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(run(["imputer", "bogus"]), 2);
        assert_eq!(run(["imputer", "decode", "--strategy", "sideways"]), 2);
    }
}
