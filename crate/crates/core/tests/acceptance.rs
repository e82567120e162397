//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
//! if any fails. Runs under `cargo test` with `harness = false`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use imputer::decoder::{decode, DecodeConfig, DecodeTrace, Strategy};
use imputer::dp;
use imputer::model::{FeatureSeq, ModelConfig, ModelParams};
use imputer::oracle::enumerate_compatible;
use imputer::optim::{OptimizerConfig, OptimizerKind};
use imputer::policies::{MaskingPolicy, RollinConfig};
use imputer::selfcheck::{self, random_alignment, random_partial, DpFns, SelfcheckConfig};
use imputer::trainer::{
    evaluate, fresh_checkpoint, gen_synthetic, train, Dataset, Objective, SyntheticSpec,
    TrainConfig, Task,
};
use imputer::BlockSpec;

const SEED: u64 = 20240;
const INSTANCES: usize = 1000;
const ORACLE_TOL: f64 = 1e-6;
const ORACLE_SECONDS: f64 = 30.0;
const GRADIENT_SECONDS: f64 = 60.0;

const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_EXAMPLES: usize = 2000;
const TEST_EXAMPLES: usize = 2000;
const TRAIN_STEPS: u64 = 2000;
const RUN_SECONDS: f64 = 600.0;
const SWEEP: [usize; 4] = [2, 4, 8, 16];

struct Line {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: u32, name: &'static str, passed: bool, detail: String) {
    let line = Line {
        id,
        name,
        passed,
        detail,
    };
    println!(
        "{} {}. {:<26} {}",
        if line.passed { "PASS" } else { "FAIL" },
        line.id,
        line.name,
        line.detail
    );
    lines.push(line);
}

fn suite_line(r: &selfcheck::SuiteResult) -> String {
    let mut s = format!("{} checks, worst {:.2e}, {:.2}s", r.checks, r.worst, r.seconds);
    if let Some(d) = &r.detail {
        s.push_str(&format!(" ({d})"));
    }
    s
}

fn oracle(lines: &mut Vec<Line>, fns: &DpFns, cfg: &SelfcheckConfig) {
    let r = selfcheck::oracle_suite(fns, cfg);
    let ok = r.passed && r.checks >= 2 * INSTANCES && r.worst <= ORACLE_TOL && r.seconds < ORACLE_SECONDS;
    report(lines, 1, "oracle equivalence", ok, suite_line(&r));
}

fn counting(lines: &mut Vec<Line>) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x2);
    let (mut mismatches, mut product_equal, mut product_above) = (0, 0, 0);
    let mut first = None;
    for i in 0..INSTANCES {
        let slots = rng.random_range(1..=10);
        let a = random_alignment(&mut rng, slots, 4, 5);
        let p = random_partial(&mut rng, &a);
        let direct = enumerate_compatible(&p, &a).expect("small instance").len() as u128;
        let count = dp::count_compatible(&p, &a).expect("compatible pair");
        let product = dp::repetition_constant(&p, &a).expect("compatible pair");
        if count != direct {
            mismatches += 1;
            first.get_or_insert(format!("instance {i}: {count} vs {direct}"));
        }
        product_equal += usize::from(product == direct);
        product_above += usize::from(product > direct);
    }
    let ok = mismatches == 0 && product_above == 0;
    let mut detail = format!(
        "{INSTANCES} pairs, {mismatches} mismatches; per-run product equal on {product_equal}, above on {product_above}"
    );
    if let Some(f) = first {
        detail.push_str(&format!(" ({f})"));
    }
    report(lines, 2, "counting identity", ok, detail);
}

fn reductions(lines: &mut Vec<Line>, fns: &DpFns, cfg: &SelfcheckConfig) {
    let r = selfcheck::reduction_suite(fns, cfg);
    let ok = r.passed && r.checks >= 200 && r.worst <= 1e-9;
    report(lines, 3, "reduction identities", ok, suite_line(&r));
}

fn lower_bound(lines: &mut Vec<Line>, fns: &DpFns, cfg: &SelfcheckConfig) {
    let r = selfcheck::lower_bound_suite(fns, cfg);
    let ok = r.passed && r.checks >= INSTANCES && r.worst <= 1e-9;
    report(lines, 4, "lower-bound ordering", ok, suite_line(&r));
}

fn gradients(lines: &mut Vec<Line>, fns: &DpFns, cfg: &SelfcheckConfig) {
    let lattice = selfcheck::lattice_gradient_suite(fns, cfg);
    let model = selfcheck::model_gradient_suite(fns, cfg);
    let seconds = lattice.seconds + model.seconds;
    let ok = lattice.passed
        && lattice.worst <= 1e-4
        && model.passed
        && model.worst <= 1e-3
        && seconds < GRADIENT_SECONDS;
    let detail = format!(
        "lattice: {}; model: {}",
        suite_line(&lattice),
        suite_line(&model)
    );
    report(lines, 5, "gradient checks", ok, detail);
}

fn tiny_params(seed: u64) -> ModelParams {
    ModelParams::init(&ModelConfig {
        seed,
        ..selfcheck::tiny_model_config()
    })
    .expect("valid config")
}

fn random_features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureSeq {
    let data = (0..frames * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    FeatureSeq::new(frames, dim, data).expect("finite")
}

/// Every plain iteration commits one slot in every block that still has a
/// masked slot; with all slots masked at the start that is every block.
fn plain_contract(trace: &DecodeTrace, tiling: &BlockSpec) -> Result<(), String> {
    if trace.iterations != tiling.block_size() {
        return Err(format!(
            "B={} took {} iterations",
            tiling.block_size(),
            trace.iterations
        ));
    }
    for it in 0..trace.iterations {
        let slots: Vec<usize> = trace.iteration(it).map(|r| r.slot).collect();
        for block in tiling.blocks() {
            let n = slots.iter().filter(|s| block.contains(s)).count();
            let remaining = block.len().saturating_sub(it);
            let want = usize::from(remaining > 0);
            if n != want {
                return Err(format!(
                    "B={} iteration {it}: {n} commits in block {block:?}",
                    tiling.block_size()
                ));
            }
        }
    }
    Ok(())
}

fn decoder_contracts(lines: &mut Vec<Line>) {
    const T: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x6);
    let mut problems = Vec::new();
    let mut plain_runs = 0;
    let mut audited = 0;
    for d in 0..100u64 {
        let params = tiny_params(d);
        let dim = params.config().feature_dim;
        let x = random_features(&mut rng, T, dim);
        if d < 10 {
            for b in [1, 2, 3, 4, 6, 12] {
                let cfg = DecodeConfig {
                    block_size: b,
                    strategy: Strategy::Plain,
                    k: 1,
                };
                let (_, trace) = decode(&params, &x, &cfg).expect("decode");
                let tiling = BlockSpec::new(b, T).expect("tiling");
                if let Err(e) = plain_contract(&trace, &tiling) {
                    problems.push(e);
                }
                plain_runs += 1;
            }
        }
        let b = [2, 3, 4, 6, 12][d as usize % 5];
        let rightmost = DecodeConfig {
            block_size: b,
            strategy: Strategy::RightmostLast,
            k: 1,
        };
        let topk = DecodeConfig {
            block_size: 1,
            strategy: Strategy::Topk,
            k: 1 + d as usize % 4,
        };
        for cfg in [rightmost, topk] {
            let (_, trace) = decode(&params, &x, &cfg).expect("decode");
            if trace.has_adjacent_commits() {
                problems.push(format!("{:?} decode {d} committed adjacent slots", cfg.strategy));
            }
            if trace.replay().is_err() {
                problems.push(format!("{:?} decode {d} trace does not replay", cfg.strategy));
            }
            audited += 1;
        }
    }
    let detail = format!(
        "{plain_runs} plain decodes, {audited} rightmost/topk traces audited, {} violations{}",
        problems.len(),
        problems.first().map(|p| format!(" ({p})")).unwrap_or_default()
    );
    report(lines, 6, "decoder contracts", problems.is_empty(), detail);
}

fn task(seed: u64, n: usize) -> SyntheticSpec {
    SyntheticSpec {
        task: Task::Multimodal,
        num_examples: n,
        num_tokens: 4,
        min_len: 4,
        max_len: 8,
        min_frames: 1,
        max_frames: 2,
        feature_dim: 16,
        noise: 0.5,
        chain_prob: 0.8,
        seed,
        world_seed: 99,
    }
}

fn encoder(seed: u64) -> ModelConfig {
    ModelConfig {
        feature_dim: 16,
        hidden: 64,
        heads: 2,
        layers: 2,
        ffn_dim: 128,
        kernel_width: 3,
        conv_stride: 1,
        num_tokens: 4,
        dropout: 0.0,
        seed,
    }
}

fn train_config(objective: Objective, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(objective, TRAIN_STEPS, seed);
    cfg.optimizer = OptimizerConfig {
        kind: OptimizerKind::Adam,
        learning_rate: 3e-3,
        ..OptimizerConfig::default()
    };
    cfg.rollin = RollinConfig {
        shift_prob: 0.5,
        masking: MaskingPolicy::Block { block_size: 8 },
        seed,
    };
    cfg.decode = DecodeConfig {
        block_size: 8,
        strategy: Strategy::Plain,
        k: 1,
    };
    cfg
}

struct Trained {
    objective: Objective,
    params: ModelParams,
    seconds: f64,
    config: TrainConfig,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt_seeds(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

fn table_ordering(lines: &mut Vec<Line>, runs: &[Trained], test: &Dataset) {
    let ter = |obj: Objective| -> (Vec<f64>, Vec<f64>) {
        runs.iter()
            .filter(|r| r.objective == obj)
            .map(|r| {
                let e = evaluate(&r.params, test, &r.config.eval_decode()).expect("evaluate");
                (e.ter, e.mode_consistency.expect("multimodal"))
            })
            .unzip()
    };
    let (ctc, ctc_mc) = ter(Objective::Ctc);
    let (im, im_mc) = ter(Objective::ImputerIm);
    let (dp, dp_mc) = ter(Objective::ImputerDp);
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let (m_ctc, m_im, m_dp) = (median(ctc.clone()), median(im.clone()), median(dp.clone()));
    let (c_ctc, c_dp) = (median(ctc_mc.clone()), median(dp_mc.clone()));
    let ok = m_dp < m_ctc && c_dp > c_ctc && m_dp <= m_im && slowest < RUN_SECONDS;
    let detail = format!(
        "median TER ctc {m_ctc:.4} im {m_im:.4} dp {m_dp:.4} [ctc {} im {} dp {}]; \
         mode consistency ctc {c_ctc:.3} im {:.3} dp {c_dp:.3}; slowest run {slowest:.0}s",
        fmt_seeds(&ctc),
        fmt_seeds(&im),
        fmt_seeds(&dp),
        median(im_mc),
    );
    report(lines, 7, "objective ordering", ok, detail);
}

fn block_sweep(lines: &mut Vec<Line>, runs: &[Trained], test: &Dataset) {
    let mut per_b: Vec<Vec<f64>> = vec![Vec::new(); SWEEP.len()];
    for r in runs.iter().filter(|r| r.objective == Objective::ImputerDp) {
        for (i, &b) in SWEEP.iter().enumerate() {
            let cfg = DecodeConfig {
                block_size: b,
                strategy: Strategy::RightmostLast,
                k: 1,
            };
            per_b[i].push(evaluate(&r.params, test, &cfg).expect("evaluate").ter);
        }
    }
    let medians: Vec<f64> = per_b.iter().cloned().map(median).collect();
    let at = |b: usize| medians[SWEEP.iter().position(|&x| x == b).expect("swept")];
    let ok = at(2) > at(8);
    let detail = SWEEP
        .iter()
        .zip(&medians)
        .zip(&per_b)
        .map(|((b, m), v)| format!("B={b} {m:.4} [{}]", fmt_seeds(v)))
        .collect::<Vec<_>>()
        .join(", ");
    report(lines, 8, "block-size sweep", ok, detail);
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_imputer"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

/// Run the whole CLI pipeline into `dir`.
fn pipeline(dir: &Path, objective: &str) -> Result<(), String> {
    let p = |name: &str| dir.join(name).to_str().expect("utf-8 path").to_string();
    for (name, seed) in [("train.jsonl", "1"), ("test.jsonl", "2")] {
        cli(&[
            "gen-data", "--task", "multimodal", "--examples", "60", "--chain-prob", "0.8",
            "--seed", seed, "--world-seed", "99", "--out", &p(name),
        ])?;
    }
    let config = format!(
        "seed = 5\nout_dir = \"run\"\n\n[data]\ntrain = \"train.jsonl\"\neval = \"test.jsonl\"\n\n\
         [model]\nhidden = 8\nheads = 2\nlayers = 1\n\n\
         [train]\nobjective = \"{objective}\"\nsteps = 12\nbatch_size = 8\neval_every = 6\nworkers = 2\n\n\
         [decode]\nblock_size = 4\n"
    );
    std::fs::write(dir.join("run.toml"), config).map_err(|e| e.to_string())?;
    cli(&["train", "--config", &p("run.toml")])?;
    let ckpt = p("run/checkpoint.impx");
    cli(&[
        "decode", "--checkpoint", &ckpt, "--data", &p("test.jsonl"), "--out", &p("hyps.jsonl"),
        "--trace", &p("trace.jsonl"), "--block-size", "4", "--strategy", "rightmost_last",
        "--workers", "3",
    ])?;
    cli(&["align", "--checkpoint", &ckpt, "--data", &p("test.jsonl"), "--out", &p("align.jsonl")])?;
    cli(&["eval", "--hyps", &p("hyps.jsonl"), "--data", &p("test.jsonl"), "--out", &p("eval.json")])?;
    Ok(())
}

const OUTPUTS: [&str; 9] = [
    "train.jsonl",
    "test.jsonl",
    "run/metrics.jsonl",
    "run/checkpoint.impx",
    "run/config.resolved.toml",
    "hyps.jsonl",
    "trace.jsonl",
    "align.jsonl",
    "eval.json",
];

/// Run the pipeline, snapshot its outputs, clear them and run the same
/// commands again in the same directory.
fn determinism(lines: &mut Vec<Line>) {
    let mut compared = 0;
    let mut problems = Vec::new();
    for objective in ["ctc", "imputer_im", "imputer_dp"] {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut snapshots = Vec::new();
        for _ in 0..2 {
            if let Err(e) = pipeline(dir.path(), objective) {
                problems.push(e);
            }
            let files: Vec<Option<Vec<u8>>> = OUTPUTS
                .iter()
                .map(|name| std::fs::read(dir.path().join(name)).ok())
                .collect();
            snapshots.push(files);
            for name in OUTPUTS {
                let _ = std::fs::remove_file(dir.path().join(name));
            }
        }
        for (i, name) in OUTPUTS.iter().enumerate() {
            match (&snapshots[0][i], &snapshots[1][i]) {
                (Some(a), Some(b)) if a == b && !a.is_empty() => compared += 1,
                (Some(_), Some(_)) => problems.push(format!("{objective}: {name} differs or is empty")),
                _ => problems.push(format!("{objective}: {name} missing")),
            }
        }
    }
    let detail = format!(
        "{compared} output files byte-identical across repeated runs, {} problems{}",
        problems.len(),
        problems.first().map(|p| format!(" ({p})")).unwrap_or_default()
    );
    report(lines, 9, "determinism", problems.is_empty(), detail);
}

fn main() {
    // `cargo test -- --list` and filters are harness conventions; honour
    // listing so tooling that enumerates tests does not trigger a full run.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let start = Instant::now();
    let fns = DpFns::default();
    let cfg = SelfcheckConfig {
        seed: SEED,
        instances: INSTANCES,
    };
    let mut lines = Vec::new();
    oracle(&mut lines, &fns, &cfg);
    counting(&mut lines);
    reductions(&mut lines, &fns, &cfg);
    lower_bound(&mut lines, &fns, &cfg);
    gradients(&mut lines, &fns, &cfg);
    decoder_contracts(&mut lines);

    let train_set = gen_synthetic(&task(1, TRAIN_EXAMPLES)).expect("train data");
    let test_set = gen_synthetic(&task(2, TEST_EXAMPLES)).expect("test data");
    let mut runs = Vec::new();
    for &seed in &TRAIN_SEEDS {
        for objective in [Objective::Ctc, Objective::ImputerIm, Objective::ImputerDp] {
            let config = train_config(objective, seed);
            let params = ModelParams::init(&encoder(seed)).expect("valid encoder");
            let t = Instant::now();
            let run = train(&config, fresh_checkpoint(params), &train_set, None).expect("training");
            let seconds = t.elapsed().as_secs_f64();
            eprintln!("trained {} seed {seed} in {seconds:.0}s", objective.name());
            runs.push(Trained {
                objective,
                params: run.checkpoint.params,
                seconds,
                config,
            });
        }
    }
    table_ordering(&mut lines, &runs, &test_set);
    block_sweep(&mut lines, &runs, &test_set);
    determinism(&mut lines);

    let failed: Vec<u32> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        lines.len() - failed.len(),
        lines.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
