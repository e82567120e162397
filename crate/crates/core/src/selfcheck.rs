//! Built-in verification suites behind `imputer selfcheck`.
//!
//! Each suite draws small random instances and checks the dynamic programs
//! against brute-force enumeration, exact counts, closed-form reductions,
//! the imitation lower bound and finite differences. The DP entry points
//! are taken from a [`DpFns`] table so that a deliberately broken recurrence
//! can be plugged in to confirm the suites notice.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dp::{self, DpPosteriors, LogProbLattice};
use crate::error::Result;
use crate::model::{FeatureSeq, ModelConfig, ModelParams};
use crate::oracle::{brute_constrained, brute_marginal, enumerate_compatible};
use crate::policies::{MaskingPolicy, RollinConfig};
use crate::types::{Alignment, LabelSeq, PartialAlignment, BLANK};

type CtcFn = fn(&LogProbLattice, &LabelSeq) -> Result<f64>;
type ConstrainedFn = fn(&LogProbLattice, &PartialAlignment, &Alignment) -> Result<f64>;
type CountFn = fn(&PartialAlignment, &Alignment) -> Result<u128>;
type PosteriorFn = fn(&LogProbLattice, &PartialAlignment, &Alignment) -> Result<(f64, DpPosteriors)>;

/// The dynamic programs under test.
#[derive(Clone, Copy)]
pub struct DpFns {
    pub ctc_forward: CtcFn,
    pub constrained_forward: ConstrainedFn,
    pub count_compatible: CountFn,
    pub forward_backward: PosteriorFn,
}

impl Default for DpFns {
    fn default() -> Self {
        DpFns {
            ctc_forward: dp::ctc_forward,
            constrained_forward: dp::constrained_forward,
            count_compatible: dp::count_compatible,
            forward_backward: dp::forward_backward,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelfcheckConfig {
    pub seed: u64,
    pub instances: usize,
}

impl Default for SelfcheckConfig {
    fn default() -> Self {
        SelfcheckConfig {
            seed: 0,
            instances: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub checks: usize,
    /// Largest observed error (absolute or relative, per suite).
    pub worst: f64,
    pub seconds: f64,
    /// First failure, if any.
    pub detail: Option<String>,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<16} {:>6} checks  worst {:.2e}  {:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checks,
            self.worst,
            self.seconds
        )?;
        if let Some(d) = &self.detail {
            write!(f, "  ({d})")?;
        }
        Ok(())
    }
}

/// Random normalized lattice.
pub fn random_lattice<R: Rng + ?Sized>(rng: &mut R, slots: usize, symbols: usize) -> LogProbLattice {
    let logits: Vec<f64> = (0..slots * symbols)
        .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    LogProbLattice::from_logits(slots, symbols, &logits).expect("finite logits")
}

/// Random alignment of `slots` slots with at most `max_labels` tokens drawn
/// from `1..=num_tokens`.
pub fn random_alignment<R: Rng + ?Sized>(
    rng: &mut R,
    slots: usize,
    num_tokens: u32,
    max_labels: usize,
) -> Alignment {
    let m = rng.random_range(0..=max_labels.min(slots));
    let mut ids = vec![BLANK; slots];
    for t in rand::seq::index::sample(rng, slots, m) {
        ids[t] = rng.random_range(1..=num_tokens);
    }
    Alignment::from_raw(ids)
}

/// Mask each slot of `a` with a probability drawn uniformly per call.
pub fn random_partial<R: Rng + ?Sized>(rng: &mut R, a: &Alignment) -> PartialAlignment {
    let p: f64 = rng.random();
    PartialAlignment::new(
        a.ids()
            .iter()
            .map(|&s| (!rng.random_bool(p)).then_some(s))
            .collect(),
    )
}

/// Instance shape used by the suites: T ≤ 10, |y| ≤ 5, up to 4 tokens.
fn instance(rng: &mut ChaCha8Rng) -> (LogProbLattice, Alignment) {
    let slots = rng.random_range(1..=10);
    let tokens = rng.random_range(1..=4u32);
    let lattice = random_lattice(rng, slots, tokens as usize + 1);
    let a = random_alignment(rng, slots, tokens, 5);
    (lattice, a)
}

struct Tally {
    name: &'static str,
    start: Instant,
    checks: usize,
    worst: f64,
    detail: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            start: Instant::now(),
            checks: 0,
            worst: 0.0,
            detail: None,
        }
    }

    /// Record an error value against a tolerance.
    fn check(&mut self, err: f64, tol: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        self.worst = self.worst.max(err);
        if err > tol && self.detail.is_none() {
            self.detail = Some(what());
        }
    }

    fn fail(&mut self, what: String) {
        self.checks += 1;
        self.worst = f64::INFINITY;
        if self.detail.is_none() {
            self.detail = Some(what);
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            passed: self.detail.is_none(),
            checks: self.checks,
            worst: self.worst,
            seconds: self.start.elapsed().as_secs_f64(),
            detail: self.detail,
        }
    }
}

pub fn oracle_suite(fns: &DpFns, cfg: &SelfcheckConfig) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tally = Tally::new("oracle");
    for i in 0..cfg.instances {
        let (lattice, a) = instance(&mut rng);
        let labels = a.collapse();
        let partial = random_partial(&mut rng, &a);
        let brute = brute_marginal(&lattice, &labels).expect("small instance").log_prob;
        match (fns.ctc_forward)(&lattice, &labels) {
            Ok(v) => tally.check((v - brute).abs(), 1e-6, || {
                format!("instance {i}: ctc_forward {v} vs enumeration {brute}")
            }),
            Err(e) => tally.fail(format!("instance {i}: ctc_forward failed: {e}")),
        }
        let brute = brute_constrained(&lattice, &partial, &a)
            .expect("small instance")
            .log_prob;
        match (fns.constrained_forward)(&lattice, &partial, &a) {
            Ok(v) => tally.check((v - brute).abs(), 1e-6, || {
                format!("instance {i}: constrained_forward {v} vs enumeration {brute}")
            }),
            Err(e) => tally.fail(format!("instance {i}: constrained_forward failed: {e}")),
        }
    }
    tally.finish()
}

pub fn counting_suite(fns: &DpFns, cfg: &SelfcheckConfig) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x636f756e74);
    let mut tally = Tally::new("counting");
    for i in 0..cfg.instances {
        let slots = rng.random_range(1..=10);
        let a = random_alignment(&mut rng, slots, 4, 5);
        let partial = random_partial(&mut rng, &a);
        let direct = enumerate_compatible(&partial, &a).expect("small instance").len() as u128;
        match (fns.count_compatible)(&partial, &a) {
            Ok(c) => tally.check(c.abs_diff(direct) as f64, 0.0, || {
                format!("instance {i}: count {c} vs enumeration {direct} for {partial} / {a}")
            }),
            Err(e) => tally.fail(format!("instance {i}: count_compatible failed: {e}")),
        }
    }
    tally.finish()
}

pub fn reduction_suite(fns: &DpFns, cfg: &SelfcheckConfig) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x726564);
    let mut tally = Tally::new("reductions");
    for i in 0..cfg.instances.div_ceil(10).max(1) {
        let (lattice, a) = instance(&mut rng);
        let labels = a.collapse();
        let all = PartialAlignment::all_masked(a.len());
        let none = PartialAlignment::from_alignment(&a);
        match ((fns.constrained_forward)(&lattice, &all, &a), (fns.ctc_forward)(&lattice, &labels)) {
            (Ok(c), Ok(f)) => tally.check((c - f).abs(), 1e-9, || {
                format!("instance {i}: all-mask {c} vs ctc {f}")
            }),
            _ => tally.fail(format!("instance {i}: all-mask reduction errored")),
        }
        let direct = lattice.path_score(&a).expect("valid alignment");
        match (fns.constrained_forward)(&lattice, &none, &a) {
            Ok(c) => tally.check((c - direct).abs(), 1e-9, || {
                format!("instance {i}: mask-free {c} vs path score {direct}")
            }),
            Err(e) => tally.fail(format!("instance {i}: mask-free reduction failed: {e}")),
        }
    }
    tally.finish()
}

pub fn lower_bound_suite(fns: &DpFns, cfg: &SelfcheckConfig) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c62);
    let mut tally = Tally::new("lower-bound");
    let policies = [
        MaskingPolicy::Bernoulli { p: 0.5 },
        MaskingPolicy::Uniform,
        MaskingPolicy::Block { block_size: 3 },
    ];
    for i in 0..cfg.instances {
        let (lattice, expert) = instance(&mut rng);
        let rollin = RollinConfig {
            shift_prob: 0.3,
            masking: policies[i % policies.len()],
            seed: 0,
        };
        let (a, partial) = rollin.sample(&expert, &mut rng);
        let imitation = lattice.path_score(&a).expect("valid alignment");
        match (fns.constrained_forward)(&lattice, &partial, &a) {
            Ok(dp) => tally.check((imitation - dp).max(0.0), 1e-9, || {
                format!("instance {i}: imitation {imitation} exceeds marginal {dp}")
            }),
            Err(e) => tally.fail(format!("instance {i}: constrained_forward failed: {e}")),
        }
    }
    tally.finish()
}

fn relative(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// p − γ against central differences of −constrained_forward through the
/// log-softmax.
pub fn lattice_gradient_suite(fns: &DpFns, cfg: &SelfcheckConfig) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x67726164);
    let mut tally = Tally::new("lattice-gradient");
    let h = 1e-5;
    for i in 0..(cfg.instances / 50).max(1) {
        let slots = rng.random_range(1..=8);
        let symbols = rng.random_range(2..=5usize);
        let logits: Vec<f64> = (0..slots * symbols)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let a = random_alignment(&mut rng, slots, symbols as u32 - 1, 4);
        let partial = random_partial(&mut rng, &a);
        let loss = |z: &[f64]| {
            let l = LogProbLattice::from_logits(slots, symbols, z).expect("finite");
            -(fns.constrained_forward)(&l, &partial, &a).unwrap_or(f64::NAN)
        };
        let lattice = LogProbLattice::from_logits(slots, symbols, &logits).expect("finite");
        let grad = match (fns.forward_backward)(&lattice, &partial, &a) {
            Ok((_, post)) => post.score_gradient(&lattice),
            Err(e) => {
                tally.fail(format!("instance {i}: forward_backward failed: {e}"));
                continue;
            }
        };
        for (j, &g) in grad.iter().enumerate() {
            let mut up = logits.clone();
            up[j] += h;
            let mut down = logits.clone();
            down[j] -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            tally.check(relative(fd, g, 1e-3), 1e-4, || {
                format!("instance {i} score {j}: analytic {g} vs numeric {fd}")
            });
        }
    }
    tally.finish()
}

/// Configuration of the network used by the full-model gradient check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        hidden: 4,
        heads: 2,
        layers: 1,
        ffn_dim: 6,
        kernel_width: 3,
        conv_stride: 1,
        num_tokens: 3,
        dropout: 0.0,
        seed: 1,
    }
}

/// Backpropagated parameter gradients of the DP loss against central
/// differences, on every parameter of a tiny network.
pub fn model_gradient_suite(fns: &DpFns, cfg: &SelfcheckConfig) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f64);
    let mut tally = Tally::new("model-gradient");
    let mut params = ModelParams::init(&ModelConfig {
        seed: cfg.seed,
        ..tiny_model_config()
    })
    .expect("valid config");
    let frames = 5;
    let data: Vec<f64> = (0..frames * 3).map(|_| rng.sample(StandardNormal)).collect();
    let x = FeatureSeq::new(frames, 3, data).expect("finite");
    let a = Alignment::from_raw(vec![0, 2, 0, 1, 3]);
    let partial = PartialAlignment::new(vec![None, Some(2), None, None, Some(3)]);
    let loss = |p: &ModelParams| -> f64 {
        let l = p.forward(&x, &partial).expect("forward");
        -(fns.constrained_forward)(&l, &partial, &a).unwrap_or(f64::NAN)
    };
    let (lattice, cache) = params
        .forward_train(&x, &partial, None::<&mut ChaCha8Rng>)
        .expect("forward");
    let dscores = match (fns.forward_backward)(&lattice, &partial, &a) {
        Ok((_, post)) => post.score_gradient(&lattice),
        Err(e) => {
            tally.fail(format!("forward_backward failed: {e}"));
            return tally.finish();
        }
    };
    let grads = params.backward(&cache, &dscores).expect("matching cache");
    let names = params.tensor_names();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|m| m.data().to_vec()).collect();
    let h = 1e-5;
    for (ti, name) in names.iter().enumerate() {
        for j in 0..analytic[ti].len() {
            let orig = params.tensors()[ti].data()[j];
            params.tensors_mut()[ti].data_mut()[j] = orig + h;
            let up = loss(&params);
            params.tensors_mut()[ti].data_mut()[j] = orig - h;
            let down = loss(&params);
            params.tensors_mut()[ti].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = analytic[ti][j];
            tally.check(relative(fd, g, 1e-2), 1e-3, || {
                format!("{name}[{j}]: analytic {g} vs numeric {fd}")
            });
        }
    }
    tally.finish()
}

pub fn run_selfcheck(fns: &DpFns, cfg: &SelfcheckConfig) -> Vec<SuiteResult> {
    vec![
        oracle_suite(fns, cfg),
        counting_suite(fns, cfg),
        reduction_suite(fns, cfg),
        lower_bound_suite(fns, cfg),
        lattice_gradient_suite(fns, cfg),
        model_gradient_suite(fns, cfg),
    ]
}
