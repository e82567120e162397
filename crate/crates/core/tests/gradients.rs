use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use imputer::dp::LogProbLattice;
use imputer::model::ModelParams;
use imputer::selfcheck::{
    lattice_gradient_suite, model_gradient_suite, random_alignment, random_partial,
    tiny_model_config, DpFns, SelfcheckConfig,
};
use imputer::trainer::{
    example_loss, gen_synthetic, lattice_loss, ImScoring, LossSpec, Objective, SyntheticSpec,
    Target, Task,
};

fn relative(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[test]
fn dp_lattice_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let r = lattice_gradient_suite(&DpFns::default(), &SelfcheckConfig { seed, instances: 1000 });
        assert!(r.passed && r.worst <= 1e-4, "{r}");
    }
}

#[test]
fn full_model_dp_gradient_matches_finite_differences() {
    for seed in 0..2 {
        let r = model_gradient_suite(&DpFns::default(), &SelfcheckConfig { seed, instances: 1 });
        assert!(r.passed && r.worst <= 1e-3, "{r}");
    }
}

#[test]
fn every_lattice_target_has_the_right_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    for _ in 0..40 {
        let slots = rng.random_range(2..=7);
        let symbols = rng.random_range(2..=4usize);
        let logits: Vec<f64> = (0..slots * symbols).map(|_| rng.sample(StandardNormal)).collect();
        let a = random_alignment(&mut rng, slots, symbols as u32 - 1, 4);
        let partial = random_partial(&mut rng, &a);
        let labels = a.collapse();
        let targets = [
            Target::Ctc(&labels),
            Target::Constrained { alignment: &a, partial: &partial },
            Target::Imitation { alignment: &a, partial: &partial, scoring: ImScoring::Masked },
            Target::Imitation { alignment: &a, partial: &partial, scoring: ImScoring::AllSlots },
        ];
        for target in &targets {
            let loss = |z: &[f64]| {
                let l = LogProbLattice::from_logits(slots, symbols, z).unwrap();
                lattice_loss(&l, target).unwrap().0
            };
            let l = LogProbLattice::from_logits(slots, symbols, &logits).unwrap();
            let (_, grad) = lattice_loss(&l, target).unwrap();
            for j in 0..logits.len() {
                let mut up = logits.clone();
                up[j] += h;
                let mut down = logits.clone();
                down[j] -= h;
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                let err = relative(fd, grad[j], 1e-3);
                assert!(err <= 1e-4, "{target:?} score {j}: {} vs {fd}", grad[j]);
            }
        }
    }
}

/// Backpropagated gradients of every objective through the whole network,
/// against central differences on the same roll-in draw.
#[test]
fn full_model_gradient_for_every_objective() {
    let cfg = tiny_model_config();
    let data = gen_synthetic(&SyntheticSpec {
        task: Task::Multimodal,
        num_examples: 2,
        num_tokens: cfg.num_tokens,
        min_len: 2,
        max_len: 3,
        min_frames: 1,
        max_frames: 2,
        feature_dim: cfg.feature_dim,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let h = 1e-5;
    for objective in [Objective::Ctc, Objective::ImputerIm, Objective::ImputerDp] {
        let mut spec = LossSpec::new(objective);
        spec.train = false;
        for (index, ex) in (0u64..).zip(data.iter()) {
            let mut params = ModelParams::init(&cfg).unwrap();
            let (_, grads) = example_loss(&params, ex, &spec, 0, index).unwrap().unwrap();
            let analytic: Vec<Vec<f64>> =
                grads.tensors().iter().map(|m| m.data().to_vec()).collect();
            let names = params.tensor_names();
            let mut worst: f64 = 0.0;
            for (ti, name) in names.iter().enumerate() {
                for j in 0..analytic[ti].len() {
                    let orig = params.tensors()[ti].data()[j];
                    params.tensors_mut()[ti].data_mut()[j] = orig + h;
                    let up = example_loss(&params, ex, &spec, 0, index).unwrap().unwrap().0;
                    params.tensors_mut()[ti].data_mut()[j] = orig - h;
                    let down = example_loss(&params, ex, &spec, 0, index).unwrap().unwrap().0;
                    params.tensors_mut()[ti].data_mut()[j] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let err = relative(fd, analytic[ti][j], 1e-2);
                    assert!(
                        err <= 1e-3,
                        "{} {name}[{j}]: {} vs {fd}",
                        objective.name(),
                        analytic[ti][j]
                    );
                    worst = worst.max(err);
                }
            }
            assert!(worst.is_finite());
        }
    }
}
