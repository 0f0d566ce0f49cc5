//! Input-independent invariants of the attack, regularizer, and replay
//! building blocks: perturbation containment, clean-label identity,
//! penalty/importance sign properties, gradient correctness against finite
//! differences, and bitwise determinism under fixed seeds.

use ndarray::{ArrayD, Axis, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pacol::attack::{
    craft_pacol, flip_labels, grad_distance, make_pacol_poison, Distance, FlipSpec, PacolConfig,
};
use pacol::data::LabeledBatch;
use pacol::models::{Architecture, Classifier, ModelSpec};
use pacol::nn::{Net, Node};
use pacol::regularizer::{
    consolidate, ewc_importance, penalty, train_task, Method, RegularizerState, TrainConfig,
};
use pacol::replay::replay_fraction;

fn tiny_model(seed: u64) -> Classifier<f64> {
    let net = Net::new(
        vec![
            Node::Dense { in_dim: 3, out_dim: 4 },
            Node::Relu,
            Node::Dense { in_dim: 4, out_dim: 3 },
        ],
        vec![3],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = net.init_params(&mut rng);
    let state = net.init_state();
    Classifier {
        spec: ModelSpec::new(Architecture::Mlp100x2, vec![3], 3, seed),
        net,
        params,
        state,
    }
}

fn random_inputs(n: usize, d: usize, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(&[n, d]), |_| rng.gen_range(0.0..1.0))
}

fn random_batch(n: usize, d: usize, classes: usize, seed: u64) -> LabeledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabeledBatch::clean(
        ArrayD::from_shape_fn(IxDyn(&[n, d]), |_| rng.gen_range(0.0..1.0f32)),
        (0..n).map(|i| i % classes).collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn crafted_inputs_stay_in_ball_and_unit_range(
        seed in 0u64..1000,
        epsilon in 0.01f64..0.3,
        distance in prop_oneof![Just(Distance::L2), Just(Distance::NegCosine)],
    ) {
        let m = tiny_model(seed);
        let tx = random_inputs(6, 3, seed ^ 1);
        let ty_adv: Vec<usize> = (0..6).map(|i| (i + 1) % 3).collect();
        let cx = random_inputs(6, 3, seed ^ 2);
        let cy: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let cfg = PacolConfig::new(epsilon, 2, 10, distance, seed);
        let out = craft_pacol(&m, &tx, &ty_adv, &cx, &cy, &cfg).unwrap();
        for (a, o) in out.x_adv.iter().zip(cx.iter()) {
            prop_assert!((a - o).abs() <= epsilon + 1e-9);
            prop_assert!((0.0..=1.0).contains(a));
        }
        prop_assert!(out.perturbation_linf <= epsilon + 1e-9);
    }

    #[test]
    fn flipping_fixes_no_label(
        classes in 2usize..11,
        seed in 0u64..500,
        n in 1usize..64,
    ) {
        let y: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % classes).collect();
        let spec = FlipSpec { num_classes: classes, seed };
        let flipped = flip_labels(&y, &spec).unwrap();
        for (f, o) in flipped.iter().zip(&y) {
            prop_assert_ne!(f, o);
            prop_assert!(*f < classes);
        }
    }

    #[test]
    fn distance_identities_hold(
        seed in 0u64..1000,
        len in 2usize..32,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        if p.iter().all(|&v| v == 0.0) {
            return Ok(());
        }
        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
        prop_assert_eq!(grad_distance(&p, &p, Distance::L2).unwrap(), 0.0);
        prop_assert!((grad_distance(&p, &p, Distance::NegCosine).unwrap() + 1.0).abs() < 1e-12);
        prop_assert!((grad_distance(&p, &neg, Distance::NegCosine).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_is_zero_at_anchor_and_nonnegative_elsewhere(
        seed in 0u64..1000,
        method in prop_oneof![Just(Method::Ewc), Just(Method::OnlineEwc)],
    ) {
        let m = tiny_model(seed);
        let batch = random_batch(24, 3, 3, seed ^ 9);
        let imp = ewc_importance(&m, &batch, 16, seed).unwrap();
        let mut state = RegularizerState::new(method, 100.0, m.param_count());
        consolidate(&mut state, &m, &imp).unwrap();
        prop_assert_eq!(penalty(&m.params, &state).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let theta: Vec<f64> = m.params.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        prop_assert!(penalty(&theta, &state).unwrap() >= 0.0);
    }

    #[test]
    fn importance_stays_nonnegative_through_consolidation(seed in 0u64..1000) {
        let m = tiny_model(seed);
        let batch = random_batch(24, 3, 3, seed ^ 11);
        let mut state = RegularizerState::new(Method::OnlineEwc, 1.0, m.param_count());
        for task in 0..3 {
            let imp = ewc_importance(&m, &batch, 16, seed + task).unwrap();
            prop_assert!(imp.iter().all(|&v| v >= 0.0));
            consolidate(&mut state, &m, &imp).unwrap();
            for anchor in &state.anchors {
                prop_assert!(anchor.importance.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn replay_weight_is_inverse_task_index() {
    for tau in 1..=10 {
        assert_eq!(replay_fraction(tau), 1.0 / tau as f64);
    }
    let rs: Vec<f64> = (1..=5).map(replay_fraction).collect();
    assert!(rs.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn poison_labels_are_bitwise_clean() {
    let m = tiny_model(5);
    let targeted = random_batch(40, 3, 3, 6);
    let carrier = random_batch(40, 3, 3, 7);
    let rows = vec![3usize, 11, 20, 31];
    let cfg = PacolConfig::new(0.1, 2, 8, Distance::L2, 9);
    let artifact = make_pacol_poison(&m, &targeted, &carrier, &rows, 4, &cfg).unwrap();
    for (i, &row) in rows.iter().enumerate() {
        assert_eq!(artifact.labels[i], carrier.labels[row]);
    }
}

#[test]
fn param_gradient_matches_finite_differences() {
    let m = tiny_model(13);
    let x = random_inputs(8, 3, 14);
    let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let (_, grad) = m.loss_and_param_grad(&x, &y).unwrap();
    let h = 1e-6;
    for i in 0..m.param_count() {
        let mut plus = m.clone();
        plus.params[i] += h;
        let mut minus = m.clone();
        minus.params[i] -= h;
        let (lp, _) = plus.loss_and_param_grad(&x, &y).unwrap();
        let (lm, _) = minus.loss_and_param_grad(&x, &y).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let scale = fd.abs().max(grad[i].abs()).max(1e-4);
        assert!(
            (grad[i] - fd).abs() / scale <= 1e-3,
            "param {i}: analytic {} vs fd {fd}",
            grad[i]
        );
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let m = tiny_model(17);
    let x = random_inputs(4, 3, 18);
    let y: Vec<usize> = (0..4).map(|i| i % 3).collect();
    let grad = m.input_grad_ce(&x, &y).unwrap();
    let h = 1e-6;
    let loss_of = |x: &ArrayD<f64>| m.loss_and_param_grad(x, &y).unwrap().0;
    for idx in 0..x.len() {
        let flat: Vec<usize> = {
            let (n, d) = (idx / 3, idx % 3);
            vec![n, d]
        };
        let mut plus = x.clone();
        plus[IxDyn(&flat)] += h;
        let mut minus = x.clone();
        minus[IxDyn(&flat)] -= h;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        let g = grad[IxDyn(&flat)];
        let scale = fd.abs().max(g.abs()).max(1e-4);
        assert!(
            (g - fd).abs() / scale <= 1e-3,
            "input {idx}: analytic {g} vs fd {fd}"
        );
    }
}

#[test]
fn crafting_is_bitwise_deterministic() {
    let m = tiny_model(23);
    let targeted = random_batch(40, 3, 3, 24);
    let carrier = random_batch(40, 3, 3, 25);
    let rows = vec![1usize, 9, 17, 33];
    let cfg = PacolConfig::new(0.12, 3, 10, Distance::L2, 26);
    let a = make_pacol_poison(&m, &targeted, &carrier, &rows, 4, &cfg).unwrap();
    let b = make_pacol_poison(&m, &targeted, &carrier, &rows, 4, &cfg).unwrap();
    assert_eq!(a.labels, b.labels);
    for (x, y) in a.inputs.iter().zip(b.inputs.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let batch = random_batch(64, 3, 3, 31);
    let cfg = TrainConfig {
        iterations: 25,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 32,
    };
    let run = || {
        let mut m = tiny_model(30);
        let mut state = RegularizerState::new(Method::Ewc, 0.0, m.param_count());
        train_task(&mut m, &batch, &mut state, &cfg).unwrap();
        m.params
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn select_then_inject_preserves_clean_rows() {
    use pacol::data::{
        apply_poison, select_carrier_indices, AttackKind, PoisonPlan, Scenario, TaskData,
        TaskStream,
    };
    use std::sync::Arc;

    let tasks: Vec<TaskData> = (0..3)
        .map(|t| TaskData {
            train: Arc::new(random_batch(50, 3, 3, 40 + t)),
            validation: Arc::new(random_batch(20, 3, 3, 50 + t)),
        })
        .collect();
    let stream = TaskStream {
        tasks,
        scenario: Scenario::DomainIncremental,
        classes_per_task: vec![vec![0, 1, 2]; 3],
        num_classes: 3,
        seed: 40,
    };
    let plan = PoisonPlan {
        targeted_task: 0,
        carrier_tasks: vec![2],
        ratio: 0.1,
        attack_kind: AttackKind::Pacol,
        seed: 60,
    };
    let rows = select_carrier_indices(&stream, &plan).unwrap();
    let m = tiny_model(61);
    let artifact = make_pacol_poison(
        &m,
        &stream.tasks[0].train,
        &stream.tasks[2].train,
        &rows[0],
        2,
        &PacolConfig::new(0.1, 1, 5, Distance::L2, 62),
    )
    .unwrap();
    let poisoned = apply_poison(&stream, &plan, &[artifact]).unwrap();
    let clean = &stream.tasks[2].train;
    let dirty = &poisoned.tasks[2].train;
    assert_eq!(clean.len(), dirty.len());
    for i in 0..clean.len() {
        if !dirty.poison_mask[i] {
            let a = clean.inputs.index_axis(Axis(0), i);
            let b = dirty.inputs.index_axis(Axis(0), i);
            assert_eq!(a, b);
            assert_eq!(clean.labels[i], dirty.labels[i]);
        }
    }
    assert_eq!(dirty.poison_mask.iter().filter(|&&p| p).count(), rows[0].len());
}
