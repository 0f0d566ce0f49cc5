//! Label-flipping and gradient-collision poisoning.
//!
//! The clean-label attack crafts bounded perturbations of carrier samples so
//! that the parameter gradient of the carrier batch imitates the gradient of
//! the targeted task under flipped labels. Crafting alternates K times
//! between S projected sign-steps on the poison pixels and one optimizer
//! step on a private copy of the reference model.

use ndarray::{ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AttackKind, LabeledBatch, PoisonArtifact};
use crate::error::{Error, Result};
use crate::models::{Architecture, Classifier, ModelSpec};
use crate::nn::{Adam, AdamConfig, Scalar};
use crate::regularizer::{gather_rows, train_task, RegularizerState, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    L2,
    NegCosine,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlipSpec {
    pub num_classes: usize,
    pub seed: u64,
}

/// Flip every label: binary labels are negated (0 <-> 1), multiclass labels
/// are shifted by one random offset z in {1, ..., C-2} drawn per call.
pub fn flip_labels(y: &[usize], spec: &FlipSpec) -> Result<Vec<usize>> {
    let c = spec.num_classes;
    if c < 2 {
        return Err(Error::Config("label flipping needs at least 2 classes".into()));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    if c == 2 {
        return Ok(y.iter().map(|&l| 1 - l).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let z = rng.gen_range(1..=c - 2);
    Ok(y.iter().map(|&l| (l + z) % c).collect())
}

/// Draw `budget` targeted-task samples, flip their labels, and bind them to
/// a carrier for append-injection.
pub fn make_label_flip_poison(
    targeted_train: &LabeledBatch,
    carrier_task: usize,
    budget: usize,
    spec: &FlipSpec,
) -> Result<PoisonArtifact> {
    if budget == 0 {
        return Err(Error::Config("empty poison budget".into()));
    }
    if budget > targeted_train.len() {
        return Err(Error::Config(format!(
            "budget {budget} exceeds targeted task size {}",
            targeted_train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = rand::seq::index::sample(&mut rng, targeted_train.len(), budget).into_vec();
    rows.sort_unstable();
    let inputs = targeted_train.inputs.select(Axis(0), &rows);
    let true_labels: Vec<usize> = rows.iter().map(|&i| targeted_train.labels[i]).collect();
    let labels = flip_labels(&true_labels, spec)?;
    debug_assert!(labels.iter().zip(&true_labels).all(|(a, b)| a != b));
    Ok(PoisonArtifact {
        kind: AttackKind::LabelFlip,
        carrier_task,
        inputs,
        labels,
        replace_indices: None,
        origin_indices: rows,
        perturbation_linf: 0.0,
    })
}

/// Distance between two gradient vectors: squared Euclidean, or negated
/// cosine similarity (in [-1, 1], lower means more aligned).
pub fn grad_distance<F: Scalar>(p: &[F], q: &[F], kind: Distance) -> Result<F> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "gradient lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    match kind {
        Distance::L2 => {
            let mut acc = F::zero();
            for i in 0..p.len() {
                let d = p[i] - q[i];
                acc = acc + d * d;
            }
            Ok(acc)
        }
        Distance::NegCosine => {
            let (mut dot, mut np, mut nq) = (F::zero(), F::zero(), F::zero());
            for i in 0..p.len() {
                dot = dot + p[i] * q[i];
                np = np + p[i] * p[i];
                nq = nq + q[i] * q[i];
            }
            if np == F::zero() || nq == F::zero() {
                return Err(Error::Data(
                    "cosine distance undefined for a zero-norm gradient".into(),
                ));
            }
            Ok(-(dot / (np.sqrt() * nq.sqrt())))
        }
    }
}

/// Gradient of `grad_distance(p, q, kind)` with respect to `p`.
fn distance_grad_wrt_p<F: Scalar>(p: &[F], q: &[F], kind: Distance) -> Option<Vec<F>> {
    match kind {
        Distance::L2 => Some(
            p.iter()
                .zip(q)
                .map(|(&a, &b)| F::from_f64(2.0) * (a - b))
                .collect(),
        ),
        Distance::NegCosine => {
            let (mut dot, mut np2, mut nq2) = (F::zero(), F::zero(), F::zero());
            for i in 0..p.len() {
                dot = dot + p[i] * q[i];
                np2 = np2 + p[i] * p[i];
                nq2 = nq2 + q[i] * q[i];
            }
            if np2 == F::zero() || nq2 == F::zero() {
                return None;
            }
            let np = np2.sqrt();
            let nq = nq2.sqrt();
            // d/dp [-(p.q)/(|p||q|)] = -q/(|p||q|) + (p.q) p / (|p|^3 |q|)
            let a = -(F::one() / (np * nq));
            let b = dot / (np * np2 * nq);
            Some(
                p.iter()
                    .zip(q)
                    .map(|(&pi, &qi)| a * qi + b * pi)
                    .collect(),
            )
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PacolConfig {
    /// Per-pixel perturbation bound in [0,1] units.
    pub epsilon: f64,
    /// Inner sign-step size.
    pub alpha: f64,
    /// Outer loops (reference-model updates).
    pub loops: usize,
    /// Inner perturbation steps per loop.
    pub steps: usize,
    pub distance: Distance,
    /// Learning rate for the crafting-time model updates.
    pub model_lr: f64,
    pub seed: u64,
}

impl PacolConfig {
    pub fn new(epsilon: f64, loops: usize, steps: usize, distance: Distance, seed: u64) -> Self {
        PacolConfig {
            epsilon,
            alpha: if steps > 0 { 2.0 * epsilon / steps as f64 } else { 0.0 },
            loops,
            steps,
            distance,
            model_lr: 1e-4,
            seed,
        }
    }

    /// Paper defaults against importance-regularized victims.
    pub fn for_regularization(distance: Distance, seed: u64) -> Self {
        PacolConfig::new(25.5 / 255.0, 10, 40, distance, seed)
    }

    /// Paper defaults against generative-replay victims.
    pub fn for_replay(distance: Distance, seed: u64) -> Self {
        PacolConfig::new(16.0 / 255.0, 15, 40, distance, seed)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0,1]", self.epsilon)));
        }
        if self.steps > 0 && self.epsilon > 0.0 && self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be positive when steps > 0".into()));
        }
        Ok(())
    }
}

/// Result of one crafting call.
pub struct PacolOutput<F: Scalar> {
    pub x_adv: ArrayD<F>,
    pub perturbation_linf: f64,
    /// Distance `H` before each inner step, at the loop's frozen parameters.
    pub trace: Vec<f64>,
    /// Inner steps skipped because a cosine gradient had zero norm.
    pub skipped_steps: usize,
}

/// Craft clean-label poisons from the carrier batch so its parameter
/// gradient collides with the flipped targeted gradient. Perturbations stay
/// in the epsilon-ball around the original carrier inputs and in [0,1].
pub fn craft_pacol<F: Scalar>(
    reference: &Classifier<F>,
    targeted_x: &ArrayD<F>,
    targeted_y_adv: &[usize],
    carrier_x: &ArrayD<F>,
    carrier_y: &[usize],
    cfg: &PacolConfig,
) -> Result<PacolOutput<F>> {
    cfg.validate()?;
    let mut model = reference.clone();
    let mut adam = Adam::<F>::new(
        AdamConfig {
            lr: cfg.model_lr,
            ..AdamConfig::default()
        },
        model.param_count(),
    );
    let x0 = carrier_x.clone();
    let mut x_adv = carrier_x.clone();
    let eps = F::from_f64(cfg.epsilon);
    let alpha = F::from_f64(cfg.alpha);
    let mut trace = Vec::with_capacity(cfg.loops * cfg.steps);
    let mut skipped = 0usize;
    for k in 0..cfg.loops {
        let (_, delta_lf) = model
            .loss_and_param_grad(targeted_x, targeted_y_adv)
            .map_err(|e| e.in_stage(&format!("crafting loop {k}, flipped gradient")))?;
        for s in 0..cfg.steps {
            let (_, delta_adv) = model
                .loss_and_param_grad(&x_adv, carrier_y)
                .map_err(|e| e.in_stage(&format!("crafting loop {k} step {s}")))?;
            match grad_distance(&delta_adv, &delta_lf, cfg.distance) {
                Ok(h) => {
                    let h = Scalar::to_f64(h);
                    if !h.is_finite() {
                        return Err(Error::NonFinite {
                            context: "crafting objective".into(),
                            detail: format!("loop {k}, step {s}"),
                        });
                    }
                    trace.push(h);
                }
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            }
            let w = match distance_grad_wrt_p(&delta_adv, &delta_lf, cfg.distance) {
                Some(w) => w,
                None => {
                    skipped += 1;
                    continue;
                }
            };
            let gx = model
                .input_grad_of_weighted_param_grad(&x_adv, carrier_y, &w)
                .map_err(|e| e.in_stage(&format!("crafting loop {k} step {s}")))?;
            if gx.iter().any(|v| !Scalar::to_f64(*v).is_finite()) {
                return Err(Error::NonFinite {
                    context: "crafting input gradient".into(),
                    detail: format!("loop {k}, step {s}"),
                });
            }
            // Descend the distance with a sign step, then project.
            ndarray::Zip::from(&mut x_adv)
                .and(&gx)
                .and(&x0)
                .for_each(|x, &g, &o| {
                    let step = if g > F::zero() {
                        -alpha
                    } else if g < F::zero() {
                        alpha
                    } else {
                        F::zero()
                    };
                    let mut v = *x + step;
                    v = v.min(o + eps).max(o - eps);
                    *x = v.min(F::one()).max(F::zero());
                });
        }
        // One optimizer pass on the poisons with their clean labels.
        let (_, g) = model
            .train_step_grads(&x_adv, carrier_y)
            .map_err(|e| e.in_stage(&format!("crafting loop {k}, model update")))?;
        adam.step(&mut model.params, &g);
    }
    let linf = x_adv
        .iter()
        .zip(x0.iter())
        .map(|(&a, &b)| Scalar::to_f64((a - b).abs()))
        .fold(0.0, f64::max);
    Ok(PacolOutput {
        x_adv,
        perturbation_linf: linf,
        trace,
        skipped_steps: skipped,
    })
}

/// Craft one carrier's poison artifact: pick flipped targeted samples the
/// same size as the carrier budget, run the crafting loop, and package the
/// perturbed rows with their untouched clean labels.
pub fn make_pacol_poison<F: Scalar>(
    reference: &Classifier<F>,
    targeted_train: &LabeledBatch,
    carrier_train: &LabeledBatch,
    carrier_rows: &[usize],
    carrier_task: usize,
    cfg: &PacolConfig,
) -> Result<PoisonArtifact> {
    if carrier_rows.is_empty() {
        return Err(Error::Config("empty poison budget".into()));
    }
    let m = carrier_rows.len();
    if m > targeted_train.len() {
        return Err(Error::Config(format!(
            "carrier budget {m} exceeds targeted task size {}",
            targeted_train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pair_rows = rand::seq::index::sample(&mut rng, targeted_train.len(), m).into_vec();
    let (tx, ty) = gather_rows::<F>(targeted_train, &pair_rows);
    let ty_adv = flip_labels(
        &ty,
        &FlipSpec {
            num_classes: reference.spec.num_classes,
            seed: cfg.seed,
        },
    )?;
    let (cx, cy) = gather_rows::<F>(carrier_train, carrier_rows);
    let out = craft_pacol(reference, &tx, &ty_adv, &cx, &cy, cfg)?;
    Ok(PoisonArtifact {
        kind: AttackKind::Pacol,
        carrier_task,
        inputs: out
            .x_adv
            .mapv(|v| (Scalar::to_f64(v) as f32).clamp(0.0, 1.0)),
        labels: cy,
        replace_indices: Some(carrier_rows.to_vec()),
        origin_indices: carrier_rows.to_vec(),
        perturbation_linf: out.perturbation_linf as f32,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThreatKind {
    White,
    Gray,
    Black,
}

/// The black-box stand-in for each victim architecture.
pub fn alternate_architecture(victim: Architecture) -> Architecture {
    match victim {
        Architecture::Mlp400x2 => Architecture::Mlp100x2,
        Architecture::Mlp100x2 => Architecture::Mlp400x2,
        Architecture::CnnSmall => Architecture::CnnAlt,
        Architecture::CnnAlt => Architecture::CnnSmall,
        Architecture::Resnet20 => Architecture::VggSmall,
        Architecture::VggSmall => Architecture::Resnet20,
    }
}

/// Train a surrogate on auxiliary data from the targeted task. Gray keeps
/// the victim architecture under a fresh seed; black swaps architectures.
pub fn build_surrogate<F: Scalar>(
    kind: ThreatKind,
    victim_spec: &ModelSpec,
    aux: &LabeledBatch,
    cfg: &TrainConfig,
) -> Result<Classifier<F>> {
    if kind == ThreatKind::White {
        return Err(Error::Config(
            "white-box attacks read the victim directly; no surrogate to build".into(),
        ));
    }
    if aux.is_empty() {
        return Err(Error::Data("empty auxiliary dataset".into()));
    }
    let mut spec = victim_spec.clone();
    spec.init_seed = cfg.seed.wrapping_add(0x5u64.rotate_left(61));
    if kind == ThreatKind::Black {
        spec.architecture = alternate_architecture(victim_spec.architecture);
    }
    let mut surrogate = Classifier::<F>::build(&spec)?;
    let mut state = RegularizerState::new(crate::regularizer::Method::Ewc, 0.0, surrogate.param_count());
    train_task(&mut surrogate, aux, &mut state, cfg)
        .map_err(|e| e.in_stage("surrogate training"))?;
    Ok(surrogate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Net, Node};
    use ndarray::IxDyn;

    #[test]
    fn flip_never_fixes_a_point() {
        for c in [2usize, 3, 10] {
            for seed in 0..20 {
                let spec = FlipSpec {
                    num_classes: c,
                    seed,
                };
                let y: Vec<usize> = (0..50).map(|i| i % c).collect();
                let f = flip_labels(&y, &spec).unwrap();
                assert!(f.iter().zip(&y).all(|(a, b)| a != b));
                assert!(f.iter().all(|&l| l < c));
            }
        }
        assert!(flip_labels(&[0], &FlipSpec { num_classes: 1, seed: 0 }).is_err());
    }

    #[test]
    fn flip_is_modular_shift() {
        let spec = FlipSpec {
            num_classes: 10,
            seed: 3,
        };
        let y: Vec<usize> = (0..10).collect();
        let f = flip_labels(&y, &spec).unwrap();
        let z = (f[0] + 10 - y[0]) % 10;
        assert!((1..=8).contains(&z));
        assert!(f.iter().zip(&y).all(|(&a, &b)| a == (b + z) % 10));
        // Binary: negation.
        let bspec = FlipSpec {
            num_classes: 2,
            seed: 0,
        };
        assert_eq!(flip_labels(&[0, 1, 1], &bspec).unwrap(), vec![1, 0, 0]);
    }

    #[test]
    fn label_flip_artifact_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = LabeledBatch::clean(
            ArrayD::from_shape_fn(IxDyn(&[60, 1, 4, 4]), |_| rng.gen_range(0.0..1.0f32)),
            (0..60).map(|i| i % 10).collect(),
        );
        let spec = FlipSpec {
            num_classes: 10,
            seed: 8,
        };
        let a = make_label_flip_poison(&batch, 4, 12, &spec).unwrap();
        assert_eq!(a.labels.len(), 12);
        assert_eq!(a.kind, AttackKind::LabelFlip);
        assert!(a.replace_indices.is_none());
        for (r, &row) in a.origin_indices.iter().enumerate() {
            assert_ne!(a.labels[r], batch.labels[row]);
            assert_eq!(
                a.inputs.index_axis(Axis(0), r),
                batch.inputs.index_axis(Axis(0), row)
            );
        }
        let b = make_label_flip_poison(&batch, 4, 12, &spec).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.origin_indices, b.origin_indices);
        assert!(make_label_flip_poison(&batch, 4, 0, &spec).is_err());
        assert!(make_label_flip_poison(&batch, 4, 61, &spec).is_err());
    }

    #[test]
    fn distance_identities() {
        let p = [1.0f64, 0.0];
        let q = [0.0f64, 1.0];
        assert_eq!(grad_distance(&p, &p, Distance::L2).unwrap(), 0.0);
        assert_eq!(grad_distance(&p, &q, Distance::L2).unwrap(), 2.0);
        assert!((grad_distance(&p, &p, Distance::NegCosine).unwrap() + 1.0).abs() < 1e-12);
        let np = [-1.0f64, 0.0];
        assert!((grad_distance(&p, &np, Distance::NegCosine).unwrap() - 1.0).abs() < 1e-12);
        assert!(grad_distance(&[0.0, 0.0], &p, Distance::NegCosine).is_err());
        assert!(grad_distance(&p, &q[..1], Distance::L2).is_err());
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let p = [0.4f64, -0.9, 1.3];
        let q = [1.0f64, 0.2, -0.5];
        for kind in [Distance::L2, Distance::NegCosine] {
            let g = distance_grad_wrt_p(&p, &q, kind).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                let mut pp = p;
                pp[i] += h;
                let fp = grad_distance(&pp, &q, kind).unwrap();
                pp[i] -= 2.0 * h;
                let fm = grad_distance(&pp, &q, kind).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6, "{kind:?} coord {i}: {fd} vs {}", g[i]);
            }
        }
    }

    fn logistic_reference() -> Classifier<f64> {
        Classifier {
            spec: ModelSpec::new(Architecture::Mlp100x2, vec![2], 2, 0),
            net: Net::new(vec![Node::Dense { in_dim: 2, out_dim: 2 }], vec![2]),
            params: vec![0.5, -0.3, 0.2, 0.8, 0.0, 0.0],
            state: vec![],
        }
    }

    fn craft_setup() -> (Classifier<f64>, ArrayD<f64>, Vec<usize>, ArrayD<f64>, Vec<usize>) {
        let m = logistic_reference();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tx = ArrayD::from_shape_fn(IxDyn(&[8, 2]), |_| rng.gen_range(0.0..1.0));
        let ty: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let ty_adv: Vec<usize> = ty.iter().map(|&l| 1 - l).collect();
        let cx = ArrayD::from_shape_fn(IxDyn(&[8, 2]), |_| rng.gen_range(0.0..1.0));
        let cy: Vec<usize> = (0..8).map(|i| (i + 1) % 2).collect();
        (m, tx, ty_adv, cx, cy)
    }

    #[test]
    fn degenerate_configs_leave_inputs_unchanged() {
        let (m, tx, ty_adv, cx, cy) = craft_setup();
        let zero_eps = PacolConfig::new(0.0, 3, 5, Distance::L2, 0);
        let out = craft_pacol(&m, &tx, &ty_adv, &cx, &cy, &zero_eps).unwrap();
        assert_eq!(out.x_adv, cx);
        assert_eq!(out.perturbation_linf, 0.0);
        let zero_steps = PacolConfig::new(0.1, 3, 0, Distance::L2, 0);
        let out = craft_pacol(&m, &tx, &ty_adv, &cx, &cy, &zero_steps).unwrap();
        assert_eq!(out.x_adv, cx);
    }

    #[test]
    fn crafting_respects_ball_and_is_deterministic() {
        let (m, tx, ty_adv, cx, cy) = craft_setup();
        let cfg = PacolConfig::new(0.1, 4, 10, Distance::L2, 0);
        let out = craft_pacol(&m, &tx, &ty_adv, &cx, &cy, &cfg).unwrap();
        for (a, b) in out.x_adv.iter().zip(cx.iter()) {
            assert!((a - b).abs() <= cfg.epsilon + 1e-6);
            assert!((0.0..=1.0).contains(a));
        }
        assert!(out.perturbation_linf <= cfg.epsilon + 1e-6);
        let again = craft_pacol(&m, &tx, &ty_adv, &cx, &cy, &cfg).unwrap();
        assert_eq!(out.x_adv, again.x_adv);
        assert_eq!(out.trace, again.trace);
    }

    /// The crafted batch's gradient is strictly closer to the flipped
    /// targeted gradient than the clean batch's was, at the frozen
    /// reference parameters.
    #[test]
    fn crafting_reduces_gradient_distance_on_logistic_model() {
        let (m, tx, ty_adv, cx, cy) = craft_setup();
        for kind in [Distance::L2, Distance::NegCosine] {
            let cfg = PacolConfig::new(0.15, 1, 30, kind, 0);
            let (_, lf) = m.loss_and_param_grad(&tx, &ty_adv).unwrap();
            let (_, before_g) = m.loss_and_param_grad(&cx, &cy).unwrap();
            let before = grad_distance(&before_g, &lf, kind).unwrap();
            let out = craft_pacol(&m, &tx, &ty_adv, &cx, &cy, &cfg).unwrap();
            let (_, after_g) = m.loss_and_param_grad(&out.x_adv, &cy).unwrap();
            let after = grad_distance(&after_g, &lf, kind).unwrap();
            assert!(after < before, "{kind:?}: {after} !< {before}");
        }
    }

    #[test]
    fn most_inner_steps_decrease_distance() {
        let (m, tx, ty_adv, cx, cy) = craft_setup();
        // A fine step size keeps the sign updates from oscillating around
        // the optimum on this tiny problem.
        let cfg = PacolConfig {
            alpha: 0.002,
            ..PacolConfig::new(0.2, 1, 25, Distance::L2, 0)
        };
        let out = craft_pacol(&m, &tx, &ty_adv, &cx, &cy, &cfg).unwrap();
        let pairs = out.trace.windows(2).count();
        let non_increasing = out
            .trace
            .windows(2)
            .filter(|w| w[1] <= w[0] + 1e-12)
            .count();
        assert!(
            non_increasing as f64 >= 0.8 * pairs as f64,
            "{non_increasing}/{pairs} steps non-increasing"
        );
    }

    #[test]
    fn surrogate_architectures() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let aux = LabeledBatch::clean(
            ArrayD::from_shape_fn(IxDyn(&[32, 1, 8, 8]), |_| rng.gen_range(0.0..1.0f32)),
            (0..32).map(|i| i % 3).collect(),
        );
        let victim = ModelSpec::new(Architecture::Mlp400x2, vec![1, 8, 8], 3, 7);
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 2,
        };
        let gray = build_surrogate::<f64>(ThreatKind::Gray, &victim, &aux, &cfg).unwrap();
        assert_eq!(gray.spec.architecture, Architecture::Mlp400x2);
        assert_ne!(gray.spec.init_seed, victim.init_seed);
        let black = build_surrogate::<f64>(ThreatKind::Black, &victim, &aux, &cfg).unwrap();
        assert_eq!(black.spec.architecture, Architecture::Mlp100x2);
        assert!(build_surrogate::<f64>(ThreatKind::White, &victim, &aux, &cfg).is_err());
    }
}
