//! Deep generative replay: a WGAN-GP scholar plus mixture training.
//!
//! The gradient penalty needs the parameter gradient of a function of the
//! critic's input gradient. That mixed second derivative is computed with
//! the same forward-mode trick the attack uses, with the roles swapped: the
//! interpolated inputs carry the tangent and the tangent of the critic's
//! parameter gradient is read off the backward pass.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledBatch;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::nn::{sum_outputs, Adam, AdamConfig, Dual, Mode, Net, Node, ParamView, Scalar};
use crate::regularizer::{gather_rows, TrainConfig};

/// WGAN-GP defaults.
pub const GP_COEFFICIENT: f64 = 10.0;
pub const CRITIC_STEPS: usize = 5;
pub const LATENT_DIM: usize = 100;
pub const GAN_ADAM: AdamConfig = AdamConfig {
    lr: 1e-4,
    beta1: 0.5,
    beta2: 0.9,
    eps: 1e-8,
};
/// Paper iteration counts per image family.
pub const GAN_ITERS_MNIST: usize = 8000;
pub const GAN_ITERS_NATURAL: usize = 20000;

#[derive(Debug, Clone)]
pub struct GeneratorState<F: Scalar> {
    pub gen_net: Net,
    pub gen_params: Vec<F>,
    pub critic_net: Net,
    pub critic_params: Vec<F>,
    pub latent_dim: usize,
    pub gp_coefficient: f64,
    pub critic_steps: usize,
    /// Number of tasks whose data the generator has seen.
    pub trained_through_task: usize,
}

impl<F: Scalar> GeneratorState<F> {
    /// Generator/critic pair for 28x28 single-channel images.
    pub fn new_28x28(seed: u64) -> Self {
        let gen_net = Net::new(
            vec![
                Node::Dense {
                    in_dim: LATENT_DIM,
                    out_dim: 32 * 7 * 7,
                },
                Node::Relu,
                Node::Reshape(vec![32, 7, 7]),
                Node::Upsample2,
                Node::Conv {
                    in_c: 32,
                    out_c: 16,
                    k: 3,
                    stride: 1,
                    pad: 1,
                },
                Node::Relu,
                Node::Upsample2,
                Node::Conv {
                    in_c: 16,
                    out_c: 1,
                    k: 3,
                    stride: 1,
                    pad: 1,
                },
                Node::Sigmoid,
            ],
            vec![LATENT_DIM],
        );
        let critic_net = Net::new(
            vec![
                Node::Conv {
                    in_c: 1,
                    out_c: 16,
                    k: 3,
                    stride: 2,
                    pad: 1,
                },
                Node::LeakyRelu(0.2),
                Node::Conv {
                    in_c: 16,
                    out_c: 32,
                    k: 3,
                    stride: 2,
                    pad: 1,
                },
                Node::LeakyRelu(0.2),
                Node::Flatten,
                Node::Dense {
                    in_dim: 32 * 7 * 7,
                    out_dim: 1,
                },
            ],
            vec![1, 28, 28],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen_params = gen_net.init_params::<F, _>(&mut rng);
        let critic_params = critic_net.init_params::<F, _>(&mut rng);
        GeneratorState {
            gen_net,
            gen_params,
            critic_net,
            critic_params,
            latent_dim: LATENT_DIM,
            gp_coefficient: GP_COEFFICIENT,
            critic_steps: CRITIC_STEPS,
            trained_through_task: 0,
        }
    }

    fn sample_latent(&self, n: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
        // Box-Muller standard normals.
        ArrayD::from_shape_fn(IxDyn(&[n, self.latent_dim]), |_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            F::from_f64((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
        })
    }

    /// Generate `n` images (sigmoid head keeps them in [0,1]).
    pub fn generate(&self, n: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
        let z = self.sample_latent(n, rng);
        let mut state = self.gen_net.init_state::<F>();
        let (out, _) = self.gen_net.forward(
            ParamView::plain(&self.gen_params),
            Dual::plain(z),
            Mode::Eval,
            &mut state,
        );
        out.v
    }
}

/// Per-iteration diagnostics of adversarial training.
#[derive(Debug, Default, Clone)]
pub struct GanTrace {
    /// Critic's Wasserstein estimate E[D(real)] - E[D(fake)] per iteration.
    pub wasserstein: Vec<f64>,
    /// Gradient-penalty value per critic step.
    pub grad_penalty: Vec<f64>,
}

fn critic_param_grad<F: Scalar>(
    net: &Net,
    params: &[F],
    x: Dual<F>,
    seed_scale: F,
) -> (F, Vec<F>, ArrayD<F>, Option<Vec<F>>) {
    let mut state = net.init_state::<F>();
    let pv = ParamView::plain(params);
    let (out, tape) = net.forward(pv, x, Mode::Eval, &mut state);
    let (total, _, mut seed) = sum_outputs(&out);
    seed.v.mapv_inplace(|v| v * seed_scale);
    let (gx, gp) = net.backward(pv, &tape, seed);
    (total, gp.v, gx.v, gp.t)
}

/// Adversarial training on `data` inputs (labels ignored): `critic_steps`
/// critic updates per generator update.
pub fn train_generator<F: Scalar>(
    gen: &mut GeneratorState<F>,
    data: &LabeledBatch,
    iterations: usize,
    batch_size: usize,
    seed: u64,
) -> Result<GanTrace> {
    if data.is_empty() {
        return Err(Error::Data("empty generator training data".into()));
    }
    let mut trace = GanTrace::default();
    if iterations == 0 {
        return Ok(trace);
    }
    let n = data.len();
    let b = batch_size.min(n);
    let binv = F::from_f64(1.0 / b as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut critic_adam = Adam::<F>::new(GAN_ADAM, gen.critic_params.len());
    let mut gen_adam = Adam::<F>::new(GAN_ADAM, gen.gen_params.len());
    let img_shape = data.inputs.shape()[1..].to_vec();
    let per_sample: usize = img_shape.iter().product();
    for it in 0..iterations {
        for _ in 0..gen.critic_steps {
            let rows: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
            let (real, _) = gather_rows::<F>(data, &rows);
            let fake = gen.generate(b, &mut rng);
            // Critic loss: E[D(fake)] - E[D(real)] + gp.
            let (d_fake, g_fake, _, _) =
                critic_param_grad(&gen.critic_net, &gen.critic_params, Dual::plain(fake.clone()), binv);
            let (d_real, g_real, _, _) =
                critic_param_grad(&gen.critic_net, &gen.critic_params, Dual::plain(real.clone()), -binv);
            let wass = Scalar::to_f64(d_real - d_fake) / b as f64;
            if !wass.is_finite() {
                return Err(Error::NonFinite {
                    context: "critic Wasserstein estimate".into(),
                    detail: format!("iteration {it}"),
                });
            }
            // Interpolates, per-sample input-gradient norms.
            let mut xhat = ArrayD::<F>::zeros(fake.raw_dim());
            for i in 0..b {
                let u = F::from_f64(rng.gen_range(0.0..1.0));
                let mut row = xhat.index_axis_mut(Axis(0), i);
                let r = real.index_axis(Axis(0), i);
                let f = fake.index_axis(Axis(0), i);
                row.assign(&(&r.to_owned() * u + &f.to_owned() * (F::one() - u)));
            }
            let (_, _, gx, _) = critic_param_grad(
                &gen.critic_net,
                &gen.critic_params,
                Dual::plain(xhat.clone()),
                F::one(),
            );
            let gx2 = gx
                .into_shape_with_order(IxDyn(&[b, per_sample]))
                .unwrap();
            let mut penalty = 0.0f64;
            let mut cotangent = ArrayD::<F>::zeros(IxDyn(&[b, per_sample]));
            for i in 0..b {
                let row = gx2.index_axis(Axis(0), i);
                let norm = Scalar::to_f64(row.iter().fold(F::zero(), |a, &v| a + v * v)).sqrt();
                penalty += gen.gp_coefficient * (norm - 1.0).powi(2) / b as f64;
                if norm > 0.0 {
                    let c = F::from_f64(gen.gp_coefficient * 2.0 * (norm - 1.0) / (b as f64 * norm));
                    let mut dst = cotangent.index_axis_mut(Axis(0), i);
                    dst.assign(&row.mapv(|v| v * c));
                }
            }
            trace.grad_penalty.push(penalty);
            trace.wasserstein.push(wass);
            // Mixed term: parameter gradient of the penalty via an input
            // tangent along the cotangent direction.
            let mut full_shape = vec![b];
            full_shape.extend_from_slice(&img_shape);
            let cot = cotangent.into_shape_with_order(IxDyn(&full_shape)).unwrap();
            let (_, _, _, gp_t) = critic_param_grad(
                &gen.critic_net,
                &gen.critic_params,
                Dual::with_tangent(xhat, cot),
                F::one(),
            );
            let gp_t = gp_t.expect("tangent mode yields a parameter-gradient tangent");
            let mut grad = g_fake;
            for i in 0..grad.len() {
                grad[i] = grad[i] + g_real[i] + gp_t[i];
            }
            critic_adam.step(&mut gen.critic_params, &grad);
        }
        // Generator step: minimize -E[D(fake)].
        let z = gen.sample_latent(b, &mut rng);
        let mut gstate = gen.gen_net.init_state::<F>();
        let gpv = ParamView::plain(&gen.gen_params);
        let (fake, gtape) = gen
            .gen_net
            .forward(gpv, Dual::plain(z), Mode::Eval, &mut gstate);
        let mut cstate = gen.critic_net.init_state::<F>();
        let cpv = ParamView::plain(&gen.critic_params);
        let (out, ctape) = gen
            .critic_net
            .forward(cpv, Dual::plain(fake.v), Mode::Eval, &mut cstate);
        let (_, _, mut seed) = sum_outputs(&out);
        seed.v.mapv_inplace(|v| v * (-binv));
        let (gx, _) = gen.critic_net.backward(cpv, &ctape, seed);
        let (_, ggrad) = gen.gen_net.backward(gpv, &gtape, gx);
        gen_adam.step(&mut gen.gen_params, &ggrad.v);
    }
    Ok(trace)
}

/// Draw replayed pseudo-samples labeled by the previous solver's argmax.
pub fn sample_replay<F: Scalar>(
    gen: &GeneratorState<F>,
    previous_solver: &Classifier<F>,
    count: usize,
    seed: u64,
) -> Result<LabeledBatch> {
    if gen.trained_through_task == 0 {
        return Err(Error::Config(
            "generator has not been trained on any task yet".into(),
        ));
    }
    let mut shape = vec![count];
    shape.extend_from_slice(&gen.critic_net.input_shape);
    if count == 0 {
        return Ok(LabeledBatch::clean(ArrayD::zeros(IxDyn(&shape)), vec![]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = gen.generate(count, &mut rng);
    let logits = previous_solver.logits(&images)?;
    let labels: Vec<usize> = (0..count)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let inputs = images.mapv(|v| (Scalar::to_f64(v) as f32).clamp(0.0, 1.0));
    Ok(LabeledBatch::clean(inputs.into_dyn(), labels))
}

/// Iteration counts for one deep-generative-replay task.
#[derive(Debug, Clone, Copy)]
pub struct DgrConfig {
    pub generator_iterations: usize,
    pub gan_batch_size: usize,
}

impl Default for DgrConfig {
    fn default() -> Self {
        DgrConfig {
            generator_iterations: GAN_ITERS_MNIST,
            gan_batch_size: 64,
        }
    }
}

/// Weight on the current task's loss at task index `tau` (1-based); the
/// remaining 1 - r goes to replayed pseudo-data.
pub fn replay_fraction(tau: usize) -> f64 {
    assert!(tau >= 1, "task index tau starts at 1");
    1.0 / tau as f64
}

/// Train the solver on the r-weighted mixture (r = 1/tau) of the current
/// task and replayed pseudo-data, then retrain the generator on the same
/// mixture. Returns the per-iteration objective trace.
pub fn train_task_dgr<F: Scalar>(
    solver: &mut Classifier<F>,
    gen: &mut GeneratorState<F>,
    task: &LabeledBatch,
    tau: usize,
    cfg: &TrainConfig,
    dgr: &DgrConfig,
) -> Result<Vec<f64>> {
    if tau == 0 {
        return Err(Error::Config("task index tau starts at 1".into()));
    }
    if task.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let r = replay_fraction(tau);
    let replaying = tau > 1;
    if replaying && gen.trained_through_task == 0 {
        return Err(Error::Config(
            "replay requested but the generator was never trained".into(),
        ));
    }
    let previous = if replaying { Some(solver.clone()) } else { None };
    let n = task.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut adam = Adam::<F>::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
        solver.param_count(),
    );
    let rf = F::from_f64(r);
    let cf = F::from_f64(1.0 - r);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let take = cfg.batch_size.min(n);
        if cursor + take > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + take];
        cursor += take;
        let (x, y) = gather_rows::<F>(task, idx);
        let (l_real, g_real) = solver
            .train_step_grads(&x, &y)
            .map_err(|e| e.in_stage(&format!("replay-mixture iteration {it}")))?;
        let mut obj = r * Scalar::to_f64(l_real);
        let mut grad: Vec<F> = g_real.iter().map(|&g| g * rf).collect();
        if let Some(prev) = &previous {
            let replay = sample_replay(gen, prev, take, cfg.seed ^ (it as u64 + 1))?;
            let (rx, ry) = gather_rows::<F>(&replay, &(0..take).collect::<Vec<_>>());
            let (l_rep, g_rep) = solver
                .train_step_grads(&rx, &ry)
                .map_err(|e| e.in_stage(&format!("replay-mixture iteration {it}")))?;
            obj += (1.0 - r) * Scalar::to_f64(l_rep);
            for i in 0..grad.len() {
                grad[i] = grad[i] + g_rep[i] * cf;
            }
        }
        if !obj.is_finite() {
            return Err(Error::NonFinite {
                context: "replay-mixture objective".into(),
                detail: format!("iteration {it}"),
            });
        }
        trace.push(obj);
        adam.step(&mut solver.params, &grad);
    }
    // Generator mixture pool: same size as the task, r-proportioned.
    let pool = if replaying {
        let real_count = ((r * n as f64).round() as usize).clamp(1, n);
        let replay_count = n - real_count;
        let rows = rand::seq::index::sample(&mut rng, n, real_count).into_vec();
        let real = task.inputs.select(Axis(0), &rows);
        let replay = sample_replay(gen, previous.as_ref().unwrap(), replay_count, cfg.seed ^ 0xD6)?;
        let inputs = ndarray::concatenate(Axis(0), &[real.view(), replay.inputs.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut labels: Vec<usize> = rows.iter().map(|&i| task.labels[i]).collect();
        labels.extend_from_slice(&replay.labels);
        LabeledBatch::clean(inputs, labels)
    } else {
        LabeledBatch::clean(task.inputs.clone(), task.labels.clone())
    };
    train_generator(
        gen,
        &pool,
        dgr.generator_iterations,
        dgr.gan_batch_size,
        cfg.seed ^ 0xA5A5,
    )
    .map_err(|e| e.in_stage(&format!("generator training after task {tau}")))?;
    gen.trained_through_task = gen.trained_through_task.max(tau);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, ModelSpec};

    fn toy_images(n: usize, seed: u64) -> LabeledBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabeledBatch::clean(
            ArrayD::from_shape_fn(IxDyn(&[n, 1, 28, 28]), |_| rng.gen_range(0.0..1.0f32)),
            (0..n).map(|i| i % 2).collect(),
        )
    }

    fn solver_spec() -> ModelSpec {
        ModelSpec::new(Architecture::Mlp100x2, vec![1, 28, 28], 2, 3)
    }

    #[test]
    fn zero_iterations_leave_generator_unchanged() {
        let mut gen = GeneratorState::<f32>::new_28x28(0);
        let before = gen.gen_params.clone();
        let t = train_generator(&mut gen, &toy_images(8, 0), 0, 4, 1).unwrap();
        assert_eq!(gen.gen_params, before);
        assert!(t.wasserstein.is_empty());
    }

    #[test]
    fn gan_steps_run_and_penalty_nonnegative() {
        let mut gen = GeneratorState::<f32>::new_28x28(1);
        let before_critic = gen.critic_params.clone();
        let t = train_generator(&mut gen, &toy_images(16, 2), 2, 4, 3).unwrap();
        assert_eq!(t.wasserstein.len(), 2 * CRITIC_STEPS);
        assert!(t.grad_penalty.iter().all(|&p| p >= 0.0));
        assert_ne!(gen.critic_params, before_critic);
    }

    #[test]
    fn generated_samples_in_range() {
        let gen = GeneratorState::<f32>::new_28x28(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs = gen.generate(5, &mut rng);
        assert_eq!(imgs.shape(), &[5, 1, 28, 28]);
        assert!(imgs.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn replay_labels_and_guards() {
        let mut gen = GeneratorState::<f32>::new_28x28(3);
        let prev = Classifier::<f32>::build(&solver_spec()).unwrap();
        assert!(sample_replay(&gen, &prev, 4, 0).is_err());
        gen.trained_through_task = 1;
        let empty = sample_replay(&gen, &prev, 0, 0).unwrap();
        assert!(empty.is_empty());
        let batch = sample_replay(&gen, &prev, 6, 0).unwrap();
        assert_eq!(batch.len(), 6);
        assert!(batch.labels.iter().all(|&l| l < 2));
        assert!(batch.poison_mask.iter().all(|&m| !m));
        assert!(batch.inputs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Same seed, same pseudo-samples.
        let again = sample_replay(&gen, &prev, 6, 0).unwrap();
        assert_eq!(batch.inputs, again.inputs);
    }

    #[test]
    fn first_task_matches_plain_training() {
        let task = toy_images(32, 4);
        let cfg = TrainConfig {
            iterations: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 5,
        };
        let dgr = DgrConfig {
            generator_iterations: 0,
            gan_batch_size: 4,
        };
        let mut a = Classifier::<f32>::build(&solver_spec()).unwrap();
        let mut gen = GeneratorState::<f32>::new_28x28(6);
        train_task_dgr(&mut a, &mut gen, &task, 1, &cfg, &dgr).unwrap();
        // Plain training with the identical batch schedule.
        let mut b = Classifier::<f32>::build(&solver_spec()).unwrap();
        let mut state =
            crate::regularizer::RegularizerState::new(crate::regularizer::Method::Ewc, 0.0, b.param_count());
        crate::regularizer::train_task(&mut b, &task, &mut state, &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn mixture_weight_follows_task_index() {
        // r = 1/tau decreases strictly over the sequence.
        let rs: Vec<f64> = (1..=5).map(|t| 1.0 / t as f64).collect();
        assert_eq!(rs[0], 1.0);
        assert_eq!(rs[1], 0.5);
        assert_eq!(rs[4], 0.2);
        assert!(rs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn second_task_uses_replay() {
        let cfg = TrainConfig {
            iterations: 4,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 7,
        };
        let dgr = DgrConfig {
            generator_iterations: 1,
            gan_batch_size: 4,
        };
        let mut solver = Classifier::<f32>::build(&solver_spec()).unwrap();
        let mut gen = GeneratorState::<f32>::new_28x28(8);
        // Replay before any generator training is rejected.
        assert!(train_task_dgr(&mut solver, &mut gen, &toy_images(16, 9), 2, &cfg, &dgr).is_err());
        train_task_dgr(&mut solver, &mut gen, &toy_images(16, 9), 1, &cfg, &dgr).unwrap();
        assert_eq!(gen.trained_through_task, 1);
        let trace = train_task_dgr(&mut solver, &mut gen, &toy_images(16, 10), 2, &cfg, &dgr).unwrap();
        assert_eq!(trace.len(), 4);
        assert_eq!(gen.trained_through_task, 2);
    }
}
