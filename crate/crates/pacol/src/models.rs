//! Classifier backbones with flat parameter access.
//!
//! Every model exposes the same three views the rest of the crate builds on:
//! parameter gradients (flat vectors), input gradients, and penultimate
//! features. The closed architecture registry covers the victim networks and
//! the surrogates used by the gray/black-box threat models.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Dual, Mode, Net, Node, ParamView, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Mlp400x2,
    Mlp100x2,
    CnnSmall,
    CnnAlt,
    Resnet20,
    VggSmall,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Architecture::Mlp400x2 => "mlp-400x2",
            Architecture::Mlp100x2 => "mlp-100x2",
            Architecture::CnnSmall => "cnn-small",
            Architecture::CnnAlt => "cnn-alt",
            Architecture::Resnet20 => "resnet20",
            Architecture::VggSmall => "vgg-small",
        };
        f.write_str(s)
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mlp-400x2" => Architecture::Mlp400x2,
            "mlp-100x2" => Architecture::Mlp100x2,
            "cnn-small" => Architecture::CnnSmall,
            "cnn-alt" => Architecture::CnnAlt,
            "resnet20" => Architecture::Resnet20,
            "vgg-small" => Architecture::VggSmall,
            other => return Err(Error::Config(format!("unknown architecture id: {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Per-sample input shape, e.g. `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(
        architecture: Architecture,
        input_shape: Vec<usize>,
        num_classes: usize,
        init_seed: u64,
    ) -> Self {
        ModelSpec {
            architecture,
            input_shape,
            num_classes,
            init_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.is_empty() {
            return Err(Error::Config("empty input shape".into()));
        }
        Ok(())
    }
}

fn mlp(flat_in: usize, hidden: usize, c: usize) -> Vec<Node> {
    vec![
        Node::Flatten,
        Node::Dense {
            in_dim: flat_in,
            out_dim: hidden,
        },
        Node::Relu,
        Node::Dense {
            in_dim: hidden,
            out_dim: hidden,
        },
        Node::Relu,
        Node::Dense {
            in_dim: hidden,
            out_dim: c,
        },
    ]
}

fn conv(in_c: usize, out_c: usize, stride: usize) -> Node {
    Node::Conv {
        in_c,
        out_c,
        k: 3,
        stride,
        pad: 1,
    }
}

fn res_block(in_c: usize, out_c: usize, stride: usize) -> Node {
    Node::ResBlock {
        in_c,
        out_c,
        stride,
        body: vec![
            conv(in_c, out_c, stride),
            Node::BatchNorm { c: out_c },
            Node::Relu,
            conv(out_c, out_c, 1),
            Node::BatchNorm { c: out_c },
        ],
    }
}

fn build_nodes(spec: &ModelSpec) -> Result<Vec<Node>> {
    let shape = &spec.input_shape;
    let flat_in: usize = shape.iter().product();
    let c = spec.num_classes;
    let (ch, h, w) = if shape.len() == 3 {
        (shape[0], shape[1], shape[2])
    } else {
        (1, 0, 0)
    };
    let need_image = |arch: &str| -> Result<()> {
        if shape.len() != 3 {
            return Err(Error::Config(format!(
                "{arch} requires a (channels, height, width) input shape, got {shape:?}"
            )));
        }
        Ok(())
    };
    Ok(match spec.architecture {
        Architecture::Mlp400x2 => mlp(flat_in, 400, c),
        Architecture::Mlp100x2 => mlp(flat_in, 100, c),
        Architecture::CnnSmall => {
            need_image("cnn-small")?;
            let (h2, w2) = (h / 4, w / 4);
            vec![
                conv(ch, 32, 1),
                Node::Relu,
                Node::MaxPool2,
                conv(32, 64, 1),
                Node::Relu,
                Node::MaxPool2,
                Node::Flatten,
                Node::Dense {
                    in_dim: 64 * h2 * w2,
                    out_dim: 128,
                },
                Node::Relu,
                Node::Dense {
                    in_dim: 128,
                    out_dim: c,
                },
            ]
        }
        Architecture::CnnAlt => {
            need_image("cnn-alt")?;
            let (h3, w3) = (h / 2 / 2 / 2, w / 2 / 2 / 2);
            vec![
                conv(ch, 16, 1),
                Node::Relu,
                Node::MaxPool2,
                conv(16, 32, 1),
                Node::Relu,
                Node::MaxPool2,
                conv(32, 32, 1),
                Node::Relu,
                Node::MaxPool2,
                Node::Flatten,
                Node::Dense {
                    in_dim: 32 * h3 * w3,
                    out_dim: 100,
                },
                Node::Relu,
                Node::Dense {
                    in_dim: 100,
                    out_dim: c,
                },
            ]
        }
        Architecture::Resnet20 => {
            need_image("resnet20")?;
            let mut nodes = vec![conv(ch, 16, 1), Node::BatchNorm { c: 16 }, Node::Relu];
            for _ in 0..3 {
                nodes.push(res_block(16, 16, 1));
            }
            nodes.push(res_block(16, 32, 2));
            for _ in 0..2 {
                nodes.push(res_block(32, 32, 1));
            }
            nodes.push(res_block(32, 64, 2));
            for _ in 0..2 {
                nodes.push(res_block(64, 64, 1));
            }
            nodes.push(Node::GlobalAvgPool);
            nodes.push(Node::Dense {
                in_dim: 64,
                out_dim: c,
            });
            nodes
        }
        Architecture::VggSmall => {
            need_image("vgg-small")?;
            let mut nodes = Vec::new();
            let mut in_c = ch;
            let mut hh = h;
            let mut ww = w;
            for out_c in [32usize, 32, 64, 64, 128, 128, 256, 256] {
                nodes.push(conv(in_c, out_c, 1));
                nodes.push(Node::Relu);
                in_c = out_c;
            }
            // Pool after each pair of convs.
            let mut pooled = Vec::new();
            for (i, n) in nodes.into_iter().enumerate() {
                pooled.push(n);
                if i % 4 == 3 {
                    pooled.push(Node::MaxPool2);
                    hh /= 2;
                    ww /= 2;
                }
            }
            let mut nodes = pooled;
            nodes.push(Node::Flatten);
            nodes.push(Node::Dense {
                in_dim: 256 * hh * ww,
                out_dim: 256,
            });
            nodes.push(Node::Relu);
            nodes.push(Node::Dense {
                in_dim: 256,
                out_dim: c,
            });
            nodes
        }
    })
}

/// A trainable classifier: a network plus its flat parameter vector and
/// batch-statistic state.
#[derive(Debug, Clone)]
pub struct Classifier<F: Scalar> {
    pub spec: ModelSpec,
    pub net: Net,
    pub params: Vec<F>,
    pub state: Vec<F>,
}

impl<F: Scalar> Classifier<F> {
    /// Deterministic build: identical spec (including seed) gives identical
    /// parameters.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let nodes = build_nodes(spec)?;
        let net = Net::new(nodes, spec.input_shape.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let params = net.init_params::<F, _>(&mut rng);
        let state = net.init_state::<F>();
        Ok(Classifier {
            spec: spec.clone(),
            net,
            params,
            state,
        })
    }

    pub fn param_count(&self) -> usize {
        self.net.param_len
    }

    fn batched_input(&self, x: &ArrayD<F>) -> Result<ArrayD<F>> {
        let mut shape = vec![x.shape()[0]];
        shape.extend_from_slice(&self.spec.input_shape);
        let flat_per: usize = self.spec.input_shape.iter().product();
        let got_per: usize = x.shape()[1..].iter().product();
        if flat_per != got_per {
            return Err(Error::Shape(format!(
                "input shape {:?} incompatible with model input {:?}",
                x.shape(),
                self.spec.input_shape
            )));
        }
        Ok(x.to_owned().into_shape_with_order(IxDyn(&shape)).unwrap())
    }

    /// Per-class scores in evaluation mode.
    pub fn logits(&self, x: &ArrayD<F>) -> Result<Array2<F>> {
        let x = self.batched_input(x)?;
        let mut state = self.state.clone();
        let (out, _) = self.net.forward(
            ParamView::plain(&self.params),
            Dual::plain(x),
            Mode::Eval,
            &mut state,
        );
        Ok(out.v.into_dimensionality::<ndarray::Ix2>().unwrap())
    }

    /// Mean cross-entropy and its flat parameter gradient (evaluation mode).
    pub fn loss_and_param_grad(&self, x: &ArrayD<F>, y: &[usize]) -> Result<(F, Vec<F>)> {
        let (loss, gp, _gx) = self.ce_grads(x, y, false)?;
        Ok((loss, gp))
    }

    /// Training-mode loss and parameter gradient: batch-statistic layers use
    /// batch moments and update their running state.
    pub fn train_step_grads(&mut self, x: &ArrayD<F>, y: &[usize]) -> Result<(F, Vec<F>)> {
        if x.shape()[0] == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        self.check_labels(y)?;
        let xin = self.batched_input(x)?;
        let pv = ParamView::plain(&self.params);
        let (out, tape) = self
            .net
            .forward(pv, Dual::plain(xin), Mode::Train, &mut self.state);
        let ce = softmax_cross_entropy(&out, y);
        if !Scalar::to_f64(ce.loss).is_finite() {
            return Err(self.non_finite_loss(&out.v, y));
        }
        let (_gx, gp) = self.net.backward(pv, &tape, ce.grad);
        Ok((ce.loss, gp.v))
    }

    /// Gradient of the mean cross-entropy w.r.t. the inputs.
    pub fn input_grad_ce(&self, x: &ArrayD<F>, y: &[usize]) -> Result<ArrayD<F>> {
        let (_loss, _gp, gx) = self.ce_grads(x, y, true)?;
        Ok(gx)
    }

    fn ce_grads(&self, x: &ArrayD<F>, y: &[usize], want_input: bool) -> Result<(F, Vec<F>, ArrayD<F>)> {
        if x.shape()[0] == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        self.check_labels(y)?;
        let xshape = x.shape().to_vec();
        let xin = self.batched_input(x)?;
        let mut state = self.state.clone();
        let pv = ParamView::plain(&self.params);
        let (out, tape) = self.net.forward(pv, Dual::plain(xin), Mode::Eval, &mut state);
        let ce = softmax_cross_entropy(&out, y);
        if !ce.loss.to_f64().is_finite() {
            return Err(self.non_finite_loss(&out.v, y));
        }
        let (gx, gp) = self.net.backward(pv, &tape, ce.grad);
        let gx = if want_input {
            gx.v.into_shape_with_order(IxDyn(&xshape)).unwrap()
        } else {
            ArrayD::zeros(IxDyn(&[0]))
        };
        Ok((ce.loss, gp.v, gx))
    }

    /// `d/dX (w . grad_theta L)` for a fixed weighting `w` over the parameter
    /// gradient: run with a parameter tangent of `w` and read the tangent of
    /// the input gradient.
    pub fn input_grad_of_weighted_param_grad(
        &self,
        x: &ArrayD<F>,
        y: &[usize],
        w: &[F],
    ) -> Result<ArrayD<F>> {
        if w.len() != self.net.param_len {
            return Err(Error::Shape(format!(
                "weight vector length {} != param count {}",
                w.len(),
                self.net.param_len
            )));
        }
        self.check_labels(y)?;
        let xshape = x.shape().to_vec();
        let xin = self.batched_input(x)?;
        let mut state = self.state.clone();
        let pv = ParamView {
            v: &self.params,
            t: Some(w),
        };
        let (out, tape) = self.net.forward(pv, Dual::plain(xin), Mode::Eval, &mut state);
        let ce = softmax_cross_entropy(&out, y);
        let (gx, _gp) = self.net.backward(pv, &tape, ce.grad);
        let t = gx
            .t
            .ok_or_else(|| Error::Shape("tangent missing from backward pass".into()))?;
        Ok(t.into_shape_with_order(IxDyn(&xshape)).unwrap())
    }

    /// Penultimate activations: the input of the final dense layer.
    pub fn features(&self, x: &ArrayD<F>) -> Result<Array2<F>> {
        let n = x.shape()[0];
        if n == 0 {
            let f = self.feature_dim();
            return Ok(Array2::zeros((0, f)));
        }
        let xin = self.batched_input(x)?;
        let mut state = self.state.clone();
        let (out, _) = self.net.forward_prefix(
            ParamView::plain(&self.params),
            Dual::plain(xin),
            Mode::Eval,
            &mut state,
            self.net.nodes.len() - 1,
        );
        Ok(out.v.into_dimensionality::<ndarray::Ix2>().unwrap())
    }

    pub fn feature_dim(&self) -> usize {
        match self.net.nodes.last() {
            Some(Node::Dense { in_dim, .. }) => *in_dim,
            _ => unreachable!("all registered architectures end in a dense head"),
        }
    }

    /// Fraction of argmax-correct predictions; argmax ties break toward the
    /// lowest class index. Evaluates in fixed-size chunks so convolutional
    /// intermediates stay bounded on large sets.
    pub fn accuracy(&self, x: &ArrayD<F>, y: &[usize]) -> Result<f64> {
        let n = x.shape()[0];
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        const CHUNK: usize = 512;
        let mut correct = 0usize;
        let mut start = 0usize;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let logits = self.logits(&x.select(ndarray::Axis(0), &idx))?;
            for (i, &yi) in y[start..end].iter().enumerate() {
                let row = logits.row(i);
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best == yi {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / y.len() as f64)
    }

    fn check_labels(&self, y: &[usize]) -> Result<()> {
        if let Some(&bad) = y.iter().find(|&&l| l >= self.spec.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    fn non_finite_loss(&self, logits: &ArrayD<F>, y: &[usize]) -> Error {
        let finite = logits
            .iter()
            .filter(|v| Scalar::to_f64(**v).is_finite())
            .count();
        Error::NonFinite {
            context: "cross-entropy loss".into(),
            detail: format!(
                "batch of {} samples, {}/{} finite logits",
                y.len(),
                finite,
                logits.len()
            ),
        }
    }

    /// Persist as a JSON manifest plus raw little-endian f32 arrays
    /// (parameters then batch statistics).
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = CheckpointManifest {
            spec: self.spec.clone(),
            param_len: self.params.len(),
            state_len: self.state.len(),
        };
        let mpath = dir.join(format!("{name}.json"));
        std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
        let bpath = dir.join(format!("{name}.bin"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(bpath)?);
        for &v in self.params.iter().chain(self.state.iter()) {
            f.write_all(&(Scalar::to_f64(v) as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let mpath = dir.join(format!("{name}.json"));
        let manifest: CheckpointManifest =
            serde_json::from_str(&std::fs::read_to_string(mpath)?)?;
        let mut model = Classifier::<F>::build(&manifest.spec)?;
        if model.params.len() != manifest.param_len || model.state.len() != manifest.state_len {
            return Err(Error::Data("checkpoint manifest length mismatch".into()));
        }
        let bpath = dir.join(format!("{name}.bin"));
        let mut f = std::io::BufReader::new(std::fs::File::open(bpath)?);
        let mut buf = [0u8; 4];
        for i in 0..model.params.len() {
            f.read_exact(&mut buf)?;
            model.params[i] = F::from_f64(f32::from_le_bytes(buf) as f64);
        }
        for i in 0..model.state.len() {
            f.read_exact(&mut buf)?;
            model.state[i] = F::from_f64(f32::from_le_bytes(buf) as f64);
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    spec: ModelSpec,
    param_len: usize,
    state_len: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use rand::Rng;

    fn rand_input(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn mlp_400x2_param_count() {
        let spec = ModelSpec::new(Architecture::Mlp400x2, vec![1, 28, 28], 10, 0);
        let m = Classifier::<f32>::build(&spec).unwrap();
        assert_eq!(m.param_count(), 478_410);
    }

    #[test]
    fn same_seed_same_params() {
        let spec = ModelSpec::new(Architecture::Mlp100x2, vec![1, 28, 28], 10, 7);
        let a = Classifier::<f32>::build(&spec).unwrap();
        let b = Classifier::<f32>::build(&spec).unwrap();
        assert_eq!(a.params, b.params);
        let x = rand_input(&[3, 1, 28, 28], 1).mapv(|v| v as f32);
        assert_eq!(a.logits(&x).unwrap(), b.logits(&x).unwrap());
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let spec = ModelSpec::new(Architecture::Mlp100x2, vec![1, 28, 28], 10, 0);
        let mut m = Classifier::<f64>::build(&spec).unwrap();
        m.params.iter_mut().for_each(|p| *p = 0.0);
        let x = rand_input(&[5, 1, 28, 28], 2);
        let (loss, _) = m.loss_and_param_grad(&x, &[0, 1, 2, 3, 4]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_same_loss_and_grad() {
        let spec = ModelSpec::new(Architecture::Mlp100x2, vec![1, 8, 8], 4, 3);
        let m = Classifier::<f64>::build(&spec).unwrap();
        let x = rand_input(&[3, 1, 8, 8], 4);
        let y = vec![0usize, 2, 3];
        let xx = ndarray::concatenate(ndarray::Axis(0), &[x.view(), x.view()]).unwrap();
        let mut yy = y.clone();
        yy.extend_from_slice(&y);
        let (l1, g1) = m.loss_and_param_grad(&x, &y).unwrap();
        let (l2, g2) = m.loss_and_param_grad(&xx, &yy).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resnet20_builds_and_forwards() {
        let spec = ModelSpec::new(Architecture::Resnet20, vec![3, 32, 32], 2, 0);
        let m = Classifier::<f32>::build(&spec).unwrap();
        let x = rand_input(&[2, 3, 32, 32], 5).mapv(|v| v as f32);
        let out = m.logits(&x).unwrap();
        assert_eq!(out.dim(), (2, 2));
    }

    #[test]
    fn features_shapes() {
        let spec = ModelSpec::new(Architecture::Mlp400x2, vec![1, 28, 28], 10, 0);
        let m = Classifier::<f32>::build(&spec).unwrap();
        assert_eq!(m.feature_dim(), 400);
        let x = rand_input(&[4, 1, 28, 28], 6).mapv(|v| v as f32);
        assert_eq!(m.features(&x).unwrap().dim(), (4, 400));
        let empty = ArrayD::<f32>::zeros(IxDyn(&[0, 1, 28, 28]));
        assert_eq!(m.features(&empty).unwrap().dim(), (0, 400));
        // Pointwise map: duplicated rows give identical features.
        let x0 = x.index_axis(ndarray::Axis(0), 0).to_owned().insert_axis(ndarray::Axis(0));
        let pair = ndarray::concatenate(ndarray::Axis(0), &[x0.view(), x0.view()]).unwrap();
        let f = m.features(&pair.into_dyn()).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn accuracy_tie_breaks_to_lowest_class() {
        let spec = ModelSpec::new(Architecture::Mlp100x2, vec![4], 3, 0);
        let mut m = Classifier::<f64>::build(&spec).unwrap();
        m.params.iter_mut().for_each(|p| *p = 0.0);
        // All-zero logits: every prediction is class 0.
        let x = rand_input(&[4, 4], 7);
        assert_eq!(m.accuracy(&x, &[0, 0, 1, 2]).unwrap(), 0.5);
    }

    /// Central finite differences on randomly chosen parameter coordinates.
    fn fd_check(spec: &ModelSpec, input: &[usize], n_coords: usize, tol: f64, seed: u64) {
        let m = Classifier::<f64>::build(spec).unwrap();
        let x = rand_input(input, seed);
        let y: Vec<usize> = (0..input[0]).map(|i| i % spec.num_classes).collect();
        let (_, grad) = m.loss_and_param_grad(&x, &y).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let h = 1e-5;
        for _ in 0..n_coords {
            let i = rng.gen_range(0..m.params.len());
            let mut mp = m.clone();
            mp.params[i] += h;
            let (lp, _) = mp.loss_and_param_grad(&x, &y).unwrap();
            mp.params[i] -= 2.0 * h;
            let (lm, _) = mp.loss_and_param_grad(&x, &y).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(
                (fd - grad[i]).abs() / denom < tol,
                "coord {i}: fd {fd} vs grad {}",
                grad[i]
            );
        }
    }

    #[test]
    fn gradient_check_all_architectures() {
        for (arch, shape) in [
            (Architecture::Mlp400x2, vec![1usize, 8, 8]),
            (Architecture::Mlp100x2, vec![1, 8, 8]),
            (Architecture::CnnSmall, vec![1, 8, 8]),
            (Architecture::CnnAlt, vec![1, 16, 16]),
            (Architecture::Resnet20, vec![3, 16, 16]),
            (Architecture::VggSmall, vec![3, 16, 16]),
        ] {
            let spec = ModelSpec::new(arch, shape.clone(), 3, 11);
            let mut input = vec![4usize];
            input.extend_from_slice(&shape);
            fd_check(&spec, &input, 50, 1e-3, 17);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = ModelSpec::new(Architecture::Mlp100x2, vec![1, 4, 4], 3, 2);
        let m = Classifier::<f64>::build(&spec).unwrap();
        let x = rand_input(&[2, 1, 4, 4], 9);
        let y = vec![1usize, 2];
        let gx = m.input_grad_ce(&x, &y).unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..30 {
            let idx: Vec<usize> = x
                .shape()
                .iter()
                .map(|&s| rng.gen_range(0..s))
                .collect();
            let mut xp = x.clone();
            xp[IxDyn(&idx)] += h;
            let (lp, _) = m.loss_and_param_grad(&xp, &y).unwrap();
            xp[IxDyn(&idx)] -= 2.0 * h;
            let (lm, _) = m.loss_and_param_grad(&xp, &y).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let g = gx[IxDyn(&idx)];
            let denom = fd.abs().max(g.abs()).max(1e-6);
            assert!((fd - g).abs() / denom < 1e-3, "fd {fd} vs {g}");
        }
    }

    /// Forward-mode check: with a parameter tangent `w`, the loss tangent
    /// must equal `w . grad_theta L`, and the tangent of the input gradient
    /// must match finite differences of `w . grad_theta L` in the inputs.
    #[test]
    fn weighted_param_grad_input_derivative() {
        let spec = ModelSpec::new(Architecture::Mlp100x2, vec![1, 4, 4], 3, 13);
        let m = Classifier::<f64>::build(&spec).unwrap();
        let x = rand_input(&[3, 1, 4, 4], 20);
        let y = vec![0usize, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w: Vec<f64> = (0..m.param_count())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let wdot = |xq: &ArrayD<f64>| -> f64 {
            let (_, g) = m.loss_and_param_grad(xq, &y).unwrap();
            g.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mixed = m.input_grad_of_weighted_param_grad(&x, &y, &w).unwrap();
        let h = 1e-6;
        for _ in 0..30 {
            let idx: Vec<usize> = x.shape().iter().map(|&s| rng.gen_range(0..s)).collect();
            let mut xp = x.clone();
            xp[IxDyn(&idx)] += h;
            let fp = wdot(&xp);
            xp[IxDyn(&idx)] -= 2.0 * h;
            let fm = wdot(&xp);
            let fd = (fp - fm) / (2.0 * h);
            let g = mixed[IxDyn(&idx)];
            let denom = fd.abs().max(g.abs()).max(1e-6);
            assert!((fd - g).abs() / denom < 1e-3, "fd {fd} vs tangent {g}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(Architecture::Mlp100x2, vec![1, 8, 8], 4, 5);
        let m = Classifier::<f32>::build(&spec).unwrap();
        m.save(dir.path(), "model").unwrap();
        let m2 = Classifier::<f32>::load(dir.path(), "model").unwrap();
        assert_eq!(m.params, m2.params);
        assert_eq!(m.spec, m2.spec);
    }

    #[test]
    fn unknown_architecture_rejected() {
        assert!("mlp-9000".parse::<Architecture>().is_err());
    }
}
