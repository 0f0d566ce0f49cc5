//! Feed-forward networks over a flat parameter vector.
//!
//! A [`Net`] is a sequence of [`Node`]s. Parameters live in one flat vector
//! with a fixed layout so snapshots, importance vectors and gradients are
//! plain `Vec<F>`. Batch-statistic layers keep running moments in a separate
//! state vector that the optimizer never touches.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;

use super::dual::{dual_matmul, Dual, Scalar};
use super::ops;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Dense { in_dim: usize, out_dim: usize },
    Conv { in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize },
    BatchNorm { c: usize },
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    MaxPool2,
    Upsample2,
    Flatten,
    Reshape(Vec<usize>),
    GlobalAvgPool,
    ResBlock { in_c: usize, out_c: usize, stride: usize, body: Vec<Node> },
}

#[derive(Clone, Copy)]
pub enum Mode {
    Train,
    Eval,
}

/// Flat parameter vector plus an optional tangent vector of the same length.
#[derive(Clone, Copy)]
pub struct ParamView<'a, F: Scalar> {
    pub v: &'a [F],
    pub t: Option<&'a [F]>,
}

impl<'a, F: Scalar> ParamView<'a, F> {
    pub fn plain(v: &'a [F]) -> Self {
        ParamView { v, t: None }
    }
}

pub enum Cache<F: Scalar> {
    None,
    /// Input of a dense layer.
    DenseIn(Dual<F>),
    Conv {
        cols: Array2<F>,
        cols_t: Option<Array2<F>>,
        ishape: (usize, usize, usize, usize),
        oh: usize,
        ow: usize,
    },
    /// 0/1 (or leak-factor) multiplier recorded at the activation.
    Mask(ArrayD<F>),
    /// Sigmoid output (value and tangent).
    SigmoidOut(Dual<F>),
    Pool {
        arg: Vec<usize>,
        ishape: (usize, usize, usize, usize),
        oshape: (usize, usize, usize, usize),
    },
    Shape(Vec<usize>),
    BnEval {
        xhat: Dual<F>,
        inv_std: Array1<F>,
    },
    BnTrain {
        xhat: ArrayD<F>,
        inv_std: Array1<F>,
    },
    Res {
        inner: Vec<Cache<F>>,
        mask: ArrayD<F>,
        ishape: (usize, usize, usize, usize),
    },
}

pub type Tape<F> = Vec<Cache<F>>;

/// Gradient accumulator mirroring the parameter layout.
pub struct GradBuf<F: Scalar> {
    pub v: Vec<F>,
    pub t: Option<Vec<F>>,
}

impl Node {
    pub fn param_len(&self) -> usize {
        match self {
            Node::Dense { in_dim, out_dim } => in_dim * out_dim + out_dim,
            Node::Conv { in_c, out_c, k, .. } => in_c * k * k * out_c + out_c,
            Node::BatchNorm { c } => 2 * c,
            Node::ResBlock { body, .. } => body.iter().map(|n| n.param_len()).sum(),
            _ => 0,
        }
    }

    pub fn state_len(&self) -> usize {
        match self {
            Node::BatchNorm { c } => 2 * c,
            Node::ResBlock { body, .. } => body.iter().map(|n| n.state_len()).sum(),
            _ => 0,
        }
    }

    fn init_params<F: Scalar, R: Rng>(&self, out: &mut [F], rng: &mut R) {
        match self {
            Node::Dense { in_dim, out_dim } => {
                let bound = 1.0 / (*in_dim as f64).sqrt();
                for w in out[..in_dim * out_dim].iter_mut() {
                    *w = F::from_f64(rng.gen_range(-bound..bound));
                }
                for b in out[in_dim * out_dim..].iter_mut() {
                    *b = F::zero();
                }
            }
            Node::Conv { in_c, out_c, k, .. } => {
                let fan_in = in_c * k * k;
                let bound = 1.0 / (fan_in as f64).sqrt();
                for w in out[..fan_in * out_c].iter_mut() {
                    *w = F::from_f64(rng.gen_range(-bound..bound));
                }
                for b in out[fan_in * out_c..].iter_mut() {
                    *b = F::zero();
                }
            }
            Node::BatchNorm { c } => {
                for g in out[..*c].iter_mut() {
                    *g = F::one();
                }
                for b in out[*c..].iter_mut() {
                    *b = F::zero();
                }
            }
            Node::ResBlock { body, .. } => {
                let mut off = 0;
                for n in body {
                    let len = n.param_len();
                    n.init_params(&mut out[off..off + len], rng);
                    off += len;
                }
            }
            _ => {}
        }
    }

    fn init_state<F: Scalar>(&self, out: &mut [F]) {
        match self {
            Node::BatchNorm { c } => {
                for m in out[..*c].iter_mut() {
                    *m = F::zero();
                }
                for v in out[*c..].iter_mut() {
                    *v = F::one();
                }
            }
            Node::ResBlock { body, .. } => {
                let mut off = 0;
                for n in body {
                    let len = n.state_len();
                    n.init_state(&mut out[off..off + len]);
                    off += len;
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct Net {
    pub nodes: Vec<Node>,
    /// Per-sample input shape (e.g. `[1, 28, 28]` or `[784]`).
    pub input_shape: Vec<usize>,
    pub param_len: usize,
    pub state_len: usize,
}

impl Net {
    pub fn new(nodes: Vec<Node>, input_shape: Vec<usize>) -> Net {
        let param_len = nodes.iter().map(|n| n.param_len()).sum();
        let state_len = nodes.iter().map(|n| n.state_len()).sum();
        Net {
            nodes,
            input_shape,
            param_len,
            state_len,
        }
    }

    pub fn init_params<F: Scalar, R: Rng>(&self, rng: &mut R) -> Vec<F> {
        let mut p = vec![F::zero(); self.param_len];
        let mut off = 0;
        for n in &self.nodes {
            let len = n.param_len();
            n.init_params(&mut p[off..off + len], rng);
            off += len;
        }
        p
    }

    pub fn init_state<F: Scalar>(&self) -> Vec<F> {
        let mut s = vec![F::zero(); self.state_len];
        let mut off = 0;
        for n in &self.nodes {
            let len = n.state_len();
            n.init_state(&mut s[off..off + len]);
            off += len;
        }
        s
    }

    /// Run the network. `state` is updated in `Train` mode (batch-norm
    /// running moments) and read in `Eval` mode.
    pub fn forward<F: Scalar>(
        &self,
        p: ParamView<F>,
        x: Dual<F>,
        mode: Mode,
        state: &mut [F],
    ) -> (Dual<F>, Tape<F>) {
        self.forward_prefix(p, x, mode, state, self.nodes.len())
    }

    /// Run only the first `upto` nodes (used for penultimate features).
    pub fn forward_prefix<F: Scalar>(
        &self,
        p: ParamView<F>,
        mut x: Dual<F>,
        mode: Mode,
        state: &mut [F],
        upto: usize,
    ) -> (Dual<F>, Tape<F>) {
        // Tangent mode is all-or-nothing: materialize the missing side.
        let mut x = if p.t.is_some() && x.t.is_none() {
            x.t = Some(ArrayD::zeros(x.v.raw_dim()));
            x
        } else {
            x
        };
        let tangent_mode = x.t.is_some();
        let zeros;
        let p = if tangent_mode && p.t.is_none() {
            zeros = vec![F::zero(); p.v.len()];
            ParamView {
                v: p.v,
                t: Some(&zeros),
            }
        } else {
            p
        };
        let mut tape = Vec::with_capacity(upto);
        let mut poff = 0usize;
        let mut soff = 0usize;
        for node in &self.nodes[..upto] {
            let plen = node.param_len();
            let slen = node.state_len();
            let (y, cache) = forward_node(
                node,
                sub_params(p, poff, plen),
                x,
                mode,
                &mut state[soff..soff + slen],
            );
            tape.push(cache);
            x = y;
            poff += plen;
            soff += slen;
        }
        (x, tape)
    }

    /// Backpropagate `gy` through the tape. Returns the input gradient and
    /// fills `gp` (allocating the tangent half when running in tangent mode).
    pub fn backward<F: Scalar>(
        &self,
        p: ParamView<F>,
        tape: &Tape<F>,
        mut gy: Dual<F>,
    ) -> (Dual<F>, GradBuf<F>) {
        let tangent_mode = gy.t.is_some() || p.t.is_some();
        let zeros;
        let p = if tangent_mode && p.t.is_none() {
            zeros = vec![F::zero(); p.v.len()];
            ParamView {
                v: p.v,
                t: Some(&zeros),
            }
        } else {
            p
        };
        if tangent_mode && gy.t.is_none() {
            gy.t = Some(ArrayD::zeros(gy.v.raw_dim()));
        }
        let mut gp = GradBuf {
            v: vec![F::zero(); self.param_len],
            t: if tangent_mode {
                Some(vec![F::zero(); self.param_len])
            } else {
                None
            },
        };
        let mut offsets = Vec::with_capacity(tape.len());
        let mut poff = 0usize;
        for node in &self.nodes[..tape.len()] {
            offsets.push(poff);
            poff += node.param_len();
        }
        for (i, node) in self.nodes[..tape.len()].iter().enumerate().rev() {
            let off = offsets[i];
            let plen = node.param_len();
            gy = backward_node(node, sub_params(p, off, plen), &tape[i], gy, &mut gp, off);
        }
        (gy, gp)
    }
}

fn sub_params<F: Scalar>(p: ParamView<F>, off: usize, len: usize) -> ParamView<F> {
    ParamView {
        v: &p.v[off..off + len],
        t: p.t.map(|t| &t[off..off + len]),
    }
}

fn relu_mask<F: Scalar>(v: &ArrayD<F>, leak: f64) -> ArrayD<F> {
    let l = F::from_f64(leak);
    v.mapv(|x| if x > F::zero() { F::one() } else { l })
}

fn mul_mask<F: Scalar>(x: &Dual<F>, mask: &ArrayD<F>) -> Dual<F> {
    Dual {
        v: &x.v * mask,
        t: x.t.as_ref().map(|t| t * mask),
    }
}

fn forward_node<F: Scalar>(
    node: &Node,
    p: ParamView<F>,
    x: Dual<F>,
    mode: Mode,
    state: &mut [F],
) -> (Dual<F>, Cache<F>) {
    match node {
        Node::Dense { in_dim, out_dim } => {
            let w_v = ArrayView2::from_shape((*in_dim, *out_dim), &p.v[..in_dim * out_dim]).unwrap();
            let w_t = p
                .t
                .map(|t| ArrayView2::from_shape((*in_dim, *out_dim), &t[..in_dim * out_dim]).unwrap());
            let b_v = &p.v[in_dim * out_dim..];
            let (xv, xt) = x.view2();
            let (mut y, mut yt) = dual_matmul(&xv, xt.as_ref(), &w_v, w_t.as_ref());
            for mut row in y.rows_mut() {
                for (c, e) in row.iter_mut().enumerate() {
                    *e = *e + b_v[c];
                }
            }
            if let (Some(yt), Some(t)) = (yt.as_mut(), p.t) {
                let b_t = &t[in_dim * out_dim..];
                for mut row in yt.rows_mut() {
                    for (c, e) in row.iter_mut().enumerate() {
                        *e = *e + b_t[c];
                    }
                }
            }
            let out = Dual {
                v: y.into_dyn(),
                t: yt.map(|t| t.into_dyn()),
            };
            (out, Cache::DenseIn(x))
        }
        Node::Conv {
            in_c,
            out_c,
            k,
            stride,
            pad,
        } => {
            let fan = in_c * k * k;
            let w_v = ArrayView2::from_shape((fan, *out_c), &p.v[..fan * out_c]).unwrap();
            let w_t = p
                .t
                .map(|t| ArrayView2::from_shape((fan, *out_c), &t[..fan * out_c]).unwrap());
            let b_v = &p.v[fan * out_c..];
            let x4 = ops::as4(&x.v);
            let ishape = x4.dim();
            let (cols, oh, ow) = ops::im2col(&x4, *k, *stride, *pad);
            let cols_t = x
                .t
                .as_ref()
                .map(|t| ops::im2col(&ops::as4(t), *k, *stride, *pad).0);
            let (mut y2, mut y2t) = dual_matmul(
                &cols.view(),
                cols_t.as_ref().map(|c| c.view()).as_ref(),
                &w_v,
                w_t.as_ref(),
            );
            for mut row in y2.rows_mut() {
                for (c, e) in row.iter_mut().enumerate() {
                    *e = *e + b_v[c];
                }
            }
            if let (Some(y2t), Some(t)) = (y2t.as_mut(), p.t) {
                let b_t = &t[fan * out_c..];
                for mut row in y2t.rows_mut() {
                    for (c, e) in row.iter_mut().enumerate() {
                        *e = *e + b_t[c];
                    }
                }
            }
            let n = ishape.0;
            let to_nchw = |m: Array2<F>| {
                m.into_shape_with_order((n, oh, ow, *out_c))
                    .unwrap()
                    .permuted_axes([0, 3, 1, 2])
                    .as_standard_layout()
                    .to_owned()
                    .into_dyn()
            };
            let out = Dual {
                v: to_nchw(y2),
                t: y2t.map(to_nchw),
            };
            (
                out,
                Cache::Conv {
                    cols,
                    cols_t,
                    ishape,
                    oh,
                    ow,
                },
            )
        }
        Node::BatchNorm { c } => forward_bn(*c, p, x, mode, state),
        Node::Relu => {
            let mask = relu_mask(&x.v, 0.0);
            (mul_mask(&x, &mask), Cache::Mask(mask))
        }
        Node::LeakyRelu(a) => {
            let mask = relu_mask(&x.v, *a);
            (mul_mask(&x, &mask), Cache::Mask(mask))
        }
        Node::Sigmoid => {
            let y = x.v.mapv(|v| F::one() / (F::one() + (-v).exp()));
            let yt = x.t.as_ref().map(|t| {
                let mut d = &y * &(y.mapv(|v| F::one() - v));
                d = d * t;
                d
            });
            let out = Dual { v: y, t: yt };
            (out.clone(), Cache::SigmoidOut(out))
        }
        Node::MaxPool2 => {
            let x4 = ops::as4(&x.v);
            let ishape = x4.dim();
            let (y, arg) = ops::maxpool2(&x4);
            let oshape = y.dim();
            let yt = x
                .t
                .as_ref()
                .map(|t| ops::maxpool2_gather(&ops::as4(t), &arg, oshape).into_dyn());
            (
                Dual {
                    v: y.into_dyn(),
                    t: yt,
                },
                Cache::Pool { arg, ishape, oshape },
            )
        }
        Node::Upsample2 => {
            let y = ops::upsample2(&ops::as4(&x.v)).into_dyn();
            let yt = x.t.as_ref().map(|t| ops::upsample2(&ops::as4(t)).into_dyn());
            (Dual { v: y, t: yt }, Cache::None)
        }
        Node::Flatten => {
            let shape = x.v.shape().to_vec();
            let n = shape[0];
            let flat: usize = shape[1..].iter().product();
            let y = x.map_parts(|a| {
                a.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[n, flat]))
                    .unwrap()
            });
            (y, Cache::Shape(shape))
        }
        Node::Reshape(dims) => {
            let shape = x.v.shape().to_vec();
            let n = shape[0];
            let mut full = vec![n];
            full.extend_from_slice(dims);
            let y = x.map_parts(|a| {
                a.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&full))
                    .unwrap()
            });
            (y, Cache::Shape(shape))
        }
        Node::GlobalAvgPool => {
            let pool = |a: &ArrayD<F>| {
                let a4 = ops::as4(a);
                let (n, c, h, w) = a4.dim();
                let scale = F::from_f64(1.0 / (h * w) as f64);
                let mut y = Array2::<F>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let mut s = F::zero();
                        for i in 0..h {
                            for j in 0..w {
                                s = s + a4[(ni, ci, i, j)];
                            }
                        }
                        y[(ni, ci)] = s * scale;
                    }
                }
                y.into_dyn()
            };
            let shape = x.v.shape().to_vec();
            let y = Dual {
                v: pool(&x.v),
                t: x.t.as_ref().map(pool),
            };
            (y, Cache::Shape(shape))
        }
        Node::ResBlock {
            in_c,
            out_c,
            stride,
            body,
        } => {
            let x4 = ops::as4(&x.v);
            let ishape = x4.dim();
            let shortcut_v = if *in_c == *out_c && *stride == 1 {
                x.v.clone()
            } else {
                ops::pad_shortcut(&x4, *out_c, *stride).into_dyn()
            };
            let shortcut_t = x.t.as_ref().map(|t| {
                if *in_c == *out_c && *stride == 1 {
                    t.clone()
                } else {
                    ops::pad_shortcut(&ops::as4(t), *out_c, *stride).into_dyn()
                }
            });
            // Body runs with its slice of params/state.
            let mut inner = Vec::with_capacity(body.len());
            let mut cur = x;
            let mut poff = 0usize;
            let mut soff = 0usize;
            for n in body {
                let plen = n.param_len();
                let slen = n.state_len();
                let (y, cache) = forward_node(
                    n,
                    sub_params(p, poff, plen),
                    cur,
                    mode,
                    &mut state[soff..soff + slen],
                );
                inner.push(cache);
                cur = y;
                poff += plen;
                soff += slen;
            }
            let sum_v = &cur.v + &shortcut_v;
            let sum_t = match (cur.t, shortcut_t) {
                (Some(a), Some(b)) => Some(a + b),
                (a, b) => a.or(b),
            };
            let mask = relu_mask(&sum_v, 0.0);
            let out = mul_mask(
                &Dual {
                    v: sum_v,
                    t: sum_t,
                },
                &mask,
            );
            (out, Cache::Res { inner, mask, ishape })
        }
    }
}

fn forward_bn<F: Scalar>(
    c: usize,
    p: ParamView<F>,
    x: Dual<F>,
    mode: Mode,
    state: &mut [F],
) -> (Dual<F>, Cache<F>) {
    let x4 = ops::as4(&x.v);
    let (n, cc, h, w) = x4.dim();
    assert_eq!(cc, c, "batchnorm channel mismatch");
    let gamma = &p.v[..c];
    let beta = &p.v[c..];
    let eps = F::from_f64(BN_EPS);
    match mode {
        Mode::Train => {
            assert!(
                x.t.is_none() && p.t.is_none(),
                "batchnorm tangents are only supported in eval mode"
            );
            let count = F::from_f64((n * h * w) as f64);
            let mut mean = Array1::<F>::zeros(c);
            let mut var = Array1::<F>::zeros(c);
            for ci in 0..c {
                let mut s = F::zero();
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            s = s + x4[(ni, ci, i, j)];
                        }
                    }
                }
                mean[ci] = s / count;
            }
            for ci in 0..c {
                let mut s = F::zero();
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            let d = x4[(ni, ci, i, j)] - mean[ci];
                            s = s + d * d;
                        }
                    }
                }
                var[ci] = s / count;
            }
            let mom = F::from_f64(BN_MOMENTUM);
            for ci in 0..c {
                state[ci] = state[ci] * (F::one() - mom) + mean[ci] * mom;
                state[c + ci] = state[c + ci] * (F::one() - mom) + var[ci] * mom;
            }
            let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
            let mut xhat = x.v.clone();
            {
                let mut xh4 = xhat
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                for ci in 0..c {
                    let (m, is) = (mean[ci], inv_std[ci]);
                    for ni in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                xh4[(ni, ci, i, j)] = (xh4[(ni, ci, i, j)] - m) * is;
                            }
                        }
                    }
                }
            }
            let mut y = xhat.clone();
            {
                let mut y4 = y.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                for ci in 0..c {
                    for ni in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                y4[(ni, ci, i, j)] = y4[(ni, ci, i, j)] * gamma[ci] + beta[ci];
                            }
                        }
                    }
                }
            }
            (
                Dual::plain(y),
                Cache::BnTrain { xhat, inv_std },
            )
        }
        Mode::Eval => {
            let inv_std =
                Array1::from_iter((0..c).map(|ci| F::one() / (state[c + ci] + eps).sqrt()));
            let mut xhat_v = x.v.clone();
            {
                let mut xh4 = xhat_v
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                for ci in 0..c {
                    let (m, is) = (state[ci], inv_std[ci]);
                    for ni in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                xh4[(ni, ci, i, j)] = (xh4[(ni, ci, i, j)] - m) * is;
                            }
                        }
                    }
                }
            }
            let xhat_t = x.t.as_ref().map(|t| {
                let mut tt = t.clone();
                let mut t4 = tt.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                for ci in 0..c {
                    let is = inv_std[ci];
                    for ni in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                t4[(ni, ci, i, j)] = t4[(ni, ci, i, j)] * is;
                            }
                        }
                    }
                }
                tt
            });
            let mut y_v = xhat_v.clone();
            {
                let mut y4 = y_v.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                for ci in 0..c {
                    for ni in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                y4[(ni, ci, i, j)] = y4[(ni, ci, i, j)] * gamma[ci] + beta[ci];
                            }
                        }
                    }
                }
            }
            // y = gamma * xhat + beta; tangent has the parameter-tangent term.
            let y_t = if xhat_t.is_some() || p.t.is_some() {
                let mut t = ArrayD::<F>::zeros(x.v.raw_dim());
                let mut t4 = t.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                let xh4 = xhat_v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let xt4 = xhat_t
                    .as_ref()
                    .map(|t| t.view().into_dimensionality::<ndarray::Ix4>().unwrap());
                for ci in 0..c {
                    let (gt, bt) = match p.t {
                        Some(pt) => (pt[ci], pt[c + ci]),
                        None => (F::zero(), F::zero()),
                    };
                    for ni in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                let mut v = gt * xh4[(ni, ci, i, j)] + bt;
                                if let Some(xt) = &xt4 {
                                    v = v + gamma[ci] * xt[(ni, ci, i, j)];
                                }
                                t4[(ni, ci, i, j)] = v;
                            }
                        }
                    }
                }
                drop(t4);
                Some(t)
            } else {
                None
            };
            (
                Dual { v: y_v, t: y_t },
                Cache::BnEval {
                    xhat: Dual {
                        v: xhat_v,
                        t: xhat_t,
                    },
                    inv_std,
                },
            )
        }
    }
}

fn backward_node<F: Scalar>(
    node: &Node,
    p: ParamView<F>,
    cache: &Cache<F>,
    gy: Dual<F>,
    gp: &mut GradBuf<F>,
    poff: usize,
) -> Dual<F> {
    match (node, cache) {
        (Node::Dense { in_dim, out_dim }, Cache::DenseIn(x)) => {
            let w_v = ArrayView2::from_shape((*in_dim, *out_dim), &p.v[..in_dim * out_dim]).unwrap();
            let w_t = p
                .t
                .map(|t| ArrayView2::from_shape((*in_dim, *out_dim), &t[..in_dim * out_dim]).unwrap());
            let (gy_v, gy_t) = gy.view2();
            let (x_v, x_t) = x.view2();
            // dX = dY W^T
            let (gx_v, gx_t) = dual_matmul(
                &gy_v,
                gy_t.as_ref(),
                &w_v.t(),
                w_t.map(|w| w.reversed_axes()).as_ref(),
            );
            // dW = X^T dY
            let (gw_v, gw_t) = dual_matmul(&x_v.t(), x_t.map(|x| x.reversed_axes()).as_ref(), &gy_v, gy_t.as_ref());
            let gb_v = gy_v.sum_axis(Axis(0));
            let gw_vs = gw_v.as_standard_layout();
            let gw_ts = gw_t.as_ref().map(|g| g.as_standard_layout());
            write_grad(gp, poff, gw_vs.as_slice().unwrap(), gw_ts.as_ref().map(|g| g.as_slice().unwrap()));
            let gb_t = gy_t.as_ref().map(|t| t.sum_axis(Axis(0)));
            write_grad(
                gp,
                poff + in_dim * out_dim,
                gb_v.as_slice().unwrap(),
                gb_t.as_ref().map(|g| g.as_slice().unwrap()),
            );
            Dual {
                v: gx_v.into_dyn(),
                t: gx_t.map(|t| t.into_dyn()),
            }
        }
        (
            Node::Conv {
                in_c,
                out_c,
                k,
                stride,
                pad,
            },
            Cache::Conv {
                cols,
                cols_t,
                ishape,
                oh,
                ow,
            },
        ) => {
            let fan = in_c * k * k;
            let w_v = ArrayView2::from_shape((fan, *out_c), &p.v[..fan * out_c]).unwrap();
            let w_t = p
                .t
                .map(|t| ArrayView2::from_shape((fan, *out_c), &t[..fan * out_c]).unwrap());
            let n = ishape.0;
            let to_rows = |a: &ArrayD<F>| {
                a.view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((n * oh * ow, *out_c))
                    .unwrap()
            };
            let g2_v = to_rows(&gy.v);
            let g2_t = gy.t.as_ref().map(to_rows);
            // dW = cols^T g2
            let (gw_v, gw_t) = dual_matmul(
                &cols.view().reversed_axes(),
                cols_t.as_ref().map(|c| c.view().reversed_axes()).as_ref(),
                &g2_v.view(),
                g2_t.as_ref().map(|g| g.view()).as_ref(),
            );
            let gw_vs = gw_v.as_standard_layout();
            let gw_ts = gw_t.as_ref().map(|g| g.as_standard_layout());
            write_grad(gp, poff, gw_vs.as_slice().unwrap(), gw_ts.as_ref().map(|g| g.as_slice().unwrap()));
            let gb_v = g2_v.sum_axis(Axis(0));
            let gb_t = g2_t.as_ref().map(|t| t.sum_axis(Axis(0)));
            write_grad(
                gp,
                poff + fan * out_c,
                gb_v.as_slice().unwrap(),
                gb_t.as_ref().map(|g| g.as_slice().unwrap()),
            );
            // dcols = g2 W^T, then scatter back to image shape.
            let (gcols_v, gcols_t) = dual_matmul(
                &g2_v.view(),
                g2_t.as_ref().map(|g| g.view()).as_ref(),
                &w_v.t(),
                w_t.map(|w| w.reversed_axes()).as_ref(),
            );
            let (ni, ci, hi, wi) = *ishape;
            let gx_v = ops::col2im(&gcols_v, ni, ci, hi, wi, *k, *stride, *pad).into_dyn();
            let gx_t = gcols_t.map(|g| ops::col2im(&g, ni, ci, hi, wi, *k, *stride, *pad).into_dyn());
            Dual { v: gx_v, t: gx_t }
        }
        (Node::BatchNorm { c }, Cache::BnEval { xhat, inv_std }) => {
            let gamma = &p.v[..*c];
            let gy4 = gy.v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (n, cc, h, w) = gy4.dim();
            let xh4 = xhat.v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            // d gamma, d beta
            let mut ggamma = vec![F::zero(); *c];
            let mut gbeta = vec![F::zero(); *c];
            for ci in 0..cc {
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            ggamma[ci] = ggamma[ci] + gy4[(ni, ci, i, j)] * xh4[(ni, ci, i, j)];
                            gbeta[ci] = gbeta[ci] + gy4[(ni, ci, i, j)];
                        }
                    }
                }
            }
            let (ggamma_t, gbeta_t) = if gy.t.is_some() || xhat.t.is_some() {
                let mut gg = vec![F::zero(); *c];
                let mut gb = vec![F::zero(); *c];
                let gyt4 = gy
                    .t
                    .as_ref()
                    .map(|t| t.view().into_dimensionality::<ndarray::Ix4>().unwrap());
                let xht4 = xhat
                    .t
                    .as_ref()
                    .map(|t| t.view().into_dimensionality::<ndarray::Ix4>().unwrap());
                for ci in 0..cc {
                    for ni in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                let mut s = F::zero();
                                if let Some(gt) = &gyt4 {
                                    s = s + gt[(ni, ci, i, j)] * xh4[(ni, ci, i, j)];
                                    gb[ci] = gb[ci] + gt[(ni, ci, i, j)];
                                }
                                if let Some(xt) = &xht4 {
                                    s = s + gy4[(ni, ci, i, j)] * xt[(ni, ci, i, j)];
                                }
                                gg[ci] = gg[ci] + s;
                            }
                        }
                    }
                }
                (Some(gg), Some(gb))
            } else {
                (None, None)
            };
            write_grad(gp, poff, &ggamma, ggamma_t.as_deref());
            write_grad(gp, poff + c, &gbeta, gbeta_t.as_deref());
            // dX = dY * gamma * inv_std; tangent includes gamma-tangent term.
            let scale = |a: &ArrayD<F>, extra: Option<(&ArrayD<F>, &[F])>| {
                let mut out = a.clone();
                let mut o4 = out.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                for ci in 0..cc {
                    let s = gamma[ci] * inv_std[ci];
                    for ni in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                o4[(ni, ci, i, j)] = o4[(ni, ci, i, j)] * s;
                            }
                        }
                    }
                }
                if let Some((gyv, gt)) = extra {
                    let g4 = gyv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    for ci in 0..cc {
                        let s = gt[ci] * inv_std[ci];
                        for ni in 0..n {
                            for i in 0..h {
                                for j in 0..w {
                                    o4[(ni, ci, i, j)] = o4[(ni, ci, i, j)] + g4[(ni, ci, i, j)] * s;
                                }
                            }
                        }
                    }
                }
                out
            };
            let gx_v = scale(&gy.v, None);
            let gx_t = match (&gy.t, p.t) {
                (Some(t), Some(pt)) => Some(scale(t, Some((&gy.v, &pt[..*c])))),
                (Some(t), None) => Some(scale(t, None)),
                (None, Some(pt)) => Some(scale(&ArrayD::zeros(gy.v.raw_dim()), Some((&gy.v, &pt[..*c])))),
                (None, None) => None,
            };
            Dual { v: gx_v, t: gx_t }
        }
        (Node::BatchNorm { c }, Cache::BnTrain { xhat, inv_std }) => {
            let gamma = &p.v[..*c];
            let gy4 = gy.v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let (n, cc, h, w) = gy4.dim();
            let xh4 = xhat.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let count = F::from_f64((n * h * w) as f64);
            let mut ggamma = vec![F::zero(); *c];
            let mut gbeta = vec![F::zero(); *c];
            for ci in 0..cc {
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            ggamma[ci] = ggamma[ci] + gy4[(ni, ci, i, j)] * xh4[(ni, ci, i, j)];
                            gbeta[ci] = gbeta[ci] + gy4[(ni, ci, i, j)];
                        }
                    }
                }
            }
            write_grad(gp, poff, &ggamma, None);
            write_grad(gp, poff + c, &gbeta, None);
            let mut gx = ArrayD::<F>::zeros(gy.v.raw_dim());
            {
                let mut gx4 = gx.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                for ci in 0..cc {
                    let mean_gy = gbeta[ci] / count;
                    let mean_gy_xhat = ggamma[ci] / count;
                    let s = gamma[ci] * inv_std[ci];
                    for ni in 0..n {
                        for i in 0..h {
                            for j in 0..w {
                                gx4[(ni, ci, i, j)] = s
                                    * (gy4[(ni, ci, i, j)]
                                        - mean_gy
                                        - xh4[(ni, ci, i, j)] * mean_gy_xhat);
                            }
                        }
                    }
                }
            }
            Dual::plain(gx)
        }
        (Node::Relu, Cache::Mask(mask)) | (Node::LeakyRelu(_), Cache::Mask(mask)) => {
            mul_mask(&gy, mask)
        }
        (Node::Sigmoid, Cache::SigmoidOut(y)) => {
            let dv = &y.v * &y.v.mapv(|v| F::one() - v);
            let gx_v = &gy.v * &dv;
            let gx_t = match &gy.t {
                Some(gt) => {
                    let mut t = gt * &dv;
                    if let Some(yt) = &y.t {
                        // d/dalpha sigma'(x) = y_t * (1 - 2 y)
                        let ddv = yt * &y.v.mapv(|v| F::one() - F::from_f64(2.0) * v);
                        t = t + &gy.v * &ddv;
                    }
                    Some(t)
                }
                None => y.t.as_ref().map(|yt| {
                    let ddv = yt * &y.v.mapv(|v| F::one() - F::from_f64(2.0) * v);
                    &gy.v * &ddv
                }),
            };
            Dual { v: gx_v, t: gx_t }
        }
        (Node::MaxPool2, Cache::Pool { arg, ishape, .. }) => {
            let gx_v = ops::maxpool2_scatter(&ops::as4(&gy.v), arg, *ishape).into_dyn();
            let gx_t = gy
                .t
                .as_ref()
                .map(|t| ops::maxpool2_scatter(&ops::as4(t), arg, *ishape).into_dyn());
            Dual { v: gx_v, t: gx_t }
        }
        (Node::Upsample2, Cache::None) => {
            let gx_v = ops::upsample2_back(&ops::as4(&gy.v)).into_dyn();
            let gx_t = gy
                .t
                .as_ref()
                .map(|t| ops::upsample2_back(&ops::as4(t)).into_dyn());
            Dual { v: gx_v, t: gx_t }
        }
        (Node::Flatten, Cache::Shape(shape)) | (Node::Reshape(_), Cache::Shape(shape)) => {
            gy.map_parts(|a| {
                a.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(shape))
                    .unwrap()
            })
        }
        (Node::GlobalAvgPool, Cache::Shape(shape)) => {
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let scale = F::from_f64(1.0 / (h * w) as f64);
            let spread = |a: &ArrayD<F>| {
                let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut y = ndarray::Array4::<F>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let v = a2[(ni, ci)] * scale;
                        for i in 0..h {
                            for j in 0..w {
                                y[(ni, ci, i, j)] = v;
                            }
                        }
                    }
                }
                y.into_dyn()
            };
            Dual {
                v: spread(&gy.v),
                t: gy.t.as_ref().map(spread),
            }
        }
        (
            Node::ResBlock {
                in_c,
                out_c,
                stride,
                body,
            },
            Cache::Res { inner, mask, ishape },
        ) => {
            let g_pre = mul_mask(&gy, mask);
            // Through the body.
            let mut offsets = Vec::with_capacity(body.len());
            let mut o = 0usize;
            for nd in body {
                offsets.push(o);
                o += nd.param_len();
            }
            let mut g = g_pre.clone();
            for (i, nd) in body.iter().enumerate().rev() {
                let off = offsets[i];
                let plen = nd.param_len();
                g = backward_node(nd, sub_params(p, off, plen), &inner[i], g, gp, poff + off);
            }
            // Through the shortcut.
            let short = |a: &ArrayD<F>| {
                if *in_c == *out_c && *stride == 1 {
                    a.clone()
                } else {
                    ops::pad_shortcut_back(&ops::as4(a), *in_c, *stride, *ishape).into_dyn()
                }
            };
            let gs_v = short(&g_pre.v);
            let gs_t = g_pre.t.as_ref().map(short);
            Dual {
                v: &g.v + &gs_v,
                t: match (g.t, gs_t) {
                    (Some(a), Some(b)) => Some(a + b),
                    (a, b) => a.or(b),
                },
            }
        }
        _ => unreachable!("cache does not match node"),
    }
}

fn write_grad<F: Scalar>(gp: &mut GradBuf<F>, off: usize, v: &[F], t: Option<&[F]>) {
    for (dst, src) in gp.v[off..off + v.len()].iter_mut().zip(v) {
        *dst = *dst + *src;
    }
    if let (Some(gt), Some(t)) = (gp.t.as_mut(), t) {
        for (dst, src) in gt[off..off + t.len()].iter_mut().zip(t) {
            *dst = *dst + *src;
        }
    }
}
