//! Tensors carrying an optional forward-mode tangent.

use ndarray::{Array2, ArrayD, ArrayView2, NdFloat};
use rand::distributions::uniform::SampleUniform;

/// Element type usable by the engine.
pub trait Scalar: NdFloat + SampleUniform + std::fmt::Display {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// A tensor value plus an optional tangent of the same shape.
#[derive(Debug, Clone)]
pub struct Dual<F: Scalar> {
    pub v: ArrayD<F>,
    pub t: Option<ArrayD<F>>,
}

impl<F: Scalar> Dual<F> {
    pub fn plain(v: ArrayD<F>) -> Self {
        Dual { v, t: None }
    }

    pub fn with_tangent(v: ArrayD<F>, t: ArrayD<F>) -> Self {
        debug_assert_eq!(v.shape(), t.shape());
        Dual { v, t: Some(t) }
    }

    pub fn zeros_like(&self) -> Self {
        Dual {
            v: ArrayD::zeros(self.v.raw_dim()),
            t: self.t.as_ref().map(|t| ArrayD::zeros(t.raw_dim())),
        }
    }

    /// Apply the same shape transform to value and tangent.
    pub fn map_parts(&self, f: impl Fn(&ArrayD<F>) -> ArrayD<F>) -> Self {
        Dual {
            v: f(&self.v),
            t: self.t.as_ref().map(f),
        }
    }

    pub fn view2(&self) -> (ArrayView2<'_, F>, Option<ArrayView2<'_, F>>) {
        let v = self
            .v
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("expected rank-2 tensor");
        let t = self.t.as_ref().map(|t| {
            t.view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("expected rank-2 tangent")
        });
        (v, t)
    }
}

/// Matrix product with the product rule on tangents.
pub fn dual_matmul<F: Scalar>(
    a_v: &ArrayView2<F>,
    a_t: Option<&ArrayView2<F>>,
    b_v: &ArrayView2<F>,
    b_t: Option<&ArrayView2<F>>,
) -> (Array2<F>, Option<Array2<F>>) {
    let v = a_v.dot(b_v);
    let t = match (a_t, b_t) {
        (None, None) => None,
        (Some(at), None) => Some(at.dot(b_v)),
        (None, Some(bt)) => Some(a_v.dot(bt)),
        (Some(at), Some(bt)) => Some(at.dot(b_v) + a_v.dot(bt)),
    };
    (v, t)
}
