//! Shape-shuffling kernels: im2col/col2im, pooling, upsampling, shortcuts.
//!
//! All spatial tensors are NCHW.

use ndarray::{Array2, Array4, ArrayD, ArrayView4};

use super::dual::Scalar;

pub fn as4<F: Scalar>(x: &ArrayD<F>) -> ArrayView4<'_, F> {
    x.view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("expected NCHW tensor")
}

/// Lay out k x k patches as rows: output is (N*OH*OW, C*k*k).
pub fn im2col<F: Scalar>(
    x: &ArrayView4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<F>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<F>::zeros((n * oh * ow, c * k * k));
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let (cs_h, cs_w) = (h * w, w);
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (ni * oh + oi) * ow + oj;
                let mut rowbuf = cols.row_mut(row);
                let rb = rowbuf.as_slice_mut().unwrap();
                for ci in 0..c {
                    let base_in = ni * c * cs_h + ci * cs_h;
                    for ki in 0..k {
                        let ih = oi * stride + ki;
                        if ih < pad || ih >= h + pad {
                            continue;
                        }
                        let ih = ih - pad;
                        for kj in 0..k {
                            let iw = oj * stride + kj;
                            if iw < pad || iw >= w + pad {
                                continue;
                            }
                            let iw = iw - pad;
                            rb[(ci * k + ki) * k + kj] = xsl[base_in + ih * cs_w + iw];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter-add transpose of `im2col`.
pub fn col2im<F: Scalar>(
    cols: &Array2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = Array4::<F>::zeros((n, c, h, w));
    let xsl = x.as_slice_mut().unwrap();
    let (cs_h, cs_w) = (h * w, w);
    // Gemm outputs can arrive column-major; normalize before row slicing.
    let cols_std = cols.as_standard_layout();
    let ncols = cols.ncols();
    let csl = cols_std.as_slice().unwrap();
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (ni * oh + oi) * ow + oj;
                let rb = &csl[row * ncols..(row + 1) * ncols];
                for ci in 0..c {
                    let base_in = ni * c * cs_h + ci * cs_h;
                    for ki in 0..k {
                        let ih = oi * stride + ki;
                        if ih < pad || ih >= h + pad {
                            continue;
                        }
                        let ih = ih - pad;
                        for kj in 0..k {
                            let iw = oj * stride + kj;
                            if iw < pad || iw >= w + pad {
                                continue;
                            }
                            let iw = iw - pad;
                            xsl[base_in + ih * cs_w + iw] =
                                xsl[base_in + ih * cs_w + iw] + rb[(ci * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat index of its source element in the input.
pub fn maxpool2<F: Scalar>(x: &ArrayView4<F>) -> (Array4<F>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<F>::zeros((n, c, oh, ow));
    let mut arg = vec![0usize; n * c * oh * ow];
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let ysl = y.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let obase = (ni * c + ci) * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best_idx = base + (2 * oi) * w + 2 * oj;
                    let mut best = xsl[best_idx];
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = base + (2 * oi + di) * w + (2 * oj + dj);
                            if xsl[idx] > best {
                                best = xsl[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = obase + oi * ow + oj;
                    ysl[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (y, arg)
}

/// Route values through the argmax recorded by `maxpool2`.
pub fn maxpool2_gather<F: Scalar>(x: &ArrayView4<F>, arg: &[usize], oshape: (usize, usize, usize, usize)) -> Array4<F> {
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let mut y = Array4::<F>::zeros(oshape);
    for (o, yv) in y.as_slice_mut().unwrap().iter_mut().enumerate() {
        *yv = xsl[arg[o]];
    }
    y
}

/// Scatter output-shaped gradients back through the argmax.
pub fn maxpool2_scatter<F: Scalar>(
    g: &ArrayView4<F>,
    arg: &[usize],
    ishape: (usize, usize, usize, usize),
) -> Array4<F> {
    let gs = g.as_standard_layout();
    let gsl = gs.as_slice().unwrap();
    let mut x = Array4::<F>::zeros(ishape);
    let xsl = x.as_slice_mut().unwrap();
    for (o, &idx) in arg.iter().enumerate() {
        xsl[idx] = xsl[idx] + gsl[o];
    }
    x
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Scalar>(x: &ArrayView4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[(ni, ci, i, j)];
                    y[(ni, ci, 2 * i, 2 * j)] = v;
                    y[(ni, ci, 2 * i + 1, 2 * j)] = v;
                    y[(ni, ci, 2 * i, 2 * j + 1)] = v;
                    y[(ni, ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
    }
    y
}

/// Transpose of `upsample2`: sum each 2x2 block.
pub fn upsample2_back<F: Scalar>(g: &ArrayView4<F>) -> Array4<F> {
    let (n, c, h2, w2) = g.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut x = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    x[(ni, ci, i, j)] = g[(ni, ci, 2 * i, 2 * j)]
                        + g[(ni, ci, 2 * i + 1, 2 * j)]
                        + g[(ni, ci, 2 * i, 2 * j + 1)]
                        + g[(ni, ci, 2 * i + 1, 2 * j + 1)];
                }
            }
        }
    }
    x
}

/// Identity shortcut with spatial subsampling and zero channel padding
/// (the parameter-free variant used when a residual stage grows channels).
pub fn pad_shortcut<F: Scalar>(x: &ArrayView4<F>, out_c: usize, stride: usize) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / stride, w / stride);
    let mut y = Array4::<F>::zeros((n, out_c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    y[(ni, ci, i, j)] = x[(ni, ci, i * stride, j * stride)];
                }
            }
        }
    }
    y
}

pub fn pad_shortcut_back<F: Scalar>(
    g: &ArrayView4<F>,
    in_c: usize,
    stride: usize,
    ishape: (usize, usize, usize, usize),
) -> Array4<F> {
    let (n, _oc, oh, ow) = g.dim();
    let mut x = Array4::<F>::zeros(ishape);
    for ni in 0..n {
        for ci in 0..in_c {
            for i in 0..oh {
                for j in 0..ow {
                    x[(ni, ci, i * stride, j * stride)] = g[(ni, ci, i, j)];
                }
            }
        }
    }
    x
}
