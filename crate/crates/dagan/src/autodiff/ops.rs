//! Differentiable operations. Forward math uses `ndarray`; each op registers
//! a backward closure mapping the output gradient to parent gradients.
//!
//! Convolutions go through im2col/col2im and a GEMM, which keeps the backward
//! passes short: the data gradient of a convolution is a transposed-weight
//! GEMM plus col2im, and the transposed convolution reuses the same pieces
//! with the roles of input and output swapped.

use super::{BackwardCtx, Tensor};
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView3, Axis, Ix1, Ix2, Ix4, IxDyn};

fn conv_out(n: usize, k: usize, s: usize, p: usize, d: usize) -> usize {
    let eff = d * (k - 1) + 1;
    assert!(
        n + 2 * p >= eff,
        "input size {n} too small for kernel {k} dilation {d} padding {p}"
    );
    (n + 2 * p - eff) / s + 1
}

fn reshaped(a: &ArrayD<f64>, dims: &[usize]) -> ArrayD<f64> {
    let len: usize = dims.iter().product();
    assert_eq!(a.len(), len, "reshape element count mismatch");
    ArrayD::from_shape_vec(IxDyn(dims), a.iter().copied().collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let v = &*self.value() + &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![Some(ctx.out_grad.clone()), Some(ctx.out_grad.clone())]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let v = &*self.value() - &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![Some(ctx.out_grad.clone()), Some(-ctx.out_grad.clone())]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let v = &*self.value() * &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let a = ctx.parents[0].value();
                let b = ctx.parents[1].value();
                vec![
                    if ctx.needs[0] { Some(ctx.out_grad * &*b) } else { None },
                    if ctx.needs[1] { Some(ctx.out_grad * &*a) } else { None },
                ]
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "div: shape mismatch");
        let v = &*self.value() / &*other.value();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let a = ctx.parents[0].value();
                let b = ctx.parents[1].value();
                let da = if ctx.needs[0] { Some(ctx.out_grad / &*b) } else { None };
                let db = if ctx.needs[1] {
                    Some(-(ctx.out_grad * &*a) / (&*b * &*b))
                } else {
                    None
                };
                vec![da, db]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        let v = -self.to_array();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| vec![Some(-ctx.out_grad.clone())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let v = &*self.value() + c;
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.out_grad.clone())]),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let v = &*self.value() * c;
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| vec![Some(ctx.out_grad * c)]),
        )
    }

    pub fn relu(&self) -> Tensor {
        let v = self.value().mapv(|x| x.max(0.0));
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let x = ctx.parents[0].value();
                let mut g = ctx.out_grad.clone();
                g.zip_mut_with(&x, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi = 0.0;
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let x = ctx.parents[0].value();
                let mut g = ctx.out_grad.clone();
                g.zip_mut_with(&x, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi *= slope;
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.value().mapv(stable_sigmoid);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let y = ctx.out_value;
                vec![Some(ctx.out_grad * &(y * &(1.0 - y)))]
            }),
        )
    }

    /// Natural log; the caller must guarantee strictly positive inputs
    /// (compose with `clamp`).
    pub fn ln(&self) -> Tensor {
        let v = self.value().mapv(f64::ln);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let x = ctx.parents[0].value();
                vec![Some(ctx.out_grad / &*x)]
            }),
        )
    }

    /// Clamp to [lo, hi]; gradient passes only where the input is inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let v = self.value().mapv(|x| x.clamp(lo, hi));
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let x = ctx.parents[0].value();
                let mut g = ctx.out_grad.clone();
                g.zip_mut_with(&x, |gi, &xi| {
                    if xi < lo || xi > hi {
                        *gi = 0.0;
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn sum(&self) -> Tensor {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let shape = ctx.parents[0].shape();
                let g = *ctx.out_grad.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(IxDyn(&shape), g))]
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    pub fn reshape(&self, dims: &[usize]) -> Tensor {
        let v = reshaped(&self.value(), dims);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let shape = ctx.parents[0].shape();
                vec![Some(reshaped(ctx.out_grad, &shape))]
            }),
        )
    }

    /// Multiplies every spatial position of channel c in sample n by
    /// `gate[n, c]`. `x: [N,C,H,W]`, `gate: [N,C]`.
    pub fn scale_channels(&self, gate: &Tensor) -> Tensor {
        let x = self.value().clone().into_dimensionality::<Ix4>().unwrap();
        let g = gate.value().clone().into_dimensionality::<Ix2>().unwrap();
        let (n, c, h, w) = x.dim();
        assert_eq!(g.dim(), (n, c), "scale_channels: gate shape mismatch");
        let mut out = x.clone();
        for ni in 0..n {
            for ci in 0..c {
                out.index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * g[[ni, ci]]);
            }
        }
        let _ = (h, w);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), gate.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let x = ctx.parents[0].value();
                let gate = ctx.parents[1].value();
                let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
                let g2 = gate.view().into_dimensionality::<Ix2>().unwrap();
                let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, _, _) = x4.dim();
                let dx = if ctx.needs[0] {
                    let mut dx = og.to_owned();
                    for ni in 0..n {
                        for ci in 0..c {
                            dx.index_axis_mut(Axis(0), ni)
                                .index_axis_mut(Axis(0), ci)
                                .mapv_inplace(|v| v * g2[[ni, ci]]);
                        }
                    }
                    Some(dx.into_dyn())
                } else {
                    None
                };
                let dg = if ctx.needs[1] {
                    let mut dg = Array2::<f64>::zeros((n, c));
                    for ni in 0..n {
                        for ci in 0..c {
                            let prod = &og.index_axis(Axis(0), ni).index_axis(Axis(0), ci)
                                * &x4.index_axis(Axis(0), ni).index_axis(Axis(0), ci);
                            dg[[ni, ci]] = prod.sum();
                        }
                    }
                    Some(dg.into_dyn())
                } else {
                    None
                };
                vec![dx, dg]
            }),
        )
    }

    /// Adds a per-channel bias. `x: [N,C,H,W]`, `bias: [C]`.
    pub fn bias_channels(&self, bias: &Tensor) -> Tensor {
        let x = self.value().clone().into_dimensionality::<Ix4>().unwrap();
        let b = bias.value().clone().into_dimensionality::<Ix1>().unwrap();
        let (_, c, _, _) = x.dim();
        assert_eq!(b.len(), c, "bias_channels: channel mismatch");
        let mut out = x;
        for (ci, &bv) in b.iter().enumerate() {
            out.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v + bv);
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), bias.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
                let c = og.dim().1;
                let db = if ctx.needs[1] {
                    let mut db = Array1::<f64>::zeros(c);
                    for ci in 0..c {
                        db[ci] = og.index_axis(Axis(1), ci).sum();
                    }
                    Some(db.into_dyn())
                } else {
                    None
                };
                vec![Some(ctx.out_grad.clone()), db]
            }),
        )
    }

    /// Fixed (non-learnable) per-channel affine map `(x - shift) * scale`.
    pub fn channel_affine(&self, scale: Vec<f64>, shift: Vec<f64>) -> Tensor {
        let x = self.value().clone().into_dimensionality::<Ix4>().unwrap();
        let (_, c, _, _) = x.dim();
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let mut out = x;
        for ci in 0..c {
            let (s, m) = (scale[ci], shift[ci]);
            out.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - m) * s);
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = og.to_owned();
                for ci in 0..scale.len() {
                    dx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * scale[ci]);
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// GroupNorm over `[N,C,H,W]`: statistics per (sample, channel group),
    /// learnable per-channel gain/bias.
    pub fn group_norm(&self, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Tensor {
        let x = self.value().clone().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x.dim();
        assert!(c % groups == 0, "group_norm: {c} channels not divisible by {groups} groups");
        let gamma_a = gamma.value().clone().into_dimensionality::<Ix1>().unwrap();
        let beta_a = beta.value().clone().into_dimensionality::<Ix1>().unwrap();
        let cg = c / groups;
        let m = (cg * h * w) as f64;

        let mut out = Array4::<f64>::zeros((n, c, h, w));
        let mut mean = Array2::<f64>::zeros((n, groups));
        let mut inv_std = Array2::<f64>::zeros((n, groups));
        for ni in 0..n {
            for gi in 0..groups {
                let mut mu = 0.0;
                for ci in gi * cg..(gi + 1) * cg {
                    mu += x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum();
                }
                mu /= m;
                let mut var = 0.0;
                for ci in gi * cg..(gi + 1) * cg {
                    for yi in 0..h {
                        for xi in 0..w {
                            let d = x[[ni, ci, yi, xi]] - mu;
                            var += d * d;
                        }
                    }
                }
                var /= m;
                let is = 1.0 / (var + eps).sqrt();
                mean[[ni, gi]] = mu;
                inv_std[[ni, gi]] = is;
                for ci in gi * cg..(gi + 1) * cg {
                    for yi in 0..h {
                        for xi in 0..w {
                            let xh = (x[[ni, ci, yi, xi]] - mu) * is;
                            out[[ni, ci, yi, xi]] = gamma_a[ci] * xh + beta_a[ci];
                        }
                    }
                }
            }
        }

        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let x = ctx.parents[0].value();
                let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
                let gamma_v = ctx.parents[1].value();
                let g1 = gamma_v.view().into_dimensionality::<Ix1>().unwrap();
                let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = x4.dim();
                let cg = c / groups;
                let m = (cg * h * w) as f64;

                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ni in 0..n {
                    for gi in 0..groups {
                        let mu = mean[[ni, gi]];
                        let is = inv_std[[ni, gi]];
                        // dy_hat = g * gamma; need mean(dy_hat) and mean(dy_hat * x_hat)
                        let mut s1 = 0.0; // sum of dy_hat
                        let mut s2 = 0.0; // sum of dy_hat * x_hat
                        for ci in gi * cg..(gi + 1) * cg {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let xh = (x4[[ni, ci, yi, xi]] - mu) * is;
                                    let go = og[[ni, ci, yi, xi]];
                                    let dyh = go * g1[ci];
                                    s1 += dyh;
                                    s2 += dyh * xh;
                                    dgamma[ci] += go * xh;
                                    dbeta[ci] += go;
                                }
                            }
                        }
                        let (m1, m2) = (s1 / m, s2 / m);
                        for ci in gi * cg..(gi + 1) * cg {
                            for yi in 0..h {
                                for xi in 0..w {
                                    let xh = (x4[[ni, ci, yi, xi]] - mu) * is;
                                    let dyh = og[[ni, ci, yi, xi]] * g1[ci];
                                    dx[[ni, ci, yi, xi]] = is * (dyh - m1 - xh * m2);
                                }
                            }
                        }
                    }
                }
                vec![
                    if ctx.needs[0] { Some(dx.into_dyn()) } else { None },
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }

    /// LayerNorm across the channel axis, independently per spatial position.
    /// `x: [N,C,H,W]`, learnable per-channel gain/bias.
    pub fn layer_norm_channels(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let x = self.value().clone().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = x.dim();
        let gamma_a = gamma.value().clone().into_dimensionality::<Ix1>().unwrap();
        let beta_a = beta.value().clone().into_dimensionality::<Ix1>().unwrap();
        let m = c as f64;

        let mut out = Array4::<f64>::zeros((n, c, h, w));
        let mut mean = Array3::<f64>::zeros((n, h, w));
        let mut inv_std = Array3::<f64>::zeros((n, h, w));
        for ni in 0..n {
            for yi in 0..h {
                for xi in 0..w {
                    let mut mu = 0.0;
                    for ci in 0..c {
                        mu += x[[ni, ci, yi, xi]];
                    }
                    mu /= m;
                    let mut var = 0.0;
                    for ci in 0..c {
                        let d = x[[ni, ci, yi, xi]] - mu;
                        var += d * d;
                    }
                    var /= m;
                    let is = 1.0 / (var + eps).sqrt();
                    mean[[ni, yi, xi]] = mu;
                    inv_std[[ni, yi, xi]] = is;
                    for ci in 0..c {
                        out[[ni, ci, yi, xi]] =
                            gamma_a[ci] * (x[[ni, ci, yi, xi]] - mu) * is + beta_a[ci];
                    }
                }
            }
        }

        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let x = ctx.parents[0].value();
                let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
                let gamma_v = ctx.parents[1].value();
                let g1 = gamma_v.view().into_dimensionality::<Ix1>().unwrap();
                let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = x4.dim();
                let m = c as f64;

                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ni in 0..n {
                    for yi in 0..h {
                        for xi in 0..w {
                            let mu = mean[[ni, yi, xi]];
                            let is = inv_std[[ni, yi, xi]];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for ci in 0..c {
                                let xh = (x4[[ni, ci, yi, xi]] - mu) * is;
                                let go = og[[ni, ci, yi, xi]];
                                let dyh = go * g1[ci];
                                s1 += dyh;
                                s2 += dyh * xh;
                                dgamma[ci] += go * xh;
                                dbeta[ci] += go;
                            }
                            let (m1, m2) = (s1 / m, s2 / m);
                            for ci in 0..c {
                                let xh = (x4[[ni, ci, yi, xi]] - mu) * is;
                                let dyh = og[[ni, ci, yi, xi]] * g1[ci];
                                dx[[ni, ci, yi, xi]] = is * (dyh - m1 - xh * m2);
                            }
                        }
                    }
                }
                vec![
                    if ctx.needs[0] { Some(dx.into_dyn()) } else { None },
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

/// 2-D matrix product `[M,K] x [K,N] -> [M,N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let av = a.value().clone().into_dimensionality::<Ix2>().unwrap();
    let bv = b.value().clone().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(av.dim().1, bv.dim().0, "matmul: inner dimension mismatch");
    let v = av.dot(&bv);
    Tensor::from_op(
        v.into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(|ctx: &BackwardCtx| {
            let a = ctx.parents[0].value();
            let b = ctx.parents[1].value();
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            let g2 = ctx.out_grad.view().into_dimensionality::<Ix2>().unwrap();
            let da = if ctx.needs[0] { Some(g2.dot(&b2.t()).into_dyn()) } else { None };
            let db = if ctx.needs[1] { Some(a2.t().dot(&g2).into_dyn()) } else { None };
            vec![da, db]
        }),
    )
}

/// Row-wise softmax of a 2-D tensor with max subtraction; every output row
/// sums to one.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let xv = x.value().clone().into_dimensionality::<Ix2>().unwrap();
    let (r, k) = xv.dim();
    let mut y = Array2::<f64>::zeros((r, k));
    for ri in 0..r {
        let row = xv.row(ri);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for ki in 0..k {
            let e = (row[ki] - mx).exp();
            y[[ri, ki]] = e;
            denom += e;
        }
        for ki in 0..k {
            y[[ri, ki]] /= denom;
        }
    }
    Tensor::from_op(
        y.into_dyn(),
        vec![x.clone()],
        Box::new(|ctx: &BackwardCtx| {
            let y = ctx.out_value.view().into_dimensionality::<Ix2>().unwrap();
            let g = ctx.out_grad.view().into_dimensionality::<Ix2>().unwrap();
            let (r, k) = y.dim();
            let mut dx = Array2::<f64>::zeros((r, k));
            for ri in 0..r {
                let mut dot = 0.0;
                for ki in 0..k {
                    dot += g[[ri, ki]] * y[[ri, ki]];
                }
                for ki in 0..k {
                    dx[[ri, ki]] = y[[ri, ki]] * (g[[ri, ki]] - dot);
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Fully connected layer `x: [N,F]`, `w: [O,F]`, optional `b: [O]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let xv = x.value().clone().into_dimensionality::<Ix2>().unwrap();
    let wv = w.value().clone().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(xv.dim().1, wv.dim().1, "linear: feature dimension mismatch");
    let mut y = xv.dot(&wv.t());
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        let bv = b.value().clone().into_dimensionality::<Ix1>().unwrap();
        y += &bv;
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Tensor::from_op(
        y.into_dyn(),
        parents,
        Box::new(move |ctx: &BackwardCtx| {
            let xv = ctx.parents[0].value();
            let wv = ctx.parents[1].value();
            let x2 = xv.view().into_dimensionality::<Ix2>().unwrap();
            let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
            let g2 = ctx.out_grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut grads = vec![
                if ctx.needs[0] { Some(g2.dot(&w2).into_dyn()) } else { None },
                Some(g2.t().dot(&x2).into_dyn()),
            ];
            if has_bias {
                grads.push(Some(g2.sum_axis(Axis(0)).into_dyn()));
            }
            grads
        }),
    )
}

/// Concatenate along the channel axis. All inputs `[N,C_i,H,W]`.
pub fn concat_channels(xs: &[&Tensor]) -> Tensor {
    assert!(!xs.is_empty());
    let views: Vec<Array4<f64>> = xs
        .iter()
        .map(|t| t.value().clone().into_dimensionality::<Ix4>().unwrap())
        .collect();
    let (n, _, h, w) = views[0].dim();
    let channels: Vec<usize> = views.iter().map(|v| v.dim().1).collect();
    let total: usize = channels.iter().sum();
    let mut out = Array4::<f64>::zeros((n, total, h, w));
    let mut off = 0;
    for v in &views {
        let c = v.dim().1;
        out.slice_mut(ndarray::s![.., off..off + c, .., ..]).assign(v);
        off += c;
    }
    Tensor::from_op(
        out.into_dyn(),
        xs.iter().map(|t| (*t).clone()).collect(),
        Box::new(move |ctx: &BackwardCtx| {
            let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut grads = Vec::with_capacity(channels.len());
            let mut off = 0;
            for (&c, &needed) in channels.iter().zip(ctx.needs) {
                if needed {
                    grads.push(Some(
                        og.slice(ndarray::s![.., off..off + c, .., ..]).to_owned().into_dyn(),
                    ));
                } else {
                    grads.push(None);
                }
                off += c;
            }
            grads
        }),
    )
}

/// 2-D transpose.
pub fn transpose2d(x: &Tensor) -> Tensor {
    let xv = x.value().clone().into_dimensionality::<Ix2>().unwrap();
    Tensor::from_op(
        xv.t().to_owned().into_dyn(),
        vec![x.clone()],
        Box::new(|ctx: &BackwardCtx| {
            let g = ctx.out_grad.view().into_dimensionality::<Ix2>().unwrap();
            vec![Some(g.t().to_owned().into_dyn())]
        }),
    )
}

/// Extracts sample `i` from a batch: `[N,C,H,W] -> [1,C,H,W]`.
pub fn index_batch(x: &Tensor, i: usize) -> Tensor {
    let xv = x.value().clone().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    assert!(i < n, "index_batch: {i} out of {n}");
    let v = xv
        .index_axis(Axis(0), i)
        .to_owned()
        .into_shape_with_order((1, c, h, w))
        .unwrap();
    Tensor::from_op(
        v.into_dyn(),
        vec![x.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            dx.index_axis_mut(Axis(0), i).assign(&og.index_axis(Axis(0), 0));
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Concatenates `[1,C,H,W]` (or `[n_i,C,H,W]`) tensors along the batch axis.
pub fn concat_batch(xs: &[Tensor]) -> Tensor {
    assert!(!xs.is_empty());
    let views: Vec<Array4<f64>> = xs
        .iter()
        .map(|t| t.value().clone().into_dimensionality::<Ix4>().unwrap())
        .collect();
    let (_, c, h, w) = views[0].dim();
    let counts: Vec<usize> = views.iter().map(|v| v.dim().0).collect();
    let total: usize = counts.iter().sum();
    let mut out = Array4::<f64>::zeros((total, c, h, w));
    let mut off = 0;
    for v in &views {
        let n = v.dim().0;
        out.slice_mut(ndarray::s![off..off + n, .., .., ..]).assign(v);
        off += n;
    }
    Tensor::from_op(
        out.into_dyn(),
        xs.to_vec(),
        Box::new(move |ctx: &BackwardCtx| {
            let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut grads = Vec::with_capacity(counts.len());
            let mut off = 0;
            for (&n, &needed) in counts.iter().zip(ctx.needs) {
                if needed {
                    grads.push(Some(
                        og.slice(ndarray::s![off..off + n, .., .., ..]).to_owned().into_dyn(),
                    ));
                } else {
                    grads.push(None);
                }
                off += n;
            }
            grads
        }),
    )
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Geometry of a 2-D convolution with square kernels.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dSpec { stride, padding, dilation }
    }

    pub fn out_size(&self, n: usize, k: usize) -> usize {
        conv_out(n, k, self.stride, self.padding, self.dilation)
    }
}

fn im2col(x: ArrayView3<f64>, k: usize, s: usize, p: usize, d: usize) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let oh = conv_out(h, k, s, p, d);
    let ow = conv_out(w, k, s, p, d);
    let mut cols = Array2::<f64>::zeros((c_in * k * k, oh * ow));
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * s + ky * d) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * s + kx * d) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of `im2col`. `grid` is the (rows, cols) of the
/// position lattice the columns were generated over.
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    grid: (usize, usize),
    k: usize,
    s: usize,
    p: usize,
    d: usize,
) -> Array3<f64> {
    let (gh, gw) = grid;
    let mut im = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = cols.row(row);
                for oy in 0..gh {
                    let iy = (oy * s + ky * d) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..gw {
                        let ix = (ox * s + kx * d) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        im[[ci, iy as usize, ix as usize]] += src[oy * gw + ox];
                    }
                }
            }
        }
    }
    im
}

/// 2-D convolution. `x: [N,Ci,H,W]`, `w: [Co,Ci,k,k]`, optional `b: [Co]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: Conv2dSpec) -> Tensor {
    let xv = x.value().clone().into_dimensionality::<Ix4>().unwrap();
    let wv = w.value().clone().into_dimensionality::<Ix4>().unwrap();
    let (n, ci, h, wd) = xv.dim();
    let (co, ci_w, k, k2) = wv.dim();
    assert_eq!(k, k2, "conv2d: kernels must be square");
    assert_eq!(ci, ci_w, "conv2d: input channels {ci} do not match weight {ci_w}");
    let oh = spec.out_size(h, k);
    let ow = spec.out_size(wd, k);

    let wmat = wv.to_shape((co, ci * k * k)).unwrap().to_owned();
    let mut out = Array4::<f64>::zeros((n, co, oh, ow));
    for ni in 0..n {
        let cols = im2col(xv.index_axis(Axis(0), ni), k, spec.stride, spec.padding, spec.dilation);
        let o = wmat.dot(&cols); // [Co, oh*ow]
        out.index_axis_mut(Axis(0), ni)
            .assign(&o.into_shape_with_order((co, oh, ow)).unwrap());
    }
    if let Some(b) = b {
        let bv = b.value().clone().into_dimensionality::<Ix1>().unwrap();
        for (ci_b, &bval) in bv.iter().enumerate() {
            out.index_axis_mut(Axis(1), ci_b).mapv_inplace(|v| v + bval);
        }
    }

    let has_bias = b.is_some();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Tensor::from_op(
        out.into_dyn(),
        parents,
        Box::new(move |ctx: &BackwardCtx| {
            let xv = ctx.parents[0].value();
            let wv = ctx.parents[1].value();
            let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
            let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
            let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
            let (n, ci, h, wd) = x4.dim();
            let (co, _, k, _) = w4.dim();
            let (oh, ow) = (og.dim().2, og.dim().3);
            let wmat = w4.to_shape((co, ci * k * k)).unwrap().to_owned();

            let mut dw = Array2::<f64>::zeros((co, ci * k * k));
            let mut dx = if ctx.needs[0] { Some(Array4::<f64>::zeros((n, ci, h, wd))) } else { None };
            for ni in 0..n {
                let g_mat = og
                    .index_axis(Axis(0), ni)
                    .to_shape((co, oh * ow))
                    .unwrap()
                    .to_owned();
                let cols =
                    im2col(x4.index_axis(Axis(0), ni), k, spec.stride, spec.padding, spec.dilation);
                dw += &g_mat.dot(&cols.t());
                if let Some(dx) = dx.as_mut() {
                    let dcols = wmat.t().dot(&g_mat); // [Ci*k*k, oh*ow]
                    let dxi = col2im(
                        &dcols,
                        ci,
                        h,
                        wd,
                        (oh, ow),
                        k,
                        spec.stride,
                        spec.padding,
                        spec.dilation,
                    );
                    dx.index_axis_mut(Axis(0), ni).assign(&dxi);
                }
            }
            let mut grads = vec![
                dx.map(|d| d.into_dyn()),
                Some(dw.into_shape_with_order((co, ci, k, k)).unwrap().into_dyn()),
            ];
            if has_bias {
                let mut db = Array1::<f64>::zeros(co);
                for c in 0..co {
                    db[c] = og.index_axis(Axis(1), c).sum();
                }
                grads.push(Some(db.into_dyn()));
            }
            grads
        }),
    )
}

/// Transposed 2-D convolution (fractionally strided). `x: [N,Ci,H,W]`,
/// `w: [Ci,Co,k,k]`, output spatial size `(H-1)*stride - 2*padding + k`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let xv = x.value().clone().into_dimensionality::<Ix4>().unwrap();
    let wv = w.value().clone().into_dimensionality::<Ix4>().unwrap();
    let (n, ci, h, wd) = xv.dim();
    let (ci_w, co, k, k2) = wv.dim();
    assert_eq!(k, k2, "conv_transpose2d: kernels must be square");
    assert_eq!(ci, ci_w, "conv_transpose2d: channel mismatch");
    assert!((h - 1) * stride + k > 2 * padding, "conv_transpose2d: degenerate output");
    let oh = (h - 1) * stride + k - 2 * padding;
    let ow = (wd - 1) * stride + k - 2 * padding;

    let wmat = wv.to_shape((ci, co * k * k)).unwrap().to_owned();
    let mut out = Array4::<f64>::zeros((n, co, oh, ow));
    for ni in 0..n {
        let x_mat = xv
            .index_axis(Axis(0), ni)
            .to_shape((ci, h * wd))
            .unwrap()
            .to_owned();
        let cols = wmat.t().dot(&x_mat); // [Co*k*k, h*w]
        let o = col2im(&cols, co, oh, ow, (h, wd), k, stride, padding, 1);
        out.index_axis_mut(Axis(0), ni).assign(&o);
    }
    if let Some(b) = b {
        let bv = b.value().clone().into_dimensionality::<Ix1>().unwrap();
        for (c, &bval) in bv.iter().enumerate() {
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bval);
        }
    }

    let has_bias = b.is_some();
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Tensor::from_op(
        out.into_dyn(),
        parents,
        Box::new(move |ctx: &BackwardCtx| {
            let xv = ctx.parents[0].value();
            let wv = ctx.parents[1].value();
            let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
            let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
            let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
            let (n, ci, h, wd) = x4.dim();
            let (_, co, k, _) = w4.dim();
            let wmat = w4.to_shape((ci, co * k * k)).unwrap().to_owned();

            let mut dw = Array2::<f64>::zeros((ci, co * k * k));
            let mut dx = if ctx.needs[0] { Some(Array4::<f64>::zeros((n, ci, h, wd))) } else { None };
            for ni in 0..n {
                // im2col over the *output* gradient reproduces the scatter
                // pattern of the forward pass.
                let gcols = im2col(og.index_axis(Axis(0), ni), k, stride, padding, 1);
                let x_mat = x4
                    .index_axis(Axis(0), ni)
                    .to_shape((ci, h * wd))
                    .unwrap()
                    .to_owned();
                dw += &x_mat.dot(&gcols.t());
                if let Some(dx) = dx.as_mut() {
                    let dxi = wmat.dot(&gcols); // [Ci, h*w]
                    dx.index_axis_mut(Axis(0), ni)
                        .assign(&dxi.into_shape_with_order((ci, h, wd)).unwrap());
                }
            }
            let mut grads = vec![
                dx.map(|d| d.into_dyn()),
                Some(dw.into_shape_with_order((ci, co, k, k)).unwrap().into_dyn()),
            ];
            if has_bias {
                let mut db = Array1::<f64>::zeros(co);
                for c in 0..co {
                    db[c] = og.index_axis(Axis(1), c).sum();
                }
                grads.push(Some(db.into_dyn()));
            }
            grads
        }),
    )
}

// ---------------------------------------------------------------------------
// Resampling and pooling
// ---------------------------------------------------------------------------

fn bilinear_table(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            let f = src - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// Bilinear resize of `[N,C,H,W]` to `(oh, ow)` with half-pixel alignment.
/// Resizing to the identical size is an exact copy.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let xv = x.value().clone().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    if h == oh && w == ow {
        // Identity resize: still registers a pass-through node.
        return Tensor::from_op(
            xv.into_dyn(),
            vec![x.clone()],
            Box::new(|ctx: &BackwardCtx| vec![Some(ctx.out_grad.clone())]),
        );
    }
    let ty = bilinear_table(h, oh);
    let tx = bilinear_table(w, ow);
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    out[[ni, ci, oy, ox]] = wy0 * (wx0 * xv[[ni, ci, y0, x0]] + wx1 * xv[[ni, ci, y0, x1]])
                        + wy1 * (wx0 * xv[[ni, ci, y1, x0]] + wx1 * xv[[ni, ci, y1, x1]]);
                }
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let og = ctx.out_grad.view().into_dimensionality::<Ix4>().unwrap();
            let (n, c, _, _) = og.dim();
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let g = og[[ni, ci, oy, ox]];
                            dx[[ni, ci, y0, x0]] += g * wy0 * wx0;
                            dx[[ni, ci, y0, x1]] += g * wy0 * wx1;
                            dx[[ni, ci, y1, x0]] += g * wy1 * wx0;
                            dx[[ni, ci, y1, x1]] += g * wy1 * wx1;
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Global average pool `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let xv = x.value().clone().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    let m = (h * w) as f64;
    let mut out = Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            out[[ni, ci]] = xv.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() / m;
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let og = ctx.out_grad.view().into_dimensionality::<Ix2>().unwrap();
            let (n, c) = og.dim();
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let g = og[[ni, ci]] / m;
                    dx.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .fill(g);
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Global max pool `[N,C,H,W] -> [N,C]`; gradient routed to the first
/// maximal element.
pub fn global_max_pool(x: &Tensor) -> Tensor {
    let xv = x.value().clone().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    let mut out = Array2::<f64>::zeros((n, c));
    let mut arg = vec![0usize; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let plane = xv.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out[[ni, ci]] = best;
            arg[ni * c + ci] = best_i;
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let og = ctx.out_grad.view().into_dimensionality::<Ix2>().unwrap();
            let (n, c) = og.dim();
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let i = arg[ni * c + ci];
                    dx[[ni, ci, i / w, i % w]] = og[[ni, ci]];
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite difference of `f` at `x`, one coordinate at a time.
    fn numeric_grad(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, step: f64) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = xp.as_slice_mut().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + step;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - step;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
        }
        g
    }

    fn max_rel_err(a: &ArrayD<f64>, n: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(n.iter())
            .map(|(&ai, &ni)| (ai - ni).abs() / f64::max(1e-6, ai.abs().max(ni.abs())))
            .fold(0.0, f64::max)
    }

    /// FD-checks the gradient of `sum(f(x))` w.r.t. `x`.
    fn check_op(f: impl Fn(&Tensor) -> Tensor, shape: &[usize], seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_arr(shape, &mut rng);
        let x = Tensor::param(x0.clone());
        let loss = f(&x).sum();
        loss.backward();
        let analytic = x.grad().unwrap();
        let numeric = numeric_grad(
            &|xv: &ArrayD<f64>| {
                let t = Tensor::new(xv.clone());
                f(&t).sum().item()
            },
            &x0,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "max rel err {err} over tolerance {tol}");
    }

    #[test]
    fn elementwise_grads_match_fd() {
        check_op(|x| x.sigmoid(), &[3, 4], 1, 1e-6);
        check_op(|x| x.mul(x).add_scalar(2.0).mul_scalar(0.5), &[5], 2, 1e-6);
        check_op(|x| x.add_scalar(3.0).ln(), &[4], 3, 1e-6);
        check_op(|x| x.leaky_relu(0.2).mul(x), &[6], 4, 1e-4);
    }

    #[test]
    fn matmul_grad_matches_fd() {
        check_op(
            |x| {
                let w = Tensor::new(arr2(&[[0.3, -0.2], [0.1, 0.7], [0.5, 0.4]]).into_dyn());
                matmul(x, &w)
            },
            &[4, 3],
            5,
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(rand_arr(&[6, 5], &mut rng));
        let y = softmax_rows(&x);
        let yv = y.to_array();
        for r in 0..6 {
            let s: f64 = (0..5).map(|k| yv[[r, k]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        check_op(|x| softmax_rows(x).mul(x), &[3, 4], 10, 1e-5);
    }

    #[test]
    fn conv2d_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = rand_arr(&[3, 2, 3, 3], &mut rng);
        let b0 = rand_arr(&[3], &mut rng);
        let x0 = rand_arr(&[2, 2, 6, 6], &mut rng);
        let spec = Conv2dSpec::new(2, 1, 1);

        let x = Tensor::param(x0.clone());
        let w = Tensor::param(w0.clone());
        let b = Tensor::param(b0.clone());
        let loss = conv2d(&x, &w, Some(&b), spec).mul(&conv2d(&x, &w, Some(&b), spec)).sum();
        loss.backward();

        let f_x = |xv: &ArrayD<f64>| {
            let x = Tensor::new(xv.clone());
            let w = Tensor::new(w0.clone());
            let b = Tensor::new(b0.clone());
            let y = conv2d(&x, &w, Some(&b), spec);
            y.mul(&y).sum().item()
        };
        let gx = numeric_grad(&f_x, &x0, 1e-5);
        assert!(max_rel_err(&x.grad().unwrap(), &gx) < 1e-5);

        let f_w = |wv: &ArrayD<f64>| {
            let x = Tensor::new(x0.clone());
            let w = Tensor::new(wv.clone());
            let b = Tensor::new(b0.clone());
            let y = conv2d(&x, &w, Some(&b), spec);
            y.mul(&y).sum().item()
        };
        let gw = numeric_grad(&f_w, &w0, 1e-5);
        assert!(max_rel_err(&w.grad().unwrap(), &gw) < 1e-5);
    }

    #[test]
    fn dilated_conv_preserves_size_with_matching_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for rate in [3usize, 5, 7] {
            let x = Tensor::new(rand_arr(&[1, 2, 16, 16], &mut rng));
            let w = Tensor::new(rand_arr(&[2, 2, 3, 3], &mut rng));
            let y = conv2d(&x, &w, None, Conv2dSpec::new(1, rate, rate));
            assert_eq!(y.shape(), vec![1, 2, 16, 16]);
        }
    }

    #[test]
    fn conv_transpose_doubles_and_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = rand_arr(&[1, 2, 4, 4], &mut rng);
        let w0 = rand_arr(&[2, 3, 4, 4], &mut rng);
        let b0 = rand_arr(&[3], &mut rng);

        let x = Tensor::param(x0.clone());
        let w = Tensor::param(w0.clone());
        let b = Tensor::param(b0.clone());
        let y = conv_transpose2d(&x, &w, Some(&b), 2, 1);
        assert_eq!(y.shape(), vec![1, 3, 8, 8]);
        y.mul(&y).sum().backward();

        let f_x = |xv: &ArrayD<f64>| {
            let x = Tensor::new(xv.clone());
            let w = Tensor::new(w0.clone());
            let b = Tensor::new(b0.clone());
            let y = conv_transpose2d(&x, &w, Some(&b), 2, 1);
            y.mul(&y).sum().item()
        };
        assert!(max_rel_err(&x.grad().unwrap(), &numeric_grad(&f_x, &x0, 1e-5)) < 1e-5);
        let f_w = |wv: &ArrayD<f64>| {
            let x = Tensor::new(x0.clone());
            let w = Tensor::new(wv.clone());
            let b = Tensor::new(b0.clone());
            let y = conv_transpose2d(&x, &w, Some(&b), 2, 1);
            y.mul(&y).sum().item()
        };
        assert!(max_rel_err(&w.grad().unwrap(), &numeric_grad(&f_w, &w0, 1e-5)) < 1e-5);
    }

    #[test]
    fn bilinear_resize_identity_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x0 = rand_arr(&[1, 2, 5, 5], &mut rng);
        let same = bilinear_resize(&Tensor::new(x0.clone()), 5, 5).to_array();
        assert_eq!(same, x0);

        let x = Tensor::new(x0.clone());
        let up = bilinear_resize(&x, 10, 10).to_array();
        let scaled = bilinear_resize(&Tensor::new(&x0 * 3.0), 10, 10).to_array();
        let diff = (&scaled - &(&up * 3.0)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);

        check_op(|x| bilinear_resize(x, 7, 3).mul(&bilinear_resize(x, 7, 3)), &[1, 2, 4, 6], 15, 1e-5);
    }

    #[test]
    fn pool_and_norm_grads_match_fd() {
        check_op(|x| global_avg_pool(x).mul(&global_avg_pool(x)), &[2, 3, 4, 4], 16, 1e-5);
        check_op(|x| global_max_pool(x).mul(&global_max_pool(x)), &[2, 3, 4, 4], 17, 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let g0 = rand_arr(&[6], &mut rng).mapv(f64::abs) + 0.5;
        let b0 = rand_arr(&[6], &mut rng);
        let x0 = rand_arr(&[2, 6, 3, 3], &mut rng);
        let x = Tensor::param(x0.clone());
        let gamma = Tensor::param(g0.clone());
        let beta = Tensor::param(b0.clone());
        let loss = x.group_norm(&gamma, &beta, 2, 1e-5).mul(&x.group_norm(&gamma, &beta, 2, 1e-5)).sum();
        loss.backward();
        let f = |xv: &ArrayD<f64>| {
            let x = Tensor::new(xv.clone());
            let gamma = Tensor::new(g0.clone());
            let beta = Tensor::new(b0.clone());
            let y = x.group_norm(&gamma, &beta, 2, 1e-5);
            y.mul(&y).sum().item()
        };
        assert!(max_rel_err(&x.grad().unwrap(), &numeric_grad(&f, &x0, 1e-5)) < 1e-4);

        check_op(
            |x| {
                let gamma = Tensor::new(Array::ones(IxDyn(&[3])));
                let beta = Tensor::new(Array::zeros(IxDyn(&[3])));
                let y = x.layer_norm_channels(&gamma, &beta, 1e-5);
                y.mul(&y)
            },
            &[1, 3, 2, 2],
            19,
            1e-4,
        );
    }

    #[test]
    fn batch_slicing_and_transpose_grads_match_fd() {
        check_op(
            |x| {
                let a = index_batch(x, 0);
                let b = index_batch(x, 1);
                concat_batch(&[b, a]).mul(x)
            },
            &[2, 2, 3, 3],
            30,
            1e-5,
        );
        check_op(|x| transpose2d(x).mul(&transpose2d(x)), &[3, 4], 31, 1e-6);
    }

    #[test]
    fn gate_and_bias_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let gate0 = rand_arr(&[2, 3], &mut rng);
        check_op(
            |x| {
                let g = Tensor::new(gate0.clone());
                x.scale_channels(&g)
            },
            &[2, 3, 4, 4],
            21,
            1e-5,
        );
        check_op(
            |x| {
                let b = Tensor::new(rand_arr(&[3], &mut ChaCha8Rng::seed_from_u64(22)));
                x.bias_channels(&b).mul(x)
            },
            &[2, 3, 2, 2],
            23,
            1e-5,
        );
    }
}
