//! Dense 3-D convolution and transposed convolution kernels.
//!
//! Layouts: activations `[C, H, W, D]`, conv weights `[Cout, Cin, k, k, k]`,
//! transposed-conv weights `[Cin, Cout, k, k, k]`. All loops are scalar and
//! run in a fixed order, so results are bitwise deterministic.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::DiffError;

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

pub(crate) fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, DiffError> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || xs[0] != ws[1] {
        return Err(DiffError::ShapeMismatch {
            op: "conv3d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if stride == 0 {
        return Err(DiffError::InvalidShape {
            op: "conv3d",
            shape: xs.to_vec(),
            message: "stride must be positive".into(),
        });
    }
    let (ci, h, wd, d) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[0], ws[2]);
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(DiffError::ShapeMismatch {
                op: "conv3d",
                lhs: ws.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (ho, wo, do_) = match (
        conv_out_extent(h, k, stride, pad),
        conv_out_extent(wd, k, stride, pad),
        conv_out_extent(d, k, stride, pad),
    ) {
        (Some(a), Some(b), Some(c)) if a > 0 && b > 0 && c > 0 => (a, b, c),
        _ => {
            return Err(DiffError::InvalidShape {
                op: "conv3d",
                shape: xs.to_vec(),
                message: format!("kernel {k}, stride {stride}, pad {pad} yields empty output"),
            })
        }
    };

    let xv = x.data();
    let wv = w.data();
    let mut out = vec![T::zero(); co * ho * wo * do_];
    for oc in 0..co {
        let b = bias.map(|b| b.data()[oc]).unwrap_or_else(T::zero);
        for oi in 0..ho {
            // Clip kernel offsets so the input index stays in range.
            let i0 = oi * stride;
            let (ai_lo, ai_hi) = kernel_range(i0, pad, k, h);
            for oj in 0..wo {
                let j0 = oj * stride;
                let (aj_lo, aj_hi) = kernel_range(j0, pad, k, wd);
                for ol in 0..do_ {
                    let l0 = ol * stride;
                    let (al_lo, al_hi) = kernel_range(l0, pad, k, d);
                    let mut acc = b;
                    for ic in 0..ci {
                        let xbase = ic * h * wd * d;
                        let wbase = (oc * ci + ic) * k * k * k;
                        for ki in ai_lo..ai_hi {
                            let xi = i0 + ki - pad;
                            for kj in aj_lo..aj_hi {
                                let xj = j0 + kj - pad;
                                let xrow = xbase + (xi * wd + xj) * d;
                                let wrow = wbase + (ki * k + kj) * k;
                                for kl in al_lo..al_hi {
                                    acc = acc + wv[wrow + kl] * xv[xrow + (l0 + kl - pad)];
                                }
                            }
                        }
                    }
                    out[((oc * ho + oi) * wo + oj) * do_ + ol] = acc;
                }
            }
        }
    }
    Tensor::new(vec![co, ho, wo, do_], out)
}

/// Valid kernel-offset range so that `pos + k - pad` lands inside `[0, extent)`.
fn kernel_range(pos: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(pos);
    let hi = (extent + pad - pos).min(k);
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
    out_shape: &[usize],
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let xs = x.shape();
    let ws = w.shape();
    let (ci, h, wd, d) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[0], ws[2]);
    let (ho, wo, do_) = (out_shape[1], out_shape[2], out_shape[3]);
    let xv = x.data();
    let wv = w.data();

    let mut dx = if need_dx {
        Some(vec![T::zero(); xv.len()])
    } else {
        None
    };
    let mut dw = if need_dw {
        Some(vec![T::zero(); wv.len()])
    } else {
        None
    };
    let mut db = if need_db {
        Some(vec![T::zero(); co])
    } else {
        None
    };

    for oc in 0..co {
        for oi in 0..ho {
            let i0 = oi * stride;
            let (ai_lo, ai_hi) = kernel_range(i0, pad, k, h);
            for oj in 0..wo {
                let j0 = oj * stride;
                let (aj_lo, aj_hi) = kernel_range(j0, pad, k, wd);
                for ol in 0..do_ {
                    let l0 = ol * stride;
                    let (al_lo, al_hi) = kernel_range(l0, pad, k, d);
                    let go = g[((oc * ho + oi) * wo + oj) * do_ + ol];
                    if go == T::zero() {
                        continue;
                    }
                    if let Some(db) = db.as_mut() {
                        db[oc] = db[oc] + go;
                    }
                    for ic in 0..ci {
                        let xbase = ic * h * wd * d;
                        let wbase = (oc * ci + ic) * k * k * k;
                        for ki in ai_lo..ai_hi {
                            let xi = i0 + ki - pad;
                            for kj in aj_lo..aj_hi {
                                let xj = j0 + kj - pad;
                                let xrow = xbase + (xi * wd + xj) * d;
                                let wrow = wbase + (ki * k + kj) * k;
                                for kl in al_lo..al_hi {
                                    let xidx = xrow + (l0 + kl - pad);
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xidx] = dx[xidx] + go * wv[wrow + kl];
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        dw[wrow + kl] = dw[wrow + kl] + go * xv[xidx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn conv_transpose3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, DiffError> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || xs[0] != ws[0] {
        return Err(DiffError::ShapeMismatch {
            op: "conv_transpose3d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if stride == 0 {
        return Err(DiffError::InvalidShape {
            op: "conv_transpose3d",
            shape: xs.to_vec(),
            message: "stride must be positive".into(),
        });
    }
    let (ci, h, wd, d) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[1], ws[2]);
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(DiffError::ShapeMismatch {
                op: "conv_transpose3d",
                lhs: ws.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let ext = |n: usize| ((n - 1) * stride + k).checked_sub(2 * pad);
    let (ho, wo, do_) = match (ext(h), ext(wd), ext(d)) {
        (Some(a), Some(b), Some(c)) if a > 0 && b > 0 && c > 0 => (a, b, c),
        _ => {
            return Err(DiffError::InvalidShape {
                op: "conv_transpose3d",
                shape: xs.to_vec(),
                message: format!("kernel {k}, stride {stride}, pad {pad} yields empty output"),
            })
        }
    };

    let xv = x.data();
    let wv = w.data();
    let mut out = vec![T::zero(); co * ho * wo * do_];
    if let Some(b) = bias {
        let bv = b.data();
        for oc in 0..co {
            let span = ho * wo * do_;
            for s in 0..span {
                out[oc * span + s] = bv[oc];
            }
        }
    }
    for ic in 0..ci {
        for i in 0..h {
            for j in 0..wd {
                for l in 0..d {
                    let xval = xv[((ic * h + i) * wd + j) * d + l];
                    if xval == T::zero() {
                        continue;
                    }
                    for oc in 0..co {
                        let wbase = (ic * co + oc) * k * k * k;
                        for ki in 0..k {
                            let oi = (i * stride + ki) as isize - pad as isize;
                            if oi < 0 || oi as usize >= ho {
                                continue;
                            }
                            for kj in 0..k {
                                let oj = (j * stride + kj) as isize - pad as isize;
                                if oj < 0 || oj as usize >= wo {
                                    continue;
                                }
                                for kl in 0..k {
                                    let ol = (l * stride + kl) as isize - pad as isize;
                                    if ol < 0 || ol as usize >= do_ {
                                        continue;
                                    }
                                    let oidx = ((oc * ho + oi as usize) * wo + oj as usize) * do_
                                        + ol as usize;
                                    out[oidx] =
                                        out[oidx] + wv[wbase + (ki * k + kj) * k + kl] * xval;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, ho, wo, do_], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
    out_shape: &[usize],
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let xs = x.shape();
    let ws = w.shape();
    let (ci, h, wd, d) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[1], ws[2]);
    let (ho, wo, do_) = (out_shape[1], out_shape[2], out_shape[3]);
    let xv = x.data();
    let wv = w.data();

    let mut dx = if need_dx {
        Some(vec![T::zero(); xv.len()])
    } else {
        None
    };
    let mut dw = if need_dw {
        Some(vec![T::zero(); wv.len()])
    } else {
        None
    };
    let db = if need_db {
        let span = ho * wo * do_;
        let mut db = vec![T::zero(); co];
        for (oc, dbv) in db.iter_mut().enumerate() {
            for s in 0..span {
                *dbv = *dbv + g[oc * span + s];
            }
        }
        Some(db)
    } else {
        None
    };

    for ic in 0..ci {
        for i in 0..h {
            for j in 0..wd {
                for l in 0..d {
                    let xidx = ((ic * h + i) * wd + j) * d + l;
                    let xval = xv[xidx];
                    for oc in 0..co {
                        let wbase = (ic * co + oc) * k * k * k;
                        for ki in 0..k {
                            let oi = (i * stride + ki) as isize - pad as isize;
                            if oi < 0 || oi as usize >= ho {
                                continue;
                            }
                            for kj in 0..k {
                                let oj = (j * stride + kj) as isize - pad as isize;
                                if oj < 0 || oj as usize >= wo {
                                    continue;
                                }
                                for kl in 0..k {
                                    let ol = (l * stride + kl) as isize - pad as isize;
                                    if ol < 0 || ol as usize >= do_ {
                                        continue;
                                    }
                                    let go = g[((oc * ho + oi as usize) * wo + oj as usize) * do_
                                        + ol as usize];
                                    let widx = wbase + (ki * k + kj) * k + kl;
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xidx] = dx[xidx] + go * wv[widx];
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        dw[widx] = dw[widx] + go * xval;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_is_identity_map() {
        // Single 1 at the kernel center, stride 1, same padding.
        let x = Tensor::<f64>::new(
            vec![1, 3, 3, 3],
            (0..27).map(|v| v as f64 * 0.5 - 3.0).collect(),
        )
        .unwrap();
        let mut wdata = vec![0.0; 27];
        wdata[13] = 1.0; // center of a 3x3x3 kernel
        let w = Tensor::<f64>::new(vec![1, 1, 3, 3, 3], wdata).unwrap();
        let y = conv3d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_then_stride_two_halves_extent() {
        let x = Tensor::<f64>::new(vec![2, 4, 4, 4], vec![1.0; 128]).unwrap();
        let w = Tensor::<f64>::new(vec![3, 2, 2, 2, 2], vec![0.25; 48]).unwrap();
        let y = conv3d_forward(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2, 2]);
        // Every output voxel sees 2 channels * 8 taps of 1.0 * 0.25.
        assert!(y.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn transpose_conv_doubles_extent() {
        let x = Tensor::<f64>::new(vec![1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let w = Tensor::<f64>::new(vec![1, 2, 2, 2, 2], vec![0.5; 16]).unwrap();
        let y = conv_transpose3d_forward(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
        // Non-overlapping stride-2 kernel-2: each output voxel is one tap.
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn degenerate_conv_errors() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let w = Tensor::<f64>::new(vec![1, 1, 3, 3, 3], vec![0.0; 27]).unwrap();
        assert!(conv3d_forward(&x, &w, None, 1, 0).is_err());
    }
}
