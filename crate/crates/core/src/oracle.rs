//! Brute-force reference implementations.
//!
//! Nothing here calls into [`crate::ops`]; every routine is written as a
//! direct loop over the defining formula so it can check the production
//! kernels independently. They are slow and meant for small tensors.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

fn idx(dims: [usize; 4], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * dims[1] + c) * dims[2] + y) * dims[3] + x
}

/// Row-softmax(q·kᵀ/√dim)·v for `(tokens, dim)` matrices.
pub fn naive_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let (tq, d) = (q.dims()[0], q.dims()[1]);
    let tk = k.dims()[0];
    let dv = v.dims()[1];
    assert_eq!(k.dims()[1], d, "q/k dim");
    assert_eq!(v.dims()[0], tk, "k/v tokens");
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut out = vec![T::zero(); tq * dv];
    for i in 0..tq {
        let mut logits = vec![T::zero(); tk];
        for j in 0..tk {
            let mut s = T::zero();
            for e in 0..d {
                s = s + q.data()[i * d + e] * k.data()[j * d + e];
            }
            logits[j] = s * scale;
        }
        let mut m = logits[0];
        for &l in &logits {
            if l > m {
                m = l;
            }
        }
        let mut z = T::zero();
        for l in logits.iter_mut() {
            *l = (*l - m).exp();
            z = z + *l;
        }
        for j in 0..tk {
            let p = logits[j] / z;
            for e in 0..dv {
                out[i * dv + e] = out[i * dv + e] + p * v.data()[j * dv + e];
            }
        }
    }
    Tensor::new(&[tq, dv], out).unwrap()
}

/// Literal per-bin scan with bins `[floor(i·n/out), ceil((i+1)·n/out))`.
pub fn naive_adaptive_pool<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize, mode: PoolMode) -> Tensor<T> {
    let d = x.nchw();
    let [n, c, h, w] = d;
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let od = out.nchw();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..out_h {
                let y0 = ((i * h) as f64 / out_h as f64).floor() as usize;
                let y1 = (((i + 1) * h) as f64 / out_h as f64).ceil() as usize;
                for j in 0..out_w {
                    let x0 = ((j * w) as f64 / out_w as f64).floor() as usize;
                    let x1 = (((j + 1) * w) as f64 / out_w as f64).ceil() as usize;
                    let mut acc = match mode {
                        PoolMode::Max => T::neg_infinity(),
                        PoolMode::Mean => T::zero(),
                    };
                    let mut count = 0usize;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let v = x.data()[idx(d, b, ch, y, xx)];
                            acc = match mode {
                                PoolMode::Max => {
                                    if v > acc {
                                        v
                                    } else {
                                        acc
                                    }
                                }
                                PoolMode::Mean => acc + v,
                            };
                            count += 1;
                        }
                    }
                    if mode == PoolMode::Mean {
                        acc = acc / T::from_usize(count).unwrap();
                    }
                    out.data_mut()[idx(od, b, ch, i, j)] = acc;
                }
            }
        }
    }
    out
}

/// Bilinear resize evaluated per output site from the half-pixel coordinate formula.
pub fn naive_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let d = x.nchw();
    let [n, c, h, w] = d;
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let od = out.nchw();
    let coord = |dst: usize, inn: usize, outn: usize| -> f64 {
        let s = (dst as f64 + 0.5) * (inn as f64 / outn as f64) - 0.5;
        s.max(0.0).min((inn - 1) as f64)
    };
    for b in 0..n {
        for ch in 0..c {
            for i in 0..out_h {
                let sy = coord(i, h, out_h);
                for j in 0..out_w {
                    let sx = coord(j, w, out_w);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (T::lit(sy - y0 as f64), T::lit(sx - x0 as f64));
                    let v00 = x.data()[idx(d, b, ch, y0, x0)];
                    let v01 = x.data()[idx(d, b, ch, y0, x1)];
                    let v10 = x.data()[idx(d, b, ch, y1, x0)];
                    let v11 = x.data()[idx(d, b, ch, y1, x1)];
                    let one = T::one();
                    let v = v00 * (one - fy) * (one - fx) + v01 * (one - fy) * fx + v10 * fy * (one - fx) + v11 * fy * fx;
                    out.data_mut()[idx(od, b, ch, i, j)] = v;
                }
            }
        }
    }
    out
}

/// Direct nested-loop cross-correlation.
pub fn naive_conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor<T> {
    let d = x.nchw();
    let [n, cin, h, w] = d;
    let [cout, cpg, kh, kw] = weight.nchw();
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let opg = cout / groups;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let od = out.nchw();
    for b in 0..n {
        for oc in 0..cout {
            let g = oc / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(T::zero(), |b| b.data()[oc]);
                    for icg in 0..cpg {
                        let ic = g * cpg + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv = weight.data()[((oc * cpg + icg) * kh + ky) * kw + kx];
                                s = s + wv * x.data()[idx(d, b, ic, iy as usize, ix as usize)];
                            }
                        }
                    }
                    out.data_mut()[idx(od, b, oc, oy, ox)] = s;
                }
            }
        }
    }
    let _ = cin;
    out
}

/// Triple-loop matrix product of `(m, k)` and `(k, n)`.
pub fn naive_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let n = b.dims()[1];
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = T::zero();
            for e in 0..k {
                s = s + a.data()[i * k + e] * b.data()[e * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

/// Direct row softmax: `exp(x_j) / Σ exp(x_k)`, no max shift.
pub fn naive_softmax_row(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / z).collect()
}

/// Central differences `(f(x+eps·e_i) − f(x−eps·e_i)) / 2eps` for every element.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_at(&mut f, x, eps, &coords)
}

/// Central differences at the listed flat coordinates only; other entries are zero.
pub fn finite_diff_at<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, eps: T, coords: &[usize]) -> Tensor<T> {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.dims());
    let two = T::one() + T::one();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (two * eps);
    }
    g
}

/// Central differences of `Σ_k w_k · f(x)_k` at the listed coordinates,
/// with the two outputs subtracted elementwise before weighting so that
/// outputs the coordinate does not reach cancel exactly.
pub fn finite_diff_projected<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Tensor<T>,
    x: &Tensor<T>,
    weights: &Tensor<T>,
    eps: T,
    coords: &[usize],
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.dims());
    let two = T::one() + T::one();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        assert_eq!(fp.dims(), weights.dims(), "projection weights must match the output");
        let mut acc = T::zero();
        for ((&a, &b), &w) in fp.data().iter().zip(fm.data()).zip(weights.data()) {
            acc = acc + w * (a - b);
        }
        g.data_mut()[i] = acc / (two * eps);
    }
    g
}

/// `|a − b| / max(|a|, |b|, 1e-8)`; pairs where both magnitudes are below
/// 1e-8 are compared absolutely and count as zero error when within 1e-8.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        return if (a - b).abs() < 1e-8 { 0.0 } else { f64::INFINITY };
    }
    (a - b).abs() / scale.max(1e-8)
}

/// Largest [`rel_error`] over the listed coordinates (all when `None`).
pub fn max_rel_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>, coords: Option<&[usize]>) -> f64 {
    assert_eq!(analytic.dims(), numeric.dims());
    let pair = |i: usize| rel_error(analytic.data()[i].to_f64().unwrap(), numeric.data()[i].to_f64().unwrap());
    match coords {
        Some(cs) => cs.iter().map(|&i| pair(i)).fold(0.0, f64::max),
        None => (0..analytic.numel()).map(pair).fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn single_token_returns_value() {
        let q = t(&[1, 3], &[0.3, -1.0, 2.0]);
        let k = t(&[1, 3], &[1.0, 1.0, 1.0]);
        let v = t(&[1, 2], &[4.0, -5.0]);
        assert_eq!(naive_attention(&q, &k, &v).data(), &[4.0, -5.0]);
    }

    #[test]
    fn zero_query_averages_values() {
        let q = Tensor::zeros(&[2, 2]);
        let k = t(&[3, 2], &[1.0, 2.0, -3.0, 0.5, 9.0, 9.0]);
        let v = t(&[3, 1], &[3.0, 6.0, 9.0]);
        let o = naive_attention(&q, &k, &v);
        assert!(o.data().iter().all(|&x| (x - 6.0).abs() < 1e-14));
    }

    #[test]
    fn hand_expanded_three_tokens() {
        // dim 2, scale 1/sqrt(2)
        let q = t(&[1, 2], &[1.0, 0.0]);
        let k = t(&[3, 2], &[0.0, 0.0, 2f64.sqrt(), 0.0, 0.0, 1.0]);
        let v = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        // logits (0, 1, 0) -> weights (1, e, 1)/(2+e)
        let e = 1f64.exp();
        let z = 2.0 + e;
        let expect = [(1.0 + 1.0) / z, (e + 1.0) / z];
        let o = naive_attention(&q, &k, &v);
        for (a, b) in o.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_oracle_basic_cases() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        assert_eq!(naive_adaptive_pool(&x, 2, 2, PoolMode::Max).data(), &[5.0, 7.0, 13.0, 15.0]);
        assert!(naive_adaptive_pool(&x, 4, 4, PoolMode::Max).bit_eq(&x));
        let c = Tensor::<f64>::full(&[1, 2, 3, 5], 0.75);
        assert!(naive_adaptive_pool(&c, 2, 2, PoolMode::Mean).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn bilinear_oracle_basic_cases() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 2], |i| i as f64 * 1.5);
        assert!(naive_bilinear(&x, 3, 2).max_abs_diff(&x) < 1e-15);
        let c = Tensor::<f64>::full(&[1, 1, 2, 3], -2.0);
        assert!(naive_bilinear(&c, 5, 4).data().iter().all(|&v| (v + 2.0).abs() < 1e-15));
        // 2x2 (0,1,2,3) -> 4x4: first row blends with weights 1, .75/.25, .25/.75, 1
        let s = t(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let r = naive_bilinear(&s, 4, 4);
        assert_eq!(&r.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-10));
        let h = finite_diff_grad(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &x, 1e-4);
        assert!(h.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(1e-9, 5e-9), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
