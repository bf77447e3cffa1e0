//! Deterministic forward and backward kernels.
//!
//! Every function here is a pure function of its inputs and runs
//! single-threaded with a fixed loop order, so results are bit-reproducible.
//! The tape in [`crate::tape`] records these kernels and calls the matching
//! `*_backward` functions during reverse traversal.

use crate::error::{Error, Result};
use crate::tensor::{nchw_of, Scalar, Tensor};

/// Index into the source buffer, or [`ZERO_FILL`] for a zero output element.
pub type GatherIndex = u32;
pub const ZERO_FILL: GatherIndex = GatherIndex::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    s: usize,
    p: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, p: ConvParams) -> Result<Self> {
        const OP: &str = "conv2d";
        if p.stride == 0 {
            return Err(Error::invalid(OP, "stride must be >= 1"));
        }
        if p.groups == 0 {
            return Err(Error::invalid(OP, "groups must be >= 1"));
        }
        if weight.rank() != 4 {
            return Err(Error::shape(OP, "weight rank", 4, weight.rank()));
        }
        let [n, cin, h, w] = x.nchw();
        let [cout, cin_g, kh, kw] = weight.nchw();
        if cin % p.groups != 0 {
            return Err(Error::shape(OP, "input channels (multiple of groups)", cin.div_ceil(p.groups) * p.groups, cin));
        }
        if cout % p.groups != 0 {
            return Err(Error::shape(OP, "output channels (multiple of groups)", cout.div_ceil(p.groups) * p.groups, cout));
        }
        if cin_g != cin / p.groups {
            return Err(Error::shape(OP, "weight input channels", cin / p.groups, cin_g));
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(Error::shape(OP, "bias length", cout, b.numel()));
            }
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid(OP, "empty kernel"));
        }
        if kh > h + 2 * p.padding {
            return Err(Error::shape(OP, "kernel height (<= padded input height)", h + 2 * p.padding, kh));
        }
        if kw > w + 2 * p.padding {
            return Err(Error::shape(OP, "kernel width (<= padded input width)", w + 2 * p.padding, kw));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / p.groups,
            kh,
            kw,
            oh: p.out_size(h, kh),
            ow: p.out_size(w, kw),
            s: p.stride,
            p: p.padding,
        })
    }

    /// Output columns whose source column `ox*s + k - p` lies inside the input.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.s as i64, self.p as i64);
        let k = k as i64;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi = (extent as i64 - 1 + p - k).div_euclid(s) + 1;
        let hi = hi.clamp(0, out as i64);
        (lo.min(hi) as usize, hi as usize)
    }

    fn macs(&self) -> u64 {
        (self.n * self.oh * self.ow * self.kh * self.kw * self.cin_g * self.cout) as u64
    }
}

pub fn conv2d_macs<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, p: ConvParams) -> Result<u64> {
    Ok(ConvGeom::new(x, weight, None, p)?.macs())
}

/// 2-D cross-correlation over NCHW input with `(c_out, c_in/groups, kh, kw)` weights.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, p: ConvParams) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, weight, bias, p)?;
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let xd = x.data();
    let wd = weight.data();
    let xcols: Vec<(usize, usize)> = (0..g.kw).map(|kx| g.valid_range(kx, g.w, g.ow)).collect();
    let yrows: Vec<(usize, usize)> = (0..g.kh).map(|ky| g.valid_range(ky, g.h, g.oh)).collect();
    for b in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let o = &mut out[(b * g.cout + oc) * plane..][..plane];
            if let Some(bias) = bias {
                o.fill(bias.data()[oc]);
            }
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let xi = &xd[(b * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = yrows[ky];
                    for kx in 0..g.kw {
                        let wv = wd[((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = xcols[kx];
                        for oy in oy0..oy1 {
                            let iy = oy * g.s + ky - g.p;
                            let orow = &mut o[oy * g.ow..][..g.ow];
                            let irow = &xi[iy * g.w..][..g.w];
                            if g.s == 1 {
                                let shift = kx as isize - g.p as isize;
                                for ox in ox0..ox1 {
                                    orow[ox] = orow[ox] + wv * irow[(ox as isize + shift) as usize];
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] = orow[ox] + wv * irow[ox * g.s + kx - g.p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    p: ConvParams,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x, weight, None, p)?;
    let plane = g.oh * g.ow;
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); xd.len()];
    let mut gw = vec![T::zero(); wd.len()];
    let mut gb = vec![T::zero(); if has_bias { g.cout } else { 0 }];
    let xcols: Vec<(usize, usize)> = (0..g.kw).map(|kx| g.valid_range(kx, g.w, g.ow)).collect();
    let yrows: Vec<(usize, usize)> = (0..g.kh).map(|ky| g.valid_range(ky, g.h, g.oh)).collect();
    for b in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let go = &gd[(b * g.cout + oc) * plane..][..plane];
            if has_bias {
                gb[oc] = gb[oc] + go.iter().copied().sum::<T>();
            }
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let base = (b * g.cin + ic) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy0, oy1) = yrows[ky];
                    for kx in 0..g.kw {
                        let widx = ((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx;
                        let wv = wd[widx];
                        let (ox0, ox1) = xcols[kx];
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * g.s + ky - g.p;
                            let grow = &go[oy * g.ow..][..g.ow];
                            let row = base + iy * g.w;
                            for ox in ox0..ox1 {
                                let ix = row + ox * g.s + kx - g.p;
                                acc = acc + grow[ox] * xd[ix];
                                gx[ix] = gx[ix] + wv * grow[ox];
                            }
                        }
                        gw[widx] = gw[widx] + acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(x.dims(), gx)?,
        weight: Tensor::new(weight.dims(), gw)?,
        bias: if has_bias { Some(Tensor::new(&[g.cout], gb)?) } else { None },
    })
}

/// Saved state of a channel layer norm, needed by the backward pass.
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes the channel vector at every `(n, y, x)` site.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    layer_norm_with_cache(x, gamma, beta, eps).map(|(o, _)| o)
}

pub fn layer_norm_with_cache<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    const OP: &str = "layer_norm";
    let [n, c, h, w] = x.nchw();
    if c == 0 {
        return Err(Error::invalid(OP, "zero channels"));
    }
    if gamma.numel() != c {
        return Err(Error::shape(OP, "gamma length", c, gamma.numel()));
    }
    if beta.numel() != c {
        return Err(Error::shape(OP, "beta length", c, beta.numel()));
    }
    if eps.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid(OP, "eps must be positive"));
    }
    let hw = h * w;
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let cf = T::from_usize(c).unwrap();
    let mut out = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); n * hw];
    for b in 0..n {
        let base = b * c * hw;
        for site in 0..hw {
            let mut mean = T::zero();
            for ch in 0..c {
                mean = mean + xd[base + ch * hw + site];
            }
            mean = mean / cf;
            let mut var = T::zero();
            for ch in 0..c {
                let d = xd[base + ch * hw + site] - mean;
                var = var + d * d;
            }
            var = var / cf;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[b * hw + site] = istd;
            for ch in 0..c {
                let i = base + ch * hw + site;
                let xh = (xd[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = gd[ch] * xh + bd[ch];
            }
        }
    }
    Ok((Tensor::new(x.dims(), out)?, LayerNormCache { xhat, inv_std }))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward<T: Scalar>(
    dims: &[usize],
    gamma: &Tensor<T>,
    cache: &LayerNormCache<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = grad_out.nchw();
    let hw = h * w;
    let gd = grad_out.data();
    let gam = gamma.data();
    let cf = T::from_usize(c).unwrap();
    let mut gx = vec![T::zero(); gd.len()];
    let mut ggam = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for b in 0..n {
        let base = b * c * hw;
        for site in 0..hw {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for ch in 0..c {
                let i = base + ch * hw + site;
                let gg = gd[i] * gam[ch];
                mean_g = mean_g + gg;
                mean_gx = mean_gx + gg * cache.xhat[i];
                ggam[ch] = ggam[ch] + gd[i] * cache.xhat[i];
                gbeta[ch] = gbeta[ch] + gd[i];
            }
            mean_g = mean_g / cf;
            mean_gx = mean_gx / cf;
            let istd = cache.inv_std[b * hw + site];
            for ch in 0..c {
                let i = base + ch * hw + site;
                gx[i] = istd * (gd[i] * gam[ch] - mean_g - cache.xhat[i] * mean_gx);
            }
        }
    }
    (
        Tensor::new(dims, gx).expect("grad shape"),
        Tensor::new(&[c], ggam).expect("grad shape"),
        Tensor::new(&[c], gbeta).expect("grad shape"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Gelu,
    Sigmoid,
    Identity,
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Silu => v * sigmoid(v),
            Activation::Gelu => T::lit(0.5) * v * (T::one() + (v * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf()),
            Activation::Sigmoid => sigmoid(v),
            Activation::Identity => v,
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(v);
                s * (T::one() + v * (T::one() - s))
            }
            Activation::Gelu => {
                let cdf = T::lit(0.5) * (T::one() + (v * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(v * v) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                cdf + v * pdf
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (T::one() - s)
            }
            Activation::Identity => T::one(),
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Row-wise softmax over the last dimension.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = *x.dims().last().ok_or_else(|| Error::invalid("softmax", "scalar input"))?;
    if cols == 0 {
        return Err(Error::invalid("softmax", "zero columns"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Tensor::new(x.dims(), out)
}

pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let cols = *y.dims().last().unwrap();
    let mut gx = vec![T::zero(); y.numel()];
    for ((yr, gr), xr) in y.data().chunks(cols).zip(grad_out.data().chunks(cols)).zip(gx.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in xr.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.dims(), gx).unwrap()
}

/// Bin `[start, end)` of output cell `i` when `len` inputs map to `out` outputs.
#[inline]
pub fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

fn check_pool_out(op: &'static str, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(op, "output size must be >= 1"));
    }
    Ok(())
}

/// Adaptive max pooling. Also returns, for each output element, the flat
/// input index of the first maximal element in bin scan order.
pub fn adaptive_max_pool2d_with_argmax<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    check_pool_out("adaptive_max_pool2d", out_h, out_w)?;
    let [n, c, h, w] = x.nchw();
    if h == 0 || w == 0 {
        return Err(Error::invalid("adaptive_max_pool2d", "empty spatial input"));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut arg = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..out_h {
            let (y0, y1) = adaptive_bin(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1) = adaptive_bin(j, w, out_w);
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let idx = base + y * w + xx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[n, c, out_h, out_w], out)?, arg))
}

pub fn adaptive_max_pool2d<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    adaptive_max_pool2d_with_argmax(x, out_h, out_w).map(|(t, _)| t)
}

pub fn adaptive_avg_pool2d<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check_pool_out("adaptive_avg_pool2d", out_h, out_w)?;
    let [n, c, h, w] = x.nchw();
    if h == 0 || w == 0 {
        return Err(Error::invalid("adaptive_avg_pool2d", "empty spatial input"));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..out_h {
            let (y0, y1) = adaptive_bin(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1) = adaptive_bin(j, w, out_w);
                let mut s = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s = s + xd[base + y * w + xx];
                    }
                }
                out.push(s / T::from_usize((y1 - y0) * (x1 - x0)).unwrap());
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub fn adaptive_avg_pool2d_backward<T: Scalar>(in_dims: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_dims);
    let [n, c, h, w] = gx.nchw();
    let [_, _, out_h, out_w] = grad_out.nchw();
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..out_h {
            let (y0, y1) = adaptive_bin(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1) = adaptive_bin(j, w, out_w);
                let share = gd[(plane * out_h + i) * out_w + j] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        gxd[base + y * w + xx] = gxd[base + y * w + xx] + share;
                    }
                }
            }
        }
    }
    gx
}

#[derive(Clone, Copy, Debug)]
struct Lerp<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn lerp_axis<T: Scalar>(input: usize, output: usize) -> Vec<Lerp<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Lerp { lo, hi, frac: T::lit(src - lo as f64) }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check_pool_out("bilinear_resize", out_h, out_w)?;
    let [n, c, h, w] = x.nchw();
    if h == 0 || w == 0 {
        return Err(Error::invalid("bilinear_resize", "empty spatial input"));
    }
    let ys = lerp_axis::<T>(h, out_h);
    let xs = lerp_axis::<T>(w, out_w);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &xd[plane * h * w..][..h * w];
        for ly in &ys {
            for lx in &xs {
                let top = p[ly.lo * w + lx.lo] * (T::one() - lx.frac) + p[ly.lo * w + lx.hi] * lx.frac;
                let bot = p[ly.hi * w + lx.lo] * (T::one() - lx.frac) + p[ly.hi * w + lx.hi] * lx.frac;
                out.push(top * (T::one() - ly.frac) + bot * ly.frac);
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub fn bilinear_resize_backward<T: Scalar>(in_dims: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_dims);
    let [n, c, h, w] = gx.nchw();
    let [_, _, out_h, out_w] = grad_out.nchw();
    let ys = lerp_axis::<T>(h, out_h);
    let xs = lerp_axis::<T>(w, out_w);
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for plane in 0..n * c {
        let p = &mut gxd[plane * h * w..][..h * w];
        let g = &gd[plane * out_h * out_w..][..out_h * out_w];
        for (i, ly) in ys.iter().enumerate() {
            for (j, lx) in xs.iter().enumerate() {
                let v = g[i * out_w + j];
                let top = v * (T::one() - ly.frac);
                let bot = v * ly.frac;
                p[ly.lo * w + lx.lo] = p[ly.lo * w + lx.lo] + top * (T::one() - lx.frac);
                p[ly.lo * w + lx.hi] = p[ly.lo * w + lx.hi] + top * lx.frac;
                p[ly.hi * w + lx.lo] = p[ly.hi * w + lx.lo] + bot * (T::one() - lx.frac);
                p[ly.hi * w + lx.hi] = p[ly.hi * w + lx.hi] + bot * lx.frac;
            }
        }
    }
    gx
}

struct MatGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn mat_geom<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<MatGeom> {
    const OP: &str = "matmul";
    if a.rank() < 2 {
        return Err(Error::shape(OP, "lhs rank (>= 2)", 2, a.rank()));
    }
    if b.rank() != a.rank() {
        return Err(Error::shape(OP, "rhs rank", a.rank(), b.rank()));
    }
    let r = a.rank();
    let (ad, bd) = (a.dims(), b.dims());
    for i in 0..r - 2 {
        if ad[i] != bd[i] {
            return Err(Error::shape(OP, "batch dimension", ad[i], bd[i]));
        }
    }
    if ad[r - 1] != bd[r - 2] {
        return Err(Error::shape(OP, "inner dimension", ad[r - 1], bd[r - 2]));
    }
    Ok(MatGeom { batch: ad[..r - 2].iter().product(), m: ad[r - 2], k: ad[r - 1], n: bd[r - 1] })
}

pub fn matmul_macs<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<u64> {
    let g = mat_geom(a, b)?;
    Ok((g.batch * g.m * g.k * g.n) as u64)
}

// out[m,n] += a[m,k] * b[k,n]
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

// out[m,k] += g[m,n] * b[k,n]^T
fn gemm_nt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..][..n];
        for kk in 0..k {
            let brow = &b[kk * n..][..n];
            let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * k + kk] = out[i * k + kk] + dot;
        }
    }
}

// out[k,n] += a[m,k]^T * g[m,n]
fn gemm_tn<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..][..n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let orow = &mut out[kk * n..][..n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

/// Matrix product over the last two dimensions, batched over the leading ones.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let g = mat_geom(a, b)?;
    let mut out = vec![T::zero(); g.batch * g.m * g.n];
    for bi in 0..g.batch {
        gemm_nn(
            &a.data()[bi * g.m * g.k..][..g.m * g.k],
            &b.data()[bi * g.k * g.n..][..g.k * g.n],
            &mut out[bi * g.m * g.n..][..g.m * g.n],
            g.m,
            g.k,
            g.n,
        );
    }
    let mut dims = a.dims().to_vec();
    *dims.last_mut().unwrap() = g.n;
    Tensor::new(&dims, out)
}

pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = mat_geom(a, b)?;
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for bi in 0..g.batch {
        let gs = &grad_out.data()[bi * g.m * g.n..][..g.m * g.n];
        let asl = &a.data()[bi * g.m * g.k..][..g.m * g.k];
        let bsl = &b.data()[bi * g.k * g.n..][..g.k * g.n];
        gemm_nt(gs, bsl, &mut ga[bi * g.m * g.k..][..g.m * g.k], g.m, g.k, g.n);
        gemm_tn(asl, gs, &mut gb[bi * g.k * g.n..][..g.k * g.n], g.m, g.k, g.n);
    }
    Ok((Tensor::new(a.dims(), ga)?, Tensor::new(b.dims(), gb)?))
}

/// Fully connected layer: `x (n, in)`, `weight (out, in)`, `bias (out)` → `(n, out)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    if x.rank() != 2 || weight.rank() != 2 {
        return Err(Error::shape(OP, "rank", 2, if x.rank() != 2 { x.rank() } else { weight.rank() }));
    }
    let (n, fin) = (x.dims()[0], x.dims()[1]);
    let (fout, win) = (weight.dims()[0], weight.dims()[1]);
    if win != fin {
        return Err(Error::shape(OP, "input features", fin, win));
    }
    if let Some(b) = bias {
        if b.numel() != fout {
            return Err(Error::shape(OP, "bias length", fout, b.numel()));
        }
    }
    let mut out = vec![T::zero(); n * fout];
    gemm_nt(x.data(), weight.data(), &mut out, n, fout, fin);
    if let Some(b) = bias {
        for row in out.chunks_mut(fout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
    }
    Tensor::new(&[n, fout], out)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, fin) = (x.dims()[0], x.dims()[1]);
    let fout = weight.dims()[0];
    let mut gx = vec![T::zero(); n * fin];
    let mut gw = vec![T::zero(); fout * fin];
    // grad_x = g (n, out) * W (out, in)
    gemm_nn(grad_out.data(), weight.data(), &mut gx, n, fout, fin);
    // grad_W = g^T (out, n) * x (n, in)
    gemm_tn(grad_out.data(), x.data(), &mut gw, n, fout, fin);
    let mut gb = vec![T::zero(); fout];
    for row in grad_out.data().chunks(fout) {
        for (o, &g) in gb.iter_mut().zip(row) {
            *o = *o + g;
        }
    }
    (Tensor::new(x.dims(), gx).unwrap(), Tensor::new(weight.dims(), gw).unwrap(), Tensor::new(&[fout], gb).unwrap())
}

/// Per-sample global response normalization cache.
pub struct GrnCache<T> {
    /// Spatial L2 norm of each `(n, c)` plane.
    pub norms: Vec<T>,
    /// `mean_c(norm) + eps` per sample.
    pub denom: Vec<T>,
}

pub fn grn_with_cache<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<(Tensor<T>, GrnCache<T>)> {
    const OP: &str = "grn";
    let [n, c, h, w] = x.nchw();
    if c == 0 {
        return Err(Error::invalid(OP, "zero channels"));
    }
    if gamma.numel() != c {
        return Err(Error::shape(OP, "gamma length", c, gamma.numel()));
    }
    if beta.numel() != c {
        return Err(Error::shape(OP, "beta length", c, beta.numel()));
    }
    let hw = h * w;
    let xd = x.data();
    let mut norms = Vec::with_capacity(n * c);
    let mut denom = Vec::with_capacity(n);
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        let mut mean = T::zero();
        for ch in 0..c {
            let p = &xd[(b * c + ch) * hw..][..hw];
            let s = p.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(s);
            mean = mean + s;
        }
        let d = mean / T::from_usize(c).unwrap() + eps;
        denom.push(d);
        for ch in 0..c {
            let nrm = norms[b * c + ch] / d;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                out[i] = g * (xd[i] * nrm) + bt + xd[i];
            }
        }
    }
    Ok((Tensor::new(x.dims(), out)?, GrnCache { norms, denom }))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn grn_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &GrnCache<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.nchw();
    let hw = h * w;
    let (xd, gd) = (x.data(), grad_out.data());
    let cf = T::from_usize(c).unwrap();
    let mut gx = vec![T::zero(); xd.len()];
    let mut ggam = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let mut a = vec![T::zero(); c];
    for b in 0..n {
        let d = cache.denom[b];
        let mut weighted = T::zero();
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let nrm = cache.norms[b * c + ch] / d;
            let gm = gamma.data()[ch];
            let mut gx_dot = T::zero();
            let mut gsum = T::zero();
            for i in off..off + hw {
                gx_dot = gx_dot + gd[i] * xd[i];
                gsum = gsum + gd[i];
                gx[i] = gd[i] * (gm * nrm + T::one());
            }
            ggam[ch] = ggam[ch] + gx_dot * nrm;
            gbeta[ch] = gbeta[ch] + gsum;
            a[ch] = gx_dot * gm;
            weighted = weighted + a[ch] * cache.norms[b * c + ch];
        }
        let shared = weighted / (cf * d * d);
        for ch in 0..c {
            let s = cache.norms[b * c + ch];
            if s > T::zero() {
                let ds = a[ch] / d - shared;
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    gx[i] = gx[i] + ds * xd[i] / s;
                }
            }
        }
    }
    (Tensor::new(x.dims(), gx).unwrap(), Tensor::new(&[c], ggam).unwrap(), Tensor::new(&[c], gbeta).unwrap())
}

pub fn grn<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    grn_with_cache(x, gamma, beta, eps).map(|(o, _)| o)
}

/// Copies `x[index[i]]` into output slot `i`; [`ZERO_FILL`] slots become zero.
pub fn gather<T: Scalar>(x: &Tensor<T>, dims: &[usize], index: &[GatherIndex]) -> Result<Tensor<T>> {
    let xd = x.data();
    let data = index.iter().map(|&i| if i == ZERO_FILL { T::zero() } else { xd[i as usize] }).collect();
    Tensor::new(dims, data)
}

pub fn gather_backward<T: Scalar>(in_dims: &[usize], index: &[GatherIndex], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_dims);
    let gxd = gx.data_mut();
    for (&i, &g) in index.iter().zip(grad_out.data()) {
        if i != ZERO_FILL {
            gxd[i as usize] = gxd[i as usize] + g;
        }
    }
    gx
}

/// Index maps for the pure data-movement operations.
pub mod layout {
    use super::{GatherIndex, ZERO_FILL};
    use crate::error::{Error, Result};

    pub struct Plan {
        pub dims: Vec<usize>,
        pub index: Vec<GatherIndex>,
    }

    fn check_len(len: usize) -> Result<()> {
        if len >= ZERO_FILL as usize {
            return Err(Error::invalid("layout", "tensor too large for 32-bit gather index"));
        }
        Ok(())
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn channel_slice(src: [usize; 4], start: usize, len: usize) -> Result<Plan> {
        let [n, c, h, w] = src;
        if start + len > c {
            return Err(Error::shape("split_channels", "channel count", c, start + len));
        }
        check_len(n * c * h * w)?;
        let hw = h * w;
        let mut index = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            index.extend((base..base + len * hw).map(|i| i as GatherIndex));
        }
        Ok(Plan { dims: vec![n, len, h, w], index })
    }

    /// Non-overlapping `win × win` tiles → `(1, n·nWindows, win², c)`, tiles and
    /// tokens in row-major order.
    pub fn window_partition(src: [usize; 4], win: usize) -> Result<Plan> {
        let [n, c, h, w] = src;
        if win == 0 {
            return Err(Error::invalid("window_partition", "window must be >= 1"));
        }
        if h % win != 0 {
            return Err(Error::shape("window_partition", "height (multiple of window)", h.div_ceil(win) * win, h));
        }
        if w % win != 0 {
            return Err(Error::shape("window_partition", "width (multiple of window)", w.div_ceil(win) * win, w));
        }
        check_len(n * c * h * w)?;
        let (nwy, nwx) = (h / win, w / win);
        let mut index = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for wy in 0..nwy {
                for wx in 0..nwx {
                    for ty in 0..win {
                        for tx in 0..win {
                            let (y, x) = (wy * win + ty, wx * win + tx);
                            for ch in 0..c {
                                index.push((((b * c + ch) * h + y) * w + x) as GatherIndex);
                            }
                        }
                    }
                }
            }
        }
        Ok(Plan { dims: vec![1, n * nwy * nwx, win * win, c], index })
    }

    /// Inverse of [`window_partition`] for an `(n, c, h, w)` target.
    pub fn window_reverse(dst: [usize; 4], win: usize) -> Result<Plan> {
        let [n, c, h, w] = dst;
        if win == 0 || h % win != 0 || w % win != 0 {
            return Err(Error::invalid("window_reverse", format!("{h}x{w} not divisible by window {win}")));
        }
        check_len(n * c * h * w)?;
        let (nwy, nwx) = (h / win, w / win);
        let mut index = vec![0; n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let widx = (b * nwy + y / win) * nwx + x / win;
                        let tok = (y % win) * win + x % win;
                        index[((b * c + ch) * h + y) * w + x] = (((widx * win * win) + tok) * c + ch) as GatherIndex;
                    }
                }
            }
        }
        Ok(Plan { dims: vec![n, c, h, w], index })
    }

    /// Zero-pads bottom/right to `(out_h, out_w)`, or crops when smaller.
    pub fn pad_or_crop(src: [usize; 4], out_h: usize, out_w: usize) -> Result<Plan> {
        let [n, c, h, w] = src;
        check_len(n * c * h * w)?;
        let mut index = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            for y in 0..out_h {
                for x in 0..out_w {
                    index.push(if y < h && x < w { ((plane * h + y) * w + x) as GatherIndex } else { ZERO_FILL });
                }
            }
        }
        Ok(Plan { dims: vec![n, c, out_h, out_w], index })
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last2(dims: &[usize]) -> Result<Plan> {
        let r = dims.len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank (>= 2)", 2, r));
        }
        let total: usize = dims.iter().product();
        check_len(total)?;
        let (m, n) = (dims[r - 2], dims[r - 1]);
        let batch = total / (m * n).max(1);
        let mut index = Vec::with_capacity(total);
        for b in 0..batch {
            for j in 0..n {
                for i in 0..m {
                    index.push((b * m * n + i * n + j) as GatherIndex);
                }
            }
        }
        let mut out = dims.to_vec();
        out.swap(r - 2, r - 1);
        Ok(Plan { dims: out, index })
    }

    /// From fused token features `(1, B, T, parts·heads·d)` take part `part`
    /// and move heads into the batch: `(1, B·heads, T, d)`.
    pub fn take_heads(src: [usize; 4], parts: usize, part: usize, heads: usize) -> Result<Plan> {
        let [_, bsz, t, f] = src;
        if parts == 0 || heads == 0 || f % (parts * heads) != 0 || part >= parts {
            return Err(Error::invalid("take_heads", format!("{f} features cannot split into {parts} parts x {heads} heads")));
        }
        check_len(bsz * t * f)?;
        let d = f / (parts * heads);
        let mut index = Vec::with_capacity(bsz * heads * t * d);
        for b in 0..bsz {
            for hd in 0..heads {
                for tok in 0..t {
                    let base = (b * t + tok) * f + part * heads * d + hd * d;
                    index.extend((base..base + d).map(|i| i as GatherIndex));
                }
            }
        }
        Ok(Plan { dims: vec![1, bsz * heads, t, d], index })
    }

    /// Inverse of [`take_heads`] for a single part: `(1, B·heads, T, d)` → `(1, B, T, heads·d)`.
    pub fn merge_heads(src: [usize; 4], heads: usize) -> Result<Plan> {
        let [_, bh, t, d] = src;
        if heads == 0 || bh % heads != 0 {
            return Err(Error::invalid("merge_heads", format!("batch {bh} not divisible by {heads} heads")));
        }
        check_len(bh * t * d)?;
        let bsz = bh / heads;
        let mut index = Vec::with_capacity(bh * t * d);
        for b in 0..bsz {
            for tok in 0..t {
                for hd in 0..heads {
                    let base = ((b * heads + hd) * t + tok) * d;
                    index.extend((base..base + d).map(|i| i as GatherIndex));
                }
            }
        }
        Ok(Plan { dims: vec![1, bsz, t, heads * d], index })
    }
}

pub fn split_channels<T: Scalar>(x: &Tensor<T>, c_a: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let src = x.nchw();
    let a = layout::channel_slice(src, 0, c_a)?;
    let b = layout::channel_slice(src, c_a, src[1] - c_a)?;
    Ok((gather(x, &a.dims, &a.index)?, gather(x, &b.dims, &b.index)?))
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let [n, ca, h, w] = a.nchw();
    let [nb, cb, hb, wb] = b.nchw();
    if nb != n {
        return Err(Error::shape(OP, "batch", n, nb));
    }
    if hb != h {
        return Err(Error::shape(OP, "height", h, hb));
    }
    if wb != w {
        return Err(Error::shape(OP, "width", w, wb));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * ca * hw..][..ca * hw]);
        out.extend_from_slice(&b.data()[s * cb * hw..][..cb * hw]);
    }
    Tensor::new(&[n, ca + cb, h, w], out)
}

pub fn concat_channels_backward<T: Scalar>(a_dims: &[usize], b_dims: &[usize], grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let ca = nchw_of(a_dims)[1];
    let (ga, gb) = split_channels(grad_out, ca).expect("concat grad split");
    (ga.reshape(a_dims).unwrap(), gb.reshape(b_dims).unwrap())
}

pub fn window_partition<T: Scalar>(x: &Tensor<T>, win: usize) -> Result<Tensor<T>> {
    let plan = layout::window_partition(x.nchw(), win)?;
    gather(x, &plan.dims, &plan.index)
}

/// Reassembles `(1, n·nWindows, win², c)` windows into `(n, c, h, w)`.
pub fn window_reverse<T: Scalar>(windows: &Tensor<T>, win: usize, n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = *windows.dims().last().unwrap_or(&0);
    let plan = layout::window_reverse([n, c, h, w], win)?;
    if windows.numel() != n * c * h * w {
        return Err(Error::shape("window_reverse", "element count", n * c * h * w, windows.numel()));
    }
    gather(windows, &plan.dims, &plan.index)
}
