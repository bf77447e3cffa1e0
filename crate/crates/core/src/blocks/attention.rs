use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::Ctx;
use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::store::{ParamBuilder, ParamId};
use crate::tape::Var;
use crate::tensor::Scalar;

/// Window side length (in tokens) and head count of one attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnSpec {
    pub window: usize,
    pub heads: usize,
}

impl AttnSpec {
    pub const fn new(window: usize, heads: usize) -> Self {
        Self { window, heads }
    }
}

/// Fraction `num/den` of a block's channels routed to the local branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatio {
    num: usize,
    den: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl SplitRatio {
    pub fn new(num: usize, den: usize) -> Result<Self> {
        if den == 0 || num > den {
            return Err(Error::Config(format!("split ratio {num}/{den} outside [0, 1]")));
        }
        let g = gcd(num, den).max(1);
        Ok(Self { num: num / g, den: den / g })
    }

    /// `local / (local + global)` heads; `1` when there is no global branch.
    pub fn from_heads(local: usize, global: Option<usize>) -> Result<Self> {
        match global {
            None => Self::new(1, 1),
            Some(g) => Self::new(local, local + g),
        }
    }

    pub fn num(self) -> usize {
        self.num
    }

    pub fn den(self) -> usize {
        self.den
    }

    pub fn is_one(self) -> bool {
        self.num == self.den
    }

    pub fn local_channels(self, c: usize) -> Result<usize> {
        if !(c * self.num).is_multiple_of(self.den) {
            return Err(Error::Config(format!("split ratio {self} of {c} channels is not an integer")));
        }
        Ok(c * self.num / self.den)
    }
}

impl std::fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn check_heads(name: &str, c: usize, heads: usize) -> Result<()> {
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!("{name}: {c} channels not divisible by {heads} heads")));
    }
    Ok(())
}

/// Multi-head attention inside each window of a `(1, windows, tokens, 3c)` qkv tensor.
fn windowed_mhsa<T: Scalar>(cx: &mut Ctx<'_, T>, qkv: Var, heads: usize) -> Result<Var> {
    let c3 = cx.tape.value(qkv).nchw()[3];
    let d = c3 / 3 / heads;
    let q = cx.tape.take_heads(qkv, 3, 0, heads)?;
    let k = cx.tape.take_heads(qkv, 3, 1, heads)?;
    let v = cx.tape.take_heads(qkv, 3, 2, heads)?;
    let q = cx.tape.scale(q, T::one() / T::from_usize(d).unwrap().sqrt());
    let kt = cx.tape.transpose_last2(k)?;
    let scores = cx.tape.matmul(q, kt)?;
    let attn = cx.tape.softmax(scores)?;
    let out = cx.tape.matmul(attn, v)?;
    cx.tape.merge_heads(out, heads)
}

/// Self-attention within non-overlapping `window × window` tiles.
#[derive(Clone, Debug)]
pub struct LocalWindowAttention {
    pub qkv: Conv2d,
    pub window: usize,
    pub heads: usize,
}

impl LocalWindowAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, spec: AttnSpec) -> Result<Self> {
        check_heads(name, c, spec.heads)?;
        if spec.window == 0 {
            return Err(Error::Config(format!("{name}: window must be positive")));
        }
        let mut pb = pb.scope(name);
        let qkv = Conv2d::new(&mut pb, "qkv", c, 3 * c, 1, ConvParams::default(), false)?;
        Ok(Self { qkv, window: spec.window, heads: spec.heads })
    }

    pub fn channels(&self) -> usize {
        self.qkv.in_channels
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let [n, _, h, w] = cx.tape.value(x).nchw();
        let win = self.window;
        let (hp, wp) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
        let padded = (hp, wp) != (h, w);
        let xp = if padded { cx.tape.pad_or_crop(x, hp, wp)? } else { x };
        let qkv = self.qkv.forward(cx, xp)?;
        let tokens = cx.tape.window_partition(qkv, win)?;
        let y = windowed_mhsa(cx, tokens, self.heads)?;
        let y = cx.tape.window_reverse(y, win, n, hp, wp)?;
        if padded {
            cx.tape.pad_or_crop(y, h, w)
        } else {
            Ok(y)
        }
    }
}

/// Self-attention over a fixed `g × g` grid of max-pooled tokens, resized back.
#[derive(Clone, Debug)]
pub struct GlobalPooledAttention {
    pub qkv: Conv2d,
    pub grid: usize,
    pub heads: usize,
}

impl GlobalPooledAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, spec: AttnSpec) -> Result<Self> {
        check_heads(name, c, spec.heads)?;
        if spec.window == 0 {
            return Err(Error::Config(format!("{name}: window must be positive")));
        }
        let mut pb = pb.scope(name);
        let qkv = Conv2d::new(&mut pb, "qkv", c, 3 * c, 1, ConvParams::default(), false)?;
        Ok(Self { qkv, grid: spec.window, heads: spec.heads })
    }

    pub fn channels(&self) -> usize {
        self.qkv.in_channels
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let [n, _, h, w] = cx.tape.value(x).nchw();
        let g = self.grid;
        let p = cx.tape.adaptive_max_pool2d(x, g, g)?;
        let qkv = self.qkv.forward(cx, p)?;
        let tokens = cx.tape.window_partition(qkv, g)?;
        let y = windowed_mhsa(cx, tokens, self.heads)?;
        let y = cx.tape.window_reverse(y, g, n, g, g)?;
        cx.tape.bilinear_resize(y, h, w)
    }
}

/// Channel-split parallel local and global attention.
#[derive(Clone, Debug)]
pub struct PlgAttention {
    pub local: LocalWindowAttention,
    pub global: Option<GlobalPooledAttention>,
    pub ratio: SplitRatio,
    pub proj: Option<Conv2d>,
}

impl PlgAttention {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c: usize,
        lsa: AttnSpec,
        gsa: Option<AttnSpec>,
        out_proj: bool,
    ) -> Result<Self> {
        let ratio = SplitRatio::from_heads(lsa.heads, gsa.map(|g| g.heads))?;
        let cl = ratio.local_channels(c)?;
        let mut pb = pb.scope(name);
        let local = LocalWindowAttention::new(&mut pb, "local", cl, lsa)?;
        let global = match gsa {
            Some(spec) => Some(GlobalPooledAttention::new(&mut pb, "global", c - cl, spec)?),
            None => None,
        };
        let proj = if out_proj { Some(Conv2d::pointwise(&mut pb, "proj", c, c)?) } else { None };
        Ok(Self { local, global, ratio, proj })
    }

    pub fn channels(&self) -> usize {
        self.local.channels() + self.global.as_ref().map_or(0, |g| g.channels())
    }

    /// Channels per head; identical in both branches.
    pub fn head_dim(&self) -> usize {
        self.local.channels() / self.local.heads
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = cx.tape.value(x).nchw()[1];
        if c != self.channels() {
            return Err(Error::shape("lw_plg_sa", "channels", self.channels(), c));
        }
        let y = match &self.global {
            None => self.local.forward(cx, x)?,
            Some(global) => {
                let (xl, xg) = cx.tape.split_channels(x, self.local.channels())?;
                let yl = self.local.forward(cx, xl)?;
                let yg = global.forward(cx, xg)?;
                cx.tape.concat_channels(yl, yg)?
            }
        };
        match &self.proj {
            Some(p) => p.forward(cx, y),
            None => Ok(y),
        }
    }

    /// The last projections on every path; zeroing them silences the block.
    pub fn output_params(&self) -> Vec<ParamId> {
        match &self.proj {
            Some(p) => std::iter::once(p.weight).chain(p.bias).collect(),
            None => std::iter::once(self.local.qkv.weight).chain(self.global.as_ref().map(|g| g.qkv.weight)).collect(),
        }
    }
}
