use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Grn};
use super::Ctx;
use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::store::{ParamBuilder, ParamId};
use crate::tape::Var;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    /// Expansion, depthwise 3×3, GRN, concat with the expansion, restore.
    Plus,
    /// Expansion, depthwise 3×3, restore.
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfnSpec {
    pub kind: FfnKind,
    pub alpha: usize,
}

impl Default for FfnSpec {
    fn default() -> Self {
        Self { kind: FfnKind::Plus, alpha: 3 }
    }
}

impl FfnSpec {
    pub const BASELINE: FfnSpec = FfnSpec { kind: FfnKind::Baseline, alpha: 4 };
}

#[derive(Clone, Debug)]
pub struct CcfFfnPlus {
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub grn: Grn,
    pub restore: Conv2d,
}

impl CcfFfnPlus {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, alpha: usize) -> Result<Self> {
        let hidden = c * alpha;
        if hidden == 0 {
            return Err(Error::Config(format!("{name}: empty hidden width")));
        }
        let mut pb = pb.scope(name);
        Ok(Self {
            expand: Conv2d::pointwise(&mut pb, "expand", c, hidden)?,
            dw: Conv2d::depthwise(&mut pb, "dw", hidden)?,
            grn: Grn::new(&mut pb, "grn", hidden)?,
            restore: Conv2d::pointwise(&mut pb, "restore", 2 * hidden, c)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let e = self.expand.forward(cx, x)?;
        let e = cx.tape.act(e, Activation::Gelu);
        let d = self.dw.forward(cx, e)?;
        let d = self.grn.forward(cx, d)?;
        let cat = cx.tape.concat_channels(e, d)?;
        self.restore.forward(cx, cat)
    }
}

#[derive(Clone, Debug)]
pub struct CcfFfn {
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub fc: Conv2d,
}

impl CcfFfn {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, alpha: usize) -> Result<Self> {
        let hidden = c * alpha;
        if hidden == 0 {
            return Err(Error::Config(format!("{name}: empty hidden width")));
        }
        let mut pb = pb.scope(name);
        Ok(Self {
            expand: Conv2d::pointwise(&mut pb, "expand", c, hidden)?,
            dw: Conv2d::depthwise(&mut pb, "dw", hidden)?,
            fc: Conv2d::pointwise(&mut pb, "fc", hidden, c)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let e = self.expand.forward(cx, x)?;
        let e = cx.tape.act(e, Activation::Gelu);
        let d = self.dw.forward(cx, e)?;
        self.fc.forward(cx, d)
    }
}

#[derive(Clone, Debug)]
pub enum Ffn {
    Plus(CcfFfnPlus),
    Baseline(CcfFfn),
}

impl Ffn {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize, spec: FfnSpec) -> Result<Self> {
        Ok(match spec.kind {
            FfnKind::Plus => Ffn::Plus(CcfFfnPlus::new(pb, name, c, spec.alpha)?),
            FfnKind::Baseline => Ffn::Baseline(CcfFfn::new(pb, name, c, spec.alpha)?),
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Ffn::Plus(f) => f.forward(cx, x),
            Ffn::Baseline(f) => f.forward(cx, x),
        }
    }

    /// The last projection; zeroing it silences the block.
    pub fn output_params(&self) -> Vec<ParamId> {
        let last = match self {
            Ffn::Plus(f) => &f.restore,
            Ffn::Baseline(f) => &f.fc,
        };
        std::iter::once(last.weight).chain(last.bias).collect()
    }
}
