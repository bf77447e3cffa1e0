use super::layers::{Conv2d, LayerNorm, SqueezeExcite};
use super::Ctx;
use crate::error::{Error, Result};
use crate::ops::{Activation, ConvParams};
use crate::store::ParamBuilder;
use crate::tape::Var;
use crate::tensor::Scalar;

fn check_min_size<T: Scalar>(cx: &Ctx<'_, T>, x: Var, op: &'static str, min: usize) -> Result<()> {
    let [_, _, h, w] = cx.tape.value(x).nchw();
    if h < min {
        return Err(Error::shape(op, "height", min, h));
    }
    if w < min {
        return Err(Error::shape(op, "width", min, w));
    }
    Ok(())
}

fn check_channels<T: Scalar>(cx: &Ctx<'_, T>, x: Var, op: &'static str, c: usize) -> Result<()> {
    let got = cx.tape.value(x).nchw()[1];
    if got != c {
        return Err(Error::shape(op, "channels", c, got));
    }
    Ok(())
}

/// Two 3×3 stride-2 convolutions with SiLU between and a layer norm after.
#[derive(Clone, Debug)]
pub struct ConvStem {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub norm: LayerNorm,
}

impl ConvStem {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, img_channels: usize, c1: usize) -> Result<Self> {
        if !c1.is_multiple_of(2) || c1 == 0 {
            return Err(Error::Config(format!("{name}: stem width {c1} must be even and positive")));
        }
        let mut pb = pb.scope(name);
        let s2 = ConvParams::new(2, 1, 1);
        Ok(Self {
            conv1: Conv2d::new(&mut pb, "conv1", img_channels, c1 / 2, 3, s2, true)?,
            conv2: Conv2d::new(&mut pb, "conv2", c1 / 2, c1, 3, s2, true)?,
            norm: LayerNorm::new(&mut pb, "norm", c1)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_min_size(cx, x, "conv_stem", 4)?;
        check_channels(cx, x, "conv_stem", self.conv1.in_channels)?;
        let y = self.conv1.forward(cx, x)?;
        let y = cx.tape.act(y, Activation::Silu);
        let y = self.conv2.forward(cx, y)?;
        self.norm.forward(cx, y)
    }
}

/// Light-weight stride-2 patch embedding.
///
/// `z = PW(SE(SiLU(DW(x)))) + x`, then `LN(DW(PW_s2(z)))`. The second
/// pointwise layer carries both the stride and the width change.
#[derive(Clone, Debug)]
pub struct LwPatchEmbed {
    pub dw1: Conv2d,
    pub se: SqueezeExcite,
    pub pw1: Conv2d,
    pub pw2: Conv2d,
    pub dw2: Conv2d,
    pub norm: LayerNorm,
}

impl LwPatchEmbed {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Self {
            dw1: Conv2d::depthwise(&mut pb, "dw1", cin)?,
            se: SqueezeExcite::new(&mut pb, "se", cin, (1, 8), Activation::Silu)?,
            pw1: Conv2d::pointwise(&mut pb, "pw1", cin, cin)?,
            pw2: Conv2d::new(&mut pb, "pw2", cin, cout, 1, ConvParams::new(2, 0, 1), true)?,
            dw2: Conv2d::depthwise(&mut pb, "dw2", cout)?,
            norm: LayerNorm::new(&mut pb, "norm", cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_min_size(cx, x, "lw_patch_embed", 2)?;
        check_channels(cx, x, "lw_patch_embed", self.dw1.in_channels)?;
        let z = self.dw1.forward(cx, x)?;
        let z = cx.tape.act(z, Activation::Silu);
        let z = self.se.forward(cx, z)?;
        let z = self.pw1.forward(cx, z)?;
        let z = cx.tape.add(z, x)?;
        let y = self.pw2.forward(cx, z)?;
        let y = self.dw2.forward(cx, y)?;
        self.norm.forward(cx, y)
    }
}

/// Fused-MBConv style stride-2 patch embedding used as the reference design.
#[derive(Clone, Debug)]
pub struct BaselinePatchEmbed {
    pub dw: Conv2d,
    pub se: SqueezeExcite,
    pub pw: Conv2d,
    pub sconv: Conv2d,
    pub norm: LayerNorm,
}

impl BaselinePatchEmbed {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Self {
            dw: Conv2d::depthwise(&mut pb, "dw", cin)?,
            se: SqueezeExcite::new(&mut pb, "se", cin, (1, 4), Activation::Gelu)?,
            pw: Conv2d::pointwise(&mut pb, "pw", cin, cin)?,
            sconv: Conv2d::new(&mut pb, "sconv", cin, cout, 3, ConvParams::new(2, 1, 1), true)?,
            norm: LayerNorm::new(&mut pb, "norm", cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_min_size(cx, x, "baseline_patch_embed", 2)?;
        check_channels(cx, x, "baseline_patch_embed", self.dw.in_channels)?;
        let z = self.dw.forward(cx, x)?;
        let z = cx.tape.act(z, Activation::Gelu);
        let z = self.se.forward(cx, z)?;
        let z = self.pw.forward(cx, z)?;
        let z = cx.tape.add(z, x)?;
        let y = self.sconv.forward(cx, z)?;
        self.norm.forward(cx, y)
    }
}

/// Resolution-preserving widening layer before the classifier:
/// depthwise 3×3, pointwise `c4 → c5`, SiLU, layer norm.
#[derive(Clone, Debug)]
pub struct ChannelExpansion {
    pub dw: Conv2d,
    pub pw: Conv2d,
    pub norm: LayerNorm,
}

impl ChannelExpansion {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c4: usize, c5: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Self {
            dw: Conv2d::depthwise(&mut pb, "dw", c4)?,
            pw: Conv2d::pointwise(&mut pb, "pw", c4, c5)?,
            norm: LayerNorm::new(&mut pb, "norm", c5)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(cx, x, "channel_expansion", self.dw.in_channels)?;
        let y = self.dw.forward(cx, x)?;
        let y = self.pw.forward(cx, y)?;
        let y = cx.tape.act(y, Activation::Silu);
        self.norm.forward(cx, y)
    }
}
