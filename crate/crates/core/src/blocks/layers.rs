use super::Ctx;
use crate::error::{Error, Result};
use crate::ops::{Activation, ConvParams};
use crate::store::{ParamBuilder, ParamId, INIT_STD};
use crate::tape::Var;
use crate::tensor::Scalar;

pub const LN_EPS: f64 = 1e-5;
pub const GRN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: ConvParams,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        params: ConvParams,
        bias: bool,
    ) -> Result<Self> {
        let g = params.groups;
        if g == 0 || !cin.is_multiple_of(g) || !cout.is_multiple_of(g) {
            return Err(Error::Config(format!("{name}: channels {cin}->{cout} not divisible by groups {g}")));
        }
        let mut pb = pb.scope(name);
        let std = pb.conv_std(cin / g * kernel * kernel);
        let weight = pb.trunc_normal("weight", &[cout, cin / g, kernel, kernel], std)?;
        let bias = if bias { Some(pb.zeros("bias", &[cout])?) } else { None };
        Ok(Self { weight, bias, params, in_channels: cin, out_channels: cout, kernel })
    }

    pub fn pointwise<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(pb, name, cin, cout, 1, ConvParams::default(), true)
    }

    pub fn depthwise<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        Self::new(pb, name, c, c, 3, ConvParams::new(1, 1, c), true)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| cx.p(b));
        cx.tape.conv2d(x, cx.p(self.weight), b, self.params)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, fin: usize, fout: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        let weight = pb.trunc_normal("weight", &[fout, fin], INIT_STD)?;
        let bias = pb.zeros("bias", &[fout])?;
        Ok(Self { weight, bias, in_features: fin, out_features: fout })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.tape.linear(x, cx.p(self.weight), Some(cx.p(self.bias)))
    }
}

/// Channel-wise layer norm applied at every spatial site.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Self { gamma: pb.ones("gamma", &[c])?, beta: pb.zeros("beta", &[c])? })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.tape.layer_norm(x, cx.p(self.gamma), cx.p(self.beta), T::lit(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct Grn {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Grn {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Self { gamma: pb.zeros("gamma", &[c])?, beta: pb.zeros("beta", &[c])? })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        cx.tape.grn(x, cx.p(self.gamma), cx.p(self.beta), T::lit(GRN_EPS))
    }
}

/// Squeeze-and-excitation gate with a `floor(c·num/den)` bottleneck.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Conv2d,
    pub expand: Conv2d,
    pub act: Activation,
}

impl SqueezeExcite {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c: usize,
        reduction: (usize, usize),
        act: Activation,
    ) -> Result<Self> {
        let hidden = c * reduction.0 / reduction.1.max(1);
        if hidden == 0 || reduction.1 == 0 {
            return Err(Error::Config(format!("{name}: reduction {}/{} leaves no channels for c={c}", reduction.0, reduction.1)));
        }
        let mut pb = pb.scope(name);
        let reduce = Conv2d::pointwise(&mut pb, "reduce", c, hidden)?;
        let expand = Conv2d::pointwise(&mut pb, "expand", hidden, c)?;
        Ok(Self { reduce, expand, act })
    }

    pub fn hidden(&self) -> usize {
        self.reduce.out_channels
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.tape.adaptive_avg_pool2d(x, 1, 1)?;
        let s = self.reduce.forward(cx, s)?;
        let s = cx.tape.act(s, self.act);
        let s = self.expand.forward(cx, s)?;
        let s = cx.tape.act(s, Activation::Sigmoid);
        cx.tape.scale_channels(x, s)
    }
}
