use super::attention::{AttnSpec, PlgAttention};
use super::ffn::{Ffn, FfnSpec};
use super::layers::LayerNorm;
use super::Ctx;
use crate::error::Result;
use crate::store::{ParamBuilder, ParamId};
use crate::tape::Var;
use crate::tensor::Scalar;

/// Pre-norm residual block: `u = x + attn(LN(x))`, `out = u + ffn(LN(u))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: PlgAttention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c: usize,
        lsa: AttnSpec,
        gsa: Option<AttnSpec>,
        ffn: FfnSpec,
        out_proj: bool,
    ) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut pb, "norm1", c)?,
            attn: PlgAttention::new(&mut pb, "attn", c, lsa, gsa, out_proj)?,
            norm2: LayerNorm::new(&mut pb, "norm2", c)?,
            ffn: Ffn::new(&mut pb, "ffn", c, ffn)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a = self.norm1.forward(cx, x)?;
        let a = self.attn.forward(cx, a)?;
        let u = cx.tape.add(x, a)?;
        let f = self.norm2.forward(cx, u)?;
        let f = self.ffn.forward(cx, f)?;
        cx.tape.add(u, f)
    }

    /// Parameters whose zeroing turns the block into the identity map.
    pub fn branch_output_params(&self) -> Vec<ParamId> {
        let mut ids = self.attn.output_params();
        ids.extend(self.ffn.output_params());
        ids
    }
}
