//! Network building blocks.
//!
//! Each block is a plain record of [`ParamId`]s plus hyper-parameters. The
//! weights themselves live in a [`WeightStore`](crate::store::WeightStore);
//! a forward pass binds the store to a [`Tape`] and threads a [`Ctx`]
//! through the blocks.

mod attention;
mod embed;
mod ffn;
mod layers;
mod transformer;

pub use attention::{AttnSpec, GlobalPooledAttention, LocalWindowAttention, PlgAttention, SplitRatio};
pub use embed::{BaselinePatchEmbed, ChannelExpansion, ConvStem, LwPatchEmbed};
pub use ffn::{CcfFfn, CcfFfnPlus, Ffn, FfnKind, FfnSpec};
pub use layers::{Conv2d, Grn, LayerNorm, Linear, SqueezeExcite, GRN_EPS, LN_EPS};
pub use transformer::TransformerBlock;

use crate::store::{Bound, ParamId};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// A tape plus the variables a weight store was bound to.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a Bound,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a Bound) -> Self {
        Self { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params.var(id)
    }
}
