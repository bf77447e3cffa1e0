//! Variant configurations, network assembly and weight files.

mod config;
mod weights;

pub use config::{micro_config, variant_config, ModelConfig, StageConfig};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, MAGIC, VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{ChannelExpansion, ConvStem, Ctx, Linear, LwPatchEmbed, TransformerBlock};
use crate::error::{Error, Result};
use crate::store::{ParamBuilder, WeightStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Smallest accepted input side.
pub const MIN_INPUT: usize = 32;

#[derive(Clone, Debug)]
pub struct Stage {
    pub downsample: Option<LwPatchEmbed>,
    pub blocks: Vec<TransformerBlock>,
}

/// The weight-free module graph.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub stem: ConvStem,
    pub stages: Vec<Stage>,
    pub expansion: ChannelExpansion,
    pub head: Linear,
}

/// Activation shapes recorded during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShapeTrace {
    pub stem: [usize; 4],
    pub stages: Vec<[usize; 4]>,
    pub expansion: [usize; 4],
    pub logits: [usize; 2],
}

impl Network {
    /// Registers every weight of `cfg` through `pb`, in forward order.
    pub fn build<T: Scalar>(cfg: &ModelConfig, pb: &mut ParamBuilder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvStem::new(pb, "stem", cfg.img_channels, cfg.stem_channels)?;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut c_prev = cfg.stem_channels;
        for (i, s) in cfg.stages.iter().enumerate() {
            let mut sp = pb.scope(&format!("stages/{i}"));
            let downsample =
                if s.downsample_in { Some(LwPatchEmbed::new(&mut sp, "downsample", c_prev, s.channels)?) } else { None };
            let blocks = (0..s.repeats)
                .map(|b| {
                    TransformerBlock::new(&mut sp, &format!("blocks/{b}"), s.channels, s.lsa, s.gsa, cfg.ffn, cfg.attn_out_proj)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { downsample, blocks });
            c_prev = s.channels;
        }
        let expansion = ChannelExpansion::new(pb, "expansion", c_prev, cfg.expansion_channels)?;
        let head = Linear::new(pb, "head", cfg.expansion_channels, cfg.num_classes)?;
        Ok(Self { config: cfg.clone(), stem, stages, expansion, head })
    }

    fn check_input<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<()> {
        let [_, c, h, w] = cx.tape.value(x).nchw();
        if c != self.config.img_channels {
            return Err(Error::shape("forward", "image channels", self.config.img_channels, c));
        }
        if h < MIN_INPUT {
            return Err(Error::shape("forward", "height", MIN_INPUT, h));
        }
        if w < MIN_INPUT {
            return Err(Error::shape("forward", "width", MIN_INPUT, w));
        }
        Ok(())
    }

    /// Features after the channel expansion, before pooling.
    pub fn features<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, trace: Option<&mut ShapeTrace>) -> Result<Var> {
        self.check_input(cx, x)?;
        let mut shapes = ShapeTrace::default();
        let mut y = self.stem.forward(cx, x)?;
        shapes.stem = cx.tape.value(y).nchw();
        for stage in &self.stages {
            if let Some(d) = &stage.downsample {
                y = d.forward(cx, y)?;
            }
            for b in &stage.blocks {
                y = b.forward(cx, y)?;
            }
            shapes.stages.push(cx.tape.value(y).nchw());
        }
        y = self.expansion.forward(cx, y)?;
        shapes.expansion = cx.tape.value(y).nchw();
        if let Some(t) = trace {
            *t = shapes;
        }
        Ok(y)
    }

    /// Global average pool and linear head on top of [`Network::features`].
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, trace: Option<&mut ShapeTrace>) -> Result<Var> {
        let mut local = ShapeTrace::default();
        let f = self.features(cx, x, Some(&mut local))?;
        let n = cx.tape.value(f).nchw()[0];
        let p = cx.tape.adaptive_avg_pool2d(f, 1, 1)?;
        let p = cx.tape.reshape(p, &[n, self.config.expansion_channels])?;
        let logits = self.head.forward(cx, p)?;
        local.logits = [n, self.config.num_classes];
        if let Some(t) = trace {
            *t = local;
        }
        Ok(logits)
    }
}

/// A network together with its weights.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub network: Network,
    pub weights: WeightStore<T>,
}

/// Builds `cfg` with weights drawn from a ChaCha8 stream seeded by `seed`.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let mut weights = WeightStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = Network::build(cfg, &mut ParamBuilder::new(&mut weights, &mut rng).with_init(cfg.init))?;
    Ok(Model { network, weights })
}

impl<T: Scalar> Model<T> {
    /// Builds `cfg` and replaces its weights with `store`.
    pub fn with_weights(cfg: &ModelConfig, store: &WeightStore<T>) -> Result<Self> {
        let mut m = build_model(cfg, 0)?;
        m.weights.assign_from(store)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    /// Inference forward pass returning `(n, num_classes)` logits.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, None)?.0)
    }

    /// Logits plus the per-stage activation shapes.
    pub fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ShapeTrace)> {
        let mut trace = ShapeTrace::default();
        let (y, _) = self.run(x, Some(&mut trace))?;
        Ok((y, trace))
    }

    /// Logits and the number of multiply-accumulates the kernels executed.
    pub fn forward_counting(&self, x: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        self.run(x, None)
    }

    fn run(&self, x: &Tensor<T>, trace: Option<&mut ShapeTrace>) -> Result<(Tensor<T>, u64)> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut cx = Ctx::new(&mut tape, &bound);
        let y = self.network.forward(&mut cx, xv, trace)?;
        Ok((tape.value(y).clone(), tape.macs()))
    }
}
