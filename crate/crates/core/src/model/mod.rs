//! The full encoder-decoder segmentation network.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BlockConfig, Ctx};
use crate::params::Registry;
use crate::tensor::Element;

pub mod decoder;
pub mod encoder;

pub use decoder::{
    deep_supervision_loss, Decoder, DecoderConfig, DecoderStage, Head, SegmentationOutput, UpsamplerPlan, HEAD_NAMES,
};
pub use encoder::{Encoder, EncoderConfig, Rsu};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub blocks: BlockConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-width network: filters 64..512 and residual U-block depths 7..4.
    pub fn paper() -> Self {
        Self { encoder: EncoderConfig::default(), decoder: DecoderConfig::default(), blocks: BlockConfig::default() }
    }

    /// Narrow network that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                stage_filters: vec![16, 16, 32, 32, 32, 32],
                stage_mids: vec![8, 8, 16, 16, 16, 16],
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig::default(),
            blocks: BlockConfig { attention_token_cap: Some(256), ..BlockConfig::default() },
        }
    }

    /// Tiny network with shallow blocks, for gradient checks.
    pub fn micro() -> Self {
        Self {
            encoder: EncoderConfig {
                input_channels: 1,
                stage_filters: vec![2, 2, 2, 2, 2, 2],
                stage_mids: vec![2, 2, 2, 2, 2, 2],
                rsu_depths: vec![3, 3, 3, 3, 3, 3],
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig { rlab_iterations: vec![1, 1, 1, 1, 1], ..DecoderConfig::default() },
            blocks: BlockConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mcads {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub config: ModelConfig,
}

impl Mcads {
    pub fn build(reg: &mut Registry, config: &ModelConfig) -> Result<Self> {
        let encoder = Encoder::build(reg, "encoder", &config.encoder, &config.blocks)?;
        let decoder = Decoder::build(reg, "decoder", &encoder.out_channels(), &config.decoder, &config.blocks)?;
        Ok(Self { encoder, decoder, config: config.clone() })
    }

    /// Builds a model together with its registry.
    pub fn with_registry(config: &ModelConfig) -> Result<(Self, Registry)> {
        let mut reg = Registry::new();
        let m = Self::build(&mut reg, config)?;
        Ok((m, reg))
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<SegmentationOutput> {
        let (_, h, w, c) = crate::nn::dims(ctx, image)?;
        if c != self.config.encoder.input_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.config.encoder.input_channels
            )));
        }
        let feats = self.encoder.forward(ctx, image)?;
        self.decoder.forward(ctx, &feats, (h, w))
    }
}

/// Parameter and cost accounting for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Trainable scalars per top-level module, in registry order.
    pub modules: Vec<(String, usize)>,
    pub trainable: usize,
    /// Running-statistic scalars, not counted as parameters.
    pub buffers: usize,
    pub input_hw: (usize, usize),
    pub macs: u64,
}

/// Module key for a parameter name: the first two dotted segments
/// (`encoder.s1`, `decoder.d5`, ...).
fn module_of(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

pub fn summarize(config: &ModelConfig, input_hw: (usize, usize)) -> Result<Summary> {
    let (model, reg) = Mcads::with_registry(config)?;
    let mut modules: Vec<(String, usize)> = Vec::new();
    let (mut trainable, mut buffers) = (0, 0);
    for spec in reg.specs() {
        let n = spec.numel();
        if spec.role == crate::params::Role::Buffer {
            buffers += n;
            continue;
        }
        trainable += n;
        let key = module_of(&spec.name);
        match modules.last_mut() {
            Some((k, c)) if *k == key => *c += n,
            _ => modules.push((key, n)),
        }
    }
    let mut ctx = Ctx::<f32>::meta(&reg);
    let x = ctx.meta_input(&[1, input_hw.0, input_hw.1, config.encoder.input_channels]);
    model.forward(&mut ctx, x)?;
    Ok(Summary { modules, trainable, buffers, input_hw, macs: ctx.tape.macs() })
}
