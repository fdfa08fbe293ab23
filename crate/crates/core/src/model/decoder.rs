//! Decoder stages, segmentation heads and the deep-supervision loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::Conv2dSpec;
use crate::nn::layers::Conv;
use crate::nn::{dims, BlockConfig, Casab, ConvBlock, Ctx, Rlab, Upsampler, UpsamplerKind};
use crate::params::Registry;
use crate::tensor::{Element, Tensor};

/// Upsampler per decoder stage, named by the deeper feature it consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsamplerPlan {
    pub bridge: UpsamplerKind,
    pub s4: UpsamplerKind,
    pub s3: UpsamplerKind,
    pub s2: UpsamplerKind,
    pub s1: UpsamplerKind,
}

impl Default for UpsamplerPlan {
    fn default() -> Self {
        use UpsamplerKind::{Dsub, Eub};
        Self { bridge: Dsub, s4: Dsub, s3: Eub, s2: Eub, s1: Eub }
    }
}

impl UpsamplerPlan {
    pub fn uniform(kind: UpsamplerKind) -> Self {
        Self { bridge: kind, s4: kind, s3: kind, s2: kind, s1: kind }
    }

    /// Depth-to-space blocks in the first `n` stages, effective blocks after.
    pub fn dsub_prefix(n: usize) -> Self {
        let k = |i: usize| if i < n { UpsamplerKind::Dsub } else { UpsamplerKind::Eub };
        Self { bridge: k(0), s4: k(1), s3: k(2), s2: k(3), s1: k(4) }
    }

    /// Stage order D5, D4, D3, D2, D1.
    pub fn as_array(&self) -> [UpsamplerKind; 5] {
        [self.bridge, self.s4, self.s3, self.s2, self.s1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub upsamplers: UpsamplerPlan,
    /// Residual iterations for D5 through D1.
    pub rlab_iterations: Vec<usize>,
    pub head_channels: usize,
    pub enable_rlab: bool,
    pub enable_casab: bool,
    /// When off, every stage doubles resolution with parameter-free
    /// bilinear interpolation instead of its configured block.
    pub enable_upsampler: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            upsamplers: UpsamplerPlan::default(),
            rlab_iterations: vec![5, 4, 3, 2, 1],
            head_channels: 1,
            enable_rlab: true,
            enable_casab: true,
            enable_upsampler: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rlab_iterations.len() != 5 || self.rlab_iterations.contains(&0) {
            return Err(Error::Config("rlab_iterations needs five positive entries".into()));
        }
        if self.head_channels != 1 {
            return Err(Error::Config("only single-channel heads are supported".into()));
        }
        Ok(())
    }
}

/// Fusion of the upsampled feature with the skip.
#[derive(Clone, Debug)]
pub enum Fusion {
    Rlab(Rlab),
    Concat,
}

/// Channel refinement after fusion.
#[derive(Clone, Debug)]
pub enum Refine {
    Casab(Casab),
    Plain(ConvBlock),
}

/// Upsample, fuse with the skip, refine.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: Upsampler,
    pub fusion: Fusion,
    pub refine: Refine,
    pub out_channels: usize,
}

impl DecoderStage {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        reg: &mut Registry,
        name: &str,
        kind: UpsamplerKind,
        (c_deep, c_skip, c_out): (usize, usize, usize),
        iterations: usize,
        config: &DecoderConfig,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let kind = if config.enable_upsampler { kind } else { UpsamplerKind::Bilinear };
        let up = Upsampler::build(kind, reg, &format!("{name}.up"), c_deep, c_skip, cfg)?;
        let c_up = up.out_channels(c_deep);
        let fusion = if config.enable_rlab {
            Fusion::Rlab(Rlab::build(reg, &format!("{name}.rlab"), c_skip, c_up, iterations, cfg)?)
        } else {
            Fusion::Concat
        };
        let c_cat = c_skip + c_up;
        let refine = if config.enable_casab {
            Refine::Casab(Casab::build(reg, &format!("{name}.casab"), c_cat, c_out, cfg)?)
        } else {
            Refine::Plain(ConvBlock::build(reg, &format!("{name}.cb"), c_cat, c_out, cfg)?)
        };
        Ok(Self { up, fusion, refine, out_channels: c_out })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, deeper: Var, skip: Var) -> Result<Var> {
        let (n, h, w, _) = dims(ctx, deeper)?;
        let (ns, hs, ws, _) = dims(ctx, skip)?;
        if ns != n || hs != 2 * h || ws != 2 * w {
            return Err(Error::shape(format!(
                "decoder stage: deeper {:?} is not half the size of skip {:?}",
                ctx.shape(deeper),
                ctx.shape(skip)
            )));
        }
        let up = self.up.forward(ctx, deeper)?;
        let fused = match &self.fusion {
            Fusion::Rlab(r) => r.forward(ctx, skip, up)?,
            Fusion::Concat => ctx.tape.concat(&[skip, up], 3)?,
        };
        match &self.refine {
            Refine::Casab(c) => c.forward(ctx, fused),
            Refine::Plain(c) => c.forward(ctx, fused),
        }
    }
}

/// `resize(sigmoid(Conv1x1(x)))` to the input resolution.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv: Conv,
}

impl Head {
    pub fn build(reg: &mut Registry, name: &str, cin: usize) -> Result<Self> {
        Ok(Self { conv: Conv::build(reg, &format!("{name}.conv"), cin, 1, 1, Conv2dSpec::same())? })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var, target_hw: (usize, usize)) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        let h = ctx.tape.sigmoid(h)?;
        let (_, fh, fw, _) = dims(ctx, h)?;
        if (fh, fw) == target_hw {
            Ok(h)
        } else {
            ctx.tape.resize_bilinear(h, target_hw.0, target_hw.1)
        }
    }
}

pub const HEAD_NAMES: [&str; 6] = ["b1", "d5", "d4", "d3", "d2", "d1"];

/// Six probability maps `(N, H, W, 1)` in the order B1, D5, D4, D3, D2, D1.
#[derive(Clone, Copy, Debug)]
pub struct SegmentationOutput {
    pub maps: [Var; 6],
}

impl SegmentationOutput {
    /// The D1 map.
    pub fn final_map(&self) -> Var {
        self.maps[5]
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// D5 through D1.
    pub stages: Vec<DecoderStage>,
    /// B1 then D5 through D1.
    pub heads: Vec<Head>,
    pub config: DecoderConfig,
    feature_channels: Vec<usize>,
}

impl Decoder {
    /// `feature_channels` lists S1..S5 and the bridge.
    pub fn build(
        reg: &mut Registry,
        name: &str,
        feature_channels: &[usize],
        config: &DecoderConfig,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        config.validate()?;
        if feature_channels.len() != 6 {
            return Err(Error::Config(format!("decoder needs six feature widths, got {}", feature_channels.len())));
        }
        let kinds = config.upsamplers.as_array();
        let mut stages = Vec::with_capacity(5);
        let mut c_deep = feature_channels[5];
        for (i, &kind) in kinds.iter().enumerate() {
            let c_skip = feature_channels[4 - i];
            let stage = DecoderStage::build(
                reg,
                &format!("{name}.d{}", 5 - i),
                kind,
                (c_deep, c_skip, c_skip),
                config.rlab_iterations[i],
                config,
                cfg,
            )?;
            c_deep = stage.out_channels;
            stages.push(stage);
        }
        let mut heads = vec![Head::build(reg, &format!("{name}.head_b1"), feature_channels[5])?];
        for (i, s) in stages.iter().enumerate() {
            heads.push(Head::build(reg, &format!("{name}.head_d{}", 5 - i), s.out_channels)?);
        }
        Ok(Self { stages, heads, config: config.clone(), feature_channels: feature_channels.to_vec() })
    }

    /// Decodes `[S1, S2, S3, S4, S5, Bridge]` into six maps at `target_hw`.
    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: &[Var],
        target_hw: (usize, usize),
    ) -> Result<SegmentationOutput> {
        if features.len() != 6 {
            return Err(Error::shape(format!("decoder expects six features, got {}", features.len())));
        }
        for (i, (&f, &c)) in features.iter().zip(&self.feature_channels).enumerate() {
            let (_, h, w, got) = dims(ctx, f)?;
            let scale = 1 << i;
            if got != c || h * scale != target_hw.0 || w * scale != target_hw.1 {
                return Err(Error::shape(format!(
                    "feature {i} has shape {:?}; expected {c} channels at {}x{}",
                    ctx.shape(f),
                    target_hw.0 / scale,
                    target_hw.1 / scale
                )));
            }
        }
        let mut maps = Vec::with_capacity(6);
        maps.push(self.heads[0].forward(ctx, features[5], target_hw)?);
        let mut deeper = features[5];
        for (i, stage) in self.stages.iter().enumerate() {
            deeper = stage.forward(ctx, deeper, features[4 - i])?;
            maps.push(self.heads[i + 1].forward(ctx, deeper, target_hw)?);
        }
        Ok(SegmentationOutput { maps: maps.try_into().expect("six maps") })
    }
}

/// Sum of the six binary cross-entropy terms. Returns the total and the
/// individual terms in head order.
pub fn deep_supervision_loss<T: Element>(
    ctx: &mut Ctx<'_, T>,
    out: &SegmentationOutput,
    target: &Tensor<T>,
) -> Result<(Var, [Var; 6])> {
    let mut terms = Vec::with_capacity(6);
    for &m in &out.maps {
        terms.push(ctx.tape.bce_loss(m, target)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = ctx.tape.add(total, t)?;
    }
    Ok((total, terms.try_into().expect("six terms")))
}
