//! Residual U-block encoder with inner attention and per-stage CASAB.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::Conv2dSpec;
use crate::nn::blocks::expect_channels;
use crate::nn::layers::{BatchNorm, Conv};
use crate::nn::{dims, BlockConfig, Casab, Ctx, Rlab};
use crate::params::Registry;
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub stage_filters: Vec<usize>,
    /// Internal width of each residual U-block.
    pub stage_mids: Vec<usize>,
    pub rsu_depths: Vec<usize>,
    /// Use the dilated, non-pooling block for the last two stages.
    pub dilated_last_two: bool,
    pub inner_attention: bool,
    pub casab_per_stage: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            stage_filters: vec![64, 128, 256, 512, 512, 512],
            stage_mids: vec![32, 32, 64, 128, 256, 256],
            rsu_depths: vec![7, 6, 5, 4, 4, 4],
            dilated_last_two: true,
            inner_attention: true,
            casab_per_stage: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_filters.len();
        if n != 6 || self.stage_mids.len() != 6 || self.rsu_depths.len() != 6 {
            return Err(Error::Config("encoder needs exactly six stages of filters, mids and depths".into()));
        }
        if self.input_channels == 0 || self.stage_filters.iter().chain(&self.stage_mids).any(|&c| c == 0) {
            return Err(Error::Config("encoder channel widths must be positive".into()));
        }
        if self.rsu_depths.iter().any(|&l| l < 3) {
            return Err(Error::Config("residual U-block depth must be at least 3".into()));
        }
        Ok(())
    }
}

/// `ReLU(BN(Conv3x3_dilated(x)))`.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn build(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        dilation: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::build(reg, &format!("{name}.conv"), cin, cout, 3, Conv2dSpec::dilated(dilation))?,
            bn: BatchNorm::build(reg, &format!("{name}.bn"), cout, cfg.bn_eps, cfg.bn_momentum)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        let h = self.bn.forward(ctx, h)?;
        ctx.tape.relu(h)
    }
}

/// Residual U-block. The pooling variant halves resolution between its
/// `depth - 1` encoder convolutions (bottom one dilated by 2); the dilated
/// variant keeps resolution and dilates by 1, 2, 4, ... instead. Decoder
/// junctions fuse the skip with the deeper feature either by concatenation
/// or through an inner RLAB.
#[derive(Clone, Debug)]
pub struct Rsu {
    pub input: ConvBnRelu,
    pub enc: Vec<ConvBnRelu>,
    pub dec: Vec<ConvBnRelu>,
    /// One per decoder junction, deepest first; empty when disabled.
    pub attn: Vec<Rlab>,
    pub dilated: bool,
    cin: usize,
    cout: usize,
}

impl Rsu {
    pub fn build(
        reg: &mut Registry,
        name: &str,
        depth: usize,
        dilated: bool,
        (cin, mid, cout): (usize, usize, usize),
        inner_attention: bool,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        if depth < 3 {
            return Err(Error::arg(format!("{name}: depth {depth} below 3")));
        }
        let input = ConvBnRelu::build(reg, &format!("{name}.in"), cin, cout, 1, cfg)?;
        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            let c_in = if i == 0 { cout } else { mid };
            let dil = match (dilated, i + 1 == depth) {
                (true, _) => 1 << i,
                (false, true) => 2,
                (false, false) => 1,
            };
            enc.push(ConvBnRelu::build(reg, &format!("{name}.enc{}", i + 1), c_in, mid, dil, cfg)?);
        }
        let mut dec = Vec::with_capacity(depth - 1);
        let mut attn = Vec::new();
        // Junction j fuses enc[j] (skip) with the deeper feature; deepest first.
        for j in (0..depth - 1).rev() {
            let c_out = if j == 0 { cout } else { mid };
            let dil = if dilated { 1 << j } else { 1 };
            if inner_attention {
                attn.push(Rlab::build(reg, &format!("{name}.attn{}", j + 1), mid, mid, 1, cfg)?);
            }
            dec.push(ConvBnRelu::build(reg, &format!("{name}.dec{}", j + 1), 2 * mid, c_out, dil, cfg)?);
        }
        Ok(Self { input, enc, dec, attn, dilated, cin, cout })
    }

    pub fn depth(&self) -> usize {
        self.enc.len()
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    /// Resolution divisor reached inside the block.
    pub fn min_divisor(&self) -> usize {
        if self.dilated {
            1
        } else {
            1 << (self.depth() - 2)
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.cin, "residual u-block")?;
        let (_, h, w, _) = dims(ctx, x)?;
        let d = self.min_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(format!(
                "residual u-block of depth {} needs extents divisible by {d}, got {h}x{w}",
                self.depth()
            )));
        }
        let hin = self.input.forward(ctx, x)?;
        let depth = self.depth();
        let mut skips = Vec::with_capacity(depth);
        let mut cur = hin;
        for (i, conv) in self.enc.iter().enumerate() {
            if !self.dilated && i > 0 && i + 1 < depth {
                cur = ctx.tape.max_pool(cur, 2)?;
            }
            cur = conv.forward(ctx, cur)?;
            skips.push(cur);
        }
        let mut deeper = skips[depth - 1];
        for (k, j) in (0..depth - 1).rev().enumerate() {
            let skip = skips[j];
            let (_, sh, sw, _) = dims(ctx, skip)?;
            let (_, dh, dw, _) = dims(ctx, deeper)?;
            if (dh, dw) != (sh, sw) {
                deeper = ctx.tape.resize_bilinear(deeper, sh, sw)?;
            }
            let fused = match self.attn.get(k) {
                Some(rlab) => rlab.forward(ctx, skip, deeper)?,
                None => ctx.tape.concat(&[deeper, skip], 3)?,
            };
            deeper = self.dec[k].forward(ctx, fused)?;
        }
        ctx.tape.add(deeper, hin)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub rsu: Rsu,
    pub casab: Option<Casab>,
}

impl EncoderStage {
    /// Residual U-block, then CASAB when enabled.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.rsu.forward(ctx, x)?;
        match &self.casab {
            Some(c) => c.forward(ctx, y),
            None => Ok(y),
        }
    }

    /// Stage output and its 2x2 max-pooled copy for the next stage.
    pub fn forward_split<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let y = self.forward(ctx, x)?;
        let down = ctx.tape.max_pool(y, 2)?;
        Ok((y, down))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<EncoderStage>,
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn build(reg: &mut Registry, name: &str, config: &EncoderConfig, cfg: &BlockConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(6);
        let mut cin = config.input_channels;
        for i in 0..6 {
            let (mid, cout) = (config.stage_mids[i], config.stage_filters[i]);
            let dilated = config.dilated_last_two && i >= 4;
            let prefix = format!("{name}.s{}", i + 1);
            let rsu = Rsu::build(
                reg,
                &format!("{prefix}.rsu"),
                config.rsu_depths[i],
                dilated,
                (cin, mid, cout),
                config.inner_attention,
                cfg,
            )?;
            let casab = if config.casab_per_stage {
                Some(Casab::build(reg, &format!("{prefix}.casab"), cout, cout, cfg)?)
            } else {
                None
            };
            stages.push(EncoderStage { rsu, casab });
            cin = cout;
        }
        Ok(Self { stages, config: config.clone() })
    }

    pub fn out_channels(&self) -> Vec<usize> {
        self.config.stage_filters.clone()
    }

    /// Returns `[S1, S2, S3, S4, S5, Bridge]` at scales 1 through 1/32.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Vec<Var>> {
        let (_, h, w, _) = dims(ctx, image)?;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("encoder input {h}x{w} is not divisible by 32")));
        }
        let mut feats = Vec::with_capacity(6);
        let mut cur = image;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                cur = ctx.tape.max_pool(cur, 2)?;
            }
            cur = stage.forward(ctx, cur)?;
            feats.push(cur);
        }
        Ok(feats)
    }
}
