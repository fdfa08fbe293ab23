//! Convolution block and the three upsampler variants.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::Conv2dSpec;
use crate::nn::layers::{BatchNorm, Conv, ConvTranspose};
use crate::nn::{dims, BlockConfig, Ctx};
use crate::params::Registry;
use crate::tensor::Element;

pub(crate) fn expect_channels<T: Element>(ctx: &Ctx<'_, T>, x: Var, c: usize, who: &str) -> Result<()> {
    let (_, _, _, got) = dims(ctx, x)?;
    if got != c {
        return Err(Error::shape(format!("{who}: expected {c} input channels, got {got}")));
    }
    Ok(())
}

/// `LR(BN(Conv1x1(LR(BN(DWConv3x3(x))))))`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub dw: Conv,
    pub bn1: BatchNorm,
    pub pw: Conv,
    pub bn2: BatchNorm,
    slope: f64,
}

impl ConvBlock {
    pub fn build(reg: &mut Registry, name: &str, cin: usize, cout: usize, cfg: &BlockConfig) -> Result<Self> {
        Ok(Self {
            dw: Conv::build(reg, &format!("{name}.dw"), cin, cin, 3, Conv2dSpec::depthwise(cin))?,
            bn1: BatchNorm::build(reg, &format!("{name}.bn1"), cin, cfg.bn_eps, cfg.bn_momentum)?,
            pw: Conv::build(reg, &format!("{name}.pw"), cin, cout, 1, Conv2dSpec::same())?,
            bn2: BatchNorm::build(reg, &format!("{name}.bn2"), cout, cfg.bn_eps, cfg.bn_momentum)?,
            slope: cfg.leaky_slope,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.pw.cout
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.dw.cin, "conv block")?;
        let h = self.dw.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.leaky_relu(h, self.slope)?;
        let h = self.pw.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        ctx.tape.leaky_relu(h, self.slope)
    }
}

/// Depth-to-space upsampling block:
/// `CB(ReLU(Conv3x3(D2S(ReLU(Conv3x3(x))))))`.
///
/// The first convolution expands `C` to `C * d^2` channels so the
/// rearrangement returns `C` channels at `d` times the resolution.
#[derive(Clone, Debug)]
pub struct Dsub {
    pub expand: Conv,
    pub refine: Conv,
    pub cb: ConvBlock,
    factor: usize,
}

impl Dsub {
    pub fn build(reg: &mut Registry, name: &str, cin: usize, cout: usize, cfg: &BlockConfig) -> Result<Self> {
        let factor = cfg.d2s_factor;
        if factor < 1 {
            return Err(Error::arg("d2s factor must be at least 1"));
        }
        Ok(Self {
            expand: Conv::build(reg, &format!("{name}.expand"), cin, cin * factor * factor, 3, Conv2dSpec::same())?,
            refine: Conv::build(reg, &format!("{name}.refine"), cin, cin, 3, Conv2dSpec::same())?,
            cb: ConvBlock::build(reg, &format!("{name}.cb"), cin, cout, cfg)?,
            factor,
        })
    }

    /// Output of the rearrangement step, before the refining convolution.
    pub fn rearranged<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.expand.cin, "dsub")?;
        let h = self.expand.forward(ctx, x)?;
        let h = ctx.tape.relu(h)?;
        ctx.tape.depth_to_space(h, self.factor)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.rearranged(ctx, x)?;
        let h = self.refine.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        self.cb.forward(ctx, h)
    }
}

/// Effective upsampling block: `CB(Bilinear(CB(x)))`.
#[derive(Clone, Debug)]
pub struct Eub {
    pub pre: ConvBlock,
    pub post: ConvBlock,
    factor: usize,
}

impl Eub {
    pub fn build(reg: &mut Registry, name: &str, cin: usize, cout: usize, cfg: &BlockConfig) -> Result<Self> {
        Ok(Self {
            pre: ConvBlock::build(reg, &format!("{name}.pre"), cin, cout, cfg)?,
            post: ConvBlock::build(reg, &format!("{name}.post"), cout, cout, cfg)?,
            factor: cfg.d2s_factor,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.pre.forward(ctx, x)?;
        let h = ctx.tape.bilinear_upsample(h, self.factor)?;
        self.post.forward(ctx, h)
    }
}

/// Plain 3x3 stride-2 transposed convolution, the baseline upsampler.
#[derive(Clone, Debug)]
pub struct TransposeUp {
    pub conv: ConvTranspose,
    cout: usize,
}

impl TransposeUp {
    pub fn build(reg: &mut Registry, name: &str, cin: usize, cout: usize, cfg: &BlockConfig) -> Result<Self> {
        let conv = ConvTranspose::build(reg, &format!("{name}.convtp"), cin, cout, 3, cfg.d2s_factor)?;
        Ok(Self { conv, cout })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.conv.forward(ctx, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsamplerKind {
    Dsub,
    Eub,
    Convtp,
    /// Parameter-free bilinear doubling; channels pass through unchanged.
    Bilinear,
}

#[derive(Clone, Debug)]
pub enum Upsampler {
    Dsub(Dsub),
    Eub(Eub),
    Convtp(TransposeUp),
    Bilinear { factor: usize },
}

impl Upsampler {
    pub fn build(
        kind: UpsamplerKind,
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        Ok(match kind {
            UpsamplerKind::Dsub => Upsampler::Dsub(Dsub::build(reg, &format!("{name}.dsub"), cin, cout, cfg)?),
            UpsamplerKind::Eub => Upsampler::Eub(Eub::build(reg, &format!("{name}.eub"), cin, cout, cfg)?),
            UpsamplerKind::Convtp => Upsampler::Convtp(TransposeUp::build(reg, name, cin, cout, cfg)?),
            UpsamplerKind::Bilinear => Upsampler::Bilinear { factor: cfg.d2s_factor },
        })
    }

    /// Output channel count given the input channel count.
    pub fn out_channels(&self, cin: usize) -> usize {
        match self {
            Upsampler::Dsub(b) => b.cb.out_channels(),
            Upsampler::Eub(b) => b.post.out_channels(),
            Upsampler::Convtp(b) => b.cout,
            Upsampler::Bilinear { .. } => cin,
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Upsampler::Dsub(b) => b.forward(ctx, x),
            Upsampler::Eub(b) => b.forward(ctx, x),
            Upsampler::Convtp(b) => b.forward(ctx, x),
            Upsampler::Bilinear { factor } => ctx.tape.bilinear_upsample(x, *factor),
        }
    }
}
