//! Channel and spatial attention gates.

use crate::autodiff::Var;
use crate::error::Result;
use crate::kernels::conv::Conv2dSpec;
use crate::kernels::pool::{ChannelPool, GlobalPool};
use crate::nn::blocks::{expect_channels, ConvBlock};
use crate::nn::layers::{Conv, Dense};
use crate::nn::{BlockConfig, Ctx};
use crate::params::Registry;
use crate::tensor::Element;

/// Channel attention: `x * sigmoid(FC(swish(FC(GAP(x) + GMP(x)))))`.
#[derive(Clone, Debug)]
pub struct Cam {
    pub fc1: Dense,
    pub fc2: Dense,
    channels: usize,
}

impl Cam {
    pub fn build(reg: &mut Registry, name: &str, channels: usize, cfg: &BlockConfig) -> Result<Self> {
        let hidden = (channels / cfg.cam_reduction.max(1)).max(1);
        Ok(Self {
            fc1: Dense::build(reg, &format!("{name}.fc1"), channels, hidden)?,
            fc2: Dense::build(reg, &format!("{name}.fc2"), hidden, channels)?,
            channels,
        })
    }

    /// Per-channel gate of shape `(N, 1, 1, C)`.
    pub fn gate<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.channels, "cam")?;
        let avg = ctx.tape.pool_global(GlobalPool::Avg, x)?;
        let max = ctx.tape.pool_global(GlobalPool::Max, x)?;
        let s = ctx.tape.add(avg, max)?;
        let h = self.fc1.forward(ctx, s)?;
        let h = ctx.tape.swish(h)?;
        let h = self.fc2.forward(ctx, h)?;
        ctx.tape.sigmoid(h)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = self.gate(ctx, x)?;
        ctx.tape.mul(x, g)
    }
}

/// Spatial attention. The channel-wise mean, max, min and sum maps pass
/// through a depthwise 7x7 convolution, swish, and a 1x1 reduction to a
/// single sigmoid gate per pixel.
#[derive(Clone, Debug)]
pub struct Sam {
    pub dw: Conv,
    pub pw: Conv,
}

impl Sam {
    pub fn build(reg: &mut Registry, name: &str) -> Result<Self> {
        Ok(Self {
            dw: Conv::build(reg, &format!("{name}.dw7"), 4, 4, 7, Conv2dSpec::depthwise(4))?,
            pw: Conv::build(reg, &format!("{name}.pw"), 4, 1, 1, Conv2dSpec::same())?,
        })
    }

    /// The four pooled maps concatenated on the channel axis.
    pub fn pooled<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let maps = [ChannelPool::Mean, ChannelPool::Max, ChannelPool::Min, ChannelPool::Sum]
            .into_iter()
            .map(|k| ctx.tape.pool_channel(k, x))
            .collect::<Result<Vec<_>>>()?;
        ctx.tape.concat(&maps, 3)
    }

    /// Per-pixel gate of shape `(N, H, W, 1)`.
    pub fn gate<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let p = self.pooled(ctx, x)?;
        let h = self.dw.forward(ctx, p)?;
        let h = ctx.tape.swish(h)?;
        let h = self.pw.forward(ctx, h)?;
        ctx.tape.sigmoid(h)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = self.gate(ctx, x)?;
        ctx.tape.mul(x, g)
    }
}

/// `CAM(x') + SAM(x')` with `x' = CB(x)`.
#[derive(Clone, Debug)]
pub struct Casab {
    pub refine: ConvBlock,
    pub cam: Cam,
    pub sam: Sam,
}

impl Casab {
    pub fn build(reg: &mut Registry, name: &str, cin: usize, cout: usize, cfg: &BlockConfig) -> Result<Self> {
        Ok(Self {
            refine: ConvBlock::build(reg, &format!("{name}.refine"), cin, cout, cfg)?,
            cam: Cam::build(reg, &format!("{name}.cam"), cout, cfg)?,
            sam: Sam::build(reg, &format!("{name}.sam"))?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.refine.out_channels()
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let r = self.refine.forward(ctx, x)?;
        let c = self.cam.forward(ctx, r)?;
        let s = self.sam.forward(ctx, r)?;
        ctx.tape.add(c, s)
    }
}
