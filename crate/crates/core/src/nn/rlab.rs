//! Residual linear attention block and its iterated residual refinement.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::Conv2dSpec;
use crate::nn::blocks::{expect_channels, ConvBlock};
use crate::nn::layers::{BatchNorm, Conv, Dense};
use crate::nn::{dims, BlockConfig, Ctx};
use crate::params::Registry;
use crate::tensor::Element;

/// One refinement step: `BN(LR(x + Conv1x1(Conv3x3(x))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv3: Conv,
    pub conv1: Conv,
    pub bn: BatchNorm,
    slope: f64,
}

impl ResidualBlock {
    pub fn build(reg: &mut Registry, name: &str, channels: usize, cfg: &BlockConfig) -> Result<Self> {
        Ok(Self {
            conv3: Conv::build(reg, &format!("{name}.conv3"), channels, channels, 3, Conv2dSpec::same())?,
            conv1: Conv::build(reg, &format!("{name}.conv1"), channels, channels, 1, Conv2dSpec::same())?,
            bn: BatchNorm::build(reg, &format!("{name}.bn"), channels, cfg.bn_eps, cfg.bn_momentum)?,
            slope: cfg.leaky_slope,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        expect_channels(ctx, x, self.conv3.cin, "residual block")?;
        let h = self.conv3.forward(ctx, x)?;
        let h = self.conv1.forward(ctx, h)?;
        let h = ctx.tape.add(x, h)?;
        let h = ctx.tape.leaky_relu(h, self.slope)?;
        self.bn.forward(ctx, h)
    }
}

/// Applies `blocks` in sequence, each with its own parameters.
pub fn rb_iterate<T: Element>(blocks: &[ResidualBlock], ctx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(ctx, x)?;
    }
    Ok(x)
}

/// Output of [`Rlab::forward_detailed`].
#[derive(Clone, Copy, Debug)]
pub struct RlabTrace {
    pub out: Var,
    /// `concat(RB(skip), up)`.
    pub fused: Var,
    /// Attention weights, `(N, T, T)` with rows on the last axis.
    pub attention: Var,
    /// Spatial pooling factor applied before attention (1 when unpooled).
    pub pool: usize,
}

/// `x = concat(RB_N(skip), up)`; `out = x + Attn(CB(x))` with single-head
/// scaled dot-product attention over one token per pixel.
#[derive(Clone, Debug)]
pub struct Rlab {
    pub rbs: Vec<ResidualBlock>,
    pub cb: ConvBlock,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    skip_channels: usize,
    up_channels: usize,
    key_dim: usize,
    token_cap: Option<usize>,
}

impl Rlab {
    pub fn build(
        reg: &mut Registry,
        name: &str,
        skip_channels: usize,
        up_channels: usize,
        iterations: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::arg(format!("{name}: residual iterations must be at least 1")));
        }
        let c = skip_channels + up_channels;
        let key_dim = cfg.rlab_key_dim.unwrap_or(c);
        if key_dim == 0 {
            return Err(Error::arg(format!("{name}: key width must be positive")));
        }
        let rbs = (1..=iterations)
            .map(|i| ResidualBlock::build(reg, &format!("{name}.rb{i}"), skip_channels, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rbs,
            cb: ConvBlock::build(reg, &format!("{name}.cb"), c, c, cfg)?,
            q: Dense::build(reg, &format!("{name}.q"), c, key_dim)?,
            k: Dense::build(reg, &format!("{name}.k"), c, key_dim)?,
            v: Dense::build(reg, &format!("{name}.v"), c, c)?,
            skip_channels,
            up_channels,
            key_dim,
            token_cap: cfg.attention_token_cap,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.skip_channels + self.up_channels
    }

    pub fn iterations(&self) -> usize {
        self.rbs.len()
    }

    /// Smallest factor dividing both extents that brings the token count
    /// within the cap; falls back to the largest common divisor.
    pub fn pool_factor(&self, h: usize, w: usize) -> usize {
        let Some(cap) = self.token_cap else { return 1 };
        if h * w <= cap {
            return 1;
        }
        let mut best = 1;
        for p in 2..=h.min(w) {
            if h.is_multiple_of(p) && w.is_multiple_of(p) {
                best = p;
                if (h / p) * (w / p) <= cap {
                    return p;
                }
            }
        }
        best
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, skip: Var, up: Var) -> Result<Var> {
        Ok(self.forward_detailed(ctx, skip, up)?.out)
    }

    pub fn forward_detailed<T: Element>(&self, ctx: &mut Ctx<'_, T>, skip: Var, up: Var) -> Result<RlabTrace> {
        let (n, h, w, _) = dims(ctx, skip)?;
        let (nu, hu, wu, _) = dims(ctx, up)?;
        if (n, h, w) != (nu, hu, wu) {
            return Err(Error::shape(format!(
                "rlab: skip {:?} and up {:?} differ spatially",
                ctx.shape(skip),
                ctx.shape(up)
            )));
        }
        expect_channels(ctx, up, self.up_channels, "rlab up input")?;
        let refined = rb_iterate(&self.rbs, ctx, skip)?;
        let fused = ctx.tape.concat(&[refined, up], 3)?;
        let r = self.cb.forward(ctx, fused)?;

        let pool = self.pool_factor(h, w);
        let r = if pool > 1 { ctx.tape.avg_pool(r, pool)? } else { r };
        let (hp, wp, c) = (h / pool, w / pool, self.out_channels());
        let tokens = ctx.tape.reshape(r, &[n, hp * wp, c])?;
        let q = self.q.forward(ctx, tokens)?;
        let k = self.k.forward(ctx, tokens)?;
        let v = self.v.forward(ctx, tokens)?;
        let scores = ctx.tape.matmul_bt(q, k)?;
        let scores = ctx.tape.scale(scores, 1.0 / (self.key_dim as f64).sqrt())?;
        let attention = ctx.tape.softmax(scores, 2)?;
        let a = ctx.tape.matmul(attention, v)?;
        let a = ctx.tape.reshape(a, &[n, hp, wp, c])?;
        let a = if pool > 1 { ctx.tape.resize_bilinear(a, h, w)? } else { a };
        let out = ctx.tape.add(fused, a)?;
        Ok(RlabTrace { out, fused, attention, pool })
    }
}
