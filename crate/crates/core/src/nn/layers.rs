use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::conv::Conv2dSpec;
use crate::nn::{Ctx, Mode, StatUpdate};
use crate::params::{Init, ParamId, Registry};
use crate::tensor::Element;

/// Convolution with bias. Kernel `(k, k, c_in / groups, c_out)`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn build(reg: &mut Registry, name: &str, cin: usize, cout: usize, k: usize, spec: Conv2dSpec) -> Result<Self> {
        if spec.groups == 0 || !cin.is_multiple_of(spec.groups) || !cout.is_multiple_of(spec.groups) {
            return Err(Error::arg(format!("{name}: groups {} incompatible with {cin}->{cout}", spec.groups)));
        }
        let cin_g = cin / spec.groups;
        let w = reg.trainable(format!("{name}.w"), &[k, k, cin_g, cout], Init::HeUniform { fan_in: k * k * cin_g })?;
        let b = reg.trainable(format!("{name}.b"), &[cout], Init::Zeros)?;
        Ok(Self { w, b, spec, cin, cout })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.w), ctx.param(self.b));
        ctx.tape.conv2d(x, w, Some(b), self.spec)
    }
}

/// Transposed convolution with bias. Kernel `(k, k, c_out, c_in)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn build(reg: &mut Registry, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let w = reg.trainable(format!("{name}.w"), &[k, k, cout, cin], Init::HeUniform { fan_in: k * k * cin })?;
        let b = reg.trainable(format!("{name}.b"), &[cout], Init::Zeros)?;
        Ok(Self { w, b, stride })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.w), ctx.param(self.b));
        ctx.tape.conv2d_transpose(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn build(reg: &mut Registry, name: &str, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        Ok(Self {
            gamma: reg.trainable(format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: reg.trainable(format!("{name}.beta"), &[channels], Init::Zeros)?,
            running_mean: reg.buffer(format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: reg.buffer(format!("{name}.running_var"), &[channels], Init::Ones)?,
            eps,
            momentum,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        match ctx.mode() {
            Mode::Train => {
                let (y, batch) = ctx.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                if let Some((batch_mean, batch_var)) = batch {
                    ctx.push_update(StatUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        momentum: self.momentum,
                        batch_mean,
                        batch_var,
                    });
                }
                Ok(y)
            }
            Mode::Infer => {
                let (mean, var) = (ctx.buffer(self.running_mean), ctx.buffer(self.running_var));
                ctx.tape.batch_norm_infer(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }
}

/// Affine map over the trailing axis, weight `(in, out)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn build(reg: &mut Registry, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            w: reg.trainable(format!("{name}.w"), &[din, dout], Init::HeUniform { fan_in: din })?,
            b: reg.trainable(format!("{name}.b"), &[dout], Init::Zeros)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.w), ctx.param(self.b));
        ctx.tape.dense(x, w, Some(b))
    }
}
