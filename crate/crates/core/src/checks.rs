//! The gradient-check suite: every primitive and block at fixed seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::gradcheck::{uniform, CheckOutcome, GradCheck, BLOCK_TOL, PRIMITIVE_TOL};
use crate::kernels::conv::{Conv2dSpec, Padding};
use crate::kernels::pool::{ChannelPool, GlobalPool};
use crate::model::decoder::{DecoderConfig, DecoderStage, Head};
use crate::model::encoder::Rsu;
use crate::model::{deep_supervision_loss, Mcads, ModelConfig};
use crate::nn::{
    BlockConfig, Cam, Casab, ConvBlock, Ctx, Dsub, Eub, ResidualBlock, Rlab, Sam, TransposeUp, UpsamplerKind,
};
use crate::params::{ParamStore, Registry};
use crate::tensor::Tensor;

/// Values with magnitude in `[0.1, 1)` and random sign, away from kinks.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = uniform(shape, 0.1, 1.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reports produced by [`run_suite`], in a fixed order.
pub struct Suite {
    pub gc: GradCheck,
    rng: ChaCha8Rng,
    pub outcomes: Vec<CheckOutcome>,
}

type Forward<'a> = dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + 'a;

impl Suite {
    pub fn new(gc: GradCheck) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(gc.seed.wrapping_add(0x5eed));
        Self { gc, rng, outcomes: Vec::new() }
    }

    fn prim(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: &Forward<'_>) -> Result<()> {
        let mut store = crate::gradcheck::empty_store();
        let out = self.gc.check(name, PRIMITIVE_TOL, &mut store, &inputs, f)?;
        self.outcomes.push(out);
        Ok(())
    }

    fn block<B>(
        &mut self,
        name: &str,
        build: impl FnOnce(&mut Registry) -> Result<B>,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&B, &mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let mut reg = Registry::new();
        let b = build(&mut reg)?;
        let mut store = ParamStore::<f64>::materialize(reg, self.gc.seed.wrapping_add(self.outcomes.len() as u64));
        let out = self.gc.check(name, BLOCK_TOL, &mut store, &inputs, |ctx, v| f(&b, ctx, v))?;
        self.outcomes.push(out);
        Ok(())
    }

    pub fn primitives(&mut self) -> Result<()> {
        let r = &mut self.rng.clone();
        self.prim(
            "conv2d",
            vec![
                uniform(&[2, 5, 5, 3], -1.0, 1.0, r),
                uniform(&[3, 3, 3, 4], -1.0, 1.0, r),
                uniform(&[4], -1.0, 1.0, r),
            ],
            &|c, v| c.tape.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::same()),
        )?;
        self.prim(
            "conv2d_strided_valid",
            vec![uniform(&[1, 7, 6, 2], -1.0, 1.0, r), uniform(&[3, 3, 2, 3], -1.0, 1.0, r)],
            &|c, v| {
                let spec = Conv2dSpec { stride: 2, padding: Padding::Valid, ..Conv2dSpec::default() };
                c.tape.conv2d(v[0], v[1], None, spec)
            },
        )?;
        self.prim(
            "conv2d_dilated",
            vec![uniform(&[1, 6, 6, 2], -1.0, 1.0, r), uniform(&[3, 3, 2, 2], -1.0, 1.0, r)],
            &|c, v| c.tape.conv2d(v[0], v[1], None, Conv2dSpec::dilated(2)),
        )?;
        self.prim(
            "conv2d_depthwise",
            vec![
                uniform(&[2, 4, 4, 3], -1.0, 1.0, r),
                uniform(&[3, 3, 1, 3], -1.0, 1.0, r),
                uniform(&[3], -1.0, 1.0, r),
            ],
            &|c, v| c.tape.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::depthwise(3)),
        )?;
        self.prim(
            "conv2d_transpose",
            vec![
                uniform(&[1, 3, 3, 2], -1.0, 1.0, r),
                uniform(&[3, 3, 3, 2], -1.0, 1.0, r),
                uniform(&[3], -1.0, 1.0, r),
            ],
            &|c, v| c.tape.conv2d_transpose(v[0], v[1], Some(v[2]), 2),
        )?;
        self.prim(
            "batch_norm_train",
            vec![uniform(&[2, 4, 4, 3], -1.0, 1.0, r), uniform(&[3], 0.5, 1.5, r), uniform(&[3], -0.5, 0.5, r)],
            &|c, v| Ok(c.tape.batch_norm_train(v[0], v[1], v[2], 1e-3)?.0),
        )?;
        self.prim(
            "batch_norm_infer",
            vec![uniform(&[2, 3, 3, 2], -1.0, 1.0, r), uniform(&[2], 0.5, 1.5, r), uniform(&[2], -0.5, 0.5, r)],
            &|c, v| c.tape.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3], 1e-3),
        )?;
        self.prim("relu", vec![off_kink(&[1, 3, 3, 2], r)], &|c, v| c.tape.relu(v[0]))?;
        self.prim("leaky_relu", vec![off_kink(&[1, 3, 3, 2], r)], &|c, v| c.tape.leaky_relu(v[0], 0.01))?;
        self.prim("sigmoid", vec![uniform(&[1, 3, 3, 2], -3.0, 3.0, r)], &|c, v| c.tape.sigmoid(v[0]))?;
        self.prim("swish", vec![uniform(&[1, 3, 3, 2], -3.0, 3.0, r)], &|c, v| c.tape.swish(v[0]))?;
        self.prim("softmax", vec![uniform(&[2, 3, 5], -2.0, 2.0, r)], &|c, v| c.tape.softmax(v[0], 2))?;
        self.prim("pool_global_avg", vec![uniform(&[2, 3, 3, 4], -1.0, 1.0, r)], &|c, v| {
            c.tape.pool_global(GlobalPool::Avg, v[0])
        })?;
        self.prim("pool_global_max", vec![uniform(&[2, 3, 3, 4], -1.0, 1.0, r)], &|c, v| {
            c.tape.pool_global(GlobalPool::Max, v[0])
        })?;
        for (name, kind) in [
            ("pool_channel_mean", ChannelPool::Mean),
            ("pool_channel_max", ChannelPool::Max),
            ("pool_channel_min", ChannelPool::Min),
            ("pool_channel_sum", ChannelPool::Sum),
        ] {
            self.prim(name, vec![uniform(&[1, 3, 3, 5], -1.0, 1.0, r)], &move |c, v| c.tape.pool_channel(kind, v[0]))?;
        }
        self.prim("max_pool", vec![uniform(&[1, 4, 4, 2], -1.0, 1.0, r)], &|c, v| c.tape.max_pool(v[0], 2))?;
        self.prim("avg_pool", vec![uniform(&[1, 4, 6, 2], -1.0, 1.0, r)], &|c, v| c.tape.avg_pool(v[0], 2))?;
        self.prim("bilinear_upsample", vec![uniform(&[1, 3, 4, 2], -1.0, 1.0, r)], &|c, v| {
            c.tape.bilinear_upsample(v[0], 2)
        })?;
        self.prim("resize_bilinear", vec![uniform(&[1, 5, 3, 2], -1.0, 1.0, r)], &|c, v| {
            c.tape.resize_bilinear(v[0], 7, 8)
        })?;
        self.prim("depth_to_space", vec![uniform(&[1, 2, 3, 8], -1.0, 1.0, r)], &|c, v| {
            c.tape.depth_to_space(v[0], 2)
        })?;
        self.prim("space_to_depth", vec![uniform(&[1, 4, 6, 2], -1.0, 1.0, r)], &|c, v| {
            c.tape.space_to_depth(v[0], 2)
        })?;
        self.prim(
            "dense",
            vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[4, 5], -1.0, 1.0, r), uniform(&[5], -1.0, 1.0, r)],
            &|c, v| c.tape.dense(v[0], v[1], Some(v[2])),
        )?;
        self.prim("matmul", vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[2, 4, 5], -1.0, 1.0, r)], &|c, v| {
            c.tape.matmul(v[0], v[1])
        })?;
        self.prim("matmul_bt", vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[2, 5, 4], -1.0, 1.0, r)], &|c, v| {
            c.tape.matmul_bt(v[0], v[1])
        })?;
        self.prim(
            "concat",
            vec![uniform(&[1, 2, 2, 3], -1.0, 1.0, r), uniform(&[1, 2, 2, 5], -1.0, 1.0, r)],
            &|c, v| c.tape.concat(&[v[0], v[1]], 3),
        )?;
        self.prim(
            "add_broadcast",
            vec![uniform(&[2, 3, 3, 4], -1.0, 1.0, r), uniform(&[2, 1, 1, 4], -1.0, 1.0, r)],
            &|c, v| c.tape.add(v[0], v[1]),
        )?;
        self.prim("sub", vec![uniform(&[2, 3, 3, 1], -1.0, 1.0, r), uniform(&[2, 3, 3, 1], -1.0, 1.0, r)], &|c, v| {
            c.tape.sub(v[0], v[1])
        })?;
        self.prim(
            "mul_broadcast",
            vec![uniform(&[2, 3, 3, 4], -1.0, 1.0, r), uniform(&[2, 3, 3, 1], -1.0, 1.0, r)],
            &|c, v| c.tape.mul(v[0], v[1]),
        )?;
        self.prim("scale", vec![uniform(&[3, 4], -1.0, 1.0, r)], &|c, v| c.tape.scale(v[0], -0.7))?;
        self.prim("sum", vec![uniform(&[3, 4], -1.0, 1.0, r)], &|c, v| c.tape.sum(v[0]))?;
        self.prim("mean", vec![uniform(&[3, 4], -1.0, 1.0, r)], &|c, v| c.tape.mean(v[0]))?;
        let target = Tensor::new(vec![1, 3, 3, 1], (0..9).map(|i| (i % 2) as f64).collect())?;
        self.prim("bce_loss", vec![uniform(&[1, 3, 3, 1], 0.05, 0.95, r)], &move |c, v| {
            c.tape.bce_loss(v[0], &target)
        })?;
        Ok(())
    }

    pub fn blocks(&mut self) -> Result<()> {
        let cfg = BlockConfig::default();
        let r = &mut self.rng.clone();
        let x = |shape: &[usize], r: &mut ChaCha8Rng| uniform(shape, -1.0, 1.0, r);

        self.block(
            "cb",
            |g| ConvBlock::build(g, "cb", 3, 4, &cfg),
            vec![x(&[2, 4, 4, 3], r)],
            |b, c, v| b.forward(c, v[0]),
        )?;
        self.block(
            "dsub",
            |g| Dsub::build(g, "dsub", 2, 3, &cfg),
            vec![x(&[2, 3, 3, 2], r)],
            |b, c, v| b.forward(c, v[0]),
        )?;
        self.block(
            "eub",
            |g| Eub::build(g, "eub", 2, 3, &cfg),
            vec![x(&[2, 3, 3, 2], r)],
            |b, c, v| b.forward(c, v[0]),
        )?;
        self.block(
            "convtp",
            |g| TransposeUp::build(g, "up", 2, 3, &cfg),
            vec![x(&[1, 3, 3, 2], r)],
            |b, c, v| b.forward(c, v[0]),
        )?;
        self.block(
            "cam",
            |g| Cam::build(g, "cam", 4, &BlockConfig { cam_reduction: 2, ..cfg.clone() }),
            vec![x(&[2, 3, 3, 4], r)],
            |b, c, v| b.forward(c, v[0]),
        )?;
        self.block("sam", |g| Sam::build(g, "sam"), vec![x(&[2, 5, 5, 3], r)], |b, c, v| b.forward(c, v[0]))?;
        self.block(
            "casab",
            |g| Casab::build(g, "casab", 3, 4, &cfg),
            vec![x(&[2, 4, 4, 3], r)],
            |b, c, v| b.forward(c, v[0]),
        )?;
        self.block(
            "rb",
            |g| (1..=2).map(|i| ResidualBlock::build(g, &format!("rb{i}"), 3, &cfg)).collect::<Result<Vec<_>>>(),
            vec![x(&[2, 3, 3, 3], r)],
            |b, c, v| crate::nn::rlab::rb_iterate(b, c, v[0]),
        )?;
        self.block(
            "rlab",
            |g| Rlab::build(g, "rlab", 2, 3, 2, &cfg),
            vec![x(&[2, 4, 4, 2], r), x(&[2, 4, 4, 3], r)],
            |b, c, v| b.forward(c, v[0], v[1]),
        )?;
        let capped = BlockConfig { attention_token_cap: Some(4), ..cfg.clone() };
        self.block(
            "rlab_pooled",
            |g| Rlab::build(g, "rlab", 2, 2, 1, &capped),
            vec![x(&[2, 4, 4, 2], r), x(&[2, 4, 4, 2], r)],
            |b, c, v| b.forward(c, v[0], v[1]),
        )?;
        self.block(
            "rsu",
            |g| Rsu::build(g, "rsu", 3, false, (2, 2, 3), true, &cfg),
            vec![x(&[2, 8, 8, 2], r)],
            |b, c, v| b.forward(c, v[0]),
        )?;
        self.block(
            "rsu_dilated",
            |g| Rsu::build(g, "rsu", 3, true, (2, 2, 2), false, &cfg),
            vec![x(&[2, 4, 4, 2], r)],
            |b, c, v| b.forward(c, v[0]),
        )?;
        self.block(
            "inner_attention",
            |g| Rlab::build(g, "attn", 2, 2, 1, &cfg),
            vec![x(&[2, 4, 4, 2], r), x(&[2, 4, 4, 2], r)],
            |b, c, v| b.forward(c, v[0], v[1]),
        )?;
        let dcfg = DecoderConfig::default();
        for (name, kind) in [
            ("stage_dsub", UpsamplerKind::Dsub),
            ("stage_eub", UpsamplerKind::Eub),
            ("stage_convtp", UpsamplerKind::Convtp),
        ] {
            let dcfg = dcfg.clone();
            let cfg = cfg.clone();
            self.block(
                name,
                move |g| DecoderStage::build(g, "d", kind, (3, 2, 2), 1, &dcfg, &cfg),
                vec![x(&[2, 4, 4, 3], r), x(&[2, 8, 8, 2], r)],
                |b, c, v| b.forward(c, v[0], v[1]),
            )?;
        }
        self.block(
            "head",
            |g| Head::build(g, "head", 3),
            vec![x(&[2, 4, 4, 3], r)],
            |b, c, v| b.forward(c, v[0], (8, 8)),
        )?;
        self.micro_model()
    }

    /// Whole-network loss on the micro configuration.
    pub fn micro_model(&mut self) -> Result<()> {
        let config = ModelConfig::micro();
        let image = uniform(&[2, 32, 32, 1], 0.0, 1.0, &mut self.rng);
        let mask = Tensor::new(
            vec![2, 32, 32, 1],
            (0..2 * 32 * 32).map(|i| if (i / 32) % 32 < 16 { 1.0 } else { 0.0 }).collect(),
        )?;
        let (model, reg) = Mcads::with_registry(&config)?;
        let mut store = ParamStore::<f64>::materialize(reg, self.gc.seed);
        let gc = GradCheck { coords_per_tensor: 2, param_tensors: Some(96), ..self.gc.clone() };
        let out = gc.check("micro_model", BLOCK_TOL, &mut store, &[image], |c, v| {
            let out = model.forward(c, v[0])?;
            Ok(deep_supervision_loss(c, &out, &mask)?.0)
        })?;
        self.outcomes.push(out);
        Ok(())
    }
}

/// Runs every check and returns the outcomes in a fixed order.
pub fn run_suite(gc: GradCheck) -> Result<Vec<CheckOutcome>> {
    let mut s = Suite::new(gc);
    s.primitives()?;
    s.blocks()?;
    Ok(s.outcomes)
}
