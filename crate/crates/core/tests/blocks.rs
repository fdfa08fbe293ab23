use mcads_core::gradcheck::uniform;
use mcads_core::kernels::activation::sigmoid;
use mcads_core::nn::rlab::rb_iterate;
use mcads_core::nn::*;
use mcads_core::{ParamStore, Registry, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg() -> BlockConfig {
    BlockConfig::default()
}

fn set(store: &mut ParamStore<f64>, name: &str, value: f64) {
    let p = store.by_name_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
    p.value = Tensor::full(p.value.shape().to_vec(), value);
}

/// Runs `f` once in the given mode and returns the values of its outputs.
fn eval<const K: usize>(
    store: &ParamStore<f64>,
    mode: Mode,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Ctx<'_, f64>, &[mcads_core::Var]) -> [mcads_core::Var; K],
) -> [Tensor<f64>; K] {
    let mut ctx = Ctx::new(store, mode);
    let vars: Vec<_> = inputs.iter().map(|t| ctx.input(t.clone())).collect();
    let outs = f(&mut ctx, &vars);
    outs.map(|v| ctx.tape.value(v).clone())
}

fn trainable(reg: &Registry) -> usize {
    reg.specs().iter().filter(|s| s.role == mcads_core::params::Role::Trainable).map(|s| s.numel()).sum()
}

#[test]
fn conv_block_shape_and_hand_count() {
    let mut reg = Registry::new();
    let cb = ConvBlock::build(&mut reg, "cb", 16, 32, &cfg()).unwrap();
    // depthwise 3x3 + bias, pointwise 16x32 + bias, two BN affine pairs.
    assert_eq!(trainable(&reg), (9 * 16 + 16) + (16 * 32 + 32) + 2 * 16 + 2 * 32);
    let store = ParamStore::<f64>::materialize(reg, 0);
    let x = uniform(&[1, 8, 8, 16], -1.0, 1.0, &mut rng(1));
    let [y] = eval(&store, Mode::Train, &[x], |c, v| [cb.forward(c, v[0]).unwrap()]);
    assert_eq!(y.shape(), &[1, 8, 8, 32]);
}

#[test]
fn conv_block_rejects_channel_mismatch() {
    let mut reg = Registry::new();
    let cb = ConvBlock::build(&mut reg, "cb", 4, 4, &cfg()).unwrap();
    let store = ParamStore::<f64>::materialize(reg, 0);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input(Tensor::zeros(vec![1, 4, 4, 3]));
    assert!(cb.forward(&mut ctx, x).is_err());
}

#[test]
fn dsub_doubles_and_rearranges_to_input_width() {
    let mut reg = Registry::new();
    let d = Dsub::build(&mut reg, "d", 64, 24, &cfg()).unwrap();
    assert_eq!(reg.spec(d.expand.w).shape, vec![3, 3, 64, 256]);
    let store = ParamStore::<f64>::materialize(reg, 0);
    let x = uniform(&[1, 4, 4, 64], -1.0, 1.0, &mut rng(2));
    let [mid, y] =
        eval(&store, Mode::Train, &[x], |c, v| [d.rearranged(c, v[0]).unwrap(), d.forward(c, v[0]).unwrap()]);
    assert_eq!(mid.shape(), &[1, 8, 8, 64]);
    assert_eq!(y.shape(), &[1, 8, 8, 24]);
}

#[test]
fn eub_doubles_and_is_lighter_than_dsub() {
    let (mut re, mut rd) = (Registry::new(), Registry::new());
    let e = Eub::build(&mut re, "e", 64, 32, &cfg()).unwrap();
    Dsub::build(&mut rd, "d", 64, 32, &cfg()).unwrap();
    assert!(trainable(&re) < trainable(&rd));
    let store = ParamStore::<f64>::materialize(re, 0);
    let x = uniform(&[1, 4, 4, 64], -1.0, 1.0, &mut rng(3));
    let [y] = eval(&store, Mode::Train, &[x], |c, v| [e.forward(c, v[0]).unwrap()]);
    assert_eq!(y.shape(), &[1, 8, 8, 32]);
}

#[test]
fn transpose_upsampler_shape() {
    let mut reg = Registry::new();
    let t = TransposeUp::build(&mut reg, "t", 3, 5, &cfg()).unwrap();
    let store = ParamStore::<f64>::materialize(reg, 0);
    let x = uniform(&[1, 2, 2, 3], -1.0, 1.0, &mut rng(4));
    let [y] = eval(&store, Mode::Train, &[x], |c, v| [t.forward(c, v[0]).unwrap()]);
    assert_eq!(y.shape(), &[1, 4, 4, 5]);
}

#[test]
fn cam_annihilates_zero_and_halves_with_zero_weights() {
    let mut reg = Registry::new();
    let cam = Cam::build(&mut reg, "cam", 8, &cfg()).unwrap();
    assert_eq!(reg.spec(cam.fc1.w).shape, vec![8, 1]);
    let mut store = ParamStore::<f64>::materialize(reg, 0);
    let [y] = eval(&store, Mode::Train, &[Tensor::zeros(vec![1, 3, 3, 8])], |c, v| [cam.forward(c, v[0]).unwrap()]);
    assert!(y.data().iter().all(|&v| v == 0.0));
    for n in ["cam.fc1.w", "cam.fc1.b", "cam.fc2.w", "cam.fc2.b"] {
        set(&mut store, n, 0.0);
    }
    let x = uniform(&[2, 3, 3, 8], -2.0, 2.0, &mut rng(5));
    let [y] = eval(&store, Mode::Train, std::slice::from_ref(&x), |c, v| [cam.forward(c, v[0]).unwrap()]);
    for (a, b) in y.data().iter().zip(x.data()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn sam_pooled_maps_and_zero_input() {
    let mut reg = Registry::new();
    let sam = Sam::build(&mut reg, "sam").unwrap();
    let store = ParamStore::<f64>::materialize(reg, 0);
    let x = uniform(&[1, 4, 4, 1], -1.0, 1.0, &mut rng(6));
    let [p] = eval(&store, Mode::Train, std::slice::from_ref(&x), |c, v| [sam.pooled(c, v[0]).unwrap()]);
    assert_eq!(p.shape(), &[1, 4, 4, 4]);
    for (i, &v) in x.data().iter().enumerate() {
        assert_eq!(&p.data()[4 * i..4 * i + 4], &[v, v, v, v]);
    }
    let [y] = eval(&store, Mode::Train, &[Tensor::zeros(vec![1, 4, 4, 3])], |c, v| [sam.forward(c, v[0]).unwrap()]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gates_lie_strictly_inside_unit_interval() {
    let mut reg = Registry::new();
    let cam = Cam::build(&mut reg, "cam", 6, &cfg()).unwrap();
    let sam = Sam::build(&mut reg, "sam").unwrap();
    let store = ParamStore::<f64>::materialize(reg, 7);
    for seed in 0..5 {
        let x = uniform(&[2, 5, 5, 6], -3.0, 3.0, &mut rng(seed));
        let [gc, gs, yc, ys] = eval(&store, Mode::Train, std::slice::from_ref(&x), |c, v| {
            [
                cam.gate(c, v[0]).unwrap(),
                sam.gate(c, v[0]).unwrap(),
                cam.forward(c, v[0]).unwrap(),
                sam.forward(c, v[0]).unwrap(),
            ]
        });
        assert_eq!(gc.shape(), &[2, 1, 1, 6]);
        assert_eq!(gs.shape(), &[2, 5, 5, 1]);
        assert!(gc.data().iter().chain(gs.data()).all(|&g| g > 0.0 && g < 1.0));
        for ((a, b), c) in yc.data().iter().zip(ys.data()).zip(x.data()) {
            assert!(a.abs() <= c.abs() && b.abs() <= c.abs());
        }
    }
}

#[test]
fn casab_shape_and_sam_branch_isolation() {
    let mut reg = Registry::new();
    let casab = Casab::build(&mut reg, "casab", 5, 5, &cfg()).unwrap();
    let mut store = ParamStore::<f64>::materialize(reg, 8);
    let x = uniform(&[1, 8, 8, 5], -1.0, 1.0, &mut rng(9));
    // A large negative output bias closes the channel gate.
    set(&mut store, "casab.cam.fc2.b", -40.0);
    let [y, sam_only] = eval(&store, Mode::Train, &[x], |c, v| {
        let r = casab.refine.forward(c, v[0]).unwrap();
        [casab.forward(c, v[0]).unwrap(), casab.sam.forward(c, r).unwrap()]
    });
    assert_eq!(y.shape(), &[1, 8, 8, 5]);
    for (a, b) in y.data().iter().zip(sam_only.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn residual_block_with_zero_convs_is_bn_of_leaky_relu() {
    let mut reg = Registry::new();
    let rb = ResidualBlock::build(&mut reg, "rb", 3, &cfg()).unwrap();
    let mut store = ParamStore::<f64>::materialize(reg, 0);
    for n in ["rb.conv3.w", "rb.conv3.b", "rb.conv1.w", "rb.conv1.b"] {
        set(&mut store, n, 0.0);
    }
    let x = uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut rng(10));
    let [y, reference] = eval(&store, Mode::Train, &[x], |c, v| {
        let g = c.param(rb.bn.gamma);
        let b = c.param(rb.bn.beta);
        let lr = c.tape.leaky_relu(v[0], 0.01).unwrap();
        let r = c.tape.batch_norm_train(lr, g, b, 1e-3).unwrap().0;
        [rb.forward(c, v[0]).unwrap(), r]
    });
    assert_eq!(y, reference);
}

#[test]
fn residual_iterations_scale_linearly() {
    let count = |n: usize| {
        let mut reg = Registry::new();
        for i in 0..n {
            ResidualBlock::build(&mut reg, &format!("rb{i}"), 7, &cfg()).unwrap();
        }
        trainable(&reg) as i64
    };
    assert_eq!(count(3) - count(2), count(2) - count(1));
    let mut reg = Registry::new();
    let blocks: Vec<_> =
        (0..3).map(|i| ResidualBlock::build(&mut reg, &format!("rb{i}"), 2, &cfg()).unwrap()).collect();
    let store = ParamStore::<f64>::materialize(reg, 0);
    let x = uniform(&[1, 4, 4, 2], -1.0, 1.0, &mut rng(11));
    let [y] = eval(&store, Mode::Train, &[x], |c, v| [rb_iterate(&blocks, c, v[0]).unwrap()]);
    assert_eq!(y.shape(), &[1, 4, 4, 2]);
}

#[test]
fn rlab_shapes_rows_and_residual_identity() {
    let mut reg = Registry::new();
    let rlab = Rlab::build(&mut reg, "rlab", 64, 64, 2, &cfg()).unwrap();
    let mut store = ParamStore::<f64>::materialize(reg, 12);
    let mut r = rng(13);
    let skip = uniform(&[1, 8, 8, 64], -1.0, 1.0, &mut r);
    let up = uniform(&[1, 8, 8, 64], -1.0, 1.0, &mut r);
    let run = |store: &ParamStore<f64>| {
        let mut ctx = Ctx::new(store, Mode::Train);
        let (s, u) = (ctx.input(skip.clone()), ctx.input(up.clone()));
        let t = rlab.forward_detailed(&mut ctx, s, u).unwrap();
        let v = |x| ctx.tape.value(x).clone();
        (v(t.out), v(t.fused), v(t.attention))
    };
    let (out, fused, attn) = run(&store);
    assert_eq!(out.shape(), &[1, 8, 8, 128]);
    assert_eq!(attn.shape(), &[1, 64, 64]);
    for row in attn.data().chunks(64) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    set(&mut store, "rlab.v.w", 0.0);
    set(&mut store, "rlab.v.b", 0.0);
    let (out, fused2, _) = run(&store);
    assert_eq!(out, fused2);
    assert_eq!(fused, fused2);
}

#[test]
fn rlab_token_cap_pools_and_restores() {
    let c = BlockConfig { attention_token_cap: Some(16), ..cfg() };
    let mut reg = Registry::new();
    let rlab = Rlab::build(&mut reg, "rlab", 2, 3, 1, &c).unwrap();
    assert_eq!(rlab.pool_factor(8, 8), 2);
    assert_eq!(rlab.pool_factor(4, 4), 1);
    assert_eq!(rlab.pool_factor(6, 10), 2);
    let store = ParamStore::<f64>::materialize(reg, 0);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let s = ctx.input(Tensor::zeros(vec![1, 8, 8, 2]));
    let u = ctx.input(Tensor::zeros(vec![1, 8, 8, 3]));
    let t = rlab.forward_detailed(&mut ctx, s, u).unwrap();
    assert_eq!(t.pool, 2);
    assert_eq!(ctx.shape(t.attention), &[1, 16, 16]);
    assert_eq!(ctx.shape(t.out), &[1, 8, 8, 5]);
}

#[test]
fn rlab_rejects_spatial_mismatch() {
    let mut reg = Registry::new();
    let rlab = Rlab::build(&mut reg, "rlab", 2, 2, 1, &cfg()).unwrap();
    let store = ParamStore::<f64>::materialize(reg, 0);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let s = ctx.input(Tensor::zeros(vec![1, 8, 8, 2]));
    let u = ctx.input(Tensor::zeros(vec![1, 4, 4, 2]));
    assert!(rlab.forward(&mut ctx, s, u).is_err());
}

#[test]
fn infer_mode_uses_running_statistics() {
    let mut reg = Registry::new();
    let bn = BatchNorm::build(&mut reg, "bn", 2, 1e-3, 0.99).unwrap();
    let mut store = ParamStore::<f64>::materialize(reg, 0);
    store.by_name_mut("bn.running_mean").unwrap().value = Tensor::from_f64(vec![2], &[1.0, -1.0]).unwrap();
    store.by_name_mut("bn.running_var").unwrap().value = Tensor::from_f64(vec![2], &[4.0, 0.25]).unwrap();
    let x = Tensor::from_f64(vec![1, 1, 1, 2], &[3.0, 0.0]).unwrap();
    let [y] = eval(&store, Mode::Infer, &[x], |c, v| [bn.forward(c, v[0]).unwrap()]);
    assert!((y.data()[0] - 2.0 / (4.0f64 + 1e-3).sqrt()).abs() < 1e-12);
    assert!((y.data()[1] - 1.0 / (0.25f64 + 1e-3).sqrt()).abs() < 1e-12);
}

#[test]
fn running_statistics_follow_momentum() {
    let mut reg = Registry::new();
    let bn = BatchNorm::build(&mut reg, "bn", 1, 1e-3, 0.9).unwrap();
    let mut store = ParamStore::<f64>::materialize(reg, 0);
    let x = Tensor::from_f64(vec![4, 1, 1, 1], &[1.0, 2.0, 3.0, 6.0]).unwrap();
    let updates = {
        let mut ctx = Ctx::new(&store, Mode::Train);
        let v = ctx.input(x);
        bn.forward(&mut ctx, v).unwrap();
        ctx.into_parts().1
    };
    apply_stat_updates(&mut store, &updates);
    // Batch mean 3, biased variance 3.5.
    assert!((store.by_name("bn.running_mean").unwrap().value.item() - 0.3).abs() < 1e-12);
    assert!((store.by_name("bn.running_var").unwrap().value.item() - (0.9 + 0.35)).abs() < 1e-12);
}

#[test]
fn sigmoid_is_symmetric() {
    for x in [-30.0, -1.0, 0.0, 2.0, 50.0] {
        assert!((sigmoid(x) + sigmoid(-x) - 1.0f64).abs() < 1e-15);
    }
}
