use mcads_core::gradcheck::uniform;
use mcads_core::kernels::conv::Conv2dSpec;
use mcads_core::model::decoder::{DecoderStage, Head};
use mcads_core::model::encoder::Encoder;
use mcads_core::model::*;
use mcads_core::nn::{BlockConfig, Casab, Ctx, Mode, Rlab, UpsamplerKind};
use mcads_core::params::Role;
use mcads_core::{ParamStore, Registry, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn blocks() -> BlockConfig {
    BlockConfig::default()
}

fn names(reg: &Registry) -> Vec<String> {
    reg.specs().iter().map(|s| s.name.clone()).collect()
}

fn count(build: impl FnOnce(&mut Registry)) -> usize {
    let mut reg = Registry::new();
    build(&mut reg);
    reg.trainable_count()
}

fn params_of(config: &ModelConfig) -> usize {
    Mcads::with_registry(config).unwrap().1.trainable_count()
}

fn tiny_encoder(inner_attention: bool, casab: bool) -> EncoderConfig {
    EncoderConfig {
        stage_filters: vec![4, 6, 6, 8, 8, 8],
        stage_mids: vec![2, 3, 3, 4, 4, 4],
        rsu_depths: vec![5, 4, 4, 3, 3, 3],
        inner_attention,
        casab_per_stage: casab,
        ..EncoderConfig::default()
    }
}

#[test]
fn stage_zero_output_and_downsampled_shapes() {
    let mut reg = Registry::new();
    let enc = Encoder::build(&mut reg, "encoder", &EncoderConfig::default(), &blocks()).unwrap();
    let mut ctx = Ctx::<f32>::meta(&reg);
    let x = ctx.meta_input(&[1, 64, 64, 3]);
    let (y, down) = enc.stages[0].forward_split(&mut ctx, x).unwrap();
    assert_eq!(ctx.shape(y), &[1, 64, 64, 64]);
    assert_eq!(ctx.shape(down), &[1, 32, 32, 64]);
}

#[test]
fn encoder_pyramid_at_full_width() {
    let mut reg = Registry::new();
    let enc = Encoder::build(&mut reg, "encoder", &EncoderConfig::default(), &blocks()).unwrap();
    let mut ctx = Ctx::<f32>::meta(&reg);
    let x = ctx.meta_input(&[1, 256, 256, 3]);
    let feats = enc.forward(&mut ctx, x).unwrap();
    let shapes: Vec<Vec<usize>> = feats.iter().map(|&f| ctx.shape(f).to_vec()).collect();
    let expected: Vec<Vec<usize>> = [(256, 64), (128, 128), (64, 256), (32, 512), (16, 512), (8, 512)]
        .iter()
        .map(|&(s, c)| vec![1, s, s, c])
        .collect();
    assert_eq!(shapes, expected);
}

#[test]
fn encoder_pyramid_at_desk_scale() {
    let config = ModelConfig::desk();
    let (model, reg) = Mcads::with_registry(&config).unwrap();
    let store = ParamStore::<f32>::materialize(reg, 0);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input(uniform(&[1, 64, 64, 3], 0.0, 1.0, &mut rng(1)).cast());
    let feats = model.encoder.forward(&mut ctx, x).unwrap();
    for (i, &f) in feats.iter().enumerate() {
        let s = 64 >> i;
        assert_eq!(ctx.shape(f), &[1, s, s, config.encoder.stage_filters[i]]);
    }
}

#[test]
fn encoder_reports_bad_extents() {
    let mut reg = Registry::new();
    let enc = Encoder::build(&mut reg, "encoder", &EncoderConfig::default(), &blocks()).unwrap();
    let mut ctx = Ctx::<f32>::meta(&reg);
    let x = ctx.meta_input(&[1, 48, 64, 3]);
    assert!(enc.forward(&mut ctx, x).is_err());

    // A depth-7 block pools five times, so 16x16 is too small.
    let mut reg = Registry::new();
    let rsu = Rsu::build(&mut reg, "r", 7, false, (3, 4, 8), false, &blocks()).unwrap();
    let mut ctx = Ctx::<f32>::meta(&reg);
    let x = ctx.meta_input(&[1, 16, 16, 3]);
    assert!(rsu.forward(&mut ctx, x).is_err());
}

#[test]
fn toggles_off_leave_no_attention_entries() {
    let mut reg = Registry::new();
    Encoder::build(&mut reg, "encoder", &tiny_encoder(false, false), &blocks()).unwrap();
    assert!(names(&reg).iter().all(|n| !n.contains("attn") && !n.contains("casab")));
    let mut reg = Registry::new();
    Encoder::build(&mut reg, "encoder", &tiny_encoder(true, true), &blocks()).unwrap();
    assert!(names(&reg).iter().any(|n| n.contains(".attn")));
    assert!(names(&reg).iter().any(|n| n.contains(".casab")));
}

#[test]
fn toggles_change_counts_by_the_added_blocks() {
    let base = tiny_encoder(false, false);
    let encoder_count = |c: &EncoderConfig| count(|r| drop(Encoder::build(r, "encoder", c, &blocks()).unwrap()));
    let plain = encoder_count(&base);

    let mut attn_added = 0;
    let mut casab_added = 0;
    for i in 0..6 {
        let (mid, out) = (base.stage_mids[i], base.stage_filters[i]);
        let junctions = base.rsu_depths[i] - 1;
        attn_added += junctions * count(|r| drop(Rlab::build(r, "x", mid, mid, 1, &blocks()).unwrap()));
        casab_added += count(|r| drop(Casab::build(r, "x", out, out, &blocks()).unwrap()));
    }
    assert_eq!(encoder_count(&tiny_encoder(true, false)), plain + attn_added);
    assert_eq!(encoder_count(&tiny_encoder(false, true)), plain + casab_added);
    assert_eq!(encoder_count(&tiny_encoder(true, true)), plain + attn_added + casab_added);
}

/// Plain residual U-block written directly from primitives, reading
/// weights by name.
struct Reference<'a> {
    store: &'a ParamStore<f64>,
    eps: f64,
}

impl Reference<'_> {
    fn leaf(&self, ctx: &mut Ctx<'_, f64>, name: &str) -> Var {
        ctx.input(self.store.by_name(name).unwrap().value.clone())
    }

    fn cbr(&self, ctx: &mut Ctx<'_, f64>, name: &str, x: Var, dilation: usize) -> Var {
        let w = self.leaf(ctx, &format!("{name}.conv.w"));
        let b = self.leaf(ctx, &format!("{name}.conv.b"));
        let g = self.leaf(ctx, &format!("{name}.bn.gamma"));
        let be = self.leaf(ctx, &format!("{name}.bn.beta"));
        let h = ctx.tape.conv2d(x, w, Some(b), Conv2dSpec::dilated(dilation)).unwrap();
        let (h, _) = ctx.tape.batch_norm_train(h, g, be, self.eps).unwrap();
        ctx.tape.relu(h).unwrap()
    }

    fn rsu(&self, ctx: &mut Ctx<'_, f64>, p: &str, x: Var, depth: usize, dilated: bool) -> Var {
        let hx = self.cbr(ctx, &format!("{p}.in"), x, 1);
        let mut hs = Vec::new();
        let mut cur = hx;
        for i in 1..=depth {
            let dil = if dilated {
                1 << (i - 1)
            } else if i == depth {
                2
            } else {
                1
            };
            if !dilated && i > 1 && i < depth {
                cur = ctx.tape.max_pool(cur, 2).unwrap();
            }
            cur = self.cbr(ctx, &format!("{p}.enc{i}"), cur, dil);
            hs.push(cur);
        }
        let mut d = hs[depth - 1];
        for j in (1..depth).rev() {
            let skip = hs[j - 1];
            let (sh, sw) = (ctx.shape(skip)[1], ctx.shape(skip)[2]);
            if ctx.shape(d)[1] != sh {
                d = ctx.tape.resize_bilinear(d, sh, sw).unwrap();
            }
            let cat = ctx.tape.concat(&[d, skip], 3).unwrap();
            d = self.cbr(ctx, &format!("{p}.dec{j}"), cat, if dilated { 1 << (j - 1) } else { 1 });
        }
        ctx.tape.add(d, hx).unwrap()
    }
}

#[test]
fn plain_block_matches_reference() {
    for (depth, dilated, hw) in [(5, false, 16), (4, true, 8), (3, false, 4)] {
        let mut reg = Registry::new();
        let rsu = Rsu::build(&mut reg, "r", depth, dilated, (3, 4, 5), false, &blocks()).unwrap();
        let store = ParamStore::<f64>::materialize(reg, 7);
        let x = uniform(&[2, hw, hw, 3], -1.0, 1.0, &mut rng(depth as u64));
        let mut ctx = Ctx::new(&store, Mode::Train);
        let xv = ctx.input(x.clone());
        let got = rsu.forward(&mut ctx, xv).unwrap();
        let got = ctx.tape.value(got).clone();

        let reference = Reference { store: &store, eps: blocks().bn_eps };
        let mut ctx = Ctx::new(&store, Mode::Train);
        let xv = ctx.input(x);
        let want = reference.rsu(&mut ctx, "r", xv, depth, dilated);
        let want = ctx.tape.value(want);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6, "depth {depth}: {a} vs {b}");
        }
    }
}

#[test]
fn inner_attention_keeps_concat_width_and_falls_back_to_concat() {
    let mut reg = Registry::new();
    let r = Rlab::build(&mut reg, "a", 3, 3, 1, &blocks()).unwrap();
    assert_eq!(r.out_channels(), 6);
    let mut store = ParamStore::<f64>::materialize(reg, 1);
    for n in ["a.v.w", "a.v.b"] {
        let p = store.by_name_mut(n).unwrap();
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    let skip = uniform(&[1, 4, 4, 3], -1.0, 1.0, &mut rng(2));
    let up = uniform(&[1, 4, 4, 3], -1.0, 1.0, &mut rng(3));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let (s, u) = (ctx.input(skip), ctx.input(up));
    let trace = r.forward_detailed(&mut ctx, s, u).unwrap();
    assert_eq!(ctx.shape(trace.out), &[1, 4, 4, 6]);
    let refined = mcads_core::nn::rlab::rb_iterate(&r.rbs, &mut ctx, s).unwrap();
    let cat = ctx.tape.concat(&[refined, u], 3).unwrap();
    assert_eq!(ctx.tape.value(trace.out), ctx.tape.value(cat));
}

/// Trainable parameters with no gradient entry or a non-finite one, and
/// weights whose gradient is identically zero.
fn reach_audit(store: &ParamStore<f64>, grads: &mcads_core::Gradients<f64>, prefix: &str) -> Vec<String> {
    let by_id: std::collections::HashMap<_, _> = grads.params().collect();
    let mut missing = Vec::new();
    for (id, p) in store.iter() {
        if p.role != Role::Trainable || !p.name.starts_with(prefix) {
            continue;
        }
        match by_id.get(&id) {
            None => missing.push(p.name.clone()),
            Some(g) if !g.all_finite() => missing.push(p.name.clone()),
            Some(g) if p.name.ends_with(".w") && g.max_abs() == 0.0 => missing.push(p.name.clone()),
            _ => {}
        }
    }
    missing
}

// At 64x64 the bridge has four attention tokens; a single token would make
// the query and key gradients vanish identically.
#[test]
fn every_encoder_parameter_is_reached() {
    let config = ModelConfig::micro();
    let (model, reg) = Mcads::with_registry(&config).unwrap();
    let store = ParamStore::<f64>::materialize(reg, 3);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input(uniform(&[2, 64, 64, 1], -1.0, 1.0, &mut rng(4)));
    let feats = model.encoder.forward(&mut ctx, x).unwrap();
    let loss = ctx.tape.sum(feats[5]).unwrap();
    let (tape, _) = ctx.into_parts();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(reach_audit(&store, &grads, "encoder"), Vec::<String>::new());
}

#[test]
fn every_model_parameter_is_reached_by_the_loss() {
    let config = ModelConfig::micro();
    let (model, reg) = Mcads::with_registry(&config).unwrap();
    let store = ParamStore::<f64>::materialize(reg, 5);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input(uniform(&[2, 64, 64, 1], -1.0, 1.0, &mut rng(6)));
    let target = uniform(&[2, 64, 64, 1], 0.0, 1.0, &mut rng(7)).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let out = model.forward(&mut ctx, x).unwrap();
    let (loss, _) = deep_supervision_loss(&mut ctx, &out, &target).unwrap();
    let (tape, _) = ctx.into_parts();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(reach_audit(&store, &grads, ""), Vec::<String>::new());
}

fn stage_registry(kind: UpsamplerKind) -> (DecoderStage, Registry) {
    let mut reg = Registry::new();
    let stage =
        DecoderStage::build(&mut reg, "d", kind, (512, 512, 512), 5, &DecoderConfig::default(), &blocks()).unwrap();
    (stage, reg)
}

#[test]
fn decoder_stage_shape_for_every_upsampler() {
    for kind in [UpsamplerKind::Dsub, UpsamplerKind::Eub, UpsamplerKind::Convtp] {
        let (stage, reg) = stage_registry(kind);
        let mut ctx = Ctx::<f32>::meta(&reg);
        let deeper = ctx.meta_input(&[1, 4, 4, 512]);
        let skip = ctx.meta_input(&[1, 8, 8, 512]);
        let y = stage.forward(&mut ctx, deeper, skip).unwrap();
        assert_eq!(ctx.shape(y), &[1, 8, 8, 512]);
        let wrong = ctx.meta_input(&[1, 16, 16, 512]);
        assert!(stage.forward(&mut ctx, deeper, wrong).is_err());
    }
}

#[test]
fn transpose_stage_has_no_depth_to_space_block() {
    let (_, reg) = stage_registry(UpsamplerKind::Convtp);
    let n = names(&reg);
    assert!(n.iter().any(|s| s.contains("convtp")));
    assert!(n.iter().all(|s| !s.contains("dsub")));
    let (_, reg) = stage_registry(UpsamplerKind::Dsub);
    assert!(names(&reg).iter().any(|s| s.contains("dsub")));
}

#[test]
fn head_shape_and_zero_weights() {
    let mut reg = Registry::new();
    let head = Head::build(&mut reg, "h", 512).unwrap();
    let mut ctx = Ctx::<f32>::meta(&reg);
    let x = ctx.meta_input(&[1, 8, 8, 512]);
    let y = head.forward(&mut ctx, x, (64, 64)).unwrap();
    assert_eq!(ctx.shape(y), &[1, 64, 64, 1]);

    let mut reg = Registry::new();
    let head = Head::build(&mut reg, "h", 3).unwrap();
    let mut store = ParamStore::<f64>::materialize(reg, 0);
    for p in store.iter_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input(uniform(&[1, 4, 4, 3], -5.0, 5.0, &mut rng(8)));
    let y = head.forward(&mut ctx, x, (16, 16)).unwrap();
    assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.5));
}

#[test]
fn six_maps_at_input_resolution() {
    let (model, reg) = Mcads::with_registry(&ModelConfig::desk()).unwrap();
    let store = ParamStore::<f32>::materialize(reg, 9);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input(uniform(&[1, 64, 64, 3], 0.0, 1.0, &mut rng(9)).cast());
    let out = model.forward(&mut ctx, x).unwrap();
    for m in out.maps {
        assert_eq!(ctx.shape(m), &[1, 64, 64, 1]);
        assert!(ctx.tape.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    assert_eq!(out.final_map(), out.maps[5]);
}

#[test]
fn model_rejects_wrong_channel_count() {
    let (model, reg) = Mcads::with_registry(&ModelConfig::micro()).unwrap();
    let mut ctx = Ctx::<f32>::meta(&reg);
    let x = ctx.meta_input(&[1, 32, 32, 3]);
    assert!(model.forward(&mut ctx, x).is_err());
}

#[test]
fn zero_heads_give_six_ln2() {
    let (model, reg) = Mcads::with_registry(&ModelConfig::micro()).unwrap();
    let mut store = ParamStore::<f64>::materialize(reg, 0);
    for p in store.iter_mut().filter(|p| p.name.contains(".head_")) {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.input(uniform(&[1, 32, 32, 1], -1.0, 1.0, &mut rng(10)));
    let target = uniform(&[1, 32, 32, 1], 0.0, 1.0, &mut rng(11)).map(f64::round);
    let out = model.forward(&mut ctx, x).unwrap();
    let (total, terms) = deep_supervision_loss(&mut ctx, &out, &target).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((ctx.tape.value(total).item() - 6.0 * ln2).abs() < 1e-12);
    for t in terms {
        assert!((ctx.tape.value(t).item() - ln2).abs() < 1e-12);
    }
}

#[test]
fn perfect_maps_hit_the_clamp_floor_and_order_does_not_matter() {
    let store = ParamStore::<f64>::materialize(Registry::new(), 0);
    let target = uniform(&[1, 8, 8, 1], 0.0, 1.0, &mut rng(12)).map(f64::round);
    let noisy = uniform(&[1, 8, 8, 1], 0.05, 0.95, &mut rng(13));
    let mut ctx = Ctx::new(&store, Mode::Train);
    let perfect = ctx.input(target.clone());
    let out = SegmentationOutput { maps: [perfect; 6] };
    let (total, _) = deep_supervision_loss(&mut ctx, &out, &target).unwrap();
    let floor = -6.0 * (1.0 - mcads_core::autodiff::BCE_EPS).ln();
    assert!((ctx.tape.value(total).item() - floor).abs() < 1e-15);
    assert!((ctx.tape.value(total).item() - 6e-7).abs() < 1e-9);

    let n = ctx.input(noisy);
    let a = SegmentationOutput { maps: [n, perfect, perfect, perfect, perfect, perfect] };
    let b = SegmentationOutput { maps: [perfect, perfect, perfect, perfect, perfect, n] };
    let (la, _) = deep_supervision_loss(&mut ctx, &a, &target).unwrap();
    let (lb, _) = deep_supervision_loss(&mut ctx, &b, &target).unwrap();
    assert!((ctx.tape.value(la).item() - ctx.tape.value(lb).item()).abs() < 1e-12);
}

#[test]
fn upsampler_mix_orders_parameter_counts() {
    let with_plan = |plan: UpsamplerPlan| {
        let mut c = ModelConfig::paper();
        c.decoder.upsamplers = plan;
        params_of(&c)
    };
    let rows: Vec<usize> = (0..=5).map(|n| with_plan(UpsamplerPlan::dsub_prefix(n))).collect();
    for w in rows.windows(2) {
        assert!(w[0] < w[1], "{rows:?}");
    }
    let default = params_of(&ModelConfig::paper());
    assert_eq!(default, rows[2]);
    assert!(with_plan(UpsamplerPlan::uniform(UpsamplerKind::Eub)) < default);
    assert!(default < with_plan(UpsamplerPlan::uniform(UpsamplerKind::Dsub)));
}

#[test]
fn ablation_rows_grow_monotonically() {
    let row = |up: bool, rlab: bool, casab: bool| {
        let mut c = ModelConfig::paper();
        c.decoder.enable_upsampler = up;
        c.decoder.enable_rlab = rlab;
        c.decoder.enable_casab = casab;
        params_of(&c)
    };
    let rows = [row(false, false, false), row(true, false, false), row(true, true, false), row(true, true, true)];
    for w in rows.windows(2) {
        assert!(w[0] < w[1], "{rows:?}");
    }
    assert_eq!(rows[3], params_of(&ModelConfig::paper()));
}

#[test]
fn summary_accounts_for_every_parameter() {
    let config = ModelConfig::desk();
    let s = summarize(&config, (64, 64)).unwrap();
    let reg = Mcads::with_registry(&config).unwrap().1;
    assert_eq!(s.trainable, reg.trainable_count());
    assert_eq!(s.modules.iter().map(|(_, n)| n).sum::<usize>(), s.trainable);
    assert!(s.modules.iter().any(|(k, _)| k == "encoder.s1"));
    assert!(s.modules.iter().any(|(k, _)| k == "decoder.d1"));
    assert!(s.buffers > 0 && s.macs > 0);
    let bigger = summarize(&config, (128, 128)).unwrap();
    assert!(bigger.macs > 3 * s.macs);
}

#[test]
fn config_round_trips_through_json() {
    let c = ModelConfig::desk();
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), c);
    assert!(serde_json::from_str::<ModelConfig>(r#"{"encoder":{"bogus":1}}"#).is_err());
}
