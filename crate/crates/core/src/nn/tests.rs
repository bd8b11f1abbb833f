use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_module, random_tensor, randomize_params, GradCheckOptions};
use crate::kernels::{act, conv, norm};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn eval<T: Element>(
    store: &ParamStore<T>,
    x: &Tensor<T>,
    f: impl FnOnce(&mut Forward<'_, T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut fw = Forward::new(&mut g, store, false, false);
    let xv = fw.input(x.clone());
    let y = f(&mut fw, xv)?;
    Ok(g.value(y).clone())
}

fn run<T: Element>(
    store: &ParamStore<T>,
    x: &Tensor<T>,
    f: impl FnOnce(&mut Forward<'_, T>, Var) -> Result<Var>,
) -> Tensor<T> {
    eval(store, x, f).unwrap()
}

#[test]
fn ds_conv_parameter_count() {
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(0);
    let ds = DsConv::build(&mut Init::new(&mut store, &mut r), "ds", 16, 32, 3, 1).unwrap();
    assert_eq!(ds.param_count(), 848);
    assert_eq!(store.numel(), 848);
}

#[test]
fn ds_conv_strides() {
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(0);
    let mut init = Init::new(&mut store, &mut r);
    let s1 = DsConv::build(&mut init, "a", 4, 8, 3, 1).unwrap();
    let s2 = DsConv::build(&mut init, "b", 4, 8, 3, 2).unwrap();
    let x = Tensor::<f32>::zeros([1, 4, 12, 10]);
    assert_eq!(
        run(&store, &x, |f, v| s1.forward(f, v)).shape(),
        Shape::new(1, 8, 12, 10)
    );
    assert_eq!(run(&store, &x, |f, v| s2.forward(f, v)).shape(), Shape::new(1, 8, 6, 5));
}

#[test]
fn ghost_parameter_arithmetic() {
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(0);
    let mut init = Init::new(&mut store, &mut r);
    let g = GhostConv::build(&mut init, "g", 64, GhostConvConfig::new(64)).unwrap();
    assert_eq!(g.param_count(), 2336);
    assert_eq!(GhostConvConfig::new(64).param_count(64), 2336);
    let plain = Conv::build(&mut init, "p", 64, 64, 1, 1, 1, false).unwrap();
    assert_eq!(plain.param_count(), 4096);
    let one = GhostConvConfig {
        ratio: 1,
        ..GhostConvConfig::new(64)
    };
    let g1 = GhostConv::build(&mut init, "g1", 64, one).unwrap();
    assert_eq!(g1.param_count(), plain.param_count());
    assert_eq!(store.numel(), 2336 + 4096 + 4096);
}

#[test]
fn ghost_output_channels() {
    for out in [1usize, 7, 64] {
        for ratio in [1usize, 2, 3] {
            let cfg = GhostConvConfig {
                ratio,
                ..GhostConvConfig::new(out)
            };
            let mut store = ParamStore::<f32>::new();
            let mut r = rng(1);
            let built = GhostConv::build(&mut Init::new(&mut store, &mut r), "g", 5, cfg);
            if ratio > out {
                assert!(built.is_err());
                continue;
            }
            let g = built.unwrap();
            let x = Tensor::<f32>::full([2, 5, 4, 4], 0.5);
            assert_eq!(
                run(&store, &x, |f, v| g.forward(f, v)).shape(),
                Shape::new(2, out, 4, 4)
            );
        }
    }
}

#[test]
fn ghost_matches_primitive_composition() {
    let cfg = GhostConvConfig {
        ratio: 3,
        ..GhostConvConfig::new(7)
    };
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(4);
    let g = GhostConv::build(&mut Init::new(&mut store, &mut r), "g", 3, cfg).unwrap();
    let x = random_tensor(Shape::new(1, 3, 5, 6), 1.0, &mut r);
    let y = run(&store, &x, |f, v| g.forward(f, v));

    let p = conv::conv2d_forward(
        &x,
        store.get("g.primary.weight").unwrap(),
        None,
        &ConvSpec::same(1, 1, 1),
    )
    .unwrap();
    // p = 3 primary channels feed 4 cheap channels: sources 0, 1, 2, 0
    let src = crate::kernels::select_channels(&p, &[0, 1, 2, 0]).unwrap();
    let z = conv::conv2d_forward(
        &src,
        store.get("g.cheap.weight").unwrap(),
        None,
        &ConvSpec::same(3, 1, 4),
    )
    .unwrap();
    let expect = crate::kernels::concat_channels(&[&p, &z]).unwrap();
    assert!(y.max_abs_diff(&expect) < 1e-12);
}

fn spp_values(scales: &[usize], x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let store = ParamStore::<f64>::new();
    eval(&store, x, |f, v| spp_flatten(f, v, &SppConfig::new(scales.to_vec())))
}

#[test]
fn spp_fixture() {
    let x = Tensor::<f64>::from_vec([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let y = spp_values(&[1, 2], &x).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 1, 1, 5));
    assert_eq!(y.data(), &[15.0, 5.0, 7.0, 13.0, 15.0]);
    let g = spp_values(&[1], &x).unwrap();
    assert_eq!(g.data(), &[15.0]);
}

#[test]
fn spp_default_positions() {
    assert_eq!(SppConfig::default().scales, vec![1, 3, 6, 8]);
    assert_eq!(SppConfig::default().positions(), 110);
    assert_eq!(SppConfig::new(vec![1, 3, 5, 8]).positions(), 99);
    let x = Tensor::<f64>::zeros([1, 2, 8, 8]);
    assert_eq!(spp_values(&[1, 3, 6, 8], &x).unwrap().shape(), Shape::new(1, 2, 1, 110));
}

#[test]
fn spp_rejects_oversized_scale() {
    let x = Tensor::<f64>::zeros([1, 1, 4, 6]);
    let err = spp_values(&[1, 5], &x).unwrap_err();
    assert!(
        matches!(
            err,
            Error::SppScale {
                scale: 5,
                height: 4,
                width: 6
            }
        ),
        "{err}"
    );
}

fn se_store(channels: usize, seed: u64) -> (ParamStore<f64>, SeBlock) {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(seed);
    let se = SeBlock::build(&mut Init::new(&mut store, &mut r), "se", channels).unwrap();
    (store, se)
}

fn set(store: &mut ParamStore<f64>, name: &str, value: f64) {
    for v in store.get_mut(name).unwrap().data_mut() {
        *v = value;
    }
}

#[test]
fn se_saturated_gates() {
    let (mut store, se) = se_store(6, 2);
    let mut r = rng(2);
    let x = random_tensor(Shape::new(2, 6, 3, 3), 1.0, &mut r);
    set(&mut store, "se.fc2.weight", 0.0);
    set(&mut store, "se.fc2.bias", 3.0);
    assert!(run(&store, &x, |f, v| se.forward(f, v)).max_abs_diff(&x) == 0.0);
    set(&mut store, "se.fc2.bias", -3.0);
    let y = run(&store, &x, |f, v| se.forward(f, v));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

/// Loop-by-loop SE reference.
fn se_reference(store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().dims();
    let w1 = store.get("se.fc1.weight").unwrap();
    let b1 = store.get("se.fc1.bias").unwrap();
    let w2 = store.get("se.fc2.weight").unwrap();
    let b2 = store.get("se.fc2.bias").unwrap();
    let mid = w1.shape().n();
    let mut out = x.clone();
    for b in 0..n {
        let mut pooled = vec![0.0; c];
        for (ch, p) in pooled.iter_mut().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    *p += x.at(b, ch, i, j);
                }
            }
            *p /= (h * w) as f64;
        }
        let hidden: Vec<f64> = (0..mid)
            .map(|m| {
                let s: f64 = (0..c).map(|ch| w1.at(m, ch, 0, 0) * pooled[ch]).sum::<f64>() + b1.data()[m];
                s.max(0.0)
            })
            .collect();
        for ch in 0..c {
            let s: f64 = (0..mid).map(|m| w2.at(ch, m, 0, 0) * hidden[m]).sum::<f64>() + b2.data()[ch];
            let gate = ((s + 3.0).clamp(0.0, 6.0)) / 6.0;
            for i in 0..h * w {
                out.data_mut()[(b * c + ch) * h * w + i] *= gate;
            }
        }
    }
    out
}

#[test]
fn se_matches_scalar_reference() {
    let (mut store, se) = se_store(10, 3);
    randomize_params(&mut store, 0.8, 3);
    let mut r = rng(3);
    let x = random_tensor(Shape::new(2, 10, 4, 5), 1.0, &mut r);
    let y = run(&store, &x, |f, v| se.forward(f, v));
    assert!(y.max_abs_diff(&se_reference(&store, &x)) < 1e-6);
    assert_eq!(se.reduce.out_channels, 3);
}

fn ir_store(cfg: InvertedResidualConfig, seed: u64) -> (ParamStore<f64>, InvertedResidual) {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(seed);
    let ir = InvertedResidual::build(&mut Init::new(&mut store, &mut r), "ir", cfg).unwrap();
    (store, ir)
}

#[test]
fn inverted_residual_zero_projection_is_identity() {
    let cfg = InvertedResidualConfig::new(8, 24, 8, 3, 1, true, Activation::HardSwish);
    let (mut store, ir) = ir_store(cfg, 5);
    set(&mut store, "ir.project.conv.weight", 0.0);
    let mut r = rng(5);
    let x = random_tensor(Shape::new(1, 8, 6, 6), 1.0, &mut r);
    assert_eq!(run(&store, &x, |f, v| ir.forward(f, v)), x);
}

#[test]
fn inverted_residual_stride_two_halves() {
    let cfg = InvertedResidualConfig::new(8, 16, 12, 5, 2, false, Activation::Relu);
    let (store, ir) = ir_store(cfg, 6);
    let x = Tensor::<f64>::full([1, 8, 8, 6], 0.1);
    assert_eq!(
        run(&store, &x, |f, v| ir.forward(f, v)).shape(),
        Shape::new(1, 12, 4, 3)
    );
}

fn cba_reference(store: &ParamStore<f64>, layer: &ConvBnAct, x: &Tensor<f64>) -> Tensor<f64> {
    let p = |s: &str| store.get(&format!("{}.{s}", layer.bn.name)).unwrap();
    let y = conv::conv2d_forward(x, store.get(&layer.conv.weight_name()).unwrap(), None, &layer.conv.spec).unwrap();
    let (y, _, _) = norm::batch_norm_forward(
        &y,
        p("weight"),
        p("bias"),
        p("running_mean"),
        p("running_var"),
        &layer.bn.spec,
        false,
    )
    .unwrap();
    match layer.act {
        Some(a) => act::activation_forward(&y, a),
        None => y,
    }
}

#[test]
fn inverted_residual_matches_primitive_composition() {
    let cfg = InvertedResidualConfig::new(6, 18, 6, 5, 1, true, Activation::HardSwish);
    let (mut store, ir) = ir_store(cfg, 5);
    randomize_params(&mut store, 0.5, 5);
    for (name, e) in store.iter_mut() {
        if name.ends_with("running_var") {
            e.tensor = e.tensor.map(|_| 1.7);
        } else if name.ends_with("running_mean") {
            e.tensor = e.tensor.map(|_| -0.2);
        }
    }
    let mut r = rng(55);
    let x = random_tensor(Shape::new(2, 6, 7, 5), 1.0, &mut r);
    let y = run(&store, &x, |f, v| ir.forward(f, v));

    let h = cba_reference(&store, &ir.expand, &x);
    let h = cba_reference(&store, &ir.depthwise, &h);
    let se = ir.se.as_ref().unwrap();
    let mut se_store = ParamStore::new();
    for part in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"] {
        se_store
            .insert(
                format!("se.{part}"),
                store.get(&format!("{}.{part}", se.name)).unwrap().clone(),
                Role::Trainable,
            )
            .unwrap();
    }
    let h = se_reference(&se_store, &h);
    let mut expect = cba_reference(&store, &ir.project, &h);
    expect.add_assign(&x);
    assert!(y.max_abs_diff(&expect) < 1e-6);
}

#[test]
fn parameter_names_are_unique_and_complete() {
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(0);
    let mut init = Init::new(&mut store, &mut r);
    let cfg = InvertedResidualConfig::new(16, 64, 24, 3, 2, true, Activation::Relu);
    let ir = InvertedResidual::build(&mut init, "b", cfg).unwrap();
    assert_eq!(store.numel(), ir.param_count());
    assert!(Conv::build(
        &mut Init::new(&mut store, &mut r),
        "b.expand.conv",
        1,
        1,
        1,
        1,
        1,
        false
    )
    .is_err());
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

fn assert_grad_ok(check: crate::gradcheck::ModuleCheck) {
    assert!(
        check.report.max_rel_error < 1e-4,
        "{} {:?}",
        check.worst_name(),
        check.report
    );
}

#[test]
fn gradcheck_blocks() {
    let mut r = rng(11);
    let x = random_tensor(Shape::new(2, 4, 6, 6), 1.0, &mut r);

    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(&mut store, &mut r);
    let ds = DsConv::build(&mut init, "ds", 4, 6, 3, 2).unwrap();
    let se = SeBlock::build(&mut init, "se", 4).unwrap();
    let gh = GhostConv::build(
        &mut init,
        "gh",
        4,
        GhostConvConfig {
            ratio: 2,
            ..GhostConvConfig::new(5)
        },
    )
    .unwrap();
    let ir = InvertedResidual::build(
        &mut init,
        "ir",
        InvertedResidualConfig::new(4, 12, 4, 3, 1, true, Activation::HardSwish),
    )
    .unwrap();
    randomize_params(&mut store, 0.5, 12);

    assert_grad_ok(
        check_module(&store, std::slice::from_ref(&x), true, &opts(), |f, v| {
            ds.forward(f, v[0])
        })
        .unwrap(),
    );
    assert_grad_ok(
        check_module(&store, std::slice::from_ref(&x), false, &opts(), |f, v| {
            ds.forward(f, v[0])
        })
        .unwrap(),
    );
    assert_grad_ok(
        check_module(&store, std::slice::from_ref(&x), true, &opts(), |f, v| {
            se.forward(f, v[0])
        })
        .unwrap(),
    );
    assert_grad_ok(
        check_module(&store, std::slice::from_ref(&x), true, &opts(), |f, v| {
            gh.forward(f, v[0])
        })
        .unwrap(),
    );
    assert_grad_ok(
        check_module(&store, std::slice::from_ref(&x), true, &opts(), |f, v| {
            ir.forward(f, v[0])
        })
        .unwrap(),
    );
    assert_grad_ok(
        check_module(&store, &[x], true, &opts(), |f, v| {
            spp_flatten(f, v[0], &SppConfig::new(vec![1, 2, 3]))
        })
        .unwrap(),
    );
}

proptest! {
    #[test]
    fn spp_positions_match_sum_of_squares(scales in prop::collection::vec(1usize..6, 1..5)) {
        let x = Tensor::<f64>::full([1, 2, 6, 7], 1.0);
        let y = spp_values(&scales, &x).unwrap();
        prop_assert_eq!(y.shape().w(), scales.iter().map(|n| n * n).sum::<usize>());
        prop_assert_eq!(y.shape().w(), SppConfig::new(scales).positions());
    }

    #[test]
    fn ghost_is_cheaper_for_ratio_at_least_two(
        cin in 10usize..96,
        out in 2usize..96,
        ratio in 2usize..5,
    ) {
        prop_assume!(ratio <= out);
        let cfg = GhostConvConfig { ratio, ..GhostConvConfig::new(out) };
        prop_assert!(cfg.param_count(cin) < cin * out);
        let one = GhostConvConfig { ratio: 1, ..cfg };
        prop_assert_eq!(one.param_count(cin), cin * out);
    }

    #[test]
    fn se_output_bounded_by_input(seed in 0u64..1000) {
        let (mut store, se) = se_store(5, seed);
        randomize_params(&mut store, 2.0, seed);
        let mut r = rng(seed);
        let x = random_tensor(Shape::new(1, 5, 3, 3), 2.0, &mut r);
        let y = run(&store, &x, |f, v| se.forward(f, v));
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }
}
