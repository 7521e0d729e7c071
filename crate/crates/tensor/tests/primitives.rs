use drsi_tensor::ops;
use drsi_tensor::{
    Activation, BnMode, Ctx, GradCheck, GradTarget, Initializer, Param, PoolKind, Result, Shape, Tensor, Var,
};

type OpFn = dyn Fn(&mut Ctx<f64>, &Var<f64>, &[Var<f64>]) -> Result<Var<f64>>;

/// A primitive under test with its own trainable operands.
struct Op {
    params: Vec<Param<f64>>,
    f: Box<OpFn>,
}

impl GradTarget for Op {
    fn forward(&self, cx: &mut Ctx<f64>, x: &Var<f64>) -> Result<Var<f64>> {
        let ps: Vec<Var<f64>> = self.params.iter().map(|p| cx.param(p)).collect();
        (self.f)(cx, x, &ps)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.params.iter_mut().for_each(f);
    }
}

fn op(params: Vec<Param<f64>>, f: impl Fn(&mut Ctx<f64>, &Var<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'static) -> Op {
    Op { params, f: Box::new(f) }
}

fn uniform_param(name: &str, dims: &[usize], seed: u64, lo: f64, hi: f64) -> Param<f64> {
    let shape = drsi_tensor::shape_for_dims(dims).unwrap();
    Param::new(name, dims, Tensor::uniform(shape, seed, lo, hi), true).unwrap()
}

const TRIALS: u64 = 5;

fn check(name: &str, shape: Shape, lo: f64, hi: f64, make: impl Fn(u64) -> Op) {
    for trial in 0..TRIALS {
        let mut target = make(trial);
        let x = Tensor::uniform(shape, 1000 + trial, lo, hi);
        let rep = GradCheck { seed: trial, ..GradCheck::default() }.run(&mut target, &x).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{name} trial {trial}: {rep:?}");
    }
}

#[test]
fn conv2d_gradients() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
        check("conv2d", Shape::new(2, 3, 5, 5), -1.0, 1.0, |t| {
            let init = Initializer::new(t);
            op(vec![init.kaiming("w", &[4, 3, k, k]), uniform_param("b", &[4], t, -0.5, 0.5)], move |cx, x, p| {
                cx.conv2d(x, &p[0], Some(&p[1]), stride, pad)
            })
        });
    }
}

#[test]
fn depthwise_gradients() {
    for (stride, pad, k) in [(1, 1, 3), (1, 3, 7), (2, 1, 3)] {
        check("depthwise", Shape::new(2, 3, 6, 6), -1.0, 1.0, |t| {
            let init = Initializer::new(t);
            op(vec![init.kaiming("w", &[3, 1, k, k]), uniform_param("b", &[3], t, -0.5, 0.5)], move |cx, x, p| {
                cx.depthwise_conv2d(x, &p[0], Some(&p[1]), stride, pad)
            })
        });
    }
}

#[test]
fn batch_norm_gradients() {
    for mode in [BnMode::Eval, BnMode::Train] {
        check("batch_norm", Shape::new(2, 3, 3, 3), -2.0, 2.0, |t| {
            let rm = Param::new("rm", &[3], Tensor::uniform(Shape::new(3, 1, 1, 1), t, -0.5, 0.5), false).unwrap();
            let rv = Param::new("rv", &[3], Tensor::uniform(Shape::new(3, 1, 1, 1), t + 9, 0.5, 2.0), false).unwrap();
            op(
                vec![uniform_param("g", &[3], t, 0.5, 1.5), uniform_param("b", &[3], t + 1, -0.5, 0.5), rm, rv],
                move |cx, x, p| Ok(cx.batch_norm(x, &p[0], &p[1], &p[2], &p[3], 1e-3, mode)?.0),
            )
        });
    }
}

#[test]
fn layer_norm_gradients() {
    check("layer_norm", Shape::new(2, 4, 3, 3), -2.0, 2.0, |t| {
        op(vec![uniform_param("g", &[4], t, 0.5, 1.5), uniform_param("b", &[4], t + 1, -0.5, 0.5)], |cx, x, p| {
            cx.layer_norm(x, &p[0], &p[1], 1e-6)
        })
    });
}

#[test]
fn activation_gradients() {
    for kind in [Activation::Silu, Activation::Gelu, Activation::Sigmoid, Activation::Relu] {
        check("activation", Shape::new(2, 3, 4, 4), -4.0, 4.0, |_| op(vec![], move |cx, x, _| cx.act(x, kind)));
    }
}

#[test]
fn elementwise_gradients() {
    let s = Shape::new(2, 3, 4, 4);
    check("add", s, -1.0, 1.0, |t| {
        op(vec![uniform_param("y", &[2, 3, 4, 4], t, -1.0, 1.0)], |cx, x, p| cx.add(x, &p[0]))
    });
    check("mul", s, -1.0, 1.0, |t| {
        op(vec![uniform_param("y", &[2, 3, 4, 4], t, -1.0, 1.0)], |cx, x, p| cx.mul(x, &p[0]))
    });
    check("mul self", s, -1.0, 1.0, |_| op(vec![], |cx, x, _| cx.mul(x, x)));
    check("scale", s, -1.0, 1.0, |_| op(vec![], |cx, x, _| cx.scale(x, -1.0 / 3.0)));
    check("broadcast channel", s, -1.0, 1.0, |t| {
        op(vec![uniform_param("g", &[2, 3, 1, 1], t, -1.0, 1.0)], |cx, x, p| cx.broadcast_mul(x, &p[0]))
    });
    check("broadcast spatial", s, -1.0, 1.0, |t| {
        op(vec![uniform_param("g", &[2, 1, 4, 4], t, -1.0, 1.0)], |cx, x, p| cx.broadcast_mul(x, &p[0]))
    });
}

#[test]
fn layout_gradients() {
    let s = Shape::new(2, 4, 4, 4);
    check("concat", s, -1.0, 1.0, |t| {
        op(vec![uniform_param("y", &[2, 2, 4, 4], t, -1.0, 1.0)], |cx, x, p| {
            let a = cx.act(x, Activation::Silu)?;
            cx.concat(&[&a, &p[0], x])
        })
    });
    check("narrow", s, -1.0, 1.0, |_| op(vec![], |cx, x, _| cx.narrow(x, 1, 2)));
    check("split", s, -1.0, 1.0, |_| {
        op(vec![], |cx, x, _| {
            let parts = cx.split(x, &[1, 3])?;
            let a = cx.scale(&parts[0], 2.0)?;
            let b = cx.narrow(&parts[1], 0, 1)?;
            cx.mul(&a, &b)
        })
    });
    check("upsample", s, -1.0, 1.0, |_| op(vec![], |cx, x, _| cx.upsample2x(x)));
    for (k, stride, pad) in [(3, 1, 1), (5, 1, 2), (2, 2, 0)] {
        check("max_pool", s, -1.0, 1.0, |_| op(vec![], move |cx, x, _| cx.max_pool(x, k, stride, pad)));
    }
    check("space_to_depth", s, -1.0, 1.0, |_| op(vec![], |cx, x, _| cx.space_to_depth(x)));
    for kind in [PoolKind::Mean, PoolKind::Max] {
        check("global_pool", s, -1.0, 1.0, |_| op(vec![], move |cx, x, _| cx.global_pool(x, kind)));
        check("channel_pool", s, -1.0, 1.0, |_| op(vec![], move |cx, x, _| cx.channel_pool(x, kind)));
    }
    check("sum", s, -1.0, 1.0, |_| op(vec![], |cx, x, _| cx.sum(x)));
}

#[test]
fn composite_matches_finite_differences() {
    check("composite", Shape::new(2, 3, 4, 4), -1.0, 1.0, |t| {
        let init = Initializer::new(t);
        op(
            vec![
                init.kaiming("w1", &[6, 3, 3, 3]),
                init.kaiming("dw", &[6, 1, 3, 3]),
                uniform_param("g", &[6], t, 0.5, 1.5),
                uniform_param("b", &[6], t + 1, -0.5, 0.5),
            ],
            |cx, x, p| {
                let y = cx.conv2d(x, &p[0], None, 1, 1)?;
                let y = cx.layer_norm(&y, &p[2], &p[3], 1e-6)?;
                let y = cx.act(&y, Activation::Gelu)?;
                let z = cx.depthwise_conv2d(&y, &p[1], None, 1, 1)?;
                let gate = cx.global_pool(&z, PoolKind::Mean)?;
                let gate = cx.act(&gate, Activation::Sigmoid)?;
                let z = cx.broadcast_mul(&z, &gate)?;
                let parts = cx.split(&z, &[3, 3])?;
                let m = cx.mul(&parts[0], &parts[1])?;
                let m = cx.max_pool(&m, 3, 1, 1)?;
                let d = cx.space_to_depth(&m)?;
                let u = cx.upsample2x(&d)?;
                let c = cx.concat(&[&u, x])?;
                cx.add(&c, &c)
            },
        )
    });
}

#[test]
fn conv2d_with_block_diagonal_weights_equals_depthwise() {
    for case in 0..10u64 {
        let c = 2 + (case as usize % 3);
        let k = [1, 3, 5][case as usize % 3];
        let stride = 1 + (case as usize % 2);
        let pad = k / 2;
        let x = Tensor::<f32>::uniform(Shape::new(1 + case as usize % 2, c, 7, 6), case, -1.0, 1.0);
        let dw = Tensor::<f32>::uniform(Shape::new(c, 1, k, k), case + 100, -1.0, 1.0);
        let full = Tensor::from_fn(Shape::new(c, c, k, k), |o, i, y, xx| if o == i { dw.at(o, 0, y, xx) } else { 0.0 });
        let a = ops::conv2d(&x, &full, None, stride, pad, None).unwrap();
        let b = ops::depthwise_conv2d(&x, &dw, None, stride, pad, None).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6, "case {case}");
    }
}

fn forward_backward(threads: usize) -> (Tensor<f32>, Tensor<f32>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let init = Initializer::new(11);
        let w: Param<f32> = init.kaiming("w", &[32, 16, 3, 3]);
        let dw: Param<f32> = init.kaiming("dw", &[32, 1, 7, 7]);
        let mut cx = Ctx::record();
        let x = cx.input(Tensor::uniform(Shape::new(2, 16, 33, 29), 4, -1.0, 1.0));
        let (wv, dwv) = (cx.param(&w), cx.param(&dw));
        let y = cx.conv2d(&x, &wv, None, 1, 1).unwrap();
        let y = cx.act(&y, Activation::Silu).unwrap();
        let y = cx.depthwise_conv2d(&y, &dwv, None, 1, 3).unwrap();
        let out = y.tensor().unwrap();
        let g = cx.backward(&y, &Tensor::uniform(y.shape(), 5, -1.0, 1.0)).unwrap();
        (out, g.param("w").unwrap())
    })
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (y1, g1) = forward_backward(1);
    for threads in [2, 4] {
        let (y, g) = forward_backward(threads);
        assert!(y.bit_eq(&y1));
        assert!(g.bit_eq(&g1));
    }
    let (y, g) = forward_backward(1);
    assert!(y.bit_eq(&y1) && g.bit_eq(&g1));
}

#[test]
fn zero_input_zero_bias_convolutions_are_zero() {
    let x = Tensor::<f32>::zeros(Shape::new(1, 4, 6, 6));
    let w = Tensor::uniform(Shape::new(5, 4, 3, 3), 1, -1.0, 1.0);
    let b = Tensor::zeros(Shape::new(5, 1, 1, 1));
    assert!(ops::conv2d(&x, &w, Some(&b), 1, 1, None).unwrap().data().iter().all(|&v| v == 0.0));
    let dw = Tensor::uniform(Shape::new(4, 1, 3, 3), 1, -1.0, 1.0);
    assert!(ops::depthwise_conv2d(&x, &dw, None, 1, 1, None).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn instrumented_macs_match_closed_form() {
    let counter = std::sync::Arc::new(drsi_tensor::MacCounter::new());
    let init = Initializer::new(0);
    let w: Param<f32> = init.kaiming("w", &[8, 4, 3, 3]);
    let dw: Param<f32> = init.kaiming("dw", &[8, 1, 5, 5]);
    let run = |cx: &mut Ctx<f32>, x: Var<f32>| -> Var<f32> {
        let wv = cx.param(&w);
        let dwv = cx.param(&dw);
        cx.scoped("block", |cx| {
            let y = cx.conv2d(&x, &wv, None, 2, 1)?;
            let y = cx.act(&y, Activation::Gelu)?;
            let y = cx.depthwise_conv2d(&y, &dwv, None, 1, 2)?;
            cx.add(&y, &y)
        })
        .unwrap()
    };
    let mut eager = Ctx::eager().with_counter(counter.clone());
    run(&mut eager, Var::from(Tensor::uniform(Shape::new(1, 4, 16, 16), 0, -1.0, 1.0)));
    let mut sym = Ctx::symbolic();
    run(&mut sym, Var::symbolic(Shape::new(1, 4, 16, 16)));
    let expected = 8 * 4 * 9 * 64 + 512 + 8 * 25 * 64 + 512;
    assert_eq!(counter.get(), expected);
    assert_eq!(sym.probe().total_macs(), expected);
    assert_eq!(sym.probe().total_params(), 8 * 4 * 9 + 8 * 25);
}
