//! Central finite-difference checks of every differentiable operation, in
//! f64, against the analytic backward rules.

use cogload_core::autodiff::{BnMode, Graph, Tensor, Var};
use cogload_core::model::{self, Fusion, Inputs, Mode, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;
const COMPOSED_TOL: f64 = 1e-3;
const INSTANCES: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Values bounded away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Largest `|analytic - numeric| / max(|numeric|_inf, 1e-6)` over all
/// inputs, where `build` maps the input leaves to a scalar loss.
fn max_rel_error(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    rel_error(inputs, build, None)
}

/// As [`max_rel_error`], but where the central difference disagrees and
/// the two one-sided differences disagree with each other by more than
/// `kink_tol` (a ReLU or max-pool switch inside `[x - h, x + h]`), the
/// analytic value is compared with the nearer one-sided difference.
fn rel_error(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var, kink_tol: Option<f64>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let f0 = g.value(loss).data()[0];
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |perturbed: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let mut sides = vec![(0.0, 0.0); t.numel()];
        for (i, side) in sides.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            *side = (eval(&plus), eval(&minus));
        }
        let central: Vec<f64> = sides.iter().map(|(p, m)| (p - m) / (2.0 * H)).collect();
        let scale = central.iter().fold(1e-6f64, |m, v| m.max(v.abs()));
        for ((a, c), (p, m)) in analytic[k].iter().zip(&central).zip(&sides) {
            let mut err = (a - c).abs() / scale;
            if let Some(tol) = kink_tol {
                let (right, left) = ((p - f0) / H, (f0 - m) / H);
                if err >= tol && (right - left).abs() / scale > tol {
                    err = (a - right).abs().min((a - left).abs()) / scale;
                }
            }
            worst = worst.max(err);
        }
    }
    worst
}

/// `sum(y * r)` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let r = random(&mut rng, g.shape(y));
    let r = g.constant(r);
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

fn check_op(name: &str, tol: f64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        worst = worst.max(max_rel_error(&inputs, &build));
    }
    assert!(worst < tol, "{name}: relative error {worst:e} >= {tol:e}");
}

pub fn fc_gradients() {
    check_op(
        "fc",
        OP_TOL,
        |r| vec![random(r, &[3, 4]), random(r, &[4, 2]), random(r, &[2])],
        |g, v| {
            let y = g.fc(v[0], v[1], v[2]).unwrap();
            project(g, y, 1)
        },
    );
    check_op(
        "fc 1x2->1",
        OP_TOL,
        |r| vec![random(r, &[1, 2]), random(r, &[2, 1]), random(r, &[1])],
        |g, v| {
            let y = g.fc(v[0], v[1], v[2]).unwrap();
            g.sum(y)
        },
    );
}

pub fn conv1d_gradients_and_loop_oracle() {
    check_op(
        "conv1d",
        OP_TOL,
        |r| vec![random(r, &[2, 3, 9]), random(r, &[2, 3, 3])],
        |g, v| {
            let y = g.conv1d(v[0], v[1]).unwrap();
            project(g, y, 2)
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 3, 9]);
    let k = random(&mut rng, &[4, 3, 3]);
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv1d(xv, kv).unwrap();
    let yd = g.value(y).data();
    for n in 0..2 {
        for o in 0..4 {
            for t in 0..7 {
                let mut acc = 0.0;
                for c in 0..3 {
                    for j in 0..3 {
                        acc += x.data()[(n * 3 + c) * 9 + t + j] * k.data()[(o * 3 + c) * 3 + j];
                    }
                }
                assert!((yd[(n * 4 + o) * 7 + t] - acc).abs() < 1e-6);
            }
        }
    }
}

pub fn conv2d_gradients_and_loop_oracle() {
    check_op(
        "conv2d",
        OP_TOL,
        |r| vec![random(r, &[2, 2, 4, 5]), random(r, &[3, 2, 3, 3])],
        |g, v| {
            let y = g.conv2d_same(v[0], v[1]).unwrap();
            project(g, y, 3)
        },
    );
    // 4x4 input, 3x3 averaging kernel
    let x: Vec<f64> = (0..16).map(|i| (i * i % 7) as f64).collect();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::from_f64(&[1, 1, 4, 4], &x).unwrap());
    let kv = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = g.conv2d_same(xv, kv).unwrap();
    for r in 0..4i32 {
        for c in 0..4i32 {
            let mut acc = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if (0..4).contains(&rr) && (0..4).contains(&cc) {
                        acc += x[(rr * 4 + cc) as usize] / 9.0;
                    }
                }
            }
            assert!((g.value(y).data()[(r * 4 + c) as usize] - acc).abs() < 1e-6);
        }
    }
}

pub fn batchnorm_gradients() {
    check_op(
        "batchnorm train",
        COMPOSED_TOL,
        |r| vec![random(r, &[8, 3, 2]), random(r, &[3]), random(r, &[3])],
        |g, v| {
            let (y, _) = g.batchnorm(v[0], v[1], v[2], BnMode::Train).unwrap();
            project(g, y, 4)
        },
    );
    check_op(
        "batchnorm train, no spatial axis",
        COMPOSED_TOL,
        |r| vec![random(r, &[8, 3]), random(r, &[3]), random(r, &[3])],
        |g, v| {
            let (y, _) = g.batchnorm(v[0], v[1], v[2], BnMode::Train).unwrap();
            project(g, y, 5)
        },
    );
    let mean = [0.3, -0.2, 0.1];
    let var = [0.5, 1.5, 2.0];
    check_op(
        "batchnorm eval",
        OP_TOL,
        |r| vec![random(r, &[4, 3, 3]), random(r, &[3]), random(r, &[3])],
        |g, v| {
            let (y, _) = g
                .batchnorm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })
                .unwrap();
            project(g, y, 6)
        },
    );
}

pub fn pooling_gradients() {
    check_op(
        "maxpool1d",
        OP_TOL,
        |r| vec![random(r, &[2, 2, 7])],
        |g, v| {
            let y = g.maxpool1d(v[0]).unwrap();
            project(g, y, 7)
        },
    );
    check_op(
        "maxpool2d",
        OP_TOL,
        |r| vec![random(r, &[2, 2, 5, 4])],
        |g, v| {
            let y = g.maxpool2d(v[0]).unwrap();
            project(g, y, 8)
        },
    );
    check_op(
        "global_avg_pool",
        OP_TOL,
        |r| vec![random(r, &[2, 3, 2, 3])],
        |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            project(g, y, 9)
        },
    );
}

pub fn activation_and_elementwise_gradients() {
    check_op(
        "relu",
        OP_TOL,
        |r| vec![away_from_zero(r, &[10])],
        |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 10)
        },
    );
    check_op(
        "tanh",
        OP_TOL,
        |r| vec![random(r, &[10])],
        |g, v| {
            let y = g.tanh(v[0]);
            project(g, y, 11)
        },
    );
    check_op(
        "sigmoid",
        OP_TOL,
        |r| vec![random(r, &[10])],
        |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 12)
        },
    );
    check_op(
        "mul/add/sub/one_minus/scale",
        OP_TOL,
        |r| vec![random(r, &[6]), random(r, &[6])],
        |g, v| {
            let m = g.mul(v[0], v[1]).unwrap();
            let a = g.add(m, v[0]).unwrap();
            let s = g.sub(a, v[1]).unwrap();
            let o = g.one_minus(s);
            let y = g.scale(o, 1.7);
            project(g, y, 13)
        },
    );
    check_op(
        "concat + mean",
        OP_TOL,
        |r| vec![random(r, &[3, 2]), random(r, &[3, 4])],
        |g, v| {
            let c = g.concat_features(v[0], v[1]).unwrap();
            let sq = g.mul(c, c).unwrap();
            g.mean(sq)
        },
    );
}

pub fn dropout_gradient_with_fixed_mask() {
    check_op(
        "dropout",
        OP_TOL,
        |r| vec![random(r, &[4, 6])],
        |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let y = g.dropout(v[0], 0.5, Some(&mut rng)).unwrap();
            project(g, y, 14)
        },
    );
}

pub fn softmax_cross_entropy_gradients() {
    check_op(
        "softmax_cross_entropy",
        OP_TOL,
        |r| vec![random(r, &[5, 2]).cast::<f64>()],
        |g, v| g.softmax_cross_entropy(v[0], &[0, 1, 1, 0, 1]).unwrap(),
    );
    // gradient = (softmax - one_hot) / N
    let mut g = Graph::<f64>::new();
    let l = g.param(Tensor::from_f64(&[1, 2], &[0.3, -0.4]).unwrap());
    let ce = g.softmax_cross_entropy(l, &[1]).unwrap();
    g.backward(ce).unwrap();
    let p0 = 1.0 / (1.0 + (-0.7f64).exp());
    let grad = g.grad(l).unwrap();
    assert!((grad[0] - p0).abs() < 1e-12 && (grad[1] - (1.0 - p0 - 1.0)).abs() < 1e-12);
}

pub fn orthogonality_loss_gradients() {
    for (n, labels) in [(3, vec![0, 1, 0]), (4, vec![0, 1, 1, 0])] {
        for pair_mean in [false, true] {
            let labels = labels.clone();
            check_op(
                "orthogonality_loss",
                OP_TOL,
                |r| vec![random(r, &[n, 5])],
                move |g, v| model::orthogonality_loss(g, v[0], &labels, pair_mean).unwrap().loss,
            );
        }
    }
}

pub fn gated_fusion_gradients() {
    check_op(
        "fusion",
        OP_TOL,
        |r| {
            let mut a = random(r, &[2, 4]);
            a.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.4 * *v);
            vec![random(r, &[2, 4]), random(r, &[2, 4]), a]
        },
        |g, v| {
            let y = model::fuse_with_gate(g, v[0], v[1], v[2]).unwrap();
            project(g, y, 15)
        },
    );
}

fn tiny_config(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        widths: [2, 3, 3],
        raw_kernels: [3, 3, 2],
        topo_kernel: 3,
        classifier_hidden: 3,
        dropout: 0.5,
        fusion,
    }
}

/// Gradient of the full training loss (both encoders, gate, head, L_CE and
/// L_OC) with respect to every parameter.
fn composed_model_error(seed: u64, fusion: Fusion) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::new(tiny_config(fusion), &mut rng).unwrap();
    let raw = random(&mut rng, &[4, 4, 40]);
    let topo = random(&mut rng, &[4, 15, 8, 8]);
    let labels = [0, 1, 1, 0];
    let params: Vec<Tensor<f64>> = model.params().ids().map(|id| model.params().get(id).clone()).collect();
    let build = |g: &mut Graph<f64>, vars: &[Var]| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let mut mode = Mode::Train(&mut drop_rng);
        let inputs = Inputs {
            raw: Some(&raw),
            topo: Some(&topo),
        };
        let fwd = model.forward(g, vars, inputs, &mut mode).unwrap();
        model::loss_on_graph(g, &fwd, &labels, 0.4, false).unwrap().0
    };
    rel_error(&params, &build, Some(COMPOSED_TOL))
}

pub fn composed_model_gradients() {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let fusion = if seed % 4 == 3 { Fusion::Concat } else { Fusion::Attention };
        worst = worst.max(composed_model_error(seed, fusion));
    }
    assert!(worst < COMPOSED_TOL, "composed model: relative error {worst:e}");
}

pub fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[5]);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let t = g.tanh(v);
        let l1 = g.sum(t);
        let sq = g.mul(v, v).unwrap();
        let l2 = g.sum(sq);
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => {
                let a = g.scale(l1, 2.5);
                g.add(a, l2).unwrap()
            }
        };
        g.backward(loss).unwrap();
        g.grad(v).unwrap().to_vec()
    };
    let (g1, g2, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..5 {
        assert!((gc[i] - (2.5 * g1[i] + g2[i])).abs() < 1e-12);
    }
}

pub fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::<f32>::new(tiny_config(Fusion::Attention), &mut rng).unwrap();
        let raw = random(&mut rng, &[3, 4, 40]).cast::<f32>();
        let topo = random(&mut rng, &[3, 15, 8, 8]).cast::<f32>();
        let mut g = Graph::new();
        let vars = model.params().bind(&mut g);
        let mut mode = Mode::Train(&mut rng);
        let fwd = model
            .forward(&mut g, &vars, Inputs { raw: Some(&raw), topo: Some(&topo) }, &mut mode)
            .unwrap();
        let (loss, _) = model::loss_on_graph(&mut g, &fwd, &[0, 1, 0], 0.4, false).unwrap();
        g.backward(loss).unwrap();
        let grads = model.params().grads(&g, &vars);
        (g.value(fwd.logits).data().to_vec(), grads)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(a.1 == b.1);
}

/// Every check above, in order.
pub const ALL: [(&str, fn()); 13] = [
    ("fc_gradients", fc_gradients),
    ("conv1d_gradients_and_loop_oracle", conv1d_gradients_and_loop_oracle),
    ("conv2d_gradients_and_loop_oracle", conv2d_gradients_and_loop_oracle),
    ("batchnorm_gradients", batchnorm_gradients),
    ("pooling_gradients", pooling_gradients),
    ("activation_and_elementwise_gradients", activation_and_elementwise_gradients),
    ("dropout_gradient_with_fixed_mask", dropout_gradient_with_fixed_mask),
    ("softmax_cross_entropy_gradients", softmax_cross_entropy_gradients),
    ("orthogonality_loss_gradients", orthogonality_loss_gradients),
    ("gated_fusion_gradients", gated_fusion_gradients),
    ("composed_model_gradients", composed_model_gradients),
    ("backward_is_linear_in_the_loss", backward_is_linear_in_the_loss),
    ("forward_and_backward_are_deterministic", forward_and_backward_are_deterministic),
];
