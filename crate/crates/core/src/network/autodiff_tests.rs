use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::autodiff::{Graph, NodeId};
use super::kernels::ConvGeom;
use super::Tensor;
use crate::error::{Error, Result};
use crate::losses::{bce, bce_grad, Class, LossSample};

type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    // magnitudes kept away from zero so kinks (relu, max, clamp) sit far from samples
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `sum(f(inputs) * w)` for fixed random weights `w`.
fn scalarize(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(out));
    let w = g.input(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn eval(inputs: &[Tensor], f: &Build) -> f64 {
    let mut g = Graph::inference();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &ids).unwrap();
    let s = scalarize(&mut g, out, 99).unwrap();
    g.value(s).data()[0]
}

/// Worst relative error between autodiff and central differences over all inputs.
fn max_rel_error(inputs: Vec<Tensor>, f: &Build) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.input_with_grad(t.clone()))
        .collect();
    let out = f(&mut g, &ids).unwrap();
    let s = scalarize(&mut g, out, 99).unwrap();
    let grads = g.backward(s, 1.0).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.node(*id).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

fn assert_grad(name: &str, inputs: Vec<Tensor>, f: &Build) {
    let err = max_rel_error(inputs, f);
    assert!(err < 1e-4, "{name}: relative error {err:e}");
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(1234)
}

#[test]
fn conv_gradients() {
    let mut r = rng();
    let geom = ConvGeom {
        kernel: [3, 2, 3],
        stride: [2, 1, 2],
        padding: [1, 0, 1],
    };
    let inputs = vec![
        random(&mut r, &[2, 4, 3, 5]),
        random(&mut r, &[3, 2, 3, 2, 3]),
        random(&mut r, &[3]),
    ];
    assert_grad("conv", inputs, &move |g, x| g.conv(x[0], x[1], Some(x[2]), geom));
}

#[test]
fn conv2d_as_depth_one_conv() {
    let mut r = rng();
    let geom = ConvGeom {
        kernel: [1, 3, 3],
        stride: [1, 2, 2],
        padding: [0, 1, 1],
    };
    let inputs = vec![random(&mut r, &[2, 1, 5, 6]), random(&mut r, &[4, 2, 1, 3, 3])];
    assert_grad("conv2d", inputs, &move |g, x| g.conv(x[0], x[1], None, geom));
}

#[test]
fn deconv_gradients() {
    let mut r = rng();
    for (k, s) in [(3, 1), (2, 2), (4, 4)] {
        let geom = ConvGeom {
            kernel: [1, k, k],
            stride: [1, s, s],
            padding: [0, (k - s) / 2, (k - s) / 2],
        };
        let inputs = vec![
            random(&mut r, &[3, 1, 3, 2]),
            random(&mut r, &[3, 2, 1, k, k]),
            random(&mut r, &[2]),
        ];
        let out = [1, 3 * s, 2 * s];
        assert_grad("deconv", inputs, &move |g, x| {
            g.deconv(x[0], x[1], Some(x[2]), geom, out)
        });
    }
}

#[test]
fn deconv_is_adjoint_of_conv() {
    // <conv(x; w), y> == <x, deconv(y; w)> without bias
    let mut r = rng();
    let geom = ConvGeom {
        kernel: [1, 2, 2],
        stride: [1, 2, 2],
        padding: [0, 0, 0],
    };
    let x = random(&mut r, &[2, 1, 4, 6]);
    let w = random(&mut r, &[3, 2, 1, 2, 2]);
    let y = random(&mut r, &[3, 1, 2, 3]);
    let mut g = Graph::inference();
    let (xi, wi, yi) = (g.input(x.clone()), g.input(w.clone()), g.input(y.clone()));
    let c = g.conv(xi, wi, None, geom).unwrap();
    // deconv weights are [Cin, Cout, ...] where Cin is the conv's Cout
    let d = g.deconv(yi, wi, None, geom, [1, 4, 6]).unwrap();
    let lhs: f64 = g.value(c).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(d).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn linear_gradients() {
    let mut r = rng();
    let inputs = vec![
        random(&mut r, &[5, 4]),
        random(&mut r, &[3, 4]),
        random(&mut r, &[3]),
    ];
    assert_grad("linear", inputs, &|g, x| g.linear(x[0], x[1], Some(x[2])));
}

#[test]
fn elementwise_gradients() {
    let mut r = rng();
    let t = random(&mut r, &[3, 4]);
    let pos = Tensor::new(vec![12], t.data().iter().map(|v| v.abs() + 0.2).collect()).unwrap();
    assert_grad("relu", vec![t.clone()], &|g, x| g.relu(x[0]));
    assert_grad("sigmoid", vec![t.clone()], &|g, x| g.sigmoid(x[0]));
    assert_grad("square", vec![t.clone()], &|g, x| g.square(x[0]));
    assert_grad("scale", vec![t.clone()], &|g, x| g.scale(x[0], -1.7));
    assert_grad("ln", vec![pos.clone()], &|g, x| g.ln(x[0]));
    assert_grad("pow", vec![pos.clone()], &|g, x| g.pow_scalar(x[0], 2.5));
    assert_grad("clamp", vec![t.clone()], &|g, x| g.clamp(x[0], -0.5, 0.5));
    let wide = Tensor::new(vec![12], t.data().iter().map(|v| 3.0 * v).collect()).unwrap();
    assert_grad("smooth_l1", vec![wide], &|g, x| g.smooth_l1(x[0]));
    assert_grad("affine", vec![t.clone()], &|g, x| {
        g.affine(x[0], (0..12).map(|i| i as f64 - 5.5).collect(), &[0.25; 12])
    });
    let u = random(&mut r, &[3, 4]);
    assert_grad("add", vec![t.clone(), u.clone()], &|g, x| g.add(x[0], x[1]));
    assert_grad("sub", vec![t.clone(), u.clone()], &|g, x| g.sub(x[0], x[1]));
    assert_grad("mul", vec![t.clone(), u.clone()], &|g, x| g.mul(x[0], x[1]));
    assert_grad("sum", vec![t], &|g, x| g.sum(x[0]));
}

#[test]
fn batch_norm_gradients() {
    let mut r = rng();
    let inputs = vec![
        random(&mut r, &[2, 3, 4]),
        random(&mut r, &[3]),
        random(&mut r, &[3]),
    ];
    assert_grad("batchnorm train", inputs.clone(), &|g, x| {
        g.batch_norm(x[0], x[1], x[2], 1, 1e-5, None, "bn")
    });
    assert_grad("batchnorm eval", inputs, &|g, x| {
        g.batch_norm(x[0], x[1], x[2], 1, 1e-5, Some((&[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0])), "bn")
    });
}

#[test]
fn batch_norm_records_statistics() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let gamma = g.param("g", &Tensor::filled(vec![1], 1.0));
    let beta = g.param("b", &Tensor::zeros(vec![1]));
    g.batch_norm(x, gamma, beta, 1, 1e-5, None, "bn0").unwrap();
    let st = &g.batch_stats()[0];
    assert_eq!((st.name.as_str(), st.count), ("bn0", 4));
    assert_eq!(st.mean, vec![2.5]);
    assert_eq!(st.var, vec![1.25]);
}

#[test]
fn sparse_op_gradients() {
    let mut r = rng();
    let rows = random(&mut r, &[6, 3]);
    let segments = [0, 0, 1, 2, 2, 2];
    assert_grad("segment_max", vec![rows.clone()], &move |g, x| {
        g.segment_max(x[0], &segments, 3)
    });
    assert_grad("gather_rows", vec![rows.clone()], &|g, x| g.gather_rows(x[0], &[2, 0, 2, 5]));
    assert_grad("scatter_rows", vec![rows.clone()], &|g, x| {
        g.scatter_rows(x[0], &[7, 0, 3, 11, 5, 2], &[1, 3, 4])
    });
    assert_grad("select", vec![rows.clone()], &|g, x| g.select(x[0], &[17, 3, 3, 0]));
    assert_grad("reshape", vec![rows.clone()], &|g, x| g.reshape(x[0], vec![2, 9]));
    let other = random(&mut r, &[6, 2]);
    assert_grad("concat", vec![rows, other], &|g, x| g.concat(&[x[0], x[1]], 1));
}

#[test]
fn composite_graph_gradients() {
    let mut r = rng();
    let geom = ConvGeom {
        kernel: [3, 3, 3],
        stride: [1, 1, 1],
        padding: [1, 1, 1],
    };
    let inputs = vec![
        random(&mut r, &[1, 3, 3, 3]),
        random(&mut r, &[2, 1, 3, 3, 3]),
        random(&mut r, &[2]),
        random(&mut r, &[2]),
    ];
    assert_grad("conv-relu-bn-sigmoid", inputs, &move |g, x| {
        let c = g.conv(x[0], x[1], None, geom)?;
        let a = g.relu(c)?;
        let b = g.batch_norm(a, x[2], x[3], 0, 1e-5, None, "bn")?;
        g.sigmoid(b)
    });
}

#[test]
fn linear_sigmoid_bce_chain_matches_closed_form() {
    // x = w . v + b, loss = -ln p_t, d loss / dx from the graph vs y (p_t - 1)
    for (y, w) in [(Class::Positive, 0.7), (Class::Negative, -1.3), (Class::Positive, -2.0)] {
        let mut g = Graph::new();
        let v = g.input(Tensor::new(vec![1, 2], vec![0.4, -1.1]).unwrap());
        let wt = g.param("w", &Tensor::new(vec![1, 2], vec![w, 0.5]).unwrap());
        let b = g.param("b", &Tensor::new(vec![1], vec![0.1]).unwrap());
        let x = g.linear(v, wt, Some(b)).unwrap();
        let p = g.sigmoid(x).unwrap();
        let pt = match y {
            Class::Positive => p,
            Class::Negative => g.affine(p, vec![-1.0], &[1.0]).unwrap(),
        };
        let l = g.ln(pt).unwrap();
        let loss = g.scale(l, -1.0).unwrap();
        let grads = g.backward(loss, 1.0).unwrap();
        let logit = g.value(x).data()[0];
        let sample = LossSample::from_logit(y, logit).unwrap();
        assert!((g.value(loss).data()[0] - bce(&sample)).abs() < 1e-9);
        // d loss / d b = d loss / d x
        assert!((grads.param("b").unwrap()[0] - bce_grad(&sample)).abs() < 1e-9);
    }
}

#[test]
fn zero_seed_gives_zero_gradients() {
    let mut g = Graph::new();
    let w = g.param("w", &Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let x = g.input(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap());
    let y = g.linear(x, w, None).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s, 0.0).unwrap();
    assert!(grads.param("w").unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn backward_state_errors() {
    let mut other = Graph::new();
    let foreign = other.input(Tensor::scalar(1.0));
    assert!(matches!(Graph::new().backward(foreign, 1.0), Err(Error::State(_))));
    let mut inf = Graph::inference();
    let x = inf.input(Tensor::scalar(1.0));
    assert!(matches!(inf.backward(x, 1.0), Err(Error::State(_))));
    let mut g = Graph::new();
    let v = g.input(Tensor::zeros(vec![3]));
    assert!(matches!(g.backward(v, 1.0), Err(Error::Structural(_))));
}

#[test]
fn gradients_are_deterministic() {
    let run = || {
        let mut r = rng();
        let geom = ConvGeom {
            kernel: [3, 3, 3],
            stride: [2, 2, 2],
            padding: [1, 1, 1],
        };
        let mut g = Graph::new();
        let x = g.input(random(&mut r, &[2, 4, 4, 4]));
        let w = g.param("w", &random(&mut r, &[3, 2, 3, 3, 3]));
        let c = g.conv(x, w, None, geom).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s, 1.0).unwrap().param("w").unwrap().to_vec()
    };
    assert_eq!(run(), run());
}
