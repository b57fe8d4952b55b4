use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn relu_values() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![-1.0, 2.5, 0.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[0.0, 2.5, 0.0]);
    let s = g.sum(y).unwrap();
    let [dx] = g.grad(s, &[x]).unwrap()[..] else { panic!() };
    assert_eq!(g.value(dx).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn identity_kernel_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random(&[2, 3, 5, 4], &mut rng);
    let mut kernel = vec![0.0; 9];
    for c in 0..3 {
        kernel[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.leaf(img.clone());
    let w = g.leaf(Tensor::new(vec![3, 3, 1, 1], kernel).unwrap());
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).unwrap(), &img);
}

#[test]
fn cosine_self_similarity() {
    let mut g = Graph::new();
    let u = g.leaf(Tensor::from_vec(vec![0.3, -2.0, 5.0]));
    let c = g.cosine_similarity(u, u).unwrap();
    assert!((g.item(c).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn first_and_second_derivatives() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let sq = g.square(x).unwrap();
    let d = g.grad(sq, &[x]).unwrap()[0];
    assert_eq!(g.item(d).unwrap(), 6.0);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let x2 = g.mul(x, x).unwrap();
    let x3 = g.mul(x2, x).unwrap();
    let d1 = g.grad(x3, &[x]).unwrap()[0];
    assert_eq!(g.item(d1).unwrap(), 12.0);
    let d2 = g.grad(d1, &[x]).unwrap()[0];
    assert_eq!(g.item(d2).unwrap(), 12.0);
}

#[test]
fn non_scalar_output_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(g.grad(x, &[x]), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn unreachable_input_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.leaf(Tensor::from_vec(vec![4.0, 5.0]));
    let s = g.sum(x).unwrap();
    let dy = g.grad(s, &[y]).unwrap()[0];
    assert_eq!(g.value(dy).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[2, 2]));
    let err = g.matmul(a, a).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    assert!(g.add(a, b).unwrap_err().to_string().contains("add"));
}

#[test]
fn foreign_vars_are_rejected() {
    let mut g1 = Graph::new();
    let mut g2 = Graph::new();
    let x = g1.leaf(Tensor::scalar(1.0));
    assert_eq!(g2.neg(x).unwrap_err(), AutodiffError::ForeignVar);
}

#[test]
fn max_axis_routes_to_first_max() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![3, 2], vec![1.0, 5.0, 4.0, 5.0, 4.0, 0.0]).unwrap());
    let m = g.max_axis(x, 0).unwrap();
    assert_eq!(g.value(m).unwrap().data(), &[4.0, 5.0]);
    let s = g.sum(m).unwrap();
    let dx = g.grad(s, &[x]).unwrap()[0];
    assert_eq!(g.value(dx).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let z = g.leaf(random(&[4, 7], &mut rng).map(|v| 30.0 * v));
    let p = g.softmax(z).unwrap();
    for row in g.value(p).unwrap().data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// A tiny conv + pool + linear network exercising every structural primitive.
fn conv_net_loss(g: &mut Graph, x: Var, w: Var, v: Var, labels: &[usize]) -> Var {
    let h = g.conv2d(x, w, None, 1, 1).unwrap();
    let h = g.relu(h).unwrap();
    let h = g.avg_pool2d(h, 2, 2).unwrap();
    let h = g.flatten_rows(h).unwrap();
    let logits = g.linear(h, v, None).unwrap();
    g.cross_entropy(logits, labels).unwrap()
}

#[test]
fn conv_net_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = random(&[2, 2, 4, 4], &mut rng);
    let w0 = random(&[3, 2, 3, 3], &mut rng);
    let v0 = random(&[3, 12], &mut rng);
    let labels = [0, 2];

    let mut g = Graph::new();
    let (x, w, v) = (g.leaf(x0.clone()), g.leaf(w0.clone()), g.leaf(v0.clone()));
    let loss = conv_net_loss(&mut g, x, w, v, &labels);
    let grads = g.grad(loss, &[x, w]).unwrap();

    let fx = finite_difference(
        |t| {
            let mut g = Graph::new();
            let (x, w, v) = (g.leaf(t.clone()), g.leaf(w0.clone()), g.leaf(v0.clone()));
            let l = conv_net_loss(&mut g, x, w, v, &labels);
            g.item(l).unwrap()
        },
        &x0,
        1e-5,
    );
    let fw = finite_difference(
        |t| {
            let mut g = Graph::new();
            let (x, w, v) = (g.leaf(x0.clone()), g.leaf(t.clone()), g.leaf(v0.clone()));
            let l = conv_net_loss(&mut g, x, w, v, &labels);
            g.item(l).unwrap()
        },
        &w0,
        1e-5,
    );
    for (ad, fd) in [(grads[0], fx), (grads[1], fw)] {
        for (a, b) in g.value(ad).unwrap().data().iter().zip(fd.data()) {
            if a.abs() > 1e-6 {
                assert!(close(*a, *b, 1e-4), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn linearity_of_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = random(&[6], &mut rng);
    let (a, b) = (0.7, -1.3);
    let mut g = Graph::new();
    let x = g.leaf(x0);
    let e = g.exp(x).unwrap();
    let f = g.sum(e).unwrap();
    let sq = g.square(x).unwrap();
    let l = g.log(e).unwrap();
    let p = g.mul(sq, l).unwrap();
    let h = g.sum(p).unwrap();
    let af = g.scale(f, a).unwrap();
    let bh = g.scale(h, b).unwrap();
    let combo = g.add(af, bh).unwrap();
    let dc = g.grad(combo, &[x]).unwrap()[0];
    let df = g.grad(f, &[x]).unwrap()[0];
    let dh = g.grad(h, &[x]).unwrap()[0];
    let (dc, df, dh) = (g.value(dc).unwrap(), g.value(df).unwrap(), g.value(dh).unwrap());
    for i in 0..6 {
        let expect = a * df.data()[i] + b * dh.data()[i];
        assert!((dc.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn double_backprop_matches_finite_differences() {
    // d/dx |d CE / d W|^2 for a 2-parameter linear model.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w0 = random(&[2, 1], &mut rng);
    let x0 = random(&[1, 1], &mut rng);
    let penalty = |g: &mut Graph, x: Var, w: Var| {
        let logits = g.linear(x, w, None).unwrap();
        let ce = g.cross_entropy(logits, &[1]).unwrap();
        let gw = g.grad(ce, &[w]).unwrap()[0];
        let sq = g.square(gw).unwrap();
        g.sum(sq).unwrap()
    };
    let mut g = Graph::new();
    let (x, w) = (g.leaf(x0.clone()), g.leaf(w0.clone()));
    let p = penalty(&mut g, x, w);
    let dx = g.grad(p, &[x]).unwrap()[0];
    let fd = finite_difference(
        |t| {
            let mut g = Graph::new();
            let (x, w) = (g.leaf(t.clone()), g.leaf(w0.clone()));
            let p = penalty(&mut g, x, w);
            g.item(p).unwrap()
        },
        &x0,
        1e-5,
    );
    let ad = g.value(dx).unwrap().data()[0];
    assert!(close(ad, fd.data()[0], 1e-6), "{ad} vs {}", fd.data()[0]);
}

#[test]
fn evaluation_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::new();
        let x = g.leaf(random(&[3, 2, 5, 5], &mut rng));
        let w = g.leaf(random(&[4, 2, 3, 3], &mut rng));
        let v = g.leaf(random(&[3, 16], &mut rng));
        let l = conv_net_loss(&mut g, x, w, v, &[0, 1, 2]);
        let gx = g.grad(l, &[x]).unwrap()[0];
        g.value(gx).unwrap().clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn narrow_concat_embed_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = random(&[3, 4, 2], &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(t.clone());
    let a = g.narrow(x, 1, 0, 1).unwrap();
    let b = g.narrow(x, 1, 1, 3).unwrap();
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c).unwrap(), &t);
    let w = g.leaf(random(&[3, 3, 2], &mut rng));
    let p = g.mul(b, w).unwrap();
    let s = g.sum(p).unwrap();
    let dx = g.grad(s, &[x]).unwrap()[0];
    let dx = g.value(dx).unwrap();
    for i in 0..3 {
        assert_eq!(dx.data()[i * 8], 0.0);
        assert_eq!(dx.data()[i * 8 + 1], 0.0);
    }
}

#[test]
fn sorted_sums_ignore_row_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = random(&[5, 3], &mut rng);
    let rows = [4, 1, 3, 0, 2];
    let shuffled = Tensor::stack(&rows.iter().map(|&r| t.select(r)).collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let (a, b) = (g.leaf(t), g.leaf(shuffled));
    let sa = g.sort_leading(a).unwrap();
    let sb = g.sort_leading(b).unwrap();
    assert_eq!(g.value(sa).unwrap(), g.value(sb).unwrap());
    let w = g.leaf(random(&[5, 3], &mut rng));
    let p = g.mul(sa, w).unwrap();
    let l = g.sum(p).unwrap();
    let da = g.grad(l, &[a]).unwrap()[0];
    let grad = g.value(da).unwrap().clone();
    let t0 = g.value(a).unwrap().clone();
    let wv = g.value(w).unwrap().clone();
    let fd = finite_difference(
        |x| {
            let mut h = Graph::new();
            let (x, w) = (h.leaf(x.clone()), h.leaf(wv.clone()));
            let s = h.sort_leading(x).unwrap();
            let p = h.mul(s, w).unwrap();
            let l = h.sum(p).unwrap();
            h.item(l).unwrap()
        },
        &t0,
        1e-6,
    );
    assert!(grad.max_abs_diff(&fd) < 1e-8);
    assert!(g.gather(a, std::sync::Arc::new(vec![0; 15])).is_err());
}
