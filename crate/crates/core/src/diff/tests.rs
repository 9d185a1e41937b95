use super::*;
use crate::error::Error;
use crate::rng;
use rand::Rng;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "diff-test");
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_fd<F: Fn(&mut Graph, Var) -> crate::Result<Var>>(f: F, at: &Tensor) {
    let rep = fd_check(f, at, STEP, TOL).unwrap();
    assert!(rep.passed, "fd rel err {}", rep.max_rel_error);
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut g = Graph::new();
    let i3 = g.constant(Tensor::eye(3));
    let v = g.constant(Tensor::new(vec![3, 1], vec![1.5, -2.0, 7.0]).unwrap());
    let out = g.matmul(i3, v).unwrap();
    assert_eq!(g.value(out).data(), &[1.5, -2.0, 7.0]);

    let a = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let ones = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let out = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 7.0]);

    assert!(matches!(g.matmul(a, i3), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let b = random(&[4, 3], -1.0, 1.0, 2);
    let w = random(&[5, 3], -1.0, 1.0, 3);
    let at = random(&[5, 4], -1.0, 1.0, 1);
    // Both operand slots: x as left factor, then x as right factor.
    assert_fd(
        |g, x| {
            let bv = g.constant(b.clone());
            let wv = g.constant(w.clone());
            let c = g.matmul(x, bv)?;
            let c = g.mul(c, wv)?;
            Ok(g.sum(c))
        },
        &at,
    );
    let a = random(&[5, 4], -1.0, 1.0, 4);
    assert_fd(
        |g, x| {
            let av = g.constant(a.clone());
            let wv = g.constant(w.clone());
            let c = g.matmul(av, x)?;
            let c = g.mul(c, wv)?;
            Ok(g.sum(c))
        },
        &random(&[4, 3], -1.0, 1.0, 5),
    );
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[3]));
    let s = g.softmax(z, 0).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let big = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let s = g.softmax(big, 0).unwrap();
    assert_eq!(g.value(s).data()[0], 1.0);
    assert!(g.value(s).data()[1] < 1e-300);

    let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    // Oracle: direct exponentials without max subtraction.
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
    let total: f64 = e.iter().sum();
    for (got, ek) in g.value(s).data().iter().zip(&e) {
        assert!((got - ek / total).abs() < 1e-15);
    }
    let expect = [0.09003, 0.24473, 0.66524];
    for (got, want) in g.value(s).data().iter().zip(expect) {
        assert!((got - want).abs() < 5e-6);
    }
    assert!((g.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let nan = g.constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap());
    assert!(matches!(g.softmax(nan, 0), Err(Error::Numeric(_))));
    assert!(matches!(g.softmax(x, 1), Err(Error::Dimension(_))));
}

#[test]
fn softmax_slices_sum_to_one_along_any_axis() {
    let t = random(&[3, 4, 5], -30.0, 30.0, 9);
    for axis in 0..3 {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let s = g.softmax(x, axis).unwrap();
        let shape = [3, 4, 5];
        let v = g.value(s);
        let (outer, n, inner) = super::tensor::axis_split(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let total: f64 = (0..n).map(|k| v.data()[(o * n + k) * inner + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(v.data().iter().all(|&p| p > 0.0));
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let one = g.constant(Tensor::scalar(1.0));
    let l = g.log(one).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
    let zero = g.constant(Tensor::scalar(0.0));
    assert!(matches!(g.log(zero), Err(Error::Numeric(_))));

    let x = g.leaf(Tensor::scalar(-2.0), true);
    let r = g.relu(x);
    assert_eq!(g.value(r).item().unwrap(), 0.0);
    let grads = g.backward(r).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item().unwrap(), 0.0);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0), true);
    let r = g.relu(x);
    assert_eq!(g.backward(r).unwrap().wrt(x).unwrap().item().unwrap(), 0.0);
}

#[test]
fn one_by_one_conv_is_scaled_identity() {
    let img = random(&[2, 1, 4, 5], -1.0, 1.0, 11);
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let w = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.5]).unwrap());
    let y = g.conv2d(x, w, 0).unwrap();
    assert_eq!(g.shape(y), &[2, 1, 4, 5]);
    for (a, b) in g.value(y).data().iter().zip(img.data()) {
        assert_eq!(*a, 2.5 * b);
    }
}

#[test]
fn conv_matches_direct_definition() {
    let img = random(&[2, 3, 6, 5], -1.0, 1.0, 12);
    let ker = random(&[4, 3, 3, 2], -1.0, 1.0, 13);
    for pad in [0usize, 1, 2] {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let w = g.constant(ker.clone());
        let y = g.conv2d(x, w, pad).unwrap();
        let (oh, ow) = (6 + 2 * pad - 2, 5 + 2 * pad - 1);
        assert_eq!(g.shape(y), &[2, 4, oh, ow]);
        for b in 0..2 {
            for co in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..2 {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if (0..6).contains(&iy) && (0..5).contains(&ix) {
                                        s += ker.at(&[co, ci, ky, kx]) * img.at(&[b, ci, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        assert!((g.value(y).at(&[b, co, oy, ox]) - s).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn backward_of_sum_of_squares() {
    let theta = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let t = g.leaf(theta.clone(), true);
    let sq = g.mul(t, t).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(t).unwrap().data(), &[1.0, -2.0, 4.0]);
}

#[test]
fn detached_and_constant_tensors_have_no_grad() {
    let mut g = Graph::new();
    let t = g.leaf(Tensor::scalar(3.0), true);
    let d = g.detach(t);
    let c = g.constant(Tensor::scalar(2.0));
    let p = g.mul(t, d).unwrap();
    let p = g.mul(p, c).unwrap();
    let grads = g.backward(p).unwrap();
    assert!(grads.wrt(d).is_none());
    assert!(grads.wrt(c).is_none());
    assert!(grads.wrt(p).is_none());
    assert_eq!(grads.wrt(t).unwrap().item().unwrap(), 6.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let t = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(t), Err(Error::Usage(_))));
}

#[test]
fn repeated_backward_accumulates_into_params() {
    let mut params = ParamSet::new();
    let id = params.add("theta", Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
    let mut g = Graph::new();
    let t = g.param(&params, id);
    let sq = g.mul(t, t).unwrap();
    let loss = g.sum(sq);
    g.backward_into(loss, &mut params).unwrap();
    g.backward_into(loss, &mut params).unwrap();
    assert_eq!(params.grad(id).data(), &[4.0, -12.0]);
    params.zero_grad();
    assert_eq!(params.grad(id).data(), &[0.0, 0.0]);
}

#[test]
fn every_op_passes_finite_difference_check() {
    let a = random(&[3, 4], -1.0, 1.0, 20);
    let w = random(&[3, 4], -1.0, 1.0, 21);
    let weigh = |g: &mut Graph, v: Var| -> crate::Result<Var> {
        let n = g.value(v).len();
        let wv = g.constant(random(&[n], -1.0, 1.0, 99).reshape(g.shape(v))?);
        let p = g.mul(v, wv)?;
        Ok(g.sum(p))
    };
    assert_fd(|g, x| { let c = g.constant(w.clone()); let y = g.add(x, c)?; weigh(g, y) }, &a);
    assert_fd(|g, x| { let c = g.constant(w.clone()); let y = g.mul(x, x)?; let y = g.mul(y, c)?; Ok(g.sum(y)) }, &a);
    assert_fd(|g, x| { let y = g.scale(x, -1.7); let y = g.add_scalar(y, 0.3); weigh(g, y) }, &a);
    assert_fd(|g, x| { let y = g.exp(x)?; weigh(g, y) }, &a);
    assert_fd(|g, x| { let y = g.relu(x); weigh(g, y) }, &a);
    assert_fd(|g, x| { let y = g.log(x)?; weigh(g, y) }, &random(&[3, 4], 0.1, 2.0, 22));
    assert_fd(|g, x| { let y = g.xlogx(x)?; weigh(g, y) }, &random(&[3, 4], 0.1, 2.0, 23));
    for axis in 0..2 {
        assert_fd(|g, x| { let y = g.softmax(x, axis)?; weigh(g, y) }, &a);
    }
    assert_fd(|g, x| { let y = g.transpose(x)?; weigh(g, y) }, &a);
    assert_fd(|g, x| { let y = g.reshape(x, &[2, 6])?; weigh(g, y) }, &a);
    assert_fd(|g, x| Ok(g.mean(x)), &a);
    assert_fd(|g, x| { let y = g.gather(x, 1, &[0, 3, 2])?; weigh(g, y) }, &a);
    assert_fd(|g, x| { let y = g.gather(x, 0, &[2, 0, 1, 1])?; weigh(g, y) }, &a);
    assert_fd(|g, x| { let y = g.max_axis(x, 1)?; weigh(g, y) }, &a);
    assert_fd(
        |g, x| { let b = g.constant(random(&[4], -1.0, 1.0, 24)); let y = g.add_bias(x, b)?; weigh(g, y) },
        &a,
    );
    assert_fd(
        |g, b| { let x = g.constant(a.clone()); let y = g.add_bias(x, b)?; weigh(g, y) },
        &random(&[4], -1.0, 1.0, 25),
    );

    let img = random(&[2, 3, 5, 6], -1.0, 1.0, 30);
    let ker = random(&[2, 3, 3, 3], -1.0, 1.0, 31);
    assert_fd(|g, x| { let k = g.constant(ker.clone()); let y = g.conv2d(x, k, 1)?; weigh(g, y) }, &img);
    assert_fd(|g, k| { let x = g.constant(img.clone()); let y = g.conv2d(x, k, 0)?; weigh(g, y) }, &ker);
    assert_fd(
        |g, b| { let x = g.constant(img.clone()); let y = g.add_channel_bias(x, b)?; weigh(g, y) },
        &random(&[3], -1.0, 1.0, 32),
    );
    assert_fd(|g, x| { let y = g.maxpool2d(x)?; weigh(g, y) }, &img);
    assert_fd(|g, x| { let y = g.upsample2x(x)?; weigh(g, y) }, &img);
    assert_fd(|g, x| { let y = g.permute(x, &[0, 2, 3, 1])?; weigh(g, y) }, &img);
    assert_fd(
        |g, x| { let other = g.constant(random(&[2, 1, 5, 6], -1.0, 1.0, 33)); let y = g.concat(&[x, other, x], 1)?; weigh(g, y) },
        &img,
    );

    let u = random(&[4, 3, 3], 0.0, 1.0, 40);
    let p = random(&[4, 3], 0.0, 1.0, 41);
    assert_fd(|g, x| { let pv = g.constant(p.clone()); let y = g.batched_matvec(x, pv)?; weigh(g, y) }, &u);
    assert_fd(|g, x| { let uv = g.constant(u.clone()); let y = g.batched_matvec(uv, x)?; weigh(g, y) }, &p);
}

#[test]
fn backward_is_bit_identical_on_rerun() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(random(&[2, 1, 6, 6], -1.0, 1.0, 50), true);
        let k = g.leaf(random(&[3, 1, 3, 3], -1.0, 1.0, 51), true);
        let y = g.conv2d(x, k, 1).unwrap();
        let y = g.relu(y);
        let y = g.maxpool2d(y).unwrap();
        let y = g.reshape(y, &[2, 27]).unwrap();
        let s = g.softmax(y, 1).unwrap();
        let e = g.xlogx(s).unwrap();
        let loss = g.sum(e);
        let grads = g.backward(loss).unwrap();
        (grads.wrt(x).unwrap().clone(), grads.wrt(k).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap(), true);
    let y = g.maxpool2d(x).unwrap();
    let loss = g.sum(y);
    assert_eq!(g.backward(loss).unwrap().wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}
