//! Central-difference checks (step 1e-3) for every differentiable operator.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_op as check, rel_err, STEP};
use super::*;

const TOL: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn seeds() -> impl Iterator<Item = (u64, ChaCha8Rng)> {
    (0..10u64).map(|s| (s, ChaCha8Rng::seed_from_u64(1000 + s)))
}

#[test]
fn conv2d_scalar_sum_loss() {
    // Plain sum of outputs, 6x6x2 input, 3x3 kernel.
    for (_, mut rng) in seeds() {
        let spec = ConvSpec::new(3, 2, 3);
        let x = random(&mut rng, 72);
        let w = random(&mut rng, 54);
        let b = random(&mut rng, 3);
        let eval = |x: &[f64], w: &[f64], b: &[f64], back: bool| {
            let mut g = Graph::<f64>::new();
            let xi = g.param(&[6, 6, 2], x.to_vec()).unwrap();
            let wi = g.param(&[3, 3, 2, 3], w.to_vec()).unwrap();
            let bi = g.param(&[3], b.to_vec()).unwrap();
            let y = g.conv2d(xi, wi, Some(bi), spec).unwrap();
            let s = g.sum(y);
            if back {
                g.backward(s).unwrap();
            }
            (g.value(s)[0], g.grad(xi).map(<[f64]>::to_vec), g.grad(wi).map(<[f64]>::to_vec))
        };
        let (_, gx, gw) = eval(&x, &w, &b, true);
        let (gx, gw) = (gx.unwrap(), gw.unwrap());
        for k in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[k] += STEP;
            m[k] -= STEP;
            let n = (eval(&p, &w, &b, false).0 - eval(&m, &w, &b, false).0) / (2.0 * STEP);
            assert!(rel_err(gx[k], n) <= TOL, "dx[{k}] {} vs {n}", gx[k]);
        }
        for k in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[k] += STEP;
            m[k] -= STEP;
            let n = (eval(&x, &p, &b, false).0 - eval(&x, &m, &b, false).0) / (2.0 * STEP);
            assert!(rel_err(gw[k], n) <= TOL, "dw[{k}] {} vs {n}", gw[k]);
        }
    }
}

#[test]
fn conv2d_strided_dilated() {
    for (seed, mut rng) in seeds() {
        let spec = ConvSpec::new(3, 3, 2).stride(2).dilation(2);
        let leaves = [
            (vec![7, 8, 3], random(&mut rng, 168)),
            (vec![3, 3, 3, 2], random(&mut rng, 54)),
            (vec![2], random(&mut rng, 2)),
        ];
        let err = check(&leaves, seed, |g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), spec).unwrap());
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn batch_norm_train_and_infer() {
    for (seed, mut rng) in seeds() {
        let leaves = [
            (vec![5, 4, 3], random(&mut rng, 60)),
            (vec![3], random(&mut rng, 3)),
            (vec![3], random(&mut rng, 3)),
        ];
        let err = check(&leaves, seed, |g, ids| g.batch_norm(ids[0], ids[1], ids[2], BatchNormMode::Train).unwrap().0);
        assert!(err <= TOL, "train seed {seed}: {err}");
        let mode = BatchNormMode::Infer {
            mean: random(&mut rng, 3),
            var: random(&mut rng, 3).iter().map(|v| v.abs() + 0.1).collect(),
        };
        let err = check(&leaves, seed, |g, ids| g.batch_norm(ids[0], ids[1], ids[2], mode.clone()).unwrap().0);
        assert!(err <= TOL, "infer seed {seed}: {err}");
    }
}

#[test]
fn bilinear_resize_up_and_down() {
    for (seed, mut rng) in seeds() {
        let leaves = [(vec![4, 5, 2], random(&mut rng, 40))];
        for (oh, ow) in [(8, 10), (3, 2), (7, 5)] {
            let err = check(&leaves, seed, |g, ids| g.bilinear_resize(ids[0], oh, ow).unwrap());
            assert!(err <= TOL, "seed {seed} {oh}x{ow}: {err}");
        }
    }
}

#[test]
fn elementwise_ops() {
    for (seed, mut rng) in seeds() {
        let a = (vec![4, 4, 3], random(&mut rng, 48));
        let b = (vec![4, 4, 3], random(&mut rng, 48));
        let m = (vec![4, 4, 1], random(&mut rng, 16));
        let pair = [a.clone(), b.clone()];
        let e = check(&pair, seed, |g, ids| g.mul(ids[0], ids[1]).unwrap());
        assert!(e <= TOL, "mul {seed}: {e}");
        let e = check(&pair, seed, |g, ids| g.add(ids[0], ids[1]).unwrap());
        assert!(e <= TOL, "add {seed}: {e}");
        let e = check(&pair, seed, |g, ids| g.concat_channels(&[ids[0], ids[1]]).unwrap());
        assert!(e <= TOL, "concat {seed}: {e}");
        let e = check(&[m, b.clone()], seed, |g, ids| g.mul_channels(ids[0], ids[1]).unwrap());
        assert!(e <= TOL, "mul_channels {seed}: {e}");
        let one = [a.clone()];
        let e = check(&one, seed, |g, ids| g.relu(ids[0]));
        assert!(e <= TOL, "relu {seed}: {e}");
        let e = check(&one, seed, |g, ids| g.sigmoid(ids[0]));
        assert!(e <= TOL, "sigmoid {seed}: {e}");
        let e = check(&one, seed, |g, ids| g.affine(ids[0], -20.0, 5.0));
        assert!(e <= TOL, "affine {seed}: {e}");
        let e = check(&one, seed, |g, ids| g.mean(ids[0]));
        assert!(e <= TOL, "mean {seed}: {e}");
        let e = check(&one, seed, |g, ids| g.reshape(ids[0], &[16, 3]).unwrap());
        assert!(e <= TOL, "reshape {seed}: {e}");
        let mask: Vec<bool> = (0..16).map(|i| i % 3 != 1).collect();
        let e = check(&one, seed, |g, ids| g.masked_mean(ids[0], &mask).unwrap());
        assert!(e <= TOL, "masked_mean {seed}: {e}");
    }
}

#[test]
fn similarity_ops() {
    for (seed, mut rng) in seeds() {
        let leaves = [(vec![3, 4, 4], random(&mut rng, 48)), (vec![4], random(&mut rng, 4))];
        let e = check(&leaves, seed, |g, ids| g.cosine_to_vector(ids[0], ids[1]).unwrap());
        assert!(e <= TOL, "cosine {seed}: {e}");
        let e = check(&leaves, seed, |g, ids| g.euclidean_to_vector(ids[0], ids[1]).unwrap());
        assert!(e <= TOL, "euclidean {seed}: {e}");
    }
}

#[test]
fn dice_loss_gradient() {
    for (seed, mut rng) in seeds() {
        let p: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..1.0)).collect();
        let t: Vec<f64> = (0..36).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let e = check(&[(vec![6, 6], p)], seed, |g, ids| g.dice_loss(ids[0], &t, 1e-6).unwrap());
        assert!(e <= TOL, "dice {seed}: {e}");
    }
}

#[test]
fn three_op_chain() {
    // conv -> relu -> bilinear resize, end to end.
    for (seed, mut rng) in seeds() {
        let spec = ConvSpec::new(3, 2, 3);
        let leaves = [
            (vec![6, 6, 2], random(&mut rng, 72)),
            (vec![3, 3, 2, 3], random(&mut rng, 54)),
        ];
        let e = check(&leaves, seed, |g, ids| {
            let c = g.conv2d(ids[0], ids[1], None, spec).unwrap();
            let r = g.relu(c);
            g.bilinear_resize(r, 9, 4).unwrap()
        });
        assert!(e <= TOL, "chain {seed}: {e}");
    }
}

#[test]
fn f32_engine_agrees_with_f64() {
    // The production scalar type follows the same code path; its gradients
    // agree with the f64 instantiation to single-precision accuracy.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, 8 * 8 * 4);
    let w = random(&mut rng, 9 * 4 * 4);
    fn run<T: Real>(x: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::<T>::new();
        let xi = g.param(&[8, 8, 4], x.iter().map(|&v| T::lit(v)).collect()).unwrap();
        let wi = g.param(&[3, 3, 4, 4], w.iter().map(|&v| T::lit(v)).collect()).unwrap();
        let c = g.conv2d(xi, wi, None, ConvSpec::new(3, 4, 4)).unwrap();
        let s = g.sigmoid(c);
        let l = g.sum(s);
        g.backward(l).unwrap();
        let f = |id| g.grad(id).unwrap().iter().map(|v: &T| v.to_f64().unwrap()).collect();
        (f(xi), f(wi))
    }
    let (a32, b32) = run::<f32>(&x, &w);
    let (a64, b64) = run::<f64>(&x, &w);
    for (p, q) in a32.iter().chain(&b32).zip(a64.iter().chain(&b64)) {
        assert!((p - q).abs() <= 1e-5 * q.abs().max(1.0), "{p} vs {q}");
    }
}
