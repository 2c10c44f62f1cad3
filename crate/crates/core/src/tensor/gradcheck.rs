//! Central-difference gradient checks over `Graph<f64>`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, TensorId};

pub const STEP: f64 = 1e-3;

/// Relative error with a floor of 1e-3 on the scale: entries whose true
/// value cancels to nearly zero are held to an absolute 1e-6 instead.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Worst relative error between `analytic` and central differences of `f`
/// around `point`, over the listed `(leaf, index)` entries.
pub fn worst_error(
    f: impl Fn(&[Vec<f64>]) -> f64,
    point: &[Vec<f64>],
    analytic: &[Vec<f64>],
    entries: impl IntoIterator<Item = (usize, usize)>,
) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (li, k) in entries {
        let x = point[li][k];
        probe[li][k] = x + STEP;
        let plus = f(&probe);
        probe[li][k] = x - STEP;
        let minus = f(&probe);
        probe[li][k] = x;
        worst = worst.max(rel_err(analytic[li][k], (plus - minus) / (2.0 * STEP)));
    }
    worst
}

/// As [`worst_error`] for piecewise-smooth functions: `f` also returns the
/// ReLU sign pattern, and entries whose probes change it are skipped, since
/// a central difference across a kink does not estimate the derivative.
/// Returns the worst error over the kept entries and the number skipped.
pub fn worst_error_off_kinks(
    f: impl Fn(&[Vec<f64>]) -> (f64, Vec<bool>),
    point: &[Vec<f64>],
    analytic: &[Vec<f64>],
    entries: impl IntoIterator<Item = (usize, usize)>,
) -> (f64, usize) {
    let (_, pattern) = f(point);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut probe = point.to_vec();
    for (li, k) in entries {
        let x = point[li][k];
        probe[li][k] = x + STEP;
        let (plus, p_plus) = f(&probe);
        probe[li][k] = x - STEP;
        let (minus, p_minus) = f(&probe);
        probe[li][k] = x;
        if p_plus != pattern || p_minus != pattern {
            skipped += 1;
            continue;
        }
        worst = worst.max(rel_err(analytic[li][k], (plus - minus) / (2.0 * STEP)));
    }
    (worst, skipped)
}

/// Builds the graph from leaf values, reduces its output against fixed
/// random weights, and checks every leaf entry. Returns the worst relative
/// error.
pub fn check_op<F>(leaves: &[(Vec<usize>, Vec<f64>)], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> TensorId,
{
    let eval = |vals: &[Vec<f64>], backward: bool| {
        let mut g = Graph::<f64>::new();
        let ids: Vec<_> = leaves
            .iter()
            .zip(vals)
            .map(|((s, _), v)| g.param(s, v.clone()).expect("leaf shape"))
            .collect();
        let out = build(&mut g, &ids);
        let n = g.tensor(out).numel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shape = g.shape(out).to_vec();
        let w = g.constant(&shape, w).expect("weight shape");
        let prod = g.mul(out, w).expect("same shape");
        let loss = g.sum(prod);
        let value = g.value(loss)[0];
        let grads = if backward {
            g.backward(loss).expect("scalar loss");
            ids.iter()
                .map(|&i| g.grad(i).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.tensor(i).numel()]))
                .collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let base: Vec<Vec<f64>> = leaves.iter().map(|(_, v)| v.clone()).collect();
    let (_, analytic) = eval(&base, true);
    let entries: Vec<_> = base.iter().enumerate().flat_map(|(li, v)| (0..v.len()).map(move |k| (li, k))).collect();
    worst_error(|v| eval(v, false).0, &base, &analytic, entries)
}
