//! Tolerance matching, F-measure, MF-ODS and illumination normalization.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMap, ImagePlane};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matcher {
    /// Nearest pairs first, ties broken by row-major pred then gt index.
    Greedy,
    /// Maximum-cardinality one-to-one matching.
    Optimal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tolerance_fraction: f64,
    /// Number of evenly spaced thresholds in (0, 1): `k / (n + 1)`.
    pub thresholds: usize,
    pub matcher: Matcher,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance_fraction: 0.015,
            thresholds: 99,
            matcher: Matcher::Greedy,
        }
    }
}

impl EvalConfig {
    pub fn tolerance_px(&self, height: usize, width: usize) -> f64 {
        self.tolerance_fraction * ((height * height + width * width) as f64).sqrt()
    }

    pub fn threshold_grid(&self) -> Vec<f32> {
        let n = self.thresholds;
        (1..=n).map(|k| (k as f64 / (n + 1) as f64) as f32).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }
}

impl std::ops::Add for MatchCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for MatchCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean, 0 when `p + r == 0`.
pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Candidate (pred, gt) pairs within tolerance, as indices into the
/// row-major point lists, with squared integer distance.
fn candidates(pred: &[(usize, usize)], gt: &BinaryMap, tol_px: f64) -> (Vec<(usize, usize)>, Vec<(u64, usize, usize)>) {
    let gt_pts = gt.points();
    let (h, w) = gt.dims();
    let mut gt_index = vec![usize::MAX; h * w];
    for (k, &(r, c)) in gt_pts.iter().enumerate() {
        gt_index[r * w + c] = k;
    }
    let rad = tol_px.floor().max(0.0) as isize;
    let tol2 = tol_px * tol_px;
    let mut pairs = Vec::new();
    for (i, &(r, c)) in pred.iter().enumerate() {
        for dr in -rad..=rad {
            let rr = r as isize + dr;
            if rr < 0 || rr >= h as isize {
                continue;
            }
            for dc in -rad..=rad {
                let cc = c as isize + dc;
                if cc < 0 || cc >= w as isize {
                    continue;
                }
                let d2 = (dr * dr + dc * dc) as u64;
                if d2 as f64 > tol2 {
                    continue;
                }
                let j = gt_index[rr as usize * w + cc as usize];
                if j != usize::MAX {
                    pairs.push((d2, i, j));
                }
            }
        }
    }
    (gt_pts, pairs)
}

/// One-to-one correspondence within `tol_px` (Euclidean).
pub fn match_contours(pred: &BinaryMap, gt: &BinaryMap, tol_px: f64, matcher: Matcher) -> Result<MatchCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let pred_pts = pred.points();
    let (gt_pts, mut pairs) = candidates(&pred_pts, gt, tol_px);
    let tp = match matcher {
        Matcher::Greedy => {
            pairs.sort_unstable();
            let mut used_p = vec![false; pred_pts.len()];
            let mut used_g = vec![false; gt_pts.len()];
            let mut tp = 0;
            for (_, i, j) in pairs {
                if !used_p[i] && !used_g[j] {
                    used_p[i] = true;
                    used_g[j] = true;
                    tp += 1;
                }
            }
            tp
        }
        Matcher::Optimal => {
            let mut adj = vec![Vec::new(); pred_pts.len()];
            for (_, i, j) in pairs {
                adj[i].push(j);
            }
            max_bipartite_matching(&adj, gt_pts.len())
        }
    };
    Ok(MatchCounts {
        tp,
        fp: pred_pts.len() - tp,
        fn_: gt_pts.len() - tp,
    })
}

/// Kuhn's augmenting-path algorithm; `adj[i]` lists right vertices of left `i`.
pub fn max_bipartite_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [usize]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v] == usize::MAX || augment(owner[v], adj, seen, owner) {
                owner[v] = u;
                return true;
            }
        }
        false
    }
    let mut owner = vec![usize::MAX; n_right];
    let mut total = 0;
    let mut seen = vec![false; n_right];
    for u in 0..adj.len() {
        seen.iter_mut().for_each(|s| *s = false);
        if augment(u, adj, &mut seen, &mut owner) {
            total += 1;
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdRow {
    pub threshold: f32,
    pub counts: MatchCounts,
}

impl ThresholdRow {
    pub fn f(&self) -> f64 {
        self.counts.f_measure()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdsReport {
    pub rows: Vec<ThresholdRow>,
    pub best_threshold: f32,
    pub best_f: f64,
}

impl OdsReport {
    /// Tab-separated table plus a summary line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("threshold\ttp\tfp\tfn\tprecision\trecall\tf\n");
        for r in &self.rows {
            let c = r.counts;
            let _ = writeln!(
                s,
                "{:.2}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.threshold,
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall(),
                c.f_measure()
            );
        }
        let _ = writeln!(s, "ods_threshold\t{:.2}\tmf_ods\t{:.6}", self.best_threshold, self.best_f);
        s
    }
}

/// Sweeps the threshold grid, aggregating counts over the dataset; ties in
/// F go to the lowest threshold. Predictions are binarized with `>= t`.
pub fn mf_ods(preds: &[ImagePlane], gts: &[BinaryMap], config: &EvalConfig) -> Result<OdsReport> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != gts.len() {
        return Err(Error::DimMismatch(format!(
            "{} predictions vs {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let mut rows = Vec::with_capacity(config.thresholds);
    for t in config.threshold_grid() {
        let mut total = MatchCounts::default();
        for (p, g) in preds.iter().zip(gts) {
            let tol = config.tolerance_px(g.height(), g.width());
            total = total + match_contours(&BinaryMap::threshold(p, t), g, tol, config.matcher)?;
        }
        rows.push(ThresholdRow { threshold: t, counts: total });
    }
    let (mut best_threshold, mut best_f) = (rows[0].threshold, rows[0].f());
    for r in &rows[1..] {
        if r.f() > best_f {
            best_f = r.f();
            best_threshold = r.threshold;
        }
    }
    Ok(OdsReport {
        rows,
        best_threshold,
        best_f,
    })
}

/// Normalized 1-D Gaussian truncated at `4 sigma`.
fn gaussian_1d(sigma: f64) -> Vec<f64> {
    let rad = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-rad..=rad).map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with replicated borders, single channel.
pub fn gaussian_blur(plane: &ImagePlane, sigma: f64) -> ImagePlane {
    let (h, w) = plane.dims();
    let k = gaussian_1d(sigma);
    let rad = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane.get(r, clamp(c as isize + i as isize - rad, w), 0) as f64)
                .sum();
        }
    }
    ImagePlane::from_fn(h, w, 1, |r, c, _| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp[clamp(r as isize + i as isize - rad, h) * w + c])
            .sum::<f64>() as f32
    })
}

/// `V - blur(V) + 127`, clamped to [0, 255]; `v` is a single channel in
/// [0, 255]. The blur sigma is `H / 8`.
pub fn illumination_normalize(v: &ImagePlane) -> ImagePlane {
    let sigma = (v.height() as f64 / 8.0).max(0.5);
    let blur = gaussian_blur(v, sigma);
    ImagePlane::from_fn(v.height(), v.width(), 1, |r, c, _| {
        (v.get(r, c, 0) - blur.get(r, c, 0) + 127.0).clamp(0.0, 255.0)
    })
}

/// Applies [`illumination_normalize`] to the HSV value channel of an RGB
/// image in [0, 1], keeping hue and saturation.
pub fn normalize_rgb_illumination(rgb: &ImagePlane) -> ImagePlane {
    let (h, w) = rgb.dims();
    let v = ImagePlane::from_fn(h, w, 1, |r, c, _| rgb.pixel(r, c).iter().copied().fold(0.0f32, f32::max) * 255.0);
    let nv = illumination_normalize(&v);
    ImagePlane::from_fn(h, w, rgb.channels(), |r, c, k| {
        let (old, new) = (v.get(r, c, 0), nv.get(r, c, 0));
        if old <= 0.0 {
            new / 255.0
        } else {
            (rgb.get(r, c, k) * new / old).clamp(0.0, 1.0)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_map(h: usize, w: usize, row: usize, c0: usize, c1: usize) -> BinaryMap {
        BinaryMap::from_fn(h, w, |r, c| r == row && (c0..c1).contains(&c))
    }

    #[test]
    fn identical_maps() {
        let g = line_map(20, 20, 5, 2, 18);
        for m in [Matcher::Greedy, Matcher::Optimal] {
            let c = match_contours(&g, &g, 1.0, m).unwrap();
            assert_eq!(c, MatchCounts { tp: 16, fp: 0, fn_: 0 });
        }
    }

    #[test]
    fn empty_prediction() {
        let g = line_map(20, 20, 5, 2, 18);
        let c = match_contours(&BinaryMap::new(20, 20), &g, 1.0, Matcher::Greedy).unwrap();
        assert_eq!(c, MatchCounts { tp: 0, fp: 0, fn_: 16 });
    }

    #[test]
    fn shift_within_tolerance_on_320() {
        let cfg = EvalConfig::default();
        let tol = cfg.tolerance_px(320, 320);
        assert!((tol - 0.015 * 2f64.sqrt() * 320.0).abs() < 1e-9);
        assert!((tol - 6.788).abs() < 1e-3);
        let g = BinaryMap::from_fn(320, 320, |r, c| c == 100 && (50..250).contains(&r));
        let p = BinaryMap::from_fn(320, 320, |r, c| c == 103 && (50..250).contains(&r));
        let m = match_contours(&p, &g, tol, Matcher::Greedy).unwrap();
        assert_eq!(m.tp, 200);
        assert_eq!((m.fp, m.fn_), (0, 0));
        // Shift along the line: only the ends are lost.
        let p = BinaryMap::from_fn(320, 320, |r, c| c == 100 && (53..253).contains(&r));
        let m = match_contours(&p, &g, tol, Matcher::Greedy).unwrap();
        assert_eq!(m.fp, m.fn_);
        assert!(m.fp <= 3);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        assert!(match_contours(&BinaryMap::new(3, 3), &BinaryMap::new(3, 4), 1.0, Matcher::Greedy).is_err());
    }

    #[test]
    fn f_measure_values() {
        assert_eq!(f_measure(1.0, 1.0), 1.0);
        assert_eq!(f_measure(1.0, 0.0), 0.0);
        assert_eq!(f_measure(0.0, 0.0), 0.0);
        assert_eq!(f_measure(0.5, 0.5), 0.5);
    }

    #[test]
    fn greedy_can_be_suboptimal_but_optimal_is_not() {
        let h = 1;
        let w = 4;
        let pred = BinaryMap::from_points(h, w, &[(0, 1), (0, 2)]);
        let gt = BinaryMap::from_points(h, w, &[(0, 2), (0, 3)]);
        // Greedy: (0,2)-(0,2) at 0, then (0,1) has no partner within 1 of (0,3).
        let g = match_contours(&pred, &gt, 1.0, Matcher::Greedy).unwrap();
        let o = match_contours(&pred, &gt, 1.0, Matcher::Optimal).unwrap();
        assert_eq!(g.tp, 1);
        assert_eq!(o.tp, 2);
    }

    #[test]
    fn ods_identical_and_empty() {
        let g = line_map(16, 16, 8, 1, 15);
        let cfg = EvalConfig::default();
        let r = mf_ods(&[g.to_plane()], &[g.clone()], &cfg).unwrap();
        assert_eq!(r.best_f, 1.0);
        assert_eq!(r.best_threshold, cfg.threshold_grid()[0]);
        let r = mf_ods(&[ImagePlane::new(16, 16, 1)], &[g], &cfg).unwrap();
        assert_eq!(r.best_f, 0.0);
        assert!(r.rows.iter().all(|row| row.f() == 0.0));
        assert!(matches!(mf_ods(&[], &[], &cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn ods_grid() {
        let g = EvalConfig::default().threshold_grid();
        assert_eq!(g.len(), 99);
        assert!((g[0] - 0.01).abs() < 1e-6 && (g[98] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn ods_matches_brute_force_recomputation() {
        // Two hand-built maps with graded values.
        let g1 = line_map(12, 12, 4, 1, 11);
        let g2 = BinaryMap::from_fn(12, 12, |r, c| c == 6 && (2..10).contains(&r));
        let p1 = ImagePlane::from_fn(12, 12, 1, |r, c, _| if r == 4 && c < 11 { (c as f32 + 1.0) / 12.0 } else if r == 9 { 0.3 } else { 0.0 });
        let p2 = ImagePlane::from_fn(12, 12, 1, |r, c, _| if c == 7 && r < 10 { 0.55 } else if r == 0 { 0.9 } else { 0.0 });
        let cfg = EvalConfig::default();
        let r = mf_ods(&[p1.clone(), p2.clone()], &[g1.clone(), g2.clone()], &cfg).unwrap();
        let tol = cfg.tolerance_px(12, 12);
        // Independent recomputation: pixel-wise loops with the optimal matcher.
        let mut best: f64 = -1.0;
        for k in 1..=99 {
            let t = (k as f64 / 100.0) as f32;
            let mut c = MatchCounts::default();
            for (p, g) in [(&p1, &g1), (&p2, &g2)] {
                let b = BinaryMap::from_fn(12, 12, |rr, cc| p.get(rr, cc, 0) >= t);
                c = c + match_contours(&b, g, tol, Matcher::Optimal).unwrap();
            }
            best = best.max(c.f_measure());
        }
        assert!((r.best_f - best).abs() < 1e-12);
    }

    #[test]
    fn uniform_illumination_maps_to_127() {
        let v = ImagePlane::filled(32, 32, 1, 200.0);
        let n = illumination_normalize(&v);
        assert!(n.data().iter().all(|&x| (x - 127.0).abs() < 1e-3));
    }

    #[test]
    fn constant_offset_is_absorbed() {
        let v = ImagePlane::from_fn(32, 32, 1, |r, c, _| 60.0 + ((r * 7 + c * 3) % 11) as f32);
        let a = illumination_normalize(&v);
        let b = illumination_normalize(&v.map(|x| x + 40.0));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn ramp_trend_removed() {
        let (h, w) = (64, 64);
        let v = ImagePlane::from_fn(h, w, 1, |_, c, _| 255.0 * c as f32 / (w - 1) as f32);
        let n = illumination_normalize(&v);
        let mean = |c0: usize, c1: usize| {
            let mut s = 0.0;
            for r in 0..h {
                for c in c0..c1 {
                    s += n.get(r, c, 0) as f64;
                }
            }
            s / (h * (c1 - c0)) as f64
        };
        assert!((mean(0, w / 2) - 127.0).abs() <= 3.0);
        assert!((mean(w / 2, w) - 127.0).abs() <= 3.0);
    }

    #[test]
    fn rgb_normalization_keeps_range() {
        let img = ImagePlane::from_fn(16, 16, 3, |r, c, k| ((r + c + k) % 5) as f32 / 4.0);
        let n = normalize_rgb_illumination(&img);
        assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
