//! Contour thinning by non-maximum suppression along Gabor-estimated normals.
//!
//! The raw map is smoothed with a small Gaussian, filtered with four ridge
//! shaped Gabor kernels whose normals point at 0°, 45°, 90° and 135°, and each
//! contour pixel is labelled with the strongest direction (or 0 when no
//! response beats the threshold `g0`). A pixel survives when its smoothed value
//! is at least as large as both neighbours along that normal.
//!
//! Angles follow image axes: `x` is the column (rightward), `y` the row
//! (downward). Label 1 compares left/right neighbours, 2 the `\` diagonal,
//! 3 up/down, 4 the `/` diagonal.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::fit_line_segment;
use crate::image::{BinaryMap, ImagePlane};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaborParams {
    pub sigma: f64,
    /// Normal direction in degrees.
    pub theta_deg: f64,
    pub lambda: f64,
    /// Spatial aspect ratio.
    pub gamma: f64,
    /// Phase offset in radians.
    pub psi: f64,
    pub size: usize,
}

impl Default for GaborParams {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            theta_deg: 0.0,
            lambda: 9.0,
            gamma: 0.3,
            psi: 0.0,
            size: 9,
        }
    }
}

impl GaborParams {
    pub fn validate(&self) -> Result<()> {
        if self.size % 2 == 0 || self.size == 0 {
            return Err(Error::InvalidParameter(format!("gabor size {} must be odd", self.size)));
        }
        if !(self.sigma > 0.0 && self.lambda > 0.0) {
            return Err(Error::InvalidParameter("gabor sigma and lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Square correlation kernel, row-major (`data[row * size + col]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    size: usize,
    data: Vec<f32>,
}

impl Kernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.size + col]
    }
}

/// Real even Gabor kernel
/// `exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x' / lambda + psi)`
/// with `x' = x cos(theta) + y sin(theta)`, `y' = -x sin(theta) + y cos(theta)`,
/// sampled on the integer grid centred at 0.
pub fn build_gabor_kernel(p: &GaborParams) -> Result<Kernel> {
    p.validate()?;
    let half = (p.size / 2) as i64;
    let (s, c) = p.theta_deg.to_radians().sin_cos();
    let mut data = Vec::with_capacity(p.size * p.size);
    for y in -half..=half {
        for x in -half..=half {
            let (x, y) = (x as f64, y as f64);
            let xr = x * c + y * s;
            let yr = -x * s + y * c;
            let env = (-(xr * xr + p.gamma * p.gamma * yr * yr) / (2.0 * p.sigma * p.sigma)).exp();
            data.push((env * (std::f64::consts::TAU * xr / p.lambda + p.psi).cos()) as f32);
        }
    }
    Ok(Kernel { size: p.size, data })
}

/// Normalized (sum 1) Gaussian kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel> {
    if size % 2 == 0 || sigma <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "gaussian kernel needs odd size and positive sigma, got {size}, {sigma}"
        )));
    }
    let half = (size / 2) as i64;
    let raw: Vec<f64> = (-half..=half)
        .flat_map(|y| (-half..=half).map(move |x| (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp()))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(Kernel {
        size,
        data: raw.iter().map(|v| (v / total) as f32).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    pub gabor: GaborParams,
    pub threshold: f64,
    pub smooth_size: usize,
    pub smooth_sigma: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            gabor: GaborParams::default(),
            threshold: 2.0,
            smooth_size: 5,
            smooth_sigma: 1.0,
        }
    }
}

/// The four oriented kernels, the direction threshold `g0` and the
/// smoothing kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborBank {
    kernels: [Kernel; 4],
    threshold: f32,
    smoothing: Kernel,
}

pub const BANK_ANGLES_DEG: [f64; 4] = [0.0, 45.0, 90.0, 135.0];

impl GaborBank {
    pub fn new(config: &NmsConfig) -> Result<Self> {
        let k = |theta_deg| {
            build_gabor_kernel(&GaborParams {
                theta_deg,
                ..config.gabor
            })
        };
        Ok(Self {
            kernels: [k(0.0)?, k(45.0)?, k(90.0)?, k(135.0)?],
            threshold: config.threshold as f32,
            smoothing: gaussian_kernel(config.smooth_size, config.smooth_sigma)?,
        })
    }

    pub fn kernels(&self) -> &[Kernel; 4] {
        &self.kernels
    }

    pub fn threshold(&self) -> f32 {
        self.threshold
    }

    pub fn smoothing(&self) -> &Kernel {
        &self.smoothing
    }

    /// Plain-text listing of every kernel, for golden comparisons.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut section = |name: String, k: &Kernel| {
            let _ = writeln!(out, "# {name} {}x{}", k.size, k.size);
            for row in k.data.chunks(k.size) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        };
        for (k, theta) in self.kernels.iter().zip(BANK_ANGLES_DEG) {
            section(format!("gabor theta={theta}"), k);
        }
        section("gaussian".to_string(), &self.smoothing);
        let _ = writeln!(out, "# threshold {}", self.threshold);
        out
    }
}

impl Default for GaborBank {
    fn default() -> Self {
        Self::new(&NmsConfig::default()).expect("default parameters are valid")
    }
}

/// Zero-padded correlation of a single-channel plane.
pub fn correlate(plane: &ImagePlane, kernel: &Kernel) -> ImagePlane {
    let (h, w) = plane.dims();
    let half = (kernel.size / 2) as isize;
    let src = plane.channel(0);
    let mut out = ImagePlane::new(h, w, 1);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f32;
            for kr in 0..kernel.size {
                let rr = r as isize + kr as isize - half;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for kc in 0..kernel.size {
                    let cc = c as isize + kc as isize - half;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    acc += kernel.at(kr, kc) * src.get(rr as usize, cc as usize, 0);
                }
            }
            out.set(r, c, 0, acc);
        }
    }
    out
}

pub fn smooth(contour: &ImagePlane, bank: &GaborBank) -> ImagePlane {
    correlate(contour, &bank.smoothing)
}

pub fn gabor_responses(smoothed: &ImagePlane, bank: &GaborBank) -> [ImagePlane; 4] {
    bank.kernels.each_ref().map(|k| correlate(smoothed, k))
}

/// Per-pixel direction label in `0..=4`; 0 means no contour direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl DirectionMap {
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.width + c]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Argmax over `(g0, G1, .., G4)`, ties resolved toward the lower index;
/// forced to 0 wherever the contour is 0.
pub fn direction_map(contour: &ImagePlane, responses: &[ImagePlane; 4], g0: f32) -> DirectionMap {
    let (h, w) = contour.dims();
    let mut labels = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            if contour.get(r, c, 0) == 0.0 {
                continue;
            }
            let mut best = g0;
            let mut label = 0u8;
            for (k, g) in responses.iter().enumerate() {
                let v = g.get(r, c, 0);
                if v > best {
                    best = v;
                    label = k as u8 + 1;
                }
            }
            labels[r * w + c] = label;
        }
    }
    DirectionMap {
        height: h,
        width: w,
        labels,
    }
}

/// Neighbour offsets `(dr, dc)` compared for each direction label.
const NEIGHBOURS: [[(isize, isize); 2]; 4] = [
    [(0, -1), (0, 1)],
    [(-1, -1), (1, 1)],
    [(-1, 0), (1, 0)],
    [(1, -1), (-1, 1)],
];

/// Thins a raw contour map to single-pixel width. Kept pixels retain their
/// original value; all others become 0.
pub fn nms_thin(contour: &ImagePlane, bank: &GaborBank) -> ImagePlane {
    nms_thin_with_directions(contour, bank).0
}

pub fn nms_thin_with_directions(contour: &ImagePlane, bank: &GaborBank) -> (ImagePlane, DirectionMap) {
    let contour = contour.channel(0);
    let (h, w) = contour.dims();
    let s = smooth(&contour, bank);
    let responses = gabor_responses(&s, bank);
    let dirs = direction_map(&contour, &responses, bank.threshold);
    let at = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            s.get(r as usize, c as usize, 0)
        }
    };
    let mut out = ImagePlane::new(h, w, 1);
    for r in 0..h {
        for c in 0..w {
            let label = dirs.get(r, c);
            if label == 0 {
                continue;
            }
            let [(r1, c1), (r2, c2)] = NEIGHBOURS[label as usize - 1];
            let (ri, ci) = (r as isize, c as isize);
            let here = s.get(r, c, 0);
            if here >= at(ri + r1, ci + c1).max(at(ri + r2, ci + c2)) {
                out.set(r, c, 0, contour.get(r, c, 0));
            }
        }
    }
    (out, dirs)
}

/// Thinned-pixel count on each digital normal cross-section of a 1-px
/// skeleton.
///
/// The local tangent at every skeleton pixel comes from a total least squares
/// fit over skeleton pixels within a 7x7 window; the cross-section is the
/// ray of `2 * reach + 1` pixels along the 8-neighbour step nearest to the
/// normal. Skeleton pixels closer than `end_margin` to a chain end (a pixel
/// with at most one neighbour) are skipped.
pub fn cross_section_counts(thin: &BinaryMap, skeleton: &BinaryMap, reach: usize, end_margin: f64) -> Vec<usize> {
    let pts = skeleton.points();
    let neighbours = |r: usize, c: usize| {
        let mut k = 0;
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                if (dr, dc) != (0, 0) && skeleton.get_signed(r as isize + dr, c as isize + dc) {
                    k += 1;
                }
            }
        }
        k
    };
    let ends: Vec<(usize, usize)> = pts.iter().copied().filter(|&(r, c)| neighbours(r, c) <= 1).collect();
    let dist = |a: (usize, usize), b: (usize, usize)| (a.0 as f64 - b.0 as f64).hypot(a.1 as f64 - b.1 as f64);
    let reach = reach as isize;
    let mut out = Vec::new();
    for &p in &pts {
        if ends.iter().any(|&e| dist(e, p) < end_margin) {
            continue;
        }
        let near: Vec<[f64; 2]> = pts
            .iter()
            .filter(|&&q| q.0.abs_diff(p.0) <= 3 && q.1.abs_diff(p.1) <= 3)
            .map(|&(r, c)| [c as f64, r as f64])
            .collect();
        let Ok(fit) = fit_line_segment(&near) else {
            continue;
        };
        let normal_deg = fit.direction[0].atan2(-fit.direction[1]).to_degrees().rem_euclid(180.0);
        let (dr, dc) = [(0, 1), (1, 1), (1, 0), (1, -1)][((normal_deg / 45.0).round() as usize) % 4];
        let count = (-reach..=reach)
            .filter(|&k| thin.get_signed(p.0 as isize + k * dr, p.1 as isize + k * dc))
            .count();
        out.push(count);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> GaborBank {
        GaborBank::default()
    }

    #[test]
    fn kernels_are_even_symmetric_with_unit_centre() {
        for theta_deg in [0.0, 30.0, 45.0, 90.0, 135.0] {
            let k = build_gabor_kernel(&GaborParams {
                theta_deg,
                ..Default::default()
            })
            .unwrap();
            assert_eq!(k.size(), 9);
            assert_eq!(k.at(4, 4), 1.0);
            for r in 0..9 {
                for c in 0..9 {
                    assert_eq!(k.at(r, c), k.at(8 - r, 8 - c));
                }
            }
        }
    }

    #[test]
    fn zero_and_ninety_degrees_are_transposes() {
        let b = bank();
        let [k0, _, k90, _] = b.kernels();
        for r in 0..9 {
            for c in 0..9 {
                assert!((k0.at(r, c) - k90.at(c, r)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn even_size_rejected() {
        let p = GaborParams {
            size: 8,
            ..Default::default()
        };
        assert!(build_gabor_kernel(&p).is_err());
    }

    #[test]
    fn zero_map_stays_zero() {
        let z = ImagePlane::new(20, 20, 1);
        let responses = gabor_responses(&z, &bank());
        assert!(responses.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(nms_thin(&z, &bank()), z);
    }

    #[test]
    fn horizontal_line_selects_vertical_normal() {
        let line = ImagePlane::from_fn(21, 31, 1, |r, c, _| if r == 10 && (5..26).contains(&c) { 1.0 } else { 0.0 });
        let b = bank();
        let s = smooth(&line, &b);
        let g = gabor_responses(&s, &b);
        for c in 9..22 {
            let best = (0..4).max_by(|&a, &bb| g[a].get(10, c, 0).total_cmp(&g[bb].get(10, c, 0))).unwrap();
            assert_eq!(best, 2, "column {c}");
        }
        let d = direction_map(&line, &g, b.threshold());
        assert!((9..22).all(|c| d.get(10, c) == 3));
    }

    #[test]
    fn responses_are_linear_in_intensity() {
        let img = ImagePlane::from_fn(16, 16, 1, |r, c, _| ((r * 3 + c * 5) % 7) as f32 / 7.0);
        let twice = img.map(|v| 2.0 * v);
        let b = bank();
        let (g1, g2) = (gabor_responses(&img, &b), gabor_responses(&twice, &b));
        for (a, bb) in g1.iter().zip(&g2) {
            for (x, y) in a.data().iter().zip(bb.data()) {
                assert!((2.0 * x - y).abs() <= 1e-5 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn weak_responses_give_label_zero() {
        let contour = ImagePlane::filled(6, 6, 1, 1.0);
        let weak: [ImagePlane; 4] = std::array::from_fn(|k| ImagePlane::filled(6, 6, 1, 1.9 - k as f32 * 0.1));
        assert!(direction_map(&contour, &weak, 2.0).labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn contour_zero_forces_label_zero() {
        let contour = ImagePlane::new(4, 4, 1);
        let huge: [ImagePlane; 4] = std::array::from_fn(|_| ImagePlane::filled(4, 4, 1, 1e6));
        assert!(direction_map(&contour, &huge, 2.0).labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn tie_with_threshold_goes_to_zero() {
        let contour = ImagePlane::filled(1, 1, 1, 1.0);
        let mut g: [ImagePlane; 4] = std::array::from_fn(|_| ImagePlane::filled(1, 1, 1, 0.0));
        g[0] = ImagePlane::filled(1, 1, 1, 2.0);
        assert_eq!(direction_map(&contour, &g, 2.0).get(0, 0), 0);
        g[1] = ImagePlane::filled(1, 1, 1, 3.0);
        g[2] = ImagePlane::filled(1, 1, 1, 3.0);
        assert_eq!(direction_map(&contour, &g, 2.0).get(0, 0), 2);
    }

    fn bar() -> ImagePlane {
        // 3 px wide, 40 px long, centred.
        ImagePlane::from_fn(21, 60, 1, |r, c, _| if (9..=11).contains(&r) && (10..50).contains(&c) { 1.0 } else { 0.0 })
    }

    #[test]
    fn bar_thins_to_centre_row() {
        let out = nms_thin(&bar(), &bank());
        for c in 14..46 {
            let kept: Vec<usize> = (0..21).filter(|&r| out.get(r, c, 0) > 0.0).collect();
            assert_eq!(kept, vec![10], "column {c}");
        }
    }

    #[test]
    fn output_is_subset_with_original_values() {
        let raw = ImagePlane::from_fn(30, 30, 1, |r, c, _| {
            let d = ((r as f32 - 15.0).powi(2) + (c as f32 - 15.0).powi(2)).sqrt();
            if (d - 9.0).abs() < 2.0 { 0.5 + 0.1 * ((r + c) % 5) as f32 } else { 0.0 }
        });
        let out = nms_thin(&raw, &bank());
        for (o, i) in out.data().iter().zip(raw.data()) {
            assert!(*o == 0.0 || o == i);
        }
    }

    #[test]
    fn thinning_is_idempotent_on_bar() {
        let once = nms_thin(&bar(), &bank());
        assert_eq!(nms_thin(&once, &bank()), once);
    }

    #[test]
    fn cross_sections_of_a_thin_diagonal_hold_one_pixel() {
        let skel = BinaryMap::from_fn(30, 30, |r, c| r == c && (3..27).contains(&r));
        let counts = cross_section_counts(&skel, &skel, 3, 4.0);
        assert_eq!(counts.len(), 24 - 6);
        assert!(counts.iter().all(|&n| n == 1));
        let thick = skel.dilate(2);
        assert!(cross_section_counts(&thick, &skel, 3, 4.0).iter().all(|&n| n == 3));
    }

    #[test]
    fn cross_sections_follow_the_bar_normal() {
        let skel = BinaryMap::from_fn(21, 60, |r, c| r == 10 && (10..50).contains(&c));
        let thin = BinaryMap::threshold(&nms_thin(&bar(), &bank()), 0.5);
        let counts = cross_section_counts(&thin, &skel, 3, 4.0);
        assert!(!counts.is_empty());
        assert!(counts.iter().all(|&n| n == 1));
    }

    #[test]
    fn dump_lists_all_kernels() {
        let d = bank().dump();
        assert_eq!(d.matches("# gabor").count(), 4);
        assert!(d.contains("# gaussian 5x5"));
        assert!(d.lines().any(|l| l == "# threshold 2"));
    }
}
