//! Support/query pair generation from one annotated raw sample: mix-up,
//! cutout patch, surround padding, affine augmentation, and a crop that
//! keeps the whole contour.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMap, ImagePlane};

#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub image: ImagePlane,
    pub mask: BinaryMap,
}

impl RawSample {
    pub fn new(image: ImagePlane, mask: BinaryMap) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::DimMismatch(format!(
                "image {:?} vs mask {:?}",
                image.dims(),
                mask.dims()
            )));
        }
        if mask.is_empty() {
            return Err(Error::EmptyMask { index: 0 });
        }
        Ok(Self { image, mask })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub support_image: ImagePlane,
    pub support_mask: BinaryMap,
    pub query_image: ImagePlane,
    pub query_mask: BinaryMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Masks dilated to `train_dilate_px` width.
    Train,
    /// Masks kept 1-px.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flips: bool,
    pub mixup_max: f32,
    pub cutout: bool,
    /// Patch area as a fraction of the image, `[min, max]`.
    pub cutout_area: [f64; 2],
    pub cutout_attempts: usize,
    pub pad_factor: f64,
    /// Side fraction of the distractor kept by the centre crop before padding.
    pub pad_crop: f64,
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub scale: [f64; 2],
    /// Translation as a fraction of the padded size.
    pub translation: f64,
    /// Largest relative change of aspect ratio.
    pub aspect: f64,
    pub affine_attempts: usize,
    pub dropout_max_rects: usize,
    /// Largest area of one dropout rectangle as a fraction of the image.
    pub dropout_max_area: f64,
    pub jitter_gain: f32,
    pub jitter_offset: f32,
    /// Use the centred window in the final crop instead of a random one.
    pub center_crop: bool,
    pub train_dilate_px: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flips: true,
            mixup_max: 0.3,
            cutout: true,
            cutout_area: [0.1, 0.3],
            cutout_attempts: 64,
            pad_factor: 1.4,
            pad_crop: 0.8,
            rotation_deg: 15.0,
            shear_deg: 15.0,
            scale: [0.9, 1.1],
            translation: 0.1,
            aspect: 0.1,
            affine_attempts: 32,
            dropout_max_rects: 3,
            dropout_max_area: 0.05,
            jitter_gain: 0.1,
            jitter_offset: 0.05,
            center_crop: false,
            train_dilate_px: 3,
        }
    }
}

impl AugmentConfig {
    /// Every random step disabled: the pipeline returns its input.
    pub fn identity() -> Self {
        Self {
            flips: false,
            mixup_max: 0.0,
            cutout: false,
            rotation_deg: 0.0,
            shear_deg: 0.0,
            scale: [1.0, 1.0],
            translation: 0.0,
            aspect: 0.0,
            dropout_max_rects: 0,
            jitter_gain: 0.0,
            jitter_offset: 0.0,
            center_crop: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(0.0..=1.0).contains(&self.mixup_max) {
            return bad("mixup_max must be in [0, 1]");
        }
        if !(self.pad_factor > 1.0) {
            return bad("pad_factor must exceed 1");
        }
        if !(self.pad_crop > 0.0 && self.pad_crop <= 1.0) {
            return bad("pad_crop must be in (0, 1]");
        }
        if self.cutout_area[0] <= 0.0 || self.cutout_area[0] > self.cutout_area[1] || self.cutout_area[1] > 1.0 {
            return bad("cutout_area must satisfy 0 < min <= max <= 1");
        }
        if self.scale[0] <= 0.0 || self.scale[0] > self.scale[1] {
            return bad("scale must satisfy 0 < min <= max");
        }
        if self.affine_attempts == 0 {
            return bad("affine_attempts must be positive");
        }
        if self.train_dilate_px == 0 || self.train_dilate_px % 2 == 0 {
            return bad("train_dilate_px must be odd");
        }
        Ok(())
    }
}

/// Random draws of one pass, for auditing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PassTrace {
    pub gamma: f32,
    pub cutout_skipped: bool,
    pub pad_dims: (usize, usize),
    pub affine_attempts: usize,
    pub crop_origin: (usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairTrace {
    pub flip_h: bool,
    pub flip_v: bool,
    pub support: PassTrace,
    pub query: PassTrace,
}

/// Step 1: `(1 - gamma) * a + gamma * b`.
pub fn mixup(a: &ImagePlane, b: &ImagePlane, gamma: f32) -> Result<ImagePlane> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::DimMismatch(format!("mixup {:?} vs {:?}", a.dims(), b.dims())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| (1.0 - gamma) * x + gamma * y).collect();
    Ok(ImagePlane::from_data(a.height(), a.width(), a.channels(), data))
}

fn fit_to(img: &ImagePlane, h: usize, w: usize) -> ImagePlane {
    if img.dims() == (h, w) {
        img.clone()
    } else {
        img.resize_bilinear(h, w)
    }
}

/// Summed-area table of the mask for O(1) rectangle queries.
struct MaskIntegral {
    w: usize,
    sums: Vec<usize>,
}

impl MaskIntegral {
    fn new(mask: &BinaryMap) -> Self {
        let (h, w) = mask.dims();
        let mut sums = vec![0; (h + 1) * (w + 1)];
        for r in 0..h {
            for c in 0..w {
                sums[(r + 1) * (w + 1) + c + 1] =
                    mask.get(r, c) as usize + sums[r * (w + 1) + c + 1] + sums[(r + 1) * (w + 1) + c] - sums[r * (w + 1) + c];
            }
        }
        Self { w, sums }
    }

    fn count(&self, r0: usize, c0: usize, h: usize, w: usize) -> usize {
        let s = |r: usize, c: usize| self.sums[r * (self.w + 1) + c];
        s(r0 + h, c0 + w) + s(r0, c0) - s(r0, c0 + w) - s(r0 + h, c0)
    }
}

/// Step 2: pastes a shrunk random crop of `source` without covering any
/// mask pixel. Returns `None` when no placement is found in the allotted
/// attempts.
pub fn cutout_patch(
    image: &ImagePlane,
    mask: &BinaryMap,
    source: &ImagePlane,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Option<ImagePlane> {
    let (h, w) = image.dims();
    let (sh, sw) = source.dims();
    // Random crop of the source, 30-100% of each side.
    let ch = ((sh as f64 * rng.random_range(0.3..=1.0)).round() as usize).clamp(1, sh);
    let cw = ((sw as f64 * rng.random_range(0.3..=1.0)).round() as usize).clamp(1, sw);
    let patch = source.crop(rng.random_range(0..=sh - ch), rng.random_range(0..=sw - cw), ch, cw);
    let area = rng.random_range(config.cutout_area[0]..=config.cutout_area[1]) * (h * w) as f64;
    let aspect: f64 = rng.random_range(0.5f64..=2.0);
    let ph = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let pw = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    let patch = patch.resize_bilinear(ph, pw);
    let integral = MaskIntegral::new(mask);
    for _ in 0..config.cutout_attempts {
        let (r0, c0) = (rng.random_range(0..=h - ph), rng.random_range(0..=w - pw));
        if integral.count(r0, c0, ph, pw) == 0 {
            let mut out = image.clone();
            out.paste(&patch, r0, c0);
            return Some(out);
        }
    }
    None
}

/// Padded size for a pad factor.
pub fn padded_dims(h: usize, w: usize, pad_factor: f64) -> (usize, usize) {
    (
        (h as f64 * pad_factor).round() as usize,
        (w as f64 * pad_factor).round() as usize,
    )
}

/// Offset of the original inside the padded canvas.
fn pad_offset(h: usize, w: usize, ph: usize, pw: usize) -> (usize, usize) {
    ((ph - h) / 2, (pw - w) / 2)
}

/// Step 3: centres the image on a resized centre crop of `backdrop`; the
/// mask is zero-padded.
pub fn pad_surround(
    image: &ImagePlane,
    mask: &BinaryMap,
    backdrop: &ImagePlane,
    pad_factor: f64,
    pad_crop: f64,
) -> (ImagePlane, BinaryMap) {
    let (h, w) = image.dims();
    let (ph, pw) = padded_dims(h, w, pad_factor);
    let (bh, bw) = backdrop.dims();
    let (ch, cw) = (
        ((bh as f64 * pad_crop).round() as usize).clamp(1, bh),
        ((bw as f64 * pad_crop).round() as usize).clamp(1, bw),
    );
    let mut canvas = backdrop.crop((bh - ch) / 2, (bw - cw) / 2, ch, cw).resize_bilinear(ph, pw);
    let (r0, c0) = pad_offset(h, w, ph, pw);
    canvas.paste(image, r0, c0);
    (canvas, mask.pad_to(ph, pw, r0, c0))
}

/// Inverse-mapped 2x3 affine about the image centre: `src = M * (dst - c) + c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    /// Forward linear part (row-major 2x2) acting on `(x, y)`.
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// `R(rot) * Shear(shear) * diag(sx, sy)`.
    pub fn compose(scale_x: f64, scale_y: f64, rotation_deg: f64, shear_deg: f64, translation: [f64; 2]) -> Self {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        let k = shear_deg.to_radians().tan();
        let rs = [[c, c * k - s], [s, s * k + c]];
        Self {
            linear: [
                [rs[0][0] * scale_x, rs[0][1] * scale_y],
                [rs[1][0] * scale_x, rs[1][1] * scale_y],
            ],
            translation,
        }
    }

    fn sample(rng: &mut ChaCha8Rng, config: &AugmentConfig, h: usize, w: usize) -> Self {
        let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let scale = if config.scale[1] > config.scale[0] {
            rng.random_range(config.scale[0]..=config.scale[1])
        } else {
            config.scale[0]
        };
        let aspect = 1.0 + sym(rng, config.aspect);
        let rot = sym(rng, config.rotation_deg);
        let shear = sym(rng, config.shear_deg);
        let t = [sym(rng, config.translation) * w as f64, sym(rng, config.translation) * h as f64];
        Self::compose(scale * aspect.sqrt(), scale / aspect.sqrt(), rot, shear, t)
    }

    fn inverse_linear(&self) -> [[f64; 2]; 2] {
        let [[a, b], [c, d]] = self.linear;
        let det = a * d - b * c;
        [[d / det, -b / det], [-c / det, a / det]]
    }

    /// Warps image (bilinear, replicated border) and mask (nearest, zero
    /// outside) with the same transform.
    pub fn warp(&self, image: &ImagePlane, mask: &BinaryMap) -> (ImagePlane, BinaryMap) {
        if self.is_identity() {
            return (image.clone(), mask.clone());
        }
        let (h, w) = image.dims();
        let ch = image.channels();
        let inv = self.inverse_linear();
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let mut out = ImagePlane::new(h, w, ch);
        let mut out_mask = BinaryMap::new(h, w);
        for r in 0..h {
            for c in 0..w {
                let (dx, dy) = (c as f64 - cx - self.translation[0], r as f64 - cy - self.translation[1]);
                let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
                let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
                let (nr, nc) = (sy.round(), sx.round());
                if nr >= 0.0 && nc >= 0.0 && (nr as usize) < h && (nc as usize) < w {
                    out_mask.set(r, c, mask.get(nr as usize, nc as usize));
                }
                let x = sx.clamp(0.0, w as f64 - 1.0);
                let y = sy.clamp(0.0, h as f64 - 1.0);
                let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
                for k in 0..ch {
                    let top = image.get(y0, x0, k) * (1.0 - fx) + image.get(y0, x1, k) * fx;
                    let bot = image.get(y1, x0, k) * (1.0 - fx) + image.get(y1, x1, k) * fx;
                    out.set(r, c, k, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        (out, out_mask)
    }
}

/// Coarse dropout and per-channel gain/offset jitter; image only.
fn photometric(image: &mut ImagePlane, config: &AugmentConfig, rng: &mut ChaCha8Rng) {
    let (h, w) = image.dims();
    if config.dropout_max_rects > 0 && config.dropout_max_area > 0.0 {
        let n = rng.random_range(0..=config.dropout_max_rects);
        for _ in 0..n {
            let area = rng.random_range(0.0..=config.dropout_max_area) * (h * w) as f64;
            let aspect: f64 = rng.random_range(0.5f64..=2.0);
            let rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
            let rw = ((area / aspect).sqrt().round() as usize).clamp(1, w);
            let (r0, c0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
            for r in r0..r0 + rh {
                for c in c0..c0 + rw {
                    image.pixel_mut(r, c).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    if config.jitter_gain > 0.0 || config.jitter_offset > 0.0 {
        let ch = image.channels();
        let sym = |rng: &mut ChaCha8Rng, m: f32| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let jit: Vec<(f32, f32)> = (0..ch)
            .map(|_| (1.0 + sym(rng, config.jitter_gain), sym(rng, config.jitter_offset)))
            .collect();
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            let (g, o) = jit[i % ch];
            *v = (*v * g + o).clamp(0.0, 1.0);
        }
    }
}

/// Step 4: affine warp (resampled until the mask survives and still fits
/// an `h x w` window), then photometric changes.
pub fn augment(
    image: &ImagePlane,
    mask: &BinaryMap,
    out_h: usize,
    out_w: usize,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ImagePlane, BinaryMap, usize)> {
    let (h, w) = image.dims();
    for attempt in 1..=config.affine_attempts {
        let t = Affine::sample(rng, config, h, w);
        let (mut img, m) = t.warp(image, mask);
        let fits = m
            .bbox()
            .is_some_and(|(r0, c0, r1, c1)| r1 - r0 < out_h && c1 - c0 < out_w);
        if fits {
            photometric(&mut img, config, rng);
            return Ok((img, m, attempt));
        }
    }
    Err(Error::AugmentExhausted {
        attempts: config.affine_attempts,
    })
}

/// Step 5: an `h x w` window containing every mask pixel.
pub fn crop_back(
    image: &ImagePlane,
    mask: &BinaryMap,
    h: usize,
    w: usize,
    center: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ImagePlane, BinaryMap, (usize, usize))> {
    let (ih, iw) = mask.dims();
    let no_window = |eh: usize, ew: usize| Error::NoCropWindow {
        extent_h: eh,
        extent_w: ew,
        height: h,
        width: w,
    };
    let (r0, c0, r1, c1) = mask.bbox().ok_or(Error::EmptyMask { index: 0 })?;
    if ih < h || iw < w || r1 - r0 >= h || c1 - c0 >= w {
        return Err(no_window(r1 - r0 + 1, c1 - c0 + 1));
    }
    let (rlo, rhi) = ((r1 + 1).saturating_sub(h), r0.min(ih - h));
    let (clo, chi) = ((c1 + 1).saturating_sub(w), c0.min(iw - w));
    let (top, left) = if center {
        let (cr, cc) = pad_offset(h, w, ih, iw);
        (cr.clamp(rlo, rhi), cc.clamp(clo, chi))
    } else {
        (rng.random_range(rlo..=rhi), rng.random_range(clo..=chi))
    };
    Ok((image.crop(top, left, h, w), mask.crop(top, left, h, w), (top, left)))
}

fn pick<'a>(pool: &'a [ImagePlane], rng: &mut ChaCha8Rng) -> &'a ImagePlane {
    &pool[rng.random_range(0..pool.len())]
}

fn run_pass(
    raw: &RawSample,
    pool: &[ImagePlane],
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ImagePlane, BinaryMap, PassTrace)> {
    let (h, w) = raw.image.dims();
    let mut trace = PassTrace::default();
    let (i1, i2, i3) = (pick(pool, rng), pick(pool, rng), pick(pool, rng));
    trace.gamma = if config.mixup_max > 0.0 {
        rng.random_range(0.0..=config.mixup_max)
    } else {
        0.0
    };
    let mut img = mixup(&raw.image, &fit_to(i1, h, w), trace.gamma)?;
    if config.cutout {
        match cutout_patch(&img, &raw.mask, i2, config, rng) {
            Some(p) => img = p,
            None => trace.cutout_skipped = true,
        }
    }
    let (img, mask) = pad_surround(&img, &raw.mask, i3, config.pad_factor, config.pad_crop);
    trace.pad_dims = img.dims();
    let (img, mask, attempts) = augment(&img, &mask, h, w, config, rng)?;
    trace.affine_attempts = attempts;
    let (img, mask, origin) = crop_back(&img, &mask, h, w, config.center_crop, rng)?;
    trace.crop_origin = origin;
    Ok((img, mask, trace))
}

/// Runs steps 1-5 twice from one seeded stream: support first, then query.
/// Flips are drawn once and shared by both passes.
pub fn generate_pair(
    raw: &RawSample,
    pool: &[ImagePlane],
    config: &AugmentConfig,
    mode: MaskMode,
    seed: u64,
) -> Result<(SamplePair, PairTrace)> {
    config.validate()?;
    if raw.mask.is_empty() {
        return Err(Error::EmptyMask { index: 0 });
    }
    if pool.is_empty() {
        return Err(Error::InvalidParameter("distractor pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = PairTrace::default();
    let mut sample = raw.clone();
    if config.flips {
        trace.flip_h = rng.random_bool(0.5);
        trace.flip_v = rng.random_bool(0.5);
        if trace.flip_h {
            sample.image = sample.image.flip_horizontal();
            sample.mask = sample.mask.flip_horizontal();
        }
        if trace.flip_v {
            sample.image = sample.image.flip_vertical();
            sample.mask = sample.mask.flip_vertical();
        }
    }
    let (si, sm, st) = run_pass(&sample, pool, config, &mut rng)?;
    let (qi, qm, qt) = run_pass(&sample, pool, config, &mut rng)?;
    trace.support = st;
    trace.query = qt;
    let widen = |m: BinaryMap| match mode {
        MaskMode::Train => m.dilate(config.train_dilate_px / 2),
        MaskMode::Test => m,
    };
    Ok((
        SamplePair {
            support_image: si,
            support_mask: widen(sm),
            query_image: qi,
            query_mask: widen(qm),
        },
        trace,
    ))
}
