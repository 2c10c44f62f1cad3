//! Synthetic scenes: colored line/arc strokes over procedural backgrounds,
//! with exact 1-px ground truth.

use std::f64::consts::{PI, TAU};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{Point, PrimitiveKind};
use crate::image::{BinaryMap, ImagePlane};

/// Independent stream for item `index` of a given purpose.
pub fn item_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    rng
}

/// First 64-bit draw of [`item_rng`], for seeding per-item work.
pub fn item_seed(seed: u64, stream: u64, index: u64) -> u64 {
    rand::Rng::next_u64(&mut item_rng(seed, stream, index))
}

/// Geometry in pixel coordinates `(x, y)` = `(col, row)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Line { p0: Point, p1: Point },
    /// Counter-clockwise in image coordinates from `start` by `span` radians.
    Arc { center: Point, radius: f64, start: f64, span: f64 },
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Line { .. } => PrimitiveKind::LineSegment,
            Primitive::Arc { .. } => PrimitiveKind::CircularArc,
        }
    }

    /// Line angle in degrees in `[0, 180)` (lines only).
    pub fn line_angle_deg(&self) -> Option<f64> {
        match self {
            Primitive::Line { p0, p1 } => Some((p1[1] - p0[1]).atan2(p1[0] - p0[0]).to_degrees().rem_euclid(180.0)),
            Primitive::Arc { .. } => None,
        }
    }

    pub fn radius(&self) -> Option<f64> {
        match self {
            Primitive::Arc { radius, .. } => Some(*radius),
            Primitive::Line { .. } => None,
        }
    }

    /// Euclidean distance from `p` to the primitive.
    pub fn distance(&self, p: Point) -> f64 {
        match self {
            Primitive::Line { p0, p1 } => {
                let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
                let l2 = dx * dx + dy * dy;
                let t = if l2 == 0.0 {
                    0.0
                } else {
                    (((p[0] - p0[0]) * dx + (p[1] - p0[1]) * dy) / l2).clamp(0.0, 1.0)
                };
                (p[0] - p0[0] - t * dx).hypot(p[1] - p0[1] - t * dy)
            }
            Primitive::Arc { center, radius, start, span } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let rel = (dy.atan2(dx) - start).rem_euclid(TAU);
                if rel <= *span {
                    (dx.hypot(dy) - radius).abs()
                } else {
                    let end = |a: f64| [center[0] + radius * a.cos(), center[1] + radius * a.sin()];
                    let (e0, e1) = (end(*start), end(start + span));
                    (p[0] - e0[0]).hypot(p[1] - e0[1]).min((p[0] - e1[0]).hypot(p[1] - e1[1]))
                }
            }
        }
    }

    pub fn transformed(&self, t: &Similarity) -> Primitive {
        match self {
            Primitive::Line { p0, p1 } => Primitive::Line {
                p0: t.apply(*p0),
                p1: t.apply(*p1),
            },
            Primitive::Arc { center, radius, start, span } => Primitive::Arc {
                center: t.apply(*center),
                radius: radius * t.scale,
                start: start + t.rotation,
                span: *span,
            },
        }
    }

    fn point_at(&self, u: f64) -> Point {
        match self {
            Primitive::Line { p0, p1 } => [p0[0] + u * (p1[0] - p0[0]), p0[1] + u * (p1[1] - p0[1])],
            Primitive::Arc { center, radius, start, span } => {
                let a = start + span * u;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
        }
    }

    fn length(&self) -> f64 {
        match self {
            Primitive::Line { p0, p1 } => (p1[0] - p0[0]).hypot(p1[1] - p0[1]),
            Primitive::Arc { radius, span, .. } => radius * span,
        }
    }

    /// Ordered 8-connected pixel chain: dense samples rounded to the nearest
    /// pixel centre, then corner pixels pruned. Every pixel lies within
    /// `sqrt(2)/2` of the primitive.
    fn chain(&self) -> Vec<(i64, i64)> {
        let steps = (self.length() / 0.2).ceil().max(1.0) as usize;
        let mut out: Vec<(i64, i64)> = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let p = self.point_at(k as f64 / steps as f64);
            let px = (p[0].round() as i64, p[1].round() as i64);
            if out.last() != Some(&px) {
                out.push(px);
            }
        }
        prune_corners(out)
    }

    /// 1-px rasterization; pixels outside the frame are dropped.
    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMap {
        let mut map = BinaryMap::new(height, width);
        for (x, y) in self.chain() {
            if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                map.set(y as usize, x as usize, true);
            }
        }
        map
    }
}

/// Drops chain pixels whose neighbours in the chain already touch, so
/// every pixel keeps at most two 8-neighbours.
fn prune_corners(mut chain: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    let touch = |a: (i64, i64), b: (i64, i64)| (a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1;
    loop {
        let mut removed = false;
        let mut i = 1;
        while i + 1 < chain.len() {
            if touch(chain[i - 1], chain[i + 1]) {
                chain.remove(i);
                removed = true;
            } else {
                i += 1;
            }
        }
        if !removed {
            return chain;
        }
    }
}

/// Largest number of 8-neighbours over the foreground.
pub fn max_neighbor_count(map: &BinaryMap) -> usize {
    map.points()
        .into_iter()
        .map(|(r, c)| {
            let mut n = 0;
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    if (dr, dc) != (0, 0) && map.get_signed(r as isize + dr, c as isize + dc) {
                        n += 1;
                    }
                }
            }
            n
        })
        .max()
        .unwrap_or(0)
}

/// Rotation by `rotation` radians and uniform scaling about `pivot`,
/// followed by a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: f64,
    pub translation: Point,
    pub pivot: Point,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            translation: [0.0, 0.0],
            pivot: [0.0, 0.0],
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (p[0] - self.pivot[0], p[1] - self.pivot[1]);
        [
            self.scale * (c * x - s * y) + self.pivot[0] + self.translation[0],
            self.scale * (s * x + c * y) + self.pivot[1] + self.translation[1],
        ]
    }

    pub fn invert(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (
            p[0] - self.pivot[0] - self.translation[0],
            p[1] - self.pivot[1] - self.translation[1],
        );
        [
            (c * x + s * y) / self.scale + self.pivot[0],
            (-s * x + c * y) / self.scale + self.pivot[1],
        ]
    }
}

/// Saturated stroke colors.
pub const STROKE_PALETTE: [[f32; 3]; 6] = [
    [0.95, 0.15, 0.1],
    [0.1, 0.75, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.9],
    [0.1, 0.85, 0.9],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Stroke {
    pub primitive: Primitive,
    pub color: [f32; 3],
    pub width: f64,
}

/// Smooth background built from a few oriented sinusoids.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    base: [f32; 3],
    waves: Vec<([f64; 2], f64, [f32; 3])>,
}

impl Background {
    pub fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let base = [0.0; 3].map(|_: f32| rng.random_range(0.3f32..0.55));
        let waves = (0..3)
            .map(|_| {
                let ang: f64 = rng.random_range(0.0..PI);
                let freq = rng.random_range(0.5..3.0) * TAU / size;
                let phase = rng.random_range(0.0..TAU);
                let amp = [0.0; 3].map(|_: f32| rng.random_range(-0.08f32..0.08));
                ([freq * ang.cos(), freq * ang.sin()], phase, amp)
            })
            .collect();
        Self { base, waves }
    }

    pub fn at(&self, p: Point) -> [f32; 3] {
        let mut out = self.base;
        for (k, phase, amp) in &self.waves {
            let s = (k[0] * p[0] + k[1] * p[1] + phase).sin() as f32;
            for ch in 0..3 {
                out[ch] += amp[ch] * s;
            }
        }
        out.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub background: Background,
    pub strokes: Vec<Stroke>,
    /// Index of the contour primitive of interest in `strokes`.
    pub cpi: usize,
}

/// One rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: ImagePlane,
    pub mask: BinaryMap,
    pub truth: Primitive,
}

impl Scene {
    /// Renders under `t`; the background moves with the scene.
    pub fn render(&self, t: &Similarity) -> View {
        let (h, w) = (self.height, self.width);
        let strokes: Vec<Stroke> = self
            .strokes
            .iter()
            .map(|s| Stroke {
                primitive: s.primitive.transformed(t),
                color: s.color,
                width: s.width * t.scale,
            })
            .collect();
        let mut image = ImagePlane::new(h, w, 3);
        for r in 0..h {
            for c in 0..w {
                let p = [c as f64, r as f64];
                let mut px = self.background.at(t.invert(p));
                for s in &strokes {
                    let cover = (s.width / 2.0 + 0.5 - s.primitive.distance(p)).clamp(0.0, 1.0) as f32;
                    if cover > 0.0 {
                        for ch in 0..3 {
                            px[ch] = (1.0 - cover) * px[ch] + cover * s.color[ch];
                        }
                    }
                }
                image.pixel_mut(r, c).copy_from_slice(&px);
            }
        }
        let truth = strokes[self.cpi].primitive.clone();
        View {
            mask: truth.rasterize(h, w),
            image,
            truth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureConfig {
    pub size: usize,
    pub raw_count: usize,
    pub distractor_count: usize,
    pub heldout_count: usize,
    pub distractor_strokes: usize,
    pub stroke_width: f64,
    /// Largest view rotation between held-out support and query, degrees.
    pub view_rotation_deg: f64,
    pub view_scale: f64,
    pub view_shift: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            size: 160,
            raw_count: 32,
            distractor_count: 8,
            heldout_count: 20,
            distractor_strokes: 3,
            stroke_width: 2.5,
            view_rotation_deg: 20.0,
            view_scale: 0.1,
            view_shift: 0.05,
        }
    }
}

fn random_primitive(rng: &mut ChaCha8Rng, kind: PrimitiveKind, size: f64) -> Primitive {
    let mid = size / 2.0;
    match kind {
        PrimitiveKind::LineSegment => {
            let len = rng.random_range(0.45..0.65) * size;
            let ang = rng.random_range(0.0..PI);
            let c = [
                mid + rng.random_range(-0.08..0.08) * size,
                mid + rng.random_range(-0.08..0.08) * size,
            ];
            let d = [ang.cos() * len / 2.0, ang.sin() * len / 2.0];
            Primitive::Line {
                p0: [c[0] - d[0], c[1] - d[1]],
                p1: [c[0] + d[0], c[1] + d[1]],
            }
        }
        PrimitiveKind::CircularArc => {
            let radius = rng.random_range(0.2..0.3) * size;
            Primitive::Arc {
                center: [
                    mid + rng.random_range(-0.05..0.05) * size,
                    mid + rng.random_range(-0.05..0.05) * size,
                ],
                radius,
                start: rng.random_range(0.0..TAU),
                span: rng.random_range(0.75..1.25) * PI,
            }
        }
    }
}

fn distractor_primitive(rng: &mut ChaCha8Rng, size: f64) -> Primitive {
    let p = |rng: &mut ChaCha8Rng| [rng.random_range(0.05..0.95) * size, rng.random_range(0.05..0.95) * size];
    if rng.random_bool(0.5) {
        let p0 = p(rng);
        let ang: f64 = rng.random_range(0.0..TAU);
        let len = rng.random_range(0.2..0.45) * size;
        Primitive::Line {
            p0,
            p1: [p0[0] + len * ang.cos(), p0[1] + len * ang.sin()],
        }
    } else {
        Primitive::Arc {
            center: p(rng),
            radius: rng.random_range(0.1..0.25) * size,
            start: rng.random_range(0.0..TAU),
            span: rng.random_range(0.3..0.9) * PI,
        }
    }
}

/// Random scene with a CPI of the given kind; distractors never share its color.
pub fn random_scene(config: &FixtureConfig, rng: &mut ChaCha8Rng, kind: PrimitiveKind) -> Scene {
    let size = config.size as f64;
    let mut colors: Vec<usize> = (0..STROKE_PALETTE.len()).collect();
    // Fisher-Yates with the scene stream.
    for i in (1..colors.len()).rev() {
        let j = rng.random_range(0..=i);
        colors.swap(i, j);
    }
    let mut strokes = vec![Stroke {
        primitive: random_primitive(rng, kind, size),
        color: STROKE_PALETTE[colors[0]],
        width: config.stroke_width,
    }];
    for k in 0..config.distractor_strokes {
        strokes.push(Stroke {
            primitive: distractor_primitive(rng, size),
            color: STROKE_PALETTE[colors[1 + k % (colors.len() - 1)]],
            width: config.stroke_width,
        });
    }
    // Draw the CPI last so it is never occluded.
    strokes.rotate_left(1);
    let cpi = strokes.len() - 1;
    Scene {
        height: config.size,
        width: config.size,
        background: Background::random(rng, size),
        strokes,
        cpi,
    }
}

/// Kind used for item `index`: lines and arcs alternate.
pub fn kind_for(index: usize) -> PrimitiveKind {
    if index % 2 == 0 {
        PrimitiveKind::LineSegment
    } else {
        PrimitiveKind::CircularArc
    }
}

pub fn raw_sample(config: &FixtureConfig, seed: u64, index: usize) -> View {
    let mut rng = item_rng(seed, 1, index as u64);
    random_scene(config, &mut rng, kind_for(index)).render(&Similarity::identity())
}

/// Texture for the distractor pool (step-1/2/3 images of pair generation).
pub fn texture(config: &FixtureConfig, seed: u64, index: usize) -> ImagePlane {
    let mut rng = item_rng(seed, 2, index as u64);
    let size = config.size as f64;
    let bg = Background::random(&mut rng, size);
    let blobs: Vec<(Point, f64, [f32; 3])> = (0..6)
        .map(|_| {
            (
                [rng.random_range(0.0..size), rng.random_range(0.0..size)],
                rng.random_range(0.05..0.2) * size,
                [0.0; 3].map(|_: f32| rng.random_range(0.1f32..0.9)),
            )
        })
        .collect();
    ImagePlane::from_fn(config.size, config.size, 3, |r, c, k| {
        let p = [c as f64, r as f64];
        let mut v = bg.at(p)[k];
        for (centre, rad, col) in &blobs {
            let d = (p[0] - centre[0]).hypot(p[1] - centre[1]);
            let a = (1.0 - d / rad).clamp(0.0, 1.0) as f32;
            v = (1.0 - a) * v + a * col[k];
        }
        v
    })
}

/// Held-out support/query views of one scene related by a random
/// similarity about the image centre. Retries until the CPI stays inside a
/// 2-px margin in both views.
pub fn heldout_pair(config: &FixtureConfig, seed: u64, index: usize) -> (View, View) {
    let mut rng = item_rng(seed, 3, index as u64);
    let size = config.size as f64;
    let mid = (size - 1.0) / 2.0;
    loop {
        let scene = random_scene(config, &mut rng, kind_for(index));
        let draw = |rng: &mut ChaCha8Rng| Similarity {
            scale: 1.0 + rng.random_range(-1.0..=1.0) * config.view_scale,
            rotation: rng.random_range(-1.0..=1.0) * config.view_rotation_deg.to_radians(),
            translation: [
                rng.random_range(-1.0..=1.0) * config.view_shift * size,
                rng.random_range(-1.0..=1.0) * config.view_shift * size,
            ],
            pivot: [mid, mid],
        };
        let (ts, tq) = (draw(&mut rng), draw(&mut rng));
        let (s, q) = (scene.render(&ts), scene.render(&tq));
        let full = |v: &View| {
            let n = v.truth.chain().len();
            v.mask.count() == n
                && v.mask
                    .points()
                    .iter()
                    .all(|&(r, c)| r >= 2 && c >= 2 && r + 2 < config.size && c + 2 < config.size)
        };
        if full(&s) && full(&q) {
            return (s, q);
        }
    }
}

/// Stand-alone raw contour for thinning tests: a 1-px line or arc GT and its
/// dilation to width `2 * radius + 1` as a unit-valued plane.
pub fn thick_contour(rng: &mut ChaCha8Rng, size: usize, kind: PrimitiveKind, radius: usize) -> (BinaryMap, ImagePlane, Primitive) {
    let s = size as f64;
    loop {
        let prim = random_primitive(rng, kind, s);
        let gt = prim.rasterize(size, size);
        if gt.count() == prim.chain().len() && gt.count() >= 30 {
            let raw = gt.dilate(radius).to_plane();
            return (gt, raw, prim);
        }
    }
}
