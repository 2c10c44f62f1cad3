//! Line-segment and circular-arc fitting for thinned contour pixels.
//!
//! Points are `(x, y)` = `(column, row)` in pixel units.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::image::BinaryMap;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all points coincide")]
    Coincident,
    #[error("points are collinear; circle system is singular")]
    Collinear,
}

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct LineSegmentFit {
    /// Unit direction, sign-normalized so that `x > 0`, or `y > 0` when `x == 0`.
    pub direction: Point,
    pub centroid: Point,
    /// Extreme projections of the input points onto the fitted line.
    pub endpoints: [Point; 2],
    /// Root-mean-square perpendicular residual.
    pub rms: f64,
    pub count: usize,
}

impl LineSegmentFit {
    /// Direction angle in degrees in `[0, 180)`.
    pub fn angle_deg(&self) -> f64 {
        self.direction[1].atan2(self.direction[0]).to_degrees().rem_euclid(180.0)
    }

    pub fn length(&self) -> f64 {
        dist(self.endpoints[0], self.endpoints[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CircularArcFit {
    pub center: Point,
    pub radius: f64,
    /// Start of the covered angular interval, degrees in `[0, 360)`.
    pub start_deg: f64,
    /// `start_deg + span`, span in `(0, 360]`.
    pub end_deg: f64,
    /// Root-mean-square radial residual.
    pub rms: f64,
    pub count: usize,
}

impl CircularArcFit {
    pub fn span_deg(&self) -> f64 {
        self.end_deg - self.start_deg
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    [sx / n, sy / n]
}

/// Total least squares line through the points.
pub fn fit_line_segment(points: &[Point]) -> Result<LineSegmentFit, FitError> {
    if points.len() < 2 {
        return Err(FitError::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    let c = centroid(points);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let extent = points.iter().map(|&p| dist(p, c)).fold(0.0, f64::max);
    if extent <= 1e-12 {
        return Err(FitError::Coincident);
    }
    // Principal axis of the 2x2 scatter matrix.
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut d = [theta.cos(), theta.sin()];
    if d[0] < 0.0 || (d[0] == 0.0 && d[1] < 0.0) {
        d = [-d[0], -d[1]];
    }
    let normal = [-d[1], d[0]];
    let (mut tmin, mut tmax, mut ss) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        let t = dx * d[0] + dy * d[1];
        tmin = tmin.min(t);
        tmax = tmax.max(t);
        let e = dx * normal[0] + dy * normal[1];
        ss += e * e;
    }
    let at = |t: f64| [c[0] + t * d[0], c[1] + t * d[1]];
    Ok(LineSegmentFit {
        direction: d,
        centroid: c,
        endpoints: [at(tmin), at(tmax)],
        rms: (ss / points.len() as f64).sqrt(),
        count: points.len(),
    })
}

/// Solves the 3x3 system with partial pivoting; `None` when singular
/// relative to `scale`.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3], scale: f64) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Algebraic (Kåsa) circle fit: least squares on `x^2 + y^2 + Dx + Ey + F = 0`.
pub fn fit_circular_arc(points: &[Point]) -> Result<CircularArcFit, FitError> {
    if points.len() < 3 {
        return Err(FitError::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let line = fit_line_segment(points)?;
    let extent = line.length().max(1e-12);
    if line.rms <= 1e-9 * extent {
        return Err(FitError::Collinear);
    }
    // Work in centroid coordinates for conditioning.
    let c = line.centroid;
    let mut m = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for p in points {
        let (x, y) = (p[0] - c[0], p[1] - c[1]);
        let row = [x, y, 1.0];
        let z = -(x * x + y * y);
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += row[i] * row[j];
            }
            rhs[i] += row[i] * z;
        }
    }
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let [d, e, f] = solve3(m, rhs, scale).ok_or(FitError::Collinear)?;
    let r2 = d * d / 4.0 + e * e / 4.0 - f;
    if !(r2 > 0.0) {
        return Err(FitError::Collinear);
    }
    let center = [c[0] - d / 2.0, c[1] - e / 2.0];
    let radius = r2.sqrt();
    let ss: f64 = points.iter().map(|&p| (dist(p, center) - radius).powi(2)).sum();
    let (start_deg, end_deg) = angular_span(points, center);
    Ok(CircularArcFit {
        center,
        radius,
        start_deg,
        end_deg,
        rms: (ss / points.len() as f64).sqrt(),
        count: points.len(),
    })
}

/// Smallest contiguous interval (degrees) covering every point's angle about
/// `center`.
fn angular_span(points: &[Point], center: Point) -> (f64, f64) {
    let mut angles: Vec<f64> = points
        .iter()
        .map(|p| (p[1] - center[1]).atan2(p[0] - center[0]).to_degrees().rem_euclid(360.0))
        .collect();
    angles.sort_by(f64::total_cmp);
    let n = angles.len();
    // Largest gap, including the wrap from last back to first.
    let (mut best_gap, mut best_after) = (angles[0] + 360.0 - angles[n - 1], 0);
    for i in 1..n {
        let gap = angles[i] - angles[i - 1];
        if gap > best_gap {
            best_gap = gap;
            best_after = i;
        }
    }
    let start = angles[best_after];
    let span = (360.0 - best_gap).max(f64::MIN_POSITIVE);
    let span = if span <= 0.0 { 360.0 } else { span };
    (start, start + span)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrimitiveKind {
    #[serde(rename = "LS")]
    LineSegment,
    #[serde(rename = "CA")]
    CircularArc,
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrimitiveKind::LineSegment => "LS",
            PrimitiveKind::CircularArc => "CA",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PrimitiveFit {
    Line(LineSegmentFit),
    Arc(CircularArcFit),
}

impl PrimitiveFit {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            PrimitiveFit::Line(_) => PrimitiveKind::LineSegment,
            PrimitiveFit::Arc(_) => PrimitiveKind::CircularArc,
        }
    }

    pub fn rms(&self) -> f64 {
        match self {
            PrimitiveFit::Line(l) => l.rms,
            PrimitiveFit::Arc(a) => a.rms,
        }
    }

    pub fn count(&self) -> usize {
        match self {
            PrimitiveFit::Line(l) => l.count,
            PrimitiveFit::Arc(a) => a.count,
        }
    }

    /// Tab-separated report record: `tag count rms` then the parameters
    /// (`angle_deg cx cy x0 y0 x1 y1` for LS, `cx cy radius start_deg end_deg`
    /// for CA).
    pub fn report_fields(&self) -> Vec<String> {
        let f = |v: f64| format!("{v:.4}");
        let mut out = vec![self.kind().to_string(), self.count().to_string(), f(self.rms())];
        match self {
            PrimitiveFit::Line(l) => out.extend(
                [
                    l.angle_deg(),
                    l.centroid[0],
                    l.centroid[1],
                    l.endpoints[0][0],
                    l.endpoints[0][1],
                    l.endpoints[1][0],
                    l.endpoints[1][1],
                ]
                .map(f),
            ),
            PrimitiveFit::Arc(a) => out.extend([a.center[0], a.center[1], a.radius, a.start_deg, a.end_deg].map(f)),
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Multiplies the arc residual before comparison with the line residual.
    pub ca_penalty: f64,
    /// Before fitting a map, keep only its largest connected component,
    /// joining pixels up to this Chebyshev distance apart; 0 keeps every
    /// pixel.
    pub isolate_reach: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            ca_penalty: 1.0,
            isolate_reach: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub kind: PrimitiveKind,
    pub line: LineSegmentFit,
    /// `None` when the circle system was degenerate.
    pub arc: Option<CircularArcFit>,
}

impl Classification {
    pub fn chosen(&self) -> PrimitiveFit {
        match (&self.kind, &self.arc) {
            (PrimitiveKind::CircularArc, Some(a)) => PrimitiveFit::Arc(a.clone()),
            _ => PrimitiveFit::Line(self.line.clone()),
        }
    }
}

/// Fits both models and keeps the one with the lower residual; the arc wins
/// only if `penalty * arc.rms` is lower by more than 1e-9.
pub fn classify_primitive(points: &[Point], config: &FitConfig) -> Result<Classification, FitError> {
    if points.len() < 3 {
        return Err(FitError::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let line = fit_line_segment(points)?;
    let arc = match fit_circular_arc(points) {
        Ok(a) => Some(a),
        Err(FitError::Collinear) => None,
        Err(e) => return Err(e),
    };
    let kind = match &arc {
        Some(a) if config.ca_penalty * a.rms < line.rms - 1e-9 => PrimitiveKind::CircularArc,
        _ => PrimitiveKind::LineSegment,
    };
    Ok(Classification { kind, line, arc })
}

/// Fits the requested model.
pub fn fit_kind(points: &[Point], kind: PrimitiveKind) -> Result<PrimitiveFit, FitError> {
    Ok(match kind {
        PrimitiveKind::LineSegment => PrimitiveFit::Line(fit_line_segment(points)?),
        PrimitiveKind::CircularArc => PrimitiveFit::Arc(fit_circular_arc(points)?),
    })
}

/// Fits a binarized contour map: isolates the dominant component per
/// `config.isolate_reach`, then fits `kind`, or classifies when `None`.
pub fn fit_contour_map(map: &BinaryMap, kind: Option<PrimitiveKind>, config: &FitConfig) -> Result<PrimitiveFit, FitError> {
    let map = if config.isolate_reach > 0 {
        map.largest_component(config.isolate_reach)
    } else {
        map.clone()
    };
    let points = map_points(&map);
    match kind {
        Some(k) => fit_kind(&points, k),
        None => Ok(classify_primitive(&points, config)?.chosen()),
    }
}

/// Foreground pixels of a map as `(x, y)` points.
pub fn map_points(map: &BinaryMap) -> Vec<Point> {
    map.points().into_iter().map(|(r, c)| [c as f64, r as f64]).collect()
}
