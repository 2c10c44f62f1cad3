//! Plain (non-differentiable) image containers.
//!
//! Coordinates are `(row, col)`: rows grow downward, columns rightward.

use crate::tensor::{half_pixel_source, DiffTensor, Real};

/// `H x W x C` array of `f32`, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// # Panics
    /// If `data.len() != height * width * channels`.
    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels, "image data length");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for k in 0..channels {
                    data.push(f(r, c, k));
                }
            }
        }
        Self::from_data(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, k: usize) -> f32 {
        self.data[(r * self.width + c) * self.channels + k]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, k: usize, v: f32) {
        self.data[(r * self.width + c) * self.channels + k] = v;
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.width + c) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, r: usize, c: usize) -> &mut [f32] {
        let i = (r * self.width + c) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Single channel `k` as a one-channel plane.
    pub fn channel(&self, k: usize) -> Self {
        let data = self.data.chunks_exact(self.channels).map(|px| px[k]).collect();
        Self::from_data(self.height, self.width, 1, data)
    }

    /// Bilinear resize with half-pixel-center sampling.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        let ys: Vec<_> = (0..out_h).map(|i| half_pixel_source(i, self.height, out_h)).collect();
        let xs: Vec<_> = (0..out_w).map(|i| half_pixel_source(i, self.width, out_w)).collect();
        let mut out = Self::new(out_h, out_w, self.channels);
        for (r, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (c, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (fy, fx) = (fy as f32, fx as f32);
                for k in 0..self.channels {
                    let top = (1.0 - fx) * self.get(y0, x0, k) + fx * self.get(y0, x1, k);
                    let bot = (1.0 - fx) * self.get(y1, x0, k) + fx * self.get(y1, x1, k);
                    out.set(r, c, k, (1.0 - fy) * top + fy * bot);
                }
            }
        }
        out
    }

    /// `h x w` window with top-left corner `(r0, c0)`; must lie inside.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Self {
        assert!(r0 + h <= self.height && c0 + w <= self.width, "crop window out of bounds");
        Self::from_fn(h, w, self.channels, |r, c, k| self.get(r0 + r, c0 + c, k))
    }

    /// Overwrites the region at `(r0, c0)` with `src`, clipped to bounds.
    pub fn paste(&mut self, src: &ImagePlane, r0: usize, c0: usize) {
        assert_eq!(self.channels, src.channels, "paste channel count");
        for r in 0..src.height.min(self.height.saturating_sub(r0)) {
            for c in 0..src.width.min(self.width.saturating_sub(c0)) {
                let px = src.pixel(r, c).to_vec();
                self.pixel_mut(r0 + r, c0 + c).copy_from_slice(&px);
            }
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |r, c, k| self.get(r, self.width - 1 - c, k))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |r, c, k| self.get(self.height - 1 - r, c, k))
    }

    pub fn to_tensor<T: Real>(&self) -> DiffTensor<T> {
        DiffTensor::new(
            &[self.height, self.width, self.channels],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("plane dims match data")
    }

    pub fn from_tensor<T: Real>(t: &DiffTensor<T>) -> Option<Self> {
        let (h, w, c) = t.hwc("to_image").ok()?;
        Some(Self::from_data(h, w, c, t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()))
    }
}

/// `H x W` map of `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    /// Pixels with value `>= threshold` in channel 0.
    pub fn threshold(plane: &ImagePlane, threshold: f32) -> Self {
        Self::from_fn(plane.height(), plane.width(), |r, c| plane.get(r, c, 0) >= threshold)
    }

    pub fn from_points(height: usize, width: usize, points: &[(usize, usize)]) -> Self {
        let mut m = Self::new(height, width);
        for &(r, c) in points {
            m.set(r, c, true);
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    /// `false` outside the map.
    #[inline]
    pub fn get_signed(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width && self.get(r as usize, c as usize)
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Foreground pixels as `(row, col)` in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    /// Inclusive bounding box `(r_min, c_min, r_max, c_max)`.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let pts = self.points();
        let first = pts.first()?;
        Some(pts.iter().fold((first.0, first.1, first.0, first.1), |(a, b, c, d), &(r, col)| {
            (a.min(r), b.min(col), c.max(r), d.max(col))
        }))
    }

    /// Dilation by a disk of the given radius (Euclidean, `r^2 + c^2 <= radius^2`).
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let rad = radius as isize;
        let offsets: Vec<(isize, isize)> = (-rad..=rad)
            .flat_map(|dr| (-rad..=rad).map(move |dc| (dr, dc)))
            .filter(|(dr, dc)| dr * dr + dc * dc <= rad * rad)
            .collect();
        let mut out = Self::new(self.height, self.width);
        for (r, c) in self.points() {
            for &(dr, dc) in &offsets {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < self.height && (cc as usize) < self.width {
                    out.set(rr as usize, cc as usize, true);
                }
            }
        }
        out
    }

    /// Connected components, where two pixels connect when their Chebyshev
    /// distance is at most `reach` (1 gives 8-connectivity). Components are
    /// ordered by their first pixel in row-major order.
    pub fn components(&self, reach: usize) -> Vec<Vec<(usize, usize)>> {
        let reach = reach.max(1) as isize;
        let mut label = vec![usize::MAX; self.data.len()];
        let mut out: Vec<Vec<(usize, usize)>> = Vec::new();
        for (r, c) in self.points() {
            if label[r * self.width + c] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut comp = Vec::new();
            let mut stack = vec![(r, c)];
            label[r * self.width + c] = id;
            while let Some((pr, pc)) = stack.pop() {
                comp.push((pr, pc));
                for dr in -reach..=reach {
                    for dc in -reach..=reach {
                        let (rr, cc) = (pr as isize + dr, pc as isize + dc);
                        if self.get_signed(rr, cc) {
                            let i = rr as usize * self.width + cc as usize;
                            if label[i] == usize::MAX {
                                label[i] = id;
                                stack.push((rr as usize, cc as usize));
                            }
                        }
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// The component with the most pixels (earliest on ties); empty input
    /// stays empty.
    pub fn largest_component(&self, reach: usize) -> Self {
        let mut best: Option<Vec<(usize, usize)>> = None;
        for comp in self.components(reach) {
            if best.as_ref().is_none_or(|b| comp.len() > b.len()) {
                best = Some(comp);
            }
        }
        Self::from_points(self.height, self.width, &best.unwrap_or_default())
    }

    /// Downsampling by `factor` where an output pixel is set if any input
    /// pixel of its block is set.
    pub fn max_pool(&self, factor: usize) -> Self {
        let (h, w) = (self.height.div_ceil(factor), self.width.div_ceil(factor));
        let mut out = Self::new(h, w);
        for (r, c) in self.points() {
            out.set(r / factor, c / factor, true);
        }
        out
    }

    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Self {
        assert!(r0 + h <= self.height && c0 + w <= self.width, "crop window out of bounds");
        Self::from_fn(h, w, |r, c| self.get(r0 + r, c0 + c))
    }

    /// Places this map at `(r0, c0)` inside a zero map of size `h x w`.
    pub fn pad_to(&self, h: usize, w: usize, r0: usize, c0: usize) -> Self {
        assert!(r0 + self.height <= h && c0 + self.width <= w, "pad target too small");
        let mut out = Self::new(h, w);
        for (r, c) in self.points() {
            out.set(r0 + r, c0 + c, true);
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(self.height - 1 - r, c))
    }

    pub fn to_plane(&self) -> ImagePlane {
        ImagePlane::from_data(
            self.height,
            self.width,
            1,
            self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}
