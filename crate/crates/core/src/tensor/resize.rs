use super::ops::Op;
use super::{Graph, Real, Result, TensorError, TensorId};

/// Source sample for one output coordinate under the half-pixel-center
/// convention: `src = (i + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
/// Returns the two neighbouring source indices and the weight of the second.
pub fn half_pixel_source(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

struct Taps<T> {
    y: Vec<(usize, usize, T)>,
    x: Vec<(usize, usize, T)>,
}

fn taps<T: Real>(h: usize, w: usize, oh: usize, ow: usize) -> Taps<T> {
    let conv = |(a, b, f): (usize, usize, f64)| (a, b, T::lit(f));
    Taps {
        y: (0..oh).map(|i| conv(half_pixel_source(i, h, oh))).collect(),
        x: (0..ow).map(|i| conv(half_pixel_source(i, w, ow))).collect(),
    }
}

impl<T: Real> Graph<T> {
    /// Bilinear resize of `[H, W, C]` to `[out_h, out_w, C]`.
    pub fn bilinear_resize(&mut self, input: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let (h, w, c) = self.tensor(input).hwc("bilinear_resize")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(TensorError::Invalid {
                op: "bilinear_resize",
                msg: format!("cannot resize {h}x{w} to {out_h}x{out_w}"),
            });
        }
        let t = taps::<T>(h, w, out_h, out_w);
        let x = self.value(input);
        let mut out = Vec::with_capacity(out_h * out_w * c);
        for &(y0, y1, fy) in &t.y {
            for &(x0, x1, fx) in &t.x {
                let p00 = &x[(y0 * w + x0) * c..][..c];
                let p01 = &x[(y0 * w + x1) * c..][..c];
                let p10 = &x[(y1 * w + x0) * c..][..c];
                let p11 = &x[(y1 * w + x1) * c..][..c];
                for k in 0..c {
                    let top = (T::one() - fx) * p00[k] + fx * p01[k];
                    let bot = (T::one() - fx) * p10[k] + fx * p11[k];
                    out.push((T::one() - fy) * top + fy * bot);
                }
            }
        }
        Ok(self.push(vec![out_h, out_w, c], out, Op::Resize { input }))
    }

    pub(super) fn resize_backward(&mut self, input: TensorId, out_h: usize, out_w: usize, g: &[T]) {
        let (h, w, c) = self.tensor(input).hwc("bilinear_resize").expect("validated in forward");
        let t = taps::<T>(h, w, out_h, out_w);
        let mut dx = vec![T::zero(); h * w * c];
        let mut gi = g.chunks_exact(c);
        for &(y0, y1, fy) in &t.y {
            for &(x0, x1, fx) in &t.x {
                let gp = gi.next().expect("gradient shape matches output");
                let corners = [
                    (y0 * w + x0, (T::one() - fy) * (T::one() - fx)),
                    (y0 * w + x1, (T::one() - fy) * fx),
                    (y1 * w + x0, fy * (T::one() - fx)),
                    (y1 * w + x1, fy * fx),
                ];
                for (p, wgt) in corners {
                    for (d, &gv) in dx[p * c..(p + 1) * c].iter_mut().zip(gp) {
                        *d += wgt * gv;
                    }
                }
            }
        }
        self.accumulate(input, &dx);
    }
}
