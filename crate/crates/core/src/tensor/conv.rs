use serde::{Deserialize, Serialize};

use super::ops::{check_dim, Op};
use super::{Graph, Real, Result, TensorError, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Zero padding of `dilation * (k - 1) / 2` on each side.
    Same,
    Valid,
}

/// Geometry of a 2-D convolution over `[H, W, C]` tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (1, 1),
            dilation: (1, 1),
            in_channels,
            out_channels,
            padding: Padding::Same,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.kernel.0,
            self.kernel.1,
            self.in_channels,
            self.out_channels,
        ]
    }

    pub fn pad(&self) -> (usize, usize) {
        match self.padding {
            Padding::Valid => (0, 0),
            Padding::Same => (
                self.dilation.0 * (self.kernel.0 - 1) / 2,
                self.dilation.1 * (self.kernel.1 - 1) / 2,
            ),
        }
    }

    /// `floor((in + 2p - d(k-1) - 1) / s) + 1` per axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.pad();
        let axis = |n: usize, p: usize, k: usize, d: usize, s: usize, dim| {
            let span = d * (k - 1) + 1;
            if n + 2 * p < span || s == 0 {
                return Err(TensorError::Invalid {
                    op: "conv2d",
                    msg: format!("{dim} {n} too small for kernel span {span} with padding {p}"),
                });
            }
            Ok((n + 2 * p - span) / s + 1)
        };
        Ok((
            axis(h, ph, self.kernel.0, self.dilation.0, self.stride.0, "height")?,
            axis(w, pw, self.kernel.1, self.dilation.1, self.stride.1, "width")?,
        ))
    }

    fn validate(&self) -> Result<()> {
        let ok = self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.stride.0 > 0
            && self.stride.1 > 0
            && self.dilation.0 > 0
            && self.dilation.1 > 0
            && (self.padding == Padding::Valid || (self.kernel.0 % 2 == 1 && self.kernel.1 % 2 == 1));
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("invalid spec {self:?}"),
            })
        }
    }
}

/// Patch matrix `[oh * ow, kh * kw * c_in]` for the input.
fn im2col<T: Real>(x: &[T], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<T> {
    let (kh, kw) = spec.kernel;
    let cin = spec.in_channels;
    let (ph, pw) = spec.pad();
    let row_len = kh * kw * cin;
    let mut cols = vec![T::zero(); oh * ow * row_len];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * row_len..][..row_len];
            for ky in 0..kh {
                let iy = (oy * spec.stride.0 + ky * spec.dilation.0) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * spec.stride.1 + kx * spec.dilation.1) as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin;
                    row[(ky * kw + kx) * cin..][..cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<T> {
    let (kh, kw) = spec.kernel;
    let cin = spec.in_channels;
    let (ph, pw) = spec.pad();
    let row_len = kh * kw * cin;
    let mut dx = vec![T::zero(); h * w * cin];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * row_len..][..row_len];
            for ky in 0..kh {
                let iy = (oy * spec.stride.0 + ky * spec.dilation.0) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * spec.stride.1 + kx * spec.dilation.1) as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    for (d, &v) in dx[dst..dst + cin].iter_mut().zip(&row[(ky * kw + kx) * cin..][..cin]) {
                        *d += v;
                    }
                }
            }
        }
    }
    dx
}

impl<T: Real> Graph<T> {
    /// 2-D convolution (cross-correlation) of `input: [H, W, C_in]` with
    /// `weight: [kh, kw, C_in, C_out]` and optional `bias: [C_out]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        spec: ConvSpec,
    ) -> Result<TensorId> {
        spec.validate()?;
        let (h, w, c) = self.tensor(input).hwc("conv2d")?;
        check_dim("conv2d", "input channels", spec.in_channels, c)?;
        let ws = self.shape(weight);
        if ws.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: ws.to_vec(),
            });
        }
        let expect = spec.weight_shape();
        for (dim, name) in ["kernel height", "kernel width", "weight input channels", "weight output channels"]
            .into_iter()
            .enumerate()
        {
            check_dim("conv2d", name, expect[dim], ws[dim])?;
        }
        if let Some(b) = bias {
            check_dim("conv2d", "bias length", spec.out_channels, self.tensor(b).numel())?;
        }
        let (oh, ow) = spec.output_size(h, w)?;
        let cols = im2col(self.value(input), h, w, &spec, oh, ow);
        let k = spec.kernel.0 * spec.kernel.1 * spec.in_channels;
        let cout = spec.out_channels;
        let mut out = vec![T::zero(); oh * ow * cout];
        if let Some(b) = bias {
            let bv = self.value(b);
            out.chunks_exact_mut(cout).for_each(|px| px.copy_from_slice(bv));
        }
        T::gemm(oh * ow, k, cout, &cols, false, self.value(weight), false, &mut out, bias.is_some());
        Ok(self.push(
            vec![oh, ow, cout],
            out,
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    pub(super) fn conv_backward(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        spec: &ConvSpec,
        g: &[T],
    ) {
        let (h, w, _) = self.tensor(input).hwc("conv2d").expect("validated in forward");
        let (oh, ow) = spec.output_size(h, w).expect("validated in forward");
        let k = spec.kernel.0 * spec.kernel.1 * spec.in_channels;
        let cout = spec.out_channels;
        if let Some(b) = bias.filter(|&b| self.requires_grad(b)) {
            let mut db = vec![T::zero(); cout];
            for px in g.chunks_exact(cout) {
                db.iter_mut().zip(px).for_each(|(d, &v)| *d += v);
            }
            self.accumulate(b, &db);
        }
        if self.requires_grad(weight) {
            let cols = im2col(self.value(input), h, w, spec, oh, ow);
            let mut dw = vec![T::zero(); k * cout];
            T::gemm(k, oh * ow, cout, &cols, true, g, false, &mut dw, false);
            self.accumulate(weight, &dw);
        }
        if self.requires_grad(input) {
            let mut dcols = vec![T::zero(); oh * ow * k];
            T::gemm(oh * ow, cout, k, g, false, self.value(weight), true, &mut dcols, false);
            let dx = col2im(&dcols, h, w, spec, oh, ow);
            self.accumulate(input, &dx);
        }
    }
}
