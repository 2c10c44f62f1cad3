use super::conv::ConvSpec;
use super::norm::BnSaved;
use super::{Graph, Real, Result, TensorError, TensorId};

/// Added under the square root of every vector norm taken by the
/// similarity operators, so zero vectors stay differentiable.
pub const NORM_EPS: f64 = 1e-8;

pub(super) enum Op<T: Real> {
    Leaf,
    Conv {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        spec: ConvSpec,
    },
    BatchNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        saved: BnSaved<T>,
    },
    Resize {
        input: TensorId,
    },
    Relu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    Affine {
        input: TensorId,
        scale: T,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    MulChannels {
        map: TensorId,
        feat: TensorId,
    },
    Concat {
        inputs: Vec<TensorId>,
    },
    Reshape {
        input: TensorId,
    },
    Sum {
        input: TensorId,
    },
    MaskedMean {
        input: TensorId,
        mask: Vec<bool>,
    },
    Cosine {
        input: TensorId,
        vector: TensorId,
    },
    Euclidean {
        input: TensorId,
        vector: TensorId,
    },
    Dice {
        pred: TensorId,
        target: Vec<T>,
        tau: T,
    },
}

impl<T: Real> Op<T> {
    pub(super) fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Resize { input }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Affine { input, .. }
            | Op::Reshape { input }
            | Op::Sum { input }
            | Op::MaskedMean { input, .. } => vec![*input],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::MulChannels { map, feat } => vec![*map, *feat],
            Op::Concat { inputs } => inputs.clone(),
            Op::Cosine { input, vector } | Op::Euclidean { input, vector } => {
                vec![*input, *vector]
            }
            Op::Dice { pred, .. } => vec![*pred],
        }
    }
}

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != sb.len() {
        return Err(TensorError::Rank {
            op,
            expected: sa.len(),
            shape: sb.to_vec(),
        });
    }
    for (&x, &y) in sa.iter().zip(sb) {
        if x != y {
            return Err(TensorError::ShapeMismatch {
                op,
                dim: "dimension",
                expected: x,
                got: y,
            });
        }
    }
    Ok(())
}

fn eps<T: Real>() -> T {
    T::lit(NORM_EPS)
}

impl<T: Real> Graph<T> {
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), data, Op::Relu { input: x })
    }

    /// Which inputs of every ReLU on the tape are positive, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu { input } = n.op {
                out.extend(self.value(input).iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data = self
            .value(x)
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        self.push(self.shape(x).to_vec(), data, Op::Sigmoid { input: x })
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: TensorId, scale: T, shift: T) -> TensorId {
        let data = self.value(x).iter().map(|&v| scale * v + shift).collect();
        self.push(self.shape(x).to_vec(), data, Op::Affine { input: x, scale })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        same_shape(self, "add", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        same_shape(self, "mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul { a, b }))
    }

    /// Multiplies every channel of `feat: [H, W, C]` by `map: [H, W, 1]`.
    pub fn mul_channels(&mut self, map: TensorId, feat: TensorId) -> Result<TensorId> {
        let (h, w, c) = self.tensor(feat).hwc("mul_channels")?;
        let (mh, mw, mc) = self.tensor(map).hwc("mul_channels")?;
        check_dim("mul_channels", "map height", h, mh)?;
        check_dim("mul_channels", "map width", w, mw)?;
        check_dim("mul_channels", "map channels", 1, mc)?;
        let m = self.value(map);
        let f = self.value(feat);
        let mut data = Vec::with_capacity(h * w * c);
        for (p, &mv) in m.iter().enumerate() {
            data.extend(f[p * c..(p + 1) * c].iter().map(|&v| v * mv));
        }
        Ok(self.push(vec![h, w, c], data, Op::MulChannels { map, feat }))
    }

    /// Concatenates `[H, W, C_k]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: "concat_channels",
            msg: "no inputs".into(),
        })?;
        let (h, w, _) = self.tensor(first).hwc("concat_channels")?;
        let mut chans = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let (ih, iw, ic) = self.tensor(id).hwc("concat_channels")?;
            check_dim("concat_channels", "height", h, ih)?;
            check_dim("concat_channels", "width", w, iw)?;
            chans.push(ic);
        }
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(h * w * total);
        for p in 0..h * w {
            for (&id, &c) in inputs.iter().zip(&chans) {
                data.extend_from_slice(&self.value(id)[p * c..(p + 1) * c]);
            }
        }
        Ok(self.push(
            vec![h, w, total],
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.tensor(x).numel() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: self.tensor(x).numel(),
            });
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { input: x }))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.value(x).iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum { input: x })
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = T::from_usize(self.tensor(x).numel().max(1)).unwrap();
        let s = self.sum(x);
        self.affine(s, T::one() / n, T::zero())
    }

    /// Per-channel mean of `x: [H, W, C]` over pixels where `mask` is set.
    pub fn masked_mean(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (h, w, c) = self.tensor(x).hwc("masked_mean")?;
        check_dim("masked_mean", "mask length", h * w, mask.len())?;
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let v = self.value(x);
        let mut acc = vec![T::zero(); c];
        for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (a, &xv) in acc.iter_mut().zip(&v[p * c..(p + 1) * c]) {
                *a += xv;
            }
        }
        let n = T::from_usize(count).unwrap();
        acc.iter_mut().for_each(|a| *a = *a / n);
        Ok(self.push(
            vec![c],
            acc,
            Op::MaskedMean {
                input: x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Cosine similarity between every pixel vector of `x: [H, W, C]` and
    /// `v: [C]`, as an `[H, W, 1]` map. Norms are `sqrt(|.|^2 + NORM_EPS)`.
    pub fn cosine_to_vector(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (h, w, c) = self.tensor(x).hwc("cosine_to_vector")?;
        check_dim("cosine_to_vector", "vector length", c, self.tensor(v).numel())?;
        let xs = self.value(x);
        let vs = self.value(v);
        let nv = (dot(vs, vs) + eps()).sqrt();
        let data = xs
            .chunks_exact(c)
            .map(|px| dot(px, vs) / ((dot(px, px) + eps()).sqrt() * nv))
            .collect();
        Ok(self.push(vec![h, w, 1], data, Op::Cosine { input: x, vector: v }))
    }

    /// Euclidean distance between every pixel vector of `x` and `v`.
    pub fn euclidean_to_vector(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (h, w, c) = self.tensor(x).hwc("euclidean_to_vector")?;
        check_dim(
            "euclidean_to_vector",
            "vector length",
            c,
            self.tensor(v).numel(),
        )?;
        let vs = self.value(v);
        let data = self
            .value(x)
            .chunks_exact(c)
            .map(|px| {
                px.iter()
                    .zip(vs)
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        Ok(self.push(
            vec![h, w, 1],
            data,
            Op::Euclidean { input: x, vector: v },
        ))
    }

    /// `1 - sum(2 p t) / (sum(p^2) + sum(t) + tau)`.
    pub fn dice_loss(&mut self, pred: TensorId, target: &[T], tau: T) -> Result<TensorId> {
        check_dim("dice_loss", "target length", self.tensor(pred).numel(), target.len())?;
        let p = self.value(pred);
        let two = T::lit(2.0);
        let inter: T = p.iter().zip(target).map(|(&a, &b)| two * a * b).sum();
        let sq: T = p.iter().map(|&a| a * a).sum();
        let t: T = target.iter().copied().sum();
        let loss = T::one() - inter / (sq + t + tau);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::Dice {
                pred,
                target: target.to_vec(),
                tau,
            },
        ))
    }

    pub(super) fn backprop(&mut self, id: TensorId, g: &[T]) {
        // The op is moved out so its saved state can be read while other
        // nodes' gradients are written.
        let op = std::mem::replace(&mut self.nodes[id.0].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                spec,
            } => self.conv_backward(*input, *weight, *bias, spec, g),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => self.batch_norm_backward(*input, *gamma, *beta, saved, g),
            Op::Resize { input } => {
                let out = self.shape(id).to_vec();
                self.resize_backward(*input, out[0], out[1], g)
            }
            Op::Relu { input } => {
                let d: Vec<T> = self
                    .value(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(*input, &d);
            }
            Op::Sigmoid { input } => {
                let d: Vec<T> = self
                    .value(id)
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(*input, &d);
            }
            Op::Affine { input, scale } => {
                let d: Vec<T> = g.iter().map(|&gv| gv * *scale).collect();
                self.accumulate(*input, &d);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Mul { a, b } => {
                let da: Vec<T> = self.value(*b).iter().zip(g).map(|(&y, &gv)| y * gv).collect();
                let db: Vec<T> = self.value(*a).iter().zip(g).map(|(&x, &gv)| x * gv).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MulChannels { map, feat } => {
                let c = self.shape(*feat)[2];
                let m = self.value(*map);
                let f = self.value(*feat);
                let mut dm = vec![T::zero(); m.len()];
                let mut df = vec![T::zero(); f.len()];
                for (p, &mv) in m.iter().enumerate() {
                    let r = p * c..(p + 1) * c;
                    for ((d, &gv), &fv) in df[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&f[r]) {
                        *d = gv * mv;
                        dm[p] += gv * fv;
                    }
                }
                self.accumulate(*map, &dm);
                self.accumulate(*feat, &df);
            }
            Op::Concat { inputs } => {
                let total = self.shape(id)[2];
                let mut offset = 0;
                for &inp in inputs {
                    let c = self.shape(inp)[2];
                    let d: Vec<T> = g
                        .chunks_exact(total)
                        .flat_map(|px| px[offset..offset + c].iter().copied())
                        .collect();
                    self.accumulate(inp, &d);
                    offset += c;
                }
            }
            Op::Reshape { input } => self.accumulate(*input, g),
            Op::Sum { input } => {
                let d = vec![g[0]; self.tensor(*input).numel()];
                self.accumulate(*input, &d);
            }
            Op::MaskedMean { input, mask } => {
                let c = self.shape(*input)[2];
                let n = T::from_usize(mask.iter().filter(|&&m| m).count()).unwrap();
                let mut d = vec![T::zero(); mask.len() * c];
                for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for (dv, &gv) in d[p * c..(p + 1) * c].iter_mut().zip(g) {
                        *dv = gv / n;
                    }
                }
                self.accumulate(*input, &d);
            }
            Op::Cosine { input, vector } => self.cosine_backward(id, *input, *vector, g),
            Op::Euclidean { input, vector } => self.euclidean_backward(id, *input, *vector, g),
            Op::Dice { pred, target, tau } => {
                let p = self.value(*pred);
                let two = T::lit(2.0);
                let inter: T = p.iter().zip(target).map(|(&a, &b)| two * a * b).sum();
                let denom = p.iter().map(|&a| a * a).sum::<T>()
                    + target.iter().copied().sum::<T>()
                    + *tau;
                // L = 1 - I/Dn; dL/dp = -(2t Dn - I 2p) / Dn^2
                let d: Vec<T> = p
                    .iter()
                    .zip(target)
                    .map(|(&pv, &tv)| -g[0] * (two * tv * denom - inter * two * pv) / (denom * denom))
                    .collect();
                self.accumulate(*pred, &d);
            }
        }
        self.nodes[id.0].op = op;
    }

    fn cosine_backward(&mut self, id: TensorId, x: TensorId, v: TensorId, g: &[T]) {
        let c = self.shape(x)[2];
        let xs = self.value(x);
        let vs = self.value(v);
        let cos = self.value(id);
        let nv2 = dot(vs, vs) + eps();
        let nv = nv2.sqrt();
        let mut dx = vec![T::zero(); xs.len()];
        let mut dv = vec![T::zero(); vs.len()];
        for (p, px) in xs.chunks_exact(c).enumerate() {
            let nx2 = dot(px, px) + eps();
            let nx = nx2.sqrt();
            let (cp, gp) = (cos[p], g[p]);
            let inv = T::one() / (nx * nv);
            for k in 0..c {
                dx[p * c + k] = gp * (vs[k] * inv - cp * px[k] / nx2);
                dv[k] += gp * (px[k] * inv - cp * vs[k] / nv2);
            }
        }
        self.accumulate(x, &dx);
        self.accumulate(v, &dv);
    }

    fn euclidean_backward(&mut self, id: TensorId, x: TensorId, v: TensorId, g: &[T]) {
        let c = self.shape(x)[2];
        let xs = self.value(x);
        let vs = self.value(v);
        let dist = self.value(id);
        let mut dx = vec![T::zero(); xs.len()];
        let mut dv = vec![T::zero(); vs.len()];
        for (p, px) in xs.chunks_exact(c).enumerate() {
            // Subgradient 0 at coincidence.
            if dist[p] == T::zero() {
                continue;
            }
            let s = g[p] / dist[p];
            for k in 0..c {
                let d = s * (px[k] - vs[k]);
                dx[p * c + k] = d;
                dv[k] -= d;
            }
        }
        self.accumulate(x, &dx);
        self.accumulate(v, &dv);
    }
}

pub(super) fn check_dim(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            dim,
            expected,
            got,
        })
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&[3], vec![-1.5, 0.0, 2.0]).unwrap();
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_adds_channels() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[2, 2, 3], vec![1.0; 12]).unwrap();
        let b = g.constant(&[2, 2, 2], vec![2.0; 8]).unwrap();
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 5]);
        assert_eq!(&g.value(c)[..5], &[1.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[2, 2, 1], vec![0.0; 4]).unwrap();
        let b = g.constant(&[2, 3, 1], vec![0.0; 6]).unwrap();
        let err = g.concat_channels(&[a, b]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { dim: "width", .. }));
    }

    #[test]
    fn masked_mean_forced_arithmetic() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = g.masked_mean(x, &[true, true, false, false]).unwrap();
        assert_eq!(g.value(p), &[1.5]);
        assert_eq!(g.masked_mean(x, &[false; 4]), Err(TensorError::EmptyMask));
    }

    #[test]
    fn dice_of_perfect_prediction() {
        let mut g = Graph::<f64>::new();
        let t: Vec<f64> = (0..400).map(|i| if i < 100 { 1.0 } else { 0.0 }).collect();
        let p = g.constant(&[400], t.clone()).unwrap();
        let l = g.dice_loss(p, &t, 1e-6).unwrap();
        let expected = 1e-6 / (200.0 + 1e-6);
        assert!((g.value(l)[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn dice_of_disjoint_prediction_is_one() {
        let mut g = Graph::<f32>::new();
        let p = g.constant(&[4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let l = g.dice_loss(p, &[0.0, 0.0, 1.0, 1.0], 1e-6).unwrap();
        assert_eq!(g.value(l)[0], 1.0);
    }

    #[test]
    fn dice_half_prediction() {
        let n = 64;
        let mut g = Graph::<f64>::new();
        let p = g.constant(&[n], vec![0.5; n]).unwrap();
        let l = g.dice_loss(p, &vec![1.0; n], 1e-6).unwrap();
        let nf = n as f64;
        let expected = 1.0 - nf / (0.25 * nf + nf + 1e-6);
        assert!((g.value(l)[0] - expected).abs() < 1e-12);
        assert!((g.value(l)[0] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn euclidean_pythagorean() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&[1, 2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let v = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let d = g.euclidean_to_vector(x, v).unwrap();
        assert_eq!(g.value(d), &[5.0, 0.0]);
    }
}
