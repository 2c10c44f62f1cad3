use super::ops::{check_dim, Op};
use super::{Graph, Real, Result, TensorError, TensorId};

/// Added to the variance before the square root.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum BatchNormMode<T: Real> {
    /// Normalize with statistics of the current input.
    Train,
    /// Normalize with stored running statistics.
    Infer { mean: Vec<T>, var: Vec<T> },
}

/// Per-channel statistics of one training-mode batch norm evaluation.
/// `var` is the biased (population) variance; `count` is the number of
/// values per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub(super) struct BnSaved<T: Real> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Real> Graph<T> {
    /// Batch normalization over every axis but the last.
    pub fn batch_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: BatchNormMode<T>,
    ) -> Result<(TensorId, Option<BatchStats<T>>)> {
        let shape = self.shape(input).to_vec();
        let c = *shape.last().ok_or(TensorError::Rank {
            op: "batch_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        check_dim("batch_norm", "scale length", c, self.tensor(gamma).numel())?;
        check_dim("batch_norm", "shift length", c, self.tensor(beta).numel())?;
        let x = self.value(input);
        let n = x.len() / c.max(1);
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: "empty input".into(),
            });
        }
        let nf = T::from_usize(n).unwrap();
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![T::zero(); c];
                for px in x.chunks_exact(c) {
                    mean.iter_mut().zip(px).for_each(|(m, &v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); c];
                for px in x.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s / nf);
                (mean, var, true)
            }
            BatchNormMode::Infer { mean, var } => {
                check_dim("batch_norm", "running mean length", c, mean.len())?;
                check_dim("batch_norm", "running var length", c, var.len())?;
                (mean, var, false)
            }
        };
        let eps = T::lit(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for px in x.chunks_exact(c) {
            for k in 0..c {
                let xh = (px[k] - mean[k]) * inv_std[k];
                xhat.push(xh);
                out.push(gv[k] * xh + bv[k]);
            }
        }
        let stats = train.then(|| BatchStats {
            mean,
            var,
            count: n,
        });
        let id = self.push(
            shape,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved: BnSaved {
                    xhat,
                    inv_std,
                    train,
                },
            },
        );
        Ok((id, stats))
    }

    pub(super) fn batch_norm_backward(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        saved: &BnSaved<T>,
        g: &[T],
    ) {
        let c = saved.inv_std.len();
        let n = g.len() / c;
        let nf = T::from_usize(n).unwrap();
        let mut dbeta = vec![T::zero(); c];
        let mut dgamma = vec![T::zero(); c];
        for (gp, xp) in g.chunks_exact(c).zip(saved.xhat.chunks_exact(c)) {
            for k in 0..c {
                dbeta[k] += gp[k];
                dgamma[k] += gp[k] * xp[k];
            }
        }
        if self.requires_grad(input) {
            let gv = self.value(gamma);
            let mut dx = Vec::with_capacity(g.len());
            for (gp, xp) in g.chunks_exact(c).zip(saved.xhat.chunks_exact(c)) {
                for k in 0..c {
                    let s = gv[k] * saved.inv_std[k];
                    dx.push(if saved.train {
                        s * (gp[k] - dbeta[k] / nf - xp[k] * dgamma[k] / nf)
                    } else {
                        s * gp[k]
                    });
                }
            }
            self.accumulate(input, &dx);
        }
        self.accumulate(gamma, &dgamma);
        self.accumulate(beta, &dbeta);
    }
}
