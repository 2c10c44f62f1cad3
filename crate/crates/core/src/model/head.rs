//! Prototype matching head: masked average pooling, relevance, distance
//! and activation.

use crate::error::{Error, Result};
use crate::image::BinaryMap;
use crate::tensor::{ConvSpec, Graph, Real, TensorError, TensorId};

/// Per-channel mean of `features: [h, w, d]` over the mask pixels. The mask
/// must already be at feature resolution.
pub fn masked_average_pool<T: Real>(g: &mut Graph<T>, features: TensorId, mask: &BinaryMap) -> Result<TensorId> {
    match g.masked_mean(features, mask.data()) {
        Err(TensorError::EmptyMask) => Err(Error::EmptyMask { index: 0 }),
        other => Ok(other?),
    }
}

/// Mask at input size reduced to feature size by 2x max pooling.
pub fn feature_mask(mask: &BinaryMap) -> BinaryMap {
    mask.max_pool(2)
}

fn project_vector<T: Real>(g: &mut Graph<T>, v: TensorId, weight: TensorId) -> Result<TensorId> {
    let n = g.tensor(v).numel();
    let wshape = g.shape(weight).to_vec();
    let out = *wshape.last().unwrap_or(&0);
    let x = g.reshape(v, &[1, 1, n])?;
    let y = g.conv2d(x, weight, None, ConvSpec::new(1, n, out))?;
    Ok(g.reshape(y, &[out])?)
}

/// `R = 1 + cos(w1^T H_Q0, w2^T P)` per pixel, `[h, w, 1]` in `[0, 2]`.
/// `w1: [1, 1, C0, k]`, `w2: [1, 1, d, k]`.
pub fn relevance_map<T: Real>(
    g: &mut Graph<T>,
    hq0: TensorId,
    prototype: TensorId,
    w1: TensorId,
    w2: TensorId,
) -> Result<TensorId> {
    let (_, _, c0) = g.tensor(hq0).hwc("relevance_map")?;
    let k = *g.shape(w1).last().unwrap_or(&0);
    let q = g.conv2d(hq0, w1, None, ConvSpec::new(1, c0, k))?;
    let p = project_vector(g, prototype, w2)?;
    let cos = g.cosine_to_vector(q, p)?;
    Ok(g.affine(cos, T::one(), T::one()))
}

/// `D = alpha (1 - cos(H_Q, P))`, in `[0, 2 alpha]`.
pub fn cosine_distance_map<T: Real>(g: &mut Graph<T>, hq: TensorId, p: TensorId, alpha: T) -> Result<TensorId> {
    let cos = g.cosine_to_vector(hq, p)?;
    Ok(g.affine(cos, -alpha, alpha))
}

/// `D = |H_Q - P|_2` per pixel.
pub fn euclidean_distance_map<T: Real>(g: &mut Graph<T>, hq: TensorId, p: TensorId) -> Result<TensorId> {
    Ok(g.euclidean_to_vector(hq, p)?)
}

/// `C = sigmoid(beta - D)`.
pub fn sigmoid_activation<T: Real>(g: &mut Graph<T>, d: TensorId, beta: T) -> TensorId {
    let z = g.affine(d, -T::one(), beta);
    g.sigmoid(z)
}
