//! The one-shot extraction network: shared backbone with multi-scale
//! fusion, prototype head, loss and training.

mod checkpoint;
mod config;
pub mod head;
mod train;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use config::{BackboneConfig, Distance, HeadConfig, ModelConfig, Preset, TrainConfig};
pub use train::{Adam, StepLog, Trainer};

use crate::error::{Error, Result};
use crate::image::{BinaryMap, ImagePlane};
use crate::pairgen::SamplePair;
use crate::tensor::{BatchNormMode, BatchStats, ConvSpec, Graph, Real, TensorId};

/// One named trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    spec: ConvSpec,
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    c1: Conv,
    n1: Bn,
    c2: Conv,
    n2: Bn,
    skip: Conv,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Conv,
    stem_bn: Bn,
    blocks: [Block; 3],
    aspp: [Conv; 2],
    aspp_proj: Conv,
    aspp_bn: Bn,
    adapters: [(Conv, Bn); 3],
    fuse1: Conv,
    fuse2: Conv,
    w1: Conv,
    w2: Conv,
}

struct Builder<'a> {
    params: Vec<ParamTensor>,
    running: Vec<RunningStats>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) -> usize {
        self.params.push(ParamTensor { name, shape, data });
        self.params.len() - 1
    }

    /// Fan-in scaled uniform weights, zero bias.
    fn conv(&mut self, name: &str, spec: ConvSpec, bias: bool) -> Conv {
        let shape = spec.weight_shape();
        let fan_in = shape[0] * shape[1] * shape[2];
        let bound = (6.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let w = self.push(format!("{name}.weight"), shape.to_vec(), data);
        let b = bias.then(|| self.push(format!("{name}.bias"), vec![spec.out_channels], vec![0.0; spec.out_channels]));
        Conv { spec, w, b }
    }

    /// Identity batch norm.
    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.push(format!("{name}.gamma"), vec![c], vec![1.0; c]);
        let beta = self.push(format!("{name}.beta"), vec![c], vec![0.0; c]);
        self.running.push(RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        Bn {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            c1: self.conv(&format!("{name}.conv1"), ConvSpec::new(3, cin, cout).stride(2), false),
            n1: self.bn(&format!("{name}.bn1"), cout),
            c2: self.conv(&format!("{name}.conv2"), ConvSpec::new(3, cout, cout), false),
            n2: self.bn(&format!("{name}.bn2"), cout),
            skip: self.conv(&format!("{name}.skip"), ConvSpec::new(1, cin, cout).stride(2), true),
        }
    }
}

fn build_layout(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> (Layout, Vec<ParamTensor>, Vec<RunningStats>) {
    let mut b = Builder {
        params: Vec::new(),
        running: Vec::new(),
        rng,
    };
    let w = cfg.base_width;
    let widths = [w, 2 * w, 4 * w, 8 * w];
    let d = cfg.fused_depth;
    let stem = b.conv("stem", ConvSpec::new(3, 3, w).stride(2), false);
    let stem_bn = b.bn("stem.bn", w);
    let blocks = [
        b.block("block1", widths[0], widths[1]),
        b.block("block2", widths[1], widths[2]),
        b.block("block3", widths[2], widths[3]),
    ];
    let aspp = [0, 1].map(|i| {
        let r = cfg.aspp_rates[i];
        b.conv(&format!("aspp.rate{r}"), ConvSpec::new(3, widths[3], d).dilation(r), true)
    });
    let aspp_proj = b.conv("aspp.proj", ConvSpec::new(1, d, d), true);
    let aspp_bn = b.bn("aspp.bn", d);
    let adapters = [0, 1, 2].map(|i| {
        let c = cfg.adapter_channels[i];
        (
            b.conv(&format!("adapter{i}"), ConvSpec::new(1, widths[i], c), true),
            b.bn(&format!("adapter{i}.bn"), c),
        )
    });
    let c0 = cfg.concat_channels();
    let fuse1 = b.conv("fuse1", ConvSpec::new(3, c0, d), true);
    let fuse2 = b.conv("fuse2", ConvSpec::new(3, d, d), true);
    let w1 = b.conv("relevance.w1", ConvSpec::new(1, c0, cfg.compress_dim), false);
    let w2 = b.conv("relevance.w2", ConvSpec::new(1, d, cfg.compress_dim), false);
    let layout = Layout {
        stem,
        stem_bn,
        blocks,
        aspp,
        aspp_proj,
        aspp_bn,
        adapters,
        fuse1,
        fuse2,
        w1,
        w2,
    };
    (layout, b.params, b.running)
}

/// Batch-norm behaviour for one graph evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Per-image statistics; collected for the running averages.
    Train,
    /// Running statistics.
    Infer,
}

/// Graph-side handles for one evaluation.
pub struct Bound<'m, T: Real> {
    model: &'m CpieModel,
    ids: Vec<TensorId>,
    mode: BnMode,
    /// `(running index, stats)` of every train-mode batch norm evaluated.
    pub stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Real> Bound<'_, T> {
    pub fn param_ids(&self) -> &[TensorId] {
        &self.ids
    }

    fn conv(&self, g: &mut Graph<T>, x: TensorId, c: Conv) -> Result<TensorId> {
        Ok(g.conv2d(x, self.ids[c.w], c.b.map(|b| self.ids[b]), c.spec)?)
    }

    fn bn(&mut self, g: &mut Graph<T>, x: TensorId, n: Bn) -> Result<TensorId> {
        let mode = match self.mode {
            BnMode::Train => BatchNormMode::Train,
            BnMode::Infer => {
                let rs = &self.model.running[n.stats];
                BatchNormMode::Infer {
                    mean: rs.mean.iter().map(|&v| T::lit(v as f64)).collect(),
                    var: rs.var.iter().map(|&v| T::lit(v as f64)).collect(),
                }
            }
        };
        let (y, stats) = g.batch_norm(x, self.ids[n.gamma], self.ids[n.beta], mode)?;
        if let Some(s) = stats {
            self.stats.push((n.stats, s));
        }
        Ok(y)
    }

    fn block(&mut self, g: &mut Graph<T>, x: TensorId, b: Block) -> Result<TensorId> {
        let y = self.conv(g, x, b.c1)?;
        let y = self.bn(g, y, b.n1)?;
        let y = g.relu(y);
        let y = self.conv(g, y, b.c2)?;
        let y = self.bn(g, y, b.n2)?;
        let s = self.conv(g, x, b.skip)?;
        let y = g.add(y, s)?;
        Ok(g.relu(y))
    }

    /// Multi-scale map `H0` at half resolution.
    pub fn multiscale(&mut self, g: &mut Graph<T>, image: TensorId) -> Result<TensorId> {
        let l = &self.model.layout;
        let (h, w, _) = g.tensor(image).hwc("extract_features")?;
        check_divisible(h, w)?;
        let s = self.conv(g, image, l.stem)?;
        let s = self.bn(g, s, l.stem_bn)?;
        let t0 = g.relu(s);
        let t1 = self.block(g, t0, l.blocks[0])?;
        let t2 = self.block(g, t1, l.blocks[1])?;
        let t3 = self.block(g, t2, l.blocks[2])?;
        let a0 = self.conv(g, t3, l.aspp[0])?;
        let a0 = g.relu(a0);
        let a1 = self.conv(g, t3, l.aspp[1])?;
        let a1 = g.relu(a1);
        let a = g.add(a0, a1)?;
        let a = self.conv(g, a, l.aspp_proj)?;
        let a = self.bn(g, a, l.aspp_bn)?;
        let mut parts = Vec::with_capacity(4);
        for (tap, (conv, bn)) in [t0, t1, t2].into_iter().zip(l.adapters) {
            let y = self.conv(g, tap, conv)?;
            parts.push(self.bn(g, y, bn)?);
        }
        parts.push(a);
        let (hh, hw) = (h / 2, w / 2);
        for p in parts.iter_mut() {
            if g.shape(*p)[..2] != [hh, hw] {
                *p = g.bilinear_resize(*p, hh, hw)?;
            }
        }
        Ok(g.concat_channels(&parts)?)
    }

    /// Two 3x3 convolutions, ReLU after the first only.
    pub fn fuse(&mut self, g: &mut Graph<T>, h0: TensorId) -> Result<TensorId> {
        let l = &self.model.layout;
        let y = self.conv(g, h0, l.fuse1)?;
        let y = g.relu(y);
        self.conv(g, y, l.fuse2)
    }

    /// `(H0, H)` for one image.
    pub fn extract_features(&mut self, g: &mut Graph<T>, image: TensorId) -> Result<(TensorId, TensorId)> {
        let h0 = self.multiscale(g, image)?;
        let h = self.fuse(g, h0)?;
        Ok((h0, h))
    }

    /// Raw CPI maps `[H, W, 1]` (and half-resolution distance maps) of the
    /// query for each support mask. Entries fail independently on empty
    /// masks.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        query: TensorId,
        support: TensorId,
        masks: &[BinaryMap],
    ) -> Result<Vec<Result<(TensorId, TensorId)>>> {
        let (h, w, _) = g.tensor(query).hwc("forward")?;
        if g.shape(support) != g.shape(query) {
            return Err(Error::DimMismatch(format!(
                "support {:?} vs query {:?}",
                g.shape(support),
                g.shape(query)
            )));
        }
        for m in masks {
            if m.dims() != (h, w) {
                return Err(Error::DimMismatch(format!("mask {:?} vs image {:?}", m.dims(), (h, w))));
            }
        }
        let (_, hs) = self.extract_features(g, support)?;
        let hq0 = self.multiscale(g, query)?;
        let head = self.model.config.head.clone();
        let shared_hq = if head.relevance { None } else { Some(self.fuse(g, hq0)?) };
        let mut out = Vec::with_capacity(masks.len());
        for (k, m) in masks.iter().enumerate() {
            let r = self.head(g, hs, hq0, shared_hq, m, &head, h, w).map_err(|e| match e {
                Error::EmptyMask { .. } => Error::EmptyMask { index: k },
                e => e,
            });
            out.push(r);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn head(
        &mut self,
        g: &mut Graph<T>,
        hs: TensorId,
        hq0: TensorId,
        shared_hq: Option<TensorId>,
        mask: &BinaryMap,
        cfg: &HeadConfig,
        h: usize,
        w: usize,
    ) -> Result<(TensorId, TensorId)> {
        let p = head::masked_average_pool(g, hs, &head::feature_mask(mask))?;
        let hq = match shared_hq {
            Some(hq) => hq,
            None => {
                let l = &self.model.layout;
                let r = head::relevance_map(g, hq0, p, self.ids[l.w1.w], self.ids[l.w2.w])?;
                let weighted = g.mul_channels(r, hq0)?;
                self.fuse(g, weighted)?
            }
        };
        let d = match cfg.distance {
            Distance::Cosine => head::cosine_distance_map(g, hq, p, T::lit(cfg.alpha as f64))?,
            Distance::Euclidean => head::euclidean_distance_map(g, hq, p)?,
        };
        let c = head::sigmoid_activation(g, d, T::lit(cfg.beta as f64));
        let up = g.bilinear_resize(c, h, w)?;
        Ok((up, d))
    }

    /// Dice loss of the query prediction for one pair.
    pub fn pair_loss(&mut self, g: &mut Graph<T>, pair: &SamplePair) -> Result<TensorId> {
        let q = g.leaf(pair.query_image.to_tensor());
        let s = g.leaf(pair.support_image.to_tensor());
        let mut outs = self.forward(g, q, s, std::slice::from_ref(&pair.support_mask))?;
        let (pred, _) = outs.pop().expect("one mask")?;
        let target: Vec<T> = pair.query_mask.data().iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Ok(g.dice_loss(pred, &target, T::lit(self.model.config.head.tau as f64))?)
    }
}

pub(crate) fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::IndivisibleDims {
            height: h,
            width: w,
            multiple: 16,
        });
    }
    Ok(())
}

/// Output of one extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct CpiOutput {
    /// Raw CPI map at input size, values in [0, 1].
    pub map: ImagePlane,
    /// Distance map at half resolution.
    pub distance: ImagePlane,
}

#[derive(Clone, Debug)]
pub struct CpieModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<ParamTensor>,
    running: Vec<RunningStats>,
}

impl CpieModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params, running) = build_layout(&config.backbone, &mut rng);
        Ok(Self {
            config,
            layout,
            params,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn running(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Parameter values converted to `T`, in registration order.
    pub fn weights<T: Real>(&self) -> Vec<Vec<T>> {
        self.params
            .iter()
            .map(|p| p.data.iter().map(|&v| T::lit(v as f64)).collect())
            .collect()
    }

    /// Registers the given weights as trainable leaves of `g`.
    pub fn bind<'m, T: Real>(&'m self, g: &mut Graph<T>, weights: &[Vec<T>], mode: BnMode) -> Result<Bound<'m, T>> {
        if weights.len() != self.params.len() {
            return Err(Error::DimMismatch(format!(
                "{} weight arrays for {} parameters",
                weights.len(),
                self.params.len()
            )));
        }
        let ids = self
            .params
            .iter()
            .zip(weights)
            .map(|(p, w)| g.param(&p.shape, w.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound {
            model: self,
            ids,
            mode,
            stats: Vec::new(),
        })
    }

    /// Inference (running batch-norm statistics) for each mask; features of
    /// both images are computed once.
    pub fn forward_batch(
        &self,
        query: &ImagePlane,
        support: &ImagePlane,
        masks: &[BinaryMap],
    ) -> Result<Vec<Result<CpiOutput>>> {
        let mut g = Graph::<f32>::new();
        let mut b = self.bind(&mut g, &self.weights(), BnMode::Infer)?;
        let q = g.leaf(query.to_tensor());
        let s = g.leaf(support.to_tensor());
        let outs = b.forward(&mut g, q, s, masks)?;
        Ok(outs
            .into_iter()
            .map(|r| {
                r.map(|(m, d)| CpiOutput {
                    map: ImagePlane::from_tensor(g.tensor(m)).expect("hwc map"),
                    distance: ImagePlane::from_tensor(g.tensor(d)).expect("hwc map"),
                })
            })
            .collect())
    }

    pub fn forward(&self, query: &ImagePlane, support: &ImagePlane, mask: &BinaryMap) -> Result<CpiOutput> {
        self.forward_batch(query, support, std::slice::from_ref(mask))?
            .pop()
            .expect("one mask")
    }

    /// `(H0, H)` of one image in inference mode.
    pub fn extract_features(&self, image: &ImagePlane) -> Result<(ImagePlane, ImagePlane)> {
        let mut g = Graph::<f32>::new();
        let mut b = self.bind(&mut g, &self.weights(), BnMode::Infer)?;
        let x = g.leaf(image.to_tensor());
        let (h0, h) = b.extract_features(&mut g, x)?;
        let f = |id| ImagePlane::from_tensor(g.tensor(id)).expect("hwc map");
        Ok((f(h0), f(h)))
    }

    /// Dice loss on a pair without updating anything.
    pub fn loss(&self, pair: &SamplePair, mode: BnMode) -> Result<f32> {
        let mut g = Graph::<f32>::new();
        let mut b = self.bind(&mut g, &self.weights(), mode)?;
        let l = b.pair_loss(&mut g, pair)?;
        Ok(g.value(l)[0])
    }

    /// Folds one set of train-mode statistics into the running averages
    /// (unbiased variance).
    pub fn update_running<T: Real>(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let m = self.config.bn_momentum;
        for (idx, s) in stats {
            let rs = &mut self.running[*idx];
            let corr = if s.count > 1 {
                s.count as f32 / (s.count - 1) as f32
            } else {
                1.0
            };
            for c in 0..rs.mean.len() {
                let mean = s.mean[c].to_f32().unwrap_or(0.0);
                let var = s.var[c].to_f32().unwrap_or(0.0) * corr;
                rs.mean[c] = (1.0 - m) * rs.mean[c] + m * mean;
                rs.var[c] = (1.0 - m) * rs.var[c] + m * var;
            }
        }
    }
}
