use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::{ModelCheckpoint, Provenance, Stage};
use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm2d, BnCache, BnUpdate, Conv2d,
    ConvCache, Linear, MaxPool2d, PoolCache,
};
use super::params::{Grads, ParamStore};
use super::tensor::Tensor;
use super::{DiscriminatorConfig, RfResNetConfig};
use crate::data::{MidLevelVector, LABEL_MAX, LABEL_MIN};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

/// Rows per batch when predicting over many inputs.
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

struct ConvBnCache {
    conv: ConvCache,
    bn: BnCache,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: [usize; 2],
        stride: usize,
        config: &RfResNetConfig,
    ) -> Self {
        let fan_in = in_c * kernel[0] * kernel[1];
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let weights = (0..out_c * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_c, out_c, kernel, stride, weights, None),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_c, config.bn_eps, config.bn_momentum),
        }
    }

    fn eval(&self, params: &ParamStore, x: &Tensor) -> Tensor {
        let (y, _) = self.conv.forward(params, x, false);
        self.bn.forward_eval(params, &y)
    }

    fn train(&self, params: &ParamStore, x: &Tensor, updates: &mut Vec<BnUpdate>) -> (Tensor, ConvBnCache) {
        let (y, conv) = self.conv.forward(params, x, true);
        let (z, bn, update) = self.bn.forward_train(params, &y);
        updates.push(update);
        (
            z,
            ConvBnCache {
                conv: conv.expect("cache requested"),
                bn,
            },
        )
    }

    fn backward(&self, params: &ParamStore, cache: &ConvBnCache, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let d = self.bn.backward(params, &cache.bn, dy, grads);
        self.conv.backward(params, &cache.conv, &d, grads)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: ConvBn,
    b: ConvBn,
    proj: Option<ConvBn>,
    pool: Option<MaxPool2d>,
}

struct BlockCache {
    a: ConvBnCache,
    a_out: Tensor,
    b: ConvBnCache,
    proj: Option<ConvBnCache>,
    out: Tensor,
    pool: Option<PoolCache>,
}

impl ResBlock {
    fn eval(&self, params: &ParamStore, x: &Tensor) -> Tensor {
        let h = relu(&self.a.eval(params, x));
        let mut h = self.b.eval(params, &h);
        match &self.proj {
            Some(p) => h.add_assign(&p.eval(params, x)),
            None => h.add_assign(x),
        }
        let out = relu(&h);
        match &self.pool {
            Some(p) => p.forward(&out).0,
            None => out,
        }
    }

    fn train(&self, params: &ParamStore, x: &Tensor, updates: &mut Vec<BnUpdate>) -> (Tensor, BlockCache) {
        let (h, a) = self.a.train(params, x, updates);
        let a_out = relu(&h);
        let (mut h, b) = self.b.train(params, &a_out, updates);
        let proj = match &self.proj {
            Some(p) => {
                let (s, c) = p.train(params, x, updates);
                h.add_assign(&s);
                Some(c)
            }
            None => {
                h.add_assign(x);
                None
            }
        };
        let out = relu(&h);
        let (y, pool) = match &self.pool {
            Some(p) => {
                let (y, c) = p.forward(&out);
                (y, Some(c))
            }
            None => (out.clone(), None),
        };
        (
            y,
            BlockCache {
                a,
                a_out,
                b,
                proj,
                out,
                pool,
            },
        )
    }

    fn backward(&self, params: &ParamStore, cache: &BlockCache, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let d = match (&self.pool, &cache.pool) {
            (Some(p), Some(c)) => p.backward(c, dy),
            _ => dy.clone(),
        };
        let d_sum = relu_backward(&cache.out, &d);
        let d_a_out = self.b.backward(params, &cache.b, &d_sum, grads);
        let d_a = relu_backward(&cache.a_out, &d_a_out);
        let mut dx = self.a.backward(params, &cache.a, &d_a, grads);
        match (&self.proj, &cache.proj) {
            (Some(p), Some(c)) => dx.add_assign(&p.backward(params, c, &d_sum, grads)),
            _ => dx.add_assign(&d_sum),
        }
        dx
    }
}

/// Cached activations of a training-mode forward pass.
pub struct TrainForward {
    stem: ConvBnCache,
    stem_out: Tensor,
    stem_pool: Option<PoolCache>,
    blocks: Vec<BlockCache>,
    trunk_out_shape: [usize; 4],
    bn_updates: Vec<BnUpdate>,
    /// Pooled trunk embedding, `n x width`.
    pub embedding: Tensor,
    /// Mid-level predictions, `n x 7`.
    pub output: Tensor,
}

/// The regressor: residual trunk, global average pool and a linear
/// (1x1 convolution) head.
#[derive(Debug, Clone)]
pub struct RfResNet {
    config: RfResNetConfig,
    pub params: ParamStore,
    stem: ConvBn,
    stem_pool: Option<MaxPool2d>,
    blocks: Vec<ResBlock>,
    head: Linear,
}

impl PartialEq for RfResNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl RfResNet {
    pub fn new(config: &RfResNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::new_unchecked(config, seed))
    }

    fn new_unchecked(config: &RfResNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = ConvBn::new(
            &mut store,
            &mut rng,
            "stem",
            1,
            config.stem.channels,
            config.stem.kernel,
            config.stem.stride,
            config,
        );
        let stem_pool = config.stem_pool.map(|p| MaxPool2d {
            kernel: p.kernel,
            stride: p.stride,
        });
        let mut blocks = Vec::new();
        let mut in_c = config.stem.channels;
        for (si, stage) in config.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let name = format!("stage{}.block{bi}", si + 1);
                let stride = if bi == 0 { stage.stride } else { 1 };
                let a = ConvBn::new(&mut store, &mut rng, &format!("{name}.a"), in_c, stage.channels, stage.kernel, stride, config);
                let b = ConvBn::new(&mut store, &mut rng, &format!("{name}.b"), stage.channels, stage.channels, stage.kernel, 1, config);
                let proj = (in_c != stage.channels || stride != 1).then(|| {
                    ConvBn::new(&mut store, &mut rng, &format!("{name}.proj"), in_c, stage.channels, [1, 1], stride, config)
                });
                let pool = stage.pool_after.contains(&bi).then_some(MaxPool2d {
                    kernel: config.pool.kernel,
                    stride: config.pool.stride,
                });
                blocks.push(ResBlock { a, b, proj, pool });
                in_c = stage.channels;
            }
        }
        let width = config.embedding_width();
        let bound = 1.0 / (width as f64).sqrt();
        let head_w = (0..config.outputs * width).map(|_| rng.random_range(-bound..bound)).collect();
        // Start predictions at the centre of the rating scale.
        let head_b = vec![(LABEL_MIN + LABEL_MAX) / 2.0; config.outputs];
        let head = Linear::new(&mut store, "head", width, config.outputs, head_w, head_b);
        Self {
            config: config.clone(),
            params: store,
            stem,
            stem_pool,
            blocks,
            head,
        }
    }

    pub fn config(&self) -> &RfResNetConfig {
        &self.config
    }

    /// Stack spectrograms into a `n x 1 x bands x frames` batch.
    pub fn input_tensor(&self, inputs: &[&Spectrogram]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let [bands, frames] = self.config.input_shape;
        let mut data = Vec::with_capacity(inputs.len() * bands * frames);
        for s in inputs {
            if s.shape() != (bands, frames) {
                return Err(Error::Shape(format!(
                    "model expects {bands}x{frames} inputs, got {}x{}",
                    s.bands, s.frames
                )));
            }
            data.extend(s.data.iter().map(|&v| v as f64));
        }
        Ok(Tensor::from_vec(inputs.len(), 1, bands, frames, data))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [bands, frames] = self.config.input_shape;
        if x.c != 1 || x.h != bands || x.w != frames || x.n == 0 {
            return Err(Error::Shape(format!(
                "model expects n x 1 x {bands} x {frames}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn trunk_eval(&self, x: &Tensor) -> Tensor {
        let p = &self.params;
        let mut h = relu(&self.stem.eval(p, x));
        if let Some(pool) = &self.stem_pool {
            h = pool.forward(&h).0;
        }
        for b in &self.blocks {
            h = b.eval(p, &h);
        }
        global_avg_pool(&h)
    }

    /// Evaluation-mode forward pass returning (embedding, predictions).
    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let emb = self.trunk_eval(x);
        let out = self.head.forward(&self.params, &emb);
        Ok((emb, out))
    }

    /// Training-mode forward pass (batch statistics in normalization).
    pub fn forward_train(&self, x: &Tensor) -> Result<TrainForward> {
        self.check_input(x)?;
        let p = &self.params;
        let mut updates = Vec::new();
        let (h, stem) = self.stem.train(p, x, &mut updates);
        let stem_out = relu(&h);
        let (mut h, stem_pool) = match &self.stem_pool {
            Some(pool) => {
                let (y, c) = pool.forward(&stem_out);
                (y, Some(c))
            }
            None => (stem_out.clone(), None),
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.train(p, &h, &mut updates);
            blocks.push(c);
            h = y;
        }
        let trunk_out_shape = h.shape();
        let embedding = global_avg_pool(&h);
        let output = self.head.forward(p, &embedding);
        Ok(TrainForward {
            stem,
            stem_out,
            stem_pool,
            blocks,
            trunk_out_shape,
            bn_updates: updates,
            embedding,
            output,
        })
    }

    /// Gradients of the head given `d_output`; returns the gradient with
    /// respect to the embedding.
    pub fn head_backward(&self, fwd: &TrainForward, d_output: &Tensor, grads: &mut Grads) -> Tensor {
        self.head.backward(&self.params, &fwd.embedding, d_output, grads)
    }

    /// Backpropagate an embedding gradient through the trunk.
    pub fn trunk_backward(&self, fwd: &TrainForward, d_embedding: &Tensor, grads: &mut Grads) {
        let p = &self.params;
        let mut d = global_avg_pool_backward(fwd.trunk_out_shape, d_embedding);
        for (b, c) in self.blocks.iter().zip(&fwd.blocks).rev() {
            d = b.backward(p, c, &d, grads);
        }
        if let (Some(pool), Some(c)) = (&self.stem_pool, &fwd.stem_pool) {
            d = pool.backward(c, &d);
        }
        let d = relu_backward(&fwd.stem_out, &d);
        self.stem.backward(p, &fwd.stem, &d, grads);
    }

    /// Full backward pass for a loss on the predictions.
    pub fn backward(&self, fwd: &TrainForward, d_output: &Tensor) -> Grads {
        let mut grads = Grads::zeros_like(&self.params);
        let d_emb = self.head_backward(fwd, d_output, &mut grads);
        self.trunk_backward(fwd, &d_emb, &mut grads);
        grads
    }

    /// Fold the batch statistics of a training pass into the running
    /// normalization estimates.
    pub fn apply_bn_updates(&mut self, fwd: &TrainForward) {
        for u in &fwd.bn_updates {
            u.apply(&mut self.params);
        }
    }

    /// Evaluation-mode predictions and embeddings over many inputs.
    pub fn infer(&self, inputs: &[&Spectrogram]) -> Result<(Vec<Vec<f64>>, Vec<MidLevelVector>)> {
        let mut embeddings = Vec::with_capacity(inputs.len());
        let mut preds = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_BATCH) {
            let x = self.input_tensor(chunk)?;
            let (emb, out) = self.forward_eval(&x)?;
            for i in 0..x.n {
                embeddings.push(emb.row(i).to_vec());
                preds.push(MidLevelVector::from_slice(out.row(i))?);
            }
        }
        Ok((embeddings, preds))
    }

    pub fn predict(&self, inputs: &[&Spectrogram]) -> Result<Vec<MidLevelVector>> {
        Ok(self.infer(inputs)?.1)
    }

    pub fn embed(&self, inputs: &[&Spectrogram]) -> Result<Vec<Vec<f64>>> {
        Ok(self.infer(inputs)?.0)
    }

    /// Rebuild from a config and stored arrays.
    pub fn from_params(config: &RfResNetConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }
}

/// Build and initialize a model deterministically from `seed`.
pub fn build_model(config: &RfResNetConfig, seed: u64) -> Result<ModelCheckpoint> {
    let model = RfResNet::new(config, seed)?;
    Ok(ModelCheckpoint {
        id: format!("init-{seed}"),
        model,
        provenance: Provenance {
            stage: Stage::Init,
            seed,
            epoch: 0,
            validation_score: None,
        },
    })
}

/// Domain classifier on the pooled embedding: a perceptron with ReLU hidden
/// layers and a single logit output.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    pub params: ParamStore,
    layers: Vec<Linear>,
}

pub struct DiscriminatorCache {
    /// Input to each linear layer.
    inputs: Vec<Tensor>,
    pub logits: Tensor,
}

impl Discriminator {
    pub fn new(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.input == 0 || config.hidden.contains(&0) {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15c);
        let mut store = ParamStore::new();
        let mut widths = vec![config.input];
        widths.extend(&config.hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weights = (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                let bias = (0..w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                Linear::new(&mut store, &format!("disc.fc{i}"), w[0], w[1], weights, bias)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params: store,
            layers,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn forward(&self, embedding: &Tensor) -> DiscriminatorCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = embedding.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&self.params, &h);
            inputs.push(h);
            h = if i + 1 < self.layers.len() { relu(&y) } else { y };
        }
        DiscriminatorCache { inputs, logits: h }
    }

    /// Returns parameter gradients and the gradient with respect to the
    /// embedding.
    pub fn backward(&self, cache: &DiscriminatorCache, d_logits: &Tensor) -> (Grads, Tensor) {
        let mut grads = Grads::zeros_like(&self.params);
        let mut d = d_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let dx = layer.backward(&self.params, &cache.inputs[i], &d, &mut grads);
            d = if i > 0 {
                // inputs[i] is the ReLU output of the previous layer.
                relu_backward(&cache.inputs[i], &dx)
            } else {
                dx
            };
        }
        (grads, d)
    }
}
