//! 3D U-Net with K replicated output heads.
//!
//! The decoder is a flat list of stages. The last `head_depth` conv blocks
//! and the classifier form the head, replicated K times; everything before
//! is the shared trunk. Every layer draws its initial weights from a stream
//! keyed by its position and replica index, so a one-head model starts from
//! exactly the weights of the plain [`UNet3d`].

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::layers::{self, init_stream, Classifier, ClassifierCache, ConvBlock, ConvBlockCache, Param};
use super::tensor::Tensor;
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::losses;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of output heads.
    pub k: usize,
    /// Pooling steps in the encoder.
    pub levels: usize,
    /// Channels at full resolution; doubled per level.
    pub base_channels: usize,
    pub num_classes: usize,
    /// Trailing decoder conv blocks replicated per head.
    pub head_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 5,
            levels: 3,
            base_channels: 16,
            num_classes: NUM_CLASSES,
            head_depth: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "need at least one head"));
        }
        if self.levels == 0 {
            return Err(Error::config("levels", "need at least one level"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels", "must be positive"));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::config("num_classes", format!("must be {NUM_CLASSES}")));
        }
        if self.head_depth > 2 * self.levels {
            return Err(Error::config(
                "head_depth",
                format!("at most {} decoder blocks exist", 2 * self.levels),
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::Shape(format!("input {dims:?} not divisible by {d}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Encoder {
    /// Two blocks per level; the last entry is the bottleneck.
    blocks: Vec<[ConvBlock; 2]>,
}

struct EncoderTape {
    blocks: Vec<[ConvBlockCache; 2]>,
    pools: Vec<(Vec<u32>, [usize; 3])>,
}

impl Encoder {
    fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut ordinal = 0;
        let mut next = |cin, cout| {
            let b = ConvBlock::new(cin, cout, &mut init_stream(seed, ordinal, 0));
            ordinal += 1;
            b
        };
        let mut cin = 1;
        let blocks = (0..=config.levels)
            .map(|l| {
                let c = config.channels(l);
                let pair = [next(cin, c), next(c, c)];
                cin = c;
                pair
            })
            .collect();
        Encoder { blocks }
    }

    fn forward(&self, x: Tensor) -> (Tensor, Vec<Tensor>, EncoderTape) {
        let mut tape = EncoderTape {
            blocks: Vec::new(),
            pools: Vec::new(),
        };
        let mut skips = Vec::new();
        let mut t = x;
        let last = self.blocks.len() - 1;
        for (l, [a, b]) in self.blocks.iter().enumerate() {
            let (h, ca) = a.forward(t);
            let (h, cb) = b.forward(h);
            tape.blocks.push([ca, cb]);
            if l == last {
                t = h;
            } else {
                let (p, arg) = layers::maxpool(&h);
                tape.pools.push((arg, h.dims));
                skips.push(h);
                t = p;
            }
        }
        (t, skips, tape)
    }

    fn backward(&mut self, tape: EncoderTape, grad: Tensor, mut skip_grads: Vec<Option<Tensor>>) {
        let mut g = grad;
        let mut pools = tape.pools;
        let last = self.blocks.len() - 1;
        for (l, ([a, b], [ca, cb])) in self.blocks.iter_mut().zip(tape.blocks).enumerate().rev() {
            if l < last {
                let (arg, dims) = pools.pop().expect("one pool per level");
                g = layers::maxpool_backward(&g, &arg, dims);
                if let Some(s) = skip_grads[l].take() {
                    g.add_assign(&s);
                }
            }
            g = b.backward(cb, g, true).expect("input grad requested");
            match a.backward(ca, g, l > 0) {
                Some(next) => g = next,
                None => return,
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        self.blocks.iter().flatten().flat_map(|b| b.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks.iter_mut().flatten().flat_map(|b| b.params_mut()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    Up,
    /// Concatenates the encoder skip of this level after the current map.
    Concat(usize),
    Block(ConvBlock),
    Classify(Classifier),
}

enum StageCache {
    Up,
    Concat { level: usize, channels: usize },
    Block(ConvBlockCache),
    Classify(ClassifierCache),
}

impl Stage {
    fn params(&self) -> Vec<&Param> {
        match self {
            Stage::Block(b) => b.params().to_vec(),
            Stage::Classify(c) => c.params().to_vec(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Stage::Block(b) => b.params_mut().into_iter().collect(),
            Stage::Classify(c) => c.params_mut().into_iter().collect(),
            _ => Vec::new(),
        }
    }
}

/// Full decoder with every layer drawn for `replica`.
fn decoder_stages(config: &ModelConfig, seed: u64, replica: u64) -> Vec<Stage> {
    let mut ordinal = 2 * (config.levels as u64 + 1);
    let mut stages = Vec::new();
    for l in (0..config.levels).rev() {
        let (c, below) = (config.channels(l), config.channels(l + 1));
        stages.push(Stage::Up);
        stages.push(Stage::Concat(l));
        for cin in [below + c, c] {
            stages.push(Stage::Block(ConvBlock::new(cin, c, &mut init_stream(seed, ordinal, replica))));
            ordinal += 1;
        }
    }
    let cls = Classifier::new(config.channels(0), config.num_classes, &mut init_stream(seed, ordinal, replica));
    stages.push(Stage::Classify(cls));
    stages
}

/// Index of the first head stage.
fn head_start(stages: &[Stage], head_depth: usize) -> usize {
    let mut seen = 0;
    for (i, s) in stages.iter().enumerate().rev() {
        if matches!(s, Stage::Block(_)) {
            if seen == head_depth {
                return i + 1;
            }
            seen += 1;
        }
    }
    0
}

fn run_stages(stages: &[Stage], x: Tensor, skips: &[Tensor]) -> (Tensor, Vec<StageCache>) {
    let mut tape = Vec::with_capacity(stages.len());
    let mut t = x;
    for s in stages {
        t = match s {
            Stage::Up => {
                tape.push(StageCache::Up);
                layers::upsample(&t)
            }
            Stage::Concat(level) => {
                tape.push(StageCache::Concat {
                    level: *level,
                    channels: t.channels,
                });
                Tensor::concat(&t, &skips[*level])
            }
            Stage::Block(b) => {
                let (out, c) = b.forward(t);
                tape.push(StageCache::Block(c));
                out
            }
            Stage::Classify(c) => {
                let (out, cache) = c.forward(t);
                tape.push(StageCache::Classify(cache));
                out
            }
        };
    }
    (t, tape)
}

fn backprop_stages(stages: &mut [Stage], tape: Vec<StageCache>, grad: Tensor, skip_grads: &mut [Option<Tensor>]) -> Tensor {
    let mut g = grad;
    for (s, cache) in stages.iter_mut().zip(tape).rev() {
        g = match (s, cache) {
            (Stage::Up, StageCache::Up) => layers::upsample_backward(&g),
            (Stage::Concat(_), StageCache::Concat { level, channels }) => {
                let (up, skip) = g.split(channels);
                match &mut skip_grads[level] {
                    Some(acc) => acc.add_assign(&skip),
                    slot => *slot = Some(skip),
                }
                up
            }
            (Stage::Block(b), StageCache::Block(c)) => b.backward(c, g, true).expect("input grad requested"),
            (Stage::Classify(cl), StageCache::Classify(c)) => cl.backward(c, g),
            _ => unreachable!("tape does not match stages"),
        };
    }
    g
}

/// Everything backward needs from one training forward pass.
pub struct Tape {
    encoder: EncoderTape,
    trunk: Vec<StageCache>,
    head: Vec<StageCache>,
    head_index: usize,
}

/// Common interface of the K-head model and the plain U-Net.
pub trait Segmenter {
    fn config(&self) -> &ModelConfig;

    fn num_heads(&self) -> usize;

    /// Logits of one head, with the tape for [`Segmenter::backward`].
    fn forward_head(&self, x: &Tensor, head: usize) -> (Tensor, Tape);

    /// Accumulates gradients into the trunk and the taped head.
    fn backward(&mut self, tape: Tape, dlogits: Tensor);

    /// Logits of every head from one trunk pass.
    fn forward_all(&self, x: &Tensor) -> Vec<Tensor>;

    /// Trunk parameters followed by those of `head`.
    fn trainable_mut(&mut self, head: usize) -> Vec<&mut Param>;

    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KHeadModel {
    config: ModelConfig,
    encoder: Encoder,
    trunk: Vec<Stage>,
    heads: Vec<Vec<Stage>>,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<KHeadModel> {
    config.validate()?;
    let encoder = Encoder::new(config, seed);
    let mut first = decoder_stages(config, seed, 0);
    let split = head_start(&first, config.head_depth);
    let mut heads = vec![first.split_off(split)];
    for k in 1..config.k {
        heads.push(decoder_stages(config, seed, k as u64).split_off(split));
    }
    Ok(KHeadModel {
        config: *config,
        encoder,
        trunk: first,
        heads,
    })
}

impl KHeadModel {
    /// Parameters of one head only.
    pub fn head_params(&self, head: usize) -> Vec<&Param> {
        self.heads[head].iter().flat_map(Stage::params).collect()
    }

    pub fn head_params_mut(&mut self, head: usize) -> Vec<&mut Param> {
        self.heads[head].iter_mut().flat_map(Stage::params_mut).collect()
    }

    /// Parameters shared by all heads.
    pub fn trunk_params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.trunk.iter().flat_map(Stage::params));
        p
    }

    /// Overwrites head `to` with a copy of head `from`.
    pub fn copy_head(&mut self, from: usize, to: usize) {
        self.heads[to] = self.heads[from].clone();
    }
}

impl Segmenter for KHeadModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn forward_head(&self, x: &Tensor, head: usize) -> (Tensor, Tape) {
        let (bottom, skips, encoder) = self.encoder.forward(x.clone());
        let (t, trunk) = run_stages(&self.trunk, bottom, &skips);
        let (logits, head_tape) = run_stages(&self.heads[head], t, &skips);
        let tape = Tape {
            encoder,
            trunk,
            head: head_tape,
            head_index: head,
        };
        (logits, tape)
    }

    fn backward(&mut self, tape: Tape, dlogits: Tensor) {
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; self.config.levels];
        let g = backprop_stages(&mut self.heads[tape.head_index], tape.head, dlogits, &mut skip_grads);
        let g = backprop_stages(&mut self.trunk, tape.trunk, g, &mut skip_grads);
        self.encoder.backward(tape.encoder, g, skip_grads);
    }

    fn forward_all(&self, x: &Tensor) -> Vec<Tensor> {
        let (bottom, skips, _) = self.encoder.forward(x.clone());
        let (t, _) = run_stages(&self.trunk, bottom, &skips);
        self.heads
            .iter()
            .map(|h| run_stages(h, t.clone(), &skips).0)
            .collect()
    }

    fn trainable_mut(&mut self, head: usize) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.trunk.iter_mut().flat_map(Stage::params_mut));
        p.extend(self.heads[head].iter_mut().flat_map(Stage::params_mut));
        p
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk_params();
        p.extend(self.heads.iter().flatten().flat_map(Stage::params));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.trunk.iter_mut().flat_map(Stage::params_mut));
        p.extend(self.heads.iter_mut().flatten().flat_map(Stage::params_mut));
        p
    }
}

/// Plain single-path 3D U-Net, the reference for the one-head model.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet3d {
    config: ModelConfig,
    encoder: Encoder,
    decoder: Vec<Stage>,
}

impl UNet3d {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let config = ModelConfig { k: 1, ..*config };
        config.validate()?;
        Ok(UNet3d {
            config,
            encoder: Encoder::new(&config, seed),
            decoder: decoder_stages(&config, seed, 0),
        })
    }
}

impl Segmenter for UNet3d {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn num_heads(&self) -> usize {
        1
    }

    fn forward_head(&self, x: &Tensor, _head: usize) -> (Tensor, Tape) {
        let (bottom, skips, encoder) = self.encoder.forward(x.clone());
        let (logits, trunk) = run_stages(&self.decoder, bottom, &skips);
        let tape = Tape {
            encoder,
            trunk,
            head: Vec::new(),
            head_index: 0,
        };
        (logits, tape)
    }

    fn backward(&mut self, tape: Tape, dlogits: Tensor) {
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; self.config.levels];
        let g = backprop_stages(&mut self.decoder, tape.trunk, dlogits, &mut skip_grads);
        self.encoder.backward(tape.encoder, g, skip_grads);
    }

    fn forward_all(&self, x: &Tensor) -> Vec<Tensor> {
        vec![self.forward_head(x, 0).0]
    }

    fn trainable_mut(&mut self, _head: usize) -> Vec<&mut Param> {
        self.params_mut()
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.iter().flat_map(Stage::params));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.iter_mut().flat_map(Stage::params_mut));
        p
    }
}

/// Softmax over channels at every voxel.
pub fn softmax(logits: &Tensor) -> Tensor {
    let n = logits.voxels();
    let c = logits.channels;
    let mut out = logits.clone();
    for v in 0..n {
        let max = (0..c).map(|k| logits.data[k * n + v]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for k in 0..c {
            let e = ((logits.data[k * n + v] - max) as f64).exp();
            out.data[k * n + v] = e as f32;
            sum += e;
        }
        for k in 0..c {
            out.data[k * n + v] = (out.data[k * n + v] as f64 / sum) as f32;
        }
    }
    out
}

/// Per-head logits and probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct KHeadOutput {
    pub logits: Vec<Tensor>,
    pub probs: Vec<Tensor>,
}

/// All heads on a single-channel patch.
pub fn forward(model: &dyn Segmenter, patch: &Tensor) -> Result<KHeadOutput> {
    model.config().check_input(patch.dims)?;
    if patch.channels != 1 {
        return Err(Error::Shape(format!("expected 1 input channel, got {}", patch.channels)));
    }
    let logits = model.forward_all(patch);
    let probs = logits.iter().map(softmax).collect();
    Ok(KHeadOutput { logits, probs })
}

/// Mean over heads of the per-head probabilities.
pub fn mean_prediction(out: &KHeadOutput) -> Tensor {
    let k = out.probs.len() as f64;
    let first = &out.probs[0];
    let mut mean = Tensor::zeros(first.channels, first.dims);
    for (i, m) in mean.data.iter_mut().enumerate() {
        *m = (out.probs.iter().map(|p| p.data[i] as f64).sum::<f64>() / k) as f32;
    }
    mean
}

/// Entropy in nats of each voxel's class distribution.
pub fn entropy_map(mean_probs: &Tensor) -> Array3<f64> {
    let n = mean_probs.voxels();
    let c = mean_probs.channels;
    let [z, y, x] = mean_probs.dims;
    Array3::from_shape_fn((z, y, x), |(a, b, d)| {
        let v = (a * y + b) * x + d;
        losses::voxel_entropy((0..c).map(|k| mean_probs.data[k * n + v] as f64))
    })
}
