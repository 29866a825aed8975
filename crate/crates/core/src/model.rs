//! Growing generator and per-channel patch discriminators.
//!
//! Generator at stage `n`: a head block (conv → batch-norm → LeakyReLU) on the stage-0
//! noise, `base_blocks - 1` more blocks for stage 0, `blocks_per_stage` blocks for each
//! later stage, and one plain output conv shared by all stages. That is
//! `base_blocks + blocks_per_stage * n` hidden blocks plus the output layer.
//!
//! Stage 0 maps `C`-channel noise to features; after the head block the feature maps are
//! enlarged by `1 + feature_upsample_margin`, refined, and center-cropped back. Each later
//! stage upsamples the previous features to its own shape, adds its noise map scaled by
//! the stage amplitude, refines through its blocks and adds the upsampled input back.
//!
//! The discriminator runs one input conv per spectrogram channel, stacks the resulting
//! feature maps along the batch axis, then applies `body_layers` conv + LeakyReLU layers
//! and a final conv producing a patch score map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Backend;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub base_blocks: usize,
    pub blocks_per_stage: usize,
    pub filters: usize,
    pub kernel: usize,
    pub leaky_alpha: f32,
    pub feature_upsample_margin: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            base_blocks: 4,
            blocks_per_stage: 3,
            filters: 64,
            kernel: 3,
            leaky_alpha: 0.05,
            feature_upsample_margin: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub filters: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub body_layers: usize,
    pub leaky_alpha: f32,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            filters: 64,
            kernel: 3,
            dilation: 1,
            body_layers: 3,
            leaky_alpha: 0.05,
        }
    }
}

impl DiscriminatorSpec {
    /// Side length of the input patch seen by one output score.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.dilation * (self.body_layers + 2)
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Head,
    Stage(usize),
    Tail,
    Critic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub dilation: usize,
}

impl Conv {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, dilation: usize, rng: &mut R) -> Self {
        Conv {
            weight: Tensor::randn(vec![cout, cin, k, k], INIT_STD, rng),
            bias: Tensor::zeros(vec![cout]),
            dilation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// conv → batch-norm → LeakyReLU
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub conv: Conv,
    pub norm: BatchNorm,
}

impl Block {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let gamma = Tensor::randn(vec![cout], INIT_STD, rng).map(|v| 1.0 + v);
        Block {
            conv: Conv::new(cin, cout, k, 1, rng),
            norm: BatchNorm {
                gamma,
                beta: Tensor::zeros(vec![cout]),
            },
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.gamma.numel() + self.norm.beta.numel()
    }
}

#[derive(Clone, Debug)]
pub struct ConvVars<V> {
    w: V,
    b: V,
    dilation: usize,
}

#[derive(Clone, Debug)]
pub struct BlockVars<V> {
    conv: ConvVars<V>,
    gamma: V,
    beta: V,
}

fn bind_conv<B: Backend>(b: &mut B, c: &Conv, trainable: bool, flat: &mut Vec<B::V>) -> ConvVars<B::V> {
    let w = b.leaf(c.weight.clone(), trainable);
    let bias = b.leaf(c.bias.clone(), trainable);
    flat.push(w.clone());
    flat.push(bias.clone());
    ConvVars {
        w,
        b: bias,
        dilation: c.dilation,
    }
}

fn bind_block<B: Backend>(b: &mut B, blk: &Block, trainable: bool, flat: &mut Vec<B::V>) -> BlockVars<B::V> {
    let conv = bind_conv(b, &blk.conv, trainable, flat);
    let gamma = b.leaf(blk.norm.gamma.clone(), trainable);
    let beta = b.leaf(blk.norm.beta.clone(), trainable);
    flat.push(gamma.clone());
    flat.push(beta.clone());
    BlockVars { conv, gamma, beta }
}

fn conv_forward<B: Backend>(b: &mut B, x: &B::V, c: &ConvVars<B::V>) -> B::V {
    let y = b.conv2d(x, &c.w, c.dilation);
    let shape = b.shape_of(&y);
    let bias = b.channel_broadcast(&c.b, &shape);
    b.add(&y, &bias)
}

/// Batch normalization with batch statistics over `(batch, h, w)`.
fn batch_norm<B: Backend>(b: &mut B, x: &B::V, gamma: &B::V, beta: &B::V) -> B::V {
    let shape = b.shape_of(x);
    let n = (shape[0] * shape[2] * shape[3]) as f32;
    let s = b.channel_sum(x);
    let mean = b.scale(&s, 1.0 / n);
    let mean = b.channel_broadcast(&mean, &shape);
    let centered = b.sub(x, &mean);
    let sq = b.square(&centered);
    let var = b.channel_sum(&sq);
    let var = b.scale(&var, 1.0 / n);
    let var = b.add_scalar(&var, BN_EPS);
    let inv = b.pow(&var, -0.5);
    let gain = b.mul(&inv, gamma);
    let gain = b.channel_broadcast(&gain, &shape);
    let shift = b.channel_broadcast(beta, &shape);
    let y = b.mul(&centered, &gain);
    b.add(&y, &shift)
}

fn block_forward<B: Backend>(b: &mut B, x: &B::V, blk: &BlockVars<B::V>, alpha: f32) -> B::V {
    let y = conv_forward(b, x, &blk.conv);
    let y = batch_norm(b, &y, &blk.gamma, &blk.beta);
    b.leaky_relu(&y, alpha)
}

fn center_crop<B: Backend>(b: &mut B, x: &B::V, h: usize, w: usize) -> B::V {
    let s = b.shape_of(x);
    let x = b.narrow(x, 2, (s[2] - h) / 2, h);
    b.narrow(&x, 3, (s[3] - w) / 2, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub channels: usize,
    pub head: Block,
    /// `stages[0]` has `base_blocks - 1` blocks, later stages `blocks_per_stage`.
    pub stages: Vec<Vec<Block>>,
    pub tail: Conv,
}

pub struct GeneratorVars<V> {
    head: BlockVars<V>,
    stages: Vec<Vec<BlockVars<V>>>,
    tail: ConvVars<V>,
    /// Every bound parameter in [`Generator::visit_params`] order.
    pub flat: Vec<V>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, channels: usize, rng: &mut R) -> Result<Self> {
        if spec.base_blocks < 1 || spec.blocks_per_stage < 1 {
            return Err(Error::config(
                "base_blocks",
                "generator needs at least one block per stage",
            ));
        }
        if spec.kernel.is_multiple_of(2) {
            return Err(Error::config("kernel", "must be odd"));
        }
        if spec.filters == 0 || channels == 0 {
            return Err(Error::config("filters", "must be positive"));
        }
        let f = spec.filters;
        let k = spec.kernel;
        let head = Block::new(channels, f, k, rng);
        let first = (1..spec.base_blocks).map(|_| Block::new(f, f, k, rng)).collect();
        let tail = Conv::new(f, channels, k, 1, rng);
        Ok(Generator {
            spec,
            channels,
            head,
            stages: vec![first],
            tail,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Grow by one stage whose blocks start as copies of the newest stage's blocks.
    pub fn add_stage(&mut self) {
        let template = self.stages.last().expect("generator has a first stage");
        let blocks = (0..self.spec.blocks_per_stage)
            .map(|i| template[i % template.len()].clone())
            .collect();
        self.stages.push(blocks);
    }

    /// Hidden conv blocks active at `stage` (output conv excluded).
    pub fn hidden_blocks(&self, stage: usize) -> usize {
        1 + self.stages[..=stage].iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters used when generating at `stage`.
    pub fn param_count(&self, stage: usize) -> usize {
        self.head.param_count()
            + self.stages[..=stage]
                .iter()
                .flatten()
                .map(Block::param_count)
                .sum::<usize>()
            + self.tail.param_count()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(ParamGroup, &Tensor)) {
        let visit_block = |blk: &Block, g: ParamGroup, f: &mut dyn FnMut(ParamGroup, &Tensor)| {
            f(g, &blk.conv.weight);
            f(g, &blk.conv.bias);
            f(g, &blk.norm.gamma);
            f(g, &blk.norm.beta);
        };
        visit_block(&self.head, ParamGroup::Head, f);
        for (s, blocks) in self.stages.iter().enumerate() {
            for blk in blocks {
                visit_block(blk, ParamGroup::Stage(s), f);
            }
        }
        f(ParamGroup::Tail, &self.tail.weight);
        f(ParamGroup::Tail, &self.tail.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut Tensor)) {
        fn visit_block(blk: &mut Block, g: ParamGroup, f: &mut dyn FnMut(ParamGroup, &mut Tensor)) {
            f(g, &mut blk.conv.weight);
            f(g, &mut blk.conv.bias);
            f(g, &mut blk.norm.gamma);
            f(g, &mut blk.norm.beta);
        }
        visit_block(&mut self.head, ParamGroup::Head, f);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for blk in blocks {
                visit_block(blk, ParamGroup::Stage(s), f);
            }
        }
        f(ParamGroup::Tail, &mut self.tail.weight);
        f(ParamGroup::Tail, &mut self.tail.bias);
    }

    pub fn bind<B: Backend>(&self, b: &mut B, trainable: &dyn Fn(ParamGroup) -> bool) -> GeneratorVars<B::V> {
        let mut flat = Vec::new();
        let head = bind_block(b, &self.head, trainable(ParamGroup::Head), &mut flat);
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(s, blocks)| {
                blocks
                    .iter()
                    .map(|blk| bind_block(b, blk, trainable(ParamGroup::Stage(s)), &mut flat))
                    .collect()
            })
            .collect();
        let tail = bind_conv(b, &self.tail, trainable(ParamGroup::Tail), &mut flat);
        GeneratorVars {
            head,
            stages,
            tail,
            flat,
        }
    }

    /// Expected noise map shape for `stage` given that stage's spatial size.
    pub fn noise_shape(&self, stage: usize, h: usize, w: usize) -> [usize; 4] {
        let ch = if stage == 0 {
            self.channels
        } else {
            self.spec.filters
        };
        [1, ch, h, w]
    }

    /// Generate at `stage` from one noise map per stage `0..=stage`. The spatial shape of
    /// each stage's output is the spatial shape of its noise map.
    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        vars: &GeneratorVars<B::V>,
        noise: &[B::V],
        amps: &[f32],
        stage: usize,
    ) -> Result<B::V> {
        if stage >= self.stages.len() {
            return Err(Error::ShapeMismatch(format!(
                "stage {stage} requested from a {}-stage generator",
                self.stages.len()
            )));
        }
        if noise.len() <= stage || amps.len() <= stage {
            return Err(Error::ShapeMismatch(format!(
                "{} noise maps / {} amplitudes for stage {stage}",
                noise.len(),
                amps.len()
            )));
        }
        let batch = b.shape_of(&noise[0])[0];
        for (s, z) in noise[..=stage].iter().enumerate() {
            let shape = b.shape_of(z);
            let ch = if s == 0 { self.channels } else { self.spec.filters };
            if shape.len() != 4 || shape[1] != ch || shape[0] != batch {
                return Err(Error::ShapeMismatch(format!(
                    "noise map {s} has shape {shape:?}, expected [{batch}, {ch}, H, W]"
                )));
            }
        }
        let alpha = self.spec.leaky_alpha;
        let shape0 = b.shape_of(&noise[0]);
        let (h0, w0) = (shape0[2], shape0[3]);
        let mut x = block_forward(b, &noise[0], &vars.head, alpha);
        let grow = 1.0 + self.spec.feature_upsample_margin.max(0.0);
        let (hu, wu) = (
            ((h0 as f64 * grow).round() as usize).max(h0),
            ((w0 as f64 * grow).round() as usize).max(w0),
        );
        x = b.resize(&x, hu, wu);
        for blk in &vars.stages[0] {
            x = block_forward(b, &x, blk, alpha);
        }
        x = center_crop(b, &x, h0, w0);
        for s in 1..=stage {
            let shape = b.shape_of(&noise[s]);
            let base = b.resize(&x, shape[2], shape[3]);
            let z = b.scale(&noise[s], amps[s]);
            let mut y = b.add(&base, &z);
            for blk in &vars.stages[s] {
                y = block_forward(b, &y, blk, alpha);
            }
            x = b.add(&y, &base);
        }
        Ok(conv_forward(b, &x, &vars.tail))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub channels: usize,
    /// One `1 -> filters` conv per spectrogram channel.
    pub inputs: Vec<Conv>,
    pub body: Vec<Conv>,
    pub tail: Conv,
}

pub struct DiscriminatorVars<V> {
    inputs: Vec<ConvVars<V>>,
    body: Vec<ConvVars<V>>,
    tail: ConvVars<V>,
    pub flat: Vec<V>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(spec: DiscriminatorSpec, channels: usize, rng: &mut R) -> Result<Self> {
        if spec.kernel.is_multiple_of(2) {
            return Err(Error::config("kernel", "must be odd"));
        }
        if spec.dilation == 0 {
            return Err(Error::config("d2_dilation", "must be >= 1"));
        }
        if spec.filters == 0 || channels == 0 {
            return Err(Error::config("filters", "must be positive"));
        }
        let (f, k, d) = (spec.filters, spec.kernel, spec.dilation);
        let inputs = (0..channels).map(|_| Conv::new(1, f, k, d, rng)).collect();
        let body = (0..spec.body_layers)
            .map(|_| Conv::new(f, f, k, d, rng))
            .collect();
        let tail = Conv::new(f, 1, k, d, rng);
        Ok(Discriminator {
            spec,
            channels,
            inputs,
            body,
            tail,
        })
    }

    pub fn param_count(&self) -> usize {
        self.inputs
            .iter()
            .chain(&self.body)
            .map(Conv::param_count)
            .sum::<usize>()
            + self.tail.param_count()
    }

    /// Parameter shapes in visit order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, t| out.push(t.shape().to_vec()));
        out
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(ParamGroup, &Tensor)) {
        for c in self
            .inputs
            .iter()
            .chain(&self.body)
            .chain(std::iter::once(&self.tail))
        {
            f(ParamGroup::Critic, &c.weight);
            f(ParamGroup::Critic, &c.bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut Tensor)) {
        for c in self
            .inputs
            .iter_mut()
            .chain(self.body.iter_mut())
            .chain(std::iter::once(&mut self.tail))
        {
            f(ParamGroup::Critic, &mut c.weight);
            f(ParamGroup::Critic, &mut c.bias);
        }
    }

    pub fn bind<B: Backend>(&self, b: &mut B, trainable: bool) -> DiscriminatorVars<B::V> {
        let mut flat = Vec::new();
        let inputs = self
            .inputs
            .iter()
            .map(|c| bind_conv(b, c, trainable, &mut flat))
            .collect();
        let body = self
            .body
            .iter()
            .map(|c| bind_conv(b, c, trainable, &mut flat))
            .collect();
        let tail = bind_conv(b, &self.tail, trainable, &mut flat);
        DiscriminatorVars {
            inputs,
            body,
            tail,
            flat,
        }
    }

    /// Patch scores for `x: [B, C, H, W]`, shape `[B * C, 1, H, W]`.
    pub fn forward<B: Backend>(&self, b: &mut B, vars: &DiscriminatorVars<B::V>, x: &B::V) -> Result<B::V> {
        let shape = b.shape_of(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "discriminator built for {} channels got input {shape:?}",
                self.channels
            )));
        }
        let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let alpha = self.spec.leaky_alpha;
        let mut feats = Vec::with_capacity(c);
        for (ch, conv) in vars.inputs.iter().enumerate() {
            let xc = b.narrow(x, 1, ch, 1);
            let y = conv_forward(b, &xc, conv);
            feats.push(b.leaky_relu(&y, alpha));
        }
        let stacked = if c == 1 {
            feats.pop().expect("one channel")
        } else {
            b.concat(&feats, 1)
        };
        let mut y = b.reshape(&stacked, &[batch * c, self.spec.filters, h, w]);
        for conv in &vars.body {
            let z = conv_forward(b, &y, conv);
            y = b.leaky_relu(&z, alpha);
        }
        Ok(conv_forward(b, &y, &vars.tail))
    }

    /// Scalar critic value: the mean patch score.
    pub fn score<B: Backend>(&self, b: &mut B, vars: &DiscriminatorVars<B::V>, x: &B::V) -> Result<B::V> {
        let patches = self.forward(b, vars, x)?;
        Ok(b.mean(&patches))
    }
}

/// Closed-form parameter count of one hidden generator block at width `f`.
pub fn block_param_count(filters: usize, kernel: usize) -> usize {
    kernel * kernel * filters * filters + filters + 2 * filters
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Eager, Graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec {
            filters: 8,
            ..Default::default()
        }
    }

    #[test]
    fn block_counts_grow_by_three() {
        let mut g = Generator::new(small_spec(), 2, &mut rng()).unwrap();
        for n in 0..5 {
            if n > 0 {
                g.add_stage();
            }
            assert_eq!(g.hidden_blocks(n), 4 + 3 * n);
        }
    }

    #[test]
    fn param_count_increment_matches_closed_form() {
        let mut g = Generator::new(small_spec(), 3, &mut rng()).unwrap();
        g.add_stage();
        g.add_stage();
        for n in 0..2 {
            assert_eq!(
                g.param_count(n + 1) - g.param_count(n),
                3 * block_param_count(8, 3)
            );
        }
        // 3 * (k^2 f^2 + f) + batch-norm terms 3 * 2f
        assert_eq!(3 * block_param_count(8, 3), 3 * (9 * 64 + 8) + 3 * 16);
    }

    #[test]
    fn stage_zero_preserves_noise_shape_and_retargets() {
        let g = Generator::new(small_spec(), 2, &mut rng()).unwrap();
        let mut e = Eager;
        let vars = g.bind(&mut e, &|_| false);
        for w in [40usize, 46] {
            let z = std::rc::Rc::new(Tensor::randn(vec![1, 2, 16, w], 1.0, &mut rng()));
            let out = g.forward(&mut e, &vars, &[z], &[1.0], 0).unwrap();
            assert_eq!(out.shape(), &[1, 2, 16, w]);
        }
    }

    #[test]
    fn later_stage_follows_noise_shape() {
        let mut g = Generator::new(small_spec(), 2, &mut rng()).unwrap();
        g.add_stage();
        let mut e = Eager;
        let vars = g.bind(&mut e, &|_| false);
        let z0 = std::rc::Rc::new(Tensor::randn(vec![1, 2, 10, 20], 1.0, &mut rng()));
        let z1 = std::rc::Rc::new(Tensor::randn(vec![1, 8, 21, 43], 1.0, &mut rng()));
        let out = g
            .forward(&mut e, &vars, &[z0.clone(), z1], &[1.0, 0.3], 1)
            .unwrap();
        assert_eq!(out.shape(), &[1, 2, 21, 43]);
        let bad = std::rc::Rc::new(Tensor::zeros(vec![1, 2, 21, 43]));
        assert!(matches!(
            g.forward(&mut e, &vars, &[z0, bad], &[1.0, 0.3], 1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn eager_and_graph_agree() {
        let mut g = Generator::new(small_spec(), 2, &mut rng()).unwrap();
        g.add_stage();
        let z0 = Tensor::randn(vec![1, 2, 9, 14], 1.0, &mut rng());
        let z1 = Tensor::randn(vec![1, 8, 17, 30], 1.0, &mut rng());
        let mut e = Eager;
        let ev = g.bind(&mut e, &|_| false);
        let a = g
            .forward(
                &mut e,
                &ev,
                &[z0.clone().into(), z1.clone().into()],
                &[1.0, 0.5],
                1,
            )
            .unwrap();
        let mut gr = Graph::new();
        let gv = g.bind(&mut gr, &|_| true);
        let n0 = gr.constant(z0);
        let n1 = gr.constant(z1);
        let b = g.forward(&mut gr, &gv, &[n0, n1], &[1.0, 0.5], 1).unwrap();
        assert_eq!(a.data(), gr.value(b).data());
    }

    #[test]
    fn output_is_unbounded() {
        let g = Generator::new(small_spec(), 1, &mut rng()).unwrap();
        let mut e = Eager;
        let vars = g.bind(&mut e, &|_| false);
        let z = std::rc::Rc::new(Tensor::randn(vec![1, 1, 12, 12], 1.0, &mut rng()));
        let out = g.forward(&mut e, &vars, &[z], &[1.0], 0).unwrap();
        // batch-normalized features drive an unsaturated output conv; scaled weights
        // push the output far outside [-1, 1]
        let mut big = g.clone();
        big.tail.weight = big.tail.weight.map(|v| v * 500.0);
        let bv = big.bind(&mut e, &|_| false);
        let z = std::rc::Rc::new(Tensor::randn(vec![1, 1, 12, 12], 1.0, &mut rng()));
        let out_big = big.forward(&mut e, &bv, &[z], &[1.0], 0).unwrap();
        assert!(out.is_finite());
        assert!(out_big.data().iter().any(|v| v.abs() > 1.0));
    }

    #[test]
    fn discriminator_stacks_channels_on_batch() {
        let d = Discriminator::new(
            DiscriminatorSpec {
                filters: 4,
                ..Default::default()
            },
            3,
            &mut rng(),
        )
        .unwrap();
        let mut e = Eager;
        let vars = d.bind(&mut e, false);
        let x = std::rc::Rc::new(Tensor::randn(vec![1, 3, 20, 24], 1.0, &mut rng()));
        let out = d.forward(&mut e, &vars, &x).unwrap();
        assert_eq!(out.shape(), &[3, 1, 20, 24]);
        let wrong = std::rc::Rc::new(Tensor::zeros(vec![1, 2, 20, 24]));
        assert!(matches!(
            d.forward(&mut e, &vars, &wrong),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn dilation_changes_no_shapes() {
        let d1 = Discriminator::new(
            DiscriminatorSpec {
                filters: 6,
                ..Default::default()
            },
            2,
            &mut rng(),
        )
        .unwrap();
        let d2 = Discriminator::new(
            DiscriminatorSpec {
                filters: 6,
                dilation: 3,
                ..Default::default()
            },
            2,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(d1.param_shapes(), d2.param_shapes());
        assert_eq!(d1.spec.receptive_field(), 11);
        assert_eq!(d2.spec.receptive_field(), 31);
    }
}
