//! Progressive adversarial training on one multi-channel spectrogram.
//!
//! Stages are trained coarse to fine. At stage `n` the newest `concurrent_stages`
//! generator stages are trainable (the current one at `lr`, the ones below it at
//! `lr * lr_scale_lower`) and everything older is frozen. Each iteration draws one set of
//! noise maps, takes `d_steps` critic updates on WGAN-GP losses, then `g_steps` generator
//! updates on the adversarial loss plus `rec_weight` times the reconstruction MSE. A
//! second, dilated critic joins at `d2_start_stage` and trains alongside the first.

use std::rc::Rc;

use log::info;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioLayerSet;
use crate::autograd::{Eager, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ParamGroup};
use crate::optim::Adam;
use crate::pyramid::{build_pyramid, PyramidSpec};
use crate::spectral::{stft_log_magnitude, StftParams};
use crate::tensor::{resize_bilinear, Tensor};

/// How the adversarial terms of several critics are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    Sum,
    Mean,
}

/// Full training configuration. Defaults match the footsteps preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_stages: usize,
    pub iters_per_stage: usize,
    pub filters: usize,
    pub d2_dilation: usize,
    pub min_size: usize,
    pub lr: f32,
    pub lr_scale_lower: f32,
    pub concurrent_stages: usize,
    pub rec_weight: f32,
    pub gp_weight: f32,
    pub d_steps: usize,
    pub g_steps: usize,
    /// `None` means `num_stages / 2`.
    pub d2_start_stage: Option<usize>,
    pub use_d2: bool,
    pub combine: Combine,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    /// Multiplier on the reconstruction RMSE that sets each stage's noise amplitude.
    pub noise_amp_scale: f32,
    pub feature_upsample_margin: f64,
    pub base_blocks: usize,
    pub blocks_per_stage: usize,
    pub kernel: usize,
    pub leaky_alpha: f32,
    pub d_body_layers: usize,
    /// Leading silence added to every layer when loading from files.
    pub pre_pad_ms: f64,
    pub stft: StftParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_stages: 10,
            iters_per_stage: 2000,
            filters: 64,
            d2_dilation: 3,
            min_size: 50,
            lr: 5e-4,
            lr_scale_lower: 0.1,
            concurrent_stages: 3,
            rec_weight: 10.0,
            gp_weight: 10.0,
            d_steps: 3,
            g_steps: 3,
            d2_start_stage: None,
            use_d2: true,
            combine: Combine::Sum,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            noise_amp_scale: 1.0,
            feature_upsample_margin: 0.1,
            base_blocks: 4,
            blocks_per_stage: 3,
            kernel: 3,
            leaky_alpha: 0.05,
            d_body_layers: 3,
            pre_pad_ms: 0.0,
            stft: StftParams::default(),
            seed: 0,
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be >= 1"));
    }
    Ok(())
}

fn finite_nonneg(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::config(field, "must be finite and >= 0"));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid().validate()?;
        self.stft.validate()?;
        positive("iters_per_stage", self.iters_per_stage)?;
        positive("filters", self.filters)?;
        positive("d2_dilation", self.d2_dilation)?;
        positive("concurrent_stages", self.concurrent_stages)?;
        positive("d_steps", self.d_steps)?;
        positive("g_steps", self.g_steps)?;
        positive("base_blocks", self.base_blocks)?;
        positive("blocks_per_stage", self.blocks_per_stage)?;
        if self.concurrent_stages > self.num_stages {
            return Err(Error::config("concurrent_stages", "must not exceed num_stages"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and > 0"));
        }
        if !(self.lr_scale_lower > 0.0 && self.lr_scale_lower.is_finite()) {
            return Err(Error::config("lr_scale_lower", "must be finite and > 0"));
        }
        finite_nonneg("rec_weight", self.rec_weight as f64)?;
        finite_nonneg("gp_weight", self.gp_weight as f64)?;
        finite_nonneg("noise_amp_scale", self.noise_amp_scale as f64)?;
        finite_nonneg("feature_upsample_margin", self.feature_upsample_margin)?;
        finite_nonneg("pre_pad_ms", self.pre_pad_ms)?;
        for (field, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must be in [0, 1)"));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config("kernel", "must be odd"));
        }
        if self.d2_start() >= self.num_stages {
            return Err(Error::config("d2_start_stage", "must be below num_stages"));
        }
        Ok(())
    }

    pub fn d2_start(&self) -> usize {
        self.d2_start_stage.unwrap_or(self.num_stages / 2)
    }

    /// Number of critics active at `stage`.
    pub fn critics_at(&self, stage: usize) -> usize {
        if self.use_d2 && stage >= self.d2_start() {
            2
        } else {
            1
        }
    }

    pub fn pyramid(&self) -> PyramidSpec {
        PyramidSpec {
            num_stages: self.num_stages,
            min_size: self.min_size,
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            base_blocks: self.base_blocks,
            blocks_per_stage: self.blocks_per_stage,
            filters: self.filters,
            kernel: self.kernel,
            leaky_alpha: self.leaky_alpha,
            feature_upsample_margin: self.feature_upsample_margin,
        }
    }

    pub fn discriminator_spec(&self, dilation: usize) -> DiscriminatorSpec {
        DiscriminatorSpec {
            filters: self.filters,
            kernel: self.kernel,
            dilation,
            body_layers: self.d_body_layers,
            leaky_alpha: self.leaky_alpha,
        }
    }

    /// Learning rate of a generator parameter group at `stage`, `None` if frozen.
    pub fn generator_lr(&self, group: ParamGroup, stage: usize) -> Option<f32> {
        let lowest = (stage + 1).saturating_sub(self.concurrent_stages);
        let stage_lr = |s: usize| {
            if s > stage || s < lowest {
                None
            } else if s == stage {
                Some(self.lr)
            } else {
                Some(self.lr * self.lr_scale_lower)
            }
        };
        match group {
            ParamGroup::Head => stage_lr(0),
            ParamGroup::Stage(s) => stage_lr(s),
            ParamGroup::Tail | ParamGroup::Critic => Some(self.lr),
        }
    }
}

/// Losses of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Iteration index within the stage.
    pub iteration: usize,
    pub stage: usize,
    /// Critic loss of the last critic step, summed over active critics.
    pub d_loss: f64,
    /// Generator adversarial loss of the last generator step.
    pub g_adv: f64,
    /// Reconstruction MSE of the last generator step.
    pub rec: f64,
}

/// `d_loss = mean(d_fake) - mean(d_real) + gp_weight * mean((g - 1)^2)` and
/// `g_adv = -mean(d_fake)` over the given gradient norms `g`.
pub fn wgan_gp_losses(
    d_real: &Tensor,
    d_fake: &Tensor,
    grad_norms: &Tensor,
    gp_weight: f64,
) -> Result<(f64, f64)> {
    for (t, what) in [
        (d_real, "critic scores"),
        (d_fake, "critic scores"),
        (grad_norms, "gradient norms"),
    ] {
        if !t.is_finite() {
            return Err(Error::NonFinite(what.into()));
        }
    }
    let gp = grad_norms
        .data()
        .iter()
        .map(|&g| (g as f64 - 1.0).powi(2))
        .sum::<f64>()
        / grad_norms.numel() as f64;
    let d_loss = d_fake.mean() - d_real.mean() + gp_weight * gp;
    Ok((d_loss, -d_fake.mean()))
}

/// Mean squared error between two tensors of the same shape.
pub fn reconstruction_loss(generated: &Tensor, real: &Tensor) -> Result<f64> {
    if generated.shape() != real.shape() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {:?} vs real {:?}",
            generated.shape(),
            real.shape()
        )));
    }
    let sum: f64 = generated
        .data()
        .iter()
        .zip(real.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / real.numel() as f64)
}

/// Gradient norms of the summed critic output with respect to `x: [B, C, H, W]`, taken
/// over the channel axis at every pixel. Returns `[B, 1, H, W]`; stays differentiable.
pub fn critic_grad_norms(
    g: &mut Graph,
    x: Var,
    critic: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let out = critic(g, x)?;
    let total = g.sum(out);
    let grad = g.grad(total, &[x])[0]
        .ok_or_else(|| Error::ShapeMismatch("critic output does not depend on its input".into()))?;
    let sq = g.square(grad);
    let channels = g.shape(sq)[1];
    let mut acc = g.narrow(sq, 1, 0, 1);
    for c in 1..channels {
        let part = g.narrow(sq, 1, c, 1);
        acc = g.add(acc, part);
    }
    let acc = g.add_scalar(acc, 1e-12);
    Ok(g.pow(acc, 0.5))
}

/// Critic loss on the tape: `mean D(fake) - mean D(real) + gp_weight * gp`, with the
/// penalty taken at `alpha * real + (1 - alpha) * fake`.
fn critic_loss(
    g: &mut Graph,
    d: &Discriminator,
    vars: &crate::model::DiscriminatorVars<Var>,
    real: &Tensor,
    fake: &Tensor,
    alpha: f32,
    gp_weight: f32,
) -> Result<Var> {
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let sr = d.score(g, vars, &r)?;
    let sf = d.score(g, vars, &f)?;
    let mixed = real.zip_map(fake, |a, b| alpha * a + (1.0 - alpha) * b);
    let xh = g.param(mixed);
    let norms = critic_grad_norms(g, xh, |g, x| d.forward(g, vars, &x))?;
    let dev = g.add_scalar(norms, -1.0);
    let sq = g.square(dev);
    let gp = g.mean(sq);
    let gp = g.scale(gp, gp_weight);
    let wd = g.sub(sf, sr);
    Ok(g.add(wd, gp))
}

/// Run the generator without recording a tape.
pub fn generate(gen: &Generator, noise: &[Tensor], amps: &[f32], stage: usize) -> Result<Tensor> {
    let mut e = Eager;
    let vars = gen.bind(&mut e, &|_| false);
    let z: Vec<Rc<Tensor>> = noise.iter().cloned().map(Rc::new).collect();
    let out = gen.forward(&mut e, &vars, &z, amps, stage)?;
    Ok(Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
}

/// Reconstruction noise for stages `0..=stage`: the fixed stage-0 map, zeros above.
pub fn reconstruction_noise(
    gen: &Generator,
    rec0: &Tensor,
    shapes: &[(usize, usize)],
    stage: usize,
) -> Vec<Tensor> {
    let mut out = vec![rec0.clone()];
    for (s, &(h, w)) in shapes.iter().enumerate().take(stage + 1).skip(1) {
        out.push(Tensor::zeros(gen.noise_shape(s, h, w).to_vec()));
    }
    out
}

/// Hooks called while training runs.
pub trait TrainObserver {
    fn on_iteration(&mut self, _record: &LossRecord) {}
    /// Called with a complete checkpoint after every stage.
    fn on_stage_complete(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub fn train(layers: &AudioLayerSet, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(layers, cfg, &mut ())
}

struct Critic {
    net: Discriminator,
    opt: Adam,
}

impl Critic {
    fn new(net: Discriminator, cfg: &TrainConfig) -> Self {
        Critic {
            opt: Self::optimizer(&net, cfg),
            net,
        }
    }

    fn optimizer(net: &Discriminator, cfg: &TrainConfig) -> Adam {
        let mut sizes = Vec::new();
        net.visit_params(&mut |_, t| sizes.push(t.numel()));
        Adam::new(&sizes, cfg.adam_beta1, cfg.adam_beta2)
    }

    fn reset_optimizer(&mut self, cfg: &TrainConfig) {
        self.opt = Self::optimizer(&self.net, cfg);
    }

    /// One update; returns the loss or the name of the non-finite quantity.
    fn step(
        &mut self,
        real: &Tensor,
        fake: &Tensor,
        alpha: f32,
        cfg: &TrainConfig,
    ) -> Result<std::result::Result<f64, &'static str>> {
        let mut g = Graph::new();
        let vars = self.net.bind(&mut g, true);
        let loss = critic_loss(&mut g, &self.net, &vars, real, fake, alpha, cfg.gp_weight)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Ok(Err("critic loss"));
        }
        let grads = g.grad(loss, &vars.flat);
        let grads: Vec<Tensor> = grads
            .iter()
            .zip(&vars.flat)
            .map(|(gv, &p)| match gv {
                Some(v) => g.value(*v).clone(),
                None => Tensor::zeros(g.shape(p).to_vec()),
            })
            .collect();
        if grads.iter().any(|t| !t.is_finite()) {
            return Ok(Err("critic gradient"));
        }
        self.opt.tick();
        let mut i = 0;
        let (opt, lr) = (&mut self.opt, cfg.lr);
        self.net.visit_params_mut(&mut |_, p| {
            opt.update(i, p, &grads[i], lr);
            i += 1;
        });
        Ok(Ok(value))
    }
}

/// Train on `layers`, reporting progress to `obs`.
pub fn train_with(
    layers: &AudioLayerSet,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let spec = stft_log_magnitude(layers, cfg.stft)?;
    let pyr = build_pyramid(&spec, cfg.pyramid())?;
    let channels = spec.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut gen = Generator::new(cfg.generator_spec(), channels, &mut rng)?;
    let mut d1 = Critic::new(
        Discriminator::new(cfg.discriminator_spec(1), channels, &mut rng)?,
        cfg,
    );
    let mut d2: Option<Critic> = None;
    let (h0, w0) = pyr.shapes[0];
    let rec0 = Tensor::randn(vec![1, channels, h0, w0], 1.0, &mut rng);
    let mut amps = vec![1.0f32];
    let mut history = Vec::with_capacity(cfg.num_stages * cfg.iters_per_stage);
    let mut last = None;

    for stage in 0..cfg.num_stages {
        let (h, w) = pyr.shapes[stage];
        let real = pyr.levels[stage].clone().reshape(vec![1, channels, h, w]);
        if stage > 0 {
            let noise = reconstruction_noise(&gen, &rec0, &pyr.shapes, stage - 1);
            let prev = generate(&gen, &noise, &amps, stage - 1)?;
            let rmse = reconstruction_loss(&resize_bilinear(&prev, h, w), &real)?.sqrt();
            gen.add_stage();
            amps.push(rmse as f32 * cfg.noise_amp_scale);
        }
        if cfg.critics_at(stage) == 2 && d2.is_none() {
            d2 = Some(Critic::new(
                Discriminator::new(cfg.discriminator_spec(cfg.d2_dilation), channels, &mut rng)?,
                cfg,
            ));
        }
        d1.reset_optimizer(cfg);
        if let Some(d) = d2.as_mut() {
            d.reset_optimizer(cfg);
        }
        info!(
            "stage {stage}: shape {h}x{w}, noise amp {:.4}, {} critic(s), {} generator params",
            amps[stage],
            cfg.critics_at(stage),
            gen.param_count(stage)
        );

        let mut groups = Vec::new();
        gen.visit_params(&mut |grp, t| groups.push((grp, t.numel())));
        let lrs: Vec<Option<f32>> = groups
            .iter()
            .map(|&(grp, _)| cfg.generator_lr(grp, stage))
            .collect();
        let sizes: Vec<usize> = groups
            .iter()
            .zip(&lrs)
            .filter(|(_, lr)| lr.is_some())
            .map(|(&(_, n), _)| n)
            .collect();
        let mut g_opt = Adam::new(&sizes, cfg.adam_beta1, cfg.adam_beta2);
        let rec_noise = reconstruction_noise(&gen, &rec0, &pyr.shapes, stage);

        for it in 0..cfg.iters_per_stage {
            let diverged = |what| Error::Divergence {
                stage,
                iteration: it,
                what,
            };
            let noise: Vec<Tensor> = (0..=stage)
                .map(|s| {
                    let (hs, ws) = pyr.shapes[s];
                    Tensor::randn(gen.noise_shape(s, hs, ws).to_vec(), 1.0, &mut rng)
                })
                .collect();

            let fake = generate(&gen, &noise, &amps, stage)?;
            if !fake.is_finite() {
                return Err(diverged("generator output"));
            }
            let mut d_loss = 0.0;
            for _ in 0..cfg.d_steps {
                d_loss = 0.0;
                for critic in std::iter::once(&mut d1).chain(d2.as_mut()) {
                    let alpha: f32 = rng.random();
                    d_loss += critic.step(&real, &fake, alpha, cfg)?.map_err(diverged)?;
                }
            }

            let mut g_adv = 0.0;
            let mut rec = 0.0;
            for _ in 0..cfg.g_steps {
                let mut g = Graph::new();
                let vars = gen.bind(&mut g, &|grp| cfg.generator_lr(grp, stage).is_some());
                let z: Vec<Var> = noise.iter().map(|t| g.constant(t.clone())).collect();
                let out = gen.forward(&mut g, &vars, &z, &amps, stage)?;
                let mut scores = Vec::new();
                for critic in std::iter::once(&d1).chain(d2.as_ref()) {
                    let dv = critic.net.bind(&mut g, false);
                    scores.push(critic.net.score(&mut g, &dv, &out)?);
                }
                let mut adv = scores[0];
                for &s in &scores[1..] {
                    adv = g.add(adv, s);
                }
                let sign = match cfg.combine {
                    Combine::Sum => -1.0,
                    Combine::Mean => -1.0 / scores.len() as f32,
                };
                let adv = g.scale(adv, sign);
                let rz: Vec<Var> = rec_noise.iter().map(|t| g.constant(t.clone())).collect();
                let rec_out = gen.forward(&mut g, &vars, &rz, &amps, stage)?;
                let target = g.constant(real.clone());
                let diff = g.sub(rec_out, target);
                let sq = g.square(diff);
                let rec_loss = g.mean(sq);
                let weighted = g.scale(rec_loss, cfg.rec_weight);
                let total = g.add(adv, weighted);
                g_adv = g.scalar(adv) as f64;
                rec = g.scalar(rec_loss) as f64;
                if !g.scalar(total).is_finite() {
                    return Err(diverged("generator loss"));
                }

                let trainable: Vec<Var> = vars
                    .flat
                    .iter()
                    .zip(&lrs)
                    .filter(|(_, lr)| lr.is_some())
                    .map(|(&v, _)| v)
                    .collect();
                let grads: Vec<Tensor> = g
                    .grad(total, &trainable)
                    .into_iter()
                    .zip(&trainable)
                    .map(|(gv, &p)| match gv {
                        Some(v) => g.value(v).clone(),
                        None => Tensor::zeros(g.shape(p).to_vec()),
                    })
                    .collect();
                if grads.iter().any(|t| !t.is_finite()) {
                    return Err(diverged("generator gradient"));
                }
                g_opt.tick();
                let (mut idx, mut slot) = (0, 0);
                gen.visit_params_mut(&mut |_, p| {
                    if let Some(lr) = lrs[idx] {
                        g_opt.update(slot, p, &grads[slot], lr);
                        slot += 1;
                    }
                    idx += 1;
                });
            }

            let record = LossRecord {
                iteration: it,
                stage,
                d_loss,
                g_adv,
                rec,
            };
            obs.on_iteration(&record);
            history.push(record);
        }
        info!(
            "stage {stage} done: d_loss {:.4}, g_adv {:.4}, rec {:.5}",
            history.last().map_or(0.0, |r| r.d_loss),
            history.last().map_or(0.0, |r| r.g_adv),
            history.last().map_or(0.0, |r| r.rec)
        );

        let ckpt = Checkpoint {
            config: cfg.clone(),
            norm_mean: spec.norm_mean,
            norm_std: spec.norm_std,
            sample_rate: spec.sample_rate,
            layer_names: spec.layer_names.clone(),
            shapes: pyr.shapes.clone(),
            noise_amps: amps.clone(),
            generator: gen.clone(),
            d1: d1.net.clone(),
            d2: d2.as_ref().map(|d| d.net.clone()),
            rec_noise: rec0.clone(),
            history: history.clone(),
        };
        obs.on_stage_complete(&ckpt)?;
        last = Some(ckpt);
    }
    Ok(last.expect("at least two stages"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;

    fn tiny_layers(len: usize) -> AudioLayerSet {
        let a: Vec<f32> = (0..len)
            .map(|i| {
                let t = i as f32 / 8000.0;
                (-t * 20.0).exp() * (2.0 * std::f32::consts::PI * 440.0 * t).sin()
            })
            .collect();
        let b: Vec<f32> = (0..len)
            .map(|i| {
                let t = i as f32 / 8000.0;
                (-t * 8.0).exp() * (2.0 * std::f32::consts::PI * 1250.0 * t).sin()
            })
            .collect();
        AudioLayerSet::from_samples(vec![a, b], vec!["a".into(), "b".into()], 8000, 0.0).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            num_stages: 4,
            iters_per_stage: 2,
            filters: 4,
            min_size: 8,
            d_steps: 1,
            g_steps: 1,
            stft: StftParams {
                fft_size: 32,
                hop: 8,
                log_epsilon: 1e-4,
            },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn analytic_loss_cases() {
        let maps = Tensor::new(vec![1, 1, 2, 2], vec![0.3, -1.0, 2.0, 0.1]);
        let ones = Tensor::full(vec![4], 1.0);
        let (d, g) = wgan_gp_losses(&maps, &maps, &ones, 10.0).unwrap();
        assert!(d.abs() < 1e-6);
        assert!((g + maps.mean()).abs() < 1e-6);
        let zeros = Tensor::zeros(vec![4]);
        let (d, _) = wgan_gp_losses(&maps, &maps, &zeros, 10.0).unwrap();
        assert!((d - 10.0).abs() < 1e-6);
        let bad = Tensor::full(vec![1], f32::NAN);
        assert!(wgan_gp_losses(&maps, &maps, &bad, 10.0).is_err());
    }

    #[test]
    fn reconstruction_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(vec![2, 5, 7], 1.0, &mut rng);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 2.0);
        assert!((reconstruction_loss(&a, &b).unwrap() - 4.0).abs() < 1e-6);
        let c = Tensor::randn(vec![2, 5, 7], 1.0, &mut rng);
        let mut brute = 0.0f64;
        for i in 0..a.numel() {
            let d = a.data()[i] as f64 - c.data()[i] as f64;
            brute += d * d;
        }
        assert!((reconstruction_loss(&a, &c).unwrap() - brute / 70.0).abs() < 1e-12);
        assert!(reconstruction_loss(&a, &Tensor::zeros(vec![70])).is_err());
    }

    #[test]
    fn linear_critic_gradient_norm_is_weight_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(vec![1, 3, 1, 1], 1.0, &mut rng);
        let wnorm = w.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        for _ in 0..5 {
            let x = Tensor::randn(vec![2, 3, 6, 5], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.param(x);
            let wv = g.constant(w.clone());
            let n = critic_grad_norms(&mut g, xv, |g, x| Ok(g.conv2d(x, wv, 1))).unwrap();
            for &v in g.value(n).data() {
                assert!((v - wnorm).abs() < 1e-5, "{v} vs {wnorm}");
            }
        }
    }

    #[test]
    fn linear_3x3_critic_interior_norm() {
        // interior pixels see every tap once: gradient per channel = sum of that channel's taps
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(vec![1, 2, 3, 3], 1.0, &mut rng);
        let sums: Vec<f32> = (0..2)
            .map(|c| w.data()[c * 9..(c + 1) * 9].iter().sum())
            .collect();
        let expect = (sums[0] * sums[0] + sums[1] * sums[1]).sqrt();
        let mut g = Graph::new();
        let xv = g.param(Tensor::randn(vec![1, 2, 7, 7], 1.0, &mut rng));
        let wv = g.constant(w);
        let n = critic_grad_norms(&mut g, xv, |g, x| Ok(g.conv2d(x, wv, 1))).unwrap();
        let vals = g.value(n).data();
        for i in 1..6 {
            for j in 1..6 {
                assert!((vals[i * 7 + j] - expect).abs() < 1e-5);
            }
        }
        // sanity: the eager conv agrees the critic is linear
        let x1 = Tensor::randn(vec![1, 2, 7, 7], 1.0, &mut rng);
        let w1 = Tensor::randn(vec![1, 2, 3, 3], 1.0, &mut rng);
        let y2 = conv2d(&x1.map(|v| 2.0 * v), &w1, 1);
        let y1 = conv2d(&x1, &w1, 1);
        assert!(y1
            .data()
            .iter()
            .zip(y2.data())
            .all(|(a, b)| (2.0 * a - b).abs() < 1e-4));
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = DiscriminatorSpec {
            filters: 3,
            kernel: 3,
            dilation: 2,
            body_layers: 1,
            leaky_alpha: 0.05,
        };
        let mut d = Discriminator::new(spec, 2, &mut rng).unwrap();
        // larger weights than the training init so the penalty term is far from its floor
        d.visit_params_mut(&mut |_, t| {
            let noise = Tensor::randn(t.shape().to_vec(), 0.4, &mut rng);
            *t = t.zip_map(&noise, |a, n| a + n);
        });
        let real = Tensor::randn(vec![1, 2, 6, 7], 1.0, &mut rng);
        let fake = Tensor::randn(vec![1, 2, 6, 7], 1.0, &mut rng);
        let loss_of = |d: &Discriminator| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let vars = d.bind(&mut g, true);
            let loss = critic_loss(&mut g, d, &vars, &real, &fake, 0.3, 10.0).unwrap();
            let grads = g.grad(loss, &vars.flat);
            let grads = grads.into_iter().map(|v| g.value(v.unwrap()).clone()).collect();
            (g.scalar(loss) as f64, grads)
        };
        let (_, analytic) = loss_of(&d);
        let mut params = Vec::new();
        d.visit_params(&mut |_, t| params.push(t.clone()));
        let eval = |slot: usize, i: usize, delta: f32| {
            let mut dd = d.clone();
            let mut k = 0;
            dd.visit_params_mut(&mut |_, t| {
                if k == slot {
                    t.data_mut()[i] += delta;
                }
                k += 1;
            });
            loss_of(&dd).0
        };
        let central =
            |slot: usize, i: usize, eps: f32| (eval(slot, i, eps) - eval(slot, i, -eps)) / (2.0 * eps as f64);
        // The penalty jumps where an activation crosses the LeakyReLU kink; a step
        // straddling one is detected by disagreement between two step sizes and skipped.
        let (mut checked, mut skipped) = (0usize, 0usize);
        for (slot, (p, a)) in params.iter().zip(&analytic).enumerate() {
            for i in 0..p.numel() {
                let coarse = central(slot, i, 4e-3);
                let fine = central(slot, i, 1e-3);
                let tol = 2e-3 * (1.0 + fine.abs());
                if (coarse - fine).abs() > 10.0 * tol {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                let an = a.data()[i] as f64;
                assert!(
                    (fine - an).abs() <= 5.0 * tol,
                    "param {slot}[{i}]: numeric {fine} analytic {an}"
                );
            }
        }
        assert!(
            skipped * 10 <= checked,
            "{skipped} kink crossings out of {}",
            checked + skipped
        );
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.generator_lr(ParamGroup::Stage(5), 5), Some(5e-4));
        assert_eq!(cfg.generator_lr(ParamGroup::Stage(4), 5), Some(5e-4 * 0.1));
        assert_eq!(cfg.generator_lr(ParamGroup::Stage(3), 5), Some(5e-4 * 0.1));
        assert_eq!(cfg.generator_lr(ParamGroup::Stage(2), 5), None);
        assert_eq!(cfg.generator_lr(ParamGroup::Head, 2), Some(5e-4 * 0.1));
        assert_eq!(cfg.generator_lr(ParamGroup::Head, 3), None);
        assert_eq!(cfg.generator_lr(ParamGroup::Tail, 9), Some(5e-4));
        for n in 0..10 {
            let trainable = (0..=n)
                .filter(|&s| cfg.generator_lr(ParamGroup::Stage(s), n).is_some())
                .count();
            assert_eq!(trainable, (n + 1).min(3));
        }
    }

    #[test]
    fn second_critic_joins_halfway() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.d2_start(), 5);
        let counts: Vec<usize> = (0..10).map(|s| cfg.critics_at(s)).collect();
        assert_eq!(counts, [1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                concurrent_stages: 11,
                ..Default::default()
            },
            TrainConfig {
                num_stages: 1,
                ..Default::default()
            },
            TrainConfig {
                d2_start_stage: Some(10),
                ..Default::default()
            },
            TrainConfig {
                kernel: 4,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(cfg.validate(), Err(Error::InvalidConfig { .. })),
                "{cfg:?}"
            );
        }
    }

    struct Snapshots(Vec<Generator>);

    impl TrainObserver for Snapshots {
        fn on_stage_complete(&mut self, ckpt: &Checkpoint) -> Result<()> {
            self.0.push(ckpt.generator.clone());
            Ok(())
        }
    }

    #[test]
    fn frozen_stages_are_untouched_and_history_is_complete() {
        let cfg = tiny_config();
        let layers = tiny_layers(400);
        let mut snaps = Snapshots(Vec::new());
        let ckpt = train_with(&layers, &cfg, &mut snaps).unwrap();
        assert_eq!(ckpt.history.len(), cfg.num_stages * cfg.iters_per_stage);
        assert_eq!(snaps.0.len(), 4);
        // stage 0 and the head are frozen during stage 3
        assert_eq!(snaps.0[2].stages[0], snaps.0[3].stages[0]);
        assert_eq!(snaps.0[2].head, snaps.0[3].head);
        assert_ne!(snaps.0[2].stages[1], snaps.0[3].stages[1]);
        assert_ne!(snaps.0[2].tail, snaps.0[3].tail);
        assert!(ckpt.d2.is_some());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let layers = tiny_layers(300);
        let a = train(&layers, &cfg).unwrap();
        let b = train(&layers, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.d1, b.d1);
        let c = train(&layers, &TrainConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            lr: 1e30,
            ..tiny_config()
        };
        let err = train(&tiny_layers(300), &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }
}
