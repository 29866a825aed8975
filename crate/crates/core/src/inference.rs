//! Variation synthesis from a trained checkpoint.
//!
//! Each variation draws a time-axis multiplier from `[1 - r, 1 + r]`, generates noise maps
//! at the retargeted widths, runs the generator at its final stage and inverts every
//! channel with Griffin-Lim. A sequential post-pass then optionally shuffles layers across
//! the batch (one permutation per channel), applies a random delay and gain per layer and
//! sums the layers into a hard-clipped mix.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::spectral::{denormalize_and_invert, Stft, StftParams};
use crate::tensor::Tensor;
use crate::training::{generate, reconstruction_noise};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisParams {
    pub num_variations: usize,
    pub retarget_fraction: f64,
    /// Largest accepted `retarget_fraction`.
    pub retarget_bound: f64,
    pub shuffle_layers: bool,
    pub delay_range_ms: (f64, f64),
    pub gain_range_db: (f64, f64),
    pub gl_iters: usize,
    pub seed: u64,
    /// Generate from the fixed reconstruction noise instead of fresh noise. Requires
    /// `retarget_fraction = 0`.
    pub use_reconstruction_noise: bool,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        SynthesisParams {
            num_variations: 10,
            retarget_fraction: 0.15,
            retarget_bound: 0.15,
            shuffle_layers: true,
            delay_range_ms: (0.0, 30.0),
            gain_range_db: (-3.0, 0.0),
            gl_iters: 60,
            seed: 0,
            use_reconstruction_noise: false,
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_variations == 0 {
            return Err(Error::config("num_variations", "must be >= 1"));
        }
        let r = self.retarget_fraction;
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::config("retarget_fraction", "must be finite and >= 0"));
        }
        if !(self.retarget_bound.is_finite() && (0.0..1.0).contains(&self.retarget_bound)) {
            return Err(Error::config("retarget_bound", "must be in [0, 1)"));
        }
        if r > self.retarget_bound {
            return Err(Error::config(
                "retarget_fraction",
                format!("{r} exceeds the bound {}", self.retarget_bound),
            ));
        }
        let (lo, hi) = self.delay_range_ms;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return Err(Error::config("delay_range_ms", "need 0 <= lo <= hi"));
        }
        let (lo, hi) = self.gain_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config("gain_range_db", "need lo <= hi"));
        }
        if self.use_reconstruction_noise && r != 0.0 {
            return Err(Error::config(
                "use_reconstruction_noise",
                "the reconstruction noise has a fixed width; set retarget_fraction = 0",
            ));
        }
        Ok(())
    }
}

/// Metadata of one mix, as written to the synthesis manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationInfo {
    pub index: usize,
    /// Seed of the noise maps of generation `index`.
    pub seed: u64,
    pub multiplier: f64,
    /// Retargeted frame count of generation `index`.
    pub frames: usize,
    /// `sources[c]`: generation whose layer `c` this mix uses.
    pub sources: Vec<usize>,
    pub delays_ms: Vec<f64>,
    pub gains_db: Vec<f64>,
    pub clipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variation {
    pub info: VariationInfo,
    /// Generated normalized spectrogram `[C, F, T]` of generation `index`.
    pub spectrogram: Tensor,
    /// Per-layer contributions after delay and gain, each as long as the mix.
    pub stems: Vec<Vec<f32>>,
    /// Sum of the stems, clipped to `[-1, 1]`.
    pub mix: Vec<f32>,
}

/// Time-axis width of a stage with `frames` frames under `multiplier`, kept inside
/// `[ceil((1 - r) frames), floor((1 + r) frames)]`.
pub fn retarget_width(frames: usize, multiplier: f64, r: f64) -> usize {
    let lo = ((1.0 - r) * frames as f64).ceil().max(1.0);
    let hi = ((1.0 + r) * frames as f64).floor().max(lo);
    (frames as f64 * multiplier).round().clamp(lo, hi) as usize
}

pub fn db_to_gain(db: f64) -> f32 {
    10f64.powf(db / 20.0) as f32
}

/// Delay and scale each layer, returning the stems and their unclipped sum.
pub fn mixdown(layers: &[&[f32]], delays: &[usize], gains: &[f32]) -> (Vec<Vec<f32>>, Vec<f32>) {
    let len = layers
        .iter()
        .zip(delays)
        .map(|(l, &d)| l.len() + d)
        .max()
        .unwrap_or(0);
    let mut mix = vec![0.0f32; len];
    let stems = layers
        .iter()
        .zip(delays)
        .zip(gains)
        .map(|((layer, &d), &g)| {
            let mut stem = vec![0.0f32; len];
            for (s, &v) in stem[d..].iter_mut().zip(layer.iter()) {
                *s = g * v;
            }
            for (m, &s) in mix.iter_mut().zip(&stem) {
                *m += s;
            }
            stem
        })
        .collect();
    (stems, mix)
}

/// Clip to `[-1, 1]` in place; returns the number of clipped samples.
pub fn hard_clip(samples: &mut [f32]) -> usize {
    let mut n = 0;
    for s in samples {
        if s.abs() > 1.0 {
            *s = s.clamp(-1.0, 1.0);
            n += 1;
        }
    }
    n
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

struct Generated {
    seed: u64,
    multiplier: f64,
    spectrogram: Tensor,
    layers: Vec<Vec<f32>>,
}

pub fn synthesize_batch(ckpt: &Checkpoint, p: &SynthesisParams) -> Result<Vec<Variation>> {
    p.validate()?;
    let gen = &ckpt.generator;
    let stage = ckpt.final_stage();
    let r = p.retarget_fraction;
    let mut master = ChaCha8Rng::seed_from_u64(p.seed);

    let mut generated = Vec::with_capacity(p.num_variations);
    for _ in 0..p.num_variations {
        let seed: u64 = master.random();
        let multiplier = if r > 0.0 {
            master.random_range(1.0 - r..=1.0 + r)
        } else {
            1.0
        };
        let noise = if p.use_reconstruction_noise {
            reconstruction_noise(gen, &ckpt.rec_noise, &ckpt.shapes, stage)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..=stage)
                .map(|s| {
                    let (h, w) = ckpt.shapes[s];
                    let w = retarget_width(w, multiplier, r);
                    Tensor::randn(gen.noise_shape(s, h, w).to_vec(), 1.0, &mut rng)
                })
                .collect()
        };
        let out = generate(gen, &noise, &ckpt.noise_amps, stage)?;
        let spec = ckpt.spectrogram(out);
        let audio = denormalize_and_invert(&spec, p.gl_iters)?;
        generated.push(Generated {
            seed,
            multiplier,
            spectrogram: spec.data,
            layers: audio.layers,
        });
    }

    let n = generated.len();
    let channels = ckpt.channels();
    let mut perms: Vec<Vec<usize>> = vec![(0..n).collect(); channels];
    if p.shuffle_layers {
        for perm in &mut perms {
            perm.shuffle(&mut master);
        }
    }

    let sr = ckpt.sample_rate as f64;
    let mut out = Vec::with_capacity(n);
    for (i, g) in generated.iter().enumerate() {
        let sources: Vec<usize> = perms.iter().map(|perm| perm[i]).collect();
        let delays_ms: Vec<f64> = (0..channels)
            .map(|_| uniform(&mut master, p.delay_range_ms))
            .collect();
        let gains_db: Vec<f64> = (0..channels)
            .map(|_| uniform(&mut master, p.gain_range_db))
            .collect();
        let layers: Vec<&[f32]> = sources
            .iter()
            .enumerate()
            .map(|(c, &src)| generated[src].layers[c].as_slice())
            .collect();
        let delays: Vec<usize> = delays_ms
            .iter()
            .map(|ms| (ms * sr / 1000.0).round() as usize)
            .collect();
        let gains: Vec<f32> = gains_db.iter().map(|&db| db_to_gain(db)).collect();
        let (stems, mut mix) = mixdown(&layers, &delays, &gains);
        let clipped = hard_clip(&mut mix);
        if clipped > 0 {
            log::warn!("mix {i}: {clipped} samples clipped");
        }
        out.push(Variation {
            info: VariationInfo {
                index: i,
                seed: g.seed,
                multiplier: g.multiplier,
                frames: g.spectrogram.shape()[2],
                sources,
                delays_ms,
                gains_db,
                clipped,
            },
            spectrogram: g.spectrogram.clone(),
            stems,
            mix,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Pairwise distances in `(i, j)` order with `i < j`.
    pub pairwise: Vec<f64>,
    /// Zero when fewer than two clips are given.
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub durations_secs: Vec<f64>,
    pub distinct_durations: usize,
}

/// Pairwise Frobenius distances between log-magnitude spectrograms of the clips, each
/// zero-padded at the end to the longest clip.
pub fn diversity_report(clips: &[Vec<f32>], sample_rate: u32, params: StftParams) -> Result<DiversityReport> {
    let stft = Stft::new(params)?;
    let len = clips.iter().map(Vec::len).max().unwrap_or(0).max(params.fft_size);
    let logs = clips
        .iter()
        .map(|c| {
            let mut x: Vec<f64> = c.iter().map(|&v| v as f64).collect();
            x.resize(len, 0.0);
            Ok(stft
                .magnitude(&x)?
                .into_iter()
                .map(|m| (m + params.log_epsilon).ln())
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pairwise = Vec::new();
    for i in 0..logs.len() {
        for j in i + 1..logs.len() {
            let d: f64 = logs[i].iter().zip(&logs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            pairwise.push(d.sqrt());
        }
    }
    let (mean, min, max) = if pairwise.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (
            pairwise.iter().sum::<f64>() / pairwise.len() as f64,
            pairwise.iter().copied().fold(f64::INFINITY, f64::min),
            pairwise.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let mut lens: Vec<usize> = clips.iter().map(Vec::len).collect();
    let durations_secs = lens.iter().map(|&n| n as f64 / sample_rate as f64).collect();
    lens.sort_unstable();
    lens.dedup();
    Ok(DiversityReport {
        pairwise,
        mean,
        min,
        max,
        durations_secs,
        distinct_durations: lens.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn retarget_widths_stay_in_bounds() {
        for m in [0.85, 0.8534, 0.9, 1.0, 1.1, 1.149, 1.15] {
            let w = retarget_width(100, m, 0.15);
            assert!((85..=115).contains(&w), "{m} -> {w}");
        }
        assert_eq!(retarget_width(65, 1.0, 0.0), 65);
        // 0.85 * 65 = 55.25 rounds to 55, but the bound is ceil(55.25) = 56
        assert_eq!(retarget_width(65, 0.85, 0.15), 56);
    }

    #[test]
    fn impulse_mix_example() {
        let a = [1.0f32, 0.0, 0.0];
        let b = [1.0f32, 0.0, 0.0];
        let gains = [db_to_gain(0.0), db_to_gain(-6.02)];
        let (_, mut mix) = mixdown(&[&a, &b], &[0, 0], &gains);
        assert!((mix[0] - 1.5).abs() < 2e-3, "{}", mix[0]);
        assert_eq!(hard_clip(&mut mix), 1);
        assert_eq!(mix[0], 1.0);
    }

    #[test]
    fn delays_extend_the_mix() {
        let a = [0.5f32; 4];
        let b = [0.25f32; 2];
        let (stems, mix) = mixdown(&[&a, &b], &[1, 5], &[1.0, 1.0]);
        assert_eq!(mix.len(), 7);
        assert_eq!(stems[1], vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.25, 0.25]);
        assert_eq!(mix, vec![0.0, 0.5, 0.5, 0.5, 0.5, 0.25, 0.25]);
    }

    proptest! {
        #[test]
        fn gain_scales_the_stem_exactly(
            layer in proptest::collection::vec(-1.0f32..1.0, 1..64),
            other in proptest::collection::vec(-1.0f32..1.0, 1..64),
            delay in 0usize..10,
            g in 0.01f32..4.0,
        ) {
            let (s1, _) = mixdown(&[&layer, &other], &[delay, 0], &[1.0, 0.7]);
            let (s2, _) = mixdown(&[&layer, &other], &[delay, 0], &[g, 0.7]);
            for (a, b) in s1[0].iter().zip(&s2[0]) {
                prop_assert_eq!(a * g, *b);
            }
            prop_assert_eq!(&s1[1], &s2[1]);
        }
    }

    #[test]
    fn params_validation() {
        assert!(SynthesisParams::default().validate().is_ok());
        let bad = [
            SynthesisParams {
                retarget_fraction: -0.1,
                ..Default::default()
            },
            SynthesisParams {
                retarget_fraction: 0.2,
                ..Default::default()
            },
            SynthesisParams {
                num_variations: 0,
                ..Default::default()
            },
            SynthesisParams {
                delay_range_ms: (-1.0, 3.0),
                ..Default::default()
            },
            SynthesisParams {
                gain_range_db: (0.0, -3.0),
                ..Default::default()
            },
            SynthesisParams {
                use_reconstruction_noise: true,
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
        let wide = SynthesisParams {
            retarget_fraction: 0.3,
            retarget_bound: 0.5,
            ..Default::default()
        };
        assert!(wide.validate().is_ok());
    }

    /// Naive-DFT log spectrogram, `[T][F]`.
    fn naive_log_spec(x: &[f64], p: StftParams) -> Vec<Vec<f64>> {
        let n = p.fft_size;
        let win: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let frames = 1 + (x.len() - n) / p.hop;
        (0..frames)
            .map(|t| {
                (0..=n / 2)
                    .map(|k| {
                        let (mut re, mut im) = (0.0, 0.0);
                        for i in 0..n {
                            let v = x[t * p.hop + i] * win[i];
                            let ph = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                            re += v * ph.cos();
                            im += v * ph.sin();
                        }
                        ((re * re + im * im).sqrt() + p.log_epsilon).ln()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn identical_clips_have_zero_distance() {
        let clip: Vec<f32> = (0..200).map(|i| (i as f32 * 0.3).sin()).collect();
        let p = StftParams {
            fft_size: 32,
            hop: 8,
            log_epsilon: 1e-4,
        };
        let r = diversity_report(&[clip.clone(), clip.clone(), clip], 8000, p).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.pairwise.len(), 3);
        assert_eq!(r.distinct_durations, 1);
    }

    #[test]
    fn distance_matches_naive_oracle() {
        let p = StftParams {
            fft_size: 32,
            hop: 8,
            log_epsilon: 1e-4,
        };
        let a: Vec<f32> = (0..160).map(|i| (i as f32 * 0.17).sin() * 0.5).collect();
        // change confined to the last hop: only the final frame sees it
        let mut b = a.clone();
        for v in &mut b[152..160] {
            *v += 0.3;
        }
        let r = diversity_report(&[a.clone(), b.clone()], 8000, p).unwrap();
        let la = naive_log_spec(&a.iter().map(|&v| v as f64).collect::<Vec<_>>(), p);
        let lb = naive_log_spec(&b.iter().map(|&v| v as f64).collect::<Vec<_>>(), p);
        let last = la.len() - 1;
        for t in 0..last {
            assert_eq!(la[t], lb[t]);
        }
        let frame_norm: f64 = la[last]
            .iter()
            .zip(&lb[last])
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(
            (r.pairwise[0] - frame_norm).abs() < 1e-6 * frame_norm.max(1.0),
            "{} vs {frame_norm}",
            r.pairwise[0]
        );
    }

    #[test]
    fn shorter_clips_are_zero_padded() {
        let p = StftParams {
            fft_size: 32,
            hop: 8,
            log_epsilon: 1e-4,
        };
        let a: Vec<f32> = (0..120).map(|i| (i as f32 * 0.4).cos()).collect();
        let mut b = a.clone();
        b.resize(160, 0.0);
        let r = diversity_report(&[a, b.clone(), b], 8000, p).unwrap();
        assert!(r.max < 1e-9);
        assert_eq!(r.distinct_durations, 2);
        assert_eq!(r.durations_secs[0], 0.015);
    }
}
