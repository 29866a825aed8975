//! Multi-channel log-magnitude spectrograms and Griffin-Lim inversion.
//!
//! The STFT uses no centering: frame `t` covers samples `t*hop .. t*hop + fft_size`, so a
//! signal of `L` samples has `1 + (L - fft_size) / hop` frames and `T` frames invert to
//! `fft_size + (T - 1) * hop` samples.

use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioLayerSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftParams {
    pub fft_size: usize,
    pub hop: usize,
    /// Magnitude floor added before the logarithm.
    pub log_epsilon: f64,
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams {
            fft_size: 512,
            hop: 128,
            log_epsilon: 1e-4,
        }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 4 || !self.fft_size.is_power_of_two() {
            return Err(Error::config("fft_size", "must be a power of two >= 4"));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::config("hop", "must be in 1..=fft_size"));
        }
        if !(self.log_epsilon > 0.0 && self.log_epsilon.is_finite()) {
            return Err(Error::config("log_epsilon", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames fully inside a signal of `len` samples.
    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.fft_size {
            return Err(Error::TooShort {
                len,
                fft_size: self.fft_size,
            });
        }
        Ok(1 + (len - self.fft_size) / self.hop)
    }

    /// Signal length produced by overlap-adding `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        self.fft_size + frames.saturating_sub(1) * self.hop
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable forward/inverse transforms for one parameter set.
pub struct Stft {
    params: StftParams,
    window: Vec<f64>,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl Stft {
    pub fn new(params: StftParams) -> Result<Self> {
        params.validate()?;
        let mut planner = RealFftPlanner::<f64>::new();
        Ok(Stft {
            params,
            window: hann(params.fft_size),
            forward: planner.plan_fft_forward(params.fft_size),
            inverse: planner.plan_fft_inverse(params.fft_size),
        })
    }

    pub fn params(&self) -> &StftParams {
        &self.params
    }

    /// Complex frames, `frames[t][f]`.
    pub fn analyze(&self, signal: &[f64]) -> Result<Vec<Vec<Complex64>>> {
        let n = self.params.fft_size;
        let frames = self.params.frames(signal.len())?;
        let mut buf = self.forward.make_input_vec();
        let mut scratch = self.forward.make_scratch_vec();
        (0..frames)
            .map(|t| {
                let start = t * self.params.hop;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = signal[start + i] * self.window[i];
                }
                let mut spec = self.forward.make_output_vec();
                self.forward
                    .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                    .expect("fft buffer sizes are fixed by the plan");
                debug_assert_eq!(spec.len(), n / 2 + 1);
                Ok(spec)
            })
            .collect()
    }

    /// Magnitudes in `[F, T]` row-major layout.
    pub fn magnitude(&self, signal: &[f64]) -> Result<Vec<f64>> {
        let frames = self.analyze(signal)?;
        Ok(frames_to_ft(&frames, |c| c.norm()))
    }

    /// Least-squares overlap-add inverse of `frames[t][f]`.
    pub fn synthesize(&self, frames: &[Vec<Complex64>]) -> Vec<f64> {
        let n = self.params.fft_size;
        let hop = self.params.hop;
        let len = self.params.signal_len(frames.len());
        let mut out = vec![0.0f64; len];
        let mut norm = vec![0.0f64; len];
        let mut spec = self.inverse.make_input_vec();
        let mut buf = self.inverse.make_output_vec();
        let mut scratch = self.inverse.make_scratch_vec();
        for (t, frame) in frames.iter().enumerate() {
            spec.copy_from_slice(frame);
            spec[0].im = 0.0;
            spec[n / 2].im = 0.0;
            self.inverse
                .process_with_scratch(&mut spec, &mut buf, &mut scratch)
                .expect("fft buffer sizes are fixed by the plan");
            let start = t * hop;
            for i in 0..n {
                let w = self.window[i];
                out[start + i] += w * buf[i] / n as f64;
                norm[start + i] += w * w;
            }
        }
        for (o, &w2) in out.iter_mut().zip(&norm) {
            *o = if w2 > 1e-10 { *o / w2 } else { 0.0 };
        }
        out
    }

    /// Classic Griffin-Lim from a `[F, T]` magnitude with zero initial phase.
    ///
    /// Phase is referenced to the window center: bin `f` starts at `(-1)^f`, so every
    /// initial frame is symmetric about its center, where the window is largest. With
    /// phase referenced to the buffer origin, each frame's energy would sit where the
    /// window vanishes and the edge frames, covered by one window only, would blow up.
    ///
    /// `observer` receives `(iteration, signal)` for iterations `0..=iters`, where the
    /// iteration-0 signal is the zero-phase reconstruction.
    pub fn griffin_lim_observed(
        &self,
        magnitude: &[f64],
        frames: usize,
        iters: usize,
        mut observer: impl FnMut(usize, &[f64]),
    ) -> Vec<f64> {
        let bins = self.params.bins();
        assert_eq!(magnitude.len(), bins * frames);
        let mag_at = |f: usize, t: usize| magnitude[f * frames + t];
        let initial: Vec<Vec<Complex64>> = (0..frames)
            .map(|t| {
                (0..bins)
                    .map(|f| {
                        let sign = if f % 2 == 0 { 1.0 } else { -1.0 };
                        Complex64::new(sign * mag_at(f, t), 0.0)
                    })
                    .collect()
            })
            .collect();
        let mut signal = self.synthesize(&initial);
        observer(0, &signal);
        for it in 1..=iters {
            let mut spec = self
                .analyze(&signal)
                .expect("reconstruction length always holds `frames` frames");
            for (t, frame) in spec.iter_mut().enumerate() {
                for (f, c) in frame.iter_mut().enumerate() {
                    let norm = c.norm();
                    let phase = if norm > 0.0 {
                        *c / norm
                    } else {
                        Complex64::new(1.0, 0.0)
                    };
                    *c = phase * mag_at(f, t);
                }
            }
            signal = self.synthesize(&spec);
            observer(it, &signal);
        }
        signal
    }

    pub fn griffin_lim(&self, magnitude: &[f64], frames: usize, iters: usize) -> Vec<f64> {
        self.griffin_lim_observed(magnitude, frames, iters, |_, _| {})
    }

    /// `‖ |STFT(audio)| − magnitude ‖_F / ‖magnitude‖_F` for a `[F, T]` magnitude.
    pub fn consistency(&self, magnitude: &[f64], frames: usize, audio: &[f64]) -> Result<f64> {
        let bins = self.params.bins();
        if magnitude.len() != bins * frames {
            return Err(Error::ShapeMismatch(format!(
                "magnitude has {} values, expected {bins}x{frames}",
                magnitude.len()
            )));
        }
        let got_frames = self.params.frames(audio.len())?;
        if got_frames != frames {
            return Err(Error::ShapeMismatch(format!(
                "audio spans {got_frames} frames, magnitude has {frames}"
            )));
        }
        let denom = magnitude.iter().map(|m| m * m).sum::<f64>().sqrt();
        if denom == 0.0 {
            return Err(Error::ZeroReference);
        }
        let actual = self.magnitude(audio)?;
        let num = actual
            .iter()
            .zip(magnitude)
            .map(|(a, m)| (a - m) * (a - m))
            .sum::<f64>()
            .sqrt();
        Ok(num / denom)
    }
}

fn frames_to_ft(frames: &[Vec<Complex64>], f: impl Fn(&Complex64) -> f64) -> Vec<f64> {
    let t_len = frames.len();
    let bins = frames.first().map_or(0, Vec::len);
    let mut out = vec![0.0; bins * t_len];
    for (t, frame) in frames.iter().enumerate() {
        for (b, c) in frame.iter().enumerate() {
            out[b * t_len + t] = f(c);
        }
    }
    out
}

/// Normalized `C x F x T` log-magnitude spectrogram plus the statistics to invert it.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelSpectrogram {
    /// Shape `[C, F, T]`.
    pub data: Tensor,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub stft: StftParams,
    pub layer_names: Vec<String>,
    pub sample_rate: u32,
}

impl MultiChannelSpectrogram {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[2]
    }

    /// Undo the global normalization, giving natural-log magnitudes.
    pub fn log_magnitude(&self) -> Tensor {
        let (m, s) = (self.norm_mean, self.norm_std);
        self.data.map(|v| (v as f64 * s + m) as f32)
    }

    /// Linear magnitudes of channel `c` in `[F, T]` layout.
    pub fn channel_magnitude(&self, c: usize) -> Vec<f64> {
        let (f, t) = (self.bins(), self.frames());
        let plane = &self.data.data()[c * f * t..(c + 1) * f * t];
        plane
            .iter()
            .map(|&v| ((v as f64 * self.norm_std + self.norm_mean).exp() - self.stft.log_epsilon).max(0.0))
            .collect()
    }
}

/// Mean and population standard deviation over all entries.
pub fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// STFT every layer, take `ln(|X| + eps)`, stack layers as channels and normalize the
/// whole tensor to zero mean and unit standard deviation.
pub fn stft_log_magnitude(layers: &AudioLayerSet, params: StftParams) -> Result<MultiChannelSpectrogram> {
    let stft = Stft::new(params)?;
    let len = layers.len();
    let frames = params.frames(len)?;
    let bins = params.bins();
    let mut raw = Vec::with_capacity(layers.num_layers() * bins * frames);
    for layer in &layers.layers {
        let signal: Vec<f64> = layer.iter().map(|&v| v as f64).collect();
        let mag = stft.magnitude(&signal)?;
        raw.extend(mag.iter().map(|m| (m + params.log_epsilon).ln()));
    }
    let (mean, std) = moments(&raw);
    if std.is_nan() || std <= 0.0 {
        return Err(Error::config("layers", "spectrogram has zero variance"));
    }
    let data = raw.iter().map(|v| ((v - mean) / std) as f32).collect();
    Ok(MultiChannelSpectrogram {
        data: Tensor::new(vec![layers.num_layers(), bins, frames], data),
        norm_mean: mean,
        norm_std: std,
        stft: params,
        layer_names: layers.names.clone(),
        sample_rate: layers.sample_rate,
    })
}

/// Revert normalization and the logarithm, then recover audio per channel with
/// `gl_iters` Griffin-Lim iterations.
pub fn denormalize_and_invert(spec: &MultiChannelSpectrogram, gl_iters: usize) -> Result<AudioLayerSet> {
    if !spec.data.is_finite() {
        return Err(Error::NonFinite("spectrogram".into()));
    }
    if !(spec.norm_std > 0.0 && spec.norm_std.is_finite() && spec.norm_mean.is_finite()) {
        return Err(Error::config("norm_std", "normalization statistics are invalid"));
    }
    let stft = Stft::new(spec.stft)?;
    let frames = spec.frames();
    let layers = (0..spec.channels())
        .map(|c| {
            let mag = spec.channel_magnitude(c);
            stft.griffin_lim(&mag, frames, gl_iters)
                .into_iter()
                .map(|v| v as f32)
                .collect()
        })
        .collect();
    let names = if spec.layer_names.len() == spec.channels() {
        spec.layer_names.clone()
    } else {
        (0..spec.channels()).map(|c| format!("layer{c}")).collect()
    };
    Ok(AudioLayerSet {
        layers,
        names,
        sample_rate: spec.sample_rate,
        pre_pad: 0,
    })
}

/// Relative Frobenius distance between the STFT magnitude of `audio` and `magnitude`
/// (`[F, T]` tensor or flat `F*T` data with `T` inferred from the audio length).
pub fn spectral_consistency(magnitude: &Tensor, audio: &[f32], params: StftParams) -> Result<f64> {
    let stft = Stft::new(params)?;
    let shape = magnitude.shape();
    if shape.len() != 2 || shape[0] != params.bins() {
        return Err(Error::ShapeMismatch(format!(
            "magnitude shape {shape:?}, expected [{}, T]",
            params.bins()
        )));
    }
    let mag: Vec<f64> = magnitude.data().iter().map(|&v| v as f64).collect();
    let audio: Vec<f64> = audio.iter().map(|&v| v as f64).collect();
    stft.consistency(&mag, shape[1], &audio)
}
