//! Loading, normalizing and aligning training layers; writing synthesized audio.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// The mono layers of one training sound, peak-normalized and length-aligned.
///
/// Sets produced by [`load_layers`] / [`AudioLayerSet::from_samples`] keep every sample in
/// `[-1, 1]`. Sets produced by spectrogram inversion share the equal-length invariant but
/// carry whatever level the reconstruction produced.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioLayerSet {
    pub layers: Vec<Vec<f32>>,
    pub names: Vec<String>,
    pub sample_rate: u32,
    /// Leading zeros prepended to every layer.
    pub pre_pad: usize,
}

impl AudioLayerSet {
    /// Normalize each layer to unit peak, prepend `pre_pad_ms` of silence and zero-pad
    /// every layer at the end to the longest one.
    pub fn from_samples(
        layers: Vec<Vec<f32>>,
        names: Vec<String>,
        sample_rate: u32,
        pre_pad_ms: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("layers", "at least one layer is required"));
        }
        if names.len() != layers.len() {
            return Err(Error::config("names", "one name per layer is required"));
        }
        if sample_rate == 0 {
            return Err(Error::config("sample_rate", "must be positive"));
        }
        if !(pre_pad_ms >= 0.0 && pre_pad_ms.is_finite()) {
            return Err(Error::config("pre_pad_ms", "must be a finite value >= 0"));
        }
        let pre_pad = pre_pad_samples(sample_rate, pre_pad_ms);
        let mut out = Vec::with_capacity(layers.len());
        for (layer, name) in layers.into_iter().zip(&names) {
            if layer.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer `{name}`")));
            }
            let peak = layer.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if peak == 0.0 {
                return Err(Error::SilentLayer { layer: name.clone() });
            }
            let mut padded = vec![0.0f32; pre_pad];
            padded.extend(layer.iter().map(|v| v / peak));
            out.push(padded);
        }
        let len = out.iter().map(Vec::len).max().unwrap_or(0);
        for layer in &mut out {
            layer.resize(len, 0.0);
        }
        Ok(AudioLayerSet {
            layers: out,
            names,
            sample_rate,
            pre_pad,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Common length of all layers in samples.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

pub fn pre_pad_samples(sample_rate: u32, pre_pad_ms: f64) -> usize {
    (sample_rate as f64 * pre_pad_ms / 1000.0).round() as usize
}

/// Read a mono WAV file (PCM 8/16/24/32-bit or IEEE float 32) as `f32` in `[-1, 1)`.
pub fn read_wav_mono(path: &Path) -> Result<(Vec<f32>, u32)> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::NotMono {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?,
        (SampleFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(wav_err)?
        }
        (format, bits) => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("{format:?} {bits}-bit"),
            })
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Load the training layers from mono WAV files sharing one sample rate.
pub fn load_layers<P: AsRef<Path>>(paths: &[P], pre_pad_ms: f64) -> Result<AudioLayerSet> {
    if paths.is_empty() {
        return Err(Error::config("layers", "at least one layer file is required"));
    }
    let mut layers = Vec::with_capacity(paths.len());
    let mut names = Vec::with_capacity(paths.len());
    let mut rate = None;
    for path in paths {
        let path = path.as_ref();
        let (samples, sr) = read_wav_mono(path)?;
        match rate {
            None => rate = Some(sr),
            Some(expected) if expected != sr => {
                return Err(Error::SampleRateMismatch {
                    path: path.to_path_buf(),
                    expected,
                    found: sr,
                })
            }
            _ => {}
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("layer{}", names.len()));
        if samples.iter().all(|&v| v == 0.0) {
            return Err(Error::SilentLayer {
                layer: path.display().to_string(),
            });
        }
        layers.push(samples);
        names.push(name);
    }
    AudioLayerSet::from_samples(layers, names, rate.unwrap_or(DEFAULT_SAMPLE_RATE), pre_pad_ms)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WavFormat {
    /// IEEE float, 32 bits per sample.
    #[default]
    Float32,
    /// Signed integer PCM, 16 bits per sample.
    Pcm16,
}

impl std::str::FromStr for WavFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "float32" | "f32" => Ok(WavFormat::Float32),
            "pcm16" | "i16" => Ok(WavFormat::Pcm16),
            other => Err(format!("unknown wav format `{other}` (float32 | pcm16)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WavWriteReport {
    /// Samples outside `[-1, 1]` that were clipped.
    pub clipped: usize,
}

/// Write a mono 32-bit float WAV. Samples are clipped to `[-1, 1]`.
pub fn write_wav(samples: &[f32], sample_rate: u32, path: &Path) -> Result<WavWriteReport> {
    write_wav_as(samples, sample_rate, path, WavFormat::Float32)
}

/// Write a mono WAV in the given format. 16-bit samples are `round(x * 32768)` saturated
/// to the i16 range, which keeps read-back error within one quantization step.
pub fn write_wav_as(
    samples: &[f32],
    sample_rate: u32,
    path: &Path,
    format: WavFormat,
) -> Result<WavWriteReport> {
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "sample {i} written to {}",
            path.display()
        )));
    }
    let (bits, sample_format) = match format {
        WavFormat::Float32 => (32, SampleFormat::Float),
        WavFormat::Pcm16 => (16, SampleFormat::Int),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: bits,
        sample_format,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    let mut clipped = 0;
    for &s in samples {
        if s.abs() > 1.0 {
            clipped += 1;
        }
        let s = s.clamp(-1.0, 1.0);
        match format {
            WavFormat::Float32 => writer.write_sample(s),
            WavFormat::Pcm16 => {
                writer.write_sample((s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            }
        }
        .map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)?;
    if clipped > 0 {
        warn!("{}: clipped {clipped} samples outside [-1, 1]", path.display());
    }
    Ok(WavWriteReport { clipped })
}
