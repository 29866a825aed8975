//! Coarse-to-fine stack of the training spectrogram, one level per training stage.
//!
//! The shorter spatial axis grows geometrically from `min_size` at stage 0 to its original
//! size at the last stage; the longer axis follows with the same scale factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::MultiChannelSpectrogram;
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub num_stages: usize,
    /// Size of the shorter spatial axis at stage 0.
    pub min_size: usize,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec {
            num_stages: 10,
            min_size: 25,
        }
    }
}

/// Shorter-axis size at `stage` of a geometric schedule from `min_size` to `max_size`.
pub fn scheduled_size(min_size: usize, max_size: usize, stage: usize, num_stages: usize) -> usize {
    if stage + 1 >= num_stages {
        return max_size;
    }
    let ratio = max_size as f64 / min_size as f64;
    let exponent = stage as f64 / (num_stages - 1) as f64;
    (min_size as f64 * ratio.powf(exponent)).round() as usize
}

impl PyramidSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 2 {
            return Err(Error::config("num_stages", "at least 2 stages are required"));
        }
        if self.min_size == 0 {
            return Err(Error::config("min_size", "must be positive"));
        }
        Ok(())
    }

    /// `(F_n, T_n)` for every stage of a `F x T` spectrogram.
    pub fn stage_shapes(&self, bins: usize, frames: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let shorter = bins.min(frames);
        if self.min_size > shorter {
            return Err(Error::config(
                "min_size",
                format!(
                    "{} exceeds the shorter spectrogram axis ({shorter})",
                    self.min_size
                ),
            ));
        }
        let freq_is_shorter = bins <= frames;
        let longer = bins.max(frames);
        Ok((0..self.num_stages)
            .map(|n| {
                let s = scheduled_size(self.min_size, shorter, n, self.num_stages);
                let l = if s == shorter {
                    longer
                } else {
                    ((longer as f64 * s as f64 / shorter as f64).round() as usize).max(s)
                };
                if freq_is_shorter {
                    (s, l)
                } else {
                    (l, s)
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramPyramid {
    pub spec: PyramidSpec,
    pub shapes: Vec<(usize, usize)>,
    /// `[C, F_n, T_n]` per stage, coarse to fine.
    pub levels: Vec<Tensor>,
}

impl SpectrogramPyramid {
    pub fn num_stages(&self) -> usize {
        self.levels.len()
    }
}

/// Bilinearly downsample `spec` to every stage shape. The last level is the input itself.
pub fn build_pyramid(spec: &MultiChannelSpectrogram, pspec: PyramidSpec) -> Result<SpectrogramPyramid> {
    let shapes = pspec.stage_shapes(spec.bins(), spec.frames())?;
    let last = shapes.len() - 1;
    let levels = shapes
        .iter()
        .enumerate()
        .map(|(n, &(f, t))| {
            if n == last {
                spec.data.clone()
            } else {
                resize_bilinear(&spec.data, f, t)
            }
        })
        .collect();
    Ok(SpectrogramPyramid {
        spec: pspec,
        shapes,
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::StftParams;
    use proptest::prelude::*;

    fn spectrogram(data: Tensor) -> MultiChannelSpectrogram {
        MultiChannelSpectrogram {
            data,
            norm_mean: 0.0,
            norm_std: 1.0,
            stft: StftParams::default(),
            layer_names: vec![],
            sample_rate: 44_100,
        }
    }

    #[test]
    fn geometric_schedule_25_to_100() {
        // oracle: 25 * 4^(n/9) evaluated directly
        let expect: Vec<usize> = (0..10)
            .map(|n| (25.0f64 * 4f64.powf(n as f64 / 9.0)).round() as usize)
            .collect();
        let got: Vec<usize> = (0..10).map(|n| scheduled_size(25, 100, n, 10)).collect();
        assert_eq!(got, expect);
        assert_eq!(got[0], 25);
        assert_eq!(got[5], 54);
        assert_eq!(got[9], 100);
    }

    #[test]
    fn degenerate_schedule_keeps_original_shape() {
        let shapes = PyramidSpec {
            num_stages: 10,
            min_size: 65,
        }
        .stage_shapes(257, 65)
        .unwrap();
        assert!(shapes.iter().all(|&s| s == (257, 65)));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(PyramidSpec {
            num_stages: 1,
            min_size: 5
        }
        .stage_shapes(50, 50)
        .is_err());
        assert!(PyramidSpec {
            num_stages: 4,
            min_size: 51
        }
        .stage_shapes(257, 50)
        .is_err());
    }

    #[test]
    fn constant_input_stays_constant() {
        let spec = spectrogram(Tensor::full(vec![2, 257, 80], 0.75));
        let pyr = build_pyramid(
            &spec,
            PyramidSpec {
                num_stages: 5,
                min_size: 11,
            },
        )
        .unwrap();
        for level in &pyr.levels {
            assert!(level.data().iter().all(|&v| v == 0.75));
        }
    }

    #[test]
    fn last_level_is_bit_identical() {
        let data = Tensor::new(
            vec![1, 30, 40],
            (0..1200).map(|i| (i as f32 * 0.37).sin()).collect(),
        );
        let spec = spectrogram(data.clone());
        let pyr = build_pyramid(
            &spec,
            PyramidSpec {
                num_stages: 4,
                min_size: 10,
            },
        )
        .unwrap();
        assert_eq!(pyr.levels.last().unwrap(), &data);
        assert_eq!(pyr.shapes[0], (10, 13));
    }

    proptest! {
        #[test]
        fn shapes_are_monotone(
            bins in 8usize..300,
            frames in 8usize..300,
            stages in 2usize..12,
            min_frac in 0.05f64..1.0,
        ) {
            let shorter = bins.min(frames);
            let min_size = ((shorter as f64 * min_frac) as usize).max(1);
            let shapes = PyramidSpec { num_stages: stages, min_size }.stage_shapes(bins, frames).unwrap();
            prop_assert_eq!(shapes.len(), stages);
            prop_assert_eq!(*shapes.last().unwrap(), (bins, frames));
            prop_assert_eq!(shapes[0].0.min(shapes[0].1), min_size);
            for w in shapes.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }
}
