//! Trained model state and its on-disk layout.
//!
//! A checkpoint directory holds `manifest.toml`, one tensor blob per parameter group
//! (`g_head.bin`, `g_stage_NN.bin`, `g_tail.bin`, `d1.bin`, optionally `d2.bin`), the fixed
//! stage-0 reconstruction noise (`rec_noise.bin`) and the loss history (`losses.csv`).
//!
//! Blob format: the bytes `SFXT`, a `u32` format version, a `u32` tensor count, then per
//! tensor a `u32` rank, `u64` dimensions and `f32` values. All integers and floats are
//! little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Discriminator, Generator, ParamGroup};
use crate::spectral::MultiChannelSpectrogram;
use crate::tensor::Tensor;
use crate::training::{generate, reconstruction_noise, LossRecord, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;
const BLOB_MAGIC: &[u8; 4] = b"SFXT";

/// Everything needed to synthesize without the training audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub sample_rate: u32,
    pub layer_names: Vec<String>,
    /// `(F_n, T_n)` of every pyramid stage, trained or not.
    pub shapes: Vec<(usize, usize)>,
    /// Noise amplitude of every trained stage.
    pub noise_amps: Vec<f32>,
    pub generator: Generator,
    pub d1: Discriminator,
    pub d2: Option<Discriminator>,
    /// Fixed stage-0 reconstruction noise `[1, C, F_0, T_0]`.
    pub rec_noise: Tensor,
    pub history: Vec<LossRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    sample_rate: u32,
    layer_names: Vec<String>,
    norm_mean: f64,
    norm_std: f64,
    stages_trained: usize,
    pyramid_shapes: Vec<[usize; 2]>,
    noise_amps: Vec<f32>,
    has_d2: bool,
    blobs: Vec<String>,
    config: TrainConfig,
}

impl Checkpoint {
    pub fn channels(&self) -> usize {
        self.generator.channels
    }

    pub fn stages_trained(&self) -> usize {
        self.generator.num_stages()
    }

    pub fn final_stage(&self) -> usize {
        self.stages_trained() - 1
    }

    /// Output shape `(F, T)` of the last trained stage.
    pub fn output_shape(&self) -> (usize, usize) {
        self.shapes[self.final_stage()]
    }

    /// Generator output `[1, C, F, T]` under the fixed reconstruction noise.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let stage = self.final_stage();
        let noise = reconstruction_noise(&self.generator, &self.rec_noise, &self.shapes, stage);
        generate(&self.generator, &noise, &self.noise_amps, stage)
    }

    /// Wrap a generated `[1, C, F, T]` or `[C, F, T]` tensor with this checkpoint's
    /// normalization statistics.
    pub fn spectrogram(&self, data: Tensor) -> MultiChannelSpectrogram {
        let s = data.shape();
        let (f, t) = (s[s.len() - 2], s[s.len() - 1]);
        MultiChannelSpectrogram {
            data: data.reshape(vec![self.channels(), f, t]),
            norm_mean: self.norm_mean,
            norm_std: self.norm_std,
            stft: self.config.stft,
            layer_names: self.layer_names.clone(),
            sample_rate: self.sample_rate,
        }
    }

    fn blob_names(&self) -> Vec<String> {
        let mut names = vec!["g_head".to_string()];
        names.extend((0..self.stages_trained()).map(|s| format!("g_stage_{s:02}")));
        names.push("g_tail".into());
        names.push("d1".into());
        if self.d2.is_some() {
            names.push("d2".into());
        }
        names.push("rec_noise".into());
        names
    }

    /// Write to `dir`, replacing any previous checkpoint there only once the new one is
    /// complete.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = sibling(dir, "tmp");
        let old = sibling(dir, "old");
        for p in [&tmp, &old] {
            if p.exists() {
                fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
            }
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write_contents(&tmp)?;
        if dir.exists() {
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    fn write_contents(&self, dir: &Path) -> Result<()> {
        let mut groups: Vec<(String, Vec<Tensor>)> = Vec::new();
        self.generator.visit_params(&mut |g, t| {
            let name = match g {
                ParamGroup::Head => "g_head".to_string(),
                ParamGroup::Stage(s) => format!("g_stage_{s:02}"),
                ParamGroup::Tail => "g_tail".to_string(),
                ParamGroup::Critic => unreachable!("generator has no critic params"),
            };
            match groups.last_mut() {
                Some((n, ts)) if *n == name => ts.push(t.clone()),
                _ => groups.push((name, vec![t.clone()])),
            }
        });
        let mut d1 = Vec::new();
        self.d1.visit_params(&mut |_, t| d1.push(t.clone()));
        groups.push(("d1".into(), d1));
        if let Some(d2) = &self.d2 {
            let mut ts = Vec::new();
            d2.visit_params(&mut |_, t| ts.push(t.clone()));
            groups.push(("d2".into(), ts));
        }
        groups.push(("rec_noise".into(), vec![self.rec_noise.clone()]));
        for (name, tensors) in &groups {
            write_blob(&dir.join(format!("{name}.bin")), tensors)?;
        }

        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            sample_rate: self.sample_rate,
            layer_names: self.layer_names.clone(),
            norm_mean: self.norm_mean,
            norm_std: self.norm_std,
            stages_trained: self.stages_trained(),
            pyramid_shapes: self.shapes.iter().map(|&(f, t)| [f, t]).collect(),
            noise_amps: self.noise_amps.clone(),
            has_d2: self.d2.is_some(),
            blobs: self.blob_names(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        let path = dir.join("manifest.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        write_history(&dir.join("losses.csv"), &self.history)
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |reason: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason,
        };
        let m: Manifest = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", m.format_version)));
        }
        m.config.validate()?;
        let channels = m.layer_names.len();
        let shapes: Vec<(usize, usize)> = m.pyramid_shapes.iter().map(|s| (s[0], s[1])).collect();
        if m.stages_trained == 0 || m.stages_trained > shapes.len() || m.noise_amps.len() != m.stages_trained
        {
            return Err(bad("inconsistent stage counts".into()));
        }

        // the skeleton's random init is overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut generator = Generator::new(m.config.generator_spec(), channels, &mut rng)?;
        for _ in 1..m.stages_trained {
            generator.add_stage();
        }
        let mut group_tensors: Vec<(ParamGroup, Vec<Tensor>)> = Vec::new();
        for (g, name) in std::iter::once((ParamGroup::Head, "g_head".to_string()))
            .chain((0..m.stages_trained).map(|s| (ParamGroup::Stage(s), format!("g_stage_{s:02}"))))
            .chain(std::iter::once((ParamGroup::Tail, "g_tail".to_string())))
        {
            let mut ts = read_blob(dir, &name)?;
            ts.reverse();
            group_tensors.push((g, ts));
        }
        let mut fill_err = None;
        generator.visit_params_mut(&mut |g, p| {
            let slot = group_tensors
                .iter_mut()
                .find(|(gg, _)| *gg == g)
                .map(|(_, ts)| ts.pop());
            match slot.flatten() {
                Some(t) if t.shape() == p.shape() => *p = t,
                other => {
                    fill_err.get_or_insert(format!(
                        "generator group {g:?}: expected {:?}, found {:?}",
                        p.shape(),
                        other.map(|t| t.shape().to_vec())
                    ));
                }
            }
        });
        if let Some(e) = fill_err {
            return Err(bad(e));
        }
        if group_tensors.iter().any(|(_, ts)| !ts.is_empty()) {
            return Err(bad("generator blobs hold extra tensors".into()));
        }

        let mut critic = |dilation: usize, name: &str| -> Result<Discriminator> {
            let mut d = Discriminator::new(m.config.discriminator_spec(dilation), channels, &mut rng)?;
            let ts = read_blob(dir, name)?;
            fill(&mut d, ts).map_err(|e| bad(format!("{name}: {e}")))?;
            Ok(d)
        };
        let d1 = critic(1, "d1")?;
        let d2 = if m.has_d2 {
            Some(critic(m.config.d2_dilation, "d2")?)
        } else {
            None
        };
        let rec_noise = read_blob(dir, "rec_noise")?
            .pop()
            .ok_or_else(|| bad("empty rec_noise blob".into()))?;
        let (f0, t0) = shapes[0];
        if rec_noise.shape() != [1, channels, f0, t0] {
            return Err(bad(format!("rec_noise has shape {:?}", rec_noise.shape())));
        }
        let history = read_history(&dir.join("losses.csv"))?;
        Ok(Checkpoint {
            config: m.config,
            norm_mean: m.norm_mean,
            norm_std: m.norm_std,
            sample_rate: m.sample_rate,
            layer_names: m.layer_names,
            shapes,
            noise_amps: m.noise_amps,
            generator,
            d1,
            d2,
            rec_noise,
            history,
        })
    }
}

fn fill(d: &mut Discriminator, ts: Vec<Tensor>) -> std::result::Result<(), String> {
    let mut it = ts.into_iter();
    let mut err = None;
    d.visit_params_mut(&mut |_, p| match it.next() {
        Some(t) if t.shape() == p.shape() => *p = t,
        other => {
            err.get_or_insert(format!(
                "expected {:?}, found {:?}",
                p.shape(),
                other.map(|t| t.shape().to_vec())
            ));
        }
    });
    if it.next().is_some() {
        err.get_or_insert("extra tensors".into());
    }
    err.map_or(Ok(()), Err)
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "checkpoint".into());
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

fn write_blob(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes);
    let result = (|| {
        write(BLOB_MAGIC)?;
        write(&FORMAT_VERSION.to_le_bytes())?;
        write(&(tensors.len() as u32).to_le_bytes())?;
        for t in tensors {
            write(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                write(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                write(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })();
    result.and_then(|()| w.flush()).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

fn read_blob(dir: &Path, name: &str) -> Result<Vec<Tensor>> {
    let path = dir.join(format!("{name}.bin"));
    if !path.exists() {
        return Err(Error::MissingBlob {
            path: dir.to_path_buf(),
            blob: name.to_string(),
        });
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |reason: &str| Error::Checkpoint {
        path: path.clone(),
        reason: reason.to_string(),
    };
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4) != Some(BLOB_MAGIC.as_slice()) {
        return Err(bad("not a tensor blob"));
    }
    if r.u32() != Some(FORMAT_VERSION) {
        return Err(bad("unsupported blob version"));
    }
    let count = r.u32().ok_or_else(|| bad("truncated header"))?;
    let mut out = Vec::new();
    for _ in 0..count {
        let rank = r.u32().ok_or_else(|| bad("truncated tensor header"))? as usize;
        if rank > 8 {
            return Err(bad("tensor rank too large"));
        }
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated tensor header"))?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("tensor too large"))?;
        let raw = r
            .take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(Tensor::new(dims, data));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

const HISTORY_HEADER: &str = "iteration,stage,d_loss,g_adv,rec";

pub fn write_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut text = String::with_capacity(history.len() * 48 + 40);
    text.push_str(HISTORY_HEADER);
    text.push('\n');
    for r in history {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iteration, r.stage, r.d_loss, r.g_adv, r.rec
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(bad(1, "missing header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 2, "expected 5 fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 2, "bad integer"));
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
            Ok(LossRecord {
                iteration: int(f[0])?,
                stage: int(f[1])?,
                d_loss: float(f[2])?,
                g_adv: float(f[3])?,
                rec: float(f[4])?,
            })
        })
        .collect()
}
