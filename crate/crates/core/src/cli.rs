//! `sfxgan train | synth | inspect`.
//!
//! Exit codes: 0 on success, 1 for rejected input (bad flags, configuration values or
//! audio content), 2 for runtime failures such as i/o errors, unreadable checkpoints or
//! training divergence.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::audio_io::{load_layers, write_wav_as, WavFormat};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentManifest, Preset, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::inference::{diversity_report, synthesize_batch, DiversityReport, SynthesisParams, VariationInfo};
use crate::training::{train_with, Combine, LossRecord, TrainConfig, TrainObserver};

pub const OUTPUT_ROOT_ENV: &str = "SFXGAN_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "sfxgan",
    version,
    about = "Train on one layered sound effect and synthesize variations"
)]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a checkpoint from layer files.
    Train(Box<TrainArgs>),
    /// Synthesize variations from a checkpoint.
    Synth(Box<SynthArgs>),
    /// Print a checkpoint summary.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment manifest (TOML). Flags below override its values.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// footsteps-concrete | footsteps-metal | gunshot | character-jump | custom
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Layer WAV file; repeat for several layers.
    #[arg(long = "layer")]
    pub layers: Vec<PathBuf>,
    /// Run directory; defaults to `<output-root>/<preset>`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    pub output_root: PathBuf,
    #[command(flatten)]
    pub config: TrainFlags,
}

/// One flag per [`TrainConfig`] field.
#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub num_stages: Option<usize>,
    #[arg(long)]
    pub iters_per_stage: Option<usize>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub d2_dilation: Option<usize>,
    #[arg(long)]
    pub min_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub lr_scale_lower: Option<f32>,
    #[arg(long)]
    pub concurrent_stages: Option<usize>,
    #[arg(long)]
    pub rec_weight: Option<f32>,
    #[arg(long)]
    pub gp_weight: Option<f32>,
    #[arg(long)]
    pub d_steps: Option<usize>,
    #[arg(long)]
    pub g_steps: Option<usize>,
    #[arg(long)]
    pub d2_start_stage: Option<usize>,
    #[arg(long)]
    pub use_d2: Option<bool>,
    /// sum | mean
    #[arg(long, value_parser = parse_combine)]
    pub combine: Option<Combine>,
    #[arg(long)]
    pub adam_beta1: Option<f32>,
    #[arg(long)]
    pub adam_beta2: Option<f32>,
    #[arg(long)]
    pub noise_amp_scale: Option<f32>,
    #[arg(long)]
    pub feature_upsample_margin: Option<f64>,
    #[arg(long)]
    pub base_blocks: Option<usize>,
    #[arg(long)]
    pub blocks_per_stage: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub leaky_alpha: Option<f32>,
    #[arg(long)]
    pub d_body_layers: Option<usize>,
    #[arg(long)]
    pub pre_pad_ms: Option<f64>,
    #[arg(long)]
    pub fft_size: Option<usize>,
    #[arg(long)]
    pub hop: Option<usize>,
    #[arg(long)]
    pub log_epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_combine(s: &str) -> std::result::Result<Combine, String> {
    match s {
        "sum" => Ok(Combine::Sum),
        "mean" => Ok(Combine::Mean),
        _ => Err(format!("unknown combine mode `{s}` (sum | mean)")),
    }
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

macro_rules! put {
    ($table:expr, $flags:expr, $($field:ident),* $(,)?) => {
        $(
            if let Some(v) = $flags.$field.clone() {
                $table.insert(
                    stringify!($field).to_string(),
                    toml::Value::try_from(v).expect("flag value serializes"),
                );
            }
        )*
    };
}

impl TrainFlags {
    pub fn to_table(&self) -> toml::Table {
        let mut t = toml::Table::new();
        put!(
            t,
            self,
            num_stages,
            iters_per_stage,
            filters,
            d2_dilation,
            min_size,
            lr,
            lr_scale_lower,
            concurrent_stages,
            rec_weight,
            gp_weight,
            d_steps,
            g_steps,
            d2_start_stage,
            use_d2,
            combine,
            adam_beta1,
            adam_beta2,
            noise_amp_scale,
            feature_upsample_margin,
            base_blocks,
            blocks_per_stage,
            kernel,
            leaky_alpha,
            d_body_layers,
            pre_pad_ms,
            seed,
        );
        let mut stft = toml::Table::new();
        put!(stft, self, fft_size, hop, log_epsilon);
        if !stft.is_empty() {
            t.insert("stft".into(), toml::Value::Table(stft));
        }
        t
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory; defaults to `<output-root>/synth`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    pub output_root: PathBuf,
    /// Manifest whose `[synth]` table supplies defaults for the flags below.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Also write each mix's delayed, gained layers.
    #[arg(long)]
    pub write_layers: bool,
    /// float32 | pcm16
    #[arg(long, default_value = "float32")]
    pub format: WavFormat,
    #[command(flatten)]
    pub params: SynthFlags,
}

/// One flag per [`SynthesisParams`] field.
#[derive(Debug, Default, Args)]
pub struct SynthFlags {
    #[arg(long)]
    pub num_variations: Option<usize>,
    #[arg(long)]
    pub retarget_fraction: Option<f64>,
    #[arg(long)]
    pub retarget_bound: Option<f64>,
    #[arg(long)]
    pub shuffle_layers: Option<bool>,
    /// `lo,hi` in milliseconds.
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    pub delay_range_ms: Option<(f64, f64)>,
    /// `lo,hi` in decibels.
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    pub gain_range_db: Option<(f64, f64)>,
    #[arg(long)]
    pub gl_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub use_reconstruction_noise: Option<bool>,
}

impl SynthFlags {
    pub fn to_table(&self) -> toml::Table {
        let mut t = toml::Table::new();
        put!(
            t,
            self,
            num_variations,
            retarget_fraction,
            retarget_bound,
            shuffle_layers,
            delay_range_ms,
            gain_range_db,
            gl_iters,
            seed,
            use_reconstruction_noise,
        );
        t
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint directory.
    pub checkpoint: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

struct Progress<'a> {
    checkpoint: &'a Path,
    iters: usize,
}

impl TrainObserver for Progress<'_> {
    fn on_iteration(&mut self, r: &LossRecord) {
        let every = (self.iters / 10).max(1);
        if (r.iteration + 1).is_multiple_of(every) {
            log::info!(
                "stage {} iter {}/{}: d_loss {:.4} g_adv {:.4} rec {:.5}",
                r.stage,
                r.iteration + 1,
                self.iters,
                r.d_loss,
                r.g_adv,
                r.rec
            );
        }
    }

    fn on_stage_complete(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let stage = ckpt.final_stage();
        let (f, t) = ckpt.output_shape();
        let last = ckpt.history.last();
        println!(
            "stage {stage}/{} ({f}x{t}) done: d_loss {:.4}, g_adv {:.4}, rec {:.5}",
            ckpt.shapes.len() - 1,
            last.map_or(f64::NAN, |r| r.d_loss),
            last.map_or(f64::NAN, |r| r.g_adv),
            last.map_or(f64::NAN, |r| r.rec),
        );
        ckpt.save(self.checkpoint)
    }
}

/// Train from a manifest into `out_dir`. Writes the resolved manifest to
/// `out_dir/experiment.toml` and the checkpoint to `out_dir/checkpoint` after every stage;
/// returns the checkpoint path.
pub fn cmd_train(manifest: &ExperimentManifest, out_dir: &Path) -> Result<PathBuf> {
    let cfg = manifest.train_config()?;
    let resolved = manifest.resolved()?;
    let layers = load_layers(&manifest.layers, cfg.pre_pad_ms)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let replay = out_dir.join("experiment.toml");
    fs::write(&replay, resolved.to_toml()?).map_err(|e| Error::io(&replay, e))?;
    let checkpoint = out_dir.join("checkpoint");
    println!(
        "training {} layer(s), {:.3} s at {} Hz: {} stages x {} iterations, {} filters",
        layers.num_layers(),
        layers.duration_secs(),
        layers.sample_rate,
        cfg.num_stages,
        cfg.iters_per_stage,
        cfg.filters
    );
    let mut progress = Progress {
        checkpoint: &checkpoint,
        iters: cfg.iters_per_stage,
    };
    match train_with(&layers, &cfg, &mut progress) {
        Ok(ckpt) => {
            let last = ckpt.history.last().copied();
            if let Some(r) = last {
                println!(
                    "final losses: d_loss {:.4}, g_adv {:.4}, rec {:.5}",
                    r.d_loss, r.g_adv, r.rec
                );
            }
            println!("checkpoint: {}", checkpoint.display());
            Ok(checkpoint)
        }
        Err(e @ Error::Divergence { .. }) => {
            if checkpoint.exists() {
                eprintln!("last good checkpoint: {}", checkpoint.display());
            }
            Err(e)
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SynthOutput {
    pub write_layers: bool,
    pub format: WavFormat,
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    schema_version: u32,
    checkpoint: &'a Path,
    params: &'a SynthesisParams,
    variations: Vec<&'a VariationInfo>,
    diversity: &'a DiversityReport,
}

/// Synthesize into `out_dir`: `mix_NNN.wav` per variation, optional
/// `mix_NNN_<layer>.wav` stems and `synthesis.json`. Returns the files written.
pub fn cmd_synth(
    checkpoint: &Path,
    params: &SynthesisParams,
    out_dir: &Path,
    output: SynthOutput,
) -> Result<Vec<PathBuf>> {
    params.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let batch = synthesize_batch(&ckpt, params)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for v in &batch {
        let path = out_dir.join(format!("mix_{:03}.wav", v.info.index));
        write_wav_as(&v.mix, ckpt.sample_rate, &path, output.format)?;
        files.push(path);
        if output.write_layers {
            for (stem, name) in v.stems.iter().zip(&ckpt.layer_names) {
                let path = out_dir.join(format!("mix_{:03}_{}.wav", v.info.index, file_safe(name)));
                write_wav_as(stem, ckpt.sample_rate, &path, output.format)?;
                files.push(path);
            }
        }
    }
    let mixes: Vec<Vec<f32>> = batch.iter().map(|v| v.mix.clone()).collect();
    let report = diversity_report(&mixes, ckpt.sample_rate, ckpt.config.stft)?;
    let manifest = SynthManifest {
        schema_version: SCHEMA_VERSION,
        checkpoint,
        params,
        variations: batch.iter().map(|v| &v.info).collect(),
        diversity: &report,
    };
    let path = out_dir.join("synthesis.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    println!(
        "{} variation(s); pairwise log-spectrogram distance mean {:.3} (min {:.3}, max {:.3}); {} distinct durations",
        batch.len(),
        report.mean,
        report.min,
        report.max,
        report.distinct_durations
    );
    Ok(files)
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: usize,
    pub shape: (usize, usize),
    pub generator_params: usize,
    pub noise_amp: f32,
    pub final_d_loss: f64,
    pub final_g_adv: f64,
    pub final_rec: f64,
    pub min_rec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectReport {
    pub config: TrainConfig,
    pub sample_rate: u32,
    pub layer_names: Vec<String>,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub stages_trained: usize,
    pub critic_params: Vec<usize>,
    pub stages: Vec<StageSummary>,
}

pub fn cmd_inspect(checkpoint: &Path) -> Result<InspectReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let stages = (0..ckpt.stages_trained())
        .map(|s| {
            let recs: Vec<&LossRecord> = ckpt.history.iter().filter(|r| r.stage == s).collect();
            let last = recs.last();
            StageSummary {
                stage: s,
                shape: ckpt.shapes[s],
                generator_params: ckpt.generator.param_count(s),
                noise_amp: ckpt.noise_amps[s],
                final_d_loss: last.map_or(f64::NAN, |r| r.d_loss),
                final_g_adv: last.map_or(f64::NAN, |r| r.g_adv),
                final_rec: last.map_or(f64::NAN, |r| r.rec),
                min_rec: recs.iter().map(|r| r.rec).fold(f64::NAN, f64::min),
            }
        })
        .collect();
    let mut critic_params = vec![ckpt.d1.param_count()];
    critic_params.extend(ckpt.d2.as_ref().map(|d| d.param_count()));
    Ok(InspectReport {
        config: ckpt.config.clone(),
        sample_rate: ckpt.sample_rate,
        layer_names: ckpt.layer_names.clone(),
        norm_mean: ckpt.norm_mean,
        norm_std: ckpt.norm_std,
        stages_trained: ckpt.stages_trained(),
        critic_params,
        stages,
    })
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "layers: {} at {} Hz",
            self.layer_names.join(", "),
            self.sample_rate
        )?;
        writeln!(
            f,
            "config: {} stages x {} iterations, {} filters, d2 dilation {}, min size {}, seed {}",
            c.num_stages, c.iters_per_stage, c.filters, c.d2_dilation, c.min_size, c.seed
        )?;
        writeln!(
            f,
            "stft: fft {} hop {} log floor {:e}; normalization mean {:.6} std {:.6}",
            c.stft.fft_size, c.stft.hop, c.stft.log_epsilon, self.norm_mean, self.norm_std
        )?;
        writeln!(f, "critic params: {:?}", self.critic_params)?;
        writeln!(f, "stages trained: {}", self.stages_trained)?;
        writeln!(
            f,
            "stage  shape       params     noise_amp  d_loss     g_adv      rec        min_rec"
        )?;
        for s in &self.stages {
            writeln!(
                f,
                "{:<6} {:<11} {:<10} {:<10.5} {:<10.4} {:<10.4} {:<10.5} {:.5}",
                s.stage,
                format!("{}x{}", s.shape.0, s.shape.1),
                s.generator_params,
                s.noise_amp,
                s.final_d_loss,
                s.final_g_adv,
                s.final_rec,
                s.min_rec
            )?;
        }
        Ok(())
    }
}

fn train_manifest(args: &TrainArgs) -> Result<ExperimentManifest> {
    let mut m = match &args.manifest {
        Some(p) => ExperimentManifest::load(p)?,
        None => ExperimentManifest {
            schema_version: SCHEMA_VERSION,
            preset: args
                .preset
                .ok_or_else(|| Error::config("preset", "give --preset or --manifest"))?,
            layers: Vec::new(),
            output_dir: None,
            train: toml::Table::new(),
            synth: toml::Table::new(),
        },
    };
    if let Some(p) = args.preset {
        m.preset = p;
    }
    if !args.layers.is_empty() {
        m.layers = args.layers.clone();
    }
    if m.layers.is_empty() {
        return Err(Error::config("layers", "give at least one --layer"));
    }
    for (k, v) in args.config.to_table() {
        m.train.insert(k, v);
    }
    Ok(m)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let m = train_manifest(&args)?;
            let out = args
                .out_dir
                .clone()
                .or_else(|| m.output_dir.clone())
                .unwrap_or_else(|| args.output_root.join(m.preset.name()));
            cmd_train(&m, &out)?;
        }
        Command::Synth(args) => {
            let mut table = match &args.manifest {
                Some(p) => ExperimentManifest::load(p)?.synth,
                None => toml::Table::new(),
            };
            for (k, v) in args.params.to_table() {
                table.insert(k, v);
            }
            let params: SynthesisParams =
                crate::config::apply_overrides(&SynthesisParams::default(), &table, "synth")?;
            let out = args
                .out_dir
                .clone()
                .unwrap_or_else(|| args.output_root.join("synth"));
            let files = cmd_synth(
                &args.checkpoint,
                &params,
                &out,
                SynthOutput {
                    write_layers: args.write_layers,
                    format: args.format,
                },
            )?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Inspect(args) => {
            let report = cmd_inspect(&args.checkpoint)?;
            if args.json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report).expect("report serializes")
                );
            } else {
                print!("{report}");
            }
        }
    }
    Ok(())
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
