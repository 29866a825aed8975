use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sfxgan::audio_io::write_wav;

const SR: u32 = 16000;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sfxgan"));
    c.env_remove("SFXGAN_OUTPUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Two 0.1 s layers: 257 x 9 spectrogram frames at the default STFT.
fn write_layers(dir: &Path) -> (PathBuf, PathBuf) {
    let n = SR as usize / 10;
    let a: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f32 / SR as f32;
            (-t * 25.0).exp() * (2.0 * std::f32::consts::PI * 330.0 * t).sin()
        })
        .collect();
    let b: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f32 / SR as f32;
            (-t * 40.0).exp() * (((i * 2654435761) % 1000) as f32 / 1000.0 - 0.5)
        })
        .collect();
    let (pa, pb) = (dir.join("body.wav"), dir.join("tail.wav"));
    write_wav(&a, SR, &pa).unwrap();
    write_wav(&b, SR, &pb).unwrap();
    (pa, pb)
}

fn train(dir: &Path, out: &Path, extra: &[&str]) -> Output {
    let (a, b) = write_layers(dir);
    let mut args = vec![
        "train",
        "--preset",
        "custom",
        "--layer",
        a.to_str().unwrap(),
        "--layer",
        b.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--d2-dilation",
        "2",
        "--min-size",
        "5",
        "--num-stages",
        "2",
        "--concurrent-stages",
        "2",
    ];
    if !extra.contains(&"--iters-per-stage") {
        args.extend_from_slice(&["--iters-per-stage", "2"]);
    }
    args.extend_from_slice(extra);
    run(&args)
}

fn inspect(ckpt: &Path) -> serde_json::Value {
    let o = run(&["inspect", "--json", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_slice(&o.stdout).unwrap()
}

/// Generator parameters at `stage` with 3x3 kernels, 4 base blocks and 3 per stage:
/// head conv C->f, (3 + 3 stage) hidden f->f blocks, tail conv f->C; each block adds
/// a bias and two batch-norm vectors.
fn generator_params(c: usize, f: usize, stage: usize) -> usize {
    let head = 9 * c * f + 3 * f;
    let hidden = (3 + 3 * stage) * (9 * f * f + 3 * f);
    let tail = 9 * f * c + c;
    head + hidden + tail
}

/// One 1->f input conv per channel, three f->f body blocks, then the f->1 tail.
fn critic_params(c: usize, f: usize) -> usize {
    c * (9 * f + f) + 3 * (9 * f * f + f) + (9 * f + 1)
}

#[test]
fn train_then_inspect_reports_closed_form_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut counts = Vec::new();
    for f in [64usize, 128] {
        let out = dir.path().join(format!("f{f}"));
        let o = train(
            dir.path(),
            &out,
            &["--filters", &f.to_string(), "--iters-per-stage", "1"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let report = inspect(&out.join("checkpoint"));
        let stages = report["stages"].as_array().unwrap();
        assert_eq!(stages.len(), 2);
        for (s, st) in stages.iter().enumerate() {
            assert_eq!(
                st["generator_params"].as_u64().unwrap() as usize,
                generator_params(2, f, s)
            );
        }
        let critics: Vec<u64> = report["critic_params"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .collect();
        assert_eq!(critics, vec![critic_params(2, f) as u64; 2]);
        counts.push(stages[1]["generator_params"].as_u64().unwrap() as i64);
    }
    // 6 hidden blocks: 6 (9 (128^2 - 64^2) + 3 * 64), plus 18 C 64 + 3 * 64 for head and tail
    let expected = 6 * (9 * (128 * 128 - 64 * 64) + 3 * 64) + 18 * 2 * 64 + 3 * 64;
    assert_eq!(counts[1] - counts[0], expected);
}

#[test]
fn train_writes_replayable_experiment_and_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(dir.path(), &out, &["--filters", "8", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("stage 1/1"), "{stdout}");
    let ckpt = out.join("checkpoint");
    let mut files: Vec<String> = fs::read_dir(&ckpt)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "d1.bin",
            "d2.bin",
            "g_head.bin",
            "g_stage_00.bin",
            "g_stage_01.bin",
            "g_tail.bin",
            "losses.csv",
            "manifest.toml",
            "rec_noise.bin"
        ]
    );
    let history = fs::read_to_string(ckpt.join("losses.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2 * 2);

    // the resolved manifest alone reproduces the run
    let replay = dir.path().join("replay");
    let o = run(&[
        "train",
        "--manifest",
        out.join("experiment.toml").to_str().unwrap(),
        "--out-dir",
        replay.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in &files {
        assert_eq!(
            fs::read(ckpt.join(f)).unwrap(),
            fs::read(replay.join("checkpoint").join(f)).unwrap(),
            "{f} differs between the run and its replay"
        );
    }
}

#[test]
fn synth_writes_mixes_stems_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(dir.path(), &out, &["--filters", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = out.join("checkpoint");
    let synth = |name: &str| {
        let dst = dir.path().join(name);
        let o = run(&[
            "synth",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out-dir",
            dst.to_str().unwrap(),
            "--num-variations",
            "3",
            "--gl-iters",
            "8",
            "--seed",
            "5",
            "--write-layers",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        dst
    };
    let (a, b) = (synth("a"), synth("b"));
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 3 + 3 * 2 + 1, "{names:?}");
    assert!(names.contains(&"mix_000.wav".to_string()));
    assert!(names.contains(&"mix_002_body.wav".to_string()));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("synthesis.json")).unwrap()).unwrap();
    assert_eq!(manifest["variations"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["diversity"]["pairwise"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["params"]["seed"], 5);

    let reader = hound::WavReader::open(a.join("mix_001.wav")).unwrap();
    assert_eq!(reader.spec().sample_rate, SR);
    assert_eq!(reader.spec().channels, 1);
}

#[test]
fn missing_blob_is_named_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(dir.path(), &out, &["--filters", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = out.join("checkpoint");
    fs::remove_file(ckpt.join("g_stage_01.bin")).unwrap();
    let o = run(&["inspect", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("g_stage_01"), "{}", stderr(&o));
}

#[test]
fn rejected_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = write_layers(dir.path());
    let a = a.to_str().unwrap();
    // custom without its required keys
    let o = run(&["train", "--preset", "custom", "--layer", a]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("iters_per_stage"));
    let o = run(&["train", "--preset", "laser", "--layer", a]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["train", "--preset", "gunshot", "--layer", a, "--lr", "-1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["synth", "--checkpoint", "x", "--retarget-fraction", "2"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["--version"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_layers(dir.path());
    let root = dir.path().join("root");
    let o = bin()
        .env("SFXGAN_OUTPUT_ROOT", &root)
        .args([
            "train",
            "--manifest",
            dir.path().join("exp.toml").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    // no manifest yet: an i/o failure, not a validation error
    assert_eq!(o.status.code(), Some(2));
    fs::write(
        dir.path().join("exp.toml"),
        format!(
            "schema_version = 1\npreset = \"custom\"\nlayers = [{:?}, {:?}]\n\n[train]\niters_per_stage = 1\n\
             filters = 4\nd2_dilation = 2\nmin_size = 5\nnum_stages = 2\nconcurrent_stages = 2\n",
            a.file_name().unwrap(),
            b.file_name().unwrap()
        ),
    )
    .unwrap();
    let o = bin()
        .env("SFXGAN_OUTPUT_ROOT", &root)
        .args([
            "train",
            "--manifest",
            dir.path().join("exp.toml").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root
        .join("custom")
        .join("checkpoint")
        .join("manifest.toml")
        .exists());
    assert!(root.join("custom").join("experiment.toml").exists());
}
