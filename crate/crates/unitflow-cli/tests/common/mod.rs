use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unitflow::audio::{write_wav, Waveform};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_unitflow")
}

pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn unitflow")
}

pub fn expect_ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Twenty short tones with number-word transcripts; returns the manifest path.
pub fn make_corpus(dir: &Path) -> PathBuf {
    const WORDS: [&str; 20] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen",
        "eighteen", "nineteen",
    ];
    let rate = 16000u32;
    let mut manifest = String::new();
    for (i, word) in WORDS.iter().enumerate() {
        // three-segment tone so each utterance crosses several clusters
        let base = 170.0 + 47.0 * i as f64;
        let segments = [base, base * 1.9, base * 1.3];
        let seg_len = 2400usize; // 0.15 s each
        let mut samples = Vec::with_capacity(seg_len * segments.len());
        for (si, &freq) in segments.iter().enumerate() {
            let amp = 0.5 - 0.1 * si as f64;
            for t in 0..seg_len {
                let phase = 2.0 * std::f64::consts::PI * freq * t as f64 / rate as f64;
                samples.push((amp * phase.sin() + 0.15 * (2.0 * phase).sin()) as f32);
            }
        }
        let name = format!("tone_{i:02}.wav");
        write_wav(dir.join(&name), &Waveform::new(samples, rate)).unwrap();
        manifest.push_str(&format!("{name}\ttone {word}\n"));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).unwrap();
    path
}

/// Small-profile config so pipeline runs finish quickly.
pub fn write_smoke_config(dir: &Path, seed: u64) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": seed,
        "codebook": {"k": 12, "max_iters": 50},
        "model": {
            "layers": 2, "model_dim": 32, "heads": 2, "ffn_dim": 64,
            "max_len": 512, "vocab_size": 276
        },
        "t2u_model": {
            "layers": 2, "model_dim": 32, "heads": 2, "ffn_dim": 64,
            "max_len": 160, "vocab_size": 276
        },
        "dataset": {"p": 0.5, "cross_pack_len": 224, "chain_pack_len": 512, "mix_ratio": 1.0},
        "stage1": {
            "stage": 1, "batch_size": 8, "peak_lr": 3e-3, "max_len": 64,
            "steps": 50, "warmup_steps": 5, "seed": 0, "save_every": 0
        },
        "stage2": {
            "stage": 2, "batch_size": 8, "peak_lr": 3e-3, "max_len": 224,
            "steps": 60, "warmup_steps": 6, "seed": 0, "save_every": 0
        },
        "stage3": {
            "stage": 3, "batch_size": 8, "peak_lr": 2e-3, "max_len": 512,
            "steps": 60, "warmup_steps": 6, "seed": 0, "save_every": 0,
            "lora": {"rank": 8, "alpha": 16.0}
        },
        "t2u_train": {
            "stage": 2, "batch_size": 8, "peak_lr": 5e-3, "max_len": 160,
            "steps": 150, "warmup_steps": 15, "seed": 0, "save_every": 0
        },
        "sampling": {"temperature": 0.8, "top_k": 60, "top_p": 0.8, "max_new_tokens": 96, "seed": 0}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}
