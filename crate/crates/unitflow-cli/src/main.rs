//! Command-line entry point for the unitflow pipeline.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 internal. Errors print as
//! one JSON line on stderr; progress goes to stderr, results to stdout.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "unitflow",
    version,
    propagate_version = true,
    about = "Discrete speech-unit language modeling: extraction, dataset construction, training, inference"
)]
pub struct Cli {
    /// Global JSON configuration file; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root seed; stages without an explicit seed derive theirs from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for data-parallel steps.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Args, Clone)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub peak_lr: Option<f32>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Checkpoint cadence in steps (0 = final only).
    #[arg(long)]
    pub save_every: Option<usize>,
    /// Per-step JSON-lines report (step, loss, lr).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Commands {
    /// Train the k-means unit codebook from manifest audio.
    TrainCodebook {
        /// TSV manifest: audio_path TAB transcript.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cluster count K.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
    },

    /// Quantize manifest audio into reduced unit sequences.
    ExtractUnits {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Build instruction datasets (cross-modal or chain).
    BuildDataset {
        /// "cross-modal" or "chain".
        #[arg(long, default_value = "cross-modal")]
        kind: String,
        /// Manifest (cross-modal kind).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Unit file aligned with the manifest (cross-modal kind).
        #[arg(long)]
        units: Option<PathBuf>,
        /// ASR probability p in [0, 1].
        #[arg(long)]
        p: Option<f64>,
        /// Description pools JSON ({"asr": [...], "tts": [...]}).
        #[arg(long)]
        descriptions: Option<PathBuf>,
        /// Text-instruction pairs JSON (bundled set when omitted).
        #[arg(long)]
        text_pairs: Option<PathBuf>,
        /// Cross-modal to text-instruction sample-count ratio.
        #[arg(long)]
        mix_ratio: Option<f64>,
        /// Text-to-unit generator checkpoint (chain kind).
        #[arg(long)]
        t2u: Option<PathBuf>,
        /// Comma-separated chain formats (chain kind).
        #[arg(long, default_value = "si-sr,si-tr,ti-sr,ti-tr")]
        formats: String,
        #[arg(long)]
        pack_len: Option<usize>,
        #[arg(long)]
        out_records: PathBuf,
        #[arg(long)]
        out_packed: PathBuf,
    },

    /// Train the text-to-unit generator on manifest transcripts and units.
    TrainT2u {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },

    /// Run one training stage (1: unit pre-training, 2: cross-modal
    /// fine-tuning, 3: LoRA chain fine-tuning).
    Train {
        #[arg(long)]
        stage: u8,
        /// Stage 1: unit file. Stages 2-3: packed JSON-lines.
        #[arg(long)]
        data: PathBuf,
        /// Initial checkpoint (stages 2 and 3).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output checkpoint (stages 1-2: model, stage 3: adapters).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lora_rank: Option<usize>,
        #[arg(long)]
        lora_alpha: Option<f32>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },

    /// Chain-of-modality inference for one instruction.
    Infer {
        /// si-sr, si-tr, ti-sr, or ti-tr.
        #[arg(long)]
        format: String,
        /// Text instruction (ti-* formats).
        #[arg(long)]
        text: Option<String>,
        /// Speech instruction as space-separated units (si-* formats).
        #[arg(long)]
        units: Option<String>,
        /// Speech instruction as a WAV file (si-* formats; needs --codebook).
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Write synthesized audio here when the response carries units.
        #[arg(long)]
        out_wav: Option<PathBuf>,
        /// Greedy decoding (top_k = 1).
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        temperature: Option<f32>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        top_p: Option<f32>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },

    /// Synthesize audio from a reduced unit sequence.
    Synth {
        /// Space-separated units, e.g. "3 17 4".
        #[arg(long)]
        units: Option<String>,
        /// Unit file to read from (see --line).
        #[arg(long)]
        units_file: Option<PathBuf>,
        /// Zero-based utterance index within --units-file.
        #[arg(long, default_value_t = 0)]
        line: usize,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Sample responses for a prompt file and report the well-formed rate.
    EvalFormat {
        /// JSON-lines: {"format": "...", "text": "..."} or {"format": "...", "units": [...]}.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long)]
        greedy: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print on stdout and exit 0; real usage
            // errors land on stderr with exit code 1
            let is_usage = e.use_stderr();
            let _ = e.print();
            return if is_usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let class = if err.is_data_error() { "data" } else { "internal" };
            let line = serde_json::json!({ "error": err.to_string(), "class": class });
            eprintln!("{line}");
            ExitCode::from(if err.is_data_error() { 2 } else { 3 })
        }
    }
}
