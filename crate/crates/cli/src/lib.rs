//! `refrank` command line.
//!
//! Every verb is deterministic given its flags and seed. Commands that take a
//! store fall back to a generated synthetic store when `--store` is absent,
//! so the whole pipeline runs without any exported embeddings.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use refrank_core::afs::LossMode;
use refrank_core::session::{Anchor, ExplicitMode, SessionConfig, Strategy};
use refrank_core::{RocchioParams, DEFAULT_SEED};
use serde::Serialize;

pub use commands::run;

#[derive(Debug, Parser)]
#[command(name = "refrank", version, about = "Text-to-image retrieval with relevance feedback")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate a store directory, optionally rewriting it canonically.
    Ingest(IngestArgs),
    /// Run every query through a feedback strategy and write metrics.
    Eval(EvalArgs),
    /// Evaluate a grid of strategies and Rocchio settings.
    Ablate(AblateArgs),
    /// Train the attentive feedback summarizer.
    TrainAfs(TrainAfsArgs),
    /// Per-patch and per-token attention saliency for one query.
    Saliency(SaliencyArgs),
    /// 2-D PCA projection of query, image and summarizer embeddings.
    Pca(PcaArgs),
    /// Generate a synthetic store.
    Synth(SynthArgs),
    /// Start the HTTP session API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SeedArgs {
    /// Seed for every random choice.
    #[arg(long, env = "REFRANK_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StoreArgs {
    /// Store directory; without it a synthetic store is generated from the seed.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Items in the generated synthetic store.
    #[arg(long, default_value_t = 500)]
    pub synth_items: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RocchioArgs {
    /// Weight of the current query.
    #[arg(long, default_value_t = 0.8)]
    pub alpha: f64,
    /// Weight of the positive vector.
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    /// Weight of the negative vector.
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Softmax temperature over similarities.
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Feedback items per turn.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

impl RocchioArgs {
    pub fn params(&self) -> RocchioParams {
        RocchioParams { alpha: self.alpha, beta: self.beta, gamma: self.gamma, tau: self.tau, k: self.k }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SessionArgs {
    /// none, prf_original, prf_extended, grf, afs, afs_prf or explicit.
    #[arg(long, default_value = "none")]
    pub strategy: Strategy,
    #[command(flatten)]
    pub rocchio: RocchioArgs,
    /// Items shown per turn; raised to k when smaller.
    #[arg(long, default_value_t = 10)]
    pub k_display: usize,
    /// Embedding refined in later turns: previous or original.
    #[arg(long, default_value = "previous")]
    pub anchor: Anchor,
    /// Explicit caption folding: running or pairwise.
    #[arg(long, default_value = "running")]
    pub explicit_mode: ExplicitMode,
    /// AFS checkpoint directory (required by afs and afs_prf).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl SessionArgs {
    pub fn config(&self, seed: u64) -> SessionConfig {
        let rocchio = self.rocchio.params();
        SessionConfig {
            strategy: self.strategy,
            rocchio,
            k_display: self.k_display.max(rocchio.k),
            anchor: self.anchor,
            explicit_mode: self.explicit_mode,
            seed,
            ..SessionConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IngestArgs {
    /// Store directory to check.
    pub store: PathBuf,
    /// Write a canonical copy here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    #[command(flatten)]
    pub session: SessionArgs,
    /// Feedback turns per query (turn 1 is the plain ranking).
    #[arg(long, default_value_t = 2)]
    pub turns: usize,
    /// Evaluate only the first n queries.
    #[arg(long)]
    pub max_queries: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArgs,
    /// Run directory for config.json, metrics.json and runs.jsonl.
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Strategies, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "prf_extended")]
    pub strategies: Vec<Strategy>,
    /// An alpha,beta,gamma triple; repeat the flag for more.
    #[arg(long = "weights", value_parser = parse_weights, default_value = "0.8,0.1,0.1")]
    pub weights: Vec<(f64, f64, f64)>,
    /// Temperatures, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    pub taus: Vec<f64>,
    /// Feedback sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "5")]
    pub ks: Vec<usize>,
    /// Feedback turns per query.
    #[arg(long, default_value_t = 2)]
    pub turns: usize,
    /// Evaluate only the first n queries.
    #[arg(long)]
    pub max_queries: Option<usize>,
    /// AFS checkpoint directory (required by afs and afs_prf).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArgs,
    /// Run directory for config.json, ablation.json and ablation.csv.
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
}

fn parse_weights(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected alpha,beta,gamma, got {s:?}")),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainAfsArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Loss components: img, cap or both.
    #[arg(long, default_value = "img")]
    pub loss: LossMode,
    /// Attention heads; must divide the token width.
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Feedback items per training example.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Add feed-forward sublayers.
    #[arg(long)]
    pub ffn: bool,
    /// Maximum epochs.
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Examples per optimizer step.
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Peak learning rate (cosine annealed to 0).
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Decoupled weight decay.
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Share of training items held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[command(flatten)]
    pub seed: SeedArgs,
    /// Checkpoint directory; history.json is written next to the tensors.
    #[arg(long, default_value = "checkpoints/afs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// AFS checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Caption id of the query.
    #[arg(long)]
    pub query_id: String,
    /// Image features only (no synthetic captions).
    #[arg(long)]
    pub prf: bool,
    /// Feedback items.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[command(flatten)]
    pub seed: SeedArgs,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PcaArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Adds summarizer embeddings when given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image features only for the summarizer points.
    #[arg(long)]
    pub prf: bool,
    /// Project only the first n queries.
    #[arg(long)]
    pub max_queries: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArgs,
    /// CSV with columns x, y, kind, id.
    #[arg(long, default_value = "pca.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Eval,
    Train,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Store directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Images in the store.
    #[arg(long, default_value_t = 500)]
    pub n_items: usize,
    /// Global embedding width.
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Token feature width.
    #[arg(long, default_value_t = 16)]
    pub d_t: usize,
    /// Patches per image.
    #[arg(long, default_value_t = 9)]
    pub p: usize,
    /// Synthetic caption tokens.
    #[arg(long, default_value_t = 12)]
    pub s: usize,
    /// Query tokens.
    #[arg(long, default_value_t = 12)]
    pub s_q: usize,
    /// Human captions per image.
    #[arg(long, default_value_t = 5)]
    pub captions_per_item: usize,
    /// Noise of image views around their concept.
    #[arg(long, default_value_t = 0.3)]
    pub sigma_image: f64,
    /// Noise of caption views around their concept.
    #[arg(long, default_value_t = 0.4)]
    pub sigma_caption: f64,
    /// Modality gap.
    #[arg(long, default_value_t = 0.25)]
    pub gap: f64,
    /// Concept clusters (0 draws concepts uniformly).
    #[arg(long, default_value_t = 50)]
    pub n_clusters: usize,
    /// Spread of concepts around their cluster centre.
    #[arg(long, default_value_t = 0.3)]
    pub cluster_spread: f64,
    /// Noise added to token features.
    #[arg(long, default_value_t = 0.5)]
    pub token_noise: f64,
    /// eval or train world split.
    #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
    pub split: SplitArg,
    #[command(flatten)]
    pub seed: SeedArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// AFS checkpoint; without it afs strategies are rejected per request.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Port to bind.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Session histories are written here on shutdown.
    #[arg(long, default_value = "sessions.json")]
    pub session_log: PathBuf,
    #[command(flatten)]
    pub seed: SeedArgs,
}
