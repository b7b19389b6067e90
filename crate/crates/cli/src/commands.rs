use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use refrank_core::afs::{load_checkpoint, save_checkpoint, train, AfsConfig, AfsModel, TrainConfig};
use refrank_core::eval::{ablate, evaluate, AblationGrid, EvalConfig};
use refrank_core::pca::project_store;
use refrank_core::session::{SessionConfig, SessionContext, SessionState, Strategy};
use refrank_core::store::{load_store, validate_store, write_store, EmbeddingStore};
use refrank_core::synth::{generate, SynthConfig, SynthSplit};
use refrank_service::{serve, shutdown_signal, AppState, SaliencyView};
use serde::Serialize;
use serde_json::json;

use crate::{
    AblateArgs, Cli, Command, EvalArgs, IngestArgs, PcaArgs, SaliencyArgs, ServeArgs, SplitArg, StoreArgs, SynthArgs,
    TrainAfsArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::TrainAfs(a) => train_afs(&a),
        Command::Saliency(a) => saliency(&a),
        Command::Pca(a) => pca(&a),
        Command::Synth(a) => synth(&a),
        Command::Serve(a) => serve_cmd(&a),
    }
}

fn open_store(args: &StoreArgs, seed: u64, split: SynthSplit) -> Result<EmbeddingStore> {
    match &args.store {
        Some(path) => load_store(path).with_context(|| format!("loading store {}", path.display())),
        None => {
            log::info!("no --store given; generating a synthetic {split:?} store ({} items, seed {seed})", args.synth_items);
            Ok(generate(&SynthConfig { n_items: args.synth_items, seed, split, ..SynthConfig::default() })?)
        }
    }
}

fn open_model(checkpoint: Option<&Path>) -> Result<Option<AfsModel>> {
    checkpoint
        .map(|dir| load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display())))
        .transpose()
}

fn require_model(strategies: &[Strategy], checkpoint: Option<&Path>) -> Result<()> {
    if let Some(s) = strategies.iter().find(|s| s.needs_model()) {
        if checkpoint.is_none() {
            bail!("strategy {s} needs --checkpoint");
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let store = load_store(&a.store).with_context(|| format!("loading store {}", a.store.display()))?;
    let report = validate_store(&store);
    if !report.is_valid() {
        bail!("store {} has {} violations:\n{report}", a.store.display(), report.violations.len());
    }
    let summary = json!({
        "items": store.len(),
        "captions": store.caption_embeddings.rows(),
        "d": store.meta.d,
        "d_t": store.meta.d_t,
        "backbone": store.meta.backbone,
        "split": store.meta.split,
        "image_tokens": store.image_token_features.is_some(),
        "synthetic_caption_tokens": store.synthetic_caption_token_features.is_some(),
        "query_tokens": store.query_token_features.is_some(),
        "image_multivector": store.image_multivector.is_some(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(out) = &a.out {
        write_store(&store, out)?;
        log::info!("wrote canonical copy to {}", out.display());
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let seed = a.seed.seed;
    require_model(&[a.session.strategy], a.session.checkpoint.as_deref())?;
    let config = EvalConfig { session: a.session.config(seed), turns: a.turns, max_queries: a.max_queries };
    let store = open_store(&a.store, seed, SynthSplit::Eval)?;
    let model = open_model(a.session.checkpoint.as_deref())?;
    let ctx = SessionContext::new(&store, model.as_ref());
    let (report, runs) = evaluate(&ctx, &config)?;

    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &json!({ "command": "eval", "flags": a, "resolved": config }))?;
    write_json(&a.out.join("metrics.json"), &report)?;
    let mut lines = String::new();
    for r in &runs {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(a.out.join("runs.jsonl"), lines)?;
    for t in &report.per_turn {
        println!(
            "{} turn {}: hits@1 {:.4} hits@5 {:.4} mrr@5 {:.4} ({} queries)",
            report.strategy, t.turn, t.hits_at_1, t.hits_at_5, t.mrr_at_5, t.n_queries
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationCsvRow {
    strategy: String,
    alpha: f64,
    beta: f64,
    gamma: f64,
    tau: f64,
    k: usize,
    turn: usize,
    #[serde(rename = "hits@1")]
    hits_at_1: f64,
    #[serde(rename = "hits@5")]
    hits_at_5: f64,
    #[serde(rename = "mrr@5")]
    mrr_at_5: f64,
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let seed = a.seed.seed;
    require_model(&a.strategies, a.checkpoint.as_deref())?;
    let grid = AblationGrid { strategies: a.strategies.clone(), weights: a.weights.clone(), taus: a.taus.clone(), ks: a.ks.clone() };
    let mut base = EvalConfig { turns: a.turns, max_queries: a.max_queries, ..EvalConfig::default() };
    base.session.seed = seed;
    let store = open_store(&a.store, seed, SynthSplit::Eval)?;
    let model = open_model(a.checkpoint.as_deref())?;
    let ctx = SessionContext::new(&store, model.as_ref());
    let rows = ablate(&ctx, &base, &grid)?;

    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &json!({ "command": "ablate", "flags": a, "grid": grid, "base": base }))?;
    write_json(&a.out.join("ablation.json"), &rows)?;
    let mut csv = csv::Writer::from_path(a.out.join("ablation.csv"))?;
    for r in &rows {
        for t in &r.report.per_turn {
            csv.serialize(AblationCsvRow {
                strategy: r.strategy.to_string(),
                alpha: r.params.alpha,
                beta: r.params.beta,
                gamma: r.params.gamma,
                tau: r.params.tau,
                k: r.params.k,
                turn: t.turn,
                hits_at_1: t.hits_at_1,
                hits_at_5: t.hits_at_5,
                mrr_at_5: t.mrr_at_5,
            })?;
        }
    }
    csv.flush()?;
    println!("{} grid points written to {}", rows.len(), a.out.display());
    Ok(())
}

fn train_afs(a: &TrainAfsArgs) -> Result<()> {
    let seed = a.seed.seed;
    let store = open_store(&a.store, seed, SynthSplit::Train)?;
    let mut config = AfsConfig::for_store(&store, a.heads, a.k, seed)?;
    config.loss_mode = a.loss;
    config.ffn = a.ffn;
    let tc = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        patience: a.patience,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed,
        val_fraction: a.val_fraction,
        ..TrainConfig::default()
    };
    let (params, history) = train(&store, &config, &tc)?;
    let model = AfsModel::new(config, params)?;
    save_checkpoint(&model, &a.out)?;
    write_json(&a.out.join("history.json"), &history)?;
    write_json(&a.out.join("train_config.json"), &json!({ "flags": a, "train": tc }))?;
    println!(
        "trained {} epochs (best {}, early stop {}): train loss {:.4} -> {:.4}; checkpoint in {}",
        history.epochs.len(),
        history.best_epoch,
        history.stopped_early,
        history.first_train_loss().unwrap_or(f64::NAN),
        history.last_train_loss().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn saliency(a: &SaliencyArgs) -> Result<()> {
    let seed = a.seed.seed;
    let store = open_store(&a.store, seed, SynthSplit::Eval)?;
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let ctx = SessionContext::new(&store, Some(&model));
    let strategy = if a.prf { Strategy::AfsPrf } else { Strategy::Afs };
    let mut config = SessionConfig { seed, ..SessionConfig::new(strategy) };
    config.rocchio.k = a.k;
    config.k_display = config.k_display.max(a.k);
    let mut state = SessionState::new(&ctx, &a.query_id, config)?;
    state.run_multi_turn(&ctx, 2)?;
    let items: Vec<SaliencyView> = state.turns[1]
        .saliency
        .as_deref()
        .unwrap_or_default()
        .iter()
        .map(|s| SaliencyView::new(&store, s))
        .collect();
    let out = json!({ "query_id": a.query_id, "strategy": strategy, "items": items });
    match &a.out {
        Some(path) => write_json(path, &out),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{}", serde_json::to_string_pretty(&out)?)?;
            Ok(())
        }
    }
}

fn pca(a: &PcaArgs) -> Result<()> {
    let seed = a.seed.seed;
    let store = open_store(&a.store, seed, SynthSplit::Eval)?;
    let model = open_model(a.checkpoint.as_deref())?;
    let (fit, rows) = project_store(&store, model.as_ref(), !a.prf, a.max_queries, seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut csv = csv::Writer::from_path(&a.out)?;
    for r in &rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    println!(
        "{} points; component variances {:.6} and {:.6}; written to {}",
        rows.len(),
        fit.variances[0],
        fit.variances[1],
        a.out.display()
    );
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let config = SynthConfig {
        n_items: a.n_items,
        d: a.d,
        d_t: a.d_t,
        p: a.p,
        s: a.s,
        s_q: a.s_q,
        captions_per_item: a.captions_per_item,
        sigma_image: a.sigma_image,
        sigma_caption: a.sigma_caption,
        gap: a.gap,
        n_clusters: a.n_clusters,
        cluster_spread: a.cluster_spread,
        token_noise: a.token_noise,
        seed: a.seed.seed,
        split: match a.split {
            SplitArg::Eval => SynthSplit::Eval,
            SplitArg::Train => SynthSplit::Train,
        },
    };
    let store = generate(&config)?;
    write_store(&store, &a.out)?;
    println!("wrote {} items to {}", store.len(), a.out.display());
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let seed = a.seed.seed;
    let store = open_store(&a.store, seed, SynthSplit::Eval)?;
    let model = open_model(a.checkpoint.as_deref())?;
    if model.is_none() {
        log::warn!("no checkpoint loaded; afs strategies will be rejected");
    }
    let state = AppState::new(store, model);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("listening on {}", listener.local_addr()?);
        serve(listener, state, shutdown_signal(), Some(&a.session_log)).await?;
        Ok(())
    })
}
