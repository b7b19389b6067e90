//! Whole-query-set evaluation and parameter grids.
//!
//! The query set is the first human caption of every item; the item owning
//! the caption is the ground truth. Each query runs as its own session, so
//! evaluation exercises exactly the code path of interactive use.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranker::{MetricsError, MetricsReport};
use crate::rocchio::RocchioParams;
use crate::session::{SessionConfig, SessionContext, SessionError, SessionState, Strategy};
use crate::store::EmbeddingStore;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query {query_id}: {source}")]
    Session { query_id: String, source: SessionError },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("the query set is empty")]
    NoQueries,
    #[error("the ablation grid is empty")]
    EmptyGrid,
    #[error("turns must be at least 1")]
    ZeroTurns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub session: SessionConfig,
    pub turns: usize,
    /// Evaluate only the first `n` queries.
    pub max_queries: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { session: SessionConfig::default(), turns: 2, max_queries: None }
    }
}

impl EvalConfig {
    pub fn new(strategy: Strategy, turns: usize) -> Self {
        Self { session: SessionConfig::new(strategy), turns, max_queries: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTurn {
    pub turn: usize,
    pub ranked_ids: Vec<String>,
    pub gt_rank: Option<usize>,
}

/// One line of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRun {
    pub query_id: String,
    pub item_id: String,
    pub turns: Vec<RunTurn>,
}

/// Caption ids of the evaluation queries, in store order.
pub fn query_ids(store: &EmbeddingStore) -> Vec<String> {
    store
        .items
        .iter()
        .filter_map(|it| it.human_captions.first().map(|c| c.caption_id.clone()))
        .collect()
}

/// Runs every query through a session and aggregates per-turn metrics.
pub fn evaluate(ctx: &SessionContext, config: &EvalConfig) -> Result<(MetricsReport, Vec<QueryRun>), EvalError> {
    if config.turns == 0 {
        return Err(EvalError::ZeroTurns);
    }
    let mut ids = query_ids(ctx.store);
    if let Some(n) = config.max_queries {
        ids.truncate(n);
    }
    if ids.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let runs: Vec<QueryRun> = ids
        .par_iter()
        .map(|id| {
            let wrap = |source| EvalError::Session { query_id: id.clone(), source };
            let mut state = SessionState::new(ctx, id, config.session.clone()).map_err(wrap)?;
            let turns = state.run_multi_turn(ctx, config.turns).map_err(wrap)?;
            let item_id = state.gt_item.map(|i| ctx.store.items[i].item_id.clone()).unwrap_or_default();
            Ok(QueryRun {
                query_id: id.clone(),
                item_id,
                turns: turns
                    .into_iter()
                    .map(|t| RunTurn {
                        turn: t.turn,
                        ranked_ids: t.candidates.candidates.into_iter().map(|c| c.item_id).collect(),
                        gt_rank: t.gt_rank,
                    })
                    .collect(),
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let per_turn: Vec<Vec<Option<usize>>> =
        (0..config.turns).map(|t| runs.iter().map(|r| r.turns[t].gt_rank).collect()).collect();
    let report = MetricsReport::from_turn_ranks(config.session.strategy.name(), &per_turn)?;
    Ok((report, runs))
}

/// Cartesian grid over Rocchio settings and strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub strategies: Vec<Strategy>,
    /// `(alpha, beta, gamma)` triples.
    pub weights: Vec<(f64, f64, f64)>,
    pub taus: Vec<f64>,
    pub ks: Vec<usize>,
}

impl AblationGrid {
    pub fn len(&self) -> usize {
        self.strategies.len() * self.weights.len() * self.taus.len() * self.ks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every grid point in a fixed order: strategy, weights, tau, k.
    pub fn points(&self) -> Vec<(Strategy, RocchioParams)> {
        let mut out = Vec::with_capacity(self.len());
        for &s in &self.strategies {
            for &(alpha, beta, gamma) in &self.weights {
                for &tau in &self.taus {
                    for &k in &self.ks {
                        out.push((s, RocchioParams { alpha, beta, gamma, tau, k }));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub params: RocchioParams,
    pub report: MetricsReport,
}

/// Evaluates `base` at every grid point; the display depth grows with K so
/// the feedback set always fits.
pub fn ablate(ctx: &SessionContext, base: &EvalConfig, grid: &AblationGrid) -> Result<Vec<AblationRow>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    grid.points()
        .into_iter()
        .map(|(strategy, params)| {
            let mut cfg = base.clone();
            cfg.session.strategy = strategy;
            cfg.session.rocchio = params;
            cfg.session.k_display = cfg.session.k_display.max(params.k);
            let (report, _) = evaluate(ctx, &cfg)?;
            Ok(AblationRow { strategy, params, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::testutil::token_store;

    #[test]
    fn none_with_one_turn_is_the_baseline() {
        let store = token_store(12, 4);
        let ctx = SessionContext::new(&store, None);
        let (report, runs) = evaluate(&ctx, &EvalConfig::new(Strategy::None, 1)).unwrap();
        assert_eq!(report.n_queries, 12);
        assert_eq!(runs.len(), 12);
        let ranks: Vec<Option<usize>> = runs.iter().map(|r| r.turns[0].gt_rank).collect();
        assert_eq!(report.mrr_at_5, crate::ranker::mrr_at_k(&ranks, 5).unwrap());
        assert!(report.is_ordered());
    }

    #[test]
    fn identity_grid_cells_equal_baseline() {
        let store = token_store(10, 4);
        let ctx = SessionContext::new(&store, None);
        let (base, _) = evaluate(&ctx, &EvalConfig::new(Strategy::None, 2)).unwrap();
        let grid = AblationGrid {
            strategies: vec![Strategy::PrfExtended, Strategy::Grf, Strategy::PrfOriginal],
            weights: vec![(1.0, 0.0, 0.0)],
            taus: vec![0.05, 0.5],
            ks: vec![1, 7],
        };
        let rows = ablate(&ctx, &EvalConfig::new(Strategy::None, 2), &grid).unwrap();
        assert_eq!(rows.len(), grid.len());
        for r in rows {
            assert_eq!(r.report.per_turn, base.per_turn);
        }
        let empty = AblationGrid { ks: vec![], ..grid };
        assert!(matches!(ablate(&ctx, &EvalConfig::default(), &empty), Err(EvalError::EmptyGrid)));
    }
}
