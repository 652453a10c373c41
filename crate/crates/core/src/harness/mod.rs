//! Batch experiments: many simulated sessions under one fusion policy,
//! reduced to per-round mean Recall@10 / Hits@10 curves.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::fusion::{aggregate, FusionPolicy, RoundMeans, TurnMetrics};
use crate::gallery::{Gallery, ImageId};
use crate::oracles::OracleSuite;
use crate::session::{Engine, EngineSettings, SessionMode, SessionState, SessionStore};

pub use config::{
    ImageConfig, OracleConfig, OracleKind, RunConfig, ServerConfig, SyntheticConfig,
    TargetsConfig,
};

/// One simulated session to run: target and opening description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub target: ImageId,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub index: usize,
    pub session_id: String,
    pub target: ImageId,
    pub metrics: Vec<TurnMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub policy: FusionPolicy,
    /// In job order.
    pub sessions: Vec<SessionOutcome>,
    /// Means over the sessions that did not fail.
    pub curve: Vec<RoundMeans>,
}

impl BatchReport {
    pub fn failures(&self) -> usize {
        self.sessions.iter().filter(|s| s.error.is_some()).count()
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("round,mean_recall10,mean_hits10\n");
        for r in &self.curve {
            writeln!(out, "{},{},{}", r.round, r.mean_recall10, r.mean_hits10).unwrap();
        }
        out
    }

    /// One line per round with the means, then one line per session turn.
    pub fn metrics_jsonl(&self) -> String {
        let ok = self.sessions.len() - self.failures();
        let mut out = String::new();
        for r in &self.curve {
            let line = serde_json::json!({
                "kind": "round",
                "policy": self.policy.to_string(),
                "round": r.round,
                "mean_recall10": r.mean_recall10,
                "mean_hits10": r.mean_hits10,
                "sessions": ok,
            });
            writeln!(out, "{line}").unwrap();
        }
        for s in &self.sessions {
            if let Some(e) = &s.error {
                let line = serde_json::json!({
                    "kind": "failure",
                    "session": s.index,
                    "session_id": s.session_id,
                    "target": s.target,
                    "error": e,
                });
                writeln!(out, "{line}").unwrap();
            }
            for m in &s.metrics {
                let line = serde_json::json!({
                    "kind": "turn",
                    "session": s.index,
                    "session_id": s.session_id,
                    "target": s.target,
                    "round": m.round,
                    "recall_at_10": m.recall_at_10,
                    "hits_at_10": m.hits_at_10,
                    "target_rank_dialog": m.target_rank_dialog,
                    "target_rank_image": m.target_rank_image,
                });
                writeln!(out, "{line}").unwrap();
            }
        }
        out
    }
}

/// Checks an emitted curves file: means in [0, 1], rounds consecutive from 1,
/// and the hits column non-decreasing.
pub fn verify_curves_csv(text: &str) -> Result<usize> {
    let bad = |m: String| Err(Error::Config(format!("curves artifact: {m}")));
    let mut lines = text.lines();
    if lines.next() != Some("round,mean_recall10,mean_hits10") {
        return bad("missing header".into());
    }
    let mut prev_hits = 0.0f64;
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        let parsed = (cols.len() == 3)
            .then(|| {
                Some((
                    cols[0].parse::<usize>().ok()?,
                    cols[1].parse::<f64>().ok()?,
                    cols[2].parse::<f64>().ok()?,
                ))
            })
            .flatten();
        let Some((round, recall, hits)) = parsed else {
            return bad(format!("unparseable row {line:?}"));
        };
        if round != i + 1 {
            return bad(format!("row {} has round {round}", i + 1));
        }
        if !(0.0..=1.0).contains(&recall) || !(0.0..=1.0).contains(&hits) {
            return bad(format!("round {round} mean outside [0, 1]"));
        }
        if hits < prev_hits {
            return bad(format!("hits decreased at round {round}"));
        }
        prev_hits = hits;
        rows += 1;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub rounds: usize,
    pub stop_on_hit: bool,
    /// 0 picks the CPU count.
    pub workers: usize,
}

/// Runs one simulated session to the round cap, or to the first hit.
pub fn run_session(
    engine: &Engine,
    session_id: &str,
    job: &Job,
    stop_on_hit: bool,
) -> Result<SessionState> {
    if let Some(store) = engine.store() {
        store.remove(session_id)?;
    }
    let mut s = engine.open_session_as(
        session_id,
        &job.description,
        SessionMode::Simulated,
        Some(job.target.clone()),
        engine.settings().generator_seed,
    )?;
    while !s.is_finished() {
        let record = engine.advance_turn(&mut s)?;
        if stop_on_hit && record.metrics.as_ref().is_some_and(|m| m.hits_at_10) {
            break;
        }
    }
    Ok(s)
}

pub fn batch_session_id(policy: FusionPolicy, index: usize) -> String {
    format!("p{}_{}-{index:05}", policy.dial_num(), policy.image_num())
}

/// Runs every job on a bounded pool. Failed sessions are reported, not fatal.
pub fn run_batch(engine: &Engine, jobs: &[Job], opts: BatchOptions) -> Result<BatchReport> {
    if jobs.is_empty() {
        return Err(Error::Config("target list is empty".into()));
    }
    let policy = engine.settings().policy;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let sessions: Vec<SessionOutcome> = pool.install(|| {
        jobs.par_iter()
            .enumerate()
            .map(|(index, job)| {
                let session_id = batch_session_id(policy, index);
                match run_session(engine, &session_id, job, opts.stop_on_hit) {
                    Ok(s) => SessionOutcome {
                        index,
                        session_id,
                        target: job.target.clone(),
                        metrics: s.metrics(),
                        error: None,
                    },
                    Err(e) => {
                        warn!(session = %session_id, error = %e, "session failed");
                        SessionOutcome {
                            index,
                            session_id,
                            target: job.target.clone(),
                            metrics: Vec::new(),
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    let ok: Vec<Vec<TurnMetrics>> = sessions
        .iter()
        .filter(|s| s.error.is_none())
        .map(|s| s.metrics.clone())
        .collect();
    let curve = aggregate(&ok, opts.rounds);
    Ok(BatchReport {
        policy,
        sessions,
        curve,
    })
}

/// Everything a batch run needs, resolved from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub gallery: Arc<Gallery>,
    pub oracles: OracleSuite,
    pub settings: EngineSettings,
    pub jobs: Vec<Job>,
    pub options: BatchOptions,
    pub store: Option<SessionStore>,
}

impl Experiment {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let gallery = Arc::new(cfg.load_gallery()?);
        let oracles = cfg.oracle_suite()?;
        let settings = cfg.engine_settings()?;
        let jobs = cfg
            .resolve_targets(&gallery)?
            .into_iter()
            .map(|target| {
                Ok(Job {
                    description: cfg.opening_description(&gallery, &target)?,
                    target,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Experiment {
            gallery,
            oracles,
            settings,
            jobs,
            options: BatchOptions {
                rounds: cfg.rounds,
                stop_on_hit: cfg.stop_on_hit,
                workers: cfg.workers,
            },
            store: cfg
                .persist_sessions
                .then(|| SessionStore::new(cfg.out_dir.join("sessions"))),
        })
    }

    pub fn engine(&self, policy: FusionPolicy) -> Result<Engine> {
        let settings = EngineSettings {
            policy,
            ..self.settings.clone()
        };
        let engine = Engine::new(self.gallery.clone(), self.oracles.clone(), settings)?;
        Ok(match &self.store {
            Some(s) => engine.with_store(s.clone()),
            None => engine,
        })
    }

    pub fn run(&self, policy: FusionPolicy) -> Result<BatchReport> {
        info!(%policy, sessions = self.jobs.len(), "running batch");
        run_batch(&self.engine(policy)?, &self.jobs, self.options)
    }

    /// The configured batch with only dialog-module candidates.
    pub fn run_drm_only(&self) -> Result<BatchReport> {
        self.run(FusionPolicy::dialog_only())
    }

    /// One batch per policy, `(10,0)` through `(0,10)`.
    pub fn sweep(&self) -> Result<Vec<BatchReport>> {
        FusionPolicy::sweep().into_iter().map(|p| self.run(p)).collect()
    }
}

/// Writes `<stem>.csv`-style artifacts: `curves{suffix}.csv` and
/// `metrics{suffix}.jsonl`, then re-reads the curves file to check it.
pub fn write_report(out_dir: &Path, report: &BatchReport, suffix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let curves = out_dir.join(format!("curves{suffix}.csv"));
    let metrics = out_dir.join(format!("metrics{suffix}.jsonl"));
    fs::write(&curves, report.curves_csv()).map_err(|e| Error::io(&curves, e))?;
    fs::write(&metrics, report.metrics_jsonl()).map_err(|e| Error::io(&metrics, e))?;
    let written = fs::read_to_string(&curves).map_err(|e| Error::io(&curves, e))?;
    verify_curves_csv(&written)?;
    Ok(vec![curves, metrics])
}

/// File suffix used for each policy in sweep mode, e.g. `_d7_i3`.
pub fn sweep_suffix(policy: FusionPolicy) -> String {
    format!("_d{}_i{}", policy.dial_num(), policy.image_num())
}
