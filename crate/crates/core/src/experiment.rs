//! Evaluation over sampled test episodes.
//!
//! Every episode draws from its own RNG stream, derived from the experiment
//! seed and the episode index, and results are gathered in episode order,
//! so outputs do not depend on the worker count.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineAgent, BaselineKind};
use crate::data::EmbeddingDataset;
use crate::error::{FlowrError, Result};
use crate::meta::{sample_lc_task, sample_sc_task, Episode, EpisodeConfig, MetaParams, Setting};
use crate::metrics::{
    accuracy_suite, episode_records, render_metric_table, roc_curve, score_set, threshold_at_tpr, AccuracySuite,
    OperatingPoint, RocPoint, ScoredQuery,
};
use crate::model::fine_tune_output_layer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Flowr,
    Ncm,
    ProtoNet,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Flowr => "flowr",
            Method::Ncm => "ncm",
            Method::ProtoNet => "protonet",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = FlowrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flowr" => Ok(Method::Flowr),
            "ncm" => Ok(Method::Ncm),
            "protonet" => Ok(Method::ProtoNet),
            other => Err(FlowrError::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub setting: Setting,
    pub method: Method,
    pub episode: EpisodeConfig,
    pub episodes: usize,
    pub seed: u64,
    pub tpr: f64,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    /// Output-layer fine-tuning steps on the support set (small context, FLOWR).
    pub fine_tune_steps: usize,
    pub fine_tune_step_size: f64,
    /// Dataset classes of the known-known classes, in model order (large context).
    pub known_classes: Vec<usize>,
}

/// RNG for episode `index`: the seed selects the key, the index the stream.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub method: Method,
    pub records: Vec<ScoredQuery>,
    pub operating_point: OperatingPoint,
    pub suite: AccuracySuite,
    pub roc: Vec<RocPoint>,
}

impl EvalOutput {
    pub fn metric_table(&self) -> String {
        render_metric_table(self.method.name(), &self.suite, &self.operating_point)
    }
}

fn sample_episode(dataset: &EmbeddingDataset, cfg: &EvalConfig, index: usize) -> Result<Episode> {
    let mut rng = episode_rng(cfg.seed, index);
    match cfg.setting {
        Setting::SmallContext => sample_sc_task(dataset, &cfg.episode, &mut rng),
        Setting::LargeContext => sample_lc_task(dataset, &cfg.known_classes, &cfg.episode, &mut rng),
    }
}

fn run_episode(
    params: &MetaParams,
    reference: Option<&EmbeddingDataset>,
    dataset: &EmbeddingDataset,
    cfg: &EvalConfig,
    index: usize,
) -> Result<Vec<ScoredQuery>> {
    let episode = sample_episode(dataset, cfg, index)?;
    let queries = episode.online_queries();
    let preds = match (cfg.method, cfg.setting) {
        (Method::Flowr, Setting::SmallContext) => {
            let mut state = params.small_context_state(&episode.support)?;
            if cfg.fine_tune_steps > 0 {
                state = fine_tune_output_layer(
                    &state,
                    &episode.support,
                    cfg.fine_tune_steps,
                    cfg.fine_tune_step_size,
                    true,
                )?
                .state;
            }
            state.run_episode(&queries)?
        }
        (Method::Flowr, Setting::LargeContext) => params.large_context_state()?.run_episode(&queries)?,
        (m, setting) => {
            let kind = if m == Method::Ncm {
                BaselineKind::Ncm
            } else {
                BaselineKind::ProtoNet
            };
            let mut agent = match setting {
                Setting::SmallContext => BaselineAgent::with_support(kind, params.encoder.clone(), &episode.support)?,
                Setting::LargeContext => {
                    let reference = reference.ok_or_else(|| {
                        FlowrError::Config(
                            "large-context baselines need a reference dataset for the known-known means".into(),
                        )
                    })?;
                    BaselineAgent::from_dataset(kind, params.encoder.clone(), reference, &cfg.known_classes)?
                }
            };
            agent.run_episode(&queries)?
        }
    };
    episode_records(index, episode.n_known, &preds)
}

/// Evaluate `params` on `cfg.episodes` sampled episodes and report metrics
/// at the pooled operating point. `reference` supplies the known-known
/// training data for large-context baselines.
pub fn evaluate(
    params: &MetaParams,
    dataset: &EmbeddingDataset,
    reference: Option<&EmbeddingDataset>,
    cfg: &EvalConfig,
) -> Result<EvalOutput> {
    if cfg.episodes == 0 {
        return Err(FlowrError::Config("at least one evaluation episode is required".into()));
    }
    if cfg.setting == Setting::LargeContext
        && cfg.method == Method::Flowr
        && params.n_known() != cfg.known_classes.len()
    {
        return Err(FlowrError::Config(format!(
            "model has {} known-known classes, evaluation lists {}",
            params.n_known(),
            cfg.known_classes.len()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| FlowrError::Config(format!("thread pool: {e}")))?;
    let per_episode: Vec<Result<Vec<ScoredQuery>>> = pool.install(|| {
        (0..cfg.episodes)
            .into_par_iter()
            .map(|i| run_episode(params, reference, dataset, cfg, i))
            .collect()
    });
    let mut records = Vec::new();
    for r in per_episode {
        records.extend(r?);
    }
    summarize(cfg.method, records, cfg.tpr)
}

/// Operating point, metrics and ROC from stored records.
pub fn summarize(method: Method, records: Vec<ScoredQuery>, tpr: f64) -> Result<EvalOutput> {
    let scores = score_set(&records)?;
    let operating_point = threshold_at_tpr(&scores.positives, tpr)?;
    let suite = accuracy_suite(&records, operating_point.threshold)?;
    let roc = roc_curve(&scores);
    Ok(EvalOutput {
        method,
        records,
        operating_point,
        suite,
        roc,
    })
}

/// One JSON object per line.
pub fn write_records(w: &mut impl Write, records: &[ScoredQuery]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(r: impl BufRead) -> Result<Vec<ScoredQuery>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| FlowrError::Format {
            offset: i as u64 + 1,
            message: format!("record line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}
