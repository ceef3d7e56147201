//! Thresholded nearest-class-mean (NCM) and prototypical-network baselines
//! with online prototype updates.
//!
//! Both report the distance to the nearest prototype as their novelty score,
//! so higher means more novel, as with the FLOWR posterior.

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, Sample};
use crate::encoder::Encoder;
use crate::error::{FlowrError, Result};
use crate::gaussian::{log_sum_exp, sq_dist};
use crate::model::PredictionRecord;

/// Running class means.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrototypeState {
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
    dim: usize,
    /// Novelty distance cutoff, kept for reference; evaluation applies its own.
    pub threshold: Option<f64>,
}

impl PrototypeState {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn mean(&self, n: usize) -> Vec<f64> {
        let c = self.counts[n] as f64;
        self.sums[n].iter().map(|s| s / c).collect()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        (0..self.n_classes()).map(|n| self.mean(n)).collect()
    }

    fn distances_sq(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(FlowrError::DimensionMismatch {
                expected: self.dim,
                actual: z.len(),
            });
        }
        Ok((0..self.n_classes()).map(|n| sq_dist(z, &self.mean(n))).collect())
    }
}

/// Add `z` to class `y` (1-based); `y = N + 1` appends a class with mean `z`.
pub fn prototype_update(state: &mut PrototypeState, z: &[f64], y: usize) -> Result<()> {
    if z.len() != state.dim {
        return Err(FlowrError::DimensionMismatch {
            expected: state.dim,
            actual: z.len(),
        });
    }
    let n = state.n_classes();
    if y == n + 1 {
        state.sums.push(z.to_vec());
        state.counts.push(1);
    } else if y >= 1 && y <= n {
        for (s, v) in state.sums[y - 1].iter_mut().zip(z) {
            *s += v;
        }
        state.counts[y - 1] += 1;
    } else {
        return Err(FlowrError::LabelOutOfRange { label: y, next: n + 1 });
    }
    Ok(())
}

/// Softmax over negative squared distances and the distance to the nearest
/// prototype. With no classes the probabilities are empty and the score is
/// `+inf`.
pub fn protonet_predict(state: &PrototypeState, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    let d2 = state.distances_sq(z)?;
    if d2.is_empty() {
        return Ok((Vec::new(), f64::INFINITY));
    }
    let logits: Vec<f64> = d2.iter().map(|d| -d).collect();
    let lse = log_sum_exp(&logits);
    let probs = logits.iter().map(|l| (l - lse).exp()).collect();
    let nearest = d2.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((probs, nearest.sqrt()))
}

/// Nearest mean (1-based) and its distance; `(None, +inf)` with no classes.
pub fn ncm_predict(state: &PrototypeState, z: &[f64]) -> Result<(Option<usize>, f64)> {
    let d2 = state.distances_sq(z)?;
    let mut best: Option<(usize, f64)> = None;
    for (n, &d) in d2.iter().enumerate() {
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((n, d));
        }
    }
    Ok(match best {
        Some((n, d)) => (Some(n + 1), d.sqrt()),
        None => (None, f64::INFINITY),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Ncm,
    ProtoNet,
}

/// Encoder plus running prototypes, driven through the same
/// predict-then-update protocol as the FLOWR agent.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineAgent {
    pub kind: BaselineKind,
    pub encoder: Encoder,
    pub state: PrototypeState,
}

impl BaselineAgent {
    pub fn new(kind: BaselineKind, encoder: Encoder) -> Self {
        let d = encoder.d_out();
        Self {
            kind,
            encoder,
            state: PrototypeState::new(d),
        }
    }

    /// Prototypes from a support set with dense labels.
    pub fn with_support(kind: BaselineKind, encoder: Encoder, support: &[Sample]) -> Result<Self> {
        crate::model::support_class_count(support)?;
        let mut agent = Self::new(kind, encoder);
        let mut sorted: Vec<&Sample> = support.iter().collect();
        sorted.sort_by_key(|s| s.label);
        for s in sorted {
            agent.update(&s.features, s.label)?;
        }
        Ok(agent)
    }

    /// Prototypes of `classes` (dataset labels, in model order) built
    /// offline from every point of those classes in `dataset`.
    pub fn from_dataset(
        kind: BaselineKind,
        encoder: Encoder,
        dataset: &EmbeddingDataset,
        classes: &[usize],
    ) -> Result<Self> {
        let by_class = dataset.class_indices();
        let mut agent = Self::new(kind, encoder);
        for (k, &c) in classes.iter().enumerate() {
            let idx = by_class.get(c.wrapping_sub(1)).ok_or(FlowrError::UnknownClass {
                label: c,
                n_classes: by_class.len(),
            })?;
            for &i in idx {
                agent.update(&dataset.samples()[i].features, k + 1)?;
            }
        }
        Ok(agent)
    }

    /// Prediction in the FLOWR record layout. The novel slot is listed last
    /// with probability 0; `predicted` is the known argmax, or `N + 1` when
    /// there are no classes yet.
    pub fn predict(&self, x: &[f64]) -> Result<PredictionRecord> {
        let z = self.encoder.encode(x);
        let n = self.state.n_classes();
        let (mut probs, argmax, score) = match self.kind {
            BaselineKind::ProtoNet => {
                let (probs, score) = protonet_predict(&self.state, &z)?;
                let argmax = argmax_1based(&probs);
                (probs, argmax, score)
            }
            BaselineKind::Ncm => {
                let (arg, score) = ncm_predict(&self.state, &z)?;
                let mut probs = vec![0.0; n];
                if let Some(a) = arg {
                    probs[a - 1] = 1.0;
                }
                (probs, arg, score)
            }
        };
        if n == 0 {
            probs.push(1.0);
        } else {
            probs.push(0.0);
        }
        Ok(PredictionRecord {
            log_probs: probs.iter().map(|p| p.ln()).collect(),
            probs,
            predicted: argmax.unwrap_or(n + 1),
            known_argmax: argmax,
            novelty_score: score,
            true_label: None,
            n_at_prediction: n,
        })
    }

    pub fn update(&mut self, x: &[f64], y: usize) -> Result<()> {
        let z = self.encoder.encode(x);
        prototype_update(&mut self.state, &z, y)
    }

    /// Predict then reveal the label, for every query in order.
    pub fn run_episode(&mut self, queries: &[Sample]) -> Result<Vec<PredictionRecord>> {
        let mut out = Vec::with_capacity(queries.len());
        for (index, q) in queries.iter().enumerate() {
            let wrap = |e| FlowrError::Query {
                index,
                source: Box::new(e),
            };
            let mut rec = self.predict(&q.features).map_err(wrap)?;
            rec.true_label = Some(q.label);
            self.update(&q.features, q.label).map_err(wrap)?;
            out.push(rec);
        }
        Ok(out)
    }
}

fn argmax_1based(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in v.iter().enumerate() {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i + 1)
}
