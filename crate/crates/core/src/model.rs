//! The online open-world agent: per-class Gaussian beliefs, a shared prior
//! for novel classes, and a CRP class prior, combined by Bayes' rule.

use serde::{Deserialize, Serialize};

use crate::crp::{predictive_weights, ClassCounts, CrpParams, NewClassCount};
use crate::data::Sample;
use crate::encoder::{AffineLayer, ClassEmbeddings, Encoder};
use crate::error::{FlowrError, Result};
use crate::gaussian::{
    check_dim, factor_to_natural, log_density_parts, log_sum_exp, sq_dist, NaturalStats, NoiseModel, SharedPrior,
};

/// Full agent state. Class `n` (1-based) lives at index `n - 1` of
/// `class_stats` and of the CRP counts; the first `n_kk` classes are
/// known-known and never updated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub encoder: Encoder,
    pub class_stats: Vec<NaturalStats>,
    pub counts: ClassCounts,
    pub crp: CrpParams,
    pub prior: SharedPrior,
    pub noise: NoiseModel,
    pub n_kk: usize,
}

/// Output of one prediction. Index `N` (0-based) of the probability
/// vectors is the novel slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
    /// 1-based argmax over all `N + 1` slots (`N + 1` = novel).
    pub predicted: usize,
    /// 1-based argmax over the known classes only.
    pub known_argmax: Option<usize>,
    /// Posterior probability of the novel slot.
    pub novelty_score: f64,
    /// Label revealed after the prediction (`N + 1` for a novel class).
    pub true_label: Option<usize>,
    pub n_at_prediction: usize,
}

impl PredictionRecord {
    pub fn true_novel(&self) -> Option<bool> {
        self.true_label.map(|y| y == self.n_at_prediction + 1)
    }
}

impl ModelState {
    /// A state with no classes.
    pub fn empty(encoder: Encoder, prior: SharedPrior, crp: CrpParams, noise: NoiseModel) -> Result<Self> {
        check_dim(prior.dim(), encoder.d_out())?;
        Ok(Self {
            encoder,
            class_stats: Vec::new(),
            counts: ClassCounts::new(),
            crp,
            prior,
            noise,
            n_kk: 0,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_stats.len()
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// Unnormalized log posterior over the `N + 1` slots for an embedding.
    pub fn log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        let w = predictive_weights(&self.counts, &self.crp)?;
        let ln_total = w.total.ln();
        let d = z.len();
        let s = self.noise.variance;
        let mut out = Vec::with_capacity(self.class_stats.len() + 1);
        let mut mean = vec![0.0; d];
        for (stats, wn) in self.class_stats.iter().zip(&w.class) {
            for (m, q) in mean.iter_mut().zip(&stats.q) {
                *m = q / stats.lambda;
            }
            let v = 1.0 / stats.lambda + s;
            out.push(wn.ln() - ln_total + log_density_parts(sq_dist(z, &mean), v, d));
        }
        let p = &self.prior.stats;
        for (m, q) in mean.iter_mut().zip(&p.q) {
            *m = q / p.lambda;
        }
        let v0 = 1.0 / p.lambda + s;
        out.push(w.novel.ln() - ln_total + log_density_parts(sq_dist(z, &mean), v0, d));
        Ok(out)
    }

    /// Posterior over known classes and the novel slot for raw features `x`.
    pub fn predict(&self, x: &[f64]) -> Result<PredictionRecord> {
        check_dim(self.encoder.d_in(), x.len())?;
        self.predict_embedding(&self.encoder.encode(x))
    }

    pub fn predict_embedding(&self, z: &[f64]) -> Result<PredictionRecord> {
        let mut log_probs = self.log_joint(z)?;
        let lse = log_sum_exp(&log_probs);
        for v in log_probs.iter_mut() {
            *v -= lse;
        }
        let probs: Vec<f64> = log_probs.iter().map(|v| v.exp()).collect();
        let n = self.n_classes();
        let argmax = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        };
        let predicted = argmax(&log_probs) + 1;
        let known_argmax = (n > 0).then(|| argmax(&log_probs[..n]) + 1);
        Ok(PredictionRecord {
            novelty_score: probs[n],
            log_probs,
            probs,
            predicted,
            known_argmax,
            true_label: None,
            n_at_prediction: n,
        })
    }

    /// Absorb the labeled point `(x, y)`. `y = N + 1` instantiates a new
    /// class from the shared prior; known-known classes are never updated.
    pub fn update(&mut self, x: &[f64], y: usize) -> Result<()> {
        check_dim(self.encoder.d_in(), x.len())?;
        let z = self.encoder.encode(x);
        self.update_embedding(&z, y)
    }

    pub fn update_embedding(&mut self, z: &[f64], y: usize) -> Result<()> {
        check_dim(self.dim(), z.len())?;
        let created = self.counts.record(y, self.crp.new_class_count)?;
        if created {
            self.class_stats.push(self.prior.stats.clone());
        }
        if y > self.n_kk {
            self.class_stats[y - 1].condition_in_place(z, self.noise)?;
        }
        Ok(())
    }

    /// Predict each query, then reveal its label. Records come back in order.
    pub fn run_episode(&mut self, queries: &[Sample]) -> Result<Vec<PredictionRecord>> {
        let mut records = Vec::with_capacity(queries.len());
        for (index, q) in queries.iter().enumerate() {
            let wrap = |e| FlowrError::Query {
                index,
                source: Box::new(e),
            };
            let mut rec = self.predict(&q.features).map_err(wrap)?;
            rec.true_label = Some(q.label);
            self.update(&q.features, q.label).map_err(wrap)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Check that a support set uses exactly the labels `1..=N`.
pub(crate) fn support_class_count(support: &[Sample]) -> Result<usize> {
    let n = support.iter().map(|s| s.label).max().unwrap_or(0);
    let mut seen = vec![false; n];
    for s in support {
        if s.label == 0 {
            return Err(FlowrError::NonDenseLabels("label 0 in support set".into()));
        }
        seen[s.label - 1] = true;
    }
    if let Some(m) = seen.iter().position(|v| !v) {
        return Err(FlowrError::NonDenseLabels(format!(
            "support set has labels up to {n} but none for class {}",
            m + 1
        )));
    }
    Ok(n)
}

/// Small-context initialization: no known-known classes, every support
/// point folded in through [`ModelState::update`].
pub fn init_small_context(
    prior: SharedPrior,
    crp: CrpParams,
    noise: NoiseModel,
    encoder: Encoder,
    support: &[Sample],
) -> Result<ModelState> {
    support_class_count(support)?;
    let mut state = ModelState::empty(encoder, prior, crp, noise)?;
    // Stable sort so that first appearances are dense; per-class statistics
    // are order-independent.
    let mut order: Vec<&Sample> = support.iter().collect();
    order.sort_by_key(|s| s.label);
    for s in order {
        state.update(&s.features, s.label)?;
    }
    Ok(state)
}

/// Large-context initialization from pre-trained class embeddings; counts
/// start at zero.
pub fn init_large_context(
    pretrained: &ClassEmbeddings,
    prior: SharedPrior,
    crp: CrpParams,
    noise: NoiseModel,
    encoder: Encoder,
) -> Result<ModelState> {
    let stats = pretrained
        .means
        .iter()
        .zip(&pretrained.variances)
        .map(|(m, &v)| {
            check_dim(prior.dim(), m.len())?;
            Ok(factor_to_natural(&crate::gaussian::IsotropicGaussian {
                mean: m.clone(),
                variance: v,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    large_context_from_stats(stats, prior, crp, noise, encoder)
}

/// Large-context initialization from known-known natural statistics.
pub fn large_context_from_stats(
    stats: Vec<NaturalStats>,
    prior: SharedPrior,
    crp: CrpParams,
    noise: NoiseModel,
    encoder: Encoder,
) -> Result<ModelState> {
    let mut state = ModelState::empty(encoder, prior, crp, noise)?;
    for s in &stats {
        check_dim(state.dim(), s.dim())?;
    }
    state.n_kk = stats.len();
    state.counts = ClassCounts::zeros(stats.len());
    state.class_stats = stats;
    Ok(state)
}

fn count_for(k: usize, mode: NewClassCount) -> f64 {
    match mode {
        NewClassCount::AppendThenIncrement => k as f64 + 1.0,
        NewClassCount::AppendOnly => k as f64,
    }
}

/// Leave-one-out support loss used for test-time fine-tuning: each support
/// point is scored against the state built from all other support points
/// (its class becomes novel when it was the only member). Returns the mean
/// NLL and its gradient with respect to the affine layer (weights, then bias).
pub fn support_loo_loss(
    layer: &AffineLayer,
    prior: &SharedPrior,
    crp: &CrpParams,
    noise: NoiseModel,
    support: &[Sample],
) -> Result<(f64, Vec<f64>)> {
    let n_classes = support_class_count(support)?;
    check_dim(prior.dim(), layer.d_out)?;
    let d = layer.d_out;
    let tau = noise.precision();
    let s_var = noise.variance;
    let zs: Vec<Vec<f64>> = support
        .iter()
        .map(|s| {
            check_dim(layer.d_in, s.features.len())?;
            Ok(layer.forward(&s.features))
        })
        .collect::<Result<_>>()?;

    let mut sums = vec![vec![0.0; d]; n_classes];
    let mut sizes = vec![0usize; n_classes];
    for (s, z) in support.iter().zip(&zs) {
        sizes[s.label - 1] += 1;
        for (a, b) in sums[s.label - 1].iter_mut().zip(z) {
            *a += b;
        }
    }
    let lambda0 = prior.stats.lambda;
    let q0 = &prior.stats.q;
    let m0: Vec<f64> = q0.iter().map(|q| q / lambda0).collect();
    let v0 = 1.0 / lambda0 + s_var;
    let b = crp.b();
    let inv_n = 1.0 / support.len().max(1) as f64;

    let mut dz = vec![vec![0.0; d]; support.len()];
    // Σ_i dL_i/dq_n and each point's own-class contribution.
    let mut acc = vec![vec![0.0; d]; n_classes];
    let mut own = vec![vec![0.0; d]; support.len()];
    let mut loss = 0.0;

    let mut means = vec![vec![0.0; d]; n_classes];
    let mut vars = vec![0.0; n_classes];
    let mut lambdas = vec![0.0; n_classes];
    let mut present = vec![false; n_classes];
    let mut logits = vec![0.0; n_classes + 1];
    for (i, s) in support.iter().enumerate() {
        let c = s.label - 1;
        let z = &zs[i];
        let mut occupied = 0usize;
        let mut total_w = 0.0;
        let mut class_w = vec![0.0; n_classes];
        for n in 0..n_classes {
            let k = sizes[n] - usize::from(n == c);
            present[n] = k > 0;
            if k == 0 {
                continue;
            }
            occupied += 1;
            let lam = lambda0 + tau * k as f64;
            lambdas[n] = lam;
            vars[n] = 1.0 / lam + s_var;
            for j in 0..d {
                let sum = sums[n][j] - if n == c { z[j] } else { 0.0 };
                means[n][j] = (q0[j] + tau * sum) / lam;
            }
            class_w[n] = count_for(k, crp.new_class_count) - crp.a;
            total_w += class_w[n];
        }
        let novel_w = b + crp.a * occupied as f64;
        total_w += novel_w;
        let ln_total = total_w.ln();
        for n in 0..n_classes {
            logits[n] = if present[n] {
                class_w[n].ln() - ln_total + log_density_parts(sq_dist(z, &means[n]), vars[n], d)
            } else {
                f64::NEG_INFINITY
            };
        }
        logits[n_classes] = novel_w.ln() - ln_total + log_density_parts(sq_dist(z, &m0), v0, d);
        let lse = log_sum_exp(&logits);
        let target = if present[c] { c } else { n_classes };
        loss += (lse - logits[target]) * inv_n;

        for n in 0..=n_classes {
            if logits[n] == f64::NEG_INFINITY {
                continue;
            }
            let g = ((logits[n] - lse).exp() - if n == target { 1.0 } else { 0.0 }) * inv_n;
            if g == 0.0 {
                continue;
            }
            let (m, v) = if n < n_classes { (&means[n], vars[n]) } else { (&m0, v0) };
            for j in 0..d {
                let r = g * (z[j] - m[j]) / v;
                dz[i][j] -= r;
                if n < n_classes {
                    let dq = r / lambdas[n];
                    acc[n][j] += dq;
                    if n == c {
                        own[i][j] += dq;
                    }
                }
            }
        }
    }
    for (k, s) in support.iter().enumerate() {
        let c = s.label - 1;
        for j in 0..d {
            dz[k][j] += tau * (acc[c][j] - own[k][j]);
        }
    }
    let mut grad = vec![0.0; layer.n_params()];
    for (s, g) in support.iter().zip(&dz) {
        layer.backward(&s.features, g, &mut grad);
    }
    Ok((loss, grad))
}

/// Result of [`fine_tune_output_layer`].
#[derive(Debug, Clone)]
pub struct FineTuneOutput {
    pub state: ModelState,
    /// Support loss before the first step and after every step.
    pub loss_trace: Vec<f64>,
}

/// Fine-tune the affine output layer on the support set by gradient descent
/// on [`support_loo_loss`]. With `backtracking`, each step halves its step
/// size (at most 20 times) until the loss does not increase, and is skipped
/// if no halving succeeds. The returned state is rebuilt from the support
/// set with the tuned encoder.
pub fn fine_tune_output_layer(
    state: &ModelState,
    support: &[Sample],
    steps: usize,
    step_size: f64,
    backtracking: bool,
) -> Result<FineTuneOutput> {
    if steps == 0 {
        return Ok(FineTuneOutput {
            state: state.clone(),
            loss_trace: Vec::new(),
        });
    }
    if state.n_kk != 0 {
        return Err(FlowrError::Unsupported(
            "fine-tuning applies to small-context states only".into(),
        ));
    }
    let mut layer = state.encoder.to_affine();
    let loss_of = |l: &AffineLayer| support_loo_loss(l, &state.prior, &state.crp, state.noise, support);
    let (mut loss, mut grad) = loss_of(&layer)?;
    let mut trace = vec![loss];
    let mut params = Vec::with_capacity(layer.n_params());
    for step in 0..steps {
        params.clear();
        layer.write_params(&mut params);
        let mut alpha = step_size;
        let mut accepted = None;
        for _ in 0..=if backtracking { 20 } else { 0 } {
            let mut trial = layer.clone();
            let moved: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - alpha * g).collect();
            trial.read_params(&moved);
            let (l, g) = loss_of(&trial)?;
            if !backtracking || l <= loss {
                accepted = Some((trial, l, g));
                break;
            }
            alpha *= 0.5;
        }
        if let Some((trial, l, g)) = accepted {
            if !l.is_finite() {
                return Err(FlowrError::Diverged {
                    step,
                    message: format!("fine-tuning loss became {l}"),
                });
            }
            layer = trial;
            loss = l;
            grad = g;
        }
        trace.push(loss);
    }
    let state = init_small_context(
        state.prior.clone(),
        state.crp,
        state.noise,
        Encoder::Affine(layer),
        support,
    )?;
    Ok(FineTuneOutput {
        state,
        loss_trace: trace,
    })
}
