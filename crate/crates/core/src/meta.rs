//! Episodic meta-training of the shared prior, the CRP concentration, the
//! affine encoder and (large-context) the known-known class statistics.
//!
//! The loss of an episode is the mean query NLL of the open-world posterior
//! plus `lambda_w` times the adaptation loss, which instantiates every novel
//! query class from a single conditioning point and classifies the rest of
//! that class's points. Gradients are analytic; `grad_check` certifies them.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crp::{CrpParams, NewClassCount};
use crate::data::{EmbeddingDataset, Sample};
use crate::encoder::{AffineLayer, ClassEmbeddings, Encoder};
use crate::error::{FlowrError, Result};
use crate::gaussian::{
    factor_to_natural, log_density_parts, log_sum_exp, sq_dist, IsotropicGaussian, NaturalStats, NoiseModel,
    SharedPrior,
};
use crate::model::{large_context_from_stats, ModelState};

/// Deployment setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "sc")]
    SmallContext,
    #[serde(rename = "lc")]
    LargeContext,
}

impl std::str::FromStr for Setting {
    type Err = FlowrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sc" | "small" | "small-context" => Ok(Setting::SmallContext),
            "lc" | "large" | "large-context" => Ok(Setting::LargeContext),
            other => Err(FlowrError::Config(format!("unknown setting '{other}'"))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::SmallContext => "sc",
            Setting::LargeContext => "lc",
        })
    }
}

/// Shape of a sampled task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_support_classes: usize,
    pub shots_min: usize,
    pub shots_max: usize,
    pub n_novel_classes: usize,
    pub queries_per_class: usize,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots_min == 0 || self.shots_min > self.shots_max {
            return Err(FlowrError::Config(format!(
                "shots must satisfy 1 <= min <= max, got [{}, {}]",
                self.shots_min, self.shots_max
            )));
        }
        if self.n_novel_classes == 0 || self.queries_per_class == 0 {
            return Err(FlowrError::Config(
                "novel classes and queries per class must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One query point. `label` follows the frozen convention: support or
/// known-known classes keep their index, every novel class maps to `N + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryItem {
    pub features: Vec<f64>,
    pub label: usize,
    /// Class label in the source dataset.
    pub source_class: usize,
}

/// The points of one novel class, kept apart for the adaptation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptClass {
    pub source_class: usize,
    /// Indices into `Episode::query`.
    pub members: Vec<usize>,
    /// Position in `members` of the conditioning point.
    pub conditioning: usize,
}

/// A sampled task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub setting: Setting,
    /// Support points labeled `1..=n_known` (empty in the large context).
    pub support: Vec<Sample>,
    pub query: Vec<QueryItem>,
    /// Number of classes known before the query phase.
    pub n_known: usize,
    pub adapt_pool: Vec<AdaptClass>,
    /// Source class of each known label.
    pub known_sources: Vec<usize>,
}

impl Episode {
    /// Query stream with dense online labels: known classes keep their
    /// index, each novel class gets the next integer at its first appearance.
    pub fn online_queries(&self) -> Vec<Sample> {
        let mut next = self.n_known;
        let mut assigned: Vec<(usize, usize)> = Vec::new();
        self.query
            .iter()
            .map(|q| {
                let label = if q.label <= self.n_known {
                    q.label
                } else if let Some(&(_, l)) = assigned.iter().find(|(s, _)| *s == q.source_class) {
                    l
                } else {
                    next += 1;
                    assigned.push((q.source_class, next));
                    next
                };
                Sample::new(label, q.features.clone())
            })
            .collect()
    }
}

fn pick_adapt_pool(query: &[QueryItem], novel: &[usize], rng: &mut impl Rng) -> Vec<AdaptClass> {
    novel
        .iter()
        .map(|&c| {
            let members: Vec<usize> = query
                .iter()
                .enumerate()
                .filter(|(_, q)| q.source_class == c)
                .map(|(i, _)| i)
                .collect();
            let conditioning = rng.random_range(0..members.len());
            AdaptClass {
                source_class: c,
                members,
                conditioning,
            }
        })
        .collect()
}

/// Small-context task: disjoint support and novel classes, an unbalanced
/// support set, and a shuffled query set whose novel points are labeled `N + 1`.
pub fn sample_sc_task(dataset: &EmbeddingDataset, cfg: &EpisodeConfig, rng: &mut impl Rng) -> Result<Episode> {
    cfg.validate()?;
    let by_class = dataset.class_indices();
    let need = cfg.n_support_classes + cfg.n_novel_classes;
    if by_class.len() < need {
        return Err(FlowrError::InsufficientData(format!(
            "task needs {need} classes, dataset has {}",
            by_class.len()
        )));
    }
    let mut classes: Vec<usize> = (1..=by_class.len()).collect();
    classes.shuffle(rng);
    let support_classes = &classes[..cfg.n_support_classes];
    let novel_classes = &classes[cfg.n_support_classes..need];

    let mut support = Vec::new();
    let mut query = Vec::new();
    for (k, &c) in support_classes.iter().enumerate() {
        let shots = rng.random_range(cfg.shots_min..=cfg.shots_max);
        let pts = &by_class[c - 1];
        if pts.len() < shots + cfg.queries_per_class {
            return Err(FlowrError::InsufficientData(format!(
                "class {c} has {} points, task needs {}",
                pts.len(),
                shots + cfg.queries_per_class
            )));
        }
        let chosen: Vec<usize> = pts
            .choose_multiple(rng, shots + cfg.queries_per_class)
            .copied()
            .collect();
        for &i in &chosen[..shots] {
            support.push(Sample::new(k + 1, dataset.samples()[i].features.clone()));
        }
        for &i in &chosen[shots..] {
            query.push(QueryItem {
                features: dataset.samples()[i].features.clone(),
                label: k + 1,
                source_class: c,
            });
        }
    }
    let n_known = cfg.n_support_classes;
    push_novel_queries(
        dataset,
        &by_class,
        novel_classes,
        n_known,
        cfg.queries_per_class,
        rng,
        &mut query,
    )?;
    query.shuffle(rng);
    let adapt_pool = pick_adapt_pool(&query, novel_classes, rng);
    Ok(Episode {
        setting: Setting::SmallContext,
        support,
        query,
        n_known,
        adapt_pool,
        known_sources: support_classes.to_vec(),
    })
}

fn push_novel_queries(
    dataset: &EmbeddingDataset,
    by_class: &[Vec<usize>],
    novel: &[usize],
    n_known: usize,
    per_class: usize,
    rng: &mut impl Rng,
    query: &mut Vec<QueryItem>,
) -> Result<()> {
    for &c in novel {
        let pts = &by_class[c - 1];
        if pts.len() < per_class {
            return Err(FlowrError::InsufficientData(format!(
                "novel class {c} has {} points, task needs {per_class}",
                pts.len()
            )));
        }
        for &i in pts.choose_multiple(rng, per_class) {
            query.push(QueryItem {
                features: dataset.samples()[i].features.clone(),
                label: n_known + 1,
                source_class: c,
            });
        }
    }
    Ok(())
}

/// Large-context task: queries from every known-known class (`known[n]` is
/// the dataset class of known-known class `n + 1`) plus novel classes drawn
/// from outside that list.
pub fn sample_lc_task(
    dataset: &EmbeddingDataset,
    known: &[usize],
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<Episode> {
    cfg.validate()?;
    let by_class = dataset.class_indices();
    let mut query = Vec::new();
    for (k, &c) in known.iter().enumerate() {
        if c == 0 || c > by_class.len() {
            return Err(FlowrError::UnknownClass {
                label: c,
                n_classes: by_class.len(),
            });
        }
        let pts = &by_class[c - 1];
        if pts.len() < cfg.queries_per_class {
            return Err(FlowrError::InsufficientData(format!(
                "known class {c} has {} points, task needs {}",
                pts.len(),
                cfg.queries_per_class
            )));
        }
        for &i in pts.choose_multiple(rng, cfg.queries_per_class) {
            query.push(QueryItem {
                features: dataset.samples()[i].features.clone(),
                label: k + 1,
                source_class: c,
            });
        }
    }
    let mut outside: Vec<usize> = (1..=by_class.len()).filter(|c| !known.contains(c)).collect();
    if outside.len() < cfg.n_novel_classes {
        return Err(FlowrError::InsufficientData(format!(
            "task needs {} novel classes, only {} lie outside the known-known set",
            cfg.n_novel_classes,
            outside.len()
        )));
    }
    outside.shuffle(rng);
    let novel = &outside[..cfg.n_novel_classes];
    push_novel_queries(
        dataset,
        &by_class,
        novel,
        known.len(),
        cfg.queries_per_class,
        rng,
        &mut query,
    )?;
    query.shuffle(rng);
    let adapt_pool = pick_adapt_pool(&query, novel, rng);
    Ok(Episode {
        setting: Setting::LargeContext,
        support: Vec::new(),
        query,
        n_known: known.len(),
        adapt_pool,
        known_sources: known.to_vec(),
    })
}

/// Trainable parameters plus the fixed hyperparameters they are used with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub encoder: Encoder,
    pub q0: Vec<f64>,
    pub log_lambda0: f64,
    /// `a` is fixed, `rho` is trained.
    pub crp: CrpParams,
    pub noise: NoiseModel,
    /// Known-known statistics `(q, log lambda)` for the large context.
    pub known: Option<Vec<(Vec<f64>, f64)>>,
}

impl MetaParams {
    /// Small-context initialization: `q0 = 0`, `lambda0 = 1`.
    pub fn small_context(encoder: Encoder, crp: CrpParams, noise: NoiseModel) -> Self {
        let d = encoder.d_out();
        Self {
            encoder,
            q0: vec![0.0; d],
            log_lambda0: 0.0,
            crp,
            noise,
            known: None,
        }
    }

    /// Large-context initialization: known-known statistics factored from
    /// pre-trained embeddings.
    pub fn large_context(
        encoder: Encoder,
        embeddings: &ClassEmbeddings,
        crp: CrpParams,
        noise: NoiseModel,
    ) -> Result<Self> {
        let mut p = Self::small_context(encoder, crp, noise);
        let known = embeddings
            .means
            .iter()
            .zip(&embeddings.variances)
            .map(|(m, &v)| {
                if m.len() != p.q0.len() {
                    return Err(FlowrError::DimensionMismatch {
                        expected: p.q0.len(),
                        actual: m.len(),
                    });
                }
                let s = factor_to_natural(&IsotropicGaussian {
                    mean: m.clone(),
                    variance: v,
                });
                Ok((s.q, s.lambda.ln()))
            })
            .collect::<Result<Vec<_>>>()?;
        p.known = Some(known);
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.q0.len()
    }

    pub fn lambda0(&self) -> f64 {
        self.log_lambda0.exp()
    }

    pub fn prior(&self) -> SharedPrior {
        SharedPrior::new(NaturalStats {
            q: self.q0.clone(),
            lambda: self.lambda0(),
        })
    }

    pub fn known_stats(&self) -> Vec<NaturalStats> {
        self.known
            .iter()
            .flatten()
            .map(|(q, ll)| NaturalStats {
                q: q.clone(),
                lambda: ll.exp(),
            })
            .collect()
    }

    pub fn n_known(&self) -> usize {
        self.known.as_ref().map_or(0, Vec::len)
    }

    /// Flat layout: encoder, `q0`, `log lambda0`, `rho`, then per known-known
    /// class `q` and `log lambda`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_trainable());
        self.encoder.write_params(&mut out);
        out.extend_from_slice(&self.q0);
        out.push(self.log_lambda0);
        out.push(self.crp.rho);
        for (q, ll) in self.known.iter().flatten() {
            out.extend_from_slice(q);
            out.push(*ll);
        }
        out
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut p = self.clone();
        let n_enc = p.encoder.n_params();
        p.encoder.read_params(&flat[..n_enc]);
        let d = p.q0.len();
        let mut off = n_enc;
        p.q0.copy_from_slice(&flat[off..off + d]);
        off += d;
        p.log_lambda0 = flat[off];
        p.crp.rho = flat[off + 1];
        off += 2;
        for (q, ll) in p.known.iter_mut().flatten() {
            q.copy_from_slice(&flat[off..off + d]);
            *ll = flat[off + d];
            off += d + 1;
        }
        p
    }

    pub fn n_trainable(&self) -> usize {
        self.encoder.n_params() + self.q0.len() + 2 + self.n_known() * (self.q0.len() + 1)
    }

    /// Small-context agent initialized on a support set.
    pub fn small_context_state(&self, support: &[Sample]) -> Result<ModelState> {
        crate::model::init_small_context(self.prior(), self.crp, self.noise, self.encoder.clone(), support)
    }

    /// Large-context agent with zero counts for every known-known class.
    pub fn large_context_state(&self) -> Result<ModelState> {
        large_context_from_stats(
            self.known_stats(),
            self.prior(),
            self.crp,
            self.noise,
            self.encoder.clone(),
        )
    }

    /// Use an affine encoder (identity becomes `W = I, b = 0`) so it can be trained.
    pub fn with_affine_encoder(mut self) -> Self {
        self.encoder = Encoder::Affine(self.encoder.to_affine());
        self
    }
}

/// Loss weighting and query-order options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaLossConfig {
    pub lambda_w: f64,
    /// Teacher-force label updates between queries instead of scoring every
    /// query against the state left by initialization.
    pub sequential: bool,
}

impl Default for MetaLossConfig {
    fn default() -> Self {
        Self {
            lambda_w: 0.1,
            sequential: false,
        }
    }
}

/// Components of the episode loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaLossValue {
    pub total: f64,
    pub nll: f64,
    pub adapt: f64,
    /// Set when no novel class had a point left to classify.
    pub adapt_empty: bool,
}

#[derive(Clone, Copy)]
enum SlotKind {
    /// Built from the shared prior plus members.
    FromPrior,
    /// Known-known class with free statistics.
    Known(usize),
}

struct Slot {
    kind: SlotKind,
    q: Vec<f64>,
    lambda: f64,
    count: u64,
    /// Embedding index and the slot's accumulated `dL/dq` when it joined.
    members: Vec<(usize, Vec<f64>)>,
    gq: Vec<f64>,
    glambda: f64,
}

/// Differentiable open-world scorer over one episode's embeddings.
struct Scorer<'a> {
    zs: &'a [Vec<f64>],
    d: usize,
    tau: f64,
    noise_var: f64,
    q0: &'a [f64],
    lambda0: f64,
    crp: CrpParams,
    b: f64,
    /// `false` gives a uniform prior over the slots and no novel slot.
    open_world: bool,
    slots: Vec<Slot>,
    dz: Vec<Vec<f64>>,
    dq0: Vec<f64>,
    dlambda0: f64,
    db: f64,
    dknown: Vec<(Vec<f64>, f64)>,
}

enum Target {
    Slot(usize),
    Novel,
}

impl<'a> Scorer<'a> {
    fn new(zs: &'a [Vec<f64>], params: &'a MetaParams, open_world: bool) -> Self {
        let d = params.dim();
        Self {
            zs,
            d,
            tau: params.noise.precision(),
            noise_var: params.noise.variance,
            q0: &params.q0,
            lambda0: params.lambda0(),
            crp: params.crp,
            b: params.crp.b(),
            open_world,
            slots: Vec::new(),
            dz: vec![vec![0.0; d]; zs.len()],
            dq0: vec![0.0; d],
            dlambda0: 0.0,
            db: 0.0,
            dknown: vec![(vec![0.0; d], 0.0); params.n_known()],
        }
    }

    fn push_prior_slot(&mut self) -> usize {
        self.slots.push(Slot {
            kind: SlotKind::FromPrior,
            q: self.q0.to_vec(),
            lambda: self.lambda0,
            count: 0,
            members: Vec::new(),
            gq: vec![0.0; self.d],
            glambda: 0.0,
        });
        self.slots.len() - 1
    }

    fn push_known_slot(&mut self, k: usize, q: &[f64], lambda: f64) {
        self.slots.push(Slot {
            kind: SlotKind::Known(k),
            q: q.to_vec(),
            lambda,
            count: 0,
            members: Vec::new(),
            gq: vec![0.0; self.d],
            glambda: 0.0,
        });
    }

    /// Observe label `y` (1-based, dense) for embedding `zi`, mirroring the
    /// agent's update rule.
    fn observe(&mut self, zi: usize, y: usize) -> Result<()> {
        let n = self.slots.len();
        if y == n + 1 {
            let s = self.push_prior_slot();
            self.slots[s].count = match self.crp.new_class_count {
                NewClassCount::AppendThenIncrement => 2,
                NewClassCount::AppendOnly => 1,
            };
        } else if y >= 1 && y <= n {
            self.slots[y - 1].count += 1;
        } else {
            return Err(FlowrError::LabelOutOfRange { label: y, next: n + 1 });
        }
        let tau = self.tau;
        let slot = &mut self.slots[y - 1];
        if let SlotKind::FromPrior = slot.kind {
            for (q, z) in slot.q.iter_mut().zip(&self.zs[zi]) {
                *q += tau * z;
            }
            slot.lambda += tau;
            slot.members.push((zi, slot.gq.clone()));
        }
        Ok(())
    }

    /// Condition a slot on an embedding without touching counts.
    fn condition(&mut self, slot: usize, zi: usize) {
        let tau = self.tau;
        let s = &mut self.slots[slot];
        for (q, z) in s.q.iter_mut().zip(&self.zs[zi]) {
            *q += tau * z;
        }
        s.lambda += tau;
        s.members.push((zi, s.gq.clone()));
    }

    /// Add `scale * NLL(target | z_zi)` and its gradient.
    fn score(&mut self, zi: usize, target: Target, scale: f64) -> f64 {
        let z = &self.zs[zi];
        let d = self.d;
        let n = self.slots.len();
        let mut means = Vec::with_capacity(n + 1);
        let mut vars = Vec::with_capacity(n + 1);
        let mut dists = Vec::with_capacity(n + 1);
        let mut logits = Vec::with_capacity(n + 1);

        let (class_w, novel_w, total_w) = if self.open_world {
            let occupied = self.slots.iter().filter(|s| s.count > 0).count();
            let class_w: Vec<f64> = self
                .slots
                .iter()
                .map(|s| {
                    if s.count > 0 {
                        s.count as f64 - self.crp.a
                    } else {
                        self.crp.empty_class_mass
                    }
                })
                .collect();
            let novel_w = self.b + self.crp.a * occupied as f64;
            let total = class_w.iter().sum::<f64>() + novel_w;
            (class_w, novel_w, total)
        } else {
            (vec![1.0; n], 0.0, n as f64)
        };
        let ln_total = total_w.ln();

        for (s, w) in self.slots.iter().zip(&class_w) {
            let m: Vec<f64> = s.q.iter().map(|q| q / s.lambda).collect();
            let v = 1.0 / s.lambda + self.noise_var;
            let d2 = sq_dist(z, &m);
            logits.push(w.ln() - ln_total + log_density_parts(d2, v, d));
            means.push(m);
            vars.push(v);
            dists.push(d2);
        }
        if self.open_world {
            let m: Vec<f64> = self.q0.iter().map(|q| q / self.lambda0).collect();
            let v = 1.0 / self.lambda0 + self.noise_var;
            let d2 = sq_dist(z, &m);
            logits.push(novel_w.ln() - ln_total + log_density_parts(d2, v, d));
            means.push(m);
            vars.push(v);
            dists.push(d2);
        }
        let t = match target {
            Target::Slot(j) => j,
            Target::Novel => n,
        };
        let lse = log_sum_exp(&logits);
        let nll = lse - logits[t];

        let mut g_sum = 0.0;
        for j in 0..logits.len() {
            if logits[j] == f64::NEG_INFINITY {
                continue;
            }
            let g = scale * ((logits[j] - lse).exp() - if j == t { 1.0 } else { 0.0 });
            if g == 0.0 {
                continue;
            }
            g_sum += g;
            let (m, v) = (&means[j], vars[j]);
            // dlogit/dv
            let dv = g * (-0.5 * d as f64 / v + dists[j] / (2.0 * v * v));
            let lam = if j < n { self.slots[j].lambda } else { self.lambda0 };
            let mut gm_dot_m = 0.0;
            let gq: &mut Vec<f64> = if j < n { &mut self.slots[j].gq } else { &mut self.dq0 };
            for k in 0..d {
                let r = g * (z[k] - m[k]) / v;
                self.dz[zi][k] -= r;
                gq[k] += r / lam;
                gm_dot_m += r * m[k];
            }
            let glam = -gm_dot_m / lam - dv / (lam * lam);
            if j < n {
                self.slots[j].glambda += glam;
            } else {
                self.dlambda0 += glam;
            }
            if self.open_world && j == n {
                self.db += g / novel_w;
            }
        }
        if self.open_world {
            self.db -= g_sum / total_w;
        }
        scale * nll
    }

    /// Push slot gradients to the prior, known-known statistics and members.
    fn finish(mut self) -> ScorerGrads {
        for s in &self.slots {
            match s.kind {
                SlotKind::FromPrior => {
                    for (a, g) in self.dq0.iter_mut().zip(&s.gq) {
                        *a += g;
                    }
                    self.dlambda0 += s.glambda;
                }
                SlotKind::Known(k) => {
                    for (a, g) in self.dknown[k].0.iter_mut().zip(&s.gq) {
                        *a += g;
                    }
                    self.dknown[k].1 += s.glambda;
                }
            }
            for (zi, snap) in &s.members {
                for ((a, g), sn) in self.dz[*zi].iter_mut().zip(&s.gq).zip(snap) {
                    *a += self.tau * (g - sn);
                }
            }
        }
        ScorerGrads {
            dz: self.dz,
            dq0: self.dq0,
            dlambda0: self.dlambda0,
            db: self.db,
            dknown: self.dknown,
        }
    }
}

/// Loss gradients with respect to the embeddings, prior statistics,
/// concentration and known-known statistics.
struct ScorerGrads {
    dz: Vec<Vec<f64>>,
    dq0: Vec<f64>,
    dlambda0: f64,
    db: f64,
    dknown: Vec<(Vec<f64>, f64)>,
}

/// Gradient of an episode loss in the flat [`MetaParams::to_flat`] layout.
struct FlatGrad {
    grad: Vec<f64>,
}

impl FlatGrad {
    fn new(params: &MetaParams) -> Self {
        Self {
            grad: vec![0.0; params.n_trainable()],
        }
    }

    fn absorb(&mut self, params: &MetaParams, xs: &[&[f64]], parts: ScorerGrads, weight: f64) {
        let ScorerGrads {
            dz,
            dq0,
            dlambda0,
            db,
            dknown,
        } = parts;
        let n_enc = params.encoder.n_params();
        let d = params.dim();
        if n_enc > 0 {
            let mut enc = vec![0.0; n_enc];
            for (x, g) in xs.iter().zip(&dz) {
                params.encoder.backward(x, g, &mut enc);
            }
            for (a, g) in self.grad[..n_enc].iter_mut().zip(&enc) {
                *a += weight * g;
            }
        }
        let mut off = n_enc;
        for (a, g) in self.grad[off..off + d].iter_mut().zip(&dq0) {
            *a += weight * g;
        }
        off += d;
        self.grad[off] += weight * dlambda0 * params.lambda0();
        self.grad[off + 1] += weight * db * params.crp.db_drho();
        off += 2;
        for (k, (gq, gl)) in dknown.iter().enumerate() {
            let lambda = params.known.as_ref().unwrap()[k].1.exp();
            for (a, g) in self.grad[off..off + d].iter_mut().zip(gq) {
                *a += weight * g;
            }
            self.grad[off + d] += weight * gl * lambda;
            off += d + 1;
        }
    }
}

/// Mean query NLL of the open-world posterior; see [`MetaLossConfig::sequential`].
fn query_nll(params: &MetaParams, episode: &Episode, sequential: bool, grad: Option<&mut FlatGrad>) -> Result<f64> {
    let xs: Vec<&[f64]> = episode
        .support
        .iter()
        .map(|s| s.features.as_slice())
        .chain(episode.query.iter().map(|q| q.features.as_slice()))
        .collect();
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| params.encoder.encode(x)).collect();
    let mut sc = Scorer::new(&zs, params, true);
    match episode.setting {
        Setting::SmallContext => {
            if params.known.is_some() {
                return Err(FlowrError::Config(
                    "small-context episode with known-known parameters".into(),
                ));
            }
            crate::model::support_class_count(&episode.support)?;
            let mut order: Vec<usize> = (0..episode.support.len()).collect();
            order.sort_by_key(|&i| episode.support[i].label);
            for i in order {
                sc.observe(i, episode.support[i].label)?;
            }
        }
        Setting::LargeContext => {
            let known = params
                .known
                .as_ref()
                .ok_or_else(|| FlowrError::Config("large-context episode needs known-known parameters".into()))?;
            if known.len() != episode.n_known {
                return Err(FlowrError::Config(format!(
                    "episode has {} known-known classes, parameters have {}",
                    episode.n_known,
                    known.len()
                )));
            }
            for (k, (q, ll)) in known.iter().enumerate() {
                sc.push_known_slot(k, q, ll.exp());
            }
        }
    }
    let offset = episode.support.len();
    let scale = 1.0 / episode.query.len().max(1) as f64;
    let mut total = 0.0;
    if sequential {
        let online = episode.online_queries();
        for (i, q) in online.iter().enumerate() {
            let n = sc.slots.len();
            let target = if q.label <= n {
                Target::Slot(q.label - 1)
            } else {
                Target::Novel
            };
            total += sc.score(offset + i, target, scale);
            sc.observe(offset + i, q.label)?;
        }
    } else {
        for (i, q) in episode.query.iter().enumerate() {
            let target = if q.label <= episode.n_known {
                Target::Slot(q.label - 1)
            } else {
                Target::Novel
            };
            total += sc.score(offset + i, target, scale);
        }
    }
    if let Some(g) = grad {
        let parts = sc.finish();
        g.absorb(params, &xs, parts, 1.0);
    }
    Ok(total)
}

/// Adaptation loss over the novel query classes. Returns the loss and
/// whether the effective pool was empty.
fn adaptation_part(
    params: &MetaParams,
    episode: &Episode,
    weight: f64,
    grad: Option<&mut FlatGrad>,
) -> Result<(f64, bool)> {
    let pool = &episode.adapt_pool;
    let n_eval: usize = pool.iter().map(|c| c.members.len().saturating_sub(1)).sum();
    if n_eval == 0 || pool.len() < 2 && n_eval == 0 {
        return Ok((0.0, true));
    }
    let xs: Vec<&[f64]> = episode.query.iter().map(|q| q.features.as_slice()).collect();
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| params.encoder.encode(x)).collect();
    let mut sc = Scorer::new(&zs, params, false);
    for c in pool {
        let s = sc.push_prior_slot();
        sc.condition(s, c.members[c.conditioning]);
    }
    let scale = 1.0 / n_eval as f64;
    let mut total = 0.0;
    for (k, c) in pool.iter().enumerate() {
        for (pos, &qi) in c.members.iter().enumerate() {
            if pos != c.conditioning {
                total += sc.score(qi, Target::Slot(k), scale);
            }
        }
    }
    if let Some(g) = grad {
        let parts = sc.finish();
        g.absorb(params, &xs, parts, weight);
    }
    Ok((total, false))
}

/// Adaptation loss: each novel class is instantiated from the shared prior
/// conditioned on its designated point, and the remaining points are
/// classified among those classes with a uniform class prior.
pub fn adaptation_loss(params: &MetaParams, episode: &Episode) -> Result<(f64, bool)> {
    adaptation_part(params, episode, 1.0, None)
}

pub fn meta_loss(params: &MetaParams, episode: &Episode, cfg: &MetaLossConfig) -> Result<MetaLossValue> {
    let nll = query_nll(params, episode, cfg.sequential, None)?;
    let (adapt, adapt_empty) = if cfg.lambda_w != 0.0 {
        adaptation_part(params, episode, cfg.lambda_w, None)?
    } else {
        (0.0, true)
    };
    Ok(MetaLossValue {
        total: nll + cfg.lambda_w * adapt,
        nll,
        adapt,
        adapt_empty,
    })
}

/// Loss and gradient in the [`MetaParams::to_flat`] layout.
pub fn meta_loss_and_grad(
    params: &MetaParams,
    episode: &Episode,
    cfg: &MetaLossConfig,
) -> Result<(MetaLossValue, Vec<f64>)> {
    let mut g = FlatGrad::new(params);
    let nll = query_nll(params, episode, cfg.sequential, Some(&mut g))?;
    let (adapt, adapt_empty) = if cfg.lambda_w != 0.0 {
        adaptation_part(params, episode, cfg.lambda_w, Some(&mut g))?
    } else {
        (0.0, true)
    };
    Ok((
        MetaLossValue {
            total: nll + cfg.lambda_w * adapt,
            nll,
            adapt,
            adapt_empty,
        },
        g.grad,
    ))
}

/// Progress record of one meta step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub adapt: f64,
}

/// One SGD step on the mean loss of a batch of episodes. Episodes are
/// evaluated in parallel and reduced in batch order.
pub fn meta_step(
    params: &MetaParams,
    episodes: &[Episode],
    step_size: f64,
    cfg: &MetaLossConfig,
) -> Result<(MetaParams, MetaLossValue)> {
    if episodes.is_empty() {
        return Err(FlowrError::InsufficientData("empty episode batch".into()));
    }
    let results: Vec<Result<(MetaLossValue, Vec<f64>)>> = episodes
        .par_iter()
        .map(|e| meta_loss_and_grad(params, e, cfg))
        .collect();
    let inv = 1.0 / episodes.len() as f64;
    let mut grad = vec![0.0; params.n_trainable()];
    let mut mean = MetaLossValue {
        total: 0.0,
        nll: 0.0,
        adapt: 0.0,
        adapt_empty: true,
    };
    for r in results {
        let (v, g) = r?;
        mean.total += v.total * inv;
        mean.nll += v.nll * inv;
        mean.adapt += v.adapt * inv;
        mean.adapt_empty &= v.adapt_empty;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b * inv;
        }
    }
    if !mean.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(FlowrError::Diverged {
            step: 0,
            message: format!("meta loss {} or its gradient is not finite", mean.total),
        });
    }
    let flat: Vec<f64> = params
        .to_flat()
        .iter()
        .zip(&grad)
        .map(|(p, g)| p - step_size * g)
        .collect();
    Ok((params.with_flat(&flat), mean))
}

/// Meta-training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub setting: Setting,
    pub episode: EpisodeConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub loss: MetaLossConfig,
    pub seed: u64,
    /// Dataset classes used as known-known classes (large context).
    pub known_classes: Vec<usize>,
}

/// Run `steps` meta steps on tasks sampled from `dataset`.
pub fn meta_train(
    dataset: &EmbeddingDataset,
    init: MetaParams,
    cfg: &MetaTrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(MetaParams, Vec<StepRecord>)> {
    if cfg.batch_size == 0 {
        return Err(FlowrError::Config("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let episodes = (0..cfg.batch_size)
            .map(|_| match cfg.setting {
                Setting::SmallContext => sample_sc_task(dataset, &cfg.episode, &mut rng),
                Setting::LargeContext => sample_lc_task(dataset, &cfg.known_classes, &cfg.episode, &mut rng),
            })
            .collect::<Result<Vec<_>>>()?;
        let (next, v) = meta_step(&params, &episodes, cfg.step_size, &cfg.loss).map_err(|e| match e {
            FlowrError::Diverged { message, .. } => FlowrError::Diverged { step, message },
            other => other,
        })?;
        params = next;
        let rec = StepRecord {
            step,
            loss: v.total,
            nll: v.nll,
            adapt: v.adapt,
        };
        on_step(&rec);
        trace.push(rec);
    }
    Ok((params, trace))
}

/// Initial parameters for meta-training: an affine copy of `encoder`,
/// zero-mean unit-precision prior and `b = b_init`.
pub fn initial_params(
    setting: Setting,
    encoder: &Encoder,
    embeddings: Option<&ClassEmbeddings>,
    crp: CrpParams,
    noise: NoiseModel,
) -> Result<MetaParams> {
    let encoder = Encoder::Affine(encoder.to_affine());
    match setting {
        Setting::SmallContext => Ok(MetaParams::small_context(encoder, crp, noise)),
        Setting::LargeContext => {
            let emb = embeddings.ok_or_else(|| {
                FlowrError::Config("large-context meta-training needs pre-trained class embeddings".into())
            })?;
            MetaParams::large_context(encoder, emb, crp, noise)
        }
    }
}

/// Identity-initialized affine layer of the given width.
pub fn identity_affine(dim: usize) -> Encoder {
    Encoder::Affine(AffineLayer::identity(dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_world;

    fn params_1d(q0: f64, lambda0: f64) -> MetaParams {
        let mut p = MetaParams::small_context(
            Encoder::identity(1),
            CrpParams::with_b(0.5, 1.0).unwrap(),
            NoiseModel::new(0.5).unwrap(),
        );
        p.q0 = vec![q0];
        p.log_lambda0 = lambda0.ln();
        p
    }

    fn adapt_episode(points: &[(usize, f64)], conditioning: &[usize]) -> Episode {
        let query: Vec<QueryItem> = points
            .iter()
            .map(|&(c, x)| QueryItem {
                features: vec![x],
                label: 1,
                source_class: c,
            })
            .collect();
        let mut classes: Vec<usize> = points.iter().map(|p| p.0).collect();
        classes.dedup();
        let adapt_pool = classes
            .iter()
            .zip(conditioning)
            .map(|(&c, &cond)| AdaptClass {
                source_class: c,
                members: query
                    .iter()
                    .enumerate()
                    .filter(|(_, q)| q.source_class == c)
                    .map(|(i, _)| i)
                    .collect(),
                conditioning: cond,
            })
            .collect();
        Episode {
            setting: Setting::SmallContext,
            support: vec![],
            query,
            n_known: 0,
            adapt_pool,
            known_sources: vec![],
        }
    }

    #[test]
    fn sc_task_counts() {
        let w = generate_synthetic_world(3, 2, 25.0, 0.5, 5, 1).unwrap();
        let cfg = EpisodeConfig {
            n_support_classes: 2,
            shots_min: 1,
            shots_max: 1,
            n_novel_classes: 1,
            queries_per_class: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = sample_sc_task(&w.dataset, &cfg, &mut rng).unwrap();
        assert_eq!(e.support.len(), 2);
        assert_eq!(e.query.len(), 3);
        assert_eq!(e.query.iter().filter(|q| q.label == 3).count(), 1);

        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_sc_task(&w.dataset, &cfg, &mut rng2).unwrap(), e);

        let too_many = EpisodeConfig {
            n_support_classes: 3,
            ..cfg
        };
        assert!(matches!(
            sample_sc_task(&w.dataset, &too_many, &mut rng),
            Err(FlowrError::InsufficientData(_))
        ));
    }

    #[test]
    fn lc_task_labels() {
        let w = generate_synthetic_world(6, 2, 25.0, 0.5, 5, 2).unwrap();
        let cfg = EpisodeConfig {
            n_support_classes: 0,
            shots_min: 1,
            shots_max: 1,
            n_novel_classes: 2,
            queries_per_class: 2,
        };
        let known = [1, 3, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = sample_lc_task(&w.dataset, &known, &cfg, &mut rng).unwrap();
        assert!(e.support.is_empty());
        assert!(e.query.iter().all(|q| q.label >= 1 && q.label <= 4));
        for q in &e.query {
            if q.label == 4 {
                assert!(!known.contains(&q.source_class));
            } else {
                assert_eq!(known[q.label - 1], q.source_class);
            }
        }
        assert_eq!(e.query.len(), 10);
    }

    #[test]
    fn online_labels_are_dense() {
        let w = generate_synthetic_world(5, 2, 25.0, 0.5, 6, 3).unwrap();
        let cfg = EpisodeConfig {
            n_support_classes: 2,
            shots_min: 1,
            shots_max: 3,
            n_novel_classes: 3,
            queries_per_class: 2,
        };
        let e = sample_sc_task(&w.dataset, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut n = 2;
        for q in e.online_queries() {
            assert!(q.label <= n + 1);
            n = n.max(q.label);
        }
        assert_eq!(n, 5);
    }

    #[test]
    fn adaptation_single_class_is_zero() {
        let p = params_1d(0.0, 1.0);
        let e = adapt_episode(&[(7, 1.0), (7, 1.5), (7, -0.2)], &[0]);
        let (l, empty) = adaptation_loss(&p, &e).unwrap();
        assert!(l.abs() < 1e-15);
        assert!(!empty);
    }

    #[test]
    fn adaptation_symmetric_is_ln2() {
        let p = params_1d(0.0, 1.0);
        let e = adapt_episode(&[(1, 3.0), (1, 0.0), (2, -3.0)], &[0, 0]);
        let (l, _) = adaptation_loss(&p, &e).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adaptation_scalar_oracle() {
        // Prior N(0, 1), noise 0.5: conditioning on ±2 gives posterior means
        // ±4/3 with predictive variance 1/3 + 1/2 = 5/6.
        let p = params_1d(0.0, 1.0);
        let e = adapt_episode(&[(1, 2.0), (1, 2.0), (2, -2.0)], &[0, 0]);
        let (l, _) = adaptation_loss(&p, &e).unwrap();
        let v = 5.0 / 6.0;
        let ll = |m: f64| -(2.0 - m) * (2.0 - m) / (2.0 * v);
        let want = -(ll(4.0 / 3.0) - (ll(4.0 / 3.0).exp() + ll(-4.0 / 3.0).exp()).ln());
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
    }

    #[test]
    fn adaptation_empty_pool_is_flagged() {
        let p = params_1d(0.0, 1.0);
        let e = adapt_episode(&[(1, 2.0), (2, -2.0)], &[0, 0]);
        assert_eq!(adaptation_loss(&p, &e).unwrap(), (0.0, true));
    }

    #[test]
    fn flat_round_trip() {
        let emb = ClassEmbeddings::new(vec![vec![1.0, 2.0], vec![0.0, -1.0]], vec![0.5, 2.0]).unwrap();
        let p = MetaParams::large_context(
            identity_affine(2),
            &emb,
            CrpParams::with_b(0.5, 1.0).unwrap(),
            NoiseModel::new(0.5).unwrap(),
        )
        .unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.n_trainable());
        assert_eq!(p.with_flat(&flat), p);
    }

    fn perturbed(p: &MetaParams, seed: u64) -> MetaParams {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrm = Normal::new(0.0, 0.2).unwrap();
        let flat: Vec<f64> = p.to_flat().iter().map(|v| v + nrm.sample(&mut rng)).collect();
        p.with_flat(&flat)
    }

    fn check(p: &MetaParams, e: &Episode, cfg: &MetaLossConfig) -> f64 {
        let f = |flat: &[f64]| {
            let (v, g) = meta_loss_and_grad(&p.with_flat(flat), e, cfg)?;
            Ok((v.total, g))
        };
        let (v, _) = meta_loss_and_grad(p, e, cfg).unwrap();
        assert_eq!(v, meta_loss(p, e, cfg).unwrap());
        crate::gradcheck::grad_check(f, &p.to_flat(), &crate::gradcheck::GradCheckOptions::default())
            .unwrap()
            .max_rel_error
    }

    #[test]
    fn small_context_gradient() {
        let w = generate_synthetic_world(6, 3, 4.0, 0.5, 8, 11).unwrap();
        let cfg = EpisodeConfig {
            n_support_classes: 3,
            shots_min: 1,
            shots_max: 3,
            n_novel_classes: 2,
            queries_per_class: 3,
        };
        let e = sample_sc_task(&w.dataset, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let base = MetaParams::small_context(
            identity_affine(3),
            CrpParams::with_b(0.5, 1.0).unwrap(),
            NoiseModel::new(0.5).unwrap(),
        );
        let p = perturbed(&base, 4);
        for sequential in [false, true] {
            let err = check(
                &p,
                &e,
                &MetaLossConfig {
                    lambda_w: 0.3,
                    sequential,
                },
            );
            assert!(err < 1e-4, "sequential={sequential}: {err}");
        }
    }

    #[test]
    fn large_context_gradient() {
        let w = generate_synthetic_world(7, 3, 4.0, 0.5, 8, 12).unwrap();
        let cfg = EpisodeConfig {
            n_support_classes: 0,
            shots_min: 1,
            shots_max: 1,
            n_novel_classes: 2,
            queries_per_class: 3,
        };
        let known = [2, 4, 5, 7];
        let e = sample_lc_task(&w.dataset, &known, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let emb = ClassEmbeddings::new(known.iter().map(|&c| w.means[c - 1].clone()).collect(), vec![0.3; 4]).unwrap();
        let crp = CrpParams::with_b(0.5, 1.0).unwrap().with_empty_class_mass(1e-3);
        let base = MetaParams::large_context(identity_affine(3), &emb, crp, NoiseModel::new(0.5).unwrap()).unwrap();
        let p = perturbed(&base, 5);
        for sequential in [false, true] {
            let err = check(
                &p,
                &e,
                &MetaLossConfig {
                    lambda_w: 0.3,
                    sequential,
                },
            );
            assert!(err < 1e-4, "sequential={sequential}: {err}");
        }
    }

    #[test]
    fn meta_training_reduces_loss() {
        let w = generate_synthetic_world(10, 4, 25.0, 0.5, 20, 21).unwrap();
        let ecfg = EpisodeConfig {
            n_support_classes: 5,
            shots_min: 1,
            shots_max: 5,
            n_novel_classes: 3,
            queries_per_class: 4,
        };
        let init = MetaParams::small_context(
            identity_affine(4),
            CrpParams::with_b(0.5, 1.0).unwrap(),
            NoiseModel::new(0.5).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval: Vec<Episode> = (0..20)
            .map(|_| sample_sc_task(&w.dataset, &ecfg, &mut rng).unwrap())
            .collect();
        let lcfg = MetaLossConfig::default();
        let mean = |p: &MetaParams| eval.iter().map(|e| meta_loss(p, e, &lcfg).unwrap().total).sum::<f64>() / 20.0;
        let tcfg = MetaTrainConfig {
            setting: Setting::SmallContext,
            episode: ecfg,
            steps: 200,
            batch_size: 4,
            step_size: 1e-2,
            loss: lcfg,
            seed: 1,
            known_classes: vec![],
        };
        let before = mean(&init);
        let (trained, trace) = meta_train(&w.dataset, init, &tcfg, |_| {}).unwrap();
        assert_eq!(trace.len(), 200);
        assert!(mean(&trained) < before, "{} !< {before}", mean(&trained));
    }
}
