//! Two-parameter Chinese restaurant process class prior.
//!
//! With counts `k_n`, total `k` and `N⁺` occupied classes the predictive is
//! `p(n) = (k_n - a) / (k + b)` and `p(new) = (b + a N⁺) / (k + b)`.
//! Classes with a zero count (large-context initialization) get the
//! numerator `empty_class_mass` instead of `-a`, and the vector is
//! renormalized.

use serde::{Deserialize, Serialize};

use crate::error::{FlowrError, Result};

/// How a brand-new class is entered into the counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NewClassCount {
    /// Append a count of 1, then increment it like any other label
    /// (a freshly labeled class holds a count of 2).
    #[default]
    AppendThenIncrement,
    /// Append a count of 1 and stop; the standard CRP seating rule.
    AppendOnly,
}

impl NewClassCount {
    pub fn as_u8(self) -> u8 {
        match self {
            NewClassCount::AppendThenIncrement => 0,
            NewClassCount::AppendOnly => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(NewClassCount::AppendThenIncrement),
            1 => Some(NewClassCount::AppendOnly),
            _ => None,
        }
    }
}

/// CRP hyperparameters. `a` is fixed; `b = -a + softplus(rho)` is learned
/// through `rho`, so `b > -a` for every finite `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrpParams {
    pub a: f64,
    pub rho: f64,
    /// Numerator used for a class whose count is still zero.
    pub empty_class_mass: f64,
    pub new_class_count: NewClassCount,
}

impl CrpParams {
    pub fn new(a: f64, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&a) {
            return Err(FlowrError::Config(format!("CRP discount a must be in [0, 1), got {a}")));
        }
        if !rho.is_finite() {
            return Err(FlowrError::Config("rho must be finite".into()));
        }
        Ok(Self {
            a,
            rho,
            empty_class_mass: 0.0,
            new_class_count: NewClassCount::default(),
        })
    }

    /// Parameters with a target concentration `b`.
    pub fn with_b(a: f64, b: f64) -> Result<Self> {
        if b <= -a {
            return Err(FlowrError::Config(format!("b must exceed -a, got b={b}, a={a}")));
        }
        Self::new(a, inverse_softplus(b + a))
    }

    pub fn with_empty_class_mass(mut self, mass: f64) -> Self {
        self.empty_class_mass = mass;
        self
    }

    pub fn with_new_class_count(mut self, mode: NewClassCount) -> Self {
        self.new_class_count = mode;
        self
    }

    pub fn b(&self) -> f64 {
        -self.a + softplus(self.rho)
    }

    /// `db / drho`.
    pub fn db_drho(&self) -> f64 {
        sigmoid(self.rho)
    }
}

/// Per-class observation counts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    counts: Vec<u64>,
}

impl ClassCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    /// `n` classes, all with zero count.
    pub fn zeros(n: usize) -> Self {
        Self { counts: vec![0; n] }
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Increment the count of class `y` (1-based).
    pub fn observe(&mut self, y: usize) -> Result<()> {
        let n = self.counts.len();
        if y == 0 || y > n {
            return Err(FlowrError::UnknownClass { label: y, n_classes: n });
        }
        self.counts[y - 1] += 1;
        Ok(())
    }

    /// Append a new class with count 1.
    pub fn instantiate(&mut self) {
        self.counts.push(1);
    }

    /// Record label `y`: instantiate when `y = N + 1`, then count it
    /// according to `mode`. Returns whether a class was created.
    pub fn record(&mut self, y: usize, mode: NewClassCount) -> Result<bool> {
        let n = self.counts.len();
        if y == n + 1 {
            self.instantiate();
            if mode == NewClassCount::AppendThenIncrement {
                self.observe(y)?;
            }
            Ok(true)
        } else if y >= 1 && y <= n {
            self.observe(y)?;
            Ok(false)
        } else {
            Err(FlowrError::LabelOutOfRange { label: y, next: n + 1 })
        }
    }
}

/// Unnormalized predictive weights: one numerator per class plus the novel
/// numerator, and their sum.
#[derive(Debug, Clone)]
pub struct CrpWeights {
    pub class: Vec<f64>,
    pub novel: f64,
    pub total: f64,
}

pub fn predictive_weights(c: &ClassCounts, p: &CrpParams) -> Result<CrpWeights> {
    let b = p.b();
    let class: Vec<f64> = c
        .counts
        .iter()
        .map(|&k| if k > 0 { k as f64 - p.a } else { p.empty_class_mass })
        .collect();
    let novel = b + p.a * c.occupied() as f64;
    let total = class.iter().sum::<f64>() + novel;
    if total.is_nan() || total <= 0.0 || novel < 0.0 {
        return Err(FlowrError::InvalidCrpState(format!(
            "predictive normalizer {total} (b = {b}, k = {}) is not positive",
            c.total()
        )));
    }
    Ok(CrpWeights { class, novel, total })
}

/// Predictive class probabilities; the last entry is the novel class.
pub fn predictive_class_probs(c: &ClassCounts, p: &CrpParams) -> Result<Vec<f64>> {
    let w = predictive_weights(c, p)?;
    let mut probs: Vec<f64> = w.class.iter().map(|v| v / w.total).collect();
    probs.push(w.novel / w.total);
    let s: f64 = probs.iter().sum();
    for v in probs.iter_mut() {
        *v /= s;
    }
    Ok(probs)
}

/// Log probability of a label sequence under the standard seating rule
/// (new classes start with one customer), accumulated one arrival at a time.
/// Labels are 1-based and must arrive densely.
pub fn sequence_log_prob(labels: &[usize], p: &CrpParams) -> Result<f64> {
    let mut counts = ClassCounts::new();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let n = counts.n_classes();
        if y == 0 || y > n + 1 {
            return Err(FlowrError::InvalidArrivalOrder {
                position: i,
                label: y,
                expected: n + 1,
            });
        }
        let probs = predictive_class_probs(&counts, p)?;
        total += probs[y - 1].ln();
        counts.record(y, NewClassCount::AppendOnly)?;
    }
    Ok(total)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
