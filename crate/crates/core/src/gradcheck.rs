//! Finite-difference certification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::crp::CrpParams;
use crate::data::{generate_synthetic_world, Sample};
use crate::encoder::{pretrain_loss_and_grad, AffineLayer, ClassEmbeddings, Encoder};
use crate::error::{FlowrError, Result};
use crate::gaussian::{NoiseModel, SharedPrior};
use crate::meta::{meta_loss_and_grad, sample_lc_task, sample_sc_task, EpisodeConfig, MetaLossConfig, MetaParams};
use crate::model::support_loo_loss;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Base step; the step for coordinate `i` is `step * max(1, |p_i|)`.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true derivative is zero are judged on an absolute scale.
    pub floor: f64,
    /// Check a random subset when there are more parameters than this.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-5,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compare the gradient returned by `f` at `params` with central finite
/// differences, Richardson-extrapolated over steps `h` and `h / 2`.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(f: F, params: &[f64], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if params.is_empty() {
        return Err(FlowrError::InsufficientData("no parameters to check".into()));
    }
    let (_, grad) = f(params)?;
    if grad.len() != params.len() {
        return Err(FlowrError::DimensionMismatch {
            expected: params.len(),
            actual: grad.len(),
        });
    }
    let coords: Vec<usize> = if params.len() > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, params.len(), opts.max_coords).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..params.len()).collect()
    };

    let value_at = |i: usize, delta: f64| -> Result<f64> {
        let mut p = params.to_vec();
        p[i] += delta;
        Ok(f(&p)?.0)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: coords[0],
        analytic: grad[coords[0]],
        numeric: f64::NAN,
        n_checked: coords.len(),
    };
    for &i in &coords {
        let h = opts.step * params[i].abs().max(1.0);
        let d_h = (value_at(i, h)? - value_at(i, -h)?) / (2.0 * h);
        let d_h2 = (value_at(i, h / 2.0)? - value_at(i, -h / 2.0)?) / h;
        let numeric = (4.0 * d_h2 - d_h) / 3.0;
        let a = grad[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if !err.is_finite() {
            return Err(FlowrError::Diverged {
                step: i,
                message: format!("non-finite gradient check at parameter {i}: analytic {a}, numeric {numeric}"),
            });
        }
        if err > report.max_rel_error || report.numeric.is_nan() {
            report.max_rel_error = err.max(report.max_rel_error);
            if err >= report.max_rel_error {
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Which loss a verification entry covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLoss {
    Pretrain,
    MetaSmallContext,
    MetaLargeContext,
    FineTune,
}

impl CheckedLoss {
    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::Pretrain => "pretrain",
            CheckedLoss::MetaSmallContext => "meta_sc",
            CheckedLoss::MetaLargeContext => "meta_lc",
            CheckedLoss::FineTune => "fine_tune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub loss: CheckedLoss,
    pub config: usize,
    pub report: GradCheckReport,
}

fn gauss_vec(rng: &mut ChaCha8Rng, d: usize, sd: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sd).unwrap();
    (0..d).map(|_| n.sample(rng)).collect()
}

/// Certify the pre-training, meta-training (both settings; frozen and
/// sequential query losses alternate) and fine-tuning gradients on
/// `configs` random configurations.
pub fn verification_suite(seed: u64, configs: usize, opts: &GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(4 * configs);
    for config in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(config as u64));
        let d_in = rng.random_range(2..6);
        let d = rng.random_range(2..5);
        let n_classes = rng.random_range(2..6);
        let mut push = |loss, report| out.push(SuiteEntry { loss, config, report });

        let enc = Encoder::Affine(AffineLayer::random(d_in, d, &mut rng));
        let emb = ClassEmbeddings::new(
            (0..n_classes).map(|_| gauss_vec(&mut rng, d, 1.0)).collect(),
            (0..n_classes).map(|_| rng.random_range(0.3..2.0)).collect(),
        )?;
        let batch: Vec<Sample> = (0..12)
            .map(|i| Sample::new(i % n_classes + 1, gauss_vec(&mut rng, d_in, 1.0)))
            .collect();
        let n_enc = enc.n_params();
        let mut flat = Vec::new();
        enc.write_params(&mut flat);
        flat.extend(emb.means.iter().flatten());
        flat.extend(emb.variances.iter().map(|v| v.ln()));
        let f = |p: &[f64]| {
            let mut e = enc.clone();
            e.read_params(&p[..n_enc]);
            let means = p[n_enc..n_enc + n_classes * d].chunks(d).map(|c| c.to_vec()).collect();
            let vars = p[n_enc + n_classes * d..].iter().map(|v| v.exp()).collect();
            pretrain_loss_and_grad(&e, &ClassEmbeddings::new(means, vars)?, &batch, 0.1, true)
        };
        push(CheckedLoss::Pretrain, grad_check(f, &flat, opts)?);

        let world = generate_synthetic_world(8, d_in, 4.0, 0.5, 8, seed.wrapping_add(1000 + config as u64))?;
        let crp = CrpParams::with_b(0.5, rng.random_range(0.3..3.0))?.with_empty_class_mass(1e-3);
        let noise = NoiseModel::new(0.5)?;
        let cfg = MetaLossConfig {
            lambda_w: 0.1,
            sequential: config % 2 == 1,
        };
        let ecfg = EpisodeConfig {
            n_support_classes: 3,
            shots_min: 1,
            shots_max: 3,
            n_novel_classes: 2,
            queries_per_class: 3,
        };
        let mut sc = MetaParams::small_context(Encoder::Affine(AffineLayer::random(d_in, d, &mut rng)), crp, noise);
        sc.q0 = gauss_vec(&mut rng, d, 0.3);
        sc.log_lambda0 = rng.random_range(-1.0..1.0);
        let ep = sample_sc_task(&world.dataset, &ecfg, &mut rng)?;
        let f = |p: &[f64]| meta_loss_and_grad(&sc.with_flat(p), &ep, &cfg).map(|(v, g)| (v.total, g));
        push(CheckedLoss::MetaSmallContext, grad_check(f, &sc.to_flat(), opts)?);

        let known = [1, 2, 3, 4];
        let kk = ClassEmbeddings::new(
            known.iter().map(|_| gauss_vec(&mut rng, d, 1.0)).collect(),
            known.iter().map(|_| rng.random_range(0.3..2.0)).collect(),
        )?;
        let lc = MetaParams::large_context(Encoder::Affine(AffineLayer::random(d_in, d, &mut rng)), &kk, crp, noise)?;
        let lc_cfg = EpisodeConfig {
            n_support_classes: 0,
            ..ecfg
        };
        let ep = sample_lc_task(&world.dataset, &known, &lc_cfg, &mut rng)?;
        let f = |p: &[f64]| meta_loss_and_grad(&lc.with_flat(p), &ep, &cfg).map(|(v, g)| (v.total, g));
        push(CheckedLoss::MetaLargeContext, grad_check(f, &lc.to_flat(), opts)?);

        let layer = AffineLayer::random(d_in, d, &mut rng);
        let prior = SharedPrior::from_moments(gauss_vec(&mut rng, d, 0.5), rng.random_range(0.5..5.0))?;
        let support: Vec<Sample> = (0..9)
            .map(|i| Sample::new(i % 3 + 1, gauss_vec(&mut rng, d_in, 1.0)))
            .collect();
        let mut flat = Vec::new();
        layer.write_params(&mut flat);
        let f = |p: &[f64]| {
            let mut l = layer.clone();
            l.read_params(p);
            support_loo_loss(&l, &prior, &crp, noise, &support)
        };
        push(CheckedLoss::FineTune, grad_check(f, &flat, opts)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let v = p.iter().map(|x| x * x * x + x).sum();
        Ok((v, p.iter().map(|x| 3.0 * x * x + 1.0).collect()))
    }

    #[test]
    fn correct_gradient_passes() {
        let r = grad_check(quad, &[0.5, -1.2, 3.0], &GradCheckOptions::default()).unwrap();
        assert!(r.passed(1e-8), "{r:?}");
        assert_eq!(r.n_checked, 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let bad = |p: &[f64]| {
            let (v, mut g) = quad(p)?;
            g[1] *= 1.01;
            Ok((v, g))
        };
        let r = grad_check(bad, &[0.5, -1.2, 3.0], &GradCheckOptions::default()).unwrap();
        assert_eq!(r.worst_index, 1);
        assert!(!r.passed(1e-4));
    }

    #[test]
    fn suite_passes() {
        let entries = verification_suite(3, 2, &GradCheckOptions::default()).unwrap();
        assert_eq!(entries.len(), 8);
        assert!(entries.iter().all(|e| e.report.passed(1e-4)), "{entries:?}");
    }

    #[test]
    fn subset_for_large_parameter_vectors() {
        let p: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let r = grad_check(quad, &p, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.n_checked, 200);
        assert!(r.passed(1e-8));
    }
}
