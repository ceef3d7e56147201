//! Feature encoders and supervised Gaussian-embedding pre-training.
//!
//! Pre-training learns an affine encoder together with one isotropic
//! Gaussian per training class. Classification is Gaussian discriminant
//! analysis with a uniform class prior; the loss is the mean NLL of the true
//! labels plus `beta * Σ_n tr(Σ_n⁻¹)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDataset, Sample};
use crate::error::{FlowrError, Result};
use crate::gaussian::{log_density_parts, log_sum_exp, softmax_in_place, sq_dist};

/// `z = W x + b` with `W` stored row-major as `d_out × d_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    pub fn new(d_in: usize, d_out: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != d_in * d_out || bias.len() != d_out {
            return Err(FlowrError::Config(format!(
                "affine layer {d_out}x{d_in} needs {} weights and {d_out} biases",
                d_in * d_out
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(FlowrError::Config("affine parameters must be finite".into()));
        }
        Ok(Self {
            d_in,
            d_out,
            weight,
            bias,
        })
    }

    /// Identity weights and zero bias.
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            d_in: dim,
            d_out: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    /// Entries `~ N(0, 1 / d_in)`, zero bias.
    pub fn random(d_in: usize, d_out: usize, rng: &mut impl rand::Rng) -> Self {
        let scale = (1.0 / d_in as f64).sqrt();
        let weight = (0..d_in * d_out)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
            .collect::<Vec<f64>>();
        Self {
            d_in,
            d_out,
            weight,
            bias: vec![0.0; d_out],
        }
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.d_in);
        self.weight
            .chunks_exact(self.d_in)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Add `dL/dW = dz xᵀ` and `dL/db = dz` into `grad` (weights then bias).
    pub fn backward(&self, x: &[f64], dz: &[f64], grad: &mut [f64]) {
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        for (o, g) in dz.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &mut gw[o * self.d_in..(o + 1) * self.d_in];
            for (r, v) in row.iter_mut().zip(x) {
                *r += g * v;
            }
            gb[o] += g;
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    pub fn read_params(&mut self, p: &[f64]) {
        let (w, b) = p.split_at(self.weight.len());
        self.weight.copy_from_slice(w);
        let n = self.bias.len();
        self.bias.copy_from_slice(&b[..n]);
    }
}

/// Feature encoder `φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Identity { dim: usize },
    Affine(AffineLayer),
}

impl Encoder {
    pub fn identity(dim: usize) -> Self {
        Encoder::Identity { dim }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Affine(l) => l.d_in,
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Affine(l) => l.d_out,
        }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Encoder::Identity { .. } => x.to_vec(),
            Encoder::Affine(l) => l.forward(x),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Encoder::Identity { .. } => 0,
            Encoder::Affine(l) => l.n_params(),
        }
    }

    pub fn backward(&self, x: &[f64], dz: &[f64], grad: &mut [f64]) {
        if let Encoder::Affine(l) = self {
            l.backward(x, dz, grad);
        }
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        if let Encoder::Affine(l) = self {
            l.write_params(out);
        }
    }

    pub fn read_params(&mut self, p: &[f64]) {
        if let Encoder::Affine(l) = self {
            l.read_params(p);
        }
    }

    /// An affine version of this encoder; identity becomes `W = I, b = 0`.
    pub fn to_affine(&self) -> AffineLayer {
        match self {
            Encoder::Identity { dim } => AffineLayer::identity(*dim),
            Encoder::Affine(l) => l.clone(),
        }
    }
}

/// Learned Gaussian class embeddings `N(μ_n, σ_n² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddings {
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl ClassEmbeddings {
    pub fn new(means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        if means.len() != variances.len() {
            return Err(FlowrError::Config("means and variances differ in length".into()));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(FlowrError::Config("embedding variances must be positive".into()));
        }
        if let Some(first) = means.first() {
            if means.iter().any(|m| m.len() != first.len()) {
                return Err(FlowrError::Config("embedding means differ in dimension".into()));
            }
        }
        Ok(Self { means, variances })
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Per-class log densities of `z`.
    pub fn log_densities(&self, z: &[f64]) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.variances)
            .map(|(m, &v)| log_density_parts(sq_dist(z, m), v, z.len()))
            .collect()
    }
}

/// Gaussian discriminant analysis with a uniform class prior.
pub fn gda_predict(emb: &ClassEmbeddings, z: &[f64]) -> Vec<f64> {
    let mut p = emb.log_densities(z);
    softmax_in_place(&mut p);
    p
}

/// Trace regularizer `beta Σ_n d / σ_n²`.
pub fn trace_regularizer(emb: &ClassEmbeddings, beta: f64) -> f64 {
    let d = emb.dim() as f64;
    beta * emb.variances.iter().map(|v| d / v).sum::<f64>()
}

/// Mean NLL of the true labels under [`gda_predict`] plus the trace regularizer.
pub fn pretrain_loss(encoder: &Encoder, emb: &ClassEmbeddings, batch: &[Sample], beta: f64) -> Result<f64> {
    Ok(pretrain_loss_and_grad(encoder, emb, batch, beta, false)?.0)
}

/// Loss and its gradient. The gradient layout is
/// `[encoder params, means (row-major N × d), log variances (N)]`.
pub fn pretrain_loss_and_grad(
    encoder: &Encoder,
    emb: &ClassEmbeddings,
    batch: &[Sample],
    beta: f64,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(FlowrError::InsufficientData("pre-training batch is empty".into()));
    }
    let n = emb.n_classes();
    let d = emb.dim();
    if encoder.d_out() != d {
        return Err(FlowrError::DimensionMismatch {
            expected: d,
            actual: encoder.d_out(),
        });
    }
    let n_enc = encoder.n_params();
    let mut grad = if with_grad {
        vec![0.0; n_enc + n * d + n]
    } else {
        Vec::new()
    };
    let inv_b = 1.0 / batch.len() as f64;
    let mut nll = 0.0;
    let mut logits = vec![0.0; n];
    let mut dz = vec![0.0; d];
    for s in batch {
        if s.label == 0 || s.label > n {
            return Err(FlowrError::UnknownClass {
                label: s.label,
                n_classes: n,
            });
        }
        if s.features.len() != encoder.d_in() {
            return Err(FlowrError::DimensionMismatch {
                expected: encoder.d_in(),
                actual: s.features.len(),
            });
        }
        let z = encoder.encode(&s.features);
        let mut dists = Vec::with_capacity(n);
        for (j, (m, &v)) in emb.means.iter().zip(&emb.variances).enumerate() {
            let d2 = sq_dist(&z, m);
            dists.push(d2);
            logits[j] = log_density_parts(d2, v, d);
        }
        let lse = log_sum_exp(&logits);
        let y = s.label - 1;
        nll += (lse - logits[y]) * inv_b;
        if !with_grad {
            continue;
        }
        dz.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            // dNLL/dlogit_j
            let g = ((logits[j] - lse).exp() - if j == y { 1.0 } else { 0.0 }) * inv_b;
            if g == 0.0 {
                continue;
            }
            let v = emb.variances[j];
            let m = &emb.means[j];
            let gm = &mut grad[n_enc + j * d..n_enc + (j + 1) * d];
            for k in 0..d {
                let r = (z[k] - m[k]) / v;
                gm[k] += g * r;
                dz[k] -= g * r;
            }
            // d logit / d log v = -d/2 + |z-m|²/(2v)
            grad[n_enc + n * d + j] += g * (-0.5 * d as f64 + dists[j] / (2.0 * v));
        }
        encoder.backward(&s.features, &dz, &mut grad[..n_enc]);
    }
    let reg = trace_regularizer(emb, beta);
    if with_grad {
        let df = d as f64;
        for (j, v) in emb.variances.iter().enumerate() {
            grad[n_enc + n * d + j] -= beta * df / v;
        }
    }
    Ok((nll + reg, grad))
}

/// Pre-training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub embed_dim: usize,
    pub beta: f64,
    pub step_size: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            beta: 0.1,
            step_size: 1e-3,
            epochs: 10,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub encoder: Encoder,
    pub embeddings: ClassEmbeddings,
    /// Loss of every mini-batch step, in order.
    pub loss_trace: Vec<f64>,
}

/// Packs encoder parameters, means and log variances into one vector.
fn pack(encoder: &Encoder, means: &[Vec<f64>], log_vars: &[f64]) -> Vec<f64> {
    let mut p = Vec::new();
    encoder.write_params(&mut p);
    for m in means {
        p.extend_from_slice(m);
    }
    p.extend_from_slice(log_vars);
    p
}

/// Rebuild the model from a packed parameter vector.
pub fn unpack_pretrain_params(
    template: &Encoder,
    n_classes: usize,
    dim: usize,
    params: &[f64],
) -> (Encoder, ClassEmbeddings) {
    let mut encoder = template.clone();
    let n_enc = encoder.n_params();
    encoder.read_params(&params[..n_enc]);
    let means = params[n_enc..n_enc + n_classes * dim]
        .chunks_exact(dim)
        .map(<[f64]>::to_vec)
        .collect();
    let variances = params[n_enc + n_classes * dim..].iter().map(|lv| lv.exp()).collect();
    (encoder, ClassEmbeddings { means, variances })
}

/// Pack an encoder and embeddings (variances as log variances).
pub fn pack_pretrain_params(encoder: &Encoder, emb: &ClassEmbeddings) -> Vec<f64> {
    let log_vars: Vec<f64> = emb.variances.iter().map(|v| v.ln()).collect();
    pack(encoder, &emb.means, &log_vars)
}

/// Joint SGD on the encoder and the class embeddings.
pub fn pretrain(dataset: &EmbeddingDataset, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    if dataset.is_empty() {
        return Err(FlowrError::InsufficientData("pre-training dataset is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.embed_dim == 0 {
        return Err(FlowrError::Config(
            "batch size and embedding dim must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = dataset.n_classes();
    let d = cfg.embed_dim;
    let encoder = Encoder::Affine(AffineLayer::random(dataset.dim(), d, &mut rng));
    let means: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut params = pack(&encoder, &means, &vec![0.0; n]);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::new();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset.samples()[i].clone()));
            let (enc, emb) = unpack_pretrain_params(&encoder, n, d, &params);
            let (loss, grad) = pretrain_loss_and_grad(&enc, &emb, &batch, cfg.beta, true)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(FlowrError::Diverged {
                    step: trace.len(),
                    message: format!("pre-training loss became {loss}"),
                });
            }
            trace.push(loss);
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.step_size * g;
            }
        }
    }
    let (encoder, embeddings) = unpack_pretrain_params(&encoder, n, d, &params);
    Ok(PretrainOutput {
        encoder,
        embeddings,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_is_a_no_op() {
        let l = AffineLayer::identity(3);
        assert_eq!(l.forward(&[1.0, -2.0, 0.5]), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn gda_examples() {
        let one = ClassEmbeddings::new(vec![vec![3.0]], vec![2.0]).unwrap();
        assert_eq!(gda_predict(&one, &[0.0]), vec![1.0]);

        let sym = ClassEmbeddings::new(vec![vec![0.0], vec![2.0]], vec![1.0, 1.0]).unwrap();
        let p = gda_predict(&sym, &[1.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);

        // Scalar-density oracle: N(1; 0, 1) vs N(1; 2, 0.25).
        let emb = ClassEmbeddings::new(vec![vec![0.0], vec![2.0]], vec![1.0, 0.25]).unwrap();
        let p = gda_predict(&emb, &[1.0]);
        let w0 = (-0.5f64).exp() / 1.0;
        let w1 = (-2.0f64).exp() / 0.5;
        assert!((p[0] - w0 / (w0 + w1)).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_examples() {
        let id = Encoder::identity(1);
        let one = ClassEmbeddings::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let batch = vec![Sample::new(1, vec![5.0]), Sample::new(1, vec![-3.0])];
        assert!(pretrain_loss(&id, &one, &batch, 0.0).unwrap().abs() < 1e-15);

        let sym = ClassEmbeddings::new(vec![vec![-1.0], vec![1.0]], vec![1.0, 1.0]).unwrap();
        let l = pretrain_loss(&id, &sym, &[Sample::new(1, vec![0.0])], 0.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let emb = ClassEmbeddings::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![0.5, 0.5]).unwrap();
        assert!((trace_regularizer(&emb, 0.1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn regularizer_decreases_in_variance() {
        let a = ClassEmbeddings::new(vec![vec![0.0; 3]], vec![0.5]).unwrap();
        let b = ClassEmbeddings::new(vec![vec![0.0; 3]], vec![0.6]).unwrap();
        assert!(trace_regularizer(&a, 0.1) > trace_regularizer(&b, 0.1));
        assert!(trace_regularizer(&b, 0.1) > 0.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let emb = ClassEmbeddings::new(vec![vec![0.0]], vec![1.0]).unwrap();
        assert!(pretrain_loss(&Encoder::identity(1), &emb, &[], 0.1).is_err());
    }

    #[test]
    fn pack_unpack_round_trip() {
        let enc = Encoder::Affine(AffineLayer::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.5, -0.5]).unwrap());
        let emb = ClassEmbeddings::new(vec![vec![1.0, 2.0], vec![-1.0, 0.0]], vec![0.5, 2.0]).unwrap();
        let p = pack_pretrain_params(&enc, &emb);
        let (e2, m2) = unpack_pretrain_params(&enc, 2, 2, &p);
        assert_eq!(e2, enc);
        assert_eq!(m2.means, emb.means);
        for (a, b) in m2.variances.iter().zip(&emb.variances) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
