//! Small fully connected variational autoencoders trained with hand-derived
//! gradients: the standard VAE, beta-VAE, and beta-TCVAE objectives.
//!
//! The encoder maps an image through tanh hidden layers to a diagonal
//! Gaussian posterior (mean and log-variance heads); the decoder mirrors the
//! hidden stack and ends in a logistic sigmoid over Bernoulli pixel
//! likelihoods. The beta-TCVAE decomposition (mutual information, total
//! correlation, dimension-wise KL) uses minibatch-weighted sampling:
//! `log q(z) ~ logsumexp_j log q(z|x_j) - log(batch_size * dataset_size)`.
//! All arithmetic is 64-bit and every entry point is deterministic given its
//! seed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ImageDataset, ImageSample};
use crate::linalg::Mat;
use crate::rng::SplitMix64;

const LN_2PI: f64 = 1.837877066409345483560659472811;
const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VaeError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("batch too small: need at least {needed}, found {found}")]
    BatchTooSmall { needed: usize, found: usize },
    #[error("parameter payload has a bad header")]
    BadHeader,
    #[error("parameter payload version {found} unsupported")]
    VersionMismatch { found: u8 },
    #[error("parameter payload truncated: need {needed} bytes, have {available}")]
    TruncatedPayload { needed: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vae,
    BetaVae,
    BetaTcvae,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vae => "vae",
            Variant::BetaVae => "beta_vae",
            Variant::BetaTcvae => "beta_tcvae",
        }
    }

    pub const ALL: [Variant; 3] = [Variant::Vae, Variant::BetaVae, Variant::BetaTcvae];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One affine layer: weight `[inputs x outputs]` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Mat::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    fn init(inputs: usize, outputs: usize, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = Mat::from_vec(
            inputs,
            outputs,
            (0..inputs * outputs)
                .map(|_| (2.0 * rng.next_open01() - 1.0) * bound)
                .collect(),
        );
        Self {
            weight,
            bias: vec![0.0; outputs],
        }
    }
}

/// Encoder and decoder parameters. The encoder's final layer produces the
/// concatenated mean and log-variance heads (2 * latent_dim outputs); the
/// decoder's final layer produces the flattened image logits.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParameters {
    pub encoder_layers: Vec<AffineLayer>,
    pub decoder_layers: Vec<AffineLayer>,
    pub latent_dim: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl VaeParameters {
    pub fn input_dim(&self) -> usize {
        self.input_height * self.input_width
    }

    /// Seeded uniform initialization: weights in
    /// `+/- sqrt(6 / (fan_in + fan_out))`, biases zero. The decoder mirrors
    /// the reversed hidden stack.
    pub fn init(
        input_height: usize,
        input_width: usize,
        hidden_sizes: &[usize],
        latent_dim: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        assert!(latent_dim >= 1);
        let input_dim = input_height * input_width;
        let mut encoder_layers = Vec::with_capacity(hidden_sizes.len() + 1);
        let mut prev = input_dim;
        for &h in hidden_sizes {
            encoder_layers.push(AffineLayer::init(prev, h, rng));
            prev = h;
        }
        encoder_layers.push(AffineLayer::init(prev, 2 * latent_dim, rng));

        let mut decoder_layers = Vec::with_capacity(hidden_sizes.len() + 1);
        prev = latent_dim;
        for &h in hidden_sizes.iter().rev() {
            decoder_layers.push(AffineLayer::init(prev, h, rng));
            prev = h;
        }
        decoder_layers.push(AffineLayer::init(prev, input_dim, rng));

        Self {
            encoder_layers,
            decoder_layers,
            latent_dim,
            input_height,
            input_width,
        }
    }

    /// All-zero parameters with the same shape, used for gradient buffers.
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder_layers: self
                .encoder_layers
                .iter()
                .map(|l| AffineLayer::zeros(l.weight.rows, l.weight.cols))
                .collect(),
            decoder_layers: self
                .decoder_layers
                .iter()
                .map(|l| AffineLayer::zeros(l.weight.rows, l.weight.cols))
                .collect(),
            latent_dim: self.latent_dim,
            input_height: self.input_height,
            input_width: self.input_width,
        }
    }

    fn param_count(&self) -> usize {
        self.encoder_layers
            .iter()
            .chain(&self.decoder_layers)
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in self.encoder_layers.iter_mut().chain(&mut self.decoder_layers) {
            for v in &mut layer.weight.data {
                f(v);
            }
            for v in &mut layer.bias {
                f(v);
            }
        }
    }
}

/// Diagonal Gaussian posterior with the log-variance clamped to +/-10 on
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_variance.len());
        assert!(mean.iter().all(|v| v.is_finite()));
        assert!(log_variance.iter().all(|v| v.is_finite()));
        let log_variance = log_variance
            .into_iter()
            .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
            .collect();
        Self { mean, log_variance }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub variant: Variant,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: i64,
    pub hidden_sizes: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Vae,
            beta: 1.0,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            hidden_sizes: vec![256, 128],
            latent_dim: 6,
        }
    }
}

impl TrainingConfig {
    /// The standard VAE always trains with beta = 1.
    pub fn effective_beta(&self) -> f64 {
        match self.variant {
            Variant::Vae => 1.0,
            _ => self.beta,
        }
    }
}

/// Per-batch loss components, all averaged over the batch. Reconstruction is
/// the Bernoulli negative log-likelihood in nats per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reconstruction: f64,
    pub kl_analytic: f64,
    pub mutual_info_est: f64,
    pub total_correlation_est: f64,
    pub dimwise_kl_est: f64,
}

impl LossTerms {
    pub fn zero() -> Self {
        Self {
            reconstruction: 0.0,
            kl_analytic: 0.0,
            mutual_info_est: 0.0,
            total_correlation_est: 0.0,
            dimwise_kl_est: 0.0,
        }
    }
}

/// Combines loss terms per variant:
/// VAE `recon + kl`, beta-VAE `recon + beta * kl`, beta-TCVAE
/// `recon + mi + beta * tc + dimwise_kl`.
pub fn loss(variant: Variant, terms: &LossTerms, beta: f64) -> f64 {
    match variant {
        Variant::Vae => terms.reconstruction + terms.kl_analytic,
        Variant::BetaVae => terms.reconstruction + beta * terms.kl_analytic,
        Variant::BetaTcvae => {
            terms.reconstruction
                + terms.mutual_info_est
                + beta * terms.total_correlation_est
                + terms.dimwise_kl_est
        }
    }
}

/// Closed-form KL divergence from a diagonal Gaussian to the unit prior:
/// `-0.5 * sum(1 + logvar - mean^2 - var)`, computed as a sum of
/// nonnegative per-dimension parts.
pub fn kl_diag_gaussian(posterior: &GaussianPosterior) -> f64 {
    posterior
        .mean
        .iter()
        .zip(&posterior.log_variance)
        .map(|(&m, &lv)| 0.5 * (m * m + (lv.exp_m1() - lv)))
        .sum()
}

/// `z = mean + exp(0.5 * logvar) * noise`.
pub fn reparameterize(posterior: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>, VaeError> {
    if noise.len() != posterior.mean.len() {
        return Err(VaeError::DimensionMismatch {
            expected: posterior.mean.len(),
            found: noise.len(),
        });
    }
    Ok(posterior
        .mean
        .iter()
        .zip(&posterior.log_variance)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

pub fn images_to_mat(images: &[ImageSample]) -> Mat {
    assert!(!images.is_empty());
    let dim = images[0].len();
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        assert_eq!(img.len(), dim);
        data.extend_from_slice(&img.pixels);
    }
    Mat::from_vec(images.len(), dim, data)
}

struct EncoderForward {
    /// `activations[0]` is the input batch; later entries are post-tanh
    /// hidden activations.
    activations: Vec<Mat>,
    mean: Mat,
    logvar: Mat,
    /// Coordinates where the raw log-variance hit the clamp (zero gradient).
    clamped: Vec<bool>,
}

fn encode_batch(params: &VaeParameters, x: &Mat) -> EncoderForward {
    let hidden_count = params.encoder_layers.len() - 1;
    let mut activations = Vec::with_capacity(hidden_count + 1);
    activations.push(x.clone());
    for layer in &params.encoder_layers[..hidden_count] {
        let mut z = activations.last().unwrap().matmul(&layer.weight);
        z.add_row_broadcast(&layer.bias);
        z.map_inplace(f64::tanh);
        activations.push(z);
    }
    let head_layer = &params.encoder_layers[hidden_count];
    let mut head = activations.last().unwrap().matmul(&head_layer.weight);
    head.add_row_broadcast(&head_layer.bias);

    let batch = x.rows;
    let latent = params.latent_dim;
    let mut mean = Mat::zeros(batch, latent);
    let mut logvar = Mat::zeros(batch, latent);
    let mut clamped = vec![false; batch * latent];
    for i in 0..batch {
        for d in 0..latent {
            mean.set(i, d, head.get(i, d));
            let raw = head.get(i, latent + d);
            if raw.abs() > LOGVAR_CLAMP {
                clamped[i * latent + d] = true;
            }
            logvar.set(i, d, raw.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        }
    }
    EncoderForward {
        activations,
        mean,
        logvar,
        clamped,
    }
}

struct DecoderForward {
    /// `activations[0]` is the latent batch; later entries are post-tanh
    /// hidden activations.
    activations: Vec<Mat>,
    logits: Mat,
}

fn decode_batch(params: &VaeParameters, z: &Mat) -> DecoderForward {
    let hidden_count = params.decoder_layers.len() - 1;
    let mut activations = Vec::with_capacity(hidden_count + 1);
    activations.push(z.clone());
    for layer in &params.decoder_layers[..hidden_count] {
        let mut h = activations.last().unwrap().matmul(&layer.weight);
        h.add_row_broadcast(&layer.bias);
        h.map_inplace(f64::tanh);
        activations.push(h);
    }
    let out_layer = &params.decoder_layers[hidden_count];
    let mut logits = activations.last().unwrap().matmul(&out_layer.weight);
    logits.add_row_broadcast(&out_layer.bias);
    DecoderForward {
        activations,
        logits,
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

/// Deterministic encoder pass for one image.
pub fn encode(params: &VaeParameters, image: &ImageSample) -> Result<GaussianPosterior, VaeError> {
    if image.len() != params.input_dim() {
        return Err(VaeError::DimensionMismatch {
            expected: params.input_dim(),
            found: image.len(),
        });
    }
    let x = images_to_mat(std::slice::from_ref(image));
    let fwd = encode_batch(params, &x);
    Ok(GaussianPosterior::new(
        fwd.mean.row(0).to_vec(),
        fwd.logvar.row(0).to_vec(),
    ))
}

/// Deterministic decoder pass for one latent point; outputs are strictly
/// inside (0, 1).
pub fn decode(params: &VaeParameters, z: &[f64]) -> Result<ImageSample, VaeError> {
    if z.len() != params.latent_dim {
        return Err(VaeError::DimensionMismatch {
            expected: params.latent_dim,
            found: z.len(),
        });
    }
    let zm = Mat::from_vec(1, z.len(), z.to_vec());
    let fwd = decode_batch(params, &zm);
    let pixels = fwd.logits.data.iter().map(|&a| sigmoid(a)).collect();
    Ok(ImageSample::new(
        pixels,
        params.input_height,
        params.input_width,
    ))
}

/// Minibatch-weighted sampling statistics shared by the loss terms and the
/// beta-TCVAE gradient.
struct MwsStats {
    /// `log q(z_i[d] | x_j)`, indexed `(i * batch + j) * latent + d`.
    log_density: Vec<f64>,
    /// `sum_d log q(z_i[d] | x_j)`, indexed `i * batch + j`.
    joint: Vec<f64>,
    /// `logsumexp_j joint[i][j]`, per row.
    lse_joint: Vec<f64>,
    /// `logsumexp_j log_density[i][j][d]`, indexed `i * latent + d`.
    lse_dim: Vec<f64>,
    log_q_self: Vec<f64>,
    log_prior: Vec<f64>,
}

fn mws_stats(mean: &Mat, logvar: &Mat, z: &Mat) -> MwsStats {
    let batch = mean.rows;
    let latent = mean.cols;
    let mut log_density = vec![0.0; batch * batch * latent];
    let mut joint = vec![0.0; batch * batch];
    for i in 0..batch {
        for j in 0..batch {
            let mut s = 0.0;
            for d in 0..latent {
                let lv = logvar.get(j, d);
                let diff = z.get(i, d) - mean.get(j, d);
                let ld = -0.5 * (LN_2PI + lv + diff * diff * (-lv).exp());
                log_density[(i * batch + j) * latent + d] = ld;
                s += ld;
            }
            joint[i * batch + j] = s;
        }
    }
    let logsumexp = |values: &mut dyn Iterator<Item = f64>| -> f64 {
        let vals: Vec<f64> = values.collect();
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    };
    let lse_joint: Vec<f64> = (0..batch)
        .map(|i| logsumexp(&mut joint[i * batch..(i + 1) * batch].iter().cloned()))
        .collect();
    let mut lse_dim = vec![0.0; batch * latent];
    for i in 0..batch {
        for d in 0..latent {
            lse_dim[i * latent + d] = logsumexp(
                &mut (0..batch).map(|j| log_density[(i * batch + j) * latent + d]),
            );
        }
    }
    let log_q_self: Vec<f64> = (0..batch).map(|i| joint[i * batch + i]).collect();
    let log_prior: Vec<f64> = (0..batch)
        .map(|i| {
            (0..latent)
                .map(|d| {
                    let v = z.get(i, d);
                    -0.5 * (LN_2PI + v * v)
                })
                .sum()
        })
        .collect();
    MwsStats {
        log_density,
        joint,
        lse_joint,
        lse_dim,
        log_q_self,
        log_prior,
    }
}

fn batch_terms_from_forward(
    x: &Mat,
    enc: &EncoderForward,
    dec: &DecoderForward,
    z: &Mat,
    dataset_size: usize,
) -> LossTerms {
    let batch = x.rows;
    let latent = enc.mean.cols;
    let bf = batch as f64;

    let mut reconstruction = 0.0;
    for (&a, &t) in dec.logits.data.iter().zip(&x.data) {
        reconstruction += softplus(a) - a * t;
    }
    reconstruction /= bf;

    let mut kl_analytic = 0.0;
    for i in 0..batch {
        for d in 0..latent {
            let m = enc.mean.get(i, d);
            let lv = enc.logvar.get(i, d);
            kl_analytic += 0.5 * (m * m + (lv.exp_m1() - lv));
        }
    }
    kl_analytic /= bf;

    let stats = mws_stats(&enc.mean, &enc.logvar, z);
    let log_bd = (batch as f64 * dataset_size as f64).ln();
    let mut mutual_info_est = 0.0;
    let mut total_correlation_est = 0.0;
    let mut dimwise_kl_est = 0.0;
    for i in 0..batch {
        let log_q_agg = stats.lse_joint[i] - log_bd;
        let log_q_dims: f64 = (0..latent)
            .map(|d| stats.lse_dim[i * latent + d] - log_bd)
            .sum();
        mutual_info_est += stats.log_q_self[i] - log_q_agg;
        total_correlation_est += log_q_agg - log_q_dims;
        dimwise_kl_est += log_q_dims - stats.log_prior[i];
    }
    mutual_info_est /= bf;
    total_correlation_est /= bf;
    dimwise_kl_est /= bf;

    LossTerms {
        reconstruction,
        kl_analytic,
        mutual_info_est,
        total_correlation_est,
        dimwise_kl_est,
    }
}

/// All loss terms for a batch under fixed reparameterization noise.
pub fn batch_terms(
    params: &VaeParameters,
    x: &Mat,
    noise: &Mat,
    dataset_size: usize,
) -> Result<LossTerms, VaeError> {
    if x.cols != params.input_dim() {
        return Err(VaeError::DimensionMismatch {
            expected: params.input_dim(),
            found: x.cols,
        });
    }
    if noise.rows != x.rows || noise.cols != params.latent_dim {
        return Err(VaeError::DimensionMismatch {
            expected: x.rows * params.latent_dim,
            found: noise.rows * noise.cols,
        });
    }
    let enc = encode_batch(params, x);
    let mut z = Mat::zeros(x.rows, params.latent_dim);
    for i in 0..x.rows {
        for d in 0..params.latent_dim {
            let sigma = (0.5 * enc.logvar.get(i, d)).exp();
            z.set(i, d, enc.mean.get(i, d) + sigma * noise.get(i, d));
        }
    }
    let dec = decode_batch(params, &z);
    Ok(batch_terms_from_forward(x, &enc, &dec, &z, dataset_size))
}

/// Minibatch-weighted estimates of the KL decomposition, with seeded
/// reparameterization noise.
pub fn decomposition_estimates(
    params: &VaeParameters,
    batch: &[ImageSample],
    dataset_size: usize,
    seed: i64,
) -> Result<LossTerms, VaeError> {
    if batch.len() < 2 {
        return Err(VaeError::BatchTooSmall {
            needed: 2,
            found: batch.len(),
        });
    }
    let x = images_to_mat(batch);
    let mut rng = SplitMix64::from_seed_i64(seed);
    let noise = Mat::from_vec(
        batch.len(),
        params.latent_dim,
        rng.normal_vec(batch.len() * params.latent_dim),
    );
    batch_terms(params, &x, &noise, dataset_size)
}

/// Parameter-shaped gradients.
pub type Gradients = VaeParameters;

/// Analytic gradient of the configured loss for one batch under fixed
/// noise, plus the loss terms from the same forward pass.
pub fn batch_gradient(
    params: &VaeParameters,
    x: &Mat,
    noise: &Mat,
    variant: Variant,
    beta: f64,
    dataset_size: usize,
) -> Result<(Gradients, LossTerms), VaeError> {
    if x.cols != params.input_dim() {
        return Err(VaeError::DimensionMismatch {
            expected: params.input_dim(),
            found: x.cols,
        });
    }
    if noise.rows != x.rows || noise.cols != params.latent_dim {
        return Err(VaeError::DimensionMismatch {
            expected: x.rows * params.latent_dim,
            found: noise.rows * noise.cols,
        });
    }
    let batch = x.rows;
    let latent = params.latent_dim;
    let bf = batch as f64;
    let beta = if variant == Variant::Vae { 1.0 } else { beta };

    let enc = encode_batch(params, x);
    let mut sigma = Mat::zeros(batch, latent);
    let mut z = Mat::zeros(batch, latent);
    for i in 0..batch {
        for d in 0..latent {
            let s = (0.5 * enc.logvar.get(i, d)).exp();
            sigma.set(i, d, s);
            z.set(i, d, enc.mean.get(i, d) + s * noise.get(i, d));
        }
    }
    let dec = decode_batch(params, &z);
    let terms = batch_terms_from_forward(x, &enc, &dec, &z, dataset_size);

    let mut grads = params.zeros_like();

    // Reconstruction backward through the decoder: d(loss)/d(logit) =
    // (sigmoid(logit) - target) / batch.
    let mut delta = Mat::zeros(batch, x.cols);
    for (o, (&a, &t)) in delta
        .data
        .iter_mut()
        .zip(dec.logits.data.iter().zip(&x.data))
    {
        *o = (sigmoid(a) - t) / bf;
    }
    let mut d_z_recon = Mat::zeros(batch, latent);
    for t in (0..params.decoder_layers.len()).rev() {
        let input_act = &dec.activations[t];
        grads.decoder_layers[t].weight = input_act.matmul_tn(&delta);
        grads.decoder_layers[t].bias = delta.col_sums();
        let d_input = delta.matmul_nt(&params.decoder_layers[t].weight);
        if t > 0 {
            delta = d_input;
            for (v, &a) in delta.data.iter_mut().zip(&dec.activations[t].data) {
                *v *= 1.0 - a * a;
            }
        } else {
            d_z_recon = d_input;
        }
    }

    // Latent-term gradients: pathwise through z plus direct density terms.
    let mut d_z = d_z_recon;
    let mut d_mean_direct = Mat::zeros(batch, latent);
    let mut d_logvar_direct = Mat::zeros(batch, latent);
    match variant {
        Variant::Vae | Variant::BetaVae => {
            for i in 0..batch {
                for d in 0..latent {
                    let m = enc.mean.get(i, d);
                    let lv = enc.logvar.get(i, d);
                    d_mean_direct.set(i, d, beta * m / bf);
                    d_logvar_direct.set(i, d, beta * 0.5 * lv.exp_m1() / bf);
                }
            }
        }
        Variant::BetaTcvae => {
            let stats = mws_stats(&enc.mean, &enc.logvar, &z);
            // Objective per sample: log q(z|x_i) + (beta-1) * lse_joint_i
            // - (beta-1) * sum_d lse_dim_id - log p(z_i), up to constants.
            for i in 0..batch {
                for j in 0..batch {
                    let w_joint =
                        (stats.joint[i * batch + j] - stats.lse_joint[i]).exp();
                    for d in 0..latent {
                        let idx = (i * batch + j) * latent + d;
                        let w_dim =
                            (stats.log_density[idx] - stats.lse_dim[i * latent + d]).exp();
                        let g = (f64::from(u8::from(i == j))
                            + (beta - 1.0) * w_joint
                            + (1.0 - beta) * w_dim)
                            / bf;
                        let lv = enc.logvar.get(j, d);
                        let inv_var = (-lv).exp();
                        let diff = z.get(i, d) - enc.mean.get(j, d);
                        // d log N(z; mu, var) / d{z, mu, logvar}
                        d_z.data[i * latent + d] += g * (-(diff) * inv_var);
                        d_mean_direct.data[j * latent + d] += g * diff * inv_var;
                        d_logvar_direct.data[j * latent + d] +=
                            g * (-0.5 + 0.5 * diff * diff * inv_var);
                    }
                }
                for d in 0..latent {
                    // -log p(z_i) term.
                    d_z.data[i * latent + d] += z.get(i, d) / bf;
                }
            }
        }
    }

    // Combine into head gradients; the clamp zeroes log-variance gradients.
    let mut d_head = Mat::zeros(batch, 2 * latent);
    for i in 0..batch {
        for d in 0..latent {
            let dz = d_z.get(i, d);
            let d_mean = dz + d_mean_direct.get(i, d);
            let mut d_logvar = dz * 0.5 * sigma.get(i, d) * noise.get(i, d)
                + d_logvar_direct.get(i, d);
            if enc.clamped[i * latent + d] {
                d_logvar = 0.0;
            }
            d_head.set(i, d, d_mean);
            d_head.set(i, latent + d, d_logvar);
        }
    }

    let mut delta = d_head;
    for t in (0..params.encoder_layers.len()).rev() {
        let input_act = &enc.activations[t];
        grads.encoder_layers[t].weight = input_act.matmul_tn(&delta);
        grads.encoder_layers[t].bias = delta.col_sums();
        if t > 0 {
            delta = delta.matmul_nt(&params.encoder_layers[t].weight);
            for (v, &a) in delta.data.iter_mut().zip(&enc.activations[t].data) {
                *v *= 1.0 - a * a;
            }
        }
    }

    Ok((grads, terms))
}

/// Gradient of the configured loss over a batch, drawing the
/// reparameterization noise from `config.seed`.
pub fn gradient(
    params: &VaeParameters,
    batch: &[ImageSample],
    config: &TrainingConfig,
    dataset_size: usize,
) -> Result<(Gradients, LossTerms), VaeError> {
    if batch.is_empty() {
        return Err(VaeError::BatchTooSmall {
            needed: 1,
            found: 0,
        });
    }
    let x = images_to_mat(batch);
    let mut rng = SplitMix64::from_seed_i64(config.seed);
    let noise = Mat::from_vec(
        batch.len(),
        params.latent_dim,
        rng.normal_vec(batch.len() * params.latent_dim),
    );
    batch_gradient(
        params,
        &x,
        &noise,
        config.variant,
        config.effective_beta(),
        dataset_size,
    )
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &VaeParameters) -> Self {
        let n = params.param_count();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut VaeParameters, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let mut flat_grads = Vec::with_capacity(self.m.len());
        for layer in grads.encoder_layers.iter().chain(&grads.decoder_layers) {
            flat_grads.extend_from_slice(&layer.weight.data);
            flat_grads.extend_from_slice(&layer.bias);
        }
        let mut k = 0;
        params.for_each_param_mut(|p| {
            let g = flat_grads[k];
            self.m[k] = Self::BETA1 * self.m[k] + (1.0 - Self::BETA1) * g;
            self.v[k] = Self::BETA2 * self.v[k] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
            k += 1;
        });
    }
}

/// Trains one model: seeded initialization, per-epoch reshuffled
/// minibatches, Adam updates, and a history of epoch-mean loss terms.
/// `epochs = 0` returns the initialization unchanged.
pub fn train(dataset: &ImageDataset, config: &TrainingConfig) -> (VaeParameters, Vec<LossTerms>) {
    assert!(!dataset.is_empty(), "training needs a nonempty dataset");
    let first = &dataset.samples[0];
    let mut rng = SplitMix64::from_seed_i64(config.seed);
    let mut params = VaeParameters::init(
        first.height,
        first.width,
        &config.hidden_sizes,
        config.latent_dim,
        &mut rng,
    );
    let mut adam = AdamState::new(&params);
    let beta = config.effective_beta();
    let batch_size = config.batch_size.max(1).min(dataset.len());
    let mut history = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        let perm_seed = rng.next_u64() as i64;
        let batches = crate::dataset::minibatches(dataset, batch_size, perm_seed);
        let mut sums = LossTerms::zero();
        let mut seen = 0usize;
        for indices in batches {
            let mut data = Vec::with_capacity(indices.len() * params.input_dim());
            for &i in &indices {
                data.extend_from_slice(&dataset.samples[i].pixels);
            }
            let x = Mat::from_vec(indices.len(), params.input_dim(), data);
            let noise = Mat::from_vec(
                indices.len(),
                config.latent_dim,
                rng.normal_vec(indices.len() * config.latent_dim),
            );
            let (grads, terms) =
                batch_gradient(&params, &x, &noise, config.variant, beta, dataset.len())
                    .expect("training shapes are consistent");
            adam.step(&mut params, &grads, config.learning_rate);
            let w = indices.len() as f64;
            sums.reconstruction += terms.reconstruction * w;
            sums.kl_analytic += terms.kl_analytic * w;
            sums.mutual_info_est += terms.mutual_info_est * w;
            sums.total_correlation_est += terms.total_correlation_est * w;
            sums.dimwise_kl_est += terms.dimwise_kl_est * w;
            seen += indices.len();
        }
        let n = seen as f64;
        history.push(LossTerms {
            reconstruction: sums.reconstruction / n,
            kl_analytic: sums.kl_analytic / n,
            mutual_info_est: sums.mutual_info_est / n,
            total_correlation_est: sums.total_correlation_est / n,
            dimwise_kl_est: sums.dimwise_kl_est / n,
        });
    }
    (params, history)
}

const PARAMS_MAGIC: &[u8; 8] = b"TVAEPRM1";

/// Serializes parameters: magic, little-endian u32 counts (total layers,
/// encoder layers, latent dim, input height, input width), then per layer
/// u32 rows/cols followed by row-major 64-bit weights and the bias row.
pub fn save_params(params: &VaeParameters) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    let total = params.encoder_layers.len() + params.decoder_layers.len();
    out.extend_from_slice(&(total as u32).to_le_bytes());
    out.extend_from_slice(&(params.encoder_layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&(params.latent_dim as u32).to_le_bytes());
    out.extend_from_slice(&(params.input_height as u32).to_le_bytes());
    out.extend_from_slice(&(params.input_width as u32).to_le_bytes());
    for layer in params.encoder_layers.iter().chain(&params.decoder_layers) {
        out.extend_from_slice(&(layer.weight.rows as u32).to_le_bytes());
        out.extend_from_slice(&(layer.weight.cols as u32).to_le_bytes());
        for v in &layer.weight.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &layer.bias {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VaeError> {
        let end = self.pos + n;
        if self.bytes.len() < end {
            return Err(VaeError::TruncatedPayload {
                needed: end,
                available: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, VaeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, VaeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_params(bytes: &[u8]) -> Result<VaeParameters, VaeError> {
    if bytes.len() < 8 {
        return Err(VaeError::TruncatedPayload {
            needed: 8,
            available: bytes.len(),
        });
    }
    if &bytes[..8] != PARAMS_MAGIC {
        if &bytes[..7] == &PARAMS_MAGIC[..7] {
            return Err(VaeError::VersionMismatch { found: bytes[7] });
        }
        return Err(VaeError::BadHeader);
    }
    let mut r = Reader { bytes, pos: 8 };
    let total = r.u32()? as usize;
    let encoder_count = r.u32()? as usize;
    let latent_dim = r.u32()? as usize;
    let input_height = r.u32()? as usize;
    let input_width = r.u32()? as usize;
    if encoder_count == 0 || encoder_count >= total || latent_dim == 0 {
        return Err(VaeError::BadHeader);
    }
    let mut layers = Vec::with_capacity(total);
    for _ in 0..total {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut weight = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            weight.push(r.f64()?);
        }
        let mut bias = Vec::with_capacity(cols);
        for _ in 0..cols {
            bias.push(r.f64()?);
        }
        layers.push(AffineLayer {
            weight: Mat::from_vec(rows, cols, weight),
            bias,
        });
    }
    let decoder_layers = layers.split_off(encoder_count);
    let params = VaeParameters {
        encoder_layers: layers,
        decoder_layers,
        latent_dim,
        input_height,
        input_width,
    };
    let input_dim = params.input_dim();
    let structure_ok = params.encoder_layers[0].weight.rows == input_dim
        && params.encoder_layers.last().unwrap().weight.cols == 2 * latent_dim
        && params.decoder_layers[0].weight.rows == latent_dim
        && params.decoder_layers.last().unwrap().weight.cols == input_dim;
    if !structure_ok {
        return Err(VaeError::BadHeader);
    }
    Ok(params)
}
