//! β-VAE over hidden states: MLP encoder/decoder with diagonal Gaussian
//! heads, its exact training objective, and reverse-mode gradients.
//!
//! Raw hidden states pass through an optional PCA projection and a per-feature
//! standardization before reaching the encoder; [`TrainedVae`] carries that
//! preprocessing so callers can encode raw states directly.

mod checkpoint;
pub mod net;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{Pca, SpectralError};
pub use checkpoint::{load_ensemble, load_vae, save_ensemble, save_vae, ENSEMBLE_FILE};
pub use net::GaussianMlp;
pub use train::{
    fit_preprocess, kl_weight, train_ensemble, train_vae, train_with_preprocess, AdamW, EpochRecord, TrainingLog,
};

/// Feature standardization floor.
pub const STANDARDIZE_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum VaeError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("no training data")]
    EmptyData,
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub latent_dim: usize,
    pub beta_max: f64,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub decoder_logvar_clip: (f64, f64),
    pub seed: u64,
    /// Plateau scheduler: multiply the learning rate by this factor ...
    pub plateau_factor: f64,
    /// ... after this many epochs without relative improvement ...
    pub plateau_patience: usize,
    /// ... of at least this fraction.
    pub plateau_threshold: f64,
    /// Post-warmup epochs without validation improvement before stopping.
    pub early_stop_patience: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            input_dim: 256,
            hidden_widths: vec![256, 128, 64],
            latent_dim: 32,
            beta_max: 0.5,
            warmup_epochs: 20,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            grad_clip_norm: 1.0,
            max_epochs: 200,
            batch_size: 1024,
            validation_fraction: 0.10,
            decoder_logvar_clip: (-4.0, 4.0),
            seed: 0,
            plateau_factor: 0.5,
            plateau_patience: 10,
            plateau_threshold: 1e-4,
            early_stop_patience: 20,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        let bad = |m: &str| Err(VaeError::InvalidConfig(m.to_string()));
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden_widths.contains(&0) {
            return bad("all dimensions must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        let (lo, hi) = self.decoder_logvar_clip;
        if !(lo < hi) {
            return bad("decoder_logvar_clip must be a nonempty interval");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if self.beta_max < 0.0 || self.learning_rate <= 0.0 || self.grad_clip_norm <= 0.0 {
            return bad("beta_max must be >= 0, learning_rate and grad_clip_norm > 0");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianPosterior {
    pub fn variance(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| l.exp()).collect()
    }
}

/// Diagonal Gaussian over the (preprocessed) input space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLikelihood {
    pub mean: Vec<f64>,
    /// Clamped to the configured interval.
    pub logvar: Vec<f64>,
}

/// Per-feature standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub eps: f64,
}

impl Standardizer {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / (s + self.eps))
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * (s + self.eps) + m)
            .collect()
    }

    pub(crate) fn round_to_f32(&mut self) {
        for v in self.mean.iter_mut().chain(self.scale.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

/// Standardizes each column to zero mean and unit scale via `(x - μ)/(σ + ε)`,
/// with σ the population standard deviation. Rows are samples.
pub fn standardize(features: &DMatrix<f64>) -> Result<(DMatrix<f64>, Standardizer), VaeError> {
    let (n, p) = features.shape();
    if n < 2 {
        return Err(VaeError::TooFewSamples { needed: 2, got: n });
    }
    let mut mean = Vec::with_capacity(p);
    let mut scale = Vec::with_capacity(p);
    for col in features.column_iter() {
        let m = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        mean.push(m);
        scale.push(var.sqrt());
    }
    let stats = Standardizer {
        mean,
        scale,
        eps: STANDARDIZE_EPS,
    };
    let out = DMatrix::from_fn(n, p, |i, j| {
        (features[(i, j)] - stats.mean[j]) / (stats.scale[j] + stats.eps)
    });
    Ok((out, stats))
}

/// Optional PCA followed by standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub pca: Option<Pca>,
    pub standardizer: Standardizer,
}

impl Preprocess {
    pub fn raw_dim(&self) -> usize {
        self.pca.as_ref().map(|p| p.dim).unwrap_or(self.standardizer.mean.len())
    }

    pub fn output_dim(&self) -> usize {
        self.standardizer.mean.len()
    }

    pub fn apply(&self, raw: &[f64]) -> Result<Vec<f64>, VaeError> {
        if raw.len() != self.raw_dim() {
            return Err(VaeError::DimensionMismatch {
                expected: self.raw_dim(),
                got: raw.len(),
            });
        }
        Ok(match &self.pca {
            Some(p) => self.standardizer.apply(&p.transform(raw)),
            None => self.standardizer.apply(raw),
        })
    }

    /// Identity preprocessing on `dim` features.
    pub fn identity(dim: usize) -> Self {
        Preprocess {
            pca: None,
            standardizer: Standardizer {
                mean: vec![0.0; dim],
                scale: vec![1.0; dim],
                eps: 0.0,
            },
        }
    }
}

/// Reconstruction, KL and total loss of one sample or a batch mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Parameter gradient set with the same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGradient {
    pub encoder: GaussianMlp,
    pub decoder: GaussianMlp,
}

impl VaeGradient {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedVae {
    pub config: VaeConfig,
    pub encoder: GaussianMlp,
    pub decoder: GaussianMlp,
    pub preprocess: Preprocess,
    pub log: TrainingLog,
}

/// Which parameterization of the decoder's spread enters the pullback map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SpreadParam {
    /// σ(z) = exp(logvar/2), as written in the decoder map.
    #[default]
    Sigma,
    LogVar,
}

/// Decoder outputs at a latent point with Jacobians of the map
/// `z ↦ [μ(z); spread(z)]`.
#[derive(Debug, Clone)]
pub struct DecoderJacobian {
    pub mean: DVector<f64>,
    pub logvar: DVector<f64>,
    /// (2·d_in) × d_z: mean rows followed by spread rows.
    pub jacobian: DMatrix<f64>,
}

impl TrainedVae {
    /// Freshly initialized (untrained) model.
    pub fn initialize(config: VaeConfig, preprocess: Preprocess) -> Result<Self, VaeError> {
        config.validate()?;
        if preprocess.output_dim() != config.input_dim {
            return Err(VaeError::DimensionMismatch {
                expected: config.input_dim,
                got: preprocess.output_dim(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = GaussianMlp::init(config.input_dim, &config.hidden_widths, config.latent_dim, &mut rng);
        let widths: Vec<usize> = config.hidden_widths.iter().rev().copied().collect();
        let decoder = GaussianMlp::init(config.latent_dim, &widths, config.input_dim, &mut rng);
        Ok(TrainedVae {
            config,
            encoder,
            decoder,
            preprocess,
            log: TrainingLog::default(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Encodes a preprocessed input.
    pub fn encode(&self, x: &[f64]) -> Result<GaussianPosterior, VaeError> {
        check_dim(self.input_dim(), x.len())?;
        let (mean, logvar, _) = self.encoder.forward(&DMatrix::from_column_slice(x.len(), 1, x));
        Ok(GaussianPosterior {
            mean: mean.iter().copied().collect(),
            logvar: logvar.iter().copied().collect(),
        })
    }

    /// Preprocesses a raw hidden state, then encodes it.
    pub fn encode_raw(&self, raw: &[f64]) -> Result<GaussianPosterior, VaeError> {
        self.encode(&self.preprocess.apply(raw)?)
    }

    pub fn decode(&self, z: &[f64]) -> Result<GaussianLikelihood, VaeError> {
        check_dim(self.latent_dim(), z.len())?;
        let (mean, logvar, _) = self.decoder.forward(&DMatrix::from_column_slice(z.len(), 1, z));
        let (lo, hi) = self.config.decoder_logvar_clip;
        Ok(GaussianLikelihood {
            mean: mean.iter().copied().collect(),
            logvar: logvar.iter().map(|v| v.clamp(lo, hi)).collect(),
        })
    }

    /// Analytic Jacobian of the decoder map at `z`. Clamped log-variance
    /// outputs have zero derivative.
    pub fn decoder_jacobian(&self, z: &[f64], spread: SpreadParam) -> Result<DecoderJacobian, VaeError> {
        check_dim(self.latent_dim(), z.len())?;
        let (mean, raw_logvar, j_mean, mut j_logvar) = self.decoder.jacobian(z);
        let (lo, hi) = self.config.decoder_logvar_clip;
        let logvar = raw_logvar.map(|v| v.clamp(lo, hi));
        for r in 0..raw_logvar.len() {
            let inside = raw_logvar[r] >= lo && raw_logvar[r] <= hi;
            let scale = match (inside, spread) {
                (false, _) => 0.0,
                (true, SpreadParam::LogVar) => 1.0,
                (true, SpreadParam::Sigma) => 0.5 * (0.5 * logvar[r]).exp(),
            };
            j_logvar.row_mut(r).scale_mut(scale);
        }
        let d = mean.len();
        let mut jacobian = DMatrix::zeros(2 * d, z.len());
        jacobian.rows_mut(0, d).copy_from(&j_mean);
        jacobian.rows_mut(d, d).copy_from(&j_logvar);
        Ok(DecoderJacobian { mean, logvar, jacobian })
    }

    /// Value of the decoder map `[μ(z); spread(z)]`, used for finite-difference
    /// cross-checks of [`Self::decoder_jacobian`].
    pub fn decoder_map(&self, z: &[f64], spread: SpreadParam) -> Result<Vec<f64>, VaeError> {
        let lik = self.decode(z)?;
        let mut out = lik.mean;
        out.extend(lik.logvar.iter().map(|l| match spread {
            SpreadParam::Sigma => (0.5 * l).exp(),
            SpreadParam::LogVar => *l,
        }));
        Ok(out)
    }

    /// Single-sample ELBO terms for one preprocessed input and a fixed noise draw.
    pub fn elbo_loss(&self, x: &[f64], beta: f64, noise: &[f64]) -> Result<ElboTerms, VaeError> {
        check_dim(self.input_dim(), x.len())?;
        check_dim(self.latent_dim(), noise.len())?;
        let xb = DMatrix::from_column_slice(x.len(), 1, x);
        let nb = DMatrix::from_column_slice(noise.len(), 1, noise);
        let terms = self.batch_loss(&xb, beta, &nb);
        if !terms.total.is_finite() {
            return Err(VaeError::NonFiniteLoss { epoch: 0 });
        }
        Ok(terms)
    }

    /// Mean ELBO terms over a `d_in × B` batch with a `d_z × B` noise matrix.
    pub fn batch_loss(&self, batch: &DMatrix<f64>, beta: f64, noise: &DMatrix<f64>) -> ElboTerms {
        self.loss_and_grad(batch, beta, noise, false).0
    }

    /// Exact gradient of the mean batch loss.
    pub fn gradient(
        &self,
        batch: &DMatrix<f64>,
        beta: f64,
        noise: &DMatrix<f64>,
    ) -> Result<(VaeGradient, ElboTerms), VaeError> {
        if batch.ncols() == 0 {
            return Err(VaeError::EmptyData);
        }
        check_dim(self.input_dim(), batch.nrows())?;
        check_dim(self.latent_dim(), noise.nrows())?;
        let (terms, grad) = self.loss_and_grad(batch, beta, noise, true);
        let grad = grad.expect("gradient requested");
        if grad.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(VaeError::NonFiniteGradient);
        }
        Ok((grad, terms))
    }

    fn loss_and_grad(
        &self,
        batch: &DMatrix<f64>,
        beta: f64,
        noise: &DMatrix<f64>,
        want_grad: bool,
    ) -> (ElboTerms, Option<VaeGradient>) {
        let b = batch.ncols();
        let inv_b = 1.0 / b as f64;
        let (mu_z, lv_z, enc_cache) = self.encoder.forward(batch);
        let std_z = lv_z.map(|l| (0.5 * l).exp());
        let z = &mu_z + std_z.component_mul(noise);
        let (mu_x, raw_lv_x, dec_cache) = self.decoder.forward(&z);
        let (lo, hi) = self.config.decoder_logvar_clip;
        let lv_x = raw_lv_x.map(|v| v.clamp(lo, hi));

        let mut recon = 0.0;
        let mut kl = 0.0;
        for j in 0..b {
            for i in 0..batch.nrows() {
                let r = batch[(i, j)] - mu_x[(i, j)];
                recon += 0.5 * (lv_x[(i, j)] + r * r * (-lv_x[(i, j)]).exp());
            }
            for k in 0..mu_z.nrows() {
                let (m, l) = (mu_z[(k, j)], lv_z[(k, j)]);
                kl += -0.5 * (1.0 + l - m * m - l.exp());
            }
        }
        recon *= inv_b;
        kl *= inv_b;
        let terms = ElboTerms {
            total: recon + beta * kl,
            recon,
            kl,
        };
        if !want_grad {
            return (terms, None);
        }

        let resid = batch - &mu_x;
        let inv_var_x = lv_x.map(|l| (-l).exp());
        let d_mu_x = -resid.component_mul(&inv_var_x) * inv_b;
        let mut d_lv_x = DMatrix::zeros(lv_x.nrows(), b);
        for j in 0..b {
            for i in 0..lv_x.nrows() {
                let raw = raw_lv_x[(i, j)];
                if raw >= lo && raw <= hi {
                    let r = resid[(i, j)];
                    d_lv_x[(i, j)] = 0.5 * (1.0 - r * r * inv_var_x[(i, j)]) * inv_b;
                }
            }
        }
        let mut decoder_grad = self.decoder.zeros_like();
        let dz = self.decoder.backward(&dec_cache, &d_mu_x, &d_lv_x, &mut decoder_grad);
        let d_mu_z = &dz + &mu_z * (beta * inv_b);
        let mut d_lv_z = DMatrix::zeros(lv_z.nrows(), b);
        for j in 0..b {
            for k in 0..lv_z.nrows() {
                let s = std_z[(k, j)];
                d_lv_z[(k, j)] = dz[(k, j)] * 0.5 * s * noise[(k, j)] + beta * 0.5 * (s * s - 1.0) * inv_b;
            }
        }
        let mut encoder_grad = self.encoder.zeros_like();
        self.encoder.backward(&enc_cache, &d_mu_z, &d_lv_z, &mut encoder_grad);
        (
            terms,
            Some(VaeGradient {
                encoder: encoder_grad,
                decoder: decoder_grad,
            }),
        )
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t
    }

    pub(crate) fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.preprocess.standardizer.round_to_f32();
        if let Some(p) = self.preprocess.pca.as_mut() {
            p.round_to_f32();
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), VaeError> {
    if expected != got {
        Err(VaeError::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

/// z = μ + exp(logvar/2) ⊙ noise.
pub fn reparameterize(posterior: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>, VaeError> {
    check_dim(posterior.mean.len(), noise.len())?;
    Ok(posterior
        .mean
        .iter()
        .zip(&posterior.logvar)
        .zip(noise)
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect())
}

/// M independently seeded models sharing one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeEnsemble {
    pub members: Vec<TrainedVae>,
}

impl VaeEnsemble {
    pub fn new(members: Vec<TrainedVae>) -> Result<Self, VaeError> {
        let first = members
            .first()
            .ok_or_else(|| VaeError::InvalidConfig("ensemble needs at least one member".into()))?;
        for m in &members[1..] {
            if m.encoder.shapes() != first.encoder.shapes()
                || m.decoder.shapes() != first.decoder.shapes()
                || m.preprocess.raw_dim() != first.preprocess.raw_dim()
            {
                return Err(VaeError::InvalidConfig(
                    "ensemble members must share one architecture".into(),
                ));
            }
        }
        Ok(VaeEnsemble { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.members[0].latent_dim()
    }

    pub fn raw_dim(&self) -> usize {
        self.members[0].preprocess.raw_dim()
    }

    /// Each member's posterior for a raw hidden state.
    pub fn encode_raw(&self, raw: &[f64]) -> Result<Vec<GaussianPosterior>, VaeError> {
        self.members.iter().map(|m| m.encode_raw(raw)).collect()
    }
}
