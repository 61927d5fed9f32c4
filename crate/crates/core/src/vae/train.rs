use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{standardize, Preprocess, TrainedVae, VaeConfig, VaeEnsemble, VaeError, VaeGradient};
use crate::spectral::pca_fit;

/// KL weight for a 1-based epoch index: β_max · min(1, t / T_warm).
pub fn kl_weight(epoch: usize, config: &VaeConfig) -> f64 {
    if config.warmup_epochs == 0 {
        return config.beta_max;
    }
    config.beta_max * (epoch as f64 / config.warmup_epochs as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_total: f64,
    pub val_recon: f64,
    pub val_kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, shapes: &[usize]) -> Self {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update. `scale` multiplies every gradient entry (used for
    /// norm clipping without materializing a scaled copy).
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, scale: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

/// Fits the PCA (when the raw dimension exceeds `config.input_dim`) and the
/// standardizer on `data` (rows are samples). Returns the preprocessing and
/// the preprocessed matrix. The effective input dimension may shrink to the
/// raw dimension or to N-1; the returned config reflects it.
pub fn fit_preprocess(
    data: &DMatrix<f64>,
    config: &VaeConfig,
) -> Result<(Preprocess, DMatrix<f64>, VaeConfig), VaeError> {
    let (n, p) = data.shape();
    if n == 0 {
        return Err(VaeError::EmptyData);
    }
    let mut config = config.clone();
    let (pca, reduced) = if p > config.input_dim {
        let k = config.input_dim.min(n.saturating_sub(1));
        let (mut pca, _) = pca_fit(data, k)?;
        pca.round_to_f32();
        let reduced = pca.transform_rows(data);
        (Some(pca), reduced)
    } else {
        (None, data.clone())
    };
    config.input_dim = reduced.ncols();
    let (_, mut stats) = standardize(&reduced)?;
    stats.round_to_f32();
    let x = DMatrix::from_fn(n, reduced.ncols(), |i, j| {
        (reduced[(i, j)] - stats.mean[j]) / (stats.scale[j] + stats.eps)
    });
    Ok((
        Preprocess {
            pca,
            standardizer: stats,
        },
        x,
        config,
    ))
}

/// Trains one model on raw data (rows are samples).
pub fn train_vae(data: &DMatrix<f64>, config: &VaeConfig) -> Result<TrainedVae, VaeError> {
    config.validate()?;
    let (pre, x, config) = fit_preprocess(data, config)?;
    train_with_preprocess(&x, config, pre)
}

/// Trains `members` models with seeds `config.seed + a`, sharing one fitted
/// preprocessing. Members train in parallel; each run is single-threaded and
/// deterministic.
pub fn train_ensemble(data: &DMatrix<f64>, config: &VaeConfig, members: usize) -> Result<VaeEnsemble, VaeError> {
    if members == 0 {
        return Err(VaeError::InvalidConfig("ensemble size must be >= 1".into()));
    }
    config.validate()?;
    let (pre, x, config) = fit_preprocess(data, config)?;
    let trained: Result<Vec<_>, _> = (0..members)
        .into_par_iter()
        .map(|a| {
            let mut c = config.clone();
            c.seed = config.seed.wrapping_add(a as u64);
            train_with_preprocess(&x, c, pre.clone())
        })
        .collect();
    VaeEnsemble::new(trained?)
}

fn gather_columns(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.ncols(), rows.len(), |i, j| x[(rows[j], i)])
}

fn noise_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Column-major fill: one full latent draw per sample, in sample order.
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

/// Trains on already preprocessed inputs `x` (rows are samples).
pub fn train_with_preprocess(
    x: &DMatrix<f64>,
    config: VaeConfig,
    preprocess: Preprocess,
) -> Result<TrainedVae, VaeError> {
    let n = x.nrows();
    if n == 0 {
        return Err(VaeError::EmptyData);
    }
    let needed = (2.0 / config.validation_fraction).ceil() as usize;
    if n < needed {
        return Err(VaeError::TooFewSamples { needed, got: n });
    }
    let mut model = TrainedVae::initialize(config.clone(), preprocess)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - 1);
    let (train_idx, val_idx) = order.split_at(n - n_val);
    let mut train_idx = train_idx.to_vec();
    let val_batch = gather_columns(x, val_idx);
    let val_noise = noise_matrix(&mut rng, config.latent_dim, val_idx.len());

    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay, &sizes);
    let mut log = TrainingLog::default();
    let mut plateau_best = f64::INFINITY;
    let mut plateau_bad = 0usize;
    let mut stop_best = f64::INFINITY;
    let mut stop_bad = 0usize;

    for epoch in 1..=config.max_epochs {
        let beta = kl_weight(epoch, &config);
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            let batch = gather_columns(x, chunk);
            let noise = noise_matrix(&mut rng, config.latent_dim, chunk.len());
            let (grad, terms) = model.gradient(&batch, beta, &noise)?;
            if !terms.total.is_finite() {
                return Err(VaeError::NonFiniteLoss { epoch });
            }
            loss_sum += terms.total * chunk.len() as f64;
            apply_update(&mut model, &mut opt, &grad, config.grad_clip_norm);
        }
        let val = model.batch_loss(&val_batch, beta, &val_noise);
        if !val.total.is_finite() {
            return Err(VaeError::NonFiniteLoss { epoch });
        }
        log.epochs.push(EpochRecord {
            epoch,
            beta,
            learning_rate: opt.learning_rate,
            train_loss: loss_sum / train_idx.len() as f64,
            val_total: val.total,
            val_recon: val.recon,
            val_kl: val.kl,
        });

        if improved(val.total, plateau_best, config.plateau_threshold) {
            plateau_best = val.total;
            plateau_bad = 0;
        } else {
            plateau_bad += 1;
            if plateau_bad > config.plateau_patience {
                opt.learning_rate *= config.plateau_factor;
                plateau_bad = 0;
            }
        }

        if epoch >= config.warmup_epochs {
            if improved(val.total, stop_best, config.plateau_threshold) {
                stop_best = val.total;
                stop_bad = 0;
            } else {
                stop_bad += 1;
                if stop_bad >= config.early_stop_patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    model.log = log;
    model.round_to_f32();
    Ok(model)
}

/// Relative improvement test, valid for losses of either sign.
fn improved(value: f64, best: f64, threshold: f64) -> bool {
    best.is_infinite() || value < best - threshold * best.abs()
}

fn apply_update(model: &mut TrainedVae, opt: &mut AdamW, grad: &VaeGradient, clip: f64) {
    let norm = grad.norm();
    let scale = if norm > clip { clip / norm } else { 1.0 };
    opt.step(model.tensors_mut(), grad.tensors(), scale);
}
