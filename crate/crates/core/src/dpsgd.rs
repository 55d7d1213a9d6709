//! Sparsified DP-SGD local training.
//!
//! A client draws one Bernoulli(`s`) mask per round and keeps it for every
//! local step. Each step masks the per-sample gradients, clips them at
//! `sqrt(s) * C`, averages, and adds Gaussian noise with standard deviation
//! `sigma_hat * sqrt(s) * C / |b|` on the retained coordinates only.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::model::{sample_loss_grad, Dataset, ModelWeights, Workspace};
use crate::rng::{Purpose, StreamRoot};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    bits: Vec<bool>,
    ones: usize,
}

impl SparsityMask {
    pub fn full(dim: usize) -> Self {
        Self {
            bits: vec![true; dim],
            ones: dim,
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        let ones = bits.iter().filter(|&&b| b).count();
        Self { bits, ones }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn ones(&self) -> usize {
        self.ones
    }

    /// Realized fraction of retained coordinates.
    pub fn rate(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.ones as f64 / self.bits.len() as f64
        }
    }

    pub fn apply(&self, v: &mut [f64]) {
        for (x, &keep) in v.iter_mut().zip(&self.bits) {
            if !keep {
                *x = 0.0;
            }
        }
    }
}

/// Each bit is 1 independently with probability `s`.
pub fn generate_mask<R: Rng + ?Sized>(dim: usize, s: f64, rng: &mut R) -> Result<SparsityMask> {
    if dim == 0 {
        return Err(invalid("dim", "mask dimension must be >= 1"));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid("s", format!("{s} not in [0, 1]")));
    }
    let bits = if s >= 1.0 {
        vec![true; dim]
    } else if s <= 0.0 {
        vec![false; dim]
    } else {
        (0..dim).map(|_| rng.random::<f64>() < s).collect()
    };
    Ok(SparsityMask::from_bits(bits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    /// Threshold `sqrt(s) * C`.
    Adaptive,
    /// Threshold `C` whatever the retention rate.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpConfig {
    pub clip_c: f64,
    pub sigma_hat: f64,
    pub batch_size: usize,
    pub tau: usize,
    pub eta: f64,
    pub clip_mode: ClipMode,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_c > 0.0) || !self.clip_c.is_finite() {
            return Err(invalid("clip_c", format!("{} must be > 0", self.clip_c)));
        }
        if !(self.sigma_hat >= 0.0) || !self.sigma_hat.is_finite() {
            return Err(invalid("sigma_hat", format!("{} must be >= 0", self.sigma_hat)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        if self.tau == 0 {
            return Err(invalid("tau", "must be >= 1"));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(invalid("eta", format!("{} must be > 0", self.eta)));
        }
        Ok(())
    }

    pub fn threshold(&self, s: f64) -> f64 {
        match self.clip_mode {
            ClipMode::Adaptive => s.sqrt() * self.clip_c,
            ClipMode::Fixed => self.clip_c,
        }
    }

    /// Per-coordinate noise standard deviation on the averaged gradient.
    pub fn noise_std(&self, s: f64) -> f64 {
        self.sigma_hat * self.threshold(s) / self.batch_size as f64
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `grad` in place to norm at most `threshold`; returns the original norm.
pub fn clip_in_place(grad: &mut [f64], threshold: f64) -> f64 {
    let n = norm(grad);
    if n > threshold {
        let scale = threshold / n;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    n
}

/// `grad * min(1, sqrt(s) * C / |grad|)`.
pub fn clip_per_sample(grad: &[f64], s: f64, clip_c: f64) -> Vec<f64> {
    let mut out = grad.to_vec();
    clip_in_place(&mut out, s.sqrt() * clip_c);
    out
}

/// Adds masked Gaussian noise to a batch-averaged clipped gradient.
pub fn perturb_average<R: Rng + ?Sized>(
    clipped_mean: &[f64],
    cfg: &DpConfig,
    s: f64,
    mask: &SparsityMask,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = clipped_mean.to_vec();
    add_noise(&mut out, cfg.noise_std(s), mask, rng);
    out
}

// Returns the squared norm of the added noise.
fn add_noise<R: Rng + ?Sized>(v: &mut [f64], std: f64, mask: &SparsityMask, rng: &mut R) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let mut sq = 0.0;
    for (x, &keep) in v.iter_mut().zip(mask.bits()) {
        if keep {
            let n = std * rng.sample::<f64, _>(StandardNormal);
            *x += n;
            sq += n * n;
        }
    }
    sq
}

/// The three random streams one client consumes in one round.
#[derive(Debug, Clone)]
pub struct TrainStreams {
    pub mask: ChaCha8Rng,
    pub batch: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl TrainStreams {
    pub fn new(root: &StreamRoot, client: usize, round: usize) -> Self {
        Self {
            mask: root.client_stream(client, round, Purpose::Mask),
            batch: root.client_stream(client, round, Purpose::Batch),
            noise: root.client_stream(client, round, Purpose::Noise),
        }
    }
}

/// Local training output plus quantities used by the bound diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    values: Vec<f64>,
    mask: SparsityMask,
    pub mean_loss: f64,
    /// Largest per-sample gradient norm seen before masking and clipping.
    pub max_grad_norm: f64,
    /// Mean squared norm of the noise vector per step.
    pub mean_noise_sq: f64,
}

impl SparseUpdate {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &SparsityMask {
        &self.mask
    }

    /// `32 * s * |g| + |g|` with `s` the realized fraction; always an integer.
    pub fn payload_bits(&self) -> u64 {
        32 * self.mask.ones() as u64 + self.mask.dim() as u64
    }
}

/// Runs `tau` masked, clipped, noised SGD steps from `w_init`; returns `w - w_init`.
pub fn local_train(
    w_init: &ModelWeights,
    data: &Dataset,
    s: f64,
    cfg: &DpConfig,
    streams: &mut TrainStreams,
    client: usize,
    round: usize,
) -> Result<SparseUpdate> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("data", "client partition is empty"));
    }
    if !(s > 0.0 && s <= 1.0) {
        return Err(invalid("s", format!("{s} not in (0, 1]")));
    }
    let dim = w_init.dim();
    let mask = generate_mask(dim, s, &mut streams.mask)?;
    let threshold = cfg.threshold(s);
    let std = cfg.noise_std(s);
    let b = cfg.batch_size;
    if b > data.len() {
        return Err(invalid(
            "batch_size",
            format!("{b} exceeds the {} local samples", data.len()),
        ));
    }

    let mut w = w_init.clone();
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; dim];
    let mut step = vec![0.0; dim];
    let mut loss_sum = 0.0;
    let mut max_grad_norm: f64 = 0.0;
    let mut noise_sq = 0.0;
    let diverged = || Error::TrainingDivergence { client, round };

    for _ in 0..cfg.tau {
        step.iter_mut().for_each(|x| *x = 0.0);
        let batch = index::sample(&mut streams.batch, data.len(), b);
        let mut batch_loss = 0.0;
        for i in batch.iter() {
            batch_loss += sample_loss_grad(&w, data.row(i), data.label(i), &mut grad, &mut ws);
            max_grad_norm = max_grad_norm.max(norm(&grad));
            mask.apply(&mut grad);
            clip_in_place(&mut grad, threshold);
            for (acc, g) in step.iter_mut().zip(&grad) {
                *acc += g;
            }
        }
        if !batch_loss.is_finite() || !max_grad_norm.is_finite() {
            return Err(diverged());
        }
        loss_sum += batch_loss / b as f64;
        step.iter_mut().for_each(|x| *x /= b as f64);
        noise_sq += add_noise(&mut step, std, &mask, &mut streams.noise);
        for (p, g) in w.params_mut().iter_mut().zip(&step) {
            *p -= cfg.eta * g;
        }
    }
    if !w.is_finite() {
        return Err(diverged());
    }
    let values: Vec<f64> = w
        .params()
        .iter()
        .zip(w_init.params())
        .zip(mask.bits())
        .map(|((a, b), &keep)| if keep { a - b } else { 0.0 })
        .collect();
    Ok(SparseUpdate {
        values,
        mask,
        mean_loss: loss_sum / cfg.tau as f64,
        max_grad_norm,
        mean_noise_sq: noise_sq / cfg.tau as f64,
    })
}
