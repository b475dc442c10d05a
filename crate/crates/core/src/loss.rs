//! Per-observation VAE loss and the weighted minibatch objective.
//!
//! The per-observation loss is the reconstruction error (negative log of a
//! unit-variance isotropic Gaussian) plus the generative error of every
//! latent coordinate, summed over both pyramid levels. The minibatch
//! objective weights each observation by the classifier and adds the sum of
//! the weights.

use crate::error::{Error, Result};
use crate::gradcore::{Binder, Graph, Tensor, Var};
use crate::laplace::{generative_error_var, prior, PosteriorParams, SQRT_HALF};
use crate::model::{
    check_weights, observation_weights, route_class, BnMode, Level, Model, LATENT_DIM,
};

/// `½·ln(2π)`, the per-coordinate constant of the reconstruction density.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Generative-error targets of one observation, indexed `[level][dim]`.
pub type ObservationTargets = [[PosteriorParams; LATENT_DIM]; 2];

/// Targets of a first run: the prior everywhere.
pub fn prior_targets() -> ObservationTargets {
    [[prior(); LATENT_DIM]; 2]
}

/// `½·‖x − decoded‖² + (dim/2)·ln(2π)`.
pub fn reconstruction_error(x: &[f64], decoded: &[f64]) -> Result<f64> {
    if x.len() != decoded.len() {
        return Err(Error::Shape {
            op: "reconstruction_error",
            left: vec![x.len()],
            right: vec![decoded.len()],
        });
    }
    let sq: f64 = x.iter().zip(decoded).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * sq + x.len() as f64 * HALF_LN_2PI)
}

/// Row-wise [`reconstruction_error`] on the tape: `[B, D]` pairs to `[B]`.
pub fn reconstruction_error_var(g: &mut Graph, x: Var, decoded: Var) -> Result<Var> {
    let d = g.sub(x, decoded)?;
    let sq = g.mul(d, d)?;
    let rows = g.sum_rows(sq)?;
    let dim = g.shape(x)[1] as f64;
    let half = g.scale(rows, 0.5);
    Ok(g.offset(half, dim * HALF_LN_2PI))
}

/// Everything one training step needs about a slice of the dataset.
#[derive(Clone, Debug)]
pub struct Minibatch {
    /// Dataset index of the first row.
    pub first_index: usize,
    pub labels: Vec<u8>,
    /// Residual band rows, `[B, D₁]`.
    pub residual: Tensor,
    /// Coarse band rows, `[B, D₂]`.
    pub coarse: Tensor,
    /// Raw images for the classifier, `[B, C, H, W]`.
    pub images: Tensor,
    pub targets: Vec<ObservationTargets>,
    /// Standardized Laplace noise per level, each `[B, 2]`; zeros give `z = μ`.
    pub noise: [Tensor; 2],
    /// Position of a hard-coded observation within the batch.
    pub hardcoded: Option<usize>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn band(&self, level: Level) -> &Tensor {
        match level {
            Level::Residual => &self.residual,
            Level::Coarse => &self.coarse,
        }
    }

    fn target_tensors(&self, level: Level) -> Result<(Tensor, Tensor)> {
        let mut mu = Vec::with_capacity(self.len() * LATENT_DIM);
        let mut sigma = Vec::with_capacity(self.len() * LATENT_DIM);
        for t in &self.targets {
            for p in &t[level.index()] {
                mu.push(p.mu);
                sigma.push(p.sigma);
            }
        }
        let shape = vec![self.len(), LATENT_DIM];
        Ok((Tensor::new(shape.clone(), mu)?, Tensor::new(shape, sigma)?))
    }
}

/// Tape handles of one level's loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LevelLoss {
    /// `[B]`
    pub reconstruction: Var,
    /// `[B, 2]`
    pub generative: Var,
    /// Decoded band, `[B, D]`.
    pub decoded: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Encode, sample, decode and score one level of a batch.
///
/// Heads use each row's own label; the decoder uses `decode_class` for every
/// row.
pub fn vae_loss(
    model: &Model,
    g: &mut Graph,
    b: &mut Binder,
    batch: &Minibatch,
    level: Level,
    decode_class: u8,
    mode: &mut BnMode,
) -> Result<LevelLoss> {
    if batch.targets.len() != batch.len() {
        return Err(Error::invalid(format!(
            "{} target rows for {} observations",
            batch.targets.len(),
            batch.len()
        )));
    }
    let x = g.constant(batch.band(level).clone());
    let hidden = model.encode(g, b, level, x, mode)?;
    let heads = model.heads(g, b, level, hidden, &batch.labels)?;
    let noise = batch.noise[level.index()].map(|s| s * SQRT_HALF);
    let noise = g.constant(noise);
    let spread = g.mul(heads.sigma, noise)?;
    let z = g.add(heads.mu, spread)?;
    let decoded = model.decode(g, b, level, z, decode_class, mode)?;
    let reconstruction = reconstruction_error_var(g, x, decoded)?;
    let (tmu, tsigma) = batch.target_tensors(level)?;
    let generative =
        generative_error_var(g, heads.mu, heads.log_sigma, heads.sigma, &tmu, &tsigma)?;
    Ok(LevelLoss {
        reconstruction,
        generative,
        decoded,
        mu: heads.mu,
        sigma: heads.sigma,
    })
}

/// `Σ W·loss + Σ W`, after checking the weight invariants.
pub fn weighted_minibatch_loss(g: &mut Graph, per_observation: Var, weights: Var) -> Result<Var> {
    if g.shape(per_observation) != g.shape(weights) {
        return Err(Error::Shape {
            op: "weighted_minibatch_loss",
            left: g.shape(per_observation).to_vec(),
            right: g.shape(weights).to_vec(),
        });
    }
    check_weights(g.value(weights).data())?;
    let wl = g.mul(weights, per_observation)?;
    let first = g.sum(wl);
    let second = g.sum(weights);
    g.add(first, second)
}

/// Tape handles of a full minibatch forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub weights: Var,
    pub levels: [LevelLoss; 2],
    /// Per-observation loss summed over levels, `[B]`.
    pub per_observation: Var,
    pub total: Var,
    /// Decoder class used for the whole batch.
    pub class: u8,
}

/// Classifier weights, both levels' losses and the weighted objective.
pub fn minibatch_forward(
    model: &Model,
    g: &mut Graph,
    b: &mut Binder,
    batch: &Minibatch,
    mode: &mut BnMode,
) -> Result<ForwardPass> {
    let images = g.constant(batch.images.clone());
    let logits = model.classifier_logits(g, b, images, mode)?;
    let weights = observation_weights(g, logits, batch.hardcoded)?;
    let class = route_class(&batch.labels, g.value(weights).data(), batch.hardcoded);
    let mut levels = Vec::with_capacity(2);
    let mut per_observation: Option<Var> = None;
    for level in Level::ALL {
        let l = vae_loss(model, g, b, batch, level, class, mode)?;
        let gen = g.sum_rows(l.generative)?;
        let term = g.add(l.reconstruction, gen)?;
        per_observation = Some(match per_observation {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
        levels.push(l);
    }
    let per_observation = per_observation.expect("two levels");
    let total = weighted_minibatch_loss(g, per_observation, weights)?;
    Ok(ForwardPass {
        weights,
        levels: [levels[0], levels[1]],
        per_observation,
        total,
        class,
    })
}

/// Numbers read back from a [`ForwardPass`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Reconstruction error per level and observation.
    pub reconstruction: [Vec<f64>; 2],
    /// Generative error per level, observation and latent dimension.
    pub generative: [Vec<[f64; LATENT_DIM]>; 2],
    pub weights: Vec<f64>,
    pub weighted_total: f64,
    pub class: u8,
}

impl LossBreakdown {
    pub fn read(g: &Graph, pass: &ForwardPass) -> Result<Self> {
        let mut reconstruction = [Vec::new(), Vec::new()];
        let mut generative = [Vec::new(), Vec::new()];
        for (i, l) in pass.levels.iter().enumerate() {
            reconstruction[i] = g.value(l.reconstruction).data().to_vec();
            generative[i] = g
                .value(l.generative)
                .data()
                .chunks(LATENT_DIM)
                .map(|c| [c[0], c[1]])
                .collect();
        }
        let out = LossBreakdown {
            reconstruction,
            generative,
            weights: g.value(pass.weights).data().to_vec(),
            weighted_total: g.value(pass.total).item(),
            class: pass.class,
        };
        if !out.weighted_total.is_finite() {
            return Err(Error::NonFinite("weighted minibatch loss".into()));
        }
        Ok(out)
    }

    pub fn mean_reconstruction(&self, level: Level) -> f64 {
        let v = &self.reconstruction[level.index()];
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn mean_generative(&self, level: Level) -> f64 {
        let v = &self.generative[level.index()];
        v.iter().map(|d| d[0] + d[1]).sum::<f64>() / v.len() as f64
    }

    /// Batch position of the largest weight.
    pub fn dominant(&self) -> usize {
        crate::model::argmax(&self.weights)
    }
}
