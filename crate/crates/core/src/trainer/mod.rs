//! The two-run training protocol.
//!
//! Run 1 trains against the prior. Its final eval-mode head outputs form a
//! [`DriftRegistry`], which run 2 (started from run 1's parameters) uses as
//! per-observation generative-error targets. Minibatches are consecutive
//! slices of the dataset in its stored order, every epoch.

mod metrics;
mod registry;

pub use metrics::{metrics_csv, EpochMetrics, METRICS_HEADER};
pub use registry::{DriftRegistry, REGISTRY_HEADER};

use std::collections::BTreeSet;
use std::ops::Range;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::gradcore::{AdamState, Binder, Checkpoint, Graph, Tensor};
use crate::laplace::{generative_error, standard_noise};
use crate::loss::{minibatch_forward, prior_targets, LossBreakdown, Minibatch, ObservationTargets};
use crate::model::{argmax, Bands, BnMode, Level, Model, ModelSpec, LATENT_DIM};
use crate::rng::{stream, CounterRng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Dataset indices whose weight is forced to the minibatch maximum.
    pub hardcoded: Vec<usize>,
    pub run: u32,
    pub learning_rate: f64,
    /// Epochs over which the learning rate halves.
    pub half_life: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1000,
            epochs: 30,
            seed: 7,
            hardcoded: vec![8, 1020, 2016],
            run: 1,
            learning_rate: 0.001,
            half_life: 100.0,
        }
    }
}

impl TrainConfig {
    /// 1,000 observations in minibatches of 100 for 30 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 100,
            hardcoded: vec![8],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if n == 0 || !n.is_multiple_of(self.batch_size) {
            return Err(Error::invalid(format!(
                "batch size {} does not divide the training-set size {n}",
                self.batch_size
            )));
        }
        if self.run == 0 {
            return Err(Error::invalid("run numbers start at 1"));
        }
        if !(self.learning_rate > 0.0 && self.half_life > 0.0) {
            return Err(Error::invalid(
                "learning rate and half-life must be positive",
            ));
        }
        let mut batches = BTreeSet::new();
        let mut seen = BTreeSet::new();
        for &h in &self.hardcoded {
            if h >= n {
                return Err(Error::invalid(format!(
                    "hard-coded index {h} outside 0..{n}"
                )));
            }
            if !seen.insert(h) {
                return Err(Error::invalid(format!("hard-coded index {h} listed twice")));
            }
            if !batches.insert(h / self.batch_size) {
                return Err(Error::invalid(format!(
                    "hard-coded index {h} shares minibatch {} with another",
                    h / self.batch_size
                )));
            }
        }
        Ok(())
    }

    pub fn num_batches(&self, n: usize) -> usize {
        n / self.batch_size
    }

    pub fn batch_range(&self, batch: usize) -> Range<usize> {
        batch * self.batch_size..(batch + 1) * self.batch_size
    }

    /// Hard-coded dataset index falling in `batch`, if any.
    pub fn hardcoded_in(&self, batch: usize) -> Option<usize> {
        self.hardcoded
            .iter()
            .copied()
            .find(|&h| h / self.batch_size == batch)
    }
}

/// Where a run's parameters come from.
pub enum Start {
    Fresh { spec: ModelSpec, init_seed: u64 },
    Resume(Checkpoint),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub registry: DriftRegistry,
    pub metrics: Vec<EpochMetrics>,
    /// Dominant dataset index of every minibatch in the final epoch.
    pub dominant: Vec<usize>,
    /// Observation weights of the final epoch, in dataset order.
    pub final_weights: Vec<f64>,
    /// For runs after the first: each observation's generative error
    /// against its registry targets before any update.
    pub initial_generative: Option<Vec<f64>>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }
}

fn uniform_noise(
    rng: &CounterRng,
    epoch: usize,
    range: &Range<usize>,
    level: Level,
) -> Result<Tensor> {
    let mut v = Vec::with_capacity(range.len() * LATENT_DIM);
    for i in range.clone() {
        for d in 0..LATENT_DIM {
            v.push(standard_noise(rng.latent_uniform(
                stream::TRAIN_NOISE,
                epoch,
                i,
                level.number(),
                d,
            ))?);
        }
    }
    Tensor::new(vec![range.len(), LATENT_DIM], v)
}

#[allow(clippy::too_many_arguments)]
fn minibatch(
    data: &Dataset,
    bands: &Bands,
    range: Range<usize>,
    targets: &[ObservationTargets],
    hardcoded: Option<usize>,
    rng: &CounterRng,
    epoch: usize,
) -> Result<Minibatch> {
    let s = data.shape;
    let len = s.len();
    Ok(Minibatch {
        first_index: range.start,
        labels: data.labels[range.clone()].to_vec(),
        residual: bands.batch(Level::Residual, range.clone()),
        coarse: bands.batch(Level::Coarse, range.clone()),
        images: Tensor::new(
            vec![range.len(), s.channels, s.side, s.side],
            data.images[range.start * len..range.end * len].to_vec(),
        )?,
        targets: targets[range.clone()].to_vec(),
        noise: [
            uniform_noise(rng, epoch, &range, Level::Residual)?,
            uniform_noise(rng, epoch, &range, Level::Coarse)?,
        ],
        hardcoded: hardcoded.map(|h| h - range.start),
    })
}

/// Trains one run.
///
/// `on_epoch` sees every epoch's metrics and the parameters after it, for
/// logging and periodic checkpoints.
pub fn train_run(
    config: &TrainConfig,
    data: &Dataset,
    start: Start,
    registry: Option<&DriftRegistry>,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model, &AdamState) -> Result<()>,
) -> Result<TrainOutcome> {
    let n = data.len();
    config.validate(n)?;
    let targets: Vec<ObservationTargets> = match (config.run, registry) {
        (1, None) => vec![prior_targets(); n],
        (1, Some(_)) => {
            return Err(Error::invalid(
                "run 1 trains against the prior and takes no registry",
            ))
        }
        (_, None) => {
            return Err(Error::invalid(format!(
                "run {} requires a drift registry",
                config.run
            )))
        }
        (_, Some(r)) if r.len() != n => {
            return Err(Error::invalid(format!(
                "registry covers {} observations, training set has {n}",
                r.len()
            )))
        }
        (_, Some(r)) => r.rows().to_vec(),
    };
    let (mut model, mut adam) = match start {
        Start::Fresh { spec, init_seed } => (
            Model::init(spec, init_seed),
            AdamState::new(config.learning_rate, config.half_life),
        ),
        Start::Resume(c) => {
            let mut adam = c.adam;
            adam.base_lr = config.learning_rate;
            adam.half_life = config.half_life;
            (Model::from_params(c.params)?, adam)
        }
    };
    if model.spec.image != data.shape {
        return Err(Error::invalid(format!(
            "model expects {}x{}x{} images, data has {}x{}x{}",
            model.spec.image.channels,
            model.spec.image.side,
            model.spec.image.side,
            data.shape.channels,
            data.shape.side,
            data.shape.side
        )));
    }
    model
        .params
        .buffers
        .insert("meta.train_count".into(), Tensor::vector(vec![n as f64]));
    let bands = Bands::of(data)?;
    let initial_generative = match registry {
        Some(r) => Some(generative_errors(&model, data, &bands, r)?),
        None => None,
    };
    let rng = CounterRng::new(config.seed);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut dominant = Vec::new();
    let mut final_weights = Vec::with_capacity(n);
    for epoch in 0..config.epochs {
        let mut rec = [0.0; 2];
        let mut gen = [0.0; 2];
        let mut total = 0.0;
        let mut best = (f64::MIN, 0usize);
        dominant.clear();
        final_weights.clear();
        for bi in 0..config.num_batches(n) {
            let range = config.batch_range(bi);
            let hard = config.hardcoded_in(bi);
            let batch = minibatch(data, &bands, range.clone(), &targets, hard, &rng, epoch)?;
            let at = |e: Error| match e {
                Error::NonFinite(what) => {
                    Error::NonFinite(format!("{what} at epoch {epoch}, minibatch {bi}"))
                }
                other => other,
            };
            let (breakdown, grads, stats) = {
                let mut g = Graph::new();
                let mut b = Binder::new(&model.params);
                let mut mode = BnMode::train();
                let pass =
                    minibatch_forward(&model, &mut g, &mut b, &batch, &mut mode).map_err(at)?;
                let breakdown = LossBreakdown::read(&g, &pass).map_err(at)?;
                let grads = b.gradients(&g.backward(pass.total)?);
                let BnMode::Train(stats) = mode else {
                    unreachable!()
                };
                (breakdown, grads, stats)
            };
            adam.step(&mut model.params, &grads, epoch).map_err(at)?;
            model.apply_bn_updates(&stats)?;

            for level in Level::ALL {
                let i = level.index();
                rec[i] += breakdown.reconstruction[i].iter().sum::<f64>();
                gen[i] += breakdown.generative[i]
                    .iter()
                    .map(|d| d[0] + d[1])
                    .sum::<f64>();
            }
            total += breakdown.weighted_total;
            let top = breakdown.dominant();
            if breakdown.weights[top] > best.0 {
                best = (breakdown.weights[top], range.start + top);
            }
            dominant.push(hard.unwrap_or(range.start + top));
            final_weights.extend_from_slice(&breakdown.weights);
        }
        let m = EpochMetrics {
            epoch,
            reconstruction: rec.map(|v| v / n as f64),
            generative: gen.map(|v| v / n as f64),
            weighted_total: total,
            max_weight_index: best.1,
        };
        on_epoch(&m, &model, &adam)?;
        metrics.push(m);
    }
    let registry = extract_drifts_with(&model, data, &bands)?;
    Ok(TrainOutcome {
        model,
        adam,
        registry,
        metrics,
        dominant,
        final_weights,
        initial_generative,
    })
}

/// Eval-mode `(μ, σ)` of every observation under its own class.
pub fn extract_drifts(model: &Model, data: &Dataset) -> Result<DriftRegistry> {
    extract_drifts_with(model, data, &Bands::of(data)?)
}

fn extract_drifts_with(model: &Model, data: &Dataset, bands: &Bands) -> Result<DriftRegistry> {
    let mut rows = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let p = model.posterior(
            bands.band(Level::Residual, i),
            bands.band(Level::Coarse, i),
            data.labels[i],
        )?;
        rows.push(p);
    }
    DriftRegistry::new(rows)
}

/// Generative error of each observation's eval-mode posterior against its
/// registry targets, summed over levels and dimensions.
pub fn generative_errors(
    model: &Model,
    data: &Dataset,
    bands: &Bands,
    registry: &DriftRegistry,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let target = registry
            .get(i)
            .ok_or_else(|| Error::invalid(format!("registry has no row for observation {i}")))?;
        let post = model.posterior(
            bands.band(Level::Residual, i),
            bands.band(Level::Coarse, i),
            data.labels[i],
        )?;
        let mut e = 0.0;
        for l in 0..2 {
            for d in 0..LATENT_DIM {
                e += generative_error(post[l][d], target[l][d])?;
            }
        }
        out.push(e);
    }
    Ok(out)
}

/// Per-pixel mean squared error between `a` and `b`.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Eval-mode reconstruction of observation `i`: encode both bands, decode
/// the drifts (noise-free) with the observation's class, recombine.
pub fn reconstruct(model: &Model, data: &Dataset, bands: &Bands, i: usize) -> Result<Tensor> {
    let class = data.labels[i];
    let p = model.posterior(
        bands.band(Level::Residual, i),
        bands.band(Level::Coarse, i),
        class,
    )?;
    model.decode_image([[p[0][0].mu, p[0][1].mu], [p[1][0].mu, p[1][1].mu]], class)
}

/// Per-observation reconstruction MSE.
pub fn reconstruction_report(model: &Model, data: &Dataset) -> Result<Vec<f64>> {
    let bands = Bands::of(data)?;
    (0..data.len())
        .map(|i| {
            Ok(mse(
                reconstruct(model, data, &bands, i)?.data(),
                data.pixels(i),
            ))
        })
        .collect()
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Position of the dominant weight of a minibatch given its weights.
pub fn dominant_position(weights: &[f64], hardcoded: Option<usize>) -> usize {
    hardcoded.unwrap_or_else(|| argmax(weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{parse_cifar10, synthetic_batch};
    use crate::pyramid::ImageShape;

    #[test]
    fn minibatch_membership_examples() {
        let c = TrainConfig::default();
        c.validate(50_000).unwrap();
        assert_eq!(c.num_batches(50_000), 50);
        assert_eq!([8, 1020, 2016].map(|h| h / c.batch_size), [0, 1, 2]);
        assert_eq!(c.hardcoded_in(1), Some(1020));
        assert_eq!(c.hardcoded_in(3), None);
        let d = TrainConfig::desk();
        d.validate(1000).unwrap();
        assert_eq!(d.num_batches(1000), 10);
        assert_eq!(d.batch_range(3), 300..400);
    }

    #[test]
    fn invalid_configs() {
        let d = TrainConfig::desk();
        assert!(d.validate(1050).is_err());
        assert!(TrainConfig {
            hardcoded: vec![8, 8],
            ..d.clone()
        }
        .validate(1000)
        .is_err());
        assert!(TrainConfig {
            hardcoded: vec![8, 12],
            ..d.clone()
        }
        .validate(1000)
        .is_err());
        assert!(TrainConfig {
            hardcoded: vec![1000],
            ..d.clone()
        }
        .validate(1000)
        .is_err());
        assert!(TrainConfig {
            batch_size: 1,
            ..d.clone()
        }
        .validate(1000)
        .is_err());
        assert!(TrainConfig { run: 0, ..d }.validate(1000).is_err());
    }

    fn tiny() -> (Dataset, ModelSpec) {
        let (images, labels) = parse_cifar10(&synthetic_batch(2, 12)).unwrap();
        let data = Dataset::new(ImageShape::CIFAR, images, labels)
            .unwrap()
            .downscale(4)
            .unwrap();
        let spec = ModelSpec {
            image: data.shape,
            residual_hidden: 4,
            coarse_hidden: 3,
            num_classes: 10,
            classifier_widths: [4, 4, 4],
        };
        (data, spec)
    }

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            hardcoded: vec![5],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn prior_initialized_heads_give_prior_rows() {
        let (data, spec) = tiny();
        let reg = extract_drifts(&Model::init(spec, 1), &data).unwrap();
        assert_eq!(reg.len(), 12);
        assert!(reg
            .rows()
            .iter()
            .flatten()
            .flatten()
            .all(|p| p.mu == 0.0 && p.sigma == 1.0));
    }

    #[test]
    fn runs_are_reproducible_and_chain() {
        let (data, spec) = tiny();
        let fresh = || Start::Fresh { spec, init_seed: 3 };
        let mut lines = Vec::new();
        let a = train_run(&config(), &data, fresh(), None, |m, _, _| {
            lines.push(m.to_csv_line());
            Ok(())
        })
        .unwrap();
        let b = train_run(&config(), &data, fresh(), None, |_, _, _| Ok(())).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.registry, b.registry);
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
        assert_eq!(a.dominant.len(), 3);
        assert_eq!(a.dominant[1], 5);
        assert_eq!(a.registry, extract_drifts(&a.model, &data).unwrap());

        let run2 = TrainConfig {
            run: 2,
            epochs: 1,
            ..config()
        };
        assert!(train_run(
            &run2,
            &data,
            Start::Resume(a.checkpoint()),
            None,
            |_, _, _| Ok(())
        )
        .is_err());
        let c = train_run(
            &run2,
            &data,
            Start::Resume(a.checkpoint()),
            Some(&a.registry),
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert!(c.initial_generative.unwrap().iter().all(|&e| e == 0.0));
        assert!(
            train_run(&config(), &data, fresh(), Some(&a.registry), |_, _, _| Ok(
                ()
            ))
            .is_err()
        );
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
