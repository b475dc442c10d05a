//! The auto-classifier-encoder network.
//!
//! Each pyramid level has its own encoder (`affine → ln cosh → batch norm`),
//! class-specific linear heads for the latent location and log-scale, and a
//! class-specific decoder (`affine → tanh → batch norm → affine`). A
//! convolutional classifier scores every image of a minibatch; its softmax,
//! rescaled to sum to the batch size, gives the per-observation likelihood
//! weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::gradcore::{BatchStats, Binder, Graph, ParamStore, Tensor, Var, BN_EPS, BN_MOMENTUM};
use crate::laplace::PosteriorParams;
use crate::pyramid::{self, ImageShape};

/// Latent dimensions per class and level.
pub const LATENT_DIM: usize = 2;
/// Clamp range of the log-scale head.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-10.0, 10.0);
/// Largest allowed ratio between two observation weights.
pub const WEIGHT_RATIO_CAP: f64 = 1e6;
/// Width of the logit window. Slightly inside `ln(10⁶)` so the cap survives
/// rounding in the softmax.
pub const LOGIT_WINDOW: f64 = 13.815_510_557_964_274 - 1e-9;

/// Pyramid level. Level 1 is the full-resolution residual band, level 2 the
/// half-resolution coarse band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Residual,
    Coarse,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Residual, Level::Coarse];

    pub fn number(self) -> usize {
        match self {
            Level::Residual => 1,
            Level::Coarse => 2,
        }
    }

    pub fn index(self) -> usize {
        self.number() - 1
    }

    pub fn from_number(n: usize) -> Result<Level> {
        match n {
            1 => Ok(Level::Residual),
            2 => Ok(Level::Coarse),
            _ => Err(Error::invalid(format!(
                "pyramid level must be 1 or 2, got {n}"
            ))),
        }
    }

    fn prefix(self) -> String {
        format!("level{}", self.number())
    }
}

/// Sizes of one level's ladder `input-hidden-(2·K)-(hidden·K)-(input·K)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub image: ImageShape,
    pub residual_hidden: usize,
    pub coarse_hidden: usize,
    pub num_classes: usize,
    /// Output channels of the three convolutions; a single logit follows.
    pub classifier_widths: [usize; 3],
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            image: ImageShape::CIFAR,
            residual_hidden: 16,
            coarse_hidden: 4,
            num_classes: 10,
            classifier_widths: [64, 64, 128],
        }
    }
}

impl ModelSpec {
    pub fn level(&self, level: Level) -> LevelSpec {
        let (input_dim, hidden_dim) = match level {
            Level::Residual => (self.image.len(), self.residual_hidden),
            Level::Coarse => (self.image.coarse_len(), self.coarse_hidden),
        };
        LevelSpec {
            input_dim,
            hidden_dim,
            latent_dim: LATENT_DIM,
            num_classes: self.num_classes,
        }
    }

    fn to_meta(self) -> Tensor {
        let [a, b, c] = self.classifier_widths;
        Tensor::vector(
            [
                self.image.channels,
                self.image.side,
                self.residual_hidden,
                self.coarse_hidden,
                self.num_classes,
                a,
                b,
                c,
            ]
            .iter()
            .map(|&v| v as f64)
            .collect(),
        )
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        let v: Vec<usize> = t.data().iter().map(|&x| x as usize).collect();
        if v.len() != 8 {
            return Err(Error::format("checkpoint", "meta.spec must have 8 entries"));
        }
        Ok(ModelSpec {
            image: ImageShape {
                channels: v[0],
                side: v[1],
            },
            residual_hidden: v[2],
            coarse_hidden: v[3],
            num_classes: v[4],
            classifier_widths: [v[5], v[6], v[7]],
        })
    }
}

/// Flattened pyramid bands of a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Bands {
    /// `N × input_dim(level 1)`
    pub residual: Vec<f64>,
    /// `N × input_dim(level 2)`
    pub coarse: Vec<f64>,
    pub residual_dim: usize,
    pub coarse_dim: usize,
}

impl Bands {
    pub fn of(data: &Dataset) -> Result<Bands> {
        let mut residual = Vec::with_capacity(data.images.len());
        let mut coarse = Vec::with_capacity(data.images.len() / 4);
        for i in 0..data.len() {
            let d = pyramid::decompose(&data.image(i), data.shape)?;
            residual.extend_from_slice(d.residual.data());
            coarse.extend_from_slice(d.coarse.data());
        }
        Ok(Bands {
            residual,
            coarse,
            residual_dim: data.shape.len(),
            coarse_dim: data.shape.coarse_len(),
        })
    }

    pub fn dim(&self, level: Level) -> usize {
        match level {
            Level::Residual => self.residual_dim,
            Level::Coarse => self.coarse_dim,
        }
    }

    pub fn band(&self, level: Level, i: usize) -> &[f64] {
        let d = self.dim(level);
        let all = match level {
            Level::Residual => &self.residual,
            Level::Coarse => &self.coarse,
        };
        &all[i * d..(i + 1) * d]
    }

    /// Rows `range` of one level as a `[B, D]` tensor.
    pub fn batch(&self, level: Level, range: std::ops::Range<usize>) -> Tensor {
        let d = self.dim(level);
        let all = match level {
            Level::Residual => &self.residual,
            Level::Coarse => &self.coarse,
        };
        Tensor::new(
            vec![range.len(), d],
            all[range.start * d..range.end * d].to_vec(),
        )
        .expect("band shape")
    }
}

/// Batch-norm behaviour of a forward pass.
pub enum BnMode {
    /// Normalize by minibatch statistics and collect them for running updates.
    Train(Vec<(String, BatchStats)>),
    /// Normalize by the stored running statistics.
    Eval,
}

impl BnMode {
    pub fn train() -> Self {
        BnMode::Train(Vec::new())
    }

    pub fn is_train(&self) -> bool {
        matches!(self, BnMode::Train(_))
    }
}

/// Latent heads of one level for a batch, each `[B, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub mu: Var,
    pub log_sigma: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

/// Normal entries scaled so the largest singular value of the `[m, n]`
/// matrix is close to 1: an `m × n` standard normal matrix has largest
/// singular value near `√m + √n`.
fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (m, n) = (shape[0] as f64, shape[1] as f64);
    let dist = Normal::new(0.0, 1.0 / (m.sqrt() + n.sqrt())).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-a..a)).collect(),
    )
    .expect("shape")
}

impl Model {
    /// Fresh parameters. VAE weights are zero-mean normal with standard
    /// deviation `1/√fan_in`; the latent heads start at zero so every
    /// posterior starts at the prior; the classifier is uniform.
    pub fn init(spec: ModelSpec, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let bn = |p: &mut ParamStore, prefix: &str, n: usize| {
            p.trainable
                .insert(format!("{prefix}.gamma"), Tensor::full(&[n], 1.0));
            p.trainable
                .insert(format!("{prefix}.beta"), Tensor::zeros(&[n]));
            p.buffers
                .insert(format!("{prefix}.running_mean"), Tensor::zeros(&[n]));
            p.buffers
                .insert(format!("{prefix}.running_var"), Tensor::full(&[n], 1.0));
        };
        for level in Level::ALL {
            let ls = spec.level(level);
            let (d, h, l) = (ls.input_dim, ls.hidden_dim, ls.latent_dim);
            let pre = level.prefix();
            // Untrained decoders emit a flat mid-gray image: 0.5 in the coarse
            // band, which makes the residual band 0.
            let flat = match level {
                Level::Residual => 0.0,
                Level::Coarse => 0.5,
            };
            p.trainable
                .insert(format!("{pre}.encoder.W"), normal(&mut rng, &[d, h]));
            p.trainable
                .insert(format!("{pre}.encoder.b"), Tensor::zeros(&[h]));
            bn(&mut p, &format!("{pre}.encoder"), h);
            for k in 0..ls.num_classes {
                for head in ["mu", "logsigma"] {
                    p.trainable
                        .insert(format!("{pre}.{head}.class{k}.W"), Tensor::zeros(&[h, l]));
                    p.trainable
                        .insert(format!("{pre}.{head}.class{k}.b"), Tensor::zeros(&[l]));
                }
                let dec = format!("{pre}.decoder.class{k}");
                p.trainable
                    .insert(format!("{dec}.hidden.W"), normal(&mut rng, &[l, h]));
                p.trainable
                    .insert(format!("{dec}.hidden.b"), Tensor::zeros(&[h]));
                bn(&mut p, &format!("{dec}.hidden"), h);
                p.trainable
                    .insert(format!("{dec}.out.W"), normal(&mut rng, &[h, d]));
                p.trainable
                    .insert(format!("{dec}.out.b"), Tensor::full(&[d], flat));
            }
        }
        let mut c_in = spec.image.channels;
        for (i, &c_out) in spec.classifier_widths.iter().enumerate() {
            let pre = format!("clf.layer{}", i + 1);
            let fan_in = c_in * 9;
            p.trainable.insert(
                format!("{pre}.W"),
                uniform(&mut rng, &[c_out, c_in, 3, 3], fan_in),
            );
            p.trainable
                .insert(format!("{pre}.b"), Tensor::zeros(&[c_out]));
            bn(&mut p, &pre, c_out);
            c_in = c_out;
        }
        p.trainable
            .insert("clf.layer4.W".into(), uniform(&mut rng, &[c_in, 1], c_in));
        p.trainable
            .insert("clf.layer4.b".into(), uniform(&mut rng, &[1], c_in));
        p.buffers.insert("meta.spec".into(), spec.to_meta());
        Model { spec, params: p }
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_params(params: ParamStore) -> Result<Model> {
        let meta = params
            .buffers
            .get("meta.spec")
            .ok_or_else(|| Error::format("checkpoint", "missing meta.spec record"))?;
        let spec = ModelSpec::from_meta(meta)?;
        let reference = Model::init(spec, 0);
        for (name, t) in &reference.params.trainable {
            match params.trainable.get(name) {
                Some(have) if have.shape() == t.shape() => {}
                _ => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("parameter {name} missing or misshapen"),
                    ))
                }
            }
        }
        Ok(Model { spec, params })
    }

    fn check_class(&self, class: u8) -> Result<()> {
        if (class as usize) < self.spec.num_classes {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "class {class} outside 0..{}",
                self.spec.num_classes
            )))
        }
    }

    fn batchnorm(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        prefix: &str,
        x: Var,
        mode: &mut BnMode,
    ) -> Result<Var> {
        let gamma = b.var(g, &format!("{prefix}.gamma"))?;
        let beta = b.var(g, &format!("{prefix}.beta"))?;
        match mode {
            BnMode::Train(stats) => {
                let (y, s) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
                stats.push((prefix.to_string(), s));
                Ok(y)
            }
            BnMode::Eval => {
                let store = b.store();
                let mean = store.get(&format!("{prefix}.running_mean"))?.data();
                let var = store.get(&format!("{prefix}.running_var"))?.data();
                g.batchnorm_eval(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }

    /// `hidden = batchnorm(lncosh(x·W + b))` for `x: [B, input_dim]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        level: Level,
        x: Var,
        mode: &mut BnMode,
    ) -> Result<Var> {
        let ls = self.spec.level(level);
        let s = g.shape(x);
        if s.len() != 2 || s[1] != ls.input_dim {
            return Err(Error::Shape {
                op: "encode",
                left: s.to_vec(),
                right: vec![ls.input_dim],
            });
        }
        let pre = format!("{}.encoder", level.prefix());
        let w = b.var(g, &format!("{pre}.W"))?;
        let bias = b.var(g, &format!("{pre}.b"))?;
        let a = g.affine(x, w, bias)?;
        let a = g.lncosh(a);
        self.batchnorm(g, b, &pre, a, mode)
    }

    /// Linear location and log-scale heads, each row using its own class.
    pub fn heads(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        level: Level,
        hidden: Var,
        classes: &[u8],
    ) -> Result<Heads> {
        let rows = g.shape(hidden)[0];
        if classes.len() != rows {
            return Err(Error::invalid(format!(
                "{} class labels for {rows} rows",
                classes.len()
            )));
        }
        for &c in classes {
            self.check_class(c)?;
        }
        let mut present: Vec<u8> = classes.to_vec();
        present.sort_unstable();
        present.dedup();
        let pre = level.prefix();
        let mut out = [None, None];
        for (slot, head) in ["mu", "logsigma"].iter().enumerate() {
            let mut acc: Option<Var> = None;
            for &c in &present {
                let w = b.var(g, &format!("{pre}.{head}.class{c}.W"))?;
                let bias = b.var(g, &format!("{pre}.{head}.class{c}.b"))?;
                let y = g.affine(hidden, w, bias)?;
                let y = if present.len() == 1 {
                    y
                } else {
                    let mask: Vec<f64> = classes
                        .iter()
                        .flat_map(|&k| [if k == c { 1.0 } else { 0.0 }; LATENT_DIM])
                        .collect();
                    let m = g.constant(Tensor::new(vec![rows, LATENT_DIM], mask)?);
                    g.mul(y, m)?
                };
                acc = Some(match acc {
                    None => y,
                    Some(a) => g.add(a, y)?,
                });
            }
            out[slot] = acc;
        }
        let mu = out[0].expect("at least one class");
        let log_sigma = g.clamp(
            out[1].expect("at least one class"),
            LOG_SIGMA_RANGE.0,
            LOG_SIGMA_RANGE.1,
        );
        let sigma = g.exp(log_sigma);
        Ok(Heads {
            mu,
            log_sigma,
            sigma,
        })
    }

    /// Class-specific decoder `z → batchnorm(tanh(z·W₁ + b₁)) → ·W₂ + b₂`.
    ///
    /// The output layer is affine so the whole band range is reachable.
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        level: Level,
        z: Var,
        class: u8,
        mode: &mut BnMode,
    ) -> Result<Var> {
        self.check_class(class)?;
        let pre = format!("{}.decoder.class{class}", level.prefix());
        let w1 = b.var(g, &format!("{pre}.hidden.W"))?;
        let b1 = b.var(g, &format!("{pre}.hidden.b"))?;
        let h = g.affine(z, w1, b1)?;
        let h = g.tanh(h);
        let h = self.batchnorm(g, b, &format!("{pre}.hidden"), h, mode)?;
        let w2 = b.var(g, &format!("{pre}.out.W"))?;
        let b2 = b.var(g, &format!("{pre}.out.b"))?;
        g.affine(h, w2, b2)
    }

    /// One logit per image of `images: [B, C, H, W]`.
    pub fn classifier_logits(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        images: Var,
        mode: &mut BnMode,
    ) -> Result<Var> {
        let mut x = images;
        for i in 1..=3 {
            let pre = format!("clf.layer{i}");
            let w = b.var(g, &format!("{pre}.W"))?;
            let bias = b.var(g, &format!("{pre}.b"))?;
            x = g.conv2d(x, w, bias, 2, 1)?;
            x = self.batchnorm(g, b, &pre, x, mode)?;
            x = g.relu(x);
        }
        let pooled = g.global_avg_pool(x)?;
        let w = b.var(g, "clf.layer4.W")?;
        let bias = b.var(g, "clf.layer4.b")?;
        let logit = g.affine(pooled, w, bias)?;
        let rows = g.shape(logit)[0];
        g.reshape(logit, &[rows])
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let buf = self.params.buffer_mut(&format!("{prefix}.{suffix}"))?;
                for (r, x) in buf.data_mut().iter_mut().zip(batch.iter()) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * x;
                }
            }
        }
        Ok(())
    }

    /// Eval-mode posterior `(μ, σ)` per level and latent dimension of one
    /// observation, using the heads of `class`.
    pub fn posterior(
        &self,
        residual: &[f64],
        coarse: &[f64],
        class: u8,
    ) -> Result<[[PosteriorParams; LATENT_DIM]; 2]> {
        let mut out = [[PosteriorParams {
            mu: 0.0,
            sigma: 1.0,
        }; LATENT_DIM]; 2];
        for (level, band) in [(Level::Residual, residual), (Level::Coarse, coarse)] {
            let mut g = Graph::new();
            let mut b = Binder::new(&self.params);
            let x = g.constant(Tensor::new(vec![1, band.len()], band.to_vec())?);
            let h = self.encode(&mut g, &mut b, level, x, &mut BnMode::Eval)?;
            let heads = self.heads(&mut g, &mut b, level, h, &[class])?;
            for (d, slot) in out[level.index()].iter_mut().enumerate() {
                *slot = PosteriorParams {
                    mu: g.value(heads.mu).data()[d],
                    sigma: g.value(heads.sigma).data()[d],
                };
            }
        }
        Ok(out)
    }

    /// Eval-mode decode of a single latent point.
    pub fn decode_point(&self, level: Level, z: [f64; LATENT_DIM], class: u8) -> Result<Vec<f64>> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent point must be finite"));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let zv = g.constant(Tensor::new(vec![1, LATENT_DIM], z.to_vec())?);
        let y = self.decode(&mut g, &mut b, level, zv, class, &mut BnMode::Eval)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Decodes both levels and recombines them through the pyramid.
    pub fn decode_image(&self, z: [[f64; LATENT_DIM]; 2], class: u8) -> Result<Tensor> {
        let residual = self.decode_point(Level::Residual, z[0], class)?;
        let coarse = self.decode_point(Level::Coarse, z[1], class)?;
        let shape = self.spec.image;
        pyramid::reconstruct(&pyramid::PyramidDecomposition {
            coarse: Tensor::new(shape.coarse_dims().to_vec(), coarse)?,
            residual: Tensor::new(shape.dims().to_vec(), residual)?,
        })
    }
}

/// Turns classifier logits into observation weights on the tape.
///
/// Logits are clamped from below to `top − LOGIT_WINDOW`, where `top` is the
/// largest logit, and the softmax is rescaled to sum to the batch size. A
/// hard-coded observation's logit is raised to the classifier's maximum plus
/// the full window, so it holds the single largest weight and every other
/// observation sits at the ratio cap. Copying the maximum instead would tie
/// it with the classifier's favourite and split the dominant weight in two.
pub fn observation_weights(g: &mut Graph, logits: Var, hardcoded: Option<usize>) -> Result<Var> {
    let vals = g.value(logits).data().to_vec();
    let n = vals.len();
    if n < 2 {
        return Err(Error::invalid(
            "observation weights need a minibatch of at least 2",
        ));
    }
    let (logits, top) = match hardcoded {
        None => (logits, argmax(&vals)),
        Some(h) if h < n => {
            let best = argmax(&vals);
            let idx: Vec<usize> = (0..n).map(|i| if i == h { best } else { i }).collect();
            let copied = g.gather(logits, &idx)?;
            let bump: Vec<f64> = (0..n)
                .map(|i| if i == h { LOGIT_WINDOW } else { 0.0 })
                .collect();
            let bump = g.constant(Tensor::vector(bump));
            (g.add(copied, bump)?, h)
        }
        Some(h) => {
            return Err(Error::invalid(format!(
                "hard-coded position {h} outside minibatch of {n}"
            )))
        }
    };
    let max = g.gather(logits, &vec![top; n])?;
    let lo = g.offset(max, -LOGIT_WINDOW);
    let above = g.sub(logits, lo)?;
    let above = g.relu(above);
    let clamped = g.add(lo, above)?;
    let sm = g.softmax(clamped)?;
    Ok(g.scale(sm, n as f64))
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Checks the sum-to-B and ratio-cap invariants of a weight vector.
pub fn check_weights(w: &[f64]) -> Result<()> {
    let b = w.len() as f64;
    let sum: f64 = w.iter().sum();
    if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::NonFinite("observation weight".into()));
    }
    if (sum - b).abs() > 1e-6 * b {
        return Err(Error::invalid(format!(
            "weights sum to {sum}, expected {b}"
        )));
    }
    let max = w.iter().cloned().fold(f64::MIN, f64::max);
    let min = w.iter().cloned().fold(f64::MAX, f64::min);
    if max / min > WEIGHT_RATIO_CAP {
        return Err(Error::invalid(format!(
            "weight ratio {} exceeds {WEIGHT_RATIO_CAP}",
            max / min
        )));
    }
    Ok(())
}

/// Decoder class for a minibatch: the hard-coded observation's class when one
/// is present, otherwise the class of the heaviest observation.
pub fn route_class(labels: &[u8], weights: &[f64], hardcoded: Option<usize>) -> u8 {
    labels[hardcoded.unwrap_or_else(|| argmax(weights))]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplace::{generative_error, prior};

    #[test]
    fn ladder_sizes_and_parameter_count() {
        let spec = ModelSpec::default();
        assert_eq!(spec.level(Level::Residual).input_dim, 3072);
        assert_eq!(spec.level(Level::Residual).hidden_dim, 16);
        assert_eq!(spec.level(Level::Coarse).input_dim, 768);
        assert_eq!(spec.level(Level::Coarse).hidden_dim, 4);
        let m = Model::init(spec, 1);
        // Per level: encoder D·H + H + 2H (batch norm); per class: two heads of
        // H·2 + 2, decoder 2·H + H + 2H + H·D + D.
        let level =
            |d: usize, h: usize| d * h + 3 * h + 10 * (2 * (2 * h + 2) + 2 * h + 3 * h + h * d + d);
        // Classifier: three 3×3 convolutions with bias and batch norm, then 128 → 1.
        let clf = (3 * 9 * 64 + 3 * 64) + (64 * 9 * 64 + 3 * 64) + (64 * 9 * 128 + 3 * 128) + 129;
        assert_eq!(level(3072, 16), 572_920);
        assert_eq!(level(768, 4), 41_884);
        assert_eq!(clf, 113_217);
        assert_eq!(m.params.trainable_count(), 572_920 + 41_884 + 113_217);
    }

    fn toy_spec() -> ModelSpec {
        ModelSpec {
            image: ImageShape {
                channels: 3,
                side: 8,
            },
            residual_hidden: 5,
            coarse_hidden: 3,
            num_classes: 10,
            classifier_widths: [4, 4, 6],
        }
    }

    #[test]
    fn encoder_examples() {
        let mut m = Model::init(toy_spec(), 2);
        m.params
            .trainable
            .insert("level2.encoder.W".into(), Tensor::zeros(&[48, 3]));
        let mut g = Graph::new();
        let mut b = Binder::new(&m.params);
        let x = g.constant(Tensor::zeros(&[3, 48]));
        let h = m
            .encode(&mut g, &mut b, Level::Coarse, x, &mut BnMode::Eval)
            .unwrap();
        // lncosh(0) = 0 and the fresh running stats are (0, 1).
        assert!(g.value(h).data().iter().all(|v| v.abs() < 1e-12));
        let big = g.constant(Tensor::full(&[2, 192], 1e3));
        let h = m
            .encode(&mut g, &mut b, Level::Residual, big, &mut BnMode::Eval)
            .unwrap();
        assert_eq!(g.shape(h), [2, 5]);
        assert!(g.value(h).all_finite());
        let wrong = g.constant(Tensor::zeros(&[2, 47]));
        assert!(m
            .encode(&mut g, &mut b, Level::Coarse, wrong, &mut BnMode::Eval)
            .is_err());
    }

    #[test]
    fn zero_heads_sit_at_the_prior() {
        let m = Model::init(ModelSpec::default(), 3);
        let mut g = Graph::new();
        let mut b = Binder::new(&m.params);
        let h = g.constant(Tensor::full(&[2, 16], 0.7));
        let heads = m
            .heads(&mut g, &mut b, Level::Residual, h, &[1, 4])
            .unwrap();
        assert_eq!(g.shape(heads.mu), [2, 2]);
        assert!(g.value(heads.mu).data().iter().all(|&v| v == 0.0));
        assert!(g.value(heads.sigma).data().iter().all(|&v| v == 1.0));
        for i in 0..4 {
            let post =
                PosteriorParams::new(g.value(heads.mu).data()[i], g.value(heads.sigma).data()[i])
                    .unwrap();
            assert_eq!(generative_error(post, prior()).unwrap(), 0.0);
        }
        assert!(m
            .heads(&mut g, &mut b, Level::Residual, h, &[1, 10])
            .is_err());
    }

    #[test]
    fn class_heads_are_independent() {
        let mut m = Model::init(ModelSpec::default(), 4);
        m.params
            .trainable
            .insert("level1.mu.class3.b".into(), Tensor::vector(vec![1.5, -2.0]));
        let mut g = Graph::new();
        let mut b = Binder::new(&m.params);
        let h = g.constant(Tensor::full(&[2, 16], 0.1));
        let heads = m
            .heads(&mut g, &mut b, Level::Residual, h, &[3, 5])
            .unwrap();
        assert_eq!(g.value(heads.mu).data(), [1.5, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn decoder_arity_and_determinism() {
        let m = Model::init(ModelSpec::default(), 5);
        let r = m.decode_point(Level::Residual, [0.3, -1.0], 7).unwrap();
        let c = m.decode_point(Level::Coarse, [0.3, -1.0], 7).unwrap();
        assert_eq!((r.len(), c.len()), (3072, 768));
        assert_eq!(r, m.decode_point(Level::Residual, [0.3, -1.0], 7).unwrap());
        assert!(m.decode_point(Level::Coarse, [0.0, 0.0], 10).is_err());
        let img = m.decode_image([[0.0; 2], [1.0, 2.0]], 0).unwrap();
        assert_eq!(img.shape(), [3, 32, 32]);
    }

    #[test]
    fn weights_obey_the_protocol() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::vector(vec![0.4; 5]));
        let w = observation_weights(&mut g, l, None).unwrap();
        assert!(g.value(w).data().iter().all(|&x| (x - 1.0).abs() < 1e-15));

        let l = g.constant(Tensor::vector(vec![3.0, -40.0, 2.0, 0.0]));
        let w = observation_weights(&mut g, l, Some(1)).unwrap();
        let wv = g.value(w).data().to_vec();
        check_weights(&wv).unwrap();
        assert_eq!(argmax(&wv), 1);
        assert!(wv
            .iter()
            .enumerate()
            .all(|(i, &x)| i == 1 || x < wv[1] * 1.1e-6));
        assert!(observation_weights(&mut g, l, Some(4)).is_err());
    }

    #[test]
    fn routing_prefers_hardcoded_class() {
        let labels = [3, 7, 1];
        assert_eq!(route_class(&labels, &[0.1, 2.8, 0.1], None), 7);
        assert_eq!(route_class(&labels, &[0.1, 2.8, 0.1], Some(2)), 1);
    }

    #[test]
    fn params_survive_reconstruction_from_store() {
        let m = Model::init(toy_spec(), 6);
        let back = Model::from_params(m.params.clone()).unwrap();
        assert_eq!(back, m);
        let mut broken = m.params.clone();
        broken.trainable.remove("clf.layer4.b");
        assert!(Model::from_params(broken).is_err());
    }
}
