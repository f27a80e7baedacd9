//! L1 objective, Adam, step-decay schedule, patch sampling, the
//! finite-difference gradient harness and a single-pair overfit run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::imaging::{self, Augmentation, ImageBuffer};
use crate::model;
use crate::params::{ParameterStore, Scope};
use crate::prior::VggSlice;
use crate::tensor::{Float, Tensor};

// -- objective ----------------------------------------------------------------

/// Mean absolute difference over every element.
pub fn l1_loss<'g, T: Float>(sr: Var<'g, T>, hr: Var<'g, T>) -> Result<Var<'g, T>> {
    if sr.dims() != hr.dims() {
        return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", sr.dims(), hr.dims())));
    }
    sr.sub(hr)?.abs()?.mean()
}

pub fn l1_value<T: Float>(sr: &Tensor<T>, hr: &Tensor<T>) -> Result<f64> {
    let d = sr.zip_map(hr, |a, b| (a - b).abs())?;
    Ok(d.data().iter().map(|v| v.as_f64()).sum::<f64>() / d.len() as f64)
}

// -- configuration --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub halving_period: usize,
    pub steps_per_epoch: usize,
    /// LR patch side; the HR patch is `scale` times larger.
    pub patch: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            halving_period: 200,
            steps_per_epoch: 1000,
            patch: 64,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.lr0 > 0.0
            && self.halving_period > 0
            && self.steps_per_epoch > 0
            && self.patch > 0
            && self.batch_size > 0
            && self.eps > 0.0;
        if !positive {
            return Err(Error::Config("training settings must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `lr0 * 0.5^floor(epoch / halving_period)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.halving_period) as i32)
}

// -- Adam -----------------------------------------------------------------------

/// First and second moments of every trainable parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T: Float = f32> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update of every trainable parameter. A trainable
/// parameter without a gradient is treated as having a zero gradient;
/// frozen parameters are skipped and never enter the state.
pub fn adam_step<T: Float>(params: &mut ParameterStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let dims = p.value.dims();
        let m = state.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(dims));
        let v = state.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(dims));
        let grad = p.grad.as_ref();
        let pv = p.value.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pv.len() {
            let g = grad.map_or(T::zero(), |g| g.data()[i]);
            md[i] = b1 * md[i] + (T::one() - b1) * g;
            vd[i] = b2 * vd[i] + (T::one() - b2) * g * g;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pv[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

// -- data ---------------------------------------------------------------------

/// HR training images with their bicubic LR counterparts.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub scale: usize,
    pub hr: Vec<ImageBuffer>,
    pub lr: Vec<ImageBuffer>,
}

fn to_rgb(img: ImageBuffer) -> ImageBuffer {
    if img.channels == 3 {
        return img;
    }
    ImageBuffer::from_fn(img.width, img.height, 3, |x, y, _| img.get(x, y, 0))
}

impl Corpus {
    /// Crops each HR image to a multiple of `scale` and degrades it.
    pub fn from_images(images: Vec<ImageBuffer>, scale: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("corpus", "no images"));
        }
        let hr: Vec<ImageBuffer> = images
            .into_iter()
            .map(|i| to_rgb(i).crop_to_multiple(scale))
            .collect();
        let lr = hr
            .iter()
            .map(|i| imaging::degrade_bicubic(i, scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { scale, hr, lr })
    }

    /// Every PNG/PPM/PGM file in `dir`, in file-name order.
    pub fn load_dir(dir: impl AsRef<Path>, scale: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm"))
            })
            .collect();
        paths.sort();
        let images = paths.iter().map(imaging::load_image).collect::<Result<Vec<_>>>()?;
        Self::from_images(images, scale)
    }
}

/// Where a batch entry was cut from, in LR pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub image: usize,
    pub x: usize,
    pub y: usize,
    pub augmentation: Augmentation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(batch, 3, patch, patch)` in `[0, 1]`.
    pub lr: Tensor<f32>,
    /// `(batch, 3, patch * r, patch * r)` in `[0, 1]`.
    pub hr: Tensor<f32>,
    pub crops: Vec<Crop>,
}

fn stack(parts: &[Tensor<f32>]) -> Tensor<f32> {
    let [_, c, h, w] = parts[0].dims();
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new([parts.len(), c, h, w], data).expect("equal patch dims")
}

/// Random aligned LR/HR crops sharing one augmentation per pair.
pub fn sample_batch(corpus: &Corpus, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    let (p, r) = (cfg.patch, corpus.scale);
    if corpus.lr.iter().any(|i| i.width < p || i.height < p) {
        return Err(Error::invalid("sample_batch", format!("an LR image is smaller than the {p}x{p} patch")));
    }
    let scale = 1.0 / 255.0;
    let (mut lrs, mut hrs, mut crops) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch_size {
        let image = rng.gen_range(0..corpus.lr.len());
        let (lr, hr) = (&corpus.lr[image], &corpus.hr[image]);
        let x = rng.gen_range(0..=lr.width - p);
        let y = rng.gen_range(0..=lr.height - p);
        let augmentation = if cfg.augment {
            Augmentation::random(rng)
        } else {
            Augmentation::IDENTITY
        };
        let lp = augmentation.apply_image(&lr.crop(x, y, p, p));
        let hp = augmentation.apply_image(&hr.crop(x * r, y * r, p * r, p * r));
        lrs.push(lp.to_tensor(scale));
        hrs.push(hp.to_tensor(scale));
        crops.push(Crop {
            image,
            x,
            y,
            augmentation,
        });
    }
    Ok(Batch {
        lr: stack(&lrs),
        hr: stack(&hrs),
        crops,
    })
}

// -- training loop ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} lr={:.3e} loss={:.6}",
            self.step, self.epoch, self.lr, self.loss
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub records: Vec<StepRecord>,
}

/// Model parameters, optimizer state and the frozen prior extractor.
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParameterStore<f32>,
    pub adam: AdamState<f32>,
    pub vgg: Option<VggSlice>,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig, params: ParameterStore<f32>, vgg: Option<VggSlice>) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        if model.uses_prior() {
            match &vgg {
                None => return Err(Error::Config("configuration injects priors but no extractor was given".into())),
                Some(v) if v.output_channels() != model.prior_channels => {
                    return Err(Error::Config(format!(
                        "extractor emits {} channels, configuration expects {}",
                        v.output_channels(),
                        model.prior_channels
                    )))
                }
                _ => {}
            }
        }
        Ok(Trainer {
            model,
            train,
            params,
            adam: AdamState::new(),
            vgg,
            step: 0,
        })
    }

    pub fn prior_for(&self, lr: &Tensor<f32>) -> Result<Option<Tensor<f32>>> {
        match (&self.vgg, self.model.uses_prior()) {
            (Some(v), true) => Ok(Some(v.aligned_features(lr)?)),
            _ => Ok(None),
        }
    }

    /// Loss of the current parameters on a pair, without updating.
    pub fn evaluate(&self, lr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<f64> {
        let prior = self.prior_for(lr)?;
        let g = Graph::inference();
        let s = Scope::new(&g, &self.params);
        let p = prior.map(|t| g.constant(t));
        let sr = model::forward_graph(&s, &self.model, g.constant(lr.clone()), p)?;
        let loss = l1_loss(sr, g.constant(hr.clone()))?;
        Ok(loss.value().data()[0].as_f64())
    }

    /// One forward/backward pass and Adam update; returns the loss before
    /// the update.
    pub fn step_on(&mut self, lr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<StepRecord> {
        let prior = self.prior_for(lr)?;
        let epoch = self.step / self.train.steps_per_epoch;
        let rate = lr_at(epoch, &self.train);
        let (loss, grads) = {
            let g = Graph::new();
            let s = Scope::new(&g, &self.params);
            let x = g.constant(lr.clone());
            let p = prior.map(|t| g.constant(t));
            let sr = model::forward_graph(&s, &self.model, x, p)?;
            let loss = l1_loss(sr, g.constant(hr.clone()))?;
            let value = loss.value().data()[0].as_f64();
            (value, g.backward(loss, None)?)
        };
        self.params.absorb_grads(grads);
        adam_step(&mut self.params, &mut self.adam, rate, &self.train);
        self.params.zero_grads();
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch,
            lr: rate,
            loss,
        })
    }

    /// Runs `train.steps` sampled steps, calling `log` after each.
    pub fn run(&mut self, corpus: &Corpus, mut log: impl FnMut(&StepRecord)) -> Result<TrainSummary> {
        if corpus.scale != self.model.scale {
            return Err(Error::Config(format!(
                "corpus scale {} differs from model scale {}",
                corpus.scale, self.model.scale
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        let mut records = Vec::with_capacity(self.train.steps);
        for _ in 0..self.train.steps {
            let batch = sample_batch(corpus, &self.train, &mut rng)?;
            let rec = self.step_on(&batch.lr, &batch.hr)?;
            log(&rec);
            records.push(rec);
        }
        Ok(TrainSummary {
            steps: records.len(),
            initial_loss: records.first().map(|r| r.loss),
            final_loss: records.last().map(|r| r.loss),
            records,
        })
    }
}

/// Trains on a single LR/HR pair and returns the loss before the first
/// update followed by the loss after every update.
pub fn overfit_smoke(
    lr: &ImageBuffer,
    hr: &ImageBuffer,
    steps: usize,
    model_cfg: &ModelConfig,
    vgg: Option<VggSlice>,
    seed: u64,
) -> Result<Vec<f64>> {
    let params = model::build(model_cfg, seed)?;
    let train = TrainConfig {
        seed,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model_cfg.clone(), train, params, vgg)?;
    let (x, y) = (lr.to_tensor(1.0 / 255.0), hr.to_tensor(1.0 / 255.0));
    let mut curve = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        curve.push(trainer.step_on(&x, &y)?.loss);
    }
    curve.push(trainer.evaluate(&x, &y)?);
    Ok(curve)
}

// -- gradient check -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.max_rel_error <= self.tolerance)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_error > self.tolerance).collect()
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Absolute floor of the relative error per unit of loss. Central
/// differences of a loss `L` carry roundoff of order `eps * |L| / FD_STEP`
/// times the length of the summation chains, which stays below this.
pub const FD_FLOOR: f64 = 1e-5;

/// Relative error with an absolute floor, so entries whose true gradient is
/// (near) zero are judged on absolute agreement.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `loss` against
/// central differences for every element of every trainable tensor.
/// `loss` must build the same function on recording and inference graphs.
pub fn check_param_gradients<F>(params: &ParameterStore<f64>, tolerance: f64, loss: F) -> Result<GradCheckReport>
where
    F: for<'s, 'g> Fn(&Scope<'s, 'g, f64>) -> Result<Var<'g, f64>>,
{
    let (analytic, base) = {
        let g = Graph::new().check_finite(true);
        let s = Scope::new(&g, params);
        let l = loss(&s)?;
        if l.dims() != [1, 1, 1, 1] {
            return Err(Error::shape("grad_check", "loss must be a scalar"));
        }
        let base = l.value().data()[0];
        (g.backward(l, None)?.into_params(), base)
    };
    let floor = FD_FLOOR * base.abs().max(1.0);
    let eval = |store: &ParameterStore<f64>| -> Result<f64> {
        let g = Graph::inference();
        let s = Scope::new(&g, store);
        Ok(loss(&s)?.value().data()[0])
    };
    let mut work = params.clone();
    let mut entries = Vec::new();
    for (name, p) in params.iter().filter(|(_, p)| p.trainable) {
        let zeros = Tensor::zeros(p.value.dims());
        let a = analytic.get(name).unwrap_or(&zeros);
        let mut worst = 0.0f64;
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            work.value_mut(name)?.data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work.value_mut(name)?.data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work.value_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a.data()[i], numeric, floor));
        }
        entries.push(GradCheckEntry {
            name: name.to_string(),
            elements: p.value.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        tolerance,
        step: FD_STEP,
        entries,
    })
}

/// Fixed random problem for gradient checks: LR input, HR target and
/// prior, all in double precision.
#[derive(Debug, Clone)]
pub struct GradProblem {
    pub lr: Tensor<f64>,
    pub hr: Tensor<f64>,
    pub prior: Option<Tensor<f64>>,
}

impl GradProblem {
    /// The HR target sits 5% to 50% of the output scale (at least 1) away
    /// from the initial output at every pixel so the L1 kink is never
    /// crossed by a finite-difference step.
    pub fn new(cfg: &ModelConfig, params: &ParameterStore<f64>, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lr = Tensor::uniform([1, 3, size, size], 0.0, 1.0, &mut rng);
        let prior = cfg
            .uses_prior()
            .then(|| Tensor::uniform([1, cfg.prior_channels, size, size], -1.0, 1.0, &mut rng));
        let sr = model::forward(&lr, prior.as_ref(), params, cfg)?;
        let scale = sr.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut hr = sr.clone();
        for v in hr.data_mut() {
            let offset: f64 = scale * rng.gen_range(0.05..0.5);
            *v += if rng.gen_bool(0.5) { offset } else { -offset };
        }
        Ok(GradProblem { lr, hr, prior })
    }

    pub fn loss<'g>(&self, s: &Scope<'_, 'g, f64>, cfg: &ModelConfig) -> Result<Var<'g, f64>> {
        let g = s.graph();
        let x = g.constant(self.lr.clone());
        let p = self.prior.as_ref().map(|t| g.constant(t.clone()));
        let sr = model::forward_graph(s, cfg, x, p)?;
        l1_loss(sr, g.constant(self.hr.clone()))
    }
}

/// Full-model gradient check of the L1 loss on a `size x size` random input.
pub fn grad_check(cfg: &ModelConfig, size: usize, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let params = model::build(cfg, seed)?.cast::<f64>();
    let problem = GradProblem::new(cfg, &params, size, seed.wrapping_add(1))?;
    check_param_gradients(&params, tolerance, |s| problem.loss(s, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert_eq!(lr_at(199, &cfg), 1e-3);
        assert_eq!(lr_at(200, &cfg), 5e-4);
        assert_eq!(lr_at(400, &cfg), 2.5e-4);
    }

    #[test]
    fn l1_values() {
        let a = Tensor::<f64>::full([1, 1, 2, 2], 1.0);
        assert_eq!(l1_value(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v - 0.25);
        assert_eq!(l1_value(&a, &b).unwrap(), 0.25);
        assert!(l1_value(&a, &Tensor::zeros([1, 1, 1, 2])).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-5), 0.0);
        assert!(relative_error(1e-9, 2e-9, 1e-5) < 1e-3);
        assert!((relative_error(1.0, 1.1, 1e-5) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-6, 1e-2) - 1e-4).abs() < 1e-18);
    }
}
