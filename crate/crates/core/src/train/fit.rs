//! The epoch/batch training loop.
//!
//! Per epoch the training indices are shuffled with a seed derived from
//! `(seed, epoch)`; every sample in a batch is augmented with a seed derived
//! from `(seed, epoch, sample)`, pushed through the model and differentiated
//! independently (in parallel when enabled). Per-sample gradients are summed
//! in batch order, so results do not depend on the thread count.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::loss::{loss_and_grad, LossConfig, LossParts};
use super::optim::{adam_step, cosine_lr, AdamHyper, AdamState};
use crate::error::{ensure, Error, Result};
use crate::imgproc::{augment_with_outcome, clahe, preprocess, AugmentConfig, ImageGrid, MaskGrid};
use crate::par;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sdt::{signed_distance_map, SignedDistanceMap};
use crate::vit::{backward, forward_cached, ModelParams, ViTConfig};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_INIT: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Where `best.ckpt` (lowest validation loss) and `final.ckpt` go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Record zero wall time in the history so reruns are byte-identical.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr_max: 1.5e-4,
            lr_min: 0.0,
            weight_decay: 5e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_dir: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, InvalidParameter, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, InvalidParameter, "batch_size must be >= 1");
        ensure!(
            self.lr_max >= self.lr_min && self.lr_min >= 0.0 && self.lr_max.is_finite(),
            InvalidParameter,
            "need lr_max >= lr_min >= 0 (got {} and {})",
            self.lr_max,
            self.lr_min
        );
        ensure!(self.weight_decay >= 0.0, InvalidParameter, "weight_decay must be >= 0");
        ensure!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            InvalidParameter,
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_eps > 0.0, InvalidParameter, "adam_eps must be > 0");
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageGrid,
    pub mask: MaskGrid,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{:.3}\n", r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Mean and population standard deviation of CLAHE-equalised images.
pub fn dataset_norm_stats(samples: &[Sample], clip: f64, tiles: usize) -> Result<(f64, f64)> {
    ensure!(!samples.is_empty(), InvalidParameter, "no samples to take statistics from");
    let eq: Vec<Result<ImageGrid>> = par::map_slice(samples, |s| clahe(&s.image, clip, tiles));
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for img in eq {
        let img = img?;
        for &v in img.data() {
            sum += v;
            sq += v * v;
        }
        n += img.len();
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let std = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
    Ok((mean, std))
}

/// Loss and parameter gradients for one (already preprocessed) sample.
pub fn compute_gradients(
    image: &ImageGrid,
    gt: &MaskGrid,
    sdm: Option<&SignedDistanceMap>,
    params: &ModelParams,
    vit: &ViTConfig,
    loss: &LossConfig,
    lambda: f64,
) -> Result<(LossParts, ModelParams)> {
    let cache = forward_cached(image, params, vit)?;
    ensure!(cache.pred().len() == gt.len(), DimensionMismatch, "prediction vs mask size");
    let (parts, dpred) = loss_and_grad(
        cache.pred(),
        gt.data(),
        sdm.map(|s| s.data()),
        lambda,
        loss.boundary_mode,
        loss.ce_epsilon,
    );
    if !parts.total.is_finite() {
        return Err(Error::Divergence { tensor: "loss".into(), msg: format!("loss evaluated to {}", parts.total) });
    }
    let grads = backward(&cache, params, &dpred)?;
    Ok((parts, grads))
}

/// Everything needed to continue training from an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: f64,
    pub norm_mean: f64,
    pub norm_std: f64,
}

pub struct Trainer<'a> {
    data: &'a Dataset,
    pub vit: ViTConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    state: TrainerState,
    train_sdm: Vec<Option<SignedDistanceMap>>,
    val_sdm: Vec<Option<SignedDistanceMap>>,
    val_images: Vec<ImageGrid>,
    history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    /// Augmentation config with the normalisation statistics actually used.
    pub augment: AugmentConfig,
}

fn distance_maps(samples: &[Sample]) -> Result<Vec<Option<SignedDistanceMap>>> {
    par::map_slice(samples, |s| signed_distance_map(&s.mask).map(Some)).into_iter().collect()
}

impl<'a> Trainer<'a> {
    /// Fresh run: validates inputs, resolves normalisation statistics and
    /// initialises parameters from the training seed.
    pub fn new(
        data: &'a Dataset,
        vit: ViTConfig,
        train: TrainConfig,
        loss: LossConfig,
        mut augment: AugmentConfig,
    ) -> Result<Self> {
        vit.validate()?;
        train.validate()?;
        loss.validate()?;
        augment.validate()?;
        ensure!(!data.train.is_empty(), InvalidParameter, "training split is empty");
        ensure!(!data.val.is_empty(), InvalidParameter, "validation split is empty");
        if augment.norm_auto {
            let (m, s) = dataset_norm_stats(&data.train, augment.clahe_clip, augment.clahe_tiles)?;
            augment.norm_mean = m;
            augment.norm_std = s;
        }
        let params = ModelParams::init(&vit, derive_seed(train.seed, &[STREAM_INIT]))?;
        let state = TrainerState {
            adam: AdamState::new(&params),
            params,
            epoch: 0,
            best_val_loss: f64::INFINITY,
            norm_mean: augment.norm_mean,
            norm_std: augment.norm_std,
        };
        Self::with_state(data, vit, train, loss, augment, state)
    }

    /// Continues from a saved state; normalisation comes from the state.
    pub fn resume(
        data: &'a Dataset,
        vit: ViTConfig,
        train: TrainConfig,
        loss: LossConfig,
        mut augment: AugmentConfig,
        state: TrainerState,
    ) -> Result<Self> {
        vit.validate()?;
        train.validate()?;
        loss.validate()?;
        state.params.check_shapes(&vit)?;
        augment.norm_mean = state.norm_mean;
        augment.norm_std = state.norm_std;
        augment.validate()?;
        Self::with_state(data, vit, train, loss, augment, state)
    }

    fn with_state(
        data: &'a Dataset,
        vit: ViTConfig,
        train: TrainConfig,
        loss: LossConfig,
        augment: AugmentConfig,
        state: TrainerState,
    ) -> Result<Self> {
        for s in data.train.iter().chain(&data.val) {
            ensure!(
                s.image.dims() == (vit.image_size, vit.image_size),
                DimensionMismatch,
                "sample {:?} does not match model input size {}",
                s.image.dims(),
                vit.image_size
            );
        }
        let train_sdm = distance_maps(&data.train)?;
        let val_sdm = distance_maps(&data.val)?;
        let val_images = par::map_slice(&data.val, |s| preprocess(&s.image, &augment))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { data, vit, train, loss, augment, state, train_sdm, val_sdm, val_images, history: Vec::new() })
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.train.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.batches_per_epoch() * self.train.epochs) as u64
    }

    /// Training indices for 0-based `epoch`, split into batches.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        let mut rng = rng_from_seed(derive_seed(self.train.seed, &[STREAM_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        order.chunks(self.train.batch_size).map(|c| c.to_vec()).collect()
    }

    /// Mean loss and mean gradient over a batch of training indices at the
    /// given epoch's augmentation draws, evaluated at the current parameters.
    pub fn batch_gradients(&self, epoch: usize, batch: &[usize]) -> Result<(f64, ModelParams)> {
        let lambda = self.loss.lambda_at(epoch);
        let results = par::map_slice(batch, |&idx| -> Result<(LossParts, ModelParams)> {
            let sample = &self.data.train[idx];
            let seed = derive_seed(self.train.seed, &[STREAM_AUGMENT, epoch as u64, idx as u64]);
            let aug = augment_with_outcome(&sample.image, &sample.mask, &self.augment, seed)?;
            let sdm = if lambda == 0.0 {
                None
            } else if aug.geometric {
                // Augmentation may push every vessel pixel out of frame.
                signed_distance_map(&aug.mask).ok()
            } else {
                self.train_sdm[idx].clone()
            };
            compute_gradients(&aug.image, &aug.mask, sdm.as_ref(), &self.state.params, &self.vit, &self.loss, lambda)
        });
        let mut total = 0.0;
        let mut acc: Option<ModelParams> = None;
        for r in results {
            let (parts, g) = r?;
            total += parts.total;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => a.add_assign(&g),
            }
        }
        let mut grads = acc.expect("non-empty batch");
        let k = batch.len() as f64;
        grads.scale(1.0 / k);
        Ok((total / k, grads))
    }

    /// Mean total loss over the validation split, no random augmentation.
    pub fn validation_loss(&self) -> Result<f64> {
        let lambda = self.loss.lambda_at(self.state.epoch.saturating_sub(1));
        let losses = par::map_range(self.data.val.len(), |i| -> Result<f64> {
            let cache = forward_cached(&self.val_images[i], &self.state.params, &self.vit)?;
            let (parts, _) = loss_and_grad(
                cache.pred(),
                self.data.val[i].mask.data(),
                self.val_sdm[i].as_ref().map(|s| s.data()),
                lambda,
                self.loss.boundary_mode,
                self.loss.ce_epsilon,
            );
            Ok(parts.total)
        });
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / self.data.val.len() as f64)
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint { vit: self.vit.clone(), state: self.state.clone() }
    }

    /// Runs one epoch; returns its history record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        ensure!(self.state.epoch < self.train.epochs, InvalidParameter, "all {} epochs already run", self.train.epochs);
        let started = Instant::now();
        let epoch = self.state.epoch;
        let total_steps = self.total_steps();
        let hyper = self.train.adam();
        let mut loss_sum = 0.0;
        let mut lr = self.train.lr_max;
        for batch in self.epoch_batches(epoch) {
            let (loss, grads) = self.batch_gradients(epoch, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { tensor: "loss".into(), msg: format!("epoch {} loss {loss}", epoch + 1) });
            }
            loss_sum += loss * batch.len() as f64;
            lr = cosine_lr(self.state.adam.step, total_steps, self.train.lr_max, self.train.lr_min)?;
            adam_step(&mut self.state.params, &grads, &mut self.state.adam, lr, &hyper)?;
        }
        self.state.epoch += 1;
        let val_loss = self.validation_loss()?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { tensor: "validation loss".into(), msg: format!("epoch {}", epoch + 1) });
        }
        let improved = val_loss < self.state.best_val_loss;
        if improved {
            self.state.best_val_loss = val_loss;
        }
        if let Some(dir) = &self.train.checkpoint_dir {
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), &self.checkpoint())?;
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / self.data.train.len() as f64,
            val_loss,
            lr,
            seconds: if self.train.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs and writes `final.ckpt` when configured.
    pub fn run(mut self) -> Result<FitOutcome> {
        let mut best_params = self.state.params.clone();
        let mut best_epoch = self.state.epoch;
        while self.state.epoch < self.train.epochs {
            let before = self.state.best_val_loss;
            self.run_epoch()?;
            if self.state.best_val_loss < before {
                best_params = self.state.params.clone();
                best_epoch = self.state.epoch;
            }
        }
        if let Some(dir) = &self.train.checkpoint_dir {
            save_checkpoint(&dir.join("final.ckpt"), &self.checkpoint())?;
        }
        Ok(FitOutcome {
            params: self.state.params,
            best_params,
            history: self.history,
            best_val_loss: self.state.best_val_loss,
            best_epoch,
            augment: self.augment,
        })
    }
}

/// Trains from scratch for `train.epochs` epochs.
pub fn fit(
    data: &Dataset,
    vit: &ViTConfig,
    train: &TrainConfig,
    loss: &LossConfig,
    augment: &AugmentConfig,
) -> Result<FitOutcome> {
    Trainer::new(data, vit.clone(), train.clone(), loss.clone(), augment.clone())?.run()
}
