//! Supervised training: random crops, the L1 + SSIM objective, Adam with a
//! step-decay schedule, and periodic checkpoints.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{self, derive_seed, Manifest};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, RgbImage};
use crate::loss::{total_loss, LossReport, SsimConfig};
use crate::network::checkpoint::Checkpoint;
use crate::network::FusionNetwork;
use crate::tensor::{Adam, AdamConfig, Element};

pub const CSV_HEADER: &str = "epoch,step,l1,ssim_loss,total,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr0: f64,
    /// Epochs between learning-rate drops.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    pub ssim: SsimConfig,
    pub adam: AdamConfig,
    /// Save every this many epochs (and always after the last one).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps in total, whatever the epoch.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.2,
            lr0: 1e-4,
            lr_decay_every: 200,
            lr_decay_factor: 10.0,
            epochs: 300,
            batch: 8,
            crop: 256,
            seed: 0,
            ssim: SsimConfig::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 10,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// `lr0 / factor^floor(epoch / lr_decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = epoch / self.lr_decay_every.max(1);
        self.lr0 / self.lr_decay_factor.powi(drops.min(i32::MAX as usize) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr0)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be at least 1"));
        }
        if self.lr_decay_every == 0 || self.lr_decay_factor <= 0.0 {
            return Err(Error::invalid("learning-rate decay needs a positive period and factor"));
        }
        if self.crop < self.ssim.window {
            return Err(Error::invalid(format!(
                "crop {} is smaller than the {}-pixel SSIM window",
                self.crop, self.ssim.window
            )));
        }
        Ok(())
    }
}

/// Aligned near/far/ground-truth images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingTriplet {
    pub near: RgbImage,
    pub far: RgbImage,
    pub gt: RgbImage,
}

impl TrainingTriplet {
    pub fn width(&self) -> usize {
        self.gt.width()
    }

    pub fn height(&self) -> usize {
        self.gt.height()
    }

    /// The same window from all three images.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<TrainingTriplet> {
        Ok(TrainingTriplet {
            near: self.near.crop(x0, y0, size, size)?,
            far: self.far.crop(x0, y0, size, size)?,
            gt: self.gt.crop(x0, y0, size, size)?,
        })
    }

    pub fn random_crop<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<TrainingTriplet> {
        if size > self.width() || size > self.height() {
            return Err(Error::invalid(format!(
                "crop {size} larger than {}x{} training image",
                self.width(),
                self.height()
            )));
        }
        let x0 = rng.gen_range(0..=self.width() - size);
        let y0 = rng.gen_range(0..=self.height() - size);
        self.crop(x0, y0, size)
    }
}

/// Reads every triplet a manifest lists. Unreadable entries are skipped
/// with a warning; it is an error if none remain.
pub fn load_training_set(manifest: &Manifest) -> Result<Vec<TrainingTriplet>> {
    let mut set = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        match dataset::load_entry(entry) {
            Ok((near, far, gt)) => set.push(TrainingTriplet { near, far, gt }),
            Err(e) => log::warn!("skipping triplet {}: {e}", entry.gt.display()),
        }
    }
    if set.is_empty() {
        return Err(Error::Data("no readable triplet in the manifest".into()));
    }
    Ok(set)
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub report: LossReport,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!("{},{},{},{},{},{}", r.epoch, r.step, r.l1, r.ssim_loss, r.total, self.lr)
    }
}

pub fn write_loss_csv(out: &mut impl Write, records: &[StepRecord]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

pub struct Trainer<T: Element = f32> {
    pub net: FusionNetwork<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    /// Epochs finished so far.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(net: FusionNetwork<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            net,
            optimizer: Adam::new(config.adam),
            config,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from a checkpoint: weights, optimizer moments and counters.
    pub fn resume(checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = checkpoint.to_network()?;
        let state = checkpoint.optimizer_state()?.unwrap_or_default();
        Ok(Trainer {
            net,
            optimizer: Adam::with_state(config.adam, state),
            config,
            epoch: checkpoint.meta.epochs_completed as usize,
            step: checkpoint.meta.optimizer_step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_network(&self.net, self.config.lambda, self.epoch as u32, Some(&self.optimizer.state))
    }

    /// One optimizer step on a batch of equally sized triplets.
    pub fn train_batch(&mut self, batch: &[TrainingTriplet], lr: f64) -> Result<StepRecord> {
        let near: Vec<&RgbImage> = batch.iter().map(|t| &t.near).collect();
        let far: Vec<&RgbImage> = batch.iter().map(|t| &t.far).collect();
        let gt: Vec<&RgbImage> = batch.iter().map(|t| &t.gt).collect();
        let inputs = [images_to_tensor::<T>(&near)?, images_to_tensor::<T>(&far)?];
        let target = images_to_tensor::<T>(&gt)?;

        self.net.zero_grad();
        let fused = self.net.forward(&inputs)?;
        let (loss, mut report) = total_loss(&fused, &target, self.config.lambda, &self.config.ssim)?;
        if !report.total.is_finite() {
            return Err(Error::Data(format!("non-finite loss at step {}", self.step)));
        }
        loss.backward()?;
        self.optimizer.step(&mut self.net.parameters_mut(), lr)?;
        report.epoch = self.epoch;
        report.step = self.step;
        self.step += 1;
        Ok(StepRecord { report, lr })
    }

    /// The shuffled, cropped batches of the current epoch.
    pub fn epoch_batches(&self, data: &[TrainingTriplet]) -> Result<Vec<Vec<TrainingTriplet>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, self.epoch as u64));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&i| data[i].random_crop(self.config.crop, &mut rng))
                    .collect()
            })
            .collect()
    }

    fn done(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Trains until the epoch or step budget runs out. Checkpoints go to
    /// `checkpoint_path` every `checkpoint_every` epochs and at the end.
    pub fn run(
        &mut self,
        data: &[TrainingTriplet],
        checkpoint_path: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let smallest = data.iter().map(|t| t.width().min(t.height())).min().unwrap_or(0);
        if self.config.crop > smallest {
            return Err(Error::invalid(format!(
                "crop {} exceeds the smallest training image side {smallest}",
                self.config.crop
            )));
        }
        let mut records = Vec::new();
        while !self.done() {
            let lr = self.config.lr_at(self.epoch);
            for batch in self.epoch_batches(data)? {
                let record = self.train_batch(&batch, lr)?;
                on_step(&record);
                records.push(record);
                if self.config.max_steps.is_some_and(|m| self.step >= m) {
                    break;
                }
            }
            self.epoch += 1;
            let every = self.config.checkpoint_every.max(1);
            if let Some(path) = checkpoint_path {
                if self.epoch.is_multiple_of(every) || self.done() {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(records)
    }
}
