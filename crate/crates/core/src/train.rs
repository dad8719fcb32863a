//! Two-phase curriculum training: structural loss first, then adversarial
//! fine-tuning with a co-trained discriminator.
//!
//! Determinism contract: given (seed, config, dataset), checkpoints are
//! bit-identical across runs and thread counts. Batch indices and every
//! other random draw at step `t` come from an RNG derived from `(seed, t)`
//! alone, so a run resumed from any checkpoint continues exactly as the
//! uninterrupted run would have. Gradients are averaged over the batch in
//! slot order regardless of which worker computed them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::data::{mask_center, per_index_rng, Dataset, FillMode, MaskSpec};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_objective, generator_objective, structural_loss_cached, LossWeights,
};
use crate::nets::checkpoint::{save_checkpoint, Checkpoint, TrainState};
use crate::nets::{
    ce_forward, ce_predict, disc_predict, CeConfig, CeParams, DiscConfig, DiscParams,
    FeatureNetConfig, FeatureNetParams,
};
use crate::tensor::adam::{adam_step, AdamState};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Abort when a loss exceeds this bound or becomes non-finite.
const DIVERGENCE_BOUND: f64 = 1e6;

/// Schedule and optimizer settings for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Steps of structural-loss training (phase 1).
    pub phase1_steps: u64,
    /// Steps of adversarial training (phase 2).
    pub phase2_steps: u64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Invoke the evaluation callback every this many steps (0 = never).
    pub eval_cadence: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_cadence: u64,
}

impl TrainConfig {
    /// Desk schedule: 200 structural steps then 40 adversarial steps,
    /// keeping the 5:1 phase ratio.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            phase1_steps: 200,
            phase2_steps: 40,
            lr_generator: 2e-4,
            lr_discriminator: 2e-5,
            batch_size: 16,
            seed,
            eval_cadence: 0,
            checkpoint_cadence: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_generator < 0.0 || self.lr_discriminator < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }
}

/// One row of the loss trace. `l_adv` is the unweighted generator-side
/// adversarial term `ln(1 - D(fake))`; `l_total` includes it times gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub phase: u8,
    pub l_pix: f64,
    pub l_feat_total: f64,
    pub l_adv: f64,
    pub l_total: f64,
}

/// Loss history of a run plus any warnings raised along the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
    pub warnings: Vec<String>,
    /// Step index at which phase 2 began, when it did.
    pub phase_boundary: Option<u64>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,phase,l_pix,l_feat_total,l_adv,l_total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.phase, r.l_pix, r.l_feat_total, r.l_adv, r.l_total
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Sinks and hooks for a run.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Checkpoints are written here at the configured cadence and at the end.
    pub checkpoint_path: Option<&'a Path>,
    /// Called with a parameter snapshot at the eval cadence.
    #[allow(clippy::type_complexity)]
    pub on_eval: Option<&'a mut dyn FnMut(&CeParams, u64)>,
}

/// Mutable training state; drives both phases step by step.
pub struct Trainer {
    pub ce: CeParams,
    pub disc: Option<DiscParams>,
    pub featnet: FeatureNetParams,
    pub weights: LossWeights,
    pub config: TrainConfig,
    pub mask_spec: MaskSpec,
    pub ce_adam: AdamState,
    pub disc_adam: Option<AdamState>,
    /// Completed steps (phase 1 steps count from 0).
    pub step: u64,
    target_feat_cache: BTreeMap<usize, BTreeMap<String, Tensor>>,
    saturated_streak: u64,
    saturation_warned: bool,
}

impl Trainer {
    pub fn new(
        ce: CeParams,
        featnet: FeatureNetParams,
        weights: LossWeights,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mask_spec = MaskSpec::new(
            ce.config.input_size,
            ce.config.prediction_size,
            ce.config.hole_size,
            FillMode::ContextMean,
        )?;
        let ce_adam = AdamState::new(&ce.tensors(), config.lr_generator);
        Ok(Trainer {
            ce,
            disc: None,
            featnet,
            weights,
            config,
            mask_spec,
            ce_adam,
            disc_adam: None,
            step: 0,
            target_feat_cache: BTreeMap::new(),
            saturated_streak: 0,
            saturation_warned: false,
        })
    }

    /// Fresh trainer with seeded networks for the given geometry. The
    /// feature net's input mean is estimated from the dataset.
    pub fn init(
        ce_config: &CeConfig,
        fn_config: &FeatureNetConfig,
        weights: LossWeights,
        config: TrainConfig,
        dataset: &Dataset,
    ) -> Result<Self> {
        let ce = CeParams::init(ce_config, config.seed ^ 0xCE)?;
        let mut featnet = FeatureNetParams::init(fn_config, config.seed ^ 0xFEA7);
        featnet.channel_mean = dataset_channel_mean(dataset)?;
        Self::new(ce, featnet, weights, config)
    }

    /// Continue from a saved checkpoint. The configuration and weights must
    /// be the ones the run was started with.
    pub fn from_checkpoint(
        ckpt: Checkpoint,
        weights: LossWeights,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let train = ckpt.train.ok_or_else(|| {
            Error::Config("checkpoint carries no optimizer state; cannot resume".into())
        })?;
        if train.step > config.total_steps() {
            return Err(Error::Config(format!(
                "checkpoint is at step {} but the schedule has only {} steps",
                train.step,
                config.total_steps()
            )));
        }
        // Completed steps must map to the same phases under the resuming
        // schedule: no discriminator means every completed step was phase 1.
        let schedule_ok = match &ckpt.disc {
            None => config.phase1_steps >= train.step,
            Some(_) => config.phase1_steps <= train.step,
        };
        if !schedule_ok {
            return Err(Error::Config(
                "checkpoint phase does not match the configured schedule".into(),
            ));
        }
        let mask_spec = MaskSpec::new(
            ckpt.ce.config.input_size,
            ckpt.ce.config.prediction_size,
            ckpt.ce.config.hole_size,
            FillMode::ContextMean,
        )?;
        Ok(Trainer {
            ce: ckpt.ce,
            disc: ckpt.disc,
            featnet: ckpt.featnet,
            weights,
            config,
            mask_spec,
            ce_adam: train.ce_adam,
            disc_adam: train.disc_adam,
            step: train.step,
            target_feat_cache: BTreeMap::new(),
            saturated_streak: 0,
            saturation_warned: false,
        })
    }

    pub fn current_phase(&self) -> u8 {
        if self.step < self.config.phase1_steps {
            1
        } else {
            2
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            ce: self.ce.clone(),
            featnet: self.featnet.clone(),
            disc: self.disc.clone(),
            train: Some(TrainState {
                ce_adam: self.ce_adam.clone(),
                disc_adam: self.disc_adam.clone(),
                phase: self.current_phase(),
                step: self.step,
            }),
            epoch: 0,
        }
    }

    /// Run the remaining schedule, recording one trace row per step.
    pub fn run(&mut self, dataset: &Dataset, opts: &mut RunOptions) -> Result<LossTrace> {
        self.run_until(dataset, self.config.total_steps(), opts)
    }

    /// Run until `stop_at_step` completed steps (capped by the schedule).
    pub fn run_until(
        &mut self,
        dataset: &Dataset,
        stop_at_step: u64,
        opts: &mut RunOptions,
    ) -> Result<LossTrace> {
        let stop = stop_at_step.min(self.config.total_steps());
        let mut trace = LossTrace::default();
        if self.step >= self.config.phase1_steps && self.config.phase2_steps > 0 {
            trace.phase_boundary = Some(self.config.phase1_steps);
        }
        while self.step < stop {
            if self.current_phase() == 2 && self.disc.is_none() {
                self.enter_phase2();
                trace.phase_boundary = Some(self.step);
            }
            let row = if self.current_phase() == 1 {
                self.step_phase1(dataset)?
            } else {
                self.step_phase2(dataset, &mut trace)?
            };
            trace.rows.push(row);
            self.step += 1;

            if self.config.eval_cadence > 0 && self.step % self.config.eval_cadence == 0 {
                if let Some(cb) = opts.on_eval.as_mut() {
                    let snapshot = self.ce.clone();
                    cb(&snapshot, self.step);
                }
            }
            if let Some(path) = opts.checkpoint_path {
                let due = self.config.checkpoint_cadence > 0
                    && self.step % self.config.checkpoint_cadence == 0;
                if due || self.step == self.config.total_steps() {
                    save_checkpoint(path, &self.checkpoint())?;
                }
            }
        }
        Ok(trace)
    }

    fn enter_phase2(&mut self) {
        let cfg = DiscConfig {
            input_size: self.ce.config.prediction_size,
            channels: disc_channels_for(&self.ce.config),
        };
        let disc = DiscParams::init(&cfg, self.config.seed ^ 0xD15C)
            .expect("discriminator config derived from a valid encoder config");
        self.disc_adam = Some(AdamState::new(&disc.tensors(), self.config.lr_discriminator));
        self.disc = Some(disc);
    }

    /// Deterministic batch of dataset indices for a step.
    fn batch_indices(&self, step: u64, dataset: &Dataset) -> Vec<usize> {
        let mut rng = per_index_rng(self.config.seed, step, 0xBA7C);
        (0..self.config.batch_size)
            .map(|_| rng.gen_range(0..dataset.len()))
            .collect()
    }

    /// Target feature maps for the active taps, cached per index when the
    /// dataset is deterministic.
    fn target_features(
        &mut self,
        dataset: &Dataset,
        index: usize,
        center: &Tensor,
    ) -> Result<BTreeMap<String, Tensor>> {
        let taps = self.weights.active_taps();
        if taps.is_empty() {
            return Ok(BTreeMap::new());
        }
        if dataset.is_deterministic_per_index() {
            if let Some(hit) = self.target_feat_cache.get(&index) {
                return Ok(hit.clone());
            }
        }
        let feats = crate::nets::featnet_features(&self.featnet, center, &taps)?;
        if dataset.is_deterministic_per_index() {
            self.target_feat_cache.insert(index, feats.clone());
        }
        Ok(feats)
    }

    fn fetch_batch(
        &mut self,
        dataset: &Dataset,
        step: u64,
    ) -> Result<Vec<(Tensor, Tensor, BTreeMap<String, Tensor>)>> {
        let indices = self.batch_indices(step, dataset);
        let mut batch = Vec::with_capacity(indices.len());
        for idx in indices {
            let img = dataset.fetch(idx, step)?;
            let sample = mask_center(&img, &self.mask_spec)?;
            let x = sample.masked.to_tensor();
            let target = sample.center.to_tensor();
            let feats = self.target_features(dataset, idx, &target)?;
            batch.push((x, target, feats));
        }
        Ok(batch)
    }

    fn step_phase1(&mut self, dataset: &Dataset) -> Result<TraceRow> {
        let step = self.step;
        let batch = self.fetch_batch(dataset, step)?;
        let n = batch.len() as f64;

        let results: Vec<_> = batch
            .par_iter()
            .map(|(x, target, feats)| -> Result<(Vec<Tensor>, f64, f64, f64)> {
                let mut tape = Tape::new();
                let fnv = self.featnet.bind(&mut tape);
                let cev = self.ce.bind(&mut tape, true);
                let xv = tape.constant(x.clone());
                let y = ce_forward(&mut tape, &cev, xv)?;
                let terms = structural_loss_cached(&mut tape, y, target, &fnv, &self.weights, feats)?;
                tape.backward(terms.total)?;
                let total = tape.value(terms.total).scalar_value()?;
                let pix = tape.value(terms.pixel).scalar_value()?;
                let feat = terms
                    .feature_total
                    .map(|f| tape.value(f).scalar_value())
                    .transpose()?
                    .unwrap_or(0.0);
                Ok((cev.grads(&tape), pix, feat, total))
            })
            .collect();

        let mut grads: Option<Vec<Tensor>> = None;
        let (mut pix_sum, mut feat_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for r in results {
            let (g, pix, feat, total) = r?;
            accumulate_grads(&mut grads, g);
            pix_sum += pix;
            feat_sum += feat;
            total_sum += total;
        }
        let mut grads = grads.expect("non-empty batch");
        for g in &mut grads {
            for v in g.data_mut() {
                *v /= n;
            }
        }
        let l_total = total_sum / n;
        self.guard(l_total, step)?;
        adam_step(&mut self.ce_adam, &mut self.ce.tensors_mut(), &grads)?;
        Ok(TraceRow {
            step,
            phase: 1,
            l_pix: pix_sum / n,
            l_feat_total: feat_sum / n,
            l_adv: 0.0,
            l_total,
        })
    }

    fn step_phase2(&mut self, dataset: &Dataset, trace: &mut LossTrace) -> Result<TraceRow> {
        let step = self.step;
        let batch = self.fetch_batch(dataset, step)?;
        let n = batch.len() as f64;
        let disc = self.disc.as_ref().expect("phase 2 discriminator");

        // The discriminator's step sees the generator's current predictions
        // as fixed inputs.
        let fakes: Vec<Tensor> = batch
            .par_iter()
            .map(|(x, _, _)| ce_predict(&self.ce, x))
            .collect::<Result<_>>()?;

        let disc_results: Vec<_> = batch
            .par_iter()
            .zip(&fakes)
            .map(|((_, target, _), fake)| -> Result<(Vec<Tensor>, f64, f64)> {
                let mut tape = Tape::new();
                let dv = disc.bind(&mut tape, true);
                let obj = discriminator_objective(&mut tape, &dv, target, fake)?;
                tape.backward(obj)?;
                let d_real = disc_predict(disc, target)?;
                let d_fake = disc_predict(disc, fake)?;
                Ok((dv.grads(&tape), d_real, d_fake))
            })
            .collect();
        let mut d_grads: Option<Vec<Tensor>> = None;
        let mut saturated = true;
        for r in disc_results {
            let (g, d_real, d_fake) = r?;
            accumulate_grads(&mut d_grads, g);
            let extreme = |d: f64| !(0.01..=0.99).contains(&d);
            saturated &= extreme(d_real) && extreme(d_fake);
        }
        let mut d_grads = d_grads.expect("non-empty batch");
        for g in &mut d_grads {
            for v in g.data_mut() {
                *v /= n;
            }
        }
        {
            let disc = self.disc.as_mut().unwrap();
            let adam = self.disc_adam.as_mut().unwrap();
            adam_step(adam, &mut disc.tensors_mut(), &d_grads)?;
        }
        self.track_saturation(saturated, dataset, trace);

        // Generator step against the updated, frozen discriminator.
        let disc = self.disc.as_ref().unwrap();
        let gen_results: Vec<_> = batch
            .par_iter()
            .map(|(x, target, feats)| -> Result<(Vec<Tensor>, TraceRow)> {
                let mut tape = Tape::new();
                let fnv = self.featnet.bind(&mut tape);
                let dv = disc.bind(&mut tape, false);
                let cev = self.ce.bind(&mut tape, true);
                let xv = tape.constant(x.clone());
                let y = ce_forward(&mut tape, &cev, xv)?;
                let obj =
                    generator_objective(&mut tape, y, target, &fnv, &dv, &self.weights, feats)?;
                tape.backward(obj.total)?;
                let row = TraceRow {
                    step,
                    phase: 2,
                    l_pix: tape.value(obj.structural.pixel).scalar_value()?,
                    l_feat_total: obj
                        .structural
                        .feature_total
                        .map(|f| tape.value(f).scalar_value())
                        .transpose()?
                        .unwrap_or(0.0),
                    l_adv: obj
                        .adversarial
                        .map(|a| tape.value(a).scalar_value())
                        .transpose()?
                        .unwrap_or(0.0),
                    l_total: tape.value(obj.total).scalar_value()?,
                };
                Ok((cev.grads(&tape), row))
            })
            .collect();
        let mut g_grads: Option<Vec<Tensor>> = None;
        let (mut pix, mut feat, mut adv, mut total) = (0.0, 0.0, 0.0, 0.0);
        for r in gen_results {
            let (g, row) = r?;
            accumulate_grads(&mut g_grads, g);
            pix += row.l_pix;
            feat += row.l_feat_total;
            adv += row.l_adv;
            total += row.l_total;
        }
        let mut g_grads = g_grads.expect("non-empty batch");
        for g in &mut g_grads {
            for v in g.data_mut() {
                *v /= n;
            }
        }
        let l_total = total / n;
        self.guard(l_total, step)?;
        adam_step(&mut self.ce_adam, &mut self.ce.tensors_mut(), &g_grads)?;
        Ok(TraceRow {
            step,
            phase: 2,
            l_pix: pix / n,
            l_feat_total: feat / n,
            l_adv: adv / n,
            l_total,
        })
    }

    fn guard(&self, loss: f64, step: u64) -> Result<()> {
        if !loss.is_finite() || loss.abs() > DIVERGENCE_BOUND {
            return Err(Error::Numeric(format!(
                "loss {loss} out of bounds at step {step}; last checkpoint retained"
            )));
        }
        Ok(())
    }

    fn track_saturation(&mut self, saturated: bool, dataset: &Dataset, trace: &mut LossTrace) {
        let epoch_steps =
            (dataset.len() as u64).div_ceil(self.config.batch_size as u64).max(1);
        if saturated {
            self.saturated_streak += 1;
            if self.saturated_streak >= epoch_steps && !self.saturation_warned {
                let msg = format!(
                    "discriminator saturated (D near 0 or 1 on all samples) for a full epoch ending at step {}",
                    self.step
                );
                log::warn!("{msg}");
                trace.warnings.push(msg);
                self.saturation_warned = true;
            }
        } else {
            self.saturated_streak = 0;
        }
    }
}

/// Discriminator widths paired with an encoder config: half the encoder's
/// channel progression, capped at four layers.
fn disc_channels_for(ce: &CeConfig) -> Vec<usize> {
    let mut out = Vec::new();
    let mut c = ce.encoder_channels[0] / 2;
    let layers = ce.encoder_channels.len().min(4);
    for _ in 0..layers {
        out.push(c.max(2));
        c *= 2;
    }
    out
}

/// Mean RGB over every image in the dataset.
pub fn dataset_channel_mean(dataset: &Dataset) -> Result<[f64; 3]> {
    let mut sums = [0.0; 3];
    for i in 0..dataset.len() {
        let img = dataset.fetch(i, 0)?;
        let m = img.channel_mean();
        for c in 0..3 {
            sums[c] += m[c];
        }
    }
    let n = dataset.len() as f64;
    Ok([sums[0] / n, sums[1] / n, sums[2] / n])
}

/// Phase 1 alone: minimize the structural loss over the dataset.
pub fn train_phase1(
    dataset: &Dataset,
    ce: CeParams,
    featnet: FeatureNetParams,
    weights: LossWeights,
    mut config: TrainConfig,
) -> Result<(CeParams, LossTrace)> {
    config.phase2_steps = 0;
    let mut trainer = Trainer::new(ce, featnet, weights, config)?;
    let trace = trainer.run(dataset, &mut RunOptions::default())?;
    Ok((trainer.ce, trace))
}

/// Phase 2 alone, continuing from phase-1 weights.
pub fn train_phase2(
    dataset: &Dataset,
    ce: CeParams,
    disc: Option<DiscParams>,
    featnet: FeatureNetParams,
    weights: LossWeights,
    mut config: TrainConfig,
) -> Result<(CeParams, DiscParams, LossTrace)> {
    config.phase1_steps = 0;
    let mut trainer = Trainer::new(ce, featnet, weights, config)?;
    if let Some(d) = disc {
        trainer.disc_adam = Some(AdamState::new(
            &d.tensors(),
            trainer.config.lr_discriminator,
        ));
        trainer.disc = Some(d);
    }
    let trace = trainer.run(dataset, &mut RunOptions::default())?;
    Ok((trainer.ce, trainer.disc.unwrap(), trace))
}

/// Full curriculum: phase 1 then phase 2, checkpointing at the configured
/// cadence. Returns the final checkpoint and the loss trace.
pub fn curriculum(
    dataset: &Dataset,
    ce_config: &CeConfig,
    fn_config: &FeatureNetConfig,
    weights: LossWeights,
    config: TrainConfig,
    opts: &mut RunOptions,
) -> Result<(Checkpoint, LossTrace)> {
    let mut trainer = Trainer::init(ce_config, fn_config, weights, config, dataset)?;
    let trace = trainer.run(dataset, opts)?;
    Ok((trainer.checkpoint(), trace))
}

fn accumulate_grads(acc: &mut Option<Vec<Tensor>>, g: Vec<Tensor>) {
    match acc {
        None => *acc = Some(g),
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                for (av, bv) in a.data_mut().iter_mut().zip(b.data()) {
                    *av += bv;
                }
            }
        }
    }
}
