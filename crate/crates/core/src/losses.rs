//! Training objectives: weighted pixel reconstruction, per-layer feature
//! reconstruction, their structural combination, and the adversarial pair.
//!
//! Pixel and feature terms are squared Frobenius distances. By default each
//! term is divided by its element count so unit weights balance layers of
//! different sizes; setting [`LossWeights::normalized`] to false recovers the
//! raw squared norms. Targets enter every loss as tape constants, so no
//! gradient ever flows through a target branch.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nets::{disc_forward, featnet_forward, DiscVars, FeatureNetVars};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weights of the structural and adversarial objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Pixel-term weight.
    pub lambda0: f64,
    /// Feature-term weight per tap name.
    pub lambda_by_tap: BTreeMap<String, f64>,
    /// Adversarial weight in the generator objective.
    pub gamma: f64,
    /// Pixel-loss multiplier on the overlap band.
    pub overlap_scale: f64,
    /// Width of the overlap band in pixels.
    pub band_width: usize,
    /// Divide each term by its element count (see module docs).
    pub normalized: bool,
}

impl LossWeights {
    /// Default combination: pixel plus conv1_1, conv2_1 and conv3_1 features,
    /// all at weight 1, gamma 0.01, overlap scale 10.
    pub fn default_with_band(band_width: usize) -> Self {
        let mut lambda_by_tap = BTreeMap::new();
        for tap in ["conv1_1", "conv2_1", "conv3_1"] {
            lambda_by_tap.insert(tap.to_string(), 1.0);
        }
        LossWeights {
            lambda0: 1.0,
            lambda_by_tap,
            gamma: 0.01,
            overlap_scale: 10.0,
            band_width,
            normalized: true,
        }
    }

    pub fn paper() -> Self {
        Self::default_with_band(4)
    }

    pub fn desk() -> Self {
        Self::default_with_band(2)
    }

    /// Same weights with every feature term removed (pixel-only training).
    pub fn pixel_only(mut self) -> Self {
        self.lambda_by_tap.clear();
        self
    }

    /// Taps with a strictly positive weight, in name order.
    pub fn active_taps(&self) -> Vec<String> {
        self.lambda_by_tap
            .iter()
            .filter(|&(_, &w)| w > 0.0)
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// Per-pixel weight map for the pixel loss: `overlap_scale` on the outer band
/// of the given width, 1 inside. Invariant under horizontal/vertical flips.
pub fn overlap_weight_map(
    prediction_size: usize,
    band_width: usize,
    overlap_scale: f64,
) -> Result<Tensor> {
    if band_width > 0 && 2 * band_width >= prediction_size {
        return Err(Error::Config(format!(
            "band of width {band_width} does not fit a {prediction_size}-pixel prediction"
        )));
    }
    let s = prediction_size;
    Ok(Tensor::from_fn(&[s, s], |i| {
        let (y, x) = (i / s, i % s);
        let in_band =
            y < band_width || x < band_width || y >= s - band_width || x >= s - band_width;
        if in_band {
            overlap_scale
        } else {
            1.0
        }
    }))
}

/// Weighted squared pixel distance between a prediction on the tape and a
/// constant target. `weights`, when given, is a per-pixel map broadcast over
/// channels.
pub fn pixel_loss(
    tape: &mut Tape,
    y: Var,
    target: &Tensor,
    weights: Option<&Tensor>,
    normalized: bool,
) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    if target.shape() != shape {
        return Err(Error::Shape(format!(
            "pixel_loss: prediction {:?} vs target {:?}",
            shape,
            target.shape()
        )));
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(y, t)?;
    let sq = tape.square(diff);
    let weighted = match weights {
        Some(map) => {
            if shape.len() != 3 || map.shape() != [shape[0], shape[1]] {
                return Err(Error::Shape(format!(
                    "pixel_loss: weight map {:?} does not cover image {:?}",
                    map.shape(),
                    shape
                )));
            }
            let c = shape[2];
            let expanded = Tensor::from_fn(&shape, |i| map.data()[i / c]);
            let w = tape.constant(expanded);
            tape.mul(sq, w)?
        }
        None => sq,
    };
    let total = tape.sum(weighted);
    Ok(maybe_normalize(tape, total, target.numel(), normalized))
}

/// Squared distance at one feature tap between a prediction on the tape and
/// a constant target image. Differentiable through `y` only.
pub fn feature_loss(
    tape: &mut Tape,
    y: Var,
    target: &Tensor,
    featnet: &FeatureNetVars,
    tap: &str,
    normalized: bool,
) -> Result<Var> {
    let taps = vec![tap.to_string()];
    let tv = tape.constant(target.clone());
    let t_maps = featnet_forward(tape, featnet, tv, &taps)?;
    let t_feat = tape.value(t_maps[tap]).clone();
    let y_maps = featnet_forward(tape, featnet, y, &taps)?;
    feature_loss_to_map(tape, y_maps[tap], &t_feat, normalized)
}

/// Feature loss against a precomputed target feature map.
pub fn feature_loss_to_map(
    tape: &mut Tape,
    y_feat: Var,
    target_feat: &Tensor,
    normalized: bool,
) -> Result<Var> {
    if tape.value(y_feat).shape() != target_feat.shape() {
        return Err(Error::Shape(format!(
            "feature maps disagree: {:?} vs {:?}",
            tape.value(y_feat).shape(),
            target_feat.shape()
        )));
    }
    let t = tape.constant(target_feat.clone());
    let diff = tape.sub(y_feat, t)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(maybe_normalize(tape, total, target_feat.numel(), normalized))
}

/// The pieces of a structural loss evaluation; values are read off the tape.
pub struct StructuralTerms {
    pub total: Var,
    pub pixel: Var,
    /// Sum of weighted feature terms; None when no tap is active.
    pub feature_total: Option<Var>,
}

/// Weighted sum of the pixel term (with overlap-band weighting from
/// `weights`) and the active per-tap feature terms. With every feature
/// weight at zero this reduces exactly to the pixel loss.
pub fn structural_loss(
    tape: &mut Tape,
    y: Var,
    target: &Tensor,
    featnet: &FeatureNetVars,
    weights: &LossWeights,
) -> Result<StructuralTerms> {
    let active = weights.active_taps();
    let target_feats = if active.is_empty() {
        BTreeMap::new()
    } else {
        let tv = tape.constant(target.clone());
        let maps = featnet_forward(tape, featnet, tv, &active)?;
        maps.into_iter()
            .map(|(k, v)| (k, tape.value(v).clone()))
            .collect()
    };
    structural_loss_cached(tape, y, target, featnet, weights, &target_feats)
}

/// [`structural_loss`] with target feature maps supplied by the caller
/// (the trainer caches them per sample).
pub fn structural_loss_cached(
    tape: &mut Tape,
    y: Var,
    target: &Tensor,
    featnet: &FeatureNetVars,
    weights: &LossWeights,
    target_feats: &BTreeMap<String, Tensor>,
) -> Result<StructuralTerms> {
    for tap in weights.lambda_by_tap.keys() {
        featnet.config.resolve_tap(tap)?;
    }
    let shape = tape.value(y).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "structural_loss expects an h x w x c prediction, got {shape:?}"
        )));
    }
    let map = overlap_weight_map(shape[0], weights.band_width, weights.overlap_scale)?;
    if shape[0] != shape[1] {
        return Err(Error::Shape(format!(
            "structural_loss expects a square prediction, got {shape:?}"
        )));
    }
    let pixel = pixel_loss(tape, y, target, Some(&map), weights.normalized)?;
    let pixel_scaled = tape.scale(pixel, weights.lambda0);

    let active = weights.active_taps();
    if active.is_empty() {
        return Ok(StructuralTerms {
            total: pixel_scaled,
            pixel,
            feature_total: None,
        });
    }
    let y_maps = featnet_forward(tape, featnet, y, &active)?;
    let mut feat_total: Option<Var> = None;
    for tap in &active {
        let lambda = weights.lambda_by_tap[tap];
        let t_feat = target_feats.get(tap).ok_or_else(|| {
            Error::Config(format!("no cached target features for tap {tap}"))
        })?;
        let term = feature_loss_to_map(tape, y_maps[tap], t_feat, weights.normalized)?;
        let scaled = tape.scale(term, lambda);
        feat_total = Some(match feat_total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let feature_total = feat_total.unwrap();
    let total = tape.add(pixel_scaled, feature_total)?;
    Ok(StructuralTerms {
        total,
        pixel,
        feature_total: Some(feature_total),
    })
}

/// Adversarial log-likelihood for one image:
/// `ln D(real) + ln(1 - D(fake))`. Finite for any finite inputs thanks to
/// the clamped sigmoid. The discriminator maximizes this quantity; the
/// generator receives it weighted by gamma.
pub fn adversarial_loss(
    tape: &mut Tape,
    disc: &DiscVars,
    real: &Tensor,
    fake: Var,
) -> Result<Var> {
    if tape.value(fake).shape() != real.shape() {
        return Err(Error::Shape(format!(
            "adversarial_loss: fake {:?} vs real {:?}",
            tape.value(fake).shape(),
            real.shape()
        )));
    }
    let rv = tape.constant(real.clone());
    let d_real = disc_forward(tape, disc, rv)?;
    let d_fake = disc_forward(tape, disc, fake)?;
    let ln_real = tape.ln(d_real)?;
    let one_minus_fake = tape.affine(d_fake, -1.0, 1.0);
    let ln_fake = tape.ln(one_minus_fake)?;
    tape.add(ln_real, ln_fake)
}

/// Generator-side objective with its reportable parts.
pub struct GeneratorObjective {
    pub total: Var,
    pub structural: StructuralTerms,
    /// `ln(1 - D(fake))`, before the gamma weighting; None when gamma is 0.
    pub adversarial: Option<Var>,
}

/// Generator side of the min-max objective:
/// `structural + gamma * ln(1 - D(fake))` with the discriminator frozen
/// (bind it with `trainable = false`). With gamma 0 this is exactly the
/// structural loss.
pub fn generator_objective(
    tape: &mut Tape,
    y: Var,
    target: &Tensor,
    featnet: &FeatureNetVars,
    disc: &DiscVars,
    weights: &LossWeights,
    target_feats: &BTreeMap<String, Tensor>,
) -> Result<GeneratorObjective> {
    let structural = structural_loss_cached(tape, y, target, featnet, weights, target_feats)?;
    if weights.gamma == 0.0 {
        return Ok(GeneratorObjective {
            total: structural.total,
            structural,
            adversarial: None,
        });
    }
    let d_fake = disc_forward(tape, disc, y)?;
    let one_minus = tape.affine(d_fake, -1.0, 1.0);
    let ln_fake = tape.ln(one_minus)?;
    let weighted = tape.scale(ln_fake, weights.gamma);
    let total = tape.add(structural.total, weighted)?;
    Ok(GeneratorObjective {
        total,
        structural,
        adversarial: Some(ln_fake),
    })
}

/// Discriminator side of the min-max objective, as a quantity to minimize:
/// `-[ln D(real) + ln(1 - D(fake))]`. The fake patch is a constant here
/// (the generator is frozen during the discriminator's step).
pub fn discriminator_objective(
    tape: &mut Tape,
    disc: &DiscVars,
    real: &Tensor,
    fake: &Tensor,
) -> Result<Var> {
    let fv = tape.constant(fake.clone());
    let adv = adversarial_loss(tape, disc, real, fv)?;
    Ok(tape.scale(adv, -1.0))
}

fn maybe_normalize(tape: &mut Tape, total: Var, count: usize, normalized: bool) -> Var {
    if normalized {
        tape.scale(total, 1.0 / count as f64)
    } else {
        total
    }
}
