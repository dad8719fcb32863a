//! Optimization-based refinement of a context-encoder prediction.
//!
//! The refiner minimizes an energy over the hole pixels of a full image:
//! a neural-patch term pulling each hole patch toward its best match
//! outside the hole, a guidance term keeping the central crop close to the
//! encoder prediction in feature space, and squared total variation. The
//! minimization alternates exact correspondence updates with backtracking
//! gradient descent on the image, coarse to fine over a pyramid. Pixels
//! outside the hole are never touched.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::feature_loss_to_map;
use crate::nets::{featnet_features, featnet_forward, FeatureNetParams};
use crate::tensor::tape::{total_variation_terms, total_variation_value, GridPoint, Tape, Var};
use crate::tensor::Tensor;

/// Square hole centered in a square image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HoleGeometry {
    pub image_size: usize,
    pub hole_offset: usize,
    pub hole_size: usize,
}

impl HoleGeometry {
    pub fn centered(image_size: usize, hole_size: usize) -> Result<Self> {
        if hole_size == 0 || hole_size >= image_size || (image_size - hole_size) % 2 != 0 {
            return Err(Error::Config(format!(
                "hole {hole_size} cannot be centered in image {image_size}"
            )));
        }
        Ok(HoleGeometry {
            image_size,
            hole_offset: (image_size - hole_size) / 2,
            hole_size,
        })
    }

    pub fn in_hole(&self, y: usize, x: usize) -> bool {
        let o = self.hole_offset;
        y >= o && y < o + self.hole_size && x >= o && x < o + self.hole_size
    }

    /// Hole pixels in row-major order; the order indexes ψ.
    pub fn hole_pixels(&self) -> Vec<GridPoint> {
        let o = self.hole_offset;
        let mut out = Vec::with_capacity(self.hole_size * self.hole_size);
        for y in o..o + self.hole_size {
            for x in o..o + self.hole_size {
                out.push((y, x));
            }
        }
        out
    }

    fn halved(&self) -> HoleGeometry {
        HoleGeometry {
            image_size: self.image_size / 2,
            hole_offset: self.hole_offset / 2,
            hole_size: self.hole_size / 2,
        }
    }
}

/// Weights, patch size, feature layers and schedule of the refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Weight of the patch-correspondence term.
    pub alpha: f64,
    /// Weight of the guidance term.
    pub alpha_prime: f64,
    /// Weight of the total-variation term.
    pub beta: f64,
    /// Patch radius in feature cells (1 = 3x3 patches).
    pub patch_radius: usize,
    /// Feature layers compared by the patch and guidance terms.
    pub layers: Vec<String>,
    /// Pyramid levels (1 = no pyramid).
    pub scales: usize,
    /// Correspondence/image alternations per scale.
    pub iterations: usize,
    /// Gradient steps per image update.
    pub descent_steps: usize,
    /// Initial step size for backtracking descent.
    pub step_size: f64,
    /// Step halvings before giving up on a descent step.
    pub max_backtracks: usize,
}

impl RefineConfig {
    pub fn paper() -> Self {
        RefineConfig {
            alpha: 1.0,
            alpha_prime: 1.0,
            beta: 0.01,
            patch_radius: 1,
            layers: vec!["conv3_1".into(), "conv4_1".into()],
            scales: 3,
            iterations: 10,
            descent_steps: 8,
            step_size: 0.5,
            max_backtracks: 20,
        }
    }

    pub fn desk() -> Self {
        RefineConfig {
            alpha: 1.0,
            alpha_prime: 1.0,
            beta: 0.01,
            patch_radius: 1,
            layers: vec!["conv1_1".into(), "conv2_1".into()],
            scales: 2,
            iterations: 6,
            descent_steps: 8,
            step_size: 0.5,
            max_backtracks: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.alpha_prime < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("refine weights must be non-negative".into()));
        }
        if self.alpha == 0.0 && self.alpha_prime == 0.0 {
            return Err(Error::Config(
                "at least one of alpha, alpha_prime must be positive".into(),
            ));
        }
        if self.scales == 0 {
            return Err(Error::Config("need at least one scale".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("need at least one feature layer".into()));
        }
        Ok(())
    }
}

/// Per-hole-pixel map to a source location outside the hole, with the match
/// cost of each assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    pub geometry: HoleGeometry,
    /// Source image coordinates, indexed like [`HoleGeometry::hole_pixels`].
    pub sources: Vec<GridPoint>,
    pub costs: Vec<f64>,
}

impl CorrespondenceField {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// One feature map participating in the energy.
#[derive(Debug, Clone)]
pub struct LayerGrid {
    pub name: String,
    /// Cumulative downsampling: image pixel p sits at feature cell p/stride.
    pub stride: usize,
    pub map: Tensor,
}

/// Flattened feature patch around `p` (row-major: dy, dx, channel).
pub fn patch_feature(map: &Tensor, p: GridPoint, radius: usize) -> Result<Vec<f64>> {
    if map.rank() != 3 {
        return Err(Error::Shape(format!(
            "patch_feature expects a rank-3 map, got {:?}",
            map.shape()
        )));
    }
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    if p.0 < radius || p.1 < radius || p.0 + radius >= h || p.1 + radius >= w {
        return Err(Error::Shape(format!(
            "patch of radius {radius} at {p:?} leaves the {h}x{w} map"
        )));
    }
    let side = 2 * radius + 1;
    let mut out = Vec::with_capacity(side * side * c);
    for dy in 0..side {
        let y = p.0 + dy - radius;
        for dx in 0..side {
            let x = p.1 + dx - radius;
            let base = (y * w + x) * c;
            out.extend_from_slice(&map.data()[base..base + c]);
        }
    }
    Ok(out)
}

/// Hole footprint of a layer: inclusive feature-cell range touched by hole
/// pixels under integer division by the stride.
fn hole_footprint(geom: HoleGeometry, stride: usize) -> (usize, usize) {
    let first = geom.hole_offset / stride;
    let last = (geom.hole_offset + geom.hole_size - 1) / stride;
    (first, last)
}

fn patch_over_footprint(cell: GridPoint, radius: usize, footprint: (usize, usize)) -> bool {
    let (f0, f1) = footprint;
    let y_hit = cell.0 + radius >= f0 && cell.0 <= f1 + radius;
    let x_hit = cell.1 + radius >= f0 && cell.1 <= f1 + radius;
    y_hit && x_hit
}

/// Whether a source location q is usable for a layer: its feature patch
/// stays inside the map and entirely outside the hole footprint.
fn admissible_for_layer(
    q: GridPoint,
    geom: HoleGeometry,
    stride: usize,
    radius: usize,
) -> bool {
    let cell = (q.0 / stride, q.1 / stride);
    let side = geom.image_size / stride;
    if cell.0 < radius || cell.1 < radius || cell.0 + radius >= side || cell.1 + radius >= side {
        return false;
    }
    !patch_over_footprint(cell, radius, hole_footprint(geom, stride))
}

/// Layers of `wanted` that are usable at this geometry: the feature map is
/// computable (extent divisible by the stride, for both the image and the
/// guidance crop), every hole-pixel patch fits the map, and at least one
/// admissible source exists. Layers that fail are dropped for this scale.
pub fn effective_layers(
    featnet: &FeatureNetParams,
    wanted: &[String],
    geom: HoleGeometry,
    guidance_size: usize,
    radius: usize,
) -> Result<Vec<String>> {
    let mut kept = Vec::new();
    'layer: for name in wanted {
        let stride = featnet.config.tap_stride(name)?;
        if geom.image_size % stride != 0 || guidance_size % stride != 0 {
            continue;
        }
        let side = geom.image_size / stride;
        // Every hole-pixel patch must fit the map.
        for p in geom.hole_pixels() {
            let cell = (p.0 / stride, p.1 / stride);
            if cell.0 < radius
                || cell.1 < radius
                || cell.0 + radius >= side
                || cell.1 + radius >= side
            {
                continue 'layer;
            }
        }
        // At least one admissible source.
        let any = (0..geom.image_size).any(|y| {
            (0..geom.image_size).any(|x| {
                !geom.in_hole(y, x) && admissible_for_layer((y, x), geom, stride, radius)
            })
        });
        if any {
            kept.push(name.clone());
        }
    }
    Ok(kept)
}

/// Source locations admissible for every layer, in row-major scan order.
fn admissible_sources(
    featnet: &FeatureNetParams,
    layers: &[String],
    geom: HoleGeometry,
    radius: usize,
) -> Result<Vec<GridPoint>> {
    let strides: Vec<usize> = layers
        .iter()
        .map(|l| featnet.config.tap_stride(l))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for y in 0..geom.image_size {
        for x in 0..geom.image_size {
            if geom.in_hole(y, x) {
                continue;
            }
            if strides
                .iter()
                .all(|&s| admissible_for_layer((y, x), geom, s, radius))
            {
                out.push((y, x));
            }
        }
    }
    Ok(out)
}

/// Feature maps of `x` at the given layers.
pub fn layer_grids(
    featnet: &FeatureNetParams,
    x: &Tensor,
    layers: &[String],
) -> Result<Vec<LayerGrid>> {
    let maps = featnet_features(featnet, x, layers)?;
    layers
        .iter()
        .map(|name| {
            Ok(LayerGrid {
                name: name.clone(),
                stride: featnet.config.tap_stride(name)?,
                map: maps[name].clone(),
            })
        })
        .collect()
}

/// Exhaustive correspondence update on precomputed feature grids: for each
/// hole pixel the admissible source minimizing the summed patch distance,
/// ties resolved by scan order.
pub fn correspondence_from_grids(
    grids: &[LayerGrid],
    candidates: &[GridPoint],
    geom: HoleGeometry,
    radius: usize,
) -> Result<CorrespondenceField> {
    if candidates.is_empty() {
        return Err(Error::Data(
            "no admissible source location outside the hole".into(),
        ));
    }
    // Patches at source locations, precomputed per layer.
    let mut source_patches: Vec<Vec<Vec<f64>>> = Vec::with_capacity(grids.len());
    for g in grids {
        let per: Vec<Vec<f64>> = candidates
            .iter()
            .map(|&q| patch_feature(&g.map, (q.0 / g.stride, q.1 / g.stride), radius))
            .collect::<Result<_>>()?;
        source_patches.push(per);
    }
    let pixels = geom.hole_pixels();
    let assignments: Vec<(GridPoint, f64)> = pixels
        .par_iter()
        .map(|&p| -> Result<(GridPoint, f64)> {
            let own: Vec<Vec<f64>> = grids
                .iter()
                .map(|g| patch_feature(&g.map, (p.0 / g.stride, p.1 / g.stride), radius))
                .collect::<Result<_>>()?;
            let mut best = f64::INFINITY;
            let mut best_q = candidates[0];
            for (qi, &q) in candidates.iter().enumerate() {
                let mut cost = 0.0;
                for (li, patches) in source_patches.iter().enumerate() {
                    let (a, b) = (&own[li], &patches[qi]);
                    for (av, bv) in a.iter().zip(b) {
                        let d = av - bv;
                        cost += d * d;
                    }
                    if cost >= best {
                        break;
                    }
                }
                if cost < best {
                    best = cost;
                    best_q = q;
                }
            }
            Ok((best_q, best))
        })
        .collect::<Result<_>>()?;
    let (sources, costs) = assignments.into_iter().unzip();
    Ok(CorrespondenceField {
        geometry: geom,
        sources,
        costs,
    })
}

/// Correspondence update for a complete image: extract features, then run
/// the exhaustive search over the layers usable at this geometry.
pub fn update_correspondence(
    x: &Tensor,
    featnet: &FeatureNetParams,
    config: &RefineConfig,
    geom: HoleGeometry,
) -> Result<CorrespondenceField> {
    let guide_size = guidance_size_for(geom);
    let layers = effective_layers(featnet, &config.layers, geom, guide_size, config.patch_radius)?;
    if layers.is_empty() {
        return Err(Error::Data(
            "no feature layer admits any source location at this scale".into(),
        ));
    }
    let grids = layer_grids(featnet, x, &layers)?;
    let candidates = admissible_sources(featnet, &layers, geom, config.patch_radius)?;
    correspondence_from_grids(&grids, &candidates, geom, config.patch_radius)
}

/// The prediction-size crop the guidance term compares against: half the
/// image, centered, mirroring the encoder's geometry.
fn guidance_size_for(geom: HoleGeometry) -> usize {
    geom.image_size / 2
}

/// The three energy components and their weighted, normalized sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub patch: f64,
    pub guide: f64,
    pub tv: f64,
    pub total: f64,
}

struct EnergyVars {
    total: Var,
    patch: f64,
    guide: f64,
    tv: f64,
}

/// Build the energy on a tape. `x` may be a variable (for gradients) or a
/// constant (for evaluation only).
fn build_energy(
    tape: &mut Tape,
    x: Var,
    psi: &CorrespondenceField,
    guidance: &Tensor,
    featnet: &FeatureNetParams,
    config: &RefineConfig,
    layers: &[String],
    geom: HoleGeometry,
) -> Result<EnergyVars> {
    let fnv = featnet.bind(tape);
    let radius = config.patch_radius;

    // Patch term over the full-image feature maps.
    let y_maps = featnet_forward(tape, &fnv, x, layers)?;
    let pixels = geom.hole_pixels();
    let mut patch_terms: Option<Var> = None;
    let mut patch_count = 0usize;
    for name in layers {
        let stride = featnet.config.tap_stride(name)?;
        let map = y_maps[name];
        let c = tape.value(map).shape()[2];
        let pairs: Vec<(GridPoint, GridPoint)> = pixels
            .iter()
            .zip(&psi.sources)
            .map(|(&p, &q)| {
                (
                    (p.0 / stride, p.1 / stride),
                    (q.0 / stride, q.1 / stride),
                )
            })
            .collect();
        patch_count += pairs.len() * (2 * radius + 1).pow(2) * c;
        let term = tape.patch_ssd(map, &pairs, radius)?;
        patch_terms = Some(match patch_terms {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let patch_raw = patch_terms.expect("at least one layer");
    let patch_scaled = tape.scale(patch_raw, config.alpha / patch_count.max(1) as f64);

    // Guidance term on the central crop.
    let gsize = guidance.shape()[0];
    let off = (geom.image_size - gsize) / 2;
    let center = tape.crop(x, off, off, gsize, gsize)?;
    let c_maps = featnet_forward(tape, &fnv, center, layers)?;
    let g_feats = featnet_features(featnet, guidance, layers)?;
    let mut guide_terms: Option<Var> = None;
    for name in layers {
        let term = feature_loss_to_map(tape, c_maps[name], &g_feats[name], true)?;
        guide_terms = Some(match guide_terms {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let guide_raw = guide_terms.expect("at least one layer");
    let guide_scaled = tape.scale(guide_raw, config.alpha_prime);

    // Total variation over the full image, normalized by its term count.
    let shape = tape.value(x).shape().to_vec();
    let tv_raw = tape.total_variation(x)?;
    let tv_count = total_variation_terms(shape[0], shape[1], shape[2]);
    let tv_scaled = tape.scale(tv_raw, config.beta / tv_count.max(1) as f64);

    let a = tape.add(patch_scaled, guide_scaled)?;
    let total = tape.add(a, tv_scaled)?;
    Ok(EnergyVars {
        total,
        patch: tape.value(patch_scaled).scalar_value()?,
        guide: tape.value(guide_scaled).scalar_value()?,
        tv: tape.value(tv_scaled).scalar_value()?,
    })
}

/// Build the refinement energy of an image variable on a tape, using the
/// layers usable at this geometry; returns the total for backward passes.
pub fn energy_on_tape(
    tape: &mut Tape,
    x: Var,
    psi: &CorrespondenceField,
    guidance: &Tensor,
    featnet: &FeatureNetParams,
    config: &RefineConfig,
    geom: HoleGeometry,
) -> Result<Var> {
    let layers = effective_layers(
        featnet,
        &config.layers,
        geom,
        guidance.shape()[0],
        config.patch_radius,
    )?;
    if layers.is_empty() {
        return Err(Error::Data("no usable feature layer at this scale".into()));
    }
    let ev = build_energy(tape, x, psi, guidance, featnet, config, &layers, geom)?;
    Ok(ev.total)
}

/// Evaluate the refinement energy of a complete image under a fixed
/// correspondence field.
pub fn energy(
    x: &Tensor,
    psi: &CorrespondenceField,
    guidance: &Tensor,
    featnet: &FeatureNetParams,
    config: &RefineConfig,
    geom: HoleGeometry,
) -> Result<EnergyBreakdown> {
    let layers = effective_layers(
        featnet,
        &config.layers,
        geom,
        guidance.shape()[0],
        config.patch_radius,
    )?;
    if layers.is_empty() {
        return Err(Error::Data("no usable feature layer at this scale".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ev = build_energy(&mut tape, xv, psi, guidance, featnet, config, &layers, geom)?;
    let total = tape.value(ev.total).scalar_value()?;
    Ok(EnergyBreakdown {
        patch: ev.patch,
        guide: ev.guide,
        tv: ev.tv,
        total,
    })
}

/// Gradient descent with backtracking on the hole pixels of `x`, holding
/// the correspondence field fixed. The energy never increases; pixels
/// outside the hole are bit-identical on return.
pub fn update_image(
    x: &Tensor,
    psi: &CorrespondenceField,
    guidance: &Tensor,
    featnet: &FeatureNetParams,
    config: &RefineConfig,
    geom: HoleGeometry,
) -> Result<(Tensor, EnergyBreakdown)> {
    let layers = effective_layers(
        featnet,
        &config.layers,
        geom,
        guidance.shape()[0],
        config.patch_radius,
    )?;
    if layers.is_empty() {
        return Err(Error::Data("no usable feature layer at this scale".into()));
    }
    let eval = |t: &Tensor| -> Result<EnergyBreakdown> {
        let mut tape = Tape::new();
        let xv = tape.constant(t.clone());
        let ev = build_energy(&mut tape, xv, psi, guidance, featnet, config, &layers, geom)?;
        let total = tape.value(ev.total).scalar_value()?;
        Ok(EnergyBreakdown {
            patch: ev.patch,
            guide: ev.guide,
            tv: ev.tv,
            total,
        })
    };

    let mut current = x.clone();
    let mut current_e = eval(&current)?;
    if !current_e.total.is_finite() {
        return Err(Error::Numeric(format!(
            "refinement energy not finite: {}",
            current_e.total
        )));
    }
    let c = x.shape()[2];
    let w = x.shape()[1];
    // The accepted step carries over and is re-grown each iteration, so the
    // descent adapts to the energy's scale instead of re-halving from the
    // initial step every time.
    let mut step = config.step_size;
    for _ in 0..config.descent_steps {
        // Gradient restricted to hole pixels.
        let mut tape = Tape::new();
        let xv = tape.var(current.clone());
        let ev = build_energy(&mut tape, xv, psi, guidance, featnet, config, &layers, geom)?;
        tape.backward(ev.total)?;
        let mut grad = tape.grad_or_zero(xv);
        {
            let gd = grad.data_mut();
            for y in 0..geom.image_size {
                for xx in 0..geom.image_size {
                    if !geom.in_hole(y, xx) {
                        let base = (y * w + xx) * c;
                        gd[base..base + c].fill(0.0);
                    }
                }
            }
        }
        let gnorm: f64 = grad.data().iter().map(|g| g * g).sum();
        if gnorm == 0.0 {
            break;
        }

        step = (step * 4.0).min(1e9);
        let mut accepted = false;
        for _ in 0..=config.max_backtracks {
            let mut candidate = current.clone();
            for (cv, gv) in candidate.data_mut().iter_mut().zip(grad.data()) {
                *cv = (*cv - step * gv).clamp(0.0, 1.0);
            }
            let cand_e = eval(&candidate)?;
            if cand_e.total.is_finite() && cand_e.total < current_e.total {
                current = candidate;
                current_e = cand_e;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((current, current_e))
}

/// One row of the refinement energy trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineRow {
    pub scale: usize,
    pub iteration: usize,
    pub e_patch: f64,
    pub e_guide: f64,
    pub e_tv: f64,
    pub e_total: f64,
}

/// Energy history of a refinement run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineTrace {
    pub rows: Vec<RefineRow>,
}

impl RefineTrace {
    fn push(&mut self, scale: usize, iteration: usize, e: EnergyBreakdown) {
        self.rows.push(RefineRow {
            scale,
            iteration,
            e_patch: e.patch,
            e_guide: e.guide,
            e_tv: e.tv,
            e_total: e.total,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale,iteration,e_patch,e_guide,e_tv,e_total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.scale, r.iteration, r.e_patch, r.e_guide, r.e_tv, r.e_total
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// 2x2 box downsampling of an h x w x c tensor with even extents.
pub fn downsample2(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot halve odd extents {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    for y in 0..oh {
        for x in 0..ow {
            for cc in 0..c {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += t.data()[((2 * y + dy) * w + 2 * x + dx) * c + cc];
                    }
                }
                out.data_mut()[(y * ow + x) * c + cc] = acc / 4.0;
            }
        }
    }
    Ok(out)
}

fn copy_region(dst: &mut Tensor, src: &Tensor, dst_y0: usize, dst_x0: usize, src_y0: usize, src_x0: usize, side: usize) {
    let (dw, c) = (dst.shape()[1], dst.shape()[2]);
    let sw = src.shape()[1];
    for y in 0..side {
        let d = ((dst_y0 + y) * dw + dst_x0) * c;
        let s = ((src_y0 + y) * sw + src_x0) * c;
        dst.data_mut()[d..d + side * c].copy_from_slice(&src.data()[s..s + side * c]);
    }
}

/// Nearest-neighbor 2x upsampling of a region of `src` into `dst`.
fn upsample_region_into(
    dst: &mut Tensor,
    src: &Tensor,
    dst_y0: usize,
    dst_x0: usize,
    src_y0: usize,
    src_x0: usize,
    src_side: usize,
) {
    let (dw, c) = (dst.shape()[1], dst.shape()[2]);
    let sw = src.shape()[1];
    for y in 0..src_side {
        for x in 0..src_side {
            let s = ((src_y0 + y) * sw + src_x0 + x) * c;
            for dy in 0..2 {
                for dx in 0..2 {
                    let d = ((dst_y0 + 2 * y + dy) * dw + dst_x0 + 2 * x + dx) * c;
                    dst.data_mut()[d..d + c].copy_from_slice(&src.data()[s..s + c]);
                }
            }
        }
    }
}

/// Coarse-to-fine refinement. `masked` is the full image with the hole
/// filled by the masking fill value; `guidance` is the encoder prediction
/// at half the image size. The hole is initialized from the guidance at the
/// coarsest scale, refined by alternating minimization, and upsampled into
/// each finer scale. With zero iterations the result is exactly the
/// guidance pasted into the hole.
pub fn refine_multiscale(
    masked: &Tensor,
    guidance: &Tensor,
    featnet: &FeatureNetParams,
    config: &RefineConfig,
    geom: HoleGeometry,
) -> Result<(Tensor, RefineTrace)> {
    config.validate()?;
    if guidance.rank() != 3
        || guidance.shape()[0] != geom.image_size / 2
        || guidance.shape()[0] != guidance.shape()[1]
        || guidance.shape()[2] != 3
    {
        return Err(Error::Shape(format!(
            "guidance {:?} does not match a {}-pixel image",
            guidance.shape(),
            geom.image_size
        )));
    }
    let mut trace = RefineTrace::default();

    // Paste the guidance's hole region into the hole of the masked image.
    let paste_guidance = |dst: &mut Tensor, g: &Tensor, geo: HoleGeometry| {
        let g_off = (g.shape()[0] - geo.hole_size) / 2;
        copy_region(dst, g, geo.hole_offset, geo.hole_offset, g_off, g_off, geo.hole_size);
    };

    if config.iterations == 0 {
        let mut out = masked.clone();
        paste_guidance(&mut out, guidance, geom);
        return Ok((out, trace));
    }

    let levels = config.scales;
    let factor = 1usize << (levels - 1);
    if geom.hole_offset % factor != 0 || geom.hole_size % factor != 0 || geom.image_size % factor != 0
    {
        return Err(Error::Config(format!(
            "geometry {geom:?} is not divisible across {levels} scales"
        )));
    }

    // Pyramids, index 0 = finest.
    let mut masked_pyr = vec![masked.clone()];
    let mut guide_pyr = vec![guidance.clone()];
    let mut geoms = vec![geom];
    for k in 1..levels {
        masked_pyr.push(downsample2(&masked_pyr[k - 1])?);
        guide_pyr.push(downsample2(&guide_pyr[k - 1])?);
        geoms.push(geoms[k - 1].halved());
    }

    // Coarsest scale starts from the downsampled guidance.
    let coarsest = levels - 1;
    let mut x = masked_pyr[coarsest].clone();
    paste_guidance(&mut x, &guide_pyr[coarsest], geoms[coarsest]);

    for k in (0..levels).rev() {
        if k < coarsest {
            // Carry the refined hole up from the previous scale.
            let mut next = masked_pyr[k].clone();
            let prev_geom = geoms[k + 1];
            upsample_region_into(
                &mut next,
                &x,
                geoms[k].hole_offset,
                geoms[k].hole_offset,
                prev_geom.hole_offset,
                prev_geom.hole_offset,
                prev_geom.hole_size,
            );
            x = next;
        }
        let g = &guide_pyr[k];
        for it in 1..=config.iterations {
            let psi = update_correspondence(&x, featnet, config, geoms[k])?;
            let e = energy(&x, &psi, g, featnet, config, geoms[k])?;
            trace.push(k, it, e);
            let (updated, e_after) = update_image(&x, &psi, g, featnet, config, geoms[k])?;
            x = updated;
            trace.push(k, it, e_after);
        }
    }
    Ok((x, trace))
}

/// Raw squared total variation of an image tensor.
pub fn total_variation(x: &Tensor) -> Result<f64> {
    total_variation_value(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::FeatureNetConfig;
    use crate::tensor::gradcheck::{check_gradients, DEFAULT_H, DEFAULT_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_featnet() -> FeatureNetParams {
        FeatureNetParams::init(
            &FeatureNetConfig {
                block_channels: vec![vec![4], vec![6]],
            },
            23,
        )
    }

    fn rand_img(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[size, size, 3], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn total_variation_examples_and_gradient() {
        assert_eq!(total_variation(&Tensor::filled(&[6, 5, 3], 0.4)).unwrap(), 0.0);
        let t = Tensor::from_vec(&[2, 2, 1], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(total_variation(&t).unwrap(), 2.0);

        let x = rand_img(5, 1);
        let check = check_gradients(
            &[x],
            |tape, vars| tape.total_variation(vars[0]),
            DEFAULT_H,
        )
        .unwrap();
        assert!(check.within(DEFAULT_TOL), "{}", check.max_rel_err);
    }

    #[test]
    fn patch_feature_examples() {
        let map = rand_img(6, 2);
        // Radius 0: the single feature vector at p.
        let v = patch_feature(&map, (2, 3), 0).unwrap();
        assert_eq!(v, vec![map.at3(2, 3, 0), map.at3(2, 3, 1), map.at3(2, 3, 2)]);

        // Constant map: all patches identical.
        let cmap = Tensor::filled(&[6, 6, 2], 0.7);
        let a = patch_feature(&cmap, (1, 1), 1).unwrap();
        let b = patch_feature(&cmap, (4, 4), 1).unwrap();
        assert_eq!(a, b);

        // Loop oracle for a full patch.
        let p = (3usize, 2usize);
        let got = patch_feature(&map, p, 1).unwrap();
        let mut want = Vec::new();
        for y in p.0 - 1..=p.0 + 1 {
            for x in p.1 - 1..=p.1 + 1 {
                for c in 0..3 {
                    want.push(map.at3(y, x, c));
                }
            }
        }
        assert_eq!(got, want);

        assert!(patch_feature(&map, (0, 3), 1).is_err());
    }

    /// Identity-feature grid: the image itself at stride 1.
    fn identity_grid(x: &Tensor) -> Vec<LayerGrid> {
        vec![LayerGrid {
            name: "identity".into(),
            stride: 1,
            map: x.clone(),
        }]
    }

    fn all_outside_sources(geom: HoleGeometry, radius: usize) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for y in 0..geom.image_size {
            for x in 0..geom.image_size {
                if geom.in_hole(y, x)
                    || y < radius
                    || x < radius
                    || y + radius >= geom.image_size
                    || x + radius >= geom.image_size
                {
                    continue;
                }
                let (f0, f1) = hole_footprint(geom, 1);
                if patch_over_footprint((y, x), radius, (f0, f1)) {
                    continue;
                }
                out.push((y, x));
            }
        }
        out
    }

    #[test]
    fn constant_image_matches_first_candidate_at_zero_cost() {
        let geom = HoleGeometry::centered(6, 2).unwrap();
        let x = Tensor::filled(&[6, 6, 3], 0.5);
        let candidates = all_outside_sources(geom, 0);
        let field = correspondence_from_grids(&identity_grid(&x), &candidates, geom, 0).unwrap();
        assert!(field.costs.iter().all(|&c| c == 0.0));
        assert!(field.sources.iter().all(|&q| q == candidates[0]));
    }

    #[test]
    fn two_tone_image_matches_own_tone_and_equals_brute_force() {
        // Left half dark, right half bright; 2x2 hole in the middle.
        let geom = HoleGeometry::centered(6, 2).unwrap();
        let x = Tensor::from_fn(&[6, 6, 3], |i| {
            let col = (i / 3) % 6;
            if col < 3 {
                0.2
            } else {
                0.9
            }
        });
        let candidates = all_outside_sources(geom, 0);
        let field = correspondence_from_grids(&identity_grid(&x), &candidates, geom, 0).unwrap();
        for (i, &(py, px)) in geom.hole_pixels().iter().enumerate() {
            let own = x.at3(py, px, 0);
            let (qy, qx) = field.sources[i];
            assert_eq!(x.at3(qy, qx, 0), own, "hole pixel ({py},{px})");
            assert_eq!(field.costs[i], 0.0);
        }

        // Independent brute force: first minimum over the same candidates.
        for (i, &(py, px)) in geom.hole_pixels().iter().enumerate() {
            let mut best = f64::INFINITY;
            let mut best_q = candidates[0];
            for &q in &candidates {
                let mut cost = 0.0;
                for c in 0..3 {
                    let d = x.at3(py, px, c) - x.at3(q.0, q.1, c);
                    cost += d * d;
                }
                if cost < best {
                    best = cost;
                    best_q = q;
                }
            }
            assert_eq!(field.sources[i], best_q);
            assert_eq!(field.costs[i], best);
        }
    }

    #[test]
    fn correspondence_total_cost_never_increases_for_fixed_image() {
        let featnet = small_featnet();
        let config = RefineConfig {
            layers: vec!["conv1_1".into()],
            scales: 1,
            ..RefineConfig::desk()
        };
        let geom = HoleGeometry::centered(16, 4).unwrap();
        let x = rand_img(16, 3);
        let psi1 = update_correspondence(&x, &featnet, &config, geom).unwrap();
        // Degrade the field by pointing everything at the first source, then
        // re-update: the exact argmin can only improve the total cost.
        let grids = layer_grids(&featnet, &x, &["conv1_1".to_string()]).unwrap();
        let candidates = admissible_sources(&featnet, &["conv1_1".to_string()], geom, 1).unwrap();
        let degraded_cost: f64 = geom
            .hole_pixels()
            .iter()
            .map(|&p| {
                let own = patch_feature(&grids[0].map, (p.0, p.1), 1).unwrap();
                let q = candidates[0];
                let other = patch_feature(&grids[0].map, (q.0, q.1), 1).unwrap();
                own.iter()
                    .zip(&other)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        assert!(psi1.total_cost() <= degraded_cost + 1e-12);
    }

    #[test]
    fn energy_components_sum_and_zero_case() {
        let featnet = small_featnet();
        let config = RefineConfig {
            layers: vec!["conv1_1".into(), "conv2_1".into()],
            ..RefineConfig::desk()
        };
        // Constant image whose guidance is its own center: every term is 0.
        // (The geometry is wide enough that zero-cost matches exist clear of
        // the convolution-padding border cells at both layers.)
        let geom = HoleGeometry::centered(20, 4).unwrap();
        let x = Tensor::filled(&[20, 20, 3], 0.6);
        let guidance = Tensor::filled(&[10, 10, 3], 0.6);
        let psi = update_correspondence(&x, &featnet, &config, geom).unwrap();
        let e = energy(&x, &psi, &guidance, &featnet, &config, geom).unwrap();
        assert_eq!(e.total, 0.0);

        // Random image: components are non-negative and sum to the total.
        let geom = HoleGeometry::centered(16, 4).unwrap();
        let x = rand_img(16, 4);
        let guidance = rand_img(8, 5);
        let psi = update_correspondence(&x, &featnet, &config, geom).unwrap();
        let e = energy(&x, &psi, &guidance, &featnet, &config, geom).unwrap();
        assert!(e.patch >= 0.0 && e.guide >= 0.0 && e.tv >= 0.0);
        assert!((e.total - (e.patch + e.guide + e.tv)).abs() < 1e-12);
        assert!(e.total >= 0.0);
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let featnet = small_featnet();
        let config = RefineConfig {
            layers: vec!["conv1_1".into()],
            ..RefineConfig::desk()
        };
        let geom = HoleGeometry::centered(12, 2).unwrap();
        let x = rand_img(12, 6);
        let guidance = rand_img(6, 7);
        let psi = update_correspondence(&x, &featnet, &config, geom).unwrap();
        let layers = vec!["conv1_1".to_string()];
        let check = check_gradients(
            &[x],
            move |tape, vars| {
                let ev = build_energy(
                    tape, vars[0], &psi, &guidance, &featnet, &config, &layers, geom,
                )?;
                Ok(ev.total)
            },
            DEFAULT_H,
        )
        .unwrap();
        assert!(check.within(DEFAULT_TOL), "{}", check.max_rel_err);
    }

    #[test]
    fn tv_only_descent_smooths_the_hole() {
        // alpha = alpha' = 0, beta > 0: pure TV descent on the hole of a
        // constant image converges toward the constant infill.
        let featnet = small_featnet();
        let config = RefineConfig {
            alpha: 0.0,
            alpha_prime: 0.0,
            beta: 1.0,
            layers: vec!["conv1_1".into()],
            descent_steps: 60,
            ..RefineConfig::desk()
        };
        let geom = HoleGeometry::centered(12, 4).unwrap();
        let mut x = Tensor::filled(&[12, 12, 3], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (y, xx) in geom.hole_pixels() {
            for c in 0..3 {
                let idx = (y * 12 + xx) * 3 + c;
                x.data_mut()[idx] = rng.gen_range(0.0..1.0);
            }
        }
        let guidance = Tensor::filled(&[6, 6, 3], 0.5);
        let psi = update_correspondence(&x, &featnet, &config, geom).unwrap();
        let e0 = energy(&x, &psi, &guidance, &featnet, &config, geom).unwrap();
        let (out, e1) = update_image(&x, &psi, &guidance, &featnet, &config, geom).unwrap();
        assert!(e1.total < e0.total * 0.1, "{} -> {}", e0.total, e1.total);
        // The infill heads toward the surrounding constant.
        for (y, xx) in geom.hole_pixels() {
            for c in 0..3 {
                assert!((out.at3(y, xx, c) - 0.5).abs() < 0.2);
            }
        }
        // Pixels outside the hole are untouched.
        for y in 0..12 {
            for xx in 0..12 {
                if !geom.in_hole(y, xx) {
                    for c in 0..3 {
                        assert_eq!(out.at3(y, xx, c), x.at3(y, xx, c));
                    }
                }
            }
        }
    }

    #[test]
    fn guidance_only_descent_converges_to_guidance() {
        // alpha = beta = 0: the energy is quadratic in the features of the
        // center crop with its minimum where the crop equals the guidance.
        // A positive conv bias keeps every relu active around the operating
        // point, so the feature map is locally injective and descent pulls
        // the perturbed hole back onto the guidance.
        let mut featnet = small_featnet();
        for v in featnet.blocks[0][0].bias.data_mut() {
            *v = 2.0;
        }
        let config = RefineConfig {
            alpha: 0.0,
            alpha_prime: 1.0,
            beta: 0.0,
            layers: vec!["conv1_1".into()],
            descent_steps: 80,
            ..RefineConfig::desk()
        };
        let geom = HoleGeometry::centered(12, 4).unwrap();
        let guidance = rand_img(6, 9);
        // The whole central crop starts equal to the guidance (the ring
        // around the hole is fixed, so the energy can only reach zero when
        // the crop matches the guidance everywhere); then perturb the hole.
        let mut x = rand_img(12, 10);
        let crop_off = (12 - 6) / 2;
        copy_region(&mut x, &guidance, crop_off, crop_off, 0, 0, 6);
        let reference = x.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (y, xx) in geom.hole_pixels() {
            for c in 0..3 {
                let idx = (y * 12 + xx) * 3 + c;
                let v = x.data()[idx] + rng.gen_range(-0.02..0.02);
                x.data_mut()[idx] = v.clamp(0.0, 1.0);
            }
        }
        let psi = update_correspondence(&x, &featnet, &config, geom).unwrap();
        let (out, _) = update_image(&x, &psi, &guidance, &featnet, &config, geom).unwrap();
        // Hole pixels move back toward the guidance values.
        let mut err_before = 0.0;
        let mut err_after = 0.0;
        for (y, xx) in geom.hole_pixels() {
            for c in 0..3 {
                err_before += (x.at3(y, xx, c) - reference.at3(y, xx, c)).abs();
                err_after += (out.at3(y, xx, c) - reference.at3(y, xx, c)).abs();
            }
        }
        assert!(
            err_after < err_before * 0.35,
            "hole error {err_before} -> {err_after}"
        );
    }

    #[test]
    fn multiscale_zero_iterations_pastes_guidance() {
        let featnet = small_featnet();
        let mut config = RefineConfig::desk();
        config.layers = vec!["conv1_1".into(), "conv2_1".into()];
        config.iterations = 0;
        let geom = HoleGeometry::centered(16, 4).unwrap();
        let masked = rand_img(16, 12);
        let guidance = rand_img(8, 13);
        let (out, trace) =
            refine_multiscale(&masked, &guidance, &featnet, &config, geom).unwrap();
        assert!(trace.rows.is_empty());
        let g_off = (8 - 4) / 2;
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let want = if geom.in_hole(y, x) {
                        guidance.at3(y - geom.hole_offset + g_off, x - geom.hole_offset + g_off, c)
                    } else {
                        masked.at3(y, x, c)
                    };
                    assert_eq!(out.at3(y, x, c), want);
                }
            }
        }
    }

    #[test]
    fn multiscale_energy_is_monotone_within_scales_and_preserves_context() {
        let featnet = small_featnet();
        let mut config = RefineConfig::desk();
        config.iterations = 3;
        config.descent_steps = 4;
        let geom = HoleGeometry::centered(16, 4).unwrap();
        let masked = rand_img(16, 14);
        let guidance = rand_img(8, 15);
        let (out, trace) =
            refine_multiscale(&masked, &guidance, &featnet, &config, geom).unwrap();
        // Non-increasing within each scale.
        for k in 0..config.scales {
            let es: Vec<f64> = trace
                .rows
                .iter()
                .filter(|r| r.scale == k)
                .map(|r| r.e_total)
                .collect();
            assert!(!es.is_empty());
            for pair in es.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-12,
                    "scale {k}: energy rose {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
        // Context bit-identical.
        for y in 0..16 {
            for x in 0..16 {
                if !geom.in_hole(y, x) {
                    for c in 0..3 {
                        assert_eq!(out.at3(y, x, c), masked.at3(y, x, c));
                    }
                }
            }
        }
    }

    #[test]
    fn refined_stripes_beat_guidance_alone() {
        // Ground truth: sharp stripes. Guidance: a blurred version of the
        // center. Patch matching against the sharp context should recover
        // more of the structure than the blurry guidance.
        let featnet = small_featnet();
        let config = RefineConfig {
            alpha: 1.0,
            alpha_prime: 0.2,
            beta: 0.002,
            patch_radius: 1,
            layers: vec!["conv1_1".into()],
            scales: 1,
            iterations: 4,
            descent_steps: 12,
            step_size: 0.5,
            max_backtracks: 20,
        };
        let geom = HoleGeometry::centered(16, 4).unwrap();
        let truth = crate::data::stripes(16, 0.0, 4.0, 0.0, [0.95, 0.9, 0.85], [0.1, 0.15, 0.2])
            .to_tensor();

        // Blur the center crop with a 3x3 box to fake a soft prediction.
        let mut guidance = Tensor::zeros(&[8, 8, 3]);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let sy = (y as i32 + dy + 4).clamp(0, 15) as usize;
                            let sx = (x as i32 + dx + 4).clamp(0, 15) as usize;
                            acc += truth.at3(sy, sx, c);
                            n += 1.0;
                        }
                    }
                    guidance.data_mut()[(y * 8 + x) * 3 + c] = acc / n;
                }
            }
        }
        let mut masked = truth.clone();
        for (y, x) in geom.hole_pixels() {
            for c in 0..3 {
                masked.data_mut()[(y * 16 + x) * 3 + c] = 0.5;
            }
        }
        let (refined, _) =
            refine_multiscale(&masked, &guidance, &featnet, &config, geom).unwrap();

        let hole_l1 = |img: &Tensor| -> f64 {
            geom.hole_pixels()
                .iter()
                .map(|&(y, x)| {
                    (0..3)
                        .map(|c| (img.at3(y, x, c) - truth.at3(y, x, c)).abs())
                        .sum::<f64>()
                })
                .sum()
        };
        // Guidance alone: paste the blurred center.
        let mut pasted = masked.clone();
        copy_region(&mut pasted, &guidance, geom.hole_offset, geom.hole_offset, 2, 2, 4);
        let (g_err, r_err) = (hole_l1(&pasted), hole_l1(&refined));
        assert!(
            r_err < g_err,
            "refined {r_err} not better than guidance {g_err}"
        );
    }

    #[test]
    fn no_admissible_source_is_an_error() {
        let featnet = small_featnet();
        let config = RefineConfig {
            layers: vec!["conv1_1".into()],
            patch_radius: 3,
            ..RefineConfig::desk()
        };
        // 8x8 image with a 4x4 hole: radius-3 patches cannot avoid it.
        let geom = HoleGeometry::centered(8, 4).unwrap();
        let x = rand_img(8, 20);
        let err = update_correspondence(&x, &featnet, &config, geom).unwrap_err();
        assert!(err.to_string().contains("no feature layer"), "{err}");
    }
}
