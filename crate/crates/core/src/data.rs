//! Image ingestion, geometric preprocessing, center masking, and synthetic
//! structured images for desk-scale training.
//!
//! Images are RGB with values in [0,1], clamped on load and on write. File
//! formats: PNG (8-bit RGB) and binary PPM (P6). A dataset manifest is a
//! UTF-8 text file of newline-separated relative paths.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB image with real values in [0,1], stored row-major h x w x 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize) -> Self {
        ImageRgb {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    /// Build from raw values, clamping each into [0,1].
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer of {} values cannot be {height}x{width}x3",
                data.len()
            )));
        }
        Ok(ImageRgb {
            height,
            width,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = ImageRgb::new(height, width);
        for i in 0..height * width {
            for c in 0..3 {
                img.data[i * 3 + c] = rgb[c].clamp(0.0, 1.0);
            }
        }
        img
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v.clamp(0.0, 1.0);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.height, self.width, 3], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 || t.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "tensor {:?} is not an h x w x 3 image",
                t.shape()
            )));
        }
        ImageRgb::from_vec(t.shape()[0], t.shape()[1], t.data().to_vec())
    }

    /// Copy of the square region at (y0, x0) with the given side.
    pub fn crop(&self, y0: usize, x0: usize, side: usize) -> Result<ImageRgb> {
        if y0 + side > self.height || x0 + side > self.width {
            return Err(Error::Shape(format!(
                "crop {side}x{side}+{y0}+{x0} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = ImageRgb::new(side, side);
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    out.set(y, x, c, self.get(y0 + y, x0 + x, c));
                }
            }
        }
        Ok(out)
    }

    /// Mean per channel over all pixels.
    pub fn channel_mean(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for i in 0..self.height * self.width {
            for c in 0..3 {
                sums[c] += self.data[i * 3 + c];
            }
        }
        let n = (self.height * self.width) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }
}

// ---- file IO ---------------------------------------------------------------

/// Decode a PNG or binary PPM image, by content sniffing.
pub fn load_image(path: &Path) -> Result<ImageRgb> {
    let bytes = std::fs::read(path)?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageRgb> {
    if bytes.starts_with(b"P6") {
        return decode_ppm(bytes);
    }
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Format {
                offset: 0,
                message: format!("png: {e}"),
            })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        return ImageRgb::from_vec(h, w, data);
    }
    Err(Error::Format {
        offset: 0,
        message: "not a PNG or binary PPM file".into(),
    })
}

/// Write PNG or PPM depending on the file extension (default PNG).
pub fn write_image(path: &Path, img: &ImageRgb) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => encode_ppm(img),
        _ => encode_png(img)?,
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_png(img: &ImageRgb) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer size matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format {
            offset: 0,
            message: format!("png encode: {e}"),
        })?;
    Ok(out.into_inner())
}

pub fn encode_ppm(img: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    let mut pos = 2; // past "P6"
    let mut read_token = |what: &str| -> Result<usize> {
        // Skip whitespace and '#' comment lines.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => {
                    return Err(Error::Format {
                        offset: pos,
                        message: format!("unexpected end of header looking for {what}"),
                    })
                }
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                message: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format {
                offset: start,
                message: format!("bad {what}"),
            })
    };
    let width = read_token("width")?;
    let height = read_token("height")?;
    let maxval = read_token("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            offset: pos,
            message: format!("unsupported maxval {maxval}"),
        });
    }
    // Single whitespace byte after maxval.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Format {
                offset: pos,
                message: "missing separator after maxval".into(),
            })
        }
    }
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!(
                "pixel data truncated: need {need} bytes, have {}",
                bytes.len() - pos
            ),
        });
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    ImageRgb::from_vec(height, width, data)
}

// ---- geometry --------------------------------------------------------------

/// Bilinear resize so the smaller dimension equals `target`, preserving the
/// aspect ratio.
pub fn resize_smaller_dim(img: &ImageRgb, target: usize) -> Result<ImageRgb> {
    if target == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    let (h, w) = (img.height, img.width);
    let scale = target as f64 / h.min(w) as f64;
    let (nh, nw) = if h <= w {
        (target, ((w as f64 * scale).round() as usize).max(target))
    } else {
        (((h as f64 * scale).round() as usize).max(target), target)
    };
    let mut out = ImageRgb::new(nh, nw);
    for y in 0..nh {
        for x in 0..nw {
            // Sample source at pixel centers.
            let sy = ((y as f64 + 0.5) * h as f64 / nh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((x as f64 + 0.5) * w as f64 / nw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for c in 0..3 {
                let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
                let bot = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
                out.set(y, x, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

/// Square crop at an offset drawn uniformly over the valid range.
pub fn random_crop(img: &ImageRgb, side: usize, rng: &mut impl RngCore) -> Result<ImageRgb> {
    if side > img.height || side > img.width {
        return Err(Error::Data(format!(
            "cannot crop {side}x{side} from {}x{}",
            img.height, img.width
        )));
    }
    let y0 = rng.gen_range(0..=img.height - side);
    let x0 = rng.gen_range(0..=img.width - side);
    img.crop(y0, x0, side)
}

// ---- masking ---------------------------------------------------------------

/// How the hidden center is filled in the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillMode {
    /// Per-channel mean of the visible context of the same image.
    ContextMean,
    /// Constant mid-gray.
    FixedGray,
}

/// Geometry of the center-masking procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub input_size: usize,
    pub prediction_size: usize,
    pub hole_size: usize,
    pub band_width: usize,
    pub fill_mode: FillMode,
}

impl MaskSpec {
    pub fn new(
        input_size: usize,
        prediction_size: usize,
        hole_size: usize,
        fill_mode: FillMode,
    ) -> Result<Self> {
        if prediction_size * 2 != input_size {
            return Err(Error::Config(format!(
                "prediction {prediction_size} must be half of input {input_size}"
            )));
        }
        if hole_size == 0
            || hole_size >= prediction_size
            || (prediction_size - hole_size) % 2 != 0
        {
            return Err(Error::Config(format!(
                "hole {hole_size} must sit centrally inside prediction {prediction_size}"
            )));
        }
        Ok(MaskSpec {
            input_size,
            prediction_size,
            hole_size,
            band_width: (prediction_size - hole_size) / 2,
            fill_mode,
        })
    }

    pub fn paper(fill_mode: FillMode) -> Self {
        Self::new(128, 64, 56, fill_mode).unwrap()
    }

    pub fn desk(fill_mode: FillMode) -> Self {
        Self::new(32, 16, 12, fill_mode).unwrap()
    }

    /// Top-left corner of the centered hole.
    pub fn hole_offset(&self) -> usize {
        (self.input_size - self.hole_size) / 2
    }

    /// Top-left corner of the centered prediction region.
    pub fn prediction_offset(&self) -> usize {
        (self.input_size - self.prediction_size) / 2
    }

    pub fn in_hole(&self, y: usize, x: usize) -> bool {
        let o = self.hole_offset();
        y >= o && y < o + self.hole_size && x >= o && x < o + self.hole_size
    }

    /// Chebyshev distance from a context pixel to the hole (0 inside).
    pub fn distance_to_hole(&self, y: usize, x: usize) -> usize {
        let o = self.hole_offset();
        let hi = o + self.hole_size - 1;
        let dy = if y < o { o - y } else { y.saturating_sub(hi) };
        let dx = if x < o { o - x } else { x.saturating_sub(hi) };
        dy.max(dx)
    }
}

/// The triple produced by masking: the complete image, its central
/// prediction-size crop, and the masked network input.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub full: ImageRgb,
    pub center: ImageRgb,
    pub masked: ImageRgb,
    pub spec: MaskSpec,
}

/// Hide the central square of `full`, filling it with the context mean (or
/// mid-gray), and extract the prediction-size center crop as the target.
pub fn mask_center(full: &ImageRgb, spec: &MaskSpec) -> Result<ImageSample> {
    let m = spec.input_size;
    if full.height != m || full.width != m {
        return Err(Error::Shape(format!(
            "mask_center expects {m}x{m} input, got {}x{}",
            full.height, full.width
        )));
    }
    let fill = match spec.fill_mode {
        FillMode::FixedGray => [0.5; 3],
        FillMode::ContextMean => {
            let mut sums = [0.0; 3];
            let mut n = 0usize;
            for y in 0..m {
                for x in 0..m {
                    if !spec.in_hole(y, x) {
                        for c in 0..3 {
                            sums[c] += full.get(y, x, c);
                        }
                        n += 1;
                    }
                }
            }
            [sums[0] / n as f64, sums[1] / n as f64, sums[2] / n as f64]
        }
    };
    let mut masked = full.clone();
    let o = spec.hole_offset();
    for y in o..o + spec.hole_size {
        for x in o..o + spec.hole_size {
            for c in 0..3 {
                masked.set(y, x, c, fill[c]);
            }
        }
    }
    let po = spec.prediction_offset();
    let center = full.crop(po, po, spec.prediction_size)?;
    Ok(ImageSample {
        full: full.clone(),
        center,
        masked,
        spec: spec.clone(),
    })
}

/// Check the construction invariants of a sample produced by [`mask_center`]:
/// masked equals full outside the hole, is constant inside it, and center is
/// the exact central crop.
pub fn validate_sample(s: &ImageSample) -> Result<()> {
    let m = s.spec.input_size;
    let mut fill: Option<[f64; 3]> = None;
    for y in 0..m {
        for x in 0..m {
            if s.spec.in_hole(y, x) {
                let v = [s.masked.get(y, x, 0), s.masked.get(y, x, 1), s.masked.get(y, x, 2)];
                match fill {
                    None => fill = Some(v),
                    Some(f) if f == v => {}
                    Some(f) => {
                        return Err(Error::Data(format!(
                            "hole not constant: {v:?} vs {f:?} at ({y},{x})"
                        )))
                    }
                }
            } else {
                for c in 0..3 {
                    if s.masked.get(y, x, c) != s.full.get(y, x, c) {
                        return Err(Error::Data(format!(
                            "masked differs from full outside the hole at ({y},{x})"
                        )));
                    }
                }
            }
        }
    }
    let po = s.spec.prediction_offset();
    let center = s.full.crop(po, po, s.spec.prediction_size)?;
    if center != s.center {
        return Err(Error::Data("center is not the central crop of full".into()));
    }
    Ok(())
}

/// Hide context beyond Chebyshev distance `k` from the hole, replacing it
/// with the sample's hole fill value. Probes how much context the encoder
/// actually uses.
pub fn mask_context_beyond(sample: &ImageSample, k: usize) -> Result<ImageSample> {
    let spec = &sample.spec;
    let max_k = (spec.input_size - spec.hole_size) / 2;
    if k == 0 || k > max_k {
        return Err(Error::Config(format!(
            "context distance {k} out of range 1..={max_k}"
        )));
    }
    let o = spec.hole_offset();
    let fill = [
        sample.masked.get(o, o, 0),
        sample.masked.get(o, o, 1),
        sample.masked.get(o, o, 2),
    ];
    let mut masked = sample.masked.clone();
    for y in 0..spec.input_size {
        for x in 0..spec.input_size {
            if !spec.in_hole(y, x) && spec.distance_to_hole(y, x) > k {
                for c in 0..3 {
                    masked.set(y, x, c, fill[c]);
                }
            }
        }
    }
    Ok(ImageSample {
        full: sample.full.clone(),
        center: sample.center.clone(),
        masked,
        spec: spec.clone(),
    })
}

// ---- synthetic structured images -------------------------------------------

/// Families of texture-free structured images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Stripes,
    Checker,
    Wedge,
    TwoToneJunction,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::Stripes,
        SynthKind::Checker,
        SynthKind::Wedge,
        SynthKind::TwoToneJunction,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "stripes" => Ok(SynthKind::Stripes),
            "checker" => Ok(SynthKind::Checker),
            "wedge" => Ok(SynthKind::Wedge),
            "junction" | "two-tone-junction" => Ok(SynthKind::TwoToneJunction),
            other => Err(Error::Config(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

/// Piecewise-constant image with at most four distinct colors and structure
/// (stripes, corners, junctions) crossing the central region.
pub fn synth_structured(kind: SynthKind, size: usize, rng: &mut impl RngCore) -> ImageRgb {
    let color = |rng: &mut dyn RngCore| -> [f64; 3] {
        [
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ]
    };
    match kind {
        SynthKind::Stripes => {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let period = rng.gen_range(4.0..(size as f64 / 2.0));
            let phase = rng.gen_range(0.0..period);
            let (c1, c2) = (color(rng), color(rng));
            stripes(size, angle, period, phase, c1, c2)
        }
        SynthKind::Checker => {
            let cell = rng.gen_range(2..=(size / 4).max(2));
            let (oy, ox) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
            let (c1, c2) = (color(rng), color(rng));
            let mut img = ImageRgb::new(size, size);
            for y in 0..size {
                for x in 0..size {
                    let parity = ((y + oy) / cell + (x + ox) / cell) % 2;
                    let c = if parity == 0 { c1 } else { c2 };
                    for ch in 0..3 {
                        img.set(y, x, ch, c[ch]);
                    }
                }
            }
            img
        }
        SynthKind::Wedge => {
            // Angular sector of one color over a background, apex near center.
            let cy = size as f64 / 2.0 + rng.gen_range(-2.0..2.0);
            let cx = size as f64 / 2.0 + rng.gen_range(-2.0..2.0);
            let a0 = rng.gen_range(0.0..std::f64::consts::TAU);
            let width = rng.gen_range(0.6..2.2);
            let (bg, fg) = (color(rng), color(rng));
            let mut img = ImageRgb::new(size, size);
            for y in 0..size {
                for x in 0..size {
                    let ang = (y as f64 - cy).atan2(x as f64 - cx);
                    let mut d = (ang - a0).rem_euclid(std::f64::consts::TAU);
                    if d > std::f64::consts::PI {
                        d = std::f64::consts::TAU - d;
                    }
                    let c = if d < width / 2.0 { fg } else { bg };
                    for ch in 0..3 {
                        img.set(y, x, ch, c[ch]);
                    }
                }
            }
            img
        }
        SynthKind::TwoToneJunction => {
            // Two lines through a point near the center: up to four flat
            // regions meeting in a junction inside the future hole.
            let cy = size as f64 / 2.0 + rng.gen_range(-2.0..2.0);
            let cx = size as f64 / 2.0 + rng.gen_range(-2.0..2.0);
            let a1 = rng.gen_range(0.0..std::f64::consts::PI);
            let a2 = rng.gen_range(0.0..std::f64::consts::PI);
            let colors = [color(rng), color(rng), color(rng), color(rng)];
            let mut img = ImageRgb::new(size, size);
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let s1 = (dy * a1.cos() - dx * a1.sin()) >= 0.0;
                    let s2 = (dy * a2.cos() - dx * a2.sin()) >= 0.0;
                    let c = colors[(s1 as usize) * 2 + s2 as usize];
                    for ch in 0..3 {
                        img.set(y, x, ch, c[ch]);
                    }
                }
            }
            img
        }
    }
}

/// Two-tone stripes with an explicit orientation: the stripe coordinate is
/// `y cos(angle) - x sin(angle)`, so angle 0 gives constant rows.
pub fn stripes(
    size: usize,
    angle: f64,
    period: f64,
    phase: f64,
    c1: [f64; 3],
    c2: [f64; 3],
) -> ImageRgb {
    let mut img = ImageRgb::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let s = y as f64 * angle.cos() - x as f64 * angle.sin() + phase;
            let c = if s.rem_euclid(period) < period / 2.0 {
                c1
            } else {
                c2
            };
            for ch in 0..3 {
                img.set(y, x, ch, c[ch]);
            }
        }
    }
    img
}

// ---- datasets ----------------------------------------------------------------

/// A deterministic, indexable source of training images. Fetching index `i`
/// always yields the same image for the same construction.
#[derive(Debug, Clone)]
pub enum Dataset {
    Synthetic {
        kinds: Vec<SynthKind>,
        size: usize,
        count: usize,
        seed: u64,
    },
    /// Files listed in a manifest, resized and center-cropped to `size`.
    Manifest {
        root: PathBuf,
        paths: Vec<String>,
        size: usize,
        resize_to: usize,
    },
}

impl Dataset {
    pub fn synthetic(kinds: Vec<SynthKind>, size: usize, count: usize, seed: u64) -> Result<Self> {
        if kinds.is_empty() || count == 0 {
            return Err(Error::Config("empty synthetic dataset".into()));
        }
        Ok(Dataset::Synthetic {
            kinds,
            size,
            count,
            seed,
        })
    }

    /// Read a manifest of newline-separated relative paths.
    pub fn from_manifest(manifest: &Path, size: usize, resize_to: usize) -> Result<Self> {
        let text = std::fs::read_to_string(manifest)
            .map_err(|e| Error::Data(format!("manifest {}: {e}", manifest.display())))?;
        let paths: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if paths.is_empty() {
            return Err(Error::Data(format!(
                "manifest {} lists no images",
                manifest.display()
            )));
        }
        let root = manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Dataset::Manifest {
            root,
            paths,
            size,
            resize_to,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Synthetic { count, .. } => *count,
            Dataset::Manifest { paths, .. } => paths.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Synthetic samples are pure functions of (seed, index), so target
    /// features may be cached per index.
    pub fn is_deterministic_per_index(&self) -> bool {
        matches!(self, Dataset::Synthetic { .. })
    }

    /// Fetch image `index`. `salt` varies the random crop of manifest images
    /// across epochs; synthetic images ignore it.
    pub fn fetch(&self, index: usize, salt: u64) -> Result<ImageRgb> {
        match self {
            Dataset::Synthetic {
                kinds,
                size,
                count,
                seed,
            } => {
                if index >= *count {
                    return Err(Error::Data(format!("index {index} out of {count}")));
                }
                let mut rng = per_index_rng(*seed, index as u64, 0);
                let kind = kinds[rng.gen_range(0..kinds.len())];
                Ok(synth_structured(kind, *size, &mut rng))
            }
            Dataset::Manifest {
                root,
                paths,
                size,
                resize_to,
            } => {
                let rel = paths
                    .get(index)
                    .ok_or_else(|| Error::Data(format!("index {index} out of {}", paths.len())))?;
                let img = load_image(&root.join(rel))?;
                let resized = resize_smaller_dim(&img, *resize_to)?;
                let mut rng = per_index_rng(0x5eed, index as u64, salt);
                random_crop(&resized, *size, &mut rng)
            }
        }
    }
}

/// Independent RNG stream for (seed, index, salt); keeps every sample a pure
/// function of its coordinates regardless of fetch order or thread count.
pub fn per_index_rng(seed: u64, index: u64, salt: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mixed)
}
