//! Checkpoint persistence.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic    "SINP" (4 bytes)
//! version  u16 (currently 1)
//! kind     u8: 0 = training checkpoint, 1 = feature-net weights only
//! ...kind-specific config block, extents as u32...
//! ...tensor blocks: rank u8, extents u32 x rank, values f64 x numel...
//! ...optimizer state (kind 0 only)...
//! epoch    u32
//! ```
//!
//! Every f64 is stored verbatim, so save followed by load is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::nets::{
    CeConfig, CeParams, DiscConfig, DiscParams, FeatureNetConfig, FeatureNetParams,
};
use crate::tensor::adam::AdamState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SINP";
const VERSION: u16 = 1;
const KIND_TRAINING: u8 = 0;
const KIND_FEATNET: u8 = 1;

/// Optimizer and schedule position stored alongside the weights so training
/// can resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub ce_adam: AdamState,
    pub disc_adam: Option<AdamState>,
    /// 1 while the structural phase runs, 2 during adversarial training.
    pub phase: u8,
    /// Completed optimization steps.
    pub step: u64,
}

/// Everything a training run persists.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub ce: CeParams,
    pub featnet: FeatureNetParams,
    pub disc: Option<DiscParams>,
    pub train: Option<TrainState>,
    pub epoch: u32,
}

impl Checkpoint {
    /// Reject a checkpoint whose encoder geometry differs from `expected`.
    pub fn expect_ce_config(&self, expected: &CeConfig) -> Result<()> {
        if &self.ce.config != expected {
            return Err(Error::Shape(format!(
                "checkpoint geometry {:?} does not match expected {:?}",
                self.ce.config, expected
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer::new(KIND_TRAINING);
    write_ce_config(&mut w, &ckpt.ce.config);
    write_featnet_config(&mut w, &ckpt.featnet.config);
    for m in ckpt.featnet.channel_mean {
        w.f64(m);
    }
    match &ckpt.disc {
        Some(d) => {
            w.u8(1);
            w.u32(d.config.input_size as u32);
            w.u32(d.config.channels.len() as u32);
            for &c in &d.config.channels {
                w.u32(c as u32);
            }
        }
        None => w.u8(0),
    }
    for t in ckpt.ce.tensors() {
        w.tensor(t);
    }
    for t in ckpt.featnet.tensors() {
        w.tensor(t);
    }
    if let Some(d) = &ckpt.disc {
        for t in d.tensors() {
            w.tensor(t);
        }
    }
    match &ckpt.train {
        Some(ts) => {
            w.u8(1);
            w.adam(&ts.ce_adam);
            match &ts.disc_adam {
                Some(a) => {
                    w.u8(1);
                    w.adam(a);
                }
                None => w.u8(0),
            }
            w.u8(ts.phase);
            w.u64(ts.step);
        }
        None => w.u8(0),
    }
    w.u32(ckpt.epoch);
    fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.expect_header(KIND_TRAINING)?;
    let ce_config = read_ce_config(&mut r)?;
    let fn_config = read_featnet_config(&mut r)?;
    let mut channel_mean = [0.0; 3];
    for m in &mut channel_mean {
        *m = r.f64()?;
    }
    let disc_config = if r.u8()? == 1 {
        let input_size = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut channels = Vec::with_capacity(n);
        for _ in 0..n {
            channels.push(r.u32()? as usize);
        }
        Some(DiscConfig {
            input_size,
            channels,
        })
    } else {
        None
    };

    let mut ce = CeParams::zeros(&ce_config)?;
    for t in ce.tensors_mut() {
        *t = r.tensor_like(t)?;
    }
    let mut featnet = FeatureNetParams::init(&fn_config, 0);
    featnet.channel_mean = channel_mean;
    for t in featnet.tensors_mut() {
        *t = r.tensor_like(t)?;
    }
    let disc = match &disc_config {
        Some(cfg) => {
            let mut d = DiscParams::zeros(cfg)?;
            for t in d.tensors_mut() {
                *t = r.tensor_like(t)?;
            }
            Some(d)
        }
        None => None,
    };

    let train = if r.u8()? == 1 {
        let ce_adam = r.adam(&ce.tensors())?;
        let disc_adam = if r.u8()? == 1 {
            let d = disc.as_ref().ok_or_else(|| {
                CheckpointError::Malformed("discriminator optimizer without discriminator".into())
            })?;
            Some(r.adam(&d.tensors())?)
        } else {
            None
        };
        let phase = r.u8()?;
        let step = r.u64()?;
        Some(TrainState {
            ce_adam,
            disc_adam,
            phase,
            step,
        })
    } else {
        None
    };
    let epoch = r.u32()?;
    Ok(Checkpoint {
        ce,
        featnet,
        disc,
        train,
        epoch,
    })
}

/// Persist feature-net weights alone, for reuse as a fixed feature extractor.
pub fn save_featnet(path: &Path, params: &FeatureNetParams) -> Result<()> {
    let mut w = Writer::new(KIND_FEATNET);
    write_featnet_config(&mut w, &params.config);
    for m in params.channel_mean {
        w.f64(m);
    }
    for t in params.tensors() {
        w.tensor(t);
    }
    w.u32(0);
    fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_featnet(path: &Path) -> Result<FeatureNetParams> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.expect_header(KIND_FEATNET)?;
    let config = read_featnet_config(&mut r)?;
    let mut params = FeatureNetParams::init(&config, 0);
    for m in &mut params.channel_mean {
        *m = r.f64()?;
    }
    for t in params.tensors_mut() {
        *t = r.tensor_like(t)?;
    }
    let _epoch = r.u32()?;
    Ok(params)
}

fn write_ce_config(w: &mut Writer, cfg: &CeConfig) {
    w.u32(cfg.input_size as u32);
    w.u32(cfg.hole_size as u32);
    w.u32(cfg.prediction_size as u32);
    w.u32(cfg.encoder_channels.len() as u32);
    for &c in &cfg.encoder_channels {
        w.u32(c as u32);
    }
    w.u32(cfg.bottleneck as u32);
    w.u32(cfg.decoder_channels.len() as u32);
    for &c in &cfg.decoder_channels {
        w.u32(c as u32);
    }
}

fn read_ce_config(r: &mut Reader) -> Result<CeConfig> {
    let input_size = r.u32()? as usize;
    let hole_size = r.u32()? as usize;
    let prediction_size = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut encoder_channels = Vec::with_capacity(n);
    for _ in 0..n {
        encoder_channels.push(r.u32()? as usize);
    }
    let bottleneck = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut decoder_channels = Vec::with_capacity(n);
    for _ in 0..n {
        decoder_channels.push(r.u32()? as usize);
    }
    let cfg = CeConfig {
        input_size,
        hole_size,
        prediction_size,
        encoder_channels,
        bottleneck,
        decoder_channels,
    };
    cfg.validate()
        .map_err(|e| CheckpointError::Malformed(format!("stored config invalid: {e}")))?;
    Ok(cfg)
}

fn write_featnet_config(w: &mut Writer, cfg: &FeatureNetConfig) {
    w.u32(cfg.block_channels.len() as u32);
    for block in &cfg.block_channels {
        w.u32(block.len() as u32);
        for &c in block {
            w.u32(c as u32);
        }
    }
}

fn read_featnet_config(r: &mut Reader) -> Result<FeatureNetConfig> {
    let nb = r.u32()? as usize;
    if nb == 0 || nb > 16 {
        return Err(CheckpointError::Malformed(format!("{nb} feature blocks")).into());
    }
    let mut block_channels = Vec::with_capacity(nb);
    for _ in 0..nb {
        let n = r.u32()? as usize;
        if n == 0 || n > 16 {
            return Err(CheckpointError::Malformed(format!("{n} convs in a block")).into());
        }
        let mut chans = Vec::with_capacity(n);
        for _ in 0..n {
            chans.push(r.u32()? as usize);
        }
        block_channels.push(chans);
    }
    Ok(FeatureNetConfig { block_channels })
}

// ---- raw encoding ----------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: u8) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u16(VERSION);
        w.u8(kind);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.rank() as u8);
        for &e in t.shape() {
            self.u32(e as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    fn adam(&mut self, a: &AdamState) {
        self.f64(a.lr);
        self.f64(a.beta1);
        self.f64(a.beta2);
        self.f64(a.eps);
        self.u64(a.step);
        self.u32(a.first_moment.len() as u32);
        for t in &a.first_moment {
            self.tensor(t);
        }
        for t in &a.second_moment {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.offset,
                needed: self.offset + n - self.bytes.len(),
            }
            .into());
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn expect_header(&mut self, kind: u8) -> Result<()> {
        let magic = self.take(4)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = self.u16()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let k = self.u8()?;
        if k != kind {
            return Err(CheckpointError::Malformed(format!(
                "checkpoint kind {k} where {kind} expected"
            ))
            .into());
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Read a tensor that must match the shape of `like`.
    fn tensor_like(&mut self, like: &Tensor) -> Result<Tensor> {
        let t = self.tensor()?;
        if t.shape() != like.shape() {
            return Err(Error::Shape(format!(
                "stored tensor shape {:?} does not match expected {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        if rank > 4 {
            return Err(CheckpointError::Malformed(format!("tensor rank {rank}")).into());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        // Guard against absurd sizes from corrupt headers before allocating.
        if n > (1 << 31) {
            return Err(CheckpointError::Malformed(format!("tensor with {n} elements")).into());
        }
        let raw = self.take(8 * n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(&shape, data).unwrap())
    }

    fn adam(&mut self, params: &[&Tensor]) -> Result<AdamState> {
        let lr = self.f64()?;
        let beta1 = self.f64()?;
        let beta2 = self.f64()?;
        let eps = self.f64()?;
        let step = self.u64()?;
        let n = self.u32()? as usize;
        if n != params.len() {
            return Err(CheckpointError::Malformed(format!(
                "optimizer tracks {n} tensors, model has {}",
                params.len()
            ))
            .into());
        }
        let mut first_moment = Vec::with_capacity(n);
        for p in params {
            first_moment.push(self.tensor_like(p)?);
        }
        let mut second_moment = Vec::with_capacity(n);
        for p in params {
            second_moment.push(self.tensor_like(p)?);
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step,
            first_moment,
            second_moment,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CheckpointError;

    fn sample_checkpoint() -> Checkpoint {
        let ce = CeParams::init(&CeConfig::desk(), 21).unwrap();
        let featnet = FeatureNetParams::init(&FeatureNetConfig::desk(), 22);
        let disc = DiscParams::init(&DiscConfig::desk(), 23).unwrap();
        let ce_adam = AdamState::new(&ce.tensors(), 2e-4);
        let disc_adam = AdamState::new(&disc.tensors(), 2e-5);
        Checkpoint {
            ce,
            featnet,
            disc: Some(disc),
            train: Some(TrainState {
                ce_adam,
                disc_adam: Some(disc_adam),
                phase: 2,
                step: 123,
            }),
            epoch: 7,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sinp");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn roundtrip_without_disc_or_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sinp");
        let mut ckpt = sample_checkpoint();
        ckpt.disc = None;
        ckpt.train = None;
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert!(back.disc.is_none());
    }

    #[test]
    fn truncated_file_reports_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sinp");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() / 2;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::Truncated { .. })) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sinp");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::BadMagic)) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }

        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u16.to_le_bytes());
        bytes.push(KIND_TRAINING);
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { found: 99, .. })) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn desk_checkpoint_rejected_by_paper_expectation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sinp");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let back = load_checkpoint(&path).unwrap();
        back.expect_ce_config(&CeConfig::desk()).unwrap();
        let err = back.expect_ce_config(&CeConfig::paper()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn featnet_only_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.sinp");
        let mut params = FeatureNetParams::init(&FeatureNetConfig::desk(), 5);
        params.channel_mean = [0.41, 0.43, 0.39];
        save_featnet(&path, &params).unwrap();
        let back = load_featnet(&path).unwrap();
        assert_eq!(back, params);
        // A feature-net file is not a training checkpoint.
        assert!(load_checkpoint(&path).is_err());
    }
}
