//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MIXNCKPT"
//! version    u32
//! sections   u32      number of table entries
//! table      per section: tag [u8; 4], offset u64, length u64, sha256 [u8; 32]
//! payloads   concatenated section bodies at the recorded offsets
//! ```
//!
//! Sections: `META` (UTF-8 JSON), `LAYR` (Pi-Noise layers), `CLSF` (analytic
//! classifier). Reals are IEEE-754 binary64, little-endian. The full byte
//! layout of each section is in `docs/checkpoint.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::AnalyticClassifier;
use crate::error::{Error, Result};
use crate::eval::SessionReport;
use crate::matrix::Matrix;
use crate::pinoise::{NoiseGenerator, PiNoiseLayer};
use crate::rng::RngCursor;
use crate::trainer::MinModel;

pub const MAGIC: &[u8; 8] = b"MIXNCKPT";
pub const VERSION: u32 = 1;

const TAG_META: [u8; 4] = *b"META";
const TAG_LAYERS: [u8; 4] = *b"LAYR";
const TAG_CLASSIFIER: [u8; 4] = *b"CLSF";
const TABLE_ENTRY: usize = 4 + 8 + 8 + 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub backbone_hash: String,
    pub buffer_hash: String,
    pub stream_hash: String,
    pub sessions_completed: usize,
    pub train_rng: RngCursor,
    pub reports: Vec<SessionReport>,
    /// Resolved config, as written to `config.toml`.
    pub config: String,
}

/// Everything needed to continue a run after session `sessions_completed`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub layers: Vec<PiNoiseLayer<f64>>,
    pub classifier: AnalyticClassifier<f64>,
}

impl Checkpoint {
    pub fn capture(model: &MinModel<f64>, meta: CheckpointMeta) -> Self {
        Self {
            meta,
            layers: model.layers.clone(),
            classifier: model.classifier.clone(),
        }
    }

    /// Installs the learned state into a freshly built model with the same
    /// spec, checking the frozen parts match.
    pub fn restore_into(&self, model: &mut MinModel<f64>) -> Result<()> {
        if model.backbone.content_hash() != self.meta.backbone_hash {
            return Err(Error::Checkpoint(
                "backbone does not match the checkpoint".into(),
            ));
        }
        if model.buffer.content_hash() != self.meta.buffer_hash {
            return Err(Error::Checkpoint(
                "buffer expansion does not match the checkpoint".into(),
            ));
        }
        if self.layers.len() != model.layers.len() {
            return Err(Error::Checkpoint(format!(
                "{} Pi-Noise layers stored, model has {}",
                self.layers.len(),
                model.layers.len()
            )));
        }
        for (stored, fresh) in self.layers.iter().zip(&model.layers) {
            if stored.w_down() != fresh.w_down() || stored.w_up() != fresh.w_up() {
                return Err(Error::Checkpoint(
                    "Pi-Noise projections do not match the checkpoint".into(),
                ));
            }
        }
        if self.classifier.dim() != model.classifier.dim()
            || self.classifier.lambda() != model.classifier.lambda()
        {
            return Err(Error::Checkpoint(
                "classifier shape or lambda does not match".into(),
            ));
        }
        model.layers = self.layers.clone();
        model.classifier = self.classifier.clone();
        model.sessions_completed = self.meta.sessions_completed;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("meta encoding: {e}")))?;
        let sections = [
            (TAG_META, meta),
            (TAG_LAYERS, encode_layers(&self.layers)),
            (TAG_CLASSIFIER, encode_classifier(&self.classifier)),
        ];
        let header = MAGIC.len() + 8 + TABLE_ENTRY * sections.len();
        let mut out =
            Vec::with_capacity(header + sections.iter().map(|s| s.1.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        let mut offset = header as u64;
        for (tag, body) in &sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&Sha256::digest(body));
            offset += body.len() as u64;
        }
        for (_, body) in &sections {
            out.extend_from_slice(body);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut meta = None;
        let mut layers = None;
        let mut classifier = None;
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            let digest = r.take(32)?;
            let body = offset
                .checked_add(len)
                .and_then(|end| bytes.get(offset..end))
                .ok_or_else(|| {
                    Error::Checkpoint(format!(
                        "section {} out of bounds",
                        String::from_utf8_lossy(&tag)
                    ))
                })?;
            if Sha256::digest(body).as_slice() != digest {
                return Err(Error::Checkpoint(format!(
                    "checksum mismatch in section {}",
                    String::from_utf8_lossy(&tag)
                )));
            }
            match tag {
                TAG_META => {
                    meta = Some(
                        serde_json::from_slice::<CheckpointMeta>(body)
                            .map_err(|e| Error::Checkpoint(format!("meta: {e}")))?,
                    )
                }
                TAG_LAYERS => layers = Some(decode_layers(body)?),
                TAG_CLASSIFIER => classifier = Some(decode_classifier(body)?),
                // Unknown sections are skipped so newer writers stay readable.
                _ => {}
            }
        }
        let missing = |name: &str| Error::Checkpoint(format!("missing {name} section"));
        let ckpt = Self {
            meta: meta.ok_or_else(|| missing("META"))?,
            layers: layers.ok_or_else(|| missing("LAYR"))?,
            classifier: classifier.ok_or_else(|| missing("CLSF"))?,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        let t = self.meta.sessions_completed;
        for layer in &self.layers {
            if layer.generators.len() != t || layer.prototypes.len() != t {
                return Err(Error::Checkpoint(format!(
                    "layer {} has {} generators for {t} sessions",
                    layer.layer_index,
                    layer.generators.len()
                )));
            }
            if layer.generators.iter().any(|g| !g.frozen) {
                return Err(Error::Checkpoint(
                    "checkpoint holds an unfrozen generator".into(),
                ));
            }
            if t > 0 && layer.omega.len() != t {
                return Err(Error::Checkpoint(format!(
                    "omega has {} entries for {t} sessions",
                    layer.omega.len()
                )));
            }
        }
        if self.meta.reports.len() != t {
            return Err(Error::Checkpoint(format!(
                "{} reports for {t} sessions",
                self.meta.reports.len()
            )));
        }
        if !self.classifier.weights().is_finite() || !self.classifier.autocorr_inv().is_finite() {
            return Err(Error::Checkpoint("non-finite classifier state".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_reals(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix<f64>) {
    put_u64(out, m.rows());
    put_u64(out, m.cols());
    put_reals(out, m.as_slice());
}

fn encode_layers(layers: &[PiNoiseLayer<f64>]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, layers.len());
    for layer in layers {
        put_u64(&mut out, layer.layer_index);
        put_matrix(&mut out, layer.w_down());
        put_matrix(&mut out, layer.w_up());
        put_u64(&mut out, layer.generators.len());
        for g in &layer.generators {
            put_u64(&mut out, g.task_index);
            out.push(g.frozen as u8);
            put_matrix(&mut out, &g.mu_weight);
            put_u64(&mut out, g.mu_bias.len());
            put_reals(&mut out, &g.mu_bias);
            put_matrix(&mut out, &g.sigma_weight);
            put_u64(&mut out, g.sigma_bias.len());
            put_reals(&mut out, &g.sigma_bias);
        }
        put_u64(&mut out, layer.prototypes.len());
        for p in &layer.prototypes {
            put_u64(&mut out, p.len());
            put_reals(&mut out, p);
        }
        put_u64(&mut out, layer.omega.len());
        put_reals(&mut out, &layer.omega);
    }
    out
}

fn encode_classifier(c: &AnalyticClassifier<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&c.lambda().to_le_bytes());
    put_u64(&mut out, c.classes().len());
    for &k in c.classes() {
        put_u64(&mut out, k);
    }
    put_matrix(&mut out, c.weights());
    put_matrix(&mut out, c.autocorr_inv());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn count(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // Any count must fit in what is left of the buffer.
        if n > (self.bytes.len() - self.at) as u64 {
            return Err(Error::Checkpoint(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    fn real(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.real()).collect()
    }

    fn vector(&mut self) -> Result<Vec<f64>> {
        let n = self.count()?;
        self.reals(n)
    }

    fn matrix(&mut self) -> Result<Matrix<f64>> {
        let rows = self.count()?;
        let cols = self.count()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("matrix size overflow".into()))?;
        Matrix::from_vec(rows, cols, self.reals(n)?)
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn decode_layers(body: &[u8]) -> Result<Vec<PiNoiseLayer<f64>>> {
    let mut r = Reader::new(body);
    let n = r.count()?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let index = r.count()?;
        let w_down = r.matrix()?;
        let w_up = r.matrix()?;
        let (d1, d2) = w_down.shape();
        if w_up.shape() != (d2, d1) {
            return Err(Error::Checkpoint(format!(
                "w_down {:?} and w_up {:?} disagree",
                w_down.shape(),
                w_up.shape()
            )));
        }
        let mut layer = PiNoiseLayer::from_projections(w_down, w_up, index);
        let gens = r.count()?;
        for _ in 0..gens {
            let task_index = r.count()?;
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Checkpoint(format!("bad frozen flag {b}"))),
            };
            let mut g = NoiseGenerator::zeros(d2, task_index);
            g.frozen = frozen;
            g.mu_weight = r.matrix()?;
            g.mu_bias = r.vector()?;
            g.sigma_weight = r.matrix()?;
            g.sigma_bias = r.vector()?;
            if g.mu_weight.shape() != (d2, d2)
                || g.sigma_weight.shape() != (d2, d2)
                || g.mu_bias.len() != d2
                || g.sigma_bias.len() != d2
            {
                return Err(Error::Checkpoint(format!(
                    "generator {task_index} has the wrong shape"
                )));
            }
            layer.generators.push(g);
        }
        let protos = r.count()?;
        for _ in 0..protos {
            let p = r.vector()?;
            if p.len() != d2 {
                return Err(Error::Checkpoint("prototype width mismatch".into()));
            }
            layer.prototypes.push(p);
        }
        layer.omega = r.vector()?;
        layers.push(layer);
    }
    r.finish()?;
    Ok(layers)
}

fn decode_classifier(body: &[u8]) -> Result<AnalyticClassifier<f64>> {
    let mut r = Reader::new(body);
    let lambda = r.real()?;
    let n = r.count()?;
    let classes = (0..n).map(|_| r.count()).collect::<Result<Vec<_>>>()?;
    let weights = r.matrix()?;
    let autocorr_inv = r.matrix()?;
    r.finish()?;
    AnalyticClassifier::from_parts(weights, autocorr_inv, lambda, classes)
        .map_err(|e| Error::Checkpoint(e.to_string()))
}
