//! Per-sample representations: deterministic stub encoders standing in for
//! pretrained text/image/caption/contrastive models, plus a JSONL cache for
//! precomputed embeddings.
//!
//! Token id 0 is the reserved pad: its embedding is the zero vector and it
//! is masked out of attention and pooling.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::SequenceTensor;
use crate::error::{Result, SeerError};
use crate::harness::HyperParams;
use crate::numerics::rng::Stream;
use crate::params::xavier;

/// Which harness split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One news sample: token ids for text and caption, raw image-region
/// features, and the authenticity label (1 = real, 0 = fake).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewsItem {
    pub id: String,
    pub text_tokens: Vec<u32>,
    pub caption_tokens: Vec<u32>,
    pub image_regions: Array2<f64>,
    pub label: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub split: Option<Split>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedding_ref: Option<String>,
}

impl NewsItem {
    pub fn validate(&self, hp: &HyperParams) -> Result<()> {
        if self.label > 1 {
            return Err(SeerError::Contract(format!(
                "item {}: label must be 0 or 1, got {}",
                self.id, self.label
            )));
        }
        for (name, tokens, max_len) in [
            ("text", &self.text_tokens, hp.m_len),
            ("caption", &self.caption_tokens, hp.z_len),
        ] {
            if tokens.is_empty() || tokens.iter().all(|t| *t == 0) {
                return Err(SeerError::Contract(format!(
                    "item {}: {name} has no non-pad tokens",
                    self.id
                )));
            }
            if tokens.len() > max_len {
                return Err(SeerError::Contract(format!(
                    "item {}: {name} length {} exceeds configured {}",
                    self.id,
                    tokens.len(),
                    max_len
                )));
            }
            for (position, token) in tokens.iter().enumerate() {
                if *token >= hp.vocab_size {
                    return Err(SeerError::OutOfVocab {
                        item: self.id.clone(),
                        position,
                        token: *token,
                        vocab_size: hp.vocab_size,
                    });
                }
            }
        }
        if self.image_regions.dim() != (hp.n_regions, hp.region_dim) {
            return Err(SeerError::Config(format!(
                "item {}: image regions are {:?}, config expects ({}, {})",
                self.id,
                self.image_regions.dim(),
                hp.n_regions,
                hp.region_dim
            )));
        }
        Ok(())
    }
}

/// The five per-sample representations consumed by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBundle {
    pub text_seq: SequenceTensor,
    pub image_seq: SequenceTensor,
    pub caption_seq: SequenceTensor,
    /// Aligned-space text vector, unit norm, `1 x d_c`.
    pub clip_text: Array2<f64>,
    /// Aligned-space image vector, unit norm, `1 x d_c`.
    pub clip_image: Array2<f64>,
}

/// Deterministic replacement for the pretrained encoders. Token ids map to
/// fixed pseudo-random vectors keyed by `(seed, modality, id)`; image
/// regions pass through a fixed seeded projection; the aligned-space
/// vectors are seeded projections of the mean-pooled sequences, unit
/// normalized.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    hp: HyperParams,
    region_proj: Array2<f64>,
    clip_text_proj: Array2<f64>,
    clip_image_proj: Array2<f64>,
}

impl StubEncoder {
    pub fn new(hp: &HyperParams) -> Result<Self> {
        hp.validate()?;
        let mut region = Stream::with_tag(hp.seed, "stub.region_proj");
        let mut ct = Stream::with_tag(hp.seed, "stub.clip_text_proj");
        let mut ci = Stream::with_tag(hp.seed, "stub.clip_image_proj");
        Ok(Self {
            region_proj: xavier(&mut region, hp.region_dim, hp.d),
            clip_text_proj: xavier(&mut ct, hp.d, hp.d_c),
            clip_image_proj: xavier(&mut ci, hp.d, hp.d_c),
            hp: hp.clone(),
        })
    }

    fn token_row(&self, modality: &str, token: u32) -> Vec<f64> {
        if token == 0 {
            return vec![0.0; self.hp.d];
        }
        let mut s = Stream::with_tag(self.hp.seed, &format!("stub.tok.{modality}.{token}"));
        (0..self.hp.d).map(|_| s.symmetric()).collect()
    }

    fn token_sequence(&self, modality: &str, tokens: &[u32], len: usize) -> SequenceTensor {
        let mut data = Array2::zeros((len, self.hp.d));
        let mut mask = vec![false; len];
        for (i, token) in tokens.iter().enumerate() {
            if *token != 0 {
                let row = self.token_row(modality, *token);
                for (c, v) in row.iter().enumerate() {
                    data[[i, c]] = *v;
                }
                mask[i] = true;
            }
        }
        SequenceTensor::new(data, mask).expect("validated non-empty")
    }

    fn pooled(seq: &SequenceTensor) -> Array2<f64> {
        let mut acc = Array2::zeros((1, seq.dim()));
        let mut count = 0.0;
        for (r, valid) in seq.mask().iter().enumerate() {
            if *valid {
                count += 1.0;
                for c in 0..seq.dim() {
                    acc[[0, c]] += seq.data()[[r, c]];
                }
            }
        }
        acc / count
    }

    fn aligned(&self, seq: &SequenceTensor, proj: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
        let projected = Self::pooled(seq).dot(proj);
        let norm = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(SeerError::Contract(format!(
                "{what}: aligned-space vector has zero norm"
            )));
        }
        Ok(projected / norm)
    }

    /// Encode one item. Pure in `(item, seed, dims)`: identical inputs
    /// produce bit-identical bundles.
    pub fn encode(&self, item: &NewsItem) -> Result<EmbeddingBundle> {
        item.validate(&self.hp)?;
        let text_seq = self.token_sequence("text", &item.text_tokens, self.hp.m_len);
        let caption_seq = self.token_sequence("caption", &item.caption_tokens, self.hp.z_len);
        let image_data = item.image_regions.dot(&self.region_proj);
        let image_seq = SequenceTensor::full(image_data).expect("regions are non-empty");
        let clip_text = self.aligned(&text_seq, &self.clip_text_proj, "text")?;
        let clip_image = self.aligned(&image_seq, &self.clip_image_proj, "image")?;
        Ok(EmbeddingBundle {
            text_seq,
            image_seq,
            caption_seq,
            clip_text,
            clip_image,
        })
    }
}

// ---- embedding cache (JSON Lines) ----

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    id: String,
    text_seq: Vec<Vec<f64>>,
    image_seq: Vec<Vec<f64>>,
    caption_seq: Vec<Vec<f64>>,
    clip_text: Vec<f64>,
    clip_image: Vec<f64>,
}

fn rows_to_vecs(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn vecs_to_array(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(SeerError::Contract(format!("{what}: empty matrix")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(SeerError::Contract(format!("{what}: ragged matrix")));
    }
    let mut a = Array2::zeros((rows.len(), cols));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            a[[i, j]] = *v;
        }
    }
    Ok(a)
}

impl CacheRecord {
    fn from_bundle(id: &str, bundle: &EmbeddingBundle) -> Self {
        Self {
            id: id.to_string(),
            text_seq: rows_to_vecs(bundle.text_seq.data()),
            image_seq: rows_to_vecs(bundle.image_seq.data()),
            caption_seq: rows_to_vecs(bundle.caption_seq.data()),
            clip_text: bundle.clip_text.row(0).to_vec(),
            clip_image: bundle.clip_image.row(0).to_vec(),
        }
    }

    /// Rebuild the bundle. Masks are recovered from the pad convention:
    /// an all-zero row is a padded position.
    fn into_bundle(self, hp: &HyperParams) -> Result<EmbeddingBundle> {
        let check = |what: &str, got: (usize, usize), want: (usize, usize)| -> Result<()> {
            if got != want {
                return Err(SeerError::Config(format!(
                    "cached {what} is {}x{}, config expects {}x{}",
                    got.0, got.1, want.0, want.1
                )));
            }
            Ok(())
        };
        let text = vecs_to_array(&self.text_seq, "text_seq")?;
        check("text_seq", text.dim(), (hp.m_len, hp.d))?;
        let image = vecs_to_array(&self.image_seq, "image_seq")?;
        check("image_seq", image.dim(), (hp.n_regions, hp.d))?;
        let caption = vecs_to_array(&self.caption_seq, "caption_seq")?;
        check("caption_seq", caption.dim(), (hp.z_len, hp.d))?;
        if self.clip_text.len() != hp.d_c || self.clip_image.len() != hp.d_c {
            return Err(SeerError::Config(format!(
                "cached aligned vectors have dims {}/{}, config expects {}",
                self.clip_text.len(),
                self.clip_image.len(),
                hp.d_c
            )));
        }
        let masked = |data: Array2<f64>| -> Result<SequenceTensor> {
            let mask: Vec<bool> = data
                .rows()
                .into_iter()
                .map(|r| r.iter().any(|v| *v != 0.0))
                .collect();
            SequenceTensor::new(data, mask)
        };
        let row = |v: Vec<f64>| Array2::from_shape_vec((1, v.len()), v).expect("row vector");
        Ok(EmbeddingBundle {
            text_seq: masked(text)?,
            image_seq: SequenceTensor::full(image)?,
            caption_seq: masked(caption)?,
            clip_text: row(self.clip_text),
            clip_image: row(self.clip_image),
        })
    }
}

/// Write bundles as one JSON object per line. serde_json prints floats
/// with round-trip-safe precision, so reads recover every bit.
pub fn write_cache(path: &Path, entries: &[(String, EmbeddingBundle)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (id, bundle) in entries {
        let record = CacheRecord::from_bundle(id, bundle);
        let line = serde_json::to_string(&record)
            .map_err(|e| SeerError::Contract(format!("cache serialization: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Load a single bundle by id, validating dims against the configuration.
pub fn load_cached(path: &Path, id: &str, hp: &HyperParams) -> Result<EmbeddingBundle> {
    let reader = BufReader::new(File::open(path)?);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CacheRecord = serde_json::from_str(&line).map_err(|e| SeerError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if record.id == id {
            return record.into_bundle(hp);
        }
    }
    Err(SeerError::NotFound(format!(
        "embedding id {id:?} in cache {}",
        path.display()
    )))
}

/// Load the whole cache keyed by id.
pub fn load_cache_map(
    path: &Path,
    hp: &HyperParams,
) -> Result<std::collections::BTreeMap<String, EmbeddingBundle>> {
    let reader = BufReader::new(File::open(path)?);
    let mut map = std::collections::BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CacheRecord = serde_json::from_str(&line).map_err(|e| SeerError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let id = record.id.clone();
        map.insert(id, record.into_bundle(hp)?);
    }
    Ok(map)
}
