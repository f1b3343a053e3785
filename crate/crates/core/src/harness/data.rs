//! Dataset I/O: JSONL loading/saving, validation, and the train/val/test
//! split.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::encoders::{NewsItem, Split};
use crate::error::{Result, SeerError};
use crate::harness::HyperParams;
use crate::numerics::rng::Stream;

/// Load a JSONL dataset in stored order. Every line must parse and every
/// item must satisfy the domain invariants.
pub fn load_dataset(path: &Path, hp: &HyperParams) -> Result<Vec<NewsItem>> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    let mut region_count: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: NewsItem = serde_json::from_str(&line).map_err(|e| SeerError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        item.validate(hp).map_err(|e| SeerError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let regions = item.image_regions.nrows();
        match region_count {
            None => region_count = Some(regions),
            Some(expected) if expected != regions => {
                return Err(SeerError::Parse {
                    line: lineno + 1,
                    message: format!(
                        "region count {regions} differs from earlier items ({expected})"
                    ),
                });
            }
            _ => {}
        }
        items.push(item);
    }
    Ok(items)
}

pub fn save_dataset(path: &Path, items: &[NewsItem]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| SeerError::Contract(format!("dataset serialization: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Embed every item: through the cache when it carries an `embedding_ref`,
/// through the stub encoder otherwise. Output order matches input order.
pub fn encode_dataset(
    items: &[NewsItem],
    hp: &HyperParams,
    cache: Option<&std::collections::BTreeMap<String, crate::encoders::EmbeddingBundle>>,
) -> Result<Vec<crate::encoders::EmbeddingBundle>> {
    let encoder = crate::encoders::StubEncoder::new(hp)?;
    items
        .iter()
        .map(|item| match (&item.embedding_ref, cache) {
            (Some(key), Some(map)) => map.get(key).cloned().ok_or_else(|| {
                SeerError::NotFound(format!("embedding id {key:?} for item {}", item.id))
            }),
            (Some(key), None) => Err(SeerError::Config(format!(
                "item {} references embedding {key:?} but no cache was supplied",
                item.id
            ))),
            (None, _) => encoder.encode(item),
        })
        .collect()
}

/// Honor per-item `split` fields when present; otherwise shuffle with the
/// configured seed and cut 70/10/20.
pub fn split_dataset(
    items: &[NewsItem],
    hp: &HyperParams,
) -> (Vec<NewsItem>, Vec<NewsItem>, Vec<NewsItem>) {
    if items.iter().any(|i| i.split.is_some()) {
        let pick = |want: Split| {
            items
                .iter()
                .filter(|i| i.split == Some(want))
                .cloned()
                .collect::<Vec<_>>()
        };
        return (pick(Split::Train), pick(Split::Val), pick(Split::Test));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut stream = Stream::with_tag(hp.seed, "split");
    stream.shuffle(&mut order);
    let n = items.len();
    let train_end = (n * 7) / 10;
    let val_end = train_end + n / 10;
    let collect = |range: std::ops::Range<usize>| {
        order[range]
            .iter()
            .map(|i| items[*i].clone())
            .collect::<Vec<_>>()
    };
    (
        collect(0..train_end),
        collect(train_end..val_end),
        collect(val_end..n),
    )
}
