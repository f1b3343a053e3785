//! Synthetic dataset generator with two independent signal knobs.
//!
//! Fake items draw tokens from a "negative lexicon" range and real items
//! from a "positive" range with probability `emotion_strength`; otherwise
//! tokens are neutral. Real items additionally receive image regions
//! correlated with their text-token statistics in proportion to
//! `alignment_strength`, while fake items get a random direction instead,
//! so only the text-image correlation separates the classes.

use std::ops::Range;

use ndarray::Array2;

use crate::encoders::NewsItem;
use crate::error::{Result, SeerError};
use crate::harness::HyperParams;
use crate::numerics::rng::Stream;

/// Token ids treated as negative-tone vocabulary.
pub fn negative_range(vocab_size: u32) -> Range<u32> {
    let quarter = (vocab_size - 1) / 4;
    1..1 + quarter
}

/// Token ids treated as positive-tone vocabulary.
pub fn positive_range(vocab_size: u32) -> Range<u32> {
    let quarter = (vocab_size - 1) / 4;
    1 + quarter..1 + 2 * quarter
}

fn neutral_range(vocab_size: u32) -> Range<u32> {
    let quarter = (vocab_size - 1) / 4;
    1 + 2 * quarter..vocab_size
}

fn draw(stream: &mut Stream, range: &Range<u32>) -> u32 {
    range.start + stream.below(u64::from(range.end - range.start)) as u32
}

/// Unit-normalized region-space signal of a token multiset. Exposed so
/// tests can verify the alignment construction.
pub fn text_signal(tokens: &[u32], region_dim: usize, seed: u64) -> Vec<f64> {
    let mut acc = vec![0.0; region_dim];
    for token in tokens {
        let mut s = Stream::with_tag(seed, &format!("synth.region_sig.{token}"));
        for a in acc.iter_mut() {
            *a += s.range(-1.0, 1.0);
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    acc.iter().map(|v| v / norm).collect()
}

/// Generate `n` balanced items (even indices real, odd fake),
/// deterministic in `seed`.
pub fn make_synthetic(
    n: usize,
    emotion_strength: f64,
    alignment_strength: f64,
    seed: u64,
    hp: &HyperParams,
) -> Result<Vec<NewsItem>> {
    if n < 2 {
        return Err(SeerError::Contract(format!(
            "synthetic dataset needs at least 2 items, got {n}"
        )));
    }
    for (name, v) in [
        ("emotion_strength", emotion_strength),
        ("alignment_strength", alignment_strength),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(SeerError::Config(format!(
                "{name} must be in [0, 1], got {v}"
            )));
        }
    }
    if hp.vocab_size < 16 {
        return Err(SeerError::Config(format!(
            "vocab_size {} is too small for the three lexicon ranges",
            hp.vocab_size
        )));
    }

    let neg = negative_range(hp.vocab_size);
    let pos = positive_range(hp.vocab_size);
    let neutral = neutral_range(hp.vocab_size);

    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let real = i % 2 == 0;
        let mut s = Stream::with_tag(seed, &format!("synth.item{i}"));

        let tokens = |max_len: usize, s: &mut Stream| -> Vec<u32> {
            let min_len = (max_len / 2).max(1);
            let len = min_len + s.below((max_len - min_len + 1) as u64) as usize;
            (0..len)
                .map(|_| {
                    if s.chance(emotion_strength) {
                        draw(s, if real { &pos } else { &neg })
                    } else {
                        draw(s, &neutral)
                    }
                })
                .collect()
        };
        let text_tokens = tokens(hp.m_len, &mut s);
        let caption_tokens = tokens(hp.z_len, &mut s);

        // image: unit direction (text-derived for real, random for fake)
        // blended against per-region noise
        let direction = if real {
            text_signal(&text_tokens, hp.region_dim, seed)
        } else {
            let raw: Vec<f64> = (0..hp.region_dim).map(|_| s.range(-1.0, 1.0)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| v / norm).collect()
        };
        let image_regions = Array2::from_shape_fn((hp.n_regions, hp.region_dim), |(_, c)| {
            alignment_strength * direction[c] + (1.0 - alignment_strength) * s.range(-1.0, 1.0)
        });

        items.push(NewsItem {
            id: format!("synth-{i}"),
            text_tokens,
            caption_tokens,
            image_regions,
            label: u8::from(real),
            split: None,
            embedding_ref: None,
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp() -> HyperParams {
        HyperParams::default()
    }

    #[test]
    fn balanced_label_counts() {
        let items = make_synthetic(100, 0.5, 0.5, 1, &hp()).unwrap();
        let real = items.iter().filter(|i| i.label == 1).count();
        assert_eq!(real, 50);
        assert_eq!(items.len(), 100);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_synthetic(20, 0.7, 0.3, 9, &hp()).unwrap();
        let b = make_synthetic(20, 0.7, 0.3, 9, &hp()).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic(20, 0.7, 0.3, 10, &hp()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn items_validate_against_config() {
        let h = hp();
        for item in make_synthetic(50, 0.9, 0.9, 2, &h).unwrap() {
            item.validate(&h).unwrap();
        }
    }

    #[test]
    fn full_emotion_strength_is_lexicon_separable() {
        // brute-force lexicon counter: count negative-range tokens over
        // text and caption, call fake when they reach half
        let h = hp();
        let items = make_synthetic(200, 1.0, 0.0, 3, &h).unwrap();
        let neg = negative_range(h.vocab_size);
        let mut correct = 0;
        for item in &items {
            let all: Vec<u32> = item
                .text_tokens
                .iter()
                .chain(item.caption_tokens.iter())
                .copied()
                .collect();
            let negatives = all.iter().filter(|t| neg.contains(t)).count();
            let pred_fake = negatives * 2 >= all.len();
            if pred_fake == (item.label == 0) {
                correct += 1;
            }
        }
        assert!(correct as f64 / items.len() as f64 >= 0.99);
    }

    #[test]
    fn zero_strength_means_neutral_tokens() {
        let h = hp();
        let items = make_synthetic(60, 0.0, 0.0, 4, &h).unwrap();
        let neg = negative_range(h.vocab_size);
        let pos = positive_range(h.vocab_size);
        for item in &items {
            for t in item.text_tokens.iter().chain(item.caption_tokens.iter()) {
                assert!(!neg.contains(t) && !pos.contains(t));
            }
        }
    }

    #[test]
    fn full_alignment_pins_real_regions_to_the_text_signal() {
        let h = hp();
        let items = make_synthetic(10, 0.5, 1.0, 5, &h).unwrap();
        for item in items.iter().filter(|i| i.label == 1) {
            let signal = text_signal(&item.text_tokens, h.region_dim, 5);
            for r in 0..h.n_regions {
                for c in 0..h.region_dim {
                    assert!((item.image_regions[[r, c]] - signal[c]).abs() < 1e-12);
                }
            }
        }
        // fake rows are also a unit direction, but not the text signal
        let fake = items.iter().find(|i| i.label == 0).unwrap();
        let signal = text_signal(&fake.text_tokens, h.region_dim, 5);
        let row: Vec<f64> = (0..h.region_dim)
            .map(|c| fake.image_regions[[0, c]])
            .collect();
        assert!(row.iter().zip(&signal).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn tiny_n_is_rejected() {
        assert!(make_synthetic(1, 0.5, 0.5, 1, &hp()).is_err());
    }
}
