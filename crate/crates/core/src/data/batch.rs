use rand::seq::SliceRandom;
use rand::Rng;

use super::stroke::{DatasetRecord, StrokeSequence, StyleImage};
use super::vocab::{Vocab, PAD};
use crate::error::{Error, Result};

/// A preprocessed record with its text already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub strokes: StrokeSequence,
    pub tokens: Vec<u32>,
    pub style: StyleImage,
}

impl TrainingExample {
    pub fn from_record(record: &DatasetRecord, vocab: &Vocab) -> Result<Self> {
        if record.strokes.is_empty() {
            return Err(Error::Data(format!("record {}: no strokes", record.id)));
        }
        Ok(Self {
            id: record.id.clone(),
            strokes: record.strokes.clone(),
            tokens: vocab.tokenize(&record.text)?.ids,
            style: record.style_image.clone(),
        })
    }
}

/// Padded mini-batch. Padded positions are zero in every array and zero in
/// the masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub max_len: usize,
    pub max_text: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// `[size x max_len x 2]`
    pub y0: Vec<f64>,
    /// `[size x max_len]`
    pub d0: Vec<f64>,
    pub stroke_mask: Vec<f64>,
    /// `[size x max_text]`
    pub tokens: Vec<u32>,
    pub token_mask: Vec<f64>,
    /// `[size x height x width]`
    pub style_images: Vec<f64>,
    /// Index of each item in the source slice.
    pub source: Vec<usize>,
}

/// One item of a batch, unpadded strokes but padded tokens.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub y0: &'a [f64],
    pub d0: &'a [f64],
    pub tokens: &'a [u32],
    pub token_mask: &'a [f64],
    pub style: &'a [f64],
}

impl Batch {
    pub fn from_examples(examples: &[&TrainingExample], source: Vec<usize>) -> Result<Self> {
        let size = examples.len();
        if size == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let max_len = examples.iter().map(|e| e.strokes.len()).max().unwrap_or(0);
        let max_text = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let (h, w) = (examples[0].style.height(), examples[0].style.width());
        if examples
            .iter()
            .any(|e| e.style.height() != h || e.style.width() != w)
        {
            return Err(Error::Shape("style images in a batch differ in size".into()));
        }
        let mut b = Batch {
            size,
            max_len,
            max_text,
            image_height: h,
            image_width: w,
            y0: vec![0.0; size * max_len * 2],
            d0: vec![0.0; size * max_len],
            stroke_mask: vec![0.0; size * max_len],
            tokens: vec![PAD; size * max_text],
            token_mask: vec![0.0; size * max_text],
            style_images: Vec::with_capacity(size * h * w),
            source,
        };
        for (i, e) in examples.iter().enumerate() {
            for (j, (o, lift)) in e.strokes.iter().enumerate() {
                b.y0[(i * max_len + j) * 2] = o[0];
                b.y0[(i * max_len + j) * 2 + 1] = o[1];
                b.d0[i * max_len + j] = if lift { 1.0 } else { 0.0 };
                b.stroke_mask[i * max_len + j] = 1.0;
            }
            for (j, &t) in e.tokens.iter().enumerate() {
                b.tokens[i * max_text + j] = t;
                b.token_mask[i * max_text + j] = 1.0;
            }
            b.style_images.extend_from_slice(e.style.pixels());
        }
        Ok(b)
    }

    pub fn length(&self, i: usize) -> usize {
        self.stroke_mask[i * self.max_len..(i + 1) * self.max_len]
            .iter()
            .filter(|&&m| m > 0.0)
            .count()
    }

    pub fn item(&self, i: usize) -> BatchItem<'_> {
        let n = self.length(i);
        let base = i * self.max_len;
        let hw = self.image_height * self.image_width;
        BatchItem {
            y0: &self.y0[base * 2..(base + n) * 2],
            d0: &self.d0[base..base + n],
            tokens: &self.tokens[i * self.max_text..(i + 1) * self.max_text],
            token_mask: &self.token_mask[i * self.max_text..(i + 1) * self.max_text],
            style: &self.style_images[i * hw..(i + 1) * hw],
        }
    }
}

/// Groups examples of similar stroke length into batches. Examples are
/// ordered by length (ties broken randomly), cut into consecutive chunks,
/// and the chunk order is shuffled. Deterministic for a given rng state.
pub fn make_batches<R: Rng + ?Sized>(
    examples: &[TrainingExample],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut keyed: Vec<(usize, u64, usize)> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| (e.strokes.len(), rng.gen::<u64>(), i))
        .collect();
    keyed.sort_unstable();
    let mut chunks: Vec<Vec<usize>> = keyed
        .chunks(batch_size)
        .map(|c| c.iter().map(|k| k.2).collect())
        .collect();
    chunks.shuffle(rng);
    chunks
        .into_iter()
        .map(|idx| {
            let refs: Vec<&TrainingExample> = idx.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs, idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example(id: &str, n: usize, text_len: usize) -> TrainingExample {
        let pts: Vec<(f64, f64, bool)> = (0..n).map(|i| (i as f64 + 1.0, -1.0, i % 4 == 3)).collect();
        TrainingExample {
            id: id.into(),
            strokes: StrokeSequence::from_points(&pts).unwrap(),
            tokens: (0..text_len as u32).map(|t| t + 2).collect(),
            style: StyleImage::blank(2, 3),
        }
    }

    #[test]
    fn single_record_batch() {
        let ex = vec![example("a", 6, 3)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batches(&ex, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].size, 1);
        assert_eq!(b[0].stroke_mask, vec![1.0; 6]);
        assert_eq!(b[0].token_mask, vec![1.0; 3]);
    }

    #[test]
    fn padding_is_masked_and_zero() {
        let ex = vec![example("a", 5, 2), example("b", 9, 4)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = &make_batches(&ex, 2, &mut rng).unwrap()[0];
        assert_eq!(b.max_len, 9);
        let mut sums: Vec<usize> = (0..2).map(|i| b.length(i)).collect();
        sums.sort();
        assert_eq!(sums, vec![5, 9]);
        for i in 0..2 {
            for j in 0..9 {
                if b.stroke_mask[i * 9 + j] == 0.0 {
                    assert_eq!(b.y0[(i * 9 + j) * 2], 0.0);
                    assert_eq!(b.y0[(i * 9 + j) * 2 + 1], 0.0);
                    assert_eq!(b.d0[i * 9 + j], 0.0);
                }
            }
            for j in 0..4 {
                if b.token_mask[i * 4 + j] == 0.0 {
                    assert_eq!(b.tokens[i * 4 + j], PAD);
                }
            }
        }
    }

    #[test]
    fn items_keep_their_pairing() {
        let ex: Vec<TrainingExample> = (0..7).map(|i| example(&i.to_string(), 3 + i, 1 + i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for b in make_batches(&ex, 3, &mut rng).unwrap() {
            for (i, &src) in b.source.iter().enumerate() {
                let item = b.item(i);
                assert_eq!(item.y0, ex[src].strokes.flat_offsets().as_slice());
                let real: Vec<u32> = item
                    .tokens
                    .iter()
                    .zip(item.token_mask)
                    .filter(|(_, m)| **m > 0.0)
                    .map(|(t, _)| *t)
                    .collect();
                assert_eq!(real, ex[src].tokens);
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let ex: Vec<TrainingExample> = (0..20).map(|i| example(&i.to_string(), 3 + i % 5, 2)).collect();
        let order = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_batches(&ex, 3, &mut rng)
                .unwrap()
                .into_iter()
                .map(|b| b.source)
                .collect::<Vec<_>>()
        };
        assert_eq!(order(42), order(42));
        assert!(make_batches(&ex, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
