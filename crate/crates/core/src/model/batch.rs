use crate::autodiff::Segment;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One `(x_v, x_t, y)` instance.
///
/// The model sees `[bos] ++ visual ++ text ++ target`; position `p` predicts
/// token `p + 1`, and only predictions of target tokens are scored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: String,
    pub visual: Vec<usize>,
    pub text: Vec<usize>,
    pub target: Vec<usize>,
}

impl Sequence {
    pub fn prefix_len(&self) -> usize {
        1 + self.visual.len() + self.text.len()
    }

    pub fn full_len(&self) -> usize {
        self.prefix_len() + self.target.len()
    }

    pub fn tokens(&self, bos: usize) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.full_len());
        t.push(bos);
        t.extend(&self.visual);
        t.extend(&self.text);
        t.extend(&self.target);
        t
    }

    /// Generation prompt: everything before the target.
    pub fn prefix(&self, bos: usize) -> Vec<usize> {
        let mut t = self.tokens(bos);
        t.truncate(self.prefix_len());
        t
    }

    /// True exactly on the non-pad target positions of [`Sequence::tokens`].
    pub fn loss_mask(&self, pad: usize) -> Vec<bool> {
        let mut m = vec![false; self.prefix_len()];
        m.extend(self.target.iter().map(|&t| t != pad));
        m
    }
}

/// Several sequences packed row-wise for a single forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sequences: Vec<Sequence>,
    pub bos: usize,
    pub pad: usize,
    /// Model input ids, all sequences concatenated (last token dropped per sequence).
    pub input_ids: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Packed row whose logits predict a scored target token.
    pub pred_rows: Vec<usize>,
    pub pred_targets: Vec<usize>,
}

impl Batch {
    pub fn new(sequences: Vec<Sequence>, bos: usize, pad: usize, max_len: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut input_ids = Vec::new();
        let mut segments = Vec::with_capacity(sequences.len());
        let mut pred_rows = Vec::new();
        let mut pred_targets = Vec::new();
        for s in &sequences {
            let full = s.tokens(bos);
            if full.len() > max_len + 1 {
                return Err(Error::Input(format!(
                    "sequence {} has {} tokens, limit is {}",
                    s.id,
                    full.len(),
                    max_len + 1
                )));
            }
            if full.len() < 2 {
                return Err(Error::Input(format!("sequence {} is too short", s.id)));
            }
            let start = input_ids.len();
            let mask = s.loss_mask(pad);
            input_ids.extend(&full[..full.len() - 1]);
            segments.push(Segment {
                start,
                len: full.len() - 1,
            });
            for p in 0..full.len() - 1 {
                if mask[p + 1] {
                    pred_rows.push(start + p);
                    pred_targets.push(full[p + 1]);
                }
            }
        }
        Ok(Self {
            sequences,
            bos,
            pad,
            input_ids,
            segments,
            pred_rows,
            pred_targets,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.sequences.iter().map(|s| s.id.as_str())
    }
}
