use super::TuningError;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Literal of the learned background-completion token.
pub const PLACEHOLDER: &str = "R_*";

/// Words whose mean embedding seeds the placeholder before inversion.
pub const INIT_WORDS: [&str; 2] = ["background", "scenery"];

/// Maps a prompt to per-token conditioning vectors through an embedding
/// table. The table is exposed so a single row can be trained.
pub trait TextEncoderClient: Send + Sync {
    fn tokenize(&self, prompt: &str) -> Vec<usize>;
    fn table(&self) -> &Array2<f64>;

    fn width(&self) -> usize {
        self.table().ncols()
    }

    /// Conditioning for `prompt` looked up in `table` (same shape as
    /// [`TextEncoderClient::table`]).
    fn encode_with(&self, prompt: &str, table: &Array2<f64>) -> Array2<f64> {
        let ids = self.tokenize(prompt);
        Array2::from_shape_fn((ids.len(), table.ncols()), |(i, j)| table[[ids[i], j]])
    }

    fn encode(&self, prompt: &str) -> Array2<f64> {
        self.encode_with(prompt, self.table())
    }
}

const WORDS: &[&str] = &[
    "<empty>", "a", "photo", "of", "the", "and", "in", "image", "is", "are", "describe", "background",
    "scenery", "sky", "grass", "gravel", "beach", "sea", "sand", "road", "wall", "tree", "mountain",
    "snow", "water", "field", "floor", "green", "lush", "blue", "clear", "scattered", "throughout",
    "scene", "with", "some", "grey", PLACEHOLDER,
];
const UNK_BUCKETS: usize = 16;

/// Word-level lookup encoder with a seeded random table. Unknown words hash
/// into a fixed set of buckets; the empty prompt encodes to one `<empty>`
/// token.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    table: Array2<f64>,
}

impl ToyTextEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).expect("valid std");
        let rows = WORDS.len() + UNK_BUCKETS;
        Self { table: Array2::from_shape_fn((rows, width), |_| normal.sample(&mut rng)) }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.nrows()
    }

    pub fn placeholder_slot(&self) -> usize {
        Self::word_id(PLACEHOLDER)
    }

    pub fn word_id(word: &str) -> usize {
        if let Some(i) = WORDS.iter().position(|w| *w == word) {
            return i;
        }
        // FNV-1a into the unknown buckets
        let mut h: u64 = 0xcbf29ce484222325;
        for b in word.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        WORDS.len() + (h % UNK_BUCKETS as u64) as usize
    }

    /// Replace one row, e.g. to install a learned placeholder embedding.
    pub fn set_row(&mut self, slot: usize, values: &Array1<f64>) -> Result<(), TuningError> {
        if values.len() != self.table.ncols() || slot >= self.table.nrows() {
            return Err(TuningError::ShapeMismatch(format!(
                "row {slot} of width {} into a {:?} table",
                values.len(),
                self.table.dim()
            )));
        }
        self.table.row_mut(slot).assign(values);
        Ok(())
    }
}

impl TextEncoderClient for ToyTextEncoder {
    fn tokenize(&self, prompt: &str) -> Vec<usize> {
        let ids: Vec<usize> = prompt
            .split_whitespace()
            .filter_map(|raw| {
                if raw == PLACEHOLDER {
                    return Some(PLACEHOLDER.to_string());
                }
                let w: String = raw.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
                (!w.is_empty()).then_some(w)
            })
            .map(|w| Self::word_id(&w))
            .collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    fn table(&self) -> &Array2<f64> {
        &self.table
    }
}

/// The learned token: its literal, vocabulary slot and embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceholderToken {
    pub literal: String,
    pub slot: usize,
    pub embedding: Array1<f64>,
    pub trainable: bool,
}

impl PlaceholderToken {
    /// Mean of the [`INIT_WORDS`] embeddings.
    pub fn seeded(encoder: &dyn TextEncoderClient, slot: usize) -> Self {
        let table = encoder.table();
        let mut embedding = Array1::zeros(table.ncols());
        for w in INIT_WORDS {
            let id = encoder.tokenize(w)[0];
            embedding += &table.row(id);
        }
        embedding /= INIT_WORDS.len() as f64;
        Self { literal: PLACEHOLDER.to_string(), slot, embedding, trainable: true }
    }

    /// `base` with this token's row replaced.
    pub fn install(&self, base: &Array2<f64>) -> Array2<f64> {
        let mut t = base.clone();
        t.row_mut(self.slot).assign(&self.embedding);
        t
    }
}
