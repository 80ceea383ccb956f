//! Uncompressed row-major run-length encoding of binary masks.
//!
//! `counts` alternates runs of 0s and 1s and always starts with a run of 0s
//! (possibly of length zero). The runs sum to `height * width`.

use crate::raster::Mask;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RleError {
    #[error("run lengths sum to {got}, expected {expected}")]
    LengthMismatch { got: u64, expected: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Rle {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for &v in mask.data() {
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        Rle { height: mask.height(), width: mask.width(), counts }
    }

    pub fn decode(&self) -> Result<Mask, RleError> {
        let expected = (self.height * self.width) as u64;
        let got: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if got != expected {
            return Err(RleError::LengthMismatch { got, expected });
        }
        let mut data = Vec::with_capacity(expected as usize);
        for (i, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, c as usize));
        }
        Ok(Mask::from_vec(self.height, self.width, data).expect("runs produce binary data"))
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }
}
