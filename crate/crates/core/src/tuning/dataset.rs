use super::{build_simple_prompt, TrainSample, TuningError};
use crate::clients::VaeClient;
use crate::olrd::{ErasureSample, OlrdReader};
use crate::raster::masked_out;
use std::path::Path;

/// Random-access source of training samples.
pub trait TrainDataset {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<TrainSample, TuningError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default)]
pub struct InMemoryDataset {
    pub samples: Vec<TrainSample>,
}

impl InMemoryDataset {
    pub fn new(samples: Vec<TrainSample>) -> Self {
        Self { samples }
    }
}

impl TrainDataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<TrainSample, TuningError> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| TuningError::CorruptDataset(format!("no sample at index {index}")))
    }
}

/// Latent training record for an object-level removal sample: the target is
/// the original, the masked input is the blended image with the moved
/// footprint blanked. A missing caption falls back to the simple prompt.
pub fn train_sample_from(sample: &ErasureSample, vae: &dyn VaeClient) -> Result<TrainSample, TuningError> {
    let corrupt = |e: &dyn std::fmt::Display| TuningError::CorruptDataset(e.to_string());
    let simple_prompt = build_simple_prompt(&sample.background_tags).map_err(|e| corrupt(&e))?;
    let caption_prompt = if sample.caption.missing || sample.caption.text.trim().is_empty() {
        simple_prompt.clone()
    } else {
        sample.caption.text.clone()
    };
    Ok(TrainSample {
        original_latent: vae.encode(&sample.original).map_err(|e| corrupt(&e))?,
        masked_latent: vae.encode(&masked_out(&sample.blended, &sample.shifted_mask)).map_err(|e| corrupt(&e))?,
        mask: sample.shifted_mask.max_pool(vae.downscale()),
        simple_prompt,
        caption_prompt,
    })
}

/// Dataset directory written by [`crate::olrd::write_dataset`], encoded to
/// latents on access.
pub struct DiskDataset<'a> {
    reader: OlrdReader,
    vae: &'a dyn VaeClient,
}

impl<'a> DiskDataset<'a> {
    pub fn open(dir: &Path, vae: &'a dyn VaeClient) -> Result<Self, TuningError> {
        let reader = OlrdReader::open(dir).map_err(|e| TuningError::CorruptDataset(e.to_string()))?;
        Ok(Self { reader, vae })
    }
}

impl TrainDataset for DiskDataset<'_> {
    fn len(&self) -> usize {
        self.reader.len()
    }

    fn get(&self, index: usize) -> Result<TrainSample, TuningError> {
        let sample = self.reader.get(index).map_err(|e| TuningError::CorruptDataset(e.to_string()))?;
        train_sample_from(&sample, self.vae)
    }
}
