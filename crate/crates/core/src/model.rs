use std::sync::Arc;

use crate::error::Result;
use crate::lm::ToyLm;
use crate::qformer::{truncate_instruction, QFormer};
use crate::stubs::{ImageEncoder, SyntheticImage};
use crate::tensor::Tensor;

/// Frozen encoder and language model plus the trainable Q-Former.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub encoder: Arc<ImageEncoder>,
    pub lm: Arc<ToyLm>,
    pub qformer: QFormer,
}

impl ModelBundle {
    /// Q-Former instruction ids: the input text, head-truncated.
    pub fn instruction_ids(&self, input: &str) -> Vec<usize> {
        let ids = self.lm.vocab.encode(input);
        truncate_instruction(&ids, self.qformer.config.max_instruction_tokens).to_vec()
    }

    /// Soft prompt rows for `image`; videos go frame by frame.
    pub fn soft_prompt(&self, image: &SyntheticImage, input: &str) -> Result<Tensor> {
        let ids = self.instruction_ids(input);
        if image.is_video {
            let frames = self.encoder.encode_video(image)?;
            self.qformer.extract_video(&frames, &ids)
        } else {
            self.qformer.soft_prompt(&self.encoder.encode_image(image)?, &ids)
        }
    }
}
