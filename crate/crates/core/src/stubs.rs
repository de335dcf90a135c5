//! Frozen stand-ins for the image encoder and the video frame pathway.
//!
//! Features are a seeded random base pattern per image plus, for every
//! attribute, a fixed signature for its value added onto that attribute's
//! patch subset. Attribute values are therefore linearly decodable from a
//! known region of the patch grid, which is what lets an instruction steer
//! the query transformer toward the region it needs.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    Shape,
    Count,
    Size,
    Texture,
    Text,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::Color,
        Attribute::Shape,
        Attribute::Count,
        Attribute::Size,
        Attribute::Texture,
        Attribute::Text,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Shape => "shape",
            Attribute::Count => "count",
            Attribute::Size => "size",
            Attribute::Texture => "texture",
            Attribute::Text => "text",
        }
    }

    /// Surface word for each categorical value, in value order.
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Attribute::Color => &["red", "blue", "green", "yellow", "purple", "orange", "black", "white"],
            Attribute::Shape => &["circle", "square", "triangle", "star", "heart", "diamond", "cross", "hexagon"],
            Attribute::Count => &["one", "two", "three", "four", "five", "six", "seven", "eight"],
            Attribute::Size => &["tiny", "small", "large", "huge"],
            Attribute::Texture => &["plain", "striped", "dotted", "checked"],
            Attribute::Text => &["stop", "exit", "open", "sale", "push", "pull"],
        }
    }

    pub fn cardinality(self) -> usize {
        self.words().len()
    }

    pub fn word(self, value: usize) -> &'static str {
        self.words()[value]
    }

    pub fn value_of(self, word: &str) -> Option<usize> {
        self.words().iter().position(|w| *w == word)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StubError {
    #[error("image {image_id}: {attribute} value {value} exceeds cardinality {cardinality}")]
    AttributeRange {
        image_id: u64,
        attribute: Attribute,
        value: usize,
        cardinality: usize,
    },
    #[error("image {image_id}: missing attribute {attribute}")]
    MissingAttribute { image_id: u64, attribute: Attribute },
    #[error("image {image_id}: num_frames must be at least 1")]
    NoFrames { image_id: u64 },
    #[error("image {image_id} is a still image, not a video")]
    NotVideo { image_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub image_id: u64,
    pub attributes: BTreeMap<Attribute, usize>,
    pub is_video: bool,
    pub num_frames: usize,
}

impl SyntheticImage {
    pub fn still(image_id: u64, attributes: BTreeMap<Attribute, usize>) -> Self {
        Self {
            image_id,
            attributes,
            is_video: false,
            num_frames: 1,
        }
    }

    pub fn video(image_id: u64, attributes: BTreeMap<Attribute, usize>, num_frames: usize) -> Self {
        Self {
            image_id,
            attributes,
            is_video: true,
            num_frames,
        }
    }

    /// Draws every attribute uniformly.
    pub fn random(image_id: u64, rng: &mut SplitMix64) -> Self {
        let attributes = Attribute::ALL.iter().map(|&a| (a, rng.below(a.cardinality()))).collect();
        Self::still(image_id, attributes)
    }

    pub fn get(&self, attribute: Attribute) -> usize {
        self.attributes[&attribute]
    }

    pub fn word(&self, attribute: Attribute) -> &'static str {
        attribute.word(self.get(attribute))
    }

    pub fn validate(&self) -> Result<(), StubError> {
        for a in Attribute::ALL {
            let Some(&value) = self.attributes.get(&a) else {
                return Err(StubError::MissingAttribute {
                    image_id: self.image_id,
                    attribute: a,
                });
            };
            if value >= a.cardinality() {
                return Err(StubError::AttributeRange {
                    image_id: self.image_id,
                    attribute: a,
                    value,
                    cardinality: a.cardinality(),
                });
            }
        }
        if self.num_frames == 0 {
            return Err(StubError::NoFrames { image_id: self.image_id });
        }
        Ok(())
    }
}

/// Output of the frozen encoder. `patches` never tracks gradient.
#[derive(Debug, Clone)]
pub struct VisualFeatures {
    pub patches: Tensor,
    pub source_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubConfig {
    pub patches: usize,
    pub dim: usize,
    pub seed: u64,
    /// Patches carrying each attribute's signature.
    pub patches_per_attribute: usize,
    pub base_scale: f64,
    /// Fixed per-patch code, the same for every image.
    pub position_scale: f64,
    pub signature_scale: f64,
    pub frame_scale: f64,
    pub frames_per_video: usize,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            patches: 16,
            dim: 32,
            seed: 0x5EED,
            patches_per_attribute: 2,
            base_scale: 0.5,
            position_scale: 1.0,
            signature_scale: 1.0,
            frame_scale: 0.5,
            frames_per_video: 4,
        }
    }
}

/// Centered uniform frame sampling: `floor((i + 0.5) * num_frames / n)`,
/// clamped to the last frame.
pub fn sample_frame_indices(num_frames: usize, n: usize) -> Vec<usize> {
    let last = num_frames.saturating_sub(1);
    (0..n)
        .map(|i| ((((i as f64) + 0.5) * num_frames as f64 / n as f64).floor() as usize).min(last))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    cfg: StubConfig,
    /// `[attribute][value]` -> `patches_per_attribute * dim` values.
    signatures: Vec<Vec<Vec<f64>>>,
}

impl ImageEncoder {
    pub fn new(cfg: StubConfig) -> Self {
        assert!(
            Attribute::ALL.len() * cfg.patches_per_attribute <= cfg.patches,
            "attribute regions exceed the patch grid"
        );
        let width = cfg.patches_per_attribute * cfg.dim;
        let signatures = Attribute::ALL
            .iter()
            .map(|a| {
                (0..a.cardinality())
                    .map(|v| {
                        let mut rng = SplitMix64::derive(cfg.seed, &format!("signature/{a}/{v}"));
                        (0..width).map(|_| cfg.signature_scale * rng.normal()).collect()
                    })
                    .collect()
            })
            .collect();
        Self { cfg, signatures }
    }

    pub fn config(&self) -> &StubConfig {
        &self.cfg
    }

    /// Patch indices that carry `attribute`'s signature.
    pub fn attribute_patches(&self, attribute: Attribute) -> std::ops::Range<usize> {
        let start = attribute.index() * self.cfg.patches_per_attribute;
        start..start + self.cfg.patches_per_attribute
    }

    fn base_pattern(&self, image_id: u64) -> Vec<f64> {
        let mut rng = SplitMix64::derive(self.cfg.seed, &format!("base/{image_id}"));
        let mut pos = SplitMix64::derive(self.cfg.seed, "position");
        (0..self.cfg.patches * self.cfg.dim)
            .map(|_| self.cfg.base_scale * rng.normal() + self.cfg.position_scale * pos.normal())
            .collect()
    }

    fn add_signatures(&self, img: &SyntheticImage, data: &mut [f64]) {
        let d = self.cfg.dim;
        for a in Attribute::ALL {
            let sig = &self.signatures[a.index()][img.get(a)];
            let start = self.attribute_patches(a).start * d;
            data[start..start + sig.len()]
                .iter_mut()
                .zip(sig)
                .for_each(|(x, s)| *x += s);
        }
    }

    fn features(&self, image_id: u64, data: Vec<f64>) -> VisualFeatures {
        VisualFeatures {
            patches: Tensor::new(&[self.cfg.patches, self.cfg.dim], data).expect("patch grid shape"),
            source_id: image_id,
        }
    }

    pub fn encode_image(&self, img: &SyntheticImage) -> Result<VisualFeatures, StubError> {
        img.validate()?;
        let mut data = self.base_pattern(img.image_id);
        self.add_signatures(img, &mut data);
        Ok(self.features(img.image_id, data))
    }

    /// One feature grid per sampled frame, in frame order. Frame 0 carries no
    /// perturbation, so it equals the still-image encoding.
    pub fn encode_video(&self, img: &SyntheticImage) -> Result<Vec<VisualFeatures>, StubError> {
        if !img.is_video {
            return Err(StubError::NotVideo { image_id: img.image_id });
        }
        img.validate()?;
        let mut still = self.base_pattern(img.image_id);
        self.add_signatures(img, &mut still);
        Ok(sample_frame_indices(img.num_frames, self.cfg.frames_per_video)
            .into_iter()
            .map(|f| {
                let mut data = still.clone();
                if f > 0 {
                    let mut rng = SplitMix64::derive(self.cfg.seed, &format!("frame/{}/{f}", img.image_id));
                    data.iter_mut().for_each(|x| *x += self.cfg.frame_scale * rng.normal());
                }
                self.features(img.image_id, data)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: u64, color: usize) -> SyntheticImage {
        let mut attrs: BTreeMap<Attribute, usize> = Attribute::ALL.iter().map(|&a| (a, 1)).collect();
        attrs.insert(Attribute::Color, color);
        SyntheticImage::still(id, attrs)
    }

    #[test]
    fn frame_indices() {
        assert_eq!(sample_frame_indices(4, 4), vec![0, 1, 2, 3]);
        assert_eq!(sample_frame_indices(100, 4), vec![12, 37, 62, 87]);
        assert_eq!(sample_frame_indices(1, 4), vec![0, 0, 0, 0]);
    }

    #[test]
    fn encoding_is_deterministic_and_frozen() {
        let enc = ImageEncoder::new(StubConfig::default());
        let a = enc.encode_image(&image(7, 2)).unwrap();
        let b = ImageEncoder::new(StubConfig::default()).encode_image(&image(7, 2)).unwrap();
        assert_eq!(a.patches.data(), b.patches.data());
        assert!(!a.patches.requires_grad());
        assert_eq!(a.patches.shape(), [16, 32]);
    }

    #[test]
    fn color_change_touches_only_color_patches() {
        let enc = ImageEncoder::new(StubConfig::default());
        let a = enc.encode_image(&image(3, 0)).unwrap();
        let b = enc.encode_image(&image(3, 5)).unwrap();
        let d = enc.config().dim;
        let region = enc.attribute_patches(Attribute::Color);
        for p in 0..enc.config().patches {
            let ra = &a.patches.data()[p * d..(p + 1) * d];
            let rb = &b.patches.data()[p * d..(p + 1) * d];
            assert_eq!(region.contains(&p), ra != rb, "patch {p}");
        }
    }

    #[test]
    fn video_frames() {
        let enc = ImageEncoder::new(StubConfig::default());
        let mut img = image(9, 1);
        assert_eq!(enc.encode_video(&img).unwrap_err(), StubError::NotVideo { image_id: 9 });
        img.is_video = true;
        img.num_frames = 4;
        let frames = enc.encode_video(&img).unwrap();
        assert_eq!(frames.len(), 4);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(frames[i].patches.data(), frames[j].patches.data());
            }
        }
        let again = enc.encode_video(&img).unwrap();
        for (x, y) in frames.iter().zip(&again) {
            assert_eq!(x.patches.data(), y.patches.data());
        }

        img.num_frames = 1;
        let single = enc.encode_video(&img).unwrap();
        let still = enc.encode_image(&image(9, 1)).unwrap();
        assert_eq!(single[0].patches.data(), still.patches.data());
    }

    #[test]
    fn validation() {
        let mut img = image(1, 0);
        img.attributes.insert(Attribute::Size, 4);
        assert!(matches!(img.validate(), Err(StubError::AttributeRange { .. })));
        img.attributes.remove(&Attribute::Size);
        assert!(matches!(img.validate(), Err(StubError::MissingAttribute { .. })));
    }
}
