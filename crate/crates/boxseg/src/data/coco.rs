//! COCO-style annotation files: box-only dataset annotations and the
//! pseudo-label output of the offline labeling stage.
//!
//! Segmentation uses plain uncompressed row-major RLE (`size` + `counts`,
//! counts starting with the zero run); the compressed COCO string codec is
//! out of scope at this scale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::BitMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

/// Uncompressed RLE segmentation, row-major, zero run first.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CocoRle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl CocoRle {
    pub fn from_mask(mask: &BitMask) -> Self {
        CocoRle {
            size: [mask.h(), mask.w()],
            counts: mask.rle_counts(),
        }
    }

    pub fn to_mask(&self) -> Result<BitMask> {
        BitMask::from_rle_counts(self.size[0], self.size[1], &self.counts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<CocoRle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    /// Header with the two shape categories of the synthetic benchmark.
    pub fn shapes_header() -> Self {
        CocoDataset {
            images: Vec::new(),
            annotations: Vec::new(),
            categories: vec![
                CocoCategory {
                    id: 1,
                    name: "ellipse".into(),
                },
                CocoCategory {
                    id: 2,
                    name: "polygon".into(),
                },
            ],
        }
    }

    /// Annotations of one image, in file order.
    pub fn annotations_of(&self, image_id: u64) -> impl Iterator<Item = &CocoAnnotation> {
        self.annotations
            .iter()
            .filter(move |a| a.image_id == image_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("dataset serializes");
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// Parse a COCO-style annotation file. Only boxes and classes are consumed
/// by training; segmentation entries, if present, are carried but never
/// handed to training code.
pub fn load_coco_boxes(path: &Path) -> Result<CocoDataset> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: format!("{e} (line {}, column {})", e.line(), e.column()),
    })
}

/// Per-instance confidences written next to a pseudo-label file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoScore {
    pub annotation_id: u64,
    /// Detection confidence of the matched prediction.
    pub confidence: f64,
    /// Quality score used as the loss weight.
    pub quality: f64,
}

/// Write the sidecar of confidences for a pseudo-label annotation file.
pub fn save_pseudo_scores(path: &Path, scores: &[PseudoScore]) -> Result<()> {
    let json = serde_json::to_string(scores).expect("scores serialize");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_pseudo_scores(path: &Path) -> Result<Vec<PseudoScore>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        detail: e.to_string(),
    })
}
