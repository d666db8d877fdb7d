//! COCO-style annotation file parsing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mask::{rle_counts_from_string, BinaryMask, Rle};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoFile {
    #[serde(default)]
    pub licenses: Vec<CocoLicense>,
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoLicense {
    pub id: u64,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub url: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub license: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    #[serde(default)]
    pub bbox: Vec<f64>,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(RleJson),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RleJson {
    pub size: [u32; 2],
    pub counts: RleCounts,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Raw(Vec<u32>),
    Compact(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
}

impl CocoFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Annotations(format!("{}: {e}", path.display())))
    }

    /// category name -> supercategory name.
    pub fn taxonomy(&self) -> BTreeMap<String, String> {
        self.categories
            .iter()
            .map(|c| (c.name.clone(), c.supercategory.clone()))
            .collect()
    }

    pub fn license(&self, id: Option<u64>) -> Option<&CocoLicense> {
        id.and_then(|id| self.licenses.iter().find(|l| l.id == id))
    }
}

/// Creative Commons licences, recognised by name or URL.
pub fn is_creative_commons(license: Option<&CocoLicense>) -> bool {
    license.is_some_and(|l| {
        l.name.to_ascii_lowercase().contains("creative commons") || l.url.contains("creativecommons.org")
    })
}

impl Segmentation {
    /// Rasterise at full image resolution.
    pub fn to_mask(&self, width: u32, height: u32) -> Result<BinaryMask> {
        match self {
            Segmentation::Polygons(polys) => Ok(BinaryMask::from_polygons(width, height, polys)),
            Segmentation::Rle(rle) => {
                let counts = match &rle.counts {
                    RleCounts::Raw(c) => c.clone(),
                    RleCounts::Compact(s) => rle_counts_from_string(s)?,
                };
                if rle.size != [height, width] {
                    return Err(Error::Annotations(format!(
                        "rle size {:?} does not match image {height}x{width}",
                        rle.size
                    )));
                }
                BinaryMask::from_rle(&Rle { size: rle.size, counts })
            }
        }
    }
}
