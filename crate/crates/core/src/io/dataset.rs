//! Dataset JSON: a COCO-like layout with corner-form boxes.
//!
//! Annotations are stored for every image, labeled or not; the `split` of an
//! image decides whether training may read them. Unlabeled annotations are
//! the latent truth the diagnostics score against.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::sim::scene::{Dataset, Object, Scene, Split};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    /// `[x1, y1, x2, y2]`.
    pub bbox: [f64; 4],
    pub category_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRecord {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub version: u32,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

impl DatasetFile {
    pub fn from_dataset(data: &Dataset) -> DatasetFile {
        let images = data
            .scenes
            .iter()
            .map(|s| ImageRecord { id: s.id, width: s.width, height: s.height, split: s.split })
            .collect();
        let annotations = data
            .scenes
            .iter()
            .flat_map(|s| s.objects.iter().map(move |o| (s.id, o)))
            .enumerate()
            .map(|(i, (image_id, o))| AnnotationRecord {
                id: i as u64,
                image_id,
                bbox: o.bbox.to_array(),
                category_id: o.category_id,
            })
            .collect();
        let categories = (0..data.n_categories).map(|id| CategoryRecord { id, name: format!("category_{id}") }).collect();
        DatasetFile { version: DATASET_VERSION, images, annotations, categories }
    }

    /// Checks references and geometry, then rebuilds scenes in image order.
    pub fn to_dataset(&self) -> Result<Dataset> {
        if self.version != DATASET_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: DATASET_VERSION,
                hint: "regenerate the dataset with gen-data".into(),
            });
        }
        for (i, c) in self.categories.iter().enumerate() {
            if c.id != i {
                return Err(Error::Data(format!("category ids must be 0..K in order; entry {i} has id {}", c.id)));
            }
        }
        let n_categories = self.categories.len();
        let mut index = BTreeMap::new();
        let mut scenes = Vec::with_capacity(self.images.len());
        for im in &self.images {
            if !(im.width > 0.0 && im.height > 0.0 && im.width.is_finite() && im.height.is_finite()) {
                return Err(Error::Data(format!("image {} has invalid size {}x{}", im.id, im.width, im.height)));
            }
            if index.insert(im.id, scenes.len()).is_some() {
                return Err(Error::Data(format!("duplicate image id {}", im.id)));
            }
            scenes.push(Scene { id: im.id, width: im.width, height: im.height, objects: Vec::new(), split: im.split });
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.annotations {
            if !seen.insert(a.id) {
                return Err(Error::Data(format!("duplicate annotation id {}", a.id)));
            }
            let &si = index
                .get(&a.image_id)
                .ok_or_else(|| Error::Data(format!("annotation {} refers to unknown image {}", a.id, a.image_id)))?;
            if a.category_id >= n_categories {
                return Err(Error::Data(format!("annotation {} has unknown category {}", a.id, a.category_id)));
            }
            let bbox = BBox::from_array(a.bbox).map_err(|e| Error::Data(format!("annotation {}: {e}", a.id)))?;
            scenes[si].objects.push(Object { bbox, category_id: a.category_id });
        }
        Ok(Dataset { n_categories, scenes })
    }
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&DatasetFile::from_dataset(data))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a dataset file; malformed or inconsistent content is a data error.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    dataset_from_str(&text)
}

pub fn dataset_from_str(text: &str) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| Error::Data(e.to_string()))?;
    file.to_dataset()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::{gen_dataset, DatasetSpec};

    #[test]
    fn round_trip() {
        let data = gen_dataset(&DatasetSpec::new(3, 12, 3, 0.25)).unwrap();
        let text = serde_json::to_string(&DatasetFile::from_dataset(&data)).unwrap();
        assert_eq!(dataset_from_str(&text).unwrap(), data);
    }

    #[test]
    fn empty_round_trip() {
        let data = Dataset { n_categories: 0, scenes: vec![] };
        let text = serde_json::to_string(&DatasetFile::from_dataset(&data)).unwrap();
        assert_eq!(dataset_from_str(&text).unwrap(), data);
    }

    #[test]
    fn strict_schema() {
        let base = r#"{"version":1,"images":[{"id":0,"width":10,"height":10,"split":"labeled"}],
            "annotations":[{"id":0,"image_id":0,"bbox":[1,1,5,5],"category_id":0}],
            "categories":[{"id":0,"name":"a"}]"#;
        assert!(dataset_from_str(&format!("{base}}}")).is_ok());
        assert!(matches!(dataset_from_str(&format!("{base},\"extra\":1}}")), Err(Error::Data(_))));
        let bad_ref = base.replace("\"image_id\":0", "\"image_id\":9");
        assert!(matches!(dataset_from_str(&format!("{bad_ref}}}")), Err(Error::Data(_))));
        let bad_box = base.replace("[1,1,5,5]", "[5,1,1,5]");
        assert!(matches!(dataset_from_str(&format!("{bad_box}}}")), Err(Error::Data(_))));
        let bad_version = base.replace("\"version\":1", "\"version\":2");
        assert!(matches!(dataset_from_str(&format!("{bad_version}}}")), Err(Error::Version { found: 2, .. })));
    }
}
