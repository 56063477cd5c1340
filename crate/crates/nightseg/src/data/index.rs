//! Directory indexing for the supported dataset layouts. One reader walks
//! every layout; layouts differ only in their path templates and in
//! whether label files carry raw annotation ids or ready train ids.

use super::io::load_label_png;
use super::{ClassTaxonomy, DataError, DomainTag, LabelMap, Result, Sample};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use walkdir::WalkDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train|val|test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetLayout {
    Cityscapes,
    DarkZurich,
    NightCity,
    Synthetic,
}

impl std::str::FromStr for DatasetLayout {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cityscapes" => Ok(DatasetLayout::Cityscapes),
            "darkzurich" | "dark_zurich" => Ok(DatasetLayout::DarkZurich),
            "nightcity" | "night_city" => Ok(DatasetLayout::NightCity),
            "synthetic" => Ok(DatasetLayout::Synthetic),
            other => Err(format!(
                "unknown layout {other:?} (expected cityscapes|darkzurich|nightcity|synthetic)"
            )),
        }
    }
}

struct Template {
    image_dir: &'static str,
    image_suffix: &'static str,
    label_dir: &'static str,
    label_suffix: &'static str,
}

impl DatasetLayout {
    fn template(self) -> Template {
        match self {
            DatasetLayout::Cityscapes | DatasetLayout::NightCity => Template {
                image_dir: "leftImg8bit",
                image_suffix: "_leftImg8bit.png",
                label_dir: "gtFine",
                label_suffix: "_gtFine_labelIds.png",
            },
            DatasetLayout::DarkZurich => Template {
                image_dir: "rgb_anon",
                image_suffix: "_rgb_anon.png",
                label_dir: "gt",
                label_suffix: "_gt_labelIds.png",
            },
            DatasetLayout::Synthetic => Template {
                image_dir: "images",
                image_suffix: ".png",
                label_dir: "labels",
                label_suffix: ".png",
            },
        }
    }

    /// Whether label files hold raw annotation ids that still need the
    /// taxonomy's id table. Synthetic labels are written as train ids.
    pub fn labels_are_raw_ids(self) -> bool {
        !matches!(self, DatasetLayout::Synthetic)
    }

    /// Loads and encodes one label file according to the layout.
    pub fn load_label(self, path: &Path, taxonomy: &ClassTaxonomy) -> Result<LabelMap> {
        let raw = load_label_png(path)?;
        if self.labels_are_raw_ids() {
            Ok(LabelMap::from_raw(&raw, taxonomy))
        } else {
            LabelMap::new(raw)
        }
    }

    fn default_domain(self) -> DomainTag {
        match self {
            DatasetLayout::Synthetic => DomainTag::Synthetic,
            _ => DomainTag::Source,
        }
    }
}

/// The ordered sample list plus any images that lack a label file.
#[derive(Debug, Clone)]
pub struct IndexedDataset {
    pub samples: Vec<Sample>,
    /// Images with no matching label file; callers treat these as warnings
    /// in supervised splits and as expected in unlabeled target data.
    pub orphan_images: Vec<PathBuf>,
}

/// Walks `root` according to the layout's path template and pairs each
/// image with its label file. The listing is sorted by path, so two runs
/// over the same tree always produce the same order.
pub fn index_dataset(root: &Path, layout: DatasetLayout, split: Split) -> Result<IndexedDataset> {
    let t = layout.template();
    let image_root = root.join(t.image_dir).join(split.dir_name());
    if !image_root.is_dir() {
        return Err(DataError::Layout(format!(
            "missing image directory {}",
            image_root.display()
        )));
    }
    let label_root = root.join(t.label_dir).join(split.dir_name());

    let mut image_paths: Vec<PathBuf> = WalkDir::new(&image_root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.to_string_lossy().ends_with(t.image_suffix))
        .collect();
    image_paths.sort();
    if image_paths.is_empty() {
        return Err(DataError::Layout(format!(
            "no {} images under {}",
            t.image_suffix,
            image_root.display()
        )));
    }

    let mut samples = Vec::with_capacity(image_paths.len());
    let mut orphan_images = Vec::new();
    for image_path in image_paths {
        let rel = image_path
            .strip_prefix(&image_root)
            .expect("walked paths stay under their root");
        let name = rel
            .file_name()
            .expect("files have names")
            .to_string_lossy()
            .into_owned();
        let stem = &name[..name.len() - t.image_suffix.len()];
        let label_rel = rel.with_file_name(format!("{stem}{}", t.label_suffix));
        let label_path = label_root.join(label_rel);
        let label_path = if label_path.is_file() {
            Some(label_path)
        } else {
            orphan_images.push(image_path.clone());
            None
        };
        samples.push(Sample {
            image_path,
            label_path,
            domain: layout.default_domain(),
        });
    }
    Ok(IndexedDataset { samples, orphan_images })
}
