//! Dataset plumbing: the 19-class street-scene taxonomy, label encoding,
//! PNG ingestion, augmentation, deterministic synthetic scene generation,
//! and directory indexing for the supported dataset layouts.

mod augment;
mod index;
mod io;
mod synth;

pub use augment::{augment, center_prepare, AugConfig};
pub use index::{index_dataset, DatasetLayout, IndexedDataset, Split};
pub use io::{
    denormalize_to_raster, image_to_tensor, load_image_rgb, load_label_png, raster_mean_luminance,
    save_label_png, save_rgb_png, RgbRaster,
};
pub use synth::{render_scene, scene_spec, synth_generate, NightTransform, SceneSpec};

use ndarray::Array2;
use std::path::PathBuf;
use thiserror::Error;

/// Label value excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset layout error: {0}")]
    Layout(String),
    #[error("image {image:?} is {image_dims:?} but label is {label_dims:?}")]
    Alignment {
        image: Option<PathBuf>,
        image_dims: (usize, usize),
        label_dims: (usize, usize),
    },
    #[error("label value {value} outside train-id range (0..{num_classes} or 255)")]
    LabelRange { value: u8, num_classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A single dataset entry: an image, its label file when the split is
/// annotated, and which training domain it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub domain: DomainTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    /// Labeled daytime-style data the segmenter trains on.
    Source,
    /// Unlabeled night data seen only by the adaptation branch.
    Target,
    Synthetic,
}

/// One class of the fixed street-scene taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassDef {
    pub name: &'static str,
    /// Display color; all palette entries are distinct, so colorized
    /// predictions can be decoded back to train ids.
    pub color: [u8; 3],
}

/// The 19-class street-scene taxonomy in its conventional order, with the
/// standard raw-id to train-id mapping and display palette.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    classes: Vec<ClassDef>,
}

const STREET_CLASSES: [ClassDef; 19] = [
    ClassDef { name: "road", color: [128, 64, 128] },
    ClassDef { name: "sidewalk", color: [244, 35, 232] },
    ClassDef { name: "building", color: [70, 70, 70] },
    ClassDef { name: "wall", color: [102, 102, 156] },
    ClassDef { name: "fence", color: [190, 153, 153] },
    ClassDef { name: "pole", color: [153, 153, 153] },
    ClassDef { name: "traffic light", color: [250, 170, 30] },
    ClassDef { name: "traffic sign", color: [220, 220, 0] },
    ClassDef { name: "vegetation", color: [107, 142, 35] },
    ClassDef { name: "terrain", color: [152, 251, 152] },
    ClassDef { name: "sky", color: [70, 130, 180] },
    ClassDef { name: "person", color: [220, 20, 60] },
    ClassDef { name: "rider", color: [255, 0, 0] },
    ClassDef { name: "car", color: [0, 0, 142] },
    ClassDef { name: "truck", color: [0, 0, 70] },
    ClassDef { name: "bus", color: [0, 60, 100] },
    ClassDef { name: "train", color: [0, 80, 100] },
    ClassDef { name: "motorcycle", color: [0, 0, 230] },
    ClassDef { name: "bicycle", color: [119, 11, 32] },
];

/// Raw label ids (as shipped in `labelIds` annotation files) for each
/// train id, in train-id order. Every other raw id maps to ignore.
const RAW_IDS: [u8; 19] = [7, 8, 11, 12, 13, 17, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 31, 32, 33];

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self { classes: STREET_CLASSES.to_vec() }
    }
}

impl ClassTaxonomy {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn name(&self, train_id: u8) -> &'static str {
        self.classes[train_id as usize].name
    }

    /// Raw annotation id → train id; unmapped ids become ignore.
    pub fn encode_raw(&self, raw: u8) -> u8 {
        RAW_IDS
            .iter()
            .position(|&r| r == raw)
            .map_or(IGNORE_LABEL, |t| t as u8)
    }

    /// Display color of a train id; ignore renders black.
    pub fn color(&self, train_id: u8) -> [u8; 3] {
        if (train_id as usize) < self.classes.len() {
            self.classes[train_id as usize].color
        } else {
            [0, 0, 0]
        }
    }

    /// Inverse palette lookup, for decoding colorized maps.
    pub fn train_id_of_color(&self, color: [u8; 3]) -> Option<u8> {
        self.classes
            .iter()
            .position(|c| c.color == color)
            .map(|t| t as u8)
    }
}

/// A per-pixel train-id map. Values are always in `0..19` or [`IGNORE_LABEL`];
/// the constructor enforces the range so downstream code never re-checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    data: Array2<u8>,
}

impl LabelMap {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if let Some(&value) = data.iter().find(|&&v| v >= 19 && v != IGNORE_LABEL) {
            return Err(DataError::LabelRange { value, num_classes: 19 });
        }
        Ok(Self { data })
    }

    /// Encodes a raw annotation raster through the taxonomy's id table.
    pub fn from_raw(raw: &Array2<u8>, taxonomy: &ClassTaxonomy) -> Self {
        Self {
            data: raw.mapv(|v| taxonomy.encode_raw(v)),
        }
    }

    pub fn filled(value: u8, h: usize, w: usize) -> Result<Self> {
        Self::new(Array2::from_elem((h, w), value))
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Renders the map as an RGB raster via the taxonomy palette; ignore
    /// pixels come out black.
    pub fn colorize(&self, taxonomy: &ClassTaxonomy) -> RgbRaster {
        let (h, w) = self.data.dim();
        let mut out = RgbRaster::zeros((3, h, w));
        for ((y, x), &id) in self.data.indexed_iter() {
            let c = taxonomy.color(id);
            for ch in 0..3 {
                out[[ch, y, x]] = c[ch];
            }
        }
        out
    }

    /// Decodes a palette rendering back into a map. Colors not in the
    /// palette decode to ignore.
    pub fn from_colorized(raster: &RgbRaster, taxonomy: &ClassTaxonomy) -> Self {
        let (_, h, w) = raster.dim();
        let mut data = Array2::from_elem((h, w), IGNORE_LABEL);
        for y in 0..h {
            for x in 0..w {
                let color = [raster[[0, y, x]], raster[[1, y, x]], raster[[2, y, x]]];
                if let Some(id) = taxonomy.train_id_of_color(color) {
                    data[[y, x]] = id;
                }
            }
        }
        Self { data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_id_table_matches_convention() {
        let tax = ClassTaxonomy::default();
        assert_eq!(tax.num_classes(), 19);
        assert_eq!(tax.encode_raw(7), 0, "road");
        assert_eq!(tax.encode_raw(8), 1, "sidewalk");
        assert_eq!(tax.encode_raw(26), 13, "car");
        assert_eq!(tax.encode_raw(33), 18, "bicycle");
        // Unlabeled, ego vehicle, and anything unmapped go to ignore.
        assert_eq!(tax.encode_raw(0), IGNORE_LABEL);
        assert_eq!(tax.encode_raw(1), IGNORE_LABEL);
        assert_eq!(tax.encode_raw(34), IGNORE_LABEL);
        assert_eq!(tax.name(0), "road");
        assert_eq!(tax.name(18), "bicycle");
    }

    #[test]
    fn palette_colors_are_distinct() {
        let tax = ClassTaxonomy::default();
        for a in 0..19u8 {
            for b in 0..a {
                assert_ne!(tax.color(a), tax.color(b), "classes {a} and {b} share a color");
            }
            assert_ne!(tax.color(a), [0, 0, 0], "class {a} collides with ignore black");
        }
    }

    #[test]
    fn label_map_rejects_out_of_range_values() {
        let bad = Array2::from_elem((2, 2), 19u8);
        assert!(matches!(
            LabelMap::new(bad),
            Err(DataError::LabelRange { value: 19, .. })
        ));
        assert!(LabelMap::filled(IGNORE_LABEL, 2, 2).is_ok());
        assert!(LabelMap::filled(18, 2, 2).is_ok());
    }

    #[test]
    fn encode_unmapped_image_is_all_ignore() {
        let tax = ClassTaxonomy::default();
        let raw = Array2::from_elem((4, 4), 2u8);
        let map = LabelMap::from_raw(&raw, &tax);
        assert!(map.data().iter().all(|&v| v == IGNORE_LABEL));
    }

    #[test]
    fn colorize_round_trip_recovers_labels() {
        let tax = ClassTaxonomy::default();
        let mut data = Array2::from_elem((4, 5), IGNORE_LABEL);
        for (i, v) in data.iter_mut().enumerate() {
            *v = if i % 3 == 0 { IGNORE_LABEL } else { (i % 19) as u8 };
        }
        let map = LabelMap::new(data).unwrap();
        let raster = map.colorize(&tax);
        let back = LabelMap::from_colorized(&raster, &tax);
        assert_eq!(back, map);
    }

    #[test]
    fn all_ignore_colorizes_to_black() {
        let tax = ClassTaxonomy::default();
        let map = LabelMap::filled(IGNORE_LABEL, 3, 3).unwrap();
        assert!(map.colorize(&tax).iter().all(|&v| v == 0));
    }
}
