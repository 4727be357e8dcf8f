//! COCO-format JSON, restricted to images, boxes and categories. Mined
//! annotations carry `"source": "pseudo"` and a `"confidence"`.

use std::path::Path;

use catext_core::dataspace::{Annotation, Category, CategoryId, DatasetView, ImageRecord, Source};
use catext_core::geom::BBox;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::files;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

impl CocoFile {
    pub fn from_view(view: &DatasetView) -> Self {
        CocoFile {
            images: view
                .images
                .iter()
                .map(|im| CocoImage {
                    id: im.id,
                    width: im.width,
                    height: im.height,
                    file_name: im.file_name.clone(),
                })
                .collect(),
            annotations: view.annotations.iter().map(annotation_to_coco).collect(),
            categories: view
                .categories
                .iter()
                .map(|c| CocoCategory { id: c.id.0, name: c.name.clone() })
                .collect(),
        }
    }

    /// Converts to a validated view named `name`.
    pub fn to_view(&self, name: &str) -> std::result::Result<DatasetView, String> {
        let images = self
            .images
            .iter()
            .map(|im| ImageRecord {
                id: im.id,
                width: im.width,
                height: im.height,
                file_name: im.file_name.clone(),
            })
            .collect();
        let annotations = self
            .annotations
            .iter()
            .map(annotation_from_coco)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let categories = self
            .categories
            .iter()
            .map(|c| Category { id: CategoryId(c.id), name: c.name.clone() })
            .collect();
        DatasetView::new(name, images, annotations, categories).map_err(|e| e.to_string())
    }
}

fn annotation_to_coco(a: &Annotation) -> CocoAnnotation {
    let pseudo = a.source == Source::Pseudo;
    CocoAnnotation {
        id: a.id,
        image_id: a.image_id,
        category_id: a.category.0,
        bbox: a.bbox.to_xywh(),
        source: pseudo.then(|| "pseudo".to_string()),
        confidence: if pseudo { a.confidence } else { None },
    }
}

fn annotation_from_coco(a: &CocoAnnotation) -> std::result::Result<Annotation, String> {
    let source = match a.source.as_deref() {
        None | Some("ground_truth") | Some("gt") => Source::GroundTruth,
        Some("pseudo") => Source::Pseudo,
        Some(other) => return Err(format!("annotation {}: unknown source `{other}`", a.id)),
    };
    let [x, y, w, h] = a.bbox;
    let bbox = BBox::from_xywh(x, y, w, h).map_err(|_| format!("annotation {}: invalid bbox {:?}", a.id, a.bbox))?;
    Ok(Annotation {
        id: a.id,
        image_id: a.image_id,
        category: CategoryId(a.category_id),
        bbox,
        source,
        confidence: a.confidence,
    })
}

pub fn load_view(path: &Path, name: &str) -> Result<DatasetView> {
    let file: CocoFile = files::read_json(path)?;
    file.to_view(name).map_err(|message| CliError::Format { path: path.to_path_buf(), message })
}

pub fn save_view(path: &Path, view: &DatasetView) -> Result<()> {
    files::write_json(path, &CocoFile::from_view(view))
}
