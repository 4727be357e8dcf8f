//! Datasets with partial label spaces and the union label space built over
//! them.
//!
//! A [`DatasetView`] refers to categories by the ids of its own category
//! table. [`UnionSpace::remap`] rewrites a view onto the dense ids of the
//! union, after which `labeled_mask` tells which union categories the view
//! annotates.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::geom::BBox;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CategoryId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Source {
    #[default]
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category: CategoryId,
    pub bbox: BBox,
    pub source: Source,
    /// Detection confidence of a mined annotation.
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageRecord {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

/// Images, annotations and the categories that are annotated in one source.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetView {
    pub name: String,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    /// The labeled-category set.
    pub categories: Vec<Category>,
}

impl DatasetView {
    /// Builds a view, checking that every annotation points at a known image
    /// and a labeled category and that category ids and names are unique.
    pub fn new(
        name: impl Into<String>,
        images: Vec<ImageRecord>,
        annotations: Vec<Annotation>,
        categories: Vec<Category>,
    ) -> Result<Self> {
        let view = DatasetView {
            name: name.into(),
            images,
            annotations,
            categories,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn empty(name: impl Into<String>, categories: Vec<Category>) -> Self {
        DatasetView {
            name: name.into(),
            images: Vec::new(),
            annotations: Vec::new(),
            categories,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        for c in &self.categories {
            if !ids.insert(c.id) {
                return Err(Error::InvalidView(format!("duplicate category id {}", c.id.0)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidView(format!("duplicate category name `{}`", c.name)));
            }
        }
        let images: BTreeSet<u64> = self.images.iter().map(|im| im.id).collect();
        for a in &self.annotations {
            if !images.contains(&a.image_id) {
                return Err(Error::InvalidView(format!(
                    "annotation {} references unknown image {}",
                    a.id, a.image_id
                )));
            }
            if !ids.contains(&a.category) {
                return Err(Error::InvalidView(format!(
                    "annotation {} references unlabeled category {}",
                    a.id, a.category.0
                )));
            }
            if !a.bbox.is_valid() {
                return Err(Error::InvalidView(format!("annotation {} has an invalid box", a.id)));
            }
        }
        Ok(())
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn is_labeled(&self, category: CategoryId) -> bool {
        self.categories.iter().any(|c| c.id == category)
    }

    /// Annotations grouped by image id, in annotation order.
    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut map: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            map.entry(a.image_id).or_default().push(a);
        }
        map
    }
}

/// One `(dataset, category)` pair of the union and the dense id it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnionEntry {
    pub dataset: String,
    pub name: String,
    pub id: CategoryId,
}

/// Declares that `(dataset, name)` denotes the same category as
/// `(target_dataset, target_name)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alias {
    pub dataset: String,
    pub name: String,
    pub target_dataset: String,
    pub target_name: String,
}

/// The union label space `C_1 ∪ C_2 ∪ ...` with dense ids `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnionSpace {
    pub entries: Vec<UnionEntry>,
    /// Display name per union id: the first `(dataset, category)` mapped there.
    pub names: Vec<String>,
    /// Dataset names in input order.
    pub datasets: Vec<String>,
}

impl UnionSpace {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, dataset: &str, name: &str) -> Option<CategoryId> {
        self.entries
            .iter()
            .find(|e| e.dataset == dataset && e.name == name)
            .map(|e| e.id)
    }

    /// `mask[c]` is true when union category `c` is annotated in `dataset`.
    pub fn labeled_mask(&self, dataset: &str) -> Vec<bool> {
        let mut mask = alloc::vec![false; self.len()];
        for e in self.entries.iter().filter(|e| e.dataset == dataset) {
            mask[e.id.0] = true;
        }
        mask
    }

    /// Rewrites `view` so that its categories and annotations use union ids.
    pub fn remap(&self, view: &DatasetView) -> Result<DatasetView> {
        let mut local = BTreeMap::new();
        let mut categories = Vec::with_capacity(view.categories.len());
        for c in &view.categories {
            let id = self
                .id_of(&view.name, &c.name)
                .ok_or_else(|| Error::UnknownClass(format!("{}/{}", view.name, c.name)))?;
            local.insert(c.id, id);
            categories.push(Category {
                id,
                name: c.name.clone(),
            });
        }
        let annotations = view
            .annotations
            .iter()
            .map(|a| {
                let category = *local.get(&a.category).ok_or_else(|| {
                    Error::InvalidView(format!("annotation {} has unknown category", a.id))
                })?;
                Ok(Annotation { category, ..a.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        DatasetView::new(view.name.clone(), view.images.clone(), annotations, categories)
    }
}

/// Assigns dense ids in view order, then category order within a view.
/// Category names from different views stay distinct unless `aliases` joins
/// them; an alias must point at a pair that received its id earlier.
pub fn build_union(views: &[DatasetView], aliases: &[Alias]) -> Result<UnionSpace> {
    let mut alias_map: BTreeMap<(&str, &str), (&str, &str)> = BTreeMap::new();
    for a in aliases {
        let key = (a.dataset.as_str(), a.name.as_str());
        let target = (a.target_dataset.as_str(), a.target_name.as_str());
        if key == target {
            return Err(Error::AliasConflict(format!("{}/{} aliases itself", a.dataset, a.name)));
        }
        if let Some(prev) = alias_map.insert(key, target) {
            if prev != target {
                return Err(Error::AliasConflict(format!(
                    "{}/{} aliased to both {}/{} and {}/{}",
                    a.dataset, a.name, prev.0, prev.1, a.target_dataset, a.target_name
                )));
            }
        }
    }
    let mut seen_datasets = BTreeSet::new();
    for v in views {
        if !seen_datasets.insert(v.name.as_str()) {
            return Err(Error::InvalidView(format!("duplicate dataset name `{}`", v.name)));
        }
    }

    let mut assigned: BTreeMap<(&str, &str), CategoryId> = BTreeMap::new();
    let mut space = UnionSpace {
        entries: Vec::new(),
        names: Vec::new(),
        datasets: views.iter().map(|v| v.name.clone()).collect(),
    };
    for v in views {
        let mut used_in_view = BTreeSet::new();
        for c in &v.categories {
            let key = (v.name.as_str(), c.name.as_str());
            if assigned.contains_key(&key) {
                return Err(Error::InvalidView(format!(
                    "duplicate category `{}` in `{}`",
                    c.name, v.name
                )));
            }
            let id = match alias_map.get(&key) {
                Some(target) => *assigned.get(target).ok_or_else(|| {
                    Error::AliasConflict(format!(
                        "alias target {}/{} of {}/{} is not defined by an earlier view",
                        target.0, target.1, v.name, c.name
                    ))
                })?,
                None => {
                    let id = CategoryId(space.names.len());
                    space.names.push(format!("{}/{}", v.name, c.name));
                    id
                }
            };
            if !used_in_view.insert(id) {
                return Err(Error::AliasConflict(format!(
                    "two categories of `{}` map to the same id",
                    v.name
                )));
            }
            assigned.insert(key, id);
            space.entries.push(UnionEntry {
                dataset: v.name.clone(),
                name: c.name.clone(),
                id,
            });
        }
    }
    for key in alias_map.keys() {
        if !assigned.contains_key(key) {
            return Err(Error::AliasConflict(format!(
                "alias source {}/{} is not a category of any view",
                key.0, key.1
            )));
        }
    }
    Ok(space)
}

/// Splits `full` into a view without the held-out classes and a view with
/// only them.
///
/// The first view keeps the images that still carry at least one annotation
/// once held-out annotations are removed; the second keeps the images with at
/// least one held-out annotation. An image can land in both. An empty
/// held-out set returns `full` unchanged next to an empty view.
pub fn split_by_classes(full: &DatasetView, held_out: &[&str]) -> Result<(DatasetView, DatasetView)> {
    let mut held_ids = BTreeSet::new();
    for name in held_out {
        let c = full
            .category_by_name(name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))?;
        held_ids.insert(c.id);
    }
    let (kept_cats, held_cats): (Vec<Category>, Vec<Category>) = full
        .categories
        .iter()
        .cloned()
        .partition(|c| !held_ids.contains(&c.id));
    let kept_name = format!("{}-kept", full.name);
    let held_name = format!("{}-held", full.name);
    if held_ids.is_empty() {
        let mut kept = full.clone();
        kept.name = kept_name;
        return Ok((kept, DatasetView::empty(held_name, held_cats)));
    }

    let (kept_anns, held_anns): (Vec<Annotation>, Vec<Annotation>) = full
        .annotations
        .iter()
        .cloned()
        .partition(|a| !held_ids.contains(&a.category));
    let images_with = |anns: &[Annotation]| -> Vec<ImageRecord> {
        let ids: BTreeSet<u64> = anns.iter().map(|a| a.image_id).collect();
        full.images
            .iter()
            .filter(|im| ids.contains(&im.id))
            .cloned()
            .collect()
    };
    let kept = DatasetView {
        name: kept_name,
        images: images_with(&kept_anns),
        annotations: kept_anns,
        categories: kept_cats,
    };
    let held = DatasetView {
        name: held_name,
        images: images_with(&held_anns),
        annotations: held_anns,
        categories: held_cats,
    };
    Ok((kept, held))
}
