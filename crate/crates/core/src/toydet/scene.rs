use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::assign::AnchorGrid;
use crate::dataspace::{build_union, Annotation, Category, CategoryId, DatasetView, ImageRecord, Source, UnionSpace};
use crate::geom::{encode, iou, BBox};
use crate::{Error, Result};

/// Parameters of a synthetic multi-dataset scenario.
///
/// Dataset `d` annotates its own block of `classes_per_dataset[d]` classes,
/// but its images contain objects of every class.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ScenarioSpec {
    pub classes_per_dataset: Vec<usize>,
    pub images_per_dataset: usize,
    /// Fully labeled held-out images per dataset, used for evaluation.
    pub eval_images_per_dataset: usize,
    pub objects_per_image: usize,
    pub image_size: f64,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub stride: f64,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    /// Std-dev of the noise on the shared class evidence features.
    pub evidence_noise: f64,
    /// Std-dev of the independent noise on the dataset-specific evidence
    /// copies. Lower than `evidence_noise` models a detector that reads a
    /// dataset's own appearance more reliably once it has seen it.
    pub domain_noise: f64,
    /// Std-dev of the noise on offset features for a perfectly aligned
    /// anchor; it grows as `1 + 4 (1 - IoU)` with misalignment.
    pub offset_noise: f64,
    /// Magnitude of the dataset-specific copies of the evidence features.
    pub domain_scale: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            classes_per_dataset: vec![2, 2],
            images_per_dataset: 100,
            eval_images_per_dataset: 50,
            objects_per_image: 4,
            image_size: 64.0,
            min_object_size: 12.0,
            max_object_size: 32.0,
            stride: 8.0,
            anchor_scales: vec![14.0, 22.0, 32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            evidence_noise: 0.2,
            domain_noise: 0.03,
            offset_noise: 0.04,
            domain_scale: 0.7,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn num_classes(&self) -> usize {
        self.classes_per_dataset.iter().sum()
    }

    pub fn num_datasets(&self) -> usize {
        self.classes_per_dataset.len()
    }

    /// Feature length: class evidence, dataset indicator, per-dataset
    /// evidence copies and four offset features.
    pub fn feature_dim(&self) -> usize {
        let (k, m) = (self.num_classes(), self.num_datasets());
        k + m + k * m + 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_dataset.len() < 2 {
            return Err(Error::DegenerateScenario("need at least two datasets".into()));
        }
        if self.classes_per_dataset.contains(&0) {
            return Err(Error::DegenerateScenario("every dataset needs at least one class".into()));
        }
        if self.images_per_dataset == 0 {
            return Err(Error::DegenerateScenario("no images".into()));
        }
        if self.objects_per_image < 2 {
            return Err(Error::DegenerateScenario(
                "images need room for one labeled and one unlabeled object".into(),
            ));
        }
        if !(self.min_object_size > 0.0
            && self.min_object_size <= self.max_object_size
            && self.max_object_size < self.image_size)
        {
            return Err(Error::DegenerateScenario("object sizes must fit the image".into()));
        }
        if self.evidence_noise < 0.0 || self.domain_noise < 0.0 || self.offset_noise < 0.0 || self.domain_scale < 0.0 {
            return Err(Error::DegenerateScenario("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<AnchorGrid> {
        AnchorGrid::new(
            self.image_size,
            self.image_size,
            self.stride,
            self.anchor_scales.clone(),
            self.anchor_ratios.clone(),
        )
    }

    /// Union ids owned by dataset `d`.
    pub fn dataset_classes(&self, d: usize) -> core::ops::Range<usize> {
        let start: usize = self.classes_per_dataset[..d].iter().sum();
        start..start + self.classes_per_dataset[d]
    }
}

/// One synthetic image: its source dataset and the true objects it contains.
/// Features are derived from these and the noise seed on demand.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticScene {
    pub image_id: u64,
    pub dataset: usize,
    pub objects: Vec<(CategoryId, BBox)>,
    pub noise_seed: u64,
}

/// Scenes, partially labeled views and retained full truth.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub union: UnionSpace,
    /// One view per dataset, categories and annotations in union ids.
    pub datasets: Vec<DatasetView>,
    pub scenes: Vec<SyntheticScene>,
    /// Every object of the training scenes, labeled or not.
    pub truth: Vec<Annotation>,
    pub eval_scenes: Vec<SyntheticScene>,
    pub eval_truth: Vec<Annotation>,
}

impl Scenario {
    /// Union-space labeled mask of a dataset.
    pub fn labeled(&self, dataset: usize) -> Vec<bool> {
        self.union.labeled_mask(&self.datasets[dataset].name)
    }

    /// Ground-truth annotations of one training image.
    pub fn annotations_of(&self, scene: &SyntheticScene) -> Vec<Annotation> {
        self.datasets[scene.dataset]
            .annotations
            .iter()
            .filter(|a| a.image_id == scene.image_id)
            .cloned()
            .collect()
    }
}

/// SplitMix64 finalizer, used to derive independent per-image seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const OBJECT_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const MAX_PLACEMENT_TRIES: usize = 50;
const MAX_OBJECT_OVERLAP: f64 = 0.2;

fn sample_box(rng: &mut ChaCha8Rng, spec: &ScenarioSpec) -> BBox {
    let size = rng.random_range(spec.min_object_size..=spec.max_object_size);
    let aspect = libm::exp(rng.random_range(libm::log(0.5)..=libm::log(2.0)));
    let k = libm::sqrt(aspect);
    let w = (size / k).min(spec.image_size - 1.0);
    let h = (size * k).min(spec.image_size - 1.0);
    let x = rng.random_range(0.0..=spec.image_size - w);
    let y = rng.random_range(0.0..=spec.image_size - h);
    BBox::from_center(x + 0.5 * w, y + 0.5 * h, w, h)
}

fn make_scene(spec: &ScenarioSpec, image_id: u64, dataset: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, image_id, OBJECT_STREAM));
    let k = spec.num_classes();
    let own = spec.dataset_classes(dataset);
    let mut classes = Vec::with_capacity(spec.objects_per_image);
    // one labeled and one unlabeled object are guaranteed
    classes.push(rng.random_range(own.clone()));
    let foreign: Vec<usize> = (0..k).filter(|c| !own.contains(c)).collect();
    classes.push(foreign[rng.random_range(0..foreign.len())]);
    while classes.len() < spec.objects_per_image {
        classes.push(rng.random_range(0..k));
    }
    let mut objects: Vec<(CategoryId, BBox)> = Vec::with_capacity(classes.len());
    for c in classes {
        let mut b = sample_box(&mut rng, spec);
        for _ in 0..MAX_PLACEMENT_TRIES {
            if objects.iter().all(|(_, o)| iou(o, &b) <= MAX_OBJECT_OVERLAP) {
                break;
            }
            b = sample_box(&mut rng, spec);
        }
        objects.push((CategoryId(c), b));
    }
    SyntheticScene {
        image_id,
        dataset,
        objects,
        noise_seed: mix_seed(spec.seed, image_id, NOISE_STREAM),
    }
}

/// Generates training scenes, their partially labeled views and the held-out
/// evaluation scenes. Image ids are global and start at 1; evaluation images
/// follow the training images.
pub fn gen_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let m = spec.num_datasets();
    let mut next_id = 1u64;
    let mut scenes = Vec::with_capacity(m * spec.images_per_dataset);
    for d in 0..m {
        for _ in 0..spec.images_per_dataset {
            scenes.push(make_scene(spec, next_id, d));
            next_id += 1;
        }
    }
    let mut eval_scenes = Vec::with_capacity(m * spec.eval_images_per_dataset);
    for d in 0..m {
        for _ in 0..spec.eval_images_per_dataset {
            eval_scenes.push(make_scene(spec, next_id, d));
            next_id += 1;
        }
    }

    let truth_of = |scenes: &[SyntheticScene]| -> Vec<Annotation> {
        let mut out = Vec::new();
        for s in scenes {
            for (category, bbox) in &s.objects {
                out.push(Annotation {
                    id: out.len() as u64 + 1,
                    image_id: s.image_id,
                    category: *category,
                    bbox: *bbox,
                    source: Source::GroundTruth,
                    confidence: None,
                });
            }
        }
        out
    };
    let truth = truth_of(&scenes);
    let eval_truth = truth_of(&eval_scenes);

    let mut local_views = Vec::with_capacity(m);
    for d in 0..m {
        let own = spec.dataset_classes(d);
        let categories: Vec<Category> = own
            .clone()
            .map(|c| Category {
                id: CategoryId(c),
                name: format!("class{c}"),
            })
            .collect();
        let images: Vec<ImageRecord> = scenes
            .iter()
            .filter(|s| s.dataset == d)
            .map(|s| ImageRecord {
                id: s.image_id,
                width: spec.image_size,
                height: spec.image_size,
                file_name: format!("synthetic/{:06}.png", s.image_id),
            })
            .collect();
        let annotations: Vec<Annotation> = truth
            .iter()
            .filter(|a| images.iter().any(|im| im.id == a.image_id) && own.contains(&a.category.0))
            .cloned()
            .collect();
        local_views.push(DatasetView::new(dataset_name(d), images, annotations, categories)?);
    }
    let union = build_union(&local_views, &[])?;
    let datasets = local_views
        .iter()
        .map(|v| union.remap(v))
        .collect::<Result<Vec<_>>>()?;

    Ok(Scenario {
        spec: spec.clone(),
        union,
        datasets,
        scenes,
        truth,
        eval_scenes,
        eval_truth,
    })
}

pub fn dataset_name(d: usize) -> String {
    format!("dataset{d}")
}

/// Per-anchor feature rows (`anchors x feature_dim`, row-major) of a scene.
///
/// Layout: evidence `e_k` for every class (best IoU with an object of class
/// `k`, plus noise), one-hot dataset indicator, a second independently
/// noised copy of the evidence scaled by `domain_scale` in the slot of the
/// scene's dataset (zero elsewhere), then the box offsets from the anchor
/// to its best-overlapping object with noise that grows with misalignment.
pub fn scene_features(spec: &ScenarioSpec, grid: &AnchorGrid, scene: &SyntheticScene) -> Vec<f64> {
    let (k, m) = (spec.num_classes(), spec.num_datasets());
    let dim = spec.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
    let mut out = Vec::with_capacity(grid.len() * dim);
    let mut evidence = vec![0.0f64; k];
    for anchor in grid.anchors() {
        evidence.iter_mut().for_each(|e| *e = 0.0);
        let mut best: Option<(f64, &BBox)> = None;
        for (c, b) in &scene.objects {
            let v = iou(anchor, b);
            evidence[c.0] = evidence[c.0].max(v);
            if v > 0.0 && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, b));
            }
        }
        for e in &evidence {
            let n: f64 = rng.sample(StandardNormal);
            out.push(e + spec.evidence_noise * n);
        }
        for d in 0..m {
            out.push(if d == scene.dataset { 1.0 } else { 0.0 });
        }
        for d in 0..m {
            for e in &evidence {
                let v = if d == scene.dataset {
                    let n: f64 = rng.sample(StandardNormal);
                    spec.domain_scale * (e + spec.domain_noise * n)
                } else {
                    0.0
                };
                out.push(v);
            }
        }
        let (offsets, misalign) = match best {
            Some((v, b)) => (
                encode(anchor, b).map(|d| d.to_array()).unwrap_or([0.0; 4]),
                1.0 - v,
            ),
            None => ([0.0; 4], 1.0),
        };
        let sigma = spec.offset_noise * (1.0 + 4.0 * misalign);
        for o in offsets {
            let n: f64 = rng.sample(StandardNormal);
            out.push(o + sigma * n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioSpec {
        ScenarioSpec {
            images_per_dataset: 50,
            eval_images_per_dataset: 5,
            ..Default::default()
        }
    }

    #[test]
    fn every_image_has_an_unlabeled_object() {
        let s = gen_scenario(&small()).unwrap();
        assert_eq!(s.scenes.len(), 100);
        for scene in &s.scenes {
            let labeled = s.labeled(scene.dataset);
            assert!(scene.objects.iter().any(|(c, _)| !labeled[c.0]));
            assert!(scene.objects.iter().any(|(c, _)| labeled[c.0]));
        }
    }

    #[test]
    fn annotations_stay_in_labeled_set() {
        let s = gen_scenario(&small()).unwrap();
        for (d, view) in s.datasets.iter().enumerate() {
            let labeled = s.labeled(d);
            assert!(view.annotations.iter().all(|a| labeled[a.category.0]));
            view.validate().unwrap();
        }
        let labeled_total: usize = s.datasets.iter().map(|v| v.annotations.len()).sum();
        assert!(labeled_total < s.truth.len());
        assert_eq!(s.union.len(), 4);
    }

    #[test]
    fn same_seed_same_scenario() {
        let a = gen_scenario(&small()).unwrap();
        let b = gen_scenario(&small()).unwrap();
        assert_eq!(a, b);
        let c = gen_scenario(&ScenarioSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a.scenes, c.scenes);
        let grid = a.spec.grid().unwrap();
        assert_eq!(
            scene_features(&a.spec, &grid, &a.scenes[3]),
            scene_features(&b.spec, &grid, &b.scenes[3])
        );
    }

    #[test]
    fn degenerate_specs_rejected() {
        let bad = ScenarioSpec {
            classes_per_dataset: vec![2, 0],
            ..Default::default()
        };
        assert!(matches!(gen_scenario(&bad), Err(Error::DegenerateScenario(_))));
        let one = ScenarioSpec {
            classes_per_dataset: vec![3],
            ..Default::default()
        };
        assert!(gen_scenario(&one).is_err());
    }

    #[test]
    fn feature_layout() {
        let spec = ScenarioSpec {
            evidence_noise: 0.0,
            domain_noise: 0.0,
            offset_noise: 0.0,
            ..small()
        };
        let grid = spec.grid().unwrap();
        let obj = grid.anchors()[100];
        let scene = SyntheticScene {
            image_id: 1,
            dataset: 1,
            objects: vec![(CategoryId(2), obj)],
            noise_seed: 0,
        };
        let f = scene_features(&spec, &grid, &scene);
        let dim = spec.feature_dim();
        assert_eq!(f.len(), grid.len() * dim);
        let row = &f[100 * dim..101 * dim];
        assert_eq!(&row[..4], &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(&row[4..6], &[0.0, 1.0]);
        assert_eq!(&row[6..10], &[0.0; 4]);
        assert_eq!(&row[10..14], &[0.0, 0.0, 0.7, 0.0]);
        assert_eq!(&row[14..], &[0.0; 4]);
    }
}
