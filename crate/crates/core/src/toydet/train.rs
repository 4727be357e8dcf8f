use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::ToyModel;
use super::scene::{scene_features, Scenario};
use crate::assign::{assign, AnchorAssignment, NEG_IOU, POS_IOU};
use crate::dataspace::Annotation;
use crate::geom::BBox;
use crate::loss::{
    localization_loss, masked_cls_loss, normalizer, total_loss, ClassPredictions, ClassTargets, SMOOTH_L1_BETA,
};
use crate::weights::{mask_for, HighRecall, Strategy, StrategyConfig, WeightMask};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at whose start the learning rate is divided by 10.
    pub lr_steps: Vec<usize>,
    pub seed: u64,
    pub strategy: StrategyConfig,
    /// Weight of the box loss.
    pub lambda: f64,
    pub beta: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub init_std: f64,
    /// Initial foreground probability of every class.
    pub prior: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_steps: vec![8, 11],
            seed: 0,
            strategy: StrategyConfig::new(Strategy::ConflictFree),
            lambda: 1.0,
            beta: SMOOTH_L1_BETA,
            pos_iou: POS_IOU,
            neg_iou: NEG_IOU,
            init_std: 0.01,
            prior: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1), weight decay >= 0".into()));
        }
        if !(self.lambda >= 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidConfig("lambda must be >= 0 and beta > 0".into()));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) || self.init_std < 0.0 {
            return Err(Error::InvalidConfig("prior must lie in (0, 1), init_std >= 0".into()));
        }
        if self.neg_iou > self.pos_iou {
            return Err(Error::InvalidThresholds {
                pos: self.pos_iou,
                neg: self.neg_iou,
            });
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| s <= epoch).count();
        self.lr * libm::pow(0.1, drops as f64)
    }
}

/// Mean per-image losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossRecord {
    pub epoch: usize,
    pub cls: f64,
    pub loc: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub trace: Vec<LossRecord>,
}

/// Loss parts of one image and the gradient w.r.t. every model parameter,
/// in [`ToyModel::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageObjective {
    pub cls: f64,
    pub loc: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

/// Loss and parameter gradient of one image, weight decay excluded.
pub fn image_objective(
    model: &ToyModel,
    features: &[f64],
    assignment: &AnchorAssignment,
    mask: &WeightMask,
    config: &TrainConfig,
) -> Result<ImageObjective> {
    let (k, dim) = (model.n_classes, model.dim);
    let out = model.forward(features);
    let n = assignment.len();
    let preds = ClassPredictions::new(n, k, out.logits)?;
    let targets = ClassTargets::from_assignment(assignment, k);
    let norm = normalizer(assignment.num_positive());
    let cls = masked_cls_loss(&preds, &targets, mask, norm)?;
    let loc_targets: Vec<_> = assignment
        .matches
        .iter()
        .map(|m| if m.is_positive() { m.target } else { None })
        .collect();
    let (loc, loc_grad) = localization_loss(&out.deltas, &loc_targets, config.beta, norm)?;

    let mut grad = vec![0.0; model.num_params()];
    let (cw, rest) = grad.split_at_mut(k * dim);
    let (cb, rest) = rest.split_at_mut(k);
    let (rw, rb) = rest.split_at_mut(4 * dim);
    for (i, x) in features.chunks_exact(dim).enumerate() {
        for c in 0..k {
            let g = cls.grad[i * k + c];
            if g != 0.0 {
                cb[c] += g;
                for (w, xv) in cw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *w += g * xv;
                }
            }
        }
        if loc_targets[i].is_some() {
            for (j, g) in loc_grad[i].iter().enumerate() {
                let g = config.lambda * g;
                rb[j] += g;
                for (w, xv) in rw[j * dim..(j + 1) * dim].iter_mut().zip(x) {
                    *w += g * xv;
                }
            }
        }
    }
    Ok(ImageObjective {
        cls: cls.loss,
        loc,
        total: total_loss(cls.loss, loc, config.lambda),
        grad,
    })
}

/// Everything the trainer needs for one image besides the model.
pub struct TrainImage {
    pub features: Vec<f64>,
    pub annotations: Vec<Annotation>,
    pub labeled: Vec<bool>,
    /// High-recall mined boxes, only for the safe-negatives strategy.
    pub high_recall: Vec<BBox>,
}

/// Builds per-image training inputs: ground truth plus the mined
/// annotations of the same image, appended after it.
pub fn prepare_images(
    scenario: &Scenario,
    pseudo: &[Annotation],
    high_recall: &[Annotation],
) -> Result<(Vec<BBox>, Vec<TrainImage>)> {
    let grid = scenario.spec.grid()?;
    let group = |anns: &[Annotation]| {
        let mut map: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
        for a in anns {
            map.entry(a.image_id).or_default().push(a.clone());
        }
        map
    };
    let mut by_image = group(&scenario.datasets.iter().flat_map(|d| d.annotations.clone()).collect::<Vec<_>>());
    for (id, extra) in group(pseudo) {
        by_image.entry(id).or_default().extend(extra);
    }
    let hr = group(high_recall);
    let images = scenario
        .scenes
        .iter()
        .map(|s| TrainImage {
            features: scene_features(&scenario.spec, &grid, s),
            annotations: by_image.remove(&s.image_id).unwrap_or_default(),
            labeled: scenario.labeled(s.dataset),
            high_recall: hr
                .get(&s.image_id)
                .map(|v| v.iter().map(|a| a.bbox).collect())
                .unwrap_or_default(),
        })
        .collect();
    Ok((grid.anchors().to_vec(), images))
}

/// Assignment and weight mask of one image under `config`.
pub fn image_targets(
    anchors: &[BBox],
    image: &TrainImage,
    config: &TrainConfig,
) -> Result<(AnchorAssignment, WeightMask)> {
    let assignment = assign(anchors, &image.annotations, config.pos_iou, config.neg_iou)?;
    let high_recall = (config.strategy.strategy == Strategy::SafeNegatives).then_some(HighRecall {
        anchors,
        boxes: &image.high_recall,
        match_thr: config.pos_iou,
    });
    let mask = mask_for(&config.strategy, &assignment, &image.labeled, high_recall)?;
    Ok((assignment, mask))
}

/// First training phase: SGD over the partially labeled scenario.
pub fn train(scenario: &Scenario, config: &TrainConfig) -> Result<TrainOutcome> {
    retrain(scenario, &[], &[], config)
}

/// Training on ground truth plus mined annotations. `high_recall` is only
/// read by the safe-negatives strategy. With no mined annotations this is
/// exactly [`train`].
pub fn retrain(
    scenario: &Scenario,
    pseudo: &[Annotation],
    high_recall: &[Annotation],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (anchors, images) = prepare_images(scenario, pseudo, high_recall)?;
    let mut model = ToyModel::init(
        scenario.spec.num_classes(),
        scenario.spec.feature_dim(),
        config.init_std,
        config.prior,
        config.seed,
    );
    let mut velocity = vec![0.0; model.num_params()];
    let weight_count = model.cls_weights.len();
    let reg_start = weight_count + model.n_classes;
    let reg_end = reg_start + model.reg_weights.len();
    let decays = |p: usize| p < weight_count || (reg_start..reg_end).contains(&p);

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut cls_sum, mut loc_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for &idx in &order {
            let image = &images[idx];
            let (assignment, mask) = image_targets(&anchors, image, config)?;
            let obj = image_objective(&model, &image.features, &assignment, &mask, config)?;
            if !obj.total.is_finite() {
                return Err(Error::Diverged { step });
            }
            for (p, ((w, v), g)) in model.params_mut().zip(velocity.iter_mut()).zip(&obj.grad).enumerate() {
                let g = if decays(p) { g + config.weight_decay * *w } else { *g };
                *v = config.momentum * *v + g;
                *w -= lr * *v;
            }
            if !model.is_finite() {
                return Err(Error::Diverged { step });
            }
            cls_sum += obj.cls;
            loc_sum += obj.loc;
            total_sum += obj.total;
            step += 1;
        }
        let n = images.len().max(1) as f64;
        trace.push(LossRecord {
            epoch,
            cls: cls_sum / n,
            loc: loc_sum / n,
            total: total_sum / n,
        });
    }
    Ok(TrainOutcome { model, trace })
}
