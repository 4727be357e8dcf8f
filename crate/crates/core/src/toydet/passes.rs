use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{HeadOutput, ToyModel};
use super::scene::{mix_seed, scene_features, Scenario, ScenarioSpec, SyntheticScene};
use crate::assign::AnchorGrid;
use crate::dataspace::{Annotation, CategoryId};
use crate::eval::{evaluate, ClassResult, Detection, EvalResult};
use crate::geom::{decode, nms, score_order, BBox};
use crate::loss::sigmoid;
use crate::mining::{mine_image, MiningConfig, PassDetection};
use crate::Result;

/// Detections kept per image after NMS.
pub const MAX_DETECTIONS: usize = 100;
/// Minimum class probability for an evaluation candidate.
pub const EVAL_MIN_SCORE: f64 = 0.05;

fn decoded(grid: &AnchorGrid, spec: &ScenarioSpec, out: &HeadOutput) -> Vec<BBox> {
    let size = spec.image_size;
    grid.anchors()
        .iter()
        .zip(&out.deltas)
        // a non-finite regression output yields an empty box, dropped later
        .map(|(a, d)| decode(a, d, Some((size, size))).unwrap_or(BBox { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 }))
        .collect()
}

/// Runs `config.passes` dropout passes of `model` over each scene. Each pass
/// keeps anchors whose top probability reaches `config.min_score`, applies
/// per-class NMS at `config.tau_nms` and keeps at most [`MAX_DETECTIONS`].
/// The dropout stream depends only on `(seed, image_id, pass)`.
pub fn mc_passes(
    model: &ToyModel,
    spec: &ScenarioSpec,
    scenes: &[SyntheticScene],
    config: &MiningConfig,
    seed: u64,
) -> Result<Vec<PassDetection>> {
    config.validate()?;
    let grid = spec.grid()?;
    let k = model.n_classes;
    let mut out = Vec::new();
    for scene in scenes {
        let features = scene_features(spec, &grid, scene);
        for pass in 0..config.passes {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, scene.image_id, pass as u64));
            let head = model.forward_dropout(&features, config.dropout, &mut rng);
            let boxes = decoded(&grid, spec, &head);
            let mut per_class: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
            for (i, row) in head.logits.chunks_exact(k).enumerate() {
                let probs: Vec<f64> = row.iter().map(|z| sigmoid(*z)).collect();
                let det = PassDetection {
                    image_id: scene.image_id,
                    pass,
                    bbox: boxes[i],
                    probs,
                };
                let (class, p) = det.top();
                if p >= config.min_score && boxes[i].area() > 0.0 {
                    per_class.entry(class.0).or_default().push((i, p));
                }
            }
            let mut kept: Vec<(usize, f64)> = Vec::new();
            for cands in per_class.values() {
                let scored: Vec<(BBox, f64)> = cands.iter().map(|&(i, p)| (boxes[i], p)).collect();
                kept.extend(nms(&scored, config.tau_nms).into_iter().map(|j| cands[j]));
            }
            let order = score_order(&kept, |&(_, p)| p);
            for &j in order.iter().take(MAX_DETECTIONS) {
                let i = kept[j].0;
                out.push(PassDetection {
                    image_id: scene.image_id,
                    pass,
                    bbox: boxes[i],
                    probs: head.logits[i * k..(i + 1) * k].iter().map(|z| sigmoid(*z)).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Deterministic detections for evaluation: per-class candidates with
/// probability at least [`EVAL_MIN_SCORE`], per-class NMS at `tau_nms`, then
/// the top [`MAX_DETECTIONS`] per image.
pub fn detect(model: &ToyModel, spec: &ScenarioSpec, scenes: &[SyntheticScene], tau_nms: f64) -> Result<Vec<Detection>> {
    let grid = spec.grid()?;
    let k = model.n_classes;
    let mut out = Vec::new();
    for scene in scenes {
        let head = model.forward(&scene_features(spec, &grid, scene));
        let boxes = decoded(&grid, spec, &head);
        let mut image_dets = Vec::new();
        for c in 0..k {
            let scored: Vec<(usize, (BBox, f64))> = head
                .logits
                .chunks_exact(k)
                .enumerate()
                .map(|(i, row)| (i, (boxes[i], sigmoid(row[c]))))
                .filter(|(i, (_, p))| *p >= EVAL_MIN_SCORE && boxes[*i].area() > 0.0)
                .collect();
            let cands: Vec<(BBox, f64)> = scored.iter().map(|(_, s)| *s).collect();
            for j in nms(&cands, tau_nms) {
                image_dets.push(Detection {
                    image_id: scene.image_id,
                    class: CategoryId(c),
                    bbox: cands[j].0,
                    score: cands[j].1,
                });
            }
        }
        let order = score_order(&image_dets, |d| d.score);
        out.extend(order.iter().take(MAX_DETECTIONS).map(|&j| image_dets[j]));
    }
    Ok(out)
}

/// Evaluation summary on the held-out scenes of a scenario.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScenarioEval {
    /// All eval scenes, all classes.
    pub overall: EvalResult,
    /// Per dataset: classes that dataset does not label, on its eval scenes.
    pub cross: Vec<EvalResult>,
    /// Per dataset: classes that dataset labels, on its eval scenes.
    pub own: Vec<EvalResult>,
    /// Mean AP50 over every (dataset, unlabeled class) pair with truths.
    pub cross_ap50: f64,
    /// Mean AP over the same pairs.
    pub cross_ap: f64,
    pub own_ap50: f64,
}

fn pooled(results: &[EvalResult], metric: impl Fn(&ClassResult) -> f64) -> f64 {
    let vals: Vec<f64> = results
        .iter()
        .flat_map(|r| r.classes.iter().filter(|c| c.num_truths > 0).map(&metric))
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Evaluates `detections` on the scenario's eval scenes.
pub fn evaluate_detections(scenario: &Scenario, detections: &[Detection]) -> ScenarioEval {
    let all: Vec<CategoryId> = (0..scenario.spec.num_classes()).map(CategoryId).collect();
    let overall = evaluate(detections, &scenario.eval_truth, &all);
    let mut cross = Vec::new();
    let mut own = Vec::new();
    for d in 0..scenario.spec.num_datasets() {
        let ids: Vec<u64> = scenario
            .eval_scenes
            .iter()
            .filter(|s| s.dataset == d)
            .map(|s| s.image_id)
            .collect();
        let dets: Vec<Detection> = detections.iter().filter(|x| ids.contains(&x.image_id)).copied().collect();
        let truth: Vec<Annotation> = scenario
            .eval_truth
            .iter()
            .filter(|t| ids.contains(&t.image_id))
            .cloned()
            .collect();
        let labeled = scenario.labeled(d);
        let (mine, theirs): (Vec<CategoryId>, Vec<CategoryId>) = all.iter().partition(|c| labeled[c.0]);
        own.push(evaluate(&dets, &truth, &mine));
        cross.push(evaluate(&dets, &truth, &theirs));
    }
    ScenarioEval {
        cross_ap50: pooled(&cross, |c| c.ap50),
        cross_ap: pooled(&cross, |c| c.ap),
        own_ap50: pooled(&own, |c| c.ap50),
        overall,
        cross,
        own,
    }
}

/// Deterministic detection plus [`evaluate_detections`].
pub fn evaluate_model(model: &ToyModel, scenario: &Scenario, tau_nms: f64) -> Result<ScenarioEval> {
    let dets = detect(model, &scenario.spec, &scenario.eval_scenes, tau_nms)?;
    Ok(evaluate_detections(scenario, &dets))
}

/// Mines every training scene of `scenario` from its pass detections.
/// Annotation ids continue after the largest ground-truth id.
pub fn mine_detections(scenario: &Scenario, detections: &[PassDetection], config: &MiningConfig) -> Result<Vec<Annotation>> {
    config.validate()?;
    let mut by_image: BTreeMap<u64, Vec<PassDetection>> = BTreeMap::new();
    for d in detections {
        by_image.entry(d.image_id).or_default().push(d.clone());
    }
    let mut next_id = scenario
        .datasets
        .iter()
        .flat_map(|d| d.annotations.iter().map(|a| a.id))
        .max()
        .unwrap_or(0)
        + 1;
    let mut out = Vec::new();
    for scene in &scenario.scenes {
        let Some(dets) = by_image.get(&scene.image_id) else {
            continue;
        };
        for mut a in mine_image(dets, scene.image_id, &scenario.labeled(scene.dataset), config) {
            a.id = next_id;
            next_id += 1;
            out.push(a);
        }
    }
    Ok(out)
}
