//! Detector training loss: focal classification plus 1-D DIoU boundary
//! regression, normalized by the action-frame count.
//!
//! `L = (1/T+) * sum_i [ focal(y_i, pi_i) + lambda_r * 1(i) * DIoU_i ]`
//! where the indicator masks background frames out of the regression term
//! and `T+` (floored at 1) counts action frames. By default the indicator
//! reads the ground-truth label, which keeps the regression targets
//! stable; the literal predicted-label reading is available via
//! [`IndicatorMode::Predicted`].

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, DetectorOutput, RegressionTarget};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorMode {
    /// A frame counts as action when its ground-truth label is non-background.
    GroundTruth,
    /// A frame counts as action when its predicted argmax is non-background.
    Predicted,
}

/// 1-D DIoU loss between two intervals:
/// `1 - IoU + (center distance)^2 / (enclosing length)^2`.
pub fn diou_loss_1d(pred: (f64, f64), gt: (f64, f64)) -> f64 {
    let inter = (pred.1.min(gt.1) - pred.0.max(gt.0)).max(0.0);
    let union = (pred.1 - pred.0) + (gt.1 - gt.0) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let dc = 0.5 * ((pred.0 + pred.1) - (gt.0 + gt.1));
    let enclose = pred.1.max(gt.1) - pred.0.min(gt.0);
    let penalty = if enclose > 0.0 {
        (dc * dc) / (enclose * enclose)
    } else {
        0.0
    };
    1.0 - iou + penalty
}

/// Differentiable combined loss over one video's sampled frames
/// (batch size 1).
pub fn detector_loss<E: Element>(
    cfg: &DetectorConfig,
    out: &DetectorOutput<E>,
    targets: &[RegressionTarget],
) -> Result<Tensor<E>> {
    if cfg.lambda_r < 0.0 {
        return Err(Error::Invalid(format!(
            "lambda_r must be non-negative, got {}",
            cfg.lambda_r
        )));
    }
    let sh = out.class_logits.shape().to_vec();
    if sh[0] != 1 {
        return Err(Error::Invalid(format!(
            "detector_loss expects batch size 1, got {}",
            sh[0]
        )));
    }
    let (a, t) = (sh[1], sh[2]);
    if targets.len() != t {
        return Err(Error::shape(
            "detector_loss",
            format!("{} targets vs {} frames", targets.len(), t),
        ));
    }

    // focal term over every frame
    let logits_ta = out.class_logits.reshape(&[a, t])?.permute(&[1, 0])?; // [T', A]
    let lp = logits_ta.log_softmax(1)?;
    let classes: Vec<usize> = targets.iter().map(|tg| tg.class_index).collect();
    let onehot = Tensor::<E>::one_hot(&classes, a);
    let lp_y = lp.mul(&onehot)?.sum_axis(1)?; // [T']
    let p_y = lp_y.exp();
    let focal_w = p_y.neg().add_scalar(1.0).powf(cfg.focal_gamma);
    let focal_sum = focal_w.mul(&lp_y)?.neg().sum_all();

    // action-frame mask per the configured indicator
    let action_mask: Vec<bool> = match cfg.indicator {
        IndicatorMode::GroundTruth => targets.iter().map(|tg| tg.is_action()).collect(),
        IndicatorMode::Predicted => {
            let data = out.class_logits.data();
            (0..t)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..a {
                        if data[c * t + i] > data[best * t + i] {
                            best = c;
                        }
                    }
                    best != 0
                })
                .collect()
        }
    };
    let t_plus = action_mask.iter().filter(|&&m| m).count().max(1);

    // regression term, gated per assigned level; gradients flow only
    // through the selected level's offsets
    let ts_const = Tensor::<E>::from_vec(
        &[t],
        out.timestamps.iter().map(|&v| E::of_f64(v)).collect(),
    )?;
    let mut reg_sum: Option<Tensor<E>> = None;
    for (level, offsets) in out.level_offsets.iter().enumerate() {
        let mut mask = vec![E::zero(); t];
        let mut any = false;
        let mut gs = vec![E::zero(); t];
        let mut ge = vec![E::one(); t]; // dummy [0,1) rows are masked out
        for (i, tg) in targets.iter().enumerate() {
            if tg.is_action() && action_mask[i] && tg.level == level {
                mask[i] = E::one();
                any = true;
                gs[i] = E::of_f64(tg.gt_start);
                ge[i] = E::of_f64(tg.gt_end);
            }
        }
        if !any {
            continue;
        }
        let mask_t = Tensor::from_vec(&[t], mask)?;
        let gts = Tensor::from_vec(&[t], gs)?;
        let gte = Tensor::from_vec(&[t], ge)?;
        let flat = offsets.reshape(&[2, t])?;
        let ds = flat.slice(0, 0, 1)?.reshape(&[t])?;
        let de = flat.slice(0, 1, 1)?.reshape(&[t])?;
        let pred_s = ts_const.sub(&ds)?;
        let pred_e = ts_const.add(&de)?;
        let inter = pred_e.minimum(&gte)?.sub(&pred_s.maximum(&gts)?)?.relu();
        let union = gte.sub(&gts)?.add(&pred_e.sub(&pred_s)?)?.sub(&inter)?;
        let iou = inter.div(&union)?;
        let dc = pred_s.add(&pred_e)?.sub(&gts.add(&gte)?)?.scale(0.5);
        let enclose = pred_e.maximum(&gte)?.sub(&pred_s.minimum(&gts)?)?;
        let penalty = dc.mul(&dc)?.div(&enclose.mul(&enclose)?)?;
        let diou = iou.neg().add_scalar(1.0).add(&penalty)?;
        let masked = diou.mul(&mask_t)?.sum_all();
        reg_sum = Some(match reg_sum {
            None => masked,
            Some(acc) => acc.add(&masked)?,
        });
    }

    let total = match reg_sum {
        None => focal_sum,
        Some(r) => focal_sum.add(&r.scale(cfg.lambda_r))?,
    };
    Ok(total.scale(1.0 / t_plus as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Detector, DetectorConfig};
    use crate::tensor::{ParamStore, Rng};

    #[test]
    fn diou_hand_cases() {
        // pred [0,1] vs gt [2,3]: IoU 0, center gap 2, enclosure 3
        let v = diou_loss_1d((0.0, 1.0), (2.0, 3.0));
        assert!((v - (1.0 + 4.0 / 9.0)).abs() < 1e-12, "{v}");
        assert!(diou_loss_1d((2.0, 5.5), (2.0, 5.5)).abs() < 1e-12);
    }

    fn run_loss(
        indicator: IndicatorMode,
        logits: Vec<f64>,
        level_offsets: Vec<Vec<f64>>,
        timestamps: Vec<f64>,
        targets: &[RegressionTarget],
        a: usize,
    ) -> f64 {
        let t = timestamps.len();
        let cfg = DetectorConfig {
            num_classes: a,
            levels: level_offsets.len(),
            indicator,
            ..DetectorConfig::default()
        };
        let out = DetectorOutput {
            class_logits: Tensor::<f64>::from_vec(&[1, a, t], logits).unwrap(),
            level_offsets: level_offsets
                .into_iter()
                .map(|o| Tensor::from_vec(&[1, 2, t], o).unwrap())
                .collect(),
            timestamps,
            frame_period: 1.0,
        };
        detector_loss(&cfg, &out, targets).unwrap().item()
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        // 2 frames, one action (class 1 of A=2), logits strongly correct,
        // offsets exactly the ground truth
        let targets = vec![
            RegressionTarget {
                class_index: 1,
                d_start: 0.5,
                d_end: 1.5,
                level: 0,
                gt_start: 0.0,
                gt_end: 2.0,
            },
            RegressionTarget::background(),
        ];
        // logits [1,A=2,T=2] class-major: class0 = [-100, 100], class1 = [100, -100]
        let logits = vec![-100.0, 100.0, 100.0, -100.0];
        // offsets [1,2,T]: d_start row then d_end row
        let offsets = vec![0.5, 0.0, 1.5, 0.0];
        let v = run_loss(
            IndicatorMode::GroundTruth,
            logits,
            vec![offsets],
            vec![0.5, 2.5],
            &targets,
            2,
        );
        assert!(v.abs() < 1e-12, "loss should vanish, got {v}");
    }

    #[test]
    fn loss_positive_when_wrong_and_lambda_validated() {
        let targets = vec![RegressionTarget {
            class_index: 1,
            d_start: 1.0,
            d_end: 1.0,
            level: 0,
            gt_start: 0.0,
            gt_end: 2.0,
        }];
        let v = run_loss(
            IndicatorMode::GroundTruth,
            vec![3.0, -3.0],
            vec![vec![0.1, 3.0]],
            vec![1.0],
            &targets,
            2,
        );
        assert!(v > 0.5, "{v}");

        let cfg = DetectorConfig {
            lambda_r: -0.5,
            ..DetectorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_through_full_detector() {
        use crate::tensor::gradcheck;
        let cfg = DetectorConfig {
            input_dim: 5,
            dim: 8,
            levels: 2,
            heads: 2,
            num_classes: 3,
            base_range: 2.0,
            ..DetectorConfig::default()
        };
        let det = Detector::new(cfg.clone()).unwrap();
        let mut store = ParamStore::<f64>::new();
        det.register(&mut store, 21);
        // randomize the zero head layers so gradients are informative
        let mut rng = Rng::new(22);
        for name in ["det.cls2.w", "det.cls2.b", "det.reg2.w", "det.reg2.b"] {
            let n = store.get(name).unwrap().numel();
            store
                .set_data(name, (0..n).map(|_| rng.normal_scaled(0.0, 0.3)).collect())
                .unwrap();
        }
        let t = 6usize;
        let timestamps: Vec<f64> = (0..t).map(|i| i as f64 + 0.5).collect();
        let spec = super::super::PyramidSpec {
            levels: 2,
            base_range: 2.0,
            frame_period: 1.0,
        };
        let anns = vec![crate::types::SegmentAnnotation {
            start: 1.0,
            end: 4.5,
            class_id: 1,
        }];
        let targets = super::super::assign_targets(&anns, &timestamps, &spec).unwrap();

        let names = store.names();
        let shapes: Vec<Vec<usize>> = names
            .iter()
            .map(|n| store.get(n).unwrap().shape.clone())
            .collect();
        let mut all_shapes: Vec<&[usize]> = vec![&[1, 6, 5]];
        all_shapes.extend(shapes.iter().map(|s| s.as_slice()));
        // check at the actual initialization values (plus random input):
        // gradients are compared where the network really operates
        let mut inputs: Vec<Vec<f64>> = vec![(0..30).map(|_| rng.normal()).collect()];
        inputs.extend(
            names
                .iter()
                .map(|n| store.get(n).unwrap().data.iter().map(|v| *v).collect()),
        );

        let r = gradcheck::check_at(
            |xs| {
                let leaves: std::collections::BTreeMap<String, Tensor<f64>> = names
                    .iter()
                    .cloned()
                    .zip(xs[1..].iter().cloned())
                    .collect();
                let pyr = det.build_pyramid(&xs[0], &timestamps, &leaves)?;
                let out = det.predict(&pyr, &leaves)?;
                detector_loss(&cfg, &out, &targets)
            },
            &all_shapes,
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "rel err {}", r.max_rel_err);
    }
}
