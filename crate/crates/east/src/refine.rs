//! Multi-stage dilated TCN refinement of aggregated frame distributions.
//!
//! Each stage: 1x1 input projection, a stack of dilated residual layers
//! (dilation 2^j, `h + proj(relu(dilated_conv(h)))`), and a 1x1
//! classifier. Stage s > 0 consumes the softmax of stage s-1's logits.
//!
//! Initialization warm-starts refinement at the identity: the input
//! projection embeds the A class channels into the first A of `channels`,
//! the classifier extracts them back, residual 1x1 projections start at
//! zero (their dilated convolutions are random, so gradients unlock after
//! the first step). At init every stage's logits equal its input
//! distribution, so the refined labeling starts exactly at the
//! aggregation baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::randn_vec;
use crate::tensor::{conv1d, Element, Padding, ParamStore, Rng, Tensor};
use crate::types::FrameLabeling;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    /// Total classes A (background included).
    pub num_classes: usize,
    pub stages: usize,
    /// Dilated residual layers per stage; layer j uses dilation 2^j.
    pub layers: usize,
    pub channels: usize,
    /// Smoothing loss weight.
    pub lambda_s: f64,
    /// Truncation of the squared log-prob difference at tau^2.
    pub tau: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            num_classes: 9,
            stages: 3,
            layers: 10,
            channels: 64,
            lambda_s: 0.15,
            tau: 4.0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.layers == 0 {
            return Err(Error::Invalid("refiner needs at least one stage and layer".into()));
        }
        if self.channels < self.num_classes {
            return Err(Error::Invalid(format!(
                "refiner channels ({}) must be >= classes ({}) for the identity warm start",
                self.channels, self.num_classes
            )));
        }
        Ok(())
    }
}

pub struct Refiner {
    pub cfg: RefinerConfig,
}

impl Refiner {
    pub fn new(cfg: RefinerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Refiner { cfg })
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, seed: u64) {
        let cfg = &self.cfg;
        let (a, ch) = (cfg.num_classes, cfg.channels);
        let mut rng = Rng::derive(seed, "refiner");
        for s in 0..cfg.stages {
            // identity embedding [ch, a, 1]
            let mut in_w = vec![E::zero(); ch * a];
            for c in 0..a {
                in_w[c * a + c] = E::one();
            }
            store.insert(&format!("tcn.s{s}.in.w"), &[ch, a, 1], in_w, true);
            store.insert(&format!("tcn.s{s}.in.b"), &[ch], vec![E::zero(); ch], true);
            for j in 0..cfg.layers {
                store.insert(
                    &format!("tcn.s{s}.l{j}.conv.w"),
                    &[ch, ch, 3],
                    randn_vec(ch * ch * 3, (3.0 * ch as f64).sqrt().recip(), &mut rng),
                    true,
                );
                store.insert(&format!("tcn.s{s}.l{j}.conv.b"), &[ch], vec![E::zero(); ch], true);
                store.insert(
                    &format!("tcn.s{s}.l{j}.proj.w"),
                    &[ch, ch, 1],
                    vec![E::zero(); ch * ch],
                    true,
                );
                store.insert(&format!("tcn.s{s}.l{j}.proj.b"), &[ch], vec![E::zero(); ch], true);
            }
            // identity extraction [a, ch, 1]
            let mut out_w = vec![E::zero(); a * ch];
            for c in 0..a {
                out_w[c * ch + c] = E::one();
            }
            store.insert(&format!("tcn.s{s}.out.w"), &[a, ch, 1], out_w, true);
            store.insert(&format!("tcn.s{s}.out.b"), &[a], vec![E::zero(); a], true);
        }
    }

    /// Forward through every stage. Input `[1, A, T]` soft distributions;
    /// returns per-stage logits, each `[1, A, T]`.
    ///
    /// Each stage embeds the log of its input distribution, so at the
    /// identity initialization the stage logits are calibrated: their
    /// softmax reproduces the input distribution exactly (up to the
    /// epsilon floor).
    pub fn forward<E: Element>(
        &self,
        dists: &Tensor<E>,
        leaves: &std::collections::BTreeMap<String, Tensor<E>>,
    ) -> Result<Vec<Tensor<E>>> {
        let cfg = &self.cfg;
        if dists.rank() != 3 || dists.shape()[1] != cfg.num_classes {
            return Err(Error::shape(
                "refine",
                format!(
                    "expected [B,{},T], got {:?}",
                    cfg.num_classes,
                    dists.shape()
                ),
            ));
        }
        let mut stage_logits: Vec<Tensor<E>> = Vec::with_capacity(cfg.stages);
        let mut x = dists.clone();
        for s in 0..cfg.stages {
            if s > 0 {
                x = stage_logits[s - 1].softmax(1)?;
            }
            let x = x.add_scalar(1e-6).ln();
            let mut h = conv1d(
                &x,
                &leaves[&format!("tcn.s{s}.in.w")],
                Some(&leaves[&format!("tcn.s{s}.in.b")]),
                1,
                Padding::Same,
            )?;
            for j in 0..cfg.layers {
                let dil = 1usize << j.min(20);
                let c = conv1d(
                    &h,
                    &leaves[&format!("tcn.s{s}.l{j}.conv.w")],
                    Some(&leaves[&format!("tcn.s{s}.l{j}.conv.b")]),
                    dil,
                    Padding::Same,
                )?
                .relu();
                let p = conv1d(
                    &c,
                    &leaves[&format!("tcn.s{s}.l{j}.proj.w")],
                    Some(&leaves[&format!("tcn.s{s}.l{j}.proj.b")]),
                    1,
                    Padding::Same,
                )?;
                h = h.add(&p)?;
            }
            let logits = conv1d(
                &h,
                &leaves[&format!("tcn.s{s}.out.w")],
                Some(&leaves[&format!("tcn.s{s}.out.b")]),
                1,
                Padding::Same,
            )?;
            stage_logits.push(logits);
        }
        Ok(stage_logits)
    }

    /// Labels from the last stage (argmax, ties to the lowest index).
    pub fn final_labels<E: Element>(stage_logits: &[Tensor<E>]) -> Vec<usize> {
        let last = stage_logits.last().expect("at least one stage");
        let (a, t) = (last.shape()[1], last.shape()[2]);
        let d = last.data();
        (0..t)
            .map(|i| {
                let mut best = 0;
                for c in 1..a {
                    if d[c * t + i] > d[best * t + i] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Deep supervision: per stage, frame-mean cross-entropy plus
    /// `lambda_s` times the truncated MSE of adjacent-frame log-prob
    /// differences. The smoothing term is symmetric in the two frames
    /// (no stop-gradient) so the whole loss admits finite-difference
    /// verification.
    pub fn refinement_loss<E: Element>(
        &self,
        stage_logits: &[Tensor<E>],
        gt_labels: &[usize],
    ) -> Result<Tensor<E>> {
        let cfg = &self.cfg;
        let mut total: Option<Tensor<E>> = None;
        for logits in stage_logits {
            let (a, t) = (logits.shape()[1], logits.shape()[2]);
            if gt_labels.len() != t {
                return Err(Error::shape(
                    "refinement_loss",
                    format!("{} labels vs {} frames", gt_labels.len(), t),
                ));
            }
            let lp = logits.reshape(&[a, t])?.log_softmax(0)?;
            let lp_ta = lp.permute(&[1, 0])?; // [T, A]
            let onehot = Tensor::<E>::one_hot(gt_labels, a);
            let ce = lp_ta.mul(&onehot)?.sum_axis(1)?.neg().mean_all();

            let stage_loss = if t > 1 {
                let d = lp.slice(1, 1, t - 1)?.sub(&lp.slice(1, 0, t - 1)?)?;
                let smooth = d
                    .mul(&d)?
                    .clamp_max(cfg.tau * cfg.tau)
                    .mean_all()
                    .scale(cfg.lambda_s);
                ce.add(&smooth)?
            } else {
                ce
            };
            total = Some(match total {
                None => stage_loss,
                Some(acc) => acc.add(&stage_loss)?,
            });
        }
        total.ok_or_else(|| Error::Invalid("refinement_loss over zero stages".into()))
    }
}

/// Helper: frame distributions as a `[1, A, T]` tensor.
pub fn labeling_to_tensor<E: Element>(lab: &FrameLabeling) -> Tensor<E> {
    let (t, a) = (lab.num_frames(), lab.num_classes);
    // dists are [T x A] row-major; tensor layout wants [A, T]
    let mut data = vec![E::zero(); a * t];
    for i in 0..t {
        for c in 0..a {
            data[c * t + i] = E::of_f64(lab.dists[i * a + c]);
        }
    }
    Tensor::from_vec(&[1, a, t], data).expect("consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_refiner() -> (Refiner, ParamStore<f64>) {
        let cfg = RefinerConfig {
            num_classes: 3,
            stages: 3,
            layers: 2,
            channels: 5,
            ..RefinerConfig::default()
        };
        let refiner = Refiner::new(cfg).unwrap();
        let mut store = ParamStore::new();
        refiner.register(&mut store, 42);
        (refiner, store)
    }

    fn soft_input(t: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let a = 3;
        let mut data = vec![0.0; a * t];
        for i in 0..t {
            let mut col: Vec<f64> = (0..a).map(|_| rng.uniform() + 0.05).collect();
            let s: f64 = col.iter().sum();
            for (c, v) in col.iter_mut().enumerate() {
                *v /= s;
                data[c * t + i] = *v;
            }
        }
        Tensor::from_vec(&[1, a, t], data).unwrap()
    }

    #[test]
    fn init_preserves_input_argmax_and_per_stage_lengths() {
        let (refiner, store) = toy_refiner();
        let x = soft_input(17, 1);
        let stages = refiner.forward(&x, &store.leaves()).unwrap();
        assert_eq!(stages.len(), 3);
        for s in &stages {
            assert_eq!(s.shape(), &[1, 3, 17]);
        }
        // warm-start identity: softmax of the stage-0 logits reproduces
        // the input distribution (log embedding + identity projections)
        let sm = stages[0].softmax(1).unwrap();
        for (a, b) in sm.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        // argmax of the final stage equals argmax of the input
        let labels = Refiner::final_labels(&stages);
        let xd = x.data();
        for (i, &l) in labels.iter().enumerate() {
            let mut best = 0;
            for c in 1..3 {
                if xd[c * 17 + i] > xd[best * 17 + i] {
                    best = c;
                }
            }
            assert_eq!(l, best, "frame {i}");
        }
    }

    #[test]
    fn zeroed_residual_layers_are_exact_identity() {
        let (refiner, mut store) = toy_refiner();
        // zero the dilated convolutions too: the whole stage becomes
        // embed -> identity layers -> extract
        for s in 0..3 {
            for j in 0..2 {
                let name = format!("tcn.s{s}.l{j}.conv.w");
                let n = store.get(&name).unwrap().numel();
                store.set_data(&name, vec![0.0; n]).unwrap();
            }
        }
        let x = soft_input(9, 2);
        let stages = refiner.forward(&x, &store.leaves()).unwrap();
        let expected = x.add_scalar(1e-6).ln();
        assert_eq!(stages[0].data(), expected.data());
    }

    #[test]
    fn perfect_constant_prediction_has_vanishing_loss() {
        let (refiner, _) = toy_refiner();
        let t = 6;
        // strongly one-hot class 2, constant over frames
        let mut data = vec![-100.0; 3 * t];
        for i in 0..t {
            data[2 * t + i] = 100.0;
        }
        let logits = Tensor::from_vec(&[1, 3, t], data).unwrap();
        let loss: f64 = refiner
            .refinement_loss(&[logits], &vec![2; t])
            .unwrap()
            .item();
        assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn constant_logits_zero_smoothing_term() {
        let (refiner, _) = toy_refiner();
        let t = 5;
        let mut data = vec![0.0; 3 * t];
        for i in 0..t {
            data[t + i] = 1.3; // class 1 everywhere
        }
        let logits = Tensor::from_vec(&[1, 3, t], data).unwrap();
        // loss reduces to pure CE; with the smoothing term removed the
        // value must be identical
        let full: f64 = refiner.refinement_loss(&[logits.clone()], &vec![1; t]).unwrap().item();
        let no_smooth = Refiner::new(RefinerConfig {
            lambda_s: 0.0,
            ..refiner.cfg.clone()
        })
        .unwrap()
        .refinement_loss(&[logits], &vec![1; t])
        .unwrap()
        .item();
        assert!((full - no_smooth).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_three_frame_case() {
        let refiner = Refiner::new(RefinerConfig {
            num_classes: 2,
            stages: 1,
            layers: 1,
            channels: 2,
            lambda_s: 0.15,
            tau: 4.0,
        })
        .unwrap();
        // logits [A=2, T=3]: class0 = [1, 0, -1], class1 = [0, 0, 2]
        let logits =
            Tensor::from_vec(&[1, 2, 3], vec![1.0, 0.0, -1.0, 0.0, 0.0, 2.0]).unwrap();
        let gt = vec![0usize, 1, 1];
        let got = refiner.refinement_loss(&[logits], &gt).unwrap().item();

        // independent scalar evaluation
        let lsm = |a: f64, b: f64| {
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            (a - lse, b - lse)
        };
        let f0 = lsm(1.0, 0.0);
        let f1 = lsm(0.0, 0.0);
        let f2 = lsm(-1.0, 2.0);
        let ce = -(f0.0 + f1.1 + f2.1) / 3.0;
        let sq = |x: f64| (x * x).min(16.0);
        let smooth =
            (sq(f1.0 - f0.0) + sq(f1.1 - f0.1) + sq(f2.0 - f1.0) + sq(f2.1 - f1.1)) / 4.0;
        let expected = ce + 0.15 * smooth;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.5951).abs() < 1e-3, "sanity: {got}");
    }

    #[test]
    fn gradients_through_all_stages_match_finite_differences() {
        use crate::tensor::gradcheck;
        let cfg = RefinerConfig {
            num_classes: 3,
            stages: 3,
            layers: 2,
            channels: 4,
            ..RefinerConfig::default()
        };
        let refiner = Refiner::new(cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        refiner.register(&mut store, 5);
        // randomize the zero-initialized residual projections so gradients
        // are informative
        let mut rng = Rng::new(6);
        for s in 0..3 {
            for j in 0..2 {
                for part in ["proj.w", "proj.b"] {
                    let name = format!("tcn.s{s}.l{j}.{part}");
                    let n = store.get(&name).unwrap().numel();
                    store
                        .set_data(&name, (0..n).map(|_| rng.normal_scaled(0.0, 0.3)).collect())
                        .unwrap();
                }
            }
        }
        let gt = vec![0usize, 2, 2, 1, 0, 1];
        let names = store.names();
        let shapes: Vec<Vec<usize>> = names
            .iter()
            .map(|n| store.get(n).unwrap().shape.clone())
            .collect();
        let mut all_shapes: Vec<&[usize]> = vec![&[1, 3, 6]];
        all_shapes.extend(shapes.iter().map(|s| s.as_slice()));
        let x = soft_input(6, 9);
        let mut inputs: Vec<Vec<f64>> = vec![x.to_vec()];
        inputs.extend(names.iter().map(|n| store.get(n).unwrap().data.to_vec()));
        let r = gradcheck::check_at(
            |xs| {
                let leaves: std::collections::BTreeMap<String, Tensor<f64>> = names
                    .iter()
                    .cloned()
                    .zip(xs[1..].iter().cloned())
                    .collect();
                let stages = refiner.forward(&xs[0], &leaves)?;
                refiner.refinement_loss(&stages, &gt)
            },
            &all_shapes,
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "rel err {}", r.max_rel_err);
    }
}
