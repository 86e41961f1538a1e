//! Low-frame-rate anchor-free action detection.
//!
//! A shallow convolutional projection feeds a transformer encoder whose
//! levels are built by strided depthwise downsampling (a temporal feature
//! pyramid). Shared classification and regression heads run on every
//! level; per sampled frame the class logits of the containing cells are
//! averaged across levels, while boundary offsets are kept per level and
//! resolved by regression-range gating: training supervises the level
//! assigned from the ground-truth instance extent, inference picks the
//! finest level whose own prediction falls inside its range.

mod ap;
mod assign;
mod loss;

pub use ap::{detection_ap, nms, ApReport};
pub use assign::{assign_targets, PyramidSpec, RegressionTarget};
pub use loss::{detector_loss, diou_loss_1d, IndicatorMode};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{conv1d, dwconv1d, Element, Padding, ParamStore, Rng, Tensor};
use crate::types::ActionProposal;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Feature dimensionality of the input sequence.
    pub input_dim: usize,
    /// Encoder width.
    pub dim: usize,
    /// Pyramid level count L; level l runs at stride 2^l.
    pub levels: usize,
    pub heads: usize,
    /// Total classes A (actions + background at index 0).
    pub num_classes: usize,
    /// Level-0 regression cap, in sampled frames: level l covers max
    /// offsets in [base_range * 2^(l-1), base_range * 2^l) frames.
    pub base_range: f64,
    pub lambda_r: f64,
    pub focal_gamma: f64,
    pub indicator: IndicatorMode,
    /// Whether a proposal's confidence may come from the background entry.
    pub confidence_includes_background: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_dim: 32,
            dim: 64,
            levels: 4,
            heads: 4,
            num_classes: 9,
            base_range: 4.0,
            lambda_r: 1.0,
            focal_gamma: 2.0,
            indicator: IndicatorMode::GroundTruth,
            confidence_includes_background: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "detector dim ({}) must be divisible by heads ({})",
                self.dim, self.heads
            )));
        }
        if self.levels == 0 {
            return Err(Error::Invalid("detector needs at least one pyramid level".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Invalid(
                "need at least background plus one action class".into(),
            ));
        }
        if self.lambda_r < 0.0 {
            return Err(Error::Invalid(format!(
                "lambda_r must be non-negative, got {}",
                self.lambda_r
            )));
        }
        Ok(())
    }

    /// Max-offset gate `[lo, hi)` of a level, in seconds.
    pub fn level_range(&self, level: usize, frame_period: f64) -> (f64, f64) {
        let base = self.base_range * frame_period;
        let lo = if level == 0 {
            0.0
        } else {
            base * (1 << (level - 1)) as f64
        };
        let hi = if level + 1 == self.levels {
            f64::INFINITY
        } else {
            base * (1 << level) as f64
        };
        (lo, hi)
    }
}

/// Multiscale temporal features plus the timestamp mapping of the sampled
/// frames they were computed from.
pub struct FeaturePyramid<E: Element> {
    /// Level l: `[B, dim, ceil(T' / 2^l)]`.
    pub levels: Vec<Tensor<E>>,
    pub strides: Vec<usize>,
    pub timestamps: Vec<f64>,
    pub frame_period: f64,
}

impl<E: Element> FeaturePyramid<E> {
    pub fn t_prime(&self) -> usize {
        self.timestamps.len()
    }

    /// Source frame at the center of pyramid cell (level, j).
    pub fn center_frame(&self, level: usize, j: usize) -> usize {
        let s = self.strides[level];
        (j * s + s / 2).min(self.t_prime() - 1)
    }

    /// Timestamp of a pyramid cell = timestamp of its center source frame.
    pub fn cell_timestamp(&self, level: usize, j: usize) -> f64 {
        self.timestamps[self.center_frame(level, j)]
    }

    /// Index of the level-`level` cell whose timestamp is nearest to `t`.
    pub fn nearest_cell(&self, level: usize, t: f64) -> usize {
        let n = self.levels[level].shape()[2];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            let d = (self.cell_timestamp(level, j) - t).abs();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }
}

/// Differentiable detector outputs plus the decode metadata.
pub struct DetectorOutput<E: Element> {
    /// Level-averaged class logits, `[B, A, T']`.
    pub class_logits: Tensor<E>,
    /// Per-level boundary offsets in seconds (after softplus and stride
    /// scaling), each `[B, 2, T']` upsampled to the frame grid.
    pub level_offsets: Vec<Tensor<E>>,
    pub timestamps: Vec<f64>,
    pub frame_period: f64,
}

/// Plain per-frame prediction: one class distribution and one offset pair
/// (the range-consistent level's), per sampled frame.
#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub pi: Vec<f64>,
    pub d_start: f64,
    pub d_end: f64,
    pub level: usize,
}

pub struct Detector {
    pub cfg: DetectorConfig,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Detector { cfg })
    }

    pub fn register<E: Element>(&self, store: &mut ParamStore<E>, seed: u64) {
        let cfg = &self.cfg;
        let (din, d) = (cfg.input_dim, cfg.dim);
        let mut rng = Rng::derive(seed, "detector");
        let std_in = (din as f64 * 3.0).sqrt().recip();
        let std_d = (d as f64 * 3.0).sqrt().recip();
        store.insert(
            "det.proj1.w",
            &[d, din, 3],
            nn::randn_vec(d * din * 3, std_in, &mut rng),
            true,
        );
        store.insert("det.proj1.b", &[d], vec![E::zero(); d], true);
        store.insert(
            "det.proj2.w",
            &[d, d, 3],
            nn::randn_vec(d * d * 3, std_d, &mut rng),
            true,
        );
        store.insert("det.proj2.b", &[d], vec![E::zero(); d], true);
        for l in 0..cfg.levels {
            if l > 0 {
                store.insert(
                    &format!("det.down{l}.k"),
                    &[d, 3],
                    nn::randn_vec(d * 3, (3.0f64).sqrt().recip(), &mut rng),
                    true,
                );
            }
            nn::register_block(store, &format!("det.b{l}"), d, 2, &mut rng, true);
        }
        // shared heads; final projections zero so untrained output is the
        // uniform distribution and near-zero offsets
        for head in ["cls", "reg"] {
            store.insert(
                &format!("det.{head}1.w"),
                &[d, d, 3],
                nn::randn_vec(d * d * 3, std_d, &mut rng),
                true,
            );
            store.insert(&format!("det.{head}1.b"), &[d], vec![E::zero(); d], true);
        }
        let a = cfg.num_classes;
        store.insert("det.cls2.w", &[a, d, 1], vec![E::zero(); a * d], true);
        store.insert("det.cls2.b", &[a], vec![E::zero(); a], true);
        store.insert("det.reg2.w", &[2, d, 1], vec![E::zero(); 2 * d], true);
        store.insert("det.reg2.b", &[2], vec![E::zero(); 2], true);
    }

    /// Build the pyramid from input features `x: [B, T', D]` whose rows
    /// correspond to `timestamps` (strictly increasing, uniform spacing).
    pub fn build_pyramid<E: Element>(
        &self,
        x: &Tensor<E>,
        timestamps: &[f64],
        leaves: &BTreeMap<String, Tensor<E>>,
    ) -> Result<FeaturePyramid<E>> {
        let cfg = &self.cfg;
        if x.rank() != 3 || x.shape()[2] != cfg.input_dim {
            return Err(Error::shape(
                "build_pyramid",
                format!("expected [B,T',{}], got {:?}", cfg.input_dim, x.shape()),
            ));
        }
        let t = x.shape()[1];
        if t != timestamps.len() {
            return Err(Error::shape(
                "build_pyramid",
                format!("{t} feature rows vs {} timestamps", timestamps.len()),
            ));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("timestamps must be strictly increasing".into()));
        }
        let min_t = 1usize << (cfg.levels - 1);
        if t < min_t {
            let max_l = (usize::BITS - (t.leading_zeros())) as usize; // floor(log2(t)) + 1
            return Err(Error::Data(format!(
                "T' = {t} is too small for {} pyramid levels; max feasible L = {max_l}",
                cfg.levels
            )));
        }
        let frame_period = if t > 1 {
            (timestamps[t - 1] - timestamps[0]) / (t - 1) as f64
        } else {
            1.0
        };

        // shallow convolutional projection
        let seq = x.permute(&[0, 2, 1])?; // [B, D, T']
        let h = conv1d(&seq, &leaves["det.proj1.w"], Some(&leaves["det.proj1.b"]), 1, Padding::Same)?
            .relu();
        let h = conv1d(&h, &leaves["det.proj2.w"], Some(&leaves["det.proj2.b"]), 1, Padding::Same)?
            .relu();

        let mut levels = Vec::with_capacity(cfg.levels);
        let mut strides = Vec::with_capacity(cfg.levels);
        let mut cur = h;
        for l in 0..cfg.levels {
            if l > 0 {
                cur = dwconv1d(&cur, &leaves[&format!("det.down{l}.k")], 2, 1, Padding::Same)?;
            }
            let tl = cur.shape()[2];
            let tokens = cur.permute(&[0, 2, 1])?; // [B, T_l, dim]
            let tokens = tokens.add(&nn::sinusoidal_pe(tl, cfg.dim))?;
            let out = nn::forward_block(&tokens, &format!("det.b{l}"), leaves, cfg.heads)?;
            cur = out.permute(&[0, 2, 1])?; // [B, dim, T_l]
            levels.push(cur.clone());
            strides.push(1 << l);
            debug_assert_eq!(tl, t.div_ceil(1 << l));
        }
        Ok(FeaturePyramid {
            levels,
            strides,
            timestamps: timestamps.to_vec(),
            frame_period,
        })
    }

    /// Run the shared heads over every level and assemble per-frame
    /// predictions: class logits averaged over the containing cells of all
    /// levels, offsets per level in seconds.
    pub fn predict<E: Element>(
        &self,
        pyramid: &FeaturePyramid<E>,
        leaves: &BTreeMap<String, Tensor<E>>,
    ) -> Result<DetectorOutput<E>> {
        let cfg = &self.cfg;
        let t = pyramid.t_prime();
        let mut cls_sum: Option<Tensor<E>> = None;
        let mut level_offsets = Vec::with_capacity(cfg.levels);
        for (l, z) in pyramid.levels.iter().enumerate() {
            let stride = pyramid.strides[l];
            let c1 = conv1d(z, &leaves["det.cls1.w"], Some(&leaves["det.cls1.b"]), 1, Padding::Same)?
                .relu();
            let logits = conv1d(&c1, &leaves["det.cls2.w"], Some(&leaves["det.cls2.b"]), 1, Padding::Same)?;
            let up = logits.upsample_linear(2, stride, t)?;
            cls_sum = Some(match cls_sum {
                None => up,
                Some(acc) => acc.add(&up)?,
            });

            let r1 = conv1d(z, &leaves["det.reg1.w"], Some(&leaves["det.reg1.b"]), 1, Padding::Same)?
                .relu();
            let raw = conv1d(&r1, &leaves["det.reg2.w"], Some(&leaves["det.reg2.b"]), 1, Padding::Same)?;
            let scale = stride as f64 * pyramid.frame_period;
            let offsets = raw.softplus().scale(scale).upsample_linear(2, stride, t)?;
            level_offsets.push(offsets);
        }
        let class_logits = cls_sum.unwrap().scale(1.0 / cfg.levels as f64);
        Ok(DetectorOutput {
            class_logits,
            level_offsets,
            timestamps: pyramid.timestamps.clone(),
            frame_period: pyramid.frame_period,
        })
    }

    /// Plain per-frame view of the detector output (batch size must be 1):
    /// softmaxed class distribution and the offsets of the finest level
    /// whose own predicted extent falls inside its regression range.
    pub fn frame_predictions<E: Element>(&self, out: &DetectorOutput<E>) -> Result<Vec<FramePrediction>> {
        let cfg = &self.cfg;
        let sh = out.class_logits.shape();
        if sh[0] != 1 {
            return Err(Error::Invalid(format!(
                "frame_predictions expects batch size 1, got {}",
                sh[0]
            )));
        }
        let (a, t) = (sh[1], sh[2]);
        let logits = out.class_logits.data();
        let offsets: Vec<&[E]> = out.level_offsets.iter().map(|o| o.data()).collect();
        let mut preds = Vec::with_capacity(t);
        for i in 0..t {
            // softmax over the class lane
            let mut mx = f64::NEG_INFINITY;
            for c in 0..a {
                mx = mx.max(logits[c * t + i].as_f64());
            }
            let mut pi: Vec<f64> = (0..a)
                .map(|c| (logits[c * t + i].as_f64() - mx).exp())
                .collect();
            let sum: f64 = pi.iter().sum();
            for v in pi.iter_mut() {
                *v /= sum;
            }
            // finest range-consistent level, else the coarsest
            let mut chosen = cfg.levels - 1;
            for l in 0..cfg.levels {
                let ds = offsets[l][i].as_f64();
                let de = offsets[l][t + i].as_f64();
                let extent = ds.max(de);
                let (lo, hi) = cfg.level_range(l, out.frame_period);
                if extent >= lo && extent < hi {
                    chosen = l;
                    break;
                }
            }
            preds.push(FramePrediction {
                pi,
                d_start: offsets[chosen][i].as_f64(),
                d_end: offsets[chosen][t + i].as_f64(),
                level: chosen,
            });
        }
        Ok(preds)
    }
}

/// Decode diagnostics: degenerate intervals are clamped to a minimum
/// width of half a sampled-frame period and counted here.
#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeDiagnostics {
    pub degenerate_intervals: usize,
}

/// Map per-frame predictions to proposals (`t_s = t_i - d_s`,
/// `t_e = t_i + d_e`) plus the initial labeling (per-frame argmax).
/// Boundaries depend only on timestamps and offsets, never on frame-rate
/// metadata.
pub fn decode_proposals(
    preds: &[FramePrediction],
    timestamps: &[f64],
    confidence_includes_background: bool,
) -> Result<(Vec<ActionProposal>, Vec<usize>, DecodeDiagnostics)> {
    if preds.len() != timestamps.len() {
        return Err(Error::shape(
            "decode_proposals",
            format!("{} predictions vs {} timestamps", preds.len(), timestamps.len()),
        ));
    }
    if timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data("timestamps must be strictly increasing".into()));
    }
    let frame_period = if timestamps.len() > 1 {
        (timestamps[timestamps.len() - 1] - timestamps[0]) / (timestamps.len() - 1) as f64
    } else {
        1.0
    };
    let min_width = 0.5 * frame_period;
    let mut diagnostics = DecodeDiagnostics::default();
    let mut proposals = Vec::with_capacity(preds.len());
    let mut labels = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        let t = timestamps[i];
        let mut s = t - p.d_start;
        let mut e = t + p.d_end;
        if e - s < min_width {
            diagnostics.degenerate_intervals += 1;
            let c = 0.5 * (s + e);
            s = c - 0.5 * min_width;
            e = c + 0.5 * min_width;
        }
        let confidence = if confidence_includes_background {
            p.pi.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            p.pi[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        };
        let mut label = 0;
        for (c, &v) in p.pi.iter().enumerate() {
            if v > p.pi[label] {
                label = c;
            }
        }
        labels.push(label);
        proposals.push(ActionProposal {
            t_start: s,
            t_end: e,
            dist: p.pi.clone(),
            confidence,
            source_frame: i,
            source_level: p.level,
        });
    }
    Ok((proposals, labels, diagnostics))
}
