//! Adam optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use super::{Element, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moments are kept in f64 regardless of the
/// parameter precision so that two runs from the same state are
/// bit-identical.
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter present in `grads`.
    /// A NaN or infinite gradient rejects the whole step.
    pub fn step<E: Element>(
        &mut self,
        params: &mut ParamStore<E>,
        grads: &BTreeMap<String, Vec<E>>,
    ) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {name}; step rejected"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, g) in grads {
            if !params.is_trainable(name) {
                continue;
            }
            let p = params.get(name)?;
            let n = p.numel();
            if g.len() != n {
                return Err(Error::shape(
                    "adam",
                    format!("{name}: gradient has {} elements, parameter {}", g.len(), n),
                ));
            }
            let mom = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let mut new_data = Vec::with_capacity(n);
            for i in 0..n {
                let gi = g[i].as_f64();
                mom.m[i] = self.cfg.beta1 * mom.m[i] + (1.0 - self.cfg.beta1) * gi;
                mom.v[i] = self.cfg.beta2 * mom.v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                let upd = self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                new_data.push(E::of_f64(p.data[i].as_f64() - upd));
            }
            params.set_data(name, new_data)?;
        }
        Ok(())
    }

    /// Serialize moments as named f32 arrays (`adam.m.<name>` etc.) plus a
    /// step counter. Each f64 moment is stored losslessly as two f32 bit
    /// patterns (hi word, lo word) so a resumed run is bit-identical.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let pack = |xs: &[f64]| -> Vec<f32> {
            let mut out = Vec::with_capacity(xs.len() * 2);
            for &x in xs {
                let bits = x.to_bits();
                out.push(f32::from_bits((bits >> 32) as u32));
                out.push(f32::from_bits(bits as u32));
            }
            out
        };
        let mut out = Vec::new();
        out.push((
            "adam.step".to_string(),
            vec![2],
            vec![
                f32::from_bits((self.step >> 32) as u32),
                f32::from_bits(self.step as u32),
            ],
        ));
        for (name, mom) in &self.state {
            out.push((format!("adam.m.{name}"), vec![mom.m.len(), 2], pack(&mom.m)));
            out.push((format!("adam.v.{name}"), vec![mom.v.len(), 2], pack(&mom.v)));
        }
        out
    }

    pub fn import(cfg: AdamConfig, entries: &[(String, Vec<usize>, Vec<f32>)]) -> Result<Self> {
        let unpack = |data: &[f32]| -> Vec<f64> {
            data.chunks(2)
                .map(|pair| {
                    let bits = ((pair[0].to_bits() as u64) << 32) | pair[1].to_bits() as u64;
                    f64::from_bits(bits)
                })
                .collect()
        };
        let mut adam = Adam::new(cfg);
        let mut halves: BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
        for (name, _, data) in entries {
            if name == "adam.step" {
                adam.step = ((data[0].to_bits() as u64) << 32) | data[1].to_bits() as u64;
            } else if let Some(rest) = name.strip_prefix("adam.m.") {
                halves.entry(rest.to_string()).or_default().0 = Some(unpack(data));
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                halves.entry(rest.to_string()).or_default().1 = Some(unpack(data));
            }
        }
        for (name, (m, v)) in halves {
            let (m, v) = match (m, v) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::Data(format!("incomplete optimizer state for {name}"))),
            };
            adam.state.insert(name, Moments { m, v });
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(theta: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", &[1], vec![theta], true);
        s
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut s = store_with(1.5);
        let mut adam = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        adam.step(&mut s, &grads).unwrap();
        assert_eq!(s.get("w").unwrap().data[0], 1.5);
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        // theta=1, g=0.5, lr=0.1: m=0.05, v=2.5e-4, m_hat=0.5, v_hat=0.25
        // theta' = 1 - 0.1 * 0.5 / (0.5 + 1e-8)
        let mut s = store_with(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5]);
        adam.step(&mut s, &grads).unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((s.get("w").unwrap().data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_grad_rejected() {
        let mut s = store_with(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![f64::NAN]);
        assert!(adam.step(&mut s, &grads).is_err());
        assert_eq!(s.get("w").unwrap().data[0], 1.0);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut s = store_with(0.3);
            let mut adam = Adam::new(AdamConfig::default());
            for i in 0..50 {
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), vec![(i as f64 * 0.13).sin()]);
                adam.step(&mut s, &grads).unwrap();
            }
            s.get("w").unwrap().data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn export_import_roundtrip() {
        let mut s = store_with(0.3);
        let mut adam = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.7]);
        adam.step(&mut s, &grads).unwrap();
        let dump = adam.export();
        let mut adam2 = Adam::import(adam.cfg, &dump).unwrap();
        // both continue identically
        let mut s2 = s.clone();
        adam.step(&mut s, &grads).unwrap();
        adam2.step(&mut s2, &grads).unwrap();
        assert_eq!(
            s.get("w").unwrap().data[0].to_bits(),
            s2.get("w").unwrap().data[0].to_bits()
        );
    }
}
