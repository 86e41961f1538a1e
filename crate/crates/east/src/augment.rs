//! Proposal-drop augmentation: randomly delete K of the top-A most
//! confident proposals before aggregation, forcing the refiner to train
//! under higher uncertainty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;
use crate::types::ActionProposal;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Top pool size A.
    pub top_pool: usize,
    /// Deletions per draw, K < A.
    pub deletions: usize,
    /// Augmented variants generated per sample.
    pub draws: usize,
    /// Whether the unmodified set is included as variant 0.
    pub include_original: bool,
    /// Resample K uniformly from {1..deletions} per draw instead of fixed K.
    pub resample_k: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            top_pool: 30,
            deletions: 5,
            draws: 2,
            include_original: true,
            resample_k: false,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.top_pool == 0 {
            return Err(Error::Invalid("augment top pool A must be >= 1".into()));
        }
        if self.deletions >= self.top_pool {
            return Err(Error::Invalid(format!(
                "augment deletions K ({}) must be < top pool A ({})",
                self.deletions, self.top_pool
            )));
        }
        Ok(())
    }
}

/// Which proposals one draw removed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemovalReport {
    /// Indices into the input set, ascending.
    pub removed: Vec<usize>,
    /// Size of the top pool the removals were drawn from.
    pub pool_size: usize,
}

/// Indices of the top `min(A, N)` proposals by confidence; ties keep the
/// earlier index first.
fn top_pool(proposals: &[ActionProposal], a: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..proposals.len()).collect();
    idx.sort_by(|&i, &j| {
        proposals[j]
            .confidence
            .partial_cmp(&proposals[i].confidence)
            .unwrap()
            .then(i.cmp(&j))
    });
    idx.truncate(a);
    idx
}

/// One augmentation draw. Removals are sampled without replacement,
/// uniformly over the top pool; when N < A the pool is the whole set and
/// K is capped at N - 1 so at least one proposal survives. Proposal
/// contents are never modified, only set membership.
pub fn augment(
    proposals: &[ActionProposal],
    spec: &AugmentSpec,
    rng: &mut Rng,
) -> Result<(Vec<ActionProposal>, RemovalReport)> {
    spec.validate()?;
    if proposals.is_empty() {
        return Err(Error::Invalid("augment needs at least one proposal".into()));
    }
    let pool = top_pool(proposals, spec.top_pool);
    let k_cfg = if spec.resample_k && spec.deletions > 0 {
        1 + rng.below(spec.deletions)
    } else {
        spec.deletions
    };
    let k = k_cfg.min(pool.len()).min(proposals.len() - 1);
    let mut removed: Vec<usize> = rng
        .sample_distinct(pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    removed.sort_unstable();
    let removed_set: std::collections::BTreeSet<usize> = removed.iter().copied().collect();
    let survivors = proposals
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed_set.contains(i))
        .map(|(_, p)| p.clone())
        .collect();
    Ok((
        survivors,
        RemovalReport {
            removed,
            pool_size: pool.len(),
        },
    ))
}

/// Generate the augmented variants for one training sample. Draw `d` uses
/// the independent stream `derive(seed, "augment/<tag>/<d>")`, so draws
/// are reproducible and order-independent.
pub fn augmented_batches(
    proposals: &[ActionProposal],
    spec: &AugmentSpec,
    seed: u64,
    tag: &str,
) -> Result<Vec<(Vec<ActionProposal>, RemovalReport)>> {
    spec.validate()?;
    if spec.draws == 0 {
        return Err(Error::Invalid("augment draws must be >= 1".into()));
    }
    let mut out = Vec::new();
    if spec.include_original {
        out.push((
            proposals.to_vec(),
            RemovalReport {
                removed: vec![],
                pool_size: top_pool(proposals, spec.top_pool).len(),
            },
        ));
    }
    for d in 0..spec.draws {
        let mut rng = Rng::derive(seed, &format!("augment/{tag}/{d}"));
        out.push(augment(proposals, spec, &mut rng)?);
    }
    Ok(out)
}
