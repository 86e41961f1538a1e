//! Small reusable network pieces: a pre-norm transformer block and
//! sinusoidal positional encodings, parameterized through a [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::{attention, linear, Element, ParamStore, Rng, Tensor};

pub fn randn_vec<E: Element>(n: usize, std: f64, rng: &mut Rng) -> Vec<E> {
    (0..n).map(|_| E::of_f64(rng.normal_scaled(0.0, std))).collect()
}

/// Register a pre-norm transformer block (attention + MLP, both with
/// residuals) under `prefix`.
pub fn register_block<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    dim: usize,
    mlp_ratio: usize,
    rng: &mut Rng,
    trainable: bool,
) {
    let c = dim;
    let hidden = mlp_ratio * c;
    let std_c = (c as f64).sqrt().recip();
    store.insert(
        &format!("{prefix}.qkv.w"),
        &[c, 3 * c],
        randn_vec(c * 3 * c, std_c, rng),
        trainable,
    );
    store.insert(&format!("{prefix}.qkv.b"), &[3 * c], vec![E::zero(); 3 * c], trainable);
    store.insert(
        &format!("{prefix}.proj.w"),
        &[c, c],
        randn_vec(c * c, std_c, rng),
        trainable,
    );
    store.insert(&format!("{prefix}.proj.b"), &[c], vec![E::zero(); c], trainable);
    store.insert(
        &format!("{prefix}.mlp1.w"),
        &[c, hidden],
        randn_vec(c * hidden, std_c, rng),
        trainable,
    );
    store.insert(&format!("{prefix}.mlp1.b"), &[hidden], vec![E::zero(); hidden], trainable);
    store.insert(
        &format!("{prefix}.mlp2.w"),
        &[hidden, c],
        randn_vec(hidden * c, (hidden as f64).sqrt().recip(), rng),
        trainable,
    );
    store.insert(&format!("{prefix}.mlp2.b"), &[c], vec![E::zero(); c], trainable);
    for ln in ["ln1", "ln2"] {
        store.insert(&format!("{prefix}.{ln}.g"), &[c], vec![E::one(); c], trainable);
        store.insert(&format!("{prefix}.{ln}.s"), &[c], vec![E::zero(); c], trainable);
    }
}

/// Forward through a block registered by [`register_block`].
/// `tokens: [B, N, C]`.
pub fn forward_block<E: Element>(
    tokens: &Tensor<E>,
    prefix: &str,
    leaves: &BTreeMap<String, Tensor<E>>,
    heads: usize,
) -> Result<Tensor<E>> {
    let (b, n, c) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let dh = c / heads;
    let ln = |x: &Tensor<E>, which: &str| -> Result<Tensor<E>> {
        x.layer_norm(2)?
            .mul(&leaves[&format!("{prefix}.{which}.g")])?
            .add(&leaves[&format!("{prefix}.{which}.s")])
    };
    let normed = ln(tokens, "ln1")?;
    let qkv = linear(
        &normed,
        &leaves[&format!("{prefix}.qkv.w")],
        Some(&leaves[&format!("{prefix}.qkv.b")]),
    )?
    .reshape(&[b, n, 3, heads, dh])?
    .permute(&[2, 0, 3, 1, 4])?; // [3, B, heads, N, dh]
    let q = qkv.slice(0, 0, 1)?.reshape(&[b, heads, n, dh])?;
    let k = qkv.slice(0, 1, 1)?.reshape(&[b, heads, n, dh])?;
    let v = qkv.slice(0, 2, 1)?.reshape(&[b, heads, n, dh])?;
    let att = attention(&q, &k, &v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, c])?;
    let att = linear(
        &att,
        &leaves[&format!("{prefix}.proj.w")],
        Some(&leaves[&format!("{prefix}.proj.b")]),
    )?;
    let x = tokens.add(&att)?;

    let normed = ln(&x, "ln2")?;
    let h = linear(
        &normed,
        &leaves[&format!("{prefix}.mlp1.w")],
        Some(&leaves[&format!("{prefix}.mlp1.b")]),
    )?
    .gelu();
    let h = linear(
        &h,
        &leaves[&format!("{prefix}.mlp2.w")],
        Some(&leaves[&format!("{prefix}.mlp2.b")]),
    )?;
    x.add(&h)
}

/// Deterministic sinusoidal positional encoding, shape `[n, c]`.
pub fn sinusoidal_pe<E: Element>(n: usize, c: usize) -> Tensor<E> {
    let mut data = Vec::with_capacity(n * c);
    for pos in 0..n {
        for i in 0..c {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / c as f64);
            let angle = pos as f64 * freq;
            data.push(E::of_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(&[n, c], data).expect("consistent by construction")
}
