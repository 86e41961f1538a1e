//! Toy video backbone: a small transformer over spatiotemporal patch
//! tokens, with adapters optionally inserted between blocks. Also owns the
//! precomputed-feature file format that bypasses the backbone entirely.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    adapter_forward, adapter_param_names, adapter_tensors, register_adapter, AdapterConfig,
    AdapterInit, AdapterKind,
};
use crate::error::{Error, Result};
use crate::tensor::{attention, linear, Element, ParamStore, Rng, Tensor};

/// Where adapters sit inside each transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInsertion {
    AfterAttention,
    AfterMlp,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    /// Token channel count C.
    pub dim: usize,
    pub heads: usize,
    /// Temporal window size w: each token consumes w consecutive frames.
    pub patch_temporal: usize,
    /// Spatial patch size p.
    pub patch_spatial: usize,
    pub adapter: AdapterConfig,
    pub insertion: AdapterInsertion,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            patch_temporal: 16,
            patch_spatial: 10,
            adapter: AdapterConfig::default(),
            insertion: AdapterInsertion::AfterMlp,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "backbone dim ({}) must be divisible by heads ({})",
                self.dim, self.heads
            )));
        }
        if self.adapter.kind != AdapterKind::None {
            if self.adapter.channels != self.dim {
                return Err(Error::Invalid(format!(
                    "adapter channels ({}) must equal backbone dim ({})",
                    self.adapter.channels, self.dim
                )));
            }
            self.adapter.validate()?;
        }
        Ok(())
    }

    fn adapter_prefixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.adapter.kind == AdapterKind::None {
            return out;
        }
        for b in 0..self.depth {
            match self.insertion {
                AdapterInsertion::AfterAttention => out.push(format!("adapter.b{b}.attn")),
                AdapterInsertion::AfterMlp => out.push(format!("adapter.b{b}.mlp")),
                AdapterInsertion::Both => {
                    out.push(format!("adapter.b{b}.attn"));
                    out.push(format!("adapter.b{b}.mlp"));
                }
            }
        }
        out
    }

    /// Names of every adapter parameter (the trainable set when the
    /// backbone is frozen).
    pub fn adapter_parameter_names(&self) -> Vec<String> {
        self.adapter_prefixes()
            .iter()
            .flat_map(|p| adapter_param_names(p, self.adapter.kind))
            .collect()
    }
}

/// Synthetic clip batch: values in [0,1], shape `[B, 3, Tclip, H, W]`.
#[derive(Debug, Clone)]
pub struct ClipBatch<E: Element> {
    pub values: Tensor<E>,
    /// Timestamp (seconds in the source video) of each clip frame.
    pub timestamps: Vec<f64>,
}

impl<E: Element> ClipBatch<E> {
    pub fn new(values: Tensor<E>, timestamps: Vec<f64>) -> Result<Self> {
        if values.rank() != 5 || values.shape()[1] != 3 {
            return Err(Error::shape(
                "clip_batch",
                format!("expected [B,3,T,H,W], got {:?}", values.shape()),
            ));
        }
        if values.shape()[2] != timestamps.len() {
            return Err(Error::shape(
                "clip_batch",
                format!(
                    "{} frames vs {} timestamps",
                    values.shape()[2],
                    timestamps.len()
                ),
            ));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("clip timestamps must be strictly increasing".into()));
        }
        Ok(ClipBatch { values, timestamps })
    }
}

pub struct Backbone {
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Backbone { cfg })
    }

    /// Register backbone (and adapter) parameters. Backbone weights come
    /// from the `"backbone"` stream of `seed`, adapters from the
    /// `"adapter"` stream, so backbone weights are identical across adapter
    /// kinds. With `freeze_backbone`, only adapter parameters record
    /// gradients.
    pub fn register<E: Element>(
        &self,
        store: &mut ParamStore<E>,
        seed: u64,
        freeze_backbone: bool,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let c = cfg.dim;
        let mut rng = Rng::derive(seed, "backbone");
        let patch_in = 3 * cfg.patch_temporal * cfg.patch_spatial * cfg.patch_spatial;
        let train = !freeze_backbone;
        let std_patch = (patch_in as f64).sqrt().recip();
        store.insert(
            "bb.patch.w",
            &[patch_in, c],
            (0..patch_in * c)
                .map(|_| E::of_f64(rng.normal_scaled(0.0, std_patch)))
                .collect(),
            train,
        );
        store.insert("bb.patch.b", &[c], vec![E::zero(); c], train);
        fn randn_vec<E: Element>(n: usize, std: f64, rng: &mut Rng) -> Vec<E> {
            (0..n).map(|_| E::of_f64(rng.normal_scaled(0.0, std))).collect()
        }
        let std_c = (c as f64).sqrt().recip();
        let std_mlp2 = (4.0 * c as f64).sqrt().recip();
        for b in 0..cfg.depth {
            store.insert(
                &format!("bb.b{b}.qkv.w"),
                &[c, 3 * c],
                randn_vec(c * 3 * c, std_c, &mut rng),
                train,
            );
            store.insert(&format!("bb.b{b}.qkv.b"), &[3 * c], vec![E::zero(); 3 * c], train);
            store.insert(
                &format!("bb.b{b}.proj.w"),
                &[c, c],
                randn_vec(c * c, std_c, &mut rng),
                train,
            );
            store.insert(&format!("bb.b{b}.proj.b"), &[c], vec![E::zero(); c], train);
            store.insert(
                &format!("bb.b{b}.mlp1.w"),
                &[c, 4 * c],
                randn_vec(c * 4 * c, std_c, &mut rng),
                train,
            );
            store.insert(&format!("bb.b{b}.mlp1.b"), &[4 * c], vec![E::zero(); 4 * c], train);
            store.insert(
                &format!("bb.b{b}.mlp2.w"),
                &[4 * c, c],
                randn_vec(4 * c * c, std_mlp2, &mut rng),
                train,
            );
            store.insert(&format!("bb.b{b}.mlp2.b"), &[c], vec![E::zero(); c], train);
            for ln in ["ln1", "ln2"] {
                store.insert(&format!("bb.b{b}.{ln}.g"), &[c], vec![E::one(); c], train);
                store.insert(&format!("bb.b{b}.{ln}.s"), &[c], vec![E::zero(); c], train);
            }
        }
        let mut arng = Rng::derive(seed, "adapter");
        for prefix in cfg.adapter_prefixes() {
            register_adapter(
                store,
                &prefix,
                &cfg.adapter,
                AdapterInit::Trainable,
                &mut arng,
                true,
            )?;
        }
        Ok(())
    }

    /// Tokenize a clip: non-overlapping `w x p x p` patches, linearly
    /// projected to C channels. Output `[B, C, T, H', W']` with
    /// `T = Tclip / w`, `H' = H / p`, `W' = W / p`.
    pub fn patch_embed<E: Element>(
        &self,
        clip: &ClipBatch<E>,
        leaves: &BTreeMap<String, Tensor<E>>,
    ) -> Result<Tensor<E>> {
        let sh = clip.values.shape();
        let (b, tc, h, w) = (sh[0], sh[2], sh[3], sh[4]);
        let (wt, p) = (self.cfg.patch_temporal, self.cfg.patch_spatial);
        if tc % wt != 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Invalid(format!(
                "clip extents (T={tc}, H={h}, W={w}) not divisible by patch sizes (w={wt}, p={p})"
            )));
        }
        let (t, hp, wp) = (tc / wt, h / p, w / p);
        // [B,3,T,w,H',p,W',p] -> [B,T,H',W',3,w,p,p] -> [B,T,H',W', 3*w*p*p]
        let x = clip
            .values
            .reshape(&[b, 3, t, wt, hp, p, wp, p])?
            .permute(&[0, 2, 4, 6, 1, 3, 5, 7])?
            .reshape(&[b, t, hp, wp, 3 * wt * p * p])?;
        let tok = linear(&x, &leaves["bb.patch.w"], Some(&leaves["bb.patch.b"]))?;
        tok.permute(&[0, 4, 1, 2, 3]) // [B,C,T,H',W']
    }

    /// Run the block stack with adapters at the configured insertion
    /// points. Input and output are `[B, C, T, H', W']`.
    pub fn forward_with_adapters<E: Element>(
        &self,
        grid: &Tensor<E>,
        leaves: &BTreeMap<String, Tensor<E>>,
    ) -> Result<Tensor<E>> {
        let cfg = &self.cfg;
        if grid.rank() != 5 || grid.shape()[1] != cfg.dim {
            return Err(Error::shape(
                "backbone_forward",
                format!("expected [B,{},T,H',W'], got {:?}", cfg.dim, grid.shape()),
            ));
        }
        let (b, c, t, hp, wp) = (
            grid.shape()[0],
            grid.shape()[1],
            grid.shape()[2],
            grid.shape()[3],
            grid.shape()[4],
        );
        let n = t * hp * wp;
        let mut tokens = grid.permute(&[0, 2, 3, 4, 1])?.reshape(&[b, n, c])?;
        tokens = tokens.add(&sinusoidal_pe::<E>(n, c))?;

        let has_adapter = |prefix: &str| leaves.contains_key(&format!("{prefix}.down"));
        let to_grid = |x: &Tensor<E>| -> Result<Tensor<E>> {
            x.reshape(&[b, t, hp, wp, c])?.permute(&[0, 4, 1, 2, 3])
        };
        let to_tokens = |x: &Tensor<E>| -> Result<Tensor<E>> {
            x.permute(&[0, 2, 3, 4, 1])?.reshape(&[b, n, c])
        };

        for blk in 0..cfg.depth {
            let pre = format!("bb.b{blk}");
            let ln = |x: &Tensor<E>, which: &str| -> Result<Tensor<E>> {
                x.layer_norm(2)?
                    .mul(&leaves[&format!("{pre}.{which}.g")])?
                    .add(&leaves[&format!("{pre}.{which}.s")])
            };
            // attention sublayer
            let normed = ln(&tokens, "ln1")?;
            let qkv = linear(&normed, &leaves[&format!("{pre}.qkv.w")], Some(&leaves[&format!("{pre}.qkv.b")]))?;
            let dh = c / cfg.heads;
            let qkv = qkv
                .reshape(&[b, n, 3, cfg.heads, dh])?
                .permute(&[2, 0, 3, 1, 4])?; // [3, B, heads, N, dh]
            let q = qkv.slice(0, 0, 1)?.reshape(&[b, cfg.heads, n, dh])?;
            let k = qkv.slice(0, 1, 1)?.reshape(&[b, cfg.heads, n, dh])?;
            let v = qkv.slice(0, 2, 1)?.reshape(&[b, cfg.heads, n, dh])?;
            let att = attention(&q, &k, &v)?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b, n, c])?;
            let att = linear(&att, &leaves[&format!("{pre}.proj.w")], Some(&leaves[&format!("{pre}.proj.b")]))?;
            tokens = tokens.add(&att)?;

            let attn_prefix = format!("adapter.b{blk}.attn");
            if has_adapter(&attn_prefix) {
                let p = adapter_tensors(leaves, &attn_prefix, cfg.adapter.kind)?;
                tokens = to_tokens(&adapter_forward(&to_grid(&tokens)?, &p, &cfg.adapter)?)?;
            }

            // mlp sublayer
            let normed = ln(&tokens, "ln2")?;
            let h1 = linear(&normed, &leaves[&format!("{pre}.mlp1.w")], Some(&leaves[&format!("{pre}.mlp1.b")]))?
                .gelu();
            let h2 = linear(&h1, &leaves[&format!("{pre}.mlp2.w")], Some(&leaves[&format!("{pre}.mlp2.b")]))?;
            tokens = tokens.add(&h2)?;

            let mlp_prefix = format!("adapter.b{blk}.mlp");
            if has_adapter(&mlp_prefix) {
                let p = adapter_tensors(leaves, &mlp_prefix, cfg.adapter.kind)?;
                tokens = to_tokens(&adapter_forward(&to_grid(&tokens)?, &p, &cfg.adapter)?)?;
            }
        }
        to_grid(&tokens)
    }

    /// Full clip path: tokenize, run blocks, spatially mean-pool to
    /// detector-ready features `[B, T, C]` plus per-feature timestamps
    /// (the mean of each temporal window's frame timestamps).
    pub fn features_for_clip<E: Element>(
        &self,
        clip: &ClipBatch<E>,
        leaves: &BTreeMap<String, Tensor<E>>,
    ) -> Result<(Tensor<E>, Vec<f64>)> {
        let grid = self.patch_embed(clip, leaves)?;
        let out = self.forward_with_adapters(&grid, leaves)?;
        let pooled = out.mean_pool(&[3, 4])?; // [B,C,T]
        let feats = pooled.permute(&[0, 2, 1])?; // [B,T,C]
        let w = self.cfg.patch_temporal;
        let ts: Vec<f64> = clip
            .timestamps
            .chunks(w)
            .map(|chunk| chunk.iter().sum::<f64>() / chunk.len() as f64)
            .collect();
        Ok((feats, ts))
    }
}

/// Deterministic sinusoidal positional encoding, shape `[n, c]`.
fn sinusoidal_pe<E: Element>(n: usize, c: usize) -> Tensor<E> {
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

// ---------------------------------------------------------------------------
// Precomputed feature files
// ---------------------------------------------------------------------------

pub const FEATURE_MAGIC: [u8; 4] = *b"EASF";
pub const FEATURE_VERSION: u32 = 1;

/// Features of one video at the sampled (low) frame rate: `T'` rows of
/// `dim` channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub dim: usize,
    pub fps: f32,
    pub data: Vec<f32>,
}

impl FeatureFile {
    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    /// Sampled-frame timestamps: frame centers at `(i + 0.5) / fps`. This
    /// is the single timestamp convention used everywhere in the pipeline.
    pub fn timestamps(&self) -> Vec<f64> {
        let fps = self.fps as f64;
        (0..self.num_frames()).map(|i| (i as f64 + 0.5) / fps).collect()
    }

    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let data: Vec<E> = self.data.iter().map(|&v| E::of_f64(v as f64)).collect();
        Tensor::from_vec(&[self.num_frames(), self.dim], data).expect("consistent by construction")
    }
}

/// JSON sidecar stored next to each feature file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureSidecar {
    pub video_id: String,
    pub fps: f32,
    pub num_frames_original: usize,
}

pub fn save_features(path: &Path, f: &FeatureFile) -> Result<()> {
    if f.dim == 0 || f.data.len() % f.dim != 0 {
        return Err(Error::Invalid(format!(
            "feature payload ({}) is not a multiple of dim ({})",
            f.data.len(),
            f.dim
        )));
    }
    let mut buf = Vec::with_capacity(24 + f.data.len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(f.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(f.num_frames() as u64).to_le_bytes());
    buf.extend_from_slice(&f.fps.to_le_bytes());
    for &v in &f.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureFile> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 4];
    file.read_exact(&mut head)
        .map_err(|_| Error::format(path, "truncated payload while reading magic"))?;
    if head != FEATURE_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {:?}", head, FEATURE_MAGIC),
        ));
    }
    let mut rd = |n: usize, what: &str| -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        file.read_exact(&mut b)
            .map_err(|_| Error::format(path, format!("truncated payload while reading {what}")))?;
        Ok(b)
    };
    let version = u32::from_le_bytes(rd(4, "version")?.try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {FEATURE_VERSION}"),
        ));
    }
    let dim = u32::from_le_bytes(rd(4, "dim")?.try_into().unwrap()) as usize;
    let frames = u64::from_le_bytes(rd(8, "frame count")?.try_into().unwrap()) as usize;
    let fps = f32::from_le_bytes(rd(4, "fps")?.try_into().unwrap());
    if dim == 0 || fps <= 0.0 {
        return Err(Error::format(path, format!("invalid header: dim={dim}, fps={fps}")));
    }
    let payload = rd(dim * frames * 4, "feature payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(FeatureFile { dim, fps, data })
}

pub fn save_sidecar(path: &Path, sc: &FeatureSidecar) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let s = serde_json::to_string_pretty(sc).expect("sidecar serializes");
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_sidecar(path: &Path) -> Result<FeatureSidecar> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}
