//! Named parameter store, deterministic initialization and the CVTW file
//! format.
//!
//! CVTW layout (all integers little-endian):
//!
//! ```text
//! "CVTW" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | u32 extent * rank | f32 payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! The model configuration travels inside the file as rank-1 tensors named
//! `config.<field>`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::TensorF32;

pub const CVTW_MAGIC: &str = "CVTW";
pub const CVTW_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, TensorF32>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: TensorF32) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&TensorF32> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorF32> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorF32)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Seeded initialization: kernels uniform in `±1/sqrt(fan_in)`, biases
    /// zero, layer norms identity, class token and positional table uniform in
    /// `±0.02`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::new();
        for spec in param_specs(cfg) {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f32> = match spec.init {
                Init::Kernel { fan_in } => {
                    let a = 1.0 / (fan_in as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Embedding => (0..n).map(|_| rng.random_range(-0.02..0.02)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            w.insert(spec.name, TensorF32::new(&spec.shape, data)?);
        }
        w.set_config(cfg);
        Ok(w)
    }

    /// Same tensor set as [`Weights::init`] but with every parameter zero
    /// except layer-norm gains.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut w = Weights::new();
        for spec in param_specs(cfg) {
            let t = match spec.init {
                Init::Ones => TensorF32::full(&spec.shape, 1.0),
                _ => TensorF32::zeros(&spec.shape),
            };
            w.insert(spec.name, t);
        }
        w.set_config(cfg);
        Ok(w)
    }

    pub fn set_config(&mut self, cfg: &ModelConfig) {
        let scalar = |v: usize| TensorF32::new(&[1], vec![v as f32]).expect("scalar");
        self.insert("config.patch_size", scalar(cfg.patch_size));
        self.insert("config.embed_dim", scalar(cfg.embed_dim));
        self.insert("config.depth", scalar(cfg.depth));
        self.insert("config.heads", scalar(cfg.heads));
        self.insert("config.mlp_ratio", scalar(cfg.mlp_ratio));
        self.insert("config.in_channels", scalar(cfg.in_channels));
        self.insert("config.num_nuclei_classes", scalar(cfg.num_nuclei_classes));
        self.insert("config.num_tissue_classes", scalar(cfg.num_tissue_classes));
        self.insert("config.trained_pos_grid", scalar(cfg.trained_pos_grid));
        self.insert("config.star_rays", scalar(cfg.star_rays));
        let widths: Vec<f32> = cfg.decoder_widths.iter().map(|&v| v as f32).collect();
        self.insert(
            "config.decoder_widths",
            TensorF32::new(&[widths.len()], widths).expect("widths"),
        );
    }

    /// Reads the embedded `config.*` tensors back into a [`ModelConfig`].
    pub fn config(&self) -> Result<ModelConfig> {
        let scalar = |name: &str| -> Result<usize> {
            let t = self.get(name)?;
            if t.len() != 1 {
                return Err(Error::shape(format!("{name} must hold one value")));
            }
            Ok(t.data()[0] as usize)
        };
        let cfg = ModelConfig {
            patch_size: scalar("config.patch_size")?,
            embed_dim: scalar("config.embed_dim")?,
            depth: scalar("config.depth")?,
            heads: scalar("config.heads")?,
            mlp_ratio: scalar("config.mlp_ratio")?,
            in_channels: scalar("config.in_channels")?,
            num_nuclei_classes: scalar("config.num_nuclei_classes")?,
            num_tissue_classes: scalar("config.num_tissue_classes")?,
            trained_pos_grid: scalar("config.trained_pos_grid")?,
            star_rays: scalar("config.star_rays")?,
            decoder_widths: self
                .get("config.decoder_widths")?
                .data()
                .iter()
                .map(|&v| v as usize)
                .collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that every parameter the configuration needs exists with the
    /// right shape.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        for spec in param_specs(cfg) {
            self.get(&spec.name)?.ensure_shape(&spec.shape, &spec.name)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(b"CVTW");
        w.u32(CVTW_VERSION);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidConfig(format!("tensor name too long: {name}")))?;
            w.u16(name_len);
            w.bytes(name.as_bytes());
            w.u8(t.rank() as u8);
            for &e in t.shape() {
                w.u32(e as u32);
            }
            w.f32s(t.data());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CVTW_MAGIC)?;
        let version = r.u32()?;
        if version != CVTW_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let count = r.u32()?;
        let mut out = Weights::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|e| Error::shape(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let shape = r.shape()?;
            let n = shape.iter().product();
            let data = r.f32s(n)?;
            out.insert(name, TensorF32::new(&shape, data)?);
        }
        r.finish()?;
        Ok(out)
    }
}

pub fn save_weights(weights: &Weights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, weights.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Weights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Weights::from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Kernel { fan_in: usize },
    Embedding,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Decoder branches in parameter-name order.
pub(crate) fn branch_names(cfg: &ModelConfig) -> Vec<(&'static str, usize)> {
    let mut b = vec![("np", 2), ("hv", 2), ("nt", cfg.num_nuclei_classes)];
    if cfg.star_rays > 0 {
        b.push(("star", 1 + cfg.star_rays));
    }
    b
}

/// Decoder stage at which encoder skip `k` (1 = `3L/4`, 2 = `2L/4`,
/// 3 = `L/4`) is fused; it reaches that stage through `stage + 1`
/// transposed convolutions.
pub(crate) fn skip_stage(cfg: &ModelConfig, k: usize) -> usize {
    k.min(cfg.decoder_stages()) - 1
}

/// Input channels of the fusion convolution at decoder stage `s`.
pub(crate) fn stage_in_channels(cfg: &ModelConfig, s: usize) -> usize {
    let stages = cfg.decoder_stages();
    let w = cfg.decoder_widths[s];
    let skips = (1..=3).filter(|&k| skip_stage(cfg, k) == s).count();
    let stem = usize::from(s == stages - 1);
    w * (1 + skips + stem)
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let tok = p * p * cfg.in_channels;
    let hidden = d * cfg.mlp_ratio;
    let widths = &cfg.decoder_widths;
    let stages = cfg.decoder_stages();
    let last = widths[stages - 1];

    let mut v = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        v.push(ParamSpec { name, shape, init })
    };
    let kernel = |fan_in| Init::Kernel { fan_in };

    push("patch_embed.weight".into(), vec![tok, d], kernel(tok));
    push("patch_embed.bias".into(), vec![d], Init::Zeros);
    push("cls_token".into(), vec![1, d], Init::Embedding);
    let g = cfg.trained_pos_grid;
    push("pos_embed".into(), vec![g * g + 1, d], Init::Embedding);

    for i in 0..cfg.depth {
        let b = format!("blocks.{i}");
        push(format!("{b}.norm1.weight"), vec![d], Init::Ones);
        push(format!("{b}.norm1.bias"), vec![d], Init::Zeros);
        push(format!("{b}.attn.qkv.weight"), vec![d, 3 * d], kernel(d));
        push(format!("{b}.attn.qkv.bias"), vec![3 * d], Init::Zeros);
        push(format!("{b}.attn.proj.weight"), vec![d, d], kernel(d));
        push(format!("{b}.attn.proj.bias"), vec![d], Init::Zeros);
        push(format!("{b}.norm2.weight"), vec![d], Init::Ones);
        push(format!("{b}.norm2.bias"), vec![d], Init::Zeros);
        push(format!("{b}.mlp.fc1.weight"), vec![d, hidden], kernel(d));
        push(format!("{b}.mlp.fc1.bias"), vec![hidden], Init::Zeros);
        push(format!("{b}.mlp.fc2.weight"), vec![hidden, d], kernel(hidden));
        push(format!("{b}.mlp.fc2.bias"), vec![d], Init::Zeros);
    }

    push("tissue_head.weight".into(), vec![d, cfg.num_tissue_classes], kernel(d));
    push("tissue_head.bias".into(), vec![cfg.num_tissue_classes], Init::Zeros);

    let c = cfg.in_channels;
    push("decoder.stem.conv0.weight".into(), vec![3, 3, c, last], kernel(9 * c));
    push("decoder.stem.conv0.bias".into(), vec![last], Init::Zeros);
    push("decoder.stem.conv1.weight".into(), vec![3, 3, last, last], kernel(9 * last));
    push("decoder.stem.conv1.bias".into(), vec![last], Init::Zeros);

    for k in 1..=3 {
        let mut cin = d;
        for j in 0..=skip_stage(cfg, k) {
            let cout = widths[j];
            push(format!("decoder.skip{k}.up{j}.weight"), vec![cin, 2, 2, cout], kernel(cin));
            push(format!("decoder.skip{k}.up{j}.bias"), vec![cout], Init::Zeros);
            cin = cout;
        }
    }

    for (name, out) in branch_names(cfg) {
        let b = format!("decoder.{name}");
        push(format!("{b}.bottleneck.weight"), vec![d, 2, 2, widths[0]], kernel(d));
        push(format!("{b}.bottleneck.bias"), vec![widths[0]], Init::Zeros);
        for s in 0..stages {
            let cin = stage_in_channels(cfg, s);
            push(format!("{b}.stage{s}.conv.weight"), vec![3, 3, cin, widths[s]], kernel(9 * cin));
            push(format!("{b}.stage{s}.conv.bias"), vec![widths[s]], Init::Zeros);
            if s + 1 < stages {
                let (ci, co) = (widths[s], widths[s + 1]);
                push(format!("{b}.stage{s}.up.weight"), vec![ci, 2, 2, co], kernel(ci));
                push(format!("{b}.stage{s}.up.bias"), vec![co], Init::Zeros);
            }
        }
        push(format!("{b}.head.weight"), vec![last, out], kernel(last));
        push(format!("{b}.head.bias"), vec![out], Init::Zeros);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_complete() {
        let cfg = ModelConfig::tiny();
        let a = Weights::init(&cfg, 7).unwrap();
        let b = Weights::init(&cfg, 7).unwrap();
        let c = Weights::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check_against(&cfg).unwrap();
        assert_eq!(a.config().unwrap(), cfg);
    }

    #[test]
    fn kernel_init_respects_fan_in_bound() {
        let cfg = ModelConfig::tiny();
        let w = Weights::init(&cfg, 1).unwrap();
        let t = w.get("blocks.0.attn.qkv.weight").unwrap();
        let bound = 1.0 / (cfg.embed_dim as f32).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(w.get("blocks.0.attn.qkv.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(w.get("blocks.0.norm1.weight").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unet_stage_layout_for_16px_tokens() {
        let cfg = ModelConfig::tiny();
        assert_eq!((1..=3).map(|k| skip_stage(&cfg, k)).collect::<Vec<_>>(), [0, 1, 2]);
        let w = &cfg.decoder_widths;
        assert_eq!(stage_in_channels(&cfg, 0), 2 * w[0]);
        assert_eq!(stage_in_channels(&cfg, 3), 2 * w[3]);
    }

    #[test]
    fn small_patch_fuses_several_skips_per_stage() {
        let mut cfg = ModelConfig::tiny();
        cfg.patch_size = 4;
        cfg.decoder_widths = vec![8, 4];
        // skip 1 at stage 0; skips 2 and 3 together with the stem at stage 1
        assert_eq!(stage_in_channels(&cfg, 0), 16);
        assert_eq!(stage_in_channels(&cfg, 1), 4 * 4);
    }
}
