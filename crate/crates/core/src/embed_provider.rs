//! Frozen text and image embedders standing in for a CLIP-style encoder.
//!
//! The stub backend needs no external weights: text prompts map to seeded
//! pseudo-random unit vectors keyed by the exact prompt string, and image
//! crops go through a fixed random projection of their 8x8 mean-pooled
//! thumbnail. The pretrained backend loads the same two components
//! (prompt table and projection) from a safetensors file. Neither backend
//! holds trainable parameters; outputs enter the model as constants.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::ArrayView3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the pooled thumbnail fed to the stub image projection.
pub const POOL_GRID: usize = 8;
const POOLED_LEN: usize = POOL_GRID * POOL_GRID * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Stub,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub backend: Backend,
    pub weights: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Stub,
            weights: None,
            seed: 0x00C1_1900,
        }
    }
}

// FNV-1a; stable across platforms and releases, unlike std's hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Frozen text embedder.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    dim: usize,
    seed: u64,
    table: Option<BTreeMap<String, Vec<f32>>>,
}

impl TextEmbedder {
    pub fn stub(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            table: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self, prompt: &str) -> Result<Vec<f32>> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("text prompt must not be empty".into()));
        }
        if let Some(table) = &self.table {
            return table
                .get(prompt)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("prompt `{prompt}` not in text table")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(prompt.as_bytes()));
        let mut v = gaussian_vec(&mut rng, self.dim, 1.0);
        normalize(&mut v);
        Ok(v)
    }
}

/// Frozen image embedder.
#[derive(Debug, Clone)]
pub struct ImageEmbedder {
    dim: usize,
    crop: usize,
    /// Row-major `dim x POOLED_LEN`.
    projection: Vec<f32>,
    bias: Vec<f32>,
}

impl ImageEmbedder {
    pub fn stub(dim: usize, crop: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x1A6E));
        let projection = gaussian_vec(&mut rng, dim * POOLED_LEN, 1.0 / (POOLED_LEN as f32).sqrt());
        let bias = gaussian_vec(&mut rng, dim, 0.1);
        Self {
            dim,
            crop,
            projection,
            bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Expected crop side length.
    pub fn crop_size(&self) -> usize {
        self.crop
    }

    /// Embeds a `crop x crop x 3` image with values in `[0, 1]`.
    pub fn embed_image(&self, crop: ArrayView3<f32>) -> Result<Vec<f32>> {
        let (h, w, c) = crop.dim();
        if (h, w, c) != (self.crop, self.crop, 3) {
            return Err(Error::Shape(format!(
                "image embedder expects {0}x{0}x3, got {h}x{w}x{c}",
                self.crop
            )));
        }
        let pooled = mean_pool(crop, POOL_GRID);
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.projection.chunks_exact(POOLED_LEN)) {
            *o += row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f32>();
        }
        normalize(&mut out);
        Ok(out)
    }
}

/// Mean over a `grid x grid` partition of the image, channel-last flattened.
fn mean_pool(img: ArrayView3<f32>, grid: usize) -> Vec<f32> {
    let (h, w, c) = img.dim();
    let mut sum = vec![0f32; grid * grid * c];
    let mut count = vec![0u32; grid * grid];
    for y in 0..h {
        let gy = y * grid / h;
        for x in 0..w {
            let gx = x * grid / w;
            let cell = gy * grid + gx;
            count[cell] += 1;
            for ch in 0..c {
                sum[cell * c + ch] += img[[y, x, ch]];
            }
        }
    }
    for cell in 0..grid * grid {
        let n = count[cell].max(1) as f32;
        for ch in 0..c {
            sum[cell * c + ch] /= n;
        }
    }
    sum
}

/// Text and image embedders sharing one configuration.
#[derive(Debug, Clone)]
pub struct FrozenEmbedders {
    pub text: TextEmbedder,
    pub image: ImageEmbedder,
}

impl FrozenEmbedders {
    pub fn stub(dim: usize, crop: usize, seed: u64) -> Self {
        Self {
            text: TextEmbedder::stub(dim, seed),
            image: ImageEmbedder::stub(dim, crop, seed),
        }
    }

    pub fn from_config(cfg: &ProviderConfig, dim: usize, crop: usize) -> Result<Self> {
        match cfg.backend {
            Backend::Stub => Ok(Self::stub(dim, crop, cfg.seed)),
            Backend::Pretrained => {
                let path = cfg.weights.as_ref().ok_or_else(|| {
                    Error::Config("clip.backend = pretrained requires clip.weights".into())
                })?;
                Self::load(path, dim, crop)
            }
        }
    }

    /// Writes the embedders to a safetensors file: `image.projection`,
    /// `image.bias` and one `text.<prompt>` vector per entry of `prompts`.
    pub fn save(&self, path: &Path, prompts: &[String]) -> Result<()> {
        let mut tensors: Vec<(String, Vec<f32>, Vec<usize>)> = vec![
            (
                "image.projection".into(),
                self.image.projection.clone(),
                vec![self.image.dim, POOLED_LEN],
            ),
            ("image.bias".into(), self.image.bias.clone(), vec![self.image.dim]),
        ];
        for p in prompts {
            tensors.push((format!("text.{p}"), self.text.embed_text(p)?, vec![self.text.dim]));
        }
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
            .into_iter()
            .map(|(n, v, s)| (n, v.iter().flat_map(|x| x.to_le_bytes()).collect(), s))
            .collect();
        let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = bytes
            .iter()
            .map(|(n, b, s)| {
                safetensors::tensor::TensorView::new(safetensors::Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<_>>()?;
        let meta = [("crop".to_string(), self.image.crop.to_string())].into_iter().collect();
        safetensors::serialize_to_file(views, Some(meta), path)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path, dim: usize, crop: usize) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&data)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let read = |name: &str, len: usize| -> Result<Vec<f32>> {
            let t = st
                .tensor(name)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if t.dtype() != safetensors::Dtype::F32 || t.shape().iter().product::<usize>() != len {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected {len} f32 values, got {:?} {:?}",
                    t.dtype(),
                    t.shape()
                )));
            }
            Ok(t.data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect())
        };
        let projection = read("image.projection", dim * POOLED_LEN)?;
        let bias = read("image.bias", dim)?;
        let mut table = BTreeMap::new();
        for name in st.names() {
            if let Some(prompt) = name.strip_prefix("text.") {
                table.insert(prompt.to_string(), read(name, dim)?);
            }
        }
        Ok(Self {
            text: TextEmbedder {
                dim,
                seed: 0,
                table: Some(table),
            },
            image: ImageEmbedder {
                dim,
                crop,
                projection,
                bias,
            },
        })
    }
}
