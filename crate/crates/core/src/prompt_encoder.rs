//! Sparse and dense prompt embeddings from box, modality and content prompts.

use candle_core::{DType, Device, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ModelConfig, PromptBranchConfig};
use crate::encoders::{ContentEncoder, CONTENT_ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::losses::l2_normalize;
use crate::nn::{Activation, Init, Mlp, Params};

/// Positions of each prompt inside the sparse token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub box_corners: [usize; 2],
    pub modality: Option<usize>,
    pub content: Option<usize>,
    pub len: usize,
}

impl TokenLayout {
    pub fn for_branches(b: &PromptBranchConfig) -> Self {
        let mut next = 2;
        let mut take = |on: bool| {
            on.then(|| {
                next += 1;
                next - 1
            })
        };
        let modality = take(b.modality_enabled());
        let content = take(b.use_image_clip);
        Self {
            box_corners: [0, 1],
            modality,
            content,
            len: next,
        }
    }
}

/// Per-batch prompt inputs, already in the model frame. Frozen embeddings
/// enter as constants.
#[derive(Debug, Clone)]
pub struct PromptInputs {
    /// `B x 4` boxes `(x_min, y_min, x_max, y_max)` in model pixels.
    pub boxes: Tensor,
    pub modality: Vec<u32>,
    /// `B x clip_dim` frozen text embeddings of the modality prompt.
    pub text_emb: Option<Tensor>,
    /// `B x clip_dim` frozen image embeddings of the box crop.
    pub image_emb: Option<Tensor>,
    /// `B x 3 x 4G x 4G` box crop for the CNN branch.
    pub content_crop: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct PromptEmbeddings {
    /// `B x T x D`.
    pub sparse: Tensor,
    /// `B x D x G x G`.
    pub dense: Tensor,
    pub layout: TokenLayout,
    /// Unit-norm `(F_dc, F_sc)`, each `B x D`, when both content branches are on.
    pub contrastive: Option<(Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct PromptEncoder {
    branches: PromptBranchConfig,
    layout: TokenLayout,
    img_size: usize,
    embed_dim: usize,
    grid: usize,
    num_modalities: usize,
    /// Fixed `2 x D/2` Gaussian frequency matrix; not trainable.
    pe_gaussian: Tensor,
    corner_embed: Tensor,
    text_mlp: Option<Mlp>,
    pool: Option<Tensor>,
    fusion_mlp: Option<Mlp>,
    content_mlp: Option<Mlp>,
    cnn: Option<ContentEncoder>,
    no_content: Option<Tensor>,
}

/// Seeded `2 x D/2` standard-normal frequency matrix.
pub fn gaussian_basis(seed: u64, embed_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    (0..embed_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

impl PromptEncoder {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let g = cfg.grid();
        let b = cfg.prompt;
        let pe = Tensor::from_vec(gaussian_basis(cfg.seed, d), (2, d / 2), p.device())?
            .to_dtype(p.dtype())?;
        let text_mlp = b
            .use_text_clip
            .then(|| Mlp::new(&p.pp("text_mlp"), &[cfg.clip_dim, d, d], Activation::Gelu))
            .transpose()?;
        let pool = b
            .use_modality_embedding
            .then(|| p.get((cfg.num_modalities, d), "modality_pool", Init::Normal { std: 1.0 }))
            .transpose()?;
        let fusion_mlp = (b.use_text_clip && b.use_modality_embedding)
            .then(|| Mlp::new(&p.pp("fusion_mlp"), &[2 * d, d, d], Activation::Gelu))
            .transpose()?;
        let content_mlp = b
            .use_image_clip
            .then(|| Mlp::new(&p.pp("content_mlp"), &[cfg.clip_dim, d, d], Activation::Gelu))
            .transpose()?;
        let cnn = b
            .use_cnn_encoder
            .then(|| ContentEncoder::new(&p.pp(CONTENT_ENCODER_PREFIX), cfg))
            .transpose()?;
        let no_content = (!b.use_cnn_encoder)
            .then(|| p.get((d, g, g), "no_content_embed", Init::fan_in(d)))
            .transpose()?;
        Ok(Self {
            branches: b,
            layout: TokenLayout::for_branches(&b),
            img_size: cfg.img_size,
            embed_dim: d,
            grid: g,
            num_modalities: cfg.num_modalities,
            pe_gaussian: pe,
            corner_embed: p.get((2, d), "corner_embed", Init::Normal { std: 1.0 })?,
            text_mlp,
            pool,
            fusion_mlp,
            content_mlp,
            cnn,
            no_content,
        })
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn branches(&self) -> PromptBranchConfig {
        self.branches
    }

    pub fn pe_gaussian(&self) -> &Tensor {
        &self.pe_gaussian
    }

    pub fn device(&self) -> &Device {
        self.pe_gaussian.device()
    }

    pub fn dtype(&self) -> DType {
        self.pe_gaussian.dtype()
    }

    /// Sine/cosine encoding of `B x N x 2` pixel coordinates -> `B x N x D`.
    pub fn positional_encoding(&self, coords: &Tensor) -> Result<Tensor> {
        let s = self.img_size as f64;
        self.encode_unit(&coords.affine(1.0 / s, 0.5 / s)?)
    }

    /// Encoding of coordinates already normalised to `[0, 1]`.
    fn encode_unit(&self, unit: &Tensor) -> Result<Tensor> {
        let c = unit.affine(2.0, -1.0)?;
        let proj = (c.broadcast_matmul(&self.pe_gaussian)? * (2.0 * std::f64::consts::PI))?;
        let last = proj.rank() - 1;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], last)?)
    }

    /// Positional encoding of the `G x G` embedding grid, `1 x G*G x D`,
    /// row-major over cell centres.
    pub fn dense_pe(&self) -> Result<Tensor> {
        let g = self.grid;
        let coords: Vec<f64> = (0..g * g)
            .flat_map(|i| [((i % g) as f64 + 0.5) / g as f64, ((i / g) as f64 + 0.5) / g as f64])
            .collect();
        let unit = Tensor::from_vec(coords, (1, g * g, 2), self.device())?.to_dtype(self.dtype())?;
        self.encode_unit(&unit)
    }

    /// `B x 4` boxes -> `B x 2 x D` corner tokens.
    pub fn encode_box(&self, boxes: &Tensor) -> Result<Tensor> {
        let b = boxes.dim(0)?;
        if boxes.dims() != [b, 4] {
            return Err(Error::Shape(format!("boxes must be B x 4, got {:?}", boxes.dims())));
        }
        let corners = boxes.reshape((b, 2, 2))?;
        Ok(self.positional_encoding(&corners)?.broadcast_add(&self.corner_embed)?)
    }

    /// Modality token `B x D`, or `None` when both modality branches are off.
    pub fn encode_modality(&self, modality: &[u32], text_emb: Option<&Tensor>) -> Result<Option<Tensor>> {
        if let Some(&bad) = modality.iter().find(|&&m| m as usize >= self.num_modalities) {
            return Err(Error::UnknownModality(format!("index {bad}")));
        }
        let text = match &self.text_mlp {
            Some(mlp) => {
                let t = text_emb.ok_or_else(|| Error::InvalidInput("text branch needs text embeddings".into()))?;
                Some(mlp.forward(t)?)
            }
            None => None,
        };
        let pooled = match &self.pool {
            Some(pool) => {
                let idx = Tensor::from_vec(modality.to_vec(), modality.len(), pool.device())?;
                Some(pool.index_select(&idx, 0)?)
            }
            None => None,
        };
        Ok(match (text, pooled, &self.fusion_mlp) {
            (Some(t), Some(p), Some(f)) => Some(f.forward(&Tensor::cat(&[t, p], 1)?)?),
            (Some(t), None, _) => Some(t),
            (None, Some(p), _) => Some(p),
            _ => None,
        })
    }

    /// Returns the sparse content token (`B x D`, if the image branch is on)
    /// and the dense grid `B x D x G x G`.
    pub fn encode_content(
        &self,
        batch: usize,
        image_emb: Option<&Tensor>,
        crop: Option<&Tensor>,
    ) -> Result<(Option<Tensor>, Tensor)> {
        let sparse = match &self.content_mlp {
            Some(mlp) => {
                let e = image_emb.ok_or_else(|| Error::InvalidInput("image branch needs image embeddings".into()))?;
                Some(mlp.forward(e)?)
            }
            None => None,
        };
        let dense = match (&self.cnn, &self.no_content) {
            (Some(cnn), _) => {
                let c = crop.ok_or_else(|| Error::InvalidInput("CNN branch needs content crops".into()))?;
                cnn.forward(c)?
            }
            (None, Some(m)) => m
                .unsqueeze(0)?
                .broadcast_as((batch, self.embed_dim, self.grid, self.grid))?,
            (None, None) => unreachable!("one dense source always exists"),
        };
        Ok((sparse, dense))
    }

    pub fn forward(&self, inputs: &PromptInputs) -> Result<PromptEmbeddings> {
        let b = inputs.boxes.dim(0)?;
        if inputs.modality.len() != b {
            return Err(Error::Shape(format!("{} boxes but {} modalities", b, inputs.modality.len())));
        }
        let mut tokens = vec![self.encode_box(&inputs.boxes)?];
        let m = self.encode_modality(&inputs.modality, inputs.text_emb.as_ref())?;
        if let Some(m) = &m {
            tokens.push(m.unsqueeze(1)?);
        }
        let (sc, dense) = self.encode_content(b, inputs.image_emb.as_ref(), inputs.content_crop.as_ref())?;
        if let Some(sc) = &sc {
            tokens.push(sc.unsqueeze(1)?);
        }
        let contrastive = match (&sc, self.branches.contrastive_enabled()) {
            (Some(sc), true) => {
                let f_dc = dense.mean(3)?.mean(2)?;
                Some((l2_normalize(&f_dc)?, l2_normalize(sc)?))
            }
            _ => None,
        };
        let sparse = Tensor::cat(&tokens, 1)?;
        debug_assert_eq!(sparse.dim(1).ok(), Some(self.layout.len));
        Ok(PromptEmbeddings {
            sparse,
            dense,
            layout: self.layout,
            contrastive,
        })
    }
}
