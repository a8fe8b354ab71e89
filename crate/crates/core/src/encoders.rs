//! Trainable image encoder (small ViT) and the CNN content encoder.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use ndarray::ArrayView3;

use crate::checkpoint::{load_into, Checkpoint, LoadReport};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{conv2d, Activation, Attention, Init, LayerNorm, LayerNorm2d, Mlp, ParamStore, Params, ResidualConvBlock};

/// Parameter-name prefix of the image encoder inside a model store.
pub const IMAGE_ENCODER_PREFIX: &str = "image_encoder";
/// Parameter-name prefix of the CNN content encoder.
pub const CONTENT_ENCODER_PREFIX: &str = "content_encoder";

/// Stacks `H x W x 3` images into a `B x 3 x H x W` tensor.
pub fn images_to_tensor(images: &[ArrayView3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?
        .dim();
    if first.2 != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", first.2)));
    }
    let mut data = Vec::with_capacity(images.len() * first.0 * first.1 * 3);
    for img in images {
        if img.dim() != first {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", first, img.dim())));
        }
        data.extend(img.permuted_axes([2, 0, 1]).iter().copied());
    }
    let t = Tensor::from_vec(data, (images.len(), 3, first.0, first.1), device)?;
    Ok(t.to_dtype(dtype)?)
}

fn check_input(x: &Tensor, side: usize, what: &str) -> Result<()> {
    match x.dims() {
        [_, 3, h, w] if *h == side && *w == side => Ok(()),
        d => Err(Error::Shape(format!("{what} expects B x 3 x {side} x {side}, got {d:?}"))),
    }
}

#[derive(Debug, Clone)]
struct VitBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl VitBlock {
    fn new(p: &Params, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&p.pp("norm1"), width)?,
            attn: Attention::new(&p.pp("attn"), width, heads, 1)?,
            ln2: LayerNorm::new(&p.pp("norm2"), width)?,
            mlp: Mlp::new(&p.pp("mlp"), &[width, width * mlp_ratio, width], Activation::Gelu)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h)?)?;
        let h = self.mlp.forward(&self.ln2.forward(&x)?)?;
        x + h
    }
}

/// Patchify, pre-norm transformer blocks, then a convolutional neck down to
/// the decoder width: `B x 3 x S x S -> B x D x G x G`.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch_embed: candle_nn::Conv2d,
    pos_embed: Tensor,
    blocks: Vec<VitBlock>,
    neck_conv1: candle_nn::Conv2d,
    neck_ln1: LayerNorm2d,
    neck_conv2: candle_nn::Conv2d,
    neck_ln2: LayerNorm2d,
    img_size: usize,
    grid: usize,
}

impl ImageEncoder {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (w, g, d) = (cfg.vit_width, cfg.grid(), cfg.embed_dim);
        let blocks = (0..cfg.vit_depth)
            .map(|i| VitBlock::new(&p.pp(&format!("blocks.{i}")), w, cfg.vit_heads, cfg.vit_mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_embed: conv2d(&p.pp("patch_embed"), 3, w, cfg.patch_size, cfg.patch_size, 0)?,
            pos_embed: p.get((1, g * g, w), "pos_embed", Init::Normal { std: 0.02 })?,
            blocks,
            neck_conv1: conv2d(&p.pp("neck.conv1"), w, d, 1, 1, 0)?,
            neck_ln1: LayerNorm2d::new(&p.pp("neck.ln1"), d)?,
            neck_conv2: conv2d(&p.pp("neck.conv2"), d, d, 3, 1, 1)?,
            neck_ln2: LayerNorm2d::new(&p.pp("neck.ln2"), d)?,
            img_size: cfg.img_size,
            grid: g,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.img_size, "image encoder")?;
        let b = x.dim(0)?;
        let h = self.patch_embed.forward(x)?;
        let w = h.dim(1)?;
        let mut t = h.flatten_from(2)?.transpose(1, 2)?.broadcast_add(&self.pos_embed)?;
        for blk in &self.blocks {
            t = blk.forward(&t)?;
        }
        let h = t.transpose(1, 2)?.reshape((b, w, self.grid, self.grid))?;
        let h = self.neck_ln1.forward(&self.neck_conv1.forward(&h)?)?;
        Ok(self.neck_ln2.forward(&self.neck_conv2.forward(&h)?)?)
    }
}

/// Stem convolution and two stride-2 residual blocks:
/// `B x 3 x 4G x 4G -> B x D x G x G`.
#[derive(Debug, Clone)]
pub struct ContentEncoder {
    stem: candle_nn::Conv2d,
    block1: ResidualConvBlock,
    block2: ResidualConvBlock,
    crop: usize,
}

impl ContentEncoder {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            stem: conv2d(&p.pp("stem"), 3, d, 3, 1, 1)?,
            block1: ResidualConvBlock::new(&p.pp("block1"), d, d, 2)?,
            block2: ResidualConvBlock::new(&p.pp("block2"), d, d, 2)?,
            crop: cfg.content_crop(),
        })
    }

    pub fn crop_size(&self) -> usize {
        self.crop
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.crop, "content encoder")?;
        let h = self.stem.forward(x)?.relu()?;
        let h = self.block1.forward(&h)?.relu()?;
        Ok(self.block2.forward(&h)?)
    }
}

/// Loads `image_encoder.*` tensors from a checkpoint file into `store`.
pub fn load_pretrained(store: &ParamStore, weights: &Path, strict: bool) -> Result<LoadReport> {
    let ckpt = Checkpoint::read(weights, store.device())?;
    load_into(store, &ckpt, &format!("{IMAGE_ENCODER_PREFIX}."), strict)
}
