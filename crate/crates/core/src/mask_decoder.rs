//! Two-way transformer decoder with modality (FiLM) and content fusion and
//! mask, IoU and modality heads.

use candle_core::{Module, Tensor};
use ndarray::{Array2, ArrayView2};

use crate::config::{ModelConfig, PromptBranchConfig};
use crate::datamodel::resize_bilinear_2d;
use crate::error::{Error, Result};
use crate::nn::{upsample2x, Activation, Attention, Init, LayerNorm, LayerNorm2d, Linear, Mlp, Params, ResidualConvBlock};
use crate::prompt_encoder::TokenLayout;

/// Learned output tokens placed before the prompt tokens: `[iou, mask]`.
pub const NUM_OUTPUT_TOKENS: usize = 2;

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_t2i: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_i2t: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(p: &Params, cfg: &ModelConfig, skip_first_pe: bool) -> Result<Self> {
        let (d, h, ds) = (cfg.embed_dim, cfg.decoder_heads, cfg.attention_downsample);
        Ok(Self {
            self_attn: Attention::new(&p.pp("self_attn"), d, h, 1)?,
            norm1: LayerNorm::new(&p.pp("norm1"), d)?,
            cross_t2i: Attention::new(&p.pp("cross_attn_token_to_image"), d, h, ds)?,
            norm2: LayerNorm::new(&p.pp("norm2"), d)?,
            mlp: Mlp::new(&p.pp("mlp"), &[d, cfg.decoder_mlp_dim, d], Activation::Relu)?,
            norm3: LayerNorm::new(&p.pp("norm3"), d)?,
            cross_i2t: Attention::new(&p.pp("cross_attn_image_to_token"), d, h, ds)?,
            norm4: LayerNorm::new(&p.pp("norm4"), d)?,
            skip_first_pe,
        })
    }

    fn forward(&self, q: &Tensor, k: &Tensor, q_pe: &Tensor, k_pe: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let q = if self.skip_first_pe {
            self.self_attn.forward(q, q, q)?
        } else {
            let qq = (q + q_pe)?;
            (q + self.self_attn.forward(&qq, &qq, q)?)?
        };
        let q = self.norm1.forward(&q)?;
        let kk = (k + k_pe)?;
        let qq = (&q + q_pe)?;
        let q = self.norm2.forward(&(&q + self.cross_t2i.forward(&qq, &kk, k)?)?)?;
        let q = self.norm3.forward(&(&q + self.mlp.forward(&q)?)?)?;
        let qq = (&q + q_pe)?;
        let k = self.norm4.forward(&(k + self.cross_i2t.forward(&kk, &qq, &q)?)?)?;
        Ok((q, k))
    }
}

/// FiLM parameters predicted from the modality token, each `B x D`.
#[derive(Debug, Clone)]
pub struct FilmParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `B x 4G x 4G`.
    pub mask_logits: Tensor,
    /// `B`; raw logit, apply a sigmoid for a score.
    pub iou_logit: Tensor,
    /// `B x C`, present when the modality branch is on.
    pub modality_logits: Option<Tensor>,
    pub film: Option<FilmParams>,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    branches: PromptBranchConfig,
    embed_dim: usize,
    output_tokens: Tensor,
    no_mask_embed: Tensor,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
    film: Option<(Linear, Linear)>,
    fuse_m: ResidualConvBlock,
    fuse_c: ResidualConvBlock,
    merge: ResidualConvBlock,
    up1: candle_nn::ConvTranspose2d,
    up1_norm: LayerNorm2d,
    up2: candle_nn::ConvTranspose2d,
    hyper_mlp: Mlp,
    iou_mlp: Mlp,
    cls_mlp: Option<Mlp>,
}

impl MaskDecoder {
    pub fn new(p: &Params, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let modality = cfg.prompt.modality_enabled();
        let blocks = (0..cfg.decoder_depth)
            .map(|i| TwoWayBlock::new(&p.pp(&format!("transformer.layers.{i}")), cfg, i == 0))
            .collect::<Result<_>>()?;
        let film = modality
            .then(|| -> Result<_> {
                Ok((
                    Linear::with_init(&p.pp("film_w"), d, d, Init::fan_in(d), Init::Const(1.0))?,
                    Linear::with_init(&p.pp("film_b"), d, d, Init::fan_in(d), Init::Const(0.0))?,
                ))
            })
            .transpose()?;
        Ok(Self {
            branches: cfg.prompt,
            embed_dim: d,
            output_tokens: p.get((NUM_OUTPUT_TOKENS, d), "output_tokens", Init::Normal { std: 1.0 })?,
            no_mask_embed: p.get(d, "no_mask_embed", Init::Normal { std: 1.0 })?,
            blocks,
            final_attn: Attention::new(
                &p.pp("transformer.final_attn_token_to_image"),
                d,
                cfg.decoder_heads,
                cfg.attention_downsample,
            )?,
            norm_final: LayerNorm::new(&p.pp("transformer.norm_final"), d)?,
            film,
            fuse_m: ResidualConvBlock::new(&p.pp("fuse_modality"), d, d, 1)?,
            fuse_c: ResidualConvBlock::new(&p.pp("fuse_content"), d, d, 1)?,
            merge: ResidualConvBlock::new(&p.pp("merge"), 2 * d, d, 1)?,
            up1: upsample2x(&p.pp("upscale.0"), d, d / 4)?,
            up1_norm: LayerNorm2d::new(&p.pp("upscale.1"), d / 4)?,
            up2: upsample2x(&p.pp("upscale.2"), d / 4, d / 8)?,
            hyper_mlp: Mlp::new(&p.pp("hyper_mlp"), &[d, d, d, d / 8], Activation::Relu)?,
            iou_mlp: Mlp::new(&p.pp("iou_mlp"), &[d, d, d, 1], Activation::Relu)?,
            cls_mlp: modality
                .then(|| Mlp::new(&p.pp("cls_mlp"), &[d, d, cfg.num_modalities], Activation::Gelu))
                .transpose()?,
        })
    }

    /// Runs the two-way transformer. `image: B x D x G x G`,
    /// `image_pe: 1 x G*G x D`, `tokens: B x T x D`. Returns the updated
    /// tokens and the updated grid `B x D x G x G`.
    pub fn two_way_transform(&self, image: &Tensor, image_pe: &Tensor, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = image.dims4()?;
        if c != self.embed_dim || tokens.dim(2)? != self.embed_dim {
            return Err(Error::Shape(format!(
                "decoder width {} but grid has {c} channels and tokens {}",
                self.embed_dim,
                tokens.dim(2)?
            )));
        }
        let mut k = image.flatten_from(2)?.transpose(1, 2)?;
        let k_pe = image_pe.broadcast_as((b, h * w, c))?;
        let mut q = tokens.clone();
        for blk in &self.blocks {
            (q, k) = blk.forward(&q, &k, tokens, &k_pe)?;
        }
        let qq = (&q + tokens)?;
        let kk = (&k + &k_pe)?;
        let q = self.norm_final.forward(&(&q + self.final_attn.forward(&qq, &kk, &k)?)?)?;
        let grid = k.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((q, grid))
    }

    /// Predicts FiLM parameters from the updated modality token `m: B x D`.
    pub fn film(&self, m: &Tensor) -> Result<FilmParams> {
        let (lw, lb) = self
            .film
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("modality branch is disabled".into()))?;
        Ok(FilmParams {
            w: lw.forward(m)?,
            b: lb.forward(m)?,
        })
    }

    /// `grid * w + b` with `w, b` broadcast over space (pre-convolution).
    pub fn modulate(grid: &Tensor, film: &FilmParams) -> Result<Tensor> {
        let (b, d) = film.w.dims2()?;
        let w = film.w.reshape((b, d, 1, 1))?;
        let bias = film.b.reshape((b, d, 1, 1))?;
        Ok(grid.broadcast_mul(&w)?.broadcast_add(&bias)?)
    }

    /// Returns the fused grid, the FiLM parameters and the classifier input
    /// `m * w + b`.
    pub fn modality_fusion(&self, grid: &Tensor, m: &Tensor) -> Result<(Tensor, FilmParams, Tensor)> {
        let film = self.film(m)?;
        let fused = self.fuse_m.forward(&Self::modulate(grid, &film)?)?;
        let cls_in = ((m * &film.w)? + &film.b)?;
        Ok((fused, film, cls_in))
    }

    /// `grid + dense (+ token)` before the residual block.
    pub fn content_pre(grid: &Tensor, dense: &Tensor, token: Option<&Tensor>) -> Result<Tensor> {
        if grid.dims() != dense.dims() {
            return Err(Error::Shape(format!(
                "dense content {:?} does not match grid {:?}",
                dense.dims(),
                grid.dims()
            )));
        }
        let x = (grid + dense)?;
        Ok(match token {
            Some(t) => {
                let (b, d) = t.dims2()?;
                x.broadcast_add(&t.reshape((b, d, 1, 1))?)?
            }
            None => x,
        })
    }

    pub fn content_fusion(&self, grid: &Tensor, dense: &Tensor, token: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.fuse_c.forward(&Self::content_pre(grid, dense, token)?)?)
    }

    /// Modality-class logits from the classifier input; asserts its width.
    pub fn classify(&self, cls_in: &Tensor) -> Result<Option<Tensor>> {
        let Some(mlp) = &self.cls_mlp else { return Ok(None) };
        if cls_in.dim(1)? != self.embed_dim || mlp.in_dim() != self.embed_dim {
            return Err(Error::Shape(format!(
                "classifier input width {} must equal {}",
                cls_in.dim(1)?,
                self.embed_dim
            )));
        }
        Ok(Some(mlp.forward(cls_in)?))
    }

    pub fn classifier_in_dim(&self) -> Option<usize> {
        self.cls_mlp.as_ref().map(|m| m.in_dim())
    }

    pub fn decode(
        &self,
        image: &Tensor,
        image_pe: &Tensor,
        sparse: &Tensor,
        dense: &Tensor,
        layout: &TokenLayout,
    ) -> Result<DecoderOutput> {
        let b = image.dim(0)?;
        if sparse.dim(1)? != layout.len {
            return Err(Error::Shape(format!("{} sparse tokens, layout expects {}", sparse.dim(1)?, layout.len)));
        }
        let out_tokens = self.output_tokens.unsqueeze(0)?.broadcast_as((b, NUM_OUTPUT_TOKENS, self.embed_dim))?;
        let tokens = Tensor::cat(&[&out_tokens, sparse], 1)?;
        let src = image.broadcast_add(&self.no_mask_embed.reshape((1, self.embed_dim, 1, 1))?)?;
        let (tokens, grid) = self.two_way_transform(&src, image_pe, &tokens)?;
        let token_at = |i: usize| tokens.narrow(1, i, 1).and_then(|t| t.squeeze(1));
        let iou_tok = token_at(0)?;
        let mask_tok = token_at(1)?;

        let (fused_m, film, modality_logits) = match layout.modality {
            Some(i) if self.branches.modality_enabled() => {
                let m = token_at(NUM_OUTPUT_TOKENS + i)?;
                let (fused, film, cls_in) = self.modality_fusion(&grid, &m)?;
                (fused, Some(film), self.classify(&cls_in)?)
            }
            _ => (self.fuse_m.forward(&grid)?, None, None),
        };
        let content_tok = layout.content.map(|i| token_at(NUM_OUTPUT_TOKENS + i)).transpose()?;
        let fused_c = self.content_fusion(&grid, dense, content_tok.as_ref())?;

        let x = self.merge.forward(&Tensor::cat(&[&fused_m, &fused_c], 1)?)?;
        let x = self.up1_norm.forward(&self.up1.forward(&x)?)?.gelu_erf()?;
        let feat = self.up2.forward(&x)?.gelu_erf()?;
        let (_, c, h, w) = feat.dims4()?;
        let hyper = self.hyper_mlp.forward(&mask_tok)?.unsqueeze(1)?;
        let mask_logits = hyper.matmul(&feat.reshape((b, c, h * w))?)?.reshape((b, h, w))?;
        let iou_logit = self.iou_mlp.forward(&iou_tok)?.squeeze(1)?;
        Ok(DecoderOutput {
            mask_logits,
            iou_logit,
            modality_logits,
            film,
        })
    }
}

/// Resizes logits to `img_size`, then to the original `(h, w)`, and
/// thresholds at `threshold` (a logit).
pub fn postprocess_mask(logits: ArrayView2<f32>, img_size: usize, original: (usize, usize), threshold: f32) -> Array2<bool> {
    let model = resize_bilinear_2d(logits, img_size, img_size);
    let orig = resize_bilinear_2d(model.view(), original.0, original.1);
    orig.mapv(|v| v > threshold)
}
