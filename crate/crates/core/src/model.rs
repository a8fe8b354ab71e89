//! The assembled segmentation model: encoders, prompt encoder, decoder and
//! the frozen embedders, plus host-side batch preparation.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_into, Checkpoint};
use crate::config::ModelConfig;
use crate::datamodel::{resize_bilinear, resize_nearest, BoundingBox, ModalityRegistry, SampleInstance};
use crate::embed_provider::{FrozenEmbedders, ProviderConfig};
use crate::encoders::{images_to_tensor, ImageEncoder, IMAGE_ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::losses::{self, LossConfig, LossTerms};
use crate::mask_decoder::{DecoderOutput, MaskDecoder};
use crate::nn::ParamStore;
use crate::prompt_encoder::{PromptEmbeddings, PromptEncoder, PromptInputs};

pub const PROMPT_ENCODER_PREFIX: &str = "prompt_encoder";
pub const MASK_DECODER_PREFIX: &str = "mask_decoder";

/// Everything needed to rebuild a model, stored in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub modalities: ModalityRegistry,
    pub clip: ProviderConfig,
}

/// One sample with its frozen embeddings, ready for batching.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// `S x S x 3`.
    pub image: Array3<f32>,
    pub bbox: BoundingBox,
    pub modality: u32,
    pub text_emb: Option<Vec<f32>>,
    pub image_emb: Option<Vec<f32>>,
    /// `4G x 4G x 3` box crop for the CNN branch.
    pub crop: Option<Array3<f32>>,
    /// Ground truth at decoder resolution, if known.
    pub mask: Option<Array2<f32>>,
}

#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub images: Tensor,
    pub prompts: PromptInputs,
    /// `B x 4G x 4G`, present when every sample had a mask.
    pub masks: Option<Tensor>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.prompts.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub decoder: DecoderOutput,
    pub prompts: PromptEmbeddings,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    meta: ModelMeta,
    store: ParamStore,
    image_encoder: ImageEncoder,
    prompt_encoder: PromptEncoder,
    decoder: MaskDecoder,
    embedders: FrozenEmbedders,
}

/// Crops the box region of an `S x S x 3` image and resizes it to `side`.
pub fn crop_box(image: &Array3<f32>, bbox: &BoundingBox, side: usize) -> Result<Array3<f32>> {
    let (h, w, _) = image.dim();
    if bbox.width() < 1.0 || bbox.height() < 1.0 {
        return Err(Error::InvalidBox(format!("crop of {:?} is under one pixel", bbox.to_array())));
    }
    let (x0, y0, x1, y1) = bbox.pixel_extent(w, h);
    let region = image.slice(s![y0..y1, x0..x1, ..]);
    Ok(resize_bilinear(region, side, side))
}

impl SegModel {
    pub fn new(model: ModelConfig, modalities: ModalityRegistry, clip: ProviderConfig, dtype: DType) -> Result<Self> {
        let embedders = FrozenEmbedders::from_config(&clip, model.clip_dim, model.clip_crop)?;
        Self::with_embedders(ModelMeta { model, modalities, clip }, embedders, dtype)
    }

    pub fn with_embedders(meta: ModelMeta, embedders: FrozenEmbedders, dtype: DType) -> Result<Self> {
        let cfg = &meta.model;
        cfg.validate()?;
        if cfg.num_modalities != meta.modalities.len() {
            return Err(Error::Config(format!(
                "model has {} modality classes but the registry lists {}",
                cfg.num_modalities,
                meta.modalities.len()
            )));
        }
        if embedders.text.dim() != cfg.clip_dim || embedders.image.dim() != cfg.clip_dim {
            return Err(Error::Config("embedder width does not match model.clip_dim".into()));
        }
        let store = ParamStore::new(dtype, Device::Cpu, cfg.seed);
        let root = store.root();
        Ok(Self {
            image_encoder: ImageEncoder::new(&root.pp(IMAGE_ENCODER_PREFIX), cfg)?,
            prompt_encoder: PromptEncoder::new(&root.pp(PROMPT_ENCODER_PREFIX), cfg)?,
            decoder: MaskDecoder::new(&root.pp(MASK_DECODER_PREFIX), cfg)?,
            store,
            embedders,
            meta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.meta.model
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn registry(&self) -> &ModalityRegistry {
        &self.meta.modalities
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn embedders(&self) -> &FrozenEmbedders {
        &self.embedders
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image_encoder
    }

    pub fn prompt_encoder(&self) -> &PromptEncoder {
        &self.prompt_encoder
    }

    pub fn decoder(&self) -> &MaskDecoder {
        &self.decoder
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.store.vars()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Computes frozen embeddings and crops for one model-frame sample.
    pub fn prepare_sample(&self, sample: &SampleInstance) -> Result<PreparedSample> {
        self.prepare(&sample.slice, &sample.bbox, &sample.modality.name, Some(&sample.mask))
    }

    /// As [`Self::prepare_sample`], for a preprocessed `S x S x 3` image with
    /// a model-frame box and an optional model-frame mask.
    pub fn prepare(
        &self,
        image: &Array3<f32>,
        bbox: &BoundingBox,
        modality: &str,
        mask: Option<&Array2<bool>>,
    ) -> Result<PreparedSample> {
        let cfg = &self.meta.model;
        let s = cfg.img_size;
        if image.dim() != (s, s, 3) {
            return Err(Error::Shape(format!("slice {:?}, model expects {s}x{s}x3", image.dim())));
        }
        bbox.check_within(s, s)?;
        let modality = self.meta.modalities.get(modality)?;
        let b = cfg.prompt;
        let text_emb = b
            .use_text_clip
            .then(|| self.embedders.text.embed_text(&modality.prompt_text()))
            .transpose()?;
        let image_emb = b
            .use_image_clip
            .then(|| -> Result<_> {
                let crop = crop_box(image, bbox, cfg.clip_crop)?;
                self.embedders.image.embed_image(crop.view())
            })
            .transpose()?;
        let crop = b
            .use_cnn_encoder
            .then(|| crop_box(image, bbox, cfg.content_crop()))
            .transpose()?;
        let m = cfg.mask_size();
        let mask = mask.map(|mk| resize_nearest(mk.view(), m, m).mapv(|v| if v { 1.0 } else { 0.0 }));
        Ok(PreparedSample {
            image: image.clone(),
            bbox: *bbox,
            modality: modality.index as u32,
            text_emb,
            image_emb,
            crop,
            mask,
        })
    }

    /// Prepares every sample (in parallel when enabled) and stacks them.
    pub fn prepare_batch(&self, exec: Execution, samples: &[SampleInstance]) -> Result<PreparedBatch> {
        let prepared = exec::try_map(exec, samples, |s| self.prepare_sample(s))?;
        self.stack(&prepared)
    }

    pub fn stack(&self, prepared: &[PreparedSample]) -> Result<PreparedBatch> {
        if prepared.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let dev = Device::Cpu;
        let dt = self.dtype();
        let b = prepared.len();
        let images = images_to_tensor(&prepared.iter().map(|p| p.image.view()).collect::<Vec<_>>(), dt, &dev)?;
        let boxes: Vec<f32> = prepared.iter().flat_map(|p| p.bbox.to_array()).collect();
        let rows = |get: &dyn Fn(&PreparedSample) -> Option<&Vec<f32>>| -> Result<Option<Tensor>> {
            let Some(first) = get(&prepared[0]) else { return Ok(None) };
            let d = first.len();
            let mut v = Vec::with_capacity(b * d);
            for p in prepared {
                v.extend_from_slice(get(p).ok_or_else(|| Error::InvalidInput("mixed embedding presence".into()))?);
            }
            Ok(Some(Tensor::from_vec(v, (b, d), &dev)?.to_dtype(dt)?))
        };
        let crops = match prepared[0].crop {
            Some(_) => {
                let views = prepared
                    .iter()
                    .map(|p| p.crop.as_ref().map(|c| c.view()))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::InvalidInput("mixed crop presence".into()))?;
                Some(images_to_tensor(&views, dt, &dev)?)
            }
            None => None,
        };
        let masks = match prepared.iter().map(|p| p.mask.as_ref()).collect::<Option<Vec<_>>>() {
            Some(ms) => {
                let (h, w) = ms[0].dim();
                let v: Vec<f32> = ms.iter().flat_map(|m| m.iter().copied()).collect();
                Some(Tensor::from_vec(v, (b, h, w), &dev)?.to_dtype(dt)?)
            }
            None => None,
        };
        Ok(PreparedBatch {
            images,
            prompts: PromptInputs {
                boxes: Tensor::from_vec(boxes, (b, 4), &dev)?.to_dtype(dt)?,
                modality: prepared.iter().map(|p| p.modality).collect(),
                text_emb: rows(&|p| p.text_emb.as_ref())?,
                image_emb: rows(&|p| p.image_emb.as_ref())?,
                content_crop: crops,
            },
            masks,
        })
    }

    pub fn forward(&self, batch: &PreparedBatch) -> Result<ModelOutput> {
        let image = self.image_encoder.forward(&batch.images)?;
        let prompts = self.prompt_encoder.forward(&batch.prompts)?;
        let pe = self.prompt_encoder.dense_pe()?;
        let decoder = self
            .decoder
            .decode(&image, &pe, &prompts.sparse, &prompts.dense, &prompts.layout)?;
        Ok(ModelOutput { decoder, prompts })
    }

    /// Loss components for a forward pass; terms of disabled branches are
    /// absent.
    pub fn loss_terms(&self, out: &ModelOutput, batch: &PreparedBatch, cfg: &LossConfig) -> Result<LossTerms> {
        let masks = batch
            .masks
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("batch has no ground-truth masks".into()))?;
        let d = &out.decoder;
        let probs = candle_nn::ops::sigmoid(&d.mask_logits)?;
        let iou_target = losses::iou_targets(&d.mask_logits, masks)?;
        let iou_pred = candle_nn::ops::sigmoid(&d.iou_logit)?;
        Ok(LossTerms {
            bce: losses::bce_loss(&probs, masks)?,
            dice: losses::dice_loss(&probs, masks)?,
            iou: losses::iou_loss(&iou_pred, &iou_target)?,
            mcls: d
                .modality_logits
                .as_ref()
                .map(|l| losses::modality_cls_loss(l, &batch.prompts.modality))
                .transpose()?,
            contrastive: out
                .prompts
                .contrastive
                .as_ref()
                .map(|(dc, sc)| losses::contrastive_loss(dc, sc, cfg.logit_scale))
                .transpose()?,
        })
    }

    /// Header plus every parameter, ready for extra entries.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::with_config(&self.meta)?;
        c.add_store(&self.store);
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    /// Rebuilds the model from a checkpoint header and loads all parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let meta: ModelMeta = ckpt.config()?;
        let model = Self::new(meta.model, meta.modalities, meta.clip, dtype)?;
        let mut params = Checkpoint::new();
        params.tensors = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("optim."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        load_into(&model.store, &params, "", true)?;
        Ok(model)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path, &Device::Cpu)?, dtype)
    }
}
