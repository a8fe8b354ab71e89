//! Slice-wise prediction from user boxes, batch inference over cases and
//! GT-box evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use ndarray_npy::NpzWriter;
use serde::{Deserialize, Serialize};

use crate::datamodel::{preprocess_slice, tight_box, BoundingBox, CaseRecord};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::mask_decoder::postprocess_mask;
use crate::metrics::EvalItem;
use crate::model::SegModel;

/// Logit threshold for binarising masks (probability 0.5).
pub const MASK_THRESHOLD: f32 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SlicePrediction {
    /// Mask at the input slice resolution.
    pub mask: Array2<bool>,
    /// Predicted IoU in `[0, 1]`.
    pub iou: f32,
    /// Arg-max modality name, when the modality branch is on.
    pub modality: Option<String>,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps a box from a `w x h` slice to the `s x s` model frame.
pub fn to_model_frame(b: &BoundingBox, w: usize, h: usize, s: usize) -> BoundingBox {
    b.rescale(w, h, s, s)
}

pub fn from_model_frame(b: &BoundingBox, w: usize, h: usize, s: usize) -> BoundingBox {
    b.rescale(s, s, w, h)
}

/// Segments every box on one raw `H x W x C` slice (`C` 1 or 3).
pub fn predict_boxes(
    model: &SegModel,
    raw: ArrayView3<f32>,
    boxes: &[BoundingBox],
    modality: &str,
) -> Result<Vec<SlicePrediction>> {
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w, _) = raw.dim();
    let s = model.config().img_size;
    let image = preprocess_slice(raw, s)?;
    let prepared = boxes
        .iter()
        .map(|b| {
            b.check_within(w, h)?;
            model.prepare(&image, &to_model_frame(b, w, h, s), modality, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = model.stack(&prepared)?;
    let out = model.forward(&batch)?.decoder;
    let f32_out = |t: &candle_core::Tensor| t.to_dtype(candle_core::DType::F32);
    let logits = f32_out(&out.mask_logits)?;
    let (_, mh, mw) = logits.dims3()?;
    let logits = Array3::from_shape_vec((boxes.len(), mh, mw), logits.flatten_all()?.to_vec1::<f32>()?)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let ious = f32_out(&out.iou_logit)?.to_vec1::<f32>()?;
    let modality_pred = match &out.modality_logits {
        Some(l) => {
            let idx = l.argmax(1)?.to_vec1::<u32>()?;
            idx.iter()
                .map(|&i| model.registry().by_index(i as usize).map(|m| Some(m.name)))
                .collect::<Result<Vec<_>>>()?
        }
        None => vec![None; boxes.len()],
    };
    Ok((0..boxes.len())
        .map(|i| SlicePrediction {
            mask: postprocess_mask(logits.index_axis(Axis(0), i), s, (h, w), MASK_THRESHOLD),
            iou: sigmoid(ious[i]),
            modality: modality_pred[i].clone(),
        })
        .collect())
}

pub fn predict_slice(model: &SegModel, raw: ArrayView3<f32>, bbox: &BoundingBox, modality: &str) -> Result<SlicePrediction> {
    Ok(predict_boxes(model, raw, std::slice::from_ref(bbox), modality)?.remove(0))
}

/// Boxes per slice index.
pub type SliceBoxes = BTreeMap<usize, Vec<BoundingBox>>;

/// Predicts each boxed slice independently and stacks a `Z x H x W` label
/// volume; box `i` on a slice writes label `i + 1`, later boxes on top.
/// Slices without boxes stay zero.
pub fn predict_case(model: &SegModel, case: &CaseRecord, boxes: &SliceBoxes, exec: Execution) -> Result<ndarray::Array3<u16>> {
    let (z, h, w) = case.spatial_shape();
    if let Some((&bad, _)) = boxes.iter().find(|(&k, _)| k >= z) {
        return Err(Error::InvalidInput(format!("box slice {bad} out of range for depth {z}")));
    }
    let jobs: Vec<(usize, &Vec<BoundingBox>)> = boxes.iter().map(|(k, v)| (*k, v)).collect();
    let preds = exec::try_map(exec, &jobs, |(k, bs)| {
        let raw = case.slice(*k)?;
        predict_boxes(model, raw.view(), bs, &case.modality.name)
    })?;
    let mut out = ndarray::Array3::<u16>::zeros((z, h, w));
    for ((k, _), ps) in jobs.iter().zip(preds) {
        for (i, p) in ps.iter().enumerate() {
            let mut plane = out.index_axis_mut(Axis(0), *k);
            ndarray::Zip::from(&mut plane).and(&p.mask).for_each(|o, &m| {
                if m {
                    *o = (i + 1) as u16;
                }
            });
        }
    }
    Ok(out)
}

/// `{case_id: {slice_idx: [[x1, y1, x2, y2], ...]}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoxesFile(pub BTreeMap<String, BTreeMap<String, Vec<[f32; 4]>>>);

impl BoxesFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn case_boxes(&self, case_id: &str) -> Result<Option<SliceBoxes>> {
        let Some(slices) = self.0.get(case_id) else { return Ok(None) };
        let mut out = SliceBoxes::new();
        for (k, bs) in slices {
            let z: usize = k
                .parse()
                .map_err(|_| Error::InvalidInput(format!("slice key `{k}` of {case_id} is not an index")))?;
            out.insert(z, bs.iter().map(|b| BoundingBox::from_array(*b)).collect::<Result<_>>()?);
        }
        Ok(Some(out))
    }

    pub fn insert(&mut self, case_id: &str, boxes: &SliceBoxes) {
        let entry = self.0.entry(case_id.to_string()).or_default();
        for (z, bs) in boxes {
            entry.insert(z.to_string(), bs.iter().map(BoundingBox::to_array).collect());
        }
    }
}

/// Tight GT boxes (no jitter) for every label on every slice, at the
/// original resolution, ordered by label.
pub fn gt_boxes(case: &CaseRecord) -> Result<Vec<(usize, u16, BoundingBox)>> {
    let mut out = Vec::new();
    for (z, labels) in case.slice_labels().iter().enumerate() {
        for &l in labels {
            let m = case.label_mask(z, l)?;
            if let Some((x0, y0, x1, y1)) = tight_box(m.view()) {
                out.push((z, l, BoundingBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32)?));
            }
        }
    }
    Ok(out)
}

/// Writes `segs` (planar `H x W`, volume `Z x H x W`) to an `.npz`.
pub fn write_prediction(path: &Path, case: &CaseRecord, segs: &ndarray::Array3<u16>) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| Error::Container {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzWriter::new_compressed(BufWriter::new(file));
    if case.dims() == 2 {
        npz.add_array("segs", &segs.index_axis(Axis(0), 0).to_owned()).map_err(|e| err(&e))?;
    } else {
        npz.add_array("segs", segs).map_err(|e| err(&e))?;
    }
    npz.finish().map_err(|e| err(&e))?;
    Ok(())
}

/// One GT-boxed prediction, ready for scoring.
#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub item: EvalItem,
    pub modality_pred: Option<String>,
}

/// Predicts every labelled instance of `case` from its tight GT box.
pub fn evaluate_case(model: &SegModel, case: &CaseRecord) -> Result<Vec<InstanceResult>> {
    let boxes = gt_boxes(case)?;
    let mut by_slice: BTreeMap<usize, Vec<(u16, BoundingBox)>> = BTreeMap::new();
    for (z, l, b) in boxes {
        by_slice.entry(z).or_default().push((l, b));
    }
    let mut out = Vec::new();
    for (z, items) in by_slice {
        let raw = case.slice(z)?;
        let bs: Vec<BoundingBox> = items.iter().map(|(_, b)| *b).collect();
        let preds = predict_boxes(model, raw.view(), &bs, &case.modality.name)?;
        for ((l, _), p) in items.into_iter().zip(preds) {
            out.push(InstanceResult {
                item: EvalItem {
                    case_id: case.case_id.clone(),
                    modality: case.modality.name.clone(),
                    pred: p.mask,
                    gt: case.label_mask(z, l)?,
                },
                modality_pred: p.modality,
            });
        }
    }
    Ok(out)
}

/// Runs [`evaluate_case`] over many cases (in parallel when enabled).
pub fn evaluate_cases<'a>(
    model: &SegModel,
    cases: &[&'a CaseRecord],
    exec: Execution,
) -> Result<Vec<InstanceResult>> {
    Ok(exec::try_map(exec, cases, |c| evaluate_case(model, c))?.into_iter().flatten().collect())
}
