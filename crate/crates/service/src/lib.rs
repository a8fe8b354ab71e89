//! JSON-over-HTTP inference API.
//!
//! The model and dataset are loaded once at startup and only read afterwards,
//! so handlers share them behind an `Arc` without locking. Every response
//! body, errors included, carries `schema_version`. The response shapes are
//! pinned in `api/schema.json`, which the browser client reads too.

pub mod error;
pub mod png;

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use candle_core::DType;
use ndarray::{Array3, Axis};
use promptseg::datamodel::{build_index, BoundingBox, CaseImage, CaseRecord, ModalityRegistry};
use promptseg::inference::predict_slice;
use promptseg::model::SegModel;
use serde::{Deserialize, Serialize};

pub use error::ApiError;

pub const SCHEMA_VERSION: &str = "1.0";

/// Loopback only; the API has no authentication.
pub const DEFAULT_ADDR: SocketAddr = SocketAddr::new(std::net::IpAddr::V4(Ipv4Addr::LOCALHOST), 8080);

/// Request bodies above this are refused before parsing.
const BODY_LIMIT: usize = 128 << 20;

#[derive(Debug)]
struct Inner {
    model: Option<SegModel>,
    registry: ModalityRegistry,
    cases: BTreeMap<String, CaseRecord>,
}

/// Read-only state shared by all handlers.
#[derive(Debug, Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// The registry comes from the model when one is loaded, otherwise from
    /// the dataset, otherwise the default challenge list.
    pub fn new(
        model: Option<SegModel>,
        cases: Vec<CaseRecord>,
        registry: Option<ModalityRegistry>,
    ) -> promptseg::Result<Self> {
        let registry = match (&model, registry) {
            (Some(m), _) => m.registry().clone(),
            (None, Some(r)) => r,
            (None, None) => ModalityRegistry::challenge(),
        };
        if registry.is_empty() {
            return Err(promptseg::Error::Config("modality registry is empty".into()));
        }
        let mut map = BTreeMap::new();
        for case in cases {
            if map.contains_key(&case.case_id) {
                return Err(promptseg::Error::Dataset(format!("duplicate case id {}", case.case_id)));
            }
            map.insert(case.case_id.clone(), case);
        }
        Ok(Self(Arc::new(Inner { model, registry, cases: map })))
    }

    /// Loads an optional checkpoint and an optional dataset root.
    pub fn load(checkpoint: Option<&Path>, data_root: Option<&Path>) -> promptseg::Result<Self> {
        let model = checkpoint.map(|p| SegModel::load(p, DType::F32)).transpose()?;
        let (cases, registry) = match data_root {
            Some(root) => {
                let index = build_index(root)?;
                let cases = index.cases().map(|d| d.load()).collect::<promptseg::Result<Vec<_>>>()?;
                log::info!("loaded {} cases from {}", cases.len(), root.display());
                (cases, Some(index.registry().clone()))
            }
            None => (Vec::new(), None),
        };
        Self::new(model, cases, registry)
    }

    pub fn registry(&self) -> &ModalityRegistry {
        &self.0.registry
    }

    pub fn model(&self) -> Option<&SegModel> {
        self.0.model.as_ref()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/modalities", get(modalities))
        .route("/api/cases", get(cases))
        .route("/api/cases/{id}/slices/{z}", get(slice))
        .route("/api/segment", post(segment))
        .fallback(|| async { ApiError::NotFound("no such endpoint".into()) })
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ModalityEntry {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ModalitiesResponse {
    pub schema_version: String,
    pub modalities: Vec<ModalityEntry>,
}

async fn modalities(State(state): State<AppState>) -> Json<ModalitiesResponse> {
    Json(ModalitiesResponse {
        schema_version: SCHEMA_VERSION.into(),
        modalities: state
            .registry()
            .iter()
            .map(|m| ModalityEntry { index: m.index, name: m.name })
            .collect(),
    })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CaseEntry {
    pub case_id: String,
    pub modality: String,
    /// 2 or 3.
    pub dims: usize,
    /// Number of slices, 1 for planar cases.
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub num_masks: u16,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CasesResponse {
    pub schema_version: String,
    pub cases: Vec<CaseEntry>,
}

async fn cases(State(state): State<AppState>) -> Json<CasesResponse> {
    let cases = state
        .0
        .cases
        .values()
        .map(|c| {
            let (z, h, w) = c.spatial_shape();
            CaseEntry {
                case_id: c.case_id.clone(),
                modality: c.modality.name.clone(),
                dims: c.dims(),
                depth: z,
                height: h,
                width: w,
                num_masks: c.num_masks(),
            }
        })
        .collect();
    Json(CasesResponse { schema_version: SCHEMA_VERSION.into(), cases })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SliceResponse {
    pub schema_version: String,
    pub case_id: String,
    pub z: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub image_b64_png: String,
}

fn lookup<'a>(state: &'a AppState, id: &str, z: usize) -> Result<&'a CaseRecord, ApiError> {
    let case = state
        .0
        .cases
        .get(id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown case `{id}`")))?;
    if z >= case.depth() {
        return Err(ApiError::NotFound(format!(
            "slice {z} out of range for case `{id}` with {} slices",
            case.depth()
        )));
    }
    Ok(case)
}

async fn slice(
    State(state): State<AppState>,
    UrlPath((id, z)): UrlPath<(String, String)>,
) -> Result<Json<SliceResponse>, ApiError> {
    let z: usize = z
        .parse()
        .map_err(|_| ApiError::NotFound(format!("slice `{z}` is not an index")))?;
    let case = lookup(&state, &id, z)?;
    let pixels: Array3<u8> = match &case.image {
        CaseImage::Planar(a) => a.clone(),
        CaseImage::Volume(a) => a.index_axis(Axis(0), z).insert_axis(Axis(2)).to_owned(),
    };
    let (height, width, channels) = pixels.dim();
    let png = png::encode_image(pixels.view())?;
    Ok(Json(SliceResponse {
        schema_version: SCHEMA_VERSION.into(),
        case_id: id,
        z,
        width,
        height,
        channels,
        image_b64_png: png::b64(&png),
    }))
}

/// Either `image_b64` or `case_id` (with `z`, default 0) selects the slice.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<usize>,
    /// `[x1, y1, x2, y2]` in pixels of the original slice.
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub modality: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SegmentResponse {
    pub schema_version: String,
    /// Single-channel PNG, 255 inside the mask, at the slice resolution.
    pub mask_b64_png: String,
    pub width: usize,
    pub height: usize,
    pub iou_pred: f32,
    pub modality_pred: Option<String>,
    pub elapsed_ms: f64,
}

async fn segment(State(state): State<AppState>, body: Bytes) -> Result<Json<SegmentResponse>, ApiError> {
    let started = Instant::now();
    let req: SegmentRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))?;
    if state.model().is_none() {
        return Err(ApiError::ModelNotLoaded);
    }
    state.registry().get(&req.modality)?;
    let bbox = BoundingBox::from_array(req.bbox)?;
    let raw = match (&req.image_b64, &req.case_id) {
        (Some(data), None) => {
            if req.z.is_some() {
                return Err(ApiError::BadRequest("`z` only applies with `case_id`".into()));
            }
            png::decode_image_b64(data)?
        }
        (None, Some(id)) => lookup(&state, id, req.z.unwrap_or(0))?.slice(req.z.unwrap_or(0))?,
        _ => {
            return Err(ApiError::BadRequest(
                "exactly one of `image_b64` and `case_id` is required".into(),
            ))
        }
    };
    let (height, width, _) = raw.dim();
    bbox.check_within(width, height)?;

    let pred = tokio::task::spawn_blocking(move || {
        let model = state.model().expect("checked above");
        predict_slice(model, raw.view(), &bbox, &req.modality)
    })
    .await
    .map_err(|e| ApiError::Internal(format!("inference task failed: {e}")))??;

    let mask = png::encode_mask(pred.mask.view())?;
    Ok(Json(SegmentResponse {
        schema_version: SCHEMA_VERSION.into(),
        mask_b64_png: png::b64(&mask),
        width,
        height,
        iou_pred: pred.iou.clamp(0.0, 1.0),
        modality_pred: pred.modality,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}
