use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn};
use ndarray_npy::{NpzReader, NpzWriter};

use super::modality::ModalityId;
use crate::error::{Error, Result};

/// Pixel data of a case: an RGB image or a single-channel volume.
#[derive(Debug, Clone, PartialEq)]
pub enum CaseImage {
    /// `H x W x 3`.
    Planar(Array3<u8>),
    /// `Z x H x W`.
    Volume(Array3<u8>),
}

/// One imaging case with its instance-labelled ground truth.
///
/// `gt` is always stored as `Z x H x W` (`Z = 1` for planar cases); label 0 is
/// background and labels `1..=K` are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub modality: ModalityId,
    pub image: CaseImage,
    pub gt: Array3<u16>,
}

impl CaseRecord {
    pub fn new(
        case_id: impl Into<String>,
        modality: ModalityId,
        image: CaseImage,
        gt: Array3<u16>,
    ) -> Result<Self> {
        let rec = Self {
            case_id: case_id.into(),
            modality,
            image,
            gt,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn validate(&self) -> Result<()> {
        let (z, h, w) = self.spatial_shape();
        if self.gt.dim() != (z, h, w) {
            return Err(Error::Shape(format!(
                "case {}: gts {:?} do not match image spatial shape {:?}",
                self.case_id,
                self.gt.dim(),
                (z, h, w)
            )));
        }
        if h == 0 || w == 0 || z == 0 {
            return Err(Error::Shape(format!("case {}: empty image", self.case_id)));
        }
        let k = self.num_masks();
        if k == 0 {
            return Err(Error::Dataset(format!(
                "case {}: no foreground label",
                self.case_id
            )));
        }
        let mut seen = vec![false; k as usize + 1];
        for &l in self.gt.iter() {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=k as usize).find(|&l| !seen[l]) {
            return Err(Error::Dataset(format!(
                "case {}: labels must be contiguous 1..{k}, label {missing} is missing",
                self.case_id
            )));
        }
        Ok(())
    }

    /// `(Z, H, W)`, with `Z = 1` for planar cases.
    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        match &self.image {
            CaseImage::Planar(a) => (1, a.dim().0, a.dim().1),
            CaseImage::Volume(a) => a.dim(),
        }
    }

    pub fn dims(&self) -> usize {
        match self.image {
            CaseImage::Planar(_) => 2,
            CaseImage::Volume(_) => 3,
        }
    }

    pub fn depth(&self) -> usize {
        self.spatial_shape().0
    }

    /// Number of instance masks `K` (highest label).
    pub fn num_masks(&self) -> u16 {
        self.gt.iter().copied().max().unwrap_or(0)
    }

    /// Raw slice `z` as `H x W x C` floats (`C = 3` planar, `C = 1` volume).
    pub fn slice(&self, z: usize) -> Result<Array3<f32>> {
        self.check_z(z)?;
        Ok(match &self.image {
            CaseImage::Planar(a) => a.mapv(f32::from),
            CaseImage::Volume(a) => a
                .index_axis(Axis(0), z)
                .mapv(f32::from)
                .insert_axis(Axis(2)),
        })
    }

    pub fn gt_slice(&self, z: usize) -> Result<ArrayView2<'_, u16>> {
        self.check_z(z)?;
        Ok(self.gt.index_axis(Axis(0), z))
    }

    /// Binary mask of `label` on slice `z`.
    pub fn label_mask(&self, z: usize, label: u16) -> Result<Array2<bool>> {
        Ok(self.gt_slice(z)?.mapv(|l| l == label))
    }

    /// Sorted labels present on each slice.
    pub fn slice_labels(&self) -> Vec<Vec<u16>> {
        let k = self.num_masks() as usize;
        self.gt
            .outer_iter()
            .map(|sl| {
                let mut seen = vec![false; k + 1];
                for &l in sl.iter() {
                    seen[l as usize] = true;
                }
                (1..=k).filter(|&l| seen[l]).map(|l| l as u16).collect()
            })
            .collect()
    }

    fn check_z(&self, z: usize) -> Result<()> {
        let depth = self.depth();
        if z >= depth {
            return Err(Error::InvalidInput(format!(
                "slice {z} out of range for case {} with {depth} slices",
                self.case_id
            )));
        }
        Ok(())
    }
}

fn container_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Container {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes the case as an `.npz` container with arrays `imgs` and `gts`.
///
/// Planar cases store `imgs: H x W x 3` and `gts: H x W`; volumes store
/// `imgs: Z x H x W` and `gts: Z x H x W`.
pub fn write_case(path: &Path, case: &CaseRecord) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzWriter::new_compressed(BufWriter::new(file));
    match &case.image {
        CaseImage::Planar(img) => {
            npz.add_array("imgs", img).map_err(|e| container_err(path, e))?;
            let gt = case.gt.index_axis(Axis(0), 0).to_owned();
            npz.add_array("gts", &gt).map_err(|e| container_err(path, e))?;
        }
        CaseImage::Volume(img) => {
            npz.add_array("imgs", img).map_err(|e| container_err(path, e))?;
            npz.add_array("gts", &case.gt)
                .map_err(|e| container_err(path, e))?;
        }
    }
    npz.finish().map_err(|e| container_err(path, e))?;
    Ok(())
}

fn read_labels(npz: &mut NpzReader<File>, path: &Path) -> Result<ArrayD<u16>> {
    fn widen<T: Copy + TryInto<u16>>(a: ArrayD<T>, path: &Path) -> Result<ArrayD<u16>> {
        let mut out = ArrayD::<u16>::zeros(a.raw_dim());
        for (o, v) in out.iter_mut().zip(a.iter()) {
            *o = (*v)
                .try_into()
                .map_err(|_| container_err(path, "label value out of range"))?;
        }
        Ok(out)
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<u16>, IxDyn>("gts") {
        return Ok(a);
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<u8>, IxDyn>("gts") {
        return Ok(a.mapv(u16::from));
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<i32>, IxDyn>("gts") {
        return widen(a, path);
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<i64>, IxDyn>("gts") {
        return widen(a, path);
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<u32>, IxDyn>("gts") {
        return widen(a, path);
    }
    Err(container_err(
        path,
        "missing array `gts` (or unsupported label dtype)",
    ))
}

/// Loads a case container. Dimensionality follows the rank of `gts`:
/// rank 2 is a planar case, rank 3 a volume.
pub fn load_case(path: &Path, case_id: &str, modality: ModalityId) -> Result<CaseRecord> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzReader::new(file).map_err(|e| container_err(path, e))?;
    let imgs = npz
        .by_name::<ndarray::OwnedRepr<u8>, IxDyn>("imgs")
        .map_err(|e| container_err(path, format!("array `imgs`: {e}")))?;
    let gts = read_labels(&mut npz, path)?;
    let (image, gt) = match gts.ndim() {
        2 => {
            let gt = gts
                .into_dimensionality::<Ix2>()
                .map_err(|e| container_err(path, e))?;
            let img = match imgs.ndim() {
                2 => {
                    let g = imgs
                        .into_dimensionality::<Ix2>()
                        .map_err(|e| container_err(path, e))?;
                    let (h, w) = g.dim();
                    Array3::from_shape_fn((h, w, 3), |(y, x, _)| g[[y, x]])
                }
                3 => imgs
                    .into_dimensionality::<Ix3>()
                    .map_err(|e| container_err(path, e))?,
                r => {
                    return Err(Error::Shape(format!(
                        "{}: planar `imgs` must have rank 2 or 3, got {r}",
                        path.display()
                    )))
                }
            };
            if img.dim().2 != 3 {
                return Err(Error::Shape(format!(
                    "{}: planar `imgs` must have 3 channels, got {}",
                    path.display(),
                    img.dim().2
                )));
            }
            (CaseImage::Planar(img), gt.insert_axis(Axis(0)))
        }
        3 => {
            let img = imgs
                .into_dimensionality::<Ix3>()
                .map_err(|_| Error::Shape(format!("{}: volume `imgs` must have rank 3", path.display())))?;
            let gt = gts
                .into_dimensionality::<Ix3>()
                .map_err(|e| container_err(path, e))?;
            (CaseImage::Volume(img), gt)
        }
        r => {
            return Err(Error::Shape(format!(
                "{}: `gts` must have rank 2 or 3, got {r}",
                path.display()
            )))
        }
    };
    CaseRecord::new(case_id, modality, image, gt)
}

/// Crops a volume or planar case to slices `range` (used by tooling and tests).
pub fn sub_volume(case: &CaseRecord, range: std::ops::Range<usize>) -> Result<CaseRecord> {
    match &case.image {
        CaseImage::Planar(_) => Ok(case.clone()),
        CaseImage::Volume(v) => {
            let img = v.slice(s![range.clone(), .., ..]).to_owned();
            let gt = case.gt.slice(s![range, .., ..]).to_owned();
            CaseRecord::new(case.case_id.clone(), case.modality.clone(), CaseImage::Volume(img), gt)
        }
    }
}
