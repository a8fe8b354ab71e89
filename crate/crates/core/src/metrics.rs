//! DSC, NSD, modality-first aggregation and the Wilcoxon signed-rank test.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// Default NSD tolerance in pixels.
pub const DEFAULT_NSD_TOLERANCE: f64 = 2.0;
/// Largest sample size handled by the exact Wilcoxon distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

fn same_dim(a: ArrayView2<bool>, b: ArrayView2<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("masks {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Dice similarity coefficient; two empty masks score 1.
pub fn dsc(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<f64> {
    same_dim(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground pixels with at least one background 4-neighbour; pixels
/// outside the image count as background.
pub fn boundary(mask: ArrayView2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        mask[[y, x]]
            && (y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask[[y - 1, x]]
                || !mask[[y + 1, x]]
                || !mask[[y, x - 1]]
                || !mask[[y, x + 1]])
    })
}

const FAR: f64 = 1e20;

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher), in place.
fn edt_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], d: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates from -inf.
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
    f.copy_from_slice(&d[..n]);
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel of
/// `seeds`; all `inf` if there are none.
pub fn distance_transform(seeds: ArrayView2<bool>) -> Array2<f64> {
    let (h, w) = seeds.dim();
    if !seeds.iter().any(|&s| s) {
        return Array2::from_elem((h, w), f64::INFINITY);
    }
    let mut g = seeds.mapv(|s| if s { 0.0 } else { FAR });
    let n = h.max(w);
    let (mut f, mut v, mut z, mut d) = (vec![0.0; n], vec![0usize; n], vec![0.0; n + 1], vec![0.0; n]);
    for x in 0..w {
        for y in 0..h {
            f[y] = g[[y, x]];
        }
        edt_1d(&mut f[..h], &mut v[..h], &mut z[..h + 1], &mut d[..h]);
        for y in 0..h {
            g[[y, x]] = f[y];
        }
    }
    for y in 0..h {
        for x in 0..w {
            f[x] = g[[y, x]];
        }
        edt_1d(&mut f[..w], &mut v[..w], &mut z[..w + 1], &mut d[..w]);
        for x in 0..w {
            g[[y, x]] = f[x].sqrt();
        }
    }
    g
}

/// Normalized surface Dice at `tolerance` pixels.
pub fn nsd(pred: ArrayView2<bool>, gt: ArrayView2<bool>, tolerance: f64) -> Result<f64> {
    same_dim(pred, gt)?;
    let (ea, eb) = (!pred.iter().any(|&v| v), !gt.iter().any(|&v| v));
    if ea && eb {
        return Ok(1.0);
    }
    if ea || eb {
        return Ok(0.0);
    }
    let ba = boundary(pred);
    let bb = boundary(gt);
    let da = distance_transform(ba.view());
    let db = distance_transform(bb.view());
    let within = |b: &Array2<bool>, dist: &Array2<f64>| {
        b.iter().zip(dist.iter()).filter(|(&on, &d)| on && d <= tolerance).count()
    };
    let total = ba.iter().filter(|&&v| v).count() + bb.iter().filter(|&&v| v).count();
    Ok((within(&ba, &db) + within(&bb, &da)) as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub case_id: String,
    pub modality: String,
    pub dsc: f64,
    pub nsd: f64,
}

/// One row per evaluated mask instance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn push(&mut self, case_id: impl Into<String>, modality: impl Into<String>, dsc: f64, nsd: f64) {
        self.rows.push(ScoreRow {
            case_id: case_id.into(),
            modality: modality.into(),
            dsc,
            nsd,
        });
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        if self.rows.is_empty() {
            w.write_record(["case_id", "modality", "dsc", "nsd"]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ScoreRow>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { rows })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Container {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub n: usize,
    pub dsc: MeanStd,
    pub nsd: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub per_modality: BTreeMap<String, ModalitySummary>,
    /// Mean and std over the modality means.
    pub overall: BTreeMap<String, MeanStd>,
}

/// Averages within each modality first, then across modality means.
pub fn aggregate(table: &ScoreTable) -> Result<Aggregate> {
    if table.rows.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate an empty score table".into()));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &table.rows {
        let g = groups.entry(&r.modality).or_default();
        g.0.push(r.dsc);
        g.1.push(r.nsd);
    }
    let per_modality: BTreeMap<String, ModalitySummary> = groups
        .iter()
        .map(|(m, (d, n))| {
            (
                m.to_string(),
                ModalitySummary {
                    n: d.len(),
                    dsc: MeanStd::of(d),
                    nsd: MeanStd::of(n),
                },
            )
        })
        .collect();
    let dsc_means: Vec<f64> = per_modality.values().map(|s| s.dsc.mean).collect();
    let nsd_means: Vec<f64> = per_modality.values().map(|s| s.nsd.mean).collect();
    let overall = [("dsc".to_string(), MeanStd::of(&dsc_means)), ("nsd".to_string(), MeanStd::of(&nsd_means))]
        .into_iter()
        .collect();
    Ok(Aggregate { per_modality, overall })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} paired scores", a.len(), b.len())));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n < 5 {
        return Err(Error::InsufficientPairs(n));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    // Doubled average ranks stay integral under ties.
    let mut ranks2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j + 1) as u64;
        ranks2[i..=j].iter_mut().for_each(|r| *r = r2);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus2: u64 = d.iter().zip(&ranks2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = ranks2.iter().sum();
    let w_plus = w_plus2 as f64 / 2.0;
    let w_minus = (total2 - w_plus2) as f64 / 2.0;
    let (p, exact) = if n <= WILCOXON_EXACT_MAX {
        // counts[s] = number of sign assignments with doubled W+ == s.
        let mut counts = vec![0f64; total2 as usize + 1];
        counts[0] = 1.0;
        for &r in &ranks2 {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w_plus2 as usize].iter().sum::<f64>() / all;
        let upper: f64 = counts[w_plus2 as usize..].iter().sum::<f64>() / all;
        ((2.0 * lower.min(upper)).min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0), false)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        p_value: p,
        exact,
    })
}

/// One prediction/ground-truth pair to score.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub case_id: String,
    pub modality: String,
    pub pred: Array2<bool>,
    pub gt: Array2<bool>,
}

/// Scores every item (in parallel when enabled), keeping input order.
pub fn score_items(exec: Execution, items: &[EvalItem], tolerance: f64) -> Result<ScoreTable> {
    let rows = exec::try_map(exec, items, |it| -> Result<ScoreRow> {
        Ok(ScoreRow {
            case_id: it.case_id.clone(),
            modality: it.modality.clone(),
            dsc: dsc(it.pred.view(), it.gt.view())?,
            nsd: nsd(it.pred.view(), it.gt.view(), tolerance)?,
        })
    })?;
    Ok(ScoreTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, y0: usize, x0: usize, s: usize) -> Array2<bool> {
        Array2::from_shape_fn((n, n), |(y, x)| y >= y0 && y < y0 + s && x >= x0 && x < x0 + s)
    }

    #[test]
    fn dsc_hand_counts() {
        let a = square(8, 0, 0, 2);
        let b = square(8, 0, 1, 2);
        assert_eq!(dsc(a.view(), b.view()).unwrap(), 0.5);
        assert_eq!(dsc(a.view(), a.view()).unwrap(), 1.0);
        assert_eq!(dsc(a.view(), square(8, 5, 5, 2).view()).unwrap(), 0.0);
        let e = Array2::from_elem((8, 8), false);
        assert_eq!(dsc(e.view(), e.view()).unwrap(), 1.0);
        assert!(dsc(a.view(), Array2::from_elem((7, 8), false).view()).is_err());
    }

    #[test]
    fn edt_matches_brute_force() {
        let seeds = Array2::from_shape_fn((13, 17), |(y, x)| (y * 7 + x * 3) % 23 == 0);
        let d = distance_transform(seeds.view());
        for ((y, x), &v) in d.indexed_iter() {
            let best = seeds
                .indexed_iter()
                .filter(|(_, &s)| s)
                .map(|((sy, sx), _)| (((sy as f64 - y as f64).powi(2) + (sx as f64 - x as f64).powi(2))).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!((v - best).abs() < 1e-12, "({y},{x}) {v} vs {best}");
        }
    }

    #[test]
    fn nsd_conventions() {
        let a = square(20, 5, 5, 6);
        assert_eq!(nsd(a.view(), a.view(), 2.0).unwrap(), 1.0);
        let shifted = square(20, 5, 6, 6);
        assert_eq!(nsd(a.view(), shifted.view(), 2.0).unwrap(), 1.0);
        let e = Array2::from_elem((20, 20), false);
        assert_eq!(nsd(e.view(), e.view(), 2.0).unwrap(), 1.0);
        assert_eq!(nsd(a.view(), e.view(), 2.0).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_is_modality_first() {
        let mut t = ScoreTable::default();
        t.push("a1", "A", 1.0, 1.0);
        t.push("a2", "A", 0.0, 0.0);
        t.push("b1", "B", 0.5, 0.5);
        let agg = aggregate(&t).unwrap();
        assert_eq!(agg.overall["dsc"].mean, 0.5);
        assert_eq!(agg.overall["dsc"].std, 0.0);
        assert!(aggregate(&ScoreTable::default()).is_err());
    }

    #[test]
    fn wilcoxon_exact_values() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.exact);
        assert!((r.p_value - 0.03125).abs() < 1e-12);
        let sym = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        assert_eq!(wilcoxon_signed_rank(&sym, &b).unwrap().p_value, 1.0);
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::InsufficientPairs(0))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let mut t = ScoreTable::default();
        t.push("c1", "CT", 0.25, 0.75);
        t.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("case_id,modality,dsc,nsd"));
        assert_eq!(ScoreTable::read_csv(&p).unwrap(), t);
    }
}
