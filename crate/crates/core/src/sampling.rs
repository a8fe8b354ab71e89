//! Slice, case and modality-balanced sampling of training instances.
//!
//! The modality strategy draws, per sample, a modality uniformly, then a case
//! of that modality, then a slice of that case, then one of the masks on the
//! slice. Case sampling pools every case regardless of modality; slice
//! sampling pools every slice of every case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{CaseDescriptor, DatasetIndex};
use crate::error::{Error, Result};

/// Retries of the slice index within one case before a new case is drawn.
const SLICE_RETRIES: usize = 16;
/// Hard cap on redraws before giving up.
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Slice,
    Case,
    #[default]
    Modality,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slice" => Ok(Strategy::Slice),
            "case" => Ok(Strategy::Case),
            "modality" => Ok(Strategy::Modality),
            other => Err(Error::Config(format!(
                "unknown sampling strategy `{other}` (expected slice|case|modality)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Slice => "slice",
            Strategy::Case => "case",
            Strategy::Modality => "modality",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub seed: u64,
    /// Cycle modalities in order instead of drawing them; demo use only.
    pub round_robin: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Modality,
            batch_size: 16,
            seed: 0,
            round_robin: false,
        }
    }
}

/// A sampled `(case, slice, mask)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Draw {
    pub modality: usize,
    /// Position of the case within its modality.
    pub case: usize,
    /// Slice index; `None` for planar cases.
    pub z: Option<usize>,
    /// Index `k` into the labels present on the slice.
    pub mask: usize,
    /// The instance label that index `k` resolves to.
    pub label: u16,
}

impl Draw {
    pub fn slice_index(&self) -> usize {
        self.z.unwrap_or(0)
    }

    pub fn descriptor<'a>(&self, index: &'a DatasetIndex) -> &'a CaseDescriptor {
        &index.cases_of(self.modality)[self.case]
    }
}

/// Number of batches per epoch: cases / B for case and modality sampling,
/// slices / B for slice sampling (floored, at least 1).
pub fn epoch_length(index: &DatasetIndex, strategy: Strategy, batch_size: usize) -> usize {
    let total = match strategy {
        Strategy::Slice => index.total_slices(),
        Strategy::Case | Strategy::Modality => index.total_cases(),
    };
    (total / batch_size.max(1)).max(1)
}

/// Stateful sampler over a borrowed index.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    index: &'a DatasetIndex,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
    /// `(modality, case)` of every case, for pooled draws.
    pooled: Vec<(usize, usize)>,
    /// Cumulative slice counts over `pooled`.
    slice_cdf: Vec<usize>,
    next_modality: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(index: &'a DatasetIndex, cfg: SamplerConfig) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if index.total_cases() == 0 {
            return Err(Error::Dataset("cannot sample from an empty index".into()));
        }
        if cfg.strategy == Strategy::Modality {
            if let Some(m) = index.counts().iter().position(|&c| c == 0) {
                return Err(Error::Dataset(format!(
                    "modality `{}` has no cases; modality sampling needs at least one per modality",
                    index.registry().names()[m]
                )));
            }
        }
        let pooled: Vec<(usize, usize)> = (0..index.num_modalities())
            .flat_map(|m| (0..index.cases_of(m).len()).map(move |c| (m, c)))
            .collect();
        let mut acc = 0;
        let slice_cdf = pooled
            .iter()
            .map(|&(m, c)| {
                acc += index.cases_of(m)[c].depth();
                acc
            })
            .collect();
        Ok(Self {
            index,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            pooled,
            slice_cdf,
            next_modality: 0,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Restores the RNG stream, e.g. when resuming training.
    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn next_batch(&mut self) -> Result<Vec<Draw>> {
        (0..self.cfg.batch_size).map(|_| self.draw()).collect()
    }

    pub fn draw(&mut self) -> Result<Draw> {
        match self.cfg.strategy {
            Strategy::Modality => self.draw_modality(),
            Strategy::Case => self.draw_case(),
            Strategy::Slice => self.draw_slice(),
        }
    }

    fn draw_modality(&mut self) -> Result<Draw> {
        let n = self.index.num_modalities();
        let m = if self.cfg.round_robin {
            let m = self.next_modality;
            self.next_modality = (m + 1) % n;
            m
        } else {
            self.rng.random_range(0..n)
        };
        for _ in 0..MAX_REDRAWS {
            let c = self.rng.random_range(0..self.index.cases_of(m).len());
            if let Some(d) = self.draw_in_case(m, c) {
                return Ok(d);
            }
        }
        Err(self.exhausted())
    }

    fn draw_case(&mut self) -> Result<Draw> {
        for _ in 0..MAX_REDRAWS {
            let (m, c) = self.pooled[self.rng.random_range(0..self.pooled.len())];
            if let Some(d) = self.draw_in_case(m, c) {
                return Ok(d);
            }
        }
        Err(self.exhausted())
    }

    fn draw_slice(&mut self) -> Result<Draw> {
        let total = *self.slice_cdf.last().expect("non-empty index");
        for _ in 0..MAX_REDRAWS {
            let s = self.rng.random_range(0..total);
            let i = self.slice_cdf.partition_point(|&acc| acc <= s);
            let (m, c) = self.pooled[i];
            let start = if i == 0 { 0 } else { self.slice_cdf[i - 1] };
            let desc = &self.index.cases_of(m)[c];
            let z = s - start;
            let labels = &desc.slice_labels[z];
            if labels.is_empty() {
                continue;
            }
            let k = self.rng.random_range(0..labels.len());
            return Ok(Draw {
                modality: m,
                case: c,
                z: (desc.dims == 3).then_some(z),
                mask: k,
                label: labels[k],
            });
        }
        Err(self.exhausted())
    }

    /// Slice then mask within one case; `None` if every retry hit an empty slice.
    fn draw_in_case(&mut self, m: usize, c: usize) -> Option<Draw> {
        let desc = &self.index.cases_of(m)[c];
        let depth = desc.depth();
        for _ in 0..SLICE_RETRIES {
            let z = if desc.dims == 3 {
                self.rng.random_range(0..depth)
            } else {
                0
            };
            let labels = &desc.slice_labels[z];
            if labels.is_empty() {
                continue;
            }
            let k = self.rng.random_range(0..labels.len());
            return Some(Draw {
                modality: m,
                case: c,
                z: (desc.dims == 3).then_some(z),
                mask: k,
                label: labels[k],
            });
        }
        None
    }

    fn exhausted(&self) -> Error {
        Error::Dataset("sampler could not find a slice with a non-empty mask".into())
    }
}
