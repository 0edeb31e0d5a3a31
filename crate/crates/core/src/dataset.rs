//! Training corpus: sampling modulation vectors, reducing them to canonical
//! form, labelling them with optimal shifts and persisting them as CSV.
//!
//! Two symmetries of the cost model shrink the input space. Permuting the
//! modules (together with their shifts) changes nothing, so vectors are
//! sorted. Complementing the whole vector (`m -> 1 - m`) multiplies harmonic
//! `n` of every module by `(-1)^(n+1)`, so magnitudes and ripple are unchanged
//! and the optimal shifts are identical. The canonical representative is whichever of `sort(m)` and
//! `sort(1 - m)` is lexicographically smaller.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonic::{
    CostModel, CostValue, CostWeights, ModulationVector, PhaseShiftVector, SystemConfig,
};
use crate::optimizer::{
    best_of, exhaustive_search_model, ga_optimize_model, GaConfig, GridSearchConfig, Source,
};

/// Grid resolution of sampled modulation indices.
pub const DEFAULT_RESOLUTION: f64 = 0.02;
/// Chebyshev distance below which two canonical vectors are duplicates.
pub const DEFAULT_EPSILON: f64 = 0.01;
/// Fraction of labelled samples tagged as test data.
pub const TEST_FRACTION: f64 = 0.15;

const FORMAT_TAG: &str = "phaseshift-dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::domain(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSample {
    /// Sorted ascending.
    pub m_canonical: ModulationVector,
    /// Whether `1 - m` was taken before sorting.
    pub complemented: bool,
    /// `permutation[i]` is the original module index of canonical slot `i`.
    pub permutation: Vec<usize>,
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn sorted_with_order(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    (order.iter().map(|&i| values[i]).collect(), order)
}

// Rounds to a 1e-12 lattice so that `1 - (1 - m)` canonicalises to the same
// floats as `m`.
fn snap(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| (v * 1e12).round() / 1e12).collect()
}

/// Chooses between `m` and `1 - m`, sorts, and records how to undo both steps.
/// Values are rounded to 12 decimal places.
pub fn canonicalize_sample(m: &ModulationVector) -> CanonicalSample {
    let (plain, plain_order) = sorted_with_order(&snap(m.values()));
    let (flipped, flipped_order) = sorted_with_order(&snap(m.complement().values()));
    let complemented = lexicographic(&flipped, &plain) == Ordering::Less;
    let (values, permutation) = if complemented {
        (flipped, flipped_order)
    } else {
        (plain, plain_order)
    };
    CanonicalSample {
        m_canonical: ModulationVector::new(values).expect("complement stays in [0, 1]"),
        complemented,
        permutation,
    }
}

/// Draws `count` vectors on the `{0, r, 2r, ..., 1}` lattice.
///
/// With `inject_extremes`, every twentieth draw has one index forced to 0 or
/// 1 (a bypassed or permanently inserted module) and, for four modules, the
/// first vector is the single-module fault case `[0.4, 0.1, 0.25, 0]`.
pub fn sample_modulation_vectors(
    module_count: usize,
    count: usize,
    resolution: f64,
    rng_seed: u64,
    inject_extremes: bool,
) -> Result<Vec<ModulationVector>> {
    if count == 0 {
        return Err(Error::domain("sample count must be at least 1"));
    }
    if module_count < 2 {
        return Err(Error::domain("need at least 2 modules"));
    }
    let levels = (1.0 / resolution).round();
    if !(resolution > 0.0) || (levels * resolution - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!(
            "resolution {resolution} does not divide 1"
        )));
    }
    let levels = levels as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(count);
    if inject_extremes && module_count == 4 {
        out.push(ModulationVector::new(vec![0.4, 0.1, 0.25, 0.0])?);
    }
    let mut draw = 0usize;
    while out.len() < count {
        let mut values: Vec<f64> = (0..module_count)
            .map(|_| rng.random_range(0..=levels) as f64 / levels as f64)
            .collect();
        if inject_extremes && draw % 20 == 0 {
            let k = rng.random_range(0..module_count);
            values[k] = if rng.random::<bool>() { 1.0 } else { 0.0 };
        }
        draw += 1;
        out.push(ModulationVector::new(values)?);
    }
    Ok(out)
}

fn chebyshev(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Canonicalises every vector and drops those within Chebyshev distance
/// `< epsilon` of an earlier kept one. Returns the kept canonical vectors in
/// input order.
pub fn dedup(vectors: &[ModulationVector], epsilon: f64) -> Result<Vec<ModulationVector>> {
    if !(epsilon > 0.0) {
        return Err(Error::domain("dedup epsilon must be positive"));
    }
    let mut kept: Vec<ModulationVector> = Vec::new();
    for v in vectors {
        let canonical = canonicalize_sample(v).m_canonical;
        // the 1e-12 slack keeps lattice neighbours exactly epsilon apart
        let duplicate = kept.iter().any(|k| {
            k.len() == canonical.len()
                && chebyshev(k.values(), canonical.values()) < epsilon - 1e-12
        });
        if !duplicate {
            kept.push(canonical);
        }
    }
    Ok(kept)
}

/// Samples and deduplicates until `count` distinct canonical vectors exist.
/// The result starts with the canonical forms of the first
/// [`sample_modulation_vectors`] draws for the same seed.
pub fn distinct_vectors(
    module_count: usize,
    count: usize,
    resolution: f64,
    epsilon: f64,
    rng_seed: u64,
    inject_extremes: bool,
) -> Result<Vec<ModulationVector>> {
    let mut drawn = count;
    loop {
        let raw = sample_modulation_vectors(module_count, drawn, resolution, rng_seed, inject_extremes)?;
        let mut kept = dedup(&raw, epsilon)?;
        if kept.len() >= count {
            kept.truncate(count);
            return Ok(kept);
        }
        if drawn >= 64 * count.max(16) {
            return Err(Error::domain(format!(
                "only {} distinct vectors found after {drawn} draws; the lattice is too coarse for {count}",
                kept.len()
            )));
        }
        drawn *= 2;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub m_canonical: ModulationVector,
    pub complemented: bool,
    pub permutation: Vec<usize>,
    pub label_shifts: PhaseShiftVector,
    pub label_cost: CostValue,
    pub label_source: Source,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub module_count: usize,
    pub config_fingerprint: String,
    pub samples: Vec<DatasetSample>,
}

/// Identifies the configuration a dataset was labelled under.
pub fn config_fingerprint(cfg: &SystemConfig, weights: &CostWeights, ga: &GaConfig) -> String {
    crate::digest(&(cfg, weights, ga))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub labeled: usize,
    /// Vectors the optimiser rejected, with the reason.
    pub dropped: Vec<(Vec<f64>, String)>,
}

fn sample_seed(base: u64, m: &[f64]) -> u64 {
    // splitmix64 over the bit patterns
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for v in m {
        state = state.wrapping_add(v.to_bits()).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

/// Labels each vector with its optimal shifts and assigns an 85/15
/// train/test split.
///
/// Each sample's GA seed is derived from `ga.rng_seed` and the canonical
/// vector, so a label does not depend on which other vectors are in the set.
/// When `grid` is given and its guard allows, the exhaustive result competes
/// with the GA and the better one is kept. Samples come out sorted by
/// canonical vector.
pub fn label_dataset(
    cfg: &SystemConfig,
    vectors: &[ModulationVector],
    weights: &CostWeights,
    ga: &GaConfig,
    grid: Option<&GridSearchConfig>,
    split_seed: u64,
) -> Result<(Dataset, LabelSummary)> {
    cfg.validate()?;
    weights.validate()?;
    ga.validate()?;
    let mut canonical: Vec<CanonicalSample> = vectors.iter().map(canonicalize_sample).collect();
    canonical.sort_by(|a, b| lexicographic(a.m_canonical.values(), b.m_canonical.values()));

    let mut summary = LabelSummary::default();
    let mut samples = Vec::with_capacity(canonical.len());
    for c in canonical {
        let m = &c.m_canonical;
        let labelled = (|| -> Result<_> {
            let model = CostModel::new(cfg, m, weights)?;
            let ga_cfg = GaConfig {
                rng_seed: sample_seed(ga.rng_seed, m.values()),
                ..ga.clone()
            };
            let mut result = ga_optimize_model(&model, m, &ga_cfg)?;
            if let Some(grid) = grid {
                let allowed = grid.predicted_iterations(cfg.module_count)?
                    <= grid.max_iterations_guard as u128;
                if allowed {
                    result = best_of(result, exhaustive_search_model(&model, m, grid)?)?;
                }
            }
            Ok(result)
        })();
        match labelled {
            Ok(result) => samples.push(DatasetSample {
                m_canonical: c.m_canonical,
                complemented: c.complemented,
                permutation: c.permutation,
                label_shifts: result.best_shifts,
                label_cost: result.best_cost,
                label_source: result.source,
                split: Split::Train,
            }),
            Err(e) => summary.dropped.push((m.values().to_vec(), e.to_string())),
        }
    }
    summary.labeled = samples.len();
    assign_splits(&mut samples, split_seed);
    Ok((
        Dataset {
            module_count: cfg.module_count,
            config_fingerprint: config_fingerprint(cfg, weights, ga),
            samples,
        },
        summary,
    ))
}

fn assign_splits(samples: &mut [DatasetSample], seed: u64) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = (samples.len() as f64 * TEST_FRACTION).round() as usize;
    for (rank, &i) in order.iter().enumerate() {
        samples[i].split = if rank < test { Split::Test } else { Split::Train };
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Re-evaluates every label and returns the largest deviation from the
    /// stored total cost.
    pub fn max_cost_deviation(&self, cfg: &SystemConfig, weights: &CostWeights) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for s in &self.samples {
            let model = CostModel::new(cfg, &s.m_canonical, weights)?;
            let total = model.evaluate(s.label_shifts.angles()).total;
            worst = worst.max((total - s.label_cost.total).abs());
        }
        Ok(worst)
    }

    pub fn to_csv(&self) -> String {
        let n = self.module_count;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {FORMAT_TAG} fingerprint={} modules={n} samples={}",
            self.config_fingerprint,
            self.samples.len()
        );
        let mut header: Vec<String> = (1..=n).map(|k| format!("m_{k}")).collect();
        header.extend((1..=n).map(|k| format!("phi_{k}")));
        header.extend(
            [
                "cost_total",
                "cost_ripple",
                "cost_wthd",
                "source",
                "split",
                "complemented",
                "permutation",
                "baseline_ripple",
                "baseline_wthd",
            ]
            .map(String::from),
        );
        out.push_str(&header.join(","));
        out.push('\n');
        for s in &self.samples {
            let mut fields: Vec<String> = s.m_canonical.values().iter().map(f64::to_string).collect();
            fields.extend(s.label_shifts.angles().iter().map(f64::to_string));
            let c = &s.label_cost;
            fields.extend([c.total, c.ripple_component, c.wthd_component].map(|v| v.to_string()));
            fields.push(s.label_source.to_string());
            fields.push(s.split.to_string());
            fields.push(s.complemented.to_string());
            fields.push(
                s.permutation
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(";"),
            );
            fields.push(c.baseline_ripple.to_string());
            fields.push(c.baseline_wthd.to_string());
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, meta) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty dataset file".into(),
        })?;
        let meta = meta
            .strip_prefix("# ")
            .and_then(|m| m.strip_prefix(FORMAT_TAG))
            .ok_or(Error::Parse {
                line: 1,
                message: format!("missing '# {FORMAT_TAG}' metadata line"),
            })?;
        let mut fingerprint = None;
        let mut modules = None;
        let mut expected = None;
        for item in meta.split_whitespace() {
            match item.split_once('=') {
                Some(("fingerprint", v)) => fingerprint = Some(v.to_string()),
                Some(("modules", v)) => modules = v.parse::<usize>().ok(),
                Some(("samples", v)) => expected = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        let bad_meta = |what: &str| Error::Parse {
            line: 1,
            message: format!("metadata lacks a valid {what}"),
        };
        let fingerprint = fingerprint.ok_or_else(|| bad_meta("fingerprint"))?;
        let n = modules.ok_or_else(|| bad_meta("module count"))?;
        let expected = expected.ok_or_else(|| bad_meta("sample count"))?;
        let columns = 2 * n + 9;
        let (line, header) = lines.next().ok_or(Error::Parse {
            line: 2,
            message: "missing header".into(),
        })?;
        if header.split(',').count() != columns {
            return Err(Error::Parse {
                line,
                message: format!("header has {} columns, expected {columns}", header.split(',').count()),
            });
        }

        let mut samples = Vec::with_capacity(expected);
        for (line, row) in lines {
            if row.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line, message };
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != columns {
                return Err(parse_err(format!(
                    "row has {} fields, expected {columns}",
                    fields.len()
                )));
            }
            let num = |i: usize| -> Result<f64> {
                fields[i]
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("column {}: {e}", i + 1)))
            };
            let m = (0..n).map(num).collect::<Result<Vec<_>>>()?;
            let phi = (n..2 * n).map(num).collect::<Result<Vec<_>>>()?;
            let base = 2 * n;
            let cost = CostValue {
                total: num(base)?,
                ripple_component: num(base + 1)?,
                wthd_component: num(base + 2)?,
                baseline_ripple: num(base + 7)?,
                baseline_wthd: num(base + 8)?,
            };
            let permutation = fields[base + 6]
                .split(';')
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("permutation: {e}")))?;
            if permutation.len() != n {
                return Err(parse_err(format!("permutation has {} entries", permutation.len())));
            }
            samples.push(DatasetSample {
                m_canonical: ModulationVector::new(m).map_err(|e| parse_err(e.to_string()))?,
                complemented: fields[base + 5]
                    .parse::<bool>()
                    .map_err(|e| parse_err(format!("complemented: {e}")))?,
                permutation,
                label_shifts: PhaseShiftVector::new(phi).map_err(|e| parse_err(e.to_string()))?,
                label_cost: cost,
                label_source: fields[base + 3].parse().map_err(|e: Error| parse_err(e.to_string()))?,
                split: fields[base + 4].parse().map_err(|e: Error| parse_err(e.to_string()))?,
            });
        }
        if samples.len() != expected {
            return Err(Error::Parse {
                line: text.lines().count(),
                message: format!(
                    "file ends after {} samples, metadata promises {expected}",
                    samples.len()
                ),
            });
        }
        Ok(Dataset {
            module_count: n,
            config_fingerprint: fingerprint,
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Loads a dataset and checks it was produced for `module_count` modules
    /// under the configuration with the given fingerprint.
    pub fn load_compatible(
        path: impl AsRef<Path>,
        module_count: usize,
        fingerprint: &str,
    ) -> Result<Self> {
        let dataset = Dataset::load(path)?;
        if dataset.module_count != module_count {
            return Err(Error::Incompatible(format!(
                "dataset holds {}-module samples, configuration has {module_count} modules",
                dataset.module_count
            )));
        }
        if dataset.config_fingerprint != fingerprint {
            return Err(Error::Incompatible(format!(
                "dataset fingerprint {} does not match configuration fingerprint {fingerprint}",
                dataset.config_fingerprint
            )));
        }
        Ok(dataset)
    }
}
