//! Network versus optimiser versus conventional carriers: per-vector
//! records, aggregate statistics, operating-point tables, latency and
//! plot data.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{canonicalize_sample, Dataset};
use crate::error::{Error, Result};
use crate::harmonic::{conventional_shifts, CostModel, CostValue, CostWeights, ModulationVector, PhaseShiftVector};
use crate::inference::InferenceContext;
use crate::optimizer::{ga_optimize_model, GaConfig};

/// Operating points with one failed module and with both polarities of an
/// unbalanced four-module string.
pub const REFERENCE_SCENARIOS: [[f64; 4]; 4] = [
    [0.15, 0.3, 0.4, 0.45],
    [0.55, 0.7, 0.8, 0.95],
    [0.2, 0.35, 0.6, 0.8],
    [0.4, 0.1, 0.25, 0.0],
];

/// Outcome bands, checked in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// `cost_nn <= 1.01 cost_ga`.
    Within1pctOfGa,
    /// `cost_nn < cost_conventional`.
    BeatsConventional,
    /// `cost_nn <= 1.01 cost_conventional`.
    Within1pctOfConventional,
    Worse,
}

impl Classification {
    pub fn classify(cost_nn: f64, cost_ga: Option<f64>, cost_conventional: f64) -> Self {
        if cost_ga.is_some_and(|ga| cost_nn <= 1.01 * ga) {
            Classification::Within1pctOfGa
        } else if cost_nn < cost_conventional {
            Classification::BeatsConventional
        } else if cost_nn <= 1.01 * cost_conventional {
            Classification::Within1pctOfConventional
        } else {
            Classification::Worse
        }
    }

    /// Green for the two acceptable bands, gray otherwise.
    pub fn color(self) -> &'static str {
        match self {
            Classification::Within1pctOfGa | Classification::BeatsConventional => "green",
            _ => "gray",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Classification::Within1pctOfGa => "within_1pct_of_ga",
            Classification::BeatsConventional => "beats_conventional",
            Classification::Within1pctOfConventional => "within_1pct_of_conventional",
            Classification::Worse => "worse",
        }
    }
}

/// `100 (1 - optimised / conventional)`; 0 when both are zero.
pub fn reduction_pct(optimised: f64, conventional: f64) -> f64 {
    if conventional == 0.0 {
        if optimised == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        100.0 * (1.0 - optimised / conventional)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub m: Vec<f64>,
    pub nn_shifts: Vec<f64>,
    pub cost_nn: CostValue,
    pub cost_ga: Option<CostValue>,
    pub cost_conventional: CostValue,
    pub classification: Classification,
    pub ripple_reduction_pct: f64,
    pub wthd_reduction_pct: f64,
    pub nn_seconds: f64,
    pub ga_seconds: Option<f64>,
}

impl EvalRecord {
    pub fn total_reduction_pct(&self) -> f64 {
        reduction_pct(self.cost_nn.total, self.cost_conventional.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    /// Vectors skipped because no module switches.
    pub skipped: usize,
    /// Assessed vectors that also occur in the training set.
    pub training_overlap: usize,
    /// Within 1% of the GA or better than conventional.
    pub fraction_match_or_exceed: f64,
    pub fraction_within_1pct_of_ga: Option<f64>,
    pub fraction_beats_conventional: f64,
    pub mean_total_reduction_pct: f64,
    pub mean_ripple_reduction_pct: f64,
    pub median_ripple_reduction_pct: f64,
    pub mean_wthd_reduction_pct: f64,
    pub median_wthd_reduction_pct: f64,
    pub mean_nn_seconds: f64,
    pub mean_ga_seconds: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

impl EvalReport {
    /// Aggregates records; the result depends only on the record set, not
    /// on its order.
    pub fn from_records(records: &[EvalRecord], skipped: usize, training_overlap: usize) -> Self {
        let mut sorted: Vec<&EvalRecord> = records.iter().collect();
        sorted.sort_by(|a, b| {
            a.m.iter()
                .zip(&b.m)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n = sorted.len().max(1) as f64;
        let count = |pred: &dyn Fn(&EvalRecord) -> bool| sorted.iter().filter(|r| pred(r)).count() as f64 / n;
        let has_ga = !sorted.is_empty() && sorted.iter().all(|r| r.cost_ga.is_some());
        EvalReport {
            records: sorted.len(),
            skipped,
            training_overlap,
            fraction_match_or_exceed: count(&|r| r.classification.color() == "green"),
            fraction_within_1pct_of_ga: has_ga
                .then(|| count(&|r| r.classification == Classification::Within1pctOfGa)),
            fraction_beats_conventional: count(&|r| r.cost_nn.total < r.cost_conventional.total),
            mean_total_reduction_pct: mean(sorted.iter().map(|r| r.total_reduction_pct())),
            mean_ripple_reduction_pct: mean(sorted.iter().map(|r| r.ripple_reduction_pct)),
            median_ripple_reduction_pct: median(sorted.iter().map(|r| r.ripple_reduction_pct).collect()),
            mean_wthd_reduction_pct: mean(sorted.iter().map(|r| r.wthd_reduction_pct)),
            median_wthd_reduction_pct: median(sorted.iter().map(|r| r.wthd_reduction_pct).collect()),
            mean_nn_seconds: mean(sorted.iter().map(|r| r.nn_seconds)),
            mean_ga_seconds: has_ga.then(|| mean(sorted.iter().filter_map(|r| r.ga_seconds))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub records: Vec<EvalRecord>,
    pub report: EvalReport,
}

/// Scores one vector. Strings longer than the network's module count go
/// through partitioned prediction.
pub fn assess_vector(
    ctx: &InferenceContext,
    m: &ModulationVector,
    weights: &CostWeights,
    ga: Option<&GaConfig>,
) -> Result<EvalRecord> {
    let cfg = &ctx.cfg;
    let model = CostModel::new(cfg, m, weights)?;
    let start = Instant::now();
    let nn_shifts = predicted_shifts(ctx, m)?;
    let nn_seconds = start.elapsed().as_secs_f64();
    let cost_nn = model.evaluate(nn_shifts.angles());
    let cost_conventional = model.evaluate(conventional_shifts(cfg.module_count)?.angles());
    let (cost_ga, ga_seconds) = match ga {
        Some(ga) => {
            let start = Instant::now();
            let result = ga_optimize_model(&model, m, ga)?;
            (Some(result.best_cost), Some(start.elapsed().as_secs_f64()))
        }
        None => (None, None),
    };
    Ok(EvalRecord {
        m: m.values().to_vec(),
        nn_shifts: nn_shifts.into_inner(),
        classification: Classification::classify(
            cost_nn.total,
            cost_ga.as_ref().map(|c| c.total),
            cost_conventional.total,
        ),
        ripple_reduction_pct: reduction_pct(cost_nn.ripple_component, cost_conventional.ripple_component),
        wthd_reduction_pct: reduction_pct(cost_nn.wthd_component, cost_conventional.wthd_component),
        cost_nn,
        cost_ga,
        cost_conventional,
        nn_seconds,
        ga_seconds,
    })
}

/// Scores every vector. Vectors on which no module switches are skipped and
/// counted; with `training` given, vectors whose canonical form appears in
/// it are counted as overlap.
pub fn run_assessment(
    ctx: &InferenceContext,
    vectors: &[ModulationVector],
    weights: &CostWeights,
    ga: Option<&GaConfig>,
    training: Option<&Dataset>,
) -> Result<Assessment> {
    let mut records = Vec::with_capacity(vectors.len());
    let mut skipped = 0;
    for m in vectors {
        match assess_vector(ctx, m, weights, ga) {
            Ok(r) => records.push(r),
            Err(Error::Degenerate(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let overlap = training.map_or(0, |ds| {
        vectors
            .iter()
            .filter(|m| {
                let c = canonicalize_sample(m).m_canonical;
                ds.samples.iter().any(|s| s.m_canonical == c)
            })
            .count()
    });
    let report = EvalReport::from_records(&records, skipped, overlap);
    Ok(Assessment { records, report })
}

/// Seed transform that keeps assessment draws apart from training draws
/// made with the same user seed.
pub fn assessment_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_a55e_55ed_0001
}

/// `count` vectors uniform on `[0, 1]^N` whose spread exceeds
/// `min_spread`, drawn from the assessment stream of `seed`.
pub fn random_vectors(module_count: usize, count: usize, min_spread: f64, seed: u64) -> Result<Vec<ModulationVector>> {
    if module_count < 2 {
        return Err(Error::domain("need at least 2 modules"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(assessment_seed(seed));
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let m = ModulationVector::new((0..module_count).map(|_| rng.random::<f64>()).collect())?;
        if m.spread() > min_spread {
            out.push(m);
        }
    }
    Ok(out)
}

/// Every vector on the `{0, step, ..., 1}^N` lattice, optionally with one
/// index held at a fixed value, in lexicographic order.
pub fn grid_vectors(module_count: usize, step: f64, fixed: Option<(usize, f64)>) -> Result<Vec<ModulationVector>> {
    let levels = (1.0 / step).round();
    if !(step > 0.0) || (levels * step - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("grid step {step} does not divide 1")));
    }
    if let Some((index, value)) = fixed {
        if index >= module_count || !(0.0..=1.0).contains(&value) {
            return Err(Error::domain(format!("cannot fix index {index} to {value}")));
        }
    }
    let levels = levels as usize;
    let free = module_count - usize::from(fixed.is_some());
    let total = (levels + 1)
        .checked_pow(free as u32)
        .filter(|&t| t <= 10_000_000)
        .ok_or_else(|| Error::domain("grid sweep would exceed 10^7 vectors"))?;
    let mut out = Vec::with_capacity(total);
    let mut digits = vec![0usize; free];
    for _ in 0..total {
        let mut values: Vec<f64> = digits.iter().map(|&d| d as f64 / levels as f64).collect();
        if let Some((index, value)) = fixed {
            values.insert(index, value);
        }
        out.push(ModulationVector::new(values)?);
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d <= levels {
                break;
            }
            *d = 0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub m: Vec<f64>,
    pub nn_shifts: Vec<f64>,
    pub ripple_conventional: f64,
    pub ripple_nn: f64,
    pub wthd_conventional: f64,
    pub wthd_nn: f64,
    pub ripple_reduction_pct: f64,
    pub wthd_reduction_pct: f64,
}

/// Ripple (A peak-to-peak) and WTHD under conventional and selected shifts.
pub fn scenario_report(
    ctx: &InferenceContext,
    scenarios: &[ModulationVector],
    weights: &CostWeights,
) -> Result<Vec<ScenarioRow>> {
    scenarios
        .iter()
        .map(|m| {
            let r = assess_vector(ctx, m, weights, None)?;
            let (conv, nn) = (&r.cost_conventional, &r.cost_nn);
            Ok(ScenarioRow {
                m: r.m.clone(),
                nn_shifts: r.nn_shifts.clone(),
                ripple_conventional: conv.ripple_component * conv.baseline_ripple,
                ripple_nn: nn.ripple_component * nn.baseline_ripple,
                wthd_conventional: conv.wthd_component * conv.baseline_wthd,
                wthd_nn: nn.wthd_component * nn.baseline_wthd,
                ripple_reduction_pct: r.ripple_reduction_pct,
                wthd_reduction_pct: r.wthd_reduction_pct,
            })
        })
        .collect()
}

pub fn scenario_csv(rows: &[ScenarioRow]) -> String {
    let mut out = String::from(
        "m,nn_shifts_deg,ripple_conventional_a,ripple_nn_a,wthd_conventional_pct,wthd_nn_pct,ripple_reduction_pct,wthd_reduction_pct\n",
    );
    for r in rows {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let degrees: Vec<f64> = r.nn_shifts.iter().map(|a| a.to_degrees()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            join(&r.m),
            join(&degrees),
            r.ripple_conventional,
            r.ripple_nn,
            100.0 * r.wthd_conventional,
            100.0 * r.wthd_nn,
            r.ripple_reduction_pct,
            r.wthd_reduction_pct
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub trials: usize,
    pub nn_median_seconds: f64,
    pub ga_median_seconds: f64,
    pub speedup: f64,
}

/// Median wall-clock time of shift selection and of one GA run over the same
/// random vectors. Each network timing averages `repeats` calls.
pub fn latency_benchmark(
    ctx: &InferenceContext,
    weights: &CostWeights,
    ga: &GaConfig,
    trials: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if trials < 10 {
        return Err(Error::domain("latency benchmark needs at least 10 trials"));
    }
    const REPEATS: u32 = 100;
    let n = ctx.base_module_count;
    let cfg = ctx.cfg.with_module_count(n);
    let vectors = random_vectors(n, trials, 0.05, seed)?;
    let mut nn = Vec::with_capacity(trials);
    let mut ga_times = Vec::with_capacity(trials);
    for m in &vectors {
        let start = Instant::now();
        for _ in 0..REPEATS {
            std::hint::black_box(ctx.select_phase_shifts(std::hint::black_box(m))?);
        }
        nn.push(start.elapsed().as_secs_f64() / REPEATS as f64);
        let start = Instant::now();
        let model = CostModel::new(&cfg, m, weights)?;
        std::hint::black_box(ga_optimize_model(&model, m, ga)?);
        ga_times.push(start.elapsed().as_secs_f64());
    }
    let nn_median_seconds = median(nn);
    let ga_median_seconds = median(ga_times);
    Ok(LatencyReport {
        trials,
        nn_median_seconds,
        ga_median_seconds,
        speedup: ga_median_seconds / nn_median_seconds,
    })
}

/// Writes `scatter.csv` (one row per record) and `summary.csv` into `dir`.
pub fn emit_plot_data(assessment: &Assessment, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let width = assessment.records.first().map_or(0, |r| r.m.len());
    let mut scatter: Vec<String> = (1..=width).map(|k| format!("m_{k}")).collect();
    scatter.extend(
        [
            "cost_nn",
            "cost_ga",
            "cost_conventional",
            "classification",
            "color",
            "ripple_reduction_pct",
            "wthd_reduction_pct",
        ]
        .map(String::from),
    );
    let mut text = scatter.join(",");
    text.push('\n');
    for r in &assessment.records {
        let mut fields: Vec<String> = r.m.iter().map(f64::to_string).collect();
        fields.push(r.cost_nn.total.to_string());
        fields.push(r.cost_ga.as_ref().map_or(String::new(), |c| c.total.to_string()));
        fields.push(r.cost_conventional.total.to_string());
        fields.push(r.classification.label().into());
        fields.push(r.classification.color().into());
        fields.push(r.ripple_reduction_pct.to_string());
        fields.push(r.wthd_reduction_pct.to_string());
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    std::fs::write(dir.join("scatter.csv"), text)?;

    let rep = &assessment.report;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let rows = [
        ("records", rep.records.to_string()),
        ("skipped", rep.skipped.to_string()),
        ("training_overlap", rep.training_overlap.to_string()),
        ("fraction_match_or_exceed", rep.fraction_match_or_exceed.to_string()),
        ("fraction_within_1pct_of_ga", opt(rep.fraction_within_1pct_of_ga)),
        ("fraction_beats_conventional", rep.fraction_beats_conventional.to_string()),
        ("mean_total_reduction_pct", rep.mean_total_reduction_pct.to_string()),
        ("mean_ripple_reduction_pct", rep.mean_ripple_reduction_pct.to_string()),
        ("median_ripple_reduction_pct", rep.median_ripple_reduction_pct.to_string()),
        ("mean_wthd_reduction_pct", rep.mean_wthd_reduction_pct.to_string()),
        ("median_wthd_reduction_pct", rep.median_wthd_reduction_pct.to_string()),
        ("mean_nn_seconds", rep.mean_nn_seconds.to_string()),
        ("mean_ga_seconds", opt(rep.mean_ga_seconds)),
    ];
    let mut summary = String::from("metric,value\n");
    for (k, v) in rows {
        summary.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(dir.join("summary.csv"), summary)?;
    Ok(())
}

/// Shifts the network picks for `m`, for callers that only need the vector.
pub fn predicted_shifts(ctx: &InferenceContext, m: &ModulationVector) -> Result<PhaseShiftVector> {
    if m.len() == ctx.base_module_count {
        ctx.select_phase_shifts(m)
    } else {
        ctx.partitioned_predict(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonic::SystemConfig;
    use crate::mlp::{init_model, LayerSpec};

    fn ctx(total: usize) -> InferenceContext {
        let model = init_model(&LayerSpec::for_modules(4, vec![6]), 1).unwrap();
        InferenceContext::new(model, SystemConfig::new(total)).unwrap()
    }

    fn mv(v: &[f64]) -> ModulationVector {
        ModulationVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn classification_precedence() {
        use Classification::*;
        assert_eq!(Classification::classify(1.005, Some(1.0), 0.9), Within1pctOfGa);
        assert_eq!(Classification::classify(1.2, Some(1.0), 1.3), BeatsConventional);
        assert_eq!(Classification::classify(1.305, Some(1.0), 1.3), Within1pctOfConventional);
        assert_eq!(Classification::classify(1.4, Some(1.0), 1.3), Worse);
        assert_eq!(Classification::classify(1.2, None, 1.3), BeatsConventional);
        assert_eq!(Within1pctOfGa.color(), "green");
        assert_eq!(Worse.color(), "gray");
    }

    #[test]
    fn reductions() {
        assert_eq!(reduction_pct(0.5, 1.0), 50.0);
        assert_eq!(reduction_pct(0.0, 0.0), 0.0);
        assert!(reduction_pct(2.0, 1.0) < 0.0);
    }

    #[test]
    fn balanced_vectors_tie_everything() {
        let ga = GaConfig { population_size: 20, max_generations: 30, ..Default::default() };
        let a = run_assessment(&ctx(4), &[mv(&[0.3; 4]), mv(&[0.7; 4])], &CostWeights::default(), Some(&ga), None).unwrap();
        for r in &a.records {
            assert_eq!(r.classification, Classification::Within1pctOfGa);
            assert_eq!(r.cost_nn, r.cost_conventional);
            assert!(r.cost_ga.as_ref().unwrap().total <= r.cost_conventional.total + 1e-9);
        }
        assert_eq!(a.report.fraction_within_1pct_of_ga, Some(1.0));
    }

    #[test]
    fn report_is_recomputable_and_order_free() {
        let vectors = random_vectors(4, 30, 0.05, 3).unwrap();
        let mut with_dead = vectors.clone();
        with_dead.push(mv(&[0.0, 1.0, 1.0, 0.0]));
        let a = run_assessment(&ctx(4), &with_dead, &CostWeights::default(), None, None).unwrap();
        assert_eq!(a.records.len(), 30);
        assert_eq!(a.report.skipped, 1);
        let mut reversed = a.records.clone();
        reversed.reverse();
        let mut again = EvalReport::from_records(&reversed, 1, 0);
        again.mean_nn_seconds = a.report.mean_nn_seconds;
        assert_eq!(again, a.report);
        let beats = a.records.iter().filter(|r| r.cost_nn.total < r.cost_conventional.total).count();
        assert_eq!(a.report.fraction_beats_conventional, beats as f64 / 30.0);
        for r in &a.records {
            assert_eq!(r.classification, Classification::classify(r.cost_nn.total, None, r.cost_conventional.total));
        }
    }

    #[test]
    fn random_and_grid_generators() {
        let a = random_vectors(4, 50, 0.1, 9).unwrap();
        assert_eq!(a, random_vectors(4, 50, 0.1, 9).unwrap());
        assert!(a.iter().all(|m| m.spread() > 0.1));
        let g = grid_vectors(3, 0.5, None).unwrap();
        assert_eq!(g.len(), 27);
        assert_eq!(g[1].values(), &[0.0, 0.0, 0.5]);
        let sliced = grid_vectors(3, 0.25, Some((0, 0.3))).unwrap();
        assert_eq!(sliced.len(), 25);
        assert!(sliced.iter().all(|m| m.values()[0] == 0.3));
        assert!(grid_vectors(3, 0.3, None).is_err());
    }

    #[test]
    fn plot_data_rows_and_determinism() {
        let vectors = random_vectors(8, 12, 0.05, 4).unwrap();
        let a = run_assessment(&ctx(8), &vectors, &CostWeights::default(), None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_plot_data(&a, dir.path()).unwrap();
        let first = std::fs::read_to_string(dir.path().join("scatter.csv")).unwrap();
        assert_eq!(first.lines().count(), 13);
        emit_plot_data(&a, dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("scatter.csv")).unwrap(), first);
        for line in first.lines().skip(1) {
            let color = line.split(',').nth(12).unwrap();
            assert!(color == "green" || color == "gray", "{color}");
        }
    }

    #[test]
    fn scenarios_and_latency() {
        let c = ctx(4);
        let scenarios: Vec<_> = REFERENCE_SCENARIOS.iter().map(|s| mv(s)).collect();
        let rows = scenario_report(&c, &scenarios, &CostWeights::default()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(scenario_csv(&rows).lines().count(), 5);
        let ga = GaConfig { population_size: 10, max_generations: 5, ..Default::default() };
        let lat = latency_benchmark(&c, &CostWeights::default(), &ga, 10, 0).unwrap();
        assert!(lat.speedup > 1.0);
        assert!(latency_benchmark(&c, &CostWeights::default(), &ga, 5, 0).is_err());
    }
}
