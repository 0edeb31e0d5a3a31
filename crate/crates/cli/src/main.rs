mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use phaseshift::dataset::{config_fingerprint, distinct_vectors, label_dataset, Dataset, Split};
use phaseshift::evaluation::{
    emit_plot_data, grid_vectors, latency_benchmark, random_vectors, run_assessment, scenario_csv,
    scenario_report, EvalReport, REFERENCE_SCENARIOS,
};
use phaseshift::harmonic::{conventional_shifts, cost, ModulationVector, PhaseShiftVector};
use phaseshift::inference::{carrier_map, InferenceContext, MapSign};
use phaseshift::mlp::{init_model, train_relabelled, LayerSpec, MlpModel};
use phaseshift::optimizer::{best_of, exhaustive_search, ga_optimize, GridSearchConfig};
use phaseshift::sim::{simulate, CarrierShape};
use serde::Deserialize;

use config::{RunConfig, CONFIG_ENV};

#[derive(Parser)]
#[command(name = "phaseshift", version, about = "Carrier phase shifts for unbalanced PSC-PWM strings")]
struct Cli {
    /// TOML configuration file (defaults to $PHASESHIFT_CONFIG when set).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker cap. Every command currently runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample, canonicalise, deduplicate, label and split a training set.
    Dataset(DatasetArgs),
    /// Optimise the shifts for one modulation vector.
    Optimize(OptimizeArgs),
    /// Train a network on a labelled dataset.
    Train(TrainArgs),
    /// Select shifts for one modulation vector with a trained network.
    Predict(PredictArgs),
    /// Write a time-domain switching trace as CSV.
    Simulate(SimulateArgs),
    /// Compare network, GA and conventional shifts over many vectors.
    Evaluate(EvaluateArgs),
    /// Select shifts for a longer string by partitioning it into network-sized groups.
    Scale(ScaleArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exhaustive-search step in degrees; its labels compete with the GA.
    #[arg(long)]
    exhaustive_step_deg: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ga,
    Exhaustive,
    Both,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Comma-separated modulation indices.
    #[arg(long, value_delimiter = ',', required = true)]
    m: Vec<f64>,
    #[arg(long, value_enum, default_value = "ga")]
    method: Method,
    #[arg(long, default_value_t = 10.0)]
    step_deg: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Relabelling rounds; 0 trains once on the labels as stored.
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    m: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Carrier {
    Triangular,
    Sawtooth,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    m: Vec<f64>,
    /// Comma-separated shifts in degrees, designed for triangular carriers.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with_all = ["model", "conventional"])]
    shifts_deg: Option<Vec<f64>>,
    /// Take the shifts from a trained network.
    #[arg(long, conflicts_with = "conventional")]
    model: Option<PathBuf>,
    #[arg(long)]
    conventional: bool,
    /// Sawtooth runs map the shifts so every pulse keeps its position.
    #[arg(long, value_enum, default_value = "triangular")]
    carrier: Carrier,
    #[arg(long, default_value_t = 8192)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Random,
    Grid,
    Scenarios,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "random")]
    mode: Mode,
    /// Vectors in random mode.
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Lattice step in grid mode.
    #[arg(long, default_value_t = 0.1)]
    grid_step: f64,
    /// Hold one index fixed in grid mode, as INDEX=VALUE.
    #[arg(long, value_parser = parse_fixed)]
    fixed: Option<(usize, f64)>,
    /// Also run the GA on every vector.
    #[arg(long)]
    with_ga: bool,
    /// Also measure network and GA latency over this many trials.
    #[arg(long)]
    latency_trials: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// TOML file of thresholds; any violation exits with status 3.
    #[arg(long)]
    criteria: Option<PathBuf>,
}

#[derive(Args)]
struct ScaleArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    m: Vec<f64>,
}

fn parse_fixed(s: &str) -> Result<(usize, f64), String> {
    let (i, v) = s.split_once('=').ok_or("expected INDEX=VALUE")?;
    Ok((
        i.trim().parse().map_err(|e| format!("index: {e}"))?,
        v.trim().parse().map_err(|e| format!("value: {e}"))?,
    ))
}

enum Kind {
    Contract,
    Threshold,
    Io,
}

struct Failure {
    stage: &'static str,
    kind: Kind,
    cause: String,
    hint: &'static str,
}

impl Failure {
    fn contract(stage: &'static str, cause: impl Into<String>, hint: &'static str) -> Self {
        Failure {
            stage,
            kind: Kind::Contract,
            cause: cause.into(),
            hint,
        }
    }

    fn code(&self) -> u8 {
        match self.kind {
            Kind::Contract => 2,
            Kind::Threshold => 3,
            Kind::Io => 4,
        }
    }
}

trait Stage<T> {
    fn at(self, stage: &'static str, hint: &'static str) -> Result<T, Failure>;
}

impl<T> Stage<T> for phaseshift::Result<T> {
    fn at(self, stage: &'static str, hint: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage,
            kind: match e {
                phaseshift::Error::Io(_) => Kind::Io,
                _ => Kind::Contract,
            },
            cause: e.to_string(),
            hint,
        })
    }
}

impl<T> Stage<T> for std::io::Result<T> {
    fn at(self, stage: &'static str, hint: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage,
            kind: Kind::Io,
            cause: e.to_string(),
            hint,
        })
    }
}

const CHECK_INPUT: &str = "check the values passed on the command line";
const CHECK_PATH: &str = "check that the path exists and is writable";

fn vector(stage: &'static str, values: &[f64]) -> Result<ModulationVector, Failure> {
    ModulationVector::new(values.to_vec()).at(stage, "modulation indices must lie in [0, 1]")
}

/// Writes `contents` and the effective configuration next to it.
fn write_artifact(path: &Path, contents: &str, run: &RunConfig) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).at("write", CHECK_PATH)?;
    }
    std::fs::write(path, contents).at("write", CHECK_PATH)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".config.toml");
    std::fs::write(PathBuf::from(sidecar), run.to_toml()).at("write", CHECK_PATH)
}

fn fingerprint(run: &RunConfig) -> String {
    config_fingerprint(&run.system, &run.weights, &run.ga)
}

fn load_context(run: &RunConfig, path: Option<&PathBuf>, module_count: usize) -> Result<InferenceContext, Failure> {
    let path = path.unwrap_or(&run.paths.model);
    let model = MlpModel::load(path).at("load model", "train a model first or pass --model")?;
    InferenceContext::new(model, run.system.with_module_count(module_count))
        .at("load model", "the string length must be a multiple of the network's module count")
}

fn print_shifts(phi: &PhaseShiftVector) {
    let json = serde_json::json!({
        "shifts_rad": phi.angles(),
        "shifts_deg": phi.degrees(),
    });
    println!("{json}");
    let degrees: Vec<String> = phi.degrees().iter().map(|d| format!("{d:.2}")).collect();
    eprintln!("degrees: {}", degrees.join(", "));
}

fn cmd_dataset(mut run: RunConfig, args: DatasetArgs) -> Result<(), Failure> {
    if let Some(n) = args.n {
        run.system.module_count = n;
    }
    if let Some(c) = args.count {
        run.dataset.count = c;
    }
    if let Some(s) = args.seed {
        run.seeds.dataset = s;
        run.seeds.split = s;
    }
    if args.exhaustive_step_deg.is_some() {
        run.dataset.exhaustive_step_deg = args.exhaustive_step_deg;
    }
    let out = args.out.unwrap_or_else(|| run.paths.dataset.clone());
    if run.dataset.count == 0 {
        return Err(Failure::contract("dataset", "requested an empty dataset (count = 0)", "pass --count 1 or more"));
    }
    let grid = match run.dataset.exhaustive_step_deg {
        Some(deg) => {
            let grid = GridSearchConfig::new(deg.to_radians());
            let predicted = grid.predicted_iterations(run.system.module_count).at("dataset", CHECK_INPUT)?;
            if predicted > grid.max_iterations_guard as u128 {
                return Err(Failure::contract(
                    "dataset",
                    phaseshift::Error::GridGuard { predicted, guard: grid.max_iterations_guard }.to_string(),
                    "use a coarser --exhaustive-step-deg or fewer modules",
                ));
            }
            Some(grid)
        }
        None => None,
    };
    let d = &run.dataset;
    let vectors = distinct_vectors(run.system.module_count, d.count, d.resolution, d.epsilon, run.seeds.dataset, d.inject_extremes)
        .at("dataset", "lower --count or use a finer resolution")?;
    eprintln!("sampled {} distinct canonical vectors, labelling...", vectors.len());
    let (dataset, summary) = label_dataset(&run.system, &vectors, &run.weights, &run.ga, grid.as_ref(), run.seeds.split)
        .at("dataset", CHECK_INPUT)?;
    for (m, why) in &summary.dropped {
        eprintln!("dropped {m:?}: {why}");
    }
    eprintln!(
        "labelled {}, dropped {}, train {}, test {}",
        summary.labeled,
        summary.dropped.len(),
        dataset.split(Split::Train).count(),
        dataset.split(Split::Test).count()
    );
    write_artifact(&out, &dataset.to_csv(), &run)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_optimize(mut run: RunConfig, args: OptimizeArgs) -> Result<(), Failure> {
    let m = vector("optimize", &args.m)?;
    run.system.module_count = m.len();
    if let Some(s) = args.seed {
        run.ga.rng_seed = s;
    }
    let grid = GridSearchConfig::new(args.step_deg.to_radians());
    let hint = "pick a modulation vector in which some module switches";
    let result = match args.method {
        Method::Ga => ga_optimize(&run.system, &m, &run.weights, &run.ga).at("optimize", hint)?,
        Method::Exhaustive => exhaustive_search(&run.system, &m, &run.weights, &grid).at("optimize", hint)?,
        Method::Both => {
            let ga = ga_optimize(&run.system, &m, &run.weights, &run.ga).at("optimize", hint)?;
            let ex = exhaustive_search(&run.system, &m, &run.weights, &grid).at("optimize", hint)?;
            best_of(ga, ex).at("optimize", hint)?
        }
    };
    let conventional = cost(&run.system, &m, &conventional_shifts(m.len()).at("optimize", hint)?, &run.weights)
        .at("optimize", hint)?;
    let json = serde_json::json!({
        "result": result,
        "shifts_deg": result.best_shifts.degrees(),
        "conventional_cost": conventional,
        "fingerprint": fingerprint(&run),
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("plain values"));
    Ok(())
}

fn cmd_train(mut run: RunConfig, args: TrainArgs) -> Result<(), Failure> {
    if let Some(h) = args.hidden {
        run.network.hidden_widths = h;
    }
    if let Some(s) = args.seed {
        run.train.rng_seed = s;
    }
    if let Some(e) = args.max_epochs {
        run.train.max_epochs = e;
    }
    if let Some(r) = args.rounds {
        run.relabel.rounds = r;
    }
    let path = args.dataset.unwrap_or_else(|| run.paths.dataset.clone());
    let out = args.out.unwrap_or_else(|| run.paths.model.clone());
    let dataset = Dataset::load_compatible(&path, run.system.module_count, &fingerprint(&run))
        .at("train", "generate the dataset with the same [system], [weights] and [ga] settings")?;
    let spec = LayerSpec::for_modules(run.system.module_count, run.network.hidden_widths.clone());
    let model = init_model(&spec, run.train.rng_seed).at("train", "hidden widths must be positive")?;
    let (model, report, _) = train_relabelled(&model, &dataset, &run.system, &run.weights, &run.train, &run.relabel)
        .at("train", "try a smaller learning rate")?;
    eprintln!(
        "epochs {}, best epoch {}, test MAE {}",
        report.epochs_run,
        report.best_epoch,
        report.final_test_mae.map_or("n/a".into(), |v| format!("{v:.4} rad"))
    );
    write_artifact(&out, &model.to_json().at("train", CHECK_PATH)?, &run)?;
    let mut report_path = out.as_os_str().to_owned();
    report_path.push(".report.csv");
    std::fs::write(PathBuf::from(report_path), report.to_csv()).at("write", CHECK_PATH)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_predict(run: RunConfig, args: PredictArgs) -> Result<(), Failure> {
    let m = vector("predict", &args.m)?;
    let ctx = load_context(&run, args.model.as_ref(), m.len())?;
    let phi = ctx.select_phase_shifts(&m).at("predict", "pass one index per module the network was trained for")?;
    print_shifts(&phi);
    Ok(())
}

fn cmd_scale(run: RunConfig, args: ScaleArgs) -> Result<(), Failure> {
    let m = vector("scale", &args.m)?;
    let ctx = load_context(&run, args.model.as_ref(), m.len())?;
    let phi = ctx.partitioned_predict(&m).at("scale", "the string length must be a multiple of the network's module count")?;
    print_shifts(&phi);
    Ok(())
}

fn cmd_simulate(mut run: RunConfig, args: SimulateArgs) -> Result<(), Failure> {
    let m = vector("simulate", &args.m)?;
    run.system.module_count = m.len();
    let phi = if let Some(deg) = &args.shifts_deg {
        PhaseShiftVector::wrapped(deg.iter().map(|d| d.to_radians())).at("simulate", CHECK_INPUT)?
    } else if let Some(path) = &args.model {
        let ctx = load_context(&run, Some(path), m.len())?;
        ctx.partitioned_predict(&m).at("simulate", CHECK_INPUT)?
    } else if args.conventional {
        conventional_shifts(m.len()).at("simulate", CHECK_INPUT)?
    } else {
        return Err(Failure::contract("simulate", "no shifts given", "pass --shifts-deg, --model or --conventional"));
    };
    let (shape, phi) = match args.carrier {
        Carrier::Triangular => (CarrierShape::Triangular, phi),
        Carrier::Sawtooth => (
            CarrierShape::SawtoothRising,
            carrier_map(&phi, &m, MapSign::Minus).at("simulate", CHECK_INPUT)?,
        ),
    };
    let trace = simulate(&run.system, &m, &phi, shape, args.samples).at("simulate", "use at least 1024 samples per period")?;
    let header = format!(
        "# fingerprint={} shifts_deg={:?} peak_to_peak={}\n",
        fingerprint(&run),
        phi.degrees(),
        trace.peak_to_peak()
    );
    write_artifact(&args.out, &(header + &trace.to_csv()), &run)?;
    println!("{}", args.out.display());
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Criteria {
    min_fraction_match_or_exceed: Option<f64>,
    min_fraction_beats_conventional: Option<f64>,
    min_mean_total_reduction_pct: Option<f64>,
    min_mean_ripple_reduction_pct: Option<f64>,
    min_mean_wthd_reduction_pct: Option<f64>,
}

impl Criteria {
    fn violations(&self, r: &EvalReport) -> Vec<String> {
        let checks = [
            ("fraction_match_or_exceed", self.min_fraction_match_or_exceed, r.fraction_match_or_exceed),
            ("fraction_beats_conventional", self.min_fraction_beats_conventional, r.fraction_beats_conventional),
            ("mean_total_reduction_pct", self.min_mean_total_reduction_pct, r.mean_total_reduction_pct),
            ("mean_ripple_reduction_pct", self.min_mean_ripple_reduction_pct, r.mean_ripple_reduction_pct),
            ("mean_wthd_reduction_pct", self.min_mean_wthd_reduction_pct, r.mean_wthd_reduction_pct),
        ];
        checks
            .iter()
            .filter_map(|&(name, min, got)| {
                min.filter(|&min| !(got >= min)).map(|min| format!("{name} = {got} is below {min}"))
            })
            .collect()
    }
}

fn cmd_evaluate(run: RunConfig, args: EvaluateArgs) -> Result<(), Failure> {
    let dir = args.out_dir.clone().unwrap_or_else(|| run.paths.reports.clone());
    let criteria: Option<Criteria> = match &args.criteria {
        Some(path) => {
            let text = std::fs::read_to_string(path).at("evaluate", CHECK_PATH)?;
            Some(toml::from_str(&text).map_err(|e| {
                Failure::contract("evaluate", format!("{}: {e}", path.display()), "fix the criteria file")
            })?)
        }
        None => None,
    };
    let ctx = load_context(&run, args.model.as_ref(), run.system.module_count)?;
    std::fs::create_dir_all(&dir).at("write", CHECK_PATH)?;

    if let Mode::Scenarios = args.mode {
        let scenarios = if run.system.module_count == 4 {
            REFERENCE_SCENARIOS
                .iter()
                .map(|s| vector("evaluate", s))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            random_vectors(run.system.module_count, 4, 0.05, run.seeds.evaluation).at("evaluate", CHECK_INPUT)?
        };
        let rows = scenario_report(&ctx, &scenarios, &run.weights).at("evaluate", CHECK_INPUT)?;
        let csv = scenario_csv(&rows);
        print!("{csv}");
        return write_artifact(&dir.join("scenarios.csv"), &csv, &run);
    }

    let n = run.system.module_count;
    let vectors = match args.mode {
        Mode::Random => random_vectors(n, args.count, ctx.equal_tolerance, run.seeds.evaluation),
        _ => grid_vectors(n, args.grid_step, args.fixed),
    }
    .at("evaluate", CHECK_INPUT)?;
    let training = Dataset::load(&run.paths.dataset).ok();
    let ga = args.with_ga.then_some(&run.ga);
    let assessment = run_assessment(&ctx, &vectors, &run.weights, ga, training.as_ref()).at("evaluate", CHECK_INPUT)?;
    if assessment.report.training_overlap > 0 {
        eprintln!(
            "warning: {} assessed vectors also occur in the training set",
            assessment.report.training_overlap
        );
    }
    emit_plot_data(&assessment, &dir).at("write", CHECK_PATH)?;
    let mut report = serde_json::json!({
        "report": assessment.report,
        "fingerprint": fingerprint(&run),
        "seed": run.seeds.evaluation,
    });
    if let Some(trials) = args.latency_trials {
        let latency = latency_benchmark(&ctx, &run.weights, &run.ga, trials, run.seeds.evaluation)
            .at("evaluate", "use at least 10 latency trials")?;
        report["latency"] = serde_json::to_value(latency).expect("plain values");
    }
    let text = serde_json::to_string_pretty(&report).expect("plain values");
    println!("{text}");
    write_artifact(&dir.join("report.json"), &text, &run)?;

    if let Some(criteria) = criteria {
        let violations = criteria.violations(&assessment.report);
        if !violations.is_empty() {
            return Err(Failure {
                stage: "evaluate",
                kind: Kind::Threshold,
                cause: violations.join("; "),
                hint: "train on more data or relax the criteria file",
            });
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.jobs == 0 {
        return Err(Failure::contract("config", "--jobs must be at least 1", "pass --jobs 1"));
    }
    let path = cli.config.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let config = match path {
        Some(p) => RunConfig::load(&p).map_err(|e| Failure::contract("config", e, "fix the configuration file"))?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Dataset(a) => cmd_dataset(config, a),
        Command::Optimize(a) => cmd_optimize(config, a),
        Command::Train(a) => cmd_train(config, a),
        Command::Predict(a) => cmd_predict(config, a),
        Command::Simulate(a) => cmd_simulate(config, a),
        Command::Evaluate(a) => cmd_evaluate(config, a),
        Command::Scale(a) => cmd_scale(config, a),
        Command::Config => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}\nhint: {}", f.stage, f.cause, f.hint);
            ExitCode::from(f.code())
        }
    }
}
