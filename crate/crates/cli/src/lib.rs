//! Subcommands of the `anosov` binary. Each run reads an optional JSON
//! config, lets flags override it, and writes its reports into `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use anosov_core::manifolds::{base_grid, figure_field, figure_svg, write_figure_csv};
use anosov_core::nd::{
    block_growth_check, certified_unstable_graph, nd_growth_rates, nd_invariance_defect, BlockGrowthReport, GraphMap,
    NdRates, ReferenceFrame,
};
use anosov_core::presets;
use anosov_core::regularity::{
    cone_nesting_check, derivative_holder_profile, differentiability_from_fn, differentiability_profile, fit_holder,
    stable_transversal_samples, symmetric_ladder, ConeOptions, ConeParams, DiffReport, HolderReport, HolderSample,
    TrialField, DEFAULT_FLOOR,
};
use anosov_core::sampling::{default_ladder, geometric_ladder, halton_points};
use anosov_core::splitting2::{
    finite_time_rates, invariance_defect, stable_field, unstable_at, unstable_field, HyperbolicityEstimate,
    SplittingConfig,
};
use anosov_core::torus::{MapSpec, TorusMap, TorusPoint};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("hyperbolicity check failed: {0}")]
    Hyperbolicity(anosov_core::Error),
    #[error("no base produced a manifold: {0}")]
    AllBasesFailed(String),
    #[error("{0}")]
    Compute(anosov_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Hyperbolicity(_) => 3,
            CliError::AllBasesFailed(_) => 4,
            CliError::Compute(_) | CliError::Io { .. } => 1,
        }
    }
}

impl From<anosov_core::Error> for CliError {
    fn from(e: anosov_core::Error) -> Self {
        use anosov_core::Error as E;
        match e {
            E::NotHyperbolic { .. } | E::NonConvergentSplitting { .. } => CliError::Hyperbolicity(e),
            E::InvalidLattice(_) | E::InvalidShear(_) | E::InvalidArgument(_) | E::DimensionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Compute(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "anosov", version, about = "Splittings, invariant manifolds and their regularity for Anosov maps of tori")]
pub struct Cli {
    /// JSON file holding {"map": ..., "params": ...} or a bare map.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Built-in map used instead of the config's map.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Perturbation amplitude for the perturbed presets.
    #[arg(long, global = true, default_value_t = 0.05)]
    pub eps: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Cat,
    PerturbedCat,
    Cat4,
    PerturbedCat4,
}

impl Preset {
    pub fn build(self, eps: f64) -> MapSpec {
        match self {
            Preset::Cat => presets::cat_map(),
            Preset::PerturbedCat => presets::perturbed_cat(eps),
            Preset::Cat4 => presets::cat4(),
            Preset::PerturbedCat4 => presets::perturbed_cat4(eps),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// E_u and E_s on a grid, their invariance defect and the hyperbolicity estimate.
    Splitting(SplittingParams),
    /// Unstable (blue) and stable (red) manifold pieces through a grid of bases.
    Figure(FigureParams),
    /// Hölder fit of E_u along a stable transversal.
    Holder(HolderParams),
    /// Second-difference differentiability test of the straightened slope.
    Differentiability(DiffParams),
    /// Cone-field nesting under repeated pushforward of random fields.
    Cone(ConeCmdParams),
    /// Graph-transform splitting on a d-dimensional torus with block-norm diagnostics.
    NdSplitting(NdParams),
}

/// Field-by-field `self.or(config)` for parameter structs whose fields are
/// all `Option`.
macro_rules! overlay {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            fn overlay(self, base: Self) -> Self {
                Self { $($field: self.$field.or(base.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplittingParams {
    /// Grid resolution N of the written fields.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Backward-orbit depth n.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Horizon of the finite-time rate estimate.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Number of Halton sample points for the rate estimate.
    #[arg(long)]
    pub samples: Option<usize>,
}
overlay!(SplittingParams { grid, depth, horizon, samples });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FigureParams {
    /// k for a k×k base grid.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Explicit base "x,y" (repeatable; replaces the grid).
    #[arg(long = "base")]
    pub bases: Option<Vec<Point>>,
    #[arg(long)]
    pub half_length: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
}
overlay!(FigureParams { grid, bases, half_length, step, depth });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HolderParams {
    /// Base point "x,y".
    #[arg(long)]
    pub point: Option<Point>,
    /// Largest stable arclength sampled.
    #[arg(long)]
    pub largest: Option<f64>,
    /// Decades covered by the ladder below `largest`.
    #[arg(long)]
    pub decades: Option<f64>,
    /// Deviations at or below this are dropped from the fit.
    #[arg(long)]
    pub floor: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Fit planted samples `0.5|t|^β` with 1% noise instead of map data.
    #[arg(long)]
    pub synthetic_exponent: Option<f64>,
}
overlay!(HolderParams { point, largest, decades, floor, depth, synthetic_exponent });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffParams {
    #[arg(long)]
    pub point: Option<Point>,
    /// Largest symmetric step h.
    #[arg(long)]
    pub largest: Option<f64>,
    /// Number of steps, each 1/√2 of the previous.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Run the test on f(t) = t² instead of the map.
    #[arg(long)]
    pub self_test: Option<bool>,
    /// Also fit the Hölder exponent of the derivative.
    #[arg(long)]
    pub derivative_holder: Option<bool>,
    /// Central-difference step for the derivative fit.
    #[arg(long)]
    pub fd_step: Option<f64>,
}
overlay!(DiffParams { point, largest, count, depth, self_test, derivative_holder, fd_step });

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConeCmdParams {
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub eps0: Option<f64>,
    #[arg(long)]
    pub eps1: Option<f64>,
    #[arg(long)]
    pub constant_k: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Exponent slack ε in K|t|^{α−ε}.
    #[arg(long)]
    pub slack: Option<f64>,
    /// Pushforward length N per round.
    #[arg(long)]
    pub big_n: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long, value_enum)]
    pub field: Option<FieldKind>,
    #[arg(long)]
    pub point: Option<Point>,
    #[arg(long)]
    pub depth: Option<usize>,
}
overlay!(ConeCmdParams {
    delta, eps0, eps1, constant_k, alpha, slack, big_n, rounds, trials, resolution, field, point, depth
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Random,
    Unstable,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NdParams {
    /// Unstable dimension; must match the linear part.
    #[arg(long)]
    pub d_u: Option<usize>,
    /// Base point "x1,x2,...".
    #[arg(long)]
    pub point: Option<Point>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Stable offset of the comparison point.
    #[arg(long)]
    pub offset: Option<f64>,
    #[arg(long)]
    pub n_max: Option<usize>,
    /// Sample points for the rate λ̂.
    #[arg(long)]
    pub samples: Option<usize>,
}
overlay!(NdParams { d_u, point, depth, offset, n_max, samples });

/// A point given as "x1,x2,..." on the command line or as an array in JSON.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(transparent)]
pub struct Point(pub Vec<f64>);

impl std::str::FromStr for Point {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad coordinate {v:?}: {e}")))
            .collect::<std::result::Result<_, _>>()
            .map(Point)
    }
}

/// Map and raw per-command parameters from a config file.
struct Loaded {
    map: Option<MapSpec>,
    params: Value,
}

fn load_config(path: Option<&Path>) -> CliResult<Loaded> {
    let Some(path) = path else {
        return Ok(Loaded { map: None, params: Value::Null });
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let parse_map =
        |v: Value| serde_json::from_value::<MapSpec>(v).map_err(|e| CliError::Config(format!("map: {e}")));
    match value {
        Value::Object(mut obj) if obj.contains_key("map") || obj.contains_key("params") => {
            let map = obj.remove("map").map(parse_map).transpose()?;
            let params = obj.remove("params").unwrap_or(Value::Null);
            if let Some(extra) = obj.keys().next() {
                return Err(CliError::Config(format!("unknown top-level key {extra:?}")));
            }
            Ok(Loaded { map, params })
        }
        other => Ok(Loaded {
            map: Some(parse_map(other)?),
            params: Value::Null,
        }),
    }
}

fn params_from<T: for<'de> Deserialize<'de> + Default>(v: &Value) -> CliResult<T> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("params: {e}")))
}

fn config_with_depth(depth: Option<usize>) -> CliResult<SplittingConfig> {
    let mut cfg = SplittingConfig::default();
    if let Some(d) = depth {
        if d == 0 {
            return Err(CliError::Config("depth must be >= 1".into()));
        }
        cfg.depth = d;
    }
    Ok(cfg)
}

fn point_or(p: Option<Point>, dim: usize, default: &[f64]) -> CliResult<TorusPoint> {
    let c = p.map(|p| p.0).unwrap_or_else(|| default.to_vec());
    if c.len() != dim || c.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Config(format!("point {c:?} is not a finite point of T^{dim}")));
    }
    Ok(TorusPoint::new(c))
}

fn require_dim(map: &MapSpec, dim: usize) -> CliResult<()> {
    if map.dim() != dim {
        return Err(CliError::Config(format!("this command needs a {dim}-dimensional map, got {}", map.dim())));
    }
    Ok(())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| CliError::Io { path: path.clone(), source })?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Compute(e.into()))?;
    text.push('\n');
    write_file(dir, name, text.as_bytes())
}

/// Parses arguments, runs the command and returns the files written.
pub fn run(cli: Cli) -> CliResult<Vec<PathBuf>> {
    let loaded = load_config(cli.config.as_deref())?;
    let map = match (cli.preset, loaded.map) {
        (Some(p), _) => p.build(cli.eps),
        (None, Some(m)) => m,
        (None, None) => return Err(CliError::Config("no map: pass --config with a map or --preset".into())),
    };
    fs::create_dir_all(&cli.out).map_err(|source| CliError::Io { path: cli.out.clone(), source })?;
    let seed = cli.seed.or_else(|| loaded.params.get("seed").and_then(Value::as_u64)).unwrap_or(0);
    let mut params = loaded.params;
    if let Value::Object(obj) = &mut params {
        obj.remove("seed");
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Splitting(p) => cmd_splitting(&map, p.overlay(params_from(&params)?), out),
        Command::Figure(p) => cmd_figure(&map, p.overlay(params_from(&params)?), out),
        Command::Holder(p) => cmd_holder(&map, p.overlay(params_from(&params)?), seed, out),
        Command::Differentiability(p) => cmd_differentiability(&map, p.overlay(params_from(&params)?), out),
        Command::Cone(p) => cmd_cone(&map, p.overlay(params_from(&params)?), seed, out),
        Command::NdSplitting(p) => cmd_nd_splitting(&map, p.overlay(params_from(&params)?), out),
    }
}

fn rates(map: &MapSpec, samples: usize, horizon: usize, cfg: &SplittingConfig) -> CliResult<HyperbolicityEstimate> {
    finite_time_rates(map, &halton_points(samples, 2), horizon, cfg).map_err(CliError::from)
}

#[derive(Serialize)]
struct InvarianceSummary {
    depth: usize,
    points: usize,
    max_defect: f64,
    mean_defect: f64,
}

pub fn cmd_splitting(map: &MapSpec, p: SplittingParams, out: &Path) -> CliResult<Vec<PathBuf>> {
    require_dim(map, 2)?;
    let cfg = config_with_depth(p.depth)?;
    let grid = p.grid.unwrap_or(64);
    if grid == 0 {
        return Err(CliError::Config("grid must be >= 1".into()));
    }
    let estimate = rates(map, p.samples.unwrap_or(256), p.horizon.unwrap_or(40), &cfg)?;
    let eu = unstable_field(map, grid, &cfg)?;
    let es = stable_field(map, grid, &cfg)?;
    let nodes: Vec<TorusPoint> = (0..grid).flat_map(|i| (0..grid).map(move |j| (i, j))).map(|(i, j)| eu.node(i, j)).collect();
    let defects = nodes
        .par_iter()
        .map(|x| invariance_defect(map, x, |y| unstable_at(map, y, &cfg)))
        .collect::<anosov_core::Result<Vec<f64>>>()?;
    let summary = InvarianceSummary {
        depth: cfg.depth,
        points: defects.len(),
        max_defect: defects.iter().cloned().fold(0.0, f64::max),
        mean_defect: defects.iter().sum::<f64>() / defects.len() as f64,
    };

    let mut eu_csv = Vec::new();
    eu.write_csv(&mut eu_csv)?;
    let mut es_csv = Vec::new();
    es.write_csv(&mut es_csv)?;
    Ok(vec![
        write_file(out, "eu_field.csv", &eu_csv)?,
        write_file(out, "es_field.csv", &es_csv)?,
        write_json(out, "invariance.json", &summary)?,
        write_json(out, "hyperbolicity.json", &estimate)?,
    ])
}

pub fn cmd_figure(map: &MapSpec, p: FigureParams, out: &Path) -> CliResult<Vec<PathBuf>> {
    require_dim(map, 2)?;
    let cfg = config_with_depth(p.depth)?;
    let bases = match p.bases {
        Some(list) => list
            .into_iter()
            .map(|c| point_or(Some(c), 2, &[]))
            .collect::<CliResult<Vec<_>>>()?,
        None => base_grid(p.grid.unwrap_or(3)),
    };
    if bases.is_empty() {
        return Err(CliError::Config("empty base list".into()));
    }
    let entries = figure_field(map, &bases, p.half_length.unwrap_or(0.2), p.step.unwrap_or(2e-3), &cfg);
    let mut csv_bytes = Vec::new();
    write_figure_csv(&entries, &mut csv_bytes)?;
    let written = vec![
        write_file(out, "figure.svg", figure_svg(&entries).as_bytes())?,
        write_file(out, "figure.csv", &csv_bytes)?,
    ];
    if let Some(Err(first)) = entries.first().map(|e| &e.polyline) {
        if entries.iter().all(|e| e.polyline.is_err()) {
            return Err(CliError::AllBasesFailed(first.to_string()));
        }
    }
    Ok(written)
}

#[derive(Serialize)]
struct HolderOutput {
    status: &'static str,
    message: Option<String>,
    report: Option<HolderReport>,
    alpha_max: Option<f64>,
    synthetic_exponent: Option<f64>,
    point: Vec<f64>,
    seed: u64,
    samples: usize,
}

/// The default ladder with every rung shrunk by an independent factor in
/// `(1/√2, 1]` drawn from `seed`.
fn jittered_ladder(largest: f64, decades: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratio = std::f64::consts::FRAC_1_SQRT_2;
    default_ladder(largest, decades)
        .into_iter()
        .map(|t| t * ratio.powf(rng.random_range(0.0..1.0)))
        .collect()
}

pub fn cmd_holder(map: &MapSpec, p: HolderParams, seed: u64, out: &Path) -> CliResult<Vec<PathBuf>> {
    require_dim(map, 2)?;
    let cfg = config_with_depth(p.depth)?;
    let x = point_or(p.point, 2, &[0.3, 0.3])?;
    let floor = p.floor.unwrap_or(DEFAULT_FLOOR);
    let largest = p.largest.unwrap_or(0.1);
    let decades = p.decades.unwrap_or(3.0);
    if !(largest > 0.0 && largest <= 0.45 && decades > 0.0) {
        return Err(CliError::Config("need 0 < largest <= 0.45 and decades > 0".into()));
    }
    let scales = jittered_ladder(largest, decades, seed);

    let (samples, alpha_max) = match p.synthetic_exponent {
        Some(beta) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            let noise = Normal::new(0.0, 0.01).expect("valid deviation");
            let samples: Vec<HolderSample> = scales
                .iter()
                .flat_map(|&s| [s, -s])
                .map(|t| HolderSample {
                    t,
                    deviation: 0.5 * t.abs().powf(beta) * (1.0 + noise.sample(&mut rng)),
                })
                .collect();
            (samples, None)
        }
        None => {
            let estimate = rates(map, 256, 40, &cfg)?;
            (stable_transversal_samples(map, &x, &scales, &cfg)?, Some(estimate.alpha_max))
        }
    };
    let fit = fit_holder(&samples, floor);
    let output = match fit {
        Ok(report) => HolderOutput {
            status: "ok",
            message: None,
            report: Some(report),
            alpha_max,
            synthetic_exponent: p.synthetic_exponent,
            point: x.coords().to_vec(),
            seed,
            samples: samples.len(),
        },
        Err(e @ anosov_core::Error::Degenerate { .. }) => HolderOutput {
            status: "degenerate",
            message: Some(e.to_string()),
            report: None,
            alpha_max,
            synthetic_exponent: p.synthetic_exponent,
            point: x.coords().to_vec(),
            seed,
            samples: samples.len(),
        },
        Err(e) => return Err(e.into()),
    };
    let mut csv = String::from("t,deviation\n");
    for s in &samples {
        csv.push_str(&format!("{},{}\n", s.t, s.deviation));
    }
    Ok(vec![
        write_json(out, "holder.json", &output)?,
        write_file(out, "holder_samples.csv", csv.as_bytes())?,
    ])
}

#[derive(Serialize)]
struct DiffOutput {
    status: anosov_core::regularity::DiffStatus,
    self_test: bool,
    report: DiffReport,
    derivative_holder: Option<DerivativeHolderOutput>,
}

#[derive(Serialize)]
struct DerivativeHolderOutput {
    status: &'static str,
    message: Option<String>,
    report: Option<HolderReport>,
    fd_step: f64,
}

pub fn cmd_differentiability(map: &MapSpec, p: DiffParams, out: &Path) -> CliResult<Vec<PathBuf>> {
    let cfg = config_with_depth(p.depth)?;
    let ladder = symmetric_ladder(p.largest.unwrap_or(0.05), p.count.unwrap_or(12));
    let self_test = p.self_test.unwrap_or(false);
    let x = point_or(p.point, 2, &[0.3, 0.6])?;
    let report = if self_test {
        differentiability_from_fn(|t| Ok(t * t), &ladder)?
    } else {
        require_dim(map, 2)?;
        differentiability_profile(map, &x, &ladder, &cfg)?
    };
    let derivative_holder = if p.derivative_holder.unwrap_or(false) && !self_test {
        let fd_step = p.fd_step.unwrap_or(1e-4);
        let scales = geometric_ladder(p.largest.unwrap_or(0.05), std::f64::consts::FRAC_1_SQRT_2, 12);
        Some(match derivative_holder_profile(map, &x, &scales, fd_step, &cfg) {
            Ok(r) => DerivativeHolderOutput { status: "ok", message: None, report: Some(r), fd_step },
            Err(e @ anosov_core::Error::Degenerate { .. }) => DerivativeHolderOutput {
                status: "degenerate",
                message: Some(e.to_string()),
                report: None,
                fd_step,
            },
            Err(e) => return Err(e.into()),
        })
    } else {
        None
    };
    let output = DiffOutput {
        status: report.status,
        self_test,
        report,
        derivative_holder,
    };
    Ok(vec![write_json(out, "differentiability.json", &output)?])
}

#[derive(Serialize)]
struct ConeOutput {
    seed: u64,
    field: &'static str,
    hyperbolicity: HyperbolicityEstimate,
    report: anosov_core::regularity::ConeReport,
}

pub fn cmd_cone(map: &MapSpec, p: ConeCmdParams, seed: u64, out: &Path) -> CliResult<Vec<PathBuf>> {
    require_dim(map, 2)?;
    let cfg = config_with_depth(p.depth)?;
    let d = ConeParams::default();
    let params = ConeParams {
        delta: p.delta.unwrap_or(d.delta),
        eps0: p.eps0.unwrap_or(d.eps0),
        eps1: p.eps1.unwrap_or(d.eps1),
        constant_k: p.constant_k.unwrap_or(d.constant_k),
        alpha: p.alpha.unwrap_or(d.alpha),
        eps: p.slack.unwrap_or(d.eps),
    };
    let field = p.field.unwrap_or(FieldKind::Random);
    let opts = ConeOptions {
        base: point_or(p.point, 2, &[0.0, 0.0])?,
        resolution: p.resolution.unwrap_or(128),
        seed,
        field: match field {
            FieldKind::Random => TrialField::Random,
            FieldKind::Unstable => TrialField::Unstable,
        },
    };
    let hyperbolicity = rates(map, 256, 40, &cfg)?;
    let report = cone_nesting_check(
        map,
        &params,
        p.big_n.unwrap_or(10),
        p.rounds.unwrap_or(5),
        p.trials.unwrap_or(20),
        &opts,
        &cfg,
    )?;
    let output = ConeOutput {
        seed,
        field: match field {
            FieldKind::Random => "random",
            FieldKind::Unstable => "unstable",
        },
        hyperbolicity,
        report,
    };
    Ok(vec![write_json(out, "cone.json", &output)?])
}

#[derive(Serialize)]
struct NdOutput {
    d_u: usize,
    d_s: usize,
    point: Vec<f64>,
    depth: usize,
    graph: GraphMap,
    invariance_defect: f64,
    rates: NdRates,
    block_growth: BlockGrowthReport,
}

pub fn cmd_nd_splitting(map: &MapSpec, p: NdParams, out: &Path) -> CliResult<Vec<PathBuf>> {
    let cfg = config_with_depth(p.depth)?;
    let dim = map.dim();
    let d_u = p.d_u.unwrap_or_else(|| map.linear().unstable_dim());
    let frame = ReferenceFrame::spectral(map, d_u)?;
    let default_point = halton_points(1, dim)[0].coords().to_vec();
    let x = point_or(p.point, dim, &default_point)?;
    let graph = certified_unstable_graph(map, &frame, &x, &cfg)?;
    let invariance = nd_invariance_defect(map, &frame, &x, cfg.depth)?;
    let rates = nd_growth_rates(map, &frame, &halton_points(p.samples.unwrap_or(16), dim), 20, &cfg)?;
    let block_growth = block_growth_check(
        map,
        &frame,
        &x,
        p.offset.unwrap_or(1e-3),
        p.n_max.unwrap_or(20),
        rates.lambda_hat,
        &cfg,
    )?;
    let output = NdOutput {
        d_u,
        d_s: dim - d_u,
        point: x.coords().to_vec(),
        depth: cfg.depth,
        graph,
        invariance_defect: invariance,
        rates,
        block_growth,
    };
    Ok(vec![write_json(out, "nd_splitting.json", &output)?])
}
