//! Run settings: a TOML file (or a previous run's manifest) overlaid with
//! command-line flags, then validated into typed options.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use spconj::hyperparam::ModelKind;
use spconj::lowrank::KnotStrategy;
use spconj::metakrige::{Bandwidth, PartitionStrategy};
use spconj::{ConjugatePrior, CorrelationKind, PriorCovariance};

use crate::error::{config_err, Result};

pub const THREADS_ENV: &str = "SPCONJ_THREADS";

/// Every setting is optional; unset keys take the documented defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Input CSV with header `x,y[,z],response,pred1..predp`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Coordinate column names [default: x,y].
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<String>>,
    /// Response column name [default: response].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Predictor columns [default: every other column].
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictors: Option<Vec<String>>,
    /// Prepend an intercept column [default: true].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intercept: Option<bool>,
    /// Base seed for every random stream [default: 1]
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Worker threads [default: $SPCONJ_THREADS, else all cores].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Posterior draws; 0 writes the closed-form posterior only [default: 1000].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<usize>,

    /// dense | nngp | lowrank [default: nngp].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// exponential | matern32 | matern52 [default: exponential].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    /// NNGP neighbor count [default: 10].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Low-rank knot count [default: 64].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    /// grid | random [default: grid].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knots: Option<String>,

    /// Decay φ: fixed value for fitting, true value for `simulate`.
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    /// Fixed δ² = τ²/σ².
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta2: Option<f64>,
    /// Read fixed φ and δ² from a `cv_selected.json`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper_from: Option<PathBuf>,
    /// Cross-validation grid: variogram | wide [default: variogram].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    /// Explicit φ candidates (with `delta2-grid`).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_grid: Option<Vec<f64>>,
    /// Explicit δ² candidates (with `phi-grid`).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta2_grid: Option<Vec<f64>>,
    /// Cross-validation folds [default: 5].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    /// Odd side of the refinement grid; 0 or 1 skips refinement [default: 5].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<usize>,

    /// Inverse-gamma shape [default: 2].
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_sigma: Option<f64>,
    /// Inverse-gamma scale [default: 1].
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_sigma: Option<f64>,
    /// Prior mean of β (defaults to zeros when `prior-var` is set).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_mean: Option<Vec<f64>>,
    /// `V_β = prior_var·I`; unset means a flat prior on β.
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_var: Option<f64>,

    /// Variogram bins [default: 15].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// Variogram cutoff distance [default: a quarter of the maximum distance].
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_dist: Option<f64>,

    /// Simulated training locations [default: 1000].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Simulated holdout locations [default: 200].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout: Option<usize>,
    /// True β, intercept first [default: 1,-5].
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    /// True partial sill [default: 2].
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    /// True nugget [default: 0.2].
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,

    /// Prediction locations for `predict` (same columns; response optional).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_data: Option<PathBuf>,
    /// Also write per-location latent summaries from `fit` [default: false].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent: Option<bool>,

    /// Subset count K [default: 4].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsets: Option<usize>,
    /// random | spatial [default: random].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<String>,
    /// Kernel bandwidth: a positive number or `median` [default: 1].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<String>,
    /// Draws stored per subset for geometric-median pooling [default: 500].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset_draws: Option<usize>,
    /// Pool previously written subset summary files instead of fitting.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summaries: Option<Vec<PathBuf>>,
}

impl Settings {
    /// Read a TOML settings file, or the `config` object of a manifest.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let cfg = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(cfg).map_err(|e| config_err(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
        }
    }

    /// Keys set in `over` replace those in `self`.
    pub fn overlay(self, over: &Settings) -> Result<Self> {
        let mut base = serde_json::to_value(self).expect("settings serialize");
        let top = serde_json::to_value(over).expect("settings serialize");
        if let (Value::Object(b), Value::Object(t)) = (&mut base, top) {
            b.extend(t);
        }
        serde_json::from_value(base).map_err(|e| config_err(e.to_string()))
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(config_err(format!("{name} must be positive, got {v}")))
    }
}

fn at_least(name: &str, v: usize, lo: usize) -> Result<usize> {
    if v >= lo {
        Ok(v)
    } else {
        Err(config_err(format!("{name} must be at least {lo}, got {v}")))
    }
}

pub fn resolve_threads(s: &Settings) -> Result<usize> {
    let threads = match s.threads {
        Some(t) => t,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| config_err(format!("{THREADS_ENV}='{v}' is not a thread count")))?,
            Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
    };
    at_least("threads", threads, 1)
}

/// Columns to read from a data file.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSpec {
    pub coords: Vec<String>,
    pub response: String,
    pub predictors: Option<Vec<String>>,
    pub intercept: bool,
}

impl ColumnSpec {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let coords = s.coords.clone().unwrap_or_else(|| vec!["x".into(), "y".into()]);
        if !(1..=3).contains(&coords.len()) {
            return Err(config_err("coords must name 1 to 3 columns"));
        }
        Ok(Self {
            coords,
            response: s.response.clone().unwrap_or_else(|| "response".into()),
            predictors: s.predictors.clone(),
            intercept: s.intercept.unwrap_or(true),
        })
    }
}

pub fn family_kind(s: &Settings) -> Result<CorrelationKind> {
    s.family.as_deref().unwrap_or("exponential").parse().map_err(|e: spconj::Error| config_err(e.to_string()))
}

pub fn model_kind(s: &Settings) -> Result<ModelKind> {
    match s.model.as_deref().unwrap_or("nngp") {
        "dense" => Ok(ModelKind::Dense),
        "nngp" => Ok(ModelKind::Nngp { m: at_least("m", s.m.unwrap_or(10), 1)? }),
        "lowrank" => {
            let strategy = match s.knots.as_deref().unwrap_or("grid") {
                "grid" => KnotStrategy::Grid,
                "random" => KnotStrategy::Random { seed: s.seed.unwrap_or(0) },
                other => return Err(config_err(format!("unknown knot strategy '{other}'"))),
            };
            Ok(ModelKind::LowRank { r: at_least("r", s.r.unwrap_or(64), 1)?, strategy })
        }
        other => Err(config_err(format!("unknown model '{other}' (expected dense, nngp or lowrank)"))),
    }
}

/// `V_β = prior_var·I` around `prior_mean`, or flat when `prior_var` is unset.
pub fn prior(s: &Settings, p: usize) -> Result<ConjugatePrior> {
    let a = positive("a_sigma", s.a_sigma.unwrap_or(2.0))?;
    let b = positive("b_sigma", s.b_sigma.unwrap_or(1.0))?;
    match s.prior_var {
        None => {
            if s.prior_mean.is_some() {
                return Err(config_err("prior_mean needs prior_var (a flat prior has no mean)"));
            }
            Ok(ConjugatePrior::flat(p, a, b))
        }
        Some(v) => {
            let v = positive("prior_var", v)?;
            let mean = s.prior_mean.clone().unwrap_or_else(|| vec![0.0; p]);
            if mean.len() != p {
                return Err(config_err(format!("prior_mean has {} entries for {p} coefficients", mean.len())));
            }
            Ok(ConjugatePrior::new(
                nalgebra::DVector::from_vec(mean),
                PriorCovariance::Proper(nalgebra::DMatrix::identity(p, p) * v),
                a,
                b,
            )?)
        }
    }
}

/// How `(φ, δ²)` are chosen for a fit.
#[derive(Debug, Clone, PartialEq)]
pub enum HyperSource {
    Fixed { phi: f64, delta2: f64 },
    Search(GridSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    /// Centered on the variogram estimates.
    Variogram,
    /// Wide default log grid.
    Wide,
    Explicit { phi: Vec<f64>, delta2: Vec<f64> },
}

#[derive(Debug, Deserialize)]
struct Selected {
    phi: f64,
    delta2: f64,
}

fn grid_spec(s: &Settings) -> Result<Option<GridSpec>> {
    match (&s.phi_grid, &s.delta2_grid, s.grid.as_deref()) {
        (None, None, None) => Ok(None),
        (Some(p), Some(d), None) => {
            if p.is_empty() || d.is_empty() {
                return Err(config_err("phi_grid and delta2_grid must be nonempty"));
            }
            for &v in p {
                positive("phi_grid entry", v)?;
            }
            for &v in d {
                positive("delta2_grid entry", v)?;
            }
            let mut phi = p.clone();
            let mut delta2 = d.clone();
            phi.sort_by(f64::total_cmp);
            delta2.sort_by(f64::total_cmp);
            Ok(Some(GridSpec::Explicit { phi, delta2 }))
        }
        (None, None, Some("variogram")) => Ok(Some(GridSpec::Variogram)),
        (None, None, Some("wide")) => Ok(Some(GridSpec::Wide)),
        (None, None, Some(other)) => Err(config_err(format!("unknown grid '{other}' (expected variogram or wide)"))),
        _ => Err(config_err("give either grid or both phi_grid and delta2_grid")),
    }
}

/// Exactly one of a fixed `(φ, δ²)` and a grid must be supplied. With
/// `search_default`, an absent specification means the variogram grid.
pub fn hyper_source(s: &Settings, search_default: bool) -> Result<HyperSource> {
    let mut fixed = match (s.phi, s.delta2) {
        (Some(phi), Some(delta2)) => Some((phi, delta2)),
        (None, None) => None,
        _ => return Err(config_err("phi and delta2 must be given together")),
    };
    if let Some(path) = &s.hyper_from {
        if fixed.is_some() {
            return Err(config_err("give either phi/delta2 or hyper_from, not both"));
        }
        let text = std::fs::read_to_string(path)?;
        let sel: Selected = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        fixed = Some((sel.phi, sel.delta2));
    }
    let grid = grid_spec(s)?;
    match (fixed, grid) {
        (Some(_), Some(_)) => Err(config_err("give either a fixed (phi, delta2) or a cross-validation grid, not both")),
        (Some((phi, delta2)), None) => {
            positive("phi", phi)?;
            if !(delta2 >= 0.0 && delta2.is_finite()) {
                return Err(config_err(format!("delta2 must be nonnegative, got {delta2}")));
            }
            Ok(HyperSource::Fixed { phi, delta2 })
        }
        (None, Some(g)) => Ok(HyperSource::Search(g)),
        (None, None) if search_default => Ok(HyperSource::Search(GridSpec::Variogram)),
        (None, None) => Err(config_err("no (phi, delta2): give phi and delta2, hyper_from, or a grid")),
    }
}

pub fn refine_count(s: &Settings) -> Result<usize> {
    let c = s.refine.unwrap_or(5);
    if c > 1 && c % 2 == 0 {
        return Err(config_err(format!("refine must be odd, got {c}")));
    }
    Ok(c)
}

pub fn partition(s: &Settings) -> Result<PartitionStrategy> {
    match s.partition.as_deref().unwrap_or("random") {
        "random" => Ok(PartitionStrategy::RandomBalanced),
        "spatial" => Ok(PartitionStrategy::SpatialBlocks),
        other => Err(config_err(format!("unknown partition '{other}' (expected random or spatial)"))),
    }
}

pub fn bandwidth(s: &Settings) -> Result<Bandwidth> {
    match s.bandwidth.as_deref() {
        None => Ok(Bandwidth::default()),
        Some("median") => Ok(Bandwidth::MedianHeuristic),
        Some(v) => {
            let h: f64 = v.parse().map_err(|_| config_err(format!("bandwidth '{v}' is neither a number nor 'median'")))?;
            Ok(Bandwidth::Fixed(positive("bandwidth", h)?))
        }
    }
}

/// Checks that need no data, run before any file is read.
pub fn validate(s: &Settings, command: &str) -> Result<()> {
    family_kind(s)?;
    model_kind(s)?;
    refine_count(s)?;
    partition(s)?;
    bandwidth(s)?;
    ColumnSpec::from_settings(s)?;
    for (name, v) in [("a_sigma", s.a_sigma), ("b_sigma", s.b_sigma), ("prior_var", s.prior_var), ("max_dist", s.max_dist)] {
        if let Some(v) = v {
            positive(name, v)?;
        }
    }
    match command {
        "simulate" => {
            for (name, v) in [("phi", s.phi), ("sigma2", s.sigma2)] {
                if let Some(v) = v {
                    positive(name, v)?;
                }
            }
            if let Some(t) = s.tau2 {
                nonneg("tau2", t)?;
            }
        }
        "cv" => {
            if matches!(hyper_source(s, true)?, HyperSource::Fixed { .. }) {
                return Err(config_err("cv needs a grid, not a fixed (phi, delta2)"));
            }
        }
        "fit" | "predict" => {
            hyper_source(s, false)?;
        }
        "metakrige" if s.summaries.is_none() => {
            hyper_source(s, false)?;
        }
        _ => {}
    }
    Ok(())
}

pub fn nonneg(name: &str, v: f64) -> Result<f64> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(config_err(format!("{name} must be nonnegative, got {v}")))
    }
}

pub fn require_positive(name: &str, v: f64) -> Result<f64> {
    positive(name, v)
}

pub fn require_at_least(name: &str, v: usize, lo: usize) -> Result<usize> {
    at_least(name, v, lo)
}
