//! Subcommand pipelines. Each writes its tables into the output directory and
//! reports results for the manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use spconj::conjugate::{build_augmented_latent, posterior_latent, posterior_marginalized, sample_exact};
use spconj::geo::{correlation_matrix_self, simulate_unit_square};
use spconj::hyperparam::{
    cv_select, cv_two_pass, empirical_variogram, fit_variogram, ols_residuals, CvGrid, CvResult, ModelKind,
    VariogramFit,
};
use spconj::lowrank::{build_predictive_process_basis, fit_conjugate_lowrank, select_knots, LowRankBasis};
use spconj::metakrige::{
    partition_data, pool_exact, read_summaries, sample_gm, subset_samples, subset_summary, weiszfeld_gm,
    write_summaries, WeiszfeldConfig,
};
use spconj::nngp::NngpModel;
use spconj::predict::{
    predictive_weights_dense, predictive_weights_nngp, sample_predictive, sample_predictive_latent, PredictiveWeights,
};
use spconj::{
    summarize, Block, ConjugatePosterior, ConjugatePrior, CorrelationFamily, CorrelationKind, DenseSpdSolver,
    GpOracleModel, PosteriorDraws, SpatialData, Summary,
};

use crate::config::{self, ColumnSpec, GridSpec, HyperSource, Settings};
use crate::data::{describe, ingest_csv, write_dataset, write_table, Dataset, INTERCEPT};
use crate::error::{config_err, CliError, Result};

/// State shared by one invocation.
pub struct Run {
    pub settings: Settings,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub outputs: Vec<String>,
    pub results: Map<String, Value>,
}

impl Run {
    pub fn new(settings: Settings) -> Result<Self> {
        let out_dir = settings.output.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out_dir)?;
        let seed = settings.seed.unwrap_or(1);
        Ok(Self { settings, out_dir, seed, outputs: Vec::new(), results: Map::new() })
    }

    /// Path of an output file, recorded for the manifest.
    fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_owned());
        self.out_dir.join(name)
    }

    fn record(&mut self, key: &str, value: Value) {
        self.results.insert(key.to_owned(), value);
    }

    fn training(&mut self) -> Result<Dataset> {
        let path = self.settings.input.clone().ok_or_else(|| config_err("input is required"))?;
        let data = ingest_csv(&path, &ColumnSpec::from_settings(&self.settings)?, true)?;
        self.record("input", describe(&data));
        Ok(data)
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<()> {
        let path = self.output(name);
        std::fs::write(path, serde_json::to_string_pretty(value).expect("json") + "\n")?;
        Ok(())
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn model_name(kind: &ModelKind) -> Value {
    match kind {
        ModelKind::Dense => json!({ "model": "dense" }),
        ModelKind::Nngp { m } => json!({ "model": "nngp", "m": m }),
        ModelKind::LowRank { r, .. } => json!({ "model": "lowrank", "r": r }),
    }
}

pub fn simulate(run: &mut Run) -> Result<()> {
    let s = run.settings.clone();
    let n = config::require_at_least("n", s.n.unwrap_or(1000), 2)?;
    let holdout = s.holdout.unwrap_or(200);
    let beta = s.beta.clone().unwrap_or_else(|| vec![1.0, -5.0]);
    if beta.is_empty() {
        return Err(config_err("beta needs at least the intercept"));
    }
    let family = CorrelationFamily::new(config::family_kind(&s)?, config::require_positive("phi", s.phi.unwrap_or(16.0))?)?;
    let sigma2 = config::require_positive("sigma2", s.sigma2.unwrap_or(2.0))?;
    let tau2 = config::nonneg("tau2", s.tau2.unwrap_or(0.2))?;
    let model = GpOracleModel::new(family, sigma2, tau2, DVector::from_vec(beta.clone()))?;
    let (all, w) = simulate_unit_square(n + holdout, &model, run.seed)?;

    let mut names = vec![INTERCEPT.to_owned()];
    names.extend((1..beta.len()).map(|j| format!("pred{j}")));
    let as_dataset = |idx: &[usize]| {
        let part = all.select(idx);
        Dataset {
            locs: part.locs,
            y: Some(part.y),
            x: part.x,
            predictor_names: names.clone(),
            coord_names: vec!["x".into(), "y".into()],
        }
    };
    let train_idx: Vec<usize> = (0..n).collect();
    let path = run.output("train.csv");
    write_dataset(&path, &as_dataset(&train_idx), "response")?;
    if holdout > 0 {
        let idx: Vec<usize> = (n..n + holdout).collect();
        let path = run.output("holdout.csv");
        write_dataset(&path, &as_dataset(&idx), "response")?;
    }
    let rows: Vec<Vec<f64>> = (0..n + holdout)
        .map(|i| {
            let p = all.locs.point(i);
            vec![p[0], p[1], w[i], f64::from(u8::from(i >= n))]
        })
        .collect();
    let path = run.output("latent.csv");
    write_table(&path, &["x", "y", "w", "holdout"], &rows)?;
    run.record("simulated", json!({ "train": n, "holdout": holdout, "family": family.kind().to_string() }));
    Ok(())
}

fn variogram_fit(run: &mut Run, data: &SpatialData, kind: CorrelationKind) -> Result<VariogramFit> {
    let bins = config::require_at_least("bins", run.settings.bins.unwrap_or(15), 4)?;
    let resid = ols_residuals(&data.y, &data.x)?;
    let vg = empirical_variogram(resid.as_slice(), &data.locs, bins, run.settings.max_dist)?;
    let path = run.output("variogram.csv");
    vg.write_csv(&path)?;
    let fit = fit_variogram(&vg, kind)?;
    let value = json!({
        "family": kind.to_string(),
        "nugget": fit.nugget,
        "partial_sill": fit.partial_sill,
        "phi": fit.phi,
        "delta2": fit.delta2(),
        "objective": fit.objective,
        "converged": fit.converged,
        "degenerate": fit.degenerate,
        "max_dist": vg.max_dist,
        "bins": bins,
    });
    run.write_json("variogram_fit.json", &value)?;
    run.record("variogram", value);
    Ok(fit)
}

pub fn variogram(run: &mut Run) -> Result<()> {
    let data = run.training()?.spatial()?;
    let kind = config::family_kind(&run.settings)?;
    variogram_fit(run, &data, kind)?;
    Ok(())
}

/// Grid search over `(φ, δ²)`; writes the RMSPE tables and the selection.
fn search(run: &mut Run, data: &SpatialData, grid_spec: &GridSpec, prior: &ConjugatePrior) -> Result<(f64, f64)> {
    let s = run.settings.clone();
    let kind = config::family_kind(&s)?;
    let model = config::model_kind(&s)?;
    let folds = config::require_at_least("folds", s.folds.unwrap_or(5), 2)?;
    let refine = config::refine_count(&s)?;
    let grid = match grid_spec {
        GridSpec::Variogram => {
            let vf = variogram_fit(run, data, kind)?;
            CvGrid::around(kind, vf.phi, vf.delta2(), (2.0, 3.0), 7, folds, run.seed)?
        }
        GridSpec::Wide => CvGrid { folds, ..CvGrid::default_for(&data.locs, kind, run.seed)? },
        GridSpec::Explicit { phi, delta2 } => {
            CvGrid { kind, phi_values: phi.clone(), delta2_values: delta2.clone(), folds, seed: run.seed }
        }
    };
    let (first, second): (CvResult, Option<CvResult>) = if refine > 1 {
        let (a, b) = cv_two_pass(data, model, &grid, prior, refine)?;
        (a, Some(b))
    } else {
        (cv_select(data, model, &grid, prior)?, None)
    };
    let path = run.output("cv_grid.csv");
    first.write_csv(&path)?;
    let best = match &second {
        Some(r) => {
            let path = run.output("cv_refine.csv");
            r.write_csv(&path)?;
            r.best
        }
        None => first.best,
    };
    if !best.rmspe.is_finite() {
        return Err(CliError::Model(spconj::Error::InvalidInput("every grid point failed to fit".into())));
    }
    let mut value = json!({ "phi": best.phi, "delta2": best.delta2, "rmspe": best.rmspe, "family": kind.to_string() });
    if let (Value::Object(v), Value::Object(m)) = (&mut value, model_name(&model)) {
        v.extend(m);
    }
    run.write_json("cv_selected.json", &value)?;
    run.record("cv", value);
    Ok((best.phi, best.delta2))
}

pub fn cv(run: &mut Run) -> Result<()> {
    let data = run.training()?.spatial()?;
    let prior = config::prior(&run.settings, data.x.ncols())?;
    match config::hyper_source(&run.settings, true)? {
        HyperSource::Search(g) => {
            search(run, &data, &g, &prior)?;
            Ok(())
        }
        HyperSource::Fixed { .. } => Err(config_err("cv needs a grid, not a fixed (phi, delta2)")),
    }
}

fn hyperparameters(run: &mut Run, data: &SpatialData, prior: &ConjugatePrior) -> Result<(f64, f64)> {
    match config::hyper_source(&run.settings, false)? {
        HyperSource::Fixed { phi, delta2 } => {
            // echo the values themselves so the manifest does not depend on the file
            if run.settings.hyper_from.take().is_some() {
                run.settings.phi = Some(phi);
                run.settings.delta2 = Some(delta2);
            }
            Ok((phi, delta2))
        }
        HyperSource::Search(g) => search(run, data, &g, prior),
    }
}

/// A fitted latent model, ready for prediction.
struct Fitted {
    posterior: ConjugatePosterior,
    draws: Option<PosteriorDraws>,
    /// Latent surface draws at the training locations (S × n).
    w_draws: Option<DMatrix<f64>>,
    family: CorrelationFamily,
    delta2: f64,
    basis: Option<LowRankBasis>,
    model: ModelKind,
}

fn fit_latent(run: &mut Run, data: &SpatialData, prior: &ConjugatePrior, phi: f64, delta2: f64) -> Result<Fitted> {
    let s = &run.settings;
    let draws = s.draws.unwrap_or(1000);
    let model = config::model_kind(s)?;
    let family = CorrelationFamily::new(config::family_kind(s)?, phi)?;
    let mut r = rng(run.seed, 0);
    let fitted = match model {
        ModelKind::Dense => {
            let corr = correlation_matrix_self(&family, &data.locs);
            let sys = build_augmented_latent(&data.y, &data.x, prior, &corr, delta2)?;
            let posterior = posterior_latent(&sys, prior)?;
            let draws = if draws == 0 { None } else { Some(sample_exact(&posterior, draws, delta2, &mut r)?) };
            let w_draws = draws.as_ref().and_then(|d| d.block(Block::W)).map(|b| b.into_owned());
            Fitted { posterior, draws, w_draws, family, delta2, basis: None, model }
        }
        ModelKind::Nngp { m } => {
            let fit = NngpModel::new(&data.locs, m)?.fit(data, prior, &family, delta2, draws, &mut r)?;
            run.record("solver", json!({ "iterations": fit.solver.iterations, "converged": fit.solver.converged }));
            let w_draws = fit.draws.as_ref().and_then(|d| d.block(Block::W)).map(|b| b.into_owned());
            Fitted { posterior: fit.posterior, draws: fit.draws, w_draws, family, delta2, basis: None, model }
        }
        ModelKind::LowRank { r: rank, strategy } => {
            let knots = select_knots(&data.locs, rank, strategy)?;
            let basis = build_predictive_process_basis(&family, &data.locs, &knots)?;
            let fit = fit_conjugate_lowrank(data, &basis, prior, delta2, draws, &mut r)?;
            Fitted {
                posterior: fit.posterior,
                draws: fit.draws,
                w_draws: fit.w_draws,
                family,
                delta2,
                basis: Some(basis),
                model,
            }
        }
    };
    Ok(fitted)
}

fn write_parameter_summary(path: &Path, names: &[String], rows: &[Summary]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["parameter", "mean", "sd", "q025", "q975"])?;
    for (name, s) in names.iter().zip(rows) {
        let vals = [s.mean, s.sd, s.q025, s.q975].map(spconj::predict::format_float);
        out.write_record(std::iter::once(name.as_str()).chain(vals.iter().map(String::as_str)))?;
    }
    out.flush()?;
    Ok(())
}

/// Closed-form posterior: `a*`, `b*`, coefficient means and `E[σ²]`.
fn closed_form(post: &ConjugatePosterior, names: &[String], phi: f64, delta2: f64) -> Value {
    let beta = post.block_mean(Block::Beta).expect("posterior has a beta block");
    let coef: Map<String, Value> = names.iter().zip(beta.iter()).map(|(n, &b)| (n.clone(), json!(b))).collect();
    let s2 = post.sigma2_mean();
    json!({
        "a_star": post.a_star,
        "b_star": post.b_star,
        "beta_mean": coef,
        "sigma2_mean": if s2.is_finite() { json!(s2) } else { Value::Null },
        "tau2_mean": if s2.is_finite() { json!(delta2 * s2) } else { Value::Null },
        "phi": phi,
        "delta2": delta2,
        "n": post.n_obs,
    })
}

fn write_fit_outputs(run: &mut Run, fitted: &Fitted, data: &Dataset, phi: f64) -> Result<()> {
    let value = closed_form(&fitted.posterior, &data.predictor_names, phi, fitted.delta2);
    run.write_json("posterior.json", &value)?;
    run.record("posterior", value);
    if let Some(draws) = &fitted.draws {
        let mut names = data.predictor_names.clone();
        names.extend(["sigma2".to_owned(), "tau2".to_owned()]);
        let mut rows = draws.block_summaries(Block::Beta).expect("beta block");
        rows.push(draws.sigma2_summary());
        rows.push(draws.tau2_summary());
        let path = run.output("posterior_summary.csv");
        write_parameter_summary(&path, &names, &rows)?;
    }
    if run.settings.latent.unwrap_or(false) {
        let w = fitted.w_draws.as_ref().ok_or_else(|| config_err("latent summaries need draws > 0"))?;
        let rows: Vec<Vec<f64>> = (0..data.len())
            .map(|i| {
                let s = summarize(w.column(i).as_slice());
                let mut row = data.locs.point(i).to_vec();
                row.extend([s.mean, s.sd, s.q025, s.q975]);
                row
            })
            .collect();
        let mut header: Vec<&str> = data.coord_names.iter().map(String::as_str).collect();
        header.extend(["w_mean", "w_sd", "w_q025", "w_q975"]);
        let path = run.output("latent_summary.csv");
        write_table(&path, &header, &rows)?;
    }
    Ok(())
}

pub fn fit(run: &mut Run) -> Result<()> {
    let dataset = run.training()?;
    let data = dataset.spatial()?;
    let prior = config::prior(&run.settings, data.x.ncols())?;
    let (phi, delta2) = hyperparameters(run, &data, &prior)?;
    let fitted = fit_latent(run, &data, &prior, phi, delta2)?;
    write_fit_outputs(run, &fitted, &dataset, phi)
}

fn predictive_weights(fitted: &Fitted, train: &SpatialData, new: &Dataset) -> Result<PredictiveWeights> {
    Ok(match fitted.model {
        ModelKind::Dense => predictive_weights_dense(&fitted.family, &train.locs, &new.locs)?,
        ModelKind::Nngp { m } => predictive_weights_nngp(&fitted.family, &train.locs, &new.locs, m)?,
        ModelKind::LowRank { .. } => {
            PredictiveWeights::from_basis_rows(&fitted.basis.as_ref().expect("low-rank fit keeps its basis").rows_at(&new.locs)?)
        }
    })
}

pub fn predict(run: &mut Run) -> Result<()> {
    let dataset = run.training()?;
    let data = dataset.spatial()?;
    let new_path = run.settings.new_data.clone().ok_or_else(|| config_err("new_data is required for predict"))?;
    let new = ingest_csv(&new_path, &ColumnSpec::from_settings(&run.settings)?, false)?;
    if new.predictor_names != dataset.predictor_names {
        return Err(config_err("new_data predictors differ from the training predictors"));
    }
    if run.settings.draws == Some(0) {
        return Err(config_err("predict needs draws > 0"));
    }
    let prior = config::prior(&run.settings, data.x.ncols())?;
    let (phi, delta2) = hyperparameters(run, &data, &prior)?;
    let fitted = fit_latent(run, &data, &prior, phi, delta2)?;
    write_fit_outputs(run, &fitted, &dataset, phi)?;

    let weights = predictive_weights(&fitted, &data, &new)?;
    let draws = fitted.draws.as_ref().expect("draws > 0");
    let mut r = rng(run.seed, 1);
    let pred = match fitted.model {
        ModelKind::LowRank { .. } => sample_predictive(draws, &weights, &new.x, &mut r)?,
        _ => sample_predictive_latent(
            draws.block(Block::Beta).expect("beta block"),
            draws.block(Block::W).expect("latent block"),
            &draws.sigma2,
            draws.delta2,
            &weights,
            &new.x,
            &mut r,
        )?,
    };
    let path = run.output("predictions.csv");
    pred.write_csv(&new.locs, &path)?;
    let mut report = json!({ "locations": new.len() });
    if let Some(y) = &new.y {
        let mean = pred.y_mean();
        let rmspe = spconj::hyperparam::rmspe(mean.as_slice(), y.as_slice())?;
        let covered = pred.y_summary.iter().zip(y.iter()).filter(|(s, &v)| s.covers(v)).count();
        report["rmspe"] = json!(rmspe);
        report["y_interval_coverage"] = json!(covered as f64 / y.len() as f64);
    }
    run.record("prediction", report);
    Ok(())
}

pub fn metakrige(run: &mut Run) -> Result<()> {
    let s = run.settings.clone();
    if let Some(files) = &s.summaries {
        let mut summaries = Vec::new();
        for f in files {
            summaries.extend(read_summaries(f)?);
        }
        let p = summaries.first().map(|x| x.m_k.len()).ok_or_else(|| config_err("summary files are empty"))?;
        let prior = config::prior(&s, p)?;
        let pooled = pool_exact(&summaries, &prior)?;
        let names: Vec<String> = (0..p).map(|j| format!("beta{j}")).collect();
        let value = closed_form(&pooled, &names, f64::NAN, f64::NAN);
        run.write_json("pooled_exact.json", &value)?;
        run.record("pooled_exact", value);
        return Ok(());
    }

    let dataset = run.training()?;
    let data = dataset.spatial()?;
    let prior = config::prior(&s, data.x.ncols())?;
    let (phi, delta2) = hyperparameters(run, &data, &prior)?;
    let family = CorrelationFamily::new(config::family_kind(&s)?, phi)?;
    let k = s.subsets.unwrap_or(4);
    let sets = partition_data(&data.locs, k, config::partition(&s)?, run.seed)?;
    let subset_draws = config::require_at_least("subset_draws", s.subset_draws.unwrap_or(500), 2)?;
    let draws = s.draws.unwrap_or(1000);
    let seed = run.seed;

    // subsets are modeled as independent blocks with dense V_k = R_k + δ²I
    let fits: Vec<Result<_>> = sets
        .par_iter()
        .enumerate()
        .map(|(i, idx)| {
            let sub = data.select(idx);
            let n = sub.len();
            if n > spconj::geo::DENSE_POSTERIOR_LIMIT {
                return Err(spconj::Error::TooLarge { n, limit: spconj::geo::DENSE_POSTERIOR_LIMIT }.into());
            }
            let v = correlation_matrix_self(&family, &sub.locs) + DMatrix::identity(n, n) * delta2;
            let solver = DenseSpdSolver::new(v)?;
            let summary = subset_summary(i, &sub.y, &sub.x, &solver, &prior)?;
            let post = posterior_marginalized(&sub.y, &sub.x, &solver, &prior)?;
            let samples = subset_samples(i, &post, subset_draws, &mut rng(seed, 100 + i as u64))?;
            Ok((summary, Arc::new(samples)))
        })
        .collect();
    let mut summaries = Vec::with_capacity(k);
    let mut samples = Vec::with_capacity(k);
    for f in fits {
        let (a, b) = f?;
        summaries.push(a);
        samples.push(b);
    }
    let path = run.output("subset_summaries.csv");
    write_summaries(&path, &summaries)?;

    let pooled = pool_exact(&summaries, &prior)?;
    let value = closed_form(&pooled, &dataset.predictor_names, phi, delta2);
    run.write_json("pooled_exact.json", &value)?;
    run.record("pooled_exact", value);

    let mut names = dataset.predictor_names.clone();
    names.extend(["sigma2".to_owned(), "tau2".to_owned()]);
    if draws > 0 {
        let d = sample_exact(&pooled, draws, delta2, &mut rng(seed, 2))?;
        let mut rows = d.block_summaries(Block::Beta).expect("beta block");
        rows.push(d.sigma2_summary());
        rows.push(d.tau2_summary());
        let path = run.output("pooled_exact_summary.csv");
        write_parameter_summary(&path, &names, &rows)?;
    }

    let gm = weiszfeld_gm(&samples, &WeiszfeldConfig { bandwidth: config::bandwidth(&s)?, ..Default::default() })?;
    let rows: Vec<Vec<f64>> =
        summaries.iter().zip(&gm.weights).map(|(sm, &w)| vec![sm.k as f64, sm.n_k as f64, w]).collect();
    let path = run.output("gm_weights.csv");
    write_table(&path, &["subset", "n", "weight"], &rows)?;
    run.record(
        "geometric_median",
        json!({ "iterations": gm.iterations, "converged": gm.converged, "bandwidth": gm.bandwidth, "weights": gm.weights }),
    );
    if draws > 0 {
        let pooled_draws = sample_gm(&gm, draws, &mut rng(seed, 3))?;
        let p = data.x.ncols();
        let mut rows: Vec<Summary> = (0..=p).map(|j| summarize(pooled_draws.column(j).as_slice())).collect();
        let tau2: Vec<f64> = pooled_draws.column(p).iter().map(|s2| s2 * delta2).collect();
        rows.push(summarize(&tau2));
        let path = run.output("pooled_gm_summary.csv");
        write_parameter_summary(&path, &names, &rows)?;
    }
    Ok(())
}
