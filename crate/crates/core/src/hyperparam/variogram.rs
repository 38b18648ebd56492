//! Empirical (Matheron) semivariogram and weighted least-squares fitting of
//! `γ(h) = τ² + σ²(1 − ρ(φ; h))`.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geo::{euclidean, CorrelationFamily, CorrelationKind, LocationSet};
use crate::predict::format_float;

/// Smallest sample for which binned semivariances are meaningful.
pub const VARIOGRAM_MIN_POINTS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalVariogram {
    pub bin_midpoints: Vec<f64>,
    pub semivariances: Vec<f64>,
    pub pair_counts: Vec<usize>,
    pub max_dist: f64,
}

impl EmpiricalVariogram {
    pub fn len(&self) -> usize {
        self.bin_midpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bin_midpoints.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(["distance", "semivariance", "pairs"])?;
        for i in 0..self.len() {
            out.write_record([
                format_float(self.bin_midpoints[i]),
                format_float(self.semivariances[i]),
                self.pair_counts[i].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `γ̂(h) = Σ(eᵢ − eⱼ)² / (2|N(h)|)` over `n_bins` equal-width bins on
/// `(0, max_dist]`. `max_dist` defaults to a quarter of the maximum inter-site
/// distance. Empty bins are omitted.
pub fn empirical_variogram(
    residuals: &[f64],
    locs: &LocationSet,
    n_bins: usize,
    max_dist: Option<f64>,
) -> Result<EmpiricalVariogram> {
    let n = residuals.len();
    if locs.len() != n {
        return Err(Error::DimensionMismatch(format!("{n} residuals for {} locations", locs.len())));
    }
    if n < VARIOGRAM_MIN_POINTS {
        return Err(Error::InvalidInput(format!("variogram needs at least {VARIOGRAM_MIN_POINTS} points, got {n}")));
    }
    if n_bins == 0 {
        return Err(Error::InvalidParameter("bin count must be positive".into()));
    }
    let diameter = locs.max_distance();
    let max_dist = max_dist.unwrap_or(diameter / 4.0);
    if !(max_dist > 0.0 && max_dist <= diameter * (1.0 + 1e-12)) {
        return Err(Error::InvalidParameter(format!(
            "max_dist {max_dist} must lie in (0, {diameter}] (maximum inter-site distance)"
        )));
    }
    let width = max_dist / n_bins as f64;
    let (sums, counts) = (0..n)
        .into_par_iter()
        .fold(
            || (vec![0.0; n_bins], vec![0usize; n_bins]),
            |(mut s, mut c), i| {
                let pi = locs.point(i);
                for j in i + 1..n {
                    let h = euclidean(pi, locs.point(j));
                    if h > 0.0 && h <= max_dist {
                        let b = ((h / width) as usize).min(n_bins - 1);
                        let d = residuals[i] - residuals[j];
                        s[b] += d * d;
                        c[b] += 1;
                    }
                }
                (s, c)
            },
        )
        .reduce(
            || (vec![0.0; n_bins], vec![0usize; n_bins]),
            |(mut s, mut c), (s2, c2)| {
                for b in 0..n_bins {
                    s[b] += s2[b];
                    c[b] += c2[b];
                }
                (s, c)
            },
        );
    let mut vg = EmpiricalVariogram { bin_midpoints: vec![], semivariances: vec![], pair_counts: vec![], max_dist };
    for b in 0..n_bins {
        if counts[b] > 0 {
            vg.bin_midpoints.push((b as f64 + 0.5) * width);
            vg.semivariances.push(sums[b] / (2.0 * counts[b] as f64));
            vg.pair_counts.push(counts[b]);
        }
    }
    if vg.is_empty() {
        return Err(Error::EmptyVariogram);
    }
    Ok(vg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramFit {
    pub nugget: f64,
    pub partial_sill: f64,
    pub phi: f64,
    /// Weighted sum of squared deviations at the optimum.
    pub objective: f64,
    /// The refinement met its tolerance with `φ̂` inside the search range.
    pub converged: bool,
    /// No resolvable spatial signal: the partial sill collapsed to zero or the
    /// fitted correlation is below 0.05 at the first lag. The fit is then
    /// reported as pure nugget and `φ̂` is not identified.
    pub degenerate: bool,
}

impl VariogramFit {
    /// `δ̂² = τ̂²/σ̂²`.
    pub fn delta2(&self) -> f64 {
        self.nugget / self.partial_sill
    }

    pub fn semivariance(&self, kind: CorrelationKind, h: f64) -> f64 {
        let fam = CorrelationFamily::new(kind, self.phi).expect("fitted phi is positive");
        self.nugget + self.partial_sill * (1.0 - fam.correlation(h))
    }
}

/// Nonnegative weighted least squares for `(τ², σ²)` at fixed `φ`.
fn fit_sills(vg: &EmpiricalVariogram, fam: &CorrelationFamily) -> (f64, f64, f64) {
    let w: Vec<f64> = vg.pair_counts.iter().map(|&c| c as f64).collect();
    let g: Vec<f64> = vg.bin_midpoints.iter().map(|&h| 1.0 - fam.correlation(h)).collect();
    let y = &vg.semivariances;
    let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..y.len() {
        s11 += w[i];
        s12 += w[i] * g[i];
        s22 += w[i] * g[i] * g[i];
        t1 += w[i] * y[i];
        t2 += w[i] * g[i] * y[i];
    }
    let sse = |tau2: f64, sigma2: f64| -> f64 {
        (0..y.len()).map(|i| w[i] * (y[i] - tau2 - sigma2 * g[i]).powi(2)).sum()
    };
    let det = s11 * s22 - s12 * s12;
    if det > 1e-12 * s11 * s22 {
        let tau2 = (s22 * t1 - s12 * t2) / det;
        let sigma2 = (s11 * t2 - s12 * t1) / det;
        if tau2 >= 0.0 && sigma2 >= 0.0 {
            return (tau2, sigma2, sse(tau2, sigma2));
        }
    }
    let nugget_only = ((t1 / s11).max(0.0), 0.0);
    let sill_only = (0.0, if s22 > 0.0 { (t2 / s22).max(0.0) } else { 0.0 });
    let a = sse(nugget_only.0, nugget_only.1);
    let b = sse(sill_only.0, sill_only.1);
    if b < a {
        (sill_only.0, sill_only.1, b)
    } else {
        (nugget_only.0, nugget_only.1, a)
    }
}

/// Weighted least squares (weights = pair counts). The sills are profiled out
/// by nonnegative least squares; `log φ` is scanned on a coarse grid spanning
/// effective ranges from a quarter bin to ten times the cutoff, then refined
/// by golden-section search between the neighbors of the best grid point.
pub fn fit_variogram(vg: &EmpiricalVariogram, kind: CorrelationKind) -> Result<VariogramFit> {
    if vg.len() < 4 {
        return Err(Error::InvalidInput(format!("variogram fit needs at least 4 populated bins, got {}", vg.len())));
    }
    // effective range 3/φ for the exponential; close enough as a scan range for the others
    let width = vg.max_dist / vg.len().max(1) as f64;
    let lo = (3.0 / (10.0 * vg.max_dist)).ln();
    let hi = (3.0 / (0.25 * width.min(vg.bin_midpoints[0]))).ln();
    let profile = |log_phi: f64| -> (f64, f64, f64) {
        let fam = CorrelationFamily::new(kind, log_phi.exp()).expect("finite phi");
        fit_sills(vg, &fam)
    };
    let grid = 60;
    let step = (hi - lo) / (grid - 1) as f64;
    let scan: Vec<(f64, f64)> = (0..grid).map(|k| lo + k as f64 * step).map(|t| (t, profile(t).2)).collect();
    let best = (0..grid).min_by(|&a, &b| scan[a].1.total_cmp(&scan[b].1)).expect("nonempty grid");
    let interior = best > 0 && best < grid - 1;

    let (mut a, mut b) = (scan[best.saturating_sub(1)].0, scan[(best + 1).min(grid - 1)].0);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (profile(c).2, profile(d).2);
    let mut iters = 0;
    while (b - a) > 1e-10 && iters < 200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = profile(c).2;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = profile(d).2;
        }
        iters += 1;
    }
    let mut log_phi = 0.5 * (a + b);
    let mut sol = profile(log_phi);
    if scan[best].1 < sol.2 {
        log_phi = scan[best].0;
        sol = profile(log_phi);
    }
    let (mut nugget, mut partial_sill, mut objective) = sol;
    // correlation already gone at the first lag cannot be told apart from nugget
    let first_lag = CorrelationFamily::new(kind, log_phi.exp()).expect("finite phi").correlation(vg.bin_midpoints[0]);
    let degenerate = first_lag < 0.05 || partial_sill <= 1e-8 * (nugget + partial_sill).max(f64::MIN_POSITIVE);
    if degenerate {
        let wsum: f64 = vg.pair_counts.iter().map(|&c| c as f64).sum();
        nugget = vg.semivariances.iter().zip(&vg.pair_counts).map(|(g, &c)| g * c as f64).sum::<f64>() / wsum;
        partial_sill = 0.0;
        objective = vg.semivariances.iter().zip(&vg.pair_counts).map(|(g, &c)| c as f64 * (g - nugget).powi(2)).sum();
    }
    Ok(VariogramFit {
        nugget,
        partial_sill,
        phi: log_phi.exp(),
        objective,
        converged: interior && (b - a) <= 1e-10 && !degenerate,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn normal_residuals(n: usize, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sd).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn constant_residuals_give_zero() {
        let locs = LocationSet::uniform_unit_square(50, 1);
        let vg = empirical_variogram(&[3.0; 50], &locs, 10, None).unwrap();
        assert!(vg.semivariances.iter().all(|&g| g == 0.0));
        assert!(vg.pair_counts.iter().all(|&c| c >= 1));
        assert!(vg.bin_midpoints.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn symmetric_in_sign() {
        let locs = LocationSet::uniform_unit_square(60, 2);
        let e = normal_residuals(60, 1.0, 3);
        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
        assert_eq!(
            empirical_variogram(&e, &locs, 8, None).unwrap(),
            empirical_variogram(&neg, &locs, 8, None).unwrap()
        );
    }

    #[test]
    fn matches_pairwise_definition() {
        let locs = LocationSet::uniform_unit_square(40, 4);
        let e = normal_residuals(40, 1.0, 5);
        let vg = empirical_variogram(&e, &locs, 5, Some(0.5)).unwrap();
        let mut sums = [0.0; 5];
        let mut counts = [0usize; 5];
        for i in 0..40 {
            for j in 0..40 {
                let h = euclidean(locs.point(i), locs.point(j));
                if i != j && h <= 0.5 {
                    let b = ((h / 0.1) as usize).min(4);
                    sums[b] += (e[i] - e[j]).powi(2) / 2.0;
                    counts[b] += 1;
                }
            }
        }
        for b in 0..5 {
            assert_eq!(vg.pair_counts[b] * 2, counts[b]);
            assert!((vg.semivariances[b] - sums[b] / counts[b] as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_nugget_is_flat() {
        let locs = LocationSet::uniform_unit_square(400, 6);
        let e = normal_residuals(400, 1.5, 7);
        let vg = empirical_variogram(&e, &locs, 10, None).unwrap();
        let var = e.iter().map(|v| v * v).sum::<f64>() / 400.0;
        for (g, c) in vg.semivariances.iter().zip(&vg.pair_counts) {
            // pair increments are dependent; 3 standard errors with a generous effective count
            let se = var * (2.0 / (*c as f64).min(400.0)).sqrt();
            assert!((g - var).abs() < 3.0 * se, "{g} vs {var}");
        }
        let fit = fit_variogram(&vg, CorrelationKind::Exponential).unwrap();
        assert!(fit.degenerate && fit.partial_sill == 0.0, "{fit:?}");
        assert!((fit.nugget - var).abs() < 0.1 * var);
    }

    #[test]
    fn exact_model_points_are_recovered() {
        for (kind, tau2, sigma2, phi) in [
            (CorrelationKind::Exponential, 0.2, 2.0, 16.0),
            (CorrelationKind::Exponential, 0.0, 1.0, 5.0),
            (CorrelationKind::Matern32, 0.5, 1.5, 8.0),
        ] {
            let fam = CorrelationFamily::new(kind, phi).unwrap();
            let h: Vec<f64> = (0..15).map(|k| 0.025 + 0.05 * k as f64).collect();
            let vg = EmpiricalVariogram {
                semivariances: h.iter().map(|&d| tau2 + sigma2 * (1.0 - fam.correlation(d))).collect(),
                pair_counts: (0..15).map(|k| 100 + 10 * k).collect(),
                bin_midpoints: h,
                max_dist: 0.75,
            };
            let fit = fit_variogram(&vg, kind).unwrap();
            assert!((fit.nugget - tau2).abs() < 1e-6, "{fit:?}");
            assert!((fit.partial_sill - sigma2).abs() < 1e-6, "{fit:?}");
            assert!((fit.phi - phi).abs() < 1e-6 * phi, "{fit:?}");
            assert!(fit.converged && !fit.degenerate);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let locs = LocationSet::uniform_unit_square(20, 1);
        assert!(empirical_variogram(&[0.0; 20], &locs, 5, None).is_err());
        let locs = LocationSet::uniform_unit_square(40, 1);
        assert!(empirical_variogram(&[0.0; 40], &locs, 5, Some(10.0)).is_err());
        let vg = empirical_variogram(&[0.0; 40], &locs, 3, None).unwrap();
        assert!(fit_variogram(&vg, CorrelationKind::Exponential).is_err());
    }
}
