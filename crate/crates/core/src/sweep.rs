//! Repeated estimation trials over a design grid with common random
//! numbers, the single-fidelity baseline, and variance-reduction reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acv::{evaluate_acv, GroupSums};
use crate::design::EstimatorDesign;
use crate::error::{Error, Result};
use crate::prob::RngStream;
use crate::stats;
use crate::utility::{eval_utility_grid, labels, OuterDraws, Problem, UtilityModelSpec};
use crate::Design;

/// Per-trial estimates at every design of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub designs: Vec<Design>,
    /// `estimates[t][k]`: trial t at design k
    pub estimates: Vec<Vec<f64>>,
}

impl SweepResult {
    pub fn n_trials(&self) -> usize {
        self.estimates.len()
    }

    fn column(&self, k: usize) -> Vec<f64> {
        self.estimates.iter().map(|t| t[k]).collect()
    }

    /// Empirical mean over trials at each design.
    pub fn means(&self) -> Vec<f64> {
        (0..self.designs.len()).map(|k| stats::mean(&self.column(k))).collect()
    }

    /// Unbiased empirical variance over trials; `None` with fewer than two.
    pub fn variances(&self) -> Vec<Option<f64>> {
        (0..self.designs.len())
            .map(|k| stats::variance(&self.column(k)))
            .collect()
    }

    /// mean ± 2 standard deviations at each design.
    pub fn bands(&self) -> Vec<Option<(f64, f64)>> {
        self.means()
            .into_iter()
            .zip(self.variances())
            .map(|(m, v)| v.map(|v| (m - 2.0 * v.sqrt(), m + 2.0 * v.sqrt())))
            .collect()
    }

    /// Mean over designs of the per-design empirical variances.
    pub fn design_averaged_variance(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.variances().into_iter().collect();
        v.map(|v| stats::mean(&v))
    }

    /// Writes `design_index,design_value...,trial,estimate`, one row per
    /// (trial, design).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let dim = self.designs.first().map_or(1, Vec::len);
        let mut header = vec!["design_index".to_string()];
        header.extend(design_columns(dim));
        header.extend(["trial".to_string(), "estimate".to_string()]);
        w.write_record(&header)?;
        for (t, row) in self.estimates.iter().enumerate() {
            for (k, est) in row.iter().enumerate() {
                let mut rec = vec![k.to_string()];
                rec.extend(self.designs[k].iter().map(|v| v.to_string()));
                rec.extend([t.to_string(), est.to_string()]);
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`SweepResult::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let ncols = r.headers()?.len();
        if ncols < 4 {
            return Err(Error::Config(format!("{}: too few columns", path.display())));
        }
        let dim = ncols - 3;
        let mut designs: Vec<Design> = Vec::new();
        let mut estimates: Vec<Vec<f64>> = Vec::new();
        let bad = |what: &str| Error::Config(format!("{}: bad {what}", path.display()));
        for rec in r.records() {
            let rec = rec?;
            let k: usize = rec[0].parse().map_err(|_| bad("design_index"))?;
            let design: Design = (1..=dim)
                .map(|i| rec[i].parse::<f64>().map_err(|_| bad("design value")))
                .collect::<Result<_>>()?;
            let t: usize = rec[dim + 1].parse().map_err(|_| bad("trial"))?;
            let est: f64 = rec[dim + 2].parse().map_err(|_| bad("estimate"))?;
            if k == designs.len() && t == 0 {
                designs.push(design);
            } else if designs.get(k) != Some(&design) {
                return Err(bad("design ordering"));
            }
            if t == estimates.len() {
                estimates.push(Vec::new());
            }
            let row = estimates.get_mut(t).ok_or_else(|| bad("trial ordering"))?;
            if row.len() != k {
                return Err(bad("row ordering"));
            }
            row.push(est);
        }
        if estimates.iter().any(|r| r.len() != designs.len()) {
            return Err(bad("trial: incomplete"));
        }
        Ok(Self { designs, estimates })
    }
}

fn design_columns(dim: usize) -> Vec<String> {
    if dim == 1 {
        vec!["design_value".to_string()]
    } else {
        (0..dim).map(|i| format!("design_value_{i}")).collect()
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

fn check_designs(designs: &[Design]) -> Result<()> {
    if designs.is_empty() {
        return Err(Error::InvalidSpec("empty design grid".into()));
    }
    Ok(())
}

/// Multi-fidelity estimates over `designs` for `n_trials` independent trials.
///
/// Trial t draws its samples from `rng.derive(TRIAL).derive(t)`. Within a
/// trial every design sees the same outer and inner draws (common random
/// numbers); designs are evaluated together per sample.
pub fn run_sweep(
    designs: &[Design],
    est: &EstimatorDesign,
    specs: &[UtilityModelSpec],
    problem: &Problem,
    n_trials: usize,
    rng: &RngStream,
) -> Result<SweepResult> {
    check_designs(designs)?;
    est.validate()?;
    if n_trials == 0 {
        return Err(Error::InvalidSpec("n_trials must be >= 1".into()));
    }
    let used: Vec<UtilityModelSpec> = est
        .models
        .iter()
        .zip(&est.n_in)
        .map(|(&m, &n)| {
            specs
                .get(m)
                .map(|s| s.with_n_in(n))
                .ok_or_else(|| Error::Config(format!("design uses model {m}, which is not configured")))
        })
        .collect::<Result<_>>()?;
    let groups = est.groups.groups();
    let ranges = est.groups.group_ranges();
    let total = est.groups.total_samples();
    let nd = designs.len();
    let mut estimates = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        let trial = rng.derive(labels::TRIAL).derive(t as u64);
        let outer = OuterDraws::draw(problem, &trial.derive(labels::OUTER), total)?;
        // sums[k][model][group]
        let mut sums = vec![vec![vec![None; groups.len()]; used.len()]; nd];
        for (j, spec) in used.iter().enumerate() {
            let inner = spec.inner_stream(&trial);
            for (g, range) in ranges.iter().enumerate() {
                if !est.groups.evaluates(j, g) || range.is_empty() {
                    continue;
                }
                let u = eval_utility_grid(
                    spec,
                    problem,
                    designs,
                    &outer,
                    range.clone(),
                    &inner,
                    &[spec.n_in],
                )?;
                for (k, row) in u[0].rows().into_iter().enumerate() {
                    sums[k][j][g] = Some(stats::sum(row.iter().copied()));
                }
            }
        }
        let row = sums
            .into_iter()
            .map(|s| evaluate_acv(&GroupSums { sums: s }, &est.alpha, &est.groups))
            .collect::<Result<Vec<f64>>>()?;
        estimates.push(row);
    }
    Ok(SweepResult {
        designs: designs.to_vec(),
        estimates,
    })
}

/// Outer-loop size of single-fidelity NMC at the same budget: the budget
/// over the cost of one u₀ evaluation, rounded up.
pub fn baseline_n_out(w_budget: f64, spec0: &UtilityModelSpec) -> usize {
    ((w_budget / spec0.cost()).ceil() as usize).max(1)
}

/// Single-fidelity nested Monte Carlo estimates with `n_out` outer samples
/// of `spec0`; trial t uses `rng.derive(BASELINE).derive(t)`.
pub fn run_baseline_nmc(
    designs: &[Design],
    n_out: usize,
    spec0: &UtilityModelSpec,
    problem: &Problem,
    n_trials: usize,
    rng: &RngStream,
) -> Result<SweepResult> {
    check_designs(designs)?;
    if n_out == 0 || n_trials == 0 {
        return Err(Error::InvalidSpec("N_out and n_trials must be >= 1".into()));
    }
    let estimates = (0..n_trials)
        .map(|t| {
            let trial = rng.derive(labels::BASELINE).derive(t as u64);
            let outer = OuterDraws::draw(problem, &trial.derive(labels::OUTER), n_out)?;
            let u = eval_utility_grid(
                spec0,
                problem,
                designs,
                &outer,
                0..n_out,
                &spec0.inner_stream(&trial),
                &[spec0.n_in],
            )?;
            Ok(u[0]
                .rows()
                .into_iter()
                .map(|r| stats::mean(&r.to_vec()))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        designs: designs.to_vec(),
        estimates,
    })
}

/// Variance comparison at one design. `ratio` is `None` when a variance is
/// unavailable and +∞ when the multi-fidelity variance is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub design_index: usize,
    pub baseline_var: Option<f64>,
    pub mf_var: Option<f64>,
    #[serde(with = "ratio_repr")]
    pub ratio: Option<f64>,
}

/// Serializes an infinite ratio as the string "inf", since JSON has no
/// infinity.
mod ratio_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() => "inf".serialize(s),
            Some(x) => x.serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            Some(Repr::Num(x)) => Some(x),
            Some(Repr::Text(t)) if t == "inf" => Some(f64::INFINITY),
            Some(Repr::Text(t)) => {
                return Err(serde::de::Error::custom(format!("bad ratio {t:?}")))
            }
            None => None,
        })
    }
}

/// Per-design and design-averaged variance reduction of `mf` over `baseline`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub rows: Vec<ReductionRow>,
    /// mean of per-design baseline variances (designs with zero MF variance
    /// excluded)
    pub baseline_avg: Option<f64>,
    pub mf_avg: Option<f64>,
    /// baseline_avg / mf_avg
    pub ratio_avg: Option<f64>,
    pub xi_star_index: usize,
    pub xi_star: Design,
}

impl ReductionReport {
    /// Writes `design_index,baseline_var,mf_var,ratio`; missing values are
    /// empty and an infinite ratio is `inf`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["design_index", "baseline_var", "mf_var", "ratio"])?;
        let fmt = |v: Option<f64>| match v {
            Some(x) if x.is_infinite() => "inf".to_string(),
            Some(x) => x.to_string(),
            None => String::new(),
        };
        for r in &self.rows {
            w.write_record([
                r.design_index.to_string(),
                fmt(r.baseline_var),
                fmt(r.mf_var),
                fmt(r.ratio),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Compares two sweeps over the same design grid. ξ* is the argmax of the
/// multi-fidelity empirical mean.
pub fn reduction_report(baseline: &SweepResult, mf: &SweepResult) -> Result<ReductionReport> {
    if baseline.designs != mf.designs {
        return Err(Error::InvalidSpec(
            "baseline and multi-fidelity sweeps use different design grids".into(),
        ));
    }
    let bv = baseline.variances();
    let mv = mf.variances();
    let rows: Vec<ReductionRow> = bv
        .iter()
        .zip(&mv)
        .enumerate()
        .map(|(k, (&b, &m))| ReductionRow {
            design_index: k,
            baseline_var: b,
            mf_var: m,
            ratio: match (b, m) {
                (Some(_), Some(0.0)) => Some(f64::INFINITY),
                (Some(b), Some(m)) => Some(b / m),
                _ => None,
            },
        })
        .collect();
    let kept: Vec<&ReductionRow> = rows
        .iter()
        .filter(|r| r.ratio.is_some_and(f64::is_finite))
        .collect();
    let (baseline_avg, mf_avg) = if kept.is_empty() {
        (None, None)
    } else {
        let avg = |f: fn(&ReductionRow) -> Option<f64>| {
            stats::mean(&kept.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
        };
        (Some(avg(|r| r.baseline_var)), Some(avg(|r| r.mf_var)))
    };
    let (xi_star_index, xi_star) = argmax_design(mf)?;
    Ok(ReductionReport {
        rows,
        ratio_avg: baseline_avg.zip(mf_avg).map(|(b, m)| b / m),
        baseline_avg,
        mf_avg,
        xi_star_index,
        xi_star,
    })
}

/// Design with the largest empirical mean; ties go to the lowest index and
/// NaN means are skipped.
pub fn argmax_design(sweep: &SweepResult) -> Result<(usize, Design)> {
    let means = sweep.means();
    let mut best: Option<usize> = None;
    for (k, m) in means.iter().enumerate() {
        if m.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *m > means[b]) {
            best = Some(k);
        }
    }
    let k = best.ok_or_else(|| Error::InvalidSpec("sweep has no finite means".into()))?;
    Ok((k, sweep.designs[k].clone()))
}
