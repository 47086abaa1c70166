//! Pilot sampling, covariance and cost estimation, and budget-constrained
//! optimization of the sample allocation and the inner-loop sizes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acv::{
    self, family_layout, AllocationMatrix, CovarianceEstimate, Family, Structure,
};
use crate::error::{Error, Result};
use crate::prob::RngStream;
use crate::utility::{eval_utility_grid, labels, OuterDraws, Problem, UtilityModelSpec};
use crate::Design;

/// Design-averaged pilot covariance Σ̄ and utility-model costs for one
/// choice of inner-loop sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotCandidate {
    pub n_in: Vec<usize>,
    pub sigma_bar: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
}

/// Outcome of the pilot phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotResult {
    pub designs: Vec<Design>,
    pub sigma_bar: Vec<Vec<f64>>,
    pub sigma_per_design: Vec<Vec<Vec<f64>>>,
    /// cost of one evaluation of each utility model
    pub costs: Vec<f64>,
    pub n_pilot: usize,
    /// inner-loop sizes the covariance above was estimated at
    pub n_in: Vec<usize>,
    /// designs at which some utility model had zero pilot variance
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate_designs: Vec<usize>,
    /// Σ̄ at the inner-loop sizes visited by the inner-size search
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<PilotCandidate>,
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config("covariance matrix is not square".into()));
    }
    Ok(Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]))
}

impl PilotResult {
    pub fn covariance(&self) -> Result<CovarianceEstimate> {
        CovarianceEstimate::new(from_rows(&self.sigma_bar)?, self.n_pilot)
    }

    /// Correlation of each utility model with u₀ under Σ̄.
    pub fn correlations(&self) -> Vec<f64> {
        let c = &self.sigma_bar;
        (0..c.len())
            .map(|m| c[m][0] / (c[m][m] * c[0][0]).sqrt())
            .collect()
    }

    pub fn candidate(&self, n_in: &[usize]) -> Option<&PilotCandidate> {
        self.candidates.iter().find(|c| c.n_in == n_in)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pilot: Self = read_json(path)?;
        if pilot.costs.len() != pilot.sigma_bar.len() || pilot.n_in.len() != pilot.costs.len() {
            return Err(Error::Config(format!(
                "{}: costs, n_in and sigma_bar disagree on the number of models",
                path.display()
            )));
        }
        pilot.covariance()?;
        Ok(pilot)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Evaluates utility models on a fixed pilot batch and caches the values
/// per inner-loop size, so the covariance at any combination of sizes is
/// available without re-evaluation.
///
/// Each design gets its own pilot batch from `rng.derive(k)`, shared by all
/// models. Inner draws are generated at the largest requested size and
/// truncated, so a smaller size always sees a prefix of the same draws.
pub struct PilotSampler<'a> {
    specs: &'a [UtilityModelSpec],
    problem: &'a Problem,
    designs: &'a [Design],
    n_pilot: usize,
    rng: RngStream,
    outer: Vec<OuterDraws>,
    /// per model: inner size → centered values (designs × n_pilot)
    cache: Vec<BTreeMap<usize, Array2<f64>>>,
}

impl<'a> PilotSampler<'a> {
    pub fn new(
        specs: &'a [UtilityModelSpec],
        problem: &'a Problem,
        designs: &'a [Design],
        n_pilot: usize,
        rng: &RngStream,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidSpec("no utility models".into()));
        }
        if designs.is_empty() {
            return Err(Error::InvalidSpec("no pilot designs".into()));
        }
        if n_pilot < specs.len() + 1 {
            return Err(Error::InvalidSpec(format!(
                "n_pilot = {n_pilot} is too small for {} models; need at least {}",
                specs.len(),
                specs.len() + 1
            )));
        }
        let outer = (0..designs.len())
            .map(|k| OuterDraws::draw(problem, &rng.derive(k as u64).derive(labels::OUTER), n_pilot))
            .collect::<Result<_>>()?;
        Ok(Self {
            specs,
            problem,
            designs,
            n_pilot,
            rng: rng.clone(),
            outer,
            cache: vec![BTreeMap::new(); specs.len()],
        })
    }

    pub fn n_models(&self) -> usize {
        self.specs.len()
    }

    /// Evaluates whatever (model, inner size) pairs are not cached yet.
    /// `sizes[m]` lists the inner sizes wanted for model m.
    pub fn ensure(&mut self, sizes: &[Vec<usize>]) -> Result<()> {
        for (m, wanted) in sizes.iter().enumerate() {
            let mut missing: Vec<usize> = wanted
                .iter()
                .copied()
                .filter(|n| !self.cache[m].contains_key(n))
                .collect();
            missing.sort_unstable();
            missing.dedup();
            if missing.is_empty() {
                continue;
            }
            if missing[0] == 0 {
                return Err(Error::InvalidSpec("inner-loop size must be >= 1".into()));
            }
            let spec = &self.specs[m];
            let mut values: Vec<Array2<f64>> =
                vec![Array2::zeros((self.designs.len(), self.n_pilot)); missing.len()];
            for (k, design) in self.designs.iter().enumerate() {
                let stream = self.rng.derive(k as u64);
                let u = eval_utility_grid(
                    spec,
                    self.problem,
                    std::slice::from_ref(design),
                    &self.outer[k],
                    0..self.n_pilot,
                    &spec.inner_stream(&stream),
                    &missing,
                )?;
                for (dst, src) in values.iter_mut().zip(&u) {
                    let row = src.row(0);
                    let mean = crate::stats::mean(&row.to_vec());
                    dst.row_mut(k).assign(&row.mapv(|v| v - mean));
                }
            }
            for (n, v) in missing.into_iter().zip(values) {
                self.cache[m].insert(n, v);
            }
        }
        Ok(())
    }

    /// Per-design pilot covariances at inner sizes `n_in` (one per model).
    pub fn per_design(&self, n_in: &[usize]) -> Result<Vec<Array2<f64>>> {
        let rows: Vec<&Array2<f64>> = n_in
            .iter()
            .enumerate()
            .map(|(m, n)| {
                self.cache[m].get(n).ok_or_else(|| {
                    Error::MissingEvaluations(format!("pilot values of model {m} at N_in = {n}"))
                })
            })
            .collect::<Result<_>>()?;
        let k = rows.len();
        let denom = (self.n_pilot - 1) as f64;
        Ok((0..self.designs.len())
            .map(|d| {
                let mut cov = Array2::zeros((k, k));
                for a in 0..k {
                    for b in a..k {
                        let (x, y) = (rows[a].row(d), rows[b].row(d));
                        let v = crate::stats::sum(x.iter().zip(y.iter()).map(|(x, y)| x * y)) / denom;
                        cov[[a, b]] = v;
                        cov[[b, a]] = v;
                    }
                }
                cov
            })
            .collect())
    }

    /// Design-averaged covariance Σ̄ at inner sizes `n_in`.
    pub fn sigma_bar(&self, n_in: &[usize]) -> Result<Array2<f64>> {
        let per = self.per_design(n_in)?;
        Ok(average(&per))
    }

    /// Costs of the utility models at inner sizes `n_in`.
    pub fn costs(&self, n_in: &[usize]) -> Vec<f64> {
        self.specs
            .iter()
            .zip(n_in)
            .map(|(s, &n)| s.with_n_in(n).cost())
            .collect()
    }

    pub fn candidate(&self, n_in: &[usize]) -> Result<PilotCandidate> {
        Ok(PilotCandidate {
            n_in: n_in.to_vec(),
            sigma_bar: to_rows(&self.sigma_bar(n_in)?),
            costs: self.costs(n_in),
        })
    }
}

fn average(mats: &[Array2<f64>]) -> Array2<f64> {
    let mut sum = mats[0].clone();
    for m in &mats[1..] {
        sum += m;
    }
    sum / mats.len() as f64
}

/// Pilot phase at the inner sizes stored in `specs`: per-design sample
/// covariances on `n_pilot` shared samples, their design average Σ̄, and the
/// utility-model costs.
pub fn run_pilot(
    specs: &[UtilityModelSpec],
    problem: &Problem,
    designs: &[Design],
    n_pilot: usize,
    rng: &RngStream,
) -> Result<PilotResult> {
    let mut sampler = PilotSampler::new(specs, problem, designs, n_pilot, rng)?;
    pilot_result(&mut sampler)
}

fn pilot_result(sampler: &mut PilotSampler<'_>) -> Result<PilotResult> {
    let n_in: Vec<usize> = sampler.specs.iter().map(|s| s.n_in).collect();
    sampler.ensure(&n_in.iter().map(|&n| vec![n]).collect::<Vec<_>>())?;
    let per = sampler.per_design(&n_in)?;
    let degenerate_designs: Vec<usize> = per
        .iter()
        .enumerate()
        .filter(|(_, c)| c.diag().iter().any(|&v| v <= 0.0))
        .map(|(k, _)| k)
        .collect();
    for &k in &degenerate_designs {
        log::warn!(
            "pilot: a utility model has zero variance at design {:?}",
            sampler.designs[k]
        );
    }
    Ok(PilotResult {
        designs: sampler.designs.to_vec(),
        sigma_bar: to_rows(&average(&per)),
        sigma_per_design: per.iter().map(to_rows).collect(),
        costs: sampler.costs(&n_in),
        n_pilot: sampler.n_pilot,
        n_in,
        degenerate_designs,
        candidates: Vec::new(),
    })
}

/// Pilot phase plus the pilot evaluations the inner-size search needs; the
/// visited candidates are stored in [`PilotResult::candidates`] so the
/// design step can run without the models.
pub fn run_pilot_with_search(
    specs: &[UtilityModelSpec],
    problem: &Problem,
    designs: &[Design],
    n_pilot: usize,
    rng: &RngStream,
    budget: &BudgetSpec,
    search: &InnerSearch,
    families: &[Family],
) -> Result<PilotResult> {
    let mut sampler = PilotSampler::new(specs, problem, designs, n_pilot, rng)?;
    let mut result = pilot_result(&mut sampler)?;
    let n0 = budget.n_in_0;
    let mut visited: Vec<PilotCandidate> = Vec::new();
    let mut evaluate = |cands: &[Vec<usize>]| -> Result<Vec<(CovarianceEstimate, Vec<f64>)>> {
        let mut sizes = vec![vec![n0]];
        for m in 1..sampler.n_models() {
            sizes.push(cands.iter().map(|c| c[m - 1]).collect());
        }
        sampler.ensure(&sizes)?;
        cands
            .iter()
            .map(|c| {
                let n_in: Vec<usize> = std::iter::once(n0).chain(c.iter().copied()).collect();
                let cand = sampler.candidate(&n_in)?;
                let cov = CovarianceEstimate::new(from_rows(&cand.sigma_bar)?, n_pilot)?;
                let costs = cand.costs.clone();
                visited.push(cand);
                Ok((cov, costs))
            })
            .collect()
    };
    match search.strategy {
        SearchStrategy::Grid => {
            evaluate(&search.lattice()?)?;
        }
        SearchStrategy::CoarseToFine => {
            optimize_inner_sizes(&mut evaluate, budget, search, families)?;
        }
    }
    result.candidates = visited;
    Ok(result)
}

/// Total cost Σₘ wₘ·(distinct samples model m evaluates).
pub fn estimator_cost(w: &[f64], a: &AllocationMatrix) -> f64 {
    w.iter()
        .enumerate()
        .map(|(m, w)| w * a.model_samples(m) as f64)
        .sum()
}

/// Budget and the fixed high-fidelity inner-loop size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub w_budget: f64,
    pub n_in_0: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    /// Enumerate a lattice of `points` values per dimension.
    Grid,
    /// Repeatedly lay a lattice over a shrinking box around the incumbent.
    CoarseToFine,
}

/// Search box for the low-fidelity inner-loop sizes N_in,1..M.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerSearch {
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
    pub points: usize,
    pub strategy: SearchStrategy,
}

impl InnerSearch {
    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::InvalidSpec(
                "inner-size search box needs matching lower/upper bounds".into(),
            ));
        }
        if self.lower.iter().zip(&self.upper).any(|(&l, &u)| l == 0 || l > u) {
            return Err(Error::InvalidSpec(format!(
                "inner-size search box must satisfy 1 <= lower <= upper, got {:?}..{:?}",
                self.lower, self.upper
            )));
        }
        if self.points == 0 {
            return Err(Error::InvalidSpec("inner-size search needs points >= 1".into()));
        }
        Ok(())
    }

    /// Values per dimension: `points` evenly spaced between the bounds,
    /// rounded to integers.
    pub fn axes(&self) -> Vec<Vec<usize>> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| axis(l, u, self.points))
            .collect()
    }

    /// Cartesian product of [`InnerSearch::axes`], first dimension slowest.
    pub fn lattice(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        Ok(cartesian(&self.axes()))
    }
}

fn axis(lo: usize, hi: usize, points: usize) -> Vec<usize> {
    if points == 1 || lo == hi {
        return vec![(lo + hi) / 2];
    }
    let step = (hi - lo) as f64 / (points - 1) as f64;
    let mut v: Vec<usize> = (0..points)
        .map(|i| (lo as f64 + step * i as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

fn cartesian(axes: &[Vec<usize>]) -> Vec<Vec<usize>> {
    axes.iter().fold(vec![vec![]], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// A budget-feasible estimator: allocation, weights and inner-loop sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorDesign {
    pub family: Family,
    /// indices (into the configured model list) of the models used; the
    /// first is always 0
    pub models: Vec<usize>,
    pub groups: AllocationMatrix,
    pub alpha: Vec<f64>,
    /// inner-loop size of each used model
    pub n_in: Vec<usize>,
    /// cost of one evaluation of each used model
    pub costs: Vec<f64>,
    pub projected_variance: f64,
    pub cost: f64,
    pub budget: f64,
    /// projected variance of plain Monte Carlo on u₀ at the same budget
    pub mc_variance: f64,
}

impl EstimatorDesign {
    /// Projected variance reduction relative to plain Monte Carlo.
    pub fn projected_ratio(&self) -> f64 {
        self.mc_variance / self.projected_variance
    }

    /// Variance of this estimator under covariance `c` of the used models.
    pub fn variance_under(&self, c: &CovarianceEstimate) -> Result<f64> {
        acv::estimator_variance_with_weights(c, &self.groups, &self.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        self.groups.validate()?;
        let m = self.groups.n_low();
        if self.models.len() != m + 1
            || self.alpha.len() != m
            || self.n_in.len() != m + 1
            || self.costs.len() != m + 1
        {
            return Err(Error::Config(
                "design has inconsistent numbers of models, weights and inner sizes".into(),
            ));
        }
        if self.models.first() != Some(&0) {
            return Err(Error::Config("design must use model 0 first".into()));
        }
        if self.n_in.contains(&0) {
            return Err(Error::Config("design has a zero inner-loop size".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d: Self = read_json(path)?;
        d.validate()?;
        Ok(d)
    }
}

/// Relative tolerance under which two projected variances count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Finds the family, model subset and integer allocation with the smallest
/// projected variance under `w_budget`.
///
/// Group-size ratios are optimized continuously (the variance-cost product
/// is scale-free), scaled to the budget, rounded down and, if still over
/// budget, trimmed one sample at a time from the largest group. With four
/// or fewer low-fidelity models every subset is tried. Ties go to the lower
/// cost, then to fewer models. Plain MC on u₀ is always a candidate.
pub fn optimize_allocation(
    c: &CovarianceEstimate,
    w: &[f64],
    n_in: &[usize],
    w_budget: f64,
    families: &[Family],
) -> Result<EstimatorDesign> {
    let dim = c.dim();
    if w.len() != dim || n_in.len() != dim {
        return Err(Error::InvalidSpec(format!(
            "{} costs and {} inner sizes for {dim} models",
            w.len(),
            n_in.len()
        )));
    }
    if w.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidSpec(format!("model costs must be positive, got {w:?}")));
    }
    if !(w_budget.is_finite() && w_budget >= w[0]) {
        return Err(Error::InfeasibleBudget {
            budget: w_budget,
            cost: w[0],
        });
    }
    let n_mc = (w_budget / w[0]).floor();
    let mc_variance = c.matrix[0][0] / n_mc;
    let mc = EstimatorDesign {
        family: Family::Mc,
        models: vec![0],
        groups: AllocationMatrix::monte_carlo(n_mc as usize)?,
        alpha: vec![],
        n_in: vec![n_in[0]],
        costs: vec![w[0]],
        projected_variance: mc_variance,
        cost: w[0] * n_mc,
        budget: w_budget,
        mc_variance,
    };
    let low: Vec<usize> = (1..dim).collect();
    let subsets: Vec<Vec<usize>> = if low.len() <= 4 {
        (1u32..1 << low.len())
            .map(|mask| {
                low.iter()
                    .enumerate()
                    .filter(|(i, _)| mask >> i & 1 == 1)
                    .map(|(_, &m)| m)
                    .collect()
            })
            .collect()
    } else {
        vec![low]
    };
    let mut best = mc;
    for &family in families {
        if family == Family::Mc {
            continue;
        }
        for subset in &subsets {
            let models: Vec<usize> = std::iter::once(0).chain(subset.iter().copied()).collect();
            let cs = c.subset(&models);
            let ws: Vec<f64> = models.iter().map(|&m| w[m]).collect();
            let Some(design) = optimize_family(family, &cs, &ws, w_budget) else {
                continue;
            };
            let (groups, alpha, variance) = design;
            let candidate = EstimatorDesign {
                family,
                cost: estimator_cost(&ws, &groups),
                n_in: models.iter().map(|&m| n_in[m]).collect(),
                costs: ws,
                models,
                groups,
                alpha,
                projected_variance: variance,
                budget: w_budget,
                mc_variance,
            };
            if better(&candidate, &best) {
                best = candidate;
            }
        }
    }
    Ok(best)
}

fn better(a: &EstimatorDesign, b: &EstimatorDesign) -> bool {
    let (va, vb) = (a.projected_variance, b.projected_variance);
    if (va - vb).abs() > TIE_TOLERANCE * va.abs().max(vb.abs()) {
        return va < vb;
    }
    if a.cost != b.cost {
        return a.cost < b.cost;
    }
    a.models.len() < b.models.len()
}

/// Counts (at N₀ = 1) of `family` from unconstrained parameters.
fn relaxed_counts(family: Family, x: &[f64]) -> Vec<f64> {
    let mut n = vec![1.0];
    for (k, &x) in x.iter().enumerate() {
        let v = match family {
            Family::Mfmc => n[k] * (1.0 + x.exp()),
            Family::Mlmc => x.exp(),
            _ => 1.0 + x.exp(),
        };
        n.push(v);
    }
    n
}

fn structure_of(family: Family, n: &[f64]) -> Option<Structure> {
    Some(family_layout(family, n).ok()?.structure())
}

fn structure_variance(family: Family, s: &Structure, c: &nalgebra::DMatrix<f64>) -> Option<f64> {
    let (dd, d0, var0) = s.components(c).ok()?;
    let v = if family.fixed_weights() {
        let a = nalgebra::DVector::from_element(d0.len(), -1.0);
        var0 + 2.0 * a.dot(&d0) + (a.transpose() * &dd * &a)[(0, 0)]
    } else {
        let alpha = acv::solve_weights(&dd, &d0, false).ok()?;
        var0 + d0.dot(&alpha)
    };
    (v.is_finite() && v > 0.0).then_some(v)
}

fn structure_cost(s: &Structure, w: &[f64]) -> f64 {
    w.iter()
        .enumerate()
        .map(|(m, w)| w * s.model_samples(m))
        .sum()
}

/// Variance × cost at N₀ = 1, normalized by the plain-MC value.
struct RelaxedObjective<'a> {
    family: Family,
    c: nalgebra::DMatrix<f64>,
    w: &'a [f64],
    scale: f64,
}

/// Value returned for parameters outside the feasible region; finite so the
/// simplex statistics stay finite.
const PENALTY: f64 = 1e50;

impl CostFunction for RelaxedObjective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        if x.iter().any(|v| !v.is_finite() || v.abs() > 40.0) {
            return Ok(PENALTY);
        }
        let n = relaxed_counts(self.family, x);
        let value = structure_of(self.family, &n).and_then(|s| {
            let v = structure_variance(self.family, &s, &self.c)?;
            Some(v * structure_cost(&s, self.w) / self.scale)
        });
        Ok(value.unwrap_or(PENALTY))
    }
}

/// Best integer allocation of one family over the models of `c`, as
/// (allocation, weights, projected variance).
fn optimize_family(
    family: Family,
    c: &CovarianceEstimate,
    w: &[f64],
    w_budget: f64,
) -> Option<(AllocationMatrix, Vec<f64>, f64)> {
    let k = c.dim() - 1;
    let cm = c.to_dmatrix();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in [-1.0, 1.0, 3.0, 5.0] {
        let x0 = vec![start; k];
        let mut simplex = vec![x0.clone()];
        for i in 0..k {
            let mut v = x0.clone();
            v[i] += 1.0;
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex).with_sd_tolerance(1e-13).ok()?;
        let objective = RelaxedObjective {
            family,
            c: cm.clone(),
            w,
            scale: c.matrix[0][0] * w[0],
        };
        let Ok(res) = Executor::new(objective, solver)
            .configure(|s| s.max_iters(2000))
            .run()
        else {
            continue;
        };
        let (Some(x), cost) = (res.state.best_param, res.state.best_cost) else {
            continue;
        };
        if cost < PENALTY && best.as_ref().is_none_or(|(_, b)| cost < *b) {
            best = Some((x, cost));
        }
    }
    let (x, _) = best?;
    let n = relaxed_counts(family, &x);
    let unit = structure_of(family, &n)?;
    let n0 = w_budget / structure_cost(&unit, w);
    let mut counts: Vec<usize> = n.iter().map(|v| (v * n0).floor() as usize).collect();
    if counts[0] == 0 {
        return None;
    }
    // rounding can collapse counts that must stay strictly ordered
    match family {
        Family::Mfmc => {
            for i in 1..counts.len() {
                counts[i] = counts[i].max(counts[i - 1] + 1);
            }
        }
        Family::Acvmf | Family::Acvis => {
            for i in 1..counts.len() {
                counts[i] = counts[i].max(counts[0] + 1);
            }
        }
        _ => {
            for v in counts.iter_mut() {
                *v = (*v).max(1);
            }
        }
    }
    let n: Vec<f64> = counts.iter().map(|&v| v as f64).collect();
    let mut groups = AllocationMatrix::from_layout(&family_layout(family, &n).ok()?).ok()?;
    while estimator_cost(w, &groups) > w_budget {
        groups = trim_largest_group(&groups)?;
    }
    let alpha: Vec<f64> = if family.fixed_weights() {
        vec![-1.0; k]
    } else {
        let comp = acv::component_covariances(c, &groups).ok()?;
        acv::optimal_weights(&comp.cov_dd, &comp.cov_d0).ok()?.iter().copied().collect()
    };
    let variance = acv::estimator_variance_with_weights(c, &groups, &alpha).ok()?;
    Some((groups, alpha, variance))
}

fn trim_largest_group(a: &AllocationMatrix) -> Option<AllocationMatrix> {
    let mut groups = a.groups().to_vec();
    let largest = (0..groups.len()).max_by_key(|&g| (groups[g].size, std::cmp::Reverse(g)))?;
    if groups[largest].size <= 1 {
        return None;
    }
    groups[largest].size -= 1;
    AllocationMatrix::new(groups).ok()
}

/// Result of the inner-loop size search.
#[derive(Clone, Debug)]
pub struct InnerSizeResult {
    /// inner sizes of all models, N_in,0 first
    pub n_in: Vec<usize>,
    pub design: EstimatorDesign,
    /// (low-fidelity inner sizes, projected variance) of every evaluated
    /// candidate, in evaluation order; infeasible candidates are omitted
    pub evaluated: Vec<(Vec<usize>, f64)>,
}

/// Minimizes projected variance over the low-fidelity inner sizes.
///
/// `evaluate` maps a batch of candidate vectors N_in,1..M to the pilot
/// covariance Σ̄ and costs at [N_in,0, candidate]. The grid strategy makes
/// one call with the whole lattice; coarse-to-fine makes one call per level.
/// The smallest variance wins; ties go to the earliest candidate.
pub fn optimize_inner_sizes(
    evaluate: &mut dyn FnMut(&[Vec<usize>]) -> Result<Vec<(CovarianceEstimate, Vec<f64>)>>,
    budget: &BudgetSpec,
    search: &InnerSearch,
    families: &[Family],
) -> Result<InnerSizeResult> {
    search.validate()?;
    let n0 = budget.n_in_0;
    let mut evaluated: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut seen: HashMap<Vec<usize>, Option<EstimatorDesign>> = HashMap::new();
    let mut best: Option<(Vec<usize>, EstimatorDesign)> = None;
    let mut run = |cands: Vec<Vec<usize>>,
                   evaluated: &mut Vec<(Vec<usize>, f64)>,
                   best: &mut Option<(Vec<usize>, EstimatorDesign)>|
     -> Result<()> {
        let fresh: Vec<Vec<usize>> = cands.into_iter().filter(|c| !seen.contains_key(c)).collect();
        if fresh.is_empty() {
            return Ok(());
        }
        let inputs = evaluate(&fresh)?;
        if inputs.len() != fresh.len() {
            return Err(Error::MissingEvaluations("pilot data for a candidate".into()));
        }
        let designs: Vec<Result<EstimatorDesign>> = fresh
            .par_iter()
            .zip(inputs.par_iter())
            .map(|(cand, (c, w))| {
                let n_in: Vec<usize> = std::iter::once(n0).chain(cand.iter().copied()).collect();
                optimize_allocation(c, w, &n_in, budget.w_budget, families)
            })
            .collect();
        for (cand, design) in fresh.into_iter().zip(designs) {
            let design = match design {
                Ok(d) => Some(d),
                Err(Error::InfeasibleBudget { .. } | Error::SingularCovariance) => None,
                Err(e) => return Err(e),
            };
            if let Some(d) = &design {
                evaluated.push((cand.clone(), d.projected_variance));
                if best
                    .as_ref()
                    .is_none_or(|(_, b)| d.projected_variance < b.projected_variance)
                {
                    *best = Some((cand.clone(), d.clone()));
                }
            }
            seen.insert(cand, design);
        }
        Ok(())
    };
    match search.strategy {
        SearchStrategy::Grid => run(search.lattice()?, &mut evaluated, &mut best)?,
        SearchStrategy::CoarseToFine => {
            let mut lo = search.lower.clone();
            let mut hi = search.upper.clone();
            loop {
                let axes: Vec<Vec<usize>> = lo
                    .iter()
                    .zip(&hi)
                    .map(|(&l, &h)| axis(l, h, search.points))
                    .collect();
                run(cartesian(&axes), &mut evaluated, &mut best)?;
                let Some((incumbent, _)) = &best else { break };
                let steps: Vec<usize> = axes
                    .iter()
                    .map(|a| a.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0))
                    .collect();
                if steps.iter().all(|&s| s <= 1) {
                    break;
                }
                let (new_lo, new_hi): (Vec<usize>, Vec<usize>) = incumbent
                    .iter()
                    .zip(&steps)
                    .enumerate()
                    .map(|(d, (&x, &s))| {
                        let half = (s / 2).max(1);
                        (
                            x.saturating_sub(half).max(search.lower[d]),
                            (x + half).min(search.upper[d]),
                        )
                    })
                    .unzip();
                if new_lo == lo && new_hi == hi {
                    break;
                }
                lo = new_lo;
                hi = new_hi;
            }
        }
    }
    let (cand, design) = best.ok_or_else(|| {
        Error::EmptyFeasibleSet("no inner-size candidate admits a feasible allocation".into())
    })?;
    Ok(InnerSizeResult {
        n_in: std::iter::once(n0).chain(cand).collect(),
        design,
        evaluated,
    })
}

/// Estimator design from pilot data: at the pilot's own inner sizes, or,
/// with `search`, the best of the candidates recorded in the pilot.
pub fn design_from_pilot(
    pilot: &PilotResult,
    budget: &BudgetSpec,
    search: Option<&InnerSearch>,
    families: &[Family],
) -> Result<EstimatorDesign> {
    let Some(search) = search else {
        return optimize_allocation(
            &pilot.covariance()?,
            &pilot.costs,
            &pilot.n_in,
            budget.w_budget,
            families,
        );
    };
    let n0 = budget.n_in_0;
    let mut lookup = |cands: &[Vec<usize>]| -> Result<Vec<(CovarianceEstimate, Vec<f64>)>> {
        cands
            .iter()
            .map(|c| {
                let n_in: Vec<usize> = std::iter::once(n0).chain(c.iter().copied()).collect();
                let cand = pilot.candidate(&n_in).ok_or_else(|| {
                    Error::Config(format!(
                        "pilot file has no data for N_in = {n_in:?}; rerun the pilot with this search box"
                    ))
                })?;
                Ok((
                    CovarianceEstimate::new(from_rows(&cand.sigma_bar)?, pilot.n_pilot)?,
                    cand.costs.clone(),
                ))
            })
            .collect()
    };
    Ok(optimize_inner_sizes(&mut lookup, budget, search, families)?.design)
}
