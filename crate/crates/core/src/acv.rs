//! Approximate control variates: sample allocations, covariance of the
//! estimator components, optimal weights and estimator assembly.
//!
//! An estimator over models 0..=M is Q̂₀(z₀) + Σₘ αₘ (Q̂ₘ(z*ₘ) − Q̂ₘ(zₘ)),
//! where every sample set is a union of disjoint sample groups.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One block of samples and the sets it belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub size: usize,
    pub z0: bool,
    /// membership in z*ₘ for m = 1..=M
    pub zstar: Vec<bool>,
    /// membership in zₘ for m = 1..=M
    pub z: Vec<bool>,
}

/// Group-based sample allocation. Groups occupy consecutive sample index
/// ranges in the order listed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AllocationMatrix {
    groups: Vec<SampleGroup>,
}

/// Set identifiers: 0 is z₀, 2m−1 is z*ₘ and 2m is zₘ.
fn set_bits(group: &SampleGroup) -> u64 {
    let mut bits = group.z0 as u64;
    for (m, (s, z)) in group.zstar.iter().zip(&group.z).enumerate() {
        bits |= (*s as u64) << (2 * m + 1);
        bits |= (*z as u64) << (2 * m + 2);
    }
    bits
}

impl AllocationMatrix {
    /// Builds and validates an allocation.
    pub fn new(groups: Vec<SampleGroup>) -> Result<Self> {
        let a = Self { groups };
        a.validate()?;
        Ok(a)
    }

    /// Plain Monte Carlo on `n` high-fidelity samples.
    pub fn monte_carlo(n: usize) -> Result<Self> {
        Self::new(vec![SampleGroup {
            size: n,
            z0: true,
            zstar: vec![],
            z: vec![],
        }])
    }

    /// Builds an allocation whose sets are unions of sample index ranges.
    /// Groups are the maximal runs of indices with equal membership; empty
    /// runs and indices in no set are dropped.
    pub fn from_ranges(
        z0: &[Range<usize>],
        zstar: &[Vec<Range<usize>>],
        z: &[Vec<Range<usize>>],
    ) -> Result<Self> {
        if zstar.len() != z.len() {
            return Err(Error::InvalidAllocation("z* and z lists differ in length".into()));
        }
        let spans = |r: &[Range<usize>]| r.iter().map(|r| (r.start as f64, r.end as f64)).collect();
        Self::from_layout(&Layout {
            z0: spans(z0),
            zstar: zstar.iter().map(|r| spans(r)).collect(),
            z: z.iter().map(|r| spans(r)).collect(),
        })
    }

    pub(crate) fn from_layout(layout: &Layout) -> Result<Self> {
        let m = layout.z.len();
        let groups = layout
            .runs()
            .into_iter()
            .map(|(bits, len)| SampleGroup {
                size: len.round() as usize,
                z0: bits & 1 == 1,
                zstar: (0..m).map(|k| bits >> (2 * k + 1) & 1 == 1).collect(),
                z: (0..m).map(|k| bits >> (2 * k + 2) & 1 == 1).collect(),
            })
            .collect();
        Self::new(groups)
    }

    pub fn groups(&self) -> &[SampleGroup] {
        &self.groups
    }

    /// Number of low-fidelity models M.
    pub fn n_low(&self) -> usize {
        self.groups.first().map_or(0, |g| g.z.len())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_low();
        if m > 31 {
            return Err(Error::InvalidAllocation("at most 31 low-fidelity models".into()));
        }
        if self
            .groups
            .iter()
            .any(|g| g.zstar.len() != m || g.z.len() != m)
        {
            return Err(Error::InvalidAllocation(
                "groups disagree on the number of models".into(),
            ));
        }
        if self.z0_size() == 0 {
            return Err(Error::InvalidAllocation("z0 is empty".into()));
        }
        for k in 1..=m {
            if self.zstar_size(k) == 0 || self.z_size(k) == 0 {
                return Err(Error::InvalidAllocation(format!("z*_{k} or z_{k} is empty")));
            }
            let differ = self
                .groups
                .iter()
                .any(|g| g.size > 0 && g.zstar[k - 1] != g.z[k - 1]);
            if !differ {
                return Err(Error::InvalidAllocation(format!(
                    "z*_{k} and z_{k} are identical, so model {k} contributes nothing"
                )));
            }
        }
        Ok(())
    }

    fn size_where(&self, pred: impl Fn(&SampleGroup) -> bool) -> usize {
        self.groups.iter().filter(|g| pred(g)).map(|g| g.size).sum()
    }

    pub fn z0_size(&self) -> usize {
        self.size_where(|g| g.z0)
    }

    pub fn zstar_size(&self, m: usize) -> usize {
        self.size_where(|g| g.zstar[m - 1])
    }

    pub fn z_size(&self, m: usize) -> usize {
        self.size_where(|g| g.z[m - 1])
    }

    /// Whether model `m` must be evaluated on group `g`.
    pub fn evaluates(&self, m: usize, g: usize) -> bool {
        let group = &self.groups[g];
        if m == 0 {
            group.z0
        } else {
            group.zstar[m - 1] || group.z[m - 1]
        }
    }

    /// Distinct samples model `m` evaluates.
    pub fn model_samples(&self, m: usize) -> usize {
        (0..self.groups.len())
            .filter(|&g| self.evaluates(m, g))
            .map(|g| self.groups[g].size)
            .sum()
    }

    /// Total distinct samples across all groups.
    pub fn total_samples(&self) -> usize {
        self.groups.iter().map(|g| g.size).sum()
    }

    /// Sample index range of each group.
    pub fn group_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.groups
            .iter()
            .map(|g| {
                let r = start..start + g.size;
                start += g.size;
                r
            })
            .collect()
    }

    fn structure(&self) -> Structure {
        Structure {
            n_low: self.n_low(),
            bits: self.groups.iter().map(set_bits).collect(),
            sizes: self.groups.iter().map(|g| g.size as f64).collect(),
        }
    }
}

/// Sample sets as unions of half-open spans on a (possibly continuous)
/// sample axis.
#[derive(Clone, Debug, Default)]
pub(crate) struct Layout {
    pub z0: Vec<(f64, f64)>,
    pub zstar: Vec<Vec<(f64, f64)>>,
    pub z: Vec<Vec<(f64, f64)>>,
}

impl Layout {
    /// Maximal runs of equal set membership as (set bits, length); runs
    /// belonging to no set are dropped.
    fn runs(&self) -> Vec<(u64, f64)> {
        let all = || {
            self.z0
                .iter()
                .chain(self.zstar.iter().flatten())
                .chain(self.z.iter().flatten())
        };
        let mut cuts: Vec<f64> = all().flat_map(|&(s, e)| [s, e]).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let inside = |spans: &[(f64, f64)], x: f64| spans.iter().any(|&(s, e)| s <= x && x < e);
        let mut runs: Vec<(u64, f64)> = Vec::new();
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let mut bits = inside(&self.z0, lo) as u64;
            for (k, (s, z)) in self.zstar.iter().zip(&self.z).enumerate() {
                bits |= (inside(s, lo) as u64) << (2 * k + 1);
                bits |= (inside(z, lo) as u64) << (2 * k + 2);
            }
            if bits == 0 || hi <= lo {
                continue;
            }
            match runs.last_mut() {
                Some(last) if last.0 == bits => last.1 += hi - lo,
                _ => runs.push((bits, hi - lo)),
            }
        }
        runs
    }

    pub fn structure(&self) -> Structure {
        let (bits, sizes) = self.runs().into_iter().unzip();
        Structure {
            n_low: self.z.len(),
            bits,
            sizes,
        }
    }
}

/// Set memberships with real-valued group sizes; used both for integer
/// allocations and for the continuous relaxation during optimization.
#[derive(Clone, Debug)]
pub(crate) struct Structure {
    pub n_low: usize,
    pub bits: Vec<u64>,
    pub sizes: Vec<f64>,
}

impl Structure {
    /// |A ∩ B| for set ids a, b.
    fn overlap(&self, a: usize, b: usize) -> f64 {
        let mask = (1u64 << a) | (1u64 << b);
        self.bits
            .iter()
            .zip(&self.sizes)
            .filter(|(bits, _)| *bits & mask == mask)
            .map(|(_, s)| s)
            .sum()
    }

    /// Distinct samples model m evaluates.
    pub fn model_samples(&self, m: usize) -> f64 {
        let mask = if m == 0 { 1 } else { 0b11u64 << (2 * m - 1) };
        self.bits
            .iter()
            .zip(&self.sizes)
            .filter(|(bits, _)| *bits & mask != 0)
            .map(|(_, s)| s)
            .sum()
    }

    /// (Cov[Δ, Δ], Cov[Δ, Q̂₀], Var[Q̂₀]).
    pub fn components(&self, c: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
        let m = self.n_low;
        let k = 2 * m + 1;
        let mut inter = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let v = self.overlap(a, b);
                inter[(a, b)] = v;
                inter[(b, a)] = v;
            }
        }
        for a in 0..k {
            if inter[(a, a)] <= 0.0 {
                return Err(Error::InvalidAllocation(format!("sample set {a} is empty")));
            }
        }
        // Cov[Q̂_i(A), Q̂_j(B)] = C_ij |A∩B| / (|A||B|)
        let f = |a: usize, b: usize| inter[(a, b)] / (inter[(a, a)] * inter[(b, b)]);
        let var0 = c[(0, 0)] * f(0, 0);
        let mut cov_dd = DMatrix::zeros(m, m);
        let mut cov_d0 = DVector::zeros(m);
        for i in 1..=m {
            let (si, zi) = (2 * i - 1, 2 * i);
            cov_d0[i - 1] = c[(i, 0)] * (f(si, 0) - f(zi, 0));
            for j in 1..=m {
                let (sj, zj) = (2 * j - 1, 2 * j);
                cov_dd[(i - 1, j - 1)] = c[(i, j)] * (f(si, sj) - f(si, zj) - f(zi, sj) + f(zi, zj));
            }
        }
        Ok((cov_dd, cov_d0, var0))
    }
}

/// Covariance matrix of the utility models, indexed 0..=M.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub matrix: Vec<Vec<f64>>,
    pub n_samples: usize,
}

impl CovarianceEstimate {
    pub fn new(matrix: Array2<f64>, n_samples: usize) -> Result<Self> {
        let (r, c) = matrix.dim();
        if r != c || r == 0 {
            return Err(Error::InvalidSpec("covariance must be square and nonempty".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance entry"));
        }
        for i in 0..r {
            if matrix[[i, i]] < 0.0 {
                return Err(Error::InvalidSpec("covariance has a negative variance".into()));
            }
            for j in 0..i {
                let (a, b) = (matrix[[i, j]], matrix[[j, i]]);
                if (a - b).abs() > 1e-12 * (a.abs() + b.abs()) {
                    return Err(Error::InvalidSpec("covariance is not symmetric".into()));
                }
            }
        }
        Ok(Self {
            matrix: matrix.rows().into_iter().map(|r| r.to_vec()).collect(),
            n_samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.len()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.matrix[i][j])
    }

    pub fn to_array(&self) -> Array2<f64> {
        let n = self.dim();
        Array2::from_shape_fn((n, n), |(i, j)| self.matrix[i][j])
    }

    /// Covariance restricted to `models` (in that order).
    pub fn subset(&self, models: &[usize]) -> Self {
        Self {
            matrix: models
                .iter()
                .map(|&i| models.iter().map(|&j| self.matrix[i][j]).collect())
                .collect(),
            n_samples: self.n_samples,
        }
    }

    /// Correlation of model `m` with model 0.
    pub fn correlation(&self, a: usize, b: usize) -> f64 {
        self.matrix[a][b] / (self.matrix[a][a] * self.matrix[b][b]).sqrt()
    }
}

/// Components of the variance algebra for allocation `a`.
#[derive(Clone, Debug)]
pub struct ComponentCovariances {
    pub cov_dd: DMatrix<f64>,
    pub cov_d0: DVector<f64>,
    pub var0: f64,
}

/// Analytic Cov[Δ, Δ], Cov[Δ, Q̂₀] and Var[Q̂₀] from the model covariance.
pub fn component_covariances(
    c: &CovarianceEstimate,
    a: &AllocationMatrix,
) -> Result<ComponentCovariances> {
    a.validate()?;
    if c.dim() != a.n_low() + 1 {
        return Err(Error::InvalidAllocation(format!(
            "covariance has {} models, allocation has {}",
            c.dim(),
            a.n_low() + 1
        )));
    }
    let (cov_dd, cov_d0, var0) = a.structure().components(&c.to_dmatrix())?;
    Ok(ComponentCovariances {
        cov_dd,
        cov_d0,
        var0,
    })
}

/// Largest condition number accepted after regularization.
const MAX_CONDITION: f64 = 1e12;

/// α* = −Cov[Δ,Δ]⁻¹ Cov[Δ,Q̂₀].
///
/// A singular Cov[Δ,Δ] gets a ridge of 10⁻¹⁰·trace/M; if it is still worse
/// conditioned than 10¹² the models are treated as redundant and
/// [`Error::SingularCovariance`] is returned.
pub fn optimal_weights(cov_dd: &DMatrix<f64>, cov_d0: &DVector<f64>) -> Result<DVector<f64>> {
    solve_weights(cov_dd, cov_d0, true)
}

pub(crate) fn solve_weights(
    cov_dd: &DMatrix<f64>,
    cov_d0: &DVector<f64>,
    warn: bool,
) -> Result<DVector<f64>> {
    let m = cov_dd.nrows();
    if m == 0 {
        return Ok(DVector::zeros(0));
    }
    if cov_dd.iter().chain(cov_d0.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("control-variate covariance"));
    }
    if let Some(chol) = cov_dd.clone().cholesky() {
        if condition(cov_dd) <= MAX_CONDITION {
            return Ok(-chol.solve(cov_d0));
        }
    }
    let ridge = 1e-10 * cov_dd.trace() / m as f64;
    let mut reg = cov_dd.clone();
    for i in 0..m {
        reg[(i, i)] += ridge;
    }
    if warn {
        log::warn!("covariance of control-variate differences is singular; adding ridge {ridge:e}");
    }
    match reg.clone().cholesky() {
        Some(chol) if condition(&reg) <= MAX_CONDITION => Ok(-chol.solve(cov_d0)),
        _ => Err(Error::SingularCovariance),
    }
}

fn condition(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Var[Q̂₀] − Cov[Δ,Q̂₀]ᵀ Cov[Δ,Δ]⁻¹ Cov[Δ,Q̂₀], the variance at α*.
pub fn estimator_variance(c: &CovarianceEstimate, a: &AllocationMatrix) -> Result<f64> {
    let comp = component_covariances(c, a)?;
    variance_at_optimum(&comp)
}

pub(crate) fn variance_at_optimum(comp: &ComponentCovariances) -> Result<f64> {
    let alpha = optimal_weights(&comp.cov_dd, &comp.cov_d0)?;
    Ok(comp.var0 + comp.cov_d0.dot(&alpha))
}

/// Variance for fixed weights: Var[Q̂₀] + 2αᵀc + αᵀΣα.
pub fn estimator_variance_with_weights(
    c: &CovarianceEstimate,
    a: &AllocationMatrix,
    alpha: &[f64],
) -> Result<f64> {
    let comp = component_covariances(c, a)?;
    variance_with_weights(&comp, alpha)
}

pub(crate) fn variance_with_weights(comp: &ComponentCovariances, alpha: &[f64]) -> Result<f64> {
    if alpha.len() != comp.cov_d0.len() {
        return Err(Error::InvalidAllocation(format!(
            "{} weights for {} control variates",
            alpha.len(),
            comp.cov_d0.len()
        )));
    }
    let a = DVector::from_column_slice(alpha);
    Ok(comp.var0 + 2.0 * a.dot(&comp.cov_d0) + (a.transpose() * &comp.cov_dd * &a)[(0, 0)])
}

/// Per-model, per-group sums of utility values; `None` where a model was
/// not evaluated on a group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSums {
    pub sums: Vec<Vec<Option<f64>>>,
}

impl GroupSums {
    /// Sums from raw values: `values[m][g]` lists model m's u values on
    /// group g (empty if not evaluated).
    pub fn from_values(values: &[Vec<Vec<f64>>], a: &AllocationMatrix) -> Result<Self> {
        let sums = values
            .iter()
            .enumerate()
            .map(|(m, per_group)| {
                per_group
                    .iter()
                    .enumerate()
                    .map(|(g, v)| {
                        if v.is_empty() {
                            return Ok(None);
                        }
                        let size = a.groups.get(g).map_or(0, |g| g.size);
                        if v.len() != size {
                            return Err(Error::MissingEvaluations(format!(
                                "model {m} has {} values on group {g} of size {size}",
                                v.len()
                            )));
                        }
                        Ok(Some(crate::stats::sum(v.iter().copied())))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(Self { sums })
    }
}

/// Û₀(z₀) + Σ αₘ (Ûₘ(z*ₘ) − Ûₘ(zₘ)); each Û is the mean over the union of
/// its groups.
pub fn evaluate_acv(u: &GroupSums, alpha: &[f64], a: &AllocationMatrix) -> Result<f64> {
    let m = a.n_low();
    if alpha.len() != m {
        return Err(Error::InvalidAllocation(format!(
            "{} weights for {m} control variates",
            alpha.len()
        )));
    }
    if u.sums.len() < m + 1 {
        return Err(Error::MissingEvaluations(format!(
            "values for {} models, allocation needs {}",
            u.sums.len(),
            m + 1
        )));
    }
    let mean_over = |model: usize, member: &dyn Fn(&SampleGroup) -> bool| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (g, group) in a.groups.iter().enumerate() {
            if !member(group) || group.size == 0 {
                continue;
            }
            let s = u.sums[model].get(g).copied().flatten().ok_or_else(|| {
                Error::MissingEvaluations(format!("model {model} on group {g}"))
            })?;
            total += s;
            count += group.size;
        }
        Ok(total / count as f64)
    };
    let mut estimate = mean_over(0, &|g| g.z0)?;
    for k in 1..=m {
        if alpha[k - 1] == 0.0 {
            continue;
        }
        let star = mean_over(k, &|g| g.zstar[k - 1])?;
        let plain = mean_over(k, &|g| g.z[k - 1])?;
        estimate += alpha[k - 1] * (star - plain);
    }
    Ok(estimate)
}

/// Estimator families that embed into the group-based allocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "MFMC")]
    Mfmc,
    #[serde(rename = "MLMC")]
    Mlmc,
    #[serde(rename = "ACVMF")]
    Acvmf,
    #[serde(rename = "ACVIS")]
    Acvis,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Mc,
        Family::Mfmc,
        Family::Mlmc,
        Family::Acvmf,
        Family::Acvis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mc => "MC",
            Family::Mfmc => "MFMC",
            Family::Mlmc => "MLMC",
            Family::Acvmf => "ACVMF",
            Family::Acvis => "ACVIS",
        }
    }

    /// Weights are fixed at −1 rather than optimized.
    pub fn fixed_weights(self) -> bool {
        self == Family::Mlmc
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown estimator family {s:?}")))
    }
}

/// Sample-set layout of `family` for per-model sample counts `n[0..=M]`
/// (for MLMC, the per-level group sizes). Counts may be fractional.
pub(crate) fn family_layout(family: Family, n: &[f64]) -> Result<Layout> {
    let m = n.len().saturating_sub(1);
    if n.is_empty() || n[0] <= 0.0 || n.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidAllocation(format!("invalid sample counts {n:?}")));
    }
    let above_n0 = || {
        if n[1..].iter().any(|&v| v <= n[0]) {
            return Err(Error::InvalidAllocation(format!(
                "{family} needs every low-fidelity count above N0, got {n:?}"
            )));
        }
        Ok(())
    };
    let (zstar, z): (Vec<_>, Vec<_>) = match family {
        Family::Mc => {
            if m > 0 {
                return Err(Error::InvalidAllocation("MC uses the high-fidelity model only".into()));
            }
            (vec![], vec![])
        }
        Family::Mfmc => {
            if n.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidAllocation(format!(
                    "MFMC needs strictly increasing sample counts, got {n:?}"
                )));
            }
            (1..=m).map(|k| (vec![(0.0, n[k - 1])], vec![(0.0, n[k])])).unzip()
        }
        Family::Mlmc => {
            if n.iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidAllocation("MLMC level sizes must be positive".into()));
            }
            let offsets: Vec<f64> = n
                .iter()
                .scan(0.0, |acc, &v| {
                    let start = *acc;
                    *acc += v;
                    Some(start)
                })
                .collect();
            let level = |k: usize| vec![(offsets[k], offsets[k] + n[k])];
            (1..=m).map(|k| (level(k - 1), level(k))).unzip()
        }
        Family::Acvmf => {
            above_n0()?;
            (1..=m).map(|k| (vec![(0.0, n[0])], vec![(0.0, n[k])])).unzip()
        }
        Family::Acvis => {
            above_n0()?;
            let mut next = n[0];
            (1..=m)
                .map(|k| {
                    let extra = (next, next + n[k] - n[0]);
                    next = extra.1;
                    (vec![(0.0, n[0])], vec![(0.0, n[0]), extra])
                })
                .unzip()
        }
    };
    Ok(Layout {
        z0: vec![(0.0, n[0])],
        zstar,
        z,
    })
}

/// Allocation of a classical family from sample counts, with the fixed
/// weights (−1 each) for MLMC.
///
/// MFMC takes strictly increasing per-model counts N₀ < N₁ < … and nests
/// z*ₘ = zₘ₋₁ ⊂ zₘ. ACVMF and ACVIS take counts Nₘ > N₀ and share z*ₘ = z₀;
/// ACVIS draws each model's extra samples independently. MLMC takes
/// per-level group sizes and telescopes over disjoint groups.
pub fn special_case_allocation(
    family: Family,
    sizes: &[usize],
) -> Result<(AllocationMatrix, Option<Vec<f64>>)> {
    let n: Vec<f64> = sizes.iter().map(|&v| v as f64).collect();
    let a = AllocationMatrix::from_layout(&family_layout(family, &n)?)?;
    let weights = family.fixed_weights().then(|| vec![-1.0; a.n_low()]);
    Ok((a, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn cov(m: Array2<f64>) -> CovarianceEstimate {
        CovarianceEstimate::new(m, 100).unwrap()
    }

    #[test]
    fn disjoint_sets_give_diagonal_components() {
        let a = AllocationMatrix::from_ranges(
            &[0..10],
            &[vec![10..30], vec![60..100]],
            &[vec![30..60], vec![100..200]],
        )
        .unwrap();
        let c = cov(array![[2.0, 0.9, 0.8], [0.9, 1.5, 0.7], [0.8, 0.7, 1.2]]);
        let comp = component_covariances(&c, &a).unwrap();
        assert_eq!(comp.cov_d0, DVector::zeros(2));
        assert_relative_eq!(comp.cov_dd[(0, 0)], 1.5 * (1.0 / 20.0 + 1.0 / 30.0));
        assert_relative_eq!(comp.cov_dd[(1, 1)], 1.2 * (1.0 / 40.0 + 1.0 / 100.0));
        assert_eq!(comp.cov_dd[(0, 1)], 0.0);
        assert_relative_eq!(comp.var0, 0.2);
    }

    #[test]
    fn full_overlap_with_z0() {
        let (n, r) = (10, 4);
        let a = AllocationMatrix::from_ranges(&[0..n], &[vec![0..n]], &[vec![n..n + r * n]]).unwrap();
        let c = cov(array![[1.0, 0.6], [0.6, 2.0]]);
        let comp = component_covariances(&c, &a).unwrap();
        assert_relative_eq!(comp.cov_d0[0], 0.6 / n as f64);
    }

    #[test]
    fn scalar_weights_and_uncorrelated_models() {
        let dd = DMatrix::from_element(1, 1, 4.0);
        let d0 = DVector::from_element(1, 2.0);
        assert_relative_eq!(optimal_weights(&dd, &d0).unwrap()[0], -0.5);
        let zero = DVector::zeros(1);
        assert_eq!(optimal_weights(&dd, &zero).unwrap()[0], 0.0);
    }

    #[test]
    fn singular_difference_covariance_is_regularized() {
        let dd = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let d0 = DVector::from_row_slice(&[0.5, 0.5]);
        let alpha = optimal_weights(&dd, &d0).unwrap();
        assert!(alpha.iter().all(|a| a.is_finite()));
        // the optimal variance reduction is still achieved
        assert_relative_eq!(d0.dot(&alpha), -0.25, max_relative = 1e-6);
    }

    #[test]
    fn indefinite_difference_covariance_is_rejected() {
        let dd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let d0 = DVector::from_row_slice(&[0.5, 0.5]);
        assert!(matches!(optimal_weights(&dd, &d0), Err(Error::SingularCovariance)));
    }

    #[test]
    fn spd_solve_residual() {
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.0, 2.0, 0.5, 0.7, -0.1, 1.5]);
        let dd = &b * b.transpose() + DMatrix::identity(3, 3) * 0.1;
        let d0 = DVector::from_row_slice(&[0.4, -1.2, 0.9]);
        let alpha = optimal_weights(&dd, &d0).unwrap();
        assert!((&dd * &alpha + &d0).norm() <= 1e-10 * d0.norm());
    }

    #[test]
    fn monte_carlo_variance() {
        let a = AllocationMatrix::monte_carlo(50).unwrap();
        let c = cov(array![[3.0]]);
        assert_relative_eq!(estimator_variance(&c, &a).unwrap(), 3.0 / 50.0);
    }

    #[test]
    fn correlated_model_reduces_variance() {
        let a = AllocationMatrix::from_ranges(&[0..10], &[vec![0..10]], &[vec![10..100]]).unwrap();
        let c = cov(array![[1.0, 1.0], [1.0, 1.0]]);
        let v = estimator_variance(&c, &a).unwrap();
        assert!(v < 1.0 / 10.0);
    }

    #[test]
    fn invalid_allocations() {
        assert!(AllocationMatrix::monte_carlo(0).is_err());
        // identical z* and z
        assert!(AllocationMatrix::from_ranges(&[0..5], &[vec![0..5]], &[vec![0..5]]).is_err());
        assert!(AllocationMatrix::from_ranges(&[0..5], &[vec![]], &[vec![0..5]]).is_err());
    }

    #[test]
    fn mfmc_groups() {
        let (a, w) = special_case_allocation(Family::Mfmc, &[10, 100]).unwrap();
        assert!(w.is_none());
        assert_eq!(
            a.groups(),
            &[
                SampleGroup {
                    size: 10,
                    z0: true,
                    zstar: vec![true],
                    z: vec![true]
                },
                SampleGroup {
                    size: 90,
                    z0: false,
                    zstar: vec![false],
                    z: vec![true]
                },
            ]
        );
        assert!(special_case_allocation(Family::Mfmc, &[10, 10]).is_err());
    }

    #[test]
    fn mlmc_telescopes() {
        let (a, w) = special_case_allocation(Family::Mlmc, &[2, 3]).unwrap();
        assert_eq!(w, Some(vec![-1.0]));
        assert_eq!(a.groups().len(), 2);
        // u0 on group 0, u1 on both groups
        let values = vec![
            vec![vec![1.0, 2.0], vec![]],
            vec![vec![0.5, 1.5], vec![3.0, 4.0, 5.0]],
        ];
        let sums = GroupSums::from_values(&values, &a).unwrap();
        let est = evaluate_acv(&sums, &[-1.0], &a).unwrap();
        assert_relative_eq!(est, 1.5 - (1.0 - 4.0));

        // telescoping variance: Var[u0 − u1]/N0 + Var[u1]/N1
        let c = cov(array![[1.0, 0.8], [0.8, 0.9]]);
        let v = estimator_variance_with_weights(&c, &a, &[-1.0]).unwrap();
        assert_relative_eq!(v, (1.0 + 0.9 - 1.6) / 2.0 + 0.9 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn evaluate_acv_examples() {
        let a = AllocationMatrix::from_ranges(&[0..2], &[vec![0..2]], &[vec![0..4]]).unwrap();
        // groups: [0,2) in z0, z*1, z1; [2,4) in z1
        let u0 = vec![vec![0.3, 0.7], vec![]];
        let planted = vec![u0.clone(), vec![vec![0.3, 0.7], vec![0.1, 0.5]]];
        let sums = GroupSums::from_values(&planted, &a).unwrap();
        assert_relative_eq!(evaluate_acv(&sums, &[0.0], &a).unwrap(), 0.5);
        // α = −1 with u0 ≡ u1 on shared samples gives the low-fidelity mean over z1
        assert_relative_eq!(evaluate_acv(&sums, &[-1.0], &a).unwrap(), (0.3 + 0.7 + 0.1 + 0.5) / 4.0);
        // equal low-fidelity means on z* and z cancel for any α
        let flat = vec![u0, vec![vec![0.2, 0.4], vec![0.2, 0.4]]];
        let sums = GroupSums::from_values(&flat, &a).unwrap();
        assert_relative_eq!(evaluate_acv(&sums, &[3.7], &a).unwrap(), 0.5);

        let missing = vec![vec![vec![0.3, 0.7], vec![]], vec![vec![0.3, 0.7], vec![]]];
        let sums = GroupSums::from_values(&missing, &a).unwrap();
        assert!(matches!(
            evaluate_acv(&sums, &[1.0], &a),
            Err(Error::MissingEvaluations(_))
        ));
    }

    #[test]
    fn acvis_has_independent_extras() {
        let (a, _) = special_case_allocation(Family::Acvis, &[5, 20, 50]).unwrap();
        assert_eq!(a.total_samples(), 5 + 15 + 45);
        assert_eq!(a.model_samples(1), 20);
        assert_eq!(a.model_samples(2), 50);
        let (b, _) = special_case_allocation(Family::Acvmf, &[5, 20, 50]).unwrap();
        assert_eq!(b.total_samples(), 50);
    }

    #[test]
    fn serde_round_trip() {
        let (a, _) = special_case_allocation(Family::Acvis, &[5, 20, 50]).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.starts_with('['));
        let back: AllocationMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
        assert_eq!(serde_json::to_string(&Family::Acvmf).unwrap(), "\"ACVMF\"");
        assert_eq!("mlmc".parse::<Family>().unwrap(), Family::Mlmc);
    }
}
