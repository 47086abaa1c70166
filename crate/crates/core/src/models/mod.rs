//! Forward models g_m and the data-model transforms h_m for additive and
//! scaled noise.

mod tabulated;

pub use tabulated::{load_tabulated_model, write_tabulated_csv, TableManifest, TabulatedModel};

use std::sync::Arc;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structure of the data model y = h(ε; θ, ξ).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseForm {
    /// y = g + ε
    Additive,
    /// y = g ∘ (1 + ε)
    Scaled,
}

impl NoiseForm {
    /// y = h(ε) given the forward output `g`.
    pub fn apply(self, g: &[f64], eps: &[f64], y: &mut [f64]) -> Result<()> {
        match self {
            NoiseForm::Additive => {
                for ((y, g), e) in y.iter_mut().zip(g).zip(eps) {
                    *y = g + e;
                }
            }
            NoiseForm::Scaled => {
                check_invertible(g)?;
                for ((y, g), e) in y.iter_mut().zip(g).zip(eps) {
                    *y = g + g * e;
                }
            }
        }
        Ok(())
    }

    /// ε = h⁻¹(y) given the forward output `g`; returns log|det J⁻¹|.
    pub fn invert(self, g: &[f64], y: &[f64], eps: &mut [f64]) -> Result<f64> {
        match self {
            NoiseForm::Additive => {
                for ((e, g), y) in eps.iter_mut().zip(g).zip(y) {
                    *e = y - g;
                }
                Ok(0.0)
            }
            NoiseForm::Scaled => {
                check_invertible(g)?;
                let mut log_det = 0.0;
                for ((e, g), y) in eps.iter_mut().zip(g).zip(y) {
                    *e = (y - g) / g;
                    log_det -= g.abs().ln();
                }
                Ok(log_det)
            }
        }
    }

    /// log|det J⁻¹| at forward output `g`.
    pub fn log_abs_det_inverse(self, g: &[f64]) -> Result<f64> {
        match self {
            NoiseForm::Additive => Ok(0.0),
            NoiseForm::Scaled => {
                check_invertible(g)?;
                Ok(-g.iter().map(|v| v.abs().ln()).sum::<f64>())
            }
        }
    }
}

#[inline]
fn check_invertible(g: &[f64]) -> Result<()> {
    match g.iter().position(|v| *v == 0.0) {
        Some(component) => Err(Error::NonInvertible { component }),
        None => Ok(()),
    }
}

/// k·θ^p·ξ^q + θ·exp(−|0.2 − ξ|), the one-dimensional nonlinear benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkModel {
    pub coefficient: f64,
    pub theta_power: f64,
    pub design_power: f64,
}

impl BenchmarkModel {
    /// Fidelity 0 is θ³ξ², 1 is 0.5^0.5·θ^2.5·ξ^1.75 and 2 is 0.5·θ²·ξ^1.5
    /// (each plus the shared exponential term).
    pub fn case1(fidelity: usize) -> Option<Self> {
        let (coefficient, theta_power, design_power) = match fidelity {
            0 => (1.0, 3.0, 2.0),
            1 => (0.5f64.sqrt(), 2.5, 1.75),
            2 => (0.5, 2.0, 1.5),
            _ => return None,
        };
        Some(Self {
            coefficient,
            theta_power,
            design_power,
        })
    }

    #[inline]
    fn theta_feature(&self, theta: f64) -> f64 {
        self.coefficient * power(theta, self.theta_power)
    }

    #[inline]
    fn design_features(&self, xi: f64) -> (f64, f64) {
        (power(xi, self.design_power), (-(0.2 - xi).abs()).exp())
    }

    #[inline(always)]
    fn combine(theta_feature: f64, theta: f64, (b, c): (f64, f64)) -> f64 {
        theta_feature * b + theta * c
    }
}

#[inline]
fn power(x: f64, p: f64) -> f64 {
    if p == 2.0 {
        x * x
    } else if p == 3.0 {
        x * x * x
    } else if p == 2.5 {
        x * x * x.sqrt()
    } else if p == 1.0 {
        x
    } else {
        x.powf(p)
    }
}

#[derive(Clone, Debug)]
pub enum ModelKind {
    Benchmark(BenchmarkModel),
    /// g = scale·θ·ξ (scalar parameter, design and output).
    Linear { scale: f64 },
    Tabulated(Arc<TabulatedModel>),
}

/// A deterministic forward model with its identifier and per-evaluation cost.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    id: usize,
    cost: f64,
    kind: ModelKind,
    /// constant added to every output component
    offset: f64,
}

impl ForwardModel {
    pub fn new(id: usize, cost: f64, kind: ModelKind) -> Result<Self> {
        if !(cost.is_finite() && cost > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "model {id}: evaluation cost must be finite and > 0, got {cost}"
            )));
        }
        Ok(Self {
            id,
            cost,
            kind,
            offset: 0.0,
        })
    }

    /// Model `fidelity` of the nonlinear benchmark with its standard cost
    /// (1, 0.1, 0.01).
    pub fn case1(fidelity: usize) -> Self {
        let bench = BenchmarkModel::case1(fidelity).expect("fidelity in 0..=2");
        let cost = [1.0, 0.1, 0.01][fidelity];
        Self::new(fidelity, cost, ModelKind::Benchmark(bench)).expect("positive cost")
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    /// Replaces the stored cost, e.g. with a measured timing.
    pub fn with_cost(self, cost: f64) -> Result<Self> {
        let offset = self.offset;
        Ok(Self {
            offset,
            ..Self::new(self.id, cost, self.kind)?
        })
    }

    /// The same model shifted by a constant: g ↦ g + c.
    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Benchmark(_) | ModelKind::Linear { .. } => 1,
            ModelKind::Tabulated(t) => t.n_y(),
        }
    }

    pub fn param_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Benchmark(_) | ModelKind::Linear { .. } => 1,
            ModelKind::Tabulated(t) => t.n_theta(),
        }
    }

    /// g(θ, ξ).
    pub fn eval(&self, theta: &[f64], design: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_dim()];
        self.eval_into(theta, design, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, theta: &[f64], design: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_inputs(theta, design)?;
        match &self.kind {
            ModelKind::Benchmark(b) => {
                out[0] = BenchmarkModel::combine(
                    b.theta_feature(theta[0]),
                    theta[0],
                    b.design_features(design[0]),
                );
            }
            ModelKind::Linear { scale } => out[0] = scale * theta[0] * design[0],
            ModelKind::Tabulated(t) => out.copy_from_slice(t.lookup(theta, design)?),
        }
        if self.offset != 0.0 {
            out.iter_mut().for_each(|o| *o += self.offset);
        }
        check_output(out)
    }

    /// Evaluates every parameter row at every design. `out` is resized to
    /// `designs × rows × n_y`, design-major. Produces bit-identical values
    /// to calling [`eval_into`](Self::eval_into) per pair.
    pub fn eval_grid(
        &self,
        thetas: ArrayView2<'_, f64>,
        designs: &[Vec<f64>],
        out: &mut Vec<f64>,
    ) -> Result<()> {
        let block = thetas.nrows() * self.output_dim();
        out.clear();
        out.resize(designs.len() * block, 0.0);
        if block == 0 {
            return Ok(());
        }
        let prepared = self.prepare(thetas)?;
        for (design, chunk) in designs.iter().zip(out.chunks_exact_mut(block)) {
            prepared.at_design(design)?.fill(0..thetas.nrows(), chunk)?;
        }
        check_output(out)
    }

    /// Precomputes the parameter-dependent part of g for a set of rows so
    /// that evaluation at many designs is cheap.
    pub fn prepare(&self, thetas: ArrayView2<'_, f64>) -> Result<PreparedRows<'_>> {
        if thetas.ncols() != self.param_dim() {
            return Err(Error::InvalidSpec(format!(
                "model {} expects {} parameters, got {}",
                self.id,
                self.param_dim(),
                thetas.ncols()
            )));
        }
        if thetas.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        let rows = match &self.kind {
            ModelKind::Benchmark(b) => Prepared::Benchmark(
                thetas
                    .column(0)
                    .iter()
                    .map(|&t| (b.theta_feature(t), t))
                    .collect(),
            ),
            ModelKind::Linear { .. } => Prepared::Linear(thetas.column(0).to_vec()),
            ModelKind::Tabulated(t) => Prepared::Table(
                thetas
                    .rows()
                    .into_iter()
                    .map(|row| {
                        let theta = row.to_vec();
                        t.sample_index(&theta).ok_or_else(|| {
                            Error::MissingEntry(format!(
                                "parameter {theta:?} in {}",
                                t.path().display()
                            ))
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let theta_min = thetas
            .column(0)
            .iter()
            .fold(f64::INFINITY, |m, &t| m.min(t));
        Ok(PreparedRows {
            model: self,
            rows,
            theta_min,
        })
    }

    fn check_inputs(&self, theta: &[f64], design: &[f64]) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::InvalidSpec(format!(
                "model {} expects {} parameters, got {}",
                self.id,
                self.param_dim(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        match &self.kind {
            ModelKind::Tabulated(_) => Ok(()),
            _ => check_design(design, 1),
        }
    }
}

/// Parameter rows with their design-independent features precomputed.
pub struct PreparedRows<'a> {
    model: &'a ForwardModel,
    rows: Prepared,
    /// smallest first parameter component over the rows
    theta_min: f64,
}

enum Prepared {
    /// (k·θ^p, θ) per row
    Benchmark(Vec<(f64, f64)>),
    Linear(Vec<f64>),
    /// table sample index per row
    Table(Vec<usize>),
}

impl<'a> PreparedRows<'a> {
    pub fn len(&self) -> usize {
        match &self.rows {
            Prepared::Benchmark(v) => v.len(),
            Prepared::Linear(v) => v.len(),
            Prepared::Table(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes g(θ_j, ξ) for every row j into `out` (row-major, `len × n_y`).
    /// Output finiteness is not checked here.
    pub fn eval_design(&self, design: &[f64], out: &mut [f64]) -> Result<()> {
        self.at_design(design)?.fill(0..self.len(), out)
    }

    /// Binds a design, precomputing its design-dependent features.
    pub fn at_design(&self, design: &[f64]) -> Result<DesignView<'_, 'a>> {
        let kind = match (&self.rows, &self.model.kind) {
            (Prepared::Benchmark(_), ModelKind::Benchmark(b)) => {
                check_design(design, 1)?;
                let (b, c) = b.design_features(design[0]);
                ViewKind::Benchmark { b, c }
            }
            (Prepared::Linear(_), ModelKind::Linear { scale }) => {
                check_design(design, 1)?;
                ViewKind::Linear {
                    scale: *scale,
                    xi: design[0],
                }
            }
            (Prepared::Table(_), ModelKind::Tabulated(t)) => {
                let d = t.design_index(design).ok_or_else(|| {
                    Error::MissingEntry(format!("design {design:?} in {}", t.path().display()))
                })?;
                ViewKind::Table { table: t, design: d }
            }
            _ => unreachable!("prepared rows match their model kind"),
        };
        Ok(DesignView { rows: self, kind })
    }
}

/// Prepared rows bound to one design.
pub struct DesignView<'p, 'a> {
    rows: &'p PreparedRows<'a>,
    kind: ViewKind<'p>,
}

enum ViewKind<'p> {
    Benchmark { b: f64, c: f64 },
    Linear { scale: f64, xi: f64 },
    Table { table: &'p TabulatedModel, design: usize },
}

impl DesignView<'_, '_> {
    /// First output component at row `j`.
    #[inline]
    pub fn value(&self, j: usize) -> f64 {
        let g = match (&self.kind, &self.rows.rows) {
            (ViewKind::Benchmark { b, c }, Prepared::Benchmark(f)) => {
                let (a, t) = f[j];
                BenchmarkModel::combine(a, t, (*b, *c))
            }
            (ViewKind::Linear { scale, xi }, Prepared::Linear(t)) => scale * t[j] * xi,
            (ViewKind::Table { table, design }, Prepared::Table(s)) => {
                table.get(s[j], *design).expect("indices validated at prepare time")[0]
            }
            _ => unreachable!(),
        };
        g + self.rows.model.offset
    }

    /// Writes g for rows `range` into `out` (row-major, `range.len() × n_y`).
    #[inline(always)]
    pub fn fill(&self, range: std::ops::Range<usize>, out: &mut [f64]) -> Result<()> {
        let ny = self.rows.model.output_dim();
        let n = range.len();
        let out = &mut out[..n * ny];
        match (&self.kind, &self.rows.rows) {
            (ViewKind::Benchmark { b, c }, Prepared::Benchmark(f)) => {
                let df = (*b, *c);
                for (o, &(a, t)) in out.iter_mut().zip(&f[range]) {
                    *o = BenchmarkModel::combine(a, t, df);
                }
            }
            (ViewKind::Linear { scale, xi }, Prepared::Linear(t)) => {
                for (o, &t) in out.iter_mut().zip(&t[range]) {
                    *o = scale * t * xi;
                }
            }
            (ViewKind::Table { table, design }, Prepared::Table(s)) => {
                for (o, &s) in out.chunks_exact_mut(ny).zip(&s[range]) {
                    o.copy_from_slice(table.get(s, *design)?);
                }
            }
            _ => unreachable!(),
        }
        let c = self.rows.model.offset;
        if c != 0.0 {
            out.iter_mut().for_each(|o| *o += c);
        }
        Ok(())
    }

    /// Direction in which g moves as the scalar parameter increases, if g is
    /// monotone over the prepared rows at this design: `Some(true)` for
    /// nondecreasing, `Some(false)` for nonincreasing.
    pub fn monotone_in_theta(&self) -> Option<bool> {
        match (&self.kind, &self.rows.model.kind) {
            (ViewKind::Benchmark { b, c }, ModelKind::Benchmark(m)) => {
                let ok = self.rows.theta_min >= 0.0
                    && m.coefficient >= 0.0
                    && m.theta_power > 0.0
                    && *b >= 0.0
                    && *c >= 0.0;
                ok.then_some(true)
            }
            (ViewKind::Linear { scale, xi }, _) => Some(scale * xi >= 0.0),
            _ => None,
        }
    }
}

fn check_design(design: &[f64], dim: usize) -> Result<()> {
    if design.len() != dim {
        return Err(Error::InvalidSpec(format!(
            "design has dimension {}, expected {dim}",
            design.len()
        )));
    }
    if design.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design"));
    }
    Ok(())
}

fn check_output(out: &[f64]) -> Result<()> {
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward model output"));
    }
    Ok(())
}

/// Simulates an observation y = h_m(ε; θ, ξ).
pub fn simulate_data(
    model: &ForwardModel,
    form: NoiseForm,
    theta: &[f64],
    design: &[f64],
    eps: &[f64],
) -> Result<Vec<f64>> {
    let g = model.eval(theta, design)?;
    if eps.len() != g.len() {
        return Err(Error::InvalidSpec("noise and output dimensions differ".into()));
    }
    let mut y = vec![0.0; g.len()];
    form.apply(&g, eps, &mut y)?;
    Ok(y)
}

/// Recovers ε̃ = h_m⁻¹(y; θ̃, ξ) and log|det J_m⁻¹| at θ̃.
pub fn inverse_noise(
    model: &ForwardModel,
    form: NoiseForm,
    y: &[f64],
    theta: &[f64],
    design: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let g = model.eval(theta, design)?;
    if y.len() != g.len() {
        return Err(Error::InvalidSpec("observation and output dimensions differ".into()));
    }
    let mut eps = vec![0.0; g.len()];
    let log_det = form.invert(&g, y, &mut eps)?;
    Ok((eps, log_det))
}
