//! JSON run configuration and its resolution into pipeline inputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acv::Family;
use crate::design::{BudgetSpec, InnerSearch, SearchStrategy};
use crate::error::{Error, Result};
use crate::models::{
    load_tabulated_model, BenchmarkModel, ForwardModel, ModelKind, NoiseForm, TableManifest,
};
use crate::prob::{DesignSigma, GaussianNoise, Marginal, NoiseSpec, PriorSpec, RngStream};
use crate::utility::{Problem, UtilityModelSpec};
use crate::Design;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub prior: PriorConfig,
    pub noise: NoiseConfig,
    pub models: Vec<ModelConfig>,
    pub designs: DesignGrid,
    pub budget: BudgetConfig,
    pub pilot: PilotConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub reuse_inner: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorConfig {
    /// Independent marginals, one per parameter component.
    Marginals(Vec<Marginal>),
    /// Uniform over the parameter rows of a tabulated model.
    FromTable { from_table: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub form: NoiseForm,
    pub sigma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_design: Vec<DesignSigma>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Fidelity 0, 1 or 2 of the nonlinear benchmark.
    Case1(usize),
    Benchmark(BenchmarkModel),
    Linear { scale: f64 },
    Table {
        path: PathBuf,
        #[serde(flatten)]
        manifest: TableManifest,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub id: usize,
    #[serde(flatten)]
    pub source: ModelSource,
    /// cost of one forward-model evaluation
    pub cost: f64,
    /// inner-loop size; defaults to `budget.n_in_0`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_in: Option<usize>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub offset: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignGrid {
    /// `num` evenly spaced scalar designs from `start` to `stop` inclusive.
    Linspace { start: f64, stop: f64, num: usize },
    List(Vec<Design>),
}

impl DesignGrid {
    pub fn designs(&self) -> Result<Vec<Design>> {
        match self {
            DesignGrid::Linspace { start, stop, num } => {
                if *num == 0 || !start.is_finite() || !stop.is_finite() {
                    return Err(Error::Config(format!(
                        "linspace needs finite bounds and num >= 1, got {start}..{stop} x {num}"
                    )));
                }
                if *num == 1 {
                    return Ok(vec![vec![*start]]);
                }
                let step = (stop - start) / (*num - 1) as f64;
                Ok((0..*num)
                    .map(|i| {
                        if i == num - 1 {
                            vec![*stop]
                        } else {
                            vec![start + step * i as f64]
                        }
                    })
                    .collect())
            }
            DesignGrid::List(list) => {
                let dim = list.first().map(Vec::len).unwrap_or(0);
                if dim == 0 || list.iter().any(|d| d.len() != dim) {
                    return Err(Error::Config(
                        "design list must be nonempty with equal-length designs".into(),
                    ));
                }
                if list.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Config("design list has non-finite values".into()));
                }
                Ok(list.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
    pub points: usize,
    /// defaults to grid for up to two low-fidelity models, coarse-to-fine
    /// otherwise
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<SearchStrategy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub w_budget: f64,
    pub n_in_0: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchConfig>,
    #[serde(default = "all_families")]
    pub families: Vec<Family>,
}

fn all_families() -> Vec<Family> {
    Family::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotConfig {
    pub n_pilot: usize,
    /// defaults to the sweep designs
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub designs: Option<DesignGrid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    /// also run single-fidelity NMC at the same budget
    #[serde(default = "default_true")]
    pub baseline: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_trials: default_trials(),
            baseline: true,
        }
    }
}

fn default_trials() -> usize {
    50
}

fn default_true() -> bool {
    true
}

/// Everything the pipeline needs, resolved and validated.
#[derive(Clone, Debug)]
pub struct Setup {
    pub problem: Problem,
    /// utility models ordered by id
    pub specs: Vec<UtilityModelSpec>,
    pub designs: Vec<Design>,
    pub pilot_designs: Vec<Design>,
    pub n_pilot: usize,
    pub budget: BudgetSpec,
    pub search: Option<InnerSearch>,
    pub families: Vec<Family>,
    pub n_trials: usize,
    pub baseline: bool,
    pub master: RngStream,
}

impl RunConfig {
    /// Parses a config file; relative table paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut cfg.models {
            if let ModelSource::Table { path, .. } = &mut m.source {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Validates the configuration and builds the models and streams.
    pub fn resolve(&self) -> Result<Setup> {
        let cfg_err = |msg: String| Err(Error::Config(msg));
        let mut models = self.models.clone();
        models.sort_by_key(|m| m.id);
        if models.is_empty() {
            return cfg_err("no models configured".into());
        }
        if models.iter().enumerate().any(|(i, m)| m.id != i) {
            let ids: Vec<usize> = self.models.iter().map(|m| m.id).collect();
            return cfg_err(format!(
                "model ids must be 0..M with exactly one model 0, got {ids:?}"
            ));
        }
        let b = &self.budget;
        if b.n_in_0 == 0 {
            return cfg_err("budget.n_in_0 must be >= 1".into());
        }
        if !(b.w_budget.is_finite() && b.w_budget > 0.0) {
            return cfg_err(format!("budget.w_budget must be positive, got {}", b.w_budget));
        }
        if b.families.is_empty() {
            return cfg_err("budget.families is empty".into());
        }
        if self.sweep.n_trials == 0 {
            return cfg_err("sweep.n_trials must be >= 1".into());
        }
        if self.pilot.n_pilot < models.len() + 1 {
            return cfg_err(format!(
                "pilot.n_pilot = {} is too small for {} models; need at least {}",
                self.pilot.n_pilot,
                models.len(),
                models.len() + 1
            ));
        }
        let mut forward = Vec::with_capacity(models.len());
        for m in &models {
            let kind = match &m.source {
                ModelSource::Case1(f) => ModelKind::Benchmark(BenchmarkModel::case1(*f).ok_or_else(
                    || Error::Config(format!("model {}: case1 fidelity must be 0, 1 or 2", m.id)),
                )?),
                ModelSource::Benchmark(b) => ModelKind::Benchmark(*b),
                ModelSource::Linear { scale } => ModelKind::Linear { scale: *scale },
                ModelSource::Table { path, manifest } => {
                    if !path.is_file() {
                        return cfg_err(format!(
                            "model {}: table {} does not exist",
                            m.id,
                            path.display()
                        ));
                    }
                    ModelKind::Tabulated(Arc::new(load_tabulated_model(path, manifest)?))
                }
            };
            let model = ForwardModel::new(m.id, m.cost, kind)
                .map_err(|e| Error::Config(e.to_string()))?
                .with_offset(m.offset);
            forward.push(model);
        }
        let prior = match &self.prior {
            PriorConfig::Marginals(m) => PriorSpec::Independent(m.clone()),
            PriorConfig::FromTable { from_table } => match forward.get(*from_table).map(|f| f.kind()) {
                Some(ModelKind::Tabulated(t)) => PriorSpec::Empirical(Arc::new(t.thetas().clone())),
                _ => return cfg_err(format!("prior.from_table: model {from_table} is not tabulated")),
            },
        };
        let noise = NoiseSpec::Gaussian(GaussianNoise {
            sigma: self.noise.sigma.clone(),
            per_design: self.noise.per_design.clone(),
        });
        let problem = Problem::new(prior, noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut specs = Vec::with_capacity(models.len());
        for (m, f) in models.iter().zip(forward) {
            if f.param_dim() != problem.prior.dim() || f.output_dim() != problem.noise.dim() {
                return cfg_err(format!(
                    "model {}: parameter/output dimensions {}/{} do not match prior/noise {}/{}",
                    m.id,
                    f.param_dim(),
                    f.output_dim(),
                    problem.prior.dim(),
                    problem.noise.dim()
                ));
            }
            let n_in = m.n_in.unwrap_or(b.n_in_0);
            if m.id == 0 && n_in != b.n_in_0 {
                return cfg_err(format!(
                    "model 0 has n_in = {n_in} but budget.n_in_0 = {}",
                    b.n_in_0
                ));
            }
            specs.push(UtilityModelSpec::new(f, self.noise.form, n_in, self.reuse_inner)?);
        }
        let designs = self.designs.designs()?;
        let pilot_designs = match &self.pilot.designs {
            Some(g) => g.designs()?,
            None => designs.clone(),
        };
        let dim = designs[0].len();
        if pilot_designs.iter().any(|d| d.len() != dim) {
            return cfg_err("pilot designs and sweep designs differ in dimension".into());
        }
        let search = match &b.search {
            None => None,
            Some(s) => {
                let search = InnerSearch {
                    lower: s.lower.clone(),
                    upper: s.upper.clone(),
                    points: s.points,
                    strategy: s.strategy.unwrap_or(if specs.len() <= 3 {
                        SearchStrategy::Grid
                    } else {
                        SearchStrategy::CoarseToFine
                    }),
                };
                search.validate().map_err(|e| Error::Config(e.to_string()))?;
                if search.lower.len() != specs.len() - 1 {
                    return cfg_err(format!(
                        "budget.search bounds have {} entries for {} low-fidelity models",
                        search.lower.len(),
                        specs.len() - 1
                    ));
                }
                Some(search)
            }
        };
        Ok(Setup {
            problem,
            specs,
            designs,
            pilot_designs,
            n_pilot: self.pilot.n_pilot,
            budget: BudgetSpec {
                w_budget: b.w_budget,
                n_in_0: b.n_in_0,
            },
            search,
            families: b.families.clone(),
            n_trials: self.sweep.n_trials,
            baseline: self.sweep.baseline,
            master: RngStream::new(self.master_seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "master_seed": 7,
        "prior": [{"lower": 0.0, "upper": 1.0}],
        "noise": {"form": "additive", "sigma": [0.01]},
        "models": [
            {"id": 1, "case1": 1, "cost": 0.1, "n_in": 100},
            {"id": 0, "case1": 0, "cost": 1.0}
        ],
        "designs": {"linspace": {"start": 0.0, "stop": 1.0, "num": 5}},
        "budget": {"w_budget": 1e5, "n_in_0": 200},
        "pilot": {"n_pilot": 50}
    }"#;

    #[test]
    fn parses_and_resolves() {
        let cfg: RunConfig = serde_json::from_str(MINIMAL).unwrap();
        let s = cfg.resolve().unwrap();
        assert_eq!(s.specs.len(), 2);
        assert_eq!(s.specs[0].model.id(), 0);
        assert_eq!(s.specs[0].n_in, 200);
        assert_eq!(s.specs[1].n_in, 100);
        assert_eq!(s.designs.len(), 5);
        assert_eq!(s.designs[4], vec![1.0]);
        assert_eq!(s.pilot_designs, s.designs);
        assert_eq!(s.n_trials, 50);
        assert_eq!(s.families, Family::ALL.to_vec());
        let back: RunConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let base: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        let check = |patch: &dyn Fn(&mut serde_json::Value)| {
            let mut v = base.clone();
            patch(&mut v);
            let cfg: RunConfig = serde_json::from_value(v).unwrap();
            let err = cfg.resolve().unwrap_err();
            assert!(err.is_config_error(), "{err}");
        };
        check(&|v| v["pilot"]["n_pilot"] = 2.into());
        check(&|v| v["models"][0]["id"] = 0.into());
        check(&|v| v["models"][0]["cost"] = (-1.0).into());
        check(&|v| v["models"][1]["n_in"] = 5.into());
        check(&|v| v["models"][0]["case1"] = 7.into());
        check(&|v| v["sweep"] = serde_json::json!({"n_trials": 0}));
        check(&|v| {
            v["models"][0] = serde_json::json!({"id": 1, "table": {"path": "/nonexistent.csv",
                "n_theta": 1, "n_y": 1, "designs": [[0.0]]}, "cost": 1.0})
        });
        check(&|v| {
            v["budget"]["search"] = serde_json::json!({"lower": [1, 1], "upper": [5, 5], "points": 3})
        });
        let mut v = base.clone();
        v["bogus"] = 1.into();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }
}
