//! End-to-end orchestration (pilot → design → sweep → report) and the
//! bundled configuration of the nonlinear benchmark.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acv::Family;
use crate::config::{
    BudgetConfig, DesignGrid, ModelConfig, ModelSource, NoiseConfig, PilotConfig, PriorConfig,
    RunConfig, SearchConfig, Setup, SweepConfig,
};
use crate::design::{
    design_from_pilot, run_pilot, run_pilot_with_search, write_json, EstimatorDesign, PilotResult,
};
use crate::error::{Error, Result};
use crate::models::NoiseForm;
use crate::prob::Marginal;
use crate::sweep::{
    baseline_n_out, reduction_report, run_baseline_nmc, run_sweep, ReductionReport, SweepResult,
};
use crate::utility::labels;
use crate::Design;

/// How the low-fidelity inner-loop sizes are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMode {
    /// every model uses the high-fidelity inner size
    Naive,
    /// grid search over the low-fidelity inner sizes
    Optimal,
}

/// The nonlinear benchmark: θ ~ U(0, 1), σ = 0.01, three fidelities with
/// forward costs 1, 0.1 and 0.01, 41 designs on [0, 1], 500 pilot samples,
/// budget 2.5·10⁶, N_in,0 = 2500 and 50 trials. The optimal mode searches a
/// 50 × 50 grid over [25, 4000]².
pub fn case1_config(form: NoiseForm, mode: InnerMode, reuse: bool, seed: u64) -> RunConfig {
    let n_in_0 = 2500;
    RunConfig {
        master_seed: seed,
        prior: PriorConfig::Marginals(vec![Marginal::Uniform {
            lower: 0.0,
            upper: 1.0,
        }]),
        noise: NoiseConfig {
            form,
            sigma: vec![0.01],
            per_design: vec![],
        },
        models: [1.0, 0.1, 0.01]
            .into_iter()
            .enumerate()
            .map(|(id, cost)| ModelConfig {
                id,
                source: ModelSource::Case1(id),
                cost,
                n_in: None,
                offset: 0.0,
            })
            .collect(),
        designs: DesignGrid::Linspace {
            start: 0.0,
            stop: 1.0,
            num: 41,
        },
        budget: BudgetConfig {
            w_budget: 2.5e6,
            n_in_0,
            search: (mode == InnerMode::Optimal).then(|| SearchConfig {
                lower: vec![25, 25],
                upper: vec![4000, 4000],
                points: 50,
                strategy: None,
            }),
            families: Family::ALL.to_vec(),
        },
        pilot: PilotConfig {
            n_pilot: 500,
            designs: None,
        },
        sweep: SweepConfig {
            n_trials: 50,
            baseline: true,
        },
        reuse_inner: reuse,
        output_dir: None,
    }
}

/// Pilot phase; with a search box it also evaluates the search candidates.
pub fn pilot(setup: &Setup) -> Result<PilotResult> {
    let rng = setup.master.derive(labels::PILOT);
    match &setup.search {
        None => run_pilot(
            &setup.specs,
            &setup.problem,
            &setup.pilot_designs,
            setup.n_pilot,
            &rng,
        ),
        Some(search) => run_pilot_with_search(
            &setup.specs,
            &setup.problem,
            &setup.pilot_designs,
            setup.n_pilot,
            &rng,
            &setup.budget,
            search,
            &setup.families,
        ),
    }
}

/// Chooses the estimator from pilot data.
pub fn design(setup: &Setup, pilot: &PilotResult) -> Result<EstimatorDesign> {
    if pilot.costs.len() != setup.specs.len() {
        return Err(Error::Config(format!(
            "pilot has {} models, config has {}",
            pilot.costs.len(),
            setup.specs.len()
        )));
    }
    design_from_pilot(pilot, &setup.budget, setup.search.as_ref(), &setup.families)
}

/// Summary of a sweep and its comparison with the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub n_designs: usize,
    pub n_trials: usize,
    pub family: Family,
    pub n_in: Vec<usize>,
    pub projected_variance: f64,
    pub projected_mc_variance: f64,
    pub xi_star_index: usize,
    pub xi_star: Design,
    pub means: Vec<f64>,
    pub variances: Vec<Option<f64>>,
    pub design_averaged_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_n_out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_means: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_variances: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_design_averaged_variance: Option<f64>,
    /// baseline over multi-fidelity design-averaged variance
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design_averaged_ratio: Option<f64>,
}

pub struct SweepOutputs {
    pub mf: SweepResult,
    pub baseline: Option<SweepResult>,
    pub report: Option<ReductionReport>,
    pub summary: SweepSummary,
}

/// Multi-fidelity sweep, plus the single-fidelity baseline at the same
/// budget when configured.
pub fn sweep(setup: &Setup, design: &EstimatorDesign) -> Result<SweepOutputs> {
    let mf = run_sweep(
        &setup.designs,
        design,
        &setup.specs,
        &setup.problem,
        setup.n_trials,
        &setup.master,
    )?;
    let (baseline, n_out) = if setup.baseline {
        let spec0 = setup.specs[0].with_n_in(setup.budget.n_in_0);
        let n_out = baseline_n_out(setup.budget.w_budget, &spec0);
        let b = run_baseline_nmc(
            &setup.designs,
            n_out,
            &spec0,
            &setup.problem,
            setup.n_trials,
            &setup.master,
        )?;
        (Some(b), Some(n_out))
    } else {
        (None, None)
    };
    let report = baseline.as_ref().map(|b| reduction_report(b, &mf)).transpose()?;
    let (xi_star_index, xi_star) = crate::sweep::argmax_design(&mf)?;
    let summary = SweepSummary {
        n_designs: setup.designs.len(),
        n_trials: setup.n_trials,
        family: design.family,
        n_in: design.n_in.clone(),
        projected_variance: design.projected_variance,
        projected_mc_variance: design.mc_variance,
        xi_star_index,
        xi_star,
        means: mf.means(),
        variances: mf.variances(),
        design_averaged_variance: mf.design_averaged_variance(),
        baseline_n_out: n_out,
        baseline_means: baseline.as_ref().map(SweepResult::means),
        baseline_variances: baseline.as_ref().map(SweepResult::variances),
        baseline_design_averaged_variance: report.as_ref().and_then(|r| r.baseline_avg),
        design_averaged_ratio: report.as_ref().and_then(|r| r.ratio_avg),
    };
    Ok(SweepOutputs {
        mf,
        baseline,
        report,
        summary,
    })
}

/// Writes `sweep.csv`, `baseline.csv`, `reduction.csv` and `summary.json`
/// into `dir`.
pub fn write_sweep_outputs(out: &SweepOutputs, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.mf.write_csv(&dir.join("sweep.csv"))?;
    if let Some(b) = &out.baseline {
        b.write_csv(&dir.join("baseline.csv"))?;
    }
    if let Some(r) = &out.report {
        r.write_csv(&dir.join("reduction.csv"))?;
    }
    write_json(&dir.join("summary.json"), &out.summary)
}
