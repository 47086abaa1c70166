//! NMC-style utility models u_m(ξ, z): per-sample log likelihood-to-evidence
//! ratios with the evidence estimated from prior draws of θ̃.
//!
//! The Gaussian normalizing constant −Σ ln σ − (n_y/2) ln 2π appears in the
//! numerator and in every evidence term, so it cancels and is never formed.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{DesignView, ForwardModel, NoiseForm};
use crate::prob::{standard_normal, NoiseSpec, PriorSpec, RngStream};
use crate::{stats, Design};

/// Stream labels used to derive the purpose-specific random streams.
pub mod labels {
    pub const OUTER: u64 = 0x6f75_7465;
    pub const OUTER_THETA: u64 = 1;
    pub const OUTER_NOISE: u64 = 2;
    pub const INNER: u64 = 0x696e_6e65;
    pub const INNER_SHARED: u64 = 0x7368_6172;
    pub const PILOT: u64 = 0x7069_6c6f;
    pub const TRIAL: u64 = 0x7472_6961;
    pub const BASELINE: u64 = 0x6261_7365;
}

/// Terms more than this far below the maximum are dropped from the
/// log-sum-exp. Each is below e⁻⁴⁶ of the largest term, so even 10⁶ dropped
/// terms change the evidence by less than 10⁻¹⁴ relative.
const LSE_CUTOFF: f64 = 46.0;

/// Prior and noise model shared by every utility model.
#[derive(Clone, Debug)]
pub struct Problem {
    pub prior: PriorSpec,
    pub noise: NoiseSpec,
}

impl Problem {
    pub fn new(prior: PriorSpec, noise: NoiseSpec) -> Result<Self> {
        prior.validate()?;
        noise.validate()?;
        Ok(Self { prior, noise })
    }
}

/// A utility model: forward model, noise structure and inner-loop size.
#[derive(Clone, Debug)]
pub struct UtilityModelSpec {
    pub model: ForwardModel,
    pub form: NoiseForm,
    pub n_in: usize,
    /// Share inner draws θ̃ with the other utility models at each outer sample.
    pub reuse_inner: bool,
}

impl UtilityModelSpec {
    pub fn new(model: ForwardModel, form: NoiseForm, n_in: usize, reuse_inner: bool) -> Result<Self> {
        if n_in == 0 {
            return Err(Error::InvalidSpec(format!(
                "model {}: inner-loop size must be >= 1",
                model.id()
            )));
        }
        Ok(Self {
            model,
            form,
            n_in,
            reuse_inner,
        })
    }

    /// Cost of one evaluation: one forward solve for the numerator plus one
    /// per inner draw.
    pub fn cost(&self) -> f64 {
        (self.n_in + 1) as f64 * self.model.cost()
    }

    pub fn with_n_in(&self, n_in: usize) -> Self {
        Self {
            n_in: n_in.max(1),
            ..self.clone()
        }
    }

    /// The stream that supplies this model's inner draws, derived from the
    /// run stream `base`. Under reuse every model gets the same stream.
    pub fn inner_stream(&self, base: &RngStream) -> RngStream {
        if self.reuse_inner {
            base.derive(labels::INNER_SHARED)
        } else {
            base.derive_path(&[labels::INNER, self.model.id() as u64])
        }
    }
}

/// Paired outer samples (ε, θ) at one design.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub eps: Array2<f64>,
    pub theta: Array2<f64>,
    pub stream: RngStream,
}

impl SampleBatch {
    pub fn draw(problem: &Problem, design: &[f64], rng: &RngStream, n: usize) -> Result<Self> {
        Ok(OuterDraws::draw(problem, rng, n)?.at_design(&problem.noise, design))
    }

    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outer samples before the design-dependent noise scaling. Every design
/// sees the same standard-normal draws, which gives common random numbers
/// across the design grid.
#[derive(Clone, Debug)]
pub struct OuterDraws {
    pub standard: Array2<f64>,
    pub theta: Array2<f64>,
    pub stream: RngStream,
}

impl OuterDraws {
    /// `n` samples; a smaller `n` from the same stream gives a prefix.
    pub fn draw(problem: &Problem, rng: &RngStream, n: usize) -> Result<Self> {
        let dim = problem.prior.dim();
        let mut theta = vec![0.0; n * dim];
        problem
            .prior
            .fill(&mut rng.derive(labels::OUTER_THETA).generator(), &mut theta);
        Ok(Self {
            standard: standard_normal(&rng.derive(labels::OUTER_NOISE), n, problem.noise.dim()),
            theta: Array2::from_shape_vec((n, dim), theta).expect("shape matches buffer"),
            stream: rng.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at_design(&self, noise: &NoiseSpec, design: &[f64]) -> SampleBatch {
        let mut eps = Array2::zeros(self.standard.raw_dim());
        for (mut e, z) in eps.rows_mut().into_iter().zip(self.standard.rows()) {
            noise.scale_into(design, z.as_slice().unwrap(), e.as_slice_mut().unwrap());
        }
        SampleBatch {
            eps,
            theta: self.theta.clone(),
            stream: self.stream.clone(),
        }
    }
}

/// Inner-loop prior draws, one matrix per outer sample.
#[derive(Clone, Debug)]
pub struct InnerDraws {
    rows: Vec<Array2<f64>>,
}

impl InnerDraws {
    /// Draws `n_in` rows for each of `n_outer` samples from the per-sample
    /// streams of `rng`.
    pub fn draw(prior: &PriorSpec, rng: &RngStream, n_outer: usize, n_in: usize) -> Self {
        Self {
            rows: (0..n_outer).map(|i| inner_rows(prior, rng, i, n_in)).collect(),
        }
    }

    pub fn from_matrices(rows: Vec<Array2<f64>>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn sample(&self, i: usize) -> ArrayView2<'_, f64> {
        self.rows[i].view()
    }
}

/// The first `n_in` inner draws for outer sample `index`. Draws are
/// sequential, so a smaller `n_in` yields a prefix of a larger one.
pub fn inner_rows(prior: &PriorSpec, rng: &RngStream, index: usize, n_in: usize) -> Array2<f64> {
    let dim = prior.dim();
    let mut data = vec![0.0; n_in * dim];
    prior.fill(&mut rng.derive(index as u64).generator(), &mut data);
    Array2::from_shape_vec((n_in, dim), data).expect("shape matches buffer")
}

/// Running log-sum-exp state: the total is `max + ln(sum)`.
#[derive(Clone, Copy, Debug)]
struct Lse {
    max: f64,
    sum: f64,
}

impl Lse {
    const EMPTY: Lse = Lse {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    #[inline(always)]
    fn of(terms: &[f64]) -> Lse {
        let max = max_of(terms);
        if max == f64::NEG_INFINITY {
            return Lse::EMPTY;
        }
        let cut = max - LSE_CUTOFF;
        let mut acc = [0.0f64; LANES];
        let mut chunks = terms.chunks_exact(LANES);
        for c in &mut chunks {
            for k in 0..LANES {
                let e = exp_nonpositive((c[k] - max).max(-700.0));
                acc[k] += if c[k] > cut { e } else { 0.0 };
            }
        }
        for &l in chunks.remainder() {
            if l > cut {
                acc[0] += exp_nonpositive(l - max);
            }
        }
        let mut sum = 0.0;
        for a in acc {
            sum += a;
        }
        Lse { max, sum }
    }

    fn merge(self, other: Lse) -> Lse {
        let (hi, lo) = if self.max >= other.max {
            (self, other)
        } else {
            (other, self)
        };
        if lo.max == f64::NEG_INFINITY || lo.max < hi.max - LSE_CUTOFF {
            return hi;
        }
        Lse {
            max: hi.max,
            sum: hi.sum + lo.sum * (lo.max - hi.max).exp(),
        }
    }

    fn value(self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Independent accumulators per reduction; lets the compiler vectorize.
const LANES: usize = 8;

/// Maximum of `xs`. NaN inputs are ignored here and caught by the caller's
/// finiteness check.
#[inline(always)]
fn max_of(xs: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for k in 0..LANES {
            acc[k] = if c[k] > acc[k] { c[k] } else { acc[k] };
        }
    }
    for &x in chunks.remainder() {
        if x > acc[0] {
            acc[0] = x;
        }
    }
    acc.iter().fold(f64::NEG_INFINITY, |m, &a| if a > m { a } else { m })
}

/// e^x for x in [−700, 0], branch-free so that loops over it vectorize.
/// Cody–Waite reduction x = n·ln 2 + r with |r| ≤ ln2/2, then a degree-12
/// Taylor polynomial; relative error is within a few ulp of `f64::exp`.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5·2⁵²
    const LN2_HI: f64 = f64::from_bits(0x3FE6_2E42_FEE0_0000);
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let k = x * std::f64::consts::LOG2_E + SHIFTER;
    let n = k - SHIFTER;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // the low bits of k hold n; the shifter's low 12 mantissa bits are zero
    let scale = f64::from_bits(k.to_bits().wrapping_add(1023) << 52);
    p * scale
}

/// Per-thread buffers for the inner loop.
#[derive(Default)]
struct Scratch {
    g: Vec<f64>,
    terms: Vec<f64>,
    eps: Vec<f64>,
    y: Vec<f64>,
    g_outer: Vec<f64>,
    sorted: Vec<f64>,
    sort_buf: (Vec<f64>, Vec<u32>),
}

/// Evaluation context for one utility model at a fixed list of designs.
struct Kernel<'a> {
    spec: &'a UtilityModelSpec,
    designs: &'a [Design],
    /// 1/σ² per design and output component
    inv_var: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    /// ascending inner-loop sizes to report; the last is the number of draws
    prefixes: &'a [usize],
    /// Sum only the window of inner draws that can pass the log-sum-exp
    /// cutoff when the model is scalar and monotone in θ.
    windowed: bool,
}

impl<'a> Kernel<'a> {
    fn new(
        spec: &'a UtilityModelSpec,
        noise: &NoiseSpec,
        designs: &'a [Design],
        prefixes: &'a [usize],
    ) -> Result<Self> {
        if prefixes.is_empty() || prefixes[0] == 0 || prefixes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec(format!(
                "inner-loop sizes must be positive and strictly increasing, got {prefixes:?}"
            )));
        }
        if noise.dim() != spec.model.output_dim() {
            return Err(Error::InvalidSpec(format!(
                "noise dimension {} differs from model {} output dimension {}",
                noise.dim(),
                spec.model.id(),
                spec.model.output_dim()
            )));
        }
        let sigma: Vec<Vec<f64>> = designs.iter().map(|d| noise.sigma_at(d).to_vec()).collect();
        let inv_var = sigma
            .iter()
            .map(|s| s.iter().map(|s| 1.0 / (s * s)).collect())
            .collect();
        let windowed = spec.model.output_dim() == 1 && spec.model.param_dim() == 1;
        Ok(Self {
            spec,
            designs,
            inv_var,
            sigma,
            prefixes,
            windowed,
        })
    }

    fn n_draws(&self) -> usize {
        *self.prefixes.last().unwrap()
    }

    /// Utility values for one outer sample at every design and prefix.
    /// `eps_at(k, out)` writes the outer noise at design k. Output layout is
    /// `out[p * designs + k]`.
    fn sample(
        &self,
        theta: ArrayView1<'_, f64>,
        mut eps_at: impl FnMut(usize, &mut [f64]),
        inner: ArrayView2<'_, f64>,
        scratch: &mut Scratch,
        out: &mut [f64],
    ) -> Result<()> {
        let model = &self.spec.model;
        let form = self.spec.form;
        let ny = model.output_dim();
        let n = self.n_draws();
        debug_assert!(inner.nrows() >= n);
        let outer = model.prepare(theta.insert_axis(ndarray::Axis(0)))?;

        // The evidence sum does not depend on the order of the draws within
        // a prefix chunk, so the windowed path sorts each chunk by θ.
        let mut sorted = std::mem::take(&mut scratch.sorted);
        let inner_rows = if self.windowed {
            sorted.clear();
            sorted.extend(inner.column(0).iter().take(n));
            let mut start = 0;
            for &end in self.prefixes {
                sort_floats(&mut sorted[start..end], &mut scratch.sort_buf);
                start = end;
            }
            ArrayView2::from_shape((n, 1), &sorted[..]).expect("one column")
        } else {
            inner.slice(ndarray::s![..n, ..])
        };
        let inner = model.prepare(inner_rows)?;
        scratch.g.resize(n * ny, 0.0);
        scratch.terms.resize(n, 0.0);
        scratch.eps.resize(ny, 0.0);
        scratch.y.resize(ny, 0.0);
        scratch.g_outer.resize(ny, 0.0);
        let nd = self.designs.len();

        for (k, design) in self.designs.iter().enumerate() {
            let inv_var = &self.inv_var[k];
            eps_at(k, &mut scratch.eps);
            outer.eval_design(design, &mut scratch.g_outer)?;
            form.apply(&scratch.g_outer, &scratch.eps, &mut scratch.y)?;
            let numerator = -0.5
                * scratch
                    .eps
                    .iter()
                    .zip(inv_var)
                    .map(|(e, iv)| e * e * iv)
                    .sum::<f64>()
                + form.log_abs_det_inverse(&scratch.g_outer)?;

            let view = inner.at_design(design)?;
            let window = if self.windowed {
                Window::new(&view, form, scratch.y[0], inv_var[0], n)
            } else {
                None
            };
            if window.is_none() {
                view.fill(0..n, &mut scratch.g)?;
                log_terms(form, &scratch.g, &scratch.y, inv_var, &mut scratch.eps, &mut scratch.terms)?;
            }

            let mut lse = Lse::EMPTY;
            let mut start = 0;
            for (p, &end) in self.prefixes.iter().enumerate() {
                let chunk = match &window {
                    Some(w) => w.lse(&view, start..end, scratch)?,
                    None => Lse::of(&scratch.terms[start..end]),
                };
                lse = lse.merge(chunk);
                start = end;
                if lse.max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateEvidence);
                }
                let u = numerator - lse.value() + (end as f64).ln();
                if !u.is_finite() {
                    return Err(Error::NonFinite("utility value"));
                }
                out[p * nd + k] = u;
            }
        }
        scratch.sorted = sorted;
        Ok(())
    }
}

/// Windowed evidence sum for a scalar model that is monotone in a scalar θ
/// over rows sorted by θ. The log term l(g) is unimodal in g with its peak
/// at `peak`, so within a sorted chunk the draws with l above the cutoff
/// form one contiguous run, located by binary search.
struct Window {
    form: NoiseForm,
    y: f64,
    /// −½/σ²
    half_inv_var: f64,
    peak: f64,
    increasing: bool,
}

impl Window {
    fn new(view: &DesignView<'_, '_>, form: NoiseForm, y: f64, inv_var: f64, n: usize) -> Option<Self> {
        let increasing = view.monotone_in_theta()?;
        let peak = match form {
            NoiseForm::Additive => y,
            NoiseForm::Scaled => {
                // l(g) = −½((y − g)/(σg))² − ln g is unimodal for g, y > 0
                let (first, last) = (view.value(0), view.value(n - 1));
                if !(y > 0.0 && first > 0.0 && last > 0.0) {
                    return None;
                }
                let sigma2 = 1.0 / inv_var;
                y / (0.5 * (1.0 + (1.0 + 4.0 * sigma2).sqrt()))
            }
        };
        Some(Self {
            form,
            y,
            half_inv_var: -0.5 * inv_var,
            peak,
            increasing,
        })
    }

    #[inline(always)]
    fn term(&self, g: f64) -> f64 {
        match self.form {
            NoiseForm::Additive => {
                let d = self.y - g;
                self.half_inv_var * d * d
            }
            NoiseForm::Scaled => {
                let e = (self.y - g) / g;
                self.half_inv_var * e * e - g.abs().ln()
            }
        }
    }

    fn lse(&self, view: &DesignView<'_, '_>, chunk: Range<usize>, scratch: &mut Scratch) -> Result<Lse> {
        let (s, e) = (chunk.start, chunk.end);
        let len = e - s;
        // position p counts along increasing g
        let row = |p: usize| if self.increasing { s + p } else { e - 1 - p };
        let g_at = |p: usize| view.value(row(p));
        let i0 = partition_point(0, len, |p| g_at(p) < self.peak);
        let mut max = f64::NEG_INFINITY;
        if i0 > 0 {
            max = self.term(g_at(i0 - 1));
        }
        if i0 < len {
            max = max.max(self.term(g_at(i0)));
        }
        if max == f64::NEG_INFINITY || max.is_nan() {
            return Ok(Lse::EMPTY);
        }
        let cut = max - LSE_CUTOFF;
        let left = partition_point(0, i0, |p| self.term(g_at(p)) <= cut);
        let right = partition_point(i0, len, |p| self.term(g_at(p)) > cut);
        let rows = if self.increasing {
            s + left..s + right
        } else {
            e - right..e - left
        };
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { self.window_sum_avx2(view, rows, scratch) };
        }
        self.window_sum(view, rows, scratch)
    }

    /// Log-sum-exp over the draws in `rows`. Wider vectors only change
    /// speed: there is no fused multiply-add, so results are identical.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn window_sum_avx2(
        &self,
        view: &DesignView<'_, '_>,
        rows: Range<usize>,
        scratch: &mut Scratch,
    ) -> Result<Lse> {
        self.window_sum(view, rows, scratch)
    }

    #[inline(always)]
    fn window_sum(&self, view: &DesignView<'_, '_>, rows: Range<usize>, scratch: &mut Scratch) -> Result<Lse> {
        let w = rows.len();
        view.fill(rows, &mut scratch.g)?;
        for (t, &g) in scratch.terms[..w].iter_mut().zip(&scratch.g[..w]) {
            *t = self.term(g);
        }
        Ok(Lse::of(&scratch.terms[..w]))
    }
}

/// Sorts finite values ascending. A counting pass into equal-width buckets
/// followed by small per-bucket sorts is linear for the smooth distributions
/// that prior draws come from.
fn sort_floats(v: &mut [f64], (buf, starts): &mut (Vec<f64>, Vec<u32>)) {
    let n = v.len();
    if n < 64 {
        v.sort_unstable_by(f64::total_cmp);
        return;
    }
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi > lo) || !(hi - lo).is_finite() {
        v.sort_unstable_by(f64::total_cmp);
        return;
    }
    let scale = n as f64 / (hi - lo);
    let bucket = |x: f64| (((x - lo) * scale) as usize).min(n - 1);
    starts.clear();
    starts.resize(n + 1, 0);
    for &x in v.iter() {
        starts[bucket(x) + 1] += 1;
    }
    for b in 0..n {
        starts[b + 1] += starts[b];
    }
    buf.clear();
    buf.resize(n, 0.0);
    // scatter, advancing each bucket's start; afterwards starts[b] is the
    // end of bucket b, i.e. the start of bucket b + 1
    for &x in v.iter() {
        let b = bucket(x);
        buf[starts[b] as usize] = x;
        starts[b] += 1;
    }
    v.copy_from_slice(buf);
    let mut s = 0;
    for &e in &starts[..n] {
        let e = e as usize;
        if e - s > 1 {
            v[s..e].sort_unstable_by(f64::total_cmp);
        }
        s = e;
    }
}

/// First index in `lo..hi` where `pred` is false, assuming `pred` holds on
/// a prefix of the range.
fn partition_point(mut lo: usize, mut hi: usize, pred: impl Fn(usize) -> bool) -> usize {
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Log evidence terms −½ Σ (ε̃/σ)² + log|J⁻¹| for each inner draw.
fn log_terms(
    form: NoiseForm,
    g: &[f64],
    y: &[f64],
    inv_var: &[f64],
    eps: &mut [f64],
    terms: &mut [f64],
) -> Result<()> {
    let ny = y.len();
    if ny == 1 {
        let (y, iv) = (y[0], -0.5 * inv_var[0]);
        match form {
            NoiseForm::Additive => {
                for (t, g) in terms.iter_mut().zip(g) {
                    let d = y - g;
                    *t = iv * d * d;
                }
            }
            NoiseForm::Scaled => {
                if g.contains(&0.0) {
                    return Err(Error::NonInvertible { component: 0 });
                }
                for (t, g) in terms.iter_mut().zip(g) {
                    let e = (y - g) / g;
                    *t = iv * e * e - g.abs().ln();
                }
            }
        }
        return Ok(());
    }
    for (t, g) in terms.iter_mut().zip(g.chunks_exact(ny)) {
        let log_det = form.invert(g, y, eps)?;
        *t = -0.5 * eps.iter().zip(inv_var).map(|(e, iv)| e * e * iv).sum::<f64>() + log_det;
    }
    Ok(())
}

/// u_m at one outer sample (ε, θ) with the given inner draws (one row per
/// draw; all rows are used).
pub fn nmc_utility(
    spec: &UtilityModelSpec,
    noise: &NoiseSpec,
    design: &[f64],
    eps: &[f64],
    theta: &[f64],
    inner: ArrayView2<'_, f64>,
) -> Result<f64> {
    if inner.nrows() != spec.n_in {
        return Err(Error::InvalidSpec(format!(
            "expected {} inner draws, got {}",
            spec.n_in,
            inner.nrows()
        )));
    }
    if eps.len() != noise.dim() {
        return Err(Error::InvalidSpec("noise vector has the wrong dimension".into()));
    }
    if eps.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("noise vector"));
    }
    let designs = [design.to_vec()];
    let prefixes = [spec.n_in];
    let kernel = Kernel::new(spec, noise, &designs, &prefixes)?;
    let mut out = [0.0];
    kernel.sample(
        ArrayView1::from(theta),
        |_, e| e.copy_from_slice(eps),
        inner,
        &mut Scratch::default(),
        &mut out,
    )?;
    Ok(out[0])
}

/// u values for every sample of `batch` at design `design`.
///
/// Without `shared`, sample i's inner draws come from `rng.derive(i)`; with
/// `shared`, sample i uses the first `spec.n_in` rows of `shared.sample(i)`.
pub fn eval_utility_batch(
    spec: &UtilityModelSpec,
    problem: &Problem,
    design: &[f64],
    batch: &SampleBatch,
    rng: &RngStream,
    shared: Option<&InnerDraws>,
) -> Result<Vec<f64>> {
    if batch.eps.nrows() != batch.theta.nrows() {
        return Err(Error::InvalidSpec("batch has unequal ε and θ row counts".into()));
    }
    if let Some(shared) = shared {
        if shared.len() < batch.len() {
            return Err(Error::InvalidSpec("shared inner draws cover too few samples".into()));
        }
        if let Some(i) = (0..batch.len()).find(|&i| shared.sample(i).nrows() < spec.n_in) {
            return Err(Error::InvalidSpec(format!(
                "shared inner draws for sample {i} have fewer than {} rows",
                spec.n_in
            )));
        }
    }
    let designs = [design.to_vec()];
    let prefixes = [spec.n_in];
    let kernel = Kernel::new(spec, &problem.noise, &designs, &prefixes)?;
    (0..batch.len())
        .into_par_iter()
        .map_init(Scratch::default, |scratch, i| {
            let owned;
            let inner = match shared {
                Some(s) => s.sample(i),
                None => {
                    owned = inner_rows(&problem.prior, rng, i, spec.n_in);
                    owned.view()
                }
            };
            let mut out = [0.0];
            kernel.sample(
                batch.theta.row(i),
                |_, e| e.copy_from_slice(batch.eps.row(i).as_slice().unwrap()),
                inner,
                scratch,
                &mut out,
            )?;
            Ok(out[0])
        })
        .collect()
}

/// u values of one utility model over a range of outer samples at many
/// designs and several inner-loop sizes at once.
///
/// Sample i (a global index into `outer`) draws `max(prefixes)` inner rows
/// from `inner.derive(i)`; the value for prefix size P uses the first P rows.
/// Returns one `designs × samples` matrix per prefix. Values do not depend
/// on which other designs are requested; with a single prefix they are
/// bit-identical to [`eval_utility_batch`].
pub fn eval_utility_grid(
    spec: &UtilityModelSpec,
    problem: &Problem,
    designs: &[Design],
    outer: &OuterDraws,
    samples: Range<usize>,
    inner: &RngStream,
    prefixes: &[usize],
) -> Result<Vec<Array2<f64>>> {
    if samples.end > outer.len() {
        return Err(Error::InvalidSpec(format!(
            "sample range {samples:?} exceeds the {} outer draws",
            outer.len()
        )));
    }
    let kernel = Kernel::new(spec, &problem.noise, designs, prefixes)?;
    let nd = designs.len();
    let width = prefixes.len() * nd;
    let n = samples.len();
    let mut flat = vec![0.0; n * width];
    flat.par_chunks_mut(width.max(1))
        .zip(samples.into_par_iter())
        .try_for_each_init(
            || (Scratch::default(), Vec::new()),
            |(scratch, rows), (out, i)| {
                rows.resize(kernel.n_draws() * problem.prior.dim(), 0.0);
                problem.prior.fill(&mut inner.derive(i as u64).generator(), rows);
                let rows = ArrayView2::from_shape((kernel.n_draws(), problem.prior.dim()), &rows[..])
                    .expect("shape matches buffer");
                let z = outer.standard.row(i);
                kernel.sample(
                    outer.theta.row(i),
                    |k, e| {
                        for ((e, z), s) in e.iter_mut().zip(z.iter()).zip(&kernel.sigma[k]) {
                            *e = s * z;
                        }
                    },
                    rows,
                    scratch,
                    out,
                )
            },
        )?;
    Ok((0..prefixes.len())
        .map(|p| Array2::from_shape_fn((nd, n), |(k, j)| flat[j * width + p * nd + k]))
        .collect())
}

/// Single-fidelity nested Monte Carlo estimate of the EIG at `design` with
/// `n_out` outer samples; returns the estimate and the per-sample values.
pub fn nmc_estimator(
    spec: &UtilityModelSpec,
    problem: &Problem,
    design: &[f64],
    n_out: usize,
    rng: &RngStream,
) -> Result<(f64, Vec<f64>)> {
    if n_out == 0 {
        return Err(Error::InvalidSpec("nmc_estimator needs N_out >= 1".into()));
    }
    let outer = OuterDraws::draw(problem, &rng.derive(labels::OUTER), n_out)?;
    let designs = [design.to_vec()];
    let u = eval_utility_grid(
        spec,
        problem,
        &designs,
        &outer,
        0..n_out,
        &spec.inner_stream(rng),
        &[spec.n_in],
    )?;
    let values = u[0].row(0).to_vec();
    Ok((stats::mean(&values), values))
}

/// Closed-form EIG of y = θξ + ε with θ ~ N(0, σ_prior²), ε ~ N(0, σ_noise²).
///
/// # Panics
/// If either standard deviation is not positive.
pub fn analytic_eig_linear_gaussian(sigma_prior: f64, xi: f64, sigma_noise: f64) -> f64 {
    assert!(sigma_prior > 0.0 && sigma_noise > 0.0, "standard deviations must be positive");
    0.5 * (sigma_prior * sigma_prior * xi * xi / (sigma_noise * sigma_noise)).ln_1p()
}
