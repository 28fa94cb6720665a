//! Levenberg-Marquardt fits of the noiseless generating processes.
//!
//! The objective is `Σ_t (series[t] − model(params)[t])²` with `model` the
//! same waveform code that generates the data. σ is not a fit variable; its
//! estimate is the residual RMS. Free parameters are `Fc, φ, τ` and, for the
//! modulated processes, `Fm, Im`.
//!
//! Damping follows Marquardt's diagonal scaling: each step solves
//! `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀr`. Parameters are clipped to their bounds
//! after each step; φ is unbounded during the fit and wrapped at the end.

use std::f64::consts::TAU;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::signalgen::{waveform_into, wrap_phase, LatentParams, LatentRanges, ProcessKind, SignalError, TimeGrid, WaveOptions};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("parameter `{field}` = {value} outside bounds [{lo}, {hi}]")]
    OutOfBounds {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("series has {got} points, grid has {expected}")]
    Length { expected: usize, got: usize },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("init kind {init} does not match problem kind {problem}")]
    KindMismatch { problem: ProcessKind, init: ProcessKind },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("fit csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("fit csv i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Closed intervals of the free parameters. φ is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub fc: (f64, f64),
    pub tau: (f64, f64),
    pub fm: (f64, f64),
    pub im: (f64, f64),
}

impl Bounds {
    /// Each sampling range grown by `frac` of its width (half on each side).
    /// A lower bound that would cross its physical floor is replaced by half
    /// the original lower bound (`Fc`, `τ`, `Fm > 0`) or by zero (`Im`).
    pub fn widened(r: &LatentRanges, frac: f64) -> Self {
        let grow = |(lo, hi): (f64, f64), positive: bool| {
            let pad = 0.5 * frac * (hi - lo);
            let mut new_lo = lo - pad;
            if positive && new_lo <= 0.0 {
                new_lo = 0.5 * lo;
            } else if !positive && new_lo < 0.0 {
                new_lo = 0.0;
            }
            (new_lo, hi + pad)
        };
        Self {
            fc: grow(r.fc, true),
            tau: grow(r.tau, true),
            fm: grow(r.fm, true),
            im: grow(r.im, false),
        }
    }

    /// Default bounds: sampling ranges widened by 20%.
    pub fn for_grid(grid: TimeGrid) -> Result<Self, SignalError> {
        Ok(Self::widened(&LatentRanges::for_grid(grid)?, 0.2))
    }

    fn of(&self, field: Field) -> (f64, f64) {
        match field {
            Field::Fc => self.fc,
            Field::Phi => (f64::NEG_INFINITY, f64::INFINITY),
            Field::Tau => self.tau,
            Field::Fm => self.fm,
            Field::Im => self.im,
        }
    }

    /// Error naming the first free parameter of `p` outside these bounds.
    pub fn check(&self, p: &LatentParams) -> Result<(), FitError> {
        for &f in free_fields(p.kind) {
            let v = f.get(p);
            let (lo, hi) = self.of(f);
            if !(v >= lo && v <= hi) {
                return Err(FitError::OutOfBounds {
                    field: f.name(),
                    value: v,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Fc,
    Phi,
    Tau,
    Fm,
    Im,
}

impl Field {
    fn name(self) -> &'static str {
        match self {
            Field::Fc => "fc",
            Field::Phi => "phi",
            Field::Tau => "tau",
            Field::Fm => "fm",
            Field::Im => "im",
        }
    }

    fn get(self, p: &LatentParams) -> f64 {
        match self {
            Field::Fc => p.fc,
            Field::Phi => p.phi,
            Field::Tau => p.tau,
            Field::Fm => p.fm,
            Field::Im => p.im,
        }
    }

    fn set(self, p: &mut LatentParams, v: f64) {
        match self {
            Field::Fc => p.fc = v,
            Field::Phi => p.phi = v,
            Field::Tau => p.tau = v,
            Field::Fm => p.fm = v,
            Field::Im => p.im = v,
        }
    }
}

const MONO_FIELDS: [Field; 3] = [Field::Fc, Field::Phi, Field::Tau];
const MOD_FIELDS: [Field; 5] = [Field::Fc, Field::Phi, Field::Tau, Field::Fm, Field::Im];

fn free_fields(kind: ProcessKind) -> &'static [Field] {
    if kind.is_modulated() {
        &MOD_FIELDS
    } else {
        &MONO_FIELDS
    }
}

/// Names of the free parameters of `kind`, in Jacobian column order.
pub fn free_parameter_names(kind: ProcessKind) -> Vec<&'static str> {
    free_fields(kind).iter().map(|f| f.name()).collect()
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when an accepted step lowers SSE by less than this fraction.
    pub sse_tol: f64,
    /// Stop when `‖Δp‖ < step_tol·(‖p‖ + step_tol)`.
    pub step_tol: f64,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    /// Give up (not converged) once λ reaches this value.
    pub lambda_max: f64,
    pub wave: WaveOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            sse_tol: 1e-10,
            step_tol: 1e-10,
            lambda_init: 1e-3,
            lambda_factor: 10.0,
            lambda_max: 1e8,
            wave: WaveOptions::default(),
        }
    }
}

/// One least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    pub kind: ProcessKind,
    /// Noisy series in physical units.
    pub series: Vec<f64>,
    pub grid: TimeGrid,
    /// Starting point; σ is ignored.
    pub init: LatentParams,
    pub bounds: Bounds,
    pub options: FitOptions,
}

impl FitProblem {
    /// Problem with default bounds and options. The init is cast to `kind`.
    pub fn new(kind: ProcessKind, series: Vec<f64>, init: LatentParams) -> Result<Self, FitError> {
        let grid = TimeGrid::new(series.len())?;
        let problem = Self {
            kind,
            series,
            grid,
            init: init.with_kind(kind),
            bounds: Bounds::for_grid(grid)?,
            options: FitOptions::default(),
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<(), FitError> {
        if self.series.len() != self.grid.len() {
            return Err(FitError::Length {
                expected: self.grid.len(),
                got: self.series.len(),
            });
        }
        if self.init.kind != self.kind {
            return Err(FitError::KindMismatch {
                problem: self.kind,
                init: self.init.kind,
            });
        }
        if let Some(i) = self.series.iter().position(|v| !v.is_finite()) {
            return Err(FitError::NonFinite(format!("series value at t = {i}")));
        }
        self.bounds.check(&self.init)
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SseTolerance,
    StepTolerance,
    MaxIterations,
    DampingLimit,
}

/// Outcome of [`lm_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Fitted parameters; `sigma` holds `sigma_hat`, φ is in `[0, 2π)`.
    pub params: LatentParams,
    pub sse: f64,
    pub converged: bool,
    pub iterations: usize,
    pub sigma_hat: f64,
    pub stop: StopReason,
    pub wave: WaveOptions,
}

fn model_into(kind: ProcessKind, p: &LatentParams, wave: WaveOptions, out: &mut [f64]) {
    waveform_into(kind, p, wave, out);
}

fn residuals_into(kind: ProcessKind, p: &LatentParams, series: &[f64], wave: WaveOptions, out: &mut [f64]) -> Result<(), FitError> {
    model_into(kind, p, wave, out);
    for (r, &y) in out.iter_mut().zip(series) {
        *r = y - *r;
        if !r.is_finite() {
            return Err(FitError::NonFinite(format!("model value for {p:?}")));
        }
    }
    Ok(())
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// `series[t] − model(kind, params)[t]`, using the shared generator with
/// default wave options. Parameters must lie within the default bounds.
pub fn residuals(kind: ProcessKind, params: &LatentParams, series: &[f64], grid: TimeGrid) -> Result<Vec<f64>, FitError> {
    if series.len() != grid.len() {
        return Err(FitError::Length {
            expected: grid.len(),
            got: series.len(),
        });
    }
    let p = params.with_kind(kind);
    Bounds::for_grid(grid)?.check(&p)?;
    let mut out = vec![0.0; grid.len()];
    residuals_into(kind, &p, series, WaveOptions::default(), &mut out)?;
    Ok(out)
}

/// Dense `T × n_free` matrix, stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Jacobian {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    pub fn column(&self, col: usize) -> &[f64] {
        &self.data[col * self.rows..(col + 1) * self.rows]
    }
}

/// Forward-difference step for a parameter value.
pub fn fd_step(p: f64) -> f64 {
    (1e-7 * p.abs()).max(1e-7)
}

fn jacobian_at(kind: ProcessKind, p: &LatentParams, series: &[f64], r0: &[f64], wave: WaveOptions, bounds: &Bounds) -> Result<Jacobian, FitError> {
    let fields = free_fields(kind);
    let rows = series.len();
    let mut data = vec![0.0; rows * fields.len()];
    for (c, &f) in fields.iter().enumerate() {
        let v = f.get(p);
        // Step inward at an upper bound so the model stays in its domain.
        let (_, hi) = bounds.of(f);
        let h = if v + fd_step(v) > hi { -fd_step(v) } else { fd_step(v) };
        let mut q = *p;
        f.set(&mut q, v + h);
        let col = &mut data[c * rows..(c + 1) * rows];
        residuals_into(kind, &q, series, wave, col)?;
        for (j, &base) in col.iter_mut().zip(r0) {
            *j = (*j - base) / h;
            if !j.is_finite() {
                return Err(FitError::NonFinite(format!("jacobian column `{}`", f.name())));
            }
        }
    }
    Ok(Jacobian {
        rows,
        cols: fields.len(),
        data,
    })
}

/// Forward-difference Jacobian of [`residuals`] with respect to the free
/// parameters of `kind` (`Fc, φ, τ` then `Fm, Im`).
pub fn jacobian(kind: ProcessKind, params: &LatentParams, series: &[f64], grid: TimeGrid) -> Result<Jacobian, FitError> {
    let r0 = residuals(kind, params, series, grid)?;
    let p = params.with_kind(kind);
    jacobian_at(kind, &p, series, &r0, WaveOptions::default(), &Bounds::for_grid(grid)?)
}

/// Solve the symmetric positive-definite system `a x = b` (row-major `n×n`)
/// by Cholesky factorisation. `None` if not positive definite.
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn clip(p: &mut LatentParams, fields: &[Field], bounds: &Bounds) {
    for &f in fields {
        let (lo, hi) = bounds.of(f);
        f.set(p, f.get(p).clamp(lo, hi));
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Levenberg-Marquardt least squares. Accepted steps never increase SSE.
pub fn lm_fit(problem: &FitProblem) -> Result<FitResult, FitError> {
    problem.validate()?;
    let kind = problem.kind;
    let opts = problem.options;
    let fields = free_fields(kind);
    let n = fields.len();
    let t = problem.series.len();

    let mut p = problem.init;
    let mut r = vec![0.0; t];
    residuals_into(kind, &p, &problem.series, opts.wave, &mut r)?;
    let mut sse = sum_sq(&r);
    let mut lambda = opts.lambda_init;
    let mut trial = vec![0.0; t];
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    'outer: for iter in 1..=opts.max_iter {
        iterations = iter;
        let jac = jacobian_at(kind, &p, &problem.series, &r, opts.wave, &problem.bounds)?;
        // Normal equations of the residual Jacobian: H = JᵀJ, g = −Jᵀr.
        let mut h = vec![0.0; n * n];
        let mut g = vec![0.0; n];
        for i in 0..n {
            let ci = jac.column(i);
            g[i] = -ci.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
            for j in 0..=i {
                let v: f64 = ci.iter().zip(jac.column(j)).map(|(a, b)| a * b).sum();
                h[i * n + j] = v;
                h[j * n + i] = v;
            }
        }
        let max_diag = (0..n).map(|i| h[i * n + i]).fold(0.0, f64::max);
        let floor = (max_diag * 1e-12).max(f64::MIN_POSITIVE);
        let diag: Vec<f64> = (0..n).map(|i| h[i * n + i].max(floor)).collect();

        loop {
            let mut a = h.clone();
            for i in 0..n {
                a[i * n + i] += lambda * diag[i];
            }
            let Some(delta) = cholesky_solve(&a, &g, n) else {
                lambda *= opts.lambda_factor;
                if lambda >= opts.lambda_max {
                    stop = StopReason::DampingLimit;
                    break 'outer;
                }
                continue;
            };
            let mut q = p;
            for (&f, d) in fields.iter().zip(&delta) {
                f.set(&mut q, f.get(&p) + d);
            }
            clip(&mut q, fields, &problem.bounds);
            let step = norm(fields.iter().map(|f| f.get(&q) - f.get(&p)));
            let scale = norm(fields.iter().map(|f| f.get(&p)));
            if step < opts.step_tol * (scale + opts.step_tol) {
                stop = StopReason::StepTolerance;
                break 'outer;
            }
            residuals_into(kind, &q, &problem.series, opts.wave, &mut trial)?;
            let sse_new = sum_sq(&trial);
            if sse_new <= sse {
                let decrease = if sse > 0.0 { (sse - sse_new) / sse } else { 0.0 };
                p = q;
                std::mem::swap(&mut r, &mut trial);
                sse = sse_new;
                lambda /= opts.lambda_factor;
                if decrease < opts.sse_tol {
                    stop = StopReason::SseTolerance;
                    break 'outer;
                }
                break;
            }
            lambda *= opts.lambda_factor;
            if lambda >= opts.lambda_max {
                stop = StopReason::DampingLimit;
                log::debug!("lm_fit: damping reached {lambda:e} at iteration {iter} with sse {sse:e}");
                break 'outer;
            }
        }
    }

    p.phi = wrap_phase(p.phi);
    let sigma_hat = (sse / t as f64).sqrt();
    p.sigma = sigma_hat;
    Ok(FitResult {
        params: p,
        sse,
        converged: matches!(stop, StopReason::SseTolerance | StopReason::StepTolerance),
        iterations,
        sigma_hat,
        stop,
        wave: opts.wave,
    })
}

/// Fit many independent problems, in parallel when enabled.
pub fn fit_batch(problems: &[FitProblem]) -> Vec<Result<FitResult, FitError>> {
    exec::map_slice(problems, lm_fit)
}

/// The noiseless model at the fitted parameters.
pub fn fit_to_clean(result: &FitResult, grid: TimeGrid) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    model_into(result.params.kind, &result.params, result.wave, &mut out);
    out
}

#[derive(Serialize)]
struct FitRow {
    sample_id: u64,
    kind: ProcessKind,
    fc: f64,
    phi: f64,
    tau: f64,
    fm: f64,
    im: f64,
    sse: f64,
    converged: bool,
    iterations: usize,
    sigma_hat: f64,
}

/// Batch results as CSV: `sample_id, kind, fc, phi, tau, fm, im, sse,
/// converged, iterations, sigma_hat`.
pub fn write_fit_csv<W: Write>(w: W, results: &[(u64, FitResult)]) -> Result<(), FitError> {
    let mut out = csv::Writer::from_writer(w);
    for (id, r) in results {
        let p = &r.params;
        out.serialize(FitRow {
            sample_id: *id,
            kind: p.kind,
            fc: p.fc,
            phi: p.phi,
            tau: p.tau,
            fm: p.fm,
            im: p.im,
            sse: r.sse,
            converged: r.converged,
            iterations: r.iterations,
            sigma_hat: r.sigma_hat,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Phase difference folded into `[0, π]`.
pub fn phase_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, NoiseStream};
    use crate::signalgen::{generate, sample_latents, waveform};

    fn grid() -> TimeGrid {
        TimeGrid::new(256).unwrap()
    }

    fn ranges() -> LatentRanges {
        LatentRanges::for_grid(grid()).unwrap()
    }

    fn mono() -> LatentParams {
        LatentParams::mono(0.05, 1.0, 300.0, 0.0)
    }

    fn clean(p: &LatentParams) -> Vec<f64> {
        waveform(p.kind, p, grid(), WaveOptions::default())
    }

    #[test]
    fn residuals_of_clean_are_zero_and_offsets_pass_through() {
        let p = mono();
        let y = clean(&p);
        assert!(residuals(ProcessKind::Mono, &p, &y, grid()).unwrap().iter().all(|&r| r == 0.0));
        let shifted: Vec<f64> = y.iter().map(|v| v + 0.25).collect();
        for r in residuals(ProcessKind::Mono, &p, &shifted, grid()).unwrap() {
            assert!((r - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn residuals_match_generator() {
        let mut g = rng::seeded(3);
        for kind in ProcessKind::ALL {
            let p = sample_latents(kind, &ranges(), &mut g);
            let mut noise = NoiseStream::new(9);
            let pair = generate(grid(), &p, Some(&mut noise), WaveOptions::default(), &ranges()).unwrap();
            let r = residuals(kind, &p, &pair.noisy, grid()).unwrap();
            for ((ri, y), c) in r.iter().zip(&pair.noisy).zip(&pair.clean) {
                assert_eq!(*ri, y - c);
            }
        }
    }

    #[test]
    fn residuals_reject_out_of_bounds() {
        let mut p = mono();
        p.tau = -1.0;
        let err = residuals(ProcessKind::Mono, &p, &vec![0.0; 256], grid()).unwrap_err();
        assert!(matches!(err, FitError::OutOfBounds { field: "tau", .. }));
    }

    #[test]
    fn bounds_widening() {
        let b = Bounds::widened(&ranges(), 0.2);
        let r = ranges();
        assert!((b.fc.1 - (0.1 + 0.1 * (r.fc.1 - r.fc.0))).abs() < 1e-15);
        assert!(b.fc.0 < r.fc.0 && b.fc.0 > 0.0);
        // τ would cross zero: floor at half the original lower bound.
        assert_eq!(b.tau.0, 0.5 * r.tau.0);
        assert_eq!(b.im.0, 0.0);
        assert!(b.im.1 > 1.0);
    }

    #[test]
    fn jacobian_columns_match_central_differences() {
        let mut g = rng::seeded(17);
        for kind in ProcessKind::ALL {
            let mut p = sample_latents(kind, &ranges(), &mut g);
            if kind.is_modulated() {
                p.im = p.im.max(0.2);
            }
            let y: Vec<f64> = clean(&p).iter().enumerate().map(|(i, v)| v + 0.01 * (i as f64).cos()).collect();
            let jac = jacobian(kind, &p, &y, grid()).unwrap();
            assert_eq!(jac.cols, if kind.is_modulated() { 5 } else { 3 });
            for (c, &f) in free_fields(kind).iter().enumerate() {
                let v = f.get(&p);
                let h = 1e-6 * v.abs().max(1e-3);
                let (mut a, mut b) = (p, p);
                f.set(&mut a, v + h);
                f.set(&mut b, v - h);
                let mut ra = vec![0.0; 256];
                let mut rb = vec![0.0; 256];
                residuals_into(kind, &a, &y, WaveOptions::default(), &mut ra).unwrap();
                residuals_into(kind, &b, &y, WaveOptions::default(), &mut rb).unwrap();
                let central: Vec<f64> = ra.iter().zip(&rb).map(|(x, y)| (x - y) / (2.0 * h)).collect();
                let num = norm(jac.column(c).iter().zip(&central).map(|(x, y)| x - y));
                let den = norm(central.iter().copied());
                assert!(num <= 1e-4 * den, "{kind} column {}: rel {}", f.name(), num / den);
            }
        }
    }

    #[test]
    fn zero_modulation_column_is_finite() {
        let p = LatentParams::modulated(ProcessKind::Am, 0.05, 1.0, 300.0, 0.005, 0.0, 0.0);
        let y = clean(&p);
        let jac = jacobian(ProcessKind::Am, &p, &y, grid()).unwrap();
        assert!(jac.column(3).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn true_init_is_a_fixed_point() {
        let p = mono();
        let y = clean(&p);
        let res = lm_fit(&FitProblem::new(ProcessKind::Mono, y.clone(), p).unwrap()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.stop, StopReason::StepTolerance);
        assert_eq!((res.params.fc, res.params.phi, res.params.tau), (p.fc, p.phi, p.tau));
        assert_eq!(res.sse, 0.0);
        assert_eq!(fit_to_clean(&res, grid()), y);
    }

    /// Golden-section refinement of SSE over Fc with the other parameters
    /// held at truth: an independent estimate of the optimum.
    fn brute_force_fc(p: &LatentParams, y: &[f64]) -> f64 {
        let sse = |fc: f64| {
            let mut q = *p;
            q.fc = fc;
            let c = clean(&q);
            c.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        // Coarse grid, then golden section around the best cell.
        let (lo, hi) = (p.fc * 0.95, p.fc * 1.05);
        let steps = 2000;
        let best = (0..=steps)
            .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
            .min_by(|a, b| sse(*a).total_cmp(&sse(*b)))
            .unwrap();
        let cell = (hi - lo) / steps as f64;
        let (mut a, mut b) = (best - cell, best + cell);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if sse(c) < sse(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn perturbed_carrier_recovered() {
        let p = mono();
        let y = clean(&p);
        let oracle = brute_force_fc(&p, &y);
        assert!((oracle - p.fc).abs() <= 1e-6 * p.fc);
        let mut init = p;
        init.fc *= 1.02;
        let res = lm_fit(&FitProblem::new(ProcessKind::Mono, y, init).unwrap()).unwrap();
        assert!(res.converged, "{res:?}");
        assert!((res.params.fc - oracle).abs() <= 1e-6 * oracle);
        assert!((res.params.tau - p.tau).abs() <= 1e-6 * p.tau);
        assert!(phase_distance(res.params.phi, p.phi) <= 1e-6);
    }

    #[test]
    fn far_init_reports_local_minimum() {
        let r = ranges();
        let b = Bounds::for_grid(grid()).unwrap();
        let mut g = rng::seeded(8);
        let mut trapped = 0;
        for seed in 0..20 {
            let mut p = sample_latents(ProcessKind::Mono, &r, &mut g);
            p.sigma = 0.1;
            let mut noise = NoiseStream::new(seed);
            let pair = generate(grid(), &p, Some(&mut noise), WaveOptions::default(), &r).unwrap();
            let mut init = p;
            let mid = 0.5 * (r.fc.0 + r.fc.1);
            init.fc = if p.fc < mid { r.fc.1 } else { r.fc.0 };
            let res = lm_fit(&FitProblem::new(ProcessKind::Mono, pair.noisy.clone(), init).unwrap()).unwrap();
            assert!(res.iterations <= 200);
            assert!(b.check(&res.params).is_ok());
            // The reported SSE is the SSE of the reported parameters.
            let again = sum_sq(&residuals(ProcessKind::Mono, &res.params, &pair.noisy, grid()).unwrap());
            assert!((again - res.sse).abs() <= 1e-9 * res.sse.max(1.0));
            if res.sse / 256.0 > 10.0 * 0.01 {
                trapped += 1;
            }
        }
        assert!(trapped >= 5, "only {trapped}/20 far starts ended in a local minimum");
    }

    #[test]
    fn phase_wrapped_and_gauge_consistent() {
        let p = LatentParams::mono(0.05, 0.02, 300.0, 0.0);
        let y = clean(&p);
        let mut init = p;
        init.phi = 0.02 + TAU; // same waveform, different gauge
        let res = lm_fit(&FitProblem::new(ProcessKind::Mono, y.clone(), init).unwrap()).unwrap();
        assert!((0.0..TAU).contains(&res.params.phi));
        let rec = fit_to_clean(&res, grid());
        for (a, b) in rec.iter().zip(&y) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn accepted_steps_never_increase_sse() {
        let mut g = rng::seeded(44);
        for seed in 0..10 {
            let p = sample_latents(ProcessKind::Am, &ranges(), &mut g);
            let mut noise = NoiseStream::new(seed);
            let pair = generate(grid(), &p, Some(&mut noise), WaveOptions::default(), &ranges()).unwrap();
            let mut init = p;
            init.fc *= 1.01;
            let prob = FitProblem::new(ProcessKind::Am, pair.noisy.clone(), init).unwrap();
            let start = residuals(ProcessKind::Am, &init, &pair.noisy, grid()).map(|r| sum_sq(&r)).unwrap();
            let mut last = start;
            for iters in 1..6 {
                let mut limited = prob.clone();
                limited.options.max_iter = iters;
                let res = lm_fit(&limited).unwrap();
                assert!(res.sse <= last, "sse rose from {last} to {}", res.sse);
                last = res.sse;
            }
        }
    }

    #[test]
    fn noisy_true_init_hits_noise_floor() {
        let mut g = rng::seeded(5);
        let r = ranges();
        let mut inside = 0;
        for seed in 0..20 {
            let mut p = sample_latents(ProcessKind::Mono, &r, &mut g);
            p.sigma = 1.0;
            let mut noise = NoiseStream::new(100 + seed);
            let pair = generate(grid(), &p, Some(&mut noise), WaveOptions::default(), &r).unwrap();
            let res = lm_fit(&FitProblem::new(ProcessKind::Mono, pair.noisy, p).unwrap()).unwrap();
            let v = res.sse / 256.0;
            if (0.7..=1.3).contains(&v) {
                inside += 1;
            }
            assert!((res.sigma_hat - v.sqrt()).abs() < 1e-12);
        }
        assert!(inside >= 18, "{inside}/20");
    }

    #[test]
    fn csv_columns() {
        let p = mono();
        let res = lm_fit(&FitProblem::new(ProcessKind::Mono, clean(&p), p).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_fit_csv(&mut buf, &[(3, res)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,kind,fc,phi,tau,fm,im,sse,converged,iterations,sigma_hat\n3,mono,"));
    }

    #[test]
    fn invalid_problems() {
        let p = mono();
        let mut bad = p;
        bad.fc = 0.3;
        assert!(matches!(
            FitProblem::new(ProcessKind::Mono, clean(&p), bad),
            Err(FitError::OutOfBounds { field: "fc", .. })
        ));
        let mut y = clean(&p);
        y[3] = f64::NAN;
        assert!(matches!(FitProblem::new(ProcessKind::Mono, y, p), Err(FitError::NonFinite(_))));
    }
}
