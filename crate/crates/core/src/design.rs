//! Control design by entropy minimization.
//!
//! The objective is the regularized entropy of the model information matrix
//! at unit noise, `S = -Σ ln(λ_j + ε λ_max)`. Waveforms are optimized one
//! knot at a time: each knot is set to the best of `G` equally spaced angles
//! while the others are held fixed, sweeping over a seeded permutation of the
//! knots until a full sweep gains less than `tol`.
//!
//! Under the loss-only dissipator a single knot only changes the step
//! unitaries inside its support `[t_{k-2}, t_{k+2}]`. The evaluator caches
//! the step unitaries and prefix products of the incumbent waveform, so a
//! candidate costs one propagation over that window plus a rotation of the
//! information carried by every later bin. With `C` the propagator up to the
//! end of the window, later operators are `C† Y C` for fixed `Y`, and
//! conjugation by `C` acts on traceless coordinates as an orthogonal map `Φ`.
//! The later bins therefore contribute `Φ Γ Φᵀ` with `Γ` fixed per knot.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::dynamics::{bin_weights, conjugate_diagonal, observable_history, UnitaryStepper};
use crate::error::invalid;
use crate::estimator::{
    entropy_from_eigenvalues, numerical_rank, InformationMatrix, DEFAULT_EPS_REL, DEFAULT_RCOND,
};
use crate::linalg::cmul_to;
use crate::linalg::eigvalsh_real;
use crate::operator::SpinSystem;
use crate::physics::{DissipatorModel, PhysicsParams};
use crate::waveform::ControlWaveform;
use crate::{Result, C64};

/// Smallest accepted grid size.
pub const MIN_GRID: usize = 8;

/// Relative gain below which a candidate counts as a tie with the incumbent.
const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    /// Candidate angles per coordinate.
    pub grid_size: usize,
    pub max_sweeps: usize,
    /// Smallest entropy gain per sweep that keeps the search going (nats).
    pub tol: f64,
    pub seed: u64,
    pub eps_rel: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            grid_size: 32,
            max_sweeps: 20,
            tol: 1e-3,
            seed: 0,
            eps_rel: DEFAULT_EPS_REL,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < MIN_GRID {
            return Err(invalid!(
                "grid_size must be at least {MIN_GRID}, got {}",
                self.grid_size
            ));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(invalid!("tol must be positive, got {}", self.tol));
        }
        if !(self.eps_rel >= 0.0 && self.eps_rel.is_finite()) {
            return Err(invalid!(
                "eps_rel must be non-negative, got {}",
                self.eps_rel
            ));
        }
        Ok(())
    }

    /// Grid angles `2π g / G`, ascending.
    pub fn grid(&self) -> Vec<f64> {
        (0..self.grid_size)
            .map(|g| TAU * g as f64 / self.grid_size as f64)
            .collect()
    }
}

/// Objective value and rank after one sweep; sweep 0 is the initial waveform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRecord {
    pub run: usize,
    pub sweep: usize,
    pub entropy: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignResult {
    /// One waveform per run.
    pub waveforms: Vec<ControlWaveform>,
    pub trace: Vec<SweepRecord>,
    /// Rank of the combined information of all runs (and prior).
    pub final_rank: usize,
    /// Candidate evaluations performed by the searches.
    pub evaluations: usize,
    /// Whether every run stopped on the tolerance rather than `max_sweeps`.
    pub converged: bool,
}

impl DesignResult {
    /// Entropy after each sweep, all runs in order.
    pub fn entropy_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.entropy).collect()
    }

    pub fn final_entropy(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.entropy)
    }
}

/// Entropy of the unit-noise model information of `w`, plus `prior`.
pub fn design_objective(
    w: &ControlWaveform,
    p: &PhysicsParams,
    prior: Option<&InformationMatrix>,
    eps_rel: f64,
) -> Result<f64> {
    let info = model_information(w, p, prior)?;
    Ok(entropy_from_eigenvalues(
        info.eigenvalues().as_slice(),
        eps_rel,
    ))
}

/// Unit-noise model information of `w`, plus `prior`.
pub fn model_information(
    w: &ControlWaveform,
    p: &PhysicsParams,
    prior: Option<&InformationMatrix>,
) -> Result<InformationMatrix> {
    let hist = observable_history(w, p)?;
    let mut info = InformationMatrix::from_model(&hist, 1.0);
    if let Some(prior) = prior {
        info.merge(prior)?;
    }
    Ok(info)
}

/// Waveform with `n` angles drawn uniformly from `[0, 2π)`.
pub fn random_waveform(n: usize, duration: f64, seed: u64) -> Result<ControlWaveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
    ControlWaveform::new(angles, duration)
}

/// Coordinate-wise global search from `init`.
pub fn coordinate_search(
    init: &ControlWaveform,
    p: &PhysicsParams,
    cfg: &SearchConfig,
    prior: Option<&InformationMatrix>,
) -> Result<DesignResult> {
    cfg.validate()?;
    p.validate()?;
    let mut engine = Engine::new(init.clone(), p, prior)?;
    let mut trace = Vec::new();
    let (evaluations, converged) = run_search(&mut engine, cfg, 0, &mut trace, &mut |_| {})?;
    let final_rank = trace.last().map_or(0, |r| r.rank);
    Ok(DesignResult {
        waveforms: alloc::vec![engine.waveform().clone()],
        trace,
        final_rank,
        evaluations,
        converged,
    })
}

/// Designs `n_runs` waveforms in turn, each one searched against the model
/// information of the runs before it. Run `r` starts from a random waveform
/// seeded with `cfg.seed + r`.
pub fn greedy_multirun(
    n_runs: usize,
    n_knots: usize,
    p: &PhysicsParams,
    cfg: &SearchConfig,
) -> Result<DesignResult> {
    greedy_multirun_observed(n_runs, n_knots, p, cfg, &mut |_| {})
}

/// [`greedy_multirun`] that reports every sweep as it completes.
pub fn greedy_multirun_observed(
    n_runs: usize,
    n_knots: usize,
    p: &PhysicsParams,
    cfg: &SearchConfig,
    observe: &mut dyn FnMut(&SweepRecord),
) -> Result<DesignResult> {
    if n_runs == 0 {
        return Err(invalid!("n_runs must be at least 1"));
    }
    cfg.validate()?;
    p.validate()?;
    let mut prior: Option<InformationMatrix> = None;
    let mut out = DesignResult {
        waveforms: Vec::new(),
        trace: Vec::new(),
        final_rank: 0,
        evaluations: 0,
        converged: true,
    };
    for run in 0..n_runs {
        let run_cfg = SearchConfig {
            seed: cfg.seed.wrapping_add(run as u64),
            ..cfg.clone()
        };
        let init = random_waveform(n_knots, p.duration, run_cfg.seed)?;
        let mut engine = Engine::new(init, p, prior.as_ref())?;
        let (evals, converged) = run_search(&mut engine, &run_cfg, run, &mut out.trace, observe)?;
        out.evaluations += evals;
        out.converged &= converged;
        let w = engine.waveform().clone();
        prior = Some(model_information(&w, p, prior.as_ref())?);
        out.waveforms.push(w);
    }
    let info = prior.expect("at least one run");
    out.final_rank = numerical_rank(info.eigenvalues().as_slice(), DEFAULT_RCOND);
    Ok(out)
}

fn run_search(
    engine: &mut Engine<'_>,
    cfg: &SearchConfig,
    run: usize,
    trace: &mut Vec<SweepRecord>,
    observe: &mut dyn FnMut(&SweepRecord),
) -> Result<(usize, bool)> {
    let grid = cfg.grid();
    let n = engine.waveform().n_knots();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let (mut current, rank) = engine.incumbent(cfg.eps_rel);
    trace.push(SweepRecord {
        run,
        sweep: 0,
        entropy: current,
        rank,
    });
    observe(&trace[trace.len() - 1]);
    let mut evaluations = 0;
    for sweep in 1..=cfg.max_sweeps {
        let start = current;
        order.shuffle(&mut rng);
        for &k in &order {
            let values = engine.scan(k, &grid, cfg.eps_rel)?;
            evaluations += values.len();
            let mut best: Option<(usize, f64)> = None;
            let mut best_value = current;
            for (g, &v) in values.iter().enumerate() {
                if v < best_value - TIE_TOL * (1.0 + best_value.abs()) {
                    best = Some((g, v));
                    best_value = v;
                }
            }
            if let Some((g, _)) = best {
                engine.accept(k, grid[g])?;
                current = engine.incumbent(cfg.eps_rel).0;
            }
        }
        let (entropy, rank) = engine.incumbent(cfg.eps_rel);
        current = entropy;
        trace.push(SweepRecord {
            run,
            sweep,
            entropy,
            rank,
        });
        observe(&trace[trace.len() - 1]);
        if start - current < cfg.tol {
            return Ok((evaluations, true));
        }
    }
    Ok((evaluations, false))
}

/// Objective evaluation strategy.
enum Engine<'a> {
    Direct {
        w: ControlWaveform,
        p: &'a PhysicsParams,
        prior: Option<&'a InformationMatrix>,
        info: InformationMatrix,
    },
    Unitary(UnitaryModel<'a>),
}

impl<'a> Engine<'a> {
    fn new(
        w: ControlWaveform,
        p: &'a PhysicsParams,
        prior: Option<&'a InformationMatrix>,
    ) -> Result<Self> {
        if let Some(pr) = prior {
            if pr.dim() != p.sys.n_traceless() {
                return Err(invalid!(
                    "prior dimension {} does not match spin system",
                    pr.dim()
                ));
            }
        }
        if (w.duration() - p.duration).abs() > 1e-9 * p.duration {
            return Err(invalid!(
                "waveform duration {} does not match record duration {}",
                w.duration(),
                p.duration
            ));
        }
        Ok(match p.dissipator {
            DissipatorModel::LossOnly => Engine::Unitary(UnitaryModel::new(w, p, prior)?),
            DissipatorModel::IsotropicPumping { .. } => {
                let info = model_information(&w, p, prior)?;
                Engine::Direct { w, p, prior, info }
            }
        })
    }

    fn waveform(&self) -> &ControlWaveform {
        match self {
            Engine::Direct { w, .. } => w,
            Engine::Unitary(m) => &m.w,
        }
    }

    /// Objective and rank of the incumbent.
    fn incumbent(&self, eps_rel: f64) -> (f64, usize) {
        let r = match self {
            Engine::Direct { info, .. } => &info.r,
            Engine::Unitary(m) => &m.total,
        };
        let vals = eigvalsh_real(r);
        (
            entropy_from_eigenvalues(vals.as_slice(), eps_rel),
            numerical_rank(vals.as_slice(), DEFAULT_RCOND),
        )
    }

    /// Objective with knot `k` set to each of `angles`.
    fn scan(&mut self, k: usize, angles: &[f64], eps_rel: f64) -> Result<Vec<f64>> {
        match self {
            Engine::Direct { w, p, prior, .. } => angles
                .iter()
                .map(|&a| design_objective(&w.with_knot(k, a), p, *prior, eps_rel))
                .collect(),
            Engine::Unitary(m) => m.scan(k, angles, eps_rel),
        }
    }

    fn accept(&mut self, k: usize, angle: f64) -> Result<()> {
        match self {
            Engine::Direct { w, p, prior, info } => {
                *w = w.with_knot(k, angle);
                *info = model_information(w, p, *prior)?;
                Ok(())
            }
            Engine::Unitary(m) => m.accept(k, angle),
        }
    }
}

/// Cached loss-only propagation of the incumbent waveform, per background
/// node.
struct UnitaryModel<'a> {
    w: ControlWaveform,
    p: &'a PhysicsParams,
    stepper: UnitaryStepper,
    nodes: Vec<(f64, f64)>,
    fz_diag: Vec<f64>,
    bin_w: Vec<f64>,
    /// Step unitaries `V_j` over `[t_j, t_{j+1}]`, per node.
    steps: Vec<Vec<DMatrix<C64>>>,
    /// Prefix products `U(t_j)`, per node.
    prefix: Vec<Vec<DMatrix<C64>>>,
    /// Traceless coordinates of every bin, `K × n`.
    rows: DMatrix<f64>,
    prior: DMatrix<f64>,
    /// Prior plus `rowsᵀ rows`.
    total: DMatrix<f64>,
}

/// Scratch for conjugations and coordinate extraction.
struct Scratch {
    scaled: DMatrix<C64>,
    o: DMatrix<C64>,
    next: DMatrix<C64>,
    full: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            scaled: DMatrix::zeros(d, d),
            o: DMatrix::zeros(d, d),
            next: DMatrix::zeros(d, d),
            full: alloc::vec![0.0; d * d],
        }
    }

    /// Traceless coordinates of `scale · U† Fz U`, left in `full[1..]`.
    fn sample(&mut self, sys: &SpinSystem, u: &DMatrix<C64>, fz: &[f64], scale: f64) -> &[f64] {
        conjugate_diagonal(u, fz, scale, &mut self.scaled, &mut self.o);
        sys.gell_mann_coords_into(&self.o, &mut self.full);
        &self.full[1..]
    }
}

/// Adds `c · x` to row `b` of `out`.
fn add_row(out: &mut DMatrix<f64>, b: usize, c: f64, x: &[f64]) {
    for (j, v) in x.iter().enumerate() {
        out[(b, j)] += c * v;
    }
}

impl<'a> UnitaryModel<'a> {
    fn new(
        w: ControlWaveform,
        p: &'a PhysicsParams,
        prior: Option<&InformationMatrix>,
    ) -> Result<Self> {
        let sys = &p.sys;
        let d = sys.dim();
        let n = sys.n_traceless();
        let prior = prior.map_or_else(|| DMatrix::zeros(n, n), |pr| pr.r.clone());
        let nodes = p.background_nodes();
        let mut m = Self {
            stepper: UnitaryStepper::new(p),
            fz_diag: (0..d).map(|i| sys.fz()[(i, i)].re).collect(),
            bin_w: bin_weights(p.steps_per_bin()),
            steps: alloc::vec![Vec::new(); nodes.len()],
            prefix: alloc::vec![Vec::new(); nodes.len()],
            rows: DMatrix::zeros(p.n_bins(), n),
            total: prior.clone(),
            prior,
            nodes,
            w,
            p,
        };
        let n_steps = p.n_steps();
        for q in 0..m.nodes.len() {
            let b0 = m.nodes[q].0;
            let mut steps = alloc::vec![DMatrix::zeros(d, d); n_steps];
            for (j, v) in steps.iter_mut().enumerate() {
                m.stepper
                    .step(&m.w, b0, j as f64 * p.dt_fine, p.dt_fine, v)?;
            }
            m.steps[q] = steps;
        }
        m.refresh_from(0);
        Ok(m)
    }

    /// Rebuilds prefix products from step `j0` on, then every bin row and
    /// the total information.
    fn refresh_from(&mut self, j0: usize) {
        let d = self.p.sys.dim();
        let n_steps = self.p.n_steps();
        for q in 0..self.nodes.len() {
            let prefix = &mut self.prefix[q];
            if prefix.is_empty() {
                prefix.push(DMatrix::identity(d, d));
            }
            prefix.truncate(j0 + 1);
            for j in j0..n_steps {
                let mut next = DMatrix::zeros(d, d);
                cmul_to(&self.steps[q][j], &prefix[j], &mut next);
                prefix.push(next);
            }
        }
        let p = self.p;
        let (s, n_bins) = (p.steps_per_bin(), p.n_bins());
        let mut scratch = Scratch::new(d);
        self.rows.fill(0.0);
        for (q, &(_, weight)) in self.nodes.iter().enumerate() {
            for j in 0..=n_steps {
                let scale = (-p.gamma * j as f64 * p.dt_fine).exp();
                let x = scratch.sample(&p.sys, &self.prefix[q][j], &self.fz_diag, scale);
                let (bin, pos) = (j / s, j % s);
                if bin < n_bins {
                    add_row(&mut self.rows, bin, weight * self.bin_w[pos], x);
                }
                if pos == 0 && bin > 0 {
                    add_row(&mut self.rows, bin - 1, weight * self.bin_w[s], x);
                }
            }
        }
        self.total = &self.prior + self.rows.tr_mul(&self.rows);
    }

    /// Bin range `[lo, hi)` whose operators depend on knot `k`.
    fn window(&self, k: usize) -> (usize, usize) {
        let (t0, t1) = self.w.support_of_knot(k);
        let dt = self.p.dt_coarse;
        let n_bins = self.p.n_bins();
        let lo = ((t0 / dt + 1e-9).floor() as usize).min(n_bins);
        let hi = ((t1 / dt - 1e-9).ceil() as usize).clamp(lo, n_bins);
        (lo, hi)
    }

    fn scan(&mut self, k: usize, angles: &[f64], eps_rel: f64) -> Result<Vec<f64>> {
        let p = self.p;
        let sys = &p.sys;
        let d = sys.dim();
        let n = sys.n_traceless();
        let nq = self.nodes.len();
        let (s, n_bins) = (p.steps_per_bin(), p.n_bins());
        let (lo, hi) = self.window(k);
        let (j_lo, j_hi) = (lo * s, hi * s);

        let early = self.rows.rows(0, lo);
        let fixed = &self.prior + early.tr_mul(&early);

        // Later bins in the frame of the window end, all nodes side by side.
        let n_late = n_bins - hi;
        let mut late = DMatrix::<f64>::zeros(n_late, n * nq);
        let mut scratch = Scratch::new(d);
        for q in 0..nq {
            let mut l = DMatrix::<C64>::identity(d, d);
            let mut block = DMatrix::<f64>::zeros(n_late, n);
            for j in j_hi..=p.n_steps() {
                let scale = (-p.gamma * j as f64 * p.dt_fine).exp();
                let x = scratch.sample(sys, &l, &self.fz_diag, scale);
                let (bin, pos) = (j / s, j % s);
                if bin < n_bins {
                    add_row(&mut block, bin - hi, self.bin_w[pos], x);
                }
                if pos == 0 && bin > hi {
                    add_row(&mut block, bin - 1 - hi, self.bin_w[s], x);
                }
                if j < p.n_steps() {
                    cmul_to(&self.steps[q][j], &l, &mut scratch.next);
                    core::mem::swap(&mut l, &mut scratch.next);
                }
            }
            late.columns_mut(q * n, n).copy_from(&block);
        }
        let gram = late.tr_mul(&late);

        let mut out = Vec::with_capacity(angles.len());
        let mut window = DMatrix::<f64>::zeros(hi - lo, n);
        let mut phi = DMatrix::<f64>::zeros(n, n * nq);
        let mut v = DMatrix::<C64>::zeros(d, d);
        for &angle in angles {
            let w = self.w.with_knot(k, angle);
            window.fill(0.0);
            for (q, &(b0, weight)) in self.nodes.iter().enumerate() {
                let mut u = self.prefix[q][j_lo].clone();
                for j in j_lo..=j_hi {
                    let scale = (-p.gamma * j as f64 * p.dt_fine).exp();
                    let x = scratch.sample(sys, &u, &self.fz_diag, scale);
                    let (bin, pos) = (j / s, j % s);
                    if bin < hi {
                        add_row(&mut window, bin - lo, weight * self.bin_w[pos], x);
                    }
                    if pos == 0 && bin > lo {
                        add_row(&mut window, bin - 1 - lo, weight * self.bin_w[s], x);
                    }
                    if j < j_hi {
                        self.stepper
                            .step(&w, b0, j as f64 * p.dt_fine, p.dt_fine, &mut v)?;
                        cmul_to(&v, &u, &mut scratch.next);
                        core::mem::swap(&mut u, &mut scratch.next);
                    }
                }
                conjugation_map(
                    sys,
                    &u,
                    weight,
                    &mut phi.columns_mut(q * n, n),
                    &mut scratch,
                );
            }
            let r = &fixed + window.tr_mul(&window) + &phi * &gram * phi.transpose();
            out.push(entropy_from_eigenvalues(
                eigvalsh_real(&r).as_slice(),
                eps_rel,
            ));
        }
        Ok(out)
    }

    fn accept(&mut self, k: usize, angle: f64) -> Result<()> {
        self.w = self.w.with_knot(k, angle);
        let s = self.p.steps_per_bin();
        let (lo, hi) = self.window(k);
        for q in 0..self.nodes.len() {
            let b0 = self.nodes[q].0;
            for j in lo * s..hi * s {
                self.stepper.step(
                    &self.w,
                    b0,
                    j as f64 * self.p.dt_fine,
                    self.p.dt_fine,
                    &mut self.steps[q][j],
                )?;
            }
        }
        self.refresh_from(lo * s);
        Ok(())
    }
}

/// Writes `weight · Φ` into `out`, where `Φ` maps traceless coordinates of
/// `X` to those of `C† X C`.
fn conjugation_map(
    sys: &SpinSystem,
    c: &DMatrix<C64>,
    weight: f64,
    out: &mut nalgebra::DMatrixViewMut<'_, f64>,
    scratch: &mut Scratch,
) {
    for (m, e) in sys.basis().iter().enumerate() {
        cmul_to(e, c, &mut scratch.scaled);
        c.ad_mul_to(&scratch.scaled, &mut scratch.o);
        sys.gell_mann_coords_into(&scratch.o, &mut scratch.full);
        for (r, v) in scratch.full[1..].iter().enumerate() {
            out[(r, m)] = weight * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::make_spin_system;
    use crate::physics::BETA_D1;
    use approx::assert_abs_diff_eq;

    fn small(f: f64, beta: f64) -> PhysicsParams {
        let mut p = PhysicsParams::cesium(make_spin_system(f).unwrap(), beta);
        p.duration = 2e-4;
        p
    }

    #[test]
    fn incremental_scan_matches_direct_objective() {
        let p = small(1.5, BETA_D1);
        let w = random_waveform(10, p.duration, 4).unwrap();
        let mut model = UnitaryModel::new(w.clone(), &p, None).unwrap();
        let angles = [0.0, 1.3, 4.0];
        for k in [0, 1, 4, 8, 9] {
            let fast = model.scan(k, &angles, 1e-9).unwrap();
            for (&a, v) in angles.iter().zip(fast) {
                let direct = design_objective(&w.with_knot(k, a), &p, None, 1e-9).unwrap();
                assert_abs_diff_eq!(v, direct, epsilon = 1e-8 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn accepted_moves_keep_the_cache_exact() {
        let p = small(1.0, BETA_D1);
        let w = random_waveform(8, p.duration, 11).unwrap();
        let prior =
            model_information(&random_waveform(8, p.duration, 12).unwrap(), &p, None).unwrap();
        let mut model = UnitaryModel::new(w.clone(), &p, Some(&prior)).unwrap();
        model.accept(3, 2.2).unwrap();
        model.accept(0, 5.0).unwrap();
        let direct =
            model_information(&w.with_knot(3, 2.2).with_knot(0, 5.0), &p, Some(&prior)).unwrap();
        assert!((&model.total - &direct.r).norm() < 1e-10 * direct.r.norm());
    }

    #[test]
    fn direct_engine_is_used_for_pumping() {
        let mut p = small(0.5, BETA_D1);
        p.duration = 4e-5;
        p.dissipator = DissipatorModel::isotropic();
        let cfg = SearchConfig {
            grid_size: 8,
            max_sweeps: 1,
            ..SearchConfig::default()
        };
        let w = random_waveform(4, p.duration, 1).unwrap();
        let res = coordinate_search(&w, &p, &cfg, None).unwrap();
        assert_eq!(res.evaluations, 4 * 8);
        let trace = res.entropy_trace();
        assert!(trace[1] <= trace[0]);
    }

    fn tiny() -> PhysicsParams {
        let mut p = small(1.0, BETA_D1);
        p.duration = 1.2e-4;
        p
    }

    fn tiny_cfg(seed: u64) -> SearchConfig {
        SearchConfig {
            grid_size: 8,
            max_sweeps: 3,
            seed,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn search_trace_is_monotone_and_bounded() {
        let p = tiny();
        let init = random_waveform(6, p.duration, 3).unwrap();
        let cfg = tiny_cfg(3);
        let res = coordinate_search(&init, &p, &cfg, None).unwrap();
        let trace = res.entropy_trace();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]), "{trace:?}");
        let sweeps = trace.len() - 1;
        assert_eq!(res.evaluations, sweeps * 6 * 8);
        assert!(res.evaluations <= cfg.max_sweeps * 6 * cfg.grid_size);
        let direct = design_objective(&res.waveforms[0], &p, None, cfg.eps_rel).unwrap();
        assert_abs_diff_eq!(direct, res.final_entropy(), epsilon = 1e-8 * direct.abs());
    }

    #[test]
    fn search_is_deterministic() {
        let p = tiny();
        let init = random_waveform(6, p.duration, 5).unwrap();
        let a = coordinate_search(&init, &p, &tiny_cfg(9), None).unwrap();
        let b = coordinate_search(&init, &p, &tiny_cfg(9), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_stationary_start_ends_after_one_unchanged_sweep() {
        let p = tiny();
        let init = random_waveform(5, p.duration, 8).unwrap();
        let settle = SearchConfig {
            tol: f64::MIN_POSITIVE,
            max_sweeps: 200,
            ..tiny_cfg(2)
        };
        let stationary = coordinate_search(&init, &p, &settle, None).unwrap();
        assert!(stationary.converged);
        let w = &stationary.waveforms[0];
        let again = coordinate_search(w, &p, &tiny_cfg(4), None).unwrap();
        assert_eq!(again.trace.len(), 2);
        assert_eq!(&again.waveforms[0], w);
        assert_eq!(again.trace[0].entropy, again.trace[1].entropy);
    }

    #[test]
    fn rotation_about_z_is_a_symmetry_only_without_the_nonlinearity() {
        let mut p = small(1.5, 0.0);
        p.duration = 1.2e-4;
        let w = random_waveform(7, p.duration, 21).unwrap();
        let base = design_objective(&w, &p, None, 1e-9).unwrap();
        let turned = design_objective(&w.rotated(0.7), &p, None, 1e-9).unwrap();
        assert_abs_diff_eq!(base, turned, epsilon = 1e-8 * base.abs().max(1.0));

        p.beta = BETA_D1;
        let base = design_objective(&w, &p, None, 1e-9).unwrap();
        let turned = design_objective(&w.rotated(0.7), &p, None, 1e-9).unwrap();
        assert!((base - turned).abs() > 1e-6, "{base} vs {turned}");
    }

    #[test]
    fn fixed_linear_field_stays_inside_the_vector_operators() {
        // Fz precesses in the y-z plane; the Fx weight is odd in the
        // background shift and cancels over the symmetric nodes.
        let mut p = PhysicsParams::cesium(make_spin_system(3.0).unwrap(), 0.0);
        p.gamma = 0.0;
        let w = ControlWaveform::constant(6, 0.0, p.duration).unwrap();
        let info = model_information(&w, &p, None).unwrap();
        let vals = info.eigenvalues();
        assert_eq!(numerical_rank(vals.as_slice(), DEFAULT_RCOND), 2);
        let lmax = vals[47];
        let top: f64 = vals.iter().skip(46).map(|l| (l + 1e-9 * lmax).ln()).sum();
        let floor = -46.0 * (1e-9 * lmax).ln() - top;
        let s = design_objective(&w, &p, None, 1e-9).unwrap();
        assert_abs_diff_eq!(s, floor, epsilon = 1e-6);
    }

    #[test]
    fn linear_dynamics_span_at_most_three_directions() {
        let mut p = small(3.0, 0.0);
        p.duration = 4e-4;
        for seed in 0..3 {
            let w = random_waveform(8, p.duration, seed).unwrap();
            let info = model_information(&w, &p, None).unwrap();
            assert_eq!(
                numerical_rank(info.eigenvalues().as_slice(), DEFAULT_RCOND),
                3
            );
        }
    }

    #[test]
    fn more_prior_information_never_raises_the_objective() {
        let p = tiny();
        let w = random_waveform(6, p.duration, 30).unwrap();
        let mut prior: Option<InformationMatrix> = None;
        let mut last = design_objective(&w, &p, None, 1e-9).unwrap();
        for seed in 31..35 {
            prior = Some(
                model_information(
                    &random_waveform(6, p.duration, seed).unwrap(),
                    &p,
                    prior.as_ref(),
                )
                .unwrap(),
            );
            let s = design_objective(&w, &p, prior.as_ref(), 1e-9).unwrap();
            assert!(s <= last + 1e-12 * last.abs(), "{s} > {last}");
            last = s;
        }
    }

    #[test]
    fn single_greedy_run_is_a_plain_search() {
        let p = tiny();
        let cfg = tiny_cfg(12);
        let greedy = greedy_multirun(1, 6, &p, &cfg).unwrap();
        let plain = coordinate_search(&random_waveform(6, p.duration, 12).unwrap(), &p, &cfg, None)
            .unwrap();
        assert_eq!(greedy.waveforms, plain.waveforms);
        assert_eq!(greedy.trace, plain.trace);
        assert_eq!(greedy.final_rank, plain.final_rank);
    }

    #[test]
    fn greedy_runs_accumulate_rank() {
        let mut p = tiny();
        p.beta = 0.5;
        let res = greedy_multirun(
            3,
            5,
            &p,
            &SearchConfig {
                max_sweeps: 1,
                ..tiny_cfg(40)
            },
        )
        .unwrap();
        assert_eq!(res.waveforms.len(), 3);
        let mut info: Option<InformationMatrix> = None;
        let mut last_rank = 0;
        for w in &res.waveforms {
            info = Some(model_information(w, &p, info.as_ref()).unwrap());
            let rank = numerical_rank(
                info.as_ref().unwrap().eigenvalues().as_slice(),
                DEFAULT_RCOND,
            );
            assert!(rank >= last_rank);
            last_rank = rank;
        }
        assert_eq!(last_rank, res.final_rank);
        let runs: Vec<usize> = res.trace.iter().map(|r| r.run).collect();
        assert!(runs.windows(2).all(|w| w[1] >= w[0]) && runs[runs.len() - 1] == 2);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig {
            grid_size: 7,
            ..SearchConfig::default()
        }
        .validate()
        .is_err());
        assert!(SearchConfig {
            tol: 0.0,
            ..SearchConfig::default()
        }
        .validate()
        .is_err());
        SearchConfig::default().validate().unwrap();
    }
}
