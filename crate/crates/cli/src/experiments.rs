//! The numerical experiments behind each subcommand.
//!
//! Seeds: realization `i`, run `r` draws its record noise from
//! `base_seed + i·n_runs + r`. The same draws are reused at every SNR and
//! every prefix of the run list, so curves along either axis compare like
//! with like. The control-error factor for that realization and run comes
//! from the same seed on a separate ChaCha stream.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use weaktomo_core::design::{greedy_multirun_observed, DesignResult};
use weaktomo_core::dynamics::{observable_history, ObservableHistory};
use weaktomo_core::estimator::{reconstruct, RunData, DEFAULT_EPS_REL, DEFAULT_RCOND};
use weaktomo_core::measurement::{apply_filter, simulate_record, MeasurementRecord, SnrSpec};
use weaktomo_core::nalgebra::DVector;
use weaktomo_core::operator::HermitianOperator;
use weaktomo_core::physics::PhysicsParams;
use weaktomo_core::waveform::ControlWaveform;
use weaktomo_core::C64;

use crate::config::{ControlConfig, ExperimentConfig, Snr, StatePrep};
use crate::error::{CliError, Result};
use crate::formats::{
    self, DesignLogRow, RecordSidecar, ResultRow, SensitivityRow, SweepRow, DESIGN_LOG_HEADER,
    RESULT_HEADER, SENSITIVITY_HEADER, SWEEP_HEADER,
};

/// Prepared initial state and the pure reference its fidelity is scored
/// against.
#[derive(Clone, Debug)]
pub struct PreparedState {
    pub rho: HermitianOperator,
    pub psi: DVector<C64>,
}

/// Builds the named state, or loads a pure density matrix from file.
pub fn prepare_state(prep: &StatePrep, d: usize) -> Result<PreparedState> {
    let mut psi = DVector::<C64>::zeros(d);
    match prep {
        StatePrep::Cat => {
            let a = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
            psi[0] = a;
            psi[d - 1] += a;
            if d == 1 {
                psi[0] = C64::new(1.0, 0.0);
            }
        }
        StatePrep::Stretched => psi[0] = C64::new(1.0, 0.0),
        StatePrep::MatrixFile(path) => {
            let m = formats::read_matrix(path)?;
            if m.nrows() != d {
                return Err(CliError::Config(format!(
                    "state matrix is {0}×{0}, spin needs {d}×{d}",
                    m.nrows()
                )));
            }
            let rho = HermitianOperator::new(m)?;
            if !rho.is_density_matrix(1e-9) {
                return Err(CliError::Config(
                    "state matrix is not a density matrix".into(),
                ));
            }
            let eig = weaktomo_core::linalg::eigh(rho.matrix());
            let top = eig.0.len() - 1;
            if (eig.0[top] - 1.0).abs() > 1e-6 {
                return Err(CliError::Config(
                    "fidelity needs a pure reference state".into(),
                ));
            }
            return Ok(PreparedState {
                psi: eig.1.column(top).into_owned(),
                rho,
            });
        }
    }
    Ok(PreparedState {
        rho: HermitianOperator::pure_state(&psi),
        psi,
    })
}

/// A parsed, validated experiment plus its derived physics and state.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub params: PhysicsParams,
    pub state: PreparedState,
}

/// One designed or loaded run: waveform plus raw and filtered histories.
struct RunModel {
    raw: ObservableHistory,
    filtered: ObservableHistory,
}

/// One reconstruction outcome inside a Monte-Carlo batch.
#[derive(Clone, Copy, Debug)]
struct Outcome {
    fidelity: f64,
    entropy: f64,
    rank: usize,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let params = cfg.physics.to_params()?;
        let state = prepare_state(&cfg.state_prep, params.sys.dim())?;
        Ok(Self { cfg, params, state })
    }

    pub fn output_dir(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn waveform_path(&self, run: usize) -> PathBuf {
        self.output_dir().join(format!("waveform_run{run}.txt"))
    }

    /// Runs the greedy multi-run design and writes one waveform file and one
    /// design log per run.
    pub fn design(&self) -> Result<DesignResult> {
        let ControlConfig::Search(search) = &self.cfg.control else {
            return Err(CliError::Config(
                "design needs a `search` control section".into(),
            ));
        };
        let scfg = search.to_config(self.cfg.base_seed);
        info!(
            "designing {} run(s) of {} knots (G = {}, up to {} sweeps)",
            self.cfg.n_runs, search.n_knots, scfg.grid_size, scfg.max_sweeps
        );
        let mut progress = |r: &weaktomo_core::design::SweepRecord| {
            info!(
                "run {} sweep {}: entropy {:.6}, rank {}",
                r.run, r.sweep, r.entropy, r.rank
            );
        };
        let result = greedy_multirun_observed(
            self.cfg.n_runs,
            search.n_knots,
            &self.params,
            &scfg,
            &mut progress,
        )?;
        for (run, w) in result.waveforms.iter().enumerate() {
            formats::write_waveform(&self.waveform_path(run), w)?;
            let log: Vec<DesignLogRow> = result
                .trace
                .iter()
                .filter(|r| r.run == run)
                .map(|r| DesignLogRow {
                    sweep: r.sweep,
                    entropy: r.entropy,
                    rank: r.rank,
                })
                .collect();
            let path = self.output_dir().join(format!("design_log_run{run}.csv"));
            formats::write_csv(&path, &log, &DESIGN_LOG_HEADER)?;
        }
        info!(
            "design finished: rank {}, entropy {:.6}",
            result.final_rank,
            result.final_entropy()
        );
        Ok(result)
    }

    /// The `n_runs` waveforms: from the config's files, or the ones `design`
    /// wrote to the output directory.
    pub fn waveforms(&self) -> Result<Vec<ControlWaveform>> {
        let paths: Vec<PathBuf> = match &self.cfg.control {
            ControlConfig::WaveformFiles(files) => files[..self.cfg.n_runs].to_vec(),
            ControlConfig::Search(_) => (0..self.cfg.n_runs)
                .map(|r| self.waveform_path(r))
                .collect(),
        };
        paths
            .iter()
            .map(|p| {
                if !p.is_file() {
                    return Err(CliError::Config(format!(
                        "waveform {} is missing; run `design` first or list waveform_files",
                        p.display()
                    )));
                }
                formats::read_waveform(p)
            })
            .collect()
    }

    fn models(&self, waveforms: &[ControlWaveform], p: &PhysicsParams) -> Result<Vec<RunModel>> {
        waveforms
            .par_iter()
            .map(|w| {
                let raw = observable_history(w, p)?;
                let filtered = apply_filter(&raw, self.cfg.filter_window)?;
                Ok(RunModel { raw, filtered })
            })
            .collect()
    }

    fn noise_seed(&self, realization: usize, run: usize) -> u64 {
        let index = (realization * self.cfg.n_runs + run) as u64;
        self.cfg.base_seed.wrapping_add(index)
    }

    /// Standard normal control-error draw for one realization and run.
    fn error_draw(&self, realization: usize, run: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed(realization, run));
        rng.set_stream(1);
        StandardNormal.sample(&mut rng)
    }

    fn sorted_snrs(&self) -> Vec<Snr> {
        let mut s = self.cfg.snr_list.clone();
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
        s.dedup();
        s
    }

    /// Reconstructs from the first `k` runs for every `k`.
    fn reconstruct_prefixes(
        &self,
        models: &[RunModel],
        records: &[MeasurementRecord],
    ) -> Vec<Option<Outcome>> {
        (1..=records.len())
            .map(|k| {
                let runs: Vec<RunData<'_>> = models[..k]
                    .iter()
                    .zip(&records[..k])
                    .map(|(m, rec)| RunData {
                        history: &m.filtered,
                        record: rec,
                    })
                    .collect();
                match reconstruct(
                    &runs,
                    &self.params.sys,
                    Some(&self.state.psi),
                    DEFAULT_RCOND,
                    DEFAULT_EPS_REL,
                ) {
                    Ok(out) => Some(Outcome {
                        fidelity: out.fidelity.expect("reference supplied"),
                        entropy: out.entropy,
                        rank: out.rank,
                    }),
                    Err(e) => {
                        warn!("reconstruction from {k} run(s) failed: {e}");
                        None
                    }
                }
            })
            .collect()
    }

    /// Fidelity versus SNR and number of runs. Rows are sorted by
    /// `(snr, n_runs)` and written to `sweep.csv`.
    pub fn sweep(&self) -> Result<Vec<SweepRow>> {
        let waveforms = self.waveforms()?;
        let models = self.models(&waveforms, &self.params)?;
        let snrs = self.sorted_snrs();
        let n_runs = self.cfg.n_runs;
        let per_realization: Vec<Result<Vec<Vec<Option<Outcome>>>>> = (0..self.cfg.n_realizations)
            .into_par_iter()
            .map(|i| {
                snrs.iter()
                    .map(|snr| {
                        let records = (0..n_runs)
                            .map(|r| self.record(&models[r].raw, *snr, self.noise_seed(i, r)))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(self.reconstruct_prefixes(&models, &records))
                    })
                    .collect()
            })
            .collect();
        let per_realization = per_realization.into_iter().collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for (s, snr) in snrs.iter().enumerate() {
            for k in 1..=n_runs {
                let outcomes: Vec<Outcome> =
                    per_realization.iter().filter_map(|o| o[s][k - 1]).collect();
                rows.push(self.sweep_row(*snr, k, &outcomes)?);
            }
        }
        formats::write_csv(&self.output_dir().join("sweep.csv"), &rows, &SWEEP_HEADER)?;
        Ok(rows)
    }

    fn sweep_row(&self, snr: Snr, k: usize, outcomes: &[Outcome]) -> Result<SweepRow> {
        let excluded = self.cfg.n_realizations - outcomes.len();
        if excluded > 0 {
            warn!("snr {snr}, {k} run(s): {excluded} realization(s) excluded");
        }
        if outcomes.is_empty() {
            return Err(CliError::Numerical(format!(
                "every realization failed at snr {snr} with {k} run(s)"
            )));
        }
        let fid: Vec<f64> = outcomes.iter().map(|o| o.fidelity).collect();
        let (mean_fidelity, stderr_fidelity) = mean_stderr(&fid);
        let mean_entropy = outcomes.iter().map(|o| o.entropy).sum::<f64>() / outcomes.len() as f64;
        Ok(SweepRow {
            snr,
            n_runs: k,
            mean_fidelity,
            stderr_fidelity,
            mean_entropy,
            rank: outcomes[0].rank,
        })
    }

    fn record(&self, raw: &ObservableHistory, snr: Snr, seed: u64) -> Result<MeasurementRecord> {
        Ok(simulate_record(
            &self.state.rho,
            raw,
            &self.params.sys,
            SnrSpec::new(snr.0),
            seed,
            self.cfg.filter_window,
        )?)
    }

    /// Fidelity under a multiplicative Gaussian error `ε g` on the Larmor
    /// rate of the record-generating dynamics, for `ε = 0` and every
    /// configured level. The estimator keeps the nominal model. Rows are
    /// sorted by `(control_error_pct, snr)` and written to
    /// `sensitivity.csv`.
    pub fn sensitivity(&self) -> Result<Vec<SensitivityRow>> {
        let waveforms = self.waveforms()?;
        let models = self.models(&waveforms, &self.params)?;
        let snrs = self.sorted_snrs();
        let mut levels = vec![0.0];
        levels.extend(self.cfg.control_error_pct.0.iter().copied());
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let n_runs = self.cfg.n_runs;
        let mut rows = Vec::new();
        for &pct in &levels {
            let eps = pct / 100.0;
            let per_realization: Vec<Result<Vec<Option<Outcome>>>> = (0..self.cfg.n_realizations)
                .into_par_iter()
                .map(|i| {
                    let truth: Vec<ObservableHistory> = if eps == 0.0 {
                        models.iter().map(|m| m.raw.clone()).collect()
                    } else {
                        (0..n_runs)
                            .map(|r| {
                                let mut p = self.params.clone();
                                p.larmor_omega *= 1.0 + eps * self.error_draw(i, r);
                                observable_history(&waveforms[r], &p)
                            })
                            .collect::<weaktomo_core::Result<_>>()?
                    };
                    snrs.iter()
                        .map(|snr| {
                            let records = (0..n_runs)
                                .map(|r| self.record(&truth[r], *snr, self.noise_seed(i, r)))
                                .collect::<Result<Vec<_>>>()?;
                            Ok(self.reconstruct_prefixes(&models, &records)[n_runs - 1])
                        })
                        .collect()
                })
                .collect();
            let per_realization = per_realization.into_iter().collect::<Result<Vec<_>>>()?;
            for (s, snr) in snrs.iter().enumerate() {
                let fid: Vec<f64> = per_realization
                    .iter()
                    .filter_map(|o| o[s])
                    .map(|o| o.fidelity)
                    .collect();
                let excluded = self.cfg.n_realizations - fid.len();
                if excluded > 0 {
                    warn!("control error {pct}%, snr {snr}: {excluded} realization(s) excluded");
                }
                if fid.is_empty() {
                    return Err(CliError::Numerical(format!(
                        "every realization failed at {pct}% error, snr {snr}"
                    )));
                }
                let (mean_fidelity, stderr_fidelity) = mean_stderr(&fid);
                rows.push(SensitivityRow {
                    control_error_pct: pct,
                    snr: *snr,
                    mean_fidelity,
                    stderr_fidelity,
                });
            }
        }
        formats::write_csv(
            &self.output_dir().join("sensitivity.csv"),
            &rows,
            &SENSITIVITY_HEADER,
        )?;
        Ok(rows)
    }

    fn record_path(&self, snr: Snr, realization: usize, run: usize) -> PathBuf {
        self.output_dir()
            .join("records")
            .join(format!("snr{snr}_real{realization}_run{run}.csv"))
    }

    /// Writes every record of the sweep design (each SNR, realization and
    /// run) as CSV with a JSON sidecar.
    pub fn simulate(&self) -> Result<usize> {
        let waveforms = self.waveforms()?;
        let models = self.models(&waveforms, &self.params)?;
        let mut written = 0;
        for snr in self.sorted_snrs() {
            for i in 0..self.cfg.n_realizations {
                for (r, m) in models.iter().enumerate() {
                    let seed = self.noise_seed(i, r);
                    let rec = self.record(&m.raw, snr, seed)?;
                    let meta = RecordSidecar {
                        seed,
                        snr,
                        filter_window: rec.filter_window,
                        sigma: rec.sigma,
                        params_digest: m.raw.params_digest.clone(),
                    };
                    formats::write_record(
                        &self.record_path(snr, i, r),
                        &rec.times,
                        &rec.values,
                        &meta,
                    )?;
                    written += 1;
                }
            }
        }
        Ok(written)
    }

    /// Reads the records written by `simulate`, reconstructs each
    /// realization from all runs, and writes `results.csv` plus one
    /// density-matrix dump per row under `rho/`.
    pub fn reconstruct(&self) -> Result<Vec<ResultRow>> {
        let waveforms = self.waveforms()?;
        let models = self.models(&waveforms, &self.params)?;
        let mut rows = Vec::new();
        for snr in self.sorted_snrs() {
            for i in 0..self.cfg.n_realizations {
                let mut records = Vec::with_capacity(models.len());
                for (r, m) in models.iter().enumerate() {
                    let path = self.record_path(snr, i, r);
                    let (times, values, meta) = formats::read_record(&path)?;
                    if meta.params_digest != m.raw.params_digest {
                        return Err(CliError::Config(format!(
                            "{} was simulated with different parameters or waveform",
                            path.display()
                        )));
                    }
                    if meta.filter_window != self.cfg.filter_window || values.len() != m.raw.len() {
                        return Err(CliError::Config(format!(
                            "{} does not match the configured model",
                            path.display()
                        )));
                    }
                    records.push(MeasurementRecord {
                        values,
                        sigma: meta.sigma,
                        times,
                        seed: meta.seed,
                        filter_window: meta.filter_window,
                    });
                }
                let runs: Vec<RunData<'_>> = models
                    .iter()
                    .zip(&records)
                    .map(|(m, rec)| RunData {
                        history: &m.filtered,
                        record: rec,
                    })
                    .collect();
                let run_id = rows.len();
                match reconstruct(
                    &runs,
                    &self.params.sys,
                    Some(&self.state.psi),
                    DEFAULT_RCOND,
                    DEFAULT_EPS_REL,
                ) {
                    Ok(out) => {
                        let dump = self
                            .output_dir()
                            .join("rho")
                            .join(format!("rho_{run_id}.txt"));
                        formats::write_matrix(&dump, out.rho_pos.matrix())?;
                        rows.push(ResultRow {
                            run_id,
                            snr,
                            rank: out.rank,
                            entropy: out.entropy,
                            fidelity: out.fidelity.expect("reference supplied"),
                        });
                    }
                    Err(e) => warn!("snr {snr}, realization {i}: {e}; excluded"),
                }
            }
        }
        formats::write_csv(
            &self.output_dir().join("results.csv"),
            &rows,
            &RESULT_HEADER,
        )?;
        Ok(rows)
    }
}

/// Sample mean and its standard error `s/√n` (zero for a single sample).
pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
