//! End-to-end pipelines behind the command-line tool: nominal simulation,
//! model fitting, open-loop prediction and closed-loop tracking.
//!
//! Each `run_*` function returns its results in memory; the matching
//! `cmd_*` function also writes them to an output directory.

use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, SystemKind};
use crate::error::{Error, Result};
use crate::history_lqr::{synthesize_for_model, HistoryLqrController};
use crate::hybrid_sim::{simulate_with, Controller, HybridSystemSpec, SimOptions, Trajectory};
use crate::io::{self, fmt_f64};
use crate::numkernel::{DareOptions, LqrSolution};
use crate::report::{max_abs_error, RmseReport};
use crate::systems::{
    calibrate_walker_gamma, make_oscillator, make_pendulum, make_walker, pendulum_limit_cycle, walker_fell,
    walker_fixed_point, FixedPoint, FlowOptions, LimitCycle, NewtonOptions, NominalLaw, OscillatorParams,
    PendulumParams, WalkerParams,
};
use crate::tde_koopman::{delay_window, rollout_predict, FitReport, KoopmanModel};

/// Longest time the walker may go without a foot strike before it counts as
/// fallen.
pub const WALKER_STEP_CAP: f64 = 10.0;

/// Periodic orbit the nominal runs start on.
#[derive(Debug, Clone, PartialEq)]
pub enum Orbit {
    LimitCycle(LimitCycle),
    FixedPoint {
        gamma: f64,
        calibrated: bool,
        fixed_point: FixedPoint,
    },
    /// No orbit: the plant starts at the configured state.
    Start,
}

/// Plant, nominal law and initial state resolved from a config.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: SystemKind,
    pub spec: HybridSystemSpec,
    pub law: NominalLaw,
    pub x0: Vec<f64>,
    pub orbit: Orbit,
    pub dt: f64,
}

impl Scenario {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let flow = FlowOptions::default();
        match cfg.system {
            SystemKind::Pendulum => {
                let p = &cfg.pendulum;
                let x0 = [p.theta0, p.omega0];
                let lc = pendulum_limit_cycle(p.g, p.length, p.damping, x0, p.theta_star, &flow)?;
                let params = PendulumParams {
                    g: p.g,
                    length: p.length,
                    damping: p.damping,
                    theta_star: p.theta_star,
                    kick: lc.kick,
                };
                Ok(Scenario {
                    kind: cfg.system,
                    spec: make_pendulum(&params)?,
                    law: NominalLaw::Pendulum { damping: p.damping },
                    x0: x0.to_vec(),
                    orbit: Orbit::LimitCycle(lc),
                    dt: cfg.dt,
                })
            }
            SystemKind::Walker => {
                let w = &cfg.walker;
                let base = WalkerParams {
                    gamma: w.gamma.unwrap_or(0.0),
                    damping: [w.damping_stance, w.damping_swing],
                    arming_theta: w.arming_theta,
                };
                let newton = NewtonOptions::default();
                let (gamma, fixed_point) = match w.gamma {
                    Some(g) => (g, walker_fixed_point(&base, &w.guess, &flow, &newton)?),
                    None => calibrate_walker_gamma(&base, w.target_theta, &w.guess, &flow, &newton)?,
                };
                let params = WalkerParams { gamma, ..base };
                Ok(Scenario {
                    kind: cfg.system,
                    spec: make_walker(&params)?,
                    law: NominalLaw::Walker {
                        damping: params.damping,
                    },
                    x0: fixed_point.x_star.clone(),
                    orbit: Orbit::FixedPoint {
                        gamma,
                        calibrated: w.gamma.is_none(),
                        fixed_point,
                    },
                    dt: cfg.dt,
                })
            }
            SystemKind::LinearOscillator => {
                let o = &cfg.linear_oscillator;
                let params = OscillatorParams {
                    omega: o.omega,
                    damping: o.damping,
                    gain: o.gain,
                };
                Ok(Scenario {
                    kind: cfg.system,
                    spec: make_oscillator(&params)?,
                    law: NominalLaw::Oscillator { gain: o.gain },
                    x0: o.x0.clone(),
                    orbit: Orbit::Start,
                    dt: cfg.dt,
                })
            }
        }
    }

    /// Nominal run of `samples` grid points from the orbit start, with the
    /// first sample at time `t0`.
    pub fn nominal(&self, samples: usize, t0: f64) -> Result<Trajectory> {
        let mut law = self.law;
        let traj = simulate_with(
            &self.spec,
            &self.x0,
            &mut law,
            samples,
            self.dt,
            &Default::default(),
            &SimOptions {
                t0,
                ..Default::default()
            },
        )?;
        self.check_upright(&traj)?;
        Ok(traj)
    }

    fn fell(&self, x: &[f64]) -> bool {
        self.kind == SystemKind::Walker && walker_fell(x)
    }

    /// A walker that stops taking steps has fallen.
    fn check_upright(&self, traj: &Trajectory) -> Result<()> {
        if self.kind != SystemKind::Walker {
            return Ok(());
        }
        let cap = (WALKER_STEP_CAP / traj.dt).round() as usize;
        let mut last = 0;
        for &(s, _) in traj.events.iter().chain(std::iter::once(&(traj.len() - 1, 0))) {
            if s - last > cap {
                return Err(Error::Fall {
                    t: traj.time(last + cap),
                });
            }
            last = s;
        }
        Ok(())
    }

    pub fn orbit_rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![("system".to_string(), format!("{:?}", self.kind).to_lowercase())];
        match &self.orbit {
            Orbit::LimitCycle(lc) => {
                rows.push(("kick".into(), fmt_f64(lc.kick)));
                rows.push(("period".into(), fmt_f64(lc.period)));
                rows.push(("post_bounce_x1".into(), fmt_f64(lc.post_bounce[0])));
                rows.push(("post_bounce_x2".into(), fmt_f64(lc.post_bounce[1])));
            }
            Orbit::FixedPoint {
                gamma,
                calibrated,
                fixed_point,
            } => {
                rows.push(("gamma".into(), fmt_f64(*gamma)));
                rows.push(("gamma_calibrated".into(), calibrated.to_string()));
                for (i, v) in fixed_point.x_star.iter().enumerate() {
                    rows.push((format!("x_star_{}", i + 1), fmt_f64(*v)));
                }
                rows.push(("period".into(), fmt_f64(fixed_point.period)));
                rows.push(("residual".into(), fmt_f64(fixed_point.residual)));
                rows.push(("newton_iterations".into(), fixed_point.iterations.to_string()));
            }
            Orbit::Start => {
                for (i, v) in self.x0.iter().enumerate() {
                    rows.push((format!("x0_{}", i + 1), fmt_f64(*v)));
                }
            }
        }
        rows
    }
}

fn out_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub struct SimOutput {
    pub scenario: Scenario,
    pub trajectory: Trajectory,
}

pub fn run_sim(cfg: &ExperimentConfig) -> Result<SimOutput> {
    let scenario = Scenario::build(cfg)?;
    let trajectory = scenario.nominal(cfg.train_samples()?, 0.0)?;
    Ok(SimOutput { scenario, trajectory })
}

/// Writes `trajectory.csv` and `orbit.csv`.
pub fn cmd_sim(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let res = run_sim(cfg)?;
    let dir = out_dir(cfg, out)?;
    let traj = dir.join("trajectory.csv");
    io::write_trajectory_file(&traj, &res.trajectory)?;
    let orbit = dir.join("orbit.csv");
    io::write_key_values(&orbit, &res.scenario.orbit_rows())?;
    Ok(vec![traj, orbit])
}

pub struct TrainOutput {
    pub scenario: Scenario,
    pub training: Trajectory,
    pub model: KoopmanModel,
    pub fit: FitReport,
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let scenario = Scenario::build(cfg)?;
    let training = scenario.nominal(cfg.train_samples()?, 0.0)?;
    let (model, fit) = KoopmanModel::fit(&training, &cfg.hankel_params(), cfg.hankel.pinv_rtol, cfg.hankel.start)?;
    Ok(TrainOutput {
        scenario,
        training,
        model,
        fit,
    })
}

/// Writes `model.tdkm` and `train_report.csv`, plus `L.csv` when matrix
/// export is on.
pub fn cmd_train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let res = run_train(cfg)?;
    let dir = out_dir(cfg, out)?;
    let model_path = dir.join("model.tdkm");
    io::save_model(&model_path, &res.model)?;
    let mut rows = res.scenario.orbit_rows();
    rows.extend([
        ("n".to_string(), res.model.n.to_string()),
        ("m".into(), res.model.m.to_string()),
        ("delays".into(), res.model.delays.to_string()),
        ("columns".into(), cfg.hankel.columns.to_string()),
        ("pinv_rtol".into(), fmt_f64(cfg.hankel.pinv_rtol)),
        ("hankel_rows".into(), res.fit.hankel_rows.to_string()),
        ("hankel_cols".into(), res.fit.hankel_cols.to_string()),
        ("training_samples".into(), res.training.len().to_string()),
        ("relative_residual".into(), fmt_f64(res.fit.relative_residual)),
    ]);
    let report = dir.join("train_report.csv");
    io::write_key_values(&report, &rows)?;
    let mut written = vec![model_path, report];
    if cfg.export.matrices {
        let l = dir.join("L.csv");
        io::write_matrix(&l, &res.model.l)?;
        written.push(l);
    }
    Ok(written)
}

/// The model must have been fitted for the configured plant and grid.
pub fn check_model(cfg: &ExperimentConfig, model: &KoopmanModel) -> Result<()> {
    let want = (cfg.n(), cfg.m(), cfg.hankel.delays);
    let have = (model.n, model.m, model.delays);
    if want != have {
        return Err(Error::dims("model (n, m, N)", format!("{want:?}"), format!("{have:?}")));
    }
    if (model.dt - cfg.dt).abs() > 1e-12 * cfg.dt {
        return Err(Error::dims("model dt", cfg.dt, model.dt));
    }
    Ok(())
}

pub struct PredictOutput {
    pub truth: Trajectory,
    /// One snapshot per truth sample; samples up to `first_predicted - 1`
    /// are the seed window and equal the truth.
    pub predicted: Vec<Vec<f64>>,
    pub first_predicted: usize,
    pub rmse: RmseReport,
}

/// Seeds the delay window with the first `N + 1` true samples, rolls out to
/// the end of the training horizon and scores the rolled-out samples.
pub fn run_predict(cfg: &ExperimentConfig, model: &KoopmanModel) -> Result<PredictOutput> {
    check_model(cfg, model)?;
    let scenario = Scenario::build(cfg)?;
    let truth = scenario.nominal(cfg.train_samples()?, 0.0)?;
    predict_on(&truth, model)
}

pub fn predict_on(truth: &Trajectory, model: &KoopmanModel) -> Result<PredictOutput> {
    let n_delay = model.delays;
    let window = delay_window(truth, n_delay, n_delay)?;
    let steps = truth.len() - 1 - n_delay;
    let rolled = rollout_predict(model, &window, steps)?;
    let mut predicted: Vec<Vec<f64>> = (0..n_delay).map(|k| truth.snapshot(k)).collect();
    predicted.extend(rolled);
    let first_predicted = n_delay + 1;
    let names = io::channel_names(model.n, model.m);
    let true_tail: Vec<Vec<f64>> = (first_predicted..truth.len()).map(|k| truth.snapshot(k)).collect();
    let rmse = RmseReport::from_samples(&names, &true_tail, &predicted[first_predicted..])?;
    Ok(PredictOutput {
        truth: truth.clone(),
        predicted,
        first_predicted,
        rmse,
    })
}

/// Writes `prediction.csv` and `prediction_rmse.csv`.
pub fn cmd_predict(cfg: &ExperimentConfig, model_path: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let model = io::load_model(model_path)?;
    let res = run_predict(cfg, &model)?;
    let dir = out_dir(cfg, out)?;
    let names = io::channel_names(model.n, model.m);
    let truth: Vec<Vec<f64>> = (0..res.truth.len()).map(|k| res.truth.snapshot(k)).collect();
    let pred_path = dir.join("prediction.csv");
    io::write_prediction(&pred_path, &res.truth.times(), &names, &truth, &res.predicted)?;
    let rmse_path = dir.join("prediction_rmse.csv");
    io::write_rmse(&rmse_path, &res.rmse)?;
    Ok(vec![pred_path, rmse_path])
}

/// Stops the run as soon as the plant falls.
struct Guarded<'a> {
    inner: HistoryLqrController,
    scenario: &'a Scenario,
    t0: f64,
    dt: f64,
}

impl Controller for Guarded<'_> {
    fn control(&mut self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        if self.scenario.fell(x) {
            return Err(Error::Fall {
                t: self.t0 + k as f64 * self.dt,
            });
        }
        self.inner.control(k, x)
    }
}

pub struct ControlOutput {
    pub reference: Trajectory,
    pub actual: Trajectory,
    /// Index of the first controlled sample (t = 0); the samples before it
    /// fill the history buffer under the nominal control.
    pub start: usize,
    pub lqr: LqrSolution,
    /// Sample where the disturbance was applied, if it fired.
    pub disturbance_sample: Option<usize>,
    pub rmse: RmseReport,
    pub rmse_post: Option<RmseReport>,
}

impl ControlOutput {
    /// `max_j |x_j - xd_j|` at each sample from `start` on.
    pub fn error_norms(&self) -> Vec<f64> {
        (self.start..self.actual.len())
            .map(|k| max_abs_error(&self.actual.states[k..=k], &self.reference.states[k..=k]))
            .collect()
    }

    /// First sample from which the error stays below `tol` to the end.
    pub fn settled_from(&self, tol: f64) -> Option<usize> {
        let norms = self.error_norms();
        let mut settled = None;
        for (i, e) in norms.iter().enumerate().rev() {
            if *e < tol {
                settled = Some(self.start + i);
            } else {
                break;
            }
        }
        settled
    }
}

/// Closed-loop run. The reference is the nominal run over `N` leading
/// samples plus the control horizon; the plant follows it exactly over the
/// leading samples, and the LQR acts from t = 0 on.
pub fn run_control(cfg: &ExperimentConfig, model: &KoopmanModel) -> Result<ControlOutput> {
    check_model(cfg, model)?;
    let scenario = Scenario::build(cfg)?;
    let opts = DareOptions {
        method: cfg.lqr.method.into(),
        max_iterations: cfg.lqr.max_iterations,
        ..Default::default()
    };
    let lqr = synthesize_for_model(model, cfg.lqr.q, cfg.lqr.r, &opts)?;
    run_control_with_gain(cfg, &scenario, model, lqr)
}

pub fn run_control_with_gain(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    model: &KoopmanModel,
    lqr: LqrSolution,
) -> Result<ControlOutput> {
    let start = model.delays;
    let samples = start + cfg.control_samples()?;
    let t0 = -(start as f64) * cfg.dt;
    let reference = scenario.nominal(samples, t0)?;
    let events_before = reference.events.iter().filter(|(s, _)| *s <= start).count();
    let schedule = cfg.disturbance_schedule(events_before);

    let mut ctrl = Guarded {
        inner: HistoryLqrController::new(lqr.gain.clone(), reference.clone(), model.n, model.m, model.delays)?,
        scenario,
        t0,
        dt: cfg.dt,
    };
    let actual = simulate_with(
        &scenario.spec,
        &scenario.x0,
        &mut ctrl,
        samples,
        cfg.dt,
        &schedule,
        &SimOptions {
            t0,
            ..Default::default()
        },
    )?;
    scenario.check_upright(&actual)?;

    let names = io::state_names(model.n);
    let rmse = RmseReport::from_samples(&names, &reference.states[start..], &actual.states[start..])?;
    let disturbance_sample = actual.disturbances.first().map(|&(_, s)| s);
    let rmse_post = match disturbance_sample {
        Some(s) => Some(RmseReport::from_samples(
            &names,
            &reference.states[s..],
            &actual.states[s..],
        )?),
        None => None,
    };
    Ok(ControlOutput {
        reference,
        actual,
        start,
        lqr,
        disturbance_sample,
        rmse,
        rmse_post,
    })
}

/// Writes `closed_loop.csv`, `tracking_rmse.csv`, `tracking_rmse_post.csv`
/// (when a disturbance fired) and `control_report.csv`, plus `gain.csv` when
/// matrix export is on.
pub fn cmd_control(cfg: &ExperimentConfig, model_path: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let model = io::load_model(model_path)?;
    let res = run_control(cfg, &model)?;
    let dir = out_dir(cfg, out)?;
    let mut written = Vec::new();

    let cl = dir.join("closed_loop.csv");
    io::write_closed_loop(&cl, &res.reference, &res.actual, res.start)?;
    written.push(cl);
    let rm = dir.join("tracking_rmse.csv");
    io::write_rmse(&rm, &res.rmse)?;
    written.push(rm);
    if let Some(post) = &res.rmse_post {
        let p = dir.join("tracking_rmse_post.csv");
        io::write_rmse(&p, post)?;
        written.push(p);
    }

    let norms = res.error_norms();
    let mut rows = vec![
        (
            "closed_loop_spectral_radius".to_string(),
            fmt_f64(res.lqr.closed_loop_radius),
        ),
        ("gain_rows".into(), res.lqr.gain.nrows().to_string()),
        ("gain_cols".into(), res.lqr.gain.ncols().to_string()),
        ("samples".into(), (res.actual.len() - res.start).to_string()),
        ("max_error".into(), fmt_f64(norms.iter().cloned().fold(0.0, f64::max))),
        ("final_error".into(), fmt_f64(norms.last().copied().unwrap_or(0.0))),
    ];
    if let Some(s) = res.disturbance_sample {
        rows.push(("disturbance_time".into(), fmt_f64((s - res.start) as f64 * cfg.dt)));
    }
    match res.settled_from(0.02) {
        Some(s) => rows.push(("settled_below_0.02_at".into(), fmt_f64((s - res.start) as f64 * cfg.dt))),
        None => rows.push(("settled_below_0.02_at".into(), "never".into())),
    }
    let rep = dir.join("control_report.csv");
    io::write_key_values(&rep, &rows)?;
    written.push(rep);

    if cfg.export.matrices {
        let g = dir.join("gain.csv");
        io::write_matrix(&g, &res.lqr.gain)?;
        written.push(g);
    }
    Ok(written)
}
