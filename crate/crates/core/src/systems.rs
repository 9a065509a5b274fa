//! Benchmark plants: the bouncing pendulum, the simplest walker and a linear
//! oscillator used as an exactly identifiable reference. Also the Poincaré
//! machinery used to find their periodic orbits.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::hybrid_sim::{flow_to_event, Controller, EventOptions, GuardedReset, HybridSystemSpec};
use crate::numkernel::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumParams {
    pub g: f64,
    pub length: f64,
    /// Viscous damping `lambda` (1/time).
    pub damping: f64,
    /// Bounce angle `theta*`.
    pub theta_star: f64,
    /// Kick `delta omega` applied at each bounce.
    pub kick: f64,
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidParameter(format!("pendulum {what} = {v}")));
        if !(self.g.is_finite() && self.g > 0.0) {
            return bad("g", self.g);
        }
        if !(self.length.is_finite() && self.length > 0.0) {
            return bad("length", self.length);
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return bad("damping", self.damping);
        }
        if !(self.theta_star.is_finite() && self.theta_star > 0.0) {
            return bad("theta_star", self.theta_star);
        }
        if !(self.kick.is_finite() && self.kick > 0.0) {
            return bad("kick", self.kick);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkerParams {
    /// Ramp slope.
    pub gamma: f64,
    /// Hip damping on the stance and swing equations.
    pub damping: [f64; 2],
    /// Foot strikes are only armed while `theta` is below this value, which
    /// rules out the scuffing crossing with the legs parallel.
    pub arming_theta: f64,
}

impl WalkerParams {
    pub fn new(gamma: f64) -> Self {
        WalkerParams {
            gamma,
            damping: [0.5, 0.5],
            arming_theta: -0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!("walker gamma = {}", self.gamma)));
        }
        if self.damping.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidParameter(format!("walker damping = {:?}", self.damping)));
        }
        if !self.arming_theta.is_finite() {
            return Err(Error::InvalidParameter("walker arming_theta must be finite".into()));
        }
        Ok(())
    }
}

/// Damped linear oscillator `x1' = x2`, `x2' = -w^2 x1 - c x2 + u` under the
/// proportional law `u = -gain * x1`. Sampled data from it obey an exact
/// linear recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillatorParams {
    pub omega: f64,
    pub damping: f64,
    pub gain: f64,
}

impl OscillatorParams {
    pub fn validate(&self) -> Result<()> {
        if ![self.omega, self.damping, self.gain].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("oscillator parameters must be finite".into()));
        }
        Ok(())
    }
}

pub fn make_pendulum(p: &PendulumParams) -> Result<HybridSystemSpec> {
    p.validate()?;
    let PendulumParams {
        g,
        length,
        damping,
        theta_star,
        kick,
    } = *p;
    let spec = HybridSystemSpec::new(2, 1, move |x: &[f64], u: &[f64], out: &mut [f64]| {
        out[0] = x[1];
        out[1] = -(g / length) * x[0].sin() - damping * x[1] + u[0];
    })?
    .with_guard(GuardedReset::new(
        "bounce_left",
        move |x| x[0] + theta_star,
        |x| x[1] < 0.0,
        move |x| vec![-theta_star, x[1] + kick],
    ))
    .with_guard(GuardedReset::new(
        "bounce_right",
        move |x| x[0] - theta_star,
        |x| x[1] > 0.0,
        move |x| vec![theta_star, x[1] - kick],
    ))
    .with_param("g", g)
    .with_param("length", length)
    .with_param("damping", damping)
    .with_param("theta_star", theta_star)
    .with_param("kick", kick);
    Ok(spec)
}

/// Foot-strike reset: the legs swap roles.
pub fn walker_reset(x: &[f64]) -> Vec<f64> {
    let theta = x[0];
    let c2 = (2.0 * theta).cos();
    vec![-theta, -2.0 * theta, c2 * x[2], (1.0 - c2) * c2 * x[2]]
}

pub fn make_walker(p: &WalkerParams) -> Result<HybridSystemSpec> {
    p.validate()?;
    let WalkerParams {
        gamma,
        damping: [l1, l2],
        arming_theta,
    } = *p;
    let spec = HybridSystemSpec::new(4, 2, move |x: &[f64], u: &[f64], out: &mut [f64]| {
        let (theta, phi, theta_dot, phi_dot) = (x[0], x[1], x[2], x[3]);
        let s = (theta - gamma).sin();
        out[0] = theta_dot;
        out[1] = phi_dot;
        out[2] = s - l1 * theta_dot + u[0];
        out[3] = s + (theta_dot * theta_dot - (theta - gamma).cos()) * phi.sin() - l2 * phi_dot + u[1];
    })?
    .with_guard(GuardedReset::new(
        "foot_strike",
        |x| x[1] - 2.0 * x[0],
        move |x| x[0] < arming_theta,
        walker_reset,
    ))
    .with_param("gamma", gamma)
    .with_param("damping_stance", l1)
    .with_param("damping_swing", l2)
    .with_param("arming_theta", arming_theta);
    Ok(spec)
}

pub fn make_oscillator(p: &OscillatorParams) -> Result<HybridSystemSpec> {
    p.validate()?;
    let OscillatorParams { omega, damping, .. } = *p;
    let spec = HybridSystemSpec::new(2, 1, move |x: &[f64], u: &[f64], out: &mut [f64]| {
        out[0] = x[1];
        out[1] = -omega * omega * x[0] - damping * x[1] + u[0];
    })?
    .with_param("omega", omega)
    .with_param("damping", damping)
    .with_param("gain", p.gain);
    Ok(spec)
}

/// Nominal feedback of each plant. For the pendulum and the walker it cancels
/// the damping terms exactly, leaving the conservative hybrid system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NominalLaw {
    Pendulum { damping: f64 },
    Walker { damping: [f64; 2] },
    Oscillator { gain: f64 },
}

impl NominalLaw {
    pub fn m(&self) -> usize {
        match self {
            NominalLaw::Walker { .. } => 2,
            _ => 1,
        }
    }

    pub fn apply(&self, x: &[f64], u: &mut [f64]) {
        match *self {
            NominalLaw::Pendulum { damping } => u[0] = damping * x[1],
            NominalLaw::Walker { damping } => {
                u[0] = damping[0] * x[2];
                u[1] = damping[1] * x[3];
            }
            NominalLaw::Oscillator { gain } => u[0] = -gain * x[0],
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.m()];
        self.apply(x, &mut u);
        u
    }
}

impl Controller for NominalLaw {
    fn control(&mut self, _k: usize, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval(x))
    }
}

/// Kick and period of the pendulum limit cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitCycle {
    pub kick: f64,
    pub period: f64,
    /// State right after the first bounce, on the `-theta*` side.
    pub post_bounce: [f64; 2],
}

/// Closed form of the kick: twice the speed at `|theta| = theta*` on the
/// undamped swing through `x0`.
pub fn pendulum_kick_closed_form(g: f64, length: f64, x0: [f64; 2], theta_star: f64) -> f64 {
    let speed_sq = x0[1] * x0[1] + 2.0 * (g / length) * (theta_star.cos() - x0[0].cos());
    2.0 * speed_sq.max(0.0).sqrt()
}

/// Largest `|theta|` reached by the undamped swing through `x0`, or `pi` when
/// the pendulum goes over the top.
pub fn pendulum_max_angle(g: f64, length: f64, x0: [f64; 2]) -> f64 {
    let c = x0[0].cos() - 0.5 * x0[1] * x0[1] * length / g;
    if c <= -1.0 {
        std::f64::consts::PI
    } else {
        c.min(1.0).acos()
    }
}

/// Options for the Poincaré-map flows.
#[derive(Debug, Clone, Copy)]
pub struct FlowOptions {
    pub dt: f64,
    pub cap: f64,
    pub events: EventOptions,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            dt: 1e-3,
            cap: 10.0,
            events: EventOptions {
                condition_tol: 1e-14,
                bracket_rel: 1e-12,
                max_events_per_step: 10,
            },
        }
    }
}

/// Builds the pendulum limit cycle through `x0`: flows the undamped pendulum
/// to the first `|theta| = theta*` crossing, sets the kick to twice the speed
/// there, then measures the time between two bounces on the same side.
pub fn pendulum_limit_cycle(
    g: f64,
    length: f64,
    damping: f64,
    x0: [f64; 2],
    theta_star: f64,
    flow: &FlowOptions,
) -> Result<LimitCycle> {
    if !(theta_star > 0.0 && theta_star.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "theta_star must be > 0, got {theta_star}"
        )));
    }
    let max_theta = pendulum_max_angle(g, length, x0);
    if theta_star >= max_theta || x0[0].abs() >= theta_star {
        return Err(Error::UnreachableBounce { theta_star, max_theta });
    }

    // Crossing finder: the two bounce surfaces with identity resets.
    let law = NominalLaw::Pendulum { damping };
    let probe = make_pendulum(&PendulumParams {
        g,
        length,
        damping,
        theta_star,
        kick: 1.0,
    })?;
    let mut crossing = probe.closed_loop(move |x, u| law.apply(x, u));
    for guard in &mut crossing.guards {
        guard.reset = std::sync::Arc::new(|x: &[f64]| x.to_vec());
    }
    let side = if x0[1] < 0.0 { 0 } else { 1 };
    let (hit, _) = flow_to_event(&crossing, &x0, side, flow.dt, flow.cap, &flow.events, &|_| false)?;
    let kick = 2.0 * hit[1].abs();

    let p = PendulumParams {
        g,
        length,
        damping,
        theta_star,
        kick,
    };
    let spec = make_pendulum(&p)?.closed_loop(move |x, u| law.apply(x, u));
    // Right after a bounce on the -theta* side; by symmetry either side works.
    let post_bounce = [-theta_star, hit[1].abs()];
    let (_, period) = flow_to_event(&spec, &post_bounce, 0, flow.dt, flow.cap, &flow.events, &|_| false)?;
    Ok(LimitCycle {
        kick,
        period,
        post_bounce,
    })
}

/// Return map to the section just after a reset of `guard`, for an
/// autonomous spec.
pub fn poincare_map(
    spec: &HybridSystemSpec,
    x0: &[f64],
    guard: usize,
    flow: &FlowOptions,
    failed: &dyn Fn(&[f64]) -> bool,
) -> Result<(Vec<f64>, f64)> {
    flow_to_event(spec, x0, guard, flow.dt, flow.cap, &flow.events, failed)
}

/// The walker has fallen once the stance leg is past horizontal.
pub fn walker_fell(x: &[f64]) -> bool {
    !(x[0].abs() < FRAC_PI_2)
}

/// Autonomous walker under its nominal law (the conservative walker).
pub fn walker_passive(p: &WalkerParams) -> Result<HybridSystemSpec> {
    let law = NominalLaw::Walker { damping: p.damping };
    Ok(make_walker(p)?.closed_loop(move |x, u| law.apply(x, u)))
}

/// Walker step map on the post-strike section.
pub fn walker_step_map(spec: &HybridSystemSpec, x0: &[f64], flow: &FlowOptions) -> Result<(Vec<f64>, f64)> {
    poincare_map(spec, x0, 0, flow, &walker_fell)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub x_star: Vec<f64>,
    pub period: f64,
    /// `max |P(x*) - x*|` over the free components.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub fd_step: f64,
    pub tol: f64,
    pub accept_tol: f64,
    pub max_iterations: usize,
    pub max_condition: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            fd_step: 1e-6,
            tol: 1e-10,
            accept_tol: 1e-8,
            max_iterations: 50,
            max_condition: 1e12,
            max_halvings: 8,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Return map: next section state and the time taken to reach it.
pub type SectionMap<'a> = dyn Fn(&[f64]) -> Result<(Vec<f64>, f64)> + 'a;

/// Newton iteration on `r(x) = P(x) - x` over the components in `free`, with
/// a forward-difference Jacobian. A step whose trial point cannot be mapped
/// (fall, no return) or does not reduce the residual is halved.
pub fn find_fixed_point(map: &SectionMap, guess: &[f64], free: &[usize], opts: &NewtonOptions) -> Result<FixedPoint> {
    if free.is_empty() || free.iter().any(|&i| i >= guess.len()) {
        return Err(Error::InvalidParameter(format!(
            "free indices {free:?} invalid for a state of size {}",
            guess.len()
        )));
    }
    let residual_of = |x: &[f64]| -> Result<(Vec<f64>, f64)> {
        let (next, period) = map(x)?;
        if next.len() != x.len() {
            return Err(Error::dims("return map output", x.len(), next.len()));
        }
        Ok((free.iter().map(|&i| next[i] - x[i]).collect(), period))
    };

    let mut x = guess.to_vec();
    let (mut r, mut period) = residual_of(&x)?;
    let mut norm = inf_norm(&r);
    let k = free.len();
    for iter in 0..opts.max_iterations {
        if norm < opts.tol {
            return Ok(FixedPoint {
                x_star: x,
                period,
                residual: norm,
                iterations: iter,
            });
        }
        let mut jac = Matrix::zeros(k, k);
        for (col, &j) in free.iter().enumerate() {
            let mut xp = x.clone();
            xp[j] += opts.fd_step;
            let (rp, _) = residual_of(&xp)?;
            for row in 0..k {
                jac[(row, col)] = (rp[row] - r[row]) / opts.fd_step;
            }
        }
        let sv = jac.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= opts.max_condition) {
            return Err(Error::SingularJacobian { condition });
        }
        let rhs = DVector::from_iterator(k, r.iter().map(|v| -v));
        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("Newton Jacobian".into()))?;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut trial = x.clone();
            for (idx, &j) in free.iter().enumerate() {
                trial[j] += scale * delta[idx];
            }
            if let Ok((rt, pt)) = residual_of(&trial) {
                let nt = inf_norm(&rt);
                if nt.is_finite() && nt < norm {
                    accepted = Some((trial, rt, pt, nt));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((xt, rt, pt, nt)) = accepted else {
            break;
        };
        x = xt;
        r = rt;
        period = pt;
        norm = nt;
    }
    if norm < opts.accept_tol {
        return Ok(FixedPoint {
            x_star: x,
            period,
            residual: norm,
            iterations: opts.max_iterations,
        });
    }
    Err(Error::FixedPointNoConvergence {
        iterations: opts.max_iterations,
        residual: norm,
    })
}

/// Walker fixed point on the post-strike section at slope `p.gamma`.
pub fn walker_fixed_point(
    p: &WalkerParams,
    guess: &[f64],
    flow: &FlowOptions,
    newton: &NewtonOptions,
) -> Result<FixedPoint> {
    let spec = walker_passive(p)?;
    let map = |x: &[f64]| walker_step_map(&spec, x, flow);
    find_fixed_point(&map, guess, &[0, 1, 2, 3], newton)
}

/// Slope whose periodic gait has stance angle `target_theta` right after the
/// strike, found with the secant method. The first iterate comes from the
/// small-slope scaling `theta ~ 0.943 * gamma^(1/3)`.
pub fn calibrate_walker_gamma(
    base: &WalkerParams,
    target_theta: f64,
    guess: &[f64],
    flow: &FlowOptions,
    newton: &NewtonOptions,
) -> Result<(f64, FixedPoint)> {
    if !(target_theta > 0.0 && target_theta < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "walker target theta must be in (0, 0.5), got {target_theta}"
        )));
    }
    let mut warm = guess.to_vec();
    let mut eval = |gamma: f64| -> Result<(f64, FixedPoint)> {
        let p = WalkerParams { gamma, ..*base };
        let fp = walker_fixed_point(&p, &warm, flow, newton)?;
        warm.clone_from(&fp.x_star);
        Ok((fp.x_star[0] - target_theta, fp))
    };
    let mut g0 = (target_theta / 0.943).powi(3);
    let (mut f0, _) = eval(g0)?;
    let mut g1 = g0 * 0.97;
    let (mut f1, mut fp1) = eval(g1)?;
    for _ in 0..40 {
        if f1.abs() < 1e-13 {
            break;
        }
        let denom = f1 - f0;
        if denom == 0.0 {
            break;
        }
        let g2 = g1 - f1 * (g1 - g0) / denom;
        if !(g2 > 0.0 && g2.is_finite()) {
            return Err(Error::FixedPointNoConvergence {
                iterations: 0,
                residual: f1.abs(),
            });
        }
        (g0, f0) = (g1, f1);
        g1 = g2;
        (f1, fp1) = eval(g1)?;
        if (g1 - g0).abs() < 1e-16 {
            break;
        }
    }
    if f1.abs() > 1e-9 {
        return Err(Error::FixedPointNoConvergence {
            iterations: 40,
            residual: f1.abs(),
        });
    }
    Ok((g1, fp1))
}
