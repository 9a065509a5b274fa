//! Hybrid-system simulation on a uniform sample grid.
//!
//! A step integrates the flow with one RK4 update under a zero-order-hold
//! control. When an armed guard changes sign across the step the crossing is
//! located by bisection on the step fraction, the reset is applied, and the
//! remaining fraction is integrated from the reset state. Sample times never
//! move.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type VectorField = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type GuardCondition = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GuardArming = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;
pub type ResetMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A guard surface `condition(x) = 0` with an arming predicate and the reset
/// applied when an armed crossing happens.
#[derive(Clone)]
pub struct GuardedReset {
    pub name: String,
    pub condition: GuardCondition,
    pub armed: GuardArming,
    pub reset: ResetMap,
}

impl fmt::Debug for GuardedReset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuardedReset")
            .field("name", &self.name)
            .finish_non_exhaustive()
    }
}

impl GuardedReset {
    pub fn new(
        name: impl Into<String>,
        condition: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        armed: impl Fn(&[f64]) -> bool + Send + Sync + 'static,
        reset: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        GuardedReset {
            name: name.into(),
            condition: Arc::new(condition),
            armed: Arc::new(armed),
            reset: Arc::new(reset),
        }
    }
}

/// Continuous vector field plus an ordered list of guarded resets.
#[derive(Clone)]
pub struct HybridSystemSpec {
    pub n: usize,
    pub m: usize,
    pub dynamics: VectorField,
    pub guards: Vec<GuardedReset>,
    /// Named constants the closures were built from, kept for reports.
    pub params: BTreeMap<String, f64>,
}

impl fmt::Debug for HybridSystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HybridSystemSpec")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("guards", &self.guards)
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl HybridSystemSpec {
    pub fn new(
        n: usize,
        m: usize,
        dynamics: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("state dimension must be >= 1".into()));
        }
        Ok(HybridSystemSpec {
            n,
            m,
            dynamics: Arc::new(dynamics),
            guards: Vec::new(),
            params: BTreeMap::new(),
        })
    }

    pub fn with_guard(mut self, guard: GuardedReset) -> Self {
        self.guards.push(guard);
        self
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn derivative(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.dynamics)(x, u, out)
    }

    /// Autonomous system obtained by closing the loop with a continuous state
    /// feedback `u = law(x)`. The result has `m = 0` and the same guards.
    pub fn closed_loop(&self, law: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        let inner = self.dynamics.clone();
        let m = self.m;
        HybridSystemSpec {
            n: self.n,
            m: 0,
            dynamics: Arc::new(move |x: &[f64], _u: &[f64], out: &mut [f64]| {
                let mut u = vec![0.0; m];
                law(x, &mut u);
                inner(x, &u, out)
            }),
            guards: self.guards.clone(),
            params: self.params.clone(),
        }
    }

    fn check_state(&self, x: &[f64], what: &str) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::dims(what, self.n, x.len()));
        }
        Ok(())
    }

    fn check_control(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.m {
            return Err(Error::dims("control", self.m, u.len()));
        }
        Ok(())
    }
}

/// One classical RK4 step with `u` held constant. `t` is only used for
/// diagnostics.
pub fn rk4_step(spec: &HybridSystemSpec, x: &[f64], u: &[f64], dt: f64, t: f64) -> Result<Vec<f64>> {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    let eval = |state: &[f64], out: &mut [f64], at: f64| -> Result<()> {
        spec.derivative(state, u, out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteDerivative {
                t: at,
                state: state.to_vec(),
            })
        }
    };

    eval(x, &mut k1, t)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    eval(&tmp, &mut k2, t + 0.5 * dt)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    eval(&tmp, &mut k3, t + 0.5 * dt)?;
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    eval(&tmp, &mut k4, t + dt)?;

    Ok((0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Tolerances for event handling.
#[derive(Debug, Clone, Copy)]
pub struct EventOptions {
    /// Bisection stops once `|condition| <` this.
    pub condition_tol: f64,
    /// Bisection also stops once the bracket is narrower than this times the step.
    pub bracket_rel: f64,
    /// More events than this inside one step aborts the simulation.
    pub max_events_per_step: usize,
}

impl Default for EventOptions {
    fn default() -> Self {
        EventOptions {
            condition_tol: 1e-10,
            bracket_rel: 1e-12,
            max_events_per_step: 10,
        }
    }
}

/// Located guard crossing: elapsed time from `t_pre` and the state there
/// (before the reset).
#[derive(Debug, Clone, PartialEq)]
pub struct EventHit {
    pub dt: f64,
    pub t: f64,
    pub state: Vec<f64>,
}

/// Locates the zero crossing of `guard` inside a step of length `dt` starting
/// at `x_pre` with default tolerances.
pub fn locate_event(
    spec: &HybridSystemSpec,
    guard: usize,
    x_pre: &[f64],
    u: &[f64],
    t_pre: f64,
    dt: f64,
) -> Result<EventHit> {
    locate_event_with(spec, guard, x_pre, u, t_pre, dt, &EventOptions::default())
}

pub fn locate_event_with(
    spec: &HybridSystemSpec,
    guard: usize,
    x_pre: &[f64],
    u: &[f64],
    t_pre: f64,
    dt: f64,
    opts: &EventOptions,
) -> Result<EventHit> {
    let g = spec
        .guards
        .get(guard)
        .ok_or_else(|| Error::InvalidParameter(format!("no guard with index {guard}")))?;
    spec.check_state(x_pre, "event start state")?;
    spec.check_control(u)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {dt}")));
    }

    let c_pre = (g.condition)(x_pre);
    if c_pre.abs() < opts.condition_tol {
        return Ok(EventHit {
            dt: 0.0,
            t: t_pre,
            state: x_pre.to_vec(),
        });
    }
    let x_post = rk4_step(spec, x_pre, u, dt, t_pre)?;
    let c_post = (g.condition)(&x_post);
    if c_post.abs() < opts.condition_tol {
        return Ok(EventHit {
            dt,
            t: t_pre + dt,
            state: x_post,
        });
    }
    if c_pre.signum() == c_post.signum() {
        return Err(Error::EventLocation {
            guard: guard + 1,
            t: t_pre,
        });
    }

    let (mut lo, mut hi) = (0.0_f64, dt);
    let mut x_hi = x_post;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let x_mid = rk4_step(spec, x_pre, u, mid, t_pre)?;
        let c_mid = (g.condition)(&x_mid);
        if !c_mid.is_finite() {
            return Err(Error::EventLocation {
                guard: guard + 1,
                t: t_pre + mid,
            });
        }
        if c_mid.abs() < opts.condition_tol {
            return Ok(EventHit {
                dt: mid,
                t: t_pre + mid,
                state: x_mid,
            });
        }
        if c_mid.signum() == c_pre.signum() {
            lo = mid;
        } else {
            hi = mid;
            x_hi = x_mid;
        }
        if hi - lo < opts.bracket_rel * dt {
            // Take the far side of the bracket so the reset sees a crossed state.
            return Ok(EventHit {
                dt: hi,
                t: t_pre + hi,
                state: x_hi,
            });
        }
    }
    Err(Error::EventLocation {
        guard: guard + 1,
        t: t_pre,
    })
}

fn crosses(g: &GuardedReset, x_pre: &[f64], x_post: &[f64], tol: f64) -> bool {
    if !(g.armed)(x_pre) {
        return false;
    }
    let c_pre = (g.condition)(x_pre);
    if c_pre.abs() < tol {
        return false;
    }
    let c_post = (g.condition)(x_post);
    c_post.abs() < tol || c_post.signum() != c_pre.signum()
}

/// Result of advancing the hybrid state across one grid step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    /// `(guard index, absolute event time)` in the order they fired.
    pub events: Vec<(usize, f64)>,
}

/// Advances `x` by `dt` with `u` held, handling every guard crossing inside
/// the step. The earliest crossing is processed first and the remainder of
/// the step is re-scanned from the reset state.
pub fn hybrid_step(
    spec: &HybridSystemSpec,
    x: &[f64],
    u: &[f64],
    t: f64,
    dt: f64,
    opts: &EventOptions,
) -> Result<StepOutcome> {
    advance(spec, x, u, t, dt, opts, None)
}

/// Shared body of [`hybrid_step`] and [`flow_to_event`]. With `stop_on`
/// set, returns right after the first reset of that guard.
fn advance(
    spec: &HybridSystemSpec,
    x: &[f64],
    u: &[f64],
    t: f64,
    dt: f64,
    opts: &EventOptions,
    stop_on: Option<usize>,
) -> Result<StepOutcome> {
    let mut state = x.to_vec();
    let mut elapsed = 0.0;
    let mut events = Vec::new();
    loop {
        let rem = dt - elapsed;
        let t_now = t + elapsed;
        if rem <= 0.0 {
            return Ok(StepOutcome { state, events });
        }
        let post = rk4_step(spec, &state, u, rem, t_now)?;

        let mut first: Option<(usize, EventHit)> = None;
        for (gi, g) in spec.guards.iter().enumerate() {
            if !crosses(g, &state, &post, opts.condition_tol) {
                continue;
            }
            let hit = locate_event_with(spec, gi, &state, u, t_now, rem, opts)?;
            if first.as_ref().map_or(true, |(_, best)| hit.dt < best.dt) {
                first = Some((gi, hit));
            }
        }

        let Some((gi, hit)) = first else {
            if post.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { t: t + dt });
            }
            return Ok(StepOutcome { state: post, events });
        };
        if events.len() >= opts.max_events_per_step {
            return Err(Error::Chattering {
                t: hit.t,
                limit: opts.max_events_per_step,
            });
        }
        let next = (spec.guards[gi].reset)(&hit.state);
        if next.len() != spec.n {
            return Err(Error::dims("reset output", spec.n, next.len()));
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: hit.t });
        }
        events.push((gi, hit.t));
        state = next;
        elapsed += hit.dt;
        if stop_on == Some(gi) {
            return Ok(StepOutcome { state, events });
        }
    }
}

/// Feedback evaluated once per sample; the output is held over the step.
pub trait Controller {
    /// `k` is the sample index into the simulation grid.
    fn control(&mut self, k: usize, x: &[f64]) -> Result<Vec<f64>>;
}

impl<F> Controller for F
where
    F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
{
    fn control(&mut self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        self(k, x)
    }
}

/// Controller that always returns zeros.
#[derive(Debug, Clone, Copy)]
pub struct ZeroControl(pub usize);

impl Controller for ZeroControl {
    fn control(&mut self, _k: usize, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trigger {
    /// Fires at the sample nearest to this time.
    AtTime(f64),
    /// Fires at the first sample after the given number of guard events.
    AfterEvents(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disturbance {
    pub trigger: Trigger,
    pub delta: Vec<f64>,
}

/// State increments applied at most once each, before the triggering sample
/// is recorded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DisturbanceSchedule {
    pub entries: Vec<Disturbance>,
}

impl DisturbanceSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn push(mut self, trigger: Trigger, delta: Vec<f64>) -> Self {
        self.entries.push(Disturbance { trigger, delta });
        self
    }

    fn due(&self, entry: usize, k: usize, t0: f64, dt: f64, events: usize) -> bool {
        match self.entries[entry].trigger {
            Trigger::AtTime(t) => {
                let idx = ((t - t0) / dt).round();
                idx >= 0.0 && idx as usize == k
            }
            Trigger::AfterEvents(c) => events >= c,
        }
    }
}

/// Uniformly sampled simulation log.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub t0: f64,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// `(sample index, 1-based guard id)`; the sample is the first one
    /// recorded after the reset.
    pub events: Vec<(usize, usize)>,
    /// `(schedule entry, sample index)` for every disturbance that fired.
    pub disturbances: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn m(&self) -> usize {
        self.controls.first().map_or(0, Vec::len)
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// Snapshot `z_k = [x_k; u_k]`.
    pub fn snapshot(&self, k: usize) -> Vec<f64> {
        let mut z = self.states[k].clone();
        z.extend_from_slice(&self.controls[k]);
        z
    }

    /// Guard id logged at sample `k`, if any (the last one when several fired).
    pub fn event_at(&self, k: usize) -> Option<usize> {
        self.events.iter().rev().find(|(s, _)| *s == k).map(|&(_, g)| g)
    }

    /// Samples `start..end` as a new trajectory with `t0` shifted accordingly.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        let end = end.min(self.len());
        let start = start.min(end);
        Trajectory {
            dt: self.dt,
            t0: self.time(start),
            states: self.states[start..end].to_vec(),
            controls: self.controls[start..end].to_vec(),
            events: self
                .events
                .iter()
                .filter(|(s, _)| (start..end).contains(s))
                .map(|&(s, g)| (s - start, g))
                .collect(),
            disturbances: self
                .disturbances
                .iter()
                .filter(|(_, s)| (start..end).contains(s))
                .map(|&(e, s)| (e, s - start))
                .collect(),
        }
    }
}

/// Number of grid samples for a run of `duration` at step `dt`, counting both
/// end points.
pub fn sample_count(duration: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "duration must be >= 0, got {duration}"
        )));
    }
    let steps = (duration / dt).round();
    if (steps * dt - duration).abs() > 1e-9 * duration.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "duration {duration} is not an integer multiple of dt {dt}"
        )));
    }
    Ok(steps as usize + 1)
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub t0: f64,
    pub events: EventOptions,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            t0: 0.0,
            events: EventOptions::default(),
        }
    }
}

/// Simulates `samples` grid points starting from `x0` at time 0.
pub fn simulate(
    spec: &HybridSystemSpec,
    x0: &[f64],
    controller: &mut dyn Controller,
    samples: usize,
    dt: f64,
    dist: &DisturbanceSchedule,
) -> Result<Trajectory> {
    simulate_with(spec, x0, controller, samples, dt, dist, &SimOptions::default())
}

pub fn simulate_with(
    spec: &HybridSystemSpec,
    x0: &[f64],
    controller: &mut dyn Controller,
    samples: usize,
    dt: f64,
    dist: &DisturbanceSchedule,
    opts: &SimOptions,
) -> Result<Trajectory> {
    spec.check_state(x0, "initial state")?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if samples == 0 {
        return Err(Error::InvalidParameter("a trajectory needs at least one sample".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial state".into()));
    }
    for d in &dist.entries {
        spec.check_state(&d.delta, "disturbance delta")?;
    }

    let mut traj = Trajectory {
        dt,
        t0: opts.t0,
        states: Vec::with_capacity(samples),
        controls: Vec::with_capacity(samples),
        events: Vec::new(),
        disturbances: Vec::new(),
    };
    let mut fired = vec![false; dist.entries.len()];
    let mut x = x0.to_vec();

    for k in 0..samples {
        let t = opts.t0 + k as f64 * dt;
        for (i, entry) in dist.entries.iter().enumerate() {
            if !fired[i] && dist.due(i, k, opts.t0, dt, traj.events.len()) {
                for (xi, di) in x.iter_mut().zip(&entry.delta) {
                    *xi += di;
                }
                fired[i] = true;
                traj.disturbances.push((i, k));
            }
        }

        let u = controller.control(k, &x)?;
        spec.check_control(&u)?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("control at sample {k}")));
        }
        traj.states.push(x.clone());
        traj.controls.push(u.clone());

        if k + 1 < samples {
            let out = hybrid_step(spec, &x, &u, t, dt, &opts.events)?;
            for (gi, _) in out.events {
                traj.events.push((k + 1, gi + 1));
            }
            x = out.state;
        }
    }
    Ok(traj)
}

/// Integrates an autonomous spec (`m = 0`) from `x0` in steps of `dt` until
/// the first event of `guard`, returning the post-reset state and the
/// elapsed time to the event. Gives up after `cap` time units, and reports
/// [`Error::Fall`] as soon as `failed` holds on a grid state.
pub fn flow_to_event(
    spec: &HybridSystemSpec,
    x0: &[f64],
    guard: usize,
    dt: f64,
    cap: f64,
    opts: &EventOptions,
    failed: &dyn Fn(&[f64]) -> bool,
) -> Result<(Vec<f64>, f64)> {
    spec.check_state(x0, "initial state")?;
    if spec.m != 0 {
        return Err(Error::InvalidParameter("flow_to_event needs an autonomous spec".into()));
    }
    if guard >= spec.guards.len() {
        return Err(Error::InvalidParameter(format!("no guard with index {guard}")));
    }
    let mut x = x0.to_vec();
    let steps = (cap / dt).ceil() as usize;
    for k in 0..steps {
        let t = k as f64 * dt;
        let out = advance(spec, &x, &[], t, dt, opts, Some(guard))?;
        if let Some(&(_, te)) = out.events.iter().find(|(g, _)| *g == guard) {
            return Ok((out.state, te));
        }
        x = out.state;
        if failed(&x) {
            return Err(Error::Fall { t: t + dt });
        }
    }
    Err(Error::NoReturn { cap })
}
