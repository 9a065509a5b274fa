//! LQR on the stacked window of state errors.
//!
//! With `A`, `B` taken from the reordered operator, the error window
//! `e_k = [x_{k-N} - xd_{k-N}; ...; x_k - xd_k]` obeys `e+ = A e + B du`
//! where `du` stacks control corrections over the window. The controller
//! applies the reference control plus the newest block of `-K e_k`.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::hybrid_sim::{Controller, Trajectory};
use crate::numkernel::{lqr_solve, DareOptions, LqrSolution, Matrix};
use crate::tde_koopman::{extract_blocks, KoopmanModel};

/// Gain for `Q = diag(q_diag)`, `R = diag(r_diag)`.
pub fn synthesize(a: &Matrix, b: &Matrix, q_diag: &[f64], r_diag: &[f64], opts: &DareOptions) -> Result<LqrSolution> {
    if q_diag.len() != a.nrows() {
        return Err(Error::dims("Q diagonal", a.nrows(), q_diag.len()));
    }
    if r_diag.len() != b.ncols() {
        return Err(Error::dims("R diagonal", b.ncols(), r_diag.len()));
    }
    if q_diag.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter("Q weights must be finite and >= 0".into()));
    }
    if r_diag.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter("R weights must be finite and > 0".into()));
    }
    let q = Matrix::from_diagonal(&nalgebra::DVector::from_column_slice(q_diag));
    let r = Matrix::from_diagonal(&nalgebra::DVector::from_column_slice(r_diag));
    lqr_solve(a, b, &q, &r, opts)
}

/// Gain for a model with the same weight on every state and every control.
pub fn synthesize_for_model(model: &KoopmanModel, q: f64, r: f64, opts: &DareOptions) -> Result<LqrSolution> {
    let (a, b) = extract_blocks(model);
    synthesize(&a, &b, &vec![q; a.nrows()], &vec![r; b.ncols()], opts)
}

/// Stateful tracking controller. Sample `k` of the plant is matched with
/// sample `k` of the reference.
#[derive(Debug, Clone)]
pub struct HistoryLqrController {
    gain: Matrix,
    /// Last `m` rows of the gain: the only ones that act on the plant.
    newest: Matrix,
    reference: Trajectory,
    n: usize,
    delays: usize,
    history: VecDeque<Vec<f64>>,
}

impl HistoryLqrController {
    pub fn new(gain: Matrix, reference: Trajectory, n: usize, m: usize, delays: usize) -> Result<Self> {
        let rows = m * (delays + 1);
        let cols = n * (delays + 1);
        if gain.shape() != (rows, cols) {
            return Err(Error::dims(
                "LQR gain",
                format!("{rows}x{cols}"),
                format!("{}x{}", gain.nrows(), gain.ncols()),
            ));
        }
        if reference.n() != n || reference.m() != m {
            return Err(Error::dims(
                "reference dimensions",
                format!("n={n} m={m}"),
                format!("n={} m={}", reference.n(), reference.m()),
            ));
        }
        let newest = gain.rows(rows - m, m).into_owned();
        Ok(HistoryLqrController {
            gain,
            newest,
            reference,
            n,
            delays,
            history: VecDeque::with_capacity(delays + 2),
        })
    }

    pub fn gain(&self) -> &Matrix {
        &self.gain
    }

    pub fn reference(&self) -> &Trajectory {
        &self.reference
    }

    pub fn is_warm(&self) -> bool {
        self.history.len() == self.delays + 1
    }

    fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::dims("state", self.n, x.len()));
        }
        self.history.push_back(x.to_vec());
        while self.history.len() > self.delays + 1 {
            self.history.pop_front();
        }
        Ok(())
    }

    fn reference_at(&self, k: usize) -> Result<()> {
        if k >= self.reference.len() {
            return Err(Error::ReferenceExhausted {
                index: k,
                len: self.reference.len(),
            });
        }
        Ok(())
    }

    /// Stacked error window ending at sample `k`, oldest first.
    fn error_window(&self, k: usize) -> Result<nalgebra::DVector<f64>> {
        if !self.is_warm() || k < self.delays {
            return Err(Error::BufferNotWarm {
                have: self.history.len(),
                need: self.delays + 1,
            });
        }
        let mut e = nalgebra::DVector::zeros(self.n * (self.delays + 1));
        for (i, x) in self.history.iter().enumerate() {
            let xd = &self.reference.states[k - self.delays + i];
            for j in 0..self.n {
                e[i * self.n + j] = x[j] - xd[j];
            }
        }
        Ok(e)
    }

    /// Full stacked correction `-K e_k` for the current buffer.
    pub fn correction(&self, k: usize) -> Result<Vec<f64>> {
        self.reference_at(k)?;
        let e = self.error_window(k)?;
        Ok((-(&self.gain * e)).as_slice().to_vec())
    }

    /// Records `x_k` and returns `ud_k` plus the newest block of `-K e_k`.
    pub fn control_step(&mut self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.reference_at(k)?;
        self.push(x)?;
        let e = self.error_window(k)?;
        let du = &self.newest * e;
        Ok(self.reference.controls[k]
            .iter()
            .zip(du.iter())
            .map(|(ud, d)| ud - d)
            .collect())
    }
}

/// During the first `N` samples the buffer fills and the reference control
/// is applied unchanged; afterwards every call goes through
/// [`HistoryLqrController::control_step`].
impl Controller for HistoryLqrController {
    fn control(&mut self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        if k < self.delays {
            self.reference_at(k)?;
            self.push(x)?;
            return Ok(self.reference.controls[k].clone());
        }
        self.control_step(k, x)
    }
}
