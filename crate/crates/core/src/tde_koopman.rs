//! Time-delay EDMD with control.
//!
//! Snapshots are `z_k = [x_k; u_k]` and the lifted state is the interleaved
//! window `[z_{k-N}; ...; z_k]`. `L` is fitted by least squares between two
//! Hankel matrices shifted by one sample, then permuted so that all states
//! come before all controls.

use crate::error::{Error, Result};
use crate::hybrid_sim::Trajectory;
use crate::numkernel::{pinv, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HankelParams {
    /// Delay depth `N`: the window holds `N + 1` snapshots.
    pub delays: usize,
    /// `M`: the Hankel matrices have `M + 1` columns.
    pub columns: usize,
}

impl HankelParams {
    pub fn validate(&self) -> Result<()> {
        if self.delays == 0 || self.columns == 0 {
            return Err(Error::InvalidParameter(format!(
                "Hankel delays and columns must be >= 1, got N={} M={}",
                self.delays, self.columns
            )));
        }
        Ok(())
    }

    /// Samples needed from `start` on to build both Hankel matrices.
    pub fn required_samples(&self) -> usize {
        self.delays + self.columns + 2
    }
}

/// Interleaved delay vector `[z_{end-N}; ...; z_end]`.
pub fn delay_window(traj: &Trajectory, end: usize, delays: usize) -> Result<Vec<f64>> {
    if end >= traj.len() || end < delays {
        return Err(Error::InsufficientSamples {
            required: delays + 1,
            available: end.min(traj.len()) + 1,
        });
    }
    let mut v = Vec::with_capacity((traj.n() + traj.m()) * (delays + 1));
    for k in end - delays..=end {
        v.extend_from_slice(&traj.states[k]);
        v.extend_from_slice(&traj.controls[k]);
    }
    Ok(v)
}

/// `H0` has column `c` equal to the window ending at `start + N + c`; `H1` is
/// the same one sample later.
pub fn build_hankel_pair(traj: &Trajectory, hp: &HankelParams, start: usize) -> Result<(Matrix, Matrix)> {
    hp.validate()?;
    let need = start + hp.required_samples();
    if traj.len() < need {
        return Err(Error::InsufficientSamples {
            required: need,
            available: traj.len(),
        });
    }
    let p = traj.n() + traj.m();
    let rows = p * (hp.delays + 1);
    let cols = hp.columns + 1;
    let fill = |offset: usize| {
        let mut h = Matrix::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..=hp.delays {
                let k = offset + r + c;
                let base = r * p;
                for (i, v) in traj.states[k].iter().chain(&traj.controls[k]).enumerate() {
                    h[(base + i, c)] = *v;
                }
            }
        }
        h
    };
    Ok((fill(start), fill(start + 1)))
}

/// `L = H1 * pinv(H0)`.
pub fn fit_l(h0: &Matrix, h1: &Matrix, rtol: f64) -> Result<Matrix> {
    if h0.shape() != h1.shape() {
        return Err(Error::dims(
            "Hankel pair",
            format!("{:?}", h0.shape()),
            format!("{:?}", h1.shape()),
        ));
    }
    Ok(h1 * pinv(h0, rtol)?)
}

/// `||L H0 - H1||_F / ||H1||_F`.
pub fn relative_residual(l: &Matrix, h0: &Matrix, h1: &Matrix) -> f64 {
    let denom = h1.norm();
    let num = (l * h0 - h1).norm();
    if denom > 0.0 {
        num / denom
    } else {
        num
    }
}

/// `perm[j]` is the row that interleaved position `j` moves to: state row `r`
/// of block `k` goes to `k n + r`, control row `s` of block `k` goes to
/// `(N+1) n + k m + s`.
pub fn permutation_indices(n: usize, m: usize, delays: usize) -> Vec<usize> {
    let p = n + m;
    let mut perm = vec![0; p * (delays + 1)];
    for k in 0..=delays {
        for r in 0..n {
            perm[k * p + r] = k * n + r;
        }
        for s in 0..m {
            perm[k * p + n + s] = (delays + 1) * n + k * m + s;
        }
    }
    perm
}

/// Permutation matrix with `P[perm[j], j] = 1`, so `P v` lists the states of
/// an interleaved window first and its controls after.
pub fn permutation_matrix(n: usize, m: usize, delays: usize) -> Matrix {
    let perm = permutation_indices(n, m, delays);
    let mut p = Matrix::zeros(perm.len(), perm.len());
    for (j, &i) in perm.iter().enumerate() {
        p[(i, j)] = 1.0;
    }
    p
}

/// `P L P^T`.
pub fn reorder(l: &Matrix, p: &Matrix) -> Result<Matrix> {
    if !l.is_square() || p.shape() != l.shape() {
        return Err(Error::dims(
            "reorder",
            format!("square {:?}", p.shape()),
            format!("{:?}", l.shape()),
        ));
    }
    Ok(p * l * p.transpose())
}

/// Same as [`reorder`] by index shuffling.
fn permute_rows_cols(l: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(l.nrows(), l.ncols());
    for j in 0..l.ncols() {
        for i in 0..l.nrows() {
            out[(perm[i], perm[j])] = l[(i, j)];
        }
    }
    out
}

/// Identified linear model of the lifted dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub n: usize,
    pub m: usize,
    pub delays: usize,
    pub dt: f64,
    /// Operator on the interleaved delay vector.
    pub l: Matrix,
    /// `P L P^T`: operator on the reordered vector (states, then controls).
    pub lbar: Matrix,
    pub p: Matrix,
}

impl KoopmanModel {
    pub fn side(n: usize, m: usize, delays: usize) -> usize {
        (n + m) * (delays + 1)
    }

    pub fn from_l(n: usize, m: usize, delays: usize, dt: f64, l: Matrix) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("model state dimension must be >= 1".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("model dt must be positive, got {dt}")));
        }
        let side = Self::side(n, m, delays);
        if l.shape() != (side, side) {
            return Err(Error::dims(
                "L",
                format!("{side}x{side}"),
                format!("{}x{}", l.nrows(), l.ncols()),
            ));
        }
        crate::numkernel::ensure_finite(&l, "L")?;
        let lbar = permute_rows_cols(&l, &permutation_indices(n, m, delays));
        Ok(KoopmanModel {
            n,
            m,
            delays,
            dt,
            l,
            lbar,
            p: permutation_matrix(n, m, delays),
        })
    }

    /// Fits `L` on `traj` from sample `start`.
    pub fn fit(traj: &Trajectory, hp: &HankelParams, rtol: f64, start: usize) -> Result<(Self, FitReport)> {
        let (h0, h1) = build_hankel_pair(traj, hp, start)?;
        let l = fit_l(&h0, &h1, rtol)?;
        let report = FitReport {
            relative_residual: relative_residual(&l, &h0, &h1),
            hankel_rows: h0.nrows(),
            hankel_cols: h0.ncols(),
        };
        Ok((Self::from_l(traj.n(), traj.m(), hp.delays, traj.dt, l)?, report))
    }

    pub fn side_len(&self) -> usize {
        Self::side(self.n, self.m, self.delays)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub relative_residual: f64,
    pub hankel_rows: usize,
    pub hankel_cols: usize,
}

/// `A`: top-left `n(N+1)` block of `L̄`; `B`: the `n(N+1) x m(N+1)` block to
/// its right.
pub fn extract_blocks(model: &KoopmanModel) -> (Matrix, Matrix) {
    let ns = model.n * (model.delays + 1);
    let ms = model.m * (model.delays + 1);
    let a = model.lbar.view((0, 0), (ns, ns)).into_owned();
    let b = model.lbar.view((0, ns), (ns, ms)).into_owned();
    (a, b)
}

/// Norm above which a rollout is declared divergent.
pub const ROLLOUT_LIMIT: f64 = 1e9;

/// Applies `L` repeatedly to `window0` and returns the newest snapshot after
/// each step, preceded by the last snapshot of `window0` itself.
pub fn rollout_predict(model: &KoopmanModel, window0: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    let side = model.side_len();
    if window0.len() != side {
        return Err(Error::dims("initial delay window", side, window0.len()));
    }
    let p = model.n + model.m;
    let mut v = nalgebra::DVector::from_column_slice(window0);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(window0[side - p..].to_vec());
    for step in 1..=steps {
        v = &model.l * v;
        let norm = v.norm();
        if !(norm <= ROLLOUT_LIMIT) {
            return Err(Error::RolloutDiverged { step, norm });
        }
        out.push(v.as_slice()[side - p..].to_vec());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj_from(states: Vec<Vec<f64>>, controls: Vec<Vec<f64>>) -> Trajectory {
        Trajectory {
            dt: 0.1,
            t0: 0.0,
            states,
            controls,
            events: Vec::new(),
            disturbances: Vec::new(),
        }
    }

    /// `x+ = F x + G u` with `u = -K x`, sampled exactly.
    fn linear_data(samples: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Matrix::from_row_slice(2, 2, &[0.95, 0.2, -0.2, 0.9]);
        let g = Matrix::from_row_slice(2, 1, &[0.0, 0.1]);
        let k = Matrix::from_row_slice(1, 2, &[0.3, -0.1]);
        let mut x = Matrix::from_column_slice(2, 1, &[rng.random_range(0.5..1.0), rng.random_range(-1.0..-0.5)]);
        let (mut xs, mut us) = (Vec::new(), Vec::new());
        for _ in 0..samples {
            let u = -(&k * &x);
            xs.push(x.as_slice().to_vec());
            us.push(u.as_slice().to_vec());
            x = &f * &x + &g * &u;
        }
        traj_from(xs, us)
    }

    #[test]
    fn smallest_hankel() {
        let t = traj_from(vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]], vec![vec![]; 4]);
        let (h0, h1) = build_hankel_pair(&t, &HankelParams { delays: 1, columns: 1 }, 0).unwrap();
        assert_eq!(h0, Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]));
        assert_eq!(h1, Matrix::from_row_slice(2, 2, &[2.0, 3.0, 3.0, 4.0]));
    }

    #[test]
    fn hankel_shapes_and_shift() {
        let t = linear_data(300, 1);
        let hp = HankelParams {
            delays: 110,
            columns: 90,
        };
        let (h0, h1) = build_hankel_pair(&t, &hp, 3).unwrap();
        assert_eq!(h0.shape(), (333, 91));
        assert_eq!(h0.columns(1, 90), h1.columns(0, 90));
        assert_eq!(h0[(0, 0)], t.states[3][0]);
        assert_eq!(h0[(332, 90)], t.controls[3 + 110 + 90][0]);
    }

    #[test]
    fn hankel_needs_enough_samples() {
        let t = linear_data(201, 1);
        let err = build_hankel_pair(
            &t,
            &HankelParams {
                delays: 110,
                columns: 90,
            },
            0,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientSamples {
                required: 202,
                available: 201
            }
        ));
    }

    #[test]
    fn fit_scalar_decay_exact() {
        let t = traj_from((0..30).map(|k| vec![0.9_f64.powi(k)]).collect(), vec![vec![]; 30]);
        let (h0, h1) = build_hankel_pair(&t, &HankelParams { delays: 3, columns: 10 }, 0).unwrap();
        let l = fit_l(&h0, &h1, 1e-10).unwrap();
        assert!((&l * &h0 - &h1).norm() < 1e-10);
    }

    #[test]
    fn fit_constant_reproduces() {
        let t = traj_from(vec![vec![2.5]; 20], vec![vec![]; 20]);
        let (h0, h1) = build_hankel_pair(&t, &HankelParams { delays: 2, columns: 5 }, 0).unwrap();
        let l = fit_l(&h0, &h1, 1e-10).unwrap();
        assert!((&l * &h0 - &h1).norm() < 1e-12);
    }

    #[test]
    fn fit_recovers_linear_system() {
        let t = linear_data(120, 5);
        let (h0, h1) = build_hankel_pair(&t, &HankelParams { delays: 4, columns: 60 }, 0).unwrap();
        let l = fit_l(&h0, &h1, 1e-10).unwrap();
        assert!(relative_residual(&l, &h0, &h1) < 1e-9);
    }

    #[test]
    fn permutation_small_case() {
        let p = permutation_matrix(1, 1, 1);
        let expect = Matrix::from_row_slice(4, 4, &[1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0., 0., 0., 0., 0., 1.]);
        assert_eq!(p, expect);
        assert_eq!(permutation_matrix(3, 0, 4), Matrix::identity(15, 15));
    }

    #[test]
    fn permutation_orthogonal_up_to_walker_size() {
        for &(n, m, d) in &[(1, 1, 1), (2, 1, 110), (4, 2, 300)] {
            let perm = permutation_indices(n, m, d);
            let mut seen = vec![false; perm.len()];
            for &i in &perm {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        let p = permutation_matrix(4, 2, 300);
        assert_eq!(p.nrows(), 1806);
        assert_eq!(&p * p.transpose(), Matrix::identity(1806, 1806));
        assert_eq!(p.transpose() * &p, Matrix::identity(1806, 1806));
    }

    #[test]
    fn reordered_vector_lists_states_then_controls() {
        let (n, m, d) = (2, 1, 3);
        let v: Vec<f64> = (0..(n + m) * (d + 1)).map(|i| i as f64).collect();
        let pv = permutation_matrix(n, m, d) * nalgebra::DVector::from_vec(v.clone());
        let mut expect = Vec::new();
        for k in 0..=d {
            expect.extend_from_slice(&v[k * 3..k * 3 + 2]);
        }
        for k in 0..=d {
            expect.push(v[k * 3 + 2]);
        }
        assert_eq!(pv.as_slice(), expect.as_slice());
    }

    #[test]
    fn reorder_trivial_and_roundtrip() {
        let p = permutation_matrix(2, 1, 2);
        let id = Matrix::identity(9, 9);
        assert_eq!(reorder(&id, &p).unwrap(), id);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Matrix::from_fn(9, 9, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(reorder(&l, &id).unwrap(), l);
        let back = reorder(&reorder(&l, &p).unwrap(), &p.transpose()).unwrap();
        assert_eq!(back, l);
        assert!(reorder(&l, &Matrix::identity(3, 3)).is_err());
    }

    #[test]
    fn model_lbar_matches_triple_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = Matrix::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
        let model = KoopmanModel::from_l(2, 1, 3, 0.01, l.clone()).unwrap();
        assert_eq!(model.lbar, reorder(&l, &model.p).unwrap());
    }

    #[test]
    fn blocks_of_identity() {
        let model = KoopmanModel::from_l(2, 1, 110, 0.01, Matrix::identity(333, 333)).unwrap();
        let (a, b) = extract_blocks(&model);
        assert_eq!(a, Matrix::identity(222, 222));
        assert_eq!(b.shape(), (222, 111));
        assert!(b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rollout_exact_linear() {
        let t = linear_data(260, 2);
        let hp = HankelParams { delays: 4, columns: 60 };
        let (model, _) = KoopmanModel::fit(&t, &hp, 1e-10, 0).unwrap();
        let w = delay_window(&t, 4, 4).unwrap();
        let pred = rollout_predict(&model, &w, 100).unwrap();
        assert_eq!(pred.len(), 101);
        for (i, z) in pred.iter().enumerate() {
            let truth = t.snapshot(4 + i);
            for (a, b) in z.iter().zip(&truth) {
                assert!((a - b).abs() < 1e-8, "step {i}");
            }
        }
    }

    #[test]
    fn rollout_zero_steps() {
        let model = KoopmanModel::from_l(1, 1, 1, 0.1, Matrix::identity(4, 4)).unwrap();
        let pred = rollout_predict(&model, &[1.0, 2.0, 3.0, 4.0], 0).unwrap();
        assert_eq!(pred, vec![vec![3.0, 4.0]]);
    }

    #[test]
    fn rollout_divergence() {
        let model = KoopmanModel::from_l(1, 0, 0, 0.1, Matrix::from_element(1, 1, 10.0)).unwrap();
        let err = rollout_predict(&model, &[1.0], 20).unwrap_err();
        assert!(matches!(err, Error::RolloutDiverged { step: 10, .. }));
    }

    #[test]
    fn model_rejects_bad_sizes() {
        assert!(KoopmanModel::from_l(2, 1, 1, 0.1, Matrix::identity(5, 5))
            .unwrap_err()
            .is_validation());
        assert!(KoopmanModel::from_l(2, 1, 1, 0.0, Matrix::identity(6, 6))
            .unwrap_err()
            .is_validation());
    }

    #[test]
    fn delay_window_order() {
        let t = traj_from(
            vec![vec![1.0], vec![2.0], vec![3.0]],
            vec![vec![10.0], vec![20.0], vec![30.0]],
        );
        assert_eq!(delay_window(&t, 2, 1).unwrap(), vec![2.0, 20.0, 3.0, 30.0]);
        assert!(delay_window(&t, 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn permutation_is_a_bijection(n in 1usize..5, m in 0usize..3, d in 0usize..20) {
            let mut perm = permutation_indices(n, m, d);
            perm.sort_unstable();
            prop_assert_eq!(perm, (0..(n + m) * (d + 1)).collect::<Vec<_>>());
        }

        #[test]
        fn lbar_blocks_match_index_formula(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, m, d) = (2, 1, 2);
            let side = 9;
            let l = Matrix::from_fn(side, side, |_, _| rng.random_range(-1.0..1.0));
            let model = KoopmanModel::from_l(n, m, d, 0.1, l.clone()).unwrap();
            let (a, _) = extract_blocks(&model);
            // A[k n + r, j n + q] is L at interleaved (k p + r, j p + q).
            for k in 0..=d { for r in 0..n { for j in 0..=d { for q in 0..n {
                prop_assert_eq!(a[(k * n + r, j * n + q)], l[(k * 3 + r, j * 3 + q)]);
            }}}}
            assert_relative_eq!(model.lbar.norm(), l.norm(), epsilon = 1e-12);
        }
    }
}
