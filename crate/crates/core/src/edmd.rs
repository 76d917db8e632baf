//! Closed-form Koopman identification over a fixed dictionary: RBF lifting,
//! least-squares fit of [A B] and of the linear read-out C, and the spectrum
//! of the identified autonomous part.

use crate::error::{CoreError, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Gaussian radial basis dictionary. Lifted coordinates are
/// `exp(-||x - c_j||^2 / w_j^2)` per center, optionally preceded by the raw
/// state.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfDictionary {
    /// L x k center matrix (one row per center).
    pub centers: DMatrix<f64>,
    /// L positive widths.
    pub widths: DVector<f64>,
    pub include_state: bool,
}

impl RbfDictionary {
    pub fn validate(&self) -> Result<()> {
        if self.centers.nrows() == 0 {
            return Err(CoreError::InvalidParameter(
                "RBF dictionary needs at least one center".into(),
            ));
        }
        if self.widths.len() != self.centers.nrows() {
            return Err(CoreError::InvalidParameter(
                "one width per center required".into(),
            ));
        }
        if self.widths.iter().any(|w| *w <= 0.0) {
            return Err(CoreError::InvalidParameter("RBF widths must be positive".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn lifted_dim(&self) -> usize {
        self.centers.nrows() + if self.include_state { self.state_dim() } else { 0 }
    }

    /// K-means-style coverage of the provided states (rows), widths set to
    /// the median pairwise center distance. Deterministic under `seed`.
    pub fn from_data(states: &DMatrix<f64>, num_centers: usize, include_state: bool, seed: u64) -> Result<Self> {
        let n = states.nrows();
        let k = states.ncols();
        if n == 0 || num_centers == 0 {
            return Err(CoreError::InvalidParameter(
                "need data rows and at least one center".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let l = num_centers.min(n);

        // k-means++ seeding.
        let mut centers: Vec<DVector<f64>> = Vec::with_capacity(l);
        centers.push(states.row(rng.gen_range(0..n)).transpose());
        let mut d2 = vec![0.0f64; n];
        while centers.len() < l {
            let mut total = 0.0;
            for i in 0..n {
                let row = states.row(i).transpose();
                d2[i] = centers
                    .iter()
                    .map(|c| (&row - c).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                total += d2[i];
            }
            if total <= 1e-18 {
                break;
            }
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for i in 0..n {
                if target < d2[i] {
                    pick = i;
                    break;
                }
                target -= d2[i];
            }
            centers.push(states.row(pick).transpose());
        }
        // A few Lloyd iterations tighten coverage.
        for _ in 0..8 {
            let mut sums = vec![DVector::<f64>::zeros(k); centers.len()];
            let mut counts = vec![0usize; centers.len()];
            for i in 0..n {
                let row = states.row(i).transpose();
                let (best, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(j, c)| (j, (&row - c).norm_squared()))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap();
                sums[best] += row;
                counts[best] += 1;
            }
            for (j, c) in centers.iter_mut().enumerate() {
                if counts[j] > 0 {
                    *c = &sums[j] / counts[j] as f64;
                }
            }
        }

        let mut dists = Vec::new();
        for i in 0..centers.len() {
            for j in 0..i {
                dists.push((&centers[i] - &centers[j]).norm());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if dists.is_empty() {
            1.0
        } else {
            dists[dists.len() / 2].max(1e-3)
        };

        let mut center_mat = DMatrix::<f64>::zeros(centers.len(), k);
        for (j, c) in centers.iter().enumerate() {
            center_mat.set_row(j, &c.transpose());
        }
        let dict = Self {
            centers: center_mat,
            widths: DVector::from_element(centers.len(), median),
            include_state,
        };
        dict.validate()?;
        Ok(dict)
    }
}

/// How raw states map into the lifted space.
#[derive(Debug, Clone, PartialEq)]
pub enum Lifting {
    /// phi(x) = x; for data that is already linear in its own coordinates.
    Identity { dim: usize },
    Rbf(RbfDictionary),
}

impl Lifting {
    pub fn state_dim(&self) -> usize {
        match self {
            Lifting::Identity { dim } => *dim,
            Lifting::Rbf(d) => d.state_dim(),
        }
    }

    pub fn lifted_dim(&self) -> usize {
        match self {
            Lifting::Identity { dim } => *dim,
            Lifting::Rbf(d) => d.lifted_dim(),
        }
    }

    pub fn lift(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Lifting::Identity { .. } => x.clone(),
            Lifting::Rbf(d) => lift_rbf(x, d),
        }
    }
}

/// Evaluate the dictionary at `x`.
pub fn lift_rbf(x: &DVector<f64>, dict: &RbfDictionary) -> DVector<f64> {
    let l = dict.centers.nrows();
    let mut out = DVector::<f64>::zeros(dict.lifted_dim());
    let mut idx = 0;
    if dict.include_state {
        for i in 0..x.len() {
            out[idx] = x[i];
            idx += 1;
        }
    }
    for j in 0..l {
        let c = dict.centers.row(j).transpose();
        let w = dict.widths[j];
        out[idx] = (-(x - c).norm_squared() / (w * w)).exp();
        idx += 1;
    }
    out
}

/// Identified linear blocks plus the fit residual.
#[derive(Debug, Clone)]
pub struct EdmdFit {
    /// d x d autonomous block.
    pub a: DMatrix<f64>,
    /// d x 1 input block.
    pub b: DMatrix<f64>,
    /// 2 x d read-out fitted against the first two state components.
    pub c: DMatrix<f64>,
    /// Frobenius norm of the one-step lifted residual over the data.
    pub residual: f64,
}

const RANK_TOL_REL: f64 = 1e-10;

/// Least squares `[A B] = argmin sum ||phi(x') - A phi(x) - B u||^2` via SVD,
/// then `C = argmin sum ||x'_(v,h) - C phi(x')||^2`.
///
/// Requires at least d+1 snapshot pairs and a full-rank lifted data matrix.
pub fn fit_edmd(snapshots: &[(DVector<f64>, f64, DVector<f64>)], lifting: &Lifting) -> Result<EdmdFit> {
    if let Lifting::Rbf(d) = lifting {
        d.validate()?;
    }
    let d = lifting.lifted_dim();
    let m = snapshots.len();
    if m < d + 1 {
        return Err(CoreError::InsufficientData { got: m, need: d + 1 });
    }
    let state_dim = lifting.state_dim();
    if state_dim < 2 {
        return Err(CoreError::InvalidParameter(
            "EDMD read-out expects states with at least (v, h) components".into(),
        ));
    }

    let mut regressors = DMatrix::<f64>::zeros(m, d + 1);
    let mut lifted_next = DMatrix::<f64>::zeros(m, d);
    let mut observed_next = DMatrix::<f64>::zeros(m, 2);
    for (row, (x, u, x_next)) in snapshots.iter().enumerate() {
        let phi = lifting.lift(x);
        let phi_next = lifting.lift(x_next);
        for j in 0..d {
            regressors[(row, j)] = phi[j];
            lifted_next[(row, j)] = phi_next[j];
        }
        regressors[(row, d)] = *u;
        observed_next[(row, 0)] = x_next[0];
        observed_next[(row, 1)] = x_next[1];
    }

    // The lifted state data must span all d directions; the input column may
    // legitimately be zero (B then comes out as the minimum-norm solution).
    rank_check(&regressors.columns(0, d).into_owned())?;
    let weights = lstsq_pinv(&regressors, &lifted_next);
    let residual = (&regressors * &weights - &lifted_next).norm();
    // weights is (d+1) x d; transpose into [A | B].
    let ab = weights.transpose();
    let a = ab.columns(0, d).into_owned();
    let b = ab.columns(d, 1).into_owned();

    let c = lstsq_pinv(&lifted_next, &observed_next).transpose();

    Ok(EdmdFit { a, b, c, residual })
}

fn rank_check(a: &DMatrix<f64>) -> Result<()> {
    let cols = a.ncols();
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > RANK_TOL_REL * smax)
        .count();
    if rank < cols {
        return Err(CoreError::RankDeficient {
            rank,
            needed: cols,
            deficient: cols - rank,
        });
    }
    Ok(())
}

/// Minimum-norm least squares (pseudo-inverse); tolerant of rank deficiency.
fn lstsq_pinv(a: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max().max(1e-300);
    svd_solve(&svd, y, RANK_TOL_REL * smax)
}

fn svd_solve(
    svd: &nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    y: &DMatrix<f64>,
    tol: f64,
) -> DMatrix<f64> {
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let mut uty = u.transpose() * y;
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        let inv = if s > tol { 1.0 / s } else { 0.0 };
        for j in 0..uty.ncols() {
            uty[(i, j)] *= inv;
        }
    }
    vt.transpose() * uty
}

/// Stepwise linear evolution `s_f = A s_{f-1} + B u_{f-1}`.
pub fn evolve(a: &DMatrix<f64>, b: &DMatrix<f64>, s0: &DVector<f64>, inputs: &[f64]) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut s = s0.clone();
    for &u in inputs {
        s = a * &s + b * u;
        out.push(s.clone());
    }
    out
}

/// Eigen-structure of the autonomous part.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// Eigenvalues sorted by magnitude, largest first.
    pub eigenvalues: Vec<Complex<f64>>,
    pub magnitudes: Vec<f64>,
    /// Read-out of each eigenvector through C (one 2-vector per eigenvalue).
    pub modes: Vec<[Complex<f64>; 2]>,
    /// True when |lambda|_max exceeds 1 beyond tolerance: the autonomous
    /// lifted dynamics are unstable.
    pub unstable_autonomous: bool,
}

/// Eigen-decomposition of A with modes projected through C.
pub fn koopman_spectrum(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<SpectrumReport> {
    if a.nrows() != a.ncols() {
        return Err(CoreError::Eigen("A must be square".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Eigen("A contains non-finite entries".into()));
    }
    let d = a.nrows();
    let schur = a
        .clone()
        .try_schur(1e-12, 10_000)
        .ok_or_else(|| CoreError::Eigen("Schur decomposition did not converge".into()))?;
    let eigs = schur.complex_eigenvalues();

    let ac: DMatrix<Complex<f64>> = a.map(|v| Complex::new(v, 0.0));
    let mut items: Vec<(Complex<f64>, DVector<Complex<f64>>)> = Vec::with_capacity(d);
    let mut rng = ChaCha20Rng::seed_from_u64(0x5eed);
    for &lambda in eigs.iter() {
        let vec = inverse_iteration(&ac, lambda, &mut rng)?;
        items.push((lambda, vec));
    }
    items.sort_by(|x, y| y.0.norm().partial_cmp(&x.0.norm()).unwrap());

    let cc: DMatrix<Complex<f64>> = c.map(|v| Complex::new(v, 0.0));
    let mut eigenvalues = Vec::with_capacity(d);
    let mut magnitudes = Vec::with_capacity(d);
    let mut modes = Vec::with_capacity(d);
    for (lambda, vec) in items {
        let mode = &cc * &vec;
        eigenvalues.push(lambda);
        magnitudes.push(lambda.norm());
        modes.push([mode[0], mope_or(mode.get(1))]);
    }
    let unstable = magnitudes.first().map_or(false, |m| *m > 1.0 + 1e-9);
    Ok(SpectrumReport {
        eigenvalues,
        magnitudes,
        modes,
        unstable_autonomous: unstable,
    })
}

fn mope_or(v: Option<&Complex<f64>>) -> Complex<f64> {
    v.copied().unwrap_or_else(|| Complex::new(0.0, 0.0))
}

/// Two rounds of shifted inverse iteration give an eigenvector good to
/// working precision for well-separated eigenvalues; clustered ones still
/// land inside the right invariant subspace.
fn inverse_iteration(
    a: &DMatrix<Complex<f64>>,
    lambda: Complex<f64>,
    rng: &mut ChaCha20Rng,
) -> Result<DVector<Complex<f64>>> {
    let d = a.nrows();
    let scale = a.iter().map(|z| z.norm()).fold(1.0f64, f64::max);
    let shift = lambda + Complex::new(1e-10 * scale, 1e-10 * scale);
    let mut m = a.clone();
    for i in 0..d {
        m[(i, i)] -= shift;
    }
    let lu = m.lu();
    let mut v: DVector<Complex<f64>> = DVector::from_fn(d, |_, _| {
        Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    v /= Complex::new(v.norm(), 0.0);
    for _ in 0..3 {
        let solved = lu
            .solve(&v)
            .ok_or_else(|| CoreError::Eigen("singular shifted system in inverse iteration".into()))?;
        let norm = solved.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(CoreError::Eigen("inverse iteration diverged".into()));
        }
        v = solved / Complex::new(norm, 0.0);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn lift_values_at_center_and_width() {
        let dict = RbfDictionary {
            centers: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            widths: DVector::from_row_slice(&[0.5]),
            include_state: false,
        };
        let at_center = lift_rbf(&DVector::from_row_slice(&[1.0, -1.0]), &dict);
        assert_relative_eq!(at_center[0], 1.0);
        // ||x - c|| = w  ->  e^{-1}.
        let at_width = lift_rbf(&DVector::from_row_slice(&[1.5, -1.0]), &dict);
        assert_relative_eq!(at_width[0], (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn lift_shape_with_state() {
        let dict = RbfDictionary {
            centers: DMatrix::zeros(5, 3),
            widths: DVector::from_element(5, 1.0),
            include_state: true,
        };
        let out = lift_rbf(&DVector::from_row_slice(&[1.0, 2.0, 3.0]), &dict);
        assert_eq!(out.len(), 8);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[2], 3.0);
    }

    fn random_stable_system(d: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut r = rng(seed);
        let mut a = DMatrix::from_fn(d, d, |_, _| r.gen_range(-1.0..1.0));
        // Scale to spectral radius ~0.9 via power iteration estimate.
        let mut v: DVector<f64> = DVector::from_fn(d, |_, _| r.gen_range(-1.0..1.0));
        for _ in 0..100 {
            v = &a * v;
            v /= v.norm();
        }
        let rho = (&a * &v).norm();
        a *= 0.9 / rho.max(1e-9);
        let b = DMatrix::from_fn(d, 1, |_, _| r.gen_range(-1.0..1.0));
        (a, b)
    }

    #[test]
    fn exact_recovery_of_linear_system() {
        let d = 6;
        let (a_true, b_true) = random_stable_system(d, 3);
        let mut r = rng(4);
        let mut snapshots = Vec::new();
        for _ in 0..500 {
            let x = DVector::from_fn(d, |_, _| r.gen_range(-1.0..1.0));
            let u = r.gen_range(-1.0..1.0);
            let x_next = &a_true * &x + &b_true * u;
            snapshots.push((x, u, x_next));
        }
        let fit = fit_edmd(&snapshots, &Lifting::Identity { dim: d }).unwrap();
        assert!((&fit.a - &a_true).norm() < 1e-8, "A error {}", (&fit.a - &a_true).norm());
        assert!((&fit.b - &b_true).norm() < 1e-8);
        assert!(fit.residual < 1e-8);
    }

    #[test]
    fn identity_dynamics_yield_identity_operator() {
        let mut r = rng(5);
        let snapshots: Vec<_> = (0..50)
            .map(|_| {
                let x = DVector::from_fn(3, |_, _| r.gen_range(-1.0..1.0));
                (x.clone(), 0.0, x)
            })
            .collect();
        let fit = fit_edmd(&snapshots, &Lifting::Identity { dim: 3 }).unwrap();
        assert!((&fit.a - DMatrix::<f64>::identity(3, 3)).norm() < 1e-10);
        assert!(fit.b.norm() < 1e-10);
    }

    #[test]
    fn duplicate_snapshots_are_rank_deficient() {
        let x = DVector::from_row_slice(&[1.0, 2.0]);
        let snapshots: Vec<_> = (0..40).map(|_| (x.clone(), 0.5, x.clone())).collect();
        match fit_edmd(&snapshots, &Lifting::Identity { dim: 2 }) {
            Err(CoreError::RankDeficient { deficient, .. }) => assert!(deficient >= 1),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn insufficient_data_is_error() {
        let snapshots = vec![(DVector::zeros(4), 0.0, DVector::zeros(4))];
        assert!(matches!(
            fit_edmd(&snapshots, &Lifting::Identity { dim: 4 }),
            Err(CoreError::InsufficientData { .. })
        ));
    }

    #[test]
    fn fit_residual_matches_one_step_predictions() {
        // Nonlinear data under an RBF dictionary leaves a residual; it must
        // equal the replayed one-step error exactly.
        let mut r = rng(6);
        let mut snapshots = Vec::new();
        for _ in 0..160 {
            let x = DVector::from_fn(2, |_, _| r.gen_range(-1.0..1.0));
            let u: f64 = r.gen_range(-1.0..1.0);
            let x_next = DVector::from_row_slice(&[
                0.8 * x[0] + 0.1 * (x[1] as f64).sin() + 0.2 * u,
                0.9 * x[1] - 0.2 * x[0] * x[0],
            ]);
            snapshots.push((x, u, x_next));
        }
        let states = DMatrix::from_fn(snapshots.len(), 2, |i, j| snapshots[i].0[j]);
        let dict = RbfDictionary::from_data(&states, 12, true, 9).unwrap();
        let lifting = Lifting::Rbf(dict);
        let fit = fit_edmd(&snapshots, &lifting).unwrap();
        let mut sq = 0.0;
        for (x, u, x_next) in &snapshots {
            let err = &fit.a * lifting.lift(x) + &fit.b * *u - lifting.lift(x_next);
            sq += err.norm_squared();
        }
        assert_relative_eq!(sq.sqrt(), fit.residual, epsilon = 1e-9);
    }

    #[test]
    fn residual_non_increasing_with_more_centers() {
        let mut r = rng(7);
        let mut snapshots = Vec::new();
        for _ in 0..300 {
            let x = DVector::from_fn(2, |_, _| r.gen_range(-1.5..1.5));
            let u: f64 = r.gen_range(-1.0..1.0);
            let x_next = DVector::from_row_slice(&[
                (x[0] * 0.9 + 0.3 * u).tanh(),
                0.7 * x[1] + 0.2 * x[0].powi(2),
            ]);
            snapshots.push((x, u, x_next));
        }
        let states = DMatrix::from_fn(snapshots.len(), 2, |i, j| snapshots[i].0[j]);
        // Nested dictionaries: the larger one extends the smaller.
        let base = RbfDictionary::from_data(&states, 6, true, 1).unwrap();
        let extra = RbfDictionary::from_data(&states, 10, true, 2).unwrap();
        let mut centers = base.centers.clone().resize_vertically(base.centers.nrows() + 4, 0.0);
        let mut widths = base.widths.clone().resize_vertically(base.widths.len() + 4, 1.0);
        for j in 0..4 {
            centers.set_row(base.centers.nrows() + j, &extra.centers.row(j));
            widths[base.widths.len() + j] = extra.widths[j];
        }
        let bigger = RbfDictionary {
            centers,
            widths,
            include_state: true,
        };
        let fit_small = fit_edmd(&snapshots, &Lifting::Rbf(base)).unwrap();
        let fit_big = fit_edmd(&snapshots, &Lifting::Rbf(bigger)).unwrap();
        assert!(
            fit_big.residual <= fit_small.residual + 1e-9,
            "bigger dictionary must not fit worse: {} vs {}",
            fit_big.residual,
            fit_small.residual
        );
    }

    #[test]
    fn evolve_hand_example() {
        // Scalar system A=2, B=1, s0=1, inputs [1, 1] -> lifted states [3, 7].
        let a = DMatrix::from_row_slice(1, 1, &[2.0]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        let states = evolve(&a, &b, &DVector::from_row_slice(&[1.0]), &[1.0, 1.0]);
        assert_relative_eq!(states[0][0], 3.0);
        assert_relative_eq!(states[1][0], 7.0);
    }

    #[test]
    fn evolve_constant_under_identity() {
        let a = DMatrix::<f64>::identity(3, 3);
        let b = DMatrix::<f64>::zeros(3, 1);
        let s0 = DVector::from_row_slice(&[0.3, -1.0, 2.0]);
        for s in evolve(&a, &b, &s0, &[5.0; 7]) {
            assert!((s - &s0).norm() < 1e-15);
        }
    }

    #[test]
    fn spectrum_of_identity_and_diagonal() {
        let c = DMatrix::<f64>::zeros(2, 2);
        let rep = koopman_spectrum(&DMatrix::identity(2, 2), &c).unwrap();
        assert!(rep.magnitudes.iter().all(|m| (m - 1.0).abs() < 1e-12));
        assert!(!rep.unstable_autonomous);

        let diag = DMatrix::from_partial_diagonal(2, 2, &[0.5, 0.9]);
        let rep = koopman_spectrum(&diag, &c).unwrap();
        assert_relative_eq!(rep.magnitudes[0], 0.9, epsilon = 1e-12);
        assert_relative_eq!(rep.magnitudes[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn spectrum_eigenvectors_satisfy_definition() {
        let (a, _) = random_stable_system(5, 11);
        let c = DMatrix::<f64>::identity(2, 5);
        let rep = koopman_spectrum(&a, &c).unwrap();
        assert!(rep.magnitudes[0] <= 1.0 + 1e-6);
        // Verify A v = lambda v through the reported mode pipeline by
        // recomputing eigenvectors the same way the report does.
        let ac: DMatrix<Complex<f64>> = a.map(|v| Complex::new(v, 0.0));
        let mut r = ChaCha20Rng::seed_from_u64(0x5eed);
        for &lambda in rep.eigenvalues.iter() {
            let v = inverse_iteration(&ac, lambda, &mut r).unwrap();
            let resid = (&ac * &v - v.map(|z| z * lambda)).norm();
            assert!(resid < 1e-6, "eigen residual {resid}");
        }
    }

    #[test]
    fn spectrum_flags_unstable() {
        let a = DMatrix::from_partial_diagonal(2, 2, &[1.2, 0.3]);
        let rep = koopman_spectrum(&a, &DMatrix::zeros(2, 2)).unwrap();
        assert!(rep.unstable_autonomous);
    }

    #[test]
    fn spectrum_rejects_nonfinite() {
        let mut a = DMatrix::<f64>::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(koopman_spectrum(&a, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn fit_on_stable_system_stays_stable() {
        let d = 4;
        let (a_true, b_true) = random_stable_system(d, 12);
        let mut r = rng(13);
        let mut snapshots = Vec::new();
        for _ in 0..200 {
            let x = DVector::from_fn(d, |_, _| r.gen_range(-1.0..1.0));
            let u = r.gen_range(-1.0..1.0);
            snapshots.push((x.clone(), u, &a_true * &x + &b_true * u));
        }
        let fit = fit_edmd(&snapshots, &Lifting::Identity { dim: d }).unwrap();
        let rep = koopman_spectrum(&fit.a, &fit.c).unwrap();
        assert!(rep.magnitudes[0] <= 1.0 + 1e-6);
    }
}
