//! Dense strictly-convex quadratic programming.
//!
//! Solves `min 1/2 x' H x + f' x  s.t.  G x <= h` with a primal active-set
//! method: H is factored once (Cholesky), equality-constrained subproblems
//! are solved through the Schur complement of the working set, and rows
//! enter/leave the working set one at a time. The solver is deterministic and
//! warm-startable from any feasible point.

use crate::error::{CoreError, Result};
use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct QpSpec {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// Inequality rows, `g_rows * x <= h_rhs`. May be 0-row.
    pub g_rows: DMatrix<f64>,
    pub h_rhs: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Scaled KKT residual target.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// One multiplier per inequality row (zero off the active set).
    pub multipliers: DVector<f64>,
    pub active_set: Vec<usize>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

impl QpSpec {
    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn num_rows(&self) -> usize {
        self.h_rhs.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.hessian * x)[(0, 0)] + self.linear.dot(x)
    }

    /// Largest constraint violation at `x` (<= 0 means feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        if self.num_rows() == 0 {
            return 0.0;
        }
        (&self.g_rows * x - &self.h_rhs).max()
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(CoreError::Qp(format!(
                "hessian is {}x{}, expected {n}x{n}",
                self.hessian.nrows(),
                self.hessian.ncols()
            )));
        }
        if self.g_rows.nrows() != self.num_rows() || (self.num_rows() > 0 && self.g_rows.ncols() != n)
        {
            return Err(CoreError::Qp("constraint matrix shape mismatch".into()));
        }
        let sym = (&self.hessian - self.hessian.transpose()).abs().max();
        if sym > 1e-10 * (1.0 + self.hessian.abs().max()) {
            return Err(CoreError::Qp(format!("hessian not symmetric ({sym:.3e})")));
        }
        if self.hessian.iter().any(|v| !v.is_finite())
            || self.linear.iter().any(|v| !v.is_finite())
            || self.g_rows.iter().any(|v| !v.is_finite())
            || self.h_rhs.iter().any(|v| !v.is_finite())
        {
            return Err(CoreError::NonFinite("QP data".into()));
        }
        Ok(())
    }
}

/// Scaled KKT residual: stationarity, primal feasibility and complementary
/// slackness, the first relative to the data magnitude.
pub fn kkt_residual(spec: &QpSpec, x: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    let grad = &spec.hessian * x + &spec.linear;
    let stat = if spec.num_rows() > 0 {
        &grad + spec.g_rows.transpose() * mu
    } else {
        grad.clone()
    };
    let scale = 1.0 + spec.linear.abs().max().max(grad.abs().max());
    let mut res = stat.abs().max() / scale;
    if spec.num_rows() > 0 {
        let slack = &spec.g_rows * x - &spec.h_rhs;
        res = res.max(slack.max().max(0.0));
        for i in 0..mu.len() {
            res = res.max((mu[i] * slack[i]).abs() / scale);
            res = res.max(-mu[i]);
        }
    }
    res
}

/// Primal active-set solve from a feasible starting point.
///
/// `x0` must satisfy every row of the spec (within `opts.tol`); pass the
/// unconstrained minimiser region or a warm start from a previous solve.
pub fn solve_feasible(spec: &QpSpec, x0: &DVector<f64>, opts: &SolveOptions) -> Result<QpSolution> {
    spec.validate()?;
    let n = spec.num_vars();
    let m = spec.num_rows();
    if x0.len() != n {
        return Err(CoreError::Qp("starting point dimension mismatch".into()));
    }
    let start_violation = spec.max_violation(x0);
    if start_violation > opts.tol.max(1e-9) {
        return Err(CoreError::Qp(format!(
            "starting point infeasible by {start_violation:.3e}"
        )));
    }

    let chol = Cholesky::new(spec.hessian.clone())
        .ok_or_else(|| CoreError::Qp("hessian is not positive definite".into()))?;

    let mut x = x0.clone();
    let mut working: Vec<usize> = Vec::new();
    // Cached H^-1 g_i for rows in the working set, aligned with `working`.
    let mut hg: Vec<DVector<f64>> = Vec::new();
    let mut lambda = DVector::<f64>::zeros(0);

    let step_tol = 1e-11;
    let dual_tol = 1e-9;
    let mut iterations = 0usize;

    loop {
        if iterations > opts.max_iter {
            let mu = scatter_multipliers(m, &working, &lambda);
            return Err(CoreError::QpIterationCap {
                cap: opts.max_iter,
                residual: kkt_residual(spec, &x, &mu),
            });
        }
        iterations += 1;

        let grad = &spec.hessian * &x + &spec.linear;
        let hinv_grad = chol.solve(&grad);

        let k = working.len();
        let p;
        if k == 0 {
            lambda = DVector::zeros(0);
            p = -&hinv_grad;
        } else {
            // Schur system: (G_W H^-1 G_W') lambda = -G_W H^-1 grad.
            let mut schur = DMatrix::<f64>::zeros(k, k);
            let mut rhs = DVector::<f64>::zeros(k);
            for (a, &row_a) in working.iter().enumerate() {
                let ga = spec.g_rows.row(row_a);
                for b in 0..=a {
                    let val = ga.transpose().dot(&hg[b]);
                    schur[(a, b)] = val;
                    schur[(b, a)] = val;
                }
                rhs[a] = -ga.transpose().dot(&hinv_grad);
            }
            let schur_chol = match Cholesky::new(schur) {
                Some(c) => c,
                None => {
                    // Working set went numerically dependent: drop the most
                    // recent row and retry.
                    working.pop();
                    hg.pop();
                    continue;
                }
            };
            lambda = schur_chol.solve(&rhs);
            let mut dir = -hinv_grad.clone();
            for (b, l) in lambda.iter().enumerate() {
                dir -= &hg[b] * *l;
            }
            p = dir;
        }

        let p_scale = 1.0 + x.abs().max();
        if p.abs().max() <= step_tol * p_scale {
            // Stationary on the working set; check multiplier signs.
            if let Some((drop_idx, _)) = lambda
                .iter()
                .enumerate()
                .filter(|(_, l)| **l < -dual_tol)
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            {
                working.remove(drop_idx);
                hg.remove(drop_idx);
                continue;
            }
            let mu = scatter_multipliers(m, &working, &lambda);
            let residual = kkt_residual(spec, &x, &mu);
            return Ok(QpSolution {
                objective: spec.objective(&x),
                x,
                multipliers: mu,
                active_set: working,
                iterations,
                kkt_residual: residual,
            });
        }

        // Ratio test against rows outside the working set.
        let mut alpha = 1.0;
        let mut blocking: Option<usize> = None;
        for i in 0..m {
            if working.contains(&i) {
                continue;
            }
            let gi = spec.g_rows.row(i);
            let d = gi.transpose().dot(&p);
            if d > 1e-12 * (1.0 + gi.abs().max()) {
                let room = (spec.h_rhs[i] - gi.transpose().dot(&x)) / d;
                if room < alpha {
                    alpha = room.max(0.0);
                    blocking = Some(i);
                }
            }
        }

        x += &p * alpha;
        if let Some(row) = blocking {
            hg.push(chol.solve(&spec.g_rows.row(row).transpose()));
            working.push(row);
        }
    }
}

fn scatter_multipliers(m: usize, working: &[usize], lambda: &DVector<f64>) -> DVector<f64> {
    let mut mu = DVector::zeros(m);
    for (k, &row) in working.iter().enumerate() {
        mu[row] = lambda[k].max(0.0);
    }
    mu
}

/// Soft-constrained relaxation: the listed rows get a slack variable with
/// quadratic penalty `rho * s^2`; remaining rows stay hard. Feasible start is
/// constructed from `x0` (which must satisfy the hard rows) by setting each
/// slack to the current violation.
pub fn solve_with_slack(
    spec: &QpSpec,
    soft_rows: &[usize],
    rho: f64,
    x0: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<(QpSolution, DVector<f64>)> {
    let n = spec.num_vars();
    let m = spec.num_rows();
    let k = soft_rows.len();
    let soft: std::collections::HashSet<usize> = soft_rows.iter().copied().collect();

    let mut hessian = DMatrix::<f64>::zeros(n + k, n + k);
    hessian.view_mut((0, 0), (n, n)).copy_from(&spec.hessian);
    for j in 0..k {
        hessian[(n + j, n + j)] = 2.0 * rho;
    }
    let mut linear = DVector::<f64>::zeros(n + k);
    linear.rows_mut(0, n).copy_from(&spec.linear);

    // Rows: all original rows (soft ones get -1 on their slack), then s >= 0.
    let mut g = DMatrix::<f64>::zeros(m + k, n + k);
    let mut h = DVector::<f64>::zeros(m + k);
    for i in 0..m {
        g.view_mut((i, 0), (1, n)).copy_from(&spec.g_rows.row(i));
        h[i] = spec.h_rhs[i];
    }
    for (j, &row) in soft_rows.iter().enumerate() {
        g[(row, n + j)] = -1.0;
        g[(m + j, n + j)] = -1.0;
        h[m + j] = 0.0;
    }

    let lifted = QpSpec {
        hessian,
        linear,
        g_rows: g,
        h_rhs: h,
    };

    let mut z0 = DVector::<f64>::zeros(n + k);
    z0.rows_mut(0, n).copy_from(x0);
    let slack0 = &spec.g_rows * x0 - &spec.h_rhs;
    for (j, &row) in soft_rows.iter().enumerate() {
        z0[n + j] = slack0[row].max(0.0);
    }
    for i in 0..m {
        if !soft.contains(&i) && slack0[i] > opts.tol.max(1e-9) {
            return Err(CoreError::Qp(format!(
                "hard row {i} infeasible at the slack-relaxation start ({:.3e})",
                slack0[i]
            )));
        }
    }

    let lifted_opts = SolveOptions {
        tol: opts.tol,
        max_iter: opts.max_iter.max(2 * (m + k) + 50),
    };
    let sol = solve_feasible(&lifted, &z0, &lifted_opts)?;
    let slack = DVector::from_fn(k, |j, _| sol.x[n + j]);
    let x = DVector::from_fn(n, |i, _| sol.x[i]);
    let mu = DVector::from_fn(m, |i, _| sol.multipliers[i]);
    Ok((
        QpSolution {
            objective: spec.objective(&x),
            x,
            multipliers: mu,
            active_set: sol.active_set.into_iter().filter(|&r| r < m).collect(),
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
        },
        slack,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn unconstrained_start(spec: &QpSpec) -> DVector<f64> {
        DVector::zeros(spec.num_vars())
    }

    #[test]
    fn unconstrained_matches_stationarity() {
        let spec = QpSpec {
            hessian: DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]),
            linear: DVector::from_row_slice(&[1.0, -2.0]),
            g_rows: DMatrix::zeros(0, 2),
            h_rhs: DVector::zeros(0),
        };
        let sol = solve_feasible(&spec, &unconstrained_start(&spec), &SolveOptions::default())
            .unwrap();
        let expected = -Cholesky::new(spec.hessian.clone()).unwrap().solve(&spec.linear);
        assert!((sol.x - expected).abs().max() < 1e-8);
        assert!(sol.kkt_residual <= 1e-6);
    }

    #[test]
    fn one_dim_kkt_by_hand() {
        // min u^2 + 2u subject to u >= 0: optimum u = 0 with multiplier 2.
        let spec = QpSpec {
            hessian: DMatrix::from_row_slice(1, 1, &[2.0]),
            linear: DVector::from_row_slice(&[2.0]),
            g_rows: DMatrix::from_row_slice(1, 1, &[-1.0]),
            h_rhs: DVector::from_row_slice(&[0.0]),
        };
        let sol = solve_feasible(
            &spec,
            &DVector::from_row_slice(&[1.0]),
            &SolveOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(sol.x[0], 0.0, epsilon = 1e-10);
        assert_relative_eq!(sol.multipliers[0], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let spec = QpSpec {
            hessian: DMatrix::from_row_slice(1, 1, &[-1.0]),
            linear: DVector::from_row_slice(&[0.0]),
            g_rows: DMatrix::zeros(0, 1),
            h_rhs: DVector::zeros(0),
        };
        assert!(solve_feasible(&spec, &DVector::zeros(1), &SolveOptions::default()).is_err());
    }

    #[test]
    fn rejects_infeasible_start() {
        let spec = QpSpec {
            hessian: DMatrix::identity(1, 1),
            linear: DVector::zeros(1),
            g_rows: DMatrix::from_row_slice(1, 1, &[1.0]),
            h_rhs: DVector::from_row_slice(&[-1.0]),
        };
        assert!(solve_feasible(&spec, &DVector::zeros(1), &SolveOptions::default()).is_err());
    }

    /// Independent oracle: enumerate every subset of rows as a candidate
    /// active set, solve the equality-constrained KKT system, keep the best
    /// candidate that is primal feasible with nonnegative multipliers.
    pub(crate) fn brute_force(spec: &QpSpec) -> Option<(DVector<f64>, f64)> {
        let n = spec.num_vars();
        let m = spec.num_rows();
        let mut best: Option<(DVector<f64>, f64)> = None;
        for mask in 0u32..(1 << m) {
            let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if rows.len() > n {
                continue;
            }
            let k = rows.len();
            let mut kkt = DMatrix::<f64>::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(&spec.hessian);
            for (j, &r) in rows.iter().enumerate() {
                for c in 0..n {
                    kkt[(c, n + j)] = spec.g_rows[(r, c)];
                    kkt[(n + j, c)] = spec.g_rows[(r, c)];
                }
            }
            let mut rhs = DVector::<f64>::zeros(n + k);
            for c in 0..n {
                rhs[c] = -spec.linear[c];
            }
            for (j, &r) in rows.iter().enumerate() {
                rhs[n + j] = spec.h_rhs[r];
            }
            let lu = kkt.lu();
            let Some(sol) = lu.solve(&rhs) else { continue };
            let x = DVector::from_fn(n, |i, _| sol[i]);
            let mu_ok = (0..k).all(|j| sol[n + j] >= -1e-9);
            if !mu_ok {
                continue;
            }
            if spec.max_violation(&x) > 1e-8 {
                continue;
            }
            let obj = spec.objective(&x);
            if best.as_ref().map_or(true, |(_, b)| obj < *b - 1e-12) {
                best = Some((x, obj));
            }
        }
        best
    }

    fn random_qp(rng: &mut ChaCha20Rng, n: usize, m: usize) -> (QpSpec, DVector<f64>) {
        // H = M M' + n I keeps things well conditioned.
        let mmat = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let hessian = &mmat * mmat.transpose() + DMatrix::<f64>::identity(n, n) * (n as f64);
        let linear = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let g_rows = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        // Make x = 0 strictly feasible so a start always exists.
        let h_rhs = DVector::from_fn(m, |_, _| rng.gen_range(0.1..1.5));
        (
            QpSpec {
                hessian,
                linear,
                g_rows,
                h_rhs,
            },
            DVector::zeros(n),
        )
    }

    #[test]
    fn matches_brute_force_on_random_qps() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for trial in 0..60 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(0..=6);
            let (spec, x0) = random_qp(&mut rng, n, m);
            let sol = solve_feasible(&spec, &x0, &SolveOptions::default()).unwrap();
            let (bx, bobj) = brute_force(&spec).expect("oracle found optimum");
            assert!(
                (sol.objective - bobj).abs() <= 1e-6 * (1.0 + bobj.abs()),
                "trial {trial}: objective {} vs oracle {}",
                sol.objective,
                bobj
            );
            assert!(
                (&sol.x - &bx).abs().max() <= 1e-5,
                "trial {trial}: x mismatch"
            );
            assert!(sol.kkt_residual <= 1e-6, "trial {trial}");
        }
    }

    #[test]
    fn slack_relaxation_recovers_feasible_solution() {
        // Infeasible pair u <= -1, -u <= -2 soft-relaxed; hard box keeps u in
        // [-10, 10]. The relaxation must come back with positive slack.
        let spec = QpSpec {
            hessian: DMatrix::from_row_slice(1, 1, &[2.0]),
            linear: DVector::from_row_slice(&[0.0]),
            g_rows: DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]),
            h_rhs: DVector::from_row_slice(&[-1.0, -2.0, 10.0, 10.0]),
        };
        let (sol, slack) = solve_with_slack(
            &spec,
            &[0, 1],
            1e4,
            &DVector::zeros(1),
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(slack.max() > 0.1, "expected real slack, got {slack}");
        assert!(sol.x[0].abs() <= 10.0);
    }

    #[test]
    fn slack_is_negligible_when_feasible() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (spec, x0) = random_qp(&mut rng, 4, 5);
            let hard = solve_feasible(&spec, &x0, &SolveOptions::default()).unwrap();
            let soft_rows: Vec<usize> = (0..spec.num_rows()).collect();
            let (soft, slack) =
                solve_with_slack(&spec, &soft_rows, 1e4, &x0, &SolveOptions::default()).unwrap();
            assert!(slack.max() < 1e-3, "slack {}", slack.max());
            assert!((soft.x - hard.x).abs().max() < 1e-3);
        }
    }
}
