//! Levenberg–Marquardt solver for the sliding window and Schur-complement
//! marginalization of its oldest pair.
//!
//! The state couples one relative motion per keyframe pair with a shared
//! ground plane. Constraints stay exact through minimal parameterizations:
//! rotations retract through the exponential map (3 dof), the unit normal
//! through a 2-dof tangent basis, translation and height additively. The
//! marginal prior is a linear factor `r_m + H_m * (X [-] X_lin)` over the
//! retained states, produced by eliminating the oldest pair's block from
//! the normal equations of exactly the factors that leave the window.

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2, Vector3};

use super::{OptimizerConfig, OptimizerError};
use crate::geom::{exp_so3, log_so3, skew, tangent_basis, CameraIntrinsics, GroundPlaneEstimate};
use crate::odometry::RelativeMotion;

/// Full state of one sliding window: per-pair camera motions plus the
/// shared ground plane.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    pub motions: Vec<RelativeMotion>,
    /// Unit ground normal in the camera frame.
    pub normal: Vector3<f64>,
    /// Camera height above ground, meters.
    pub height: f64,
}

impl WindowState {
    pub fn new(motions: Vec<RelativeMotion>, normal: Vector3<f64>, height: f64) -> Self {
        Self {
            motions,
            normal: normal.normalize(),
            height,
        }
    }

    pub fn dim(&self) -> usize {
        6 * self.motions.len() + 3
    }

    pub fn plane(&self) -> GroundPlaneEstimate {
        GroundPlaneEstimate {
            normal: self.normal,
            height: self.height,
            inlier_count: 0,
        }
    }

    /// Applies a tangent-space step: right-exponential on rotations,
    /// additive on displacements and height, renormalized tangent step on
    /// the unit normal.
    fn retract(&self, delta: &DVector<f64>) -> WindowState {
        debug_assert_eq!(delta.len(), self.dim());
        let mut motions = self.motions.clone();
        for (i, motion) in motions.iter_mut().enumerate() {
            let dw = Vector3::new(delta[6 * i], delta[6 * i + 1], delta[6 * i + 2]);
            let dd = Vector3::new(delta[6 * i + 3], delta[6 * i + 4], delta[6 * i + 5]);
            motion.rotation *= exp_so3(&dw);
            motion.translation += dd;
        }
        let base = 6 * self.motions.len();
        let (b1, b2) = tangent_basis(&self.normal);
        let normal = (self.normal + b1 * delta[base] + b2 * delta[base + 1]).normalize();
        let height = self.height + delta[base + 2];
        WindowState {
            motions,
            normal,
            height,
        }
    }

    /// Local difference `self [-] lin` over the first `lin.motions.len()`
    /// pairs and the plane, in lin's tangent coordinates.
    fn box_minus(&self, lin: &WindowState) -> DVector<f64> {
        let m = lin.motions.len();
        debug_assert!(self.motions.len() >= m);
        let mut out = DVector::zeros(6 * m + 3);
        for i in 0..m {
            let dw = log_so3(&(lin.motions[i].rotation.transpose() * self.motions[i].rotation));
            let dd = self.motions[i].translation - lin.motions[i].translation;
            for k in 0..3 {
                out[6 * i + k] = dw[k];
                out[6 * i + 3 + k] = dd[k];
            }
        }
        let (b1, b2) = tangent_basis(&lin.normal);
        let dn = self.normal - lin.normal;
        out[6 * m] = b1.dot(&dn);
        out[6 * m + 1] = b2.dot(&dn);
        out[6 * m + 2] = self.height - lin.height;
        out
    }
}

/// Matched pixel pairs `(p_k, p_{k+1})` of one keyframe pair.
///
/// The transfer cost only observes the ratio of displacement to plane
/// height, leaving one global scale gauge free; `scale_anchor` pins it with
/// the odometry-measured displacement magnitude `(length_m, sigma_m)`, which
/// is how the wheel odometry lends the monocular system its metric scale.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairObservations {
    pub matches: Vec<(Vector2<f64>, Vector2<f64>)>,
    pub scale_anchor: Option<(f64, f64)>,
}

/// Linear prior left behind by marginalization.
///
/// Contributes the residual `r_m + H_m * (X [-] lin)` to the window cost,
/// where the columns of `H_m` cover the first `lin.motions.len()` pairs of
/// the window plus the plane block.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrior {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub lin: WindowState,
}

impl MarginalPrior {
    pub fn pair_count(&self) -> usize {
        self.lin.motions.len()
    }
}

/// Solver progress summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: u32,
    pub accepted_steps: u32,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub gradient_norm: f64,
}

/// Huber loss in sigma-normalized units.
fn huber(u: f64, delta: f64) -> f64 {
    if u <= delta {
        0.5 * u * u
    } else {
        delta * (u - 0.5 * delta)
    }
}

struct Assembly {
    cost: f64,
    /// Weighted residual stack; `None` when only the cost was requested.
    system: Option<(DMatrix<f64>, DVector<f64>)>,
}

fn assemble(
    state: &WindowState,
    pairs: &[PairObservations],
    prior: Option<&MarginalPrior>,
    config: &OptimizerConfig,
    intr: &CameraIntrinsics,
    want_jacobian: bool,
) -> Assembly {
    let dim = state.dim();
    let n_rows: usize = pairs
        .iter()
        .map(|p| 2 * p.matches.len() + usize::from(p.scale_anchor.is_some()))
        .sum::<usize>()
        + prior.map_or(0, |p| p.residual.len());
    let mut jac = want_jacobian.then(|| DMatrix::<f64>::zeros(n_rows, dim));
    let mut res = want_jacobian.then(|| DVector::<f64>::zeros(n_rows));
    let mut cost = 0.0;

    let k_mat = intr.matrix();
    let k_inv = intr.inverse_matrix();
    let sigma = config.feature_cov_px;
    let g = state.normal;
    let h = state.height;
    let (b1, b2) = tangent_basis(&g);
    let plane_col = 6 * state.motions.len();

    let mut row = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let r_mat = state.motions[i].rotation;
        let d = state.motions[i].translation;
        for (pk, pk1) in &pair.matches {
            let y = k_inv * Vector3::new(pk.x, pk.y, 1.0);
            let s = g.dot(&y) / h;
            let v = y + d * s;
            let m = r_mat * v;
            if m.z.abs() < 1e-12 {
                // Transferred to infinity; contribute a saturated cost but no
                // gradient information.
                cost += huber(1e6, config.huber_delta);
                row += 2;
                continue;
            }
            let q = k_mat * m;
            let pred = Vector2::new(q.x / q.z, q.y / q.z);
            let r2 = pk1 - pred;
            let u = r2.norm() / sigma;
            cost += huber(u, config.huber_delta);

            if let (Some(jac), Some(res)) = (jac.as_mut(), res.as_mut()) {
                let w = if u <= config.huber_delta {
                    1.0
                } else {
                    config.huber_delta / u
                };
                let scale = w.sqrt() / sigma;
                let inv_z = 1.0 / q.z;
                let dpi = Matrix2x3::new(
                    inv_z,
                    0.0,
                    -q.x * inv_z * inv_z,
                    0.0,
                    inv_z,
                    -q.y * inv_z * inv_z,
                );
                let a = dpi * k_mat; // d(pred)/d(m)
                let ar = a * r_mat;

                // Rotation block: dr/dw = +A R [v]x.
                let j_rot = ar * skew(&v) * scale;
                // Displacement block: dr/dd = -A R s.
                let j_disp = ar * (-s * scale);
                // Plane blocks.
                let j_g_full = ar * d * scale; // times d(g.y)/dg = y^T / h
                let j_g1 = j_g_full * (y.dot(&b1) / h) * -1.0;
                let j_g2 = j_g_full * (y.dot(&b2) / h) * -1.0;
                let j_h = j_g_full * (g.dot(&y) / (h * h));

                for rr in 0..2 {
                    for cc in 0..3 {
                        jac[(row + rr, 6 * i + cc)] = j_rot[(rr, cc)];
                        jac[(row + rr, 6 * i + 3 + cc)] = j_disp[(rr, cc)];
                    }
                    jac[(row + rr, plane_col)] = j_g1[rr];
                    jac[(row + rr, plane_col + 1)] = j_g2[rr];
                    jac[(row + rr, plane_col + 2)] = j_h[rr];
                    res[row + rr] = r2[rr] * scale;
                }
            }
            row += 2;
        }
        if let Some((length, sigma)) = pair.scale_anchor {
            let norm = d.norm();
            let r = (norm - length) / sigma;
            cost += 0.5 * r * r;
            if let (Some(jac), Some(res)) = (jac.as_mut(), res.as_mut()) {
                if norm > 1e-12 {
                    let dir = d / norm;
                    for cc in 0..3 {
                        jac[(row, 6 * i + 3 + cc)] = dir[cc] / sigma;
                    }
                }
                res[row] = r;
            }
            row += 1;
        }
    }

    if let Some(prior) = prior {
        let delta = state.box_minus(&prior.lin);
        let r_p = &prior.residual + &prior.jacobian * &delta;
        cost += 0.5 * r_p.norm_squared();
        if let (Some(jac), Some(res)) = (jac.as_mut(), res.as_mut()) {
            let m = prior.pair_count();
            for rr in 0..r_p.len() {
                for i in 0..6 * m {
                    jac[(row + rr, i)] = prior.jacobian[(rr, i)];
                }
                for i in 0..3 {
                    jac[(row + rr, plane_col + i)] = prior.jacobian[(rr, 6 * m + i)];
                }
                res[row + rr] = r_p[rr];
            }
        }
    }

    Assembly {
        cost,
        system: jac.zip(res),
    }
}

/// Minimizes the windowed transfer cost with Levenberg–Marquardt.
///
/// Accepts steps that reduce the robust cost, inflating the damping
/// otherwise; terminates when an accepted step improves the cost by less
/// than `convergence_tol` (relative), when the iteration budget runs out,
/// or immediately when the initial cost is already numerically zero.
pub fn optimize_window(
    init: &WindowState,
    pairs: &[PairObservations],
    prior: Option<&MarginalPrior>,
    config: &OptimizerConfig,
    intr: &CameraIntrinsics,
) -> Result<(WindowState, SolveStats), OptimizerError> {
    assert_eq!(
        init.motions.len(),
        pairs.len(),
        "one motion per observation pair"
    );
    assert!(init.height > 0.0, "initial plane height must be positive");
    for (i, pair) in pairs.iter().enumerate() {
        if pair.matches.len() < 4 {
            return Err(OptimizerError::InsufficientFeatures {
                pair: i,
                got: pair.matches.len(),
                need: 4,
            });
        }
    }
    if let Some(p) = prior {
        assert!(p.pair_count() <= pairs.len());
        assert_eq!(p.jacobian.ncols(), 6 * p.pair_count() + 3);
    }

    let mut state = init.clone();
    state.normal = state.normal.normalize();

    let eval = |s: &WindowState, want_j: bool| assemble(s, pairs, prior, config, intr, want_j);

    let mut current = eval(&state, true);
    let mut cost = current.cost;
    let initial_cost = cost;
    let mut stats = SolveStats {
        iterations: 0,
        accepted_steps: 0,
        initial_cost,
        final_cost: cost,
        gradient_norm: 0.0,
    };
    if cost < 1e-16 {
        return Ok((state, stats));
    }

    // Nielsen damping schedule.
    let mut lambda = -1.0;
    let mut nu = 2.0;
    let mut consecutive_rejects = 0u32;
    while stats.iterations < config.max_iterations {
        stats.iterations += 1;
        let (jac, res) = current.system.as_ref().expect("jacobian requested");
        let h = jac.transpose() * jac;
        let grad = jac.transpose() * res;
        stats.gradient_norm = grad.amax();
        if stats.gradient_norm < 1e-12 {
            break;
        }
        if lambda < 0.0 {
            let mut max_diag = 0.0f64;
            for i in 0..h.nrows() {
                max_diag = max_diag.max(h[(i, i)]);
            }
            lambda = 1e-6 * max_diag.max(1e-12);
        }

        let mut damped = h.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += lambda;
        }
        let reject = |lambda: &mut f64, nu: &mut f64, rejects: &mut u32| {
            *lambda *= *nu;
            *nu *= 2.0;
            *rejects += 1;
        };
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&(-&grad)),
            None => {
                reject(&mut lambda, &mut nu, &mut consecutive_rejects);
                if consecutive_rejects >= 5 {
                    return Err(OptimizerError::SolverDiverged(consecutive_rejects));
                }
                continue;
            }
        };

        let candidate = state.retract(&step);
        let cand_cost = if candidate.height > 0.0 {
            eval(&candidate, false).cost
        } else {
            f64::INFINITY
        };
        if cand_cost < cost {
            let decrease = cost - cand_cost;
            // Gain ratio of actual vs. predicted decrease.
            let predicted = 0.5 * (lambda * step.norm_squared() - grad.dot(&step));
            let rho = if predicted > 0.0 { decrease / predicted } else { 1.0 };
            lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            state = candidate;
            cost = cand_cost;
            stats.accepted_steps += 1;
            consecutive_rejects = 0;
            current = eval(&state, true);
            if decrease < config.convergence_tol * cost.max(1e-30) || cost < 1e-16 {
                break;
            }
        } else {
            reject(&mut lambda, &mut nu, &mut consecutive_rejects);
            if consecutive_rejects >= 8 {
                if stats.accepted_steps > 0 || stats.gradient_norm < 1e-6 {
                    break;
                }
                return Err(OptimizerError::SolverDiverged(consecutive_rejects));
            }
        }
    }

    stats.final_cost = cost;
    if let Some((jac, res)) = current.system.as_ref() {
        stats.gradient_norm = (jac.transpose() * res).amax();
    }
    Ok((state, stats))
}

/// Marginalizes the oldest pair out of the window.
///
/// Only the factors that leave the window participate: the oldest pair's
/// transfer residuals and the previous prior. Their normal equations are
/// built at the current estimate and the oldest pair's 6x6 block is
/// eliminated by Schur complement; the square root of the reduced system
/// becomes the next prior. Fails with `SingularBlock` when the eliminated
/// block carries no information (the caller then drops the pair without a
/// prior).
pub fn marginalize(
    state: &WindowState,
    oldest_pair: &PairObservations,
    prior: Option<&MarginalPrior>,
    config: &OptimizerConfig,
    intr: &CameraIntrinsics,
) -> Result<MarginalPrior, OptimizerError> {
    assert!(!state.motions.is_empty());
    // Assemble only the departing factors over the full window layout.
    let departing = std::slice::from_ref(oldest_pair);
    let sub_state = state.clone();
    // Reuse the assembler on a one-pair view for the departing rows.
    let one_pair_state = WindowState {
        motions: vec![state.motions[0]],
        normal: state.normal,
        height: state.height,
    };
    let assembled = assemble(&one_pair_state, departing, None, config, intr, true);
    let (j_sub, r_sub) = assembled.system.expect("jacobian requested");
    let n_feat_rows = j_sub.nrows();
    let n_prior_rows = prior.map_or(0, |p| p.residual.len());
    let dim = state.dim();
    let mut jac = DMatrix::<f64>::zeros(n_feat_rows + n_prior_rows, dim);
    let mut res = DVector::<f64>::zeros(n_feat_rows + n_prior_rows);
    {
        // Columns 0..6 map to pair 0; columns 6..9 map to the plane block.
        let plane_col = 6 * state.motions.len();
        for rr in 0..j_sub.nrows() {
            for cc in 0..6 {
                jac[(rr, cc)] = j_sub[(rr, cc)];
            }
            for cc in 0..3 {
                jac[(rr, plane_col + cc)] = j_sub[(rr, 6 + cc)];
            }
            res[rr] = r_sub[rr];
        }
    }
    if let Some(prior) = prior {
        let delta = sub_state.box_minus(&prior.lin);
        let r_p = &prior.residual + &prior.jacobian * &delta;
        let m = prior.pair_count();
        let plane_col = 6 * state.motions.len();
        for rr in 0..r_p.len() {
            for cc in 0..6 * m {
                jac[(n_feat_rows + rr, cc)] = prior.jacobian[(rr, cc)];
            }
            for cc in 0..3 {
                jac[(n_feat_rows + rr, plane_col + cc)] = prior.jacobian[(rr, 6 * m + cc)];
            }
            res[n_feat_rows + rr] = r_p[rr];
        }
    }

    let h_full = jac.transpose() * &jac;
    let b_full = jac.transpose() * &res;

    // Partition: marginalized block m = columns 0..6, retained o = the rest.
    let h_mm = h_full.view((0, 0), (6, 6)).into_owned();
    let eig_mm = h_mm.symmetric_eigen();
    let max_eig = eig_mm.eigenvalues.amax();
    if max_eig <= 0.0 || eig_mm.eigenvalues.min() < 1e-10 * max_eig.max(1e-12) {
        return Err(OptimizerError::SingularBlock);
    }
    let mut inv_diag = eig_mm.eigenvalues.clone();
    for v in inv_diag.iter_mut() {
        *v = 1.0 / *v;
    }
    let h_mm_inv =
        &eig_mm.eigenvectors * DMatrix::from_diagonal(&inv_diag) * eig_mm.eigenvectors.transpose();

    let o_dim = dim - 6;
    let h_om = h_full.view((6, 0), (o_dim, 6)).into_owned();
    let h_oo = h_full.view((6, 6), (o_dim, o_dim)).into_owned();
    let b_m = b_full.rows(0, 6).into_owned();
    let b_o = b_full.rows(6, o_dim).into_owned();

    let h_red = &h_oo - &h_om * &h_mm_inv * h_om.transpose();
    let b_red = b_o - &h_om * &h_mm_inv * b_m;

    // Square-root form of the reduced information.
    let eig = h_red.symmetric_eigen();
    let lam_max = eig.eigenvalues.amax().max(0.0);
    let mut kept_rows = Vec::new();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 1e-12 * lam_max.max(1e-12) {
            kept_rows.push((i, lam));
        }
    }
    let mut h_m = DMatrix::<f64>::zeros(kept_rows.len(), o_dim);
    let mut r_m = DVector::<f64>::zeros(kept_rows.len());
    for (out_row, &(i, lam)) in kept_rows.iter().enumerate() {
        let sqrt_lam = lam.sqrt();
        let u_col = eig.eigenvectors.column(i);
        for c in 0..o_dim {
            h_m[(out_row, c)] = sqrt_lam * u_col[c];
        }
        r_m[out_row] = u_col.dot(&b_red) / sqrt_lam;
    }

    Ok(MarginalPrior {
        residual: r_m,
        jacobian: h_m,
        lin: WindowState {
            motions: state.motions[1..].to_vec(),
            normal: state.normal,
            height: state.height,
        },
    })
}
