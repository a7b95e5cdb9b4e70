//! Discrete-time LTI plant representation and linear-quadratic synthesis.
//!
//! The plant is `x⁺ = Ax + Bu + d_x`, `y = Cx + d_y`. This module builds the
//! linearized cart-pole benchmark, solves the discrete algebraic Riccati
//! equation by fixed-point iteration, synthesizes LQR / Kalman gain pairs,
//! and computes the time-varying finite-horizon LQG law used as the
//! optimal-cost baseline.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, mat_from_rows, mat_to_rows, random_psd, spectral_radius};

/// Residual tolerance for Riccati iteration.
pub const DARE_TOL: f64 = 1e-10;
/// Iteration cap for Riccati iteration.
pub const DARE_MAX_ITER: usize = 100_000;

/// Discrete-time LTI plant `x⁺ = Ax + Bu + d_x`, `y = Cx + d_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimensions("A must be square".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::Dimensions("B must have as many rows as A".into()));
        }
        if c.ncols() != a.ncols() {
            return Err(Error::Dimensions("C must have as many columns as A".into()));
        }
        if b.ncols() == 0 || c.nrows() == 0 {
            return Err(Error::Dimensions("need at least one input and output".into()));
        }
        if !(all_finite(&a) && all_finite(&b) && all_finite(&c)) {
            return Err(Error::NonFinite("system matrices".into()));
        }
        Ok(Self { a, b, c })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// One open-loop plant step `Ax + Bu + d_x`.
    pub fn step(
        &self,
        x: &nalgebra::DVector<f64>,
        u: &nalgebra::DVector<f64>,
        dx: &nalgebra::DVector<f64>,
    ) -> nalgebra::DVector<f64> {
        &self.a * x + &self.b * u + dx
    }
}

/// Physical parameters of the linearized cart-pole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartpoleParams {
    /// Pole mass (kg).
    pub m_p: f64,
    /// Cart mass (kg).
    pub m_c: f64,
    /// Pole length (m).
    pub l: f64,
    /// Gravity (m/s²).
    pub g: f64,
    /// Sample time (s).
    pub delta: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            m_p: 0.2,
            m_c: 1.0,
            l: 0.5,
            g: 9.81,
            delta: 0.08,
        }
    }
}

/// Linearized cart-pole: 4 states (position, velocity, angle, angular rate),
/// 1 force input, measurements of position and angle.
pub fn build_cartpole(p: &CartpoleParams) -> Result<LtiSystem> {
    let ok = p.m_p > 0.0 && p.m_c > 0.0 && p.l > 0.0 && p.g > 0.0 && p.delta >= 0.0;
    let finite = [p.m_p, p.m_c, p.l, p.g, p.delta].iter().all(|v| v.is_finite());
    if !ok || !finite {
        return Err(Error::NonFinite(
            "cart-pole parameters must be finite, positive (delta may be zero)".into(),
        ));
    }
    let d = p.delta;
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0,
            d,
            0.0,
            0.0,
            0.0,
            1.0,
            -p.m_p * p.g * d / p.m_c,
            0.0,
            0.0,
            0.0,
            1.0,
            d,
            0.0,
            0.0,
            (p.m_c + p.m_p) * p.g * d / (p.l * p.m_c),
            1.0,
        ],
    );
    let b = DMatrix::from_column_slice(4, 1, &[0.0, d / p.m_c, 0.0, -d / p.m_c]);
    let c = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    LtiSystem::new(a, b, c)
}

/// Quadratic cost weights: stage `‖x‖²_Q + ‖u‖²_R`, terminal `‖x_T‖²_{Q_f}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    qf: DMatrix<f64>,
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimensions(format!("{name} must be square")));
    }
    if !all_finite(m) {
        return Err(Error::NonFinite(name.into()));
    }
    if (m - m.transpose()).norm() > 1e-9 * (1.0 + m.norm()) {
        return Err(Error::Indefinite(format!("{name} is not symmetric")));
    }
    Ok(0.5 * (m + m.transpose()))
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, qf: DMatrix<f64>) -> Result<Self> {
        let q = check_symmetric(&q, "Q")?;
        let r = check_symmetric(&r, "R")?;
        let qf = check_symmetric(&qf, "Qf")?;
        if min_eig(&q) < -1e-9 {
            return Err(Error::Indefinite("Q must be PSD".into()));
        }
        if min_eig(&qf) < -1e-9 {
            return Err(Error::Indefinite("Qf must be PSD".into()));
        }
        if min_eig(&r) <= 0.0 {
            return Err(Error::Indefinite("R must be positive definite".into()));
        }
        Ok(Self { q, r, qf })
    }

    /// Cart-pole benchmark weights: Q = Qf = diag(1,1,5,1), R = 1.
    pub fn cartpole_default() -> Self {
        let q = DMatrix::from_diagonal(&nalgebra::dvector![1.0, 1.0, 5.0, 1.0]);
        Self::new(q.clone(), DMatrix::identity(1, 1), q).unwrap()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn qf(&self) -> &DMatrix<f64> {
        &self.qf
    }
}

/// Process / measurement noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCov {
    sigma_x: DMatrix<f64>,
    sigma_y: DMatrix<f64>,
}

impl NoiseCov {
    pub fn new(sigma_x: DMatrix<f64>, sigma_y: DMatrix<f64>) -> Result<Self> {
        let sigma_x = check_symmetric(&sigma_x, "Sigma_x")?;
        let sigma_y = check_symmetric(&sigma_y, "Sigma_y")?;
        if min_eig(&sigma_x) < -1e-9 || min_eig(&sigma_y) < -1e-9 {
            return Err(Error::Indefinite("noise covariances must be PSD".into()));
        }
        Ok(Self { sigma_x, sigma_y })
    }

    /// Benchmark noise levels: Σ_x = 0.005·I, Σ_y = 0.001·I.
    pub fn cartpole_default() -> Self {
        Self::new(
            DMatrix::identity(4, 4) * 0.005,
            DMatrix::identity(2, 2) * 0.001,
        )
        .unwrap()
    }

    pub fn sigma_x(&self) -> &DMatrix<f64> {
        &self.sigma_x
    }
    pub fn sigma_y(&self) -> &DMatrix<f64> {
        &self.sigma_y
    }
}

/// State-feedback and observer gains. Valid gains satisfy
/// `ρ(A−BK) < 1` and `ρ(A−LC) < 1` for the system they were built against.
#[derive(Debug, Clone, PartialEq)]
pub struct GainPair {
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

/// Fixed-point solution of the DARE
/// `P = Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`, iterated from `P₀ = Q`.
///
/// Returns `P` with `‖P − f(P)‖_F ≤ tol`, or an error carrying the last
/// residual if `max_iter` is exhausted.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimensions("DARE: A/B/Q shapes".into()));
    }
    let m = b.ncols();
    if r.nrows() != m || r.ncols() != m {
        return Err(Error::Dimensions("DARE: R shape".into()));
    }
    if min_eig(r) <= 0.0 {
        return Err(Error::Indefinite("DARE: R must be positive definite".into()));
    }

    let riccati_map = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let btp = b.transpose() * p;
        let g = r + &btp * b;
        let g_inv = g
            .try_inverse()
            .ok_or_else(|| Error::Singular("R + BᵀPB".into()))?;
        let apb = a.transpose() * p * b;
        let next = q + a.transpose() * p * a - &apb * g_inv * apb.transpose();
        Ok(0.5 * (&next + next.transpose()))
    };

    let mut p = 0.5 * (q + q.transpose());
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let next = riccati_map(&p)?;
        residual = (&next - &p).norm();
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            // Confirm the post-condition on the iterate we return.
            let check = riccati_map(&p)?;
            let r2 = (&check - &p).norm();
            if r2 <= tol {
                return Ok(p);
            }
            residual = r2;
            p = check;
        }
    }
    Err(Error::DareNoConvergence {
        residual,
        iterations: max_iter,
    })
}

/// DARE residual `‖f(P) − P‖_F` of a candidate solution.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let btp = b.transpose() * p;
    let g = r + &btp * b;
    match g.try_inverse() {
        Some(g_inv) => {
            let apb = a.transpose() * p * b;
            let next = q + a.transpose() * p * a - &apb * g_inv * apb.transpose();
            (next - p).norm()
        }
        None => f64::INFINITY,
    }
}

fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = r + b.transpose() * p * b;
    let g_inv = g
        .try_inverse()
        .ok_or_else(|| Error::Singular("R + BᵀPB".into()))?;
    Ok(g_inv * b.transpose() * p * a)
}

/// Infinite-horizon LQG synthesis.
///
/// `K` from the control DARE on `(A, B, Q, R)`; `L` from the dual DARE on
/// `(Aᵀ, Cᵀ, Σ_x, Σ_y)` with `L = A P Cᵀ (C P Cᵀ + Σ_y)⁻¹`. The returned
/// pair is checked to stabilize both loops.
pub fn lqg_gains(sys: &LtiSystem, w: &CostWeights, n: &NoiseCov) -> Result<GainPair> {
    let p_c = dare_solve(sys.a(), sys.b(), w.q(), w.r(), DARE_TOL, DARE_MAX_ITER)?;
    let k = lqr_gain(sys.a(), sys.b(), w.r(), &p_c)?;

    let at = sys.a().transpose();
    let ct = sys.c().transpose();
    let p_o = dare_solve(&at, &ct, n.sigma_x(), n.sigma_y(), DARE_TOL, DARE_MAX_ITER)?;
    let innov = sys.c() * &p_o * sys.c().transpose() + n.sigma_y();
    let innov_inv = innov
        .try_inverse()
        .ok_or_else(|| Error::Singular("innovation covariance".into()))?;
    let l = sys.a() * &p_o * sys.c().transpose() * innov_inv;

    let rho_control = spectral_radius(&(sys.a() - sys.b() * &k));
    let rho_observer = spectral_radius(&(sys.a() - &l * sys.c()));
    if rho_control >= 1.0 || rho_observer >= 1.0 {
        return Err(Error::UnstableGains {
            rho_control,
            rho_observer,
        });
    }
    Ok(GainPair { k, l })
}

/// Seeded random LQG design weights: each block is `MᵀM + 0.1·I` with `M`
/// standard normal. Used to build a reproducible "arbitrary" base controller.
pub fn random_lqg_weights(sys: &LtiSystem, seed: u64) -> (CostWeights, NoiseCov) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_psd(sys.n_x(), 0.1, &mut rng);
    let r = random_psd(sys.n_u(), 0.1, &mut rng);
    let sx = random_psd(sys.n_x(), 0.1, &mut rng);
    let sy = random_psd(sys.n_y(), 0.1, &mut rng);
    let w = CostWeights::new(q.clone(), r, q).expect("random PSD weights are valid");
    let n = NoiseCov::new(sx, sy).expect("random PSD covariances are valid");
    (w, n)
}

/// Time-varying finite-horizon LQG law: `u_t = −K_t x̂_t` with the observer
/// `x̂⁺ = Ax̂ + Bu + L_t (y − Cx̂)`, `x̂₀ = 0`.
#[derive(Debug, Clone)]
pub struct FiniteHorizonLqg {
    pub ks: Vec<DMatrix<f64>>,
    pub ls: Vec<DMatrix<f64>>,
}

/// Finite-horizon LQG with identity initial-state covariance.
///
/// `K_t` comes from the backward Riccati recursion seeded at `Q_f`; `L_t`
/// from the forward Kalman recursion seeded at `Σ₀`.
pub fn finite_horizon_lqg(
    sys: &LtiSystem,
    w: &CostWeights,
    n: &NoiseCov,
    horizon: usize,
) -> Result<FiniteHorizonLqg> {
    finite_horizon_lqg_with_prior(sys, w, n, horizon, &DMatrix::identity(sys.n_x(), sys.n_x()))
}

pub fn finite_horizon_lqg_with_prior(
    sys: &LtiSystem,
    w: &CostWeights,
    n: &NoiseCov,
    horizon: usize,
    sigma0: &DMatrix<f64>,
) -> Result<FiniteHorizonLqg> {
    if horizon == 0 {
        return Err(Error::Dimensions("horizon must be at least 1".into()));
    }
    let a = sys.a();
    let c = sys.c();

    // Backward Riccati for the control gains.
    let mut ks = vec![DMatrix::zeros(sys.n_u(), sys.n_x()); horizon];
    let mut p = w.qf().clone();
    for t in (0..horizon).rev() {
        let k_t = lqr_gain(a, sys.b(), w.r(), &p)?;
        let a_cl = a - sys.b() * &k_t;
        p = w.q() + k_t.transpose() * w.r() * &k_t + a_cl.transpose() * &p * a_cl;
        p = 0.5 * (&p + p.transpose());
        ks[t] = k_t;
    }

    // Forward Kalman recursion for the observer gains.
    let mut ls = Vec::with_capacity(horizon);
    let mut sigma = sigma0.clone();
    for _ in 0..horizon {
        let innov = c * &sigma * c.transpose() + n.sigma_y();
        let innov_inv = innov
            .try_inverse()
            .ok_or_else(|| Error::Singular("innovation covariance".into()))?;
        let l_t = a * &sigma * c.transpose() * innov_inv;
        sigma = (a - &l_t * c) * &sigma * a.transpose() + n.sigma_x();
        sigma = 0.5 * (&sigma + sigma.transpose());
        ls.push(l_t);
    }

    Ok(FiniteHorizonLqg { ks, ls })
}

/// JSON document carrying a synthesis problem: row-major nested arrays.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProblemDoc {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "Qf")]
    pub qf: Vec<Vec<f64>>,
    #[serde(rename = "Sigma_x")]
    pub sigma_x: Vec<Vec<f64>>,
    #[serde(rename = "Sigma_y")]
    pub sigma_y: Vec<Vec<f64>>,
}

impl ProblemDoc {
    pub fn pack(sys: &LtiSystem, w: &CostWeights, n: &NoiseCov) -> Self {
        Self {
            a: mat_to_rows(sys.a()),
            b: mat_to_rows(sys.b()),
            c: mat_to_rows(sys.c()),
            q: mat_to_rows(w.q()),
            r: mat_to_rows(w.r()),
            qf: mat_to_rows(w.qf()),
            sigma_x: mat_to_rows(n.sigma_x()),
            sigma_y: mat_to_rows(n.sigma_y()),
        }
    }

    pub fn unpack(&self) -> Result<(LtiSystem, CostWeights, NoiseCov)> {
        let sys = LtiSystem::new(
            mat_from_rows(&self.a)?,
            mat_from_rows(&self.b)?,
            mat_from_rows(&self.c)?,
        )?;
        let w = CostWeights::new(
            mat_from_rows(&self.q)?,
            mat_from_rows(&self.r)?,
            mat_from_rows(&self.qf)?,
        )?;
        let n = NoiseCov::new(mat_from_rows(&self.sigma_x)?, mat_from_rows(&self.sigma_y)?)?;
        Ok((sys, w, n))
    }
}
