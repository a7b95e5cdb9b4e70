//! Base observer-feedback controller, the Youla-augmented policy, and the
//! closed-loop transfer decomposition used to validate it.
//!
//! The base controller is
//!
//! ```text
//! x̂⁺ = Ax̂ + Bu_K + Lỹ,   u_K = −Kx̂,   ỹ = y − Cx̂.
//! ```
//!
//! The Youla policy augments it with a contracting, Lipschitz operator `Q`
//! acting on the innovation: `u = −Kx̂ + Q(ỹ)`, with the observer driven by
//! the applied input `u`. Since `ỹ` measures the gap between expected and
//! observed outputs, `Q` shapes a stable response to surprises, and the
//! closed loop stays contracting and Lipschitz for every admissible `Q`.
//!
//! For zero initial conditions the closed-loop performance output factors
//! as `z = T₀d + T₁ Q(T₂ d)` with `T₀, T₁, T₂` stable linear systems
//! ([`build_t_systems`]); [`verify_superposition`] checks that identity
//! numerically against the real closed loop.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::spectral_radius;
use crate::lti::{GainPair, LtiSystem};
use crate::ren::{ren_step, RenState, RenWeights};
use crate::rollout::{simulate, Scenario};

/// Stack `(d_x; d_y)` into one disturbance vector.
pub fn stack_disturbance(dx: &DVector<f64>, dy: &DVector<f64>) -> DVector<f64> {
    let mut d = DVector::zeros(dx.len() + dy.len());
    d.rows_mut(0, dx.len()).copy_from(dx);
    d.rows_mut(dx.len(), dy.len()).copy_from(dy);
    d
}

/// Stack `(x; u)` into the performance output vector.
pub fn stack_performance(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + u.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), u.len()).copy_from(u);
    z
}

/// The fixed stabilizing observer-feedback law plus its observer state.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseController {
    pub sys: LtiSystem,
    pub gains: GainPair,
    pub xhat: DVector<f64>,
}

impl BaseController {
    pub fn new(sys: LtiSystem, gains: GainPair) -> Self {
        let n = sys.n_x();
        Self {
            sys,
            gains,
            xhat: DVector::zeros(n),
        }
    }
}

/// One base-controller step, in place: returns `(u, ỹ)` and advances the
/// observer with the base input `u = −Kx̂`.
pub fn base_step_mut(ctrl: &mut BaseController, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let sys = &ctrl.sys;
    let ytilde = y - sys.c() * &ctrl.xhat;
    let u = -&ctrl.gains.k * &ctrl.xhat;
    ctrl.xhat = sys.a() * &ctrl.xhat + sys.b() * &u + &ctrl.gains.l * &ytilde;
    (u, ytilde)
}

/// Functional form of [`base_step_mut`].
pub fn base_step(
    ctrl: &BaseController,
    y: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, BaseController) {
    let mut next = ctrl.clone();
    let (u, ytilde) = base_step_mut(&mut next, y);
    (u, ytilde, next)
}

/// How the learnable operator is attached to the base controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// `u = −Kx̂ + Q(ỹ)`: the operator sees the innovation. Stabilizing for
    /// every admissible operator.
    YoulaQ,
    /// `u = −Kx̂ + K_θ(y)`: the operator sees the raw measurement. No
    /// closed-loop guarantee.
    FeedbackResidual,
}

/// Base controller plus a learnable residual operator and its state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub arch: Arch,
    pub base: BaseController,
    pub weights: RenWeights,
    pub q_state: RenState,
}

impl Policy {
    pub fn new(arch: Arch, base: BaseController, weights: RenWeights) -> Result<Self> {
        if weights.dims.n_in != base.sys.n_y() || weights.dims.n_out != base.sys.n_u() {
            return Err(Error::Dimensions(
                "operator must map n_y inputs to n_u outputs".into(),
            ));
        }
        if base.gains.k.nrows() != base.sys.n_u()
            || base.gains.k.ncols() != base.sys.n_x()
            || base.gains.l.nrows() != base.sys.n_x()
            || base.gains.l.ncols() != base.sys.n_y()
        {
            return Err(Error::Dimensions("gain shapes".into()));
        }
        let q_state = RenState::zero(&weights.dims);
        Ok(Self {
            arch,
            base,
            weights,
            q_state,
        })
    }

    /// Copy of the policy with observer and operator states zeroed.
    pub fn reset(&self) -> Self {
        let mut p = self.clone();
        p.base.xhat = DVector::zeros(p.base.sys.n_x());
        p.q_state = RenState::zero(&p.weights.dims);
        p
    }

    /// One policy step in place; returns the applied input.
    pub fn step_mut(&mut self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let sys = &self.base.sys;
        let xhat = &self.base.xhat;
        let ytilde = y - sys.c() * xhat;
        let operator_input = match self.arch {
            Arch::YoulaQ => &ytilde,
            Arch::FeedbackResidual => y,
        };
        let (next_q, residual) = ren_step(&self.weights, &self.q_state, operator_input)?;
        let u = -&self.base.gains.k * xhat + residual;
        // Observer driven by the applied input.
        self.base.xhat = sys.a() * xhat + sys.b() * &u + &self.base.gains.l * &ytilde;
        self.q_state = next_q;
        Ok(u)
    }
}

/// Functional policy step.
pub fn policy_step(p: &Policy, y: &DVector<f64>) -> Result<(DVector<f64>, Policy)> {
    let mut next = p.clone();
    let u = next.step_mut(y)?;
    Ok((u, next))
}

/// A plain discrete-time linear state-space system `x⁺ = Ax + Bu`,
/// `y = Cx + Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSs {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LinearSs {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n {
            return Err(Error::Dimensions("linear system shapes".into()));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::Dimensions("feedthrough shape".into()));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    /// One step: output reads the current state and input.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let y = &self.c * x + &self.d * u;
        let next = &self.a * x + &self.b * u;
        (next, y)
    }

    /// Simulate from zero initial state; returns the output sequence.
    pub fn simulate(&self, inputs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut x = DVector::zeros(self.state_dim());
        inputs
            .iter()
            .map(|u| {
                let (next, y) = self.step(&x, u);
                x = next;
                y
            })
            .collect()
    }
}

/// The three stable linear systems of the closed-loop decomposition:
/// `T₀: d ↦ z` under the base controller, `T₁: ũ ↦ z` contribution of the
/// residual input, `T₂: d ↦ ỹ` the innovation response.
#[derive(Debug, Clone)]
pub struct TSystems {
    pub t0: LinearSs,
    pub t1: LinearSs,
    pub t2: LinearSs,
}

/// Build `T₀, T₁, T₂` for `sys` under `gains`.
///
/// With estimation error `x̃ = x − x̂` the base closed loop is
///
/// ```text
/// x̃⁺ = (A−LC)x̃ + d_x − L d_y
/// x⁺  = (A−BK)x + d_x + BK x̃
/// ỹ   = Cx̃ + d_y,   z = (x; K(x̃−x))
/// ```
///
/// `T₀` reads `z` from the `(x̃, x)` pair, `T₂` reads `ỹ` (note the direct
/// `d_y` feedthrough: the innovation sees the measurement noise), and `T₁`
/// propagates a virtual input `ũ` through `ξ⁺ = (A−BK)ξ + Bũ` with
/// `z`-contribution `(ξ; ũ − Kξ)`. Fails if the gains do not stabilize.
pub fn build_t_systems(sys: &LtiSystem, gains: &GainPair) -> Result<TSystems> {
    let n = sys.n_x();
    let nu = sys.n_u();
    let ny = sys.n_y();
    let a = sys.a();
    let b = sys.b();
    let c = sys.c();
    let k = &gains.k;
    let l = &gains.l;

    let a_k = a - b * k;
    let a_l = a - l * c;
    let rho_control = spectral_radius(&a_k);
    let rho_observer = spectral_radius(&a_l);
    if rho_control >= 1.0 || rho_observer >= 1.0 {
        return Err(Error::UnstableGains {
            rho_control,
            rho_observer,
        });
    }

    // T0: state (x̃; x), input (d_x; d_y), output z = (x; K(x̃−x)).
    let mut a0 = DMatrix::zeros(2 * n, 2 * n);
    a0.view_mut((0, 0), (n, n)).copy_from(&a_l);
    a0.view_mut((n, 0), (n, n)).copy_from(&(b * k));
    a0.view_mut((n, n), (n, n)).copy_from(&a_k);
    let mut b0 = DMatrix::zeros(2 * n, n + ny);
    b0.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    b0.view_mut((0, n), (n, ny)).copy_from(&(-l));
    b0.view_mut((n, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    let mut c0 = DMatrix::zeros(n + nu, 2 * n);
    c0.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
    c0.view_mut((n, 0), (nu, n)).copy_from(k);
    c0.view_mut((n, n), (nu, n)).copy_from(&(-k));
    let t0 = LinearSs::new(a0, b0, c0, DMatrix::zeros(n + nu, n + ny))?;

    // T2: state x̃, input (d_x; d_y), output ỹ = Cx̃ + d_y.
    let mut b2 = DMatrix::zeros(n, n + ny);
    b2.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    b2.view_mut((0, n), (n, ny)).copy_from(&(-l));
    let mut d2 = DMatrix::zeros(ny, n + ny);
    d2.view_mut((0, n), (ny, ny))
        .copy_from(&DMatrix::identity(ny, ny));
    let t2 = LinearSs::new(a_l, b2, c.clone(), d2)?;

    // T1: state ξ, input ũ, output (ξ; ũ − Kξ).
    let mut c1 = DMatrix::zeros(n + nu, n);
    c1.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    c1.view_mut((n, 0), (nu, n)).copy_from(&(-k));
    let mut d1 = DMatrix::zeros(n + nu, nu);
    d1.view_mut((n, 0), (nu, nu))
        .copy_from(&DMatrix::identity(nu, nu));
    let t1 = LinearSs::new(a_k, b.clone(), c1, d1)?;

    Ok(TSystems { t0, t1, t2 })
}

/// Max-norm residual of the superposition identity `z = T₀d + T₁Q(T₂d)`
/// against the actual closed loop, from zero initial conditions.
pub fn verify_superposition(
    sys: &LtiSystem,
    gains: &GainPair,
    weights: &RenWeights,
    scenario: &Scenario,
) -> Result<f64> {
    if scenario.x0.norm() != 0.0 {
        return Err(Error::Precondition(
            "superposition identity requires a zero initial state".into(),
        ));
    }
    let t_len = scenario.horizon();
    let ts = build_t_systems(sys, gains)?;

    // Path 1: the actual closed loop.
    let policy = Policy::new(
        Arch::YoulaQ,
        BaseController::new(sys.clone(), gains.clone()),
        weights.clone(),
    )?;
    let traj = simulate(sys, &policy, scenario)?;

    // Path 2: the decomposition, simulated independently.
    let d: Vec<DVector<f64>> = (0..t_len)
        .map(|t| stack_disturbance(&scenario.dx[t], &scenario.dy[t]))
        .collect();
    let ytilde = ts.t2.simulate(&d);
    let mut q_state = RenState::zero(&weights.dims);
    let mut utilde = Vec::with_capacity(t_len);
    for y in &ytilde {
        let (next, out) = ren_step(weights, &q_state, y)?;
        q_state = next;
        utilde.push(out);
    }
    let z_base = ts.t0.simulate(&d);
    let z_residual = ts.t1.simulate(&utilde);

    let mut residual: f64 = 0.0;
    for t in 0..t_len {
        let diff = &traj.z[t] - &z_base[t] - &z_residual[t];
        residual = residual.max(diff.amax());
    }
    Ok(residual)
}
