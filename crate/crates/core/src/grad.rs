//! Exact reverse-mode gradients of the batch cost with respect to the free
//! parameters, plus an independent finite-difference oracle.
//!
//! The computation graph is fixed: free parameters → normalized weights →
//! closed-loop rollout → quadratic (+ penalty) cost. Rather than a general
//! tape, the backward pass is a hand-derived adjoint sweep over the plant,
//! observer and REN recursions, followed by the chain rule through the
//! smooth normalizers. ReLU uses the zero subgradient at its kink, and the
//! soft input penalty uses the zero subgradient at `|u| = ū`.
//!
//! Parameter vectors are flattened in a fixed canonical order: the weight
//! blocks in state/neuron/output row order (`a, b1, b2, c1, d11, d12, c2,
//! d21, d22`), each row-major, then the biases (`b_chi, b_v, b_y`), then
//! the output-scale parameter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::{GainPair, LtiSystem};
use crate::ren::{
    direct_param, norm_scale, ren_step_detailed, RenDims, RenState, RenTheta, RenWeights,
};
use crate::rollout::{evaluate_cost, Scenario, TaskKind, TaskSpec, Trajectory};
use crate::youla::{stack_performance, Arch, BaseController, Policy};

/// Everything fixed during training: the plant, the base gains, the
/// architecture, and the operator's dimensions and certificates.
#[derive(Debug, Clone)]
pub struct PolicySpec {
    pub sys: LtiSystem,
    pub gains: GainPair,
    pub arch: Arch,
    pub dims: RenDims,
    pub alpha_bar: f64,
    pub out_cap: f64,
}

impl PolicySpec {
    /// Length of the flattened parameter vector.
    pub fn theta_dim(&self) -> usize {
        theta_dim(&self.dims)
    }

    pub fn theta_from_vec(&self, v: &[f64]) -> Result<RenTheta> {
        vec_to_theta(&self.dims, self.alpha_bar, self.out_cap, v)
    }

    /// Instantiate the policy at a parameter vector (states zeroed).
    pub fn policy(&self, theta_vec: &[f64]) -> Result<Policy> {
        let theta = self.theta_from_vec(theta_vec)?;
        Policy::new(
            self.arch,
            BaseController::new(self.sys.clone(), self.gains.clone()),
            direct_param(&theta),
        )
    }
}

/// Flattened length for the canonical ordering.
pub fn theta_dim(dims: &RenDims) -> usize {
    let RenDims {
        n_chi,
        n_v,
        n_in,
        n_out,
    } = *dims;
    n_chi * n_chi
        + n_chi * n_v
        + n_chi * n_in
        + n_v * n_chi
        + n_v * n_v
        + n_v * n_in
        + n_out * n_chi
        + n_out * n_v
        + n_out * n_in
        + n_chi
        + n_v
        + n_out
        + 1
}

fn push_rows(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn take_rows(src: &[f64], pos: &mut usize, nrows: usize, ncols: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(nrows, ncols, |i, j| src[*pos + i * ncols + j]);
    *pos += nrows * ncols;
    m
}

/// Flatten free parameters in the canonical order.
pub fn theta_to_vec(theta: &RenTheta) -> Vec<f64> {
    let mut v = Vec::with_capacity(theta_dim(&theta.dims));
    for m in [
        &theta.a, &theta.b1, &theta.b2, &theta.c1, &theta.d11, &theta.d12, &theta.c2, &theta.d21,
        &theta.d22,
    ] {
        push_rows(&mut v, m);
    }
    v.extend(theta.b_chi.iter());
    v.extend(theta.b_v.iter());
    v.extend(theta.b_y.iter());
    v.push(theta.out_scale);
    v
}

/// Rebuild free parameters from the canonical flattening.
pub fn vec_to_theta(dims: &RenDims, alpha_bar: f64, out_cap: f64, v: &[f64]) -> Result<RenTheta> {
    if v.len() != theta_dim(dims) {
        return Err(Error::Dimensions(format!(
            "parameter vector length {} != {}",
            v.len(),
            theta_dim(dims)
        )));
    }
    let (nc, nv, ni, no) = (dims.n_chi, dims.n_v, dims.n_in, dims.n_out);
    let mut pos = 0;
    let a = take_rows(v, &mut pos, nc, nc);
    let b1 = take_rows(v, &mut pos, nc, nv);
    let b2 = take_rows(v, &mut pos, nc, ni);
    let c1 = take_rows(v, &mut pos, nv, nc);
    let d11 = take_rows(v, &mut pos, nv, nv);
    let d12 = take_rows(v, &mut pos, nv, ni);
    let c2 = take_rows(v, &mut pos, no, nc);
    let d21 = take_rows(v, &mut pos, no, nv);
    let d22 = take_rows(v, &mut pos, no, ni);
    let b_chi = DVector::from_fn(nc, |i, _| v[pos + i]);
    pos += nc;
    let b_v = DVector::from_fn(nv, |i, _| v[pos + i]);
    pos += nv;
    let b_y = DVector::from_fn(no, |i, _| v[pos + i]);
    pos += no;
    let out_scale = v[pos];
    Ok(RenTheta {
        dims: *dims,
        a,
        b1,
        b2,
        c1,
        d11,
        d12,
        c2,
        d21,
        d22,
        b_chi,
        b_v,
        b_y,
        out_scale,
        alpha_bar,
        out_cap,
    })
}

/// Per-step record of one closed-loop rollout.
struct Tape {
    xs: Vec<DVector<f64>>,
    xhats: Vec<DVector<f64>>,
    chis: Vec<DVector<f64>>,
    vs: Vec<DVector<f64>>,
    ws: Vec<DVector<f64>>,
    ren_ins: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    ys: Vec<DVector<f64>>,
    /// min over steps and neurons of |v|; +inf when there are no neurons.
    relu_margin: f64,
}

impl Tape {
    fn trajectory(&self) -> Trajectory {
        let t_len = self.us.len();
        Trajectory {
            x: self.xs.clone(),
            u: self.us.clone(),
            y: self.ys.clone(),
            z: (0..t_len)
                .map(|t| stack_performance(&self.xs[t], &self.us[t]))
                .collect(),
        }
    }
}

/// Forward rollout mirroring `Policy::step_mut` exactly, recording every
/// intermediate needed by the adjoint sweep.
fn forward_record(
    sys: &LtiSystem,
    gains: &GainPair,
    arch: Arch,
    weights: &RenWeights,
    scenario: &Scenario,
) -> Result<Tape> {
    let t_len = scenario.horizon();
    let mut tape = Tape {
        xs: Vec::with_capacity(t_len + 1),
        xhats: Vec::with_capacity(t_len + 1),
        chis: Vec::with_capacity(t_len + 1),
        vs: Vec::with_capacity(t_len),
        ws: Vec::with_capacity(t_len),
        ren_ins: Vec::with_capacity(t_len),
        us: Vec::with_capacity(t_len),
        ys: Vec::with_capacity(t_len),
        relu_margin: f64::INFINITY,
    };
    tape.xs.push(scenario.x0.clone());
    tape.xhats.push(DVector::zeros(sys.n_x()));
    tape.chis.push(DVector::zeros(weights.dims.n_chi));

    for t in 0..t_len {
        let x = &tape.xs[t];
        let xhat = &tape.xhats[t];
        let y = sys.c() * x + &scenario.dy[t];
        let ytilde = &y - sys.c() * xhat;
        let ren_in = match arch {
            Arch::YoulaQ => ytilde.clone(),
            Arch::FeedbackResidual => y.clone(),
        };
        let state = RenState {
            chi: tape.chis[t].clone(),
        };
        let (next_q, residual, v, w) = ren_step_detailed(weights, &state, &ren_in)?;
        for vi in v.iter() {
            tape.relu_margin = tape.relu_margin.min(vi.abs());
        }
        let u = -&gains.k * xhat + residual;
        let xhat_next = sys.a() * xhat + sys.b() * &u + &gains.l * &ytilde;
        let x_next = sys.step(x, &u, &scenario.dx[t]);
        if !(x_next.iter().all(|v| v.is_finite()) && u.iter().all(|v| v.is_finite())) {
            return Err(Error::NumericalAbort {
                step: t,
                what: "state or input overflowed".into(),
            });
        }
        tape.vs.push(v);
        tape.ws.push(w);
        tape.ren_ins.push(ren_in);
        tape.us.push(u);
        tape.ys.push(y);
        tape.xs.push(x_next);
        tape.xhats.push(xhat_next);
        tape.chis.push(next_q.chi);
    }
    Ok(tape)
}

/// Gradients with respect to the explicit (normalized) weights.
struct ExplicitGrads {
    a_chi: DMatrix<f64>,
    b1: DMatrix<f64>,
    b2: DMatrix<f64>,
    c1: DMatrix<f64>,
    d11: DMatrix<f64>,
    d12: DMatrix<f64>,
    c2: DMatrix<f64>,
    d21: DMatrix<f64>,
    d22: DMatrix<f64>,
    b_chi: DVector<f64>,
    b_v: DVector<f64>,
    b_y: DVector<f64>,
}

impl ExplicitGrads {
    fn zeros(dims: &RenDims) -> Self {
        Self {
            a_chi: DMatrix::zeros(dims.n_chi, dims.n_chi),
            b1: DMatrix::zeros(dims.n_chi, dims.n_v),
            b2: DMatrix::zeros(dims.n_chi, dims.n_in),
            c1: DMatrix::zeros(dims.n_v, dims.n_chi),
            d11: DMatrix::zeros(dims.n_v, dims.n_v),
            d12: DMatrix::zeros(dims.n_v, dims.n_in),
            c2: DMatrix::zeros(dims.n_out, dims.n_chi),
            d21: DMatrix::zeros(dims.n_out, dims.n_v),
            d22: DMatrix::zeros(dims.n_out, dims.n_in),
            b_chi: DVector::zeros(dims.n_chi),
            b_v: DVector::zeros(dims.n_v),
            b_y: DVector::zeros(dims.n_out),
        }
    }

    fn add_scaled(&mut self, other: &Self, s: f64) {
        add_scaled_mat(&mut self.a_chi, &other.a_chi, s);
        add_scaled_mat(&mut self.b1, &other.b1, s);
        add_scaled_mat(&mut self.b2, &other.b2, s);
        add_scaled_mat(&mut self.c1, &other.c1, s);
        add_scaled_mat(&mut self.d11, &other.d11, s);
        add_scaled_mat(&mut self.d12, &other.d12, s);
        add_scaled_mat(&mut self.c2, &other.c2, s);
        add_scaled_mat(&mut self.d21, &other.d21, s);
        add_scaled_mat(&mut self.d22, &other.d22, s);
        self.b_chi.axpy(s, &other.b_chi, 1.0);
        self.b_v.axpy(s, &other.b_v, 1.0);
        self.b_y.axpy(s, &other.b_y, 1.0);
    }
}

fn add_scaled_mat(dst: &mut DMatrix<f64>, src: &DMatrix<f64>, s: f64) {
    dst.iter_mut().zip(src.iter()).for_each(|(d, v)| *d += s * v);
}

/// Adjoint sweep over one recorded rollout. Returns the per-rollout cost
/// gradient with respect to the explicit weights.
fn backward_sweep(
    sys: &LtiSystem,
    gains: &GainPair,
    arch: Arch,
    weights: &RenWeights,
    task: &TaskSpec,
    tape: &Tape,
) -> ExplicitGrads {
    let t_len = tape.us.len();
    let w = &task.weights;
    let mut g = ExplicitGrads::zeros(&weights.dims);

    let mut lx: DVector<f64> = 2.0 * (w.qf() * &tape.xs[t_len]);
    let mut lxh: DVector<f64> = DVector::zeros(sys.n_x());
    let mut lchi: DVector<f64> = DVector::zeros(weights.dims.n_chi);

    for t in (0..t_len).rev() {
        let u = &tape.us[t];
        // Stage-cost input gradient, plus the soft-penalty subgradient.
        let mut du: DVector<f64> = 2.0 * (w.r() * u);
        if task.kind == TaskKind::InputConstrained {
            for (i, ui) in u.iter().enumerate() {
                if ui.abs() > task.u_bar {
                    du[i] += task.rho * ui.signum();
                }
            }
        }
        let lu = sys.b().transpose() * &lx + sys.b().transpose() * &lxh + du;

        // REN backward at step t.
        let chi = &tape.chis[t];
        let q_in = &tape.ren_ins[t];
        let v = &tape.vs[t];
        let wv = &tape.ws[t];
        let g_next = &lchi;
        let g_out = &lu;

        let mut g_w = weights.b1.transpose() * g_next + weights.d21.transpose() * g_out;
        let mut g_v = DVector::zeros(weights.dims.n_v);
        for i in (0..weights.dims.n_v).rev() {
            let gi = if v[i] > 0.0 { g_w[i] } else { 0.0 };
            g_v[i] = gi;
            if gi != 0.0 {
                for j in 0..i {
                    g_w[j] += weights.d11[(i, j)] * gi;
                }
            }
        }
        let g_chi = weights.a_chi.transpose() * g_next
            + weights.c1.transpose() * &g_v
            + weights.c2.transpose() * g_out;
        let g_in = weights.b2.transpose() * g_next
            + weights.d12.transpose() * &g_v
            + weights.d22.transpose() * g_out;

        g.a_chi.ger(1.0, g_next, chi, 1.0);
        g.b1.ger(1.0, g_next, wv, 1.0);
        g.b2.ger(1.0, g_next, q_in, 1.0);
        g.b_chi += g_next;
        g.c1.ger(1.0, &g_v, chi, 1.0);
        g.d11.ger(1.0, &g_v, wv, 1.0);
        g.d12.ger(1.0, &g_v, q_in, 1.0);
        g.b_v += &g_v;
        g.c2.ger(1.0, g_out, chi, 1.0);
        g.d21.ger(1.0, g_out, wv, 1.0);
        g.d22.ger(1.0, g_out, q_in, 1.0);
        g.b_y += g_out;

        // Observer and plant adjoints. ỹ = Cx + d_y − Cx̂ feeds the observer
        // (L-path) and, for the Youla arrangement, the operator input.
        let mut lyt = gains.l.transpose() * &lxh;
        let mut lx_new = sys.a().transpose() * &lx + 2.0 * (w.q() * &tape.xs[t]);
        match arch {
            Arch::YoulaQ => lyt += &g_in,
            Arch::FeedbackResidual => lx_new += sys.c().transpose() * &g_in,
        }
        let lxh_new =
            sys.a().transpose() * &lxh - gains.k.transpose() * &lu - sys.c().transpose() * &lyt;
        lx_new += sys.c().transpose() * &lyt;

        lx = lx_new;
        lxh = lxh_new;
        lchi = g_chi;
    }
    g
}

fn strict_lower_mask(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if j < i { m[(i, j)] } else { 0.0 })
}

/// Chain rule through `y = c·M/(1+‖M‖_F)`: given `G = ∂J/∂y` return
/// `∂J/∂M = c·G/(1+f) − c·⟨G,M⟩·M/(f(1+f)²)`, the correction vanishing at
/// `M = 0` (the map is differentiable there; the denominator never vanishes).
fn normalizer_backward(c: f64, m: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let f = m.norm();
    let mut out = g * (c / (1.0 + f));
    if f > 0.0 {
        let inner = g.dot(m);
        add_scaled_mat(&mut out, m, -c * inner / (f * (1.0 + f) * (1.0 + f)));
    }
    out
}

/// `⟨G, N_c(M)⟩`, the sensitivity of a scaled block to its scale factor.
fn scale_sensitivity(c: f64, m: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
    g.dot(m) * norm_scale(c, m.norm())
}

/// Chain the explicit-weight gradients through the direct parameterization,
/// producing the flattened free-parameter gradient.
fn direct_param_backward(theta: &RenTheta, g: &ExplicitGrads) -> Vec<f64> {
    let ab = theta.alpha_bar;
    let s_budget = ab.sqrt() / 2.0;
    let cap = theta.out_cap;
    let io = crate::ren::io_gain(theta.out_scale);

    let ga = normalizer_backward(ab / 2.0, &theta.a, &g.a_chi);
    let gb1 = normalizer_backward(s_budget, &theta.b1, &g.b1);
    let gc1 = normalizer_backward(s_budget, &theta.c1, &g.c1);
    // Only the strict lower triangle of the normalized block is used.
    let gd11 = normalizer_backward(0.5, &theta.d11, &strict_lower_mask(&g.d11));

    let mut io_sens = 0.0;
    let mut io_block = |m: &DMatrix<f64>, gm: &DMatrix<f64>| -> DMatrix<f64> {
        io_sens += scale_sensitivity(cap, m, gm);
        normalizer_backward(cap, m, gm) * io
    };
    let gb2 = io_block(&theta.b2, &g.b2);
    let gd12 = io_block(&theta.d12, &g.d12);
    let gc2 = io_block(&theta.c2, &g.c2);
    let gd21 = io_block(&theta.d21, &g.d21);
    let gd22 = io_block(&theta.d22, &g.d22);
    // d(tanh)/ds = 1 − tanh².
    let g_out_scale = io_sens * (1.0 - io * io);

    let mut v = Vec::with_capacity(theta_dim(&theta.dims));
    for m in [&ga, &gb1, &gb2, &gc1, &gd11, &gd12, &gc2, &gd21, &gd22] {
        push_rows(&mut v, m);
    }
    v.extend(g.b_chi.iter());
    v.extend(g.b_v.iter());
    v.extend(g.b_y.iter());
    v.push(g_out_scale);
    v
}

/// Batch cost and its exact gradient at `theta_vec`.
///
/// The cost equals [`crate::rollout::batch_cost`] at the same parameters;
/// the gradient is the exact reverse-mode derivative of that scalar, with
/// per-scenario sweeps reduced in batch order (deterministic for fixed
/// scenarios).
pub fn grad_exact(
    spec: &PolicySpec,
    task: &TaskSpec,
    theta_vec: &[f64],
    scenarios: &[Scenario],
) -> Result<(f64, Vec<f64>)> {
    let (cost, grad, _) = grad_exact_detailed(spec, task, theta_vec, scenarios)?;
    Ok((cost, grad))
}

/// As [`grad_exact`], also returning the smallest ReLU pre-activation
/// magnitude seen in the batch (the kink margin used to filter
/// finite-difference comparisons).
pub fn grad_exact_detailed(
    spec: &PolicySpec,
    task: &TaskSpec,
    theta_vec: &[f64],
    scenarios: &[Scenario],
) -> Result<(f64, Vec<f64>, f64)> {
    if scenarios.is_empty() {
        return Err(Error::Precondition("empty scenario batch".into()));
    }
    if !theta_vec.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("parameter vector".into()));
    }
    let theta = spec.theta_from_vec(theta_vec)?;
    let weights = direct_param(&theta);
    let scale = 1.0 / scenarios.len() as f64;

    let mut cost = 0.0;
    let mut margin = f64::INFINITY;
    let mut g_mean = ExplicitGrads::zeros(&spec.dims);
    for (i, scenario) in scenarios.iter().enumerate() {
        let tape = forward_record(&spec.sys, &spec.gains, spec.arch, &weights, scenario)
            .map_err(|e| match e {
                Error::NumericalAbort { step, what } => Error::NumericalAbort {
                    step,
                    what: format!("scenario {i}: {what}"),
                },
                other => other,
            })?;
        cost += evaluate_cost(&tape.trajectory(), task)?;
        margin = margin.min(penalty_adjusted_margin(&tape, task));
        let g = backward_sweep(&spec.sys, &spec.gains, spec.arch, &weights, task, &tape);
        g_mean.add_scaled(&g, scale);
    }
    cost *= scale;
    let grad = direct_param_backward(&theta, &g_mean);
    Ok((cost, grad, margin))
}

/// The kink margin of a rollout: distance of ReLU pre-activations to zero
/// and, for the input-constrained task, of `|u|` to the soft bound.
fn penalty_adjusted_margin(tape: &Tape, task: &TaskSpec) -> f64 {
    let mut margin = tape.relu_margin;
    if task.kind == TaskKind::InputConstrained {
        for u in &tape.us {
            for ui in u.iter() {
                margin = margin.min((ui.abs() - task.u_bar).abs());
            }
        }
    }
    margin
}

/// Batch cost plus the kink margin of the evaluation (no gradient).
pub fn cost_and_margin(
    spec: &PolicySpec,
    task: &TaskSpec,
    theta_vec: &[f64],
    scenarios: &[Scenario],
) -> Result<(f64, f64)> {
    if scenarios.is_empty() {
        return Err(Error::Precondition("empty scenario batch".into()));
    }
    let theta = spec.theta_from_vec(theta_vec)?;
    let weights = direct_param(&theta);
    let mut cost = 0.0;
    let mut margin = f64::INFINITY;
    for scenario in scenarios {
        let tape = forward_record(&spec.sys, &spec.gains, spec.arch, &weights, scenario)?;
        cost += evaluate_cost(&tape.trajectory(), task)?;
        margin = margin.min(penalty_adjusted_margin(&tape, task));
    }
    Ok((cost / scenarios.len() as f64, margin))
}

/// Central-difference gradient: `(J(θ+h·eᵢ) − J(θ−h·eᵢ))/(2h)` per
/// coordinate. Independent of the reverse-mode path; used as its oracle.
pub fn finite_diff_oracle<F>(mut costfn: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Precondition("step must be positive".into()));
    }
    let mut grad = Vec::with_capacity(theta.len());
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + step;
        let plus = costfn(&work)?;
        work[i] = theta[i] - step;
        let minus = costfn(&work)?;
        work[i] = theta[i];
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// One finite-difference vs reverse-mode comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub coord: usize,
    pub exact: f64,
    pub fd: f64,
    pub rel_err: f64,
    /// Kink margin: min distance of any ReLU pre-activation (and penalty
    /// boundary) to its kink across the two perturbed evaluations.
    pub margin: f64,
}

/// Compare the exact gradient against central differences on selected
/// coordinates, reporting the kink margin so near-kink coordinates can be
/// excluded.
pub fn compare_with_fd(
    spec: &PolicySpec,
    task: &TaskSpec,
    theta_vec: &[f64],
    scenarios: &[Scenario],
    coords: &[usize],
    step: f64,
) -> Result<Vec<GradCheck>> {
    let (_, grad, _) = grad_exact_detailed(spec, task, theta_vec, scenarios)?;
    let mut work = theta_vec.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        work[i] = theta_vec[i] + step;
        let (plus, m_plus) = cost_and_margin(spec, task, &work, scenarios)?;
        work[i] = theta_vec[i] - step;
        let (minus, m_minus) = cost_and_margin(spec, task, &work, scenarios)?;
        work[i] = theta_vec[i];
        let fd = (plus - minus) / (2.0 * step);
        let exact = grad[i];
        let denom = exact.abs().max(fd.abs()).max(1e-12);
        out.push(GradCheck {
            coord: i,
            exact,
            fd,
            rel_err: (exact - fd).abs() / denom,
            margin: m_plus.min(m_minus),
        });
    }
    Ok(out)
}

/// Median relative error over the kink-filtered comparisons.
pub fn filtered_median_rel_err(checks: &[GradCheck], margin_floor: f64) -> Option<f64> {
    let mut errs: Vec<f64> = checks
        .iter()
        .filter(|c| c.margin > margin_floor)
        .map(|c| c.rel_err)
        .collect();
    if errs.is_empty() {
        return None;
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(errs[errs.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{build_cartpole, lqg_gains, CartpoleParams, CostWeights, NoiseCov};
    use crate::rollout::{batch_cost, sample_batch};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cartpole_spec(dims: RenDims, arch: Arch) -> (PolicySpec, TaskSpec) {
        let sys = build_cartpole(&CartpoleParams::default()).unwrap();
        let task = TaskSpec::lqg(
            CostWeights::cartpole_default(),
            NoiseCov::cartpole_default(),
            10,
        );
        let gains = lqg_gains(&sys, &task.weights, &task.noise).unwrap();
        (
            PolicySpec {
                sys,
                gains,
                arch,
                dims,
                alpha_bar: 0.95,
                out_cap: 1.0,
            },
            task,
        )
    }

    fn random_theta_vec(spec: &PolicySpec, seed: u64, out_scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = RenTheta::random(spec.dims, spec.alpha_bar, spec.out_cap, out_scale, &mut rng);
        theta_to_vec(&theta)
    }

    #[test]
    fn flattening_round_trips() {
        let dims = RenDims::new(3, 5, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = RenTheta::random(dims, 0.95, 1.0, 0.42, &mut rng);
        let v = theta_to_vec(&theta);
        assert_eq!(v.len(), theta_dim(&dims));
        let back = vec_to_theta(&dims, 0.95, 1.0, &v).unwrap();
        assert_eq!(theta, back);
        assert!(vec_to_theta(&dims, 0.95, 1.0, &v[1..]).is_err());
    }

    #[test]
    fn fd_oracle_basics() {
        let theta = vec![0.3, -0.2, 0.5];
        let zero = finite_diff_oracle(|_| Ok(7.0), &theta, 1e-6).unwrap();
        assert!(zero.iter().all(|&g| g == 0.0));

        let c = [2.0, -1.5, 0.25];
        let lin = finite_diff_oracle(
            |t| Ok(c.iter().zip(t).map(|(ci, ti)| ci * ti).sum()),
            &theta,
            1e-6,
        )
        .unwrap();
        for (g, ci) in lin.iter().zip(c) {
            assert_relative_eq!(*g, ci, epsilon = 1e-10);
        }

        let e1 = vec![1.0, 0.0];
        let quad = finite_diff_oracle(|t| Ok(t.iter().map(|x| x * x).sum()), &e1, 1e-5).unwrap();
        assert_relative_eq!(quad[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(quad[1], 0.0, epsilon = 1e-9);

        assert!(finite_diff_oracle(|_| Ok(0.0), &theta, 0.0).is_err());
    }

    #[test]
    fn cost_matches_batch_cost_exactly() {
        let dims = RenDims::new(4, 6, 2, 1).unwrap();
        let (spec, task) = cartpole_spec(dims, Arch::YoulaQ);
        let theta_vec = random_theta_vec(&spec, 5, 0.3);
        let scenarios = sample_batch(&spec.sys, &task, 10, 4).unwrap();
        let (cost, _) = grad_exact(&spec, &task, &theta_vec, &scenarios).unwrap();
        let policy = spec.policy(&theta_vec).unwrap();
        let reference = batch_cost(&spec.sys, &policy, &scenarios, &task).unwrap();
        assert_eq!(cost, reference);
    }

    #[test]
    fn zero_out_scale_zeroes_io_block_gradients() {
        let dims = RenDims::new(3, 4, 2, 1).unwrap();
        let (spec, task) = cartpole_spec(dims, Arch::YoulaQ);
        let mut theta_vec = random_theta_vec(&spec, 6, 0.0);
        *theta_vec.last_mut().unwrap() = 0.0;
        let scenarios = sample_batch(&spec.sys, &task, 20, 2).unwrap();
        let (_, grad) = grad_exact(&spec, &task, &theta_vec, &scenarios).unwrap();

        let (nc, nv, ni, no) = (3usize, 4usize, 2usize, 1usize);
        let b2_start = nc * nc + nc * nv;
        let b2_end = b2_start + nc * ni;
        for (i, gi) in grad.iter().enumerate().take(b2_end).skip(b2_start) {
            assert_eq!(*gi, 0.0, "b2 grad at {i}");
        }
        let d12_start = b2_end + nv * nc + nv * nv;
        let d22_end = d12_start + nv * ni + no * nc + no * nv + no * ni;
        for (i, gi) in grad.iter().enumerate().take(d22_end).skip(d12_start) {
            assert_eq!(*gi, 0.0, "io grad at {i}");
        }
    }

    #[test]
    fn scalar_static_operator_matches_closed_form() {
        // Scalar plant, memoryless linear operator (single d22 entry), one
        // step, quadratic cost: differentiate the composition by hand.
        let one = DMatrix::identity(1, 1);
        let sys = LtiSystem::new(&one * 0.7, one.clone(), one.clone()).unwrap();
        let weights = CostWeights::new(one.clone(), one.clone(), &one * 2.0).unwrap();
        let noise = NoiseCov::new(one.clone(), one.clone()).unwrap();
        let task = TaskSpec::lqg(weights, noise, 1);
        let gains = GainPair {
            k: DMatrix::from_element(1, 1, 0.3),
            l: DMatrix::from_element(1, 1, 0.2),
        };
        let dims = RenDims::new(0, 0, 1, 1).unwrap();
        let spec = PolicySpec {
            sys,
            gains,
            arch: Arch::YoulaQ,
            dims,
            alpha_bar: 0.95,
            out_cap: 1.0,
        };

        let d = 0.4_f64;
        let s = 0.8_f64;
        let theta_vec = vec![d, 0.0, s]; // d22, b_y, out_scale
        assert_eq!(spec.theta_dim(), 3);

        let x0 = 0.5;
        let dx0 = 0.1;
        let dy0 = -0.2;
        let scenario = Scenario {
            x0: DVector::from_element(1, x0),
            dx: vec![DVector::from_element(1, dx0)],
            dy: vec![DVector::from_element(1, dy0)],
            seed: 0,
        };

        let (cost, grad) = grad_exact(&spec, &task, &theta_vec, &[scenario]).unwrap();

        // Forward by hand: x̂₀ = 0 so ỹ₀ = x₀ + dy₀.
        let cap = 1.0;
        let io = s.tanh();
        let d22 = io * cap * d / (1.0 + d.abs());
        let ytilde = x0 + dy0;
        let u0 = d22 * ytilde;
        let x1 = 0.7 * x0 + u0 + dx0;
        let j = x0 * x0 + u0 * u0 + 2.0 * x1 * x1;
        assert_relative_eq!(cost, j, epsilon = 1e-14);

        // dJ/d(d22) = 2 R u₀ ỹ + 2 Q_f x₁ B ỹ.
        let dj_dd22 = 2.0 * u0 * ytilde + 2.0 * 2.0 * x1 * ytilde;
        let dd22_dd = io * cap / ((1.0 + d.abs()) * (1.0 + d.abs()));
        assert_relative_eq!(grad[0], dj_dd22 * dd22_dd, max_relative = 1e-12);

        // b_y gradient: dJ/d(b_y) = 2 R u₀ + 2 Q_f x₁ B.
        assert_relative_eq!(grad[1], 2.0 * u0 + 4.0 * x1, max_relative = 1e-12);

        // out_scale gradient through tanh.
        let dj_ds = dj_dd22 * (cap * d / (1.0 + d.abs())) * (1.0 - io * io);
        assert_relative_eq!(grad[2], dj_ds, max_relative = 1e-12);
    }

    #[test]
    fn gradient_agrees_with_fd_small_ren() {
        let dims = RenDims::new(3, 4, 2, 1).unwrap();
        for arch in [Arch::YoulaQ, Arch::FeedbackResidual] {
            let (spec, task) = cartpole_spec(dims, arch);
            let theta_vec = random_theta_vec(&spec, 7, 1.5);
            let scenarios = sample_batch(&spec.sys, &task, 30, 2).unwrap();
            let coords: Vec<usize> = (0..spec.theta_dim()).collect();
            let checks =
                compare_with_fd(&spec, &task, &theta_vec, &scenarios, &coords, 1e-6).unwrap();
            let median = filtered_median_rel_err(&checks, 1e-4).unwrap();
            assert!(median <= 1e-5, "median relative error {median} ({arch:?})");
            // A wrong adjoint shows up as O(1) errors almost everywhere;
            // finite-difference noise only pollutes the tail.
            let mut errs: Vec<f64> = checks
                .iter()
                .filter(|c| c.margin > 1e-4)
                .map(|c| c.rel_err)
                .collect();
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let p90 = errs[(errs.len() * 9) / 10];
            assert!(p90 <= 1e-3, "p90 relative error {p90} ({arch:?})");
        }
    }

    #[test]
    fn gradient_agrees_with_fd_input_constrained() {
        let dims = RenDims::new(2, 3, 2, 1).unwrap();
        let sys = build_cartpole(&CartpoleParams::default()).unwrap();
        let task = TaskSpec::input_constrained(
            CostWeights::cartpole_default(),
            NoiseCov::cartpole_default(),
            8,
            400.0,
            0.05,
        )
        .unwrap();
        let gains = lqg_gains(&sys, &task.weights, &task.noise).unwrap();
        let spec = PolicySpec {
            sys,
            gains,
            arch: Arch::YoulaQ,
            dims,
            alpha_bar: 0.95,
            out_cap: 1.0,
        };
        let theta_vec = random_theta_vec(&spec, 8, 1.2);
        let scenarios = sample_batch(&spec.sys, &task, 40, 2).unwrap();
        let coords: Vec<usize> = (0..spec.theta_dim()).collect();
        let checks = compare_with_fd(&spec, &task, &theta_vec, &scenarios, &coords, 1e-6).unwrap();
        let median = filtered_median_rel_err(&checks, 1e-4).unwrap();
        assert!(median <= 1e-5, "median relative error {median}");
        let mut errs: Vec<f64> = checks
            .iter()
            .filter(|c| c.margin > 1e-4)
            .map(|c| c.rel_err)
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p90 = errs[(errs.len() * 9) / 10];
        assert!(p90 <= 1e-3, "p90 relative error {p90}");
    }

    #[test]
    fn gradients_are_deterministic() {
        let dims = RenDims::new(4, 6, 2, 1).unwrap();
        let (spec, task) = cartpole_spec(dims, Arch::YoulaQ);
        let theta_vec = random_theta_vec(&spec, 9, 0.2);
        let scenarios = sample_batch(&spec.sys, &task, 50, 5).unwrap();
        let (c1, g1) = grad_exact(&spec, &task, &theta_vec, &scenarios).unwrap();
        let (c2, g2) = grad_exact(&spec, &task, &theta_vec, &scenarios).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn batch_gradient_is_mean_of_scenario_gradients() {
        let dims = RenDims::new(3, 4, 2, 1).unwrap();
        let (spec, task) = cartpole_spec(dims, Arch::YoulaQ);
        let theta_vec = random_theta_vec(&spec, 10, 0.3);
        let scenarios = sample_batch(&spec.sys, &task, 60, 3).unwrap();
        let (_, g_batch) = grad_exact(&spec, &task, &theta_vec, &scenarios).unwrap();
        let mut g_mean = vec![0.0; spec.theta_dim()];
        for s in &scenarios {
            let (_, g) = grad_exact(&spec, &task, &theta_vec, std::slice::from_ref(s)).unwrap();
            for (m, gi) in g_mean.iter_mut().zip(g) {
                *m += gi / scenarios.len() as f64;
            }
        }
        for (a, b) in g_batch.iter().zip(&g_mean) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12, max_relative = 1e-10);
        }
    }

    #[test]
    fn rejects_non_finite_theta() {
        let dims = RenDims::new(1, 1, 2, 1).unwrap();
        let (spec, task) = cartpole_spec(dims, Arch::YoulaQ);
        let mut theta_vec = vec![0.0; spec.theta_dim()];
        theta_vec[0] = f64::NAN;
        let scenarios = sample_batch(&spec.sys, &task, 1, 1).unwrap();
        assert!(matches!(
            grad_exact(&spec, &task, &theta_vec, &scenarios),
            Err(Error::NonFinite(_))
        ));
    }
}
