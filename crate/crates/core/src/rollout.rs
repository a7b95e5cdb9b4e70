//! Scenario sampling, closed-loop simulation and cost evaluation.
//!
//! A [`Scenario`] fixes everything random about one rollout: the initial
//! state and the full disturbance sequences. Scenarios are produced from a
//! seed alone, so any batch can be replayed bit-for-bit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, vec_finite};
use crate::lti::{CostWeights, FiniteHorizonLqg, GainPair, LtiSystem, NoiseCov};
use crate::youla::{base_step_mut, stack_performance, BaseController, Policy};

/// Which cost functional a task uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Quadratic stage + terminal cost.
    Lqg,
    /// Quadratic cost plus a soft input-magnitude penalty.
    InputConstrained,
}

/// Piecewise-constant + Gaussian actuator disturbance parameters for the
/// input-constrained task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputDisturbance {
    /// Std of the per-step Gaussian component.
    pub gauss_std: f64,
    /// Minimum segment duration (steps).
    pub seg_min: usize,
    /// Maximum segment duration (steps), inclusive.
    pub seg_max: usize,
    /// Segment magnitudes are uniform in `[-mag, mag]`.
    pub mag: f64,
}

impl Default for InputDisturbance {
    fn default() -> Self {
        Self {
            gauss_std: 0.1,
            seg_min: 10,
            seg_max: 30,
            mag: 5.0,
        }
    }
}

/// A control task: cost weights, noise model, horizon and (for the
/// input-constrained variant) the penalty terms.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub weights: CostWeights,
    pub noise: NoiseCov,
    pub horizon: usize,
    /// Penalty coefficient ρ (input-constrained only).
    pub rho: f64,
    /// Soft input bound ū (input-constrained only).
    pub u_bar: f64,
    /// Initial states are drawn from `N(0, x0_std²·I)`.
    pub x0_std: f64,
    /// Actuator-channel disturbance (input-constrained only).
    pub input_disturbance: InputDisturbance,
}

impl TaskSpec {
    pub fn lqg(weights: CostWeights, noise: NoiseCov, horizon: usize) -> Self {
        Self {
            kind: TaskKind::Lqg,
            weights,
            noise,
            horizon,
            rho: 0.0,
            u_bar: 0.0,
            x0_std: 0.1,
            input_disturbance: InputDisturbance::default(),
        }
    }

    pub fn input_constrained(
        weights: CostWeights,
        noise: NoiseCov,
        horizon: usize,
        rho: f64,
        u_bar: f64,
    ) -> Result<Self> {
        if !(rho >= 0.0) || !(u_bar > 0.0) {
            return Err(Error::Precondition(
                "input-constrained task needs rho >= 0 and u_bar > 0".into(),
            ));
        }
        Ok(Self {
            kind: TaskKind::InputConstrained,
            weights,
            noise,
            horizon,
            rho,
            u_bar,
            x0_std: 0.1,
            input_disturbance: InputDisturbance::default(),
        })
    }
}

/// Sampled initial state and disturbance sequences for one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub x0: DVector<f64>,
    pub dx: Vec<DVector<f64>>,
    pub dy: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Scenario {
    pub fn horizon(&self) -> usize {
        self.dx.len()
    }
}

fn normal_vec<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        x
    })
}

/// Draw a scenario for `task` from `seed` alone.
///
/// Draw order is fixed: initial state, process noise rows, measurement
/// noise rows, then (input-constrained only) the per-step Gaussian actuator
/// noise and the piecewise-constant segments. Identical seeds give
/// bit-identical scenarios.
pub fn sample_scenario(sys: &LtiSystem, task: &TaskSpec, seed: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = task.horizon;
    let sx = psd_sqrt(task.noise.sigma_x())?;
    let sy = psd_sqrt(task.noise.sigma_y())?;

    let x0 = normal_vec(sys.n_x(), &mut rng) * task.x0_std;
    let mut dx: Vec<DVector<f64>> = (0..t_len)
        .map(|_| &sx * normal_vec(sys.n_x(), &mut rng))
        .collect();
    let dy: Vec<DVector<f64>> = (0..t_len)
        .map(|_| &sy * normal_vec(sys.n_y(), &mut rng))
        .collect();

    if task.kind == TaskKind::InputConstrained {
        let p = &task.input_disturbance;
        let gauss: Vec<DVector<f64>> = (0..t_len)
            .map(|_| normal_vec(sys.n_u(), &mut rng) * p.gauss_std)
            .collect();
        let mut steps: Vec<DVector<f64>> = Vec::with_capacity(t_len);
        while steps.len() < t_len {
            let duration = rng.random_range(p.seg_min..=p.seg_max);
            let level = DVector::from_fn(sys.n_u(), |_, _| rng.random_range(-p.mag..p.mag));
            for _ in 0..duration {
                if steps.len() == t_len {
                    break;
                }
                steps.push(level.clone());
            }
        }
        for t in 0..t_len {
            dx[t] += sys.b() * (&gauss[t] + &steps[t]);
        }
    }

    Ok(Scenario { x0, dx, dy, seed })
}

/// Closed-loop record: `x` has `T+1` rows, `u`/`y`/`z` have `T` rows, and
/// `z_t = (x_t; u_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Largest state norm along the trajectory.
    pub fn max_state_norm(&self) -> f64 {
        self.x.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }
}

fn simulate_with<F>(sys: &LtiSystem, s: &Scenario, mut control: F) -> Result<Trajectory>
where
    F: FnMut(usize, &DVector<f64>) -> Result<DVector<f64>>,
{
    let t_len = s.dx.len();
    if s.dy.len() != t_len {
        return Err(Error::Dimensions("scenario dx/dy lengths differ".into()));
    }
    if s.x0.len() != sys.n_x() {
        return Err(Error::Dimensions("scenario x0 length".into()));
    }
    let mut x = Vec::with_capacity(t_len + 1);
    let mut us = Vec::with_capacity(t_len);
    let mut ys = Vec::with_capacity(t_len);
    let mut zs = Vec::with_capacity(t_len);
    x.push(s.x0.clone());
    for t in 0..t_len {
        let xt = &x[t];
        let y = sys.c() * xt + &s.dy[t];
        let u = control(t, &y)?;
        let next = sys.step(xt, &u, &s.dx[t]);
        if !(vec_finite(&next) && vec_finite(&u)) {
            return Err(Error::NumericalAbort {
                step: t,
                what: "state or input overflowed".into(),
            });
        }
        zs.push(stack_performance(xt, &u));
        us.push(u);
        ys.push(y);
        x.push(next);
    }
    Ok(Trajectory {
        x,
        u: us,
        y: ys,
        z: zs,
    })
}

/// Simulate the closed loop of `policy` against the plant.
pub fn simulate(sys: &LtiSystem, policy: &Policy, s: &Scenario) -> Result<Trajectory> {
    let mut p = policy.clone();
    simulate_with(sys, s, |_, y| p.step_mut(y))
}

/// Simulate the base (linear observer-feedback) controller alone.
pub fn simulate_base(sys: &LtiSystem, gains: &GainPair, s: &Scenario) -> Result<Trajectory> {
    let mut ctrl = BaseController::new(sys.clone(), gains.clone());
    simulate_with(sys, s, |_, y| Ok(base_step_mut(&mut ctrl, y).0))
}

/// Simulate the time-varying finite-horizon LQG law.
pub fn simulate_fh(sys: &LtiSystem, fh: &FiniteHorizonLqg, s: &Scenario) -> Result<Trajectory> {
    if fh.ks.len() < s.horizon() {
        return Err(Error::Dimensions(
            "finite-horizon law shorter than scenario".into(),
        ));
    }
    let mut xhat = DVector::zeros(sys.n_x());
    simulate_with(sys, s, |t, y| {
        let u = -&fh.ks[t] * &xhat;
        let innovation = y - sys.c() * &xhat;
        xhat = sys.a() * &xhat + sys.b() * &u + &fh.ls[t] * innovation;
        Ok(u)
    })
}

/// Cost of a trajectory under a task:
/// `Σ_{t<T} (‖x_t‖²_Q + ‖u_t‖²_R) + ‖x_T‖²_{Q_f}`, plus, for the
/// input-constrained kind, `ρ·Σ_{t<T} Σ_i max(|u_{t,i}| − ū, 0)`.
pub fn evaluate_cost(traj: &Trajectory, task: &TaskSpec) -> Result<f64> {
    let t_len = traj.horizon();
    if t_len != task.horizon || traj.x.len() != t_len + 1 {
        return Err(Error::Dimensions(
            "trajectory length inconsistent with task horizon".into(),
        ));
    }
    let w = &task.weights;
    let mut cost = 0.0;
    for t in 0..t_len {
        cost += (w.q() * &traj.x[t]).dot(&traj.x[t]);
        cost += (w.r() * &traj.u[t]).dot(&traj.u[t]);
    }
    cost += (w.qf() * &traj.x[t_len]).dot(&traj.x[t_len]);
    if task.kind == TaskKind::InputConstrained {
        let mut penalty = 0.0;
        for u in &traj.u {
            for ui in u.iter() {
                penalty += (ui.abs() - task.u_bar).max(0.0);
            }
        }
        cost += task.rho * penalty;
    }
    Ok(cost)
}

/// Mean cost of `policy` (reset to zero internal state per scenario) over a
/// scenario batch, reduced in batch order.
pub fn batch_cost(
    sys: &LtiSystem,
    policy: &Policy,
    scenarios: &[Scenario],
    task: &TaskSpec,
) -> Result<f64> {
    let costs = batch_costs(sys, policy, scenarios, task)?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// Per-scenario costs, in batch order.
pub fn batch_costs(
    sys: &LtiSystem,
    policy: &Policy,
    scenarios: &[Scenario],
    task: &TaskSpec,
) -> Result<Vec<f64>> {
    if scenarios.is_empty() {
        return Err(Error::Precondition("empty scenario batch".into()));
    }
    scenarios
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let traj = simulate(sys, &policy.reset(), s).map_err(|e| match e {
                Error::NumericalAbort { step, what } => Error::NumericalAbort {
                    step,
                    what: format!("scenario {i}: {what}"),
                },
                other => other,
            })?;
            evaluate_cost(&traj, task)
        })
        .collect()
}

/// Wire format for scenario batches: one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
struct ScenarioWire {
    seed: u64,
    x0: Vec<f64>,
    dx: Vec<Vec<f64>>,
    dy: Vec<Vec<f64>>,
}

pub fn scenarios_to_jsonl(scenarios: &[Scenario]) -> String {
    let mut out = String::new();
    for s in scenarios {
        let wire = ScenarioWire {
            seed: s.seed,
            x0: s.x0.iter().cloned().collect(),
            dx: s.dx.iter().map(|d| d.iter().cloned().collect()).collect(),
            dy: s.dy.iter().map(|d| d.iter().cloned().collect()).collect(),
        };
        out.push_str(&serde_json::to_string(&wire).expect("scenario serializes"));
        out.push('\n');
    }
    out
}

pub fn scenarios_from_jsonl(text: &str) -> Result<Vec<Scenario>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let wire: ScenarioWire = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            if wire.dx.len() != wire.dy.len() {
                return Err(Error::Format(format!("line {}: dx/dy lengths", i + 1)));
            }
            Ok(Scenario {
                x0: DVector::from_vec(wire.x0),
                dx: wire.dx.into_iter().map(DVector::from_vec).collect(),
                dy: wire.dy.into_iter().map(DVector::from_vec).collect(),
                seed: wire.seed,
            })
        })
        .collect()
}

/// Sample `count` scenarios with consecutive seeds starting at `seed0`.
pub fn sample_batch(
    sys: &LtiSystem,
    task: &TaskSpec,
    seed0: u64,
    count: usize,
) -> Result<Vec<Scenario>> {
    (0..count)
        .map(|i| sample_scenario(sys, task, seed0.wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{build_cartpole, lqg_gains, CartpoleParams};
    use crate::ren::{direct_param, RenDims, RenTheta};
    use crate::youla::Arch;
    use approx::assert_relative_eq;

    fn cartpole_task() -> (LtiSystem, TaskSpec) {
        let sys = build_cartpole(&CartpoleParams::default()).unwrap();
        let task = TaskSpec::lqg(
            CostWeights::cartpole_default(),
            NoiseCov::cartpole_default(),
            50,
        );
        (sys, task)
    }

    fn zero_policy(sys: &LtiSystem, task: &TaskSpec) -> Policy {
        let gains = lqg_gains(sys, &task.weights, &task.noise).unwrap();
        let dims = RenDims::new(4, 6, sys.n_y(), sys.n_u()).unwrap();
        let weights = direct_param(&RenTheta::zero(dims, 0.95, 1.0));
        Policy::new(
            Arch::YoulaQ,
            BaseController::new(sys.clone(), gains),
            weights,
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_gives_zero_disturbances() {
        let sys = build_cartpole(&CartpoleParams::default()).unwrap();
        let noise = NoiseCov::new(DMatrix::zeros(4, 4), DMatrix::zeros(2, 2)).unwrap();
        let mut task = TaskSpec::lqg(CostWeights::cartpole_default(), noise, 20);
        task.x0_std = 0.1;
        let s = sample_scenario(&sys, &task, 5).unwrap();
        assert!(s.dx.iter().all(|d| d.norm() == 0.0));
        assert!(s.dy.iter().all(|d| d.norm() == 0.0));
        assert!(s.x0.norm() > 0.0);
    }

    #[test]
    fn identical_seeds_identical_scenarios() {
        let (sys, task) = cartpole_task();
        let a = sample_scenario(&sys, &task, 99).unwrap();
        let b = sample_scenario(&sys, &task, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_scenario(&sys, &task, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn process_noise_moments_match() {
        let (sys, mut task) = cartpole_task();
        task.horizon = 100_000;
        let s = sample_scenario(&sys, &task, 123).unwrap();
        let n = s.dx.len() as f64;
        let mut cov = DMatrix::zeros(4, 4);
        for d in &s.dx {
            cov += d * d.transpose();
        }
        cov /= n;
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.005 } else { 0.0 };
                assert!(
                    (cov[(i, j)] - want).abs() <= 0.05 * 0.005,
                    "cov[{i}][{j}] = {}",
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn input_constrained_disturbance_rides_actuator_channel() {
        let sys = build_cartpole(&CartpoleParams::default()).unwrap();
        let noise = NoiseCov::new(DMatrix::zeros(4, 4), DMatrix::zeros(2, 2)).unwrap();
        let mut task = TaskSpec::input_constrained(
            CostWeights::cartpole_default(),
            noise,
            100,
            400.0,
            2.0,
        )
        .unwrap();
        task.x0_std = 0.0;
        let s = sample_scenario(&sys, &task, 4).unwrap();
        // With zero process noise, dx must lie in the range of B.
        let b = sys.b();
        let bn = b.norm_squared();
        for d in &s.dx {
            let coeff = (b.transpose() * d)[(0, 0)] / bn;
            let residual = d - b * DVector::from_element(1, coeff);
            assert!(residual.norm() < 1e-12);
        }
        // Piecewise-constant component should produce long runs of similar values.
        assert!(s.dx.iter().any(|d| d.norm() > 0.0));
    }

    #[test]
    fn simulate_zero_everything_is_zero() {
        let (sys, mut task) = cartpole_task();
        task.horizon = 30;
        let policy = zero_policy(&sys, &task);
        let s = Scenario {
            x0: DVector::zeros(4),
            dx: vec![DVector::zeros(4); 30],
            dy: vec![DVector::zeros(2); 30],
            seed: 0,
        };
        let traj = simulate(&sys, &policy, &s).unwrap();
        assert!(traj.x.iter().all(|x| x.norm() == 0.0));
        assert!(traj.u.iter().all(|u| u.norm() == 0.0));
        assert_eq!(evaluate_cost(&traj, &task).unwrap(), 0.0);
    }

    #[test]
    fn open_loop_cartpole_diverges_closed_loop_contracts() {
        let (sys, task) = cartpole_task();
        let x0 = DVector::from_vec(vec![0.0, 0.0, 1e-3, 0.0]);
        assert!(crate::linalg::spectral_radius(sys.a()) > 1.0);

        // Open loop: iterate the plant with u = 0.
        let mut x = x0.clone();
        let zero_u = DVector::zeros(1);
        let zero_d = DVector::zeros(4);
        for _ in 0..50 {
            x = sys.step(&x, &zero_u, &zero_d);
        }
        assert!(x.norm() > x0.norm() * 10.0);

        // Closed loop with the base LQG controller from the same state.
        // The observer starts blind (x̂ = 0), so the transient peaks around
        // 7x the initial norm before the estimate catches up; the state is
        // back below its initial norm within 150 steps.
        let gains = lqg_gains(&sys, &task.weights, &task.noise).unwrap();
        let horizon = 150;
        let s = Scenario {
            x0: x0.clone(),
            dx: vec![zero_d.clone(); horizon],
            dy: vec![DVector::zeros(2); horizon],
            seed: 0,
        };
        let traj = simulate_base(&sys, &gains, &s).unwrap();
        assert!(traj.x[horizon].norm() < x0.norm());
        assert!(traj.max_state_norm() < 20.0 * x0.norm());
    }

    #[test]
    fn trajectory_recursion_is_exact() {
        let (sys, task) = cartpole_task();
        let policy = zero_policy(&sys, &task);
        let s = sample_scenario(&sys, &task, 17).unwrap();
        let traj = simulate(&sys, &policy, &s).unwrap();
        for t in 0..traj.horizon() {
            let rebuilt = sys.step(&traj.x[t], &traj.u[t], &s.dx[t]);
            assert_eq!((rebuilt - &traj.x[t + 1]).norm(), 0.0);
        }
    }

    #[test]
    fn cost_hand_example() {
        let task = TaskSpec::lqg(
            CostWeights::cartpole_default(),
            NoiseCov::cartpole_default(),
            1,
        );
        let traj = Trajectory {
            x: vec![
                DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]),
                DVector::zeros(4),
            ],
            u: vec![DVector::from_element(1, 1.0)],
            y: vec![DVector::zeros(2)],
            z: vec![DVector::zeros(5)],
        };
        assert_relative_eq!(evaluate_cost(&traj, &task).unwrap(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn penalty_hand_example_and_ordering() {
        let weights = CostWeights::cartpole_default();
        let noise = NoiseCov::cartpole_default();
        let lqg = TaskSpec::lqg(weights.clone(), noise.clone(), 1);
        let constrained =
            TaskSpec::input_constrained(weights, noise, 1, 400.0, 2.0).unwrap();
        let traj = Trajectory {
            x: vec![DVector::zeros(4), DVector::zeros(4)],
            u: vec![DVector::from_element(1, 3.0)],
            y: vec![DVector::zeros(2)],
            z: vec![DVector::zeros(5)],
        };
        let j_q = evaluate_cost(&traj, &lqg).unwrap();
        let j_c = evaluate_cost(&traj, &constrained).unwrap();
        assert_relative_eq!(j_c - j_q, 400.0, epsilon = 1e-9);

        // Within the bound the two costs coincide.
        let small = Trajectory {
            u: vec![DVector::from_element(1, 1.5)],
            ..traj
        };
        assert_eq!(
            evaluate_cost(&small, &lqg).unwrap(),
            evaluate_cost(&small, &constrained).unwrap()
        );
    }

    #[test]
    fn batch_cost_mean_properties() {
        let (sys, task) = cartpole_task();
        let policy = zero_policy(&sys, &task);
        let scenarios = sample_batch(&sys, &task, 40, 6).unwrap();
        let batch = batch_cost(&sys, &policy, &scenarios, &task).unwrap();
        let singles = batch_costs(&sys, &policy, &scenarios, &task).unwrap();
        let mean = singles.iter().sum::<f64>() / singles.len() as f64;
        assert_eq!(batch, mean);

        let copies = vec![scenarios[0].clone(); 4];
        let copied = batch_cost(&sys, &policy, &copies, &task).unwrap();
        assert_relative_eq!(copied, singles[0], epsilon = 1e-12);

        let mut reversed = scenarios.clone();
        reversed.reverse();
        let rev = batch_cost(&sys, &policy, &reversed, &task).unwrap();
        assert_relative_eq!(rev, batch, epsilon = 1e-12);

        assert!(batch_cost(&sys, &policy, &[], &task).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let (sys, mut task) = cartpole_task();
        task.horizon = 7;
        let scenarios = sample_batch(&sys, &task, 1, 3).unwrap();
        let text = scenarios_to_jsonl(&scenarios);
        assert_eq!(text.lines().count(), 3);
        let parsed = scenarios_from_jsonl(&text).unwrap();
        assert_eq!(scenarios, parsed);
        assert!(scenarios_from_jsonl("{bad json").is_err());
    }
}
