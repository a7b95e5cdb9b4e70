//! Recurrent equilibrium network (REN): a linear state-space core in
//! feedback with a layer of scalar slope-restricted nonlinearities,
//!
//! ```text
//! [χ⁺]   [A_χ  B₁  B₂ ] [χ]   [b_χ]
//! [v ] = [C₁   D₁₁ D₁₂] [w] + [b_v],    w = σ(v),  σ = ReLU
//! [ũ ]   [C₂   D₂₁ D₂₂] [ỹ]   [b_y]
//! ```
//!
//! with `D₁₁` strictly lower triangular so the neuron layer evaluates
//! explicitly by forward substitution.
//!
//! The explicit weights are never free: they are produced from an
//! unconstrained parameter set [`RenTheta`] by [`direct_param`], a smooth
//! map built from the normalization `N_c(M) = c·M / (1 + ‖M‖_F)`. The
//! budgets are chosen so that every parameter value, of any magnitude,
//! yields `‖A_χ‖₂ + 2‖B₁‖₂‖C₁‖₂ ≤ ᾱ < 1`. Since the neuron layer has
//! state-Lipschitz constant `L_w ≤ ‖C₁‖₂/(1−‖D₁₁‖₂) ≤ 2‖C₁‖₂`, the state
//! map contracts at rate ᾱ in the Euclidean metric, and the input-output
//! map has a finite certified incremental ℓ² gain ([`certified_gain`]).
//! Optimizers can therefore roam the whole parameter space with stability
//! guaranteed by construction.
//!
//! The memoryless special case `n_χ = 0` is a Lipschitz-bounded
//! equilibrium network (LBEN).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, mat_from_rows, mat_to_rows, spectral_norm, vec_finite};

/// Dimensions of a REN: state, neuron, input and output counts.
///
/// `n_chi = 0` gives the memoryless LBEN case; `n_v = 0` gives a purely
/// linear operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenDims {
    pub n_chi: usize,
    pub n_v: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl RenDims {
    pub fn new(n_chi: usize, n_v: usize, n_in: usize, n_out: usize) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::Dimensions("REN needs n_in >= 1 and n_out >= 1".into()));
        }
        Ok(Self {
            n_chi,
            n_v,
            n_in,
            n_out,
        })
    }

    /// Memoryless (LBEN) dimensions.
    pub fn lben(n_v: usize, n_in: usize, n_out: usize) -> Result<Self> {
        Self::new(0, n_v, n_in, n_out)
    }
}

/// Unconstrained free parameters generating a REN.
///
/// Every finite value of every field is admissible; [`direct_param`] maps
/// the whole space onto certified-contracting networks. `out_scale` is a
/// free scalar multiplying the input/output blocks through `tanh`, so the
/// initial operator can start arbitrarily close to zero while the
/// achievable gain stays bounded by `out_cap` for any parameter value.
/// `alpha_bar` and `out_cap` are configuration, not free parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RenTheta {
    pub dims: RenDims,
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub d11: DMatrix<f64>,
    pub d12: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub d21: DMatrix<f64>,
    pub d22: DMatrix<f64>,
    pub b_chi: DVector<f64>,
    pub b_v: DVector<f64>,
    pub b_y: DVector<f64>,
    /// Free output-scale parameter (initialized small so the initial
    /// operator is near zero).
    pub out_scale: f64,
    /// Contraction budget, in (0, 1).
    pub alpha_bar: f64,
    /// Ceiling of the smooth output-scale saturation.
    pub out_cap: f64,
}

impl RenTheta {
    pub fn zero(dims: RenDims, alpha_bar: f64, out_cap: f64) -> Self {
        Self {
            dims,
            a: DMatrix::zeros(dims.n_chi, dims.n_chi),
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
            out_scale: 0.0,
            alpha_bar,
            out_cap,
        }
    }

    /// Seeded Glorot-style initialization: block entries are normal with
    /// std `sqrt(2/(rows+cols))`, biases zero, `out_scale` as given.
    pub fn random<R: Rng>(
        dims: RenDims,
        alpha_bar: f64,
        out_cap: f64,
        out_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut block = |rows: usize, cols: usize| {
            let std = (2.0 / (rows + cols).max(1) as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| {
                let x: f64 = StandardNormal.sample(rng);
                x * std
            })
        };
        Self {
            a: block(dims.n_chi, dims.n_chi),
            b1: block(dims.n_chi, dims.n_v),
            b2: block(dims.n_chi, dims.n_in),
            c1: block(dims.n_v, dims.n_chi),
            d11: block(dims.n_v, dims.n_v),
            d12: block(dims.n_v, dims.n_in),
            c2: block(dims.n_out, dims.n_chi),
            d21: block(dims.n_out, dims.n_v),
            d22: block(dims.n_out, dims.n_in),
            ..Self::zero(dims, alpha_bar, out_cap)
        }
        .with_out_scale(out_scale)
    }

    fn with_out_scale(mut self, out_scale: f64) -> Self {
        self.out_scale = out_scale;
        self
    }

    /// Multiply every free parameter (blocks, biases, out_scale) by `factor`.
    pub fn scale_free_params(&mut self, factor: f64) {
        for m in [
            &mut self.a,
            &mut self.b1,
            &mut self.b2,
            &mut self.c1,
            &mut self.d11,
            &mut self.d12,
            &mut self.c2,
            &mut self.d21,
            &mut self.d22,
        ] {
            *m *= factor;
        }
        for v in [&mut self.b_chi, &mut self.b_v, &mut self.b_y] {
            *v *= factor;
        }
        self.out_scale *= factor;
    }
}

/// Explicit REN weights, always produced by [`direct_param`] (tests may
/// build them directly to exercise failure paths).
#[derive(Debug, Clone, PartialEq)]
pub struct RenWeights {
    pub dims: RenDims,
    pub a_chi: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub d11: DMatrix<f64>,
    pub d12: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub d21: DMatrix<f64>,
    pub d22: DMatrix<f64>,
    pub b_chi: DVector<f64>,
    pub b_v: DVector<f64>,
    pub b_y: DVector<f64>,
    pub alpha_bar: f64,
}

/// REN internal state.
#[derive(Debug, Clone, PartialEq)]
pub struct RenState {
    pub chi: DVector<f64>,
}

impl RenState {
    pub fn zero(dims: &RenDims) -> Self {
        Self {
            chi: DVector::zeros(dims.n_chi),
        }
    }
}

/// `c / (1 + ‖M‖_F)`: the scale factor of the smooth normalizer `N_c`.
pub fn norm_scale(c: f64, frob: f64) -> f64 {
    c / (1.0 + frob)
}

fn normalize(c: f64, m: &DMatrix<f64>) -> DMatrix<f64> {
    m * norm_scale(c, m.norm())
}

fn strict_lower(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if j < i { m[(i, j)] } else { 0.0 })
}

/// Bounded smooth output-scale gain: `tanh(s) ∈ (−1, 1)`, with unit slope
/// near zero so the scale parameter moves freely early in training.
pub fn io_gain(s: f64) -> f64 {
    s.tanh()
}

/// Smooth map from unconstrained parameters to certified REN weights.
///
/// State-loop budgets (Frobenius, hence spectral): `‖A_χ‖ ≤ ᾱ/2`,
/// `‖B₁‖, ‖C₁‖ ≤ √ᾱ/2`, `‖D₁₁‖ ≤ 1/2` (then masked to its strict lower
/// triangle), so `‖A_χ‖₂ + 2‖B₁‖₂‖C₁‖₂ ≤ ᾱ` holds for **all** parameter
/// values. The input/output blocks are `tanh(out_scale)·N_{out_cap}(·)`:
/// bounded by `out_cap` for every parameter value, near zero when
/// `out_scale` starts small, and able to grow along both the scale and the
/// block-norm directions. Biases pass through unchanged.
pub fn direct_param(theta: &RenTheta) -> RenWeights {
    let ab = theta.alpha_bar;
    let s_budget = ab.sqrt() / 2.0;
    let io = io_gain(theta.out_scale);
    let cap = theta.out_cap;
    RenWeights {
        dims: theta.dims,
        a_chi: normalize(ab / 2.0, &theta.a),
        b1: normalize(s_budget, &theta.b1),
        c1: normalize(s_budget, &theta.c1),
        d11: strict_lower(&normalize(0.5, &theta.d11)),
        b2: normalize(cap, &theta.b2) * io,
        d12: normalize(cap, &theta.d12) * io,
        c2: normalize(cap, &theta.c2) * io,
        d21: normalize(cap, &theta.d21) * io,
        d22: normalize(cap, &theta.d22) * io,
        b_chi: theta.b_chi.clone(),
        b_v: theta.b_v.clone(),
        b_y: theta.b_y.clone(),
        alpha_bar: ab,
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// One REN step. Returns the next state and the output.
pub fn ren_step(
    weights: &RenWeights,
    state: &RenState,
    input: &DVector<f64>,
) -> Result<(RenState, DVector<f64>)> {
    let (next, out, _, _) = ren_step_detailed(weights, state, input)?;
    Ok((next, out))
}

/// One REN step that also exposes the neuron pre-activations `v` and
/// activations `w` (needed by the reverse-mode sweep).
pub fn ren_step_detailed(
    weights: &RenWeights,
    state: &RenState,
    input: &DVector<f64>,
) -> Result<(RenState, DVector<f64>, DVector<f64>, DVector<f64>)> {
    if input.len() != weights.dims.n_in {
        return Err(Error::Dimensions(format!(
            "REN input length {} != n_in {}",
            input.len(),
            weights.dims.n_in
        )));
    }
    if !vec_finite(input) {
        return Err(Error::NonFinite("REN input".into()));
    }
    let chi = &state.chi;
    // Forward substitution through the strictly lower-triangular D11.
    let mut v = &weights.c1 * chi + &weights.d12 * input + &weights.b_v;
    let mut w = DVector::zeros(weights.dims.n_v);
    for i in 0..weights.dims.n_v {
        let mut vi = v[i];
        for j in 0..i {
            vi += weights.d11[(i, j)] * w[j];
        }
        v[i] = vi;
        w[i] = relu(vi);
    }
    let next = &weights.a_chi * chi + &weights.b1 * &w + &weights.b2 * input + &weights.b_chi;
    let out = &weights.c2 * chi + &weights.d21 * &w + &weights.d22 * input + &weights.b_y;
    Ok((RenState { chi: next }, out, v, w))
}

/// Lipschitz constants of the neuron layer `χ, ỹ ↦ w`:
/// `L_w = ‖C₁‖₂/(1−‖D₁₁‖₂)` w.r.t. the state and
/// `L_wu = ‖D₁₂‖₂/(1−‖D₁₁‖₂)` w.r.t. the input.
fn layer_lipschitz(weights: &RenWeights) -> Result<(f64, f64)> {
    let nd11 = spectral_norm(&weights.d11);
    if nd11 >= 1.0 {
        return Err(Error::CertificateVoid { alpha: f64::INFINITY });
    }
    let l_w = spectral_norm(&weights.c1) / (1.0 - nd11);
    let l_wu = spectral_norm(&weights.d12) / (1.0 - nd11);
    Ok((l_w, l_wu))
}

/// Certified contraction factor `ᾱ̂ = ‖A_χ‖₂ + ‖B₁‖₂·L_w`.
pub fn contraction_factor(weights: &RenWeights) -> Result<f64> {
    let (l_w, _) = layer_lipschitz(weights)?;
    Ok(spectral_norm(&weights.a_chi) + spectral_norm(&weights.b1) * l_w)
}

/// Slack of the spectral budget: `alpha_bar − (‖A_χ‖₂ + 2‖B₁‖₂‖C₁‖₂)`.
/// Nonnegative for every [`direct_param`] output.
pub fn budget_margin(weights: &RenWeights) -> f64 {
    weights.alpha_bar
        - (spectral_norm(&weights.a_chi)
            + 2.0 * spectral_norm(&weights.b1) * spectral_norm(&weights.c1))
}

/// Upper bound on the incremental ℓ² gain of the REN:
/// `γ = L_yu + L_yx·L_u/(1−ᾱ̂)` where `L_u = ‖B₂‖+‖B₁‖L_wu`,
/// `L_yx = ‖C₂‖+‖D₂₁‖L_w`, `L_yu = ‖D₂₂‖+‖D₂₁‖L_wu` (all spectral norms).
/// The bound follows from Young's inequality applied to the geometric
/// decay kernel of the contracting state.
pub fn certified_gain(weights: &RenWeights) -> Result<f64> {
    let (l_w, l_wu) = layer_lipschitz(weights)?;
    let alpha = spectral_norm(&weights.a_chi) + spectral_norm(&weights.b1) * l_w;
    if alpha >= 1.0 {
        return Err(Error::CertificateVoid { alpha });
    }
    let l_u = spectral_norm(&weights.b2) + spectral_norm(&weights.b1) * l_wu;
    let l_yx = spectral_norm(&weights.c2) + spectral_norm(&weights.d21) * l_w;
    let l_yu = spectral_norm(&weights.d22) + spectral_norm(&weights.d21) * l_wu;
    Ok(l_yu + l_yx * l_u / (1.0 - alpha))
}

/// Empirical verification report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenVerifyReport {
    /// Max over trials of `|Δχ_T| / |Δχ_0|` for state pairs driven by
    /// identical bounded inputs.
    pub max_decay_ratio: f64,
    /// Max over trials of `‖Δũ‖₂ / ‖Δỹ‖₂` for input pairs from zero state.
    pub empirical_gain: f64,
}

/// Empirical contraction / gain check over seeded trials.
pub fn verify_ren(
    weights: &RenWeights,
    trials: usize,
    horizon: usize,
    seed: u64,
) -> Result<RenVerifyReport> {
    let dims = &weights.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_decay: f64 = 0.0;
    let mut max_gain: f64 = 0.0;

    for _ in 0..trials.max(1) {
        // Decay of a state difference under a shared bounded input.
        let chi_a = DVector::from_fn(dims.n_chi, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x
        });
        let chi_b = DVector::from_fn(dims.n_chi, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x
        });
        let d0 = (&chi_a - &chi_b).norm();
        let mut sa = RenState { chi: chi_a };
        let mut sb = RenState { chi: chi_b };
        for _ in 0..horizon {
            let input = DVector::from_fn(dims.n_in, |_, _| rng.random_range(-1.0..1.0));
            sa = ren_step(weights, &sa, &input)?.0;
            sb = ren_step(weights, &sb, &input)?.0;
        }
        let ratio = if d0 == 0.0 {
            0.0
        } else {
            (&sa.chi - &sb.chi).norm() / d0
        };
        max_decay = max_decay.max(ratio);

        // Incremental gain over an input pair from zero initial state.
        let mut ua = RenState::zero(dims);
        let mut ub = RenState::zero(dims);
        let mut num = 0.0;
        let mut den = 0.0;
        for _ in 0..horizon {
            let ya = DVector::from_fn(dims.n_in, |_, _| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x
            });
            let yb = DVector::from_fn(dims.n_in, |_, _| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x
            });
            let (na, oa) = ren_step(weights, &ua, &ya)?;
            let (nb, ob) = ren_step(weights, &ub, &yb)?;
            ua = na;
            ub = nb;
            num += (oa - ob).norm_squared();
            den += (ya - yb).norm_squared();
        }
        if den > 0.0 {
            max_gain = max_gain.max((num / den).sqrt());
        }
    }

    Ok(RenVerifyReport {
        max_decay_ratio: max_decay,
        empirical_gain: max_gain,
    })
}

/// Serialized model: only the free parameters are stored, so every loaded
/// model is certified by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenSnapshot {
    pub dims: RenDims,
    pub theta: ThetaBlocks,
    pub alpha_bar: f64,
    pub out_scale: f64,
    pub out_cap: f64,
    pub sigma: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaBlocks {
    pub a: Vec<Vec<f64>>,
    pub b1: Vec<Vec<f64>>,
    pub b2: Vec<Vec<f64>>,
    pub c1: Vec<Vec<f64>>,
    pub d11: Vec<Vec<f64>>,
    pub d12: Vec<Vec<f64>>,
    pub c2: Vec<Vec<f64>>,
    pub d21: Vec<Vec<f64>>,
    pub d22: Vec<Vec<f64>>,
    pub b_chi: Vec<f64>,
    pub b_v: Vec<f64>,
    pub b_y: Vec<f64>,
}

impl RenSnapshot {
    pub fn pack(theta: &RenTheta) -> Self {
        Self {
            dims: theta.dims,
            theta: ThetaBlocks {
                a: mat_to_rows(&theta.a),
                b1: mat_to_rows(&theta.b1),
                b2: mat_to_rows(&theta.b2),
                c1: mat_to_rows(&theta.c1),
                d11: mat_to_rows(&theta.d11),
                d12: mat_to_rows(&theta.d12),
                c2: mat_to_rows(&theta.c2),
                d21: mat_to_rows(&theta.d21),
                d22: mat_to_rows(&theta.d22),
                b_chi: theta.b_chi.iter().cloned().collect(),
                b_v: theta.b_v.iter().cloned().collect(),
                b_y: theta.b_y.iter().cloned().collect(),
            },
            alpha_bar: theta.alpha_bar,
            out_scale: theta.out_scale,
            out_cap: theta.out_cap,
            sigma: "relu".into(),
        }
    }

    pub fn unpack(&self) -> Result<RenTheta> {
        if self.sigma != "relu" {
            return Err(Error::Format(format!(
                "unsupported activation {:?}",
                self.sigma
            )));
        }
        let dims = RenDims::new(self.dims.n_chi, self.dims.n_v, self.dims.n_in, self.dims.n_out)?;
        let m = |rows: &[Vec<f64>], nr: usize, nc: usize, name: &str| -> Result<DMatrix<f64>> {
            let mat = mat_from_rows(rows)?;
            if mat.nrows() != nr || mat.ncols() != nc {
                return Err(Error::Format(format!(
                    "block {name}: expected {nr}x{nc}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            Ok(mat)
        };
        let t = &self.theta;
        let theta = RenTheta {
            dims,
            a: m(&t.a, dims.n_chi, dims.n_chi, "a")?,
            b1: m(&t.b1, dims.n_chi, dims.n_v, "b1")?,
            b2: m(&t.b2, dims.n_chi, dims.n_in, "b2")?,
            c1: m(&t.c1, dims.n_v, dims.n_chi, "c1")?,
            d11: m(&t.d11, dims.n_v, dims.n_v, "d11")?,
            d12: m(&t.d12, dims.n_v, dims.n_in, "d12")?,
            c2: m(&t.c2, dims.n_out, dims.n_chi, "c2")?,
            d21: m(&t.d21, dims.n_out, dims.n_v, "d21")?,
            d22: m(&t.d22, dims.n_out, dims.n_in, "d22")?,
            b_chi: DVector::from_vec(t.b_chi.clone()),
            b_v: DVector::from_vec(t.b_v.clone()),
            b_y: DVector::from_vec(t.b_y.clone()),
            out_scale: self.out_scale,
            alpha_bar: self.alpha_bar,
            out_cap: self.out_cap,
        };
        if theta.b_chi.len() != dims.n_chi
            || theta.b_v.len() != dims.n_v
            || theta.b_y.len() != dims.n_out
        {
            return Err(Error::Format("bias length mismatch".into()));
        }
        let finite = [
            &theta.a, &theta.b1, &theta.b2, &theta.c1, &theta.d11, &theta.d12, &theta.c2,
            &theta.d21, &theta.d22,
        ]
        .iter()
        .all(|m| all_finite(m))
            && theta.out_scale.is_finite()
            && theta.alpha_bar > 0.0
            && theta.alpha_bar < 1.0
            && theta.out_cap > 0.0;
        if !finite {
            return Err(Error::Format("non-finite or out-of-range snapshot".into()));
        }
        Ok(theta)
    }
}
