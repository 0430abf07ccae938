//! Brute-force reference: the full linear system plus a finite discrete bath,
//! propagated exactly as a Gaussian state in 2(N+1)-dimensional phase space.
//!
//! Coordinates are ordered z = (q, q₁…q_N, p, p₁…p_N). The flow is
//! ż = L z with L = J·H_sym, H_sym = blockdiag(K, M⁻¹).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;

use crate::bath::{BathMode, BathSpec};
use crate::coefficients::CoefficientSet;
use crate::dynamics::{GaussianMomentState, MomentSeries};
use crate::elementary::SystemParams;
use crate::error::{QbmError, Result};

const SYMPLECTIC_TOL: f64 = 1e-10;

pub struct FullPhaseSpaceModel {
    pub n_modes: usize,
    pub mass: f64,
    /// Bare Ω² of the system oscillator.
    pub omega2: f64,
    pub bath: BathSpec,
    h_sym: DMatrix<f64>,
    generator: DMatrix<f64>,
    cache: Mutex<HashMap<u64, Arc<DMatrix<f64>>>>,
}

impl FullPhaseSpaceModel {
    pub fn new(sys: &SystemParams, bath: &BathSpec) -> Result<Self> {
        sys.validate()?;
        bath.validate()?;
        let modes: Vec<BathMode> = bath
            .modes()
            .ok_or_else(|| QbmError::Config("the closed-system reference needs a discrete bath".into()))?
            .to_vec();
        let n = modes.len();
        let gamma0: f64 = modes.iter().map(|m| m.spectral_weight() / m.frequency).sum();
        let omega2 = sys.bare_omega2(gamma0);
        let d = n + 1;
        let mut k = DMatrix::zeros(d, d);
        let mut minv = DVector::zeros(d);
        k[(0, 0)] = sys.mass * omega2;
        minv[0] = 1.0 / sys.mass;
        for (i, m) in modes.iter().enumerate() {
            k[(i + 1, i + 1)] = m.mass * m.frequency * m.frequency;
            k[(0, i + 1)] = m.coupling;
            k[(i + 1, 0)] = m.coupling;
            minv[i + 1] = 1.0 / m.mass;
        }
        let mut h_sym = DMatrix::zeros(2 * d, 2 * d);
        h_sym.view_mut((0, 0), (d, d)).copy_from(&k);
        for i in 0..d {
            h_sym[(d + i, d + i)] = minv[i];
        }
        let generator = symplectic_form(d) * &h_sym;
        Ok(FullPhaseSpaceModel {
            n_modes: n,
            mass: sys.mass,
            omega2,
            bath: bath.clone(),
            h_sym,
            generator,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn dim(&self) -> usize {
        2 * (self.n_modes + 1)
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    pub fn h_sym(&self) -> &DMatrix<f64> {
        &self.h_sym
    }

    /// Recovers H_sym = −J·L and reports its largest asymmetry.
    pub fn hamiltonian_asymmetry(&self) -> f64 {
        let h = -(symplectic_form(self.n_modes + 1) * &self.generator);
        (&h - h.transpose()).amax()
    }

    fn q_index(&self) -> usize {
        0
    }

    fn p_index(&self) -> usize {
        self.n_modes + 1
    }

    /// U(t) = exp(L t), checked for symplecticity and cached per t.
    pub fn transition(&self, t: f64) -> Result<Arc<DMatrix<f64>>> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(QbmError::Usage(format!("propagation time must be finite and >= 0, got {t}")));
        }
        if let Some(u) = self.cache.lock().unwrap().get(&t.to_bits()) {
            return Ok(u.clone());
        }
        let u = (&self.generator * t).exp();
        let defect = symplectic_defect(&u);
        if !(defect <= SYMPLECTIC_TOL) {
            return Err(QbmError::Numerical(format!(
                "transition matrix at t = {t} violates symplecticity by {defect:.3e}"
            )));
        }
        let u = Arc::new(u);
        self.cache.lock().unwrap().insert(t.to_bits(), u.clone());
        Ok(u)
    }

    /// Shortest recurrence time 2π/Δω over the gaps between sorted mode
    /// frequencies; infinite for fewer than two modes.
    pub fn recurrence_time(&self) -> f64 {
        let mut w: Vec<f64> = self.bath.modes().unwrap_or(&[]).iter().map(|m| m.frequency).collect();
        w.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gap = w.windows(2).map(|p| p[1] - p[0]).fold(0.0f64, f64::max);
        if gap > 0.0 {
            2.0 * PI / gap
        } else {
            f64::INFINITY
        }
    }
}

fn symplectic_form(d: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        j[(i, d + i)] = 1.0;
        j[(d + i, i)] = -1.0;
    }
    j
}

/// max |U J Uᵀ − J|.
pub fn symplectic_defect(u: &DMatrix<f64>) -> f64 {
    let j = symplectic_form(u.nrows() / 2);
    (u * &j * u.transpose() - j).amax()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullGaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FullGaussianState {
    /// Product of the given system Gaussian with the thermal bath state.
    pub fn factorized(model: &FullPhaseSpaceModel, system: &GaussianMomentState) -> Self {
        let d = model.n_modes + 1;
        let mut mean = DVector::zeros(2 * d);
        let mut cov = DMatrix::zeros(2 * d, 2 * d);
        mean[0] = system.mean_q;
        mean[d] = system.mean_p;
        cov[(0, 0)] = system.sigma_qq;
        cov[(d, d)] = system.sigma_pp;
        cov[(0, d)] = system.sigma_qp;
        cov[(d, 0)] = system.sigma_qp;
        let hbar = model.bath.hbar;
        for (i, m) in model.bath.modes().unwrap_or(&[]).iter().enumerate() {
            let c = model.bath.thermal_factor(m.frequency);
            cov[(i + 1, i + 1)] = hbar / (2.0 * m.mass * m.frequency) * c;
            cov[(d + i + 1, d + i + 1)] = hbar * m.mass * m.frequency / 2.0 * c;
        }
        FullGaussianState { mean, cov }
    }

    /// ½tr(H_sym Σ) + ½μᵀH_sym μ.
    pub fn energy(&self, model: &FullPhaseSpaceModel) -> f64 {
        let h = model.h_sym();
        0.5 * (h * &self.cov).trace() + 0.5 * self.mean.dot(&(h * &self.mean))
    }

    /// det Σ; constant under symplectic flow.
    pub fn purity_invariant(&self) -> f64 {
        self.cov.clone().determinant()
    }
}

pub fn propagate_full(model: &FullPhaseSpaceModel, state0: &FullGaussianState, t: f64) -> Result<FullGaussianState> {
    if state0.mean.len() != model.dim() || state0.cov.nrows() != model.dim() {
        return Err(QbmError::Usage("state dimension does not match the model".into()));
    }
    let u = model.transition(t)?;
    Ok(FullGaussianState {
        mean: &*u * &state0.mean,
        cov: &*u * &state0.cov * u.transpose(),
    })
}

pub fn reduced_moments(model: &FullPhaseSpaceModel, state: &FullGaussianState) -> GaussianMomentState {
    let (iq, ip) = (model.q_index(), model.p_index());
    GaussianMomentState {
        mean_q: state.mean[iq],
        mean_p: state.mean[ip],
        sigma_qq: state.cov[(iq, iq)],
        sigma_pp: state.cov[(ip, ip)],
        sigma_qp: 0.5 * (state.cov[(iq, ip)] + state.cov[(ip, iq)]),
    }
}

/// Exact reduced moments on {0, dt_out, …} up to t_max.
pub fn oracle_series(
    model: &FullPhaseSpaceModel,
    system: &GaussianMomentState,
    dt_out: f64,
    t_max: f64,
) -> Result<MomentSeries> {
    if !(dt_out > 0.0) {
        return Err(QbmError::Usage("dt_out must be > 0".into()));
    }
    let n = (t_max / dt_out + 1e-9).floor() as usize;
    let s0 = FullGaussianState::factorized(model, system);
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt_out).collect();
    let states = times
        .par_iter()
        .map(|&t| propagate_full(model, &s0, t).map(|s| reduced_moments(model, &s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentSeries { times, states })
}

/// Reduced quantities needed for extraction at one time.
struct Snapshot {
    qp1: Vector2<f64>,
    qp2: Vector2<f64>,
    sqq: f64,
    spp: f64,
    sqp: f64,
}

fn snapshot(model: &FullPhaseSpaceModel, s0: &FullGaussianState, t: f64) -> Result<Snapshot> {
    let u = model.transition(t)?;
    let (iq, ip) = (model.q_index(), model.p_index());
    let s = propagate_full(model, s0, t)?;
    Ok(Snapshot {
        qp1: Vector2::new(u[(iq, iq)], u[(ip, iq)]),
        qp2: Vector2::new(u[(iq, ip)], u[(ip, ip)]),
        sqq: s.cov[(iq, iq)],
        spp: s.cov[(ip, ip)],
        sqp: s.cov[(iq, ip)],
    })
}

/// Recovers A, B, C, D from exact trajectories by matching the moment
/// equations, with second-order finite differences in time.
///
/// The means started from system states (1, 0) and (0, 1) give a 2×2 system
/// for (MΩ² + A, B); the second moments then fix C and D.
pub fn extract_coefficients(model: &FullPhaseSpaceModel, t: f64, fd_step: f64) -> Result<CoefficientSet> {
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(QbmError::Usage(format!("fd_step must be > 0, got {fd_step}")));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(QbmError::Usage(format!("t must be finite and >= 0, got {t}")));
    }
    let hbar = model.bath.hbar;
    let m = model.mass;
    let w = model.omega2.max(0.0).sqrt().max(1e-3);
    let system = GaussianMomentState::coherent(0.0, 0.0, m, w, hbar);
    let s0 = FullGaussianState::factorized(model, &system);

    let h = fd_step;
    let (offsets, weights): (Vec<f64>, Vec<f64>) = if t >= h {
        (vec![-h, h], vec![-0.5 / h, 0.5 / h])
    } else {
        (vec![0.0, h, 2.0 * h], vec![-1.5 / h, 2.0 / h, -0.5 / h])
    };
    let now = snapshot(model, &s0, t)?;
    let around = offsets
        .iter()
        .map(|dt| snapshot(model, &s0, t + dt))
        .collect::<Result<Vec<_>>>()?;
    let deriv = |f: &dyn Fn(&Snapshot) -> f64| -> f64 {
        around.iter().zip(&weights).map(|(s, w)| w * f(s)).sum()
    };

    let dp1 = deriv(&|s| s.qp1[1]);
    let dp2 = deriv(&|s| s.qp2[1]);
    let mat = Matrix2::new(now.qp1[0], now.qp1[1], now.qp2[0], now.qp2[1]);
    let det = mat.determinant();
    let scale = (now.qp1[0] * now.qp2[1]).abs() + (now.qp1[1] * now.qp2[0]).abs();
    if !(det.abs() > 1e-10 * scale) {
        return Err(QbmError::Extraction {
            t,
            detail: format!(
                "mean trajectories are nearly dependent (det {det:.3e}); use different initial conditions"
            ),
        });
    }
    let sol = mat
        .lu()
        .solve(&Vector2::new(-dp1, -dp2))
        .ok_or_else(|| QbmError::Extraction { t, detail: "singular 2x2 system".into() })?;
    let (k_eff, b) = (sol[0], sol[1]);

    let dsqp = deriv(&|s| s.sqp);
    let dspp = deriv(&|s| s.spp);
    let c = dsqp - now.spp / m + k_eff * now.sqq + b * now.sqp;
    let d = 0.5 * (dspp + 2.0 * k_eff * now.sqp + 2.0 * b * now.spp);
    Ok(CoefficientSet {
        t,
        a: k_eff - m * model.omega2,
        b,
        c,
        d,
    })
}
