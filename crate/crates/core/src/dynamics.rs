//! Gaussian reduced states under the time-dependent Wigner equation.
//!
//! A quadratic drift with phase-space-independent diffusion maps Gaussians to
//! Gaussians, so a state is carried as its means and central second moments.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::coefficients::{CoefficientSet, CoefficientTrajectory};
use crate::elementary::SystemParams;
use crate::error::{QbmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianMomentState {
    pub mean_q: f64,
    pub mean_p: f64,
    pub sigma_qq: f64,
    pub sigma_pp: f64,
    /// Symmetrized covariance ⟨qp + pq⟩/2 − ⟨q⟩⟨p⟩.
    pub sigma_qp: f64,
}

impl GaussianMomentState {
    pub fn new(mean_q: f64, mean_p: f64, sigma_qq: f64, sigma_pp: f64, sigma_qp: f64) -> Self {
        GaussianMomentState {
            mean_q,
            mean_p,
            sigma_qq,
            sigma_pp,
            sigma_qp,
        }
    }

    /// Coherent state of an oscillator with mass M and frequency ω.
    pub fn coherent(mean_q: f64, mean_p: f64, mass: f64, omega: f64, hbar: f64) -> Self {
        Self::new(mean_q, mean_p, hbar / (2.0 * mass * omega), hbar * mass * omega / 2.0, 0.0)
    }

    pub fn uncertainty_product(&self) -> f64 {
        self.sigma_qq * self.sigma_pp - self.sigma_qp * self.sigma_qp
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.to_array();
        if all.iter().any(|x| !x.is_finite()) {
            return Err(QbmError::Config("moments must be finite".into()));
        }
        if self.sigma_qq < 0.0 || self.sigma_pp < 0.0 || self.uncertainty_product() < 0.0 {
            return Err(QbmError::Config(
                "covariance must be positive semidefinite".into(),
            ));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.mean_q, self.mean_p, self.sigma_qq, self.sigma_pp, self.sigma_qp]
    }

    pub fn from_array(x: [f64; 5]) -> Self {
        Self::new(x[0], x[1], x[2], x[3], x[4])
    }
}

/// Spring constant MΩ² + A. An infinite A means the shift was absorbed into
/// the renormalized frequency, which then sets the spring directly.
pub fn stiffness(coef: &CoefficientSet, sys: &SystemParams, gamma0: f64) -> f64 {
    if coef.has_renormalized_shift() {
        sys.mass * sys.renormalized_omega2(gamma0)
    } else {
        sys.mass * sys.bare_omega2(gamma0) + coef.a
    }
}

/// Time derivative of the moments; `gamma0` = γ(0) relates bare and
/// renormalized frequencies.
pub fn moment_rhs(
    state: &GaussianMomentState,
    coef: &CoefficientSet,
    sys: &SystemParams,
    gamma0: f64,
) -> GaussianMomentState {
    let m = sys.mass;
    let k = stiffness(coef, sys, gamma0);
    let b = coef.b;
    GaussianMomentState {
        mean_q: state.mean_p / m,
        mean_p: -k * state.mean_q - b * state.mean_p,
        sigma_qq: 2.0 * state.sigma_qp / m,
        sigma_pp: -2.0 * k * state.sigma_qp - 2.0 * b * state.sigma_pp + 2.0 * coef.d,
        sigma_qp: state.sigma_pp / m - k * state.sigma_qq - b * state.sigma_qp + coef.c,
    }
}

/// Moment time series on a uniform output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSeries {
    pub times: Vec<f64>,
    pub states: Vec<GaussianMomentState>,
}

impl MomentSeries {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t",
            "mean_q",
            "mean_p",
            "sigma_qq",
            "sigma_pp",
            "sigma_qp",
            "uncertainty_product",
        ])?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut rec = vec![format!("{t:?}")];
            rec.extend(s.to_array().iter().map(|x| format!("{x:?}")));
            rec.push(format!("{:?}", s.uncertainty_product()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn interpolate(a: &CoefficientSet, b: &CoefficientSet, x: f64) -> CoefficientSet {
    let lerp = |u: f64, v: f64| {
        if u == v {
            u
        } else {
            u + (v - u) * x
        }
    };
    CoefficientSet {
        t: lerp(a.t, b.t),
        a: lerp(a.a, b.a),
        b: lerp(a.b, b.b),
        c: lerp(a.c, b.c),
        d: lerp(a.d, b.d),
    }
}

/// Integrates the moments with classical RK4, `substeps` steps per
/// trajectory interval, coefficients linear in t between rows. `dt_out` must
/// be a multiple of the RK4 step.
pub fn evolve_with_substeps(
    initial: &GaussianMomentState,
    traj: &CoefficientTrajectory,
    sys: &SystemParams,
    gamma0: f64,
    dt_out: f64,
    substeps: usize,
) -> Result<MomentSeries> {
    sys.validate()?;
    initial.validate()?;
    if substeps == 0 {
        return Err(QbmError::Usage("substeps must be >= 1".into()));
    }
    let rows = &traj.rows;
    if rows.is_empty() {
        return Err(QbmError::Usage("empty coefficient trajectory".into()));
    }
    if let Some(bad) = traj.flagged().next() {
        return Err(QbmError::CoefficientSingularity {
            t: bad.t,
            value: f64::NAN,
        });
    }
    let coefs: Vec<CoefficientSet> = rows.iter().map(|r| r.coefficients.unwrap()).collect();
    if rows.len() == 1 {
        return Ok(MomentSeries {
            times: vec![0.0],
            states: vec![*initial],
        });
    }
    let step = traj.step;
    let h = step / substeps as f64;
    let ratio = dt_out / h;
    if !(dt_out > 0.0) || (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
        return Err(QbmError::Usage(format!(
            "dt_out = {dt_out} must be a positive multiple of the integration step {h}"
        )));
    }
    let every = ratio.round() as usize;
    let total = (rows.len() - 1) * substeps;

    let coef_at = |k: usize, frac: f64| -> CoefficientSet {
        // k-th RK step plus a fraction of a step
        let pos = (k as f64 + frac) / substeps as f64;
        let i = (pos.floor() as usize).min(coefs.len() - 2);
        interpolate(&coefs[i], &coefs[i + 1], pos - i as f64)
    };
    let add = |x: [f64; 5], y: [f64; 5], s: f64| -> [f64; 5] {
        let mut z = x;
        for i in 0..5 {
            z[i] += s * y[i];
        }
        z
    };
    let f = |x: [f64; 5], c: &CoefficientSet| {
        moment_rhs(&GaussianMomentState::from_array(x), c, sys, gamma0).to_array()
    };

    let mut times = vec![0.0];
    let mut states = vec![*initial];
    let mut x = initial.to_array();
    for k in 0..total {
        let c0 = coef_at(k, 0.0);
        let ch = coef_at(k, 0.5);
        let c1 = coef_at(k, 1.0);
        let k1 = f(x, &c0);
        let k2 = f(add(x, k1, 0.5 * h), &ch);
        let k3 = f(add(x, k2, 0.5 * h), &ch);
        let k4 = f(add(x, k3, h), &c1);
        for i in 0..5 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if (k + 1) % every == 0 {
            times.push((k + 1) as f64 * h);
            states.push(GaussianMomentState::from_array(x));
        }
    }
    Ok(MomentSeries { times, states })
}

/// [`evolve_with_substeps`] with one RK4 step per trajectory interval.
pub fn evolve(
    initial: &GaussianMomentState,
    traj: &CoefficientTrajectory,
    sys: &SystemParams,
    gamma0: f64,
    dt_out: f64,
) -> Result<MomentSeries> {
    evolve_with_substeps(initial, traj, sys, gamma0, dt_out, 1)
}

/// Normalized Gaussian Wigner function of a moment state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WignerGaussian {
    pub state: GaussianMomentState,
    det: f64,
}

impl WignerGaussian {
    pub fn new(state: GaussianMomentState) -> Result<Self> {
        let det = state.uncertainty_product();
        if !(det > 0.0 && state.sigma_qq > 0.0) || !det.is_finite() {
            return Err(QbmError::SingularCovariance(det));
        }
        Ok(WignerGaussian { state, det })
    }

    pub fn eval(&self, q: f64, p: f64) -> f64 {
        let s = &self.state;
        let (dq, dp) = (q - s.mean_q, p - s.mean_p);
        let quad = (s.sigma_pp * dq * dq - 2.0 * s.sigma_qp * dq * dp + s.sigma_qq * dp * dp) / self.det;
        (-0.5 * quad).exp() / (2.0 * PI * self.det.sqrt())
    }

    /// Writes W on an nq × np grid spanning ±`width` standard deviations.
    pub fn write_grid_csv<W: Write>(&self, out: W, width: f64, nq: usize, np: usize) -> Result<()> {
        if nq < 2 || np < 2 {
            return Err(QbmError::Usage("Wigner grid needs at least 2 points per axis".into()));
        }
        let s = &self.state;
        let (hq, hp) = (width * s.sigma_qq.sqrt(), width * s.sigma_pp.sqrt());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["q", "p", "W"])?;
        for i in 0..nq {
            let q = s.mean_q - hq + 2.0 * hq * i as f64 / (nq - 1) as f64;
            for j in 0..np {
                let p = s.mean_p - hp + 2.0 * hp * j as f64 / (np - 1) as f64;
                w.write_record([format!("{q:?}"), format!("{p:?}"), format!("{:?}", self.eval(q, p))])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn wigner_eval(state: &WignerGaussian, q: f64, p: f64) -> f64 {
    state.eval(q, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Provenance, TrajectoryRow};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn constant_traj(c: CoefficientSet, step: f64, rows: usize) -> CoefficientTrajectory {
        CoefficientTrajectory {
            step,
            rows: (0..rows)
                .map(|k| {
                    let t = k as f64 * step;
                    TrajectoryRow { t, coefficients: Some(CoefficientSet { t, ..c }), flag: None }
                })
                .collect(),
            provenance: Provenance::Exact,
            mass: 1.0,
            hbar: 1.0,
        }
    }

    #[test]
    fn zero_state_zero_rate() {
        let r = moment_rhs(&GaussianMomentState::default(), &CoefficientSet::zero(0.0), &SystemParams::new(1.0, 1.0), 0.0);
        assert_eq!(r.to_array(), [0.0; 5]);
    }

    #[test]
    fn free_oscillator_rotation_and_period() {
        let sys = SystemParams::new(1.0, 1.0);
        let n = 4000;
        let step = 2.0 * PI / n as f64;
        let tr = constant_traj(CoefficientSet::zero(0.0), step, n + 1);
        let init = GaussianMomentState::new(1.0, 0.5, 0.7, 0.4, 0.1);
        let out = evolve(&init, &tr, &sys, 0.0, step * 100.0).unwrap();
        for (t, s) in out.times.iter().zip(&out.states) {
            assert!((s.mean_q - (t.cos() + 0.5 * t.sin())).abs() < 1e-9);
            assert!((s.mean_p - (0.5 * t.cos() - t.sin())).abs() < 1e-9);
        }
        let last = out.states.last().unwrap();
        for (a, b) in last.to_array().iter().zip(init.to_array()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn ohmic_fixed_point_is_stationary() {
        let sys = SystemParams::renormalized(1.0, 1.0);
        let (g0, kt) = (0.5, 10.0);
        let c = CoefficientSet { t: 0.0, a: f64::NEG_INFINITY, b: 2.0 * g0, c: 0.0, d: 2.0 * g0 * kt };
        // thermal state: σpp = MkT, σqq = kT/(MΩ_ren²), σqp = 0
        let s = GaussianMomentState::new(0.0, 0.0, kt, kt, 0.0);
        let r = moment_rhs(&s, &c, &sys, 123.0);
        assert_eq!(r.sigma_pp, 0.0);
        assert_eq!(r.sigma_qp, 0.0);
    }

    #[test]
    fn ohmic_relaxes_to_thermal_momentum_spread() {
        let sys = SystemParams::renormalized(1.0, 1.0);
        let (g0, kt) = (0.5, 3.0);
        let c = CoefficientSet { t: 0.0, a: f64::NEG_INFINITY, b: 2.0 * g0, c: 0.0, d: 2.0 * g0 * kt };
        let tr = constant_traj(c, 0.01, 6001);
        let init = GaussianMomentState::coherent(2.0, -1.0, 1.0, 1.0, 1.0);
        let out = evolve(&init, &tr, &sys, 0.0, 1.0).unwrap();
        let last = out.states.last().unwrap();
        assert_relative_eq!(last.sigma_pp, kt, max_relative = 1e-8);
        assert!(last.mean_q.abs() < 1e-10);
    }

    #[test]
    fn stationary_momentum_is_linear_in_temperature() {
        let sys = SystemParams::renormalized(2.0, 1.0);
        let g0 = 0.3;
        let sigma_pp = |kt: f64| {
            let c = CoefficientSet { t: 0.0, a: f64::NEG_INFINITY, b: 2.0 * g0, c: 0.0, d: 2.0 * sys.mass * g0 * kt };
            c.d / c.b
        };
        let slope = (sigma_pp(7.0) - sigma_pp(2.0)) / 5.0;
        assert!((slope - sys.mass).abs() < 1e-8);
    }

    #[test]
    fn fourth_order_convergence() {
        let sys = SystemParams::new(1.0, 1.3);
        let c = CoefficientSet { t: 0.0, a: 0.2, b: 0.3, c: 0.05, d: 0.4 };
        let init = GaussianMomentState::new(1.0, 0.0, 0.5, 0.5, 0.0);
        let run = |sub: usize| {
            let tr = constant_traj(c, 0.4, 26);
            *evolve_with_substeps(&init, &tr, &sys, 0.0, 10.0, sub).unwrap().states.last().unwrap()
        };
        let (a, b, r) = (run(1), run(2), run(8));
        let err = |x: GaussianMomentState| {
            x.to_array().iter().zip(r.to_array()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
        };
        assert!(err(a) / err(b) >= 12.0, "ratio {}", err(a) / err(b));
    }

    #[test]
    fn flagged_row_is_refused() {
        let mut tr = constant_traj(CoefficientSet::zero(0.0), 0.1, 11);
        tr.rows[4].coefficients = None;
        tr.rows[4].flag = Some("coefficient_singularity".into());
        let e = evolve(&GaussianMomentState::new(0.0, 0.0, 1.0, 1.0, 0.0), &tr, &SystemParams::new(1.0, 1.0), 0.0, 0.1).unwrap_err();
        match e {
            QbmError::CoefficientSingularity { t, .. } => assert_relative_eq!(t, 0.4),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn wigner_peak_symmetry_and_normalization() {
        let s = GaussianMomentState::new(0.3, -0.2, 0.8, 0.5, 0.25);
        let w = WignerGaussian::new(s).unwrap();
        let peak = 1.0 / (2.0 * PI * s.uncertainty_product().sqrt());
        assert_relative_eq!(wigner_eval(&w, 0.3, -0.2), peak, max_relative = 1e-15);
        assert_relative_eq!(w.eval(0.3 + 0.4, -0.2 - 0.1), w.eval(0.3 - 0.4, -0.2 + 0.1), max_relative = 1e-14);
        let n = 400;
        let (hq, hp) = (8.0 * s.sigma_qq.sqrt(), 8.0 * s.sigma_pp.sqrt());
        let (dq, dp) = (2.0 * hq / n as f64, 2.0 * hp / n as f64);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let q = s.mean_q - hq + (i as f64 + 0.5) * dq;
                let p = s.mean_p - hp + (j as f64 + 0.5) * dp;
                total += w.eval(q, p) * dq * dp;
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn singular_covariance_rejected() {
        let s = GaussianMomentState::new(0.0, 0.0, 1.0, 1.0, 1.0);
        assert!(matches!(WignerGaussian::new(s), Err(QbmError::SingularCovariance(_))));
    }

    proptest! {
        #[test]
        fn mean_evolution_is_linear(q1 in -2.0f64..2.0, p1 in -2.0f64..2.0, q2 in -2.0f64..2.0,
                                    p2 in -2.0f64..2.0, alpha in -3.0f64..3.0) {
            let sys = SystemParams::new(1.0, 0.8);
            let c = CoefficientSet { t: 0.0, a: -0.1, b: 0.2, c: 0.3, d: 0.5 };
            let tr = constant_traj(c, 0.05, 101);
            let run = |q: f64, p: f64| {
                let s = evolve(&GaussianMomentState::new(q, p, 1.0, 1.0, 0.0), &tr, &sys, 0.0, 5.0).unwrap();
                let last = s.states.last().unwrap();
                (last.mean_q, last.mean_p)
            };
            let (a, b, m) = (run(q1, p1), run(q2, p2), run(alpha * q1 + q2, alpha * p1 + p2));
            prop_assert!((m.0 - (alpha * a.0 + b.0)).abs() < 1e-10);
            prop_assert!((m.1 - (alpha * a.1 + b.1)).abs() < 1e-10);
        }
    }
}
