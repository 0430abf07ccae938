//! Elementary functions of the homogeneous equation of motion
//!
//!   Σ̈(s) + Ω²Σ(s) + (2/M) ∫₀^s η(s−λ) Σ(λ) dλ = 0
//!
//! u₁ and u₂ satisfy the two-point conditions u₁(0)=1, u₁(t)=0, u₂(0)=0,
//! u₂(t)=1. They are built by superposition from the initial-value pair
//! v₁ (v₁(0)=1, v̇₁(0)=0) and v₂ (v₂(0)=0, v̇₂(0)=1), which only has to be
//! integrated once for the largest final time.

use std::io::Write;
use std::path::Path;

use crate::bath::KernelTable;
use crate::error::{QbmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Frequency {
    /// Bare oscillator frequency Ω.
    Bare(f64),
    /// Renormalized frequency with Ω² = Ω_ren² + 2γ(0)/M.
    Renormalized(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    pub mass: f64,
    pub frequency: Frequency,
}

impl SystemParams {
    pub fn new(mass: f64, omega: f64) -> Self {
        SystemParams {
            mass,
            frequency: Frequency::Bare(omega),
        }
    }

    pub fn renormalized(mass: f64, omega_ren: f64) -> Self {
        SystemParams {
            mass,
            frequency: Frequency::Renormalized(omega_ren),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(QbmError::Config("system mass must be finite and > 0".into()));
        }
        let w = match self.frequency {
            Frequency::Bare(w) | Frequency::Renormalized(w) => w,
        };
        if !(w.is_finite() && w >= 0.0) {
            return Err(QbmError::Config("system frequency must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Bare Ω² given the kernel value γ(0).
    pub fn bare_omega2(&self, gamma0: f64) -> f64 {
        match self.frequency {
            Frequency::Bare(w) => w * w,
            Frequency::Renormalized(w) => w * w + 2.0 * gamma0 / self.mass,
        }
    }

    /// Ω_ren² = Ω² − 2γ(0)/M.
    pub fn renormalized_omega2(&self, gamma0: f64) -> f64 {
        match self.frequency {
            Frequency::Bare(w) => w * w - 2.0 * gamma0 / self.mass,
            Frequency::Renormalized(w) => w * w,
        }
    }

    pub fn omega_ren(&self) -> Option<f64> {
        match self.frequency {
            Frequency::Renormalized(w) => Some(w),
            Frequency::Bare(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Bound on the relative defect of the discrete solution.
    pub tol: f64,
    /// Relative threshold below which v₂(t) or a Wronskian counts as zero.
    pub singular_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-3,
            singular_tol: 1e-9,
        }
    }
}

/// Initial-value pair v₁, v₂ with derivatives on {0, ds, …, n·ds}.
#[derive(Debug, Clone, PartialEq)]
pub struct VolterraPair {
    pub ds: f64,
    pub v1: Vec<f64>,
    pub dv1: Vec<f64>,
    pub v2: Vec<f64>,
    pub dv2: Vec<f64>,
    /// Largest relative defect found by the residual check.
    pub residual: f64,
}

impl VolterraPair {
    pub fn len(&self) -> usize {
        self.v1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v1.is_empty()
    }

    pub fn last_index(&self) -> usize {
        self.v1.len() - 1
    }

    /// Wronskian W = v₁v̇₂ − v̇₁v₂ at grid index n.
    pub fn wronskian(&self, n: usize) -> f64 {
        self.v1[n] * self.dv2[n] - self.dv1[n] * self.v2[n]
    }

    fn wronskian_scale(&self, n: usize) -> f64 {
        (self.v1[n] * self.dv2[n]).abs() + (self.dv1[n] * self.v2[n]).abs()
    }

    /// True if v₂ vanishes at index n to grid resolution.
    pub fn v2_vanishes(&self, n: usize, singular_tol: f64) -> bool {
        let scale = self.v2[..=n].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        vanishes_at(&self.v2, n, singular_tol * scale)
    }

    /// True if the Wronskian vanishes at index n to grid resolution.
    pub fn wronskian_vanishes(&self, n: usize, singular_tol: f64) -> bool {
        let lo = n.saturating_sub(1);
        let hi = (n + 1).min(self.last_index());
        let w: Vec<f64> = (lo..=hi).map(|k| self.wronskian(k)).collect();
        let scale = (lo..=hi).fold(0.0f64, |m, k| m.max(self.wronskian_scale(k)));
        vanishes_at(&w, n - lo, singular_tol * scale)
    }
}

/// A sample sequence vanishes at `n` if it is below `floor` there, or if the
/// linear interpolant through a neighbour puts a root within half a step.
fn vanishes_at(x: &[f64], n: usize, floor: f64) -> bool {
    if x[n].abs() <= floor {
        return true;
    }
    let near_root = |m: usize| {
        let (a, b) = (x[n], x[m]);
        a * b < 0.0 && a.abs() / (a - b).abs() <= 0.5
    };
    (n > 0 && near_root(n - 1)) || (n + 1 < x.len() && near_root(n + 1))
}

fn check_grid(kernels: &KernelTable, t_final: f64, ds: f64) -> Result<usize> {
    if !(ds > 0.0 && ds.is_finite()) {
        return Err(QbmError::Usage(format!("ds must be > 0, got {ds}")));
    }
    if ((kernels.dt - ds) / ds).abs() > 1e-9 {
        return Err(QbmError::Usage(format!(
            "kernel grid step {} differs from solver step {ds}",
            kernels.dt
        )));
    }
    kernels.index_of(t_final)
}

/// Integrates the pair on [0, t_final] with the trapezoidal rule for both the
/// time stepping and the memory convolution. The memory term is written as
///
///   (2/M)∫₀^s η(s−λ)Σ(λ)dλ = (2/M)[γ(s)Σ(0) − γ(0)Σ(s) + ∫₀^s γ(s−λ)Σ̇(λ)dλ],
///
/// and the implicit step is a 2×2 linear solve, so no iteration is needed.
pub fn solve_ivp_pair(
    sys: &SystemParams,
    kernels: &KernelTable,
    t_final: f64,
    ds: f64,
    opts: &SolverOptions,
) -> Result<VolterraPair> {
    sys.validate()?;
    let n = check_grid(kernels, t_final, ds)?;
    let pair = integrate_pair(sys, kernels, n, ds);
    if pair.residual > opts.tol {
        return Err(QbmError::Accuracy {
            residual: pair.residual,
            tolerance: opts.tol,
            suggested_ds: ds * (opts.tol / pair.residual).sqrt() * 0.8,
        });
    }
    Ok(pair)
}

fn integrate_pair(sys: &SystemParams, kernels: &KernelTable, n: usize, h: f64) -> VolterraPair {
    let m = sys.mass;
    let g = &kernels.gamma;
    let g0 = kernels.gamma0();
    let omega2 = sys.bare_omega2(g0);
    // local part of the memory term folds into a shifted frequency
    let omega2_eff = omega2 - 2.0 * g0 / m;
    let damp = (2.0 / m) * 0.5 * h * g0;

    let mut v = [vec![0.0; n + 1], vec![0.0; n + 1]];
    let mut w = [vec![0.0; n + 1], vec![0.0; n + 1]];
    let mut f = [vec![0.0; n + 1], vec![0.0; n + 1]];
    v[0][0] = 1.0;
    w[1][0] = 1.0;
    for k in 0..2 {
        f[k][0] = -omega2 * v[k][0];
    }

    // [1, -h/2; h/2·Ω̃², 1 + h/2·c] · (v, w)ᵀ = rhs
    let a11 = 1.0;
    let a12 = -0.5 * h;
    let a21 = 0.5 * h * omega2_eff;
    let a22 = 1.0 + 0.5 * h * damp;
    let det = a11 * a22 - a12 * a21;

    for i in 0..n {
        let j = i + 1;
        let mut hist = [0.5 * g[j] * w[0][0], 0.5 * g[j] * w[1][0]];
        for l in 1..j {
            let gk = g[j - l];
            hist[0] += gk * w[0][l];
            hist[1] += gk * w[1][l];
        }
        for k in 0..2 {
            let known = -(2.0 / m) * (g[j] * v[k][0] + h * hist[k]);
            let r1 = v[k][i] + 0.5 * h * w[k][i];
            let r2 = w[k][i] + 0.5 * h * (f[k][i] + known);
            let vj = (r1 * a22 - a12 * r2) / det;
            let wj = (a11 * r2 - a21 * r1) / det;
            v[k][j] = vj;
            w[k][j] = wj;
            f[k][j] = -omega2_eff * vj - damp * wj + known;
        }
    }

    let residual = (0..2)
        .map(|k| {
            let scale = f[k].iter().fold(0.0f64, |a, x| a.max(x.abs()));
            if scale == 0.0 || n < 2 {
                return 0.0;
            }
            (1..n)
                .map(|i| ((w[k][i + 1] - w[k][i - 1]) / (2.0 * h) - f[k][i]).abs())
                .fold(0.0f64, f64::max)
                / scale
        })
        .fold(0.0f64, f64::max);

    let [v1, v2] = v;
    let [dv1, dv2] = w;
    VolterraPair {
        ds: h,
        v1,
        dv1,
        v2,
        dv2,
        residual,
    }
}

/// u₁, u₂ and derivatives on [0, t_final].
#[derive(Debug, Clone, PartialEq)]
pub struct ElementarySolution {
    pub t_final: f64,
    pub ds: f64,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub du1: Vec<f64>,
    pub du2: Vec<f64>,
    pub du1_at_0: f64,
    pub du1_at_t: f64,
    pub du2_at_0: f64,
    pub du2_at_t: f64,
    /// Relative defect of the underlying initial-value solutions.
    pub residual: f64,
    v2: Vec<f64>,
    dv2: Vec<f64>,
}

impl ElementarySolution {
    /// Builds u₁, u₂ at grid index `n` of an already integrated pair.
    pub fn from_pair(pair: &VolterraPair, n: usize, opts: &SolverOptions) -> Result<Self> {
        if n == 0 || n > pair.last_index() {
            return Err(QbmError::Usage(format!(
                "final index {n} outside 1..={}",
                pair.last_index()
            )));
        }
        let t = n as f64 * pair.ds;
        if pair.v2_vanishes(n, opts.singular_tol) {
            return Err(QbmError::SingularBoundary { t, value: pair.v2[n] });
        }
        let r = pair.v1[n] / pair.v2[n];
        let inv = 1.0 / pair.v2[n];
        let u1: Vec<f64> = (0..=n).map(|k| pair.v1[k] - r * pair.v2[k]).collect();
        let du1: Vec<f64> = (0..=n).map(|k| pair.dv1[k] - r * pair.dv2[k]).collect();
        let u2: Vec<f64> = (0..=n).map(|k| pair.v2[k] * inv).collect();
        let du2: Vec<f64> = (0..=n).map(|k| pair.dv2[k] * inv).collect();
        Ok(ElementarySolution {
            t_final: t,
            ds: pair.ds,
            du1_at_0: du1[0],
            du1_at_t: du1[n],
            du2_at_0: du2[0],
            du2_at_t: du2[n],
            u1,
            u2,
            du1,
            du2,
            residual: pair.residual,
            v2: pair.v2[..=n].to_vec(),
            dv2: pair.dv2[..=n].to_vec(),
        })
    }

    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.u1.len()).map(move |k| k as f64 * self.ds)
    }

    /// Largest deviation from the four boundary values.
    pub fn boundary_defect(&self) -> f64 {
        let n = self.u1.len() - 1;
        [
            (self.u1[0] - 1.0).abs(),
            self.u1[n].abs(),
            self.u2[0].abs(),
            (self.u2[n] - 1.0).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn green(&self) -> GreenEvaluator<'_> {
        GreenEvaluator { sol: self }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "u1", "u2", "du1", "du2"])?;
        for (k, s) in self.grid().enumerate() {
            w.write_record([
                format!("{s:?}"),
                format!("{:?}", self.u1[k]),
                format!("{:?}", self.u2[k]),
                format!("{:?}", self.du1[k]),
                format!("{:?}", self.du2[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Solves the pair up to `t_final` and forms the boundary solutions there.
pub fn elementary(
    sys: &SystemParams,
    kernels: &KernelTable,
    t_final: f64,
    ds: f64,
    opts: &SolverOptions,
) -> Result<ElementarySolution> {
    let n = check_grid(kernels, t_final, ds)?;
    if n == 0 {
        return Err(QbmError::Usage("t_final must be > 0".into()));
    }
    // one step past t_final, if the table allows, for the root check
    let horizon = (n + 1).min(kernels.len() - 1);
    let pair = solve_ivp_pair(sys, kernels, horizon as f64 * ds, ds, opts)?;
    let mut pair_n = pair;
    let sol = {
        let n_top = pair_n.last_index();
        if n_top > n {
            // root check sees the extra sample, the solution is cut at n
            if pair_n.v2_vanishes(n, opts.singular_tol) {
                return Err(QbmError::SingularBoundary {
                    t: n as f64 * ds,
                    value: pair_n.v2[n],
                });
            }
            for v in [&mut pair_n.v1, &mut pair_n.dv1, &mut pair_n.v2, &mut pair_n.dv2] {
                v.truncate(n + 1);
            }
        }
        ElementarySolution::from_pair(&pair_n, n, opts)?
    };
    Ok(sol)
}

/// Cubic Hermite interpolation of (value, derivative) samples.
fn hermite(y: &[f64], dy: &[f64], h: f64, s: f64) -> (f64, f64) {
    let n = y.len() - 1;
    if n == 0 {
        return (y[0], dy[0]);
    }
    let x = (s / h).clamp(0.0, n as f64);
    let i = (x.floor() as usize).min(n - 1);
    let u = x - i as f64;
    if u == 0.0 {
        return (y[i], dy[i]);
    }
    let (y0, y1, d0, d1) = (y[i], y[i + 1], dy[i] * h, dy[i + 1] * h);
    let u2 = u * u;
    let u3 = u2 * u;
    let val = (2.0 * u3 - 3.0 * u2 + 1.0) * y0
        + (u3 - 2.0 * u2 + u) * d0
        + (-2.0 * u3 + 3.0 * u2) * y1
        + (u3 - u2) * d1;
    let der = ((6.0 * u2 - 6.0 * u) * y0
        + (3.0 * u2 - 4.0 * u + 1.0) * d0
        + (-6.0 * u2 + 6.0 * u) * y1
        + (3.0 * u2 - 2.0 * u) * d1)
        / h;
    (val, der)
}

/// Green functions built from u₁, u₂.
///
/// `green_g1`/`green_g2` use the Wronskian ratio
/// [u₁(s₂)u₂(s₁) − u₂(s₂)u₁(s₁)] / [u₁(s₂)u̇₂(s₂) − u̇₁(s₂)u₂(s₂)]
/// on s₁ > s₂ and s₂ > s₁ respectively. `resolvent` is the causal Green
/// function v₂(s₁ − s₂) of the full memory equation.
pub struct GreenEvaluator<'a> {
    sol: &'a ElementarySolution,
}

impl GreenEvaluator<'_> {
    fn check(&self, s1: f64, s2: f64) -> Result<()> {
        let t = self.sol.t_final * (1.0 + 1e-12);
        if !(0.0..=t).contains(&s1) || !(0.0..=t).contains(&s2) {
            return Err(QbmError::Usage(format!(
                "Green function arguments ({s1}, {s2}) outside [0, {}]",
                self.sol.t_final
            )));
        }
        Ok(())
    }

    fn u(&self, s: f64) -> (f64, f64, f64, f64) {
        let (u1, du1) = hermite(&self.sol.u1, &self.sol.du1, self.sol.ds, s);
        let (u2, du2) = hermite(&self.sol.u2, &self.sol.du2, self.sol.ds, s);
        (u1, du1, u2, du2)
    }

    fn wronskian(&self, s2: f64) -> Result<(f64, f64, f64)> {
        let (u1, du1, u2, du2) = self.u(s2);
        let w = u1 * du2 - du1 * u2;
        let scale = (u1 * du2).abs() + (du1 * u2).abs();
        if w.abs() < 1e-12 * scale || w == 0.0 {
            return Err(QbmError::Degenerate { s: s2, value: w });
        }
        Ok((w, u1, u2))
    }

    fn ratio(&self, s1: f64, s2: f64) -> Result<f64> {
        let (w, a1, a2) = self.wronskian(s2)?;
        let (b1, _, b2, _) = self.u(s1);
        Ok((a1 * b2 - a2 * b1) / w)
    }

    pub fn green_g1(&self, s1: f64, s2: f64) -> Result<f64> {
        self.check(s1, s2)?;
        if s1 > s2 {
            self.ratio(s1, s2)
        } else {
            Ok(0.0)
        }
    }

    pub fn green_g2(&self, s1: f64, s2: f64) -> Result<f64> {
        self.check(s1, s2)?;
        if s2 > s1 {
            self.ratio(s1, s2)
        } else {
            Ok(0.0)
        }
    }

    /// ∂G₁/∂s₁ from the derivative samples; the one-sided limit at s₁ = s₂.
    pub fn green_dg1(&self, s1: f64, s2: f64) -> Result<f64> {
        self.check(s1, s2)?;
        if s1 < s2 {
            return Ok(0.0);
        }
        let (w, a1, a2) = self.wronskian(s2)?;
        let (_, db1, _, db2) = self.u(s1);
        Ok((a1 * db2 - a2 * db1) / w)
    }

    /// v₂(s₁ − s₂) for s₁ ≥ s₂, zero otherwise.
    pub fn resolvent(&self, s1: f64, s2: f64) -> Result<f64> {
        self.check(s1, s2)?;
        if s1 < s2 {
            return Ok(0.0);
        }
        Ok(hermite(&self.sol.v2, &self.sol.dv2, self.sol.ds, s1 - s2).0)
    }

    /// ∂/∂s₁ of [`GreenEvaluator::resolvent`].
    pub fn resolvent_ds1(&self, s1: f64, s2: f64) -> Result<f64> {
        self.check(s1, s2)?;
        if s1 < s2 {
            return Ok(0.0);
        }
        Ok(hermite(&self.sol.v2, &self.sol.dv2, self.sol.ds, s1 - s2).1)
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use crate::bath::BathMode;

    /// v₁, v₂ for one mode from the normal modes of the coupled pair.
    pub(crate) fn two_oscillator(mass: f64, omega: f64, mode: BathMode, s: f64) -> [f64; 4] {
        let k = mode.coupling / (mass * mode.mass).sqrt();
        let (a, d) = (omega * omega, mode.frequency * mode.frequency);
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + k * k).sqrt();
        let lams = [mid - rad, mid + rad];
        let mut out = [0.0; 4];
        for lam in lams {
            // unit eigenvector (x, y) of [[a, k], [k, d]]
            let (x, y) = if k.abs() > 0.0 { (k, lam - a) } else if (lam - a).abs() < 1e-300 { (1.0, 0.0) } else { (0.0, 1.0) };
            let norm = (x * x + y * y).sqrt();
            let p = (x / norm) * (x / norm);
            let w = lam.sqrt();
            out[0] += p * (w * s).cos();
            out[1] += -p * w * (w * s).sin();
            out[2] += p * (w * s).sin() / w;
            out[3] += p * (w * s).cos();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::two_oscillator;
    use super::*;
    use crate::bath::{tabulate_kernels, BathMode, BathSpec, Beta, SpectralDensity};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn empty_table(ds: f64, s_max: f64) -> KernelTable {
        let b = BathSpec::new(SpectralDensity::empty(), Beta::Finite(1.0));
        tabulate_kernels(&b, ds, s_max).unwrap()
    }

    #[test]
    fn free_oscillator_pair() {
        let ds = 0.001;
        let k = empty_table(ds, 5.0);
        let sys = SystemParams::new(1.0, 1.0);
        let p = solve_ivp_pair(&sys, &k, 5.0, ds, &SolverOptions::default()).unwrap();
        for i in [0, 1000, 3000, 5000] {
            let s = i as f64 * ds;
            assert!((p.v1[i] - s.cos()).abs() < 1e-6);
            assert!((p.v2[i] - s.sin()).abs() < 1e-6);
            assert!((p.dv2[i] - s.cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn free_particle_pair_is_exact() {
        let ds = 0.01;
        let k = empty_table(ds, 2.0);
        let sys = SystemParams::new(2.0, 0.0);
        let p = solve_ivp_pair(&sys, &k, 2.0, ds, &SolverOptions::default()).unwrap();
        for i in 0..p.len() {
            assert!((p.v1[i] - 1.0).abs() < 1e-14);
            assert!((p.v2[i] - i as f64 * ds).abs() < 1e-12);
        }
    }

    #[test]
    fn single_mode_pair_matches_normal_modes() {
        let mode = BathMode::new(0.5, 1.0, 1.3);
        let bath = BathSpec::discrete(vec![mode], Beta::Finite(1.0));
        let ds = 0.002;
        let k = tabulate_kernels(&bath, ds, 6.0).unwrap();
        let sys = SystemParams::new(1.0, 0.9);
        let p = solve_ivp_pair(&sys, &k, 6.0, ds, &SolverOptions::default()).unwrap();
        for i in [500, 1700, 3000] {
            let ex = two_oscillator(1.0, 0.9, mode, i as f64 * ds);
            assert!((p.v1[i] - ex[0]).abs() < 2e-5, "{} {}", p.v1[i], ex[0]);
            assert!((p.dv1[i] - ex[1]).abs() < 2e-5);
            assert!((p.v2[i] - ex[2]).abs() < 2e-5);
            assert!((p.dv2[i] - ex[3]).abs() < 2e-5);
        }
    }

    #[test]
    fn free_oscillator_boundary_solutions() {
        let ds = PI / 2000.0;
        let k = empty_table(ds, PI);
        let sys = SystemParams::new(1.0, 1.0);
        let t = PI / 2.0;
        let sol = elementary(&sys, &k, t, ds, &SolverOptions::default()).unwrap();
        assert!(sol.boundary_defect() <= 1e-10);
        for (i, s) in sol.grid().enumerate() {
            assert!((sol.u1[i] - (t - s).sin() / t.sin()).abs() < 1e-6);
            assert!((sol.u2[i] - s.sin() / t.sin()).abs() < 1e-6);
        }
    }

    #[test]
    fn conjugate_point_is_singular_boundary() {
        let ds = PI / 1000.0;
        let k = empty_table(ds, 2.0 * PI);
        let sys = SystemParams::new(1.0, 1.0);
        let err = elementary(&sys, &k, PI, ds, &SolverOptions::default()).unwrap_err();
        match err {
            QbmError::SingularBoundary { t, .. } => assert_relative_eq!(t, PI, max_relative = 1e-12),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn off_grid_time_is_usage_error() {
        let k = empty_table(0.01, 2.0);
        let sys = SystemParams::new(1.0, 1.0);
        let e = elementary(&sys, &k, 1.0051, 0.01, &SolverOptions::default()).unwrap_err();
        assert!(matches!(e, QbmError::Usage(_)));
        let e = elementary(&sys, &k, 1.0, 0.02, &SolverOptions::default()).unwrap_err();
        assert!(matches!(e, QbmError::Usage(_)));
    }

    #[test]
    fn coarse_step_fails_accuracy_check() {
        let ds = 0.5;
        let k = empty_table(ds, 20.0);
        let sys = SystemParams::new(1.0, 3.0);
        let e = solve_ivp_pair(&sys, &k, 20.0, ds, &SolverOptions::default()).unwrap_err();
        match e {
            QbmError::Accuracy { suggested_ds, .. } => assert!(suggested_ds < ds),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn green_functions_free_oscillator() {
        let ds = 0.001;
        let k = empty_table(ds, 2.0);
        let sys = SystemParams::new(1.0, 1.0);
        let sol = elementary(&sys, &k, 1.2, ds, &SolverOptions::default()).unwrap();
        let g = sol.green();
        for (s1, s2) in [(1.0, 0.3), (0.75, 0.1234), (1.2, 0.0)] {
            assert!((g.green_g1(s1, s2).unwrap() - (s1 - s2).sin()).abs() < 1e-7);
            assert_eq!(g.green_g2(s1, s2).unwrap(), 0.0);
            assert!((g.resolvent(s1, s2).unwrap() - (s1 - s2).sin()).abs() < 1e-6);
        }
        assert!((g.green_g2(0.3, 1.0).unwrap() - (0.3f64 - 1.0).sin()).abs() < 1e-7);
        for s in [0.0, 0.4567, 1.2] {
            assert_eq!(g.green_g1(s, s).unwrap(), 0.0);
            assert_eq!(g.green_g2(s, s).unwrap(), 0.0);
            assert!((g.green_dg1(s, s).unwrap() - 1.0).abs() < 1e-8);
        }
        assert!(g.green_g1(1.5, 0.0).is_err());
    }

    #[test]
    fn green_unit_slope_with_memory() {
        let bath = BathSpec::discrete(vec![BathMode::new(0.6, 1.0, 0.8)], Beta::Finite(1.0));
        let ds = 0.002;
        let k = tabulate_kernels(&bath, ds, 3.0).unwrap();
        let sys = SystemParams::new(1.0, 1.0);
        let sol = elementary(&sys, &k, 2.0, ds, &SolverOptions::default()).unwrap();
        let g = sol.green();
        for s in [0.0, 0.5, 1.3, 1.999] {
            assert_eq!(g.green_g1(s, s).unwrap(), 0.0);
            assert!((g.green_dg1(s, s).unwrap() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn free_oscillator_wronskian_is_constant() {
        let ds = 0.001;
        let k = empty_table(ds, 2.0);
        let sys = SystemParams::new(1.0, 1.3);
        let sol = elementary(&sys, &k, 1.7, ds, &SolverOptions::default()).unwrap();
        let w: Vec<f64> = (0..sol.u1.len())
            .map(|i| sol.u1[i] * sol.du2[i] - sol.du1[i] * sol.u2[i])
            .collect();
        let spread = w.iter().fold(0.0f64, |m, x| m.max((x - w[0]).abs()));
        assert!(spread <= 1e-8 * w[0].abs().max(1.0), "spread {spread}");
    }

    #[test]
    fn second_order_convergence_single_mode() {
        let mode = BathMode::new(0.5, 1.0, 1.3);
        let bath = BathSpec::discrete(vec![mode], Beta::Finite(1.0));
        let sys = SystemParams::new(1.0, 0.9);
        let t = 2.0;
        let err = |ds: f64| {
            let k = tabulate_kernels(&bath, ds, t + ds).unwrap();
            let sol = elementary(&sys, &k, t, ds, &SolverOptions::default()).unwrap();
            let ex_t = two_oscillator(1.0, 0.9, mode, t);
            let mid = sol.u1.len() / 2;
            let ex_m = two_oscillator(1.0, 0.9, mode, mid as f64 * ds);
            let u1_exact = ex_m[0] - ex_t[0] / ex_t[2] * ex_m[2];
            (sol.u1[mid] - u1_exact).abs()
        };
        let (e1, e2) = (err(0.01), err(0.005));
        assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn damped_oscillator_in_ohmic_regime() {
        // high cutoff: u-functions approach the damped oscillator with Ω_ren, γ₀
        let (g0, lam) = (0.2, 100.0);
        let bath = BathSpec::new(
            SpectralDensity::OhmicExpCutoff { gamma0: g0, cutoff: lam, mass: 1.0 },
            Beta::Finite(0.01),
        );
        let ds = 0.001;
        let t = 2.0;
        let k = tabulate_kernels(&bath, ds, t + ds).unwrap();
        let sys = SystemParams::renormalized(1.0, 1.0);
        let opts = SolverOptions { tol: 5e-2, ..SolverOptions::default() };
        let sol = elementary(&sys, &k, t, ds, &opts).unwrap();
        // ẍ + 2γ₀ẋ + Ω_ren²x = 0
        let wd = (1.0 - g0 * g0).sqrt();
        let x2 = |s: f64| (-g0 * s).exp() * (wd * s).sin() / wd;
        for i in [500usize, 1000, 1500] {
            let s = i as f64 * ds;
            assert!((sol.u2[i] - x2(s) / x2(t)).abs() < 0.02, "{} {}", sol.u2[i], x2(s) / x2(t));
        }
    }

    #[test]
    fn csv_has_expected_header() {
        let ds = 0.05;
        let k = empty_table(ds, 1.0);
        let sys = SystemParams::new(1.0, 1.0);
        let sol = elementary(&sys, &k, 0.5, ds, &SolverOptions::default()).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s,u1,u2,du1,du2\n"));
        assert_eq!(text.lines().count(), 12);
    }
}
