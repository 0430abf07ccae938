//! Environment models and their memory kernels.
//!
//! A bath is described by its spectral density I(ω) plus an inverse
//! temperature. From it we build the dissipation kernel
//! γ(s) = ∫ dω I(ω)/ω cos(ωs), its derivative η = dγ/ds, and the noise kernel
//! ν(s) = ∫ dω I(ω) coth(ħωβ/2) cos(ωs).
//!
//! η is never sampled: every consumer goes through [`eta_moment`] /
//! [`KernelTable::eta_moment`], which integrate by parts onto γ.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{QbmError, Result};
use crate::quadrature::{adaptive_gl, trap_weight, GaussLegendre};

/// Exp cutoff integrals are truncated at this many cutoff frequencies;
/// the neglected tail is below e^-40 relative.
const EXP_CUTOFF_SPAN: f64 = 40.0;

/// One oscillator of a discrete bath.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathMode {
    pub coupling: f64,
    pub mass: f64,
    pub frequency: f64,
}

impl BathMode {
    pub fn new(coupling: f64, mass: f64, frequency: f64) -> Self {
        BathMode {
            coupling,
            mass,
            frequency,
        }
    }

    /// Weight C²/(2mω) of the delta peak this mode contributes to I(ω).
    pub fn spectral_weight(&self) -> f64 {
        self.coupling * self.coupling / (2.0 * self.mass * self.frequency)
    }

    fn validate(&self, index: usize) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(QbmError::Config(format!("mode {index}: mass must be finite and > 0")));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(QbmError::Config(format!(
                "mode {index}: frequency must be finite and > 0"
            )));
        }
        if !self.coupling.is_finite() {
            return Err(QbmError::Config(format!("mode {index}: coupling must be finite")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpectralDensity {
    Discrete(Vec<BathMode>),
    /// I(ω) = (2/π) M γ₀ ω e^{-ω/Λ}
    OhmicExpCutoff { gamma0: f64, cutoff: f64, mass: f64 },
    /// I(ω) = (2/π) M γ₀ ω θ(Λ - ω)
    OhmicSharpCutoff { gamma0: f64, cutoff: f64, mass: f64 },
}

impl SpectralDensity {
    pub fn empty() -> Self {
        SpectralDensity::Discrete(Vec::new())
    }

    /// Continuum density at ω; `None` for discrete baths.
    pub fn density(&self, omega: f64) -> Option<f64> {
        match *self {
            SpectralDensity::Discrete(_) => None,
            SpectralDensity::OhmicExpCutoff { gamma0, cutoff, mass } => {
                Some(2.0 / PI * mass * gamma0 * omega * (-omega / cutoff).exp())
            }
            SpectralDensity::OhmicSharpCutoff { gamma0, cutoff, mass } => Some(if omega <= cutoff {
                2.0 / PI * mass * gamma0 * omega
            } else {
                0.0
            }),
        }
    }

    /// I(ω)/ω, finite at ω = 0 for the Ohmic families.
    fn density_over_omega(&self, omega: f64) -> f64 {
        match *self {
            SpectralDensity::Discrete(_) => 0.0,
            SpectralDensity::OhmicExpCutoff { gamma0, cutoff, mass } => {
                2.0 / PI * mass * gamma0 * (-omega / cutoff).exp()
            }
            SpectralDensity::OhmicSharpCutoff { gamma0, cutoff, mass } => {
                if omega <= cutoff {
                    2.0 / PI * mass * gamma0
                } else {
                    0.0
                }
            }
        }
    }

    /// Upper end of the frequency integration range for continua.
    fn integration_limit(&self) -> f64 {
        match *self {
            SpectralDensity::Discrete(_) => 0.0,
            SpectralDensity::OhmicExpCutoff { cutoff, .. } => EXP_CUTOFF_SPAN * cutoff,
            SpectralDensity::OhmicSharpCutoff { cutoff, .. } => cutoff,
        }
    }

    fn cutoff(&self) -> f64 {
        match *self {
            SpectralDensity::Discrete(_) => f64::INFINITY,
            SpectralDensity::OhmicExpCutoff { cutoff, .. }
            | SpectralDensity::OhmicSharpCutoff { cutoff, .. } => cutoff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SpectralDensity::Discrete(modes) => {
                for (i, m) in modes.iter().enumerate() {
                    m.validate(i)?;
                }
                Ok(())
            }
            SpectralDensity::OhmicExpCutoff { gamma0, cutoff, mass }
            | SpectralDensity::OhmicSharpCutoff { gamma0, cutoff, mass } => {
                if !(gamma0.is_finite() && *gamma0 >= 0.0) {
                    return Err(QbmError::Config("gamma0 must be finite and >= 0".into()));
                }
                if !(cutoff.is_finite() && *cutoff > 0.0) {
                    return Err(QbmError::Config(
                        "continuum spectral density needs a finite cutoff > 0; the kernel integrals diverge without one"
                            .into(),
                    ));
                }
                if !(mass.is_finite() && *mass > 0.0) {
                    return Err(QbmError::Config("spectral mass must be finite and > 0".into()));
                }
                Ok(())
            }
        }
    }
}

/// Inverse temperature; `Infinite` is the zero-temperature sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BathSpec {
    pub spectral: SpectralDensity,
    pub beta: Beta,
    pub hbar: f64,
    pub kb: f64,
}

impl BathSpec {
    /// Bath with ħ = k_B = 1.
    pub fn new(spectral: SpectralDensity, beta: Beta) -> Self {
        BathSpec {
            spectral,
            beta,
            hbar: 1.0,
            kb: 1.0,
        }
    }

    pub fn discrete(modes: Vec<BathMode>, beta: Beta) -> Self {
        Self::new(SpectralDensity::Discrete(modes), beta)
    }

    pub fn validate(&self) -> Result<()> {
        self.spectral.validate()?;
        if !(self.hbar.is_finite() && self.hbar > 0.0) {
            return Err(QbmError::Config("hbar must be finite and > 0".into()));
        }
        if !(self.kb.is_finite() && self.kb > 0.0) {
            return Err(QbmError::Config("kB must be finite and > 0".into()));
        }
        if let Beta::Finite(b) = self.beta {
            if !(b.is_finite() && b > 0.0) {
                return Err(QbmError::Config("beta must be > 0 (or \"inf\")".into()));
            }
        }
        Ok(())
    }

    /// Temperature T = 1/(k_B β); zero for the infinite-β sentinel.
    pub fn temperature(&self) -> f64 {
        match self.beta {
            Beta::Finite(b) => 1.0 / (self.kb * b),
            Beta::Infinite => 0.0,
        }
    }

    /// coth(ħωβ/2) with asymptotic branches at both ends.
    pub fn thermal_factor(&self, omega: f64) -> f64 {
        match self.beta {
            Beta::Infinite => 1.0,
            Beta::Finite(b) => coth_half(self.hbar * omega * b),
        }
    }

    pub fn modes(&self) -> Option<&[BathMode]> {
        match &self.spectral {
            SpectralDensity::Discrete(m) => Some(m),
            _ => None,
        }
    }
}

/// coth(x/2) for x = ħωβ ≥ 0.
pub fn coth_half(x: f64) -> f64 {
    if x < 1e-4 {
        2.0 / x + x / 6.0
    } else if x > 50.0 {
        1.0
    } else {
        1.0 / (0.5 * x).tanh()
    }
}

fn continuum_integral<F: Fn(f64) -> f64>(spectral: &SpectralDensity, f: F, s: f64) -> f64 {
    let upper = spectral.integration_limit();
    let lambda = spectral.cutoff();
    let mut max_panel = 0.5 * lambda;
    if s > 0.0 {
        max_panel = max_panel.min(PI / (4.0 * s));
    }
    // magnitude of the non-oscillatory integrand sets the absolute tolerance
    let coarse = GaussLegendre::new(10);
    let panels = 16;
    let w = upper / panels as f64;
    let magnitude: f64 = (0..panels)
        .map(|k| coarse.integrate(|x| f(x).abs(), k as f64 * w, (k + 1) as f64 * w))
        .sum();
    let tol = (1e-13 * magnitude).max(f64::MIN_POSITIVE);
    adaptive_gl(&|x: f64| f(x) * (x * s).cos(), 0.0, upper, max_panel, tol)
}

/// γ(s) = ∫₀^∞ dω I(ω)/ω cos(ωs).
pub fn gamma_kernel(bath: &BathSpec, s: f64) -> Result<f64> {
    if !s.is_finite() {
        return Err(QbmError::Usage(format!("kernel argument must be finite, got {s}")));
    }
    bath.spectral.validate()?;
    let s = s.abs();
    Ok(match &bath.spectral {
        SpectralDensity::Discrete(modes) => modes
            .iter()
            .map(|m| m.spectral_weight() / m.frequency * (m.frequency * s).cos())
            .fold(0.0, |acc, x| acc + x),
        sd => continuum_integral(sd, |w| sd.density_over_omega(w), s),
    })
}

/// ν(s) = ∫₀^∞ dω I(ω) coth(ħωβ/2) cos(ωs).
pub fn nu_kernel(bath: &BathSpec, s: f64) -> Result<f64> {
    if !s.is_finite() {
        return Err(QbmError::Usage(format!("kernel argument must be finite, got {s}")));
    }
    bath.validate()?;
    let s = s.abs();
    Ok(match &bath.spectral {
        SpectralDensity::Discrete(modes) => modes
            .iter()
            .map(|m| m.spectral_weight() * bath.thermal_factor(m.frequency) * (m.frequency * s).cos())
            .fold(0.0, |acc, x| acc + x),
        sd => continuum_integral(
            sd,
            |w| {
                // I(ω)coth(ħωβ/2) → (I/ω)·2/(ħβ) as ω → 0
                sd.density_over_omega(w) * w * bath.thermal_factor(w)
            },
            s,
        ),
    })
}

/// Samples of a real function g on the uniform grid {0, step, …, n·step},
/// together with its derivative g′ at the same points.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFunction {
    pub step: f64,
    pub values: Vec<f64>,
    pub derivatives: Vec<f64>,
}

impl SampledFunction {
    pub fn from_fn<F: Fn(f64) -> f64, G: Fn(f64) -> f64>(step: f64, n: usize, g: F, dg: G) -> Self {
        SampledFunction {
            step,
            values: (0..=n).map(|i| g(i as f64 * step)).collect(),
            derivatives: (0..=n).map(|i| dg(i as f64 * step)).collect(),
        }
    }

    fn check(&self) -> Result<usize> {
        if self.values.is_empty() || self.values.len() != self.derivatives.len() {
            return Err(QbmError::Usage(
                "sampled function needs matching, non-empty value and derivative arrays".into(),
            ));
        }
        if !(self.step > 0.0 && self.step.is_finite()) && self.values.len() > 1 {
            return Err(QbmError::Usage("sampled function step must be > 0".into()));
        }
        Ok(self.values.len() - 1)
    }
}

/// ∫₀^t η(t−s) g(s) ds with t = n·step, evaluated as
/// γ(t)g(0) − γ(0)g(t) + ∫₀^t γ(t−s) g′(s) ds so the derivative kernel is
/// never differenced. γ comes from point evaluations of the bath.
pub fn eta_moment(bath: &BathSpec, g: &SampledFunction) -> Result<f64> {
    let n = g.check()?;
    let h = g.step;
    let gammas = (0..=n)
        .map(|k| gamma_kernel(bath, k as f64 * h))
        .collect::<Result<Vec<_>>>()?;
    Ok(eta_moment_from_gamma(&gammas, &g.values, &g.derivatives, h))
}

fn eta_moment_from_gamma(gamma: &[f64], g: &[f64], dg: &[f64], h: f64) -> f64 {
    let n = g.len() - 1;
    if n == 0 {
        return 0.0;
    }
    let boundary = gamma[n] * g[0] - gamma[0] * g[n];
    let conv: f64 = (0..=n).map(|j| trap_weight(j, n, h) * gamma[n - j] * dg[j]).sum();
    boundary + conv
}

/// γ and ν sampled on s ∈ {0, dt, …, s_max}.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    pub dt: f64,
    pub gamma: Vec<f64>,
    pub nu: Vec<f64>,
}

impl KernelTable {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn s_max(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 * self.dt
    }

    pub fn gamma_at(&self, k: usize) -> f64 {
        self.gamma[k]
    }

    pub fn nu_at(&self, k: usize) -> f64 {
        self.nu[k]
    }

    /// Grid index of time `t`, or a usage error if `t` is off-grid or out of range.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(QbmError::Usage(format!("time {t} must be finite and >= 0")));
        }
        let x = t / self.dt;
        let n = x.round();
        if (x - n).abs() > 1e-6 {
            return Err(QbmError::Usage(format!(
                "time {t} is not a multiple of the kernel grid step {}",
                self.dt
            )));
        }
        let n = n as usize;
        if n >= self.len() {
            return Err(QbmError::Usage(format!(
                "time {t} exceeds kernel table coverage {}",
                self.s_max()
            )));
        }
        Ok(n)
    }

    /// Table-backed version of [`eta_moment`]; `g` and `dg` are sampled on this
    /// table's grid from 0 to t = (len − 1)·dt.
    pub fn eta_moment(&self, g: &[f64], dg: &[f64]) -> Result<f64> {
        if g.is_empty() || g.len() != dg.len() {
            return Err(QbmError::Usage("eta_moment: mismatched sample arrays".into()));
        }
        if g.len() > self.len() {
            return Err(QbmError::Usage(format!(
                "eta_moment: {} samples exceed kernel table length {}",
                g.len(),
                self.len()
            )));
        }
        Ok(eta_moment_from_gamma(&self.gamma, g, dg, self.dt))
    }

    /// Same as [`KernelTable::eta_moment`] with the caller vouching for the lengths.
    pub(crate) fn eta_moment_unchecked(&self, g: &[f64], dg: &[f64]) -> f64 {
        eta_moment_from_gamma(&self.gamma, g, dg, self.dt)
    }

    /// Kernel value γ(0) = ∫ I(ω)/ω dω.
    pub fn gamma0(&self) -> f64 {
        self.gamma.first().copied().unwrap_or(0.0)
    }

    /// CSV with columns s, gamma, nu.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "gamma", "nu"])?;
        for k in 0..self.len() {
            let s = k as f64 * self.dt;
            w.write_record([format!("{s:?}"), format!("{:?}", self.gamma[k]), format!("{:?}", self.nu[k])])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Tabulates γ and ν on the uniform grid {0, dt, …, s_max}.
///
/// Discrete baths use the exact mode sums. Continua use one fixed composite
/// Gauss–Legendre rule (panels no wider than π/(4 s_max)) shared by every
/// grid point, with cos(ω s_k) advanced by complex rotation along the grid.
pub fn tabulate_kernels(bath: &BathSpec, dt: f64, s_max: f64) -> Result<KernelTable> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(QbmError::Usage(format!("kernel step dt must be > 0, got {dt}")));
    }
    if !(s_max.is_finite() && s_max >= dt * (1.0 - 1e-9)) {
        return Err(QbmError::Usage(format!("s_max = {s_max} must be >= dt = {dt}")));
    }
    bath.validate()?;
    let n = (s_max / dt - 1e-9).ceil() as usize;
    let len = n + 1;

    match &bath.spectral {
        SpectralDensity::Discrete(modes) => {
            let gamma = (0..len)
                .map(|k| {
                    let s = k as f64 * dt;
                    modes
                        .iter()
                        .map(|m| m.spectral_weight() / m.frequency * (m.frequency * s).cos())
                        .fold(0.0, |acc, x| acc + x)
                })
                .collect();
            let nu = (0..len)
                .map(|k| {
                    let s = k as f64 * dt;
                    modes
                        .iter()
                        .map(|m| m.spectral_weight() * bath.thermal_factor(m.frequency) * (m.frequency * s).cos())
                        .fold(0.0, |acc, x| acc + x)
                })
                .collect();
            Ok(KernelTable { dt, gamma, nu })
        }
        sd => {
            let s_top = n as f64 * dt;
            let upper = sd.integration_limit();
            let max_panel = (0.5 * sd.cutoff()).min(PI / (4.0 * s_top));
            let panels = (upper / max_panel).ceil() as usize;
            let width = upper / panels as f64;
            let rule = GaussLegendre::new(6);
            let mut nodes = Vec::with_capacity(panels * 6);
            let mut weights = Vec::with_capacity(panels * 6);
            for k in 0..panels {
                rule.push_panel(k as f64 * width, (k + 1) as f64 * width, &mut nodes, &mut weights);
            }
            let wg: Vec<f64> = nodes
                .iter()
                .zip(&weights)
                .map(|(&w, &q)| q * sd.density_over_omega(w))
                .collect();
            let wn: Vec<f64> = nodes
                .iter()
                .zip(&weights)
                .map(|(&w, &q)| q * sd.density_over_omega(w) * w * bath.thermal_factor(w))
                .collect();
            let (gamma, nu) = cosine_sums(&nodes, &wg, &wn, dt, len);
            Ok(KernelTable { dt, gamma, nu })
        }
    }
}

/// Σ_k a_k cos(ω_k s_j) and Σ_k b_k cos(ω_k s_j) for s_j = j·dt, j < len.
fn cosine_sums(omega: &[f64], a: &[f64], b: &[f64], dt: f64, len: usize) -> (Vec<f64>, Vec<f64>) {
    const CHUNK: usize = 1024;
    const RESEED: usize = 256;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = omega
        .par_chunks(CHUNK)
        .zip(a.par_chunks(CHUNK))
        .zip(b.par_chunks(CHUNK))
        .map(|((om, ca), cb)| {
            let m = om.len();
            let mut sa = vec![0.0; len];
            let mut sb = vec![0.0; len];
            let mut re = vec![0.0; m];
            let mut im = vec![0.0; m];
            let rot_re: Vec<f64> = om.iter().map(|w| (w * dt).cos()).collect();
            let rot_im: Vec<f64> = om.iter().map(|w| (w * dt).sin()).collect();
            for j in 0..len {
                if j % RESEED == 0 {
                    let s = j as f64 * dt;
                    for k in 0..m {
                        let (sn, cs) = (om[k] * s).sin_cos();
                        re[k] = cs;
                        im[k] = sn;
                    }
                }
                let mut acc_a = 0.0;
                let mut acc_b = 0.0;
                for k in 0..m {
                    acc_a += ca[k] * re[k];
                    acc_b += cb[k] * re[k];
                }
                sa[j] = acc_a;
                sb[j] = acc_b;
                for k in 0..m {
                    let r = re[k] * rot_re[k] - im[k] * rot_im[k];
                    let i = re[k] * rot_im[k] + im[k] * rot_re[k];
                    re[k] = r;
                    im[k] = i;
                }
            }
            (sa, sb)
        })
        .collect();
    let mut ga = vec![0.0; len];
    let mut gb = vec![0.0; len];
    for (pa, pb) in &partials {
        for j in 0..len {
            ga[j] += pa[j];
            gb[j] += pb[j];
        }
    }
    (ga, gb)
}

/// Replaces a continuum by `n_modes` oscillators at the Gauss–Legendre nodes
/// of [0, 5Λ], with C_n²/(2 m_n ω_n) = w_n I(ω_n) and m_n = 1.
pub fn discretize_continuum(spectral: &SpectralDensity, n_modes: usize) -> Result<Vec<BathMode>> {
    spectral.validate()?;
    let lambda = match spectral {
        SpectralDensity::Discrete(_) => {
            return Err(QbmError::Usage("bath is already discrete".into()));
        }
        sd => sd.cutoff(),
    };
    if n_modes == 0 {
        return Ok(Vec::new());
    }
    let rule = GaussLegendre::new(n_modes);
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    rule.push_panel(0.0, 5.0 * lambda, &mut nodes, &mut weights);
    Ok(nodes
        .iter()
        .zip(&weights)
        .map(|(&w, &q)| {
            let weight = q * spectral.density(w).unwrap_or(0.0);
            BathMode::new((2.0 * w * weight).sqrt(), 1.0, w)
        })
        .collect())
}
