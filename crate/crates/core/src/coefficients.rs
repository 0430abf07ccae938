//! Coefficients A, B, C, D of the reduced Wigner equation
//!
//!   ∂W/∂t = −(p/M)∂W/∂q + (MΩ² + A) q ∂W/∂p + B ∂(pW)/∂p + C ∂²W/∂q∂p + D ∂²W/∂p²
//!
//! in three flavours: exact (from the elementary functions of the memory
//! equation), weak coupling (second order in the system–bath coupling), and
//! the Ohmic high-temperature Fokker–Planck constants.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{tabulate_kernels, BathSpec, KernelTable, SpectralDensity};
use crate::elementary::{SolverOptions, SystemParams, VolterraPair};
use crate::error::{QbmError, Result};
use crate::quadrature::trap_weight;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub t: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
}

impl CoefficientSet {
    pub fn zero(t: f64) -> Self {
        CoefficientSet {
            t,
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    /// Frequency-shift coefficient for the drift; an infinite A marks the
    /// renormalized Ohmic limit where Ω_ren replaces Ω.
    pub fn has_renormalized_shift(&self) -> bool {
        self.a.is_infinite()
    }
}

/// Coefficients in master-equation form: δΩ², Γ and the products Γf, Γh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpzCoefficients {
    pub t: f64,
    pub delta_omega2: f64,
    pub gamma: f64,
    pub gamma_f: f64,
    pub gamma_h: f64,
}

impl HpzCoefficients {
    pub fn from_set(set: &CoefficientSet, mass: f64, hbar: f64) -> Self {
        HpzCoefficients {
            t: set.t,
            delta_omega2: set.a / mass,
            gamma: set.b / 2.0,
            gamma_f: set.c / hbar,
            gamma_h: set.d / (hbar * mass),
        }
    }

    pub fn to_set(&self, mass: f64, hbar: f64) -> CoefficientSet {
        CoefficientSet {
            t: self.t,
            a: mass * self.delta_omega2,
            b: 2.0 * self.gamma,
            c: hbar * self.gamma_f,
            d: hbar * mass * self.gamma_h,
        }
    }

    /// Anomalous diffusion f = Γf/Γ, defined only for |B| > 1e-10.
    pub fn f(&self) -> Option<f64> {
        (2.0 * self.gamma.abs() > 1e-10).then(|| self.gamma_f / self.gamma)
    }

    /// Normal diffusion h = Γh/Γ, defined only for |B| > 1e-10.
    pub fn h(&self) -> Option<f64> {
        (2.0 * self.gamma.abs() > 1e-10).then(|| self.gamma_h / self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    WeakCoupling,
    OhmicFp,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Exact => "exact",
            Provenance::WeakCoupling => "weak_coupling",
            Provenance::OhmicFp => "ohmic_fp",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Provenance::Exact),
            "weak_coupling" => Ok(Provenance::WeakCoupling),
            "ohmic_fp" => Ok(Provenance::OhmicFp),
            other => Err(QbmError::Io(format!("unknown provenance {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Exact,
    Weak,
    OhmicFp,
}

impl Mode {
    pub fn provenance(&self) -> Provenance {
        match self {
            Mode::Exact => Provenance::Exact,
            Mode::Weak => Provenance::WeakCoupling,
            Mode::OhmicFp => Provenance::OhmicFp,
        }
    }
}

/// Uniform grid {0, step, …, (count − 1)·step}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub step: f64,
    pub count: usize,
}

impl TimeGrid {
    pub fn new(step: f64, t_max: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(QbmError::Config(format!("grid step must be > 0, got {step}")));
        }
        if !(t_max >= 0.0 && t_max.is_finite()) {
            return Err(QbmError::Config(format!("t_max must be finite and >= 0, got {t_max}")));
        }
        let count = (t_max / step + 1e-9).floor() as usize + 1;
        Ok(TimeGrid { step, count })
    }

    pub fn single_zero() -> Self {
        TimeGrid { step: 1.0, count: 1 }
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    pub fn t_max(&self) -> f64 {
        self.time(self.count - 1)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|k| self.time(k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub coefficients: Option<CoefficientSet>,
    /// Reason a row carries no numbers.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTrajectory {
    pub step: f64,
    pub rows: Vec<TrajectoryRow>,
    pub provenance: Provenance,
    pub mass: f64,
    pub hbar: f64,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    t: f64,
    #[serde(rename = "A")]
    a: Option<f64>,
    #[serde(rename = "B")]
    b: Option<f64>,
    #[serde(rename = "C")]
    c: Option<f64>,
    #[serde(rename = "D")]
    d: Option<f64>,
    #[serde(rename = "delta_Omega2")]
    delta_omega2: Option<f64>,
    #[serde(rename = "Gamma")]
    gamma: Option<f64>,
    #[serde(rename = "Gamma_f")]
    gamma_f: Option<f64>,
    #[serde(rename = "Gamma_h")]
    gamma_h: Option<f64>,
    provenance: Provenance,
    flag: Option<String>,
}

const CSV_HEADER: [&str; 11] = [
    "t",
    "A",
    "B",
    "C",
    "D",
    "delta_Omega2",
    "Gamma",
    "Gamma_f",
    "Gamma_h",
    "provenance",
    "flag",
];

impl CoefficientTrajectory {
    pub fn t_max(&self) -> f64 {
        self.rows.last().map(|r| r.t).unwrap_or(0.0)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &TrajectoryRow> {
        self.rows.iter().filter(|r| r.coefficients.is_none())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for row in &self.rows {
            let mut rec = vec![format!("{:?}", row.t)];
            match &row.coefficients {
                Some(c) => {
                    let h = HpzCoefficients::from_set(c, self.mass, self.hbar);
                    for x in [c.a, c.b, c.c, c.d, h.delta_omega2, h.gamma, h.gamma_f, h.gamma_h] {
                        rec.push(format!("{x:?}"));
                    }
                }
                None => rec.extend(std::iter::repeat_n(String::new(), 8)),
            }
            rec.push(self.provenance.as_str().to_string());
            rec.push(row.flag.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Parses the CSV wire format. Mass and ħ are recovered from the
    /// redundant master-equation columns where possible.
    pub fn read_csv<R: Read>(input: R, mass: f64, hbar: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.iter().take(10).ne(CSV_HEADER.iter().take(10).copied()) {
            return Err(QbmError::Io("unexpected coefficient CSV header".into()));
        }
        let mut rows = Vec::new();
        let mut provenance = None;
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<Option<f64>> {
                let f = rec.get(i).unwrap_or("");
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>()
                        .map(Some)
                        .map_err(|e| QbmError::Io(format!("bad number {f:?}: {e}")))
                }
            };
            let t = num(0)?.ok_or_else(|| QbmError::Io("missing time".into()))?;
            let p = Provenance::parse(rec.get(9).unwrap_or(""))?;
            if *provenance.get_or_insert(p) != p {
                return Err(QbmError::Io("mixed provenance in coefficient file".into()));
            }
            let coefficients = match (num(1)?, num(2)?, num(3)?, num(4)?) {
                (Some(a), Some(b), Some(c), Some(d)) => Some(CoefficientSet { t, a, b, c, d }),
                _ => None,
            };
            let flag = rec.get(10).filter(|s| !s.is_empty()).map(str::to_string);
            rows.push(TrajectoryRow { t, coefficients, flag });
        }
        if rows.is_empty() {
            return Err(QbmError::Io("empty coefficient file".into()));
        }
        let step = if rows.len() > 1 { rows[1].t - rows[0].t } else { 0.0 };
        Ok(CoefficientTrajectory {
            step,
            rows,
            provenance: provenance.unwrap_or(Provenance::Exact),
            mass,
            hbar,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let recs: Vec<JsonRecord> = self
            .rows
            .iter()
            .map(|row| {
                let c = row.coefficients;
                let h = c.map(|c| HpzCoefficients::from_set(&c, self.mass, self.hbar));
                let fin = |x: f64| x.is_finite().then_some(x);
                JsonRecord {
                    t: row.t,
                    a: c.and_then(|c| fin(c.a)),
                    b: c.map(|c| c.b),
                    c: c.map(|c| c.c),
                    d: c.map(|c| c.d),
                    delta_omega2: h.and_then(|h| fin(h.delta_omega2)),
                    gamma: h.map(|h| h.gamma),
                    gamma_f: h.map(|h| h.gamma_f),
                    gamma_h: h.map(|h| h.gamma_h),
                    provenance: self.provenance,
                    flag: row.flag.clone(),
                }
            })
            .collect();
        serde_json::to_string_pretty(&recs).map_err(|e| QbmError::Io(e.to_string()))
    }
}

/// Exact coefficients at every grid time up to a horizon, sharing one
/// integration of the initial-value pair.
pub struct ExactEngine<'a> {
    sys: SystemParams,
    kernels: &'a KernelTable,
    pair: VolterraPair,
    hbar: f64,
    opts: SolverOptions,
}

impl<'a> ExactEngine<'a> {
    /// Integrates the pair over the whole kernel table.
    pub fn new(sys: &SystemParams, kernels: &'a KernelTable, hbar: f64, opts: &SolverOptions) -> Result<Self> {
        if kernels.len() < 2 {
            return Err(QbmError::Usage("kernel table must hold at least two samples".into()));
        }
        let pair = crate::elementary::solve_ivp_pair(sys, kernels, kernels.s_max(), kernels.dt, opts)?;
        Ok(ExactEngine {
            sys: *sys,
            kernels,
            pair,
            hbar,
            opts: *opts,
        })
    }

    pub fn pair(&self) -> &VolterraPair {
        &self.pair
    }

    pub fn ds(&self) -> f64 {
        self.kernels.dt
    }

    pub fn at(&self, t: f64) -> Result<CoefficientSet> {
        self.at_index(self.kernels.index_of(t)?)
    }

    pub fn at_index(&self, n: usize) -> Result<CoefficientSet> {
        let h = self.kernels.dt;
        let t = n as f64 * h;
        if n == 0 {
            return Ok(CoefficientSet::zero(0.0));
        }
        if n > self.pair.last_index() {
            return Err(QbmError::Usage(format!("time {t} beyond solved horizon")));
        }
        let p = &self.pair;
        if p.wronskian_vanishes(n, self.opts.singular_tol) {
            return Err(QbmError::CoefficientSingularity { t, value: p.wronskian(n) });
        }
        let m = self.sys.mass;
        let hbar = self.hbar;
        let w = p.wronskian(n);
        let (v1t, dv1t, v2t, dv2t) = (p.v1[n], p.dv1[n], p.v2[n], p.dv2[n]);

        // final-value basis: a(t)=1, ȧ(t)=0, b(t)=0, ḃ(t)=1
        let a: Vec<f64> = (0..=n).map(|j| (dv2t * p.v1[j] - dv1t * p.v2[j]) / w).collect();
        let da: Vec<f64> = (0..=n).map(|j| (dv2t * p.dv1[j] - dv1t * p.dv2[j]) / w).collect();
        let b: Vec<f64> = (0..=n).map(|j| (v1t * p.v2[j] - v2t * p.v1[j]) / w).collect();
        let db: Vec<f64> = (0..=n).map(|j| (v1t * p.dv2[j] - v2t * p.dv1[j]) / w).collect();

        let k = self.kernels;
        let coef_a = 2.0 * k.eta_moment_unchecked(&a, &da);
        let coef_b = 2.0 / m * k.eta_moment_unchecked(&b, &db);

        let nu = &k.nu;
        let wt: Vec<f64> = (0..=n).map(|j| trap_weight(j, n, h)).collect();
        // resolvent weighted at λ_j: v₂(t − λ_j), v̇₂(t − λ_j)
        let rv: Vec<f64> = (0..=n).map(|j| wt[j] * p.v2[n - j]).collect();
        let rd: Vec<f64> = (0..=n).map(|j| wt[j] * p.dv2[n - j]).collect();
        let c1: f64 = hbar / m * (0..=n).map(|j| rv[j] * nu[n - j]).sum::<f64>();
        let d1: f64 = hbar * (0..=n).map(|j| rd[j] * nu[n - j]).sum::<f64>();

        // hv(τ) = ∫ dλ v₂(t−λ) ν(λ−τ), hd likewise with v̇₂
        let mut hv = vec![0.0; n + 1];
        let mut hd = vec![0.0; n + 1];
        for i in 0..=n {
            let (mut sv, mut sd) = (0.0, 0.0);
            for j in 0..i {
                let x = nu[i - j];
                sv += rv[j] * x;
                sd += rd[j] * x;
            }
            for j in i..=n {
                let x = nu[j - i];
                sv += rv[j] * x;
                sd += rd[j] * x;
            }
            hv[i] = sv;
            hd[i] = sd;
        }
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let (cv1, cv2) = (dot(&rv, &hv), dot(&rd, &hv));
        let (cd1, cd2) = (dot(&rv, &hd), dot(&rd, &hd));

        // running convolutions ∫₀^s v₂(s−τ)g(τ)dτ and ∫₀^s v̇₂(s−τ)g(τ)dτ
        let mut xv = vec![0.0; n + 1];
        let mut dxv = vec![0.0; n + 1];
        let mut xd = vec![0.0; n + 1];
        let mut dxd = vec![0.0; n + 1];
        for i in 1..=n {
            let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
            for kk in 0..=i {
                let (v, dv) = (p.v2[i - kk], p.dv2[i - kk]);
                s1 += v * hv[kk];
                s2 += dv * hv[kk];
                s3 += v * hd[kk];
                s4 += dv * hd[kk];
            }
            let (v0, dv0, vi, dvi) = (p.v2[0], p.dv2[0], p.v2[i], p.dv2[i]);
            s1 -= 0.5 * (vi * hv[0] + v0 * hv[i]);
            s2 -= 0.5 * (dvi * hv[0] + dv0 * hv[i]);
            s3 -= 0.5 * (vi * hd[0] + v0 * hd[i]);
            s4 -= 0.5 * (dvi * hd[0] + dv0 * hd[i]);
            xv[i] = h * s1;
            dxv[i] = h * s2;
            xd[i] = h * s3;
            dxd[i] = h * s4;
        }
        for j in 0..=n {
            xv[j] -= a[j] * cv1 + b[j] * cv2;
            dxv[j] -= da[j] * cv1 + db[j] * cv2;
            xd[j] -= a[j] * cd1 + b[j] * cd2;
            dxd[j] -= da[j] * cd1 + db[j] * cd2;
        }
        let coef_c = c1 - 2.0 * hbar / (m * m) * k.eta_moment_unchecked(&xv, &dxv);
        let coef_d = d1 - 2.0 * hbar / m * k.eta_moment_unchecked(&xd, &dxd);
        Ok(CoefficientSet {
            t,
            a: coef_a,
            b: coef_b,
            c: coef_c,
            d: coef_d,
        })
    }
}

impl ExactEngine<'_> {
    /// Exact coefficients at every solved grid time, O(n²) in total.
    ///
    /// A and B come from the same boundary-value construction as
    /// [`ExactEngine::at_index`]. C and D are matched against the noise part
    /// of the reduced covariance,
    ///
    ///   N_xy(t) = ∫₀^t∫₀^t x(u) y(u′) ν(u − u′) du du′,  x, y ∈ {v₂/M, v̇₂},
    ///
    /// whose time derivatives need only the running transforms
    /// J[g](t) = ∫₀^t g(u) ν(t − u) du. Entries are `None` where the
    /// coefficients are singular.
    pub fn dense(&self) -> Vec<Option<CoefficientSet>> {
        let p = &self.pair;
        let k = self.kernels;
        let h = k.dt;
        let m = self.sys.mass;
        let hbar = self.hbar;
        let omega2 = self.sys.bare_omega2(k.gamma0());
        let last = p.last_index();
        let (g, nu) = (&k.gamma, &k.nu);

        // per time: E[v₁], E[v₂] (η-moments) and J[v₂], J[v̇₂]
        let sums: Vec<[f64; 4]> = (0..=last)
            .into_par_iter()
            .map(|n| {
                if n == 0 {
                    return [0.0; 4];
                }
                let (mut e1, mut e2, mut j2, mut jd) = (0.0, 0.0, 0.0, 0.0);
                for j in 0..=n {
                    let w = trap_weight(j, n, h);
                    let (gj, nj) = (g[n - j], nu[n - j]);
                    e1 += w * gj * p.dv1[j];
                    e2 += w * gj * p.dv2[j];
                    j2 += w * nj * p.v2[j];
                    jd += w * nj * p.dv2[j];
                }
                e1 += g[n] * p.v1[0] - g[0] * p.v1[n];
                e2 += g[n] * p.v2[0] - g[0] * p.v2[n];
                [e1, e2, j2, jd]
            })
            .collect();

        let mut out = Vec::with_capacity(last + 1);
        let (mut nqq, mut nqp, mut npp) = (0.0, 0.0, 0.0);
        let mut prev = [0.0; 3];
        for (n, &[e1, e2, j2, jd]) in sums.iter().enumerate() {
            let (v2, dv2) = (p.v2[n], p.dv2[n]);
            let rate = [
                2.0 * hbar / (m * m) * v2 * j2,
                hbar / m * (v2 * jd + dv2 * j2),
                2.0 * hbar * dv2 * jd,
            ];
            if n > 0 {
                nqq += 0.5 * h * (prev[0] + rate[0]);
                nqp += 0.5 * h * (prev[1] + rate[1]);
                npp += 0.5 * h * (prev[2] + rate[2]);
            }
            prev = rate;
            let t = n as f64 * h;
            if n == 0 {
                out.push(Some(CoefficientSet::zero(0.0)));
                continue;
            }
            if p.wronskian_vanishes(n, self.opts.singular_tol) {
                out.push(None);
                continue;
            }
            let w = p.wronskian(n);
            let a = 2.0 * (p.dv2[n] * e1 - p.dv1[n] * e2) / w;
            let b = 2.0 / m * (p.v1[n] * e2 - p.v2[n] * e1) / w;
            let stiff = m * omega2 + a;
            let c = rate[1] - npp / m + stiff * nqq + b * nqp;
            let d = 0.5 * rate[2] + stiff * nqp + b * npp;
            out.push(Some(CoefficientSet { t, a, b, c, d }));
        }
        out
    }
}

/// Exact coefficients at a single time `t`.
pub fn coefficients_exact(
    sys: &SystemParams,
    bath: &BathSpec,
    kernels: &KernelTable,
    t: f64,
    ds: f64,
    opts: &SolverOptions,
) -> Result<CoefficientSet> {
    if ((kernels.dt - ds) / ds).abs() > 1e-9 {
        return Err(QbmError::Usage(format!(
            "kernel grid step {} differs from solver step {ds}",
            kernels.dt
        )));
    }
    let n = kernels.index_of(t)?;
    if n == 0 {
        return Ok(CoefficientSet::zero(0.0));
    }
    // solve one step past t when possible so the singularity check sees both sides
    let top = (n + 1).min(kernels.len() - 1);
    let sub = KernelTable {
        dt: kernels.dt,
        gamma: kernels.gamma[..=top].to_vec(),
        nu: kernels.nu[..=top].to_vec(),
    };
    ExactEngine::new(sys, &sub, bath.hbar, opts)?.at_index(n)
}

/// Second-order (weak coupling) coefficients at time `t`.
pub fn coefficients_weak(sys: &SystemParams, kernels: &KernelTable, hbar: f64, t: f64) -> Result<CoefficientSet> {
    sys.validate()?;
    let n = kernels.index_of(t)?;
    if n == 0 {
        return Ok(CoefficientSet::zero(0.0));
    }
    let h = kernels.dt;
    let m = sys.mass;
    let omega2 = sys.bare_omega2(kernels.gamma0());
    if omega2 < 0.0 {
        return Err(QbmError::Config(format!("bare frequency squared is negative ({omega2})")));
    }
    let omega = omega2.sqrt();
    // sin(Ωs)/Ω with its Ω → 0 limit
    let sinc = |s: f64| if omega == 0.0 { s } else { (omega * s).sin() / omega };
    let g = &kernels.gamma;
    let nu = &kernels.nu;
    let t = n as f64 * h;
    let (mut gs, mut gc, mut ns, mut nc) = (0.0, 0.0, 0.0, 0.0);
    for j in 0..=n {
        let s = j as f64 * h;
        let wj = trap_weight(j, n, h);
        let (sn, cs) = (omega * s).sin_cos();
        gs += wj * g[j] * sn;
        gc += wj * g[j] * cs;
        ns += wj * nu[j] * sinc(s);
        nc += wj * nu[j] * cs;
    }
    // ∫₀^t η(s)f(s)ds = γ(t)f(t) − γ(0)f(0) − ∫₀^t γ(s)f′(s)ds
    let a = 2.0 * (g[n] * (omega * t).cos() - g[0] + omega * gs);
    let b = -2.0 / m * (g[n] * sinc(t) - gc);
    Ok(CoefficientSet {
        t,
        a,
        b,
        c: hbar / m * ns,
        d: hbar * nc,
    })
}

/// Constant Fokker–Planck coefficients B = 2γ₀, C = 0, D = 2Mγ₀k_BT. The
/// frequency shift is absorbed into Ω_ren, so A carries the sentinel −∞.
pub fn coefficients_ohmic_fp(sys: &SystemParams, gamma0: f64, temperature: f64, kb: f64) -> Result<CoefficientSet> {
    sys.validate()?;
    if sys.omega_ren().is_none() {
        return Err(QbmError::Config(
            "ohmic_fp mode needs the renormalized frequency omega_ren, not the bare omega".into(),
        ));
    }
    if !(gamma0.is_finite() && gamma0 >= 0.0) {
        return Err(QbmError::Config("gamma0 must be finite and >= 0".into()));
    }
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(QbmError::Config("temperature must be finite and >= 0".into()));
    }
    Ok(CoefficientSet {
        t: 0.0,
        a: f64::NEG_INFINITY,
        b: 2.0 * gamma0,
        c: 0.0,
        d: 2.0 * sys.mass * gamma0 * kb * temperature,
    })
}

fn ohmic_gamma0(bath: &BathSpec) -> Result<f64> {
    match bath.spectral {
        SpectralDensity::OhmicExpCutoff { gamma0, .. } | SpectralDensity::OhmicSharpCutoff { gamma0, .. } => Ok(gamma0),
        SpectralDensity::Discrete(_) => Err(QbmError::Config(
            "ohmic_fp mode needs an Ohmic spectral density".into(),
        )),
    }
}

/// Coefficients on a uniform grid of times. Rows where the exact
/// coefficients are singular are flagged and left empty.
pub fn trajectory(
    sys: &SystemParams,
    bath: &BathSpec,
    mode: Mode,
    grid: &TimeGrid,
    ds: f64,
    opts: &SolverOptions,
) -> Result<CoefficientTrajectory> {
    match mode {
        Mode::OhmicFp => trajectory_with_kernels(sys, bath, None, mode, grid, opts),
        Mode::Exact | Mode::Weak => {
            let kernels = tabulate_kernels(bath, ds, grid.t_max() + ds)?;
            trajectory_with_kernels(sys, bath, Some(&kernels), mode, grid, opts)
        }
    }
}

/// As [`trajectory`], reusing a kernel table whose step is the solver step.
pub fn trajectory_with_kernels(
    sys: &SystemParams,
    bath: &BathSpec,
    kernels: Option<&KernelTable>,
    mode: Mode,
    grid: &TimeGrid,
    opts: &SolverOptions,
) -> Result<CoefficientTrajectory> {
    sys.validate()?;
    bath.validate()?;
    let provenance = mode.provenance();
    let need_kernels = || kernels.ok_or_else(|| QbmError::Usage("kernel table required".into()));
    let rows: Vec<TrajectoryRow> = match mode {
        Mode::OhmicFp => {
            let c = coefficients_ohmic_fp(sys, ohmic_gamma0(bath)?, bath.temperature(), bath.kb)?;
            grid.times()
                .map(|t| TrajectoryRow {
                    t,
                    coefficients: Some(CoefficientSet { t, ..c }),
                    flag: None,
                })
                .collect()
        }
        Mode::Weak => {
            let k = need_kernels()?;
            grid.times()
                .collect::<Vec<_>>()
                .par_iter()
                .enumerate()
                .map(|(i, &t)| {
                    coefficients_weak(sys, k, bath.hbar, t)
                        .map(|c| TrajectoryRow { t, coefficients: Some(c), flag: None })
                        .map_err(|e| row_error(i, e))
                })
                .collect::<Result<Vec<_>>>()?
        }
        Mode::Exact => {
            let k = need_kernels()?;
            let indices = grid
                .times()
                .map(|t| k.index_of(t))
                .collect::<Result<Vec<_>>>()?;
            let engine = ExactEngine::new(sys, k, bath.hbar, opts)?;
            let dense = engine.dense();
            indices
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let t = grid.time(i);
                    let c = dense.get(n).copied().ok_or_else(|| {
                        row_error(i, QbmError::Usage(format!("time {t} beyond solved horizon")))
                    })?;
                    Ok(match c {
                        Some(c) => TrajectoryRow { t, coefficients: Some(CoefficientSet { t, ..c }), flag: None },
                        None => TrajectoryRow { t, coefficients: None, flag: Some("coefficient_singularity".into()) },
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(CoefficientTrajectory {
        step: grid.step,
        rows,
        provenance,
        mass: sys.mass,
        hbar: bath.hbar,
    })
}

fn row_error(i: usize, e: QbmError) -> QbmError {
    match e {
        QbmError::Numerical(msg) => QbmError::Numerical(format!("row {i}: {msg}")),
        QbmError::Usage(msg) => QbmError::Usage(format!("row {i}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{BathMode, Beta};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one_mode(c: f64, w: f64, beta: Beta) -> BathSpec {
        BathSpec::discrete(vec![BathMode::new(c, 1.0, w)], beta)
    }

    #[test]
    fn zero_time_and_decoupled_are_zero() {
        let sys = SystemParams::new(1.0, 1.0);
        let opts = SolverOptions::default();
        let bath = one_mode(0.4, 1.5, Beta::Finite(1.0));
        let k = tabulate_kernels(&bath, 0.01, 1.0).unwrap();
        let c = coefficients_exact(&sys, &bath, &k, 0.0, 0.01, &opts).unwrap();
        assert_eq!(c.as_array(), [0.0; 4]);

        let empty = BathSpec::new(SpectralDensity::empty(), Beta::Finite(1.0));
        let grid = TimeGrid::new(0.05, 2.0).unwrap();
        for mode in [Mode::Exact, Mode::Weak] {
            let tr = trajectory(&sys, &empty, mode, &grid, 0.01, &opts).unwrap();
            for row in &tr.rows {
                assert_eq!(row.coefficients.unwrap().as_array(), [0.0; 4]);
            }
        }
    }

    #[test]
    fn single_zero_grid() {
        let sys = SystemParams::new(1.0, 1.0);
        let bath = one_mode(0.3, 1.2, Beta::Finite(1.0));
        let tr = trajectory(&sys, &bath, Mode::Exact, &TimeGrid::single_zero(), 0.01, &SolverOptions::default()).unwrap();
        assert_eq!(tr.rows.len(), 1);
        assert_eq!(tr.rows[0].coefficients.unwrap().as_array(), [0.0; 4]);
    }

    #[test]
    fn weak_closed_form_a() {
        let bath = one_mode(0.1, 1.0, Beta::Finite(1.0));
        let ds = 0.0001;
        let k = tabulate_kernels(&bath, ds, 1.0).unwrap();
        let sys = SystemParams::new(1.0, 2.0);
        let c = coefficients_weak(&sys, &k, 1.0, 1.0).unwrap();
        // ∫₀¹ −0.01 sin s cos 2s ds = −0.005[(1 − cos 3)/3 − (1 − cos 1)]
        let exact = -0.005 * ((1.0 - 3f64.cos()) / 3.0 - (1.0 - 1f64.cos()));
        assert_relative_eq!(c.a, exact, max_relative = 1e-6);
    }

    #[test]
    fn weak_zero_temperature_empty_bath() {
        let b = BathSpec::new(SpectralDensity::empty(), Beta::Infinite);
        let k = tabulate_kernels(&b, 0.1, 2.0).unwrap();
        let c = coefficients_weak(&SystemParams::new(1.0, 0.0), &k, 1.0, 2.0).unwrap();
        assert_eq!((c.c, c.d), (0.0, 0.0));
    }

    #[test]
    fn weak_free_particle_limit_is_finite() {
        let bath = one_mode(0.2, 1.0, Beta::Finite(2.0));
        let k = tabulate_kernels(&bath, 0.01, 3.0).unwrap();
        // Ω = 0 after folding γ(0) into the renormalized value is not needed here:
        // use a bare zero frequency
        let c = coefficients_weak(&SystemParams::new(1.0, 0.0), &k, 1.0, 3.0).unwrap();
        assert!(c.as_array().iter().all(|x| x.is_finite()));
        let near = coefficients_weak(&SystemParams::new(1.0, 1e-7), &k, 1.0, 3.0).unwrap();
        assert_relative_eq!(c.b, near.b, max_relative = 1e-8);
        assert_relative_eq!(c.c, near.c, max_relative = 1e-8);
    }

    #[test]
    fn ohmic_fp_constants() {
        let sys = SystemParams::renormalized(1.0, 1.0);
        let c = coefficients_ohmic_fp(&sys, 0.5, 10.0, 1.0).unwrap();
        assert_eq!((c.b, c.c, c.d), (1.0, 0.0, 10.0));
        assert!(c.has_renormalized_shift());
        let z = coefficients_ohmic_fp(&sys, 0.0, 10.0, 1.0).unwrap();
        assert_eq!((z.b, z.c, z.d), (0.0, 0.0, 0.0));
        let bare = SystemParams::new(1.0, 1.0);
        assert!(matches!(coefficients_ohmic_fp(&bare, 0.5, 10.0, 1.0), Err(QbmError::Config(_))));
    }

    #[test]
    fn ohmic_fp_rows_constant() {
        let sys = SystemParams::renormalized(1.0, 1.0);
        let bath = BathSpec::new(
            SpectralDensity::OhmicExpCutoff { gamma0: 0.25, cutoff: 50.0, mass: 1.0 },
            Beta::Finite(0.02),
        );
        let grid = TimeGrid::new(0.5, 5.0).unwrap();
        let tr = trajectory(&sys, &bath, Mode::OhmicFp, &grid, 0.01, &SolverOptions::default()).unwrap();
        let first = tr.rows[0].coefficients.unwrap();
        for r in &tr.rows {
            let c = r.coefficients.unwrap();
            assert_eq!((c.b, c.c, c.d), (first.b, first.c, first.d));
        }
        assert_eq!(tr.provenance, Provenance::OhmicFp);
    }

    #[test]
    fn a_and_b_are_temperature_independent() {
        let sys = SystemParams::new(1.0, 1.0);
        let opts = SolverOptions::default();
        let hot = one_mode(0.4, 1.5, Beta::Finite(0.3));
        let cold = one_mode(0.4, 1.5, Beta::Finite(4.0));
        let kh = tabulate_kernels(&hot, 0.01, 2.5).unwrap();
        let kc = tabulate_kernels(&cold, 0.01, 2.5).unwrap();
        let ch = coefficients_exact(&sys, &hot, &kh, 2.0, 0.01, &opts).unwrap();
        let cc = coefficients_exact(&sys, &cold, &kc, 2.0, 0.01, &opts).unwrap();
        assert_eq!(ch.a.to_bits(), cc.a.to_bits());
        assert_eq!(ch.b.to_bits(), cc.b.to_bits());
        assert!((ch.d - cc.d).abs() > 1e-6);
    }

    #[test]
    fn continuity_under_step_halving() {
        let sys = SystemParams::new(1.0, 1.0);
        let bath = one_mode(0.4, 1.5, Beta::Finite(1.0));
        let opts = SolverOptions::default();
        let ds = 0.002;
        let k = tabulate_kernels(&bath, ds, 2.0).unwrap();
        let e = ExactEngine::new(&sys, &k, 1.0, &opts).unwrap();
        let base = 600;
        let jumps: Vec<f64> = [8usize, 4, 2]
            .iter()
            .map(|&d| {
                let x = e.at_index(base).unwrap().as_array();
                let y = e.at_index(base + d).unwrap().as_array();
                x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .collect();
        assert!(jumps[1] < jumps[0] && jumps[2] < jumps[1]);
    }

    #[test]
    fn dense_and_pointwise_agree() {
        let sys = SystemParams::new(1.0, 1.0);
        let bath = BathSpec::discrete(
            vec![BathMode::new(0.4, 1.0, 1.5), BathMode::new(0.3, 1.0, 0.6)],
            Beta::Finite(0.7),
        );
        let opts = SolverOptions::default();
        let gap = |ds: f64| {
            let k = tabulate_kernels(&bath, ds, 3.0).unwrap();
            let e = ExactEngine::new(&sys, &k, 1.0, &opts).unwrap();
            let dense = e.dense();
            let n = (2.5 / ds).round() as usize;
            let x = e.at_index(n).unwrap().as_array();
            let y = dense[n].unwrap().as_array();
            for (a, b) in x[..2].iter().zip(&y[..2]) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-3), "{a} {b}");
            }
            x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (g1, g2) = (gap(0.01), gap(0.005));
        assert!(g1 < 1e-4 && g2 < g1 / 3.0, "{g1} {g2}");
    }

    #[test]
    fn csv_round_trip_with_flag() {
        let tr = CoefficientTrajectory {
            step: 0.5,
            rows: vec![
                TrajectoryRow { t: 0.0, coefficients: Some(CoefficientSet::zero(0.0)), flag: None },
                TrajectoryRow { t: 0.5, coefficients: None, flag: Some("coefficient_singularity".into()) },
                TrajectoryRow {
                    t: 1.0,
                    coefficients: Some(CoefficientSet { t: 1.0, a: -0.1, b: 0.2, c: 1e-17, d: 3.0 }),
                    flag: None,
                },
            ],
            provenance: Provenance::Exact,
            mass: 2.0,
            hbar: 1.0,
        };
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,A,B,C,D,delta_Omega2,Gamma,Gamma_f,Gamma_h,provenance,flag\n"));
        assert!(text.contains("0.5,,,,,,,,,exact,coefficient_singularity"));
        let back = CoefficientTrajectory::read_csv(&buf[..], 2.0, 1.0).unwrap();
        assert_eq!(back.rows, tr.rows);
        let json = tr.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v[2]["delta_Omega2"], serde_json::json!(-0.05));
        assert!(v[1]["A"].is_null());
    }

    proptest! {
        #[test]
        fn hpz_round_trip(a in -1e3f64..1e3, b in -1e3f64..1e3, c in -1e3f64..1e3, d in -1e3f64..1e3,
                          m in 0.1f64..10.0, hbar in 0.1f64..3.0) {
            let set = CoefficientSet { t: 0.3, a, b, c, d };
            let back = HpzCoefficients::from_set(&set, m, hbar).to_set(m, hbar);
            for (x, y) in set.as_array().iter().zip(back.as_array()) {
                prop_assert!((x - y).abs() <= 4.0 * f64::EPSILON * x.abs().max(1e-300));
            }
        }

        #[test]
        fn f_and_h_need_dissipation(b in -1e-11f64..1e-11) {
            let h = HpzCoefficients::from_set(&CoefficientSet { t: 0.0, a: 0.0, b, c: 1.0, d: 1.0 }, 1.0, 1.0);
            prop_assert!(h.f().is_none() && h.h().is_none());
        }
    }
}
