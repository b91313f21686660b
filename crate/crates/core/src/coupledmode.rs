//! Electro-acoustic coupled-mode dynamics: hybridized eigenvalues, emission
//! envelopes, the time-bin delay and the extraction efficiency.
//!
//! Rates are stored as angular quantities. [`CyclicRates`] is the only place
//! where `/2π` values enter.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HBAR: f64 = 1.054_571_817e-34;
pub const LINE_IMPEDANCE: f64 = 50.0;
/// Amplification chain gain in dB.
pub const DEFAULT_GAIN_DB: f64 = 107.4;
/// Default complex baseband sample interval (250 MS/s).
pub const DEFAULT_DT: f64 = 4e-9;
/// Default early/late separation used by the pipeline.
pub const DEFAULT_DELAY: f64 = 279e-9;

/// Minimum grid span, in units of the envelope decay time `4/(κ_m+κ_mw)`.
const MIN_DECAY_TIMES: f64 = 5.0;
const RESIDUAL_ENERGY: f64 = 1e-6;
const MAX_RK4_STEPS: usize = 50_000_000;

/// Rates in cyclic units (Hz), as quoted in device tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CyclicRates {
    pub f_m: f64,
    pub g_pe: f64,
    pub kappa_m: f64,
    pub kappa_e_mw: f64,
    pub kappa_i_mw: f64,
}

impl Default for CyclicRates {
    fn default() -> Self {
        CyclicRates {
            f_m: 5.004e9,
            g_pe: 1.2e6,
            kappa_m: 0.15e6,
            kappa_e_mw: 1.2e6,
            kappa_i_mw: 0.55e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledModeRates {
    pub omega_m: f64,
    pub g_pe: f64,
    pub kappa_m: f64,
    pub kappa_e_mw: f64,
    pub kappa_i_mw: f64,
}

impl Default for CoupledModeRates {
    fn default() -> Self {
        CoupledModeRates::from_cyclic(&CyclicRates::default()).expect("reference rates are valid")
    }
}

impl CoupledModeRates {
    pub fn new(omega_m: f64, g_pe: f64, kappa_m: f64, kappa_e_mw: f64, kappa_i_mw: f64) -> Result<Self> {
        let rates = CoupledModeRates {
            omega_m,
            g_pe,
            kappa_m,
            kappa_e_mw,
            kappa_i_mw,
        };
        rates.validate()?;
        Ok(rates)
    }

    pub fn from_cyclic(c: &CyclicRates) -> Result<Self> {
        CoupledModeRates::new(
            TAU * c.f_m,
            TAU * c.g_pe,
            TAU * c.kappa_m,
            TAU * c.kappa_e_mw,
            TAU * c.kappa_i_mw,
        )
    }

    pub fn to_cyclic(&self) -> CyclicRates {
        CyclicRates {
            f_m: self.omega_m / TAU,
            g_pe: self.g_pe / TAU,
            kappa_m: self.kappa_m / TAU,
            kappa_e_mw: self.kappa_e_mw / TAU,
            kappa_i_mw: self.kappa_i_mw / TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("omega_m", self.omega_m),
            ("g_pe", self.g_pe),
            ("kappa_m", self.kappa_m),
            ("kappa_e_mw", self.kappa_e_mw),
            ("kappa_i_mw", self.kappa_i_mw),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(
                    name,
                    format!("rate must be finite and nonnegative, got {v}"),
                ));
            }
        }
        Ok(())
    }

    pub fn kappa_mw(&self) -> f64 {
        self.kappa_e_mw + self.kappa_i_mw
    }

    /// Amplitude decay rate shared by both hybridized modes, `(κ_m+κ_mw)/4`.
    pub fn decay(&self) -> f64 {
        (self.kappa_m + self.kappa_mw()) / 4.0
    }

    pub fn strongly_coupled(&self) -> bool {
        2.0 * self.g_pe > self.kappa_mw() && 2.0 * self.g_pe > self.kappa_m
    }
}

/// `(λ₊, λ₋)` including the carrier term `iω_m`.
pub fn eigenvalues(rates: &CoupledModeRates) -> (C64, C64) {
    let (p, m) = demodulated_eigenvalues(rates);
    let carrier = C64::new(0.0, rates.omega_m);
    (p + carrier, m + carrier)
}

fn demodulated_eigenvalues(rates: &CoupledModeRates) -> (C64, C64) {
    let mid = C64::new(-rates.decay(), 0.0);
    let detune = (rates.kappa_m - rates.kappa_mw()) / 4.0;
    let root = C64::new(detune * detune - rates.g_pe * rates.g_pe, 0.0).sqrt();
    (mid + root, mid - root)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", "sample interval must be positive"));
        }
        if n < 2 {
            return Err(Error::param("n", "grid needs at least two samples"));
        }
        if !t0.is_finite() {
            return Err(Error::param("t0", "start time must be finite"));
        }
        Ok(TimeGrid { t0, dt, n })
    }

    /// Grid from `t = 0` spanning twelve decay times of the envelope.
    pub fn for_rates(rates: &CoupledModeRates, dt: f64) -> Result<Self> {
        let gamma = rates.decay();
        if gamma <= 0.0 {
            return Err(Error::param("rates", "at least one damping rate must be positive"));
        }
        let n = (12.0 / gamma / dt).ceil() as usize + 1;
        TimeGrid::new(0.0, dt, n)
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.n - 1)
    }
}

/// Uniformly sampled complex waveform. Used both for envelopes and records.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub t0: f64,
    pub dt: f64,
    pub samples: Vec<C64>,
}

impl Waveform {
    pub fn zeros(grid: TimeGrid) -> Self {
        Waveform {
            t0: grid.t0,
            dt: grid.dt,
            samples: vec![C64::new(0.0, 0.0); grid.n],
        }
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            t0: self.t0,
            dt: self.dt,
            n: self.samples.len(),
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Linear interpolation; zero outside the sampled span.
    pub fn at(&self, t: f64) -> C64 {
        let x = (t - self.t0) / self.dt;
        let n = self.samples.len();
        if !(x >= 0.0) || x > (n - 1) as f64 {
            return C64::new(0.0, 0.0);
        }
        let i = (x.floor() as usize).min(n - 2);
        let frac = x - i as f64;
        self.samples[i] * (1.0 - frac) + self.samples[i + 1] * frac
    }

    /// Trapezoidal `∫|w|² dt`.
    pub fn energy(&self) -> f64 {
        trapezoid(self.samples.iter().map(|z| z.norm_sqr()), self.dt)
    }

    /// Add `amplitude · f(t - delay)`, with `f` interpolated onto this grid.
    pub fn add_scaled(&mut self, f: &Envelope, amplitude: C64, delay: f64) {
        for i in 0..self.samples.len() {
            let t = self.time(i);
            self.samples[i] += amplitude * f.wave.at(t - delay);
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,re,im")?;
        for (i, z) in self.samples.iter().enumerate() {
            writeln!(out, "{:e},{:e},{:e}", self.time(i), z.re, z.im)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with('t')) {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if cols.len() != 3 {
                return Err(Error::Format(format!("line {}: expected 3 columns", lineno + 1)));
            }
            times.push(cols[0]);
            samples.push(C64::new(cols[1], cols[2]));
        }
        if samples.len() < 2 {
            return Err(Error::Format("waveform needs at least two samples".into()));
        }
        let dt = times[1] - times[0];
        if !(dt > 0.0) {
            return Err(Error::Format("time column must increase".into()));
        }
        for (i, t) in times.iter().enumerate() {
            if ((t - times[0]) - i as f64 * dt).abs() > 1e-6 * dt {
                return Err(Error::Format(format!("non-uniform sampling at row {}", i + 1)));
            }
        }
        Ok(Waveform {
            t0: times[0],
            dt,
            samples,
        })
    }
}

/// Unit-norm emission envelope on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub wave: Waveform,
}

impl Envelope {
    pub fn t0(&self) -> f64 {
        self.wave.t0
    }

    pub fn dt(&self) -> f64 {
        self.wave.dt
    }

    pub fn samples(&self) -> &[C64] {
        &self.wave.samples
    }

    pub fn norm(&self) -> f64 {
        self.wave.energy()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        self.wave.write_csv(out)
    }

    /// Reads a waveform and rescales it to unit norm.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut wave = Waveform::read_csv(input)?;
        let e = wave.energy();
        if !(e > 0.0) {
            return Err(Error::Format("envelope has zero norm".into()));
        }
        let c = 1.0 / e.sqrt();
        wave.samples.iter_mut().for_each(|z| *z *= c);
        Ok(Envelope { wave })
    }
}

fn trapezoid(values: impl Iterator<Item = f64>, dt: f64) -> f64 {
    let mut sum = 0.0;
    let mut first = None;
    let mut last = 0.0;
    for v in values {
        if first.is_none() {
            first = Some(v);
        }
        sum += v;
        last = v;
    }
    match first {
        None => 0.0,
        Some(f) => (sum - 0.5 * (f + last)) * dt,
    }
}

fn trapezoid_c(values: impl Iterator<Item = C64>, dt: f64) -> C64 {
    let v: Vec<C64> = values.collect();
    if v.is_empty() {
        return C64::new(0.0, 0.0);
    }
    let sum: C64 = v.iter().sum();
    (sum - (v[0] + v[v.len() - 1]) * 0.5) * dt
}

/// `f(t) = c Θ(t)(e^{λ₊t} − e^{λ₋t})`, normalized on the grid.
///
/// With `demodulated` the carrier `e^{iω_m t}` is dropped.
pub fn envelope(rates: &CoupledModeRates, grid: TimeGrid, demodulated: bool) -> Result<Envelope> {
    rates.validate()?;
    let gamma = rates.decay();
    if gamma <= 0.0 {
        return Err(Error::param("rates", "at least one damping rate must be positive"));
    }
    let (lp, lm) = if demodulated {
        demodulated_eigenvalues(rates)
    } else {
        eigenvalues(rates)
    };
    let raw: Vec<C64> = (0..grid.n)
        .map(|i| {
            let t = grid.time(i);
            if t < 0.0 {
                C64::new(0.0, 0.0)
            } else {
                (lp * t).exp() - (lm * t).exp()
            }
        })
        .collect();
    let mut wave = Waveform {
        t0: grid.t0,
        dt: grid.dt,
        samples: raw,
    };
    let energy = wave.energy();
    if grid.end() < MIN_DECAY_TIMES / gamma || !(energy > 0.0) {
        let total = analytic_norm(rates).unwrap_or(f64::INFINITY);
        return Err(Error::GridCoverage {
            captured: energy / total,
        });
    }
    let c = 1.0 / energy.sqrt();
    wave.samples.iter_mut().for_each(|z| *z *= c);
    Ok(Envelope { wave })
}

/// `∫₀^∞ |e^{λ₊t} − e^{λ₋t}|² dt` for the unnormalized envelope.
pub fn analytic_norm(rates: &CoupledModeRates) -> Result<f64> {
    let (lp, lm) = demodulated_eigenvalues(rates);
    if !(lp.re < 0.0 && lm.re < 0.0) {
        return Err(Error::Undefined("envelope norm without damping"));
    }
    let cross = 1.0 / (lp + lm.conj());
    Ok(-0.5 / lp.re - 0.5 / lm.re + 2.0 * cross.re)
}

/// Closed-form `∫ f*(t) f(t − delay) dt` for the unit-norm demodulated
/// envelope, `delay ≥ 0`.
pub fn analytic_overlap(rates: &CoupledModeRates, delay: f64) -> Result<C64> {
    if !(delay >= 0.0) {
        return Err(Error::param("delay", "must be nonnegative"));
    }
    let norm = analytic_norm(rates)?;
    let (lp, lm) = demodulated_eigenvalues(rates);
    let terms = [(lp, 1.0), (lm, -1.0)];
    let mut acc = C64::new(0.0, 0.0);
    for &(a, sa) in &terms {
        for &(b, sb) in &terms {
            let ac = a.conj();
            acc -= (ac * delay).exp() / (ac + b) * (sa * sb);
        }
    }
    Ok(acc / norm)
}

/// Trapezoidal `∫ f*(t) f(t − delay) dt` on the envelope's own grid, with the
/// shifted copy linearly interpolated.
pub fn overlap(f: &Envelope, delay: f64) -> C64 {
    let w = &f.wave;
    trapezoid_c(
        (0..w.samples.len()).map(|i| w.samples[i].conj() * w.at(w.time(i) - delay)),
        w.dt,
    )
}

/// `π/|λ₊ − λ₋|`.
pub fn swap_delay(rates: &CoupledModeRates) -> Result<f64> {
    let (lp, lm) = demodulated_eigenvalues(rates);
    let gap = (lp - lm).norm();
    let scale = rates.g_pe.max(rates.kappa_m).max(rates.kappa_mw());
    if gap <= 1e-12 * scale || gap == 0.0 {
        return Err(Error::DegenerateEigenvalues);
    }
    Ok(PI / gap)
}

/// Delay at the first local minimum of `|⟨f(t), f(t−T)⟩|`, with the overlap
/// magnitude there.
pub fn orthogonal_delay(rates: &CoupledModeRates) -> Result<(f64, f64)> {
    let gamma = rates.decay();
    if gamma <= 0.0 {
        return Err(Error::param("rates", "at least one damping rate must be positive"));
    }
    let mag = |t: f64| analytic_overlap(rates, t).map(|z| z.norm());
    let span = 12.0 / gamma;
    let steps = 4000;
    let h = span / steps as f64;
    let mut prev = mag(0.0)?;
    let mut cur = mag(h)?;
    for i in 2..=steps {
        let next = mag(i as f64 * h)?;
        if cur < prev && cur <= next {
            // Golden-section refinement on [t_{i-2}, t_i].
            let (mut a, mut b) = ((i - 2) as f64 * h, i as f64 * h);
            let r = 0.5 * (5f64.sqrt() - 1.0);
            let mut c = b - r * (b - a);
            let mut d = a + r * (b - a);
            let (mut fc, mut fd) = (mag(c)?, mag(d)?);
            for _ in 0..100 {
                if fc < fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - r * (b - a);
                    fc = mag(c)?;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + r * (b - a);
                    fd = mag(d)?;
                }
            }
            let t = 0.5 * (a + b);
            return Ok((t, mag(t)?));
        }
        prev = cur;
        cur = next;
    }
    Err(Error::Undefined("orthogonal delay for overdamped rates"))
}

/// Fraction of an initial acoustic excitation emitted through `κ_e,mw`.
///
/// Integrates `ȧ = −κ_m/2·a − i g b`, `ḃ = −κ_mw/2·b − i g a` (rotating
/// frame) with fixed-step RK4, carrying the emitted energy as a third state.
pub fn extraction_efficiency(rates: &CoupledModeRates) -> Result<f64> {
    rates.validate()?;
    let kmw = rates.kappa_mw();
    let g = rates.g_pe;
    let mut h = (1.0 / (50.0 * g)).min(1.0 / (50.0 * kmw));
    if !h.is_finite() {
        h = 1.0 / (50.0 * rates.kappa_m);
    }
    if !h.is_finite() {
        return Err(Error::IntegrationHorizon {
            horizon: f64::INFINITY,
            residual: 1.0,
        });
    }
    let ig = C64::new(0.0, g);
    let deriv = |a: C64, b: C64| -> (C64, C64, f64) {
        (
            -0.5 * rates.kappa_m * a - ig * b,
            -0.5 * kmw * b - ig * a,
            rates.kappa_e_mw * b.norm_sqr(),
        )
    };
    let (mut a, mut b, mut out) = (C64::new(1.0, 0.0), C64::new(0.0, 0.0), 0.0);
    for _ in 0..MAX_RK4_STEPS {
        let (a1, b1, e1) = deriv(a, b);
        let (a2, b2, e2) = deriv(a + a1 * (h / 2.0), b + b1 * (h / 2.0));
        let (a3, b3, e3) = deriv(a + a2 * (h / 2.0), b + b2 * (h / 2.0));
        let (a4, b4, e4) = deriv(a + a3 * h, b + b3 * h);
        a += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0);
        b += (b1 + b2 * 2.0 + b3 * 2.0 + b4) * (h / 6.0);
        out += (e1 + 2.0 * e2 + 2.0 * e3 + e4) * (h / 6.0);
        if a.norm_sqr() + b.norm_sqr() < RESIDUAL_ENERGY {
            return Ok(out.clamp(0.0, 1.0));
        }
    }
    Err(Error::IntegrationHorizon {
        horizon: h * MAX_RK4_STEPS as f64,
        residual: a.norm_sqr() + b.norm_sqr(),
    })
}

/// `S(τ) = ∫ f*(t − τ) V(t) dt` by the trapezoidal rule.
///
/// `τ` is snapped to the nearest record sample; the envelope must then fit
/// entirely inside the record.
pub fn matched_filter(record: &Waveform, f: &Envelope, tau: f64) -> Result<C64> {
    let fw = &f.wave;
    if ((record.dt - fw.dt) / fw.dt).abs() > 1e-9 {
        return Err(Error::DimensionMismatch(format!(
            "record dt {} differs from envelope dt {}",
            record.dt, fw.dt
        )));
    }
    let shift = ((tau + fw.t0 - record.t0) / record.dt).round();
    let len = fw.samples.len();
    let available = record.samples.len();
    if shift < 0.0 || shift as usize + len > available {
        let needed = (shift.abs() as usize).saturating_add(len);
        return Err(Error::EnvelopeSupport { needed, available });
    }
    let s = shift as usize;
    Ok(trapezoid_c(
        (0..len).map(|j| fw.samples[j].conj() * record.samples[s + j]),
        record.dt,
    ))
}

/// Photon number corresponding to a filtered amplitude at the amplifier output.
pub fn quanta(s: C64, gain_db: f64, omega_m: f64) -> f64 {
    s.norm_sqr() / quanta_scale(gain_db, omega_m)
}

/// `2 Z₀ G ħ ω_m`, the `|S|²` of one quantum.
pub fn quanta_scale(gain_db: f64, omega_m: f64) -> f64 {
    2.0 * LINE_IMPEDANCE * 10f64.powf(gain_db / 10.0) * HBAR * omega_m
}
