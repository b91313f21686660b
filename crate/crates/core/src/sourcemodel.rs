//! Conditional microwave states of the heralded source and the observables
//! derived from them.
//!
//! A herald photon-adds a two-mode thermal state, which then passes a noisy
//! beamsplitter. Intensities, visibilities, cross-correlations and the
//! Bell-fidelity bound are computed from those states.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fockspace::{
    annihilation, apply_jump, lossy_channel, normal_moment, photon_add, thermal_state, DensityMatrix, FockDims,
    FockOperator, Mode,
};

/// Minimum extra Fock levels per mode used while building conditional states.
pub const WORKING_HEADROOM: usize = 8;
const MAX_WORKING_LEVELS: usize = 48;
/// Default optical and microwave analysis phase for the X basis.
pub const DEFAULT_PHI: f64 = 0.56 * PI;

/// 2×2 matrix indexed `[herald][detected mode]`.
pub type Matrix2 = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    pub eta_ext: f64,
    /// Thermal occupations present before the pair is created.
    pub n_i_e: f64,
    pub n_i_l: f64,
    /// Occupation of the loss-port bath; the mode gains `(1 - η) n_d` quanta.
    pub n_d_e: f64,
    pub n_d_l: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        let eta = 0.42;
        NoiseParams {
            eta_ext: eta,
            n_i_e: 0.05 / eta,
            n_i_l: 0.10 / eta,
            n_d_e: 0.029 / (1.0 - eta),
            n_d_l: 0.029 / (1.0 - eta),
        }
    }
}

impl NoiseParams {
    pub fn noiseless() -> Self {
        NoiseParams {
            eta_ext: 1.0,
            n_i_e: 0.0,
            n_i_l: 0.0,
            n_d_e: 0.0,
            n_d_l: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta_ext) {
            return Err(Error::param("eta_ext", format!("{} outside [0, 1]", self.eta_ext)));
        }
        for (name, v) in [
            ("n_i_e", self.n_i_e),
            ("n_i_l", self.n_i_l),
            ("n_d_e", self.n_d_e),
            ("n_d_l", self.n_d_l),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(name, "occupation must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Closed-form `⟨Ĉ_j†Ĉ_j⟩` without a herald: `η n̄_i + (1-η) n̄_d`.
    pub fn unconditional_intensity(&self, which: Mode) -> f64 {
        let (ni, nd) = match which {
            Mode::Early => (self.n_i_e, self.n_d_e),
            Mode::Late => (self.n_i_l, self.n_d_l),
        };
        self.eta_ext * ni + (1.0 - self.eta_ext) * nd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeraldKind {
    Early,
    Late,
    Plus,
    Minus,
}

impl HeraldKind {
    pub const ALL: [HeraldKind; 4] = [HeraldKind::Early, HeraldKind::Late, HeraldKind::Plus, HeraldKind::Minus];

    pub fn name(&self) -> &'static str {
        match self {
            HeraldKind::Early => "early",
            HeraldKind::Late => "late",
            HeraldKind::Plus => "plus",
            HeraldKind::Minus => "minus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeraldMode {
    pub kind: HeraldKind,
    pub phi_m: f64,
    pub phi_opt: f64,
}

fn wrap_phase(phi: f64) -> f64 {
    phi.rem_euclid(TAU)
}

impl HeraldMode {
    pub fn new(kind: HeraldKind, phi_opt: f64, phi_m: f64) -> Self {
        HeraldMode {
            kind,
            phi_m: wrap_phase(phi_m),
            phi_opt: wrap_phase(phi_opt),
        }
    }

    pub fn of(kind: HeraldKind) -> Self {
        HeraldMode::new(kind, DEFAULT_PHI, DEFAULT_PHI)
    }

    /// Coefficients of the created mode `c_e Ĉ_e† + c_l Ĉ_l†`.
    pub fn coeffs(&self) -> (C64, C64) {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let rot = C64::from_polar(h, -self.phi_opt);
        match self.kind {
            HeraldKind::Early => (C64::new(1.0, 0.0), C64::new(0.0, 0.0)),
            HeraldKind::Late => (C64::new(0.0, 0.0), C64::new(1.0, 0.0)),
            HeraldKind::Plus => (C64::new(h, 0.0), rot),
            HeraldKind::Minus => (C64::new(h, 0.0), -rot),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairSourceParams {
    /// Pair-scattering probability per time bin.
    pub p: f64,
    pub phi_p: f64,
    pub eta_opt: f64,
    pub optical_visibility: f64,
    /// Expected dark counts per herald gate.
    pub dark_rate: f64,
}

impl Default for PairSourceParams {
    fn default() -> Self {
        PairSourceParams {
            p: 1.0e-4,
            phi_p: 0.0,
            eta_opt: 5.5e-2,
            optical_visibility: 0.94,
            dark_rate: 0.0,
        }
    }
}

impl PairSourceParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.01).contains(&self.p) {
            return Err(Error::param("p", format!("{} must lie in [0, 0.01)", self.p)));
        }
        for (name, v) in [
            ("eta_opt", self.eta_opt),
            ("optical_visibility", self.optical_visibility),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(name, format!("{v} outside [0, 1]")));
            }
        }
        if !(self.dark_rate >= 0.0 && self.dark_rate.is_finite()) {
            return Err(Error::param("dark_rate", "must be finite and nonnegative"));
        }
        if !self.phi_p.is_finite() {
            return Err(Error::param("phi_p", "must be finite"));
        }
        Ok(())
    }

    /// Share of heralds that come from dark counts.
    pub fn dark_fraction(&self) -> f64 {
        let total = self.p * self.eta_opt + self.dark_rate;
        if total > 0.0 {
            self.dark_rate / total
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Branch {
    /// Optical `(early, late)` occupation.
    pub optical: (usize, usize),
    pub microwave: (usize, usize),
}

/// Amplitudes of the photon-phonon pair state, one branch per term.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub branches: Vec<(Branch, C64)>,
}

impl JointState {
    pub fn amplitude(&self, optical: (usize, usize)) -> C64 {
        self.branches
            .iter()
            .find(|(b, _)| b.optical == optical)
            .map(|(_, a)| *a)
            .unwrap_or_default()
    }
}

/// Pair state with two-mode-squeezed weights: `n_e` early and `n_l` late pairs
/// carry `p^{(n_e+n_l)/2} e^{i n_l φ_p}`. Branches with more than `truncation`
/// pairs are dropped and the rest renormalized.
pub fn ideal_joint_state(p: f64, phi_p: f64, truncation: usize) -> Result<JointState> {
    if !(0.0..0.01).contains(&p) {
        return Err(Error::param("p", format!("{p} must lie in [0, 0.01)")));
    }
    let mut branches = Vec::new();
    for total in 0..=truncation {
        for n_l in 0..=total {
            let n_e = total - n_l;
            let amp = C64::from_polar(p.powf(total as f64 / 2.0), n_l as f64 * phi_p);
            if amp.norm() == 0.0 && total > 0 {
                continue;
            }
            branches.push((
                Branch {
                    optical: (n_e, n_l),
                    microwave: (n_e, n_l),
                },
                amp,
            ));
        }
    }
    let norm: f64 = branches.iter().map(|(_, a)| a.norm_sqr()).sum::<f64>().sqrt();
    branches.iter_mut().for_each(|(_, a)| *a /= norm);
    Ok(JointState { branches })
}

/// Basis used while building states: at least [`WORKING_HEADROOM`] extra levels,
/// more when the thermal tail weighted by `n²` would exceed 1e-9.
fn working_dims(params: &NoiseParams, dims: FockDims) -> FockDims {
    let levels = |d: usize, n_i: f64, n_d: f64| {
        let n = n_i.max(n_d);
        let x = n / (1.0 + n);
        let mut l = d + WORKING_HEADROOM;
        while l < MAX_WORKING_LEVELS && ((l + 1) as f64).powi(2) * x.powi(l as i32) > 1e-9 {
            l += 1;
        }
        l.max(d)
    };
    FockDims {
        d_e: levels(dims.d_e, params.n_i_e, params.n_d_e),
        d_l: levels(dims.d_l, params.n_i_l, params.n_d_l),
    }
}

fn working_state(params: &NoiseParams, coeffs: (C64, C64), dims: FockDims) -> Result<DensityMatrix> {
    params.validate()?;
    dims.validate()?;
    let work = working_dims(params, dims);
    let thermal = thermal_state(work, params.n_i_e, params.n_i_l)?;
    let added = photon_add(&thermal, coeffs)?;
    lossy_channel(&added, params.eta_ext, params.n_d_e, params.n_d_l)
}

fn unconditional_working(params: &NoiseParams, dims: FockDims) -> Result<DensityMatrix> {
    params.validate()?;
    let work = working_dims(params, dims);
    let thermal = thermal_state(work, params.n_i_e, params.n_i_l)?;
    lossy_channel(&thermal, params.eta_ext, params.n_d_e, params.n_d_l)
}

/// Microwave state after a herald of the given kind.
///
/// The chain is evaluated on a padded basis (at least [`WORKING_HEADROOM`]
/// extra levels per mode) and truncated to `dims` at the end.
pub fn conditional_state(params: &NoiseParams, herald: &HeraldMode, dims: FockDims) -> Result<DensityMatrix> {
    working_state(params, herald.coeffs(), dims)?.truncate(dims)
}

/// Microwave state with no herald (thermal background after the loss channel).
pub fn unconditional_state(params: &NoiseParams, dims: FockDims) -> Result<DensityMatrix> {
    unconditional_working(params, dims)?.truncate(dims)
}

/// Conditional state including imperfect optical interference and dark counts.
///
/// An X-basis herald is coherent with probability `V_opt`; otherwise it is an
/// equal mixture of the early and late herald states. Dark-count heralds
/// condition on the unconditional state.
pub fn heralded_state(
    params: &NoiseParams,
    herald: &HeraldMode,
    src: &PairSourceParams,
    dims: FockDims,
) -> Result<DensityMatrix> {
    src.validate()?;
    let signal = match herald.kind {
        HeraldKind::Early | HeraldKind::Late => working_state(params, herald.coeffs(), dims)?,
        HeraldKind::Plus | HeraldKind::Minus => {
            let v = src.optical_visibility;
            let coherent = working_state(params, herald.coeffs(), dims)?;
            if v < 1.0 {
                let early = working_state(params, HeraldMode::of(HeraldKind::Early).coeffs(), dims)?;
                let late = working_state(params, HeraldMode::of(HeraldKind::Late).coeffs(), dims)?;
                let w = 0.5 * (1.0 - v);
                DensityMatrix::mixture(&[(v, &coherent), (w, &early), (w, &late)])?
            } else {
                coherent
            }
        }
    };
    let f = src.dark_fraction();
    let state = if f > 0.0 {
        let dark = unconditional_working(params, dims)?;
        DensityMatrix::mixture(&[(1.0 - f, &signal), (f, &dark)])?
    } else {
        signal
    };
    state.truncate(dims)
}

/// Expands `a_e†^{o_e} a_l†^{o_l}|0⟩/√(o_e! o_l!)` over the detector modes
/// `b_± = (a_e ± e^{iθ} a_l)/√2`, returning `((n_+, n_-), amplitude)`.
fn detector_amplitudes(optical: (usize, usize), theta: f64) -> Vec<((usize, usize), C64)> {
    let (oe, ol) = optical;
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    let binom = |n: usize, k: usize| fact(n) / (fact(k) * fact(n - k));
    let total = oe + ol;
    let mut acc = vec![C64::new(0.0, 0.0); total + 1];
    for j in 0..=oe {
        for k in 0..=ol {
            let sign = if (ol - k) % 2 == 0 { 1.0 } else { -1.0 };
            acc[j + k] += C64::new(binom(oe, j) * binom(ol, k) * sign, 0.0);
        }
    }
    let pre = C64::from_polar(0.5f64.powf(total as f64 / 2.0), theta * ol as f64) / (fact(oe) * fact(ol)).sqrt();
    acc.into_iter()
        .enumerate()
        .map(|(np, a)| {
            let nm = total - np;
            ((np, nm), a * pre * (fact(np) * fact(nm)).sqrt())
        })
        .filter(|(_, a)| a.norm() > 0.0)
        .collect()
}

/// Conditional state from the full pair state, with click detectors of
/// efficiency `η_opt`.
///
/// Each optical Fock outcome on the herald detector contributes the microwave
/// operator `Σ_o ⟨n|o⟩ c_o Ĉ_e†^{o_e} Ĉ_l†^{o_l}/√(o_e! o_l!)`, weighted by the
/// click probability `1 - (1-η_opt)^n`. The other detector is not conditioned on.
/// The X-basis detector phase is chosen so the single-pair branch reproduces
/// [`HeraldMode::coeffs`].
pub fn multi_pair_state(
    params: &NoiseParams,
    herald: &HeraldMode,
    src: &PairSourceParams,
    truncation: usize,
    dims: FockDims,
) -> Result<DensityMatrix> {
    params.validate()?;
    src.validate()?;
    let joint = ideal_joint_state(src.p, src.phi_p, truncation)?;
    let theta = -herald.phi_opt - src.phi_p;
    // Microwave polynomial per detector outcome: (n_click, other) -> [(mw occupation, amplitude)].
    let mut outcomes: Vec<((usize, usize), Vec<((usize, usize), C64)>)> = Vec::new();
    for (branch, amp) in &joint.branches {
        let (oe, ol) = branch.optical;
        let parts: Vec<((usize, usize), C64)> = match herald.kind {
            HeraldKind::Early => vec![((oe, ol), C64::new(1.0, 0.0))],
            HeraldKind::Late => vec![((ol, oe), C64::new(1.0, 0.0))],
            HeraldKind::Plus => detector_amplitudes((oe, ol), theta),
            HeraldKind::Minus => detector_amplitudes((oe, ol), theta)
                .into_iter()
                .map(|((np, nm), a)| ((nm, np), a))
                .collect(),
        };
        for (key, a) in parts {
            let term = (branch.microwave, a * amp);
            match outcomes.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(term),
                None => outcomes.push((key, vec![term])),
            }
        }
    }
    let headroom = truncation.max(1);
    let work = working_dims(params, dims);
    let thermal = thermal_state(work, params.n_i_e, params.n_i_l)?;
    let eta = src.eta_opt;
    let added = apply_jump(
        &thermal,
        |d| {
            let ce = annihilation(d, Mode::Early).dagger();
            let cl = annihilation(d, Mode::Late).dagger();
            let power = |op: &FockOperator, n: usize| (0..n).fold(FockOperator::identity(d), |acc, _| acc.mul(op));
            let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
            outcomes
                .iter()
                .filter(|((clicks, _), _)| *clicks > 0)
                .map(|((clicks, _), terms)| {
                    let weight = (1.0 - (1.0 - eta).powi(*clicks as i32)).sqrt();
                    let mut k = FockOperator::from_matrix(d, nalgebra::DMatrix::zeros(d.joint(), d.joint()))
                        .expect("zero operator");
                    for &((me, ml), a) in terms {
                        let mono = power(&ce, me).mul(&power(&cl, ml));
                        k = k.add(&mono.scale(a * weight / (fact(me) * fact(ml)).sqrt()));
                    }
                    k
                })
                .collect()
        },
        headroom,
    )?;
    lossy_channel(&added, params.eta_ext, params.n_d_e, params.n_d_l)?.truncate(dims)
}

fn intensity(rho: &DensityMatrix, which: Mode) -> f64 {
    rho.mean_photons(which)
}

/// `n_ij = ⟨Ĉ_j†Ĉ_j⟩` in mode `j` after herald `i`, both in `{early, late}`.
pub fn conditional_intensities(params: &NoiseParams) -> Result<Matrix2> {
    let dims = FockDims::default();
    let mut n = [[0.0; 2]; 2];
    for (i, kind) in [HeraldKind::Early, HeraldKind::Late].into_iter().enumerate() {
        let rho = working_state(params, HeraldMode::of(kind).coeffs(), dims)?;
        n[i] = [intensity(&rho, Mode::Early), intensity(&rho, Mode::Late)];
    }
    Ok(n)
}

/// Closed-form intensities: `η(1+2n̄_i)+(1-η)n̄_d` in the heralded mode and
/// `η n̄_i+(1-η)n̄_d` in the other.
pub fn closed_form_intensities(params: &NoiseParams) -> Matrix2 {
    let eta = params.eta_ext;
    let e_on = eta * (1.0 + 2.0 * params.n_i_e) + (1.0 - eta) * params.n_d_e;
    let l_on = eta * (1.0 + 2.0 * params.n_i_l) + (1.0 - eta) * params.n_d_l;
    [
        [e_on, params.unconditional_intensity(Mode::Late)],
        [params.unconditional_intensity(Mode::Early), l_on],
    ]
}

/// `(n_00 − n_01 − n_10 + n_11) / Σ n_ij`.
pub fn visibility(n: &Matrix2) -> Result<f64> {
    if n.iter().flatten().any(|&v| !(v >= 0.0)) {
        return Err(Error::param("n", "intensities must be nonnegative"));
    }
    let total: f64 = n.iter().flatten().sum();
    if total <= 0.0 {
        return Err(Error::Undefined("visibility of an all-zero intensity matrix"));
    }
    Ok((n[0][0] - n[0][1] - n[1][0] + n[1][1]) / total)
}

pub fn visibility_z(n: &Matrix2) -> Result<f64> {
    visibility(n)
}

/// `⟨Ĉ_φ†Ĉ_φ⟩` for `Ĉ_φ = (Ĉ_e + e^{iφ}Ĉ_l)/√2`.
pub fn rotated_intensity(rho: &DensityMatrix, phi: f64) -> Result<f64> {
    let ne = intensity(rho, Mode::Early);
    let nl = intensity(rho, Mode::Late);
    let coh = normal_moment(rho, (1, 0, 0, 1))?;
    Ok(0.5 * (ne + nl) + (C64::from_polar(1.0, phi) * coh).re)
}

/// X-basis fringe and visibility.
///
/// The fringe is the plus-herald intensity of `(Ĉ_e + e^{iφ_m}Ĉ_l)/√2` over
/// `phi_m_grid`. `V_x` uses the plus/minus heralds against the detection modes
/// at the fringe maximum `φ*` and at `φ* + π`; the maximum is taken from the
/// analytic phase of `⟨Ĉ_e†Ĉ_l⟩`.
pub fn visibility_x(params: &NoiseParams, phi_opt: f64, phi_m_grid: &[f64]) -> Result<(Vec<f64>, f64)> {
    let dims = FockDims::default();
    let plus = working_state(params, HeraldMode::new(HeraldKind::Plus, phi_opt, 0.0).coeffs(), dims)?;
    let minus = working_state(params, HeraldMode::new(HeraldKind::Minus, phi_opt, 0.0).coeffs(), dims)?;
    let fringe = phi_m_grid
        .iter()
        .map(|&phi| rotated_intensity(&plus, phi))
        .collect::<Result<Vec<_>>>()?;
    let coh = normal_moment(&plus, (1, 0, 0, 1))?;
    let best = if coh.norm() > 0.0 { -coh.arg() } else { phi_opt };
    let mut n = [[0.0; 2]; 2];
    for (i, rho) in [&plus, &minus].into_iter().enumerate() {
        n[i] = [rotated_intensity(rho, best)?, rotated_intensity(rho, best + PI)?];
    }
    Ok((fringe, visibility(&n)?))
}

/// `g²` of the heralded mode: conditional over unconditional intensity.
pub fn cross_correlation(params: &NoiseParams) -> Result<(f64, f64)> {
    let n = conditional_intensities(params)?;
    let ue = params.unconditional_intensity(Mode::Early);
    let ul = params.unconditional_intensity(Mode::Late);
    if ue <= 0.0 || ul <= 0.0 {
        return Err(Error::Undefined("cross-correlation with zero unconditional intensity"));
    }
    Ok((n[0][0] / ue, n[1][1] / ul))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

/// Single-photon projector amplitudes `(⟨10|ψ⟩, ⟨01|ψ⟩)` for outcome `j`.
fn projector_vector(basis: Basis, j: usize, phi_m: f64) -> (C64, C64) {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    match (basis, j) {
        (Basis::Z, 0) => (C64::new(1.0, 0.0), C64::new(0.0, 0.0)),
        (Basis::Z, _) => (C64::new(0.0, 0.0), C64::new(1.0, 0.0)),
        (Basis::X, 0) => (C64::new(h, 0.0), C64::from_polar(h, -phi_m)),
        (Basis::X, _) => (C64::new(h, 0.0), -C64::from_polar(h, -phi_m)),
    }
}

/// Single-photon-subspace probabilities `p_ij = Tr{Π^(j) ρ^(i)}` normalized over
/// all four entries. `states` holds the two heralds of the basis in order
/// (early, late) or (plus, minus).
pub fn conditional_probabilities(states: [&DensityMatrix; 2], basis: Basis, phi_m: f64) -> Result<Matrix2> {
    let mut p = [[0.0; 2]; 2];
    for (i, rho) in states.iter().enumerate() {
        let dims = rho.dims();
        let k10 = dims.index(1, 0);
        let k01 = dims.index(0, 1);
        for (j, pj) in p[i].iter_mut().enumerate() {
            let (a, b) = projector_vector(basis, j, phi_m);
            let m = rho.matrix();
            let v = a.conj() * a * m[(k10, k10)]
                + a.conj() * b * m[(k10, k01)]
                + b.conj() * a * m[(k01, k10)]
                + b.conj() * b * m[(k01, k01)];
            *pj = v.re.max(0.0);
        }
    }
    let total: f64 = p.iter().flatten().sum();
    if total < 1e-12 {
        return Err(Error::Undefined("single-photon post-selection with vanishing weight"));
    }
    for v in p.iter_mut().flatten() {
        *v /= total;
    }
    Ok(p)
}

/// `½(p_ee + p_ll − p_el − p_le + p_++ + p_−− − 2√(p_+− p_−+))`.
pub fn fidelity_lower_bound(pz: &Matrix2, px: &Matrix2) -> Result<f64> {
    for (name, m) in [("pZ", pz), ("pX", px)] {
        if m.iter().flatten().any(|&v| !(v >= 0.0)) {
            return Err(Error::param(name, "probabilities must be nonnegative"));
        }
        let s: f64 = m.iter().flatten().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::param(name, format!("entries sum to {s}, expected 1")));
        }
    }
    Ok(0.5 * (pz[0][0] + pz[1][1] - pz[0][1] - pz[1][0] + px[0][0] + px[1][1] - 2.0 * (px[0][1] * px[1][0]).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeraldStats {
    pub p_click: f64,
    pub rate: f64,
    pub multi_photon_fraction: f64,
}

pub fn herald_statistics(src: &PairSourceParams, repetition_period: f64) -> Result<HeraldStats> {
    src.validate()?;
    if !(repetition_period > 0.0) {
        return Err(Error::param("repetition_period", "must be positive"));
    }
    let p_click = src.p * src.eta_opt + src.dark_rate;
    Ok(HeraldStats {
        p_click,
        rate: p_click / repetition_period,
        multi_photon_fraction: src.p,
    })
}

/// Four conditional states of a model run.
#[derive(Debug, Clone)]
pub struct HeraldStates {
    pub early: DensityMatrix,
    pub late: DensityMatrix,
    pub plus: DensityMatrix,
    pub minus: DensityMatrix,
}

impl HeraldStates {
    pub fn get(&self, kind: HeraldKind) -> &DensityMatrix {
        match kind {
            HeraldKind::Early => &self.early,
            HeraldKind::Late => &self.late,
            HeraldKind::Plus => &self.plus,
            HeraldKind::Minus => &self.minus,
        }
    }

    pub fn build(params: &NoiseParams, src: &PairSourceParams, phi_opt: f64, dims: FockDims) -> Result<Self> {
        let state = |kind| heralded_state(params, &HeraldMode::new(kind, phi_opt, phi_opt), src, dims);
        Ok(HeraldStates {
            early: state(HeraldKind::Early)?,
            late: state(HeraldKind::Late)?,
            plus: state(HeraldKind::Plus)?,
            minus: state(HeraldKind::Minus)?,
        })
    }

    /// `(pZ, pX, F_lb)` with X projectors at `phi_m`.
    pub fn fidelity(&self, phi_m: f64) -> Result<(Matrix2, Matrix2, f64)> {
        let pz = conditional_probabilities([&self.early, &self.late], Basis::Z, phi_m)?;
        let px = conditional_probabilities([&self.plus, &self.minus], Basis::X, phi_m)?;
        let f = fidelity_lower_bound(&pz, &px)?;
        Ok((pz, px, f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub params: NoiseParams,
    pub phi_opt: f64,
    pub phi_m: f64,
    pub intensities: Matrix2,
    pub v_z: f64,
    pub v_x: f64,
    pub g2_early: f64,
    pub g2_late: f64,
    pub p_z: Matrix2,
    pub p_x: Matrix2,
    pub f_lb: f64,
}

/// All model observables for ideal optics.
pub fn model_report(params: &NoiseParams, phi_opt: f64, phi_m: f64, dims: FockDims) -> Result<ModelReport> {
    let intensities = conditional_intensities(params)?;
    let v_z = visibility_z(&intensities)?;
    let (_, v_x) = visibility_x(params, phi_opt, &[])?;
    let (g2_early, g2_late) = cross_correlation(params)?;
    let src = PairSourceParams {
        optical_visibility: 1.0,
        dark_rate: 0.0,
        ..PairSourceParams::default()
    };
    let states = HeraldStates::build(params, &src, phi_opt, dims)?;
    let (p_z, p_x, f_lb) = states.fidelity(phi_m)?;
    Ok(ModelReport {
        params: *params,
        phi_opt,
        phi_m,
        intensities,
        v_z,
        v_x,
        g2_early,
        g2_late,
        p_z,
        p_x,
        f_lb,
    })
}
