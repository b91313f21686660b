//! Moment tensors of heterodyne records and the amplifier-noise inversion.
//!
//! With `Ŝ = √G (Ĉ + Ĥ†)` the measured moments
//! `S̄_α = ⟨(S_e*)^k S_e^l (S_l*)^m S_l^n⟩` expand as
//! `S̄_α = G^{|α|/2} Σ_{β≤α} binom(α,β) C̄_β H̄_{α−β}` with `C̄` normally and `H̄`
//! anti-normally ordered. Ordering `β ≤ α` is componentwise, so the system is
//! triangular in graded order.

use std::collections::HashMap;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fockspace::{normal_moment, DensityMatrix};

pub const DEFAULT_MAX_ORDER: usize = 4;
pub const MAX_SUPPORTED_ORDER: usize = 8;
const MIN_RECORDS: usize = 10;

/// `(k, l, m, n)`: powers of `S_e*`, `S_e`, `S_l*`, `S_l`.
pub type MultiIndex = (usize, usize, usize, usize);

pub fn order(a: MultiIndex) -> usize {
    a.0 + a.1 + a.2 + a.3
}

/// Index of the complex-conjugate moment.
pub fn mirror(a: MultiIndex) -> MultiIndex {
    (a.1, a.0, a.3, a.2)
}

fn leq(b: MultiIndex, a: MultiIndex) -> bool {
    b.0 <= a.0 && b.1 <= a.1 && b.2 <= a.2 && b.3 <= a.3
}

fn sub(a: MultiIndex, b: MultiIndex) -> MultiIndex {
    (a.0 - b.0, a.1 - b.1, a.2 - b.2, a.3 - b.3)
}

fn binom(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `Π_i binom(α_i, β_i)`.
pub fn binom_multi(a: MultiIndex, b: MultiIndex) -> f64 {
    binom(a.0, b.0) * binom(a.1, b.1) * binom(a.2, b.2) * binom(a.3, b.3)
}

/// All indices with `|α| ≤ max_order`, by total order and then lexicographically.
pub fn graded_indices(max_order: usize) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for total in 0..=max_order {
        for k in 0..=total {
            for l in 0..=total - k {
                for m in 0..=total - k - l {
                    out.push((k, l, m, total - k - l - m));
                }
            }
        }
    }
    out
}

fn lower_set(a: MultiIndex) -> impl Iterator<Item = MultiIndex> {
    (0..=a.0).flat_map(move |k| {
        (0..=a.1).flat_map(move |l| (0..=a.2).flat_map(move |m| (0..=a.3).map(move |n| (k, l, m, n))))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentOrdering {
    Normal,
    AntiNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentScale {
    /// Quanta at the device output (gain removed).
    Device,
    /// Raw heterodyne output, including `G^{|α|/2}`.
    Heterodyne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensor {
    max_order: usize,
    pub ordering: MomentOrdering,
    pub scale: MomentScale,
    indices: Vec<MultiIndex>,
    lookup: HashMap<MultiIndex, usize>,
    values: Vec<C64>,
    variances: Vec<f64>,
}

impl MomentTensor {
    /// Tensor with `values[0] = 1` and every other entry zero.
    pub fn unit(max_order: usize, ordering: MomentOrdering, scale: MomentScale) -> Result<Self> {
        if max_order == 0 || max_order > MAX_SUPPORTED_ORDER {
            return Err(Error::param(
                "max_order",
                format!("{max_order} outside 1..={MAX_SUPPORTED_ORDER}"),
            ));
        }
        let indices = graded_indices(max_order);
        let lookup = indices.iter().enumerate().map(|(i, a)| (*a, i)).collect();
        let mut values = vec![C64::new(0.0, 0.0); indices.len()];
        values[0] = C64::new(1.0, 0.0);
        Ok(MomentTensor {
            max_order,
            ordering,
            scale,
            variances: vec![0.0; indices.len()],
            indices,
            lookup,
            values,
        })
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, a: MultiIndex) -> bool {
        self.lookup.contains_key(&a)
    }

    fn missing(&self, a: MultiIndex) -> Error {
        Error::MissingMoment {
            k: a.0,
            l: a.1,
            m: a.2,
            n: a.3,
            tensor: match (self.ordering, self.scale) {
                (MomentOrdering::AntiNormal, _) => "noise tensor",
                (_, MomentScale::Heterodyne) => "heterodyne tensor",
                _ => "device tensor",
            },
        }
    }

    pub fn get(&self, a: MultiIndex) -> Result<C64> {
        self.lookup
            .get(&a)
            .map(|&i| self.values[i])
            .ok_or_else(|| self.missing(a))
    }

    pub fn variance(&self, a: MultiIndex) -> Result<f64> {
        self.lookup
            .get(&a)
            .map(|&i| self.variances[i])
            .ok_or_else(|| self.missing(a))
    }

    /// Sets `a` and its mirror (conjugated) together.
    pub fn set(&mut self, a: MultiIndex, value: C64, variance: f64) -> Result<()> {
        let i = *self.lookup.get(&a).ok_or_else(|| self.missing(a))?;
        let j = self.lookup[&mirror(a)];
        self.values[i] = value;
        self.variances[i] = variance;
        self.values[j] = value.conj();
        self.variances[j] = variance;
        if i == j {
            self.values[i].im = 0.0;
        }
        Ok(())
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Largest `|T_α − conj(T_mirror(α))|`.
    pub fn conjugate_asymmetry(&self) -> f64 {
        self.indices
            .iter()
            .enumerate()
            .map(|(i, &a)| (self.values[i] - self.values[self.lookup[&mirror(a)]].conj()).norm())
            .fold(0.0, f64::max)
    }

    /// Indices whose mirror does not precede them in graded order.
    pub(crate) fn canonical(&self) -> impl Iterator<Item = (usize, MultiIndex)> + '_ {
        self.indices
            .iter()
            .copied()
            .enumerate()
            .filter(move |&(i, a)| self.lookup[&mirror(a)] >= i)
    }

    /// Divides each entry by `G^{|α|/2}` (variances by `G^{|α|}`), or multiplies
    /// when `inverse` is set.
    fn rescale(&self, gain: f64, inverse: bool, scale: MomentScale) -> MomentTensor {
        let mut out = self.clone();
        out.scale = scale;
        for (i, &a) in self.indices.iter().enumerate() {
            let f = gain.powf(order(a) as f64 / 2.0);
            let f = if inverse { f } else { 1.0 / f };
            out.values[i] = self.values[i] * f;
            out.variances[i] = self.variances[i] * f * f;
        }
        out
    }

    /// Restriction to a lower maximum order.
    pub fn truncated(&self, max_order: usize) -> Result<MomentTensor> {
        if max_order > self.max_order {
            return Err(Error::IncompatibleTensors(format!(
                "cannot extend order {} to {max_order}",
                self.max_order
            )));
        }
        let mut out = MomentTensor::unit(max_order, self.ordering, self.scale)?;
        for (i, &a) in out.indices.clone().iter().enumerate() {
            let j = self.lookup[&a];
            out.values[i] = self.values[j];
            out.variances[i] = self.variances[j];
        }
        Ok(out)
    }

    /// `Σ_i w_i T_i` entrywise; variances combine with `w_i²`.
    pub fn linear_combination(parts: &[(f64, &MomentTensor)]) -> Result<MomentTensor> {
        let (_, first) = parts
            .first()
            .ok_or(Error::IncompatibleTensors("empty combination".into()))?;
        let mut out = (*first).clone();
        out.values.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        out.variances.iter_mut().for_each(|v| *v = 0.0);
        for (w, t) in parts {
            if t.max_order != out.max_order || t.ordering != out.ordering || t.scale != out.scale {
                return Err(Error::IncompatibleTensors("mismatched order, ordering or scale".into()));
            }
            for i in 0..out.values.len() {
                out.values[i] += t.values[i] * *w;
                out.variances[i] += t.variances[i] * w * w;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(TensorRepr::from(self)).expect("tensor serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<MomentTensor> {
        let repr: TensorRepr = serde_json::from_value(value.clone()).map_err(|e| Error::Format(e.to_string()))?;
        MomentTensor::try_from(repr)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryRepr {
    k: usize,
    l: usize,
    m: usize,
    n: usize,
    re: f64,
    im: f64,
    var: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRepr {
    max_order: usize,
    ordering: MomentOrdering,
    scale: MomentScale,
    entries: Vec<EntryRepr>,
}

impl From<&MomentTensor> for TensorRepr {
    fn from(t: &MomentTensor) -> Self {
        TensorRepr {
            max_order: t.max_order,
            ordering: t.ordering,
            scale: t.scale,
            entries: t
                .indices
                .iter()
                .zip(t.values.iter().zip(&t.variances))
                .map(|(&(k, l, m, n), (v, &var))| EntryRepr {
                    k,
                    l,
                    m,
                    n,
                    re: v.re,
                    im: v.im,
                    var,
                })
                .collect(),
        }
    }
}

impl TryFrom<TensorRepr> for MomentTensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        let mut t = MomentTensor::unit(r.max_order, r.ordering, r.scale)?;
        let mut seen = vec![false; t.len()];
        for e in r.entries {
            let a = (e.k, e.l, e.m, e.n);
            let i = *t.lookup.get(&a).ok_or_else(|| t.missing(a))?;
            t.values[i] = C64::new(e.re, e.im);
            t.variances[i] = e.var;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(t.missing(t.indices[i]));
        }
        Ok(t)
    }
}

fn powers(z: C64, n: usize) -> Vec<C64> {
    let mut p = Vec::with_capacity(n + 1);
    p.push(C64::new(1.0, 0.0));
    for i in 0..n {
        p.push(p[i] * z);
    }
    p
}

/// Sample means `S̄_α` of `(S_e*)^k S_e^l (S_l*)^m S_l^n` with variances
/// `(Var Re + Var Im)/N`.
pub fn estimate_moments(records: &[(C64, C64)], max_order: usize) -> Result<MomentTensor> {
    if records.len() < MIN_RECORDS {
        return Err(Error::InsufficientData {
            got: records.len(),
            need: MIN_RECORDS,
        });
    }
    let mut t = MomentTensor::unit(max_order, MomentOrdering::Normal, MomentScale::Heterodyne)?;
    let canon: Vec<(usize, MultiIndex)> = t.canonical().collect();
    let k = canon.len();
    // Fixed chunks summed in order keep the result independent of the thread count.
    let partials: Vec<(Vec<C64>, Vec<f64>)> = records
        .par_chunks(4096)
        .map(|chunk| {
            let (mut s, mut q) = (vec![C64::new(0.0, 0.0); k], vec![0.0; k]);
            for &(se, sl) in chunk {
                let pe = powers(se, max_order);
                let pec = powers(se.conj(), max_order);
                let pl = powers(sl, max_order);
                let plc = powers(sl.conj(), max_order);
                for (j, &(_, a)) in canon.iter().enumerate() {
                    let v = pec[a.0] * pe[a.1] * plc[a.2] * pl[a.3];
                    s[j] += v;
                    q[j] += v.norm_sqr();
                }
            }
            (s, q)
        })
        .collect();
    let (mut sum, mut sq) = (vec![C64::new(0.0, 0.0); k], vec![0.0; k]);
    for (s, q) in &partials {
        for j in 0..k {
            sum[j] += s[j];
            sq[j] += q[j];
        }
    }
    let n = records.len() as f64;
    for (j, &(_, a)) in canon.iter().enumerate() {
        let mean = sum[j] / n;
        let var = ((sq[j] / n - mean.norm_sqr()) * n / (n - 1.0)).max(0.0) / n;
        let mean = if a == (0, 0, 0, 0) { C64::new(1.0, 0.0) } else { mean };
        t.set(a, mean, var)?;
    }
    Ok(t)
}

/// Anti-normal amplifier-noise moments `H̄` from calibration records, with the
/// gain divided out.
pub fn noise_moments(calibration: &[(C64, C64)], max_order: usize, gain_db: f64) -> Result<MomentTensor> {
    let g = linear_gain(gain_db)?;
    let s = estimate_moments(calibration, max_order)?;
    let mut h = s.rescale(g, false, MomentScale::Device);
    h.ordering = MomentOrdering::AntiNormal;
    Ok(h)
}

/// `H̄` of independent thermal amplifier noise: `δ_kl k!(n_e+1)^k · δ_mn m!(n_l+1)^m`.
pub fn thermal_noise_tensor(max_order: usize, n_add_e: f64, n_add_l: f64) -> Result<MomentTensor> {
    let mut t = MomentTensor::unit(max_order, MomentOrdering::AntiNormal, MomentScale::Device)?;
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    for a in t.indices.clone() {
        let v = if a.0 == a.1 && a.2 == a.3 {
            fact(a.0) * (n_add_e + 1.0).powi(a.0 as i32) * fact(a.2) * (n_add_l + 1.0).powi(a.2 as i32)
        } else {
            0.0
        };
        t.set(a, C64::new(v, 0.0), 0.0)?;
    }
    Ok(t)
}

/// Normal-ordered moments `⟨Ĉ_e†^k Ĉ_e^l Ĉ_l†^m Ĉ_l^n⟩` of a state.
pub fn state_moments(rho: &DensityMatrix, max_order: usize) -> Result<MomentTensor> {
    let mut t = MomentTensor::unit(max_order, MomentOrdering::Normal, MomentScale::Device)?;
    let canon: Vec<MultiIndex> = t.canonical().map(|(_, a)| a).collect();
    for a in canon {
        if a == (0, 0, 0, 0) {
            continue;
        }
        t.set(a, normal_moment(rho, a)?, 0.0)?;
    }
    Ok(t)
}

pub fn linear_gain(gain_db: f64) -> Result<f64> {
    let g = 10f64.powf(gain_db / 10.0);
    if !(g > 1e3) || !g.is_finite() {
        return Err(Error::param(
            "gain_db",
            format!("{gain_db} dB is not a high-gain amplifier (G > 1e3)"),
        ));
    }
    Ok(g)
}

fn check_pair(c: &MomentTensor, h: &MomentTensor, c_scale: MomentScale) -> Result<()> {
    if h.ordering != MomentOrdering::AntiNormal || h.scale != MomentScale::Device {
        return Err(Error::IncompatibleTensors(
            "noise tensor must be anti-normal on the device scale".into(),
        ));
    }
    if c.ordering != MomentOrdering::Normal || c.scale != c_scale {
        return Err(Error::IncompatibleTensors(format!(
            "expected a normal-ordered tensor on the {c_scale:?} scale"
        )));
    }
    if h.max_order < c.max_order {
        return Err(h.missing((c.max_order, 0, 0, 0)));
    }
    Ok(())
}

/// `S̄ = G^{|α|/2} Σ_{β≤α} binom(α,β) C̄_β H̄_{α−β}`.
pub fn forward_moments(c: &MomentTensor, h: &MomentTensor, gain_db: f64) -> Result<MomentTensor> {
    let g = linear_gain(gain_db)?;
    check_pair(c, h, MomentScale::Device)?;
    let mut s = MomentTensor::unit(c.max_order, MomentOrdering::Normal, MomentScale::Device)?;
    let canon: Vec<MultiIndex> = s.canonical().map(|(_, a)| a).collect();
    for a in canon {
        let mut v = C64::new(0.0, 0.0);
        let mut var = 0.0;
        for b in lower_set(a) {
            let w = binom_multi(a, b);
            let (cb, hb) = (c.get(b)?, h.get(sub(a, b))?);
            v += cb * hb * w;
            var += w * w * (hb.norm_sqr() * c.variance(b)? + cb.norm_sqr() * h.variance(sub(a, b))?);
        }
        s.set(a, v, var)?;
    }
    Ok(s.rescale(g, true, MomentScale::Heterodyne))
}

/// Triangular solve for `C̄` given `S̄` and `H̄`, with first-order (diagonal)
/// variance propagation.
pub fn invert_moments(s: &MomentTensor, h: &MomentTensor, gain_db: f64) -> Result<MomentTensor> {
    let g = linear_gain(gain_db)?;
    check_pair(s, h, MomentScale::Heterodyne)?;
    let h0 = h.get((0, 0, 0, 0))?.re;
    if !(h0 > 0.0) {
        return Err(Error::IncompatibleTensors("noise tensor has H̄_0 = 0".into()));
    }
    let sn = s.rescale(g, false, MomentScale::Device);
    let mut c = MomentTensor::unit(s.max_order, MomentOrdering::Normal, MomentScale::Device)?;
    let canon: Vec<MultiIndex> = c.canonical().map(|(_, a)| a).collect();
    for a in canon {
        if a == (0, 0, 0, 0) {
            continue;
        }
        let mut v = sn.get(a)?;
        let mut var = sn.variance(a)?;
        for b in lower_set(a) {
            if b == a {
                continue;
            }
            let w = binom_multi(a, b);
            let (cb, hb) = (c.get(b)?, h.get(sub(a, b))?);
            v -= cb * hb * w;
            var += w * w * (hb.norm_sqr() * c.variance(b)? + cb.norm_sqr() * h.variance(sub(a, b))?);
        }
        c.set(a, v / h0, var / (h0 * h0))?;
    }
    Ok(c)
}

/// `T̄_{αβ} = G^{|α|/2} binom(α,β) H̄_{α−β}` for `β ≤ α`, zero otherwise.
pub fn transfer_element(h: &MomentTensor, gain: f64, a: MultiIndex, b: MultiIndex) -> Result<C64> {
    if !leq(b, a) {
        return Ok(C64::new(0.0, 0.0));
    }
    Ok(h.get(sub(a, b))? * binom_multi(a, b) * gain.powf(order(a) as f64 / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fockspace::FockDims;
    use crate::heterodyne::{calibration_records, AmplifierModel};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GAIN_DB: f64 = 107.4;

    fn amp(n: f64) -> AmplifierModel {
        AmplifierModel {
            gain_db: GAIN_DB,
            n_add_e: n,
            n_add_l: n,
        }
    }

    #[test]
    fn graded_order_and_count() {
        let idx = graded_indices(4);
        assert_eq!(idx.len(), 70);
        assert_eq!(idx[0], (0, 0, 0, 0));
        assert!(idx.windows(2).all(|w| order(w[0]) <= order(w[1])));
        // Every β ≤ α precedes α, so the solve is triangular.
        let pos: HashMap<_, _> = idx.iter().enumerate().map(|(i, a)| (*a, i)).collect();
        for a in &idx {
            for b in lower_set(*a) {
                assert!(pos[&b] <= pos[a]);
            }
        }
    }

    #[test]
    fn binomial_sums_to_power_of_two() {
        for a in graded_indices(6) {
            let s: f64 = lower_set(a).map(|b| binom_multi(a, b)).sum();
            assert_eq!(s, 2f64.powi(order(a) as i32));
        }
    }

    #[test]
    fn estimate_needs_ten_records() {
        let r = vec![(C64::new(1.0, 0.0), C64::new(0.0, 0.0)); 9];
        assert!(matches!(
            estimate_moments(&r, 1),
            Err(Error::InsufficientData { got: 9, .. })
        ));
    }

    #[test]
    fn constant_record_moments() {
        let r = vec![(C64::new(1.0, 0.0), C64::new(0.0, 0.0)); 10];
        let t = estimate_moments(&r, 1).unwrap();
        assert_eq!(t.get((0, 1, 0, 0)).unwrap(), C64::new(1.0, 0.0));
        assert_eq!(t.get((0, 0, 0, 1)).unwrap(), C64::new(0.0, 0.0));
        assert_eq!(t.variance((0, 1, 0, 0)).unwrap(), 0.0);
    }

    #[test]
    fn estimator_is_conjugate_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<_> = (0..500)
            .map(|_| {
                (
                    C64::new(rng.random::<f64>() - 0.3, rng.random::<f64>()),
                    C64::new(rng.random::<f64>(), rng.random::<f64>() + 0.2),
                )
            })
            .collect();
        let t = estimate_moments(&r, 4).unwrap();
        assert_eq!(t.conjugate_asymmetry(), 0.0);
        assert_eq!(t.get((0, 0, 0, 0)).unwrap(), C64::new(1.0, 0.0));
    }

    #[test]
    fn calibration_noise_moments() {
        let cal = calibration_records(&amp(2.6), 100_000, 11).unwrap();
        let s = estimate_moments(&cal, 4).unwrap();
        let g = linear_gain(GAIN_DB).unwrap();
        let s11 = s.get((1, 1, 0, 0)).unwrap().re / g;
        let sd = s.variance((1, 1, 0, 0)).unwrap().sqrt() / g;
        assert!((s11 - 3.6).abs() < 3.0 * sd, "{s11} ± {sd}");
        let h = noise_moments(&cal, 4, GAIN_DB).unwrap();
        let h22 = h.get((2, 2, 0, 0)).unwrap().re;
        let sd22 = h.variance((2, 2, 0, 0)).unwrap().sqrt();
        assert!((h22 - 25.92).abs() < 4.0 * sd22, "{h22} ± {sd22}");
        let cross = h.get((1, 0, 0, 1)).unwrap();
        let sdx = h.variance((1, 0, 0, 1)).unwrap().sqrt();
        assert!(cross.norm() < 3.0 * sdx, "{cross} ± {sdx}");
    }

    #[test]
    fn vacuum_noise_tensor() {
        let h = thermal_noise_tensor(4, 0.0, 0.0).unwrap();
        assert_eq!(h.get((1, 1, 0, 0)).unwrap().re, 1.0);
        let h = thermal_noise_tensor(4, 2.6, 2.6).unwrap();
        assert_abs_diff_eq!(h.get((2, 2, 0, 0)).unwrap().re, 25.92, epsilon = 1e-12);
    }

    #[test]
    fn variance_scales_inversely_with_records() {
        let a = calibration_records(&amp(2.6), 20_000, 5).unwrap();
        let b = calibration_records(&amp(2.6), 40_000, 6).unwrap();
        let va = estimate_moments(&a, 2).unwrap().variance((1, 1, 0, 0)).unwrap();
        let vb = estimate_moments(&b, 2).unwrap().variance((1, 1, 0, 0)).unwrap();
        assert!((va / vb - 2.0).abs() < 0.15, "{}", va / vb);
    }

    #[test]
    fn single_photon_forward() {
        let rho = DensityMatrix::fock(FockDims::default(), 1, 0).unwrap();
        let c = state_moments(&rho, 4).unwrap();
        let h = thermal_noise_tensor(4, 0.0, 0.0).unwrap();
        let s = forward_moments(&c, &h, GAIN_DB).unwrap();
        let g = linear_gain(GAIN_DB).unwrap();
        assert_abs_diff_eq!(s.get((1, 1, 0, 0)).unwrap().re / g, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn vacuum_forward_is_scaled_noise() {
        let c = MomentTensor::unit(4, MomentOrdering::Normal, MomentScale::Device).unwrap();
        let h = thermal_noise_tensor(4, 2.6, 1.3).unwrap();
        let s = forward_moments(&c, &h, GAIN_DB).unwrap();
        let g = linear_gain(GAIN_DB).unwrap();
        for &a in s.indices() {
            let want = h.get(a).unwrap() * g.powf(order(a) as f64 / 2.0);
            assert!((s.get(a).unwrap() - want).norm() <= 1e-12 * want.norm().max(1.0));
        }
        let back = invert_moments(&s, &h, GAIN_DB).unwrap();
        for (i, v) in back.values().iter().enumerate() {
            let want = if i == 0 { 1.0 } else { 0.0 };
            assert!((v - want).norm() < 1e-9);
        }
    }

    #[test]
    fn first_order_inversion_subtracts_noise() {
        let rho = DensityMatrix::fock(FockDims::default(), 1, 0).unwrap();
        let h = thermal_noise_tensor(2, 2.6, 2.6).unwrap();
        let s = forward_moments(&state_moments(&rho, 2).unwrap(), &h, GAIN_DB).unwrap();
        let c = invert_moments(&s, &h, GAIN_DB).unwrap();
        let g = linear_gain(GAIN_DB).unwrap();
        let manual = s.get((1, 1, 0, 0)).unwrap().re / g - h.get((1, 1, 0, 0)).unwrap().re;
        assert_abs_diff_eq!(c.get((1, 1, 0, 0)).unwrap().re, manual, epsilon = 1e-12);
        assert_abs_diff_eq!(manual, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn missing_noise_entries() {
        let c = MomentTensor::unit(4, MomentOrdering::Normal, MomentScale::Device).unwrap();
        let h = thermal_noise_tensor(2, 2.6, 2.6).unwrap();
        assert!(matches!(
            forward_moments(&c, &h, GAIN_DB),
            Err(Error::MissingMoment { .. })
        ));
        assert!(matches!(
            forward_moments(&h, &h, GAIN_DB),
            Err(Error::IncompatibleTensors(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let h = thermal_noise_tensor(3, 2.6, 1.0).unwrap();
        let back = MomentTensor::from_json(&h.to_json()).unwrap();
        assert_eq!(back, h);
        let mut v = h.to_json();
        v["entries"].as_array_mut().unwrap().pop();
        assert!(MomentTensor::from_json(&v).is_err());
    }

    #[test]
    fn thermal_transfer_factorizes() {
        let h = thermal_noise_tensor(4, 2.6, 1.1).unwrap();
        let he = thermal_noise_tensor(4, 2.6, 0.0).unwrap();
        let hl = thermal_noise_tensor(4, 0.0, 1.1).unwrap();
        let g = 1.0e4;
        for &a in h.indices() {
            for b in lower_set(a) {
                let full = transfer_element(&h, g, a, b).unwrap();
                let ae = (a.0, a.1, 0, 0);
                let be = (b.0, b.1, 0, 0);
                let al = (0, 0, a.2, a.3);
                let bl = (0, 0, b.2, b.3);
                let split = transfer_element(&he, g, ae, be).unwrap() * transfer_element(&hl, g, al, bl).unwrap();
                assert!((full - split).norm() <= 1e-9 * full.norm().max(1.0));
            }
        }
    }

    pub(crate) fn random_device_tensor(rng: &mut impl Rng, max_order: usize) -> MomentTensor {
        let mut t = MomentTensor::unit(max_order, MomentOrdering::Normal, MomentScale::Device).unwrap();
        for (_, a) in t.canonical().collect::<Vec<_>>() {
            if a == (0, 0, 0, 0) {
                continue;
            }
            let v = C64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            t.set(a, v, rng.random_range(0.0..1e-3)).unwrap();
        }
        t
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn round_trip_identity(seed in any::<u64>(), ne in 0.0f64..4.0, nl in 0.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_device_tensor(&mut rng, 4);
            let h = thermal_noise_tensor(4, ne, nl).unwrap();
            let s = forward_moments(&c, &h, GAIN_DB).unwrap();
            let back = invert_moments(&s, &h, GAIN_DB).unwrap();
            for (x, y) in back.values().iter().zip(c.values()) {
                prop_assert!((x - y).norm() < 1e-10, "{x} vs {y}");
            }
            prop_assert_eq!(back.conjugate_asymmetry(), 0.0);
        }

        #[test]
        fn forward_is_linear(seed in any::<u64>(), a in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c1 = random_device_tensor(&mut rng, 4);
            let c2 = random_device_tensor(&mut rng, 4);
            let h = thermal_noise_tensor(4, 2.6, 2.6).unwrap();
            let mix = MomentTensor::linear_combination(&[(a, &c1), (1.0 - a, &c2)]).unwrap();
            let lhs = forward_moments(&mix, &h, GAIN_DB).unwrap();
            let f1 = forward_moments(&c1, &h, GAIN_DB).unwrap();
            let f2 = forward_moments(&c2, &h, GAIN_DB).unwrap();
            let rhs = MomentTensor::linear_combination(&[(a, &f1), (1.0 - a, &f2)]).unwrap();
            for (x, y) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((x - y).norm() <= 1e-12 * y.norm().max(1.0));
            }
        }
    }
}
