//! Synthetic heterodyne chain.
//!
//! An ideal heterodyne measurement of `ρ` returns `α` distributed by the
//! Husimi function `Q(α) = ⟨α|ρ|α⟩/π²`. The amplifier adds circular Gaussian
//! noise `ξ` with `E|ξ|² = n_add` and scales by `√G`, so `S = √G (α + ξ)`
//! (the `√(G−1) ≈ √G` limit).
//!
//! Every record draws from its own ChaCha stream (`set_stream(index)`), so
//! output does not depend on thread scheduling.

use nalgebra::{Cholesky, DVector, Matrix4, SymmetricEigen, Vector4};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupledmode::{Envelope, TimeGrid, Waveform};
use crate::error::{Error, Result};
use crate::fockspace::{annihilation, DensityMatrix, FockOperator, Mode};
use crate::moments::linear_gain;
use crate::sourcemodel::HeraldKind;

const PROPOSAL_INFLATION: f64 = 1.5;
const BOUND_SAFETY: f64 = 1.5;
const BOUND_PROBES: u64 = 20_000;
const MIN_ACCEPTANCE: f64 = 1e-4;
const MAX_BOUND_RETRIES: usize = 6;
/// Stream reserved for the envelope-bound probe draws.
const PROBE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmplifierModel {
    pub gain_db: f64,
    /// Added noise quanta; the anti-normal noise moment is `n_add + 1`.
    pub n_add_e: f64,
    pub n_add_l: f64,
}

impl Default for AmplifierModel {
    fn default() -> Self {
        AmplifierModel {
            gain_db: 107.4,
            n_add_e: 2.6,
            n_add_l: 2.6,
        }
    }
}

impl AmplifierModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_db > 0.0) {
            return Err(Error::param("gain_db", "must be positive"));
        }
        linear_gain(self.gain_db)?;
        for (name, v) in [("n_add_e", self.n_add_e), ("n_add_l", self.n_add_l)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, "added noise must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn gain(&self) -> f64 {
        10f64.powf(self.gain_db / 10.0)
    }
}

/// One trial: filtered amplitudes plus the herald that triggered it.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageRecord {
    pub herald: Option<HeraldKind>,
    pub s_e: C64,
    pub s_l: C64,
    pub waveform: Option<Waveform>,
    pub seed_id: u64,
}

impl VoltageRecord {
    pub fn amplitudes(&self) -> (C64, C64) {
        (self.s_e, self.s_l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Exact rejection sampling of the Husimi function.
    Husimi,
    /// Gaussian with the Husimi mean and covariance. Approximate: biases
    /// moments beyond second order. For smoke tests only.
    GaussianApprox,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn complex_normal(rng: &mut impl Rng, mean_sq: f64) -> C64 {
    let s = (mean_sq / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re * s, im * s)
}

/// Rejection sampler for the two-mode Husimi function of a fixed state.
#[derive(Debug, Clone)]
pub struct HusimiSampler {
    d_e: usize,
    d_l: usize,
    /// `√λ_k ψ_k` for the retained eigenpairs.
    components: Vec<DVector<C64>>,
    inv_sqrt_fact: Vec<f64>,
    mean: Vector4<f64>,
    cov: Matrix4<f64>,
    proposal_chol: Matrix4<f64>,
    proposal_inv: Matrix4<f64>,
    proposal_log_norm: f64,
}

/// Outcome of a sampling run, with the diagnostic acceptance rate.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub amplitudes: Vec<(C64, C64)>,
    pub acceptance: f64,
    pub bound: f64,
}

impl HusimiSampler {
    pub fn new(rho: &DensityMatrix) -> Result<Self> {
        let dims = rho.dims();
        let eig = SymmetricEigen::new(rho.matrix().clone());
        let components: Vec<DVector<C64>> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 1e-13)
            .map(|(k, &l)| eig.eigenvectors.column(k).into_owned() * C64::new(l.sqrt(), 0.0))
            .collect();
        let dmax = dims.d_e.max(dims.d_l);
        let mut inv_sqrt_fact = vec![1.0; dmax];
        for n in 1..dmax {
            inv_sqrt_fact[n] = inv_sqrt_fact[n - 1] / (n as f64).sqrt();
        }
        let (mean, cov) = husimi_moments(rho);
        let prop = cov * PROPOSAL_INFLATION;
        let chol =
            Cholesky::new(prop).ok_or_else(|| Error::param("rho", "Husimi covariance is not positive definite"))?;
        let l = chol.l();
        let inv = chol.inverse();
        let det: f64 = l.diagonal().iter().map(|v| v * v).product();
        let proposal_log_norm = -0.5 * (4.0 * (2.0 * std::f64::consts::PI).ln() + det.ln());
        Ok(HusimiSampler {
            d_e: dims.d_e,
            d_l: dims.d_l,
            components,
            inv_sqrt_fact,
            mean,
            cov,
            proposal_chol: l,
            proposal_inv: inv,
            proposal_log_norm,
        })
    }

    /// Mean of `(Re α, Im α, Re β, Im β)` under `Q`.
    pub fn mean(&self) -> Vector4<f64> {
        self.mean
    }

    pub fn covariance(&self) -> Matrix4<f64> {
        self.cov
    }

    /// `Q(α, β)` as a density over the four real coordinates.
    pub fn q(&self, alpha: C64, beta: C64) -> f64 {
        let pa: Vec<C64> = powers(alpha.conj(), self.d_e);
        let pb: Vec<C64> = powers(beta.conj(), self.d_l);
        let pref = (-(alpha.norm_sqr() + beta.norm_sqr())).exp() / (std::f64::consts::PI.powi(2));
        let mut total = 0.0;
        for w in &self.components {
            let mut acc = C64::new(0.0, 0.0);
            for ne in 0..self.d_e {
                let ce = pa[ne] * self.inv_sqrt_fact[ne];
                for nl in 0..self.d_l {
                    acc += ce * pb[nl] * self.inv_sqrt_fact[nl] * w[ne * self.d_l + nl];
                }
            }
            total += acc.norm_sqr();
        }
        total * pref
    }

    fn proposal(&self, rng: &mut impl Rng) -> Vector4<f64> {
        let w = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        self.mean + self.proposal_chol * w
    }

    fn proposal_density(&self, x: &Vector4<f64>) -> f64 {
        let d = x - self.mean;
        (self.proposal_log_norm - 0.5 * (d.transpose() * self.proposal_inv * d)[(0, 0)]).exp()
    }

    fn ratio(&self, x: &Vector4<f64>) -> f64 {
        self.q(C64::new(x[0], x[1]), C64::new(x[2], x[3])) / self.proposal_density(x)
    }

    fn estimate_bound(&self, seed: u64) -> f64 {
        let mut rng = stream_rng(seed, PROBE_STREAM);
        let mut best: f64 = 0.0;
        for _ in 0..BOUND_PROBES {
            let x = self.proposal(&mut rng);
            best = best.max(self.ratio(&x));
        }
        best * BOUND_SAFETY
    }

    /// Draws `n` device-scale points `(α, β)` from `Q`.
    pub fn sample_points(&self, n: usize, seed: u64, mode: SamplingMode) -> Result<(Vec<(C64, C64)>, f64, f64)> {
        if n == 0 {
            return Err(Error::param("n_records", "must be at least 1"));
        }
        if mode == SamplingMode::GaussianApprox {
            let chol = Cholesky::new(self.cov).expect("covariance checked at construction").l();
            let pts = (0..n as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream_rng(seed, i);
                    let w = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                    let x = self.mean + chol * w;
                    (C64::new(x[0], x[1]), C64::new(x[2], x[3]))
                })
                .collect();
            return Ok((pts, 1.0, 1.0));
        }
        let mut bound = self.estimate_bound(seed);
        let max_tries = (1.0 / MIN_ACCEPTANCE) as u64 * 10;
        for _ in 0..MAX_BOUND_RETRIES {
            let results: Vec<std::result::Result<((C64, C64), u64), f64>> = (0..n as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream_rng(seed, i);
                    let mut worst: f64 = 0.0;
                    for tries in 1..=max_tries {
                        let x = self.proposal(&mut rng);
                        let u: f64 = rng.random();
                        let r = self.ratio(&x);
                        if r > bound {
                            worst = worst.max(r);
                            return Err(worst);
                        }
                        if u * bound < r {
                            return Ok(((C64::new(x[0], x[1]), C64::new(x[2], x[3])), tries));
                        }
                    }
                    Ok(((C64::new(f64::NAN, 0.0), C64::new(0.0, 0.0)), u64::MAX))
                })
                .collect();
            let exceeded = results
                .iter()
                .filter_map(|r| r.as_ref().err())
                .fold(0.0, |a: f64, &b| a.max(b));
            if exceeded > 0.0 {
                bound = exceeded * BOUND_SAFETY;
                continue;
            }
            let mut total: u64 = 0;
            let mut pts = Vec::with_capacity(n);
            for r in results {
                let (p, tries) = r.expect("no bound violations");
                if tries == u64::MAX {
                    return Err(Error::SamplerAcceptance {
                        acceptance: 1.0 / max_tries as f64,
                        bound,
                    });
                }
                total += tries;
                pts.push(p);
            }
            let acceptance = n as f64 / total as f64;
            if acceptance < MIN_ACCEPTANCE {
                return Err(Error::SamplerAcceptance { acceptance, bound });
            }
            return Ok((pts, acceptance, bound));
        }
        Err(Error::SamplerAcceptance { acceptance: 0.0, bound })
    }

    /// Heterodyne outputs `S = √G (α + ξ)` for `n` records.
    pub fn sample(&self, amp: &AmplifierModel, n: usize, seed: u64, mode: SamplingMode) -> Result<SampleBatch> {
        amp.validate()?;
        let (pts, acceptance, bound) = self.sample_points(n, seed, mode)?;
        let g = amp.gain().sqrt();
        // Amplifier noise draws from streams of a derived seed.
        let amplitudes = pts
            .into_par_iter()
            .enumerate()
            .map(|(i, (a, b))| {
                let mut rng = stream_rng(seed ^ 0x9E37_79B9_7F4A_7C15, i as u64);
                let xe = complex_normal(&mut rng, amp.n_add_e);
                let xl = complex_normal(&mut rng, amp.n_add_l);
                ((a + xe) * g, (b + xl) * g)
            })
            .collect();
        Ok(SampleBatch {
            amplitudes,
            acceptance,
            bound,
        })
    }
}

fn powers(z: C64, n: usize) -> Vec<C64> {
    let mut p = Vec::with_capacity(n);
    let mut v = C64::new(1.0, 0.0);
    for _ in 0..n {
        p.push(v);
        v *= z;
    }
    p
}

/// Mean and covariance of `(Re α, Im α, Re β, Im β)` under `Q(ρ)`.
fn husimi_moments(rho: &DensityMatrix) -> (Vector4<f64>, Matrix4<f64>) {
    let dims = rho.dims();
    let a = annihilation(dims, Mode::Early);
    let b = annihilation(dims, Mode::Late);
    let ev = |op: &FockOperator| rho.expect(op);
    let ma = ev(&a);
    let mb = ev(&b);
    // Anti-normal second moments, with the commutator added analytically so the
    // truncation edge does not bias ⟨ĈĈ†⟩.
    let aa_dag = ev(&a.dagger().mul(&a)) + 1.0;
    let bb_dag = ev(&b.dagger().mul(&b)) + 1.0;
    let ab_dag = ev(&b.dagger().mul(&a));
    let aa = ev(&a.mul(&a));
    let bb = ev(&b.mul(&b));
    let ab = ev(&a.mul(&b));
    let z = [ma, mb];
    // E[z_i z_j*] and E[z_i z_j].
    let herm = [[aa_dag, ab_dag], [ab_dag.conj(), bb_dag]];
    let sym = [[aa, ab], [ab, bb]];
    let mean = Vector4::new(ma.re, ma.im, mb.re, mb.im);
    let mut cov = Matrix4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            let h = herm[i][j] - z[i] * z[j].conj();
            let s = sym[i][j] - z[i] * z[j];
            cov[(2 * i, 2 * j)] = 0.5 * (h + s).re;
            cov[(2 * i + 1, 2 * j + 1)] = 0.5 * (h - s).re;
            cov[(2 * i, 2 * j + 1)] = 0.5 * (s - h).im;
            cov[(2 * i + 1, 2 * j)] = 0.5 * (s + h).im;
        }
    }
    (mean, cov)
}

/// Heterodyne samples of `ρ` through `amp`, `n_records` of them.
pub fn sample_filtered_amplitudes(
    rho: &DensityMatrix,
    amp: &AmplifierModel,
    n_records: usize,
    seed: u64,
) -> Result<Vec<(C64, C64)>> {
    Ok(HusimiSampler::new(rho)?
        .sample(amp, n_records, seed, SamplingMode::Husimi)?
        .amplitudes)
}

/// Amplifier noise alone (the vacuum path): `S = √G z` with `E|z|² = n_add + 1`.
pub fn calibration_records(amp: &AmplifierModel, n_records: usize, seed: u64) -> Result<Vec<(C64, C64)>> {
    amp.validate()?;
    let g = amp.gain().sqrt();
    Ok((0..n_records as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            (
                complex_normal(&mut rng, amp.n_add_e + 1.0) * g,
                complex_normal(&mut rng, amp.n_add_l + 1.0) * g,
            )
        })
        .collect())
}

/// `V(t) = S_e f(t−T_e) + S_l f(t−T_l) + n(t)` with white complex noise of
/// one-sided density `noise_psd`, so a unit-norm matched filter sees noise
/// variance `noise_psd`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_waveform(
    s_e: C64,
    s_l: C64,
    f: &Envelope,
    t_e: f64,
    t_l: f64,
    t_d: f64,
    noise_psd: f64,
    grid: TimeGrid,
    seed: u64,
) -> Result<Waveform> {
    if ((f.dt() - grid.dt) / grid.dt).abs() > 1e-9 {
        return Err(Error::DimensionMismatch(
            "envelope and grid sample intervals differ".into(),
        ));
    }
    if ((t_l - t_e) - t_d).abs() > grid.dt {
        return Err(Error::param(
            "t_l",
            format!("bin separation {} s differs from T_d = {t_d} s", t_l - t_e),
        ));
    }
    if !(noise_psd >= 0.0) {
        return Err(Error::param("noise_psd", "must be nonnegative"));
    }
    let mut w = Waveform::zeros(grid);
    let f_end = f.t0() + (f.samples().len() - 1) as f64 * f.dt();
    for shift in [t_e, t_l] {
        if shift + f.t0() < grid.t0 - 1e-6 * grid.dt || shift + f_end > grid.end() + 1e-6 * grid.dt {
            let mut probe = Waveform::zeros(grid);
            probe.add_scaled(f, C64::new(1.0, 0.0), shift);
            return Err(Error::GridCoverage {
                captured: probe.energy(),
            });
        }
    }
    w.add_scaled(f, s_e, t_e);
    w.add_scaled(f, s_l, t_l);
    if noise_psd > 0.0 {
        let mut rng = stream_rng(seed, 0);
        let var = noise_psd / grid.dt;
        for z in w.samples.iter_mut() {
            *z += complex_normal(&mut rng, var);
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupledmode::{envelope, matched_filter, CoupledModeRates, DEFAULT_DELAY, DEFAULT_DT};
    use crate::fockspace::FockDims;
    use crate::moments::{estimate_moments, forward_moments, state_moments, thermal_noise_tensor};
    use approx::assert_abs_diff_eq;

    fn amp(n: f64) -> AmplifierModel {
        AmplifierModel {
            gain_db: 107.4,
            n_add_e: n,
            n_add_l: n,
        }
    }

    fn mean_sd(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn gain_must_be_large() {
        let mut a = amp(2.6);
        a.gain_db = 20.0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn husimi_is_normalized() {
        let dims = FockDims::default();
        let rho = DensityMatrix::fock(dims, 1, 2).unwrap();
        let s = HusimiSampler::new(&rho).unwrap();
        // Q factorizes: |α|²e^{-|α|²}/π · |β|⁴e^{-|β|²}/(2π).
        let (a, b) = (C64::new(0.7, -0.2), C64::new(-1.1, 0.4));
        let want =
            a.norm_sqr() * (-a.norm_sqr()).exp() / std::f64::consts::PI * b.norm_sqr().powi(2) * (-b.norm_sqr()).exp()
                / (2.0 * std::f64::consts::PI);
        assert_abs_diff_eq!(s.q(a, b), want, epsilon = 1e-14);
    }

    #[test]
    fn vacuum_intensity_with_noise() {
        let rho = DensityMatrix::vacuum(FockDims::default()).unwrap();
        let a = amp(2.6);
        let recs = sample_filtered_amplitudes(&rho, &a, 100_000, 1).unwrap();
        let x: Vec<f64> = recs.iter().map(|(e, _)| e.norm_sqr() / a.gain()).collect();
        let (m, sd) = mean_sd(&x);
        assert!((m - 3.6).abs() < 3.0 * sd, "{m} ± {sd}");
    }

    #[test]
    fn single_photon_antinormal_intensity() {
        let rho = DensityMatrix::fock(FockDims::default(), 1, 0).unwrap();
        let a = amp(0.0);
        let recs = sample_filtered_amplitudes(&rho, &a, 100_000, 2).unwrap();
        let x: Vec<f64> = recs.iter().map(|(e, _)| e.norm_sqr() / a.gain()).collect();
        let (m, sd) = mean_sd(&x);
        assert!((m - 2.0).abs() < 3.0 * sd, "{m} ± {sd}");
    }

    #[test]
    fn cross_mode_coherence() {
        let dims = FockDims::default();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut v = vec![C64::new(0.0, 0.0); dims.joint()];
        v[dims.index(1, 0)] = C64::new(h, 0.0);
        v[dims.index(0, 1)] = C64::new(h, 0.0);
        let rho = DensityMatrix::from_pure(dims, &v).unwrap();
        let a = amp(2.6);
        let recs = sample_filtered_amplitudes(&rho, &a, 100_000, 3).unwrap();
        let x: Vec<f64> = recs.iter().map(|(e, l)| (e.conj() * l).re / a.gain()).collect();
        let (m, sd) = mean_sd(&x);
        assert!((m - 0.5).abs() < 3.0 * sd, "{m} ± {sd}");
    }

    #[test]
    fn records_reproducible_and_order_independent() {
        let rho = DensityMatrix::fock(FockDims::default(), 1, 0).unwrap();
        let s = HusimiSampler::new(&rho).unwrap();
        let a = s.sample(&amp(2.6), 500, 9, SamplingMode::Husimi).unwrap();
        let b = s.sample(&amp(2.6), 500, 9, SamplingMode::Husimi).unwrap();
        assert_eq!(a.amplitudes, b.amplitudes);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| s.sample(&amp(2.6), 500, 9, SamplingMode::Husimi).unwrap());
        assert_eq!(a.amplitudes, c.amplitudes);
        assert!(a.acceptance > 0.05);
    }

    #[test]
    fn sampler_matches_forward_moments() {
        use crate::sourcemodel::{conditional_state, HeraldKind, HeraldMode, NoiseParams};
        let dims = FockDims::default();
        let rho = conditional_state(&NoiseParams::default(), &HeraldMode::of(HeraldKind::Plus), dims).unwrap();
        let a = amp(2.6);
        let recs = sample_filtered_amplitudes(&rho, &a, 100_000, 4).unwrap();
        let s = estimate_moments(&recs, 4).unwrap();
        let c = state_moments(&rho, 4).unwrap();
        let h = thermal_noise_tensor(4, 2.6, 2.6).unwrap();
        let f = forward_moments(&c, &h, a.gain_db).unwrap();
        for &idx in s.indices().iter().skip(1) {
            let diff = (s.get(idx).unwrap() - f.get(idx).unwrap()).norm();
            let sd = s.variance(idx).unwrap().sqrt();
            assert!(diff < 4.0 * sd, "{idx:?}: {diff} vs σ {sd}");
        }
    }

    #[test]
    fn calibration_statistics() {
        let a = amp(2.6);
        let recs = calibration_records(&a, 100_000, 8).unwrap();
        let re: Vec<f64> = recs.iter().map(|(e, _)| e.re / a.gain().sqrt()).collect();
        let (m, sd) = mean_sd(&re);
        assert!(m.abs() < 3.0 * sd);
        let i2: Vec<f64> = recs.iter().map(|(e, _)| e.norm_sqr() / a.gain()).collect();
        let i4: Vec<f64> = i2.iter().map(|v| v * v).collect();
        let (m2, _) = mean_sd(&i2);
        let (m4, sd4) = mean_sd(&i4);
        assert!(
            (m4 - 2.0 * m2 * m2).abs() < 3.0 * sd4 + 1e-9,
            "{m4} vs {}",
            2.0 * m2 * m2
        );
        let (_, _) = (m2, sd4);
        assert!((m2 - 3.6).abs() < 0.05);
    }

    fn env() -> Envelope {
        let r = CoupledModeRates::default();
        envelope(&r, TimeGrid::for_rates(&r, DEFAULT_DT).unwrap(), true).unwrap()
    }

    fn long_grid(f: &Envelope) -> TimeGrid {
        TimeGrid::new(0.0, DEFAULT_DT, f.samples().len() + 200).unwrap()
    }

    #[test]
    fn waveform_round_trip_without_noise() {
        let f = env();
        let (te, tl) = (100e-9, 100e-9 + DEFAULT_DELAY);
        let (se, sl) = (C64::new(1.2, -0.4), C64::new(-0.3, 0.8));
        let w = synthesize_waveform(se, sl, &f, te, tl, DEFAULT_DELAY, 0.0, long_grid(&f), 0).unwrap();
        let ge = matched_filter(&w, &f, te).unwrap();
        let gl = matched_filter(&w, &f, tl).unwrap();
        assert!((ge - se).norm() < 0.02 * se.norm().max(sl.norm()));
        assert!((gl - sl).norm() < 0.02 * se.norm().max(sl.norm()));
        let w2 = synthesize_waveform(se * 2.0, sl * 2.0, &f, te, tl, DEFAULT_DELAY, 0.0, long_grid(&f), 0).unwrap();
        assert_abs_diff_eq!(
            (matched_filter(&w2, &f, te).unwrap() - ge * 2.0).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn pure_noise_filter_variance() {
        let f = env();
        let psd = 0.5;
        let grid = long_grid(&f);
        let outs: Vec<C64> = (0..2000)
            .map(|s| {
                let w = synthesize_waveform(
                    C64::default(),
                    C64::default(),
                    &f,
                    0.0,
                    DEFAULT_DELAY,
                    DEFAULT_DELAY,
                    psd,
                    grid,
                    s,
                )
                .unwrap();
                matched_filter(&w, &f, 0.0).unwrap()
            })
            .collect();
        let mean: C64 = outs.iter().sum::<C64>() / outs.len() as f64;
        let var = outs.iter().map(|z| (z - mean).norm_sqr()).sum::<f64>() / (outs.len() - 1) as f64;
        assert!(mean.norm() < 0.1);
        assert!((var / psd - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn waveform_preconditions() {
        let f = env();
        let grid = long_grid(&f);
        assert!(synthesize_waveform(
            C64::default(),
            C64::default(),
            &f,
            0.0,
            100e-9,
            DEFAULT_DELAY,
            0.0,
            grid,
            0
        )
        .is_err());
        let short = TimeGrid::new(0.0, DEFAULT_DT, 50).unwrap();
        assert!(matches!(
            synthesize_waveform(
                C64::default(),
                C64::default(),
                &f,
                0.0,
                DEFAULT_DELAY,
                DEFAULT_DELAY,
                0.0,
                short,
                0
            ),
            Err(Error::GridCoverage { .. })
        ));
    }
}
