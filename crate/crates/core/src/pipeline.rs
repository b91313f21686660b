//! Experiment configuration, simulation and analysis orchestration, record
//! persistence and reports.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coupledmode::{
    analytic_overlap, envelope, extraction_efficiency, matched_filter, orthogonal_delay, swap_delay, CoupledModeRates,
    CyclicRates, Envelope, TimeGrid, DEFAULT_DELAY, DEFAULT_DT,
};
use crate::error::{Error, Result};
use crate::fockspace::{normal_moment, FockDims, Mode};
use crate::heterodyne::{
    calibration_records, synthesize_waveform, AmplifierModel, HusimiSampler, SamplingMode, VoltageRecord,
};
use crate::moments::{estimate_moments, invert_moments, noise_moments, MomentTensor};
use crate::sourcemodel::{
    self, fidelity_lower_bound, herald_statistics, heralded_state, rotated_intensity, unconditional_state, Basis,
    HeraldKind, HeraldMode, HeraldStates, Matrix2, ModelReport, NoiseParams, PairSourceParams, DEFAULT_PHI,
};
use crate::tomography::{self, BootstrapResult, HeraldTensors, ReconstructionConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Smallest herald count per basis for the statistical stages.
pub const MIN_HERALDS: usize = 100;
const BINARY_MAGIC: &[u8; 4] = b"DUET";
const BINARY_VERSION: u16 = 1;
const CSV_HEADER: &str = "herald,re_Se,im_Se,re_Sl,im_Sl,seed_id";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    /// Pump-pulse separation.
    pub t_d: f64,
    /// Two-sigma pump duration.
    pub t_p: f64,
    /// Repetition period.
    pub t_r: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            t_d: DEFAULT_DELAY,
            t_p: 96e-9,
            t_r: 20e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeraldCounts {
    pub z: usize,
    pub x: usize,
    pub calibration: usize,
    /// Records without a herald, for the unconditional noise baseline.
    pub unconditional: usize,
    pub sampling: SamplingMode,
}

impl Default for HeraldCounts {
    fn default() -> Self {
        HeraldCounts {
            z: 300_000,
            x: 70_000,
            calibration: 300_000,
            unconditional: 100_000,
            sampling: SamplingMode::Husimi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSettings {
    /// Optical measurement phase of the X-basis heralds.
    pub phi_opt: f64,
    /// Microwave analysis phase.
    pub phi_m: f64,
    /// Points of the `φ_m` scan over one period.
    pub scan_points: usize,
}

impl Default for PhaseSettings {
    fn default() -> Self {
        PhaseSettings {
            phi_opt: DEFAULT_PHI,
            phi_m: DEFAULT_PHI,
            scan_points: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub max_order: usize,
    pub dims: FockDims,
    pub tol_objective: f64,
    pub max_iterations: usize,
    pub bootstrap_iterations: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            max_order: 4,
            dims: FockDims { d_e: 3, d_l: 3 },
            tol_objective: 1e-8,
            max_iterations: 5000,
            bootstrap_iterations: tomography::DEFAULT_BOOTSTRAP_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rates: CyclicRates,
    pub noise: NoiseParams,
    pub source: PairSourceParams,
    pub amplifier: AmplifierModel,
    /// Fock space of the simulated conditional states.
    pub dims: FockDims,
    pub timing: Timing,
    pub heralds: HeraldCounts,
    pub phases: PhaseSettings,
    pub analysis: AnalysisSettings,
}

impl Default for ExperimentConfig {
    /// Model settings: ideal optical interference and no dark counts.
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            rates: CyclicRates::default(),
            noise: NoiseParams::default(),
            source: PairSourceParams {
                optical_visibility: 1.0,
                dark_rate: 0.0,
                ..PairSourceParams::default()
            },
            amplifier: AmplifierModel::default(),
            dims: FockDims::default(),
            timing: Timing::default(),
            heralds: HeraldCounts::default(),
            phases: PhaseSettings::default(),
            analysis: AnalysisSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Measured-level imperfections: 94 % optical interference visibility and
    /// dark counts making up about 1 % of heralds.
    pub fn measured() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.source.optical_visibility = 0.94;
        cfg.source.dark_rate = 0.01 * cfg.source.p * cfg.source.eta_opt;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        CoupledModeRates::from_cyclic(&self.rates)?;
        self.noise.validate()?;
        self.source.validate()?;
        self.amplifier.validate()?;
        self.dims.validate()?;
        for (name, v) in [
            ("t_d", self.timing.t_d),
            ("t_p", self.timing.t_p),
            ("t_r", self.timing.t_r),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be positive"));
            }
        }
        if self.heralds.calibration < MIN_HERALDS {
            return Err(Error::param(
                "calibration",
                format!("needs at least {MIN_HERALDS} records"),
            ));
        }
        if self.phases.scan_points < 6 {
            return Err(Error::param("scan_points", "needs at least 6 points"));
        }
        if !(self.phases.phi_opt.is_finite() && self.phases.phi_m.is_finite()) {
            return Err(Error::param("phases", "must be finite"));
        }
        self.reconstruction().validate()
    }

    pub fn reconstruction(&self) -> ReconstructionConfig {
        ReconstructionConfig {
            dims: self.analysis.dims,
            max_order: self.analysis.max_order,
            tol_objective: self.analysis.tol_objective,
            max_iterations: self.analysis.max_iterations,
            seed: self.seed,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        ExperimentConfig::from_toml(&text)
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Independent seed for a named stage.
fn stage_seed(seed: u64, stage: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub p_click: f64,
    /// Heralds per second of the emulated experiment.
    pub herald_rate: f64,
    /// Wall-clock time the emulated experiment would need for all heralds.
    pub equivalent_duration: f64,
    /// Rejection-sampler acceptance per herald in `early, late, plus, minus` order.
    pub acceptance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub z_records: Vec<VoltageRecord>,
    pub x_records: Vec<VoltageRecord>,
    pub calibration: Vec<VoltageRecord>,
    pub unconditional: Vec<VoltageRecord>,
    pub metadata: SimulationMetadata,
}

/// Conditional microwave states at the configured imperfections.
pub fn herald_states(cfg: &ExperimentConfig) -> Result<HeraldStates> {
    let state = |kind| {
        heralded_state(
            &cfg.noise,
            &HeraldMode::new(kind, cfg.phases.phi_opt, cfg.phases.phi_m),
            &cfg.source,
            cfg.dims,
        )
    };
    Ok(HeraldStates {
        early: state(HeraldKind::Early)?,
        late: state(HeraldKind::Late)?,
        plus: state(HeraldKind::Plus)?,
        minus: state(HeraldKind::Minus)?,
    })
}

fn untagged(amplitudes: Vec<(C64, C64)>) -> Vec<VoltageRecord> {
    amplitudes
        .into_iter()
        .enumerate()
        .map(|(i, (s_e, s_l))| VoltageRecord {
            herald: None,
            s_e,
            s_l,
            waveform: None,
            seed_id: i as u64,
        })
        .collect()
}

/// Herald-tagged records of one basis, with the herald sequence drawn first
/// and each herald's amplitudes sampled from its conditional state.
fn basis_records(
    cfg: &ExperimentConfig,
    states: &HeraldStates,
    kinds: [HeraldKind; 2],
    n: usize,
    acceptance: &mut Vec<f64>,
) -> Result<Vec<VoltageRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, 1));
    rng.set_stream(kinds[0] as u64);
    let sequence: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let mut batches = Vec::new();
    for (j, kind) in kinds.into_iter().enumerate() {
        let count = sequence.iter().filter(|&&second| second == (j == 1)).count();
        if count == 0 {
            acceptance.push(f64::NAN);
            batches.push(Vec::new().into_iter());
            continue;
        }
        let batch = HusimiSampler::new(states.get(kind))?.sample(
            &cfg.amplifier,
            count,
            stage_seed(cfg.seed, 10 + kind as u64),
            cfg.heralds.sampling,
        )?;
        acceptance.push(batch.acceptance);
        batches.push(batch.amplitudes.into_iter());
    }
    Ok(sequence
        .into_iter()
        .enumerate()
        .map(|(i, second)| {
            let j = usize::from(second);
            let (s_e, s_l) = batches[j].next().expect("batch sized to its herald count");
            VoltageRecord {
                herald: Some(kinds[j]),
                s_e,
                s_l,
                waveform: None,
                seed_id: i as u64,
            }
        })
        .collect())
}

/// Draws heralds directly with their conditional statistics rather than
/// simulating every repetition of the experiment.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<SimulationOutput> {
    cfg.validate()?;
    let stats = herald_statistics(&cfg.source, cfg.timing.t_r)?;
    let (n_z, n_x) = if stats.p_click > 0.0 {
        (cfg.heralds.z, cfg.heralds.x)
    } else {
        (0, 0)
    };
    let mut acceptance = Vec::new();
    let (z_records, x_records) = if n_z + n_x > 0 {
        let states = herald_states(cfg).map_err(|e| e.in_stage("conditional states"))?;
        (
            basis_records(
                cfg,
                &states,
                [HeraldKind::Early, HeraldKind::Late],
                n_z,
                &mut acceptance,
            )
            .map_err(|e| e.in_stage("Z-basis records"))?,
            basis_records(
                cfg,
                &states,
                [HeraldKind::Plus, HeraldKind::Minus],
                n_x,
                &mut acceptance,
            )
            .map_err(|e| e.in_stage("X-basis records"))?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let calibration = untagged(
        calibration_records(&cfg.amplifier, cfg.heralds.calibration, stage_seed(cfg.seed, 2))
            .map_err(|e| e.in_stage("calibration records"))?,
    );
    let unconditional = if cfg.heralds.unconditional > 0 {
        let rho = unconditional_state(&cfg.noise, cfg.dims)?;
        untagged(
            HusimiSampler::new(&rho)?
                .sample(
                    &cfg.amplifier,
                    cfg.heralds.unconditional,
                    stage_seed(cfg.seed, 3),
                    cfg.heralds.sampling,
                )
                .map_err(|e| e.in_stage("unconditional records"))?
                .amplitudes,
        )
    } else {
        Vec::new()
    };
    let total = (n_z + n_x) as f64;
    Ok(SimulationOutput {
        z_records,
        x_records,
        calibration,
        unconditional,
        metadata: SimulationMetadata {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: VERSION.to_string(),
            p_click: stats.p_click,
            herald_rate: stats.rate,
            equivalent_duration: if stats.rate > 0.0 { total / stats.rate } else { 0.0 },
            acceptance,
        },
    })
}

fn amplitudes_of(records: &[VoltageRecord], kind: HeraldKind) -> Vec<(C64, C64)> {
    records
        .iter()
        .filter(|r| r.herald == Some(kind))
        .map(VoltageRecord::amplitudes)
        .collect()
}

/// `(A, k, φ₀, B)` of `A cos(k x + φ₀) + B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub amplitude: f64,
    pub k: f64,
    pub phi0: f64,
    pub offset: f64,
    /// Parameter covariance in `(A, k, φ₀, B)` order, row-major.
    pub covariance: Vec<f64>,
    pub residual_rms: f64,
    /// The amplitude is indistinguishable from zero, so `k` and `φ₀` are not
    /// determined.
    pub phase_undetermined: bool,
}

impl FringeFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (self.k * x + self.phi0).cos() + self.offset
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.covariance[i * 4 + i]
    }
}

fn cosine_basis_fit(x: &[f64], y: &[f64], k: f64) -> Option<(f64, [f64; 3])> {
    let n = x.len();
    let a = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => (k * x[i]).cos(),
        1 => (k * x[i]).sin(),
        _ => 1.0,
    });
    let b = DVector::from_column_slice(y);
    let sol = a.clone().svd(true, true).solve(&b, 1e-14).ok()?;
    let rss = (&a * &sol - &b).norm_squared();
    Some((rss, [sol[0], sol[1], sol[2]]))
}

/// Least-squares `A cos(k x + φ₀) + B` by Levenberg-Marquardt, started from
/// the best fixed-`k` linear fit on a frequency grid.
pub fn fit_fringe(x: &[f64], y: &[f64]) -> Result<FringeFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::DimensionMismatch(format!("{n} x values, {} y values", y.len())));
    }
    if n < 6 {
        return Err(Error::InsufficientData { got: n, need: 6 });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite input".into()));
    }
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::Fit("x values do not span an interval".into()));
    }
    // Half a period over the span up to the sampling limit.
    let k_min = PI / span;
    let k_max = PI * (n - 1) as f64 / span;
    let steps = 20 * n;
    let mut best: Option<(f64, f64, [f64; 3])> = None;
    for i in 0..=steps {
        let k = k_min + (k_max - k_min) * i as f64 / steps as f64;
        if let Some((rss, c)) = cosine_basis_fit(x, y, k) {
            if best.is_none_or(|b| rss < b.0) {
                best = Some((rss, k, c));
            }
        }
    }
    let (_, k0, c) = best.ok_or_else(|| Error::Fit("no initial guess".into()))?;
    let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let a0 = c[0].hypot(c[1]);
    let mean = y.iter().sum::<f64>() / n as f64;
    if a0 <= 1e-12 * scale {
        let rss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let mut covariance = vec![0.0; 16];
        covariance[5] = f64::INFINITY;
        covariance[10] = f64::INFINITY;
        covariance[15] = rss / ((n - 1) * n) as f64;
        return Ok(FringeFit {
            amplitude: 0.0,
            k: k0,
            phi0: 0.0,
            offset: mean,
            covariance,
            residual_rms: (rss / n as f64).sqrt(),
            phase_undetermined: true,
        });
    }
    // c0 cos + c1 sin = A cos(kx + φ) with A cos φ = c0, −A sin φ = c1.
    let mut p = [a0, k0, (-c[1]).atan2(c[0]), c[2]];
    let residuals = |p: &[f64; 4]| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(&xi, &yi)| p[0] * (p[1] * xi + p[2]).cos() + p[3] - yi)
            .collect()
    };
    let jacobian = |p: &[f64; 4]| {
        DMatrix::from_fn(n, 4, |i, j| {
            let arg = p[1] * x[i] + p[2];
            match j {
                0 => arg.cos(),
                1 => -p[0] * x[i] * arg.sin(),
                2 => -p[0] * arg.sin(),
                _ => 1.0,
            }
        })
    };
    let rss_of = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut r = residuals(&p);
    let mut rss = rss_of(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..500 {
        let j = jacobian(&p);
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * DVector::from_column_slice(&r);
        let mut improved = false;
        for _ in 0..30 {
            let mut m = jtj.clone();
            for d in 0..4 {
                m[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(delta) = m.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2], p[3] + delta[3]];
            let rt = residuals(&trial);
            let rss_t = rss_of(&rt);
            if rss_t <= rss {
                let small = rss - rss_t <= 1e-15 * rss.max(1e-300) || delta.norm() <= 1e-14 * (1.0 + p[1].abs());
                p = trial;
                r = rt;
                rss = rss_t;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                converged = small;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || converged || rss <= 1e-30 * scale * scale * n as f64 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Fit(format!(
            "no convergence from A={a0:.4e}, k={k0:.4e}, phi0={:.4}, B={:.4e}",
            (-c[1]).atan2(c[0]),
            c[2]
        )));
    }
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[2] += PI;
    }
    p[2] = (p[2] + PI).rem_euclid(TAU) - PI;
    let j = jacobian(&p);
    let dof = (n - 4).max(1) as f64;
    let sigma2 = rss / dof;
    let cov = (j.transpose() * &j)
        .try_inverse()
        .map(|m| m * sigma2)
        .unwrap_or_else(|| DMatrix::from_element(4, 4, f64::INFINITY));
    let covariance: Vec<f64> = (0..4)
        .flat_map(|i| (0..4).map(move |k| (i, k)))
        .map(|(i, k)| cov[(i, k)])
        .collect();
    let phase_undetermined = !(p[0] > 3.0 * covariance[0].sqrt());
    Ok(FringeFit {
        amplitude: p[0],
        k: p[1],
        phi0: p[2],
        offset: p[3],
        covariance,
        residual_rms: (rss / n as f64).sqrt(),
        phase_undetermined: phase_undetermined && sigma2 > 0.0,
    })
}

/// `⟨Ĉ_φ†Ĉ_φ⟩` of `(Ĉ_e + e^{iφ}Ĉ_l)/√2` from normal-ordered moments.
pub fn rotated_intensity_from_moments(c: &MomentTensor, phi: f64) -> Result<f64> {
    let ne = c.get((1, 1, 0, 0))?.re;
    let nl = c.get((0, 0, 1, 1))?.re;
    let coh = c.get((1, 0, 0, 1))?;
    Ok(0.5 * (ne + nl) + (C64::from_polar(1.0, phi) * coh).re)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseScan {
    pub phi_m: Vec<f64>,
    /// Plus-herald intensity of the rotated mode.
    pub fringe: Vec<f64>,
    pub v_x: Vec<f64>,
    pub phi_max: f64,
    pub v_x_max: f64,
    pub fit: Option<FringeFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantitySummary {
    pub name: String,
    pub ml: f64,
    pub mean: f64,
    pub std: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    /// Records per herald in `early, late, plus, minus` order.
    pub herald_counts: [usize; 4],
    pub herald_rate: f64,
    pub n_ij: Matrix2,
    pub n_ij_std: Matrix2,
    pub v_z: f64,
    pub unconditional: [f64; 2],
    pub g2: [f64; 2],
    /// Plus/minus heralds against the modes at `φ_m` and `φ_m + π`.
    pub n_x: Matrix2,
    pub v_x: f64,
    pub phase_scan: PhaseScan,
    pub p_z: Matrix2,
    pub p_x: Matrix2,
    pub f_lb: f64,
    pub bootstrap: Vec<QuantitySummary>,
    pub bootstrap_iterations: usize,
    pub bootstrap_failures: usize,
}

impl RunReport {
    pub fn bootstrap_quantity(&self, name: &str) -> Option<&QuantitySummary> {
        self.bootstrap.iter().find(|q| q.name == name)
    }
}

/// Normal-ordered device moments of each herald, plus the noise tensor.
pub fn herald_moments(sim: &SimulationOutput, cfg: &ExperimentConfig) -> Result<HeraldTensors> {
    let order = cfg.analysis.max_order;
    let cal: Vec<(C64, C64)> = sim.calibration.iter().map(VoltageRecord::amplitudes).collect();
    let h = noise_moments(&cal, order, cfg.amplifier.gain_db).map_err(|e| e.in_stage("noise moments"))?;
    let device = |records: &[VoltageRecord], kind: HeraldKind| -> Result<MomentTensor> {
        let amps = amplitudes_of(records, kind);
        let s = estimate_moments(&amps, order).map_err(|e| e.in_stage(kind.name()))?;
        invert_moments(&s, &h, cfg.amplifier.gain_db).map_err(|e| e.in_stage("moment inversion"))
    };
    Ok(HeraldTensors {
        early: device(&sim.z_records, HeraldKind::Early)?,
        late: device(&sim.z_records, HeraldKind::Late)?,
        plus: device(&sim.x_records, HeraldKind::Plus)?,
        minus: device(&sim.x_records, HeraldKind::Minus)?,
    })
}

/// Visibility of estimated intensities, which noise can push below zero.
fn measured_visibility(n: &Matrix2) -> f64 {
    let total: f64 = n.iter().flatten().sum();
    (n[0][0] - n[0][1] - n[1][0] + n[1][1]) / total
}

fn intensity_std(c: &MomentTensor, a: (usize, usize, usize, usize)) -> Result<f64> {
    Ok(c.variance(a)?.sqrt())
}

pub fn run_analysis(sim: &SimulationOutput, cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let counts = HeraldKind::ALL.map(|k| {
        let set = if matches!(k, HeraldKind::Early | HeraldKind::Late) {
            &sim.z_records
        } else {
            &sim.x_records
        };
        set.iter().filter(|r| r.herald == Some(k)).count()
    });
    for (kind, &n) in HeraldKind::ALL.iter().zip(&counts) {
        if n < MIN_HERALDS / 2 {
            return Err(Error::InsufficientData {
                got: n,
                need: MIN_HERALDS / 2,
            }
            .in_stage(kind.name()));
        }
    }
    let tensors = herald_moments(sim, cfg)?;

    let mut n_ij = [[0.0; 2]; 2];
    let mut n_ij_std = [[0.0; 2]; 2];
    for (i, c) in [&tensors.early, &tensors.late].into_iter().enumerate() {
        for (j, a) in [(1, 1, 0, 0), (0, 0, 1, 1)].into_iter().enumerate() {
            n_ij[i][j] = c.get(a)?.re;
            n_ij_std[i][j] = intensity_std(c, a)?;
        }
    }
    let v_z = measured_visibility(&n_ij);

    let unconditional = if sim.unconditional.len() >= MIN_HERALDS {
        let cal: Vec<(C64, C64)> = sim.calibration.iter().map(VoltageRecord::amplitudes).collect();
        let h = noise_moments(&cal, 2, cfg.amplifier.gain_db)?;
        let amps: Vec<(C64, C64)> = sim.unconditional.iter().map(VoltageRecord::amplitudes).collect();
        let c = invert_moments(&estimate_moments(&amps, 2)?, &h, cfg.amplifier.gain_db)?;
        [c.get((1, 1, 0, 0))?.re, c.get((0, 0, 1, 1))?.re]
    } else {
        [f64::NAN, f64::NAN]
    };
    let g2 = [n_ij[0][0] / unconditional[0], n_ij[1][1] / unconditional[1]];

    let x_pair = |phi: f64| -> Result<Matrix2> {
        let mut n = [[0.0; 2]; 2];
        for (i, c) in [&tensors.plus, &tensors.minus].into_iter().enumerate() {
            n[i] = [
                rotated_intensity_from_moments(c, phi)?,
                rotated_intensity_from_moments(c, phi + PI)?,
            ];
        }
        Ok(n)
    };
    let n_x = x_pair(cfg.phases.phi_m)?;
    let v_x = measured_visibility(&n_x);

    let m = cfg.phases.scan_points;
    let grid: Vec<f64> = (0..m).map(|i| TAU * i as f64 / m as f64).collect();
    let fringe = grid
        .iter()
        .map(|&phi| rotated_intensity_from_moments(&tensors.plus, phi))
        .collect::<Result<Vec<_>>>()?;
    let v_scan = grid
        .iter()
        .map(|&phi| Ok(measured_visibility(&x_pair(phi)?)))
        .collect::<Result<Vec<_>>>()?;
    let (imax, &v_x_max) = v_scan
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("scan is nonempty");
    let phase_scan = PhaseScan {
        phi_max: grid[imax],
        v_x_max,
        fit: fit_fringe(&grid, &fringe).ok(),
        phi_m: grid,
        fringe,
        v_x: v_scan,
    };

    let rcfg = cfg.reconstruction();
    let tensors = HeraldTensors {
        early: tensors.early.truncated(rcfg.max_order)?,
        late: tensors.late.truncated(rcfg.max_order)?,
        plus: tensors.plus.truncated(rcfg.max_order)?,
        minus: tensors.minus.truncated(rcfg.max_order)?,
    };
    let (p_z, p_x, f_lb, boot) = if cfg.analysis.bootstrap_iterations > 0 {
        let b = tomography::bootstrap(&tensors, &rcfg, cfg.analysis.bootstrap_iterations, cfg.phases.phi_m)
            .map_err(|e| e.in_stage("bootstrap"))?;
        let ml = |name: &str| b.quantity(name).expect("known quantity").ml;
        let p_z = [[ml("pz_00"), ml("pz_01")], [ml("pz_10"), ml("pz_11")]];
        let p_x = [[ml("px_00"), ml("px_01")], [ml("px_10"), ml("px_11")]];
        (p_z, p_x, ml("f_lb"), Some(b))
    } else {
        let states = tomography::reconstruct_heralds(&tensors, &rcfg).map_err(|e| e.in_stage("tomography"))?;
        let (p_z, p_x, f) = states.fidelity(cfg.phases.phi_m)?;
        (p_z, p_x, f, None)
    };
    let (bootstrap, bootstrap_iterations, bootstrap_failures) = match boot {
        Some(b) => (summaries(&b), b.iterations, b.failures),
        None => (Vec::new(), 0, 0),
    };
    Ok(RunReport {
        provenance: Provenance {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: VERSION.to_string(),
        },
        herald_counts: counts,
        herald_rate: sim.metadata.herald_rate,
        n_ij,
        n_ij_std,
        v_z,
        unconditional,
        g2,
        n_x,
        v_x,
        phase_scan,
        p_z,
        p_x,
        f_lb,
        bootstrap,
        bootstrap_iterations,
        bootstrap_failures,
    })
}

fn summaries(b: &BootstrapResult) -> Vec<QuantitySummary> {
    b.quantities
        .iter()
        .map(|q| QuantitySummary {
            name: q.name.clone(),
            ml: q.ml,
            mean: q.mean,
            std: q.std,
            ci_lo: q.ci_lo,
            ci_hi: q.ci_hi,
        })
        .collect()
}

/// Model observables at the configured imperfections. With an ideal source
/// these are the closed forms; otherwise intensities, visibilities and `g²`
/// come from the knob-engaged herald states.
pub fn model_summary(cfg: &ExperimentConfig) -> Result<ModelReport> {
    cfg.validate()?;
    let mut report = sourcemodel::model_report(&cfg.noise, cfg.phases.phi_opt, cfg.phases.phi_m, cfg.dims)?;
    let states = herald_states(cfg)?;
    let (p_z, p_x, f_lb) = states.fidelity(cfg.phases.phi_m)?;
    report.p_z = p_z;
    report.p_x = p_x;
    report.f_lb = f_lb;
    if cfg.source.optical_visibility < 1.0 || cfg.source.dark_rate > 0.0 {
        let n = [&states.early, &states.late].map(|rho| [rho.mean_photons(Mode::Early), rho.mean_photons(Mode::Late)]);
        let coh = normal_moment(&states.plus, (1, 0, 0, 1))?;
        let best = if coh.norm() > 0.0 {
            -coh.arg()
        } else {
            cfg.phases.phi_opt
        };
        let mut n_x = [[0.0; 2]; 2];
        for (i, rho) in [&states.plus, &states.minus].into_iter().enumerate() {
            n_x[i] = [rotated_intensity(rho, best)?, rotated_intensity(rho, best + PI)?];
        }
        report.intensities = n;
        report.v_z = sourcemodel::visibility_z(&n)?;
        report.v_x = sourcemodel::visibility(&n_x)?;
        report.g2_early = n[0][0] / cfg.noise.unconditional_intensity(Mode::Early);
        report.g2_late = n[1][1] / cfg.noise.unconditional_intensity(Mode::Late);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayScan {
    pub tau: Vec<f64>,
    /// Noise-subtracted quanta of the filtered mode after early/late heralds.
    pub early: Vec<f64>,
    pub late: Vec<f64>,
    pub t_e: f64,
    pub t_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub rates: CyclicRates,
    pub eigenvalues: [[f64; 2]; 2],
    pub norm: f64,
    pub swap_delay: f64,
    pub overlap_at_swap_delay: f64,
    pub orthogonal_delay: f64,
    pub overlap_at_orthogonal_delay: f64,
    pub configured_delay: f64,
    pub overlap_at_configured_delay: f64,
    pub extraction_efficiency: f64,
    pub delay_scan: Option<DelayScan>,
}

/// Envelope of the configured rates on the default sample grid.
pub fn configured_envelope(cfg: &ExperimentConfig) -> Result<Envelope> {
    let rates = CoupledModeRates::from_cyclic(&cfg.rates)?;
    envelope(&rates, TimeGrid::for_rates(&rates, DEFAULT_DT)?, true)
}

/// Readout-delay scan of the matched filter over synthetic waveforms.
///
/// Records carry the early and late envelopes at `T_e` and `T_e + T_d`; the
/// scan subtracts the same statistic of calibration waveforms, so the peak of
/// the early-herald trace estimates `T_e`.
pub fn delay_scan(cfg: &ExperimentConfig, n_records: usize, t_e: f64, n_tau: usize) -> Result<DelayScan> {
    cfg.validate()?;
    if n_records < 10 || n_tau < 2 {
        return Err(Error::InsufficientData {
            got: n_records.min(n_tau),
            need: 10,
        });
    }
    let f = configured_envelope(cfg)?;
    let t_d = cfg.timing.t_d;
    let f_len = (f.samples().len() - 1) as f64 * f.dt();
    let span = t_e + t_d + f_len;
    let n = (2.0 * span / DEFAULT_DT).ceil() as usize + 1;
    let grid = TimeGrid::new(0.0, DEFAULT_DT, n)?;
    let states = herald_states(cfg)?;
    let g = cfg.amplifier.gain();
    let tau: Vec<f64> = (0..n_tau)
        .map(|i| (t_e + t_d) * 2.0 * i as f64 / (n_tau - 1) as f64)
        .collect();
    let taus_ok: Vec<f64> = tau.iter().copied().filter(|&t| t + f_len <= grid.end()).collect();
    let mean_power = |amps: &[(C64, C64)], seed: u64| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; taus_ok.len()];
        for (i, &(s_e, s_l)) in amps.iter().enumerate() {
            let w = synthesize_waveform(s_e, s_l, &f, t_e, t_e + t_d, t_d, 0.0, grid, seed ^ i as u64)?;
            for (a, &t) in acc.iter_mut().zip(&taus_ok) {
                *a += matched_filter(&w, &f, t)?.norm_sqr();
            }
        }
        Ok(acc.into_iter().map(|v| v / amps.len() as f64 / g).collect())
    };
    let cal = calibration_records(&cfg.amplifier, n_records, stage_seed(cfg.seed, 20))?;
    let base = mean_power(&cal, 0)?;
    let trace = |kind: HeraldKind, stage: u64| -> Result<Vec<f64>> {
        let amps = HusimiSampler::new(states.get(kind))?
            .sample(
                &cfg.amplifier,
                n_records,
                stage_seed(cfg.seed, stage),
                cfg.heralds.sampling,
            )?
            .amplitudes;
        Ok(mean_power(&amps, 0)?.iter().zip(&base).map(|(p, b)| p - b).collect())
    };
    let early = trace(HeraldKind::Early, 21)?;
    let late = trace(HeraldKind::Late, 22)?;
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| taus_ok[i])
            .unwrap_or(f64::NAN)
    };
    Ok(DelayScan {
        t_e: argmax(&early),
        t_l: argmax(&late),
        tau: taus_ok.clone(),
        early,
        late,
    })
}

pub fn envelope_report(cfg: &ExperimentConfig, scan_records: usize) -> Result<EnvelopeReport> {
    cfg.validate()?;
    let rates = CoupledModeRates::from_cyclic(&cfg.rates)?;
    let f = configured_envelope(cfg)?;
    let (l1, l2) = crate::coupledmode::eigenvalues(&rates);
    let swap = swap_delay(&rates)?;
    let (orth, orth_overlap) = orthogonal_delay(&rates)?;
    let delay_scan = if scan_records > 0 {
        Some(delay_scan(cfg, scan_records, 2.0 * cfg.timing.t_p, 48)?)
    } else {
        None
    };
    Ok(EnvelopeReport {
        rates: cfg.rates,
        eigenvalues: [[l1.re, l1.im], [l2.re, l2.im]],
        norm: f.norm(),
        swap_delay: swap,
        overlap_at_swap_delay: analytic_overlap(&rates, swap)?.norm(),
        orthogonal_delay: orth,
        overlap_at_orthogonal_delay: orth_overlap,
        configured_delay: cfg.timing.t_d,
        overlap_at_configured_delay: analytic_overlap(&rates, cfg.timing.t_d)?.norm(),
        extraction_efficiency: extraction_efficiency(&rates)?,
        delay_scan,
    })
}

// Record files.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Csv,
    Binary,
}

impl RecordFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => RecordFormat::Csv,
            _ => RecordFormat::Binary,
        }
    }
}

fn herald_code(h: Option<HeraldKind>) -> u8 {
    match h {
        None => 0,
        Some(HeraldKind::Early) => 1,
        Some(HeraldKind::Late) => 2,
        Some(HeraldKind::Plus) => 3,
        Some(HeraldKind::Minus) => 4,
    }
}

fn herald_from_code(c: u8) -> Result<Option<HeraldKind>> {
    Ok(match c {
        0 => None,
        1 => Some(HeraldKind::Early),
        2 => Some(HeraldKind::Late),
        3 => Some(HeraldKind::Plus),
        4 => Some(HeraldKind::Minus),
        _ => return Err(Error::Format(format!("unknown herald code {c}"))),
    })
}

fn herald_from_name(s: &str) -> Result<Option<HeraldKind>> {
    match s {
        "none" => Ok(None),
        _ => HeraldKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .map(Some)
            .ok_or_else(|| Error::Format(format!("unknown herald `{s}`"))),
    }
}

pub fn write_records_csv<W: Write>(records: &[VoltageRecord], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.herald.map_or("none", |k| k.name()),
            r.s_e.re,
            r.s_e.im,
            r.s_l.re,
            r.s_l.im,
            r.seed_id
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<VoltageRecord>> {
    let mut lines = BufReader::new(input).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Format(format!("expected header `{CSV_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 6 {
            return Err(Error::Format(format!("line {}: expected 6 columns", i + 2)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))
        };
        out.push(VoltageRecord {
            herald: herald_from_name(cols[0])?,
            s_e: C64::new(num(cols[1])?, num(cols[2])?),
            s_l: C64::new(num(cols[3])?, num(cols[4])?),
            waveform: None,
            seed_id: cols[5]
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?,
        });
    }
    Ok(out)
}

/// Little-endian: `"DUET"`, `u16` version, `u64` count, then per record
/// `re S_e, im S_e, re S_l, im S_l` as `f64` and the herald as `u8`
/// (0 none, 1 early, 2 late, 3 plus, 4 minus). Seed ids are not stored.
pub fn write_records_binary<W: Write>(records: &[VoltageRecord], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    out.write_all(BINARY_MAGIC)?;
    out.write_all(&BINARY_VERSION.to_le_bytes())?;
    out.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        for v in [r.s_e.re, r.s_e.im, r.s_l.re, r.s_l.im] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&[herald_code(r.herald)])?;
    }
    out.flush()?;
    Ok(())
}

/// Inverse of [`write_records_binary`]; seed ids become record positions.
pub fn read_records_binary<R: Read>(input: R) -> Result<Vec<VoltageRecord>> {
    let mut input = BufReader::new(input);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Format("bad magic, not a record file".into()));
    }
    let mut v16 = [0u8; 2];
    input.read_exact(&mut v16)?;
    let version = u16::from_le_bytes(v16);
    if version != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported record version {version}")));
    }
    let mut v64 = [0u8; 8];
    input.read_exact(&mut v64)?;
    let count = u64::from_le_bytes(v64) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 24));
    let mut buf = [0u8; 33];
    for i in 0..count {
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated after {i} of {count} records")))?;
        let f = |k: usize| f64::from_le_bytes(buf[8 * k..8 * k + 8].try_into().expect("8 bytes"));
        out.push(VoltageRecord {
            herald: herald_from_code(buf[32])?,
            s_e: C64::new(f(0), f(1)),
            s_l: C64::new(f(2), f(3)),
            waveform: None,
            seed_id: i as u64,
        });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[VoltageRecord]) -> Result<()> {
    let file = fs::File::create(path)?;
    match RecordFormat::from_path(path) {
        RecordFormat::Csv => write_records_csv(records, file),
        RecordFormat::Binary => write_records_binary(records, file),
    }
}

pub fn read_records(path: &Path) -> Result<Vec<VoltageRecord>> {
    let file = fs::File::open(path)?;
    match RecordFormat::from_path(path) {
        RecordFormat::Csv => read_records_csv(file),
        RecordFormat::Binary => read_records_binary(file),
    }
}

const RECORD_SETS: [&str; 4] = ["z_records", "x_records", "calibration", "unconditional"];

/// Writes `config.toml`, `metadata.json` and the four record sets into `dir`.
pub fn save_simulation(dir: &Path, sim: &SimulationOutput, cfg: &ExperimentConfig, format: RecordFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&sim.metadata).expect("metadata serializes"),
    )?;
    let ext = match format {
        RecordFormat::Csv => "csv",
        RecordFormat::Binary => "bin",
    };
    for (name, set) in RECORD_SETS
        .iter()
        .zip([&sim.z_records, &sim.x_records, &sim.calibration, &sim.unconditional])
    {
        write_records(&dir.join(format!("{name}.{ext}")), set)?;
    }
    Ok(())
}

pub fn load_simulation(dir: &Path) -> Result<(SimulationOutput, ExperimentConfig)> {
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let metadata: SimulationMetadata = serde_json::from_str(&fs::read_to_string(dir.join("metadata.json"))?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut sets = Vec::new();
    for name in RECORD_SETS {
        let bin = dir.join(format!("{name}.bin"));
        let path = if bin.exists() {
            bin
        } else {
            dir.join(format!("{name}.csv"))
        };
        sets.push(read_records(&path)?);
    }
    let mut sets = sets.into_iter();
    Ok((
        SimulationOutput {
            z_records: sets.next().expect("four sets"),
            x_records: sets.next().expect("four sets"),
            calibration: sets.next().expect("four sets"),
            unconditional: sets.next().expect("four sets"),
            metadata,
        },
        cfg,
    ))
}

// Reports.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::Config(format!("unknown report format `{s}`"))),
        }
    }
}

/// Published value with its accepted range `[value − minus, value + plus]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub quantity: &'static str,
    pub source: &'static str,
    pub value: f64,
    pub minus: f64,
    pub plus: f64,
}

impl Reference {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.value - self.minus && x <= self.value + self.plus
    }
}

pub const REFERENCES: [Reference; 8] = [
    Reference {
        quantity: "v_z",
        source: "measured",
        value: 0.633,
        minus: 0.014,
        plus: 0.014,
    },
    Reference {
        quantity: "v_x",
        source: "measured",
        value: 0.611,
        minus: 0.034,
        plus: 0.034,
    },
    Reference {
        quantity: "g2_early",
        source: "measured",
        value: 6.8,
        minus: 0.5,
        plus: 0.5,
    },
    Reference {
        quantity: "g2_late",
        source: "measured",
        value: 5.0,
        minus: 0.5,
        plus: 0.5,
    },
    Reference {
        quantity: "f_lb",
        source: "measured",
        value: 0.794,
        minus: 0.071,
        plus: 0.048,
    },
    Reference {
        quantity: "v_z",
        source: "model",
        value: 0.70,
        minus: 0.03,
        plus: 0.03,
    },
    Reference {
        quantity: "v_x",
        source: "model",
        value: 0.70,
        minus: 0.03,
        plus: 0.03,
    },
    Reference {
        quantity: "f_lb",
        source: "model",
        value: 0.83,
        minus: 0.03,
        plus: 0.03,
    },
];

fn headline(run: &RunReport, quantity: &str) -> f64 {
    match quantity {
        "v_z" => run.v_z,
        "v_x" => run.v_x,
        "g2_early" => run.g2[0],
        "g2_late" => run.g2[1],
        "f_lb" => run.f_lb,
        _ => f64::NAN,
    }
}

fn flat_rows(run: &RunReport) -> Vec<(String, f64)> {
    let mut rows = vec![
        ("herald_count_early".to_string(), run.herald_counts[0] as f64),
        ("herald_count_late".into(), run.herald_counts[1] as f64),
        ("herald_count_plus".into(), run.herald_counts[2] as f64),
        ("herald_count_minus".into(), run.herald_counts[3] as f64),
        ("herald_rate".into(), run.herald_rate),
    ];
    for (i, hi) in ["e", "l"].iter().enumerate() {
        for (j, mj) in ["e", "l"].iter().enumerate() {
            rows.push((format!("n_{hi}{mj}"), run.n_ij[i][j]));
        }
    }
    rows.push(("v_z".into(), run.v_z));
    rows.push(("unconditional_e".into(), run.unconditional[0]));
    rows.push(("unconditional_l".into(), run.unconditional[1]));
    rows.push(("g2_early".into(), run.g2[0]));
    rows.push(("g2_late".into(), run.g2[1]));
    rows.push(("v_x".into(), run.v_x));
    rows.push(("phi_max".into(), run.phase_scan.phi_max));
    rows.push(("v_x_max".into(), run.phase_scan.v_x_max));
    for (name, m) in [("pz", &run.p_z), ("px", &run.p_x)] {
        for i in 0..2 {
            for j in 0..2 {
                rows.push((format!("{name}_{i}{j}"), m[i][j]));
            }
        }
    }
    rows.push(("f_lb".into(), run.f_lb));
    if let Some(q) = run.bootstrap_quantity("f_lb") {
        rows.push(("f_lb_mean".into(), q.mean));
        rows.push(("f_lb_std".into(), q.std));
        rows.push(("f_lb_ci_lo".into(), q.ci_lo));
        rows.push(("f_lb_ci_hi".into(), q.ci_hi));
    }
    rows
}

pub fn report(run: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(run).expect("report serializes") + "\n",
        ReportFormat::Csv => {
            let mut out = String::from("quantity,value\n");
            for (k, v) in flat_rows(run) {
                out.push_str(&format!("{k},{v}\n"));
            }
            out
        }
        ReportFormat::Markdown => markdown(run),
    }
}

fn markdown(run: &RunReport) -> String {
    let mut s = String::new();
    s.push_str("# Run report\n\n");
    s.push_str(&format!(
        "config `{}`, seed {}, version {}\n\n",
        run.provenance.config_hash, run.provenance.seed, run.provenance.version
    ));
    s.push_str(&format!(
        "heralds: early {}, late {}, plus {}, minus {} (rate {:.3} s⁻¹)\n\n",
        run.herald_counts[0], run.herald_counts[1], run.herald_counts[2], run.herald_counts[3], run.herald_rate
    ));
    s.push_str("## Intensities\n\n| herald | n_e | n_l |\n|---|---|---|\n");
    for (i, h) in ["early", "late"].iter().enumerate() {
        s.push_str(&format!(
            "| {h} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
            run.n_ij[i][0], run.n_ij_std[i][0], run.n_ij[i][1], run.n_ij_std[i][1]
        ));
    }
    s.push_str(&format!(
        "\nV_z = {:.4}, V_x = {:.4} (scan maximum {:.4} at φ_m = {:.3}π), g² = {:.3} / {:.3}\n\n",
        run.v_z,
        run.v_x,
        run.phase_scan.v_x_max,
        run.phase_scan.phi_max / PI,
        run.g2[0],
        run.g2[1]
    ));
    s.push_str("## Single-photon subspace\n\n| basis | p_00 | p_01 | p_10 | p_11 |\n|---|---|---|---|---|\n");
    for (name, m) in [("Z", &run.p_z), ("X", &run.p_x)] {
        s.push_str(&format!(
            "| {name} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            m[0][0], m[0][1], m[1][0], m[1][1]
        ));
    }
    s.push_str(&format!("\nF_lb = {:.4}", run.f_lb));
    if let Some(q) = run.bootstrap_quantity("f_lb") {
        s.push_str(&format!(
            " (bootstrap mean {:.4}, std {:.4}, interval [{:.4}, {:.4}] over {} iterations)",
            q.mean, q.std, q.ci_lo, q.ci_hi, run.bootstrap_iterations
        ));
    }
    s.push_str("\n\n## Comparison with published values\n\n");
    s.push_str("| quantity | simulated | reference | range | source | status |\n|---|---|---|---|---|---|\n");
    for r in REFERENCES {
        let x = headline(run, r.quantity);
        s.push_str(&format!(
            "| {} | {:.4} | {} | [{:.3}, {:.3}] | {} | {} |\n",
            r.quantity,
            x,
            r.value,
            r.value - r.minus,
            r.value + r.plus,
            r.source,
            if r.contains(x) { "pass" } else { "fail" }
        ));
    }
    s
}

/// Bell-fidelity bound from closed-form conditional probabilities in a basis
/// pair; shared by reports that need the model line.
pub fn model_fidelity(states: &HeraldStates, phi_m: f64) -> Result<f64> {
    let pz = sourcemodel::conditional_probabilities([&states.early, &states.late], Basis::Z, phi_m)?;
    let px = sourcemodel::conditional_probabilities([&states.plus, &states.minus], Basis::X, phi_m)?;
    fidelity_lower_bound(&pz, &px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::state_moments;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn small(z: usize, x: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.heralds.z = z;
        cfg.heralds.x = x;
        cfg.heralds.calibration = 20_000;
        cfg.heralds.unconditional = 20_000;
        cfg.analysis.bootstrap_iterations = 0;
        cfg.dims = FockDims { d_e: 4, d_l: 4 };
        cfg
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::measured()] {
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 9\n[heralds]\nz = 1000\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.heralds.z, 1000);
        assert_eq!(cfg.heralds.x, HeraldCounts::default().x);
        assert_eq!(cfg.rates, CyclicRates::default());
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("bogus = 1\n"),
            Err(Error::Config(_))
        ));
        let mut cfg = ExperimentConfig::default();
        cfg.timing.t_r = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.analysis.max_order = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed += 1;
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn measured_preset_dark_fraction() {
        let cfg = ExperimentConfig::measured();
        let stats = herald_statistics(&cfg.source, cfg.timing.t_r).unwrap();
        assert_abs_diff_eq!(cfg.source.dark_rate / stats.p_click, 0.01 / 1.01, epsilon = 1e-12);
        assert_eq!(cfg.source.optical_visibility, 0.94);
    }

    #[test]
    fn fringe_fit_recovers_parameters() {
        let x: Vec<f64> = (0..64).map(|i| TAU * i as f64 / 64.0).collect();
        let (a, k, phi, b) = (0.12, 1.0, 0.7, 0.35);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.003).unwrap();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| a * (k * v + phi).cos() + b + noise.sample(&mut rng))
            .collect();
        let fit = fit_fringe(&x, &y).unwrap();
        for (i, (got, want)) in [(fit.amplitude, a), (fit.k, k), (fit.phi0, phi), (fit.offset, b)]
            .into_iter()
            .enumerate()
        {
            let sd = fit.variance(i).sqrt();
            assert!(sd > 0.0 && sd < 0.05);
            assert!((got - want).abs() < 5.0 * sd, "param {i}: {got} vs {want} ± {sd}");
        }
        assert!(!fit.phase_undetermined);
        assert!((fit.residual_rms - 0.003).abs() < 0.001);
    }

    #[test]
    fn fringe_fit_exact_data() {
        let x: Vec<f64> = (0..40).map(|i| 0.1 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| 2.0 * (2.3 * v - 1.1).cos() - 0.5).collect();
        let fit = fit_fringe(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.amplitude, 2.0, epsilon = 1e-7);
        assert_abs_diff_eq!(fit.k, 2.3, epsilon = 1e-7);
        assert_abs_diff_eq!(fit.phi0, -1.1, epsilon = 1e-7);
        assert_abs_diff_eq!(fit.offset, -0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(fit.eval(1.0), 2.0 * (1.2f64).cos() - 0.5, epsilon = 1e-7);
    }

    #[test]
    fn fringe_fit_flags_flat_data() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let fit = fit_fringe(&x, &[0.4; 20]).unwrap();
        assert!(fit.phase_undetermined);
        assert_eq!(fit.amplitude, 0.0);
        assert_abs_diff_eq!(fit.offset, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn fringe_fit_rejects_bad_input() {
        assert!(matches!(
            fit_fringe(&[0.0; 3], &[0.0; 3]),
            Err(Error::InsufficientData { .. })
        ));
        assert!(fit_fringe(&[0.0; 8], &[1.0; 7]).is_err());
        assert!(matches!(fit_fringe(&[1.0; 8], &[1.0; 8]), Err(Error::Fit(_))));
        let mut y = [1.0; 8];
        y[2] = f64::NAN;
        let x: Vec<f64> = (0..8).map(f64::from).collect();
        assert!(matches!(fit_fringe(&x, &y), Err(Error::Fit(_))));
    }

    #[test]
    fn rotated_intensity_matches_state() {
        let cfg = ExperimentConfig::default();
        let states = herald_states(&cfg).unwrap();
        let c = state_moments(&states.plus, 2).unwrap();
        for phi in [0.0, 0.4, 2.0, 4.5] {
            assert_abs_diff_eq!(
                rotated_intensity_from_moments(&c, phi).unwrap(),
                rotated_intensity(&states.plus, phi).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    fn record(h: Option<HeraldKind>, v: [f64; 4], id: u64) -> VoltageRecord {
        VoltageRecord {
            herald: h,
            s_e: C64::new(v[0], v[1]),
            s_l: C64::new(v[2], v[3]),
            waveform: None,
            seed_id: id,
        }
    }

    fn herald_strategy() -> impl Strategy<Value = Option<HeraldKind>> {
        prop_oneof![
            Just(None),
            Just(Some(HeraldKind::Early)),
            Just(Some(HeraldKind::Late)),
            Just(Some(HeraldKind::Plus)),
            Just(Some(HeraldKind::Minus)),
        ]
    }

    proptest! {
        #[test]
        fn record_files_round_trip(
            rows in prop::collection::vec((herald_strategy(), prop::array::uniform4(-1e12f64..1e12)), 0..40)
        ) {
            let records: Vec<VoltageRecord> =
                rows.iter().enumerate().map(|(i, (h, v))| record(*h, *v, i as u64)).collect();
            let mut csv = Vec::new();
            write_records_csv(&records, &mut csv).unwrap();
            prop_assert_eq!(&read_records_csv(csv.as_slice()).unwrap(), &records);
            let mut bin = Vec::new();
            write_records_binary(&records, &mut bin).unwrap();
            prop_assert_eq!(bin.len(), 14 + 33 * records.len());
            prop_assert_eq!(&read_records_binary(bin.as_slice()).unwrap(), &records);
        }
    }

    #[test]
    fn binary_layout() {
        let mut bin = Vec::new();
        write_records_binary(&[record(Some(HeraldKind::Plus), [1.0, -2.0, 0.5, 0.0], 0)], &mut bin).unwrap();
        assert_eq!(&bin[..4], b"DUET");
        assert_eq!(u16::from_le_bytes([bin[4], bin[5]]), 1);
        assert_eq!(u64::from_le_bytes(bin[6..14].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bin[22..30].try_into().unwrap()), -2.0);
        assert_eq!(bin[46], 3);
    }

    #[test]
    fn corrupt_record_files_are_rejected() {
        assert!(matches!(
            read_records_binary(&b"NOPE\x01\x00"[..]),
            Err(Error::Format(_))
        ));
        let mut bin = Vec::new();
        write_records_binary(&vec![record(None, [0.0; 4], 0); 3], &mut bin).unwrap();
        bin.truncate(bin.len() - 5);
        assert!(matches!(read_records_binary(bin.as_slice()), Err(Error::Format(_))));
        let mut bad = bin.clone();
        bad[4] = 9;
        assert!(matches!(read_records_binary(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_records_csv(&b"a,b\n"[..]), Err(Error::Format(_))));
        let text = format!("{CSV_HEADER}\nsideways,1,2,3,4,0\n");
        assert!(matches!(read_records_csv(text.as_bytes()), Err(Error::Format(_))));
        let text = format!("{CSV_HEADER}\nearly,1,2,3\n");
        assert!(matches!(read_records_csv(text.as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn simulation_counts_and_determinism() {
        let cfg = small(2000, 600);
        let a = run_simulation(&cfg).unwrap();
        assert_eq!(a.z_records.len(), 2000);
        assert_eq!(a.x_records.len(), 600);
        assert_eq!(a.calibration.len(), 20_000);
        assert!(a
            .z_records
            .iter()
            .all(|r| matches!(r.herald, Some(HeraldKind::Early | HeraldKind::Late))));
        assert!(a
            .x_records
            .iter()
            .all(|r| matches!(r.herald, Some(HeraldKind::Plus | HeraldKind::Minus))));
        let early = a
            .z_records
            .iter()
            .filter(|r| r.herald == Some(HeraldKind::Early))
            .count();
        assert!((early as f64 - 1000.0).abs() < 5.0 * 22.4);
        assert_eq!(a.metadata.acceptance.len(), 4);
        assert_abs_diff_eq!(a.metadata.herald_rate, 1e-4 * 5.5e-2 / 20e-6, epsilon = 1e-12);
        assert_abs_diff_eq!(
            a.metadata.equivalent_duration,
            2600.0 / a.metadata.herald_rate,
            epsilon = 1e-6
        );
        let b = run_simulation(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(run_simulation(&other).unwrap().z_records, a.z_records);
    }

    #[test]
    fn no_clicks_no_heralds() {
        let mut cfg = small(500, 500);
        cfg.source.p = 0.0;
        cfg.source.dark_rate = 0.0;
        let sim = run_simulation(&cfg).unwrap();
        assert!(sim.z_records.is_empty() && sim.x_records.is_empty());
        assert_eq!(sim.metadata.p_click, 0.0);
        assert!(matches!(
            run_analysis(&sim, &cfg),
            Err(Error::Stage { .. } | Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn save_and_load_simulation() {
        let cfg = small(300, 200);
        let sim = run_simulation(&cfg).unwrap();
        for format in [RecordFormat::Binary, RecordFormat::Csv] {
            let dir = tempfile::tempdir().unwrap();
            save_simulation(dir.path(), &sim, &cfg, format).unwrap();
            let (back, back_cfg) = load_simulation(dir.path()).unwrap();
            assert_eq!(back_cfg, cfg);
            assert_eq!(back, sim);
        }
    }

    #[test]
    fn analysis_tracks_model_intensities() {
        let mut cfg = small(40_000, 20_000);
        cfg.heralds.calibration = 200_000;
        cfg.heralds.unconditional = 200_000;
        let sim = run_simulation(&cfg).unwrap();
        let run = run_analysis(&sim, &cfg).unwrap();
        let model = model_summary(&cfg).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let sd = run.n_ij_std[i][j];
                assert!((run.n_ij[i][j] - model.intensities[i][j]).abs() < 5.0 * sd, "n_{i}{j}");
            }
        }
        // About 0.03 standard error per intensity at this size.
        assert!((run.v_z - model.v_z).abs() < 0.12);
        assert!((run.g2[0] - model.g2_early).abs() < 0.25 * model.g2_early);
        assert!(run.phase_scan.fit.is_some());
        assert_eq!(run.phase_scan.v_x.len(), cfg.phases.scan_points);
        let fl = run.f_lb;
        assert!((0.0..=1.0).contains(&fl));
        assert!(run.bootstrap.is_empty());
        for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
            let text = report(&run, format);
            assert!(text.contains("f_lb") || text.contains("F_lb"));
        }
        let back: RunReport = serde_json::from_str(&report(&run, ReportFormat::Json)).unwrap();
        assert_eq!(back.provenance, run.provenance);
    }

    #[test]
    fn model_summary_reflects_imperfections() {
        let ideal = model_summary(&ExperimentConfig::default()).unwrap();
        let measured = model_summary(&ExperimentConfig::measured()).unwrap();
        assert!(measured.f_lb < ideal.f_lb);
        let states = herald_states(&ExperimentConfig::default()).unwrap();
        assert_abs_diff_eq!(
            model_fidelity(&states, DEFAULT_PHI).unwrap(),
            ideal.f_lb,
            epsilon = 1e-12
        );
    }

    #[test]
    fn envelope_report_is_consistent() {
        let cfg = ExperimentConfig::default();
        let rep = envelope_report(&cfg, 0).unwrap();
        assert_abs_diff_eq!(rep.norm, 1.0, epsilon = 1e-3);
        assert!(rep.overlap_at_orthogonal_delay <= rep.overlap_at_configured_delay + 1e-9);
        assert!(rep.delay_scan.is_none());
    }

    #[test]
    fn delay_scan_peaks_at_readout_bins() {
        let cfg = ExperimentConfig::default();
        let t_e = 2.0 * cfg.timing.t_p;
        let scan = delay_scan(&cfg, 400, t_e, 25).unwrap();
        let step = scan.tau[1] - scan.tau[0];
        assert!((scan.t_e - t_e).abs() <= step, "{} vs {t_e}", scan.t_e);
        assert!((scan.t_l - (t_e + cfg.timing.t_d)).abs() <= step, "{}", scan.t_l);
    }

    #[test]
    fn report_format_parsing() {
        assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
        assert!("xml".parse::<ReportFormat>().is_err());
        assert_eq!(RecordFormat::from_path(Path::new("a.csv")), RecordFormat::Csv);
        assert_eq!(RecordFormat::from_path(Path::new("a.bin")), RecordFormat::Binary);
    }

    #[test]
    fn references_contain_their_values() {
        for r in REFERENCES {
            assert!(r.contains(r.value));
            assert!(!r.contains(r.value + r.plus + 1e-9));
        }
    }
}
