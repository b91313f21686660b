//! Maximum-likelihood state reconstruction from normal-ordered moments.
//!
//! The state is parameterized as `ρ = M M† / Tr{M M†}` with `M` complex
//! lower-triangular, and `−log L = Σ_β |C̄_β − Tr{Ô_β ρ}|² / σ_β²` is minimized
//! with L-BFGS and a backtracking line search.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fockspace::{normal_operator_entries, DensityMatrix, FockDims, SparseEntry};
use crate::moments::{mirror, MomentOrdering, MomentScale, MomentTensor, MultiIndex};
use crate::sourcemodel::{self, Basis, HeraldKind, HeraldStates, Matrix2};

pub const RESTARTS: usize = 3;
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const DEFAULT_BOOTSTRAP_ITERATIONS: usize = 1000;
/// Largest tolerated fraction of non-converged bootstrap iterations.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;
const HISTORY: usize = 12;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
/// Diagonal loading used to factor a warm-start state.
const WARM_START_LOADING: f64 = 1e-6;
const BOOTSTRAP_SALT: u64 = 0xB007_57A9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    pub dims: FockDims,
    pub max_order: usize,
    pub tol_objective: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            dims: FockDims::default(),
            max_order: 4,
            tol_objective: 1e-8,
            max_iterations: 5000,
            seed: 0,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.max_order == 0 {
            return Err(Error::param("max_order", "must be at least 1"));
        }
        if !(self.tol_objective > 0.0) {
            return Err(Error::param("tol_objective", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::param("max_iterations", "must be positive"));
        }
        Ok(())
    }
}

struct Term {
    entries: Vec<SparseEntry>,
    target: C64,
    weight: f64,
}

/// Weighted least-squares objective. Monomials act through their truncated
/// matrices, which is exact for states supported inside `dims`.
struct Objective {
    dims: FockDims,
    terms: Vec<Term>,
}

impl Objective {
    fn new(c: &MomentTensor, cfg: &ReconstructionConfig) -> Result<Self> {
        cfg.validate()?;
        if c.ordering != MomentOrdering::Normal || c.scale != MomentScale::Device {
            return Err(Error::IncompatibleTensors(
                "reconstruction needs normal-ordered device-scale moments".into(),
            ));
        }
        if cfg.max_order > c.max_order() {
            return Err(Error::IncompatibleTensors(format!(
                "max_order {} exceeds tensor order {}",
                cfg.max_order,
                c.max_order()
            )));
        }
        let mut terms = Vec::new();
        for (i, a) in c.canonical() {
            if a == (0, 0, 0, 0) || crate::moments::order(a) > cfg.max_order {
                continue;
            }
            let target = c.values()[i];
            let var = c.variances()[i];
            let sigma = if var > 0.0 {
                var.sqrt()
            } else {
                SIGMA_FLOOR * target.norm().max(1.0)
            };
            // The mirror entry carries the conjugate residual.
            let multiplicity = if mirror(a) == a { 1.0 } else { 2.0 };
            terms.push(Term {
                entries: normal_operator_entries(cfg.dims, a),
                target,
                weight: multiplicity / (sigma * sigma),
            });
        }
        if terms.is_empty() {
            return Err(Error::InsufficientData { got: 0, need: 1 });
        }
        Ok(Objective { dims: cfg.dims, terms })
    }

    fn value_at(&self, rho: &DMatrix<C64>) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let p: C64 = t.entries.iter().map(|e| rho[(e.col, e.row)] * e.value).sum();
                t.weight * (p - t.target).norm_sqr()
            })
            .sum()
    }

    fn value(&self, m: &DMatrix<C64>) -> f64 {
        let a = m * m.adjoint();
        let tr = a.trace().re;
        self.value_at(&(a / C64::new(tr, 0.0)))
    }

    /// Objective and its gradient in the lower-triangular entries of `M`,
    /// as a complex matrix whose real/imaginary parts are the partials.
    fn value_grad(&self, m: &DMatrix<C64>) -> (f64, DMatrix<C64>) {
        let d = self.dims.joint();
        let a = m * m.adjoint();
        let tr = a.trace().re;
        let rho = a / C64::new(tr, 0.0);
        let mut f = 0.0;
        let mut b = DMatrix::<C64>::zeros(d, d);
        for t in &self.terms {
            let p: C64 = t.entries.iter().map(|e| rho[(e.col, e.row)] * e.value).sum();
            let r = p - t.target;
            f += t.weight * r.norm_sqr();
            let w = r.conj() * t.weight;
            for e in &t.entries {
                b[(e.row, e.col)] += w * e.value;
            }
        }
        let mut g = (&b + b.adjoint()) * C64::new(0.5, 0.0);
        let shift: C64 = g.component_mul(&rho.transpose()).sum();
        for i in 0..d {
            g[(i, i)] -= shift;
        }
        let mut grad = g * m * C64::new(4.0 / tr, 0.0);
        mask_lower(&mut grad);
        (f, grad)
    }
}

fn mask_lower(m: &mut DMatrix<C64>) {
    let n = m.nrows();
    for j in 1..n {
        for i in 0..j {
            m[(i, j)] = C64::new(0.0, 0.0);
        }
    }
}

fn inner(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

fn to_state(dims: FockDims, m: &DMatrix<C64>) -> Result<DensityMatrix> {
    DensityMatrix::from_raw(dims, m * m.adjoint(), 0.0)
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub state: DensityMatrix,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial point.
    pub history: Vec<f64>,
    /// Number of independent moment constraints used.
    pub terms: usize,
    pub converged: bool,
}

fn minimize(obj: &Objective, start: DMatrix<C64>, cfg: &ReconstructionConfig) -> Reconstruction {
    let mut m = start;
    let (mut f, mut g) = obj.value_grad(&m);
    let mut history = vec![f];
    let mut s_hist: Vec<DMatrix<C64>> = Vec::new();
    let mut y_hist: Vec<DMatrix<C64>> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if f == 0.0 || inner(&g, &g) == 0.0 {
            converged = true;
            break;
        }
        // Two-loop recursion.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / inner(y, s);
            let alpha = rho * inner(s, &q);
            q -= y * C64::new(alpha, 0.0);
            alphas.push((rho, alpha));
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => inner(s, y) / inner(y, y),
            _ => 1.0 / inner(&g, &g).sqrt().max(1.0),
        };
        q *= C64::new(gamma, 0.0);
        for ((s, y), (rho, alpha)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let beta = rho * inner(y, &q);
            q += s * C64::new(alpha - beta, 0.0);
        }
        let mut dir = -q;
        let mut slope = inner(&g, &dir);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            dir = -g.clone() * C64::new(1.0 / inner(&g, &g).sqrt().max(1.0), 0.0);
            slope = inner(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &m + &dir * C64::new(step, 0.0);
            let ft = obj.value(&trial);
            if ft.is_finite() && ft <= f + ARMIJO * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, ft)) = accepted else {
            if s_hist.is_empty() {
                // No descent along the gradient at machine precision.
                converged = true;
                break;
            }
            s_hist.clear();
            y_hist.clear();
            continue;
        };
        iterations += 1;
        let (ft, gt) = {
            let (fv, gv) = obj.value_grad(&trial);
            (fv.min(ft), gv)
        };
        let s = &trial - &m;
        let y = &gt - &g;
        if inner(&s, &y) > 1e-300 {
            if s_hist.len() == HISTORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        let rel = (f - ft) / f.abs().max(f64::MIN_POSITIVE);
        m = trial;
        f = ft;
        g = gt;
        history.push(f);
        if rel < cfg.tol_objective {
            converged = true;
            break;
        }
    }
    let state = to_state(obj.dims, &m).expect("factorized state has positive trace");
    Reconstruction {
        state,
        objective: f,
        iterations,
        history,
        terms: obj.terms.len(),
        converged,
    }
}

fn random_start(dims: FockDims, seed: u64, stream: u64) -> DMatrix<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let d = dims.joint();
    let mut m = DMatrix::from_fn(d, d, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        C64::new(re, im)
    });
    mask_lower(&mut m);
    m
}

fn mixed_start(dims: FockDims) -> DMatrix<C64> {
    let d = dims.joint();
    DMatrix::identity(d, d) * C64::new(1.0 / (d as f64).sqrt(), 0.0)
}

/// Lower-triangular factor of a (diagonally loaded) state.
fn warm_start(rho: &DensityMatrix) -> Result<DMatrix<C64>> {
    let d = rho.dims().joint();
    let loaded = rho.matrix() + DMatrix::<C64>::identity(d, d) * C64::new(WARM_START_LOADING, 0.0);
    let chol = loaded
        .cholesky()
        .ok_or_else(|| Error::param("start", "warm-start state is not positive definite"))?;
    Ok(chol.unpack())
}

fn finish(r: Reconstruction) -> Result<Reconstruction> {
    if r.converged {
        Ok(r)
    } else {
        Err(Error::NonConvergent {
            iterations: r.iterations,
            objective: r.objective,
            best: Box::new(r.state),
        })
    }
}

/// Best of [`RESTARTS`] runs: the maximally mixed start, then seeded random starts.
pub fn reconstruct_detailed(c: &MomentTensor, cfg: &ReconstructionConfig) -> Result<Reconstruction> {
    let obj = Objective::new(c, cfg)?;
    let mut best: Option<Reconstruction> = None;
    for k in 0..RESTARTS {
        let start = if k == 0 {
            mixed_start(cfg.dims)
        } else {
            random_start(cfg.dims, cfg.seed, k as u64)
        };
        let run = minimize(&obj, start, cfg);
        let better = match &best {
            None => true,
            Some(b) => (run.converged, -run.objective) > (b.converged, -b.objective),
        };
        if better {
            best = Some(run);
        }
    }
    finish(best.expect("at least one restart"))
}

pub fn reconstruct(c: &MomentTensor, cfg: &ReconstructionConfig) -> Result<DensityMatrix> {
    reconstruct_detailed(c, cfg).map(|r| r.state)
}

/// Single run started from `start` instead of the restart schedule.
pub fn reconstruct_from(c: &MomentTensor, cfg: &ReconstructionConfig, start: &DensityMatrix) -> Result<Reconstruction> {
    let obj = Objective::new(c, cfg)?;
    if start.dims() != cfg.dims {
        return Err(Error::DimensionMismatch(format!(
            "start state {:?} vs configured {:?}",
            start.dims(),
            cfg.dims
        )));
    }
    finish(minimize(&obj, warm_start(start)?, cfg))
}

/// `−log L` of a given state.
pub fn negative_log_likelihood(c: &MomentTensor, cfg: &ReconstructionConfig, rho: &DensityMatrix) -> Result<f64> {
    let obj = Objective::new(c, cfg)?;
    Ok(obj.value_at(rho.matrix()))
}

pub fn conditional_probabilities_from_states(states: [&DensityMatrix; 2], basis: Basis, phi_m: f64) -> Result<Matrix2> {
    sourcemodel::conditional_probabilities(states, basis, phi_m)
}

/// Eigenvalues below this are treated as rounding noise of a zero eigenvalue.
const EIGEN_FLOOR: f64 = 1e-14;

fn hermitian_sqrt(m: &DMatrix<C64>) -> DMatrix<C64> {
    let eig = m.clone().symmetric_eigen();
    let sq = eig
        .eigenvalues
        .map(|v| C64::new(if v > EIGEN_FLOOR { v.sqrt() } else { 0.0 }, 0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.adjoint()
}

/// Uhlmann fidelity `(Tr√(√ρ σ √ρ))²`.
pub fn state_fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> f64 {
    assert_eq!(rho.dims(), sigma.dims(), "fidelity needs equal dimensions");
    let s = hermitian_sqrt(rho.matrix());
    let inner = &s * sigma.matrix() * &s;
    let inner = (&inner + inner.adjoint()) * C64::new(0.5, 0.0);
    let root: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .filter(|&&v| v > EIGEN_FLOOR)
        .map(|v| v.sqrt())
        .sum();
    (root * root).clamp(0.0, 1.0)
}

#[derive(Serialize, Deserialize)]
struct StateRepr {
    dims: FockDims,
    entries: Vec<[f64; 2]>,
}

/// `{dims, entries}` with entries row-major as `[re, im]`.
pub fn state_to_json(rho: &DensityMatrix) -> serde_json::Value {
    let d = rho.dims().joint();
    let m = rho.matrix();
    let entries = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| [m[(i, j)].re, m[(i, j)].im])
        .collect();
    serde_json::to_value(StateRepr {
        dims: rho.dims(),
        entries,
    })
    .expect("state serializes")
}

pub fn state_from_json(value: &serde_json::Value) -> Result<DensityMatrix> {
    let repr: StateRepr = serde_json::from_value(value.clone()).map_err(|e| Error::Format(e.to_string()))?;
    repr.dims.validate()?;
    let d = repr.dims.joint();
    if repr.entries.len() != d * d {
        return Err(Error::DimensionMismatch(format!(
            "{} entries for joint dimension {d}",
            repr.entries.len()
        )));
    }
    let m = DMatrix::from_row_iterator(d, d, repr.entries.iter().map(|[re, im]| C64::new(*re, *im)));
    DensityMatrix::from_matrix(repr.dims, m)
}

/// Device-scale moment tensors for the four heralds.
#[derive(Debug, Clone)]
pub struct HeraldTensors {
    pub early: MomentTensor,
    pub late: MomentTensor,
    pub plus: MomentTensor,
    pub minus: MomentTensor,
}

impl HeraldTensors {
    pub fn get(&self, kind: HeraldKind) -> &MomentTensor {
        match kind {
            HeraldKind::Early => &self.early,
            HeraldKind::Late => &self.late,
            HeraldKind::Plus => &self.plus,
            HeraldKind::Minus => &self.minus,
        }
    }

    fn map<F>(&self, mut f: F) -> Result<HeraldStates>
    where
        F: FnMut(HeraldKind, &MomentTensor) -> Result<DensityMatrix>,
    {
        Ok(HeraldStates {
            early: f(HeraldKind::Early, &self.early)?,
            late: f(HeraldKind::Late, &self.late)?,
            plus: f(HeraldKind::Plus, &self.plus)?,
            minus: f(HeraldKind::Minus, &self.minus)?,
        })
    }
}

pub fn reconstruct_heralds(tensors: &HeraldTensors, cfg: &ReconstructionConfig) -> Result<HeraldStates> {
    tensors.map(|kind, c| reconstruct(c, cfg).map_err(|e| e.in_stage(kind.name())))
}

pub const QUANTITY_NAMES: [&str; 9] = [
    "pz_00", "pz_01", "pz_10", "pz_11", "px_00", "px_01", "px_10", "px_11", "f_lb",
];

fn quantities(states: &HeraldStates, phi_m: f64) -> Result<[f64; 9]> {
    let (pz, px, f) = states.fidelity(phi_m)?;
    Ok([
        pz[0][0], pz[0][1], pz[1][0], pz[1][1], px[0][0], px[0][1], px[1][0], px[1][1], f,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityStats {
    pub name: String,
    pub ml: f64,
    pub samples: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl QuantityStats {
    fn from_samples(name: &str, ml: f64, samples: Vec<f64>) -> Self {
        let n = samples.len() as f64;
        // Offset by the first sample so identical samples give an exact mean.
        let base = samples[0];
        let mean = base + samples.iter().map(|v| v - base).sum::<f64>() / n;
        let std = if samples.len() > 1 {
            (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        QuantityStats {
            name: name.to_string(),
            ml,
            mean,
            std,
            ci_lo: mean.min(ml) - std,
            ci_hi: mean.max(ml) + std,
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub iterations: usize,
    /// Iterations that hit `max_iterations`; their best iterate is kept.
    pub failures: usize,
    pub phi_m: f64,
    pub quantities: Vec<QuantityStats>,
}

impl BootstrapResult {
    pub fn quantity(&self, name: &str) -> Option<&QuantityStats> {
        self.quantities.iter().find(|q| q.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,ml,mean,std,ci_lo,ci_hi\n");
        for q in &self.quantities {
            out.push_str(&format!(
                "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}\n",
                q.name, q.ml, q.mean, q.std, q.ci_lo, q.ci_hi
            ));
        }
        out
    }
}

/// Copy of `c` with every entry drawn from an independent normal of its variance.
fn perturb(c: &MomentTensor, rng: &mut ChaCha8Rng) -> Result<MomentTensor> {
    let mut out = c.clone();
    let canon: Vec<(usize, MultiIndex)> = c.canonical().collect();
    for (i, a) in canon {
        let var = c.variances()[i];
        if a == (0, 0, 0, 0) || var <= 0.0 {
            continue;
        }
        let v = c.values()[i];
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        let delta = if mirror(a) == a {
            C64::new(re * var.sqrt(), 0.0)
        } else {
            C64::new(re, im) * (var / 2.0).sqrt()
        };
        out.set(a, v + delta, var)?;
    }
    Ok(out)
}

fn has_variance(c: &MomentTensor) -> bool {
    c.variances().iter().skip(1).any(|&v| v > 0.0)
}

/// Parametric bootstrap of the conditional probabilities and `F_lb`.
///
/// Iteration `i` draws from its own random stream and is warm-started at the
/// ML states, so results do not depend on the thread schedule.
pub fn bootstrap(
    tensors: &HeraldTensors,
    cfg: &ReconstructionConfig,
    iterations: usize,
    phi_m: f64,
) -> Result<BootstrapResult> {
    if iterations == 0 {
        return Err(Error::param("iterations", "must be positive"));
    }
    let ml_states = reconstruct_heralds(tensors, cfg)?;
    let ml = quantities(&ml_states, phi_m)?;
    let draws: Vec<Result<([f64; 9], usize)>> = (0..iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BOOTSTRAP_SALT);
            rng.set_stream(i as u64);
            let mut failed = 0;
            let states = tensors.map(|kind, c| {
                if !has_variance(c) {
                    return Ok(ml_states.get(kind).clone());
                }
                let sample = perturb(c, &mut rng)?;
                match reconstruct_from(&sample, cfg, ml_states.get(kind)) {
                    Ok(r) => Ok(r.state),
                    Err(Error::NonConvergent { best, .. }) => {
                        failed += 1;
                        Ok(*best)
                    }
                    Err(e) => Err(e),
                }
            })?;
            Ok((quantities(&states, phi_m)?, failed.min(1)))
        })
        .collect();
    let mut columns = vec![Vec::with_capacity(iterations); QUANTITY_NAMES.len()];
    let mut failures = 0;
    for d in draws {
        let (q, failed) = d?;
        failures += failed;
        for (col, v) in columns.iter_mut().zip(q) {
            col.push(v);
        }
    }
    if failures as f64 > MAX_FAILURE_FRACTION * iterations as f64 {
        return Err(Error::BootstrapFailures {
            failed: failures,
            total: iterations,
        });
    }
    let quantities = QUANTITY_NAMES
        .iter()
        .zip(ml)
        .zip(columns)
        .map(|((name, ml), samples)| QuantityStats::from_samples(name, ml, samples))
        .collect();
    Ok(BootstrapResult {
        iterations,
        failures,
        phi_m,
        quantities,
    })
}
