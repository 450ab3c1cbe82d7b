//! Cahn-Hilliard morphology generator.
//!
//! Integrates `∂φ/∂t = M∇²(φ³ − φ − ε²∇²φ)` on a periodic square grid with a
//! linearly stabilized semi-implicit spectral scheme:
//!
//! ```text
//! φ̂ⁿ⁺¹ = [(1 + ΔtMSk²)φ̂ⁿ − ΔtMk²ĝⁿ] / (1 + ΔtMSk² + ΔtMε²k⁴),   g = φ³ − φ
//! ```
//!
//! Snapshots are center-cropped to 101×101 and mapped to gray via `(φ+1)/2`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fft::{Fft2Plan, FftError};
use crate::morpho::{Morphology, DEFAULT_SIDE};

pub const BLEND_MEANS: [f64; 5] = [-0.2, -0.1, 0.0, 0.1, 0.2];
pub const BLOWUP_LIMIT: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ChError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("numerical blowup at step {step}: max |phi| = {max_abs}")]
    NumericalBlowup { step: u64, max_abs: f64 },
    #[error(transparent)]
    Fft(#[from] FftError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChParams {
    pub grid_n: usize,
    pub eps2: f64,
    pub mobility: f64,
    pub dt: f64,
    pub stabilization: f64,
    pub blend_mean: f64,
    pub noise_amp: f64,
    pub seed: u64,
    pub snapshot_steps: Vec<u64>,
    pub crop: usize,
}

/// `100·2^k` for `k = 0..=6`.
pub fn default_snapshot_steps() -> Vec<u64> {
    (0..7).map(|k| 100u64 << k).collect()
}

impl Default for ChParams {
    fn default() -> Self {
        Self {
            grid_n: 128,
            eps2: 1.0,
            mobility: 1.0,
            dt: 0.1,
            stabilization: 2.0,
            blend_mean: 0.0,
            noise_amp: 0.1,
            seed: 0,
            snapshot_steps: default_snapshot_steps(),
            crop: DEFAULT_SIDE,
        }
    }
}

impl ChParams {
    /// Defaults with the blend mean picked from [`BLEND_MEANS`] by seed.
    pub fn for_seed(seed: u64) -> Self {
        Self {
            seed,
            blend_mean: BLEND_MEANS[(seed % BLEND_MEANS.len() as u64) as usize],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ChError> {
        let bad = |m: String| Err(ChError::InvalidParams(m));
        if !self.grid_n.is_power_of_two() || self.grid_n < 32 {
            return bad(format!("grid_n {} must be a power of two >= 32", self.grid_n));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt {} must be positive", self.dt));
        }
        if !(self.eps2 > 0.0) {
            return bad(format!("eps2 {} must be positive", self.eps2));
        }
        if !(self.mobility > 0.0) || self.stabilization < 0.0 {
            return bad("mobility must be positive and stabilization non-negative".into());
        }
        if !(self.noise_amp >= 0.0) || self.blend_mean.abs() + self.noise_amp >= 1.0 {
            return bad(format!(
                "|blend_mean| + noise_amp must be < 1 (got {} + {})",
                self.blend_mean.abs(),
                self.noise_amp
            ));
        }
        if self.snapshot_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("snapshot_steps must be strictly increasing".into());
        }
        if self.crop < 3 || self.crop > self.grid_n {
            return bad(format!("crop {} must lie in [3, grid_n]", self.crop));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let steps: Vec<String> = self.snapshot_steps.iter().map(|s| s.to_string()).collect();
        vec![
            ("grid_n".into(), self.grid_n.to_string()),
            ("eps2".into(), format!("{}", self.eps2)),
            ("mobility".into(), format!("{}", self.mobility)),
            ("dt".into(), format!("{}", self.dt)),
            ("stabilization".into(), format!("{}", self.stabilization)),
            ("blend_mean".into(), format!("{}", self.blend_mean)),
            ("noise_amp".into(), format!("{}", self.noise_amp)),
            ("seed".into(), self.seed.to_string()),
            ("snapshot_steps".into(), steps.join(",")),
            ("crop".into(), self.crop.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChState {
    pub phi: Vec<f64>,
    pub n: usize,
    pub step: u64,
    pub time: f64,
}

impl ChState {
    pub fn mean(&self) -> f64 {
        self.phi.iter().sum::<f64>() / self.phi.len() as f64
    }
}

pub fn ch_init(params: &ChParams) -> Result<ChState, ChError> {
    params.validate()?;
    let n = params.grid_n;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let a = params.noise_amp;
    let phi = (0..n * n)
        .map(|_| {
            if a > 0.0 {
                params.blend_mean + rng.random_range(-a..a)
            } else {
                params.blend_mean
            }
        })
        .collect();
    Ok(ChState {
        phi,
        n,
        step: 0,
        time: 0.0,
    })
}

fn wavenumbers_sq(n: usize) -> Vec<f64> {
    let k1: Vec<f64> = (0..n)
        .map(|j| {
            let signed = if j < n / 2 { j as f64 } else { j as f64 - n as f64 };
            2.0 * PI * signed / n as f64
        })
        .collect();
    let mut k2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k2[i * n + j] = k1[i] * k1[i] + k1[j] * k1[j];
        }
    }
    k2
}

/// Stepper with cached spectral coefficients.
pub struct Simulation {
    params: ChParams,
    plan: Fft2Plan,
    k2: Vec<f64>,
    explicit: Vec<f64>,
    nonlinear: Vec<f64>,
    phi_hat: Vec<Complex64>,
    work: Vec<Complex64>,
    state: ChState,
}

impl Simulation {
    pub fn new(state: ChState, params: &ChParams) -> Result<Self, ChError> {
        params.validate()?;
        let n = params.grid_n;
        if state.n != n || state.phi.len() != n * n {
            return Err(ChError::InvalidParams(format!(
                "state side {} does not match grid_n {n}",
                state.n
            )));
        }
        let mut plan = Fft2Plan::new(n)?;
        let k2 = wavenumbers_sq(n);
        let (dt, m, s, e2) = (params.dt, params.mobility, params.stabilization, params.eps2);
        let mut explicit = Vec::with_capacity(n * n);
        let mut nonlinear = Vec::with_capacity(n * n);
        for &q in &k2 {
            let denom = 1.0 + dt * m * s * q + dt * m * e2 * q * q;
            explicit.push((1.0 + dt * m * s * q) / denom);
            nonlinear.push(dt * m * q / denom);
        }
        let mut phi_hat: Vec<Complex64> = state.phi.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        plan.forward(&mut phi_hat)?;
        Ok(Self {
            params: params.clone(),
            plan,
            k2,
            explicit,
            nonlinear,
            phi_hat,
            work: vec![Complex64::default(); n * n],
            state,
        })
    }

    pub fn state(&self) -> &ChState {
        &self.state
    }

    pub fn into_state(self) -> ChState {
        self.state
    }

    pub fn step(&mut self) -> Result<(), ChError> {
        for (w, &p) in self.work.iter_mut().zip(&self.state.phi) {
            *w = Complex64::new(p * p * p - p, 0.0);
        }
        self.plan.forward(&mut self.work)?;
        for ((ph, g), (a, b)) in self
            .phi_hat
            .iter_mut()
            .zip(&self.work)
            .zip(self.explicit.iter().zip(&self.nonlinear))
        {
            *ph = *ph * *a - *g * *b;
        }
        self.work.copy_from_slice(&self.phi_hat);
        self.plan.inverse(&mut self.work)?;
        let mut max_abs = 0.0f64;
        for (p, w) in self.state.phi.iter_mut().zip(&self.work) {
            *p = w.re;
            max_abs = max_abs.max(w.re.abs());
        }
        self.state.step += 1;
        self.state.time = self.state.step as f64 * self.params.dt;
        if !(max_abs <= BLOWUP_LIMIT) {
            return Err(ChError::NumericalBlowup {
                step: self.state.step,
                max_abs,
            });
        }
        Ok(())
    }

    /// `Σ[¼(φ²−1)² + ½ε²|∇φ|²]` with the gradient term evaluated spectrally,
    /// consistent with the stepper's operator.
    pub fn energy(&self) -> f64 {
        let n2 = self.phi_hat.len() as f64;
        let bulk: f64 = self
            .state
            .phi
            .iter()
            .map(|&p| 0.25 * (p * p - 1.0).powi(2))
            .sum();
        let grad: f64 = self
            .phi_hat
            .iter()
            .zip(&self.k2)
            .map(|(v, &q)| q * v.norm_sqr())
            .sum::<f64>()
            / n2;
        bulk + 0.5 * self.params.eps2 * grad
    }
}

pub fn ch_step(state: &ChState, params: &ChParams) -> Result<ChState, ChError> {
    let mut sim = Simulation::new(state.clone(), params)?;
    sim.step()?;
    Ok(sim.into_state())
}

pub fn energy(state: &ChState, params: &ChParams) -> Result<f64, ChError> {
    Ok(Simulation::new(state.clone(), params)?.energy())
}

/// One emitted snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub morphology: Morphology,
    pub step: u64,
    pub group: String,
}

impl Snapshot {
    pub fn file_name(&self, seed: u64) -> String {
        format!("ch_{seed}_{}.pgm", self.step)
    }
}

/// Centered `crop×crop` window of `φ`, mapped to gray `(φ+1)/2` in `[0,1]`.
pub fn crop_to_morphology(state: &ChState, crop: usize) -> Morphology {
    let n = state.n;
    let off = (n - crop) / 2;
    Morphology::from_fn(crop, crop, |i, j| {
        ((state.phi[(i + off) * n + j + off] + 1.0) / 2.0).clamp(0.0, 1.0)
    })
    .expect("crop is at least 3x3 and values are clamped")
}

pub fn ch_run(params: &ChParams) -> Result<Vec<Snapshot>, ChError> {
    let mut sim = Simulation::new(ch_init(params)?, params)?;
    let mut out = Vec::with_capacity(params.snapshot_steps.len());
    for (idx, &target) in params.snapshot_steps.iter().enumerate() {
        while sim.state.step < target {
            sim.step()?;
        }
        out.push(Snapshot {
            morphology: crop_to_morphology(&sim.state, params.crop),
            step: target,
            group: format!("{}_{}", params.seed, idx),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morpho::{binarize, interface_mask};

    fn small(seed: u64) -> ChParams {
        ChParams {
            grid_n: 32,
            crop: 21,
            seed,
            snapshot_steps: vec![10, 20],
            ..ChParams::default()
        }
    }

    #[test]
    fn init_without_noise_is_flat() {
        let p = ChParams {
            noise_amp: 0.0,
            blend_mean: 0.1,
            ..small(1)
        };
        let s = ch_init(&p).unwrap();
        assert!(s.phi.iter().all(|&v| v == 0.1));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(ch_init(&small(5)).unwrap(), ch_init(&small(5)).unwrap());
        assert_ne!(ch_init(&small(5)).unwrap(), ch_init(&small(6)).unwrap());
    }

    #[test]
    fn init_mean_near_zero() {
        for seed in 0..10 {
            let s = ch_init(&ChParams { seed, ..ChParams::default() }).unwrap();
            assert!(s.mean().abs() <= 0.01, "seed {seed}: {}", s.mean());
        }
    }

    #[test]
    fn uniform_field_is_fixed_point() {
        for &b in &BLEND_MEANS {
            let p = ChParams {
                noise_amp: 0.0,
                blend_mean: b,
                ..small(0)
            };
            let s0 = ch_init(&p).unwrap();
            let s1 = ch_step(&s0, &p).unwrap();
            assert_eq!(s0.phi, s1.phi, "blend {b}");
        }
    }

    #[test]
    fn mass_is_conserved() {
        let p = ChParams { blend_mean: -0.1, ..small(3) };
        let mut sim = Simulation::new(ch_init(&p).unwrap(), &p).unwrap();
        let m0 = sim.state().mean();
        for _ in 0..200 {
            sim.step().unwrap();
            assert!((sim.state().mean() - m0).abs() <= 1e-8);
        }
    }

    #[test]
    fn energy_decreases() {
        let p = small(4);
        let mut sim = Simulation::new(ch_init(&p).unwrap(), &p).unwrap();
        let mut e = sim.energy();
        for _ in 0..300 {
            sim.step().unwrap();
            let next = sim.energy();
            assert!(next <= e + 1e-6 * e.abs(), "{next} > {e}");
            e = next;
        }
    }

    #[test]
    fn separates_into_two_phases() {
        let p = ChParams { seed: 2, ..ChParams::default() };
        let mut sim = Simulation::new(ch_init(&p).unwrap(), &p).unwrap();
        let separated = |s: &Simulation| {
            let phi = &s.state().phi;
            phi.iter().filter(|v| v.abs() > 0.5).count() as f64 / phi.len() as f64
        };
        for _ in 0..1000 {
            sim.step().unwrap();
        }
        // interfaces are ~3 px wide, so a sizeable share sits below 0.5 early on
        let early = separated(&sim);
        assert!(early >= 0.7, "step 1000: {early}");
        for _ in 1000..3200 {
            sim.step().unwrap();
        }
        let late = separated(&sim);
        assert!(late >= 0.8 && late > early, "step 3200: {late}");
    }

    #[test]
    fn run_counts_and_determinism() {
        let p = ChParams { snapshot_steps: vec![5], ..small(9) };
        let a = ch_run(&p).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].group, "9_0");
        assert_eq!(a[0].morphology.height(), 21);
        assert_eq!(a, ch_run(&p).unwrap());
    }

    #[test]
    fn coarsening_reduces_interface() {
        let p = ChParams::for_seed(12);
        let snaps = ch_run(&p).unwrap();
        assert_eq!(snaps.len(), 7);
        let len = |s: &Snapshot| {
            interface_mask(&binarize(&s.morphology, 0.5))
                .iter()
                .filter(|&&x| x)
                .count()
        };
        assert!(len(&snaps[6]) < len(&snaps[0]));
        assert_eq!(snaps[6].step, 6400);
    }

    #[test]
    fn rejects_bad_params() {
        let bad = [
            ChParams { grid_n: 48, ..ChParams::default() },
            ChParams { grid_n: 16, crop: 9, ..ChParams::default() },
            ChParams { dt: 0.0, ..ChParams::default() },
            ChParams { eps2: -1.0, ..ChParams::default() },
            ChParams { blend_mean: 0.95, ..ChParams::default() },
            ChParams { snapshot_steps: vec![10, 10], ..ChParams::default() },
        ];
        for p in bad {
            assert!(matches!(ch_init(&p), Err(ChError::InvalidParams(_))), "{p:?}");
        }
    }

    #[test]
    fn huge_step_blows_up() {
        let p = ChParams {
            dt: 1e6,
            stabilization: 0.0,
            eps2: 1e-6,
            noise_amp: 0.5,
            ..small(1)
        };
        let mut sim = Simulation::new(ch_init(&p).unwrap(), &p).unwrap();
        let mut err = None;
        for _ in 0..50 {
            if let Err(e) = sim.step() {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(ChError::NumericalBlowup { .. })));
    }
}
