//! Population-Based Incremental Learning over a per-pixel donor probability
//! grid, with pluggable fitness functions (CNN surrogate, oracle, OneMax).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::morpho::{BinaryMorphology, Morphology};
use crate::nn::{softmax, CnnModel};
use crate::oracle::{evaluate_binary, OracleParams};
use crate::presets::box_blur;

pub type FitnessError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("invalid PBIL parameters: {0}")]
    InvalidParams(String),
    #[error("fitness evaluation failed for sample {index}: {source}")]
    Fitness {
        index: usize,
        #[source]
        source: FitnessError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbilParams {
    pub n: usize,
    pub n_b: usize,
    pub l_r: f64,
    pub mutation_prob: f64,
    pub mutation_shift: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub smoothing_radius: usize,
    pub max_iters: usize,
    pub improvement_tol: f64,
    pub improvement_window: usize,
    pub seed: u64,
    /// Evaluate samples on the calling thread only.
    pub serial: bool,
}

impl Default for PbilParams {
    fn default() -> Self {
        Self {
            n: 100,
            n_b: 10,
            l_r: 0.1,
            mutation_prob: 0.02,
            mutation_shift: 0.05,
            p_min: 0.01,
            p_max: 0.99,
            smoothing_radius: 1,
            max_iters: 200,
            improvement_tol: 1e-3,
            improvement_window: 20,
            seed: 0,
            serial: false,
        }
    }
}

impl PbilParams {
    pub fn validate(&self) -> Result<(), DesignError> {
        let bad = |m: &str| Err(DesignError::InvalidParams(m.into()));
        if !(self.l_r > 0.0 && self.l_r <= 1.0) {
            return bad("l_r must lie in (0, 1]");
        }
        if self.n_b == 0 || self.n_b >= self.n {
            return bad("need 0 < n_b < n");
        }
        if !(0.0 < self.p_min && self.p_min <= self.p_max && self.p_max < 1.0) {
            return bad("clamp bounds must satisfy 0 < p_min <= p_max < 1");
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) || !(0.0..=1.0).contains(&self.mutation_shift) {
            return bad("mutation_prob and mutation_shift must lie in [0, 1]");
        }
        if !(self.improvement_tol >= 0.0) || self.improvement_window == 0 {
            return bad("improvement_tol must be >= 0 and improvement_window >= 1");
        }
        Ok(())
    }

    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.p_min, self.p_max)
    }
}

/// Scores a binary morphology; higher is better. Must be deterministic.
pub trait FitnessFn: Sync {
    fn evaluate(&self, b: &BinaryMorphology) -> Result<f64, FitnessError>;

    /// Scores a population. The default fans out per sample.
    fn evaluate_batch(&self, samples: &[BinaryMorphology], serial: bool) -> Vec<Result<f64, FitnessError>> {
        if serial {
            samples.iter().map(|s| self.evaluate(s)).collect()
        } else {
            samples.par_iter().map(|s| self.evaluate(s)).collect()
        }
    }
}

/// Number of donor pixels.
pub struct OneMax;

impl FitnessFn for OneMax {
    fn evaluate(&self, b: &BinaryMorphology) -> Result<f64, FitnessError> {
        Ok(b.donor_count() as f64)
    }
}

/// Oracle short-circuit current.
pub struct OracleJsc(pub OracleParams);

impl FitnessFn for OracleJsc {
    fn evaluate(&self, b: &BinaryMorphology) -> Result<f64, FitnessError> {
        Ok(evaluate_binary(b, &self.0)?.jsc)
    }
}

/// Expected class index `Σ k·p_k` under the surrogate.
pub struct CnnExpectedClass<'a>(pub &'a CnnModel<f32>);

impl CnnExpectedClass<'_> {
    fn score_rows(&self, logits: &[f32]) -> Vec<f64> {
        let classes = self.0.arch.classes();
        softmax(logits, classes)
            .chunks(classes)
            .map(|p| p.iter().enumerate().map(|(k, &q)| k as f64 * q as f64).sum())
            .collect()
    }

    fn forward(&self, samples: &[BinaryMorphology]) -> Result<Vec<f64>, FitnessError> {
        let x: Vec<f32> = samples
            .iter()
            .flat_map(|b| b.donor.iter().map(|&d| if d { 1.0 } else { 0.0 }))
            .collect();
        Ok(self.score_rows(&self.0.forward(&x)?))
    }
}

impl FitnessFn for CnnExpectedClass<'_> {
    fn evaluate(&self, b: &BinaryMorphology) -> Result<f64, FitnessError> {
        Ok(self.forward(std::slice::from_ref(b))?[0])
    }

    fn evaluate_batch(&self, samples: &[BinaryMorphology], serial: bool) -> Vec<Result<f64, FitnessError>> {
        const CHUNK: usize = 16;
        let run = |c: &[BinaryMorphology]| match self.forward(c) {
            Ok(v) => v.into_iter().map(Ok).collect::<Vec<_>>(),
            // a shape error applies to every sample of the chunk
            Err(e) => {
                let msg = e.to_string();
                c.iter().map(|_| Err(msg.clone().into())).collect()
            }
        };
        let parts: Vec<Vec<_>> = if serial {
            samples.chunks(CHUNK).map(run).collect()
        } else {
            samples.par_chunks(CHUNK).map(run).collect()
        };
        parts.into_iter().flatten().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub best_fitness: f64,
    pub elite_mean: f64,
}

#[derive(Debug, Clone)]
pub struct PbilState {
    pub height: usize,
    pub width: usize,
    /// Donor probability per pixel, row-major.
    pub p: Vec<f64>,
    pub iteration: usize,
    pub best_sample: BinaryMorphology,
    pub best_fitness: f64,
    /// Row 0 describes the initial state.
    pub history: Vec<HistoryRow>,
    rng: ChaCha8Rng,
}

/// Starting distribution.
pub enum PbilInit<'a> {
    Morphology(&'a Morphology),
    Uniform { height: usize, width: usize },
}

/// Bernoulli draw per pixel, then (radius > 0) box blur and re-threshold at
/// 0.5 with ties going to donor.
pub fn pbil_sample(p: &[f64], height: usize, width: usize, smoothing_radius: usize, rng: &mut impl Rng) -> BinaryMorphology {
    let bits: Vec<bool> = p.iter().map(|&q| rng.random::<f64>() < q).collect();
    let donor = if smoothing_radius == 0 {
        bits
    } else {
        let field: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        box_blur(&field, height, width, smoothing_radius)
            .into_iter()
            .map(|v| v >= 0.5)
            .collect()
    };
    BinaryMorphology { height, width, donor }
}

/// `clamp(P·(1 − l_r) + P_b·l_r)` in place.
pub fn update_probabilities(p: &mut [f64], p_b: &[f64], params: &PbilParams) {
    for (q, &b) in p.iter_mut().zip(p_b) {
        *q = params.clamp(*q * (1.0 - params.l_r) + b * params.l_r);
    }
}

fn check<F: FitnessFn + ?Sized>(results: Vec<Result<f64, FitnessError>>) -> Result<Vec<f64>, DesignError> {
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| match r {
            Ok(v) if v.is_nan() => Err(DesignError::Fitness {
                index,
                source: "fitness is NaN".into(),
            }),
            Ok(v) => Ok(v),
            Err(source) => Err(DesignError::Fitness { index, source }),
        })
        .collect()
}

pub fn pbil_init<F: FitnessFn + ?Sized>(init: PbilInit<'_>, delta: f64, params: &PbilParams, f: &F) -> Result<PbilState, DesignError> {
    params.validate()?;
    if !(delta > 0.0 && delta < 0.5) {
        return Err(DesignError::InvalidParams("delta must lie in (0, 0.5)".into()));
    }
    let (height, width, p) = match init {
        PbilInit::Morphology(m) => (
            m.height(),
            m.width(),
            m.values().iter().map(|&v| params.clamp(v * (1.0 - 2.0 * delta) + delta)).collect(),
        ),
        PbilInit::Uniform { height, width } => (height, width, vec![params.clamp(0.5); height * width]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let first = pbil_sample(&p, height, width, params.smoothing_radius, &mut rng);
    let fit = check::<F>(f.evaluate_batch(std::slice::from_ref(&first), true))?[0];
    Ok(PbilState {
        height,
        width,
        p,
        iteration: 0,
        best_sample: first,
        best_fitness: fit,
        history: vec![HistoryRow {
            iter: 0,
            best_fitness: fit,
            elite_mean: fit,
        }],
        rng,
    })
}

/// One generation: sample, score, move P toward the elite mean, mutate.
pub fn pbil_iterate<F: FitnessFn + ?Sized>(state: &mut PbilState, params: &PbilParams, f: &F) -> Result<(), DesignError> {
    params.validate()?;
    let (h, w) = (state.height, state.width);
    let samples: Vec<BinaryMorphology> = (0..params.n)
        .map(|_| pbil_sample(&state.p, h, w, params.smoothing_radius, &mut state.rng))
        .collect();
    let fitness = check::<F>(f.evaluate_batch(&samples, params.serial))?;
    let mut order: Vec<usize> = (0..params.n).collect();
    // descending fitness, stable on index
    order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]));
    let elite = &order[..params.n_b];
    let mut p_b = vec![0.0; h * w];
    for &e in elite {
        for (acc, &d) in p_b.iter_mut().zip(&samples[e].donor) {
            if d {
                *acc += 1.0;
            }
        }
    }
    p_b.iter_mut().for_each(|v| *v /= params.n_b as f64);
    update_probabilities(&mut state.p, &p_b, params);
    if params.mutation_prob > 0.0 {
        for q in &mut state.p {
            if state.rng.random::<f64>() < params.mutation_prob {
                let bit = if state.rng.random_bool(0.5) { 1.0 } else { 0.0 };
                *q = params.clamp(*q * (1.0 - params.mutation_shift) + bit * params.mutation_shift);
            }
        }
    }
    let top = elite[0];
    if fitness[top] > state.best_fitness {
        state.best_fitness = fitness[top];
        state.best_sample = samples[top].clone();
    }
    state.iteration += 1;
    state.history.push(HistoryRow {
        iter: state.iteration,
        best_fitness: state.best_fitness,
        elite_mean: elite.iter().map(|&e| fitness[e]).sum::<f64>() / params.n_b as f64,
    });
    Ok(())
}

/// True once the best fitness has improved by less than the tolerance over
/// the trailing window.
pub fn stalled(state: &PbilState, params: &PbilParams) -> bool {
    let k = state.iteration;
    k > params.improvement_window
        && state.history[k].best_fitness - state.history[k - params.improvement_window].best_fitness < params.improvement_tol
}

#[derive(Debug, Clone, PartialEq)]
pub struct PSnapshot {
    pub iteration: usize,
    pub p: Vec<f64>,
}

/// Iterates until `max_iters`, stagnation, or `on_iter` returns false.
/// P is recorded after every iteration listed in `snapshot_at` (iteration 0
/// is the initial grid).
pub fn pbil_run<F: FitnessFn + ?Sized>(
    mut state: PbilState,
    params: &PbilParams,
    f: &F,
    snapshot_at: &[usize],
    mut on_iter: impl FnMut(&PbilState) -> bool,
) -> Result<(PbilState, Vec<PSnapshot>), DesignError> {
    params.validate()?;
    let mut snaps = Vec::new();
    let mut record = |s: &PbilState| {
        if snapshot_at.contains(&s.iteration) {
            snaps.push(PSnapshot {
                iteration: s.iteration,
                p: s.p.clone(),
            });
        }
    };
    record(&state);
    while state.iteration < params.max_iters {
        pbil_iterate(&mut state, params, f)?;
        record(&state);
        if !on_iter(&state) || stalled(&state, params) {
            break;
        }
    }
    Ok((state, snaps))
}

/// `iter,best_fitness,elite_mean`.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("iter,best_fitness,elite_mean\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.iter, r.best_fitness, r.elite_mean));
    }
    s
}
