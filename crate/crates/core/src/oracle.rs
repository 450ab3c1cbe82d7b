//! Reduced-order device model used to label morphologies with a J_sc proxy.
//!
//! Two stages:
//!
//! 1. Exciton diffusion. `L_D²∇²n − n + G = 0` on donor pixels away from the
//!    interface, `n = 0` on interface donor pixels (instant dissociation),
//!    no flux through the top and bottom rows, periodic laterally. Solved with
//!    Jacobi-preconditioned conjugate gradients on the SPD 5-point system.
//! 2. Charge transport. Each interface donor pixel's dissociated flux
//!    survives with `exp(−(d_h + d_e)/L_t)`, where `d_h` is the donor-path
//!    distance to the bottom electrode and `d_e` the acceptor-path distance to
//!    the top electrode (4-connected BFS, lateral wrap).

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::morpho::{
    self, binarize, interface_mask, neighbours, BinaryMorphology, DatasetManifest, Morphology,
    MorphoError, DEFAULT_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("conjugate gradients did not reach tolerance {tol} in {iters} iterations (residual {residual:e})")]
    SolverDiverged { iters: usize, tol: f64, residual: f64 },
    #[error("invalid oracle parameters: {0}")]
    InvalidParams(String),
    #[error("{path}: {source}")]
    Sample {
        path: PathBuf,
        #[source]
        source: Box<OracleError>,
    },
    #[error(transparent)]
    Morpho(#[from] MorphoError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleParams {
    /// Exciton diffusion length, pixels.
    pub diffusion_length: f64,
    /// Charge transport decay length, pixels.
    pub transport_length: f64,
    pub generation: f64,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
    pub j_scale: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            diffusion_length: 10.0,
            transport_length: 100.0,
            generation: 1.0,
            solver_tol: 1e-8,
            solver_max_iters: 20_000,
            j_scale: 14.0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<(), OracleError> {
        let bad = |m: &str| Err(OracleError::InvalidParams(m.to_string()));
        if !(self.diffusion_length > 0.0) {
            return bad("L_D must be positive");
        }
        if !(self.transport_length > 0.0) {
            return bad("L_t must be positive");
        }
        if !(self.solver_tol > 0.0 && self.solver_tol <= 1e-4) {
            return bad("solver_tol must lie in (0, 1e-4]");
        }
        if !(self.generation > 0.0) {
            return bad("G must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcitonSolution {
    /// Steady exciton density per pixel; zero off the free donor set.
    pub density: Vec<f64>,
    pub eta_diss: f64,
    /// Interface donor pixel index → dissociated flux.
    pub interface_flux: BTreeMap<usize, f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub jsc: f64,
    pub proxy: f64,
    pub eta_diss: f64,
    pub eta_transport: f64,
    #[serde(skip)]
    pub interface_flux: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub survival: BTreeMap<usize, f64>,
}

pub fn solve_exciton(
    b: &BinaryMorphology,
    p: &OracleParams,
) -> Result<ExcitonSolution, OracleError> {
    p.validate()?;
    let (h, w) = (b.height, b.width);
    let n_pix = h * w;
    let g = p.generation;
    let l2 = p.diffusion_length * p.diffusion_length;
    let iface = interface_mask(b);
    let donors = b.donor_count();
    if donors == 0 {
        return Ok(ExcitonSolution {
            density: vec![0.0; n_pix],
            eta_diss: 0.0,
            interface_flux: BTreeMap::new(),
            iterations: 0,
        });
    }

    // unknowns: free donor pixels
    let mut index = vec![usize::MAX; n_pix];
    let mut free: Vec<usize> = Vec::new();
    for k in 0..n_pix {
        if b.donor[k] && !iface[k] {
            index[k] = free.len();
            free.push(k);
        }
    }
    // neighbour lists in unknown space; usize::MAX marks a Dirichlet neighbour
    let mut nbrs: Vec<[usize; 4]> = Vec::with_capacity(free.len());
    let mut diag: Vec<f64> = Vec::with_capacity(free.len());
    for &k in &free {
        let mut list = [usize::MAX - 1; 4];
        let mut deg = 0usize;
        for (slot, (i, j)) in neighbours(k / w, k % w, h, w).enumerate() {
            list[slot] = index[i * w + j];
            deg += 1;
        }
        nbrs.push(list);
        diag.push(1.0 + l2 * deg as f64);
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        for (r, list) in nbrs.iter().enumerate() {
            let mut acc = diag[r] * x[r];
            for &q in list {
                if q < usize::MAX - 1 {
                    acc -= l2 * x[q];
                }
            }
            out[r] = acc;
        }
    };

    let m = free.len();
    let mut x = vec![0.0; m];
    let mut iterations = 0;
    if m > 0 {
        let rhs_norm = g * (m as f64).sqrt();
        let mut r = vec![g; m];
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
        let mut dir = z.clone();
        let mut ad = vec![0.0; m];
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut res = rhs_norm;
        while res > p.solver_tol * rhs_norm {
            if iterations >= p.solver_max_iters {
                return Err(OracleError::SolverDiverged {
                    iters: iterations,
                    tol: p.solver_tol,
                    residual: res / rhs_norm,
                });
            }
            apply(&dir, &mut ad);
            let alpha = rz / dir.iter().zip(&ad).map(|(a, b)| a * b).sum::<f64>();
            for k in 0..m {
                x[k] += alpha * dir[k];
                r[k] -= alpha * ad[k];
            }
            for k in 0..m {
                z[k] = r[k] / diag[k];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..m {
                dir[k] = z[k] + beta * dir[k];
            }
            res = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            iterations += 1;
        }
    }

    let mut density = vec![0.0; n_pix];
    for (r, &k) in free.iter().enumerate() {
        density[k] = x[r];
    }
    let mut interface_flux = BTreeMap::new();
    for k in 0..n_pix {
        if b.donor[k] && iface[k] {
            let inflow: f64 = neighbours(k / w, k % w, h, w)
                .map(|(i, j)| i * w + j)
                .filter(|&q| index[q] != usize::MAX)
                .map(|q| density[q])
                .sum();
            interface_flux.insert(k, g + l2 * inflow);
        }
    }
    // Σflux = G·|donor| − Σn up to solver tolerance; the flux form is exact
    // for the no-interface and all-interface cases.
    let absorbed: f64 = interface_flux.values().sum();
    let eta_diss = (absorbed / (g * donors as f64)).clamp(0.0, 1.0);
    Ok(ExcitonSolution {
        density,
        eta_diss,
        interface_flux,
        iterations,
    })
}

/// Multi-source BFS restricted to `allowed`, lateral wrap. `None` = unreachable.
fn bfs(b: &BinaryMorphology, allowed: impl Fn(usize) -> bool, sources: &[usize]) -> Vec<Option<u32>> {
    let (h, w) = (b.height, b.width);
    let mut dist = vec![None; h * w];
    let mut queue = VecDeque::new();
    for &s in sources {
        if allowed(s) && dist[s].is_none() {
            dist[s] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(k) = queue.pop_front() {
        let d = dist[k].expect("queued pixels have a distance");
        for (i, j) in neighbours(k / w, k % w, h, w) {
            let q = i * w + j;
            if dist[q].is_none() && allowed(q) {
                dist[q] = Some(d + 1);
                queue.push_back(q);
            }
        }
    }
    dist
}

/// Per-interface-pixel survival probability and the flux-weighted mean.
pub fn transport_survival(
    b: &BinaryMorphology,
    p: &OracleParams,
    interface_flux: &BTreeMap<usize, f64>,
) -> (BTreeMap<usize, f64>, f64) {
    let (h, w) = (b.height, b.width);
    let bottom: Vec<usize> = ((h - 1) * w..h * w).collect();
    let top: Vec<usize> = (0..w).collect();
    let to_anode = bfs(b, |k| b.donor[k], &bottom);
    let to_cathode = bfs(b, |k| !b.donor[k], &top);

    let mut survival = BTreeMap::new();
    let (mut total, mut kept) = (0.0, 0.0);
    for (&k, &flux) in interface_flux {
        let d_h = to_anode[k];
        let d_e = neighbours(k / w, k % w, h, w)
            .map(|(i, j)| i * w + j)
            .filter(|&q| !b.donor[q])
            .filter_map(|q| to_cathode[q])
            .min();
        let s = match (d_h, d_e) {
            (Some(a), Some(c)) => (-(f64::from(a) + f64::from(c)) / p.transport_length).exp(),
            _ => 0.0,
        };
        survival.insert(k, s);
        total += flux;
        kept += flux * s;
    }
    let eta = if total > 0.0 { kept / total } else { 0.0 };
    (survival, eta)
}

pub fn evaluate_binary(b: &BinaryMorphology, p: &OracleParams) -> Result<OracleResult, OracleError> {
    let ex = solve_exciton(b, p)?;
    let (survival, eta_transport) = transport_survival(b, p, &ex.interface_flux);
    let collected: f64 = ex
        .interface_flux
        .iter()
        .map(|(k, f)| f * survival[k])
        .fold(0.0, |acc, x| acc + x);
    let proxy = (collected / (p.generation * (b.height * b.width) as f64)).clamp(0.0, 1.0);
    Ok(OracleResult {
        jsc: p.j_scale * proxy,
        proxy,
        eta_diss: ex.eta_diss,
        eta_transport,
        interface_flux: ex.interface_flux,
        survival,
    })
}

pub fn evaluate(m: &Morphology, p: &OracleParams) -> Result<OracleResult, OracleError> {
    evaluate_binary(&binarize(m, DEFAULT_THRESHOLD), p)
}

/// Fills J_sc for every sample, freezes bin edges from the training split
/// (or from every sample when no split is assigned yet) and assigns classes.
pub fn label_dataset(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    p: &OracleParams,
) -> Result<DatasetManifest, OracleError> {
    let jscs: Vec<f64> = manifest
        .samples
        .par_iter()
        .map(|s| {
            let path = DatasetManifest::resolve(manifest_path, s);
            let wrap = |e: OracleError| OracleError::Sample {
                path: path.clone(),
                source: Box::new(e),
            };
            let m = morpho::read_pgm(&path).map_err(|e| wrap(e.into()))?;
            evaluate(&m, p).map(|r| r.jsc).map_err(wrap)
        })
        .collect::<Result<_, _>>()?;

    let mut out = manifest.clone();
    for (s, &j) in out.samples.iter_mut().zip(&jscs) {
        s.jsc = Some(j);
    }
    out.rebin()?;
    Ok(out)
}
