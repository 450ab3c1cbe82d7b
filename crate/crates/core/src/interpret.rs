//! Vanilla-gradient saliency: the absolute gradient of a class logit with
//! respect to the input pixels, and a score for how strongly it concentrates
//! on phase boundaries.

use serde::Serialize;

use crate::morpho::{encode_gray, interface_mask, neighbours, BinaryMorphology, Morphology};
use crate::nn::{argmax, CnnModel, NnError, Scalar};

/// Dilation radius used when scoring against the interface.
pub const DEFAULT_BAND: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, in [0, 1]; the maximum is 1 unless the map is all zero.
    pub values: Vec<f64>,
    pub target_class: u8,
}

impl SaliencyMap {
    pub fn to_pgm(&self) -> Vec<u8> {
        encode_gray(self.height, self.width, &self.values)
    }
}

/// `|∂ logit_target / ∂ input|`, max-normalized. `target` defaults to the
/// predicted class.
pub fn saliency<T: Scalar>(model: &CnnModel<T>, m: &Morphology, target: Option<u8>) -> Result<SaliencyMap, NnError> {
    let arch = &model.arch;
    if arch.channels != 1 || m.height() != arch.height || m.width() != arch.width {
        return Err(NnError::ShapeMismatch(format!(
            "{}x{} morphology for a {}x{}x{} model",
            m.height(),
            m.width(),
            arch.height,
            arch.width,
            arch.channels
        )));
    }
    let classes = arch.classes();
    let x: Vec<T> = m.values().iter().map(|&v| T::from_f64(v)).collect();
    let trace = model.forward_trace(&x, true)?;
    let target = match target {
        Some(t) if (t as usize) < classes => t,
        Some(t) => return Err(NnError::ShapeMismatch(format!("target class {t} outside 0..{classes}"))),
        None => argmax(trace.logits()) as u8,
    };
    let mut seed = vec![T::zero(); classes];
    seed[target as usize] = T::one();
    let (_, dx) = model.backward(&trace, &seed, true)?;
    let mut values: Vec<f64> = dx.expect("input gradient requested").iter().map(|g| g.as_f64().abs()).collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
        // division by the maximum is exact for the argmax pixel, but pin it
        if let Some(top) = values.iter_mut().find(|v| **v >= 1.0) {
            *top = 1.0;
        }
    }
    Ok(SaliencyMap {
        height: m.height(),
        width: m.width(),
        values,
        target_class: target,
    })
}

/// Interface pixels dilated `band` times over 4-neighbours.
pub fn interface_band(b: &BinaryMorphology, band: usize) -> Vec<bool> {
    let (h, w) = (b.height, b.width);
    let mut mask = interface_mask(b);
    for _ in 0..band {
        let prev = mask.clone();
        for i in 0..h {
            for j in 0..w {
                if prev[i * w + j] {
                    for (a, c) in neighbours(i, j, h, w) {
                        mask[a * w + c] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Mean saliency on the dilated interface band divided by the mean on the
/// rest of the image. Returns 0 for an empty band or an all-zero map, and
/// `f64::INFINITY` when only the band carries saliency.
pub fn interface_concentration(s: &SaliencyMap, b: &BinaryMorphology, band: usize) -> f64 {
    assert_eq!((s.height, s.width), (b.height, b.width), "saliency and morphology shapes differ");
    let mask = interface_band(b, band);
    // accumulate offsets from the minimum so constant maps give equal means
    let base = s.values.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in s.values.iter().zip(&mask) {
        if m {
            sin += v - base;
            nin += 1;
        } else {
            sout += v - base;
            nout += 1;
        }
    }
    let mean_in = base + sin / nin.max(1) as f64;
    if nin == 0 || mean_in == 0.0 {
        return 0.0;
    }
    let mean_out = if nout == 0 { 0.0 } else { base + sout / nout as f64 };
    if mean_out == 0.0 {
        f64::INFINITY
    } else {
        mean_in / mean_out
    }
}
