//! Hand-constructed test morphologies: bilayers, vertical columns, blocking
//! layers and random blob fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::morpho::{BinaryMorphology, MorphoError};

pub const PRESET_NAMES: [&str; 5] = ["bilayer", "columns_w4", "columns_w10", "blocking_layer", "blob_field"];

/// Top half acceptor, bottom half donor.
pub fn bilayer(height: usize, width: usize) -> Result<BinaryMorphology, MorphoError> {
    BinaryMorphology::from_fn(height, width, |i, _| i >= height / 2)
}

/// Donor slab against the bottom electrode whose interface row sits
/// `thickness` rows above the last row (`thickness + 1` donor rows).
pub fn donor_slab(height: usize, width: usize, thickness: usize) -> Result<BinaryMorphology, MorphoError> {
    BinaryMorphology::from_fn(height, width, |i, _| i + thickness + 1 >= height)
}

/// Alternating full-height stripes of `stripe` columns, donor first.
pub fn columns(height: usize, width: usize, stripe: usize) -> Result<BinaryMorphology, MorphoError> {
    let stripe = stripe.max(1);
    BinaryMorphology::from_fn(height, width, |_, j| (j / stripe) % 2 == 0)
}

/// Columnar morphology with stripes of roughly `stripe` columns that tile
/// the periodic width evenly: `k = round(width / (2·stripe))` donor/acceptor
/// pairs with boundaries at `round(m·width / 2k)`. Unlike [`columns`], no
/// odd-sized stripe appears at the wrap-around seam.
pub fn columnar(height: usize, width: usize, stripe: usize) -> Result<BinaryMorphology, MorphoError> {
    let stripe = stripe.max(1);
    let pairs = ((width as f64 / (2.0 * stripe as f64)).round() as usize).max(1);
    let stripes = 2 * pairs;
    let edge = |m: usize| ((m * width) as f64 / stripes as f64).round() as usize;
    let mut donor_col = vec![false; width];
    for m in (0..stripes).step_by(2) {
        for c in &mut donor_col[edge(m)..edge(m + 1)] {
            *c = true;
        }
    }
    BinaryMorphology::from_fn(height, width, |_, j| donor_col[j])
}

/// Copy of `b` with every row from `first_row` down turned to acceptor,
/// severing donor contact with the bottom electrode.
pub fn with_blocking_layer(b: &BinaryMorphology, first_row: usize) -> BinaryMorphology {
    let mut out = b.clone();
    for i in first_row.min(b.height)..b.height {
        for j in 0..b.width {
            out.donor[i * b.width + j] = false;
        }
    }
    out
}

/// Smoothed random field thresholded at its mean; lateral wrap, clamped rows.
pub fn blob_field(height: usize, width: usize, seed: u64) -> Result<BinaryMorphology, MorphoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field: Vec<f64> = (0..height * width).map(|_| rng.random::<f64>()).collect();
    for _ in 0..3 {
        field = box_blur(&field, height, width, 3);
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    BinaryMorphology::new(height, width, field.iter().map(|&v| v > mean).collect())
}

pub(crate) fn box_blur(values: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut out = vec![0.0; values.len()];
    for i in 0..height as isize {
        for j in 0..width as isize {
            let (mut sum, mut count) = (0.0, 0usize);
            for di in -r..=r {
                let ii = i + di;
                if ii < 0 || ii >= height as isize {
                    continue;
                }
                for dj in -r..=r {
                    let jj = (j + dj).rem_euclid(width as isize);
                    sum += values[ii as usize * width + jj as usize];
                    count += 1;
                }
            }
            out[i as usize * width + j as usize] = sum / count as f64;
        }
    }
    out
}

/// Named preset on the default 101×101 canvas.
pub fn by_name(name: &str) -> Option<BinaryMorphology> {
    let side = crate::morpho::DEFAULT_SIDE;
    let b = match name {
        "bilayer" => bilayer(side, side),
        "columns_w4" => columns(side, side, 4),
        "columns_w10" => columns(side, side, 10),
        "blocking_layer" => columns(side, side, 4).map(|c| with_blocking_layer(&c, 95)),
        "blob_field" => blob_field(side, side, 0),
        _ => return None,
    };
    Some(b.expect("preset shapes are valid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilayer_layout() {
        let b = bilayer(10, 4).unwrap();
        assert!(!b.is_donor(4, 0));
        assert!(b.is_donor(5, 3));
    }

    #[test]
    fn columns_layout() {
        let c = columns(6, 16, 4).unwrap();
        let row: Vec<bool> = (0..16).map(|j| c.is_donor(5, j)).collect();
        assert_eq!(&row[..8], &[true, true, true, true, false, false, false, false]);
        assert!((0..6).all(|i| c.is_donor(i, 0)));
    }

    #[test]
    fn columnar_tiles_evenly() {
        let c = columnar(5, 101, 10).unwrap();
        // 5 pairs over 101 columns: boundaries 0, 10, 20, 30, 40, 51, 61, 71, 81, 91, 101
        let row: Vec<bool> = (0..101).map(|j| c.is_donor(0, j)).collect();
        let mut runs = vec![1];
        for j in 1..101 {
            if row[j] == row[j - 1] {
                *runs.last_mut().unwrap() += 1;
            } else {
                runs.push(1);
            }
        }
        assert_eq!(runs, vec![10, 10, 10, 10, 11, 10, 10, 10, 10, 10]);
        assert!(row[0] && !row[100]);
        let wide = columnar(5, 101, 80).unwrap();
        assert_eq!(wide.donor_count(), 5 * 51);
    }

    #[test]
    fn blocking_layer_clears_bottom_rows() {
        let b = by_name("blocking_layer").unwrap();
        assert!((95..101).all(|i| (0..101).all(|j| !b.is_donor(i, j))));
        assert!(b.is_donor(94, 0));
    }

    #[test]
    fn every_named_preset_exists() {
        for n in PRESET_NAMES {
            assert!(by_name(n).is_some(), "{n}");
        }
        assert!(by_name("nope").is_none());
    }

    #[test]
    fn blob_field_is_two_phase_and_seeded() {
        let a = blob_field(50, 50, 1).unwrap();
        let frac = a.donor_count() as f64 / 2500.0;
        assert!((0.3..0.7).contains(&frac));
        assert_eq!(a, blob_field(50, 50, 1).unwrap());
    }
}
