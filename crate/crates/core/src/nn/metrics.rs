use rayon::prelude::*;
use serde::Serialize;

use super::model::{argmax, CnnModel};
use super::scalar::Scalar;
use super::train::{Dataset, CHUNK};
use super::NnError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub within_one_accuracy: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_predictions(truth: &[u8], pred: &[u8], classes: usize) -> Result<Self, NnError> {
        if truth.len() != pred.len() {
            return Err(NnError::ShapeMismatch(format!("{} labels, {} predictions", truth.len(), pred.len())));
        }
        if truth.is_empty() {
            return Err(NnError::EmptySplit(String::new()));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        let (mut hits, mut near) = (0usize, 0usize);
        for (&t, &p) in truth.iter().zip(pred) {
            let (t, p) = (t as usize, p as usize);
            if t >= classes || p >= classes {
                return Err(NnError::ShapeMismatch(format!("class {} outside 0..{classes}", t.max(p))));
            }
            confusion[t][p] += 1;
            hits += usize::from(t == p);
            near += usize::from(t.abs_diff(p) <= 1);
        }
        let mut f1s = Vec::new();
        for c in 0..classes {
            let tp = confusion[c][c] as f64;
            let actual: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            if actual == 0 && predicted == 0 {
                continue;
            }
            f1s.push(2.0 * tp / (actual + predicted) as f64);
        }
        let n = truth.len() as f64;
        Ok(Self {
            accuracy: hits as f64 / n,
            macro_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
            within_one_accuracy: near as f64 / n,
            confusion,
        })
    }

    /// Every row's diagonal entry is (one of) its largest; rows without
    /// samples are skipped.
    pub fn diagonally_dominant(&self) -> bool {
        self.confusion.iter().enumerate().all(|(i, row)| {
            let max = row.iter().copied().max().unwrap_or(0);
            max == 0 || row[i] == max
        })
    }

    /// Confusion matrix with a header row and a label column.
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut s = String::from("true\\pred");
        for c in 0..k {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Argmax class for every sample of `data`.
pub fn predict_classes<T: Scalar>(model: &CnnModel<T>, data: &Dataset, serial: bool) -> Result<Vec<u8>, NnError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let classes = model.arch.classes();
    let work = |chunk: &[usize]| -> Result<Vec<u8>, NnError> {
        let logits = model.forward(&data.inputs::<T>(chunk))?;
        Ok(logits.chunks(classes).map(|r| argmax(r) as u8).collect())
    };
    let parts: Vec<Vec<u8>> = if serial {
        idx.chunks(CHUNK).map(work).collect::<Result<_, _>>()?
    } else {
        idx.par_chunks(CHUNK).map(work).collect::<Result<_, _>>()?
    };
    Ok(parts.concat())
}

pub fn evaluate<T: Scalar>(model: &CnnModel<T>, data: &Dataset) -> Result<EvalReport, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptySplit(data.name.clone()));
    }
    let pred = predict_classes(model, data, false)?;
    EvalReport::from_predictions(&data.labels, &pred, model.arch.classes())
}
