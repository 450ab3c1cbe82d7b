//! Mini-batch training with Adam.
//!
//! Each batch is cut into fixed chunks of [`CHUNK`] samples whose gradients
//! are computed independently (in parallel unless `deterministic`) and then
//! summed in chunk order, so the result does not depend on thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, AdamState};
use super::metrics::predict_classes;
use super::model::{CnnModel, Grads};
use super::scalar::Scalar;
use super::NnError;
use crate::morpho::{quantize, read_pgm, DatasetManifest, Morphology, Split};

pub(crate) const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Run chunks serially. Results are identical either way; this only
    /// pins execution to the calling thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 128,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// Labeled images held as 8-bit gray levels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, height: usize, width: usize) -> Self {
        Self {
            name: name.into(),
            height,
            width,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, m: &Morphology, label: u8) -> Result<(), NnError> {
        if m.height() != self.height || m.width() != self.width {
            return Err(NnError::ShapeMismatch(format!(
                "{}x{} image in a {}x{} dataset",
                m.height(),
                m.width(),
                self.height,
                self.width
            )));
        }
        self.pixels.extend(m.values().iter().map(|&v| quantize(v)));
        self.labels.push(label);
        Ok(())
    }

    /// Inputs in [0, 1] for the given sample indices, concatenated.
    pub fn inputs<T: Scalar>(&self, indices: &[usize]) -> Vec<T> {
        let per = self.height * self.width;
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&p| T::from_f64(p as f64 / 255.0)));
        }
        out
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Loads every labeled sample of `split`, resolving paths against the
    /// manifest's directory.
    pub fn from_manifest(manifest: &DatasetManifest, manifest_path: &Path, split: Split) -> Result<Self, NnError> {
        let rows: Vec<_> = manifest.split(split).filter(|s| s.class_id.is_some()).collect();
        if rows.is_empty() {
            return Err(NnError::EmptySplit(split.to_string()));
        }
        let images = rows
            .par_iter()
            .map(|s| read_pgm(&DatasetManifest::resolve(manifest_path, s)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Dataset::new(split.to_string(), images[0].height(), images[0].width());
        for (m, s) in images.iter().zip(&rows) {
            out.push(m, s.class_id.expect("filtered"))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when no validation set was given.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Model after the last epoch.
    pub model: CnnModel<T>,
    /// Model after the epoch with the highest validation accuracy (training
    /// accuracy without a validation set); earliest epoch on ties.
    pub best: CnnModel<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// `epoch,train_loss,train_acc,val_acc`, one row per epoch.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,val_acc\n");
    for r in history {
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.train_acc, val));
    }
    s
}

fn sum_into<T: Scalar>(acc: &mut Grads<T>, g: Grads<T>) {
    for (a, g) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(g) {
            *x += y;
        }
    }
}

/// Mean loss, summed gradients and correct count over one batch.
fn batch_grads<T: Scalar>(model: &CnnModel<T>, data: &Dataset, batch: &[usize], serial: bool) -> Result<(f64, Grads<T>, usize), NnError> {
    let work = |chunk: &[usize]| {
        let x = data.inputs::<T>(chunk);
        let y = data.labels_of(chunk);
        model
            .loss_and_grads_scaled(&x, &y, batch.len(), false)
            .map(|(l, g, _, c)| (l.as_f64(), g, c))
    };
    let parts: Vec<_> = if serial {
        batch.chunks(CHUNK).map(work).collect::<Result<_, _>>()?
    } else {
        batch.par_chunks(CHUNK).map(work).collect::<Result<_, _>>()?
    };
    let mut iter = parts.into_iter();
    let (mut loss, mut grads, mut correct) = iter.next().expect("batch is non-empty");
    for (l, g, c) in iter {
        loss += l;
        correct += c;
        sum_into(&mut grads, g);
    }
    Ok((loss, grads, correct))
}

fn accuracy<T: Scalar>(model: &CnnModel<T>, data: &Dataset, serial: bool) -> Result<f64, NnError> {
    let pred = predict_classes(model, data, serial)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Trains `model` for `cfg.epochs` epochs, calling `on_epoch` after each.
/// Train loss and accuracy are accumulated over the epoch's batches (before
/// each batch's update).
pub fn train<T: Scalar>(
    mut model: CnnModel<T>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>, NnError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NnError::EmptyTrainSplit);
    }
    let expect = model.arch.input_len();
    if train_set.height * train_set.width != expect {
        return Err(NnError::ShapeMismatch(format!(
            "{}x{} images for a {}x{} model",
            train_set.height, train_set.width, model.arch.height, model.arch.width
        )));
    }
    let val_set = val_set.filter(|v| !v.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(&model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::NEG_INFINITY;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads, c) = batch_grads(&model, train_set, batch, cfg.deterministic)?;
            loss_sum += loss * batch.len() as f64;
            correct += c;
            adam_step(&mut model, &grads, &mut opt, cfg);
        }
        let val_acc = val_set.map(|v| accuracy(&model, v, cfg.deterministic)).transpose()?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        };
        let score = val_acc.unwrap_or(rec.train_acc);
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best = model.clone();
        }
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::super::arch::{ArchSpec, LayerSpec};
    use super::*;
    use crate::presets;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            height: 12,
            width: 12,
            channels: 1,
            layers: vec![
                LayerSpec::Conv { kernel: 3, stride: 2, filters: 4 },
                LayerSpec::Dense { units: 16 },
                LayerSpec::Dense { units: 3 },
            ],
        }
    }

    /// Column stripes of three widths, shifted laterally: the class is the
    /// stripe width.
    fn stripes() -> Dataset {
        let mut d = Dataset::new("train", 12, 12);
        for (class, w) in [1usize, 2, 3].into_iter().enumerate() {
            for shift in 0..8 {
                let b = presets::columns(12, 12, w).unwrap();
                let m = Morphology::from(&b).shift_columns(shift);
                d.push(&m, class as u8).unwrap();
            }
        }
        d
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_train_split() {
        let m = CnnModel::<f32>::build(&small_arch(), 0).unwrap();
        let empty = Dataset::new("train", 12, 12);
        let r = train(m, &empty, None, &TrainConfig::default(), |_| {});
        assert!(matches!(r, Err(NnError::EmptyTrainSplit)));
    }

    #[test]
    fn learns_stripe_widths_and_is_reproducible() {
        let data = stripes();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            epochs: 60,
            seed: 4,
            deterministic: true,
            ..TrainConfig::default()
        };
        let run = || train(CnnModel::<f32>::build(&small_arch(), 1).unwrap(), &data, Some(&data), &cfg, |_| {}).unwrap();
        let a = run();
        let last = a.history.last().unwrap();
        assert_eq!(last.val_acc, Some(1.0), "{:?}", a.history);
        assert!(last.train_loss < a.history[0].train_loss);
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        let parallel = train(
            CnnModel::<f32>::build(&small_arch(), 1).unwrap(),
            &data,
            Some(&data),
            &TrainConfig { deterministic: false, ..cfg.clone() },
            |_| {},
        )
        .unwrap();
        assert_eq!(parallel.history, a.history);
        assert!(a.history[a.best_epoch - 1].val_acc.unwrap() >= a.history.iter().filter_map(|r| r.val_acc).fold(0.0, f64::max));
    }

    #[test]
    fn history_format() {
        let h = vec![
            EpochRecord { epoch: 1, train_loss: 2.5, train_acc: 0.25, val_acc: Some(0.5) },
            EpochRecord { epoch: 2, train_loss: 1.0, train_acc: 0.5, val_acc: None },
        ];
        assert_eq!(history_csv(&h), "epoch,train_loss,train_acc,val_acc\n1,2.5,0.25,0.5\n2,1,0.5,\n");
    }
}
