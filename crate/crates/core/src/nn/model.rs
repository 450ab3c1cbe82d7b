//! Forward and reverse passes of the convolutional classifier.
//!
//! Activations are NHWC. Convolutions unfold each batch into a patch matrix
//! (`batch·patches × k·k·c_in`) and multiply it by the `k·k·c_in × c_out`
//! weight matrix, so both passes are plain GEMMs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::arch::{ArchSpec, ConvGeom, LayerGeom};
use super::scalar::{Mat, MatMut, Scalar};
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// Weights and biases, `params[2l]` / `params[2l + 1]` for layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<T> {
    pub arch: ArchSpec,
    pub params: Vec<Tensor<T>>,
    pub seed: u64,
    geom: Vec<LayerGeom>,
}

/// Gradients laid out like [`CnnModel::params`].
pub type Grads<T> = Vec<Vec<T>>;

pub(crate) fn layer_names(geom: &[LayerGeom]) -> Vec<String> {
    let (mut conv, mut fc) = (0, 0);
    geom.iter()
        .map(|g| match g {
            LayerGeom::Conv(_) => {
                conv += 1;
                format!("conv{conv}")
            }
            LayerGeom::Dense { .. } => {
                fc += 1;
                format!("fc{fc}")
            }
        })
        .collect()
}

impl<T: Scalar> CnnModel<T> {
    /// He-normal weights (`std = √(2/fan_in)`), zero biases.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(arch, seed, |fan_in| {
            let std = (2.0 / fan_in as f64).sqrt();
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(std * z)
        })
    }

    /// Every weight and bias zero.
    pub fn zeros(arch: &ArchSpec) -> Result<Self, NnError> {
        Self::init(arch, 0, |_| T::zero())
    }

    fn init(arch: &ArchSpec, seed: u64, mut draw: impl FnMut(usize) -> T) -> Result<Self, NnError> {
        let geom = arch.geometry()?;
        let mut params = Vec::with_capacity(geom.len() * 2);
        for (g, name) in geom.iter().zip(layer_names(&geom)) {
            let dims = g.weight_dims();
            let n: usize = dims.iter().product();
            let fan_in = g.fan_in();
            params.push(Tensor {
                name: format!("{name}.weight"),
                dims,
                data: (0..n).map(|_| draw(fan_in)).collect(),
            });
            params.push(Tensor {
                name: format!("{name}.bias"),
                dims: vec![g.bias_len()],
                data: vec![T::zero(); g.bias_len()],
            });
        }
        Ok(Self {
            arch: arch.clone(),
            params,
            seed,
            geom,
        })
    }

    pub(crate) fn from_parts(arch: ArchSpec, params: Vec<Tensor<T>>, seed: u64) -> Result<Self, NnError> {
        let geom = arch.geometry()?;
        Ok(Self { arch, params, seed, geom })
    }

    pub fn geometry(&self) -> &[LayerGeom] {
        &self.geom
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> CnnModel<U> {
        CnnModel {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            seed: self.seed,
            geom: self.geom.clone(),
        }
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`
    /// (post-ReLU; raw logits for the last layer).
    pub acts: Vec<Vec<T>>,
    /// Patch matrices for convolution layers.
    cols: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Trace<T> {
    pub fn logits(&self) -> &[T] {
        self.acts.last().expect("trace has outputs")
    }
}

fn im2col<T: Scalar>(x: &[T], batch: usize, g: &ConvGeom, col: &mut Vec<T>) {
    let (p, kl) = (g.patches(), g.patch_len());
    col.clear();
    col.resize(batch * p * kl, T::zero());
    let in_len = g.h * g.w * g.cin;
    let row_len = g.k * g.cin;
    for b in 0..batch {
        let xs = &x[b * in_len..(b + 1) * in_len];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut col[((b * p) + oy * g.ow + ox) * kl..][..kl];
                for ky in 0..g.k {
                    let src = ((oy * g.stride + ky) * g.w + ox * g.stride) * g.cin;
                    dst[ky * row_len..(ky + 1) * row_len].copy_from_slice(&xs[src..src + row_len]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(dcol: &[T], batch: usize, g: &ConvGeom, dx: &mut [T]) {
    let (p, kl) = (g.patches(), g.patch_len());
    let in_len = g.h * g.w * g.cin;
    let row_len = g.k * g.cin;
    for b in 0..batch {
        let xs = &mut dx[b * in_len..(b + 1) * in_len];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &dcol[((b * p) + oy * g.ow + ox) * kl..][..kl];
                for ky in 0..g.k {
                    let dst = ((oy * g.stride + ky) * g.w + ox * g.stride) * g.cin;
                    for (d, &s) in xs[dst..dst + row_len].iter_mut().zip(&src[ky * row_len..(ky + 1) * row_len]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

impl<T: Scalar> CnnModel<T> {
    fn check_input(&self, input: &[T]) -> Result<usize, NnError> {
        let per = self.arch.input_len();
        if input.is_empty() || input.len() % per != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "input of {} values is not a whole number of {}x{}x{} samples",
                input.len(),
                self.arch.height,
                self.arch.width,
                self.arch.channels
            )));
        }
        Ok(input.len() / per)
    }

    /// Runs the network on `batch` concatenated samples. With `keep` the
    /// patch matrices are retained for a later [`CnnModel::backward`].
    pub fn forward_trace(&self, input: &[T], keep: bool) -> Result<Trace<T>, NnError> {
        let batch = self.check_input(input)?;
        let last = self.geom.len() - 1;
        let mut acts = Vec::with_capacity(self.geom.len() + 1);
        let mut cols = Vec::with_capacity(self.geom.len());
        acts.push(input.to_vec());
        let mut col = Vec::new();
        for (l, g) in self.geom.iter().enumerate() {
            let (w, b) = (&self.params[2 * l].data, &self.params[2 * l + 1].data);
            let x = &acts[l];
            let mut y = Vec::with_capacity(batch * g.output_len());
            match g {
                LayerGeom::Conv(cg) => {
                    im2col(x, batch, cg, &mut col);
                    let rows = batch * cg.patches();
                    for _ in 0..rows {
                        y.extend_from_slice(b);
                    }
                    T::gemm(
                        rows,
                        cg.patch_len(),
                        cg.cout,
                        T::one(),
                        Mat::rows(&col, cg.patch_len()),
                        Mat::rows(w, cg.cout),
                        T::one(),
                        MatMut::rows(&mut y, cg.cout),
                    );
                    cols.push(keep.then(|| col.clone()));
                }
                &LayerGeom::Dense { inputs, outputs } => {
                    for _ in 0..batch {
                        y.extend_from_slice(b);
                    }
                    T::gemm(
                        batch,
                        inputs,
                        outputs,
                        T::one(),
                        Mat::rows(x, inputs),
                        Mat::rows(w, outputs),
                        T::one(),
                        MatMut::rows(&mut y, outputs),
                    );
                    cols.push(None);
                }
            }
            if l != last {
                relu_in_place(&mut y);
            }
            acts.push(y);
            if !keep && l > 0 {
                // only the logits are needed downstream
                acts[l] = Vec::new();
            }
        }
        Ok(Trace { batch, acts, cols })
    }

    /// Logits, `batch × classes`.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, NnError> {
        let mut t = self.forward_trace(input, false)?;
        Ok(t.acts.pop().expect("trace has outputs"))
    }

    /// Reverse pass from `dlogits` (`batch × classes`). Returns parameter
    /// gradients and, when asked, the gradient with respect to the input.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &[T], want_input: bool) -> Result<(Grads<T>, Option<Vec<T>>), NnError> {
        let batch = trace.batch;
        if dlogits.len() != batch * self.arch.classes() || trace.cols.len() != self.geom.len() {
            return Err(NnError::ShapeMismatch("gradient does not match trace".into()));
        }
        let last = self.geom.len() - 1;
        let mut grads = self.zero_grads();
        let mut dy = dlogits.to_vec();
        let mut input_grad = None;
        for l in (0..self.geom.len()).rev() {
            if l != last {
                for (d, &a) in dy.iter_mut().zip(&trace.acts[l + 1]) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            let w = &self.params[2 * l].data;
            let need_dx = l > 0 || want_input;
            let (gw, rest) = grads[2 * l..].split_at_mut(1);
            let (gw, gb) = (&mut gw[0], &mut rest[0]);
            let mut dx = Vec::new();
            match &self.geom[l] {
                LayerGeom::Conv(cg) => {
                    let col = trace.cols[l].as_ref().ok_or_else(|| NnError::ShapeMismatch("trace was recorded without patches".into()))?;
                    let rows = batch * cg.patches();
                    let kl = cg.patch_len();
                    T::gemm(kl, rows, cg.cout, T::one(), Mat::rows_t(col, kl), Mat::rows(&dy, cg.cout), T::zero(), MatMut::rows(gw, cg.cout));
                    for row in dy.chunks(cg.cout) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    if need_dx {
                        let mut dcol = vec![T::zero(); rows * kl];
                        T::gemm(rows, cg.cout, kl, T::one(), Mat::rows(&dy, cg.cout), Mat::rows_t(w, cg.cout), T::zero(), MatMut::rows(&mut dcol, kl));
                        dx = vec![T::zero(); batch * cg.h * cg.w * cg.cin];
                        col2im(&dcol, batch, cg, &mut dx);
                    }
                }
                &LayerGeom::Dense { inputs, outputs } => {
                    let x = &trace.acts[l];
                    T::gemm(inputs, batch, outputs, T::one(), Mat::rows_t(x, inputs), Mat::rows(&dy, outputs), T::zero(), MatMut::rows(gw, outputs));
                    for row in dy.chunks(outputs) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    if need_dx {
                        dx = vec![T::zero(); batch * inputs];
                        T::gemm(batch, outputs, inputs, T::one(), Mat::rows(&dy, outputs), Mat::rows_t(w, outputs), T::zero(), MatMut::rows(&mut dx, inputs));
                    }
                }
            }
            if l == 0 {
                if want_input {
                    input_grad = Some(dx);
                }
                break;
            }
            dy = dx;
        }
        Ok((grads, input_grad))
    }

    /// Mean categorical cross-entropy over the batch with parameter and input
    /// gradients.
    pub fn loss_and_grads(&self, input: &[T], labels: &[u8]) -> Result<(T, Grads<T>, Vec<T>), NnError> {
        let (loss, grads, dx, _) = self.loss_and_grads_scaled(input, labels, labels.len(), true)?;
        Ok((loss, grads, dx.expect("input gradient requested")))
    }

    /// Like [`CnnModel::loss_and_grads`] but normalizes by `denom` instead of
    /// the batch size, so chunks of one batch can be summed. Returns the
    /// loss scaled by `1/denom`.
    /// The last element counts samples whose argmax matches the label.
    pub(crate) fn loss_and_grads_scaled(&self, input: &[T], labels: &[u8], denom: usize, want_input: bool) -> Result<(T, Grads<T>, Option<Vec<T>>, usize), NnError> {
        let trace = self.forward_trace(input, true)?;
        let classes = self.arch.classes();
        if labels.len() != trace.batch {
            return Err(NnError::ShapeMismatch(format!("{} labels for a batch of {}", labels.len(), trace.batch)));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c as usize >= classes) {
            return Err(NnError::ShapeMismatch(format!("label {bad} outside 0..{classes}")));
        }
        let probs = softmax(trace.logits(), classes);
        let scale = T::one() / T::from_f64(denom as f64);
        let mut loss = T::zero();
        let mut dlogits = probs.clone();
        let mut correct = 0;
        for (b, &c) in labels.iter().enumerate() {
            let row = &trace.logits()[b * classes..(b + 1) * classes];
            if argmax(row) == c as usize {
                correct += 1;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            loss += lse - row[c as usize];
            dlogits[b * classes + c as usize] -= T::one();
        }
        for d in &mut dlogits {
            *d = *d * scale;
        }
        let (grads, dx) = self.backward(&trace, &dlogits, want_input)?;
        Ok((loss * scale, grads, dx, correct))
    }

    /// Argmax class (ties go to the lower index) and class probabilities.
    pub fn predict(&self, input: &[T]) -> Result<(u8, Vec<T>), NnError> {
        if input.len() != self.arch.input_len() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} values, got {}",
                self.arch.input_len(),
                input.len()
            )));
        }
        let logits = self.forward(input)?;
        let probs = softmax(&logits, self.arch.classes());
        Ok((argmax(&probs) as u8, probs))
    }
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::super::arch::LayerSpec;
    use super::*;
    use rand::Rng;

    fn reduced() -> ArchSpec {
        ArchSpec {
            height: 16,
            width: 16,
            channels: 1,
            layers: vec![
                LayerSpec::Conv { kernel: 3, stride: 1, filters: 4 },
                LayerSpec::Conv { kernel: 3, stride: 2, filters: 6 },
                LayerSpec::Dense { units: 3 },
            ],
        }
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let arch = ArchSpec::default_classifier();
        let a = CnnModel::<f32>::build(&arch, 7).unwrap();
        assert_eq!(a, CnnModel::<f32>::build(&arch, 7).unwrap());
        assert_ne!(a.params[0].data, CnnModel::<f32>::build(&arch, 8).unwrap().params[0].data);
        assert_eq!(a.parameter_count(), 1_159_150);
        for t in a.params.iter().filter(|t| t.name.ends_with(".bias")) {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
        // He scale on the first FC layer
        let fc1 = &a.params[8].data;
        let var = fc1.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / fc1.len() as f64;
        assert!((var - 2.0 / 4096.0).abs() / (2.0 / 4096.0) < 0.02);
    }

    #[test]
    fn zero_model_is_uniform() {
        let arch = ArchSpec::default_classifier();
        let m = CnnModel::<f32>::zeros(&arch).unwrap();
        let x = vec![0.3f32; arch.input_len()];
        let (class, probs) = m.predict(&x).unwrap();
        assert_eq!(class, 0);
        assert!(probs.iter().all(|&p| (p - 0.1).abs() < 1e-7));
        let (loss, _, _) = m.loss_and_grads(&x, &[4]).unwrap();
        assert!((loss - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn single_conv_sums_its_window() {
        let arch = ArchSpec {
            height: 3,
            width: 3,
            channels: 1,
            layers: vec![LayerSpec::Conv { kernel: 3, stride: 1, filters: 1 }, LayerSpec::Dense { units: 1 }],
        };
        let mut m = CnnModel::<f64>::zeros(&arch).unwrap();
        m.params[0].data = vec![1.0; 9];
        m.params[2].data = vec![1.0];
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(m.forward(&x).unwrap(), vec![45.0]);
    }

    #[test]
    fn identical_inputs_identical_rows() {
        let arch = reduced();
        let m = CnnModel::<f32>::build(&arch, 1).unwrap();
        let one: Vec<f32> = (0..256).map(|k| (k % 7) as f32 / 7.0).collect();
        let batch: Vec<f32> = one.iter().chain(&one).chain(&one).copied().collect();
        let logits = m.forward(&batch).unwrap();
        assert_eq!(logits[0..3], logits[3..6]);
        assert_eq!(logits[0..3], logits[6..9]);
        let probs = softmax(&logits, 3);
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let m = CnnModel::<f32>::zeros(&reduced()).unwrap();
        assert!(matches!(m.forward(&[0.0; 10]), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(m.predict(&[0.0; 512]), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(m.loss_and_grads(&[0.0; 256], &[0, 1]), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(m.loss_and_grads(&[0.0; 256], &[5]), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn duplicated_sample_doubles_contribution() {
        let m = CnnModel::<f64>::build(&reduced(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..256).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..256).map(|_| rng.random()).collect();
        // mean over [a, b] vs mean over [a, a, b]: contribution of a goes 1/2 → 2/3
        let (_, g_ab, _) = m.loss_and_grads(&[a.clone(), b.clone()].concat(), &[0, 2]).unwrap();
        let (_, g_aab, _) = m.loss_and_grads(&[a.clone(), a.clone(), b.clone()].concat(), &[0, 0, 2]).unwrap();
        let (_, g_a, _) = m.loss_and_grads(&a, &[0]).unwrap();
        let (_, g_b, _) = m.loss_and_grads(&b, &[2]).unwrap();
        for p in 0..g_a.len() {
            for i in 0..g_a[p].len() {
                let ab = 0.5 * g_a[p][i] + 0.5 * g_b[p][i];
                let aab = (2.0 * g_a[p][i] + g_b[p][i]) / 3.0;
                assert!((g_ab[p][i] - ab).abs() < 1e-12);
                assert!((g_aab[p][i] - aab).abs() < 1e-12);
            }
        }
    }
}
