//! Layer layout of the classifier.

use serde::Serialize;

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerSpec {
    /// Valid-padding convolution followed by ReLU.
    Conv { kernel: usize, stride: usize, filters: usize },
    /// Fully connected layer; ReLU unless it is the last layer.
    Dense { units: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArchSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// Geometry of one convolution for a given input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub cout: usize,
}

impl ConvGeom {
    /// Rows of the unfolded patch matrix per sample.
    pub fn patches(&self) -> usize {
        self.oh * self.ow
    }

    /// Patch length `k·k·c_in`.
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Resolved per-layer shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerGeom {
    Conv(ConvGeom),
    Dense { inputs: usize, outputs: usize },
}

impl LayerGeom {
    pub fn weight_dims(&self) -> Vec<usize> {
        match *self {
            LayerGeom::Conv(g) => vec![g.k, g.k, g.cin, g.cout],
            LayerGeom::Dense { inputs, outputs } => vec![inputs, outputs],
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerGeom::Conv(g) => g.cout,
            LayerGeom::Dense { outputs, .. } => outputs,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerGeom::Conv(g) => g.patch_len(),
            LayerGeom::Dense { inputs, .. } => inputs,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            LayerGeom::Conv(g) => g.patches() * g.cout,
            LayerGeom::Dense { outputs, .. } => outputs,
        }
    }
}

impl ArchSpec {
    /// 101×101×1 → Conv(5,s2,24) → Conv(5,s2,36) → Conv(5,s2,48) →
    /// Conv(3,s1,64) → FC 256 → FC 64 → FC 10.
    pub fn default_classifier() -> Self {
        Self {
            height: 101,
            width: 101,
            channels: 1,
            layers: vec![
                LayerSpec::Conv { kernel: 5, stride: 2, filters: 24 },
                LayerSpec::Conv { kernel: 5, stride: 2, filters: 36 },
                LayerSpec::Conv { kernel: 5, stride: 2, filters: 48 },
                LayerSpec::Conv { kernel: 3, stride: 1, filters: 64 },
                LayerSpec::Dense { units: 256 },
                LayerSpec::Dense { units: 64 },
                LayerSpec::Dense { units: 10 },
            ],
        }
    }

    pub fn input_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { units }) => *units,
            _ => 0,
        }
    }

    /// Resolves shapes; conv layers must precede dense layers and the last
    /// layer must be dense.
    pub fn geometry(&self) -> Result<Vec<LayerGeom>, NnError> {
        let bad = |m: String| Err(NnError::InvalidArch(m));
        if !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return bad("last layer must be dense".into());
        }
        let (mut h, mut w, mut c) = (self.height, self.width, self.channels);
        let mut flat: Option<usize> = None;
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { kernel, stride, filters } => {
                    if flat.is_some() {
                        return bad(format!("layer {idx}: convolution after dense layer"));
                    }
                    if kernel == 0 || stride == 0 || filters == 0 || kernel > h || kernel > w {
                        return bad(format!("layer {idx}: kernel {kernel} does not fit {h}x{w}"));
                    }
                    let oh = (h - kernel) / stride + 1;
                    let ow = (w - kernel) / stride + 1;
                    out.push(LayerGeom::Conv(ConvGeom {
                        h,
                        w,
                        cin: c,
                        k: kernel,
                        stride,
                        oh,
                        ow,
                        cout: filters,
                    }));
                    (h, w, c) = (oh, ow, filters);
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return bad(format!("layer {idx}: zero units"));
                    }
                    let inputs = flat.unwrap_or(h * w * c);
                    out.push(LayerGeom::Dense { inputs, outputs: units });
                    flat = Some(units);
                }
            }
        }
        Ok(out)
    }

    pub fn parameter_count(&self) -> Result<usize, NnError> {
        Ok(self
            .geometry()?
            .iter()
            .map(|g| g.weight_dims().iter().product::<usize>() + g.bias_len())
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes_and_count() {
        let a = ArchSpec::default_classifier();
        let g = a.geometry().unwrap();
        let sides: Vec<usize> = g
            .iter()
            .filter_map(|l| match l {
                LayerGeom::Conv(c) => Some(c.oh),
                _ => None,
            })
            .collect();
        assert_eq!(sides, vec![49, 23, 10, 8]);
        assert_eq!(g[4], LayerGeom::Dense { inputs: 4096, outputs: 256 });
        // per layer: k·k·c_in·c_out + c_out, or in·out + out
        let terms = [
            5 * 5 * 24 + 24,
            5 * 5 * 24 * 36 + 36,
            5 * 5 * 36 * 48 + 48,
            3 * 3 * 48 * 64 + 64,
            4096 * 256 + 256,
            256 * 64 + 64,
            64 * 10 + 10,
        ];
        assert_eq!(terms, [624, 21_636, 43_248, 27_712, 1_048_832, 16_448, 650]);
        assert_eq!(a.parameter_count().unwrap(), 1_159_150);
        assert_eq!(a.classes(), 10);
    }

    #[test]
    fn rejects_bad_layouts() {
        let mut a = ArchSpec::default_classifier();
        a.layers.push(LayerSpec::Conv { kernel: 1, stride: 1, filters: 1 });
        assert!(a.geometry().is_err());
        let tiny = ArchSpec {
            height: 4,
            width: 4,
            channels: 1,
            layers: vec![LayerSpec::Conv { kernel: 5, stride: 1, filters: 2 }, LayerSpec::Dense { units: 2 }],
        };
        assert!(tiny.geometry().is_err());
    }
}
