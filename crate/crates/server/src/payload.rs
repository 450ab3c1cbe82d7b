use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use dlsp_core::morpho::{quantize, BinaryMorphology, Morphology};

/// Row-major gray grid, one byte per pixel (`round(value·255)`), base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPayload {
    pub height: usize,
    pub width: usize,
    pub grid_b64: String,
}

impl GridPayload {
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
        Self::from_bytes(height, width, &bytes)
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self {
            height,
            width,
            grid_b64: STANDARD.encode(bytes),
        }
    }

    pub fn from_binary(b: &BinaryMorphology) -> Self {
        let bytes: Vec<u8> = b.donor.iter().map(|&d| if d { 255 } else { 0 }).collect();
        Self::from_bytes(b.height, b.width, &bytes)
    }

    pub fn bytes(&self) -> Result<Vec<u8>, String> {
        let bytes = STANDARD
            .decode(self.grid_b64.as_bytes())
            .map_err(|e| format!("grid_b64 is not valid base64: {e}"))?;
        let expected = self.height.checked_mul(self.width).ok_or("grid dimensions overflow")?;
        if bytes.len() != expected {
            return Err(format!(
                "grid_b64 decodes to {} bytes, expected {}x{} = {expected}",
                bytes.len(),
                self.height,
                self.width
            ));
        }
        Ok(bytes)
    }

    pub fn to_morphology(&self) -> Result<Morphology, String> {
        let bytes = self.bytes()?;
        Morphology::from_bytes(self.height, self.width, &bytes).map_err(|e| e.to_string())
    }
}
