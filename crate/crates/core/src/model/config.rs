use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape and switches of a multi-domain transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdtConfig {
    /// Features per time step of the raw input.
    pub d_in: usize,
    pub d_model: usize,
    /// Heads per domain; with frequency heads on there are `2 * h` in total.
    pub h: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Frequency-domain heads in every attention layer.
    pub use_frequency_heads: bool,
    /// Concatenate the real and imaginary 2-D inverse FFT to the input.
    pub use_ifft_augment: bool,
    pub ln_eps: f64,
}

impl Default for MdtConfig {
    fn default() -> Self {
        MdtConfig {
            d_in: 13,
            d_model: 64,
            h: 4,
            n_blocks: 2,
            d_ff: 128,
            n_classes: 2,
            max_len: 512,
            dropout: 0.1,
            use_frequency_heads: true,
            use_ifft_augment: true,
            ln_eps: 1e-6,
        }
    }
}

impl MdtConfig {
    /// The same model with both frequency-domain components switched off.
    pub fn vanilla(&self) -> MdtConfig {
        MdtConfig {
            use_frequency_heads: false,
            use_ifft_augment: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_in == 0 || self.d_model == 0 || self.h == 0 || self.d_ff == 0 {
            return fail("d_in, d_model, h and d_ff must be positive".into());
        }
        if self.d_model % self.h != 0 {
            return fail(format!(
                "d_model {} is not divisible by h {}",
                self.d_model, self.h
            ));
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return fail(format!("ln_eps {} must be positive", self.ln_eps));
        }
        Ok(())
    }

    /// Width of each head, `d_model / h`.
    pub fn d_head(&self) -> usize {
        self.d_model / self.h
    }

    /// Width of the input after augmentation.
    pub fn input_width(&self) -> usize {
        if self.use_ifft_augment {
            3 * self.d_in
        } else {
            self.d_in
        }
    }

    /// Width of the head concatenation entering the output projection.
    pub fn attention_concat_width(&self) -> usize {
        let domains = if self.use_frequency_heads { 2 } else { 1 };
        domains * self.h * self.d_head()
    }
}
