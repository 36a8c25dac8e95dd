//! Sparsity-level map estimators.
//!
//! Three CNN heads turn the zero-filled reconstruction into per-filter,
//! per-pixel sparsity levels for the solver, all sharing the form
//! `t * softplus(net(...))` with a global trainable scale `t > 0`:
//!
//! * **V1** — dictionary-agnostic: a 2-to-K net reads the (re, im) image.
//! * **V2** — dictionary-aware: a 2K-to-K net reads the analysis
//!   coefficients, interleaved as (re_k, im_k) channel pairs.
//! * **V3** — dictionary-size-agnostic: one shared 2-to-1 net scores each
//!   filter's analysis pair independently, so outputs permute exactly with
//!   the filters and any filter count is accepted at inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, CheckpointBlob};
use crate::linops::{dict_analyze, ComplexImage, Dictionary};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::unet::{TapeUNet, UNet, UNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    V1,
    V2,
    V3,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::V1 => 1,
            Variant::V2 => 2,
            Variant::V3 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Variant::V1),
            2 => Ok(Variant::V2),
            3 => Ok(Variant::V3),
            other => Err(Error::Format(format!("unknown estimator variant tag {other}"))),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            other => Err(Error::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::V1 => write!(f, "v1"),
            Variant::V2 => write!(f, "v2"),
            Variant::V3 => write!(f, "v3"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    variant: Variant,
    unet: UNetConfig,
}

/// A map estimator: one U-Net plus the global positive scale `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapEstimator {
    pub variant: Variant,
    pub unet: UNet,
    /// Global scale, kept strictly positive by the trainer's projection.
    pub t: f64,
}

/// Tape handles of a pushed estimator parameter set.
pub struct TapeEstimator {
    pub unet: TapeUNet,
    pub t: TensorId,
}

impl MapEstimator {
    /// Fresh estimator; `filter_count` fixes the channel contract for V1
    /// and V2 and is ignored by V3.
    pub fn init(variant: Variant, filter_count: usize, seed: u64) -> Result<Self> {
        let cfg = match variant {
            Variant::V1 => UNetConfig::with_default_widths(2, filter_count),
            Variant::V2 => UNetConfig::with_default_widths(2 * filter_count, filter_count),
            Variant::V3 => UNetConfig::with_default_widths(2, 1),
        };
        Ok(Self { variant, unet: UNet::init(cfg, seed)?, t: 1.0 })
    }

    /// Trainable scalars (`t`) and network parameters are updated with
    /// different learning rates, so they are exposed separately.
    pub fn param_count(&self) -> usize {
        self.unet.param_count() + 1
    }

    pub fn push_params(&self, tape: &mut Tape, trainable: bool) -> TapeEstimator {
        let unet = self.unet.push_params(tape, trainable);
        let t_tensor = Tensor::scalar(self.t);
        let t = if trainable { tape.param(t_tensor) } else { tape.constant(t_tensor) };
        TapeEstimator { unet, t }
    }

    fn check_k(&self, k: usize) -> Result<()> {
        let expected = match self.variant {
            Variant::V1 | Variant::V2 => self.unet.cfg.out_channels,
            Variant::V3 => return Ok(()),
        };
        if k != expected {
            return Err(Error::FilterCountMismatch { expected, actual: k });
        }
        Ok(())
    }

    /// Estimate `[K,H,W]` sparsity maps on the tape. `x0` is the zero-filled
    /// reconstruction; V2/V3 additionally read the dictionary through its
    /// analysis coefficients.
    pub fn estimate_on_tape(
        &self,
        tape: &mut Tape,
        params: &TapeEstimator,
        x0: &ComplexImage,
        d: &Dictionary,
    ) -> Result<TensorId> {
        self.check_k(d.filter_count)?;
        let (h, w) = (x0.height, x0.width);
        match self.variant {
            Variant::V1 => {
                let mut data = x0.re.clone();
                data.extend_from_slice(&x0.im);
                let input = tape.constant(Tensor::new(vec![2, h, w], data));
                let raw = self.unet.forward(tape, &params.unet, input)?;
                let pos = tape.softplus(raw);
                Ok(tape.scale_by(pos, params.t))
            }
            Variant::V2 => {
                let coeffs = dict_analyze(x0, d)?;
                let k = d.filter_count;
                let mut data = Vec::with_capacity(2 * k * h * w);
                for f in 0..k {
                    data.extend_from_slice(&coeffs.re[f * h * w..(f + 1) * h * w]);
                    data.extend_from_slice(&coeffs.im[f * h * w..(f + 1) * h * w]);
                }
                let input = tape.constant(Tensor::new(vec![2 * k, h, w], data));
                let raw = self.unet.forward(tape, &params.unet, input)?;
                let pos = tape.softplus(raw);
                Ok(tape.scale_by(pos, params.t))
            }
            Variant::V3 => {
                // one shared 2-to-1 net per filter channel pair; each pass is
                // an independent subgraph, which is what makes the output
                // permute bitwise-exactly with the filters
                let coeffs = dict_analyze(x0, d)?;
                let k = d.filter_count;
                let mut maps = Vec::with_capacity(k);
                for f in 0..k {
                    let mut data = coeffs.re[f * h * w..(f + 1) * h * w].to_vec();
                    data.extend_from_slice(&coeffs.im[f * h * w..(f + 1) * h * w]);
                    let input = tape.constant(Tensor::new(vec![2, h, w], data));
                    let raw = self.unet.forward(tape, &params.unet, input)?;
                    let pos = tape.softplus(raw);
                    maps.push(tape.scale_by(pos, params.t));
                }
                Ok(tape.concat_channels(&maps))
            }
        }
    }

    /// Convenience untracked evaluation returning plain map values.
    pub fn estimate(&self, x0: &ComplexImage, d: &Dictionary) -> Result<crate::fista::SparsityMaps> {
        let mut tape = Tape::new();
        let params = self.push_params(&mut tape, false);
        let id = self.estimate_on_tape(&mut tape, &params, x0, d)?;
        crate::fista::SparsityMaps::new(
            d.filter_count,
            x0.height,
            x0.width,
            tape.value(id).data.clone(),
        )
    }

    // ---- checkpointing ----

    pub fn to_blob(&self) -> Result<CheckpointBlob> {
        let descriptor = serde_json::to_string(&Descriptor {
            variant: self.variant,
            unet: self.unet.cfg.clone(),
        })
        .map_err(|e| Error::Format(format!("descriptor encode: {e}")))?;
        let mut params = self.unet.flatten_params();
        params.push(self.t);
        Ok(CheckpointBlob { variant: self.variant.tag(), descriptor, params })
    }

    pub fn from_blob(blob: &CheckpointBlob) -> Result<Self> {
        let desc: Descriptor = serde_json::from_str(&blob.descriptor)
            .map_err(|e| Error::Format(format!("descriptor decode: {e}")))?;
        if desc.variant.tag() != blob.variant {
            return Err(Error::Format("variant byte disagrees with descriptor".into()));
        }
        let mut unet = UNet::init(desc.unet, 0)?;
        if blob.params.len() != unet.param_count() + 1 {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, architecture wants {}",
                blob.params.len(),
                unet.param_count() + 1
            )));
        }
        unet.set_params(&blob.params[..blob.params.len() - 1])?;
        let t = *blob.params.last().unwrap();
        if !(t > 0.0) {
            return Err(Error::Format(format!("checkpoint scale t must be positive, got {t}")));
        }
        Ok(Self { variant: desc.variant, unet, t })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, io::encode_checkpoint(&self.to_blob()?))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_blob(&io::decode_checkpoint(&std::fs::read(path)?)?)
    }
}
