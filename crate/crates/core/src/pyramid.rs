//! Multi-scale composition of the graph-reasoning block.
//!
//! The input is max-pooled `levels - 1` times. Reasoning runs at every
//! scale and outputs are merged from coarse to fine:
//! `Y_k = GR_k(X_k) + up(Y_{k+1})`, where `X_0` is the input and `X_{k+1}`
//! is `X_k` pooled once.

use crate::error::{Error, Result};
use crate::init::Rng64;
use crate::layer::{graph_reason_on_tape, AttentionMode, LayerVars, SpyGRParams};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig<T> {
    pub levels: usize,
    /// One entry per level, finest first; a single entry when
    /// `share_weights` is set.
    pub params: Vec<SpyGRParams<T>>,
    pub share_weights: bool,
}

impl<T: Scalar> PyramidConfig<T> {
    pub fn init(
        levels: usize,
        channels: usize,
        embed: usize,
        attention_mode: AttentionMode,
        include_identity: bool,
        share_weights: bool,
        rng: &mut Rng64,
    ) -> Self {
        let count = if share_weights { 1 } else { levels };
        let params = (0..count)
            .map(|_| {
                SpyGRParams::init(channels, embed, channels, attention_mode, include_identity, rng)
            })
            .collect();
        PyramidConfig {
            levels,
            params,
            share_weights,
        }
    }

    /// A one-level pyramid around existing block weights.
    pub fn single(params: SpyGRParams<T>) -> Self {
        PyramidConfig {
            levels: 1,
            params: vec![params],
            share_weights: false,
        }
    }

    /// Weights used at level `k` (0 is the input scale).
    pub fn level(&self, k: usize) -> &SpyGRParams<T> {
        if self.share_weights {
            &self.params[0]
        } else {
            &self.params[k]
        }
    }

    pub fn channels(&self) -> usize {
        self.params[0].channels()
    }

    pub fn out_channels(&self) -> usize {
        self.params[0].out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("pyramid", "levels must be at least 1"));
        }
        let want = if self.share_weights { 1 } else { self.levels };
        if self.params.len() != want {
            return Err(Error::invalid(
                "pyramid",
                format!(
                    "{} parameter sets given for {} levels (share_weights = {})",
                    self.params.len(),
                    self.levels,
                    self.share_weights
                ),
            ));
        }
        let (c, c_out) = (self.channels(), self.out_channels());
        for p in &self.params {
            p.validate()?;
            if p.channels() != c || p.out_channels() != c_out {
                return Err(Error::invalid(
                    "pyramid",
                    "every level must map the same C to the same C_out",
                ));
            }
        }
        Ok(())
    }

    /// Checks the level count against the spatial extents of an input.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let min = h.min(w);
        if min == 0 || self.levels > max_levels(h, w) {
            return Err(Error::invalid(
                "pyramid",
                format!(
                    "{} levels need min(H, W) >= {}, got {h}x{w}",
                    self.levels,
                    1usize << (self.levels - 1).min(63)
                ),
            ));
        }
        Ok(())
    }

    /// Puts every distinct parameter set on the tape.
    pub fn record(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<LayerVars> {
        self.params.iter().map(|p| p.record(tape, trainable)).collect()
    }
}

/// `floor(log2(min(H, W))) + 1`.
pub fn max_levels(h: usize, w: usize) -> usize {
    let min = h.min(w);
    if min == 0 {
        0
    } else {
        min.ilog2() as usize + 1
    }
}

/// 2x2 max pooling with stride 2 in ceil mode.
pub fn downsample<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    ops::max_pool2x2(x).0
}

/// Bilinear resize to a larger grid with half-pixel centers.
pub fn upsample<T: Scalar>(x: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    ops::upsample_bilinear(x, target_h, target_w)
}

/// The inputs seen by each level, finest first.
pub fn level_inputs<T: Scalar>(x: &Tensor<T>, levels: usize) -> Vec<Tensor<T>> {
    let mut out = vec![x.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().expect("non-empty"));
        out.push(next);
    }
    out
}

pub fn spygr_pyramid<T: Scalar>(x: &Tensor<T>, config: &PyramidConfig<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = config.record(&mut tape, false);
    let y = spygr_pyramid_on_tape(&mut tape, xv, config, &vars)?;
    Ok(tape.value(y).clone())
}

/// Records the pyramid on `tape`; `vars` comes from [`PyramidConfig::record`].
pub fn spygr_pyramid_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    config: &PyramidConfig<T>,
    vars: &[LayerVars],
) -> Result<Var> {
    config.validate()?;
    let shape = tape.value(x).shape();
    config.check_extent(shape.h(), shape.w())?;
    if vars.len() != config.params.len() {
        return Err(Error::invalid("pyramid", "one LayerVars per parameter set"));
    }
    let level_vars = |k: usize| if config.share_weights { &vars[0] } else { &vars[k] };

    let mut inputs = vec![x];
    for k in 1..config.levels {
        let next = tape.max_pool2x2(inputs[k - 1]);
        inputs.push(next);
    }
    let coarsest = config.levels - 1;
    let mut y = graph_reason_on_tape(
        tape,
        inputs[coarsest],
        config.level(coarsest),
        level_vars(coarsest),
    )?;
    for k in (0..coarsest).rev() {
        let g = graph_reason_on_tape(tape, inputs[k], config.level(k), level_vars(k))?;
        let s = tape.value(inputs[k]).shape();
        let up = tape.upsample(y, s.h(), s.w())?;
        y = tape.add(g, up)?;
    }
    Ok(y)
}
