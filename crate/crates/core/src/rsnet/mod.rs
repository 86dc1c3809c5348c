//! Unfolded residual-solver network.
//!
//! ```text
//! g   = K_in * v
//! b_j = mask . clip(g + K_j * b_{j-1}, theta),   b_0 = 0,  j = 1..B
//! u   = v + K_out * b_B
//! ```
//!
//! `K_in` is shared by every block, each `K_j` is separate, all kernels are
//! 3x3 and there are no biases. Training is unsupervised on the normalized
//! energy, so no ground truth enters anywhere in this module.

mod file;
mod net;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{tap, Padding};
use crate::error::{invalid, Error, Result};
use crate::grid::{AxisWeights, DEFAULT_BETA};

pub use file::{load_params, save_params, FORMAT_VERSION, MAGIC};
pub use net::{full_net_forward, rsnet_backward, rsnet_forward, rsnet_loss, Tape};
pub use train::{mean_loss, train_rsnet, train_rsnet_observed, TrainConfig, TrainReport};

/// Boundary handling of the network's convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Replicate padding everywhere; the default for learned networks.
    Replicate,
    /// Zero padding, and after each clip even channels are zeroed in the
    /// last column and odd channels in the last row. With these rules the
    /// stencils of `kernels_from_rs` reproduce the grid operators exactly.
    Grid,
}

impl Boundary {
    pub(crate) fn padding(self) -> Padding {
        match self {
            Boundary::Replicate => Padding::Replicate,
            Boundary::Grid => Padding::Zero,
        }
    }

    fn to_byte(self) -> u8 {
        match self {
            Boundary::Replicate => 0,
            Boundary::Grid => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Boundary::Replicate),
            1 => Ok(Boundary::Grid),
            other => Err(Error::CorruptParams(format!("unknown boundary tag {other}"))),
        }
    }
}

/// Default clip threshold: the dual bound `lambda / beta` at `lambda = 10`.
pub const DEFAULT_CLIP: f64 = 10.0 / DEFAULT_BETA;

/// All kernels of one network in a single flat buffer:
/// input bank `[C][1][3][3]`, block banks `[C][C][3][3]` for `j = 1..B`,
/// output bank `[1][C][3][3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RsnetParams {
    blocks: usize,
    channels: usize,
    clip: f64,
    boundary: Boundary,
    weights: Vec<f64>,
}

impl RsnetParams {
    pub fn param_count_for(blocks: usize, channels: usize) -> usize {
        9 * channels + 9 * channels * channels * blocks + 9 * channels
    }

    pub fn zeros(blocks: usize, channels: usize, clip: f64, boundary: Boundary) -> Result<Self> {
        Self::from_weights(
            blocks,
            channels,
            clip,
            boundary,
            vec![0.0; Self::param_count_for(blocks, channels)],
        )
    }

    pub fn from_weights(
        blocks: usize,
        channels: usize,
        clip: f64,
        boundary: Boundary,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if blocks == 0 || channels == 0 {
            return Err(invalid("network shape", "blocks and channels must be >= 1"));
        }
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(invalid("clip", format!("{clip} must be > 0")));
        }
        let expected = Self::param_count_for(blocks, channels);
        if weights.len() != expected {
            return Err(crate::error::shape_mismatch(
                format!("{expected} weights"),
                format!("{} weights", weights.len()),
            ));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::NonFinite("network weights"));
        }
        Ok(Self {
            blocks,
            channels,
            clip,
            boundary,
            weights,
        })
    }

    /// Uniform `[-s, s]` per bank with `s = 1 / (3 sqrt(9 C_in))`.
    pub fn random(blocks: usize, channels: usize, clip: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(blocks, channels, clip, Boundary::Replicate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = |cin: usize| 1.0 / (3.0 * (9.0 * cin as f64).sqrt());
        let s_in = scale(1);
        p.input_kernel_mut().iter_mut().for_each(|w| *w = rng.random_range(-s_in..=s_in));
        let s_blk = scale(channels);
        for j in 0..blocks {
            p.block_kernel_mut(j).iter_mut().for_each(|w| *w = rng.random_range(-s_blk..=s_blk));
        }
        p.output_kernel_mut().iter_mut().for_each(|w| *w = rng.random_range(-s_blk..=s_blk));
        Ok(p)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn block_len(&self) -> usize {
        9 * self.channels * self.channels
    }

    pub fn input_kernel(&self) -> &[f64] {
        &self.weights[..9 * self.channels]
    }

    pub fn input_kernel_mut(&mut self) -> &mut [f64] {
        let c = self.channels;
        &mut self.weights[..9 * c]
    }

    /// Kernel bank of block `j` (0-based).
    pub fn block_kernel(&self, j: usize) -> &[f64] {
        let start = 9 * self.channels + j * self.block_len();
        &self.weights[start..start + self.block_len()]
    }

    pub fn block_kernel_mut(&mut self, j: usize) -> &mut [f64] {
        let len = self.block_len();
        let start = 9 * self.channels + j * len;
        &mut self.weights[start..start + len]
    }

    pub fn output_kernel(&self) -> &[f64] {
        &self.weights[self.weights.len() - 9 * self.channels..]
    }

    pub fn output_kernel_mut(&mut self) -> &mut [f64] {
        let n = self.weights.len();
        let c = self.channels;
        &mut self.weights[n - 9 * c..]
    }

    /// Zero-valued parameter set of the same shape, used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: vec![0.0; self.weights.len()],
            ..self.clone()
        }
    }
}

/// The residual solver as a two-channel network with `blocks` blocks.
///
/// `lambda` is the effective regularization weight of the ROF subproblem.
/// Channel `k` carries `b_k / w_k`, so a single clip at `lambda / beta`
/// realises the per-axis bounds `lambda w_k / beta`.
pub fn kernels_from_rs(
    lambda: f64,
    beta: f64,
    weights: AxisWeights,
    blocks: usize,
) -> Result<RsnetParams> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("{lambda} must be > 0 for a finite clip")));
    }
    if !(beta > 0.0 && beta < 0.25) {
        return Err(invalid("beta", format!("{beta} must lie in (0, 1/4)")));
    }
    weights.validate()?;
    let s = [weights.x, weights.y];
    let mut p = RsnetParams::zeros(blocks, 2, lambda / beta, Boundary::Grid)?;

    // Forward differences: x reads (0,+1), y reads (+1,0).
    let input = p.input_kernel_mut();
    input[tap(0, 0, 1, 0, 0)] = -1.0 / s[0];
    input[tap(0, 0, 1, 0, 1)] = 1.0 / s[0];
    input[tap(1, 0, 1, 0, 0)] = -1.0 / s[1];
    input[tap(1, 0, 1, 1, 0)] = 1.0 / s[1];

    // grad grad^T as 3x3 stencils, T[out][in] = list of (dy, dx, value).
    let stencil: [[&[(isize, isize, f64)]; 2]; 2] = [
        [
            &[(0, 0, 2.0), (0, 1, -1.0), (0, -1, -1.0)],
            &[(-1, 1, 1.0), (0, 1, -1.0), (-1, 0, -1.0), (0, 0, 1.0)],
        ],
        [
            &[(1, -1, 1.0), (1, 0, -1.0), (0, -1, -1.0), (0, 0, 1.0)],
            &[(0, 0, 2.0), (1, 0, -1.0), (-1, 0, -1.0)],
        ],
    ];
    let mut block = vec![0.0; 36];
    for k in 0..2 {
        block[tap(k, k, 2, 0, 0)] += 1.0;
        for l in 0..2 {
            for &(dy, dx, v) in stencil[k][l] {
                block[tap(k, l, 2, dy, dx)] -= beta * v * s[l] / s[k];
            }
        }
    }
    for j in 0..blocks {
        p.block_kernel_mut(j).copy_from_slice(&block);
    }

    // -beta grad^T.
    let out = p.output_kernel_mut();
    out[tap(0, 0, 2, 0, -1)] = -beta * s[0];
    out[tap(0, 0, 2, 0, 0)] = beta * s[0];
    out[tap(0, 1, 2, -1, 0)] = -beta * s[1];
    out[tap(0, 1, 2, 0, 0)] = beta * s[1];
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(RsnetParams::param_count_for(10, 16), 23328);
        let p = RsnetParams::random(3, 8, DEFAULT_CLIP, 1).unwrap();
        assert_eq!(p.param_count(), 9 * 8 + 9 * 64 * 3 + 9 * 8);
        assert_eq!(p.input_kernel().len(), 72);
        assert_eq!(p.block_kernel(2).len(), 576);
        assert_eq!(p.output_kernel().len(), 72);
    }

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let a = RsnetParams::random(2, 4, 50.0, 7).unwrap();
        assert_eq!(a, RsnetParams::random(2, 4, 50.0, 7).unwrap());
        assert_ne!(a, RsnetParams::random(2, 4, 50.0, 8).unwrap());
        let s_in = 1.0 / 9.0;
        assert!(a.input_kernel().iter().all(|w| w.abs() <= s_in));
        let s = 1.0 / (3.0 * 6.0);
        assert!(a.block_kernel(1).iter().all(|w| w.abs() <= s));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(RsnetParams::zeros(0, 2, 1.0, Boundary::Grid).is_err());
        assert!(RsnetParams::zeros(1, 2, 0.0, Boundary::Grid).is_err());
        assert!(RsnetParams::from_weights(1, 1, 1.0, Boundary::Grid, vec![0.0; 3]).is_err());
        assert!(kernels_from_rs(0.0, 0.2, AxisWeights::unweighted(), 1).is_err());
    }
}
