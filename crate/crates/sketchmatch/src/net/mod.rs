//! Network architectures: the photo-to-sketch generator, the two-branch
//! discriminator and a feed-forward classifier over feature vectors.
//!
//! All architectures are pure descriptions; weights live in a [`ParamSet`]
//! and flow through a [`Tape`] during forward passes, so the same code path
//! serves training and inference.

mod discriminator;
mod generator;
mod mlff;

pub use discriminator::{DiscOutput, Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};
pub use mlff::{Mlff, MlffConfig};

use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;

/// Downsampling depth of both conv stacks; inputs must divide 2^DEPTH.
pub const DEPTH: usize = 4;

/// Spatial divisor implied by [`DEPTH`] stride-2 levels.
pub const SIZE_DIVISOR: usize = 1 << DEPTH;

/// Negative slope used by every internal activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Glorot-uniform bound: sqrt(6 / (fan_in + fan_out)).
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn init_conv<R: Rng>(
    params: &mut ParamSet,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut R,
) {
    let fan_in = in_ch * k * k;
    let fan_out = out_ch * k * k;
    let w = Tensor::uniform(&[out_ch, in_ch, k, k], xavier_bound(fan_in, fan_out), rng);
    params.insert(&format!("{name}.w"), w).expect("unique layer names");
    params
        .insert(&format!("{name}.b"), Tensor::zeros(&[out_ch]))
        .expect("unique layer names");
}

// Transpose-conv kernels are stored [in_ch, out_ch, k, k].
pub(crate) fn init_convt<R: Rng>(
    params: &mut ParamSet,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    rng: &mut R,
) {
    let fan_in = in_ch * k * k;
    let fan_out = out_ch * k * k;
    let w = Tensor::uniform(&[in_ch, out_ch, k, k], xavier_bound(fan_in, fan_out), rng);
    params.insert(&format!("{name}.w"), w).expect("unique layer names");
    params
        .insert(&format!("{name}.b"), Tensor::zeros(&[out_ch]))
        .expect("unique layer names");
}

pub(crate) fn init_linear<R: Rng>(
    params: &mut ParamSet,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut R,
) {
    let w = Tensor::uniform(&[in_dim, out_dim], xavier_bound(in_dim, out_dim), rng);
    params.insert(&format!("{name}.w"), w).expect("unique layer names");
    params
        .insert(&format!("{name}.b"), Tensor::zeros(&[out_dim]))
        .expect("unique layer names");
}

// conv + channel bias + leaky activation, the trunk building block.
pub(crate) fn conv_block(
    tape: &mut Tape,
    params: &ParamSet,
    name: &str,
    x: crate::tape::Var,
    stride: usize,
    pad: usize,
    track: bool,
) -> crate::error::Result<crate::tape::Var> {
    let w = tape.param(params, &format!("{name}.w"), track)?;
    let b = tape.param(params, &format!("{name}.b"), track)?;
    let y = tape.conv2d(x, w, stride, pad)?;
    let y = tape.add_channel_bias(y, b)?;
    Ok(tape.leaky_relu(y, LEAKY_SLOPE))
}
