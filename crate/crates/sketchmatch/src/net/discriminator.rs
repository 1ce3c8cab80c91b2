//! Two-branch discriminator.
//!
//! A shared conv trunk downsamples the input sketch to an 8x8 map (for the
//! default 128 input). Two heads read it:
//!
//! * discrimination head: a 2x2 stride-1 conv onto one channel plus sigmoid,
//!   giving a 7x7 grid of real/fake probabilities — each score judges one
//!   receptive-field region of the sketch;
//! * feature head: flatten plus a fully-connected layer onto a 1024-wide,
//!   L2-normalized identity embedding.
//!
//! An optional attribute head maps the embedding onto per-attribute logits.

use super::{conv_block, init_conv, init_linear, SIZE_DIVISOR};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    /// Fixed spatial input size; must be divisible by 16 and at least 32.
    pub input_size: usize,
    /// Trunk channel widths c, 2c, 4c, 8c.
    pub base_channels: usize,
    /// Width of the identity embedding.
    pub feature_dim: usize,
    /// Attribute head width; 0 disables the head.
    pub attr_dim: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            input_size: 128,
            base_channels: 64,
            feature_dim: 1024,
            attr_dim: 0,
        }
    }
}

impl DiscriminatorConfig {
    /// Mirror of the full topology at test scale: trunk 4-8-16-32.
    pub fn tiny() -> Self {
        DiscriminatorConfig {
            input_size: 128,
            base_channels: 4,
            feature_dim: 32,
            attr_dim: 0,
        }
    }
}

/// Outputs of one discriminator forward pass.
pub struct DiscOutput {
    /// `[B,1,m,m]` real/fake probabilities in (0,1); m = input/16 - 1.
    pub patch_map: Var,
    /// `[B,feature_dim]` unit-norm embeddings.
    pub feature: Var,
    /// `[B,attr_dim]` attribute logits when the head is enabled.
    pub attr_logits: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    pre_head: usize,
    patch_side: usize,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        if config.base_channels == 0 || config.feature_dim == 0 {
            return Err(Error::Argument(
                "discriminator base_channels and feature_dim must be >= 1".into(),
            ));
        }
        if config.input_size % SIZE_DIVISOR != 0 || config.input_size / SIZE_DIVISOR < 2 {
            return Err(Error::Geometry(format!(
                "discriminator input size {} must be a multiple of {SIZE_DIVISOR} with a pre-head map of at least 2",
                config.input_size
            )));
        }
        let pre_head = config.input_size / SIZE_DIVISOR;
        let patch_side = pre_head - 1;
        // Architecture audit: the standard 128 configuration must land on the
        // 8x8 trunk map and the 7x7 discrimination grid exactly.
        if config.input_size == 128 {
            assert_eq!(pre_head, 8, "trunk arithmetic drifted");
            assert_eq!(patch_side, 7, "head arithmetic drifted");
        }
        Ok(Discriminator { config, pre_head, patch_side })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Side length of the trunk output map (8 for 128 input).
    pub fn pre_head_side(&self) -> usize {
        self.pre_head
    }

    /// Side length of the discrimination grid (7 for 128 input).
    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    fn channels(&self, level: usize) -> usize {
        self.config.base_channels << (level - 1)
    }

    /// Fresh Glorot-initialized parameters under the `disc.` prefix.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut params = ParamSet::new();
        let c = |l: usize| self.channels(l);
        init_conv(&mut params, "disc.trunk1", c(1), 1, 4, rng);
        init_conv(&mut params, "disc.trunk2", c(2), c(1), 4, rng);
        init_conv(&mut params, "disc.trunk3", c(3), c(2), 4, rng);
        init_conv(&mut params, "disc.trunk4", c(4), c(3), 4, rng);
        init_conv(&mut params, "disc.patch_head", 1, c(4), 2, rng);
        let flat = c(4) * self.pre_head * self.pre_head;
        init_linear(&mut params, "disc.feat_head", flat, self.config.feature_dim, rng);
        if self.config.attr_dim > 0 {
            init_linear(&mut params, "disc.attr_head", self.config.feature_dim, self.config.attr_dim, rng);
        }
        params
    }

    /// Forward pass over `[B,1,S,S]` where S is the configured input size.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        sketch: Var,
        track: bool,
    ) -> Result<DiscOutput> {
        let shape = tape.value(sketch).shape().to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Geometry(format!(
                "discriminator expects [B,1,{s},{s}], got {shape:?}"
            )));
        }
        let batch = shape[0];

        let t1 = conv_block(tape, params, "disc.trunk1", sketch, 2, 1, track)?;
        let t2 = conv_block(tape, params, "disc.trunk2", t1, 2, 1, track)?;
        let t3 = conv_block(tape, params, "disc.trunk3", t2, 2, 1, track)?;
        let t4 = conv_block(tape, params, "disc.trunk4", t3, 2, 1, track)?;

        // Discrimination branch: 2x2 stride-1 conv is the minimal kernel
        // taking the m x m trunk map onto (m-1) x (m-1).
        let pw = tape.param(params, "disc.patch_head.w", track)?;
        let pb = tape.param(params, "disc.patch_head.b", track)?;
        let patch = tape.conv2d(t4, pw, 1, 0)?;
        let patch = tape.add_channel_bias(patch, pb)?;
        let patch_map = tape.sigmoid(patch);
        debug_assert_eq!(
            tape.value(patch_map).shape(),
            &[batch, 1, self.patch_side, self.patch_side]
        );

        // Feature branch: flatten, project, normalize.
        let flat_dim = self.channels(4) * self.pre_head * self.pre_head;
        let flat = tape.reshape(t4, &[batch, flat_dim])?;
        let fw = tape.param(params, "disc.feat_head.w", track)?;
        let fb = tape.param(params, "disc.feat_head.b", track)?;
        let feat = tape.matmul(flat, fw)?;
        let feat = tape.add_row_bias(feat, fb)?;
        let feature = tape.l2_normalize_rows(feat)?;

        let attr_logits = if self.config.attr_dim > 0 {
            let aw = tape.param(params, "disc.attr_head.w", track)?;
            let ab = tape.param(params, "disc.attr_head.b", track)?;
            let logits = tape.matmul(feature, aw)?;
            Some(tape.add_row_bias(logits, ab)?)
        } else {
            None
        };

        Ok(DiscOutput { patch_map, feature, attr_logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sketch(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[1, 1, size, size],
            (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_heads_have_paper_shapes() {
        let disc = Discriminator::new(DiscriminatorConfig::default()).unwrap();
        assert_eq!(disc.pre_head_side(), 8);
        assert_eq!(disc.patch_side(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = disc.init_params(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_sketch(128, 1));
        let out = disc.forward(&mut tape, &params, x, false).unwrap();
        assert_eq!(tape.value(out.patch_map).shape(), &[1, 1, 7, 7]);
        assert_eq!(tape.value(out.feature).shape(), &[1, 1024]);
        assert!(tape
            .value(out.patch_map)
            .data()
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
        let norm: f64 = tape.value(out.feature).data().iter().map(|v| v * v).sum();
        assert!((norm.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tiny_config_mirrors_topology() {
        let disc = Discriminator::new(DiscriminatorConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = disc.init_params(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_sketch(128, 3));
        let out = disc.forward(&mut tape, &params, x, false).unwrap();
        assert_eq!(tape.value(out.patch_map).shape(), &[1, 1, 7, 7]);
        assert_eq!(tape.value(out.feature).shape(), &[1, 32]);
    }

    #[test]
    fn wrong_input_size_is_geometry_error() {
        let disc = Discriminator::new(DiscriminatorConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = disc.init_params(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_sketch(64, 5));
        assert!(matches!(
            disc.forward(&mut tape, &params, x, false),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn patch_training_sizes_are_supported() {
        // A 32-input discriminator has a 2x2 trunk map and a 1x1 grid.
        let disc = Discriminator::new(DiscriminatorConfig {
            input_size: 32,
            base_channels: 2,
            feature_dim: 8,
            attr_dim: 0,
        })
        .unwrap();
        assert_eq!(disc.patch_side(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = disc.init_params(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_sketch(32, 7));
        let out = disc.forward(&mut tape, &params, x, false).unwrap();
        assert_eq!(tape.value(out.patch_map).shape(), &[1, 1, 1, 1]);
    }

    #[test]
    fn attribute_head_emits_logits() {
        let disc = Discriminator::new(DiscriminatorConfig {
            attr_dim: 5,
            ..DiscriminatorConfig::tiny()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = disc.init_params(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_sketch(128, 9));
        let out = disc.forward(&mut tape, &params, x, false).unwrap();
        let logits = out.attr_logits.expect("head enabled");
        assert_eq!(tape.value(logits).shape(), &[1, 5]);
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let disc = Discriminator::new(DiscriminatorConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = disc.init_params(&mut rng);
        let sketch = random_sketch(128, 11);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(sketch.clone());
            let out = disc.forward(&mut tape, &params, x, false).unwrap();
            (
                tape.value(out.patch_map).data().to_vec(),
                tape.value(out.feature).data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
