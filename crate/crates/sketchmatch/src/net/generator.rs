//! Photo-to-sketch generator: a 4-level encoder/decoder with optional skip
//! connections. Skips concatenate encoder features into the decoder, which
//! preserves the spatial layout of the face while the trunk restyles it.

use super::{conv_block, init_conv, init_convt, DEPTH, LEAKY_SLOPE, SIZE_DIVISOR};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    /// First-level channel width; levels use c, 2c, 4c, 8c.
    pub base_channels: usize,
    /// Wire encoder features into the decoder by channel concatenation.
    pub skip_connections: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { base_channels: 64, skip_connections: true }
    }
}

impl GeneratorConfig {
    pub fn tiny() -> Self {
        GeneratorConfig { base_channels: 4, skip_connections: true }
    }
}

/// Size-polymorphic generator: accepts any `[B,1,H,W]` with H and W
/// divisible by 2^4 and at least 16, and returns `[B,1,H,W]` in (0,1).
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        if config.base_channels == 0 {
            return Err(Error::Argument("generator base_channels must be >= 1".into()));
        }
        Ok(Generator { config })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn channels(&self, level: usize) -> usize {
        self.config.base_channels << (level - 1)
    }

    /// Fresh Glorot-initialized parameters under the `gen.` prefix.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut params = ParamSet::new();
        let c = |l: usize| self.channels(l);
        init_conv(&mut params, "gen.enc1", c(1), 1, 4, rng);
        init_conv(&mut params, "gen.enc2", c(2), c(1), 4, rng);
        init_conv(&mut params, "gen.enc3", c(3), c(2), 4, rng);
        init_conv(&mut params, "gen.enc4", c(4), c(3), 4, rng);
        let cat = |ch: usize| if self.config.skip_connections { 2 * ch } else { ch };
        init_convt(&mut params, "gen.dec4", c(4), c(3), 4, rng);
        init_convt(&mut params, "gen.dec3", cat(c(3)), c(2), 4, rng);
        init_convt(&mut params, "gen.dec2", cat(c(2)), c(1), 4, rng);
        init_convt(&mut params, "gen.dec1", cat(c(1)), 1, 4, rng);
        params
    }

    /// Forward pass. `track` controls whether gradients flow to `params`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        photo: Var,
        track: bool,
    ) -> Result<Var> {
        let shape = tape.value(photo).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape {
                op: "generator_forward",
                detail: format!("expected [B,1,H,W], got {shape:?}"),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 || h < SIZE_DIVISOR || w < SIZE_DIVISOR {
            return Err(Error::Geometry(format!(
                "generator input {h}x{w} must be divisible by 2^{DEPTH} = {SIZE_DIVISOR}"
            )));
        }

        let e1 = conv_block(tape, params, "gen.enc1", photo, 2, 1, track)?;
        let e2 = conv_block(tape, params, "gen.enc2", e1, 2, 1, track)?;
        let e3 = conv_block(tape, params, "gen.enc3", e2, 2, 1, track)?;
        let e4 = conv_block(tape, params, "gen.enc4", e3, 2, 1, track)?;

        let up = |tape: &mut Tape, name: &str, x: Var, out_act: bool| -> Result<Var> {
            let wt = tape.param(params, &format!("{name}.w"), track)?;
            let bt = tape.param(params, &format!("{name}.b"), track)?;
            let y = tape.conv2d_transpose(x, wt, 2, 1)?;
            let y = tape.add_channel_bias(y, bt)?;
            Ok(if out_act { tape.leaky_relu(y, LEAKY_SLOPE) } else { y })
        };

        let d4 = up(tape, "gen.dec4", e4, true)?;
        let d4 = if self.config.skip_connections {
            tape.concat_channels(d4, e3)?
        } else {
            d4
        };
        let d3 = up(tape, "gen.dec3", d4, true)?;
        let d3 = if self.config.skip_connections {
            tape.concat_channels(d3, e2)?
        } else {
            d3
        };
        let d2 = up(tape, "gen.dec2", d3, true)?;
        let d2 = if self.config.skip_connections {
            tape.concat_channels(d2, e1)?
        } else {
            d2
        };
        let out = up(tape, "gen.dec1", d2, false)?;
        // tanh rescaled to (0,1).
        let out = tape.tanh_act(out);
        let out = tape.add_scalar(out, 1.0);
        Ok(tape.scale(out, 0.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_photo(h: usize, w: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[1, 1, h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn output_matches_input_shape() {
        let gen = Generator::new(GeneratorConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = gen.init_params(&mut rng);
        for (h, w) in [(128, 128), (32, 32), (48, 64)] {
            let mut tape = Tape::new();
            let x = tape.constant(random_photo(h, w, 1));
            let y = gen.forward(&mut tape, &params, x, false).unwrap();
            assert_eq!(tape.value(y).shape(), &[1, 1, h, w]);
        }
    }

    #[test]
    fn output_range_is_unit_interval() {
        let gen = Generator::new(GeneratorConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = gen.init_params(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_photo(32, 32, 3));
        let y = gen.forward(&mut tape, &params, x, false).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn indivisible_size_is_geometry_error() {
        let gen = Generator::new(GeneratorConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = gen.init_params(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_photo(20, 32, 5));
        assert!(matches!(
            gen.forward(&mut tape, &params, x, false),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn deterministic_forward() {
        let gen = Generator::new(GeneratorConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = gen.init_params(&mut rng);
        let photo = random_photo(32, 32, 7);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(photo.clone());
            let y = gen.forward(&mut tape, &params, x, false).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn no_skip_wiring_also_runs() {
        let gen = Generator::new(GeneratorConfig { base_channels: 2, skip_connections: false })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = gen.init_params(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_photo(32, 32, 9));
        let y = gen.forward(&mut tape, &params, x, false).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 32, 32]);
    }
}
