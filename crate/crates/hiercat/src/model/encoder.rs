//! Backbone encoders at desk scale: identity over precomputed feature
//! vectors, or a small stack of 3x3 convolution + pool stages for tiny
//! raster inputs. The full-scale backbone of the accounting tables enters
//! only as a constant there, never as code.

use rand::Rng;

use crate::nn::{glorot_uniform, BoundParams, ParamId, ParamSet};
use crate::tensor::Value;

use super::unified::InputKind;

/// Output channels per convolution stage.
pub const CONV_CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, Copy)]
pub struct ConvStage {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvStage {
    fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let kernel = params.add(
            &format!("{name}.kernel"),
            glorot_uniform(
                rng,
                vec![out_channels, in_channels, 3, 3],
                in_channels * 9,
                out_channels * 9,
            ),
        );
        let bias = params.add(
            &format!("{name}.bias"),
            crate::tensor::Tensor::zeros(vec![out_channels]),
        );
        ConvStage {
            kernel,
            bias,
            in_channels,
            out_channels,
        }
    }

    fn forward<'t>(&self, bound: &BoundParams<'t>, x: Value<'t>) -> Value<'t> {
        x.conv3x3(bound.value(self.kernel), bound.value(self.bias))
            .relu()
            .avg_pool2()
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * 9 + self.out_channels
    }
}

/// Features produced by an encoder: one shared vector per product, or one
/// per level when the final stage is level-independent.
#[derive(Clone, Copy)]
pub enum Features<'t> {
    Shared(Value<'t>),
    PerLevel([Value<'t>; 3]),
}

impl<'t> Features<'t> {
    /// The feature vector feeding level `l` (0 cat, 1 sub, 2 attr).
    pub fn for_level(&self, l: usize) -> Value<'t> {
        match self {
            Features::Shared(v) => *v,
            Features::PerLevel(vs) => vs[l],
        }
    }
}

pub enum Encoder {
    /// Precomputed feature vectors pass straight through.
    Identity { dim: usize },
    Conv {
        shared: Vec<ConvStage>,
        /// The duplicated final stage of the level-independent variant,
        /// ordered category / sub-category / attribute.
        per_level: Option<[ConvStage; 3]>,
        height: usize,
        width: usize,
        out_dim: usize,
    },
}

impl Encoder {
    /// Builds the encoder for an input kind; `independent_last` duplicates
    /// the final convolution stage per level. An identity encoder has no
    /// stages to duplicate, so the flag degenerates to three identical
    /// feature copies.
    pub fn build<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        input: &InputKind,
        independent_last: bool,
    ) -> Encoder {
        match *input {
            InputKind::Feature { dim } => Encoder::Identity { dim },
            InputKind::Image {
                height,
                width,
                stages,
            } => {
                let mut shared = Vec::new();
                let mut in_ch = 3;
                let shared_count = if independent_last { stages - 1 } else { stages };
                for s in 0..shared_count {
                    let stage =
                        ConvStage::new(params, rng, &format!("encoder.stage{s}"), in_ch, CONV_CHANNELS[s]);
                    in_ch = CONV_CHANNELS[s];
                    shared.push(stage);
                }
                let per_level = independent_last.then(|| {
                    let s = stages - 1;
                    ["cat", "sub", "attr"].map(|level| {
                        ConvStage::new(
                            params,
                            rng,
                            &format!("encoder.{level}.stage{s}"),
                            in_ch,
                            CONV_CHANNELS[s],
                        )
                    })
                });
                Encoder::Conv {
                    shared,
                    per_level,
                    height,
                    width,
                    out_dim: InputKind::Image {
                        height,
                        width,
                        stages,
                    }
                    .backbone_dim(),
                }
            }
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Conv { out_dim, .. } => *out_dim,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Encoder::Identity { .. } => 0,
            Encoder::Conv {
                shared, per_level, ..
            } => {
                shared.iter().map(ConvStage::parameter_count).sum::<usize>()
                    + per_level
                        .as_ref()
                        .map(|ls| ls.iter().map(ConvStage::parameter_count).sum())
                        .unwrap_or(0)
            }
        }
    }

    /// Encodes a batch. Identity expects `[batch, dim]`; convolution
    /// expects `[batch, 3, height, width]` and flattens its output.
    pub fn forward<'t>(&self, bound: &BoundParams<'t>, input: Value<'t>) -> Features<'t> {
        let shape = input.shape();
        match self {
            Encoder::Identity { dim } => {
                assert!(
                    shape.len() == 2 && shape[1] == *dim,
                    "encoder: expected [batch, {dim}] features, got {shape:?}"
                );
                Features::Shared(input)
            }
            Encoder::Conv {
                shared,
                per_level,
                height,
                width,
                out_dim,
            } => {
                assert!(
                    shape.len() == 4
                        && shape[1] == 3
                        && shape[2] == *height
                        && shape[3] == *width,
                    "encoder: expected [batch, 3, {height}, {width}] images, got {shape:?}"
                );
                let batch = shape[0];
                let mut x = input;
                for stage in shared {
                    x = stage.forward(bound, x);
                }
                match per_level {
                    None => Features::Shared(x.reshape(vec![batch, *out_dim])),
                    Some(stages) => Features::PerLevel(stages.map(|stage| {
                        stage.forward(bound, x).reshape(vec![batch, *out_dim])
                    })),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn conv_encoder_shapes_and_counts() {
        let mut params = ParamSet::new();
        let mut rng = StdRng::seed_from_u64(1);
        let input = InputKind::Image {
            height: 32,
            width: 32,
            stages: 3,
        };
        let enc = Encoder::build(&mut params, &mut rng, &input, false);
        // 32x32 -> three pools -> 4x4 with 32 channels.
        assert_eq!(enc.out_dim(), 32 * 4 * 4);
        // Stage params: 8*3*9+8, 16*8*9+16, 32*16*9+32.
        assert_eq!(enc.parameter_count(), 224 + 1168 + 4640);
        assert_eq!(params.scalar_count(), enc.parameter_count());

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.constant(vec![2, 3, 32, 32], vec![0.5; 2 * 3 * 32 * 32]);
        match enc.forward(&bound, x) {
            Features::Shared(v) => assert_eq!(v.shape(), vec![2, 512]),
            Features::PerLevel(_) => panic!("shared encoder produced per-level features"),
        }
    }

    #[test]
    fn independent_last_stage_triples_only_that_stage() {
        let mut params = ParamSet::new();
        let mut rng = StdRng::seed_from_u64(1);
        let input = InputKind::Image {
            height: 16,
            width: 16,
            stages: 2,
        };
        let enc = Encoder::build(&mut params, &mut rng, &input, true);
        // Shared stage 0 plus three copies of stage 1.
        assert_eq!(enc.parameter_count(), 224 + 3 * 1168);

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.constant(vec![1, 3, 16, 16], vec![0.25; 3 * 256]);
        match enc.forward(&bound, x) {
            Features::PerLevel(vs) => {
                for v in vs {
                    assert_eq!(v.shape(), vec![1, 16 * 4 * 4]);
                }
            }
            Features::Shared(_) => panic!("independent encoder produced shared features"),
        }
    }

    #[test]
    fn one_stage_independent_encoder_is_three_full_encoders() {
        let mut params = ParamSet::new();
        let mut rng = StdRng::seed_from_u64(2);
        let input = InputKind::Image {
            height: 8,
            width: 8,
            stages: 1,
        };
        let enc = Encoder::build(&mut params, &mut rng, &input, true);
        match &enc {
            Encoder::Conv {
                shared, per_level, ..
            } => {
                assert!(shared.is_empty());
                assert!(per_level.is_some());
            }
            _ => panic!("expected a convolution encoder"),
        }
        assert_eq!(enc.parameter_count(), 3 * 224);
    }

    #[test]
    fn identity_passes_features_through() {
        let mut params = ParamSet::new();
        let mut rng = StdRng::seed_from_u64(3);
        let enc = Encoder::build(&mut params, &mut rng, &InputKind::Feature { dim: 5 }, false);
        assert_eq!(enc.parameter_count(), 0);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.constant(vec![1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        match enc.forward(&bound, x) {
            Features::Shared(v) => {
                assert_eq!(v.to_tensor().data(), &[1.0, 2.0, 3.0, 4.0, 5.0])
            }
            _ => panic!(),
        }
    }
}
