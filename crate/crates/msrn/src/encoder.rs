//! Four-block convolutional feature encoder with multi-scale fusion.
//!
//! Every block is a 3x3/64 convolution (padding 1) followed by relu; the
//! first two blocks additionally max-pool 2x2, so spatial extents shrink by
//! four overall. One parameter set serves every scale: the pyramid variant
//! encodes each scale with the same weights and adds nearest-upsampled
//! coarse features into the next finer level.

use crate::rng::Rng;
use crate::tape::{Result, Tape, TapeError, Var};
use crate::tensor::Tensor;

pub const FEATURE_CHANNELS: usize = 64;

#[derive(Clone)]
pub struct ConvBlock {
    pub weight: Tensor, // [out, in, 3, 3]
    pub bias: Tensor,   // [out]
}

impl ConvBlock {
    pub fn init(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let fan_in = c_in * 9;
        let fan_out = c_out * 9;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        ConvBlock {
            weight: Tensor::from_fn(&[c_out, c_in, 3, 3], |_| rng.uniform(-limit, limit)),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

#[derive(Clone)]
pub struct EncoderParams {
    pub blocks: Vec<ConvBlock>, // exactly four, shallow to deep
}

impl EncoderParams {
    pub fn init(in_channels: usize, rng: &mut Rng) -> Self {
        let mut blocks = Vec::with_capacity(4);
        blocks.push(ConvBlock::init(in_channels, FEATURE_CHANNELS, rng));
        for _ in 0..3 {
            blocks.push(ConvBlock::init(FEATURE_CHANNELS, FEATURE_CHANNELS, rng));
        }
        EncoderParams { blocks }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> EncoderVars {
        EncoderVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    (tape.leaf(b.weight.clone(), requires_grad), tape.leaf(b.bias.clone(), requires_grad))
                })
                .collect(),
        }
    }
}

/// Tape handles for one bound copy of the encoder parameters.
pub struct EncoderVars {
    pub blocks: Vec<(Var, Var)>,
}

/// Encodes a [c, H, W] image into a [64, H/4, W/4] feature map.
pub fn encode(tape: &mut Tape, image: Var, params: &EncoderVars) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    if shape.len() != 3 {
        return Err(TapeError::Shape { op: "encode", detail: format!("{shape:?}") });
    }
    let (h, w) = (shape[1], shape[2]);
    if h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0 {
        return Err(TapeError::Shape {
            op: "encode",
            detail: format!("spatial extents must be >= 16 and divisible by 4, got {h}x{w}"),
        });
    }
    let mut x = image;
    for (i, (w, b)) in params.blocks.iter().enumerate() {
        x = tape.conv2d(x, *w, *b, 1, 1)?;
        x = tape.relu(x)?;
        if i < 2 {
            x = tape.maxpool2x2(x)?;
        }
    }
    Ok(x)
}

/// Encodes a pyramid of images (finest first, coarsest last; consecutive
/// entries halve the linear resolution) and fuses coarse features into finer
/// levels by nearest upsampling and addition. Returns one fused map per
/// scale, finest first.
pub fn encode_pyramid(tape: &mut Tape, images: &[Var], params: &EncoderVars) -> Result<Vec<Var>> {
    if images.is_empty() {
        return Err(TapeError::Contract("encode_pyramid needs at least one scale".into()));
    }
    for pair in images.windows(2) {
        let a = tape.value(pair[0]).shape().to_vec();
        let b = tape.value(pair[1]).shape().to_vec();
        if a[1] != 2 * b[1] || a[2] != 2 * b[2] {
            return Err(TapeError::Shape {
                op: "encode_pyramid",
                detail: format!("broken resolution chain: {a:?} then {b:?}"),
            });
        }
    }
    let raw: Vec<Var> = images
        .iter()
        .map(|&img| encode(tape, img, params))
        .collect::<Result<_>>()?;

    let mut fused = vec![*raw.last().expect("nonempty")];
    for s in (0..raw.len() - 1).rev() {
        let coarse = *fused.last().expect("nonempty");
        let up = tape.upsample_nearest(coarse, 2)?;
        fused.push(tape.add(raw[s], up)?);
    }
    fused.reverse();
    Ok(fused)
}
