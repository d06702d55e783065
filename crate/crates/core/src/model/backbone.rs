use std::sync::Arc;

use rand::Rng;

use crate::data::Image;
use crate::feature::Grid;
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var, GATHER_ZERO};
use crate::transformer::he_uniform_init;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output widths of the three stride-2 stages.
    pub widths: [usize; 3],
    /// Width `C` of both projected maps.
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { in_channels: 1, widths: [8, 16, 32], channels: 32 }
    }
}

/// 3×3 stride-2 convolution with zero padding 1. Weight rows follow the
/// im2col column order `(ky·3 + kx)·C_in + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvStage {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

/// 1×1 projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub stages: Vec<ConvStage>,
    /// Produces `X^g`.
    pub global: Projection,
    /// Produces `X^p` (rectified).
    pub part: Projection,
}

impl BackboneParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: BackboneConfig, rng: &mut R) -> Self {
        let mut c_in = config.in_channels;
        let mut stages = Vec::with_capacity(3);
        for (i, &c_out) in config.widths.iter().enumerate() {
            let fan_in = 9 * c_in;
            stages.push(ConvStage {
                weight: store.add(format!("{prefix}.conv{i}.w"), he_uniform_init(rng, fan_in, c_out, fan_in)),
                bias: store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[c_out])),
                c_in,
                c_out,
            });
            c_in = c_out;
        }
        let c = config.channels;
        let mut proj = |name: &str, rng: &mut R| Projection {
            weight: store.add(format!("{prefix}.{name}.w"), he_uniform_init(rng, c_in, c, c_in)),
            bias: store.add(format!("{prefix}.{name}.b"), Tensor::zeros(&[c])),
        };
        let global = proj("proj_g", rng);
        let part = proj("proj_p", rng);
        Self { config, stages, global, part }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.stages.iter().flat_map(|s| [s.weight, s.bias]).collect();
        ids.extend([self.global.weight, self.global.bias, self.part.weight, self.part.bias]);
        ids
    }
}

/// Output extent of a 3×3, stride-2, pad-1 convolution.
pub fn stride2_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// Gather map turning a pixel-major `(H·W)×C` input into the
/// `(H'·W')×(9·C)` patch matrix of a 3×3 stride-2 pad-1 convolution.
pub fn im2col_map(width: usize, height: usize, channels: usize) -> (Arc<[usize]>, usize, usize) {
    let (ow, oh) = (stride2_extent(width), stride2_extent(height));
    let mut map = Vec::with_capacity(ow * oh * 9 * channels);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..3 {
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    let iy = (2 * oy + ky) as isize - 1;
                    let inside = ix >= 0 && iy >= 0 && (ix as usize) < width && (iy as usize) < height;
                    for c in 0..channels {
                        map.push(if inside {
                            ((iy as usize) * width + ix as usize) * channels + c
                        } else {
                            GATHER_ZERO
                        });
                    }
                }
            }
        }
    }
    (map.into(), ow, oh)
}

fn conv_stage(tape: &mut Tape, x: Var, width: usize, height: usize, w: Var, b: Var) -> Result<(Var, usize, usize)> {
    let c = tape.value(x).cols();
    let (map, ow, oh) = im2col_map(width, height, c);
    let patches = tape.gather(x, map, vec![ow * oh, 9 * c])?;
    let y = tape.matmul(patches, w)?;
    let y = tape.add_row_bias(y, b)?;
    Ok((tape.relu(y), ow, oh))
}

/// Backbone outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    pub xg: Var,
    pub xp: Var,
    pub grid: Grid,
}

/// Three conv stages, then the two 1×1 heads. Spatial extent shrinks by 8
/// (rounding up); `X^p` is rectified.
pub fn backbone_forward(g: &mut Graph, params: &BackboneParams, image: &Image) -> Result<BackboneOutput> {
    if image.width < 8 || image.height < 8 {
        return Err(TensorError::Argument(format!(
            "image {}x{} is smaller than 8x8",
            image.width, image.height
        )));
    }
    if image.channels != params.config.in_channels {
        return Err(TensorError::Argument(format!(
            "image has {} channels, backbone expects {}",
            image.channels, params.config.in_channels
        )));
    }
    let mut x = g.tape.constant(image.to_tensor());
    let (mut w, mut h) = (image.width, image.height);
    for stage in &params.stages {
        let (wv, bv) = (g.param(stage.weight), g.param(stage.bias));
        (x, w, h) = conv_stage(&mut g.tape, x, w, h, wv, bv)?;
    }
    let project = |g: &mut Graph, p: &Projection| -> Result<Var> {
        let (wv, bv) = (g.param(p.weight), g.param(p.bias));
        let y = g.tape.matmul(x, wv)?;
        g.tape.add_row_bias(y, bv)
    };
    let xg = project(g, &params.global)?;
    let xp = project(g, &params.part)?;
    let xp = g.tape.relu(xp);
    Ok(BackboneOutput { xg, xp, grid: Grid::new(w, h) })
}
