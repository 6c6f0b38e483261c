use rand::Rng;

use super::HighResPathwayConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Graph, ParamStore, Real, Var};

/// Kernel and padding of a stage's downsampling convolution. Odd kernels
/// centred on the sampled pixel: stride 1 and 2 use 3x3, stride 4 uses 5x5.
pub fn downsample_geometry(stride: usize) -> (usize, usize) {
    if stride == 1 {
        (3, 1)
    } else {
        (2 * (stride / 2) + 1, stride / 2)
    }
}

pub fn init_high_res<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    cfg: &HighResPathwayConfig,
) -> Result<()> {
    let mut cin = 3;
    for (s, (&stride, &width)) in cfg.stage_strides.iter().zip(&cfg.stage_widths).enumerate() {
        for b in 0..cfg.blocks_per_stage[s] {
            let prefix = format!("high.stage{s}.block{b}");
            let k = if b == 0 {
                downsample_geometry(stride).0
            } else {
                3
            };
            let input = if b == 0 { cin } else { width };
            nn::init_conv(
                store,
                rng,
                &format!("{prefix}.conv"),
                k,
                input,
                width,
                2f64.sqrt(),
            );
            nn::init_layer_norm(store, &format!("{prefix}.ln"), width);
        }
        cin = width;
    }
    Ok(())
}

/// Runs the convolutional pathway on an `[r, r, 3]` image, producing an
/// `[r/32, r/32, d]` grid. Each block is conv, channel layer norm, GELU; blocks
/// after the first in a stage are residual.
pub fn high_res_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &HighResPathwayConfig,
    image: Var,
) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    if shape != [cfg.resolution, cfg.resolution, 3] {
        return Err(Error::shape(
            "high_res_forward",
            format!(
                "expected [{0}, {0}, 3] image, got {shape:?}",
                cfg.resolution
            ),
        ));
    }
    cfg.grid()?;
    let mut x = image;
    for (s, &stride) in cfg.stage_strides.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage[s] {
            let prefix = format!("high.stage{s}.block{b}");
            let (st, pad) = if b == 0 {
                (stride, downsample_geometry(stride).1)
            } else {
                (1, 1)
            };
            let y = nn::conv(g, p, &format!("{prefix}.conv"), x, st, pad)?;
            let y = nn::layer_norm(g, p, &format!("{prefix}.ln"), y)?;
            let y = g.gelu(y)?;
            x = if b == 0 { y } else { g.add(x, y)? };
        }
    }
    Ok(x)
}
