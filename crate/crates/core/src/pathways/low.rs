use std::collections::BTreeMap;

use rand::Rng;

use super::LowResPathwayConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Rewrites the `[h, w, d]` grid at the end of a stage; must keep its shape.
pub type Tap<'a, T> = Box<dyn FnMut(&mut Graph<T>, Var) -> Result<Var> + 'a>;
pub type TapSet<'a, T> = BTreeMap<usize, Tap<'a, T>>;

pub struct LowResOutput {
    /// Final `[h, w, d]` grid.
    pub output: Var,
    /// Grid at the end of each stage, after any tap.
    pub stages: Vec<Var>,
}

pub fn init_low_res<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    cfg: &LowResPathwayConfig,
) -> Result<()> {
    let grid = cfg.grid()?;
    let d = cfg.width;
    nn::init_conv(store, rng, "low.patch", cfg.patch_stride, 3, d, 1.0);
    store.insert("low.pos", Tensor::randn(&[grid.h, grid.w, d], 0.02, rng));
    for b in 0..cfg.depth {
        nn::init_transformer_block(
            store,
            rng,
            &format!("low.block{b}"),
            d,
            cfg.mlp_ratio,
            cfg.depth,
        );
    }
    Ok(())
}

/// Runs the patch transformer on an `[r, r, 3]` image. The positional grid is
/// resampled when the stored grid was trained at another resolution.
pub fn low_res_forward<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    cfg: &LowResPathwayConfig,
    image: Var,
    taps: &mut TapSet<'_, T>,
) -> Result<LowResOutput> {
    let shape = g.shape(image).to_vec();
    if shape != [cfg.resolution, cfg.resolution, 3] {
        return Err(Error::shape(
            "low_res_forward",
            format!(
                "expected [{0}, {0}, 3] image, got {shape:?}",
                cfg.resolution
            ),
        ));
    }
    let grid = cfg.grid()?;
    let (h, w, d) = (grid.h, grid.w, cfg.width);
    let stages = cfg.stages();
    if let Some(&bad) = taps.keys().find(|&&s| s >= stages.len()) {
        return Err(Error::config(format!(
            "tap stage {bad} out of range; the pathway has {} stages",
            stages.len()
        )));
    }

    let x = nn::conv(g, p, "low.patch", image, cfg.patch_stride, 0)?;
    let pos = g.param(p, "low.pos")?;
    let pos = g.interpolate_bilinear(pos, h, w)?;
    let x = g.add(x, pos)?;
    let mut x = g.reshape(x, &[h * w, d])?;

    let mut ends = Vec::with_capacity(stages.len());
    for (s, range) in stages.into_iter().enumerate() {
        for b in range {
            x = nn::transformer_block(g, p, &format!("low.block{b}"), x, cfg.heads, false)?;
        }
        let mut grid_v = g.reshape(x, &[h, w, d])?;
        if let Some(tap) = taps.get_mut(&s) {
            grid_v = tap(g, grid_v)?;
            if g.shape(grid_v) != [h, w, d] {
                return Err(Error::shape(
                    "low_res_forward",
                    format!(
                        "tap at stage {s} changed the grid shape to {:?}",
                        g.shape(grid_v)
                    ),
                ));
            }
            x = g.reshape(grid_v, &[h * w, d])?;
        }
        ends.push(grid_v);
    }
    Ok(LowResOutput {
        output: *ends.last().expect("at least one stage"),
        stages: ends,
    })
}
