//! The two visual encoders: a patch transformer over the low-resolution image
//! (stride 14) and a convolutional stack over the high-resolution image
//! (stride 32). Both emit `[h, w, channels]` feature grids.

mod high;
mod low;

use serde::{Deserialize, Serialize};

pub use high::{downsample_geometry, high_res_forward, init_high_res};
pub use low::{init_low_res, low_res_forward, LowResOutput, Tap, TapSet};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const VIT_STRIDE: usize = 14;
pub const CNN_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
    pub token_count: usize,
}

/// Feature-grid size of a square image encoded at `stride`.
pub fn output_grid_shape(resolution: usize, stride: usize) -> Result<GridShape> {
    if stride == 0 || resolution == 0 {
        return Err(Error::config(format!(
            "resolution {resolution} and stride {stride} must be positive"
        )));
    }
    if !resolution.is_multiple_of(stride) {
        let below = resolution / stride * stride;
        return Err(Error::Divisibility {
            resolution,
            stride,
            below,
            above: below + stride,
        });
    }
    let side = resolution / stride;
    Ok(GridShape {
        h: side,
        w: side,
        token_count: side * side,
    })
}

fn default_patch_stride() -> usize {
    VIT_STRIDE
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowResPathwayConfig {
    #[serde(default)]
    pub resolution: usize,
    #[serde(default = "default_patch_stride")]
    pub patch_stride: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Half-open block ranges `[start, end)`; defaults to four equal groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_partition: Option<Vec<[usize; 2]>>,
}

impl LowResPathwayConfig {
    pub fn grid(&self) -> Result<GridShape> {
        output_grid_shape(self.resolution, self.patch_stride)
    }

    /// Contiguous block ranges making up each stage.
    pub fn stages(&self) -> Vec<std::ops::Range<usize>> {
        if let Some(p) = &self.stage_partition {
            return p.iter().map(|[a, b]| *a..*b).collect();
        }
        let groups = self.depth.clamp(1, 4);
        let (base, extra) = (self.depth / groups, self.depth % groups);
        let mut start = 0;
        (0..groups)
            .map(|i| {
                let len = base + usize::from(i < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }

    /// The last (up to) three stages.
    pub fn default_taps(&self) -> Vec<usize> {
        let n = self.stages().len();
        (n.saturating_sub(3)..n).collect()
    }

    pub fn validate(&self, path: &str, errs: &mut Vec<String>) {
        if let Err(e) = self.grid() {
            errs.push(format!("{path}.resolution: {e}"));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            errs.push(format!(
                "{path}.heads: width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.depth == 0 {
            errs.push(format!("{path}.depth: must be at least 1"));
        }
        if self.mlp_ratio == 0 {
            errs.push(format!("{path}.mlp_ratio: must be at least 1"));
        }
        if let Some(p) = &self.stage_partition {
            let mut next = 0;
            for [a, b] in p {
                if *a != next || b <= a {
                    errs.push(format!(
                        "{path}.stage_partition: ranges must be non-empty, contiguous and start at 0 (got [{a}, {b}) after {next})"
                    ));
                    return;
                }
                next = *b;
            }
            if next != self.depth {
                errs.push(format!(
                    "{path}.stage_partition: covers blocks 0..{next} but depth is {}",
                    self.depth
                ));
            }
        }
    }
}

fn default_stage_strides() -> Vec<usize> {
    vec![4, 2, 2, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighResPathwayConfig {
    #[serde(default)]
    pub resolution: usize,
    #[serde(default = "default_stage_strides")]
    pub stage_strides: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
}

impl HighResPathwayConfig {
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn out_width(&self) -> usize {
        self.stage_widths.last().copied().unwrap_or(0)
    }

    pub fn grid(&self) -> Result<GridShape> {
        output_grid_shape(self.resolution, self.total_stride())
    }

    pub fn validate(&self, path: &str, errs: &mut Vec<String>) {
        let n = self.stage_strides.len();
        if n == 0 || self.stage_widths.len() != n || self.blocks_per_stage.len() != n {
            errs.push(format!(
                "{path}: stage_strides, stage_widths and blocks_per_stage need the same non-zero length ({n}, {}, {})",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            ));
            return;
        }
        if self.stage_strides.contains(&0) || self.stage_widths.contains(&0) {
            errs.push(format!("{path}: strides and widths must be positive"));
        }
        if self.blocks_per_stage.contains(&0) {
            errs.push(format!(
                "{path}.blocks_per_stage: every stage needs a block"
            ));
        }
        if self.total_stride() != CNN_STRIDE {
            errs.push(format!(
                "{path}.stage_strides: product is {} but the pathway stride is {CNN_STRIDE}",
                self.total_stride()
            ));
        }
        if let Err(e) = self.grid() {
            errs.push(format!("{path}.resolution: {e}"));
        }
    }
}

/// A spatial feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub values: Tensor<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 {
            return Err(Error::shape(
                "feature_grid",
                format!("expected [h, w, c], got {s:?}"),
            ));
        }
        Ok(Self {
            h: s[0],
            w: s[1],
            channels: s[2],
            values,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.w, self.channels]
    }
}
