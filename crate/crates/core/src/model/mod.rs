//! The assembled model: both pathways, the adapters, the projection of the
//! high-resolution grid onto the final features, the projector into the
//! decoder's width and the decoder itself.

mod checkpoint;
mod decoder;

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, CHECKPOINT_MAGIC};
pub use decoder::{
    answer_distributions, decoder_hidden, forward_loss, generate, init_decoder, DecoderConfig,
    LossOutput, TokenSequence,
};

use crate::adapter::{fuse, init_adapter, AdapterConfig, AdapterDims, FusionDirection};
use crate::error::{Error, Result};
use crate::nn;
use crate::pathways::{
    high_res_forward, init_high_res, init_low_res, low_res_forward, HighResPathwayConfig,
    LowResPathwayConfig, TapSet, CNN_STRIDE,
};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub low: LowResPathwayConfig,
    pub high: HighResPathwayConfig,
    /// When false the model is the low-resolution-only baseline.
    #[serde(default = "yes")]
    pub high_pathway: bool,
    #[serde(default)]
    pub adapter: AdapterConfig,
    /// Hidden width of the projector MLP; defaults to the decoder width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projector_hidden: Option<usize>,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn at_resolutions(&self, low: usize, high: usize) -> Self {
        let mut c = self.clone();
        c.low.resolution = low;
        c.high.resolution = high;
        c
    }

    pub fn tap_stages(&self) -> Vec<usize> {
        self.adapter
            .tap_stages
            .clone()
            .unwrap_or_else(|| self.low.default_taps())
    }

    pub fn adapter_dims(&self) -> AdapterDims {
        AdapterDims {
            low: self.low.width,
            high: self.high.out_width(),
        }
    }

    pub fn projector_hidden(&self) -> usize {
        self.projector_hidden.unwrap_or(self.decoder.width)
    }

    pub fn visual_tokens(&self) -> Result<usize> {
        Ok(self.low.grid()?.token_count)
    }

    /// Architecture checks that do not depend on the resolutions in use.
    pub fn validate_arch(&self, path: &str, errs: &mut Vec<String>) {
        let mut low_errs = Vec::new();
        self.low.validate(&format!("{path}.low"), &mut low_errs);
        errs.extend(low_errs.into_iter().filter(|e| !e.contains(".resolution")));
        let mut high_errs = Vec::new();
        self.high.validate(&format!("{path}.high"), &mut high_errs);
        errs.extend(high_errs.into_iter().filter(|e| !e.contains(".resolution")));
        self.decoder.validate(&format!("{path}.decoder"), errs);
        if self.projector_hidden == Some(0) {
            errs.push(format!("{path}.projector_hidden: must be positive"));
        }
        let stages = self.low.stages().len();
        let taps = self.tap_stages();
        if taps.is_empty() {
            errs.push(format!(
                "{path}.adapter.tap_stages: at least one stage is required"
            ));
        }
        for s in &taps {
            if *s >= stages {
                errs.push(format!(
                    "{path}.adapter.tap_stages: stage {s} out of range; the low pathway has {stages} stages"
                ));
            }
        }
        let mut sorted = taps.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != taps.len() {
            errs.push(format!("{path}.adapter.tap_stages: duplicate stage"));
        }
    }

    /// Both pathways must produce grids of the same size.
    pub fn check_alignment(&self) -> Result<()> {
        let low = self.low.grid()?;
        let high = self.high.grid()?;
        if low.h != high.h {
            return Err(Error::config(format!(
                "low resolution {} gives a {}x{} grid (/{}) but high resolution {} gives {}x{} (/{CNN_STRIDE})",
                self.low.resolution, low.h, low.w, self.low.patch_stride, self.high.resolution, high.h, high.w
            )));
        }
        Ok(())
    }
}

/// A low/high image pair depicting the same scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<T> {
    pub low: Tensor<T>,
    pub high: Tensor<T>,
}

impl<T: Real> ImagePair<T> {
    pub fn cast<U: Real>(&self) -> ImagePair<U> {
        ImagePair {
            low: self.low.cast(),
            high: self.high.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MraModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl MraModel {
    /// Fresh model without adapters. The high-resolution projection onto the
    /// final features starts at zero.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut errs = Vec::new();
        config.validate_arch("model", &mut errs);
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut params = ParamStore::new();
        init_low_res(&mut params, rng, &config.low)?;
        if config.high_pathway {
            init_high_res(&mut params, rng, &config.high)?;
            nn::zero_linear(
                &mut params,
                "final_high_proj",
                config.high.out_width(),
                config.low.width,
            );
        }
        let hidden = config.projector_hidden();
        nn::init_mlp(
            &mut params,
            rng,
            "projector",
            config.low.width,
            hidden,
            config.decoder.width,
            false,
        );
        init_decoder(&mut params, rng, &config.decoder);
        Ok(Self { config, params })
    }

    pub fn adapter_count(&self) -> usize {
        self.config
            .tap_stages()
            .iter()
            .filter(|s| self.params.contains(&format!("adapter.{s}.gate.fc1.w")))
            .count()
    }

    /// Adds identity-initialized adapters at every tap stage.
    pub fn insert_adapters<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if !self.config.high_pathway {
            return Err(Error::config("adapters need the high-resolution pathway"));
        }
        if self.params.has_group("adapter") {
            return Err(Error::config("adapters are already present"));
        }
        let dims = self.config.adapter_dims();
        for s in self.config.tap_stages() {
            init_adapter(
                &mut self.params,
                rng,
                &format!("adapter.{s}"),
                &self.config.adapter,
                dims,
            );
        }
        Ok(())
    }

    /// Switches to new input resolutions, resampling the stored positional
    /// grid to the new patch grid.
    pub fn set_resolutions(&mut self, low: usize, high: usize) -> Result<()> {
        let config = self.config.at_resolutions(low, high);
        let grid = config.low.grid()?;
        if config.high_pathway {
            config.high.grid()?;
        }
        let pos = self.params.require("low.pos")?.clone();
        let mut g = Graph::new();
        let v = g.constant(pos)?;
        let r = g.interpolate_bilinear(v, grid.h, grid.w)?;
        self.params.insert("low.pos", g.value(r).clone());
        self.config = config;
        Ok(())
    }

    pub fn encode(&self, images: &ImagePair<f32>, stage: Stage) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = encode_images(&mut g, &self.config, &self.params, images, stage)?;
        Ok(g.value(v).clone())
    }

    /// Low pathway alone, without taps or the high-resolution term.
    pub fn low_only(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone())?;
        let out = low_res_forward(
            &mut g,
            &self.params,
            &self.config.low,
            x,
            &mut BTreeMap::new(),
        )?;
        Ok(g.value(out.output).clone())
    }

    pub fn high_only(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone())?;
        let out = high_res_forward(&mut g, &self.params, &self.config.high, x)?;
        Ok(g.value(out).clone())
    }
}

fn check_image(what: &str, t: &Tensor<impl Real>, res: usize) -> Result<()> {
    if t.shape() != [res, res, 3] {
        return Err(Error::config(format!(
            "{what} image is {:?} but the configured resolution is {res}",
            t.shape()
        )));
    }
    Ok(())
}

/// Adds the resized, projected high-resolution grid to the low grid.
pub fn stage1_combine<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    low: Var,
    high: Var,
) -> Result<Var> {
    let (h, w) = (g.shape(low)[0], g.shape(low)[1]);
    let resized = g.interpolate_bilinear(high, h, w)?;
    let projected = nn::linear(g, p, "final_high_proj", resized)?;
    g.add(low, projected)
}

/// Final visual feature grid `[h, w, d]` for one image pair.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    low_img: Var,
    high_img: Var,
    stage: Stage,
) -> Result<Var> {
    if !cfg.high_pathway {
        let out = low_res_forward(g, p, &cfg.low, low_img, &mut BTreeMap::new())?;
        return Ok(out.output);
    }
    let high = high_res_forward(g, p, &cfg.high, high_img)?;
    match stage {
        Stage::One => {
            let low = low_res_forward(g, p, &cfg.low, low_img, &mut BTreeMap::new())?.output;
            stage1_combine(g, p, low, high)
        }
        Stage::Two => {
            cfg.check_alignment()?;
            let running_high = Cell::new(high);
            let mut taps: TapSet<'_, T> = BTreeMap::new();
            for s in cfg.tap_stages() {
                let prefix = format!("adapter.{s}");
                let running_high = &running_high;
                let acfg = &cfg.adapter;
                let tap: crate::pathways::Tap<'_, T> = match acfg.fusion_direction {
                    FusionDirection::HighToLow => Box::new(move |g: &mut Graph<T>, v: Var| {
                        fuse(g, p, &prefix, acfg, v, running_high.get())
                    }),
                    FusionDirection::LowToHigh => Box::new(move |g: &mut Graph<T>, v: Var| {
                        let updated = fuse(g, p, &prefix, acfg, v, running_high.get())?;
                        running_high.set(updated);
                        Ok(v)
                    }),
                };
                taps.insert(s, tap);
            }
            let low = low_res_forward(g, p, &cfg.low, low_img, &mut taps)?.output;
            drop(taps);
            let projected = nn::linear(g, p, "final_high_proj", running_high.get())?;
            g.add(low, projected)
        }
    }
}

pub fn encode_images<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    images: &ImagePair<T>,
    stage: Stage,
) -> Result<Var> {
    check_image("low-resolution", &images.low, cfg.low.resolution)?;
    if cfg.high_pathway {
        check_image("high-resolution", &images.high, cfg.high.resolution)?;
    }
    let low = g.constant(images.low.clone())?;
    let high = g.constant(images.high.clone())?;
    encode(g, cfg, p, low, high, stage)
}

/// Projects the `[h, w, d]` feature grid to row-major decoder tokens `[h*w, d_dec]`.
pub fn visual_tokens<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, features: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let rows = g.reshape(features, &[s[0] * s[1], s[2]])?;
    nn::mlp(g, p, "projector", rows)
}
