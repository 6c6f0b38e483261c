//! Closed-form visual-token and FLOP counts for baseline and dual-resolution
//! configurations. One multiply-accumulate counts as 2 FLOPs throughout;
//! normalization, activations, softmax and resampling are not counted.

use serde::{Deserialize, Serialize};

use crate::adapter::{FusionDirection, FusionType, GateGranularity, MapKind};
use crate::error::{Error, Result};
use crate::model::{DecoderConfig, ModelConfig};
use crate::pathways::{
    downsample_geometry, output_grid_shape, GridShape, HighResPathwayConfig, LowResPathwayConfig,
    CNN_STRIDE, VIT_STRIDE,
};

pub const FLOP_CONVENTION: &str = "one multiply-accumulate = 2 FLOPs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    BaselineVit,
    Mra,
}

impl Arch {
    pub fn of(cfg: &ModelConfig) -> Self {
        if cfg.high_pathway {
            Arch::Mra
        } else {
            Arch::BaselineVit
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::BaselineVit => "baseline_vit",
            Arch::Mra => "mra",
        }
    }
}

/// Tokens the decoder sees. Only the low resolution matters for MRA; the
/// high resolution is still checked for divisibility.
pub fn visual_token_count(arch: Arch, low: usize, high: usize) -> Result<usize> {
    let n = output_grid_shape(low, VIT_STRIDE)?.token_count;
    if arch == Arch::Mra {
        output_grid_shape(high, CNN_STRIDE)?;
    }
    Ok(n)
}

pub fn linear_flops(n: usize, din: usize, dout: usize) -> u128 {
    2 * n as u128 * din as u128 * dout as u128
}

/// Q, K, V and output projections plus score and value products for `n`
/// tokens of width `d`: 8nd² + 4n²d.
pub fn attention_flops(n: usize, d: usize) -> u128 {
    let (n, d) = (n as u128, d as u128);
    8 * n * d * d + 4 * n * n * d
}

pub fn conv_flops(ho: usize, wo: usize, k: usize, cin: usize, cout: usize) -> u128 {
    2 * (ho * wo) as u128 * (k * k) as u128 * cin as u128 * cout as u128
}

fn transformer_flops(n: usize, d: usize, mlp_ratio: usize) -> u128 {
    attention_flops(n, d) + linear_flops(n, d, d * mlp_ratio) + linear_flops(n, d * mlp_ratio, d)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelCost {
    pub arch: Arch,
    pub visual_token_count: usize,
    pub low_flops: u128,
    pub high_flops: u128,
    /// Tap-stage adapters plus the final projection of the high grid.
    pub adapter_flops: u128,
    pub projector_flops: u128,
    /// Decoder pass over visual and text tokens, with logits for the last
    /// position only.
    pub decoder_prefill_flops: u128,
    /// One cached decoding step at the end of the prefilled context.
    pub decoder_flops_per_token: u128,
    pub context_tokens_total: usize,
    pub context_length: usize,
    pub overflow: bool,
}

impl ModelCost {
    pub fn encoder_flops(&self) -> u128 {
        self.low_flops + self.high_flops + self.adapter_flops + self.projector_flops
    }

    /// Everything before the first generated token.
    pub fn prefill_flops(&self) -> u128 {
        self.encoder_flops() + self.decoder_prefill_flops
    }
}

fn low_flops(cfg: &LowResPathwayConfig) -> Result<u128> {
    let g = cfg.grid()?;
    let patch = conv_flops(g.h, g.w, cfg.patch_stride, 3, cfg.width);
    Ok(patch + cfg.depth as u128 * transformer_flops(g.token_count, cfg.width, cfg.mlp_ratio))
}

/// Per-stage output sizes `(h, w)` of the convolutional pathway.
fn high_stage_grids(cfg: &HighResPathwayConfig) -> Vec<(usize, usize, usize, usize)> {
    let mut h = cfg.resolution;
    let mut out = Vec::new();
    for &s in &cfg.stage_strides {
        let (k, pad) = downsample_geometry(s);
        let ho = (h + 2 * pad - k) / s + 1;
        out.push((ho, ho, k, s));
        h = ho;
    }
    out
}

fn high_flops(cfg: &HighResPathwayConfig) -> Result<u128> {
    cfg.grid()?;
    let mut total = 0;
    let mut cin = 3;
    for (i, (ho, wo, k, _)) in high_stage_grids(cfg).into_iter().enumerate() {
        let cout = cfg.stage_widths[i];
        total += conv_flops(ho, wo, k, cin, cout);
        total +=
            (cfg.blocks_per_stage[i].saturating_sub(1)) as u128 * conv_flops(ho, wo, 3, cout, cout);
        cin = cout;
    }
    Ok(total)
}

fn map_flops(kind: MapKind, grid: GridShape, din: usize, dout: usize) -> u128 {
    let n = grid.token_count;
    match kind {
        MapKind::Conv => {
            conv_flops(grid.h, grid.w, 3, din, din) + conv_flops(grid.h, grid.w, 1, din, dout)
        }
        MapKind::Mlp => linear_flops(n, din, dout) + linear_flops(n, dout, dout),
    }
}

fn adapter_flops(cfg: &ModelConfig) -> Result<u128> {
    let (low_g, high_g) = (cfg.low.grid()?, cfg.high.grid()?);
    let (low_n, high_n) = (low_g.token_count, high_g.token_count);
    let a = &cfg.adapter;
    let dims = cfg.adapter_dims();
    let target = dims.target(a);
    let target_n = match a.fusion_direction {
        FusionDirection::HighToLow => low_n,
        FusionDirection::LowToHigh => high_n,
    };
    let s = a.mapping_structure;
    let gate_out = match a.gate_granularity {
        GateGranularity::Channel => target,
        GateGranularity::Scalar => 1,
    };
    let mut per_tap = map_flops(s.low_kind(), low_g, dims.low, target)
        + map_flops(s.high_kind(), high_g, dims.high, target)
        + linear_flops(1, 2 * target, dims.gate_hidden(a))
        + linear_flops(1, dims.gate_hidden(a), gate_out);
    if a.fusion_type == FusionType::Concat {
        per_tap += linear_flops(target_n, 2 * target, target);
    }
    let taps = cfg.tap_stages().len() as u128;
    Ok(taps * per_tap + linear_flops(low_n, dims.high, dims.low))
}

fn decoder_flops(cfg: &DecoderConfig, n: usize) -> (u128, u128) {
    let head = linear_flops(1, cfg.width, cfg.vocab_size);
    let prefill = cfg.depth as u128 * transformer_flops(n, cfg.width, cfg.mlp_ratio) + head;
    let (d, r) = (cfg.width, cfg.mlp_ratio);
    let step_block =
        8 * (d * d) as u128 + 4 * (n + 1) as u128 * d as u128 + linear_flops(1, d, d * r) * 2;
    (prefill, cfg.depth as u128 * step_block + head)
}

/// Cost of encoding one image and prefilling `text_tokens` of text. Stage-2
/// adapters are counted for MRA configurations.
pub fn flops_estimate(cfg: &ModelConfig, text_tokens: usize) -> Result<ModelCost> {
    let arch = Arch::of(cfg);
    let visual = visual_token_count(arch, cfg.low.resolution, cfg.high.resolution)?;
    let low = low_flops(&cfg.low)?;
    let (high, adapter) = match arch {
        Arch::Mra => (high_flops(&cfg.high)?, adapter_flops(cfg)?),
        Arch::BaselineVit => (0, 0),
    };
    let hidden = cfg.projector_hidden();
    let projector = linear_flops(visual, cfg.low.width, hidden)
        + linear_flops(visual, hidden, cfg.decoder.width);
    let total = visual + text_tokens;
    let (prefill, per_token) = decoder_flops(&cfg.decoder, total);
    Ok(ModelCost {
        arch,
        visual_token_count: visual,
        low_flops: low,
        high_flops: high,
        adapter_flops: adapter,
        projector_flops: projector,
        decoder_prefill_flops: prefill,
        decoder_flops_per_token: per_token,
        context_tokens_total: total,
        context_length: cfg.decoder.context_length,
        overflow: total > cfg.decoder.context_length,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextCheck {
    Ok,
    Warn { excess: usize },
}

pub fn context_overflow_check(cost: &ModelCost, context_length: usize) -> ContextCheck {
    if cost.context_tokens_total > context_length {
        ContextCheck::Warn {
            excess: cost.context_tokens_total - context_length,
        }
    } else {
        ContextCheck::Ok
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub name: String,
    pub model: ModelConfig,
    pub text_tokens: usize,
}

pub const PROFILE_HEADER: &str = "name,arch,low_resolution,high_resolution,visual_tokens,low_flops,high_flops,adapter_flops,projector_flops,encoder_flops,prefill_flops,per_token_flops,context_tokens,overflow";

pub fn profile_rows(entries: &[ProfileEntry]) -> Result<Vec<(String, ModelCost)>> {
    if entries.is_empty() {
        return Err(Error::config("profile needs at least one configuration"));
    }
    entries
        .iter()
        .map(|e| Ok((e.name.clone(), flops_estimate(&e.model, e.text_tokens)?)))
        .collect()
}

/// CSV table, one row per entry in input order.
pub fn profile_report(entries: &[ProfileEntry]) -> Result<String> {
    let rows = profile_rows(entries)?;
    let mut out = format!("# FLOP convention: {FLOP_CONVENTION}\n{PROFILE_HEADER}\n");
    for ((name, c), e) in rows.iter().zip(entries) {
        let high = if c.arch == Arch::Mra {
            e.model.high.resolution.to_string()
        } else {
            String::new()
        };
        out.push_str(&format!(
            "{name},{},{},{high},{},{:.3e},{:.3e},{:.3e},{:.3e},{:.3e},{:.3e},{:.3e},{},{}\n",
            c.arch.name(),
            e.model.low.resolution,
            c.visual_token_count,
            c.low_flops as f64,
            c.high_flops as f64,
            c.adapter_flops as f64,
            c.projector_flops as f64,
            c.encoder_flops() as f64,
            c.prefill_flops() as f64,
            c.decoder_flops_per_token as f64,
            c.context_tokens_total,
            c.overflow
        ));
    }
    Ok(out)
}

/// Baseline resolution and MRA high resolution for each efficiency
/// comparison row, smallest first.
pub const TABLE1_PAIRS: [(usize, usize); 4] = [(336, 384), (448, 768), (672, 1024), (1022, 1536)];

/// Low resolution paired with an MRA high resolution: the aligned value
/// 14·high/32, capped at 448.
pub fn mra_low_resolution(high: usize) -> usize {
    (VIT_STRIDE * high / CNN_STRIDE).min(448)
}

/// Large-scale architecture: a 24-block width-1024 ViT, a four-stage CNN of
/// widths 192..1536 and a 32-block width-4096 decoder with a 2048 context.
pub fn paper_scale_model(arch: Arch, low: usize, high: usize) -> ModelConfig {
    ModelConfig {
        low: LowResPathwayConfig {
            resolution: low,
            patch_stride: VIT_STRIDE,
            width: 1024,
            depth: 24,
            heads: 16,
            mlp_ratio: 4,
            stage_partition: None,
        },
        high: HighResPathwayConfig {
            resolution: if arch == Arch::Mra { high } else { 0 },
            stage_strides: vec![4, 2, 2, 2],
            stage_widths: vec![192, 384, 768, 1536],
            blocks_per_stage: vec![3, 3, 27, 3],
        },
        high_pathway: arch == Arch::Mra,
        adapter: Default::default(),
        projector_hidden: Some(4096),
        decoder: DecoderConfig {
            vocab_size: 32000,
            context_length: 2048,
            width: 4096,
            depth: 32,
            heads: 32,
            mlp_ratio: 3,
        },
    }
}

/// Eight entries mirroring the efficiency comparison: for each pair, the
/// baseline at its resolution followed by MRA at the matching high
/// resolution.
pub fn table1_profile(text_tokens: usize) -> Vec<ProfileEntry> {
    TABLE1_PAIRS
        .iter()
        .flat_map(|&(base, high)| {
            let low = mra_low_resolution(high);
            [
                ProfileEntry {
                    name: format!("baseline_{base}"),
                    model: paper_scale_model(Arch::BaselineVit, base, 0),
                    text_tokens,
                },
                ProfileEntry {
                    name: format!("mra_{low}_{high}"),
                    model: paper_scale_model(Arch::Mra, low, high),
                    text_tokens,
                },
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(linear_flops(2, 3, 5), 60);
        assert_eq!(attention_flops(1, 1), 12);
        assert_eq!(conv_flops(1, 1, 3, 1, 1), 18);
    }

    #[test]
    fn low_resolution_pairing() {
        assert_eq!(mra_low_resolution(384), 168);
        assert_eq!(mra_low_resolution(768), 336);
        assert_eq!(mra_low_resolution(1024), 448);
        assert_eq!(mra_low_resolution(1536), 448);
    }

    #[test]
    fn high_grids_follow_strides() {
        let cfg = paper_scale_model(Arch::Mra, 448, 1024).high;
        let sides: Vec<usize> = high_stage_grids(&cfg).iter().map(|g| g.0).collect();
        assert_eq!(sides, vec![256, 128, 64, 32]);
    }
}
