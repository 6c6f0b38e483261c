//! Gated fusion of one pathway's features into the other's running grid.
//!
//! For the default high-to-low direction the update at a tap is
//! `low + f_low(low) + gate * f_high(high)`, where the gate is computed from
//! the spatial means of both mapped grids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Activation, Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionDirection {
    #[default]
    HighToLow,
    LowToHigh,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionType {
    #[default]
    Sum,
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    #[default]
    Tanh,
    Sigmoid,
    Hsigmoid,
}

impl GateActivation {
    pub fn activation(self) -> Activation {
        match self {
            GateActivation::Tanh => Activation::Tanh,
            GateActivation::Sigmoid => Activation::Sigmoid,
            GateActivation::Hsigmoid => Activation::Hsigmoid,
        }
    }
}

/// Module kinds as `<high map>_<low map>`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingStructure {
    #[default]
    MlpConv,
    ConvConv,
    ConvMlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Conv,
    Mlp,
}

impl MappingStructure {
    pub fn high_kind(self) -> MapKind {
        match self {
            MappingStructure::MlpConv => MapKind::Mlp,
            MappingStructure::ConvConv | MappingStructure::ConvMlp => MapKind::Conv,
        }
    }

    pub fn low_kind(self) -> MapKind {
        match self {
            MappingStructure::MlpConv | MappingStructure::ConvConv => MapKind::Conv,
            MappingStructure::ConvMlp => MapKind::Mlp,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighSource {
    #[default]
    FinalStage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateGranularity {
    #[default]
    Channel,
    Scalar,
}

pub const ALL_DIRECTIONS: [FusionDirection; 2] =
    [FusionDirection::HighToLow, FusionDirection::LowToHigh];
pub const ALL_FUSION_TYPES: [FusionType; 2] = [FusionType::Sum, FusionType::Concat];
pub const ALL_STRUCTURES: [MappingStructure; 3] = [
    MappingStructure::MlpConv,
    MappingStructure::ConvConv,
    MappingStructure::ConvMlp,
];
pub const ALL_GATES: [GateActivation; 3] = [
    GateActivation::Tanh,
    GateActivation::Sigmoid,
    GateActivation::Hsigmoid,
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub fusion_direction: FusionDirection,
    pub fusion_type: FusionType,
    pub gate_activation: GateActivation,
    pub mapping_structure: MappingStructure,
    /// Low-pathway stages that receive an adapter; `None` means the last three.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tap_stages: Option<Vec<usize>>,
    pub high_source: HighSource,
    pub gate_granularity: GateGranularity,
}

/// Channel widths of the two pathways as seen by one adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterDims {
    pub low: usize,
    pub high: usize,
}

impl AdapterDims {
    /// Width of the grid being updated.
    pub fn target(self, cfg: &AdapterConfig) -> usize {
        match cfg.fusion_direction {
            FusionDirection::HighToLow => self.low,
            FusionDirection::LowToHigh => self.high,
        }
    }

    pub fn gate_hidden(self, cfg: &AdapterConfig) -> usize {
        (self.target(cfg) / 2).max(1)
    }
}

fn init_map<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    prefix: &str,
    kind: MapKind,
    din: usize,
    dout: usize,
    zero_out: bool,
) {
    match kind {
        MapKind::Conv => {
            nn::init_conv(
                store,
                rng,
                &format!("{prefix}.conv1"),
                3,
                din,
                din,
                2f64.sqrt(),
            );
            nn::init_layer_norm(store, &format!("{prefix}.ln"), din);
            if zero_out {
                nn::zero_conv(store, &format!("{prefix}.conv2"), 1, din, dout);
            } else {
                nn::init_conv(store, rng, &format!("{prefix}.conv2"), 1, din, dout, 1.0);
            }
        }
        MapKind::Mlp => nn::init_mlp(store, rng, prefix, din, dout, dout, zero_out),
    }
}

/// Creates one adapter's parameters under `prefix`.
///
/// The map reading the updated pathway ends in zeros and the gate's output
/// projection is zero, so the adapter starts as an exact identity. The gate's
/// first projection stays random: zeroing both projections would leave every
/// gate weight without gradient. Gates that are not zero at zero input
/// (sigmoid, hard sigmoid) also get a zero-ended incoming map.
pub fn init_adapter<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    prefix: &str,
    cfg: &AdapterConfig,
    dims: AdapterDims,
) {
    let target = dims.target(cfg);
    let gate_zero = cfg.gate_activation.activation().apply(0.0f64) == 0.0;
    let (low_zero, high_zero) = match cfg.fusion_direction {
        FusionDirection::HighToLow => (true, !gate_zero),
        FusionDirection::LowToHigh => (!gate_zero, true),
    };
    let s = cfg.mapping_structure;
    init_map(
        store,
        rng,
        &format!("{prefix}.f_low"),
        s.low_kind(),
        dims.low,
        target,
        low_zero,
    );
    init_map(
        store,
        rng,
        &format!("{prefix}.f_high"),
        s.high_kind(),
        dims.high,
        target,
        high_zero,
    );

    let hidden = dims.gate_hidden(cfg);
    nn::init_linear(
        store,
        rng,
        &format!("{prefix}.gate.fc1"),
        2 * target,
        hidden,
        1.0,
    );
    let gate_out = match cfg.gate_granularity {
        GateGranularity::Channel => target,
        GateGranularity::Scalar => 1,
    };
    nn::zero_linear(store, &format!("{prefix}.gate.fc2"), hidden, gate_out);

    if cfg.fusion_type == FusionType::Concat {
        // [I; 0]: passes the residual half through unchanged
        let mut w = Tensor::zeros(&[2 * target, target]);
        for i in 0..target {
            w.data_mut()[i * target + i] = 1.0;
        }
        store.insert(format!("{prefix}.proj.w"), w);
        store.insert(format!("{prefix}.proj.b"), Tensor::zeros(&[target]));
    }
}

fn apply_map<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "adapter map",
            format!("expected [h, w, c], got {shape:?}"),
        ));
    }
    if p.contains(&format!("{prefix}.conv1.w")) {
        let w = p.require(&format!("{prefix}.conv1.w"))?;
        if w.shape()[2] != shape[2] {
            return Err(Error::shape(
                "adapter map",
                format!(
                    "{prefix} expects {} channels, got {}",
                    w.shape()[2],
                    shape[2]
                ),
            ));
        }
        let h = nn::conv(g, p, &format!("{prefix}.conv1"), x, 1, 1)?;
        let h = nn::layer_norm(g, p, &format!("{prefix}.ln"), h)?;
        let h = g.gelu(h)?;
        nn::conv(g, p, &format!("{prefix}.conv2"), h, 1, 0)
    } else {
        let w = p.require(&format!("{prefix}.fc1.w"))?;
        if w.shape()[0] != shape[2] {
            return Err(Error::shape(
                "adapter map",
                format!(
                    "{prefix} expects {} channels, got {}",
                    w.shape()[0],
                    shape[2]
                ),
            ));
        }
        nn::mlp(g, p, prefix, x)
    }
}

/// The map applied to low-pathway features.
pub fn map_low<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    low: Var,
) -> Result<Var> {
    apply_map(g, p, &format!("{prefix}.f_low"), low)
}

/// The map applied to high-pathway features.
pub fn map_high<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    high: Var,
) -> Result<Var> {
    apply_map(g, p, &format!("{prefix}.f_high"), high)
}

fn check_aligned<T: Real>(g: &Graph<T>, what: &str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 3 || sb.len() != 3 || sa[..2] != sb[..2] {
        return Err(Error::Alignment {
            what: what.to_string(),
            left: sa.to_vec(),
            right: sb.to_vec(),
        });
    }
    Ok(())
}

/// Gate vector from two mapped grids of identical shape; always `[c]`.
pub fn gate<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    cfg: &AdapterConfig,
    target_mapped: Var,
    source_mapped: Var,
) -> Result<Var> {
    if g.shape(target_mapped) != g.shape(source_mapped) {
        return Err(Error::Alignment {
            what: "gate inputs".into(),
            left: g.shape(target_mapped).to_vec(),
            right: g.shape(source_mapped).to_vec(),
        });
    }
    let channels = *g.shape(target_mapped).last().unwrap();
    let joined = g.concat_cols(target_mapped, source_mapped)?;
    let pooled = g.mean_rows(joined)?;
    let h = nn::linear(g, p, &format!("{prefix}.gate.fc1"), pooled)?;
    let h = g.gelu(h)?;
    let z = nn::linear(g, p, &format!("{prefix}.gate.fc2"), h)?;
    let v = g.activation(z, cfg.gate_activation.activation())?;
    match (cfg.gate_granularity, g.shape(v)[0]) {
        (GateGranularity::Channel, n) if n == channels => Ok(v),
        (GateGranularity::Scalar, 1) => g.expand(v, channels),
        (_, n) => Err(Error::shape(
            "gate",
            format!("gate output width {n} does not fit {channels} channels"),
        )),
    }
}

/// Fuses the source pathway's grid into the target pathway's grid. Both must
/// share their spatial size. Returns the updated target grid.
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    cfg: &AdapterConfig,
    low: Var,
    high: Var,
) -> Result<Var> {
    check_aligned(g, "adapter inputs (low grid vs high grid)", low, high)?;
    let low_m = map_low(g, p, prefix, low)?;
    let high_m = map_high(g, p, prefix, high)?;
    let (target, target_m, source_m) = match cfg.fusion_direction {
        FusionDirection::HighToLow => (low, low_m, high_m),
        FusionDirection::LowToHigh => (high, high_m, low_m),
    };
    let gv = gate(g, p, prefix, cfg, target_m, source_m)?;
    let kept = g.add(target, target_m)?;
    let injected = g.mul_row(source_m, gv)?;
    match cfg.fusion_type {
        FusionType::Sum => g.add(kept, injected),
        FusionType::Concat => {
            let joined = g.concat_cols(kept, injected)?;
            nn::linear(g, p, &format!("{prefix}.proj"), joined)
        }
    }
}
