//! Straight-line f64 re-implementations used as oracles by several test
//! targets. Grids are `Vec<Vec<f64>>` indexed by row-major position then
//! channel, so they share no code with the library kernels.
#![allow(dead_code)]

use mra_core::adapter::{
    AdapterConfig, FusionDirection, FusionType, GateActivation, GateGranularity,
};
use mra_core::tensor::{ParamStore, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(t: &Tensor<f64>) -> Rows {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn from_rows(rows: &Rows, lead: &[usize]) -> Tensor<f64> {
    let c = rows[0].len();
    let mut shape = lead.to_vec();
    shape.push(c);
    Tensor::new(&shape, rows.concat()).unwrap()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn gate_fn(kind: GateActivation, x: f64) -> f64 {
    match kind {
        GateActivation::Tanh => x.tanh(),
        GateActivation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        GateActivation::Hsigmoid => ((x + 3.0) / 6.0).clamp(0.0, 1.0),
    }
}

fn param<'a>(p: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    p.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

/// `y = x W + b` per row.
pub fn linear(p: &ParamStore<f64>, prefix: &str, x: &Rows) -> Rows {
    let w = param(p, &format!("{prefix}.w"));
    let b = param(p, &format!("{prefix}.b"));
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout)
                .map(|o| b.data()[o] + (0..din).map(|i| row[i] * w.at(&[i, o])).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(p: &ParamStore<f64>, prefix: &str, x: &Rows) -> Rows {
    let g = param(p, &format!("{prefix}.g"));
    let b = param(p, &format!("{prefix}.b"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

/// Direct convolution with zero padding on an `h x w` grid of rows.
pub fn conv(
    p: &ParamStore<f64>,
    prefix: &str,
    x: &Rows,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
) -> (Rows, usize, usize) {
    let k = param(p, &format!("{prefix}.w"));
    let b = param(p, &format!("{prefix}.b"));
    let (ks, ci) = (k.shape()[0], k.shape()[2]);
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut out = Vec::new();
    for oy in 0..ho {
        for ox in 0..wo {
            let mut row = b.data().to_vec();
            for (o, r) in row.iter_mut().enumerate() {
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        let src = &x[iy as usize * w + ix as usize];
                        for (i, v) in src.iter().enumerate().take(ci) {
                            *r += v * k.at(&[ky, kx, i, o]);
                        }
                    }
                }
            }
            out.push(row);
        }
    }
    (out, ho, wo)
}

pub fn map_apply(p: &ParamStore<f64>, prefix: &str, x: &Rows, h: usize, w: usize) -> Rows {
    if p.contains(&format!("{prefix}.conv1.w")) {
        let (y, _, _) = conv(p, &format!("{prefix}.conv1"), x, h, w, 1, 1);
        let y = layer_norm(p, &format!("{prefix}.ln"), &y);
        let y: Rows = y
            .iter()
            .map(|r| r.iter().map(|&v| gelu(v)).collect())
            .collect();
        conv(p, &format!("{prefix}.conv2"), &y, h, w, 1, 0).0
    } else {
        let y = linear(p, &format!("{prefix}.fc1"), x);
        let y: Rows = y
            .iter()
            .map(|r| r.iter().map(|&v| gelu(v)).collect())
            .collect();
        linear(p, &format!("{prefix}.fc2"), &y)
    }
}

/// Gate from two mapped grids: activation(W2 gelu(W1 mean([a, b]) + b1) + b2).
pub fn gate(
    p: &ParamStore<f64>,
    prefix: &str,
    cfg: &AdapterConfig,
    a: &Rows,
    b: &Rows,
) -> Vec<f64> {
    let n = a.len() as f64;
    let c = a[0].len();
    let mut pooled = vec![0.0; 2 * c];
    for (ra, rb) in a.iter().zip(b) {
        for j in 0..c {
            pooled[j] += ra[j] / n;
            pooled[c + j] += rb[j] / n;
        }
    }
    let hidden = linear(p, &format!("{prefix}.gate.fc1"), &vec![pooled]);
    let hidden: Rows = vec![hidden[0].iter().map(|&v| gelu(v)).collect()];
    let z = linear(p, &format!("{prefix}.gate.fc2"), &hidden).remove(0);
    let g: Vec<f64> = z.iter().map(|&v| gate_fn(cfg.gate_activation, v)).collect();
    match cfg.gate_granularity {
        GateGranularity::Channel => g,
        GateGranularity::Scalar => vec![g[0]; c],
    }
}

/// Term-by-term adapter update; returns (gate, updated target grid).
pub fn fuse(
    p: &ParamStore<f64>,
    prefix: &str,
    cfg: &AdapterConfig,
    low: &Rows,
    high: &Rows,
    h: usize,
    w: usize,
) -> (Vec<f64>, Rows) {
    let low_m = map_apply(p, &format!("{prefix}.f_low"), low, h, w);
    let high_m = map_apply(p, &format!("{prefix}.f_high"), high, h, w);
    let (target, tm, sm) = match cfg.fusion_direction {
        FusionDirection::HighToLow => (low, &low_m, &high_m),
        FusionDirection::LowToHigh => (high, &high_m, &low_m),
    };
    let g = gate(p, prefix, cfg, tm, sm);
    let mut out = Vec::new();
    for i in 0..target.len() {
        let kept: Vec<f64> = (0..g.len()).map(|j| target[i][j] + tm[i][j]).collect();
        let inj: Vec<f64> = (0..g.len()).map(|j| g[j] * sm[i][j]).collect();
        out.push(match cfg.fusion_type {
            FusionType::Sum => kept.iter().zip(&inj).map(|(a, b)| a + b).collect(),
            FusionType::Concat => {
                let joined = [kept, inj].concat();
                linear(p, &format!("{prefix}.proj"), &vec![joined]).remove(0)
            }
        });
    }
    (g, out)
}

/// Align-corners-false bilinear resize of an `h x w` grid of rows.
pub fn resize(x: &Rows, h: usize, w: usize, th: usize, tw: usize) -> Rows {
    let src = |o: usize, n: usize, t: usize| {
        let pos = ((o as f64 + 0.5) * n as f64 / t as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = Vec::new();
    for oy in 0..th {
        let (y0, y1, ly) = src(oy, h, th);
        for ox in 0..tw {
            let (x0, x1, lx) = src(ox, w, tw);
            let c = x[0].len();
            out.push(
                (0..c)
                    .map(|j| {
                        (1.0 - ly) * (1.0 - lx) * x[y0 * w + x0][j]
                            + (1.0 - ly) * lx * x[y0 * w + x1][j]
                            + ly * (1.0 - lx) * x[y1 * w + x0][j]
                            + ly * lx * x[y1 * w + x1][j]
                    })
                    .collect(),
            );
        }
    }
    out
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(u, v)| (u - v).abs())
        })
        .fold(0.0, f64::max)
}

pub fn tiny_model_config(low_res: usize, high_res: usize) -> mra_core::model::ModelConfig {
    use mra_core::model::{DecoderConfig, ModelConfig};
    use mra_core::pathways::{HighResPathwayConfig, LowResPathwayConfig};
    ModelConfig {
        low: LowResPathwayConfig {
            resolution: low_res,
            patch_stride: 14,
            width: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            stage_partition: None,
        },
        high: HighResPathwayConfig {
            resolution: high_res,
            stage_strides: vec![4, 2, 2, 2],
            stage_widths: vec![4, 8, 8, 12],
            blocks_per_stage: vec![1, 1, 1, 1],
        },
        high_pathway: true,
        adapter: AdapterConfig::default(),
        projector_hidden: None,
        decoder: DecoderConfig {
            vocab_size: 16,
            context_length: 64,
            width: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        },
    }
}

pub fn random_images(low: usize, high: usize, seed: u64) -> mra_core::model::ImagePair<f32> {
    use rand::SeedableRng;
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    mra_core::model::ImagePair {
        low: Tensor::<f32>::uniform(&[low, low, 3], 0.0, 1.0, &mut r),
        high: Tensor::<f32>::uniform(&[high, high, 3], 0.0, 1.0, &mut r),
    }
}

/// Overwrites every parameter in the given groups with uniform noise.
pub fn randomize_groups(p: &mut ParamStore<f32>, groups: &[&str], seed: u64, scale: f64) {
    use rand::SeedableRng;
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in p.iter_mut() {
        if groups.contains(&mra_core::tensor::param_group(name)) {
            *t = Tensor::uniform(t.shape(), -scale, scale, &mut r);
        }
    }
}
