//! Two-stage training. Stage 1 trains only the projector and the
//! high-resolution projection with everything else frozen; stage 2 raises the
//! resolutions, inserts identity adapters and trains the whole model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::{forward_loss, generate, Checkpoint, CheckpointMeta, MraModel, RngState, Stage};
use crate::rng::{stream, substream};
use crate::synth::Sample;
use crate::tensor::{Graph, ParamStore, Tensor};

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_warmup() -> f64 {
    0.03
}
fn d_one() -> usize {
    1
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Decoupled decay; never applied to gains and biases.
    #[serde(default)]
    pub weight_decay: f64,
    /// Share of the run spent ramping the learning rate up linearly.
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: 0.0,
            warmup_fraction: d_warmup(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub low_resolution: usize,
    pub high_resolution: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Micro-batches per optimizer step; bounds how many samples are in
    /// flight at once without changing the result.
    #[serde(default = "d_one")]
    pub grad_accum: usize,
    #[serde(default = "d_one")]
    pub epochs: usize,
    /// Caps the number of optimizer steps when set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "d_true")]
    pub parallel: bool,
}

impl StageConfig {
    /// Paper defaults: stage 1 at 336/384 with rate 1e-3 and batch 256;
    /// stage 2 at 448/1024 with rate 2e-5.
    pub fn paper(stage: Stage) -> Self {
        let (low_resolution, high_resolution, learning_rate) = match stage {
            Stage::One => (336, 384, 1e-3),
            Stage::Two => (448, 1024, 2e-5),
        };
        Self {
            stage,
            low_resolution,
            high_resolution,
            learning_rate,
            batch_size: 256,
            grad_accum: 1,
            epochs: 1,
            max_steps: None,
            optimizer: OptimizerConfig::default(),
            parallel: true,
        }
    }

    pub fn frozen_groups(&self) -> Vec<String> {
        match self.stage {
            Stage::One => vec!["low".into(), "high".into(), "decoder".into()],
            Stage::Two => Vec::new(),
        }
    }

    pub fn steps_for(&self, samples: usize) -> usize {
        let per_epoch = samples.div_ceil(self.batch_size.max(1));
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }

    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.optimizer.warmup_fraction * total as f64).ceil() as usize;
        if warmup == 0 || step >= warmup {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / warmup as f64
        }
    }

    pub fn validate(&self, path: &str, errs: &mut Vec<String>) {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("{path}.learning_rate: must be positive"));
        }
        if self.batch_size == 0 {
            errs.push(format!("{path}.batch_size: must be positive"));
        }
        if self.grad_accum == 0 || !self.batch_size.is_multiple_of(self.grad_accum.max(1)) {
            errs.push(format!(
                "{path}.grad_accum: {} must divide batch_size {}",
                self.grad_accum, self.batch_size
            ));
        }
        if self.epochs == 0 {
            errs.push(format!("{path}.epochs: must be positive"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            errs.push(format!("{path}.optimizer: betas must lie in [0, 1)"));
        }
        if o.eps <= 0.0 || o.weight_decay < 0.0 {
            errs.push(format!(
                "{path}.optimizer: eps must be positive and weight_decay non-negative"
            ));
        }
        if !(0.0..=1.0).contains(&o.warmup_fraction) {
            errs.push(format!(
                "{path}.optimizer.warmup_fraction: must be within [0, 1]"
            ));
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first_moment: ParamStore<f32>,
    pub second_moment: ParamStore<f32>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: ParamStore::new(),
            second_moment: ParamStore::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn update(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            let shape = p.shape().to_vec();
            if !self.first_moment.contains(name) {
                self.first_moment
                    .insert(name.clone(), Tensor::zeros(&shape));
                self.second_moment
                    .insert(name.clone(), Tensor::zeros(&shape));
            }
            let m = self.first_moment.get_mut(name).unwrap().data_mut();
            let v = self.second_moment.get_mut(name).unwrap().data_mut();
            let decay = if shape.len() >= 2 {
                c.weight_decay
            } else {
                0.0
            };
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gv = gv as f64;
                let m_new = c.beta1 * *mv as f64 + (1.0 - c.beta1) * gv;
                let v_new = c.beta2 * *vv as f64 + (1.0 - c.beta2) * gv * gv;
                *mv = m_new as f32;
                *vv = v_new as f32;
                let update = (m_new / bc1) / ((v_new / bc2).sqrt() + c.eps) + decay * *pv as f64;
                *pv = (*pv as f64 - lr * update) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub learning_rate: f64,
    pub tokens_in_context: usize,
}

pub const METRICS_HEADER: &str = "step,stage,loss,learning_rate,tokens_in_context";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6e},{}\n",
            r.step, r.stage, r.loss, r.learning_rate, r.tokens_in_context
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

impl StageOutcome {
    pub fn model(&self) -> MraModel {
        MraModel {
            config: self.checkpoint.meta.config.clone(),
            params: self.checkpoint.params.clone(),
        }
    }

    /// Mean loss over the first and last `window` steps.
    pub fn loss_drop(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.metrics.len();
        if n < window || window == 0 {
            return None;
        }
        let mean =
            |rows: &[MetricsRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        Some((
            mean(&self.metrics[..window]),
            mean(&self.metrics[n - window..]),
        ))
    }
}

/// Mean loss and summed gradients over `batch`, divided by its size. Samples
/// are evaluated in parallel but reduced in index order.
pub fn batch_gradients(
    model: &MraModel,
    stage: Stage,
    frozen: &[String],
    batch: &[&Sample],
    micro_batches: usize,
    parallel: bool,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let cfg = &model.config;
    let (low, high) = (cfg.low.resolution, cfg.high.resolution);
    let mut sum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut loss = 0.0;
    let chunk = batch.len().div_ceil(micro_batches.max(1)).max(1);
    for part in batch.chunks(chunk) {
        let results = exec::try_map(parallel, part.to_vec(), |s: &Sample| -> Result<_> {
            let images = s.render(low, high)?;
            let mut g = Graph::with_frozen(frozen.iter().cloned());
            let out = forward_loss(&mut g, cfg, &model.params, &images, &s.tokens, stage)?;
            let l = g.value(out.loss).data()[0] as f64;
            g.backward(out.loss)?;
            Ok((l, g.param_grads()))
        })?;
        for (l, grads) in results {
            loss += l;
            for (name, gt) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gt.data())
                        .for_each(|(a, b)| *a += b),
                    None => {
                        sum.insert(name, gt);
                    }
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for t in sum.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss / batch.len() as f64, sum))
}

fn train_loop(
    model: &mut MraModel,
    cfg: &StageConfig,
    data: &[Sample],
    seed: u64,
) -> Result<(AdamW, Vec<MetricsRow>, RngState)> {
    if data.is_empty() && cfg.steps_for(0) > 0 {
        return Err(Error::config("training set is empty"));
    }
    let frozen = cfg.frozen_groups();
    let total = cfg.steps_for(data.len());
    let mut rng = substream(seed, stream::TRAINING);
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut metrics = Vec::with_capacity(total);
    let visual = model.config.visual_tokens()?;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..total {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(
            model,
            cfg.stage,
            &frozen,
            &batch,
            cfg.grad_accum,
            cfg.parallel,
        )?;
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("stage {} step {step}", cfg.stage)));
        }
        let lr = cfg.learning_rate_at(step, total);
        opt.update(&mut model.params, &grads, lr)?;
        let tokens = batch
            .iter()
            .map(|s| visual + s.tokens.text_len())
            .max()
            .unwrap_or(visual);
        log::debug!(
            "stage {} step {step}: loss {loss:.4} lr {lr:.3e}",
            cfg.stage
        );
        metrics.push(MetricsRow {
            step,
            stage: cfg.stage,
            loss,
            learning_rate: lr,
            tokens_in_context: tokens,
        });
    }
    Ok((opt, metrics, RngState::capture(&rng)))
}

fn finish(
    model: MraModel,
    stage: Stage,
    opt: AdamW,
    metrics: Vec<MetricsRow>,
    rng: RngState,
) -> StageOutcome {
    StageOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta {
                config: model.config,
                stage,
                step: opt.step,
                rng: Some(rng),
            },
            params: model.params,
            first_moment: opt.first_moment,
            second_moment: opt.second_moment,
        },
        metrics,
    }
}

/// Stage 1 on a freshly initialized model without adapters.
pub fn run_stage1(
    mut model: MraModel,
    cfg: &StageConfig,
    data: &[Sample],
    seed: u64,
) -> Result<StageOutcome> {
    if cfg.stage != Stage::One {
        return Err(Error::config(format!(
            "stage-1 run given a stage-{} config",
            cfg.stage
        )));
    }
    if model.params.has_group("adapter") {
        return Err(Error::config(
            "adapter parameters must not exist in stage 1",
        ));
    }
    let mut errs = Vec::new();
    cfg.validate("train.stage1", &mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    model.set_resolutions(cfg.low_resolution, cfg.high_resolution)?;
    let (opt, metrics, rng) = train_loop(&mut model, cfg, data, seed)?;
    Ok(finish(model, Stage::One, opt, metrics, rng))
}

/// The stage-2 starting point: the stage-1 model at the new resolutions with
/// identity adapters inserted.
pub fn prepare_stage2(checkpoint: &Checkpoint, cfg: &StageConfig, seed: u64) -> Result<MraModel> {
    if cfg.stage != Stage::Two {
        return Err(Error::config(format!(
            "stage-2 run given a stage-{} config",
            cfg.stage
        )));
    }
    if checkpoint.meta.stage != Stage::One {
        return Err(Error::config(format!(
            "stage 2 needs a stage-1 checkpoint, got stage {}",
            checkpoint.meta.stage
        )));
    }
    let mut errs = Vec::new();
    cfg.validate("train.stage2", &mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let target = checkpoint
        .meta
        .config
        .at_resolutions(cfg.low_resolution, cfg.high_resolution);
    if target.high_pathway {
        target.check_alignment()?;
    } else {
        target.low.grid()?;
    }
    let mut model = MraModel {
        config: checkpoint.meta.config.clone(),
        params: checkpoint.params.clone(),
    };
    model.set_resolutions(cfg.low_resolution, cfg.high_resolution)?;
    if model.config.high_pathway {
        model.insert_adapters(&mut substream(seed, "init.adapter"))?;
    }
    Ok(model)
}

pub fn run_stage2(
    checkpoint: &Checkpoint,
    cfg: &StageConfig,
    data: &[Sample],
    seed: u64,
) -> Result<StageOutcome> {
    let mut model = prepare_stage2(checkpoint, cfg, seed)?;
    let (opt, metrics, rng) = train_loop(&mut model, cfg, data, seed)?;
    Ok(finish(model, Stage::Two, opt, metrics, rng))
}

/// SHA-256 of each named group's parameters.
pub fn frozen_params_digest(
    params: &ParamStore<f32>,
    groups: &[&str],
) -> Result<BTreeMap<String, String>> {
    groups
        .iter()
        .map(|&g| {
            if params.has_group(g) {
                Ok((g.to_string(), params.group_digest(g)))
            } else {
                Err(Error::UnknownGroup(g.to_string()))
            }
        })
        .collect()
}

/// Share of samples whose greedy answer matches exactly.
pub fn evaluate_accuracy(
    model: &MraModel,
    stage: Stage,
    samples: &[Sample],
    parallel: bool,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let (low, high) = (model.config.low.resolution, model.config.high.resolution);
    let hits = exec::try_map(
        parallel,
        samples.iter().collect(),
        |s: &Sample| -> Result<bool> {
            let images = s.render(low, high)?;
            let out = generate(
                &model.config,
                &model.params,
                &images,
                &s.tokens.instruction,
                stage,
                s.tokens.answer.len() + 1,
            )?;
            Ok(out == s.tokens.answer)
        },
    )?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

/// Mean loss of `model` over `samples` without updating anything.
pub fn evaluate_loss(
    model: &MraModel,
    stage: Stage,
    samples: &[Sample],
    parallel: bool,
) -> Result<f64> {
    let (low, high) = (model.config.low.resolution, model.config.high.resolution);
    let losses = exec::try_map(
        parallel,
        samples.iter().collect(),
        |s: &Sample| -> Result<f64> {
            let images = s.render(low, high)?;
            let mut g = Graph::new();
            let out = forward_loss(
                &mut g,
                &model.config,
                &model.params,
                &images,
                &s.tokens,
                stage,
            )?;
            Ok(g.value(out.loss).data()[0] as f64)
        },
    )?;
    Ok(losses.iter().sum::<f64>() / samples.len().max(1) as f64)
}

/// Both stages from a fresh initialization, as described by `cfg`.
pub fn run_pipeline(
    cfg: &crate::config::RunConfig,
    data: &[Sample],
) -> Result<(StageOutcome, StageOutcome)> {
    let model = MraModel::init(
        cfg.model_config(Stage::One),
        &mut substream(cfg.seed, stream::INIT),
    )?;
    let s1 = run_stage1(model, &cfg.stage_config(Stage::One), data, cfg.seed)?;
    let s2 = run_stage2(
        &s1.checkpoint,
        &cfg.stage_config(Stage::Two),
        data,
        cfg.seed,
    )?;
    Ok((s1, s2))
}
