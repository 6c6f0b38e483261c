//! Run configuration: one TOML document describing the model, both training
//! stages, the synthetic data, cost profiling and output paths. Parsing is
//! strict and validation reports every violation with its field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::cost::{paper_scale_model, table1_profile, Arch, ProfileEntry};
use crate::error::{Error, Result};
use crate::model::{DecoderConfig, ModelConfig, Stage};
use crate::pathways::{
    output_grid_shape, HighResPathwayConfig, LowResPathwayConfig, CNN_STRIDE, VIT_STRIDE,
};
use crate::rng::{stream, substream};
use crate::synth::{generate_samples, load_manifest, sample_task, Sample, TaskConfig};
use crate::train::{OptimizerConfig, StageConfig};

fn d_true() -> bool {
    true
}
fn d_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolutions {
    /// `[low, high]` for stage 1.
    pub stage1: [usize; 2],
    /// `[low, high]` for stage 2; the two grids must match.
    pub stage2: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub resolutions: Resolutions,
    #[serde(default = "d_true")]
    pub high_pathway: bool,
    pub low: LowResPathwayConfig,
    pub high: HighResPathwayConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub projector_hidden: Option<usize>,
    pub decoder: DecoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "d_one")]
    pub grad_accum: usize,
    #[serde(default = "d_one")]
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "d_true")]
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1: Schedule,
    pub stage2: Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub task: TaskConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfilePreset {
    /// Baseline and MRA rows for the four large-scale resolution pairs.
    Table1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileScale {
    /// Large-scale architecture widths.
    #[default]
    Paper,
    /// The architecture in this file's model section.
    Run,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub name: String,
    pub arch: Arch,
    pub low_resolution: usize,
    #[serde(default)]
    pub high_resolution: Option<usize>,
    #[serde(default)]
    pub scale: ProfileScale,
}

fn d_text() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    #[serde(default)]
    pub preset: Option<ProfilePreset>,
    #[serde(default)]
    pub entries: Vec<ProfileSpec>,
    #[serde(default = "d_text")]
    pub text_tokens: usize,
    /// Overrides the decoder context length of every profiled entry.
    #[serde(default)]
    pub context_length: Option<usize>,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            preset: Some(ProfilePreset::Table1),
            entries: Vec::new(),
            text_tokens: d_text(),
            context_length: None,
        }
    }
}

fn d_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "d_out")]
    pub output_dir: PathBuf,
    /// Stage-1 checkpoint that stage 2 starts from.
    #[serde(default)]
    pub stage1_checkpoint: Option<PathBuf>,
    /// Training manifest; samples are generated from the seed when absent.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            output_dir: d_out(),
            stage1_checkpoint: None,
            manifest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses and fully validates `text`; `origin` names it in errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map_or(0, |s| s.start.min(text.len()));
            let before = &text[..at];
            Error::Syntax {
                path: origin.to_path_buf(),
                line: before.matches('\n').count() + 1,
                column: before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1,
                detail: e.message().trim_end().to_string(),
            }
        })?;
        let errs = cfg.violations();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn resolutions(&self, stage: Stage) -> [usize; 2] {
        match stage {
            Stage::One => self.model.resolutions.stage1,
            Stage::Two => self.model.resolutions.stage2,
        }
    }

    /// Architecture at the given stage's resolutions.
    pub fn model_config(&self, stage: Stage) -> ModelConfig {
        let m = &self.model;
        let [low, high] = self.resolutions(stage);
        ModelConfig {
            low: m.low.clone(),
            high: m.high.clone(),
            high_pathway: m.high_pathway,
            adapter: m.adapter.clone(),
            projector_hidden: m.projector_hidden,
            decoder: m.decoder.clone(),
        }
        .at_resolutions(low, high)
    }

    pub fn stage_config(&self, stage: Stage) -> StageConfig {
        let s = match stage {
            Stage::One => &self.train.stage1,
            Stage::Two => &self.train.stage2,
        };
        let [low, high] = self.resolutions(stage);
        StageConfig {
            stage,
            low_resolution: low,
            high_resolution: high,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            grad_accum: s.grad_accum,
            epochs: s.epochs,
            max_steps: s.max_steps,
            optimizer: s.optimizer.clone(),
            parallel: s.parallel,
        }
    }

    /// Training samples: the configured manifest when present, otherwise
    /// generated from the run seed.
    pub fn train_set(&self) -> Result<Vec<Sample>> {
        if let Some(path) = &self.paths.manifest {
            let (task, _, samples) = load_manifest(path)?;
            if task != self.data.task {
                return Err(Error::config(format!(
                    "paths.manifest: {} was generated for a different data.task",
                    path.display()
                )));
            }
            return Ok(samples);
        }
        let base = rand::RngCore::next_u64(&mut substream(self.seed, stream::DATA));
        generate_samples(
            &self.data.task,
            self.model.decoder.vocab_size,
            base,
            self.data.train_samples,
        )
    }

    /// Held-out samples drawn from a separate substream.
    pub fn eval_set(&self) -> Result<Vec<Sample>> {
        let base = rand::RngCore::next_u64(&mut substream(self.seed, "data.eval"));
        generate_samples(
            &self.data.task,
            self.model.decoder.vocab_size,
            base,
            self.data.eval_samples,
        )
    }

    pub fn profile_entries(&self) -> Result<Vec<ProfileEntry>> {
        let p = &self.profile;
        let mut out = match p.preset {
            Some(ProfilePreset::Table1) => table1_profile(p.text_tokens),
            None => Vec::new(),
        };
        for e in &p.entries {
            let high = e.high_resolution.unwrap_or(0);
            let model = match e.scale {
                ProfileScale::Paper => paper_scale_model(e.arch, e.low_resolution, high),
                ProfileScale::Run => ModelConfig {
                    high_pathway: e.arch == Arch::Mra,
                    ..self.model_config(Stage::Two)
                }
                .at_resolutions(e.low_resolution, high),
            };
            out.push(ProfileEntry {
                name: e.name.clone(),
                model,
                text_tokens: p.text_tokens,
            });
        }
        if let Some(c) = p.context_length {
            for e in &mut out {
                e.model.decoder.context_length = c;
            }
        }
        Ok(out)
    }

    /// Every semantic problem, each prefixed with its field path.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let m = &self.model;
        if m.low.resolution != 0 || m.high.resolution != 0 {
            errs.push("model.low.resolution / model.high.resolution: set resolutions under model.resolutions".into());
        }
        self.model_config(Stage::Two)
            .validate_arch("model", &mut errs);
        for (stage, key) in [(Stage::One, "stage1"), (Stage::Two, "stage2")] {
            let [low, high] = self.resolutions(stage);
            let path = format!("model.resolutions.{key}");
            let lg = output_grid_shape(low, m.low.patch_stride);
            if let Err(e) = &lg {
                errs.push(format!("{path}: low {e}"));
            }
            let hg = if m.high_pathway {
                let stride = m.high.total_stride();
                let hg = output_grid_shape(high, stride);
                if let Err(e) = &hg {
                    errs.push(format!("{path}: high {e}"));
                }
                hg.ok()
            } else {
                None
            };
            if let (Stage::Two, Ok(lg), Some(hg)) = (stage, &lg, hg) {
                if lg.h != hg.h {
                    errs.push(format!(
                        "{path}: low {low} gives a {}x{} grid (/{}) but high {high} gives {}x{} (/{}); {} ≠ {}",
                        lg.h,
                        lg.w,
                        m.low.patch_stride,
                        hg.h,
                        hg.w,
                        m.high.total_stride(),
                        lg.h,
                        hg.h
                    ));
                }
            }
            if let Ok(lg) = lg {
                if let Ok(s) = sample_task(0, &self.data.task, m.decoder.vocab_size) {
                    let needed = lg.token_count + s.tokens.text_len();
                    if needed > m.decoder.context_length {
                        errs.push(format!(
                            "model.decoder.context_length: {} is below the {needed} tokens stage {} needs ({} visual + {} text)",
                            m.decoder.context_length,
                            stage,
                            lg.token_count,
                            s.tokens.text_len()
                        ));
                    }
                }
            }
        }
        let mut stage_errs = Vec::new();
        self.stage_config(Stage::One)
            .validate("train.stage1", &mut stage_errs);
        self.stage_config(Stage::Two)
            .validate("train.stage2", &mut stage_errs);
        errs.extend(stage_errs);
        self.data.task.validate("data.task", &mut errs);
        let need = self.data.task.vocab().required_model_vocab();
        if m.decoder.vocab_size < need {
            errs.push(format!(
                "model.decoder.vocab_size: {} is too small; the task needs {need} tokens including the end token",
                m.decoder.vocab_size
            ));
        }
        if self.data.train_samples == 0 {
            errs.push("data.train_samples: must be positive".into());
        }
        let p = &self.profile;
        if p.preset.is_none() && p.entries.is_empty() {
            errs.push("profile: needs a preset or at least one entry".into());
        }
        for (i, e) in p.entries.iter().enumerate() {
            let path = format!("profile.entries[{i}]");
            if let Err(e) = output_grid_shape(e.low_resolution, VIT_STRIDE) {
                errs.push(format!("{path}.low_resolution: {e}"));
            }
            match (e.arch, e.high_resolution) {
                (Arch::Mra, None) => {
                    errs.push(format!("{path}.high_resolution: required for mra entries"))
                }
                (Arch::Mra, Some(h)) => {
                    if let Err(e) = output_grid_shape(h, CNN_STRIDE) {
                        errs.push(format!("{path}.high_resolution: {e}"));
                    }
                }
                (Arch::BaselineVit, Some(_)) => errs.push(format!(
                    "{path}.high_resolution: baseline entries have no high pathway"
                )),
                (Arch::BaselineVit, None) => {}
            }
        }
        if p.context_length == Some(0) {
            errs.push("profile.context_length: must be positive".into());
        }
        errs
    }
}
