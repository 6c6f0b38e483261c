//! Finite-difference gradient checks over each trainable component and the
//! whole model, as run by the command-line `gradcheck` command.

use std::collections::BTreeMap;

use rand::Rng;

use crate::adapter::{fuse, init_adapter};
use crate::error::{Error, Result};
use crate::model::{forward_loss, ImagePair, ModelConfig, MraModel, Stage, TokenSequence};
use crate::pathways::{high_res_forward, init_high_res, init_low_res, low_res_forward};
use crate::rng::substream;
use crate::tensor::{grad_check, GradCheckConfig, GradCheckReport, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub suite: String,
    pub reports: Vec<GradCheckReport>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.reports.iter().map(|r| r.checked).sum()
    }
}

/// Adds small uniform noise to every parameter so zero-initialized tensors
/// still exercise their gradient paths.
pub fn perturb<R: Rng + ?Sized>(p: &mut ParamStore<f32>, rng: &mut R, scale: f64) {
    for (_, t) in p.iter_mut() {
        let noise = Tensor::<f32>::uniform(t.shape(), -scale, scale, rng);
        t.data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(v, n)| *v += n);
    }
}

fn weighted_sum(g: &mut Graph<f64>, x: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = g.constant(w.clone())?;
    let y = g.mul(x, c)?;
    g.sum(y)
}

type LossFn<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync + 'a;

/// Runs the low pathway, high pathway, adapter and end-to-end checks for
/// `cfg`, whose resolutions must already be set and aligned.
pub fn gradient_suite(
    cfg: &ModelConfig,
    seed: u64,
    check: &GradCheckConfig,
) -> Result<Vec<SuiteResult>> {
    if !cfg.high_pathway {
        return Err(Error::config(
            "the gradient suite needs the high-resolution pathway",
        ));
    }
    cfg.check_alignment()?;
    let mut rng = substream(seed, "gradcheck");
    let (lr, hr) = (cfg.low.resolution, cfg.high.resolution);
    let images = ImagePair {
        low: Tensor::<f32>::uniform(&[lr, lr, 3], 0.0, 1.0, &mut rng),
        high: Tensor::<f32>::uniform(&[hr, hr, 3], 0.0, 1.0, &mut rng),
    }
    .cast::<f64>();
    let lg = cfg.low.grid()?;
    let hg = cfg.high.grid()?;
    let mut out = Vec::new();
    let mut run = |suite: &str, p: ParamStore<f32>, f: &LossFn<'_>| {
        let reports = grad_check(f, &p.cast::<f64>(), check)?;
        out.push(SuiteResult {
            suite: suite.to_string(),
            reports,
        });
        Result::Ok(())
    };

    let mut p = ParamStore::new();
    init_low_res(&mut p, &mut rng, &cfg.low)?;
    perturb(&mut p, &mut rng, 0.1);
    let w = Tensor::<f64>::uniform(&[lg.h, lg.w, cfg.low.width], -1.0, 1.0, &mut rng);
    run("low_pathway", p, &|g, p| {
        let x = g.constant(images.low.clone())?;
        let o = low_res_forward(g, p, &cfg.low, x, &mut BTreeMap::new())?.output;
        weighted_sum(g, o, &w)
    })?;

    let mut p = ParamStore::new();
    init_high_res(&mut p, &mut rng, &cfg.high)?;
    perturb(&mut p, &mut rng, 0.1);
    let w = Tensor::<f64>::uniform(&[hg.h, hg.w, cfg.high.out_width()], -1.0, 1.0, &mut rng);
    run("high_pathway", p, &|g, p| {
        let x = g.constant(images.high.clone())?;
        let o = high_res_forward(g, p, &cfg.high, x)?;
        weighted_sum(g, o, &w)
    })?;

    let dims = cfg.adapter_dims();
    let mut p = ParamStore::new();
    init_adapter(&mut p, &mut rng, "adapter", &cfg.adapter, dims);
    perturb(&mut p, &mut rng, 0.3);
    let low = Tensor::<f64>::uniform(&[lg.h, lg.w, dims.low], -1.0, 1.0, &mut rng);
    let high = Tensor::<f64>::uniform(&[hg.h, hg.w, dims.high], -1.0, 1.0, &mut rng);
    let target = dims.target(&cfg.adapter);
    let w = Tensor::<f64>::uniform(&[lg.h, lg.w, target], -1.0, 1.0, &mut rng);
    run("adapter", p, &|g, p| {
        let (l, h) = (g.input(low.clone())?, g.input(high.clone())?);
        let o = fuse(g, p, "adapter", &cfg.adapter, l, h)?;
        weighted_sum(g, o, &w)
    })?;

    let vocab = cfg.decoder.vocab_size;
    let tokens = TokenSequence {
        instruction: vec![1 % vocab, 2 % vocab],
        answer: vec![3 % vocab],
    };
    for stage in [Stage::One, Stage::Two] {
        let mut m = MraModel::init(cfg.clone(), &mut rng)?;
        if stage == Stage::Two {
            m.insert_adapters(&mut rng)?;
        }
        perturb(&mut m.params, &mut rng, 0.1);
        run(
            &format!("model_stage{}", stage.number()),
            m.params,
            &|g, p| Ok(forward_loss(g, cfg, p, &images, &tokens, stage)?.loss),
        )?;
    }
    Ok(out)
}
