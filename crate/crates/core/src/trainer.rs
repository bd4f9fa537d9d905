//! Stage-1 optimization: alternating adversary ascent and encoder/decoder
//! descent, with deterministic stream ordering, evaluation, and resumable
//! state.
//!
//! Stream discipline: one root generator per run, split by fixed labels into
//! batch / prior / triplet streams whose states travel with checkpoints, plus
//! stateless per-iteration evaluation streams. Two runs with the same seed and
//! config therefore produce bitwise-identical histories.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Result, VdlError};
use crate::losses::{
    adv_d_grads, adv_d_value, adv_g_value, dv_critic_grads, dv_dual_value, gf_side_and_grads,
    r1_penalty, r1_penalty_and_grads, rkd_loss_and_grads, sample_triplets, semi_loss_and_grads,
    sigmoid, Divergence, DvEma, LossWeights,
};
use crate::metrics::MetricsReport;
use crate::net::{adam_step, AdamState, DenseNet};
use crate::numerics::Rng;
use crate::sampler::{svdl_forward, SvdlConfig};

/// Everything optimized in stage 1.
#[derive(Debug, Clone, PartialEq)]
pub struct VdlModel {
    /// Encoder: image embedding -> text-embedding perturbation direction.
    pub g: DenseNet,
    /// Decoder: estimated text embedding -> image-embedding direction.
    pub f: DenseNet,
    /// JS discriminator.
    pub d: DenseNet,
    /// DV critic, present only in DV mode.
    pub t: Option<DenseNet>,
    pub svdl: SvdlConfig,
    pub weights: LossWeights,
}

impl VdlModel {
    /// The network playing the adversary role for the configured divergence.
    pub fn adversary(&self) -> &DenseNet {
        match self.weights.divergence {
            Divergence::Js => &self.d,
            Divergence::Dv => self.t.as_ref().expect("DV mode carries a critic"),
        }
    }

    fn adversary_mut(&mut self) -> &mut DenseNet {
        match self.weights.divergence {
            Divergence::Js => &mut self.d,
            Divergence::Dv => self.t.as_mut().expect("DV mode carries a critic"),
        }
    }

    pub fn params_finite(&self) -> bool {
        self.g.params_finite()
            && self.f.params_finite()
            && self.d.params_finite()
            && self.t.as_ref().is_none_or(|t| t.params_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub batch: usize,
    pub iters: u64,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub d_steps_per_g_step: usize,
    pub semi_ratio: f64,
    pub deterministic: bool,
    /// Hidden width of G/F/adversary.
    pub width: usize,
    /// Number of linear layers in G and F.
    pub depth: usize,
    /// Number of linear layers in the adversary.
    pub adv_depth: usize,
    /// Leaky-ReLU negative slope.
    pub alpha: f64,
    /// Apply R1 every this many iterations.
    pub r1_every: u64,
    /// Rows reserved from the end of the dataset for held-out evaluation.
    pub eval_holdout: usize,
    pub weights: LossWeights,
    pub svdl: SvdlConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 32,
            batch: 64,
            iters: 5000,
            lr: 1e-3,
            seed: 42,
            eval_every: 250,
            d_steps_per_g_step: 1,
            semi_ratio: 0.0,
            deterministic: true,
            width: 128,
            depth: 10,
            adv_depth: 4,
            alpha: 0.2,
            r1_every: 1,
            eval_holdout: 512,
            weights: LossWeights::default(),
            svdl: SvdlConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 4 {
            return Err(VdlError::RangeError {
                what: "batch",
                value: self.batch as f64,
            });
        }
        if self.d < 2 {
            return Err(VdlError::RangeError {
                what: "d",
                value: self.d as f64,
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(VdlError::RangeError {
                what: "lr",
                value: self.lr,
            });
        }
        if !(0.0..=1.0).contains(&self.semi_ratio) {
            return Err(VdlError::RangeError {
                what: "semi_ratio",
                value: self.semi_ratio,
            });
        }
        if self.eval_every == 0 || self.r1_every == 0 {
            return Err(VdlError::RangeError {
                what: "eval_every/r1_every",
                value: 0.0,
            });
        }
        if self.depth < 1 || self.adv_depth < 1 {
            return Err(VdlError::RangeError {
                what: "depth",
                value: self.depth as f64,
            });
        }
        self.weights.validate()?;
        self.svdl.validate()
    }
}

pub fn init_model(config: &TrainConfig) -> Result<VdlModel> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let gf_sizes = DenseNet::mlp_sizes(config.d, config.width, config.depth, config.d);
    let adv_sizes = DenseNet::mlp_sizes(config.d, config.width, config.adv_depth, 1);
    let g = DenseNet::init(&mut root.split("init.g"), &gf_sizes, config.alpha);
    let f = DenseNet::init(&mut root.split("init.f"), &gf_sizes, config.alpha);
    let d = DenseNet::init(&mut root.split("init.d"), &adv_sizes, config.alpha);
    let t = match config.weights.divergence {
        Divergence::Js => None,
        Divergence::Dv => Some(DenseNet::init(
            &mut root.split("init.t"),
            &adv_sizes,
            config.alpha,
        )),
    };
    Ok(VdlModel {
        g,
        f,
        d,
        t,
        svdl: config.svdl,
        weights: config.weights,
    })
}

/// Complete resumable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: VdlModel,
    pub adam_g: AdamState,
    pub adam_f: AdamState,
    pub adam_adv: AdamState,
    pub dv_ema: DvEma,
    pub iteration: u64,
    pub config: TrainConfig,
    pub rng_batch: Rng,
    pub rng_prior: Rng,
    pub rng_triplet: Rng,
    pub history: Vec<MetricsReport>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<TrainState> {
        let model = init_model(&config)?;
        let root = Rng::new(config.seed);
        let adam_g = AdamState::new(&model.g, config.lr);
        let adam_f = AdamState::new(&model.f, config.lr);
        let adam_adv = AdamState::new(model.adversary(), config.lr);
        Ok(TrainState {
            adam_g,
            adam_f,
            adam_adv,
            model,
            dv_ema: DvEma::default(),
            iteration: 0,
            rng_batch: root.split("stream.batch"),
            rng_prior: root.split("stream.prior"),
            rng_triplet: root.split("stream.triplet"),
            config,
            history: Vec::new(),
        })
    }
}

/// Training/held-out split: the last `eval_holdout` rows (capped at a quarter
/// of the data) are never used for gradient steps.
pub fn split_holdout(data: &PairedDataset, eval_holdout: usize) -> (PairedDataset, PairedDataset) {
    let n = data.len();
    let k = eval_holdout.min(n / 4).max(1.min(n.saturating_sub(1)));
    let cut = n - k;
    let part = |lo: usize, hi: usize| PairedDataset {
        images: data.images.slice(ndarray::s![lo..hi, ..]).to_owned(),
        texts: data.texts.slice(ndarray::s![lo..hi, ..]).to_owned(),
        labeled: data.labeled[lo..hi].to_vec(),
        content: data.content.slice(ndarray::s![lo..hi, ..]).to_owned(),
        retries: 0,
    };
    (part(0, cut), part(cut, n))
}

fn select_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(0), idx)
}

/// One full evaluation snapshot of the model.
pub fn eval_model(
    model: &VdlModel,
    heldout: &PairedDataset,
    prior_sub: &Array2<f64>,
    labeled: Option<(&Array2<f64>, &Array2<f64>)>,
    iteration: u64,
    rng: &mut Rng,
) -> Result<MetricsReport> {
    if heldout.is_empty() {
        return Err(VdlError::MissingLabels);
    }
    let (zhat_txt, cache_g) = svdl_forward(heldout.images.view(), &model.g, model.svdl.r_txt)?;
    let sim_txt = crate::metrics::sim_txt(zhat_txt.view(), heldout.texts.view())?;
    let sim_img = crate::metrics::sim_img(
        &model.f,
        model.svdl.r_img,
        heldout.texts.view(),
        heldout.images.view(),
    )?;
    let (zhat_img, cache_f) = svdl_forward(zhat_txt.view(), &model.f, model.svdl.r_img)?;
    let (loss_recon, _) = crate::losses::recon_loss_and_grads(
        heldout.images.view(),
        zhat_img.view(),
        model.weights.sigma,
    )?;

    let adv = model.adversary();
    let (loss_adv_d, loss_adv_g) = match model.weights.divergence {
        Divergence::Js => (
            adv_d_value(adv, prior_sub.view(), zhat_txt.view())?,
            adv_g_value(adv, zhat_txt.view(), model.weights.gen_mode)?,
        ),
        Divergence::Dv => {
            let v = dv_dual_value(adv, zhat_txt.view(), prior_sub.view())?;
            (v, v)
        }
    };
    let logits = |batch: ndarray::ArrayView2<f64>| -> Result<f64> {
        let (y, _) = adv.forward(batch)?;
        Ok(y.iter().map(|&x| sigmoid(x)).sum::<f64>() / y.len() as f64)
    };
    let d_mean_real = logits(prior_sub.view())?;
    let d_mean_fake = logits(zhat_txt.view())?;

    let triplets = sample_triplets(heldout.len().min(64), rng);
    let sub = heldout.len().min(64);
    let (loss_rkd, _, degenerate_triplets) = rkd_loss_and_grads(
        heldout.images.slice(ndarray::s![..sub, ..]),
        zhat_txt.slice(ndarray::s![..sub, ..]),
        &triplets,
        model.weights.delta,
    )?;

    let loss_semi = match labeled {
        Some((imgs, txts)) if imgs.nrows() > 0 => {
            let (zh, _) = svdl_forward(imgs.view(), &model.g, model.svdl.r_txt)?;
            let mask = vec![true; imgs.nrows()];
            semi_loss_and_grads(zh.view(), txts.view(), &mask)?.0
        }
        _ => 0.0,
    };
    let loss_r1 = r1_penalty(adv, prior_sub.view(), model.weights.gamma_r1)?;

    let report = MetricsReport {
        iteration,
        sim_txt,
        sim_img,
        loss_adv_d,
        loss_adv_g,
        loss_recon,
        loss_rkd,
        loss_semi,
        loss_r1,
        d_mean_real,
        d_mean_fake,
        degenerate_svdl: (cache_g.degenerate_rows.len() + cache_f.degenerate_rows.len()) as u64,
        degenerate_triplets: degenerate_triplets as u64,
    };
    for (v, term) in [
        (report.sim_txt, "sim_txt"),
        (report.sim_img, "sim_img"),
        (report.loss_adv_d, "loss_adv_d"),
        (report.loss_adv_g, "loss_adv_g"),
        (report.loss_recon, "loss_recon"),
        (report.loss_rkd, "loss_rkd"),
        (report.loss_semi, "loss_semi"),
        (report.loss_r1, "loss_r1"),
    ] {
        if !v.is_finite() {
            return Err(VdlError::NonFiniteLoss {
                iteration: iteration as usize,
                term,
            });
        }
    }
    Ok(report)
}

/// Continue a state to `config.iters`. Fresh states run from iteration 0;
/// loaded states resume exactly where they stopped.
pub fn train(state: &mut TrainState, data: &PairedDataset, prior_pool: &Array2<f64>) -> Result<()> {
    let config = state.config.clone();
    config.validate()?;
    if data.dim() != config.d {
        return Err(VdlError::ShapeMismatch {
            expected: config.d.to_string(),
            got: data.dim().to_string(),
            context: "train data dim",
        });
    }
    if prior_pool.nrows() == 0 {
        return Err(VdlError::EmptyPool);
    }
    if config.semi_ratio > 0.0 && !data.labeled.iter().any(|&b| b) {
        return Err(VdlError::MissingLabels);
    }

    let (train_set, heldout) = split_holdout(data, config.eval_holdout);
    let n_train = train_set.len();
    let prior_eval = prior_pool
        .slice(ndarray::s![..prior_pool.nrows().min(512), ..])
        .to_owned();
    let labeled_idx: Vec<usize> = train_set
        .labeled
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .take(512)
        .collect();
    let labeled_eval = if labeled_idx.is_empty() {
        None
    } else {
        Some((
            select_rows(&train_set.images, &labeled_idx),
            select_rows(&train_set.texts, &labeled_idx),
        ))
    };

    let root = Rng::new(config.seed);
    let record = |state: &mut TrainState, iter: u64| -> Result<()> {
        let mut eval_rng = root.split(&format!("eval.{iter}"));
        let report = eval_model(
            &state.model,
            &heldout,
            &prior_eval,
            labeled_eval.as_ref().map(|(a, b)| (a, b)),
            iter,
            &mut eval_rng,
        )?;
        if !state.model.params_finite() {
            return Err(VdlError::NonFiniteLoss {
                iteration: iter as usize,
                term: "parameters",
            });
        }
        state.history.push(report);
        Ok(())
    };

    if state.iteration == 0 && state.history.is_empty() {
        record(state, 0)?;
    }

    while state.iteration < config.iters {
        let i = state.iteration;

        // Image batch.
        let idx: Vec<usize> = (0..config.batch)
            .map(|_| state.rng_batch.next_index(n_train))
            .collect();
        let z_img = select_rows(&train_set.images, &idx);
        let z_txt = select_rows(&train_set.texts, &idx);
        let mask: Vec<bool> = idx.iter().map(|&j| train_set.labeled[j]).collect();

        // Current fakes for the adversary (no gradient to G needed here).
        let (fakes, _) = svdl_forward(z_img.view(), &state.model.g, state.model.svdl.r_txt)?;

        // Adversary ascent, fresh prior batch per step.
        for _ in 0..config.d_steps_per_g_step.max(1) {
            let pidx: Vec<usize> = (0..config.batch)
                .map(|_| state.rng_prior.next_index(prior_pool.nrows()))
                .collect();
            let priors = select_rows(prior_pool, &pidx);
            let adv = state.model.adversary();
            let (value, mut grads) = match config.weights.divergence {
                Divergence::Js => adv_d_grads(adv, priors.view(), fakes.view())?,
                Divergence::Dv => {
                    dv_critic_grads(adv, fakes.view(), priors.view(), Some(&mut state.dv_ema))?
                }
            };
            if !value.is_finite() {
                return Err(VdlError::NonFiniteLoss {
                    iteration: i as usize,
                    term: "adv_d",
                });
            }
            grads.scale(-1.0); // ascend
            if config.weights.gamma_r1 > 0.0 && i.is_multiple_of(config.r1_every) {
                let (p, r1) = r1_penalty_and_grads(adv, priors.view(), config.weights.gamma_r1)?;
                if !p.is_finite() {
                    return Err(VdlError::NonFiniteLoss {
                        iteration: i as usize,
                        term: "r1",
                    });
                }
                grads.add_assign(&r1);
            }
            adam_step(state.model.adversary_mut(), &grads, &mut state.adam_adv)?;
        }

        // Encoder/decoder descent.
        let triplets = sample_triplets(config.batch, &mut state.rng_triplet);
        let (terms, grad_g, grad_f, _, _) = gf_side_and_grads(
            &state.model.g,
            &state.model.f,
            state.model.adversary(),
            &config.weights,
            &state.model.svdl,
            z_img.view(),
            Some((&mask, z_txt.view())),
            &triplets,
        )?;
        if !terms.total.is_finite() {
            return Err(VdlError::NonFiniteLoss {
                iteration: i as usize,
                term: "stage1_total",
            });
        }
        adam_step(&mut state.model.g, &grad_g, &mut state.adam_g)?;
        adam_step(&mut state.model.f, &grad_f, &mut state.adam_f)?;

        state.iteration += 1;
        if state.iteration.is_multiple_of(config.eval_every) || state.iteration == config.iters {
            record(state, state.iteration)?;
        }
    }
    Ok(())
}

/// Train from scratch per the stage-1 schedule.
pub fn train_stage1(
    config: TrainConfig,
    data: &PairedDataset,
    prior_pool: &Array2<f64>,
) -> Result<(VdlModel, Vec<MetricsReport>)> {
    let mut state = TrainState::new(config)?;
    train(&mut state, data, prior_pool)?;
    Ok((state.model, state.history))
}

/// Semi-supervised variant: identical loop, requires labeled rows.
pub fn train_semi(
    config: TrainConfig,
    data: &PairedDataset,
    prior_pool: &Array2<f64>,
) -> Result<(VdlModel, Vec<MetricsReport>)> {
    if config.semi_ratio > 0.0 && !data.labeled.iter().any(|&b| b) {
        return Err(VdlError::MissingLabels);
    }
    train_stage1(config, data, prior_pool)
}
