//! Second stage: a toy conditional generator trained by MSE against a fixed
//! render of the hidden content, conditioned on [z_txt; z_img] through a
//! two-layer conditioning network. Inference reconstructs z_img from text via
//! the frozen decoder and never touches the true image embedding.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{NamedTensor, PairedDataset, RngRecord, SyntheticWorld};
use crate::error::{Result, VdlError};
use crate::net::{adam_step, AdamState, DenseNet};
use crate::numerics::{sample_gaussian, Rng, UnitVec, RNG_ALGORITHM};
use crate::sampler::{svdl_forward, svdl_sample};
use crate::trainer::VdlModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    /// Conditioning-code dimension; defaults to the embedding dim.
    pub d_c: usize,
    pub noise_dim: usize,
    pub d_x: usize,
    pub width: usize,
    pub iters: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Ablation: zero the conditioning code and freeze g.
    pub zero_conditioning: bool,
}

impl Stage2Config {
    pub fn new(d: usize) -> Stage2Config {
        Stage2Config {
            d_c: d,
            noise_dim: 8,
            d_x: 64,
            width: 64,
            iters: 2000,
            batch: 64,
            lr: 1e-3,
            seed: 42,
            zero_conditioning: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x < 1 {
            return Err(VdlError::RangeError {
                what: "d_x",
                value: self.d_x as f64,
            });
        }
        if self.batch < 1 {
            return Err(VdlError::RangeError {
                what: "batch",
                value: self.batch as f64,
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(VdlError::RangeError {
                what: "lr",
                value: self.lr,
            });
        }
        Ok(())
    }
}

/// Conditioning network g (two FC layers) plus synthesis network h.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGenerator {
    /// [z_txt; z_img] (2d) -> conditioning code (d_c).
    pub g: DenseNet,
    /// [noise; code] -> toy image vector (d_x).
    pub h: DenseNet,
    pub noise_dim: usize,
}

pub fn init_generator(config: &Stage2Config, d: usize) -> Result<ToyGenerator> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let g = DenseNet::init(
        &mut root.split("stage2.init.g"),
        &[2 * d, config.width, config.d_c],
        0.2,
    );
    let h = DenseNet::init(
        &mut root.split("stage2.init.h"),
        &[
            config.noise_dim + config.d_c,
            config.width,
            config.width,
            config.d_x,
        ],
        0.2,
    );
    Ok(ToyGenerator {
        g,
        h,
        noise_dim: config.noise_dim,
    })
}

fn hcat<'a>(a: ArrayView2<'a, f64>, b: ArrayView2<'a, f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a, b]).expect("row counts agree")
}

fn render_batch(world: &SyntheticWorld, content: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((content.nrows(), world.params.d_x));
    for (i, row) in content.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&world.render(row));
    }
    out
}

/// Train the generator by Adam on MSE between h([noise; g([zhat_txt; z_img])])
/// and the rendered content, with zhat_txt sampled fresh from the frozen
/// stage-1 encoder every step. Returns the MSE history (one entry per
/// iteration).
pub fn train_stage2(
    model: &VdlModel,
    gen: &mut ToyGenerator,
    world: &SyntheticWorld,
    data: &PairedDataset,
    config: &Stage2Config,
) -> Result<Vec<f64>> {
    config.validate()?;
    if data.dim() != world.params.d || config.d_x != world.params.d_x {
        return Err(VdlError::ShapeMismatch {
            expected: format!("{}/{}", world.params.d, world.params.d_x),
            got: format!("{}/{}", data.dim(), config.d_x),
            context: "stage2 dims",
        });
    }
    let root = Rng::new(config.seed);
    let mut rng_batch = root.split("stage2.batch");
    let mut rng_noise = root.split("stage2.noise");
    let mut adam_g = AdamState::new(&gen.g, config.lr);
    let mut adam_h = AdamState::new(&gen.h, config.lr);
    let mut history = Vec::with_capacity(config.iters as usize);

    for i in 0..config.iters {
        let idx: Vec<usize> = (0..config.batch)
            .map(|_| rng_batch.next_index(data.len()))
            .collect();
        let z_img = data.images.select(Axis(0), &idx);
        let content = data.content.select(Axis(0), &idx);
        let target = render_batch(world, content.view());

        // Fresh single-sample draw from the frozen variational distribution.
        let (zhat_txt, _) = svdl_forward(z_img.view(), &model.g, model.svdl.r_txt)?;

        let mut noise = Array2::zeros((config.batch, config.noise_dim));
        for mut row in noise.rows_mut() {
            row.assign(&sample_gaussian(&mut rng_noise, config.noise_dim));
        }

        let cond_in = hcat(zhat_txt.view(), z_img.view());
        let (code_raw, cache_g) = gen.g.forward(cond_in.view())?;
        let code = if config.zero_conditioning {
            Array2::zeros(code_raw.dim())
        } else {
            code_raw
        };
        let (x_hat, cache_h) = gen.h.forward(hcat(noise.view(), code.view()).view())?;

        let diff = &x_hat - &target;
        let n = (config.batch * config.d_x) as f64;
        let mse = diff.iter().map(|v| v * v).sum::<f64>() / n;
        if !mse.is_finite() {
            return Err(VdlError::NonFiniteLoss {
                iteration: i as usize,
                term: "stage2_mse",
            });
        }
        history.push(mse);

        let dy = diff.mapv(|v| 2.0 * v / n);
        let grads_h = gen.h.backward(&cache_h, dy.view())?;
        if !config.zero_conditioning {
            let dcode = grads_h
                .dx
                .slice(ndarray::s![.., config.noise_dim..])
                .to_owned();
            let grads_g = gen.g.backward(&cache_g, dcode.view())?;
            adam_step(&mut gen.g, &grads_g, &mut adam_g)?;
        }
        adam_step(&mut gen.h, &grads_h, &mut adam_h)?;
    }
    Ok(history)
}

/// Held-out reconstruction error of a trained generator, averaged over items
/// and one noise draw each.
pub fn eval_stage2_mse(
    model: &VdlModel,
    gen: &ToyGenerator,
    world: &SyntheticWorld,
    data: &PairedDataset,
    config: &Stage2Config,
    rng: &mut Rng,
) -> Result<f64> {
    let (zhat_txt, _) = svdl_forward(data.images.view(), &model.g, model.svdl.r_txt)?;
    let mut noise = Array2::zeros((data.len(), config.noise_dim));
    for mut row in noise.rows_mut() {
        row.assign(&sample_gaussian(rng, config.noise_dim));
    }
    let (code_raw, _) = gen
        .g
        .forward(hcat(zhat_txt.view(), data.images.view()).view())?;
    let code = if config.zero_conditioning {
        Array2::zeros(code_raw.dim())
    } else {
        code_raw
    };
    let (x_hat, _) = gen.h.forward(hcat(noise.view(), code.view()).view())?;
    let target = render_batch(world, data.content.view());
    let diff = &x_hat - &target;
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

/// Text-to-image inference. The image embedding is reconstructed from the
/// text via the frozen decoder; the true z_img is never consulted.
pub struct InferResult {
    pub image: Array1<f64>,
    /// Internal reconstructed image embedding (exposed for verification).
    pub zhat_img: UnitVec,
}

pub fn infer_t2i(
    model: &VdlModel,
    gen: &ToyGenerator,
    z_txt: &UnitVec,
    rng: &mut Rng,
) -> Result<InferResult> {
    let zhat_img = svdl_sample(z_txt, &model.f, model.svdl.r_img)?;
    let cond_in: Array1<f64> = z_txt
        .view()
        .iter()
        .chain(zhat_img.view().iter())
        .cloned()
        .collect();
    let code = gen.g.forward_one(cond_in.view())?;
    let noise = sample_gaussian(rng, gen.noise_dim);
    let h_in: Array1<f64> = noise.iter().chain(code.iter()).cloned().collect();
    let image = gen.h.forward_one(h_in.view())?;
    Ok(InferResult { image, zhat_img })
}

/// Serialize a trained generator via the common checkpoint container.
pub fn save_generator(
    path: &std::path::Path,
    gen: &ToyGenerator,
    config: &Stage2Config,
) -> Result<()> {
    let mut tensors = Vec::new();
    for (prefix, net) in [("s2g", &gen.g), ("s2h", &gen.h)] {
        for (k, l) in net.layers.iter().enumerate() {
            tensors.push(NamedTensor::from_array2(&format!("{prefix}.w{k}"), &l.w));
            tensors.push(NamedTensor::from_array1(&format!("{prefix}.b{k}"), &l.b));
        }
    }
    let rng = RngRecord {
        algorithm: RNG_ALGORITHM.into(),
        state: Rng::new(config.seed).state(),
        seed: config.seed,
    };
    let trailer = serde_json::json!({ "stage2": config });
    crate::data::write_checkpoint_container(path, &tensors, &rng, &trailer)
}

pub fn load_generator(path: &std::path::Path) -> Result<(ToyGenerator, Stage2Config)> {
    let (tensors, _, trailer) = crate::data::read_checkpoint_container(path)?;
    let config: Stage2Config = serde_json::from_value(
        trailer
            .get("stage2")
            .ok_or_else(|| VdlError::CorruptLength {
                context: "missing stage2 echo".into(),
            })?
            .clone(),
    )?;
    let take = |prefix: &str| -> Result<DenseNet> {
        let mut layers = Vec::new();
        let mut k = 0;
        loop {
            let w = tensors.iter().find(|t| t.name == format!("{prefix}.w{k}"));
            let Some(w) = w else { break };
            let b = tensors
                .iter()
                .find(|t| t.name == format!("{prefix}.b{k}"))
                .ok_or_else(|| VdlError::CorruptLength {
                    context: format!("missing {prefix}.b{k}"),
                })?;
            layers.push(crate::net::Layer {
                w: w.to_array2()?,
                b: b.to_array1()?,
            });
            k += 1;
        }
        if layers.is_empty() {
            return Err(VdlError::CorruptLength {
                context: format!("no layers under {prefix}"),
            });
        }
        Ok(DenseNet { layers, alpha: 0.2 })
    };
    Ok((
        ToyGenerator {
            g: take("s2g")?,
            h: take("s2h")?,
            noise_dim: config.noise_dim,
        },
        config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_prior_pool, make_world_with_dx, sample_pairs};
    use crate::numerics::cosine;
    use crate::trainer::{train_stage1, TrainConfig};

    fn tiny_setup() -> (
        VdlModel,
        SyntheticWorld,
        PairedDataset,
        PairedDataset,
        Stage2Config,
    ) {
        let world = make_world_with_dx(31, 8, 0.6, 0.0, 16).unwrap();
        let mut rng = Rng::new(32);
        let data = sample_pairs(&world, 512, &mut rng).unwrap();
        let heldout = sample_pairs(&world, 128, &mut rng).unwrap();
        let pool = make_prior_pool(&world, 256, &mut rng).unwrap();
        let cfg = TrainConfig {
            d: 8,
            batch: 8,
            iters: 200,
            eval_every: 100,
            width: 16,
            depth: 3,
            adv_depth: 2,
            eval_holdout: 32,
            ..TrainConfig::default()
        };
        let (model, _) = train_stage1(cfg, &data, &pool).unwrap();
        let mut s2 = Stage2Config::new(8);
        s2.d_x = 16;
        s2.width = 32;
        s2.iters = 400;
        s2.batch = 32;
        (model, world, data, heldout, s2)
    }

    #[test]
    fn zero_iters_returns_init() {
        let (model, world, data, _, mut s2) = tiny_setup();
        s2.iters = 0;
        let init = init_generator(&s2, 8).unwrap();
        let mut gen = init.clone();
        let hist = train_stage2(&model, &mut gen, &world, &data, &s2).unwrap();
        assert!(hist.is_empty());
        assert_eq!(gen, init);
    }

    #[test]
    fn training_deterministic() {
        let (model, world, data, _, s2) = tiny_setup();
        let mut g1 = init_generator(&s2, 8).unwrap();
        let mut g2 = init_generator(&s2, 8).unwrap();
        let h1 = train_stage2(&model, &mut g1, &world, &data, &s2).unwrap();
        let h2 = train_stage2(&model, &mut g2, &world, &data, &s2).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn conditioning_beats_zeroed_ablation() {
        let (model, world, data, heldout, s2) = tiny_setup();
        let mut gen = init_generator(&s2, 8).unwrap();
        train_stage2(&model, &mut gen, &world, &data, &s2).unwrap();
        let mut ablated_cfg = s2.clone();
        ablated_cfg.zero_conditioning = true;
        let mut ablated = init_generator(&ablated_cfg, 8).unwrap();
        train_stage2(&model, &mut ablated, &world, &data, &ablated_cfg).unwrap();

        let mse_c = eval_stage2_mse(&model, &gen, &world, &heldout, &s2, &mut Rng::new(9)).unwrap();
        let mse_u = eval_stage2_mse(
            &model,
            &ablated,
            &world,
            &heldout,
            &ablated_cfg,
            &mut Rng::new(9),
        )
        .unwrap();
        assert!(
            mse_c < mse_u,
            "conditioned {mse_c} not below unconditional {mse_u}"
        );
    }

    #[test]
    fn infer_respects_cone_and_determinism() {
        let (model, world, data, _, s2) = tiny_setup();
        let _ = world;
        let mut gen = init_generator(&s2, 8).unwrap();
        let bound = (1.0 - model.svdl.r_img * model.svdl.r_img).sqrt();
        for i in 0..16 {
            let z_txt = UnitVec::normalize(data.texts.row(i)).unwrap();
            let a = infer_t2i(&model, &gen, &z_txt, &mut Rng::new(5)).unwrap();
            let b = infer_t2i(&model, &gen, &z_txt, &mut Rng::new(5)).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.image.len(), s2.d_x);
            let c = cosine(a.zhat_img.view(), z_txt.view()).unwrap();
            assert!(c >= bound - 1e-9, "cone violated: {c} < {bound}");
        }
        let _ = &mut gen;
    }

    #[test]
    fn generator_checkpoint_roundtrip() {
        let (_, _, _, _, s2) = tiny_setup();
        let gen = init_generator(&s2, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.vdlc");
        save_generator(&path, &gen, &s2).unwrap();
        let (loaded, cfg) = load_generator(&path).unwrap();
        assert_eq!(loaded, gen);
        assert_eq!(cfg, s2);
    }
}
