//! Finite-difference verification of every analytic gradient in the stage-1
//! objective, on small models. Shared by the CLI `gradcheck` command and the
//! acceptance suite.

use ndarray::Array2;

use crate::error::{Result, VdlError};
use crate::losses::{
    adv_d_grads, adv_d_value, adv_g_value, adv_g_value_and_input_grads, dv_critic_grads,
    dv_dual_value, dv_gen_input_grads, gf_side_and_grads, r1_penalty, r1_penalty_and_grads,
    recon_loss, recon_loss_and_grads, rkd_loss, rkd_loss_and_grads, sample_triplets,
    semi_loss_and_grads, GenLossMode, LossWeights, TripletIndex,
};
use crate::net::{flatten_grads, flatten_params, grad_check, unflatten_params, DenseNet};
use crate::numerics::{sample_unit, Rng};
use crate::sampler::{svdl_backward, svdl_forward, SvdlConfig};

pub const GRADCHECK_SCOPES: &[&str] = &[
    "adv_d",
    "adv_g",
    "r1",
    "recon",
    "rkd",
    "semi",
    "dv_critic",
    "dv_gen",
    "total",
];

fn unit_batch(rng: &mut Rng, n: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        out.row_mut(i).assign(&sample_unit(rng, d).view());
    }
    out
}

fn check(
    net: &DenseNet,
    analytic: &[f64],
    loss: &mut dyn FnMut(&DenseNet) -> f64,
    h: f64,
) -> Result<f64> {
    let flat = flatten_params(net);
    let mut probe = net.clone();
    let mut f = |p: &[f64]| {
        unflatten_params(&mut probe, p);
        loss(&probe)
    };
    grad_check(&mut f, &flat, analytic, h)
}

/// Run one named check on a d=6 / width-8 model; returns the max relative
/// error against central differences at h=1e-5.
pub fn run_scope(scope: &str, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let d = 6;
    let h = 1e-5;
    let g = DenseNet::init(&mut rng, &[d, 8, 8, d], 0.2);
    let f = DenseNet::init(&mut rng, &[d, 8, 8, d], 0.2);
    let disc = DenseNet::init(&mut rng, &[d, 8, 1], 0.2);
    let z_img = unit_batch(&mut rng, 4, d);
    let z_txt = unit_batch(&mut rng, 4, d);
    let priors = unit_batch(&mut rng, 4, d);
    let svdl = SvdlConfig::default();
    let r = svdl.r_txt;
    let triplets: Vec<TripletIndex> = sample_triplets(4, &mut rng);
    let mask = [true, false, true, true];

    match scope {
        "adv_d" => {
            let (fakes, _) = svdl_forward(z_img.view(), &g, r)?;
            let (_, grads) = adv_d_grads(&disc, priors.view(), fakes.view())?;
            check(
                &disc,
                &flatten_grads(&grads),
                &mut |n| adv_d_value(n, priors.view(), fakes.view()).unwrap(),
                h,
            )
        }
        "adv_g" => {
            // Through the sampling operator and both normalizations, w.r.t. G.
            let (fakes, cache) = svdl_forward(z_img.view(), &g, r)?;
            let mut worst = 0.0f64;
            for mode in [GenLossMode::Minimax, GenLossMode::NonSaturating] {
                let (_, d_in) = adv_g_value_and_input_grads(&disc, fakes.view(), mode)?;
                let (grads, _) = svdl_backward(&g, &cache, d_in.view())?;
                let err = check(
                    &g,
                    &flatten_grads(&grads),
                    &mut |n| {
                        let (fk, _) = svdl_forward(z_img.view(), n, r).unwrap();
                        adv_g_value(&disc, fk.view(), mode).unwrap()
                    },
                    h,
                )?;
                worst = worst.max(err);
            }
            Ok(worst)
        }
        "r1" => {
            let (_, grads) = r1_penalty_and_grads(&disc, priors.view(), 1.0)?;
            check(
                &disc,
                &flatten_grads(&grads),
                &mut |n| r1_penalty(n, priors.view(), 1.0).unwrap(),
                h,
            )
        }
        "recon" => {
            // Through F's sampling step, w.r.t. F.
            let (zhat_txt, _) = svdl_forward(z_img.view(), &g, r)?;
            let (zhat_img, cache) = svdl_forward(zhat_txt.view(), &f, svdl.r_img)?;
            let (_, d_out) = recon_loss_and_grads(z_img.view(), zhat_img.view(), 1.0)?;
            let (grads, _) = svdl_backward(&f, &cache, d_out.view())?;
            check(
                &f,
                &flatten_grads(&grads),
                &mut |n| {
                    let (zh, _) = svdl_forward(zhat_txt.view(), n, svdl.r_img).unwrap();
                    recon_loss(z_img.view(), zh.view(), 1.0).unwrap()
                },
                h,
            )
        }
        "rkd" => {
            let (zhat_txt, cache) = svdl_forward(z_img.view(), &g, r)?;
            let (_, d_student, _) =
                rkd_loss_and_grads(z_img.view(), zhat_txt.view(), &triplets, 1.0)?;
            let (grads, _) = svdl_backward(&g, &cache, d_student.view())?;
            check(
                &g,
                &flatten_grads(&grads),
                &mut |n| {
                    let (zh, _) = svdl_forward(z_img.view(), n, r).unwrap();
                    rkd_loss(z_img.view(), zh.view(), &triplets, 1.0).unwrap()
                },
                h,
            )
        }
        "semi" => {
            let (zhat_txt, cache) = svdl_forward(z_img.view(), &g, r)?;
            let (_, d_semi) = semi_loss_and_grads(zhat_txt.view(), z_txt.view(), &mask)?;
            let (grads, _) = svdl_backward(&g, &cache, d_semi.view())?;
            check(
                &g,
                &flatten_grads(&grads),
                &mut |n| {
                    let (zh, _) = svdl_forward(z_img.view(), n, r).unwrap();
                    semi_loss_and_grads(zh.view(), z_txt.view(), &mask)
                        .unwrap()
                        .0
                },
                h,
            )
        }
        "dv_critic" => {
            let (fakes, _) = svdl_forward(z_img.view(), &g, r)?;
            let (_, grads) = dv_critic_grads(&disc, fakes.view(), priors.view(), None)?;
            check(
                &disc,
                &flatten_grads(&grads),
                &mut |n| dv_dual_value(n, fakes.view(), priors.view()).unwrap(),
                h,
            )
        }
        "dv_gen" => {
            let (fakes, cache) = svdl_forward(z_img.view(), &g, r)?;
            let (_, d_in) = dv_gen_input_grads(&disc, fakes.view())?;
            let (grads, _) = svdl_backward(&g, &cache, d_in.view())?;
            check(
                &g,
                &flatten_grads(&grads),
                &mut |n| {
                    let (fk, _) = svdl_forward(z_img.view(), n, r).unwrap();
                    let (y, _) = disc.forward(fk.view()).unwrap();
                    y.sum() / fk.nrows() as f64
                },
                h,
            )
        }
        "total" => {
            // The complete stage-1 G/F objective, jointly over G and F.
            let weights = LossWeights::default();
            let (_, grad_g, grad_f, _, _) = gf_side_and_grads(
                &g,
                &f,
                &disc,
                &weights,
                &svdl,
                z_img.view(),
                Some((&mask, z_txt.view())),
                &triplets,
            )?;
            let mut analytic = flatten_grads(&grad_g);
            analytic.extend(flatten_grads(&grad_f));
            let mut flat = flatten_params(&g);
            let split = flat.len();
            flat.extend(flatten_params(&f));
            let mut pg = g.clone();
            let mut pf = f.clone();
            let mut loss = |p: &[f64]| {
                unflatten_params(&mut pg, &p[..split]);
                unflatten_params(&mut pf, &p[split..]);
                gf_side_and_grads(
                    &pg,
                    &pf,
                    &disc,
                    &weights,
                    &svdl,
                    z_img.view(),
                    Some((&mask, z_txt.view())),
                    &triplets,
                )
                .unwrap()
                .0
                .total
            };
            grad_check(&mut loss, &flat, &analytic, h)
        }
        other => Err(VdlError::Config(format!(
            "unknown gradcheck scope {other:?}"
        ))),
    }
}

/// Run all scopes (or one), returning (scope, max relative error) pairs.
pub fn run_suite(scope: &str, seed: u64) -> Result<Vec<(String, f64)>> {
    let scopes: Vec<&str> = if scope == "all" {
        GRADCHECK_SCOPES.to_vec()
    } else {
        vec![scope]
    };
    scopes
        .into_iter()
        .map(|s| run_scope(s, seed).map(|e| (s.to_string(), e)))
        .collect()
}
