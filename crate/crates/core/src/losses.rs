//! Stage-1 loss terms with exact gradients: adversarial JS minimax, the
//! Donsker-Varadhan dual objective, embedding reconstruction, relational
//! distillation over triplets, semi-supervised l1, and the R1 penalty.
//!
//! Sign convention: every function returns the value as written in its
//! objective plus the gradient of that value. The trainer routes ascent for
//! the discriminator/critic and descent for the encoder/decoder.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VdlError};
use crate::net::{DenseNet, GradBundle};
use crate::numerics::{Rng, NORM_EPS};
use crate::sampler::{svdl_backward, svdl_forward, SvdlConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    Js,
    Dv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenLossMode {
    /// The minimax term as printed in the stage-1 objective.
    Minimax,
    /// -E[log sigma(D(fake))], same gradient sign, better-conditioned early.
    NonSaturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sigma: f64,
    pub lambda_rkd: f64,
    pub lambda_semi: f64,
    pub delta: f64,
    pub gamma_r1: f64,
    pub divergence: Divergence,
    pub gen_mode: GenLossMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sigma: 1.0,
            lambda_rkd: 1.0,
            lambda_semi: 1.0,
            delta: 1.0,
            gamma_r1: 1.0,
            divergence: Divergence::Js,
            gen_mode: GenLossMode::Minimax,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(VdlError::RangeError {
                what: "sigma",
                value: self.sigma,
            });
        }
        if self.delta <= 0.0 {
            return Err(VdlError::RangeError {
                what: "delta",
                value: self.delta,
            });
        }
        for (v, what) in [
            (self.lambda_rkd, "lambda_rkd"),
            (self.lambda_semi, "lambda_semi"),
            (self.gamma_r1, "gamma_r1"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(VdlError::RangeError { what, value: v });
            }
        }
        Ok(())
    }
}

/// log(sigmoid(x)) without overflow at confident logits.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn scalar_logits(d: &DenseNet, batch: ArrayView2<f64>) -> Result<Array1<f64>> {
    let (y, _) = d.forward(batch)?;
    Ok(y.column(0).to_owned())
}

/// E_p[log sigma(D(prior))] + E_q[log sigma(-D(fake))], the quantity the
/// discriminator maximizes.
pub fn adv_d_value(d: &DenseNet, priors: ArrayView2<f64>, fakes: ArrayView2<f64>) -> Result<f64> {
    let lp = scalar_logits(d, priors)?;
    let lf = scalar_logits(d, fakes)?;
    let a = lp.iter().map(|&x| log_sigmoid(x)).sum::<f64>() / lp.len() as f64;
    let b = lf.iter().map(|&x| log_sigmoid(-x)).sum::<f64>() / lf.len() as f64;
    Ok(a + b)
}

/// Value and D-parameter gradient of [`adv_d_value`] (gradient of the value;
/// ascent direction for the discriminator).
pub fn adv_d_grads(
    d: &DenseNet,
    priors: ArrayView2<f64>,
    fakes: ArrayView2<f64>,
) -> Result<(f64, GradBundle)> {
    let (yp, cp) = d.forward(priors)?;
    let (yf, cf) = d.forward(fakes)?;
    let np = priors.nrows() as f64;
    let nf = fakes.nrows() as f64;
    let value = yp.iter().map(|&x| log_sigmoid(x)).sum::<f64>() / np
        + yf.iter().map(|&x| log_sigmoid(-x)).sum::<f64>() / nf;
    let dyp = yp.mapv(|x| sigmoid(-x) / np);
    let dyf = yf.mapv(|x| -sigmoid(x) / nf);
    let mut gp = d.backward(&cp, dyp.view())?;
    let gf = d.backward(&cf, dyf.view())?;
    gp.add_assign(&gf);
    Ok((value, gp))
}

/// Generator-side adversarial value plus its gradient w.r.t. the fake rows.
pub fn adv_g_value_and_input_grads(
    d: &DenseNet,
    fakes: ArrayView2<f64>,
    mode: GenLossMode,
) -> Result<(f64, Array2<f64>)> {
    let (y, cache) = d.forward(fakes)?;
    let n = fakes.nrows() as f64;
    let (value, dy) = match mode {
        GenLossMode::Minimax => (
            y.iter().map(|&x| log_sigmoid(-x)).sum::<f64>() / n,
            y.mapv(|x| -sigmoid(x) / n),
        ),
        GenLossMode::NonSaturating => (
            -y.iter().map(|&x| log_sigmoid(x)).sum::<f64>() / n,
            y.mapv(|x| -sigmoid(-x) / n),
        ),
    };
    let bundle = d.backward(&cache, dy.view())?;
    Ok((value, bundle.dx))
}

/// Value-only convenience matching the spec surface.
pub fn adv_g_value(d: &DenseNet, fakes: ArrayView2<f64>, mode: GenLossMode) -> Result<f64> {
    Ok(adv_g_value_and_input_grads(d, fakes, mode)?.0)
}

/// (gamma/2) * mean_i ||dD/dz_i||^2 over the prior batch, with exact
/// D-parameter gradients via analytic double backprop.
pub fn r1_penalty_and_grads(
    d: &DenseNet,
    priors: ArrayView2<f64>,
    gamma_r1: f64,
) -> Result<(f64, GradBundle)> {
    let n = priors.nrows() as f64;
    let (_, cache) = d.forward(priors)?;
    let (sum_sq, mut grads) = d.grad_norm_sq_and_grads(&cache)?;
    let scale = gamma_r1 / (2.0 * n);
    grads.scale(scale);
    Ok((scale * sum_sq, grads))
}

pub fn r1_penalty(d: &DenseNet, priors: ArrayView2<f64>, gamma_r1: f64) -> Result<f64> {
    Ok(r1_penalty_and_grads(d, priors, gamma_r1)?.0)
}

/// 1/(2 sigma^2) * mean_i ||z_img_i - zhat_img_i||^2.
pub fn recon_loss(z_img: ArrayView2<f64>, zhat_img: ArrayView2<f64>, sigma: f64) -> Result<f64> {
    Ok(recon_loss_and_grads(z_img, zhat_img, sigma)?.0)
}

/// Value plus gradient w.r.t. the reconstructed rows.
pub fn recon_loss_and_grads(
    z_img: ArrayView2<f64>,
    zhat_img: ArrayView2<f64>,
    sigma: f64,
) -> Result<(f64, Array2<f64>)> {
    if sigma <= 0.0 {
        return Err(VdlError::RangeError {
            what: "sigma",
            value: sigma,
        });
    }
    if z_img.dim() != zhat_img.dim() {
        return Err(VdlError::ShapeMismatch {
            expected: format!("{:?}", z_img.dim()),
            got: format!("{:?}", zhat_img.dim()),
            context: "recon_loss",
        });
    }
    let n = z_img.nrows() as f64;
    let diff = &zhat_img.to_owned() - &z_img;
    let value = diff.iter().map(|x| x * x).sum::<f64>() / (2.0 * sigma * sigma * n);
    let grads = diff.mapv(|x| x / (sigma * sigma * n));
    Ok((value, grads))
}

/// Angle potential at the pivot: cos(zi - zj, zi - zk).
pub fn psi_a(zi: ArrayView1<f64>, zj: ArrayView1<f64>, zk: ArrayView1<f64>) -> Result<f64> {
    let e1 = &zi.to_owned() - &zj;
    let e2 = &zi.to_owned() - &zk;
    let n1 = e1.dot(&e1).sqrt();
    let n2 = e2.dot(&e2).sqrt();
    if n1 <= NORM_EPS || n2 <= NORM_EPS {
        return Err(VdlError::DegenerateTriplet { i: 0, j: 0, k: 0 });
    }
    Ok(e1.dot(&e2) / (n1 * n2))
}

/// Huber: quadratic below delta, linear above.
pub fn huber(a: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    if a.abs() <= delta {
        0.5 * a * a
    } else {
        delta * (a.abs() - 0.5 * delta)
    }
}

/// d huber / d a, clamped to +-delta.
pub fn huber_deriv(a: f64, delta: f64) -> f64 {
    a.clamp(-delta, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl TripletIndex {
    pub fn new(i: usize, j: usize, k: usize) -> TripletIndex {
        debug_assert!(i != j && i != k && j != k);
        TripletIndex { i, j, k }
    }
}

/// All ordered distinct triplets for small batches, otherwise 4 * n random
/// distinct ones.
pub fn sample_triplets(n: usize, rng: &mut Rng) -> Vec<TripletIndex> {
    if n < 3 {
        return Vec::new();
    }
    if n <= 16 {
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if i != j && i != k && j != k {
                        out.push(TripletIndex::new(i, j, k));
                    }
                }
            }
        }
        out
    } else {
        let m = 4 * n;
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            let i = rng.next_index(n);
            let j = rng.next_index(n);
            let k = rng.next_index(n);
            if i != j && i != k && j != k {
                out.push(TripletIndex::new(i, j, k));
            }
        }
        out
    }
}

/// Mean Huber gap between teacher (image) and student (predicted text) angle
/// potentials. Returns (value, gradient w.r.t. student rows, skipped count).
/// Degenerate triplets on either side are skipped and counted.
pub fn rkd_loss_and_grads(
    img: ArrayView2<f64>,
    txt_hat: ArrayView2<f64>,
    triplets: &[TripletIndex],
    delta: f64,
) -> Result<(f64, Array2<f64>, usize)> {
    if img.dim() != txt_hat.dim() {
        return Err(VdlError::ShapeMismatch {
            expected: format!("{:?}", img.dim()),
            got: format!("{:?}", txt_hat.dim()),
            context: "rkd_loss",
        });
    }
    let mut grads = Array2::zeros(txt_hat.dim());
    let mut value = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut contribs: Vec<(TripletIndex, f64, [Array1<f64>; 3])> = Vec::new();
    for t in triplets {
        let teacher = psi_a(img.row(t.i), img.row(t.j), img.row(t.k));
        let (zi, zj, zk) = (txt_hat.row(t.i), txt_hat.row(t.j), txt_hat.row(t.k));
        let e1 = &zi.to_owned() - &zj;
        let e2 = &zi.to_owned() - &zk;
        let n1 = e1.dot(&e1).sqrt();
        let n2 = e2.dot(&e2).sqrt();
        let (teacher, student_ok) = match teacher {
            Ok(v) => (v, n1 > NORM_EPS && n2 > NORM_EPS),
            Err(_) => (0.0, false),
        };
        if !student_ok {
            skipped += 1;
            continue;
        }
        let psi_s = e1.dot(&e2) / (n1 * n2);
        let a = teacher - psi_s;
        value += huber(a, delta);
        // d loss / d psi_s = -huber'(a); chain through the cosine.
        let dpsi = -huber_deriv(a, delta);
        let de1 =
            (&e2.mapv(|x| x / (n1 * n2)) - &e1.mapv(|x| psi_s * x / (n1 * n1))).mapv(|x| x * dpsi);
        let de2 =
            (&e1.mapv(|x| x / (n1 * n2)) - &e2.mapv(|x| psi_s * x / (n2 * n2))).mapv(|x| x * dpsi);
        let dzi = &de1 + &de2;
        contribs.push((*t, 0.0, [dzi, de1.mapv(|x| -x), de2.mapv(|x| -x)]));
        used += 1;
    }
    if used == 0 {
        return Ok((0.0, grads, skipped));
    }
    let m = used as f64;
    for (t, _, [dzi, dzj, dzk]) in contribs {
        grads.row_mut(t.i).scaled_add(1.0 / m, &dzi);
        grads.row_mut(t.j).scaled_add(1.0 / m, &dzj);
        grads.row_mut(t.k).scaled_add(1.0 / m, &dzk);
    }
    Ok((value / m, grads, skipped))
}

pub fn rkd_loss(
    img: ArrayView2<f64>,
    txt_hat: ArrayView2<f64>,
    triplets: &[TripletIndex],
    delta: f64,
) -> Result<f64> {
    Ok(rkd_loss_and_grads(img, txt_hat, triplets, delta)?.0)
}

/// Mean l1 distance between predicted and true text embeddings over the
/// labeled rows. Returns (value, gradient w.r.t. predicted rows).
pub fn semi_loss_and_grads(
    txt_hat: ArrayView2<f64>,
    txt_true: ArrayView2<f64>,
    labeled: &[bool],
) -> Result<(f64, Array2<f64>)> {
    if txt_hat.dim() != txt_true.dim() || labeled.len() != txt_hat.nrows() {
        return Err(VdlError::ShapeMismatch {
            expected: format!("{:?}", txt_hat.dim()),
            got: format!("{:?}", txt_true.dim()),
            context: "semi_loss",
        });
    }
    let n_l = labeled.iter().filter(|&&b| b).count();
    let mut grads = Array2::zeros(txt_hat.dim());
    if n_l == 0 {
        return Ok((0.0, grads));
    }
    let mut value = 0.0;
    for (idx, &lab) in labeled.iter().enumerate() {
        if !lab {
            continue;
        }
        for (c, (&a, &b)) in txt_hat.row(idx).iter().zip(txt_true.row(idx)).enumerate() {
            let diff = a - b;
            value += diff.abs();
            grads[[idx, c]] = diff.signum() / n_l as f64;
        }
    }
    Ok((value / n_l as f64, grads))
}

pub fn semi_loss(zhat_txt: ArrayView1<f64>, z_txt: ArrayView1<f64>) -> f64 {
    zhat_txt
        .iter()
        .zip(z_txt.iter())
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Exponential moving average of the Donsker-Varadhan partition denominator,
/// kept in log domain so confident critics cannot overflow it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvEma {
    /// Log of the uncorrected EMA accumulator; -inf before the first update.
    #[serde(with = "extended_f64")]
    pub log_acc: f64,
    pub steps: u64,
    pub decay: f64,
}

/// JSON-safe encoding of f64 values that may be infinite.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Wire {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Wire::Num(*v).serialize(s)
        } else {
            Wire::Str(v.to_string()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Wire::deserialize(d)? {
            Wire::Num(v) => Ok(v),
            Wire::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl Default for DvEma {
    fn default() -> Self {
        DvEma {
            log_acc: f64::NEG_INFINITY,
            steps: 0,
            decay: 0.99,
        }
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

impl DvEma {
    /// Fold in one batch's log-mean-exp; returns the bias-corrected
    /// log-mean-exp estimate.
    pub fn update(&mut self, log_mean_exp_sample: f64) -> f64 {
        self.log_acc = log_add_exp(
            self.decay.ln() + self.log_acc,
            (1.0 - self.decay).ln() + log_mean_exp_sample,
        );
        self.steps += 1;
        self.log_acc - (1.0 - self.decay.powi(self.steps as i32)).ln()
    }
}

/// E_q[T] - log E_p[exp T], with max-subtracted log-mean-exp.
pub fn dv_dual_value(t: &DenseNet, q: ArrayView2<f64>, p: ArrayView2<f64>) -> Result<f64> {
    let tq = scalar_logits(t, q)?;
    let tp = scalar_logits(t, p)?;
    let mean_q = tq.sum() / tq.len() as f64;
    Ok(mean_q - log_mean_exp(tp.view()))
}

fn log_mean_exp(x: ArrayView1<f64>) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s = x.iter().map(|&v| (v - m).exp()).sum::<f64>() / x.len() as f64;
    m + s.ln()
}

/// Critic-side value and parameter gradient (ascent direction). With an EMA
/// handle the partition denominator in the gradient is smoothed; without one
/// the gradient is the exact derivative of the value (used by the gradient
/// oracle).
pub fn dv_critic_grads(
    t: &DenseNet,
    q: ArrayView2<f64>,
    p: ArrayView2<f64>,
    ema: Option<&mut DvEma>,
) -> Result<(f64, GradBundle)> {
    let (yq, cq) = t.forward(q)?;
    let (yp, cp) = t.forward(p)?;
    let nq = q.nrows() as f64;
    let np = p.nrows() as f64;
    let m = yp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = yp.mapv(|v| (v - m).exp());
    let sum_exp = exps.sum();
    let value = yq.sum() / nq - (m + (sum_exp / np).ln());

    // d value / d T(p_i): exact form is -exp(T_i)/sum exp(T). The smoothed
    // form divides by the EMA of the same denominator instead.
    let log_sum = m + sum_exp.ln();
    let log_denom = match ema {
        Some(e) => {
            let lme = log_sum - np.ln();
            e.update(lme) + np.ln()
        }
        None => log_sum,
    };
    let dyq = Array2::from_elem((yq.nrows(), 1), 1.0 / nq);
    let dyp = yp.mapv(|t| -(t - log_denom).exp());
    let mut gq = t.backward(&cq, dyq.view())?;
    let gp = t.backward(&cp, dyp.view())?;
    gq.add_assign(&gp);
    Ok((value, gq))
}

/// Generator-side DV term E_q[T] and its gradient w.r.t. the q rows.
pub fn dv_gen_input_grads(t: &DenseNet, q: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    let (y, cache) = t.forward(q)?;
    let n = q.nrows() as f64;
    let value = y.sum() / n;
    let dy = Array2::from_elem((q.nrows(), 1), 1.0 / n);
    let bundle = t.backward(&cache, dy.view())?;
    Ok((value, bundle.dx))
}

/// Loss components of one encoder/decoder-side evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct GfLossTerms {
    pub adv_g: f64,
    pub recon: f64,
    pub rkd: f64,
    pub semi: f64,
    pub total: f64,
}

/// The full encoder/decoder objective on one batch: adversarial (or DV) term
/// through the sampling operator, reconstruction through the decoder path,
/// relational distillation, and optionally the labeled l1 term.
///
/// Returns the loss terms, gradients for G and F (descent direction), and the
/// count of degenerate sampling rows.
#[allow(clippy::too_many_arguments)]
pub fn gf_side_and_grads(
    g: &DenseNet,
    f: &DenseNet,
    disc: &DenseNet,
    weights: &LossWeights,
    svdl: &SvdlConfig,
    z_img: ArrayView2<f64>,
    labeled: Option<(&[bool], ArrayView2<f64>)>,
    triplets: &[TripletIndex],
) -> Result<(GfLossTerms, GradBundle, GradBundle, usize, usize)> {
    let (zhat_txt, cache_g) = svdl_forward(z_img, g, svdl.r_txt)?;
    let (zhat_img, cache_f) = svdl_forward(zhat_txt.view(), f, svdl.r_img)?;
    let degenerate = cache_g.degenerate_rows.len() + cache_f.degenerate_rows.len();

    let mut terms = GfLossTerms::default();
    let mut d_zhat_txt: Array2<f64> = Array2::zeros(zhat_txt.dim());

    // Reconstruction through F.
    let (recon, d_zhat_img) = recon_loss_and_grads(z_img, zhat_img.view(), weights.sigma)?;
    terms.recon = recon;
    let (grad_f, dbase_f) = svdl_backward(f, &cache_f, d_zhat_img.view())?;
    d_zhat_txt += &dbase_f;

    // Divergence term on the sampled text embeddings.
    let (adv_g, d_adv) = match weights.divergence {
        Divergence::Js => adv_g_value_and_input_grads(disc, zhat_txt.view(), weights.gen_mode)?,
        Divergence::Dv => dv_gen_input_grads(disc, zhat_txt.view())?,
    };
    terms.adv_g = adv_g;
    d_zhat_txt += &d_adv;

    // Relational distillation (teacher: image batch; student: sampled text).
    let mut skipped = 0usize;
    if weights.lambda_rkd > 0.0 && !triplets.is_empty() {
        let (rkd, d_rkd, sk) = rkd_loss_and_grads(z_img, zhat_txt.view(), triplets, weights.delta)?;
        terms.rkd = rkd;
        skipped = sk;
        d_zhat_txt.scaled_add(weights.lambda_rkd, &d_rkd);
    }

    // Labeled l1 term.
    if let Some((mask, z_txt)) = labeled {
        if weights.lambda_semi > 0.0 {
            let (semi, d_semi) = semi_loss_and_grads(zhat_txt.view(), z_txt, mask)?;
            terms.semi = semi;
            d_zhat_txt.scaled_add(weights.lambda_semi, &d_semi);
        }
    }

    terms.total = terms.adv_g
        + terms.recon
        + weights.lambda_rkd * terms.rkd
        + weights.lambda_semi * terms.semi;

    let (grad_g, _) = svdl_backward(g, &cache_g, d_zhat_txt.view())?;
    Ok((terms, grad_g, grad_f, degenerate, skipped))
}
