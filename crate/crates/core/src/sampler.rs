//! Hypersphere sampling: the cone-constrained perturbation operator used for
//! both text estimation and image reconstruction, plus the baseline samplers.
//!
//! The operator is Normalize(base + r * net(base)/||net(base)||). Its output
//! always stays within cos >= sqrt(1 - r^2) of the base for r < 1, and the
//! backward pass differentiates through both normalizations exactly.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Result, VdlError};
use crate::net::{DenseNet, ForwardCache, GradBundle};
use crate::numerics::{norm, sample_gaussian, Rng, UnitVec, NORM_EPS};

/// Perturbation radius, in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SvdlConfig {
    pub r_txt: f64,
    pub r_img: f64,
}

impl Default for SvdlConfig {
    fn default() -> Self {
        SvdlConfig {
            r_txt: 0.7,
            r_img: 0.7,
        }
    }
}

impl SvdlConfig {
    pub fn validate(&self) -> Result<()> {
        for (r, what) in [(self.r_txt, "r_txt"), (self.r_img, "r_img")] {
            if !(0.0..1.0).contains(&r) {
                return Err(VdlError::RangeError { what, value: r });
            }
        }
        Ok(())
    }
}

/// Everything backward needs to push a gradient through the sampling step.
pub struct SvdlCache {
    pub net_cache: ForwardCache,
    /// Raw net outputs, n x d.
    g: Array2<f64>,
    /// ||g|| per row.
    g_norm: Array1<f64>,
    /// ||base + r * g/||g|| || per row.
    v_norm: Array1<f64>,
    /// Output rows.
    out: Array2<f64>,
    base: Array2<f64>,
    r: f64,
    /// Rows where the net output was numerically zero and the base was passed
    /// through unchanged.
    pub degenerate_rows: Vec<usize>,
}

/// Batched sampling with cached intermediates for backprop.
pub fn svdl_forward(
    base: ArrayView2<f64>,
    net: &DenseNet,
    r: f64,
) -> Result<(Array2<f64>, SvdlCache)> {
    if !(0.0..1.0).contains(&r) {
        return Err(VdlError::RangeError {
            what: "r",
            value: r,
        });
    }
    let (g, net_cache) = net.forward(base)?;
    let n = base.nrows();
    let d = base.ncols();
    let mut g_norm = Array1::zeros(n);
    let mut out = Array2::zeros((n, d));
    let mut v_norm = Array1::zeros(n);
    let mut degenerate_rows = Vec::new();
    for i in 0..n {
        let gi = g.row(i);
        let gn = norm(gi);
        g_norm[i] = gn;
        if gn <= NORM_EPS {
            // Measure-zero direction collapse: pass the base through.
            degenerate_rows.push(i);
            v_norm[i] = norm(base.row(i));
            out.row_mut(i).assign(&base.row(i));
            continue;
        }
        let vi = &base.row(i) + &gi.mapv(|x| r * x / gn);
        let vn = norm(vi.view());
        v_norm[i] = vn;
        out.row_mut(i).assign(&vi.mapv(|x| x / vn));
    }
    Ok((
        out.clone(),
        SvdlCache {
            net_cache,
            g,
            g_norm,
            v_norm,
            out,
            base: base.to_owned(),
            r,
            degenerate_rows,
        },
    ))
}

/// Backward through the sampling step: returns net parameter gradients and the
/// gradient w.r.t. the base rows (covering both the direct path and the path
/// through the net input).
pub fn svdl_backward(
    net: &DenseNet,
    cache: &SvdlCache,
    dout: ArrayView2<f64>,
) -> Result<(GradBundle, Array2<f64>)> {
    let n = cache.base.nrows();
    let d = cache.base.ncols();
    let mut dv = Array2::zeros((n, d));
    let mut dg = Array2::zeros((n, d));
    for i in 0..n {
        if cache.g_norm[i] <= NORM_EPS {
            continue; // pass-through row: gradient dropped with the incident
        }
        let vn = cache.v_norm[i];
        let o = cache.out.row(i);
        let doi = dout.row(i);
        // d/dv of v/||v|| applied to dout.
        let proj = o.dot(&doi);
        let dvi = (&doi - &o.mapv(|x| x * proj)).mapv(|x| x / vn);
        dv.row_mut(i).assign(&dvi);
        // Through r * g/||g||.
        let gn = cache.g_norm[i];
        let ghat = cache.g.row(i).mapv(|x| x / gn);
        let proj_g = ghat.dot(&dvi);
        let dgi = (&dvi - &ghat.mapv(|x| x * proj_g)).mapv(|x| cache.r * x / gn);
        dg.row_mut(i).assign(&dgi);
    }
    let mut bundle = net.backward(&cache.net_cache, dg.view())?;
    let dbase = &dv + &bundle.dx;
    bundle.dx = dbase.clone();
    Ok((bundle, dbase))
}

/// Single-vector sampling.
pub fn svdl_sample(base: &UnitVec, net: &DenseNet, r: f64) -> Result<UnitVec> {
    let b = base.view().insert_axis(Axis(0));
    let (out, _) = svdl_forward(b, net, r)?;
    UnitVec::normalize(out.row(0))
}

/// Cone bound sqrt(1 - r^2) of the sampling operator.
pub fn prop1_bound(r: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&r) {
        return Err(VdlError::RangeError {
            what: "r",
            value: r,
        });
    }
    Ok((1.0 - r * r).sqrt())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Prop1Report {
    pub trials: usize,
    pub min_slack: f64,
    pub violations: usize,
}

/// Randomized verification of the cone bound: random bases, freshly
/// initialized nets, every (dim, r) combination. Slack below -1e-9 counts as
/// a violation.
pub fn verify_prop1(
    rng: &mut Rng,
    trials: usize,
    dims: &[usize],
    rs: &[f64],
) -> Result<Prop1Report> {
    let mut min_slack = f64::INFINITY;
    let mut violations = 0;
    let mut total = 0;
    for &d in dims {
        for &r in rs {
            let bound = prop1_bound(r)?;
            for _ in 0..trials {
                let net = DenseNet::init(rng, &[d, 8, d], 0.2);
                let base = crate::numerics::sample_unit(rng, d);
                let out = svdl_sample(&base, &net, r)?;
                let c = crate::numerics::cosine(out.view(), base.view())?;
                let slack = c - bound;
                min_slack = min_slack.min(slack);
                if slack < -1e-9 {
                    violations += 1;
                }
                total += 1;
            }
        }
    }
    Ok(Prop1Report {
        trials: total,
        min_slack,
        violations,
    })
}

/// Uniformly random row of a pool of unit vectors.
pub fn prior_sample(pool: ArrayView2<f64>, rng: &mut Rng) -> Result<Array1<f64>> {
    if pool.nrows() == 0 {
        return Err(VdlError::EmptyPool);
    }
    let i = rng.next_index(pool.nrows());
    Ok(pool.row(i).to_owned())
}

/// Gaussian perturbation on the sphere: Normalize(z + xi * ||z|| * eps/||eps||).
pub fn lafite_sample(z_img: &UnitVec, xi: f64, rng: &mut Rng) -> Result<UnitVec> {
    if xi < 0.0 {
        return Err(VdlError::RangeError {
            what: "xi",
            value: xi,
        });
    }
    if xi == 0.0 {
        return Ok(z_img.clone());
    }
    let d = z_img.dim();
    loop {
        let eps = sample_gaussian(rng, d);
        let en = norm(eps.view());
        if en <= NORM_EPS {
            continue;
        }
        let zn = norm(z_img.view());
        let v = &z_img.view() + &eps.mapv(|x| xi * zn * x / en);
        if let Ok(u) = UnitVec::normalize(v.view()) {
            return Ok(u);
        }
    }
}

/// Identity proxy: the image embedding stands in for the text embedding.
pub fn clipgen_sample(z_img: &UnitVec) -> UnitVec {
    z_img.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, sample_unit};
    use ndarray::array;

    fn const_net(direction: Array1<f64>, d: usize) -> DenseNet {
        // Zero weights, bias = direction: net(x) = direction for all x.
        let mut net = DenseNet::init(&mut Rng::new(0), &[d, d], 0.2);
        net.layers[0].w.fill(0.0);
        net.layers[0].b.assign(&direction);
        net
    }

    #[test]
    fn r_zero_is_identity() {
        let mut rng = Rng::new(1);
        let base = sample_unit(&mut rng, 6);
        let net = DenseNet::init(&mut rng, &[6, 8, 6], 0.2);
        let out = svdl_sample(&base, &net, 0.0).unwrap();
        for (a, b) in out.as_slice().iter().zip(base.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_direction_identity() {
        let base = UnitVec::from_vec(vec![1.0, 0.0, 0.0]).unwrap();
        let net = const_net(array![2.0, 0.0, 0.0], 3);
        let out = svdl_sample(&base, &net, 0.5).unwrap();
        let c = cosine(out.view(), base.view()).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_direction_closed_form() {
        let base = UnitVec::from_vec(vec![1.0, 0.0]).unwrap();
        let net = const_net(array![0.0, 5.0], 2);
        let out = svdl_sample(&base, &net, 0.6).unwrap();
        let c = cosine(out.view(), base.view()).unwrap();
        // 1 / sqrt(1 + 0.36) from the norm expansion with orthogonal direction.
        let expected = 1.0 / 1.36_f64.sqrt();
        assert!((c - expected).abs() < 1e-12);
        assert!(c >= prop1_bound(0.6).unwrap() - 1e-9);
    }

    #[test]
    fn prop1_bound_values() {
        assert_eq!(prop1_bound(0.0).unwrap(), 1.0);
        assert!((prop1_bound(0.5).unwrap() - 0.8660254037844386).abs() < 1e-12);
        assert!((prop1_bound(0.8).unwrap() - 0.6).abs() < 1e-12);
        assert!(prop1_bound(1.0).is_err());
        assert!(prop1_bound(-0.1).is_err());
    }

    #[test]
    fn verify_prop1_no_violations() {
        let mut rng = Rng::new(20);
        let report = verify_prop1(&mut rng, 50, &[4, 16], &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(report.violations, 0);
        assert!(report.min_slack >= -1e-9);
    }

    #[test]
    fn verify_prop1_r_zero_slack_zero() {
        let mut rng = Rng::new(21);
        let report = verify_prop1(&mut rng, 20, &[8], &[0.0]).unwrap();
        assert!(report.min_slack.abs() < 1e-12);
    }

    #[test]
    fn prop1_tightness_at_equality_condition() {
        // AM-GM equality when base . direction = -r.
        let r = 0.6f64;
        let d = 3;
        let base = UnitVec::from_vec(vec![1.0, 0.0, 0.0]).unwrap();
        // direction with cos(base, dir) = -r: (-r, sqrt(1-r^2), 0).
        let dir = array![-r, (1.0 - r * r).sqrt(), 0.0];
        let net = const_net(dir, d);
        let out = svdl_sample(&base, &net, r).unwrap();
        let c = cosine(out.view(), base.view()).unwrap();
        let slack = c - prop1_bound(r).unwrap();
        assert!(slack.abs() < 1e-6, "slack {slack}");
    }

    #[test]
    fn output_unit_norm() {
        let mut rng = Rng::new(33);
        for _ in 0..200 {
            let base = sample_unit(&mut rng, 5);
            let net = DenseNet::init(&mut rng, &[5, 6, 5], 0.2);
            let out = svdl_sample(&base, &net, 0.7).unwrap();
            assert!((norm(out.view()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_direction_returns_base() {
        let base = UnitVec::from_vec(vec![0.0, 1.0]).unwrap();
        let net = const_net(array![0.0, 0.0], 2);
        let b = base.view().insert_axis(Axis(0));
        let (out, cache) = svdl_forward(b, &net, 0.5).unwrap();
        assert_eq!(cache.degenerate_rows, vec![0]);
        assert_eq!(out.row(0), base.view());
    }

    #[test]
    fn rotation_equivariance() {
        // svdl(R base, R net R^T, r) = R svdl(base, net, r) for orthogonal R.
        let mut rng = Rng::new(47);
        let d = 4;
        let net = DenseNet::init(&mut rng, &[d, d], 0.2);
        // Single linear layer keeps conjugation exact (no hidden activations).
        let base = sample_unit(&mut rng, d);

        // Random rotation via Gram-Schmidt on Gaussian columns.
        let mut q: Vec<Array1<f64>> = Vec::new();
        while q.len() < d {
            let mut v = sample_gaussian(&mut rng, d);
            for u in &q {
                let p = u.dot(&v);
                v = &v - &u.mapv(|x| x * p);
            }
            let n = norm(v.view());
            if n > 1e-6 {
                q.push(v.mapv(|x| x / n));
            }
        }
        let rot = Array2::from_shape_fn((d, d), |(i, j)| q[i][j]);

        let mut conj = net.clone();
        conj.layers[0].w = rot.dot(&net.layers[0].w).dot(&rot.t());
        conj.layers[0].b = rot.dot(&net.layers[0].b);

        let rb = UnitVec::normalize(rot.dot(&base.view()).view()).unwrap();
        let lhs = svdl_sample(&rb, &conj, 0.7).unwrap();
        let rhs = rot.dot(&svdl_sample(&base, &net, 0.7).unwrap().view());
        for (a, b) in lhs.as_slice().iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(58);
        let d = 5;
        let net = DenseNet::init(&mut rng, &[d, 7, d], 0.2);
        let base = Array2::from_shape_fn((3, d), |_| rng.next_normal());
        // Normalize rows so bases sit on the sphere.
        let base = {
            let mut b = base;
            for mut row in b.rows_mut() {
                let n = norm(row.view());
                row.mapv_inplace(|x| x / n);
            }
            b
        };
        let dout = Array2::from_shape_fn((3, d), |_| rng.next_normal());
        let (_, cache) = svdl_forward(base.view(), &net, 0.7).unwrap();
        let (bundle, _) = svdl_backward(&net, &cache, dout.view()).unwrap();

        let flat = crate::net::flatten_params(&net);
        let analytic = crate::net::flatten_grads(&bundle);
        let mut probe = net.clone();
        let mut loss = |p: &[f64]| {
            crate::net::unflatten_params(&mut probe, p);
            let (out, _) = svdl_forward(base.view(), &probe, 0.7).unwrap();
            (&out * &dout).sum()
        };
        let err = crate::net::grad_check(&mut loss, &flat, &analytic, 1e-5).unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn prior_sample_behavior() {
        let pool = array![[1.0, 0.0], [0.0, 1.0]];
        let mut rng = Rng::new(3);
        let single = pool.slice(ndarray::s![0..1, ..]);
        for _ in 0..10 {
            assert_eq!(prior_sample(single, &mut rng).unwrap(), array![1.0, 0.0]);
        }
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            prior_sample(empty.view(), &mut rng),
            Err(VdlError::EmptyPool)
        ));
    }

    #[test]
    fn prior_sample_uniform() {
        let mut rng = Rng::new(5);
        let m = 10;
        let pool = Array2::from_shape_fn((m, 2), |(i, j)| if j == 0 { i as f64 } else { 1.0 });
        let n = 100_000;
        let mut counts = vec![0usize; m];
        for _ in 0..n {
            let row = prior_sample(pool.view(), &mut rng).unwrap();
            counts[row[0] as usize] += 1;
        }
        let p = 1.0 / m as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(((c as f64) - n as f64 * p).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn lafite_xi_zero_identity_with_clipgen() {
        let mut rng = Rng::new(7);
        let z = sample_unit(&mut rng, 8);
        let a = lafite_sample(&z, 0.0, &mut rng).unwrap();
        let b = clipgen_sample(&z);
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(b.as_slice(), z.as_slice());
    }

    #[test]
    fn lafite_noise_monotone_degradation() {
        let mut rng = Rng::new(9);
        let z = sample_unit(&mut rng, 16);
        let mean_cos = |xi: f64, rng: &mut Rng| {
            let n = 10_000;
            (0..n)
                .map(|_| {
                    let s = lafite_sample(&z, xi, rng).unwrap();
                    cosine(s.view(), z.view()).unwrap()
                })
                .sum::<f64>()
                / n as f64
        };
        let c1 = mean_cos(0.25, &mut rng);
        let c2 = mean_cos(0.5, &mut rng);
        let c3 = mean_cos(1.0, &mut rng);
        assert!(c1 > c2 && c2 > c3, "{c1} {c2} {c3}");
    }
}
