//! Python bindings for the hypersphere sampler, synthetic world, and stage-1
//! training loop.

// These two lints fire inside the #[pyfunction]/#[pymethods] macro
// expansions, not in code we control.
#![allow(clippy::useless_conversion)]
#![allow(clippy::type_complexity)]

use ndarray::{Array1, Array2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use vdl::data::{make_prior_pool, make_world, sample_pairs, PairedDataset, SyntheticWorld};
use vdl::trainer::{train_stage1, TrainConfig, VdlModel};
use vdl::{Rng, UnitVec};

fn err(e: vdl::VdlError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty matrix"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / d, d), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Project a vector onto the unit sphere.
#[pyfunction]
fn normalize(v: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(UnitVec::from_vec(v).map_err(err)?.into_inner().to_vec())
}

/// Cosine similarity of two vectors.
#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    vdl::cosine(Array1::from_vec(a).view(), Array1::from_vec(b).view()).map_err(err)
}

/// Cone-bound cos floor sqrt(1 - r^2) of the sampling operator.
#[pyfunction]
fn prop1_bound(r: f64) -> PyResult<f64> {
    vdl::prop1_bound(r).map_err(err)
}

/// Randomized verification of the cone bound; returns (trials, violations,
/// min_slack).
#[pyfunction]
#[pyo3(signature = (trials=1000, dims=vec![4, 16], rs=vec![0.3, 0.7], seed=42))]
fn verify_prop1(
    trials: usize,
    dims: Vec<usize>,
    rs: Vec<f64>,
    seed: u64,
) -> PyResult<(usize, usize, f64)> {
    let mut rng = Rng::new(seed).split("py.prop1");
    let rep = vdl::verify_prop1(&mut rng, trials, &dims, &rs).map_err(err)?;
    Ok((rep.trials, rep.violations, rep.min_slack))
}

/// The synthetic two-modality world.
#[pyclass]
struct World {
    inner: SyntheticWorld,
}

#[pymethods]
impl World {
    #[new]
    #[pyo3(signature = (seed=42, d=32, gap_cos=0.6, kappa=0.0))]
    fn new(seed: u64, d: usize, gap_cos: f64, kappa: f64) -> PyResult<World> {
        Ok(World {
            inner: make_world(seed, d, gap_cos, kappa).map_err(err)?,
        })
    }

    /// (images, texts) paired embedding matrices as nested lists.
    #[pyo3(signature = (n, seed=0))]
    fn sample_pairs(&self, n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut rng = Rng::new(seed).split("py.pairs");
        let ds = sample_pairs(&self.inner, n, &mut rng).map_err(err)?;
        Ok((to_rows(&ds.images), to_rows(&ds.texts)))
    }

    #[pyo3(signature = (m, seed=1))]
    fn prior_pool(&self, m: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let mut rng = Rng::new(seed).split("py.prior");
        Ok(to_rows(
            &make_prior_pool(&self.inner, m, &mut rng).map_err(err)?,
        ))
    }
}

/// A trained stage-1 model.
#[pyclass]
struct Model {
    inner: VdlModel,
    final_sim_txt: f64,
    final_sim_img: f64,
}

#[pymethods]
impl Model {
    /// Sample estimated text embeddings for a batch of image embeddings.
    fn sample_text(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let batch = from_rows(images)?;
        let (out, _) =
            vdl::sampler::svdl_forward(batch.view(), &self.inner.g, self.inner.svdl.r_txt)
                .map_err(err)?;
        Ok(to_rows(&out))
    }

    /// Reconstruct image embeddings from text embeddings via the decoder.
    fn reconstruct_image(&self, texts: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let batch = from_rows(texts)?;
        let (out, _) =
            vdl::sampler::svdl_forward(batch.view(), &self.inner.f, self.inner.svdl.r_img)
                .map_err(err)?;
        Ok(to_rows(&out))
    }

    #[getter]
    fn sim_txt(&self) -> f64 {
        self.final_sim_txt
    }

    #[getter]
    fn sim_img(&self) -> f64 {
        self.final_sim_img
    }
}

/// Train stage 1 on a freshly generated synthetic dataset and return the
/// model. Sizes default to a quick smoke-scale run, not the benchmark scale.
#[pyfunction]
#[pyo3(signature = (seed=42, d=8, gap_cos=0.6, kappa=0.0, n=512, iters=200, batch=16, width=32, depth=3))]
#[allow(clippy::too_many_arguments)]
fn train(
    seed: u64,
    d: usize,
    gap_cos: f64,
    kappa: f64,
    n: usize,
    iters: u64,
    batch: usize,
    width: usize,
    depth: usize,
) -> PyResult<Model> {
    let world = make_world(seed, d, gap_cos, kappa).map_err(err)?;
    let mut rng = Rng::new(seed).split("py.train.data");
    let data: PairedDataset = sample_pairs(&world, n, &mut rng).map_err(err)?;
    let pool = make_prior_pool(&world, n, &mut rng).map_err(err)?;
    let config = TrainConfig {
        d,
        batch,
        iters,
        width,
        depth,
        adv_depth: 2.max(depth / 2),
        seed,
        eval_every: iters.max(1),
        eval_holdout: (n / 4).max(4),
        ..TrainConfig::default()
    };
    let (model, history) = train_stage1(config, &data, &pool).map_err(err)?;
    let last = history
        .last()
        .ok_or_else(|| PyValueError::new_err("empty history"))?;
    Ok(Model {
        inner: model,
        final_sim_txt: last.sim_txt,
        final_sim_img: last.sim_img,
    })
}

#[pymodule]
fn vdl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(prop1_bound, m)?)?;
    m.add_function(wrap_pyfunction!(verify_prop1, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<World>()?;
    m.add_class::<Model>()?;
    Ok(())
}
