//! Synthetic two-modality world, paired datasets, and all on-disk formats.
//!
//! The world hides a direction field on the sphere: each content point u maps
//! to an image embedding z_img = u and a text embedding rotated away from u by
//! a fixed angular gap along the field, plus optional tangent noise. Every
//! generated row is a pure function of (world, stream), so regeneration from
//! the recorded seed is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VdlError};
use crate::numerics::{norm, sample_gaussian, sample_unit, Rng, UnitVec};

pub type EmbeddingBatch = Array2<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub seed: u64,
    pub d: usize,
    pub gap_cos: f64,
    pub kappa: f64,
    /// Toy image dimension for the render map.
    pub d_x: usize,
}

/// Hidden cross-modal map generating paired embeddings with a controlled
/// angular gap.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    /// Direction field matrix, fixed at creation.
    pub m: Array2<f64>,
    pub render_w: Array2<f64>,
    pub render_b: Array1<f64>,
}

pub fn make_world(seed: u64, d: usize, gap_cos: f64, kappa: f64) -> Result<SyntheticWorld> {
    make_world_with_dx(seed, d, gap_cos, kappa, 64)
}

pub fn make_world_with_dx(
    seed: u64,
    d: usize,
    gap_cos: f64,
    kappa: f64,
    d_x: usize,
) -> Result<SyntheticWorld> {
    if d < 2 {
        return Err(VdlError::RangeError {
            what: "d",
            value: d as f64,
        });
    }
    if !(gap_cos > 0.0 && gap_cos <= 1.0) {
        return Err(VdlError::RangeError {
            what: "gap_cos",
            value: gap_cos,
        });
    }
    if kappa < 0.0 {
        return Err(VdlError::RangeError {
            what: "kappa",
            value: kappa,
        });
    }
    let root = Rng::new(seed);
    let mut wrng = root.split("world.direction_field");
    let m = Array2::from_shape_fn((d, d), |_| wrng.next_normal());
    let mut rrng = root.split("world.render");
    let render_w = Array2::from_shape_fn((d_x, d), |_| rrng.next_normal());
    let render_b = Array1::from_shape_fn(d_x, |_| 0.1 * rrng.next_normal());
    Ok(SyntheticWorld {
        params: WorldParams {
            seed,
            d,
            gap_cos,
            kappa,
            d_x,
        },
        m,
        render_w,
        render_b,
    })
}

impl SyntheticWorld {
    /// Unit tangent direction of the field at u, if non-degenerate.
    fn direction(&self, u: ArrayView1<f64>) -> Option<Array1<f64>> {
        let mu = self.m.dot(&u);
        let proj = u.dot(&mu);
        let tang = &mu - &u.mapv(|x| x * proj);
        let tn = norm(tang.view());
        if tn <= 1e-9 {
            return None;
        }
        Some(tang.mapv(|x| x / tn))
    }

    /// Deterministic toy image of a content point.
    pub fn render(&self, content: ArrayView1<f64>) -> Array1<f64> {
        (self.render_w.dot(&content) + &self.render_b).mapv(f64::tanh)
    }

    /// Generate one (content, z_img, z_txt) triple.
    fn gen_row(&self, rng: &mut Rng, retries: &mut u64) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let d = self.params.d;
        let mut u = sample_unit(rng, d).into_inner();
        let dir = loop {
            match self.direction(u.view()) {
                Some(dir) => break dir,
                None => {
                    *retries += 1;
                    let eps = sample_gaussian(rng, d);
                    let v = &u + &eps.mapv(|x| 1e-3 * x);
                    u = UnitVec::normalize(v.view())
                        .expect("perturbed content")
                        .into_inner();
                }
            }
        };
        let gap = self.params.gap_cos;
        let sin = (1.0 - gap * gap).sqrt();
        let mut raw = &u.mapv(|x| gap * x) + &dir.mapv(|x| sin * x);
        if self.params.kappa > 0.0 {
            let eps = sample_gaussian(rng, d);
            let proj = u.dot(&eps);
            let tang_noise = &eps - &u.mapv(|x| x * proj);
            raw = &raw + &tang_noise.mapv(|x| self.params.kappa * x);
        }
        let z_txt = UnitVec::normalize(raw.view())
            .expect("text embedding")
            .into_inner();
        (u.clone(), u, z_txt)
    }
}

/// Paired embeddings with hidden ground-truth content and a labeled mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub images: Array2<f64>,
    pub texts: Array2<f64>,
    pub labeled: Vec<bool>,
    /// Hidden content rows; test/stage-2 use only.
    pub content: Array2<f64>,
    /// Degenerate direction-field retries during generation.
    pub retries: u64,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.ncols()
    }

    /// Mark the first round(n * ratio) rows labeled.
    pub fn set_labeled_ratio(&mut self, ratio: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(VdlError::RangeError {
                what: "semi_ratio",
                value: ratio,
            });
        }
        let k = (self.len() as f64 * ratio).round() as usize;
        for (i, l) in self.labeled.iter_mut().enumerate() {
            *l = i < k;
        }
        Ok(())
    }
}

pub fn sample_pairs(world: &SyntheticWorld, n: usize, rng: &mut Rng) -> Result<PairedDataset> {
    if n == 0 {
        return Err(VdlError::RangeError {
            what: "n",
            value: 0.0,
        });
    }
    let d = world.params.d;
    let mut images = Array2::zeros((n, d));
    let mut texts = Array2::zeros((n, d));
    let mut content = Array2::zeros((n, d));
    let mut retries = 0;
    for i in 0..n {
        let (u, zi, zt) = world.gen_row(rng, &mut retries);
        content.row_mut(i).assign(&u);
        images.row_mut(i).assign(&zi);
        texts.row_mut(i).assign(&zt);
    }
    Ok(PairedDataset {
        images,
        texts,
        labeled: vec![false; n],
        content,
        retries,
    })
}

/// Unpaired text embeddings generated exactly like the paired texts, from a
/// disjoint content stream.
pub fn make_prior_pool(world: &SyntheticWorld, m: usize, rng: &mut Rng) -> Result<EmbeddingBatch> {
    if m == 0 {
        return Err(VdlError::RangeError {
            what: "m",
            value: 0.0,
        });
    }
    let mut pool = Array2::zeros((m, world.params.d));
    let mut retries = 0;
    for i in 0..m {
        let (_, _, zt) = world.gen_row(rng, &mut retries);
        pool.row_mut(i).assign(&zt);
    }
    Ok(pool)
}

// ---------------------------------------------------------------------------
// Embedding file format: magic "VDLE", version u16 LE, dim u32 LE,
// count u64 LE, then count x dim f64 LE row-major.
// ---------------------------------------------------------------------------

const EMB_MAGIC: [u8; 4] = *b"VDLE";
const EMB_VERSION: u16 = 1;

pub fn write_embeddings(path: &Path, batch: ArrayView2<f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&EMB_MAGIC)?;
    out.write_all(&EMB_VERSION.to_le_bytes())?;
    out.write_all(&(batch.ncols() as u32).to_le_bytes())?;
    out.write_all(&(batch.nrows() as u64).to_le_bytes())?;
    for row in batch.rows() {
        for v in row {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingBatch> {
    let file_len = std::fs::metadata(path)?.len();
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_ctx(&mut file, &mut magic, "embedding header")?;
    if magic != EMB_MAGIC {
        return Err(VdlError::BadMagic {
            expected: EMB_MAGIC,
            got: magic,
        });
    }
    let version = read_u16(&mut file, "embedding version")?;
    if version != EMB_VERSION {
        return Err(VdlError::VersionMismatch {
            got: version,
            supported: EMB_VERSION,
        });
    }
    let dim = read_u32(&mut file, "embedding dim")? as usize;
    let count = read_u64(&mut file, "embedding count")? as usize;
    let header = 4 + 2 + 4 + 8u64;
    let expected = dim
        .checked_mul(count)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| (n as u64).checked_add(header));
    if dim == 0 || count == 0 || expected != Some(file_len) {
        return Err(VdlError::CorruptLength {
            context: format!("declared shape {count}x{dim} disagrees with file length {file_len}"),
        });
    }
    let mut data = vec![0.0f64; dim * count];
    for v in data.iter_mut() {
        *v = read_f64(&mut file, "embedding payload")?;
    }
    let mut rest = [0u8; 1];
    if file.read(&mut rest)? != 0 {
        return Err(VdlError::CorruptLength {
            context: "trailing bytes after embedding payload".into(),
        });
    }
    Array2::from_shape_vec((count, dim), data).map_err(|e| VdlError::CorruptLength {
        context: e.to_string(),
    })
}

fn read_exact_ctx(r: &mut impl Read, buf: &mut [u8], context: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            VdlError::CorruptLength {
                context: format!("truncated while reading {context}"),
            }
        } else {
            VdlError::Io(e)
        }
    })
}

macro_rules! reader {
    ($name:ident, $ty:ty, $n:expr) => {
        fn $name(r: &mut impl Read, context: &str) -> Result<$ty> {
            let mut b = [0u8; $n];
            read_exact_ctx(r, &mut b, context)?;
            Ok(<$ty>::from_le_bytes(b))
        }
    };
}
reader!(read_u16, u16, 2);
reader!(read_u32, u32, 4);
reader!(read_u64, u64, 8);
reader!(read_f64, f64, 8);
reader!(read_u8, u8, 1);

// ---------------------------------------------------------------------------
// Checkpoint container: magic "VDLC", version u16 LE, tensor count u32 LE,
// then per tensor (name length u16 LE, name bytes, rank u8, dims u32 LE each,
// payload f64 LE), then the PRNG record (algorithm string, 4 x u64 state,
// seed u64) and a length-prefixed JSON trailer echoing the configuration.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: [u8; 4] = *b"VDLC";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_array2(name: &str, a: &Array2<f64>) -> NamedTensor {
        NamedTensor {
            name: name.into(),
            dims: vec![a.nrows(), a.ncols()],
            data: a.iter().cloned().collect(),
        }
    }

    pub fn from_array1(name: &str, a: &Array1<f64>) -> NamedTensor {
        NamedTensor {
            name: name.into(),
            dims: vec![a.len()],
            data: a.to_vec(),
        }
    }

    pub fn scalar(name: &str, v: f64) -> NamedTensor {
        NamedTensor {
            name: name.into(),
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(VdlError::ShapeMismatch {
                expected: "rank 2".into(),
                got: format!("rank {}", self.dims.len()),
                context: "checkpoint tensor",
            });
        }
        Array2::from_shape_vec((self.dims[0], self.dims[1]), self.data.clone()).map_err(|e| {
            VdlError::CorruptLength {
                context: e.to_string(),
            }
        })
    }

    pub fn to_array1(&self) -> Result<Array1<f64>> {
        if self.dims.len() != 1 {
            return Err(VdlError::ShapeMismatch {
                expected: "rank 1".into(),
                got: format!("rank {}", self.dims.len()),
                context: "checkpoint tensor",
            });
        }
        Ok(Array1::from_vec(self.data.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub algorithm: String,
    pub state: [u64; 4],
    pub seed: u64,
}

pub fn write_checkpoint_container(
    path: &Path,
    tensors: &[NamedTensor],
    rng: &RngRecord,
    config_json: &serde_json::Value,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&CKPT_MAGIC)?;
    out.write_all(&CKPT_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(t.dims.len() as u8).to_le_bytes())?;
        let mut expect = 1usize;
        for &d in &t.dims {
            out.write_all(&(d as u32).to_le_bytes())?;
            expect *= d;
        }
        assert_eq!(expect, t.data.len(), "tensor {} payload", t.name);
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    let alg = rng.algorithm.as_bytes();
    out.write_all(&(alg.len() as u16).to_le_bytes())?;
    out.write_all(alg)?;
    for s in rng.state {
        out.write_all(&s.to_le_bytes())?;
    }
    out.write_all(&rng.seed.to_le_bytes())?;
    let json = serde_json::to_vec(config_json)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint_container(
    path: &Path,
) -> Result<(Vec<NamedTensor>, RngRecord, serde_json::Value)> {
    let file_len = std::fs::metadata(path)?.len();
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_ctx(&mut file, &mut magic, "checkpoint header")?;
    if magic != CKPT_MAGIC {
        return Err(VdlError::BadMagic {
            expected: CKPT_MAGIC,
            got: magic,
        });
    }
    let version = read_u16(&mut file, "checkpoint version")?;
    if version != CKPT_VERSION {
        return Err(VdlError::VersionMismatch {
            got: version,
            supported: CKPT_VERSION,
        });
    }
    let count = read_u32(&mut file, "tensor count")? as usize;
    if count > 1 << 20 {
        return Err(VdlError::CorruptLength {
            context: format!("implausible tensor count {count}"),
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut file, "tensor name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact_ctx(&mut file, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|e| VdlError::CorruptLength {
            context: format!("tensor name not utf-8: {e}"),
        })?;
        let rank = read_u8(&mut file, "tensor rank")? as usize;
        if rank > 8 {
            return Err(VdlError::CorruptLength {
                context: format!("implausible rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = read_u32(&mut file, "tensor dim")? as usize;
            len = len.checked_mul(d).ok_or_else(|| VdlError::CorruptLength {
                context: "tensor size overflow".into(),
            })?;
            dims.push(d);
        }
        if (len as u64).saturating_mul(8) > file_len {
            return Err(VdlError::CorruptLength {
                context: format!("implausible tensor size {len}"),
            });
        }
        let mut data = vec![0.0f64; len];
        for v in data.iter_mut() {
            *v = read_f64(&mut file, "tensor payload")?;
        }
        tensors.push(NamedTensor { name, dims, data });
    }
    let alg_len = read_u16(&mut file, "rng algorithm length")? as usize;
    if alg_len > 256 {
        return Err(VdlError::CorruptLength {
            context: "implausible algorithm name".into(),
        });
    }
    let mut alg = vec![0u8; alg_len];
    read_exact_ctx(&mut file, &mut alg, "rng algorithm")?;
    let algorithm = String::from_utf8(alg).map_err(|e| VdlError::CorruptLength {
        context: format!("rng algorithm not utf-8: {e}"),
    })?;
    let mut state = [0u64; 4];
    for s in state.iter_mut() {
        *s = read_u64(&mut file, "rng state")?;
    }
    let seed = read_u64(&mut file, "rng seed")?;
    let json_len = read_u32(&mut file, "config length")? as usize;
    if json_len as u64 > file_len {
        return Err(VdlError::CorruptLength {
            context: "implausible config length".into(),
        });
    }
    let mut json = vec![0u8; json_len];
    read_exact_ctx(&mut file, &mut json, "config echo")?;
    let config: serde_json::Value = serde_json::from_slice(&json)?;
    let mut rest = [0u8; 1];
    if file.read(&mut rest)? != 0 {
        return Err(VdlError::CorruptLength {
            context: "trailing bytes after checkpoint".into(),
        });
    }
    Ok((
        tensors,
        RngRecord {
            algorithm,
            state,
            seed,
        },
        config,
    ))
}

// ---------------------------------------------------------------------------
// Full training-state checkpoints on top of the container format.
// ---------------------------------------------------------------------------

fn push_net(tensors: &mut Vec<NamedTensor>, prefix: &str, net: &crate::net::DenseNet) {
    for (k, l) in net.layers.iter().enumerate() {
        tensors.push(NamedTensor::from_array2(&format!("{prefix}.w{k}"), &l.w));
        tensors.push(NamedTensor::from_array1(&format!("{prefix}.b{k}"), &l.b));
    }
}

fn push_adam(tensors: &mut Vec<NamedTensor>, prefix: &str, a: &crate::net::AdamState) {
    for k in 0..a.m_w.len() {
        tensors.push(NamedTensor::from_array2(
            &format!("{prefix}.m_w{k}"),
            &a.m_w[k],
        ));
        tensors.push(NamedTensor::from_array2(
            &format!("{prefix}.v_w{k}"),
            &a.v_w[k],
        ));
        tensors.push(NamedTensor::from_array1(
            &format!("{prefix}.m_b{k}"),
            &a.m_b[k],
        ));
        tensors.push(NamedTensor::from_array1(
            &format!("{prefix}.v_b{k}"),
            &a.v_b[k],
        ));
    }
}

fn find<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| VdlError::CorruptLength {
            context: format!("missing tensor {name}"),
        })
}

fn take_net(tensors: &[NamedTensor], prefix: &str, alpha: f64) -> Result<crate::net::DenseNet> {
    let mut layers = Vec::new();
    let mut k = 0;
    while let Ok(w) = find(tensors, &format!("{prefix}.w{k}")) {
        let b = find(tensors, &format!("{prefix}.b{k}"))?;
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
    Ok(crate::net::DenseNet { layers, alpha })
}

fn take_adam(
    tensors: &[NamedTensor],
    prefix: &str,
    meta: &serde_json::Value,
) -> Result<crate::net::AdamState> {
    let mut m_w = Vec::new();
    let mut v_w = Vec::new();
    let mut m_b = Vec::new();
    let mut v_b = Vec::new();
    let mut k = 0;
    while let Ok(m) = find(tensors, &format!("{prefix}.m_w{k}")) {
        m_w.push(m.to_array2()?);
        v_w.push(find(tensors, &format!("{prefix}.v_w{k}"))?.to_array2()?);
        m_b.push(find(tensors, &format!("{prefix}.m_b{k}"))?.to_array1()?);
        v_b.push(find(tensors, &format!("{prefix}.v_b{k}"))?.to_array1()?);
        k += 1;
    }
    let field = |key: &str| -> Result<f64> {
        meta.get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| VdlError::CorruptLength {
                context: format!("adam meta {key}"),
            })
    };
    Ok(crate::net::AdamState {
        m_w,
        v_w,
        m_b,
        v_b,
        t: field("t")? as u64,
        beta1: field("beta1")?,
        beta2: field("beta2")?,
        eps: field("eps")?,
        lr: field("lr")?,
    })
}

fn adam_meta(a: &crate::net::AdamState) -> serde_json::Value {
    serde_json::json!({
        "t": a.t, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "lr": a.lr,
    })
}

fn rng_record(rng: &Rng) -> RngRecord {
    RngRecord {
        algorithm: crate::numerics::RNG_ALGORITHM.into(),
        state: rng.state(),
        seed: rng.seed(),
    }
}

fn rng_from_record(rec: &RngRecord) -> Result<Rng> {
    if rec.algorithm != crate::numerics::RNG_ALGORITHM {
        return Err(VdlError::Config(format!(
            "unsupported PRNG algorithm {}",
            rec.algorithm
        )));
    }
    Ok(Rng::from_state(rec.state, rec.seed))
}

pub fn save_checkpoint(path: &Path, state: &crate::trainer::TrainState) -> Result<()> {
    let mut tensors = Vec::new();
    push_net(&mut tensors, "g", &state.model.g);
    push_net(&mut tensors, "f", &state.model.f);
    push_net(&mut tensors, "d", &state.model.d);
    if let Some(t) = &state.model.t {
        push_net(&mut tensors, "t", t);
    }
    push_adam(&mut tensors, "adam_g", &state.adam_g);
    push_adam(&mut tensors, "adam_f", &state.adam_f);
    push_adam(&mut tensors, "adam_adv", &state.adam_adv);
    let trailer = serde_json::json!({
        "config": state.config,
        "iteration": state.iteration,
        "dv_ema": state.dv_ema,
        "has_critic": state.model.t.is_some(),
        "rng": {
            "batch": rng_record(&state.rng_batch),
            "prior": rng_record(&state.rng_prior),
            "triplet": rng_record(&state.rng_triplet),
        },
        "adam": {
            "g": adam_meta(&state.adam_g),
            "f": adam_meta(&state.adam_f),
            "adv": adam_meta(&state.adam_adv),
        },
        "history": state.history,
    });
    write_checkpoint_container(path, &tensors, &rng_record(&state.rng_batch), &trailer)
}

pub fn load_checkpoint(path: &Path) -> Result<crate::trainer::TrainState> {
    let (tensors, _, trailer) = read_checkpoint_container(path)?;
    let get = |key: &str| -> Result<&serde_json::Value> {
        trailer.get(key).ok_or_else(|| VdlError::CorruptLength {
            context: format!("missing trailer key {key}"),
        })
    };
    let config: crate::trainer::TrainConfig = serde_json::from_value(get("config")?.clone())?;
    let alpha = config.alpha;
    let g = take_net(&tensors, "g", alpha)?;
    let f = take_net(&tensors, "f", alpha)?;
    let d = take_net(&tensors, "d", alpha)?;
    if g.input_dim() != config.d || f.input_dim() != config.d {
        return Err(VdlError::ShapeMismatch {
            expected: config.d.to_string(),
            got: g.input_dim().to_string(),
            context: "checkpoint model dim vs config",
        });
    }
    let has_critic = get("has_critic")?.as_bool().unwrap_or(false);
    let t = if has_critic {
        Some(take_net(&tensors, "t", alpha)?)
    } else {
        None
    };
    let adam_json = get("adam")?;
    let adam_sub = |k: &str| -> Result<&serde_json::Value> {
        adam_json.get(k).ok_or_else(|| VdlError::CorruptLength {
            context: format!("missing adam.{k}"),
        })
    };
    let rng_json = get("rng")?;
    let rng_sub = |k: &str| -> Result<Rng> {
        let rec: RngRecord = serde_json::from_value(
            rng_json
                .get(k)
                .ok_or_else(|| VdlError::CorruptLength {
                    context: format!("missing rng.{k}"),
                })?
                .clone(),
        )?;
        rng_from_record(&rec)
    };
    let history: Vec<crate::metrics::MetricsReport> =
        serde_json::from_value(get("history")?.clone())?;
    Ok(crate::trainer::TrainState {
        model: crate::trainer::VdlModel {
            g,
            f,
            d,
            t,
            svdl: config.svdl,
            weights: config.weights,
        },
        adam_g: take_adam(&tensors, "adam_g", adam_sub("g")?)?,
        adam_f: take_adam(&tensors, "adam_f", adam_sub("f")?)?,
        adam_adv: take_adam(&tensors, "adam_adv", adam_sub("adv")?)?,
        dv_ema: serde_json::from_value(get("dv_ema")?.clone())?,
        iteration: get("iteration")?
            .as_u64()
            .ok_or_else(|| VdlError::CorruptLength {
                context: "iteration not u64".into(),
            })?,
        config,
        rng_batch: rng_sub("batch")?,
        rng_prior: rng_sub("prior")?,
        rng_triplet: rng_sub("triplet")?,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;

    #[test]
    fn world_reproducible() {
        let a = make_world(42, 8, 0.6, 0.0).unwrap();
        let b = make_world(42, 8, 0.6, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_seeds_distinct_fields() {
        let a = make_world(1, 16, 0.6, 0.0).unwrap();
        let b = make_world(2, 16, 0.6, 0.0).unwrap();
        let differing = a.m.iter().zip(b.m.iter()).filter(|(x, y)| x != y).count();
        assert!(differing as f64 >= 0.99 * a.m.len() as f64);
    }

    #[test]
    fn zero_gap_pairs_identical() {
        let world = make_world(3, 8, 1.0, 0.0).unwrap();
        let mut rng = Rng::new(5);
        let ds = sample_pairs(&world, 32, &mut rng).unwrap();
        for (i, t) in ds.images.rows().into_iter().zip(ds.texts.rows()) {
            for (a, b) in i.iter().zip(t.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_gap_exact() {
        let world = make_world(7, 32, 0.6, 0.0).unwrap();
        let mut rng = Rng::new(9);
        let ds = sample_pairs(&world, 256, &mut rng).unwrap();
        for (i, t) in ds.images.rows().into_iter().zip(ds.texts.rows()) {
            let c = cosine(i, t).unwrap();
            assert!((c - 0.6).abs() < 1e-9, "pair cosine {c}");
            assert!((norm(i) - 1.0).abs() < 1e-9);
            assert!((norm(t) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn prior_pool_matches_paired_marginal() {
        let world = make_world(11, 8, 0.6, 0.0).unwrap();
        let mut rng = Rng::new(13);
        let n = 10_000;
        let ds = sample_pairs(&world, n, &mut rng).unwrap();
        let pool = make_prior_pool(&world, n, &mut rng).unwrap();
        for c in 0..8 {
            let a = ds.texts.column(c).sum() / n as f64;
            let b = pool.column(c).sum() / n as f64;
            assert!((a - b).abs() < 0.02, "column {c}: {a} vs {b}");
        }
        for row in pool.rows() {
            assert!((norm(row) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_pure_function_of_stream() {
        let world = make_world(17, 8, 0.6, 0.2).unwrap();
        let a = sample_pairs(&world, 64, &mut Rng::new(19)).unwrap();
        let b = sample_pairs(&world, 64, &mut Rng::new(19)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn labeled_ratio() {
        let world = make_world(1, 4, 0.6, 0.0).unwrap();
        let mut ds = sample_pairs(&world, 100, &mut Rng::new(2)).unwrap();
        ds.set_labeled_ratio(0.2).unwrap();
        assert_eq!(ds.labeled.iter().filter(|&&b| b).count(), 20);
        assert!(ds.set_labeled_ratio(1.5).is_err());
    }

    #[test]
    fn embeddings_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.vdle");
        let mut rng = Rng::new(3);
        let batch = Array2::from_shape_fn((17, 5), |_| rng.next_normal());
        write_embeddings(&path, batch.view()).unwrap();
        let got = read_embeddings(&path).unwrap();
        assert_eq!(got, batch);
    }

    #[test]
    fn embeddings_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vdle");
        let batch = Array2::from_elem((4, 3), 1.0);
        write_embeddings(&path, batch.view()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(VdlError::CorruptLength { .. })
        ));
    }

    #[test]
    fn embeddings_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vdle");
        let batch = Array2::from_elem((2, 2), 0.5);
        write_embeddings(&path, batch.view()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(VdlError::BadMagic { .. })
        ));
    }

    #[test]
    fn embeddings_header_fuzz_no_silent_success() {
        // Any single-byte header mutation must either fail or change payload.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vdle");
        let mut rng = Rng::new(9);
        let batch = Array2::from_shape_fn((6, 4), |_| rng.next_normal());
        write_embeddings(&path, batch.view()).unwrap();
        let orig = std::fs::read(&path).unwrap();
        let header_len = 4 + 2 + 4 + 8;
        let mut silent = 0;
        for _ in 0..1000 {
            let pos = rng.next_index(header_len);
            let bit = 1u8 << rng.next_index(8);
            let mut mutated = orig.clone();
            mutated[pos] ^= bit;
            if mutated == orig {
                continue;
            }
            std::fs::write(&path, &mutated).unwrap();
            if let Ok(read) = read_embeddings(&path) {
                if read == batch {
                    silent += 1;
                }
            }
        }
        assert_eq!(silent, 0);
    }

    #[test]
    fn checkpoint_container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.vdlc");
        let tensors = vec![
            NamedTensor::from_array2("g.w0", &Array2::from_elem((2, 3), 1.5)),
            NamedTensor::from_array1("g.b0", &Array1::from_vec(vec![0.25, -1.0])),
            NamedTensor::scalar("iter", 7.0),
        ];
        let rng = RngRecord {
            algorithm: "xoshiro256++".into(),
            state: [1, 2, 3, 4],
            seed: 42,
        };
        let config = serde_json::json!({"d": 8, "lr": 0.001});
        write_checkpoint_container(&path, &tensors, &rng, &config).unwrap();
        let (t2, r2, c2) = read_checkpoint_container(&path).unwrap();
        assert_eq!(t2, tensors);
        assert_eq!(r2, rng);
        assert_eq!(c2, config);
    }

    #[test]
    fn checkpoint_resume_bitwise() {
        let world = make_world(21, 8, 0.6, 0.0).unwrap();
        let mut rng = Rng::new(22);
        let data = sample_pairs(&world, 200, &mut rng).unwrap();
        let pool = make_prior_pool(&world, 200, &mut rng).unwrap();
        let cfg = crate::trainer::TrainConfig {
            d: 8,
            batch: 8,
            iters: 40,
            eval_every: 10,
            width: 16,
            depth: 3,
            adv_depth: 2,
            eval_holdout: 32,
            ..crate::trainer::TrainConfig::default()
        };

        // Uninterrupted run.
        let mut full = crate::trainer::TrainState::new(cfg.clone()).unwrap();
        crate::trainer::train(&mut full, &data, &pool).unwrap();

        // Interrupted at 20, checkpointed, reloaded, continued.
        let mut half_cfg = cfg.clone();
        half_cfg.iters = 20;
        let mut half = crate::trainer::TrainState::new(half_cfg).unwrap();
        crate::trainer::train(&mut half, &data, &pool).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.vdlc");
        half.config.iters = cfg.iters; // resume target recorded in the echo
        save_checkpoint(&path, &half).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        crate::trainer::train(&mut resumed, &data, &pool).unwrap();

        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.model.g, full.model.g);
        assert_eq!(resumed.model.f, full.model.f);
        assert_eq!(resumed.model.d, full.model.d);
        assert_eq!(resumed.adam_g, full.adam_g);
    }

    #[test]
    fn checkpoint_fresh_model_roundtrips_forward() {
        let cfg = crate::trainer::TrainConfig {
            d: 8,
            batch: 8,
            width: 16,
            depth: 3,
            adv_depth: 2,
            ..crate::trainer::TrainConfig::default()
        };
        let state = crate::trainer::TrainState::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fresh.vdlc");
        save_checkpoint(&path, &state).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut rng = Rng::new(1);
        let x = Array2::from_shape_fn((4, 8), |_| rng.next_normal());
        let (y1, _) = state.model.g.forward(x.view()).unwrap();
        let (y2, _) = loaded.model.g.forward(x.view()).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(loaded.iteration, 0);
        assert_eq!(loaded.config, state.config);
    }

    #[test]
    fn checkpoint_dim_mismatch_rejected() {
        let cfg = crate::trainer::TrainConfig {
            d: 8,
            batch: 8,
            width: 16,
            depth: 3,
            adv_depth: 2,
            ..crate::trainer::TrainConfig::default()
        };
        let state = crate::trainer::TrainState::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dim.vdlc");

        // Corrupt the echo so the declared dim disagrees with the tensors.
        let mut tampered = state.clone();
        tampered.config.d = 16;
        save_checkpoint(&path, &tampered).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(VdlError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.vdlc");
        let rng = RngRecord {
            algorithm: "x".into(),
            state: [0; 4],
            seed: 0,
        };
        write_checkpoint_container(&path, &[], &rng, &serde_json::json!({})).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[2] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint_container(&path),
            Err(VdlError::BadMagic { .. })
        ));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[2] = b'L';
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint_container(&path),
            Err(VdlError::VersionMismatch { .. })
        ));
    }
}
