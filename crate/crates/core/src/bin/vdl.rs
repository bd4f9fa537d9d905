//! Command-line entry point for the full pipeline: data generation, training,
//! evaluation, property verification, and toy text-to-image inference.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array2;

use vdl::config::{apply_kv, load_config_file};
use vdl::data::{
    load_checkpoint, make_prior_pool, make_world_with_dx, read_embeddings, sample_pairs,
    save_checkpoint, write_embeddings, PairedDataset,
};
use vdl::error::VdlError;
use vdl::gradcheck::run_suite;
use vdl::metrics::{compare_baselines, write_report, write_report_csv};
use vdl::sampler::verify_prop1;
use vdl::stage2::{
    infer_t2i, init_generator, load_generator, save_generator, train_stage2, Stage2Config,
};
use vdl::trainer::{eval_model, split_holdout, train, TrainConfig, TrainState};
use vdl::{Rng, UnitVec};

#[derive(Parser)]
#[command(
    name = "vdl",
    version,
    about = "Variational distribution learning on the hypersphere"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset plus prior pool into a directory.
    GenData {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4096)]
        count: usize,
        #[arg(long, default_value_t = 0.6)]
        gap_cos: f64,
        /// Tangent noise scale kappa.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        semi_ratio: f64,
        /// Prior pool size.
        #[arg(long, default_value_t = 4096)]
        pool: usize,
        /// Toy image dimension used by stage 2.
        #[arg(long, default_value_t = 64)]
        d_x: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run stage-1 training.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// History file (newline-delimited JSON). Defaults next to the checkpoint.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write a CSV copy of the history.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, value_parser = ["js", "dv"])]
        divergence: Option<String>,
        /// Use the labeled subset (requires a dataset generated with --semi-ratio > 0).
        #[arg(long)]
        semi: bool,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override any config key, repeatable: --set key=value.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset; optionally compare baselines.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        baselines: bool,
        /// LAFITE perturbation scale.
        #[arg(long, default_value_t = 0.75)]
        xi: f64,
    },
    /// Verify the cone bound over randomized trials.
    CheckProp1 {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![4usize, 16, 64])]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 0.5, 0.7, 0.9])]
        rs: Vec<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        /// all | adv_d | adv_g | r1 | recon | rkd | semi | dv_critic | dv_gen | total
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Train the toy conditional second stage against a frozen checkpoint.
    Stage2Train {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        iters: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Ablation: zero the conditioning code.
        #[arg(long)]
        zero_conditioning: bool,
    },
    /// Toy text-to-image inference from a text embedding file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        /// Embedding file; every row is inferred.
        #[arg(long)]
        text_emb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DataMeta {
    seed: u64,
    d: usize,
    gap_cos: f64,
    kappa: f64,
    d_x: usize,
    count: usize,
    pool: usize,
    semi_ratio: f64,
}

fn load_dataset(dir: &Path) -> vdl::Result<(PairedDataset, Array2<f64>, DataMeta)> {
    let meta: DataMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metadata.json"))?)?;
    let images = read_embeddings(&dir.join("images.vdle"))?;
    let texts = read_embeddings(&dir.join("texts.vdle"))?;
    let mask = read_embeddings(&dir.join("mask.vdle"))?;
    let pool = read_embeddings(&dir.join("prior.vdle"))?;
    if images.dim() != texts.dim() || mask.nrows() != images.nrows() {
        return Err(VdlError::ShapeMismatch {
            expected: format!("{:?}", images.dim()),
            got: format!("{:?} / mask {}", texts.dim(), mask.nrows()),
            context: "dataset directory",
        });
    }
    let labeled: Vec<bool> = mask.column(0).iter().map(|&v| v != 0.0).collect();
    let content = Array2::zeros(images.dim());
    Ok((
        PairedDataset {
            images,
            texts,
            labeled,
            content,
            retries: 0,
        },
        pool,
        meta,
    ))
}

/// Regenerate the hidden world and content-bearing dataset from the metadata.
fn regen_world_and_data(
    meta: &DataMeta,
) -> vdl::Result<(vdl::data::SyntheticWorld, PairedDataset)> {
    let world = make_world_with_dx(meta.seed, meta.d, meta.gap_cos, meta.kappa, meta.d_x)?;
    let mut rng = Rng::new(meta.seed).split("data.pairs");
    let mut data = sample_pairs(&world, meta.count, &mut rng)?;
    data.set_labeled_ratio(meta.semi_ratio)?;
    Ok((world, data))
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    seed: u64,
    dim: usize,
    count: usize,
    gap_cos: f64,
    noise: f64,
    semi_ratio: f64,
    pool_size: usize,
    d_x: usize,
    out: &Path,
) -> vdl::Result<()> {
    let world = make_world_with_dx(seed, dim, gap_cos, noise, d_x)?;
    let mut rng_pairs = Rng::new(seed).split("data.pairs");
    let mut data = sample_pairs(&world, count, &mut rng_pairs)?;
    data.set_labeled_ratio(semi_ratio)?;
    let mut rng_pool = Rng::new(seed).split("data.prior");
    let pool = make_prior_pool(&world, pool_size, &mut rng_pool)?;

    std::fs::create_dir_all(out)?;
    write_embeddings(&out.join("images.vdle"), data.images.view())?;
    write_embeddings(&out.join("texts.vdle"), data.texts.view())?;
    let mask = Array2::from_shape_fn((count, 1), |(i, _)| if data.labeled[i] { 1.0 } else { 0.0 });
    write_embeddings(&out.join("mask.vdle"), mask.view())?;
    write_embeddings(&out.join("prior.vdle"), pool.view())?;
    let meta = DataMeta {
        seed,
        d: dim,
        gap_cos,
        kappa: noise,
        d_x,
        count,
        pool: pool_size,
        semi_ratio,
    };
    std::fs::write(
        out.join("metadata.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    println!(
        "wrote {count} pairs (d={dim}, gap_cos={gap_cos}, kappa={noise}), pool {pool_size}, {} labeled",
        data.labeled.iter().filter(|&&b| b).count()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config_file: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    report: Option<&Path>,
    csv: Option<&Path>,
    divergence: Option<&str>,
    semi: bool,
    resume: Option<&Path>,
    sets: &[String],
) -> vdl::Result<()> {
    let (data, pool, meta) = load_dataset(data_dir)?;

    let mut state = if let Some(ckpt) = resume {
        load_checkpoint(ckpt)?
    } else {
        let mut cfg = TrainConfig {
            d: meta.d,
            ..TrainConfig::default()
        };
        if let Some(path) = config_file {
            load_config_file(&mut cfg, path)?;
        }
        if let Some(dv) = divergence {
            apply_kv(&mut cfg, "divergence", dv)?;
        }
        if semi {
            cfg.semi_ratio = meta.semi_ratio;
        }
        for kv in sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| VdlError::Config(format!("--set expects key=value, got {kv:?}")))?;
            apply_kv(&mut cfg, k.trim(), v.trim())?;
        }
        TrainState::new(cfg)?
    };

    train(&mut state, &data, &pool)?;
    save_checkpoint(out, &state)?;
    let report_path = report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("ndjson"));
    write_report(&report_path, &state.history)?;
    if let Some(csv_path) = csv {
        write_report_csv(csv_path, &state.history)?;
    }
    let last = state.history.last().expect("history nonempty");
    println!(
        "final iteration {}: Sim_txt {:.4}, Sim_img {:.4}",
        last.iteration, last.sim_txt, last.sim_img
    );
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data_dir: &Path,
    report: Option<&Path>,
    baselines: bool,
    xi: f64,
) -> vdl::Result<()> {
    let state = load_checkpoint(ckpt)?;
    let (data, pool, _) = load_dataset(data_dir)?;
    let (_, heldout) = split_holdout(&data, state.config.eval_holdout);
    let prior_sub = pool
        .slice(ndarray::s![..pool.nrows().min(512), ..])
        .to_owned();
    let mut rng = Rng::new(state.config.seed).split("cli.eval");
    let rep = eval_model(
        &state.model,
        &heldout,
        &prior_sub,
        None,
        state.iteration,
        &mut rng,
    )?;
    println!(
        "iteration {}: Sim_txt {:.4}, Sim_img {:.4}",
        rep.iteration, rep.sim_txt, rep.sim_img
    );
    if baselines {
        let table = compare_baselines(
            &state.model.g,
            state.model.svdl.r_txt,
            &heldout,
            xi,
            &mut Rng::new(state.config.seed).split("cli.baselines"),
        )?;
        println!(
            "sim_txt: VDL {:.4} | CLIP-GEN {:.4} | LAFITE(xi={xi}) {:.4}",
            table.vdl, table.clip_gen, table.lafite
        );
        let ordered = table.vdl > table.clip_gen && table.clip_gen > table.lafite;
        println!(
            "ordering VDL > CLIP-GEN > LAFITE: {}",
            if ordered { "pass" } else { "fail" }
        );
        if !ordered {
            return Err(VdlError::Config("baseline ordering violated".into()));
        }
    }
    if let Some(path) = report {
        write_report(path, &[rep])?;
    }
    Ok(())
}

fn run(cli: Cli) -> vdl::Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            dim,
            count,
            gap_cos,
            noise,
            semi_ratio,
            pool,
            d_x,
            out,
        } => cmd_gen_data(
            seed, dim, count, gap_cos, noise, semi_ratio, pool, d_x, &out,
        ),
        Command::Train {
            config,
            data,
            out,
            report,
            csv,
            divergence,
            semi,
            resume,
            sets,
        } => cmd_train(
            config.as_deref(),
            &data,
            &out,
            report.as_deref(),
            csv.as_deref(),
            divergence.as_deref(),
            semi,
            resume.as_deref(),
            &sets,
        ),
        Command::Eval {
            ckpt,
            data,
            report,
            baselines,
            xi,
        } => cmd_eval(&ckpt, &data, report.as_deref(), baselines, xi),
        Command::CheckProp1 {
            trials,
            dims,
            rs,
            seed,
        } => {
            let mut rng = Rng::new(seed).split("cli.prop1");
            let rep = verify_prop1(&mut rng, trials, &dims, &rs)?;
            println!(
                "trials: {}, violations: {}, min_slack: {:.3e}",
                rep.trials, rep.violations, rep.min_slack
            );
            if rep.violations > 0 {
                return Err(VdlError::Config(format!(
                    "cone bound violated {} times, worst slack {:.3e}",
                    rep.violations, rep.min_slack
                )));
            }
            Ok(())
        }
        Command::Gradcheck { scope, seed } => {
            let results = run_suite(&scope, seed)?;
            let mut worst: (f64, &str) = (0.0, "");
            for (name, err) in &results {
                println!(
                    "gradcheck {name}: max_rel_err {err:.3e} {}",
                    if *err < 1e-4 { "pass" } else { "FAIL" }
                );
                if *err > worst.0 {
                    worst = (*err, name);
                }
            }
            if worst.0 >= 1e-4 {
                return Err(VdlError::Config(format!(
                    "gradient mismatch in {}: {:.3e}",
                    worst.1, worst.0
                )));
            }
            Ok(())
        }
        Command::Stage2Train {
            ckpt,
            data,
            out,
            iters,
            seed,
            zero_conditioning,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let (stored, _, meta) = load_dataset(&data)?;
            let (world, full) = regen_world_and_data(&meta)?;
            if full.images != stored.images {
                return Err(VdlError::Config(
                    "dataset directory does not match its metadata seed".into(),
                ));
            }
            let mut cfg = Stage2Config::new(meta.d);
            cfg.d_x = meta.d_x;
            cfg.iters = iters;
            cfg.seed = seed;
            cfg.zero_conditioning = zero_conditioning;
            let mut gen = init_generator(&cfg, meta.d)?;
            let history = train_stage2(&state.model, &mut gen, &world, &full, &cfg)?;
            save_generator(&out, &gen, &cfg)?;
            let first = history.first().copied().unwrap_or(f64::NAN);
            let last = history.last().copied().unwrap_or(f64::NAN);
            println!("stage2 MSE {first:.5} -> {last:.5} over {iters} iters");
            Ok(())
        }
        Command::Infer {
            ckpt,
            gen,
            text_emb,
            out,
            seed,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let (generator, cfg) = load_generator(&gen)?;
            let texts = read_embeddings(&text_emb)?;
            let mut rng = Rng::new(seed).split("cli.infer");
            let mut images = Array2::zeros((texts.nrows(), cfg.d_x));
            for (i, row) in texts.rows().into_iter().enumerate() {
                let z_txt = UnitVec::normalize(row)?;
                let res = infer_t2i(&state.model, &generator, &z_txt, &mut rng)?;
                images.row_mut(i).assign(&res.image);
            }
            write_embeddings(&out, images.view())?;
            println!("wrote {} inferred images of dim {}", texts.nrows(), cfg.d_x);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                VdlError::RangeError { .. } | VdlError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
