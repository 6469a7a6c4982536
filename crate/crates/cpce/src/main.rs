//! Command-line entry point: phantom data synthesis, WGAN-GP training,
//! planar-to-volumetric weight inflation, denoising, evaluation, and
//! convergence comparison.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::s;

use cpce::config::{ExtractorKind, RunConfig};
use cpce::exec::ExecMode;
use cpce::io_data::{
    container, export_slice_png, extract_patches, generate_phantom_volume, simulate_low_dose,
    Volume,
};
use cpce::losses::FeatureExtractor;
use cpce::metrics::{denoise_volume, evaluate_model};
use cpce::model::SliceStack;
use cpce::trainer::{
    self, history_from_csv, load_generator, save_generator, Dataset, Init,
};
use cpce::transfer::{inflate_generator, verify_equivalence};
use cpce::{CpceError, Result};

#[derive(Parser)]
#[command(name = "cpce", about = "Low-dose CT denoising toolkit", version)]
struct Cli {
    /// Force fully sequential, bitwise-deterministic execution.
    #[arg(long, global = true)]
    reference: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate phantom volumes and their low-dose counterparts.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a denoiser; outputs land in a run directory named by the
    /// config hash.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Initialization: "scratch" (default when --from is absent).
        #[arg(long, conflicts_with = "from")]
        init: Option<String>,
        /// Checkpoint to transfer from; a planar source is inflated to
        /// the target slab depth.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Override the slab depth from the config.
        #[arg(long)]
        slices: Option<usize>,
    },
    /// Inflate a planar checkpoint to a volumetric one.
    Inflate {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        slices: usize,
        #[arg(long)]
        out: PathBuf,
        /// Volume to check output equivalence on.
        #[arg(long)]
        verify: Option<PathBuf>,
    },
    /// Run a checkpoint over a volume.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also export per-slice grayscale PNGs into this directory.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Score a checkpoint against paired volumes; also reports the raw
    /// low-dose input as a baseline.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config supplying the loss/extractor settings (defaults used
        /// when absent).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare training histories; the first file is the reference whose
    /// starting validation perceptual loss the others are measured against.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        histories: Vec<PathBuf>,
    },
}

fn mode_of(reference: bool) -> ExecMode {
    ExecMode::from_reference_flag(reference)
}

fn vol_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("vol_{i:03}_nd.cpce")),
        dir.join(format!("vol_{i:03}_ld.cpce")),
    )
}

fn cmd_simulate(config: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    cfg.validate()?;
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CpceError::io(dir.display().to_string(), e))?;
    for i in 0..cfg.data.n_volumes {
        let nd = generate_phantom_volume(
            cfg.seed.wrapping_add(i as u64),
            cfg.data.n_slices,
            cfg.data.height,
            cfg.data.width,
            &cfg.data.phantom,
        )?;
        let ld = simulate_low_dose(&nd, &cfg.data.noise, cfg.seed.wrapping_add(0x10_0000 + i as u64))?;
        let (ndp, ldp) = vol_paths(&dir, i);
        nd.save(&ndp)?;
        ld.save(&ldp)?;
        println!("wrote {} and {}", ndp.display(), ldp.display());
    }
    Ok(())
}

fn load_pairs(dir: &Path) -> Result<Vec<(Volume, Volume)>> {
    let mut pairs = Vec::new();
    for i in 0.. {
        let (ndp, ldp) = vol_paths(dir, i);
        if !ndp.exists() {
            break;
        }
        pairs.push((Volume::load(&ldp)?, Volume::load(&ndp)?));
    }
    if pairs.is_empty() {
        return Err(CpceError::io(
            dir.display().to_string(),
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no vol_NNN_{nd,ld}.cpce pairs found; run `simulate` first",
            ),
        ));
    }
    Ok(pairs)
}

fn build_extractor(cfg: &RunConfig) -> Result<FeatureExtractor> {
    match cfg.loss.extractor {
        ExtractorKind::Random => Ok(FeatureExtractor::seeded_random_convnet(
            cfg.loss.extractor_seed,
        )),
        ExtractorKind::Vgg19 => {
            let path = cfg.loss.extractor_path.as_ref().ok_or_else(|| {
                CpceError::config("loss.extractor_path is required for vgg19")
            })?;
            let arrays = container::load_container(path)?;
            FeatureExtractor::vgg19_conv16(&arrays)
        }
    }
}

fn build_dataset(cfg: &RunConfig, d: usize) -> Result<Dataset> {
    let pairs = load_pairs(&cfg.data_dir())?;
    let n = pairs.len();
    let n_val = if n >= 2 {
        ((cfg.data.val_fraction * n as f64).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, (ld, nd)) in pairs.iter().enumerate() {
        let patches = extract_patches(
            ld,
            nd,
            i as u32,
            d,
            cfg.data.patches_per_volume,
            cfg.data.patch_size,
            cfg.seed.wrapping_add(0x20_0000 + i as u64),
        )?;
        if i >= n - n_val {
            val.extend(patches);
        } else {
            train.extend(patches);
        }
    }
    if n_val == 0 {
        // single volume: hold out a disjointly-seeded patch draw
        let (ld, nd) = &pairs[0];
        val = extract_patches(
            ld,
            nd,
            0,
            d,
            cfg.data.patches_per_volume / 4 + 1,
            cfg.data.patch_size,
            cfg.seed.wrapping_add(0x30_0000),
        )?;
    }
    Ok(Dataset { train, val })
}

fn cmd_train(
    config: &Path,
    from: Option<&Path>,
    slices: Option<usize>,
    mode: ExecMode,
) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    cfg.validate()?;
    let d = slices.unwrap_or(cfg.model.d);
    let init = match from {
        None => Init::Scratch { d },
        Some(p) => {
            let g = load_generator(p)?;
            let g = if g.input_d() == d {
                g
            } else if g.input_d() == 1 {
                inflate_generator(&g, d)?
            } else {
                return Err(CpceError::config(format!(
                    "checkpoint expects {} slices but {d} requested; only planar \
                     checkpoints can be inflated",
                    g.input_d()
                )));
            };
            Init::Transfer { generator: g }
        }
    };
    let extractor = build_extractor(&cfg)?;
    let data = build_dataset(&cfg, d)?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| CpceError::io(run_dir.display().to_string(), e))?;
    let cfg_path = run_dir.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json())
        .map_err(|e| CpceError::io(cfg_path.display().to_string(), e))?;
    println!("run directory: {}", run_dir.display());

    let state = trainer::train(
        &cfg.train,
        &data,
        init,
        &extractor,
        cfg.loss.reduction,
        mode,
        Some(&run_dir),
    )?;
    let model_path = run_dir.join("model.cpce");
    state.save(&model_path, &cfg.train)?;
    save_generator(&run_dir.join("generator.cpce"), &state.generator)?;
    let last = state.history.last().unwrap();
    println!(
        "done: step {} pl {:.6} wd {:.6} mse {:.6}",
        last.step, last.pl, last.wd, last.mse
    );
    Ok(())
}

fn cmd_inflate(from: &Path, slices: usize, out: &Path, verify: Option<&Path>) -> Result<()> {
    let g2 = load_generator(from)?;
    let g3 = inflate_generator(&g2, slices)?;
    save_generator(out, &g3)?;
    println!("wrote {}", out.display());
    if let Some(vp) = verify {
        let vol = Volume::load(vp)?;
        let n = vol.data.shape()[0];
        if n < slices {
            return Err(CpceError::shape(format!(
                "verification volume has {n} slices, need at least {slices}"
            )));
        }
        let mid = n / 2;
        let lo = (mid - (slices - 1) / 2).min(n - slices);
        let stack = SliceStack::new(vol.data.slice(s![lo..lo + slices, .., ..]).to_owned())?;
        let report = verify_equivalence(&g2, &g3, &stack, 1e-5)?;
        println!(
            "max_abs_diff={:e} {}",
            report.max_abs_diff,
            if report.pass { "PASS" } else { "FAIL" }
        );
        if !report.pass {
            return Err(CpceError::Numerical(format!(
                "inflation equivalence failed: max_abs_diff={:e}",
                report.max_abs_diff
            )));
        }
    }
    Ok(())
}

fn cmd_denoise(model: &Path, volume: &Path, out: &Path, png: Option<&Path>, mode: ExecMode) -> Result<()> {
    let g = load_generator(model)?;
    let vol = Volume::load(volume)?;
    let den = denoise_volume(&g, &vol, mode)?;
    den.save(out)?;
    println!("wrote {}", out.display());
    if let Some(dir) = png {
        std::fs::create_dir_all(dir).map_err(|e| CpceError::io(dir.display().to_string(), e))?;
        for (i, slice) in den.data.outer_iter().enumerate() {
            export_slice_png(
                &dir.join(format!("slice_{i:03}.png")),
                &slice.to_owned(),
                (0.0, 1.0),
            )?;
        }
        println!("wrote {} PNGs to {}", den.data.shape()[0], dir.display());
    }
    Ok(())
}

fn cmd_evaluate(
    model: &Path,
    testset: &Path,
    out: Option<&Path>,
    config: Option<&Path>,
    mode: ExecMode,
) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let extractor = build_extractor(&cfg)?;
    let g = load_generator(model)?;
    let pairs = load_pairs(testset)?;
    let dataset_id = testset.display().to_string();
    let model_report = evaluate_model(
        Some(&g),
        &pairs,
        &extractor,
        cfg.loss.reduction,
        mode,
        &model.display().to_string(),
        &dataset_id,
    )?;
    let input_report = evaluate_model(
        None,
        &pairs,
        &extractor,
        cfg.loss.reduction,
        mode,
        "input",
        &dataset_id,
    )?;
    let out_dir = out.unwrap_or(testset);
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CpceError::io(out_dir.display().to_string(), e))?;
    for (name, rep) in [("model", &model_report), ("input", &input_report)] {
        let csv = out_dir.join(format!("eval_{name}.csv"));
        std::fs::write(&csv, rep.to_csv())
            .map_err(|e| CpceError::io(csv.display().to_string(), e))?;
        let json = out_dir.join(format!("eval_{name}.json"));
        std::fs::write(&json, rep.to_json()?)
            .map_err(|e| CpceError::io(json.display().to_string(), e))?;
        println!(
            "{name}: psnr {:.4}±{:.4} ssim {:.4}±{:.4} pl {:.6} tml {:.6}",
            rep.psnr.mean, rep.psnr.std, rep.ssim.mean, rep.ssim.std, rep.pl.mean, rep.tml.mean
        );
    }
    Ok(())
}

fn cmd_compare(histories: &[PathBuf]) -> Result<()> {
    let mut parsed = Vec::new();
    for p in histories {
        let txt = std::fs::read_to_string(p)
            .map_err(|e| CpceError::io(p.display().to_string(), e))?;
        let rows = history_from_csv(&txt)?;
        if rows.is_empty() {
            return Err(CpceError::config(format!("{}: empty history", p.display())));
        }
        parsed.push((p, rows));
    }
    let target = parsed[0].1[0].pl;
    println!(
        "reference: {} (starting pl {:.6})",
        parsed[0].0.display(),
        target
    );
    println!("history,final_step,final_pl,final_wd,final_mse,first_step_reaching_reference_start_pl");
    for (p, rows) in &parsed {
        let last = rows.last().unwrap();
        let reach = rows
            .iter()
            .find(|r| r.pl <= target)
            .map(|r| r.step.to_string())
            .unwrap_or_else(|| "never".to_string());
        println!(
            "{},{},{:.6},{:.6},{:.6},{reach}",
            p.display(),
            last.step,
            last.pl,
            last.wd,
            last.mse
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mode = mode_of(cli.reference);
    match cli.cmd {
        Cmd::Simulate { config } => cmd_simulate(&config),
        Cmd::Train {
            config,
            init,
            from,
            slices,
        } => {
            if let Some(init) = &init {
                if init != "scratch" {
                    return Err(CpceError::config(format!(
                        "unknown --init mode `{init}`; use `scratch` or --from <checkpoint>"
                    )));
                }
            }
            cmd_train(&config, from.as_deref(), slices, mode)
        }
        Cmd::Inflate {
            from,
            slices,
            out,
            verify,
        } => cmd_inflate(&from, slices, &out, verify.as_deref()),
        Cmd::Denoise {
            model,
            volume,
            out,
            png,
        } => cmd_denoise(&model, &volume, &out, png.as_deref(), mode),
        Cmd::Evaluate {
            model,
            testset,
            out,
            config,
        } => cmd_evaluate(&model, &testset, out.as_deref(), config.as_deref(), mode),
        Cmd::Compare { histories } => cmd_compare(&histories),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
