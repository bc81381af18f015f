use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use bavt::config::ExperimentConfig;
use bavt::experiment::{ablation_csv, evaluate_model, run_ablation};
use bavt::imgproc::{augment_with_outcome, AugmentConfig, ImageGrid, MaskGrid};
use bavt::io::{self, load_split};
use bavt::metrics::{roc_curve, roc_csv, set_report_csv, table_row, TABLE_HEADER};
use bavt::phantom::{make_dataset, PhantomConfig, Split};
use bavt::sdt::signed_distance_map;
use bavt::train::{load_checkpoint, save_checkpoint, write_history_csv, Checkpoint, Dataset, Sample, Trainer};
use bavt::vit::{count_flops, count_params, FlopReport, ViTConfig};

use crate::manifest::RunManifest;
use crate::{AblateArgs, Cli, Command, EvalArgs, GenArgs, InspectCommand, TrainArgs, UsageError};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => gen(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Inspect(InspectCommand::Sdt { mask, out }) => inspect_sdt(cli, mask, out.as_deref()),
        Command::Inspect(InspectCommand::Augment { image, mask, seed, config, out }) => {
            inspect_augment(cli, image, mask, *seed, config.as_deref(), out.as_deref())
        }
        Command::Inspect(InspectCommand::Model { config }) => inspect_model(config.as_deref()),
    }
}

fn out_dir(cli: &Cli, explicit: Option<&Path>, name: &str) -> Result<PathBuf> {
    let dir = explicit.map(Path::to_path_buf).unwrap_or_else(|| cli.out_root.join(name));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    cfg.validate().with_context(|| format!("validating config {}", path.display()))?;
    Ok(cfg)
}

fn samples(dir: &Path, split: Split) -> Result<Vec<(String, Sample)>> {
    let loaded = load_split(dir, split).with_context(|| format!("loading {split} split of {}", dir.display()))?;
    Ok(loaded.into_iter().map(|s| (s.name, Sample { image: s.image, mask: s.mask })).collect())
}

fn dataset(dir: &Path) -> Result<Dataset> {
    let strip = |v: Vec<(String, Sample)>| v.into_iter().map(|(_, s)| s).collect();
    Ok(Dataset { train: strip(samples(dir, Split::Train)?), val: strip(samples(dir, Split::Val)?) })
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let template = PhantomConfig {
        size: a.size,
        n_trees: a.n_trees,
        branch_depth: a.branch_depth,
        width_root: a.width_root,
        width_decay: a.width_decay,
        noise_std: a.noise_std,
        background_level: a.background,
        vessel_contrast: a.contrast,
        seed: a.seed,
    };
    if template.low_contrast_warning() {
        eprintln!("warning: vessel contrast {} does not exceed noise std {}", a.contrast, a.noise_std);
    }
    let ds = make_dataset(a.n, &template, a.ratio, a.seed)?;
    let dir = out_dir(cli, a.out.as_deref(), "data")?;
    io::write_dataset(&dir, &ds)?;
    println!(
        "wrote {} phantoms to {} (train {}, val {}, test {})",
        ds.samples.len(),
        dir.display(),
        ds.count(Split::Train),
        ds.count(Split::Val),
        ds.count(Split::Test)
    );
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut exp = load_config(&a.config)?;
    let o = &a.overrides;
    if let Some(l) = o.lambda {
        exp.loss.lambda = l;
    }
    if let Some(m) = o.mode {
        exp.loss.boundary_mode = m;
    }
    if let Some(e) = o.epochs {
        exp.train.epochs = e;
    }
    if let Some(s) = o.seed {
        exp.train.seed = s;
    }
    exp.train.deterministic |= cli.deterministic;
    exp.validate()?;
    let dir = out_dir(cli, a.out.as_deref(), "train")?;
    exp.train.checkpoint_dir = Some(dir.clone());
    let data = dataset(&a.data)?;

    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.vit != exp.vit {
                bail!(UsageError(format!("checkpoint {} was trained with a different architecture", path.display())));
            }
            Trainer::resume(&data, ck.vit, exp.train.clone(), exp.loss.clone(), exp.augment.clone(), ck.state)?
        }
        None => Trainer::new(&data, exp.vit.clone(), exp.train.clone(), exp.loss.clone(), exp.augment.clone())?,
    };

    let mut manifest = RunManifest::new("train", exp.train.deterministic);
    manifest.set("data", a.data.display());
    manifest.set("seed", exp.train.seed);
    manifest.set("norm_mean", trainer.augment.norm_mean);
    manifest.set("norm_std", trainer.augment.norm_std);
    if let Some(r) = &a.resume {
        manifest.set("resume", r.display());
    }
    manifest.set_config(&exp.render());
    std::fs::write(dir.join("config.cfg"), exp.render()).context("writing config snapshot")?;
    manifest.artifact(dir.join("config.cfg"));

    let history_path = dir.join("history.csv");
    let mut outcome = Ok(());
    while trainer.state().epoch < exp.train.epochs {
        match trainer.run_epoch() {
            Ok(r) => eprintln!("epoch {:>4}  train {:.6}  val {:.6}  lr {:.3e}", r.epoch, r.train_loss, r.val_loss, r.lr),
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    write_history_csv(&history_path, trainer.history())?;
    manifest.artifact(&history_path);
    let best = dir.join("best.ckpt");
    if best.exists() {
        manifest.artifact(&best);
    }
    if outcome.is_ok() {
        let final_path = dir.join("final.ckpt");
        save_checkpoint(&final_path, &Checkpoint { vit: exp.vit.clone(), state: trainer.state().clone() })?;
        manifest.artifact(&final_path);
    }
    manifest.set("best_val_loss", trainer.state().best_val_loss);
    manifest.set("epochs_completed", trainer.state().epoch);
    manifest.write(&dir)?;
    outcome.context("training aborted; the best checkpoint so far is kept")?;
    println!("trained {} epochs; artifacts in {}", exp.train.epochs, dir.display());
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut augment = match &a.config {
        Some(p) => {
            let cfg = load_config(p)?;
            if cfg.vit != ck.vit {
                bail!(UsageError(format!(
                    "config {} describes a different architecture than checkpoint {}",
                    p.display(),
                    a.checkpoint.display()
                )));
            }
            cfg.augment
        }
        None => AugmentConfig::default(),
    };
    augment.norm_mean = ck.state.norm_mean;
    augment.norm_std = ck.state.norm_std;
    let named = samples(&a.data, a.split)?;
    if named.is_empty() {
        bail!(UsageError(format!("split {} of {} is empty", a.split, a.data.display())));
    }
    let (names, set): (Vec<String>, Vec<Sample>) = named.into_iter().unzip();
    let (report, preds) = evaluate_model(&set, &ck.state.params, &ck.vit, &augment, a.threshold)?;
    let dir = out_dir(cli, a.out.as_deref(), "eval")?;
    let mut manifest = RunManifest::new("eval", cli.deterministic);
    manifest.set("data", a.data.display());
    manifest.set("checkpoint", a.checkpoint.display());
    manifest.set("split", a.split);
    manifest.set("threshold", a.threshold);

    let metrics_path = dir.join("metrics.csv");
    let body = format!("# threshold={}\n{}", a.threshold, set_report_csv(&names, &report));
    std::fs::write(&metrics_path, body).context("writing metrics")?;
    manifest.artifact(&metrics_path);
    if a.roc || a.save_preds {
        for ((name, sample), pred) in names.iter().zip(&set).zip(&preds) {
            if a.roc {
                let p = dir.join("roc").join(format!("{name}.csv"));
                std::fs::create_dir_all(p.parent().unwrap())?;
                std::fs::write(&p, roc_csv(&roc_curve(pred, &sample.mask)?))?;
                manifest.artifact(p);
            }
            if a.save_preds {
                let p = dir.join("preds").join(format!("{name}.png"));
                let hard = pred.data().iter().map(|&v| (v >= a.threshold) as u8).collect();
                io::write_mask(&p, &MaskGrid::new(pred.height(), pred.width(), hard)?)?;
                manifest.artifact(p);
            }
        }
    }
    manifest.write(&dir)?;
    println!("threshold {}", a.threshold);
    println!("{TABLE_HEADER}");
    println!("{}", table_row("macro", &report.macro_avg));
    println!("{}", table_row("micro", &report.micro));
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let mut exp = load_config(&a.config)?;
    if let Some(m) = a.mode {
        exp.loss.boundary_mode = m;
    }
    if let Some(e) = a.epochs {
        exp.train.epochs = e;
    }
    exp.train.deterministic |= cli.deterministic;
    exp.validate()?;
    let data = dataset(&a.data)?;
    let test: Vec<Sample> = samples(&a.data, Split::Test)?.into_iter().map(|(_, s)| s).collect();
    let report = run_ablation(&data, &test, &exp, a.lambda, &a.seeds, a.threshold)?;
    let dir = out_dir(cli, a.out.as_deref(), "ablate")?;
    let csv_path = dir.join("ablation.csv");
    std::fs::write(&csv_path, ablation_csv(&report)).context("writing ablation table")?;
    let mut manifest = RunManifest::new("ablate", exp.train.deterministic);
    manifest.set("data", a.data.display());
    manifest.set("lambda", a.lambda);
    manifest.set("seeds", a.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    manifest.set("threshold", a.threshold);
    for (seed, gap) in a.seeds.iter().zip(&report.first_step_gradient_gap) {
        manifest.set(&format!("first_step_gradient_gap.{seed}"), gap);
    }
    manifest.set_config(&exp.render());
    manifest.artifact(&csv_path);
    manifest.write(&dir)?;
    println!("{TABLE_HEADER}");
    for r in report.rows.iter().chain(&report.medians) {
        let label = match r.seed {
            Some(s) => format!("{} (seed {s})", r.label),
            None => r.label.clone(),
        };
        println!("{}", table_row(&label, &r.report));
    }
    Ok(())
}

fn inspect_sdt(cli: &Cli, mask: &Path, out: Option<&Path>) -> Result<()> {
    let m = io::read_mask(mask)?;
    let sdm = signed_distance_map(&m).with_context(|| format!("distance map of {}", mask.display()))?;
    let dir = out_dir(cli, out, "inspect")?;
    let stem = mask.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "mask".into());
    let grid = dir.join(format!("{stem}.sdm"));
    let png = dir.join(format!("{stem}_sdm.png"));
    io::write_sdm(&grid, &sdm)?;
    io::write_sdm_png(&png, &sdm)?;
    println!("{}\n{}", grid.display(), png.display());
    Ok(())
}

/// Two grids side by side.
fn panel(left: &[f64], right: &[f64], h: usize, w: usize) -> Result<ImageGrid> {
    let mut data = Vec::with_capacity(2 * h * w);
    for y in 0..h {
        data.extend_from_slice(&left[y * w..(y + 1) * w]);
        data.extend_from_slice(&right[y * w..(y + 1) * w]);
    }
    Ok(ImageGrid::new(h, 2 * w, data)?)
}

fn inspect_augment(cli: &Cli, image: &Path, mask: &Path, seed: u64, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let img = io::read_image(image)?;
    let m = io::read_mask(mask)?;
    let cfg = match config {
        Some(p) => load_config(p)?.augment,
        None => AugmentConfig::default(),
    };
    let aug = augment_with_outcome(&img, &m, &cfg, seed)?;
    let (h, w) = img.dims();
    // Undo the normalisation for display.
    let shown: Vec<f64> = aug.image.data().iter().map(|v| (v * cfg.norm_std + cfg.norm_mean).clamp(0.0, 1.0)).collect();
    let dir = out_dir(cli, out, "inspect")?;
    let image_panel = dir.join(format!("augment_{seed}_image.png"));
    let mask_panel = dir.join(format!("augment_{seed}_mask.png"));
    io::write_image(&image_panel, &panel(img.data(), &shown, h, w)?)?;
    io::write_image(&mask_panel, &panel(&m.to_f64(), &aug.mask.to_f64(), h, w)?)?;
    println!("{}\n{}", image_panel.display(), mask_panel.display());
    Ok(())
}

fn inspect_model(config: Option<&Path>) -> Result<()> {
    let vit = match config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?;
            cfg.vit.validate()?;
            cfg.vit
        }
        None => ViTConfig::base16(),
    };
    let p = count_params(&vit)?;
    let f = count_flops(&vit)?;
    println!(
        "architecture: {}x{} input, patch {}, {} tokens, width {}, depth {}, heads {}, decoder {:?}",
        vit.image_size,
        vit.image_size,
        vit.patch_size,
        vit.num_tokens(),
        vit.embed_dim,
        vit.depth,
        vit.heads,
        vit.decoder_channels
    );
    println!("params.patch_embed {}", p.patch_embed);
    println!("params.positional {}", p.positional);
    println!("params.encoder_layers {}", p.encoder_layers);
    println!("params.final_norm {}", p.final_norm);
    println!("params.decoder {}", p.decoder);
    println!("params.total {} ({:.2}M)", p.total(), p.total() as f64 / 1e6);
    println!("macs.patch_embed {}", f.patch_embed_macs);
    println!("macs.attention_projection {}", f.attention_projection_macs);
    println!("macs.attention_matmul {}", f.attention_matmul_macs);
    println!("macs.ffn {}", f.ffn_macs);
    println!("macs.decoder {}", f.decoder_macs);
    println!("elementwise_ops {}", f.elementwise_ops);
    println!("macs.total {} ({:.2}G)", f.total_macs(), f.total_macs() as f64 / 1e9);
    println!("flops.total {} ({:.2}G)", f.total_flops(), f.total_flops() as f64 / 1e9);
    println!("convention: {}", FlopReport::convention());
    Ok(())
}
