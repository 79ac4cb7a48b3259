//! Command-line entry point: configuration resolution (file, environment,
//! `--set` overrides), the six subcommands, and artifact I/O. Usage errors
//! exit 2 (clap's default); runtime errors print a diagnostic and exit 1.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attack::{pgd_attack_batch, AttackConfig, AttackLossKind};
use crate::checkpoint::{atomic_write, fnv1a64, load_checkpoint, save_checkpoint};
use crate::config::{DefenseChoice, RunConfig, ENV_PREFIX};
use crate::data::{quantize, write_idx, Dataset};
use crate::defense::{
    build_gallery, evaluate, load_gallery, save_gallery, DefenseMode, EvalReport,
};
use crate::error::{Error, Result};
use crate::model::{EncoderParams, HeadKind, NetParams};
use crate::numerics::{tags, RngState, Tensor};
use crate::surface::{loss_grid, make_direction, DirKind, SurfaceSpec};
use crate::training::{train, train_clean_encoder};

// ── argument layout ─────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "twohead",
    about = "Two-head adversarially trained encoder: training, attacks, defenses, and loss surfaces",
    version
)]
struct Cli {
    /// Config file (sectioned key = value text).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the training seed from [train] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap the worker-thread count; 1 forces fully serial execution.
    /// Results are identical for any value.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Override one config value, e.g. --set train.lr=0.05 (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for artifacts (checkpoints, CSVs, effective.cfg).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Naturally pretrain the clean encoder; saves clean.ckpt under --out.
    TrainClean,
    /// Train one arm per [train] mode; writes metrics and checkpoints.
    Train {
        /// Training mode, overriding [train] mode.
        #[arg(long)]
        mode: Option<String>,
        /// Clean-encoder checkpoint (required by the contrastive modes).
        #[arg(long, value_name = "FILE")]
        clean: Option<PathBuf>,
    },
    /// Attack the test split and emit the adversarial examples as IDX files.
    Attack {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// PGD step count, overriding [attack] steps.
        #[arg(long, value_name = "N")]
        k_steps: Option<usize>,
    },
    /// Score one defense x attack cell; prints a CSV row.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// softmax | knn (default from [eval] defense).
        #[arg(long)]
        defense: Option<String>,
        /// none | pgd | fgsm (default pgd).
        #[arg(long)]
        attack: Option<String>,
        /// PGD step count, overriding [attack] steps.
        #[arg(long, value_name = "N")]
        k_steps: Option<usize>,
        /// Precomputed gallery file for the knn defense (else built from
        /// the training split).
        #[arg(long, value_name = "FILE")]
        gallery: Option<PathBuf>,
        /// Also write a per-sample CSV (index,label,pred,loss) to this file.
        #[arg(long, value_name = "FILE")]
        per_sample: Option<PathBuf>,
    },
    /// Loss-surface grid around one test sample; CSV to --out or stdout.
    Surface {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Test-split sample index.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Direction pair, e.g. adv,rademacher (default from [surface]).
        #[arg(long, value_name = "D1,D2")]
        dirs: Option<String>,
    },
    /// Build the clean-feature gallery for the knn defense; saves
    /// gallery.rec under --out.
    Gallery {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
}

// ── entry point ─────────────────────────────────────────────────────────────

/// Parse arguments and dispatch. Exits the process: 0 on success, 1 on a
/// runtime error (with a diagnostic on stderr), 2 on usage errors.
pub fn cli_main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: could not configure {n} worker threads: {e}");
            std::process::exit(1);
        }
    }
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let vars: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    cfg.apply_env_pairs(vars.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    for s in &cli.set {
        cfg.apply_set(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Every command with an output directory records the exact configuration
/// it ran with.
fn write_effective(out: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        atomic_write(&dir.join("effective.cfg"), cfg.dump().as_bytes())?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    let out = cli.out.as_deref();
    match &cli.cmd {
        Cmd::TrainClean => {
            cfg.validate()?;
            write_effective(out, &cfg)?;
            let (tr, te) = cfg.load_datasets()?;
            let (net, acc) = train_clean_encoder(&tr, &te, &cfg)?;
            println!("clean encoder: test accuracy {acc:.4} over {} samples", te.len());
            if let Some(dir) = out {
                let enc = wrap_plain(&cfg, &tr, net)?;
                let path = dir.join("clean.ckpt");
                save_checkpoint(&path, &enc, None)?;
                println!("saved {} (hash {:016x})", path.display(), file_hash(&path)?);
            }
            Ok(())
        }
        Cmd::Train { mode, clean } => {
            if let Some(m) = mode {
                cfg.mode = crate::training::TrainMode::parse(m)?;
            }
            cfg.validate()?;
            write_effective(out, &cfg)?;
            let (tr, te) = cfg.load_datasets()?;
            let clean_net: Option<NetParams<f32>> = match clean {
                Some(path) => Some(load_checkpoint(path)?.0.robust),
                None => None,
            };
            if cfg.mode.needs_clean() && clean_net.is_none() {
                return Err(Error::config(format!(
                    "mode {} needs a clean encoder: run train-clean and pass --clean <ckpt>",
                    cfg.mode.name()
                )));
            }
            let outcome = train(&tr, &te, &cfg, clean_net, out)?;
            let last = outcome
                .metrics
                .rows
                .last()
                .expect("at least one epoch row");
            println!(
                "trained {} for {} epochs: clean_acc {:.4}, robust_acc@{} {:.4} (best {:.4}), eta {:.4}",
                cfg.mode.name(),
                cfg.epochs,
                last.clean_acc,
                cfg.eval_steps,
                last.robust_acc,
                outcome.best_robust,
                (outcome.enc.log_eta.item() as f64).exp()
            );
            if let Some(dir) = out {
                let path = dir.join("final.ckpt");
                println!("saved {} (hash {:016x})", path.display(), file_hash(&path)?);
                println!("metrics: {}", dir.join("metrics.csv").display());
            }
            Ok(())
        }
        Cmd::Attack { checkpoint, k_steps } => {
            if let Some(k) = k_steps {
                cfg.steps = *k;
            }
            cfg.validate()?;
            write_effective(out, &cfg)?;
            let (_, te) = cfg.load_datasets()?;
            let (enc, _) = load_checkpoint(checkpoint)?;
            let dir = out.ok_or_else(|| {
                Error::config("attack needs --out <dir> for the emitted IDX files".to_string())
            })?;
            emit_attack(&cfg, &enc, &te, dir)
        }
        Cmd::Eval {
            checkpoint,
            defense,
            attack,
            k_steps,
            gallery,
            per_sample,
        } => {
            if let Some(k) = k_steps {
                cfg.steps = *k;
            }
            if let Some(d) = defense {
                cfg.apply("eval", "defense", d)?;
            }
            cfg.validate()?;
            write_effective(out, &cfg)?;
            let (tr, te) = cfg.load_datasets()?;
            let (enc, _) = load_checkpoint(checkpoint)?;

            let atk_cfg: Option<AttackConfig> = match attack.as_deref().unwrap_or("pgd") {
                "none" => None,
                "pgd" => Some(cfg.attack_config()),
                "fgsm" => {
                    let mut a = cfg.attack_config();
                    a.alpha = a.epsilon;
                    a.steps = 1;
                    a.random_start = false;
                    Some(a)
                }
                other => {
                    return Err(Error::config(format!(
                        "unknown attack {other:?}; expected none|pgd|fgsm"
                    )))
                }
            };
            let gallery_idx = match cfg.defense {
                DefenseChoice::Knn => Some(match gallery {
                    Some(path) => load_gallery(path)?,
                    None => build_gallery(&enc, &tr)?,
                }),
                DefenseChoice::Softmax => None,
            };
            let mode = match &gallery_idx {
                Some(g) => DefenseMode::Knn {
                    gallery: g,
                    k: cfg.knn_k,
                },
                None => DefenseMode::Softmax,
            };
            let report = evaluate(
                &enc,
                &te,
                atk_cfg.as_ref(),
                &mode,
                &RngState::new(cfg.seed),
                cfg.batch,
            )?;
            println!("{}", EvalReport::CSV_HEADER);
            println!("{}", report.csv_row());
            if let Some(dir) = out {
                atomic_write(
                    &dir.join("eval.csv"),
                    format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()).as_bytes(),
                )?;
            }
            if let Some(path) = per_sample {
                let mut s = String::from("index,label,pred,loss\n");
                for o in &report.samples {
                    s.push_str(&format!("{},{},{},{}\n", o.index, o.label, o.pred, o.loss));
                }
                atomic_write(path, s.as_bytes())?;
            }
            Ok(())
        }
        Cmd::Surface {
            checkpoint,
            sample,
            dirs,
        } => {
            if let Some(spec) = dirs {
                let Some((d1, d2)) = spec.split_once(',') else {
                    return Err(Error::config(format!(
                        "--dirs {spec:?}: expected two comma-separated directions"
                    )));
                };
                cfg.surface_dir1 = DirKind::parse(d1.trim())?;
                cfg.surface_dir2 = DirKind::parse(d2.trim())?;
            }
            cfg.validate()?;
            write_effective(out, &cfg)?;
            let (_, te) = cfg.load_datasets()?;
            let (enc, _) = load_checkpoint(checkpoint)?;
            if *sample >= te.len() {
                return Err(Error::config(format!(
                    "sample {} outside the {}-sample test split",
                    sample,
                    te.len()
                )));
            }
            let (xrow, y) = te.select(&[*sample]);
            let x = xrow.reshaped(vec![te.dim()])?;
            let eps = cfg.attack_config().epsilon;
            let radius = if cfg.surface_radius > 0.0 {
                cfg.surface_radius as f32
            } else {
                eps
            };
            let scale = if cfg.surface_scale > 0.0 {
                cfg.surface_scale as f32
            } else {
                eps
            };
            let spec = SurfaceSpec {
                x: x.clone(),
                y: y[0],
                dir1: cfg.surface_dir1,
                dir2: cfg.surface_dir2,
                radius,
                scale,
                resolution: cfg.surface_resolution,
            };
            spec.validate()?;
            let droot = RngState::new(cfg.seed).derive(tags::SURFACE_DIR);
            let d1 = make_direction(spec.dir1, &x, y[0], &enc, scale, &droot.derive(1))?;
            let d2 = make_direction(spec.dir2, &x, y[0], &enc, scale, &droot.derive(2))?;
            let grid = loss_grid(&enc, &spec, &d1, &d2)?;
            let comments = vec![
                ("sample".to_string(), sample.to_string()),
                ("label".to_string(), y[0].to_string()),
                ("dir1".to_string(), spec.dir1.name().to_string()),
                ("dir2".to_string(), spec.dir2.name().to_string()),
                ("radius".to_string(), radius.to_string()),
                ("scale".to_string(), scale.to_string()),
                ("epsilon".to_string(), eps.to_string()),
                (
                    "head".to_string(),
                    match enc.head {
                        HeadKind::Plain => "plain".to_string(),
                        HeadKind::Normalized => "normalized".to_string(),
                    },
                ),
            ];
            let csv = crate::surface::grid_csv(&grid, &comments);
            match out {
                Some(dir) => {
                    atomic_write(&dir.join("surface.csv"), csv.as_bytes())?;
                    atomic_write(
                        &dir.join("surface-axes.csv"),
                        crate::surface::axes_csv(&grid).as_bytes(),
                    )?;
                    println!(
                        "surface: center loss {}, max-center {}, {} clamped cells -> {}",
                        grid.center,
                        grid.max_minus_center(),
                        grid.clamped_cells,
                        dir.join("surface.csv").display()
                    );
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Gallery { checkpoint } => {
            cfg.validate()?;
            write_effective(out, &cfg)?;
            let (tr, _) = cfg.load_datasets()?;
            let (enc, _) = load_checkpoint(checkpoint)?;
            let g = build_gallery(&enc, &tr)?;
            let dir = out.ok_or_else(|| {
                Error::config("gallery needs --out <dir> for gallery.rec".to_string())
            })?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("gallery.rec");
            save_gallery(&path, &g)?;
            println!(
                "gallery: {} features of dim {} -> {}",
                g.len(),
                g.feats.view_cols(),
                path.display()
            );
            Ok(())
        }
    }
}

// ── helpers ─────────────────────────────────────────────────────────────────

/// Wrap a bare net as a plain-head encoder for checkpointing. The sharpness
/// parameter is initialized but unused by the plain head.
fn wrap_plain(cfg: &RunConfig, data: &Dataset, net: NetParams<f32>) -> Result<EncoderParams> {
    Ok(EncoderParams {
        arch: cfg.arch_for(data)?,
        head: HeadKind::Plain,
        clean: None,
        robust: net,
        log_eta: Tensor::scalar((cfg.eta_init as f32).ln()),
    })
}

fn file_hash(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(fnv1a64(&bytes))
}

/// Attack every test sample with the same per-sample streams `eval` uses,
/// quantize to the byte grid, and emit an IDX pair. For the max-norm ball
/// the bytes are additionally clamped to within round(epsilon) byte steps
/// of the quantized clean image, so the emitted artifact satisfies the
/// integer-grid ball; L2 budgets have no byte-grid equivalent and are
/// emitted as plainly quantized.
fn emit_attack(cfg: &RunConfig, enc: &EncoderParams, te: &Dataset, dir: &Path) -> Result<()> {
    if te.classes > 256 {
        return Err(Error::config(format!(
            "IDX labels are bytes; {} classes do not fit",
            te.classes
        )));
    }
    let atk = cfg.attack_config();
    let kind = AttackLossKind::from(enc.head);
    let eval_rng = RngState::new(cfg.seed).derive(tags::ATTACK_EVAL);
    let n = te.len();
    let d = te.dim();
    let mut adv = Tensor::<f32>::zeros(&[n, d]);
    let mut start = 0;
    while start < n {
        let hi = (start + cfg.batch.max(1)).min(n);
        let idx: Vec<usize> = (start..hi).collect();
        let (x, y) = te.select(&idx);
        let streams: Vec<RngState> = idx.iter().map(|&i| eval_rng.derive(i as u64)).collect();
        let xa = pgd_attack_batch(&x, &y, enc, kind, &atk, &streams)?;
        adv.data_mut()[start * d..hi * d].copy_from_slice(xa.data());
        start = hi;
    }

    let mut bytes = quantize(adv.data());
    if cfg.norm == crate::attack::NormKind::Linf {
        let clean_bytes = quantize(te.images.data());
        let band = cfg.epsilon.round() as i32;
        for (b, &c) in bytes.iter_mut().zip(&clean_bytes) {
            let lo = (c as i32 - band).max(0) as u8;
            let hi = (c as i32 + band).min(255) as u8;
            *b = (*b).clamp(lo, hi);
        }
    }
    let labels: Vec<u8> = te.labels.iter().map(|&l| l as u8).collect();
    let (rows, cols) = match te.sample_dims[..] {
        [h, w] => (h, w),
        [flat] => (flat, 1),
        _ => {
            return Err(Error::config(format!(
                "cannot emit IDX for sample dims {:?}",
                te.sample_dims
            )))
        }
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ip = dir.join("adv-images.idx");
    let lp = dir.join("adv-labels.idx");
    write_idx(&ip, &lp, &bytes, rows, cols, &labels)?;
    println!(
        "attacked {} samples ({} steps, eps {}/255) -> {} + {}",
        n,
        atk.steps,
        cfg.epsilon,
        ip.display(),
        lp.display()
    );
    Ok(())
}
