use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use deformnet_core::data::{load_dataset, save_dataset, Family, MorphConfig};
use deformnet_core::io::{write_dsdf, Field};
use deformnet_core::train::{BetaGradientKind, TrainConfig};
use deformnet_service::pipeline::{
    compute_defos, evaluate, gen_data, load_defos, save_defos, train_defo_stage, train_param_stage, DataConfig,
};
use deformnet_service::{api, infer::infer, ModelBundle};

#[derive(Parser)]
#[command(name = "deformnet", version, about = "Train and serve deformation-based SDF family models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Param,
    Defo,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parametrized SDF dataset.
    GenData {
        #[arg(long, default_value = "drop2d")]
        family: String,
        #[arg(long, default_value_t = 64)]
        res: usize,
        /// Samples per parameter axis, e.g. 21x21.
        #[arg(long, default_value = "21x21")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the train/validation/test split.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        val: f64,
        #[arg(long, default_value_t = 0.05)]
        test: f64,
        /// Strength of the parameter interaction in the drop2d family.
        #[arg(long)]
        strength: Option<f64>,
    },
    /// Compute one endpoint deformation per parameter axis.
    ComputeDefos {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 8)]
        inner_sweeps: usize,
    },
    /// Train the weight network (param) or the refinement network (defo).
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        /// Endpoint deformations; required for the param stage.
        #[arg(long)]
        defos: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        gamma1: f64,
        #[arg(long, default_value_t = 0.0)]
        gamma2: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Param-stage model to refine; defaults to --out.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        fill_iters: usize,
        #[arg(long, default_value_t = 4)]
        region_factor: usize,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 100)]
        log_interval: usize,
        /// Loss curve CSV; defaults to the model path with a .csv extension.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Use the sequential-advection weight gradient instead of the aligned one.
        #[arg(long)]
        naive_gradient: bool,
    },
    /// Test-split ablation report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also store the report inside the model file.
        #[arg(long)]
        embed: bool,
    },
    /// Serve the HTTP inference API.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Directory of static UI assets served at /.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Evaluate the model at one parameter point and write the SDF.
    Export {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated parameter values.
        #[arg(long)]
        alpha: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_grid(s: &str) -> Result<Vec<usize>> {
    s.split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad grid {s:?}")))
        .collect()
}

fn parse_alpha(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad alpha {s:?}")))
        .collect()
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            family,
            res,
            grid,
            out,
            seed,
            val,
            test,
            strength,
        } => {
            let mut cfg = DataConfig::new(Family::parse(&family)?, res, &parse_grid(&grid)?);
            cfg.seed = seed;
            cfg.val_fraction = val;
            cfg.test_fraction = test;
            cfg.strength = strength;
            let ds = gen_data(&cfg)?;
            save_dataset(&ds, &out)?;
            eprintln!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
        Cmd::ComputeDefos {
            data,
            out,
            lambda,
            levels,
            iters,
            inner_sweeps,
        } => {
            let ds = load_dataset(&data)?;
            let cfg = MorphConfig {
                lambda,
                iters,
                levels,
                inner_sweeps,
            };
            let (fields, manifest) = compute_defos(&ds, &cfg)?;
            for e in &manifest.fields {
                eprintln!(
                    "axis {}: loss {:.6} -> {:.6}{}",
                    e.axis,
                    e.initial_loss,
                    e.final_loss,
                    if e.warning { " (did not improve)" } else { "" }
                );
            }
            save_defos(&out, &fields, &manifest)?;
        }
        Cmd::Train {
            stage,
            data,
            defos,
            steps,
            lr,
            gamma1,
            gamma2,
            seed,
            out,
            init,
            fill_iters,
            region_factor,
            sigma,
            log_interval,
            curve,
            naive_gradient,
        } => {
            let ds = load_dataset(&data)?;
            let mut cfg = TrainConfig {
                lr,
                gamma1,
                gamma2,
                seed,
                fill_iters,
                region_factor,
                sigma,
                log_interval,
                ..TrainConfig::default()
            };
            if naive_gradient {
                cfg.beta_gradient = BetaGradientKind::Naive;
            }
            let (bundle, losses) = match stage {
                Stage::Param => {
                    if let Some(s) = steps {
                        cfg.steps_param = s;
                    }
                    let Some(dir) = defos else { bail!("--defos is required for the param stage") };
                    let (fields, manifest) = load_defos(&dir)?;
                    let axes = manifest.fields.iter().map(|e| e.axis).collect();
                    train_param_stage(&ds, &fields, axes, &cfg)?
                }
                Stage::Defo => {
                    if let Some(s) = steps {
                        cfg.steps_defo = s;
                    }
                    let from = init.unwrap_or_else(|| out.clone());
                    let base = ModelBundle::load(&from).with_context(|| format!("loading {}", from.display()))?;
                    train_defo_stage(&base, &ds, &cfg)?
                }
            };
            bundle.save(&out)?;
            let curve = curve.unwrap_or_else(|| out.with_extension("csv"));
            std::fs::write(&curve, losses.to_csv())?;
            eprintln!(
                "validation loss {:?} -> {:?}; wrote {}",
                losses.initial_val(),
                losses.final_val(),
                out.display()
            );
        }
        Cmd::Eval {
            model,
            data,
            report,
            embed,
        } => {
            let mut bundle = ModelBundle::load(&model)?;
            let ds = load_dataset(&data)?;
            let r = evaluate(&bundle, &ds)?;
            write_json(&report, &r)?;
            eprintln!(
                "L_base {:.6e}  L_param {:.6e}  L_full {:.6e}  (L_full/L_base {:.3})",
                r.l_base, r.l_param, r.l_full, r.ratio_full
            );
            if embed {
                bundle.ablation = Some(r);
                bundle.save(&model)?;
            }
        }
        Cmd::Serve { model, port, host, ui } => {
            let bundle = Arc::new(ModelBundle::load(&model)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(api::serve(bundle, SocketAddr::new(host, port), ui))?;
        }
        Cmd::Export { model, alpha, out } => {
            let bundle = ModelBundle::load(&model)?;
            let r = infer(&bundle, &parse_alpha(&alpha)?)?;
            if r.clamped {
                eprintln!("warning: alpha clamped to {:?}", r.alpha);
            }
            write_dsdf(&out, &Field::Scalar(r.psi), &r.alpha)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
