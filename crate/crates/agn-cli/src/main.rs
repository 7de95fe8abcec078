//! `agn` — phantom data generation, CNN / joint training, prediction and
//! evaluation for the airway graph network.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use agn_core::cnn::cnn_forward;
use agn_core::config::TrainConfig;
use agn_core::error::AgnError;
use agn_core::formats::{load_checkpoint, load_volume, save_checkpoint, save_volume, write_pgm};
use agn_core::metrics::{dice_coefficient, write_metrics_csv, MetricRecord, Split};
use agn_core::model::{init_model_params, joint_forward};
use agn_core::ops::loss::bce_loss;
use agn_core::phantom::{filter_empty_slices, generate_phantom, Difficulty};
use agn_core::tensor::Tensor;
use agn_core::train::{
    checkpoint_meta, config_from_meta, prepare_slices, train_cnn, train_joint, ModelKind,
};
use agn_core::{ParamSet, Result};

#[derive(Parser)]
#[command(name = "agn", about = "Airway graph network pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum DifficultyArg {
    TubeOnly,
    WithBronchi,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom volume.
    GenData {
        #[arg(long)]
        slices: usize,
        /// Height and width, e.g. --size 64 64
        #[arg(long, num_args = 2, value_names = ["H", "W"])]
        size: Vec<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        difficulty: DifficultyArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the CNN stream.
    TrainCnn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Train the joint model on top of a CNN checkpoint.
    TrainJoint {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cnn_ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Write per-slice probability and mask images.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write CNN-only images from this checkpoint for comparison.
        #[arg(long)]
        compare_cnn: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, one CSV record per slice.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| AgnError::io(path.display().to_string(), e))?;
    TrainConfig::parse(&text)
}

/// Loads a checkpoint together with the model it describes (reconstructed
/// from the file's meta entries).
fn load_model(path: &Path) -> Result<(TrainConfig, agn_core::model::ModelConfig, ModelKind, ParamSet)> {
    let meta = agn_core::formats::peek_meta(path)?;
    let (cfg, model, kind) = config_from_meta(&meta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_model_params(&model, &mut rng)?;
    load_checkpoint(path, &mut params)?;
    Ok((cfg, model, kind, params))
}

/// Slice probability map under the checkpoint's own model kind.
fn predict_slice(
    params: &mut ParamSet,
    model: &agn_core::model::ModelConfig,
    kind: ModelKind,
    input: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    match kind {
        ModelKind::Cnn => Ok(cnn_forward(input, params, &model.cnn, false)?.0.prob),
        ModelKind::Joint => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(joint_forward(input, params, model, None, seed, false, &mut rng)?.0.prob)
        }
    }
}

fn binarize(prob: &Tensor) -> Tensor {
    Tensor::from_fn(prob.shape(), |i| if prob.data()[i] >= 0.5 { 1.0 } else { 0.0 })
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            slices,
            size,
            seed,
            difficulty,
            out,
        } => {
            let difficulty = match difficulty {
                DifficultyArg::TubeOnly => Difficulty::TubeOnly,
                DifficultyArg::WithBronchi => Difficulty::WithBronchi,
            };
            let vol = generate_phantom(slices, size[0], size[1], seed, difficulty)?;
            save_volume(&out, &vol)?;
            println!("wrote {} ({} slices of {}x{})", out.display(), slices, size[0], size[1]);
        }
        Command::TrainCnn {
            data,
            config,
            out,
            metrics,
        } => {
            let cfg = read_config(&config)?;
            let vol = filter_empty_slices(&load_volume(&data)?)?;
            let (params, model, records) = train_cnn(&vol, &cfg)?;
            save_checkpoint(&out, &params, &checkpoint_meta(&cfg, model.cnn.input_size, ModelKind::Cnn))?;
            write_metrics_csv(&metrics, &records)?;
            let last_test = records.iter().rev().find(|r| r.split == Split::Test);
            if let Some(r) = last_test {
                println!("final test loss {:.6}, dice {:.4}", r.loss, r.dice);
            }
        }
        Command::TrainJoint {
            data,
            cnn_ckpt,
            config,
            out,
            metrics,
        } => {
            let cfg = read_config(&config)?;
            let vol = filter_empty_slices(&load_volume(&data)?)?;
            let (_, _, kind, mut params) = load_model(&cnn_ckpt)?;
            if kind != ModelKind::Cnn {
                return Err(AgnError::InvalidArgument(format!(
                    "{} is not a CNN checkpoint",
                    cnn_ckpt.display()
                )));
            }
            let (model, records) = train_joint(&vol, &cfg, &mut params)?;
            save_checkpoint(&out, &params, &checkpoint_meta(&cfg, model.cnn.input_size, ModelKind::Joint))?;
            write_metrics_csv(&metrics, &records)?;
            let last_test = records.iter().rev().find(|r| r.split == Split::Test);
            if let Some(r) = last_test {
                println!("final test loss {:.6}, dice {:.4}", r.loss, r.dice);
            }
        }
        Command::Predict {
            data,
            ckpt,
            out,
            compare_cnn,
        } => {
            let vol = load_volume(&data)?;
            let slices = prepare_slices(&vol)?;
            let (cfg, model, kind, mut params) = load_model(&ckpt)?;
            let cnn = match &compare_cnn {
                Some(p) => {
                    let (_, cmodel, ckind, cparams) = load_model(p)?;
                    if ckind != ModelKind::Cnn {
                        return Err(AgnError::InvalidArgument(format!("{} is not a CNN checkpoint", p.display())));
                    }
                    Some((cmodel, cparams))
                }
                None => None,
            };
            std::fs::create_dir_all(&out).map_err(|e| AgnError::io(out.display().to_string(), e))?;
            let mut cnn = cnn;
            for (z, input) in slices.inputs.iter().enumerate() {
                let prob = predict_slice(&mut params, &model, kind, input, cfg.seed.wrapping_add(z as u64))?;
                write_pgm(&out.join(format!("slice_{z:03}_prob.pgm")), &prob)?;
                write_pgm(&out.join(format!("slice_{z:03}_mask.pgm")), &binarize(&prob))?;
                if let Some((cmodel, cparams)) = cnn.as_mut() {
                    let cprob = predict_slice(cparams, cmodel, ModelKind::Cnn, input, 0)?;
                    write_pgm(&out.join(format!("slice_{z:03}_cnn_prob.pgm")), &cprob)?;
                    write_pgm(&out.join(format!("slice_{z:03}_cnn_mask.pgm")), &binarize(&cprob))?;
                }
            }
            println!("wrote {} slices to {}", slices.inputs.len(), out.display());
        }
        Command::Eval { data, ckpt, metrics } => {
            let vol = load_volume(&data)?;
            let slices = prepare_slices(&vol)?;
            let (cfg, model, kind, mut params) = load_model(&ckpt)?;
            let mut records = Vec::new();
            for (z, input) in slices.inputs.iter().enumerate() {
                let prob = predict_slice(&mut params, &model, kind, input, cfg.seed.wrapping_add(z as u64))?;
                let truth = &slices.targets[z];
                let loss = bce_loss(&prob, truth)?;
                // curve semantics: slices with empty truth plot as dice 0
                let dice = if truth.data().iter().all(|&v| v == 0.0) {
                    0.0
                } else {
                    dice_coefficient(&prob, truth)?
                };
                records.push(MetricRecord {
                    iteration: z,
                    split: Split::Test,
                    loss,
                    dice,
                });
            }
            write_metrics_csv(&metrics, &records)?;
            let n = records.len() as f64;
            println!(
                "mean loss {:.6}, mean dice {:.4} over {} slices",
                records.iter().map(|r| r.loss).sum::<f64>() / n,
                records.iter().map(|r| r.dice).sum::<f64>() / n,
                records.len()
            );
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
