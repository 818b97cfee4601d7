//! Command-line front end: pretrain / finetune / train-scratch / eval /
//! bench / inspect / dump-recon. Exit codes: 0 success, 1 usage or config
//! error, 2 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hiera::bench::{bench_throughput, BenchMode};
use hiera::cost::cost_report;
use hiera::mae::{DecoderConfig, MaePretrainer};
use hiera::model::{parse_config, Hiera, HieraConfig, Variant};
use hiera::train::{
    config_hash, dump_reconstruction, encoder_state, evaluate, finetune_loop, load_image_dir,
    load_raw, pretrain_loop, pretrain_state, supervised_loop, synthetic_dataset,
    write_trace, LoopOptions, OptimConfig, Sample,
};
use hiera::{Error, Result};

#[derive(Parser)]
#[command(name = "hiera", version, about = "Hierarchical vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Line-oriented config file (`key value...`, # comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named size preset: T, S, B, B+, L, H.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoints, traces, and dumps.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated architecture overrides, e.g.
    /// `attn_mode=kv_pool,pool_kernel=overlap3`.
    #[arg(long)]
    ladder: Option<String>,
    /// Write a machine-readable summary of the run here.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    lr: Option<f64>,
    /// Number of synthetic samples when no --data directory is given.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Directory of .png/.jpg images to train on instead of synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    log_every: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sparse masked-autoencoder pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Supervised training from a pretrained encoder checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Pretraining checkpoint to initialize the encoder from.
        #[arg(long)]
        from: PathBuf,
    },
    /// Supervised training from random initialization.
    TrainScratch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Top-1 accuracy of a supervised checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Forward-pass throughput measurement.
    Bench {
        #[command(flatten)]
        common: Common,
        /// `dense` or `sparse:RATIO`.
        #[arg(long, default_value = "dense")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        warmups: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Analytic parameter and FLOP report for a config.
    Inspect {
        #[command(flatten)]
        common: Common,
    },
    /// Write input / masked / reconstruction images from a pretraining run.
    DumpRecon {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint; omitted means random weights.
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

/// Config errors (bad files, bad values) exit 1; everything else exits 2.
fn exit_for(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests are successes; parse failures are
            // usage errors.
            let code = if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

fn load_map(common: &Common) -> Result<BTreeMap<String, Vec<String>>> {
    match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            parse_config(&text)
        }
        None => Ok(BTreeMap::new()),
    }
}

fn resolve_config(common: &Common) -> Result<(HieraConfig, BTreeMap<String, Vec<String>>)> {
    let mut map = load_map(common)?;
    if let Some(v) = &common.variant {
        Variant::parse(v)?; // fail fast with the valid-name list
        map.insert("variant".into(), vec![v.clone()]);
    } else if common.config.is_none() {
        return Err(Error::Config(
            "give --variant (T, S, B, B+, L, H) or --config PATH".into(),
        ));
    }
    let mut cfg = HieraConfig::from_map(&map)?;
    if let Some(spec) = &common.ladder {
        cfg.apply_ladder(spec)?;
        cfg.validate()?;
    }
    Ok((cfg, map))
}

fn ensure_out(common: &Common) -> Result<()> {
    std::fs::create_dir_all(&common.out)?;
    Ok(())
}

fn get_f64(map: &BTreeMap<String, Vec<String>>, key: &str, default: f64) -> Result<f64> {
    match map.get(key) {
        Some(v) if v.len() == 1 => v[0]
            .parse()
            .map_err(|_| Error::Config(format!("{key}: bad value {:?}", v[0]))),
        Some(_) => Err(Error::Config(format!("{key}: expected one value"))),
        None => Ok(default),
    }
}

fn dataset(
    cfg: &HieraConfig,
    train: &TrainFlags,
    seed: u64,
) -> Result<Vec<Sample>> {
    match &train.data {
        Some(dir) => load_image_dir(dir, cfg.input),
        None => Ok(synthetic_dataset(
            cfg.input,
            train.samples,
            cfg.num_classes.min(8),
            seed,
        )),
    }
}

fn loop_options(common: &Common, train: &TrainFlags, ckpt: &str) -> LoopOptions {
    LoopOptions {
        epochs: train.epochs,
        batch: train.batch,
        checkpoint: Some(common.out.join(ckpt)),
        log_every: train.log_every,
        ..LoopOptions::default()
    }
}

fn write_json(path: &Path, pairs: &[(&str, serde_json::Value)]) -> Result<()> {
    let mut obj = serde_json::Map::new();
    for (k, v) in pairs {
        obj.insert(k.to_string(), v.clone());
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(obj))
        .map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Inspect { common } => {
            let (cfg, _) = resolve_config(&common)?;
            let report = cost_report(&cfg)?;
            println!("{:<10} {:>14} {:>16}", "section", "params", "flops");
            for row in &report.rows {
                println!("{:<10} {:>14} {:>16}", row.name, row.params, row.flops);
            }
            println!("{:<10} {:>14} {:>16}", "total", report.total_params, report.total_flops);
            println!(
                "stage resolutions: {}",
                report
                    .stage_resolutions
                    .iter()
                    .map(|(h, w)| format!("{h}x{w}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            if let Some(path) = &common.json_out {
                let rows: Vec<serde_json::Value> = report
                    .rows
                    .iter()
                    .map(|r| {
                        serde_json::json!({
                            "name": r.name, "params": r.params, "flops": r.flops
                        })
                    })
                    .collect();
                write_json(
                    path,
                    &[
                        ("rows", serde_json::Value::Array(rows)),
                        ("total_params", report.total_params.into()),
                        ("total_flops", report.total_flops.into()),
                        (
                            "stage_resolutions",
                            serde_json::json!(report.stage_resolutions),
                        ),
                    ],
                )?;
            }
            Ok(())
        }
        Cmd::Bench { common, mode, batch, warmups, reps } => {
            let (cfg, _) = resolve_config(&common)?;
            let mode = BenchMode::parse(&mode)?;
            let result = bench_throughput(&cfg, mode, batch, warmups, reps, common.seed)?;
            println!("config     {}", result.id);
            println!("batch      {}", result.batch);
            println!("warmups    {}", result.warmups);
            println!("throughput {:.4} items/s", result.throughput);
            for (i, s) in result.rep_seconds.iter().enumerate() {
                println!("rep{i}       {s:.4} s");
            }
            for (k, v) in &result.env {
                println!("env.{k}     {v}");
            }
            if let Some(path) = &common.json_out {
                write_json(
                    path,
                    &[
                        ("id", result.id.clone().into()),
                        ("batch", result.batch.into()),
                        ("throughput_items_per_s", result.throughput.into()),
                        ("rep_seconds", serde_json::json!(result.rep_seconds)),
                        ("warmups", result.warmups.into()),
                        ("env", serde_json::json!(result.env)),
                    ],
                )?;
            }
            Ok(())
        }
        Cmd::Pretrain { common, train } => {
            let (cfg, map) = resolve_config(&common)?;
            ensure_out(&common)?;
            let dec = DecoderConfig::from_map(&map, cfg.input.frames.is_some())?;
            let mae: MaePretrainer<f32> = MaePretrainer::build(cfg.clone(), dec, common.seed)?;
            let data = dataset(&mae.encoder.config, &train, common.seed)?;
            let spe = data.len().div_ceil(train.batch);
            let total = spe * train.epochs;
            let lr = train.lr.unwrap_or(get_f64(&map, "lr", 8e-4)?);
            let warmup = (total / 20).max(1);
            let mut state = pretrain_state(&mae, OptimConfig::pretrain(lr, warmup, total), common.seed);
            let opts = loop_options(&common, &train, "pretrain.ckpt");
            let trace = pretrain_loop(&mae, &data, &mut state, &opts)?;
            write_trace(&common.out.join("pretrain_loss.csv"), &trace)?;
            let last = trace.last().map(|&(_, v)| v).unwrap_or(f64::NAN);
            println!("steps {}  final loss {last:.6}", state.step);
            println!("checkpoint {}", common.out.join("pretrain.ckpt").display());
            if let Some(path) = &common.json_out {
                write_json(
                    path,
                    &[
                        ("steps", state.step.into()),
                        ("final_loss", last.into()),
                        ("checkpoint", common.out.join("pretrain.ckpt").display().to_string().into()),
                    ],
                )?;
            }
            Ok(())
        }
        Cmd::Finetune { common, train, from } => {
            let (mut cfg, map) = resolve_config(&common)?;
            cfg.pretrain_mode = false;
            ensure_out(&common)?;
            let pretrained = load_raw(&from)?;
            let model: Hiera<f32> = Hiera::build(cfg.clone(), common.seed)?;
            let data = dataset(&cfg, &train, common.seed)?;
            let spe = data.len().div_ceil(train.batch);
            let total = spe * train.epochs;
            let lr = train.lr.unwrap_or(get_f64(&map, "lr", 1e-3)?);
            let layer_decay = get_f64(&map, "layer_decay", 0.9)?;
            let warmup = (total / 20).max(1);
            let mut state = encoder_state(
                &model,
                OptimConfig::finetune(lr, warmup, total, layer_decay),
                common.seed,
            );
            let opts = loop_options(&common, &train, "finetune.ckpt");
            let (report, trace) = finetune_loop(&model, &pretrained, &data, &mut state, &opts)?;
            write_trace(&common.out.join("finetune_loss.csv"), &trace.loss)?;
            let acc = trace.accuracy.last().map(|&(_, a)| a).unwrap_or(0.0);
            println!("loaded {} tensors, dropped {}", report.loaded.len(), report.dropped.len());
            println!("steps {}  final epoch accuracy {acc:.4}", state.step);
            if let Some(path) = &common.json_out {
                write_json(
                    path,
                    &[
                        ("loaded", report.loaded.len().into()),
                        ("dropped", serde_json::json!(report.dropped)),
                        ("steps", state.step.into()),
                        ("final_accuracy", acc.into()),
                    ],
                )?;
            }
            Ok(())
        }
        Cmd::TrainScratch { common, train } => {
            let (mut cfg, map) = resolve_config(&common)?;
            cfg.pretrain_mode = false;
            ensure_out(&common)?;
            let model: Hiera<f32> = Hiera::build(cfg.clone(), common.seed)?;
            let data = dataset(&cfg, &train, common.seed)?;
            let spe = data.len().div_ceil(train.batch);
            let total = spe * train.epochs;
            let lr = train.lr.unwrap_or(get_f64(&map, "lr", 1e-3)?);
            let warmup = (total / 20).max(1);
            let mut state = encoder_state(
                &model,
                OptimConfig::finetune(lr, warmup, total, 1.0),
                common.seed,
            );
            let opts = loop_options(&common, &train, "scratch.ckpt");
            let trace = supervised_loop(&model, &data, &mut state, &opts)?;
            write_trace(&common.out.join("scratch_loss.csv"), &trace.loss)?;
            let acc = trace.accuracy.last().map(|&(_, a)| a).unwrap_or(0.0);
            println!("steps {}  final epoch accuracy {acc:.4}", state.step);
            if let Some(path) = &common.json_out {
                write_json(
                    path,
                    &[("steps", state.step.into()), ("final_accuracy", acc.into())],
                )?;
            }
            Ok(())
        }
        Cmd::Eval { common, from, samples, data } => {
            let (mut cfg, _) = resolve_config(&common)?;
            cfg.pretrain_mode = false;
            let model: Hiera<f32> = Hiera::build(cfg.clone(), common.seed)?;
            let ck = load_raw(&from)?;
            let mut state = encoder_state(&model, OptimConfig::finetune(0.0, 1, 1, 1.0), common.seed);
            state.restore(&ck)?;
            let data = match &data {
                Some(dir) => load_image_dir(dir, cfg.input)?,
                None => synthetic_dataset(cfg.input, samples, cfg.num_classes.min(8), common.seed),
            };
            let acc = evaluate(&model, &data)?;
            println!("samples {}  top-1 accuracy {acc:.4}", data.len());
            if let Some(path) = &common.json_out {
                write_json(path, &[("samples", data.len().into()), ("accuracy", acc.into())])?;
            }
            Ok(())
        }
        Cmd::DumpRecon { common, from } => {
            let (cfg, map) = resolve_config(&common)?;
            ensure_out(&common)?;
            let dec = DecoderConfig::from_map(&map, cfg.input.frames.is_some())?;
            let mae: MaePretrainer<f32> = MaePretrainer::build(cfg.clone(), dec, common.seed)?;
            if let Some(path) = &from {
                let ck = load_raw(path)?;
                let expect = config_hash(&mae.encoder.config, Some(&mae.decoder.config));
                if ck.config_hash != expect {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint {} was written for a different config",
                        path.display()
                    )));
                }
                for (name, t, _) in mae.param_entries() {
                    if let Some((_, shape, data)) = ck.get(&name) {
                        if *shape == t.shape() {
                            t.set_data(data.clone())?;
                        }
                    }
                }
            }
            let sample = &synthetic_dataset(mae.encoder.config.input, 1, 2, common.seed)[0];
            let path = common.out.join("recon.ppm");
            dump_reconstruction(&mae, sample, common.seed, &path)?;
            println!("wrote {}", path.display());
            if let Some(jp) = &common.json_out {
                write_json(jp, &[("output", path.display().to_string().into())])?;
            }
            Ok(())
        }
    }
}
