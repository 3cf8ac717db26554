use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use evtplus::events::{EventStream, SensorGeometry};
use evtplus::model::{Model, ModelConfig, Task, WindowInputs};
use evtplus::nn::{
    grad_check, AttentionBlock, Fault, ForwardCtx, GradCheckOptions, ParamStore, Tape, Tensor,
};
use evtplus::objectives::{combined_depth_loss_on, nll_label_smoothing_on, DepthLossConfig};
use evtplus::profiler::{
    count_flops, latency_benchmark, report_csv, report_text, sparsity_stats, ProfileRow,
};
use evtplus::tokenizer::{
    token_csv_header, tokenize_stream, write_token_csv_rows, PatchToken, TokenSet, TokenizerConfig,
};
use evtplus::trainer::{
    evaluate_clf, evaluate_depth, history_csv, load_checkpoint, save_checkpoint, split_indices,
    ClfDataset, ClfExample, DepthDataset, TrainError, Trainer,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TaskKind};
use crate::data::{load_dir, read_stream};
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Streams padded so both sides are multiples of the patch size.
fn padded(
    streams: Vec<(EventStream, Option<u32>)>,
    patch: usize,
) -> Vec<(EventStream, Option<u32>)> {
    streams
        .into_iter()
        .map(|(s, l)| (s.padded_to_multiple(patch as u16), l))
        .collect()
}

fn common_geometry(streams: &[(EventStream, Option<u32>)]) -> Result<SensorGeometry, CliError> {
    let first = streams
        .first()
        .ok_or_else(|| CliError::Data("data directory lists no recordings".into()))?;
    if streams.iter().any(|(s, _)| s.geometry != first.0.geometry) {
        return Err(CliError::Data(
            "recordings have different sensor sizes".into(),
        ));
    }
    Ok(first.0.geometry)
}

fn stream_stop(streams: &[(EventStream, Option<u32>)]) -> i64 {
    streams
        .iter()
        .filter_map(|(s, _)| s.last_time())
        .max()
        .map_or(0, |t| t + 1)
}

pub fn tokenize(input: &Path, dump: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let stream = read_stream(input)?;
    let stream = stream.padded_to_multiple(cfg.usize("patch_size")? as u16);
    let tok = cfg.tokenizer(stream.geometry)?;
    let stats = sparsity_stats(&stream, &tok).map_err(|e| CliError::Data(e.to_string()))?;
    let stop = stats.per_window.len() as i64 * tok.window_us;
    let sets =
        tokenize_stream(&stream, &tok, 0, stop).map_err(|e| CliError::Data(e.to_string()))?;
    let file = File::create(dump).map_err(|e| io_err(dump, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", token_csv_header(tok.event_token_dim())).map_err(|e| io_err(dump, e))?;
    for (i, set) in sets.iter().enumerate() {
        let t_i = i as i64 * tok.window_us;
        write_token_csv_rows(&mut out, i, t_i, t_i + tok.window_us, set)
            .map_err(|e| io_err(dump, e))?;
    }
    out.flush().map_err(|e| io_err(dump, e))?;
    println!(
        "windows {} tokens {} mean {:.3} min {} max {} patches {} ratio {:.4}",
        stats.per_window.len(),
        stats.per_window.iter().sum::<usize>(),
        stats.mean,
        stats.min,
        stats.max,
        stats.total_patches,
        stats.activation_ratio
    );
    Ok(())
}

fn clf_dataset(
    streams: Vec<(EventStream, Option<u32>)>,
    tok: &TokenizerConfig,
    classes: usize,
) -> Result<ClfDataset, CliError> {
    let t_stop = stream_stop(&streams);
    let examples = streams
        .into_iter()
        .map(|(stream, label)| {
            let label =
                label.ok_or_else(|| CliError::Data("recording without a label".into()))? as usize;
            if label >= classes {
                return Err(CliError::Data(format!(
                    "label {label} but only {classes} classes configured"
                )));
            }
            Ok(ClfExample { stream, label })
        })
        .collect::<Result<_, _>>()?;
    Ok(ClfDataset {
        tokenizer: tok.clone(),
        t_start: 0,
        t_stop,
        examples,
    })
}

fn depth_dataset(
    streams: &[EventStream],
    tok: &TokenizerConfig,
    cfg: &RunConfig,
) -> Result<DepthDataset, CliError> {
    Ok(DepthDataset::from_streams(
        streams,
        tok,
        cfg.int("history_us"),
        cfg.flag("use_images"),
        &cfg.depth_loss()?,
    )?)
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub metrics: Option<&'a Path>,
}

pub fn train(args: TrainArgs<'_>, cfg: &RunConfig) -> Result<(), CliError> {
    if !args.data.is_dir() {
        return Err(CliError::Data(format!(
            "{} is not a directory",
            args.data.display()
        )));
    }
    let patch = cfg.usize("patch_size")?;
    let streams = padded(load_dir(args.data)?, patch);
    let tok = cfg.tokenizer(common_geometry(&streams)?)?;
    let classes = cfg.usize("classes")?;
    let mut tc = cfg.train()?;
    tc.dump_path = Some(with_suffix(args.out, ".diverged"));
    let seed = cfg.int("seed") as u64;
    let model = match args.resume {
        Some(_) => None,
        None => Some(Model::new(cfg.model(&tok, classes)?, seed)?),
    };
    let mut trainer = match args.resume {
        Some(path) => {
            let (m, opt) = load_checkpoint(path)?;
            let opt = opt.ok_or_else(|| {
                CliError::Data(format!("{} has no optimizer state", path.display()))
            })?;
            Trainer::with_optimizer(m, opt, tc)?
        }
        None => Trainer::new(model.expect("built above"), tc)?,
    };
    let (train_idx, val_idx) = split_indices(streams.len(), cfg.float("val_fraction"), seed);
    let print = &mut |r: &evtplus::trainer::EpochRecord| {
        let v = r
            .val_metric
            .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "epoch {} step {} loss {:.5} val {v}",
            r.epoch, r.step, r.train_loss
        );
    };
    let (history, metric) = match cfg.task() {
        TaskKind::Clf => {
            let all = clf_dataset(streams, &tok, classes)?;
            let (tr, va) = (all.subset(&train_idx), all.subset(&val_idx));
            (trainer.fit_clf(&tr, Some(&va), print)?, "val_accuracy")
        }
        TaskKind::Depth => {
            let pick = |idx: &[usize]| {
                idx.iter()
                    .map(|&i| streams[i].0.clone())
                    .collect::<Vec<_>>()
            };
            let tr = depth_dataset(&pick(&train_idx), &tok, cfg)?;
            let va = depth_dataset(&pick(&val_idx), &tok, cfg)?;
            if tr.is_empty() {
                return Err(CliError::Data("no depth maps with enough history".into()));
            }
            (trainer.fit_depth(&tr, Some(&va), print)?, "val_mae")
        }
    };
    save_checkpoint(args.out, &trainer.model, Some(&trainer.optimizer))?;
    let metrics = args
        .metrics
        .map(Path::to_path_buf)
        .unwrap_or_else(|| with_suffix(args.out, ".metrics.csv"));
    std::fs::write(&metrics, history_csv(&history, metric)).map_err(|e| io_err(&metrics, e))?;
    let copy = with_suffix(args.out, ".config.txt");
    std::fs::write(&copy, cfg.to_text()).map_err(|e| io_err(&copy, e))?;
    println!(
        "saved {} after {} steps",
        args.out.display(),
        trainer.optimizer.step
    );
    Ok(())
}

/// The run configuration saved next to a checkpoint, if any.
pub fn checkpoint_config(ckpt: &Path) -> Option<PathBuf> {
    Some(with_suffix(ckpt, ".config.txt")).filter(|p| p.exists())
}

pub fn eval(ckpt: &Path, data: &Path, cutoffs: &[f64], cfg: &RunConfig) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(ckpt)?;
    let streams = padded(load_dir(data)?, model.config.patch_size);
    let tok = TokenizerConfig {
        patch_size: model.config.patch_size,
        ..cfg.tokenizer(common_geometry(&streams)?)?
    };
    if tok.grid_rows() != model.config.grid_rows || tok.grid_cols() != model.config.grid_cols {
        return Err(CliError::Data(
            "recordings do not match the checkpoint's patch grid".into(),
        ));
    }
    match (cfg.task(), model.config.task) {
        (TaskKind::Clf, Task::Classification { classes }) => {
            let data = clf_dataset(streams, &tok, classes)?;
            println!(
                "accuracy {:.6} ({} recordings)",
                evaluate_clf(&model, &data)?,
                data.len()
            );
        }
        (TaskKind::Depth, Task::Depth) => {
            let s: Vec<EventStream> = streams.into_iter().map(|(s, _)| s).collect();
            let data = depth_dataset(&s, &tok, cfg)?;
            let mut cuts = cutoffs.to_vec();
            cuts.push(f64::INFINITY);
            let maes = evaluate_depth(&model, &data, &cuts, &cfg.depth_loss()?)?;
            for (c, m) in cuts.iter().zip(maes) {
                let name = if c.is_finite() {
                    format!("{c}")
                } else {
                    "all".into()
                };
                match m {
                    Some(v) => println!("mae@{name} {v:.6}"),
                    None => println!("mae@{name} absent"),
                }
            }
        }
        _ => {
            return Err(CliError::Usage(
                "--task does not match the checkpoint".into(),
            ))
        }
    }
    Ok(())
}

pub fn profile(data: Option<&Path>, csv: Option<&Path>, cfg: &RunConfig) -> Result<(), CliError> {
    let patch = cfg.usize("patch_size")?;
    let classes = cfg.usize("classes")?;
    let (geo, streams) = match data {
        Some(dir) => {
            let s = padded(load_dir(dir)?, patch);
            (
                common_geometry(&s)?,
                s.into_iter().map(|(s, _)| s).collect::<Vec<_>>(),
            )
        }
        None => (
            EventStream::empty(cfg.geometry()?)
                .padded_to_multiple(patch as u16)
                .geometry,
            Vec::new(),
        ),
    };
    let tok = cfg.tokenizer(geo)?;
    let mc: ModelConfig = cfg.model(&tok, classes)?;
    let events = if streams.is_empty() {
        cfg.float("profile_tokens")
    } else {
        let means = streams
            .iter()
            .map(|s| sparsity_stats(s, &tok).map(|st| st.mean))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Data(e.to_string()))?;
        means.iter().sum::<f64>() / means.len() as f64
    };
    let cells = mc.cells() as f64;
    let tokens = if mc.use_images {
        vec![events, cells]
    } else {
        vec![events]
    };
    let dense: Vec<f64> = tokens.iter().map(|_| cells).collect();
    let sparse = count_flops(&mc, &tokens);
    let full = count_flops(&mc, &dense);
    let model = Model::new(mc.clone(), cfg.int("seed") as u64)?;
    let latency = match streams.first() {
        Some(s) => Some(
            latency_benchmark(
                &model,
                s,
                &tok,
                cfg.usize("latency_warmup")?,
                cfg.usize("latency_reps")?,
            )?
            .mean
            .as_secs_f64()
                * 1e3,
        ),
        None => None,
    };
    let row = ProfileRow {
        name: match cfg.task() {
            TaskKind::Clf => "classification".into(),
            TaskKind::Depth => "depth".into(),
        },
        patch_size: patch,
        mean_tokens: events,
        total_patches: mc.cells(),
        window_ms: tok.window_us as f64 / 1e3,
        latency_ms: latency,
        sparse_gflops: sparse.total / 1e9,
        dense_gflops: full.total / 1e9,
        params: model.num_params(),
    };
    print!("{}", report_text(std::slice::from_ref(&row)));
    println!("stage            GFLOPs    share");
    for (name, v) in [
        ("preprocessing", sparse.preprocessing),
        ("backbone", sparse.backbone),
        ("head", sparse.head),
    ] {
        println!(
            "{name:<16} {:<9.4} {:.1}%",
            v / 1e9,
            100.0 * v / sparse.total
        );
    }
    if let Some(path) = csv {
        std::fs::write(path, report_csv(&[row])).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn tiny_config(task: Task, use_images: bool) -> ModelConfig {
    ModelConfig {
        dim: 16,
        latents: 4,
        n1: 1,
        n2: 1,
        n3: 1,
        heads: 2,
        heads_pre_dec: 2,
        patch_size: 4,
        fifo_depth: 2,
        grid_rows: 3,
        grid_cols: 4,
        task,
        use_images,
        dropout: 0.0,
    }
}

fn random_set(rng: &mut ChaCha8Rng, c: &ModelConfig, dim: usize) -> TokenSet {
    let mut cells: Vec<usize> = (0..c.cells()).collect();
    cells.shuffle(rng);
    let n = rng.random_range(1..=c.cells());
    let mut chosen = cells[..n].to_vec();
    chosen.sort_unstable();
    TokenSet {
        tokens: chosen
            .into_iter()
            .map(|cell| PatchToken {
                row: cell / c.grid_cols,
                col: cell % c.grid_cols,
                data: (0..dim).map(|_| rng.random()).collect(),
            })
            .collect(),
        grid_rows: c.grid_rows,
        grid_cols: c.grid_cols,
    }
}

fn random_windows(rng: &mut ChaCha8Rng, c: &ModelConfig) -> Vec<WindowInputs> {
    (0..2)
        .map(|_| WindowInputs {
            events: random_set(rng, c, c.event_token_dim()),
            image: c
                .use_images
                .then(|| random_set(rng, c, c.image_token_dim())),
        })
        .collect()
}

/// Finite-difference checks of an attention block and of the tiny
/// classification and depth models. Returns the name, largest relative
/// error and worst parameter of each check.
pub fn grad_checks(
    seed: u64,
    samples: usize,
    fault: Option<Fault>,
) -> Result<Vec<(String, f64, String)>, CliError> {
    let opts = GradCheckOptions {
        max_per_param: Some(samples),
        seed,
        ..GradCheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "block", 8, 2, true, &mut rng);
    let q = Tensor::new(
        &[3, 8],
        (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape");
    let kv = Tensor::new(
        &[5, 8],
        (0..40).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape");
    let report = grad_check(
        &mut store,
        |tape: &mut Tape<'_>| {
            tape.set_fault(fault);
            let (q, kv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
            let y = block
                .cross_attend(tape, &mut ForwardCtx::inference(), q, kv)
                .expect("shapes");
            let y2 = tape.mul(y, y).expect("shapes");
            tape.sum_all(y2)
        },
        &opts,
    );
    results.push((
        "attention block".to_string(),
        report.max_rel_error,
        report.worst_param,
    ));

    for (name, task, images) in [
        (
            "classification model",
            Task::Classification { classes: 3 },
            false,
        ),
        ("depth model", Task::Depth, true),
    ] {
        let c = tiny_config(task, images);
        let model = Model::new(c.clone(), seed)?;
        let windows = random_windows(&mut rng, &c);
        let target: Vec<f64> = (0..c.height() * c.width()).map(|_| rng.random()).collect();
        let mask: Vec<bool> = (0..target.len()).map(|i| i % 5 != 0).collect();
        // Piecewise-linear gradient terms put kinks within one step of some base points.
        let loss_cfg = DepthLossConfig {
            lambda: 0.0,
            ..DepthLossConfig::default()
        };
        let mut store = model.params.clone();
        let report = grad_check(
            &mut store,
            |tape: &mut Tape<'_>| {
                tape.set_fault(fault);
                let ctx = &mut ForwardCtx::inference();
                match task {
                    Task::Classification { .. } => {
                        let l = model
                            .forward_clf(tape, ctx, &windows)
                            .expect("valid inputs");
                        nll_label_smoothing_on(tape, l, 1, 0.1).expect("valid target")
                    }
                    Task::Depth => {
                        let d = model
                            .forward_depth(tape, ctx, &windows)
                            .expect("valid inputs");
                        combined_depth_loss_on(
                            tape,
                            d,
                            &target,
                            &mask,
                            c.height(),
                            c.width(),
                            &loss_cfg,
                        )
                        .expect("valid target")
                    }
                }
            },
            &opts,
        );
        results.push((name.to_string(), report.max_rel_error, report.worst_param));
    }
    Ok(results)
}

pub fn map_train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } => {
            CliError::Numerical(e.to_string())
        }
        TrainError::Config(m) => CliError::Usage(m),
        other => CliError::Data(other.to_string()),
    }
}
