mod overrides;

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use promptseg::config::RunConfig;
use promptseg::datamodel::synthetic::{write_dataset, Imbalance, SyntheticSpec};
use promptseg::datamodel::{build_index, CaseRecord, DEFAULT_MODALITIES};
use promptseg::exec::Execution;
use promptseg::inference::{evaluate_cases, gt_boxes, predict_case, write_prediction, BoxesFile, SliceBoxes};
use promptseg::metrics::{aggregate, score_items, wilcoxon_signed_rank, EvalItem, ScoreTable, DEFAULT_NSD_TOLERANCE};
use promptseg::model::SegModel;
use promptseg::trainer::{fit, FitOptions, TrainData};
use promptseg::Error as CoreError;

use overrides::UsageError;

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Box-prompted medical image segmentation")]
struct Cli {
    /// Run data-parallel work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset of geometric shapes.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated modality names; defaults to the 11 standard ones.
        #[arg(long, value_delimiter = ',')]
        modalities: Option<Vec<String>>,
        #[arg(long, default_value_t = 4)]
        cases_per_modality: usize,
        /// `none` or `challenge`.
        #[arg(long, default_value = "none")]
        imbalance: String,
        /// Slice side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        planar_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; trailing `--section.key=value` flags override the config.
    Train {
        /// TOML run config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Seeds the model, sampler and augmentation at once.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(allow_hyphen_values = true, trailing_var_arg = true, num_args = 0..)]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on a dataset with ground-truth boxes.
    Eval {
        #[arg(long, required_unless_present = "gt_as_pred")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long, default_value_t = DEFAULT_NSD_TOLERANCE)]
        nsd_tolerance: f64,
        /// Directory for `scores.csv` and `aggregate.json`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Score the ground truth against itself instead of running a model.
        #[arg(long)]
        gt_as_pred: bool,
    },
    /// Predict label volumes from boxes and write one `.npz` per case.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_root: PathBuf,
        /// JSON `{case_id: {slice: [[x1, y1, x2, y2], ...]}}`; tight
        /// ground-truth boxes when omitted.
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long, default_value_t = promptseg_service::DEFAULT_ADDR.port())]
        port: u16,
        #[arg(long, default_value_t = promptseg_service::DEFAULT_ADDR.ip())]
        host: IpAddr,
    },
    /// Paired Wilcoxon signed-rank tests between two score tables.
    Report {
        #[arg(long)]
        scores_a: PathBuf,
        #[arg(long)]
        scores_b: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cmd: Command, exec: Execution) -> Result<()> {
    match cmd {
        Command::GenSynthetic {
            out,
            modalities,
            cases_per_modality,
            imbalance,
            size,
            planar_only,
            seed,
        } => {
            let imbalance: Imbalance = imbalance.parse().map_err(|e: CoreError| UsageError(e.to_string()))?;
            let spec = SyntheticSpec {
                modalities: modalities.unwrap_or_else(|| DEFAULT_MODALITIES.iter().map(|s| s.to_string()).collect()),
                cases_per_modality,
                imbalance,
                size,
                planar_only,
                seed,
                ..Default::default()
            };
            let manifest = write_dataset(&out, &spec)?;
            let total: usize = manifest.counts.values().sum();
            println!("wrote {total} cases over {} modalities to {}", manifest.modalities.len(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            data_root,
            out,
            resume,
            seed,
            overrides,
        } => {
            let mut cfg = train_config(config.as_deref(), data_root, out, seed, &overrides)?;
            let root = cfg.data.root.clone().ok_or_else(|| UsageError("no dataset: pass --data-root or set data.root".into()))?;
            let out_dir = cfg.data.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
            let data = TrainData::load(build_index(&root)?, exec)?;
            cfg.model.num_modalities = data.index.num_modalities();
            let report = fit(&cfg, &data, &FitOptions { out_dir: out_dir.clone(), resume, exec })?;
            std::fs::write(out_dir.join("config.toml"), toml::to_string(&cfg)?)?;
            if let Some(last) = report.rows.last() {
                println!("{} steps, final loss {:.4}", last.step, last.loss.total);
            }
            for c in &report.checkpoints {
                println!("checkpoint {}", c.display());
            }
            println!("log {}", report.log_path.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data_root,
            nsd_tolerance,
            out,
            gt_as_pred,
        } => {
            let cases = load_cases(&data_root, exec)?;
            let items = if gt_as_pred {
                gt_items(&cases)?
            } else {
                let model = load_model(checkpoint.as_deref().expect("required by clap"))?;
                let refs: Vec<&CaseRecord> = cases.iter().collect();
                evaluate_cases(&model, &refs, exec)?.into_iter().map(|r| r.item).collect()
            };
            if items.is_empty() {
                bail!("no labelled instances under {}", data_root.display());
            }
            let table = score_items(exec, &items, nsd_tolerance)?;
            let agg = aggregate(&table)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            table.write_csv(&out.join("scores.csv"))?;
            std::fs::write(out.join("aggregate.json"), serde_json::to_string_pretty(&agg)?)?;
            for (m, s) in &agg.per_modality {
                println!("{m:<14} n={:<5} DSC {:.4} ± {:.4}  NSD {:.4} ± {:.4}", s.n, s.dsc.mean, s.dsc.std, s.nsd.mean, s.nsd.std);
            }
            let (d, n) = (&agg.overall["dsc"], &agg.overall["nsd"]);
            println!("{:<14} DSC {:.4} ± {:.4}  NSD {:.4} ± {:.4}", "overall", d.mean, d.std, n.mean, n.std);
            Ok(())
        }
        Command::Infer {
            checkpoint,
            data_root,
            boxes,
            out,
        } => {
            let model = load_model(&checkpoint)?;
            let file = boxes.as_deref().map(BoxesFile::read).transpose()?;
            let cases = load_cases(&data_root, exec)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut written = 0;
            for case in &cases {
                let slice_boxes = match &file {
                    Some(f) => match f.case_boxes(&case.case_id)? {
                        Some(b) => b,
                        None => continue,
                    },
                    None => {
                        let mut b = SliceBoxes::new();
                        for (z, _, bbox) in gt_boxes(case)? {
                            b.entry(z).or_default().push(bbox);
                        }
                        b
                    }
                };
                let segs = predict_case(&model, case, &slice_boxes, exec)?;
                write_prediction(&out.join(format!("{}.npz", case.case_id)), case, &segs)?;
                written += 1;
            }
            println!("wrote {written} predictions to {}", out.display());
            Ok(())
        }
        Command::Serve {
            checkpoint,
            data_root,
            port,
            host,
        } => {
            let state = promptseg_service::AppState::load(checkpoint.as_deref(), data_root.as_deref())?;
            if state.model().is_none() {
                log::warn!("no checkpoint given; /api/segment will answer 503");
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(promptseg_service::serve(state, SocketAddr::new(host, port)))?;
            Ok(())
        }
        Command::Report { scores_a, scores_b } => report(&scores_a, &scores_b),
    }
}

fn train_config(
    file: Option<&Path>,
    data_root: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(r) = data_root {
        cfg.data.root = Some(r);
    }
    if let Some(o) = out {
        cfg.data.out_dir = Some(o);
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.sampling.seed = s;
        cfg.train.seed = s;
    }
    let pairs = overrides::parse_pairs(overrides)?;
    let cfg = overrides::apply(&cfg, &pairs)?;
    cfg.model.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<SegModel> {
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    SegModel::load(path, candle_core::DType::F32).with_context(|| format!("loading {}", path.display()))
}

fn load_cases(root: &Path, exec: Execution) -> Result<Vec<CaseRecord>> {
    let index = build_index(root)?;
    let data = TrainData::load(index, exec)?;
    Ok(data.all_cases().cloned().collect())
}

fn gt_items(cases: &[CaseRecord]) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for case in cases {
        for (z, label, _) in gt_boxes(case)? {
            let gt = case.label_mask(z, label)?;
            items.push(EvalItem {
                case_id: case.case_id.clone(),
                modality: case.modality.name.clone(),
                pred: gt.clone(),
                gt,
            });
        }
    }
    Ok(items)
}

/// Pairs rows by position; both tables must list the same cases in the same
/// order.
fn report(a: &Path, b: &Path) -> Result<()> {
    let ta = ScoreTable::read_csv(a)?;
    let tb = ScoreTable::read_csv(b)?;
    if ta.rows.len() != tb.rows.len() {
        bail!("score tables have {} and {} rows", ta.rows.len(), tb.rows.len());
    }
    if let Some((i, (ra, rb))) = ta.rows.iter().zip(&tb.rows).enumerate().find(|(_, (ra, rb))| ra.case_id != rb.case_id) {
        bail!("row {}: case_id `{}` does not match `{}`", i + 1, ra.case_id, rb.case_id);
    }
    let metrics: [(&str, fn(&promptseg::metrics::ScoreRow) -> f64); 2] = [("dsc", |r| r.dsc), ("nsd", |r| r.nsd)];
    let mut summary = BTreeMap::new();
    for (name, get) in metrics {
        let xa: Vec<f64> = ta.rows.iter().map(get).collect();
        let xb: Vec<f64> = tb.rows.iter().map(get).collect();
        match wilcoxon_signed_rank(&xa, &xb) {
            Ok(w) => {
                println!(
                    "{name}: n={} W+={} W-={} p={} ({})",
                    w.n,
                    w.w_plus,
                    w.w_minus,
                    w.p_value,
                    if w.exact { "exact" } else { "normal approximation" }
                );
                summary.insert(name, serde_json::to_value(w)?);
            }
            Err(CoreError::InsufficientPairs(n)) => {
                println!("{name}: insufficient pairs ({n} non-zero differences, need at least 5)");
                summary.insert(name, serde_json::json!({"insufficient_pairs": n}));
            }
            Err(e) => return Err(e.into()),
        }
    }
    log::debug!("{}", serde_json::to_string(&summary)?);
    Ok(())
}
