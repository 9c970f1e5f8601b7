use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use avts_core::data::{generate, load_dataset, load_manifest, resolve, write_corpus, write_manifest, FeatureSettings, ManifestRecord, Split};
use avts_core::eval::{sweep_snr, write_plot, EvalSettings, SweepGrid, SweepResult};
use avts_core::features::{audio_features, read_avtf, write_avtf, AvtfRecord};
use avts_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use avts_core::noise::NoiseCategory;
use avts_core::training::{self, av_pretrain, write_metrics, DistillMode, DistillPlan, Modality, PretrainConfig};
use avts_core::units::{kmeans, quantize, reduce, save_codebook, write_units};

use crate::config::RunConfig;
use crate::{Command, DistillArg, ModalityArg, Preset, RunArgs, UsageError};

pub const RUNS_ENV: &str = "AVTS_RUNS_DIR";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Av => Modality::Av,
            ModalityArg::A => Modality::A,
            ModalityArg::V => Modality::V,
        }
    }
}

impl From<DistillArg> for DistillMode {
    fn from(d: DistillArg) -> Self {
        match d {
            DistillArg::None => DistillMode::None,
            DistillArg::AvFull => DistillMode::AvFull,
            DistillArg::VDecoder => DistillMode::VDecoderOnly,
        }
    }
}

struct Run {
    dir: PathBuf,
    log: File,
}

impl Run {
    /// Creates `runs/<name>/`, echoes the effective config and starts the log.
    fn open(default_name: &str, args: &RunArgs, cfg: &RunConfig) -> Result<Run> {
        let root = std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        let name = args.name.as_deref().unwrap_or(default_name);
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(usage(format!("run name {name:?} must be a single path component")));
        }
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("config.txt"), cfg.echo()).with_context(|| format!("writing config to {}", dir.display()))?;
        let log = File::create(dir.join("log.txt")).with_context(|| format!("creating log in {}", dir.display()))?;
        Ok(Run { dir, log })
    }

    fn log(&mut self, msg: &str) -> Result<()> {
        eprintln!("{msg}");
        writeln!(self.log, "{msg}").context("writing log")
    }
}

/// Defaults, then command-specific defaults, then the config file, then `--set`.
fn build_config(args: &RunArgs, base: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    base(&mut cfg);
    if let Some(path) = &args.config {
        cfg.load_file(path)?;
    }
    for s in &args.set {
        cfg.set_assignment(s)?;
    }
    Ok(cfg)
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.tsv")
    } else {
        data.to_path_buf()
    }
}

fn load(data: &Path, cfg: &RunConfig, model: &ModelParams, keep_train_waveforms: bool) -> Result<avts_core::data::Dataset> {
    let settings = FeatureSettings {
        audio: avts_core::features::AudioFeatureConfig {
            n_mels: model.config.n_mels,
            hop_ms: cfg.hop_ms,
            stack: model.config.audio_stack,
        },
        keep_train_waveforms,
        ..FeatureSettings::default()
    };
    let m = manifest_path(data);
    load_dataset(&m, &settings).with_context(|| format!("loading {}", m.display()))
}

fn checkpoint(path: &Path) -> Result<ModelParams> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e: String| usage(e))
}

fn parse_list<T>(text: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| usage(format!("{what}: cannot parse {s:?}"))))
        .collect()
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { preset, seed, teacher, run } => gen_data(preset, seed, teacher, &run),
        Command::ExtractFeatures { data, run } => extract_features(&data, &run),
        Command::ClusterUnits { data, k, run } => cluster_units(&data, k, &run),
        Command::Pretrain { data, from, seed, run } => pretrain(&data, from.as_deref(), seed, &run),
        Command::Train { data, modality, distill, from, seed, run } => {
            let cfg = build_config(&run, |_| {})?;
            fit("train", cfg, &data, modality, distill, from.as_deref(), seed, &run)
        }
        Command::Teacher { data, seed, run } => teacher(&data, seed, &run),
        Command::DistillTrain { data, modality, from, distill, seed, run } => {
            let cfg = build_config(&run, |c| {
                c.model.audio_stack = 2;
                c.model.adaptor = true;
            })?;
            let distill = distill.unwrap_or(if modality == ModalityArg::V {
                DistillArg::VDecoder
            } else {
                DistillArg::AvFull
            });
            if distill == DistillArg::None {
                return Err(usage("distill-train needs a transfer plan; use train for fresh runs"));
            }
            fit("distill-train", cfg, &data, modality, distill, Some(&from), seed, &run)
        }
        Command::Eval { ckpt, data, modality, clean, category, snr, split, seed, run } => {
            let categories = match &category {
                Some(c) => vec![c.parse::<NoiseCategory>().map_err(|e| usage(e.to_string()))?],
                None => vec![],
            };
            let grid = SweepGrid {
                categories,
                snr_grid: snr.into_iter().collect(),
                modalities: vec![modality.into()],
                clean: clean || category.is_none(),
                seed: 0,
            };
            evaluate("eval", &ckpt, &data, grid, &split, seed, false, &run)
        }
        Command::Sweep { ckpt, data, snr_grid, categories, modalities, clean, plot, split, seed, run } => {
            let grid = SweepGrid {
                categories: parse_list(&categories, "--categories", |s| s.parse().ok())?,
                snr_grid: parse_list(&snr_grid, "--snr-grid", |s| s.parse::<f64>().ok().filter(|v| v.is_finite()))?,
                modalities: parse_list(&modalities, "--modalities", |s| s.parse().ok())?,
                clean,
                seed: 0,
            };
            if grid.modalities.is_empty() || grid.categories.is_empty() || grid.snr_grid.is_empty() {
                return Err(usage("sweep needs at least one category, SNR and modality"));
            }
            evaluate("sweep", &ckpt, &data, grid, &split, seed, plot, &run)
        }
        Command::Plot { csv, no_svg, run } => {
            let cfg = build_config(&run, |_| {})?;
            let text = std::fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let result = SweepResult::parse_csv(&text).with_context(|| format!("parsing {}", csv.display()))?;
            let mut r = Run::open("plot", &run, &cfg)?;
            let files = write_plot(&result, &r.dir, !no_svg)?;
            let names: Vec<_> = files.iter().filter_map(|f| f.file_name()).map(|n| n.to_string_lossy()).collect();
            r.log(&format!("wrote {}", names.join(", ")))
        }
    }
}

fn gen_data(preset: Option<Preset>, seed: Option<u64>, teacher: bool, args: &RunArgs) -> Result<()> {
    let mut cfg = build_config(args, |_| {})?;
    if let Some(p) = preset {
        let name = match p {
            Preset::Normal => "normal",
            Preset::Small => "small",
            Preset::Tiny => "tiny",
        };
        cfg.set("data.preset", name)?;
    }
    if let Some(s) = seed {
        cfg.set("data.seed", &s.to_string())?;
    }
    if teacher {
        cfg.set("data.teacher", "true")?;
    }
    let spec = cfg.corpus_spec()?;
    let mut run = Run::open("gen-data", args, &cfg)?;
    let corpus = generate(&spec)?;
    let manifest = write_corpus(&corpus, &run.dir)?;
    run.log(&format!(
        "{} utterances ({} train, {} valid, {} test, {}) -> {}",
        corpus.utterances.len(),
        spec.n_train,
        spec.n_valid,
        spec.n_test,
        spec.hours_tag,
        manifest.file_name().unwrap_or_default().to_string_lossy()
    ))
}

fn extract_features(data: &Path, args: &RunArgs) -> Result<()> {
    let cfg = build_config(args, |_| {})?;
    let manifest = manifest_path(data);
    let records = load_manifest(&manifest)?;
    let mut run = Run::open("extract-features", args, &cfg)?;
    let audio_cfg = cfg.audio_features();
    let copy = |rel: &str, dir: &Path, sub: &str, id: &str, ext: &str| -> Result<String> {
        let out = format!("{sub}/{id}.{ext}");
        std::fs::create_dir_all(dir.join(sub))?;
        let src = resolve(&manifest, rel);
        std::fs::copy(&src, dir.join(&out)).with_context(|| format!("copying {}", src.display()))?;
        Ok(out)
    };
    let mut out = Vec::with_capacity(records.len());
    for rec in &records {
        let src = resolve(&manifest, &rec.audio_path);
        let arec = read_avtf(&src)?;
        let audio_rel = format!("audio/{}.avtf", rec.id);
        let feats = if arec.cols == 1 {
            AvtfRecord::from_stream(&audio_features(&arec.to_waveform()?, &audio_cfg)?)
        } else {
            arec
        };
        write_avtf(&run.dir.join(&audio_rel), &feats)?;
        out.push(ManifestRecord {
            id: rec.id.clone(),
            audio_path: audio_rel,
            video_path: match &rec.video_path {
                Some(v) => Some(copy(v, &run.dir, "video", &rec.id, "avtf")?),
                None => None,
            },
            units_path: copy(&rec.units_path, &run.dir, "units", &rec.id, "units")?,
            split: rec.split,
        });
    }
    let path = run.dir.join("manifest.tsv");
    write_manifest(&out, &path)?;
    run.log(&format!(
        "{} utterances, {} mels x {} stacked at {} ms hop -> manifest.tsv",
        out.len(),
        audio_cfg.n_mels,
        audio_cfg.stack,
        audio_cfg.hop_ms,
    ))
}

fn cluster_units(data: &Path, k: Option<usize>, args: &RunArgs) -> Result<()> {
    let mut cfg = build_config(args, |_| {})?;
    if let Some(k) = k {
        cfg.units_k = k;
    }
    let settings = FeatureSettings {
        audio: cfg.audio_features(),
        keep_eval_waveforms: false,
        ..FeatureSettings::default()
    };
    let manifest = manifest_path(data);
    let ds = load_dataset(&manifest, &settings)?;
    let mut run = Run::open("cluster-units", args, &cfg)?;
    let points: Vec<Vec<f64>> = ds
        .split(Split::Train)
        .iter()
        .filter_map(|e| e.audio.as_ref())
        .flat_map(|a| (0..a.rows()).map(move |r| a.row(r).to_vec()))
        .collect();
    let cb = kmeans(&points, cfg.units_k, cfg.units_iters, cfg.units_seed)?;
    save_codebook(&run.dir.join("codebook.avtf"), &cb)?;
    for e in &ds.examples {
        let Some(a) = &e.audio else { continue };
        let mut units = quantize(a, &cb)?;
        if cfg.units_reduce {
            units = reduce(&units);
        }
        write_units(&run.dir.join("units").join(format!("{}.units", e.id)), &[units])?;
    }
    run.log(&format!(
        "k={} on {} frames, final inertia {:.6}",
        cb.k(),
        points.len(),
        cb.inertia.last().copied().unwrap_or(f64::NAN)
    ))
}

fn pretrain(data: &Path, from: Option<&Path>, seed: Option<u64>, args: &RunArgs) -> Result<()> {
    let mut cfg = build_config(args, |_| {})?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    let init = match from {
        Some(p) => checkpoint(p)?,
        None => ModelParams::init(&cfg.model, cfg.train.seed).map_err(|e| usage(e.to_string()))?,
    };
    let ds = load(data, &cfg, &init, false)?;
    let mut run = Run::open("pretrain", args, &cfg)?;
    let pc = PretrainConfig {
        train: cfg.train.clone(),
        ..cfg.pretrain.clone()
    };
    let out = av_pretrain(&init, &ds, &pc)?;
    save_checkpoint(&run.dir.join("pretrained.ckpt"), &out.params)?;
    save_codebook(&run.dir.join("codebook.avtf"), &out.codebook)?;
    write_metrics(&run.dir.join("metrics.csv"), &out.metrics)?;
    let last = out.metrics.last().map_or(f64::NAN, |m| m.train_ce);
    run.log(&format!("{} steps, final masked-prediction CE {last:.4}", out.metrics.len()))
}

#[allow(clippy::too_many_arguments)]
fn fit(
    default_name: &str,
    mut cfg: RunConfig,
    data: &Path,
    modality: ModalityArg,
    distill: DistillArg,
    from: Option<&Path>,
    seed: Option<u64>,
    args: &RunArgs,
) -> Result<()> {
    match (modality, distill, from) {
        (ModalityArg::V, DistillArg::AvFull, _) => {
            return Err(usage("--distill av_full copies the audio frontend and encoder; use v_decoder for --modality v"));
        }
        (ModalityArg::Av | ModalityArg::A, DistillArg::VDecoder, _) => {
            return Err(usage("--distill v_decoder is the visual-only plan; use it with --modality v"));
        }
        (_, DistillArg::AvFull | DistillArg::VDecoder, None) => {
            return Err(usage("--distill needs a source checkpoint given with --from"));
        }
        _ => {}
    }
    cfg.train.modality = modality.into();
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    let (init, plan) = match (distill, from) {
        (DistillArg::None, Some(p)) => (checkpoint(p)?, DistillPlan::none()),
        (DistillArg::None, None) => (fresh(&cfg)?, DistillPlan::none()),
        (d, Some(p)) => {
            if !p.is_file() {
                anyhow::bail!("checkpoint {} not found", p.display());
            }
            (fresh(&cfg)?, DistillPlan::new(d.into(), p))
        }
        (_, None) => unreachable!("rejected above"),
    };
    let ds = load(data, &cfg, &init, cfg.train.noise_prob > 0.0)?;
    let mut run = Run::open(default_name, args, &cfg)?;
    cfg.train.checkpoint_dir = Some(run.dir.clone());
    run.log(&format!("modality {}, distill {}", cfg.train.modality, plan.mode.name()))?;
    let out = training::train(&init, &ds, &cfg.train, &plan)?;
    run.log(&format!(
        "{} steps, best valid CE {} at step {}",
        out.metrics.len(),
        fmt_ce(out.best_valid_ce),
        out.best_step
    ))
}

fn fmt_ce(ce: Option<f64>) -> String {
    ce.map_or("n/a (no valid split)".into(), |v| format!("{v:.4}"))
}

fn fresh(cfg: &RunConfig) -> Result<ModelParams> {
    ModelParams::init(&cfg.model, cfg.train.seed).map_err(|e| usage(e.to_string()))
}

fn teacher(data: &Path, seed: Option<u64>, args: &RunArgs) -> Result<()> {
    let mut cfg = build_config(args, |c| c.model.audio_stack = 2)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.modality = Modality::A;
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    let init = fresh(&cfg)?;
    let ds = load(data, &cfg, &init, cfg.train.noise_prob > 0.0)?;
    let mut run = Run::open("teacher", args, &cfg)?;
    cfg.train.checkpoint_dir = Some(run.dir.clone());
    let out = training::train_audio_teacher(&init, &ds, &cfg.train)?;
    save_checkpoint(&run.dir.join("teacher.ckpt"), &out.params)?;
    run.log(&format!(
        "{} steps, best valid CE {} at step {} -> teacher.ckpt",
        out.metrics.len(),
        fmt_ce(out.best_valid_ce),
        out.best_step
    ))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    default_name: &str,
    ckpt: &Path,
    data: &Path,
    mut grid: SweepGrid,
    split: &str,
    seed: Option<u64>,
    plot: bool,
    args: &RunArgs,
) -> Result<()> {
    let mut cfg = build_config(args, |_| {})?;
    if let Some(s) = seed {
        cfg.eval_seed = s;
    }
    if cfg.beam == 0 {
        return Err(usage("eval.beam must be positive"));
    }
    grid.seed = cfg.eval_seed;
    let split = parse_split(split)?;
    let params = checkpoint(ckpt)?;
    let ds = load(data, &cfg, &params, false)?;
    let examples = ds.split(split);
    if examples.is_empty() {
        anyhow::bail!("the {} split of {} is empty", split.name(), data.display());
    }
    let mut run = Run::open(default_name, args, &cfg)?;
    let settings = EvalSettings {
        beam: cfg.beam,
        audio: ds.audio,
    };
    let result = sweep_snr(&params, &examples, &grid, &settings)?;
    let csv = run.dir.join(format!("{default_name}.csv"));
    result.write_csv(&csv)?;
    print!("{}", result.to_csv());
    if plot {
        write_plot(&result, &run.dir, true)?;
    }
    run.log(&format!("{} rows on {} utterances -> {default_name}.csv", result.rows.len(), examples.len()))
}
