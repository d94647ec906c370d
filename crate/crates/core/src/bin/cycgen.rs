//! Command-line entry point: dataset generation, semantic pretraining,
//! cycle training, evaluation, rendering, and condition extraction.
//!
//! Flags override `--config FILE` values, which override the `CYC_SEED`
//! environment fallback and the built-in defaults. Every command writes an
//! `effective_config.json` echo next to its artifacts. Exit codes: 0 on
//! success, 2 for flag/config validation problems, 1 for runtime failures,
//! each with a one-line `error: ...` message on stderr.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use cycgen::conditions::{extract_from_parts, ConditionKind};
use cycgen::config::RunConfig;
use cycgen::dataset::{build_dataset, Dataset, Split};
use cycgen::embed::{pretrain_contrastive, Encoders, PretrainConfig, TextPrompt};
use cycgen::generator::Generator;
use cycgen::metrics::{evaluate, ViewSetting};
use cycgen::params::ParamStore;
use cycgen::render::render;
use cycgen::t32::{read_ppm, read_t32, write_ppm, write_ppm_gray, write_t32};
use cycgen::tensor::Tensor;
use cycgen::trainer::{train, TrainConfig};
use cycgen::triplane::{PointDecoder, TriplaneField};

#[derive(Parser)]
#[command(name = "cycgen", version, about = "Cycle-consistent controllable triplane generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural multi-view dataset.
    GenData(GenDataArgs),
    /// Contrastively pretrain the text/image embedding pair, then freeze it.
    PretrainSemantic(PretrainArgs),
    /// Train the cycle-consistent generator.
    Train(TrainArgs),
    /// Evaluate a checkpoint's controllability metrics on the held-out split.
    Eval(EvalArgs),
    /// Render a novel view from a condition map and prompt.
    Render(RenderArgs),
    /// Extract a condition map from an image (edge/sketch) or depth map
    /// (depth/normal).
    Extract(ExtractArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes (default 72).
    #[arg(long)]
    scenes: Option<usize>,
    /// Ring sizes as A,B (default 8,4); top/bottom views are always added.
    #[arg(long)]
    views: Option<String>,
    /// Ground-truth resolution (default 64).
    #[arg(long)]
    res: Option<usize>,
    /// Dataset seed (default 7, or CYC_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Contrastive epochs (default 30).
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Pretraining seed (default 11).
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Frozen semantic checkpoint directory.
    #[arg(long)]
    semantic: PathBuf,
    /// Condition kind: edge|sketch|depth|normal.
    #[arg(long)]
    kind: Option<String>,
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Training steps (default 2000).
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate (default 4e-4).
    #[arg(long)]
    lr: Option<f32>,
    /// Semantic loss weight (default 5).
    #[arg(long)]
    alpha: Option<f32>,
    /// Condition-cycle weight (default 1).
    #[arg(long)]
    lambda: Option<f32>,
    /// 3D feedback weight (default 0.1).
    #[arg(long)]
    beta: Option<f32>,
    /// Identity-branch probability (default 0.25).
    #[arg(long)]
    p_identity: Option<f32>,
    /// Two-round backward with the cut at the re-extracted condition
    /// (default true).
    #[arg(long)]
    two_phase: Option<bool>,
    /// Detach the cycle at the re-extracted condition (ablation).
    #[arg(long)]
    detach_cycle: Option<bool>,
    /// Training seed (default 7, or CYC_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Frozen semantic checkpoint directory.
    #[arg(long)]
    semantic: PathBuf,
    /// View setting: all|front4 (default front4).
    #[arg(long)]
    views: Option<String>,
    /// Condition kinds to evaluate (default all four).
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
    /// Report output path (.json; .csv and .txt are written alongside).
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Model checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Frozen semantic checkpoint directory.
    #[arg(long)]
    semantic: PathBuf,
    /// Condition map (.t32; [h,w] scalar kinds, [h,w,3] normal).
    #[arg(long)]
    cond: PathBuf,
    /// Condition kind of the input map (default edge).
    #[arg(long, default_value = "edge")]
    kind: String,
    /// Text prompt.
    #[arg(long)]
    prompt: String,
    /// Grid view index to render.
    #[arg(long, default_value_t = 0)]
    view_index: usize,
    /// Output image (.ppm) or tensor (.t32).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    /// Condition kind: edge|sketch|depth|normal.
    #[arg(long)]
    kind: String,
    /// Input: image (.ppm or [h,w,3] .t32) for edge/sketch, depth map
    /// ([h,w] .t32) for depth/normal.
    #[arg(long)]
    image: PathBuf,
    /// Output map (.t32, or .ppm for a visualization).
    #[arg(long)]
    out: PathBuf,
    /// Focal length in pixels for depth→normal back-projection (default:
    /// matches the dataset camera at the input resolution).
    #[arg(long)]
    focal: Option<f32>,
}

enum CliError {
    /// Bad flags or config: exit code 2.
    Usage(String),
    /// Runtime failure: exit code 1.
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::PretrainSemantic(a) => pretrain(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Render(a) => run_render(a),
        Command::Extract(a) => run_extract(a),
    };
    match result {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, CliError> {
    let mut cfg = match &arg.config {
        Some(path) => RunConfig::from_file(path).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    cfg.apply_env_seed();
    Ok(cfg)
}

fn write_echo(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::runtime)?;
    std::fs::write(dir.join("effective_config.json"), cfg.echo()).map_err(CliError::runtime)
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    if let Some(n) = a.scenes {
        cfg.dataset.n_scenes = n;
    }
    if let Some(v) = &a.views {
        let parts: Vec<usize> = v
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("--views wants A,B, got '{v}'")))?;
        if parts.len() != 2 || parts[0] == 0 || parts[1] == 0 {
            return Err(CliError::Usage(format!("--views wants two positive ring sizes, got '{v}'")));
        }
        cfg.dataset.views = [parts[0], parts[1]];
    }
    if let Some(r) = a.res {
        cfg.dataset.res = r;
        cfg.model.cond_res = r;
        cfg.model.h_p = r / 4;
        cfg.model.w_p = r / 4;
    }
    if let Some(s) = a.seed {
        cfg.dataset.seed = Some(s);
    }
    if cfg.dataset.n_scenes == 0 {
        return Err(CliError::Usage("--scenes must be >= 1".into()));
    }
    cfg.validate().map_err(CliError::Usage)?;
    build_dataset(&cfg.dataset_config(), &a.out).map_err(CliError::runtime)?;
    write_echo(&cfg, &a.out)?;
    println!(
        "wrote {} scenes ({} views each) to {}",
        cfg.dataset.n_scenes,
        cfg.dataset.views[0] + cfg.dataset.views[1] + 2,
        a.out.display()
    );
    Ok(())
}

/// Per-scene pretraining pairs: the reference view plus two seeded extra
/// views, each paired with the scene caption.
fn pretrain_pairs(
    dataset: &Dataset,
    seed: u64,
) -> Result<Vec<(Tensor, TextPrompt)>, CliError> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let res = dataset.manifest.config.res;
    for i in dataset.indices(Split::Train) {
        let scene = dataset.load_scene(i).map_err(CliError::runtime)?;
        let prompt = TextPrompt::new(&scene.caption).map_err(CliError::runtime)?;
        let mut picks = vec![scene.reference_index];
        for _ in 0..2 {
            picks.push(rng.gen_range(0..scene.views.len()));
        }
        for v in picks {
            let img = Tensor::from_vec(scene.views[v].rgb.clone(), &[res, res, 3])
                .map_err(CliError::runtime)?;
            pairs.push((img, prompt.clone()));
        }
    }
    Ok(pairs)
}

fn pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let dataset = Dataset::open(&a.data).map_err(CliError::runtime)?;
    let pairs = pretrain_pairs(&dataset, a.seed ^ 0xBEEF)?;
    let pcfg = PretrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let (store, losses) = pretrain_contrastive(&pairs, &pcfg).map_err(CliError::runtime)?;
    store.save(&a.out, "semantic", a.epochs as u64).map_err(CliError::runtime)?;
    let mut log = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(a.out.join("pretrain_log.csv"), log).map_err(CliError::runtime)?;
    write_echo(&cfg, &a.out)?;
    println!(
        "pretrained semantic encoders on {} pairs ({} epochs) -> {}",
        pairs.len(),
        a.epochs,
        a.out.display()
    );
    Ok(())
}

fn parse_kind(s: &str) -> Result<ConditionKind, CliError> {
    ConditionKind::from_str(s).map_err(CliError::Usage)
}

fn run_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    if let Some(k) = &a.kind {
        cfg.train.kind = parse_kind(k)?;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.alpha {
        cfg.train.alpha = v;
    }
    if let Some(v) = a.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = a.beta {
        cfg.train.beta = v;
    }
    if let Some(v) = a.p_identity {
        cfg.train.p_identity = v;
    }
    if let Some(v) = a.two_phase {
        cfg.train.two_phase = v;
    }
    if let Some(v) = a.detach_cycle {
        cfg.train.detach_cycle = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = Some(v);
    }
    if cfg.train.steps == 0 {
        return Err(CliError::Usage("--steps must be >= 1".into()));
    }
    cfg.validate().map_err(CliError::Usage)?;

    let dataset = Dataset::open(&a.data).map_err(CliError::runtime)?;
    if dataset.manifest.config.res != cfg.dataset.res {
        let r = dataset.manifest.config.res;
        cfg.dataset.res = r;
        cfg.model.cond_res = r;
        cfg.model.h_p = r / 4;
        cfg.model.w_p = r / 4;
        cfg.validate().map_err(CliError::Usage)?;
    }
    let (semantic, _) = ParamStore::load(&a.semantic).map_err(CliError::runtime)?;
    let tcfg: TrainConfig = cfg.train_config();
    train(&dataset, &tcfg, &semantic, &a.out).map_err(CliError::runtime)?;
    write_echo(&cfg, &a.out)?;
    println!(
        "trained {} steps (kind {}) -> {}",
        tcfg.steps,
        tcfg.kind,
        a.out.display()
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = &a.views {
        cfg.eval.view_setting = ViewSetting::from_str(v).map_err(CliError::Usage)?;
    }
    if let Some(kinds) = &a.kinds {
        let mut parsed = Vec::new();
        for k in kinds {
            parsed.push(parse_kind(k)?);
        }
        cfg.eval.kinds = parsed;
    }
    let dataset = Dataset::open(&a.data).map_err(CliError::runtime)?;
    let r = dataset.manifest.config.res;
    cfg.dataset.res = r;
    cfg.model.cond_res = r;
    cfg.model.h_p = r / 4;
    cfg.model.w_p = r / 4;
    let (model, _) = ParamStore::load(&a.ckpt).map_err(CliError::runtime)?;
    let (semantic, _) = ParamStore::load(&a.semantic).map_err(CliError::runtime)?;
    let report = evaluate(
        &dataset,
        &model,
        &cfg.generator_config(),
        &semantic,
        &cfg.eval_config(),
    )
    .map_err(CliError::runtime)?;

    #[derive(serde::Serialize)]
    struct FullReport<'a> {
        effective_config: &'a RunConfig,
        metrics: &'a cycgen::metrics::MetricReport,
    }
    let full = FullReport {
        effective_config: &cfg,
        metrics: &report,
    };
    if let Some(dir) = a.report.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(CliError::runtime)?;
        }
    }
    std::fs::write(
        &a.report,
        serde_json::to_string_pretty(&full).expect("serializable"),
    )
    .map_err(CliError::runtime)?;
    std::fs::write(a.report.with_extension("csv"), report.to_csv()).map_err(CliError::runtime)?;
    std::fs::write(a.report.with_extension("txt"), report.to_table())
        .map_err(CliError::runtime)?;
    print!("{}", report.to_table());
    if !report.errors.is_empty() {
        for e in &report.errors {
            eprintln!("warning: {e}");
        }
    }
    Ok(())
}

fn run_render(a: RenderArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let kind = parse_kind(&a.kind)?;
    let (model, _) = ParamStore::load(&a.ckpt).map_err(CliError::runtime)?;
    let (semantic, _) = ParamStore::load(&a.semantic).map_err(CliError::runtime)?;
    let (data, shape) = read_t32(&a.cond).map_err(CliError::runtime)?;
    let expected_ch = kind.channels();
    let ok_shape = (expected_ch == 1 && shape.len() == 2)
        || (expected_ch == 3 && shape.len() == 3 && shape[2] == 3);
    if !ok_shape {
        return Err(CliError::Usage(format!(
            "condition map shape {shape:?} does not fit kind {kind}"
        )));
    }
    let cond = cycgen::conditions::ConditionMap {
        kind,
        data: Tensor::from_vec(data, &shape).map_err(CliError::runtime)?,
        mask: None,
    };
    let (h, _) = cond.resolution();
    let mut gcfg = cfg.generator_config();
    gcfg.cond_res = h;

    let grid = cycgen::dataset::DatasetConfig {
        views: cfg.dataset.views,
        res: cfg.dataset.res,
        ..cycgen::dataset::DatasetConfig::default()
    }
    .grid();
    if a.view_index >= grid.poses.len() {
        return Err(CliError::Usage(format!(
            "--view-index {} out of range (grid has {} views)",
            a.view_index,
            grid.poses.len()
        )));
    }
    let prompt = TextPrompt::new(&a.prompt).map_err(CliError::runtime)?;
    let enc = Encoders::frozen(&semantic);
    let text_emb = enc.encode_text(&prompt).map_err(CliError::runtime)?;
    let gen = Generator::frozen(&gcfg, &model);
    // The reference pose is the normalized frontal view of the grid.
    let ref_pose = &grid.poses[cfg.dataset.views[0]];
    let tp = gen
        .generate(&cond, &text_emb, ref_pose)
        .map_err(CliError::runtime)?;
    let dec = PointDecoder::from_store(&model);
    let field = TriplaneField {
        triplane: &tp,
        decoder: &dec,
    };
    let pose = &grid.poses[a.view_index];
    let out = render(
        &field,
        pose,
        &cycgen::render::RenderConfig {
            n_samples: cfg.eval.n_samples,
            ..Default::default()
        },
        None,
    )
    .map_err(CliError::runtime)?;
    write_image_artifact(&a.out, out.image.data(), pose.height, pose.width, 3)?;
    println!(
        "rendered view {} ({}x{}) -> {}",
        a.view_index,
        pose.width,
        pose.height,
        a.out.display()
    );
    Ok(())
}

fn run_extract(a: ExtractArgs) -> Result<(), CliError> {
    let kind = parse_kind(&a.kind)?;
    let is_ppm = a.image.extension().map_or(false, |e| e == "ppm");
    let (image, depth, mask, h, w) = match kind {
        ConditionKind::Edge | ConditionKind::Sketch => {
            let (rgb, h, w) = if is_ppm {
                read_ppm(&a.image).map_err(CliError::runtime)?
            } else {
                let (data, shape) = read_t32(&a.image).map_err(CliError::runtime)?;
                if shape.len() != 3 || shape[2] != 3 {
                    return Err(CliError::Usage(format!(
                        "expected an [h,w,3] image, got {shape:?}"
                    )));
                }
                (data, shape[0], shape[1])
            };
            let img = Tensor::from_vec(rgb, &[h, w, 3]).map_err(CliError::runtime)?;
            (img, Tensor::zeros(&[h, w]), vec![1.0; h * w], h, w)
        }
        ConditionKind::Depth | ConditionKind::Normal => {
            let (data, shape) = read_t32(&a.image).map_err(CliError::runtime)?;
            if shape.len() != 2 {
                return Err(CliError::Usage(format!(
                    "kind {kind} wants an [h,w] depth map, got {shape:?}"
                )));
            }
            let (h, w) = (shape[0], shape[1]);
            let far = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mask: Vec<f32> = data
                .iter()
                .map(|d| if *d < far - 1e-4 { 1.0 } else { 0.0 })
                .collect();
            let depth = Tensor::from_vec(data, &shape).map_err(CliError::runtime)?;
            (Tensor::zeros(&[h, w, 3]), depth, mask, h, w)
        }
    };
    let focal = a.focal.unwrap_or_else(|| {
        (h as f32 / 2.0) / (50.0f32.to_radians() / 2.0).tan()
    });
    let cond =
        extract_from_parts(kind, &image, &depth, &mask, focal).map_err(CliError::runtime)?;
    let ch = kind.channels();
    write_image_artifact(&a.out, cond.data.data(), h, w, ch)?;
    println!("extracted {kind} map ({h}x{w}) -> {}", a.out.display());
    Ok(())
}

/// Write float image data as .t32 or .ppm depending on the extension.
/// Normals are remapped from [-1,1] to [0,1] for visualization.
fn write_image_artifact(
    path: &Path,
    data: &[f32],
    h: usize,
    w: usize,
    ch: usize,
) -> Result<(), CliError> {
    let is_ppm = path.extension().map_or(false, |e| e == "ppm");
    if !is_ppm {
        let shape: Vec<usize> = if ch == 1 { vec![h, w] } else { vec![h, w, ch] };
        return write_t32(path, data, &shape).map_err(CliError::runtime);
    }
    match ch {
        1 => write_ppm_gray(path, data, h, w).map_err(CliError::runtime),
        3 => {
            let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
            let rgb: Vec<f32> = if lo < -1e-3 {
                data.iter().map(|v| (v + 1.0) / 2.0).collect()
            } else {
                data.to_vec()
            };
            write_ppm(path, &rgb, h, w).map_err(CliError::runtime)
        }
        _ => Err(CliError::Usage(format!("cannot write {ch}-channel ppm"))),
    }
}
