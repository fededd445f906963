use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use comrp_core::clustering::agglomerative::Linkage;
use comrp_core::clustering::spectral::{Affinity, Sigma};
use comrp_core::clustering::{self, ClusterConfig, ClusterMethod, ClusterModel};
use comrp_core::features::{self, baseline_features, FeaturePack, BASELINE_CROP, BASELINE_TAG};
use comrp_core::labeling::{read_merge_map, write_merge_map};
use comrp_core::masks::{self, crop_region, load_manifest};
use comrp_core::metrics::evaluate_dirs;
use comrp_core::pipeline::{encode_png_rgb, extract_baseline, rasterize_all, write_labels, Dataset};
use comrp_core::selftrain::{self, toy, CommandBackend, LoopConfig};
use comrp_core::synth::{self, MaskNoise, SynthConfig};
use comrp_core::tiling::{cut_tiles, denormalize_box, plan_tiles, DetectionsFile, TilePlan};
use comrp_core::MergeMap;
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "comrp", version, about = "Pseudo-label generation from mask proposals and region clustering")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "COMRP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect, filter and summarize mask proposals.
    #[command(subcommand)]
    Masks(MasksCmd),
    /// Cut road regions into fixed-size tiles.
    Tile(TileArgs),
    /// Region crops and feature packs.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Cluster a feature pack.
    Cluster(ClusterArgs),
    /// Create merge maps.
    #[command(subcommand)]
    Merge(MergeCmd),
    /// Turn masks, clusters and a merge map into label PNGs.
    Rasterize(RasterizeArgs),
    /// Score label PNGs against ground truth.
    Eval(EvalArgs),
    /// Run the self-training loop.
    Loop(LoopArgs),
    /// Serve the review API (and UI bundle).
    Serve(ServeArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Built-in toy segmenter used by the self-training loop.
    #[command(subcommand)]
    Toy(ToyCmd),
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    masks: PathBuf,
}

#[derive(Subcommand)]
enum MasksCmd {
    Validate {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep masks with area strictly above theta.
    Filter {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value_t = masks::DEFAULT_AREA_THRESHOLD)]
        theta: u32,
        /// Output mask directory.
        #[arg(long)]
        out: PathBuf,
    },
    Coverage {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value_t = masks::DEFAULT_AREA_THRESHOLD)]
        theta: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TileArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of `{image_id}.json` detection files.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long, default_value_t = 800)]
    tile_size: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum FeaturesCmd {
    /// Write a 224x224 crop per mask as `{mask_id}.png`.
    Crop {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value_t = BASELINE_CROP)]
        size: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline descriptors from a crop directory, or straight from masks.
    ExtractBaseline {
        #[arg(long, conflicts_with_all = ["manifest", "masks"])]
        crops: Option<PathBuf>,
        #[arg(long, requires = "masks")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Validate { pack: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum AffinityArg {
    RbfDense,
    KnnGraph,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkageArg {
    Average,
    Ward,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "spectral")]
    method: ClusterMethod,
    #[arg(long, default_value_t = clustering::DEFAULT_K)]
    k: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AffinityArg::RbfDense)]
    affinity: AffinityArg,
    /// Fixed RBF bandwidth; default is the median pairwise distance.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 10)]
    knn: u32,
    #[arg(long, default_value_t = 10)]
    restarts: u32,
    #[arg(long, value_enum, default_value_t = LinkageArg::Average)]
    linkage: LinkageArg,
    #[arg(long, default_value_t = 300)]
    max_iter: u32,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 8000)]
    max_exact_n: u32,
    #[arg(long)]
    l2_normalize: bool,
    #[arg(long, default_value_t = clustering::DEFAULT_EXEMPLARS as u32)]
    exemplars: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum MergeCmd {
    /// Every cluster mapped to DISCARD.
    Init {
        #[arg(long)]
        model: PathBuf,
        /// JSON list of class names.
        #[arg(long)]
        classes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Majority true class per cluster, from a `mask_id -> class` file.
    Oracle {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mask_classes: PathBuf,
        /// Clusters whose majority share is below this are discarded.
        #[arg(long, default_value_t = 1.0)]
        min_purity: f64,
        #[arg(long)]
        classes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RasterizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    merge: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LoopArgs {
    #[arg(long)]
    config: PathBuf,
    /// Iteration-0 labels.
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    merge: PathBuf,
    /// Class names for a fresh merge map when `--merge` does not exist yet.
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    ui: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8787)]
    port: u16,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    split_prob: Option<f64>,
    #[arg(long)]
    dilate_px: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ToyCmd {
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Accepted for the trainer command contract; label paths come from the manifest.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; the model is written to `model.json` inside it.
        #[arg(long)]
        out: PathBuf,
    },
    Predict {
        /// Model file, or a directory holding `model.json`.
        #[arg(long)]
        model: PathBuf,
        /// Image manifest.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Print JSON to stdout, and to `out` when given.
fn emit<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    if let Some(path) = out {
        write_json(path, value)?;
    }
    Ok(())
}

fn masks_cmd(cmd: MasksCmd) -> Result<()> {
    match cmd {
        MasksCmd::Validate { data, out } => {
            let images = load_manifest(&data.manifest)?;
            let all = masks::load_mask_dir(&data.masks, &images)?;
            let report = masks::validate_all(&images, &all);
            emit(&report, out.as_deref())?;
            if !report.is_ok() {
                bail!("{} invalid masks", report.errors.len());
            }
        }
        MasksCmd::Filter { data, theta, out } => {
            let images = load_manifest(&data.manifest)?;
            let all = masks::load_mask_dir(&data.masks, &images)?;
            let (kept, dropped) = masks::filter_by_area(all, theta);
            masks::write_mask_dir(&out, &images, &kept)?;
            eprintln!("kept {} masks, dropped {} with area <= {theta}", kept.len(), dropped.len());
        }
        MasksCmd::Coverage { data, theta, out } => {
            let images = load_manifest(&data.manifest)?;
            let all = masks::load_mask_dir(&data.masks, &images)?;
            emit(&masks::compute_coverage(&images, &all, theta)?, out.as_deref())?;
        }
    }
    Ok(())
}

fn tile(args: TileArgs) -> Result<()> {
    let images = load_manifest(&args.manifest)?;
    std::fs::create_dir_all(&args.out)?;
    let plans: Vec<Vec<TilePlan>> = images
        .par_iter()
        .map(|img| -> Result<Vec<TilePlan>> {
            let path = args.detections.join(format!("{}.json", img.image_id));
            if !path.exists() {
                return Ok(Vec::new());
            }
            let file: DetectionsFile = read_json(&path)?;
            let kept: Vec<_> = file.detections.iter().filter(|d| d.keep).collect();
            if kept.is_empty() {
                return Ok(Vec::new());
            }
            let rgb = img.load_rgb()?;
            let mut plans = Vec::new();
            let mut written = std::collections::BTreeSet::new();
            for det in kept {
                let pixel_box = denormalize_box(det.bbox, img.width, img.height, file.resize_long_side)
                    .with_context(|| format!("{}: detection {:?}", img.image_id, det.bbox))?;
                let mut plan = plan_tiles(&img.image_id, pixel_box, args.tile_size, img.width, img.height)?;
                plan.resize_long_side = file.resize_long_side;
                for (id, raster) in cut_tiles(&rgb, &plan)? {
                    // overlapping detections can share tiles
                    if written.insert(id.clone()) {
                        std::fs::write(args.out.join(format!("{id}.png")), encode_png_rgb(&raster)?)?;
                    }
                }
                plans.push(plan);
            }
            Ok(plans)
        })
        .collect::<Result<_>>()?;
    let plans: Vec<TilePlan> = plans.into_iter().flatten().collect();
    let count: usize = plans.iter().map(|p| p.tiles.len()).sum();
    write_json(&args.out.join("plans.json"), &plans)?;
    eprintln!("{} plans, {count} tiles", plans.len());
    Ok(())
}

fn features_cmd(cmd: FeaturesCmd) -> Result<()> {
    match cmd {
        FeaturesCmd::Crop { data, size, out } => {
            let data = Dataset::load(&data.manifest, &data.masks)?;
            std::fs::create_dir_all(&out)?;
            let by_image = data.masks_by_image();
            data.images.par_iter().try_for_each(|img| -> Result<()> {
                let Some(masks) = by_image.get(img.image_id.as_str()) else {
                    return Ok(());
                };
                let rgb = img.load_rgb()?;
                for m in masks {
                    let crop = crop_region(&rgb, m, size)?;
                    std::fs::write(out.join(format!("{}.png", m.mask_id)), encode_png_rgb(&crop)?)?;
                }
                Ok(())
            })?;
            eprintln!("{} crops", data.masks.len());
        }
        FeaturesCmd::ExtractBaseline {
            crops,
            manifest,
            masks,
            out,
        } => {
            let pack = match (crops, manifest, masks) {
                (Some(dir), _, _) => pack_from_crops(&dir)?,
                (None, Some(manifest), Some(masks)) => extract_baseline(&Dataset::load(&manifest, &masks)?)?,
                _ => bail!("give --crops, or --manifest with --masks"),
            };
            features::write_pack(&pack, &out)?;
            eprintln!("{} regions x {} dims", pack.count(), pack.dim);
        }
        FeaturesCmd::Validate { pack } => {
            let p = features::read_pack(&pack)?;
            println!(
                "{}",
                serde_json::json!({
                    "version": p.version,
                    "dim": p.dim,
                    "count": p.count(),
                    "source_tag": p.source_tag,
                })
            );
        }
    }
    Ok(())
}

fn pack_from_crops(dir: &Path) -> Result<FeaturePack> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "png"));
    files.sort();
    let rows: Vec<(String, Vec<f32>)> = files
        .par_iter()
        .map(|p| -> Result<_> {
            let id = p.file_stem().and_then(|s| s.to_str()).context("bad file name")?.to_string();
            let img = image_rgb(p)?;
            Ok((id, baseline_features(&img).with_context(|| p.display().to_string())?))
        })
        .collect::<Result<_>>()?;
    let (ids, rows): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(FeaturePack::from_rows(ids, &rows, BASELINE_TAG)?)
}

fn image_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8())
}

fn cluster(args: ClusterArgs) -> Result<()> {
    let pack = features::read_pack(&args.features)?;
    let mut cfg = ClusterConfig {
        method: args.method,
        k: args.k,
        seed: args.seed,
        agglo_linkage: match args.linkage {
            LinkageArg::Average => Linkage::Average,
            LinkageArg::Ward => Linkage::Ward,
        },
        max_iter: args.max_iter,
        tol: args.tol,
        max_exact_n: args.max_exact_n,
        l2_normalize: args.l2_normalize,
        exemplars: args.exemplars,
        ..Default::default()
    };
    cfg.spectral.affinity = match args.affinity {
        AffinityArg::RbfDense => Affinity::RbfDense,
        AffinityArg::KnnGraph => Affinity::KnnGraph,
    };
    cfg.spectral.sigma = args.sigma.map_or(Sigma::MedianHeuristic, Sigma::Fixed);
    cfg.spectral.knn = args.knn;
    cfg.spectral.restarts = args.restarts;
    let model = clustering::cluster(&pack, &cfg)?;
    write_json(&args.out, &model)?;
    eprintln!(
        "{} regions in {} clusters, inertia {:.6}",
        model.assignments.len(),
        model.n_clusters(),
        model.inertia
    );
    Ok(())
}

fn merge_cmd(cmd: MergeCmd) -> Result<()> {
    let (merge, out) = match cmd {
        MergeCmd::Init { model, classes, out } => {
            let model: ClusterModel = read_json(&model)?;
            let mut m = MergeMap::discard_all(&model, read_json(&classes)?);
            m.created_by = "comrp merge init".into();
            m.created_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
            (m, out)
        }
        MergeCmd::Oracle {
            model,
            mask_classes,
            min_purity,
            classes,
            out,
        } => {
            let model: ClusterModel = read_json(&model)?;
            let truth: BTreeMap<String, u8> = read_json(&mask_classes)?;
            (synth::oracle_merge(&model, &truth, read_json(&classes)?, min_purity), out)
        }
    };
    write_merge_map(&merge, &out)?;
    Ok(())
}

fn rasterize(args: RasterizeArgs) -> Result<()> {
    let model: ClusterModel = read_json(&args.model)?;
    let merge = read_merge_map(&args.merge)?;
    let data = Dataset::load(&args.manifest, &args.masks)?;
    let labels = rasterize_all(&data, &model, &merge)?;
    write_labels(&args.out, &labels)?;
    eprintln!("{} label maps", labels.len());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let classes: Vec<String> = read_json(&args.classes)?;
    let conf = evaluate_dirs(&args.gt, &args.pred, classes.len() as u32)?;
    emit(&conf.report()?, args.out.as_deref())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn run_loop(args: LoopArgs) -> Result<()> {
    let mut cfg: LoopConfig = read_json(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    resolve(base, &mut cfg.workdir);
    resolve(base, &mut cfg.manifest);
    if let Some(gt) = cfg.dev_gt_dir.as_mut() {
        resolve(base, gt);
    }
    let cfg = cfg.with_env_overrides();
    let backend = CommandBackend::from_config(&cfg);
    let outcome = selftrain::run_loop(&cfg, &backend, &args.labels)?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let classes = match &args.classes {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let state = comrp_server::AppState::load(&comrp_server::SessionConfig {
        model: args.model,
        manifest: args.manifest,
        masks: args.masks,
        merge: args.merge,
        classes,
        gt: args.gt,
    })?;
    let app = comrp_server::router(Arc::new(state), args.ui.as_deref());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
        log::info!("listening on {}", listener.local_addr()?);
        eprintln!("listening on http://{}", listener.local_addr()?);
        comrp_server::serve(listener, app).await?;
        Ok(())
    })
}

fn synth_cmd(args: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.n {
        cfg.n_images = v;
    }
    if let Some(v) = args.size {
        cfg.image_size = v;
    }
    cfg.mask_noise = MaskNoise {
        split_prob: args.split_prob.unwrap_or(cfg.mask_noise.split_prob),
        dilate_px: args.dilate_px.unwrap_or(cfg.mask_noise.dilate_px),
    };
    let ds = synth::generate(&cfg)?;
    ds.write(&args.out)?;
    eprintln!(
        "{} images, {} objects, {} masks",
        ds.images.len(),
        ds.object_count(),
        ds.images.iter().map(|i| i.masks.len()).sum::<usize>()
    );
    Ok(())
}

fn toy_cmd(cmd: ToyCmd) -> Result<()> {
    match cmd {
        ToyCmd::Train { manifest, seed, out, .. } => {
            let params = toy::ToyParams {
                seed,
                ..Default::default()
            };
            let model = toy::train(&manifest, &params)?;
            write_json(&out.join("model.json"), &model)?;
        }
        ToyCmd::Predict { model, images, out } => {
            let path = if model.is_dir() { model.join("model.json") } else { model };
            let model: toy::ToyModel = read_json(&path)?;
            toy::predict_manifest(&model, &images, &out)?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Masks(c) => masks_cmd(c),
        Command::Tile(a) => tile(a),
        Command::Features(c) => features_cmd(c),
        Command::Cluster(a) => cluster(a),
        Command::Merge(c) => merge_cmd(c),
        Command::Rasterize(a) => rasterize(a),
        Command::Eval(a) => eval(a),
        Command::Loop(a) => run_loop(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Toy(c) => toy_cmd(c),
    }
}
