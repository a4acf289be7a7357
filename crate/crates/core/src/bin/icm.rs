//! Command-line surface: backbone pretraining, task training, rate-accuracy
//! sweeps, bit-exact compress/decompress, and plot emission.

use clap::{Parser, Subcommand};
use ndarray::{ArrayD, IxDyn};
use std::path::{Path, PathBuf};

use icm::backbone::{build_backbone, load_backbone, pretrain_backbone, save_backbone, BackboneConfig, PretextTaskConfig};
use icm::eval::{evaluate_pipeline, rd_points_from_csv, rd_points_to_csv, run_sweep, spearman, val_scenes, RDPoint};
use icm::nn::ParamStore;
use icm::pipeline::{Pipeline, PipelineConfig, TrainMode};
use icm::synth::generate_scene;
use icm::training::{train, TrainConfig};
use icm::{IcmError, Result};

#[derive(Parser)]
#[command(name = "icm", about = "Task-aware learned image coding for machine vision", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain a backbone on the synthetic pretext task and save it.
    Pretrain {
        /// Optional JSON config: {"backbone": {...}, "pretext": {...}}
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        steps: i64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "backbone.icmc")]
        out: PathBuf,
    },
    /// Train one pipeline from a JSON training config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained backbone checkpoint (required unless mode = scratch).
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Override the config's task.
        #[arg(long)]
        task: Option<String>,
        /// Override the config's lambda.
        #[arg(long)]
        lambda: Option<f64>,
        /// Override the config's mode.
        #[arg(long)]
        mode: Option<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Train one model per lambda and emit the rate-accuracy table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Comma-separated lambda grid.
        #[arg(long, default_value = "0.01,0.05,0.1,0.5,1.0")]
        lambdas: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Generate a synthetic scene image file.
    Scene {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        k_shapes: usize,
        #[arg(long, default_value = "scene.icmi")]
        out: PathBuf,
    },
    /// Compress an image file to a standalone bitstream.
    Compress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        lambda_index: u8,
        #[arg(long, default_value = "out.icmb")]
        out: PathBuf,
    },
    /// Decompress a bitstream to a prediction file.
    Decompress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "pred.icmp")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Render rate-accuracy curves and ablation charts from an RD CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| IcmError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| IcmError::Config(format!("bad config {}: {e}", path.display())))
}

// ---- raw image / prediction file formats -----------------------------------
// .icmi: "ICMI" | u16 H | u16 W | 3*H*W f64, all little-endian, (c, y, x) order
// .icmp: "ICMP" | u16 C | u16 H | u16 W | C*H*W f64

const IMAGE_MAGIC: &[u8; 4] = b"ICMI";
const PRED_MAGIC: &[u8; 4] = b"ICMP";

fn write_image(path: &Path, image: &ArrayD<f64>) -> Result<()> {
    let s = image.shape();
    let mut out = Vec::with_capacity(8 + image.len() * 8);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(s[1] as u16).to_le_bytes());
    out.extend_from_slice(&(s[2] as u16).to_le_bytes());
    for &v in image.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_image(path: &Path) -> Result<ArrayD<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != IMAGE_MAGIC {
        return Err(IcmError::Data(format!("{} is not an image file", path.display())));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let n = 3 * h * w;
    if bytes.len() != 8 + n * 8 {
        return Err(IcmError::Data("truncated image file".into()));
    }
    let vals: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&[3, h, w]), vals).unwrap())
}

fn write_pred(path: &Path, pred: &ArrayD<f64>) -> Result<()> {
    let s = pred.shape(); // (1, C, H, W)
    let mut out = Vec::with_capacity(10 + pred.len() * 8);
    out.extend_from_slice(PRED_MAGIC);
    out.extend_from_slice(&(s[1] as u16).to_le_bytes());
    out.extend_from_slice(&(s[2] as u16).to_le_bytes());
    out.extend_from_slice(&(s[3] as u16).to_le_bytes());
    for &v in pred.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---- checkpoint rehydration -------------------------------------------------

fn load_pipeline(ckpt: &Path, backbone: Option<&Path>) -> Result<(Pipeline, ParamStore, TrainConfig)> {
    icm::training::load_trained_pipeline(ckpt, backbone)
}

fn apply_overrides(
    cfg: &mut TrainConfig,
    task: Option<String>,
    lambda: Option<f64>,
    mode: Option<String>,
    seed: Option<u64>,
) -> Result<()> {
    if let Some(t) = task {
        let id = icm::task::TaskId::parse(&t)?;
        let mut p = PipelineConfig::dora(id).with_mode(cfg.pipeline.mode);
        p.backbone = cfg.pipeline.backbone.clone();
        p.backbone_seed = cfg.pipeline.backbone_seed;
        p.decoder = cfg.pipeline.decoder.clone();
        p.seed = cfg.pipeline.seed;
        if cfg.pipeline.mode == TrainMode::DoraFt {
            p.adapter = cfg.pipeline.adapter.clone().map(|mut a| {
                a.task = id.as_str().to_string();
                a
            });
        }
        cfg.pipeline = p;
    }
    if let Some(l) = lambda {
        cfg.lambda = l;
    }
    if let Some(m) = mode {
        let mode = TrainMode::parse(&m)?;
        cfg.pipeline = cfg.pipeline.clone().with_mode(mode);
        if mode == TrainMode::DoraFt && cfg.pipeline.adapter.is_none() {
            cfg.pipeline.adapter = Some(icm::adaptation::AdapterPlan::qkv(
                icm::adaptation::AdapterKind::Dora,
                8,
                cfg.pipeline.task.as_str(),
            ));
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.pipeline.seed = s;
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Pretrain { config, steps, seed, out } => {
            #[derive(serde::Deserialize, Default)]
            struct PretrainConfig {
                #[serde(default)]
                backbone: Option<BackboneConfig>,
                #[serde(default)]
                pretext: Option<PretextTaskConfig>,
            }
            let pcfg: PretrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => PretrainConfig::default(),
            };
            let (mut bb, mut store) = build_backbone(pcfg.backbone.unwrap_or_default(), seed)?;
            let report = pretrain_backbone(&mut bb, &mut store, &pcfg.pretext.unwrap_or_default(), steps, seed)?;
            bb.set_frozen(&mut store, true);
            save_backbone(&out, &bb, &store)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "steps": steps,
                    "val_accuracy_before": report.initial_val_accuracy,
                    "val_accuracy_after": report.final_val_accuracy,
                    "fingerprint": bb.pretrain_fingerprint,
                })
            );
            Ok(())
        }
        Cmd::Train { config, backbone, task, lambda, mode, seed, out } => {
            let mut cfg: TrainConfig = read_json(&config)?;
            apply_overrides(&mut cfg, task, lambda, mode, seed)?;
            cfg.validate()?;
            let pre = match &backbone {
                Some(p) => Some(load_backbone(p)?),
                None => None,
            };
            if cfg.pipeline.mode != TrainMode::Scratch && pre.is_none() {
                return Err(IcmError::Config(format!(
                    "mode {} needs --backbone <pretrained backbone file>",
                    cfg.pipeline.mode.as_str()
                )));
            }
            let pre_ref = pre.as_ref().map(|(b, s)| (b, s));
            let (pipe, mut store) = Pipeline::build(cfg.pipeline.clone(), pre_ref)?;
            let report = train(&pipe, &mut store, &cfg, &out)?;
            let scenes = val_scenes(&cfg)?;
            let summary = evaluate_pipeline(&pipe, &mut store, &scenes)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": report.ckpt_path,
                    "log": report.log_path,
                    "first_loss": report.first,
                    "last_loss": report.last,
                    "val": summary,
                })
            );
            Ok(())
        }
        Cmd::Sweep { config, backbone, lambdas, seed, out } => {
            let mut cfg: TrainConfig = read_json(&config)?;
            apply_overrides(&mut cfg, None, None, None, seed)?;
            cfg.validate()?;
            let grid: Vec<f64> = lambdas
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| IcmError::Config(format!("bad lambda '{s}'")))
                })
                .collect::<Result<_>>()?;
            let pre = match &backbone {
                Some(p) => Some(load_backbone(p)?),
                None => None,
            };
            if cfg.pipeline.mode != TrainMode::Scratch && pre.is_none() {
                return Err(IcmError::Config(format!(
                    "mode {} needs --backbone <pretrained backbone file>",
                    cfg.pipeline.mode.as_str()
                )));
            }
            let pre_ref = pre.as_ref().map(|(b, s)| (b, s));
            let outcome = run_sweep(&cfg, &grid, pre_ref, &out)?;
            let rho = outcome.spearman_lambda_bpp;
            println!(
                "{}",
                serde_json::json!({
                    "points": outcome.points,
                    "spearman_lambda_bpp": rho,
                    "rate_decreases_with_lambda": rho.map(|r| r < 0.0),
                    "csv": out.join("rd_points.csv"),
                })
            );
            Ok(())
        }
        Cmd::Scene { seed, height, width, k_shapes, out } => {
            let scene = generate_scene(seed, height, width, k_shapes)?;
            write_image(&out, &scene.image)?;
            println!("{}", serde_json::json!({"out": out, "h": height, "w": width, "seed": seed}));
            Ok(())
        }
        Cmd::Compress { ckpt, backbone, image, lambda_index, out } => {
            let (pipe, mut store, _) = load_pipeline(&ckpt, backbone.as_deref())?;
            let img = read_image(&image)?;
            let s = img.shape().to_vec();
            let batch = img.into_shape_with_order(IxDyn(&[1, 3, s[1], s[2]])).unwrap();
            let bytes = pipe.compress(&mut store, &batch, lambda_index)?;
            let bpp = ((bytes.len() - icm::codec::HEADER_LEN) * 8) as f64 / (s[1] * s[2]) as f64;
            std::fs::write(&out, &bytes)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "bytes": bytes.len(),
                    "payload_bpp": bpp,
                    "h": s[1],
                    "w": s[2],
                })
            );
            Ok(())
        }
        Cmd::Decompress { ckpt, backbone, input, out } => {
            let (pipe, store, _) = load_pipeline(&ckpt, backbone.as_deref())?;
            let bytes = std::fs::read(&input)?;
            let (pred, header, bpp) = pipe.decompress(&store, &bytes)?;
            write_pred(&out, &pred)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "task": header.task.as_str(),
                    "lambda_index": header.lambda_index,
                    "h": header.image_h,
                    "w": header.image_w,
                    "payload_bpp": bpp,
                })
            );
            Ok(())
        }
        Cmd::Eval { ckpt, backbone } => {
            let (pipe, mut store, cfg) = load_pipeline(&ckpt, backbone.as_deref())?;
            let scenes = val_scenes(&cfg)?;
            let summary = evaluate_pipeline(&pipe, &mut store, &scenes)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Cmd::Plot { csv, out } => {
            let text = std::fs::read_to_string(&csv)?;
            let points = rd_points_from_csv(&text)?;
            if points.is_empty() {
                return Err(IcmError::Data("RD CSV has no rows".into()));
            }
            std::fs::create_dir_all(&out)?;
            let files = plot::render(&points, &out)?;
            // re-emit the table next to the plots for provenance
            std::fs::write(out.join("rd_points.csv"), rd_points_to_csv(&points))?;
            let ls: Vec<f64> = points.iter().map(|p| p.lambda).collect();
            let bs: Vec<f64> = points.iter().map(|p| p.bpp_actual).collect();
            println!(
                "{}",
                serde_json::json!({"plots": files, "spearman_lambda_bpp": spearman(&ls, &bs).ok()})
            );
            Ok(())
        }
    }
}

mod plot {
    use super::*;
    use plotters::prelude::*;
    use std::collections::BTreeMap;

    const SERIES_COLORS: [RGBColor; 4] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
    ];

    fn mode_order(mode: &str) -> usize {
        ["full_ft", "dora_ft", "fixed", "scratch"]
            .iter()
            .position(|m| *m == mode)
            .unwrap_or(4)
    }

    fn display_name(mode: &str) -> String {
        TrainMode::parse(mode)
            .map(|m| m.display_name().to_string())
            .unwrap_or_else(|_| mode.to_string())
    }

    /// One RA curve per task (bpp on x, metric on y, one series per mode) and
    /// one ablation bar chart per task (metric by mode at the largest lambda).
    pub fn render(points: &[RDPoint], out_dir: &Path) -> Result<Vec<PathBuf>> {
        ensure_font()?;
        let mut by_task: BTreeMap<String, Vec<&RDPoint>> = BTreeMap::new();
        for p in points {
            by_task.entry(p.task.clone()).or_default().push(p);
        }
        let mut files = Vec::new();
        for (task, pts) in &by_task {
            files.push(ra_curve(task, pts, out_dir)?);
            if pts.iter().map(|p| p.mode.as_str()).collect::<std::collections::BTreeSet<_>>().len() > 1 {
                files.push(ablation_bars(task, pts, out_dir)?);
            }
        }
        Ok(files)
    }

    fn chart_err(e: impl std::fmt::Display) -> IcmError {
        IcmError::Data(format!("plotting failed: {e}"))
    }

    /// The bitmap backend has no built-in fonts; register a system TTF once.
    fn ensure_font() -> Result<()> {
        use std::sync::OnceLock;
        static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
        FONT.get_or_init(|| {
            let candidates = [
                "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
                "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
                "/usr/share/fonts/TTF/DejaVuSans.ttf",
                "/Library/Fonts/Arial Unicode.ttf",
            ];
            for path in candidates {
                if let Ok(bytes) = std::fs::read(path) {
                    let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                    if plotters::style::register_font(
                        "sans-serif",
                        plotters::style::FontStyle::Normal,
                        leaked,
                    )
                    .is_ok()
                    {
                        return Ok(());
                    }
                }
            }
            Err("no usable TTF font found for plot labels".into())
        })
        .clone()
        .map_err(IcmError::Data)
    }

    fn ra_curve(task: &str, pts: &[&RDPoint], out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(format!("{task}_ra.png"));
        let (xmin, xmax) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
            (lo.min(p.bpp_actual), hi.max(p.bpp_actual))
        });
        let (ymin, ymax) = pts.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
            (lo.min(p.metric), hi.max(p.metric))
        });
        let xpad = ((xmax - xmin) * 0.05).max(1e-6);
        let ypad = ((ymax - ymin) * 0.05).max(1e-6);

        {
        let root = BitMapBackend::new(&path, (800, 600)).into_drawing_area();
        root.fill(&WHITE).map_err(chart_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{task}: rate-accuracy"), ("sans-serif", 24))
            .margin(12)
            .x_label_area_size(44)
            .y_label_area_size(56)
            .build_cartesian_2d(xmin - xpad..xmax + xpad, ymin - ypad..ymax + ypad)
            .map_err(chart_err)?;
        chart
            .configure_mesh()
            .x_desc("bits per pixel")
            .y_desc(pts[0].metric_label())
            .draw()
            .map_err(chart_err)?;

        let mut modes: Vec<String> = pts
            .iter()
            .map(|p| p.mode.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        modes.sort_by_key(|m| mode_order(m));
        for (mi, mode) in modes.iter().enumerate() {
            // average over seeds at each lambda, then order by bpp
            let mut by_lambda: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
            for p in pts.iter().filter(|p| &p.mode == mode) {
                let e = by_lambda.entry(p.lambda.to_bits()).or_insert((0.0, 0.0, 0));
                e.0 += p.bpp_actual;
                e.1 += p.metric;
                e.2 += 1;
            }
            let mut series: Vec<(f64, f64)> = by_lambda
                .values()
                .map(|&(b, m, n)| (b / n as f64, m / n as f64))
                .collect();
            series.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let color = SERIES_COLORS[mi % SERIES_COLORS.len()];
            chart
                .draw_series(LineSeries::new(series.iter().copied(), color.stroke_width(2)))
                .map_err(chart_err)?
                .label(display_name(mode))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            chart
                .draw_series(series.iter().map(|&(x, y)| Circle::new((x, y), 4, color.filled())))
                .map_err(chart_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.9))
            .border_style(BLACK)
            .draw()
            .map_err(chart_err)?;
        root.present().map_err(chart_err)?;
        }
        Ok(path)
    }

    fn ablation_bars(task: &str, pts: &[&RDPoint], out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(format!("{task}_ablation.png"));
        let lam_max = pts.iter().map(|p| p.lambda).fold(f64::MIN, f64::max);
        let mut bars: Vec<(String, f64)> = Vec::new();
        let mut modes: Vec<String> = pts
            .iter()
            .map(|p| p.mode.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        modes.sort_by_key(|m| mode_order(m));
        for mode in &modes {
            let vals: Vec<f64> = pts
                .iter()
                .filter(|p| &p.mode == mode && p.lambda == lam_max)
                .map(|p| p.metric)
                .collect();
            if !vals.is_empty() {
                bars.push((display_name(mode), vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        let ymax = bars.iter().map(|b| b.1).fold(f64::MIN, f64::max).max(1e-6);

        {
        let root = BitMapBackend::new(&path, (800, 600)).into_drawing_area();
        root.fill(&WHITE).map_err(chart_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(
                format!("{task}: backbone ablation at lambda = {lam_max}"),
                ("sans-serif", 24),
            )
            .margin(12)
            .x_label_area_size(44)
            .y_label_area_size(56)
            .build_cartesian_2d((0..bars.len() - 1).into_segmented(), 0f64..ymax * 1.15)
            .map_err(chart_err)?;
        let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_label_formatter(&|x| match x {
                SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
                _ => String::new(),
            })
            .y_desc(pts[0].metric_label())
            .draw()
            .map_err(chart_err)?;
        for (i, (_, v)) in bars.iter().enumerate() {
            let color = SERIES_COLORS[i % SERIES_COLORS.len()];
            let mut bar = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), *v)],
                color.filled(),
            );
            bar.set_margin(0, 0, 18, 18);
            chart.draw_series(std::iter::once(bar)).map_err(chart_err)?;
        }
        root.present().map_err(chart_err)?;
        }
        Ok(path)
    }

    trait MetricLabel {
        fn metric_label(&self) -> &'static str;
    }
    impl MetricLabel for RDPoint {
        fn metric_label(&self) -> &'static str {
            match self.task.as_str() {
                "semseg" => "mIoU",
                "depth" => "RMSE",
                "normal" => "mean angular error (deg)",
                "boundary" => "ODS F-measure",
                "saliency" => "max F-measure",
                _ => "metric",
            }
        }
    }
}
