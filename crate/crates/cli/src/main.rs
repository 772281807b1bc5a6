use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boxseg_core::decoder::{param_count, DecoderConfig};
use boxseg_core::eval::{self, BenchTagConfig, CoordMode, EvalOptions};
use boxseg_core::fusion::{self, FusionConfig, Grounder, StubGrounder};
use boxseg_core::geometry::{boxes_gate, BBox};
use boxseg_core::mask::pgm::GrayImage;
use boxseg_core::train::{train_loop, TrainConfig, TrainPaths};
use boxseg_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

/// Library error plus an exit status.
struct CliError {
    code: u8,
    message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_validation() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

#[derive(Parser)]
#[command(name = "boxseg", version, about = "Box-guided mask decoder, mask curation and evaluation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    Tiny,
    Micro,
}

impl Profile {
    fn config(self) -> DecoderConfig {
        match self {
            Profile::Default => DecoderConfig::default_profile(),
            Profile::Tiny => DecoderConfig::tiny(),
            Profile::Micro => DecoderConfig::micro(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the tiny decoder on the synthetic stream.
    TrainToy {
        /// Training config (JSON); defaults to the built-in toy run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "toy-run")]
        out: PathBuf,
        /// Continue from `OUT/checkpoint.bskp` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Score a prediction manifest against ground truth (JSON lines).
    Eval {
        #[arg(long)]
        pred_manifest: PathBuf,
        #[arg(long)]
        gt_manifest: PathBuf,
        /// Hungarian-match individual instances.
        #[arg(long)]
        multi: bool,
        /// Predicted boxes lie on a `0..N` grid rather than in pixels.
        #[arg(long, value_name = "N")]
        coord_grid: Option<u32>,
        /// OOD tag thresholds (JSON).
        #[arg(long)]
        tags_config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build curated entity masks from coarse masks and fragments.
    MergeMasks {
        #[arg(long)]
        manifest: PathBuf,
        /// Fusion config (JSON); defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run the grounding check on every surviving candidate.
        #[arg(long, requires = "grounder_fixtures")]
        verify: bool,
        /// Canned grounder responses (JSON) used by `--verify`.
        #[arg(long)]
        grounder_fixtures: Option<PathBuf>,
    },
    /// Extract instance records from model output text.
    ParseOutput {
        /// Input file; standard input when omitted.
        input: Option<PathBuf>,
        #[arg(long, value_name = "N", requires = "image_size")]
        coord_grid: Option<u32>,
        /// `WIDTHxHEIGHT`, used to convert grid coordinates to pixels.
        #[arg(long)]
        image_size: Option<String>,
    },
    /// Render the merged soft box gate as a PGM heatmap.
    GateViz {
        /// Normalized `x1,y1,x2,y2`; repeat for several boxes.
        #[arg(long = "box", required = true, value_delimiter = ';')]
        boxes: Vec<String>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        enlarge: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the number of trainable scalars of a decoder config.
    ParamCount {
        /// Decoder config (JSON).
        #[arg(long, conflicts_with = "profile")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "default")]
        profile: Profile,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("no such file: {}", path.display())))
    }
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_owned).unwrap_or_default()
}

fn parse_box(s: &str) -> Result<BBox, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage(format!("bad box {s:?}: {e}")))?;
    match v[..] {
        [x1, y1, x2, y2] => Ok(BBox::new(x1, y1, x2, y2)?),
        _ => Err(CliError::usage(format!("box {s:?} needs four numbers"))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_owned(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_owned(),
            source: e,
        }
        .into()
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainToy {
            config,
            steps,
            out,
            resume,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    require_file(&p)?;
                    read_json(&p)?
                }
                None => TrainConfig::toy(),
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let paths = TrainPaths {
                checkpoint: out.join("checkpoint.bskp"),
                metrics_log: out.join("metrics.jsonl"),
            };
            let outcome = train_loop(&cfg, &paths, resume)?;
            let summary = serde_json::json!({
                "last_step": outcome.last_step,
                "last_loss": outcome.last_loss,
                "last_eval": outcome.last_eval,
                "checkpoint": paths.checkpoint,
                "metrics_log": paths.metrics_log,
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("json values serialize"));
        }
        Command::Eval {
            pred_manifest,
            gt_manifest,
            multi,
            coord_grid,
            tags_config,
            report,
        } => {
            require_file(&pred_manifest)?;
            require_file(&gt_manifest)?;
            let tags: BenchTagConfig = match tags_config {
                Some(p) => {
                    require_file(&p)?;
                    read_json(&p)?
                }
                None => BenchTagConfig::default(),
            };
            let opts = EvalOptions {
                multi,
                coord_mode: coord_grid.map_or(CoordMode::Pixel, CoordMode::Grid),
                tags,
            };
            let preds = eval::load_jsonl(&pred_manifest)?;
            let gts = eval::load_jsonl(&gt_manifest)?;
            let r = eval::evaluate(&preds, &gts, &parent(&pred_manifest), &parent(&gt_manifest), &opts)?;
            let text = serde_json::to_string_pretty(&r).expect("report serializes");
            match report {
                Some(p) => write_text(&p, &(text + "\n"))?,
                None => println!("{text}"),
            }
        }
        Command::MergeMasks {
            manifest,
            config,
            out,
            verify,
            grounder_fixtures,
        } => {
            require_file(&manifest)?;
            let cfg: FusionConfig = match config {
                Some(p) => {
                    require_file(&p)?;
                    read_json(&p)?
                }
                None => FusionConfig::default(),
            };
            let records = fusion::load_manifest(&manifest)?;
            let stub = match (verify, grounder_fixtures) {
                (true, Some(p)) => {
                    require_file(&p)?;
                    Some(StubGrounder::load(&p)?)
                }
                _ => None,
            };
            let output = fusion::run_pipeline(
                &records,
                &parent(&manifest),
                &cfg,
                stub.as_ref().map(|g| g as &dyn Grounder),
            )?;
            output.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&output.audit).expect("audit serializes"));
        }
        Command::ParseOutput {
            input,
            coord_grid,
            image_size,
        } => {
            let text = match input {
                Some(p) => {
                    require_file(&p)?;
                    std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p, source: e })?
                }
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s).map_err(|e| Error::Io {
                        path: PathBuf::from("<stdin>"),
                        source: e,
                    })?;
                    s
                }
            };
            let records = eval::parse_model_output(&text)?;
            let size = match image_size {
                Some(s) => {
                    let (w, h) = s
                        .split_once('x')
                        .and_then(|(w, h)| Some((w.parse::<usize>().ok()?, h.parse::<usize>().ok()?)))
                        .ok_or_else(|| CliError::usage(format!("image size {s:?} is not WIDTHxHEIGHT")))?;
                    Some((w, h))
                }
                None => None,
            };
            let mode = coord_grid.map_or(CoordMode::Pixel, CoordMode::Grid);
            let items: Vec<serde_json::Value> = records
                .iter()
                .map(|r| {
                    let b = r.bbox_2d.map(|v| v as f64);
                    let px = size.map(|(w, h)| mode.to_pixels(b, w, h));
                    serde_json::json!({ "bbox_2d": r.bbox_2d, "label": r.label, "box_px": px })
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&items).expect("json values serialize"));
        }
        Command::GateViz {
            boxes,
            width,
            height,
            alpha,
            enlarge,
            out,
        } => {
            let defaults = DecoderConfig::default_profile();
            let boxes = boxes.iter().map(|s| parse_box(s)).collect::<Result<Vec<_>, _>>()?;
            let gate = boxes_gate(
                &boxes,
                height,
                width,
                alpha.unwrap_or(defaults.gate_alpha),
                enlarge.unwrap_or(defaults.enlarge_ratio),
            )?;
            let img = GrayImage::from_unit(width, height, gate.values.data())?;
            std::fs::write(&out, img.encode()).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            println!("{}", out.display());
        }
        Command::ParamCount { config, profile } => {
            let cfg = match config {
                Some(p) => {
                    require_file(&p)?;
                    read_json(&p)?
                }
                None => profile.config(),
            };
            cfg.validate()?;
            println!("{}", param_count(&cfg));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
