use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use shiftkit::filtering::{InspectionRequest, InspectionVerdict};

use crate::backend::BackendChoice;
use crate::error::{Result, ServiceError};
use crate::pipeline::{
    self, no_progress, CalibrateClassParams, CalibrateShiftParams, CalibrationRun, Context, EvaluateParams,
    FilterParams, GenerateParams, LearnParams, ModelSource, PredictionFiles, ScoreParams, ToyDatasetParams,
};
use crate::workspace::{Workspace, WORKSPACE_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "shiftkit",
    version,
    about = "Counterfactual shift datasets: learn class tokens, generate, filter, evaluate"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Workspace root holding every artifact.
    #[arg(long, global = true, env = WORKSPACE_ENV, default_value = "shiftkit-workspace")]
    pub workspace: PathBuf,
    /// `toy` or `adapter:http://host:port`.
    #[arg(long, global = true, default_value = "toy")]
    pub backend: String,
    /// Registry file to read instead of the workspace's latest version.
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    /// Default seed for commands that take one.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a toy image dataset with train/ and val/ splits.
    MakeToyDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 6)]
        train_per_class: u64,
        #[arg(long, default_value_t = 20)]
        val_per_class: u64,
    },
    /// Learn one token per class from `<id>_<label>/` image directories.
    LearnTokens {
        #[arg(long)]
        dataset_root: PathBuf,
        /// Comma-separated class ids or labels; all classes when omitted.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long, default_value_t = 3000)]
        steps: u64,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long)]
        init_word: Option<String>,
        #[arg(long)]
        token_slug: Option<String>,
        /// RFC 3339 timestamp recorded as every token's creation time.
        #[arg(long)]
        created_at: Option<DateTime<Utc>>,
        #[arg(long)]
        fail_fast: bool,
        /// Write the library here instead of a new workspace version.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate candidates for one class under one shift.
    Generate {
        /// Token library directory to use instead of the workspace's latest.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        class: u32,
        #[arg(long)]
        shift: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score generated samples of a shift against their captions.
    Score {
        #[arg(long)]
        shift: String,
        #[arg(long)]
        class: Option<u32>,
    },
    /// Derive per-class object thresholds from held-out real images.
    CalibrateClass {
        #[arg(long)]
        dataset_root: PathBuf,
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long, default_value_t = 20.0)]
        percentile: f64,
    },
    /// Walk the percentile grid for a shift threshold.
    CalibrateShift {
        #[arg(long)]
        shift: String,
        /// Comma-separated ascending percentiles.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        /// Samples shown per percentile.
        #[arg(long)]
        k: Option<usize>,
        /// Scripted verdicts: accept every percentile at or above this value.
        #[arg(long)]
        accept_from: Option<f64>,
        #[arg(long)]
        inspector_id: Option<String>,
    },
    /// Keep samples passing both similarity thresholds.
    Filter {
        #[arg(long)]
        shift: String,
        #[arg(long)]
        class_thresholds: Option<PathBuf>,
    },
    /// Evaluate classifiers on the kept shift and base samples.
    Evaluate {
        #[arg(long)]
        shift: String,
        /// Run the toy classifier sweep with this many models.
        #[arg(long, conflicts_with = "predictions")]
        toy_models: Option<usize>,
        /// `predictions.csv:manifest.json` pairs, repeatable.
        #[arg(long)]
        predictions: Vec<String>,
        #[arg(long, default_value_t = shiftkit::evaluation::DEFAULT_MIN_COUNT)]
        min_count: usize,
    },
    /// Rebuild per-shift reports from the latest evaluations.
    Report,
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn json<T: serde::Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v).map_err(shiftkit::Error::from)?)
}

fn context(g: &GlobalArgs) -> Result<Context> {
    let backend: BackendChoice = g.backend.parse()?;
    let mut ctx = Context::new(Workspace::open(&g.workspace)?, backend)?;
    ctx.registry_override = g.registry.clone();
    Ok(ctx)
}

/// Asks on the terminal whether every offered sample shows the shift.
fn ask(request: &InspectionRequest, ctx: &Context, inspector_id: &str) -> Result<InspectionVerdict> {
    let mut err = std::io::stderr();
    let _ = writeln!(
        err,
        "{} at the {}th percentile (similarity {:.4}):",
        request.shift_name, request.percentile, request.score
    );
    for id in &request.sample_ids {
        let _ = writeln!(err, "  {}", ctx.ws.samples().root().join(format!("{id}.png")).display());
    }
    let stdin = std::io::stdin();
    loop {
        let _ = write!(err, "Do all of these show the shift? [y/n] ");
        let _ = err.flush();
        let mut line = String::new();
        if stdin
            .lock()
            .read_line(&mut line)
            .map_err(|e| ServiceError::io("<stdin>", e))?
            == 0
        {
            return Err(ServiceError::Conflict("stdin closed before a verdict".into()));
        }
        let answer = match line.trim() {
            "y" | "Y" | "yes" => true,
            "n" | "N" | "no" => false,
            _ => continue,
        };
        return Ok(InspectionVerdict {
            percentile: request.percentile,
            sample_ids: request.sample_ids.clone(),
            all_exhibit_shift: answer,
            inspector_id: inspector_id.to_string(),
        });
    }
}

/// Executes a command and returns its JSON outcome. `serve` blocks.
pub fn run(cli: Cli) -> Result<Value> {
    let g = &cli.global;
    match cli.command {
        Command::MakeToyDataset {
            out,
            classes,
            train_per_class,
            val_per_class,
        } => {
            let params = ToyDatasetParams {
                out,
                classes,
                train_per_class,
                val_per_class,
            };
            pipeline::make_toy_dataset(&params)?;
            json(&params)
        }
        Command::LearnTokens {
            dataset_root,
            classes,
            steps,
            lr,
            seed,
            parallelism,
            init_word,
            token_slug,
            created_at,
            fail_fast,
            out,
        } => {
            let ctx = context(g)?;
            let params = LearnParams {
                dataset_root,
                classes,
                steps,
                learning_rate: lr,
                seed: seed.unwrap_or(g.seed),
                parallelism,
                init_word,
                token_slug,
                created_at,
                fail_fast,
            };
            json(&pipeline::learn_tokens(&ctx, &params, out.as_deref(), &no_progress)?)
        }
        Command::Generate {
            tokens,
            class,
            shift,
            n,
            seed,
        } => {
            let mut ctx = context(g)?;
            ctx.tokens_override = tokens;
            let params = GenerateParams {
                class_id: class,
                shift,
                n,
                seed: seed.unwrap_or(g.seed),
            };
            json(&pipeline::generate(&ctx, &params, &no_progress)?)
        }
        Command::Score { shift, class } => {
            let ctx = context(g)?;
            json(&pipeline::score(
                &ctx,
                &ScoreParams { shift, class_id: class },
                &no_progress,
            )?)
        }
        Command::CalibrateClass {
            dataset_root,
            classes,
            percentile,
        } => {
            let ctx = context(g)?;
            let params = CalibrateClassParams {
                dataset_root,
                classes,
                percentile,
            };
            json(&pipeline::calibrate_classes(&ctx, &params, &no_progress)?)
        }
        Command::CalibrateShift {
            shift,
            grid,
            k,
            accept_from,
            inspector_id,
        } => {
            let ctx = context(g)?;
            let grid = (!grid.is_empty()).then_some(grid);
            let params = CalibrateShiftParams {
                shift,
                grid,
                inspection_count: k,
            };
            let mut run = CalibrationRun::open(&ctx, &params)?;
            let inspector_id = inspector_id.unwrap_or_else(|| match accept_from {
                Some(p) => shiftkit::filtering::ScriptedInspector::accepting_from(p).inspector_id,
                None => "terminal".into(),
            });
            while let Some(request) = run.view().request {
                let verdict = match accept_from {
                    Some(p) => InspectionVerdict {
                        percentile: request.percentile,
                        sample_ids: request.sample_ids.clone(),
                        all_exhibit_shift: request.percentile >= p,
                        inspector_id: inspector_id.clone(),
                    },
                    None => ask(&request, &ctx, &inspector_id)?,
                };
                run.submit(&ctx, verdict)?;
            }
            json(&run.view())
        }
        Command::Filter {
            shift,
            class_thresholds,
        } => {
            let ctx = context(g)?;
            json(&pipeline::filter(
                &ctx,
                &FilterParams {
                    shift,
                    class_thresholds,
                },
                &no_progress,
            )?)
        }
        Command::Evaluate {
            shift,
            toy_models,
            predictions,
            min_count,
        } => {
            let ctx = context(g)?;
            let models = match toy_models {
                Some(n_models) => ModelSource::Toy { n_models },
                None => ModelSource::Predictions {
                    files: predictions
                        .iter()
                        .map(|p| {
                            let (csv, manifest) = p.split_once(':').ok_or_else(|| {
                                ServiceError::invalid("predictions", format!("{p:?}: expected CSV:MANIFEST"))
                            })?;
                            Ok(PredictionFiles {
                                csv: csv.into(),
                                manifest: manifest.into(),
                            })
                        })
                        .collect::<Result<_>>()?,
                },
            };
            json(&pipeline::evaluate(
                &ctx,
                &EvaluateParams {
                    shift,
                    min_count,
                    models,
                },
                &no_progress,
            )?)
        }
        Command::Report => {
            let ctx = context(g)?;
            pipeline::report(&ctx)?;
            json(&pipeline::reports_view(&ctx)?)
        }
        Command::Serve { addr } => {
            let ctx = context(g)?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| ServiceError::io("<runtime>", e))?;
            runtime
                .block_on(crate::http::serve(crate::http::AppState::new(ctx), addr))
                .map_err(|e| ServiceError::io(addr.to_string(), e))?;
            Ok(Value::Null)
        }
    }
}
