//! Command-line entry point.
//!
//! Exit codes: 0 success; 2 configuration/usage; 3 completion parse errors;
//! 4 backend client errors; 5 I/O; 6 empty input; 7 training divergence;
//! 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffphy::config::{backend_from_env, BackendChoice, CliConfig, ENV_LLM_BACKEND, ENV_MLLM_BACKEND};
use diffphy::context::{reason_context, save_context, PromptTemplates, UserPrompt, DEFAULT_MAX_FACTS};
use diffphy::dataset::{annotate, emit, filter_realistic, read_input, KeywordClassifier};
use diffphy::dit::{load_checkpoint, DitModel, ToyDecoder};
use diffphy::eval::{aggregate, read_records, write_bar_chart, write_csv, write_summary_json};
use diffphy::inject::{build_injection_branch, load_branch};
use diffphy::llm::{DecodeParams, MockLlm};
use diffphy::trainer::{infer, TrainBatch, TrainOutputs, Trainer};
use diffphy::util::derive_seed;
use diffphy::verifier::{MockBehavior, MockMllm};
use diffphy::Error;

#[derive(Parser)]
#[command(name = "diffphy", about = "Physics-aware fine-tuning of a toy video diffusion model")]
struct Cli {
    /// Path to a JSON config file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force all backends to the bundled deterministic mocks.
    #[arg(long, global = true, default_value_t = true)]
    mock_backends: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the physical-reasoning pipeline over a prompt and save the
    /// resulting context JSON.
    Reason {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = DEFAULT_MAX_FACTS)]
        max_facts: usize,
    },
    /// Fine-tune the toy model with the physics losses and injection.
    Train {},
    /// Aggregate evaluation records into per-category tables.
    Eval {
        #[arg(long)]
        records: PathBuf,
        /// Also render per-category bar charts (PGM images).
        #[arg(long)]
        plots: bool,
    },
    /// Curate a corpus: filter realism, annotate physics rules, emit JSONL.
    Curate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate a video for a prompt, optionally with a verified second pass.
    Infer {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 1)]
        passes: u8,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Validation(_) | Error::Precondition(_) | Error::Range(_)
        | Error::Shape(_) | Error::Schedule(_) | Error::IncompatibleModel(_) => 2,
        Error::Parse { .. } | Error::Tag(_) | Error::Json(_) | Error::Csv(_) => 3,
        Error::Client(_) | Error::Classifier(_) => 4,
        Error::Io(_) => 5,
        Error::EmptyInput(_) | Error::EmptyFactList | Error::EmptySupport => 6,
        Error::Diverged(_) => 7,
        _ => 1,
    }
}

fn load_templates(cfg: &CliConfig) -> diffphy::Result<PromptTemplates> {
    match &cfg.templates_dir {
        Some(dir) => PromptTemplates::load_dir(dir),
        None => Ok(PromptTemplates::default()),
    }
}

fn require_mock(var: &str, force: bool) -> diffphy::Result<()> {
    match backend_from_env(var, force)? {
        BackendChoice::Mock => Ok(()),
        BackendChoice::Named(name) => Err(Error::Config(format!(
            "backend {name:?} is not bundled in this build; unset {var} or pass --mock-backends"
        ))),
    }
}

fn run(cli: Cli) -> diffphy::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let templates = load_templates(&cfg)?;
    let seed = cfg.train.seed;

    match cli.command {
        Command::Reason { prompt, max_facts } => {
            require_mock(ENV_LLM_BACKEND, cli.mock_backends)?;
            let prompt = UserPrompt::new(&prompt)?;
            let client = MockLlm::new(seed);
            let params = DecodeParams { seed, ..DecodeParams::default() };
            let ctx = reason_context(&prompt, &client, &templates, &params, max_facts)?;
            let dir = cfg.path_in_output("contexts");
            let path = save_context(&dir, &prompt, &ctx)?;
            println!("context written to {}", path.display());
        }
        Command::Train {} => {
            require_mock(ENV_LLM_BACKEND, cli.mock_backends)?;
            require_mock(ENV_MLLM_BACKEND, cli.mock_backends)?;
            let mut model = DitModel::new(cfg.model.clone(), derive_seed(seed, "model"))?;
            model.attach_lora(cfg.adapter.rank, cfg.adapter.alpha, derive_seed(seed, "lora"))?;
            let branch =
                build_injection_branch(&model, cfg.adapter.clone(), derive_seed(seed, "branch"))?;
            let decoder = ToyDecoder::new(model.config.clone(), derive_seed(seed, "decoder"));
            let mllm = MockMllm::new(seed, MockBehavior::Statistic { gain: 4.0 });

            let llm = MockLlm::new(seed);
            let params = DecodeParams { seed, ..DecodeParams::default() };
            let prompt = UserPrompt::new("a glass of water tips over on a wooden table")?;
            let ctx = reason_context(&prompt, &llm, &templates, &params, DEFAULT_MAX_FACTS)?;
            let batch = TrainBatch::synthetic(
                &model,
                derive_seed(seed, "batch"),
                &ctx.enhanced_prompt,
                ctx.phenomena.clone(),
            );

            let outputs = TrainOutputs {
                log_path: Some(cfg.path_in_output(&cfg.log_file)),
                model_checkpoint: Some(cfg.path_in_output(&cfg.checkpoint_file)),
                branch_checkpoint: Some(cfg.path_in_output(&cfg.branch_checkpoint_file)),
            };
            let mut trainer = Trainer::new(
                model,
                branch,
                decoder,
                &mllm,
                &templates,
                cfg.train.clone(),
                outputs,
            )?;
            let reports = trainer.run(std::slice::from_ref(&batch))?;
            let last = reports.last().expect("at least one step");
            println!(
                "trained {} steps; final total loss {:.6}; log at {}",
                reports.len(),
                last.losses.total,
                cfg.path_in_output(&cfg.log_file).display()
            );
        }
        Command::Eval { records, plots } => {
            let recs = read_records(&records)?;
            if recs.is_empty() {
                return Err(Error::EmptyInput(format!("{} has no records", records.display())));
            }
            let summary = aggregate(&recs)?;
            let csv_path = cfg.path_in_output("eval_table.csv");
            let json_path = cfg.path_in_output("eval_summary.json");
            write_csv(&csv_path, &summary)?;
            write_summary_json(&json_path, &summary)?;
            if plots {
                for metric in ["pc", "sa", "overall"] {
                    write_bar_chart(&cfg.path_in_output(&format!("eval_{metric}.pgm")), &summary, metric)?;
                }
            }
            println!("eval tables written to {}", csv_path.display());
        }
        Command::Curate { input } => {
            require_mock(ENV_LLM_BACKEND, cli.mock_backends)?;
            let raw = read_input(&input)?;
            let filtered = filter_realistic(&raw, &KeywordClassifier, cfg.realism_threshold)?;
            let llm = MockLlm::new(seed);
            let params = DecodeParams { seed, ..DecodeParams::default() };
            let mut annotated = Vec::with_capacity(filtered.accepted.len());
            for r in &filtered.accepted {
                annotated.push(annotate(r, &llm, &templates, &params)?);
            }
            let jsonl = cfg.path_in_output(&cfg.dataset_file);
            let manifest_path = cfg.path_in_output(&cfg.manifest_file);
            let manifest = emit(&annotated, &jsonl, &manifest_path)?;
            println!(
                "curated {} records ({} dropped, {} flagged for review) -> {}",
                manifest.count,
                filtered.dropped.len(),
                manifest.needs_review,
                jsonl.display()
            );
        }
        Command::Infer { prompt, passes } => {
            require_mock(ENV_LLM_BACKEND, cli.mock_backends)?;
            require_mock(ENV_MLLM_BACKEND, cli.mock_backends)?;
            let user_prompt = UserPrompt::new(&prompt)?;
            let llm = MockLlm::new(seed);
            let params = DecodeParams { seed, ..DecodeParams::default() };
            let ctx = reason_context(&user_prompt, &llm, &templates, &params, DEFAULT_MAX_FACTS)?;

            let ckpt = cfg.path_in_output(&cfg.checkpoint_file);
            let model = if ckpt.exists() {
                load_checkpoint(&ckpt)?
            } else {
                let mut m = DitModel::new(cfg.model.clone(), derive_seed(seed, "model"))?;
                m.attach_lora(cfg.adapter.rank, cfg.adapter.alpha, derive_seed(seed, "lora"))?;
                m
            };
            let branch_path = cfg.path_in_output(&cfg.branch_checkpoint_file);
            let branch = if branch_path.exists() {
                load_branch(&branch_path)?
            } else {
                build_injection_branch(&model, cfg.adapter.clone(), derive_seed(seed, "branch"))?
            };
            let decoder = ToyDecoder::new(model.config.clone(), derive_seed(seed, "decoder"));
            let mllm = MockMllm::new(seed, MockBehavior::Statistic { gain: 4.0 });
            let outcome = infer(
                &ctx.enhanced_prompt,
                &ctx.phenomena,
                passes,
                &model,
                &branch,
                &decoder,
                &mllm,
                &templates,
                cfg.train.match_threshold,
                seed,
            )?;
            let report = serde_json::json!({
                "video_hash": outcome.video.content_hash(),
                "second_pass": outcome.second_pass,
                "failures": outcome.failures,
                "enhanced_prompt": ctx.enhanced_prompt,
            });
            let path = cfg.path_in_output("infer_report.json");
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap())?;
            println!("inference report written to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
