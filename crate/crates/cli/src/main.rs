//! Single entry point: every training stage and evaluation is a
//! subcommand over a config file. All outputs land under the run
//! directory named by the config hash; exit code 0 on success, 1 on
//! validation errors, 2 on runtime failures.

use clap::{Args, Parser, Subcommand};
use scenemt_core::config::{RunConfig, RunPaths, SceneSource};
use scenemt_core::eval::{run_ablation, ablation_row_config, ABLATION_ROWS};
use scenemt_core::reward::{read_graphs_jsonl, reward, RewardError, SymbolLexicon};
use scenemt_core::trainer::{self, TrainError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "scenemt",
    version,
    about = "Synthetic-world multimodal translation: imagine a scene with a diffusion model, align it with a scene-graph reward, translate with a visual-prefix decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/dev/test datasets and the vocabulary file.
    GenData(RunArgs),
    /// Stage 1: pretrain the denoiser with the DDPM objective.
    TrainDiffusion(RunArgs),
    /// Stage 2: fine-tune the denoiser against the scene-graph reward.
    TrainDdpo(RunArgs),
    /// Stage 3: train the translator under the joint loss.
    TrainTranslator(RunArgs),
    /// Evaluate the final model on the test set.
    Eval(RunArgs),
    /// Train and evaluate all four ablation rows on the same test set.
    Ablate(RunArgs),
    /// Evaluate every stage-3 checkpoint on the dev set.
    Curve(RunArgs),
    /// Score pairs of scene graphs from two JSONL files.
    Score(ScoreArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Repeatable override, e.g. --set data.seed=7
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Validate the config and print the execution plan without side effects.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// JSONL file of language scene graphs, one per line.
    #[arg(long)]
    lsg: PathBuf,
    /// JSONL file of visual scene graphs, matched line by line.
    #[arg(long)]
    vsg: PathBuf,
    /// Lexicon: "strict", "soft", or a path to a lexicon table.
    #[arg(long, default_value = "strict")]
    lexicon: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, TrainError> {
    let mut config = RunConfig::load(&args.config)?;
    config.apply_overrides(&args.set)?;
    Ok(config)
}

fn dispatch(command: Command) -> Result<(), TrainError> {
    match command {
        Command::GenData(args) => {
            let config = load_config(&args)?;
            if args.dry_run {
                print_plan("gen-data", &config);
                return Ok(());
            }
            trainer::ensure_data(&config)?;
            println!("dataset written under {}", config.run_dir().display());
            Ok(())
        }
        Command::TrainDiffusion(args) => {
            let config = load_config(&args)?;
            if args.dry_run {
                print_plan("train-diffusion", &config);
                return Ok(());
            }
            trainer::ensure_data(&config)?;
            trainer::pretrain_diffusion(&config)?;
            println!(
                "pretrained denoiser at {}",
                RunPaths::of(&config).denoiser_pretrained().display()
            );
            Ok(())
        }
        Command::TrainDdpo(args) => {
            let config = load_config(&args)?;
            if args.dry_run {
                print_plan("train-ddpo", &config);
                return Ok(());
            }
            trainer::ensure_data(&config)?;
            trainer::finetune_ddpo(&config)?;
            println!(
                "tuned denoiser at {}",
                RunPaths::of(&config).denoiser_tuned().display()
            );
            Ok(())
        }
        Command::TrainTranslator(args) => {
            let config = load_config(&args)?;
            if args.dry_run {
                print_plan("train-translator", &config);
                return Ok(());
            }
            trainer::ensure_data(&config)?;
            trainer::train_translator(&config)?;
            println!(
                "translator at {}",
                RunPaths::of(&config).model_final().display()
            );
            Ok(())
        }
        Command::Eval(args) => {
            let config = load_config(&args)?;
            if args.dry_run {
                print_plan("eval", &config);
                return Ok(());
            }
            let report = trainer::evaluate(&config)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Curve(args) => {
            let config = load_config(&args)?;
            if args.dry_run {
                print_plan("curve", &config);
                return Ok(());
            }
            let (points, corr) = trainer::run_curve(&config)?;
            println!(
                "{} checkpoints evaluated; spearman(bleu, reward) = {}",
                points.len(),
                corr.map_or("undefined".to_string(), |c| format!("{c:.4}"))
            );
            println!("curve at {}", RunPaths::of(&config).curve().display());
            Ok(())
        }
        Command::Ablate(args) => {
            let config = load_config(&args)?;
            if args.dry_run {
                print_plan("ablate", &config);
                return Ok(());
            }
            let table = run_ablation(&config)?;
            print!("{}", table.to_csv());
            println!(
                "table at {}",
                RunPaths::of(&config).ablation_table().display()
            );
            Ok(())
        }
        Command::Score(args) => {
            let lex = resolve_lexicon(&args.lexicon)?;
            let lsg = read_graphs_jsonl(&args.lsg).map_err(TrainError::Reward)?;
            let vsg = read_graphs_jsonl(&args.vsg).map_err(TrainError::Reward)?;
            if lsg.len() != vsg.len() {
                return Err(TrainError::Invalid(format!(
                    "graph files differ in length: {} vs {}",
                    lsg.len(),
                    vsg.len()
                )));
            }
            println!("index,reward");
            for (i, (l, v)) in lsg.iter().zip(&vsg).enumerate() {
                let r = reward(l, v, &lex).map_err(TrainError::Reward)?;
                println!("{i},{r:.6}");
            }
            Ok(())
        }
    }
}

fn resolve_lexicon(name: &str) -> Result<SymbolLexicon, TrainError> {
    if let Some(lex) = SymbolLexicon::by_name(name) {
        return Ok(lex);
    }
    SymbolLexicon::from_file(std::path::Path::new(name)).map_err(|e| match e {
        RewardError::Io(_) => {
            TrainError::Invalid(format!("lexicon {name:?}: not a name or readable file"))
        }
        other => TrainError::Reward(other),
    })
}

fn print_plan(command: &str, config: &RunConfig) {
    let paths = RunPaths::of(config);
    println!("command: {command}");
    println!("config hash: {}", config.hash());
    println!("run directory: {}", paths.root.display());
    match command {
        "gen-data" => {
            println!("would write:");
            for p in [paths.train_data(), paths.dev_data(), paths.test_data(), paths.vocab_file()]
            {
                println!("  {}", p.display());
            }
        }
        "train-diffusion" => {
            println!("would write:");
            println!("  {}", paths.denoiser_pretrained().display());
            println!("  {}", paths.diffusion_loss_curve().display());
        }
        "train-ddpo" => {
            println!("reads: {}", paths.denoiser_pretrained().display());
            println!("would write:");
            println!("  {}", paths.denoiser_tuned().display());
            println!("  {}", paths.rl_log().display());
        }
        "train-translator" => {
            println!("scene source: {:?}", config.scene_source());
            if config.scene_source() == SceneSource::Generated {
                println!("reads: {}", paths.denoiser_tuned().display());
            }
            println!("would write:");
            println!("  {}", paths.model_final().display());
            println!("  {}", paths.stage3_log().display());
        }
        "eval" => {
            println!("reads: {}", paths.model_final().display());
            println!("would write: {}", paths.report().display());
        }
        "curve" => {
            println!("reads stage-3 checkpoints listed in the manifest");
            println!("would write: {}", paths.curve().display());
        }
        "ablate" => {
            println!("rows:");
            for name in ABLATION_ROWS {
                let row = ablation_row_config(config, name);
                println!(
                    "  {name}: hash {} -> {}",
                    row.hash(),
                    row.run_dir().display()
                );
            }
            println!("would write: {}", paths.ablation_table().display());
        }
        _ => {}
    }
}
