//! `attrlab`: end-to-end driver for data generation, training, attribution,
//! faithfulness tests, retraining sweeps and analysis reports.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attrlab", version, about = "Instance and neuron attribution toolkit")]
struct Cli {
    /// Worker threads. Outputs are identical for every value.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic NLI splits and vocabulary.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score training instances for each evaluated instance.
    Attribute(AttributeArgs),
    /// Rank neurons for each evaluated instance.
    Neurons(NeuronsArgs),
    /// Sufficiency and comprehensiveness tests.
    Faithfulness(FaithfulnessArgs),
    /// Retrain on influential subsets across fractions.
    RetrainSweep(SweepArgs),
    /// Build a table or plot-data report from earlier outputs.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
pub struct Common {
    /// JSON config with data/model/train/attribution/analysis sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    artifact_rate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
pub struct AttrFlags {
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    ig_steps: Option<usize>,
    #[arg(long, value_enum)]
    ig_rule: Option<IgRuleArg>,
    #[arg(long)]
    damping: Option<f64>,
    /// Class explained by integrated gradients.
    #[arg(long, value_enum)]
    target: Option<TargetArg>,
    /// Label of the evaluated instance's loss gradient for IF/GS.
    #[arg(long, value_enum)]
    test_label: Option<TargetArg>,
}

#[derive(Args)]
pub struct Evaluated {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split whose instances are explained.
    #[arg(long, default_value = "test")]
    split: String,
    /// Only the first N instances of the split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    eval: Evaluated,
    #[arg(long, value_enum)]
    method: AttributeMethod,
    #[command(flatten)]
    flags: AttrFlags,
    /// Output file; `.csv` writes long-format scores, anything else JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct NeuronsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    eval: Evaluated,
    #[arg(long, value_enum)]
    method: NeuronMethod,
    #[command(flatten)]
    flags: AttrFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct FaithfulnessArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    eval: Evaluated,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "na,if-neuron,gs-neuron,random")]
    selectors: Vec<SelectorArg>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    sufficiency_r: Option<usize>,
    #[arg(long)]
    comprehensiveness_r: Option<usize>,
    #[command(flatten)]
    flags: AttrFlags,
    /// Table CSV; per-instance records go to `<out stem>.records.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    eval: Evaluated,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "if,gs,na-instances,random")]
    methods: Vec<SweepMethodArg>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
    /// Start each run from the checkpoint instead of a fresh initialization.
    #[arg(long)]
    from_checkpoint: bool,
    #[command(flatten)]
    flags: AttrFlags,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    report: Report,
    /// Earlier outputs the report is built from.
    #[arg(long, num_args = 0..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sweep fraction whose subsets table3 describes (default: smallest).
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    flags: AttrFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AttributeMethod {
    If,
    Gs,
    NaInstances,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum NeuronMethod {
    Na,
    #[value(name = "ia-neurons:if")]
    IaNeuronsIf,
    #[value(name = "ia-neurons:gs")]
    IaNeuronsGs,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SelectorArg {
    Na,
    IfNeuron,
    GsNeuron,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SweepMethodArg {
    If,
    Gs,
    NaInstances,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Sum,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TargetArg {
    Predicted,
    Gold,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum IgRuleArg {
    Midpoint,
    Right,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Report {
    Table1,
    Fig3,
    Fig4,
    Table3,
    Table4,
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

/// Usage line of the subcommand named on the command line, or of the tool.
fn usage_text() -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let name = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    match name.and_then(|n| cmd.find_subcommand_mut(&n).map(|c| c.render_usage())) {
        Some(u) => u.to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            if !rendered.contains("Usage:") {
                eprintln!("{}", usage_text());
            }
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            return fail("usage", 2, first.trim_start_matches("error: "));
        }
    };
    if cli.jobs == 0 {
        return fail("usage", 2, "--jobs must be at least 1");
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
        return fail("runtime", 1, &e.to_string());
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            if e.downcast_ref::<io::UsageError>().is_some() {
                fail("usage", 2, &msg)
            } else {
                fail("runtime", 1, &msg)
            }
        }
    }
}
