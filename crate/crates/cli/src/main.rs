// SPDX-License-Identifier: MIT OR Apache-2.0

//! `regforge` command-line harness.
//!
//! Exit codes: 0 ok, 2 usage, 3 input error, 4 numeric fault, 5 invariant
//! violation. `REGFORGE_THREADS` bounds the image worker pool.

mod commands;
mod context;
mod harness;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use regforge::registers::BiasScope;
use regforge::vit::RegisterInit;

use context::{Invariant, NeuronArg, Run, TargetArg, Usage};

#[derive(Parser)]
#[command(
    name = "regforge",
    version,
    about = "Trace ViT patch norms, find register neurons and move the outliers they create"
)]
struct Cli {
    /// Directory every output is written under.
    #[arg(long, global = true, default_value = "regforge-out")]
    out: PathBuf,
    /// Seed recorded in every manifest and used by seeded choices.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Report failures as one JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    /// Weight container.
    #[arg(long)]
    pub model: PathBuf,
    /// Model config JSON. Defaults to config.json next to the weights.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in architecture and analysis defaults.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// JSON map from canonical parameter names to the checkpoint's names.
    #[arg(long)]
    pub remap: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum Preset {
    #[value(name = "openclip-vit-b16")]
    OpenclipVitB16,
    #[value(name = "dinov2-vit-l14")]
    Dinov2VitL14,
}

/// Where outliers are measured. Falls back to a plan's scan provenance, then
/// to the preset's defaults.
#[derive(Args, Clone, Default)]
pub struct MeasureArgs {
    /// Layer whose post-MLP residual defines outliers.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Patch norm at or above which a patch is an outlier.
    #[arg(long)]
    pub threshold: Option<f32>,
}

/// Which neurons an intervention touches.
#[derive(Args, Clone, Default)]
pub struct NeuronArgs {
    /// Scan report written by scan-registers.
    #[arg(long, conflicts_with = "neurons")]
    pub scan: Option<PathBuf>,
    /// Explicit neurons as layer:neuron, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub neurons: Vec<NeuronArg>,
    /// Keep only the first k scanned neurons.
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum InitArg {
    Zeros,
    PatchMean,
    Gaussian,
}

impl InitArg {
    pub fn resolve(self, seed: u64) -> RegisterInit {
        match self {
            InitArg::Zeros => RegisterInit::Zeros,
            InitArg::PatchMean => RegisterInit::PatchMean,
            InitArg::Gaussian => RegisterInit::GaussianMatched { seed },
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ScopeArg {
    AllLayers,
    FromFirstIntervention,
}

impl From<ScopeArg> for BiasScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::AllLayers => BiasScope::AllLayers,
            ScopeArg::FromFirstIntervention => BiasScope::FromFirstIntervention,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer max patch norms and CLS attention, plus norm heatmaps.
    TraceNorms {
        /// Images (PPM, or PNG with the png feature) or directories of them.
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        /// Count the CLS token as a patch when taking maxima.
        #[arg(long)]
        include_cls: bool,
    },
    /// Patches whose norm reaches the threshold at one layer.
    FindOutliers {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        measure: MeasureArgs,
    },
    /// Rank MLP neurons by mean activation at outlier patches.
    ScanRegisters {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        measure: MeasureArgs,
        /// Highest layer scanned, inclusive.
        #[arg(long)]
        top_layer: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Move register-neuron activations onto chosen patches.
    Shift {
        image: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        measure: MeasureArgs,
        /// Replay a plan instead of building one.
        #[arg(long, conflicts_with_all = ["scan", "neurons", "targets"])]
        plan: Option<PathBuf>,
        #[command(flatten)]
        neurons: NeuronArgs,
        /// Target patches as row,col; repeat or separate with ';'.
        #[arg(long, value_delimiter = ';')]
        targets: Vec<TargetArg>,
    },
    /// Append test-time registers that take the register-neuron activations.
    AddRegister {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        measure: MeasureArgs,
        #[arg(long, conflicts_with_all = ["scan", "neurons"])]
        plan: Option<PathBuf>,
        #[command(flatten)]
        neurons: NeuronArgs,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_enum, default_value = "zeros")]
        init: InitArg,
    },
    /// Zero register-neuron activations everywhere.
    Zero {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        measure: MeasureArgs,
        #[command(flatten)]
        neurons: NeuronArgs,
    },
    /// Replace a test-time register with per-head attention biases.
    AttnBias {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        measure: MeasureArgs,
        #[command(flatten)]
        neurons: NeuronArgs,
        /// Images the biases are averaged over.
        #[arg(long, num_args = 1.., required_unless_present = "bias")]
        calibrate: Vec<PathBuf>,
        /// Reuse biases from an earlier attn-bias run.
        #[arg(long, conflicts_with = "calibrate")]
        bias: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all-layers")]
        scope: ScopeArg,
    },
    /// Split one layer's attention output into register and other contributions.
    Decompose {
        image: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        neurons: NeuronArgs,
        /// Number of test-time registers.
        #[arg(long, default_value_t = 1)]
        registers: usize,
        /// Attention layer to split. Defaults to the last.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Write a planted model, its ground truth and sample images.
    MakePlanted {
        /// PlantSpec JSON. Defaults to one sampled from --seed.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        images: usize,
    },
    /// Run a small invariant suite on random and planted models.
    SelfTest,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("REGFORGE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Usage(format!("REGFORGE_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let run = Run::new(cli.out, cli.seed)?;
    match cli.command {
        Command::TraceNorms { images, model, include_cls } => {
            commands::trace_norms(&run, &images, &model, include_cls)
        }
        Command::FindOutliers { images, model, measure } => {
            commands::outliers(&run, &images, &model, &measure)
        }
        Command::ScanRegisters { images, model, measure, top_layer, top_k } => {
            commands::scan_registers(&run, &images, &model, &measure, top_layer, top_k)
        }
        Command::Shift { image, model, measure, plan, neurons, targets } => {
            commands::shift(&run, &image, &model, &measure, plan.as_deref(), &neurons, &targets)
        }
        Command::AddRegister { images, model, measure, plan, neurons, count, init } => {
            commands::add_register(&run, &images, &model, &measure, plan.as_deref(), &neurons, count, init)
        }
        Command::Zero { images, model, measure, neurons } => {
            commands::zero(&run, &images, &model, &measure, &neurons)
        }
        Command::AttnBias { images, model, measure, neurons, calibrate, bias, scope } => {
            commands::attn_bias(&run, &images, &model, &measure, &neurons, &calibrate, bias.as_deref(), scope.into())
        }
        Command::Decompose { image, model, neurons, registers, layer } => {
            commands::decompose(&run, &image, &model, &neurons, registers, layer)
        }
        Command::MakePlanted { spec, images } => harness::make_planted(&run, spec.as_deref(), images),
        Command::SelfTest => harness::self_test(&run),
    }
}

/// Exit code and error kind for a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return (2, "usage");
        }
        if cause.downcast_ref::<Invariant>().is_some() {
            return (5, "invariant_violation");
        }
        if let Some(e) = cause.downcast_ref::<regforge::Error>() {
            return if e.is_numeric_fault() {
                (4, "numeric_fault")
            } else {
                (3, "input_error")
            };
        }
    }
    (3, "input_error")
}

fn report_error(json: bool, code: u8, kind: &str, message: &str) {
    if json {
        let v = serde_json::json!({ "error": { "code": code, "kind": kind, "message": message } });
        eprintln!("{v}");
    } else {
        eprintln!("error: {message}");
    }
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                report_error(true, 2, "usage", e.render().to_string().trim());
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    let json = cli.json_errors;
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = classify(&err);
            report_error(json, code, kind, &format!("{err:#}"));
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use regforge::tensor::TensorError;

    #[test]
    fn errors_map_to_exit_codes() {
        let wrap = |e: anyhow::Error| e.context("while running");
        assert_eq!(classify(&wrap(Usage("x".into()).into())).0, 2);
        assert_eq!(classify(&wrap(Invariant("x".into()).into())).0, 5);
        let fault = regforge::Error::from(TensorError::NumericFault { op: "matmul", index: 0 });
        assert_eq!(classify(&wrap(fault.into())), (4, "numeric_fault"));
        assert_eq!(classify(&wrap(regforge::Error::EmptyScan.into())).0, 3);
        assert_eq!(classify(&anyhow::anyhow!("other")).0, 3);
    }
}
