use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use layerlens::cca::{DEFAULT_FRAME_BUDGET, DEFAULT_REG_EPS, DEFAULT_SVCCA_THRESHOLD};
use layerlens::eval::DEFAULT_FOLDS;
use layerlens::probe::{Activation, DEFAULT_HIDDEN_DIM};
use layerlens::store::{ScoreTask, SpeechTask};
use layerlens::tsne::{Init, LabelBy};

/// Layer-wise analysis of frozen speech-encoder representations.
///
/// Each run records its fully resolved parameters in `run.json` inside the
/// output directory; `layerlens replay <run.json>` re-executes it.
#[derive(Debug, Parser)]
#[command(name = "layerlens", version, about, long_about = None)]
pub struct Cli {
    /// Worker threads for layer-, fold- and row-level parallelism. Results do
    /// not depend on this value. Defaults to 1, the serial reference mode, or
    /// to the recorded value when replaying.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,

    /// Output directory [default: layerlens-out; `validate` writes nothing
    /// unless one is given].
    #[arg(long, global = true, env = "LAYERLENS_OUT_DIR")]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset manifest and every embedding file it references.
    /// Exits 0 when clean, 1 on violations, 2 when the manifest cannot be read.
    Validate { manifest: PathBuf },
    /// Generate a synthetic dataset with known ground truth.
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
    /// Layer-wise CCA similarity between two aligned datasets.
    ///
    /// Argument order is (analyzed model, reference model); pwcca weights
    /// come from the analyzed model.
    Cca(CcaArgs),
    /// Cross-validate a probe on one layer and save a model trained on all
    /// utterances.
    ProbeTrain(ProbeTrainArgs),
    /// Cross-validate a probe on every requested layer with shared folds.
    Sweep(SweepArgs),
    /// 2-D t-SNE scatter of one layer.
    Tsne(TsneArgs),
    /// Combine probe results into a model × task table of `mean ± std` cells.
    Report(ReportArgs),
    /// Re-run a command from its run.json.
    Replay { run_json: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum SynthKind {
    /// Probe dataset: one layer's pooled features determine the score.
    Probe {
        #[command(flatten)]
        common: SynthCommon,
        /// Layer carrying the signal; omit for pure noise with no scores.
        #[arg(long)]
        signal_layer: Option<usize>,
        #[arg(long, value_enum, default_value_t = TaskArg::Intelligibility)]
        task: TaskArg,
    },
    /// Two aligned datasets sharing a latent subspace per layer.
    Cca {
        #[command(flatten)]
        common: SynthCommon,
        /// Latent directions shared by both views.
        #[arg(long, default_value_t = 2)]
        shared_rank: usize,
        /// Layers at or above this index share nothing.
        #[arg(long)]
        diverge_from_layer: Option<usize>,
    },
    /// Sustained-vowel dataset whose frames form one cluster per group.
    Clusters {
        #[command(flatten)]
        common: SynthCommon,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        /// Separation of consonant and vowel segments inside a cluster.
        #[arg(long, default_value_t = 0.0)]
        class_offset: f64,
        #[arg(long, default_value_t = 5)]
        segment_len: usize,
    },
}

#[derive(Debug, Args)]
pub struct SynthCommon {
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    #[arg(long, default_value_t = 100)]
    pub utterances: usize,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Intelligibility,
    Severity,
}

impl From<TaskArg> for ScoreTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Intelligibility => ScoreTask::Intelligibility,
            TaskArg::Severity => ScoreTask::Severity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    MeanCca,
    Svcca,
    Pwcca,
}

#[derive(Debug, Args)]
pub struct CcaArgs {
    /// Manifest of the analyzed model.
    pub dataset_a: PathBuf,
    /// Manifest of the reference model.
    pub dataset_b: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Pwcca)]
    pub variant: VariantArg,
    /// Layers of the analyzed model, e.g. `0-24`, `1,3,5` or `all`.
    #[arg(long, default_value = "all")]
    pub layers: String,
    /// Compare every layer with this one layer of the reference model.
    #[arg(long)]
    pub fixed_reference_layer: Option<usize>,
    /// Cap on concatenated frames per layer (uniform stride); 0 keeps all.
    #[arg(long, default_value_t = DEFAULT_FRAME_BUDGET)]
    pub max_frames: usize,
    #[arg(long, default_value_t = DEFAULT_REG_EPS)]
    pub reg_eps: f64,
    #[arg(long, default_value_t = DEFAULT_SVCCA_THRESHOLD)]
    pub svcca_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = DEFAULT_HIDDEN_DIM)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    pub activation: ActivationArg,
    /// Held-out share for early stopping when training on all utterances.
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    /// Allow a speaker in several folds.
    #[arg(long)]
    pub utterance_folds: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ProbeTrainArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub layer: usize,
    #[arg(long, value_enum, default_value_t = TaskArg::Intelligibility)]
    pub task: TaskArg,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Intelligibility)]
    pub task: TaskArg,
    /// e.g. `0-24`, `1,3,5` or `all`.
    #[arg(long, default_value = "all")]
    pub layers: String,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TsneMode {
    /// One pooled point per phoneme segment.
    Phoneme,
    /// One point per frame of the matching records.
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelArg {
    PhonemeClass,
    Group,
    Both,
}

impl From<LabelArg> for LabelBy {
    fn from(l: LabelArg) -> Self {
        match l {
            LabelArg::PhonemeClass => LabelBy::PhonemeClass,
            LabelArg::Group => LabelBy::Group,
            LabelArg::Both => LabelBy::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpeechTaskArg {
    Reading,
    SustainedVowel,
}

impl From<SpeechTaskArg> for SpeechTask {
    fn from(t: SpeechTaskArg) -> Self {
        match t {
            SpeechTaskArg::Reading => SpeechTask::Reading,
            SpeechTaskArg::SustainedVowel => SpeechTask::SustainedVowel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Random,
    Pca,
}

impl From<InitArg> for Init {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Random => Init::RandomGaussian,
            InitArg::Pca => Init::Pca,
        }
    }
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = TsneMode::Phoneme)]
    pub mode: TsneMode,
    /// Defaults to the highest layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Defaults to phoneme-class in phoneme mode and group in frame mode.
    #[arg(long, value_enum)]
    pub label_by: Option<LabelArg>,
    /// Records used in frame mode.
    #[arg(long, value_enum, default_value_t = SpeechTaskArg::SustainedVowel)]
    pub speech_task: SpeechTaskArg,
    /// Keep every n-th frame in frame mode.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 200.0)]
    pub learning_rate: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Random)]
    pub init: InitArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `NAME=PATH` to a probe-train `report.json` or a sweep `sweep.json`
    /// (best layer). Entries sharing a name fill one row.
    #[arg(long = "entry", required = true)]
    pub entries: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
