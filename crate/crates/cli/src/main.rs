mod args;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::Parser;
use layerlens::cca::{CcaConfig, FrameSubsample, Variant};
use layerlens::probe::TrainConfig;
use layerlens::synth::{ClusterSpec, SynthSpec};
use layerlens::tsne::{LabelBy, TsneConfig};

use args::{Cli, Command, SynthCommon, SynthKind, TrainArgs, TsneMode, VariantArg};
use run::{
    absolute, open_dataset, parse_layers, usage, CliResult, FoldSpec, PointMode, ReportEntry, RunManifest, RunSpec,
    SynthTarget,
};

const DEFAULT_OUT_DIR: &str = "layerlens-out";

fn base_spec(c: SynthCommon) -> SynthSpec {
    SynthSpec {
        dataset_name: c.name,
        n_utterances: c.utterances,
        frames_per_utterance: c.frames,
        dim: c.dim,
        num_layers: c.layers,
        seed: c.seed,
        noise_sigma: c.noise_sigma,
        ..SynthSpec::default()
    }
}

fn train_config(t: &TrainArgs) -> (TrainConfig, FoldSpec) {
    let config = TrainConfig {
        learning_rate: t.lr,
        batch_size: t.batch_size,
        max_epochs: t.epochs,
        patience: t.patience,
        seed: t.seed,
        hidden_dim: t.hidden_dim,
        activation: t.activation.into(),
        validation_fraction: t.validation_fraction,
        ..TrainConfig::default()
    };
    let folds = FoldSpec {
        k: t.folds,
        seed: t.seed,
        speaker_disjoint: !t.utterance_folds,
    };
    (config, folds)
}

/// Turn parsed arguments into a fully explicit run description.
fn resolve(command: Command) -> CliResult<RunSpec> {
    Ok(match command {
        Command::Validate { manifest } => RunSpec::Validate { manifest },
        Command::Synth { kind } => match kind {
            SynthKind::Probe {
                common,
                signal_layer,
                task,
            } => RunSpec::Synth {
                target: SynthTarget::Probe,
                spec: SynthSpec {
                    signal_layer,
                    score_task: task.into(),
                    ..base_spec(common)
                },
            },
            SynthKind::Cca {
                common,
                shared_rank,
                diverge_from_layer,
            } => RunSpec::Synth {
                target: SynthTarget::Cca { shared_rank },
                spec: SynthSpec {
                    diverge_from_layer,
                    ..base_spec(common)
                },
            },
            SynthKind::Clusters {
                common,
                k,
                spread,
                class_offset,
                segment_len,
            } => RunSpec::Synth {
                target: SynthTarget::Clusters,
                spec: SynthSpec {
                    cluster_spec: Some(ClusterSpec {
                        k,
                        spread,
                        class_offset,
                        segment_len,
                    }),
                    ..base_spec(common)
                },
            },
        },
        Command::Cca(a) => {
            let dataset_a = absolute(&a.dataset_a)?;
            let dataset_b = absolute(&a.dataset_b)?;
            let layers = parse_layers(&a.layers, open_dataset(&dataset_a)?.num_layers())?;
            RunSpec::Cca {
                dataset_a,
                dataset_b,
                variant: match a.variant {
                    VariantArg::MeanCca => Variant::MeanCca,
                    VariantArg::Svcca => Variant::Svcca,
                    VariantArg::Pwcca => Variant::Pwcca,
                },
                layers,
                fixed_reference_layer: a.fixed_reference_layer,
                subsample: if a.max_frames == 0 {
                    FrameSubsample::All
                } else {
                    FrameSubsample::Budget {
                        max_frames: a.max_frames,
                    }
                },
                cca: CcaConfig {
                    reg_eps: a.reg_eps,
                    svcca_threshold: a.svcca_threshold,
                },
                seed: a.seed,
            }
        }
        Command::ProbeTrain(a) => {
            let (train, folds) = train_config(&a.train);
            RunSpec::ProbeTrain {
                dataset: absolute(&a.dataset)?,
                layer: a.layer,
                task: a.task.into(),
                folds,
                train,
            }
        }
        Command::Sweep(a) => {
            let dataset = absolute(&a.dataset)?;
            let layers = parse_layers(&a.layers, open_dataset(&dataset)?.num_layers())?;
            let (train, folds) = train_config(&a.train);
            RunSpec::Sweep {
                dataset,
                task: a.task.into(),
                layers,
                folds,
                train,
            }
        }
        Command::Tsne(a) => {
            let dataset = absolute(&a.dataset)?;
            let layer = match a.layer {
                Some(l) => l,
                None => open_dataset(&dataset)?
                    .num_layers()
                    .checked_sub(1)
                    .ok_or_else(|| usage(anyhow!("dataset declares no layers")))?,
            };
            let (mode, default_label) = match a.mode {
                TsneMode::Phoneme => (PointMode::Phoneme, LabelBy::PhonemeClass),
                TsneMode::Frame => (
                    PointMode::Frame {
                        speech_task: a.speech_task.into(),
                        stride: a.stride,
                    },
                    LabelBy::Group,
                ),
            };
            RunSpec::Tsne {
                dataset,
                mode,
                layer,
                label_by: a.label_by.map_or(default_label, Into::into),
                tsne: TsneConfig {
                    perplexity: a.perplexity,
                    iterations: a.iterations,
                    learning_rate: a.learning_rate,
                    init: a.init.into(),
                    seed: a.seed,
                    ..TsneConfig::default()
                },
            }
        }
        Command::Report(a) => {
            let entries = a
                .entries
                .iter()
                .map(|e| {
                    let (name, path) = e
                        .split_once('=')
                        .ok_or_else(|| usage(anyhow!("report entry {e:?} is not NAME=PATH")))?;
                    Ok(ReportEntry {
                        name: name.to_string(),
                        path: absolute(&PathBuf::from(path))?,
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            RunSpec::Report { entries, seed: a.seed }
        }
        Command::Replay { .. } => unreachable!("replay is handled before resolution"),
    })
}

fn main_inner(cli: Cli) -> CliResult<i32> {
    let explicit_out = cli.out_dir.clone();
    let mut manifest = match cli.command {
        Command::Replay { run_json } => RunManifest::load(&run_json)?,
        command => RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            workers: 1,
            run: resolve(command)?,
        },
    };
    if let Some(w) = cli.workers {
        manifest.workers = w as usize;
    }
    if let RunSpec::Tsne { tsne, .. } = &mut manifest.run {
        tsne.workers = manifest.workers;
    }
    let out_dir = match (&manifest.run, explicit_out) {
        (_, Some(dir)) => Some(dir),
        (RunSpec::Validate { .. }, None) => None,
        (_, None) => Some(PathBuf::from(DEFAULT_OUT_DIR)),
    };
    run::execute(&manifest, out_dir.as_deref())
}

/// The error chain, skipping causes whose text the outer message already
/// includes.
fn describe(error: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in error.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match main_inner(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {}", describe(&e.error));
            ExitCode::from(e.code as u8)
        }
    }
}
