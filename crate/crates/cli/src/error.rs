use std::process::ExitCode;

use clap::CommandFactory;
use graphmsl::dataio::DataError;
use graphmsl::encoder::EncoderError;
use graphmsl::evalkit::EvalError;
use graphmsl::fingerprint::FingerprintError;
use graphmsl::loss::LossError;
use graphmsl::similarity::SimilarityError;
use graphmsl::trainer::TrainError;

/// Failure classes and their exit codes: usage 1, data 2, numerical 3.
#[derive(Debug)]
pub enum CliError {
    Clap(clap::Error),
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Clap(_) | CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn report(&self, subcommand: Option<&str>) -> ExitCode {
        match self {
            CliError::Clap(e) => {
                let _ = e.print();
            }
            CliError::Usage(m) => {
                eprintln!("error: {m}");
                let mut cmd = crate::Cli::command();
                let usage = match subcommand.and_then(|s| cmd.find_subcommand_mut(s)) {
                    Some(sub) => sub.render_usage(),
                    None => cmd.render_usage(),
                };
                eprintln!("{usage}");
            }
            CliError::Data(m) => eprintln!("data error: {m}"),
            CliError::Numerical(m) => eprintln!("numerical failure: {m}"),
        }
        ExitCode::from(self.code())
    }
}

impl From<clap::Error> for CliError {
    fn from(e: clap::Error) -> Self {
        CliError::Clap(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SimilarityError> for CliError {
    fn from(e: SimilarityError) -> Self {
        match e {
            SimilarityError::WeightSum(_)
            | SimilarityError::BadWeight(_)
            | SimilarityError::UnknownPreset(_)
            | SimilarityError::NonPositiveTemperature { .. } => CliError::Usage(e.to_string()),
            SimilarityError::NonFinite => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FingerprintError> for CliError {
    fn from(e: FingerprintError) -> Self {
        match e {
            FingerprintError::InvalidParams(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Config(_) => CliError::Usage(e.to_string()),
            EncoderError::Shape(_) => CliError::Data(e.to_string()),
            EncoderError::Diff(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Temperature(_) => CliError::Usage(e.to_string()),
            LossError::Shape(_) => CliError::Data(e.to_string()),
            LossError::ZeroNorm | LossError::Diff(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::NonConvergence(_) => CliError::Numerical(e.to_string()),
            TrainError::Encoder(inner) => inner.into(),
            TrainError::Loss(inner) => inner.into(),
            TrainError::Similarity(inner) => inner.into(),
            TrainError::Shape(_) | TrainError::MissingModality(_) | TrainError::EmptyNodePool { .. } => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BadSplit(_) => CliError::Usage(e.to_string()),
            EvalError::NonFinite | EvalError::Solve(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
