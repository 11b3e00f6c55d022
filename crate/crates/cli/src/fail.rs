use std::fmt;

/// Process exit codes.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_TRAIN: u8 = 3;
pub const EXIT_SAMPLE: u8 = 4;
const EXIT_OTHER: u8 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(e: impl fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }

    pub fn train(e: impl fmt::Display) -> Self {
        Self {
            code: EXIT_TRAIN,
            message: e.to_string(),
        }
    }

    pub fn sample(e: impl fmt::Display) -> Self {
        Self {
            code: EXIT_SAMPLE,
            message: e.to_string(),
        }
    }

    pub fn other(e: impl fmt::Display) -> Self {
        Self {
            code: EXIT_OTHER,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Maps engine errors raised while reading inputs: bad files and bad
/// arguments are configuration problems.
pub fn input(e: swg_core::Error) -> CliError {
    use swg_core::Error as E;
    match e {
        E::Io(_) | E::Json(_) | E::Csv(_) | E::Invalid(_) | E::Checkpoint(_) | E::Conditioning(_) | E::Shape { .. } | E::NonPositiveWeights { .. } => {
            CliError::config(e)
        }
        e => CliError::other(e),
    }
}

/// Output files that cannot be written.
pub fn output(e: impl fmt::Display) -> CliError {
    CliError::other(format!("writing output: {e}"))
}
