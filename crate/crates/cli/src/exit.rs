use anime_adapter::Error;
use anime_taxonomy::{ManifestError, PromptError, TaxonomyError};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

/// Flag combinations that cannot be honoured.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Maps the first recognised error in the chain to a process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_USAGE,
                Error::Shape(_) | Error::OutOfRange(_) | Error::Data(_) | Error::Integrity(_) | Error::Io { .. } => EXIT_DATA,
                Error::Backend(_) | Error::AlreadyAttached | Error::NonFiniteLoss { .. } | Error::FreezeViolation(_) => EXIT_BACKEND,
            };
        }
        if cause.is::<TaxonomyError>() || cause.is::<ManifestError>() || cause.is::<PromptError>() || cause.is::<std::io::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}
