//! Process exit codes.

use std::fmt;

use lapseg_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    /// Anything not covered below (internal contract or shape errors).
    Internal = 1,
    Usage = 2,
    Data = 3,
    Audit = 4,
}

impl ExitKind {
    pub fn code(self) -> u8 {
        self as u8
    }
}

/// An error raised by the driver itself with a chosen exit kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { kind: ExitKind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { kind: ExitKind::Data, message: message.into() }
    }

    pub fn audit(message: impl Into<String>) -> Self {
        Failure { kind: ExitKind::Audit, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn core_kind(e: &Error) -> ExitKind {
    match e {
        Error::Config(_) | Error::Transfer(_) => ExitKind::Usage,
        Error::Decode { .. } | Error::Data(_) | Error::Io { .. } | Error::Stats(_) | Error::Checkpoint(_) | Error::Json(_) => {
            ExitKind::Data
        }
        Error::Audit(_) => ExitKind::Audit,
        Error::Shape(_) | Error::Contract(_) | Error::DegenerateVariance(_) | Error::Optimizer(_) => ExitKind::Internal,
    }
}

/// The exit kind of the first classified error in the chain.
pub fn classify(err: &anyhow::Error) -> ExitKind {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_kind(e);
        }
    }
    ExitKind::Internal
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn classification_follows_the_chain() {
        let e = anyhow::Error::new(Error::Data("x".into())).context("loading");
        assert_eq!(classify(&e), ExitKind::Data);
        let e: anyhow::Error = Failure::usage("empty manifest").into();
        assert_eq!(classify(&e).code(), 2);
        let e = Err::<(), _>(Error::Audit("bad".into())).context("audit").unwrap_err();
        assert_eq!(classify(&e).code(), 4);
        assert_eq!(classify(&anyhow::anyhow!("?")), ExitKind::Internal);
    }
}
