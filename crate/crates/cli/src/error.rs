use std::fmt;

use velofilt_core::Error as CoreError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { kind: Kind::Config, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { kind: Kind::Data, msg: msg.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }

    pub fn context(self, what: &str) -> Self {
        Self { kind: self.kind, msg: format!("{what}: {}", self.msg) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

fn classify(e: &CoreError) -> Kind {
    match e {
        CoreError::InvalidArgument(_) => Kind::Config,
        CoreError::NumericFailure(_) => Kind::Numeric,
        CoreError::InvalidState(_) | CoreError::Data(_) | CoreError::Io { .. } => Kind::Data,
        CoreError::BankMember { source, .. } | CoreError::Stage { source, .. } => classify(source),
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        Self { kind: classify(&e), msg: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;
