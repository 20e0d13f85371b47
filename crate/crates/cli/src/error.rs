use cyin_core::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::InvalidSpec(_)
            | Error::Protocol(_)
            | Error::TaskMismatch(_)
            | Error::UnsupportedTask(_)
            | Error::Incompatible(_)
            | Error::Format(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
