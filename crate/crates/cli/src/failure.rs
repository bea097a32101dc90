//! Exit codes and the single-line JSON error written to stderr.

use bertlite::Error;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Usage,
    Data,
    Internal,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 1,
            Category::Data => 2,
            Category::Internal => 3,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Failure {
    pub error: Category,
    pub kind: String,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { error: Category::Usage, kind: "usage".into(), message: message.into() }
    }

    pub fn data(kind: &str, message: impl Into<String>) -> Self {
        Self { error: Category::Data, kind: kind.into(), message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("failure serializes")
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (error, kind) = match &e {
            Error::Shape(_) => (Category::Internal, "shape"),
            Error::Index(_) => (Category::Internal, "index"),
            Error::Contract(_) => (Category::Internal, "contract"),
            Error::Config(_) => (Category::Data, "config"),
            Error::Parse { .. } => (Category::Data, "parse"),
            Error::EmptyDataset(_) => (Category::Data, "empty_dataset"),
            Error::Sampling(_) => (Category::Data, "sampling"),
            Error::Checkpoint(_) => (Category::Data, "checkpoint"),
            Error::Io(_) => (Category::Data, "io"),
            Error::Json(_) => (Category::Data, "json"),
        };
        Self { error, kind: kind.into(), message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
