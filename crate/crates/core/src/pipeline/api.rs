//! Request and error bodies shared by the HTTP service and its clients.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{eval, finetune, gen_data, pretrain, run_gradcheck, Overrides, RunConfig};
use crate::error::{Error, ErrorKind, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    /// The config document; `null` means the preset defaults.
    #[serde(default)]
    pub config: Value,
    #[serde(default)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
    pub exit_code: i32,
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
            exit_code: e.kind().exit_code(),
        }
    }
}

pub const COMMANDS: [&str; 5] = ["gen-data", "pretrain", "finetune", "eval", "gradcheck"];

/// Resolves the request and runs `command`, returning its output as JSON.
pub fn dispatch(command: &str, req: &RunRequest) -> Result<Value> {
    if !COMMANDS.contains(&command) {
        return Err(Error::Config(format!("unknown command {command:?}")));
    }
    let cfg = RunConfig::resolve(&req.config, &req.overrides)?;
    let out = match command {
        "gen-data" => serde_json::to_value(gen_data(&cfg)?),
        "pretrain" => serde_json::to_value(pretrain(&cfg)?),
        "finetune" => serde_json::to_value(finetune(&cfg)?),
        "eval" => serde_json::to_value(eval(&cfg)?),
        _ => serde_json::to_value(run_gradcheck(&cfg)?),
    };
    Ok(out.expect("serializable output"))
}
