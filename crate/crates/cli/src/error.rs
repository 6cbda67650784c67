use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{message}")]
    Usage { message: String, flag: Option<String> },
    #[error(transparent)]
    Core(#[from] hotspot_core::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self::Usage {
            message: message.into(),
            flag: None,
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self::Runtime(message.into())
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, Self::Usage { .. })
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_usage() {
            2
        } else {
            1
        }
    }

    /// One-line JSON error record for stderr.
    pub fn record(&self, subcommand: Option<&str>) -> String {
        let kind = match self {
            Self::Usage { .. } => "usage",
            Self::Core(_) | Self::Runtime(_) => "runtime",
        };
        let mut rec = json!({
            "status": "error",
            "kind": kind,
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let Some(sub) = subcommand {
            rec["subcommand"] = json!(sub);
        }
        if let Self::Usage { flag: Some(f), .. } = self {
            rec["flag"] = json!(f);
        }
        rec.to_string()
    }
}
