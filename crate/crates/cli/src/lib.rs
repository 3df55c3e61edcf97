//! Command-line orchestration for distributed PINN flow reconstruction.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod plot;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or missing inputs.
    #[error("{0}")]
    Validation(String),
    /// Training or evaluation failed after validation passed.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("io: {e}"))
    }
}

/// Parses `0,1,2` or `0-4` style lists.
pub fn parse_list(text: &str) -> Result<Vec<u64>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = || CliError::Validation(format!("bad list entry `{part}`"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(CliError::Validation("empty list".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists() {
        assert_eq!(parse_list("0,1,2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_list("0-4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_list("1, 4-5").unwrap(), vec![1, 4, 5]);
        assert!(parse_list("x").is_err());
        assert!(parse_list("").is_err());
        assert!(parse_list("3-1").is_err());
    }
}
