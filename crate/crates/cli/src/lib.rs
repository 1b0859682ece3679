//! Experiment harness behind the `twin` binary: configuration, per-seed
//! command runners, reports and summaries.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod workers;

pub use commands::{run, Command};
pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};

/// Parses `1,2,5-7` into `[1, 2, 5, 6, 7]`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = |part: &str| HarnessError::Validation(vec![format!("seeds: cannot parse '{part}'")]);
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad(part))?, b.trim().parse().map_err(|_| bad(part))?);
                if a > b {
                    return Err(bad(part));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad(part))?),
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Validation(vec!["seeds: missing seed list".into()]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists_and_ranges() {
        assert_eq!(parse_seeds("3, 1,5-7").unwrap(), vec![3, 1, 5, 6, 7]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("4-2").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
