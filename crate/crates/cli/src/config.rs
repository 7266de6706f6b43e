//! Flat `key = value` config files. `#` starts a comment; every key must
//! name a training field and may appear once.

use std::collections::BTreeSet;
use std::path::Path;

use semi_llie_core::train::TrainConfig;

use crate::error::{io_err, CliError, Result};

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| CliError::Config {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(CliError::Config {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
        cfg.set(key, value.trim()).map_err(|e| CliError::Config {
            line,
            message: e.to_string(),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    parse_config(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

/// Every field, one per line, in a form [`parse_config`] reads back.
pub fn render_config(cfg: &TrainConfig) -> String {
    cfg.to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_config("# run\n\nepochs = 3 # short\nlr=1e-3\n").unwrap();
        assert_eq!((cfg.epochs, cfg.lr), (3, 1e-3));
    }

    #[test]
    fn duplicates_and_junk_are_rejected() {
        assert!(matches!(
            parse_config("epochs = 3\nepochs = 4"),
            Err(CliError::Config { line: 2, .. })
        ));
        assert!(matches!(
            parse_config("epochs 3"),
            Err(CliError::Config { line: 1, .. })
        ));
        assert!(parse_config("lr = -1").is_err());
    }
}
