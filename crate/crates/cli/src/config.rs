//! `key = value` configuration files.
//!
//! Keys are the long flag names of the subcommand. The file is spliced into
//! the argument list ahead of the user's own flags, so clap validates the
//! values and a flag given on the command line wins over the file.

use std::collections::HashSet;

use clap::Command;

use crate::Failure;

/// Parsed `(key, value, line)` entries.
pub fn parse(text: &str, source: &str) -> Result<Vec<(String, String, usize)>, Failure> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Failure::usage(format!("{source}:{}: expected 'key = value', got '{line}'", i + 1)));
        };
        let (k, v) = (k.trim().replace('_', "-"), v.trim().to_string());
        if k.is_empty() {
            return Err(Failure::usage(format!("{source}:{}: empty key", i + 1)));
        }
        if !seen.insert(k.clone()) {
            return Err(Failure::usage(format!("{source}:{}: duplicate key '{k}'", i + 1)));
        }
        out.push((k, v, i + 1));
    }
    Ok(out)
}

/// Flags for `entries`, checked against the options `cmd` accepts.
pub fn to_flags(entries: &[(String, String, usize)], cmd: &Command, source: &str) -> Result<Vec<String>, Failure> {
    let known: HashSet<&str> = cmd.get_arguments().filter_map(|a| a.get_long()).collect();
    entries
        .iter()
        .map(|(k, v, line)| {
            if k == "config" || !known.contains(k.as_str()) {
                Err(Failure::usage(format!("{source}:{line}: unknown key '{k}' for '{}'", cmd.get_name())))
            } else {
                Ok(format!("--{k}={v}"))
            }
        })
        .collect()
}

/// Inserts `flags` right after the subcommand path in `argv`.
pub fn splice(argv: &[String], path: &[&str], flags: Vec<String>) -> Vec<String> {
    let mut at = 1;
    for name in path {
        if let Some(p) = argv[at..].iter().position(|a| a == name) {
            at += p + 1;
        }
    }
    let mut out = argv[..at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[at..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_underscores() {
        let e = parse("# top\n\ninverse_length = 4 # inline\nseed=3\n", "f").unwrap();
        assert_eq!(e, vec![("inverse-length".into(), "4".into(), 3), ("seed".into(), "3".into(), 4)]);
    }

    #[test]
    fn malformed_and_duplicate_lines_are_usage_errors() {
        assert_eq!(parse("seed 3\n", "f").unwrap_err().code, 2);
        assert_eq!(parse("seed = 1\nseed = 2\n", "f").unwrap_err().code, 2);
    }

    #[test]
    fn splice_after_nested_subcommand() {
        let argv: Vec<String> = ["gpmatch", "--threads", "2", "features", "export", "a.pgm"].map(String::from).to_vec();
        let out = splice(&argv, &["features", "export"], vec!["--strides=8".into()]);
        assert_eq!(out, ["gpmatch", "--threads", "2", "features", "export", "--strides=8", "a.pgm"]);
    }
}
