//! `--config` files: one `key = value` per line, `#` comments. Each entry
//! becomes `--key value` placed right after the subcommand, so flags given
//! on the command line override it.

use std::path::Path;

use anyhow::{bail, Context, Result};

const SUBCOMMANDS: [&str; 5] = ["simulate", "reconstruct", "svplot", "evaluate", "cardinality"];

pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key = value", origin.display(), n + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" {
            bail!("{}:{}: invalid key '{}'", origin.display(), n + 1, key);
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            v => {
                args.push(format!("--{key}"));
                args.push(v.to_string());
            }
        }
    }
    Ok(args)
}

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

pub fn expand(argv: &[String]) -> Result<Vec<String>> {
    let Some(path) = config_path(argv) else {
        return Ok(argv.to_vec());
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let extra = parse_config(&text, Path::new(&path))?;
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv.to_vec());
    };
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

pub fn parse_window_filter(s: &str) -> Result<f64, String> {
    let v = s
        .strip_prefix("minmean=")
        .ok_or_else(|| format!("expected minmean=<value>, got '{s}'"))?;
    v.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("invalid minmean value '{v}'"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn entries_become_flags() {
        let text = "# defaults\nduty = 0.25\nseed=3\npoisson_counts = true\nlog-display = false\n";
        let got = parse_config(text, Path::new("c.conf")).unwrap();
        assert_eq!(got, args(&["--duty", "0.25", "--seed", "3", "--poisson-counts"]));
    }

    #[test]
    fn malformed_lines_are_reported_with_position() {
        let err = parse_config("duty 0.2\n", Path::new("c.conf")).unwrap_err();
        assert!(err.to_string().contains("c.conf:1"));
    }

    #[test]
    fn window_filter_syntax() {
        assert_eq!(parse_window_filter("minmean=12.5"), Ok(12.5));
        assert!(parse_window_filter("12.5").is_err());
        assert!(parse_window_filter("minmean=x").is_err());
    }

    #[test]
    fn file_entries_go_before_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "duty = 0.5\n").unwrap();
        let p = path.to_str().unwrap();
        let argv = args(&["musical", "--config", p, "simulate", "--duty", "0.1"]);
        let got = expand(&argv).unwrap();
        assert_eq!(
            got,
            args(&["musical", "--config", p, "simulate", "--duty", "0.5", "--duty", "0.1"])
        );
    }
}
