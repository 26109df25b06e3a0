//! `--config` files: flat `key = value` pairs, optionally grouped under a
//! `[subcommand]` table. Values only fill flags missing from the command line.

use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command};

/// Extra `--flag=value` arguments contributed by the file for `sub`.
///
/// Top-level keys apply to every subcommand that has such a flag; keys inside
/// `[sub]` must name a flag of `sub`. Unknown keys are errors.
pub fn injected_args(path: &Path, cmd: &Command, sub: &str, matches: &ArgMatches) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| format!("config {} is not valid key = value syntax: {e}", path.display()))?;
    let sub_cmd = cmd.find_subcommand(sub).expect("matched subcommand exists");
    let known_anywhere = |key: &str| cmd.get_subcommands().any(|c| long_id(c, key).is_some());

    let mut pairs = Vec::new();
    for (key, value) in &table {
        match value {
            toml::Value::Table(inner) if cmd.find_subcommand(key).is_some() => {
                if key != sub {
                    continue;
                }
                for (k, v) in inner {
                    if long_id(sub_cmd, k).is_none() {
                        return Err(format!("config key [{sub}] {k} is not a flag of `{sub}`"));
                    }
                    pairs.push((k.clone(), v.clone()));
                }
            }
            toml::Value::Table(_) => return Err(format!("config table [{key}] is not a subcommand")),
            _ if long_id(sub_cmd, key).is_some() => pairs.push((key.clone(), value.clone())),
            _ if known_anywhere(key) => {}
            _ => return Err(format!("config key {key} is not a known flag")),
        }
    }

    let mut out = Vec::new();
    for (key, value) in pairs {
        let id = long_id(sub_cmd, &key).expect("checked above");
        if matches.value_source(&id) == Some(ValueSource::CommandLine) {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => out.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::String(s) => out.push(format!("{flag}={s}")),
            toml::Value::Integer(i) => out.push(format!("{flag}={i}")),
            toml::Value::Float(f) => out.push(format!("{flag}={f}")),
            toml::Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|v| match v {
                        toml::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                out.push(format!("{flag}={}", parts.join(",")));
            }
            other => return Err(format!("config key {key} has unsupported value {other}")),
        }
    }
    Ok(out)
}

/// Argument id of the long flag `key` (underscores accepted for dashes).
fn long_id(cmd: &Command, key: &str) -> Option<String> {
    let key = key.replace('_', "-");
    cmd.get_arguments()
        .find(|a| a.get_long() == Some(key.as_str()))
        .map(|a| a.get_id().to_string())
}
