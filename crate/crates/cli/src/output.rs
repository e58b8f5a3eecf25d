//! Human-readable rendering of replies. `--json` bypasses all of it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::Value as Json;

fn scalar(v: &Json) -> String {
    match v {
        Json::Null => "-".into(),
        Json::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Fixed-width table over the listed keys of each object.
fn table(rows: &[Json], keys: &[&str]) -> String {
    let cells: Vec<Vec<String>> = rows.iter().map(|r| keys.iter().map(|k| scalar(&r[*k])).collect()).collect();
    let widths: Vec<usize> = keys
        .iter()
        .enumerate()
        .map(|(i, k)| cells.iter().map(|c| c[i].len()).chain([k.len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, vals: Vec<&str>| {
        let parts: Vec<String> = vals.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, keys.to_vec());
    for c in &cells {
        line(&mut out, c.iter().map(String::as_str).collect());
    }
    out
}

fn human(op: &str, reply: &Json) -> Option<String> {
    let rows = reply.as_array();
    match op {
        "login" => Some(format!("{}\n", scalar(&reply["token"]))),
        "report_render" => Some(scalar(&reply["content"])),
        "station_list" => {
            Some(table(rows?, &["addr", "name", "baud", "status", "attached", "events_buffered", "last_contact_us"]))
        }
        "template_list" => Some(table(rows?, &["template_id", "version", "name", "encoded_size"])),
        "user_list" => Some(table(rows?, &["username", "role", "enabled"])),
        "events_query" => {
            let events = reply["events"].as_array()?;
            let mut out =
                table(events, &["sim_timestamp", "station", "seq", "kind", "uid", "subject_station", "detail"]);
            let shown = events.len();
            let offset = reply["offset"].as_u64().unwrap_or(0);
            let _ = writeln!(out, "({shown} of {} events from offset {offset})", scalar(&reply["total"]));
            Some(out)
        }
        "tag_read" => {
            let mut out = format!("template {} v{}\n", scalar(&reply["template_id"]), scalar(&reply["version"]));
            for (k, v) in reply["values"].as_object()? {
                let _ = writeln!(out, "{k} = {}", scalar(v));
            }
            Some(out)
        }
        _ => None,
    }
}

pub fn print(op: &str, reply: &Json, json: bool, output: Option<&Path>) -> Result<()> {
    if let Some(path) = output {
        let content = if json { reply.to_string() } else { scalar(&reply["content"]) };
        fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
        return Ok(());
    }
    if json {
        println!("{reply}");
        return Ok(());
    }
    match human(op, reply) {
        Some(text) => print!("{text}"),
        None => println!("{}", serde_json::to_string_pretty(reply)?),
    }
    Ok(())
}
