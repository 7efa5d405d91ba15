//! Deterministic artifact files: CSV and JSON writers, plot data, the run
//! manifest and the `report` aggregator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::stats::loglog_slope;

/// Plot-data flavours produced from module CSVs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    /// `(x, V)` at the first τ slice and the first time level of `value.csv`.
    Profile,
    /// `(ln abscissa, ln estimate)` per claim of `expansion.csv`, plus a
    /// sidecar JSON with the fitted slopes.
    Slope,
    /// `(t, x, 0/1)` intervention flags of the first τ slice of `value.csv`.
    Region,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

/// Writes a CSV with a header row; numbers use the shortest round-trip form.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Config(format!("json: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Header and rows of a CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(csv_err)?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Config(format!("{}: missing column `{name}`", path.display())))
}

fn parse(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Config(format!("not a number: `{s}`")))
}

/// Derives plot-ready files from a module CSV into `out_dir`.
pub fn emit_plot_data(source: &Path, kind: PlotKind, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (header, rows) = read_csv(source)?;
    match kind {
        PlotKind::Profile | PlotKind::Region => {
            let (ct, cti, cx) = (
                column(&header, "tau", source)?,
                column(&header, "t", source)?,
                column(&header, "x", source)?,
            );
            let first_tau = rows.first().map(|r| r[ct].clone()).unwrap_or_default();
            let first_t = rows.first().map(|r| r[cti].clone()).unwrap_or_default();
            let slice = rows.iter().filter(|r| r[ct] == first_tau);
            let (name, head, out): (&str, Vec<&str>, Vec<Vec<String>>) =
                if kind == PlotKind::Profile {
                    let cv = column(&header, "V", source)?;
                    (
                        "plot_profile.csv",
                        vec!["x", "V"],
                        slice
                            .filter(|r| r[cti] == first_t)
                            .map(|r| vec![r[cx].clone(), r[cv].clone()])
                            .collect(),
                    )
                } else {
                    let ci = column(&header, "intervene", source)?;
                    (
                        "plot_region.csv",
                        vec!["t", "x", "intervene"],
                        slice
                            .map(|r| vec![r[cti].clone(), r[cx].clone(), r[ci].clone()])
                            .collect(),
                    )
                };
            let path = out_dir.join(name);
            write_csv(&path, &head, &out)?;
            Ok(vec![path])
        }
        PlotKind::Slope => {
            let (cc, ca, ce) = (
                column(&header, "claim", source)?,
                column(&header, "abscissa", source)?,
                column(&header, "estimate", source)?,
            );
            let mut claims: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in &rows {
                claims
                    .entry(r[cc].clone())
                    .or_default()
                    .push((parse(&r[ca])?, parse(&r[ce])?));
            }
            let mut files = Vec::new();
            let mut slopes = BTreeMap::new();
            for (claim, pts) in &claims {
                let path = out_dir.join(format!("plot_slope_{claim}.csv"));
                let out: Vec<Vec<String>> = pts
                    .iter()
                    .map(|(a, e)| vec![num(a.ln()), num(e.ln())])
                    .collect();
                write_csv(&path, &["log_eps", "log_estimate"], &out)?;
                let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
                slopes.insert(claim.clone(), loglog_slope(&xs, &ys));
                files.push(path);
            }
            let side = out_dir.join("plot_slope.json");
            write_json(&side, &json!({ "slopes": slopes }))?;
            files.push(side);
            Ok(files)
        }
    }
}

/// Writes `manifest_<command>.json`; the only artifact with timestamps.
pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: &Value,
    seed: u64,
    outputs: &[String],
    exit_code: i32,
    started: u64,
) -> Result<PathBuf> {
    let finished = unix_now();
    let path = out_dir.join(format!("manifest_{command}.json"));
    write_json(
        &path,
        &json!({
            "command": command,
            "config": config,
            "seed": seed,
            "outputs": outputs,
            "exit_code": exit_code,
            "started_unix": started,
            "finished_unix": finished,
        }),
    )?;
    Ok(path)
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// JSON artifacts the `report` command recognizes, with their producer.
pub const KNOWN_JSON: [(&str, &str); 8] = [
    ("validate.json", "validate"),
    ("cost.json", "simulate"),
    ("qvi.json", "solve-qvi"),
    ("dpp.json", "check-dpp"),
    ("adjoint.json", "adjoint"),
    ("mp.json", "check-mp"),
    ("expansion.json", "expansion-order"),
    ("plot_slope.json", "expansion-order"),
];

/// One row of the aggregated report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub file: String,
    pub command: String,
    pub pass: Option<bool>,
    pub rows: Option<usize>,
    pub columns: Option<Vec<String>>,
}

/// Reads every known artifact in `dir` into `summary.json` and `summary.txt`.
/// Returns `None` when the directory holds no artifacts.
pub fn aggregate(dir: &Path) -> Result<Option<(Vec<ReportEntry>, bool)>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    let mut entries = Vec::new();
    for (file, command) in KNOWN_JSON {
        if names.iter().any(|n| n == file) {
            let v = read_json(&dir.join(file))?;
            entries.push(ReportEntry {
                file: file.to_string(),
                command: command.to_string(),
                pass: v.get("pass").and_then(Value::as_bool),
                rows: None,
                columns: None,
            });
        }
    }
    for name in names.iter().filter(|n| n.ends_with(".csv")) {
        let (header, rows) = read_csv(&dir.join(name))?;
        entries.push(ReportEntry {
            file: name.clone(),
            command: "csv".into(),
            pass: None,
            rows: Some(rows.len()),
            columns: Some(header),
        });
    }
    if entries.is_empty() {
        return Ok(None);
    }
    let all_pass = entries.iter().all(|e| e.pass != Some(false));
    write_json(
        &dir.join("summary.json"),
        &json!({ "entries": entries, "pass": all_pass }),
    )?;
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<28} {:<16} {:<6} {:>8}",
        "file", "command", "pass", "rows"
    );
    for e in &entries {
        let pass = e.pass.map_or("-".to_string(), |p| {
            if p { "yes" } else { "NO" }.to_string()
        });
        let rows = e.rows.map_or("-".to_string(), |r| r.to_string());
        let _ = writeln!(
            table,
            "{:<28} {:<16} {:<6} {:>8}",
            e.file, e.command, pass, rows
        );
    }
    let _ = writeln!(table, "overall: {}", if all_pass { "pass" } else { "FAIL" });
    fs::write(dir.join("summary.txt"), table)?;
    Ok(Some((entries, all_pass)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_and_region_plots_from_value_csv() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("value.csv");
        let rows: Vec<Vec<String>> = [
            [0.0, 0.0, -1.0, 2.0, 0.0],
            [0.0, 0.0, 1.0, 3.0, 1.0],
            [0.0, 0.5, -1.0, 4.0, 0.0],
            [0.2, 0.2, -1.0, 5.0, 0.0],
        ]
        .iter()
        .map(|r| r.iter().map(|v| num(*v)).collect())
        .collect();
        write_csv(&src, &["tau", "t", "x", "V", "intervene"], &rows).unwrap();
        let f = emit_plot_data(&src, PlotKind::Profile, dir.path()).unwrap();
        let (h, r) = read_csv(&f[0]).unwrap();
        assert_eq!(h, ["x", "V"]);
        assert_eq!(r, [["-1", "2"], ["1", "3"]]);
        let f = emit_plot_data(&src, PlotKind::Region, dir.path()).unwrap();
        let (_, r) = read_csv(&f[0]).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[1], ["0", "1", "1"]);
    }

    #[test]
    fn slope_plot_recovers_the_power() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("expansion.csv");
        let rows: Vec<Vec<String>> = [0.2, 0.1, 0.05]
            .iter()
            .map(|e: &f64| vec!["c".into(), num(*e), num(3.0 * e.powi(2))])
            .collect();
        write_csv(&src, &["claim", "abscissa", "estimate"], &rows).unwrap();
        emit_plot_data(&src, PlotKind::Slope, dir.path()).unwrap();
        let v = read_json(&dir.path().join("plot_slope.json")).unwrap();
        assert!((v["slopes"]["c"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_needs_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        assert!(aggregate(dir.path()).unwrap().is_none());
        write_json(&dir.path().join("dpp.json"), &json!({"pass": false})).unwrap();
        let (entries, pass) = aggregate(dir.path()).unwrap().unwrap();
        assert_eq!(entries.len(), 1);
        assert!(!pass);
        assert!(dir.path().join("summary.txt").exists());
    }
}
