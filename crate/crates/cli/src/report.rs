//! Assembles SVG plots and a summary table from previously written run
//! directories: KL-versus-step-size curves with their budget overlays, ratio
//! scatter plots with the through-origin fit, and loss-delta step plots.

use std::fs;
use std::path::{Path, PathBuf};

use ardiff_core::{Error, Result};
use serde_json::Value;

use crate::runio::{read_csv_column, Csv, RunContext};
use crate::svg::{Plot, Series};

fn read_json(path: &Path) -> Result<Value> {
    let raw = fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| Error::Parse {
        what: "report input",
        why: format!("{}: {e}", path.display()),
    })
}

fn number(v: &Value, key: &str) -> Option<f64> {
    v.get(key).and_then(Value::as_f64)
}

pub fn run_report(runs: &[PathBuf], title: &str, ctx: &mut RunContext) -> Result<()> {
    let mut pushforward_points: Vec<(f64, f64, f64)> = Vec::new(); // (eta, kl, bound)
    let mut summary = Csv::new(&["run", "command", "metric", "value"]);
    let mut recognized = 0usize;
    let mut plot_idx = 0usize;

    for dir in runs {
        let manifest_path = dir.join("run.json");
        if !manifest_path.exists() {
            eprintln!("warning: {} has no run.json, skipping", dir.display());
            continue;
        }
        let manifest = read_json(&manifest_path)?;
        let command = manifest
            .get("command")
            .and_then(Value::as_str)
            .unwrap_or("")
            .to_string();
        match command.as_str() {
            "pushforward" => {
                let body = read_json(&dir.join("pushforward.json"))?;
                let (Some(eta), Some(kl)) = (number(&body, "eta"), number(&body, "kl")) else {
                    eprintln!("warning: {} lacks eta/kl", dir.display());
                    continue;
                };
                let bound = number(&body, "kl_budget").unwrap_or(f64::NAN);
                pushforward_points.push((eta, kl, bound));
                summary.row(&[
                    dir.display().to_string(),
                    command,
                    "kl".into(),
                    format!("{kl}"),
                ]);
                recognized += 1;
            }
            "synth-eval" => {
                let body = read_json(&dir.join("evaluation.json"))?;
                let slope = number(&body, "slope").unwrap_or(f64::NAN);
                let r2 = number(&body, "r_squared").unwrap_or(f64::NAN);
                let xs = read_csv_column(&dir.join("ratios.csv"), "x")?;
                let ys = read_csv_column(&dir.join("ratios.csv"), "y")?;
                let points: Vec<(f64, f64)> = xs.into_iter().zip(ys).collect();
                let xmax = points.iter().fold(0.0f64, |m, (x, _)| m.max(*x));
                let plot = Plot {
                    title: format!("{title}: feature fit"),
                    x_label: "paired feature x".into(),
                    y_label: "paired feature y".into(),
                    log_x: false,
                    log_y: false,
                    series: vec![
                        Series {
                            name: "samples".into(),
                            points,
                            line: false,
                        },
                        Series {
                            name: format!("fit y = {slope:.4} x"),
                            points: vec![(0.0, 0.0), (xmax, slope * xmax)],
                            line: true,
                        },
                    ],
                    annotations: vec![format!("R^2 = {r2:.4}")],
                };
                ctx.write_bytes(
                    &format!("ratio_fit_{plot_idx}.svg"),
                    plot.render().as_bytes(),
                )?;
                plot_idx += 1;
                summary.row(&[
                    dir.display().to_string(),
                    command,
                    "r_squared".into(),
                    format!("{r2}"),
                ]);
                recognized += 1;
            }
            "analyze-trace" => {
                let delta_path = dir.join("delta.csv");
                if !delta_path.exists() {
                    summary.row(&[
                        dir.display().to_string(),
                        command,
                        "delta".into(),
                        "absent".into(),
                    ]);
                    continue;
                }
                let deltas = read_csv_column(&delta_path, "delta")?;
                let positive =
                    deltas.iter().filter(|&&d| d > 0.0).count() as f64 / deltas.len() as f64;
                let points: Vec<(f64, f64)> = deltas
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| (i as f64, d))
                    .collect();
                let plot = Plot {
                    title: format!("{title}: corrected loss delta"),
                    x_label: "step".into(),
                    y_label: "delta".into(),
                    log_x: false,
                    log_y: false,
                    series: vec![Series {
                        name: "delta".into(),
                        points,
                        line: true,
                    }],
                    annotations: vec![format!("fraction positive = {positive:.4}")],
                };
                ctx.write_bytes(
                    &format!("loss_delta_{plot_idx}.svg"),
                    plot.render().as_bytes(),
                )?;
                plot_idx += 1;
                summary.row(&[
                    dir.display().to_string(),
                    command,
                    "fraction_positive".into(),
                    format!("{positive}"),
                ]);
                recognized += 1;
            }
            other => {
                summary.row(&[
                    dir.display().to_string(),
                    other.to_string(),
                    "".into(),
                    "".into(),
                ]);
                recognized += 1;
            }
        }
    }

    if pushforward_points.len() >= 2 {
        pushforward_points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let measured: Vec<(f64, f64)> = pushforward_points
            .iter()
            .map(|(e, k, _)| (*e, *k))
            .collect();
        let budget: Vec<(f64, f64)> = pushforward_points
            .iter()
            .filter(|(_, _, b)| b.is_finite())
            .map(|(e, _, b)| (*e, *b))
            .collect();
        let mut series = vec![Series {
            name: "measured KL".into(),
            points: measured,
            line: true,
        }];
        if budget.len() >= 2 {
            series.push(Series {
                name: "error budget".into(),
                points: budget,
                line: true,
            });
        }
        let plot = Plot {
            title: format!("{title}: exact KL vs step size"),
            x_label: "max step eta".into(),
            y_label: "KL(target || generated)".into(),
            log_x: true,
            log_y: true,
            series,
            annotations: vec![],
        };
        ctx.write_bytes("kl_vs_eta.svg", plot.render().as_bytes())?;
    }

    if recognized == 0 {
        eprintln!("warning: no recognizable runs; writing an empty summary");
    }
    ctx.write_bytes("summary.csv", summary.into_string().as_bytes())?;
    Ok(())
}
