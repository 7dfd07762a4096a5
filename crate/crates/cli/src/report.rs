use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use align3d::probes::{line_plot, read_results, write_results, Arm, EvalResult, ResultRow, Series};
use align3d::Error;

use crate::commands::{create_dir, out_path, usage, write_file, CliResult};
use crate::ReportArgs;

/// Directories under `root` holding both a results table and a config
/// snapshot, in path order.
fn run_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| usage(format!("cannot read {}: {e}", dir.display())))?;
        let mut children: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        children.sort();
        for c in children.into_iter().rev() {
            if c.is_dir() {
                stack.push(c);
            }
        }
        if dir.join("results.csv").is_file() && dir.join("config.json").is_file() {
            found.push(dir);
        }
    }
    found.sort();
    Ok(found)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn summary(rows: &[ResultRow]) -> String {
    let mut groups: BTreeMap<(String, String, String, String, String, String, String, String), Vec<&ResultRow>> =
        BTreeMap::new();
    for r in rows {
        let key = (
            r.sweep.clone(),
            r.arm.to_string(),
            r.fraction.to_string(),
            r.loss.clone(),
            r.layer.clone(),
            r.lambda.to_string(),
            r.proj_depth.to_string(),
            r.target.clone(),
        );
        groups.entry(key).or_default().push(r);
    }
    let mut text = String::from(
        "sweep,arm,fraction,loss,layer,lambda,proj_depth,target,n,mn_I,mn_C,obj_analog_I,obj_analog_C,knn_acc,knn_acc_std,caption_f1\n",
    );
    for (k, rs) in groups {
        let col = |f: fn(&ResultRow) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (knn, knn_sd) = col(|r| r.knn_acc);
        text += &format!(
            "{},{},{},{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
            k.0,
            k.1,
            k.2,
            k.3,
            k.4,
            k.5,
            k.6,
            k.7,
            rs.len(),
            col(|r| r.mn_i).0,
            col(|r| r.mn_c).0,
            col(|r| r.obj_analog_i).0,
            col(|r| r.obj_analog_c).0,
            knn,
            knn_sd,
            col(|r| r.caption_f1).0
        );
    }
    text
}

pub fn report(a: crate::ReportArgs) -> CliResult {
    let ReportArgs { runs, out } = a;
    if !runs.is_dir() {
        return Err(usage(format!("{} is not a directory", runs.display())));
    }
    let dirs = run_dirs(&runs)?;
    if dirs.is_empty() {
        return Err(usage(format!("no run directories under {}", runs.display())));
    }
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    let mut knn_by_arm: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for d in &dirs {
        let rs = read_results(&d.join("results.csv"))?;
        let text = fs::read_to_string(d.join("config.json")).map_err(Error::io(d.join("config.json")))?;
        configs.push(serde_json::from_str::<serde_json::Value>(&text).map_err(Error::from)?);
        if let Ok(text) = fs::read_to_string(d.join("eval.json")) {
            let eval: EvalResult = serde_json::from_str(&text).map_err(Error::from)?;
            if let Some(r) = rs.first() {
                let arm = if r.sweep == "fraction" && r.fraction < 1.0 {
                    None
                } else {
                    Some(r.arm.to_string())
                };
                if let Some(arm) = arm {
                    let k = r.knn_k;
                    for c in eval.knn.iter().filter(|c| c.k == k) {
                        knn_by_arm.entry(arm.clone()).or_default().entry(c.layer).or_default().push(c.acc);
                    }
                }
            }
        }
        rows.extend(rs);
    }
    rows.sort_by(|x, y| x.run.cmp(&y.run));

    let out = out_path(&out);
    create_dir(&out)?;
    write_results(&out.join("results.csv"), &rows)?;
    write_file(&out.join("summary.csv"), &summary(&rows))?;
    write_file(&out.join("configs.json"), &(serde_json::to_string_pretty(&configs).map_err(Error::from)? + "\n"))?;

    let series: Vec<Series> = knn_by_arm
        .iter()
        .map(|(arm, layers)| Series {
            name: arm.clone(),
            points: layers.iter().map(|(&l, v)| (l as f64, mean_std(v).0)).collect(),
        })
        .collect();
    write_file(
        &out.join("knn_by_layer.svg"),
        &line_plot("KNN accuracy of point-cloud tokens by layer", "LM layer", "accuracy (%)", &series),
    )?;

    let mut by_fraction: BTreeMap<(Arm, &'static str), BTreeMap<String, (f64, Vec<f64>)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.sweep == "fraction") {
        for (name, v) in [("mn_I", r.mn_i), ("knn", r.knn_acc), ("caption", r.caption_f1)] {
            by_fraction
                .entry((r.arm, name))
                .or_default()
                .entry(format!("{:08.4}", r.fraction))
                .or_insert((r.fraction, Vec::new()))
                .1
                .push(v);
        }
    }
    if !by_fraction.is_empty() {
        let series: Vec<Series> = by_fraction
            .iter()
            .map(|((arm, name), pts)| Series {
                name: format!("{arm} {name}"),
                points: pts.values().map(|(f, v)| (*f, mean_std(v).0)).collect(),
            })
            .collect();
        write_file(
            &out.join("fraction.svg"),
            &line_plot("Score by training fraction", "training fraction", "score", &series),
        )?;
    }
    println!("merged {} runs ({} rows) into {}", dirs.len(), rows.len(), out.display());
    Ok(())
}
