//! CSV and JSON artefacts. Every CSV header names its unit in brackets.
//! Floats are written in shortest round-trip form, so identical values give
//! identical bytes.

use std::path::Path;

use anyhow::{Context, Result};
use beamadapt::adaptation::CostReport;
use beamadapt::metrics::Sensitivity;
use beamadapt::net::Objective;
use beamadapt::online::OnlineTrace;
use beamadapt::Problem;
use serde::Serialize;

use crate::experiment::{Evaluation, SweepRow, TimingRow};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn unit(problem: Problem) -> &'static str {
    problem.metric_unit()
}

/// One row per test channel, one column per method.
pub fn write_metrics(path: &Path, ev: &Evaluation, seed: u64) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["channel [index]".to_string(), "seed [-]".to_string()];
    header.extend(ev.columns.iter().map(|c| format!("{} [{}]", c.method.name(), ev.unit)));
    w.write_record(&header)?;
    let n = ev.columns.first().map_or(0, |c| c.values.len());
    for i in 0..n {
        let mut row = vec![i.to_string(), seed.to_string()];
        row.extend(ev.columns.iter().map(|c| c.values[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_costs(path: &Path, costs: &[CostReport]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method [-]", "adapted_params [count]", "pretrain_passes [count]", "adapt_passes [count]"])?;
    for c in costs {
        w.write_record([
            c.method.name().to_string(),
            c.adapted_params.to_string(),
            c.pretrain_passes.to_string(),
            c.adapt_passes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn loss_unit(objective: Objective) -> &'static str {
    match objective {
        Objective::SupervisedMse => "W^2",
        Objective::UnsupervisedSumRate => "-bit/s/Hz",
    }
}

/// Loss of every training pass.
pub fn write_loss_trace(path: &Path, losses: &[f64], index: &str, unit: &str) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([format!("{index} [index]"), format!("loss [{unit}]")])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Online trace; the timing columns stay empty unless `timing` is set.
pub fn write_trace(path: &Path, trace: &OnlineTrace, problem: Problem, timing: bool) -> Result<()> {
    let mut w = writer(path)?;
    let u = unit(problem);
    w.write_record([
        "slot [index]".to_string(),
        "segment [index]".to_string(),
        "method [-]".to_string(),
        format!("metric_mean [{u}]"),
        format!("metric_std [{u}]"),
        "fit_ms [ms]".to_string(),
        "predict_ms [ms]".to_string(),
        "train_size [count]".to_string(),
        "label_failures [count]".to_string(),
    ])?;
    let ms = |v: f64| if timing { v.to_string() } else { String::new() };
    for r in &trace.records {
        w.write_record([
            r.slot.to_string(),
            r.segment.to_string(),
            r.method.clone(),
            r.metric_mean.to_string(),
            r.metric_std.to_string(),
            ms(r.fit_ms),
            ms(r.predict_ms),
            r.train_size.to_string(),
            r.label_failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep(path: &Path, rows: &[SweepRow], problem: Problem) -> Result<()> {
    let mut w = writer(path)?;
    let u = unit(problem);
    w.write_record([
        "nt [count]".to_string(),
        "k [count]".to_string(),
        "power [with unit]".to_string(),
        "method [-]".to_string(),
        format!("mean [{u}]"),
        format!("std [{u}]"),
        format!("std_error [{u}]"),
    ])?;
    for r in rows {
        w.write_record([
            r.nt.to_string(),
            r.k.to_string(),
            r.power.clone(),
            r.method.name().to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.std_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per adaptation set, one column per method.
pub fn write_sensitivity(path: &Path, studies: &[Sensitivity], problem: Problem) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["dataset [index]".to_string()];
    header.extend(studies.iter().map(|s| format!("{} [{}]", s.method, unit(problem))));
    w.write_record(&header)?;
    let n = studies.first().map_or(0, |s| s.values.len());
    for i in 0..n {
        let mut row = vec![i.to_string()];
        row.extend(studies.iter().map(|s| s.values[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method [-]", "adapt [ms]", "predict_per_channel [ms]"])?;
    for r in rows {
        w.write_record([r.method.name().to_string(), r.adapt_ms.to_string(), r.predict_ms_per_channel.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
