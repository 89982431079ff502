//! CSV export of search traces, size samples and evaluation reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! parsing a cell gives back the exact value.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{mean_std, CampaignReport};
use crate::search::{op_name, EpochRecord};

pub const PROBS_HEADER: &str = "epoch,stage,edge,op,probability";
pub const EPOCHS_HEADER: &str = "epoch,tau_eff,lambda,expected_params,train_loss,val_loss,penalty";
pub const KERNELS_HEADER: &str = "epoch,stage,edge,kernel,probability";
pub const DEPTHS_HEADER: &str = "epoch,stage,depth,probability";
pub const REPORT_HEADER: &str = "checkpoint,seed,sample_id,discarded,params,best_val_acc,test_acc";
pub const SUMMARY_HEADER: &str =
    "checkpoint,sampled,retrained,discarded,mean_test_acc,std_test_acc,mean_params";

/// One row per (epoch, stage, edge, operation).
pub fn probs_csv(trace: &[EpochRecord]) -> String {
    let mut s = format!("{PROBS_HEADER}\n");
    for r in trace {
        for (st, edges) in r.op_probs.iter().enumerate() {
            for (e, p) in edges.iter().enumerate() {
                for (o, v) in p.iter().enumerate() {
                    writeln!(s, "{},{st},{e},{},{v}", r.epoch, op_name(o)).expect("string write");
                }
            }
        }
    }
    s
}

pub fn epochs_csv(trace: &[EpochRecord]) -> String {
    let mut s = format!("{EPOCHS_HEADER}\n");
    for r in trace {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.tau_eff, r.lambda, r.expected_params, r.train_loss, r.val_loss, r.penalty
        )
        .expect("string write");
    }
    s
}

pub fn kernels_csv(trace: &[EpochRecord], kernel_sizes: &[usize]) -> String {
    let mut s = format!("{KERNELS_HEADER}\n");
    for r in trace {
        for (st, edges) in r.kernel_probs.iter().enumerate() {
            for (e, p) in edges.iter().enumerate() {
                for (k, v) in kernel_sizes.iter().zip(p) {
                    writeln!(s, "{},{st},{e},{k},{v}", r.epoch).expect("string write");
                }
            }
        }
    }
    s
}

pub fn depths_csv(trace: &[EpochRecord], depths: &[usize]) -> String {
    let mut s = format!("{DEPTHS_HEADER}\n");
    for r in trace {
        for (st, p) in r.depth_probs.iter().enumerate() {
            for (d, v) in depths.iter().zip(p) {
                writeln!(s, "{},{st},{d},{v}", r.epoch).expect("string write");
            }
        }
    }
    s
}

/// File names written by [`export_trace`].
pub const TRACE_FILES: [&str; 4] = ["trace_probs.csv", "trace_epochs.csv", "trace_kernels.csv", "trace_depths.csv"];

/// Writes the four trace tables into `dir`.
pub fn export_trace(trace: &[EpochRecord], dir: &Path, kernel_sizes: &[usize], depths: &[usize]) -> Result<()> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("cannot export an empty trace".into()));
    }
    let tables = [
        probs_csv(trace),
        epochs_csv(trace),
        kernels_csv(trace, kernel_sizes),
        depths_csv(trace, depths),
    ];
    for (name, body) in TRACE_FILES.iter().zip(tables) {
        std::fs::write(dir.join(name), body)?;
    }
    Ok(())
}

/// Per-sample rows. `test_acc` is empty for discarded models.
pub fn report_csv(report: &CampaignReport) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in &report.rows {
        let test = r.test_acc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{test}",
            r.checkpoint, r.seed, r.sample_id, r.discarded, r.params, r.best_val_acc
        )
        .expect("string write");
    }
    s
}

/// Mean and sample standard deviation per checkpoint, then over all rows.
pub fn summary_csv(report: &CampaignReport, sampled_per_checkpoint: usize) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !names.contains(&r.checkpoint.as_str()) {
            names.push(&r.checkpoint);
        }
    }
    let mut s = format!("{SUMMARY_HEADER}\n");
    let mut line = |label: &str, sampled: usize, pick: &dyn Fn(&str) -> bool| {
        let rows: Vec<_> = report.rows.iter().filter(|r| pick(&r.checkpoint)).collect();
        let accs: Vec<f64> = rows.iter().filter_map(|r| r.test_acc).collect();
        let params: Vec<f64> = rows.iter().filter(|r| !r.discarded).map(|r| r.params as f64).collect();
        let (m, sd) = mean_std(&accs).map_or((String::new(), String::new()), |(m, sd)| (m.to_string(), sd.to_string()));
        let mp = mean_std(&params).map_or(String::new(), |p| p.0.to_string());
        let disc = rows.iter().filter(|r| r.discarded).count();
        writeln!(s, "{label},{sampled},{},{disc},{m},{sd},{mp}", rows.len()).expect("string write");
    };
    for n in &names {
        line(n, sampled_per_checkpoint, &|c| c == *n);
    }
    line("all", report.summary.sampled, &|_| true);
    s
}

/// One parameter count per line under a `params` header.
pub fn sizes_csv(sizes: &[usize]) -> String {
    let mut s = String::from("params\n");
    for v in sizes {
        writeln!(s, "{v}").expect("string write");
    }
    s
}

/// Reads the first column of a CSV of counts, skipping a non-numeric header.
pub fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.split(',').next().unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<usize>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => {}
            Err(_) => {
                return Err(Error::InvalidArgument(format!("line {}: {cell:?} is not a parameter count", i + 1)));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("sizes file has no counts".into()));
    }
    Ok(out)
}
