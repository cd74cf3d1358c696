//! Run metrics: the JSON document and the flat CSV projection emitted by
//! the CLI. Both schemas are stable; parsing our own output round-trips.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd::IterationReport;

/// Echo of the configuration a run was launched with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub workers: usize,
    pub n_b: usize,
    pub q_s: usize,
    pub k: i64,
    pub eps: f64,
    pub max_iter: usize,
    pub fixed_iters: Option<usize>,
    pub seed: u64,
    pub path: String,
    pub orientation: String,
    pub device_budget_bytes: u64,
    pub transfer_cost_ns_per_byte: u64,
}

/// Everything measured in one decomposition run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: RunConfig,
    pub wall_time_s: f64,
    /// One entry per rank.
    pub peak_device_bytes: Vec<u64>,
    /// Transfer counters summed over ranks.
    pub h2d_bytes: u64,
    pub d2h_bytes: u64,
    pub h2d_count: u64,
    pub d2h_count: u64,
    /// Collective counters for the whole group.
    pub all_reduce_calls: u64,
    pub reduce_calls: u64,
    pub comm_bytes: u64,
    pub report: IterationReport,
}

impl RunMetrics {
    pub fn max_peak_device_bytes(&self) -> u64 {
        self.peak_device_bytes.iter().copied().max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("metrics json: {e}")))
    }

    pub fn csv_row(&self) -> CsvRow {
        CsvRow {
            workers: self.config.workers,
            n_b: self.config.n_b,
            q_s: self.config.q_s,
            k: self.config.k,
            eps: self.config.eps,
            max_iter: self.config.max_iter,
            fixed_iters: self.config.fixed_iters,
            seed: self.config.seed,
            path: self.config.path.clone(),
            orientation: self.config.orientation.clone(),
            device_budget_bytes: self.config.device_budget_bytes,
            transfer_cost_ns_per_byte: self.config.transfer_cost_ns_per_byte,
            wall_time_s: self.wall_time_s,
            peak_device_bytes: self.max_peak_device_bytes(),
            h2d_bytes: self.h2d_bytes,
            d2h_bytes: self.d2h_bytes,
            h2d_count: self.h2d_count,
            d2h_count: self.d2h_count,
            all_reduce_calls: self.all_reduce_calls,
            reduce_calls: self.reduce_calls,
            comm_bytes: self.comm_bytes,
            total_iterations: self.report.total_iterations(),
            converged_components: self.report.components.iter().filter(|c| c.converged).count(),
            components: self.report.components.len(),
        }
    }
}

/// Flat CSV projection of [`RunMetrics`]: one row per run, with
/// `peak_device_bytes` reduced to the per-rank maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub workers: usize,
    pub n_b: usize,
    pub q_s: usize,
    pub k: i64,
    pub eps: f64,
    pub max_iter: usize,
    pub fixed_iters: Option<usize>,
    pub seed: u64,
    pub path: String,
    pub orientation: String,
    pub device_budget_bytes: u64,
    pub transfer_cost_ns_per_byte: u64,
    pub wall_time_s: f64,
    pub peak_device_bytes: u64,
    pub h2d_bytes: u64,
    pub d2h_bytes: u64,
    pub h2d_count: u64,
    pub d2h_count: u64,
    pub all_reduce_calls: u64,
    pub reduce_calls: u64,
    pub comm_bytes: u64,
    pub total_iterations: usize,
    pub converged_components: usize,
    pub components: usize,
}

impl CsvRow {
    pub const HEADER: &'static str = "workers,n_b,q_s,k,eps,max_iter,fixed_iters,seed,path,\
orientation,device_budget_bytes,transfer_cost_ns_per_byte,wall_time_s,peak_device_bytes,\
h2d_bytes,d2h_bytes,h2d_count,d2h_count,all_reduce_calls,reduce_calls,comm_bytes,\
total_iterations,converged_components,components";

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.workers,
            self.n_b,
            self.q_s,
            self.k,
            self.eps,
            self.max_iter,
            self.fixed_iters.map_or(String::new(), |f| f.to_string()),
            self.seed,
            self.path,
            self.orientation,
            self.device_budget_bytes,
            self.transfer_cost_ns_per_byte,
            self.wall_time_s,
            self.peak_device_bytes,
            self.h2d_bytes,
            self.d2h_bytes,
            self.h2d_count,
            self.d2h_count,
            self.all_reduce_calls,
            self.reduce_calls,
            self.comm_bytes,
            self.total_iterations,
            self.converged_components,
            self.components,
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let want = Self::HEADER.split(',').count();
        if f.len() != want {
            return Err(Error::Parse(format!(
                "csv row has {} fields, expected {want}",
                f.len()
            )));
        }
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::Parse(format!("bad {what} `{s}`")))
        }
        Ok(CsvRow {
            workers: num(f[0], "workers")?,
            n_b: num(f[1], "n_b")?,
            q_s: num(f[2], "q_s")?,
            k: num(f[3], "k")?,
            eps: num(f[4], "eps")?,
            max_iter: num(f[5], "max_iter")?,
            fixed_iters: if f[6].is_empty() {
                None
            } else {
                Some(num(f[6], "fixed_iters")?)
            },
            seed: num(f[7], "seed")?,
            path: f[8].to_string(),
            orientation: f[9].to_string(),
            device_budget_bytes: num(f[10], "device_budget_bytes")?,
            transfer_cost_ns_per_byte: num(f[11], "transfer_cost_ns_per_byte")?,
            wall_time_s: num(f[12], "wall_time_s")?,
            peak_device_bytes: num(f[13], "peak_device_bytes")?,
            h2d_bytes: num(f[14], "h2d_bytes")?,
            d2h_bytes: num(f[15], "d2h_bytes")?,
            h2d_count: num(f[16], "h2d_count")?,
            d2h_count: num(f[17], "d2h_count")?,
            all_reduce_calls: num(f[18], "all_reduce_calls")?,
            reduce_calls: num(f[19], "reduce_calls")?,
            comm_bytes: num(f[20], "comm_bytes")?,
            total_iterations: num(f[21], "total_iterations")?,
            converged_components: num(f[22], "converged_components")?,
            components: num(f[23], "components")?,
        })
    }
}
