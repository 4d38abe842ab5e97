//! CSV results table and JSON-lines run log.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{config_err, Error, Result};
use crate::harness::config::{ExperimentConfig, RunConfig};
use crate::harness::run::{execute_run, RunReport};
use crate::harness::experiments::candidate_runs;
use crate::rng::SeedTuple;

pub const CSV_COLUMNS: [&str; 16] = [
    "config_hash",
    "n",
    "m",
    "r",
    "k",
    "ell",
    "epsilon",
    "delta",
    "paradigm",
    "seed",
    "excess_loss",
    "stderr",
    "phi_opt",
    "phi_gen",
    "bound_value",
    "wall_ms",
];

/// Fields of one CSV row. `wall_ms` is left empty unless `timing` is set so
/// that reruns are byte-identical.
pub fn csv_fields(r: &RunReport, timing: bool) -> Vec<String> {
    let c = &r.config;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    vec![
        r.config_hash.clone(),
        c.n.to_string(),
        c.m.to_string(),
        c.r.to_string(),
        c.k.to_string(),
        c.ell.to_string(),
        c.epsilon.to_string(),
        c.delta.to_string(),
        c.paradigm.as_str().to_string(),
        r.seeds.encode(),
        r.excess_loss.to_string(),
        r.stderr.to_string(),
        opt(r.risk.as_ref().map(|k| k.phi_opt)),
        opt(r.risk.as_ref().map(|k| k.phi_gen)),
        r.bound_value.to_string(),
        if timing { format!("{:.3}", r.wall_ms) } else { String::new() },
    ]
}

/// Render reports as CSV text with the fixed header.
pub fn csv_string(reports: &[RunReport], timing: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        w.write_record(csv_fields(r, timing))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Serialized writer for results and the run log.
pub struct ResultsWriter {
    csv: csv::Writer<File>,
    log: BufWriter<File>,
    timing: bool,
}

impl ResultsWriter {
    pub fn create(csv_path: &Path, log_path: &Path, timing: bool) -> Result<Self> {
        for p in [csv_path, log_path] {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
        }
        let mut csv = csv::Writer::from_path(csv_path)?;
        csv.write_record(CSV_COLUMNS)?;
        Ok(Self {
            csv,
            log: BufWriter::new(File::create(log_path)?),
            timing,
        })
    }

    pub fn write(&mut self, report: &RunReport) -> Result<()> {
        self.csv.write_record(csv_fields(report, self.timing))?;
        serde_json::to_writer(&mut self.log, report)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.csv.flush()?;
        self.log.flush()?;
        Ok(())
    }
}

/// Outcome of replaying a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub rows: usize,
    pub mismatches: Vec<usize>,
}

/// Regenerate every row of a CSV table from its config hash and seeds and
/// compare byte for byte. Rows whose hash the configuration cannot produce
/// are errors. Rows with a recorded wall time are compared with it blanked.
pub fn replay(cfg: &ExperimentConfig, csv_text: &str) -> Result<ReplayOutcome> {
    let mut by_hash: HashMap<String, RunConfig> = HashMap::new();
    for rc in candidate_runs(cfg)? {
        by_hash.entry(rc.hash()).or_insert(rc);
    }
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(csv_text.as_bytes());
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(config_err("replay: unexpected CSV header"));
    }
    let mut rows = 0;
    let mut mismatches = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        rows += 1;
        let hash = &rec[0];
        let rc = by_hash
            .get(hash)
            .ok_or_else(|| config_err(format!("replay: row {} has unknown config hash {hash}", i + 1)))?;
        let seeds = SeedTuple::decode(&rec[9]).ok_or_else(|| config_err(format!("replay: row {} has a malformed seed", i + 1)))?;
        let report = execute_run(rc, &seeds)?;
        let mut fresh = csv_fields(&report, false);
        let mut old: Vec<String> = rec.iter().map(str::to_string).collect();
        fresh[15].clear();
        old[15].clear();
        if fresh != old {
            mismatches.push(i + 1);
        }
    }
    Ok(ReplayOutcome { rows, mismatches })
}
