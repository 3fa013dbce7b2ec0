//! Run artefacts: `report.json` with the full run and `rounds.csv` with one
//! row per evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::metrics::RoundRecord;
use crate::runtime::RunReport;

pub const REPORT_FILE: &str = "report.json";
pub const ROUNDS_FILE: &str = "rounds.csv";

/// Header of the round log for `clients` clients.
pub fn csv_header(clients: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "round",
        "eps_plus",
        "eps_minus",
        "tau",
        "cloud_c_acc",
        "cloud_s_acc",
        "mean_client_c_acc",
        "mean_client_s_acc",
        "ratio_cosine",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..clients).map(|i| format!("d_cka_{i}")));
    h
}

fn csv_row(r: &RoundRecord) -> Vec<String> {
    let mut row = vec![
        r.round.to_string(),
        r.eps_plus.to_string(),
        r.eps_minus.to_string(),
        r.tau.to_string(),
        r.cloud_c_acc.to_string(),
        r.cloud_s_acc.to_string(),
        r.mean_client_c_acc().to_string(),
        r.mean_client_s_acc().to_string(),
        r.ratio_cosine.to_string(),
    ];
    row.extend(r.d_cka.iter().map(f64::to_string));
    row
}

pub fn write_rounds_csv(records: &[RoundRecord], clients: usize, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(out);
    w.write_record(csv_header(clients))?;
    for r in records {
        w.write_record(csv_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json(report: &RunReport, out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(out, report)?;
    Ok(())
}

/// Writes both artefacts into `dir`, creating it if needed.
pub fn write_run(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = BufWriter::new(File::create(dir.join(REPORT_FILE))?);
    write_report_json(report, &mut json)?;
    json.flush()?;
    let csv = BufWriter::new(File::create(dir.join(ROUNDS_FILE))?);
    write_rounds_csv(&report.records, report.config.clients, csv)
}
