//! Files written for a run: metrics as JSON and CSV, histories as JSON lines
//! and a human-readable summary.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};

use crate::runner::{HistRecord, RunOutput};

pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let json = serde_json::to_string_pretty(out)?;
    fs::write(dir.join("metrics.json"), json)?;
    let mut csv = csv::Writer::from_path(dir.join("metrics.csv"))?;
    csv.write_record(["metric", "label", "value"])?;
    for (m, l, v) in out.metrics.rows() {
        csv.write_record([m, l, v])?;
    }
    csv.flush()?;
    write_histories(&out.records, &dir.join("histories.jsonl"))?;
    fs::write(dir.join("summary.txt"), summary(out))?;
    Ok(())
}

pub fn write_histories(records: &[HistRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_histories(path: &Path) -> Result<Vec<HistRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn summary(out: &RunOutput) -> String {
    let mut s = format!(
        "scenario {} seed {} ({:?}): {}/{} clients finished\n",
        out.scenario, out.seed, out.protocol, out.finished_clients, out.clients
    );
    if out.liveness_lost() {
        s += "  LIVENESS LOST: some clients never finished\n";
    }
    for (node, at) in &out.crashes {
        s += &format!("  node {node} crashed at tick {at}\n");
    }
    s += &out.metrics.summary();
    if let Some(c) = &out.check {
        s += &format!(
            "  linearizability: {} keys, brute force {} checked / {} over bound, construction {} checked / {} skipped, {} violations, {} disagreements\n",
            c.keys,
            c.brute_checked,
            c.brute_skipped,
            c.construction_checked,
            c.construction_skipped,
            c.violations.len(),
            c.disagreements.len()
        );
    }
    if let Some(a) = &out.audit {
        s += &format!("  audit: {} violations\n", a.violations.len());
    }
    s += &format!(
        "  max-register violations {}, runtime bound events {}\n",
        out.max_register_violations, out.runtime_bounds
    );
    s
}
