use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use csv::{ReaderBuilder, StringRecord, WriterBuilder};

use super::{CycleRecord, Sample, StageRange, StageTable};
use crate::error::{Error, Result};

pub const TELEMETRY_HEADER: [&str; 6] = [
    "battery_id",
    "cycle_index",
    "time_s",
    "voltage_v",
    "current_a",
    "temperature_c",
];
pub const LABELS_HEADER: [&str; 3] = ["battery_id", "cycle_index", "capacity_ah"];
pub const STAGE_TABLE_HEADER: [&str; 4] = ["battery_id", "stage_id", "first_cycle", "last_cycle"];

struct CsvRows<'a> {
    path: &'a Path,
    reader: csv::Reader<File>,
}

impl<'a> CsvRows<'a> {
    fn open(path: &'a Path, header: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = ReaderBuilder::new().has_headers(true).from_reader(file);
        let found = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if found.iter().ne(header.iter().copied()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!(
                    "expected header `{}`, found `{}`",
                    header.join(","),
                    found.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        Ok(Self { path, reader })
    }

    fn for_each(mut self, mut f: impl FnMut(&Row<'_>) -> Result<()>) -> Result<()> {
        let mut record = StringRecord::new();
        loop {
            match self.reader.read_record(&mut record) {
                Ok(false) => return Ok(()),
                Ok(true) => {
                    let line = record.position().map_or(0, |p| p.line());
                    f(&Row {
                        path: self.path,
                        line,
                        record: &record,
                    })?;
                }
                Err(e) => return Err(csv_error(self.path, e)),
            }
        }
    }
}

struct Row<'a> {
    path: &'a Path,
    line: u64,
    record: &'a StringRecord,
}

impl Row<'_> {
    fn error(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message,
        }
    }

    fn str(&self, idx: usize, name: &str) -> Result<&str> {
        let v = self.record.get(idx).unwrap_or("").trim();
        if v.is_empty() {
            return Err(self.error(format!("missing value for `{name}`")));
        }
        Ok(v)
    }

    fn u32(&self, idx: usize, name: &str) -> Result<u32> {
        let v = self.str(idx, name)?;
        v.parse().map_err(|_| {
            self.error(format!(
                "`{name}` must be a non-negative integer, got `{v}`"
            ))
        })
    }

    fn f64(&self, idx: usize, name: &str) -> Result<f64> {
        let v = self.str(idx, name)?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(self.error(format!("`{name}` must be a finite number, got `{v}`"))),
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Parses a long-format telemetry CSV into validated, unlabeled cycles
/// sorted by (battery, cycle).
pub fn load_telemetry(path: &Path) -> Result<Vec<CycleRecord>> {
    let mut grouped: BTreeMap<(String, u32), Vec<Sample>> = BTreeMap::new();
    CsvRows::open(path, &TELEMETRY_HEADER)?.for_each(|row| {
        let battery = row.str(0, "battery_id")?.to_string();
        let cycle = row.u32(1, "cycle_index")?;
        if cycle == 0 {
            return Err(row.error("`cycle_index` is 1-based".into()));
        }
        let sample = Sample {
            time_s: row.f64(2, "time_s")?,
            voltage_v: row.f64(3, "voltage_v")?,
            current_a: row.f64(4, "current_a")?,
            temperature_c: row.f64(5, "temperature_c")?,
        };
        grouped.entry((battery, cycle)).or_default().push(sample);
        Ok(())
    })?;
    grouped
        .into_iter()
        .map(|((battery_id, cycle_index), samples)| {
            let record = CycleRecord {
                battery_id,
                cycle_index,
                samples,
                capacity_ah: None,
            };
            record.validate()?;
            Ok(record)
        })
        .collect()
}

/// Parses a labels CSV into a map keyed by (battery, cycle).
pub fn load_labels(path: &Path) -> Result<BTreeMap<(String, u32), f64>> {
    let mut labels = BTreeMap::new();
    CsvRows::open(path, &LABELS_HEADER)?.for_each(|row| {
        let battery = row.str(0, "battery_id")?.to_string();
        let cycle = row.u32(1, "cycle_index")?;
        let cap = row.f64(2, "capacity_ah")?;
        if cap <= 0.0 {
            return Err(row.error(format!("capacity must be positive, got {cap}")));
        }
        if labels.insert((battery.clone(), cycle), cap).is_some() {
            return Err(Error::validation(format!(
                "duplicate label for battery {battery} cycle {cycle}"
            )));
        }
        Ok(())
    })?;
    Ok(labels)
}

/// Loads telemetry and, when given, attaches capacity labels.
pub fn load_cycles(telemetry_path: &Path, labels_path: Option<&Path>) -> Result<Vec<CycleRecord>> {
    let mut records = load_telemetry(telemetry_path)?;
    if let Some(lp) = labels_path {
        let labels = load_labels(lp)?;
        for r in &mut records {
            r.capacity_ah = labels.get(&(r.battery_id.clone(), r.cycle_index)).copied();
        }
        let unused = labels
            .keys()
            .filter(|(b, c)| {
                !records
                    .iter()
                    .any(|r| &r.battery_id == b && r.cycle_index == *c)
            })
            .count();
        if unused > 0 {
            log::warn!("{unused} label rows have no matching telemetry cycle");
        }
    }
    Ok(records)
}

pub fn load_stage_table(path: &Path) -> Result<StageTable> {
    let mut entries = Vec::new();
    CsvRows::open(path, &STAGE_TABLE_HEADER)?.for_each(|row| {
        entries.push(StageRange {
            battery_id: row.str(0, "battery_id")?.to_string(),
            stage_id: row.u32(1, "stage_id")?,
            first_cycle: row.u32(2, "first_cycle")?,
            last_cycle: row.u32(3, "last_cycle")?,
        });
        Ok(())
    })?;
    StageTable::new(entries)
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(WriterBuilder::new().from_writer(file))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| csv_error(path, e)
}

pub fn write_telemetry_csv(path: &Path, records: &[CycleRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TELEMETRY_HEADER).map_err(write_err(path))?;
    for r in records {
        for s in &r.samples {
            w.write_record([
                r.battery_id.clone(),
                r.cycle_index.to_string(),
                s.time_s.to_string(),
                s.voltage_v.to_string(),
                s.current_a.to_string(),
                s.temperature_c.to_string(),
            ])
            .map_err(write_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_labels_csv(path: &Path, records: &[CycleRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(LABELS_HEADER).map_err(write_err(path))?;
    for r in records {
        if let Some(cap) = r.capacity_ah {
            w.write_record([
                r.battery_id.clone(),
                r.cycle_index.to_string(),
                cap.to_string(),
            ])
            .map_err(write_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_stage_table_csv(path: &Path, table: &StageTable) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(STAGE_TABLE_HEADER)
        .map_err(write_err(path))?;
    for e in table.entries() {
        w.write_record([
            e.battery_id.clone(),
            e.stage_id.to_string(),
            e.first_cycle.to_string(),
            e.last_cycle.to_string(),
        ])
        .map_err(write_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
