//! Smart-meter ingestion and the data protocol: EV labels from the charger
//! sub-meter, per-home chronological split, sliding windows and z-scoring.

mod windows;

pub use windows::{
    apply_scaler, build_windows, fit_scaler, write_windows, HomeStats, Scaler, WindowSet, MIN_STD,
};

use crate::error::{Error, Result};
use chrono::{NaiveDateTime, TimeDelta, Timelike};
use std::collections::BTreeMap;
use std::io::{Read, Write};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";

/// EV sub-meter power above which a minute counts as charging.
pub const DEFAULT_LABEL_THRESHOLD_KW: f64 = 3.0;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct MeterRecord {
    pub home_id: String,
    pub timestamp: NaiveDateTime,
    pub grid_load_kw: f64,
    pub ev_load_kw: Option<f64>,
}

/// One home's records in timestamp order.
#[derive(Debug, Clone, PartialEq)]
pub struct MeterSeries {
    pub home_id: String,
    pub records: Vec<MeterRecord>,
    /// Indices `i` where record `i` does not follow record `i - 1` by exactly
    /// one minute.
    pub gaps: Vec<usize>,
}

impl MeterSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_ev_load(&self) -> bool {
        self.records.iter().all(|r| r.ev_load_kw.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub home_id: String,
    pub timestamps: Vec<NaiveDateTime>,
    pub loads: Vec<f64>,
    /// 1 while the EV is charging. All zero when `labeled` is false.
    pub labels: Vec<u8>,
    pub gaps: Vec<usize>,
    pub labeled: bool,
}

impl LabeledSeries {
    pub fn len(&self) -> usize {
        self.loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loads.is_empty()
    }

    pub fn start_timestamp(&self) -> Option<NaiveDateTime> {
        self.timestamps.first().copied()
    }

    /// Sub-series over `range`, with gap indices rebased.
    pub fn slice(&self, range: std::ops::Range<usize>) -> LabeledSeries {
        let gaps = self
            .gaps
            .iter()
            .filter(|&&g| g > range.start && g < range.end)
            .map(|g| g - range.start)
            .collect();
        LabeledSeries {
            home_id: self.home_id.clone(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            loads: self.loads[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            gaps,
            labeled: self.labeled,
        }
    }
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%d %H:%M:%S",
    ];
    let raw = raw.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .filter(|ts| ts.second() == 0 && ts.nanosecond() == 0)
}

fn find_gaps(timestamps: impl Iterator<Item = NaiveDateTime>) -> Vec<usize> {
    let mut gaps = Vec::new();
    let mut prev: Option<NaiveDateTime> = None;
    for (i, ts) in timestamps.enumerate() {
        if let Some(p) = prev {
            if ts - p != TimeDelta::minutes(1) {
                gaps.push(i);
            }
        }
        prev = Some(ts);
    }
    gaps
}

/// Groups records by home, sorts each home by timestamp and records minute
/// gaps. Duplicate `(home_id, timestamp)` pairs are rejected.
pub fn group_records(records: Vec<MeterRecord>) -> Result<BTreeMap<String, MeterSeries>> {
    let mut by_home: BTreeMap<String, Vec<MeterRecord>> = BTreeMap::new();
    for r in records {
        by_home.entry(r.home_id.clone()).or_default().push(r);
    }
    by_home
        .into_iter()
        .map(|(home_id, mut records)| {
            records.sort_by_key(|r| r.timestamp);
            if let Some(w) = records.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
                return Err(Error::DuplicateRecord {
                    home_id,
                    timestamp: format_timestamp(&w[0].timestamp),
                });
            }
            let gaps = find_gaps(records.iter().map(|r| r.timestamp));
            Ok((home_id.clone(), MeterSeries { home_id, records, gaps }))
        })
        .collect()
}

fn parse_load(raw: &str, column: &str, line: u64) -> Result<f64> {
    let value: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("{column}: cannot parse {raw:?} as a number"),
    })?;
    if !value.is_finite() || value < 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("{column}: must be a finite nonnegative kW value, got {value}"),
        });
    }
    Ok(value)
}

/// Reads `home_id,timestamp,grid_load_kw[,ev_load_kw]` CSV. Lines starting
/// with `#` are provenance comments and skipped.
pub fn parse_meter_csv<R: Read>(source: R) -> Result<BTreeMap<String, MeterSeries>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = ["home_id", "timestamp", "grid_load_kw"]
        .into_iter()
        .filter(|c| column(c).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "missing required column(s): {}",
            missing.join(", ")
        )));
    }
    let (home_col, ts_col, grid_col) = (
        column("home_id").unwrap(),
        column("timestamp").unwrap(),
        column("grid_load_kw").unwrap(),
    );
    let ev_col = column("ev_load_kw");

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let home_id = field(home_col).to_string();
        if home_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty home_id".into(),
            });
        }
        let timestamp = parse_timestamp(field(ts_col)).ok_or_else(|| Error::Parse {
            line,
            message: format!("timestamp {:?} is not ISO-8601 at minute precision", field(ts_col)),
        })?;
        let grid_load_kw = parse_load(field(grid_col), "grid_load_kw", line)?;
        let ev_load_kw = match ev_col.map(field) {
            None | Some("") => None,
            Some(raw) => Some(parse_load(raw, "ev_load_kw", line)?),
        };
        records.push(MeterRecord {
            home_id,
            timestamp,
            grid_load_kw,
            ev_load_kw,
        });
    }
    group_records(records)
}

pub fn read_meter_file(path: &std::path::Path) -> Result<BTreeMap<String, MeterSeries>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    parse_meter_csv(std::io::BufReader::new(file))
}

/// Writes records in the ingest format. Each `comments` line is emitted as
/// `# line` before the header.
pub fn write_meter_csv<W: Write>(
    records: &[MeterRecord],
    comments: &[String],
    mut out: W,
) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "home_id,timestamp,grid_load_kw,ev_load_kw")?;
    for r in records {
        write!(
            out,
            "{},{},{:.4},",
            r.home_id,
            format_timestamp(&r.timestamp),
            r.grid_load_kw
        )?;
        match r.ev_load_kw {
            Some(ev) => writeln!(out, "{ev:.4}")?,
            None => writeln!(out)?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Marks each minute charging iff its EV load is strictly above `threshold_kw`.
pub fn label_events(series: &MeterSeries, threshold_kw: f64) -> Result<LabeledSeries> {
    let labels = series
        .records
        .iter()
        .map(|r| {
            r.ev_load_kw
                .map(|ev| u8::from(ev > threshold_kw))
                .ok_or_else(|| Error::Labeling {
                    home_id: series.home_id.clone(),
                    message: format!("no ev_load_kw at {}", format_timestamp(&r.timestamp)),
                })
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(LabeledSeries {
        labels,
        labeled: true,
        ..unlabeled(series)
    })
}

/// Series for inference on meters without an EV sub-meter.
pub fn unlabeled(series: &MeterSeries) -> LabeledSeries {
    LabeledSeries {
        home_id: series.home_id.clone(),
        timestamps: series.records.iter().map(|r| r.timestamp).collect(),
        loads: series.records.iter().map(|r| r.grid_load_kw).collect(),
        labels: vec![0; series.len()],
        gaps: series.gaps.clone(),
        labeled: false,
    }
}

/// First `floor(n · train_fraction)` records train, the rest test.
pub fn chronological_split(
    series: &LabeledSeries,
    train_fraction: f64,
) -> Result<(LabeledSeries, LabeledSeries)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = series.len();
    if n < 2 {
        return Err(Error::Split(format!(
            "home {} has {n} record(s), at least 2 are needed",
            series.home_id
        )));
    }
    let cut = (n as f64 * train_fraction).floor() as usize;
    if cut == 0 || cut == n {
        return Err(Error::Split(format!(
            "home {}: fraction {train_fraction} of {n} records leaves an empty side",
            series.home_id
        )));
    }
    Ok((series.slice(0..cut), series.slice(cut..n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "home_id,timestamp,grid_load_kw,ev_load_kw\n\
        h1,2018-01-01T00:02,1.0,0.0\n\
        h1,2018-01-01T00:00,0.5,0.0\n\
        h1,2018-01-01T00:01,4.0,3.3\n";

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    fn series_with_ev(ev: &[f64]) -> MeterSeries {
        let start = ts("2018-03-01T12:00");
        let records = ev
            .iter()
            .enumerate()
            .map(|(i, &e)| MeterRecord {
                home_id: "h".into(),
                timestamp: start + TimeDelta::minutes(i as i64),
                grid_load_kw: 0.5 + e,
                ev_load_kw: Some(e),
            })
            .collect();
        group_records(records).unwrap().remove("h").unwrap()
    }

    #[test]
    fn parses_and_sorts_one_home() {
        let homes = parse_meter_csv(CSV.as_bytes()).unwrap();
        assert_eq!(homes.len(), 1);
        let s = &homes["h1"];
        assert_eq!(s.len(), 3);
        let loads: Vec<f64> = s.records.iter().map(|r| r.grid_load_kw).collect();
        assert_eq!(loads, vec![0.5, 4.0, 1.0]);
        assert!(s.gaps.is_empty());
        assert!(s.has_ev_load());
    }

    #[test]
    fn duplicate_timestamp_is_named() {
        let csv = format!("{CSV}h1,2018-01-01T00:01,2.0,0.0\n");
        let err = parse_meter_csv(csv.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("h1") && msg.contains("2018-01-01T00:01"), "{msg}");
    }

    #[test]
    fn schema_and_row_errors() {
        let err = parse_meter_csv("home_id,grid_load_kw\nh,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("timestamp")));

        let bad = "home_id,timestamp,grid_load_kw\nh,2018-01-01T00:00,1\nh,2018-01-01T00:01,abc\n";
        match parse_meter_csv(bad.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }

        let neg = "home_id,timestamp,grid_load_kw\nh,2018-01-01T00:00,-1\n";
        assert!(parse_meter_csv(neg.as_bytes()).is_err());
        let secs = "home_id,timestamp,grid_load_kw\nh,2018-01-01T00:00:30,1\n";
        assert!(parse_meter_csv(secs.as_bytes()).is_err());
    }

    #[test]
    fn comments_and_missing_ev_column() {
        let csv = "# seed = 3\nhome_id,timestamp,grid_load_kw\nh,2018-01-01 00:00,1\nh,2018-01-01T00:05,2\n";
        let homes = parse_meter_csv(csv.as_bytes()).unwrap();
        let s = &homes["h"];
        assert!(!s.has_ev_load());
        assert_eq!(s.gaps, vec![1]);
        assert!(matches!(
            label_events(s, 3.0),
            Err(Error::Labeling { ref home_id, .. }) if home_id == "h"
        ));
    }

    #[test]
    fn labels_are_strictly_above_threshold() {
        let s = label_events(&series_with_ev(&[3.3, 3.0, 0.0, 7.2]), 3.0).unwrap();
        assert_eq!(s.labels, vec![1, 0, 0, 1]);
        // idempotent
        assert_eq!(label_events(&series_with_ev(&[3.3, 3.0, 0.0, 7.2]), 3.0).unwrap(), s);
    }

    #[test]
    fn split_uses_floor_and_keeps_order() {
        let s = label_events(&series_with_ev(&[0.0; 10]), 3.0).unwrap();
        let (train, test) = chronological_split(&s, 0.8).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(train.timestamps[..], s.timestamps[..8]);
        assert_eq!(test.timestamps[..], s.timestamps[8..]);

        let s5 = label_events(&series_with_ev(&[0.0; 5]), 3.0).unwrap();
        let (train, test) = chronological_split(&s5, 0.8).unwrap();
        assert_eq!((train.len(), test.len()), (4, 1));

        let s1 = label_events(&series_with_ev(&[0.0]), 3.0).unwrap();
        assert!(matches!(chronological_split(&s1, 0.8), Err(Error::Split(_))));
        assert!(chronological_split(&s, 1.0).is_err());
    }

    #[test]
    fn slice_rebases_gaps() {
        let mut s = label_events(&series_with_ev(&[0.0; 10]), 3.0).unwrap();
        s.gaps = vec![3, 7];
        let tail = s.slice(5..10);
        assert_eq!(tail.gaps, vec![2]);
        let head = s.slice(0..3);
        assert!(head.gaps.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let homes = parse_meter_csv(CSV.as_bytes()).unwrap();
        let records: Vec<MeterRecord> = homes["h1"].records.clone();
        let mut buf = Vec::new();
        write_meter_csv(&records, &["k = 1".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# k = 1\nhome_id,timestamp"));
        assert_eq!(parse_meter_csv(buf.as_slice()).unwrap(), homes);
    }
}
