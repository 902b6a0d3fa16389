//! On-disk dataset layout.
//!
//! A dataset directory holds `flows.csv` (one metadata row per sample) and
//! `series.csv` (one row per time step, long format). Numbers are written
//! with nine fractional digits so that files are byte-reproducible.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::features::{MtsSample, SessionInfo, FEATURE_NAMES, NUM_FEATURES};
use crate::pcap::{to_display_ip, to_mapped};

pub const FLOWS_FILE: &str = "flows.csv";
pub const SERIES_FILE: &str = "series.csv";

pub const FLOWS_HEADER: [&str; 10] = [
    "flow_id",
    "src_ip",
    "src_port",
    "dst_ip",
    "dst_port",
    "protocol",
    "start_ts",
    "end_ts",
    "num_packets",
    "label",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: header mismatch, expected `{expected}`, found `{found}`")]
    HeaderMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: flow `{flow_id}` has seq_index {found} where {expected} was expected")]
    NonContiguous {
        path: PathBuf,
        flow_id: String,
        expected: usize,
        found: usize,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path} line {line}: expected {expected} fields, found {found}")]
    Ragged {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("unknown dataset profile `{0}` (expected ecg or wafer)")]
    UnknownProfile(String),
    #[error("dataset does not match the {profile} profile: {message}")]
    ProfileMismatch {
        profile: &'static str,
        message: String,
    },
}

/// Files written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub flows_path: PathBuf,
    pub series_path: PathBuf,
    pub num_flows: usize,
    pub num_rows: usize,
}

/// Decimal formatting used for every real in the dataset files.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.9}")
}

fn feature_names(d: usize) -> Vec<String> {
    if d == NUM_FEATURES {
        FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..d).map(|i| format!("f{i}")).collect()
    }
}

fn series_header(d: usize) -> Vec<String> {
    let mut h = vec!["flow_id".to_string(), "seq_index".to_string()];
    h.extend(feature_names(d));
    h.push("rel_ts".to_string());
    h
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DatasetError + '_ {
    move |source| DatasetError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

/// Writes `flows.csv` and `series.csv` into `out_dir`, creating it if needed.
///
/// All samples must share one feature width; an empty list writes the
/// TS-NFM headers.
pub fn write_dataset(
    samples: &[MtsSample],
    out_dir: impl AsRef<Path>,
) -> Result<Manifest, DatasetError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let d = samples.first().map_or(NUM_FEATURES, |s| s.d);
    if let Some(bad) = samples.iter().find(|s| s.d != d) {
        return Err(DatasetError::Parse {
            path: out_dir.to_path_buf(),
            line: 0,
            message: format!(
                "sample `{}` has width {} but the dataset has width {d}",
                bad.flow_id, bad.d
            ),
        });
    }

    let flows_path = out_dir.join(FLOWS_FILE);
    let mut flows = csv_writer(&flows_path)?;
    flows
        .write_record(FLOWS_HEADER)
        .map_err(csv_err(&flows_path))?;
    for s in samples {
        let (src_ip, src_port, dst_ip, dst_port, proto) = match &s.session {
            Some(sess) => (
                to_display_ip(sess.src_ip).to_string(),
                sess.src_port.to_string(),
                to_display_ip(sess.dst_ip).to_string(),
                sess.dst_port.to_string(),
                sess.transport.to_string(),
            ),
            None => Default::default(),
        };
        flows
            .write_record([
                s.flow_id.as_str(),
                &src_ip,
                &src_port,
                &dst_ip,
                &dst_port,
                &proto,
                &fmt_real(s.start_ts()),
                &fmt_real(s.end_ts()),
                &s.len().to_string(),
                &s.label,
            ])
            .map_err(csv_err(&flows_path))?;
    }
    flows.flush().map_err(io_err(&flows_path))?;

    let series_path = out_dir.join(SERIES_FILE);
    let mut series = csv_writer(&series_path)?;
    series
        .write_record(series_header(d))
        .map_err(csv_err(&series_path))?;
    let mut num_rows = 0;
    let mut record: Vec<String> = Vec::with_capacity(d + 3);
    for s in samples {
        for (i, row) in s.rows().enumerate() {
            record.clear();
            record.push(s.flow_id.clone());
            record.push(i.to_string());
            record.extend(row.iter().map(|&v| fmt_real(v)));
            record.push(fmt_real(s.rel_ts(i)));
            series
                .write_record(&record)
                .map_err(csv_err(&series_path))?;
            num_rows += 1;
        }
    }
    series.flush().map_err(io_err(&series_path))?;

    Ok(Manifest {
        flows_path,
        series_path,
        num_flows: samples.len(),
        num_rows,
    })
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file))
}

fn parse_num<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    field: &str,
    what: &str,
) -> Result<T, DatasetError> {
    field.trim().parse::<T>().map_err(|_| DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {what} `{field}`"),
    })
}

fn check_header(
    path: &Path,
    found: &csv::StringRecord,
    expected: &[String],
) -> Result<(), DatasetError> {
    if found.iter().ne(expected.iter().map(String::as_str)) {
        return Err(DatasetError::HeaderMismatch {
            path: path.to_path_buf(),
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

struct FlowMeta {
    flow_id: String,
    session: Option<SessionInfo>,
    start_ts: f64,
    num_packets: usize,
    label: String,
}

struct SeriesRows {
    d: usize,
    by_id: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

/// Reads long-format series rows. Rows of one id must be consecutive with
/// `seq_index` counting up from zero.
fn read_series(
    path: &Path,
    expected_header: Option<&[String]>,
) -> Result<SeriesRows, DatasetError> {
    let mut rdr = open_csv(path)?;
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    if let Some(expected) = expected_header {
        check_header(path, &header, expected)?;
    }
    if header.len() < 3 || &header[1] != "seq_index" {
        return Err(DatasetError::HeaderMismatch {
            path: path.to_path_buf(),
            expected: "<id>,seq_index,<features...>[,rel_ts]".into(),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let has_rel_ts = header.iter().last() == Some("rel_ts");
    let d = header.len() - 2 - usize::from(has_rel_ts);
    if d == 0 {
        return Err(DatasetError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "no feature columns".into(),
        });
    }

    let mut by_id: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    let mut current: Option<String> = None;
    for row in rdr.records() {
        let row = row.map_err(csv_err(path))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != header.len() {
            return Err(DatasetError::Ragged {
                path: path.to_path_buf(),
                line,
                expected: header.len(),
                found: row.len(),
            });
        }
        let id = row[0].to_string();
        let seq: usize = parse_num(path, line, &row[1], "seq_index")?;
        if current.as_deref() != Some(id.as_str()) && by_id.contains_key(&id) {
            // The id reappears after another id: its rows are not contiguous.
            let expected = by_id[&id].1.len();
            return Err(DatasetError::NonContiguous {
                path: path.to_path_buf(),
                flow_id: id,
                expected,
                found: seq,
            });
        }
        let entry = by_id.entry(id.clone()).or_default();
        let expected = entry.1.len();
        if seq != expected {
            return Err(DatasetError::NonContiguous {
                path: path.to_path_buf(),
                flow_id: id,
                expected,
                found: seq,
            });
        }
        for j in 0..d {
            entry
                .0
                .push(parse_num(path, line, &row[2 + j], "feature value")?);
        }
        let rel = if has_rel_ts {
            parse_num(path, line, &row[2 + d], "rel_ts")?
        } else {
            seq as f64
        };
        entry.1.push(rel);
        current = Some(id);
    }
    Ok(SeriesRows { d, by_id })
}

fn parse_ip(path: &Path, line: u64, field: &str) -> Result<std::net::Ipv6Addr, DatasetError> {
    field
        .parse::<IpAddr>()
        .map(to_mapped)
        .map_err(|_| DatasetError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("bad address `{field}`"),
        })
}

fn read_flows(path: &Path) -> Result<Vec<FlowMeta>, DatasetError> {
    let mut rdr = open_csv(path)?;
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    let expected: Vec<String> = FLOWS_HEADER.iter().map(|s| s.to_string()).collect();
    check_header(path, &header, &expected)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err(path))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != FLOWS_HEADER.len() {
            return Err(DatasetError::Ragged {
                path: path.to_path_buf(),
                line,
                expected: FLOWS_HEADER.len(),
                found: row.len(),
            });
        }
        let session = if row[1].is_empty() {
            None
        } else {
            Some(SessionInfo {
                src_ip: parse_ip(path, line, &row[1])?,
                src_port: parse_num(path, line, &row[2], "port")?,
                dst_ip: parse_ip(path, line, &row[3])?,
                dst_port: parse_num(path, line, &row[4], "port")?,
                transport: parse_num(path, line, &row[5], "protocol")?,
            })
        };
        out.push(FlowMeta {
            flow_id: row[0].to_string(),
            session,
            start_ts: parse_num(path, line, &row[6], "start_ts")?,
            num_packets: parse_num(path, line, &row[8], "num_packets")?,
            label: row[9].to_string(),
        });
    }
    Ok(out)
}

/// Inverse of [`write_dataset`]. Samples come back in `flows.csv` order.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<MtsSample>, DatasetError> {
    let dir = dir.as_ref();
    let flows_path = dir.join(FLOWS_FILE);
    let series_path = dir.join(SERIES_FILE);
    let metas = read_flows(&flows_path)?;

    // Width is implied by the series header; TS-NFM data has 13 named columns.
    let mut rdr = open_csv(&series_path)?;
    let header = rdr.headers().map_err(csv_err(&series_path))?.clone();
    let d = header.len().saturating_sub(3).max(1);
    drop(rdr);
    let expected = series_header(d);
    let mut series = read_series(&series_path, Some(&expected))?;

    let mut samples = Vec::with_capacity(metas.len());
    for meta in metas {
        let (values, rel) = series.by_id.remove(&meta.flow_id).unwrap_or_default();
        if rel.len() != meta.num_packets || rel.is_empty() {
            return Err(DatasetError::Parse {
                path: series_path.clone(),
                line: 0,
                message: format!(
                    "flow `{}` declares {} packets but has {} series rows",
                    meta.flow_id,
                    meta.num_packets,
                    rel.len()
                ),
            });
        }
        let timestamps = rel.iter().map(|r| meta.start_ts + r).collect();
        samples.push(MtsSample {
            flow_id: meta.flow_id,
            values,
            d: series.d,
            timestamps,
            label: meta.label,
            session: meta.session,
        });
    }
    if let Some(orphan) = series.by_id.keys().min() {
        return Err(DatasetError::Parse {
            path: series_path,
            line: 0,
            message: format!("series rows for `{orphan}` have no entry in {FLOWS_FILE}"),
        });
    }
    Ok(samples)
}

/// Shape expectations for known external benchmark datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Ecg,
    Wafer,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Ecg => "ecg",
            Profile::Wafer => "wafer",
        }
    }

    pub fn d(self) -> usize {
        match self {
            Profile::Ecg => 2,
            Profile::Wafer => 6,
        }
    }

    pub fn max_len(self) -> usize {
        match self {
            Profile::Ecg => 152,
            Profile::Wafer => 198,
        }
    }

    pub fn num_samples(self) -> usize {
        match self {
            Profile::Ecg => 200,
            Profile::Wafer => 1194,
        }
    }

    /// Class sizes, largest first.
    pub fn class_counts(self) -> [usize; 2] {
        match self {
            Profile::Ecg => [133, 67],
            Profile::Wafer => [1067, 127],
        }
    }

    pub fn validate(self, samples: &[MtsSample]) -> Result<(), DatasetError> {
        let fail = |message: String| DatasetError::ProfileMismatch {
            profile: self.name(),
            message,
        };
        if let Some(s) = samples.iter().find(|s| s.d != self.d()) {
            return Err(fail(format!(
                "`{}` has {} features, expected {}",
                s.flow_id,
                s.d,
                self.d()
            )));
        }
        if samples.len() != self.num_samples() {
            return Err(fail(format!(
                "{} samples, expected {}",
                samples.len(),
                self.num_samples()
            )));
        }
        let max_len = samples.iter().map(MtsSample::len).max().unwrap_or(0);
        if max_len != self.max_len() {
            return Err(fail(format!(
                "longest series has {max_len} steps, expected {}",
                self.max_len()
            )));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in samples {
            *counts.entry(&s.label).or_default() += 1;
        }
        let mut sizes: Vec<usize> = counts.values().copied().collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        if sizes != self.class_counts() {
            return Err(fail(format!(
                "class sizes {sizes:?}, expected {:?}",
                self.class_counts()
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for Profile {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ecg" => Ok(Profile::Ecg),
            "wafer" => Ok(Profile::Wafer),
            _ => Err(DatasetError::UnknownProfile(s.to_string())),
        }
    }
}

/// Loads an external long-format MTS dataset.
///
/// `series` has header `<id>,seq_index,<d feature columns>[,rel_ts]`;
/// `labels` is any CSV with a `series_id` (or `flow_id`) column and a
/// `label` column. Without `rel_ts`, rows are spaced one second apart.
pub fn load_external_mts(
    series: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    expect: Option<Profile>,
) -> Result<Vec<MtsSample>, DatasetError> {
    let series_path = series.as_ref();
    let labels_path = labels.as_ref();
    let mut rows = read_series(series_path, None)?;

    let mut rdr = open_csv(labels_path)?;
    let header = rdr.headers().map_err(csv_err(labels_path))?.clone();
    let find = |names: &[&str]| header.iter().position(|h| names.contains(&h));
    let (Some(id_col), Some(label_col)) = (find(&["series_id", "flow_id"]), find(&["label"]))
    else {
        return Err(DatasetError::HeaderMismatch {
            path: labels_path.to_path_buf(),
            expected: "series_id,...,label".into(),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    };

    let mut samples = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err(labels_path))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != header.len() {
            return Err(DatasetError::Ragged {
                path: labels_path.to_path_buf(),
                line,
                expected: header.len(),
                found: row.len(),
            });
        }
        let id = row[id_col].to_string();
        let Some((values, timestamps)) = rows.by_id.remove(&id) else {
            return Err(DatasetError::Parse {
                path: series_path.to_path_buf(),
                line: 0,
                message: format!("no series rows for `{id}`"),
            });
        };
        samples.push(MtsSample {
            flow_id: id,
            values,
            d: rows.d,
            timestamps,
            label: row[label_col].to_string(),
            session: None,
        });
    }
    if let Some(p) = expect {
        p.validate(&samples)?;
    }
    Ok(samples)
}

/// Writes an external-style dataset (`series.csv` without `rel_ts`,
/// `labels.csv` with `series_id,label`).
pub fn write_external(
    samples: &[MtsSample],
    dir: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf), DatasetError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let series_path = dir.join(SERIES_FILE);
    let labels_path = dir.join("labels.csv");
    let d = samples.first().map_or(1, |s| s.d);
    let mut w = BufWriter::new(File::create(&series_path).map_err(io_err(&series_path))?);
    let mut header = vec!["series_id".to_string(), "seq_index".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    writeln!(w, "{}", header.join(",")).map_err(io_err(&series_path))?;
    for s in samples {
        for (i, row) in s.rows().enumerate() {
            let vals: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
            writeln!(w, "{},{i},{}", s.flow_id, vals.join(",")).map_err(io_err(&series_path))?;
        }
    }
    w.flush().map_err(io_err(&series_path))?;
    let mut w = BufWriter::new(File::create(&labels_path).map_err(io_err(&labels_path))?);
    writeln!(w, "series_id,label").map_err(io_err(&labels_path))?;
    for s in samples {
        writeln!(w, "{},{}", s.flow_id, s.label).map_err(io_err(&labels_path))?;
    }
    w.flush().map_err(io_err(&labels_path))?;
    Ok((series_path, labels_path))
}
