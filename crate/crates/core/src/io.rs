//! CSV readers and writers for traces, annotations, stimulus features and
//! decomposition outputs.
//!
//! * EDA: `subject_id,stimulus_id,sampling_hz,s0,s1,...` (no header; a first
//!   row starting with `subject_id` is skipped).
//! * Annotations: `subject_id,stimulus_id,valence,arousal` (optional header).
//! * Stimulus features: header `stimulus_id,f0,...,f{D-1}` then one row per
//!   stimulus; the header fixes `D`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{AnnotationRecord, DecomposedEda, EdaTrace, StimulusFeatures};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn open(path: &Path) -> Result<File, IoError> {
    File::open(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn create(path: &Path) -> Result<File, IoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| IoError::File {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }
    File::create(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn number(field: &str, line: usize, what: &str) -> Result<f64, IoError> {
    field.parse::<f64>().map_err(|_| IoError::Parse {
        line,
        msg: format!("{what}: '{field}' is not a number"),
    })
}

fn rows<R: Read>(r: R) -> impl Iterator<Item = (usize, Result<csv::StringRecord, csv::Error>)> {
    reader(r)
        .into_records()
        .enumerate()
        .map(|(i, rec)| (i + 1, rec))
}

pub fn parse_eda<R: Read>(r: R) -> Result<Vec<EdaTrace>, IoError> {
    let mut out = Vec::new();
    for (line, rec) in rows(r) {
        let rec = rec?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if line == 1 && rec.get(0) == Some("subject_id") {
            continue;
        }
        if rec.len() < 4 {
            return Err(IoError::Parse {
                line,
                msg: "expected subject_id,stimulus_id,sampling_hz and samples".into(),
            });
        }
        let hz = number(&rec[2], line, "sampling_hz")?;
        let samples = rec
            .iter()
            .skip(3)
            .filter(|f| !f.is_empty())
            .map(|f| number(f, line, "sample"))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(EdaTrace::new(&rec[0], &rec[1], hz, samples));
    }
    Ok(out)
}

pub fn read_eda(path: &Path) -> Result<Vec<EdaTrace>, IoError> {
    parse_eda(open(path)?)
}

pub fn write_eda<W: Write>(w: W, traces: &[EdaTrace]) -> Result<(), IoError> {
    let mut wr = csv::WriterBuilder::new().flexible(true).from_writer(w);
    for t in traces {
        let mut row = vec![t.subject_id.clone(), t.stimulus_id.clone(), t.sampling_hz.to_string()];
        row.extend(t.samples.iter().map(f64::to_string));
        wr.write_record(&row)?;
    }
    wr.flush().map_err(|source| IoError::File {
        path: "<eda>".into(),
        source,
    })?;
    Ok(())
}

pub fn parse_annotations<R: Read>(r: R) -> Result<Vec<AnnotationRecord>, IoError> {
    let mut out = Vec::new();
    for (line, rec) in rows(r) {
        let rec = rec?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if line == 1 && rec.get(0) == Some("subject_id") {
            continue;
        }
        if rec.len() != 4 {
            return Err(IoError::Parse {
                line,
                msg: format!("expected 4 fields, got {}", rec.len()),
            });
        }
        let v = number(&rec[2], line, "valence")?;
        let a = number(&rec[3], line, "arousal")?;
        let record = AnnotationRecord::new(&rec[0], &rec[1], v, a).map_err(|e| IoError::Parse {
            line,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, IoError> {
    parse_annotations(open(path)?)
}

pub fn write_annotations<W: Write>(w: W, records: &[AnnotationRecord]) -> Result<(), IoError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["subject_id", "stimulus_id", "valence", "arousal"])?;
    for r in records {
        wr.write_record([
            r.subject_id.clone(),
            r.stimulus_id.clone(),
            r.valence.to_string(),
            r.arousal.to_string(),
        ])?;
    }
    wr.flush().map_err(|source| IoError::File {
        path: "<annotations>".into(),
        source,
    })?;
    Ok(())
}

pub fn parse_stimulus_features<R: Read>(r: R) -> Result<Vec<StimulusFeatures>, IoError> {
    let mut out = Vec::new();
    let mut dim = None;
    for (line, rec) in rows(r) {
        let rec = rec?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let Some(d) = dim else {
            if rec.get(0) != Some("stimulus_id") {
                return Err(IoError::Parse {
                    line,
                    msg: "stimulus feature file must start with a stimulus_id,f0,... header".into(),
                });
            }
            dim = Some(rec.len() - 1);
            continue;
        };
        if rec.len() != d + 1 {
            return Err(IoError::Parse {
                line,
                msg: format!("expected {d} features, got {}", rec.len() - 1),
            });
        }
        let vector = rec
            .iter()
            .skip(1)
            .map(|f| number(f, line, "feature"))
            .collect::<Result<Vec<_>, _>>()?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(IoError::Parse {
                line,
                msg: "non-finite feature".into(),
            });
        }
        out.push(StimulusFeatures {
            stimulus_id: rec[0].to_string(),
            vector,
        });
    }
    Ok(out)
}

pub fn read_stimulus_features(path: &Path) -> Result<Vec<StimulusFeatures>, IoError> {
    parse_stimulus_features(open(path)?)
}

pub fn write_stimulus_features<W: Write>(w: W, rows: &[StimulusFeatures]) -> Result<(), IoError> {
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["stimulus_id".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    wr.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.stimulus_id.clone()];
        row.extend(r.vector.iter().map(f64::to_string));
        wr.write_record(&row)?;
    }
    wr.flush().map_err(|source| IoError::File {
        path: "<stimuli>".into(),
        source,
    })?;
    Ok(())
}

/// `t_s,origin,phasic,tonic,driver,residual`.
pub fn write_decomposition<W: Write>(w: W, d: &DecomposedEda, sampling_hz: f64) -> Result<(), IoError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t_s", "origin", "phasic", "tonic", "driver", "residual"])?;
    for i in 0..d.len() {
        wr.write_record([
            (i as f64 / sampling_hz).to_string(),
            d.origin[i].to_string(),
            d.phasic[i].to_string(),
            d.tonic[i].to_string(),
            d.driver[i].to_string(),
            d.residual[i].to_string(),
        ])?;
    }
    wr.flush().map_err(|source| IoError::File {
        path: "<decomposition>".into(),
        source,
    })?;
    Ok(())
}

/// Writes named equal-length columns with a header row.
pub fn write_columns<W: Write>(w: W, names: &[&str], columns: &[&[f64]]) -> Result<(), IoError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(names)?;
    let n = columns.first().map_or(0, |c| c.len());
    for i in 0..n {
        wr.write_record(columns.iter().map(|c| c[i].to_string()))?;
    }
    wr.flush().map_err(|source| IoError::File {
        path: "<columns>".into(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eda_accepts_crlf_and_variable_lengths() {
        let text = "s1,m1,50,1.0,1.1,1.2\r\ns2,m2,4,0.5,0.6\r\n";
        let traces = parse_eda(text.as_bytes()).unwrap();
        assert_eq!(traces.len(), 2);
        assert_eq!(traces[0].samples, vec![1.0, 1.1, 1.2]);
        assert_eq!(traces[1].sampling_hz, 4.0);
        let mut buf = Vec::new();
        write_eda(&mut buf, &traces).unwrap();
        assert_eq!(parse_eda(buf.as_slice()).unwrap(), traces);
    }

    #[test]
    fn eda_reports_bad_numbers() {
        let err = parse_eda("s,m,50,1.0,abc\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IoError::Parse { line: 1, .. }));
    }

    #[test]
    fn annotations_with_header_and_range_check() {
        let text = "subject_id,stimulus_id,valence,arousal\ns1,m1,2.5,7\n";
        let recs = parse_annotations(text.as_bytes()).unwrap();
        assert_eq!(recs[0].arousal, 7.0);
        assert!(parse_annotations("s1,m1,0.5,7\n".as_bytes()).is_err());
    }

    #[test]
    fn stimulus_header_fixes_dimension() {
        let text = "stimulus_id,f0,f1\nm1,0.1,0.2\nm2,0.3,0.4\n";
        let rows = parse_stimulus_features(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].vector, vec![0.3, 0.4]);
        assert!(parse_stimulus_features("stimulus_id,f0,f1\nm1,0.1\n".as_bytes()).is_err());
        assert!(parse_stimulus_features("m1,0.1\n".as_bytes()).is_err());
    }
}
