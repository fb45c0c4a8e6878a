//! Caption-pair records in CSV and JSONL. Parsing is strict: any deviation
//! from the documented grammar yields an error naming the line, never a
//! silently dropped or truncated row.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::NumioError;

pub const RECORD_FIELDS: [&str; 6] =
    ["caption_id", "image_id", "text_en", "text_bn", "similarity", "valid"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionPairRecord {
    pub caption_id: u64,
    pub image_id: u64,
    pub text_en: String,
    pub text_bn: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<bool>,
}

impl CaptionPairRecord {
    /// `valid` travels with `similarity` or not at all.
    fn check_paired_fields(&self, line: u64) -> Result<(), NumioError> {
        match (self.similarity, self.valid) {
            (Some(_), Some(_)) | (None, None) => Ok(()),
            (Some(_), None) => Err(NumioError::Record {
                line,
                msg: "similarity present but valid flag missing".into(),
            }),
            (None, Some(_)) => Err(NumioError::Record {
                line,
                msg: "valid flag present but similarity missing".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Csv,
    Jsonl,
}

impl RecordFormat {
    pub fn from_path(path: &std::path::Path) -> Option<RecordFormat> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Some(RecordFormat::Csv),
            Some("jsonl") | Some("ndjson") => Some(RecordFormat::Jsonl),
            _ => None,
        }
    }
}

pub fn read_records<R: Read>(r: R, format: RecordFormat) -> Result<Vec<CaptionPairRecord>, NumioError> {
    match format {
        RecordFormat::Csv => read_records_csv(r),
        RecordFormat::Jsonl => read_records_jsonl(r),
    }
}

pub fn read_records_csv<R: Read>(r: R) -> Result<Vec<CaptionPairRecord>, NumioError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(r);
    let headers = rdr.headers()?.clone();
    let found: Vec<&str> = headers.iter().collect();
    if found != RECORD_FIELDS {
        return Err(NumioError::Header {
            expected: RECORD_FIELDS.join(","),
            found: found.join(","),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let rec = parse_csv_row(&row, line)?;
        rec.check_paired_fields(line)?;
        out.push(rec);
    }
    Ok(out)
}

fn parse_csv_row(row: &csv::StringRecord, line: u64) -> Result<CaptionPairRecord, NumioError> {
    let field = |i: usize| -> &str { row.get(i).unwrap_or("") };
    let caption_id = field(0)
        .parse::<u64>()
        .map_err(|_| bad_field(line, "caption_id", field(0)))?;
    let image_id = field(1)
        .parse::<u64>()
        .map_err(|_| bad_field(line, "image_id", field(1)))?;
    let similarity = match field(4) {
        "" => None,
        s => {
            let v = s.parse::<f64>().map_err(|_| bad_field(line, "similarity", s))?;
            if !v.is_finite() {
                return Err(bad_field(line, "similarity", s));
            }
            Some(v)
        }
    };
    let valid = match field(5) {
        "" => None,
        "true" => Some(true),
        "false" => Some(false),
        s => return Err(bad_field(line, "valid", s)),
    };
    Ok(CaptionPairRecord {
        caption_id,
        image_id,
        text_en: field(2).to_string(),
        text_bn: field(3).to_string(),
        similarity,
        valid,
    })
}

fn bad_field(line: u64, name: &str, value: &str) -> NumioError {
    NumioError::Record { line, msg: format!("unparseable {name}: `{value}`") }
}

pub fn read_records_jsonl<R: Read>(r: R) -> Result<Vec<CaptionPairRecord>, NumioError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(r).lines().enumerate() {
        let lineno = idx as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionPairRecord = serde_json::from_str(&line)
            .map_err(|e| NumioError::Record { line: lineno, msg: e.to_string() })?;
        rec.check_paired_fields(lineno)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records_csv<W: Write>(w: W, records: &[CaptionPairRecord]) -> Result<(), NumioError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(RECORD_FIELDS)?;
    for rec in records {
        wtr.write_record(&[
            rec.caption_id.to_string(),
            rec.image_id.to_string(),
            rec.text_en.clone(),
            rec.text_bn.clone(),
            rec.similarity.map(|s| s.to_string()).unwrap_or_default(),
            rec.valid.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_records_jsonl<W: Write>(mut w: W, records: &[CaptionPairRecord]) -> Result<(), NumioError> {
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
