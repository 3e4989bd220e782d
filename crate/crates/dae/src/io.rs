//! Dataset files.
//!
//! CSV: header `id,label[,dd,j0..j6],f0..f{F-1}`, one record per row, floats
//! written in shortest round-trip form.
//!
//! Binary (`.daef`), little-endian throughout:
//!
//! ```text
//! b"DAEF" | version u32 = 1 | F u32 | n u64 | flags u32 (bit 0: judges)
//! n × ( id_len u32 | id utf-8 | label f64 | [dd f64 | j0..j6 f64] | f0..f{F-1} f64 )
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use dae_core::data::{Dataset, FeatureRecord};
use dae_core::model::NUM_JUDGES;

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"DAEF";
pub const BINARY_VERSION: u32 = 1;
const FLAG_JUDGES: u32 = 1;

/// Loads by extension: `.daef` is binary, anything else CSV.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("daef") => load_binary(path),
        _ => load_csv(path),
    }
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("daef") => write_binary(path, dataset),
        _ => write_csv(path, dataset),
    }
}

pub fn csv_header(feature_dim: usize, judges: bool) -> Vec<String> {
    let mut h = vec!["id".to_string(), "label".to_string()];
    if judges {
        h.push("dd".into());
        h.extend((0..NUM_JUDGES).map(|j| format!("j{j}")));
    }
    h.extend((0..feature_dim).map(|i| format!("f{i}")));
    h
}

pub fn write_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(BufWriter::new(file), dataset).map_err(|e| csv_err(path, e))
}

fn write_csv_to<W: Write>(w: W, dataset: &Dataset) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let judges = dataset.has_judges();
    wr.write_record(csv_header(dataset.feature_dim(), judges))?;
    let mut row: Vec<String> = Vec::new();
    for r in dataset.records() {
        row.clear();
        row.push(r.id.clone());
        row.push(r.label.to_string());
        if judges {
            row.push(r.dd.expect("validated").to_string());
            row.extend(r.judges.expect("validated").iter().map(f64::to_string));
        }
        row.extend(r.features.iter().map(f64::to_string));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses CSV dataset text from any reader.
pub fn parse_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rd
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    let judges = cols.get(2) == Some(&"dd");
    let offset = if judges { 3 + NUM_JUDGES } else { 2 };
    if cols.len() <= offset {
        return Err(Error::Data("header has no feature columns".into()));
    }
    let expected = csv_header(cols.len() - offset, judges);
    if cols != expected {
        return Err(Error::Data(format!(
            "header does not match `{}`",
            expected.join(",")
        )));
    }
    let feature_dim = cols.len() - offset;

    let mut records = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Data(format!("line {line}: {e}"))
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != cols.len() {
            return Err(Error::Data(format!(
                "line {line}: expected {} fields, found {}",
                cols.len(),
                row.len()
            )));
        }
        let id = row[0].to_string();
        let num = |i: usize| -> Result<f64> {
            let s = row[i].trim();
            let v: f64 = s.parse().map_err(|_| {
                Error::Data(format!(
                    "line {line} (record `{id}`): column `{}` is not a number: `{s}`",
                    cols[i]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "line {line} (record `{id}`): column `{}` is not finite",
                    cols[i]
                )));
            }
            Ok(v)
        };
        let label = num(1)?;
        let (dd, js) = if judges {
            let mut js = [0.0; NUM_JUDGES];
            for (j, slot) in js.iter_mut().enumerate() {
                if row[3 + j].trim().is_empty() {
                    return Err(Error::Data(format!(
                        "line {line} (record `{id}`): expected {NUM_JUDGES} judge scores, j{j} is empty"
                    )));
                }
                *slot = num(3 + j)?;
            }
            if row[2].trim().is_empty() {
                return Err(Error::Data(format!(
                    "line {line} (record `{id}`): judges present but dd missing"
                )));
            }
            (Some(num(2)?), Some(js))
        } else {
            (None, None)
        };
        let features = (offset..offset + feature_dim)
            .map(num)
            .collect::<Result<Vec<f64>>>()?;
        let rec = FeatureRecord {
            id: id.clone(),
            features,
            label,
            judges: js,
            dd,
        };
        rec.validate()
            .map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Data("no records".into()));
    }
    Ok(Dataset::new(records)?)
}

pub fn write_binary(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_binary(&mut w, dataset)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn encode_binary<W: Write>(w: &mut W, dataset: &Dataset) -> std::io::Result<()> {
    let judges = dataset.has_judges();
    let f = u32::try_from(dataset.feature_dim())
        .map_err(|_| std::io::Error::other("feature dimension exceeds u32"))?;
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&f.to_le_bytes())?;
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    w.write_all(&(if judges { FLAG_JUDGES } else { 0 }).to_le_bytes())?;
    for r in dataset.records() {
        let id = r.id.as_bytes();
        let id_len =
            u32::try_from(id.len()).map_err(|_| std::io::Error::other("record id too long"))?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&r.label.to_le_bytes())?;
        if judges {
            w.write_all(&r.dd.expect("validated").to_le_bytes())?;
            for j in r.judges.expect("validated") {
                w.write_all(&j.to_le_bytes())?;
            }
        }
        for v in &r.features {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_binary(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_binary(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != BINARY_MAGIC {
        return Err(Error::Data("not a DAEF file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != BINARY_VERSION {
        return Err(Error::Data(format!("unsupported DAEF version {version}")));
    }
    let f = c.u32()? as usize;
    let n = c.u64()?;
    let flags = c.u32()?;
    if flags & !FLAG_JUDGES != 0 {
        return Err(Error::Data(format!("unknown DAEF flags {flags:#x}")));
    }
    let judges = flags & FLAG_JUDGES != 0;
    let mut records = Vec::new();
    for i in 0..n {
        let id_len = c.u32()? as usize;
        let id = std::str::from_utf8(c.take(id_len)?)
            .map_err(|_| Error::Data(format!("record {i}: id is not UTF-8")))?
            .to_string();
        let label = c.f64()?;
        let (dd, js) = if judges {
            let dd = c.f64()?;
            let mut js = [0.0; NUM_JUDGES];
            for j in &mut js {
                *j = c.f64()?;
            }
            (Some(dd), Some(js))
        } else {
            (None, None)
        };
        let features = (0..f).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let rec = FeatureRecord {
            id,
            features,
            label,
            judges: js,
            dd,
        };
        rec.validate()
            .map_err(|e| Error::Data(format!("record {i}: {e}")))?;
        records.push(rec);
    }
    if c.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after {n} records",
            bytes.len() - c.pos
        )));
    }
    Ok(Dataset::new(records)?)
}

/// `id,t,sigma` ground-truth table for synthetic data.
pub fn write_sigma_table(path: &Path, ids: &[&str], latent: &[f64], sigma: &[f64]) -> Result<()> {
    let mut wr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut go = || -> csv::Result<()> {
        wr.write_record(["id", "t", "sigma"])?;
        for ((id, t), s) in ids.iter().zip(latent).zip(sigma) {
            wr.write_record([id.to_string(), t.to_string(), s.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    };
    go().map_err(|e| csv_err(path, e))
}
