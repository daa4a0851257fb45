//! CSV manifests: `image_path,mos,level,e1,e2,e3,j1,j2,j3`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ratings::Level;

pub const MANIFEST_HEADER: [&str; 9] = ["image_path", "mos", "level", "e1", "e2", "e3", "j1", "j2", "j3"];
/// Rating columns per tier.
pub const RATERS_PER_TIER: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative paths resolve against the manifest's directory.
    pub image_path: String,
    pub mos: f64,
    pub level: Level,
    /// Raw experienced-rater scores, if recorded.
    pub experienced: Vec<u8>,
    pub junior: Vec<u8>,
}

impl SampleRecord {
    pub fn new(image_path: impl Into<String>, mos: f64, level: Level) -> Self {
        Self {
            image_path: image_path.into(),
            mos,
            level,
            experienced: Vec::new(),
            junior: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.mos) {
            return Err(Error::Validation(format!(
                "`{}`: mos {} outside [0, 100]",
                self.image_path, self.mos
            )));
        }
        if self.experienced.len() > RATERS_PER_TIER || self.junior.len() > RATERS_PER_TIER {
            return Err(Error::Validation(format!(
                "`{}`: at most {RATERS_PER_TIER} ratings per tier",
                self.image_path
            )));
        }
        if let Some(s) = self.experienced.iter().chain(&self.junior).find(|&&s| s > 100) {
            return Err(Error::Validation(format!("`{}`: rating {s} outside 0..=100", self.image_path)));
        }
        Ok(())
    }
}

pub fn resolve_image_path(manifest: &Path, record: &SampleRecord) -> PathBuf {
    let p = Path::new(&record.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn parse_scores(fields: &[&str], line: usize) -> Result<Vec<u8>> {
    fields
        .iter()
        .filter(|f| !f.trim().is_empty())
        .map(|f| {
            f.trim().parse::<u8>().map_err(|_| Error::Manifest {
                line,
                reason: format!("rating `{f}` is not an integer in 0..=100"),
            })
        })
        .collect()
}

pub fn read_manifest(input: impl Read) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header = reader.headers()?.clone();
    let columns: Vec<&str> = header.iter().collect();
    if columns.len() < 3 || columns[..3] != MANIFEST_HEADER[..3] {
        return Err(Error::Manifest {
            line: 1,
            reason: format!("header must start with {}", MANIFEST_HEADER[..3].join(",")),
        });
    }
    if columns.len() > 3 && columns[..] != MANIFEST_HEADER[..] {
        return Err(Error::Manifest {
            line: 1,
            reason: format!("expected header {}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Manifest {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let fields: Vec<&str> = row.iter().collect();
        let bad = |reason: String| Error::Manifest { line, reason };
        if fields.len() < 3 || fields.len() > MANIFEST_HEADER.len() {
            return Err(bad(format!("expected 3 to 9 fields, found {}", fields.len())));
        }
        let mos: f64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("mos `{}` is not a number", fields[1])))?;
        let level: Level = fields[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let pad = |range: std::ops::Range<usize>| -> Vec<&str> { range.map(|i| fields.get(i).copied().unwrap_or("")).collect() };
        let record = SampleRecord {
            image_path: fields[0].to_string(),
            mos,
            level,
            experienced: parse_scores(&pad(3..6), line)?,
            junior: parse_scores(&pad(6..9), line)?,
        };
        record
            .validate()
            .map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_manifest(records: &[SampleRecord], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        r.validate()?;
        let mut row = vec![r.image_path.clone(), r.mos.to_string(), r.level.to_string()];
        for tier in [&r.experienced, &r.junior] {
            row.extend((0..RATERS_PER_TIER).map(|i| tier.get(i).map_or(String::new(), u8::to_string)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    read_manifest(std::fs::File::open(path)?)
}

pub fn save_manifest(records: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_manifest(records, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}
