//! Output files. Every CSV opens with a provenance comment naming its
//! schema, the config hash and the seed; every JSON wraps its payload in
//! the same three fields. Writes go through a temporary file and a rename.

use std::path::{Path, PathBuf};

use lrlens::{Error, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    String,
    Integer,
    Float,
    Bool,
}

impl ColumnType {
    fn accepts(self, cell: &str) -> bool {
        match self {
            ColumnType::String => !cell.is_empty(),
            ColumnType::Integer => cell.parse::<i64>().is_ok(),
            // Divergent probes are written as `inf`; undefined metrics as `NaN`.
            ColumnType::Float => cell.parse::<f64>().is_ok(),
            ColumnType::Bool => cell == "true" || cell == "false",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ColumnType,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub version: u32,
    pub columns: Vec<Column>,
}

macro_rules! schemas {
    ($($name:literal),* $(,)?) => {
        /// The committed schema files, by name.
        pub const SCHEMA_FILES: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../schemas/", $name, ".json")))),*
        ];
    };
}

schemas!(
    "run_summary",
    "landscape_summary",
    "pca_summary",
    "ccbh",
    "imbh",
    "spectra_weights",
    "spectra_deltas",
    "activations",
    "features",
    "target",
    "predictions",
    "group_spearman",
    "screen",
);

pub fn schema(name: &str) -> Schema {
    let (_, text) = SCHEMA_FILES.iter().find(|(n, _)| *n == name).unwrap_or_else(|| panic!("no schema `{name}`"));
    serde_json::from_str(text).expect("committed schema parses")
}

impl Schema {
    fn tag(&self) -> String {
        format!("{}/{}", self.name, self.version)
    }

    fn header(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    fn check_row(&self, line: usize, row: &[String]) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Schema(format!(
                "{}: line {line} has {} cells, expected {}",
                self.name,
                row.len(),
                self.columns.len()
            )));
        }
        for (cell, col) in row.iter().zip(&self.columns) {
            if !col.kind.accepts(cell) {
                return Err(Error::Schema(format!(
                    "{}: line {line} column `{}` = {cell:?} is not {:?}",
                    self.name, col.name, col.kind
                )));
            }
        }
        Ok(())
    }

    /// Checks provenance line, header and every cell of `text`.
    pub fn validate(&self, text: &str) -> Result<(Provenance, Vec<Vec<String>>)> {
        let mut lines = text.splitn(2, '\n');
        let first = lines.next().unwrap_or_default();
        let prov = parse_provenance(first, &self.tag())
            .ok_or_else(|| Error::Schema(format!("{}: missing or foreign provenance line {first:?}", self.name)))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(lines.next().unwrap_or_default().as_bytes());
        let header = reader.headers().map_err(|e| Error::Schema(format!("{}: {e}", self.name)))?;
        if header.iter().collect::<Vec<_>>() != self.header() {
            return Err(Error::Schema(format!("{}: header {:?} != {:?}", self.name, header, self.header())));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Schema(format!("{}: {e}", self.name)))?;
            let row: Vec<String> = rec.iter().map(str::to_string).collect();
            self.check_row(i + 3, &row)?;
            rows.push(row);
        }
        Ok((prov, rows))
    }
}

fn parse_provenance(line: &str, tag: &str) -> Option<Provenance> {
    let rest = line.strip_prefix("# ")?;
    let mut schema = None;
    let mut hash = None;
    let mut seed = None;
    for field in rest.split_whitespace() {
        let (k, v) = field.split_once('=')?;
        match k {
            "schema" => schema = Some(v),
            "config_hash" => hash = Some(v.to_string()),
            "seed" => seed = v.parse().ok(),
            _ => return None,
        }
    }
    (schema? == tag).then_some(Provenance { config_hash: hash?, seed: seed? })
}

/// Writes `bytes` to `path` via a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Formats a float so it parses back to the same value.
pub fn float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

pub fn write_csv(path: &Path, schema_name: &str, prov: &Provenance, rows: &[Vec<String>]) -> Result<()> {
    let s = schema(schema_name);
    let mut out = format!("# schema={} config_hash={} seed={}\n", s.tag(), prov.config_hash, prov.seed).into_bytes();
    {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
        w.write_record(s.header()).map_err(|e| Error::Schema(e.to_string()))?;
        for (i, row) in rows.iter().enumerate() {
            s.check_row(i + 3, row)?;
            w.write_record(row).map_err(|e| Error::Schema(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_atomic(path, &out)
}

pub fn read_csv(path: &Path, schema_name: &str) -> Result<(Provenance, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    schema(schema_name).validate(&text).map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        e => e,
    })
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema: String,
    config_hash: String,
    seed: u64,
    data: T,
}

pub fn write_json<T: Serialize>(path: &Path, schema: &str, prov: &Provenance, data: &T) -> Result<()> {
    let env = Envelope { schema: format!("{schema}/1"), config_hash: prov.config_hash.clone(), seed: prov.seed, data };
    let mut bytes = serde_json::to_vec_pretty(&env)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<(Provenance, T)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<T> = serde_json::from_slice(&bytes)?;
    if env.schema != format!("{schema}/1") {
        return Err(Error::Schema(format!("{}: schema {} is not {schema}/1", path.display(), env.schema)));
    }
    Ok((Provenance { config_hash: env.config_hash, seed: env.seed }, env.data))
}

/// Paths a command needs, each tagged with the command that writes it.
#[derive(Default)]
pub struct Requirements {
    missing: Vec<String>,
}

impl Requirements {
    pub fn need(&mut self, path: &Path, producer: &str) -> &mut Self {
        if !path.exists() {
            self.missing.push(format!("{} (produced by `lrlens {producer}`)", path.display()));
        }
        self
    }

    pub fn check(&mut self) -> Result<()> {
        if self.missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingInputs(std::mem::take(&mut self.missing)))
        }
    }
}

/// Output tree under the experiment directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_dir(&self, size: &str, method: &str) -> PathBuf {
        self.root.join("runs").join(size).join(method)
    }

    pub fn run_record(&self, size: &str, method: &str) -> PathBuf {
        self.run_dir(size, method).join("run.json")
    }

    pub fn checkpoint(&self, size: &str, method: &str, step: u64) -> PathBuf {
        self.run_dir(size, method).join(format!("step-{step:06}.ckpt"))
    }

    pub fn file(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}
