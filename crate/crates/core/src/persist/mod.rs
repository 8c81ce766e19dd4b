//! On-disk formats. Nothing else in the crate touches files.
//!
//! * datasets and model buffers: JSON lines behind a one-line header;
//! * checkpoints: the binary container in [`checkpoint`];
//! * metrics: one JSON record per line, appended.

pub mod checkpoint;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use metrics::{read_metrics, validate_metrics, MetricRecord, MetricsLog};

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmentation::{ModelBuffer, Provenance};
use crate::env::{Dataset, EnvDescriptor, Transition};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "tatu-dataset";
pub const BUFFER_FORMAT: &str = "tatu-buffer";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| missing_or_io(path, source))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| missing_or_io(path, source))
}

fn missing_or_io(path: &Path, source: std::io::Error) -> Error {
    if source.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile {
            path: path.display().to_string(),
            source,
        }
    } else {
        Error::Io(source)
    }
}

/// Writes through a sibling temp file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_line<T: Serialize>(out: &mut String, value: &T) -> Result<()> {
    out.push_str(&serde_json::to_string(value).map_err(|e| Error::Schema(e.to_string()))?);
    out.push('\n');
    Ok(())
}

/// Splits JSON-lines text into header and body lines. A final line without
/// its newline means the writer stopped early.
fn split_lines<'a>(text: &'a str, what: &str) -> Result<(&'a str, Vec<&'a str>)> {
    if text.is_empty() {
        return Err(Error::Truncated(format!("{what} file is empty")));
    }
    if !text.ends_with('\n') {
        return Err(Error::Truncated(format!("{what} file ends mid-record")));
    }
    let mut lines = text[..text.len() - 1].split('\n');
    let header = lines.next().unwrap_or_default();
    Ok((header, lines.filter(|l| !l.is_empty()).collect()))
}

fn check_format(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Schema(format!("expected a {expected} file, found {format:?}")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
    descriptor: EnvDescriptor,
    behavior_tag: String,
    n_transitions: usize,
    start_state_pool: Vec<usize>,
    episode_starts: Vec<usize>,
}

/// Minimal view used to report a version mismatch before strict parsing.
#[derive(Deserialize)]
struct FormatTag {
    format: String,
    version: u32,
}

fn parse_header<T: for<'de> Deserialize<'de>>(line: &str, expected: &str) -> Result<T> {
    let tag: FormatTag = serde_json::from_str(line).map_err(|e| Error::Schema(format!("bad header: {e}")))?;
    check_format(&tag.format, tag.version, expected)?;
    serde_json::from_str(line).map_err(|e| Error::Schema(format!("bad header: {e}")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    to_line(
        &mut out,
        &DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: FORMAT_VERSION,
            descriptor: ds.descriptor.clone(),
            behavior_tag: ds.behavior_tag.clone(),
            n_transitions: ds.transitions.len(),
            start_state_pool: ds.start_state_pool.clone(),
            episode_starts: ds.episode_starts.clone(),
        },
    )?;
    for t in &ds.transitions {
        to_line(&mut out, t)?;
    }
    Ok(out)
}

fn check_against_descriptor(i: usize, t: &Transition, d: &EnvDescriptor) -> Result<()> {
    let dims = [("s", t.s.len(), d.state_dim), ("a", t.a.len(), d.action_dim), ("s_next", t.s_next.len(), d.state_dim)];
    for (field, got, want) in dims {
        if got != want {
            return Err(Error::Schema(format!("record {i}: {field} has {got} entries, header says {want}")));
        }
    }
    if let Some(b) = d.action_bound {
        if let Some(x) = t.a.iter().find(|x| x.abs() > b) {
            return Err(Error::Schema(format!("record {i}: action {x} outside the header bound {b}")));
        }
    }
    Ok(())
}

pub fn decode_dataset(text: &str) -> Result<Dataset> {
    let (header, lines) = split_lines(text, "dataset")?;
    let h: DatasetHeader = parse_header(header, DATASET_FORMAT)?;
    if lines.len() < h.n_transitions {
        return Err(Error::Truncated(format!("dataset has {} of {} records", lines.len(), h.n_transitions)));
    }
    if lines.len() > h.n_transitions {
        return Err(Error::Schema(format!("dataset has {} records, header says {}", lines.len(), h.n_transitions)));
    }
    let mut transitions = Vec::with_capacity(lines.len());
    for (i, line) in lines.into_iter().enumerate() {
        let t: Transition = serde_json::from_str(line).map_err(|e| Error::Schema(format!("record {i}: {e}")))?;
        check_against_descriptor(i, &t, &h.descriptor)?;
        transitions.push(t);
    }
    let ds = Dataset {
        descriptor: h.descriptor,
        behavior_tag: h.behavior_tag,
        transitions,
        start_state_pool: h.start_state_pool,
        episode_starts: h.episode_starts,
    };
    ds.validate().map_err(|e| Error::Schema(e.to_string()))?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, encode_dataset(ds)?.as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_text(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BufferHeader {
    format: String,
    version: u32,
    capacity: usize,
    n_entries: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BufferEntry {
    transition: Transition,
    provenance: Provenance,
}

pub fn encode_buffer(buf: &ModelBuffer) -> Result<String> {
    let mut out = String::new();
    to_line(
        &mut out,
        &BufferHeader {
            format: BUFFER_FORMAT.into(),
            version: FORMAT_VERSION,
            capacity: buf.capacity(),
            n_entries: buf.len(),
        },
    )?;
    for (t, p) in buf.entries() {
        to_line(
            &mut out,
            &BufferEntry {
                transition: t.clone(),
                provenance: *p,
            },
        )?;
    }
    Ok(out)
}

pub fn decode_buffer(text: &str) -> Result<ModelBuffer> {
    let (header, lines) = split_lines(text, "buffer")?;
    let h: BufferHeader = parse_header(header, BUFFER_FORMAT)?;
    if lines.len() != h.n_entries {
        let msg = format!("buffer has {} records, header says {}", lines.len(), h.n_entries);
        return Err(if lines.len() < h.n_entries { Error::Truncated(msg) } else { Error::Schema(msg) });
    }
    if h.n_entries > h.capacity {
        return Err(Error::Schema("buffer holds more entries than its capacity".into()));
    }
    let mut buf = ModelBuffer::new(h.capacity);
    for (i, line) in lines.into_iter().enumerate() {
        let e: BufferEntry = serde_json::from_str(line).map_err(|e| Error::Schema(format!("record {i}: {e}")))?;
        buf.push(e.transition, e.provenance);
    }
    buf.check_invariants().map_err(|e| Error::Schema(e.to_string()))?;
    Ok(buf)
}

pub fn save_buffer(path: &Path, buf: &ModelBuffer) -> Result<()> {
    write_atomic(path, encode_buffer(buf)?.as_bytes())
}

pub fn load_buffer(path: &Path) -> Result<ModelBuffer> {
    decode_buffer(&read_text(path)?)
}

/// Writes any serializable value as pretty JSON.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Schema(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}
