//! On-disk event formats.
//!
//! Binary `.evs`, little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EVS1"
//! 4       2     width  (u16)
//! 6       2     height (u16)
//! 8       2     label  (u16)
//! 10      8     event count N (u64)
//! 18      5*N   records: x (u16), y (u16), p (u8)
//! ```
//!
//! Text `.evt`, for hand-authored fixtures: a header line
//! `width,height,label` followed by one `x,y,p` line per event. Blank lines
//! and lines starting with `#` are ignored.
//!
//! A dataset directory holds one file per sample plus `manifest.csv` with a
//! `path,label` header line and one relative path per row.

use super::{Event, EventStream};
use crate::error::{Error, Result};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"EVS1";
pub const MANIFEST_NAME: &str = "manifest.csv";

pub fn write_evs(path: &Path, stream: &EventStream) -> Result<()> {
    stream.validate()?;
    let mut buf = Vec::with_capacity(18 + stream.events.len() * 5);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&stream.width.to_le_bytes());
    buf.extend_from_slice(&stream.height.to_le_bytes());
    buf.extend_from_slice(&stream.label.to_le_bytes());
    buf.extend_from_slice(&(stream.events.len() as u64).to_le_bytes());
    for e in &stream.events {
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.p);
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_evs(path: &Path) -> Result<EventStream> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() < 18 {
        return Err(Error::format(
            path,
            format!("file is {} bytes, header needs 18", buf.len()),
        ));
    }
    if &buf[0..4] != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:02x?}, expected \"EVS1\"", &buf[0..4]),
        ));
    }
    let width = u16::from_le_bytes([buf[4], buf[5]]);
    let height = u16::from_le_bytes([buf[6], buf[7]]);
    let label = u16::from_le_bytes([buf[8], buf[9]]);
    let count = u64::from_le_bytes(buf[10..18].try_into().unwrap()) as usize;
    let need = 18 + count * 5;
    if buf.len() != need {
        return Err(Error::format(
            path,
            format!(
                "truncated or oversized: header promises {} events ({} bytes), file has {}",
                count,
                need,
                buf.len()
            ),
        ));
    }
    let mut events = Vec::with_capacity(count);
    for i in 0..count {
        let off = 18 + i * 5;
        events.push(Event {
            x: u16::from_le_bytes([buf[off], buf[off + 1]]),
            y: u16::from_le_bytes([buf[off + 2], buf[off + 3]]),
            p: buf[off + 4],
        });
    }
    let stream = EventStream {
        width,
        height,
        label,
        events,
    };
    stream
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(stream)
}

pub fn write_evt(path: &Path, stream: &EventStream) -> Result<()> {
    stream.validate()?;
    let mut out = String::new();
    out.push_str(&format!(
        "{},{},{}\n",
        stream.width, stream.height, stream.label
    ));
    for e in &stream.events {
        out.push_str(&format!("{},{},{}\n", e.x, e.y, e.p));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_evt(path: &Path) -> Result<EventStream> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let (hline_no, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file, expected a width,height,label header"))?;
    let hp = parse_csv3(header)
        .ok_or_else(|| Error::format(path, format!("line {}: bad header {:?}", hline_no + 1, header)))?;
    let mut events = Vec::new();
    for (no, line) in lines {
        let (x, y, p) = parse_csv3(line)
            .ok_or_else(|| Error::format(path, format!("line {}: bad event {:?}", no + 1, line)))?;
        if p > 1 {
            return Err(Error::format(
                path,
                format!("line {}: polarity {} out of range", no + 1, p),
            ));
        }
        events.push(Event {
            x: x as u16,
            y: y as u16,
            p: p as u8,
        });
    }
    let stream = EventStream {
        width: hp.0 as u16,
        height: hp.1 as u16,
        label: hp.2 as u16,
        events,
    };
    stream
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(stream)
}

fn parse_csv3(line: &str) -> Option<(u32, u32, u32)> {
    let mut it = line.trim().split(',');
    let a = it.next()?.trim().parse().ok()?;
    let b = it.next()?.trim().parse().ok()?;
    let c = it.next()?.trim().parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some((a, b, c))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u16,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut out = String::from("path,label\n");
        for e in &self.entries {
            out.push_str(&format!("{},{}\n", e.path, e.label));
        }
        let p = dir.join(MANIFEST_NAME);
        fs::write(&p, out).map_err(|e| Error::io(&p, e))
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let p = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if no == 0 {
                if line.trim() != "path,label" {
                    return Err(Error::format(&p, format!("bad header {:?}", line)));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (path_part, label_part) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::format(&p, format!("line {}: bad row {:?}", no + 1, line)))?;
            let label = label_part.trim().parse().map_err(|_| {
                Error::format(&p, format!("line {}: bad label {:?}", no + 1, label_part))
            })?;
            entries.push(ManifestEntry {
                path: path_part.trim().to_string(),
                label,
            });
        }
        Ok(Manifest { entries })
    }
}

/// Write every stream as `.evs` under `dir` (created if missing) and emit
/// the manifest. File names are `c{label}_s{index}.evs` with the index
/// counted per class.
pub fn save_dataset(dir: &Path, streams: &[EventStream]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut per_class: std::collections::BTreeMap<u16, usize> = Default::default();
    let mut manifest = Manifest::default();
    for s in streams {
        let ix = per_class.entry(s.label).or_insert(0);
        let name = format!("c{}_s{:04}.evs", s.label, ix);
        *ix += 1;
        write_evs(&dir.join(&name), s)?;
        manifest.entries.push(ManifestEntry {
            path: name,
            label: s.label,
        });
    }
    manifest.write(dir)
}

/// Load a dataset directory through its manifest. Labels in the manifest
/// must agree with each file's header.
pub fn load_dataset(dir: &Path) -> Result<Vec<EventStream>> {
    let manifest = Manifest::read(dir)?;
    let mut streams = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let p: PathBuf = dir.join(&e.path);
        let s = if p.extension().map(|x| x == "evt").unwrap_or(false) {
            read_evt(&p)?
        } else {
            read_evs(&p)?
        };
        if s.label != e.label {
            return Err(Error::format(
                &p,
                format!("manifest label {} disagrees with file label {}", e.label, s.label),
            ));
        }
        streams.push(s);
    }
    Ok(streams)
}
