//! On-disk dataset layout: a `manifest.txt` of `key = value` lines plus one
//! `CMMDMAT` matrix file per modality (and one for labels).
//!
//! A matrix file is the magic `CMMDMAT`, a format version (u32), rows and
//! columns (u64), then row-major 32-bit floats, all little-endian.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, DatasetManifest, ModalityInfo, Role, Standardization};
use crate::autograd::Tensor;
use crate::distributions::CategoricalMode;
use crate::error::{Error, Result};
use crate::model::Family;

pub const MATRIX_MAGIC: &[u8; 7] = b"CMMDMAT";
pub const MATRIX_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LABELS_FILE: &str = "labels.cmmdmat";

pub fn write_matrix<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::invalid(format!("matrix files hold rank-2 data, got {:?}", t.shape())));
    }
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(t.rows() as u64).to_le_bytes())?;
    w.write_all(&(t.cols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 7 + 4 + 16];
    r.read_exact(&mut head).map_err(|_| Error::format("matrix file truncated in header"))?;
    if &head[..7] != MATRIX_MAGIC {
        return Err(Error::format("bad matrix magic"));
    }
    let version = u32::from_le_bytes(head[7..11].try_into().expect("4 bytes"));
    if version != MATRIX_VERSION {
        return Err(Error::format(format!("unsupported matrix version {version}")));
    }
    let rows = u64::from_le_bytes(head[11..19].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(head[19..27].try_into().expect("8 bytes")) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format("matrix extents overflow"))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != n * 4 {
        return Err(Error::format(format!(
            "matrix body has {} bytes, expected {} for {rows}×{cols}",
            raw.len(),
            n * 4
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str, key: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::format(format!("bad number list for `{key}`"))))
        .collect()
}

pub fn modality_file(name: &str) -> String {
    format!("{name}.cmmdmat")
}

/// Text form of a dataset manifest.
pub fn manifest_text(m: &DatasetManifest) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "rows = {}", m.rows);
    let _ = writeln!(s, "classes = {}", m.classes);
    let _ = writeln!(s, "label_mode = {}", m.label_mode.name());
    let _ = writeln!(s, "labels = {}", if m.has_labels { LABELS_FILE } else { "none" });
    let names: Vec<&str> = m.modalities.iter().map(|x| x.name.as_str()).collect();
    let _ = writeln!(s, "modalities = {}", names.join(","));
    for x in &m.modalities {
        let _ = writeln!(s, "modality.{}.width = {}", x.name, x.width);
        let _ = writeln!(s, "modality.{}.family = {}", x.name, x.family.name());
        let _ = writeln!(s, "modality.{}.role = {}", x.name, x.role.name());
        let _ = writeln!(s, "modality.{}.file = {}", x.name, modality_file(&x.name));
        if let Some(st) = &x.stats {
            let _ = writeln!(s, "modality.{}.mean = {}", x.name, floats(&st.mean));
            let _ = writeln!(s, "modality.{}.std = {}", x.name, floats(&st.std));
        }
    }
    s
}

/// Parses a manifest. Returns the manifest and the file name of each
/// modality (and of the labels, if any).
pub fn parse_manifest(text: &str) -> Result<(DatasetManifest, Vec<String>, Option<String>)> {
    let mut kv = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("manifest line {} lacks `=`", n + 1)))?;
        if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::format(format!("manifest key `{}` repeated", k.trim())));
        }
    }
    let get = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::format(format!("manifest lacks `{k}`")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(format!("manifest `{k}` is not an integer")))
    };
    let rows = int("rows")?;
    let classes = int("classes")?;
    let label_mode = CategoricalMode::parse(&get("label_mode")?).map_err(|e| Error::format(e.to_string()))?;
    let labels = get("labels")?;
    let labels_file = (labels != "none").then_some(labels);
    let mut modalities = Vec::new();
    let mut files = Vec::new();
    for name in get("modalities")?.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let key = |f: &str| format!("modality.{name}.{f}");
        let width = int(&key("width"))?;
        let family = Family::parse(&get(&key("family"))?).map_err(|e| Error::format(e.to_string()))?;
        let role = Role::parse(&get(&key("role"))?)?;
        files.push(get(&key("file"))?);
        let stats = match (kv.get(&key("mean")), kv.get(&key("std"))) {
            (Some(m), Some(s)) => Some(Standardization {
                mean: parse_floats(m, &key("mean"))?,
                std: parse_floats(s, &key("std"))?,
            }),
            (None, None) => None,
            _ => return Err(Error::format(format!("modality `{name}` has only one of mean/std"))),
        };
        modalities.push(ModalityInfo {
            name: name.to_string(),
            width,
            family,
            role,
            stats,
        });
    }
    let manifest = DatasetManifest {
        modalities,
        classes,
        label_mode,
        has_labels: labels_file.is_some(),
        rows,
    };
    Ok((manifest, files, labels_file))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (m, t) in ds.manifest().modalities.iter().zip(ds.matrices()) {
        write_matrix(fs::File::create(dir.join(modality_file(&m.name)))?, t)?;
    }
    if let Some(y) = ds.labels() {
        write_matrix(fs::File::create(dir.join(LABELS_FILE))?, y)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest_text(ds.manifest()))?;
    Ok(())
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let (manifest, files, labels_file) = parse_manifest(&text)?;
    let mut data = Vec::with_capacity(files.len());
    for f in &files {
        let file = fs::File::open(dir.join(f))?;
        data.push(read_matrix(std::io::BufReader::new(file))?);
    }
    let labels = match labels_file {
        Some(f) => Some(read_matrix(std::io::BufReader::new(fs::File::open(dir.join(f))?))?),
        None => None,
    };
    Dataset::new(manifest, data, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_at_single_precision() {
        let t = Tensor::from_rows(&[vec![0.1, -2.5, 1e-9], vec![3.0, 7.25, -0.0]]).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 27 + 6 * 4);
        let back = read_matrix(buf.as_slice()).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn truncated_matrix_rejected() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &Tensor::zeros(&[2, 2])).unwrap();
        buf.pop();
        assert!(read_matrix(buf.as_slice()).is_err());
        assert!(read_matrix(&buf[..10]).is_err());
        buf[0] = b'X';
        assert!(read_matrix(buf.as_slice()).is_err());
    }
}
