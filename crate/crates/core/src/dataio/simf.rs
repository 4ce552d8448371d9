//! SIMF feature store.
//!
//! ```text
//! "SIMF" | version u32 | count u64 | dim u32 | label_kind u8
//! count x ( [label i32 if label_kind = 1] | dim x f32 )
//! ```
//!
//! All integers and floats are little-endian. Optional sidecars next to the
//! store: `<store>.ids` (one id per line) and `<store>.queries` (one query
//! record index per line).

use std::fs;
use std::path::{Path, PathBuf};

use super::{with_suffix, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::retrieval::Dataset;

pub const SIMF_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SIMF";
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1;

pub fn ids_path(store: &Path) -> PathBuf {
    with_suffix(store, ".ids")
}

pub fn queries_path(store: &Path) -> PathBuf {
    with_suffix(store, ".queries")
}

/// Serializes features (as f32) and labels. Ids and queries are not part of
/// the binary format.
pub fn encode_feature_store(dataset: &Dataset) -> Result<Vec<u8>> {
    let k = dataset.dim();
    let per_record = 4 * k + if dataset.has_labels() { 4 } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + dataset.len() * per_record);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SIMF_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    let dim = u32::try_from(k).map_err(|_| Error::Dataset(format!("dimension {k} does not fit in u32")))?;
    out.extend_from_slice(&dim.to_le_bytes());
    let labels = dataset.labels().ok();
    out.push(u8::from(labels.is_some()));
    for i in 0..dataset.len() {
        if let Some(l) = labels {
            out.extend_from_slice(&l[i].to_le_bytes());
        }
        for &v in dataset.row(i) {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("record {i} does not fit in f32: {v}")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a store. `path` is only used in error messages.
pub fn decode_feature_store(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes, path);
    let magic = r.array::<4>("magic")?;
    if &magic != MAGIC {
        return Err(r.error(0, format!("bad magic {magic:?}, expected \"SIMF\"")));
    }
    let version = r.u32("version")?;
    if version != SIMF_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: SIMF_VERSION,
        });
    }
    let count = r.u64("record count")?;
    let dim_at = r.offset();
    let dim = r.u32("dimension")? as usize;
    if dim == 0 {
        return Err(r.error(dim_at, "dimension must be positive"));
    }
    let kind_at = r.offset();
    let has_labels = match r.u8("label kind")? {
        0 => false,
        1 => true,
        other => return Err(r.error(kind_at, format!("unknown label kind {other}"))),
    };
    let per_record = 4 * dim as u64 + if has_labels { 4 } else { 0 };
    let expected = count.checked_mul(per_record);
    if expected != Some(r.remaining() as u64) {
        let offset = HEADER_LEN + (r.remaining() as u64 / per_record * per_record) as usize;
        return Err(r.error(
            offset.min(bytes.len()),
            format!(
                "header promises {count} records of dimension {dim} ({} bytes) but {} bytes follow",
                expected.map_or("overflowing".to_string(), |e| e.to_string()),
                r.remaining()
            ),
        ));
    }
    let n = count as usize;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(if has_labels { n } else { 0 });
    for i in 0..n {
        if has_labels {
            labels.push(r.i32("label")?);
        }
        for _ in 0..dim {
            let at = r.offset();
            let v = r.f32("feature")?;
            if !v.is_finite() {
                return Err(r.error(at, format!("non-finite feature in record {i}")));
            }
            features.push(v as f64);
        }
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, dim, features, has_labels.then_some(labels), None)
}

/// Writes the store plus sidecars. Sidecars are written only when the ids
/// differ from record indices or queries are set; stale ones are removed.
pub fn write_feature_store(path: &Path, dataset: &Dataset) -> Result<()> {
    write_atomic(path, &encode_feature_store(dataset)?)?;
    let default_ids = dataset.ids().iter().enumerate().all(|(i, id)| *id == i.to_string());
    let ids_file = ids_path(path);
    if default_ids {
        remove_if_present(&ids_file)?;
    } else {
        if let Some(bad) = dataset.ids().iter().find(|id| id.contains('\n') || id.contains('\r')) {
            return Err(Error::Dataset(format!("id {bad:?} contains a line break")));
        }
        let mut text = dataset.ids().join("\n");
        text.push('\n');
        write_atomic(&ids_file, text.as_bytes())?;
    }
    let q_file = queries_path(path);
    if dataset.query_indices().is_empty() {
        remove_if_present(&q_file)?;
    } else {
        let text: String = dataset.query_indices().iter().map(|q| format!("{q}\n")).collect();
        write_atomic(&q_file, text.as_bytes())?;
    }
    Ok(())
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

/// Reads a store and its sidecars, if present.
pub fn read_feature_store(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut dataset = decode_feature_store(&bytes, path)?;
    let ids_file = ids_path(path);
    if ids_file.exists() {
        let text = fs::read_to_string(&ids_file)?;
        let ids: Vec<String> = text.lines().map(str::to_string).collect();
        if ids.len() != dataset.len() {
            return Err(Error::Dataset(format!(
                "{}: {} ids for {} records",
                ids_file.display(),
                ids.len(),
                dataset.len()
            )));
        }
        dataset = Dataset::new(
            dataset.name().to_string(),
            dataset.dim(),
            dataset.features().to_vec(),
            dataset.labels().ok().map(<[i32]>::to_vec),
            Some(ids),
        )?;
    }
    let q_file = queries_path(path);
    if q_file.exists() {
        let text = fs::read_to_string(&q_file)?;
        let queries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(n, l)| {
                l.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Dataset(format!("{} line {}: {e}", q_file.display(), n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        dataset.set_queries(queries)?;
    }
    Ok(dataset)
}
