//! Embedding files.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! "EMB1" | u32 N | u32 D | u32 L | N × ( u32 label | D × f32 )
//! ```
//!
//! Features are stored as `f32`; datasets whose features are already
//! `f32`-representable (all synthetic ones are) round-trip bit-exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

pub fn save_embeddings(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_embeddings(ds, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_embeddings(ds: &EmbeddingDataset, w: &mut impl Write) -> std::io::Result<()> {
    let as_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| std::io::Error::other(format!("{v} does not fit in u32")))
    };
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&as_u32(ds.len())?.to_le_bytes())?;
    w.write_all(&as_u32(ds.dim())?.to_le_bytes())?;
    w.write_all(&as_u32(ds.num_classes())?.to_le_bytes())?;
    for (row, &label) in ds.features().iter_rows().zip(ds.labels()) {
        w.write_all(&as_u32(label)?.to_le_bytes())?;
        for &x in row {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(EMBEDDING_MAGIC) {
        decode_embeddings(&bytes)
    } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        parse_csv(&bytes, None)
    } else {
        decode_embeddings(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.pos as u64,
                format!(
                    "truncated file: need {n} bytes for {what}, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub(crate) fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingDataset> {
    if bytes.is_empty() {
        return Err(Error::parse(0, "empty file"));
    }
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::parse(0, "bad magic, expected \"EMB1\""));
    }
    let n = cur.u32("sample count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let l = cur.u32("class count")? as usize;
    let record = 4 + 4 * d;
    let expected = 16 + n as u64 * record as u64;
    if (bytes.len() as u64) > expected {
        return Err(Error::parse(
            expected,
            format!(
                "dimension mismatch: header says {n} records of dimension {d} ({expected} bytes) but file has {} bytes",
                bytes.len()
            ),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n.saturating_mul(d).min(bytes.len()));
    for i in 0..n {
        let at = cur.pos as u64;
        let label = cur.u32("label")? as usize;
        if label >= l {
            return Err(Error::parse(
                at,
                format!("label {label} of record {i} is outside [0, {l})"),
            ));
        }
        labels.push(label);
        for _ in 0..d {
            let at = cur.pos as u64;
            let x = cur.f32("feature")?;
            if !x.is_finite() {
                return Err(Error::parse(at, format!("non-finite feature in record {i}")));
            }
            data.push(x as f64);
        }
    }
    let features = Matrix::from_vec(n, d, data)?;
    EmbeddingDataset::new(features, labels, l)
}

/// Reads `label,f0,...,f{D-1}` CSV. `num_classes` defaults to `max label + 1`.
/// Parse errors carry the byte offset of the offending record.
pub fn load_embeddings_csv(
    path: impl AsRef<Path>,
    num_classes: Option<usize>,
) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&bytes, num_classes)
}

fn parse_csv(bytes: &[u8], num_classes: Option<usize>) -> Result<EmbeddingDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(0, format!("unreadable CSV header: {e}")))?
        .clone();
    if headers.is_empty() || &headers[0] != "label" {
        return Err(Error::parse(0, "CSV header must start with `label`"));
    }
    let d = headers.len() - 1;
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("f{j}") {
            return Err(Error::parse(0, format!("CSV column {} should be `f{j}`, found `{h}`", j + 1)));
        }
    }
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let offset = e.position().map_or(0, |p| p.byte());
            Error::parse(offset, format!("malformed CSV record: {e}"))
        })?;
        let offset = rec.position().map_or(0, |p| p.byte());
        if rec.len() != d + 1 {
            return Err(Error::parse(
                offset,
                format!("dimension mismatch: expected {} fields, found {}", d + 1, rec.len()),
            ));
        }
        let label: usize = rec[0]
            .parse()
            .map_err(|_| Error::parse(offset, format!("bad label `{}`", &rec[0])))?;
        if let Some(l) = num_classes {
            if label >= l {
                return Err(Error::parse(offset, format!("label {label} is outside [0, {l})")));
            }
        }
        labels.push(label);
        for field in rec.iter().skip(1) {
            let x: f64 = field
                .parse()
                .map_err(|_| Error::parse(offset, format!("bad feature value `{field}`")))?;
            if !x.is_finite() {
                return Err(Error::parse(offset, "non-finite feature value"));
            }
            data.push(x);
        }
    }
    if labels.is_empty() {
        return Err(Error::parse(bytes.len() as u64, "CSV has no records"));
    }
    let l = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Matrix::from_vec(labels.len(), d, data)?;
    EmbeddingDataset::new(features, labels, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_gaussian_mixture, SynthConfig};
    use crate::numerics::Rng;

    fn encode(ds: &EmbeddingDataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_embeddings(ds, &mut buf).unwrap();
        buf
    }

    fn tiny() -> EmbeddingDataset {
        let f = Matrix::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.25]]);
        EmbeddingDataset::new(f, vec![1, 0], 2).unwrap()
    }

    #[test]
    fn round_trip_synthetic() {
        let s = synth_gaussian_mixture(&SynthConfig::default(), &mut Rng::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.emb");
        save_embeddings(&s.train, &p).unwrap();
        assert_eq!(load_embeddings(&p).unwrap(), s.train);
    }

    #[test]
    fn layout_is_as_documented() {
        let bytes = encode(&tiny());
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(&bytes[4..16], &[2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 2 * (4 + 8));
        assert_eq!(&bytes[16..20], &[1, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &0.5f32.to_le_bytes());
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        assert!(matches!(decode_embeddings(&[]), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = encode(&tiny());
        // Header says N = 2 but only the first record is present.
        let cut = &bytes[..16 + 12];
        match decode_embeddings(cut) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 28);
                assert!(message.contains("truncated"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_a_dimension_mismatch() {
        let mut bytes = encode(&tiny());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        match decode_embeddings(&bytes) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("dimension mismatch")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_reports_record_offset() {
        let mut bytes = encode(&tiny());
        bytes[28..32].copy_from_slice(&7u32.to_le_bytes());
        match decode_embeddings(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 28),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_ingest() {
        let text = b"label,f0,f1\n1,0.5,1.0\n0,2.0,0.25\n";
        assert_eq!(parse_csv(text, None).unwrap(), tiny());
        let bad = b"label,f0,f1\n1,0.5\n";
        assert!(matches!(parse_csv(bad, None), Err(Error::Parse { .. })));
        let bad_label = b"label,f0\n5,1.0\n";
        assert!(parse_csv(bad_label, Some(2)).is_err());
        assert!(parse_csv(b"", None).is_err());
    }
}
