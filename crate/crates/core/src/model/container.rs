//! Binary embedding container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  "RCCR"
//! u16    version (1)
//! u16    expert id
//! u32    dim
//! u64    count
//! count × { [u8; 16] sample id, dim × f32 }
//! ```
//!
//! Records are written in ascending sample-id order.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{l2_norm, EmbeddingExpert, EmbeddingVector, SampleId, UNIT_NORM_TOL};

pub const MAGIC: &[u8; 4] = b"RCCR";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 8;

pub fn encode_embeddings(expert: EmbeddingExpert, vectors: &BTreeMap<SampleId, EmbeddingVector>) -> Result<Vec<u8>> {
    let dim = expert.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + vectors.len() * (16 + dim * 4));
    out.extend_from_slice(MAGIC);
    out.write_u16::<LittleEndian>(VERSION).unwrap();
    out.write_u16::<LittleEndian>(expert.code()).unwrap();
    out.write_u32::<LittleEndian>(dim as u32).unwrap();
    out.write_u64::<LittleEndian>(vectors.len() as u64).unwrap();
    for (id, v) in vectors {
        if v.expert() != expert {
            return Err(Error::Data(format!(
                "sample {id}: {} vector in a {expert} container",
                v.expert()
            )));
        }
        out.extend_from_slice(id.as_bytes());
        for &x in v.data() {
            out.write_f32::<LittleEndian>(x).unwrap();
        }
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, expert: EmbeddingExpert, vectors: &BTreeMap<SampleId, EmbeddingVector>) -> Result<()> {
    io::write_atomic(path, &encode_embeddings(expert, vectors)?)
}

/// Parsed container: the expert named in the header plus its vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub expert: EmbeddingExpert,
    pub vectors: BTreeMap<SampleId, EmbeddingVector>,
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingFile> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("container is {} bytes, shorter than the header", bytes.len())));
    }
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).unwrap();
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = cur.read_u16::<LittleEndian>().unwrap();
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let code = cur.read_u16::<LittleEndian>().unwrap();
    let expert = EmbeddingExpert::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown expert id {code}")))?;
    let dim = cur.read_u32::<LittleEndian>().unwrap() as usize;
    if dim != expert.dim() {
        return Err(Error::Format(format!(
            "header dim {dim} does not match {expert} dim {}",
            expert.dim()
        )));
    }
    let count = cur.read_u64::<LittleEndian>().unwrap();
    let record_len = 16 + dim * 4;

    let mut vectors = BTreeMap::new();
    for record in 0..count {
        let remaining = bytes.len() - cur.position() as usize;
        if remaining < record_len {
            return Err(Error::RecordFormat {
                record,
                reason: format!("truncated: {remaining} bytes left, record needs {record_len}"),
            });
        }
        let mut raw = [0u8; 16];
        cur.read_exact(&mut raw).unwrap();
        let id = SampleId::from_raw(raw);
        let mut data = Vec::with_capacity(dim);
        for _ in 0..dim {
            data.push(cur.read_f32::<LittleEndian>().unwrap());
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::RecordData { record, reason: format!("sample {id}: non-finite value") });
        }
        // Records are unit vectors, so a record framed with the wrong dim shows
        // up as a norm away from 1 at the first misaligned record.
        let norm = l2_norm(&data);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::RecordFormat {
                record,
                reason: format!("sample {id}: norm {norm:.6} != 1; record length does not match header dim {dim}"),
            });
        }
        if vectors.insert(id, EmbeddingVector::from_unit(expert, data)?).is_some() {
            return Err(Error::RecordData { record, reason: format!("duplicate sample {id}") });
        }
    }
    let trailing = bytes.len() - cur.position() as usize;
    if trailing != 0 {
        let record = count.saturating_sub(1);
        return Err(Error::RecordFormat {
            record,
            reason: format!("{trailing} trailing bytes after {count} records of dim {dim}"),
        });
    }
    Ok(EmbeddingFile { expert, vectors })
}

pub fn load_embeddings(path: &Path) -> Result<BTreeMap<SampleId, EmbeddingVector>> {
    Ok(load_embedding_file(path)?.vectors)
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn unit(expert: EmbeddingExpert, seed: u64) -> EmbeddingVector {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..expert.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingVector::normalized(expert, data).unwrap()
    }

    #[test]
    fn empty_container() {
        let bytes = encode_embeddings(EmbeddingExpert::Beit, &BTreeMap::new()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert!(decode_embeddings(&bytes).unwrap().vectors.is_empty());
    }

    #[test]
    fn three_vectors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip_image.bin");
        let mut map = BTreeMap::new();
        for i in 0..3u64 {
            map.insert(SampleId::from_content(&i.to_le_bytes()), unit(EmbeddingExpert::ClipImage, i));
        }
        write_embeddings(&p, EmbeddingExpert::ClipImage, &map).unwrap();
        let back = load_embeddings(&p).unwrap();
        assert_eq!(back.len(), 3);
        for (id, v) in &map {
            assert!((back[id].cosine(v) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn oversized_record_is_a_format_error_at_its_index() {
        // Header declares 768 but the single record carries 1024 floats.
        let wide = unit(EmbeddingExpert::Dinov2, 9);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.write_u16::<LittleEndian>(1).unwrap();
        bytes.write_u16::<LittleEndian>(EmbeddingExpert::ClipImage.code()).unwrap();
        bytes.write_u32::<LittleEndian>(768).unwrap();
        bytes.write_u64::<LittleEndian>(1).unwrap();
        bytes.extend_from_slice(SampleId::from_content(b"w").as_bytes());
        for &x in wide.data() {
            bytes.write_f32::<LittleEndian>(x).unwrap();
        }
        match decode_embeddings(&bytes) {
            Err(Error::RecordFormat { record, .. }) => assert_eq!(record, 0),
            other => panic!("expected record format error, got {other:?}"),
        }
    }

    #[test]
    fn misframed_middle_record_is_named() {
        let mut map = BTreeMap::new();
        for i in 0..3u64 {
            map.insert(SampleId::from_content(&i.to_le_bytes()), unit(EmbeddingExpert::ClipText, i));
        }
        let mut bytes = encode_embeddings(EmbeddingExpert::ClipText, &map).unwrap();
        // Insert 64 extra floats into record 1.
        let insert_at = HEADER_LEN + (16 + 768 * 4) + 16 + 100 * 4;
        let extra = vec![0u8; 256];
        bytes.splice(insert_at..insert_at, extra);
        match decode_embeddings(&bytes) {
            Err(Error::RecordFormat { record, .. }) => assert!(record >= 1),
            other => panic!("expected record format error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_a_data_error() {
        let mut map = BTreeMap::new();
        map.insert(SampleId::from_content(b"n"), unit(EmbeddingExpert::ClipText, 1));
        let mut bytes = encode_embeddings(EmbeddingExpert::ClipText, &map).unwrap();
        let off = HEADER_LEN + 16;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_embeddings(&bytes), Err(Error::RecordData { record: 0, .. })));
    }

    #[test]
    fn header_dim_must_match_expert() {
        let mut bytes = encode_embeddings(EmbeddingExpert::ClipImage, &BTreeMap::new()).unwrap();
        bytes[8..12].copy_from_slice(&1024u32.to_le_bytes());
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));
    }
}
