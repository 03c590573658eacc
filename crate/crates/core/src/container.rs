//! Framing shared by the ticket and dataset files.
//!
//! ```text
//! magic        8 bytes
//! version      u32 LE
//! checksum     4-byte algorithm tag ("CR32" = CRC-32/ISO-HDLC)
//! total_len    u64 LE, length of the whole file including the trailer
//! metadata     u32 LE length + UTF-8 "key=value\n" lines
//! body         format-specific records
//! crc          u32 LE over every preceding byte
//! ```

use std::fmt;

use thiserror::Error;

pub const CHECKSUM_TAG: [u8; 4] = *b"CR32";
const HEADER_LEN: usize = 8 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("unknown checksum algorithm {0:?}")]
    UnknownChecksum(String),
    #[error("truncated container: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("shape inconsistency: {0}")]
    ShapeInconsistency(String),
    #[error("malformed container: {0}")]
    Malformed(String),
}

/// Ordered key/value metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &str, value: impl fmt::Display) {
        let value = value.to_string();
        assert!(
            !key.contains(['=', '\n']) && !value.contains('\n'),
            "metadata key/value must be single-line: {key}={value}"
        );
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, FormatError> {
        self.get(key)
            .ok_or_else(|| FormatError::Malformed(format!("missing metadata key {key:?}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| FormatError::Malformed(format!("metadata {key}={raw:?} does not parse")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn encode(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn decode(text: &str) -> Result<Self, FormatError> {
        let mut md = Metadata::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FormatError::Malformed(format!("metadata line {line:?}")))?;
            md.entries.push((k.to_string(), v.to_string()));
        }
        Ok(md)
    }
}

/// Append-only body encoder.
#[derive(Debug, Default)]
pub struct BodyWriter {
    buf: Vec<u8>,
}

impl BodyWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_str(&mut self, s: &str) {
        self.put_u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn put_bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn put_f32s(&mut self, xs: &[f32]) {
        self.buf.reserve(xs.len() * 4);
        for &x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn put_u32s(&mut self, xs: &[u32]) {
        self.buf.reserve(xs.len() * 4);
        for &x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

/// Bounds-checked body decoder.
pub struct BodyReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Malformed(format!(
                "record runs past end of body ({} bytes needed at offset {}, {} left)",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_str(&mut self) -> Result<String, FormatError> {
        let n = self.get_u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Malformed("string is not UTF-8".into()))
    }

    pub fn get_bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        self.take(n)
    }

    pub fn get_f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Malformed("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn get_u32s(&mut self, n: usize) -> Result<Vec<u32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| FormatError::Malformed("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed(format!(
                "{} unread bytes after last record",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode(magic: &[u8; 8], version: u32, metadata: &Metadata, body: BodyWriter) -> Vec<u8> {
    let md = metadata.encode();
    let total = HEADER_LEN + 4 + md.len() + body.buf.len() + 4;
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&CHECKSUM_TAG);
    out.extend_from_slice(&(total as u64).to_le_bytes());
    out.extend_from_slice(&(md.len() as u32).to_le_bytes());
    out.extend_from_slice(md.as_bytes());
    out.extend_from_slice(&body.buf);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Validates framing and checksum; returns the metadata and a body reader.
pub fn decode<'a>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    version: u32,
) -> Result<(Metadata, BodyReader<'a>), FormatError> {
    let actual = bytes.len() as u64;
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            actual,
        });
    }
    if &bytes[..8] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN as u64,
            actual,
        });
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != version {
        return Err(FormatError::UnsupportedVersion {
            found,
            supported: version,
        });
    }
    if bytes[12..16] != CHECKSUM_TAG {
        return Err(FormatError::UnknownChecksum(
            String::from_utf8_lossy(&bytes[12..16]).into_owned(),
        ));
    }
    let total = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if actual < total {
        return Err(FormatError::Truncated { expected: total, actual });
    }
    if actual > total {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes after declared end",
            actual - total
        )));
    }
    if bytes.len() < HEADER_LEN + 8 {
        return Err(FormatError::Malformed("declared length shorter than header".into()));
    }
    let split = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[split..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..split]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    let md_len = u32::from_le_bytes(bytes[HEADER_LEN..HEADER_LEN + 4].try_into().unwrap()) as usize;
    let md_start = HEADER_LEN + 4;
    if md_start + md_len > split {
        return Err(FormatError::Malformed("metadata runs past end of file".into()));
    }
    let md_text = std::str::from_utf8(&bytes[md_start..md_start + md_len])
        .map_err(|_| FormatError::Malformed("metadata is not UTF-8".into()))?;
    let metadata = Metadata::decode(md_text)?;
    Ok((
        metadata,
        BodyReader {
            buf: &bytes[md_start + md_len..split],
            pos: 0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTFMT\0";

    fn sample() -> Vec<u8> {
        let mut md = Metadata::new();
        md.insert("name", "demo");
        md.insert("count", 3);
        let mut body = BodyWriter::new();
        body.put_str("weights");
        body.put_f32s(&[1.0, -2.5, 3.25]);
        encode(MAGIC, 1, &md, body)
    }

    #[test]
    fn round_trip() {
        let bytes = sample();
        let (md, mut body) = decode(&bytes, MAGIC, 1).unwrap();
        assert_eq!(md.get("name"), Some("demo"));
        assert_eq!(md.parse::<usize>("count").unwrap(), 3);
        assert_eq!(body.get_str().unwrap(), "weights");
        assert_eq!(body.get_f32s(3).unwrap(), vec![1.0, -2.5, 3.25]);
        body.finish().unwrap();
    }

    #[test]
    fn every_truncation_is_reported_as_such() {
        let bytes = sample();
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut], MAGIC, 1) {
                Err(FormatError::Truncated { .. }) => {}
                other => panic!("cut at {cut}: {:?}", other.map(|_| ())),
            }
        }
    }

    #[test]
    fn typed_rejections() {
        let bytes = sample();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, MAGIC, 1), Err(FormatError::BadMagic { .. })));
        assert!(matches!(decode(&bytes, MAGIC, 2), Err(FormatError::UnsupportedVersion { found: 1, .. })));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2 + 10;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode(&flipped, MAGIC, 1), Err(FormatError::ChecksumMismatch { .. })));
    }
}
