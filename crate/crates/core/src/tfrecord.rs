//! Record-file framing and the patch payload codec.
//!
//! Framing, per record: 8-byte little-endian payload length; 4-byte masked
//! CRC-32C of those 8 bytes; the payload; 4-byte masked CRC-32C of the
//! payload. mask(c) = ((c >> 15) | (c << 17)) + 0xA282EAD8 (mod 2^32).
//!
//! The payload is a key-value serialization: entries are concatenated as
//! [u16 LE key length][key bytes][u32 LE value length][value bytes], in a
//! fixed key order. Patch records carry:
//!
//! | key        | value encoding                   |
//! |------------|----------------------------------|
//! | slide_id   | UTF-8                            |
//! | x, y       | i64 LE, unpadded slide pixels (negative inside the mirror pad) |
//! | patch_size | u32 LE                           |
//! | mpp_x, mpp_y | f64 LE                         |
//! | channels   | u32 LE                           |
//! | pixels     | raw interleaved 8-bit samples    |

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated record file")]
    UnexpectedEof,
    #[error("payload: {0}")]
    InvalidPayload(String),
}

/// CRC-32C (Castagnoli) lookup table, reflected polynomial 0x82F63B78.
const CRC32C_TABLE: [u32; 256] = build_crc32c_table();

const fn build_crc32c_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ 0x82F6_3B78 } else { crc >> 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// Plain CRC-32C of a byte slice.
pub fn crc32c(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc = (crc >> 8) ^ CRC32C_TABLE[((crc ^ b as u32) & 0xFF) as usize];
    }
    !crc
}

/// The masked CRC used by the record framing:
/// ((c >> 15) | (c << 17)) + 0xA282EAD8 mod 2^32.
pub fn masked_crc32c(data: &[u8]) -> u32 {
    crc32c(data).rotate_right(15).wrapping_add(0xA282_EAD8)
}

/// Writes length-prefixed, checksummed records to any byte sink.
pub struct RecordWriter<W: Write> {
    inner: W,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn write_record(&mut self, payload: &[u8]) -> Result<(), RecordError> {
        let len = (payload.len() as u64).to_le_bytes();
        self.inner.write_all(&len)?;
        self.inner.write_all(&masked_crc32c(&len).to_le_bytes())?;
        self.inner.write_all(payload)?;
        self.inner.write_all(&masked_crc32c(payload).to_le_bytes())?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Reads framed records back, verifying both checksums.
pub struct RecordReader<R: Read> {
    inner: R,
}

impl<R: Read> RecordReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    /// Next payload, or `None` at a clean end of stream.
    pub fn read_record(&mut self) -> Result<Option<Vec<u8>>, RecordError> {
        let mut len_bytes = [0u8; 8];
        match self.inner.read_exact(&mut len_bytes) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let mut crc = [0u8; 4];
        self.inner.read_exact(&mut crc).map_err(eof)?;
        check_crc(u32::from_le_bytes(crc), masked_crc32c(&len_bytes))?;
        let len = u64::from_le_bytes(len_bytes) as usize;
        let mut payload = vec![0u8; len];
        self.inner.read_exact(&mut payload).map_err(eof)?;
        self.inner.read_exact(&mut crc).map_err(eof)?;
        check_crc(u32::from_le_bytes(crc), masked_crc32c(&payload))?;
        Ok(Some(payload))
    }
}

fn eof(e: io::Error) -> RecordError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        RecordError::UnexpectedEof
    } else {
        RecordError::Io(e)
    }
}

fn check_crc(stored: u32, computed: u32) -> Result<(), RecordError> {
    if stored != computed {
        Err(RecordError::CrcMismatch { stored, computed })
    } else {
        Ok(())
    }
}

/// One extracted patch: provenance, geometry and raw pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub slide_id: String,
    /// Origin in unpadded slide pixels at the patch resolution; negative
    /// when the patch starts inside the mirror padding.
    pub x: i64,
    pub y: i64,
    pub patch_size: u32,
    pub mpp_x: f64,
    pub mpp_y: f64,
    pub channels: u32,
    pub pixels: Vec<u8>,
}

const KEY_ORDER: [&str; 8] = ["slide_id", "x", "y", "patch_size", "mpp_x", "mpp_y", "channels", "pixels"];

fn put_entry(out: &mut Vec<u8>, key: &str, value: &[u8]) {
    out.extend_from_slice(&(key.len() as u16).to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    out.extend_from_slice(value);
}

impl PatchRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 128);
        put_entry(&mut out, "slide_id", self.slide_id.as_bytes());
        put_entry(&mut out, "x", &self.x.to_le_bytes());
        put_entry(&mut out, "y", &self.y.to_le_bytes());
        put_entry(&mut out, "patch_size", &self.patch_size.to_le_bytes());
        put_entry(&mut out, "mpp_x", &self.mpp_x.to_le_bytes());
        put_entry(&mut out, "mpp_y", &self.mpp_y.to_le_bytes());
        put_entry(&mut out, "channels", &self.channels.to_le_bytes());
        put_entry(&mut out, "pixels", &self.pixels);
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, RecordError> {
        let bad = |m: &str| RecordError::InvalidPayload(m.to_string());
        let mut pos = 0usize;
        let mut values: Vec<Vec<u8>> = Vec::with_capacity(KEY_ORDER.len());
        for expected_key in KEY_ORDER {
            if pos + 2 > payload.len() {
                return Err(bad("truncated key length"));
            }
            let klen = u16::from_le_bytes([payload[pos], payload[pos + 1]]) as usize;
            pos += 2;
            if pos + klen > payload.len() {
                return Err(bad("truncated key"));
            }
            let key = std::str::from_utf8(&payload[pos..pos + klen])
                .map_err(|_| bad("key is not UTF-8"))?;
            if key != expected_key {
                return Err(RecordError::InvalidPayload(format!(
                    "expected key `{expected_key}`, found `{key}`"
                )));
            }
            pos += klen;
            if pos + 4 > payload.len() {
                return Err(bad("truncated value length"));
            }
            let vlen = u32::from_le_bytes(payload[pos..pos + 4].try_into().unwrap()) as usize;
            pos += 4;
            if pos + vlen > payload.len() {
                return Err(bad("truncated value"));
            }
            values.push(payload[pos..pos + vlen].to_vec());
            pos += vlen;
        }
        if pos != payload.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        let fixed = |v: &[u8], n: usize, what: &str| -> Result<Vec<u8>, RecordError> {
            if v.len() != n {
                Err(RecordError::InvalidPayload(format!("{what} must be {n} bytes")))
            } else {
                Ok(v.to_vec())
            }
        };
        let record = PatchRecord {
            slide_id: String::from_utf8(values[0].clone()).map_err(|_| bad("slide_id not UTF-8"))?,
            x: i64::from_le_bytes(fixed(&values[1], 8, "x")?.try_into().unwrap()),
            y: i64::from_le_bytes(fixed(&values[2], 8, "y")?.try_into().unwrap()),
            patch_size: u32::from_le_bytes(fixed(&values[3], 4, "patch_size")?.try_into().unwrap()),
            mpp_x: f64::from_le_bytes(fixed(&values[4], 8, "mpp_x")?.try_into().unwrap()),
            mpp_y: f64::from_le_bytes(fixed(&values[5], 8, "mpp_y")?.try_into().unwrap()),
            channels: u32::from_le_bytes(fixed(&values[6], 4, "channels")?.try_into().unwrap()),
            pixels: values[7].clone(),
        };
        let expected = record.patch_size as usize * record.patch_size as usize * record.channels as usize;
        if record.pixels.len() != expected {
            return Err(RecordError::InvalidPayload(format!(
                "pixel payload is {} bytes, expected {expected}",
                record.pixels.len()
            )));
        }
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_crc_of_empty_input() {
        assert_eq!(crc32c(&[]), 0);
        assert_eq!(masked_crc32c(&[]), 0xA282_EAD8);
    }

    #[test]
    fn crc32c_known_vectors() {
        // RFC 3720 test vectors.
        assert_eq!(crc32c(&[0u8; 32]), 0x8A91_36AA);
        assert_eq!(crc32c(&[0xFFu8; 32]), 0x62A8_AB43);
        let ascending: Vec<u8> = (0..32).collect();
        assert_eq!(crc32c(&ascending), 0x46DD_794E);
        assert_eq!(crc32c(b"123456789"), 0xE306_9283);
    }

    #[test]
    fn framing_round_trips() {
        let payloads: [&[u8]; 3] = [b"", b"abc", &[7u8; 300]];
        let mut buf = Vec::new();
        let mut w = RecordWriter::new(&mut buf);
        for p in payloads {
            w.write_record(p).unwrap();
        }
        let mut r = RecordReader::new(buf.as_slice());
        for p in payloads {
            assert_eq!(r.read_record().unwrap().unwrap(), p);
        }
        assert!(r.read_record().unwrap().is_none());
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let mut buf = Vec::new();
        RecordWriter::new(&mut buf).write_record(b"hello").unwrap();
        let n = buf.len();
        buf[n - 6] ^= 0x40; // flip a payload bit
        let mut r = RecordReader::new(buf.as_slice());
        assert!(matches!(r.read_record(), Err(RecordError::CrcMismatch { .. })));
    }

    #[test]
    fn truncated_stream_is_reported() {
        let mut buf = Vec::new();
        RecordWriter::new(&mut buf).write_record(b"hello").unwrap();
        buf.truncate(buf.len() - 2);
        let mut r = RecordReader::new(buf.as_slice());
        assert!(matches!(r.read_record(), Err(RecordError::UnexpectedEof)));
    }

    #[test]
    fn patch_record_round_trips_bit_exactly() {
        let rec = PatchRecord {
            slide_id: "phantom_007".into(),
            x: -12,
            y: 500,
            patch_size: 4,
            mpp_x: 1.0,
            mpp_y: 1.25,
            channels: 3,
            pixels: (0..48).collect(),
        };
        let payload = rec.encode();
        assert_eq!(PatchRecord::decode(&payload).unwrap(), rec);
    }

    #[test]
    fn decode_rejects_reordered_keys() {
        let rec = PatchRecord {
            slide_id: "s".into(),
            x: 0,
            y: 0,
            patch_size: 1,
            mpp_x: 1.0,
            mpp_y: 1.0,
            channels: 1,
            pixels: vec![0],
        };
        let mut out = Vec::new();
        put_entry(&mut out, "x", &rec.x.to_le_bytes());
        put_entry(&mut out, "slide_id", rec.slide_id.as_bytes());
        assert!(matches!(PatchRecord::decode(&out), Err(RecordError::InvalidPayload(_))));
    }
}
