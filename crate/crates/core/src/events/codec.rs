//! EVS1 binary and CSV codecs for event streams.
//!
//! EVS1 layout, little-endian:
//!   header (24 bytes): magic "EVS1", version u16 (=1), width u16,
//!   height u16, pad u16 (=0), reserved u32 (=0), count u64
//!   records (16 bytes each): t u64 (microseconds), x u16, y u16,
//!   p u8 (0=neg, 1=pos), 3 pad bytes (=0)

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity};

const MAGIC: &[u8; 4] = b"EVS1";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 24;
const RECORD_LEN: usize = 16;

/// Decode an EVS1 blob into a validated stream.
pub fn decode_stream(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { offset: bytes.len() as u64, what: "EVS1 header".into() });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("missing EVS1 magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported EVS1 version {version}")));
    }
    let width = u16::from_le_bytes([bytes[6], bytes[7]]);
    let height = u16::from_le_bytes([bytes[8], bytes[9]]);
    let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let count_usize = usize::try_from(count)
        .map_err(|_| Error::Capacity(format!("record count {count} exceeds address space")))?;

    let expected = HEADER_LEN + count_usize * RECORD_LEN;
    if bytes.len() < expected {
        let complete = (bytes.len() - HEADER_LEN) / RECORD_LEN;
        return Err(Error::Truncated {
            offset: (HEADER_LEN + complete * RECORD_LEN) as u64,
            what: format!("record {} of {}", complete, count),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after {} records",
            bytes.len() - expected,
            count
        )));
    }

    let mut events = Vec::with_capacity(count_usize);
    for (i, rec) in bytes[HEADER_LEN..expected].chunks_exact(RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = match rec[12] {
            0 => Polarity::Neg,
            1 => Polarity::Pos,
            p => {
                return Err(Error::Validation(format!("record {i}: invalid polarity {p}")));
            }
        };
        events.push(Event { t, x, y, p });
    }

    EventStream::new(width, height, events).map_err(|e| match e {
        // Re-label stream invariant failures with the record vocabulary.
        Error::Validation(msg) => Error::Validation(format!("record check failed: {msg}")),
        other => other,
    })
}

/// Encode a stream into the bit-exact EVS1 layout.
pub fn encode_stream(s: &EventStream) -> Result<Vec<u8>> {
    let count = u64::try_from(s.len())
        .map_err(|_| Error::Capacity("event count exceeds u64".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + s.len() * RECORD_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&s.width().to_le_bytes());
    out.extend_from_slice(&s.height().to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);
    for ev in s.events() {
        out.extend_from_slice(&ev.t.to_le_bytes());
        out.extend_from_slice(&ev.x.to_le_bytes());
        out.extend_from_slice(&ev.y.to_le_bytes());
        out.push(match ev.p {
            Polarity::Neg => 0,
            Polarity::Pos => 1,
        });
        out.extend_from_slice(&[0u8; 3]);
    }
    Ok(out)
}

/// Decode the CSV alternative: header line `t_us,x,y,p`, one event per line,
/// polarity written as 0/1. Geometry is taken from `geometry` when given,
/// otherwise inferred as (max_x + 1, max_y + 1).
pub fn decode_csv(text: &str, geometry: Option<(u16, u16)>) -> Result<EventStream> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == "t_us,x,y,p" => {}
        Some(header) => {
            return Err(Error::Format(format!("unexpected CSV header '{header}'")));
        }
        None => return Err(Error::Format("empty CSV input".into())),
    }

    let mut events = Vec::new();
    let mut max_x = 0u16;
    let mut max_y = 0u16;
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |name: &str| {
            fields
                .next()
                .ok_or_else(|| Error::Format(format!("line {}: missing {}", lineno + 2, name)))
        };
        let t: u64 = parse(next("t_us")?, lineno, "t_us")?;
        let x: u16 = parse(next("x")?, lineno, "x")?;
        let y: u16 = parse(next("y")?, lineno, "y")?;
        let p: u8 = parse(next("p")?, lineno, "p")?;
        let p = match p {
            0 => Polarity::Neg,
            1 => Polarity::Pos,
            other => {
                return Err(Error::Validation(format!(
                    "line {}: invalid polarity {}",
                    lineno + 2,
                    other
                )));
            }
        };
        max_x = max_x.max(x);
        max_y = max_y.max(y);
        events.push(Event { t, x, y, p });
    }

    let (width, height) = geometry.unwrap_or((
        max_x.checked_add(1).ok_or_else(|| Error::Validation("x coordinate overflow".into()))?,
        max_y.checked_add(1).ok_or_else(|| Error::Validation("y coordinate overflow".into()))?,
    ));
    EventStream::new(width, height, events)
}

fn parse<T: std::str::FromStr>(field: &str, lineno: usize, name: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {}: bad {} value '{}'", lineno + 2, name, field)))
}

pub fn encode_csv(s: &EventStream) -> String {
    let mut out = String::from("t_us,x,y,p\n");
    for ev in s.events() {
        let p = match ev.p {
            Polarity::Neg => 0,
            Polarity::Pos => 1,
        };
        out.push_str(&format!("{},{},{},{}\n", ev.t, ev.x, ev.y, p));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_record_round_trip() {
        let s = EventStream::new(4, 4, vec![Event { t: 5, x: 2, y: 1, p: Polarity::Pos }]).unwrap();
        let bytes = encode_stream(&s).unwrap();
        assert_eq!(bytes.len(), 24 + 16);
        let back = decode_stream(&bytes).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn empty_stream_is_header_only() {
        let s = EventStream::new(1280, 720, vec![]).unwrap();
        let bytes = encode_stream(&s).unwrap();
        assert_eq!(bytes.len(), 24);
        let back = decode_stream(&bytes).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!((back.width(), back.height()), (1280, 720));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let s = EventStream::new(4, 4, vec![]).unwrap();
        let mut bytes = encode_stream(&s).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_stream(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let s = EventStream::new(4, 4, vec![]).unwrap();
        let mut bytes = encode_stream(&s).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_stream(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_record_reports_byte_offset() {
        let s = EventStream::new(
            4,
            4,
            vec![
                Event { t: 1, x: 0, y: 0, p: Polarity::Neg },
                Event { t: 2, x: 1, y: 1, p: Polarity::Pos },
            ],
        )
        .unwrap();
        let bytes = encode_stream(&s).unwrap();
        let err = decode_stream(&bytes[..bytes.len() - 5]).unwrap_err();
        match err {
            Error::Truncated { offset, .. } => assert_eq!(offset, 24 + 16),
            other => panic!("expected truncation, got {other}"),
        }
    }

    #[test]
    fn out_of_geometry_record_names_index() {
        let good = EventStream::new(8, 8, vec![Event { t: 1, x: 7, y: 7, p: Polarity::Pos }])
            .unwrap();
        let mut bytes = encode_stream(&good).unwrap();
        // Corrupt the record's x to 8 (out of the 8-wide geometry).
        bytes[24 + 8] = 8;
        let err = decode_stream(&bytes).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(err.to_string().contains("0"), "should name the record index: {err}");
    }

    fn random_stream(rng: &mut impl Rng) -> EventStream {
        let w = rng.gen_range(1..=64u16);
        let h = rng.gen_range(1..=64u16);
        let n = rng.gen_range(0..=128usize);
        let mut t = 0u64;
        let events = (0..n)
            .map(|_| {
                t += rng.gen_range(0..1000u64);
                Event {
                    t,
                    x: rng.gen_range(0..w),
                    y: rng.gen_range(0..h),
                    p: if rng.gen_bool(0.5) { Polarity::Pos } else { Polarity::Neg },
                }
            })
            .collect();
        EventStream::new(w, h, events).unwrap()
    }

    #[test]
    fn random_streams_round_trip_with_exact_length() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..10_000 {
            let s = random_stream(&mut rng);
            let bytes = encode_stream(&s).unwrap();
            assert_eq!(bytes.len(), 24 + 16 * s.len());
            assert_eq!(decode_stream(&bytes).unwrap(), s);
        }
    }

    #[test]
    fn csv_round_trip_and_inference() {
        let s = EventStream::new(
            10,
            6,
            vec![
                Event { t: 3, x: 9, y: 1, p: Polarity::Neg },
                Event { t: 8, x: 4, y: 5, p: Polarity::Pos },
            ],
        )
        .unwrap();
        let text = encode_csv(&s);
        assert!(text.starts_with("t_us,x,y,p\n"));
        let back = decode_csv(&text, Some((10, 6))).unwrap();
        assert_eq!(back, s);
        let inferred = decode_csv(&text, None).unwrap();
        assert_eq!((inferred.width(), inferred.height()), (10, 6));
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(matches!(decode_csv("x,y\n", None), Err(Error::Format(_))));
    }
}
