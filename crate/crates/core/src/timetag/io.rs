//! Time-tag file formats.
//!
//! CSV: header `channel,time_ps`, one tag per line, LF endings.
//!
//! Binary: a 16-byte header (`QTTTAGS\0`, u32 LE version = 1, u32 LE record
//! count) followed by 16-byte records (u8 channel, 7 zero bytes, i64 LE time).
//!
//! Both formats list channels in ascending order with times ascending
//! within a channel.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use thiserror::Error;

use super::TimeTagStream;

pub const CSV_HEADER: &str = "channel,time_ps";
pub const BINARY_MAGIC: &[u8; 8] = b"QTTTAGS\0";
pub const BINARY_VERSION: u32 = 1;
const RECORD_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum TagIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("byte offset {offset}: {msg}")]
    Binary { offset: usize, msg: String },
}

fn ordered(streams: &[TimeTagStream]) -> Vec<&TimeTagStream> {
    let mut v: Vec<&TimeTagStream> = streams.iter().collect();
    v.sort_by_key(|s| s.channel_id);
    v
}

pub fn write_csv<W: Write>(streams: &[TimeTagStream], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for s in ordered(streams) {
        for t in s.tags() {
            writeln!(w, "{},{}", s.channel_id, t)?;
        }
    }
    w.flush()
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<TimeTagStream>, TagIoError> {
    let mut lines = r.lines();
    match lines.next() {
        Some(h) => {
            let h = h?;
            if h.trim_end_matches('\r') != CSV_HEADER {
                return Err(TagIoError::Csv { line: 1, msg: format!("expected header `{CSV_HEADER}`, found `{h}`") });
            }
        }
        None => return Err(TagIoError::Csv { line: 1, msg: "empty file".into() }),
    }
    let mut by_channel: BTreeMap<u8, Vec<i64>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| TagIoError::Csv { line: line_no, msg };
        let (ch, t) = line.split_once(',').ok_or_else(|| bad(format!("expected two fields, found `{line}`")))?;
        let ch: u8 = ch.trim().parse().map_err(|e| bad(format!("channel `{ch}`: {e}")))?;
        let t: i64 = t.trim().parse().map_err(|e| bad(format!("time `{t}`: {e}")))?;
        let tags = by_channel.entry(ch).or_default();
        if tags.last().is_some_and(|&last| t < last) {
            return Err(bad(format!("time {t} on channel {ch} is earlier than the previous tag")));
        }
        tags.push(t);
    }
    Ok(by_channel.into_iter().map(|(ch, tags)| TimeTagStream::new(ch, tags).expect("checked sorted")).collect())
}

pub fn write_binary<W: Write>(streams: &[TimeTagStream], mut w: W) -> Result<(), TagIoError> {
    let total: usize = streams.iter().map(|s| s.len()).sum();
    let count = u32::try_from(total)
        .map_err(|_| TagIoError::Binary { offset: 12, msg: format!("{total} records exceed the u32 count field") })?;
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    let mut rec = [0u8; RECORD_LEN];
    for s in ordered(streams) {
        rec[0] = s.channel_id;
        for t in s.tags() {
            rec[8..].copy_from_slice(&t.to_le_bytes());
            w.write_all(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Vec<TimeTagStream>, TagIoError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_binary(&buf)
}

pub fn parse_binary(buf: &[u8]) -> Result<Vec<TimeTagStream>, TagIoError> {
    let bad = |offset: usize, msg: String| TagIoError::Binary { offset, msg };
    if buf.len() < 16 {
        return Err(bad(buf.len(), "truncated header".into()));
    }
    if &buf[..8] != BINARY_MAGIC {
        return Err(bad(0, "bad magic".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(bad(8, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    let body = &buf[16..];
    if body.len() != count * RECORD_LEN {
        return Err(bad(
            16 + body.len().min(count * RECORD_LEN),
            format!("header declares {count} records but {} bytes follow", body.len()),
        ));
    }
    let mut by_channel: BTreeMap<u8, Vec<i64>> = BTreeMap::new();
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let offset = 16 + i * RECORD_LEN;
        if rec[1..8].iter().any(|&b| b != 0) {
            return Err(bad(offset + 1, "non-zero padding".into()));
        }
        let ch = rec[0];
        let t = i64::from_le_bytes(rec[8..].try_into().unwrap());
        let tags = by_channel.entry(ch).or_default();
        if tags.last().is_some_and(|&last| t < last) {
            return Err(bad(offset + 8, format!("time {t} on channel {ch} is earlier than the previous tag")));
        }
        tags.push(t);
    }
    Ok(by_channel.into_iter().map(|(ch, tags)| TimeTagStream::new(ch, tags).expect("checked sorted")).collect())
}
