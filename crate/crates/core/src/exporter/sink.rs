//! Record sinks.
//!
//! File layout of [`NdjsonSink`]: `index.ndjson` holds one JSON object per
//! record, fields in this order:
//!
//! ```text
//! request_id, hook, layer, step, tp_rank, pp_stage, token_range, shape,
//! dtype, payload_offset, payload_len, checksum
//! ```
//!
//! and `payload.bin` holds the raw payloads back to back; `payload_offset`
//! and `payload_len` address a record's bytes there. `checksum` is the CRC32
//! of the payload.
//!
//! [`StreamSink`] frames each record as a 4-byte little-endian length of the
//! JSON line (no trailing newline), the JSON line, then `payload_len` raw
//! payload bytes. There `payload_offset` counts payload bytes already sent on
//! the stream.

use super::meta::{CaptureRecord, RankCoords};
use crate::capture::DType;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

pub const INDEX_FILE: &str = "index.ndjson";
pub const PAYLOAD_FILE: &str = "payload.bin";

/// Append-only, order-preserving destination for records.
pub trait Sink: Send {
    fn write(&mut self, records: &[CaptureRecord]) -> io::Result<()>;

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Lets a caller keep a handle on a sink that a pipeline owns.
impl<S: Sink> Sink for Arc<Mutex<S>> {
    fn write(&mut self, records: &[CaptureRecord]) -> io::Result<()> {
        self.lock().unwrap().write(records)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.lock().unwrap().flush()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexLine {
    pub request_id: u64,
    pub hook: String,
    pub layer: Option<u32>,
    pub step: u32,
    pub tp_rank: u32,
    pub pp_stage: u32,
    pub token_range: [u32; 2],
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub payload_offset: u64,
    pub payload_len: u64,
    pub checksum: u32,
}

impl IndexLine {
    pub fn new(record: &CaptureRecord, payload_offset: u64) -> Self {
        Self {
            request_id: record.request_id,
            hook: record.hook.clone(),
            layer: record.layer,
            step: record.step,
            tp_rank: record.rank.tp_rank,
            pp_stage: record.rank.pp_stage,
            token_range: [record.token_range.0, record.token_range.1],
            shape: record.shape.clone(),
            dtype: record.dtype,
            payload_offset,
            payload_len: record.payload.len() as u64,
            checksum: record.checksum(),
        }
    }

    pub fn into_record(self, payload: Vec<u8>) -> CaptureRecord {
        CaptureRecord {
            request_id: self.request_id,
            hook: self.hook,
            layer: self.layer,
            step: self.step,
            rank: RankCoords {
                tp_rank: self.tp_rank,
                pp_stage: self.pp_stage,
            },
            token_range: (self.token_range[0], self.token_range[1]),
            shape: self.shape,
            dtype: self.dtype,
            payload,
        }
    }
}

/// Index file plus binary payload sidecar in one directory.
pub struct NdjsonSink {
    index: BufWriter<File>,
    payload: BufWriter<File>,
    offset: u64,
}

impl NdjsonSink {
    pub fn create(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        Ok(Self {
            index: BufWriter::new(File::create(dir.join(INDEX_FILE))?),
            payload: BufWriter::new(File::create(dir.join(PAYLOAD_FILE))?),
            offset: 0,
        })
    }
}

impl Sink for NdjsonSink {
    fn write(&mut self, records: &[CaptureRecord]) -> io::Result<()> {
        for r in records {
            let line = IndexLine::new(r, self.offset);
            self.payload.write_all(&r.payload)?;
            serde_json::to_writer(&mut self.index, &line)?;
            self.index.write_all(b"\n")?;
            self.offset += r.payload.len() as u64;
        }
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.payload.flush()?;
        self.index.flush()
    }
}

impl Drop for NdjsonSink {
    fn drop(&mut self) {
        let _ = Sink::flush(self);
    }
}

/// A dataset read back from disk. Records whose stored checksum disagrees with
/// their payload are still returned and counted in `checksum_failures`.
#[derive(Debug, Default)]
pub struct Dataset {
    pub records: Vec<CaptureRecord>,
    pub checksum_failures: usize,
}

pub fn read_ndjson_dataset(dir: impl AsRef<Path>) -> io::Result<Dataset> {
    let dir = dir.as_ref();
    let index = BufReader::new(File::open(dir.join(INDEX_FILE))?);
    let payload = fs::read(dir.join(PAYLOAD_FILE))?;
    let mut out = Dataset::default();
    for line in index.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexLine = serde_json::from_str(&line)?;
        let start = entry.payload_offset as usize;
        let end = start + entry.payload_len as usize;
        let bytes = payload.get(start..end).ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("payload range {start}..{end} beyond sidecar"),
            )
        })?;
        if crc32fast::hash(bytes) != entry.checksum {
            out.checksum_failures += 1;
        }
        out.records.push(entry.into_record(bytes.to_vec()));
    }
    Ok(out)
}

/// Counts what it is given and keeps nothing.
#[derive(Debug, Default)]
pub struct NullSink {
    pub records: u64,
    pub bytes: u64,
}

impl Sink for NullSink {
    fn write(&mut self, records: &[CaptureRecord]) -> io::Result<()> {
        self.records += records.len() as u64;
        self.bytes += records.iter().map(|r| r.payload.len() as u64).sum::<u64>();
        Ok(())
    }
}

/// Length-prefixed framing over any byte stream.
pub struct StreamSink<W: Write + Send> {
    out: W,
    offset: u64,
}

impl<W: Write + Send> StreamSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, offset: 0 }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl StreamSink<BufWriter<TcpStream>> {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        Ok(Self::new(BufWriter::new(TcpStream::connect(addr)?)))
    }
}

impl<W: Write + Send> Sink for StreamSink<W> {
    fn write(&mut self, records: &[CaptureRecord]) -> io::Result<()> {
        for r in records {
            let line = serde_json::to_vec(&IndexLine::new(r, self.offset))?;
            let len = u32::try_from(line.len())
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "index line too long"))?;
            self.out.write_all(&len.to_le_bytes())?;
            self.out.write_all(&line)?;
            self.out.write_all(&r.payload)?;
            self.offset += r.payload.len() as u64;
        }
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Read one frame written by [`StreamSink`]. `Ok(None)` at a clean end of
/// stream.
pub fn read_stream_frame<R: Read>(input: &mut R) -> io::Result<Option<(IndexLine, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let mut line = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut line)?;
    let entry: IndexLine = serde_json::from_slice(&line)?;
    let mut payload = vec![0u8; entry.payload_len as usize];
    input.read_exact(&mut payload)?;
    Ok(Some((entry, payload)))
}

/// Keeps records in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<CaptureRecord>,
}

impl Sink for MemorySink {
    fn write(&mut self, records: &[CaptureRecord]) -> io::Result<()> {
        self.records.extend_from_slice(records);
        Ok(())
    }
}

/// Wraps a sink and fails the write calls whose 0-based index is listed.
pub struct FaultySink<S: Sink> {
    inner: S,
    fail_on: Vec<u64>,
    calls: u64,
}

impl<S: Sink> FaultySink<S> {
    pub fn new(inner: S, fail_on: Vec<u64>) -> Self {
        Self {
            inner,
            fail_on,
            calls: 0,
        }
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: Sink> Sink for FaultySink<S> {
    fn write(&mut self, records: &[CaptureRecord]) -> io::Result<()> {
        let call = self.calls;
        self.calls += 1;
        if self.fail_on.contains(&call) {
            return Err(io::Error::other(format!("injected failure on write {call}")));
        }
        self.inner.write(records)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SinkStats {
    pub writes: u64,
    pub records: u64,
    pub bytes: u64,
    pub failures: u64,
}

/// Failure-isolating front of a sink: errors are counted, never propagated.
pub struct SinkStage {
    sink: Box<dyn Sink>,
    stats: SinkStats,
    last_error: Option<String>,
}

impl SinkStage {
    pub fn new(sink: Box<dyn Sink>) -> Self {
        Self {
            sink,
            stats: SinkStats::default(),
            last_error: None,
        }
    }

    pub fn null() -> Self {
        Self::new(Box::new(NullSink::default()))
    }

    pub fn sink_write(&mut self, records: &[CaptureRecord]) {
        self.stats.writes += 1;
        match self.sink.write(records) {
            Ok(()) => {
                self.stats.records += records.len() as u64;
                self.stats.bytes += records.iter().map(|r| r.payload.len() as u64).sum::<u64>();
            }
            Err(e) => {
                self.stats.failures += 1;
                self.last_error = Some(e.to_string());
            }
        }
    }

    pub fn finish(&mut self) {
        if let Err(e) = self.sink.flush() {
            self.stats.failures += 1;
            self.last_error = Some(e.to_string());
        }
    }

    pub fn stats(&self) -> SinkStats {
        self.stats
    }

    pub fn last_error(&self) -> Option<&str> {
        self.last_error.as_deref()
    }
}

/// Paths of the two files an [`NdjsonSink`] writes in `dir`.
pub fn dataset_files(dir: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    (dir.join(INDEX_FILE), dir.join(PAYLOAD_FILE))
}
