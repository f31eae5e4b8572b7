//! Single-round exchange of summary statistics between sites.
//!
//! Wire format (all little-endian, matrices row-major):
//!
//! ```text
//! magic  b"FST1"            4 bytes
//! protocol_version  u16     2
//! kind   u8                 1      0 = raw bundle, 1 = projected
//! site_id  u32              4
//! h        u16              2
//! d0       u16              2
//! d1       u16              2
//! n        u64              8
//! payload  f64 x M          8 * M  (raw: d0^2 + d0*d1 + d1^2 + d0 + d1;
//!                                   projected: d0^2 + d0)
//! crc      u32              4      CRC-32 of every preceding byte
//! ```
//!
//! The schema has no field for per-trajectory rows, so raw `(x, a, r)`
//! data structurally cannot cross a site boundary. A hub (in-memory or
//! TCP) collects exactly one message per `(site, h)` and hands every
//! site an immutable snapshot of the foreign messages; a `run_id` can
//! complete at most one round.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::summary::{project_homogeneous, ProjectedHomogeneousStats, SummaryBundle};

pub const MAGIC: [u8; 4] = *b"FST1";
pub const PROTOCOL_VERSION: u16 = 1;
/// Fixed-size prefix before the payload doubles.
pub const HEADER_LEN: usize = 25;
pub const CRC_LEN: usize = 4;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("checksum mismatch")]
    BadChecksum,
    #[error("unsupported protocol version {0}")]
    BadVersion(u16),
    #[error("truncated frame: need {need} bytes, got {got}")]
    TruncatedFrame { need: usize, got: usize },
    #[error("duplicate message from site {site_id} at step {h}")]
    DuplicateMessage { site_id: u32, h: u16 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("timeout waiting for site {site_id} (step {h})")]
    Timeout { site_id: u32, h: u16 },
    #[error("round {run_id} already completed on this hub")]
    RoundAlreadyCompleted { run_id: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayloadKind {
    RawBundle = 0,
    Projected = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StatsPayload {
    Raw {
        g00: DMatrix<f64>,
        g01: DMatrix<f64>,
        g11: DMatrix<f64>,
        v0: DVector<f64>,
        v1: DVector<f64>,
    },
    Projected {
        a: DMatrix<f64>,
        b: DVector<f64>,
    },
}

impl StatsPayload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            StatsPayload::Raw { .. } => PayloadKind::RawBundle,
            StatsPayload::Projected { .. } => PayloadKind::Projected,
        }
    }
}

/// One site's statistics for one step, as sent on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsMessage {
    pub protocol_version: u16,
    pub site_id: u32,
    pub h: u16,
    pub d0: u16,
    pub d1: u16,
    pub n: u64,
    pub payload: StatsPayload,
}

impl StatsMessage {
    pub fn projected(site_id: u32, h: u16, stats: &ProjectedHomogeneousStats) -> Self {
        StatsMessage {
            protocol_version: PROTOCOL_VERSION,
            site_id,
            h,
            d0: stats.a.nrows() as u16,
            d1: 0,
            n: stats.n as u64,
            payload: StatsPayload::Projected {
                a: stats.a.clone(),
                b: stats.b.clone(),
            },
        }
    }

    pub fn raw(bundle: &SummaryBundle) -> Self {
        StatsMessage {
            protocol_version: PROTOCOL_VERSION,
            site_id: bundle.site_id as u32,
            h: bundle.h as u16,
            d0: bundle.d0() as u16,
            d1: bundle.d1() as u16,
            n: bundle.n as u64,
            payload: StatsPayload::Raw {
                g00: bundle.g00.clone(),
                g01: bundle.g01.clone(),
                g11: bundle.g11.clone(),
                v0: bundle.v0.clone(),
                v1: bundle.v1.clone(),
            },
        }
    }

    /// The projected form, computing the projection here when the
    /// sender shipped raw blocks.
    pub fn to_projected(&self) -> ProjectedHomogeneousStats {
        match &self.payload {
            StatsPayload::Projected { a, b } => ProjectedHomogeneousStats {
                site_id: self.site_id as usize,
                h: self.h as usize,
                n: self.n as usize,
                a: a.clone(),
                b: b.clone(),
            },
            StatsPayload::Raw {
                g00,
                g01,
                g11,
                v0,
                v1,
            } => project_homogeneous(&SummaryBundle {
                site_id: self.site_id as usize,
                h: self.h as usize,
                n: self.n as usize,
                g00: g00.clone(),
                g01: g01.clone(),
                g11: g11.clone(),
                v0: v0.clone(),
                v1: v1.clone(),
            }),
        }
    }
}

fn payload_doubles(kind: PayloadKind, d0: usize, d1: usize) -> usize {
    match kind {
        PayloadKind::RawBundle => d0 * d0 + d0 * d1 + d1 * d1 + d0 + d1,
        PayloadKind::Projected => d0 * d0 + d0,
    }
}

/// Frame length for the given kind and dims.
pub fn frame_len(kind: PayloadKind, d0: usize, d1: usize) -> usize {
    HEADER_LEN + 8 * payload_doubles(kind, d0, d1) + CRC_LEN
}

/// Manifest bound on one round's total bytes: every frame fits in
/// `8 (d^2 + 2 d) + header + crc` bytes, and there are `K * H` of them.
pub fn round_byte_bound(k_sites: usize, horizon: usize, d0: usize, d1: usize) -> usize {
    let d = d0 + d1;
    k_sites * horizon * (8 * (d * d + 2 * d) + HEADER_LEN + CRC_LEN)
}

fn push_matrix_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

fn push_vector(out: &mut Vec<u8>, v: &DVector<f64>) {
    for x in v.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Canonical deterministic encoding; identical messages produce
/// identical bytes.
pub fn encode(msg: &StatsMessage) -> Vec<u8> {
    let kind = msg.payload.kind();
    let mut out = Vec::with_capacity(frame_len(kind, msg.d0 as usize, msg.d1 as usize));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&msg.protocol_version.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&msg.site_id.to_le_bytes());
    out.extend_from_slice(&msg.h.to_le_bytes());
    out.extend_from_slice(&msg.d0.to_le_bytes());
    out.extend_from_slice(&msg.d1.to_le_bytes());
    out.extend_from_slice(&msg.n.to_le_bytes());
    match &msg.payload {
        StatsPayload::Raw {
            g00,
            g01,
            g11,
            v0,
            v1,
        } => {
            push_matrix_row_major(&mut out, g00);
            push_matrix_row_major(&mut out, g01);
            push_matrix_row_major(&mut out, g11);
            push_vector(&mut out, v0);
            push_vector(&mut out, v1);
        }
        StatsPayload::Projected { a, b } => {
            push_matrix_row_major(&mut out, a);
            push_vector(&mut out, b);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        if self.pos + n > self.buf.len() {
            return Err(TransportError::TruncatedFrame {
                need: self.pos + n,
                got: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64, TransportError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>, TransportError> {
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = self.f64()?;
            }
        }
        Ok(m)
    }

    fn vector(&mut self, dim: usize) -> Result<DVector<f64>, TransportError> {
        let mut v = DVector::zeros(dim);
        for i in 0..dim {
            v[i] = self.f64()?;
        }
        Ok(v)
    }
}

/// Parse one frame; fails atomically with a distinguishable error.
pub fn decode(bytes: &[u8]) -> Result<StatsMessage, TransportError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(TransportError::BadMagic);
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != PROTOCOL_VERSION {
        return Err(TransportError::BadVersion(version));
    }
    let kind = match r.take(1)?[0] {
        0 => PayloadKind::RawBundle,
        1 => PayloadKind::Projected,
        k => {
            return Err(TransportError::DimMismatch(format!(
                "unknown payload kind {k}"
            )))
        }
    };
    let site_id = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    let h = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    let d0 = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
    let d1 = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(r.take(8)?.try_into().unwrap());

    let expected = frame_len(kind, d0, d1);
    if bytes.len() != expected {
        return Err(TransportError::TruncatedFrame {
            need: expected,
            got: bytes.len(),
        });
    }
    let crc_stored = u32::from_le_bytes(bytes[expected - CRC_LEN..].try_into().unwrap());
    if crc32fast::hash(&bytes[..expected - CRC_LEN]) != crc_stored {
        return Err(TransportError::BadChecksum);
    }

    let payload = match kind {
        PayloadKind::RawBundle => StatsPayload::Raw {
            g00: r.matrix(d0, d0)?,
            g01: r.matrix(d0, d1)?,
            g11: r.matrix(d1, d1)?,
            v0: r.vector(d0)?,
            v1: r.vector(d1)?,
        },
        PayloadKind::Projected => StatsPayload::Projected {
            a: r.matrix(d0, d0)?,
            b: r.vector(d0)?,
        },
    };
    Ok(StatsMessage {
        protocol_version: version,
        site_id,
        h,
        d0: d0 as u16,
        d1: d1 as u16,
        n,
        payload,
    })
}

// ── Round exchange ──────────────────────────────────────────────────────

/// What one site contributes to a round: one message per step.
#[derive(Debug, Clone)]
pub struct SiteRoundInput {
    pub site_id: u32,
    pub messages: Vec<StatsMessage>,
}

impl SiteRoundInput {
    pub fn from_projected(site_id: usize, stats: &[ProjectedHomogeneousStats]) -> Self {
        SiteRoundInput {
            site_id: site_id as u32,
            messages: stats
                .iter()
                .enumerate()
                .map(|(h, s)| StatsMessage::projected(site_id as u32, h as u16, s))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageReceipt {
    pub site_id: u32,
    pub h: u16,
    pub bytes: usize,
}

/// Bookkeeping for one completed round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundManifest {
    pub run_id: u64,
    pub k_sites: usize,
    pub horizon: usize,
    pub d0: usize,
    pub d1: usize,
    pub receipts: Vec<MessageReceipt>,
    pub total_bytes: usize,
}

/// Per-site snapshot of every foreign message, plus the manifest.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// `snapshots[k]` holds the foreign messages for the site at index
    /// `k` in the input order, sorted by `(site_id, h)`.
    pub snapshots: Vec<Vec<StatsMessage>>,
    pub manifest: RoundManifest,
}

impl RoundOutcome {
    /// Regroup one site's snapshot by step for the federated fit.
    pub fn foreign_by_step(
        &self,
        site_index: usize,
        horizon: usize,
    ) -> Vec<Vec<ProjectedHomogeneousStats>> {
        let mut out = vec![Vec::new(); horizon];
        for msg in &self.snapshots[site_index] {
            out[msg.h as usize].push(msg.to_projected());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    /// Bind address for the TCP hub, e.g. `127.0.0.1:0`.
    Socket(String),
}

/// The star-topology hub. Each `run_id` can complete exactly one round.
#[derive(Debug, Default)]
pub struct FederationHub {
    completed: HashSet<u64>,
}

impl FederationHub {
    pub fn new() -> Self {
        Self::default()
    }

    /// Run one round: every site uploads its per-step messages, and once
    /// all `K` uploads are in, each site receives the `(K-1) * H`
    /// foreign messages. Missing sites abort the round.
    pub fn exchange_round(
        &mut self,
        run_id: u64,
        sites: &[SiteRoundInput],
        transport: &TransportKind,
        timeout: Duration,
    ) -> Result<RoundOutcome, TransportError> {
        if self.completed.contains(&run_id) {
            return Err(TransportError::RoundAlreadyCompleted { run_id });
        }
        validate_round_inputs(sites)?;
        let outcome = match transport {
            TransportKind::InProcess => in_process_round(run_id, sites),
            TransportKind::Socket(addr) => socket_round(addr, run_id, sites, timeout),
        }?;
        self.completed.insert(run_id);
        Ok(outcome)
    }
}

fn validate_round_inputs(sites: &[SiteRoundInput]) -> Result<(), TransportError> {
    let mut seen_sites = HashSet::new();
    let mut dims: Option<(u16, u16, usize)> = None;
    for site in sites {
        if !seen_sites.insert(site.site_id) {
            return Err(TransportError::DuplicateMessage {
                site_id: site.site_id,
                h: 0,
            });
        }
        let mut seen_h = HashSet::new();
        for msg in &site.messages {
            if msg.site_id != site.site_id {
                return Err(TransportError::DimMismatch(format!(
                    "message from site {} carried site_id {}",
                    site.site_id, msg.site_id
                )));
            }
            if !seen_h.insert(msg.h) {
                return Err(TransportError::DuplicateMessage {
                    site_id: site.site_id,
                    h: msg.h,
                });
            }
            match dims {
                None => dims = Some((msg.d0, msg.d1, site.messages.len())),
                Some((d0, d1, horizon)) => {
                    if msg.d0 != d0 || msg.d1 != d1 || site.messages.len() != horizon {
                        return Err(TransportError::DimMismatch(format!(
                            "site {} disagrees on (d0, d1, H)",
                            site.site_id
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

fn manifest_from_frames(
    run_id: u64,
    sites: &[SiteRoundInput],
    frames: &[(u32, u16, Vec<u8>)],
) -> RoundManifest {
    let (d0, d1) = sites
        .first()
        .and_then(|s| s.messages.first())
        .map(|m| (m.d0 as usize, m.d1 as usize))
        .unwrap_or((0, 0));
    let horizon = sites.first().map(|s| s.messages.len()).unwrap_or(0);
    let receipts: Vec<MessageReceipt> = frames
        .iter()
        .map(|(site_id, h, bytes)| MessageReceipt {
            site_id: *site_id,
            h: *h,
            bytes: bytes.len(),
        })
        .collect();
    let total_bytes = receipts.iter().map(|r| r.bytes).sum();
    RoundManifest {
        run_id,
        k_sites: sites.len(),
        horizon,
        d0,
        d1,
        receipts,
        total_bytes,
    }
}

fn in_process_round(run_id: u64, sites: &[SiteRoundInput]) -> Result<RoundOutcome, TransportError> {
    // a single site has no one to talk to: empty exchange
    if sites.len() <= 1 {
        return Ok(RoundOutcome {
            snapshots: vec![Vec::new(); sites.len()],
            manifest: manifest_from_frames(run_id, sites, &[]),
        });
    }
    let mut frames: Vec<(u32, u16, Vec<u8>)> = Vec::new();
    for site in sites {
        for msg in &site.messages {
            frames.push((msg.site_id, msg.h, encode(msg)));
        }
    }
    frames.sort_by_key(|(site_id, h, _)| (*site_id, *h));
    let mut snapshots = Vec::with_capacity(sites.len());
    for site in sites {
        let mut snapshot = Vec::new();
        for (site_id, _, bytes) in &frames {
            if *site_id != site.site_id {
                snapshot.push(decode(bytes)?);
            }
        }
        snapshots.push(snapshot);
    }
    Ok(RoundOutcome {
        snapshots,
        manifest: manifest_from_frames(run_id, sites, &frames),
    })
}

// ── TCP hub ─────────────────────────────────────────────────────────────

fn write_frame(stream: &mut TcpStream, frame: &[u8]) -> std::io::Result<()> {
    stream.write_all(&(frame.len() as u32).to_le_bytes())?;
    stream.write_all(frame)
}

fn read_frame(stream: &mut TcpStream) -> Result<Vec<u8>, TransportError> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf).map_err(map_timeout)?;
    let len = u32::from_le_bytes(len_buf) as usize;
    let mut frame = vec![0u8; len];
    stream.read_exact(&mut frame).map_err(map_timeout)?;
    Ok(frame)
}

fn map_timeout(e: std::io::Error) -> TransportError {
    if matches!(
        e.kind(),
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
    ) {
        TransportError::Timeout { site_id: 0, h: 0 }
    } else {
        TransportError::Io(e)
    }
}

struct HubState {
    /// frames uploaded so far, keyed by (site_id, h)
    frames: Vec<(u32, u16, Vec<u8>)>,
    uploads_done: usize,
    failed: bool,
}

/// One server-side connection: read the site's frames, wait until all
/// sites uploaded, then send back every foreign frame in canonical order.
fn hub_connection(
    mut stream: TcpStream,
    state: Arc<(Mutex<HubState>, Condvar)>,
    k_sites: usize,
    per_site: usize,
    timeout: Duration,
) -> Result<(), TransportError> {
    stream.set_read_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    let mut my_site: Option<u32> = None;
    let mut my_frames = Vec::with_capacity(per_site);
    for _ in 0..per_site {
        let frame = read_frame(&mut stream)?;
        let msg = decode(&frame)?;
        if let Some(site) = my_site {
            if site != msg.site_id {
                return Err(TransportError::DimMismatch(format!(
                    "connection mixed sites {site} and {}",
                    msg.site_id
                )));
            }
        } else {
            my_site = Some(msg.site_id);
        }
        my_frames.push((msg.site_id, msg.h, frame));
    }
    let my_site = my_site.ok_or(TransportError::Timeout { site_id: 0, h: 0 })?;

    let (lock, cvar) = &*state;
    {
        let mut st = lock.lock().unwrap();
        for (site_id, h, _) in &my_frames {
            if st.frames.iter().any(|(s, hh, _)| s == site_id && hh == h) {
                st.failed = true;
                cvar.notify_all();
                return Err(TransportError::DuplicateMessage {
                    site_id: *site_id,
                    h: *h,
                });
            }
        }
        st.frames.extend(my_frames);
        st.uploads_done += 1;
        cvar.notify_all();
        while st.uploads_done < k_sites && !st.failed {
            let (next, wait_res) = cvar.wait_timeout(st, timeout).unwrap();
            st = next;
            if wait_res.timed_out() && st.uploads_done < k_sites {
                st.failed = true;
                cvar.notify_all();
                return Err(TransportError::Timeout {
                    site_id: my_site,
                    h: 0,
                });
            }
        }
        if st.failed {
            return Err(TransportError::Timeout {
                site_id: my_site,
                h: 0,
            });
        }
        let mut foreign: Vec<&(u32, u16, Vec<u8>)> = st
            .frames
            .iter()
            .filter(|(s, _, _)| *s != my_site)
            .collect();
        foreign.sort_by_key(|(s, h, _)| (*s, *h));
        stream.write_all(&(foreign.len() as u32).to_le_bytes())?;
        for (_, _, frame) in foreign {
            write_frame(&mut stream, frame)?;
        }
    }
    Ok(())
}

/// Client side: upload this site's frames, then read the foreign ones.
fn site_client(
    addr: &str,
    site: &SiteRoundInput,
    timeout: Duration,
) -> Result<Vec<StatsMessage>, TransportError> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    for msg in &site.messages {
        write_frame(&mut stream, &encode(msg))?;
    }
    let mut count_buf = [0u8; 4];
    stream.read_exact(&mut count_buf).map_err(|e| {
        if matches!(
            e.kind(),
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
        ) {
            TransportError::Timeout {
                site_id: site.site_id,
                h: 0,
            }
        } else {
            TransportError::Io(e)
        }
    })?;
    let count = u32::from_le_bytes(count_buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let frame = read_frame(&mut stream)?;
        out.push(decode(&frame)?);
    }
    Ok(out)
}

fn socket_round(
    addr: &str,
    run_id: u64,
    sites: &[SiteRoundInput],
    timeout: Duration,
) -> Result<RoundOutcome, TransportError> {
    if sites.len() <= 1 {
        return Ok(RoundOutcome {
            snapshots: vec![Vec::new(); sites.len()],
            manifest: manifest_from_frames(run_id, sites, &[]),
        });
    }
    let listener = TcpListener::bind(addr)?;
    let local_addr = listener.local_addr()?;
    let k_sites = sites.len();
    let per_site = sites[0].messages.len();
    let state = Arc::new((
        Mutex::new(HubState {
            frames: Vec::new(),
            uploads_done: 0,
            failed: false,
        }),
        Condvar::new(),
    ));

    let server_state = state.clone();
    let server = std::thread::spawn(move || -> Result<(), TransportError> {
        let mut handlers = Vec::new();
        for _ in 0..k_sites {
            let (stream, _) = listener.accept()?;
            let st = server_state.clone();
            handlers.push(std::thread::spawn(move || {
                hub_connection(stream, st, k_sites, per_site, timeout)
            }));
        }
        for handler in handlers {
            handler.join().expect("hub connection thread panicked")?;
        }
        Ok(())
    });

    let mut clients = Vec::new();
    for site in sites {
        let site = site.clone();
        let addr = local_addr.to_string();
        clients.push(std::thread::spawn(move || {
            site_client(&addr, &site, timeout)
        }));
    }
    let mut snapshots = Vec::with_capacity(k_sites);
    let mut first_err: Option<TransportError> = None;
    for client in clients {
        match client.join().expect("site client thread panicked") {
            Ok(snapshot) => snapshots.push(snapshot),
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
                snapshots.push(Vec::new());
            }
        }
    }
    let server_result = server.join().expect("hub server thread panicked");
    if let Some(e) = first_err {
        return Err(e);
    }
    server_result?;

    // manifest over every uploaded frame
    let frames = {
        let st = state.0.lock().unwrap();
        let mut frames = st.frames.clone();
        frames.sort_by_key(|(s, h, _)| (*s, *h));
        frames
    };
    Ok(RoundOutcome {
        snapshots,
        manifest: manifest_from_frames(run_id, sites, &frames),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_message(rng: &mut ChaCha8Rng, kind: PayloadKind) -> StatsMessage {
        let d0 = rng.gen_range(1..4usize);
        let d1 = rng.gen_range(1..4usize);
        let n = rng.gen_range(1..1000u64);
        let site_id = rng.gen_range(0..16u32);
        let h = rng.gen_range(0..8u16);
        let payload = match kind {
            PayloadKind::RawBundle => StatsPayload::Raw {
                g00: DMatrix::from_fn(d0, d0, |_, _| rng.gen_range(-5.0..5.0)),
                g01: DMatrix::from_fn(d0, d1, |_, _| rng.gen_range(-5.0..5.0)),
                g11: DMatrix::from_fn(d1, d1, |_, _| rng.gen_range(-5.0..5.0)),
                v0: DVector::from_fn(d0, |_, _| rng.gen_range(-5.0..5.0)),
                v1: DVector::from_fn(d1, |_, _| rng.gen_range(-5.0..5.0)),
            },
            PayloadKind::Projected => StatsPayload::Projected {
                a: DMatrix::from_fn(d0, d0, |_, _| rng.gen_range(-5.0..5.0)),
                b: DVector::from_fn(d0, |_, _| rng.gen_range(-5.0..5.0)),
            },
        };
        StatsMessage {
            protocol_version: PROTOCOL_VERSION,
            site_id,
            h,
            d0: d0 as u16,
            d1: d1 as u16,
            n,
            payload,
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(seed in 0u64..5000, raw in proptest::bool::ANY) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kind = if raw { PayloadKind::RawBundle } else { PayloadKind::Projected };
            let msg = random_message(&mut rng, kind);
            let bytes = encode(&msg);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(msg, back);
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let msg = random_message(&mut rng, PayloadKind::Projected);
        assert_eq!(encode(&msg), encode(&msg));
    }

    #[test]
    fn minimal_raw_frame_has_known_length() {
        let bundle = SummaryBundle {
            site_id: 0,
            h: 0,
            n: 1,
            g00: DMatrix::zeros(1, 1),
            g01: DMatrix::zeros(1, 1),
            g11: DMatrix::zeros(1, 1),
            v0: DVector::zeros(1),
            v1: DVector::zeros(1),
        };
        let bytes = encode(&StatsMessage::raw(&bundle));
        assert_eq!(bytes.len(), HEADER_LEN + 5 * 8 + 4);
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let msg = random_message(&mut rng, PayloadKind::Projected);
        let mut bytes = encode(&msg);
        let idx = HEADER_LEN + 3;
        bytes[idx] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(TransportError::BadChecksum)));
    }

    #[test]
    fn bad_magic_version_and_truncation_are_distinguished() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let msg = random_message(&mut rng, PayloadKind::RawBundle);
        let bytes = encode(&msg);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(TransportError::BadMagic)));

        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        // the version check runs before the checksum check
        assert!(matches!(
            decode(&bad_version),
            Err(TransportError::BadVersion(_))
        ));

        let truncated = &bytes[..bytes.len() - 7];
        assert!(matches!(
            decode(truncated),
            Err(TransportError::TruncatedFrame { .. })
        ));
    }

    #[test]
    fn message_size_is_independent_of_trajectory_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = random_message(&mut rng, PayloadKind::Projected);
        let mut b = a.clone();
        a.n = 5;
        b.n = 5_000_000;
        assert_eq!(encode(&a).len(), encode(&b).len());
    }

    fn round_inputs(k: usize, horizon: usize, d0: usize, seed: u64) -> Vec<SiteRoundInput> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|site| {
                let stats: Vec<ProjectedHomogeneousStats> = (0..horizon)
                    .map(|h| ProjectedHomogeneousStats {
                        site_id: site,
                        h,
                        n: 10,
                        a: DMatrix::from_fn(d0, d0, |_, _| rng.gen_range(-1.0..1.0)),
                        b: DVector::from_fn(d0, |_, _| rng.gen_range(-1.0..1.0)),
                    })
                    .collect();
                SiteRoundInput::from_projected(site, &stats)
            })
            .collect()
    }

    #[test]
    fn single_site_round_is_empty() {
        let sites = round_inputs(1, 3, 2, 5);
        let mut hub = FederationHub::new();
        let outcome = hub
            .exchange_round(7, &sites, &TransportKind::InProcess, DEFAULT_TIMEOUT)
            .unwrap();
        assert!(outcome.snapshots[0].is_empty());
        assert!(outcome.manifest.receipts.is_empty());
        assert_eq!(outcome.manifest.total_bytes, 0);
    }

    #[test]
    fn round_delivers_foreign_messages_within_byte_bound() {
        let sites = round_inputs(3, 2, 4, 6);
        let mut hub = FederationHub::new();
        let outcome = hub
            .exchange_round(1, &sites, &TransportKind::InProcess, DEFAULT_TIMEOUT)
            .unwrap();
        for (k, snapshot) in outcome.snapshots.iter().enumerate() {
            assert_eq!(snapshot.len(), 2 * 2, "site {k} should see (K-1)*H messages");
            assert!(snapshot.iter().all(|m| m.site_id != k as u32));
        }
        assert_eq!(outcome.manifest.receipts.len(), 6);
        // projected payloads with d1 = 0 live comfortably inside the bound
        let bound = round_byte_bound(3, 2, 4, 0);
        assert!(outcome.manifest.total_bytes <= bound);
        let exact: usize = outcome.manifest.receipts.iter().map(|r| r.bytes).sum();
        assert_eq!(outcome.manifest.total_bytes, exact);
    }

    #[test]
    fn socket_and_in_process_snapshots_are_identical() {
        let sites = round_inputs(3, 2, 3, 7);
        let mut hub = FederationHub::new();
        let in_proc = hub
            .exchange_round(10, &sites, &TransportKind::InProcess, DEFAULT_TIMEOUT)
            .unwrap();
        let socket = hub
            .exchange_round(
                11,
                &sites,
                &TransportKind::Socket("127.0.0.1:0".into()),
                DEFAULT_TIMEOUT,
            )
            .unwrap();
        assert_eq!(in_proc.snapshots, socket.snapshots);
        assert_eq!(in_proc.manifest.total_bytes, socket.manifest.total_bytes);
    }

    #[test]
    fn second_round_with_same_run_id_is_refused() {
        let sites = round_inputs(2, 1, 2, 8);
        let mut hub = FederationHub::new();
        hub.exchange_round(42, &sites, &TransportKind::InProcess, DEFAULT_TIMEOUT)
            .unwrap();
        assert!(matches!(
            hub.exchange_round(42, &sites, &TransportKind::InProcess, DEFAULT_TIMEOUT),
            Err(TransportError::RoundAlreadyCompleted { run_id: 42 })
        ));
    }

    #[test]
    fn duplicate_step_message_is_rejected() {
        let mut sites = round_inputs(2, 2, 2, 9);
        let dup = sites[0].messages[0].clone();
        sites[0].messages[1] = dup;
        let mut hub = FederationHub::new();
        assert!(matches!(
            hub.exchange_round(1, &sites, &TransportKind::InProcess, DEFAULT_TIMEOUT),
            Err(TransportError::DuplicateMessage { .. })
        ));
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut sites = round_inputs(2, 2, 2, 10);
        let other = round_inputs(1, 2, 3, 11);
        sites[1].messages = other[0].messages.clone();
        sites[1].site_id = 1;
        for m in &mut sites[1].messages {
            m.site_id = 1;
        }
        let mut hub = FederationHub::new();
        assert!(matches!(
            hub.exchange_round(1, &sites, &TransportKind::InProcess, DEFAULT_TIMEOUT),
            Err(TransportError::DimMismatch(_))
        ));
    }

    #[test]
    fn silent_peer_times_out() {
        // a listener that accepts and never answers
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let _server = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            std::thread::sleep(Duration::from_millis(400));
            drop(stream);
        });
        let sites = round_inputs(1, 1, 2, 12);
        let err = site_client(&addr, &sites[0], Duration::from_millis(50)).unwrap_err();
        assert!(matches!(err, TransportError::Timeout { .. }));
    }

    #[test]
    fn raw_bundle_projects_at_receiver() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let phi0 = DMatrix::from_fn(8, 2, |_, _| rng.gen_range(-1.0..1.0));
        let phi1 = DMatrix::from_fn(8, 3, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(8, |_, _| rng.gen_range(0.0..1.0));
        let bundle = SummaryBundle::from_designs(4, 1, &phi0, &phi1, &y);
        let msg = StatsMessage::raw(&bundle);
        let receiver_side = decode(&encode(&msg)).unwrap().to_projected();
        let sender_side = project_homogeneous(&bundle);
        assert!((&receiver_side.a - &sender_side.a).norm() < 1e-12);
        assert!((&receiver_side.b - &sender_side.b).norm() < 1e-12);
    }
}
