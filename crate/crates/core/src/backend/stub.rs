//! Echo stub server for the backend wire protocol.
//!
//! `demask` re-zeroes hidden pixels and writes the image back unchanged;
//! `segment` writes a constant (or dominant-channel) label map. Requests are
//! answered from worker threads after a small id-dependent delay, so
//! responses arrive out of order. Fault switches exist to exercise the
//! engine's error handling.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use super::process::{Handshake, Op, Request, Response, Status, PROTOCOL_VERSION};
use super::{SegmentationBackend, ToyOracleSegmenter};
use crate::error::Result;
use crate::grid::{apply_mask, ImageGrid, SegMap};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StubSegment {
    Constant(u16),
    DominantChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StubFault {
    /// Outputs one column wider than the input.
    WrongDims,
    /// Every `segment` request fails.
    FailSegment,
    /// Responses carry an id that was never requested.
    WrongId,
    /// Never answers requests.
    Hang,
    /// Handshake line is not JSON.
    BadHandshake,
    /// Demask output gets time-seeded noise; advertises deterministic=false.
    Noise,
}

#[derive(Clone, Debug)]
pub struct StubOptions {
    pub num_classes: u32,
    pub max_inflight: u32,
    pub segment: StubSegment,
    pub fault: Option<StubFault>,
    pub max_delay_ms: u64,
}

impl Default for StubOptions {
    fn default() -> Self {
        Self {
            num_classes: 3,
            max_inflight: 4,
            segment: StubSegment::Constant(0),
            fault: None,
            max_delay_ms: 5,
        }
    }
}

/// Serves requests from `input` until EOF, writing handshake and responses to `output`.
pub fn serve_stub<R, W>(opts: StubOptions, input: R, output: W) -> Result<()>
where
    R: BufRead,
    W: Write + Send + 'static,
{
    let out = Arc::new(Mutex::new(output));
    {
        let mut w = out.lock().unwrap();
        if opts.fault == Some(StubFault::BadHandshake) {
            writeln!(w, "hello")?;
        } else {
            let hs = Handshake {
                protocol: PROTOCOL_VERSION,
                num_classes: opts.num_classes,
                max_inflight: opts.max_inflight,
                deterministic: opts.fault != Some(StubFault::Noise),
            };
            writeln!(w, "{}", serde_json::to_string(&hs)?)?;
        }
        w.flush()?;
    }
    let inflight = Arc::new(AtomicUsize::new(0));
    let mut workers = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if opts.fault == Some(StubFault::Hang) {
            continue;
        }
        let now = inflight.fetch_add(1, Ordering::SeqCst) + 1;
        let opts = opts.clone();
        let out = Arc::clone(&out);
        let inflight = Arc::clone(&inflight);
        workers.push(thread::spawn(move || {
            let resp = match serde_json::from_str::<Request>(&line) {
                Err(e) => Response {
                    id: u64::MAX,
                    status: Status::Error,
                    message: Some(format!("malformed request: {e}")),
                },
                Ok(req) => {
                    let delay = (req.id.wrapping_mul(7919) % (opts.max_delay_ms + 1)) as u64;
                    thread::sleep(Duration::from_millis(delay));
                    let result = if now > opts.max_inflight as usize {
                        Err(format!("max_inflight {} exceeded ({now} outstanding)", opts.max_inflight))
                    } else {
                        handle(&opts, &req).map_err(|e| e.to_string())
                    };
                    let id = if opts.fault == Some(StubFault::WrongId) {
                        req.id + 1_000_000
                    } else {
                        req.id
                    };
                    match result {
                        Ok(()) => Response {
                            id,
                            status: Status::Ok,
                            message: None,
                        },
                        Err(m) => Response {
                            id,
                            status: Status::Error,
                            message: Some(m),
                        },
                    }
                }
            };
            // release the slot before answering so the engine may send the next one
            inflight.fetch_sub(1, Ordering::SeqCst);
            let mut w = out.lock().unwrap();
            let _ = writeln!(w, "{}", serde_json::to_string(&resp).unwrap());
            let _ = w.flush();
        }));
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}

fn handle(opts: &StubOptions, req: &Request) -> Result<()> {
    let image = io::read_png(&req.image)?;
    match req.op {
        Op::Demask => {
            let mask_path = req.mask.as_ref().ok_or_else(|| {
                crate::error::Error::InvalidArgument("demask request without mask".into())
            })?;
            let mask = io::read_mask(mask_path)?;
            let mut out = apply_mask(&image, &mask)?.image().clone();
            if opts.fault == Some(StubFault::Noise) {
                let nanos = SystemTime::now().duration_since(UNIX_EPOCH).unwrap().subsec_nanos();
                let bump = (nanos % 200 + 1) as f32 / 255.0;
                out = ImageGrid::from_fn(out.height(), out.width(), out.channels(), |i, j, c| {
                    (out.get(i, j, c) + bump).min(1.0)
                })?;
            }
            if opts.fault == Some(StubFault::WrongDims) {
                out = ImageGrid::filled(out.height(), out.width() + 1, out.channels(), 0.0)?;
            }
            io::write_png(&req.out, &out)
        }
        Op::Segment => {
            if opts.fault == Some(StubFault::FailSegment) {
                return Err(crate::error::Error::InvalidArgument("segmenter unavailable".into()));
            }
            let width = image.width() + usize::from(opts.fault == Some(StubFault::WrongDims));
            let seg = match opts.segment {
                StubSegment::Constant(l) => SegMap::filled(image.height(), width, opts.num_classes, l)?,
                StubSegment::DominantChannel => {
                    let f = ToyOracleSegmenter::dominant_channel(image.channels());
                    let s = f.segment(&image)?;
                    SegMap::new(s.height(), s.width(), opts.num_classes, s.labels().to_vec())?
                }
            };
            io::write_segmap(&req.out, &seg)
        }
    }
}
