//! Child-process backend speaking newline-delimited JSON over stdio.
//!
//! The server's first line is a handshake
//! `{"protocol": 1, "num_classes": u32, "max_inflight": u32, "deterministic": bool}`.
//! Each request `{"id", "op": "demask"|"segment", "image", "mask", "out"}`
//! names files in a per-batch scratch directory; the server answers
//! `{"id", "status": "ok"|"error", "message"?}` after writing `out`, in any order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DemaskingBackend, SegmentationBackend};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MaskedImage, SegMap};
use crate::io;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub num_classes: u32,
    pub max_inflight: u32,
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Demask,
    Segment,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub op: Op,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ProcessConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    /// Per-response wait, including the handshake.
    pub timeout: Duration,
    /// Parent for per-batch scratch directories; system temp dir when `None`.
    pub scratch_root: Option<PathBuf>,
}

impl ProcessConfig {
    pub fn new<S: Into<String>>(command: impl IntoIterator<Item = S>) -> Self {
        Self {
            command: command.into_iter().map(Into::into).collect(),
            timeout: Duration::from_secs(60),
            scratch_root: None,
        }
    }

    /// Splits a `process:<cmd>` style command line on whitespace.
    pub fn from_command_line(line: &str) -> Self {
        Self::new(line.split_whitespace())
    }
}

struct Channel {
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    poisoned: bool,
}

/// Both a demasker and a segmenter, backed by one server process.
pub struct ProcessBackend {
    config: ProcessConfig,
    handshake: Handshake,
    channel: Mutex<Channel>,
    child: Mutex<Child>,
}

struct Job {
    op: Op,
    image: PathBuf,
    mask: Option<PathBuf>,
    out: PathBuf,
}

impl ProcessBackend {
    pub fn spawn(config: ProcessConfig) -> Result<Self> {
        let (program, args) = config.command.split_first().ok_or_else(|| {
            Error::InvalidArgument("empty backend command".into())
        })?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend {
                mask_index: None,
                message: format!("failed to start {program:?}: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let first = match rx.recv_timeout(config.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(Error::Io(e)),
            Err(RecvTimeoutError::Timeout) => {
                let _ = child.kill();
                return Err(Error::Protocol {
                    id: None,
                    message: "no handshake before timeout".into(),
                });
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Protocol {
                    id: None,
                    message: "backend exited before handshake".into(),
                })
            }
        };
        let handshake: Handshake = serde_json::from_str(&first).map_err(|e| Error::Protocol {
            id: None,
            message: format!("malformed handshake {first:?}: {e}"),
        })?;
        if handshake.protocol != PROTOCOL_VERSION {
            let _ = child.kill();
            return Err(Error::Protocol {
                id: None,
                message: format!("unsupported protocol version {}", handshake.protocol),
            });
        }
        if handshake.max_inflight == 0 || handshake.num_classes == 0 {
            let _ = child.kill();
            return Err(Error::Protocol {
                id: None,
                message: "handshake needs max_inflight >= 1 and num_classes >= 1".into(),
            });
        }
        Ok(Self {
            config,
            handshake,
            channel: Mutex::new(Channel {
                stdin,
                lines: rx,
                next_id: 0,
                poisoned: false,
            }),
            child: Mutex::new(child),
        })
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn scratch(&self) -> Result<tempfile::TempDir> {
        Ok(match &self.config.scratch_root {
            Some(root) => {
                std::fs::create_dir_all(root)?;
                tempfile::Builder::new().prefix("job-").tempdir_in(root)?
            }
            None => tempfile::Builder::new().prefix("patchcert-job-").tempdir()?,
        })
    }

    /// Runs all jobs keeping at most `max_inflight` outstanding; returns the
    /// request id used for each job, in job order.
    fn run(&self, jobs: &[Job]) -> Result<Vec<u64>> {
        let mut ch = self.channel.lock().unwrap();
        if ch.poisoned {
            return Err(Error::Protocol {
                id: None,
                message: "backend connection is unusable after an earlier failure".into(),
            });
        }
        let result = Self::run_locked(&mut ch, jobs, &self.handshake, self.config.timeout);
        if let Err(e) = &result {
            ch.poisoned = !matches!(e, Error::Backend { .. });
        }
        result
    }

    fn run_locked(
        ch: &mut Channel,
        jobs: &[Job],
        handshake: &Handshake,
        timeout: Duration,
    ) -> Result<Vec<u64>> {
        let window = handshake.max_inflight as usize;
        let ids: Vec<u64> = (0..jobs.len() as u64).map(|i| ch.next_id + i).collect();
        ch.next_id += jobs.len() as u64;
        let mut pending: HashMap<u64, usize> = HashMap::new();
        let mut next = 0;
        // first error reported by the server; outstanding requests are still
        // drained so the connection stays in sync
        let mut failure: Option<Error> = None;
        while next < jobs.len() || !pending.is_empty() {
            while failure.is_none() && next < jobs.len() && pending.len() < window {
                let job = &jobs[next];
                let req = Request {
                    id: ids[next],
                    op: job.op.clone(),
                    image: job.image.clone(),
                    mask: job.mask.clone(),
                    out: job.out.clone(),
                };
                let mut line = serde_json::to_vec(&req)?;
                line.push(b'\n');
                ch.stdin.write_all(&line).and_then(|_| ch.stdin.flush()).map_err(|e| {
                    Error::Protocol {
                        id: Some(req.id),
                        message: format!("failed to send request: {e}"),
                    }
                })?;
                pending.insert(req.id, next);
                next += 1;
            }
            if pending.is_empty() {
                break;
            }
            let oldest = *pending.keys().min().expect("pending request");
            let line = match ch.lines.recv_timeout(timeout) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => {
                    return Err(Error::Protocol {
                        id: Some(oldest),
                        message: format!("read failed: {e}"),
                    })
                }
                Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout { id: oldest }),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Protocol {
                        id: Some(oldest),
                        message: "backend closed its output".into(),
                    })
                }
            };
            let resp: Response = serde_json::from_str(&line).map_err(|e| Error::Protocol {
                id: Some(oldest),
                message: format!("malformed response {line:?}: {e}"),
            })?;
            let Some(job_idx) = pending.remove(&resp.id) else {
                return Err(Error::Protocol {
                    id: Some(resp.id),
                    message: "response id matches no outstanding request".into(),
                });
            };
            if resp.status == Status::Error && failure.is_none() {
                failure = Some(Error::Backend {
                    mask_index: Some(job_idx),
                    message: format!(
                        "request {}: {}",
                        resp.id,
                        resp.message.unwrap_or_else(|| "unspecified error".into())
                    ),
                });
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(ids)
    }

    /// Sends the same demask request twice and compares the results bit-exactly.
    pub fn probe_determinism(&self, sample: &MaskedImage) -> Result<bool> {
        let out = self.demask_batch(&[sample.clone(), sample.clone()])?;
        Ok(out[0].to_u8() == out[1].to_u8())
    }

    fn shape_err(id: u64, expected: String, actual: String) -> Error {
        Error::BackendDimension {
            id,
            expected,
            actual,
        }
    }
}

fn read_output<T>(path: &Path, id: u64, read: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::Protocol {
            id: Some(id),
            message: format!("reported ok but wrote no {}", path.display()),
        });
    }
    read(path).map_err(|e| Error::Protocol {
        id: Some(id),
        message: format!("unreadable output: {e}"),
    })
}

impl DemaskingBackend for ProcessBackend {
    fn demask(&self, input: &MaskedImage) -> Result<ImageGrid> {
        Ok(self.demask_batch(std::slice::from_ref(input))?.remove(0))
    }

    fn demask_batch(&self, inputs: &[MaskedImage]) -> Result<Vec<ImageGrid>> {
        let dir = self.scratch()?;
        let mut jobs = Vec::with_capacity(inputs.len());
        for (k, m) in inputs.iter().enumerate() {
            let image = dir.path().join(format!("masked_{k:03}.png"));
            let mask = dir.path().join(format!("mask_{k:03}.pgm"));
            io::write_png(&image, m.image())?;
            io::write_mask(&mask, m.mask())?;
            jobs.push(Job {
                op: Op::Demask,
                image,
                mask: Some(mask),
                out: dir.path().join(format!("demasked_{k:03}.png")),
            });
        }
        let ids = self.run(&jobs)?;
        let mut out = Vec::with_capacity(inputs.len());
        for ((job, id), input) in jobs.iter().zip(ids).zip(inputs) {
            let img = read_output(&job.out, id, io::read_png)?;
            if !img.same_shape(input.image()) {
                return Err(Self::shape_err(id, input.image().shape_string(), img.shape_string()));
            }
            out.push(img);
        }
        Ok(out)
    }

    fn is_deterministic(&self) -> bool {
        self.handshake.deterministic
    }

    fn fingerprint(&self) -> String {
        format!(
            "process:{} (protocol {}, deterministic={})",
            self.config.command.join(" "),
            self.handshake.protocol,
            self.handshake.deterministic
        )
    }
}

impl SegmentationBackend for ProcessBackend {
    fn segment(&self, image: &ImageGrid) -> Result<SegMap> {
        Ok(self.segment_batch(std::slice::from_ref(image))?.remove(0))
    }

    fn segment_batch(&self, images: &[ImageGrid]) -> Result<Vec<SegMap>> {
        let dir = self.scratch()?;
        let ext = io::segmap_extension(self.handshake.num_classes);
        let mut jobs = Vec::with_capacity(images.len());
        for (k, x) in images.iter().enumerate() {
            let image = dir.path().join(format!("input_{k:03}.png"));
            io::write_png(&image, x)?;
            jobs.push(Job {
                op: Op::Segment,
                image,
                mask: None,
                out: dir.path().join(format!("segmentation_{k:03}.{ext}")),
            });
        }
        let ids = self.run(&jobs)?;
        let classes = self.handshake.num_classes;
        let mut out = Vec::with_capacity(images.len());
        for ((job, id), x) in jobs.iter().zip(ids).zip(images) {
            let seg = read_output(&job.out, id, |p| io::read_segmap(p, Some(classes)))?;
            if seg.height() != x.height() || seg.width() != x.width() {
                return Err(Self::shape_err(
                    id,
                    format!("{}x{}", x.height(), x.width()),
                    format!("{}x{}", seg.height(), seg.width()),
                ));
            }
            out.push(seg);
        }
        Ok(out)
    }

    fn num_classes(&self) -> u32 {
        self.handshake.num_classes
    }

    fn is_deterministic(&self) -> bool {
        self.handshake.deterministic
    }

    fn fingerprint(&self) -> String {
        DemaskingBackend::fingerprint(self)
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        let mut child = self.child.lock().unwrap();
        let _ = child.kill();
        let _ = child.wait();
    }
}
