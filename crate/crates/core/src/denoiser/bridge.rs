//! Client and reference server for external noise predictors.
//!
//! One request is in flight at a time. Sessions talk to a child process over
//! stdio or to a TCP endpoint; both use the framing in [`super::wire`].

use std::io::{Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use log::{debug, warn};

use super::wire::{read_message, write_message, Header, Message, PROTOCOL_VERSION};
use super::{check_dims, NoisePredictor};
use crate::error::{invalid, io_err, Error, Result};
use crate::latent::{Dims, LatentClip};
use crate::schedule::StepRef;
use crate::world::{PromptLibrary, PromptSpec};

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BridgeTarget {
    /// argv of a child process speaking the protocol on stdin/stdout.
    Command(Vec<String>),
    /// `host:port` of a TCP server.
    Tcp(String),
}

impl BridgeTarget {
    /// `tcp://host:port` selects TCP; anything else is split as a shell
    /// command line.
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(addr) = spec.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(invalid("empty tcp endpoint"));
            }
            return Ok(Self::Tcp(addr.to_string()));
        }
        let argv = shlex::split(spec).ok_or_else(|| invalid(format!("cannot parse bridge command {spec:?}")))?;
        if argv.is_empty() {
            return Err(invalid("empty bridge command"));
        }
        Ok(Self::Command(argv))
    }
}

type BoxRead = Box<dyn Read + Send>;
type BoxWrite = Box<dyn Write + Send>;

enum Peer {
    Child(Child),
    Tcp(TcpStream),
    Streams,
}

impl Peer {
    fn terminate(&mut self) {
        match self {
            Peer::Child(child) => {
                let _ = child.kill();
                let _ = child.wait();
            }
            Peer::Tcp(s) => {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
            Peer::Streams => {}
        }
    }
}

pub struct BridgeSession {
    reader: Option<BoxRead>,
    writer: Option<BoxWrite>,
    peer: Peer,
    dims: Dims,
    protocol: u32,
    requests: u64,
}

impl std::fmt::Debug for BridgeSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeSession")
            .field("dims", &self.dims)
            .field("protocol", &self.protocol)
            .field("requests", &self.requests)
            .field("open", &self.is_open())
            .finish()
    }
}

impl BridgeSession {
    pub fn open(target: &BridgeTarget, dims: Dims) -> Result<Self> {
        Self::open_with_timeout(target, dims, DEFAULT_HANDSHAKE_TIMEOUT)
    }

    pub fn open_with_timeout(target: &BridgeTarget, dims: Dims, timeout: Duration) -> Result<Self> {
        match target {
            BridgeTarget::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| io_err(format!("spawning bridge {:?}", argv[0]), e))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Self::handshake(Box::new(stdout), Box::new(stdin), Peer::Child(child), dims, timeout)
            }
            BridgeTarget::Tcp(addr) => {
                let stream =
                    TcpStream::connect(addr).map_err(|e| io_err(format!("connecting to {addr}"), e))?;
                let _ = stream.set_nodelay(true);
                let r = stream.try_clone().map_err(|e| io_err("cloning tcp stream", e))?;
                let w = stream.try_clone().map_err(|e| io_err("cloning tcp stream", e))?;
                Self::handshake(Box::new(r), Box::new(w), Peer::Tcp(stream), dims, timeout)
            }
        }
    }

    /// Session over caller-provided streams (in-process servers, tests).
    pub fn from_streams(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        dims: Dims,
        timeout: Duration,
    ) -> Result<Self> {
        Self::handshake(Box::new(reader), Box::new(writer), Peer::Streams, dims, timeout)
    }

    fn handshake(
        reader: BoxRead,
        mut writer: BoxWrite,
        mut peer: Peer,
        dims: Dims,
        timeout: Duration,
    ) -> Result<Self> {
        let hello = Header::Hello {
            protocol: PROTOCOL_VERSION,
            shape: dims.to_array(),
        };
        if let Err(e) = write_message(&mut writer, &hello, &[]) {
            peer.terminate();
            return Err(e);
        }
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = reader;
            let reply = read_message(&mut reader);
            let _ = tx.send((reader, reply));
        });
        let (reader, reply) = match rx.recv_timeout(timeout) {
            Ok(v) => v,
            Err(_) => {
                peer.terminate();
                return Err(io_err(
                    "bridge handshake",
                    std::io::Error::new(
                        std::io::ErrorKind::TimedOut,
                        format!("no hello within {timeout:?}"),
                    ),
                ));
            }
        };
        let fail = |mut peer: Peer, e: Error| {
            peer.terminate();
            Err(e)
        };
        match reply {
            Ok(Some(Message {
                header: Header::Hello { protocol, shape },
                ..
            })) => {
                if protocol != PROTOCOL_VERSION {
                    return fail(
                        peer,
                        Error::Protocol(format!(
                            "bridge speaks protocol {protocol}, expected {PROTOCOL_VERSION}"
                        )),
                    );
                }
                if shape != dims.to_array() {
                    return fail(
                        peer,
                        Error::Protocol(format!("bridge shape {shape:?} != requested {dims}")),
                    );
                }
                debug!("bridge ready: protocol {protocol}, shape {dims}");
                Ok(Self {
                    reader: Some(reader),
                    writer: Some(writer),
                    peer,
                    dims,
                    protocol,
                    requests: 0,
                })
            }
            Ok(Some(Message {
                header: Header::Error { message },
                ..
            })) => fail(peer, Error::Protocol(format!("bridge rejected hello: {message}"))),
            Ok(Some(m)) => fail(
                peer,
                Error::Protocol(format!("expected hello, got {}", m.header.op())),
            ),
            Ok(None) => fail(peer, Error::Protocol("bridge closed before hello".into())),
            Err(e) => fail(peer, e),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn protocol(&self) -> u32 {
        self.protocol
    }

    pub fn requests(&self) -> u64 {
        self.requests
    }

    pub fn is_open(&self) -> bool {
        self.reader.is_some() && self.writer.is_some()
    }

    fn abort(&mut self, e: Error) -> Error {
        warn!("closing bridge session: {e}");
        self.reader = None;
        self.writer = None;
        self.peer.terminate();
        e
    }

    fn roundtrip(&mut self, header: &Header, payload: &[f32]) -> Result<Message> {
        let (Some(reader), Some(writer)) = (self.reader.as_mut(), self.writer.as_mut()) else {
            return Err(Error::State("bridge session is closed".into()));
        };
        let sent = write_message(writer, header, payload);
        let reply = sent.and_then(|_| read_message(reader));
        match reply {
            Ok(Some(m)) => Ok(m),
            Ok(None) => Err(self.abort(Error::Protocol("bridge closed mid-request".into()))),
            Err(e) => Err(self.abort(e)),
        }
    }

    /// Orderly shutdown: EOF to the peer, then reap it.
    pub fn close(mut self) -> Result<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<()> {
        self.writer = None;
        self.reader = None;
        match &mut self.peer {
            Peer::Child(child) => {
                let status = child.wait().map_err(|e| io_err("waiting for bridge", e))?;
                self.peer = Peer::Streams;
                if !status.success() {
                    return Err(Error::Protocol(format!("bridge exited with {status}")));
                }
            }
            Peer::Tcp(s) => {
                let _ = s.shutdown(std::net::Shutdown::Both);
                self.peer = Peer::Streams;
            }
            Peer::Streams => {}
        }
        Ok(())
    }
}

impl Drop for BridgeSession {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

impl NoisePredictor for BridgeSession {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn predict(
        &mut self,
        z_t: &LatentClip,
        prompt: &PromptSpec,
        step: StepRef,
        cfg_scale: f64,
    ) -> Result<LatentClip> {
        check_dims(self.dims, z_t)?;
        let shape = self.dims.to_array();
        let request = Header::Predict {
            t: step.timestep,
            step_index: step.step_index,
            prompt: prompt.id.clone(),
            cfg_scale,
            shape,
        };
        let reply = self.roundtrip(&request, z_t.data())?;
        self.requests += 1;
        match reply.header {
            Header::Epsilon { shape: got } if got == shape => {
                LatentClip::new(self.dims, reply.payload).map_err(|e| self.abort(Error::Protocol(e.to_string())))
            }
            Header::Epsilon { shape: got } => Err(self.abort(Error::Protocol(format!(
                "epsilon shape {got:?} != request shape {shape:?}"
            )))),
            Header::Error { message } => Err(Error::Remote(message)),
            other => Err(self.abort(Error::Protocol(format!(
                "unexpected {} reply to predict",
                other.op()
            )))),
        }
    }
}

/// Counters reported by [`serve`] when the client disconnects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub predicts: u64,
    pub errors: u64,
}

/// Server loop: answers the handshake, then one `epsilon` (or `error`) per
/// `predict` until the client closes the stream. Prompt ids resolve through
/// `prompts`. Malformed frames are answered with an error, then the loop
/// returns the protocol error.
pub fn serve(
    reader: &mut impl Read,
    writer: &mut impl Write,
    predictor: &mut dyn NoisePredictor,
    prompts: &PromptLibrary,
) -> Result<ServeStats> {
    let dims = predictor.dims();
    let mut stats = ServeStats::default();
    let reply_error = |w: &mut dyn Write, msg: String| {
        let mut w = w;
        write_message(&mut w, &Header::Error { message: msg }, &[])
    };

    let hello = match read_message(reader) {
        Ok(Some(m)) => m,
        Ok(None) => return Ok(stats),
        Err(e) => {
            let _ = reply_error(writer, e.to_string());
            return Err(e);
        }
    };
    match hello.header {
        Header::Hello { protocol, shape } => {
            if protocol != PROTOCOL_VERSION {
                let msg = format!("unsupported protocol {protocol}");
                reply_error(writer, msg.clone())?;
                return Err(Error::Protocol(msg));
            }
            if shape != dims.to_array() {
                let msg = format!("shape {shape:?} does not match served shape {:?}", dims.to_array());
                reply_error(writer, msg.clone())?;
                return Err(Error::Protocol(msg));
            }
            write_message(
                writer,
                &Header::Hello {
                    protocol: PROTOCOL_VERSION,
                    shape: dims.to_array(),
                },
                &[],
            )?;
        }
        other => {
            let msg = format!("expected hello, got {}", other.op());
            reply_error(writer, msg.clone())?;
            return Err(Error::Protocol(msg));
        }
    }

    loop {
        let msg = match read_message(reader) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(stats),
            Err(e) => {
                let _ = reply_error(writer, e.to_string());
                return Err(e);
            }
        };
        let Header::Predict {
            t,
            step_index,
            prompt,
            cfg_scale,
            shape,
        } = msg.header
        else {
            let m = format!("unexpected {} request", msg.header.op());
            reply_error(writer, m.clone())?;
            return Err(Error::Protocol(m));
        };
        if shape != dims.to_array() {
            let m = format!("request shape {shape:?} != session shape {:?}", dims.to_array());
            reply_error(writer, m.clone())?;
            return Err(Error::Protocol(m));
        }
        let result = LatentClip::new(dims, msg.payload).and_then(|z| {
            let spec = prompts.get(&prompt)?;
            predictor.predict(&z, &spec, StepRef { step_index, timestep: t }, cfg_scale)
        });
        match result {
            Ok(eps) => {
                write_message(writer, &Header::Epsilon { shape }, eps.data())?;
                stats.predicts += 1;
            }
            Err(e) => {
                stats.errors += 1;
                reply_error(writer, e.to_string())?;
            }
        }
    }
}
