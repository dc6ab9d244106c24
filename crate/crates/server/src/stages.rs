//! The per-request pipeline: read_frame, parse_request, dispatch_engine,
//! render_response, write_frame, plus an error handler that answers with an
//! `Exception` frame when one of the first stages fails.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bhakti_core::pipeline::{Context, Pipeline, Stage, StageError};
use bhakti_core::wire::{self, WireError, WireRequest, WireResponse, MAX_FRAME_BYTES};
use bhakti_core::Engine;

/// Context key holding the [`Connection`].
pub const CONN: &str = "conn";
/// Set to `true` when the connection must be closed after this launch.
pub const CLOSE: &str = "close";
/// Command name of the request, once parsed.
pub const CMD: &str = "cmd";
/// Response state, once rendered.
pub const STATE: &str = "state";
const REQUEST: &str = "request";
const RESPONSE: &str = "response";

/// Both halves of a client connection. The reader is expected to time out
/// periodically (`WouldBlock`/`TimedOut`) so idle and stalled peers can be
/// told apart.
pub struct Connection {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
}

enum FrameError {
    Timeout,
    TooLarge,
}

impl Connection {
    pub fn new(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Self {
        Connection {
            reader: BufReader::new(reader),
            writer,
        }
    }

    /// Next non-blank line without its terminator, or `None` when the peer
    /// went away, stayed idle for `timeout`, or shutdown began while idle.
    fn read_frame(&mut self, timeout: Duration, shutdown: &AtomicBool) -> Result<Option<Vec<u8>>, FrameError> {
        let mut frame = Vec::new();
        let mut idle_since = Instant::now();
        let mut started: Option<Instant> = None;
        loop {
            let (consumed, complete) = match self.reader.fill_buf() {
                Ok([]) => return Ok(None),
                Ok(buf) => {
                    started.get_or_insert_with(Instant::now);
                    match buf.iter().position(|&b| b == b'\n') {
                        Some(pos) => {
                            frame.extend_from_slice(&buf[..pos]);
                            (pos + 1, true)
                        }
                        None => {
                            frame.extend_from_slice(buf);
                            (buf.len(), false)
                        }
                    }
                }
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => match started {
                    None if shutdown.load(Ordering::Relaxed) || idle_since.elapsed() >= timeout => return Ok(None),
                    Some(t) if t.elapsed() >= timeout => return Err(FrameError::Timeout),
                    _ => continue,
                },
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => return Ok(None),
            };
            self.reader.consume(consumed);
            if frame.len() > MAX_FRAME_BYTES {
                return Err(FrameError::TooLarge);
            }
            if complete {
                if frame.iter().all(u8::is_ascii_whitespace) {
                    frame.clear();
                    started = None;
                    idle_since = Instant::now();
                    continue;
                }
                return Ok(Some(frame));
            }
        }
    }

    fn write_frame(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.writer.write_all(bytes)?;
        self.writer.flush()
    }
}

fn conn(ctx: &mut Context) -> Result<&mut Connection, StageError> {
    ctx.get_mut::<Connection>(CONN)
        .ok_or_else(|| StageError::new("Internal: no connection in context"))
}

struct ReadFrame {
    read_timeout: Duration,
    shutdown: Arc<AtomicBool>,
}

impl Stage for ReadFrame {
    fn name(&self) -> &str {
        "read_frame"
    }

    fn performs_io(&self) -> bool {
        true
    }

    fn process(&self, ctx: &mut Context) -> Result<(), StageError> {
        let result = conn(ctx)?.read_frame(self.read_timeout, &self.shutdown);
        match result {
            Ok(Some(frame)) => ctx.input = frame,
            Ok(None) => ctx.eof = true,
            Err(e) => {
                ctx.insert(CLOSE, true);
                let err = match e {
                    FrameError::Timeout => WireError::ReadTimeout,
                    FrameError::TooLarge => WireError::FrameTooLarge,
                };
                return Err(StageError::new(err.to_string()));
            }
        }
        Ok(())
    }
}

struct ParseRequest;

impl Stage for ParseRequest {
    fn name(&self) -> &str {
        "parse_request"
    }

    fn process(&self, ctx: &mut Context) -> Result<(), StageError> {
        let req = wire::decode_request(&ctx.input).map_err(|e| StageError::new(e.to_string()))?;
        ctx.insert(CMD, req.cmd.as_str());
        ctx.insert(REQUEST, req);
        Ok(())
    }
}

struct DispatchEngine {
    engine: Arc<Engine>,
}

impl Stage for DispatchEngine {
    fn name(&self) -> &str {
        "dispatch_engine"
    }

    fn process(&self, ctx: &mut Context) -> Result<(), StageError> {
        let req = ctx
            .take::<WireRequest>(REQUEST)
            .ok_or_else(|| StageError::new("Internal: no parsed request"))?;
        ctx.insert(RESPONSE, wire::dispatch(req, &self.engine));
        Ok(())
    }
}

struct RenderResponse;

impl Stage for RenderResponse {
    fn name(&self) -> &str {
        "render_response"
    }

    fn process(&self, ctx: &mut Context) -> Result<(), StageError> {
        let resp = ctx
            .take::<WireResponse>(RESPONSE)
            .ok_or_else(|| StageError::new("Internal: no response to render"))?;
        ctx.insert(STATE, if resp.is_ok() { "OK" } else { "Exception" });
        ctx.output = wire::encode_response(&resp);
        Ok(())
    }
}

struct WriteFrame;

impl Stage for WriteFrame {
    fn name(&self) -> &str {
        "write_frame"
    }

    fn performs_io(&self) -> bool {
        true
    }

    fn process(&self, ctx: &mut Context) -> Result<(), StageError> {
        let out = std::mem::take(&mut ctx.output);
        let result = conn(ctx)?.write_frame(&out);
        ctx.output = out;
        result.map_err(|e| {
            ctx.insert(CLOSE, true);
            StageError::new(format!("IoError: writing response: {e}"))
        })
    }
}

/// Turns a stage failure into an `Exception` frame.
struct RespondWithError;

impl Stage for RespondWithError {
    fn name(&self) -> &str {
        "respond_with_error"
    }

    fn performs_io(&self) -> bool {
        true
    }

    fn process(&self, ctx: &mut Context) -> Result<(), StageError> {
        let Some(failure) = ctx.error.clone() else {
            return Ok(());
        };
        if failure.stage == "write_frame" {
            return Ok(());
        }
        ctx.insert(STATE, "Exception");
        ctx.output = wire::encode_response(&WireResponse::exception(failure.error.0));
        let out = ctx.output.clone();
        conn(ctx)?.write_frame(&out).map_err(|e| {
            ctx.insert(CLOSE, true);
            StageError::new(e.to_string())
        })
    }
}

/// The request pipeline the server runs once per request.
pub fn request_pipeline(engine: Arc<Engine>, read_timeout: Duration, shutdown: Arc<AtomicBool>) -> Pipeline {
    Pipeline::builder()
        .append_stage(ReadFrame { read_timeout, shutdown })
        .and_then(|b| b.append_stage(ParseRequest))
        .and_then(|b| b.append_stage(DispatchEngine { engine }))
        .and_then(|b| b.append_stage(RenderResponse))
        .and_then(|b| b.append_stage(WriteFrame))
        .map(|b| b.on_error(RespondWithError))
        .and_then(|b| b.build())
        .expect("stage names are distinct")
}

/// Serves requests on `conn` until the peer leaves, times out or the
/// connection has to be closed. Calls `on_request` after every answered
/// request.
pub fn serve_connection(pipeline: &Pipeline, mut conn: Connection, mut on_request: impl FnMut(&Context)) {
    loop {
        let mut ctx = Context::new();
        ctx.insert(CONN, conn);
        let mut ctx = pipeline.launch(ctx);
        let close = ctx.eof || ctx.get::<bool>(CLOSE).copied().unwrap_or(false);
        if !ctx.eof {
            on_request(&ctx);
        }
        match ctx.take::<Connection>(CONN) {
            Some(c) if !close => conn = c,
            _ => return,
        }
    }
}
