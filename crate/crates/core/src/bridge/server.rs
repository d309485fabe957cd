//! Realtime server. One loop owns the session and steps it against the
//! wall clock; each client gets its own thread that forwards frames from a
//! bounded queue and passes decoded commands back over a channel.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use super::message::{
    decode_client, encode, ClientMessage, ErrorMessage, Hello, ServerMessage, TelemetryFrame, PROTOCOL_VERSION,
};
use super::BridgeError;
use crate::scenario::{write_summary, Command, Recorder, RunSummary, ScenarioError, Session};

pub const DEFAULT_PORT: u16 = 8765;
pub const PORT_ENV: &str = "MOCOBOT_PORT";

/// Log of live commands written next to the telemetry.
pub const COMMANDS_JSONL: &str = "commands.jsonl";

/// Poll interval of idle client and accept loops.
const POLL: Duration = Duration::from_millis(5);

/// The stepping loop gives up catching up beyond this lag and slips the
/// clock instead.
const MAX_LAG: Duration = Duration::from_millis(250);

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Frames per wall-clock second.
    pub frame_rate: f64,
    /// Frames buffered per client before the oldest is dropped.
    pub queue_depth: usize,
    /// Telemetry, summary and command log directory.
    pub out: Option<PathBuf>,
    /// Stop when the session reaches its configured duration.
    pub stop_at_end: bool,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            frame_rate: 30.0,
            queue_depth: 8,
            out: None,
            stop_at_end: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServeReport {
    pub summary: RunSummary,
    /// Wall-clock time served, pauses excluded (s).
    pub wall_time: f64,
    /// Simulated time advanced, across resets (s).
    pub stepped_time: f64,
    pub frames: u64,
    pub clients: u64,
    pub dropped_frames: u64,
}

/// Outgoing messages of one client. Frames beyond the depth push out the
/// oldest; replies are never dropped.
#[derive(Debug, Default)]
pub(crate) struct Outbox {
    frames: VecDeque<Arc<str>>,
    replies: VecDeque<String>,
    depth: usize,
    pub(crate) dropped: u64,
}

impl Outbox {
    pub(crate) fn new(depth: usize) -> Self {
        Self {
            depth: depth.max(1),
            ..Default::default()
        }
    }

    pub(crate) fn push_frame(&mut self, f: Arc<str>) {
        if self.frames.len() == self.depth {
            self.frames.pop_front();
            self.dropped += 1;
        }
        self.frames.push_back(f);
    }

    fn push_reply(&mut self, r: String) {
        self.replies.push_back(r);
    }

    /// Replies first, then frames oldest first.
    pub(crate) fn drain(&mut self) -> Vec<String> {
        let mut out: Vec<String> = self.replies.drain(..).collect();
        out.extend(self.frames.drain(..).map(|f| f.to_string()));
        out
    }
}

struct Client {
    id: u64,
    outbox: Mutex<Outbox>,
    closed: AtomicBool,
}

type Clients = Arc<Mutex<Vec<Arc<Client>>>>;

fn error_text(message: String) -> String {
    encode(&ServerMessage::Error(ErrorMessage {
        version: PROTOCOL_VERSION,
        message,
    }))
}

pub struct Bridge {
    listener: TcpListener,
}

impl Bridge {
    /// Bind the listening socket. A port in use is an error here rather
    /// than at the first connection.
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, BridgeError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| BridgeError::Bind(e.to_string()))?
            .next()
            .ok_or_else(|| BridgeError::Bind("no address".into()))?;
        let listener = TcpListener::bind(addr).map_err(|e| BridgeError::Bind(format!("{addr}: {e}")))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| BridgeError::Io(e.to_string()))?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound socket has an address")
    }

    /// Step `session` in real time and serve it until `stop` is set, or
    /// until the configured duration with [`ServeOptions::stop_at_end`].
    pub fn serve(self, mut session: Session, opts: &ServeOptions, stop: Arc<AtomicBool>) -> Result<ServeReport, BridgeError> {
        if !session.config().humans.iter().any(|h| h.profile.is_interactive()) {
            log::warn!("no interactive human in '{}'; clients can only watch and switch modes", session.config().name);
        }
        let clients: Clients = Arc::default();
        let (tx, rx) = mpsc::channel();
        let hello = Arc::<str>::from(encode(&ServerMessage::Hello(Hello::new(&session, opts.frame_rate))));
        let accept_stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let clients = clients.clone();
            let stop = accept_stop.clone();
            let depth = opts.queue_depth;
            thread::spawn(move || accept_loop(self.listener, clients, tx, hello, depth, stop))
        };
        log::info!("serving '{}'", session.config().name);
        let result = step_loop(&mut session, opts, &stop, &clients, &rx);
        accept_stop.store(true, Ordering::SeqCst);
        for c in clients.lock().expect("client list").iter() {
            c.closed.store(true, Ordering::SeqCst);
        }
        let served = acceptor.join().unwrap_or(0);
        let mut report = result?;
        report.clients = served;
        Ok(report)
    }
}

fn accept_loop(
    listener: TcpListener,
    clients: Clients,
    tx: Sender<(u64, Command)>,
    hello: Arc<str>,
    depth: usize,
    stop: Arc<AtomicBool>,
) -> u64 {
    let next_id = AtomicU64::new(0);
    let mut workers = vec![];
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let id = next_id.fetch_add(1, Ordering::SeqCst);
                let client = Arc::new(Client {
                    id,
                    outbox: Mutex::new(Outbox::new(depth)),
                    closed: AtomicBool::new(false),
                });
                client.outbox.lock().expect("outbox").push_reply(hello.to_string());
                clients.lock().expect("client list").push(client.clone());
                let tx = tx.clone();
                log::info!("client {id} connected from {peer}");
                workers.push(thread::spawn(move || {
                    if let Err(e) = client_loop(stream, &client, &tx) {
                        log::info!("client {id} dropped: {e}");
                    }
                    client.closed.store(true, Ordering::SeqCst);
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    for w in workers {
        let _ = w.join();
    }
    next_id.load(Ordering::SeqCst)
}

fn client_loop(stream: TcpStream, client: &Client, tx: &Sender<(u64, Command)>) -> Result<(), BridgeError> {
    let io = |e: std::io::Error| BridgeError::Io(e.to_string());
    stream.set_nonblocking(false).map_err(io)?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).map_err(io)?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| BridgeError::Io(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(POLL)).map_err(io)?;
    loop {
        // read the flag first so messages queued before closing still go out
        let closing = client.closed.load(Ordering::SeqCst);
        let outgoing = client.outbox.lock().expect("outbox").drain();
        for text in outgoing {
            ws.write(Message::text(text)).map_err(ws_err)?;
        }
        ws.flush().map_err(ws_err)?;
        if closing {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(t)) => handle_incoming(t.as_bytes(), client, tx),
            Ok(Message::Binary(b)) => handle_incoming(&b, client, tx),
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(ws_err(e)),
        }
    }
}

fn ws_err(e: tungstenite::Error) -> BridgeError {
    BridgeError::Io(e.to_string())
}

fn handle_incoming(bytes: &[u8], client: &Client, tx: &Sender<(u64, Command)>) {
    match decode_client(bytes) {
        Ok(ClientMessage::Command { command, .. }) => {
            // the stepping loop has gone away; nothing left to apply to
            let _ = tx.send((client.id, command));
        }
        Ok(ClientMessage::Hello { .. }) => {}
        Err(e) => {
            let reply = error_text(format!("malformed message: {e}"));
            client.outbox.lock().expect("outbox").push_reply(reply);
        }
    }
}

struct CommandLog {
    file: BufWriter<File>,
    written: usize,
}

impl CommandLog {
    fn append(&mut self, session: &Session) -> Result<(), ScenarioError> {
        let log = session.command_log();
        for entry in &log[self.written..] {
            let line = serde_json::to_string(entry).expect("commands serialize");
            writeln!(self.file, "{line}").map_err(|e| ScenarioError::Io(e.to_string()))?;
        }
        if log.len() > self.written {
            self.file.flush().map_err(|e| ScenarioError::Io(e.to_string()))?;
        }
        self.written = log.len();
        Ok(())
    }
}

enum Sink {
    Files(Recorder<BufWriter<File>>, CommandLog),
    Memory(Recorder<std::io::Sink>),
}

impl Sink {
    fn open(session: &Session, out: &Option<PathBuf>) -> Result<Self, ScenarioError> {
        match out {
            Some(dir) => {
                let rec = Recorder::create(dir, session)?;
                let path = dir.join(COMMANDS_JSONL);
                let file = File::create(&path).map_err(|e| ScenarioError::io(&path, e))?;
                Ok(Sink::Files(
                    rec,
                    CommandLog {
                        file: BufWriter::new(file),
                        written: 0,
                    },
                ))
            }
            None => {
                let s = std::io::sink;
                let tw = crate::scenario::TelemetryWriter::new(s(), s(), s(), s())?;
                Ok(Sink::Memory(Recorder::new(session, tw)?))
            }
        }
    }

    fn observe(&mut self, s: &Session) -> Result<(), ScenarioError> {
        match self {
            Sink::Files(r, _) => r.observe(s),
            Sink::Memory(r) => r.observe(s),
        }
    }

    fn commands(&mut self, s: &Session) -> Result<(), ScenarioError> {
        match self {
            Sink::Files(_, log) => log.append(s),
            Sink::Memory(_) => Ok(()),
        }
    }

    fn flush(&mut self) -> Result<(), ScenarioError> {
        match self {
            Sink::Files(r, _) => r.flush(),
            Sink::Memory(r) => r.flush(),
        }
    }

    fn finish(self, s: &Session, fault: Option<String>, out: &Option<PathBuf>) -> Result<RunSummary, ScenarioError> {
        let summary = match self {
            Sink::Files(r, mut log) => {
                log.append(s)?;
                r.finish(s, fault)?
            }
            Sink::Memory(r) => r.finish(s, fault)?,
        };
        if let Some(dir) = out {
            write_summary(dir, &summary)?;
        }
        Ok(summary)
    }
}

fn broadcast(clients: &Clients, text: Arc<str>) -> u64 {
    let mut list = clients.lock().expect("client list");
    list.retain(|c| !c.closed.load(Ordering::SeqCst));
    let mut dropped = 0;
    for c in list.iter() {
        let mut ob = c.outbox.lock().expect("outbox");
        let before = ob.dropped;
        ob.push_frame(text.clone());
        dropped += ob.dropped - before;
    }
    dropped
}

fn reply(clients: &Clients, id: u64, text: String) {
    if let Some(c) = clients.lock().expect("client list").iter().find(|c| c.id == id) {
        c.outbox.lock().expect("outbox").push_reply(text);
    }
}

fn step_loop(
    session: &mut Session,
    opts: &ServeOptions,
    stop: &AtomicBool,
    clients: &Clients,
    rx: &Receiver<(u64, Command)>,
) -> Result<ServeReport, BridgeError> {
    let mut sink = Sink::open(session, &opts.out)?;
    let rate = session.config().rates.physics;
    let frame_period = Duration::from_secs_f64(1.0 / opts.frame_rate);
    let end = session.end_tick();

    // wall clock anchor and the ticks stepped up to it; re-anchored on
    // resume and when the loop falls too far behind
    let mut anchor = Instant::now();
    let mut anchor_ticks = 0u64;
    let mut stepped = 0u64;
    let mut running = Duration::ZERO;
    let mut last = Instant::now();
    let mut next_frame = Instant::now();
    let (mut frames, mut dropped) = (0u64, 0u64);
    let mut fault = None;
    let at_end = |s: &Session| opts.stop_at_end && s.world.tick >= end;

    while !stop.load(Ordering::SeqCst) && !at_end(session) {
        let was_paused = session.paused();
        let now = Instant::now();
        if !was_paused {
            running += now - last;
        }
        last = now;
        while let Ok((id, cmd)) = rx.try_recv() {
            if let Err(e) = session.submit(cmd) {
                reply(clients, id, error_text(format!("command rejected: {e}")));
            }
        }
        sink.commands(session)?;
        if was_paused && !session.paused() {
            anchor = now;
            anchor_ticks = stepped;
        }

        if !session.paused() {
            let mut due = anchor_ticks + ((now - anchor).as_secs_f64() * rate) as u64;
            let lag = due.saturating_sub(stepped) as f64 / rate;
            if lag > MAX_LAG.as_secs_f64() {
                log::warn!("stepping {lag:.3} s behind the wall clock; slipping");
                anchor = now;
                anchor_ticks = stepped;
                due = stepped + (MAX_LAG.as_secs_f64() * rate) as u64;
            }
            while stepped < due && !at_end(session) {
                if let Err(e) = session.step() {
                    fault = Some(e.to_string());
                    break;
                }
                stepped += 1;
                sink.observe(session)?;
                // commands applied at control ticks enter the log here
                sink.commands(session)?;
            }
            if fault.is_some() {
                break;
            }
        }

        let now = Instant::now();
        if now >= next_frame {
            let text: Arc<str> = encode(&ServerMessage::Frame(TelemetryFrame::capture(session))).into();
            dropped += broadcast(clients, text);
            frames += 1;
            sink.flush()?;
            next_frame += frame_period;
            if next_frame < now {
                next_frame = now + frame_period;
            }
        }
        let next_tick = anchor + Duration::from_secs_f64((stepped + 1 - anchor_ticks) as f64 / rate);
        let wake = next_frame.min(if session.paused() { next_frame } else { next_tick });
        let now = Instant::now();
        if wake > now {
            thread::sleep((wake - now).min(POLL));
        }
    }
    if !session.paused() {
        running += last.elapsed();
    }
    if let Some(reason) = &fault {
        let text: Arc<str> = error_text(reason.clone()).into();
        broadcast(clients, text);
    }
    let summary = sink.finish(session, fault, &opts.out)?;
    Ok(ServeReport {
        summary,
        wall_time: running.as_secs_f64(),
        stepped_time: stepped as f64 / rate,
        frames,
        clients: 0,
        dropped_frames: dropped,
    })
}
