use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use tracing::{debug, info, warn};

use super::session::{ClientId, JournalEntry, Session, SessionConfig, Target};
use super::{read_frame, write_frame, MessageKind, WireMessage};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;

#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub session: SessionConfig,
    /// Wait for the first client before the first tick.
    pub wait_for_client: bool,
}

#[derive(Debug)]
pub struct ServeOutcome {
    pub dataset: Dataset,
    pub journal: Vec<JournalEntry>,
    pub ticks: u64,
}

/// Binds `127.0.0.1:port`; port 0 picks a free port.
pub fn bind(port: u16) -> Result<TcpListener> {
    TcpListener::bind(("127.0.0.1", port)).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => Error::Bridge(format!("port {port} is busy")),
        _ => Error::Io(e),
    })
}

enum Event {
    Connected(Client),
    Message(ClientId, WireMessage),
    Malformed(ClientId, String),
    Closed(ClientId),
}

fn spawn_client(id: ClientId, stream: TcpStream, events: Sender<Event>) -> Result<()> {
    let (out_tx, out_rx) = mpsc::channel::<WireMessage>();
    let shutdown_handle = stream.try_clone()?;
    let write_half = stream.try_clone()?;
    let writer = thread::spawn(move || {
        let mut w = BufWriter::new(write_half);
        for msg in out_rx {
            if write_frame(&mut w, &msg).is_err() {
                break;
            }
        }
    });
    let client = Client {
        id,
        tx: out_tx,
        stream: shutdown_handle,
        writer,
    };
    if events.send(Event::Connected(client)).is_err() {
        return Ok(());
    }
    thread::spawn(move || {
        let mut r = BufReader::new(stream);
        loop {
            let ev = match read_frame(&mut r) {
                Ok(Some(Ok(msg))) => Event::Message(id, msg),
                Ok(Some(Err(e))) => Event::Malformed(id, e),
                Ok(None) | Err(_) => {
                    let _ = events.send(Event::Closed(id));
                    break;
                }
            };
            if events.send(ev).is_err() {
                break;
            }
        }
    });
    Ok(())
}

fn accept_loop(listener: TcpListener, events: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut next: ClientId = 1;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, addr)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                debug!(%addr, client = next, "client connected");
                if spawn_client(next, stream, events.clone()).is_err() {
                    warn!("failed to set up client connection");
                }
                next += 1;
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                warn!(error = %e, "accept failed");
                thread::sleep(Duration::from_millis(2));
            }
        }
    }
}

struct Client {
    id: ClientId,
    tx: Sender<WireMessage>,
    stream: TcpStream,
    writer: thread::JoinHandle<()>,
}

struct Clients {
    out: Vec<Client>,
}

impl Clients {
    fn send(&self, to: Target, msg: &WireMessage) {
        for c in &self.out {
            if to == Target::All || to == Target::Client(c.id) {
                let _ = c.tx.send(msg.clone());
            }
        }
    }

    fn remove(&mut self, id: ClientId) {
        self.out.retain(|c| c.id != id);
    }

    /// Flushes queued messages, then closes every connection.
    fn shutdown(self) {
        for c in self.out {
            drop(c.tx);
            let _ = c.writer.join();
            let _ = c.stream.shutdown(Shutdown::Both);
        }
    }
}

fn drain(session: &mut Session, clients: &mut Clients, events: &Receiver<Event>, block_for: Option<Duration>) {
    let mut first = match block_for {
        Some(d) => events.recv_timeout(d).ok(),
        None => None,
    };
    loop {
        let ev = match first.take() {
            Some(ev) => ev,
            None => match events.try_recv() {
                Ok(ev) => ev,
                Err(_) => break,
            },
        };
        match ev {
            Event::Connected(c) => {
                let _ = c.tx.send(session.config_message());
                let _ = c.tx.send(session.state_message());
                clients.out.push(c);
            }
            Event::Message(id, msg) => {
                for o in session.handle(id, &msg) {
                    clients.send(o.to, &o.msg);
                }
            }
            Event::Malformed(id, e) => {
                let msg = WireMessage::new(
                    MessageKind::Error,
                    session.id(),
                    session.tick(),
                    serde_json::json!({ "message": format!("malformed message: {e}") }),
                );
                clients.send(Target::Client(id), &msg);
            }
            Event::Closed(id) => {
                session.disconnect(id);
                clients.remove(id);
            }
        }
    }
}

/// Runs the session on `listener` until all episodes are done. One loop owns
/// the session; socket threads talk to it only through channels.
pub fn serve(params: &PolicyParams, cfg: &ServeConfig, listener: TcpListener) -> Result<ServeOutcome> {
    let addr: SocketAddr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let (ev_tx, ev_rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let stop = stop.clone();
        thread::spawn(move || accept_loop(listener, ev_tx, stop))
    };
    info!(%addr, session = %cfg.session.id, "bridge listening");
    let mut session = Session::new(cfg.session.clone());
    let mut clients = Clients { out: Vec::new() };
    if cfg.wait_for_client {
        while clients.out.is_empty() {
            drain(&mut session, &mut clients, &ev_rx, Some(Duration::from_millis(50)));
        }
    }
    let period = (cfg.session.tick_hz > 0.0).then(|| Duration::from_secs_f64(1.0 / cfg.session.tick_hz));
    let mut deadline = Instant::now();
    let result = (|| -> Result<()> {
        while !session.finished() {
            drain(&mut session, &mut clients, &ev_rx, None);
            for msg in session.step(params)? {
                clients.send(Target::All, &msg);
            }
            if let Some(p) = period {
                deadline += p;
                let now = Instant::now();
                if deadline > now {
                    // Keep handling input while waiting for the next tick.
                    while Instant::now() < deadline {
                        let left = deadline.saturating_duration_since(Instant::now());
                        drain(&mut session, &mut clients, &ev_rx, Some(left));
                    }
                } else {
                    deadline = now;
                }
            }
        }
        Ok(())
    })();
    stop.store(true, Ordering::Relaxed);
    let _ = acceptor.join();
    let ticks = session.tick();
    drop(ev_rx);
    clients.shutdown();
    result?;
    let (dataset, journal) = session.into_parts();
    Ok(ServeOutcome {
        dataset,
        journal,
        ticks,
    })
}
