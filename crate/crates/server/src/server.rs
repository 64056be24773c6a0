//! TCP transport: one accept thread, a reader and a writer thread per client,
//! and a single simulation thread that owns the [`Session`].
//!
//! Inbound lines from every client funnel into one ordered queue. Outbound
//! messages go through bounded per-client queues; a client whose queue fills
//! up is dropped with an `E_STATE` error instead of stalling the tick loop.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::protocol::{ErrorCode, ServerMessage};
use crate::session::{ClientId, Outbox, Session, Target};

/// Outbound lines buffered per client before it is considered dead.
pub const CLIENT_QUEUE: usize = 1024;
const WRITE_TIMEOUT: Duration = Duration::from_secs(5);
const ACCEPT_POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("E_BIND: cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] ghostgrid::Error),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Address to bind, e.g. `127.0.0.1:7878`; port 0 picks a free port.
    pub addr: String,
    /// Mirror the ghost database to this directory.
    pub data_dir: Option<PathBuf>,
}

enum Command {
    Connect {
        id: ClientId,
        outbox: SyncSender<String>,
        overflowed: Arc<AtomicBool>,
        stream: TcpStream,
    },
    Line {
        id: ClientId,
        line: String,
    },
    Disconnect {
        id: ClientId,
    },
    Shutdown,
}

struct Client {
    outbox: SyncSender<String>,
    overflowed: Arc<AtomicBool>,
    stream: TcpStream,
}

/// A running session. Dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    commands: Sender<Command>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, disconnects every client and waits for the loops.
    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    /// Blocks for as long as the server runs.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.commands.send(Command::Shutdown);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

/// Binds, then runs the session on background threads.
pub fn serve(mut session: Session, opts: &ServeOptions) -> Result<ServerHandle, ServerError> {
    let listener = TcpListener::bind(&opts.addr).map_err(|source| ServerError::Bind {
        addr: opts.addr.clone(),
        source,
    })?;
    let addr = listener.local_addr().map_err(|source| ServerError::Bind {
        addr: opts.addr.clone(),
        source,
    })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| ServerError::Bind {
            addr: opts.addr.clone(),
            source,
        })?;
    if let Some(dir) = &opts.data_dir {
        session.sim_mut().attach_log(dir)?;
    }
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let sim = {
        let stop = Arc::clone(&stop);
        thread::spawn(move || run_loop(session, rx, stop))
    };
    let acceptor = {
        let tx = tx.clone();
        let stop = Arc::clone(&stop);
        thread::spawn(move || accept_loop(listener, tx, stop))
    };
    Ok(ServerHandle {
        addr,
        commands: tx,
        stop,
        threads: vec![sim, acceptor],
    })
}

fn accept_loop(listener: TcpListener, commands: Sender<Command>, stop: Arc<AtomicBool>) {
    let mut next_id: ClientId = 0;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let id = next_id;
                next_id += 1;
                if spawn_client(id, stream, &commands).is_err() {
                    continue;
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(_) => thread::sleep(ACCEPT_POLL),
        }
    }
}

fn spawn_client(
    id: ClientId,
    stream: TcpStream,
    commands: &Sender<Command>,
) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_write_timeout(Some(WRITE_TIMEOUT))?;
    let reader = stream.try_clone()?;
    let writer = stream.try_clone()?;
    let (out_tx, out_rx) = mpsc::sync_channel(CLIENT_QUEUE);
    let overflowed = Arc::new(AtomicBool::new(false));
    // Register before reading so the hello precedes any reply.
    if commands
        .send(Command::Connect {
            id,
            outbox: out_tx,
            overflowed: Arc::clone(&overflowed),
            stream,
        })
        .is_err()
    {
        return Ok(());
    }
    thread::spawn(move || write_loop(writer, out_rx, overflowed));
    let commands = commands.clone();
    thread::spawn(move || read_loop(id, reader, commands));
    Ok(())
}

fn read_loop(id: ClientId, stream: TcpStream, commands: Sender<Command>) {
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => break,
            Ok(_) => {
                // Invalid UTF-8 still reaches the parser and earns an E_PARSE reply.
                let line = String::from_utf8_lossy(&buf).into_owned();
                if line.trim().is_empty() {
                    continue;
                }
                if commands.send(Command::Line { id, line }).is_err() {
                    break;
                }
            }
        }
    }
    let _ = commands.send(Command::Disconnect { id });
}

fn write_loop(mut stream: TcpStream, lines: Receiver<String>, overflowed: Arc<AtomicBool>) {
    for line in lines.iter() {
        if stream.write_all(line.as_bytes()).is_err() {
            let _ = stream.shutdown(Shutdown::Both);
            return;
        }
    }
    if overflowed.load(Ordering::SeqCst) {
        let msg = ServerMessage::error(
            ErrorCode::State,
            "client fell too far behind and was disconnected",
        );
        let _ = stream.write_all(msg.to_line().as_bytes());
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn deliver(clients: &mut BTreeMap<ClientId, Client>, out: Outbox) {
    for (target, msg) in out {
        let line = msg.to_line();
        let ids: Vec<ClientId> = match target {
            Target::All => clients.keys().copied().collect(),
            Target::Client(id) => vec![id],
        };
        for id in ids {
            let Some(client) = clients.get(&id) else {
                continue;
            };
            match client.outbox.try_send(line.clone()) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) => {
                    client.overflowed.store(true, Ordering::SeqCst);
                    // Dropping the sender lets the writer drain, report and close.
                    clients.remove(&id);
                }
                Err(TrySendError::Disconnected(_)) => {
                    clients.remove(&id);
                }
            }
        }
    }
}

fn run_loop(mut session: Session, commands: Receiver<Command>, stop: Arc<AtomicBool>) {
    let mut clients: BTreeMap<ClientId, Client> = BTreeMap::new();
    let mut next_tick = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= next_tick {
            let out = session.tick();
            deliver(&mut clients, out);
            let period = Duration::from_secs_f64(1.0 / f64::from(session.tick_rate_hz()));
            next_tick = (next_tick + period).max(now);
            continue;
        }
        match commands.recv_timeout(next_tick - now) {
            Ok(Command::Connect {
                id,
                outbox,
                overflowed,
                stream,
            }) => {
                let _ = outbox.try_send(session.hello().to_line());
                clients.insert(
                    id,
                    Client {
                        outbox,
                        overflowed,
                        stream,
                    },
                );
            }
            Ok(Command::Line { id, line }) => {
                let rate = session.tick_rate_hz();
                let out = session.handle_line(id, &line);
                deliver(&mut clients, out);
                if session.tick_rate_hz() != rate {
                    next_tick = Instant::now()
                        + Duration::from_secs_f64(1.0 / f64::from(session.tick_rate_hz()));
                }
            }
            Ok(Command::Disconnect { id }) => {
                clients.remove(&id);
            }
            Ok(Command::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {}
        }
    }
    for (_, c) in clients {
        let _ = c.stream.shutdown(Shutdown::Both);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse_server;
    use ghostgrid::ids::TrajectoryId;
    use std::net::TcpListener;

    fn socket_pair() -> (TcpStream, TcpStream) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let a = TcpStream::connect(listener.local_addr().unwrap()).unwrap();
        let (b, _) = listener.accept().unwrap();
        (a, b)
    }

    #[test]
    fn full_queue_drops_the_client_with_a_state_error() {
        let (server_side, client_side) = socket_pair();
        let (tx, rx) = mpsc::sync_channel(2);
        let overflowed = Arc::new(AtomicBool::new(false));
        let mut clients = BTreeMap::new();
        clients.insert(
            1,
            Client {
                outbox: tx,
                overflowed: Arc::clone(&overflowed),
                stream: server_side.try_clone().unwrap(),
            },
        );
        let ack = ServerMessage::LabelAck {
            trajectory_id: TrajectoryId(0),
        };
        deliver(
            &mut clients,
            (0..3).map(|_| (Target::All, ack.clone())).collect(),
        );
        assert!(clients.is_empty());
        assert!(overflowed.load(Ordering::SeqCst));

        write_loop(server_side, rx, overflowed);
        let got: Vec<ServerMessage> = BufReader::new(client_side)
            .lines()
            .map(|l| parse_server(&l.unwrap()).unwrap())
            .collect();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0], ack);
        assert!(matches!(
            got[2],
            ServerMessage::Error {
                code: ErrorCode::State,
                ..
            }
        ));
    }
}
