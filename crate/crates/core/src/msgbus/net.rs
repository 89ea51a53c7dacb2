//! TCP transport for the broker.
//!
//! Each connection starts with a CONNECT frame answered by `{"ok":true}` or
//! `{"err":"auth"}`, then carries PUB/SUB/ACK/DISCONNECT frames. Deliveries
//! are pushed to the client as PUB frames. A server-side ticker drives
//! redelivery off the injected clock.

use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::wire::{self, ConnectReply, ConnectRequest, WireFrame};
use super::{Authenticator, Broker, FrameKind, Qos, SessionId};
use crate::types::Timestamp;

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;
pub type SharedAuth = Arc<dyn Authenticator + Send + Sync>;

const POLL_INTERVAL: Duration = Duration::from_millis(5);
const REDELIVERY_INTERVAL: Duration = Duration::from_millis(200);

pub struct BrokerServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn bind(
        addr: impl ToSocketAddrs,
        broker: Arc<Mutex<Broker>>,
        auth: SharedAuth,
        clock: Clock,
    ) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));

        let accept = {
            let stop = stop.clone();
            let broker = broker.clone();
            let clock = clock.clone();
            thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let (b, a, c, s) = (broker.clone(), auth.clone(), clock.clone(), stop.clone());
                            thread::spawn(move || {
                                let _ = serve_connection(stream, b, a, c, s);
                            });
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL_INTERVAL),
                        Err(_) => thread::sleep(POLL_INTERVAL),
                    }
                }
            })
        };

        let ticker = {
            let stop = stop.clone();
            thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    thread::sleep(REDELIVERY_INTERVAL);
                    let now = clock();
                    broker.lock().expect("broker lock").redeliver_pending(now);
                }
            })
        };

        Ok(BrokerServer {
            addr: local,
            stop,
            threads: vec![accept, ticker],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads {
            let _ = t.join();
        }
    }
}

fn serve_connection(
    stream: TcpStream,
    broker: Arc<Mutex<Broker>>,
    auth: SharedAuth,
    clock: Clock,
    stop: Arc<AtomicBool>,
) -> io::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut reader = stream.try_clone()?;
    let mut writer = stream.try_clone()?;

    let hello: WireFrame = match wire::read_json(&mut reader)? {
        Some(f) => f,
        None => return Ok(()),
    };
    let request: Option<ConnectRequest> = (hello.kind == FrameKind::Connect)
        .then(|| serde_json::from_str(&hello.payload).ok())
        .flatten();
    let Some(request) = request else {
        wire::write_json(&mut writer, &ConnectReply::Err { err: "protocol".into() })?;
        return stream.shutdown(Shutdown::Both);
    };
    let session = broker
        .lock()
        .expect("broker lock")
        .connect_node(&request.node_id, &request.credential, auth.as_ref());
    let session = match session {
        Ok(s) => s,
        Err(_) => {
            wire::write_json(&mut writer, &ConnectReply::auth_error())?;
            return stream.shutdown(Shutdown::Both);
        }
    };
    wire::write_json(&mut writer, &ConnectReply::ok())?;
    stream.set_read_timeout(None)?;

    let pusher = {
        let broker = broker.clone();
        let stop = stop.clone();
        let stream = stream.try_clone()?;
        thread::spawn(move || push_deliveries(writer, stream, session, broker, stop))
    };

    let result = read_loop(&mut reader, session, &broker, &clock);
    broker.lock().expect("broker lock").disconnect(session);
    let _ = pusher.join();
    let _ = stream.shutdown(Shutdown::Both);
    result
}

fn read_loop(reader: &mut TcpStream, session: SessionId, broker: &Mutex<Broker>, clock: &Clock) -> io::Result<()> {
    while let Some(frame) = wire::read_json::<_, WireFrame>(reader)? {
        let now = clock();
        let mut b = broker.lock().expect("broker lock");
        if !b.is_connected(session) {
            return Ok(());
        }
        match frame.kind {
            FrameKind::Pub => {
                let qos = Qos::from_u8(frame.qos).unwrap_or(Qos::AtMostOnce);
                // ACL and topic errors drop the frame, as MQTT brokers do
                let _ = b.publish(session, &frame.topic, frame.payload.clone(), qos, frame.retain, now);
            }
            FrameKind::Sub => {
                let _ = b.subscribe(session, &frame.topic, now);
            }
            FrameKind::Ack => {
                b.ack(session, &frame.msg_id());
            }
            FrameKind::Disconnect => return Ok(()),
            FrameKind::Connect => {}
        }
    }
    Ok(())
}

fn push_deliveries(
    mut writer: TcpStream,
    stream: TcpStream,
    session: SessionId,
    broker: Arc<Mutex<Broker>>,
    stop: Arc<AtomicBool>,
) {
    loop {
        let frames = {
            let mut b = broker.lock().expect("broker lock");
            if !b.is_connected(session) || stop.load(Ordering::Relaxed) {
                break;
            }
            b.poll(session)
        };
        for f in &frames {
            if writer.write_all(&wire::encode_frame(&WireFrame::from(f))).is_err() {
                let _ = stream.shutdown(Shutdown::Both);
                return;
            }
        }
        if frames.is_empty() {
            thread::sleep(POLL_INTERVAL);
        }
    }
    // session dropped (e.g. quarantine) or server stopping
    let _ = stream.shutdown(Shutdown::Both);
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("broker refused the connection: {0}")]
    Refused(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Blocking client for one node session.
pub struct BusClient {
    node_id: String,
    stream: TcpStream,
    inbox: Receiver<WireFrame>,
    reader: Option<JoinHandle<()>>,
}

impl BusClient {
    pub fn connect(addr: impl ToSocketAddrs, node_id: &str, credential: &str, now: Timestamp) -> Result<Self, ClientError> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        wire::write_json(&mut stream, &WireFrame::connect(node_id, credential, now))?;
        let reply: ConnectReply = wire::read_json(&mut stream)?
            .ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
        match reply {
            ConnectReply::Ok { ok: true } => {}
            ConnectReply::Ok { .. } => return Err(ClientError::Refused("not ok".into())),
            ConnectReply::Err { err } => return Err(ClientError::Refused(err)),
        }
        let (tx, rx) = mpsc::channel();
        let mut read_half = stream.try_clone()?;
        let reader = thread::spawn(move || {
            while let Ok(Some(frame)) = wire::read_json::<_, WireFrame>(&mut read_half) {
                if tx.send(frame).is_err() {
                    break;
                }
            }
        });
        Ok(BusClient {
            node_id: node_id.to_string(),
            stream,
            inbox: rx,
            reader: Some(reader),
        })
    }

    pub fn publish(&mut self, topic: &str, payload: &str, qos: Qos, retain: bool, now: Timestamp) -> io::Result<()> {
        let mut f = WireFrame::new(FrameKind::Pub, topic, &self.node_id, now);
        f.qos = qos as u8;
        f.retain = retain;
        f.payload = payload.to_string();
        wire::write_json(&mut self.stream, &f)
    }

    pub fn subscribe(&mut self, filter: &str, now: Timestamp) -> io::Result<()> {
        wire::write_json(&mut self.stream, &WireFrame::new(FrameKind::Sub, filter, &self.node_id, now))
    }

    pub fn ack(&mut self, delivered: &WireFrame, now: Timestamp) -> io::Result<()> {
        let mut f = WireFrame::new(FrameKind::Ack, &delivered.topic, &delivered.sender, now);
        f.seq = delivered.seq;
        wire::write_json(&mut self.stream, &f)
    }

    /// Next delivery, `Ok(None)` on timeout, `Err` once the broker closed
    /// the connection.
    pub fn recv_timeout(&self, timeout: Duration) -> io::Result<Option<WireFrame>> {
        match self.inbox.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(io::ErrorKind::ConnectionAborted.into()),
        }
    }

    pub fn disconnect(mut self, now: Timestamp) -> io::Result<()> {
        let result = wire::write_json(
            &mut self.stream,
            &WireFrame::new(FrameKind::Disconnect, "", &self.node_id, now),
        );
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server() -> (BrokerServer, Arc<Mutex<Broker>>) {
        let broker = Arc::new(Mutex::new(Broker::default()));
        let auth: SharedAuth = Arc::new(|node: &str, cred: &str| cred == format!("tok-{node}"));
        let clock: Clock = Arc::new(|| Timestamp(0));
        let srv = BrokerServer::bind("127.0.0.1:0", broker.clone(), auth, clock).unwrap();
        (srv, broker)
    }

    fn recv(c: &BusClient) -> WireFrame {
        for _ in 0..200 {
            if let Some(f) = c.recv_timeout(Duration::from_millis(10)).unwrap() {
                return f;
            }
        }
        panic!("no delivery");
    }

    #[test]
    fn connect_refused_with_bad_credential() {
        let (srv, _) = server();
        let err = BusClient::connect(srv.local_addr(), "n-1", "wrong", Timestamp(0)).err().unwrap();
        assert!(matches!(err, ClientError::Refused(ref e) if e == "auth"));
        srv.shutdown();
    }

    #[test]
    fn publish_subscribe_ack_over_tcp() {
        let (srv, broker) = server();
        let addr = srv.local_addr();
        let cloud_side = {
            let mut b = broker.lock().unwrap();
            let s = b.connect_service("ingest");
            b.subscribe(s, "data/#", Timestamp(0)).unwrap();
            s
        };
        let mut node = BusClient::connect(addr, "n-1", "tok-n-1", Timestamp(0)).unwrap();
        node.subscribe("twin/n-1/desired", Timestamp(0)).unwrap();
        node.publish("data/n-1/temp", "hello", Qos::AtLeastOnce, false, Timestamp(0)).unwrap();
        // forbidden topic is dropped by the ACL
        node.publish("data/n-2/temp", "spoof", Qos::AtLeastOnce, false, Timestamp(0)).unwrap();

        let mut got = Vec::new();
        for _ in 0..200 {
            got.extend(broker.lock().unwrap().poll(cloud_side));
            if !got.is_empty() {
                break;
            }
            thread::sleep(Duration::from_millis(10));
        }
        thread::sleep(Duration::from_millis(50));
        got.extend(broker.lock().unwrap().poll(cloud_side));
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].payload, "hello");

        {
            let mut b = broker.lock().unwrap();
            b.publish(cloud_side, "twin/n-1/desired", "{}", Qos::AtLeastOnce, true, Timestamp(0))
                .unwrap();
        }
        let delivered = recv(&node);
        assert_eq!(delivered.topic, "twin/n-1/desired");
        let session = broker.lock().unwrap().node_session("n-1").unwrap();
        assert_eq!(broker.lock().unwrap().pending_count(session), 1);
        node.ack(&delivered, Timestamp(0)).unwrap();
        for _ in 0..200 {
            if broker.lock().unwrap().pending_count(session) == 0 {
                break;
            }
            thread::sleep(Duration::from_millis(5));
        }
        assert_eq!(broker.lock().unwrap().pending_count(session), 0);

        // quarantine-style close from the broker side ends the client stream
        broker.lock().unwrap().close_node("n-1");
        let mut closed = false;
        for _ in 0..200 {
            if node.recv_timeout(Duration::from_millis(10)).is_err() {
                closed = true;
                break;
            }
        }
        assert!(closed);
        srv.shutdown();
    }
}
