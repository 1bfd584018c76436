//! Async framing over TCP and a minimal QoS 0 client.
//!
//! The client is what every non-broker component uses to talk to a broker: bridge
//! links, simulated devices, the feed handler and the message router.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpStream, ToSocketAddrs};
use tokio::sync::{mpsc, oneshot};
use tokio_util::sync::CancellationToken;

use crate::wire::{
    decode_packet, encode_packet, Connect, Packet, Publish, Subscribe, TopicName, Unsubscribe,
    WireError,
};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
const INCOMING_CAPACITY: usize = 4096;

#[derive(Debug, Error)]
pub enum MqttError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("connection closed mid-frame")]
    UnexpectedEof,
    #[error("connection closed")]
    Closed,
    #[error("broker refused connection with code {0}")]
    Refused(u8),
    #[error("expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: &'static str },
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
}

/// Incremental frame reader over any byte stream.
pub struct FrameReader<R> {
    inner: R,
    buf: BytesMut,
}

impl<R: AsyncRead + Unpin> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: BytesMut::with_capacity(8 * 1024),
        }
    }

    /// Next packet, or `Ok(None)` on a clean end of stream between frames.
    pub async fn read_packet(&mut self) -> Result<Option<Packet>, MqttError> {
        loop {
            if let Some((packet, used)) = decode_packet(&self.buf)? {
                let _ = self.buf.split_to(used);
                return Ok(Some(packet));
            }
            if self.inner.read_buf(&mut self.buf).await? == 0 {
                return if self.buf.is_empty() {
                    Ok(None)
                } else {
                    Err(MqttError::UnexpectedEof)
                };
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub client_id: String,
    pub keep_alive_s: u16,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            keep_alive_s: 30,
        }
    }

    pub fn keep_alive(mut self, seconds: u16) -> Self {
        self.keep_alive_s = seconds;
        self
    }
}

/// Publishes delivered to this client. Ends when the connection closes.
pub struct Incoming {
    rx: mpsc::Receiver<Publish>,
}

impl Incoming {
    pub async fn recv(&mut self) -> Option<Publish> {
        self.rx.recv().await
    }
}

struct ClientShared {
    writer: tokio::sync::Mutex<OwnedWriteHalf>,
    next_packet_id: AtomicU16,
    acks: parking_lot::Mutex<HashMap<u16, oneshot::Sender<Packet>>>,
    closed: CancellationToken,
    local_addr: SocketAddr,
}

/// Cloneable handle to one broker connection.
#[derive(Clone)]
pub struct MqttClient {
    shared: Arc<ClientShared>,
}

impl MqttClient {
    pub async fn connect(
        addr: impl ToSocketAddrs,
        options: ClientOptions,
    ) -> Result<(Self, Incoming), MqttError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let local_addr = stream.local_addr()?;
        let (read_half, mut write_half) = stream.into_split();

        let connect = Packet::Connect(Connect {
            client_id: options.client_id.clone(),
            keep_alive_s: options.keep_alive_s,
            clean_session: true,
        });
        write_half.write_all(&encode_packet(&connect)?).await?;

        let mut reader = FrameReader::new(read_half);
        let first = tokio::time::timeout(HANDSHAKE_TIMEOUT, reader.read_packet())
            .await
            .map_err(|_| MqttError::Timeout("CONNACK"))??;
        match first {
            Some(Packet::Connack(ack)) if ack.return_code == 0 => {}
            Some(Packet::Connack(ack)) => return Err(MqttError::Refused(ack.return_code)),
            Some(other) => {
                return Err(MqttError::Unexpected {
                    expected: "CONNACK",
                    got: other.kind(),
                })
            }
            None => return Err(MqttError::Closed),
        }

        let shared = Arc::new(ClientShared {
            writer: tokio::sync::Mutex::new(write_half),
            next_packet_id: AtomicU16::new(1),
            acks: parking_lot::Mutex::new(HashMap::new()),
            closed: CancellationToken::new(),
            local_addr,
        });
        let (tx, rx) = mpsc::channel(INCOMING_CAPACITY);
        tokio::spawn(read_loop(reader, Arc::clone(&shared), tx));
        if options.keep_alive_s > 0 {
            let period = Duration::from_millis(u64::from(options.keep_alive_s) * 500);
            tokio::spawn(ping_loop(Arc::clone(&shared), period));
        }
        Ok((Self { shared }, Incoming { rx }))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.shared.local_addr
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.is_cancelled()
    }

    /// Resolves once the connection has gone away.
    pub async fn closed(&self) {
        self.shared.closed.cancelled().await
    }

    async fn send(&self, packet: &Packet) -> Result<(), MqttError> {
        if self.is_closed() {
            return Err(MqttError::Closed);
        }
        let frame = encode_packet(packet)?;
        let mut writer = self.shared.writer.lock().await;
        if let Err(e) = writer.write_all(&frame).await {
            self.shared.closed.cancel();
            return Err(e.into());
        }
        Ok(())
    }

    pub async fn publish(&self, topic: &TopicName, payload: impl Into<Bytes>) -> Result<(), MqttError> {
        self.send(&Packet::Publish(Publish::new(topic.clone(), payload)))
            .await
    }

    pub async fn publish_packet(&self, publish: Publish) -> Result<(), MqttError> {
        self.send(&Packet::Publish(publish)).await
    }

    fn packet_id(&self) -> u16 {
        loop {
            let id = self.shared.next_packet_id.fetch_add(1, Ordering::Relaxed);
            if id != 0 {
                return id;
            }
        }
    }

    async fn request(&self, packet_id: u16, packet: Packet, what: &'static str) -> Result<Packet, MqttError> {
        let (tx, rx) = oneshot::channel();
        self.shared.acks.lock().insert(packet_id, tx);
        if let Err(e) = self.send(&packet).await {
            self.shared.acks.lock().remove(&packet_id);
            return Err(e);
        }
        match tokio::time::timeout(HANDSHAKE_TIMEOUT, rx).await {
            Ok(Ok(ack)) => Ok(ack),
            Ok(Err(_)) => Err(MqttError::Closed),
            Err(_) => {
                self.shared.acks.lock().remove(&packet_id);
                Err(MqttError::Timeout(what))
            }
        }
    }

    /// Subscribes and waits for the SUBACK; returns the granted codes.
    pub async fn subscribe<I, S>(&self, filters: I) -> Result<Vec<u8>, MqttError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let packet_id = self.packet_id();
        let filters = filters.into_iter().map(Into::into).collect();
        match self
            .request(packet_id, Packet::Subscribe(Subscribe { packet_id, filters }), "SUBACK")
            .await?
        {
            Packet::Suback(ack) => Ok(ack.granted),
            other => Err(MqttError::Unexpected {
                expected: "SUBACK",
                got: other.kind(),
            }),
        }
    }

    pub async fn unsubscribe<I, S>(&self, filters: I) -> Result<(), MqttError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let packet_id = self.packet_id();
        let filters = filters.into_iter().map(Into::into).collect();
        self.request(
            packet_id,
            Packet::Unsubscribe(Unsubscribe { packet_id, filters }),
            "UNSUBACK",
        )
        .await
        .map(|_| ())
    }

    pub async fn disconnect(&self) {
        let _ = self.send(&Packet::Disconnect).await;
        let _ = self.shared.writer.lock().await.shutdown().await;
        self.shared.closed.cancel();
    }
}

async fn read_loop<R: AsyncRead + Unpin>(
    mut reader: FrameReader<R>,
    shared: Arc<ClientShared>,
    tx: mpsc::Sender<Publish>,
) {
    loop {
        let packet = tokio::select! {
            _ = shared.closed.cancelled() => break,
            packet = reader.read_packet() => packet,
        };
        match packet {
            Ok(Some(Packet::Publish(p))) => {
                if tx.send(p).await.is_err() {
                    // receiver dropped; keep draining so acks still resolve
                    continue;
                }
            }
            Ok(Some(ack @ Packet::Suback(_))) | Ok(Some(ack @ Packet::Unsuback { .. })) => {
                let id = match &ack {
                    Packet::Suback(s) => s.packet_id,
                    Packet::Unsuback { packet_id } => *packet_id,
                    _ => unreachable!(),
                };
                if let Some(waiter) = shared.acks.lock().remove(&id) {
                    let _ = waiter.send(ack);
                }
            }
            Ok(Some(Packet::Pingresp)) => {}
            Ok(Some(other)) => {
                tracing::debug!(kind = other.kind(), "client ignoring unexpected packet");
            }
            Ok(None) => break,
            Err(e) => {
                tracing::debug!(error = %e, "client connection failed");
                break;
            }
        }
    }
    shared.closed.cancel();
    shared.acks.lock().clear();
}

async fn ping_loop(shared: Arc<ClientShared>, period: Duration) {
    let frame = encode_packet(&Packet::Pingreq).expect("PINGREQ encodes");
    loop {
        tokio::select! {
            _ = shared.closed.cancelled() => return,
            _ = tokio::time::sleep(period) => {}
        }
        let mut writer = shared.writer.lock().await;
        if writer.write_all(&frame).await.is_err() {
            shared.closed.cancel();
            return;
        }
    }
}
