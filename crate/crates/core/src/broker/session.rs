//! One task pair per client connection: a reader that routes, a writer that drains.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use bytes::BytesMut;
use tokio::io::AsyncWriteExt;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio_util::sync::CancellationToken;

use super::{Broker, Ingress, Outbound, SessionEntry};
use crate::mqtt::FrameReader;
use crate::queue::BoundedQueue;
use crate::wire::{encode_packet_into, Connack, Packet, Publish};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);
const WRITE_BATCH: usize = 64;
const FLUSH_GRACE: Duration = Duration::from_millis(500);

pub(super) async fn run_connection(
    broker: Broker,
    stream: TcpStream,
    peer: SocketAddr,
    shutdown: CancellationToken,
) {
    let _ = stream.set_nodelay(true);
    let (read_half, write_half) = stream.into_split();
    let mut reader = FrameReader::new(read_half);

    let connect = match tokio::time::timeout(CONNECT_TIMEOUT, reader.read_packet()).await {
        Ok(Ok(Some(Packet::Connect(c)))) => c,
        Ok(Ok(Some(other))) => {
            tracing::warn!(%peer, kind = other.kind(), "first packet was not CONNECT, closing");
            return;
        }
        Ok(Ok(None)) => return,
        Ok(Err(e)) => {
            tracing::warn!(%peer, error = %e, "protocol violation before CONNECT, closing");
            return;
        }
        Err(_) => {
            tracing::warn!(%peer, "no CONNECT within timeout, closing");
            return;
        }
    };

    let link = broker.next_link();
    let client_id = if connect.client_id.is_empty() {
        format!("auto-{link}")
    } else {
        connect.client_id
    };
    let kill = shutdown;
    let session = Arc::new(SessionEntry::new(client_id.clone(), link, kill.clone()));
    broker.register(Arc::clone(&session));
    tracing::debug!(%peer, %client_id, link, "session opened");

    let (ctrl_tx, ctrl_rx) = mpsc::unbounded_channel();
    let _ = ctrl_tx.send(Packet::Connack(Connack { return_code: 0 }));
    let writer = tokio::spawn(write_loop(
        write_half,
        ctrl_rx,
        Arc::clone(&session.queue),
        kill.clone(),
    ));

    // keep-alive: disconnect after 1.5x the negotiated interval without traffic
    let idle_limit = (connect.keep_alive_s > 0)
        .then(|| Duration::from_millis(u64::from(connect.keep_alive_s) * 1500));

    loop {
        let next = async {
            match idle_limit {
                Some(limit) => tokio::time::timeout(limit, reader.read_packet()).await.ok(),
                None => Some(reader.read_packet().await),
            }
        };
        let packet = tokio::select! {
            _ = kill.cancelled() => break,
            packet = next => packet,
        };
        match packet {
            None => {
                tracing::info!(%client_id, "keep-alive expired");
                break;
            }
            Some(Ok(Some(packet))) => match packet {
                Packet::Publish(p) => {
                    broker.ingest(link, Ingress::Client, p);
                }
                Packet::Subscribe(sub) => {
                    let ack = broker.handle_subscribe(&session, &sub);
                    let _ = ctrl_tx.send(Packet::Suback(ack));
                }
                Packet::Unsubscribe(unsub) => {
                    for raw in &unsub.filters {
                        session.remove_filter(raw);
                    }
                    let _ = ctrl_tx.send(Packet::Unsuback {
                        packet_id: unsub.packet_id,
                    });
                }
                Packet::Pingreq => {
                    let _ = ctrl_tx.send(Packet::Pingresp);
                }
                Packet::Disconnect => break,
                other => {
                    tracing::warn!(%client_id, kind = other.kind(), "unexpected packet from client, closing");
                    break;
                }
            },
            Some(Ok(None)) => break,
            Some(Err(e)) => {
                tracing::warn!(%client_id, error = %e, "protocol violation, closing");
                break;
            }
        }
    }

    broker.unregister(&client_id, link);
    drop(ctrl_tx);
    session.queue.close();
    // let pending control replies go out before the socket closes
    let mut writer = writer;
    if tokio::time::timeout(FLUSH_GRACE, &mut writer).await.is_err() {
        kill.cancel();
        let _ = writer.await;
    }
    kill.cancel();
    tracing::debug!(%client_id, "session closed");
}

async fn write_loop(
    mut out: OwnedWriteHalf,
    mut ctrl: mpsc::UnboundedReceiver<Packet>,
    queue: Arc<BoundedQueue<Outbound>>,
    kill: CancellationToken,
) {
    let mut buf = BytesMut::with_capacity(16 * 1024);
    let mut batch: Vec<Outbound> = Vec::with_capacity(WRITE_BATCH);
    loop {
        buf.clear();
        tokio::select! {
            biased;
            _ = kill.cancelled() => break,
            packet = ctrl.recv() => match packet {
                Some(packet) => {
                    if encode_packet_into(&packet, &mut buf).is_err() {
                        continue;
                    }
                }
                None => break,
            },
            first = queue.pop() => match first {
                Some(first) => {
                    batch.clear();
                    batch.push(first);
                    queue.drain_up_to(WRITE_BATCH - 1, &mut batch);
                    for publish in batch.drain(..) {
                        encode_publish(&publish, &mut buf);
                    }
                }
                None => break,
            },
        }
        if out.write_all(&buf).await.is_err() {
            kill.cancel();
            break;
        }
    }
    let _ = out.shutdown().await;
}

fn encode_publish(publish: &Publish, buf: &mut BytesMut) {
    // Arc<Publish> -> Packet needs an owned value; topic and payload clones are cheap
    let packet = Packet::Publish(publish.clone());
    if let Err(e) = encode_packet_into(&packet, buf) {
        tracing::warn!(error = %e, "dropping unencodable publish");
    }
}
