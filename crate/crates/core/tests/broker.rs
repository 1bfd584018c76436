use std::collections::HashMap;
use std::time::Duration;

use sensert_core::broker::{Broker, BrokerConfig, BrokerHandle, BridgeRule, Direction};
use sensert_core::mqtt::{ClientOptions, Incoming, MqttClient};
use sensert_core::wire::TopicName;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

async fn start(config: BrokerConfig) -> BrokerHandle {
    Broker::new().serve(&config).await.expect("broker starts")
}

async fn local() -> BrokerHandle {
    start(BrokerConfig::new("127.0.0.1:0")).await
}

async fn client(handle: &BrokerHandle, id: &str) -> (MqttClient, Incoming) {
    MqttClient::connect(handle.local_addr(), ClientOptions::new(id))
        .await
        .expect("client connects")
}

fn topic(s: &str) -> TopicName {
    TopicName::new(s).unwrap()
}

/// Collects publishes until `quiet` passes without traffic.
async fn drain(incoming: &mut Incoming, quiet: Duration) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    while let Ok(Some(p)) = tokio::time::timeout(quiet, incoming.recv()).await {
        out.push((p.topic.to_string(), p.payload.to_vec()));
    }
    out
}

#[tokio::test]
async fn loopback_publish_reaches_subscriber_intact() {
    let broker = local().await;
    let (sub, mut inbox) = client(&broker, "sub").await;
    assert_eq!(sub.subscribe(["tele/+/SENSOR"]).await.unwrap(), vec![0x00]);
    let (publisher, _) = client(&broker, "pub").await;
    let payload = br#"{"ENERGY":{"Power":42.0}}"#.to_vec();
    publisher
        .publish(&topic("tele/plug-17/SENSOR"), payload.clone())
        .await
        .unwrap();
    let got = tokio::time::timeout(Duration::from_secs(2), inbox.recv())
        .await
        .unwrap()
        .unwrap();
    assert_eq!(got.topic.as_str(), "tele/plug-17/SENSOR");
    assert_eq!(got.payload.as_ref(), payload.as_slice());
    broker.stop().await;
}

#[tokio::test]
async fn subscribe_with_invalid_middle_filter() {
    let broker = local().await;
    let (c, _) = client(&broker, "c").await;
    assert_eq!(
        c.subscribe(["a/+", "a/#/b", "c/#"]).await.unwrap(),
        vec![0x00, 0x80, 0x00]
    );
    broker.stop().await;
}

#[tokio::test]
async fn reserved_packet_type_closes_connection_only() {
    let broker = local().await;
    let mut raw = TcpStream::connect(broker.local_addr()).await.unwrap();
    raw.write_all(&[0xF0, 0x00]).await.unwrap();
    let mut buf = [0u8; 8];
    let n = tokio::time::timeout(Duration::from_secs(2), raw.read(&mut buf))
        .await
        .unwrap()
        .unwrap_or(0);
    assert_eq!(n, 0, "connection closed without reply");

    // broker still serves new clients
    let (sub, mut inbox) = client(&broker, "after").await;
    sub.subscribe(["x"]).await.unwrap();
    let (p, _) = client(&broker, "after-pub").await;
    p.publish(&topic("x"), &b"ok"[..]).await.unwrap();
    assert!(tokio::time::timeout(Duration::from_secs(2), inbox.recv())
        .await
        .unwrap()
        .is_some());
    broker.stop().await;
}

#[tokio::test]
async fn malformed_frame_after_connect_closes_that_session() {
    let broker = local().await;
    let (c, _) = client(&broker, "victim").await;
    let mut raw = TcpStream::connect(broker.local_addr()).await.unwrap();
    // CONNECT then a QoS 2 PUBLISH
    raw.write_all(&[0x10, 12, 0, 4, b'M', b'Q', b'T', b'T', 4, 2, 0, 0, 0, 0])
        .await
        .unwrap();
    raw.write_all(&[0x34, 0x05, 0, 1, b'a', 0, 1]).await.unwrap();
    let mut buf = [0u8; 16];
    let mut total = 0;
    loop {
        match tokio::time::timeout(Duration::from_secs(2), raw.read(&mut buf[total..])).await {
            Ok(Ok(0)) | Ok(Err(_)) => break,
            Ok(Ok(n)) => total += n,
            Err(_) => panic!("connection not closed"),
        }
    }
    assert_eq!(&buf[..4], &[0x20, 0x02, 0x00, 0x00], "CONNACK before close");
    assert!(!c.is_closed());
    broker.stop().await;
}

#[tokio::test]
async fn keep_alive_expiry_disconnects_silent_client() {
    let broker = local().await;
    let mut raw = TcpStream::connect(broker.local_addr()).await.unwrap();
    // keep-alive 1 s, never ping
    raw.write_all(&[0x10, 12, 0, 4, b'M', b'Q', b'T', b'T', 4, 2, 0, 1, 0, 0])
        .await
        .unwrap();
    let mut buf = [0u8; 4];
    raw.read_exact(&mut buf).await.unwrap();
    let start = std::time::Instant::now();
    let n = tokio::time::timeout(Duration::from_secs(5), raw.read(&mut buf))
        .await
        .expect("closed by broker")
        .unwrap_or(0);
    assert_eq!(n, 0);
    let waited = start.elapsed();
    assert!(waited >= Duration::from_millis(1400), "closed too early: {waited:?}");
    broker.stop().await;
}

#[tokio::test]
async fn newer_connection_supersedes_same_client_id() {
    let broker = local().await;
    let (old, _) = client(&broker, "same").await;
    let (_new, _) = client(&broker, "same").await;
    tokio::time::timeout(Duration::from_secs(2), old.closed())
        .await
        .expect("old connection closed");
    assert_eq!(broker.stats().live_sessions, 1);
    broker.stop().await;
}

#[tokio::test]
async fn hundred_clients_hundred_messages_each() {
    let broker = local().await;
    let mut tasks = Vec::new();
    for i in 0..100 {
        let addr = broker.local_addr();
        tasks.push(tokio::spawn(async move {
            let (c, _) = MqttClient::connect(addr, ClientOptions::new(format!("load-{i}")))
                .await
                .unwrap();
            let t = TopicName::new(format!("load/{i}")).unwrap();
            for n in 0..100u32 {
                c.publish(&t, n.to_be_bytes().to_vec()).await.unwrap();
            }
            c.disconnect().await;
        }));
    }
    for t in tasks {
        t.await.unwrap();
    }
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while broker.stats().msgs_in < 10_000 && tokio::time::Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(broker.stats().msgs_in, 10_000);
    broker.stop().await;
}

#[tokio::test]
async fn per_publisher_fifo() {
    let broker = local().await;
    let (sub, mut inbox) = client(&broker, "fifo-sub").await;
    sub.subscribe(["seq/#"]).await.unwrap();
    let (p, _) = client(&broker, "fifo-pub").await;
    for n in 0..500u32 {
        p.publish(&topic("seq/a"), n.to_be_bytes().to_vec()).await.unwrap();
    }
    let got = drain(&mut inbox, Duration::from_millis(300)).await;
    let seqs: Vec<u32> = got
        .iter()
        .map(|(_, b)| u32::from_be_bytes(b[..4].try_into().unwrap()))
        .collect();
    assert_eq!(seqs, (0..500).collect::<Vec<_>>());
    broker.stop().await;
}

#[tokio::test]
async fn stalled_subscriber_does_not_delay_others() {
    let broker = local().await;
    // raw subscriber that never reads after SUBACK
    let mut stalled = TcpStream::connect(broker.local_addr()).await.unwrap();
    stalled
        .write_all(&[0x10, 15, 0, 4, b'M', b'Q', b'T', b'T', 4, 2, 0, 0, 0, 3, b's', b't', b'l'])
        .await
        .unwrap();
    stalled
        .write_all(&[0x82, 6, 0, 1, 0, 1, b'#', 0])
        .await
        .unwrap();
    let mut ack = [0u8; 9];
    stalled.read_exact(&mut ack).await.unwrap();

    let (sub, mut inbox) = client(&broker, "healthy").await;
    sub.subscribe(["#"]).await.unwrap();
    let (p, _) = client(&broker, "blaster").await;
    let payload = vec![7u8; 4096];
    let n = 5000;
    let counter = tokio::spawn(async move {
        let mut count = 0;
        while count < n {
            match tokio::time::timeout(Duration::from_secs(5), inbox.recv()).await {
                Ok(Some(_)) => count += 1,
                _ => break,
            }
        }
        count
    });
    // paced so a healthy reader keeps up; the stalled one still overflows
    for i in 0..n {
        p.publish(&topic("big"), payload.clone()).await.unwrap();
        if i % 100 == 99 {
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
    }
    assert_eq!(counter.await.unwrap(), n, "healthy subscriber got everything");
    assert!(broker.stats().drops > 0, "stalled queue overflowed");
    drop(stalled);
    broker.stop().await;
}

#[tokio::test]
async fn inbound_bridge_delivers_remote_uplinks_locally() {
    let ttn = local().await;
    let local = start(
        BrokerConfig::new("127.0.0.1:0").bridge(
            BridgeRule::inbound(ttn.local_addr().to_string(), "v3/+/devices/#").unwrap(),
        ),
    )
    .await;
    assert!(local.wait_bridges_connected(Duration::from_secs(5)).await);
    let (sub, mut inbox) = client(&local, "rts").await;
    sub.subscribe(["#"]).await.unwrap();

    let (uplink, _) = client(&ttn, "ttn-ns").await;
    for i in 0..20 {
        uplink
            .publish(&topic("v3/app/devices/d1/up"), format!("{{\"id\":{i}}}"))
            .await
            .unwrap();
    }
    // not covered by the bridge filter
    uplink.publish(&topic("v3/app/other"), &b"x"[..]).await.unwrap();

    let got = drain(&mut inbox, Duration::from_millis(300)).await;
    assert_eq!(got.len(), 20);
    assert!(got.iter().all(|(t, _)| t == "v3/app/devices/d1/up"));
    let ids: Vec<String> = got.iter().map(|(_, p)| String::from_utf8(p.clone()).unwrap()).collect();
    assert_eq!(ids[0], "{\"id\":0}");
    assert_eq!(ids[19], "{\"id\":19}");
    local.stop().await;
    ttn.stop().await;
}

#[tokio::test]
async fn bridge_prefix_maps_topics() {
    let remote = local().await;
    let local = start(
        BrokerConfig::new("127.0.0.1:0").bridge(
            BridgeRule::new(remote.local_addr().to_string(), Direction::In, "a/#", Some("ttn"))
                .unwrap(),
        ),
    )
    .await;
    assert!(local.wait_bridges_connected(Duration::from_secs(5)).await);
    let (sub, mut inbox) = client(&local, "s").await;
    sub.subscribe(["ttn/#"]).await.unwrap();
    let (p, _) = client(&remote, "p").await;
    p.publish(&topic("a/b"), &b"1"[..]).await.unwrap();
    let got = drain(&mut inbox, Duration::from_millis(300)).await;
    assert_eq!(got, vec![("ttn/a/b".to_string(), b"1".to_vec())]);
    local.stop().await;
    remote.stop().await;
}

#[tokio::test]
async fn both_direction_bridge_has_no_echo() {
    let remote = local().await;
    let local = start(BrokerConfig::new("127.0.0.1:0").bridge(
        BridgeRule::new(remote.local_addr().to_string(), Direction::Both, "#", None).unwrap(),
    ))
    .await;
    assert!(local.wait_bridges_connected(Duration::from_secs(5)).await);

    let (rsub, mut remote_inbox) = client(&remote, "remote-counter").await;
    rsub.subscribe(["#"]).await.unwrap();
    let (lsub, mut local_inbox) = client(&local, "local-counter").await;
    lsub.subscribe(["#"]).await.unwrap();

    let (rpub, _) = client(&remote, "remote-pub").await;
    let (lpub, _) = client(&local, "local-pub").await;
    for i in 0..50 {
        rpub.publish(&topic("from/remote"), format!("r{i}")).await.unwrap();
        lpub.publish(&topic("from/local"), format!("l{i}")).await.unwrap();
    }

    let remote_got = drain(&mut remote_inbox, Duration::from_millis(500)).await;
    let local_got = drain(&mut local_inbox, Duration::from_millis(200)).await;
    let count = |v: &[(String, Vec<u8>)], t: &str| v.iter().filter(|(x, _)| x == t).count();
    // each side sees its own 50 plus the other's 50, exactly once
    assert_eq!(count(&remote_got, "from/remote"), 50, "no echo back to remote");
    assert_eq!(count(&remote_got, "from/local"), 50);
    assert_eq!(count(&local_got, "from/local"), 50, "no echo back to local");
    assert_eq!(count(&local_got, "from/remote"), 50);
    local.stop().await;
    remote.stop().await;
}

#[tokio::test]
async fn bridge_retries_until_remote_appears() {
    // reserve a port, release it, point the bridge at it
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let remote_addr = format!("127.0.0.1:{port}");
    let local = start(
        BrokerConfig::new("127.0.0.1:0").bridge(BridgeRule::inbound(remote_addr.clone(), "#").unwrap()),
    )
    .await;
    tokio::time::sleep(Duration::from_millis(700)).await;
    assert!(!local.bridges()[0].is_connected());
    let remote = start(BrokerConfig::new(remote_addr)).await;
    assert!(local.wait_bridges_connected(Duration::from_secs(5)).await);
    assert!(
        local.bridges()[0]
            .connect_attempts
            .load(std::sync::atomic::Ordering::Relaxed)
            >= 2
    );
    local.stop().await;
    remote.stop().await;
}

#[tokio::test]
async fn randomized_routing_matches_naive_oracle() {
    use rand::{Rng, SeedableRng};
    let broker = local().await;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let levels = ["a", "b", "c"];
    let filter_levels = ["a", "b", "c", "+", "#"];

    let mut clients = Vec::new();
    let mut table: HashMap<String, Vec<String>> = HashMap::new();
    for i in 0..12 {
        let id = format!("r{i}");
        let (c, inbox) = client(&broker, &id).await;
        let mut filters = Vec::new();
        for _ in 0..rng.random_range(1..4) {
            let depth = rng.random_range(1..4);
            let mut parts: Vec<&str> = (0..depth)
                .map(|_| filter_levels[rng.random_range(0..filter_levels.len())])
                .collect();
            // keep '#' last
            if let Some(pos) = parts.iter().position(|p| *p == "#") {
                parts.truncate(pos + 1);
            }
            filters.push(parts.join("/"));
        }
        c.subscribe(filters.clone()).await.unwrap();
        table.insert(id.clone(), filters);
        clients.push((id, c, inbox));
    }

    let (p, _) = client(&broker, "oracle-pub").await;
    let mut topics = Vec::new();
    for n in 0..200 {
        let depth = rng.random_range(1..4);
        let t: Vec<&str> = (0..depth).map(|_| levels[rng.random_range(0..3)]).collect();
        let t = t.join("/");
        p.publish(&topic(&t), format!("{n}")).await.unwrap();
        topics.push(t);
    }

    // oracle: a session receives a topic iff any of its filters matches, once
    fn naive(filter: &str, topic: &str) -> bool {
        let f: Vec<&str> = filter.split('/').collect();
        let t: Vec<&str> = topic.split('/').collect();
        fn go(f: &[&str], t: &[&str]) -> bool {
            match (f.first(), t.first()) {
                (Some(&"#"), _) => true,
                (None, None) => true,
                (Some(&"+"), Some(_)) => go(&f[1..], &t[1..]),
                (Some(a), Some(b)) if a == b => go(&f[1..], &t[1..]),
                _ => false,
            }
        }
        go(&f, &t)
    }

    for (id, _c, mut inbox) in clients {
        let got: Vec<String> = drain(&mut inbox, Duration::from_millis(200))
            .await
            .into_iter()
            .map(|(_, p)| String::from_utf8(p).unwrap())
            .collect();
        let expected: Vec<String> = topics
            .iter()
            .enumerate()
            .filter(|(_, t)| table[&id].iter().any(|f| naive(f, t)))
            .map(|(n, _)| n.to_string())
            .collect();
        assert_eq!(got, expected, "session {id} filters {:?}", table[&id]);
    }
    broker.stop().await;
}
