//! The whole system in one process: ttn and zigbee brokers bridged into the
//! local broker, the deCONZ stand-in and translator, and an RTS with every verticle.

use std::collections::HashSet;
use std::io::ErrorKind;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::bench::{key_of, MsgKey, TapPoint, TapRecorder};
use crate::broker::{Broker, BrokerConfig, BrokerError, BrokerHandle, BridgeRule, Ingress};
use crate::clock::now_us;
use crate::decoders::DecoderRegistry;
use crate::rts::filer::FilerStats;
use crate::rts::threshold::{Comparison, ThresholdStats};
use crate::rts::{
    DataMonitor, Deployment, EventBus, FeedHandler, FeedStats, MessageFiler, MessageRouter, MonitorClient, Route,
    RtCoffee, SubscriptionReport, ThresholdRule, ThresholdWatch,
};
use crate::simfleet::{DeconzGateway, FleetConfig, TranslatorHandle, ZigbeeTranslator};

pub const TTN_BRIDGE_FILTER: &str = "v3/+/devices/#";
pub const ZIGBEE_BRIDGE_FILTER: &str = "zigbee/#";

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error("address {0} is already in use")]
    PortConflict(String),
    #[error("invalid stack config: {0}")]
    Config(String),
    #[error(transparent)]
    Broker(BrokerError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("stack did not become ready within {0:?}")]
    NotReady(Duration),
}

fn bind_error(addr: &str, e: std::io::Error) -> StackError {
    if e.kind() == ErrorKind::AddrInUse {
        StackError::PortConflict(addr.to_owned())
    } else {
        StackError::Io(e)
    }
}

impl From<BrokerError> for StackError {
    fn from(e: BrokerError) -> Self {
        match e {
            BrokerError::Bind { addr, source } if source.kind() == ErrorKind::AddrInUse => StackError::PortConflict(addr),
            other => StackError::Broker(other),
        }
    }
}

pub fn default_rules() -> Vec<ThresholdRule> {
    vec![ThresholdRule::new("feed/co2/#", "co2", Comparison::Above, 1000.0, 50.0).expect("valid rule filter")]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    pub local: String,
    pub ttn: String,
    pub zigbee: String,
    pub deconz: String,
    pub monitor: String,
    pub data_root: Option<PathBuf>,
    pub rules: Vec<ThresholdRule>,
    pub routes: Vec<Route>,
    pub ttn_app: String,
}

impl Default for StackConfig {
    fn default() -> Self {
        let any = "127.0.0.1:0".to_string();
        Self {
            local: any.clone(),
            ttn: any.clone(),
            zigbee: any.clone(),
            deconz: any.clone(),
            monitor: any,
            data_root: None,
            rules: default_rules(),
            routes: Vec::new(),
            ttn_app: "sensert".into(),
        }
    }
}

impl StackConfig {
    pub fn from_json(raw: &str) -> Result<Self, StackError> {
        let config: Self = serde_json::from_str(raw).map_err(|e| StackError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Fixed listen addresses must be distinct; port 0 is always allowed.
    pub fn validate(&self) -> Result<(), StackError> {
        let mut seen = HashSet::new();
        for addr in [&self.local, &self.ttn, &self.zigbee, &self.deconz, &self.monitor] {
            if addr.ends_with(":0") {
                continue;
            }
            if !seen.insert(addr.as_str()) {
                return Err(StackError::Config(format!("address {addr} is used twice")));
            }
        }
        Ok(())
    }
}

/// Per-subscription and FeedHandler counters after a run.
#[derive(Debug, Clone, Serialize)]
pub struct ConservationAudit {
    pub subscriptions: Vec<SubscriptionReport>,
    pub feed_received: u64,
    pub feed_published: u64,
    pub feed_dead_letters: u64,
}

impl ConservationAudit {
    /// Every subscription satisfies offered = delivered + dropped + stale-dropped + queued.
    pub fn subscriptions_balanced(&self) -> bool {
        self.subscriptions.iter().all(|s| s.stats.balanced())
    }

    /// Nothing left queued, so offered = delivered + dropped + stale-dropped exactly.
    pub fn drained(&self) -> bool {
        self.subscriptions.iter().all(|s| s.stats.queued == 0)
    }

    pub fn feed_balanced(&self) -> bool {
        self.feed_received == self.feed_published + self.feed_dead_letters
    }

    pub fn holds(&self) -> bool {
        self.subscriptions_balanced() && self.drained() && self.feed_balanced()
    }
}

pub struct Stack {
    pub local: BrokerHandle,
    pub ttn: BrokerHandle,
    pub zigbee: BrokerHandle,
    pub gateway: DeconzGateway,
    pub translator: TranslatorHandle,
    pub bus: EventBus,
    pub monitor_addr: SocketAddr,
    pub feed_stats: Arc<FeedStats>,
    pub filer_stats: Option<Arc<FilerStats>>,
    pub threshold_stats: Arc<ThresholdStats>,
    ttn_app: String,
    deployments: Vec<Deployment>,
    client_tap: Option<(JoinHandle<()>, Arc<tokio::sync::Notify>, Arc<std::sync::atomic::AtomicBool>)>,
}

fn gateway_hook(recorder: Arc<TapRecorder>) -> crate::broker::IngressHook {
    let registry = DecoderRegistry::with_builtin();
    Arc::new(move |p, ingress| {
        let t = now_us();
        if ingress == Ingress::Client {
            if let Some(key) = key_of(&registry, &p.topic, &p.payload) {
                recorder.tap(TapPoint::Gateway, key, t);
            }
        }
    })
}

/// At the local broker: bridged traffic is the broker hop; WiFi devices
/// connect directly, so their gateway and broker hops coincide.
fn local_hook(recorder: Arc<TapRecorder>) -> crate::broker::IngressHook {
    let registry = DecoderRegistry::with_builtin();
    Arc::new(move |p, ingress| {
        let t = now_us();
        if let Some(key) = key_of(&registry, &p.topic, &p.payload) {
            if ingress == Ingress::Client {
                recorder.tap(TapPoint::Gateway, key.clone(), t);
            }
            recorder.tap(TapPoint::Broker, key, t);
        }
    })
}

impl Stack {
    pub async fn start(config: &StackConfig, recorder: Option<Arc<TapRecorder>>) -> Result<Self, StackError> {
        config.validate()?;
        let ttn_broker = Broker::new();
        let local_broker = Broker::new();
        if let Some(r) = &recorder {
            ttn_broker.set_ingress_hook(Some(gateway_hook(Arc::clone(r))));
            local_broker.set_ingress_hook(Some(local_hook(Arc::clone(r))));
        }
        let ttn = ttn_broker.serve(&BrokerConfig::new(&config.ttn)).await?;
        let zigbee = Broker::new().serve(&BrokerConfig::new(&config.zigbee)).await?;
        let local_config = BrokerConfig::new(&config.local)
            .bridge(BridgeRule::inbound(ttn.local_addr().to_string(), TTN_BRIDGE_FILTER)?)
            .bridge(BridgeRule::inbound(zigbee.local_addr().to_string(), ZIGBEE_BRIDGE_FILTER)?);
        let local = local_broker.serve(&local_config).await?;

        let gateway = DeconzGateway::bind(&config.deconz)
            .await
            .map_err(|e| bind_error(&config.deconz, e))?;
        let mut translator = ZigbeeTranslator::new(gateway.url(), zigbee.local_addr().to_string());
        if let Some(r) = &recorder {
            let r = Arc::clone(r);
            let registry = DecoderRegistry::with_builtin();
            translator = translator.tap(Arc::new(move |topic, payload| {
                let t = now_us();
                if let Some(key) = key_of(&registry, topic, payload) {
                    r.tap(TapPoint::Gateway, key, t);
                }
            }));
        }
        let translator = translator.spawn();

        let bus = EventBus::new();
        let mut deployments = Vec::new();
        let monitor = DataMonitor::bind(&config.monitor)
            .await
            .map_err(|e| bind_error(&config.monitor, e))?;
        let monitor_addr = monitor.local_addr();
        deployments.push(bus.deploy(monitor));

        let filer_stats = config.data_root.as_ref().map(|root| {
            let filer = MessageFiler::new(root.clone());
            let stats = filer.stats();
            deployments.push(bus.deploy(filer));
            stats
        });
        let threshold = ThresholdWatch::new(config.rules.clone());
        let threshold_stats = threshold.stats();
        deployments.push(bus.deploy(threshold));
        deployments.push(bus.deploy(RtCoffee));
        if !config.routes.is_empty() {
            deployments.push(bus.deploy(MessageRouter::new(config.routes.clone())));
        }

        let mut feed = FeedHandler::new(local.local_addr().to_string(), DecoderRegistry::with_builtin());
        if let Some(r) = &recorder {
            let r = Arc::clone(r);
            feed = feed.tap(Arc::new(move |m| {
                if let Some(t0) = m.sim_t0 {
                    r.tap_now(TapPoint::EventBus, MsgKey::new(m.device_id.clone(), t0));
                }
            }));
        }
        let feed_stats = feed.stats();
        deployments.push(bus.deploy(feed));

        let client_tap = recorder.map(|r| {
            let ready = Arc::new(tokio::sync::Notify::new());
            let subscribed = Arc::new(std::sync::atomic::AtomicBool::new(false));
            let task = tokio::spawn(client_tap(monitor_addr, r, Arc::clone(&ready), Arc::clone(&subscribed)));
            (task, ready, subscribed)
        });

        Ok(Self {
            local,
            ttn,
            zigbee,
            gateway,
            translator,
            bus,
            monitor_addr,
            feed_stats,
            filer_stats,
            threshold_stats,
            ttn_app: config.ttn_app.clone(),
            deployments,
            client_tap,
        })
    }

    /// Waits until bridges, translator, FeedHandler and the client tap are connected.
    pub async fn ready(&self, timeout: Duration) -> Result<(), StackError> {
        let deadline = Instant::now() + timeout;
        if !self.local.wait_bridges_connected(timeout).await {
            return Err(StackError::NotReady(timeout));
        }
        let left = deadline.saturating_duration_since(Instant::now());
        if !self.translator.wait_connected(left).await {
            return Err(StackError::NotReady(timeout));
        }
        loop {
            let client_ok = self
                .client_tap
                .as_ref()
                .is_none_or(|(_, _, subscribed)| subscribed.load(Ordering::SeqCst));
            if self.feed_stats.is_connected() && client_ok {
                return Ok(());
            }
            if Instant::now() >= deadline {
                return Err(StackError::NotReady(timeout));
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    pub fn fleet_config(&self) -> FleetConfig {
        let mut c = FleetConfig::new(self.local.local_addr().to_string(), self.ttn.local_addr().to_string())
            .deconz(self.gateway.sender());
        c.ttn_app = self.ttn_app.clone();
        c
    }

    /// Waits until traffic stops and every subscription queue is empty.
    pub async fn drain(&self, quiet: Duration, max: Duration) -> bool {
        let deadline = Instant::now() + max;
        let snapshot = || {
            let reports = self.bus.subscription_reports();
            let queued: u64 = reports.iter().map(|r| r.stats.queued).sum();
            let delivered: u64 = reports.iter().map(|r| r.stats.delivered).sum();
            (self.bus.stats().published, self.local.stats().msgs_in, delivered, queued)
        };
        let mut last = snapshot();
        let mut stable_since = Instant::now();
        loop {
            tokio::time::sleep(Duration::from_millis(20)).await;
            let now = snapshot();
            if now != last {
                last = now;
                stable_since = Instant::now();
            } else if now.3 == 0 && stable_since.elapsed() >= quiet {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
        }
    }

    pub fn audit(&self) -> ConservationAudit {
        let (received, published, dead_letters) = self.feed_stats.snapshot();
        ConservationAudit {
            subscriptions: self.bus.subscription_reports(),
            feed_received: received,
            feed_published: published,
            feed_dead_letters: dead_letters,
        }
    }

    pub async fn stop(mut self) {
        if let Some((task, stop, _)) = self.client_tap.take() {
            stop.notify_one();
            let _ = tokio::time::timeout(Duration::from_secs(1), task).await;
        }
        while let Some(d) = self.deployments.pop() {
            d.undeploy_within(Duration::from_secs(5)).await;
        }
        self.translator.stop().await;
        self.gateway.stop().await;
        self.local.stop().await;
        self.ttn.stop().await;
        self.zigbee.stop().await;
    }
}

/// Client-side application tap: a DataMonitor client subscribed to every reading.
async fn client_tap(
    addr: SocketAddr,
    recorder: Arc<TapRecorder>,
    stop: Arc<tokio::sync::Notify>,
    subscribed: Arc<std::sync::atomic::AtomicBool>,
) {
    let mut client = loop {
        match MonitorClient::connect(addr).await {
            Ok(c) => break c,
            Err(_) => tokio::time::sleep(Duration::from_millis(20)).await,
        }
    };
    if client.subscribe(&["feed/#"]).await.is_err() {
        tracing::warn!("client tap could not subscribe");
        return;
    }
    subscribed.store(true, Ordering::SeqCst);
    loop {
        let line = tokio::select! {
            _ = stop.notified() => return,
            line = client.recv() => line,
        };
        let Ok(Some(line)) = line else { return };
        let t = now_us();
        let device = line.body.get("device_id").and_then(|v| v.as_str());
        let t0 = line.body.get("sim_t0").and_then(|v| v.as_u64());
        if let (Some(device), Some(t0)) = (device, t0) {
            recorder.tap(TapPoint::Client, MsgKey::new(device, t0), t);
        }
    }
}

#[derive(Debug)]
pub struct DemoOutcome {
    pub scenario: String,
    pub expected: Vec<String>,
    pub observed: Vec<String>,
    /// Tap statistics of the run; its audit covers the whole demo.
    pub bench: crate::bench::ExperimentResult,
}

impl DemoOutcome {
    pub fn matched(&self) -> bool {
        self.expected == self.observed
    }
}

/// Replays a scripted scenario through a fresh stack and collects the
/// derived events a DataMonitor client sees, excluding coffee-level updates.
pub async fn run_demo(
    config: &StackConfig,
    scenario: &crate::simfleet::ScenarioScript,
    seed: u64,
    speed: f64,
) -> Result<DemoOutcome, StackError> {
    let recorder = Arc::new(TapRecorder::new());
    let stack = Stack::start(config, Some(Arc::clone(&recorder))).await?;
    stack.ready(Duration::from_secs(10)).await?;

    let mut client = MonitorClient::connect(stack.monitor_addr)
        .await
        .map_err(|e| StackError::Io(std::io::Error::other(e)))?;
    client
        .subscribe(&["event/#"])
        .await
        .map_err(|e| StackError::Io(std::io::Error::other(e)))?;
    let stop = Arc::new(tokio::sync::Notify::new());
    let collector = {
        let stop = Arc::clone(&stop);
        tokio::spawn(async move {
            let mut seen = Vec::new();
            loop {
                let line = tokio::select! {
                    _ = stop.notified() => break,
                    line = client.recv() => line,
                };
                let Ok(Some(line)) = line else { break };
                if let Some(kind) = line.body.get("event_type").and_then(|v| v.as_str()) {
                    if kind != crate::rts::COFFEE_LEVEL {
                        seen.push(kind.to_owned());
                    }
                }
            }
            seen
        })
    };

    let profiles = scenario.profiles();
    let fleet = stack.fleet_config().seed(seed).speed(speed);
    let report = crate::simfleet::run_fleet(&profiles, Some(scenario), scenario.duration_s, &fleet)
        .await
        .map_err(|e| StackError::Config(e.to_string()))?;
    stack.drain(Duration::from_millis(300), Duration::from_secs(10)).await;
    stop.notify_one();
    let observed = collector.await.unwrap_or_default();
    let audit = stack.audit();
    stack.stop().await;
    Ok(DemoOutcome {
        scenario: scenario.name.clone(),
        expected: scenario.ground_truth.clone(),
        observed,
        bench: crate::bench::summarize(profiles.len(), &profiles, &recorder, report, audit),
    })
}
