//! Live fleet: one timer task per device, each with its own transport link.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use super::{
    device_plan, validate_fleet, DeconzSender, DeviceProfile, DeviceSim, EmissionRecord, ScenarioScript, SimError,
    Transport, DEVICE_BUFFER,
};
use crate::broker::backoff_delays;
use crate::clock::now_ms;
use crate::mqtt::{ClientOptions, MqttClient};
use crate::wire::TopicName;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
const FINAL_FLUSH: Duration = Duration::from_secs(2);

/// Maps simulated seconds since the run start to reading times and wall instants.
#[derive(Debug, Clone, Copy)]
pub struct SimClock {
    start: Instant,
    sim_origin_ms: u64,
    speed: f64,
}

impl SimClock {
    pub fn new(sim_origin_ms: u64, speed: f64) -> Self {
        Self {
            start: Instant::now(),
            sim_origin_ms,
            speed: if speed > 0.0 { speed } else { 1.0 },
        }
    }

    /// Reading times track the host clock.
    pub fn realtime() -> Self {
        Self::new(now_ms(), 1.0)
    }

    /// Reading times end at the present when the run finishes, so a sped-up
    /// run never reports readings from the future.
    pub fn ending_now(duration_s: f64, speed: f64) -> Self {
        let span = (duration_s * 1000.0) as u64;
        Self::new(now_ms().saturating_sub(span), speed)
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn sim_ms(&self, offset_s: f64) -> u64 {
        self.sim_origin_ms + (offset_s * 1000.0).round() as u64
    }

    pub fn instant_for(&self, offset_s: f64) -> Instant {
        self.start + Duration::from_secs_f64((offset_s / self.speed).max(0.0))
    }
}

#[derive(Clone)]
pub struct FleetConfig {
    /// Broker for WiFi devices.
    pub local: String,
    /// Broker standing in for the TTN network server.
    pub ttn: String,
    pub deconz: Option<DeconzSender>,
    pub ttn_app: String,
    pub seed: u64,
    pub speed: f64,
    /// Reading time of simulated second zero; `None` picks one from the speed.
    pub sim_origin_ms: Option<u64>,
    pub cancel: CancellationToken,
}

impl FleetConfig {
    pub fn new(local: impl Into<String>, ttn: impl Into<String>) -> Self {
        Self {
            local: local.into(),
            ttn: ttn.into(),
            deconz: None,
            ttn_app: "sensert".into(),
            seed: 1,
            speed: 1.0,
            sim_origin_ms: None,
            cancel: CancellationToken::new(),
        }
    }

    pub fn deconz(mut self, sender: DeconzSender) -> Self {
        self.deconz = Some(sender);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn speed(mut self, speed: f64) -> Self {
        self.speed = speed;
        self
    }
}

#[derive(Debug, Default)]
pub struct FleetReport {
    /// Every message handed to a transport, ordered by `sim_t0`.
    pub log: Vec<EmissionRecord>,
    /// Per device: messages pushed out of a full buffer.
    pub dropped: BTreeMap<String, u64>,
    /// Messages still buffered when the run ended.
    pub undelivered: u64,
}

impl FleetReport {
    pub fn total_dropped(&self) -> u64 {
        self.dropped.values().sum()
    }
}

struct Pending {
    record: EmissionRecord,
    topic: TopicName,
    payload: Vec<u8>,
}

enum Link {
    Mqtt {
        addr: String,
        client_id: String,
        client: Option<MqttClient>,
        retry_at: Instant,
        delays: Box<dyn Iterator<Item = Duration> + Send>,
    },
    Deconz(Option<DeconzSender>),
}

impl Link {
    fn new(profile: &DeviceProfile, config: &FleetConfig) -> Self {
        let addr = match profile.transport {
            Transport::DeconzWs => return Link::Deconz(config.deconz.clone()),
            Transport::WifiMqtt => config.local.clone(),
            Transport::TtnMqtt => config.ttn.clone(),
        };
        Link::Mqtt {
            addr,
            client_id: format!("sim-{}", profile.device_id),
            client: None,
            retry_at: Instant::now(),
            delays: Box::new(backoff_delays()),
        }
    }

    async fn ensure(&mut self) {
        let Link::Mqtt { addr, client_id, client, retry_at, delays } = self else { return };
        if client.as_ref().is_some_and(|c| !c.is_closed()) || Instant::now() < *retry_at {
            return;
        }
        let attempt = tokio::time::timeout(CONNECT_TIMEOUT, MqttClient::connect(addr.as_str(), ClientOptions::new(client_id.as_str()))).await;
        match attempt {
            Ok(Ok((c, _))) => {
                *client = Some(c);
                *delays = Box::new(backoff_delays());
            }
            _ => {
                *client = None;
                *retry_at = Instant::now() + delays.next().unwrap_or_default();
            }
        }
    }

    /// Sends buffered messages oldest first until the buffer empties or the link fails.
    async fn flush(&mut self, buffer: &mut VecDeque<Pending>, log: &Mutex<Vec<EmissionRecord>>) {
        self.ensure().await;
        while let Some(front) = buffer.front() {
            let sent = match self {
                Link::Mqtt { client, .. } => match client {
                    Some(c) => {
                        let ok = c.publish(&front.topic, front.payload.clone()).await.is_ok();
                        if !ok {
                            *client = None;
                        }
                        ok
                    }
                    None => false,
                },
                Link::Deconz(sender) => sender
                    .as_ref()
                    .is_some_and(|s| s.send(String::from_utf8_lossy(&front.payload).into_owned())),
            };
            if !sent {
                break;
            }
            let done = buffer.pop_front().expect("front exists");
            log.lock().push(done.record);
        }
    }

    async fn close(self) {
        if let Link::Mqtt { client: Some(c), .. } = self {
            c.disconnect().await;
        }
    }
}

struct DeviceOutcome {
    device_id: String,
    dropped: u64,
    undelivered: u64,
}

async fn device_task(
    profile: DeviceProfile,
    script: Option<ScenarioScript>,
    duration_s: f64,
    clock: SimClock,
    config: FleetConfig,
    log: Arc<Mutex<Vec<EmissionRecord>>>,
) -> DeviceOutcome {
    let plan = device_plan(&profile, script.as_ref(), duration_s, config.seed);
    let mut sim = DeviceSim::new(profile.clone(), config.seed);
    let mut link = Link::new(&profile, &config);
    let mut buffer: VecDeque<Pending> = VecDeque::new();
    let mut dropped = 0;
    let mut last_t0 = 0;
    let extra_delay = Duration::from_secs_f64(profile.extra_delay_s);
    link.ensure().await;

    for planned in plan {
        tokio::select! {
            _ = config.cancel.cancelled() => break,
            _ = tokio::time::sleep_until(clock.instant_for(planned.at_s)) => {}
        }
        if let Some(fields) = &planned.script {
            sim.apply(fields);
        }
        let ts = clock.sim_ms(planned.at_s);
        let sim_t0 = now_ms().max(last_t0 + 1);
        last_t0 = sim_t0;
        let (topic, payload) = sim.emit(ts, sim_t0, &config.ttn_app);
        if !extra_delay.is_zero() {
            tokio::time::sleep(extra_delay).await;
        }
        if buffer.len() >= DEVICE_BUFFER {
            buffer.pop_front();
            dropped += 1;
        }
        buffer.push_back(Pending {
            record: EmissionRecord {
                device_id: profile.device_id.clone(),
                sim_t0,
                topic: topic.as_str().to_owned(),
                scripted: planned.script.is_some(),
                ts,
            },
            topic,
            payload: serde_json::to_vec(&payload).expect("payload serializes"),
        });
        link.flush(&mut buffer, &log).await;
    }

    let deadline = Instant::now() + FINAL_FLUSH;
    while !buffer.is_empty() && Instant::now() < deadline && !config.cancel.is_cancelled() {
        tokio::time::sleep(Duration::from_millis(50)).await;
        link.flush(&mut buffer, &log).await;
    }
    link.close().await;
    DeviceOutcome {
        device_id: profile.device_id,
        dropped,
        undelivered: buffer.len() as u64,
    }
}

/// Runs every profile for `duration_s` simulated seconds.
pub async fn run_fleet(
    profiles: &[DeviceProfile],
    scenario: Option<&ScenarioScript>,
    duration_s: f64,
    config: &FleetConfig,
) -> Result<FleetReport, SimError> {
    validate_fleet(profiles)?;
    if let Some(s) = scenario {
        s.validate(profiles)?;
    }
    let clock = match config.sim_origin_ms {
        Some(origin) => SimClock::new(origin, config.speed),
        None if config.speed > 1.0 => SimClock::ending_now(duration_s, config.speed),
        None => SimClock::new(now_ms(), config.speed),
    };
    let log = Arc::new(Mutex::new(Vec::new()));
    let tasks: Vec<_> = profiles
        .iter()
        .map(|p| {
            tokio::spawn(device_task(
                p.clone(),
                scenario.cloned(),
                duration_s,
                clock,
                config.clone(),
                Arc::clone(&log),
            ))
        })
        .collect();
    let mut report = FleetReport::default();
    for t in tasks {
        let outcome = t.await.expect("device task panicked");
        report.undelivered += outcome.undelivered;
        report.dropped.insert(outcome.device_id, outcome.dropped);
    }
    let mut log = std::mem::take(&mut *log.lock());
    log.sort_by_key(|r| r.sim_t0);
    report.log = log;
    Ok(report)
}
