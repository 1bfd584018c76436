//! Acceptance suite: runs every criterion in order and prints one PASS/FAIL
//! line each. Exits non-zero if any criterion fails.

#[path = "../../core/tests/support/meta_oracle.rs"]
mod meta_oracle;
#[path = "../../core/tests/support/wire_gen.rs"]
mod wire_gen;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sensert_core::bench::{run_experiment, ExperimentConfig, ExperimentResult};
use sensert_core::broker::{Broker, BrokerConfig, BridgeRule};
use sensert_core::mqtt::{ClientOptions, Incoming, MqttClient};
use sensert_core::rts::coffee::{ACTIVE_POWER_W, CUP_KG, FULL_COFFEE_KG, POT_KG};
use sensert_core::rts::filer::{device_dir, latest_file};
use sensert_core::rts::{BusBody, DataMonitor, EventBus, MonitorClient, SubscriptionPolicy};
use sensert_core::simfleet::{co2_excursion_scenario, coffee_scenario};
use sensert_core::stack::{run_demo, StackConfig};
use sensert_core::wire::TopicName;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn report(n: usize, name: &str, started: Instant, outcome: &Outcome) {
    let secs = started.elapsed().as_secs_f64();
    let line = match outcome {
        Ok(detail) => format!("criterion {n} {name}: PASS ({secs:.1} s) {detail}\n"),
        Err(detail) => format!("criterion {n} {name}: FAIL ({secs:.1} s) {detail}\n"),
    };
    let mut out = std::io::stdout();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    check(started.elapsed() < limit, || {
        format!("took {:.1} s, limit {} s", started.elapsed().as_secs_f64(), limit.as_secs())
    })
}

fn wire_conformance() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..10_000 {
        let p = wire_gen::random_packet(&mut rng);
        wire_gen::round_trip(&p).map_err(|e| format!("packet {i}: {e}"))?;
    }
    let topics = wire_gen::exhaustive_topic_check();
    check(topics.mismatches.is_empty(), || {
        format!("{} topic mismatches, first {:?}", topics.mismatches.len(), topics.mismatches.first())
    })?;
    let mut frames = 0u64;
    let mut decoded = 0usize;
    let fuzz = std::panic::catch_unwind(move || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1_000_000 {
            decoded += wire_gen::decode_all(&wire_gen::fuzz_frame(&mut rng));
            frames += 1;
        }
        (frames, decoded)
    });
    let (frames, decoded) = fuzz.map_err(|_| "decoder panicked on a fuzzed frame".to_string())?;
    within(started, Duration::from_secs(120))?;
    Ok(format!(
        "10000 round trips, {} filters x {} topics, {frames} fuzzed frames ({decoded} decoded)",
        topics.filters,
        wire_gen::all_topics().len()
    ))
}

async fn collect(inbox: &mut Incoming, expect: usize, quiet: Duration) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(30);
    while tokio::time::Instant::now() < deadline {
        let wait = if out.len() >= expect { quiet } else { Duration::from_secs(5) };
        match tokio::time::timeout(wait, inbox.recv()).await {
            Ok(Some(p)) => out.push((p.topic.to_string(), p.payload.to_vec())),
            _ => break,
        }
    }
    out
}

async fn bridging() -> Outcome {
    let started = Instant::now();
    let serve = |c: BrokerConfig| async move { Broker::new().serve(&c).await.map_err(|e| e.to_string()) };
    let ttn = serve(BrokerConfig::new("127.0.0.1:0")).await?;
    let zigbee = serve(BrokerConfig::new("127.0.0.1:0")).await?;
    let local = serve(
        BrokerConfig::new("127.0.0.1:0")
            .bridge(BridgeRule::inbound(ttn.local_addr().to_string(), "v3/+/devices/#").map_err(|e| e.to_string())?)
            .bridge(BridgeRule::inbound(zigbee.local_addr().to_string(), "zigbee/#").map_err(|e| e.to_string())?),
    )
    .await?;
    check(local.wait_bridges_connected(Duration::from_secs(10)).await, || "bridges did not connect".into())?;

    let connect = |addr: std::net::SocketAddr, id: &'static str| async move {
        MqttClient::connect(addr, ClientOptions::new(id)).await.map_err(|e| e.to_string())
    };
    let (local_sub, mut local_in) = connect(local.local_addr(), "acc-local").await?;
    local_sub.subscribe(["#"]).await.map_err(|e| e.to_string())?;
    let (ttn_sub, mut ttn_in) = connect(ttn.local_addr(), "acc-ttn-watch").await?;
    ttn_sub.subscribe(["#"]).await.map_err(|e| e.to_string())?;
    let (zb_sub, mut zb_in) = connect(zigbee.local_addr(), "acc-zb-watch").await?;
    zb_sub.subscribe(["#"]).await.map_err(|e| e.to_string())?;
    let (ttn_pub, _) = connect(ttn.local_addr(), "acc-ttn-pub").await?;
    let (zb_pub, _) = connect(zigbee.local_addr(), "acc-zb-pub").await?;

    let ttn_topic = TopicName::new("v3/app/devices/d1/up").unwrap();
    let zb_topic = TopicName::new("zigbee/m1/state").unwrap();
    for i in 0..1000 {
        ttn_pub.publish(&ttn_topic, format!("t{i}")).await.map_err(|e| e.to_string())?;
        zb_pub.publish(&zb_topic, format!("z{i}")).await.map_err(|e| e.to_string())?;
    }
    let at_local = collect(&mut local_in, 2000, Duration::from_millis(500)).await;
    let at_ttn = collect(&mut ttn_in, 1000, Duration::from_millis(500)).await;
    let at_zb = collect(&mut zb_in, 1000, Duration::from_millis(500)).await;

    let mut counts: HashMap<(String, Vec<u8>), usize> = HashMap::new();
    for m in &at_local {
        *counts.entry(m.clone()).or_default() += 1;
    }
    let missing = (0..1000)
        .flat_map(|i| {
            [
                (ttn_topic.to_string(), format!("t{i}").into_bytes()),
                (zb_topic.to_string(), format!("z{i}").into_bytes()),
            ]
        })
        .filter(|k| counts.get(k) != Some(&1))
        .count();
    check(at_local.len() == 2000 && missing == 0, || {
        format!("local saw {} messages, {missing} not exactly once", at_local.len())
    })?;
    check(at_ttn.len() == 1000 && at_zb.len() == 1000, || {
        format!("origins saw {} and {} messages, echoes present", at_ttn.len(), at_zb.len())
    })?;
    let (ttn_in_count, zb_in_count) = (ttn.stats().msgs_in, zigbee.stats().msgs_in);
    check(ttn_in_count == 1000 && zb_in_count == 1000, || {
        format!("remote ingress counts {ttn_in_count} and {zb_in_count}")
    })?;
    local.stop().await;
    ttn.stop().await;
    zigbee.stop().await;
    within(started, Duration::from_secs(60))?;
    Ok("2000 bridged exactly once, 0 echoes".into())
}

fn coffee_demo() -> Outcome {
    let started = Instant::now();
    let constants = [(ACTIVE_POWER_W, 40.0), (POT_KG, 0.5), (FULL_COFFEE_KG, 2.0), (CUP_KG, 0.25)];
    check(constants.iter().all(|(a, b)| a == b), || format!("constants {constants:?}"))?;
    let expected = [
        "coffee-grinding",
        "new-pot",
        "pot-poured",
        "pot-poured",
        "pot-poured",
        "pot-poured",
        "pot-removed",
        "pot-empty",
    ]
    .join(", ");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut detected = Vec::new();
    for run in 0..10 {
        let out = Command::new(env!("CARGO_BIN_EXE_sensert"))
            .args(["--log-level", "warn", "demo", "--seed", "42", "--out"])
            .arg(dir.path().join(format!("run{run}")))
            .output()
            .map_err(|e| e.to_string())?;
        let stdout = String::from_utf8_lossy(&out.stdout);
        let line = stdout
            .lines()
            .find_map(|l| l.strip_prefix("detected: "))
            .unwrap_or_default()
            .to_owned();
        check(out.status.code() == Some(0), || {
            format!("run {run} exited {:?}: {line}", out.status.code())
        })?;
        detected.push(line);
    }
    check(detected.iter().all(|d| *d == expected), || format!("sequences {detected:?}"))?;
    within(started, Duration::from_secs(180))?;
    Ok("10 runs, identical ground-truth sequence".into())
}

fn category_mean(r: &ExperimentResult, category: &str) -> Result<f64, String> {
    r.categories
        .get(category)
        .map(|s| s.mean_ms)
        .ok_or_else(|| format!("no {category} samples"))
}

fn latency(main: &ExperimentResult, sweep: &BTreeMap<usize, ExperimentResult>) -> Outcome {
    let ordered = main.ordered_fraction();
    check(main.complete() > 0 && ordered == 1.0, || {
        format!("{} complete records, ordered fraction {ordered}", main.complete())
    })?;
    let e2e = main.end_to_end.ok_or("no end-to-end samples")?;
    check(e2e.mean_ms < 50.0, || format!("end-to-end mean {:.3} ms", e2e.mean_ms))?;
    let offset = category_mean(main, "deepdish")? - category_mean(main, "smartplug")?;
    check((offset - 200.0).abs() <= 50.0, || format!("deepdish offset {offset:.3} ms"))?;
    let mean_of = |n: usize| sweep.get(&n).and_then(|r| r.end_to_end).map(|s| s.mean_ms);
    let (m10, m100) = (mean_of(10).ok_or("no N=10 data")?, mean_of(100).ok_or("no N=100 data")?);
    check(m100 <= 2.0 * m10, || format!("mean N=100 {m100:.3} ms vs N=10 {m10:.3} ms"))?;
    Ok(format!(
        "{} complete, e2e mean {:.3} ms, deepdish offset {offset:.1} ms, N=10/45/100 means {m10:.3}/{:.3}/{m100:.3} ms",
        main.complete(),
        e2e.mean_ms,
        mean_of(45).unwrap_or(e2e.mean_ms)
    ))
}

/// Publishes `total` padded envelopes in paced batches and returns each publish duration in ns.
async fn publish_timed(bus: &EventBus, total: usize) -> Vec<u64> {
    let publisher = bus.publisher("acceptance");
    let address = TopicName::new("feed/load/d1").unwrap();
    let pad = "x".repeat(1024);
    let mut durations = Vec::with_capacity(total);
    for i in 0..total {
        let body = BusBody::Json(json!({"seq": i, "pad": pad}));
        let t = Instant::now();
        publisher.publish(address.clone(), body);
        durations.push(t.elapsed().as_nanos() as u64);
        if i % 50 == 49 {
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }
    durations
}

fn p99(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[(v.len() * 99).div_ceil(100) - 1]
}

struct LoadRun {
    p99_ns: u64,
    counted: Vec<u64>,
    active_lines: u64,
    stalled_dropped: u64,
}

async fn load_run(total: usize, with_stalled: bool) -> Result<LoadRun, String> {
    let bus = EventBus::new();
    let monitor = DataMonitor::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let addr = monitor.local_addr();
    let monitor_dep = bus.deploy(monitor);
    let counters: Vec<_> = (0..3)
        .map(|i| {
            let sub = bus.subscribe(
                format!("counter-{i}"),
                SubscriptionPolicy::new(["feed/#"]).unwrap().capacity(total),
            );
            tokio::spawn(async move {
                let mut n = 0u64;
                while let Some(_d) = sub.recv().await {
                    n += 1;
                }
                n
            })
        })
        .collect();
    let stalled = if with_stalled {
        let mut c = MonitorClient::connect(addr).await.map_err(|e| e.to_string())?;
        c.subscribe(&["#"]).await.map_err(|e| e.to_string())?;
        Some(c)
    } else {
        None
    };
    let mut active = MonitorClient::connect(addr).await.map_err(|e| e.to_string())?;
    active.subscribe(&["feed/#"]).await.map_err(|e| e.to_string())?;
    let reader = tokio::spawn(async move {
        let mut n = 0u64;
        while let Ok(Ok(Some(_))) = tokio::time::timeout(Duration::from_secs(2), active.recv()).await {
            n += 1;
        }
        n
    });

    let durations = publish_timed(&bus, total).await;
    let active_lines = reader.await.map_err(|e| e.to_string())?;
    let stalled_dropped = bus
        .subscription_reports()
        .iter()
        .filter(|r| !r.label.starts_with("counter-"))
        .map(|r| r.stats.dropped)
        .sum();
    for r in bus.subscription_reports().iter().filter(|r| r.label.starts_with("counter-")) {
        let sub_stats = r.stats;
        if sub_stats.dropped > 0 {
            return Err(format!("{} dropped {}", r.label, sub_stats.dropped));
        }
    }
    drop(stalled);
    monitor_dep.undeploy_within(Duration::from_secs(5)).await;
    let counted = close_counters(&bus, counters).await;
    Ok(LoadRun {
        p99_ns: p99(durations),
        counted,
        active_lines,
        stalled_dropped,
    })
}

async fn close_counters(bus: &EventBus, counters: Vec<tokio::task::JoinHandle<u64>>) -> Vec<u64> {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    while bus.subscription_reports().iter().any(|r| r.label.starts_with("counter-") && r.stats.queued > 0)
        && tokio::time::Instant::now() < deadline
    {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let delivered: Vec<u64> = bus
        .subscription_reports()
        .iter()
        .filter(|r| r.label.starts_with("counter-"))
        .map(|r| r.stats.delivered)
        .collect();
    for c in counters {
        c.abort();
    }
    delivered
}

async fn non_blocking() -> Outcome {
    const TOTAL: usize = 20_000;
    let mut baseline = Vec::new();
    let mut stalled = Vec::new();
    for _ in 0..3 {
        baseline.push(load_run(TOTAL, false).await?);
        stalled.push(load_run(TOTAL, true).await?);
    }
    for run in baseline.iter().chain(&stalled) {
        check(run.counted.iter().all(|&n| n == TOTAL as u64), || format!("counters got {:?}", run.counted))?;
        check(run.active_lines == TOTAL as u64, || {
            format!("active monitor client got {} of {TOTAL}", run.active_lines)
        })?;
    }
    check(stalled.iter().all(|r| r.stalled_dropped > 0), || "the stalled client never filled its queue".into())?;
    let median = |runs: &[LoadRun]| {
        let mut v: Vec<u64> = runs.iter().map(|r| r.p99_ns).collect();
        v.sort_unstable();
        v[v.len() / 2]
    };
    let (base, with) = (median(&baseline), median(&stalled));
    let ratio = with as f64 / base as f64;
    check(ratio < 2.0, || format!("p99 publish {base} ns -> {with} ns, ratio {ratio:.2}"))?;
    Ok(format!("p99 publish {base} ns -> {with} ns (ratio {ratio:.2}), other subscribers 100%"))
}

async fn conservation(main: &ExperimentResult) -> Outcome {
    let mut detail = Vec::new();
    for scenario in [coffee_scenario(), co2_excursion_scenario()] {
        let outcome = run_demo(&StackConfig::default(), &scenario, 5, 100.0)
            .await
            .map_err(|e| e.to_string())?;
        let audit = &outcome.bench.audit;
        check(audit.holds(), || format!("{} audit {audit:?}", scenario.name))?;
        detail.push(format!(
            "{}: {} subscriptions, feed {} = {} + {}",
            scenario.name,
            audit.subscriptions.len(),
            audit.feed_received,
            audit.feed_published,
            audit.feed_dead_letters
        ));
    }
    check(main.audit.holds(), || format!("N=45 audit {:?}", main.audit))?;
    Ok(detail.join("; "))
}

fn metadata() -> Outcome {
    let mut queries = 0;
    for seed in 0..10_000u64 {
        let outcome = meta_oracle::check_history(seed);
        check(outcome.mismatches.is_empty(), || format!("seed {seed}: {:?}", outcome.mismatches.first()))?;
        queries += outcome.queries;
    }
    Ok(format!("10000 histories, {queries} queries agree"))
}

fn jsonl_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            jsonl_files(&path, out)?;
        } else if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            out.push(path);
        }
    }
    Ok(())
}

fn storage(main: &ExperimentResult, root: &Path) -> Outcome {
    let mut expected: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &main.fleet.log {
        *expected.entry(e.device_id.as_str()).or_default() += 1;
    }
    check(!expected.is_empty(), || "empty emission log".into())?;
    for (device, &count) in &expected {
        let mut files = Vec::new();
        jsonl_files(&root.join(device_dir(device)), &mut files).map_err(|e| format!("{device}: {e}"))?;
        let mut lines = 0;
        let mut max_ts = 0u64;
        for path in files {
            for line in std::fs::read_to_string(&path).map_err(|e| e.to_string())?.lines() {
                let v: Value = serde_json::from_str(line).map_err(|e| format!("{}: {e}", path.display()))?;
                max_ts = max_ts.max(v["ts"].as_u64().unwrap_or(0));
                lines += 1;
            }
        }
        check(lines == count, || format!("{device}: {lines} lines, {count} emitted"))?;
        let latest: Value = serde_json::from_str(
            &std::fs::read_to_string(latest_file(root, device)).map_err(|e| format!("{device} latest: {e}"))?,
        )
        .map_err(|e| e.to_string())?;
        check(latest["ts"].as_u64() == Some(max_ts), || {
            format!("{device}: latest ts {} vs max {max_ts}", latest["ts"])
        })?;
    }
    Ok(format!("{} devices, {} lines match the emission log", expected.len(), main.fleet.log.len()))
}

/// Criterion numbers given on the command line; all of them when none are.
fn selected() -> Vec<usize> {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if picked.is_empty() {
        (1..=8).collect()
    } else {
        picked
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let want = selected();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("tokio runtime");
    let data = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;
    let mut record = |n: usize, name: &str, started: Instant, outcome: Outcome| {
        report(n, name, started, &outcome);
        if outcome.is_err() {
            failures += 1;
        }
    };

    if want.contains(&1) {
        let t = Instant::now();
        record(1, "wire conformance", t, wire_conformance());
    }
    if want.contains(&2) {
        let t = Instant::now();
        record(2, "bridging correctness", t, runtime.block_on(bridging()));
    }
    if want.contains(&3) {
        let t = Instant::now();
        record(3, "coffee end-to-end", t, coffee_demo());
    }

    let t = Instant::now();
    let main_run = [4, 6, 8].iter().any(|n| want.contains(n)).then(|| {
        runtime.block_on(async {
            let mut config = ExperimentConfig::new(45, 120.0);
            config.stack.data_root = Some(data.path().to_path_buf());
            run_experiment(&config).await.map_err(|e| e.to_string())
        })
    });
    let main_run = main_run.unwrap_or_else(|| Err("not run".into()));
    if want.contains(&4) {
        let sweep = runtime.block_on(async {
            let mut out = BTreeMap::new();
            for n in [10, 100] {
                out.insert(n, run_experiment(&ExperimentConfig::new(n, 30.0)).await?);
            }
            Ok::<_, sensert_core::stack::StackError>(out)
        });
        let outcome = match (&main_run, sweep) {
            (Ok(main), Ok(sweep)) => latency(main, &sweep),
            (Err(e), _) => Err(format!("N=45 experiment failed: {e}")),
            (_, Err(e)) => Err(format!("sweep failed: {e}")),
        };
        record(4, "latency properties", t, outcome);
    }
    if want.contains(&5) {
        let t = Instant::now();
        record(5, "non-blocking contract", t, runtime.block_on(non_blocking()));
    }
    if want.contains(&6) {
        let t = Instant::now();
        let outcome = match &main_run {
            Ok(main) => runtime.block_on(conservation(main)),
            Err(e) => Err(format!("no N=45 run: {e}")),
        };
        record(6, "conservation audit", t, outcome);
    }
    if want.contains(&7) {
        let t = Instant::now();
        record(7, "metadata time travel", t, metadata());
    }
    if want.contains(&8) {
        let t = Instant::now();
        let outcome = match &main_run {
            Ok(main) => storage(main, data.path()),
            Err(e) => Err(format!("no N=45 run: {e}")),
        };
        record(8, "storage replay", t, outcome);
    }

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all selected acceptance criteria passed");
}
