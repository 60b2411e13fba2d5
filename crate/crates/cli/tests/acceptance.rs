//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringscope::capture::{
    capture, CaptureContext, DType, DeviceCopyEngine, Dim, HookDecl, HookRegistry, HookScope,
    HookSite, HookSpec, OnRingFull, ShapeTemplate, TensorView,
};
use ringscope::config::RunConfig;
use ringscope::exporter::{
    CaptureRecord, DrainConfig, ExportEvent, MemorySink, RankCoords, SinkStage, TensorMeta,
    TriggerReason,
};
use ringscope::policy::{
    prepare_step, BatchRequest, KeepDropVector, PolicyConfig, Predicate, StepContext,
};
use ringscope::ring::{
    allocate_rings, Descriptor, DeviceArena, RingConfig, RingConsumer, RingError, RingProducer,
    DESCRIPTOR_SIZE,
};
use ringscope::sim::{
    join_records, run_multirank, run_offline, Arrival, HostModel, MetricsReport, Mode,
    RankTopology, SimConfig, VirtualExporter, WorkloadSpec,
};
use ringscope_cli::{cmd_run, RunManifest, METRICS_FILE};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn desk_config() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    RunConfig::load(&path).expect("desk config")
}

fn desk_sim(ratio: f64) -> SimConfig {
    let mut cfg = desk_config();
    cfg.engine.ratio = None;
    cfg.sim_config(Some(ratio)).expect("desk sim config")
}

fn shared_sink() -> Arc<Mutex<MemorySink>> {
    Arc::new(Mutex::new(MemorySink::default()))
}

fn run_records(cfg: &SimConfig, mode: Mode) -> Result<(MetricsReport, Vec<CaptureRecord>), String> {
    let sink = shared_sink();
    let run = run_offline(cfg, mode, Box::new(sink.clone())).map_err(|e| format!("{mode}: {e}"))?;
    let records = std::mem::take(&mut sink.lock().unwrap().records);
    Ok((run.metrics, records))
}

fn metrics(cfg: &SimConfig, mode: Mode) -> Result<MetricsReport, String> {
    run_offline(cfg, mode, Box::new(ringscope::exporter::NullSink::default()))
        .map(|r| r.metrics)
        .map_err(|e| format!("{mode}: {e}"))
}

fn round16(n: u64) -> u64 {
    n.div_ceil(16) * 16
}

// 1. Losslessness against the synchronous reference.

fn random_workload(rng: &mut ChaCha8Rng) -> SimConfig {
    loop {
        let layers = rng.gen_range(1..=4);
        let hidden = *[8usize, 12, 16, 40, 64, 100, 256].choose(rng).unwrap();
        let batch = rng.gen_range(1..=8);
        let arrival = if rng.gen_bool(0.5) {
            Arrival::BatchAtOnce
        } else {
            Arrival::PerStep {
                interval: rng.gen_range(1..=3),
                cohort: rng.gen_range(1..=batch),
            }
        };
        let workload = WorkloadSpec {
            layers,
            hidden,
            batch,
            prefill_tokens: rng.gen_range(1..=16),
            decode_steps: rng.gen_range(1..=12),
            prefill_time: rng.gen_range(0.5e-3..4e-3),
            decode_time: rng.gen_range(0.2e-3..2e-3),
            arrival,
            prompts: vec![],
        };
        if workload.schedule().len() > 16 {
            continue;
        }
        let dtypes = [DType::U8, DType::F16, DType::Bf16, DType::I32, DType::F32, DType::F64];
        let mut pool = vec![
            HookDecl::per_layer("hidden", ShapeTemplate::hidden_state(), *dtypes.choose(rng).unwrap()),
            HookDecl::per_layer(
                "mlp_out",
                ShapeTemplate(vec![Dim::Tokens, Dim::Fixed(rng.gen_range(1..=40))]),
                *dtypes.choose(rng).unwrap(),
            ),
            HookDecl::global("embed", HookScope::Input, ShapeTemplate::hidden_state(), DType::Bf16),
            HookDecl::global(
                "logits",
                HookScope::Output,
                ShapeTemplate(vec![Dim::Tokens, Dim::Fixed(rng.gen_range(1..=96))]),
                DType::F32,
            ),
            HookDecl::global("ids", HookScope::Output, ShapeTemplate(vec![Dim::Tokens]), DType::I32),
        ];
        pool.shuffle(rng);
        let hooks: Vec<HookDecl> = pool.into_iter().take(rng.gen_range(1..=5)).collect();
        let mut cfg = SimConfig {
            seed: rng.gen(),
            workload,
            topology: RankTopology::single(),
            hooks,
            enabled: None,
            policy: PolicyConfig {
                pressure_watermark: rng.gen_range(0.5..=1.0),
                ..PolicyConfig::completeness()
            },
            ring: RingConfig::new(1 << 20, 64),
            drain: DrainConfig::default(),
            engine: DeviceCopyEngine::default(),
            host: HostModel {
                pageable_bandwidth: rng.gen_range(50e6..5e9),
                queue_capacity: rng.gen_range(1..=3),
                ..Default::default()
            },
        };
        let registry = cfg.registry().unwrap();
        let names: Vec<String> = registry.hooks().iter().map(|h| h.name.clone()).collect();
        if rng.gen_bool(0.5) {
            let mut pick: Vec<String> = names.iter().filter(|_| rng.gen_bool(0.6)).cloned().collect();
            if pick.is_empty() {
                pick.push(names[0].clone());
            }
            cfg.enabled = Some(pick);
        }
        let registry = cfg.registry().unwrap();
        let largest = registry
            .enabled_ids()
            .map(|id| {
                registry.hooks()[id as usize].slice_bytes(cfg.workload.prefill_tokens as usize, hidden)
                    * batch as u64
            })
            .max()
            .unwrap_or(16);
        let largest = round16(largest.max(1));
        cfg.ring = RingConfig::new(largest * rng.gen_range(1..=4) + 16 * rng.gen_range(0..64), rng.gen_range(2..=64));
        cfg.drain = DrainConfig {
            min_ready_entries: rng.gen_range(1..=8),
            min_ready_bytes: rng.gen_range(256..=65536),
            max_wait: Duration::from_micros(rng.gen_range(100..=3000)),
            staging_buffer_size: largest * rng.gen_range(1..=3),
            staging_buffer_count: rng.gen_range(1..=4),
        };
        match cfg.clone().with_ratio(rng.gen_range(0.25..4.0)) {
            Ok(c) => return c,
            Err(_) => continue,
        }
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1055);
    let (mut records, mut stalls) = (0usize, 0u64);
    for case in 0..200 {
        let cfg = random_workload(&mut rng);
        let (sm, reference) = run_records(&cfg, Mode::Synchronous)?;
        let (rm, observed) = run_records(&cfg, Mode::Ring2)?;
        check!(
            observed == reference,
            "case {case}: ring2 dataset differs from the synchronous reference ({} vs {} records)",
            observed.len(),
            reference.len()
        );
        check!(rm.exported_bytes == sm.exported_bytes, "case {case}: exported bytes differ");
        check!(rm.dropped_request_steps == 0, "case {case}: completeness dropped requests");
        records += observed.len();
        stalls += rm.stall_events;
    }
    Ok(format!("200 workloads, {records} records identical, {stalls} stall events exercised"))
}

// 2. Ring protocol against a reference model.

struct Live {
    start: u64,
    offset: u64,
    len: u64,
    padded: u64,
    hook: u32,
    step: u32,
    seq: u64,
    fill: u8,
}

#[derive(Default)]
struct Model {
    head: u64,
    tail: u64,
    reserved: u64,
    dead: u64,
    released: u64,
    dead_released: u64,
    published: VecDeque<Live>,
    polled: VecDeque<Live>,
    seq: u64,
}

fn fill_pattern(fill: u8, len: u64) -> Vec<u8> {
    (0..len).map(|i| fill.wrapping_add((i * 31 % 251) as u8)).collect()
}

fn check_state(p: &RingProducer, c: &RingConsumer, m: &Model, slots: u32) -> Result<(), String> {
    let s = c.state();
    check!(s == p.state(), "producer and consumer disagree on state");
    check!(
        s.reserved_total + s.dead_total == s.released_total + s.dead_released + s.occupancy,
        "conservation broken: {s:?}"
    );
    check!(s.occupancy <= s.capacity, "occupancy above capacity");
    check!(
        (s.head_position, s.tail_position) == (m.head, m.tail),
        "positions {}/{} vs model {}/{}",
        s.head_position,
        s.tail_position,
        m.head,
        m.tail
    );
    check!(s.occupancy == m.head - m.tail, "occupancy mismatch");
    check!(
        (s.reserved_total, s.dead_total, s.released_total, s.dead_released)
            == (m.reserved, m.dead, m.released, m.dead_released),
        "counters disagree with the model"
    );
    check!(
        s.meta_occupancy as usize == m.published.len(),
        "meta occupancy {} vs {}",
        s.meta_occupancy,
        m.published.len()
    );
    check!(p.meta_slot_free() == (m.published.len() < slots as usize), "slot freedom mismatch");
    Ok(())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x2196);
    let cap = 4096u64;
    let slots = 8u32;
    let ring = allocate_rings(&mut DeviceArena::unbounded(), RingConfig::new(cap, slots)).unwrap();
    let (mut p, mut c) = ring.split();
    let mut m = Model::default();
    let (mut full_rejections, mut wraps, mut bad_orders) = (0u64, 0u64, 0u64);
    for op in 0..100_000u32 {
        match rng.gen_range(0..100) {
            0..=44 => {
                if !p.meta_slot_free() {
                    check!(m.published.len() == slots as usize, "op {op}: meta full too early");
                    continue;
                }
                let len = if rng.gen_bool(0.2) { 16 * rng.gen_range(1..=80) } else { rng.gen_range(1..=cap / 3) };
                let padded = round16(len);
                let pos = m.head % cap;
                let start = if cap - pos < padded { m.head + cap - pos } else { m.head };
                // an empty ring passes its own wrap skip
                let tail = if start != m.head && m.head == m.tail { start } else { m.tail };
                let fits = start + padded - tail <= cap;
                match p.reserve_payload(len) {
                    Ok(region) => {
                        check!(fits, "op {op}: reserve of {len} succeeded where the model is full");
                        check!(region.offset == start % cap && region.padded_len == padded, "op {op}: wrong region");
                        check!(region.offset + padded <= cap, "op {op}: region not contiguous");
                        for l in m.published.iter().chain(&m.polled) {
                            let disjoint = region.offset + padded <= l.offset || l.offset + l.padded <= region.offset;
                            check!(disjoint, "op {op}: region overlaps a live region");
                        }
                        if start != m.head {
                            wraps += 1;
                            m.dead += start - m.head;
                        }
                        if tail != m.tail {
                            m.dead_released += tail - m.tail;
                            m.tail = tail;
                        }
                        m.reserved += padded;
                        m.head = start + padded;
                        let fill: u8 = rng.gen();
                        p.region_mut(&region).copy_from_slice(&fill_pattern(fill, len));
                        let (hook, step) = (rng.gen(), op);
                        let seq = p.publish(Descriptor::new(region.offset, len, hook, step)).map_err(|e| e.to_string())?;
                        check!(seq == m.seq, "op {op}: publication sequence {seq} vs {}", m.seq);
                        m.published.push_back(Live { start, offset: region.offset, len, padded, hook, step, seq, fill });
                        m.seq += 1;
                    }
                    Err(RingError::RingFull { .. }) => {
                        check!(!fits, "op {op}: reserve of {len} rejected but the model has room");
                        full_rejections += 1;
                    }
                    Err(e) => return Err(format!("op {op}: unexpected {e}")),
                }
            }
            45..=79 => {
                let n = rng.gen_range(1..=4);
                let got = c.poll_ready(n);
                check!(got.len() == n.min(m.published.len()), "op {op}: polled {} of {}", got.len(), m.published.len());
                for d in got {
                    let want = m.published.pop_front().unwrap();
                    check!(
                        (d.payload_offset, d.payload_len, d.hook_id, d.step_seq, d.ready_seq)
                            == (want.offset, want.len, want.hook, want.step, want.seq),
                        "op {op}: descriptor out of order or corrupted"
                    );
                    let bytes = d.to_bytes();
                    check!(bytes.len() == DESCRIPTOR_SIZE && Descriptor::from_bytes(&bytes) == d, "op {op}: descriptor round trip");
                    check!(c.payload(&d) == fill_pattern(want.fill, want.len).as_slice(), "op {op}: payload corrupted");
                    m.polled.push_back(want);
                }
            }
            _ => {
                if m.polled.len() >= 2 && rng.gen_bool(0.1) {
                    let wrong = &m.polled[1];
                    let r = c.release_payload(wrong.offset, wrong.len);
                    check!(matches!(r, Err(RingError::OutOfOrderRelease { .. })), "op {op}: out-of-order release accepted");
                    bad_orders += 1;
                } else if let Some(l) = m.polled.pop_front() {
                    c.release_payload(l.offset, l.len).map_err(|e| format!("op {op}: {e}"))?;
                    m.dead_released += l.start - m.tail;
                    m.released += l.padded;
                    m.tail = l.start + l.padded;
                }
            }
        }
        check_state(&p, &c, &m, slots).map_err(|e| format!("op {op}: {e}"))?;
    }
    for _ in 0..1000 {
        let mut reserved = [0u8; 32];
        rng.fill(&mut reserved);
        let mut d = Descriptor::new(rng.gen(), rng.gen(), rng.gen(), rng.gen()).with_reserved(reserved);
        d.ready_seq = rng.gen();
        check!(Descriptor::from_bytes(&d.to_bytes()) == d, "random descriptor round trip");
    }
    check!(m.seq > 20 * slots as u64, "slots reused only {} times", m.seq / slots as u64);
    check!(wraps > 0 && full_rejections > 0 && bad_orders > 0, "scenario coverage too thin");
    Ok(format!(
        "10^5 ops, {} publications ({}x slot reuse), {wraps} wraps, {full_rejections} full rejections",
        m.seq,
        m.seq / slots as u64
    ))
}

// 3. Gather-compact through the capture path.

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3C0B);
    let dtypes = [DType::U8, DType::I8, DType::F16, DType::Bf16, DType::I32, DType::F32, DType::I64, DType::F64];
    let ring = allocate_rings(&mut DeviceArena::unbounded(), RingConfig::new(1 << 18, 16)).unwrap();
    let (mut producer, mut consumer) = ring.split();
    let engine = DeviceCopyEngine::default();
    let mut tails = 0;
    for case in 0..10_000 {
        let dtype = *dtypes.choose(&mut rng).unwrap();
        let dims: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=12)).collect();
        let batch = rng.gen_range(1..=16);
        let registry = HookRegistry::new(vec![HookSpec {
            name: "h".into(),
            site: HookSite::Input,
            shape: ShapeTemplate(dims.iter().map(|&d| Dim::Fixed(d)).collect()),
            dtype,
        }])
        .unwrap();
        let slice = dims.iter().product::<usize>() * dtype.width();
        if slice % 16 != 0 {
            tails += 1;
        }
        let mut src = vec![0u8; batch * slice];
        rng.fill(&mut src[..]);
        let flags: Vec<bool> = (0..batch).map(|_| rng.gen_bool(0.6)).collect();
        let keep = KeepDropVector::from_flags(flags.clone());
        let mut reference = Vec::new();
        for (b, &k) in flags.iter().enumerate() {
            if k {
                for j in 0..slice {
                    reference.push(src[b * slice + j]);
                }
            }
        }
        let mut shape = vec![batch];
        shape.extend(&dims);
        let view = TensorView::new(&src, &shape, dtype).map_err(|e| e.to_string())?;
        let mut never = || None;
        let out = capture(
            &mut CaptureContext {
                registry: &registry,
                ring: &mut producer,
                engine: &engine,
                on_full: OnRingFull::Fail,
                waiter: &mut never,
            },
            0,
            case,
            &view,
            &keep,
        )
        .map_err(|e| format!("case {case}: {e}"))?;
        let got = consumer.poll_ready(1);
        if reference.is_empty() {
            check!(got.is_empty() && out.bytes_written == 0, "case {case}: empty keep published");
            continue;
        }
        check!(got.len() == 1, "case {case}: nothing published");
        check!(consumer.payload(&got[0]) == reference.as_slice(), "case {case}: payload differs from reference");
        consumer
            .release_payload(got[0].payload_offset, got[0].payload_len)
            .map_err(|e| e.to_string())?;
    }
    Ok(format!("10^4 cases equal the reference, {tails} with non-16-multiple slices"))
}

// 4. Overload onset.

fn criterion_4() -> Outcome {
    let ratios = [0.25, 0.5, 1.0, 2.0, 4.0];
    let mut at = BTreeMap::new();
    let mut lines = Vec::new();
    for &r in &ratios {
        let cfg = desk_sim(r);
        let base = metrics(&cfg, Mode::NoCapture)?;
        let ring = metrics(&cfg, Mode::Ring2)?;
        let sync = metrics(&cfg, Mode::Synchronous)?;
        check!(
            base.run_time <= ring.run_time && ring.run_time <= sync.run_time,
            "ordering broken at ratio {r}: {} / {} / {}",
            base.run_time,
            ring.run_time,
            sync.run_time
        );
        lines.push(format!("r{r}: ring2 {:.1}% sync {:.1}%", ring.overhead_pct, sync.overhead_pct));
        at.insert(r.to_string(), (ring, sync));
    }
    let (low, _) = &at["0.5"];
    let (ring2, sync2) = &at["2"];
    let speed_ratio = sync2.run_time / ring2.run_time;
    let mut failures = Vec::new();
    if low.overhead_pct > 10.0 {
        failures.push(format!("ring2 overhead {:.2}% at ratio 0.5 exceeds 10%", low.overhead_pct));
    }
    if (speed_ratio - 1.0).abs() > 0.15 {
        failures.push(format!(
            "at ratio 2 ring2 throughput is {:.3}x the synchronous mode, outside ±15%",
            speed_ratio
        ));
    }
    let detail = lines.join(", ");
    if failures.is_empty() {
        Ok(format!("{detail}; ring2/sync throughput at r2 = {speed_ratio:.3}"))
    } else {
        Err(format!("{}; {detail}", failures.join("; ")))
    }
}

// 5. Ring size delays onset.

fn burst_config(prefill_tokens: u32, policy: PolicyConfig) -> SimConfig {
    let cfg = SimConfig {
        seed: 5,
        workload: WorkloadSpec {
            layers: 8,
            hidden: 64,
            batch: 4,
            prefill_tokens,
            decode_steps: 1,
            prefill_time: 2e-3,
            decode_time: 1e-3,
            arrival: Arrival::BatchAtOnce,
            prompts: vec![],
        },
        topology: RankTopology::single(),
        hooks: vec![HookDecl::per_layer("hidden", ShapeTemplate::hidden_state(), DType::Bf16)],
        enabled: None,
        policy,
        ring: RingConfig::new(65536, 64),
        drain: DrainConfig::default(),
        engine: DeviceCopyEngine::default(),
        host: HostModel::default(),
    };
    cfg.with_ratio(4.0).unwrap()
}

fn criterion_5() -> Outcome {
    let base = desk_sim(2.0);
    let mut onsets = Vec::new();
    for cap in [65536u64, 131072, 262144, 524288, 1048576] {
        let mut cfg = base.clone();
        cfg.ring.payload_capacity = cap;
        let m = metrics(&cfg, Mode::Ring2)?;
        onsets.push((cap, m.first_stall_step));
    }
    let key = |s: Option<u32>| s.map_or(u64::MAX, u64::from);
    for w in onsets.windows(2) {
        check!(key(w[0].1) <= key(w[1].1), "first stall moved earlier with a larger ring: {onsets:?}");
    }
    check!(key(onsets[0].1) < key(onsets[onsets.len() - 1].1), "ring size had no effect: {onsets:?}");

    // 8 captures of 512 * tokens bytes each, ring of 64 KiB
    let under = burst_config(14, PolicyConfig::completeness());
    let burst = 8 * 4 * 14 * 64 * 2;
    check!(burst as f64 <= 0.9 * 65536.0, "burst sizing");
    let m = metrics(&under, Mode::Ring2)?;
    check!(m.steps[0].stall_events == 0, "burst of {burst} B stalled a 64 KiB ring");
    let over_c = metrics(&burst_config(17, PolicyConfig::completeness()), Mode::Ring2)?;
    check!(over_c.steps[0].stall_events >= 1, "over-capacity burst did not stall");
    let over_b = metrics(&burst_config(17, PolicyConfig::drop_recent()), Mode::Ring2)?;
    check!(over_b.steps[0].drops >= 1, "over-capacity burst dropped nothing under best effort");
    let shown: Vec<String> = onsets
        .iter()
        .map(|(c, s)| format!("{}K:{}", c / 1024, s.map_or("none".into(), |v| v.to_string())))
        .collect();
    Ok(format!("first stall by capacity [{}]; {burst} B burst absorbed", shown.join(" ")))
}

// 6. Best effort at saturation.

fn suffix_check(cfg: &SimConfig, m: &MetricsReport) -> Result<usize, String> {
    let schedule = cfg.workload.schedule();
    let logged: BTreeMap<u32, BTreeSet<u64>> = m
        .drop_log
        .iter()
        .map(|d| (d.step, d.requests.iter().copied().collect()))
        .collect();
    let mut steps_with_drops = 0;
    for step in &schedule {
        let dropped = logged.get(&step.seq).cloned().unwrap_or_default();
        let mut by_arrival: Vec<&BatchRequest> = step.requests.iter().collect();
        by_arrival.sort_by_key(|r| r.arrival);
        let k = dropped.len();
        let suffix: BTreeSet<u64> = by_arrival[by_arrival.len() - k..].iter().map(|r| r.id).collect();
        check!(dropped == suffix, "step {}: dropped {dropped:?} is not the arrival suffix {suffix:?}", step.seq);
        if k > 0 {
            steps_with_drops += 1;
        }
    }
    Ok(steps_with_drops)
}

fn criterion_6() -> Outcome {
    let complete = desk_sim(4.0);
    let mut best = complete.clone();
    best.policy = PolicyConfig::drop_recent();
    let c = metrics(&complete, Mode::Ring2)?;
    let b = metrics(&best, Mode::Ring2)?;
    check!(b.stall_events == 0, "best effort stalled {} times", b.stall_events);
    let reduction = c.overhead_pct / b.overhead_pct.max(f64::MIN_POSITIVE);
    check!(
        reduction >= 5.0,
        "overhead {:.1}% -> {:.1}% is only {reduction:.2}x",
        c.overhead_pct,
        b.overhead_pct
    );
    let mut steps = suffix_check(&best, &b)?;
    check!(steps > 0, "no drops at saturation");
    let mut staggered = best.clone();
    staggered.workload.arrival = Arrival::PerStep { interval: 2, cohort: 3 };
    let s = metrics(&staggered, Mode::Ring2)?;
    steps += suffix_check(&staggered, &s)?;
    Ok(format!(
        "overhead {:.1}% -> {:.1}% ({reduction:.1}x), 0 stalls, {steps} steps with suffix drops",
        c.overhead_pct, b.overhead_pct
    ))
}

// 7. Keep by pattern.

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7A77);
    let (mut fit_steps, mut flagged_drop_steps, mut drop_steps, mut plans) = (0, 0, 0, 0);
    for schedule in 0..50 {
        let batch = rng.gen_range(2..=8);
        let flagged: BTreeSet<u64> = (0..batch as u64).filter(|_| rng.gen_bool(0.4)).collect();
        let mut cfg = desk_sim(rng.gen_range(1.5..4.0));
        cfg.seed = rng.gen();
        cfg.workload.batch = batch;
        cfg.workload.decode_steps = rng.gen_range(4..=16);
        cfg.workload.arrival = Arrival::PerStep { interval: rng.gen_range(1..=3), cohort: rng.gen_range(1..=batch) };
        cfg.ring.payload_capacity = 16384 * rng.gen_range(1..=8);
        cfg.policy = PolicyConfig::keep_by_pattern(Predicate::RequestIds(flagged.clone()));
        let (m, records) = run_records(&cfg, Mode::Ring2)?;
        let dropped: BTreeMap<u32, BTreeSet<u64>> = m
            .drop_log
            .iter()
            .map(|d| (d.step, d.requests.iter().copied().collect()))
            .collect();
        let registry = cfg.registry().unwrap();
        let hooks = registry.enabled_count();
        let mut seen: BTreeMap<(u32, u64), usize> = BTreeMap::new();
        for r in &records {
            *seen.entry((r.step, r.request_id)).or_default() += 1;
        }
        for step in cfg.workload.schedule() {
            let d = dropped.get(&step.seq).cloned().unwrap_or_default();
            let ids: Vec<u64> = step.requests.iter().map(|r| r.id).collect();
            if !d.is_empty() {
                drop_steps += 1;
            }
            if d.iter().any(|id| flagged.contains(id)) {
                flagged_drop_steps += 1;
                let unflagged_kept = ids.iter().any(|id| !flagged.contains(id) && !d.contains(id));
                check!(!unflagged_kept, "schedule {schedule} step {}: flagged dropped while unflagged kept", step.seq);
            }
            for id in ids.iter().filter(|id| !d.contains(id)) {
                let n = seen.get(&(step.seq, *id)).copied().unwrap_or(0);
                check!(n == hooks, "schedule {schedule} step {}: request {id} has {n}/{hooks} records", step.seq);
            }
            // exact capacity condition on the real ring at a random fill level
            let ring = allocate_rings(&mut DeviceArena::unbounded(), cfg.ring).unwrap();
            let (mut p, mut c) = ring.split();
            for _ in 0..rng.gen_range(0..6) {
                let len = rng.gen_range(1..=cfg.ring.payload_capacity / 4);
                if let Ok(r) = p.reserve_payload(len) {
                    p.publish(Descriptor::new(r.offset, r.len, 0, 0)).unwrap();
                    if rng.gen_bool(0.5) {
                        let got = c.poll_ready(1);
                        c.release_payload(got[0].payload_offset, got[0].payload_len).unwrap();
                    }
                }
            }
            let ctx = StepContext { step_seq: step.seq, rank: RankCoords::default(), hidden: cfg.workload.hidden, fires_here: None };
            let plan = prepare_step(&cfg.policy, &step.requests, &p.state(), &registry, &ctx);
            plans += 1;
            let flagged_here: Vec<usize> = (0..step.requests.len()).filter(|&i| flagged.contains(&step.requests[i].id)).collect();
            let mut fits = true;
            for id in registry.enabled_ids() {
                let len = registry.hooks()[id as usize].slice_bytes(step.tokens(), cfg.workload.hidden) * flagged_here.len() as u64;
                if len == 0 {
                    continue;
                }
                let ok = p.meta_slot_free()
                    && p.reserve_payload(len).and_then(|r| p.publish(Descriptor::new(r.offset, r.len, id, 0))).is_ok();
                if !ok {
                    fits = false;
                    break;
                }
            }
            let flags = plan.keep.flags();
            if fits {
                fit_steps += 1;
                check!(flagged_here.iter().all(|&i| flags[i]), "schedule {schedule} step {}: flagged demand fits but a flagged request was dropped", step.seq);
            }
            let flagged_dropped = flagged_here.iter().any(|&i| !flags[i]);
            let unflagged_kept = (0..flags.len()).any(|i| flags[i] && !flagged_here.contains(&i));
            check!(!(flagged_dropped && unflagged_kept), "schedule {schedule} step {}: plan drops flagged before unflagged", step.seq);
        }
    }
    check!(drop_steps > 0, "no drops in any schedule");
    Ok(format!(
        "50 schedules: {drop_steps} steps with drops, {flagged_drop_steps} touching flagged requests; {fit_steps}/{plans} planned steps fit flagged demand, all covered"
    ))
}

// 8. Drain thresholds.

fn meta(step: u32, len: usize) -> TensorMeta {
    TensorMeta {
        hook_id: 0,
        hook_name: "h".into(),
        layer: None,
        step_seq: step,
        rank: RankCoords::default(),
        request_ids: vec![u64::from(step)],
        token_ranges: vec![(0, 1)],
        shape: vec![len],
        dtype: DType::U8,
    }
}

/// Publish one entry of `len` bytes per time in `times`, then run to `end`.
fn drain_scenario(cfg: DrainConfig, len: usize, times: &[f64], end: f64) -> Vec<(f64, ExportEvent)> {
    let ring = allocate_rings(&mut DeviceArena::unbounded(), RingConfig::new(1 << 16, 64)).unwrap();
    let (mut p, c) = ring.split();
    let engine = DeviceCopyEngine { d2h_bandwidth: 1e6, d2h_latency: 0.0, ..Default::default() };
    let host = HostModel { pageable_bandwidth: f64::INFINITY, ..Default::default() };
    let mut ex = VirtualExporter::new(c, cfg, engine, host, SinkStage::new(Box::new(MemorySink::default())));
    for (i, &t) in times.iter().enumerate() {
        ex.advance_to(t);
        ex.push_meta([meta(i as u32, len)]);
        let r = p.reserve_payload(len as u64).unwrap();
        p.region_mut(&r).fill(i as u8);
        p.publish(Descriptor::new(r.offset, r.len, 0, i as u32)).unwrap();
        ex.published(t);
    }
    ex.advance_to(end);
    ex.events().iter().map(|e| (e.at.as_secs_f64(), e.event.clone())).collect()
}

fn expect_log(name: &str, got: &[(f64, ExportEvent)], want: &[(f64, ExportEvent)]) -> Result<(), String> {
    check!(got.len() == want.len(), "{name}: {} events, expected {}: {got:?}", got.len(), want.len());
    for (i, ((gt, ge), (wt, we))) in got.iter().zip(want).enumerate() {
        check!(ge == we && (gt - wt).abs() < 1e-9, "{name}: event {i} is {ge:?}@{gt}, expected {we:?}@{wt}");
    }
    Ok(())
}

fn batch_events(at: f64, reason: TriggerReason, entries: usize, bytes: u64) -> Vec<(f64, ExportEvent)> {
    let done = at + bytes as f64 / 1e6;
    let mut v = vec![
        (at, ExportEvent::DrainIssued { reason, entries, bytes, buffer: 0 }),
        (done, ExportEvent::TransferDone { buffer: 0, bytes }),
        (done, ExportEvent::BufferReturned { buffer: 0 }),
    ];
    v.extend((0..entries).map(|_| (done, ExportEvent::Delivered { records: 1 })));
    v
}

fn criterion_8() -> Outcome {
    let never = Duration::from_secs(1000);
    let base = DrainConfig {
        min_ready_entries: 1000,
        min_ready_bytes: 1 << 30,
        max_wait: never,
        staging_buffer_size: 1 << 16,
        staging_buffer_count: 1,
    };
    let entries = drain_scenario(DrainConfig { min_ready_entries: 4, ..base }, 100, &[0.0, 1e-3, 2e-3, 3e-3], 0.1);
    expect_log("entries", &entries, &batch_events(3e-3, TriggerReason::Entries, 4, 400))?;
    let quiet = drain_scenario(DrainConfig { min_ready_entries: 4, ..base }, 100, &[0.0, 1e-3, 2e-3], 0.1);
    expect_log("entries below threshold", &quiet, &[])?;

    let bytes = drain_scenario(DrainConfig { min_ready_bytes: 1000, ..base }, 400, &[0.0, 1e-3, 2e-3], 0.1);
    expect_log("bytes", &bytes, &batch_events(2e-3, TriggerReason::Bytes, 3, 1200))?;

    let timeout = DrainConfig { max_wait: Duration::from_millis(5), ..base };
    let waited = drain_scenario(timeout, 100, &[1e-3, 2e-3], 0.1);
    expect_log("timeout", &waited, &batch_events(6e-3, TriggerReason::Timeout, 2, 200))?;
    let early = drain_scenario(timeout, 100, &[1e-3, 2e-3], 5.9e-3);
    expect_log("before timeout", &early, &[])?;
    Ok("entries@3ms, bytes@2ms and timeout@6ms each fire alone with exact logs".into())
}

// 9. Distributed join.

fn join_config(tp: u32, pp: u32) -> SimConfig {
    let mut cfg = desk_sim(1.0);
    cfg.seed = 99;
    cfg.workload.hidden = 64;
    cfg.workload.decode_steps = 6;
    cfg.hooks.push(HookDecl::per_layer(
        "router",
        ShapeTemplate(vec![Dim::Tokens, Dim::Fixed(3)]),
        DType::F32,
    ));
    cfg.topology = RankTopology { tp_degree: tp, pp_stages: pp };
    cfg
}

fn multirank_records(cfg: &SimConfig) -> Result<Vec<(RankCoords, Vec<CaptureRecord>)>, String> {
    let sinks: Arc<Mutex<BTreeMap<RankCoords, Arc<Mutex<MemorySink>>>>> = Default::default();
    run_multirank(cfg, Mode::Ring2, |r| {
        let s = shared_sink();
        sinks.lock().unwrap().insert(r, s.clone());
        Box::new(s)
    })
    .map_err(|e| e.to_string())?;
    let sinks = sinks.lock().unwrap();
    Ok(sinks
        .iter()
        .map(|(r, s)| (*r, std::mem::take(&mut s.lock().unwrap().records)))
        .collect())
}

type Flat = (u64, u32, String, Option<u32>, (u32, u32), Vec<usize>, Vec<u8>);

fn criterion_9() -> Outcome {
    let reference_cfg = join_config(1, 1);
    let (_, reference) = run_records(&reference_cfg, Mode::Ring2)?;
    let mut want: Vec<Flat> = reference
        .into_iter()
        .map(|r| (r.request_id, r.step, r.hook, r.layer, r.token_range, r.shape, r.payload))
        .collect();
    want.sort();
    let mut notes = Vec::new();
    for tp in [2u32, 4] {
        let cfg = join_config(tp, 1);
        let per_rank = multirank_records(&cfg)?;
        for (rank, recs) in &per_rank {
            for r in recs.iter().filter(|r| r.hook.ends_with(".hidden")) {
                check!(r.shape.last() == Some(&(64 / tp as usize)), "tp{tp} rank {rank:?}: shard width {:?}", r.shape);
            }
        }
        let registry = cfg.registry().unwrap();
        let joined = join_records(per_rank.iter().map(|(_, v)| v.as_slice()), &cfg.topology, &registry);
        check!(joined.missing.is_empty(), "tp{tp}: {} missing shards", joined.missing.len());
        let mut got: Vec<Flat> = joined
            .records
            .into_iter()
            .map(|r| (r.request_id, r.step, r.hook, r.layer, r.token_range, r.shape, r.payload))
            .collect();
        got.sort();
        check!(got == want, "tp{tp}: joined records differ from the tp=1 reference");
        notes.push(format!("tp{tp}: {} joined records byte-equal", got.len()));
    }
    let cfg = join_config(1, 2);
    let layers = cfg.workload.layers;
    for (rank, recs) in multirank_records(&cfg)? {
        for r in &recs {
            let owner = match r.layer {
                Some(l) => u32::from(l >= layers / 2),
                None if r.hook == "embed" => 0,
                None => 1,
            };
            check!(owner == rank.pp_stage && r.rank == rank, "pp2: {} layer {:?} on stage {}", r.hook, r.layer, rank.pp_stage);
        }
    }
    notes.push("pp2 records only on owning stage".into());
    Ok(notes.join("; "))
}

// 10. Determinism of cmd_run.

fn criterion_10() -> Outcome {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let mut manifest = RunManifest::new(&config, tmp.path().join(name));
        manifest.seed = Some(1234);
        manifest.ratios = Some(vec![0.5, 4.0]);
        let outcome = cmd_run(&manifest).map_err(|e| e.to_string())?;
        let csv = std::fs::read(tmp.path().join(name).join(METRICS_FILE)).map_err(|e| e.to_string())?;
        let sums: Vec<Option<String>> = outcome.points.iter().map(|p| p.dataset_checksum.clone()).collect();
        outs.push((csv, sums));
    }
    check!(outs[0].0 == outs[1].0, "metrics.csv differs between runs");
    check!(outs[0].1 == outs[1].1, "dataset checksums differ between runs");
    let datasets = outs[0].1.iter().flatten().count();
    Ok(format!("metrics.csv ({} bytes) and {datasets} dataset checksums identical", outs[0].0.len()))
}

fn main() {
    let criteria: [(&str, &str, u64, fn() -> Outcome); 10] = [
        ("1", "losslessness oracle", 60, criterion_1),
        ("2", "ring protocol properties", 30, criterion_2),
        ("3", "gather-compact equivalence", 30, criterion_3),
        ("4", "overload-onset shape", 120, criterion_4),
        ("5", "ring-size delay", 60, criterion_5),
        ("6", "best-effort policy", 120, criterion_6),
        ("7", "keep-by-pattern", 60, criterion_7),
        ("8", "drain thresholds", 10, criterion_8),
        ("9", "distributed join", 60, criterion_9),
        ("10", "determinism", 60, criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > Duration::from_secs(limit) => Err(format!("{d} but took {elapsed:.1?}, limit {limit}s")),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS criterion {id:>2} {name} ({elapsed:.2?}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name} ({elapsed:.2?}): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
