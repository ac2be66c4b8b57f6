//! Labeled synthetic incident generation with upstream-to-downstream symptom
//! amplification, plus a JSONL ingestion path for externally provided
//! telemetry in the same schema.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DependencyGraph, Direction, GraphError, Level};

pub const KPIS: [&str; 6] = ["cpu", "memory", "latency", "error_rate", "qps", "io_wait"];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("fault {fault:?} cannot be injected at {level:?} entity {root:?}")]
    IncompatibleFault {
        fault: FaultType,
        root: String,
        level: Level,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultType {
    CpuHog,
    MemoryLeak,
    NetworkDelay,
    PacketLoss,
    DiskPayload,
}

impl FaultType {
    pub const ALL: [FaultType; 5] = [
        FaultType::CpuHog,
        FaultType::MemoryLeak,
        FaultType::NetworkDelay,
        FaultType::PacketLoss,
        FaultType::DiskPayload,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<FaultType> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultType::CpuHog => "cpu_hog",
            FaultType::MemoryLeak => "memory_leak",
            FaultType::NetworkDelay => "network_delay",
            FaultType::PacketLoss => "packet_loss",
            FaultType::DiskPayload => "disk_payload",
        }
    }

    pub fn valid_levels(self) -> &'static [Level] {
        match self {
            FaultType::CpuHog | FaultType::MemoryLeak | FaultType::DiskPayload => {
                &[Level::Pod, Level::Node]
            }
            FaultType::NetworkDelay | FaultType::PacketLoss => &[Level::Pod, Level::Service],
        }
    }

    /// Network faults degrade the calls themselves, so their log symptoms
    /// travel with the traffic and downstream peaks exceed the root's;
    /// resource faults stay local to the faulted entity.
    pub fn symptom_propagates(self) -> bool {
        matches!(self, FaultType::NetworkDelay | FaultType::PacketLoss)
    }

    /// KPI that carries the fault's primary resource signature at the root.
    pub fn primary_kpi(self) -> &'static str {
        match self {
            FaultType::CpuHog => "cpu",
            FaultType::MemoryLeak => "memory",
            FaultType::NetworkDelay => "latency",
            FaultType::PacketLoss => "error_rate",
            FaultType::DiskPayload => "io_wait",
        }
    }

    /// Log template keys emitted at the faulted root.
    pub fn root_templates(self) -> &'static [&'static str] {
        match self {
            FaultType::CpuHog => &["cpu_throttle", "high_load"],
            FaultType::MemoryLeak => &["alloc_fail", "mem_threshold"],
            FaultType::NetworkDelay => &["upstream_timeout", "slow_upstream"],
            FaultType::PacketLoss => &["retry_fail", "packet_drop"],
            FaultType::DiskPayload => &["disk_latency", "io_queue"],
        }
    }
}

/// Template keys emitted at downstream victims of any propagated fault.
pub const VICTIM_TEMPLATES: [&str; 2] = ["retry_fail", "upstream_timeout"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub window_s: f64,
    pub step_s: f64,
    pub onset_s: f64,
    pub hop_delay_s: f64,
    pub lambda_amp: f64,
    pub noise_frac: f64,
    pub max_hops: usize,
    pub base_latency_ms: f64,
    pub latency_rise_ms: f64,
    pub timeout_ms: f64,
    pub span_interval_s: f64,
    pub log_rate_hz: f64,
    pub fault_log_rate_hz: f64,
    /// Restrict sampled roots to entities with at least one same-level
    /// outgoing call edge, so every incident has a propagation path.
    pub require_downstream: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            window_s: 600.0,
            step_s: 5.0,
            onset_s: 120.0,
            hop_delay_s: 15.0,
            lambda_amp: 1.6,
            noise_frac: 0.03,
            max_hops: 2,
            base_latency_ms: 100.0,
            latency_rise_ms: 400.0,
            timeout_ms: 1000.0,
            span_interval_s: 30.0,
            log_rate_hz: 0.04,
            fault_log_rate_hz: 0.08,
            require_downstream: false,
        }
    }
}

impl SimConfig {
    pub fn samples(&self) -> usize {
        (self.window_s / self.step_s) as usize
    }

    pub fn onset_index(&self) -> usize {
        (self.onset_s / self.step_s) as usize
    }

    /// Latency rise injected at hop `h` along the propagation path
    /// (`h = 0` is the root), before noise.
    pub fn latency_rise_at_hop(&self, hop: usize) -> f64 {
        self.latency_rise_ms * self.lambda_amp.powi(hop as i32)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSeries {
    pub entity: String,
    pub kpi: String,
    pub timestamps: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEvent {
    pub entity: String,
    pub timestamp: f64,
    pub level: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSpan {
    pub trace_id: String,
    pub span_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parent_span_id: Option<String>,
    pub caller: String,
    pub callee: String,
    pub start: f64,
    pub duration_ms: f64,
    pub status: SpanStatus,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Telemetry {
    pub metrics: BTreeMap<String, Vec<MetricSeries>>,
    pub logs: BTreeMap<String, Vec<LogEvent>>,
    pub spans: Vec<TraceSpan>,
}

impl Telemetry {
    pub fn series(&self, entity: &str, kpi: &str) -> Option<&MetricSeries> {
        self.metrics
            .get(entity)
            .and_then(|list| list.iter().find(|s| s.kpi == kpi))
    }

    pub fn logs_for(&self, entity: &str) -> &[LogEvent] {
        self.logs.get(entity).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn spans_for<'a>(&'a self, entity: &'a str) -> impl Iterator<Item = &'a TraceSpan> + 'a {
        self.spans
            .iter()
            .filter(move |s| s.caller == entity || s.callee == entity)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Incident {
    pub graph: DependencyGraph,
    pub window: (f64, f64),
    pub telemetry: Telemetry,
    pub label_root: String,
    pub label_fault: FaultType,
    pub propagation_path: Vec<String>,
}

// ---------------------------------------------------------------------------
// Log template rendering
// ---------------------------------------------------------------------------

pub const BASELINE_TEMPLATE_KEYS: [&str; 12] = [
    "heartbeat",
    "request_served",
    "conn_established",
    "cache_ratio",
    "gc_pause",
    "health_check",
    "config_reload",
    "job_done",
    "queue_depth",
    "tls_handshake",
    "session_expired",
    "metrics_flush",
];

fn rand_ip(rng: &mut ChaCha8Rng) -> String {
    format!("10.0.{}.{}", rng.gen_range(0..4), rng.gen_range(1..250))
}

fn rand_id(rng: &mut ChaCha8Rng) -> String {
    format!("{:04x}", rng.gen_range(0u32..0xffff))
}

pub fn render_template(key: &str, rng: &mut ChaCha8Rng) -> String {
    match key {
        "heartbeat" => format!("heartbeat ok from {}", rand_ip(rng)),
        "request_served" => format!(
            "request {} served in {} ms",
            rand_id(rng),
            rng.gen_range(5..400)
        ),
        "conn_established" => format!("connection established to {}", rand_ip(rng)),
        "cache_ratio" => format!("cache hit ratio {} pct", rng.gen_range(50..100)),
        "gc_pause" => format!("gc pause {} ms", rng.gen_range(1..80)),
        "health_check" => format!("health check passed for {}", rand_id(rng)),
        "config_reload" => format!("config reloaded version {}", rng.gen_range(1..500)),
        "job_done" => format!("scheduled job {} completed", rand_id(rng)),
        "queue_depth" => format!("queue depth {}", rng.gen_range(0..64)),
        "tls_handshake" => format!("tls handshake with {} completed", rand_ip(rng)),
        "session_expired" => format!("session {} expired", rand_id(rng)),
        "metrics_flush" => format!("metrics flushed {} points", rng.gen_range(100..5000)),
        "cpu_throttle" => format!("cpu throttling detected on core {}", rng.gen_range(0..16)),
        "high_load" => format!(
            "load average {}.{} exceeds limit",
            rng.gen_range(8..40),
            rng.gen_range(0..99)
        ),
        "alloc_fail" => format!("allocation of {} bytes failed", rng.gen_range(1024..1 << 24)),
        "mem_threshold" => format!(
            "memory usage {} pct exceeds threshold",
            rng.gen_range(85..100)
        ),
        "upstream_timeout" => format!(
            "request to {} timed out after {} ms",
            rand_ip(rng),
            rng.gen_range(1000..5000)
        ),
        "slow_upstream" => format!(
            "slow upstream response {} ms from {}",
            rng.gen_range(500..3000),
            rand_ip(rng)
        ),
        "retry_fail" => format!("retry {} to {} failed", rng.gen_range(1..8), rand_ip(rng)),
        "packet_drop" => format!("packet drop detected on eth{}", rng.gen_range(0..4)),
        "disk_latency" => format!(
            "disk write latency {} ms above limit",
            rng.gen_range(100..2000)
        ),
        "io_queue" => format!("io queue saturated depth {}", rng.gen_range(64..512)),
        other => panic!("unknown log template key {other:?}"),
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct Overlay {
    /// (kpi, onset_s, kind)
    effects: Vec<(String, f64, EffectKind)>,
    /// (template key, onset_s, level)
    log_bursts: Vec<(&'static str, f64, &'static str)>,
}

#[derive(Debug, Clone, Copy)]
enum EffectKind {
    /// Ramp to an absolute plateau value over 15 s, then hold.
    Plateau(f64),
    /// Linear ramp from baseline to an absolute value at window end.
    LinearRampTo(f64),
    /// Additive rise (ramp over 15 s, then hold).
    Rise(f64),
}

fn entity_jitter(entity: &str, seed: u64) -> f64 {
    let mut h: u64 = seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in entity.bytes() {
        h = h.wrapping_mul(31).wrapping_add(b as u64);
    }
    0.9 + 0.2 * ((h % 10_000) as f64 / 10_000.0)
}

fn kpi_base(kpi: &str, cfg: &SimConfig) -> f64 {
    match kpi {
        "cpu" => 0.30,
        "memory" => 0.40,
        "latency" => cfg.base_latency_ms,
        "error_rate" => 0.01,
        "qps" => 100.0,
        "io_wait" => 0.05,
        _ => 0.0,
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn root_latency_factor(fault: FaultType) -> f64 {
    match fault {
        FaultType::CpuHog | FaultType::NetworkDelay | FaultType::DiskPayload => 1.0,
        FaultType::MemoryLeak | FaultType::PacketLoss => 0.5,
    }
}

fn root_overlay(fault: FaultType, onset: f64, cfg: &SimConfig) -> Overlay {
    let mut ov = Overlay::default();
    let lat_rise = cfg.latency_rise_ms * root_latency_factor(fault);
    match fault {
        FaultType::CpuHog => {
            ov.effects
                .push(("cpu".into(), onset, EffectKind::Plateau(0.95)));
        }
        FaultType::MemoryLeak => {
            ov.effects
                .push(("memory".into(), onset, EffectKind::LinearRampTo(0.95)));
        }
        FaultType::NetworkDelay => {}
        FaultType::PacketLoss => {
            ov.effects
                .push(("error_rate".into(), onset, EffectKind::Plateau(0.25)));
        }
        FaultType::DiskPayload => {
            ov.effects
                .push(("io_wait".into(), onset, EffectKind::Plateau(0.60)));
        }
    }
    ov.effects
        .push(("latency".into(), onset, EffectKind::Rise(lat_rise)));
    for key in fault.root_templates() {
        ov.log_bursts.push((key, onset, "error"));
    }
    if fault.symptom_propagates() {
        // a degraded network also makes the root itself retry and time out,
        // so its log profile matches its victims' template set
        for key in VICTIM_TEMPLATES {
            if !fault.root_templates().contains(&key) {
                ov.log_bursts.push((key, onset, "error"));
            }
        }
    }
    ov
}

fn victim_overlay(fault: FaultType, hop: usize, onset: f64, cfg: &SimConfig) -> Overlay {
    let mut ov = Overlay::default();
    ov.effects.push((
        "latency".into(),
        onset,
        EffectKind::Rise(cfg.latency_rise_at_hop(hop)),
    ));
    // error symptoms amplify per hop just like latency: each hop adds its
    // own retries on top of the propagated failures
    let err = (0.20 * cfg.lambda_amp.powi(hop as i32)).min(0.90);
    ov.effects
        .push(("error_rate".into(), onset, EffectKind::Plateau(err)));
    if fault.symptom_propagates() {
        // the faulty traffic itself reaches the victim, so victims log the
        // same template set as the root, at the same severity
        let mut keys: Vec<&'static str> = fault.root_templates().to_vec();
        for key in VICTIM_TEMPLATES {
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        for key in keys {
            ov.log_bursts.push((key, onset, "error"));
        }
    } else {
        for key in VICTIM_TEMPLATES {
            ov.log_bursts.push((key, onset, "warn"));
        }
    }
    ov
}

fn pick_propagation_path(
    g: &DependencyGraph,
    root: &str,
    level: Level,
    max_hops: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut path = vec![root.to_string()];
    let mut cur = root.to_string();
    for _ in 0..max_hops {
        let mut nexts: Vec<String> = g
            .neighbors(&cur, Direction::Out)
            .unwrap_or_default()
            .into_iter()
            .filter(|n| {
                g.entity(n).map(|e| e.level == level).unwrap_or(false)
                    && g.has_call_edge(&cur, n)
                    && !path.contains(n)
            })
            .collect();
        if nexts.is_empty() {
            break;
        }
        nexts.sort();
        let next = nexts[rng.gen_range(0..nexts.len())].clone();
        path.push(next.clone());
        cur = next;
    }
    path
}

fn generate_metrics(
    g: &DependencyGraph,
    overlays: &BTreeMap<String, Overlay>,
    seed: u64,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, Vec<MetricSeries>> {
    let n = cfg.samples();
    let timestamps: Vec<f64> = (0..n).map(|i| i as f64 * cfg.step_s).collect();
    let ramp_s = 15.0;
    let mut out = BTreeMap::new();
    for entity in g.entities() {
        let jitter = entity_jitter(&entity.id, seed);
        let mut list = Vec::with_capacity(KPIS.len());
        for kpi in KPIS {
            let base = kpi_base(kpi, cfg) * jitter;
            let sigma = base.abs() * cfg.noise_frac;
            let mut values: Vec<f64> = (0..n).map(|_| base + sigma * gaussian(rng)).collect();
            if let Some(ov) = overlays.get(&entity.id) {
                for (ekpi, onset, kind) in &ov.effects {
                    if ekpi != kpi {
                        continue;
                    }
                    for (i, t) in timestamps.iter().enumerate() {
                        if *t < *onset {
                            continue;
                        }
                        let shape = ((t - onset) / ramp_s).min(1.0);
                        match kind {
                            EffectKind::Plateau(target) => {
                                let v = base + (target - base) * shape;
                                values[i] = values[i] - base + v;
                            }
                            EffectKind::LinearRampTo(target) => {
                                let frac = (t - onset) / (cfg.window_s - onset).max(1.0);
                                let v = base + (target - base) * frac;
                                values[i] = values[i] - base + v;
                            }
                            EffectKind::Rise(amount) => {
                                values[i] += amount * shape;
                            }
                        }
                    }
                }
            }
            // rates stay in [0, 1]
            if kpi == "cpu" || kpi == "memory" || kpi == "error_rate" || kpi == "io_wait" {
                for v in &mut values {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            list.push(MetricSeries {
                entity: entity.id.clone(),
                kpi: kpi.to_string(),
                timestamps: timestamps.clone(),
                values,
            });
        }
        out.insert(entity.id.clone(), list);
    }
    out
}

fn poisson_times(rate_hz: f64, t0: f64, t1: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut times = Vec::new();
    let mut t = t0;
    if rate_hz <= 0.0 {
        return times;
    }
    loop {
        let u: f64 = rng.gen_range(1e-12..1.0);
        t += -u.ln() / rate_hz;
        if t >= t1 {
            break;
        }
        times.push(t);
    }
    times
}

fn generate_logs(
    g: &DependencyGraph,
    overlays: &BTreeMap<String, Overlay>,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, Vec<LogEvent>> {
    let mut out = BTreeMap::new();
    for entity in g.entities() {
        let mut events = Vec::new();
        for t in poisson_times(cfg.log_rate_hz, 0.0, cfg.window_s, rng) {
            let key = BASELINE_TEMPLATE_KEYS[rng.gen_range(0..BASELINE_TEMPLATE_KEYS.len())];
            events.push(LogEvent {
                entity: entity.id.clone(),
                timestamp: t,
                level: "info".into(),
                message: render_template(key, rng),
            });
        }
        if let Some(ov) = overlays.get(&entity.id) {
            for (key, onset, level) in &ov.log_bursts {
                for t in poisson_times(cfg.fault_log_rate_hz, *onset, cfg.window_s, rng) {
                    events.push(LogEvent {
                        entity: entity.id.clone(),
                        timestamp: t,
                        level: level.to_string(),
                        message: render_template(key, rng),
                    });
                }
            }
        }
        events.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap());
        out.insert(entity.id.clone(), events);
    }
    out
}

fn generate_spans(
    g: &DependencyGraph,
    metrics: &BTreeMap<String, Vec<MetricSeries>>,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<TraceSpan> {
    let mut spans = Vec::new();
    let value_at = |entity: &str, kpi: &str, t: f64| -> f64 {
        metrics
            .get(entity)
            .and_then(|list| list.iter().find(|s| s.kpi == kpi))
            .map(|s| {
                let idx = ((t / cfg.step_s) as usize).min(s.values.len().saturating_sub(1));
                s.values[idx]
            })
            .unwrap_or(0.0)
    };
    for edge in g.edges() {
        if edge.relation != crate::graph::Relation::Call {
            continue;
        }
        let phase: f64 = rng.gen_range(0.0..cfg.span_interval_s);
        let mut t = phase;
        while t < cfg.window_s {
            let latency = value_at(&edge.dst, "latency", t);
            let err_rate = value_at(&edge.dst, "error_rate", t);
            let duration = latency * rng.gen_range(0.8..1.2);
            let status = if duration >= cfg.timeout_ms {
                SpanStatus::Timeout
            } else if rng.gen_range(0.0..1.0) < err_rate {
                SpanStatus::Error
            } else {
                SpanStatus::Ok
            };
            spans.push(TraceSpan {
                trace_id: format!("t{}", rand_id(rng)),
                span_id: format!("s{}", rand_id(rng)),
                parent_span_id: None,
                caller: edge.src.clone(),
                callee: edge.dst.clone(),
                start: t,
                duration_ms: duration,
                status,
            });
            t += cfg.span_interval_s;
        }
    }
    spans.sort_by(|a, b| {
        a.start
            .partial_cmp(&b.start)
            .unwrap()
            .then_with(|| a.span_id.cmp(&b.span_id))
    });
    spans
}

/// Fault-free telemetry over the whole graph.
pub fn baseline_telemetry(g: &DependencyGraph, seed: u64, cfg: &SimConfig) -> Telemetry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let overlays = BTreeMap::new();
    let metrics = generate_metrics(g, &overlays, seed, cfg, &mut rng);
    let logs = generate_logs(g, &overlays, cfg, &mut rng);
    let spans = generate_spans(g, &metrics, cfg, &mut rng);
    Telemetry {
        metrics,
        logs,
        spans,
    }
}

/// Inject a fault at `root` and propagate amplified symptoms downstream along
/// call edges. Deterministic for a given `(graph, fault, root, seed, cfg)`.
pub fn inject_fault(
    g: &DependencyGraph,
    fault: FaultType,
    root: &str,
    seed: u64,
    cfg: &SimConfig,
) -> Result<Incident, SimError> {
    let entity = g.entity(root)?;
    if !fault.valid_levels().contains(&entity.level) {
        return Err(SimError::IncompatibleFault {
            fault,
            root: root.to_string(),
            level: entity.level,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = pick_propagation_path(g, root, entity.level, cfg.max_hops, &mut rng);

    let mut overlays: BTreeMap<String, Overlay> = BTreeMap::new();
    overlays.insert(root.to_string(), root_overlay(fault, cfg.onset_s, cfg));
    for (hop, entity_id) in path.iter().enumerate().skip(1) {
        let onset = cfg.onset_s + hop as f64 * cfg.hop_delay_s;
        overlays.insert(entity_id.clone(), victim_overlay(fault, hop, onset, cfg));
    }

    let metrics = generate_metrics(g, &overlays, seed, cfg, &mut rng);
    let logs = generate_logs(g, &overlays, cfg, &mut rng);
    let spans = generate_spans(g, &metrics, cfg, &mut rng);
    Ok(Incident {
        graph: g.clone(),
        window: (0.0, cfg.window_s),
        telemetry: Telemetry {
            metrics,
            logs,
            spans,
        },
        label_root: root.to_string(),
        label_fault: fault,
        propagation_path: path,
    })
}

/// All `(fault, root)` pairs valid under the taxonomy's level constraints,
/// optionally restricted to roots with a same-level outgoing call edge.
pub fn valid_pairs(
    g: &DependencyGraph,
    taxonomy: &[FaultType],
    require_downstream: bool,
) -> Vec<(FaultType, String)> {
    let mut pairs = Vec::new();
    for &fault in taxonomy {
        for entity in g.entities() {
            if !fault.valid_levels().contains(&entity.level) {
                continue;
            }
            if require_downstream {
                let has_call = g
                    .neighbors(&entity.id, Direction::Out)
                    .unwrap_or_default()
                    .iter()
                    .any(|n| {
                        g.has_call_edge(&entity.id, n)
                            && g.entity(n).map(|e| e.level == entity.level).unwrap_or(false)
                    });
                if !has_call {
                    continue;
                }
            }
            pairs.push((fault, entity.id.clone()));
        }
    }
    pairs
}

/// Sample `n` incidents with disjoint per-incident seeds; uniform over valid
/// `(fault, root)` pairs.
pub fn make_dataset(
    g: &DependencyGraph,
    n: usize,
    taxonomy: &[FaultType],
    seed: u64,
    cfg: &SimConfig,
) -> Result<Vec<Incident>, SimError> {
    let pairs = valid_pairs(g, taxonomy, cfg.require_downstream);
    assert!(!pairs.is_empty(), "no valid (fault, root) pairs");
    let mut picker = ChaCha8Rng::seed_from_u64(seed);
    let mut incidents = Vec::with_capacity(n);
    for i in 0..n {
        let (fault, root) = pairs[picker.gen_range(0..pairs.len())].clone();
        let incident_seed = seed
            .wrapping_mul(1_000_003)
            .wrapping_add(1 + i as u64);
        incidents.push(inject_fault(g, fault, &root, incident_seed, cfg)?);
    }
    Ok(incidents)
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        graph: DependencyGraph,
        window: (f64, f64),
        label_root: String,
        label_fault: FaultType,
        propagation_path: Vec<String>,
    },
    Metric(MetricSeries),
    Log(LogEvent),
    Span(TraceSpan),
}

pub fn save_incident(incident: &Incident, path: &Path) -> Result<(), SimError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = Record::Header {
        graph: incident.graph.clone(),
        window: incident.window,
        label_root: incident.label_root.clone(),
        label_fault: incident.label_fault,
        propagation_path: incident.propagation_path.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("serialize"))?;
    for series_list in incident.telemetry.metrics.values() {
        for s in series_list {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&Record::Metric(s.clone())).expect("serialize")
            )?;
        }
    }
    for events in incident.telemetry.logs.values() {
        for e in events {
            writeln!(
                w,
                "{}",
                serde_json::to_string(&Record::Log(e.clone())).expect("serialize")
            )?;
        }
    }
    for s in &incident.telemetry.spans {
        writeln!(
            w,
            "{}",
            serde_json::to_string(&Record::Span(s.clone())).expect("serialize")
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_incident(path: &Path) -> Result<Incident, SimError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut incident: Option<Incident> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|source| SimError::Parse {
            line: line_no,
            source,
        })?;
        match record {
            Record::Header {
                mut graph,
                window,
                label_root,
                label_fault,
                propagation_path,
            } => {
                if incident.is_some() {
                    return Err(SimError::Invalid {
                        line: line_no,
                        msg: "duplicate header record".into(),
                    });
                }
                graph.rebuild_adjacency();
                if !graph.contains(&label_root) {
                    return Err(SimError::Invalid {
                        line: line_no,
                        msg: format!("label_root {label_root:?} not in graph"),
                    });
                }
                if propagation_path.first().map(String::as_str) != Some(label_root.as_str()) {
                    return Err(SimError::Invalid {
                        line: line_no,
                        msg: "propagation_path must start at label_root".into(),
                    });
                }
                for pair in propagation_path.windows(2) {
                    if !graph.has_call_edge(&pair[0], &pair[1]) {
                        return Err(SimError::Invalid {
                            line: line_no,
                            msg: format!(
                                "propagation_path edge {:?} -> {:?} is not a call edge",
                                pair[0], pair[1]
                            ),
                        });
                    }
                }
                incident = Some(Incident {
                    graph,
                    window,
                    telemetry: Telemetry::default(),
                    label_root,
                    label_fault,
                    propagation_path,
                });
            }
            Record::Metric(s) => {
                let inc = incident.as_mut().ok_or(SimError::Invalid {
                    line: line_no,
                    msg: "record before header".into(),
                })?;
                validate_series(&s, line_no)?;
                inc.telemetry.metrics.entry(s.entity.clone()).or_default().push(s);
            }
            Record::Log(e) => {
                let inc = incident.as_mut().ok_or(SimError::Invalid {
                    line: line_no,
                    msg: "record before header".into(),
                })?;
                if e.timestamp < inc.window.0 || e.timestamp > inc.window.1 {
                    return Err(SimError::Invalid {
                        line: line_no,
                        msg: format!("log timestamp {} outside window", e.timestamp),
                    });
                }
                inc.telemetry.logs.entry(e.entity.clone()).or_default().push(e);
            }
            Record::Span(s) => {
                let inc = incident.as_mut().ok_or(SimError::Invalid {
                    line: line_no,
                    msg: "record before header".into(),
                })?;
                if s.duration_ms < 0.0 {
                    return Err(SimError::Invalid {
                        line: line_no,
                        msg: "negative span duration".into(),
                    });
                }
                inc.telemetry.spans.push(s);
            }
        }
    }
    incident.ok_or(SimError::Invalid {
        line: 0,
        msg: "missing header record".into(),
    })
}

fn validate_series(s: &MetricSeries, line_no: usize) -> Result<(), SimError> {
    if s.timestamps.len() != s.values.len() {
        return Err(SimError::Invalid {
            line: line_no,
            msg: "timestamps/values length mismatch".into(),
        });
    }
    for pair in s.timestamps.windows(2) {
        if pair[1] <= pair[0] {
            return Err(SimError::Invalid {
                line: line_no,
                msg: "timestamps must be strictly increasing".into(),
            });
        }
    }
    if s.timestamps.len() > 2 {
        let step = s.timestamps[1] - s.timestamps[0];
        for pair in s.timestamps.windows(2) {
            if ((pair[1] - pair[0]) - step).abs() > 1e-6 {
                return Err(SimError::Invalid {
                    line: line_no,
                    msg: "timestamps must have a uniform step".into(),
                });
            }
        }
    }
    if s.values.iter().any(|v| !v.is_finite()) {
        return Err(SimError::Invalid {
            line: line_no,
            msg: "non-finite metric value".into(),
        });
    }
    Ok(())
}

/// Manifest describing a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<String>,
    pub seed: u64,
    pub taxonomy: Vec<FaultType>,
    pub config: SimConfig,
}

pub fn save_dataset(
    incidents: &[Incident],
    seed: u64,
    taxonomy: &[FaultType],
    cfg: &SimConfig,
    dir: &Path,
) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (i, incident) in incidents.iter().enumerate() {
        let name = format!("incident-{i:05}.jsonl");
        save_incident(incident, &dir.join(&name))?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        files,
        seed,
        taxonomy: taxonomy.to_vec(),
        config: cfg.clone(),
    };
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest).expect("serialize manifest");
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Incident>, SimError> {
    let f = std::fs::File::open(dir.join("manifest.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(f)).map_err(|source| SimError::Parse {
            line: 0,
            source,
        })?;
    manifest
        .files
        .iter()
        .map(|name| load_incident(&dir.join(name)))
        .collect()
}
