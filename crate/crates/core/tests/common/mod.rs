//! Shared fixtures: a deterministic synthetic Modbus/TCP capture with an
//! aligned attack log, plus run-config builders for integration tests.

#![allow(dead_code)]

use modaudit::config::{Backend, BaselineCfg, BinsCfg, CaptureInput, InputsCfg, LlmCfg, PricesCfg,
                       ProbesCfg, RunConfig, SeedsCfg, SplitCfg, WindowCfg};
use modaudit::ingest::modbus::build_mbap_frame;
use modaudit::ingest::pcap::writer;
use modaudit::ingest::{CaptureFormat, FlowKey};
use modaudit::types::Partition;
use std::path::{Path, PathBuf};

const CLIENT: [u8; 4] = [10, 0, 0, 2];
const SERVER: [u8; 4] = [10, 0, 0, 1];
const CLIENT_PORT: u16 = 49152;
const MODBUS_PORT: u16 = 502;

/// Capture start: 2023-05-01T10:00:00Z in epoch microseconds.
pub const T0_US: i64 = 1_682_935_200_000_000;

/// Tiny deterministic LCG for jitter; keeps the fixture self-contained.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 33
    }

    /// Uniform value in [0, bound).
    fn below(&mut self, bound: u64) -> u64 {
        self.next() % bound
    }
}

struct CaptureBuilder {
    buf: Vec<u8>,
    txn: u16,
}

impl CaptureBuilder {
    fn new() -> Self {
        CaptureBuilder {
            buf: writer::file_header(),
            txn: 0,
        }
    }

    fn push(&mut self, ts_us: i64, to_server: bool, unit: u8, pdu: &[u8]) {
        self.txn = self.txn.wrapping_add(1);
        let payload = build_mbap_frame(self.txn, unit, pdu);
        let pkt = if to_server {
            writer::tcp_packet(CLIENT, SERVER, CLIENT_PORT, MODBUS_PORT, &payload)
        } else {
            writer::tcp_packet(SERVER, CLIENT, MODBUS_PORT, CLIENT_PORT, &payload)
        };
        writer::append_record(&mut self.buf, ts_us, &pkt);
    }

    fn push_raw_payload(&mut self, ts_us: i64, to_server: bool, payload: &[u8]) {
        let pkt = if to_server {
            writer::tcp_packet(CLIENT, SERVER, CLIENT_PORT, MODBUS_PORT, payload)
        } else {
            writer::tcp_packet(SERVER, CLIENT, MODBUS_PORT, CLIENT_PORT, payload)
        };
        writer::append_record(&mut self.buf, ts_us, &pkt);
    }
}

fn sec(s: f64) -> i64 {
    (s * 1e6) as i64
}

/// Build the bundled synthetic capture: steady read polling with jitter,
/// plus four attack bursts (query flooding, brute-force writes, exception
/// probing, undefined function codes) aligned with the attack log.
pub fn synthetic_capture() -> Vec<u8> {
    let mut cap = CaptureBuilder::new();
    let mut rng = Lcg(0x5eed_1234_abcd_0001);

    // Normal polling: one request/response pair roughly every 4 seconds,
    // alternating FC3 reads and FC23 read/write-multiple transactions.
    let mut t = T0_US;
    let mut pair = 0u32;
    while t < T0_US + sec(1000.0) {
        let unit = 1 + (pair % 2) as u8;
        if pair % 2 == 0 {
            let regs = 1 + (pair / 2 % 12) as usize;
            cap.push(t, true, unit, &[0x03, 0x00, 0x10, 0x00, regs as u8]);
            let mut resp = vec![0x03, (regs * 2) as u8];
            resp.extend(std::iter::repeat(0x11).take(regs * 2));
            cap.push(t + sec(0.012), false, unit, &resp);
        } else {
            let n = 1 + (pair / 2 % 5) as usize;
            let mut req = vec![0x17, 0x00, 0x20, 0x00, 0x04, 0x00, 0x30, 0x00, n as u8, (n * 2) as u8];
            req.extend(std::iter::repeat(0x22).take(n * 2));
            cap.push(t, true, unit, &req);
            let m = 1 + (pair / 2 % 7) as usize;
            let mut resp = vec![0x17, (m * 2) as u8];
            resp.extend(std::iter::repeat(0x33).take(m * 2));
            cap.push(t + sec(0.011), false, unit, &resp);
        }
        // 4s +- 0.5s deterministic jitter.
        t += sec(3.5) + rng.below(1_000_000) as i64;
        pair += 1;
    }

    // Attack 1 (train zone): query flooding, t+200s..t+215s.
    let mut t = T0_US + sec(200.0);
    for i in 0..100 {
        cap.push(t, true, 1, &[0x03, 0x00, 0x00, 0x00, 0x7d]);
        if i == 40 || i == 41 {
            // Replayed duplicates at identical timestamps.
            cap.push(t, true, 1, &[0x03, 0x00, 0x00, 0x00, 0x7d]);
        }
        t += sec(0.14) + rng.below(20_000) as i64;
    }

    // Attack 2 (train zone): brute-force writes answered by exceptions,
    // t+500s..t+520s.
    let mut t = T0_US + sec(500.0);
    for i in 0..20u16 {
        cap.push(t, true, 3, &[0x06, (i >> 8) as u8, i as u8, 0x00, 0x01]);
        cap.push(t + sec(0.009), false, 3, &[0x86, 0x02]);
        t += sec(0.9) + rng.below(200_000) as i64;
    }

    // Attack 3 (validation zone): exception probing, t+650s..t+656s.
    let mut t = T0_US + sec(650.0);
    for _ in 0..10 {
        cap.push(t, false, 1, &[0x83, 0x02]);
        t += sec(0.55) + rng.below(100_000) as i64;
    }

    // Attack 4 (test zone): undefined function codes, t+870s..t+882s.
    let mut t = T0_US + sec(870.0);
    for i in 0..25u32 {
        let junk = 2 + (i % 14) as usize;
        let mut pdu = vec![0x5a];
        pdu.extend(std::iter::repeat(0x99).take(junk));
        cap.push(t, true, 2, &pdu);
        cap.push(t + sec(0.007), false, 2, &[0xda, 0x01]);
        t += sec(0.4) + rng.below(80_000) as i64;
    }

    // Noise the parser must skip or flag: a non-Modbus TCP packet and a
    // malformed one-byte payload on the Modbus port.
    let pkt = writer::tcp_packet(CLIENT, SERVER, CLIENT_PORT, 8080, b"GET /");
    writer::append_record(&mut cap.buf, T0_US + sec(300.0), &pkt);
    cap.push_raw_payload(T0_US + sec(301.0), true, &[0x03]);

    cap.buf
}

/// Attack log aligned with `synthetic_capture`.
pub fn synthetic_attack_log() -> String {
    let mut out = String::from("# source_tz: UTC\ntimestamp_iso8601,scenario\n");
    let ts = |s: u64| {
        let total = 1_682_935_200 + s;
        let (h, m, sec) = (total / 3600 % 24, total / 60 % 60, total % 60);
        format!("2023-05-01T{h:02}:{m:02}:{sec:02}Z")
    };
    for s in [200u64, 205, 210] {
        out.push_str(&format!("{},query_flooding\n", ts(s)));
    }
    for s in [500u64, 510, 515] {
        out.push_str(&format!("{},brute_force_write\n", ts(s)));
    }
    for s in [650u64, 653] {
        out.push_str(&format!("{},exception_probing\n", ts(s)));
    }
    for s in [870u64, 875, 880] {
        out.push_str(&format!("{},undefined_function\n", ts(s)));
    }
    out
}

/// Write the synthetic capture and attack log into `dir`.
pub fn write_fixtures(dir: &Path) -> (PathBuf, PathBuf) {
    let capture = dir.join("synthetic.pcap");
    let log = dir.join("attacks.csv");
    std::fs::write(&capture, synthetic_capture()).unwrap();
    std::fs::write(&log, synthetic_attack_log()).unwrap();
    (capture, log)
}

/// A run configuration over the synthetic fixture with the rule back end.
pub fn fixture_config(capture: &Path, attack_log: &Path, run_dir: &Path) -> RunConfig {
    RunConfig {
        version: 1,
        inputs: InputsCfg {
            captures: vec![CaptureInput {
                path: capture.to_path_buf(),
                format: CaptureFormat::Pcap,
            }],
            attack_log: Some(attack_log.to_path_buf()),
        },
        modbus_port: MODBUS_PORT,
        flow_key: FlowKey::PerDirectionPair,
        windows: WindowCfg {
            merge_gap_s: 60.0,
            tail_s: 10.0,
        },
        split: SplitCfg::default(),
        bins: BinsCfg::default(),
        backend: Backend::Rule,
        rules: Default::default(),
        llm: LlmCfg::default(),
        baseline: BaselineCfg::default(),
        probes: ProbesCfg::default(),
        prices: PricesCfg::default(),
        eval_partition: Partition::Test,
        parallelism: 4,
        run_dir: run_dir.to_path_buf(),
        seeds: SeedsCfg::default(),
    }
}

/// Path to the committed copies of the fixtures.
pub fn testdata_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata")
}
