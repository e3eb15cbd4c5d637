//! Reference worker for the evaluator protocol: scores policies with an
//! explicit synthetic oracle passed as the `hello` config.
//!
//! Usage: `opprune-oracle-worker [--mode MODE]`, where MODE is one of
//! `normal`, `silent` (never answers), `version0` (answers the handshake
//! with version "0"), `error-at:N` (reports an error for the N-th scoring
//! request), `crash-at:N` (exits before answering it), `garbage-at:N`.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use opprune::bridge::{RequestType, WireRequest, WireResponse};
use opprune::format::{OpRecord, OracleFile};

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Normal,
    Silent,
    Version0,
    ErrorAt(u64),
    CrashAt(u64),
    GarbageAt(u64),
}

fn parse_mode(s: &str) -> Option<Mode> {
    let at = |prefix: &str| s.strip_prefix(prefix).and_then(|n| n.parse().ok());
    match s {
        "normal" => Some(Mode::Normal),
        "silent" => Some(Mode::Silent),
        "version0" => Some(Mode::Version0),
        _ => at("error-at:")
            .map(Mode::ErrorAt)
            .or_else(|| at("crash-at:").map(Mode::CrashAt))
            .or_else(|| at("garbage-at:").map(Mode::GarbageAt)),
    }
}

fn score(spec: &OracleFile, policy: &[OpRecord]) -> f64 {
    let pruned: BTreeSet<(&str, u16, &str)> = policy
        .iter()
        .map(|r| (r.group.as_str(), r.layer, r.module.as_str()))
        .collect();
    let harmless = |g: &str, l: u16, m: &str| {
        spec.harmless_depth
            .iter()
            .any(|h| h.group == g && h.module.as_str() == m && l >= h.layer)
    };
    let counts = |g: &str, l: u16, m: &str| pruned.contains(&(g, l, m)) && !harmless(g, l, m);
    let mut s = spec.base;
    for w in &spec.weights {
        if counts(&w.group, w.layer, w.module.as_str()) {
            s -= w.weight;
        }
    }
    for i in &spec.interactions {
        if counts(&i.a.group, i.a.layer, i.a.module.as_str())
            && counts(&i.b.group, i.b.layer, i.b.module.as_str())
        {
            s -= i.weight;
        }
    }
    s
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = match args.as_slice() {
        [] => Mode::Normal,
        [flag, m] if flag == "--mode" => match parse_mode(m) {
            Some(m) => m,
            None => {
                eprintln!("unknown mode `{m}`");
                return ExitCode::from(2);
            }
        },
        _ => {
            eprintln!("usage: opprune-oracle-worker [--mode MODE]");
            return ExitCode::from(2);
        }
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut spec: Option<OracleFile> = None;
    let mut scored = 0u64;
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        if mode == Mode::Silent {
            continue;
        }
        let req: WireRequest = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("bad request: {e}");
                return ExitCode::from(1);
            }
        };
        let resp = match req.kind {
            RequestType::Hello => {
                let mut ok = WireResponse::hello_ok(req.id);
                if mode == Mode::Version0 {
                    ok.version = Some("0".into());
                }
                match req.config.map(serde_json::from_value::<OracleFile>) {
                    Some(Ok(f)) if f.random.is_none() => {
                        spec = Some(f);
                        ok
                    }
                    Some(Ok(_)) => WireResponse::error(req.id, "random oracle sections are not supported"),
                    Some(Err(e)) => WireResponse::error(req.id, format!("bad config: {e}")),
                    None => WireResponse::error(req.id, "missing config"),
                }
            }
            RequestType::Shutdown => {
                let _ = writeln!(out, "{}", serde_json::to_string(&WireResponse::hello_ok(req.id)).unwrap());
                let _ = out.flush();
                return ExitCode::SUCCESS;
            }
            RequestType::Evaluate | RequestType::Baseline => {
                scored += 1;
                match mode {
                    Mode::CrashAt(n) if n == scored => return ExitCode::from(101),
                    Mode::GarbageAt(n) if n == scored => {
                        let _ = writeln!(out, "not json");
                        let _ = out.flush();
                        continue;
                    }
                    Mode::ErrorAt(n) if n == scored => WireResponse::error(req.id, "injected failure"),
                    _ => match &spec {
                        None => WireResponse::error(req.id, "no hello received"),
                        Some(s) => WireResponse::score(
                            req.id,
                            score(s, req.policy.as_deref().unwrap_or_default()),
                        ),
                    },
                }
            }
        };
        if writeln!(out, "{}", serde_json::to_string(&resp).unwrap())
            .and_then(|_| out.flush())
            .is_err()
        {
            break;
        }
    }
    ExitCode::SUCCESS
}
