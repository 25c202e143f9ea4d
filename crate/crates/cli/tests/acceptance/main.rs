//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod experiments;
mod oracles;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn check(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

pub struct Line {
    id: u32,
    pass: bool,
    text: String,
}

pub fn run(id: u32, limit: Duration, f: impl FnOnce() -> Verdict) -> Line {
    eprintln!("running criterion {id}");
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = started.elapsed();
    let (mut pass, mut detail) = match result {
        Ok(v) => (v.pass, v.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    };
    if elapsed > limit {
        pass = false;
        detail.push_str(&format!("; over the {}s limit", limit.as_secs()));
    }
    let text = format!(
        "criterion {id}: {} ({detail}) [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    eprintln!("{text}");
    Line { id, pass, text }
}

fn main() {
    // Ignore the libtest-style arguments cargo passes (e.g. `--quiet`);
    // `--list` must print nothing so test discovery stays fast.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let secs = Duration::from_secs;
    let mut lines = vec![
        run(1, secs(60), oracles::c1_gradients),
        run(2, secs(60), oracles::c2_function_preservation),
        run(3, secs(60), oracles::c3_lap),
        run(4, secs(120), oracles::c4_planted),
        run(5, secs(1), oracles::c5_barrier_identities),
        run(11, secs(1), oracles::c11_step_scaling),
        run(12, secs(1), oracles::c12_metric_oracles),
    ];
    lines.extend(experiments::run_all());
    lines.sort_by_key(|l| l.id);
    for l in &lines {
        println!("{}", l.text);
    }
    let failed: Vec<u32> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    if !failed.is_empty() {
        println!("acceptance: {} of {} criteria failed: {failed:?}", failed.len(), lines.len());
        std::process::exit(1);
    }
    println!("acceptance: all {} criteria passed", lines.len());
}
