//! Runs the trajectory-adherence experiment and prints the report.
//!
//! `cargo run --release --example adherence -- [out_dir] [core_steps] [cond_steps] [clips]`

use std::path::PathBuf;

use trajvid::eval::{run_end_to_end, EndToEndConfig};

fn main() -> trajvid::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = EndToEndConfig::default();
    let out = args.first().map(PathBuf::from);
    if let Some(s) = args.get(1) {
        cfg.train.core_steps = s.parse().expect("core_steps");
    }
    if let Some(s) = args.get(2) {
        cfg.train.cond_steps = s.parse().expect("cond_steps");
    }
    if let Some(s) = args.get(3) {
        cfg.clips = s.parse().expect("clips");
    }
    let started = std::time::Instant::now();
    let outcome = run_end_to_end(&cfg, out.as_deref(), |r| {
        if r.step % 50 == 0 {
            eprintln!("step {:5} loss {:.4} ({:.0}s)", r.step, r.loss, started.elapsed().as_secs_f64());
        }
    })?;
    println!("{}", serde_json::to_string_pretty(&outcome).expect("serializes"));
    Ok(())
}
