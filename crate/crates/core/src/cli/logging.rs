//! Stderr logger: plain lines by default, JSON lines behind `--log-json`.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};

use log::{Level, LevelFilter, Log, Metadata, Record};

static JSON: AtomicBool = AtomicBool::new(false);

struct StderrLogger;

impl Log for StderrLogger {
    fn enabled(&self, metadata: &Metadata<'_>) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &Record<'_>) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = if JSON.load(Ordering::Relaxed) {
            serde_json::json!({
                "level": record.level().as_str().to_ascii_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            })
            .to_string()
        } else {
            match record.level() {
                Level::Error => format!("error: {}", record.args()),
                Level::Warn => format!("warning: {}", record.args()),
                _ => format!("{}", record.args()),
            }
        };
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

/// Safe to call repeatedly; later calls only change format and level.
pub fn init(json: bool, verbose: u8, quiet: bool) {
    let _ = log::set_logger(&LOGGER);
    JSON.store(json, Ordering::Relaxed);
    log::set_max_level(match (quiet, verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    });
}
