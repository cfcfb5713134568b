//! Progress and log reporting for long-running stages.

use std::sync::Mutex;

pub trait Observer: Sync {
    fn log(&self, line: &str);

    /// Fraction of the stage completed, in [0, 1].
    fn progress(&self, _fraction: f64) {}
}

/// Forwards to the `log` crate at info level.
pub struct LogObserver;

impl Observer for LogObserver {
    fn log(&self, line: &str) {
        log::info!("{line}");
    }
}

pub struct Silent;

impl Observer for Silent {
    fn log(&self, _line: &str) {}
}

/// Keeps every line and the last progress value; handy in tests.
#[derive(Default)]
pub struct Collect {
    pub lines: Mutex<Vec<String>>,
    pub last_progress: Mutex<f64>,
}

impl Observer for Collect {
    fn log(&self, line: &str) {
        self.lines.lock().unwrap_or_else(|p| p.into_inner()).push(line.to_string());
    }

    fn progress(&self, fraction: f64) {
        *self.last_progress.lock().unwrap_or_else(|p| p.into_inner()) = fraction;
    }
}
