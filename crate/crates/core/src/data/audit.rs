//! Process-wide log of every dataset file opened for reading. Training
//! protocols that must never see certain label files are verified against
//! this log rather than by trusting call-site discipline.

use std::path::Path;
use std::sync::Mutex;

static LOG: Mutex<Vec<String>> = Mutex::new(Vec::new());

pub fn record_read(path: &Path) {
    LOG.lock().unwrap().push(path.to_string_lossy().into_owned());
}

pub fn snapshot() -> Vec<String> {
    LOG.lock().unwrap().clone()
}

pub fn reset() {
    LOG.lock().unwrap().clear();
}
