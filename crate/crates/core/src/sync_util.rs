//! Barriers and round gates that can be torn down when a worker fails.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

#[derive(Error, Debug, Clone, Copy, PartialEq, Eq)]
#[error("run aborted")]
pub struct Aborted;

/// Shared abort flag. Every blocking primitive here polls it.
#[derive(Clone, Default)]
pub struct AbortFlag(Arc<AtomicBool>);

impl AbortFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_raised(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    pub fn check(&self) -> Result<(), Aborted> {
        if self.is_raised() {
            Err(Aborted)
        } else {
            Ok(())
        }
    }
}

const POLL: std::time::Duration = std::time::Duration::from_millis(20);

pub struct Barrier {
    parties: usize,
    state: Mutex<(usize, u64)>,
    cv: Condvar,
    abort: AbortFlag,
}

impl Barrier {
    pub fn new(parties: usize, abort: AbortFlag) -> Self {
        Barrier {
            parties,
            state: Mutex::new((0, 0)),
            cv: Condvar::new(),
            abort,
        }
    }

    pub fn wait(&self) -> Result<(), Aborted> {
        let mut st = self.state.lock();
        let gen = st.1;
        st.0 += 1;
        if st.0 == self.parties {
            st.0 = 0;
            st.1 += 1;
            self.cv.notify_all();
            return Ok(());
        }
        while st.1 == gen {
            self.abort.check()?;
            self.cv.wait_for(&mut st, POLL);
        }
        Ok(())
    }
}

/// Tracks the last round each node has passed a given point.
pub struct RoundGate {
    marks: Mutex<Vec<Option<u64>>>,
    cv: Condvar,
    abort: AbortFlag,
}

impl RoundGate {
    pub fn new(nodes: usize, abort: AbortFlag) -> Self {
        RoundGate {
            marks: Mutex::new(vec![None; nodes]),
            cv: Condvar::new(),
            abort,
        }
    }

    pub fn mark(&self, node: usize, round: u64) {
        let mut m = self.marks.lock();
        debug_assert!(m[node].is_none_or(|r| r < round));
        m[node] = Some(round);
        self.cv.notify_all();
    }

    /// Block until every node has marked `round` or later.
    pub fn wait_all(&self, round: u64) -> Result<(), Aborted> {
        let mut m = self.marks.lock();
        while !m.iter().all(|r| r.is_some_and(|r| r >= round)) {
            self.abort.check()?;
            self.cv.wait_for(&mut m, POLL);
        }
        Ok(())
    }
}
