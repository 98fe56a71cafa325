//! Named monotonic counters shared between the fast path and the controllers.

use std::collections::BTreeMap;

use parking_lot::Mutex;

#[derive(Debug, Default)]
pub struct Counters {
    inner: Mutex<BTreeMap<String, u64>>,
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, name: &str, n: u64) {
        let mut m = self.inner.lock();
        match m.get_mut(name) {
            Some(v) => *v += n,
            None => {
                m.insert(name.to_owned(), n);
            }
        }
    }

    pub fn incr(&self, name: &str) {
        self.add(name, 1);
    }

    pub fn get(&self, name: &str) -> u64 {
        self.inner.lock().get(name).copied().unwrap_or(0)
    }

    /// Sum of every counter whose name starts with `prefix`.
    pub fn sum_prefix(&self, prefix: &str) -> u64 {
        self.inner
            .lock()
            .range(prefix.to_owned()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| *v)
            .sum()
    }

    pub fn snapshot(&self) -> BTreeMap<String, u64> {
        self.inner.lock().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_sums() {
        let c = Counters::new();
        c.incr("drop.no_route");
        c.add("drop.no_listener", 2);
        c.incr("dropx");
        c.incr("deliver");
        assert_eq!(c.sum_prefix("drop."), 3);
        assert_eq!(c.get("missing"), 0);
    }
}
