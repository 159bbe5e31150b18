//! Name → strategy lookup shared by environments, representations, and
//! reward heads.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Registry<T> {
    kind: &'static str,
    entries: BTreeMap<&'static str, T>,
}

impl<T: Clone> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, item: T) -> &mut Self {
        self.entries.insert(name, item);
        self
    }

    pub fn get(&self, name: &str) -> Result<T> {
        self.entries.get(name).cloned().ok_or_else(|| Error::Unknown {
            kind: self.kind,
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_unknown() {
        let mut r: Registry<u8> = Registry::new("thing");
        r.register("a", 1).register("b", 2);
        assert_eq!(r.get("b").unwrap(), 2);
        let err = r.get("c").unwrap_err().to_string();
        assert!(err.contains("unknown thing `c`") && err.contains("a, b"), "{err}");
    }
}
