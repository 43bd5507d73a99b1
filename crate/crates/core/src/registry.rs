//! Name-keyed factories for runtime-selected strategy objects.

use std::collections::BTreeMap;

use thiserror::Error;

pub type Factory<T, C> = Box<dyn Fn(&C) -> Result<Box<T>, String> + Send + Sync>;

pub struct Registry<T: ?Sized, C = ()> {
    kind: &'static str,
    entries: BTreeMap<String, Factory<T, C>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("unknown {kind} '{name}' (available: {})", available.join(", "))]
    Unknown { kind: &'static str, name: String, available: Vec<String> },
    #[error("cannot construct {kind} '{name}': {reason}")]
    Construct { kind: &'static str, name: String, reason: String },
}

impl<T: ?Sized, C> Registry<T, C> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    /// Registers `factory` under `name`, replacing any previous entry.
    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&C) -> Result<Box<T>, String> + Send + Sync + 'static,
    ) -> &mut Self {
        self.entries.insert(name.to_string(), Box::new(factory));
        self
    }

    pub fn create(&self, name: &str, config: &C) -> Result<Box<T>, RegistryError> {
        let f = self.entries.get(name).ok_or_else(|| RegistryError::Unknown {
            kind: self.kind,
            name: name.to_string(),
            available: self.names(),
        })?;
        f(config).map_err(|reason| RegistryError::Construct { kind: self.kind, name: name.to_string(), reason })
    }

    /// Instantiates every entry, in name order.
    pub fn create_all(&self, config: &C) -> Result<Vec<Box<T>>, RegistryError> {
        self.entries.keys().map(|n| self.create(n, config)).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Sorted names.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Shape {
        fn sides(&self) -> u32;
    }
    struct Poly(u32);
    impl Shape for Poly {
        fn sides(&self) -> u32 {
            self.0
        }
    }

    #[test]
    fn create_and_unknown() {
        let mut r: Registry<dyn Shape, u32> = Registry::new("shape");
        r.register("poly", |n| if *n >= 3 { Ok(Box::new(Poly(*n))) } else { Err("too few sides".into()) });
        assert_eq!(r.create("poly", &5).unwrap().sides(), 5);
        assert!(matches!(r.create("poly", &2), Err(RegistryError::Construct { .. })));
        let err = r.create("square", &4).err().unwrap();
        assert!(err.to_string().contains("unknown shape 'square' (available: poly)"));
    }
}
