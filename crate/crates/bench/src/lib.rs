//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use dir_tir_core::{Engine, EngineSettings, FusionPolicy, Gallery, OracleSuite, SyntheticWorld};

/// A full `bits`-attribute synthetic world with its gallery and oracle suite.
pub struct Fixture {
    pub world: SyntheticWorld,
    pub gallery: Arc<Gallery>,
    pub oracles: OracleSuite,
}

impl Fixture {
    pub fn new(bits: usize) -> Self {
        let world = SyntheticWorld::new(bits);
        Fixture {
            gallery: Arc::new(world.gallery()),
            oracles: OracleSuite::synthetic(world.clone()),
            world,
        }
    }

    pub fn engine(&self, policy: FusionPolicy) -> Engine {
        let settings = EngineSettings {
            policy,
            ..EngineSettings::default()
        };
        Engine::new(self.gallery.clone(), self.oracles.clone(), settings)
            .expect("default settings are valid")
    }
}
