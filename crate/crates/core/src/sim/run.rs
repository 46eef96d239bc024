use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::device::{AgentConfig, FaultSpec};
use crate::commission::Commission;
use crate::doc::{read_json, DocError};
use crate::factory::FactoryConfig;
use crate::model::Constraint;
use crate::registry::{FleetBootstrap, OfmRef, DEFAULT_STALENESS_THRESHOLD};
use crate::scheduler::Policy;
use crate::shipping::Strategy;
use crate::store::DEFAULT_PACKAGE_CAPACITY;
use crate::transform::TransformationComponent;
use crate::value::Tick;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FleetRef {
    Path(PathBuf),
    Inline(FleetBootstrap),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComponentsRef {
    /// Directory of component documents.
    Dir(PathBuf),
    Inline(Vec<TransformationComponent>),
}

impl Default for ComponentsRef {
    fn default() -> Self {
        ComponentsRef::Inline(Vec::new())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledCommission {
    pub at: Tick,
    pub commission: Commission,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub staleness_threshold: Tick,
    /// Execution attempts per package under injected failures.
    pub retry_budget: u32,
    pub partial_revert: bool,
    pub package_capacity: usize,
    pub factory: FactoryConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            staleness_threshold: DEFAULT_STALENESS_THRESHOLD,
            retry_budget: 3,
            partial_revert: false,
            package_capacity: DEFAULT_PACKAGE_CAPACITY,
            factory: FactoryConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Agents {
    pub defaults: AgentConfig,
    pub devices: BTreeMap<String, AgentConfig>,
}

impl Agents {
    pub fn for_device(&self, device: &str) -> AgentConfig {
        self.devices.get(device).copied().unwrap_or(self.defaults)
    }
}

/// Agent-side requirement source: when `when` turns true over the device's
/// own state, the device submits `template` on its own behalf.
///
/// The template's window is relative to the trigger tick and an empty target
/// set means the device itself.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InternalRule {
    pub name: String,
    /// Devices running the rule; empty means every device.
    #[serde(default)]
    pub devices: Vec<String>,
    pub when: Constraint,
    pub template: Commission,
}

/// Seed-driven fault injection on top of the fixed schedule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomFaults {
    /// Chance per device per tick, in thousandths.
    pub per_mille: u32,
    pub max_duration: Tick,
    pub kinds: Vec<String>,
}

/// Everything one simulation needs, in one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub fleet: FleetRef,
    #[serde(default)]
    pub components: ComponentsRef,
    #[serde(default)]
    pub commissions: Vec<ScheduledCommission>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    pub strategy: Strategy,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub agents: Agents,
    #[serde(default)]
    pub settings: Settings,
    #[serde(default)]
    pub rules: Vec<InternalRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_faults: Option<RandomFaults>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunFileError {
    #[error("{path}: {source}")]
    Doc {
        path: PathBuf,
        #[source]
        source: DocError,
    },
    #[error("{0}")]
    Fleet(#[from] crate::registry::FleetError),
    #[error("{0}")]
    Components(#[from] crate::store::StoreError),
}

impl RunFile {
    /// Reads a run file and inlines every relative reference in it.
    pub fn load(path: &Path) -> Result<RunFile, RunFileError> {
        let mut run: RunFile = read_json(path).map_err(|source| RunFileError::Doc {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        run.resolve(base)?;
        Ok(run)
    }

    pub fn resolve(&mut self, base: &Path) -> Result<(), RunFileError> {
        match &mut self.fleet {
            FleetRef::Path(p) => {
                self.fleet = FleetRef::Inline(FleetBootstrap::load(&base.join(&*p))?);
            }
            FleetRef::Inline(f) => {
                if let OfmRef::Path(p) = &f.ofm {
                    let full = base.join(p);
                    f.ofm = OfmRef::Inline(read_json(&full).map_err(|source| RunFileError::Doc { path: full, source })?);
                }
            }
        }
        if let ComponentsRef::Dir(dir) = &self.components {
            let mut store = crate::store::ArtifactStore::open(Box::new(crate::store::MemoryBackend::new()))?;
            store.load_dir(&base.join(dir))?;
            self.components = ComponentsRef::Inline(store.components().to_vec());
        }
        Ok(())
    }
}
