//! Device model: the metamodel → organisational model → device state
//! hierarchy, business scenarios and their boundary constraints.

pub mod constraint;
pub mod description;
pub mod dfm;
pub mod ofm;
pub mod scenario;
pub mod state;
pub mod version;

use thiserror::Error;

pub use constraint::{CmpOp, Constraint, EvalError, ParseError, StateField};
pub use description::{validate_description, DeviceDescription, ValidationReport};
pub use dfm::{DeviceFeatures, FeatureNode, FeatureTree, PowerSupply, Violation, ViolationKind};
pub use ofm::{Access, DeviceClass, Domain, NotSettable, OrganisationalFeatureModel, VariationPoint};
pub use scenario::BusinessScenario;
pub use state::{project_state, validate_state, DeviceState, ProjectionError, MAX_SERVICE_LEVEL};
pub use version::{Version, VersionRange};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown device class {0}")]
    UnknownClass(String),
}
