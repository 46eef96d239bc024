//! Device feature metamodel: the fixed seven-group structure every device
//! description follows.
//!
//! Descriptions are held as a generic [`FeatureTree`] so that malformed input
//! (a missing group, a stray field) can be represented and reported instead of
//! failing deserialization. [`DeviceFeatures`] is the typed view once a tree
//! passes [`validate_tree`].
//!
//! `sensing` and `acting` are open maps of capability name to parameter map:
//! `capabilities/sensing/temperature/polling_rate`. Every other group has a
//! closed set of fields.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::version::Version;
use crate::value::{FieldPath, Value, ValueKind, FEATURE_GROUPS, ROOT_SEGMENT};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureNode {
    Leaf(Value),
    Group(BTreeMap<String, FeatureNode>),
}

/// Key tree below the `capabilities` root.
pub type FeatureTree = BTreeMap<String, FeatureNode>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ViolationKind {
    MissingGroup,
    MissingField,
    ExtraField,
    WrongType { expected: String, found: String },
    OutOfRange { detail: String },
    Domain { value: Value, domain: String },
    ClassMismatch { expected: Value, found: Value },
    NotConfigurable,
}

/// One problem found while validating a description or state.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl Violation {
    pub fn new(path: impl Into<String>, kind: ViolationKind) -> Self {
        Violation {
            path: path.into(),
            kind,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::MissingGroup => write!(f, "{}: missing feature group", self.path),
            ViolationKind::MissingField => write!(f, "{}: missing field", self.path),
            ViolationKind::ExtraField => write!(f, "{}: field not in metamodel", self.path),
            ViolationKind::WrongType { expected, found } => {
                write!(f, "{}: expected {expected}, found {found}", self.path)
            }
            ViolationKind::OutOfRange { detail } => write!(f, "{}: {detail}", self.path),
            ViolationKind::Domain { value, domain } => {
                write!(f, "{}: value {value} outside domain {domain}", self.path)
            }
            ViolationKind::ClassMismatch { expected, found } => write!(
                f,
                "{}: device class fixes {expected}, description has {found}",
                self.path
            ),
            ViolationKind::NotConfigurable => {
                write!(f, "{}: not a configurable variation point", self.path)
            }
        }
    }
}

/// Closed fields of the non-open groups.
const FIXED_FIELDS: &[(&str, &str, ValueKind)] = &[
    ("computational", "cores", ValueKind::Int),
    ("computational", "clock_hz", ValueKind::Int),
    ("memory", "bytes", ValueKind::Int),
    ("communication", "protocols", ValueKind::Set),
    ("communication", "bandwidth_bps", ValueKind::Int),
    ("power", "supply", ValueKind::Text),
    ("power", "capacity_mwh", ValueKind::Int),
    ("power", "charge_pct", ValueKind::Int),
    ("os", "platform", ValueKind::Text),
    ("os", "version", ValueKind::Text),
];

const OPEN_GROUPS: [&str; 2] = ["sensing", "acting"];

fn full(segments: &[&str]) -> String {
    let mut s = String::from(ROOT_SEGMENT);
    for seg in segments {
        s.push('/');
        s.push_str(seg);
    }
    s
}

fn node_kind(node: &FeatureNode) -> String {
    match node {
        FeatureNode::Leaf(v) => v.kind().to_string(),
        FeatureNode::Group(_) => "group".into(),
    }
}

/// True iff `path` names a field the metamodel defines (including
/// `sensing|acting/<capability>/<parameter>`).
pub fn path_in_schema(path: &FieldPath) -> bool {
    match path.feature_segments().as_deref() {
        Some([group, field]) => FIXED_FIELDS.iter().any(|(g, f, _)| g == group && f == field),
        Some([group, cap, param]) => {
            OPEN_GROUPS.contains(group) && !cap.is_empty() && !param.is_empty()
        }
        _ => false,
    }
}

/// Expected leaf kind for a schema path; open-group parameters accept any kind.
pub fn schema_kind(path: &FieldPath) -> Option<ValueKind> {
    match path.feature_segments().as_deref() {
        Some([group, field]) => FIXED_FIELDS
            .iter()
            .find(|(g, f, _)| g == group && f == field)
            .map(|(_, _, k)| *k),
        _ => None,
    }
}

pub fn lookup<'a>(tree: &'a FeatureTree, path: &FieldPath) -> Option<&'a Value> {
    let segs = path.feature_segments()?;
    let (last, inner) = segs.split_last()?;
    let mut node = tree;
    for seg in inner {
        match node.get(*seg)? {
            FeatureNode::Group(g) => node = g,
            FeatureNode::Leaf(_) => return None,
        }
    }
    match node.get(*last)? {
        FeatureNode::Leaf(v) => Some(v),
        FeatureNode::Group(_) => None,
    }
}

/// Writes a leaf, creating intermediate groups. Returns false if a leaf is in
/// the way or the path is not rooted under `capabilities`.
pub fn assign(tree: &mut FeatureTree, path: &FieldPath, value: Value) -> bool {
    let Some(segs) = path.feature_segments() else {
        return false;
    };
    let Some((last, inner)) = segs.split_last() else {
        return false;
    };
    let mut node = tree;
    for seg in inner {
        let entry = node
            .entry((*seg).to_string())
            .or_insert_with(|| FeatureNode::Group(BTreeMap::new()));
        match entry {
            FeatureNode::Group(g) => node = g,
            FeatureNode::Leaf(_) => return false,
        }
    }
    node.insert((*last).to_string(), FeatureNode::Leaf(value));
    true
}

fn check_fixed(group: &str, field: &str, value: &Value) -> Option<String> {
    let int = value.as_int();
    match (group, field) {
        ("computational", "cores") if int.is_some_and(|c| c < 1) => Some("cores must be at least 1".into()),
        ("computational", "clock_hz") if int.is_some_and(|c| c <= 0) => Some("clock must be positive".into()),
        ("memory", "bytes") | ("communication", "bandwidth_bps") | ("power", "capacity_mwh")
            if int.is_some_and(|c| c < 0) =>
        {
            Some("must be non-negative".into())
        }
        ("power", "charge_pct") if int.is_some_and(|c| !(0..=100).contains(&c)) => {
            Some("charge must lie in [0,100]".into())
        }
        ("power", "supply") => match value.as_text() {
            Some("mains" | "battery" | "harvesting") => None,
            _ => Some("supply must be one of mains|battery|harvesting".into()),
        },
        ("os", "version") => match value.as_text().map(Version::parse) {
            Some(Ok(_)) => None,
            _ => Some("version must be a dotted decimal string".into()),
        },
        _ => None,
    }
}

/// Structural validation of a feature tree against the metamodel: all seven
/// groups present, closed groups hold exactly their fields with the right
/// kinds and value bounds, open groups hold capability → parameter maps.
pub fn validate_tree(tree: &FeatureTree) -> Vec<Violation> {
    let mut out = Vec::new();
    for key in tree.keys() {
        if !FEATURE_GROUPS.contains(&key.as_str()) {
            out.push(Violation::new(full(&[key]), ViolationKind::ExtraField));
        }
    }
    for group in FEATURE_GROUPS {
        let Some(node) = tree.get(group) else {
            out.push(Violation::new(full(&[group]), ViolationKind::MissingGroup));
            continue;
        };
        let FeatureNode::Group(fields) = node else {
            out.push(Violation::new(
                full(&[group]),
                ViolationKind::WrongType {
                    expected: "group".into(),
                    found: node_kind(node),
                },
            ));
            continue;
        };
        if OPEN_GROUPS.contains(&group) {
            for (cap, params) in fields {
                match params {
                    FeatureNode::Group(params) => {
                        for (name, p) in params {
                            if let FeatureNode::Group(_) = p {
                                out.push(Violation::new(full(&[group, cap, name]), ViolationKind::ExtraField));
                            }
                        }
                    }
                    FeatureNode::Leaf(_) => out.push(Violation::new(
                        full(&[group, cap]),
                        ViolationKind::WrongType {
                            expected: "group".into(),
                            found: node_kind(params),
                        },
                    )),
                }
            }
            continue;
        }
        for name in fields.keys() {
            if !FIXED_FIELDS.iter().any(|(g, f, _)| *g == group && f == name) {
                out.push(Violation::new(full(&[group, name]), ViolationKind::ExtraField));
            }
        }
        for (g, field, kind) in FIXED_FIELDS.iter().filter(|(g, _, _)| *g == group) {
            let path = full(&[g, field]);
            match fields.get(*field) {
                None => out.push(Violation::new(path, ViolationKind::MissingField)),
                Some(FeatureNode::Leaf(v)) if v.kind() == *kind => {
                    if let Some(detail) = check_fixed(g, field, v) {
                        out.push(Violation::new(path, ViolationKind::OutOfRange { detail }));
                    }
                }
                Some(other) => out.push(Violation::new(
                    path,
                    ViolationKind::WrongType {
                        expected: kind.to_string(),
                        found: node_kind(other),
                    },
                )),
            }
        }
    }
    // battery-powered devices must declare a capacity
    if let Ok(features) = DeviceFeatures::from_tree_unchecked(tree) {
        if features.power.supply == PowerSupply::Battery && features.power.capacity_mwh == 0 {
            out.push(Violation::new(
                full(&["power", "capacity_mwh"]),
                ViolationKind::OutOfRange {
                    detail: "battery devices need a positive capacity".into(),
                },
            ));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerSupply {
    Mains,
    Battery,
    Harvesting,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Computational {
    pub cores: u32,
    pub clock_hz: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Communication {
    pub protocols: BTreeSet<String>,
    pub bandwidth_bps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Power {
    pub supply: PowerSupply,
    pub capacity_mwh: u64,
    pub charge_pct: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperatingSystem {
    pub platform: String,
    pub version: Version,
}

/// Capability name → parameter map for the open sensing/acting groups.
pub type CapabilitySet = BTreeMap<String, BTreeMap<String, Value>>;

/// Typed view of the seven feature groups: computational, memory,
/// communication, power, sensing, acting, operating system.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceFeatures {
    pub computational: Computational,
    pub memory_bytes: u64,
    pub communication: Communication,
    pub power: Power,
    pub sensing: CapabilitySet,
    pub acting: CapabilitySet,
    pub os: OperatingSystem,
}

impl DeviceFeatures {
    /// Builds the typed view, failing with the full violation list if the tree
    /// does not conform.
    pub fn from_tree(tree: &FeatureTree) -> Result<Self, Vec<Violation>> {
        let violations = validate_tree(tree);
        if !violations.is_empty() {
            return Err(violations);
        }
        Self::from_tree_unchecked(tree).map_err(|path| vec![Violation::new(path, ViolationKind::MissingField)])
    }

    fn from_tree_unchecked(tree: &FeatureTree) -> Result<Self, String> {
        let get = |g: &str, f: &str| {
            let path = FieldPath::parse(&format!("{g}/{f}")).expect("static path");
            lookup(tree, &path).cloned().ok_or_else(|| path.to_string())
        };
        let int = |g: &str, f: &str| -> Result<i64, String> {
            get(g, f)?.as_int().ok_or_else(|| full(&[g, f]))
        };
        let text = |g: &str, f: &str| -> Result<String, String> {
            get(g, f)?.as_text().map(str::to_string).ok_or_else(|| full(&[g, f]))
        };
        let caps = |g: &str| -> CapabilitySet {
            let mut out = CapabilitySet::new();
            if let Some(FeatureNode::Group(caps)) = tree.get(g) {
                for (name, node) in caps {
                    let mut params = BTreeMap::new();
                    if let FeatureNode::Group(ps) = node {
                        for (k, v) in ps {
                            if let FeatureNode::Leaf(v) = v {
                                params.insert(k.clone(), v.clone());
                            }
                        }
                    }
                    out.insert(name.clone(), params);
                }
            }
            out
        };
        let supply = match text("power", "supply")?.as_str() {
            "mains" => PowerSupply::Mains,
            "battery" => PowerSupply::Battery,
            "harvesting" => PowerSupply::Harvesting,
            _ => return Err(full(&["power", "supply"])),
        };
        let protocols = match get("communication", "protocols")? {
            Value::Set(s) => s,
            _ => return Err(full(&["communication", "protocols"])),
        };
        Ok(DeviceFeatures {
            computational: Computational {
                cores: int("computational", "cores")?.clamp(0, u32::MAX as i64) as u32,
                clock_hz: int("computational", "clock_hz")?.max(0) as u64,
            },
            memory_bytes: int("memory", "bytes")?.max(0) as u64,
            communication: Communication {
                protocols,
                bandwidth_bps: int("communication", "bandwidth_bps")?.max(0) as u64,
            },
            power: Power {
                supply,
                capacity_mwh: int("power", "capacity_mwh")?.max(0) as u64,
                charge_pct: int("power", "charge_pct")?.clamp(0, 100) as u8,
            },
            sensing: caps("sensing"),
            acting: caps("acting"),
            os: OperatingSystem {
                platform: text("os", "platform")?,
                version: Version::parse(&text("os", "version")?).map_err(|_| full(&["os", "version"]))?,
            },
        })
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// A Raspberry Pi 3 shaped feature tree with one temperature sensor.
    pub fn rpi_tree() -> FeatureTree {
        serde_json::from_value(serde_json::json!({
            "computational": {"cores": 4, "clock_hz": 1_200_000_000i64},
            "memory": {"bytes": 1_073_741_824i64},
            "communication": {"protocols": ["mqtt"], "bandwidth_bps": 100_000_000},
            "power": {"supply": "mains", "capacity_mwh": 0, "charge_pct": 100},
            "sensing": {"temperature": {"polling_rate": 50, "mode": "eco"}},
            "acting": {},
            "os": {"platform": "linux", "version": "4.14"}
        }))
        .unwrap()
    }
}
