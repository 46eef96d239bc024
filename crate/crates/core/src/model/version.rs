use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VersionError {
    #[error("invalid version {0:?}: expected dotted decimal components")]
    Version(String),
    #[error("invalid version range {0:?}")]
    Range(String),
}

/// Dotted decimal version such as `4.14` or `5.10.2`.
///
/// Trailing zero components do not change ordering: `4.14 == 4.14.0`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Version(Vec<u64>);

impl Version {
    pub fn parse(raw: &str) -> Result<Self, VersionError> {
        let raw = raw.trim();
        if raw.is_empty() {
            return Err(VersionError::Version(raw.to_string()));
        }
        raw.split('.')
            .map(|c| c.parse::<u64>().map_err(|_| VersionError::Version(raw.to_string())))
            .collect::<Result<Vec<_>, _>>()
            .map(Version)
    }

    pub fn components(&self) -> &[u64] {
        &self.0
    }

    fn trimmed(&self) -> &[u64] {
        let mut end = self.0.len();
        while end > 0 && self.0[end - 1] == 0 {
            end -= 1;
        }
        &self.0[..end]
    }

    /// Smallest version strictly above every version with this prefix.
    fn prefix_upper(&self) -> Version {
        let mut next = self.0.clone();
        if let Some(last) = next.last_mut() {
            *last += 1;
        }
        Version(next)
    }
}

impl PartialEq for Version {
    fn eq(&self, other: &Self) -> bool {
        self.trimmed() == other.trimmed()
    }
}

impl Eq for Version {}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        self.trimmed().cmp(other.trimmed())
    }
}

impl TryFrom<String> for Version {
    type Error = VersionError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Version::parse(&value)
    }
}

impl From<Version> for String {
    fn from(v: Version) -> Self {
        v.to_string()
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        f.write_str(&parts.join("."))
    }
}

/// Half-open version interval `[lower, upper)`; either bound may be open.
///
/// Accepted spellings: `*`, `4.x` / `4.14.x` (prefix), `4.14` (same as
/// `4.14.x`), and explicit bounds `>=4.0,<5.0`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VersionRange {
    spec: String,
    lower: Option<Version>,
    upper: Option<Version>,
}

impl VersionRange {
    pub fn any() -> Self {
        VersionRange {
            spec: "*".into(),
            lower: None,
            upper: None,
        }
    }

    pub fn parse(raw: &str) -> Result<Self, VersionError> {
        let spec = raw.trim().to_string();
        let bad = || VersionError::Range(spec.clone());
        if spec == "*" {
            return Ok(VersionRange::any());
        }
        if spec.contains(['<', '>']) {
            let mut lower = None;
            let mut upper = None;
            for part in spec.split(',').map(str::trim) {
                if let Some(v) = part.strip_prefix(">=") {
                    lower = Some(Version::parse(v).map_err(|_| bad())?);
                } else if let Some(v) = part.strip_prefix('<') {
                    upper = Some(Version::parse(v).map_err(|_| bad())?);
                } else {
                    return Err(bad());
                }
            }
            if let (Some(l), Some(u)) = (&lower, &upper) {
                if l >= u {
                    return Err(bad());
                }
            }
            return Ok(VersionRange { spec, lower, upper });
        }
        let prefix = spec.strip_suffix(".x").unwrap_or(&spec);
        let base = Version::parse(prefix).map_err(|_| bad())?;
        Ok(VersionRange {
            upper: Some(base.prefix_upper()),
            lower: Some(base),
            spec,
        })
    }

    pub fn contains(&self, v: &Version) -> bool {
        self.lower.as_ref().is_none_or(|l| v >= l) && self.upper.as_ref().is_none_or(|u| v < u)
    }

    pub fn overlaps(&self, other: &VersionRange) -> bool {
        // [a, b) and [c, d) intersect iff a < d and c < b
        let below = |lo: &Option<Version>, hi: &Option<Version>| match (lo, hi) {
            (Some(l), Some(h)) => l < h,
            _ => true,
        };
        below(&self.lower, &other.upper) && below(&other.lower, &self.upper)
    }
}

impl TryFrom<String> for VersionRange {
    type Error = VersionError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        VersionRange::parse(&value)
    }
}

impl From<VersionRange> for String {
    fn from(r: VersionRange) -> Self {
        r.spec
    }
}

impl fmt::Display for VersionRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.spec)
    }
}
