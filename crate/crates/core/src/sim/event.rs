use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;
use serde_json::Value as Json;

use crate::phase::Phase;
use crate::value::Tick;

/// One structured record. Serializes as `tick, phase, kind`, then the detail
/// fields in key order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub tick: Tick,
    pub phase: Phase,
    pub kind: String,
    #[serde(flatten)]
    pub detail: BTreeMap<String, Json>,
}

impl Event {
    pub fn new(tick: Tick, phase: Phase, kind: &str) -> Self {
        Event {
            tick,
            phase,
            kind: kind.to_string(),
            detail: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).expect("event detail serializes");
        self.detail.insert(key.to_string(), v);
        self
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.detail.get(key).and_then(Json::as_str)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

pub fn write_ndjson(events: &[Event], mut out: impl Write) -> io::Result<()> {
    for e in events {
        out.write_all(e.to_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
