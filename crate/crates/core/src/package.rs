//! Configuration packages and their canonical byte encoding.
//!
//! Layout of an encoded package:
//!
//! ```text
//! CONFAB-PKG/1\n
//! digest: sha-256\n
//! section*            tag (4 ASCII bytes) + u32 BE length + payload
//!   PKID CMID DVID BUIL SNAP META INSN   (the body, in this order)
//!   CSUM               SHA-256 over header + body
//!   MAC_               HMAC-SHA-256 over header + body
//! ```
//!
//! Strings are UTF-8 with a u32 BE length prefix; integers are big-endian;
//! values carry a one-byte type tag.

use std::collections::BTreeSet;
use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::value::{FieldPath, Tick, Value};

pub const MAGIC: &[u8] = b"CONFAB-PKG/1\n";
pub const DIGEST_LINE: &[u8] = b"digest: sha-256\n";

/// Shared secret standing in for a signing PKI.
pub const DEFAULT_SHARED_SECRET: &[u8] = b"confab-local-cloud";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Expectation {
    Equals(Value),
    AtLeast(u8),
    Absent,
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::Equals(v) => write!(f, "= {v}"),
            Expectation::AtLeast(l) => write!(f, ">= {l}"),
            Expectation::Absent => f.write_str("absent"),
        }
    }
}

/// Subject of a verify instruction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "kebab-case")]
pub enum VerifySubject {
    Path(FieldPath),
    Service(String),
}

impl fmt::Display for VerifySubject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifySubject::Path(p) => write!(f, "{p}"),
            VerifySubject::Service(s) => write!(f, "service:{s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Instruction {
    Set { path: FieldPath, value: Value },
    Exec { command: String },
    Verify { subject: VerifySubject, expect: Expectation },
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::Set { path, value } => write!(f, "set {path} {}", value.render()),
            Instruction::Exec { command } => write!(f, "exec {command}"),
            Instruction::Verify { subject, expect } => write!(f, "verify {subject} {expect}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigurationArtifact {
    pub instructions: Vec<Instruction>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criticality {
    Low,
    Normal,
    Critical,
}

impl Criticality {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(b: u8) -> Option<Self> {
        [Criticality::Low, Criticality::Normal, Criticality::Critical].get(b as usize).copied()
    }
}

impl fmt::Display for Criticality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criticality::Low => "low",
            Criticality::Normal => "normal",
            Criticality::Critical => "critical",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShippingMetadata {
    pub required_charge_pct: u8,
    /// May the device pause its sensing/acting task to apply the package.
    pub interrupt_allowed: bool,
    pub criticality: Criticality,
    pub latest_shipping_time: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigurationPackage {
    pub package_id: String,
    pub commission_id: String,
    pub device_id: String,
    pub built_at: Tick,
    pub artifact: ConfigurationArtifact,
    pub metadata: ShippingMetadata,
    pub pre_snapshot_ref: String,
    /// Hex SHA-256 over the canonical header and body.
    pub checksum: String,
    /// Hex HMAC-SHA-256 over the same bytes.
    pub mac: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PackageError {
    #[error("malformed package: {0}")]
    Malformed(String),
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Corrupt { stored: String, computed: String },
    #[error("message authentication failed")]
    BadMac,
}

/// Fields fixed before sealing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnsealedPackage {
    pub package_id: String,
    pub commission_id: String,
    pub device_id: String,
    pub built_at: Tick,
    pub artifact: ConfigurationArtifact,
    pub metadata: ShippingMetadata,
    pub pre_snapshot_ref: String,
}

impl UnsealedPackage {
    pub fn seal(self, secret: &[u8]) -> ConfigurationPackage {
        let body = encode_body(&self);
        let checksum = hex::encode(Sha256::digest(&body));
        let mac = hex::encode(mac_of(secret, &body));
        ConfigurationPackage {
            package_id: self.package_id,
            commission_id: self.commission_id,
            device_id: self.device_id,
            built_at: self.built_at,
            artifact: self.artifact,
            metadata: self.metadata,
            pre_snapshot_ref: self.pre_snapshot_ref,
            checksum,
            mac,
        }
    }
}

fn mac_of(secret: &[u8], body: &[u8]) -> Vec<u8> {
    let mut m = <Hmac<Sha256> as KeyInit>::new_from_slice(secret).expect("hmac accepts any key length");
    m.update(body);
    m.finalize().into_bytes().to_vec()
}

impl ConfigurationPackage {
    fn unsealed(&self) -> UnsealedPackage {
        UnsealedPackage {
            package_id: self.package_id.clone(),
            commission_id: self.commission_id.clone(),
            device_id: self.device_id.clone(),
            built_at: self.built_at,
            artifact: self.artifact.clone(),
            metadata: self.metadata.clone(),
            pre_snapshot_ref: self.pre_snapshot_ref.clone(),
        }
    }

    pub fn canonical_body(&self) -> Vec<u8> {
        encode_body(&self.unsealed())
    }

    pub fn computed_checksum(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_body()))
    }

    pub fn verify_checksum(&self) -> Result<(), PackageError> {
        let computed = self.computed_checksum();
        if computed == self.checksum {
            Ok(())
        } else {
            Err(PackageError::Corrupt {
                stored: self.checksum.clone(),
                computed,
            })
        }
    }

    pub fn verify_mac(&self, secret: &[u8]) -> Result<(), PackageError> {
        let expected = hex::decode(&self.mac).map_err(|_| PackageError::BadMac)?;
        let mut m = <Hmac<Sha256> as KeyInit>::new_from_slice(secret).expect("hmac accepts any key length");
        m.update(&self.canonical_body());
        m.verify_slice(&expected).map_err(|_| PackageError::BadMac)
    }

    /// Full canonical bytes: body plus checksum and MAC trailer.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.canonical_body();
        let sum = hex::decode(&self.checksum).unwrap_or_default();
        let mac = hex::decode(&self.mac).unwrap_or_default();
        section(&mut out, b"CSUM", &sum);
        section(&mut out, b"MAC_", &mac);
        out
    }

    /// Parses canonical bytes and verifies the checksum (not the MAC, which
    /// needs the shared secret).
    pub fn decode(bytes: &[u8]) -> Result<ConfigurationPackage, PackageError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.expect_bytes(MAGIC)?;
        r.expect_bytes(DIGEST_LINE)?;
        let package_id = r.text_section(b"PKID")?;
        let commission_id = r.text_section(b"CMID")?;
        let device_id = r.text_section(b"DVID")?;
        let built_at = Reader::whole(r.section(b"BUIL")?).u64()?;
        let pre_snapshot_ref = r.text_section(b"SNAP")?;
        let metadata = {
            let mut m = Reader::whole(r.section(b"META")?);
            let required_charge_pct = m.u8()?;
            let interrupt_allowed = m.bool()?;
            let criticality = Criticality::from_code(m.u8()?).ok_or_else(|| malformed("criticality"))?;
            let latest_shipping_time = m.u64()?;
            m.finish()?;
            ShippingMetadata {
                required_charge_pct,
                interrupt_allowed,
                criticality,
                latest_shipping_time,
            }
        };
        let artifact = {
            let mut m = Reader::whole(r.section(b"INSN")?);
            let count = m.u32()?;
            let mut instructions = Vec::new();
            for _ in 0..count {
                instructions.push(m.instruction()?);
            }
            m.finish()?;
            ConfigurationArtifact { instructions }
        };
        let body_end = r.pos;
        let checksum = hex::encode(r.section(b"CSUM")?);
        let mac = hex::encode(r.section(b"MAC_")?);
        r.finish()?;
        let computed = hex::encode(Sha256::digest(&bytes[..body_end]));
        if computed != checksum {
            return Err(PackageError::Corrupt {
                stored: checksum,
                computed,
            });
        }
        let pkg = ConfigurationPackage {
            package_id,
            commission_id,
            device_id,
            built_at,
            artifact,
            metadata,
            pre_snapshot_ref,
            checksum,
            mac,
        };
        // Re-encoding must reproduce the input exactly.
        if pkg.canonical_body() != bytes[..body_end] {
            return Err(malformed("non-canonical encoding"));
        }
        Ok(pkg)
    }
}

fn malformed(what: &str) -> PackageError {
    PackageError::Malformed(what.to_string())
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_value(out: &mut Vec<u8>, v: &Value) {
    match v {
        Value::Bool(b) => {
            out.push(0);
            out.push(u8::from(*b));
        }
        Value::Int(i) => {
            out.push(1);
            out.extend_from_slice(&i.to_be_bytes());
        }
        Value::Text(s) => {
            out.push(2);
            put_str(out, s);
        }
        Value::Set(items) => {
            out.push(3);
            out.extend_from_slice(&(items.len() as u32).to_be_bytes());
            for item in items {
                put_str(out, item);
            }
        }
    }
}

fn put_instruction(out: &mut Vec<u8>, insn: &Instruction) {
    match insn {
        Instruction::Set { path, value } => {
            out.push(b's');
            put_str(out, path.as_str());
            put_value(out, value);
        }
        Instruction::Exec { command } => {
            out.push(b'x');
            put_str(out, command);
        }
        Instruction::Verify { subject, expect } => {
            out.push(b'v');
            match subject {
                VerifySubject::Path(p) => {
                    out.push(0);
                    put_str(out, p.as_str());
                }
                VerifySubject::Service(s) => {
                    out.push(1);
                    put_str(out, s);
                }
            }
            match expect {
                Expectation::Equals(v) => {
                    out.push(0);
                    put_value(out, v);
                }
                Expectation::AtLeast(l) => {
                    out.push(1);
                    out.push(*l);
                }
                Expectation::Absent => out.push(2),
            }
        }
    }
}

fn encode_body(p: &UnsealedPackage) -> Vec<u8> {
    let mut out = Vec::with_capacity(256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(DIGEST_LINE);
    section(&mut out, b"PKID", p.package_id.as_bytes());
    section(&mut out, b"CMID", p.commission_id.as_bytes());
    section(&mut out, b"DVID", p.device_id.as_bytes());
    section(&mut out, b"BUIL", &p.built_at.to_be_bytes());
    section(&mut out, b"SNAP", p.pre_snapshot_ref.as_bytes());
    let mut meta = Vec::new();
    meta.push(p.metadata.required_charge_pct);
    meta.push(u8::from(p.metadata.interrupt_allowed));
    meta.push(p.metadata.criticality.code());
    meta.extend_from_slice(&p.metadata.latest_shipping_time.to_be_bytes());
    section(&mut out, b"META", &meta);
    let mut insn = Vec::new();
    insn.extend_from_slice(&(p.artifact.instructions.len() as u32).to_be_bytes());
    for i in &p.artifact.instructions {
        put_instruction(&mut insn, i);
    }
    section(&mut out, b"INSN", &insn);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn whole(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PackageError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| malformed("truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn expect_bytes(&mut self, want: &[u8]) -> Result<(), PackageError> {
        if self.take(want.len())? == want {
            Ok(())
        } else {
            Err(malformed("bad header"))
        }
    }

    fn finish(&self) -> Result<(), PackageError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(malformed("trailing bytes"))
        }
    }

    fn u8(&mut self) -> Result<u8, PackageError> {
        Ok(self.take(1)?[0])
    }

    fn bool(&mut self) -> Result<bool, PackageError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(malformed("bool")),
        }
    }

    fn u32(&mut self) -> Result<u32, PackageError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PackageError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String, PackageError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("utf-8"))
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<&'a [u8], PackageError> {
        if self.take(4)? != tag {
            return Err(malformed(&format!("expected section {}", String::from_utf8_lossy(tag))));
        }
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn text_section(&mut self, tag: &[u8; 4]) -> Result<String, PackageError> {
        String::from_utf8(self.section(tag)?.to_vec()).map_err(|_| malformed("utf-8"))
    }

    fn value(&mut self) -> Result<Value, PackageError> {
        match self.u8()? {
            0 => Ok(Value::Bool(self.bool()?)),
            1 => Ok(Value::Int(self.u64()? as i64)),
            2 => Ok(Value::Text(self.str()?)),
            3 => {
                let n = self.u32()?;
                let mut items = BTreeSet::new();
                for _ in 0..n {
                    items.insert(self.str()?);
                }
                Ok(Value::Set(items))
            }
            _ => Err(malformed("value tag")),
        }
    }

    fn path(&mut self) -> Result<FieldPath, PackageError> {
        FieldPath::parse(&self.str()?).map_err(|e| malformed(&e.to_string()))
    }

    fn instruction(&mut self) -> Result<Instruction, PackageError> {
        match self.u8()? {
            b's' => Ok(Instruction::Set {
                path: self.path()?,
                value: self.value()?,
            }),
            b'x' => Ok(Instruction::Exec { command: self.str()? }),
            b'v' => {
                let subject = match self.u8()? {
                    0 => VerifySubject::Path(self.path()?),
                    1 => VerifySubject::Service(self.str()?),
                    _ => return Err(malformed("verify subject")),
                };
                let expect = match self.u8()? {
                    0 => Expectation::Equals(self.value()?),
                    1 => Expectation::AtLeast(self.u8()?),
                    2 => Expectation::Absent,
                    _ => return Err(malformed("expectation")),
                };
                Ok(Instruction::Verify { subject, expect })
            }
            _ => Err(malformed("instruction op")),
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn sample_package() -> ConfigurationPackage {
        let rate = FieldPath::parse("sensing/temperature/polling_rate").unwrap();
        UnsealedPackage {
            package_id: "pkg-0001".into(),
            commission_id: "c1".into(),
            device_id: "d1".into(),
            built_at: 3,
            artifact: ConfigurationArtifact {
                instructions: vec![
                    Instruction::Set {
                        path: rate.clone(),
                        value: Value::Int(10),
                    },
                    Instruction::Exec {
                        command: "service temp-sensing level 3".into(),
                    },
                    Instruction::Verify {
                        subject: VerifySubject::Path(rate),
                        expect: Expectation::Equals(Value::Int(10)),
                    },
                    Instruction::Verify {
                        subject: VerifySubject::Service("temp-sensing".into()),
                        expect: Expectation::AtLeast(3),
                    },
                    Instruction::Verify {
                        subject: VerifySubject::Service("legacy".into()),
                        expect: Expectation::Absent,
                    },
                    Instruction::Set {
                        path: FieldPath::parse("communication/protocols").unwrap(),
                        value: Value::Set(["mqtt".to_string(), "coap".to_string()].into()),
                    },
                ],
            },
            metadata: ShippingMetadata {
                required_charge_pct: 20,
                interrupt_allowed: false,
                criticality: Criticality::Normal,
                latest_shipping_time: 40,
            },
            pre_snapshot_ref: "snap-abc".into(),
        }
        .seal(DEFAULT_SHARED_SECRET)
    }
}
