//! Textual key/value codec for primitives.
//!
//! One `key=value` field per line, fixed field order, `\n` terminated. The
//! `pc` field carries compact JSON when it is single-line UTF-8, otherwise
//! `b64:` followed by standard base64. Encodings are byte-stable.
//!
//! ```text
//! op=1
//! to=MN-CSE/Pedestrians/CitizenB/location
//! fr=device-1
//! rqi=device-1-0001
//! ty=4
//! pc={"resource":{"kind":"content_instance","content":"..."}}
//! ```

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::resource::{
    Operation, RequestContent, RequestPrimitive, ResourceKind, ResourcePath, ResponseContent,
    ResponsePrimitive, ResponseStatus,
};

const B64_PREFIX: &str = "b64:";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("malformed line `{0}`")]
    Malformed(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("duplicate field `{0}`")]
    DuplicateField(String),
    #[error("missing field `{0}`")]
    Missing(&'static str),
    #[error("unknown op {0}")]
    UnknownOp(u16),
    #[error("bad value for `{field}`: {reason}")]
    BadValue { field: &'static str, reason: String },
}

/// Control-plane and admin operations sharing the primitive envelope.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ControlOp {
    ServiceRequest,
    SliceInstantiate,
    SliceRecord,
    SliceTerminate,
    StartFunction,
    StopFunction,
    Crash,
    OffloadRequest,
    BundleTransfer,
    SyncFinalize,
}

impl ControlOp {
    pub const ALL: [ControlOp; 10] = [
        ControlOp::ServiceRequest,
        ControlOp::SliceInstantiate,
        ControlOp::SliceRecord,
        ControlOp::SliceTerminate,
        ControlOp::StartFunction,
        ControlOp::StopFunction,
        ControlOp::Crash,
        ControlOp::OffloadRequest,
        ControlOp::BundleTransfer,
        ControlOp::SyncFinalize,
    ];

    pub fn code(self) -> u16 {
        match self {
            ControlOp::ServiceRequest => 10,
            ControlOp::SliceInstantiate => 11,
            ControlOp::SliceRecord => 12,
            ControlOp::SliceTerminate => 13,
            ControlOp::StartFunction => 20,
            ControlOp::StopFunction => 21,
            ControlOp::Crash => 22,
            ControlOp::OffloadRequest => 30,
            ControlOp::BundleTransfer => 31,
            ControlOp::SyncFinalize => 32,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.code() == code)
    }
}

/// Envelope for ops 10-13 (orchestration), 20-22 (worker admin) and 30-32
/// (offload). `to` is a node address; the payload is opaque bytes, usually
/// JSON.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControlPrimitive {
    pub op: ControlOp,
    pub to: String,
    pub from: String,
    pub request_id: String,
    pub payload: Option<Vec<u8>>,
}

impl ControlPrimitive {
    pub fn new(op: ControlOp, to: &str, from: &str, rqi: &str) -> Self {
        Self {
            op,
            to: to.to_owned(),
            from: from.to_owned(),
            request_id: rqi.to_owned(),
            payload: None,
        }
    }

    pub fn with_json<T: Serialize>(mut self, value: &T) -> Self {
        self.payload = Some(serde_json::to_vec(value).expect("payload serializes"));
        self
    }

    pub fn with_bytes(mut self, bytes: Vec<u8>) -> Self {
        self.payload = Some(bytes);
        self
    }

    pub fn json<T: DeserializeOwned>(&self) -> Result<T, WireError> {
        let bytes = self.payload.as_deref().ok_or(WireError::Missing("pc"))?;
        serde_json::from_slice(bytes).map_err(|e| WireError::BadValue {
            field: "pc",
            reason: e.to_string(),
        })
    }
}

struct Writer(String);

impl Writer {
    fn field(&mut self, key: &str, value: impl std::fmt::Display) {
        use std::fmt::Write;
        let _ = writeln!(self.0, "{key}={value}");
    }

    fn pc(&mut self, bytes: &[u8]) {
        self.field("pc", encode_pc(bytes));
    }
}

fn encode_pc(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) if !s.contains(['\n', '\r']) && !s.starts_with(B64_PREFIX) => s.to_owned(),
        _ => format!("{B64_PREFIX}{}", STANDARD.encode(bytes)),
    }
}

fn decode_pc(value: &str) -> Result<Vec<u8>, WireError> {
    match value.strip_prefix(B64_PREFIX) {
        Some(b64) => STANDARD.decode(b64).map_err(|e| WireError::BadValue {
            field: "pc",
            reason: e.to_string(),
        }),
        None => Ok(value.as_bytes().to_vec()),
    }
}

struct Fields<'a>(Vec<(&'a str, &'a str)>);

impl<'a> Fields<'a> {
    fn parse(text: &'a str, allowed: &[&str]) -> Result<Self, WireError> {
        let mut out: Vec<(&str, &str)> = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| WireError::Malformed(line.to_owned()))?;
            if !allowed.contains(&k) {
                return Err(WireError::UnknownField(k.to_owned()));
            }
            if out.iter().any(|(ek, _)| *ek == k) {
                return Err(WireError::DuplicateField(k.to_owned()));
            }
            out.push((k, v));
        }
        Ok(Self(out))
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        self.0.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn require(&self, key: &'static str) -> Result<&'a str, WireError> {
        self.get(key).ok_or(WireError::Missing(key))
    }

    fn int(&self, key: &'static str) -> Result<u16, WireError> {
        self.require(key)?
            .parse()
            .map_err(|e: std::num::ParseIntError| WireError::BadValue {
                field: key,
                reason: e.to_string(),
            })
    }
}

fn json_pc<T: DeserializeOwned>(value: &str) -> Result<T, WireError> {
    let bytes = decode_pc(value)?;
    serde_json::from_slice(&bytes).map_err(|e| WireError::BadValue {
        field: "pc",
        reason: e.to_string(),
    })
}

pub fn encode_request(req: &RequestPrimitive) -> String {
    let mut w = Writer(String::new());
    w.field("op", req.operation.code());
    w.field("to", &req.to);
    w.field("fr", &req.from);
    w.field("rqi", &req.request_id);
    if let Some(kind) = req.resource_kind {
        w.field("ty", kind.code());
    }
    if let Some(content) = &req.content {
        w.pc(&serde_json::to_vec(content).expect("content serializes"));
    }
    w.0
}

pub fn decode_request(text: &str) -> Result<RequestPrimitive, WireError> {
    let f = Fields::parse(text, &["op", "to", "fr", "rqi", "ty", "pc"])?;
    let code = f.int("op")?;
    let operation = Operation::from_code(code).ok_or(WireError::UnknownOp(code))?;
    let to: ResourcePath = f
        .require("to")?
        .parse()
        .map_err(|e: crate::resource::PathError| WireError::BadValue {
            field: "to",
            reason: e.to_string(),
        })?;
    let resource_kind = match f.get("ty") {
        None => None,
        Some(_) => {
            let ty = f.int("ty")?;
            Some(
                ResourceKind::from_code(ty as u8)
                    .filter(|_| ty <= 255)
                    .ok_or(WireError::BadValue {
                        field: "ty",
                        reason: format!("unknown resource type {ty}"),
                    })?,
            )
        }
    };
    let content: Option<RequestContent> = f.get("pc").map(json_pc).transpose()?;
    Ok(RequestPrimitive {
        operation,
        to,
        from: f.require("fr")?.to_owned(),
        request_id: f.require("rqi")?.to_owned(),
        resource_kind,
        content,
    })
}

pub fn encode_response(resp: &ResponsePrimitive) -> String {
    let mut w = Writer(String::new());
    w.field("rqi", &resp.request_id);
    w.field("rsc", resp.status.code());
    if let Some(content) = &resp.content {
        w.pc(&serde_json::to_vec(content).expect("content serializes"));
    }
    w.0
}

pub fn decode_response(text: &str) -> Result<ResponsePrimitive, WireError> {
    let f = Fields::parse(text, &["rqi", "rsc", "pc"])?;
    let rsc = f.int("rsc")?;
    let status = ResponseStatus::from_code(rsc).ok_or(WireError::BadValue {
        field: "rsc",
        reason: format!("unknown status {rsc}"),
    })?;
    let content: Option<ResponseContent> = f.get("pc").map(json_pc).transpose()?;
    Ok(ResponsePrimitive {
        request_id: f.require("rqi")?.to_owned(),
        status,
        content,
    })
}

pub fn encode_control(ctl: &ControlPrimitive) -> String {
    let mut w = Writer(String::new());
    w.field("op", ctl.op.code());
    w.field("to", &ctl.to);
    w.field("fr", &ctl.from);
    w.field("rqi", &ctl.request_id);
    if let Some(bytes) = &ctl.payload {
        w.pc(bytes);
    }
    w.0
}

pub fn decode_control(text: &str) -> Result<ControlPrimitive, WireError> {
    let f = Fields::parse(text, &["op", "to", "fr", "rqi", "pc"])?;
    let code = f.int("op")?;
    let op = ControlOp::from_code(code).ok_or(WireError::UnknownOp(code))?;
    Ok(ControlPrimitive {
        op,
        to: f.require("to")?.to_owned(),
        from: f.require("fr")?.to_owned(),
        request_id: f.require("rqi")?.to_owned(),
        payload: f.get("pc").map(decode_pc).transpose()?,
    })
}
