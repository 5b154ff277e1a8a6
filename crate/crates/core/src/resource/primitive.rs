use serde::{Deserialize, Serialize};

use super::notify::{ChangeEvent, NotificationBody};
use super::{
    NewResource, Resource, ResourceError, ResourceKind, ResourcePatch, ResourcePath, ResourceTree,
};

/// Data-plane operation (`op`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operation {
    Create,
    Retrieve,
    Update,
    Delete,
    Notify,
}

impl Operation {
    pub fn code(self) -> u16 {
        match self {
            Operation::Create => 1,
            Operation::Retrieve => 2,
            Operation::Update => 3,
            Operation::Delete => 4,
            Operation::Notify => 5,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(Operation::Create),
            2 => Some(Operation::Retrieve),
            3 => Some(Operation::Update),
            4 => Some(Operation::Delete),
            5 => Some(Operation::Notify),
            _ => None,
        }
    }
}

/// Structured request payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestContent {
    Resource(NewResource),
    Patch(ResourcePatch),
    Notification(NotificationBody),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestPrimitive {
    pub operation: Operation,
    pub to: ResourcePath,
    pub from: String,
    pub request_id: String,
    /// Only meaningful for `Create`.
    pub resource_kind: Option<ResourceKind>,
    pub content: Option<RequestContent>,
}

impl RequestPrimitive {
    pub fn create(to: ResourcePath, from: &str, rqi: &str, spec: NewResource) -> Self {
        Self {
            operation: Operation::Create,
            to,
            from: from.to_owned(),
            request_id: rqi.to_owned(),
            resource_kind: spec.kind,
            content: Some(RequestContent::Resource(spec)),
        }
    }

    pub fn retrieve(to: ResourcePath, from: &str, rqi: &str) -> Self {
        Self::bare(Operation::Retrieve, to, from, rqi)
    }

    pub fn update(to: ResourcePath, from: &str, rqi: &str, patch: ResourcePatch) -> Self {
        Self {
            content: Some(RequestContent::Patch(patch)),
            ..Self::bare(Operation::Update, to, from, rqi)
        }
    }

    pub fn delete(to: ResourcePath, from: &str, rqi: &str) -> Self {
        Self::bare(Operation::Delete, to, from, rqi)
    }

    fn bare(operation: Operation, to: ResourcePath, from: &str, rqi: &str) -> Self {
        Self {
            operation,
            to,
            from: from.to_owned(),
            request_id: rqi.to_owned(),
            resource_kind: None,
            content: None,
        }
    }

    /// Kind being created, from `ty` or the embedded resource.
    pub fn created_kind(&self) -> Option<ResourceKind> {
        self.resource_kind.or(match &self.content {
            Some(RequestContent::Resource(spec)) => spec.kind,
            _ => None,
        })
    }
}

/// Response status code (`rsc`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseStatus {
    Ok,
    Created,
    BadRequest,
    NotFound,
    FunctionNotEnabled,
    Conflict,
}

impl ResponseStatus {
    pub fn code(self) -> u16 {
        match self {
            ResponseStatus::Ok => 2000,
            ResponseStatus::Created => 2001,
            ResponseStatus::BadRequest => 4000,
            ResponseStatus::NotFound => 4004,
            ResponseStatus::FunctionNotEnabled => 4005,
            ResponseStatus::Conflict => 4009,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        [
            ResponseStatus::Ok,
            ResponseStatus::Created,
            ResponseStatus::BadRequest,
            ResponseStatus::NotFound,
            ResponseStatus::FunctionNotEnabled,
            ResponseStatus::Conflict,
        ]
        .into_iter()
        .find(|s| s.code() == code)
    }

    pub fn is_success(self) -> bool {
        matches!(self, ResponseStatus::Ok | ResponseStatus::Created)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseContent {
    Resource(Resource),
    Removed(usize),
    Message(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResponsePrimitive {
    pub request_id: String,
    pub status: ResponseStatus,
    pub content: Option<ResponseContent>,
}

impl ResponsePrimitive {
    pub fn new(request_id: &str, status: ResponseStatus, content: Option<ResponseContent>) -> Self {
        Self {
            request_id: request_id.to_owned(),
            status,
            content,
        }
    }

    pub fn error(request_id: &str, err: &ResourceError) -> Self {
        Self::new(
            request_id,
            err.status(),
            Some(ResponseContent::Message(err.to_string())),
        )
    }

    pub fn function_not_enabled(request_id: &str, what: &str) -> Self {
        Self::new(
            request_id,
            ResponseStatus::FunctionNotEnabled,
            Some(ResponseContent::Message(format!(
                "function not enabled: {what}"
            ))),
        )
    }

    pub fn resource(&self) -> Option<&Resource> {
        match &self.content {
            Some(ResponseContent::Resource(r)) => Some(r),
            _ => None,
        }
    }
}

/// Runs a data-plane request against a tree. Notify requests are accepted
/// without touching the tree; delivering them is the receiver's business.
pub fn execute(
    tree: &mut ResourceTree,
    req: &RequestPrimitive,
) -> (ResponsePrimitive, Vec<ChangeEvent>) {
    let rqi = req.request_id.as_str();
    let result = match req.operation {
        Operation::Create => {
            let spec = match &req.content {
                Some(RequestContent::Resource(spec)) => {
                    let mut spec = spec.clone();
                    if spec.kind.is_none() {
                        spec.kind = req.resource_kind;
                    }
                    if req.resource_kind.is_some() && spec.kind != req.resource_kind {
                        Err(ResourceError::BadRequest(
                            "ty disagrees with content".into(),
                        ))
                    } else {
                        Ok(spec)
                    }
                }
                None => req
                    .resource_kind
                    .map(NewResource::new)
                    .ok_or_else(|| ResourceError::BadRequest("create without resource".into())),
                Some(_) => Err(ResourceError::BadRequest(
                    "create expects a resource".into(),
                )),
            };
            spec.and_then(|spec| tree.create(&req.to, spec))
                .and_then(|(path, ev)| {
                    let res = tree.retrieve(&path)?.clone();
                    Ok((
                        ResponsePrimitive::new(
                            rqi,
                            ResponseStatus::Created,
                            Some(ResponseContent::Resource(res)),
                        ),
                        vec![ev],
                    ))
                })
        }
        Operation::Retrieve => tree.retrieve(&req.to).map(|res| {
            (
                ResponsePrimitive::new(
                    rqi,
                    ResponseStatus::Ok,
                    Some(ResponseContent::Resource(res.clone())),
                ),
                Vec::new(),
            )
        }),
        Operation::Update => {
            let patch = match &req.content {
                Some(RequestContent::Patch(p)) => Ok(p.clone()),
                None => Ok(ResourcePatch::default()),
                Some(_) => Err(ResourceError::BadRequest("update expects a patch".into())),
            };
            patch
                .and_then(|patch| tree.update(&req.to, patch))
                .map(|(res, ev)| {
                    (
                        ResponsePrimitive::new(
                            rqi,
                            ResponseStatus::Ok,
                            Some(ResponseContent::Resource(res)),
                        ),
                        vec![ev],
                    )
                })
        }
        Operation::Delete => tree.delete(&req.to).map(|(n, ev)| {
            (
                ResponsePrimitive::new(rqi, ResponseStatus::Ok, Some(ResponseContent::Removed(n))),
                vec![ev],
            )
        }),
        Operation::Notify => Ok((
            ResponsePrimitive::new(rqi, ResponseStatus::Ok, None),
            Vec::new(),
        )),
    };
    result.unwrap_or_else(|err| (ResponsePrimitive::error(rqi, &err), Vec::new()))
}
