//! Resource-oriented service layer: the hierarchical CSE tree and the
//! primitives that operate on it.

mod notify;
mod path;
mod primitive;
mod tree;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::node::NodeId;
use crate::time::SimTime;

pub use notify::{match_subscriptions, ChangeEvent, ChangeKind, NotificationBody, NotifyPrimitive};
pub use path::{PathError, ResourcePath, VirtualSuffix, LATEST_SEGMENT};
pub use primitive::{
    execute, Operation, RequestContent, RequestPrimitive, ResponseContent, ResponsePrimitive,
    ResponseStatus,
};
pub use tree::ResourceTree;

/// The five resource types of the service layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    CseBase,
    Ae,
    Container,
    ContentInstance,
    Subscription,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 5] = [
        ResourceKind::CseBase,
        ResourceKind::Ae,
        ResourceKind::Container,
        ResourceKind::ContentInstance,
        ResourceKind::Subscription,
    ];

    /// Wire code (`ty`).
    pub fn code(self) -> u8 {
        match self {
            ResourceKind::CseBase => 1,
            ResourceKind::Ae => 2,
            ResourceKind::Container => 3,
            ResourceKind::ContentInstance => 4,
            ResourceKind::Subscription => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub(crate) fn id_prefix(self) -> &'static str {
        match self {
            ResourceKind::CseBase => "cb",
            ResourceKind::Ae => "ae",
            ResourceKind::Container => "cnt",
            ResourceKind::ContentInstance => "ci",
            ResourceKind::Subscription => "sub",
        }
    }

    /// Nesting legality table.
    pub fn may_contain(self, child: ResourceKind) -> bool {
        use ResourceKind::*;
        matches!(
            (self, child),
            (CseBase, Ae | Container | Subscription)
                | (Ae, Container | Subscription)
                | (Container, Container | ContentInstance | Subscription)
        )
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResourceKind::CseBase => "CSEBase",
            ResourceKind::Ae => "AE",
            ResourceKind::Container => "container",
            ResourceKind::ContentInstance => "contentInstance",
            ResourceKind::Subscription => "subscription",
        };
        f.write_str(s)
    }
}

/// Opaque per-tree resource identifier such as `ci_0001`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceId(String);

impl ResourceId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Where a subscription sends its notifications.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationTarget {
    pub node: NodeId,
    pub path: ResourcePath,
}

/// One node of the resource tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resource {
    pub id: ResourceId,
    pub name: String,
    pub kind: ResourceKind,
    pub parent_id: Option<ResourceId>,
    pub creation_time: SimTime,
    pub last_modified_time: SimTime,
    #[serde(
        default,
        with = "crate::serde_b64::opt",
        skip_serializing_if = "Option::is_none"
    )]
    pub content: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notification_target: Option<NotificationTarget>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

/// Client-supplied part of a resource on creation. A missing name is
/// replaced by the minted id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewResource {
    pub kind: Option<ResourceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    #[serde(
        default,
        with = "crate::serde_b64::opt",
        skip_serializing_if = "Option::is_none"
    )]
    pub content: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notification_target: Option<NotificationTarget>,
}

impl NewResource {
    pub fn new(kind: ResourceKind) -> Self {
        Self {
            kind: Some(kind),
            ..Self::default()
        }
    }

    pub fn ae(name: &str) -> Self {
        Self::new(ResourceKind::Ae).named(name)
    }

    pub fn container(name: &str) -> Self {
        Self::new(ResourceKind::Container).named(name)
    }

    pub fn content_instance(content: impl Into<Vec<u8>>) -> Self {
        Self {
            content: Some(content.into()),
            ..Self::new(ResourceKind::ContentInstance)
        }
    }

    pub fn subscription(name: &str, target: NotificationTarget) -> Self {
        Self {
            notification_target: Some(target),
            ..Self::new(ResourceKind::Subscription).named(name)
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.to_owned());
        self
    }

    pub fn with_labels<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.labels = labels.into_iter().map(Into::into).collect();
        self
    }
}

/// Partial update. `None` fields are left untouched.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourcePatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ResourceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(
        default,
        with = "crate::serde_b64::opt",
        skip_serializing_if = "Option::is_none"
    )]
    pub content: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notification_target: Option<NotificationTarget>,
}

impl ResourcePatch {
    pub fn labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            labels: Some(labels.into_iter().map(Into::into).collect()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResourceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("conflict: {0}")]
    Conflict(String),
}

impl ResourceError {
    pub fn status(&self) -> ResponseStatus {
        match self {
            ResourceError::NotFound(_) => ResponseStatus::NotFound,
            ResourceError::BadRequest(_) => ResponseStatus::BadRequest,
            ResourceError::Conflict(_) => ResponseStatus::Conflict,
        }
    }
}

pub(crate) fn validate_name(name: &str) -> Result<(), ResourceError> {
    if name.is_empty() {
        return Err(ResourceError::BadRequest("empty resource name".into()));
    }
    if name.contains('/') {
        return Err(ResourceError::BadRequest(format!(
            "name `{name}` contains '/'"
        )));
    }
    if name == LATEST_SEGMENT {
        return Err(ResourceError::BadRequest(format!(
            "name `{name}` is reserved"
        )));
    }
    if name.chars().any(char::is_control) {
        return Err(ResourceError::BadRequest(
            "name contains control characters".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_codes_round_trip() {
        for kind in ResourceKind::ALL {
            assert_eq!(ResourceKind::from_code(kind.code()), Some(kind));
        }
        assert_eq!(ResourceKind::from_code(0), None);
        assert_eq!(ResourceKind::from_code(6), None);
    }

    #[test]
    fn nesting_table_has_eight_legal_edges() {
        let legal = ResourceKind::ALL
            .iter()
            .flat_map(|p| ResourceKind::ALL.iter().map(move |c| (p, c)))
            .filter(|(p, c)| p.may_contain(**c))
            .count();
        assert_eq!(legal, 8);
        assert!(!ResourceKind::Ae.may_contain(ResourceKind::ContentInstance));
        assert!(ResourceKind::ALL
            .iter()
            .all(|p| !p.may_contain(ResourceKind::CseBase)));
    }

    #[test]
    fn names_are_validated() {
        assert!(validate_name("location").is_ok());
        assert!(validate_name("").is_err());
        assert!(validate_name("a/b").is_err());
        assert!(validate_name("la").is_err());
        assert!(validate_name("a\tb").is_err());
    }
}
