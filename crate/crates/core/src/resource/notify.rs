use serde::{Deserialize, Serialize};

use super::primitive::{Operation, RequestContent, RequestPrimitive};
use super::{NotificationTarget, Resource, ResourceId, ResourceKind, ResourcePath, ResourceTree};
use crate::node::NodeId;
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Created,
    Updated,
    Deleted,
}

/// Emitted by every tree mutation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangeEvent {
    /// Per-tree monotone sequence number.
    pub seq: u64,
    pub kind: ChangeKind,
    /// Path of the changed resource (as it was before deletion).
    pub path: ResourcePath,
    pub parent_id: Option<ResourceId>,
    /// Snapshot after the change; for deletions, the removed resource.
    pub resource: Resource,
    /// Previous name when an update renamed the resource.
    pub prior_name: Option<String>,
    pub at: SimTime,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationBody {
    pub event: ChangeKind,
    /// The subscription that fired, on the originating tree.
    pub subscription: ResourcePath,
    pub resource: Resource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_name: Option<String>,
}

/// A notification ready to be sent to a subscription's target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NotifyPrimitive {
    pub request_id: String,
    /// Originating CSE label.
    pub from: String,
    pub target: NotificationTarget,
    pub body: NotificationBody,
}

impl NotifyPrimitive {
    pub fn to_request(&self) -> RequestPrimitive {
        RequestPrimitive {
            operation: Operation::Notify,
            to: self.target.path.clone(),
            from: self.from.clone(),
            request_id: self.request_id.clone(),
            resource_kind: None,
            content: Some(RequestContent::Notification(self.body.clone())),
        }
    }

    /// Rebuilds a notify from the request received at `receiver`.
    pub fn from_request(req: &RequestPrimitive, receiver: &NodeId) -> Option<Self> {
        match (&req.operation, &req.content) {
            (Operation::Notify, Some(RequestContent::Notification(body))) => Some(Self {
                request_id: req.request_id.clone(),
                from: req.from.clone(),
                target: NotificationTarget {
                    node: receiver.clone(),
                    path: req.to.clone(),
                },
                body: body.clone(),
            }),
            _ => None,
        }
    }
}

/// One notify per subscription that is a sibling of the changed resource,
/// in subscription creation order. Changes to subscriptions themselves do
/// not notify.
pub fn match_subscriptions(tree: &ResourceTree, event: &ChangeEvent) -> Vec<NotifyPrimitive> {
    if event.resource.kind == ResourceKind::Subscription {
        return Vec::new();
    }
    let Some(parent) = &event.parent_id else {
        return Vec::new();
    };
    tree.children(parent)
        .iter()
        .filter_map(|id| tree.get(id))
        .filter(|r| r.kind == ResourceKind::Subscription)
        .filter_map(|sub| {
            let target = sub.notification_target.clone()?;
            let subscription = tree.path_of(&sub.id)?;
            Some(NotifyPrimitive {
                request_id: format!("{}:{}:{}", tree.cse_label(), event.seq, sub.id),
                from: tree.cse_label().to_owned(),
                target,
                body: NotificationBody {
                    event: event.kind,
                    subscription,
                    resource: event.resource.clone(),
                    prior_name: event.prior_name.clone(),
                },
            })
        })
        .collect()
}
