use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::notify::{ChangeEvent, ChangeKind};
use super::{
    validate_name, NewResource, Resource, ResourceError, ResourceId, ResourceKind, ResourcePatch,
    ResourcePath,
};
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Node {
    resource: Resource,
    children: Vec<ResourceId>,
}

/// A single CSE resource tree.
///
/// Mutations are single-writer (`&mut self`); every mutation stamps the
/// tree's virtual clock, which callers advance with [`ResourceTree::advance_to`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceTree {
    clock: SimTime,
    root: ResourceId,
    nodes: BTreeMap<ResourceId, Node>,
    counters: BTreeMap<ResourceKind, u64>,
    event_seq: u64,
}

impl ResourceTree {
    /// Creates a tree whose CseBase root is named `cse_label`.
    pub fn new(cse_label: &str) -> Self {
        let mut tree = Self {
            clock: SimTime::ZERO,
            root: ResourceId(String::new()),
            nodes: BTreeMap::new(),
            counters: BTreeMap::new(),
            event_seq: 0,
        };
        let id = tree.mint_id(ResourceKind::CseBase);
        let root = Resource {
            id: id.clone(),
            name: cse_label.to_owned(),
            kind: ResourceKind::CseBase,
            parent_id: None,
            creation_time: SimTime::ZERO,
            last_modified_time: SimTime::ZERO,
            content: None,
            notification_target: None,
            labels: Vec::new(),
        };
        tree.nodes.insert(
            id.clone(),
            Node {
                resource: root,
                children: Vec::new(),
            },
        );
        tree.root = id;
        tree
    }

    pub fn cse_label(&self) -> &str {
        &self.nodes[&self.root].resource.name
    }

    pub fn root_id(&self) -> &ResourceId {
        &self.root
    }

    pub fn root_path(&self) -> ResourcePath {
        ResourcePath::root(self.cse_label())
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    /// Moves the clock forward; earlier times are ignored so the clock never
    /// runs backwards.
    pub fn advance_to(&mut self, t: SimTime) {
        self.clock = self.clock.max(t);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: &ResourceId) -> Option<&Resource> {
        self.nodes.get(id).map(|n| &n.resource)
    }

    pub fn children(&self, id: &ResourceId) -> &[ResourceId] {
        self.nodes.get(id).map_or(&[], |n| n.children.as_slice())
    }

    pub fn resources(&self) -> impl Iterator<Item = &Resource> {
        self.nodes.values().map(|n| &n.resource)
    }

    fn mint_id(&mut self, kind: ResourceKind) -> ResourceId {
        loop {
            let counter = self.counters.entry(kind).or_insert(0);
            *counter += 1;
            let id = ResourceId(format!("{}_{:04}", kind.id_prefix(), counter));
            if !self.nodes.contains_key(&id) {
                return id;
            }
        }
    }

    fn next_event_seq(&mut self) -> u64 {
        self.event_seq += 1;
        self.event_seq
    }

    fn find_child(&self, parent: &ResourceId, name: &str) -> Option<&ResourceId> {
        self.children(parent)
            .iter()
            .find(|c| self.nodes[*c].resource.name == name)
    }

    /// Latest content instance under `container`: greatest creation time,
    /// later insertion wins ties.
    pub fn latest_instance(&self, container: &ResourceId) -> Option<&ResourceId> {
        let mut best: Option<&ResourceId> = None;
        for child in self.children(container) {
            let res = &self.nodes[child].resource;
            if res.kind != ResourceKind::ContentInstance {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => res.creation_time >= self.nodes[b].resource.creation_time,
            };
            if better {
                best = Some(child);
            }
        }
        best
    }

    pub fn resolve_id(&self, path: &ResourcePath) -> Result<ResourceId, ResourceError> {
        if path.cse_label != self.cse_label() {
            return Err(ResourceError::NotFound(path.to_string()));
        }
        let mut current = &self.root;
        for seg in &path.segments {
            current = self
                .find_child(current, seg)
                .ok_or_else(|| ResourceError::NotFound(path.to_string()))?;
        }
        if path.is_latest() {
            let latest = self
                .latest_instance(current)
                .ok_or_else(|| ResourceError::NotFound(path.to_string()))?;
            return Ok(latest.clone());
        }
        Ok(current.clone())
    }

    pub fn path_of(&self, id: &ResourceId) -> Option<ResourcePath> {
        let mut segments = Vec::new();
        let mut current = self.nodes.get(id)?;
        while let Some(parent) = &current.resource.parent_id {
            segments.push(current.resource.name.clone());
            current = self.nodes.get(parent)?;
        }
        segments.reverse();
        Some(ResourcePath {
            cse_label: self.cse_label().to_owned(),
            segments,
            virtual_suffix: None,
        })
    }

    pub fn retrieve(&self, path: &ResourcePath) -> Result<&Resource, ResourceError> {
        let id = self.resolve_id(path)?;
        Ok(&self.nodes[&id].resource)
    }

    /// Ids of the subtree rooted at `id`, parent before children, children in
    /// insertion order.
    pub fn subtree(&self, id: &ResourceId) -> Vec<ResourceId> {
        let mut out = Vec::new();
        let mut stack = vec![id.clone()];
        while let Some(next) = stack.pop() {
            if let Some(node) = self.nodes.get(&next) {
                stack.extend(node.children.iter().rev().cloned());
                out.push(next);
            }
        }
        out
    }

    pub fn create(
        &mut self,
        parent: &ResourcePath,
        spec: NewResource,
    ) -> Result<(ResourcePath, ChangeEvent), ResourceError> {
        self.insert(parent, spec, None)
    }

    /// Creation that keeps a foreign creation timestamp (import and replica
    /// application). The last-modified time is still the current clock.
    pub(crate) fn create_preserving_time(
        &mut self,
        parent: &ResourcePath,
        spec: NewResource,
        creation_time: SimTime,
    ) -> Result<(ResourcePath, ChangeEvent), ResourceError> {
        self.insert(parent, spec, Some(creation_time))
    }

    fn insert(
        &mut self,
        parent: &ResourcePath,
        spec: NewResource,
        creation_time: Option<SimTime>,
    ) -> Result<(ResourcePath, ChangeEvent), ResourceError> {
        let parent_id = self.resolve_id(parent)?;
        let kind = spec
            .kind
            .ok_or_else(|| ResourceError::BadRequest("missing resource kind".into()))?;
        let parent_kind = self.nodes[&parent_id].resource.kind;
        if kind == ResourceKind::CseBase {
            return Err(ResourceError::BadRequest(
                "a tree has exactly one CSEBase".into(),
            ));
        }
        if !parent_kind.may_contain(kind) {
            return Err(ResourceError::BadRequest(format!(
                "{kind} may not be created under {parent_kind}"
            )));
        }
        let content = match (kind, spec.content) {
            (ResourceKind::ContentInstance, c) => Some(c.unwrap_or_default()),
            (_, None) => None,
            (_, Some(_)) => {
                return Err(ResourceError::BadRequest(format!(
                    "{kind} carries no content"
                )));
            }
        };
        match (kind, &spec.notification_target) {
            (ResourceKind::Subscription, None) => {
                return Err(ResourceError::BadRequest(
                    "subscription needs a notification target".into(),
                ));
            }
            (ResourceKind::Subscription, Some(_)) | (_, None) => {}
            (_, Some(_)) => {
                return Err(ResourceError::BadRequest(format!(
                    "{kind} carries no notification target"
                )));
            }
        }
        if let Some(name) = &spec.name {
            validate_name(name)?;
            if self.find_child(&parent_id, name).is_some() {
                return Err(ResourceError::BadRequest(format!(
                    "duplicate name `{name}` under {parent}"
                )));
            }
        }
        let (id, name) = loop {
            let id = self.mint_id(kind);
            match &spec.name {
                Some(name) => break (id, name.clone()),
                None if self.find_child(&parent_id, id.as_str()).is_none() => {
                    let name = id.as_str().to_owned();
                    break (id, name);
                }
                None => continue,
            }
        };

        let now = self.clock;
        let creation_time = creation_time.unwrap_or(now);
        let resource = Resource {
            id: id.clone(),
            name: name.clone(),
            kind,
            parent_id: Some(parent_id.clone()),
            creation_time,
            last_modified_time: now.max(creation_time),
            content,
            notification_target: spec.notification_target,
            labels: spec.labels,
        };
        self.nodes.insert(
            id.clone(),
            Node {
                resource: resource.clone(),
                children: Vec::new(),
            },
        );
        let parent_node = self.nodes.get_mut(&parent_id).expect("parent resolved");
        parent_node.children.push(id);
        parent_node.resource.last_modified_time = parent_node.resource.last_modified_time.max(now);

        let path = parent.without_suffix().child(&name);
        let event = ChangeEvent {
            seq: self.next_event_seq(),
            kind: ChangeKind::Created,
            path: path.clone(),
            parent_id: Some(parent_id),
            resource,
            prior_name: None,
            at: now,
        };
        Ok((path, event))
    }

    pub fn update(
        &mut self,
        path: &ResourcePath,
        patch: ResourcePatch,
    ) -> Result<(Resource, ChangeEvent), ResourceError> {
        let id = self.resolve_id(path)?;
        let current = &self.nodes[&id].resource;
        let kind = current.kind;
        if kind == ResourceKind::ContentInstance {
            return Err(ResourceError::BadRequest(
                "contentInstance is immutable".into(),
            ));
        }
        if patch.kind.is_some_and(|k| k != kind) {
            return Err(ResourceError::BadRequest(
                "resource kind cannot change".into(),
            ));
        }
        if patch.content.is_some() {
            return Err(ResourceError::BadRequest(format!(
                "{kind} carries no content"
            )));
        }
        if patch.notification_target.is_some() && kind != ResourceKind::Subscription {
            return Err(ResourceError::BadRequest(format!(
                "{kind} carries no notification target"
            )));
        }
        let mut prior_name = None;
        if let Some(name) = &patch.name {
            if name != &current.name {
                let Some(parent) = current.parent_id.clone() else {
                    return Err(ResourceError::BadRequest(
                        "the CSEBase cannot be renamed".into(),
                    ));
                };
                validate_name(name)?;
                if self.find_child(&parent, name).is_some() {
                    return Err(ResourceError::BadRequest(format!(
                        "duplicate name `{name}`"
                    )));
                }
                prior_name = Some(current.name.clone());
            }
        }

        let now = self.clock;
        let node = self.nodes.get_mut(&id).expect("resolved");
        let res = &mut node.resource;
        if let Some(name) = patch.name {
            res.name = name;
        }
        if let Some(labels) = patch.labels {
            res.labels = labels;
        }
        if let Some(target) = patch.notification_target {
            res.notification_target = Some(target);
        }
        res.last_modified_time = res.last_modified_time.max(now);
        let resource = res.clone();
        let parent_id = resource.parent_id.clone();
        let path = self.path_of(&id).expect("live resource has a path");
        let event = ChangeEvent {
            seq: self.next_event_seq(),
            kind: ChangeKind::Updated,
            path,
            parent_id,
            resource: resource.clone(),
            prior_name,
            at: now,
        };
        Ok((resource, event))
    }

    /// Removes the subtree at `path` and returns how many resources went away.
    pub fn delete(&mut self, path: &ResourcePath) -> Result<(usize, ChangeEvent), ResourceError> {
        let id = self.resolve_id(path)?;
        if id == self.root {
            return Err(ResourceError::BadRequest(
                "the CSEBase cannot be deleted".into(),
            ));
        }
        let resolved_path = self.path_of(&id).expect("live resource has a path");
        let doomed = self.subtree(&id);
        let resource = self.nodes[&id].resource.clone();
        let parent_id = resource.parent_id.clone().expect("non-root has a parent");
        for d in &doomed {
            self.nodes.remove(d);
        }
        let now = self.clock;
        let parent = self
            .nodes
            .get_mut(&parent_id)
            .expect("parent outlives child");
        parent.children.retain(|c| c != &id);
        parent.resource.last_modified_time = parent.resource.last_modified_time.max(now);
        let event = ChangeEvent {
            seq: self.next_event_seq(),
            kind: ChangeKind::Deleted,
            path: resolved_path,
            parent_id: Some(parent_id),
            resource,
            prior_name: None,
            at: now,
        };
        Ok((doomed.len(), event))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Checks structural invariants, returning the first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        let roots: Vec<_> = self
            .nodes
            .values()
            .filter(|n| n.resource.parent_id.is_none())
            .collect();
        if roots.len() != 1 || roots[0].resource.id != self.root {
            return Err(format!("expected exactly one root, found {}", roots.len()));
        }
        if roots[0].resource.kind != ResourceKind::CseBase {
            return Err("root is not a CSEBase".into());
        }
        let mut seen = BTreeSet::new();
        for (id, node) in &self.nodes {
            let res = &node.resource;
            if &res.id != id {
                return Err(format!("id mismatch for {id}"));
            }
            if res.last_modified_time < res.creation_time {
                return Err(format!("{id}: last_modified before creation"));
            }
            if res.kind == ResourceKind::CseBase && res.parent_id.is_some() {
                return Err(format!("{id}: nested CSEBase"));
            }
            if (res.kind == ResourceKind::ContentInstance) != res.content.is_some() {
                return Err(format!("{id}: content presence does not match kind"));
            }
            if (res.kind == ResourceKind::Subscription) != res.notification_target.is_some() {
                return Err(format!(
                    "{id}: notification target presence does not match kind"
                ));
            }
            if let Some(parent) = &res.parent_id {
                let pnode = self
                    .nodes
                    .get(parent)
                    .ok_or_else(|| format!("{id}: dangling parent {parent}"))?;
                if !pnode.resource.kind.may_contain(res.kind) {
                    return Err(format!(
                        "{id}: illegal nesting under {}",
                        pnode.resource.kind
                    ));
                }
                if !pnode.children.contains(id) {
                    return Err(format!("{id}: parent does not list it"));
                }
            }
            let mut names = BTreeSet::new();
            for child in &node.children {
                let cnode = self
                    .nodes
                    .get(child)
                    .ok_or_else(|| format!("{id}: dangling child {child}"))?;
                if cnode.resource.parent_id.as_ref() != Some(id) {
                    return Err(format!("{child}: parent link mismatch"));
                }
                if !names.insert(cnode.resource.name.as_str()) {
                    return Err(format!(
                        "{id}: duplicate child name {}",
                        cnode.resource.name
                    ));
                }
                if !seen.insert(child.clone()) {
                    return Err(format!("{child}: listed by two parents"));
                }
            }
        }
        if seen.len() + 1 != self.nodes.len() {
            return Err("unreachable resources present".into());
        }
        Ok(())
    }
}
