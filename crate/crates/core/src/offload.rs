//! Task offloading: exporting cloud subtrees, grafting them onto an edge
//! tree, and keeping the cloud mirror consistent afterwards.
//!
//! Two synchronization modes exist. `Eager` places a subscription under
//! every offloaded container on the edge and replays each notification on
//! the cloud mirror. `Lazy` leaves the mirror alone, redirects cloud-side
//! retrieves to the edge, and merges the edge subtree back when the slice
//! terminates.
//!
//! Bundle file format (tab separated, `\n` terminated lines):
//!
//! ```text
//! task_id  exported_at_ns  resource_count
//! source_path  ty  name  creation_time_ns  base64_content  labels_json
//! ...
//! ```

use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::node::NodeId;
use crate::resource::{
    ChangeEvent, ChangeKind, NewResource, NotificationTarget, NotifyPrimitive, ResourceError,
    ResourceId, ResourceKind, ResourcePatch, ResourcePath, ResourceTree,
};
use crate::time::SimTime;

/// Name of the subscription placed under each eagerly synced container.
pub const SYNC_SUBSCRIPTION_NAME: &str = "sync_sub";
/// Label carried by sync subscriptions.
pub const SYNC_LABEL: &str = "offload-sync";

/// A set of resources owned by one service on the cloud tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub root_path: ResourcePath,
    pub owner_service: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Eager,
    Lazy,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleRecord {
    pub source_path: ResourcePath,
    pub kind: ResourceKind,
    pub name: String,
    pub creation_time: SimTime,
    pub content: Option<Vec<u8>>,
    pub labels: Vec<String>,
}

/// A serialized task subtree, parent records before children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffloadBundle {
    pub task_id: String,
    pub exported_at: SimTime,
    pub resources: Vec<BundleRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SyncError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("task {0} is already offloaded")]
    AlreadyOffloaded(String),
    #[error("task {0} is not offloaded")]
    NotOffloaded(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("no binding for {0}")]
    UnknownBinding(String),
    #[error("stale notification {0}")]
    StaleNotify(String),
    #[error("task {0} is already bound")]
    AlreadyBound(String),
}

impl From<ResourceError> for SyncError {
    fn from(e: ResourceError) -> Self {
        match e {
            ResourceError::NotFound(s) => SyncError::NotFound(s),
            ResourceError::BadRequest(s) => SyncError::BadRequest(s),
            ResourceError::Conflict(s) => SyncError::Conflict(s),
        }
    }
}

impl OffloadBundle {
    pub fn len(&self) -> usize {
        self.resources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resources.is_empty()
    }

    /// Sum of content-instance payload sizes.
    pub fn content_bytes(&self) -> u64 {
        self.resources
            .iter()
            .filter_map(|r| r.content.as_ref())
            .map(|c| c.len() as u64)
            .sum()
    }

    pub fn encode(&self) -> String {
        let mut out = format!(
            "{}\t{}\t{}\n",
            self.task_id,
            self.exported_at.as_nanos(),
            self.resources.len()
        );
        for r in &self.resources {
            let content = r
                .content
                .as_deref()
                .map(|c| STANDARD.encode(c))
                .unwrap_or_default();
            let labels = serde_json::to_string(&r.labels).expect("labels serialize");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.source_path,
                r.kind.code(),
                r.name,
                r.creation_time.as_nanos(),
                content,
                labels
            ));
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self, SyncError> {
        let bad = |what: String| SyncError::BadRequest(format!("bundle: {what}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let h: Vec<&str> = header.split('\t').collect();
        let [task_id, exported_at, count] = h[..] else {
            return Err(bad(format!("header has {} fields", h.len())));
        };
        let exported_at = exported_at.parse::<u64>().map_err(|e| bad(e.to_string()))?;
        let count = count.parse::<usize>().map_err(|e| bad(e.to_string()))?;
        let mut resources = Vec::with_capacity(count);
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            let [path, ty, name, ct, content, labels] = f[..] else {
                return Err(bad(format!("record has {} fields", f.len())));
            };
            let kind = ty
                .parse::<u8>()
                .ok()
                .and_then(ResourceKind::from_code)
                .ok_or_else(|| bad(format!("type `{ty}`")))?;
            let content = if kind == ResourceKind::ContentInstance {
                Some(STANDARD.decode(content).map_err(|e| bad(e.to_string()))?)
            } else {
                None
            };
            resources.push(BundleRecord {
                source_path: path
                    .parse()
                    .map_err(|e: crate::resource::PathError| bad(e.to_string()))?,
                kind,
                name: name.to_owned(),
                creation_time: SimTime::from_nanos(
                    ct.parse()
                        .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                ),
                content,
                labels: serde_json::from_str(labels).map_err(|e| bad(e.to_string()))?,
            });
        }
        if resources.len() != count {
            return Err(bad(format!(
                "header says {count} records, found {}",
                resources.len()
            )));
        }
        Ok(Self {
            task_id: task_id.to_owned(),
            exported_at: SimTime::from_nanos(exported_at),
            resources,
        })
    }
}

/// Grafts a bundle onto `edge`, rewriting the CSE label to the edge's and
/// keeping intermediate segments. Missing intermediate segments are created
/// as containers. The tree is left untouched on error.
pub fn import_task(
    edge: &mut ResourceTree,
    bundle: &OffloadBundle,
) -> Result<ResourcePath, SyncError> {
    let root = bundle
        .resources
        .first()
        .ok_or_else(|| SyncError::BadRequest("empty bundle".into()))?;
    let source_label = root.source_path.cse_label.clone();
    if root.source_path.segments.is_empty() {
        return Err(SyncError::BadRequest("bundle root is a CSE".into()));
    }
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (i, rec) in bundle.resources.iter().enumerate() {
        if rec.source_path.cse_label != source_label || rec.source_path.is_latest() {
            return Err(SyncError::BadRequest(format!(
                "foreign path {}",
                rec.source_path
            )));
        }
        if rec.source_path.name() != Some(rec.name.as_str()) {
            return Err(SyncError::BadRequest(format!(
                "name mismatch at {}",
                rec.source_path
            )));
        }
        if i > 0 {
            let parent = rec
                .source_path
                .parent()
                .expect("non-root record has a parent");
            if !seen.contains(&parent.to_string()) {
                return Err(SyncError::BadRequest(format!(
                    "record {} precedes its parent",
                    rec.source_path
                )));
            }
        }
        seen.insert(rec.source_path.to_string());
    }

    let edge_label = edge.cse_label().to_owned();
    let source_root = root.source_path.clone();
    let target_root = source_root.with_cse_label(&edge_label);
    if edge.resolve_id(&target_root).is_ok() {
        return Err(SyncError::Conflict(format!("{target_root} already exists")));
    }

    let mut work = edge.clone();
    let graft_time = work.now().min(root.creation_time);
    let mut ancestor = ResourcePath::root(&edge_label);
    for seg in &target_root.segments[..target_root.segments.len() - 1] {
        let next = ancestor.child(seg);
        if work.resolve_id(&next).is_err() {
            work.create_preserving_time(&ancestor, NewResource::container(seg), graft_time)?;
        }
        ancestor = next;
    }
    for rec in &bundle.resources {
        let target = rec
            .source_path
            .rebase(&source_root, &target_root)
            .expect("validated prefix");
        let parent = target.parent().expect("non-root target");
        let spec = NewResource {
            kind: Some(rec.kind),
            name: Some(rec.name.clone()),
            labels: rec.labels.clone(),
            content: rec.content.clone(),
            notification_target: None,
        };
        work.create_preserving_time(&parent, spec, rec.creation_time)
            .map_err(|e| match e {
                ResourceError::BadRequest(s) if s.starts_with("duplicate") => {
                    SyncError::Conflict(s)
                }
                other => other.into(),
            })?;
    }
    *edge = work;
    Ok(target_root)
}

/// Creates a sync subscription under every container in the subtree at
/// `edge_root`. Returns the paths of the subscribed containers.
pub fn subscribe_containers(
    edge: &mut ResourceTree,
    edge_root: &ResourcePath,
    cloud_root: &ResourcePath,
    cloud_node: &NodeId,
) -> Result<Vec<ResourcePath>, SyncError> {
    let root_id = edge.resolve_id(edge_root)?;
    let containers: Vec<ResourcePath> = edge
        .subtree(&root_id)
        .iter()
        .filter(|id| {
            edge.get(id)
                .is_some_and(|r| r.kind == ResourceKind::Container)
        })
        .filter_map(|id| edge.path_of(id))
        .collect();
    for path in &containers {
        subscribe_one(edge, path, edge_root, cloud_root, cloud_node)?;
    }
    Ok(containers)
}

fn subscribe_one(
    edge: &mut ResourceTree,
    container: &ResourcePath,
    edge_root: &ResourcePath,
    cloud_root: &ResourcePath,
    cloud_node: &NodeId,
) -> Result<ChangeEvent, SyncError> {
    let target = NotificationTarget {
        node: cloud_node.clone(),
        path: container
            .rebase(edge_root, cloud_root)
            .expect("container lies in the root"),
    };
    let spec = NewResource::subscription(SYNC_SUBSCRIPTION_NAME, target).with_labels([SYNC_LABEL]);
    Ok(edge.create(container, spec)?.1)
}

fn is_sync_subscription(tree: &ResourceTree, id: &ResourceId) -> bool {
    tree.get(id).is_some_and(|r| {
        r.kind == ResourceKind::Subscription
            && r.name == SYNC_SUBSCRIPTION_NAME
            && r.labels.iter().any(|l| l == SYNC_LABEL)
    })
}

/// One eagerly synced subtree as seen from the edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyncRoot {
    pub task_id: String,
    pub edge_root: ResourcePath,
    pub cloud_root: ResourcePath,
    pub cloud_node: NodeId,
}

/// Edge-side helper that keeps one sync subscription under every container
/// of each watched subtree, including containers created after setup.
#[derive(Clone, Debug, Default)]
pub struct EdgeSyncAgent {
    roots: Vec<SyncRoot>,
}

impl EdgeSyncAgent {
    pub fn watch(&mut self, root: SyncRoot) {
        self.roots.retain(|r| r.task_id != root.task_id);
        self.roots.push(root);
    }

    pub fn unwatch(&mut self, task_id: &str) {
        self.roots.retain(|r| r.task_id != task_id);
    }

    pub fn roots(&self) -> &[SyncRoot] {
        &self.roots
    }

    /// Reacts to an edge-side change. Returns the events of any subscription
    /// maintenance it performed.
    pub fn observe(&self, tree: &mut ResourceTree, event: &ChangeEvent) -> Vec<ChangeEvent> {
        if event.resource.kind != ResourceKind::Container {
            return Vec::new();
        }
        let Some(root) = self
            .roots
            .iter()
            .find(|r| r.edge_root.is_prefix_of(&event.path))
        else {
            return Vec::new();
        };
        match event.kind {
            ChangeKind::Created => subscribe_one(
                tree,
                &event.path,
                &root.edge_root,
                &root.cloud_root,
                &root.cloud_node,
            )
            .map(|ev| vec![ev])
            .unwrap_or_default(),
            ChangeKind::Updated if event.prior_name.is_some() => {
                retarget_subscriptions(tree, &event.path, root)
            }
            _ => Vec::new(),
        }
    }
}

fn retarget_subscriptions(
    tree: &mut ResourceTree,
    renamed: &ResourcePath,
    root: &SyncRoot,
) -> Vec<ChangeEvent> {
    let Ok(top) = tree.resolve_id(renamed) else {
        return Vec::new();
    };
    let subs: Vec<(ResourcePath, ResourcePath)> = tree
        .subtree(&top)
        .into_iter()
        .filter(|id| is_sync_subscription(tree, id))
        .filter_map(|id| {
            let path = tree.path_of(&id)?;
            let container = path.parent()?;
            Some((path, container.rebase(&root.edge_root, &root.cloud_root)?))
        })
        .collect();
    let mut events = Vec::new();
    for (sub, cloud_path) in subs {
        let patch = ResourcePatch {
            notification_target: Some(NotificationTarget {
                node: root.cloud_node.clone(),
                path: cloud_path,
            }),
            ..Default::default()
        };
        if let Ok((_, ev)) = tree.update(&sub, patch) {
            events.push(ev);
        }
    }
    events
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncStats {
    pub notifications_sent: u64,
    pub notifications_applied: u64,
    pub duplicates: u64,
    pub stale: u64,
    pub dropped: u64,
    pub redirects_served: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyncBinding {
    pub task_id: String,
    pub mode: SyncMode,
    pub edge: NodeId,
    pub edge_root: ResourcePath,
    pub cloud_mirror_root: ResourcePath,
    pub stats: SyncStats,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub task_id: String,
    pub synced_resources: usize,
    pub created: usize,
    pub updated: usize,
    pub deleted: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AppliedChange {
    Created(ResourcePath),
    Updated(ResourcePath),
    Deleted { path: ResourcePath, removed: usize },
    Duplicate,
}

#[derive(Clone, Debug)]
struct OffloadRecord {
    task: Task,
    edge: Option<NodeId>,
    edge_root: Option<ResourcePath>,
}

/// Cloud-side offload and synchronization state.
#[derive(Clone, Debug, Default)]
pub struct OffloadSync {
    offloaded: BTreeMap<String, OffloadRecord>,
    bindings: BTreeMap<String, SyncBinding>,
    applied: BTreeSet<String>,
    unbound_notifies: u64,
}

impl OffloadSync {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_offloaded(&self, task_id: &str) -> bool {
        self.offloaded.contains_key(task_id)
    }

    pub fn binding(&self, task_id: &str) -> Option<&SyncBinding> {
        self.bindings.get(task_id)
    }

    pub fn bindings(&self) -> impl Iterator<Item = &SyncBinding> {
        self.bindings.values()
    }

    /// Edge path of an imported task.
    pub fn edge_root(&self, task_id: &str) -> Option<&ResourcePath> {
        self.offloaded.get(task_id)?.edge_root.as_ref()
    }

    pub fn unbound_notifies(&self) -> u64 {
        self.unbound_notifies
    }

    /// Serializes the task subtree. Subscriptions are left behind; the cloud
    /// copy stays in place as the mirror.
    pub fn export_task(
        &mut self,
        cloud: &ResourceTree,
        task: &Task,
    ) -> Result<OffloadBundle, SyncError> {
        if self.offloaded.contains_key(&task.task_id) {
            return Err(SyncError::AlreadyOffloaded(task.task_id.clone()));
        }
        if task.task_id.is_empty() || task.task_id.contains(['\t', '\n']) {
            return Err(SyncError::BadRequest(format!("task id `{}`", task.task_id)));
        }
        let root = cloud.resolve_id(&task.root_path)?;
        let kind = cloud.get(&root).expect("resolved").kind;
        if !matches!(kind, ResourceKind::Ae | ResourceKind::Container) {
            return Err(SyncError::BadRequest(format!("task root is a {kind}")));
        }
        let resources = cloud
            .subtree(&root)
            .iter()
            .filter_map(|id| cloud.get(id))
            .filter(|r| r.kind != ResourceKind::Subscription)
            .map(|r| BundleRecord {
                source_path: cloud.path_of(&r.id).expect("live resource"),
                kind: r.kind,
                name: r.name.clone(),
                creation_time: r.creation_time,
                content: r.content.clone(),
                labels: r.labels.clone(),
            })
            .collect();
        self.offloaded.insert(
            task.task_id.clone(),
            OffloadRecord {
                task: task.clone(),
                edge: None,
                edge_root: None,
            },
        );
        Ok(OffloadBundle {
            task_id: task.task_id.clone(),
            exported_at: cloud.now(),
            resources,
        })
    }

    /// Forgets an export whose import failed.
    pub fn abort_export(&mut self, task_id: &str) {
        if !self.bindings.contains_key(task_id) {
            self.offloaded.remove(task_id);
        }
    }

    pub fn confirm_import(
        &mut self,
        task_id: &str,
        edge: &NodeId,
        edge_root: ResourcePath,
    ) -> Result<(), SyncError> {
        let rec = self
            .offloaded
            .get_mut(task_id)
            .ok_or_else(|| SyncError::NotOffloaded(task_id.to_owned()))?;
        rec.edge = Some(edge.clone());
        rec.edge_root = Some(edge_root);
        Ok(())
    }

    fn imported(&self, task_id: &str) -> Result<(&Task, &NodeId, &ResourcePath), SyncError> {
        let rec = self
            .offloaded
            .get(task_id)
            .ok_or_else(|| SyncError::NotOffloaded(task_id.to_owned()))?;
        match (&rec.edge, &rec.edge_root) {
            (Some(edge), Some(root)) => Ok((&rec.task, edge, root)),
            _ => Err(SyncError::NotFound(format!(
                "task {task_id} has not been imported"
            ))),
        }
    }

    /// Subscribes every offloaded container on the edge to its mirror.
    pub fn setup_eager_sync(
        &mut self,
        edge_tree: &mut ResourceTree,
        task_id: &str,
        cloud_node: &NodeId,
    ) -> Result<SyncBinding, SyncError> {
        if self.bindings.contains_key(task_id) {
            return Err(SyncError::AlreadyBound(task_id.to_owned()));
        }
        let (task, edge, edge_root) = self.imported(task_id)?;
        let (cloud_root, edge, edge_root) =
            (task.root_path.clone(), edge.clone(), edge_root.clone());
        subscribe_containers(edge_tree, &edge_root, &cloud_root, cloud_node)?;
        let binding = SyncBinding {
            task_id: task_id.to_owned(),
            mode: SyncMode::Eager,
            edge,
            edge_root,
            cloud_mirror_root: cloud_root,
            stats: SyncStats::default(),
        };
        self.bindings.insert(task_id.to_owned(), binding.clone());
        Ok(binding)
    }

    /// Starts serving cloud-side retrieves under the task root from the edge.
    pub fn register_redirect(&mut self, task_id: &str) -> Result<SyncBinding, SyncError> {
        if self.bindings.contains_key(task_id) {
            return Err(SyncError::AlreadyBound(task_id.to_owned()));
        }
        let (task, edge, edge_root) = self.imported(task_id)?;
        let binding = SyncBinding {
            task_id: task_id.to_owned(),
            mode: SyncMode::Lazy,
            edge: edge.clone(),
            edge_root: edge_root.clone(),
            cloud_mirror_root: task.root_path.clone(),
            stats: SyncStats::default(),
        };
        self.bindings.insert(task_id.to_owned(), binding.clone());
        Ok(binding)
    }

    /// Edge and edge path that should serve a cloud retrieve, if the path
    /// falls under a lazily bound task.
    pub fn redirect_for(&mut self, path: &ResourcePath) -> Option<(NodeId, ResourcePath)> {
        let binding = self
            .bindings
            .values_mut()
            .find(|b| b.mode == SyncMode::Lazy && b.cloud_mirror_root.is_prefix_of(path))?;
        binding.stats.redirects_served += 1;
        let edge_path = path.rebase(&binding.cloud_mirror_root, &binding.edge_root)?;
        Some((binding.edge.clone(), edge_path))
    }

    /// Rejects cloud-originated writes that would touch an offloaded subtree.
    /// `target` is the request target: the parent for creates, the resource
    /// itself for updates and deletes.
    pub fn guard_cloud_write(
        &self,
        target: &ResourcePath,
        is_create: bool,
    ) -> Result<(), SyncError> {
        let t = target.without_suffix();
        for rec in self.offloaded.values() {
            let root = &rec.task.root_path;
            let hits = root.is_prefix_of(&t) || (!is_create && t.is_prefix_of(root));
            if hits {
                return Err(SyncError::Conflict(format!(
                    "{target} is owned by the edge while task {} is offloaded",
                    rec.task.task_id
                )));
            }
        }
        Ok(())
    }

    pub fn record_sent(&mut self, task_id: &str) {
        if let Some(b) = self.bindings.get_mut(task_id) {
            b.stats.notifications_sent += 1;
        }
    }

    pub fn record_dropped(&mut self, target: &ResourcePath) {
        if let Some(b) = self.binding_for_mut(target) {
            b.stats.dropped += 1;
        }
    }

    fn binding_for_mut(&mut self, cloud_path: &ResourcePath) -> Option<&mut SyncBinding> {
        self.bindings
            .values_mut()
            .find(|b| b.cloud_mirror_root.is_prefix_of(cloud_path))
    }

    /// Task whose cloud root covers `cloud_path`.
    pub fn task_for_cloud_path(&self, cloud_path: &ResourcePath) -> Option<&str> {
        self.bindings
            .values()
            .find(|b| b.cloud_mirror_root.is_prefix_of(cloud_path))
            .map(|b| b.task_id.as_str())
    }

    /// Replays an edge notification on the cloud mirror. Replays of an
    /// already-seen request id are no-ops.
    pub fn apply_notification(
        &mut self,
        cloud: &mut ResourceTree,
        notify: &NotifyPrimitive,
    ) -> Result<(AppliedChange, Vec<ChangeEvent>), SyncError> {
        let target = notify.target.path.clone();
        let Some(binding) = self.bindings.get_mut(
            &self
                .bindings
                .values()
                .find(|b| b.cloud_mirror_root.is_prefix_of(&target))
                .map(|b| b.task_id.clone())
                .unwrap_or_default(),
        ) else {
            self.unbound_notifies += 1;
            return Err(SyncError::UnknownBinding(target.to_string()));
        };
        if !self.applied.insert(notify.request_id.clone()) {
            binding.stats.duplicates += 1;
            return Ok((AppliedChange::Duplicate, Vec::new()));
        }
        let result = replay(cloud, &target, notify);
        match &result {
            Ok(_) => binding.stats.notifications_applied += 1,
            Err(SyncError::StaleNotify(_)) => binding.stats.stale += 1,
            Err(_) => {}
        }
        result
    }

    /// Merges the edge subtree into the mirror and closes the binding.
    pub fn finalize_on_terminate(
        &mut self,
        task_id: &str,
        cloud: &mut ResourceTree,
        edge: &ResourceTree,
    ) -> Result<(SyncReport, Vec<ChangeEvent>), SyncError> {
        let binding = self
            .bindings
            .get(task_id)
            .ok_or_else(|| SyncError::UnknownBinding(task_id.to_owned()))?
            .clone();
        let edge_id = edge.resolve_id(&binding.edge_root)?;
        let mirror_id = cloud.resolve_id(&binding.cloud_mirror_root)?;
        let mut merge = Merge {
            cloud,
            edge,
            counts: SyncReport {
                task_id: task_id.to_owned(),
                ..Default::default()
            },
            events: Vec::new(),
        };
        merge.node(&mirror_id, &edge_id)?;
        let Merge {
            mut counts, events, ..
        } = merge;
        counts.synced_resources = counts.created + counts.updated + counts.deleted;
        self.bindings.remove(task_id);
        self.offloaded.remove(task_id);
        Ok((counts, events))
    }
}

fn replay(
    cloud: &mut ResourceTree,
    target: &ResourcePath,
    notify: &NotifyPrimitive,
) -> Result<(AppliedChange, Vec<ChangeEvent>), SyncError> {
    let stale = || SyncError::StaleNotify(notify.request_id.clone());
    let parent = cloud.resolve_id(target).map_err(|_| stale())?;
    let res = &notify.body.resource;
    let existing = |cloud: &ResourceTree, name: &str| {
        cloud
            .children(&parent)
            .iter()
            .find(|c| cloud.get(c).is_some_and(|r| r.name == name))
            .cloned()
    };
    match notify.body.event {
        ChangeKind::Created => {
            if existing(cloud, &res.name).is_some() {
                return Ok((AppliedChange::Duplicate, Vec::new()));
            }
            let spec = NewResource {
                kind: Some(res.kind),
                name: Some(res.name.clone()),
                labels: res.labels.clone(),
                content: res.content.clone(),
                notification_target: res.notification_target.clone(),
            };
            let (path, ev) = cloud.create_preserving_time(target, spec, res.creation_time)?;
            Ok((AppliedChange::Created(path), vec![ev]))
        }
        ChangeKind::Updated => {
            let old_name = notify.body.prior_name.as_deref().unwrap_or(&res.name);
            existing(cloud, old_name).ok_or_else(stale)?;
            let path = target.child(old_name);
            let patch = ResourcePatch {
                name: Some(res.name.clone()),
                labels: Some(res.labels.clone()),
                ..Default::default()
            };
            let (_, ev) = cloud.update(&path, patch)?;
            Ok((AppliedChange::Updated(target.child(&res.name)), vec![ev]))
        }
        ChangeKind::Deleted => {
            existing(cloud, &res.name).ok_or_else(stale)?;
            let path = target.child(&res.name);
            let (removed, ev) = cloud.delete(&path)?;
            Ok((AppliedChange::Deleted { path, removed }, vec![ev]))
        }
    }
}

struct Merge<'a> {
    cloud: &'a mut ResourceTree,
    edge: &'a ResourceTree,
    counts: SyncReport,
    events: Vec<ChangeEvent>,
}

impl Merge<'_> {
    fn synced_children(tree: &ResourceTree, id: &ResourceId) -> Vec<ResourceId> {
        tree.children(id)
            .iter()
            .filter(|c| {
                tree.get(c)
                    .is_some_and(|r| r.kind != ResourceKind::Subscription)
            })
            .cloned()
            .collect()
    }

    /// Keyed merge of one mirror node against its edge counterpart.
    fn node(&mut self, mirror: &ResourceId, edge: &ResourceId) -> Result<(), SyncError> {
        let edge_res = self.edge.get(edge).expect("edge node").clone();
        let mirror_path = self.cloud.path_of(mirror).expect("mirror node");
        let mirror_res = self.cloud.get(mirror).expect("mirror node");
        if mirror_res.labels != edge_res.labels && mirror_res.kind != ResourceKind::ContentInstance
        {
            let (_, ev) = self
                .cloud
                .update(&mirror_path, ResourcePatch::labels(edge_res.labels.clone()))?;
            self.events.push(ev);
            self.counts.updated += 1;
        }

        let edge_children = Self::synced_children(self.edge, edge);
        let mirror_children = Self::synced_children(self.cloud, mirror);

        // Content instances match on (creation time, content); everything
        // else matches on name and kind.
        let ci_key = |t: &ResourceTree, id: &ResourceId| {
            let r = t.get(id).expect("child");
            (r.creation_time, r.content.clone().unwrap_or_default())
        };
        let mut edge_cis: BTreeMap<(SimTime, Vec<u8>), usize> = BTreeMap::new();
        for id in &edge_children {
            if self.edge.get(id).expect("child").kind == ResourceKind::ContentInstance {
                *edge_cis.entry(ci_key(self.edge, id)).or_default() += 1;
            }
        }
        let mut recurse = Vec::new();
        let mut matched_names = BTreeSet::new();
        let mut remaining_cis = edge_cis.clone();
        for id in &mirror_children {
            let r = self.cloud.get(id).expect("child").clone();
            let keep = if r.kind == ResourceKind::ContentInstance {
                match remaining_cis.get_mut(&ci_key(self.cloud, id)) {
                    Some(n) if *n > 0 => {
                        *n -= 1;
                        true
                    }
                    _ => false,
                }
            } else {
                let counterpart = edge_children.iter().find(|e| {
                    self.edge
                        .get(e)
                        .is_some_and(|er| er.name == r.name && er.kind == r.kind)
                });
                if let Some(e) = counterpart {
                    recurse.push((id.clone(), e.clone()));
                    matched_names.insert(r.name.clone());
                    true
                } else {
                    false
                }
            };
            if !keep {
                let (removed, ev) = self.cloud.delete(&mirror_path.child(&r.name))?;
                self.events.push(ev);
                self.counts.deleted += removed;
            }
        }

        // CI creations need the unmatched multiset of edge keys.
        let mut mirror_cis: BTreeMap<(SimTime, Vec<u8>), usize> = BTreeMap::new();
        for (k, n) in &edge_cis {
            let left = remaining_cis.get(k).copied().unwrap_or(0);
            mirror_cis.insert(k.clone(), n - left);
        }
        for id in &edge_children {
            let r = self.edge.get(id).expect("child");
            if r.kind == ResourceKind::ContentInstance {
                let k = ci_key(self.edge, id);
                let already = mirror_cis.get_mut(&k).expect("counted");
                if *already > 0 {
                    *already -= 1;
                    continue;
                }
                self.copy(&mirror_path, id)?;
            } else if !matched_names.contains(&r.name) {
                self.copy(&mirror_path, id)?;
            }
        }
        for (m, e) in recurse {
            self.node(&m, &e)?;
        }
        Ok(())
    }

    fn copy(
        &mut self,
        mirror_parent: &ResourcePath,
        edge_id: &ResourceId,
    ) -> Result<(), SyncError> {
        let r = self.edge.get(edge_id).expect("edge node").clone();
        let spec = NewResource {
            kind: Some(r.kind),
            name: Some(r.name.clone()),
            labels: r.labels.clone(),
            content: r.content.clone(),
            notification_target: None,
        };
        let (path, ev) = self
            .cloud
            .create_preserving_time(mirror_parent, spec, r.creation_time)?;
        self.events.push(ev);
        self.counts.created += 1;
        for child in Self::synced_children(self.edge, edge_id) {
            self.copy(&path, &child)?;
        }
        Ok(())
    }
}

/// Canonical shape of a subtree for equality checks: ids and subscriptions
/// are ignored, content instances are ordered by creation time, other
/// children by name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubtreeShape {
    pub name: String,
    pub kind: ResourceKind,
    pub creation_time: SimTime,
    pub labels: Vec<String>,
    pub content: Option<Vec<u8>>,
    pub children: Vec<SubtreeShape>,
}

pub fn subtree_shape(tree: &ResourceTree, root: &ResourcePath) -> Option<SubtreeShape> {
    let id = tree.resolve_id(root).ok()?;
    Some(shape_of(tree, &id))
}

fn shape_of(tree: &ResourceTree, id: &ResourceId) -> SubtreeShape {
    let r = tree.get(id).expect("live id");
    let mut instances: Vec<(usize, SubtreeShape)> = Vec::new();
    let mut others: Vec<SubtreeShape> = Vec::new();
    for (i, c) in tree.children(id).iter().enumerate() {
        let child = tree.get(c).expect("child");
        match child.kind {
            ResourceKind::Subscription => {}
            ResourceKind::ContentInstance => instances.push((i, shape_of(tree, c))),
            _ => others.push(shape_of(tree, c)),
        }
    }
    instances.sort_by(|a, b| {
        a.1.creation_time
            .cmp(&b.1.creation_time)
            .then(a.0.cmp(&b.0))
    });
    others.sort_by(|a, b| a.name.cmp(&b.name));
    let mut children: Vec<SubtreeShape> = instances.into_iter().map(|(_, s)| s).collect();
    children.extend(others);
    SubtreeShape {
        name: r.name.clone(),
        kind: r.kind,
        creation_time: r.creation_time,
        labels: r.labels.clone(),
        content: r.content.clone(),
        children,
    }
}
