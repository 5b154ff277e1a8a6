//! Function image catalogue and per-worker image caches.
//!
//! Catalogue text format, one image per line:
//!
//! ```text
//! # image_id, function, version, size_bytes
//! iot-registration:1.0.0, registration, 1.0.0, 400000000
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::function::FunctionKind;
use crate::node::NodeId;
use crate::time::SimDuration;

/// Node.js web framework image size used for the default catalogue.
pub const DEFAULT_IMAGE_BYTES: u64 = 400_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionImage {
    pub image_id: String,
    pub function: FunctionKind,
    pub version: String,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("no image for {function} version {version}")]
    ImageNotFound {
        function: FunctionKind,
        version: String,
    },
    #[error("catalogue line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate catalogue entry {0}")]
    Duplicate(String),
}

/// Version selector for [`FunctionRegistry::lookup_image`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VersionSelector {
    Latest,
    Exact(String),
}

impl From<&str> for VersionSelector {
    fn from(s: &str) -> Self {
        if s == "latest" {
            VersionSelector::Latest
        } else {
            VersionSelector::Exact(s.to_owned())
        }
    }
}

/// Immutable catalogue of function images.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FunctionRegistry {
    images: Vec<FunctionImage>,
}

impl FunctionRegistry {
    pub fn new(images: Vec<FunctionImage>) -> Result<Self, RegistryError> {
        let mut ids = BTreeSet::new();
        let mut pairs = BTreeSet::new();
        for (i, img) in images.iter().enumerate() {
            semver::Version::parse(&img.version).map_err(|e| RegistryError::Parse {
                line: i + 1,
                reason: format!("version `{}`: {e}", img.version),
            })?;
            if !ids.insert(img.image_id.clone()) {
                return Err(RegistryError::Duplicate(img.image_id.clone()));
            }
            if !pairs.insert((img.function, img.version.clone())) {
                return Err(RegistryError::Duplicate(format!(
                    "{}@{}",
                    img.function, img.version
                )));
            }
        }
        Ok(Self { images })
    }

    /// One 400 MB image at version 1.0.0 for every function.
    pub fn default_catalogue() -> Self {
        let images = FunctionKind::ALL
            .into_iter()
            .map(|f| FunctionImage {
                image_id: format!("iot-{}:1.0.0", f.as_str().replace('_', "-")),
                function: f,
                version: "1.0.0".into(),
                size_bytes: DEFAULT_IMAGE_BYTES,
            })
            .collect();
        Self::new(images).expect("default catalogue is well formed")
    }

    pub fn parse(text: &str) -> Result<Self, RegistryError> {
        let mut images = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| RegistryError::Parse {
                line: i + 1,
                reason,
            };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let [image_id, function, version, size] = cols[..] else {
                return Err(err(format!("expected 4 fields, got {}", cols.len())));
            };
            images.push(FunctionImage {
                image_id: image_id.to_owned(),
                function: function.parse().map_err(|e| err(format!("{e}")))?,
                version: version.to_owned(),
                size_bytes: size
                    .parse()
                    .map_err(|e| err(format!("size `{size}`: {e}")))?,
            });
        }
        Self::new(images)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# image_id, function, version, size_bytes\n");
        for img in &self.images {
            out.push_str(&format!(
                "{}, {}, {}, {}\n",
                img.image_id, img.function, img.version, img.size_bytes
            ));
        }
        out
    }

    pub fn images(&self) -> &[FunctionImage] {
        &self.images
    }

    pub fn get(&self, image_id: &str) -> Option<&FunctionImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// Exact version match, or the greatest semantic version for `Latest`.
    pub fn lookup_image(
        &self,
        function: FunctionKind,
        version: impl Into<VersionSelector>,
    ) -> Result<&FunctionImage, RegistryError> {
        let selector = version.into();
        let candidates = self.images.iter().filter(|i| i.function == function);
        let found = match &selector {
            VersionSelector::Exact(v) => candidates.into_iter().find(|i| &i.version == v),
            VersionSelector::Latest => candidates.max_by_key(|i| {
                semver::Version::parse(&i.version).expect("validated at construction")
            }),
        };
        found.ok_or_else(|| RegistryError::ImageNotFound {
            function,
            version: match selector {
                VersionSelector::Latest => "latest".into(),
                VersionSelector::Exact(v) => v,
            },
        })
    }
}

/// Images present on one worker. Only grows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerCache {
    pub worker: NodeId,
    cached: BTreeSet<String>,
    transferred: BTreeMap<String, u64>,
}

impl WorkerCache {
    pub fn new(worker: NodeId) -> Self {
        Self {
            worker,
            cached: BTreeSet::new(),
            transferred: BTreeMap::new(),
        }
    }

    /// Marks an image as pre-installed; nothing is transferred.
    pub fn preseed(&mut self, image_id: &str) {
        self.cached.insert(image_id.to_owned());
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.cached.contains(image_id)
    }

    pub fn cached(&self) -> impl Iterator<Item = &str> {
        self.cached.iter().map(String::as_str)
    }

    /// Total bytes pulled over the network into this cache.
    pub fn bytes_transferred(&self) -> u64 {
        self.transferred.values().sum()
    }
}

/// Pulls `image` into `cache`. Warm images cost nothing; cold ones take
/// `size_bytes / bandwidth`.
pub fn pull_image(
    cache: &mut WorkerCache,
    image: &FunctionImage,
    bandwidth_bytes_per_s: f64,
) -> SimDuration {
    assert!(
        bandwidth_bytes_per_s > 0.0,
        "pull bandwidth must be positive"
    );
    if cache.contains(&image.image_id) {
        return SimDuration::ZERO;
    }
    cache.cached.insert(image.image_id.clone());
    cache
        .transferred
        .insert(image.image_id.clone(), image.size_bytes);
    SimDuration::transfer(image.size_bytes, bandwidth_bytes_per_s)
}
