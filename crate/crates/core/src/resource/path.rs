use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Reserved trailing segment that addresses the latest content instance.
pub const LATEST_SEGMENT: &str = "la";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VirtualSuffix {
    Latest,
}

/// Structured address `cse_label/seg/.../seg[/la]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ResourcePath {
    pub cse_label: String,
    pub segments: Vec<String>,
    pub virtual_suffix: Option<VirtualSuffix>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("empty path")]
    Empty,
    #[error("empty segment in `{0}`")]
    EmptySegment(String),
}

impl ResourcePath {
    pub fn root(cse_label: impl Into<String>) -> Self {
        Self {
            cse_label: cse_label.into(),
            segments: Vec::new(),
            virtual_suffix: None,
        }
    }

    pub fn child(&self, name: &str) -> Self {
        let mut p = self.without_suffix();
        p.segments.push(name.to_owned());
        p
    }

    pub fn latest(&self) -> Self {
        Self {
            virtual_suffix: Some(VirtualSuffix::Latest),
            ..self.clone()
        }
    }

    pub fn is_latest(&self) -> bool {
        self.virtual_suffix == Some(VirtualSuffix::Latest)
    }

    pub fn without_suffix(&self) -> Self {
        Self {
            virtual_suffix: None,
            ..self.clone()
        }
    }

    pub fn is_root(&self) -> bool {
        self.segments.is_empty() && self.virtual_suffix.is_none()
    }

    pub fn parent(&self) -> Option<Self> {
        if self.virtual_suffix.is_some() {
            return Some(self.without_suffix());
        }
        let mut p = self.clone();
        p.segments.pop()?;
        Some(p)
    }

    pub fn name(&self) -> Option<&str> {
        self.segments.last().map(String::as_str)
    }

    /// `true` when `self` equals `other` or is one of its ancestors. Virtual
    /// suffixes on `other` are ignored.
    pub fn is_prefix_of(&self, other: &ResourcePath) -> bool {
        self.virtual_suffix.is_none()
            && self.cse_label == other.cse_label
            && other.segments.len() >= self.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a == b)
    }

    /// Re-anchors a path below `from` onto `to`, keeping the relative tail
    /// and any virtual suffix.
    pub fn rebase(&self, from: &ResourcePath, to: &ResourcePath) -> Option<ResourcePath> {
        if !from.is_prefix_of(self) {
            return None;
        }
        let mut segments = to.segments.clone();
        segments.extend_from_slice(&self.segments[from.segments.len()..]);
        Some(ResourcePath {
            cse_label: to.cse_label.clone(),
            segments,
            virtual_suffix: self.virtual_suffix,
        })
    }

    pub fn with_cse_label(&self, label: &str) -> Self {
        Self {
            cse_label: label.to_owned(),
            ..self.clone()
        }
    }
}

impl fmt::Display for ResourcePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.cse_label)?;
        for seg in &self.segments {
            write!(f, "/{seg}")?;
        }
        if self.is_latest() {
            write!(f, "/{LATEST_SEGMENT}")?;
        }
        Ok(())
    }
}

impl FromStr for ResourcePath {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim().trim_end_matches('/');
        if trimmed.is_empty() {
            return Err(PathError::Empty);
        }
        let mut parts = trimmed.split('/');
        let cse_label = parts.next().unwrap_or_default().to_owned();
        if cse_label.is_empty() {
            return Err(PathError::EmptySegment(s.to_owned()));
        }
        let mut segments: Vec<String> = Vec::new();
        for part in parts {
            if part.is_empty() {
                return Err(PathError::EmptySegment(s.to_owned()));
            }
            segments.push(part.to_owned());
        }
        let virtual_suffix = if segments.last().map(String::as_str) == Some(LATEST_SEGMENT) {
            segments.pop();
            Some(VirtualSuffix::Latest)
        } else {
            None
        };
        Ok(Self {
            cse_label,
            segments,
            virtual_suffix,
        })
    }
}

impl Serialize for ResourcePath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ResourcePath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}
