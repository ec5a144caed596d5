//! Hierarchical configuration store modeled after a Windows registry hive:
//! keys form a tree, each key holds named values, and both key segments and
//! value names compare case-insensitively while preserving the casing they
//! were first written with.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::types::PATH_SEP;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("malformed registry path: {0:?}")]
    MalformedPath(String),
    #[error("registry key not found: {0}")]
    KeyNotFound(String),
    #[error("stale registry key handle")]
    StaleHandle,
    #[error("copy source does not exist: {0}")]
    SourceMissing(String),
    #[error("copy destination already exists: {0}")]
    DestinationExists(String),
}

/// A registry key path such as `HKLM\SYSTEM\CurrentControlSet\Services`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegistryPath {
    segments: Vec<String>,
}

impl RegistryPath {
    pub fn parse(s: &str) -> Result<RegistryPath, RegistryError> {
        if s.is_empty() || s.starts_with(PATH_SEP) || s.ends_with(PATH_SEP) {
            return Err(RegistryError::MalformedPath(s.to_string()));
        }
        let segments: Vec<String> = s.split(PATH_SEP).map(str::to_string).collect();
        if segments.iter().any(|seg| seg.is_empty()) {
            return Err(RegistryError::MalformedPath(s.to_string()));
        }
        Ok(RegistryPath { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    /// Child path with one more segment.
    pub fn join(&self, segment: &str) -> RegistryPath {
        let mut segments = self.segments.clone();
        segments.push(segment.to_string());
        RegistryPath { segments }
    }
}

impl fmt::Display for RegistryPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("\\"))
    }
}

/// Payload of a registry value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValuePayload {
    Str(String),
    List(Vec<String>),
    Int(i64),
}

impl fmt::Display for ValuePayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValuePayload::Str(s) => write!(f, "str:{s}"),
            ValuePayload::List(items) => write!(f, "multi:{}", items.join(",")),
            ValuePayload::Int(n) => write!(f, "int:{n}"),
        }
    }
}

/// Handle to an open key. Handles stay valid until their key is deleted;
/// key slots are never reused, so a deleted key's handles go stale forever.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyHandle(usize);

#[derive(Debug, Clone)]
struct ValueCell {
    /// Casing from the first write; overwrites keep it.
    display_name: String,
    payload: ValuePayload,
}

#[derive(Debug, Clone)]
struct KeyNode {
    /// Casing from the first create.
    display_name: String,
    /// Lowercased child segment -> node index.
    children: BTreeMap<String, usize>,
    /// Lowercased value name -> cell.
    values: BTreeMap<String, ValueCell>,
}

impl KeyNode {
    fn new(display_name: String) -> KeyNode {
        KeyNode {
            display_name,
            children: BTreeMap::new(),
            values: BTreeMap::new(),
        }
    }
}

/// The store itself. Node 0 is the anonymous root above the hive segments.
#[derive(Debug, Clone)]
pub struct Registry {
    nodes: Vec<Option<KeyNode>>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new()
    }
}

impl Registry {
    pub fn new() -> Registry {
        Registry {
            nodes: vec![Some(KeyNode::new(String::new()))],
        }
    }

    fn node(&self, idx: usize) -> Option<&KeyNode> {
        self.nodes.get(idx).and_then(|n| n.as_ref())
    }

    fn walk(&self, path: &RegistryPath) -> Option<usize> {
        let mut cur = 0usize;
        for seg in path.segments() {
            let node = self.node(cur)?;
            cur = *node.children.get(&seg.to_lowercase())?;
        }
        Some(cur)
    }

    /// Opens a key if it exists.
    pub fn open_key(&self, path: &RegistryPath) -> Option<KeyHandle> {
        self.walk(path).map(KeyHandle)
    }

    pub fn key_exists(&self, path: &RegistryPath) -> bool {
        self.walk(path).is_some()
    }

    /// Creates the key (and any missing parents), or opens it if it already
    /// exists. Creation is idempotent.
    pub fn create_key(&mut self, path: &RegistryPath) -> KeyHandle {
        let mut cur = 0usize;
        for seg in path.segments() {
            let seg_key = seg.to_lowercase();
            if let Some(&child) = self.nodes[cur].as_ref().unwrap().children.get(&seg_key) {
                cur = child;
                continue;
            }
            let child = self.nodes.len();
            self.nodes.push(Some(KeyNode::new(seg.clone())));
            self.nodes[cur]
                .as_mut()
                .unwrap()
                .children
                .insert(seg_key, child);
            cur = child;
        }
        KeyHandle(cur)
    }

    /// Writes a value under an open key. Overwriting keeps the value name's
    /// original casing.
    pub fn set_value(
        &mut self,
        key: KeyHandle,
        name: &str,
        payload: ValuePayload,
    ) -> Result<(), RegistryError> {
        let node = self
            .nodes
            .get_mut(key.0)
            .and_then(|n| n.as_mut())
            .ok_or(RegistryError::StaleHandle)?;
        node.values
            .entry(name.to_lowercase())
            .and_modify(|cell| cell.payload = payload.clone())
            .or_insert_with(|| ValueCell {
                display_name: name.to_string(),
                payload,
            });
        Ok(())
    }

    /// Reads a value under an open key; `Ok(None)` when the value is absent.
    pub fn get_value(
        &self,
        key: KeyHandle,
        name: &str,
    ) -> Result<Option<&ValuePayload>, RegistryError> {
        let node = self.node(key.0).ok_or(RegistryError::StaleHandle)?;
        Ok(node.values.get(&name.to_lowercase()).map(|c| &c.payload))
    }

    /// Convenience: read a value by path without holding a handle.
    pub fn value_at(&self, path: &RegistryPath, name: &str) -> Option<&ValuePayload> {
        let key = self.open_key(path)?;
        self.get_value(key, name).ok().flatten()
    }

    /// Child key display names under a path, sorted case-insensitively.
    pub fn subkeys(&self, path: &RegistryPath) -> Vec<String> {
        match self.walk(path) {
            Some(idx) => self
                .node(idx)
                .map(|n| {
                    n.children
                        .values()
                        .filter_map(|&c| self.node(c).map(|k| k.display_name.clone()))
                        .collect()
                })
                .unwrap_or_default(),
            None => Vec::new(),
        }
    }

    /// Deletes a key and everything under it. Handles to deleted keys go
    /// stale; slots are never reused.
    pub fn delete_key(&mut self, path: &RegistryPath) -> Result<(), RegistryError> {
        if path.segments().is_empty() {
            return Err(RegistryError::MalformedPath(String::new()));
        }
        let parent_path = RegistryPath {
            segments: path.segments()[..path.segments().len() - 1].to_vec(),
        };
        let last_key = path.segments().last().unwrap().to_lowercase();
        let parent = self
            .walk(&parent_path)
            .ok_or_else(|| RegistryError::KeyNotFound(path.to_string()))?;
        let target = self.nodes[parent]
            .as_mut()
            .unwrap()
            .children
            .remove(&last_key)
            .ok_or_else(|| RegistryError::KeyNotFound(path.to_string()))?;
        let mut stack = vec![target];
        while let Some(idx) = stack.pop() {
            if let Some(node) = self.nodes[idx].take() {
                stack.extend(node.children.values().copied());
            }
        }
        Ok(())
    }

    /// Deep-copies the subtree at `src` (keys, values, and nested keys) to
    /// `dst`. `src` must exist and `dst` must not.
    pub fn copy_subtree(
        &mut self,
        src: &RegistryPath,
        dst: &RegistryPath,
    ) -> Result<(), RegistryError> {
        let src_idx = self
            .walk(src)
            .ok_or_else(|| RegistryError::SourceMissing(src.to_string()))?;
        if self.walk(dst).is_some() {
            return Err(RegistryError::DestinationExists(dst.to_string()));
        }
        // Snapshot first so copying into a descendant of src cannot recurse.
        let snapshot = self.clone_subtree(src_idx);
        let dst_handle = self.create_key(dst);
        self.graft(dst_handle.0, snapshot);
        Ok(())
    }

    fn clone_subtree(&self, idx: usize) -> SubtreeSnapshot {
        let node = self.node(idx).unwrap();
        SubtreeSnapshot {
            values: node.values.clone(),
            children: node
                .children
                .iter()
                .map(|(k, &c)| {
                    let child = self.node(c).unwrap();
                    (k.clone(), (child.display_name.clone(), self.clone_subtree(c)))
                })
                .collect(),
        }
    }

    fn graft(&mut self, at: usize, snapshot: SubtreeSnapshot) {
        self.nodes[at].as_mut().unwrap().values = snapshot.values;
        for (key, (display, child_snapshot)) in snapshot.children {
            let child = self.nodes.len();
            self.nodes.push(Some(KeyNode::new(display)));
            self.nodes[at].as_mut().unwrap().children.insert(key, child);
            self.graft(child, child_snapshot);
        }
    }

    /// Every value in the store as `(<full\path>, <name>, <payload>)`,
    /// sorted case-insensitively by path then value name.
    pub fn enumerate(&self) -> Vec<(String, String, ValuePayload)> {
        let mut out = Vec::new();
        self.enumerate_from(0, &mut String::new(), &mut out);
        out.sort_by(|a, b| {
            (a.0.to_lowercase(), a.1.to_lowercase()).cmp(&(b.0.to_lowercase(), b.1.to_lowercase()))
        });
        out
    }

    fn enumerate_from(&self, idx: usize, prefix: &mut String, out: &mut Vec<(String, String, ValuePayload)>) {
        let node = match self.node(idx) {
            Some(n) => n,
            None => return,
        };
        for cell in node.values.values() {
            out.push((prefix.clone(), cell.display_name.clone(), cell.payload.clone()));
        }
        for &child in node.children.values() {
            let child_node = match self.node(child) {
                Some(n) => n,
                None => continue,
            };
            let saved = prefix.len();
            if !prefix.is_empty() {
                prefix.push(PATH_SEP);
            }
            prefix.push_str(&child_node.display_name);
            self.enumerate_from(child, prefix, out);
            prefix.truncate(saved);
        }
    }

    /// Values under a subtree with paths relative to that subtree's root
    /// (the root itself contributes the empty path). Sorted like
    /// [`Registry::enumerate`]. Two subtrees with equal relative dumps hold
    /// identical content.
    pub fn enumerate_subtree(&self, root: &RegistryPath) -> Option<Vec<(String, String, ValuePayload)>> {
        let idx = self.walk(root)?;
        let mut out = Vec::new();
        self.enumerate_from(idx, &mut String::new(), &mut out);
        out.sort_by(|a, b| {
            (a.0.to_lowercase(), a.1.to_lowercase()).cmp(&(b.0.to_lowercase(), b.1.to_lowercase()))
        });
        Some(out)
    }

    /// Full-store dump, one line per value: `<full\path> <name> = <payload>`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (path, name, payload) in self.enumerate() {
            out.push_str(&format!("{path} {name} = {payload}\n"));
        }
        out
    }
}

#[derive(Debug)]
struct SubtreeSnapshot {
    values: BTreeMap<String, ValueCell>,
    /// Lowercased segment -> (display casing, subtree).
    children: BTreeMap<String, (String, SubtreeSnapshot)>,
}
