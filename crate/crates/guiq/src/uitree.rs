//! Symbolic GUI state.
//!
//! A [`UITree`] mirrors what an accessibility API reports about a running
//! application: a tree of widgets, each carrying a small set of identifying
//! properties (automation id, class name, control type, process name).
//! Everything downstream — hashing, featurization, the simulator, training
//! data — is built on top of this representation, so this module fixes the
//! canonical on-disk form and the identity rules once and for all:
//!
//! * Serialization is canonical: fixed key order, no insignificant
//!   whitespace, identifiers recomputed from content. `parse_tree` followed
//!   by `serialize_tree` is the identity on canonical documents.
//! * Node identity is content identity: [`node_identifier`] hashes the four
//!   properties (not the subtree), so the same button is recognized across
//!   screens even when its children change.
//! * State identity is structural: [`canonical_state_hash`] hashes the whole
//!   canonical serialization, so sibling order and subtree content matter.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

/// Action types the framework understands by default. Index order is
/// significant: it defines the action-type axis of the Q-value matrix.
pub const DEFAULT_ACTION_TYPES: &[&str] = &["LeftClick"];

/// Control types considered actionable when enumerating the action set.
pub const ACTIONABLE_CONTROL_TYPES: &[&str] =
    &["Button", "ListItem", "MenuItem", "Hyperlink", "TabItem"];

/// Content hash of a node's own properties; stable across frames and
/// serializations, independent of the node's children.
pub type NodeIdentifier = u64;

/// Errors raised while reading tree documents.
#[derive(Debug, Error)]
pub enum TreeError {
    /// The document is not syntactically valid JSON.
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    /// The document parses but does not match the tree schema.
    #[error("schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
    /// A node's identifier already occurs in its own ancestry chain, which
    /// means the producer flattened a cyclic structure into the document.
    #[error("cycle detected: identifier {0:016x} repeats along an ancestry chain")]
    CycleDetected(NodeIdentifier),
}

/// One widget in the accessibility tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UINode {
    /// Developer-assigned automation id; frequently absent in real trees.
    pub automation_id: Option<String>,
    pub class_name: String,
    pub control_type: String,
    pub process_name: String,
    pub children: Vec<UINode>,
}

impl UINode {
    /// Convenience constructor for a childless node.
    pub fn leaf(
        automation_id: Option<&str>,
        class_name: &str,
        control_type: &str,
        process_name: &str,
    ) -> Self {
        UINode {
            automation_id: automation_id.map(str::to_owned),
            class_name: class_name.to_owned(),
            control_type: control_type.to_owned(),
            process_name: process_name.to_owned(),
            children: Vec::new(),
        }
    }

    /// True if this node's control type belongs to the actionable set.
    pub fn is_actionable(&self) -> bool {
        ACTIONABLE_CONTROL_TYPES
            .iter()
            .any(|t| *t == self.control_type)
    }
}

/// A complete GUI state: one rooted widget tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UITree {
    pub root: UINode,
}

impl UITree {
    pub fn new(root: UINode) -> Self {
        UITree { root }
    }

    /// All nodes in pre-order (root first, children in document order). The
    /// position in this sequence is the node's pre-order index, which is the
    /// node axis used by featurization and the Q-value matrix.
    pub fn pre_order(&self) -> Vec<&UINode> {
        let mut nodes = Vec::new();
        collect_pre_order(&self.root, &mut nodes);
        nodes
    }

    pub fn node_count(&self) -> usize {
        self.pre_order().len()
    }

    /// First node (by pre-order) whose [`node_identifier`] equals `id`,
    /// together with its pre-order index. Duplicate identifiers are legal —
    /// two visually identical buttons hash alike — so "first match" is the
    /// tie-break used everywhere an identifier is resolved to a node.
    pub fn find_node(&self, id: NodeIdentifier) -> Option<(usize, &UINode)> {
        self.pre_order()
            .into_iter()
            .enumerate()
            .find(|(_, node)| node_identifier(node) == id)
    }
}

fn collect_pre_order<'a>(node: &'a UINode, out: &mut Vec<&'a UINode>) {
    out.push(node);
    for child in &node.children {
        collect_pre_order(child, out);
    }
}

/// One interaction the agent can perform: an action type applied to the node
/// carrying `node_identifier`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UIAction {
    pub node_identifier: NodeIdentifier,
    pub action_type: String,
}

impl UIAction {
    pub fn new(node_identifier: NodeIdentifier, action_type: &str) -> Self {
        UIAction {
            node_identifier,
            action_type: action_type.to_owned(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct UIActionRepr {
    node: String,
    #[serde(rename = "type")]
    action_type: String,
}

impl Serialize for UIAction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        UIActionRepr {
            node: identifier_hex(self.node_identifier),
            action_type: self.action_type.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for UIAction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = UIActionRepr::deserialize(deserializer)?;
        let id = parse_identifier_hex(&repr.node)
            .ok_or_else(|| D::Error::custom(format!("invalid node identifier {:?}", repr.node)))?;
        Ok(UIAction {
            node_identifier: id,
            action_type: repr.action_type,
        })
    }
}

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte string. All content hashes in the framework
/// (node identifiers, state hashes, fingerprints) go through this function.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Canonical lowercase-hex rendering of an identifier, as embedded in tree
/// documents.
pub fn identifier_hex(id: NodeIdentifier) -> String {
    format!("{id:016x}")
}

/// Inverse of [`identifier_hex`]; `None` when `s` is not 16 hex digits.
pub fn parse_identifier_hex(s: &str) -> Option<NodeIdentifier> {
    if s.len() != 16 {
        return None;
    }
    u64::from_str_radix(s, 16).ok()
}

/// Hash of a node's own four properties. Children are deliberately excluded
/// so the identifier survives content changes elsewhere on the screen. The
/// hashed byte string is a presence flag for the automation id, then the
/// four property values joined by 0x1F unit separators, which keeps
/// ("ab", "c") and ("a", "bc") distinct and keeps an absent automation id
/// distinct from an empty one.
pub fn node_identifier(node: &UINode) -> NodeIdentifier {
    let mut bytes = Vec::with_capacity(
        8 + node.automation_id.as_deref().map_or(0, str::len)
            + node.class_name.len()
            + node.control_type.len()
            + node.process_name.len(),
    );
    match &node.automation_id {
        Some(id) => {
            bytes.push(1);
            bytes.extend_from_slice(id.as_bytes());
        }
        None => bytes.push(0),
    }
    bytes.push(0x1f);
    bytes.extend_from_slice(node.class_name.as_bytes());
    bytes.push(0x1f);
    bytes.extend_from_slice(node.control_type.as_bytes());
    bytes.push(0x1f);
    bytes.extend_from_slice(node.process_name.as_bytes());
    fnv1a_64(&bytes)
}

/// Hash of the whole state: FNV-1a over the canonical serialization. Two
/// trees collide only if they serialize identically, so sibling order and
/// every property value are significant.
pub fn canonical_state_hash(tree: &UITree) -> u64 {
    fnv1a_64(serialize_tree(tree).as_bytes())
}

/// Canonical document form: key order `Identifier`, `UIProperties`,
/// `Children`; inside the single properties object `AutomationID` (omitted
/// when absent), `ClassName`, `ControlType`, `ProcessName`; no insignificant
/// whitespace. Identifiers are recomputed from content, never copied from an
/// input document.
pub fn serialize_tree(tree: &UITree) -> String {
    let mut out = String::new();
    write_node(&tree.root, &mut out);
    out
}

fn write_node(node: &UINode, out: &mut String) {
    out.push_str("{\"Identifier\":\"");
    out.push_str(&identifier_hex(node_identifier(node)));
    out.push_str("\",\"UIProperties\":[{");
    if let Some(id) = &node.automation_id {
        out.push_str("\"AutomationID\":");
        out.push_str(&json_string(id));
        out.push(',');
    }
    out.push_str("\"ClassName\":");
    out.push_str(&json_string(&node.class_name));
    out.push_str(",\"ControlType\":");
    out.push_str(&json_string(&node.control_type));
    out.push_str(",\"ProcessName\":");
    out.push_str(&json_string(&node.process_name));
    out.push_str("}],\"Children\":[");
    for (i, child) in node.children.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_node(child, out);
    }
    out.push_str("]}");
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("JSON string encoding cannot fail")
}

/// Parse a tree document. Accepts any key order and whitespace; the stored
/// `Identifier` is ignored (and may be absent) because identifiers are
/// always recomputed from content, and a missing `Children` key reads as an
/// empty child list. Property values must match the schema exactly; anything
/// else is a [`TreeError::SchemaViolation`].
pub fn parse_tree(doc: &str) -> Result<UITree, TreeError> {
    let value: Value =
        serde_json::from_str(doc).map_err(|e| TreeError::MalformedDocument(e.to_string()))?;
    let mut ancestry = Vec::new();
    let root = parse_node(&value, "$", &mut ancestry)?;
    Ok(UITree { root })
}

fn violation(path: &str, reason: impl Into<String>) -> TreeError {
    TreeError::SchemaViolation {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

fn parse_node(
    value: &Value,
    path: &str,
    ancestry: &mut Vec<NodeIdentifier>,
) -> Result<UINode, TreeError> {
    let obj = value
        .as_object()
        .ok_or_else(|| violation(path, "node must be a JSON object"))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "Identifier" | "UIProperties" | "Children") {
            return Err(violation(path, format!("unexpected key {key:?}")));
        }
    }
    if let Some(id) = obj.get("Identifier") {
        // Informational only, but it must at least be a string.
        if !id.is_string() {
            return Err(violation(path, "Identifier must be a string"));
        }
    }

    let props = obj
        .get("UIProperties")
        .ok_or_else(|| violation(path, "missing UIProperties"))?
        .as_array()
        .ok_or_else(|| violation(path, "UIProperties must be an array"))?;
    if props.len() != 1 {
        return Err(violation(
            path,
            format!("UIProperties must hold exactly one object, found {}", props.len()),
        ));
    }
    let props = props[0]
        .as_object()
        .ok_or_else(|| violation(path, "UIProperties entry must be an object"))?;
    for key in props.keys() {
        if !matches!(
            key.as_str(),
            "AutomationID" | "ClassName" | "ControlType" | "ProcessName"
        ) {
            return Err(violation(path, format!("unexpected property key {key:?}")));
        }
    }
    let automation_id = match props.get("AutomationID") {
        None => None,
        Some(v) => Some(
            v.as_str()
                .ok_or_else(|| violation(path, "AutomationID must be a string"))?
                .to_owned(),
        ),
    };
    let required = |key: &str| -> Result<String, TreeError> {
        let v = props
            .get(key)
            .ok_or_else(|| violation(path, format!("missing {key}")))?
            .as_str()
            .ok_or_else(|| violation(path, format!("{key} must be a string")))?;
        if v.is_empty() {
            return Err(violation(path, format!("{key} must be non-empty")));
        }
        Ok(v.to_owned())
    };
    let mut node = UINode {
        automation_id,
        class_name: required("ClassName")?,
        control_type: required("ControlType")?,
        process_name: required("ProcessName")?,
        children: Vec::new(),
    };

    let id = node_identifier(&node);
    if ancestry.contains(&id) {
        return Err(TreeError::CycleDetected(id));
    }
    ancestry.push(id);
    if let Some(children) = obj.get("Children") {
        let children = children
            .as_array()
            .ok_or_else(|| violation(path, "Children must be an array"))?;
        for (i, child) in children.iter().enumerate() {
            let child_path = format!("{path}.Children[{i}]");
            node.children.push(parse_node(child, &child_path, ancestry)?);
        }
    }
    ancestry.pop();
    Ok(node)
}

/// Enumerate the dynamic action set of a state: one [`UIAction`] per
/// (actionable node, action type) pair, ordered by (pre-order node index,
/// action type index). The length is `|actionable nodes| x |action_types|`.
pub fn enumerate_actions(tree: &UITree, action_types: &[String]) -> Vec<UIAction> {
    let mut actions = Vec::new();
    for node in tree.pre_order() {
        if node.is_actionable() {
            let id = node_identifier(node);
            for action_type in action_types {
                actions.push(UIAction {
                    node_identifier: id,
                    action_type: action_type.clone(),
                });
            }
        }
    }
    actions
}

/// Owned copy of [`DEFAULT_ACTION_TYPES`], the form most call sites want.
pub fn default_action_types() -> Vec<String> {
    DEFAULT_ACTION_TYPES.iter().map(|s| (*s).to_owned()).collect()
}

/// The synthetic root that [`filter_process`] re-roots its matches under.
pub fn desktop_node() -> UINode {
    UINode::leaf(None, "Desktop", "Pane", "Desktop")
}

fn is_desktop_root(node: &UINode) -> bool {
    let desktop = desktop_node();
    node.automation_id == desktop.automation_id
        && node.class_name == desktop.class_name
        && node.control_type == desktop.control_type
        && node.process_name == desktop.process_name
}

/// Restrict a state to one application: collect the maximal subtrees whose
/// root's `process_name` equals `process` (in pre-order, without descending
/// into a match) and re-root them under a fresh desktop node. A tree whose
/// root is itself the synthetic desktop is treated as a forest of its
/// children, which makes the operation idempotent. When nothing matches the
/// result is the bare desktop node.
pub fn filter_process(tree: &UITree, process: &str) -> UITree {
    let mut matches = Vec::new();
    if is_desktop_root(&tree.root) {
        for child in &tree.root.children {
            collect_process_matches(child, process, &mut matches);
        }
    } else {
        collect_process_matches(&tree.root, process, &mut matches);
    }
    let mut root = desktop_node();
    root.children = matches;
    UITree { root }
}

fn collect_process_matches(node: &UINode, process: &str, out: &mut Vec<UINode>) {
    if node.process_name == process {
        out.push(node.clone());
    } else {
        for child in &node.children {
            collect_process_matches(child, process, out);
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use proptest::prelude::*;

    pub fn arb_prop_value() -> impl Strategy<Value = String> {
        "[a-zA-Z][a-zA-Z0-9 _.-]{0,11}"
    }

    pub fn arb_control_type() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("Button".to_owned()),
            Just("ListItem".to_owned()),
            Just("MenuItem".to_owned()),
            Just("Hyperlink".to_owned()),
            Just("TabItem".to_owned()),
            Just("Pane".to_owned()),
            Just("Window".to_owned()),
            Just("Label".to_owned()),
        ]
    }

    pub fn arb_node(max_depth: u32) -> impl Strategy<Value = UINode> {
        let leaf = (
            proptest::option::of(arb_prop_value()),
            arb_prop_value(),
            arb_control_type(),
            arb_prop_value(),
        )
            .prop_map(|(automation_id, class_name, control_type, process_name)| UINode {
                automation_id,
                class_name,
                control_type,
                process_name,
                children: Vec::new(),
            });
        leaf.prop_recursive(max_depth, 24, 4, |inner| {
            (
                proptest::option::of(arb_prop_value()),
                arb_prop_value(),
                arb_control_type(),
                arb_prop_value(),
                proptest::collection::vec(inner, 0..4),
            )
                .prop_map(
                    |(automation_id, class_name, control_type, process_name, children)| UINode {
                        automation_id,
                        class_name,
                        control_type,
                        process_name,
                        children,
                    },
                )
        })
    }

    pub fn arb_tree() -> impl Strategy<Value = UITree> {
        arb_node(4).prop_map(UITree::new)
    }
}
