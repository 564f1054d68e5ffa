//! Deterministic synthetic GUI simulator.
//!
//! An [`AppSpec`] is a complete, finite description of an application: a set
//! of screens (each a [`UITree`]), a transition table keyed by (screen, node
//! identifier, action type), and an event table over the same keys. The
//! [`Simulator`] walks that description with gym-style `reset`/`step`
//! semantics: clicking a node with a transition entry moves to the target
//! screen, clicking anything else is a no-op, and event-table hits count
//! toward the active objectives. Everything is deterministic — two runs with
//! the same spec, objectives and action sequence produce byte-identical
//! observations — which is what makes offline training data reproducible.
//!
//! Four built-in applications ship with the crate: `settings` and `browser`,
//! plus `settings_perturbed` / `browser_perturbed` variants whose automation
//! ids are re-randomized while everything else stays fixed. The perturbed
//! variants exist to probe generalization: a policy keyed on raw state
//! hashes cannot transfer to them, while one keyed on structural features
//! can.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::uitree::{
    desktop_node, identifier_hex, node_identifier, parse_identifier_hex, parse_tree,
    serialize_tree, NodeIdentifier, UIAction, UINode, UITree,
};

pub type ScreenId = String;

/// Errors raised by spec validation and simulation.
#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid app spec: {0}")]
    InvalidSpec(String),
    #[error("objective event {0:?} is not registered in the app spec")]
    UnknownEvent(String),
    #[error("simulator was stepped before reset")]
    NotReset,
    #[error("episode is done; call reset before stepping again")]
    EpisodeDone,
    #[error("action refers to node {0:016x} which is not on the current screen")]
    NodeNotInState(NodeIdentifier),
    #[error("app spec file error: {0}")]
    Io(String),
}

/// Key of the transition and event tables.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TransitionKey {
    pub screen: ScreenId,
    pub node: NodeIdentifier,
    pub action_type: String,
}

impl TransitionKey {
    pub fn new(screen: &str, node: NodeIdentifier, action_type: &str) -> Self {
        TransitionKey {
            screen: screen.to_owned(),
            node,
            action_type: action_type.to_owned(),
        }
    }
}

/// What the agent is asked to achieve: fire `event_name` `target_count`
/// times within one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Objective {
    pub event_name: String,
    pub target_count: u32,
}

impl Objective {
    pub fn new(event_name: &str) -> Self {
        Objective {
            event_name: event_name.to_owned(),
            target_count: 1,
        }
    }

    pub fn with_target(event_name: &str, target_count: u32) -> Self {
        Objective {
            event_name: event_name.to_owned(),
            target_count,
        }
    }

    /// Per-event reward that makes a completed episode's return sum to 1.
    pub fn r_norm(&self) -> f64 {
        1.0 / f64::from(self.target_count.max(1))
    }
}

/// Complete description of a deterministic application.
#[derive(Debug, Clone, PartialEq)]
pub struct AppSpec {
    pub name: String,
    pub screens: BTreeMap<ScreenId, UITree>,
    pub transitions: BTreeMap<TransitionKey, ScreenId>,
    pub events: BTreeMap<TransitionKey, String>,
    pub initial_screen: ScreenId,
    /// Seed of the automation-id re-randomization this spec was derived
    /// with, `None` for unperturbed specs. Purely informational.
    pub perturbation_seed: Option<u64>,
}

impl AppSpec {
    /// Check internal consistency: screens exist, table keys point at real
    /// nodes, every screen is reachable and offers at least one action.
    pub fn validate(&self) -> Result<(), EnvError> {
        if !self.screens.contains_key(&self.initial_screen) {
            return Err(EnvError::InvalidSpec(format!(
                "initial screen {:?} does not exist",
                self.initial_screen
            )));
        }
        for (key, target) in &self.transitions {
            self.check_key(key, "transition")?;
            if !self.screens.contains_key(target) {
                return Err(EnvError::InvalidSpec(format!(
                    "transition from {:?} targets missing screen {target:?}",
                    key.screen
                )));
            }
        }
        for (key, event) in &self.events {
            self.check_key(key, "event")?;
            if event.is_empty() {
                return Err(EnvError::InvalidSpec("empty event name".to_owned()));
            }
        }
        for (id, tree) in &self.screens {
            if !tree.pre_order().iter().any(|n| n.is_actionable()) {
                return Err(EnvError::InvalidSpec(format!(
                    "screen {id:?} has no actionable node"
                )));
            }
        }

        // Every screen must be reachable from the initial screen.
        let mut reachable: BTreeSet<&ScreenId> = BTreeSet::new();
        let mut queue = VecDeque::new();
        reachable.insert(&self.initial_screen);
        queue.push_back(&self.initial_screen);
        while let Some(screen) = queue.pop_front() {
            for (key, target) in &self.transitions {
                if key.screen == **screen && reachable.insert(target) {
                    queue.push_back(target);
                }
            }
        }
        for id in self.screens.keys() {
            if !reachable.contains(id) {
                return Err(EnvError::InvalidSpec(format!(
                    "screen {id:?} is unreachable from the initial screen"
                )));
            }
        }
        Ok(())
    }

    fn check_key(&self, key: &TransitionKey, table: &str) -> Result<(), EnvError> {
        let tree = self.screens.get(&key.screen).ok_or_else(|| {
            EnvError::InvalidSpec(format!(
                "{table} key references missing screen {:?}",
                key.screen
            ))
        })?;
        if tree.find_node(key.node).is_none() {
            return Err(EnvError::InvalidSpec(format!(
                "{table} key references node {} absent from screen {:?}",
                identifier_hex(key.node),
                key.screen
            )));
        }
        if key.action_type.is_empty() {
            return Err(EnvError::InvalidSpec("empty action type in key".to_owned()));
        }
        Ok(())
    }

    /// Event names that can fire anywhere in this app, sorted.
    pub fn event_names(&self) -> BTreeSet<String> {
        self.events.values().cloned().collect()
    }

    /// Process name of the application itself: the first pre-order process
    /// on the initial screen that is not the desktop shell.
    pub fn primary_process(&self) -> String {
        let desktop = desktop_node().process_name;
        let tree = &self.screens[&self.initial_screen];
        tree.pre_order()
            .iter()
            .map(|n| n.process_name.clone())
            .find(|p| *p != desktop)
            .unwrap_or(desktop)
    }

    /// Derive a variant whose automation ids are freshly randomized (same
    /// structure, same class/control/process values, re-keyed tables).
    /// Nodes without an automation id keep none. Equal old ids map to equal
    /// new ids, so elements shared across screens stay consistent.
    pub fn perturb(&self, seed: u64) -> AppSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut id_map: BTreeMap<String, String> = BTreeMap::new();
        let mut used: BTreeSet<String> = BTreeSet::new();
        for tree in self.screens.values() {
            for node in tree.pre_order() {
                if let Some(id) = &node.automation_id {
                    used.insert(id.clone());
                }
            }
        }
        for old in used.clone() {
            let fresh = loop {
                let candidate = format!("{:08x}", rng.random::<u32>());
                if !used.contains(&candidate) && !id_map.values().any(|v| *v == candidate) {
                    break candidate;
                }
            };
            id_map.insert(old, fresh);
        }

        let mut screens = BTreeMap::new();
        let mut node_map: BTreeMap<(ScreenId, NodeIdentifier), NodeIdentifier> = BTreeMap::new();
        for (id, tree) in &self.screens {
            let mut new_root = tree.root.clone();
            remap_automation_ids(&mut new_root, &id_map);
            let new_tree = UITree::new(new_root);
            for (old_node, new_node) in tree.pre_order().iter().zip(new_tree.pre_order()) {
                node_map.insert(
                    (id.clone(), node_identifier(old_node)),
                    node_identifier(new_node),
                );
            }
            screens.insert(id.clone(), new_tree);
        }
        let rekey = |key: &TransitionKey| TransitionKey {
            screen: key.screen.clone(),
            node: node_map[&(key.screen.clone(), key.node)],
            action_type: key.action_type.clone(),
        };
        AppSpec {
            name: format!("{}_perturbed", self.name),
            screens,
            transitions: self.transitions.iter().map(|(k, v)| (rekey(k), v.clone())).collect(),
            events: self.events.iter().map(|(k, v)| (rekey(k), v.clone())).collect(),
            initial_screen: self.initial_screen.clone(),
            perturbation_seed: Some(seed),
        }
    }

    /// Serialize to the app-spec file form: screens as embedded tree
    /// documents, tables as records keyed by identifier hex. Output is
    /// deterministic (sorted keys throughout).
    pub fn to_json(&self) -> String {
        let screens: Value = self
            .screens
            .iter()
            .map(|(id, tree)| {
                let doc: Value = serde_json::from_str(&serialize_tree(tree))
                    .expect("canonical serialization is valid JSON");
                (id.clone(), doc)
            })
            .collect::<serde_json::Map<String, Value>>()
            .into();
        let record = |key: &TransitionKey, field: &str, value: &str| {
            json!({
                "screen": key.screen,
                "node": identifier_hex(key.node),
                "type": key.action_type,
                field: value,
            })
        };
        let transitions: Vec<Value> = self
            .transitions
            .iter()
            .map(|(k, target)| record(k, "to", target))
            .collect();
        let events: Vec<Value> = self
            .events
            .iter()
            .map(|(k, event)| record(k, "event", event))
            .collect();
        let doc = json!({
            "name": self.name,
            "initial_screen": self.initial_screen,
            "perturbation_seed": self.perturbation_seed,
            "screens": screens,
            "transitions": transitions,
            "events": events,
        });
        serde_json::to_string_pretty(&doc).expect("spec serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<AppSpec, EnvError> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| EnvError::Io(format!("bad JSON: {e}")))?;
        let obj = doc
            .as_object()
            .ok_or_else(|| EnvError::Io("spec must be a JSON object".to_owned()))?;
        let str_field = |name: &str| -> Result<String, EnvError> {
            obj.get(name)
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| EnvError::Io(format!("missing string field {name:?}")))
        };
        let mut screens = BTreeMap::new();
        for (id, tree_doc) in obj
            .get("screens")
            .and_then(Value::as_object)
            .ok_or_else(|| EnvError::Io("missing screens map".to_owned()))?
        {
            let tree = parse_tree(&tree_doc.to_string())
                .map_err(|e| EnvError::Io(format!("screen {id:?}: {e}")))?;
            screens.insert(id.clone(), tree);
        }
        let parse_records = |name: &str, field: &str| -> Result<Vec<(TransitionKey, String)>, EnvError> {
            let mut out = Vec::new();
            for record in obj
                .get(name)
                .and_then(Value::as_array)
                .ok_or_else(|| EnvError::Io(format!("missing {name} array")))?
            {
                let get = |k: &str| -> Result<&str, EnvError> {
                    record
                        .get(k)
                        .and_then(Value::as_str)
                        .ok_or_else(|| EnvError::Io(format!("{name} record missing {k:?}")))
                };
                let node = parse_identifier_hex(get("node")?)
                    .ok_or_else(|| EnvError::Io(format!("bad identifier in {name} record")))?;
                out.push((
                    TransitionKey::new(get("screen")?, node, get("type")?),
                    get(field)?.to_owned(),
                ));
            }
            Ok(out)
        };
        let spec = AppSpec {
            name: str_field("name")?,
            initial_screen: str_field("initial_screen")?,
            perturbation_seed: obj.get("perturbation_seed").and_then(Value::as_u64),
            screens,
            transitions: parse_records("transitions", "to")?.into_iter().collect(),
            events: parse_records("events", "event")?.into_iter().collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, self.to_json()).map_err(|e| EnvError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<AppSpec, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|e| EnvError::Io(e.to_string()))?;
        Self::from_json(&text)
    }
}

fn remap_automation_ids(node: &mut UINode, id_map: &BTreeMap<String, String>) {
    if let Some(id) = &node.automation_id {
        node.automation_id = Some(id_map[id].clone());
    }
    for child in &mut node.children {
        remap_automation_ids(child, id_map);
    }
}

/// Outcome of one simulator step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: UITree,
    /// Number of active-objective events fired by this step (unnormalized).
    pub reward: f64,
    pub done: bool,
    /// Names of all events fired by this step, objective or not.
    pub fired_events: Vec<String>,
}

/// Gym-style walker over an [`AppSpec`].
#[derive(Debug, Clone)]
pub struct Simulator {
    spec: AppSpec,
    lenient: bool,
    objectives: Vec<Objective>,
    counts: BTreeMap<String, u32>,
    current: ScreenId,
    active: bool,
    done: bool,
    seed: u64,
}

impl Simulator {
    pub fn new(spec: AppSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let initial = spec.initial_screen.clone();
        Ok(Simulator {
            spec,
            lenient: false,
            objectives: Vec::new(),
            counts: BTreeMap::new(),
            current: initial,
            active: false,
            done: false,
            seed: 0,
        })
    }

    /// In lenient mode an action whose node is absent from the current
    /// screen is a no-op instead of an error. Network-driven policies want
    /// the strict default (a stale action is a bug); baseline agents replay
    /// recorded actions and prefer leniency.
    pub fn with_leniency(mut self, lenient: bool) -> Self {
        self.lenient = lenient;
        self
    }

    pub fn spec(&self) -> &AppSpec {
        &self.spec
    }

    /// Begin an episode targeting `objectives` (done fires as soon as any
    /// one of them reaches its target count). Returns the initial state.
    pub fn reset(&mut self, objectives: &[Objective], seed: u64) -> Result<UITree, EnvError> {
        for objective in objectives {
            if !self.spec.events.values().any(|e| *e == objective.event_name) {
                return Err(EnvError::UnknownEvent(objective.event_name.clone()));
            }
            if objective.target_count == 0 {
                return Err(EnvError::InvalidSpec(format!(
                    "objective {:?} has target count 0",
                    objective.event_name
                )));
            }
        }
        self.objectives = objectives.to_vec();
        self.counts = objectives
            .iter()
            .map(|o| (o.event_name.clone(), 0))
            .collect();
        self.current = self.spec.initial_screen.clone();
        self.active = true;
        self.done = false;
        self.seed = seed;
        Ok(self.spec.screens[&self.current].clone())
    }

    /// Single-objective convenience over [`Simulator::reset`].
    pub fn reset_single(&mut self, objective: &Objective, seed: u64) -> Result<UITree, EnvError> {
        self.reset(std::slice::from_ref(objective), seed)
    }

    /// Current screen's tree. Panics if called before the first reset.
    pub fn current_tree(&self) -> &UITree {
        assert!(self.active, "simulator used before reset");
        &self.spec.screens[&self.current]
    }

    /// Event counts accumulated since the last reset, keyed by objective
    /// event name.
    pub fn event_counts(&self) -> &BTreeMap<String, u32> {
        &self.counts
    }

    /// Apply one action. Event hits are counted on the screen where the
    /// click happened; the transition (if any) is taken afterwards.
    pub fn step(&mut self, action: &UIAction) -> Result<StepResult, EnvError> {
        if !self.active {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let tree = &self.spec.screens[&self.current];
        if tree.find_node(action.node_identifier).is_none() {
            if self.lenient {
                return Ok(StepResult {
                    next_state: tree.clone(),
                    reward: 0.0,
                    done: false,
                    fired_events: Vec::new(),
                });
            }
            return Err(EnvError::NodeNotInState(action.node_identifier));
        }

        let key = TransitionKey::new(&self.current, action.node_identifier, &action.action_type);
        let mut fired_events = Vec::new();
        let mut reward = 0.0;
        if let Some(event) = self.spec.events.get(&key) {
            fired_events.push(event.clone());
            if let Some(count) = self.counts.get_mut(event) {
                *count += 1;
                reward += 1.0;
            }
        }
        let done = self.objectives.iter().any(|o| {
            self.counts
                .get(&o.event_name)
                .is_some_and(|&c| c >= o.target_count)
        });
        self.done = done;
        if let Some(target) = self.spec.transitions.get(&key) {
            self.current = target.clone();
        }
        Ok(StepResult {
            next_state: self.spec.screens[&self.current].clone(),
            reward,
            done,
            fired_events,
        })
    }
}

/// LeftClick on the first pre-order node with the given class name; handy
/// for scripted interactions in tests and examples.
pub fn click_on_class(tree: &UITree, class_name: &str) -> Option<UIAction> {
    tree.pre_order()
        .into_iter()
        .find(|n| n.class_name == class_name)
        .map(|n| UIAction::new(node_identifier(n), "LeftClick"))
}

// ---------------------------------------------------------------------------
// Built-in applications.
// ---------------------------------------------------------------------------

/// Event fired when the settings app's notifications panel is opened.
pub const EVENT_NOTIFICATIONS: &str = "notifications_panel_opened";
/// Event fired when the settings app's add-device flow is started.
pub const EVENT_BLUETOOTH: &str = "add_bluetooth_clicked";
/// Event fired when the browser adds the current page to favorites.
pub const EVENT_FAVORITE: &str = "favorite_added";

const SETTINGS_ID_SEED: u64 = 0x5e77_1465;
const BROWSER_ID_SEED: u64 = 0xb405_e401;
const PERTURBATION_SEED: u64 = 0x0a17_e12e;

/// Names accepted by [`builtin_app`].
pub const BUILTIN_APPS: &[&str] = &[
    "settings",
    "browser",
    "settings_perturbed",
    "browser_perturbed",
];

/// Look up a built-in application by name.
pub fn builtin_app(name: &str) -> Option<AppSpec> {
    match name {
        "settings" => Some(settings_spec()),
        "browser" => Some(browser_spec()),
        "settings_perturbed" => Some(settings_spec().perturb(PERTURBATION_SEED)),
        "browser_perturbed" => Some(browser_spec().perturb(PERTURBATION_SEED)),
        _ => None,
    }
}

const SETTINGS_CATEGORIES: &[&str] = &[
    "System",
    "Devices",
    "Phone",
    "Network",
    "Personalization",
    "Apps",
    "Accounts",
    "TimeLanguage",
    "Gaming",
    "EaseOfAccess",
    "Privacy",
    "UpdateSecurity",
];

const SETTINGS_TILES: &[&str] = &[
    "TileWifi",
    "TileVolume",
    "TileBrightness",
    "TileNightLight",
    "TileFocus",
    "TileBattery",
    "TileStorage",
    "TileDisplay",
    "TileSound",
    "TilePower",
    "TileBackground",
    "TileColors",
    "TileLockScreen",
    "TileFonts",
];

/// Deterministic automation ids, one per element class. Sharing the id per
/// class keeps an element recognizable across the screens it appears on,
/// like a real application would.
struct IdAssigner {
    rng: ChaCha8Rng,
    assigned: BTreeMap<String, String>,
}

impl IdAssigner {
    fn new(seed: u64) -> Self {
        IdAssigner {
            rng: ChaCha8Rng::seed_from_u64(seed),
            assigned: BTreeMap::new(),
        }
    }

    fn id_for(&mut self, class_name: &str) -> String {
        if let Some(existing) = self.assigned.get(class_name) {
            return existing.clone();
        }
        let fresh = loop {
            let candidate = format!("{:08x}", self.rng.random::<u32>());
            if !self.assigned.values().any(|v| *v == candidate) {
                break candidate;
            }
        };
        self.assigned.insert(class_name.to_owned(), fresh.clone());
        fresh
    }

    fn element(&mut self, class_name: &str, control_type: &str, process: &str) -> UINode {
        let id = self.id_for(class_name);
        UINode::leaf(Some(&id), class_name, control_type, process)
    }
}

fn under_desktop(app_root: UINode) -> UITree {
    let mut root = desktop_node();
    root.children.push(app_root);
    UITree::new(root)
}

/// The synthetic settings app: a home screen, one page per category, a
/// notifications panel behind the System page and an add-device dialog
/// behind the Devices page. The optimal path to either event is two clicks;
/// the distractor counts are calibrated so a uniform random agent needs a
/// few hundred steps on average (see the hitting-time tests).
pub fn settings_spec() -> AppSpec {
    let process = "Settings";
    let mut ids = IdAssigner::new(SETTINGS_ID_SEED);
    let mut screens = BTreeMap::new();
    let mut transitions = BTreeMap::new();
    let mut events = BTreeMap::new();

    let nav_list = |ids: &mut IdAssigner| {
        let mut nav = ids.element("NavigationList", "Pane", process);
        for category in SETTINGS_CATEGORIES {
            nav.children.push(ids.element(category, "ListItem", process));
        }
        nav
    };
    let page_id = |category: &str| format!("page_{}", category.to_lowercase());

    // Home: navigation list, inert quick-setting tiles, a search button.
    {
        let mut window = ids.element("SettingsWindow", "Window", process);
        window.children.push(nav_list(&mut ids));
        let mut grid = ids.element("TileGrid", "Pane", process);
        for tile in SETTINGS_TILES {
            grid.children.push(ids.element(tile, "Button", process));
        }
        window.children.push(grid);
        window.children.push(ids.element("SearchButton", "Button", process));
        screens.insert("home".to_owned(), under_desktop(window));
    }

    // One page per category: the shared navigation list plus a content pane
    // of inert option buttons; System and Devices carry the special items.
    for category in SETTINGS_CATEGORIES {
        let mut window = ids.element("SettingsWindow", "Window", process);
        window.children.push(nav_list(&mut ids));
        let mut content = ids.element(&format!("Content{category}"), "Pane", process);
        content
            .children
            .push(UINode::leaf(None, &format!("{category}Header"), "Label", process));
        for i in 0..6 {
            content
                .children
                .push(ids.element(&format!("{category}Option{i}"), "Button", process));
        }
        if *category == "System" {
            content
                .children
                .push(ids.element("NotificationsPanel", "ListItem", process));
        }
        if *category == "Devices" {
            content
                .children
                .push(ids.element("AddBluetoothDevice", "Button", process));
        }
        window.children.push(content);
        screens.insert(page_id(category), under_desktop(window));
    }

    // The notifications panel reached from the System page.
    {
        let mut window = ids.element("SettingsWindow", "Window", process);
        window.children.push(nav_list(&mut ids));
        let mut pane = ids.element("NotificationsPane", "Pane", process);
        pane.children
            .push(UINode::leaf(None, "NotificationsHeader", "Label", process));
        for i in 0..5 {
            pane.children
                .push(ids.element(&format!("NotificationToggle{i}"), "Button", process));
        }
        pane.children.push(ids.element("BackToSystem", "Button", process));
        window.children.push(pane);
        screens.insert("notifications_panel".to_owned(), under_desktop(window));
    }

    // The add-device dialog reached from the Devices page.
    {
        let mut window = ids.element("AddDeviceWindow", "Window", process);
        window
            .children
            .push(UINode::leaf(None, "AddDeviceHeader", "Label", process));
        for kind in ["DeviceKindBluetooth", "DeviceKindWireless", "DeviceKindOther"] {
            window.children.push(ids.element(kind, "ListItem", process));
        }
        window.children.push(ids.element("CancelAddDevice", "Button", process));
        screens.insert("add_device_dialog".to_owned(), under_desktop(window));
    }

    // Navigation: every screen with the sidebar can jump to every category.
    let mut sidebar_screens: Vec<String> = vec!["home".to_owned(), "notifications_panel".to_owned()];
    sidebar_screens.extend(SETTINGS_CATEGORIES.iter().map(|c| page_id(c)));
    for screen in &sidebar_screens {
        for category in SETTINGS_CATEGORIES {
            let node = click_on_class(&screens[screen], category).unwrap().node_identifier;
            transitions.insert(
                TransitionKey::new(screen, node, "LeftClick"),
                page_id(category),
            );
        }
    }

    // Special items: the two event-firing elements and the ways back.
    let key_on = |screens: &BTreeMap<ScreenId, UITree>, screen: &str, class: &str| {
        let node = click_on_class(&screens[screen], class).unwrap().node_identifier;
        TransitionKey::new(screen, node, "LeftClick")
    };
    let notif_key = key_on(&screens, "page_system", "NotificationsPanel");
    transitions.insert(notif_key.clone(), "notifications_panel".to_owned());
    events.insert(notif_key, EVENT_NOTIFICATIONS.to_owned());

    let bt_key = key_on(&screens, "page_devices", "AddBluetoothDevice");
    transitions.insert(bt_key.clone(), "add_device_dialog".to_owned());
    events.insert(bt_key, EVENT_BLUETOOTH.to_owned());

    transitions.insert(
        key_on(&screens, "notifications_panel", "BackToSystem"),
        "page_system".to_owned(),
    );
    transitions.insert(
        key_on(&screens, "add_device_dialog", "CancelAddDevice"),
        "page_devices".to_owned(),
    );

    AppSpec {
        name: "settings".to_owned(),
        screens,
        transitions,
        events,
        initial_screen: "home".to_owned(),
        perturbation_seed: None,
    }
}

/// The synthetic browser app: a main page full of inert links, a menu panel
/// holding the favorite-adding item, and three utility sub-pages. The
/// optimal path to the favorite event is two clicks (menu, then add).
pub fn browser_spec() -> AppSpec {
    let process = "Browser";
    let mut ids = IdAssigner::new(BROWSER_ID_SEED);
    let mut screens = BTreeMap::new();
    let mut transitions = BTreeMap::new();
    let mut events = BTreeMap::new();

    let toolbar = |ids: &mut IdAssigner| {
        let mut bar = ids.element("Toolbar", "Pane", process);
        for button in ["BackButton", "ForwardButton", "RefreshButton", "MenuButton"] {
            bar.children.push(ids.element(button, "Button", process));
        }
        bar
    };

    // Main page: toolbar, tab strip, a content pane of inert links.
    {
        let mut window = ids.element("BrowserWindow", "Window", process);
        window.children.push(toolbar(&mut ids));
        let mut tabs = ids.element("TabStrip", "Pane", process);
        for i in 0..3 {
            tabs.children.push(ids.element(&format!("Tab{i}"), "TabItem", process));
        }
        window.children.push(tabs);
        let mut content = ids.element("ContentPane", "Pane", process);
        content
            .children
            .push(UINode::leaf(None, "PageHeading", "Label", process));
        for i in 0..34 {
            content
                .children
                .push(ids.element(&format!("Link{i}"), "Hyperlink", process));
        }
        window.children.push(content);
        screens.insert("main".to_owned(), under_desktop(window));
    }

    // Menu: toolbar plus the dropdown panel.
    {
        let mut window = ids.element("BrowserWindow", "Window", process);
        window.children.push(toolbar(&mut ids));
        let mut menu = ids.element("MenuPanel", "Pane", process);
        menu.children.push(ids.element("AddToFavorites", "MenuItem", process));
        for item in ["MenuHistory", "MenuDownloads", "MenuSettings"] {
            menu.children.push(ids.element(item, "MenuItem", process));
        }
        for item in [
            "MenuNewTab",
            "MenuNewWindow",
            "MenuZoom",
            "MenuPrint",
            "MenuFind",
            "MenuShare",
            "MenuHelp",
        ] {
            menu.children.push(ids.element(item, "MenuItem", process));
        }
        menu.children.push(ids.element("CloseMenu", "MenuItem", process));
        window.children.push(menu);
        screens.insert("menu".to_owned(), under_desktop(window));
    }

    // Utility sub-pages behind the menu.
    for (screen, list_class, item_prefix) in [
        ("page_history", "HistoryList", "HistoryItem"),
        ("page_downloads", "DownloadsList", "DownloadItem"),
        ("page_settings", "BrowserSettingsList", "BrowserSettingItem"),
    ] {
        let mut window = ids.element("BrowserWindow", "Window", process);
        window.children.push(toolbar(&mut ids));
        let mut list = ids.element(list_class, "Pane", process);
        for i in 0..8 {
            list.children
                .push(ids.element(&format!("{item_prefix}{i}"), "ListItem", process));
        }
        window.children.push(list);
        screens.insert(screen.to_owned(), under_desktop(window));
    }

    let key_on = |screens: &BTreeMap<ScreenId, UITree>, screen: &str, class: &str| {
        let node = click_on_class(&screens[screen], class).unwrap().node_identifier;
        TransitionKey::new(screen, node, "LeftClick")
    };

    // The menu button opens the menu from every screen; on the menu screen
    // it closes it again.
    for screen in ["main", "page_history", "page_downloads", "page_settings"] {
        transitions.insert(key_on(&screens, screen, "MenuButton"), "menu".to_owned());
    }
    transitions.insert(key_on(&screens, "menu", "MenuButton"), "main".to_owned());
    transitions.insert(key_on(&screens, "menu", "CloseMenu"), "main".to_owned());

    // Menu entries.
    let fav_key = key_on(&screens, "menu", "AddToFavorites");
    transitions.insert(fav_key.clone(), "main".to_owned());
    events.insert(fav_key, EVENT_FAVORITE.to_owned());
    for (item, target) in [
        ("MenuHistory", "page_history"),
        ("MenuDownloads", "page_downloads"),
        ("MenuSettings", "page_settings"),
    ] {
        transitions.insert(key_on(&screens, "menu", item), target.to_owned());
    }

    // The back button returns to the main page from the sub-pages.
    for screen in ["page_history", "page_downloads", "page_settings"] {
        transitions.insert(key_on(&screens, screen, "BackButton"), "main".to_owned());
    }

    AppSpec {
        name: "browser".to_owned(),
        screens,
        transitions,
        events,
        initial_screen: "main".to_owned(),
        perturbation_seed: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uitree::{canonical_state_hash, default_action_types, enumerate_actions};
    use std::collections::HashSet;

    /// Independent shortest-path oracle: breadth-first search over screens,
    /// where firing the objective's event terminates. Returns the minimum
    /// number of clicks to fire the event once.
    fn bfs_steps_to_event(spec: &AppSpec, event: &str) -> Option<usize> {
        let mut depth: BTreeMap<&ScreenId, usize> = BTreeMap::new();
        let mut queue = VecDeque::new();
        depth.insert(&spec.initial_screen, 0);
        queue.push_back(&spec.initial_screen);
        let mut best: Option<usize> = None;
        while let Some(screen) = queue.pop_front() {
            let d = depth[screen];
            for (key, fired) in &spec.events {
                if key.screen == *screen && fired == event {
                    best = Some(best.map_or(d + 1, |b: usize| b.min(d + 1)));
                }
            }
            for (key, target) in &spec.transitions {
                if key.screen == *screen && !depth.contains_key(target) {
                    depth.insert(target, d + 1);
                    queue.push_back(target);
                }
            }
        }
        best
    }

    fn actionable_count(tree: &UITree) -> usize {
        tree.pre_order().iter().filter(|n| n.is_actionable()).count()
    }

    #[test]
    fn builtin_specs_exist_and_validate() {
        for name in BUILTIN_APPS {
            let spec = builtin_app(name).unwrap();
            spec.validate().unwrap();
            assert_eq!(builtin_app(name).unwrap(), spec, "construction is deterministic");
        }
        assert!(builtin_app("solitaire").is_none());
    }

    #[test]
    fn settings_home_action_count_is_plausible() {
        let spec = settings_spec();
        let home = &spec.screens["home"];
        let actions = enumerate_actions(home, &default_action_types());
        assert!(actions.len() >= 2 && actions.len() <= 842, "got {}", actions.len());
        // Target item plus at least 20 actionable distractors.
        assert!(actionable_count(home) >= 21, "got {}", actionable_count(home));
    }

    #[test]
    fn browser_main_has_enough_distractors() {
        let spec = browser_spec();
        let main = &spec.screens["main"];
        assert!(actionable_count(main) >= 16, "got {}", actionable_count(main));
    }

    #[test]
    fn optimal_paths_are_two_clicks() {
        assert_eq!(bfs_steps_to_event(&settings_spec(), EVENT_NOTIFICATIONS), Some(2));
        assert_eq!(bfs_steps_to_event(&settings_spec(), EVENT_BLUETOOTH), Some(2));
        assert_eq!(bfs_steps_to_event(&browser_spec(), EVENT_FAVORITE), Some(2));
    }

    #[test]
    fn screen_trees_are_pairwise_distinct() {
        for name in ["settings", "browser"] {
            let spec = builtin_app(name).unwrap();
            let hashes: HashSet<u64> = spec
                .screens
                .values()
                .map(canonical_state_hash)
                .collect();
            assert_eq!(hashes.len(), spec.screens.len());
        }
    }

    #[test]
    fn reset_returns_initial_screen_deterministically() {
        let mut sim = Simulator::new(settings_spec()).unwrap();
        let objective = Objective::new(EVENT_NOTIFICATIONS);
        let a = sim.reset_single(&objective, 7).unwrap();
        let b = sim.reset_single(&objective, 7).unwrap();
        assert_eq!(serialize_tree(&a), serialize_tree(&b));
        assert_eq!(a, settings_spec().screens["home"]);
    }

    #[test]
    fn reset_rejects_unknown_event() {
        let mut sim = Simulator::new(settings_spec()).unwrap();
        let objective = Objective::new("no_such_event");
        assert!(matches!(
            sim.reset_single(&objective, 0),
            Err(EnvError::UnknownEvent(_))
        ));
    }

    #[test]
    fn step_before_reset_is_rejected() {
        let mut sim = Simulator::new(settings_spec()).unwrap();
        let action = UIAction::new(1, "LeftClick");
        assert!(matches!(sim.step(&action), Err(EnvError::NotReset)));
    }

    #[test]
    fn optimal_click_sequence_completes_the_task() {
        let mut sim = Simulator::new(settings_spec()).unwrap();
        let home = sim.reset_single(&Objective::new(EVENT_NOTIFICATIONS), 0).unwrap();

        let to_system = click_on_class(&home, "System").unwrap();
        let step1 = sim.step(&to_system).unwrap();
        assert_eq!(step1.reward, 0.0);
        assert!(!step1.done);
        assert_eq!(step1.next_state, settings_spec().screens["page_system"]);

        let open_panel = click_on_class(&step1.next_state, "NotificationsPanel").unwrap();
        let step2 = sim.step(&open_panel).unwrap();
        assert_eq!(step2.reward, 1.0);
        assert!(step2.done);
        assert_eq!(step2.fired_events, vec![EVENT_NOTIFICATIONS.to_owned()]);
        assert_eq!(step2.next_state, settings_spec().screens["notifications_panel"]);

        // Done blocks further stepping until the next reset.
        assert!(matches!(sim.step(&open_panel), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn inert_click_is_a_no_op() {
        let mut sim = Simulator::new(settings_spec()).unwrap();
        let home = sim.reset_single(&Objective::new(EVENT_NOTIFICATIONS), 0).unwrap();
        let tile = click_on_class(&home, "TileWifi").unwrap();
        let result = sim.step(&tile).unwrap();
        assert_eq!(result.reward, 0.0);
        assert!(!result.done);
        assert_eq!(result.next_state, home);
    }

    #[test]
    fn stale_action_strict_errors_lenient_noops() {
        let ghost = UIAction::new(0x1234_5678_9abc_def0, "LeftClick");
        let mut strict = Simulator::new(settings_spec()).unwrap();
        strict.reset_single(&Objective::new(EVENT_NOTIFICATIONS), 0).unwrap();
        assert!(matches!(strict.step(&ghost), Err(EnvError::NodeNotInState(_))));

        let mut lenient = Simulator::new(settings_spec()).unwrap().with_leniency(true);
        let home = lenient.reset_single(&Objective::new(EVENT_NOTIFICATIONS), 0).unwrap();
        let result = lenient.step(&ghost).unwrap();
        assert_eq!(result.next_state, home);
        assert_eq!(result.reward, 0.0);
    }

    #[test]
    fn target_count_two_needs_two_firings() {
        let mut sim = Simulator::new(settings_spec()).unwrap();
        let objective = Objective::with_target(EVENT_NOTIFICATIONS, 2);
        let home = sim.reset_single(&objective, 0).unwrap();

        let s1 = sim.step(&click_on_class(&home, "System").unwrap()).unwrap();
        let s2 = sim.step(&click_on_class(&s1.next_state, "NotificationsPanel").unwrap()).unwrap();
        assert_eq!(s2.reward, 1.0);
        assert!(!s2.done, "one firing of two is not done");
        let s3 = sim.step(&click_on_class(&s2.next_state, "BackToSystem").unwrap()).unwrap();
        let s4 = sim.step(&click_on_class(&s3.next_state, "NotificationsPanel").unwrap()).unwrap();
        assert!(s4.done);
        assert_eq!(sim.event_counts()[EVENT_NOTIFICATIONS], 2);
    }

    #[test]
    fn multi_objective_done_fires_on_any_target() {
        let mut sim = Simulator::new(settings_spec()).unwrap();
        let objectives = vec![Objective::new(EVENT_NOTIFICATIONS), Objective::new(EVENT_BLUETOOTH)];
        let home = sim.reset(&objectives, 0).unwrap();
        let s1 = sim.step(&click_on_class(&home, "Devices").unwrap()).unwrap();
        let s2 = sim.step(&click_on_class(&s1.next_state, "AddBluetoothDevice").unwrap()).unwrap();
        assert!(s2.done);
        assert_eq!(s2.fired_events, vec![EVENT_BLUETOOTH.to_owned()]);
    }

    #[test]
    fn perturbed_variant_differs_only_in_automation_ids() {
        let base = settings_spec();
        let perturbed = builtin_app("settings_perturbed").unwrap();
        assert_eq!(perturbed.perturbation_seed, Some(PERTURBATION_SEED));
        assert_eq!(base.screens.len(), perturbed.screens.len());
        for (id, tree) in &base.screens {
            let other = &perturbed.screens[id];
            let a: Vec<_> = tree.pre_order();
            let b: Vec<_> = other.pre_order();
            assert_eq!(a.len(), b.len());
            let mut any_id_differs = false;
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.class_name, y.class_name);
                assert_eq!(x.control_type, y.control_type);
                assert_eq!(x.process_name, y.process_name);
                assert_eq!(x.automation_id.is_some(), y.automation_id.is_some());
                if x.automation_id.is_some() && x.automation_id != y.automation_id {
                    any_id_differs = true;
                }
            }
            assert!(any_id_differs, "screen {id:?} kept all automation ids");
            assert_ne!(canonical_state_hash(tree), canonical_state_hash(other));
        }
        // The perturbed spec is still a coherent app.
        perturbed.validate().unwrap();
        assert_eq!(
            bfs_steps_to_event(&perturbed, EVENT_NOTIFICATIONS),
            Some(2),
            "perturbation preserves the task structure"
        );
    }

    #[test]
    fn spec_json_round_trips() {
        let spec = browser_spec();
        let restored = AppSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(restored, spec);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = settings_spec();
        spec.initial_screen = "nowhere".to_owned();
        assert!(matches!(spec.validate(), Err(EnvError::InvalidSpec(_))));

        let mut spec = settings_spec();
        let key = spec.transitions.keys().next().unwrap().clone();
        spec.transitions.insert(key, "nowhere".to_owned());
        assert!(matches!(spec.validate(), Err(EnvError::InvalidSpec(_))));

        let mut spec = settings_spec();
        spec.screens.insert("island".to_owned(), spec.screens["home"].clone());
        assert!(
            matches!(spec.validate(), Err(EnvError::InvalidSpec(ref m)) if m.contains("unreachable"))
        );
    }

    #[test]
    fn primary_process_names_the_app() {
        assert_eq!(settings_spec().primary_process(), "Settings");
        assert_eq!(browser_spec().primary_process(), "Browser");
    }

    #[test]
    fn scripted_random_walk_is_deterministic_and_conserves_reward() {
        use rand::SeedableRng;
        let run = |seed: u64| {
            let mut sim = Simulator::new(settings_spec()).unwrap();
            let mut tree = sim.reset_single(&Objective::new(EVENT_NOTIFICATIONS), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut total = 0.0;
            let mut hashes = vec![canonical_state_hash(&tree)];
            for _ in 0..200 {
                let actions = enumerate_actions(&tree, &default_action_types());
                let action = &actions[rng.random_range(0..actions.len())];
                let result = sim.step(action).unwrap();
                total += result.reward;
                hashes.push(canonical_state_hash(&result.next_state));
                tree = result.next_state;
                if result.done {
                    break;
                }
            }
            (total, hashes)
        };
        let (total_a, hashes_a) = run(3);
        let (total_b, hashes_b) = run(3);
        assert_eq!(hashes_a, hashes_b, "identical seeds replay identically");
        assert_eq!(total_a, total_b);
        assert!(total_a <= 1.0, "reward cannot exceed the target count");
        let distinct: HashSet<&u64> = hashes_a.iter().collect();
        assert!(distinct.len() <= settings_spec().screens.len());
    }
}
