//! The agentic supernet: typed containers of interchangeable tools, routed
//! edges forming a DAG, the per-position legal action set, and the uniform
//! tool I/O contract.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::State;
use crate::environment::tools::{ToolRegistry, ToolSpec};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// The seven container labels. No other label parses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ContainerType {
    Segmentation,
    Classify,
    Grounding,
    Report,
    VQAnalyze,
    GuidelineLookup,
    MKG,
}

impl ContainerType {
    pub const ALL: [ContainerType; 7] = [
        ContainerType::Segmentation,
        ContainerType::Classify,
        ContainerType::Grounding,
        ContainerType::Report,
        ContainerType::VQAnalyze,
        ContainerType::GuidelineLookup,
        ContainerType::MKG,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ContainerType::Segmentation => "Segmentation",
            ContainerType::Classify => "Classify",
            ContainerType::Grounding => "Grounding",
            ContainerType::Report => "Report",
            ContainerType::VQAnalyze => "VQAnalyze",
            ContainerType::GuidelineLookup => "GuidelineLookup",
            ContainerType::MKG => "MKG",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    /// Declared payload kind of every tool in a container of this type.
    pub fn output_kind(self) -> OutputKind {
        match self {
            ContainerType::Segmentation => OutputKind::Image,
            _ => OutputKind::Record,
        }
    }
}

impl fmt::Display for ContainerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ContainerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.label() == s)
            .ok_or_else(|| Error::UnknownContainerType(s.to_string()))
    }
}

impl TryFrom<String> for ContainerType {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ContainerType> for String {
    fn from(t: ContainerType) -> String {
        t.label().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    Record,
    Image,
}

/// Field-selection rule ρ attached to an edge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RoutingRepr", into = "RoutingRepr")]
pub enum RoutingPolicy {
    All,
    None,
    FromContainers(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RoutingRepr {
    Keyword(String),
    From { from_containers: Vec<String> },
}

impl TryFrom<RoutingRepr> for RoutingPolicy {
    type Error = Error;
    fn try_from(r: RoutingRepr) -> Result<Self> {
        match r {
            RoutingRepr::Keyword(k) if k == "all" => Ok(RoutingPolicy::All),
            RoutingRepr::Keyword(k) if k == "none" => Ok(RoutingPolicy::None),
            RoutingRepr::Keyword(k) => Err(Error::InvalidRouting(k)),
            RoutingRepr::From { from_containers } => Ok(RoutingPolicy::FromContainers(from_containers)),
        }
    }
}

impl From<RoutingPolicy> for RoutingRepr {
    fn from(r: RoutingPolicy) -> Self {
        match r {
            RoutingPolicy::All => RoutingRepr::Keyword("all".into()),
            RoutingPolicy::None => RoutingRepr::Keyword("none".into()),
            RoutingPolicy::FromContainers(ids) => RoutingRepr::From { from_containers: ids },
        }
    }
}

// ---------------------------------------------------------------------------
// Declarative graph document
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerSpec {
    pub id: String,
    pub ctype: ContainerType,
    pub tools: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    pub routing: RoutingPolicy,
}

/// The on-disk supernet document. `tools` optionally declares simulated tools
/// that are added to (or override) the registry before validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetSpec {
    pub containers: Vec<ContainerSpec>,
    pub edges: Vec<EdgeSpec>,
    pub entry: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<ToolSpec>,
}

impl SupernetSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// The seven-container topology used by the standard synthetic suites.
    pub fn standard() -> Self {
        Self::from_json(include_str!("../data/standard_graph.json")).expect("bundled graph parses")
    }
}

// ---------------------------------------------------------------------------
// Validated graph
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Container {
    pub id: String,
    pub ctype: ContainerType,
    pub tools: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub routing: RoutingPolicy,
}

/// Where the controller currently stands: before the first step, or at the
/// container it executed last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    Start,
    At(usize),
}

/// Global action index. Every (container, tool) pair and EarlyExit own one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Invoke { container: usize, tool: usize },
    EarlyExit,
}

#[derive(Clone, Debug)]
pub struct SupernetGraph {
    containers: Vec<Container>,
    index: HashMap<String, usize>,
    edges: Vec<Edge>,
    out_edges: Vec<Vec<usize>>,
    entry: usize,
    actions: Vec<Action>,
    action_names: Vec<String>,
    first_action: Vec<usize>,
    registry: ToolRegistry,
    fingerprint: String,
}

/// Validate a supernet document against a tool registry.
pub fn build_graph(spec: &SupernetSpec, base_registry: &ToolRegistry) -> Result<SupernetGraph> {
    let mut registry = base_registry.clone();
    for t in &spec.tools {
        registry.register(t.clone())?;
    }

    let mut index = HashMap::new();
    let mut containers = Vec::with_capacity(spec.containers.len());
    for c in &spec.containers {
        if index.insert(c.id.clone(), containers.len()).is_some() {
            return Err(Error::DuplicateContainer(c.id.clone()));
        }
        if c.tools.is_empty() {
            return Err(Error::EmptyToolList(c.id.clone()));
        }
        for t in &c.tools {
            let tool = registry.get(t).ok_or_else(|| Error::UnknownTool {
                container: c.id.clone(),
                tool: t.clone(),
            })?;
            if tool.ctype != c.ctype {
                return Err(Error::SignatureMismatch {
                    container: c.id.clone(),
                    tool: t.clone(),
                    container_type: c.ctype.to_string(),
                    tool_type: tool.ctype.to_string(),
                });
            }
        }
        containers.push(Container {
            id: c.id.clone(),
            ctype: c.ctype,
            tools: c.tools.clone(),
        });
    }

    let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownContainer(id.to_string()));
    let entry = lookup(&spec.entry)?;

    let mut edges = Vec::with_capacity(spec.edges.len());
    let mut out_edges = vec![Vec::new(); containers.len()];
    for e in &spec.edges {
        let (from, to) = (lookup(&e.from)?, lookup(&e.to)?);
        if out_edges[from].iter().any(|&k: &usize| edges.get(k).map(|x: &Edge| x.to) == Some(to)) {
            return Err(Error::DuplicateEdge(e.from.clone(), e.to.clone()));
        }
        if let RoutingPolicy::FromContainers(ids) = &e.routing {
            for id in ids {
                lookup(id)?;
            }
        }
        out_edges[from].push(edges.len());
        edges.push(Edge {
            from,
            to,
            routing: e.routing.clone(),
        });
    }

    if let Some(c) = find_cycle(containers.len(), &edges, &out_edges) {
        return Err(Error::CycleDetected(containers[c].id.clone()));
    }

    let mut seen = vec![false; containers.len()];
    let mut queue = VecDeque::from([entry]);
    seen[entry] = true;
    while let Some(u) = queue.pop_front() {
        for &k in &out_edges[u] {
            let v = edges[k].to;
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::UnreachableContainer(containers[i].id.clone()));
    }

    let mut actions = Vec::new();
    let mut action_names = Vec::new();
    let mut first_action = Vec::with_capacity(containers.len());
    for (ci, c) in containers.iter().enumerate() {
        first_action.push(actions.len());
        for (ti, t) in c.tools.iter().enumerate() {
            actions.push(Action::Invoke { container: ci, tool: ti });
            action_names.push(format!("{}/{}", c.id, t));
        }
    }
    actions.push(Action::EarlyExit);
    action_names.push("EarlyExit".to_string());

    // Fingerprint covers the structure and every tool the graph can call.
    let used_tools: BTreeMap<&str, &ToolSpec> = containers
        .iter()
        .flat_map(|c| c.tools.iter())
        .map(|t| (t.as_str(), registry.get(t).expect("validated")))
        .collect();
    let canonical = serde_json::json!({
        "containers": spec.containers,
        "edges": spec.edges,
        "entry": spec.entry,
        "tools": used_tools,
    });
    let fingerprint = sha256_hex(canonical.to_string().as_bytes())[..16].to_string();

    Ok(SupernetGraph {
        containers,
        index,
        edges,
        out_edges,
        entry,
        actions,
        action_names,
        first_action,
        registry,
        fingerprint,
    })
}

fn find_cycle(n: usize, edges: &[Edge], out_edges: &[Vec<usize>]) -> Option<usize> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; n];
    for root in 0..n {
        if color[root] != 0 {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        color[root] = 1;
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if let Some(&k) = out_edges[u].get(*next) {
                *next += 1;
                let v = edges[k].to;
                match color[v] {
                    0 => {
                        color[v] = 1;
                        stack.push((v, 0));
                    }
                    1 => return Some(v),
                    _ => {}
                }
            } else {
                color[u] = 2;
                stack.pop();
            }
        }
    }
    None
}

impl SupernetGraph {
    pub fn containers(&self) -> &[Container] {
        &self.containers
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn entry(&self) -> usize {
        self.entry
    }

    pub fn registry(&self) -> &ToolRegistry {
        &self.registry
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn container_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Parse a position label: `start` or a container id.
    pub fn position(&self, label: &str) -> Result<Position> {
        if label == "start" {
            return Ok(Position::Start);
        }
        self.container_index(label)
            .map(Position::At)
            .ok_or_else(|| Error::UnknownPosition(label.to_string()))
    }

    pub fn position_label(&self, pos: Position) -> &str {
        match pos {
            Position::Start => "start",
            Position::At(i) => &self.containers[i].id,
        }
    }

    /// Size of the global action index (all tools plus EarlyExit).
    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn exit_action(&self) -> ActionId {
        ActionId(self.actions.len() - 1)
    }

    pub fn action(&self, id: ActionId) -> &Action {
        &self.actions[id.0]
    }

    pub fn action_name(&self, id: ActionId) -> &str {
        &self.action_names[id.0]
    }

    pub fn action_by_name(&self, name: &str) -> Option<ActionId> {
        self.action_names.iter().position(|n| n == name).map(ActionId)
    }

    pub fn invoke_id(&self, container: usize, tool: usize) -> ActionId {
        ActionId(self.first_action[container] + tool)
    }

    pub fn tool_spec(&self, container: usize, tool: usize) -> &ToolSpec {
        self.registry
            .get(&self.containers[container].tools[tool])
            .expect("validated at build")
    }

    /// Successor containers of a position, in edge declaration order.
    pub fn successors(&self, pos: Position) -> Vec<usize> {
        match pos {
            Position::Start => vec![self.entry],
            Position::At(u) => self.out_edges[u].iter().map(|&k| self.edges[k].to).collect(),
        }
    }

    /// Legal actions at a position: every tool of every successor (edge order,
    /// then tool order), followed by EarlyExit.
    pub fn legal_actions(&self, pos: Position) -> Result<Vec<ActionId>> {
        if let Position::At(u) = pos {
            if u >= self.containers.len() {
                return Err(Error::UnknownPosition(u.to_string()));
            }
        }
        let mut out = Vec::new();
        for v in self.successors(pos) {
            let base = self.first_action[v];
            out.extend((0..self.containers[v].tools.len()).map(|t| ActionId(base + t)));
        }
        out.push(self.exit_action());
        Ok(out)
    }

    /// Routing rule for moving from `pos` into container `to`. The first step
    /// out of `Start` forwards everything.
    pub fn routing(&self, pos: Position, to: usize) -> Option<&RoutingPolicy> {
        match pos {
            Position::Start => (to == self.entry).then_some(&RoutingPolicy::All),
            Position::At(u) => self.out_edges[u]
                .iter()
                .map(|&k| &self.edges[k])
                .find(|e| e.to == to)
                .map(|e| &e.routing),
        }
    }

    /// Container ids in a topological order.
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.containers.len();
        let mut indeg = vec![0usize; n];
        for e in &self.edges {
            indeg[e.to] += 1;
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &k in &self.out_edges[u] {
                let v = self.edges[k].to;
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    queue.push_back(v);
                }
            }
        }
        order
    }

    /// Largest legal-action set over all positions.
    pub fn max_legal_actions(&self) -> usize {
        std::iter::once(Position::Start)
            .chain((0..self.containers.len()).map(Position::At))
            .map(|p| self.legal_actions(p).map(|a| a.len()).unwrap_or(0))
            .max()
            .unwrap_or(1)
    }
}

// ---------------------------------------------------------------------------
// Tool I/O
// ---------------------------------------------------------------------------

/// A small numeric image (row-major).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageBlock {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageBlock {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> Option<&[f64]> {
        (r < self.height && self.data.len() == self.width * self.height)
            .then(|| &self.data[r * self.width..(r + 1) * self.width])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolInput {
    pub sub_query: String,
    pub roi_image: Option<ImageBlock>,
    pub context_slice: String,
    pub hyperparams: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Record {
        fields: BTreeMap<String, String>,
        confidence: f64,
    },
    Image {
        image: ImageBlock,
    },
    /// Degraded output carrying no information.
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolOutput {
    pub source: ContainerType,
    pub payload: Payload,
    pub latency: f64,
    pub tokens: u64,
}

impl ToolOutput {
    pub fn is_informative(&self) -> bool {
        !matches!(self.payload, Payload::Empty)
    }
}

/// Build the tool input for entering a container under `routing`.
pub fn route_payload(routing: &RoutingPolicy, state: &State) -> Result<ToolInput> {
    let context_slice = match routing {
        RoutingPolicy::None => String::new(),
        RoutingPolicy::All => state
            .memory
            .entries()
            .iter()
            .map(|e| e.summary.as_str())
            .collect::<Vec<_>>()
            .join("\n"),
        RoutingPolicy::FromContainers(ids) => {
            for id in ids {
                if !state.memory.entries().iter().any(|e| &e.container_id == id) {
                    return Err(Error::RoutingFieldMissing(id.clone()));
                }
            }
            state
                .memory
                .entries()
                .iter()
                .filter(|e| ids.contains(&e.container_id))
                .map(|e| e.summary.as_str())
                .collect::<Vec<_>>()
                .join("\n")
        }
    };
    Ok(ToolInput {
        sub_query: state.query.clone(),
        roi_image: (!state.image.is_empty()).then(|| state.image.clone()),
        context_slice,
        hyperparams: BTreeMap::new(),
    })
}

/// Run an `Invoke` action against the graph's registry.
pub fn execute_tool(graph: &SupernetGraph, action: ActionId, input: &ToolInput, seed: u64) -> Result<ToolOutput> {
    match graph.action(action) {
        Action::EarlyExit => Err(Error::NotAnInvocation),
        Action::Invoke { container, tool } => {
            let spec = graph.tool_spec(*container, *tool);
            let mut input = input.clone();
            for (k, v) in &spec.hyperparams {
                input.hyperparams.entry(k.clone()).or_insert(*v);
            }
            spec.run(&input, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::tools::{ToolBehavior, ToolRegistry};
    use crate::memory::{Memory, MemoryEntry};

    fn tool(id: &str, ctype: ContainerType) -> ToolSpec {
        ToolSpec::new(id, ctype, ToolBehavior::Decode, 1.0, 10)
    }

    fn registry() -> ToolRegistry {
        let mut r = ToolRegistry::default();
        for t in ContainerType::ALL {
            for k in 0..3 {
                r.register(tool(&format!("{}_{k}", t.label().to_lowercase()), t)).unwrap();
            }
        }
        r
    }

    fn spec(json: &str) -> SupernetSpec {
        SupernetSpec::from_json(json).unwrap()
    }

    #[test]
    fn container_type_labels_parse_exactly() {
        for t in ContainerType::ALL {
            assert_eq!(t.label().parse::<ContainerType>().unwrap(), t);
        }
        assert!("classify".parse::<ContainerType>().is_err());
        assert!("Detector".parse::<ContainerType>().is_err());
    }

    #[test]
    fn linear_two_container_graph() {
        let g = build_graph(
            &spec(
                r#"{"containers":[{"id":"c","ctype":"Classify","tools":["classify_0"]},
                                   {"id":"r","ctype":"Report","tools":["report_0"]}],
                    "edges":[{"from":"c","to":"r","routing":"all"}],
                    "entry":"c"}"#,
            ),
            &registry(),
        )
        .unwrap();
        assert_eq!(g.containers().len(), 2);
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.containers()[g.entry()].id, "c");
    }

    #[test]
    fn two_cycle_is_rejected() {
        let err = build_graph(
            &spec(
                r#"{"containers":[{"id":"a","ctype":"Classify","tools":["classify_0"]},
                                   {"id":"b","ctype":"Report","tools":["report_0"]}],
                    "edges":[{"from":"a","to":"b","routing":"all"},{"from":"b","to":"a","routing":"all"}],
                    "entry":"a"}"#,
            ),
            &registry(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::CycleDetected(_)), "{err}");
    }

    #[test]
    fn unknown_tool_unreachable_and_empty_are_named() {
        let reg = registry();
        let e = build_graph(
            &spec(r#"{"containers":[{"id":"a","ctype":"Classify","tools":["nope"]}],"edges":[],"entry":"a"}"#),
            &reg,
        )
        .unwrap_err();
        assert!(matches!(e, Error::UnknownTool { ref tool, .. } if tool == "nope"));

        let e = build_graph(
            &spec(
                r#"{"containers":[{"id":"a","ctype":"Classify","tools":["classify_0"]},
                                   {"id":"b","ctype":"Report","tools":["report_0"]}],
                    "edges":[],"entry":"a"}"#,
            ),
            &reg,
        )
        .unwrap_err();
        assert!(matches!(e, Error::UnreachableContainer(ref c) if c == "b"));

        let e = build_graph(
            &spec(r#"{"containers":[{"id":"a","ctype":"Classify","tools":[]}],"edges":[],"entry":"a"}"#),
            &reg,
        )
        .unwrap_err();
        assert!(matches!(e, Error::EmptyToolList(ref c) if c == "a"));
    }

    #[test]
    fn mixed_signatures_rejected() {
        let e = build_graph(
            &spec(r#"{"containers":[{"id":"a","ctype":"Classify","tools":["classify_0","report_0"]}],"edges":[],"entry":"a"}"#),
            &registry(),
        )
        .unwrap_err();
        assert!(matches!(e, Error::SignatureMismatch { .. }));
    }

    #[test]
    fn routing_keywords_parse() {
        let r: RoutingPolicy = serde_json::from_str("\"all\"").unwrap();
        assert_eq!(r, RoutingPolicy::All);
        let r: RoutingPolicy = serde_json::from_str(r#"{"from_containers":["x"]}"#).unwrap();
        assert_eq!(r, RoutingPolicy::FromContainers(vec!["x".into()]));
        assert!(serde_json::from_str::<RoutingPolicy>("\"some\"").is_err());
    }

    fn seven_type_graph() -> SupernetGraph {
        // entry has two successors holding 2 and 1 tools.
        build_graph(
            &spec(
                r#"{"containers":[
                    {"id":"cls","ctype":"Classify","tools":["classify_0"]},
                    {"id":"seg","ctype":"Segmentation","tools":["segmentation_0","segmentation_1"]},
                    {"id":"gnd","ctype":"Grounding","tools":["grounding_0"]},
                    {"id":"vqa","ctype":"VQAnalyze","tools":["vqanalyze_0"]},
                    {"id":"rep","ctype":"Report","tools":["report_0","report_1","report_2"]},
                    {"id":"gl","ctype":"GuidelineLookup","tools":["guidelinelookup_0"]},
                    {"id":"mkg","ctype":"MKG","tools":["mkg_0"]}],
                  "edges":[
                    {"from":"cls","to":"seg","routing":"all"},
                    {"from":"cls","to":"gnd","routing":"all"},
                    {"from":"seg","to":"vqa","routing":"all"},
                    {"from":"gnd","to":"vqa","routing":{"from_containers":["gnd"]}},
                    {"from":"vqa","to":"rep","routing":"all"},
                    {"from":"rep","to":"gl","routing":"none"},
                    {"from":"rep","to":"mkg","routing":"all"}],
                  "entry":"cls"}"#,
            ),
            &registry(),
        )
        .unwrap()
    }

    #[test]
    fn legal_action_counts() {
        let g = seven_type_graph();
        assert_eq!(g.containers().len(), 7);
        let cls = g.container_index("cls").unwrap();
        assert_eq!(g.legal_actions(Position::At(cls)).unwrap().len(), 4);
        let vqa = g.container_index("vqa").unwrap();
        // one successor with 3 tools
        assert_eq!(g.legal_actions(Position::At(vqa)).unwrap().len(), 4);
        let gl = g.container_index("gl").unwrap();
        assert_eq!(g.legal_actions(Position::At(gl)).unwrap(), vec![g.exit_action()]);
        assert!(g.legal_actions(Position::At(99)).is_err());
        assert!(matches!(g.position("nowhere"), Err(Error::UnknownPosition(_))));
    }

    #[test]
    fn legal_actions_follow_edge_then_tool_order() {
        let g = seven_type_graph();
        let cls = g.container_index("cls").unwrap();
        let names: Vec<_> = g
            .legal_actions(Position::At(cls))
            .unwrap()
            .into_iter()
            .map(|a| g.action_name(a).to_string())
            .collect();
        assert_eq!(names, ["seg/segmentation_0", "seg/segmentation_1", "gnd/grounding_0", "EarlyExit"]);
    }

    fn state_with(entries: &[(&str, &str)]) -> State {
        let mut memory = Memory::new(16, 256);
        for (i, (c, s)) in entries.iter().enumerate() {
            memory
                .append(MemoryEntry {
                    container_id: c.to_string(),
                    summary: s.to_string(),
                    image_ref: None,
                    step: i as u32 + 1,
                })
                .unwrap();
        }
        State {
            query: "q".into(),
            context: String::new(),
            image: ImageBlock::empty(),
            memory,
            position: Position::Start,
        }
    }

    #[test]
    fn routing_all_on_empty_memory_is_empty() {
        let input = route_payload(&RoutingPolicy::All, &state_with(&[])).unwrap();
        assert_eq!(input.context_slice, "");
        assert_eq!(input.sub_query, "q");
    }

    #[test]
    fn routing_from_containers_selects_matching_summary() {
        let st = state_with(&[("Classify", "Classify: A (0.90)"), ("seg", "Segmentation: mask 8x8")]);
        let input = route_payload(&RoutingPolicy::FromContainers(vec!["Classify".into()]), &st).unwrap();
        let oracle: Vec<_> = st
            .memory
            .entries()
            .iter()
            .filter(|e| e.container_id == "Classify")
            .map(|e| e.summary.clone())
            .collect();
        assert_eq!(input.context_slice, oracle.join("\n"));
        assert_eq!(input.context_slice, "Classify: A (0.90)");
    }

    #[test]
    fn routing_missing_container_errors() {
        let st = state_with(&[("seg", "x")]);
        let e = route_payload(&RoutingPolicy::FromContainers(vec!["gnd".into()]), &st).unwrap_err();
        assert!(matches!(e, Error::RoutingFieldMissing(ref c) if c == "gnd"));
        assert_eq!(route_payload(&RoutingPolicy::None, &st).unwrap().context_slice, "");
    }

    #[test]
    fn execute_rejects_early_exit() {
        let g = seven_type_graph();
        let input = route_payload(&RoutingPolicy::All, &state_with(&[])).unwrap();
        assert!(matches!(execute_tool(&g, g.exit_action(), &input, 0), Err(Error::NotAnInvocation)));
    }

    #[test]
    fn legal_actions_are_deterministic_and_always_include_exit() {
        let g = seven_type_graph();
        for p in std::iter::once(Position::Start).chain((0..7).map(Position::At)) {
            let a = g.legal_actions(p).unwrap();
            assert_eq!(a, g.legal_actions(p).unwrap());
            assert_eq!(*a.last().unwrap(), g.exit_action());
        }
        assert_eq!(g.topological_order().len(), 7);
    }
}
