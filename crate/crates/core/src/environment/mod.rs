//! Synthetic task suites with known optimal workflows.
//!
//! Each instance plants one value per required answer field into a small
//! numeric image (one row per container type). The required plan is a path
//! through the supernet whose container types cover exactly those fields, so
//! executing it with informative tools and synthesizing recovers the truth.

pub mod expert;
pub mod scoring;
pub mod tools;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{HashingExtractors, State};
use crate::error::{Error, Result};
use crate::memory::{Memory, DEFAULT_CAPACITY, DEFAULT_TOKEN_BUDGET};
use crate::supernet::{ActionId, ContainerType, ImageBlock, Position, SupernetGraph};
use crate::util::derived_rng;

pub use expert::{best_tools, expert_action, expert_choices, plan_progress};
pub use scoring::{canonical_answer_key, heuristic_reward, synthesize_answer, utility, Answer, HeuristicSpec};
pub use tools::{ToolBehavior, ToolRegistry, ToolSpec};

/// Columns of the planted image; every vocabulary fits in one row.
pub const IMAGE_WIDTH: usize = 8;
/// Side of the square segmentation mask.
pub const MASK_WIDTH: usize = 5;
/// Upper bound of background noise; planted cells are 1.0.
pub const NOISE_LEVEL: f64 = 0.3;
pub const DEFAULT_T_MAX: usize = 8;

/// Answer field each container type reports.
pub fn answer_field(ctype: ContainerType) -> &'static str {
    match ctype {
        ContainerType::Classify => "finding",
        ContainerType::Segmentation => "size",
        ContainerType::Grounding => "location",
        ContainerType::VQAnalyze => "severity",
        ContainerType::Report => "impression",
        ContainerType::GuidelineLookup => "recommendation",
        ContainerType::MKG => "relation",
    }
}

pub fn field_type(field: &str) -> Option<ContainerType> {
    ContainerType::ALL.into_iter().find(|t| answer_field(*t) == field)
}

pub fn vocabulary(ctype: ContainerType) -> &'static [&'static str] {
    match ctype {
        ContainerType::Classify => &[
            "normal",
            "pneumonia",
            "effusion",
            "pneumothorax",
            "edema",
            "cardiomegaly",
            "nodule",
            "atelectasis",
        ],
        ContainerType::Segmentation => &["small", "medium", "large"],
        ContainerType::Grounding => &["left-upper", "left-lower", "right-upper", "right-lower", "bilateral", "central"],
        ContainerType::VQAnalyze => &["mild", "moderate", "severe"],
        ContainerType::Report => &["stable", "new", "improving", "worsening"],
        ContainerType::GuidelineLookup => &["routine", "follow-up", "ct-chest", "urgent-referral"],
        ContainerType::MKG => &["infectious", "vascular", "neoplastic", "mechanical"],
    }
}

/// Image row holding a container type's planted value.
pub fn field_row(ctype: ContainerType) -> usize {
    ctype.index()
}

/// Container types whose tools only produce information from forwarded context.
pub fn needs_context(ctype: ContainerType) -> bool {
    matches!(
        ctype,
        ContainerType::Report | ContainerType::GuidelineLookup | ContainerType::MKG
    )
}

/// Seeded noise grid with a 1.0 at each planted value's vocabulary index.
pub fn planted_image(fields: &BTreeMap<String, String>, seed: u64) -> ImageBlock {
    let mut rng = derived_rng(seed, "image", 0);
    let height = ContainerType::ALL.len();
    let mut data: Vec<f64> = (0..IMAGE_WIDTH * height).map(|_| rng.gen::<f64>() * NOISE_LEVEL).collect();
    for (field, value) in fields {
        let Some(t) = field_type(field) else { continue };
        if let Some(k) = vocabulary(t).iter().position(|v| v == value) {
            data[field_row(t) * IMAGE_WIDTH + k] = 1.0;
        }
    }
    ImageBlock {
        width: IMAGE_WIDTH,
        height,
        data,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub ctype: ContainerType,
    pub field: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub answer_fields: BTreeMap<String, String>,
}

/// One line of a suite file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteRecord {
    pub id: String,
    pub seed: u64,
    pub query: String,
    #[serde(default)]
    pub context: String,
    pub planted: BTreeMap<String, String>,
    pub required_plan: Vec<PlanStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mandatory: Option<ContainerType>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "SuiteRecord", try_from = "SuiteRecord")]
pub struct QueryInstance {
    pub id: String,
    pub seed: u64,
    pub query: String,
    pub context: String,
    pub image: ImageBlock,
    pub truth: GroundTruth,
    pub required_plan: Vec<PlanStep>,
    /// Container type that must be visited for any compliance credit.
    pub mandatory: Option<ContainerType>,
}

impl From<QueryInstance> for SuiteRecord {
    fn from(q: QueryInstance) -> Self {
        SuiteRecord {
            id: q.id,
            seed: q.seed,
            query: q.query,
            context: q.context,
            planted: q.truth.answer_fields,
            required_plan: q.required_plan,
            mandatory: q.mandatory,
        }
    }
}

impl TryFrom<SuiteRecord> for QueryInstance {
    type Error = Error;

    fn try_from(r: SuiteRecord) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(format!("instance `{}`: {m}", r.id)));
        if r.planted.is_empty() {
            return bad("ground truth is empty".into());
        }
        if r.required_plan.is_empty() {
            return bad("required plan is empty".into());
        }
        for (k, v) in &r.planted {
            let Some(t) = field_type(k) else {
                return bad(format!("unknown answer field `{k}`"));
            };
            if !vocabulary(t).contains(&v.as_str()) {
                return bad(format!("value `{v}` is not in the `{k}` vocabulary"));
            }
        }
        for s in &r.required_plan {
            if answer_field(s.ctype) != s.field || !r.planted.contains_key(&s.field) {
                return bad(format!("plan step {} does not address a planted field", s.ctype));
            }
        }
        let image = planted_image(&r.planted, r.seed);
        Ok(QueryInstance {
            id: r.id,
            seed: r.seed,
            query: r.query,
            context: r.context,
            image,
            truth: GroundTruth {
                answer_fields: r.planted,
            },
            required_plan: r.required_plan,
            mandatory: r.mandatory,
        })
    }
}

impl QueryInstance {
    pub fn initial_state(&self, memory: Memory) -> State {
        State {
            query: self.query.clone(),
            context: self.context.clone(),
            image: self.image.clone(),
            memory,
            position: Position::Start,
        }
    }

    pub fn plan_types(&self) -> Vec<ContainerType> {
        self.required_plan.iter().map(|s| s.ctype).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub size: usize,
    /// Inclusive plan-length range for non-simple instances.
    pub plan_len: (usize, usize),
    /// Fraction of instances whose plan is a single step.
    pub simple_fraction: f64,
    /// Fraction of instances whose plan must end at `safety_container`.
    pub safety_fraction: f64,
    pub safety_container: ContainerType,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            size: 200,
            plan_len: (2, 4),
            simple_fraction: 0.25,
            safety_fraction: 0.2,
            safety_container: ContainerType::GuidelineLookup,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.plan_len;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("plan_len range [{lo}, {hi}] is invalid")));
        }
        for (name, f) in [("simple_fraction", self.simple_fraction), ("safety_fraction", self.safety_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.simple_fraction + self.safety_fraction > 1.0 + 1e-12 {
            return Err(Error::Config("simple_fraction + safety_fraction exceeds 1".into()));
        }
        Ok(())
    }
}

/// Every container path starting at the entry, up to `max_len` containers.
pub fn enumerate_paths(graph: &SupernetGraph, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack = vec![vec![graph.entry()]];
    while let Some(path) = stack.pop() {
        if path.len() > max_len {
            continue;
        }
        let last = *path.last().expect("non-empty path");
        out.push(path.clone());
        for s in graph.successors(Position::At(last)).into_iter().rev() {
            let mut p = path.clone();
            p.push(s);
            stack.push(p);
        }
    }
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

const PHRASES: [(ContainerType, &[&str]); 7] = [
    (ContainerType::Classify, &["what is the primary finding", "identify the main abnormality"]),
    (ContainerType::Segmentation, &["how large is the lesion", "measure the affected region"]),
    (ContainerType::Grounding, &["where is it located", "localize the abnormality"]),
    (ContainerType::VQAnalyze, &["how severe is it", "grade the severity"]),
    (ContainerType::Report, &["draft the impression", "summarize the interval change"]),
    (ContainerType::GuidelineLookup, &["what follow-up is recommended", "which guideline action applies"]),
    (ContainerType::MKG, &["what mechanism links the findings", "relate the finding to its cause"]),
];

const OPENERS: [&str; 4] = ["chest radiograph:", "frontal view:", "portable study:", "follow-up film:"];
const HISTORIES: [&str; 5] = ["cough and fever", "shortness of breath", "post-operative", "routine screening", "chest pain"];

fn phrase_for(ctype: ContainerType, rng: &mut impl Rng) -> &'static str {
    let options = PHRASES.iter().find(|(t, _)| *t == ctype).map(|(_, p)| *p).expect("phrase per type");
    options[rng.gen_range(0..options.len())]
}

fn instance_from_path(graph: &SupernetGraph, path: &[usize], id: String, seed: u64, mandatory: Option<ContainerType>) -> QueryInstance {
    let mut rng = derived_rng(seed, "instance", 0);
    let types: Vec<ContainerType> = path.iter().map(|&c| graph.containers()[c].ctype).collect();
    let mut planted = BTreeMap::new();
    for &t in &types {
        let vocab = vocabulary(t);
        planted.insert(answer_field(t).to_string(), vocab[rng.gen_range(0..vocab.len())].to_string());
    }
    let mut parts = vec![OPENERS[rng.gen_range(0..OPENERS.len())].to_string()];
    parts.extend(types.iter().map(|&t| phrase_for(t, &mut rng).to_string()));
    let query = parts.join(" ");
    let context = format!(
        "patient age {} history {}",
        rng.gen_range(20..90),
        HISTORIES[rng.gen_range(0..HISTORIES.len())]
    );
    let record = SuiteRecord {
        id,
        seed,
        query,
        context,
        planted,
        required_plan: types
            .iter()
            .map(|&t| PlanStep {
                ctype: t,
                field: answer_field(t).to_string(),
            })
            .collect(),
        mandatory,
    };
    QueryInstance::try_from(record).expect("generated instances are well-formed")
}

/// Deterministic suite of instances whose plans are paths of `graph`.
pub fn generate_suite(graph: &SupernetGraph, seed: u64, config: &SuiteConfig) -> Result<Vec<QueryInstance>> {
    config.validate()?;
    let (lo, hi) = config.plan_len;
    let paths = enumerate_paths(graph, hi.max(1));
    let by_len = |pred: &dyn Fn(&Vec<usize>) -> bool| -> BTreeMap<usize, Vec<Vec<usize>>> {
        let mut m: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
        for p in paths.iter().filter(|p| pred(p)) {
            m.entry(p.len()).or_default().push(p.clone());
        }
        m
    };
    let general = by_len(&|p| (lo..=hi).contains(&p.len()));
    let simple = by_len(&|p| p.len() == 1);
    let safety = by_len(&|p| {
        (lo..=hi).contains(&p.len()) && graph.containers()[*p.last().unwrap()].ctype == config.safety_container
    });
    if general.is_empty() {
        return Err(Error::Config(format!("graph has no entry path of length in [{lo}, {hi}]")));
    }

    let mut suite = Vec::with_capacity(config.size);
    let mut rng = derived_rng(seed, "suite", 0);
    for i in 0..config.size {
        let u: f64 = rng.gen();
        let (pool, mandatory) = if u < config.simple_fraction {
            (&simple, None)
        } else if u < config.simple_fraction + config.safety_fraction && !safety.is_empty() {
            (&safety, Some(config.safety_container))
        } else {
            (&general, None)
        };
        let lens: Vec<&usize> = pool.keys().collect();
        let len = **lens.choose(&mut rng).expect("pool non-empty");
        let path = pool[&len].choose(&mut rng).expect("length bucket non-empty");
        let inst_seed: u64 = rng.gen();
        suite.push(instance_from_path(graph, path, format!("q{i:05}"), inst_seed, mandatory));
    }
    Ok(suite)
}

pub fn write_suite<W: Write>(suite: &[QueryInstance], mut out: W) -> Result<()> {
    for q in suite {
        serde_json::to_writer(&mut out, q)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse a line-delimited suite; blank lines are skipped.
pub fn read_suite<R: BufRead>(input: R) -> Result<Vec<QueryInstance>> {
    let mut suite = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        suite.push(serde_json::from_str(&line)?);
    }
    Ok(suite)
}

/// Cost weights applied to a tool's latency and token count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub latency: f64,
    pub tokens: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            latency: 1.0,
            tokens: 0.01,
        }
    }
}

/// Graph plus everything needed to execute and score rollouts.
#[derive(Clone, Debug)]
pub struct Environment {
    pub graph: SupernetGraph,
    pub t_max: usize,
    pub tool_seed: u64,
    pub cost_weights: CostWeights,
    pub memory_capacity: usize,
    pub token_budget: usize,
    pub extractors: HashingExtractors,
    cost_norm: f64,
}

impl Environment {
    pub fn new(graph: SupernetGraph, t_max: usize, cost_weights: CostWeights) -> Self {
        let mut env = Self {
            graph,
            t_max,
            tool_seed: 0,
            cost_weights,
            memory_capacity: DEFAULT_CAPACITY,
            token_budget: DEFAULT_TOKEN_BUDGET,
            extractors: HashingExtractors::default(),
            cost_norm: 1.0,
        };
        env.cost_norm = env.max_trajectory_cost().max(f64::MIN_POSITIVE);
        env
    }

    pub fn standard() -> Self {
        let graph = crate::supernet::build_graph(&crate::supernet::SupernetSpec::standard(), &ToolRegistry::standard())
            .expect("bundled graph is valid");
        Self::new(graph, DEFAULT_T_MAX, CostWeights::default())
    }

    pub fn with_tool_seed(mut self, seed: u64) -> Self {
        self.tool_seed = seed;
        self
    }

    pub fn empty_memory(&self) -> Memory {
        Memory::new(self.memory_capacity, self.token_budget)
    }

    /// Weighted cost of invoking `action`; zero for EarlyExit.
    pub fn step_cost(&self, action: ActionId) -> f64 {
        match self.graph.action(action) {
            crate::supernet::Action::EarlyExit => 0.0,
            crate::supernet::Action::Invoke { container, tool } => {
                let t = self.graph.tool_spec(*container, *tool);
                self.cost_weights.latency * t.latency + self.cost_weights.tokens * t.tokens as f64
            }
        }
    }

    /// Cost of the most expensive trajectory the graph admits within
    /// `t_max` invocations.
    fn max_trajectory_cost(&self) -> f64 {
        let n = self.graph.containers().len();
        let mut top = vec![0.0f64; n];
        for a in 0..self.graph.num_actions() {
            if let crate::supernet::Action::Invoke { container, .. } = self.graph.action(ActionId(a)) {
                top[*container] = top[*container].max(self.step_cost(ActionId(a)));
            }
        }
        // best[c] = priciest path starting at c using at most `len` containers
        let mut best = vec![0.0f64; n];
        for _ in 0..self.t_max {
            best = (0..n)
                .map(|c| {
                    let tail = self
                        .graph
                        .successors(Position::At(c))
                        .into_iter()
                        .map(|s| best[s])
                        .fold(0.0, f64::max);
                    top[c] + tail
                })
                .collect();
        }
        best[self.graph.entry()]
    }

    /// Normalizer: cost of the most expensive admissible trajectory.
    pub fn cost_norm(&self) -> f64 {
        self.cost_norm
    }

    pub fn normalized_cost(&self, actions: &[ActionId]) -> f64 {
        actions.iter().map(|&a| self.step_cost(a)).sum::<f64>() / self.cost_norm
    }
}
