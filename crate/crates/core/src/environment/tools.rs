//! Simulated tools behind the container interface.
//!
//! Every tool is a pure function of its input and a run seed. `Decode` tools
//! read the planted value for their container type out of the image grid;
//! a tool with fidelity below one returns an empty payload on a hashed subset
//! of inputs, and tools of context-consuming types return an empty payload
//! when routed an empty context.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{field_row, needs_context, vocabulary, MASK_WIDTH};
use crate::error::{Error, Result};
use crate::supernet::{ContainerType, ImageBlock, Payload, ToolInput, ToolOutput};
use crate::util::{f64s_to_bytes, hash_unit};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolBehavior {
    /// Decode this container type's planted field from the image.
    #[default]
    Decode,
    /// Echo the sub-query and context back.
    Identity,
    /// Always report the same fields.
    Constant { fields: BTreeMap<String, String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub id: String,
    pub ctype: ContainerType,
    #[serde(default)]
    pub behavior: ToolBehavior,
    pub latency: f64,
    pub tokens: u64,
    #[serde(default = "one")]
    pub fidelity: f64,
    /// Fail with `ToolFailure` whenever the sub-query contains this text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_on: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hyperparams: BTreeMap<String, f64>,
}

fn one() -> f64 {
    1.0
}

impl ToolSpec {
    pub fn new(id: &str, ctype: ContainerType, behavior: ToolBehavior, latency: f64, tokens: u64) -> Self {
        Self {
            id: id.to_string(),
            ctype,
            behavior,
            latency,
            tokens,
            fidelity: 1.0,
            fail_on: None,
            hyperparams: BTreeMap::new(),
        }
    }

    pub fn with_fidelity(mut self, fidelity: f64) -> Self {
        self.fidelity = fidelity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidTool {
                tool: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.fidelity > 0.0 && self.fidelity <= 1.0) {
            return bad("fidelity must be in (0, 1]");
        }
        if !(self.latency.is_finite() && self.latency >= 0.0) {
            return bad("latency must be finite and non-negative");
        }
        if self.latency == 0.0 && self.tokens == 0 {
            return bad("every tool must have positive cost");
        }
        Ok(())
    }

    /// Whether the fidelity draw makes this tool uninformative on `input`.
    fn misses(&self, input: &ToolInput, seed: u64) -> bool {
        if self.fidelity >= 1.0 {
            return false;
        }
        let image = input.roi_image.as_ref().map(|i| f64s_to_bytes(&i.data)).unwrap_or_default();
        hash_unit(&[b"fidelity", self.id.as_bytes(), &image, input.sub_query.as_bytes(), &seed.to_le_bytes()])
            >= self.fidelity
    }

    pub fn run(&self, input: &ToolInput, seed: u64) -> Result<ToolOutput> {
        if let Some(pat) = &self.fail_on {
            if input.sub_query.contains(pat.as_str()) {
                return Err(Error::ToolFailure {
                    tool: self.id.clone(),
                    reason: format!("input matches failure pattern `{pat}`"),
                });
            }
        }
        let payload = if self.misses(input, seed) {
            Payload::Empty
        } else {
            match &self.behavior {
                ToolBehavior::Identity => Payload::Record {
                    fields: BTreeMap::from([
                        ("sub_query".to_string(), input.sub_query.clone()),
                        ("context".to_string(), input.context_slice.clone()),
                    ]),
                    confidence: 1.0,
                },
                ToolBehavior::Constant { fields } => Payload::Record {
                    fields: fields.clone(),
                    confidence: 1.0,
                },
                ToolBehavior::Decode => decode(self.ctype, input),
            }
        };
        Ok(ToolOutput {
            source: self.ctype,
            payload,
            latency: self.latency,
            tokens: self.tokens,
        })
    }
}

fn decode(ctype: ContainerType, input: &ToolInput) -> Payload {
    if needs_context(ctype) && input.context_slice.trim().is_empty() {
        return Payload::Empty;
    }
    let Some(row) = input.roi_image.as_ref().and_then(|img| img.row(field_row(ctype))) else {
        return Payload::Empty;
    };
    let vocab = vocabulary(ctype);
    let n = vocab.len().min(row.len());
    if n == 0 {
        return Payload::Empty;
    }
    let mut best = 0;
    for i in 1..n {
        if row[i] > row[best] {
            best = i;
        }
    }
    // Without a planted finding the tool still reports its strongest
    // response, at low confidence.
    match ctype.output_kind() {
        crate::supernet::OutputKind::Image => Payload::Image {
            image: size_mask(best),
        },
        crate::supernet::OutputKind::Record => Payload::Record {
            fields: BTreeMap::from([(super::answer_field(ctype).to_string(), vocab[best].to_string())]),
            confidence: row[best],
        },
    }
}

/// Mask areas for the size classes.
pub const MASK_AREAS: [usize; 3] = [4, 12, 24];

pub fn size_mask(class: usize) -> ImageBlock {
    let area = MASK_AREAS[class.min(MASK_AREAS.len() - 1)];
    let mut data = vec![0.0; MASK_WIDTH * MASK_WIDTH];
    data[..area].iter_mut().for_each(|v| *v = 1.0);
    ImageBlock {
        width: MASK_WIDTH,
        height: MASK_WIDTH,
        data,
    }
}

/// Size class whose mask area is nearest to the mask's foreground count.
pub fn size_from_mask(mask: &ImageBlock) -> usize {
    let area = mask.data.iter().filter(|&&v| v > 0.5).count() as i64;
    let mut best = 0;
    for (i, &a) in MASK_AREAS.iter().enumerate() {
        if (a as i64 - area).abs() < (MASK_AREAS[best] as i64 - area).abs() {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ToolRegistry {
    tools: BTreeMap<String, ToolSpec>,
}

impl ToolRegistry {
    pub fn standard() -> Self {
        let specs: Vec<ToolSpec> =
            serde_json::from_str(include_str!("../../data/standard_tools.json")).expect("bundled tools parse");
        let mut r = Self::default();
        for s in specs {
            r.register(s).expect("bundled tools are valid");
        }
        r
    }

    pub fn register(&mut self, spec: ToolSpec) -> Result<()> {
        spec.validate()?;
        self.tools.insert(spec.id.clone(), spec);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ToolSpec> {
        self.tools.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values()
    }
}
