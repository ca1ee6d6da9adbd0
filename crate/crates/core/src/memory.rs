//! Bounded first-in-first-summarized evidence memory.
//!
//! Tool outputs are summarized into short text entries. When the buffer is
//! over capacity the two oldest entries are folded into a rolling digest in
//! slot 0, so old evidence degrades instead of vanishing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supernet::{ImageBlock, Payload, ToolOutput};

pub const DEFAULT_CAPACITY: usize = 16;
pub const DEFAULT_TOKEN_BUDGET: usize = 256;
pub const DEFAULT_ENTRY_BUDGET: usize = 32;
pub const DIGEST_ID: &str = "digest";

/// Splits text into tokens for budgeting.
pub type Tokenizer = fn(&str) -> Vec<String>;

/// Whitespace-delimited words.
pub fn whitespace_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

fn truncate_head(text: &str, budget: usize, tokenizer: Tokenizer) -> String {
    let toks = tokenizer(text);
    if toks.len() <= budget {
        text.to_string()
    } else {
        toks[..budget].join(" ")
    }
}

fn truncate_tail(text: &str, budget: usize, tokenizer: Tokenizer) -> String {
    let toks = tokenizer(text);
    if toks.len() <= budget {
        text.to_string()
    } else {
        toks[toks.len() - budget..].join(" ")
    }
}

pub trait Summarizer {
    fn summarize(&self, output: &ToolOutput) -> String;
}

/// `"<Container>: v1, v2 (0.90)"` for records, `"<Container>: mask WxH area N"`
/// for images, empty for degraded payloads. Truncated to `entry_budget` tokens.
#[derive(Clone, Copy, Debug)]
pub struct TemplateSummarizer {
    pub entry_budget: usize,
    pub tokenizer: Tokenizer,
}

impl Default for TemplateSummarizer {
    fn default() -> Self {
        Self {
            entry_budget: DEFAULT_ENTRY_BUDGET,
            tokenizer: whitespace_tokens,
        }
    }
}

impl Summarizer for TemplateSummarizer {
    fn summarize(&self, output: &ToolOutput) -> String {
        let text = match &output.payload {
            Payload::Empty => return String::new(),
            Payload::Record { fields, confidence } => {
                if fields.is_empty() {
                    return String::new();
                }
                let values: Vec<&str> = fields.values().map(String::as_str).collect();
                format!("{}: {} ({:.2})", output.source, values.join(", "), confidence)
            }
            Payload::Image { image } => {
                let area = image.data.iter().filter(|&&v| v > 0.5).count();
                format!("{}: mask {}x{} area {}", output.source, image.width, image.height, area)
            }
        };
        truncate_head(&text, self.entry_budget, self.tokenizer)
    }
}

pub fn summarize(output: &ToolOutput, summarizer: &dyn Summarizer) -> String {
    summarizer.summarize(output)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub container_id: String,
    pub summary: String,
    #[serde(skip)]
    pub image_ref: Option<ImageBlock>,
    pub step: u32,
}

#[derive(Clone, Debug)]
pub struct Memory {
    entries: Vec<MemoryEntry>,
    capacity: usize,
    token_budget: usize,
    entry_budget: usize,
    tokenizer: Tokenizer,
}

impl Default for Memory {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY, DEFAULT_TOKEN_BUDGET)
    }
}

impl Memory {
    pub fn new(capacity: usize, token_budget: usize) -> Self {
        assert!(capacity >= 1, "memory capacity must be at least 1");
        Self {
            entries: Vec::new(),
            capacity,
            token_budget,
            entry_budget: DEFAULT_ENTRY_BUDGET,
            tokenizer: whitespace_tokens,
        }
    }

    pub fn with_entry_budget(mut self, budget: usize) -> Self {
        self.entry_budget = budget;
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: Tokenizer) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn last_step(&self) -> Option<u32> {
        self.entries.last().map(|e| e.step)
    }

    pub fn append(&mut self, mut entry: MemoryEntry) -> Result<()> {
        if let Some(last) = self.last_step() {
            if entry.step <= last {
                return Err(Error::NonMonotonicStep { step: entry.step, last });
            }
        }
        entry.summary = truncate_head(&entry.summary, self.entry_budget, self.tokenizer);
        self.entries.push(entry);
        while self.entries.len() > self.capacity {
            if self.entries.len() < 2 {
                break;
            }
            let evicted = self.entries.remove(1);
            let head = &mut self.entries[0];
            let joined = match (head.summary.is_empty(), evicted.summary.is_empty()) {
                (_, true) => head.summary.clone(),
                (true, false) => evicted.summary.clone(),
                (false, false) => format!("{} {}", head.summary, evicted.summary),
            };
            head.summary = truncate_tail(&joined, self.entry_budget, self.tokenizer);
            head.container_id = DIGEST_ID.to_string();
            head.step = evicted.step;
            if evicted.image_ref.is_some() {
                head.image_ref = evicted.image_ref;
            }
        }
        Ok(())
    }

    /// Token sequence the memory encoder consumes: summaries oldest first,
    /// truncated from the front to the token budget.
    pub fn render_context(&self) -> Vec<String> {
        let mut toks: Vec<String> = self.entries.iter().flat_map(|e| (self.tokenizer)(&e.summary)).collect();
        if toks.len() > self.token_budget {
            toks.drain(..toks.len() - self.token_budget);
        }
        toks
    }

    /// Ordered (container_id, summary, step) records for traces.
    pub fn snapshot(&self) -> Vec<MemoryEntry> {
        self.entries.clone()
    }
}
