//! Prompt templates and a small renderer for the Jinja subset they use.
//!
//! Supported inside `{{ ... }}`: a slot name, `loop.index`, the `escape`
//! filter (`x | escape`) and the `custom_tojson(...)` call. A line that
//! mentions `loop.index` is a loop line: it is emitted once per item of the
//! list slot it references, with `loop.index` counting from 1. Lines are
//! otherwise copied verbatim.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template `{template}` references missing slot `{slot}`")]
    MissingSlot {
        template: &'static str,
        slot: String,
    },
    #[error("template `{template}`: slot `{slot}` has the wrong kind")]
    SlotKind {
        template: &'static str,
        slot: String,
    },
    #[error("template `{template}`: unsupported expression `{expr}`")]
    BadExpression {
        template: &'static str,
        expr: String,
    },
    #[error("template `{0}` must contain an <answer> instruction and end with <think>")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateName {
    Evidence,
    Navigator,
    Validator,
    Reconciler,
}

impl TemplateName {
    pub const ALL: [TemplateName; 4] = [
        Self::Evidence,
        Self::Navigator,
        Self::Validator,
        Self::Reconciler,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Evidence => "evidence",
            Self::Navigator => "navigator",
            Self::Validator => "validator",
            Self::Reconciler => "reconciler",
        }
    }

    /// Whether the template asks for a single id rather than a list.
    pub fn single_choice(self) -> bool {
        matches!(self, Self::Validator)
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for TemplateName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| alloc::format!("unknown template `{s}`"))
    }
}

/// How the model is asked to produce its answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    /// Free reasoning inside `<think>` before the `<answer>` span.
    #[default]
    Thinking,
    /// Output restricted from the first token to the candidate-id pattern.
    Constrained,
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decoding::Thinking => "thinking",
            Decoding::Constrained => "constrained",
        })
    }
}

impl core::str::FromStr for Decoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "thinking" => Ok(Self::Thinking),
            "constrained" => Ok(Self::Constrained),
            other => Err(alloc::format!("unknown decoding mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotValue {
    Text(String),
    List(Vec<String>),
}

/// Named values available to a template.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Slots(BTreeMap<String, SlotValue>);

impl Slots {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.into(), SlotValue::Text(value.into()));
        self
    }

    pub fn list<I, S>(mut self, name: &str, items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.0.insert(
            name.into(),
            SlotValue::List(items.into_iter().map(Into::into).collect()),
        );
        self
    }

    pub fn get(&self, name: &str) -> Option<&SlotValue> {
        self.0.get(name)
    }
}

const THINK_OPENER: &str = "<think>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    body: String,
}

pub const DEFAULT_EVIDENCE: &str = include_str!("../../templates/evidence.txt");
pub const DEFAULT_NAVIGATOR: &str = include_str!("../../templates/navigator.txt");
pub const DEFAULT_VALIDATOR: &str = include_str!("../../templates/validator.txt");
pub const DEFAULT_RECONCILER: &str = include_str!("../../templates/reconciler.txt");

impl PromptTemplate {
    /// Trailing whitespace is dropped; the body must mention `<answer>` and
    /// end with the `<think>` opener.
    pub fn new(name: TemplateName, body: &str) -> Result<Self, TemplateError> {
        let body = body.trim_end();
        if !body.contains("<answer>") || !body.ends_with(THINK_OPENER) {
            return Err(TemplateError::Invalid(name.as_str()));
        }
        Ok(Self {
            name,
            body: body.to_string(),
        })
    }

    pub fn default_for(name: TemplateName) -> Self {
        let body = match name {
            TemplateName::Evidence => DEFAULT_EVIDENCE,
            TemplateName::Navigator => DEFAULT_NAVIGATOR,
            TemplateName::Validator => DEFAULT_VALIDATOR,
            TemplateName::Reconciler => DEFAULT_RECONCILER,
        };
        Self::new(name, body).expect("bundled templates are valid")
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Renders the template. Constrained decoding drops the trailing
    /// `<think>` opener, since the answer starts at the first token.
    pub fn render(&self, slots: &Slots, decoding: Decoding) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len() * 2);
        let lines: Vec<&str> = self.body.split('\n').collect();
        let last = lines.len() - 1;
        let mut first = true;
        for (i, line) in lines.iter().enumerate() {
            if i == last && decoding == Decoding::Constrained && line.trim() == THINK_OPENER {
                continue;
            }
            for rendered in self.render_line(line, slots)? {
                if !first {
                    out.push('\n');
                }
                first = false;
                out.push_str(&rendered);
            }
        }
        Ok(out)
    }

    fn render_line(&self, line: &str, slots: &Slots) -> Result<Vec<String>, TemplateError> {
        let exprs = expressions(line);
        if exprs.is_empty() {
            return Ok(alloc::vec![line.to_string()]);
        }
        if !exprs.iter().any(|e| e.trim() == "loop.index") {
            return Ok(alloc::vec![self.substitute(line, slots, None)?]);
        }
        // Loop line: the list slot is the one non-`loop` variable it uses.
        let var = exprs
            .iter()
            .map(|e| e.trim())
            .find(|e| *e != "loop.index")
            .ok_or_else(|| TemplateError::BadExpression {
                template: self.name.as_str(),
                expr: line.to_string(),
            })?;
        let items = match slots.get(var) {
            Some(SlotValue::List(items)) => items,
            Some(SlotValue::Text(_)) => {
                return Err(TemplateError::SlotKind {
                    template: self.name.as_str(),
                    slot: var.to_string(),
                })
            }
            None => {
                return Err(TemplateError::MissingSlot {
                    template: self.name.as_str(),
                    slot: var.to_string(),
                })
            }
        };
        items
            .iter()
            .enumerate()
            .map(|(i, item)| self.substitute(line, slots, Some((i + 1, var, item))))
            .collect()
    }

    fn substitute(
        &self,
        line: &str,
        slots: &Slots,
        item: Option<(usize, &str, &str)>,
    ) -> Result<String, TemplateError> {
        let mut out = String::new();
        let mut rest = line;
        while let Some(start) = rest.find("{{") {
            let Some(len) = rest[start..].find("}}") else {
                break;
            };
            out.push_str(&rest[..start]);
            let expr = &rest[start + 2..start + len];
            out.push_str(&self.eval(expr.trim(), slots, item)?);
            rest = &rest[start + len + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }

    fn eval(
        &self,
        expr: &str,
        slots: &Slots,
        item: Option<(usize, &str, &str)>,
    ) -> Result<String, TemplateError> {
        let bad = || TemplateError::BadExpression {
            template: self.name.as_str(),
            expr: expr.to_string(),
        };
        if let Some(inner) = expr
            .strip_prefix("custom_tojson(")
            .and_then(|e| e.strip_suffix(')'))
        {
            let value = self.eval(inner.trim(), slots, item)?;
            return serde_json::to_string(&value).map_err(|_| bad());
        }
        if let Some((head, filter)) = expr.rsplit_once('|') {
            let value = self.eval(head.trim(), slots, item)?;
            return match filter.trim() {
                "escape" | "e" => Ok(html_escape(&value)),
                _ => Err(bad()),
            };
        }
        if expr == "loop.index" {
            return item.map(|(i, _, _)| i.to_string()).ok_or_else(bad);
        }
        if !expr.chars().all(|c| c.is_alphanumeric() || c == '_') || expr.is_empty() {
            return Err(bad());
        }
        if let Some((_, var, value)) = item {
            if var == expr {
                return Ok(value.to_string());
            }
        }
        match slots.get(expr) {
            Some(SlotValue::Text(t)) => Ok(t.clone()),
            Some(SlotValue::List(_)) => Err(TemplateError::SlotKind {
                template: self.name.as_str(),
                slot: expr.to_string(),
            }),
            None => Err(TemplateError::MissingSlot {
                template: self.name.as_str(),
                slot: expr.to_string(),
            }),
        }
    }

    /// Slot names the template reads.
    pub fn slot_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for line in self.body.split('\n') {
            for expr in expressions(line) {
                let mut e = expr.trim();
                if let Some(inner) = e
                    .strip_prefix("custom_tojson(")
                    .and_then(|x| x.strip_suffix(')'))
                {
                    e = inner.trim();
                }
                if let Some((head, _)) = e.split_once('|') {
                    e = head.trim();
                }
                if e != "loop.index" && !names.iter().any(|n| n == e) {
                    names.push(e.to_string());
                }
            }
        }
        names
    }
}

fn expressions(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = line;
    while let Some(start) = rest.find("{{") {
        let Some(len) = rest[start..].find("}}") else {
            break;
        };
        out.push(&rest[start + 2..start + len]);
        rest = &rest[start + len + 2..];
    }
    out
}

/// Jinja's `escape` filter.
pub fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&#34;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// The four stage templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub evidence: PromptTemplate,
    pub navigator: PromptTemplate,
    pub validator: PromptTemplate,
    pub reconciler: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            evidence: PromptTemplate::default_for(TemplateName::Evidence),
            navigator: PromptTemplate::default_for(TemplateName::Navigator),
            validator: PromptTemplate::default_for(TemplateName::Validator),
            reconciler: PromptTemplate::default_for(TemplateName::Reconciler),
        }
    }
}

impl TemplateSet {
    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        match name {
            TemplateName::Evidence => &self.evidence,
            TemplateName::Navigator => &self.navigator,
            TemplateName::Validator => &self.validator,
            TemplateName::Reconciler => &self.reconciler,
        }
    }

    pub fn set(&mut self, template: PromptTemplate) {
        match template.name {
            TemplateName::Evidence => self.evidence = template,
            TemplateName::Navigator => self.navigator = template,
            TemplateName::Validator => self.validator = template,
            TemplateName::Reconciler => self.reconciler = template,
        }
    }
}
