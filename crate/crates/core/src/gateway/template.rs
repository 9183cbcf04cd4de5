//! Prompt templates with named `{placeholder}` markers.

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{template}` uses placeholder `{{{name}}}` {count} times, want exactly once")]
    DuplicatePlaceholder {
        template: String,
        name: String,
        count: usize,
    },
    #[error("template `{template}` missing binding for `{{{name}}}`")]
    MissingBinding { template: String, name: String },
    #[error("binding `{name}` does not appear in template `{template}`")]
    UnknownPlaceholder { template: String, name: String },
}

fn placeholder_regex() -> Regex {
    Regex::new(r"\{([a-z][a-z0-9_]*)\}").expect("static regex")
}

/// A prompt body plus the placeholders it requires. Construction validates
/// that each placeholder occurs exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Result<Self, TemplateError> {
        let name = name.into();
        let body = body.into();
        let re = placeholder_regex();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for cap in re.captures_iter(&body) {
            *counts.entry(cap[1].to_string()).or_insert(0) += 1;
        }
        for (ph, count) in &counts {
            if *count != 1 {
                return Err(TemplateError::DuplicatePlaceholder {
                    template: name,
                    name: ph.clone(),
                    count: *count,
                });
            }
        }
        Ok(Self {
            name,
            body,
            required_placeholders: counts.into_keys().collect(),
        })
    }

    pub fn requires(&self, placeholder: &str) -> bool {
        self.required_placeholders.contains(placeholder)
    }
}

/// Substitutes each placeholder with its binding, verbatim. Every template
/// placeholder must be bound and every binding must match a placeholder;
/// substituted values are not re-scanned.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &BTreeMap<String, String>,
) -> Result<String, TemplateError> {
    for name in bindings.keys() {
        if !template.required_placeholders.contains(name) {
            return Err(TemplateError::UnknownPlaceholder {
                template: template.name.clone(),
                name: name.clone(),
            });
        }
    }
    for name in &template.required_placeholders {
        if !bindings.contains_key(name) {
            return Err(TemplateError::MissingBinding {
                template: template.name.clone(),
                name: name.clone(),
            });
        }
    }
    let re = placeholder_regex();
    let mut out = String::with_capacity(template.body.len());
    let mut last = 0;
    for m in re.captures_iter(&template.body) {
        let whole = m.get(0).expect("match 0");
        out.push_str(&template.body[last..whole.start()]);
        out.push_str(&bindings[&m[1]]);
        last = whole.end();
    }
    out.push_str(&template.body[last..]);
    Ok(out)
}
