//! Generation, simulation and judge prompt templates.
//!
//! Templates are plain UTF-8 files with `{placeholder}` markers. The stock set
//! is compiled in from `templates/`; a directory of same-named files can
//! override any subset of them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{kind} prompt needs a value for placeholder {{{placeholder}}}")]
    MissingPlaceholder {
        kind: PromptKind,
        placeholder: &'static str,
    },
    #[error("{kind} template must contain {{{placeholder}}} exactly once (found {count})")]
    BadTemplate {
        kind: PromptKind,
        placeholder: &'static str,
        count: usize,
    },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Simulate,
    Hallucinate,
    Faithful,
    Generic,
    JudgeBinaryPlusminus,
    JudgeInternalBinary,
    JudgeInternalTernary,
}

impl PromptKind {
    pub const ALL: [PromptKind; 7] = [
        PromptKind::Simulate,
        PromptKind::Hallucinate,
        PromptKind::Faithful,
        PromptKind::Generic,
        PromptKind::JudgeBinaryPlusminus,
        PromptKind::JudgeInternalBinary,
        PromptKind::JudgeInternalTernary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Simulate => "simulate",
            PromptKind::Hallucinate => "hallucinate",
            PromptKind::Faithful => "faithful",
            PromptKind::Generic => "generic",
            PromptKind::JudgeBinaryPlusminus => "judge_binary_plusminus",
            PromptKind::JudgeInternalBinary => "judge_internal_binary",
            PromptKind::JudgeInternalTernary => "judge_internal_ternary",
        }
    }

    /// Resource file name, also used when loading overrides.
    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptKind::Simulate => include_str!("../templates/simulate.txt"),
            PromptKind::Hallucinate => include_str!("../templates/hallucinate.txt"),
            PromptKind::Faithful => include_str!("../templates/faithful.txt"),
            PromptKind::Generic => include_str!("../templates/generic.txt"),
            PromptKind::JudgeBinaryPlusminus => {
                include_str!("../templates/judge_binary_plusminus.txt")
            }
            PromptKind::JudgeInternalBinary => {
                include_str!("../templates/judge_internal_binary.txt")
            }
            PromptKind::JudgeInternalTernary => {
                include_str!("../templates/judge_internal_ternary.txt")
            }
        }
    }

    /// The placeholder markers this kind's template carries, with the context
    /// field that fills each one.
    pub fn slots(self) -> &'static [(&'static str, Slot)] {
        use Slot::*;
        match self {
            PromptKind::Simulate => &[("KG knowledge", Knowledge), ("dialogue history", History)],
            PromptKind::Hallucinate | PromptKind::Faithful | PromptKind::Generic => &[
                ("Instructional prompt for target system", Knowledge),
                ("dialogue history", History),
                ("system output", Response),
            ],
            PromptKind::JudgeBinaryPlusminus => {
                &[("Input/Document", Knowledge), ("System Output", Response)]
            }
            PromptKind::JudgeInternalBinary | PromptKind::JudgeInternalTernary => &[
                ("Knowledge", Knowledge),
                ("dialogue history", History),
                ("System Output", Response),
            ],
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown prompt kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Knowledge,
    History,
    Response,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateContext {
    pub knowledge_text: String,
    pub history_text: String,
    pub response_text: Option<String>,
}

impl TemplateContext {
    pub fn new(knowledge_text: impl Into<String>, history_text: impl Into<String>) -> Self {
        TemplateContext {
            knowledge_text: knowledge_text.into(),
            history_text: history_text.into(),
            response_text: None,
        }
    }

    pub fn with_response(mut self, response: impl Into<String>) -> Self {
        self.response_text = Some(response.into());
        self
    }
}

/// A complete set of templates, one per [`PromptKind`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            templates: PromptKind::ALL
                .iter()
                .map(|k| k.builtin().to_string())
                .collect(),
        }
    }
}

impl PromptSet {
    /// Stock templates with any `<kind>.txt` found in `dir` substituted in.
    /// A single trailing newline is dropped from override files.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = PromptSet::default();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let text = text
                .strip_suffix('\n')
                .map(|t| t.strip_suffix('\r').unwrap_or(t))
                .unwrap_or(&text);
            set.set(kind, text.to_string())?;
        }
        Ok(set)
    }

    pub fn set(&mut self, kind: PromptKind, template: String) -> Result<(), PromptError> {
        check_template(kind, &template)?;
        self.templates[kind as usize] = template;
        Ok(())
    }

    pub fn template(&self, kind: PromptKind) -> &str {
        &self.templates[kind as usize]
    }

    pub fn render(&self, kind: PromptKind, ctx: &TemplateContext) -> Result<String, PromptError> {
        let template = self.template(kind);
        let mut fills: Vec<(usize, &'static str, &str)> = Vec::new();
        for &(name, slot) in kind.slots() {
            let value = match slot {
                Slot::Knowledge => ctx.knowledge_text.as_str(),
                Slot::History => ctx.history_text.as_str(),
                Slot::Response => {
                    ctx.response_text
                        .as_deref()
                        .ok_or(PromptError::MissingPlaceholder {
                            kind,
                            placeholder: name,
                        })?
                }
            };
            let marker = format!("{{{name}}}");
            let at = template.find(&marker).ok_or(PromptError::BadTemplate {
                kind,
                placeholder: name,
                count: 0,
            })?;
            fills.push((at, name, value));
        }
        // single left-to-right pass so substituted text is never rescanned
        fills.sort_by_key(|f| f.0);
        let mut out = String::with_capacity(template.len() + 256);
        let mut cursor = 0;
        for (at, name, value) in fills {
            out.push_str(&template[cursor..at]);
            out.push_str(value);
            cursor = at + name.len() + 2;
        }
        out.push_str(&template[cursor..]);
        Ok(out)
    }
}

fn check_template(kind: PromptKind, template: &str) -> Result<(), PromptError> {
    for &(name, _) in kind.slots() {
        let count = template.matches(&format!("{{{name}}}")).count();
        if count != 1 {
            return Err(PromptError::BadTemplate {
                kind,
                placeholder: name,
                count,
            });
        }
    }
    Ok(())
}

/// Renders with the stock templates.
pub fn render_prompt(kind: PromptKind, ctx: &TemplateContext) -> Result<String, PromptError> {
    PromptSet::default().render(kind, ctx)
}
