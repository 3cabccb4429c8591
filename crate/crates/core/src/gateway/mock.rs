//! Offline backends.
//!
//! [`ScriptedBackend`] replays a queue of canned outcomes. [`DeterministicBackend`]
//! recognises the stock prompt templates and answers each one with a pure
//! function of the request, so whole pipelines run reproducibly without a
//! network.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{Backend, BackendError, ChatRequest, ChatResponse};

#[derive(Default)]
pub struct ScriptedBackend {
    script: Mutex<VecDeque<Result<ChatResponse, BackendError>>>,
    fallback: Option<ChatResponse>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reply used once the script runs dry.
    pub fn with_fallback(mut self, resp: ChatResponse) -> Self {
        self.fallback = Some(resp);
        self
    }

    pub fn push_ok(&self, text: &str, prompt_tokens: u64, completion_tokens: u64) {
        self.script.lock().unwrap().push_back(Ok(ChatResponse::new(
            text,
            prompt_tokens,
            completion_tokens,
        )));
    }

    pub fn push_err(&self, err: BackendError) {
        self.script.lock().unwrap().push_back(Err(err));
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedBackend {
    fn send(&self, _req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.script.lock().unwrap().pop_front() {
            Some(outcome) => outcome,
            None => self
                .fallback
                .clone()
                .ok_or_else(|| BackendError::Fatal("script exhausted".into())),
        }
    }
}

/// Template-aware stand-in for a rewriting/judging LLM.
///
/// Token counts are whitespace word counts of prompt and completion.
#[derive(Default)]
pub struct DeterministicBackend {
    calls: AtomicUsize,
}

const GENERIC_REPLIES: [&str; 6] = [
    "That's an interesting topic, I'd love to hear more about it.",
    "Hmm, I'm not really sure about that one.",
    "Oh nice, what made you think of that?",
    "I see. Is there anything else you want to talk about?",
    "Good question, I honestly can't say.",
    "Interesting! Tell me more.",
];

const STOPWORDS: [&str; 24] = [
    "the", "and", "for", "are", "was", "were", "this", "that", "with", "you", "your", "have",
    "has", "but", "not", "its", "it's", "also", "from", "they", "them", "there", "yes", "sure",
];

impl DeterministicBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn answer(req: &ChatRequest) -> String {
        let p = req.prompt.as_str();
        let seed = stable_hash(p);
        let sample = u64::from(req.sample_index);
        if p.ends_with("#Response#:") && p.contains("Now, please generate your response:") {
            let knowledge = between(p, "used to generate your response:\n", "\n#Dialogue History#:")
                .unwrap_or("");
            return format!("#Response#: {}", simulate_reply(knowledge, seed));
        }
        if p.ends_with("#Hallucinated Response#:") {
            let truth = between(p, "#True Response#: ", "\nNow, please generate").unwrap_or("");
            let year = 1950 + (seed.wrapping_add(17 * sample)) % 70;
            return format!(
                "#Hallucinated Response#: {} It was first released in {year}.",
                truth.trim()
            );
        }
        if p.ends_with("#Faithful Response#:") {
            let resp = between(p, "#Response#:", "\n\nNow, please generate").unwrap_or("");
            let lead = ["", "Sure. ", "Well, "][(sample % 3) as usize];
            return format!("#Faithful Response#: {lead}{}", resp.trim());
        }
        if p.ends_with("#Rewritten Response#:") {
            let i = (seed.wrapping_add(sample) % GENERIC_REPLIES.len() as u64) as usize;
            return format!("#Rewritten Response#: {}", GENERIC_REPLIES[i]);
        }
        if p.contains("(Answer with +1 for Faithful or -1 for Hallucinated)") {
            let doc = between(p, "<DocumentGivenToAISystem>: ", "</DocumentGivenToAISystem>");
            let out = between(p, "<SummaryByAISystem>: ", "</SummaryByAISystem>");
            let verdict = lexical_verdict(doc.unwrap_or(""), out.unwrap_or(""));
            return if verdict == Verdict::Supported { "+1" } else { "-1" }.to_string();
        }
        if p.contains("(Answer with 2 for Faithful") {
            let ternary = p.contains("1 for Generic");
            let ctx = format!(
                "{} {}",
                between(p, "<PromptGivenToExtBot>: ", "</PromptGivenToExtBot>").unwrap_or(""),
                between(
                    p,
                    "<ConvHistoryBetweenUserAndExtBot>: ",
                    "</ConvHistoryBetweenUserAndExtBot>"
                )
                .unwrap_or("")
            );
            let out = between(p, "<ResponseByExtBot>: ", "</ResponseByExtBot>").unwrap_or("");
            let code = match lexical_verdict(&ctx, out) {
                Verdict::Supported => 2,
                Verdict::Empty if ternary => 1,
                _ => 0,
            };
            return format!("Answer: {code}");
        }
        "OK".to_string()
    }
}

impl Backend for DeterministicBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = Self::answer(req);
        Ok(ChatResponse {
            prompt_tokens: req.prompt.split_whitespace().count() as u64,
            completion_tokens: text.split_whitespace().count() as u64,
            text,
        })
    }
}

fn stable_hash(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn between<'a>(hay: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = hay.find(start)? + start.len();
    let len = hay[from..].find(end)?;
    Some(&hay[from..from + len])
}

fn simulate_reply(knowledge: &str, seed: u64) -> String {
    let lines: Vec<&str> = knowledge.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return "I'm not sure, could you tell me more?".into();
    }
    let line = lines[(seed % lines.len() as u64) as usize];
    let parts: Vec<&str> = line.split(" | ").collect();
    if parts.len() == 3 {
        format!(
            "I believe {} {} {}.",
            parts[0].trim(),
            parts[1].trim().replace('_', " "),
            parts[2].trim()
        )
    } else {
        let first = line.split_inclusive('.').next().unwrap_or(line).trim();
        format!("From what I know, {first}")
    }
}

#[derive(Debug, PartialEq, Eq)]
enum Verdict {
    Supported,
    Unsupported,
    Empty,
}

fn content_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(str::to_lowercase)
        .filter(|w| w.chars().count() >= 3 && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Names and numbers: capitalized words not opening a sentence, and digits.
fn has_specifics(text: &str) -> bool {
    let mut sentence_start = true;
    for word in text.split_whitespace() {
        let w = word.trim_matches(|c: char| !c.is_alphanumeric());
        let first = w.chars().next();
        let is_i = w == "I" || w.starts_with("I'");
        if first.is_some_and(|c| c.is_ascii_digit())
            || (!sentence_start && !is_i && first.is_some_and(char::is_uppercase))
        {
            return true;
        }
        sentence_start = word.ends_with(['.', '!', '?']);
    }
    false
}

/// Share of the response's content words found in the context. Responses
/// naming nothing specific count as empty.
fn lexical_verdict(context: &str, response: &str) -> Verdict {
    let ctx: HashSet<String> = content_words(context).into_iter().collect();
    let words = content_words(response);
    if words.len() < 2 || !has_specifics(response) {
        return Verdict::Empty;
    }
    let hits = words.iter().filter(|w| ctx.contains(*w)).count();
    if hits as f64 / words.len() as f64 >= 0.75 {
        Verdict::Supported
    } else {
        Verdict::Unsupported
    }
}
