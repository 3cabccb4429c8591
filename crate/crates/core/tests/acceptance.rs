//! Acceptance gate: one check per primary criterion, each printing a PASS or
//! FAIL line. Run with `cargo test --test acceptance -- --nocapture`.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use common::{fixture_workspace, haloforge};
use haloforge::corpus::{assign_splits, load_corpus, DialogueExample, KnowledgeSource, Label, LabelSpace};
use haloforge::detection::{collapse_label, parse_judge_answer, JudgeScheme};
use haloforge::evaluation::{cohen_kappa, confusion, macro_f1};
use haloforge::gateway::mock::DeterministicBackend;
use haloforge::gateway::{
    Backend, BackendError, ChatRequest, ChatResponse, Gateway, ModelPrice, PriceTable,
};
use haloforge::patterns::{kl_divergence, PatternDistribution};
use haloforge::prompts::PromptSet;
use haloforge::synthesis::{Category, SynthesisConfig, Synthesizer, SyntheticRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Hallucination-pattern columns as published: System, HaluEval, FADE, Ours.
const SYSTEM: [f64; 6] = [0.540, 0.070, 0.050, 0.027, 0.004, 0.310];
const HALUEVAL: [f64; 6] = [0.435, 0.150, 0.370, 0.011, 0.011, 0.016];
const FADE: [f64; 6] = [0.156, 0.099, 0.675, 0.010, 0.018, 0.042];
const OURS: [f64; 6] = [0.530, 0.220, 0.160, 0.025, 0.010, 0.050];

fn kl_reproduction() -> Check {
    let start = Instant::now();
    let dist = |w| PatternDistribution::from_weights(w).map_err(|e| e.to_string());
    let system = dist(SYSTEM)?;
    let cases = [
        ("FADE", FADE, 1.527, 0.02),
        ("Ours", OURS, 0.340, 0.02),
        ("HaluEval", HALUEVAL, 0.671, 0.06),
    ];
    for (name, col, published, tol) in cases {
        let kl = kl_divergence(&dist(col)?, &system, 1e-9);
        ensure((kl - published).abs() <= tol, || {
            format!("KL({name}||System) = {kl:.4}, published {published} ± {tol}")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs_f64() < 1.0, || format!("took {elapsed:?}"))
}

/// Per-class F1 straight from raw pairs, written independently of the crate.
fn oracle_macro_f1(pairs: &[(usize, usize)], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let tp = pairs.iter().filter(|&&(g, p)| g == c && p == c).count() as f64;
        let fp = pairs.iter().filter(|&&(g, p)| g != c && p == c).count() as f64;
        let fn_ = pairs.iter().filter(|&&(g, p)| g == c && p != c).count() as f64;
        let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let recall = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        total += if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    total / k as f64
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    for trial in 0..1000 {
        let space = if trial % 2 == 0 { LabelSpace::Binary } else { LabelSpace::Ternary };
        let k = space.labels().len();
        // random confusion matrix, sparse cells included
        let mut pairs = Vec::new();
        for g in 0..k {
            for p in 0..k {
                let n = if rng.random_bool(0.2) { 0 } else { rng.random_range(0..15) };
                pairs.extend(std::iter::repeat_n((g, p), n));
            }
        }
        if pairs.is_empty() {
            pairs.push((0, 0));
        }
        let golds: Vec<Label> = pairs.iter().map(|&(g, _)| space.labels()[g]).collect();
        let preds: Vec<Label> = pairs.iter().map(|&(_, p)| space.labels()[p]).collect();
        let cm = confusion(&golds, &preds, space).map_err(|e| e.to_string())?;
        let got = macro_f1(&cm).1;
        let want = oracle_macro_f1(&pairs, k);
        ensure((got - want).abs() <= 1e-12, || {
            format!("trial {trial}: macro_f1 {got} vs oracle {want}")
        })?;
    }

    // TP=8 FP=2 FN=4 TN=6, faithful positive
    let (f, h) = (Label::Faithful, Label::Hallucinated);
    let mut golds = Vec::new();
    let mut preds = Vec::new();
    for (g, p, n) in [(f, f, 8), (h, f, 2), (f, h, 4), (h, h, 6)] {
        golds.extend(std::iter::repeat_n(g, n));
        preds.extend(std::iter::repeat_n(p, n));
    }
    let cm = confusion(&golds, &preds, LabelSpace::Binary).map_err(|e| e.to_string())?;
    let (per, m) = macro_f1(&cm);
    let want = (16.0 / 22.0 + 12.0 / 18.0) / 2.0;
    ensure((per[&f].f1 - 16.0 / 22.0).abs() <= 1e-12, || format!("pos-F1 {}", per[&f].f1))?;
    ensure((per[&h].f1 - 12.0 / 18.0).abs() <= 1e-12, || format!("neg-F1 {}", per[&h].f1))?;
    ensure((m - want).abs() <= 1e-12, || format!("macro {m} vs {want}"))?;
    ensure(format!("{m:.4}") == "0.6970", || format!("macro rounds to {m:.4}"))
}

fn kappa_oracle() -> Check {
    use Label::{Faithful as F, Hallucinated as H};
    let k = |a: &[Label], b: &[Label]| cohen_kappa(a, b).map_err(|e| e.to_string());
    let zero = k(&[F, F, H, H], &[F, H, F, H])?;
    ensure(zero == 0.0, || format!("expected 0.0, got {zero}"))?;
    let half = k(&[F, F, F, H], &[F, F, H, H])?;
    ensure(half == 0.5, || format!("expected 0.5, got {half}"))?;
    let same = k(&[F, H, H, F, H], &[F, H, H, F, H])?;
    ensure(same == 1.0, || format!("identical lists gave {same}"))
}

fn scored(id: &str, scores: &[i8]) -> DialogueExample {
    DialogueExample::new(id, KnowledgeSource::Document { document: "d".into() }, vec![])
        .with_scores(scores.to_vec())
}

fn split_rule() -> Check {
    let fixture: [(&[i8], bool); 13] = [
        (&[2, 2], true),
        (&[1, -1], false),
        (&[2, -1, 2], false), // mean exactly 1.0
        (&[-2, -2], true),
        (&[-2, -1], true),
        (&[-1, -1], false), // mean exactly -1.0
        (&[2, 1], true),
        (&[1, 1, 1], false),
        (&[2], true),
        (&[-1], false),
        (&[2, 2, -1], false),
        (&[2, 2, -2, 2], false),
        (&[2, 2, 1], true),
    ];
    let examples: Vec<_> = fixture
        .iter()
        .enumerate()
        .map(|(i, (s, _))| scored(&format!("f{i}"), s))
        .collect();
    let split = assign_splits(&examples).map_err(|e| e.to_string())?;
    for (i, (scores, to_test)) in fixture.iter().enumerate() {
        let id = format!("f{i}");
        ensure(split.test.contains(&id) == *to_test, || {
            format!("{scores:?} should go to {}", if *to_test { "test" } else { "dev" })
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let choices = [-2i8, -1, 1, 2];
    for round in 0..200 {
        let examples: Vec<_> = (0..rng.random_range(1..60))
            .map(|i| {
                let n = rng.random_range(1..7);
                let s: Vec<i8> = (0..n).map(|_| choices[rng.random_range(0..4)]).collect();
                scored(&format!("r{round}_{i}"), &s)
            })
            .collect();
        let split = assign_splits(&examples).map_err(|e| e.to_string())?;
        ensure(split.test.len() + split.dev.len() == examples.len(), || "not a partition".into())?;
        for ex in &examples {
            let s = ex.annotation_scores.as_ref().unwrap();
            let mean = s.iter().map(|&x| f64::from(x)).sum::<f64>() / s.len() as f64;
            let in_test = split.test.contains(&ex.id);
            ensure(in_test != split.dev.contains(&ex.id), || format!("{} in both or neither", ex.id))?;
            ensure(in_test == (mean.abs() > 1.0), || format!("{s:?} misassigned"))?;
        }
    }
    Ok(())
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Wraps a backend and remembers every (model, response) it produced.
struct Recording<B> {
    inner: B,
    log: Mutex<Vec<(String, ChatResponse)>>,
}

impl<B: Backend> Backend for Recording<B> {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let resp = self.inner.send(req)?;
        self.log.lock().unwrap().push((req.model.clone(), resp.clone()));
        Ok(resp)
    }
}

fn e2e_determinism() -> Check {
    let stages: [&[&str]; 4] = [&["simulate"], &["synthesize"], &["assemble"], &["evaluate"]];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let ws = fixture_workspace();
        let cfg = ws.path().join("mock_run.toml");
        for args in stages {
            let (code, _, err) = haloforge(&cfg, args);
            ensure(code == 0, || format!("{args:?} exited {code}: {err}"))?;
        }
        runs.push((read_dir_bytes(&ws.path().join("run")), ws));
    }
    let (a, b) = (&runs[0].0, &runs[1].0);
    ensure(a.keys().eq(b.keys()), || "runs produced different file sets".into())?;
    for (name, bytes) in a {
        ensure(b[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    let records = a["synthetic.jsonl"].iter().filter(|&&c| c == b'\n').count();
    ensure(records == 50 * 3 * 3, || format!("{records} records, expected 450"))?;

    // ledger against independently priced per-call usage
    let examples = load_corpus(&runs[0].1.path().join("dialogue50.jsonl")).map_err(|e| e.to_string())?;
    let backend = Arc::new(Recording {
        inner: DeterministicBackend::new(),
        log: Mutex::new(Vec::new()),
    });
    let prices = PriceTable::from_iter([("rewriter", ModelPrice::new(0.01, 0.03)), ("simulator", ModelPrice::new(0.002, 0.004))]);
    let gateway = Gateway::new(backend.clone(), prices).with_concurrency(4);
    let prompts = PromptSet::default();
    let synth = Synthesizer {
        gateway: &gateway,
        prompts: &prompts,
        simulator_model: "simulator".into(),
        rewriter_model: "rewriter".into(),
        config: SynthesisConfig {
            samples_per_category: 3,
            categories: [Category::Faithful, Category::Hallucinated, Category::Generic].into(),
            ..SynthesisConfig::default()
        },
        space: LabelSpace::Ternary,
    };
    let simulated = synth.simulate_corpus(&examples);
    let out = synth.synthesize(&simulated.examples).map_err(|e| e.to_string())?;
    ensure(out.records.len() == 450, || format!("library run gave {} records", out.records.len()))?;
    let rate: HashMap<&str, (f64, f64)> = [("rewriter", (0.01, 0.03)), ("simulator", (0.002, 0.004))].into();
    let log = backend.log.lock().unwrap();
    let expected: f64 = log
        .iter()
        .map(|(m, r)| {
            let (p, c) = rate[m.as_str()];
            r.prompt_tokens as f64 * p / 1000.0 + r.completion_tokens as f64 * c / 1000.0
        })
        .sum();
    let snap = gateway.ledger().snapshot();
    ensure(log.len() as u64 == snap.total_requests(), || "request count mismatch".into())?;
    ensure((snap.total_cost_usd() - expected).abs() <= 1e-12, || {
        format!("ledger {} vs per-call sum {expected}", snap.total_cost_usd())
    })?;
    let per_record: f64 = out.records.iter().map(|r| r.usage.cost_usd).sum();
    ensure((snap.models["rewriter"].cost_usd - per_record).abs() <= 1e-12, || {
        "rewriter ledger differs from record costs".into()
    })
}

fn ablation_wiring() -> Check {
    let ws = fixture_workspace();
    let cfg = ws.path().join("mock_run.toml");
    for args in [&["simulate"][..], &["synthesize"], &["assemble", "--ablation", "no_hallucination"]] {
        let (code, _, err) = haloforge(&cfg, args);
        ensure(code == 0, || format!("{args:?} exited {code}: {err}"))?;
    }
    let run = ws.path().join("run");
    let sources: HashMap<String, String> = load_corpus(&run.join("simulated.jsonl"))
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|e| (e.id.clone(), e.response.unwrap_or_default()))
        .collect();
    let rows = load_corpus(&run.join("train_no_hallucination.jsonl")).map_err(|e| e.to_string())?;
    let records: Vec<SyntheticRecord> =
        haloforge::jsonl::read_jsonl(&run.join("synthetic.jsonl")).map_err(|e| e.to_string())?;
    let rewritten: std::collections::HashSet<&str> = records
        .iter()
        .filter(|r| r.category == Category::Hallucinated)
        .map(|r| r.text.as_str())
        .collect();
    let negatives: Vec<_> = rows
        .iter()
        .filter(|r| r.gold_label == Some(Label::NotFullyAttributable))
        .collect();
    ensure(!negatives.is_empty(), || "no negative rows".into())?;
    for row in &negatives {
        let source = row.id.split("::").next().unwrap_or("");
        let text = row.response.as_deref().unwrap_or("");
        ensure(sources.get(source).map(String::as_str) == Some(text), || {
            format!("row {} is not its source's system response", row.id)
        })?;
        ensure(!rewritten.contains(text), || format!("row {} carries a rewrite", row.id))?;
    }
    Ok(())
}

fn judge_parsing() -> Check {
    use JudgeScheme::*;
    use Label::*;
    let fixture: [(&str, JudgeScheme, Option<Label>); 30] = [
        ("+1", Plusminus, Some(Faithful)),
        ("-1", Plusminus, Some(Hallucinated)),
        ("Answer: +1", Plusminus, Some(Faithful)),
        ("-1 (Hallucinated)", Plusminus, Some(Hallucinated)),
        ("The summary is supported by the document. +1", Plusminus, Some(Faithful)),
        ("**-1**", Plusminus, Some(Hallucinated)),
        ("I would answer +1.", Plusminus, Some(Faithful)),
        ("1", Plusminus, None),
        ("I think it is fine.", Plusminus, None),
        ("Rating: 11", Plusminus, None),
        ("2", InternalBinary, Some(Faithful)),
        ("0", InternalBinary, Some(Hallucinated)),
        ("Answer: 2.", InternalBinary, Some(Faithful)),
        ("1 is not allowed here, so 0", InternalBinary, Some(Hallucinated)),
        ("The response adds a year not in the knowledge. Answer: 0", InternalBinary, Some(Hallucinated)),
        ("Score 2/2", InternalBinary, Some(Faithful)),
        ("No answer", InternalBinary, None),
        ("2.5", InternalBinary, None),
        ("Answer: 0", InternalTernary, Some(NotFullyAttributable)),
        ("Answer: 1", InternalTernary, Some(Generic)),
        ("Answer: 2", InternalTernary, Some(FullyAttributable)),
        ("1 - it is generic", InternalTernary, Some(Generic)),
        ("\n\n2\n", InternalTernary, Some(FullyAttributable)),
        ("As GPT-4 I pick 0", InternalTernary, Some(NotFullyAttributable)),
        ("GPT-2 would say 10 but I say 1", InternalTernary, Some(Generic)),
        ("(0)", InternalTernary, Some(NotFullyAttributable)),
        ("Answer:1", InternalTernary, Some(Generic)),
        ("-1", InternalTernary, None),
        ("Faithful", InternalTernary, None),
        ("v2 of 3.0", InternalTernary, None),
    ];
    for (text, scheme, want) in fixture {
        let got = parse_judge_answer(text, scheme).ok();
        ensure(got == want, || format!("{text:?} under {scheme:?}: got {got:?}, want {want:?}"))?;
    }
    let map = [
        (FullyAttributable, Faithful),
        (Generic, Hallucinated),
        (NotFullyAttributable, Hallucinated),
    ];
    for (from, to) in map {
        let got = collapse_label(from).map_err(|e| e.to_string())?;
        ensure(got == to, || format!("{from} collapsed to {got}"))?;
    }
    for binary in [Faithful, Hallucinated] {
        ensure(collapse_label(binary).is_err(), || format!("{binary} collapsed twice"))?;
    }
    Ok(())
}

#[test]
fn primary_acceptance_criteria() {
    let criteria: [Criterion; 7] = [
        ("KL reproduction (pattern table)", kl_reproduction),
        ("macro-F1 oracle", metric_oracle),
        ("Cohen's kappa oracle", kappa_oracle),
        ("split rule", split_rule),
        ("end-to-end determinism", e2e_determinism),
        ("ablation wiring", ablation_wiring),
        ("judge parsing and collapse", judge_parsing),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(()) => println!("PASS  {name}"),
            Err(why) => {
                println!("FAIL  {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
