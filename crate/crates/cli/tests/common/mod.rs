//! Scripted toy corpus shared by the CLI and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emoreason_core::backend::{HashFallback, Script};
use emoreason_core::corpus::{to_jsonl, DatasetProfile};
use emoreason_core::pipeline::InputRecord;
use emoreason_core::prompts::PromptKind;

pub struct ToyRecord {
    pub id: &'static str,
    pub text: &'static str,
    pub gold: &'static str,
    /// Label winning the remaining contexts.
    pub runner_up: &'static str,
    /// Open-ended labels in decreasing frequency.
    pub generated: [&'static str; 3],
}

pub const TOY: [ToyRecord; 5] = [
    ToyRecord { id: "t1", text: "I passed my final exams after months of study.", gold: "joy", runner_up: "fear", generated: ["relief", "pride", "joy"] },
    ToyRecord { id: "t2", text: "A stranger followed me home late at night.", gold: "fear", runner_up: "anger", generated: ["terror", "anxiety", "fear"] },
    ToyRecord { id: "t3", text: "My friend read my diary without asking.", gold: "anger", runner_up: "disgust", generated: ["betrayal", "anger", "humiliation"] },
    ToyRecord { id: "t4", text: "I forgot my mother's birthday.", gold: "guilt", runner_up: "shame", generated: ["regret", "guilt", "embarrassment"] },
    ToyRecord { id: "t5", text: "My grandfather passed away last spring.", gold: "sadness", runner_up: "fear", generated: ["grief", "sadness", "loneliness"] },
];

/// Contexts per record; the first `GOLD_VOTES` vote for the gold label.
pub const N_CONTEXTS: usize = 10;
pub const Q_SAMPLES: usize = 10;
pub const GOLD_VOTES: usize = 6;

pub fn context_text(r: &ToyRecord, j: usize) -> String {
    format!("Context {j} for {}: the writer recalls an event and its aftermath.", r.id)
}

fn reasoning(r: &ToyRecord, j: usize, k: usize) -> String {
    // per context: 5 x first label, 3 x second, 1 x third, 1 malformed
    let (label, because) = match k {
        0..=4 => (r.generated[0], "the situation left a lasting mark on the writer"),
        5..=7 => (r.generated[1], "the writer dwells on what the event meant"),
        8 => (r.generated[2], "the event touched something personal"),
        _ => return format!("Context {j} gives no clear answer"),
    };
    let when = ["at first", "later on", "in hindsight", "right away", "for a while", "again", "quietly", "deeply", "suddenly", "still"][j];
    format!("The author feels {label} because {because} {when}. The final emotion label is {label}.")
}

pub fn script() -> Script {
    let profile = DatasetProfile::isear();
    let p = &profile.prompts;
    let mut s = Script::default();
    for r in &TOY {
        let contexts: Vec<String> = (0..N_CONTEXTS).map(|j| context_text(r, j)).collect();
        s.generate.insert(p.render_context(r.text).unwrap().text, contexts.clone());
        for (j, c) in contexts.iter().enumerate() {
            let prompt = p.render_emotion(c, r.text).unwrap().text;
            let winner = if j < GOLD_VOTES { r.gold } else { r.runner_up };
            let table: BTreeMap<String, f64> = profile
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.to_owned(), if l == winner { -0.25 } else { -2.0 - 0.1 * i as f64 }))
                .collect();
            s.scores.insert(prompt.clone(), table);
            s.generate.insert(prompt, (0..Q_SAMPLES).map(|k| reasoning(r, j, k)).collect());
        }
        // baselines answer with the gold label
        for kind in [PromptKind::BaselineStandard, PromptKind::BaselineCot] {
            s.generate.insert(p.render_baseline(kind, r.text).unwrap().text, vec![format!(" {}", r.gold)]);
        }
    }
    s.embedding_fallback = Some(HashFallback { dim: 48, seed: 11 });
    s
}

pub fn records() -> Vec<InputRecord> {
    TOY.iter()
        .map(|r| InputRecord { id: r.id.into(), text: r.text.into(), gold_label: Some(r.gold.into()) })
        .collect()
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub input: PathBuf,
    pub script: PathBuf,
    pub cache: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("toy.jsonl");
        std::fs::write(&input, to_jsonl(&records())).unwrap();
        let script_path = dir.path().join("script.json");
        std::fs::write(&script_path, script().to_json()).unwrap();
        let cache = dir.path().join("cache");
        Self { dir, input, script: script_path, cache }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Flags selecting the scripted backend and this fixture's cache.
    pub fn scripted_args(&self) -> Vec<String> {
        vec![
            "--backend".into(),
            "scripted".into(),
            "--script".into(),
            self.script.display().to_string(),
            "--cache-dir".into(),
            self.cache.display().to_string(),
        ]
    }
}

/// Runs the binary with a clean environment.
pub fn emoreason<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_emoreason")).env_clear().args(args).output().unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}
