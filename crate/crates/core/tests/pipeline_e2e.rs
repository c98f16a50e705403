//! One record through the whole pipeline with a hand-traced script.

use std::collections::BTreeMap;

use emoreason_core::backend::{Backend, Script, ScriptedBackend};
use emoreason_core::corpus::{AugmentedRecord, DatasetProfile, AUGMENTED_SCHEMA_VERSION};
use emoreason_core::pipeline::{InputRecord, Pipeline, PipelineConfig, Stage, VotedLabel};
use emoreason_core::selection::{EmotionLexicon, SelectedPair};

const TEXT: &str = "When I think about the short time that we live and relate it to the periods of my life when I think that I did not use this short time.";

const VOCAB: &[&str] = &[
    "wasted", "years", "haunt", "him", "deeply", "life", "feels", "short", "duties", "went", "unmet", "panicky",
];

fn record() -> InputRecord {
    InputRecord { id: "isear-1".into(), text: TEXT.into(), gold_label: Some("sadness".into()) }
}

fn script(profile: &DatasetProfile) -> Script {
    let p = &profile.prompts;
    let mut s = Script::default();
    s.generate.insert(p.render_context(TEXT).unwrap().text, vec!["c0".into(), "c1".into(), "c2".into()]);

    let regret = "Wasted years haunt him. The final emotion label is regret.";
    let sad = "Life feels short. The final emotion label is sadness.";
    let reasonings = [
        vec![regret, sad, "Wasted years haunt him deeply. The final emotion label is regret."],
        vec![regret, "Duties went unmet. The final emotion label is guilt.", sad],
        vec!["The author feels panicky.", "asdf", regret],
    ];
    let winners = ["sadness", "sadness", "guilt"];
    for (i, ctx) in ["c0", "c1", "c2"].iter().enumerate() {
        let prompt = p.render_emotion(ctx, TEXT).unwrap().text;
        s.generate.insert(prompt.clone(), reasonings[i].iter().map(|t| t.to_string()).collect());
        let table: BTreeMap<String, f64> = profile
            .labels
            .iter()
            .map(|l| (l.to_owned(), if l == winners[i] { -0.2 } else { -2.0 - l.len() as f64 }))
            .collect();
        s.scores.insert(prompt, table);
    }
    for (i, w) in VOCAB.iter().enumerate() {
        let mut v = vec![0.0; VOCAB.len()];
        v[i] = 1.0;
        s.embeddings.insert(w.to_string(), v);
    }
    s
}

fn config() -> PipelineConfig {
    PipelineConfig { n_contexts: 3, q_samples: 3, run_id: "fixture".into(), ..PipelineConfig::default() }
}

#[test]
fn hand_traced_record() {
    let profile = DatasetProfile::isear();
    let backend = ScriptedBackend::new(script(&profile));
    let lexicon = EmotionLexicon::shipped();
    let pipeline = Pipeline {
        backend: &backend,
        embedder: &backend,
        prompts: &profile.prompts,
        labels: &profile.labels,
        lexicon: &lexicon,
        config: config(),
    };
    pipeline.validate().unwrap();
    let (augmented, audit) = pipeline.run_record(&record()).unwrap();

    let pair = |label: &str, explanation: &str, support, ctx| SelectedPair {
        label: label.into(),
        explanation: explanation.into(),
        support,
        context_index: Some(ctx),
    };
    let expected = AugmentedRecord {
        schema_version: AUGMENTED_SCHEMA_VERSION,
        id: "isear-1".into(),
        text: TEXT.into(),
        gold_label: Some("sadness".into()),
        voted_label: VotedLabel { label: "sadness".into(), vote_count: 2, total_votes: 3, tie_broken: false },
        top: vec![
            pair("regret", "Wasted years haunt him.", 4, 0),
            pair("sadness", "Life feels short.", 2, 0),
            pair("guilt", "Duties went unmet.", 1, 1),
        ],
        emotion_words: ["guilt", "regret", "sadness"].iter().map(|s| s.to_string()).collect(),
        contexts: vec!["c0".into(), "c1".into(), "c2".into()],
        run_id: "fixture".into(),
    };
    assert_eq!(augmented, expected);

    assert_eq!(audit.reasonings.items.len(), 9);
    assert_eq!(audit.parsed.iter().filter(|p| p.is_err()).count(), 1);
    assert_eq!(audit.groups.len(), 4);
    assert_eq!(audit.groups[3].label, "panicky");
    assert_eq!(audit.classification.predictions.len(), 3);
    // one context call, three scoring calls, three reasoning calls
    assert_eq!(backend.calls(), 7);
}

#[test]
fn all_contexts_failing_classification_fails_the_record() {
    let profile = DatasetProfile::isear();
    let mut s = script(&profile);
    s.scores.clear();
    let backend = ScriptedBackend::new(s);
    let lexicon = EmotionLexicon::shipped();
    let pipeline = Pipeline {
        backend: &backend,
        embedder: &backend,
        prompts: &profile.prompts,
        labels: &profile.labels,
        lexicon: &lexicon,
        config: config(),
    };
    let err = pipeline.run_record(&record()).unwrap_err();
    assert_eq!(err.stage, Stage::Vote);
    assert_eq!(err.record_id, "isear-1");
}

#[test]
fn run_all_preserves_input_order() {
    let profile = DatasetProfile::isear();
    let backend = ScriptedBackend::new(script(&profile));
    let lexicon = EmotionLexicon::shipped();
    let pipeline = Pipeline {
        backend: &backend,
        embedder: &backend,
        prompts: &profile.prompts,
        labels: &profile.labels,
        lexicon: &lexicon,
        config: PipelineConfig { parallelism: 4, ..config() },
    };
    assert_eq!(pipeline.workers(10), 1, "scripted backend is not concurrent");
    let mut other = record();
    other.id = "isear-2".into();
    other.text = "unscripted".into();
    let runs = pipeline.run_all(&[record(), other]);
    assert_eq!(runs[0].record_id, "isear-1");
    assert!(runs[0].result.is_ok());
    assert_eq!(runs[1].result.as_ref().unwrap_err().stage, Stage::Contexts);
}
