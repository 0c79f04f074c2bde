//! End-to-end tests of the `cantus` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cantus_core::corpus::{MelodySequence, NoteEvent};
use cantus_core::midi::write_midi;

fn cantus() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cantus"))
}

fn run(args: &[&str]) -> Output {
    cantus().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A melody that passes every corpus filter.
fn valid_melody(variant: u64) -> MelodySequence {
    let notes: Vec<NoteEvent> = (0..40)
        .map(|i| NoteEvent {
            pitch: 55 + ((i * 3 + variant) % 14) as u8,
            onset: i * 480,
            duration: 480,
        })
        .collect();
    MelodySequence { tempo_bpm: 96.0, notes }
}

/// Too few notes: fails rule R1.
fn short_melody(variant: u64) -> MelodySequence {
    let notes: Vec<NoteEvent> = (0..10)
        .map(|i| NoteEvent {
            pitch: 60 + ((i + variant) % 9) as u8,
            onset: i * 480,
            duration: 480,
        })
        .collect();
    MelodySequence { tempo_bpm: 120.0, notes }
}

fn write_midi_dir(dir: &Path) -> PathBuf {
    let midi_dir = dir.join("midi");
    fs::create_dir_all(&midi_dir).unwrap();
    for i in 0..10u64 {
        let m = valid_melody(i);
        fs::write(midi_dir.join(format!("valid_{i:02}.mid")), write_midi(m.tempo_bpm, &m.notes))
            .unwrap();
    }
    for i in 0..2u64 {
        let m = short_melody(i);
        fs::write(midi_dir.join(format!("short_{i}.mid")), write_midi(m.tempo_bpm, &m.notes))
            .unwrap();
    }
    midi_dir
}

#[test]
fn ingest_counts_rules_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let midi_dir = write_midi_dir(tmp.path());
    let out = tmp.path().join("corpus");

    let result = run(&["ingest", midi_dir.to_str().unwrap(), out.to_str().unwrap()]);
    assert_ok(&result);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("# accepted 10"), "manifest:\n{manifest}");
    assert!(manifest.contains("# rejected R1 2"), "manifest:\n{manifest}");

    // Rerun produces byte-identical manifests.
    let again = run(&["ingest", midi_dir.to_str().unwrap(), out.to_str().unwrap()]);
    assert_ok(&again);
    assert_eq!(manifest, fs::read_to_string(out.join("manifest.txt")).unwrap());
    let run_manifest = fs::read_to_string(out.join("run_manifest.txt")).unwrap();
    let again_run = run(&["ingest", midi_dir.to_str().unwrap(), out.to_str().unwrap()]);
    assert_ok(&again_run);
    assert_eq!(run_manifest, fs::read_to_string(out.join("run_manifest.txt")).unwrap());
}

#[test]
fn ingest_missing_dir_exits_2() {
    let out = run(&["ingest", "/nonexistent/midi", "/tmp/unused_cantus_out"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn ingest_without_accepted_pieces_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = run(&[
        "ingest",
        empty.to_str().unwrap(),
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_duplicate_transposition_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let midi_dir = tmp.path().join("midi");
    fs::create_dir_all(&midi_dir).unwrap();
    let m = valid_melody(3);
    let up = cantus_core::corpus::transpose(&m, 5).unwrap();
    fs::write(midi_dir.join("a_original.mid"), write_midi(m.tempo_bpm, &m.notes)).unwrap();
    fs::write(midi_dir.join("b_transposed.mid"), write_midi(up.tempo_bpm, &up.notes)).unwrap();

    let out = tmp.path().join("corpus");
    let result = run(&["ingest", midi_dir.to_str().unwrap(), out.to_str().unwrap()]);
    assert_ok(&result);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("# accepted 1"), "{manifest}");
    assert!(manifest.contains("# duplicates 1"), "{manifest}");
}

fn make_corpus(tmp: &Path) -> PathBuf {
    let midi_dir = write_midi_dir(tmp);
    let out = tmp.join("corpus");
    let result = run(&["ingest", midi_dir.to_str().unwrap(), out.to_str().unwrap()]);
    assert_ok(&result);
    out
}

#[test]
fn lexicon_header_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = make_corpus(tmp.path());
    let lex = tmp.path().join("lexicon.txt");

    let result = run(&["lexicon", corpus.to_str().unwrap(), lex.to_str().unwrap()]);
    assert_ok(&result);
    let text = fs::read_to_string(&lex).unwrap();
    assert!(text.contains("# corpus_hash "), "header:\n{text}");
    assert!(text.contains("# n_max 12"));
    assert!(text.contains("# top_ratio 0.25"));
    cantus_core::lexicon::load_lexicon(&lex).expect("reloads");

    // Invalid ratio is a usage error.
    let bad = run(&[
        "lexicon",
        corpus.to_str().unwrap(),
        lex.to_str().unwrap(),
        "--top-ratio",
        "0",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

fn pretrain_tiny(tmp: &Path, corpus: &Path, lex: &Path) -> PathBuf {
    let out = tmp.join("pretrain");
    let result = run(&[
        "pretrain",
        corpus.to_str().unwrap(),
        lex.to_str().unwrap(),
        out.to_str().unwrap(),
        "--preset",
        "desk",
        "--steps",
        "4",
        "--batch-size",
        "2",
        "--seed",
        "5",
    ]);
    assert_ok(&result);
    out.join("checkpoint_final.ckpt")
}

#[test]
fn pipeline_pretrain_generate_inpaint_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = make_corpus(tmp.path());
    let lex = tmp.path().join("lexicon.txt");
    assert_ok(&run(&["lexicon", corpus.to_str().unwrap(), lex.to_str().unwrap()]));
    let ckpt = pretrain_tiny(tmp.path(), &corpus, &lex);
    assert!(ckpt.is_file());

    // Generation with a fixed seed is byte-reproducible.
    let gen_a = tmp.path().join("gen_a");
    let gen_b = tmp.path().join("gen_b");
    for out in [&gen_a, &gen_b] {
        let result = run(&[
            "generate",
            ckpt.to_str().unwrap(),
            out.to_str().unwrap(),
            "--count",
            "2",
            "--seed",
            "7",
        ]);
        assert_ok(&result);
    }
    for name in ["gen_000.mid", "gen_001.mid", "gen_000.tokens"] {
        assert_eq!(
            fs::read(gen_a.join(name)).unwrap(),
            fs::read(gen_b.join(name)).unwrap(),
            "{name} differs between seeded runs"
        );
    }

    // Inpainting a 16-bar piece.
    let piece = tmp.path().join("piece.notes");
    let long: Vec<NoteEvent> = (0..64u64)
        .map(|i| NoteEvent { pitch: 55 + (i % 14) as u8, onset: i * 480, duration: 480 })
        .collect();
    cantus_core::corpus::write_note_file(
        &piece,
        &MelodySequence { tempo_bpm: 100.0, notes: long },
    )
    .unwrap();
    let inp = tmp.path().join("inpaint");
    let result = run(&[
        "inpaint",
        ckpt.to_str().unwrap(),
        piece.to_str().unwrap(),
        inp.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_ok(&result);
    assert!(inp.join("inpaint.mid").is_file());
    let manifest = fs::read_to_string(inp.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("checkpoint.hash="));

    // A short piece is rejected with exit 2.
    let short = tmp.path().join("short.notes");
    cantus_core::corpus::write_note_file(&short, &valid_melody(0)).unwrap();
    let rejected = run(&[
        "inpaint",
        ckpt.to_str().unwrap(),
        short.to_str().unwrap(),
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(rejected.status.code(), Some(2));

    // Evaluate two settings against the corpus: TS and rank columns.
    let report = tmp.path().join("report.txt");
    let result = run(&[
        "evaluate",
        "--reference",
        corpus.to_str().unwrap(),
        "--setting",
        &format!("self={}", corpus.to_str().unwrap()),
        "--setting",
        &format!("gen={}", gen_a.to_str().unwrap()),
        report.to_str().unwrap(),
    ]);
    assert_ok(&result);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("TS\trank"), "report:\n{text}");
    assert!(text.contains("record setting=self run=0"));
    // The reference compared to itself dominates: task score 6, rank 1.
    let self_line = text.lines().find(|l| l.starts_with("self\t")).unwrap();
    assert!(self_line.ends_with("\t6\t1"), "self line: {self_line}");
}

#[test]
fn finetune_inpaint_rejects_short_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = make_corpus(tmp.path()); // 10-bar pieces only
    let lex = tmp.path().join("lexicon.txt");
    assert_ok(&run(&["lexicon", corpus.to_str().unwrap(), lex.to_str().unwrap()]));
    let ckpt = pretrain_tiny(tmp.path(), &corpus, &lex);

    let out = run(&[
        "finetune",
        corpus.to_str().unwrap(),
        ckpt.to_str().unwrap(),
        tmp.path().join("ft").to_str().unwrap(),
        "--task",
        "inpaint",
        "--steps",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("16 bars"));
}

#[test]
fn finetune_continuation_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = make_corpus(tmp.path());
    let lex = tmp.path().join("lexicon.txt");
    assert_ok(&run(&["lexicon", corpus.to_str().unwrap(), lex.to_str().unwrap()]));
    let ckpt = pretrain_tiny(tmp.path(), &corpus, &lex);

    let ft = tmp.path().join("ft");
    let result = run(&[
        "finetune",
        corpus.to_str().unwrap(),
        ckpt.to_str().unwrap(),
        ft.to_str().unwrap(),
        "--task",
        "continuation",
        "--steps",
        "3",
        "--batch-size",
        "2",
    ]);
    assert_ok(&result);
    assert!(ft.join("checkpoint_final.ckpt").is_file());
    let manifest = fs::read_to_string(ft.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("task=Continuation"));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = make_corpus(tmp.path());
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "top_ratio=0.5\nn_max=4\n").unwrap();

    let lex = tmp.path().join("lexicon.txt");
    let result = run(&[
        "lexicon",
        corpus.to_str().unwrap(),
        lex.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--n-max",
        "6",
    ]);
    assert_ok(&result);
    let text = fs::read_to_string(&lex).unwrap();
    assert!(text.contains("# n_max 6"), "flag wins over config");
    assert!(text.contains("# top_ratio 0.5"), "config value fills the gap");
}
