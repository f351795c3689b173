use std::fs;

use persona_dialog::pipeline::{run_pipeline, Layout, Manifest, RunOptions};
use persona_dialog::Error;

#[test]
fn tiny_manifest_runs_resumes_and_invalidates_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::tiny(&dir.path().join("run")).unwrap();
    let start = std::time::Instant::now();
    let first = run_pipeline(&manifest, RunOptions::default()).unwrap();
    println!("tiny pipeline: {:.1}s", start.elapsed().as_secs_f64());
    println!("{}", first.report.to_markdown());
    assert!(first.skipped.is_empty());
    assert_eq!(first.report.table4.len(), manifest.variants.len());
    assert_eq!(first.report.table5.len(), manifest.variants.len() + 1);
    for row in &first.report.table4 {
        assert!(row.perplexity >= 1.0);
        assert!((0.0..=1.0).contains(&row.distinct_1) && (0.0..=1.0).contains(&row.distinct_2));
        assert_eq!(row.accuracy.len(), 3);
    }

    // existing results are never overwritten implicitly
    match run_pipeline(&manifest, RunOptions::default()) {
        Err(Error::Config(_)) => {}
        other => panic!("expected a refusal, got {other:?}"),
    }

    let again = run_pipeline(&manifest, RunOptions { resume: true, overwrite: false }).unwrap();
    assert!(again.executed.is_empty(), "{:?}", again.executed);
    assert_eq!(again.report, first.report);

    let layout = Layout { root: manifest.output_dir.clone() };
    fs::remove_file(layout.model("avg+paa")).unwrap();
    let partial = run_pipeline(&manifest, RunOptions { resume: true, overwrite: false }).unwrap();
    assert_eq!(partial.executed, vec!["train:avg+paa", "eval", "eval-biased", "report"]);
    // training is deterministic, so the rebuilt report is identical
    assert_eq!(partial.report, first.report);
}

#[test]
fn missing_referenced_paths_are_rejected_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "output_dir = {:?}\n[corpus]\nsessions = \"nope/sessions.jsonl\"\n",
        dir.path().join("out")
    );
    let m = Manifest::from_toml(&text, dir.path()).unwrap();
    assert!(matches!(run_pipeline(&m, RunOptions::default()), Err(Error::Config(_))));
    assert!(Manifest::from_toml("output_dir = \"x\"\nbogus = 1\n", dir.path()).is_err());
}

#[test]
fn concat_width_follows_the_trait_count() {
    use persona_dialog::pipeline::ModelSettings;
    use persona_dialog::seq2seq::{PersonaModel, Variant};
    let concat: Variant = "concat+pab".parse().unwrap();
    let c = ModelSettings::default().config(100, &concat);
    assert_eq!(c.persona_dim, 30);
    assert!(PersonaModel::new(c, 0).is_ok());
    let att = ModelSettings::default().config(100, &"att+pab".parse::<Variant>().unwrap());
    assert_eq!(att.persona_dim, 32);
    let explicit = ModelSettings { persona_dim: Some(32), ..Default::default() }.config(100, &concat);
    assert!(matches!(PersonaModel::new(explicit, 0), Err(Error::Config(_))));
}
