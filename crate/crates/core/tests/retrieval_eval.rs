//! Ranking, CMC scoring, embedding persistence, run configuration, and
//! variant-harness behavior.

use std::collections::BTreeMap;
use std::path::PathBuf;

use medreid_core::ablation::{apply_sweep_value, SweepParam, VariantSpec};
use medreid_core::compa::ModalityMode;
use medreid_core::config::RunConfig;
use medreid_core::data_model::{
    assign_eval_patients, split_query_gallery, DatasetManifest, ImageRecord, ImageSource, Split,
};
use medreid_core::med_prior::MedAlignMode;
use medreid_core::retrieval::{
    cmc_rank_k, load_embeddings, patient_map, perfect_embeddings, rank, report_from_embeddings,
    save_embeddings, EmbeddingRecord, EvalReport,
};

fn emb(id: &str, patient: &str, v: &[f32]) -> EmbeddingRecord {
    EmbeddingRecord {
        record_id: id.into(),
        patient_id: patient.into(),
        modality_label: "m0".into(),
        embedding: v.to_vec(),
    }
}

fn result_with_ranks(query: &str, ids: &[&str]) -> medreid_core::retrieval::RetrievalResult {
    medreid_core::retrieval::RetrievalResult {
        query_id: query.into(),
        ranked: ids
            .iter()
            .enumerate()
            .map(|(i, id)| ((*id).to_string(), 1.0 - i as f32 * 0.01))
            .collect(),
    }
}

#[test]
fn rank_excludes_self_and_sorts_descending() {
    let q = emb("q", "pa", &[1.0, 0.0]);
    let gallery = vec![
        emb("q", "pa", &[1.0, 0.0]), // same record id: must be excluded
        emb("g1", "pa", &[0.8, 0.6]),
        emb("g2", "pb", &[0.0, 1.0]),
        emb("g3", "pb", &[0.99, 0.14]),
    ];
    let res = rank(&q, &gallery);
    assert_eq!(res.ranked.len(), 3);
    let ids: Vec<&str> = res.ranked.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, vec!["g3", "g1", "g2"]);
    for w in res.ranked.windows(2) {
        assert!(w[0].1 >= w[1].1);
    }
}

#[test]
fn rank_breaks_score_ties_by_record_id() {
    // orthogonal gallery vectors give identical zero scores
    let q = emb("q", "pa", &[1.0, 0.0, 0.0]);
    let gallery = vec![
        emb("zz", "pb", &[0.0, 1.0, 0.0]),
        emb("aa", "pb", &[0.0, 0.0, 1.0]),
        emb("mm", "pb", &[0.0, -1.0, 0.0]),
    ];
    let res = rank(&q, &gallery);
    let ids: Vec<&str> = res.ranked.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, vec!["aa", "mm", "zz"]);
}

#[test]
fn rank_is_invariant_to_gallery_order() {
    let q = emb("q", "pa", &[0.6, 0.8]);
    let mut gallery = vec![
        emb("g1", "pa", &[1.0, 0.0]),
        emb("g2", "pb", &[0.0, 1.0]),
        emb("g3", "pc", &[0.7, 0.7]),
        emb("g4", "pd", &[-1.0, 0.0]),
    ];
    let base = rank(&q, &gallery);
    gallery.reverse();
    let rev = rank(&q, &gallery);
    assert_eq!(base.ranked, rev.ranked);
}

#[test]
fn cmc_hand_example_matches_enumeration() {
    // three queries whose first correct match sits at ranks 1, 2 and 5
    let mut patient_of = BTreeMap::new();
    for (id, p) in [
        ("q1", "a"),
        ("q2", "b"),
        ("q3", "c"),
        ("a1", "a"),
        ("b1", "b"),
        ("c1", "c"),
        ("x1", "x"),
        ("x2", "x"),
        ("x3", "x"),
        ("x4", "x"),
    ] {
        patient_of.insert(id.to_string(), p.to_string());
    }
    let results = vec![
        result_with_ranks("q1", &["a1", "x1", "x2", "x3", "x4"]),
        result_with_ranks("q2", &["x1", "b1", "x2", "x3", "x4"]),
        result_with_ranks("q3", &["x1", "x2", "x3", "x4", "c1"]),
    ];
    let r1 = cmc_rank_k(&results, &patient_of, 1).unwrap();
    let r5 = cmc_rank_k(&results, &patient_of, 5).unwrap();
    assert!((r1 - 100.0 / 3.0).abs() < 1e-9);
    assert!((r5 - 100.0).abs() < 1e-12);
    // CMC is nondecreasing in k
    let mut last = 0.0;
    for k in 1..=5 {
        let v = cmc_rank_k(&results, &patient_of, k).unwrap();
        assert!(v >= last);
        last = v;
    }
}

#[test]
fn cmc_with_k_at_least_gallery_size_is_perfect() {
    let mut patient_of = BTreeMap::new();
    for (id, p) in [("q1", "a"), ("g1", "b"), ("g2", "a")] {
        patient_of.insert(id.to_string(), p.to_string());
    }
    let results = vec![result_with_ranks("q1", &["g1", "g2"])];
    assert_eq!(cmc_rank_k(&results, &patient_of, 2).unwrap(), 100.0);
    assert_eq!(cmc_rank_k(&results, &patient_of, 100).unwrap(), 100.0);
}

#[test]
fn cmc_errors_when_query_patient_missing_from_gallery() {
    let mut patient_of = BTreeMap::new();
    patient_of.insert("q1".to_string(), "a".to_string());
    patient_of.insert("g1".to_string(), "b".to_string());
    let results = vec![result_with_ranks("q1", &["g1"])];
    assert!(cmc_rank_k(&results, &patient_of, 1).is_err());
}

fn eval_manifest() -> DatasetManifest {
    let mut records = Vec::new();
    for p in 0..6 {
        for i in 0..3 {
            records.push(ImageRecord {
                id: format!("p{p}_i{i}"),
                patient_id: format!("p{p}"),
                modality_label: format!("m{}", i % 2),
                source: ImageSource::Single(PathBuf::from(format!("p{p}_i{i}.png"))),
                split: None,
            });
        }
    }
    let mut m = DatasetManifest::from_records(records);
    assign_eval_patients(&mut m, 6, 3).unwrap();
    split_query_gallery(&mut m, 3);
    m
}

#[test]
fn perfect_embeddings_score_r1_100() {
    let m = eval_manifest();
    let queries = perfect_embeddings(&m, Split::Query);
    let gallery = perfect_embeddings(&m, Split::Gallery);
    let report = report_from_embeddings(&queries, &gallery, "synthetic", 3).unwrap();
    assert_eq!(report.r1, 100.0);
    assert_eq!(report.r5, 100.0);
    assert_eq!(report.num_query, 6);
    assert_eq!(report.num_gallery, 12);
}

#[test]
fn report_serializes_rank_fields_in_uppercase() {
    let report = EvalReport {
        dataset: "synthetic".into(),
        split_seed: 3,
        r1: 50.0,
        r5: 75.0,
        r10: 100.0,
        num_query: 4,
        num_gallery: 8,
    };
    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains("\"R1\":50.0"));
    assert!(json.contains("\"R5\":75.0"));
    assert!(json.contains("\"R10\":100.0"));
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.r1, 50.0);
}

#[test]
fn embeddings_round_trip_through_archive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.safetensors");
    let records = vec![
        emb("r1", "pa", &[0.1, 0.2, 0.3]),
        emb("r2", "pb", &[0.4, 0.5, 0.6]),
        emb("r3", "pa", &[-0.7, 0.8, 0.9]),
    ];
    save_embeddings(&path, &records).unwrap();
    let loaded = load_embeddings(&path).unwrap();
    assert_eq!(loaded.len(), 3);
    for r in &records {
        let l = loaded.iter().find(|l| l.record_id == r.record_id).unwrap();
        assert_eq!(l.patient_id, r.patient_id);
        assert_eq!(l.modality_label, r.modality_label);
        assert_eq!(l.embedding, r.embedding);
    }
}

#[test]
fn patient_map_covers_all_records() {
    let records = vec![emb("r1", "pa", &[1.0]), emb("r2", "pb", &[1.0])];
    let map = patient_map(&records);
    assert_eq!(map["r1"], "pa");
    assert_eq!(map["r2"], "pb");
}

// --- run configuration ---

#[test]
fn run_config_round_trips_through_toml() {
    let mut cfg = RunConfig::default();
    cfg.manifest = PathBuf::from("data/manifest.jsonl");
    cfg.run_dir = PathBuf::from("runs/a");
    cfg.train.total_steps = 123;
    cfg.teacher_seed = 42;
    let text = cfg.to_toml().unwrap();
    let back: RunConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn run_config_rejects_unknown_keys() {
    let text = "manifest = \"m.jsonl\"\nrun_dir = \"runs/a\"\nbanana = 3\n";
    let parsed: Result<RunConfig, _> = toml::from_str(text);
    assert!(parsed.is_err());
    let nested = "manifest = \"m.jsonl\"\n[train]\nlearning_rate_typo = 0.1\n";
    let parsed: Result<RunConfig, _> = toml::from_str(nested);
    assert!(parsed.is_err());
}

#[test]
fn run_config_requires_manifest_path() {
    let cfg = RunConfig::default();
    assert!(cfg.validate().is_err());
}

#[test]
fn run_config_echo_writes_resolved_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.manifest = PathBuf::from("m.jsonl");
    cfg.echo(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    let back: RunConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, cfg);
}

// --- variant harness ---

#[test]
fn variant_flags_map_to_model_config() {
    let backbone = medreid_core::backbone::BackboneConfig::default();
    let spec = VariantSpec {
        name: "custom".into(),
        modality_mode: ModalityMode::Discrete,
        med_align: MedAlignMode::Global,
        codebook_size: 8,
        rank: 4,
        groups: 16,
        lambda: 0.1,
        n_query_tokens: 2,
    };
    let cfg = spec.model_config(&backbone, 10, 2).unwrap();
    assert_eq!(cfg.compa.mode, ModalityMode::Discrete);
    assert_eq!(cfg.compa.codebook_size, 8);
    assert_eq!(cfg.compa.rank, 4);
    assert_eq!(cfg.compa.groups, 16);
    assert_eq!(cfg.compa.d_m, backbone.dim);
    assert_eq!(cfg.med.mode, MedAlignMode::Global);
    assert_eq!(cfg.med.n_query_tokens, 2);
    assert_eq!(cfg.n_identities, 10);
}

#[test]
fn alignment_with_zero_weight_is_contradictory() {
    let backbone = medreid_core::backbone::BackboneConfig::default();
    let mut spec = VariantSpec::default();
    spec.med_align = MedAlignMode::SelectedSubtraction;
    spec.lambda = 0.0;
    assert!(spec.model_config(&backbone, 10, 2).is_err());
}

#[test]
fn sweep_values_override_one_knob() {
    let base = VariantSpec::default();
    let v = apply_sweep_value(&base, SweepParam::R, 8.0).unwrap();
    assert_eq!(v.rank, 8);
    let v = apply_sweep_value(&base, SweepParam::L, 128.0).unwrap();
    assert_eq!(v.codebook_size, 128);
    let v = apply_sweep_value(&base, SweepParam::G, 32.0).unwrap();
    assert_eq!(v.groups, 32);
    let v = apply_sweep_value(&base, SweepParam::Lambda, 0.001).unwrap();
    assert!((v.lambda - 0.001).abs() < 1e-12);
}

#[test]
fn sweep_param_parses_common_spellings() {
    assert_eq!("L".parse::<SweepParam>().unwrap(), SweepParam::L);
    assert_eq!("r".parse::<SweepParam>().unwrap(), SweepParam::R);
    assert_eq!("G".parse::<SweepParam>().unwrap(), SweepParam::G);
    assert_eq!("lambda".parse::<SweepParam>().unwrap(), SweepParam::Lambda);
    assert!("bogus".parse::<SweepParam>().is_err());
}
