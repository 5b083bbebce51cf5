use m2m_core::embedding::Domain;
use m2m_core::reid::{
    extract_features, load_feature_model, save_feature_model, train_feature_learner, FeatureLearnerSpec, Scheme,
};
use m2m_core::synthdata::{select, synthesize, DatasetRecord, Split, SynthSpec};
use m2m_core::Tensor;

fn records() -> Vec<DatasetRecord<f32>> {
    let spec = SynthSpec {
        n_identities: 6,
        n_test_identities: 3,
        images_per_camera: 2,
        ..SynthSpec::desk(2, 2, 3)
    };
    synthesize(&spec).unwrap()
}

#[test]
fn saved_model_gives_identical_features() {
    let recs = records();
    let train: Vec<DatasetRecord<f32>> = select(&recs, Domain::Source, Split::Train)
        .into_iter()
        .cloned()
        .collect();
    let mut spec = FeatureLearnerSpec::desk(6, Scheme::Fake, 11);
    spec.fit.epochs = 2;
    let model = train_feature_learner(&spec, &train, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.m2mf");
    save_feature_model(&path, &model, serde_json::json!({ "note": "round trip" })).unwrap();
    let (loaded, manifest) = load_feature_model::<f32>(&path).unwrap();
    assert_eq!(loaded.identities, model.identities);
    assert_eq!(loaded.log, model.log);
    assert_eq!(manifest.provenance["note"], "round trip");

    let probe: Vec<&Tensor<f32>> = select(&recs, Domain::Target, Split::Query)
        .into_iter()
        .map(|r| &r.image)
        .collect();
    let a = extract_features(&model, &probe).unwrap();
    let b = extract_features(&loaded, &probe).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn wrong_dtype_and_corrupt_files_are_rejected() {
    let recs = records();
    let train: Vec<DatasetRecord<f32>> = select(&recs, Domain::Source, Split::Train)
        .into_iter()
        .cloned()
        .collect();
    let mut spec = FeatureLearnerSpec::desk(6, Scheme::Fake, 1);
    spec.fit.epochs = 1;
    let model = train_feature_learner(&spec, &train, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.m2mf");
    save_feature_model(&path, &model, serde_json::Value::Null).unwrap();
    assert!(load_feature_model::<f64>(&path).is_err());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let err = load_feature_model::<f32>(&path).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}
