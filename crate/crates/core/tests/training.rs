use crowdlearn::data::{annotate, make_synthetic_blobs, AnnotatorProfile, LabeledDataset};
use crowdlearn::model::{ConfusionMode, Model, ModelSpec, NetSpec};
use crowdlearn::noise::NoiseSpec;
use crowdlearn::objective::{LambdaSchedule, RegularizerKind};
use crowdlearn::trainer::{evaluate, train, EpochRecord, TrainConfig, TrainReport};

fn fixture(n: usize, classes: usize, annotators: usize, noise: NoiseSpec, seed: u64) -> (LabeledDataset, LabeledDataset) {
    let all = make_synthetic_blobs(n + 500, classes, 28, seed);
    let train: Vec<usize> = (0..n).collect();
    let test: Vec<usize> = (n..n + 500).collect();
    let profiles: Vec<_> = (0..annotators).map(|r| AnnotatorProfile::uniform(format!("a{r}"), noise.clone())).collect();
    (annotate(&all.subset(&train), &profiles, seed + 1).unwrap(), all.subset(&test))
}

fn run(train_set: &LabeledDataset, test_set: &LabeledDataset, config: &TrainConfig, mode: ConfusionMode) -> TrainReport {
    let spec = ModelSpec::new(train_set.classes(), 28, 28, train_set.annotator_count().max(1), NetSpec::lenet(), mode);
    let model = Model::new(spec, config.seed).unwrap();
    let mut hook = |m: &Model, r: &mut EpochRecord| {
        let e = evaluate(m, test_set, 250)?;
        r.test_metric = Some(e.metric);
        r.entropy = Some(e.entropy);
        Ok(())
    };
    train(config, model, &train_set.train_view(), &mut hook).unwrap().1
}

#[test]
fn blobs_symmetric_noise_trains_to_high_accuracy() {
    let (tr, te) = fixture(2000, 4, 3, NoiseSpec::symmetric(0.4), 11);
    let config = TrainConfig::new(10, 32, 1e-3, 5, RegularizerKind::Entropy, LambdaSchedule::MNIST);
    let t = std::time::Instant::now();
    let report = run(&tr, &te, &config, ConfusionMode::Static);
    eprintln!("{:.1}s\n{}", t.elapsed().as_secs_f64(), report.to_csv());
    let last = report.last().unwrap();
    assert!(last.test_metric.unwrap() >= 0.95);
    assert!(last.entropy.unwrap() < report.initial.as_ref().unwrap().entropy.unwrap());
}
