//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Run with `cargo test -p crowdlearn-core --test acceptance -- --nocapture` to see them.

use crowdlearn::data::{make_synthetic_blobs, AnnotatorProfile, annotate};
use crowdlearn::diagnostics::{theorem1_fit, theorem1_oracle, OracleOptions};
use crowdlearn::diff::{fd_check, fd_check_params, Graph, Tensor, Var};
use crowdlearn::experiment::{run_experiment, ExperimentConfig, Overrides, RunOutcome};
use crowdlearn::model::{ConfusionMode, Model, ModelSpec, NetSpec};
use crowdlearn::noise::{corrupt_labels, empirical_confusion, random_permutation, NoiseKind, NoiseSpec};
use crowdlearn::objective::{combined_loss, entropy, info, LambdaSchedule, RegularizerKind};
use crowdlearn::rng;
use crowdlearn::trainer::{train, train_cross_entropy, TrainConfig};
use rand::Rng;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

fn verdict(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "acceptance/tensor");
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

// Runs of the bundled configs, shared between criteria.

struct Pair {
    regularized: RunOutcome,
    baseline: RunOutcome,
    seconds: [f64; 2],
}

fn run_config(name: &str, out: &Path) -> (RunOutcome, f64) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    let mut config = ExperimentConfig::load(&path).unwrap();
    config.apply(&Overrides { out: Some(out.to_path_buf()), ..Overrides::default() });
    config.validate().unwrap();
    let t = Instant::now();
    let outcome = run_experiment(&config).unwrap();
    (outcome, t.elapsed().as_secs_f64())
}

fn run_pair(regularized: &str, baseline: &str, round: &str) -> Pair {
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(round);
    let (r, tr) = run_config(regularized, &out);
    let (b, tb) = run_config(baseline, &out);
    Pair { regularized: r, baseline: b, seconds: [tr, tb] }
}

fn classification() -> &'static Pair {
    static RUNS: OnceLock<Pair> = OnceLock::new();
    RUNS.get_or_init(|| run_pair("mnist_pairflip45_entropy", "mnist_pairflip45_none", "first"))
}

fn segmentation() -> &'static Pair {
    static RUNS: OnceLock<Pair> = OnceLock::new();
    RUNS.get_or_init(|| run_pair("segmentation_info", "segmentation_trace", "first"))
}

fn report_bytes(o: &RunOutcome) -> Vec<u8> {
    std::fs::read(o.dir.join("report.csv")).unwrap()
}

#[test]
fn criterion_01_gradient_certification() {
    let t = Instant::now();
    let (step, tol) = (1e-5, 1e-4);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let mut check = |f: &dyn Fn(&mut Graph, Var) -> crowdlearn::Result<Var>, at: &Tensor| {
        let rep = fd_check(f, at, step, tol).unwrap();
        worst = worst.max(rep.max_rel_error);
        checks += 1;
    };
    let weigh = |g: &mut Graph, v: Var| -> crowdlearn::Result<Var> {
        let shape = g.shape(v).to_vec();
        let w = g.constant(random(&shape, -1.0, 1.0, 77));
        let p = g.mul(v, w)?;
        Ok(g.sum(p))
    };
    let a = random(&[3, 4], -1.0, 1.0, 1);
    let pos = random(&[3, 4], 0.1, 2.0, 2);
    let c = random(&[3, 4], -1.0, 1.0, 3);
    let img = random(&[2, 3, 4, 6], -1.0, 1.0, 4);
    let ker = random(&[2, 3, 3, 3], -1.0, 1.0, 5);
    let u = random(&[4, 3, 3], -1.0, 1.0, 6);
    let p = random(&[4, 3], -1.0, 1.0, 7);

    check(&|g, x| { let k = g.constant(c.clone()); let y = g.add(x, k)?; weigh(g, y) }, &a);
    check(&|g, x| { let k = g.constant(c.clone()); let y = g.sub(k, x)?; weigh(g, y) }, &a);
    check(&|g, x| { let k = g.constant(c.clone()); let y = g.mul(x, k)?; let y = g.mul(y, x)?; weigh(g, y) }, &a);
    check(&|g, x| { let y = g.scale(x, 1.3); let y = g.neg(y); let y = g.add_scalar(y, 0.2); weigh(g, y) }, &a);
    check(&|g, x| { let y = g.exp(x)?; weigh(g, y) }, &a);
    check(&|g, x| { let y = g.relu(x); weigh(g, y) }, &a);
    check(&|g, x| { let y = g.log(x)?; weigh(g, y) }, &pos);
    check(&|g, x| { let y = g.xlogx(x)?; weigh(g, y) }, &pos);
    check(&|g, x| { let y = g.softmax(x, 0)?; weigh(g, y) }, &a);
    check(&|g, x| { let y = g.softmax(x, 1)?; weigh(g, y) }, &a);
    check(&|g, x| { let k = g.constant(random(&[4, 2], -1.0, 1.0, 8)); let y = g.matmul(x, k)?; weigh(g, y) }, &a);
    check(&|g, x| { let k = g.constant(random(&[2, 3], -1.0, 1.0, 9)); let y = g.matmul(k, x)?; weigh(g, y) }, &a);
    check(&|g, x| { let y = g.transpose(x)?; weigh(g, y) }, &a);
    check(&|g, x| { let y = g.reshape(x, &[6, 2])?; weigh(g, y) }, &a);
    check(&|g, x| { let y = g.gather(x, 1, &[3, 0, 0])?; weigh(g, y) }, &a);
    check(&|g, x| { let y = g.max_axis(x, 1)?; weigh(g, y) }, &a);
    check(&|g, x| Ok(g.mean(x)), &a);
    check(&|g, b| { let x = g.constant(a.clone()); let y = g.add_bias(x, b)?; weigh(g, y) }, &random(&[4], -1.0, 1.0, 10));
    check(&|g, x| { let k = g.constant(ker.clone()); let y = g.conv2d(x, k, 1)?; weigh(g, y) }, &img);
    check(&|g, k| { let x = g.constant(img.clone()); let y = g.conv2d(x, k, 0)?; weigh(g, y) }, &ker);
    check(&|g, b| { let x = g.constant(img.clone()); let y = g.add_channel_bias(x, b)?; weigh(g, y) }, &random(&[3], -1.0, 1.0, 11));
    check(&|g, x| { let y = g.maxpool2d(x)?; weigh(g, y) }, &img);
    check(&|g, x| { let y = g.upsample2x(x)?; weigh(g, y) }, &img);
    check(&|g, x| { let y = g.permute(x, &[0, 2, 3, 1])?; weigh(g, y) }, &img);
    check(&|g, x| { let y = g.concat(&[x, x], 1)?; weigh(g, y) }, &img);
    check(&|g, x| { let k = g.constant(p.clone()); let y = g.batched_matvec(x, k)?; weigh(g, y) }, &u);
    check(&|g, x| { let k = g.constant(u.clone()); let y = g.batched_matvec(k, x)?; weigh(g, y) }, &p);

    // Full objective at C=3, R=2, B=2 for every confusion parameterization and regularizer.
    let x = random(&[2, 1, 6, 6], 0.0, 1.0, 12);
    let labels = vec![vec![0, 2], vec![1, 1]];
    for mode in [ConfusionMode::Static, ConfusionMode::Conditioned] {
        for kind in [RegularizerKind::Entropy, RegularizerKind::Info, RegularizerKind::Trace] {
            let mut m = Model::new(ModelSpec::new(3, 6, 6, 2, NetSpec::Mlp { hidden: 4 }, mode), 13).unwrap();
            // Move off the identity initialization so every confusion entry carries gradient.
            let mut r = rng::stream(14, "acceptance/perturb");
            for prm in m.params_mut().iter_mut() {
                for v in prm.value.data_mut() {
                    *v += r.random_range(-0.5..0.5);
                }
            }
            let rep = fd_check_params(
                m.params(),
                |g, params| {
                    let mut mm = m.clone();
                    *mm.params_mut() = params.clone();
                    let xv = g.constant(x.clone());
                    let f = mm.forward(g, xv)?;
                    Ok(combined_loss(g, &f, &labels, 0.7, kind)?.total)
                },
                step,
                tol,
                1,
            )
            .unwrap();
            worst = worst.max(rep.max_rel_error);
            checks += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(1, worst < tol && secs < 10.0, format!("{checks} checks, max rel err {worst:.2e}, {secs:.1}s"));
}

#[test]
fn criterion_02_regularizer_identities() {
    let ln3 = 3f64.ln();
    let fixture = [0.7, 0.2, 0.1];
    let mut err: f64 = 0.0;
    err = err.max(entropy(&[1.0, 0.0, 0.0]).abs()).max(info(&[0.0, 1.0, 0.0]).abs());
    err = err.max((entropy(&[1.0 / 3.0; 3]) - ln3).abs()).max((info(&[1.0 / 3.0; 3]) - ln3).abs());
    let h: f64 = -fixture.iter().map(|p: &f64| p * p.ln()).sum::<f64>();
    err = err.max((entropy(&fixture) - h).abs()).max((info(&fixture) + 0.7f64.ln()).abs());
    let rounded = (entropy(&fixture) - 0.801819).abs() < 5e-7 && (info(&fixture) - 0.356675).abs() < 5e-7;

    let mut r = rng::stream(15, "acceptance/simplex");
    let mut violations = 0;
    for k in 0..10_000 {
        let c = 2 + k % 11;
        let mut p: Vec<f64> = (0..c).map(|_| -r.random_range(f64::EPSILON..1.0).ln()).collect();
        if k % 4 == 0 {
            // Sparse draws exercise the zero-probability convention.
            for v in p.iter_mut().step_by(2) {
                *v = 0.0;
            }
            p[c - 1] += 1.0;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        if info(&p) > entropy(&p) + 1e-12 {
            violations += 1;
        }
    }
    verdict(2, err < 1e-9 && rounded && violations == 0, format!("max identity error {err:.1e}, {violations} violations in 10^4 draws"));
}

#[test]
fn criterion_03_theorem1_recovery() {
    let t = Instant::now();
    let truth = NoiseSpec::pairflip(0.45).build(5, 0).unwrap();
    let rep = theorem1_oracle(&truth, 50_000, 16, OracleOptions::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let max_tv = rep.learned_vs_empirical.max_tv;

    let clean = [0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2];
    let noisy = [0, 0, 0, 1, 2, 1, 1, 2, 0, 2, 0, 1];
    let small = theorem1_fit(&clean, &noisy, 3, OracleOptions::default()).unwrap();
    let counts = empirical_confusion(&clean, &noisy, 3).unwrap().matrix;
    let exact = small.learned_vs_empirical.learned.as_slice().iter().zip(counts.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        3,
        max_tv < 0.02 && exact < 1e-6 && secs < 60.0,
        format!("N=50000 max column TV {max_tv:.2e} in {secs:.1}s; 12-sample max abs error {exact:.1e}"),
    );
}

#[test]
fn criterion_04_noise_simulators() {
    let n = 100_000;
    let mut worst_col: f64 = 0.0;
    let mut flips_outside = Vec::new();
    let mut cells_outside = Vec::new();
    let mut configs = 0;
    for c in [2usize, 4, 10] {
        for rate in [0.0, 0.2, 0.45, 0.5, 0.95] {
            for kind in [NoiseKind::Symmetric, NoiseKind::Pairflip, NoiseKind::PairflipPermuted, NoiseKind::Asymmetric] {
                let mut spec = NoiseSpec::new(kind, rate);
                match kind {
                    NoiseKind::PairflipPermuted => spec.permutation = Some(random_permutation(c, 17)),
                    NoiseKind::Asymmetric => spec.neighborhood = Some(4.min(c - 1)),
                    _ => {}
                }
                let m = spec.build(c, 0).unwrap();
                worst_col = worst_col.max(m.max_column_error());
                let clean: Vec<usize> = (0..n).map(|k| k % c).collect();
                // Independent draws per configuration.
                let noisy = corrupt_labels(&clean, &m, rng::derive(0, &format!("acceptance/noise/{kind}/{c}/{rate}"))).unwrap();
                configs += 1;

                // Overall flip fraction against its binomial 3 sigma band.
                let flips = clean.iter().zip(&noisy).filter(|(y, z)| y != z).count() as f64;
                let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
                if (flips - n as f64 * rate).abs() > 3.0 * sigma {
                    flips_outside.push(format!("{kind} C={c} rate={rate} z={:.2}", (flips - n as f64 * rate) / sigma));
                }

                // Every transition cell, at a band wide enough for 2400 simultaneous cells.
                let mut count = vec![0usize; c * c];
                for (&y, &z) in clean.iter().zip(&noisy) {
                    count[z * c + y] += 1;
                }
                let per = (n / c) as f64;
                for j in 0..c {
                    for i in 0..c {
                        let u = m.get(j, i);
                        let sigma = (per * u * (1.0 - u)).sqrt();
                        if (count[j * c + i] as f64 - per * u).abs() > 4.5 * sigma {
                            cells_outside.push(format!("{kind} C={c} rate={rate} ({j},{i})"));
                        }
                    }
                }
            }
        }
    }
    verdict(
        4,
        worst_col < 1e-12 && flips_outside.is_empty() && cells_outside.is_empty(),
        format!(
            "max column-sum error {worst_col:.1e}; flip fraction outside 3 sigma in {:?} of {configs}; cells outside 4.5 sigma {cells_outside:?}",
            flips_outside
        ),
    );
}

#[test]
fn criterion_05_regularization_benefit() {
    let runs = classification();
    let (r, b) = (&runs.regularized.summary, &runs.baseline.summary);
    let gap = r.final_test_metric - b.final_test_metric;
    let slowest = runs.seconds[0].max(runs.seconds[1]);
    verdict(
        5,
        gap >= 0.02 && r.final_test_metric >= 0.97 && r.final_entropy < b.final_entropy && slowest < 900.0,
        format!(
            "accuracy {:.4} vs {:.4} (gap {:.2} pp), entropy {:.4} vs {:.4}, slowest run {slowest:.0}s",
            r.final_test_metric,
            b.final_test_metric,
            100.0 * gap,
            r.final_entropy,
            b.final_entropy
        ),
    );
}

#[test]
fn criterion_06_confusion_recovery() {
    let runs = classification();
    let (r, b) = (&runs.regularized.summary.recovery_mean_tv, &runs.baseline.summary.recovery_mean_tv);
    let worst_r = r.iter().cloned().fold(0.0, f64::max);
    let pass = worst_r < 0.05 && r.iter().zip(b).all(|(x, y)| y > x);
    verdict(6, pass, format!("mean column TV regularized {r:.4?}, unregularized {b:.4?}"));
}

#[test]
fn criterion_07_curated_style_conditioning() {
    let runs = run_pair("curated_styles_entropy", "curated_styles_none", "curated");
    let rec = runs.regularized.recovery.as_ref().unwrap();
    let worst = rec.worst_mean_tv();
    let (r, b) = (&runs.regularized.summary, &runs.baseline.summary);
    verdict(
        7,
        worst < 0.1 && r.final_test_metric > b.final_test_metric && r.final_entropy < b.final_entropy,
        format!(
            "worst per-(annotator, style) mean TV {worst:.4} over {} entries; accuracy {:.4} vs {:.4}; entropy {:.4} vs {:.4}",
            rec.entries.len(),
            r.final_test_metric,
            b.final_test_metric,
            r.final_entropy,
            b.final_entropy
        ),
    );
}

#[test]
fn criterion_08_segmentation() {
    let runs = segmentation();
    let (i, t) = (&runs.regularized.summary, &runs.baseline.summary);
    let slowest = runs.seconds[0].max(runs.seconds[1]);
    verdict(
        8,
        i.final_test_metric >= 0.93
            && i.final_test_metric >= t.final_test_metric - 0.005
            && i.final_entropy < t.final_entropy
            && slowest < 1200.0,
        format!(
            "DICE info {:.4} vs trace {:.4}; pixel entropy {:.4} vs {:.4}; slowest run {slowest:.0}s",
            i.final_test_metric, t.final_test_metric, i.final_entropy, t.final_entropy
        ),
    );
}

#[test]
fn criterion_09_determinism() {
    let mut same = Vec::new();
    for (first, names) in [
        (classification(), ["mnist_pairflip45_entropy", "mnist_pairflip45_none"]),
        (segmentation(), ["segmentation_info", "segmentation_trace"]),
    ] {
        let again = run_pair(names[0], names[1], "second");
        same.push(report_bytes(&first.regularized) == report_bytes(&again.regularized));
        same.push(report_bytes(&first.baseline) == report_bytes(&again.baseline));
    }
    verdict(9, same.iter().all(|&s| s), format!("byte-identical report.csv per rerun: {same:?}"));
}

#[test]
fn criterion_10_identity_reduction() {
    let all = make_synthetic_blobs(300, 4, 12, 19);
    let profiles = [AnnotatorProfile::uniform("a", NoiseSpec::symmetric(0.3))];
    let data = annotate(&all, &profiles, 20).unwrap();
    let config = TrainConfig::new(3, 32, 1e-3, 21, RegularizerKind::None, LambdaSchedule::OFF);
    let spec = ModelSpec::new(4, 12, 12, 1, NetSpec::Lenet { conv1: 3, conv2: 4, kernel: 3, hidden: 16 }, ConfusionMode::Identity);
    let model = Model::new(spec, 22).unwrap();
    let view = data.train_view();
    let (a, ra) = train(&config, model.clone(), &view, &mut |_, _| Ok(())).unwrap();
    let (b, rb) = train_cross_entropy(&config, model, &view).unwrap();
    let bits = |m: &Model| m.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    let loss_bits = |r: &crowdlearn::trainer::TrainReport| r.records.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    let params_equal = bits(&a) == bits(&b);
    let trace_equal = loss_bits(&ra) == loss_bits(&rb) && ra.records.len() == 3;
    verdict(10, params_equal && trace_equal, format!("parameters identical {params_equal}, loss trace identical {trace_equal}"));
}
