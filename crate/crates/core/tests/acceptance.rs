//! One test per acceptance criterion. Criteria 5 and 6 need the real CIFAR-10
//! binary release under `$GLMC_DATA_ROOT` and many CPU hours, so they are ignored
//! by default; run them with `cargo test --release -p glmc-core --test acceptance -- --ignored`.

use std::collections::HashMap;
use std::path::PathBuf;

use candle_core::{DType, Tensor, Var};
use glmc::config::{Partner, SourceKind};
use glmc::datasets::{write_cifar10_like, SourceDescriptor, Split, SyntheticSpec};
use glmc::eval::predict;
use glmc::longtail::imbalance_factor;
use glmc::losses::{negative_cosine_rows, scalar};
use glmc::mixing::{cutmix_with_box, one_hot};
use glmc::model::checkpoint;
use glmc::sampler::Batch;
use glmc::{
    alpha, build_longtail_subset, class_weights, compute_class_counts, consistency_loss, evaluate, mixup,
    project_weights, report_from_predictions, run_experiment, train, train_baseline_ce, ClassFrequencyTable,
    CutBox, EvalReport, ExperimentConfig, Group, HeadMode, ImageShape, ImbalanceSpec, Method, Mixer, MixingConfig,
    Network, Precision, RepresentationBundle, TrainData,
};
use ndarray::{Array1, Array2, Array4};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Array4<f32> {
    Array4::from_shape_fn((n, c, h, w), |_| rng.random_range(-1.0f32..1.0))
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Batch {
    Batch {
        images: random_images(rng, n, 3, 8, 8),
        labels: (0..n).map(|_| rng.random_range(0..classes)).collect(),
        weights: (0..n).map(|_| rng.random_range(0.1f32..3.0)).collect(),
    }
}

// ---------------------------------------------------------------- criterion 1

fn check_class_weights() {
    let mut runner = TestRunner::new(ProptestConfig::with_cases(1000));
    let strategy = (prop::collection::vec(1usize..5000, 1..40), 0.0f64..=3.0);
    runner
        .run(&strategy, |(counts, k)| {
            let c = counts.len() as f64;
            let table = ClassFrequencyTable::new(counts).unwrap();
            let w = class_weights(&table, k).unwrap();
            let sum: f64 = w.as_slice().iter().sum();
            prop_assert!((sum - c).abs() < 1e-6, "sum {sum} for {c} classes at k={k}");
            prop_assert!(w.as_slice().iter().all(|&x| x > 0.0));
            Ok(())
        })
        .unwrap();
}

fn check_alpha_schedule() {
    for t_max in 1..=300 {
        assert_eq!(alpha(0, t_max).unwrap(), 1.0);
        assert_eq!(alpha(t_max, t_max).unwrap(), 0.0);
        let mut prev = f64::INFINITY;
        for e in 0..=t_max {
            let a = alpha(e, t_max).unwrap();
            assert!((0.0..=1.0).contains(&a));
            assert!(a < prev, "alpha not strictly decreasing at e={e}, T={t_max}");
            prev = a;
        }
    }
}

fn check_maxnorm() {
    let mut runner = TestRunner::new(ProptestConfig::with_cases(500));
    let strategy = (
        1usize..12,
        1usize..20,
        prop::collection::vec(-50.0f64..50.0, 240),
        prop_oneof![1e-3f64..0.1, 0.1f64..100.0],
    );
    runner
        .run(&strategy, |(rows, cols, data, delta)| {
            let w = Array2::from_shape_vec((rows, cols), data[..rows * cols].to_vec()).unwrap();
            let once = project_weights(&w, delta).unwrap();
            for row in once.rows() {
                let norm = row.dot(&row).sqrt();
                // the norm here sums in a different order than the projection does
                prop_assert!(norm <= delta * (1.0 + 1e-12), "norm {norm} above {delta}");
            }
            for (orig, proj) in w.rows().into_iter().zip(once.rows()) {
                if orig.dot(&orig).sqrt() < delta * (1.0 - 1e-12) {
                    prop_assert_eq!(orig, proj);
                }
            }
            let twice = project_weights(&once, delta).unwrap();
            prop_assert_eq!(once, twice);
            Ok(())
        })
        .unwrap();
}

fn check_mixing_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (n, c) = (5, 7);
        let x_i = random_images(&mut rng, n, 3, 8, 8);
        let x_j = random_images(&mut rng, n, 3, 8, 8);
        let y_i: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let y_j: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (p_i, p_j) = (one_hot(&y_i, c), one_hot(&y_j, c));
        let w_i = Array1::from_shape_fn(n, |_| rng.random_range(0.5f32..2.0));
        let w_j = Array1::from_shape_fn(n, |_| rng.random_range(0.5f32..2.0));

        let (x, p, w) = mixup(&x_i, &x_j, &p_i, &p_j, &w_i, &w_j, 1.0).unwrap();
        assert_eq!((&x, &p, &w), (&x_i, &p_i, &w_i));
        let (x, p, w) = mixup(&x_i, &x_j, &p_i, &p_j, &w_i, &w_j, 0.0).unwrap();
        assert_eq!((&x, &p, &w), (&x_j, &p_j, &w_j));

        let (bx, by) = (rng.random_range(0..8), rng.random_range(0..8));
        let cut = CutBox::new(bx, by, 1.0, 8, 8);
        let (x, p, w) = cutmix_with_box(&x_i, &x_j, &p_i, &p_j, &w_i, &w_j, &cut, 1.0).unwrap();
        assert_eq!((&x, &p, &w), (&x_i, &p_i, &w_i));
        let cut = CutBox::new(0, 0, 0.0, 8, 8);
        let (x, p, w) = cutmix_with_box(&x_i, &x_j, &p_i, &p_j, &w_i, &w_j, &cut, 0.0).unwrap();
        assert_eq!((&x, &p, &w), (&x_j, &p_j, &w_j));
    }
}

fn check_row_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mixer = Mixer::new(MixingConfig {
        seed: 3,
        ..MixingConfig::default()
    })
    .unwrap();
    for _ in 0..200 {
        let classes = rng.random_range(2..12);
        let n = rng.random_range(1..16);
        let u = random_batch(&mut rng, n, classes);
        let r = random_batch(&mut rng, n, classes);
        let mixed = mixer.make_mixed_batch(&u, &r, classes).unwrap();
        for row in mixed.p_mixed.rows() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}

fn check_cutmix_pixel_fraction() {
    // sides that make W·sqrt(1-λ) an integer, so the box needs no rounding
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for size in [4usize, 8, 16, 32] {
        for side in 0..=size {
            let lambda = 1.0 - (side * side) as f64 / (size * size) as f64;
            let x = rng.random_range(0..=size - side);
            let y = rng.random_range(0..=size - side);
            let cut = CutBox::new(x, y, lambda, size, size);
            assert!(!cut.is_clipped());
            let ones = Array4::from_elem((1, 1, size, size), 1.0f32);
            let zeros = Array4::zeros((1, 1, size, size));
            let p = one_hot(&[0], 2);
            let w = Array1::from_elem(1, 1.0f32);
            let (mixed, _, _) = cutmix_with_box(&ones, &zeros, &p, &p, &w, &w, &cut, lambda).unwrap();
            let kept = mixed.iter().filter(|&&v| v == 1.0).count();
            assert_eq!(kept + side * side, size * size);
            assert_eq!(kept as f64 / (size * size) as f64, lambda);
            assert_eq!(cut.retained_fraction(), lambda);
        }
    }
}

#[test]
fn criterion_1_formula_suite() {
    check_class_weights();
    check_alpha_schedule();
    check_maxnorm();
    check_mixing_identities();
    check_row_stochastic();
    check_cutmix_pixel_fraction();
}

// ---------------------------------------------------------------- criterion 2

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

fn affine(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter().zip(b).map(|(row, bi)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bi).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

struct HostHeads {
    r_g: Vec<Vec<f64>>,
    r_l: Vec<Vec<f64>>,
    proj_b: Vec<f64>,
    pred_w: Vec<Vec<f64>>,
    pred_b: Vec<f64>,
}

impl HostHeads {
    /// Consistency loss with the online branch using `online` and the target branch `target`.
    fn loss(&self, online: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
        let n = self.r_g.len();
        let mut total = 0.0;
        for i in 0..n {
            let u_g = affine(&self.pred_w, &self.pred_b, &affine(online, &self.proj_b, &self.r_g[i]));
            let u_l = affine(&self.pred_w, &self.pred_b, &affine(online, &self.proj_b, &self.r_l[i]));
            let h_g = affine(target, &self.proj_b, &self.r_g[i]);
            let h_l = affine(target, &self.proj_b, &self.r_l[i]);
            total += -cosine(&u_g, &h_l) - cosine(&u_l, &h_g);
        }
        total / n as f64
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm
}

fn check_projection_gradient() {
    let input = ImageShape::new(1, 4, 4);
    let net = Network::build("mlp16", input, 3, Some(6), DType::F64, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x_g = net.images_to_tensor(&random_images(&mut rng, 8, 1, 4, 4)).unwrap();
    let x_l = net.images_to_tensor(&random_images(&mut rng, 8, 1, 4, 4)).unwrap();
    let out = net.forward_views(&x_g, &x_l, true).unwrap();
    let loss = consistency_loss(&out.bundle).unwrap();
    let grads = loss.backward().unwrap();

    let param = |name: &str| net.store().get(name).unwrap().var.as_tensor().clone();
    let proj_w = rows(&param("projection.weight"));
    let host = HostHeads {
        r_g: rows(&out.bundle.r_g),
        r_l: rows(&out.bundle.r_l),
        proj_b: param("projection.bias").to_vec1::<f64>().unwrap(),
        pred_w: rows(&param("predictor.weight")),
        pred_b: param("predictor.bias").to_vec1::<f64>().unwrap(),
    };
    assert!((host.loss(&proj_w, &proj_w) - scalar(&loss).unwrap()).abs() < 1e-10);

    let autograd: Vec<f64> = rows(grads.get(&param("projection.weight")).unwrap()).concat();
    let eps = 1e-6;
    let mut sg_oracle = Vec::new();
    let mut no_sg = Vec::new();
    for i in 0..proj_w.len() {
        for j in 0..proj_w[0].len() {
            let mut plus = proj_w.clone();
            let mut minus = proj_w.clone();
            plus[i][j] += eps;
            minus[i][j] -= eps;
            // target branch frozen at the current weights
            sg_oracle.push((host.loss(&plus, &proj_w) - host.loss(&minus, &proj_w)) / (2.0 * eps));
            no_sg.push((host.loss(&plus, &plus) - host.loss(&minus, &minus)) / (2.0 * eps));
        }
    }
    let err = rel_err(&autograd, &sg_oracle);
    assert!(err < 1e-4, "autograd vs frozen-target oracle: relative error {err}");
    // the oracle must be able to tell the two apart
    assert!(rel_err(&autograd, &no_sg) > 1e-2);
}

fn check_isolated_scalar() {
    let dev = candle_core::Device::Cpu;
    let u = Tensor::new(&[[1.0f64, 2.0, -1.0], [0.5, -0.3, 2.0]], &dev).unwrap();
    let h = Tensor::new(&[[0.2f64, 1.0, 0.4], [-1.0, 0.1, 0.7]], &dev).unwrap();
    let s = Var::new(1.7f64, &dev).unwrap();
    let target = h.broadcast_mul(s.as_tensor()).unwrap().detach();
    let loss = negative_cosine_rows(&u, &target).unwrap().mean_all().unwrap();
    let grads = loss.backward().unwrap();
    let g = grads
        .get(s.as_tensor())
        .map(|t| t.to_scalar::<f64>().unwrap())
        .unwrap_or(0.0);
    assert_eq!(g, 0.0);
}

fn check_consistency_bounds() {
    let dev = candle_core::Device::Cpu;
    let mut runner = TestRunner::new(ProptestConfig::with_cases(300));
    let strategy = (1usize..10, 1usize..8, prop::collection::vec(-10.0f64..10.0, 4 * 80));
    runner
        .run(&strategy, |(n, d, data)| {
            let block = |k: usize| Tensor::from_vec(data[k * 80..k * 80 + n * d].to_vec(), (n, d), &dev).unwrap();
            let bundle = RepresentationBundle {
                r_g: block(0),
                r_l: block(0),
                h_g: block(0),
                h_l: block(1),
                u_g: block(2),
                u_l: block(3),
            };
            match consistency_loss(&bundle) {
                Ok(l) => {
                    let v = scalar(&l).unwrap();
                    prop_assert!((-2.0 - 1e-12..=2.0 + 1e-12).contains(&v), "loss {v}");
                }
                // a zero row has no direction; rejecting it is the contract
                Err(glmc::GlmcError::DegenerateVector { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
            Ok(())
        })
        .unwrap();
    let a = Tensor::new(&[[1.0f64, 2.0], [3.0, -1.0]], &dev).unwrap();
    let neg = a.neg().unwrap();
    let extreme = |u_sign: &Tensor| RepresentationBundle {
        r_g: a.clone(),
        r_l: a.clone(),
        h_g: a.clone(),
        h_l: a.clone(),
        u_g: u_sign.clone(),
        u_l: u_sign.clone(),
    };
    assert!((scalar(&consistency_loss(&extreme(&a)).unwrap()).unwrap() + 2.0).abs() < 1e-12);
    assert!((scalar(&consistency_loss(&extreme(&neg)).unwrap()).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn criterion_2_stop_gradient() {
    check_projection_gradient();
    check_isolated_scalar();
    check_consistency_bounds();
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_reduction_equivalence() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.source = SourceKind::Synthetic;
    cfg.data.synthetic = SyntheticSpec {
        num_classes: 4,
        train_per_class: 48,
        test_per_class: 0,
        channels: 3,
        height: 8,
        width: 8,
        noise: 0.8,
        seed: 31,
    };
    cfg.data.imbalance_factor = 4.0;
    cfg.model.encoder = "resnet8".into();
    cfg.train.epochs = 1;
    cfg.train.steps_per_epoch = Some(100);
    cfg.train.batch_size = 16;
    cfg.train.precision = Precision::F64;
    cfg.train.eval_every = 0;
    cfg.train.seed = 7;
    cfg.sampler.partner = Partner::Uniform;
    cfg.mix.lambda_override = Some(1.0);
    cfg.rebalance.gamma = 0.0;
    cfg.rebalance.reweight_k = 0.0;

    let balanced = cfg.data.synthetic.generate(Split::Train).unwrap();
    let spec = ImbalanceSpec::new(4, 48, cfg.data.imbalance_factor, 0).unwrap();
    let subset = build_longtail_subset(&balanced, &spec).unwrap();
    let data = TrainData::new(subset, None, cfg.rebalance.reweight_k).unwrap();

    let glmc = train(&cfg, &data, None).unwrap();
    let ce = train_baseline_ce(&cfg, &data, None).unwrap();
    assert_eq!(glmc.steps.len(), 100);
    assert_eq!(ce.steps.len(), 100);
    let mut worst = 0.0f64;
    for (g, c) in glmc.steps.iter().zip(&ce.steps) {
        assert_eq!((g.epoch, g.step), (c.epoch, c.step));
        worst = worst.max((g.total - c.total).abs());
    }
    assert!(worst < 1e-5, "largest per-step gap {worst}");
    // the trace must actually move, or the comparison is vacuous
    let first = glmc.steps[0].total;
    assert!(glmc.steps.iter().any(|s| (s.total - first).abs() > 1e-2));
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_longtail_builder() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar10_like(dir.path(), 5000, 1, 41).unwrap();
    let source = SourceDescriptor::Cifar10 {
        root: dir.path().to_path_buf(),
    };
    let balanced = source.load(Split::Train).unwrap();
    assert_eq!(balanced.len(), 50_000);
    assert_eq!(balanced.class_table().unwrap().counts(), &[5000; 10]);

    for (factor, expect_min) in [(10.0, 500usize), (50.0, 100), (100.0, 50)] {
        let spec = ImbalanceSpec::new(10, 5000, factor, 42).unwrap();
        let subset = build_longtail_subset(&balanced, &spec).unwrap();
        let table = subset.class_table().unwrap();
        let counts = table.counts();
        assert_eq!(counts, compute_class_counts(&spec).unwrap().as_slice());
        assert_eq!(counts[0], 5000);
        let min = *counts.iter().min().unwrap();
        assert!(min.abs_diff(expect_min) <= 1, "IF {factor}: min {min}");
        // oracle for each class: 5000 · (1/IF)^(i/9), rounded
        for (i, &n) in counts.iter().enumerate() {
            let exact = 5000.0 * (1.0 / factor).powf(i as f64 / 9.0);
            assert!((n as f64 - exact).abs() <= 0.5 + 1e-9, "IF {factor}, class {i}: {n} vs {exact}");
        }
        let realised = imbalance_factor(&table);
        assert!((realised - factor).abs() <= factor / min as f64, "IF {factor}: realised {realised}");
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }
}

// ---------------------------------------------------------------- criteria 5, 6

fn cifar_root() -> PathBuf {
    std::env::var_os("GLMC_DATA_ROOT")
        .map(PathBuf::from)
        .expect("set GLMC_DATA_ROOT to the cifar-10-batches-bin directory")
}

fn desk_config(method: Method, seed: u64, epochs: usize, gamma: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run.name = format!("{method:?}-seed{seed}-gamma{gamma}").to_lowercase();
    cfg.data.source = SourceKind::Cifar10;
    cfg.data.root = Some(cifar_root());
    cfg.data.imbalance_factor = 100.0;
    cfg.model.encoder = "resnet32".into();
    cfg.train.method = method;
    cfg.train.epochs = epochs;
    cfg.train.seed = seed;
    cfg.train.eval_every = 0;
    cfg.rebalance.gamma = gamma;
    cfg
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn run_report(cfg: &ExperimentConfig) -> EvalReport {
    let out = tempfile::tempdir().unwrap();
    run_experiment(cfg, out.path()).unwrap();
    EvalReport::read_json(&out.path().join("report.json")).unwrap()
}

#[test]
#[ignore = "needs CIFAR-10 under GLMC_DATA_ROOT and hours of compute"]
fn criterion_5_desk_scale_ordering() {
    let mut glmc_runs = Vec::new();
    let mut ce_runs = Vec::new();
    for seed in 0..3 {
        glmc_runs.push(run_report(&desk_config(Method::Glmc, seed, 30, 10.0)));
        ce_runs.push(run_report(&desk_config(Method::Ce, seed, 30, 10.0)));
    }
    let top1 = |runs: &[EvalReport]| median(runs.iter().map(|r| r.top1_overall).collect());
    let few = |runs: &[EvalReport]| median(runs.iter().map(|r| r.top1_few.unwrap_or(0.0)).collect());
    let (g, c) = (top1(&glmc_runs), top1(&ce_runs));
    eprintln!("median top-1: glmc {g:.4}, ce {c:.4}");
    assert!(g - c >= 0.02, "GLMC {g} vs CE {c}");
    assert!(few(&glmc_runs) > few(&ce_runs));
}

#[test]
#[ignore = "needs CIFAR-10 under GLMC_DATA_ROOT and hours of compute"]
fn criterion_6_gamma_ablation_direction() {
    let mut by_gamma: HashMap<u32, Vec<f64>> = HashMap::new();
    for gamma in [0.0, 10.0] {
        for seed in 0..3 {
            let r = run_report(&desk_config(Method::Glmc, seed, 10, gamma));
            by_gamma.entry(gamma as u32).or_default().push(r.top1_overall);
        }
    }
    let (g0, g10) = (median(by_gamma[&0].clone()), median(by_gamma[&10].clone()));
    eprintln!("median top-1: gamma 0 {g0:.4}, gamma 10 {g10:.4}");
    assert!(g10 >= g0);
}

// ---------------------------------------------------------------- criterion 7

struct Recount {
    overall: f64,
    groups: HashMap<Group, (usize, usize)>,
}

/// Direct tally from raw predictions, without a confusion matrix.
fn recount(preds: &[usize], labels: &[usize], train_counts: &[usize]) -> Recount {
    let group_of = |c: usize| {
        if train_counts[c] > 100 {
            Group::Many
        } else if train_counts[c] > 20 {
            Group::Medium
        } else {
            Group::Few
        }
    };
    let mut groups: HashMap<Group, (usize, usize)> = HashMap::new();
    let mut hits = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        let entry = groups.entry(group_of(y)).or_default();
        entry.1 += 1;
        if p == y {
            entry.0 += 1;
            hits += 1;
        }
    }
    Recount {
        overall: hits as f64 / labels.len() as f64,
        groups,
    }
}

fn assert_matches_recount(report: &EvalReport, preds: &[usize], labels: &[usize], train_counts: &[usize]) {
    let oracle = recount(preds, labels, train_counts);
    assert!((report.top1_overall - oracle.overall).abs() < 1e-9);
    let mut weighted = 0.0;
    for g in [Group::Many, Group::Medium, Group::Few] {
        match (report.group_accuracy(g), oracle.groups.get(&g)) {
            (Some(acc), Some(&(hit, n))) => {
                assert!((acc - hit as f64 / n as f64).abs() < 1e-9, "{g:?}");
                weighted += acc * n as f64;
            }
            (None, None) => {}
            (got, want) => panic!("{g:?}: report {got:?}, recount {want:?}"),
        }
    }
    assert!((weighted / labels.len() as f64 - report.top1_overall).abs() < 1e-9);
}

#[test]
fn criterion_7_evaluation_consistency() {
    let mut runner = TestRunner::new(ProptestConfig::with_cases(300));
    let strategy = (2usize..15, 1usize..400).prop_flat_map(|(c, n)| {
        (
            prop::collection::vec(1usize..300, c),
            prop::collection::vec(0..c, n),
            prop::collection::vec(0..c, n),
        )
    });
    runner
        .run(&strategy, |(train_counts, labels, preds)| {
            let table = ClassFrequencyTable::new(train_counts.clone()).unwrap();
            let report = report_from_predictions(&preds, &labels, &glmc::assign_groups(&table)).unwrap();
            assert_matches_recount(&report, &preds, &labels, &train_counts);
            Ok(())
        })
        .unwrap();

    // a trained network, evaluated end to end and through a checkpoint round trip
    let synthetic = SyntheticSpec {
        num_classes: 6,
        train_per_class: 150,
        test_per_class: 30,
        channels: 1,
        height: 6,
        width: 6,
        noise: 0.6,
        seed: 71,
    };
    let balanced = synthetic.generate(Split::Train).unwrap();
    let spec = ImbalanceSpec::new(6, 150, 15.0, 0).unwrap();
    let train_set = build_longtail_subset(&balanced, &spec).unwrap();
    let test_set = synthetic.generate(Split::Test).unwrap();
    let data = TrainData::new(train_set, Some(test_set.clone()), 1.0).unwrap();
    let table = data.train.class_table().unwrap();
    assert!(table.counts().iter().any(|&n| n > 100) && table.counts().iter().any(|&n| n <= 20));

    let mut cfg = ExperimentConfig::default();
    cfg.data.source = SourceKind::Synthetic;
    cfg.model.encoder = "mlp16".into();
    cfg.train.epochs = 3;
    cfg.train.batch_size = 32;
    cfg.train.augment = false;
    cfg.train.eval_every = 0;
    let outcome = train(&cfg, &data, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.safetensors");
    checkpoint::save(&outcome.network, &outcome.info, &path).unwrap();
    let (restored, _) = checkpoint::load(&path).unwrap();

    for net in [&outcome.network, &restored] {
        let report = evaluate(net, &test_set, &table, HeadMode::LongTail).unwrap();
        let preds = predict(net, &test_set, HeadMode::LongTail, 64).unwrap();
        assert_eq!(report.num_samples, test_set.len());
        assert_matches_recount(&report, &preds, test_set.labels(), table.counts());
        assert_eq!(Some(&report), outcome.final_eval.as_ref());
    }
}
