//! Fixtures shared by the benchmarks.

use candle_core::{DType, Tensor};
use glmc::datasets::{Split, SyntheticSpec};
use glmc::losses::{compose_total, consistency_loss, mixed_cross_entropy, rebalanced_cross_entropy};
use glmc::model::ParamGroup;
use glmc::optim::SgdMomentum;
use glmc::sampler::Batch;
use glmc::{
    build_longtail_subset, class_weights, ImbalanceSpec, LabeledDataset, MixedBatch, Mixer, MixingConfig, Network,
};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A long-tailed subset of a synthetic balanced set with class weights assigned.
pub fn longtail_dataset(num_classes: usize, per_class: usize, side: usize, imbalance_factor: f64) -> LabeledDataset {
    let balanced = balanced_dataset(num_classes, per_class, side);
    let spec = ImbalanceSpec::new(num_classes, per_class, imbalance_factor, 0).expect("valid spec");
    let mut subset = build_longtail_subset(&balanced, &spec).expect("enough samples per class");
    let weights = class_weights(&subset.class_table().expect("non-empty"), 1.0).expect("valid k");
    subset.assign_class_weights(weights.as_slice()).expect("one weight per class");
    subset
}

pub fn balanced_dataset(num_classes: usize, per_class: usize, side: usize) -> LabeledDataset {
    SyntheticSpec {
        num_classes,
        train_per_class: per_class,
        test_per_class: 0,
        channels: 3,
        height: side,
        width: side,
        noise: 0.5,
        seed: 1,
    }
    .generate(Split::Train)
    .expect("valid synthetic spec")
}

/// Two random batches (uniform-like and partner) of CIFAR-shaped images.
pub fn batch_pair(batch_size: usize, num_classes: usize, side: usize, seed: u64) -> (Batch, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut one = || Batch {
        images: Array4::from_shape_fn((batch_size, 3, side, side), |_| rng.random_range(-1.0f32..1.0)),
        labels: (0..batch_size).map(|_| rng.random_range(0..num_classes)).collect(),
        weights: (0..batch_size).map(|_| rng.random_range(0.2f32..4.0)).collect(),
    };
    (one(), one())
}

pub fn mixer(seed: u64) -> Mixer {
    Mixer::new(MixingConfig {
        seed,
        ..MixingConfig::default()
    })
    .expect("default mixing config is valid")
}

/// One network, its optimizer and a fixed mixed batch: the unit of a training step.
pub struct StepFixture {
    pub network: Network,
    pub optimizer: SgdMomentum,
    pub batch: MixedBatch,
    pub alpha: f64,
    pub gamma: f64,
}

impl StepFixture {
    pub fn new(encoder: &str, batch_size: usize, num_classes: usize, side: usize) -> Self {
        let network = Network::build(
            encoder,
            glmc::ImageShape::new(3, side, side),
            num_classes,
            None,
            DType::F32,
            0,
        )
        .expect("known encoder");
        let optimizer = SgdMomentum::new(network.store().trainable(&ParamGroup::ALL), 0.9, 5e-3);
        let (u, r) = batch_pair(batch_size, num_classes, side, 3);
        let batch = mixer(4).make_mixed_batch(&u, &r, num_classes).expect("matching batches");
        StepFixture {
            network,
            optimizer,
            batch,
            alpha: 0.5,
            gamma: 10.0,
        }
    }

    /// Forward both views, compose the loss, backpropagate and update.
    pub fn step(&mut self, lr: f64) -> f64 {
        let net = &self.network;
        let xg = net.images_to_tensor(&self.batch.x_global).unwrap();
        let xl = net.images_to_tensor(&self.batch.x_local).unwrap();
        let out = net.forward_views(&xg, &xl, true).unwrap();
        let p = tensor2(&self.batch.p_mixed);
        let w = tensor1(&self.batch.w_mixed);
        let l_c = mixed_cross_entropy(&out.logits_c_g, &out.logits_c_l, &p).unwrap();
        let l_cb = rebalanced_cross_entropy(&out.logits_cb_g, &out.logits_cb_l, &p, &w).unwrap();
        let l_sim = consistency_loss(&out.bundle).unwrap();
        let total = compose_total(&l_c, &l_cb, &l_sim, self.alpha, self.gamma).unwrap();
        let grads = total.backward().unwrap();
        self.optimizer.step(&grads, lr).unwrap();
        total.to_scalar::<f32>().unwrap() as f64
    }
}

fn tensor2(a: &Array2<f32>) -> Tensor {
    Tensor::from_vec(a.iter().copied().collect(), a.dim(), &candle_core::Device::Cpu).unwrap()
}

fn tensor1(a: &Array1<f32>) -> Tensor {
    Tensor::from_vec(a.to_vec(), a.len(), &candle_core::Device::Cpu).unwrap()
}
