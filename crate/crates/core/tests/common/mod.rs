#![allow(dead_code)]

use reduce_core::dataio::{synth_clusters, ClusterParams, Dataset};
use reduce_core::numnet::{init_params, train, NetworkParams, NetworkSpec, TrainConfig};

pub struct Fixture {
    pub spec: NetworkSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub pretrained: NetworkParams,
    pub cfg: TrainConfig,
}

/// 3-class, 8-feature problem with a [8, 12, 3] network, pre-trained to
/// convergence.
pub fn fixture() -> Fixture {
    let (train_set, test_set) = synth_clusters(
        &ClusterParams {
            num_classes: 3,
            features: 8,
            samples_per_class: 60,
            cluster_spread: 0.7,
        },
        17,
    )
    .unwrap();
    let spec = NetworkSpec::new(vec![8, 12, 3]).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        momentum: 0.9,
        batch_size: 16,
        seed: 5,
    };
    let (pretrained, _) = train(&init_params(&spec, 3), &train_set, &test_set, 40, &cfg).unwrap();
    Fixture {
        spec,
        train: train_set,
        test: test_set,
        pretrained,
        cfg,
    }
}
