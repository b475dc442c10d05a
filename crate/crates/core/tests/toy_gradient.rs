use ace_core::dataio::{parse_cifar10, synthetic_batch, Dataset};
use ace_core::gradcore::{store_grad_check, Tensor};
use ace_core::laplace::standard_noise;
use ace_core::loss::{minibatch_forward, prior_targets, Minibatch};
use ace_core::model::{Bands, BnMode, Level, Model, ModelSpec};
use ace_core::pyramid::ImageShape;
use ace_core::rng::{stream, CounterRng};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_batch(spec: &ModelSpec) -> Minibatch {
    let (images, labels) = parse_cifar10(&synthetic_batch(5, 4)).unwrap();
    let data = Dataset::new(ImageShape::CIFAR, images, labels)
        .unwrap()
        .downscale(4)
        .unwrap();
    let bands = Bands::of(&data).unwrap();
    let rng = CounterRng::new(9);
    let noise = |level: Level| {
        let v = (0..8)
            .map(|k| {
                standard_noise(rng.latent_uniform(
                    stream::TRAIN_NOISE,
                    0,
                    k / 2,
                    level.number(),
                    k % 2,
                ))
                .unwrap()
            })
            .collect();
        Tensor::new(vec![4, 2], v).unwrap()
    };
    let s = spec.image;
    Minibatch {
        first_index: 0,
        labels: data.labels.clone(),
        residual: bands.batch(Level::Residual, 0..4),
        coarse: bands.batch(Level::Coarse, 0..4),
        images: Tensor::new(vec![4, s.channels, s.side, s.side], data.images.clone()).unwrap(),
        targets: vec![prior_targets(); 4],
        noise: [noise(Level::Residual), noise(Level::Coarse)],
        hardcoded: Some(1),
    }
}

#[test]
fn weighted_loss_gradient_on_a_toy_batch() {
    let spec = ModelSpec {
        image: ImageShape {
            channels: 3,
            side: 8,
        },
        classifier_widths: [16, 16, 32],
        ..ModelSpec::default()
    };
    let mut model = Model::init(spec, 21);
    // Move the heads off zero so no posterior sits exactly on the prior.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, t) in model.params.trainable.iter_mut() {
        if name.contains(".mu.") || name.contains(".logsigma.") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let batch = toy_batch(&spec);
    let (report, coords) = store_grad_check(
        &model.params,
        |g, b| Ok(minibatch_forward(&model, g, b, &batch, &mut BnMode::train())?.total),
        1e-4,
        1e-8,
    )
    .unwrap();
    let w = report.worst_index;
    assert!(
        report.passed,
        "max relative error {:e} at {:?}",
        report.max_rel_error, coords[w]
    );
    assert!(report.kinks.is_empty());
    // Every classifier, encoder, head and routed decoder parameter is probed.
    assert!(coords.iter().any(|(n, _)| n == "clf.layer1.W"));
    assert!(coords.iter().any(|(n, _)| n.starts_with("level2.decoder.")));
}
