use aflow::dataset::{encode_transform, render_view, Batch, SpriteInstance};
use aflow::gradcheck::{gradient_suite, probe_partials, ProbeReport};
use aflow::network::{build_network, Network, NetworkConfig, OutputMode};
use aflow::trainer::{batch_loss_and_grads, LossRegion, TrainMode};
use aflow::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_component_matches_finite_differences() {
    for (name, r) in gradient_suite(1000, 11, 1e-4) {
        assert!(r.probes >= 1000, "{name}: only {} probes", r.probes);
        assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
    }
}

fn image_batch(size: usize, views: usize, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sources = vec![Vec::new(); views];
    let mut transforms = vec![Vec::new(); views];
    let (mut targets, mut masks) = (Vec::new(), Vec::new());
    for i in 0..n {
        let (rgb, mask) = if size >= 32 {
            SpriteInstance::generate(seed, i).render_canonical(size)
        } else {
            (
                Tensor::from_fn(&[3, size, size], |_| rng.random_range(0.0..1.0)),
                Tensor::from_fn(&[1, size, size], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }),
            )
        };
        let target_az = 20.0 * rng.random_range(0..18) as f64;
        for v in 0..views {
            let delta = 20 * rng.random_range(-9..=9);
            let (view, _) = render_view(&rgb, &mask, target_az - delta as f64).unwrap();
            sources[v].push(view);
            transforms[v].push(encode_transform(delta).unwrap());
        }
        let (t, m) = render_view(&rgb, &mask, target_az).unwrap();
        targets.push(t);
        masks.push(m);
    }
    let stack = |ts: &[Tensor], c: usize| {
        Tensor::stack_batch(&ts.iter().collect::<Vec<_>>())
            .unwrap()
            .reshape(&[n, c, size, size])
            .unwrap()
    };
    Batch {
        sources: sources.iter().map(|s| stack(s, 3)).collect(),
        transforms,
        target: stack(&targets, 3),
        target_mask: stack(&masks, 1),
    }
}

fn check_network(
    network: &Network,
    mode: TrainMode,
    region: LossRegion,
    batch: &Batch,
    probes: usize,
    seed: u64,
) -> ProbeReport {
    let (_, grads) = batch_loss_and_grads(network, mode, region, batch).unwrap();
    let n = network.params.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    probe_partials(
        probes,
        1e-8,
        1e-3,
        || rng.random_range(0..n),
        |i| grads.scalar(i).unwrap(),
        |i, d| {
            let mut net = network.clone();
            *net.params.scalar_mut(i).unwrap() += d;
            batch_loss_and_grads(&net, mode, region, batch).unwrap().0
        },
    )
}

#[test]
fn reduced_flow_network_weights() {
    let net = build_network(&NetworkConfig::reduced(OutputMode::Flow), 5).unwrap();
    let batch = image_batch(8, 1, 3, 2);
    for region in [LossRegion::Full, LossRegion::Foreground] {
        let r = check_network(&net, TrainMode::SingleFlow, region, &batch, 200, 7);
        assert!(r.probes == 200 && r.max_rel_error < 1e-3, "{region:?}: {r:?}");
    }
}

#[test]
fn tiny_network_every_mode() {
    for (k, mode) in TrainMode::ALL.into_iter().enumerate() {
        let net = build_network(&NetworkConfig::tiny(mode.output_mode()), 20 + k as u64).unwrap();
        let batch = image_batch(32, mode.views(), 2, 30 + k as u64);
        let r = check_network(&net, mode, LossRegion::Full, &batch, 50, 40 + k as u64);
        assert!(r.probes == 50 && r.max_rel_error < 1e-3, "{}: {r:?}", mode.name());
    }
}
