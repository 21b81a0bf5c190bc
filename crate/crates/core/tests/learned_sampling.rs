//! End-to-end path for a learned score source: train the noise predictor on
//! an analytic target, plug it into the AR sampler, and check the generated
//! moments against the target.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use ardiff_core::gauss::{Gaussian, GaussianMixture};
use ardiff_core::oracle::ScoreSource;
use ardiff_core::patches::PatchLayout;
use ardiff_core::rng::SeedPath;
use ardiff_core::sampler::{ar_sample, DriftGain, RunConfig};
use ardiff_core::schedule::TimeSchedule;
use ardiff_core::scorelearn::{dsm_irreducible_1d, train, ScoreNet, TimeSampling, TrainConfig};

#[test]
fn trained_network_drives_the_sampler() {
    // x2 = x1 + noise: for this target the stage-1 marginal equals the
    // stage-2 conditional at a zero prefix, so one shared network (stage
    // identified only by its zero-padded condition) can satisfy both stages
    // exactly
    let layout = PatchLayout::new(vec![1, 1]).unwrap();
    let target = Gaussian::new(
        DVector::zeros(2),
        DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]),
    )
    .unwrap();
    let gm = GaussianMixture::single(target.clone());
    let sched = TimeSchedule::build(2.0, 0.25, 0.25, 1.0).unwrap();

    let net = ScoreNet::new(1, 1, &[32, 32], SeedPath::root(5));
    let cfg = TrainConfig {
        lr: 2e-3,
        steps: 20_000,
        batch: 128,
        seed: 11,
        time_sampling: TimeSampling::Uniform,
        task: "learned-sampling".into(),
    };
    let (trained, trace) = train(&net, &gm, &layout, &sched, &cfg).unwrap();
    let tail: f64 = trace.losses[19_800..].iter().sum::<f64>() / 200.0;
    // both stages share the irreducible constant of a unit-variance target
    let irreducible =
        dsm_irreducible_1d(&Gaussian::scalar(0.0, 1.0).unwrap(), &sched, None).unwrap();
    assert!(
        tail < irreducible + 0.05,
        "training did not settle: tail {tail} vs irreducible {irreducible}"
    );

    // one shared network serves both stages
    let source: Arc<dyn ScoreSource> = Arc::new(trained);
    let run = RunConfig {
        layout,
        schedule: sched,
        sources: vec![source.clone(), source],
        n_samples: 4000,
        seed: SeedPath::root(77),
        gain: DriftGain::Double,
    };
    let samples = ar_sample(&run).unwrap();
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(2);
    for x in &samples {
        mean += x;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(2, 2);
    for x in &samples {
        let d = x - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;

    // a small trained net is not an exact oracle; allow a coarse tolerance
    let tcov = target.cov();
    for i in 0..2 {
        assert!(mean[i].abs() < 0.15, "mean[{i}] = {}", mean[i]);
        let rel = (cov[(i, i)] - tcov[(i, i)]).abs() / tcov[(i, i)];
        assert!(rel < 0.25, "var[{i}] = {} vs {}", cov[(i, i)], tcov[(i, i)]);
    }
    let corr = cov[(0, 1)] / (cov[(0, 0)] * cov[(1, 1)]).sqrt();
    let expect = 1.0 / 2f64.sqrt();
    assert!(
        (corr - expect).abs() < 0.15,
        "cross-patch correlation {corr} should track {expect}"
    );
}
