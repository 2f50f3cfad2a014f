use hsgd_core::problem::{generate_synthetic, Schedule};
use hsgd_core::sgd::doob_diagnostic;
use nalgebra::DVector;
use rand::SeedableRng;

fn main() {
    let inst = generate_synthetic(50, 75, (0.01f64 / 50.0).sqrt(), 0.1, 20240501);
    let sched = Schedule::constant(0.05 * 50.0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let x: DVector<f64> = DVector::from_fn(50, |_, _| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal));
    for samples in [200_000usize, 2_000_000, 8_000_000] {
        for seed in [17u64, 18, 19] {
            let rep = doob_diagnostic(&inst, &sched, &x, 1.0, 0, samples, seed);
            println!("n={samples} seed={seed}: mc={:.8} pred={:.8} z={:.2}", rep.mc_mean, rep.predicted, rep.z_score);
        }
    }
}
