use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use tpmbm::assoc::Theta;
use tpmbm::gibbs::block_conditional;
use tpmbm::recursion::{Problem, Thresholds, WeightCache};
use tpmbm::sim::{benchmark_scenario, generate_measurements, generate_truth};

#[test]
fn probe_block_scores() {
    let scenario = benchmark_scenario();
    let mut rng = ChaCha12Rng::seed_from_u64(scenario.seed);
    let truth = generate_truth(&scenario, &mut rng).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(scenario.seed);
    rng.set_stream(1);
    let labelled = generate_measurements(&truth, &scenario, &mut rng).unwrap();
    let origins = labelled.track_origins(&truth);
    let params = scenario.params(Thresholds::default()).unwrap();
    let problem = Problem::new(params, labelled.batch().unwrap()).unwrap();

    // First detections of object 0.
    let keys: Vec<_> = origins[0].iter().flatten().copied().take(3).collect();
    println!("object 0 first detections: {keys:?}");
    let theta = Theta::all_singletons(&problem.batch);
    let slot = theta.slot_of(keys[0]);
    let (k2, j2) = keys[1];
    let mut cache = WeightCache::default();
    let cond = block_conditional(&problem, &theta, k2 as usize, slot as usize, &mut cache)
        .expect("conditional exists");
    println!("block (scan {k2}, slot {slot}) candidates:");
    for (v, s) in cond.values.iter().zip(&cond.log_scores) {
        let mark = if *v == j2 + 1 { "  <-- true next detection" } else { "" };
        println!("  value {v}: log score {s:.4}{mark}");
    }
    println!("true measurement index at scan {k2}: {j2}");
}
