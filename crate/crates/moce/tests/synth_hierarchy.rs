//! Generated clouds must get more tree-like (lower delta_rel) as tree depth
//! grows: Spearman correlation between depth and mean delta_rel over depths
//! {2, 4, 6, 8} is negative, averaged across 10 seeds.

use moce::hyperbolicity::{delta_rel_sampled, MetricCloud};
use moce::stats::spearman;
use moce::synth::{generate, ModalitySpec, SyntheticSpec};

#[test]
fn delta_rel_decreases_with_tree_depth() {
    let depths = [2usize, 4, 6, 8];
    let mut mean_by_depth = vec![0.0f64; depths.len()];
    let n_seeds = 10;

    for seed in 0..n_seeds {
        // Narrower branching for deeper trees keeps leaf counts comparable,
        // so depth is the only hierarchy dial.
        let branchings = [12usize, 4, 2, 2];
        let spec = SyntheticSpec {
            modalities: depths
                .iter()
                .zip(branchings)
                .map(|(&d, b)| ModalitySpec {
                    name: format!("depth{d}"),
                    depth: d,
                    branching: b,
                    dim: 8,
                    noise_scale: 1.0,
                })
                .collect(),
            classes: 2,
            subjects: 5,
            samples_per_subject: 60,
            noise: 0.03,
            subject_shift: 0.0,
            seed: 1000 + seed,
        };
        let ds = generate(&spec).unwrap();
        for (i, &d) in depths.iter().enumerate() {
            let cloud = MetricCloud::euclidean(ds.features[&format!("depth{d}")].clone()).unwrap();
            let report = delta_rel_sampled(&cloud, 48, 4, 7 + seed).unwrap();
            mean_by_depth[i] += report.delta_rel / n_seeds as f64;
        }
    }

    let depth_vals: Vec<f64> = depths.iter().map(|&d| d as f64).collect();
    let rho = spearman(&depth_vals, &mean_by_depth);
    println!("mean delta_rel by depth {depths:?}: {mean_by_depth:?}, spearman {rho:.3}");
    assert!(rho < 0.0, "delta_rel must decrease with depth: {mean_by_depth:?}");
}
