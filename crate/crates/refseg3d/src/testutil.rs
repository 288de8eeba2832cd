//! Shared fixtures for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense::Mat;
use crate::geometry::Scene;

pub fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Mat::new(rows, cols, data)
}

/// 16 superpoints on a 4x4 grid, 4 jittered points each, one gt instance
/// covering superpoints 0 and 1, plus 3 random text tokens (width 5).
pub fn micro_scene(seed: u64) -> (Scene, Mat) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_s = 16;
    let per = 4;
    let n_p = n_s * per;
    let mut points = Mat::zeros(n_p, 3);
    let mut superpoint_id = Vec::with_capacity(n_p);
    for s in 0..n_s {
        let cx = (s % 4) as f64;
        let cy = (s / 4) as f64;
        for j in 0..per {
            let p = s * per + j;
            points.set(p, 0, cx + rng.gen_range(-0.1..0.1));
            points.set(p, 1, cy + rng.gen_range(-0.1..0.1));
            points.set(p, 2, rng.gen_range(-0.1..0.1));
            superpoint_id.push(s);
        }
    }
    let point_features = rand_mat(&mut rng, n_p, 4, 1.0);
    let target: Vec<bool> = (0..n_p).map(|p| superpoint_id[p] < 2).collect();
    let scene = Scene {
        points,
        point_features,
        superpoint_id,
        gt_instances: vec![target],
        expression_id: "micro".into(),
    };
    let text_raw = rand_mat(&mut rng, 3, 5, 1.0);
    (scene, text_raw)
}
