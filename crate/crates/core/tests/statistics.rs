//! Monte-Carlo checks of the noise model, the propagated covariances, the
//! noise correction and the outlier prefilter.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use vokit::geometry::{NormalizedPoint2, RigidTransform, Rotation};
use vokit::noise::NoiseModel;
use vokit::pipeline::{make_keyframe, PipelineConfig};
use vokit::pnp::{l1_prefilter, noise_correction, PnPProblem};
use vokit::scene::{stream_rng, Scene, SceneConfig, TrajectoryKind};
use vokit::triangulation::{triangulate, triangulate_with_cov, StereoRig, TriangulatedPoint};

#[test]
fn observation_noise_matches_configured_sigma() {
    let config = SceneConfig {
        n_frames: 200,
        outlier_ratio: 0.0,
        noise_sigma_px: 1.0,
        seed: 11,
        ..SceneConfig::default()
    };
    let scene = Scene::generate(&config).unwrap();
    let rig = &config.rig;
    let mut sq = 0.0;
    let mut count = 0usize;
    for frame in &scene.frames {
        let to_cam = frame.pose.inverse();
        for r in &frame.records {
            let p = to_cam.apply(&scene.cloud[r.id as usize]);
            let left = rig.project_left(&p).unwrap();
            for (obs, truth) in [(Some(r.left), Some(left)), (r.right, rig.project_right(&p))] {
                if let (Some(o), Some(t)) = (obs, truth) {
                    let d = (o.0 - t.0) * rig.focal_px;
                    sq += d.norm_squared();
                    count += 2;
                }
            }
        }
    }
    assert!(count >= 100_000, "only {count} samples");
    let std = (sq / count as f64).sqrt();
    assert!(
        (0.98..=1.02).contains(&std),
        "std {std} px over {count} samples"
    );
}

#[test]
fn propagated_covariance_matches_monte_carlo() {
    let rig = StereoRig::default();
    let mut rng = stream_rng(3, 0);
    let sigma = 1.0 / rig.focal_px;
    for p in [Vector3::new(1.0, 0.5, 5.0), Vector3::new(-0.8, -0.4, 5.0)] {
        let x = rig.project_right(&p).unwrap();
        let y = rig.project_left(&p).unwrap();
        let cov = triangulate_with_cov(&x, &y, &rig, &NoiseModel::from_pixels(1.0, rig.focal_px))
            .unwrap()
            .cov;
        let samples = 50_000;
        let draws: Vec<Vector3<f64>> = (0..samples)
            .map(|_| {
                let mut e = [0.0; 4];
                for v in &mut e {
                    *v = sigma * rng.sample::<f64, _>(StandardNormal);
                }
                triangulate(
                    &NormalizedPoint2::new(x.x() + e[0], x.y() + e[1]),
                    &NormalizedPoint2::new(y.x() + e[2], y.y() + e[3]),
                    &rig,
                )
                .unwrap()
            })
            .collect();
        let mean = draws.iter().sum::<Vector3<f64>>() / samples as f64;
        let mc: Matrix3<f64> = draws
            .iter()
            .map(|d| (d - mean) * (d - mean).transpose())
            .sum::<Matrix3<f64>>()
            / (samples - 1) as f64;
        for i in 0..3 {
            for j in 0..3 {
                let scale = (cov[(i, i)] * cov[(j, j)]).sqrt();
                let dev = (mc[(i, j)] - cov[(i, j)]).abs() / scale;
                assert!(dev <= 0.15, "entry ({i},{j}) off by {:.1}%", 100.0 * dev);
            }
        }
    }
}

/// Linear-system rows with the centroid held at `centroid`.
fn gram(
    points: &[Vector3<f64>],
    obs: &[NormalizedPoint2],
    centroid: &Vector3<f64>,
) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(2 * points.len(), 11);
    for (i, (p, z)) in points.iter().zip(obs).enumerate() {
        for c in 0..2 {
            let zc = if c == 0 { z.x() } else { z.y() };
            for k in 0..3 {
                h[(2 * i + c, k)] = -zc * (p[k] - centroid[k]);
                h[(2 * i + c, 3 + 4 * c + k)] = p[k];
            }
            h[(2 * i + c, 6 + 4 * c)] = 1.0;
        }
    }
    h.transpose() * h / points.len() as f64
}

#[test]
fn noise_correction_is_the_expected_gram_shift() {
    let rig = StereoRig::default();
    let mut rng = stream_rng(4, 0);
    let pose = RigidTransform::new(
        Rotation::from_axis_angle(&Vector3::new(0.0, 1.0, 0.1), 0.05),
        Vector3::new(0.2, 0.0, 1.0),
    );
    let noise = NoiseModel::from_pixels(1.0, rig.focal_px);
    let mut truth = Vec::new();
    let mut points = Vec::new();
    let mut obs = Vec::new();
    while truth.len() < 25 {
        let p = Vector3::new(
            rng.random_range(-8.0..8.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(2.0..25.0),
        );
        let (Some(x), Some(y)) = (rig.project_right(&p), rig.project_left(&p)) else {
            continue;
        };
        let q = pose.apply(&p);
        if !(rig.contains(&x) && rig.contains(&y)) || q.z < 1.0 {
            continue;
        }
        let cov = triangulate_with_cov(&x, &y, &rig, &noise).unwrap().cov;
        truth.push(p);
        points.push(TriangulatedPoint { p, cov });
        obs.push(NormalizedPoint2::new(q.x / q.z, q.y / q.z));
    }
    let g = noise_correction(&PnPProblem::new(points.clone(), obs.clone()).unwrap());
    let centroid = truth.iter().sum::<Vector3<f64>>() / truth.len() as f64;
    let clean = gram(&truth, &obs, &centroid);
    let roots: Vec<Matrix3<f64>> = points
        .iter()
        .map(|p| p.cov.cholesky().unwrap().l())
        .collect();
    let draws = 10_000;
    let mut sum = DMatrix::zeros(11, 11);
    let mut sum_sq = DMatrix::zeros(11, 11);
    for _ in 0..draws {
        let noisy: Vec<Vector3<f64>> = truth
            .iter()
            .zip(&roots)
            .map(|(p, l)| p + l * Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let d = gram(&noisy, &obs, &centroid) - &clean;
        sum_sq += d.component_mul(&d);
        sum += d;
    }
    let k = draws as f64;
    let mut violations = 0;
    for i in 0..11 {
        for j in 0..11 {
            let mean = sum[(i, j)] / k;
            let se = ((sum_sq[(i, j)] / k - mean * mean).max(0.0) / (k - 1.0)).sqrt();
            let dev = (mean - g[(i, j)]).abs();
            if dev > 3.0 * se + 1e-15 * g.amax() {
                violations += 1;
            }
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn prefilter_removes_planted_outliers() {
    let config = SceneConfig {
        n_frames: 40,
        trajectory: TrajectoryKind::Line,
        outlier_ratio: 0.02,
        seed: 21,
        ..SceneConfig::default()
    };
    let scene = Scene::generate(&config).unwrap();
    let pipeline = PipelineConfig::default();
    let (mut planted, mut removed) = (0, 0);
    for pair in scene.frames.windows(2) {
        let kf = make_keyframe(&pair[0], pair[0].pose, &config.rig, &pipeline, None).unwrap();
        let (mut points, mut obs, mut flags) = (Vec::new(), Vec::new(), Vec::new());
        for (id, p) in &kf.points {
            if let Some(r) = pair[1].get(*id) {
                points.push(*p);
                obs.push(r.left);
                flags.push(r.is_outlier);
            }
        }
        let problem = PnPProblem::new(points, obs).unwrap();
        let pre = l1_prefilter(
            &problem,
            &RigidTransform::identity(),
            pipeline.trim_fraction,
        )
        .unwrap();
        for (i, &outlier) in flags.iter().enumerate() {
            if outlier {
                planted += 1;
                if !pre.kept.contains(&i) {
                    removed += 1;
                }
            }
        }
    }
    assert!(planted >= 80, "{planted} planted outliers");
    let recall = removed as f64 / planted as f64;
    assert!(recall >= 0.95, "recall {recall} ({removed}/{planted})");
}
