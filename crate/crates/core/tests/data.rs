mod common;

use proptest::prelude::*;
use rand::Rng;
use softpose::data::{
    augment, blob_layer, crop_normalize, joint_color, load_annotations, normalize_annotation, sample_augmentation,
    synth_generate, synth_range, write_annotations, AffineTransform, Annotation, AugmentParams, CropConfig, Dataset,
    Image, SyntheticSpec,
};
use softpose::{Error, Float, Pose};

fn random_annotation(rng: &mut rand_chacha::ChaCha8Rng, i: usize) -> Annotation {
    let n = rng.gen_range(1..10);
    Annotation {
        image: format!("img_{i}.png"),
        joints: (0..n).map(|_| [rng.gen_range(0.0..500.0), rng.gen_range(0.0..400.0)]).collect(),
        visibility: (0..n).map(|_| rng.gen_bool(0.7)).collect(),
        center: [rng.gen_range(50.0..450.0), rng.gen_range(50.0..350.0)],
        scale: rng.gen_range(0.2..3.0),
    }
}

#[test]
fn annotation_round_trip() {
    let mut rng = common::rng(1);
    let anns: Vec<Annotation> = (0..25).map(|i| random_annotation(&mut rng, i)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    write_annotations(&path, &anns).unwrap();
    assert_eq!(load_annotations(&path).unwrap(), anns);
}

#[test]
fn malformed_line_is_reported_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    let good = random_annotation(&mut common::rng(2), 0).to_json_line();
    std::fs::write(&path, format!("{good}\n{{\"image\": 3}}\n")).unwrap();
    match load_annotations(&path).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 2),
        e => panic!("unexpected {e}"),
    }
}

/// Pixel position of a normalized crop coordinate, computed independently.
fn denormalize(p: [Float; 2], ann: &Annotation) -> [Float; 2] {
    let side = ann.scale * 200.0;
    [ann.center[0] - side / 2.0 + p[0] * side, ann.center[1] - side / 2.0 + p[1] * side]
}

#[test]
fn crop_inverse_recovers_pixels() {
    let mut rng = common::rng(3);
    let img = Image::new(500, 400);
    for i in 0..200 {
        let ann = random_annotation(&mut rng, i);
        let (t, pose) = crop_normalize(&img, &ann, 32, &CropConfig::default()).unwrap();
        assert_eq!(t.shape(), &[3, 32, 32]);
        for (p, orig) in pose.joints.iter().zip(&ann.joints) {
            let back = denormalize(*p, &ann);
            assert!((back[0] - orig[0]).abs() <= 0.51 && (back[1] - orig[1]).abs() <= 0.51);
        }
        // Visibility also requires the joint to fall inside the crop.
        for ((p, &v), &orig_v) in pose.joints.iter().zip(&pose.visibility).zip(&ann.visibility) {
            let inside = (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
            assert_eq!(v, orig_v && inside);
        }
    }
}

#[test]
fn crop_resamples_the_right_region() {
    // A 16-pixel crop at 16×16 output copies pixels one to one, so the
    // bright pixel reappears where its joint says it is.
    let mut img = Image::new(100, 100);
    img.set_pixel(60, 30, [1.0, 1.0, 1.0]);
    let ann = Annotation {
        image: String::new(),
        joints: vec![[60.5, 30.5]],
        visibility: vec![true],
        center: [60.0, 30.0],
        scale: 0.08,
    };
    let (t, pose) = crop_normalize(&img, &ann, 16, &CropConfig::default()).unwrap();
    assert_eq!(pose.joints[0], [8.5 / 16.0, 8.5 / 16.0]);
    let crop = Image::from_tensor(&t).unwrap();
    let (mut best, mut at) = (0.0, (0, 0));
    for y in 0..16 {
        for x in 0..16 {
            if crop.get(0, y, x) > best {
                best = crop.get(0, y, x);
                at = (x, y);
            }
        }
    }
    assert!((best - 1.0).abs() < 1e-12);
    assert_eq!(at, (8, 8));
}

#[test]
fn rotation_sign_convention() {
    let tf = AffineTransform::rotation_scale(90.0, 1.0, [0.5, 0.5]);
    let p = tf.apply([0.75, 0.5]);
    assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
    let id = AffineTransform::rotation_scale(0.0, 1.0, [0.5, 0.5]);
    let q = id.apply([0.3, 0.8]);
    assert!((q[0] - 0.3).abs() < 1e-12 && (q[1] - 0.8).abs() < 1e-12);
}

proptest! {
    #[test]
    fn augmentation_inverts(seed in any::<u64>(), x in 0.0..1.0 as Float, y in 0.0..1.0 as Float) {
        let tf = sample_augmentation(&AugmentParams { seed, ..Default::default() }).unwrap();
        let back = tf.inverse().unwrap().apply(tf.apply([x, y]));
        prop_assert!((back[0] - x).abs() < 1e-9 && (back[1] - y).abs() < 1e-9);
    }

    #[test]
    fn augmentation_preserves_distances_up_to_scale(seed in any::<u64>()) {
        let params = AugmentParams { seed, ..Default::default() };
        let tf = sample_augmentation(&params).unwrap();
        let (a, b) = (tf.apply([0.2, 0.3]), tf.apply([0.6, 0.9]));
        let ratio = (a[0] - b[0]).hypot(a[1] - b[1]) / (0.4 as Float).hypot(0.6);
        prop_assert!(ratio >= params.scale_range.0 - 1e-12 && ratio <= params.scale_range.1 + 1e-12);
    }
}

#[test]
fn augmentation_is_deterministic_and_moves_content_with_joints() {
    let spec = SyntheticSpec::default();
    let sample = synth_generate(&spec, 1).unwrap().remove(0);
    let params = AugmentParams {
        seed: 9,
        ..Default::default()
    };
    let (img_a, pose_a) = augment(&sample.image, &sample.pose, &params).unwrap();
    let (img_b, pose_b) = augment(&sample.image, &sample.pose, &params).unwrap();
    assert_eq!((&img_a, &pose_a), (&img_b, &pose_b));

    // Each visible warped joint still sits on its own blob color.
    let n = sample.image.width();
    for (j, (p, &v)) in pose_a.joints.iter().zip(&pose_a.visibility).enumerate() {
        if !v {
            continue;
        }
        let (u, w) = ((p[0] * n as Float) as usize, (p[1] * n as Float) as usize);
        let px = img_a.pixel(u.min(n - 1), w.min(n - 1));
        let own = joint_color(j, pose_a.num_joints());
        let dist = |c: [Float; 3]| (0..3).map(|k| (px[k] - c[k]).powi(2)).sum::<Float>();
        let nearest = (0..pose_a.num_joints())
            .min_by(|&a, &b| dist(joint_color(a, 8)).total_cmp(&dist(joint_color(b, 8))))
            .unwrap();
        let crowded = pose_a
            .joints
            .iter()
            .enumerate()
            .any(|(k, q)| k != j && (q[0] - p[0]).hypot(q[1] - p[1]) * (n as Float) < 3.0 * spec.blob_sigma);
        if !crowded {
            assert_eq!(nearest, j, "joint {j} pixel {px:?} vs color {own:?}");
        }
    }
}

#[test]
fn synthetic_blobs_peak_at_their_joints() {
    let spec = SyntheticSpec::default();
    let n = spec.canvas;
    for sample in synth_generate(&spec, 20).unwrap() {
        for (p, &v) in sample.pose.joints.iter().zip(&sample.pose.visibility) {
            assert!(v);
            let center = [p[0] * n as Float, p[1] * n as Float];
            let layer = blob_layer(&spec, center);
            let k = (0..layer.len()).max_by(|&a, &b| layer[a].total_cmp(&layer[b])).unwrap();
            let (x, y) = ((k % n) as Float + 0.5, (k / n) as Float + 0.5);
            assert!((x - center[0]).abs() <= 1.0 && (y - center[1]).abs() <= 1.0);
        }
    }
}

#[test]
fn synthetic_images_carry_joint_colors() {
    let spec = SyntheticSpec::default();
    let n = spec.canvas;
    let mut checked = 0;
    for sample in synth_generate(&spec, 20).unwrap() {
        let nj = sample.pose.num_joints();
        for (j, p) in sample.pose.joints.iter().enumerate() {
            let crowded = sample
                .pose
                .joints
                .iter()
                .enumerate()
                .any(|(k, q)| k != j && (q[0] - p[0]).hypot(q[1] - p[1]) * (n as Float) < 3.0 * spec.blob_sigma);
            if crowded {
                continue;
            }
            // The pixel closest to the joint's color marks its blob center.
            let own = joint_color(j, nj);
            let score = |x: usize, y: usize| {
                let px = sample.image.pixel(x, y);
                -(0..3).map(|c| (px[c] - own[c]).powi(2)).sum::<Float>()
            };
            let (mut best, mut at) = (Float::NEG_INFINITY, (0, 0));
            for y in 0..n {
                for x in 0..n {
                    if score(x, y) > best {
                        best = score(x, y);
                        at = (x, y);
                    }
                }
            }
            let (x, y) = (at.0 as Float + 0.5, at.1 as Float + 0.5);
            assert!(
                (x - p[0] * n as Float).abs() <= 1.0 && (y - p[1] * n as Float).abs() <= 1.0,
                "joint {j}: peak {at:?} vs {:?}",
                [p[0] * n as Float, p[1] * n as Float]
            );
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn synthetic_generation_is_deterministic_and_indexable() {
    let spec = SyntheticSpec::default();
    assert!(synth_generate(&spec, 0).unwrap().is_empty());
    let a = synth_generate(&spec, 6).unwrap();
    assert_eq!(a, synth_generate(&spec, 6).unwrap());
    assert_eq!(&a[3..], synth_range(&spec, 3, 3).unwrap().as_slice());
    let other = synth_generate(&SyntheticSpec { seed: 1, ..spec }, 1).unwrap();
    assert_ne!(other[0], a[0]);
}

#[test]
fn annotations_of_synthetic_samples_reproduce_their_poses() {
    let spec = SyntheticSpec::default();
    let crop = CropConfig::default();
    for sample in synth_generate(&spec, 5).unwrap() {
        let ann = sample.annotation("x.png", &crop);
        let pose: Pose = normalize_annotation(&ann, &crop).unwrap();
        assert!(common::max_abs_diff(
            &pose.joints.concat(),
            &sample.pose.joints.concat()
        ) < 1e-12);
        let (t, _) = crop_normalize(&sample.image, &ann, spec.canvas, &crop).unwrap();
        assert!(common::max_abs_diff(t.data(), sample.image.to_tensor().data()) < 1e-12);
    }
}

#[test]
fn split_partitions_and_is_seeded() {
    let data = Dataset::from_synth(synth_generate(&SyntheticSpec::default(), 30).unwrap());
    let (a, b) = data.split(0.2, 5).unwrap();
    assert_eq!((a.len(), b.len()), (24, 6));
    let (c, d) = data.split(0.2, 5).unwrap();
    assert_eq!((a.poses, b.poses), (c.poses, d.poses));
}
