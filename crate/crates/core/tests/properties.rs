//! Property tests for the invariants of the volume, noise, metric and loss code.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use upl::checkpoint::checkpoint_bytes;
use upl::graph::Tape;
use upl::losses::{build_upl_net, upl_loss};
use upl::metrics::{aggregate, mean_std, metrics_csv, mse, parse_metrics_csv, psnr_from_mse, GroupKey, MetricsRecord, Region};
use upl::synth::{add_rician_noise, crop_offset, generate_phantom, NoiseSpec, PhantomKind, PhantomSpec};
use upl::volume::{load_uvol, mip_project, pgm_bytes, save_uvol, Axis};
use upl::{LossNetSpec, Shape, Tensor5, Volume};

fn volume(dims: [usize; 3], data: Vec<f32>) -> Volume {
    Volume::new(dims, [1.0; 3], data).unwrap()
}

fn dims_and_data(max: usize) -> impl Strategy<Value = ([usize; 3], Vec<f32>)> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(d, h, w)| {
        (Just([d, h, w]), prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), d * h * w))
    })
}

fn unit_volume(max: usize) -> impl Strategy<Value = Volume> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(d, h, w)| {
        prop::collection::vec(0.0f32..=1.0, d * h * w).prop_map(move |v| volume([d, h, w], v))
    })
}

fn record(seed: u64, loss: &str, region: Region, ssim: f64) -> MetricsRecord {
    MetricsRecord {
        experiment_id: "p".into(),
        seed,
        noise: 0.1,
        arch: "dncnn".into(),
        loss: loss.into(),
        region,
        ssim,
        psnr: 20.0 + ssim,
        mse: 1e-3 * ssim,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn uvol_round_trip_is_bit_identical((dims, data) in dims_and_data(6), vs in prop::array::uniform3(0.01f32..10.0)) {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(dims, vs, data).unwrap();
        let p = dir.path().join("v.uvol");
        save_uvol(&v, &p).unwrap();
        let back = load_uvol(&p).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.voxel_size().map(f32::to_bits), v.voxel_size().map(f32::to_bits));
        prop_assert!(back.data().iter().map(|x| x.to_bits()).eq(v.data().iter().map(|x| x.to_bits())));
    }

    #[test]
    fn mip_dominates_every_voxel(v in unit_volume(6), axis in prop::sample::select(vec![Axis::Axial, Axis::Coronal, Axis::Sagittal])) {
        let img = mip_project(&v, axis);
        let [d, h, w] = v.dims();
        for z in 0..d { for y in 0..h { for x in 0..w {
            let (r, c) = match axis {
                Axis::Axial => (y, x),
                Axis::Coronal => (z, x),
                Axis::Sagittal => (z, y),
            };
            prop_assert!(img.at(r, c) >= v.at(z, y, x));
        }}}
        prop_assert_eq!(img.data.iter().cloned().fold(0.0f32, f32::max), v.max());
    }

    #[test]
    fn pgm_is_deterministic_and_sized(v in unit_volume(6)) {
        let img = mip_project(&v, Axis::Axial);
        let a = pgm_bytes(&img).unwrap();
        prop_assert_eq!(&a, &pgm_bytes(&img).unwrap());
        let header = format!("P5\n{} {}\n255\n", img.cols, img.rows);
        prop_assert_eq!(a.len(), header.len() + img.rows * img.cols);
        prop_assert!(a.starts_with(header.as_bytes()));
    }

    #[test]
    fn rician_noise_is_nonnegative_and_seeded(v in unit_volume(5), level in 0.001f64..0.5, seed in any::<u64>()) {
        let spec = NoiseSpec { level, seed };
        let a = add_rician_noise(&v, &spec).unwrap();
        prop_assert!(a.data().iter().all(|&x| x >= 0.0 && x.is_finite()));
        let b = add_rician_noise(&v, &spec).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn crops_stay_inside(d in 1usize..40, h in 1usize..40, w in 1usize..40, size in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match crop_offset([d, h, w], size, &mut rng) {
            Ok(off) => {
                prop_assert!(size <= d.min(h).min(w));
                prop_assert!(off[0] + size <= d && off[1] + size <= h && off[2] + size <= w);
            }
            Err(_) => prop_assert!(size > d.min(h).min(w)),
        }
    }

    #[test]
    fn mse_is_symmetric_and_psnr_decreasing(a in unit_volume(5), shift in 0.0f32..0.5) {
        let b = volume(a.dims(), a.data().iter().map(|x| x + shift).collect());
        let m = mse(&a, &b).unwrap();
        prop_assert_eq!(m, mse(&b, &a).unwrap());
        prop_assert!(m >= 0.0);
        prop_assert!(psnr_from_mse(m * 2.0 + 1e-9, 1.0) < psnr_from_mse(m + 1e-9, 1.0));
    }

    #[test]
    fn aggregation_ignores_record_order(values in prop::collection::vec(0.0f64..1.0, 2..12), rot in 0usize..12) {
        let records: Vec<MetricsRecord> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| record(i as u64 % 3, if i % 2 == 0 { "l1" } else { "upl" }, Region::Full, v))
            .collect();
        let mut rotated = records.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        let a = aggregate(&records, &[GroupKey::Loss]).unwrap();
        let b = aggregate(&rotated, &[GroupKey::Loss]).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.key, &y.key);
            prop_assert_eq!(x.n, y.n);
            prop_assert!((x.ssim.mean - y.ssim.mean).abs() < 1e-12);
            prop_assert!((x.ssim.std - y.ssim.std).abs() < 1e-12);
        }
        let all = mean_std(&values).unwrap();
        prop_assert!(all.std >= 0.0);
    }

    #[test]
    fn metrics_csv_round_trips(values in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let records: Vec<MetricsRecord> = values.iter().enumerate().map(|(i, &v)| record(i as u64, "upl", Region::Center, v)).collect();
        let text = metrics_csv(&records).unwrap();
        prop_assert_eq!(parse_metrics_csv(&text).unwrap(), records);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn perceptual_distance_is_a_symmetric_nonnegative_premetric(seed in any::<u64>(), net_seed in 0u64..1000) {
        let net = build_upl_net::<f64>(&LossNetSpec { width: 8, ..LossNetSpec::simplenet(net_seed) }).unwrap();
        let a = Tensor5::<f64>::random_uniform(Shape::new(1, 1, 5, 5, 5), 0.0, 1.0, seed);
        let b = Tensor5::<f64>::random_uniform(a.shape(), 0.0, 1.0, seed ^ 1);
        let dist = |x: &Tensor5<f64>, y: &Tensor5<f64>| {
            let tape = Tape::new();
            let v = tape.constant(x.clone());
            let l = upl_loss(&tape, v, y, &net.net, &net.taps).unwrap();
            let out = tape.value(l).item();
            out
        };
        prop_assert_eq!(dist(&a, &a), 0.0);
        let (ab, ba) = (dist(&a, &b), dist(&b, &a));
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-14 * ab.max(1.0));
    }

    #[test]
    fn evaluating_the_loss_leaves_the_network_untouched(seed in any::<u64>()) {
        let net = build_upl_net::<f64>(&LossNetSpec { width: 4, ..LossNetSpec::simplenet(seed % 100) }).unwrap();
        let before = checkpoint_bytes(net.net.params());
        let a = Tensor5::<f64>::random_uniform(Shape::new(1, 1, 4, 4, 4), 0.0, 1.0, seed);
        let b = Tensor5::<f64>::random_uniform(a.shape(), 0.0, 1.0, seed ^ 7);
        let tape = Tape::new();
        let v = tape.variable(a);
        let l = upl_loss(&tape, v, &b, &net.net, &net.taps).unwrap();
        tape.backward(l).unwrap();
        prop_assert_eq!(before, checkpoint_bytes(net.net.params()));
    }

    #[test]
    fn phantoms_are_seeded_and_in_range(seed in any::<u64>(), kind in prop::sample::select(PhantomKind::ALL.to_vec())) {
        let spec = PhantomSpec::new(kind, [20, 20, 20], seed);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert!(a.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(a.max() > 0.0);
    }
}
