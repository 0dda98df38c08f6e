use flowkin::PointCloud;
use flowkin_cli::config::RunConfig;
use flowkin_cli::dataset_io::{decode_cloud, encode_cloud};
use flowkin_cli::ply::{parse_ply, quantize, to_ply};
use proptest::prelude::*;

fn cloud(colored: bool) -> impl Strategy<Value = PointCloud> {
    let dim = if colored { 6 } else { 3 };
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), 1..50).prop_map(move |pts| {
        let pts: Vec<Vec<f64>> = pts
            .into_iter()
            .map(|mut p| {
                for c in p.iter_mut().skip(3) {
                    *c = (*c + 10.0) / 20.0;
                }
                p
            })
            .collect();
        PointCloud::from_points(dim, &pts).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ply_keeps_f32_positions_and_8bit_colors(colored in any::<bool>(), xyz in cloud(false), rgb in cloud(true)) {
        let x = if colored { rgb } else { xyz };
        let back = parse_ply(&to_ply(&x)).unwrap();
        prop_assert_eq!(back.len(), x.len());
        prop_assert_eq!(back.dim(), x.dim());
        for (p, q) in x.points().zip(back.points()) {
            for k in 0..3 {
                prop_assert_eq!(q[k], p[k] as f32 as f64);
            }
            for k in 3..p.len() {
                prop_assert_eq!(quantize(q[k]), quantize(p[k]));
            }
        }
        // A second pass is lossless.
        prop_assert_eq!(to_ply(&back), to_ply(&x));
    }

    #[test]
    fn records_round_trip_at_f32(x in cloud(true)) {
        let back = decode_cloud(&encode_cloud(&x)).unwrap();
        prop_assert_eq!(back.dim(), x.dim());
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert_eq!(*b, *a as f32 as f64);
        }
        prop_assert!(decode_cloud(&encode_cloud(&x)[..8 + 4 * x.data().len() - 1]).is_err());
    }

    #[test]
    fn config_survives_toml_and_overrides(
        seed in any::<u32>(),
        steps in 1u64..100_000,
        lr in 1e-5f64..1e-1,
        latent in 1usize..256,
        hidden in prop::collection::vec(1usize..512, 1..4),
    ) {
        let overrides = vec![
            format!("seed={seed}"),
            format!("train.steps={steps}"),
            format!("train.lr={lr:e}"),
            format!("model.latent_dim={latent}"),
            format!("model.point_hidden={hidden:?}"),
        ];
        let cfg = RunConfig::with_overrides("", &overrides).unwrap();
        prop_assert_eq!(cfg.seed, seed as u64);
        prop_assert_eq!(cfg.train.steps, steps);
        prop_assert_eq!(cfg.train.lr, lr);
        prop_assert_eq!(cfg.model.latent_dim, latent);
        prop_assert_eq!(&cfg.model.point_hidden, &hidden);
        prop_assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(RunConfig::with_overrides("", &["train.stepz=3".into()]).is_err());
    assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
}
