use glrcl::gmm::{fit_em, CovariancePolicy};
use glrcl::metrics::AccuracyMatrix;
use glrcl::streams::{decode_feature_file, encode_feature_file};
use glrcl::tensor::cholesky;
use glrcl::{compose_batch, DenseMatrix, EmConfig, GeneratorPool, GmmGenerator, LabeledFeatureBatch, MlpHead, Rng};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| DenseMatrix::from_vec(rows, cols, v).unwrap())
}

fn fitted(seed: u64, d: usize, diagonal: bool) -> GmmGenerator {
    let mut rng = Rng::new(seed);
    let n = 60;
    let data: Vec<f64> = (0..n * d).map(|i| rng.normal() + if i / d < n / 2 { 3.0 } else { -3.0 }).collect();
    let x = DenseMatrix::from_vec(n, d, data).unwrap();
    let cfg = EmConfig {
        covariance_kind_policy: if diagonal { CovariancePolicy::Diagonal } else { CovariancePolicy::Full },
        ..EmConfig::default()
    };
    fit_em(&x, 2, &cfg, &mut rng.split(1)).unwrap().0
}

fn from_rows(rows: &[Vec<f64>]) -> AccuracyMatrix {
    let mut m = AccuracyMatrix::new(rows.len());
    for (i, r) in rows.iter().enumerate() {
        m.record_row(i, r).unwrap();
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs_spd(a in (1usize..6).prop_flat_map(|n| matrix(n, n))) {
        let n = a.rows();
        let mut spd = a.transpose_matmul(&a).unwrap();
        for i in 0..n {
            spd[(i, i)] += 0.5;
        }
        let l = cholesky(&spd).unwrap();
        let back = l.matmul_transpose(&l).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((back[(i, j)] - spd[(i, j)]).abs() <= 1e-9 * (1.0 + spd[(i, j)].abs()));
                if j > i {
                    prop_assert_eq!(l[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn feature_file_round_trips(
        (n, d) in (1usize..20, 1usize..6),
        seed in any::<u64>(),
        classes in 1u32..5,
    ) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.normal() as f32 as f64).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.below(classes as usize) as u32).collect();
        let batch = LabeledFeatureBatch::new(DenseMatrix::from_vec(n, d, data).unwrap(), labels).unwrap();
        let bytes = encode_feature_file(&batch, classes).unwrap();
        prop_assert_eq!(bytes.len(), 20 + n * (4 * d + 4));
        let (back, c) = decode_feature_file(&bytes, "prop").unwrap();
        prop_assert_eq!(c, classes);
        prop_assert_eq!(back, batch);
        prop_assert!(decode_feature_file(&bytes[..bytes.len() - 1], "prop").is_err());
    }

    #[test]
    fn generator_bytes_round_trip(seed in any::<u64>(), d in 1usize..5, diagonal in any::<bool>()) {
        let g = fitted(seed, d, diagonal);
        let bytes = g.to_bytes();
        prop_assert_eq!(bytes.len(), g.encoded_len());
        let back = GmmGenerator::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pool_bytes_round_trip(seed in any::<u64>(), domains in 1u32..4) {
        let mut pool = GeneratorPool::new(3);
        for t in 0..domains {
            for c in 0..2 {
                pool.insert(t, c, fitted(seed ^ u64::from(t * 2 + c), 3, c == 1)).unwrap();
            }
        }
        let bytes = pool.to_bytes();
        let back = GeneratorPool::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.len(), (2 * domains) as usize);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn composed_batch_size_follows_ratio(b in 1usize..80, ratio in 0.0f64..3.0, seed in any::<u64>()) {
        let mut pool = GeneratorPool::new(2);
        pool.insert(0, 0, fitted(seed, 2, false)).unwrap();
        pool.insert(0, 1, fitted(seed.wrapping_add(1), 2, true)).unwrap();
        let current = LabeledFeatureBatch::new(DenseMatrix::zeros(b, 2), vec![0; b]).unwrap();
        let out = compose_batch(&current, &pool, ratio, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(out.len(), b + (ratio * b as f64).round() as usize);
        prop_assert_eq!(out.features().row(0), current.features().row(0));
    }

    #[test]
    fn metrics_respond_affinely(rows in prop::collection::vec(prop::collection::vec(10.0f64..50.0, 4), 4), a in 0.5f64..1.5, c in -5.0f64..5.0) {
        let m = from_rows(&rows);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| a * v + c).collect()).collect();
        let s = from_rows(&scaled);
        prop_assert!((s.avg_accuracy().unwrap() - (a * m.avg_accuracy().unwrap() + c)).abs() < 1e-9);
        prop_assert!((s.bwt().unwrap() - a * m.bwt().unwrap()).abs() < 1e-9);
        prop_assert!((s.ilm().unwrap() - (a * m.ilm().unwrap() + c)).abs() < 1e-9);
        let back = AccuracyMatrix::from_csv(&m.to_csv()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn mlp_bytes_round_trip(seed in any::<u64>(), d in 1usize..6, h in prop::collection::vec(1usize..8, 0..3)) {
        let dims = glrcl::nnet::layer_dims(d, &h, 3);
        let model = MlpHead::init(&dims, &mut Rng::new(seed)).unwrap();
        let bytes = model.to_bytes();
        let back = MlpHead::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.dims(), &dims[..]);
    }
}
