use candle_core::DType;
use ndarray::Array2;
use proptest::prelude::*;

use emocodec::backbone::{LatentKind, LatentSequence};
use emocodec::corpus::{epoch_batches, AudioClip};
use emocodec::features::mel;
use emocodec::nn;
use emocodec::objectives::{emo_weights, pairwise_distances, window_centre};
use emocodec::rvq::{bitrate_kbps, RvqConfig, RvqState, TokenGrid};
use emocodec::trainer::TrainConfig;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    rows.prop_flat_map(move |r| {
        prop::collection::vec(-3.0f64..3.0, r * cols).prop_map(move |v| Array2::from_shape_vec((r, cols), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bitrate_is_rate_times_bits(fr in 1u32..200, books in 1usize..16, bits in 0u32..14) {
        let kbps = bitrate_kbps(fr as f64, books, 1 << bits);
        prop_assert!((kbps - fr as f64 * books as f64 * bits as f64 / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn mel_is_nonnegative_and_scales_linearly(samples in prop::collection::vec(-0.5f32..0.5, 256..600), i in 5u32..9) {
        let clip = AudioClip::new(samples.clone(), 16000).unwrap();
        let twice = AudioClip::new(samples.iter().map(|v| 2.0 * v).collect(), 16000).unwrap();
        let (a, b) = (mel(&clip, i).unwrap(), mel(&twice, i).unwrap());
        prop_assert!(a.values.iter().all(|v| *v >= 0.0));
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            prop_assert!((2.0 * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn emotion_weights_are_positive_with_unit_mean(e in matrix(1..=40, 3)) {
        let g = emo_weights(&e).unwrap();
        prop_assert_eq!(g.len(), e.nrows());
        prop_assert!(g.iter().all(|v| *v > 0.0));
        prop_assert!((g.iter().sum::<f64>() / g.len() as f64 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_centres_stay_in_range_and_never_decrease(frames in 1usize..64, n in 1usize..32) {
        let mut last = 0;
        for t in 1..=frames {
            let c = window_centre(t, frames, n);
            prop_assert!((1..=n).contains(&c) && c >= last);
            last = c;
        }
    }

    #[test]
    fn distances_are_a_symmetric_zero_diagonal_matrix(x in matrix(1..=12, 4)) {
        let d = nn::to_array2(&pairwise_distances(&nn::from_array2(&x, DType::F64).unwrap()).unwrap()).unwrap();
        for i in 0..x.nrows() {
            prop_assert_eq!(d[[i, i]], 0.0);
            for j in 0..x.nrows() {
                prop_assert_eq!(d[[i, j]], d[[j, i]]);
                let exact = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
                prop_assert!((d[[i, j]] - exact).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quantized_value_is_the_dequantized_grid(z in matrix(1..=20, 6), k in 1usize..=4, seed in 0u64..1000) {
        let rvq = RvqState::new(RvqConfig { num_books: 4, codebook_size: 8, dim: 6 }, seed).unwrap();
        let latents = LatentSequence { values: z, frame_rate: 50.0, kind: LatentKind::Encoder };
        let (grid, out) = rvq.quantize(&latents, k, DType::F64).unwrap();
        prop_assert_eq!(grid.layers(), k);
        let back = rvq.dequantize(&grid, 50.0).unwrap().values;
        let q = nn::to_array2(&out.quantized).unwrap();
        for (a, b) in back.iter().zip(q.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn token_grid_files_round_trip(frames in 0usize..30, layers in 1usize..9, hash: u64, seed: u64) {
        let mut state = seed;
        let indices = Array2::from_shape_simple_fn((frames, layers), || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 54) as u32
        });
        let grid = TokenGrid { indices, codec_hash: hash };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.rvqt");
        grid.write(&p).unwrap();
        prop_assert_eq!(TokenGrid::read(&p).unwrap(), grid);
    }

    #[test]
    fn epoch_batches_partition_the_corpus(n in 1usize..50, bs in 1usize..9, seed: u64, epoch in 0u64..5) {
        let batches = epoch_batches(n, bs, seed, epoch).unwrap();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(batches, epoch_batches(n, bs, seed, epoch).unwrap());
    }

    #[test]
    fn config_text_round_trips(lr in 1e-5f64..1e-2, bs in 1usize..32, seed: u64, q in 0.0f64..2.0) {
        let mut cfg = TrainConfig::toy();
        cfg.lr = lr;
        cfg.batch_size = bs;
        cfg.seed = seed;
        cfg.weights.q = q;
        let back = TrainConfig::parse_str(&cfg.to_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
