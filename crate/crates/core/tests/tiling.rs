mod common;

use burnmap::dataplane::{crop, tile_origins};
use burnmap::engine::argmax_mask;
use burnmap::tiler::*;
use burnmap::Strategy;
use burnmap::*;
use common::*;
use diffcore::{Rng, Tensor};
use proptest::prelude::*;

/// Logits that depend on position inside the window and on the pixels, so
/// that overlapping windows disagree.
struct Probe(usize);

impl WindowPredictor for Probe {
    fn window(&self) -> usize {
        self.0
    }
    fn predict_window(&self, pre: &Tensor<f32>, post: &Tensor<f32>) -> Result<Tensor<f64>> {
        let n = self.0 * self.0;
        let (a, b) = (pre.data(), post.data());
        Ok(Tensor::from_fn(vec![2, self.0, self.0], |i| {
            let j = i % n;
            let pos = (j / self.0) as f64 * 0.013 - (j % self.0) as f64 * 0.007;
            if i < n {
                a[j] as f64 - b[n + j] as f64 + pos
            } else {
                b[2 * n + j] as f64 - 0.2 - pos
            }
        }))
    }
}

/// Number of windows covering each pixel, counted per axis.
fn count_oracle(h: usize, w: usize, window: usize, stride: usize) -> Vec<u32> {
    let per_axis = |n: usize, i: usize| {
        let mut starts: Vec<usize> = (0..=n - window).step_by(stride).collect();
        if starts.last().unwrap() + window < n {
            starts.push(n - window);
        }
        starts.iter().filter(|&&s| s <= i && i < s + window).count() as u32
    };
    (0..h * w)
        .map(|k| per_axis(h, k / w) * per_axis(w, k % w))
        .collect()
}

#[test]
fn overlap_counts_for_160_at_stride_32() {
    let mut rng = Rng::new(1);
    let scene = random_scene(&mut rng, "s", 160, 160);
    let r = infer_scene(&Probe(128), &scene, &TileJob::default()).unwrap();
    assert_eq!(r.count, count_oracle(160, 160, 128, 32));
    let at = |y: usize, x: usize| r.count[y * 160 + x];
    assert_eq!(
        (at(80, 80), at(0, 0), at(159, 159), at(0, 159)),
        (4, 1, 1, 1)
    );
    assert_eq!((at(0, 80), at(80, 0)), (2, 2));
}

#[test]
fn non_overlapping_tiles_reproduce_window_predictions() {
    let mut rng = Rng::new(2);
    let cfg = micro_config(8, 1);
    let model = Model::<f64>::build(&cfg, Strategy::DecoderOnly, &LoraSpec::default(), 3).unwrap();
    let scene = random_scene(&mut rng, "s", 48, 32);
    let r = infer_scene(
        &model,
        &scene,
        &TileJob {
            window: 16,
            stride: 16,
        },
    )
    .unwrap();
    assert!(r.count.iter().all(|&c| c == 1));
    let mut stitched = vec![0.0; 2 * 48 * 32];
    for (y0, x0) in tile_origins(48, 32, 16, 16).unwrap() {
        let l = model
            .predict_logits(
                &crop(&scene.pre, y0, x0, 16).cast(),
                &crop(&scene.post, y0, x0, 16).cast(),
            )
            .unwrap();
        for k in 0..2 {
            for y in 0..16 {
                for x in 0..16 {
                    stitched[k * 48 * 32 + (y0 + y) * 32 + x0 + x] =
                        l.data()[(k * 16 + y) * 16 + x];
                }
            }
        }
    }
    assert_eq!(r.logits.data(), &stitched[..]);
    assert_eq!(r.pred, argmax_mask(&r.logits));
}

#[test]
fn error_map_matches_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(3);
    let scene = random_scene(&mut rng, "s", 40, 56);
    let r = infer_scene(
        &Probe(16),
        &scene,
        &TileJob {
            window: 16,
            stride: 8,
        },
    )
    .unwrap();
    let path = dir.path().join("err.ppm");
    let counts = emit_error_map(&r.pred, &scene.mask, &path).unwrap();
    let (w, h, px) = read_ppm(&path).unwrap();
    assert_eq!((w, h), (56, 40));
    let n = |c: [u8; 3]| px.iter().filter(|&&p| p == c).count() as u64;
    assert_eq!(
        (n(TP_COLOR), n(FP_COLOR), n(FN_COLOR), n(TN_COLOR)),
        (counts.tp, counts.fp, counts.fn_, counts.tn)
    );
    assert_eq!(counts, objective::confusion(&r.pred, &scene.mask).unwrap());
    assert_eq!(counts.total(), 40 * 56);

    let pgm = dir.path().join("pred.pgm");
    write_mask_pgm(&r.pred, &pgm).unwrap();
    assert_eq!(read_mask_pgm(&pgm).unwrap(), r.pred);
    assert!(read_ppm(&pgm).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn visitation_order_is_irrelevant(
        h in 16usize..60, w in 16usize..60, stride in 1usize..17, seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let scene = random_scene(&mut rng, "s", h, w);
        let origins = tile_origins(h, w, 16, stride).unwrap();
        let base = infer_with_origins(&Probe(16), &scene, 16, &origins).unwrap();
        prop_assert_eq!(&base.count, &count_oracle(h, w, 16, stride));
        let mut shuffled = origins.clone();
        let perm = rng.permutation(shuffled.len());
        shuffled = perm.iter().map(|&i| origins[i]).collect();
        let other = infer_with_origins(&Probe(16), &scene, 16, &shuffled).unwrap();
        prop_assert_eq!(&base.logits, &other.logits);
        prop_assert_eq!(&base.count, &other.count);
        let mut dup = origins.clone();
        dup.push(origins[0]);
        prop_assert!(infer_with_origins(&Probe(16), &scene, 16, &dup).is_err());
    }

    #[test]
    fn averaging_is_linear_and_preserves_argmax_of_constants(
        a in -5.0..5.0f64, b in -5.0..5.0f64, stride in 1usize..9,
    ) {
        let mut acc = SceneLogits::new(24, 20);
        let origins = tile_origins(24, 20, 8, stride).unwrap();
        let window = Tensor::from_fn(vec![2, 8, 8], |i| if i < 64 { a } else { b });
        for &o in &origins {
            acc.add_window(o, &window);
        }
        let avg = acc.average().unwrap();
        prop_assert!(avg.data()[..480].iter().all(|&v| (v - a).abs() <= 1e-12 * a.abs().max(1.0)));
        prop_assert!(avg.data()[480..].iter().all(|&v| (v - b).abs() <= 1e-12 * b.abs().max(1.0)));
        let expect = (b > a) as usize * 480;
        prop_assert_eq!(argmax_mask(&avg).count_ones(), expect);
    }
}
