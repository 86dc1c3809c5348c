use std::path::Path;

use proptest::prelude::*;
use tvlab_core::conv::tap;
use tvlab_core::outer::Identity;
use tvlab_core::rsnet::{
    load_params, rsnet_forward, rsnet_loss, save_params, Boundary, RsnetParams, DEFAULT_CLIP,
};
use tvlab_core::{Image, SolverConfig};

fn image(h: usize, w: usize, values: &[f64]) -> Image {
    Image::from_fn(h, w, |r, c| values[(r * w + c) % values.len()])
}

/// Copies a `c`-channel network into `c + 1` channels; the extra channel is
/// all zeros.
fn widen(p: &RsnetParams) -> RsnetParams {
    let c = p.channels();
    let mut q = RsnetParams::zeros(p.blocks(), c + 1, p.clip(), p.boundary()).unwrap();
    for o in 0..c {
        for dy in -1..=1 {
            for dx in -1..=1 {
                q.input_kernel_mut()[tap(o, 0, 1, dy, dx)] = p.input_kernel()[tap(o, 0, 1, dy, dx)];
                q.output_kernel_mut()[tap(0, o, c + 1, dy, dx)] = p.output_kernel()[tap(0, o, c, dy, dx)];
                for i in 0..c {
                    for j in 0..p.blocks() {
                        q.block_kernel_mut(j)[tap(o, i, c + 1, dy, dx)] = p.block_kernel(j)[tap(o, i, c, dy, dx)];
                    }
                }
            }
        }
    }
    q
}

/// Inserts a zero block after block 1. With `b_0 = 0` the new block repeats
/// `b_1`, so every later block sees the same state as before.
fn deepen(p: &RsnetParams) -> RsnetParams {
    let mut q = RsnetParams::zeros(p.blocks() + 1, p.channels(), p.clip(), p.boundary()).unwrap();
    q.input_kernel_mut().copy_from_slice(p.input_kernel());
    q.output_kernel_mut().copy_from_slice(p.output_kernel());
    q.block_kernel_mut(0).copy_from_slice(p.block_kernel(0));
    for j in 1..p.blocks() {
        q.block_kernel_mut(j + 1).copy_from_slice(p.block_kernel(j));
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wider_net_contains_the_narrower_one(
        seed in 0u64..1000,
        blocks in 1usize..4,
        channels in 1usize..5,
        values in prop::collection::vec(0.0f64..255.0, 1..50),
    ) {
        let p = RsnetParams::random(blocks, channels, 5.0, seed).unwrap();
        let v = image(9, 7, &values);
        let a = rsnet_forward(&v, &p).unwrap().0;
        let b = rsnet_forward(&v, &widen(&p)).unwrap().0;
        prop_assert!(a.max_abs_diff(&b) <= 1e-12 * (1.0 + a.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()))));
    }

    #[test]
    fn deeper_net_contains_the_shallower_one(
        seed in 0u64..1000,
        blocks in 1usize..5,
        channels in 1usize..4,
        values in prop::collection::vec(0.0f64..255.0, 1..50),
    ) {
        let p = RsnetParams::random(blocks, channels, 5.0, seed).unwrap();
        let v = image(8, 10, &values);
        let a = rsnet_forward(&v, &p).unwrap().0;
        let b = rsnet_forward(&v, &deepen(&p)).unwrap().0;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn constant_inputs_give_the_same_loss_at_every_size(
        seed in 0u64..1000,
        level in 0.0f64..255.0,
        lambda in 0.1f64..20.0,
    ) {
        let p = RsnetParams::random(2, 4, DEFAULT_CLIP, seed).unwrap();
        let cfg = SolverConfig::new(lambda).unwrap();
        let loss = |n: usize| {
            let v = Image::filled(n, n, level);
            let u = rsnet_forward(&v, &p).unwrap().0;
            rsnet_loss(&u, v.as_slice(), &Identity::new(n, n), &cfg).unwrap()
        };
        let (small, large) = (loss(32), loss(128));
        prop_assert!((small - large).abs() <= 1e-12 * small.abs().max(large.abs()).max(1e-300));
    }
}

#[test]
fn network_runs_on_any_resolution() {
    let p = RsnetParams::random(3, 8, DEFAULT_CLIP, 1).unwrap();
    for (h, w) in [(1, 1), (3, 17), (32, 32), (128, 128)] {
        let v = Image::from_fn(h, w, |r, c| ((r * 31 + c * 7) % 255) as f64);
        let u = rsnet_forward(&v, &p).unwrap().0;
        assert_eq!(u.dims(), (h, w));
    }
}

#[test]
fn golden_file_decodes() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_b1c1.rsnt");
    let p = load_params(&path).unwrap();
    assert_eq!((p.blocks(), p.channels()), (1, 1));
    assert_eq!(p.clip(), 2.5);
    assert_eq!(p.boundary(), Boundary::Grid);
    let expected: Vec<f64> = (0..27).map(|k| k as f64 * 0.25 - 3.0).collect();
    assert_eq!(p.as_slice(), expected.as_slice());

    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.rsnt");
    save_params(&p, &copy).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());
}
