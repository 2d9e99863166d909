mod common;

use common::{layer_norm, linear, max_diff, random_vec, randomize_affine};
use mtf_core::nn::{Forward, Initializer, ParamStore};
use mtf_core::tft::{clip_codes, make_frame_mask, positional_encode, FrameMask, Tft};
use mtf_core::{seed, Tensor};

const C: usize = 8;
const HEADS: usize = 2;
const HIDDEN: usize = 16;
const JOINTS: usize = 3;
const MAX_FRAMES: usize = 7;

fn encoder(seed_value: u64) -> (Tft, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed::rng(seed_value, "init", 0));
    let tft = Tft::register(&mut store, &mut init, "tft", C, HEADS, HIDDEN, 2, MAX_FRAMES, JOINTS, 0.1).unwrap();
    randomize_affine(&mut store, &mut seed::rng(seed_value, "affine", 0));
    (tft, store)
}

fn run(tft: &Tft, store: &ParamStore<f64>, x: &[f64], s: usize, t: usize, masks: &[FrameMask]) -> Vec<f64> {
    let mut cx = Forward::new(store, false, seed::rng(0, "test", 0));
    let xv = cx.constant(Tensor::new(&[s, t, C], x.to_vec()).unwrap()).unwrap();
    let refs: Vec<&FrameMask> = masks.iter().collect();
    let y = tft.forward(&mut cx, xv, &refs).unwrap();
    cx.graph.value(y).to_vec()
}

fn code(t: usize, col: usize) -> f64 {
    let angle = t as f64 / 10000f64.powf((col - col % 2) as f64 / C as f64);
    if col.is_multiple_of(2) { angle.sin() } else { angle.cos() }
}

/// Frame-by-frame evaluation of one clip through two pre-norm layers.
fn encoder_oracle(store: &ParamStore<f64>, clip: &[f64], visible: &[bool]) -> Vec<f64> {
    let t = visible.len();
    let offset = (MAX_FRAMES - t) / 2;
    let dh = C / HEADS;
    let mut x: Vec<Vec<f64>> = (0..t).map(|f| (0..C).map(|c| clip[f * C + c] + code(offset + f, c)).collect()).collect();
    for l in 0..2 {
        let name = |part: &str| format!("tft.layer{l}.{part}");
        let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(store, &name("norm1"), r)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| linear(store, &name("query"), r)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| linear(store, &name("key"), r)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| linear(store, &name("value"), r)).collect();
        for f in 0..t {
            let mut mixed = vec![0.0; C];
            for head in 0..HEADS {
                let cols = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = (0..t)
                    .map(|g| cols.clone().map(|c| q[f][c] * k[g][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = (0..t).filter(|&g| visible[g]).map(|g| scores[g]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = (0..t).filter(|&g| visible[g]).map(|g| (scores[g] - max).exp()).sum();
                for g in (0..t).filter(|&g| visible[g]) {
                    let w = (scores[g] - max).exp() / total;
                    for c in cols.clone() {
                        mixed[c] += w * v[g][c];
                    }
                }
            }
            let out = linear(store, &name("output"), &mixed);
            for c in 0..C {
                x[f][c] += out[c];
            }
        }
        for row in x.iter_mut() {
            let n = layer_norm(store, &name("norm2"), row);
            let hidden: Vec<f64> = linear(store, &name("ff1"), &n).into_iter().map(|v| v.max(0.0)).collect();
            let out = linear(store, &name("ff2"), &hidden);
            for c in 0..C {
                row[c] += out[c];
            }
        }
    }
    let middle = layer_norm(store, "tft.norm", &x[t / 2]);
    linear(store, "tft.head", &middle)
}

#[test]
fn positional_codes_match_formula() {
    let p = positional_encode(MAX_FRAMES, C, MAX_FRAMES).unwrap();
    for col in 0..C {
        assert_eq!(p.data()[col], if col % 2 == 0 { 0.0 } else { 1.0 });
    }
    for t in 0..MAX_FRAMES {
        for col in 0..C {
            assert!((p.data()[t * C + col] - code(t, col)).abs() < 1e-12);
        }
    }
    assert!((p.data()[C] - 1f64.sin()).abs() < 1e-12);
    assert!((p.data()[2 * C + 2] - 0.2f64.sin()).abs() < 1e-12);
    for a in 0..MAX_FRAMES {
        for b in a + 1..MAX_FRAMES {
            assert!(max_diff(&p.data()[a * C..(a + 1) * C], &p.data()[b * C..(b + 1) * C]) > 1e-3);
        }
    }
    assert!(positional_encode(8, C, MAX_FRAMES).is_err());
}

#[test]
fn clip_codes_centre_the_middle_frame() {
    let table = positional_encode(MAX_FRAMES, C, MAX_FRAMES).unwrap();
    for t in [1, 3, 5, 7] {
        let codes = clip_codes::<f64>(t, C, MAX_FRAMES).unwrap();
        assert_eq!(&codes.data()[(t / 2) * C..(t / 2 + 1) * C], &table.data()[3 * C..4 * C]);
    }
    assert!(clip_codes::<f64>(4, C, MAX_FRAMES).is_err());
}

fn visible(mask: &FrameMask) -> Vec<usize> {
    (0..mask.frames()).filter(|&f| mask.visible[f]).collect()
}

#[test]
fn frame_mask_examples() {
    assert_eq!(make_frame_mask(7, 7).unwrap().visible, vec![true; 7]);
    let one = make_frame_mask(7, 1).unwrap();
    assert_eq!(visible(&one), vec![3]);
    assert_eq!(visible(&make_frame_mask(7, 3).unwrap()), vec![2, 3, 4]);
    assert_eq!(one.effective(), 1);
    assert!(make_frame_mask(7, 4).is_err());
    assert!(make_frame_mask(6, 3).is_err());
    assert!(make_frame_mask(3, 5).is_err());
}

#[test]
fn encoder_matches_brute_force_oracle() {
    let (tft, store) = encoder(1);
    let mut rng = seed::rng(1, "x", 0);
    let t = 3;
    let masks = [make_frame_mask(3, 3).unwrap(), make_frame_mask(3, 1).unwrap(), FrameMask { visible: vec![true, true, false] }];
    let x = random_vec(&mut rng, masks.len() * t * C, -1.0, 1.0);
    let y = run(&tft, &store, &x, masks.len(), t, &masks);
    for (s, m) in masks.iter().enumerate() {
        let want = encoder_oracle(&store, &x[s * t * C..(s + 1) * t * C], &m.visible);
        assert!(max_diff(&y[s * 3 * JOINTS..(s + 1) * 3 * JOINTS], &want) < 1e-8, "clip {s}");
    }
}

#[test]
fn masked_frames_do_not_influence_output() {
    let (tft, store) = encoder(2);
    let mut rng = seed::rng(2, "x", 0);
    let t = 7;
    let mask = make_frame_mask(7, 3).unwrap();
    let x = random_vec(&mut rng, t * C, -1.0, 1.0);
    let base = run(&tft, &store, &x, 1, t, std::slice::from_ref(&mask));
    let mut moved = x.clone();
    for f in [0, 1, 5, 6] {
        for v in &mut moved[f * C..(f + 1) * C] {
            *v += 5.0;
        }
    }
    assert_eq!(base, run(&tft, &store, &moved, 1, t, std::slice::from_ref(&mask)));
    moved[2 * C] += 0.5;
    assert_ne!(base, run(&tft, &store, &moved, 1, t, std::slice::from_ref(&mask)));
}

#[test]
fn single_frame_mask_equals_single_frame_clip() {
    let (tft, store) = encoder(3);
    let x = random_vec(&mut seed::rng(3, "x", 0), 7 * C, -1.0, 1.0);
    let masked = run(&tft, &store, &x, 1, 7, &[make_frame_mask(7, 1).unwrap()]);
    let alone = run(&tft, &store, &x[3 * C..4 * C], 1, 1, &[make_frame_mask(1, 1).unwrap()]);
    assert!(max_diff(&masked, &alone) < 1e-9);
}

#[test]
fn clips_are_encoded_independently() {
    let (tft, store) = encoder(4);
    let t = 5;
    let x = random_vec(&mut seed::rng(4, "x", 0), 3 * t * C, -1.0, 1.0);
    let masks = vec![make_frame_mask(5, 5).unwrap(); 3];
    let y = run(&tft, &store, &x, 3, t, &masks);
    assert_eq!(y.len(), 3 * 3 * JOINTS);
    for s in 0..3 {
        let alone = run(&tft, &store, &x[s * t * C..(s + 1) * t * C], 1, t, &masks[..1]);
        assert!(max_diff(&y[s * 3 * JOINTS..(s + 1) * 3 * JOINTS], &alone) < 1e-12);
    }
}

#[test]
fn frame_order_matters() {
    let (tft, store) = encoder(5);
    let t = 5;
    let x = random_vec(&mut seed::rng(5, "x", 0), t * C, -1.0, 1.0);
    let reversed: Vec<f64> = (0..t).rev().flat_map(|f| x[f * C..(f + 1) * C].to_vec()).collect();
    let mask = [make_frame_mask(5, 5).unwrap()];
    assert!(max_diff(&run(&tft, &store, &x, 1, t, &mask), &run(&tft, &store, &reversed, 1, t, &mask)) > 1e-6);
}

#[test]
fn rejects_bad_masks_and_shapes() {
    let (tft, store) = encoder(6);
    let mut cx = Forward::new(&store, false, seed::rng(0, "test", 0));
    let x = cx.constant(Tensor::zeros(&[1, 3, C])).unwrap();
    let hidden_middle = FrameMask { visible: vec![true, false, true] };
    assert!(tft.forward(&mut cx, x, &[&hidden_middle]).is_err());
    let wrong_len = make_frame_mask(5, 3).unwrap();
    assert!(tft.forward(&mut cx, x, &[&wrong_len]).is_err());
    let long = cx.constant(Tensor::zeros(&[1, 9, C])).unwrap();
    assert!(tft.forward(&mut cx, long, &[&make_frame_mask(9, 9).unwrap()]).is_err());
    let mut init = Initializer::new(seed::rng(0, "init", 0));
    assert!(Tft::register(&mut ParamStore::<f64>::new(), &mut init, "tft", 10, 3, 8, 1, 7, 3, 0.0).is_err());
}
