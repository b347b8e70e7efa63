//! Dataset statistics, oracle soundness and metric checks.

use starlite_core::image::Image;
use starlite_core::rng;
use starlite_core::toyworld::mmd::{features, mmd_features};
use starlite_core::toyworld::*;

const CHI2_999: [f64; 6] = [0.0, 10.83, 13.82, 16.27, 18.47, 20.52];

fn chi2_uniform(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn attribute_frequencies_are_uniform() {
    let data = gen_dataset(2024, 10_000, 16);
    let mut size = [0usize; 2];
    let mut color = [0usize; 4];
    let mut shape = [0usize; 3];
    let mut pos = [0usize; 5];
    for s in &data {
        let sc = s.scene;
        size[Size::ALL.iter().position(|&x| x == sc.size).unwrap()] += 1;
        color[Color::ALL.iter().position(|&x| x == sc.color).unwrap()] += 1;
        shape[Shape::ALL.iter().position(|&x| x == sc.shape).unwrap()] += 1;
        pos[Position::ALL
            .iter()
            .position(|&x| x == sc.position)
            .unwrap()] += 1;
    }
    assert!(chi2_uniform(&size) < CHI2_999[1]);
    assert!(chi2_uniform(&color) < CHI2_999[3]);
    assert!(chi2_uniform(&shape) < CHI2_999[2]);
    assert!(chi2_uniform(&pos) < CHI2_999[4]);
}

#[test]
fn oracle_soundness() {
    let r = &mut rng::seeded(77);
    let mut lower = 0;
    let n = 1000;
    for _ in 0..n {
        let scene = Scene::random(r);
        let img = scene.render(32);
        let own = alignment_oracle(&img, &scene.caption().text()).unwrap();
        assert!(own >= 0.99, "{scene:?}: {own}");
        let other = loop {
            let c = Caption::random(r);
            if c != scene.caption() {
                break c;
            }
        };
        if alignment_oracle(&img, &other.text()).unwrap() < own {
            lower += 1;
        }
    }
    assert!(lower * 100 >= 99 * n, "{lower} of {n}");
}

#[test]
fn oracle_soundness_at_low_resolution() {
    for c in Caption::all() {
        let scene = Scene {
            shape: c.shape,
            color: c.color,
            size: c.size,
            position: c.position,
            background: 0.25,
        };
        assert!(alignment_oracle(&scene.render(16), &c.text()).unwrap() >= 0.99);
    }
}

fn noise_image(r: &mut rng::Rng, side: usize) -> Image {
    Image::new(
        side,
        (0..side * side * 3)
            .map(|_| rng::uniform(r) * 2.0 - 1.0)
            .collect(),
    )
    .unwrap()
}

#[test]
fn noise_scores_low() {
    let r = &mut rng::seeded(5);
    let img = noise_image(r, 32);
    let mut total = 0.0;
    for _ in 0..100 {
        total += alignment_oracle(&img, &Caption::random(r).text()).unwrap();
    }
    assert!(total / 100.0 < 0.3, "{}", total / 100.0);
}

fn circle(size: Size) -> Scene {
    Scene {
        shape: Shape::Circle,
        color: Color::Red,
        size,
        position: Position::Center,
        background: 0.2,
    }
}

#[test]
fn structure_of_clean_and_corrupted_circles() {
    let clean = circle(Size::Large).render(32);
    let s = structure_oracle(&clean);
    assert!(s >= 0.85, "{s}");
    let r = &mut rng::seeded(8);
    let mut noisy = clean.clone();
    for _ in 0..60 {
        let (y, x) = (rng::below(r, 32), rng::below(r, 32));
        let v = if rng::below(r, 2) == 0 {
            [1.0, -1.0, -1.0]
        } else {
            [-0.6; 3]
        };
        noisy.set_pixel(y, x, v);
    }
    assert!(structure_oracle(&noisy) < s);
    assert!(alignment_oracle(&clean, "tiny red circle at center").is_err());
}

#[test]
fn structure_scores_bounded() {
    let r = &mut rng::seeded(9);
    for _ in 0..50 {
        let v = structure_oracle(&Scene::random(r).render(32));
        assert!((0.0..=1.0).contains(&v));
        let v = structure_oracle(&noise_image(r, 16));
        assert!((0.0..=1.0).contains(&v));
    }
}

/// Direct double sum over pixel-space features with an explicit bandwidth.
fn naive_mmd(a: &[Vec<f64>], b: &[Vec<f64>], bw: f64, unbiased: bool) -> f64 {
    let k = |x: &Vec<f64>, y: &Vec<f64>| {
        let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
        (-d / (2.0 * bw)).exp()
    };
    let mean_within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        let mut n = 0.0;
        for (i, x) in s.iter().enumerate() {
            for (j, y) in s.iter().enumerate() {
                if unbiased && i == j {
                    continue;
                }
                t += k(x, y);
                n += 1.0;
            }
        }
        t / n
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    mean_within(a) + mean_within(b) - 2.0 * cross / (a.len() * b.len()) as f64
}

#[test]
fn mmd_properties() {
    let data = gen_dataset(1, 12, 16);
    let a: Vec<Image> = data[..6].iter().map(|s| s.image.clone()).collect();
    let b: Vec<Image> = data[6..].iter().map(|s| s.image.clone()).collect();
    let same = mmd_proxy(&a, &a).unwrap();
    assert!(same.biased.abs() < 1e-6);
    let ab = mmd_proxy(&a, &b).unwrap();
    let ba = mmd_proxy(&b, &a).unwrap();
    assert!((ab.raw - ba.raw).abs() < 1e-12 && (ab.biased - ba.biased).abs() < 1e-12);
    assert!(ab.value >= 0.0 && ab.value == ab.raw.max(0.0));
    assert!(mmd_proxy(&a[..1], &b).is_err());
}

#[test]
fn black_vs_white_matches_double_loop() {
    let r = &mut rng::seeded(3);
    let mk = |base: f32, r: &mut rng::Rng| -> Vec<Image> {
        (0..5)
            .map(|_| {
                Image::new(8, (0..192).map(|_| base + 0.05 * rng::uniform(r)).collect()).unwrap()
            })
            .collect()
    };
    let black = mk(-1.0, r);
    let white = mk(0.95, r);
    let m = mmd_proxy(&black, &white).unwrap();
    assert!(m.value > 0.0);
    let (fa, fb) = (features(&black), features(&white));
    assert!((m.raw - naive_mmd(&fa, &fb, m.bandwidth, true)).abs() < 1e-9);
    assert!((m.biased - naive_mmd(&fa, &fb, m.bandwidth, false)).abs() < 1e-9);
    let same = mmd_features(&fa, &fa).unwrap();
    assert!(same.biased.abs() < 1e-9);
}
