use nalgebra::DMatrix;
use unmix_core::initializers::fcls;
use unmix_core::synthetic::{
    add_noise, generate_abundances_with_labels, generate_library, generate_scene, snr_db, NoiseKind, SceneConfig,
};

/// Steps 2-4 written out pixel by pixel: label image, 2-D window average
/// with mirrored borders, purity cap.
fn oracle(z: usize, k: usize, labels: &[usize]) -> DMatrix<f64> {
    let side = z * z;
    let w = (z + 1) as isize;
    let lo = -((w - 1) / 2);
    let mirror = |i: isize| -> usize {
        let n = side as isize;
        let j = if i < 0 {
            -i - 1
        } else if i >= n {
            2 * n - i - 1
        } else {
            i
        };
        j as usize
    };
    let label_at = |r: usize, c: usize| labels[(r / z) * z + c / z];
    let mut a = DMatrix::zeros(k, side * side);
    for r in 0..side {
        for c in 0..side {
            // integer counts keep the cap comparison exact at 20/25 and similar
            let mut hits = vec![0usize; k];
            for dr in lo..lo + w {
                for dc in lo..lo + w {
                    hits[label_at(mirror(r as isize + dr), mirror(c as isize + dc))] += 1;
                }
            }
            let col: Vec<f64> = hits.iter().map(|&h| h as f64 / (w * w) as f64).collect();
            a.column_mut(r * side + c).copy_from_slice(&col);
            let top = (0..k).fold(0, |b, i| if col[i] > col[b] { i } else { b });
            if col[top] > 0.8 {
                let second = (0..k).filter(|&i| i != top).fold(None, |b: Option<usize>, i| match b {
                    Some(j) if col[j] >= col[i] => Some(j),
                    _ => Some(i),
                });
                let mut fresh = vec![0.0; k];
                fresh[top] = 0.5;
                fresh[second.unwrap()] = 0.5;
                a.column_mut(r * side + c).copy_from_slice(&fresh);
            }
        }
    }
    a
}

#[test]
fn small_scene_matches_pixelwise_oracle() {
    for seed in 0..5 {
        let (a, labels) = generate_abundances_with_labels(2, 2, seed, 1).unwrap();
        assert_eq!(a.pixels(), 16);
        let expected = oracle(2, 2, &labels);
        assert!((a.data() - &expected).amax() < 1e-12, "seed {seed}");
    }
}

#[test]
fn pixel_count_and_simplex_for_other_grids() {
    let (a, labels) = generate_abundances_with_labels(4, 5, 3, 1).unwrap();
    assert_eq!(a.pixels(), 256);
    assert_eq!(labels.len(), 16);
    assert!(a.is_on_simplex(1e-12));
    assert!(a.data().max() <= 0.8 + 1e-12);
    assert!((a.data() - oracle(4, 5, &labels)).amax() < 1e-12);
}

#[test]
fn every_endmember_count_generates_at_default_grid() {
    for k in 2..=15 {
        let s = generate_scene(&SceneConfig {
            k,
            bands: 32,
            seed: k as u64,
            ..SceneConfig::default()
        })
        .unwrap();
        assert_eq!(s.endmembers.count(), k);
        assert!(s.abundances.is_on_simplex(1e-12));
        for e in 0..k {
            assert!(s.abundances.data().row(e).max() > 0.0, "K={k} endmember {e} absent");
        }
    }
}

#[test]
fn smaller_libraries_are_prefixes() {
    let full = generate_library(15, 64, 8).unwrap();
    let part = generate_library(4, 64, 8).unwrap();
    assert_eq!(part.data(), &full.data().columns(0, 4).into_owned());
    assert_eq!(&full.names()[..4], part.names());
}

#[test]
fn doubling_signal_adds_six_decibels() {
    let y = DMatrix::from_fn(40, 300, |i, j| ((i * 31 + j * 17) % 23) as f64 / 23.0 + 0.1);
    let (x, _) = add_noise(&y, 25.0, 4, NoiseKind::Gaussian).unwrap();
    let noise = &x - &y;
    let shift = snr_db(&(&y * 2.0), &noise) - snr_db(&y, &noise);
    assert!((shift - 20.0 * 2f64.log10()).abs() < 1e-9);
    assert!((20.0 * 2f64.log10() - 6.0206).abs() < 1e-4);
}

#[test]
fn noise_free_scene_unmixes_exactly_with_true_endmembers() {
    let s = generate_scene(&SceneConfig {
        z: 4,
        k: 4,
        bands: 100,
        seed: 2,
        ..SceneConfig::default()
    })
    .unwrap();
    assert_eq!(s.cube.data(), &(s.endmembers.data() * s.abundances.data()));
    let a = fcls(&s.cube, &s.endmembers).unwrap();
    assert!((a.data() - s.abundances.data()).amax() < 1e-6);
}

#[test]
fn seeds_reproduce_and_differ() {
    let cfg = SceneConfig {
        z: 3,
        k: 3,
        bands: 50,
        snr_db: 30.0,
        seed: 11,
        ..SceneConfig::default()
    };
    let a = generate_scene(&cfg).unwrap();
    let b = generate_scene(&cfg).unwrap();
    assert_eq!(a.cube.data(), b.cube.data());
    let c = generate_scene(&SceneConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.cube.data(), c.cube.data());
}
