use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use super::{DataConfig, Dataset};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

const BACKGROUND_STD: f64 = 0.3;
const FOREGROUND: f64 = 1.0;
const PATCH: usize = 5;

// 5×5 foreground patterns, '#' = on. Order matters: class j uses entry j.
const TEMPLATES: &[[&str; PATCH]] = &[
    [".....", ".....", "#####", ".....", "....."], // horizontal bar
    ["#####", "#####", "#####", "#####", "#####"], // block
    ["..#..", "..#..", "..#..", "..#..", "..#.."], // vertical bar
    [".###.", "#####", "#####", "#####", ".###."], // disc
    ["#....", ".#...", "..#..", "...#.", "....#"], // diagonal
    [".###.", "#...#", "#...#", "#...#", ".###."], // ring
    ["..#..", "..#..", "#####", "..#..", "..#.."], // plus
    ["#####", "#...#", "#...#", "#...#", "#####"], // hollow square
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"], // x
    ["#....", "#....", "#....", "#....", "#####"], // L
    ["#####", "..#..", "..#..", "..#..", "..#.."], // T
    ["....#", "...#.", "..#..", ".#...", "#...."], // anti-diagonal
    ["#####", ".....", ".....", ".....", "#####"], // two bars
    ["#...#", "#...#", "#...#", "#...#", "#...#"], // two columns
    ["#.#.#", ".#.#.", "#.#.#", ".#.#.", "#.#.#"], // checker
    ["#####", "....#", "....#", "....#", "....#"], // corner
    [".....", ".###.", ".###.", ".###.", "....."], // small block
    ["#...#", "#...#", ".#.#.", ".#.#.", "..#.."], // v
];

pub const TEMPLATE_COUNT: usize = TEMPLATES.len();

/// Foreground mask of template `j` as row-major 0/1 values.
pub fn template(j: usize) -> Option<[[bool; PATCH]; PATCH]> {
    let rows = TEMPLATES.get(j)?;
    let mut out = [[false; PATCH]; PATCH];
    for (r, row) in rows.iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            out[r][c] = ch == b'#';
        }
    }
    Some(out)
}

/// `samples_per_class` noisy single-channel images per class, each with the
/// class template at a uniformly random position. Values are rounded to
/// `f32` so the binary dump round-trips exactly.
pub fn generate_synthetic(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Data("need at least 2 classes".into()));
    }
    if cfg.classes > TEMPLATE_COUNT {
        return Err(Error::Data(format!("{} classes requested, {TEMPLATE_COUNT} templates available", cfg.classes)));
    }
    let size = cfg.image_size;
    if size < PATCH {
        return Err(Error::Data(format!("image size {size} smaller than the {PATCH}×{PATCH} template")));
    }
    let mut rng = StreamRng::seed_from_u64(seed);
    let noise = Normal::new(0.0, BACKGROUND_STD).expect("valid std");
    let n = cfg.classes * cfg.samples_per_class;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    // Interleave classes so any prefix is roughly balanced.
    for _ in 0..cfg.samples_per_class {
        for j in 0..cfg.classes {
            let mask = template(j).expect("checked above");
            let top = rng.random_range(0..=size - PATCH);
            let left = rng.random_range(0..=size - PATCH);
            let mut img: Vec<f64> = (0..size * size).map(|_| noise.sample(&mut rng)).collect();
            for (r, row) in mask.iter().enumerate() {
                for (c, on) in row.iter().enumerate() {
                    if *on {
                        img[(top + r) * size + left + c] += FOREGROUND;
                    }
                }
            }
            data.extend(img.into_iter().map(|v| v as f32 as f64));
            labels.push(j);
        }
    }
    Dataset::new(Tensor::new([n, 1, size, size], data)?, labels, cfg.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_distinct_and_small() {
        const { assert!(TEMPLATE_COUNT >= 16) };
        for a in 0..TEMPLATE_COUNT {
            let ta = template(a).unwrap();
            let on = ta.iter().flatten().filter(|b| **b).count();
            assert!(on > 0 && on * 4 <= 16 * 16, "template {a} covers {on} pixels");
            for b in 0..a {
                assert_ne!(ta, template(b).unwrap(), "templates {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn generation_is_seeded_and_balanced() {
        let cfg = DataConfig { classes: 4, samples_per_class: 10, ..DataConfig::default() };
        let a = generate_synthetic(&cfg, 3).unwrap();
        assert_eq!(a, generate_synthetic(&cfg, 3).unwrap());
        assert_ne!(a.images, generate_synthetic(&cfg, 4).unwrap().images);
        assert_eq!(a.histogram(), vec![10; 4]);
        assert!(a.images.data().iter().all(|v| (*v as f32) as f64 == *v));
    }

    #[test]
    fn too_many_classes_rejected() {
        let cfg = DataConfig { classes: TEMPLATE_COUNT + 1, ..DataConfig::default() };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }
}
