mod common;

use pgcr::data::normalize;
use pgcr::discriminator::{discriminate, DiscriminatorConfig, DiscriminatorModel};
use pgcr::generator::{generate, reconstruct, GeneratorConfig, GeneratorModel};
use pgcr::patch::{patchify, unpatchify, PatchGrid};
use pgcr::Tensor;

use common::lcg_image;

fn block_params(d: usize) -> usize {
    // Two layer norms, qkv, output projection, 4x MLP.
    4 * d + (3 * d * d + 3 * d) + (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d)
}

fn generator_params(c: &GeneratorConfig) -> usize {
    let (pd, e, d) = (c.grid.patch_dim(), c.enc_dim, c.dec_dim);
    (pd * e + e)
        + c.enc_depth * block_params(e)
        + 2 * e
        + (e * d + d)
        + d
        + c.dec_depth * block_params(d)
        + 2 * d
        + (d * pd + pd)
}

#[test]
fn parameter_counts_match_closed_form() {
    let toy = GeneratorModel::init(GeneratorConfig::toy(), 0).unwrap();
    assert_eq!(toy.param_count(), generator_params(&toy.config));
    let disc = DiscriminatorModel::init(DiscriminatorConfig::new(PatchGrid::toy()), 0).unwrap();
    assert_eq!(disc.param_count(), (192 * 512 + 512) + (512 * 256 + 256) + (256 + 1));
}

#[test]
fn paper_geometry() {
    let grid = PatchGrid::paper();
    assert_eq!(grid.num_patches(), 196);
    assert_eq!(grid.patch_dim(), 768);
    let disc = DiscriminatorModel::init(DiscriminatorConfig::new(grid), 0).unwrap();
    let img = normalize(&lcg_image(224, 224, 9));
    let scores = discriminate(&disc, &img).unwrap();
    assert_eq!(scores.shape(), &[196]);
}

#[test]
fn patchify_round_trip_is_bit_exact() {
    for grid in [PatchGrid::toy(), PatchGrid::paper()] {
        let s = grid.image_size;
        let img = normalize(&lcg_image(s, s, s as u64));
        let patches = patchify(&img, &grid).unwrap();
        assert_eq!(patches.shape(), &[grid.num_patches(), grid.patch_dim()]);
        assert!(unpatchify(&patches, &grid).unwrap().bit_eq(&img));
    }
}

fn replace_patch(img: &Tensor, grid: &PatchGrid, patch: usize, value: f32) -> Tensor {
    let mut p = patchify(img, grid).unwrap();
    let w = grid.patch_dim();
    p.data_mut()[patch * w..(patch + 1) * w].iter_mut().for_each(|v| *v = value);
    unpatchify(&p, grid).unwrap()
}

#[test]
fn reconstruction_ignores_masked_patches() {
    let gen = GeneratorModel::init(GeneratorConfig::toy(), 3).unwrap();
    let grid = gen.config.grid;
    let img = normalize(&lcg_image(64, 64, 1));
    let (pred, plan) = reconstruct(&gen, &img, 0.75, 11).unwrap();
    assert_eq!(plan.num_masked(), 48);
    assert_eq!(plan.num_visible(), 16);
    assert_eq!(pred.shape(), &[64, 192]);

    let mut edited = img.clone();
    for p in plan.masked_indices() {
        edited = replace_patch(&edited, &grid, p, 0.9);
    }
    let (again, _) = reconstruct(&gen, &edited, 0.75, 11).unwrap();
    assert!(again.bit_eq(&pred));

    let visible = plan.keep_indices[0];
    let (changed, _) = reconstruct(&gen, &replace_patch(&img, &grid, visible, 0.9), 0.75, 11).unwrap();
    assert!(!changed.bit_eq(&pred));
}

#[test]
fn generator_output_is_clamped_image() {
    let gen = GeneratorModel::init(GeneratorConfig::toy(), 5).unwrap();
    let out = generate(&gen, &normalize(&lcg_image(64, 64, 2))).unwrap();
    assert_eq!(out.shape(), &[3, 64, 64]);
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn discriminator_is_patch_permutation_equivariant() {
    let grid = PatchGrid::toy();
    let disc = DiscriminatorModel::init(DiscriminatorConfig::new(grid), 8).unwrap();
    let img = normalize(&lcg_image(64, 64, 4));
    let scores = discriminate(&disc, &img).unwrap();
    assert!(scores.data().iter().all(|&s| s > 0.0 && s < 1.0));

    let p = patchify(&img, &grid).unwrap();
    let w = grid.patch_dim();
    let n = grid.num_patches();
    let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 5) % n).collect();
    let mut shuffled = vec![0f32; n * w];
    for (dst, &src) in perm.iter().enumerate() {
        shuffled[dst * w..(dst + 1) * w].copy_from_slice(&p.data()[src * w..(src + 1) * w]);
    }
    let img2 = unpatchify(&Tensor::new(vec![n, w], shuffled).unwrap(), &grid).unwrap();
    let scores2 = discriminate(&disc, &img2).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        assert_eq!(scores2.data()[dst], scores.data()[src]);
    }
}
