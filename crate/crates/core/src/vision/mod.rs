//! Camera side: bottom-centre cropping, 16×16 patching, random patch masks,
//! and the masked autoencoder that produces the visual latent.

mod mae;

pub use mae::{reconstruction_loss, MaeDecoder, MaskedAutoencoder};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::numerics::Tensor;

pub const PATCH: usize = 16;
/// Raw values per patch: 16 × 16 × 3.
pub const PATCH_DIM: usize = PATCH * PATCH * 3;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "{}×{} RGB image needs {} bytes, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Per-channel statistics of pixel values scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ImageStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Square crop, `n × n × 3` floats, normalized per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCrop {
    pub n: usize,
    pub data: Vec<f32>,
}

/// Top-left corner `(row, col)` of the bottom-centre `n_i` crop.
pub fn crop_origin(height: usize, width: usize, n_i: usize) -> Result<(usize, usize)> {
    if height < n_i || width < n_i {
        return Err(Error::Input(format!(
            "image {height}×{width} is smaller than the {n_i}×{n_i} crop"
        )));
    }
    Ok((height - n_i, (width - n_i) / 2))
}

pub fn crop_bottom_center(img: &RawImage, n_i: usize, stats: &ImageStats) -> Result<ImageCrop> {
    if n_i == 0 || !n_i.is_multiple_of(PATCH) {
        return Err(Error::Input(format!(
            "crop side {n_i} is not a multiple of {PATCH}"
        )));
    }
    let (r0, c0) = crop_origin(img.height, img.width, n_i)?;
    let mut data = Vec::with_capacity(n_i * n_i * 3);
    for r in r0..r0 + n_i {
        for c in c0..c0 + n_i {
            let px = img.pixel(r, c);
            for ch in 0..3 {
                data.push((px[ch] as f32 / 255.0 - stats.mean[ch]) / stats.std[ch]);
            }
        }
    }
    Ok(ImageCrop { n: n_i, data })
}

/// `[(n/16)² × 768]`, patches in raster order, each flattened as
/// `(row-in-patch, col-in-patch, channel)`.
pub fn patchify(crop: &ImageCrop) -> Tensor {
    let g = crop.n / PATCH;
    let mut out = Vec::with_capacity(crop.data.len());
    for pr in 0..g {
        for pc in 0..g {
            for y in 0..PATCH {
                let row = pr * PATCH + y;
                let start = (row * crop.n + pc * PATCH) * 3;
                out.extend_from_slice(&crop.data[start..start + PATCH * 3]);
            }
        }
    }
    Tensor::new(&[g * g, PATCH_DIM], out).expect("patch grid is consistent")
}

pub fn unpatchify(patches: &Tensor) -> Result<ImageCrop> {
    let (n_p, d) = patches.dims2()?;
    let g = (n_p as f64).sqrt().round() as usize;
    if d != PATCH_DIM || g * g != n_p {
        return Err(Error::shape(
            "unpatchify",
            patches.shape(),
            &[g * g, PATCH_DIM],
        ));
    }
    let n = g * PATCH;
    let mut data = vec![0.0; n * n * 3];
    for p in 0..n_p {
        let (pr, pc) = (p / g, p % g);
        let src = patches.row(p);
        for y in 0..PATCH {
            let row = pr * PATCH + y;
            let dst = (row * n + pc * PATCH) * 3;
            data[dst..dst + PATCH * 3].copy_from_slice(&src[y * PATCH * 3..(y + 1) * PATCH * 3]);
        }
    }
    Ok(ImageCrop { n, data })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted ascending.
    pub visible: Vec<usize>,
    /// Sorted ascending.
    pub masked: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Everything visible.
    pub fn full(n_patches: usize) -> Self {
        Self {
            visible: (0..n_patches).collect(),
            masked: Vec::new(),
            seed: 0,
        }
    }
}

pub fn visible_count(n_patches: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * n_patches as f64).round() as usize
}

pub fn sample_mask(n_patches: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Input(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n_v = visible_count(n_patches, ratio).min(n_patches);
    let mut idx: Vec<usize> = (0..n_patches).collect();
    idx.shuffle(&mut seeded_rng(seed, 0x6d61_736b));
    let mut visible = idx[..n_v].to_vec();
    let mut masked = idx[n_v..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan {
        visible,
        masked,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub n_i: usize,
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub d_e: usize,
    pub encoder_depth: usize,
    pub n_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
}

impl VisionConfig {
    pub fn paper() -> Self {
        Self {
            n_i: 224,
            patch_size: PATCH,
            mask_ratio: 0.75,
            d_e: 768,
            encoder_depth: 12,
            n_heads: 12,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            mlp_ratio: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            n_i: 64,
            patch_size: PATCH,
            mask_ratio: 0.75,
            d_e: 64,
            encoder_depth: 4,
            n_heads: 4,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn grid(&self) -> usize {
        self.n_i / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn n_visible(&self) -> usize {
        visible_count(self.n_patches(), self.mask_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.patch_size != PATCH {
            return bad(format!("patch size must be {PATCH}"));
        }
        if self.n_i == 0 || !self.n_i.is_multiple_of(PATCH) {
            return bad(format!("n_i = {} is not a multiple of {PATCH}", self.n_i));
        }
        if !self.d_e.is_multiple_of(self.n_heads) || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return bad("embedding dims must be divisible by their head counts".into());
        }
        if !self.d_e.is_multiple_of(4) || !self.decoder_dim.is_multiple_of(4) {
            return bad("embedding dims must be divisible by 4 for 2-D sin-cos positions".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        Ok(())
    }
}

/// Fixed 2-D sin-cos table `[g² × dim]`: the first half of each row encodes
/// the patch row, the second half the patch column.
pub fn sincos_2d(grid: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for p in 0..grid * grid {
        for coord in [p / grid, p % grid] {
            let pos = coord as f64;
            data.extend(omega.iter().map(|w| (pos * w).sin() as f32));
            data.extend(omega.iter().map(|w| (pos * w).cos() as f32));
        }
    }
    Tensor::new(&[grid * grid, dim], data).expect("sin-cos table shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> RawImage {
        let data = (0..h * w * 3).map(|i| (i * 31 % 251) as u8).collect();
        RawImage::new(h, w, data).unwrap()
    }

    #[test]
    fn crop_origin_rules() {
        assert_eq!(crop_origin(224, 224, 224).unwrap(), (0, 0));
        assert_eq!(crop_origin(480, 640, 224).unwrap(), (256, 208));
        assert_eq!(crop_origin(480, 641, 224).unwrap(), (256, 208));
        assert!(matches!(crop_origin(100, 640, 224), Err(Error::Input(_))));
    }

    #[test]
    fn full_size_crop_is_the_image() {
        let img = gradient_image(32, 32);
        let crop = crop_bottom_center(&img, 32, &ImageStats::default()).unwrap();
        for (a, &b) in crop.data.iter().zip(&img.data) {
            assert_eq!(*a, b as f32 / 255.0);
        }
    }

    #[test]
    fn crop_reads_the_bottom_centre_pixels() {
        let img = gradient_image(48, 65);
        let crop = crop_bottom_center(&img, 32, &ImageStats::default()).unwrap();
        let px = img.pixel(16, 16);
        assert_eq!(crop.data[0], px[0] as f32 / 255.0);
        let last = img.pixel(47, 47);
        assert_eq!(*crop.data.last().unwrap(), last[2] as f32 / 255.0);
    }

    #[test]
    fn patchify_counts_and_round_trip() {
        for (n, expect) in [(224, 196), (32, 4), (64, 16)] {
            let crop = ImageCrop {
                n,
                data: (0..n * n * 3).map(|i| i as f32).collect(),
            };
            let p = patchify(&crop);
            assert_eq!(p.shape(), &[expect, PATCH_DIM]);
            assert_eq!(unpatchify(&p).unwrap(), crop);
        }
    }

    #[test]
    fn patch_rows_are_raster_ordered() {
        let crop = ImageCrop {
            n: 32,
            data: (0..32 * 32 * 3).map(|i| i as f32).collect(),
        };
        let p = patchify(&crop);
        // patch 1 starts at pixel (0, 16)
        assert_eq!(p.at2(1, 0), (16 * 3) as f32);
        // patch 2 starts at pixel (16, 0)
        assert_eq!(p.at2(2, 0), (16 * 32 * 3) as f32);
    }

    #[test]
    fn mask_counts_and_determinism() {
        let plan = sample_mask(196, 0.75, 9).unwrap();
        assert_eq!(plan.visible.len(), 49);
        assert_eq!(plan.masked.len(), 147);
        assert_eq!(plan, sample_mask(196, 0.75, 9).unwrap());
        assert_ne!(plan.visible, sample_mask(196, 0.75, 10).unwrap().visible);
        let all = sample_mask(16, 0.0, 1).unwrap();
        assert_eq!(all.visible, (0..16).collect::<Vec<_>>());
        assert!(all.masked.is_empty());
        assert!(matches!(sample_mask(16, 1.0, 1), Err(Error::Input(_))));
    }

    #[test]
    fn mask_partitions_patches() {
        let plan = sample_mask(64, 0.6, 4).unwrap();
        let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn presets_validate() {
        VisionConfig::paper().validate().unwrap();
        VisionConfig::desk().validate().unwrap();
        assert_eq!(VisionConfig::paper().n_visible(), 49);
    }
}
