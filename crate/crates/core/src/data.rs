//! Dataset manifest, slice preprocessing, volume-level fold splitting and
//! mini-batch iteration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_traits::Float;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SPATIAL_MULTIPLE;
use crate::pgm::Graymap;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub id: String,
    /// Slice image paths, relative to the manifest directory.
    pub images: Vec<String>,
    pub masks: Vec<String>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub volumes: Vec<VolumeEntry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.volumes.is_empty() {
            return Err(Error::Data("manifest lists no volumes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.volumes {
            if !seen.insert(&v.id) {
                return Err(Error::Data(format!("duplicate volume id {}", v.id)));
            }
            if v.images.len() != v.masks.len() || v.images.is_empty() {
                return Err(Error::Data(format!(
                    "volume {} has {} images and {} masks",
                    v.id,
                    v.images.len(),
                    v.masks.len()
                )));
            }
            if v.height == 0 || v.width == 0 {
                return Err(Error::Data(format!("volume {} has zero slice size", v.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn ids(&self) -> Vec<String> {
        self.volumes.iter().map(|v| v.id.clone()).collect()
    }
}

/// Resolves a dataset argument: either a manifest file or a directory
/// containing `manifest.json`.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

/// Crops the centred `target_h × target_w` window; offsets round toward the
/// top-left.
pub fn center_crop<T: Copy>(
    src: &[T],
    height: usize,
    width: usize,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<T>> {
    if src.len() != height * width {
        return Err(Error::Data(format!(
            "slice buffer has {} values, expected {height}x{width}",
            src.len()
        )));
    }
    if target_h > height || target_w > width || target_h == 0 || target_w == 0 {
        return Err(Error::Data(format!(
            "cannot crop {height}x{width} to {target_h}x{target_w}"
        )));
    }
    let (r0, c0) = crop_offsets(height, width, target_h, target_w);
    let mut out = Vec::with_capacity(target_h * target_w);
    for r in r0..r0 + target_h {
        out.extend_from_slice(&src[r * width + c0..r * width + c0 + target_w]);
    }
    Ok(out)
}

pub fn crop_offsets(height: usize, width: usize, target_h: usize, target_w: usize) -> (usize, usize) {
    ((height - target_h) / 2, (width - target_w) / 2)
}

/// Min-max scales to `[0, 1]`; a constant input maps to all zeros.
pub fn normalize_intensity<F: Float>(values: &mut [F]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite intensity".into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((F::infinity(), F::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > F::zero() { (*v - lo) / span } else { F::zero() };
    }
    Ok(())
}

/// Volume-to-fold mapping for k-fold cross-validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle of volume ids followed by round-robin fold assignment.
pub fn split_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut ids = manifest.ids();
    if k < 2 || ids.len() < k {
        return Err(Error::Data(format!(
            "{} volumes cannot be split into {k} folds",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = ids.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldAssignment { k, seed, folds })
}

/// One volume held in memory after cropping and normalisation.
#[derive(Clone, Debug)]
pub struct Volume {
    pub id: String,
    pub images: Vec<Vec<f32>>,
    /// Binary {0, 1} masks.
    pub masks: Vec<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct VolumeDataset {
    pub volumes: Vec<Volume>,
    pub height: usize,
    pub width: usize,
}

/// Largest size not above `n` that the network accepts.
pub fn network_size(n: usize) -> usize {
    n / SPATIAL_MULTIPLE * SPATIAL_MULTIPLE
}

impl VolumeDataset {
    /// Loads every slice listed in the manifest, centre-cropping to `crop`
    /// (default: the largest network-compatible size) and min-max
    /// normalising each volume.
    pub fn load(manifest_file: &Path, crop: Option<(usize, usize)>) -> Result<Self> {
        let manifest = Manifest::load(manifest_file)?;
        let root = manifest_file.parent().unwrap_or(Path::new("."));
        let first = &manifest.volumes[0];
        let (th, tw) = crop.unwrap_or((network_size(first.height), network_size(first.width)));
        if th == 0 || tw == 0 {
            return Err(Error::Data(format!("crop target {th}x{tw} is empty")));
        }
        let mut volumes = Vec::with_capacity(manifest.volumes.len());
        for entry in &manifest.volumes {
            let mut images = Vec::with_capacity(entry.images.len());
            let mut masks = Vec::with_capacity(entry.masks.len());
            for (img_rel, mask_rel) in entry.images.iter().zip(&entry.masks) {
                let img = Graymap::read(&root.join(img_rel))?;
                let mask = Graymap::read(&root.join(mask_rel))?;
                for (g, rel) in [(&img, img_rel), (&mask, mask_rel)] {
                    if g.height != entry.height || g.width != entry.width {
                        return Err(Error::Data(format!(
                            "{rel} is {}x{}, manifest says {}x{}",
                            g.height, g.width, entry.height, entry.width
                        )));
                    }
                }
                let scale = 1.0 / img.maxval as f32;
                let pixels: Vec<f32> = img.samples.iter().map(|&s| s as f32 * scale).collect();
                let bits = mask
                    .samples
                    .iter()
                    .map(|&s| match s {
                        0 => Ok(0u8),
                        s if s == mask.maxval => Ok(1u8),
                        other => Err(Error::Data(format!("{mask_rel}: non-binary mask value {other}"))),
                    })
                    .collect::<Result<Vec<u8>>>()?;
                images.push(center_crop(&pixels, entry.height, entry.width, th, tw)?);
                masks.push(center_crop(&bits, entry.height, entry.width, th, tw)?);
            }
            let plane = th * tw;
            let mut flat: Vec<f32> = images.concat();
            normalize_intensity(&mut flat)?;
            let images = flat.chunks_exact(plane).map(<[f32]>::to_vec).collect();
            volumes.push(Volume {
                id: entry.id.clone(),
                images,
                masks,
            });
        }
        Ok(VolumeDataset {
            volumes,
            height: th,
            width: tw,
        })
    }

    pub fn manifest_ids(&self) -> Vec<String> {
        self.volumes.iter().map(|v| v.id.clone()).collect()
    }

    /// Volume indices of (train, validation) for `fold`.
    pub fn split(&self, folds: &FoldAssignment, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= folds.k {
            return Err(Error::Config(format!("fold {fold} out of range for k={}", folds.k)));
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, v) in self.volumes.iter().enumerate() {
            match folds.fold_of(&v.id) {
                Some(f) if f == fold => val.push(i),
                Some(_) => train.push(i),
                None => {
                    return Err(Error::Data(format!("volume {} has no fold assignment", v.id)))
                }
            }
        }
        if val.is_empty() || train.is_empty() {
            return Err(Error::Data(format!("fold {fold} leaves an empty split")));
        }
        Ok((train, val))
    }

    pub fn slice_count(&self, volumes: &[usize]) -> usize {
        volumes.iter().map(|&v| self.volumes[v].images.len()).sum()
    }
}

/// Reference to one slice: (volume index, slice index).
pub type SliceRef = (usize, usize);

#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, 1, H, W]`
    pub images: Tensor<T>,
    /// `[B, 1, H, W]` with values in {0, 1}
    pub masks: Tensor<T>,
    pub slices: Vec<SliceRef>,
}

/// Mini-batches over the slices of `volumes`. With `epoch` set the slice
/// order is shuffled by a generator keyed on `(seed, epoch)`; without it the
/// order is volume then slice. The final short batch is kept.
pub fn load_batches<'a, T: Scalar>(
    dataset: &'a VolumeDataset,
    volumes: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: Option<usize>,
) -> impl Iterator<Item = Batch<T>> + 'a {
    let mut order: Vec<SliceRef> = volumes
        .iter()
        .flat_map(|&v| (0..dataset.volumes[v].images.len()).map(move |s| (v, s)))
        .collect();
    if let Some(e) = epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(e as u64);
        order.shuffle(&mut rng);
    }
    let batch_size = batch_size.max(1);
    let chunks: Vec<Vec<SliceRef>> = order.chunks(batch_size).map(<[SliceRef]>::to_vec).collect();
    chunks.into_iter().map(move |slices| make_batch(dataset, slices))
}

fn make_batch<T: Scalar>(dataset: &VolumeDataset, slices: Vec<SliceRef>) -> Batch<T> {
    let shape = [slices.len(), 1, dataset.height, dataset.width];
    let plane = dataset.height * dataset.width;
    let mut images = Vec::with_capacity(slices.len() * plane);
    let mut masks = Vec::with_capacity(slices.len() * plane);
    for &(v, s) in &slices {
        let vol = &dataset.volumes[v];
        images.extend(vol.images[s].iter().map(|&x| T::from_f32(x).expect("finite")));
        masks.extend(vol.masks[s].iter().map(|&m| if m == 1 { T::one() } else { T::zero() }));
    }
    Batch {
        images: Tensor::new(shape.to_vec(), images).expect("batch shape"),
        masks: Tensor::new(shape.to_vec(), masks).expect("batch shape"),
        slices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> Manifest {
        Manifest {
            volumes: (0..n)
                .map(|i| VolumeEntry {
                    id: format!("v{i}"),
                    images: vec!["a".into()],
                    masks: vec!["b".into()],
                    height: 16,
                    width: 16,
                })
                .collect(),
        }
    }

    #[test]
    fn crop_offsets_floor() {
        assert_eq!(crop_offsets(233, 197, 224, 192), (4, 2));
        let src: Vec<usize> = (0..233 * 197).collect();
        let out = center_crop(&src, 233, 197, 224, 192).unwrap();
        assert_eq!(out.len(), 224 * 192);
        assert_eq!(out[0], 4 * 197 + 2);
        assert_eq!(out[224 * 192 - 1], (4 + 223) * 197 + 2 + 191);
        assert_eq!(center_crop(&src, 233, 197, 233, 197).unwrap(), src);
        assert!(center_crop(&src, 233, 197, 234, 197).is_err());
    }

    #[test]
    fn normalisation_rules() {
        let mut v = [0.0f64, 5.0, 10.0];
        normalize_intensity(&mut v).unwrap();
        assert_eq!(v, [0.0, 0.5, 1.0]);
        let mut c = [3.0f32; 4];
        normalize_intensity(&mut c).unwrap();
        assert_eq!(c, [0.0; 4]);
        let mut bad = [1.0, f64::NAN];
        assert!(normalize_intensity(&mut bad).is_err());
    }

    #[test]
    fn folds_partition_volumes() {
        let m = manifest(10);
        let f = split_folds(&m, 5, 3).unwrap();
        assert_eq!(f.fold_sizes(), vec![2; 5]);
        assert_eq!(f.folds.len(), 10);
        assert_eq!(f, split_folds(&m, 5, 3).unwrap());
        let m = manifest(12);
        let sizes = split_folds(&m, 5, 1).unwrap().fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(split_folds(&manifest(4), 5, 0).is_err());
    }

    #[test]
    fn manifest_validation() {
        let mut m = manifest(2);
        m.volumes[1].masks.push("extra".into());
        assert!(m.validate().is_err());
        let mut m = manifest(2);
        m.volumes[1].id = "v0".into();
        assert!(m.validate().is_err());
        let json = r#"{"volumes": [], "extra": 1}"#;
        assert!(serde_json::from_str::<Manifest>(json).is_err());
    }

    fn dataset(slices_per: &[usize]) -> VolumeDataset {
        VolumeDataset {
            volumes: slices_per
                .iter()
                .enumerate()
                .map(|(i, &n)| Volume {
                    id: format!("v{i}"),
                    images: (0..n).map(|s| vec![(i * 100 + s) as f32; 4]).collect(),
                    masks: (0..n).map(|s| vec![(s % 2) as u8; 4]).collect(),
                })
                .collect(),
            height: 2,
            width: 2,
        }
    }

    #[test]
    fn batches_keep_the_short_tail() {
        let ds = dataset(&[10, 10]);
        let sizes: Vec<usize> = load_batches::<f32>(&ds, &[0, 1], 8, 0, Some(0))
            .map(|b| b.slices.len())
            .collect();
        assert_eq!(sizes, vec![8, 8, 4]);
    }

    #[test]
    fn epoch_shuffles_are_seeded() {
        let ds = dataset(&[10, 10]);
        let order = |e| {
            load_batches::<f32>(&ds, &[0, 1], 8, 42, Some(e))
                .flat_map(|b| b.slices)
                .collect::<Vec<_>>()
        };
        assert_eq!(order(0), order(0));
        assert_ne!(order(0), order(1));
    }

    #[test]
    fn batches_pair_images_with_their_masks() {
        let ds = dataset(&[3, 4]);
        for b in load_batches::<f64>(&ds, &[0, 1], 3, 9, Some(2)) {
            for (k, &(v, s)) in b.slices.iter().enumerate() {
                assert_eq!(b.images.data()[k * 4], (v * 100 + s) as f64);
                assert_eq!(b.masks.data()[k * 4], (s % 2) as f64);
            }
            assert!(b.masks.data().iter().all(|&m| m == 0.0 || m == 1.0));
        }
    }
}
