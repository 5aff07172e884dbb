//! On-disk dataset layout: lossless PNGs for images, 16-bit PNGs for UV maps
//! (with the validity mask in the blue channel), and a JSON manifest carrying
//! identity, pose, and split assignments.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::{Image, Mask, UvMap, UV_SENTINEL};
use crate::world::{FacePose, RenderedFace, UserSplit, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Query,
    TrainDb,
    UnseenDb,
    Noise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_file: String,
    pub uv_file: String,
    pub identity_id: u32,
    pub split: SplitKind,
    /// Present for user identities, absent for noise.
    pub user_id: Option<u32>,
    pub pose: FacePose,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: WorldConfig,
    pub entries: Vec<ManifestEntry>,
}

fn image_to_png(img: &Image) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(CoreError::Shape(format!("png persistence expects 3 channels, got {c}")));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| -> u8 {
            (img[[y as usize, x as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

fn png_to_image(buf: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Image {
    let (w, h) = buf.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        buf.get_pixel(c as u32, r as u32).0[ch] as f64 / 255.0
    })
}

fn uv_to_png(uv: &UvMap, mask: &Mask) -> ImageBuffer<Rgb<u16>, Vec<u16>> {
    let (h, w, _) = uv.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        if mask[[r, c]] {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            Rgb([q(uv[[r, c, 0]]), q(uv[[r, c, 1]]), 65535])
        } else {
            Rgb([0, 0, 0])
        }
    })
}

fn png_to_uv(buf: &ImageBuffer<Rgb<u16>, Vec<u16>>) -> (UvMap, Mask) {
    let (w, h) = buf.dimensions();
    let mut uv = Array3::from_elem((h as usize, w as usize, 2), UV_SENTINEL);
    let mut mask = Array2::from_elem((h as usize, w as usize), false);
    for r in 0..h as usize {
        for c in 0..w as usize {
            let px = buf.get_pixel(c as u32, r as u32).0;
            if px[2] > 0 {
                uv[[r, c, 0]] = px[0] as f64 / 65535.0;
                uv[[r, c, 1]] = px[1] as f64 / 65535.0;
                mask[[r, c]] = true;
            }
        }
    }
    (uv, mask)
}

/// Write one rendered face's image PNG.
pub fn save_image_png(img: &Image, path: &Path) -> Result<()> {
    image_to_png(img)?
        .save(path)
        .map_err(|e| CoreError::Format(format!("png encode {}: {e}", path.display())))
}

/// Read an image PNG back to the unit range.
pub fn load_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| CoreError::Format(format!("png decode {}: {e}", path.display())))?
        .to_rgb8();
    Ok(png_to_image(&img))
}

/// Write a UV map plus mask as a 16-bit PNG.
pub fn save_uv_png(uv: &UvMap, mask: &Mask, path: &Path) -> Result<()> {
    uv_to_png(uv, mask)
        .save(path)
        .map_err(|e| CoreError::Format(format!("uv png encode {}: {e}", path.display())))
}

/// Read a UV map plus mask from a 16-bit PNG.
pub fn load_uv_png(path: &Path) -> Result<(UvMap, Mask)> {
    let img = image::open(path)
        .map_err(|e| CoreError::Format(format!("uv png decode {}: {e}", path.display())))?
        .to_rgb16();
    Ok(png_to_uv(&img))
}

/// Persist a sampled world under `dir` (subdirs `images/` and `uv/`, plus
/// `manifest.json`).
pub fn save_world(
    dir: &Path,
    users: &[UserSplit],
    noise: &[RenderedFace],
    config: &WorldConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("uv"))?;
    let mut entries = Vec::new();

    let write_face = |face: &RenderedFace,
                          stem: String,
                          split: SplitKind,
                          user_id: Option<u32>,
                          entries: &mut Vec<ManifestEntry>|
     -> Result<()> {
        let image_file = format!("images/{stem}.png");
        let uv_file = format!("uv/{stem}.png");
        save_image_png(&face.image, &dir.join(&image_file))?;
        save_uv_png(&face.uv_map, &face.validity_mask, &dir.join(&uv_file))?;
        entries.push(ManifestEntry {
            image_file,
            uv_file,
            identity_id: face.identity_id,
            split,
            user_id,
            pose: face.pose,
        });
        Ok(())
    };

    for user in users {
        for (i, f) in user.query_images.iter().enumerate() {
            write_face(f, format!("u{}_q{i}", user.user_id), SplitKind::Query, Some(user.user_id), &mut entries)?;
        }
        for (i, f) in user.train_db_images.iter().enumerate() {
            write_face(f, format!("u{}_t{i}", user.user_id), SplitKind::TrainDb, Some(user.user_id), &mut entries)?;
        }
        for (i, f) in user.unseen_db_images.iter().enumerate() {
            write_face(f, format!("u{}_s{i}", user.user_id), SplitKind::UnseenDb, Some(user.user_id), &mut entries)?;
        }
    }
    for (i, f) in noise.iter().enumerate() {
        write_face(f, format!("n{i}"), SplitKind::Noise, None, &mut entries)?;
    }

    let manifest = Manifest { format_version: 1, config: config.clone(), entries };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Format(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a world persisted by [`save_world`].
pub fn load_world(dir: &Path) -> Result<(Vec<UserSplit>, Vec<RenderedFace>, WorldConfig)> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| CoreError::Format(format!("manifest decode: {e}")))?;
    if manifest.format_version != 1 {
        return Err(CoreError::Format(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }

    let mut users: std::collections::BTreeMap<u32, UserSplit> = Default::default();
    let mut noise = Vec::new();
    for entry in &manifest.entries {
        let image = load_image_png(&dir.join(&entry.image_file))?;
        let (uv_map, validity_mask) = load_uv_png(&dir.join(&entry.uv_file))?;
        let face = RenderedFace {
            image,
            uv_map,
            validity_mask,
            identity_id: entry.identity_id,
            pose: entry.pose,
        };
        match entry.split {
            SplitKind::Noise => noise.push(face),
            split => {
                let user_id = entry.user_id.ok_or_else(|| {
                    CoreError::Format(format!(
                        "non-noise entry {} lacks a user id",
                        entry.image_file
                    ))
                })?;
                let user = users.entry(user_id).or_insert_with(|| UserSplit {
                    user_id,
                    query_images: vec![],
                    train_db_images: vec![],
                    unseen_db_images: vec![],
                });
                match split {
                    SplitKind::Query => user.query_images.push(face),
                    SplitKind::TrainDb => user.train_db_images.push(face),
                    SplitKind::UnseenDb => user.unseen_db_images.push(face),
                    SplitKind::Noise => unreachable!(),
                }
            }
        }
    }
    Ok((users.into_values().collect(), noise, manifest.config))
}

/// Path of the manifest within a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::sample_world;

    #[test]
    fn world_roundtrip_preserves_structure() {
        let config = WorldConfig {
            image_size: 16,
            texture_size: 16,
            ..WorldConfig::default()
        };
        let (users, noise) = sample_world(2, 1, 5, 11, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_world(dir.path(), &users, &noise, &config).unwrap();

        let (loaded_users, loaded_noise, loaded_config) = load_world(dir.path()).unwrap();
        assert_eq!(loaded_users.len(), 2);
        assert_eq!(loaded_noise.len(), 5);
        assert_eq!(loaded_config.image_size, 16);

        for (lu, u) in loaded_users.iter().zip(users.iter()) {
            assert_eq!(lu.user_id, u.user_id);
            assert_eq!(lu.query_images.len(), u.query_images.len());
            assert_eq!(lu.train_db_images.len(), u.train_db_images.len());
            assert_eq!(lu.unseen_db_images.len(), u.unseen_db_images.len());
            // 8-bit image quantization, 16-bit uv quantization.
            for (lf, f) in lu.query_images.iter().zip(u.query_images.iter()) {
                assert_eq!(lf.validity_mask, f.validity_mask);
                let img_err = lf
                    .image
                    .iter()
                    .zip(f.image.iter())
                    .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                assert!(img_err <= 0.5 / 255.0 + 1e-12);
                for r in 0..16 {
                    for c in 0..16 {
                        if f.validity_mask[[r, c]] {
                            for k in 0..2 {
                                let e = (lf.uv_map[[r, c, k]] - f.uv_map[[r, c, k]]).abs();
                                assert!(e <= 0.5 / 65535.0 + 1e-12);
                            }
                        }
                    }
                }
            }
        }
    }
}
