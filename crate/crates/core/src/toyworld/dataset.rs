//! Seeded caption/image datasets and their on-disk form.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::scene::Scene;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub caption: String,
    pub image: Image,
}

/// `n` i.i.d. scenes from the stream seeded with `seed`.
pub fn gen_dataset(seed: u64, n: usize, resolution: usize) -> Vec<Sample> {
    let r = &mut rng::seeded(seed);
    (0..n)
        .map(|_| {
            let scene = Scene::random(r);
            Sample {
                caption: scene.caption().text(),
                image: scene.render(resolution),
                scene,
            }
        })
        .collect()
}

pub fn image_name(k: usize) -> String {
    format!("img_{k:06}.ppm")
}

/// Writes `img_%06d.ppm` files and `captions.txt` into `dir`.
pub fn write_dataset(dir: &Path, images: &[Image], captions: &[String]) -> Result<()> {
    if images.len() != captions.len() {
        return Err(Error::shape(
            "write_dataset",
            "image and caption counts differ",
        ));
    }
    fs::create_dir_all(dir)?;
    for (k, img) in images.iter().enumerate() {
        let mut w = BufWriter::new(fs::File::create(dir.join(image_name(k)))?);
        img.write_ppm(&mut w)?;
        w.flush()?;
    }
    let mut text = String::new();
    for c in captions {
        text.push_str(c);
        text.push('\n');
    }
    fs::write(dir.join("captions.txt"), text)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<Image>, Vec<String>)> {
    let text = fs::read_to_string(dir.join("captions.txt"))?;
    let captions: Vec<String> = text.lines().map(str::to_string).collect();
    let images = (0..captions.len())
        .map(|k| Image::read_ppm(fs::File::open(dir.join(image_name(k)))?))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, captions))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_sized() {
        let a = gen_dataset(3, 20, 16);
        assert_eq!(a, gen_dataset(3, 20, 16));
        assert_ne!(a, gen_dataset(4, 20, 16));
        assert_eq!(gen_dataset(3, 1, 16).len(), 1);
        assert_eq!(gen_dataset(3, 1, 16)[0], a[0]);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_dataset(5, 4, 16);
        let imgs: Vec<Image> = data.iter().map(|s| s.image.clone()).collect();
        let caps: Vec<String> = data.iter().map(|s| s.caption.clone()).collect();
        write_dataset(dir.path(), &imgs, &caps).unwrap();
        assert!(dir.path().join("img_000003.ppm").exists());
        let (back, bcaps) = read_dataset(dir.path()).unwrap();
        assert_eq!(bcaps, caps);
        for (a, b) in back.iter().zip(&imgs) {
            assert_eq!(a.to_bytes(), b.to_bytes());
        }
    }
}
