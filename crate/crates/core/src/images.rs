//! Image decoding into normalized `[3, H, W]` tensors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::imageops::FilterType;
use ndarray::{s, Array3, Array4};
use rayon::prelude::*;

use crate::datasets::ImageRecord;
use crate::error::{ReidError, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug)]
pub struct ImageLoader {
    height: usize,
    width: usize,
    cache: Option<Mutex<HashMap<PathBuf, Arc<Array3<f64>>>>>,
}

impl ImageLoader {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cache: None,
        }
    }

    /// Keep decoded images in memory. Worth it for the small fixtures where
    /// every image is revisited each epoch.
    pub fn with_cache(mut self) -> Self {
        self.cache = Some(Mutex::new(HashMap::new()));
        self
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn load(&self, path: &Path) -> Result<Arc<Array3<f64>>> {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lock().expect("cache lock").get(path) {
                return Ok(Arc::clone(hit));
            }
        }
        let decoded = Arc::new(self.decode(path)?);
        if let Some(cache) = &self.cache {
            cache
                .lock()
                .expect("cache lock")
                .insert(path.to_path_buf(), Arc::clone(&decoded));
        }
        Ok(decoded)
    }

    fn decode(&self, path: &Path) -> Result<Array3<f64>> {
        let img = image::open(path).map_err(|source| ReidError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (h, w) = (self.height as u32, self.width as u32);
        let rgb = if img.width() == w && img.height() == h {
            img.to_rgb8()
        } else {
            img.resize_exact(w, h, FilterType::Triangle).to_rgb8()
        };
        let mut out = Array3::zeros((3, self.height, self.width));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                out[[c, y as usize, x as usize]] = (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        Ok(out)
    }

    /// Decode `records` in parallel into one `[B, 3, H, W]` batch.
    pub fn batch(&self, records: &[ImageRecord]) -> Result<Array4<f64>> {
        let images = records
            .par_iter()
            .map(|r| self.load(&r.path))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array4::zeros((records.len(), 3, self.height, self.width));
        for (i, img) in images.iter().enumerate() {
            out.slice_mut(s![i, .., .., ..]).assign(img);
        }
        Ok(out)
    }
}
