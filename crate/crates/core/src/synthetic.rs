//! Generated dataset trees for tests and smoke runs.
//!
//! Each identity gets a fixed appearance (two clothing colours and a band,
//! drawn from a shared palette); every image of it adds a camera colour cast,
//! a brightness jitter, a small shift and pixel noise. Files follow the
//! Market or Duke naming grammar, so the trees go through the regular `ingest`
//! path.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::datasets::{derive_seed, Layout, Split};
use crate::error::{ReidError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub ids: Vec<i32>,
    pub train_per_id: usize,
    /// Query images, always on camera 1.
    pub query_per_id: usize,
    /// Gallery images, on cameras 2 and up.
    pub gallery_per_id: usize,
    pub cameras: u32,
    /// Extra gallery images with id −1.
    pub distractors: usize,
    /// Extra gallery images with id 0.
    pub junk: usize,
    pub height: u32,
    pub width: u32,
    /// Uniform pixel noise amplitude in `[0, 1]` intensity units.
    pub noise: f64,
    /// Per-image brightness gain is drawn from `1 ± gain_jitter`.
    pub gain_jitter: f64,
    /// Per-camera additive colour cast, per channel, up to this magnitude.
    pub camera_cast: f64,
    pub seed: u64,
    pub layout: Layout,
}

impl FixtureSpec {
    pub fn new(ids: impl IntoIterator<Item = i32>) -> Self {
        Self {
            ids: ids.into_iter().collect(),
            train_per_id: 8,
            query_per_id: 1,
            gallery_per_id: 3,
            cameras: 3,
            distractors: 2,
            junk: 1,
            height: 64,
            width: 32,
            noise: 0.15,
            gain_jitter: 0.35,
            camera_cast: 0.15,
            seed: 0,
            layout: Layout::Market,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

struct Appearance {
    top: [f64; 3],
    bottom: [f64; 3],
    band: [f64; 3],
    band_row: f64,
}

/// Identities draw their colours from this small shared palette, so no
/// single colour identifies a person.
const PALETTE: [[f64; 3]; 5] = [
    [0.75, 0.20, 0.20],
    [0.20, 0.60, 0.25],
    [0.20, 0.30, 0.75],
    [0.80, 0.75, 0.25],
    [0.50, 0.50, 0.50],
];
const BAND_ROWS: [f64; 4] = [0.15, 0.35, 0.55, 0.75];

/// Distinct (top, bottom, band colour, band row) combinations for `ids`.
fn appearances(seed: u64, ids: &[i32]) -> Vec<Appearance> {
    let n = PALETTE.len();
    let mut combos: Vec<(usize, usize, usize, usize)> = Vec::new();
    for top in 0..n {
        for bottom in 0..n {
            for band in 0..n {
                for row in 0..BAND_ROWS.len() {
                    combos.push((top, bottom, band, row));
                }
            }
        }
    }
    let stream = ids.first().map_or(0, |&id| id as u32 as u64);
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, stream));
    combos.shuffle(&mut rng);
    combos
        .into_iter()
        .cycle()
        .take(ids.len())
        .map(|(t, b, c, r)| Appearance {
            top: PALETTE[t],
            bottom: PALETTE[b],
            band: PALETTE[c],
            band_row: BAND_ROWS[r],
        })
        .collect()
}

fn random_appearance(rng: &mut StdRng) -> Appearance {
    let mut pick = || PALETTE[rng.random_range(0..PALETTE.len())];
    let (top, bottom, band) = (pick(), pick(), pick());
    Appearance {
        top,
        bottom,
        band,
        band_row: BAND_ROWS[rng.random_range(0..BAND_ROWS.len())],
    }
}

fn camera_cast(seed: u64, camera: u32, strength: f64) -> [f64; 3] {
    let mut rng = StdRng::seed_from_u64(derive_seed(seed ^ 0x00CA_3E7A, camera as u64));
    [(); 3].map(|_| rng.random_range(-strength..=strength))
}

fn render(spec: &FixtureSpec, look: &Appearance, camera: u32, rng: &mut StdRng) -> RgbImage {
    let (h, w) = (spec.height, spec.width);
    let cast = camera_cast(spec.seed, camera, spec.camera_cast);
    let gain = rng.random_range(1.0 - spec.gain_jitter..=1.0 + spec.gain_jitter);
    let max_shift = (h / 16) as i32;
    let shift = rng.random_range(-max_shift..=max_shift);
    let band_top = (look.band_row * h as f64) as i32 + shift;
    let band_height = (h / 8).max(1) as i32;
    RgbImage::from_fn(w, h, |_, y| {
        let y = y as i32;
        let base = if (band_top..band_top + band_height).contains(&y) {
            look.band
        } else if y < h as i32 / 2 + shift {
            look.top
        } else {
            look.bottom
        };
        let mut px = [0u8; 3];
        for c in 0..3 {
            let v = base[c] * gain + cast[c] + rng.random_range(-spec.noise..=spec.noise);
            px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    })
}

fn split_dir_name(split: Split) -> &'static str {
    match split {
        Split::Train => "bounding_box_train",
        Split::Query => "query",
        Split::Gallery => "bounding_box_test",
    }
}

/// Write a dataset tree under `root` and return the number of images.
pub fn write_fixture(root: &Path, spec: &FixtureSpec) -> Result<usize> {
    if spec.ids.iter().any(|&id| id <= 0) {
        return Err(ReidError::Config("fixture identities must be positive".into()));
    }
    if spec.cameras < 2 {
        return Err(ReidError::Config("fixture needs at least two cameras".into()));
    }
    for split in Split::ALL {
        fs::create_dir_all(root.join(split_dir_name(split)))?;
    }
    let mut rng = StdRng::seed_from_u64(derive_seed(spec.seed, 0x5EED));
    let mut seq = 0u32;
    let mut written = 0;
    let mut emit = |split: Split, id: i32, camera: u32, look: &Appearance, rng: &mut StdRng| -> Result<()> {
        seq += 1;
        let name = spec.layout.format(id, camera, seq, "png");
        let path = root.join(split_dir_name(split)).join(name);
        render(spec, look, camera, rng)
            .save(&path)
            .map_err(|source| ReidError::Image { path, source })?;
        written += 1;
        Ok(())
    };
    let looks = appearances(spec.seed, &spec.ids);
    for (&id, look) in spec.ids.iter().zip(&looks) {
        for j in 0..spec.train_per_id {
            emit(Split::Train, id, j as u32 % spec.cameras + 1, look, &mut rng)?;
        }
        for _ in 0..spec.query_per_id {
            emit(Split::Query, id, 1, look, &mut rng)?;
        }
        for j in 0..spec.gallery_per_id {
            emit(Split::Gallery, id, j as u32 % (spec.cameras - 1) + 2, look, &mut rng)?;
        }
    }
    for (count, id) in [(spec.distractors, -1), (spec.junk, 0)] {
        for j in 0..count {
            let look = random_appearance(&mut rng);
            emit(Split::Gallery, id, j as u32 % spec.cameras + 1, &look, &mut rng)?;
        }
    }
    Ok(written)
}

/// Two tasks with disjoint identities (1..=8 and 101..=108), written to
/// `root/task1` and `root/task2`.
pub fn two_task_fixture(root: &Path, seed: u64) -> Result<[PathBuf; 2]> {
    let a = root.join("task1");
    let b = root.join("task2");
    write_fixture(&a, &FixtureSpec::new(1..=8).with_seed(seed))?;
    write_fixture(&b, &FixtureSpec::new(101..=108).with_seed(seed))?;
    Ok([a, b])
}
