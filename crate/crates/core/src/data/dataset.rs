//! Dataset directory layout:
//!
//! ```text
//! DIR/manifest.json
//! DIR/samples/00000.geo.pgm   8-bit, 255 = RoI, 0 = building
//! DIR/samples/00000.rm.pgm    16-bit normalized received power
//! ```
//!
//! Transmitter coordinates live only in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::channel::{synth_radio_map, RadioMap, SynthChannelParams};
use super::geo::{generate_layout, GeoMap, LayoutParams};
use super::pgm::{decode_pgm, decode_pgm16, encode_pgm, encode_pgm16, PgmImage};
use crate::error::{Error, Result};
use crate::rng::Rng64;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub seed: u64,
    /// `[row, col]` of the transmitter.
    pub tx: [usize; 2],
    pub geo: String,
    pub rm: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub cell_size_m: f64,
    pub bit_depth: u32,
    pub channel: SynthChannelParams,
    pub layout: LayoutParams,
    pub master_seed: u64,
    /// Effective generator configuration, for provenance.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub count: usize,
    pub size: usize,
    pub master_seed: u64,
    pub cell_size_m: f64,
    pub channel: SynthChannelParams,
    pub layout: LayoutParams,
    pub config: BTreeMap<String, String>,
}

impl GenerateOptions {
    pub fn new(count: usize, size: usize, master_seed: u64) -> Self {
        Self {
            count,
            size,
            master_seed,
            cell_size_m: 0.86,
            channel: SynthChannelParams::default(),
            layout: LayoutParams::for_size(size),
            config: BTreeMap::new(),
        }
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        self.master_seed.wrapping_add(index as u64)
    }

    /// Sample `index`, generated in memory. Depends only on
    /// `master_seed + index`.
    pub fn sample(&self, index: usize) -> Result<Sample> {
        let seed = self.sample_seed(index);
        let geo = generate_layout(seed, self.size, self.size, &self.layout, self.cell_size_m)?;
        let map = synth_radio_map(&geo, &self.channel, seed)?;
        Ok(Sample { geo, map })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub geo: GeoMap,
    pub map: RadioMap,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// `(train, test)` sample indices.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        split_indices(self.samples.len(), self.manifest.master_seed)
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

/// 90/10 split by a seeded shuffle; the test side gets the remainder of the
/// floor division. Both lists are sorted.
pub fn split_indices(count: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    Rng64::keyed(seed, "dataset.split").shuffle(&mut idx);
    let n_train = count * 9 / 10;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn sample_names(index: usize) -> (String, String) {
    (
        format!("samples/{index:05}.geo.pgm"),
        format!("samples/{index:05}.rm.pgm"),
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dir: impl AsRef<Path>, opts: &GenerateOptions) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    if opts.count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    opts.channel.validate()?;
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    let mut entries = Vec::with_capacity(opts.count);
    for index in 0..opts.count {
        let Sample { geo, map } = opts.sample(index)?;
        let (geo_name, rm_name) = sample_names(index);
        let geo_img = PgmImage {
            width: geo.width(),
            height: geo.height(),
            maxval: 255,
            samples: geo.roi().iter().map(|&f| if f { 255 } else { 0 }).collect(),
        };
        write_file(&dir.join(&geo_name), &encode_pgm(&geo_img)?)?;
        let values: Vec<f64> = map.values().iter().map(|&v| v as f64).collect();
        write_file(&dir.join(&rm_name), &encode_pgm16(map.width(), map.height(), &values)?)?;
        entries.push(SampleEntry {
            index,
            seed: opts.sample_seed(index),
            tx: [geo.tx().0, geo.tx().1],
            geo: geo_name,
            rm: rm_name,
        });
    }

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        count: opts.count,
        height: opts.size,
        width: opts.size,
        cell_size_m: opts.cell_size_m,
        bit_depth: 16,
        channel: opts.channel,
        layout: opts.layout,
        master_seed: opts.master_seed,
        config: opts.config.clone(),
        samples: entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&dir.join(MANIFEST), json.as_bytes())?;
    Ok(manifest)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Dataset(format!("{}: {what}", path.display()))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let manifest: DatasetManifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| corrupt(&manifest_path, e))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(corrupt(
            &manifest_path,
            format_args!("unsupported format version {}", manifest.format_version),
        ));
    }
    if manifest.bit_depth != 16 {
        return Err(corrupt(&manifest_path, format_args!("bit depth {}", manifest.bit_depth)));
    }
    if manifest.samples.len() != manifest.count {
        return Err(corrupt(
            &manifest_path,
            format_args!("count {} but {} sample entries", manifest.count, manifest.samples.len()),
        ));
    }
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.count);
    for entry in &manifest.samples {
        let geo_path: PathBuf = dir.join(&entry.geo);
        let img = decode_pgm(&read_file(&geo_path)?).map_err(|e| corrupt(&geo_path, e))?;
        if (img.width, img.height, img.maxval) != (w, h, 255) {
            return Err(corrupt(
                &geo_path,
                format_args!("{}x{} maxval {}, expected {w}x{h} maxval 255", img.width, img.height, img.maxval),
            ));
        }
        let roi = img
            .samples
            .iter()
            .map(|&s| match s {
                255 => Ok(true),
                0 => Ok(false),
                other => Err(corrupt(&geo_path, format_args!("mask value {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let geo = GeoMap::new(h, w, manifest.cell_size_m, roi, (entry.tx[0], entry.tx[1]))
            .map_err(|e| corrupt(&geo_path, e))?;

        let rm_path = dir.join(&entry.rm);
        let (rw, rh, values) = decode_pgm16(&read_file(&rm_path)?).map_err(|e| corrupt(&rm_path, e))?;
        if (rw, rh) != (w, h) {
            return Err(corrupt(&rm_path, format_args!("{rw}x{rh}, expected {w}x{h}")));
        }
        let map = RadioMap::new(h, w, values.into_iter().map(|v| v as f32).collect())?;
        samples.push(Sample { geo, map });
    }
    Ok(Dataset { manifest, samples })
}
