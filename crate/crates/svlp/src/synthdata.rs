//! Deterministic synthetic multi-domain spoof-data generator and the binary
//! dataset format.
//!
//! Bona fide samples are smooth multi-blob patterns; spoof samples composite
//! a domain-specific artifact (grating, flat patch, or border frame) onto the
//! same pattern before the domain transform is applied. Domains differ in
//! artifact parameters and in photometric transform (brightness, contrast,
//! noise, tint), which is what makes them separable for routing. Every image
//! is clamped to [0, 1]. Generation depends only on the spec (including its
//! seed), never on the platform or clock.
//!
//! Dataset directory layout: `<root>/<domain>/{train,test}.svds` plus
//! `<root>/manifest.txt` with one domain name per line; manifest order defines
//! the incremental sequence.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 1;

pub const DATASET_MAGIC: &[u8; 4] = b"SVDS";
pub const DATASET_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Spoof artifact compositing rule.
#[derive(Debug, Clone, PartialEq)]
pub enum ArtifactKind {
    /// Rectified stripes, a texture overlay that lightens along one
    /// orientation: `intensity * |sin(2 pi freq (u cos a + v sin a) + phase)|`.
    Grating {
        freq: f64,
        angle_deg: f64,
        intensity: f64,
    },
    /// Square region blended toward a flat level; vanishes at intensity 0.
    FlatPatch { size: usize, intensity: f64 },
    /// Additive ring of the given width around the image border.
    BorderFrame { width: usize, intensity: f64 },
}

/// Photometric domain shift applied to every sample of a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub tint: f64,
}

/// Everything needed to generate one domain deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub blob_count: usize,
    pub blob_radius: (f64, f64),
    pub artifact: ArtifactKind,
    pub transform: DomainTransform,
    /// Fraction of real samples; counts stay within one sample of it.
    pub balance: f64,
}

/// Labeled sample stream for one domain and split.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub split: String,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// n * channels * height * width values, row-major.
    pub pixels: Vec<f32>,
    /// 0 = spoof, 1 = real.
    pub labels: Vec<u8>,
    /// 1-based manifest position; assigned by the loader, not persisted.
    pub domain_tag: usize,
}

impl DomainDataset {
    pub fn sample(&self, i: usize) -> (&[f32], usize) {
        let stride = self.channels * self.height * self.width;
        (&self.pixels[i * stride..(i + 1) * stride], self.labels[i] as usize)
    }

    pub fn tags(&self) -> Vec<usize> {
        vec![self.domain_tag; self.n]
    }
}

fn render_sample(spec: &DomainSpec, rng: &mut SplitMix64, spoof: bool) -> Vec<f32> {
    let side = IMAGE_SIDE;
    let mut img = vec![0.5f64; side * side];

    // smooth multi-blob bona fide pattern
    for b in 0..spec.blob_count {
        let cx = rng.uniform(4.0, side as f64 - 4.0);
        let cy = rng.uniform(4.0, side as f64 - 4.0);
        let sigma = rng.uniform(spec.blob_radius.0, spec.blob_radius.1);
        let amp = rng.uniform(0.2, 0.45) * if b % 2 == 0 { 1.0 } else { -1.0 };
        for y in 0..side {
            for x in 0..side {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                img[y * side + x] += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    // artifact parameters are drawn for every sample so the two classes
    // consume identical stream positions; only spoofs composite the artifact
    let artifact_u = (rng.next_f64(), rng.next_f64(), rng.next_f64());
    if spoof {
        match &spec.artifact {
            ArtifactKind::Grating {
                freq,
                angle_deg,
                intensity,
            } => {
                let theta = angle_deg.to_radians();
                let phase = artifact_u.0 * std::f64::consts::TAU;
                for y in 0..side {
                    for x in 0..side {
                        let u = x as f64 / side as f64;
                        let v = y as f64 / side as f64;
                        let t = std::f64::consts::TAU * freq * (u * theta.cos() + v * theta.sin());
                        img[y * side + x] += intensity * (t + phase).sin().abs();
                    }
                }
            }
            ArtifactKind::FlatPatch { size, intensity } => {
                let size = (*size).min(side);
                let max_off = (side - size) as f64;
                let ox = (artifact_u.0 * max_off).floor() as usize;
                let oy = (artifact_u.1 * max_off).floor() as usize;
                let beta = (intensity * 2.5).min(1.0);
                let level = 0.5 + intensity;
                for y in oy..oy + size {
                    for x in ox..ox + size {
                        let p = &mut img[y * side + x];
                        *p = (1.0 - beta) * *p + beta * level;
                    }
                }
            }
            ArtifactKind::BorderFrame { width, intensity } => {
                let w = (*width).min(side / 2);
                for y in 0..side {
                    for x in 0..side {
                        let on_border =
                            y < w || x < w || y >= side - w || x >= side - w;
                        if on_border {
                            img[y * side + x] += intensity;
                        }
                    }
                }
            }
        }
    }

    // domain transform, then clamp
    let t = &spec.transform;
    img.iter()
        .map(|p| {
            let v = t.tint * t.contrast * (p - 0.5) + 0.5 + t.brightness
                + t.noise_sigma * rng.normal();
            v.clamp(0.0, 1.0) as f32
        })
        .collect()
}

fn generate_split(spec: &DomainSpec, split: &str, n: usize) -> Result<DomainDataset> {
    if n == 0 && spec.n_train == 0 && spec.n_test == 0 {
        return Err(Error::Dataset(format!(
            "domain `{}` has no samples at all",
            spec.name
        )));
    }
    let mut rng = SplitMix64::new(derive_seed(spec.seed, split));
    let mut pixels = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    let mut labels = Vec::with_capacity(n);
    let mut reals = 0usize;
    for i in 0..n {
        let real = (reals as f64) < spec.balance * (i as f64 + 1.0);
        if real {
            reals += 1;
        }
        labels.push(real as u8);
        pixels.extend(render_sample(spec, &mut rng, !real));
    }
    Ok(DomainDataset {
        name: spec.name.clone(),
        split: split.to_string(),
        n,
        channels: CHANNELS,
        height: IMAGE_SIDE,
        width: IMAGE_SIDE,
        pixels,
        labels,
        domain_tag: 0,
    })
}

/// Generate the train/test pair for one domain spec.
pub fn generate(spec: &DomainSpec) -> Result<(DomainDataset, DomainDataset)> {
    if spec.blob_radius.0 <= 0.0 || spec.blob_radius.1 < spec.blob_radius.0 {
        return Err(Error::Dataset(format!(
            "domain `{}` has a degenerate blob radius range",
            spec.name
        )));
    }
    let train = generate_split(spec, "train", spec.n_train)?;
    let test = generate_split(spec, "test", spec.n_test)?;
    Ok((train, test))
}

// ---- binary dataset format -----------------------------------------------

pub fn encode_dataset(ds: &DomainDataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + ds.pixels.len() * 4 + ds.labels.len());
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [ds.n, ds.channels, ds.height, ds.width] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for p in &ds.pixels {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf.extend_from_slice(&ds.labels);
    buf
}

pub fn decode_dataset(buf: &[u8], name: &str, split: &str) -> Result<DomainDataset> {
    let need = |at: usize, n: usize, what: &str| -> Result<()> {
        if at + n > buf.len() {
            return Err(Error::Dataset(format!(
                "truncated dataset while reading {what}: expected at least {} bytes, file has {}",
                at + n,
                buf.len()
            )));
        }
        Ok(())
    };
    need(0, 24, "header")?;
    if &buf[0..4] != DATASET_MAGIC {
        return Err(Error::Dataset(format!(
            "bad dataset magic {:?}, expected {:?}",
            &buf[0..4],
            DATASET_MAGIC
        )));
    }
    let u32_at = |at: usize| u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]]);
    let version = u32_at(4);
    if version != DATASET_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported dataset version {version}, expected {DATASET_VERSION}"
        )));
    }
    let n = u32_at(8) as usize;
    let channels = u32_at(12) as usize;
    let height = u32_at(16) as usize;
    let width = u32_at(20) as usize;
    let n_pixels = n * channels * height * width;
    let expected = 24 + n_pixels * 4 + n;
    if buf.len() != expected {
        return Err(Error::Dataset(format!(
            "truncated dataset: expected {expected} bytes for {n} samples, file has {}",
            buf.len()
        )));
    }
    let mut pixels = Vec::with_capacity(n_pixels);
    let mut at = 24;
    for _ in 0..n_pixels {
        pixels.push(f32::from_le_bytes([
            buf[at],
            buf[at + 1],
            buf[at + 2],
            buf[at + 3],
        ]));
        at += 4;
    }
    let labels = buf[at..at + n].to_vec();
    Ok(DomainDataset {
        name: name.to_string(),
        split: split.to_string(),
        n,
        channels,
        height,
        width,
        pixels,
        labels,
        domain_tag: 0,
    })
}

pub fn write_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path, name: &str, split: &str) -> Result<DomainDataset> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&buf, name, split)
}

// ---- directory layout ------------------------------------------------------

/// Write every domain of a preset under `root` plus the manifest.
pub fn write_dataset_dir(specs: &[DomainSpec], root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = String::new();
    for spec in specs {
        let (train, test) = generate(spec)?;
        let dir = root.join(&spec.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_dataset(&train, &dir.join("train.svds"))?;
        write_dataset(&test, &dir.join("test.svds"))?;
        manifest.push_str(&spec.name);
        manifest.push('\n');
    }
    let mpath = root.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Domain names in incremental order.
pub fn read_manifest(root: &Path) -> Result<Vec<String>> {
    let mpath = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let names: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::Dataset("manifest lists no domains".to_string()));
    }
    Ok(names)
}

/// Load one domain's splits, tagging samples with its 1-based manifest
/// position.
pub fn load_domain(root: &Path, name: &str, tag: usize) -> Result<(DomainDataset, DomainDataset)> {
    let dir = root.join(name);
    let mut train = read_dataset(&dir.join("train.svds"), name, "train")?;
    let mut test = read_dataset(&dir.join("test.svds"), name, "test")?;
    train.domain_tag = tag;
    test.domain_tag = tag;
    Ok((train, test))
}

// ---- presets ---------------------------------------------------------------

pub const PRESETS: [&str; 3] = ["protocol-synth-4", "protocol-synth-8", "synth-unseen"];

fn spec(
    name: &str,
    seed: u64,
    artifact: ArtifactKind,
    transform: (f64, f64, f64, f64),
) -> DomainSpec {
    DomainSpec {
        name: name.to_string(),
        seed,
        n_train: 192,
        n_test: 128,
        blob_count: 3,
        blob_radius: (3.0, 7.0),
        artifact,
        transform: DomainTransform {
            brightness: transform.0,
            contrast: transform.1,
            noise_sigma: transform.2,
            tint: transform.3,
        },
        balance: 0.5,
    }
}

fn base_domains() -> Vec<DomainSpec> {
    vec![
        spec(
            "synth-a",
            101,
            ArtifactKind::Grating {
                freq: 4.0,
                angle_deg: 0.0,
                intensity: 0.35,
            },
            (-0.10, 0.90, 0.02, 1.00),
        ),
        spec(
            "synth-b",
            202,
            ArtifactKind::FlatPatch {
                size: 10,
                intensity: 0.30,
            },
            (0.12, 1.15, 0.03, 0.90),
        ),
        spec(
            "synth-c",
            303,
            ArtifactKind::BorderFrame {
                width: 3,
                intensity: 0.35,
            },
            (-0.02, 1.30, 0.04, 1.10),
        ),
        spec(
            "synth-d",
            404,
            ArtifactKind::Grating {
                freq: 8.0,
                angle_deg: 45.0,
                intensity: 0.25,
            },
            (0.06, 0.75, 0.05, 0.95),
        ),
    ]
}

/// Named dataset presets: a four-domain incremental sequence, an eight-domain
/// long sequence with escalating (subtler) artifacts, and a held-out domain
/// for generalization probes.
pub fn preset(name: &str) -> Result<Vec<DomainSpec>> {
    match name {
        "protocol-synth-4" => Ok(base_domains()),
        "protocol-synth-8" => {
            let mut specs = base_domains();
            specs.push(spec(
                "synth-e",
                505,
                ArtifactKind::FlatPatch {
                    size: 7,
                    intensity: 0.24,
                },
                (-0.16, 1.05, 0.03, 1.05),
            ));
            specs.push(spec(
                "synth-f",
                606,
                ArtifactKind::BorderFrame {
                    width: 2,
                    intensity: 0.24,
                },
                (0.16, 0.85, 0.04, 0.85),
            ));
            specs.push(spec(
                "synth-g",
                707,
                ArtifactKind::Grating {
                    freq: 12.0,
                    angle_deg: 90.0,
                    intensity: 0.20,
                },
                (0.0, 1.20, 0.05, 1.15),
            ));
            specs.push(spec(
                "synth-h",
                808,
                ArtifactKind::FlatPatch {
                    size: 5,
                    intensity: 0.20,
                },
                (-0.06, 0.95, 0.06, 1.00),
            ));
            Ok(specs)
        }
        "synth-unseen" => Ok(vec![spec(
            "synth-unseen",
            909,
            ArtifactKind::Grating {
                freq: 6.0,
                angle_deg: 30.0,
                intensity: 0.30,
            },
            (0.02, 1.00, 0.03, 1.02),
        )]),
        other => Err(Error::Config(format!(
            "unknown preset `{other}`; valid presets: {}",
            PRESETS.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DomainSpec {
        let mut s = preset("protocol-synth-4").unwrap().remove(0);
        s.n_train = 24;
        s.n_test = 16;
        s
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = small_spec();
        let (a_train, a_test) = generate(&spec).unwrap();
        let (b_train, b_test) = generate(&spec).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
    }

    #[test]
    fn pixels_stay_in_unit_range_and_balance_holds() {
        for spec in preset("protocol-synth-8").unwrap() {
            let mut spec = spec;
            spec.n_train = 33; // odd count: balance within one sample
            let (train, _) = generate(&spec).unwrap();
            assert!(train.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            let reals = train.labels.iter().filter(|l| **l == 1).count() as f64;
            assert!((reals - spec.balance * 33.0).abs() <= 1.0);
        }
    }

    #[test]
    fn roundtrip_is_bitwise_equal() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = generate(&small_spec()).unwrap();
        let path = dir.path().join("t.svds");
        write_dataset(&train, &path).unwrap();
        let loaded = read_dataset(&path, &train.name, &train.split).unwrap();
        assert_eq!(train, loaded);
        let bytes_a = encode_dataset(&train);
        let bytes_b = encode_dataset(&loaded);
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn truncated_file_reports_expected_and_actual_sizes() {
        let (train, _) = generate(&small_spec()).unwrap();
        let bytes = encode_dataset(&train);
        let err = decode_dataset(&bytes[..bytes.len() - 5], "x", "train").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected"), "{msg}");
        assert!(msg.contains(&format!("{}", bytes.len() - 5)), "{msg}");
    }

    #[test]
    fn empty_dataset_is_a_valid_header_only_file() {
        let ds = DomainDataset {
            name: "empty".into(),
            split: "train".into(),
            n: 0,
            channels: 1,
            height: 32,
            width: 32,
            pixels: vec![],
            labels: vec![],
            domain_tag: 0,
        };
        let bytes = encode_dataset(&ds);
        assert_eq!(bytes.len(), 24, "header is magic + five u32 fields");
        let loaded = decode_dataset(&bytes, "empty", "train").unwrap();
        assert_eq!(loaded.n, 0);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let (train, _) = generate(&small_spec()).unwrap();
        let mut bytes = encode_dataset(&train);
        bytes[1] = b'X';
        assert!(decode_dataset(&bytes, "x", "train").is_err());
    }

    #[test]
    fn directory_layout_and_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut specs = preset("protocol-synth-4").unwrap();
        for s in &mut specs {
            s.n_train = 8;
            s.n_test = 8;
        }
        write_dataset_dir(&specs, dir.path()).unwrap();
        let names = read_manifest(dir.path()).unwrap();
        assert_eq!(names, vec!["synth-a", "synth-b", "synth-c", "synth-d"]);
        let (train, test) = load_domain(dir.path(), "synth-b", 2).unwrap();
        assert_eq!(train.domain_tag, 2);
        assert_eq!(test.n, 8);
    }

    #[test]
    fn unknown_preset_names_the_valid_ones() {
        let err = preset("bogus").unwrap_err();
        assert!(err.to_string().contains("protocol-synth-4"));
    }

    #[test]
    fn zero_intensity_artifacts_are_indistinguishable() {
        // with the artifact silenced, a logistic probe on raw pixels should
        // sit near chance AUC on held-out data
        let mut spec = small_spec();
        spec.n_train = 160;
        spec.n_test = 120;
        spec.artifact = ArtifactKind::Grating {
            freq: 4.0,
            angle_deg: 0.0,
            intensity: 0.0,
        };
        let (train, test) = generate(&spec).unwrap();
        let auc = probe_auc(&train, &test);
        assert!(
            (auc - 0.5).abs() <= 0.1,
            "probe AUC {auc} should be near chance"
        );
        // sanity: with the artifact on, spoofs carry visibly more
        // high-frequency energy than bona fide samples (phase-invariant
        // statistic, since grating phase is random per sample)
        let mut visible = spec.clone();
        visible.artifact = ArtifactKind::Grating {
            freq: 4.0,
            angle_deg: 0.0,
            intensity: 0.35,
        };
        let (train, _) = generate(&visible).unwrap();
        let mut energy = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for i in 0..train.n {
            let (px, label) = train.sample(i);
            let mut e = 0.0;
            for row in px.chunks(IMAGE_SIDE) {
                for pair in row.windows(2) {
                    let d = (pair[1] - pair[0]) as f64;
                    e += d * d;
                }
            }
            energy[label] += e;
            counts[label] += 1;
        }
        let real_e = energy[1] / counts[1] as f64;
        let spoof_e = energy[0] / counts[0] as f64;
        assert!(
            spoof_e > 2.0 * real_e,
            "spoof high-frequency energy {spoof_e} vs real {real_e}"
        );
    }

    /// Tiny logistic-regression probe on raw pixels: fresh weights, plain
    /// gradient descent, AUC on the held-out split.
    fn probe_auc(train: &DomainDataset, test: &DomainDataset) -> f64 {
        let dim = train.channels * train.height * train.width;
        let mut w = vec![0.0f64; dim];
        let mut b = 0.0f64;
        let lr = 0.05;
        for _ in 0..60 {
            let mut gw = vec![0.0f64; dim];
            let mut gb = 0.0f64;
            for i in 0..train.n {
                let (px, label) = train.sample(i);
                let z: f64 = px
                    .iter()
                    .zip(&w)
                    .map(|(p, wi)| *p as f64 * wi)
                    .sum::<f64>()
                    + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - label as f64;
                for (g, px) in gw.iter_mut().zip(px) {
                    *g += err * *px as f64;
                }
                gb += err;
            }
            let inv = 1.0 / train.n as f64;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= lr * g * inv;
            }
            b -= lr * gb * inv;
        }
        let mut scores = crate::metrics::ScoreSet::default();
        for i in 0..test.n {
            let (px, label) = test.sample(i);
            let z: f64 = px
                .iter()
                .zip(&w)
                .map(|(p, wi)| *p as f64 * wi)
                .sum::<f64>()
                + b;
            scores
                .push(crate::metrics::ScoredSample {
                    score: 1.0 / (1.0 + (-z).exp()),
                    label,
                    domain: 1,
                    routed: Some(1),
                })
                .unwrap();
        }
        crate::metrics::auc(&scores).unwrap()
    }
}
