//! Deterministic synthetic multi-modality ReID data.
//!
//! Each patient owns a fixed latent layout (Gaussian blobs + Bezier curves).
//! Every image renders that layout under one of several global modality
//! styles (monotone intensity transfer, noise texture, background field,
//! channel tint), with a small per-image jitter, so identity is recoverable
//! within and across styles.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ImageRecord, ImageSource};
use crate::error::{Error, Result};
use crate::imaging::PixelImage;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub n_modalities: usize,
    /// square image side, multiple of 16
    pub image_size: usize,
    pub seed: u64,
    /// first `scan_patients` patients are rendered as multi-slice scans
    pub scan_patients: usize,
    pub slices_per_scan: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 10,
            images_per_patient: 4,
            n_modalities: 2,
            image_size: 64,
            seed: 0,
            scan_patients: 0,
            slices_per_scan: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 2 {
            return Err(Error::Config("n_patients must be >= 2".into()));
        }
        if self.images_per_patient < 2 {
            return Err(Error::Config("images_per_patient must be >= 2".into()));
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if self.n_modalities == 0 {
            return Err(Error::Config("n_modalities must be >= 1".into()));
        }
        if self.scan_patients > self.n_patients {
            return Err(Error::Config("scan_patients exceeds n_patients".into()));
        }
        if self.scan_patients > 0 && self.slices_per_scan == 0 {
            return Err(Error::Config("slices_per_scan must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    /// normalized center
    pub cx: f32,
    pub cy: f32,
    /// normalized std-dev
    pub sigma: f32,
    pub amp: f32,
    /// normalized depth center for scans
    pub depth: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    /// quadratic Bezier control points, normalized
    pub pts: [(f32, f32); 3],
    /// normalized stroke std-dev
    pub thickness: f32,
    pub amp: f32,
    pub depth: f32,
}

/// The per-patient latent identity pattern, exposed for test introspection.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientLayout {
    pub blobs: Vec<Blob>,
    pub curves: Vec<Curve>,
}

pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub layouts: Vec<PatientLayout>,
}

fn mix(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(a.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(b.wrapping_mul(0x94d049bb133111eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn sub_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag, a, b))
}

pub fn patient_layout(cfg: &SynthConfig, patient: usize) -> PatientLayout {
    let mut rng = sub_rng(cfg.seed, 1, patient as u64, 0);
    let blobs = (0..5)
        .map(|_| Blob {
            cx: rng.random_range(0.15..0.85),
            cy: rng.random_range(0.15..0.85),
            sigma: rng.random_range(0.07..0.16),
            amp: rng.random_range(0.55..0.95),
            depth: rng.random_range(0.2..0.8),
        })
        .collect();
    let curves = (0..2)
        .map(|_| Curve {
            pts: [
                (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
                (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
                (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
            ],
            thickness: rng.random_range(0.020..0.045),
            amp: rng.random_range(0.6..0.95),
            depth: rng.random_range(0.2..0.8),
        })
        .collect();
    PatientLayout { blobs, curves }
}

/// Fixed global style parameters per modality index.
struct ModalityStyle {
    gamma: f32,
    lo: f32,
    hi: f32,
    noise_cells: usize,
    noise_amp: f32,
    grain_amp: f32,
    bg_amp: f32,
    tint: [f32; 3],
}

fn modality_style(m: usize) -> ModalityStyle {
    // deliberately far-apart styles so a style-blind model is penalized
    const TABLE: [ModalityStyle; 4] = [
        ModalityStyle {
            gamma: 0.45,
            lo: 0.30,
            hi: 1.00,
            noise_cells: 6,
            noise_amp: 0.10,
            grain_amp: 0.06,
            bg_amp: 0.35,
            tint: [1.0, 0.95, 0.90],
        },
        ModalityStyle {
            gamma: 1.8,
            lo: 0.05,
            hi: 1.00,
            noise_cells: 16,
            noise_amp: 0.16,
            grain_amp: 0.02,
            bg_amp: 0.20,
            tint: [0.55, 0.75, 1.0],
        },
        ModalityStyle {
            gamma: 1.0,
            lo: 0.15,
            hi: 0.90,
            noise_cells: 10,
            noise_amp: 0.06,
            grain_amp: 0.10,
            bg_amp: 0.50,
            tint: [0.85, 1.0, 0.70],
        },
        ModalityStyle {
            gamma: 2.6,
            lo: 0.10,
            hi: 1.00,
            noise_cells: 4,
            noise_amp: 0.12,
            grain_amp: 0.04,
            bg_amp: 0.30,
            tint: [1.0, 0.70, 0.85],
        },
    ];
    let base = &TABLE[m % TABLE.len()];
    // beyond 4 modalities, perturb gamma so styles stay distinct
    let extra = (m / TABLE.len()) as f32;
    ModalityStyle {
        gamma: base.gamma * (1.0 + 0.35 * extra),
        lo: base.lo,
        hi: base.hi,
        noise_cells: base.noise_cells,
        noise_amp: base.noise_amp,
        grain_amp: base.grain_amp,
        bg_amp: base.bg_amp,
        tint: base.tint,
    }
}

/// Seeded value noise: random grid values, bilinearly interpolated.
fn value_noise(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let g = cells + 2;
    let grid: Vec<f32> = (0..g * g).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut out = vec![0.0f32; size * size];
    let scale = cells as f32 / size as f32;
    for y in 0..size {
        let fy = y as f32 * scale;
        let y0 = fy.floor() as usize;
        let wy = fy - y0 as f32;
        for x in 0..size {
            let fx = x as f32 * scale;
            let x0 = fx.floor() as usize;
            let wx = fx - x0 as f32;
            let v = grid[y0 * g + x0] * (1.0 - wy) * (1.0 - wx)
                + grid[y0 * g + x0 + 1] * (1.0 - wy) * wx
                + grid[(y0 + 1) * g + x0] * wy * (1.0 - wx)
                + grid[(y0 + 1) * g + x0 + 1] * wy * wx;
            out[y * size + x] = v;
        }
    }
    out
}

fn depth_weight(center: f32, depth: Option<f32>) -> f32 {
    match depth {
        None => 1.0,
        Some(d) => {
            let z = (d - center) / 0.28;
            (-0.5 * z * z).exp()
        }
    }
}

/// Renders the identity pattern (grayscale accumulation in [0, ~1]).
fn render_pattern(
    layout: &PatientLayout,
    size: usize,
    jitter_px: (f32, f32),
    depth: Option<f32>,
) -> Vec<f32> {
    let s = size as f32;
    // depth sweep: the whole pattern drifts along x through the scan
    let sweep = depth.map_or(0.0, |d| 3.0 * (d - 0.5));
    let (jx, jy) = (jitter_px.0 + sweep, jitter_px.1);
    let mut pat = vec![0.0f32; size * size];

    for b in &layout.blobs {
        let amp = b.amp * depth_weight(b.depth, depth);
        if amp < 1e-3 {
            continue;
        }
        let cx = b.cx * s + jx;
        let cy = b.cy * s + jy;
        let sig = b.sigma * s;
        let r = (3.0 * sig).ceil() as isize;
        let (icx, icy) = (cx.round() as isize, cy.round() as isize);
        for y in (icy - r).max(0)..=(icy + r).min(size as isize - 1) {
            for x in (icx - r).max(0)..=(icx + r).min(size as isize - 1) {
                let dx = x as f32 - cx;
                let dy = y as f32 - cy;
                let v = amp * (-(dx * dx + dy * dy) / (2.0 * sig * sig)).exp();
                pat[y as usize * size + x as usize] += v;
            }
        }
    }

    for c in &layout.curves {
        let amp = c.amp * depth_weight(c.depth, depth);
        if amp < 1e-3 {
            continue;
        }
        let thick = c.thickness * s;
        let r = (3.0 * thick).ceil().max(1.0) as isize;
        let steps = 3 * size;
        for i in 0..=steps {
            let t = i as f32 / steps as f32;
            let u = 1.0 - t;
            let px = (u * u * c.pts[0].0 + 2.0 * u * t * c.pts[1].0 + t * t * c.pts[2].0) * s + jx;
            let py = (u * u * c.pts[0].1 + 2.0 * u * t * c.pts[1].1 + t * t * c.pts[2].1) * s + jy;
            let (icx, icy) = (px.round() as isize, py.round() as isize);
            for y in (icy - r).max(0)..=(icy + r).min(size as isize - 1) {
                for x in (icx - r).max(0)..=(icx + r).min(size as isize - 1) {
                    let dx = x as f32 - px;
                    let dy = y as f32 - py;
                    let v = amp * (-(dx * dx + dy * dy) / (2.0 * thick * thick)).exp();
                    let cell = &mut pat[y as usize * size + x as usize];
                    // stroke: take max so dense sampling does not over-accumulate
                    *cell = cell.max(v);
                }
            }
        }
    }

    for v in &mut pat {
        *v = v.min(1.0);
    }
    pat
}

/// Renders one image of `patient` deterministically. `depth` is `None` for
/// single images, `Some(slice/(S-1))` for scan slices.
pub fn render_image(
    cfg: &SynthConfig,
    layout: &PatientLayout,
    modality: usize,
    patient: usize,
    image_idx: usize,
    depth: Option<f32>,
) -> PixelImage {
    let size = cfg.image_size;
    let style = modality_style(modality);

    let mut jit_rng = sub_rng(cfg.seed, 2, patient as u64, image_idx as u64);
    let jitter = (jit_rng.random_range(-2.0..2.0), jit_rng.random_range(-2.0..2.0));

    let pat = render_pattern(layout, size, jitter, depth);

    // per-image stochastic fields, modality-styled
    let slice_tag = depth.map_or(0, |d| (d * 1e4) as u64);
    let mut field_rng = sub_rng(
        cfg.seed,
        3,
        mix(cfg.seed, 4, patient as u64, image_idx as u64),
        slice_tag,
    );
    let bg = value_noise(size, 3, &mut field_rng);
    let tex = value_noise(size, style.noise_cells, &mut field_rng);

    let mut img = PixelImage::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let g = (0.9 * pat[i] + style.bg_amp * (bg[i] - 0.5)).clamp(0.0, 1.0);
            let transferred = style.lo + (style.hi - style.lo) * g.powf(style.gamma);
            let grain: f32 = field_rng.random_range(-0.5..0.5);
            let v = transferred + style.noise_amp * (tex[i] - 0.5) + style.grain_amp * grain;
            for c in 0..3 {
                img.set(c, y, x, (v * style.tint[c]).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Renders all pixel planes for one record (one image, or S slices).
pub fn render_record(
    cfg: &SynthConfig,
    layout: &PatientLayout,
    modality: usize,
    patient: usize,
    image_idx: usize,
    multi_slice: bool,
) -> Vec<PixelImage> {
    if multi_slice {
        let s_total = cfg.slices_per_scan;
        (0..s_total)
            .map(|s| {
                let d = if s_total == 1 { 0.5 } else { s as f32 / (s_total - 1) as f32 };
                render_image(cfg, layout, modality, patient, image_idx, Some(d))
            })
            .collect()
    } else {
        vec![render_image(cfg, layout, modality, patient, image_idx, None)]
    }
}

/// Generates the dataset under `out_dir` (`images/` subtree + in-memory
/// manifest). Pure function of `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir)?;

    let mut records = Vec::new();
    let mut layouts = Vec::new();
    for p in 0..cfg.n_patients {
        let layout = patient_layout(cfg, p);
        let multi = p < cfg.scan_patients;
        let pid = format!("p{p:03}");
        for i in 0..cfg.images_per_patient {
            let modality = i % cfg.n_modalities;
            let rid = format!("{pid}_i{i:02}");
            let planes = render_record(cfg, &layout, modality, p, i, multi);
            let source = if multi {
                let dir = img_dir.join(&rid);
                std::fs::create_dir_all(&dir)?;
                let mut paths = Vec::new();
                for (s, plane) in planes.iter().enumerate() {
                    let path = dir.join(format!("slice_{s:03}.png"));
                    plane.save_png(&path)?;
                    paths.push(path);
                }
                ImageSource::Slices(paths)
            } else {
                let path = img_dir.join(format!("{rid}.png"));
                planes[0].save_png(&path)?;
                ImageSource::Single(path)
            };
            records.push(ImageRecord {
                id: rid,
                patient_id: pid.clone(),
                modality_label: format!("synth{modality}"),
                source,
                split: None,
            });
        }
        layouts.push(layout);
    }
    Ok(SynthOutput {
        manifest: DatasetManifest::from_records(records),
        layouts,
    })
}
