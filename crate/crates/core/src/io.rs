//! File formats: 8-bit grayscale PNG for images and probability masks,
//! 16-bit single-channel PNG for instance maps (label id = pixel value),
//! the portable float raster for density maps (one ASCII header line
//! `H W`, then H*W little-endian f32 values), `x,y` points CSV and the
//! on-disk dataset layout `<root>/<domain>/{imgNNN,instNNN,ptsNNN}.*`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};

use crate::decoder::SemanticMask;
use crate::error::{Error, Result};
use crate::instance::InstanceMap;
use crate::prompt::{centroids_from_instances, DensityMap, PointPromptSet};
use crate::synth::{DomainDataset, Sample};
use crate::tensor::Tensor;

fn img_err(e: image::ImageError) -> Error {
    Error::Parse(format!("image: {e}"))
}

/// Save a single-channel `[1,H,W]` image in `[0,1]` as 8-bit grayscale.
pub fn save_image_png(image: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(Error::Shape(format!("save_image_png: expected 1 channel, got {c}")));
    }
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = image.at3(0, y as usize, x as usize);
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).map_err(img_err)
}

/// Load an 8-bit grayscale PNG as `[1,H,W]` in `[0,1]`.
pub fn load_image_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(img_err)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn(&[1, h as usize, w as usize], |i| {
        let (y, x) = (i / w as usize, i % w as usize);
        img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    }))
}

/// Probability raster of one category as 8-bit grayscale (probability*255).
pub fn save_probability_png(mask: &SemanticMask, category: usize, path: &Path) -> Result<()> {
    let (c, h, w) = mask.probs.dims3()?;
    if category >= c {
        return Err(Error::Shape(format!(
            "save_probability_png: category {category} out of {c}"
        )));
    }
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = mask.probs.at3(category, y as usize, x as usize);
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).map_err(img_err)
}

/// Binary mask at the configured threshold (union over categories), 0/255.
pub fn save_binary_png(mask: &SemanticMask, path: &Path) -> Result<()> {
    let bin = mask.binary_union()?;
    let (h, w) = bin.dims2()?;
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if bin.data()[y as usize * w + x as usize] > 0.5 {
            255u8
        } else {
            0
        }])
    });
    buf.save(path).map_err(img_err)
}

/// Instance map as 16-bit single-channel PNG; label ids above 65535 cannot
/// be represented.
pub fn save_instance_png(inst: &InstanceMap, path: &Path) -> Result<()> {
    let max = inst.labels().iter().copied().max().unwrap_or(0);
    if max > u16::MAX as u32 {
        return Err(Error::Config(format!(
            "instance map has label {max}, 16-bit PNG holds at most 65535"
        )));
    }
    let (h, w) = (inst.height(), inst.width());
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([inst.at(y as usize, x as usize) as u16])
        });
    buf.save(path).map_err(img_err)
}

pub fn load_instance_png(path: &Path) -> Result<InstanceMap> {
    let img = image::open(path).map_err(img_err)?;
    let (labels, w, h) = match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            (
                buf.pixels().map(|p| p[0] as u32).collect::<Vec<_>>(),
                w,
                h,
            )
        }
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            (
                buf.pixels().map(|p| p[0] as u32).collect::<Vec<_>>(),
                w,
                h,
            )
        }
        other => {
            let buf = other.into_luma16();
            let (w, h) = buf.dimensions();
            (
                buf.pixels().map(|p| p[0] as u32).collect::<Vec<_>>(),
                w,
                h,
            )
        }
    };
    InstanceMap::from_labels(h as usize, w as usize, labels)
}

/// Sidecar table `label,area,centroid_x,centroid_y` (centroids as pixel
/// means with two decimals).
pub fn save_instance_sidecar_csv(inst: &InstanceMap, path: &Path) -> Result<()> {
    let (h, w) = (inst.height(), inst.width());
    let _ = h;
    let max = inst.labels().iter().copied().max().unwrap_or(0) as usize;
    let mut area = vec![0usize; max + 1];
    let mut sx = vec![0.0f64; max + 1];
    let mut sy = vec![0.0f64; max + 1];
    for (i, &l) in inst.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        area[l as usize] += 1;
        sx[l as usize] += (i % w) as f64;
        sy[l as usize] += (i / w) as f64;
    }
    let mut out = String::from("label,area,centroid_x,centroid_y\n");
    for l in 1..=max {
        if area[l] == 0 {
            continue;
        }
        out.push_str(&format!(
            "{l},{},{:.2},{:.2}\n",
            area[l],
            sx[l] / area[l] as f64,
            sy[l] / area[l] as f64
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Portable float raster: ASCII header line `H W`, then H*W little-endian
/// f32 values in row-major order.
pub fn save_density(d: &DensityMap, path: &Path) -> Result<()> {
    let (h, w) = d.raster.dims2()?;
    let mut out = Vec::with_capacity(16 + h * w * 4);
    out.extend_from_slice(format!("{h} {w}\n").as_bytes());
    for v in d.raster.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_density(path: &Path, radius: usize, sigma: f64) -> Result<DensityMap> {
    let mut file = std::fs::File::open(path)?;
    let mut header = Vec::new();
    // read up to the first newline
    let mut byte = [0u8; 1];
    loop {
        file.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 64 {
            return Err(Error::Parse("density header too long".into()));
        }
    }
    let header = String::from_utf8(header).map_err(|_| Error::Parse("bad density header".into()))?;
    let mut parts = header.split_whitespace();
    let h: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("density header: missing H".into()))?;
    let w: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("density header: missing W".into()))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != h * w * 4 {
        return Err(Error::Parse(format!(
            "density payload: expected {} bytes, got {}",
            h * w * 4,
            raw.len()
        )));
    }
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(DensityMap {
        raster: Tensor::new(vec![h, w], data)?,
        radius,
        sigma,
    })
}

/// 8-bit preview of a density map, normalized to its maximum.
pub fn save_density_preview_png(d: &DensityMap, path: &Path) -> Result<()> {
    let (h, w) = d.raster.dims2()?;
    let max = d.raster.data().iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(d.raster.data()[y as usize * w + x as usize] * scale).round() as u8])
    });
    buf.save(path).map_err(img_err)
}

/// Points CSV: header `x,y`, one integer pixel coordinate pair per row.
pub fn save_points_csv(pts: &PointPromptSet, path: &Path) -> Result<()> {
    let mut out = String::from("x,y\n");
    for &(x, y) in &pts.points {
        out.push_str(&format!("{x},{y}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_points_csv(path: &Path, width: usize, height: usize) -> Result<PointPromptSet> {
    let file = std::fs::File::open(path)?;
    let mut points = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("x,y")) {
            continue;
        }
        let (x, y) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("points line {}: expected x,y", lineno + 1)))?;
        let x: usize = x
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("points line {}: bad x '{x}'", lineno + 1)))?;
        let y: usize = y
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("points line {}: bad y '{y}'", lineno + 1)))?;
        points.push((x, y));
    }
    PointPromptSet::new(points, width, height)
}

/// Write a domain as `<root>/<domain>/imgNNN.png` + `instNNN.png` +
/// `ptsNNN.csv` triples.
pub fn save_domain(dataset: &DomainDataset, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&dataset.domain_id);
    std::fs::create_dir_all(&dir)?;
    for (i, s) in dataset.samples.iter().enumerate() {
        save_image_png(&s.image, &dir.join(format!("img{i:03}.png")))?;
        save_instance_png(&s.instances, &dir.join(format!("inst{i:03}.png")))?;
        save_instance_sidecar_csv(&s.instances, &dir.join(format!("inst{i:03}.csv")))?;
        save_points_csv(&s.points, &dir.join(format!("pts{i:03}.csv")))?;
    }
    Ok(dir)
}

/// Load a domain directory written by [`save_domain`] (or hand-assembled in
/// the same shape). Missing points files fall back to instance centroids.
pub fn load_domain(dir: &Path) -> Result<DomainDataset> {
    let domain_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Parse(format!("bad domain directory {}", dir.display())))?
        .to_string();
    let mut indices: Vec<usize> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name.strip_prefix("img") {
            if let Some(num) = rest.strip_suffix(".png") {
                if let Ok(i) = num.parse() {
                    indices.push(i);
                }
            }
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::Parse(format!(
            "no imgNNN.png files in {}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(indices.len());
    for i in indices {
        let image = load_image_png(&dir.join(format!("img{i:03}.png")))?;
        let instances = load_instance_png(&dir.join(format!("inst{i:03}.png")))?;
        let pts_path = dir.join(format!("pts{i:03}.csv"));
        let points = if pts_path.exists() {
            load_points_csv(&pts_path, instances.width(), instances.height())?
        } else {
            centroids_from_instances(&instances)?
        };
        samples.push(Sample {
            domain: domain_id.clone(),
            image,
            instances,
            points,
        });
    }
    Ok(DomainDataset {
        domain_id,
        samples,
        seed: 0,
    })
}
