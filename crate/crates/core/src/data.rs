//! Image datasets: IDX and CSV loaders, synthetic blobs, resizing.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::PatchGrid;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images in `[0, 1]` with optional ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n × C × H × W`.
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub name: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", format!("images must be n x C x H x W, got {:?}", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(Error::shape(
                    "dataset",
                    format!("{} labels for {} images", l.len(), images.rows()),
                ));
            }
        }
        Ok(Dataset {
            images,
            labels,
            name: name.into(),
            provenance: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.channels(), self.height(), self.width())
    }

    /// Keeps the listed rows in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::invalid("subset would be empty"));
        }
        Ok(Dataset {
            images: self.images.select_rows(indices)?,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            name: self.name.clone(),
            provenance: self.provenance.clone(),
        })
    }

    /// Keeps only samples whose label is listed, in original order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("class selection needs labels"))?;
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&labels[i])).collect();
        self.subset(&keep)
    }

    /// Keeps at most `per_class` samples of each label (or the first `per_class` when unlabeled).
    pub fn limit_per_class(&self, per_class: usize) -> Result<Dataset> {
        let keep: Vec<usize> = match &self.labels {
            None => (0..self.len().min(per_class)).collect(),
            Some(labels) => {
                let mut seen = std::collections::HashMap::new();
                (0..self.len())
                    .filter(|&i| {
                        let c = seen.entry(labels[i]).or_insert(0usize);
                        *c += 1;
                        *c <= per_class
                    })
                    .collect()
            }
        };
        self.subset(&keep)
    }

    /// Bilinear resize of every image.
    pub fn resized(&self, height: usize, width: usize) -> Result<Dataset> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let mut data = Vec::with_capacity(self.len() * c * height * width);
        for i in 0..self.len() {
            let img = Tensor::new(vec![c, h, w], self.images.row(i).to_vec())?;
            data.extend(resize_pad(&img, height, width)?.into_data());
        }
        Ok(Dataset {
            images: Tensor::new(vec![self.len(), c, height, width], data)?,
            labels: self.labels.clone(),
            name: self.name.clone(),
            provenance: format!("{}; resized to {}x{}", self.provenance, height, width),
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header: {} bytes", bytes.len())))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::format(
            path,
            format!("bad IDX magic 0x{:08x}, expected 0x{:08x}", magic, expected),
        ));
    }
    Ok(())
}

/// Parses an IDX image file (and optional label file); pixels are divided by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: Option<&Path>) -> Result<Dataset> {
    let path = images_path.as_ref();
    let bytes = read_file(path)?;
    check_magic(&bytes, IDX_IMAGES, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let h = be_u32(&bytes, 8, path)? as usize;
    let w = be_u32(&bytes, 12, path)? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(path, format!("empty image set {} x {} x {}", n, h, w)));
    }
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!("truncated: {} images of {}x{} need {} bytes, found {}", n, h, w, need, bytes.len()),
        ));
    }
    let pixels = bytes[16..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    let images = Tensor::new(vec![n, 1, h, w], pixels)?;
    let labels = match labels_path {
        None => None,
        Some(lp) => {
            let lb = read_file(lp)?;
            check_magic(&lb, IDX_LABELS, lp)?;
            let m = be_u32(&lb, 4, lp)? as usize;
            if m != n {
                return Err(Error::format(lp, format!("{} labels for {} images", m, n)));
            }
            if lb.len() < 8 + m {
                return Err(Error::format(
                    lp,
                    format!("truncated: {} labels need {} bytes, found {}", m, 8 + m, lb.len()),
                ));
            }
            Some(lb[8..8 + m].iter().map(|&b| b as usize).collect())
        }
    };
    let mut ds = Dataset::new(images, labels, path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())?;
    ds.provenance = format!("IDX {}", path.display());
    Ok(ds)
}

/// Writes `n` images of `height × width` bytes as an IDX image file.
pub fn write_idx_images(path: impl AsRef<Path>, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let n = pixels.len() / (height * width).max(1);
    if n * height * width != pixels.len() {
        return Err(Error::invalid("pixel count is not a multiple of the image size"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, height as u32, width as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes an IDX label file.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads comma-separated rows of `C·H·W` pixels, optionally preceded by an integer label.
///
/// A first row with any non-numeric field is treated as a header. Values are
/// divided by 255 when some value exceeds 1 and all lie in `[0, 255]`, and
/// min-max rescaled when they fall outside that range.
pub fn load_csv(path: impl AsRef<Path>, channels: usize, height: usize, width: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let d = channels * height * width;
    if d == 0 {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut with_label: Option<bool> = None;
    for (line_no, line) in text.lines().enumerate() {
        let row = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Vec<Option<f64>> = fields.iter().map(|f| f.parse::<f64>().ok()).collect();
        if parsed.iter().any(Option::is_none) {
            if values.is_empty() && labels.is_empty() && with_label.is_none() && line_no == 0 {
                continue;
            }
            return Err(Error::format(path, format!("row {}: non-numeric field", row)));
        }
        let has_label = match fields.len() {
            l if l == d => false,
            l if l == d + 1 => true,
            l => {
                return Err(Error::format(
                    path,
                    format!("row {}: {} fields, expected {} or {} (with label)", row, l, d, d + 1),
                ))
            }
        };
        if *with_label.get_or_insert(has_label) != has_label {
            return Err(Error::format(path, format!("row {}: label column appears inconsistently", row)));
        }
        let mut nums = parsed.into_iter().map(|v| v.expect("checked"));
        if has_label {
            let l = nums.next().expect("d + 1 fields");
            if l < 0.0 || l.fract() != 0.0 {
                return Err(Error::format(path, format!("row {}: label {} is not a nonnegative integer", row, l)));
            }
            labels.push(l as usize);
        }
        values.extend(nums);
    }
    if values.is_empty() {
        return Err(Error::format(path, "no data rows"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite pixel value"));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < 0.0 || max > 255.0 {
        let range = max - min;
        for v in &mut values {
            *v = if range > 0.0 { (*v - min) / range } else { 0.0 };
        }
    } else if max > 1.0 {
        for v in &mut values {
            *v /= 255.0;
        }
    }
    let n = values.len() / d;
    let images = Tensor::new(vec![n, channels, height, width], values)?;
    let labels = if with_label == Some(true) { Some(labels) } else { None };
    let mut ds = Dataset::new(images, labels, path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())?;
    ds.provenance = format!("CSV {}", path.display());
    Ok(ds)
}

/// Gaussian clusters in the plane, lifted into image space.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub per_cluster: usize,
    /// `K` cluster means.
    pub means: Vec<[f64; 2]>,
    pub sigma: f64,
    /// Pixels per lifted image; must factor as `H × W` with both divisible by 4.
    pub lift_dim: usize,
    pub seed: u64,
}

impl BlobSpec {
    /// `clusters` means on a circle, adjacent means `separation` apart.
    pub fn ring(clusters: usize, per_cluster: usize, sigma: f64, separation: f64, lift_dim: usize, seed: u64) -> Self {
        let means = match clusters {
            0 => Vec::new(),
            1 => vec![[0.0, 0.0]],
            k => {
                let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
                (0..k)
                    .map(|t| {
                        let a = 2.0 * std::f64::consts::PI * t as f64 / k as f64;
                        [radius * a.cos(), radius * a.sin()]
                    })
                    .collect()
            }
        };
        BlobSpec {
            per_cluster,
            means,
            sigma,
            lift_dim,
            seed,
        }
    }

    /// `(H, W)` with `H·W = lift_dim`, both divisible by 4, as square as possible.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let d = self.lift_dim;
        let best = (1..=d).rfind(|h| h * h <= d && d.is_multiple_of(*h) && h % 4 == 0 && (d / h).is_multiple_of(4));
        match best {
            Some(h) => Ok((h, d / h)),
            None => {
                let lower = (d / 16).max(1) * 16;
                let upper = d.div_ceil(16).max(1) * 16;
                let nearest = if d - lower.min(d) <= upper - d { lower } else { upper };
                Err(Error::invalid(format!(
                    "lift dimension {} cannot be arranged as H x W with both divisible by 4; try {}",
                    d, nearest
                )))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.per_cluster == 0 {
            return Err(Error::invalid("blobs need at least one cluster and one point per cluster"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("blob sigma must be finite and nonnegative, got {}", self.sigma)));
        }
        for (a, ma) in self.means.iter().enumerate() {
            if self.means[..a].contains(ma) {
                return Err(Error::invalid(format!("blob mean {} repeats an earlier mean", a)));
            }
        }
        Ok(())
    }
}

/// The planar points (`n × 2`, cluster-major) and their labels.
pub fn blob_points(spec: &BlobSpec) -> Result<(Tensor, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.means.len() * spec.per_cluster * 2);
    let mut labels = Vec::new();
    for (t, mean) in spec.means.iter().enumerate() {
        for _ in 0..spec.per_cluster {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            data.push(mean[0] + spec.sigma * dx);
            data.push(mean[1] + spec.sigma * dy);
            labels.push(t);
        }
    }
    Ok((Tensor::new(vec![labels.len(), 2], data)?, labels))
}

/// Two orthonormal rows spanning a random plane in `dim` dimensions.
fn random_plane(rng: &mut ChaCha8Rng, dim: usize) -> Result<[Vec<f64>; 2]> {
    if dim < 2 {
        return Err(Error::invalid("lift dimension must be at least 2"));
    }
    let mut a: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut b: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let na = norm(&a);
    a.iter_mut().for_each(|x| *x /= na);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().zip(&a).for_each(|(y, x)| *y -= dot * x);
    let nb = norm(&b);
    b.iter_mut().for_each(|x| *x /= nb);
    Ok([a, b])
}

/// Synthetic clustered images: planar blobs lifted by a seeded orthonormal map.
pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let (h, w) = spec.image_size()?;
    let (points, labels) = blob_points(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let [a, b] = random_plane(&mut rng, spec.lift_dim)?;
    let mut values = Vec::with_capacity(points.rows() * spec.lift_dim);
    for p in points.iter_rows() {
        values.extend(a.iter().zip(&b).map(|(x, y)| p[0] * x + p[1] * y));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    for v in &mut values {
        *v = if range > 0.0 { (*v - min) / range } else { 0.0 };
    }
    let n = points.rows();
    let mut ds = Dataset::new(Tensor::new(vec![n, 1, h, w], values)?, Some(labels), "blobs")?;
    ds.provenance = format!(
        "{} blobs x {} points, sigma {}, lifted to {}x{}, seed {}",
        spec.means.len(),
        spec.per_cluster,
        spec.sigma,
        h,
        w,
        spec.seed
    );
    Ok(ds)
}

/// Bilinear resize of a `C × H × W` image (pixel-center aligned, edges clamped).
pub fn resize_pad(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("resize target {}x{} must be positive", height, width)));
    }
    if image.rank() != 3 {
        return Err(Error::shape("resize", format!("expected C x H x W, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, s - lo as f64)
    };
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let src = image.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..height {
            let (y0, y1, ty) = axis(y, h, height);
            for x in 0..width {
                let (x0, x1, tx) = axis(x, w, width);
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    Tensor::new(vec![c, height, width], out)
}

/// A seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster_head::kmeans;
    use crate::metrics::accuracy;

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let pixels: Vec<u8> = (0..32).map(|v| (v * 8) as u8).collect();
        write_idx_images(&img, 4, 4, &pixels).unwrap();
        write_idx_labels(&lab, &[3, 7]).unwrap();
        let ds = load_idx(&img, Some(&lab)).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 4, 4]);
        for (v, p) in ds.images.data().iter().zip(&pixels) {
            assert_eq!(*v, f64::from(*p) / 255.0);
        }
        assert_eq!(ds.labels, Some(vec![3, 7]));
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        write_idx_images(&img, 2, 2, &[0; 8]).unwrap();
        let bad = dir.path().join("bad.idx");
        write_idx_images(&bad, 2, 2, &[0; 2 * 4]).unwrap();
        let err = load_idx(&img, Some(&bad)).unwrap_err().to_string();
        assert!(err.contains("0x00000803"), "{}", err);
        let empty = dir.path().join("empty.idx");
        fs::write(&empty, b"").unwrap();
        assert!(load_idx(&empty, None).unwrap_err().to_string().contains("truncated"));
        let short = dir.path().join("short.idx");
        let mut bytes = fs::read(&img).unwrap();
        bytes.truncate(20);
        fs::write(&short, bytes).unwrap();
        assert!(load_idx(&short, None).unwrap_err().to_string().contains("truncated"));
        let lab = dir.path().join("lab.idx");
        write_idx_labels(&lab, &[1, 2, 3]).unwrap();
        assert!(load_idx(&img, Some(&lab)).is_err());
    }

    #[test]
    fn csv_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "0,0,0,0\n").unwrap();
        let ds = load_csv(&p, 1, 2, 2).unwrap();
        assert_eq!(ds.images.shape(), &[1, 1, 2, 2]);
        assert!(ds.labels.is_none());
        fs::write(&p, "label,a,b,c,d\n1,0,255,0,0\n0,0,0,51,0\n").unwrap();
        let ds = load_csv(&p, 1, 2, 2).unwrap();
        assert_eq!(ds.labels, Some(vec![1, 0]));
        assert_eq!(ds.images.data()[1], 1.0);
        assert_eq!(ds.images.data()[6], 0.2);
        fs::write(&p, "0,0,0,0\n0,0,0\n").unwrap();
        let err = load_csv(&p, 1, 2, 2).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{}", err);
    }

    #[test]
    fn blobs_are_deterministic_and_normalized() {
        let spec = BlobSpec::ring(3, 50, 0.1, 2.0, 256, 9);
        let a = make_blobs(&spec).unwrap();
        assert_eq!(a, make_blobs(&spec).unwrap());
        assert_eq!(a.images.shape(), &[150, 1, 16, 16]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_sigma_collapses_clusters() {
        let spec = BlobSpec::ring(2, 5, 0.0, 2.0, 16, 1);
        let ds = make_blobs(&spec).unwrap();
        for i in 1..5 {
            assert_eq!(ds.images.row(i), ds.images.row(0));
        }
        assert_ne!(ds.images.row(5), ds.images.row(0));
    }

    #[test]
    fn lift_size_must_factor() {
        assert_eq!(BlobSpec::ring(2, 1, 0.1, 2.0, 256, 0).image_size().unwrap(), (16, 16));
        assert_eq!(BlobSpec::ring(2, 1, 0.1, 2.0, 32, 0).image_size().unwrap(), (4, 8));
        let err = BlobSpec::ring(2, 1, 0.1, 2.0, 250, 0).image_size().unwrap_err().to_string();
        assert!(err.contains("256"), "{}", err);
    }

    #[test]
    fn raw_blobs_are_separable() {
        let spec = BlobSpec::ring(3, 200, 0.1, 2.0, 256, 4);
        let (points, labels) = blob_points(&spec).unwrap();
        let km = kmeans(&points, 3, 5, 100, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(accuracy(&km.labels, &labels).unwrap() >= 0.99);
        for (t, mean) in spec.means.iter().enumerate() {
            let rows: Vec<&[f64]> = points.iter_rows().skip(t * 200).take(200).collect();
            for axis in 0..2 {
                let m = rows.iter().map(|r| r[axis]).sum::<f64>() / 200.0;
                assert!((m - mean[axis]).abs() <= 4.0 * 0.1 / 200f64.sqrt());
            }
        }
    }

    #[test]
    fn resize_examples() {
        let img = Tensor::new(vec![1, 3, 4], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(resize_pad(&img, 3, 4).unwrap(), img);
        let c = Tensor::full(vec![2, 28, 28], 0.37).unwrap();
        let r = resize_pad(&c, 32, 32).unwrap();
        assert_eq!(r.shape(), &[2, 32, 32]);
        assert!(r.data().iter().all(|&v| v == 0.37));
        assert!(resize_pad(&img, 0, 4).is_err());
    }
}
