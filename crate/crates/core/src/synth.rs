//! Deterministic synthetic scenes whose four modalities carry complementary
//! information: silhouettes under heavy noise, a clean interior distance
//! field, boundaries only, and class identity as blurred material levels.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use fuseg_tensor::{mix_seed, Rng};
use serde::{Deserialize, Serialize};

use crate::config::{ModalitySpec, ModelConfig};
use crate::encoder::{ModalityBundle, Raster};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::par::{map_indexed, ExecMode};

pub const MODALITIES: [(&str, usize); 4] = [("intensity", 3), ("geometry", 1), ("edges", 1), ("material", 1)];
const INTENSITY: usize = 0;
const GEOMETRY: usize = 1;
const EDGES: usize = 2;
const MATERIAL: usize = 3;

pub fn modality_specs() -> Vec<ModalitySpec> {
    MODALITIES.iter().map(|&(n, c)| ModalitySpec::new(n, c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseLevels {
    pub intensity: f64,
    pub geometry: f64,
    pub edges: f64,
    pub material: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        Self {
            intensity: 0.6,
            geometry: 0.02,
            edges: 0.15,
            material: 0.1,
        }
    }
}

impl NoiseLevels {
    pub fn zero() -> Self {
        Self {
            intensity: 0.0,
            geometry: 0.0,
            edges: 0.0,
            material: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus shape classes.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Minimum gap between the bounding circles of two shapes, in pixels.
    pub margin: f64,
    pub noise: NoiseLevels,
    /// Gaussian blur width of the material field, in pixels.
    pub material_blur: f64,
    /// Distance (pixels) that maps to 1 in the geometry field.
    pub geometry_scale: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            min_shapes: 2,
            max_shapes: 4,
            min_radius: 6.0,
            max_radius: 13.0,
            margin: 3.0,
            noise: NoiseLevels::default(),
            material_blur: 4.0,
            geometry_scale: 8.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scenes must be at least 8x8".into()));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config("num_classes must lie in 2..=255".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config("need 1 <= min_shapes <= max_shapes".into()));
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            return Err(Error::Config("need 1 <= min_radius <= max_radius".into()));
        }
        if 2.0 * self.max_radius + 2.0 > self.height.min(self.width) as f64 {
            return Err(Error::Config("max_radius does not fit the image".into()));
        }
        let n = &self.noise;
        if [n.intensity, n.geometry, n.edges, n.material, self.material_blur, self.margin]
            .iter()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
            || !(self.geometry_scale > 0.0)
        {
            return Err(Error::Config("noise, blur, margin must be non-negative and geometry_scale positive".into()));
        }
        Ok(())
    }

    /// A model configuration whose modalities and class count match.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            modalities: modality_specs(),
            num_classes: self.num_classes,
            ..ModelConfig::default()
        }
    }

    /// Material level of a class: background 0, classes evenly up to 1.
    pub fn level(&self, class: usize) -> f64 {
        class as f64 / (self.num_classes - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rect { half_h: f64, half_w: f64 },
    Disk,
    Triangle { rotation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub class: u8,
}

impl Shape {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.kind {
            ShapeKind::Disk => dy * dy + dx * dx <= self.radius * self.radius,
            ShapeKind::Rect { half_h, half_w } => dy.abs() <= half_h && dx.abs() <= half_w,
            ShapeKind::Triangle { rotation } => {
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = rotation + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                        (self.radius * a.sin(), self.radius * a.cos())
                    })
                    .collect();
                let side = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                let (s0, s1, s2) = (side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0]));
                (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub bundle: ModalityBundle,
    /// Row-major `H×W` class labels.
    pub labels: Vec<u8>,
}

/// Places shapes by rejection sampling. The form of a shape is drawn
/// independently of its class.
pub fn place_shapes(spec: &SceneSpec, rng: &mut Rng) -> Vec<Shape> {
    let count = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut attempts = 0;
    while shapes.len() < count && attempts < 200 {
        attempts += 1;
        let r = rng.range(spec.min_radius, spec.max_radius);
        let cy = rng.range(r + 1.0, spec.height as f64 - r - 1.0);
        let cx = rng.range(r + 1.0, spec.width as f64 - r - 1.0);
        if shapes
            .iter()
            .any(|s| ((s.cy - cy).powi(2) + (s.cx - cx).powi(2)).sqrt() < s.radius + r + spec.margin)
        {
            continue;
        }
        let kind = match rng.below(3) {
            0 => ShapeKind::Rect {
                half_h: r * rng.range(0.55, 0.7),
                half_w: r * rng.range(0.55, 0.7),
            },
            1 => ShapeKind::Disk,
            _ => ShapeKind::Triangle {
                rotation: rng.range(0.0, 2.0 * std::f64::consts::PI),
            },
        };
        let class = 1 + rng.below(spec.num_classes - 1) as u8;
        shapes.push(Shape {
            kind,
            cy,
            cx,
            radius: r,
            class,
        });
    }
    shapes
}

/// Shape index covering each pixel centre.
fn rasterize(spec: &SceneSpec, shapes: &[Shape]) -> Vec<Option<usize>> {
    let (h, w) = (spec.height, spec.width);
    (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
            shapes.iter().position(|s| s.contains(y, x))
        })
        .collect()
}

/// Euclidean distance from each covered pixel to the nearest pixel outside
/// its shape (0 outside shapes). Pixels beyond the border count as outside.
pub fn interior_distance(owner: &[Option<usize>], h: usize, w: usize) -> Vec<f64> {
    let outside = |y: isize, x: isize, k: usize| -> bool {
        y < 0 || x < 0 || y >= h as isize || x >= w as isize || owner[y as usize * w + x as usize] != Some(k)
    };
    let mut boundary: Vec<(usize, isize, isize)> = Vec::new();
    for y in -1..=h as isize {
        for x in -1..=w as isize {
            let inside_any = y >= 0 && x >= 0 && y < h as isize && x < w as isize;
            let me = if inside_any { owner[y as usize * w + x as usize] } else { None };
            for (dy, dx) in [(0, 1), (1, 0), (0, -1), (-1, 0)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                if let Some(k) = owner[ny as usize * w + nx as usize] {
                    if me != Some(k) {
                        boundary.push((k, y, x));
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for p in 0..h * w {
        let Some(k) = owner[p] else { continue };
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        let mut best = f64::INFINITY;
        for &(bk, by, bx) in &boundary {
            if bk == k && outside(by, bx, k) {
                let d2 = ((by - y).pow(2) + (bx - x).pow(2)) as f64;
                best = best.min(d2);
            }
        }
        out[p] = best.sqrt();
    }
    out
}

/// Separable Gaussian blur with zero padding and a kernel truncated at
/// `ceil(3σ)`, normalised to unit sum. `σ = 0` is the identity.
pub fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut dst = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let d = i as isize - r;
                    let (sy, sx) = if along_x { (y, x + d) } else { (y + d, x) };
                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                        acc += kv * src[sy as usize * w + sx as usize];
                    }
                }
                dst[y as usize * w + x as usize] = acc;
            }
        }
        dst
    };
    pass(&pass(field, true), false)
}

/// Generates sample `index` of the stream defined by `spec.seed`.
pub fn generate_one(spec: &SceneSpec, index: u64) -> Sample {
    let mut rng = Rng::new(mix_seed(spec.seed, index));
    let (h, w) = (spec.height, spec.width);
    let shapes = place_shapes(spec, &mut rng);
    let owner = rasterize(spec, &shapes);
    let labels: Vec<u8> = owner.iter().map(|o| o.map_or(0, |k| shapes[k].class)).collect();

    let background: Vec<f64> = (0..3).map(|_| rng.range(0.0, 0.3)).collect();
    let colours: Vec<Vec<f64>> = shapes.iter().map(|_| (0..3).map(|_| rng.range(0.5, 1.0)).collect()).collect();
    let mut intensity = Vec::with_capacity(h * w * 3);
    for o in &owner {
        for c in 0..3 {
            let base = o.map_or(background[c], |k| colours[k][c]);
            intensity.push(base + spec.noise.intensity * rng.normal());
        }
    }

    let geometry: Vec<f64> = interior_distance(&owner, h, w)
        .into_iter()
        .map(|d| d / spec.geometry_scale + spec.noise.geometry * rng.normal())
        .collect();

    let edges: Vec<f64> = (0..h * w)
        .map(|p| {
            let edge = owner[p].is_some_and(|k| {
                let (y, x) = ((p / w) as isize, (p % w) as isize);
                [(0, 1), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dy, dx)| {
                    let (ny, nx) = (y + dy, x + dx);
                    ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize || owner[ny as usize * w + nx as usize] != Some(k)
                })
            });
            f64::from(u8::from(edge)) + spec.noise.edges * rng.normal()
        })
        .collect();

    let levels: Vec<f64> = labels.iter().map(|&l| spec.level(l as usize)).collect();
    let material: Vec<f64> = gaussian_blur(&levels, h, w, spec.material_blur)
        .into_iter()
        .map(|v| v + spec.noise.material * rng.normal())
        .collect();

    let raster = |c, data| Some(Raster { height: h, width: w, channels: c, data });
    Sample {
        bundle: ModalityBundle::new(vec![raster(3, intensity), raster(1, geometry), raster(1, edges), raster(1, material)]),
        labels,
    }
}

/// Samples `start..start + n` of the stream.
pub fn generate_range(spec: &SceneSpec, start: u64, n: usize, mode: ExecMode) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok(map_indexed(mode, n, |i| generate_one(spec, start + i as u64)))
}

pub fn generate(spec: &SceneSpec, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    generate_range(spec, 0, n, ExecMode::default())
}

/// Keeps only the named modalities. `names` lists every slot's name.
pub fn drop_modalities(bundle: &ModalityBundle, names: &[String], subset: &[&str]) -> Result<ModalityBundle> {
    if subset.is_empty() {
        return Err(Error::Input("modality subset is empty".into()));
    }
    let keep = subset
        .iter()
        .map(|s| {
            names
                .iter()
                .position(|n| n == s)
                .ok_or_else(|| Error::Input(format!("unknown modality `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if keep.iter().any(|&k| bundle.slots.get(k).is_none_or(|r| r.is_none())) {
        return Err(Error::Input("subset names a modality absent from the bundle".into()));
    }
    Ok(bundle.subset(&keep))
}

/// Every nonempty subset of `m` slots, ordered by size then lexicographically.
pub fn all_subsets(m: usize) -> Vec<Vec<usize>> {
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << m))
        .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
}

// ---- rule-based reference segmenters ----

fn components(fg: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        comps.push(comp);
    }
    comps
}

fn nearest_class(spec: &SceneSpec, value: f64, classes: std::ops::Range<usize>) -> u8 {
    let mut best = classes.start;
    for c in classes {
        if (value - spec.level(c)).abs() < (value - spec.level(best)).abs() {
            best = c;
        }
    }
    best as u8
}

/// Solves the small dense system `a x = b` by Gaussian elimination with
/// partial pivoting; singular pivots yield 0.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap_or(col);
        a.swap(col, piv);
        b.swap(col, piv);
        if a[col][col].abs() < 1e-12 {
            continue;
        }
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        if a[row][row].abs() < 1e-12 {
            continue;
        }
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn foreground_from_geometry(spec: &SceneSpec, geo: &[f64]) -> Vec<bool> {
    geo.iter().map(|&g| g > 0.5 / spec.geometry_scale).collect()
}

/// Uses every modality: foreground components from the distance field, and
/// each component's material level recovered by a least-squares fit of the
/// blurred component indicators to the material field.
pub fn oracle_joint(spec: &SceneSpec, bundle: &ModalityBundle) -> Result<Vec<u8>> {
    let (h, w) = (spec.height, spec.width);
    let geo = &slot(bundle, GEOMETRY)?.data;
    let mat = &slot(bundle, MATERIAL)?.data;
    let comps = components(&foreground_from_geometry(spec, geo), h, w);
    let basis: Vec<Vec<f64>> = comps
        .iter()
        .map(|c| {
            let mut ind = vec![0.0; h * w];
            c.iter().for_each(|&p| ind[p] = 1.0);
            gaussian_blur(&ind, h, w, spec.material_blur)
        })
        .collect();
    let k = comps.len();
    let a: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| basis[i].iter().zip(&basis[j]).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let b: Vec<f64> = (0..k).map(|i| basis[i].iter().zip(mat).map(|(x, y)| x * y).sum()).collect();
    let levels = solve(a, b);
    let mut out = vec![0u8; h * w];
    for (c, &v) in comps.iter().zip(&levels) {
        let class = nearest_class(spec, v, 1..spec.num_classes);
        c.iter().for_each(|&p| out[p] = class);
    }
    Ok(out)
}

/// Per-pixel nearest material level.
pub fn oracle_material(spec: &SceneSpec, bundle: &ModalityBundle) -> Result<Vec<u8>> {
    Ok(slot(bundle, MATERIAL)?
        .data
        .iter()
        .map(|&v| nearest_class(spec, v, 0..spec.num_classes))
        .collect())
}

/// Foreground from the distance field; the class cannot be recovered, so
/// every shape gets class 1.
pub fn oracle_geometry(spec: &SceneSpec, bundle: &ModalityBundle) -> Result<Vec<u8>> {
    Ok(foreground_from_geometry(spec, &slot(bundle, GEOMETRY)?.data)
        .into_iter()
        .map(u8::from)
        .collect())
}

/// Regions enclosed by boundary pixels (not reachable from the image border)
/// plus the boundaries themselves; class 1.
pub fn oracle_edges(spec: &SceneSpec, bundle: &ModalityBundle) -> Result<Vec<u8>> {
    let (h, w) = (spec.height, spec.width);
    let edge: Vec<bool> = slot(bundle, EDGES)?.data.iter().map(|&v| v > 0.5).collect();
    let open: Vec<bool> = edge.iter().map(|e| !e).collect();
    let mut outside = vec![false; h * w];
    for comp in components(&open, h, w) {
        if comp.iter().any(|&p| p / w == 0 || p / w == h - 1 || p % w == 0 || p % w == w - 1) {
            comp.iter().for_each(|&p| outside[p] = true);
        }
    }
    Ok(outside.iter().map(|&o| u8::from(!o)).collect())
}

/// Channel-mean intensity smoothed over a 5×5 window and thresholded
/// halfway between the background and shape colour ranges; class 1.
pub fn oracle_intensity(spec: &SceneSpec, bundle: &ModalityBundle) -> Result<Vec<u8>> {
    let (h, w) = (spec.height, spec.width);
    let r = slot(bundle, INTENSITY)?;
    let mean: Vec<f64> = r.data.chunks(3).map(|c| c.iter().sum::<f64>() / 3.0).collect();
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(2)..(y + 3).min(h) {
                for xx in x.saturating_sub(2)..(x + 3).min(w) {
                    acc += mean[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = u8::from(acc / n > 0.45);
        }
    }
    Ok(out)
}

fn slot(bundle: &ModalityBundle, i: usize) -> Result<&Raster> {
    bundle
        .slots
        .get(i)
        .and_then(|r| r.as_ref())
        .ok_or_else(|| Error::Input(format!("modality `{}` is required", MODALITIES[i].0)))
}

/// Confusion matrix of a reference segmenter over `samples`.
pub fn evaluate_oracle(
    spec: &SceneSpec,
    samples: &[Sample],
    oracle: fn(&SceneSpec, &ModalityBundle) -> Result<Vec<u8>>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(spec.num_classes);
    for s in samples {
        cm.accumulate(&oracle(spec, &s.bundle)?, &s.labels, None)?;
    }
    Ok(cm)
}

// ---- on-disk datasets ----

const FORMAT_VERSION: u32 = 1;

/// Writes `samples` as one little-endian `f64` file per modality, a `u8`
/// label file, the generating spec, and a text manifest.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "format_version {FORMAT_VERSION}\nsamples {}\nheight {}\nwidth {}\nnum_classes {}\nseed {}\n",
        samples.len(),
        spec.height,
        spec.width,
        spec.num_classes,
        spec.seed
    );
    for (i, &(name, channels)) in MODALITIES.iter().enumerate() {
        let file = format!("{name}.f64");
        let mut bytes = Vec::with_capacity(samples.len() * spec.height * spec.width * channels * 8);
        for s in samples {
            let r = slot(&s.bundle, i)?;
            for v in &r.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join(&file), bytes)?;
        manifest.push_str(&format!(
            "modality {name} shape {}x{}x{}x{channels} dtype f64le file {file}\n",
            samples.len(),
            spec.height,
            spec.width
        ));
    }
    let labels: Vec<u8> = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    fs::write(dir.join("labels.u8"), labels)?;
    manifest.push_str(&format!(
        "labels shape {}x{}x{} dtype u8 file labels.u8\n",
        samples.len(),
        spec.height,
        spec.width
    ));
    fs::write(dir.join("spec.toml"), toml::to_string(spec).map_err(|e| Error::Data(e.to_string()))?)?;
    let mut f = fs::File::create(dir.join("manifest.txt"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(SceneSpec, Vec<Sample>)> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let field = |key: &str| -> Result<usize> {
        manifest
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
            .ok_or_else(|| Error::Data(format!("manifest lacks `{key}`")))?
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad `{key}` in manifest")))
    };
    if field("format_version")? != FORMAT_VERSION as usize {
        return Err(Error::Data("unsupported dataset format version".into()));
    }
    let spec: SceneSpec = toml::from_str(&fs::read_to_string(dir.join("spec.toml"))?)?;
    let (n, h, w) = (field("samples")?, field("height")?, field("width")?);
    let mut planes: Vec<Vec<f64>> = Vec::new();
    for &(name, channels) in &MODALITIES {
        let bytes = fs::read(dir.join(format!("{name}.f64")))?;
        if bytes.len() != n * h * w * channels * 8 {
            return Err(Error::Data(format!("`{name}` has {} bytes, expected {}", bytes.len(), n * h * w * channels * 8)));
        }
        planes.push(
            bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    let labels = fs::read(dir.join("labels.u8"))?;
    if labels.len() != n * h * w {
        return Err(Error::Data("label file size does not match the manifest".into()));
    }
    let samples = (0..n)
        .map(|i| Sample {
            bundle: ModalityBundle::new(
                MODALITIES
                    .iter()
                    .zip(&planes)
                    .map(|(&(_, c), p)| {
                        Some(Raster {
                            height: h,
                            width: w,
                            channels: c,
                            data: p[i * h * w * c..(i + 1) * h * w * c].to_vec(),
                        })
                    })
                    .collect(),
            ),
            labels: labels[i * h * w..(i + 1) * h * w].to_vec(),
        })
        .collect();
    Ok((spec, samples))
}
