//! Synthetic panoptic scenes: geometric things over banded stuff.
//!
//! Class ids follow one convention everywhere: stuff classes are
//! `0..num_stuff`, thing classes are `num_stuff..num_stuff + num_things`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_things: usize,
    pub num_stuff: usize,
    pub max_instances: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32
            || self.width < 32
            || !self.height.is_multiple_of(32)
            || !self.width.is_multiple_of(32)
        {
            return Err(Error::InvalidSpec(format!(
                "image {}x{} must be at least 32 and divisible by 32",
                self.height, self.width
            )));
        }
        if self.max_instances == 0 {
            return Err(Error::InvalidSpec(
                "max_instances must be at least 1".into(),
            ));
        }
        if self.num_things == 0 || self.num_stuff == 0 {
            return Err(Error::InvalidSpec(
                "need at least one thing and one stuff class".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub class_id: u32,
    pub is_thing: bool,
}

/// Per-pixel `(class, instance)` ground truth plus the rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticLabel {
    pub height: usize,
    pub width: usize,
    /// Class id per pixel, row-major.
    pub semantic: Vec<i32>,
    /// 0 for no instance, otherwise the instance index.
    pub instance: Vec<i32>,
    pub class_table: Vec<ClassInfo>,
    /// `H×W×3`, interleaved, values in `[0, 1]`.
    pub image: Vec<f32>,
}

impl PanopticLabel {
    pub fn num_things(&self) -> usize {
        self.class_table.iter().filter(|c| c.is_thing).count()
    }

    pub fn num_stuff(&self) -> usize {
        self.class_table.iter().filter(|c| !c.is_thing).count()
    }

    pub fn is_thing(&self, class_id: i32) -> bool {
        self.class_table
            .iter()
            .any(|c| c.class_id as i32 == class_id && c.is_thing)
    }

    /// Class ids of the given kind in ascending order; a class's position in
    /// this list is its channel in the thing or stuff outputs.
    pub fn classes(&self, things: bool) -> Vec<i32> {
        let mut ids: Vec<i32> = self
            .class_table
            .iter()
            .filter(|c| c.is_thing == things)
            .map(|c| c.class_id as i32)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Channel of `class_id` among the classes of its kind.
    pub fn class_channel(&self, class_id: i32) -> Option<usize> {
        self.classes(self.is_thing(class_id))
            .iter()
            .position(|&c| c == class_id)
    }

    /// Sorted instance indices with their class.
    pub fn instances(&self) -> Vec<(i32, i32)> {
        let mut seen = BTreeMap::new();
        for (&inst, &sem) in self.instance.iter().zip(&self.semantic) {
            if inst != 0 {
                seen.entry(inst).or_insert(sem);
            }
        }
        seen.into_iter().collect()
    }

    pub fn instance_mask(&self, inst: i32) -> Vec<bool> {
        self.instance.iter().map(|&v| v == inst).collect()
    }

    /// Checks every structural invariant, naming the first violation.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.semantic.len() != n {
            return Err(Error::format(
                "semantic_map",
                format!("expected {n} pixels, got {}", self.semantic.len()),
            ));
        }
        if self.instance.len() != n {
            return Err(Error::format(
                "instance_map",
                format!("expected {n} pixels, got {}", self.instance.len()),
            ));
        }
        if self.image.len() != n * 3 {
            return Err(Error::format(
                "image",
                format!("expected {} values, got {}", n * 3, self.image.len()),
            ));
        }
        let mut ids = BTreeSet::new();
        for c in &self.class_table {
            if !ids.insert(c.class_id) {
                return Err(Error::format(
                    "class_table",
                    format!("class {} listed twice", c.class_id),
                ));
            }
        }
        let mut inst_class: BTreeMap<i32, i32> = BTreeMap::new();
        for p in 0..n {
            let (sem, inst) = (self.semantic[p], self.instance[p]);
            let (row, col) = (p / self.width, p % self.width);
            let Some(info) = self.class_table.iter().find(|c| c.class_id as i32 == sem) else {
                return Err(Error::format(
                    "semantic_map",
                    format!("pixel ({row}, {col}) has class {sem} missing from class_table"),
                ));
            };
            if inst < 0 {
                return Err(Error::format(
                    "instance_map",
                    format!("pixel ({row}, {col}) has negative instance {inst}"),
                ));
            }
            if inst != 0 {
                if !info.is_thing {
                    return Err(Error::format(
                        "instance_map",
                        format!("pixel ({row}, {col}) has instance {inst} on stuff class {sem}"),
                    ));
                }
                match inst_class.get(&inst) {
                    Some(&c) if c != sem => {
                        return Err(Error::format(
                            "instance_map",
                            format!(
                            "instance {inst} spans classes {c} and {sem} at pixel ({row}, {col})"
                        ),
                        ))
                    }
                    _ => {
                        inst_class.insert(inst, sem);
                    }
                }
            }
        }
        if let Some(v) = self.image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::format("image", format!("value {v} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Binary inter-class boundary map at full resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContourTarget {
    pub height: usize,
    pub width: usize,
    pub map: Vec<u8>,
}

/// Marks every pixel with a 4-neighbour of a different semantic class.
/// Neighbours outside the image are ignored.
pub fn contour_ground_truth(label: &PanopticLabel) -> ContourTarget {
    let (h, w) = (label.height, label.width);
    let sem = &label.semantic;
    let mut map = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let c = sem[i * w + j];
            let differs = (i > 0 && sem[(i - 1) * w + j] != c)
                || (i + 1 < h && sem[(i + 1) * w + j] != c)
                || (j > 0 && sem[i * w + j - 1] != c)
                || (j + 1 < w && sem[i * w + j + 1] != c);
            map[i * w + j] = differs as u8;
        }
    }
    ContourTarget {
        height: h,
        width: w,
        map,
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse,
    Rectangle,
    Triangle,
}

fn shape_for(thing_index: usize) -> Shape {
    match thing_index % 3 {
        0 => Shape::Ellipse,
        1 => Shape::Rectangle,
        _ => Shape::Triangle,
    }
}

fn rasterize(shape: Shape, cy: f64, cx: f64, ry: f64, rx: f64, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
            m[i * w + j] = match shape {
                Shape::Ellipse => dy * dy + dx * dx <= 1.0,
                Shape::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                // apex up, base along the bottom edge of the bounding box
                Shape::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0,
            };
        }
    }
    m
}

/// Deterministic colour of a class: things are saturated, stuff is muted.
pub fn class_color(class_id: usize, is_thing: bool) -> [f32; 3] {
    let hue = (class_id as f64 * 0.618_033_988_75 + if is_thing { 0.1 } else { 0.55 }).fract();
    let (s, v) = if is_thing { (0.85, 0.95) } else { (0.35, 0.45) };
    hsv_to_rgb(hue, s, v)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

pub const NOISE_STD: f64 = 0.04;

/// Renders one seeded scene.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<PanopticLabel> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut class_table: Vec<ClassInfo> = (0..spec.num_stuff)
        .map(|c| ClassInfo {
            class_id: c as u32,
            is_thing: false,
        })
        .collect();
    class_table.extend((0..spec.num_things).map(|t| ClassInfo {
        class_id: (spec.num_stuff + t) as u32,
        is_thing: true,
    }));

    // stuff: bands along one axis
    let vertical = rng.random_bool(0.5);
    let extent = if vertical { w } else { h };
    let bands = rng.random_range(1..=spec.num_stuff.max(2));
    let mut cuts: Vec<usize> = (1..bands)
        .map(|_| rng.random_range(extent / 8..extent - extent / 8))
        .collect();
    cuts.sort_unstable();
    let band_class: Vec<i32> = (0..bands)
        .map(|_| rng.random_range(0..spec.num_stuff) as i32)
        .collect();
    let mut semantic = vec![0i32; h * w];
    for i in 0..h {
        for j in 0..w {
            let pos = if vertical { j } else { i };
            let band = cuts.iter().filter(|&&c| pos >= c).count();
            semantic[i * w + j] = band_class[band];
        }
    }

    // things: later instances occlude earlier ones
    let mut instance = vec![0i32; h * w];
    let count = rng.random_range(1..=spec.max_instances);
    let short = h.min(w) as f64;
    let (rmin, rmax) = ((short / 10.0).max(5.0), short / 4.0);
    for k in 1..=count as i32 {
        let t = rng.random_range(0..spec.num_things);
        let class = (spec.num_stuff + t) as i32;
        let mut best: Option<(usize, Vec<bool>)> = None;
        for _ in 0..16 {
            let ry = rng.random_range(rmin..rmax);
            let rx = rng.random_range(rmin..rmax);
            let cy = rng.random_range(ry..h as f64 - ry);
            let cx = rng.random_range(rx..w as f64 - rx);
            let mask = rasterize(shape_for(t), cy, cx, ry, rx, h, w);
            let overlap = mask
                .iter()
                .zip(&instance)
                .filter(|(&m, &i)| m && i != 0)
                .count();
            if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
                best = Some((overlap, mask));
            }
            if overlap == 0 {
                break;
            }
        }
        let (_, mask) = best.expect("at least one placement attempt");
        for (p, &m) in mask.iter().enumerate() {
            if m {
                instance[p] = k;
                semantic[p] = class;
            }
        }
    }
    // drop fully occluded instances and renumber densely
    let present: BTreeSet<i32> = instance.iter().copied().filter(|&v| v != 0).collect();
    let remap: BTreeMap<i32, i32> = present
        .iter()
        .enumerate()
        .map(|(n, &k)| (k, n as i32 + 1))
        .collect();
    for v in instance.iter_mut() {
        if *v != 0 {
            *v = remap[v];
        }
    }

    let mut image = vec![0f32; h * w * 3];
    for p in 0..h * w {
        let c = semantic[p] as usize;
        let col = class_color(c, c >= spec.num_stuff);
        for ch in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            image[p * 3 + ch] = (col[ch] as f64 + NOISE_STD * z).clamp(0.0, 1.0) as f32;
        }
    }

    let label = PanopticLabel {
        height: h,
        width: w,
        semantic,
        instance,
        class_table,
        image,
    };
    debug_assert!(label.validate().is_ok());
    Ok(label)
}

/// Block-majority `(class, instance)` labels at `1/factor` resolution.
/// Ties resolve to the smallest `(class, instance)` pair.
pub fn downsample_labels(
    label: &PanopticLabel,
    factor: usize,
) -> (usize, usize, Vec<i32>, Vec<i32>) {
    let (h, w) = (label.height / factor, label.width / factor);
    let mut sem = vec![0; h * w];
    let mut inst = vec![0; h * w];
    let mut counts: BTreeMap<(i32, i32), usize> = BTreeMap::new();
    for i in 0..h {
        for j in 0..w {
            counts.clear();
            for di in 0..factor {
                for dj in 0..factor {
                    let p = (i * factor + di) * label.width + j * factor + dj;
                    *counts
                        .entry((label.semantic[p], label.instance[p]))
                        .or_default() += 1;
                }
            }
            let mut best = ((0, 0), 0);
            for (&key, &n) in &counts {
                if n > best.1 {
                    best = (key, n);
                }
            }
            sem[i * w + j] = best.0 .0;
            inst[i * w + j] = best.0 .1;
        }
    }
    (h, w, sem, inst)
}

// ---------------------------------------------------------------------------
// `.pan` container: image | semantic | instance | header, each u64-LE length prefixed.

pub const PAN_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PanHeader {
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    class_table: Vec<ClassInfo>,
    version: u32,
}

pub fn encode_label(label: &PanopticLabel) -> Vec<u8> {
    let mut out = Vec::new();
    let mut section = |bytes: Vec<u8>| {
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    };
    section(label.image.iter().flat_map(|v| v.to_le_bytes()).collect());
    section(
        label
            .semantic
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    );
    section(
        label
            .instance
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    );
    let header = PanHeader {
        height: label.height,
        width: label.width,
        class_table: label.class_table.clone(),
        version: PAN_VERSION,
    };
    section(serde_json::to_vec(&header).expect("header serializes"));
    out
}

/// Splits a length-prefixed container into its sections.
pub(crate) fn split_sections<'a>(bytes: &'a [u8], names: &[&str]) -> Result<Vec<&'a [u8]>> {
    let mut off = 0;
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        if bytes.len() < off + 8 {
            return Err(Error::format(*name, "truncated before length prefix"));
        }
        let len = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")) as usize;
        off += 8;
        if bytes.len() < off.saturating_add(len) {
            return Err(Error::format(
                *name,
                format!("truncated: need {len} bytes, {} left", bytes.len() - off),
            ));
        }
        out.push(&bytes[off..off + len]);
        off += len;
    }
    if off != bytes.len() {
        return Err(Error::format(
            "container",
            format!("{} trailing bytes", bytes.len() - off),
        ));
    }
    Ok(out)
}

pub fn decode_label(bytes: &[u8]) -> Result<PanopticLabel> {
    let s = split_sections(bytes, &["image", "semantic_map", "instance_map", "header"])?;
    let header: PanHeader =
        serde_json::from_slice(s[3]).map_err(|e| Error::format("header", e.to_string()))?;
    if header.version != PAN_VERSION {
        return Err(Error::format(
            "header",
            format!("unsupported version {}", header.version),
        ));
    }
    let n = header.height * header.width;
    let check = |name: &str, data: &[u8], want: usize| -> Result<()> {
        if data.len() != want {
            return Err(Error::format(
                name,
                format!("expected {want} bytes, got {}", data.len()),
            ));
        }
        Ok(())
    };
    check("image", s[0], n * 12)?;
    check("semantic_map", s[1], n * 4)?;
    check("instance_map", s[2], n * 4)?;
    let image = s[0]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let ints = |d: &[u8]| {
        d.chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let label = PanopticLabel {
        height: header.height,
        width: header.width,
        semantic: ints(s[1]),
        instance: ints(s[2]),
        class_table: header.class_table,
        image,
    };
    label.validate()?;
    Ok(label)
}

pub fn save_label(path: &Path, label: &PanopticLabel) -> Result<()> {
    fs::write(path, encode_label(label)).map_err(|e| Error::io(path, e))
}

pub fn load_label(path: &Path) -> Result<PanopticLabel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_label(&bytes)
}

// ---------------------------------------------------------------------------
// Datasets on disk: `manifest.json` plus one `.pan` per scene.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SceneSpec,
    pub files: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";

/// Seed of scene `index` in a dataset generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

pub fn generate_dataset(seed: u64, spec: &SceneSpec, count: usize) -> Result<Vec<PanopticLabel>> {
    (0..count)
        .map(|i| generate_scene(scene_seed(seed, i), spec))
        .collect()
}

pub fn write_dataset(dir: &Path, seed: u64, spec: &SceneSpec, count: usize) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("scene_{i:05}.pan");
        save_label(
            &dir.join(&name),
            &generate_scene(scene_seed(seed, i), spec)?,
        )?;
        files.push(name);
    }
    let manifest = Manifest {
        seed,
        spec: *spec,
        files,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every scene listed in `dir/manifest.json`, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<(PathBuf, PanopticLabel)>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    let labels = manifest
        .files
        .iter()
        .map(|f| {
            let p = dir.join(f);
            load_label(&p).map(|l| (p, l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            height: 64,
            width: 64,
            num_things: 2,
            num_stuff: 2,
            max_instances: 3,
        }
    }

    #[test]
    fn scene_contract() {
        let l = generate_scene(0, &spec()).unwrap();
        assert!(l.instances().len() <= 3 && !l.instances().is_empty());
        assert!(l.semantic.iter().all(|&c| (0..4).contains(&c)));
        assert_eq!(generate_scene(0, &spec()).unwrap(), l);
        assert_ne!(generate_scene(1, &spec()).unwrap(), l);
    }

    #[test]
    fn invalid_specs_rejected() {
        for s in [
            SceneSpec {
                height: 65,
                ..spec()
            },
            SceneSpec {
                width: 48,
                ..spec()
            },
            SceneSpec {
                height: 0,
                ..spec()
            },
            SceneSpec {
                max_instances: 0,
                ..spec()
            },
        ] {
            assert!(matches!(generate_scene(0, &s), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn constant_map_has_no_contour() {
        let mut l = generate_scene(3, &spec()).unwrap();
        l.semantic.iter_mut().for_each(|v| *v = 1);
        l.instance.iter_mut().for_each(|v| *v = 0);
        assert!(contour_ground_truth(&l).map.iter().all(|&v| v == 0));
    }

    fn blank(h: usize, w: usize) -> PanopticLabel {
        PanopticLabel {
            height: h,
            width: w,
            semantic: vec![0; h * w],
            instance: vec![0; h * w],
            class_table: vec![
                ClassInfo {
                    class_id: 0,
                    is_thing: false,
                },
                ClassInfo {
                    class_id: 1,
                    is_thing: false,
                },
                ClassInfo {
                    class_id: 2,
                    is_thing: true,
                },
            ],
            image: vec![0.0; h * w * 3],
        }
    }

    #[test]
    fn half_planes_mark_the_two_middle_columns() {
        let mut l = blank(8, 8);
        for i in 0..8 {
            for j in 4..8 {
                l.semantic[i * 8 + j] = 1;
            }
        }
        let c = contour_ground_truth(&l);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(c.map[i * 8 + j] == 1, j == 3 || j == 4, "({i},{j})");
            }
        }
    }

    #[test]
    fn single_pixel_thing_gives_plus_ring() {
        let mut l = blank(5, 5);
        l.semantic[12] = 2;
        l.instance[12] = 1;
        let c = contour_ground_truth(&l);
        let ones: Vec<usize> = (0..25).filter(|&p| c.map[p] == 1).collect();
        assert_eq!(ones, vec![7, 11, 12, 13, 17]);
    }

    #[test]
    fn same_class_instances_share_no_contour() {
        let mut l = blank(4, 4);
        for p in 0..16 {
            l.semantic[p] = 2;
            l.instance[p] = if p % 4 < 2 { 1 } else { 2 };
        }
        assert!(contour_ground_truth(&l).map.iter().all(|&v| v == 0));
    }

    #[test]
    fn instance_on_stuff_is_a_format_error() {
        let mut l = blank(4, 4);
        l.instance[5] = 1;
        let err = decode_label(&encode_label(&l)).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("instance_map") && msg.contains("(1, 1)"),
            "{msg}"
        );
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let l = generate_scene(5, &spec()).unwrap();
        let bytes = encode_label(&l);
        for cut in [0, 7, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_label(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let l = generate_scene(9, &spec()).unwrap();
        let p = dir.path().join("a.pan");
        save_label(&p, &l).unwrap();
        assert_eq!(load_label(&p).unwrap(), l);
    }

    #[test]
    fn downsample_majority() {
        let mut l = blank(8, 8);
        for i in 0..4 {
            for j in 0..3 {
                l.semantic[i * 8 + j] = 2;
                l.instance[i * 8 + j] = 1;
            }
        }
        let (h, w, sem, inst) = downsample_labels(&l, 4);
        assert_eq!((h, w), (2, 2));
        assert_eq!(sem, vec![2, 0, 0, 0]);
        assert_eq!(inst, vec![1, 0, 0, 0]);
    }
}
