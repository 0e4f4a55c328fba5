//! Synthetic person scenes, dataset manifests and the query protocol.
//!
//! A "person" is a square patch whose two interior colors and their vertical
//! order are fixed per identity, framed by a dark border. Scenes scatter a few
//! such patches over a noisy textured background. Generation writes
//! `train/` and `test/` splits, each with PNG images and a `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::numerics::{Rng, Tensor};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MAX_OVERLAP_IOU: f64 = 0.3;
pub const PLACEMENT_ATTEMPTS: usize = 1000;
pub const MIN_PATCH: usize = 8;

const PALETTE: [[u8; 3]; 9] = [
    [220, 40, 40],
    [40, 180, 60],
    [40, 80, 220],
    [230, 210, 50],
    [40, 200, 210],
    [200, 60, 200],
    [245, 245, 245],
    [240, 140, 30],
    [110, 60, 25],
];
const BORDER: [u8; 3] = [25, 25, 25];

/// Largest identity count the palette supports.
pub const MAX_IDENTITIES: usize = PALETTE.len() * (PALETTE.len() - 1) / 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub unlabeled_fraction: f64,
    pub scenes_train: usize,
    pub scenes_test: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub persons_min: usize,
    pub persons_max: usize,
    pub patch_min: usize,
    pub patch_max: usize,
    /// Relative brightness jitter per instance.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_identities: 16,
            unlabeled_fraction: 0.25,
            scenes_train: 200,
            scenes_test: 40,
            image_height: 96,
            image_width: 96,
            persons_min: 1,
            persons_max: 4,
            patch_min: 20,
            patch_max: 34,
            jitter: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=MAX_IDENTITIES).contains(&self.n_identities) {
            return fail(format!(
                "n_identities must lie in 2..={MAX_IDENTITIES}, got {}",
                self.n_identities
            ));
        }
        if !(0.0..1.0).contains(&self.unlabeled_fraction) {
            return fail(format!("unlabeled_fraction must lie in [0, 1), got {}", self.unlabeled_fraction));
        }
        if self.labeled_count() == 0 {
            return fail("no labeled identities would remain".into());
        }
        if self.scenes_train == 0 || self.scenes_test < 2 {
            return fail("need at least one train scene and two test scenes".into());
        }
        if !(1 <= self.persons_min && self.persons_min <= self.persons_max) {
            return fail("persons range must satisfy 1 <= min <= max".into());
        }
        if self.persons_max > self.n_identities {
            return fail("persons_max exceeds the identity count (identities never repeat in a scene)".into());
        }
        if !(MIN_PATCH <= self.patch_min && self.patch_min <= self.patch_max) {
            return fail(format!("patch sizes must satisfy {MIN_PATCH} <= min <= max"));
        }
        if self.patch_max > self.image_height.min(self.image_width) {
            return fail("patch_max exceeds the image size".into());
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return fail(format!("jitter must lie in [0, 1), got {}", self.jitter));
        }
        Ok(())
    }

    pub fn unlabeled_count(&self) -> usize {
        (self.unlabeled_fraction * self.n_identities as f64).floor() as usize
    }

    pub fn labeled_count(&self) -> usize {
        self.n_identities - self.unlabeled_count()
    }
}

/// RGB patch, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub size: usize,
    pub pixels: Vec<[u8; 3]>,
}

/// Colors (top, bottom) of every identity under `seed`.
pub fn identity_colors(n_identities: usize, seed: u64) -> Vec<([u8; 3], [u8; 3])> {
    let mut pairs = Vec::with_capacity(MAX_IDENTITIES);
    for a in 0..PALETTE.len() {
        for b in a + 1..PALETTE.len() {
            pairs.push((a, b));
        }
    }
    let mut rng = Rng::new(seed).fork(0x1d);
    rng.shuffle(&mut pairs);
    pairs
        .into_iter()
        .take(n_identities)
        .map(|(a, b)| {
            if rng.below(2) == 0 {
                (PALETTE[a], PALETTE[b])
            } else {
                (PALETTE[b], PALETTE[a])
            }
        })
        .collect()
}

/// Renders instance `instance` of identity `identity`. The appearance depends
/// only on `(identity, seed)`; `jitter` scales brightness by a per-instance
/// factor in `[1 - jitter, 1 + jitter]`.
pub fn render_identity_patch(
    identity: usize,
    size: usize,
    seed: u64,
    instance: u64,
    jitter: f64,
) -> Result<Patch> {
    if size < MIN_PATCH {
        return Err(Error::Config(format!("patch size must be >= {MIN_PATCH}, got {size}")));
    }
    if identity >= MAX_IDENTITIES {
        return Err(Error::Index {
            what: "identity",
            index: identity,
            len: MAX_IDENTITIES,
        });
    }
    let (top, bottom) = identity_colors(identity + 1, seed)[identity];
    let gain = if jitter > 0.0 {
        let mut rng = Rng::new(seed).fork(0x9a7c_0000 ^ ((identity as u64) << 40) ^ instance);
        1.0 + rng.range(-jitter, jitter)
    } else {
        1.0
    };
    let scale = |c: [u8; 3]| c.map(|v| (v as f64 * gain).round().clamp(0.0, 255.0) as u8);
    let (top, bottom) = (scale(top), scale(bottom));
    let border = (size / 10).max(1);
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let edge = x < border || y < border || x >= size - border || y >= size - border;
            pixels.push(if edge {
                BORDER
            } else if y < size / 2 {
                top
            } else {
                bottom
            });
        }
    }
    Ok(Patch { size, pixels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneAnnotation {
    pub image_id: String,
    /// Relative to the manifest.
    pub image_path: String,
    pub boxes: Vec<BBox>,
    /// `-1` for unlabeled persons.
    pub pids: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub scenes: Vec<SceneAnnotation>,
}

/// A loaded scene: annotation plus image as `[3, H, W]` with values in
/// `[-0.5, 0.5]`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub annotation: SceneAnnotation,
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub image_size: [usize; 2],
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn find(&self, image_id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.annotation.image_id == image_id)
    }
}

/// Paths of a generated dataset directory.
pub fn split_manifest(root: &Path, split: &str) -> PathBuf {
    root.join(split).join("manifest.json")
}

pub fn rgb_to_tensor(rgb: &[u8], height: usize, width: usize) -> Result<Tensor> {
    if rgb.len() != 3 * height * width {
        return Err(Error::Shape(format!("{} bytes for a {height}x{width} RGB image", rgb.len())));
    }
    let hw = height * width;
    let mut data = vec![0.0; 3 * hw];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + p] = px[c] as f64 / 255.0 - 0.5;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

pub fn write_png(path: &Path, rgb: &[u8], height: usize, width: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(rgb).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

/// Decodes an 8-bit RGB PNG into `(bytes, height, width)`.
pub fn read_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img_err = |m: String| Error::Image {
        path: path.to_path_buf(),
        message: m,
    };
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| img_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| img_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!(
            "expected 8-bit RGB, got {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.height as usize, info.width as usize))
}

struct SceneSpec {
    identities: Vec<usize>,
}

fn background(cfg: &SynthConfig, rng: &mut Rng) -> Vec<u8> {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let base = rng.range(90.0, 160.0);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.range(-8.0, 8.0));
    let (fx, fy) = (rng.range(0.05, 0.3), rng.range(0.05, 0.3));
    let phase = rng.range(0.0, std::f64::consts::TAU);
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let wave = 14.0 * (fx * x as f64 + fy * y as f64 + phase).sin();
            for t in tint {
                let v = base + t + wave + rng.range(-12.0, 12.0);
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Places square boxes of the given sizes with pairwise IoU ≤ 0.3.
fn place(sizes: &[usize], cfg: &SynthConfig, rng: &mut Rng, scene: &str) -> Result<Vec<BBox>> {
    let mut placed: Vec<BBox> = Vec::with_capacity(sizes.len());
    let mut attempts = 0;
    for &s in sizes {
        loop {
            attempts += 1;
            if attempts > PLACEMENT_ATTEMPTS {
                return Err(Error::Generation(format!(
                    "{scene}: placed {} of {} persons (sizes {sizes:?}) in a {}x{} image after {PLACEMENT_ATTEMPTS} attempts",
                    placed.len(),
                    sizes.len(),
                    cfg.image_height,
                    cfg.image_width
                )));
            }
            let x = rng.int_in(0, cfg.image_width - s) as f64;
            let y = rng.int_in(0, cfg.image_height - s) as f64;
            let b = BBox::new(x, y, x + s as f64, y + s as f64);
            if placed.iter().all(|p| iou(p, &b) <= MAX_OVERLAP_IOU) {
                placed.push(b);
                break;
            }
        }
    }
    Ok(placed)
}

fn random_scene(cfg: &SynthConfig, rng: &mut Rng) -> SceneSpec {
    let n = rng.int_in(cfg.persons_min, cfg.persons_max);
    let pool: Vec<usize> = (0..cfg.n_identities).collect();
    SceneSpec {
        identities: rng.choose_k(&pool, n),
    }
}

/// Test scenes where every labeled identity occurs in at least two scenes.
fn test_scenes(cfg: &SynthConfig, labeled: &[usize], rng: &mut Rng) -> Result<Vec<SceneSpec>> {
    let n = cfg.scenes_test;
    let counts: Vec<usize> = (0..n).map(|_| rng.int_in(cfg.persons_min, cfg.persons_max)).collect();
    let mut specs: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut slots: Vec<usize> = labeled.iter().flat_map(|&i| [i, i]).collect();
    rng.shuffle(&mut slots);
    for id in slots {
        let open: Vec<usize> = (0..n)
            .filter(|&s| specs[s].len() < counts[s] && !specs[s].contains(&id))
            .collect();
        let open = if open.is_empty() {
            // Grow the emptiest scene that can still take a person.
            (0..n)
                .filter(|&s| specs[s].len() < cfg.persons_max && !specs[s].contains(&id))
                .min_by_key(|&s| (specs[s].len(), s))
                .into_iter()
                .collect()
        } else {
            open
        };
        let Some(&s) = open.get(rng.below(open.len().max(1))) else {
            return Err(Error::Generation(format!(
                "cannot give every labeled identity two test scenes with {n} scenes of at most {} persons",
                cfg.persons_max
            )));
        };
        specs[s].push(id);
    }
    for (s, ids) in specs.iter_mut().enumerate() {
        let rest: Vec<usize> = (0..cfg.n_identities).filter(|i| !ids.contains(i)).collect();
        let want = counts[s].saturating_sub(ids.len());
        ids.extend(rng.choose_k(&rest, want));
        rng.shuffle(ids);
    }
    Ok(specs.into_iter().map(|identities| SceneSpec { identities }).collect())
}

/// Maps identity index to annotated pid: labeled identities get `0..K_lab`
/// in index order, the seeded unlabeled subset gets `-1`.
pub fn identity_pids(cfg: &SynthConfig) -> Vec<i64> {
    let mut rng = Rng::new(cfg.seed).fork(0x0b);
    let pool: Vec<usize> = (0..cfg.n_identities).collect();
    let unlabeled: BTreeSet<usize> = rng.choose_k(&pool, cfg.unlabeled_count()).into_iter().collect();
    let mut next = 0;
    (0..cfg.n_identities)
        .map(|i| {
            if unlabeled.contains(&i) {
                -1
            } else {
                next += 1;
                next - 1
            }
        })
        .collect()
}

fn render_split(
    cfg: &SynthConfig,
    specs: &[SceneSpec],
    split: &str,
    pids: &[i64],
    rng: &mut Rng,
    instance: &mut u64,
) -> Result<(Manifest, Vec<Vec<u8>>)> {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut scenes = Vec::with_capacity(specs.len());
    let mut images = Vec::with_capacity(specs.len());
    for (s, spec) in specs.iter().enumerate() {
        let image_id = format!("{split}_{s:04}");
        let sizes: Vec<usize> = spec
            .identities
            .iter()
            .map(|_| rng.int_in(cfg.patch_min, cfg.patch_max))
            .collect();
        let boxes = place(&sizes, cfg, rng, &image_id)?;
        let mut img = background(cfg, rng);
        for (&id, b) in spec.identities.iter().zip(&boxes) {
            let patch = render_identity_patch(id, b.width() as usize, cfg.seed, *instance, cfg.jitter)?;
            *instance += 1;
            let (x0, y0) = (b.x1 as usize, b.y1 as usize);
            for py in 0..patch.size {
                for px in 0..patch.size {
                    let o = 3 * ((y0 + py) * w + x0 + px);
                    img[o..o + 3].copy_from_slice(&patch.pixels[py * patch.size + px]);
                }
            }
        }
        scenes.push(SceneAnnotation {
            image_path: format!("images/{image_id}.png"),
            image_id,
            boxes,
            pids: spec.identities.iter().map(|&i| pids[i]).collect(),
        });
        images.push(img);
    }
    Ok((
        Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            image_size: [h, w],
            scenes,
        },
        images,
    ))
}

/// Writes `out_dir/{train,test}/manifest.json` and the PNGs next to them.
/// Output bytes are a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<(Manifest, Manifest)> {
    cfg.validate()?;
    let pids = identity_pids(cfg);
    let labeled: Vec<usize> = (0..cfg.n_identities).filter(|&i| pids[i] >= 0).collect();
    let mut rng = Rng::new(cfg.seed).fork(0x5c);
    let train_specs: Vec<SceneSpec> = (0..cfg.scenes_train).map(|_| random_scene(cfg, &mut rng)).collect();
    let test_specs = test_scenes(cfg, &labeled, &mut rng)?;
    let mut instance = 0;
    let mut out = Vec::new();
    for (split, specs) in [("train", &train_specs), ("test", &test_specs)] {
        let (manifest, images) = render_split(cfg, specs, split, &pids, &mut rng, &mut instance)?;
        let dir = out_dir.join(split);
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (scene, img) in manifest.scenes.iter().zip(&images) {
            write_png(&dir.join(&scene.image_path), img, cfg.image_height, cfg.image_width)?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        out.push(manifest);
    }
    let test = out.pop().expect("two splits");
    let train = out.pop().expect("two splits");
    Ok((train, test))
}

/// Checks the annotation invariants of one scene.
pub fn validate_scene(scene: &SceneAnnotation, image_size: [usize; 2]) -> Result<()> {
    let fail = |m: String| Err(Error::Validation(format!("scene `{}`: {m}", scene.image_id)));
    if scene.boxes.len() != scene.pids.len() {
        return fail(format!("{} boxes but {} pids", scene.boxes.len(), scene.pids.len()));
    }
    let (h, w) = (image_size[0] as f64, image_size[1] as f64);
    for (i, b) in scene.boxes.iter().enumerate() {
        if !b.is_valid() {
            return fail(format!("box {i} {:?} is degenerate", <[f64; 4]>::from(*b)));
        }
        if !b.within(w, h) {
            return fail(format!("box {i} {:?} exceeds image bounds {w}x{h}", <[f64; 4]>::from(*b)));
        }
    }
    if let Some(&p) = scene.pids.iter().find(|&&p| p < -1) {
        return fail(format!("pid {p} is neither -1 nor a labeled identity"));
    }
    for i in 0..scene.boxes.len() {
        for j in i + 1..scene.boxes.len() {
            let o = iou(&scene.boxes[i], &scene.boxes[j]);
            if o > MAX_OVERLAP_IOU + 1e-12 {
                return fail(format!("boxes {i} and {j} overlap with IoU {o}"));
            }
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if m.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "{}: unsupported manifest format_version {}",
            path.display(),
            m.format_version
        )));
    }
    if m.image_size.contains(&0) {
        return Err(Error::Validation(format!("{}: empty image size", path.display())));
    }
    let mut ids = BTreeSet::new();
    for s in &m.scenes {
        validate_scene(s, m.image_size)?;
        if !ids.insert(s.image_id.as_str()) {
            return Err(Error::Validation(format!("duplicate image_id `{}`", s.image_id)));
        }
    }
    Ok(m)
}

/// Loads a manifest and all its images, re-checking every invariant.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let m = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let [h, w] = m.image_size;
    let mut scenes = Vec::with_capacity(m.scenes.len());
    for a in m.scenes {
        let path = root.join(&a.image_path);
        if !path.is_file() {
            return Err(Error::Validation(format!(
                "scene `{}`: image file {} is missing",
                a.image_id,
                path.display()
            )));
        }
        let (rgb, ih, iw) = read_png(&path)?;
        if (ih, iw) != (h, w) {
            return Err(Error::Validation(format!(
                "scene `{}`: image is {ih}x{iw}, manifest says {h}x{w}",
                a.image_id
            )));
        }
        scenes.push(Scene {
            image: rgb_to_tensor(&rgb, h, w)?,
            annotation: a,
        });
    }
    Ok(Dataset { image_size: m.image_size, scenes })
}

/// A query person: its scene and ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub pid: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolQuery {
    pub query: QuerySpec,
    pub gallery: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GallerySetting {
    pub gallery_size: usize,
    /// Requested size capped at the number of scenes other than the query's.
    pub effective_size: usize,
    pub queries: Vec<ProtocolQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub settings: Vec<GallerySetting>,
    /// Labeled pids without a second scene.
    pub excluded: Vec<i64>,
}

/// One query per labeled identity at a seeded occurrence. Each gallery holds
/// positives (other scenes with the identity) up to one less than the gallery
/// size, then distractor scenes, then any leftover positives. Galleries of
/// different sizes are nested.
pub fn make_protocol(scenes: &[SceneAnnotation], gallery_sizes: &[usize], seed: u64) -> Result<Protocol> {
    let n = scenes.len();
    for &g in gallery_sizes {
        if g == 0 || g > n {
            return Err(Error::Config(format!("gallery size {g} must lie in 1..={n}")));
        }
    }
    let mut occurrences: BTreeMap<i64, Vec<(usize, usize)>> = BTreeMap::new();
    for (s, a) in scenes.iter().enumerate() {
        for (b, &p) in a.pids.iter().enumerate() {
            if p >= 0 {
                occurrences.entry(p).or_default().push((s, b));
            }
        }
    }
    let root = Rng::new(seed);
    let mut excluded = Vec::new();
    let mut plans = Vec::new();
    for (&pid, occ) in &occurrences {
        let with: BTreeSet<usize> = occ.iter().map(|&(s, _)| s).collect();
        if with.len() < 2 {
            log::warn!("pid {pid} occurs in fewer than two scenes; excluded from the protocol");
            excluded.push(pid);
            continue;
        }
        let mut rng = root.fork(pid as u64);
        let (qs, qb) = occ[rng.below(occ.len())];
        let mut positives: Vec<usize> = with.iter().copied().filter(|&s| s != qs).collect();
        let mut distractors: Vec<usize> = (0..n).filter(|s| !with.contains(s)).collect();
        rng.shuffle(&mut positives);
        rng.shuffle(&mut distractors);
        let query = QuerySpec {
            image_id: scenes[qs].image_id.clone(),
            bbox: scenes[qs].boxes[qb],
            pid,
        };
        plans.push((query, positives, distractors));
    }
    let settings = gallery_sizes
        .iter()
        .map(|&g| {
            let eff = g.min(n - 1);
            let queries = plans
                .iter()
                .map(|(query, pos, dis)| {
                    let np = pos.len().min(eff.saturating_sub(1).max(1));
                    let mut pick: Vec<usize> = pos[..np].to_vec();
                    pick.extend(dis.iter().take(eff - np));
                    pick.extend(pos[np..].iter().take(eff - pick.len()));
                    pick.sort_unstable();
                    ProtocolQuery {
                        query: query.clone(),
                        gallery: pick.into_iter().map(|s| scenes[s].image_id.clone()).collect(),
                    }
                })
                .collect();
            GallerySetting {
                gallery_size: g,
                effective_size: eff,
                queries,
            }
        })
        .collect();
    Ok(Protocol { settings, excluded })
}
