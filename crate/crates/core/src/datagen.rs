//! Procedural inharmonious composites.
//!
//! A scene is a vertical sky gradient over textured ground with a handful of
//! shapes on top. Every shape class has one color per image and at least
//! two harmonious shapes, so a shape whose colors were shifted stands out
//! against the majority of its own class. The inharmonious regions are
//! whole shapes; each gets an independent per-channel affine color shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::ImagePlane;
use crate::error::{Error, Result};
use crate::mask::RegionMask;
use crate::tensor::Tensor;

pub const LABEL_SKY: u8 = 0;
pub const LABEL_GROUND: u8 = 1;
pub const LABEL_ELLIPSE: u8 = 2;
pub const LABEL_RECT: u8 = 3;
pub const LABEL_BLOB: u8 = 4;
pub const NUM_CLASSES: usize = 5;

pub const MAX_REGIONS: usize = 9;
const PLACEMENT_TRIES: usize = 400;
const SHIFT_TRIES: usize = 200;
const SCENE_TRIES: usize = 50;
/// Harmonious shapes per class present in a scene.
const MIN_HARMONIOUS: usize = 2;

/// Smallest per-channel change of at least one channel.
pub const MIN_SCALE_DEVIATION: f64 = 0.1;
pub const MIN_OFFSET_DEVIATION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub scale_range: (f64, f64),
    pub offset_range: (f64, f64),
    /// Harmonious shapes added on top of the inharmonious ones.
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Ground texture amplitude.
    pub texture: f64,
    /// Global brightness jitter, as a fraction.
    pub illumination: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            min_regions: 1,
            max_regions: 1,
            scale_range: (0.6, 1.4),
            offset_range: (-0.25, 0.25),
            min_distractors: 2,
            max_distractors: 4,
            texture: 0.06,
            illumination: 0.15,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Multi-region mode: 2..=9 regions.
    pub fn multi_region() -> Self {
        Self {
            min_regions: 2,
            max_regions: MAX_REGIONS,
            min_distractors: 1,
            max_distractors: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Config(d));
        if self.height < 16 || self.width < 16 {
            return bad(format!("image {}x{} is smaller than 16x16", self.height, self.width));
        }
        if self.min_regions < 1 || self.max_regions > MAX_REGIONS || self.min_regions > self.max_regions {
            return bad(format!(
                "region range {}..={} must lie within 1..={MAX_REGIONS}",
                self.min_regions, self.max_regions
            ));
        }
        if self.min_distractors > self.max_distractors {
            return bad("min_distractors exceeds max_distractors".into());
        }
        let (a0, a1) = self.scale_range;
        let (b0, b1) = self.offset_range;
        if !(a0 > 0.0 && a0 < a1) || !(b0 < b1) {
            return bad("shift ranges must be non-empty with a positive scale".into());
        }
        if !(0.0..0.5).contains(&self.texture) || !(0.0..0.5).contains(&self.illumination) {
            return bad("texture and illumination must lie in [0, 0.5)".into());
        }
        Ok(())
    }
}

/// `v ↦ clamp(scale·v + offset, 0, 1)` per RGB channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorShift {
    pub scale: [f64; 3],
    pub offset: [f64; 3],
}

impl ColorShift {
    pub const IDENTITY: ColorShift = ColorShift {
        scale: [1.0; 3],
        offset: [0.0; 3],
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, config: &GeneratorConfig) -> Self {
        let (a0, a1) = config.scale_range;
        let (b0, b1) = config.offset_range;
        Self {
            scale: [0; 3].map(|_| rng.gen_range(a0..=a1)),
            offset: [0; 3].map(|_| rng.gen_range(b0..=b1)),
        }
    }

    /// Too close to the identity to be a usable sample.
    pub fn is_degenerate(&self) -> bool {
        !(0..3).any(|c| (self.scale[c] - 1.0).abs() >= MIN_SCALE_DEVIATION || self.offset[c].abs() >= MIN_OFFSET_DEVIATION)
    }

    pub fn apply(&self, channel: usize, v: f64) -> f64 {
        (self.scale[channel] * v + self.offset[channel]).clamp(0.0, 1.0)
    }
}

/// Round to the nearest multiple of 1/255.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    pub shifts: Vec<ColorShift>,
    /// Fewer regions than requested could be placed.
    pub warning: bool,
}

#[derive(Clone, Debug)]
pub struct CompositeSample {
    pub image: ImagePlane,
    /// The scene before any shift.
    pub base: ImagePlane,
    pub gt_mask: RegionMask,
    /// Row-major `H×W` class labels.
    pub labels: Vec<u8>,
    pub meta: SampleMeta,
}

/// splitmix64 of `seed` and `index`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` samples; sample `i` depends only on `(config.seed, i)`.
pub fn generate(config: &GeneratorConfig, n: usize) -> Result<Vec<CompositeSample>> {
    if n == 0 {
        return Err(Error::invalid("generate", "n must be at least 1"));
    }
    config.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| generate_one(config, sample_seed(config.seed, i as u64)))
        .collect()
}

#[derive(Clone, Debug)]
struct Shape {
    label: u8,
    /// Index into the placement plan.
    slot: usize,
    pixels: Vec<usize>,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [0; 3].map(|_| rng.gen_range(lo..hi))
}

/// 4-connected components of a boolean grid; `labels[p]` is the component
/// index or `usize::MAX` for background.
pub fn connected_components(grid: &[bool], height: usize, width: usize) -> (usize, Vec<usize>) {
    let mut comp = vec![usize::MAX; grid.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..grid.len() {
        if !grid[start] || comp[start] != usize::MAX {
            continue;
        }
        comp[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / width, p % width);
            let mut visit = |q: usize| {
                if grid[q] && comp[q] == usize::MAX {
                    comp[q] = count;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
        }
        count += 1;
    }
    (count, comp)
}

/// Rasterize one shape of `label` centered at `(cy, cx)`, keeping only its
/// largest 4-connected piece.
fn rasterize<R: Rng + ?Sized>(rng: &mut R, label: u8, cy: f64, cx: f64, ry: f64, rx: f64, h: usize, w: usize) -> Vec<usize> {
    let inside: Box<dyn Fn(f64, f64) -> bool> = match label {
        LABEL_ELLIPSE => Box::new(move |dy, dx| (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0),
        LABEL_RECT => Box::new(move |dy: f64, dx: f64| dy.abs() <= ry && dx.abs() <= rx),
        _ => {
            let k = 7;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let verts: Vec<(f64, f64)> = (0..k)
                .map(|i| {
                    let t = phase + std::f64::consts::TAU * i as f64 / k as f64;
                    let r = rng.gen_range(0.6..1.0);
                    (r * ry * t.sin(), r * rx * t.cos())
                })
                .collect();
            Box::new(move |dy, dx| {
                let mut odd = false;
                let mut j = verts.len() - 1;
                for i in 0..verts.len() {
                    let (yi, xi) = verts[i];
                    let (yj, xj) = verts[j];
                    if (yi > dy) != (yj > dy) && dx < (xj - xi) * (dy - yi) / (yj - yi) + xi {
                        odd = !odd;
                    }
                    j = i;
                }
                odd
            })
        }
    };
    let mut grid = vec![false; h * w];
    for (p, g) in grid.iter_mut().enumerate() {
        let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
        *g = inside(y - cy, x - cx);
    }
    let (count, comp) = connected_components(&grid, h, w);
    if count == 0 {
        return Vec::new();
    }
    let mut sizes = vec![0usize; count];
    comp.iter().filter(|&&c| c != usize::MAX).for_each(|&c| sizes[c] += 1);
    let best = (0..count).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap_or(0);
    (0..h * w).filter(|&p| comp[p] == best).collect()
}

/// Pixels occupied by `pixels` grown by one pixel in the 8-neighborhood.
fn dilate(pixels: &[usize], h: usize, w: usize, out: &mut [bool]) {
    for &p in pixels {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
}

/// Place up to `count` shapes with at least one background pixel between
/// any two.
fn place_shapes<R: Rng + ?Sized>(rng: &mut R, labels: &[u8], config: &GeneratorConfig, multi: bool) -> Vec<Shape> {
    let (h, w) = (config.height, config.width);
    let side = h.min(w) as f64;
    let (r_lo, r_hi) = if multi { (side / 16.0, side / 9.0) } else { (side / 10.0, side / 6.0) };
    let r_lo = r_lo.max(2.5);
    let r_hi = r_hi.max(r_lo + 0.5);
    let mut blocked = vec![false; h * w];
    let mut shapes = Vec::new();
    for (slot, &label) in labels.iter().enumerate() {
        for _ in 0..PLACEMENT_TRIES {
            let ry = rng.gen_range(r_lo..r_hi);
            let rx = rng.gen_range(r_lo..r_hi);
            let cy = rng.gen_range(ry..h as f64 - ry);
            let cx = rng.gen_range(rx..w as f64 - rx);
            let pixels = rasterize(rng, label, cy, cx, ry, rx, h, w);
            if pixels.len() < 4 || pixels.iter().any(|&p| blocked[p]) {
                continue;
            }
            dilate(&pixels, h, w, &mut blocked);
            shapes.push(Shape { label, slot, pixels });
            break;
        }
    }
    shapes
}

/// Render a sample from its derived seed.
pub fn generate_one(config: &GeneratorConfig, seed: u64) -> Result<CompositeSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Small images occasionally have no room left for a shifted shape and
    // its siblings; later attempts continue the same stream.
    for _ in 0..SCENE_TRIES {
        if let Some(s) = render(config, seed, &mut rng)? {
            return Ok(s);
        }
    }
    Err(Error::invalid(
        "generate",
        format!(
            "seed {seed}: no inharmonious region could be placed in a {}x{} image",
            config.height, config.width
        ),
    ))
}

/// One scene attempt; `None` when no region could be shifted.
fn render(config: &GeneratorConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<Option<CompositeSample>> {
    let (h, w) = (config.height, config.width);
    let hw = h * w;
    let requested = rng.gen_range(config.min_regions..=config.max_regions);
    let distractors = rng.gen_range(config.min_distractors..=config.max_distractors);
    let multi = config.max_regions > 1;

    // Every class in the scene gets at least two harmonious shapes, so the
    // shared class color is a majority that a shifted shape departs from.
    let classes = [LABEL_ELLIPSE, LABEL_RECT, LABEL_BLOB];
    let mut plan: Vec<(u8, bool)> = Vec::new();
    let mut used = Vec::new();
    for _ in 0..requested {
        let c = classes[rng.gen_range(0..classes.len())];
        plan.push((c, true));
        if !used.contains(&c) {
            used.push(c);
            plan.extend([(c, false); MIN_HARMONIOUS]);
        }
    }
    for _ in 0..distractors {
        let c = classes[rng.gen_range(0..classes.len())];
        let n = if used.contains(&c) { 1 } else { MIN_HARMONIOUS };
        used.push(c);
        plan.extend(std::iter::repeat_n((c, false), n));
    }
    let plan_labels: Vec<u8> = plan.iter().map(|p| p.0).collect();
    let mut shapes = place_shapes(rng, &plan_labels, config, multi);
    // Placement can fail. Demote planned regions while their class is short
    // of harmonious shapes, then drop classes left with a single shape.
    let mut shifted: Vec<bool> = shapes.iter().map(|s| plan[s.slot].1).collect();
    for c in classes {
        let of_class: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i].label == c).collect();
        let mut harmonious = of_class.iter().filter(|&&i| !shifted[i]).count();
        for &i in &of_class {
            if harmonious >= MIN_HARMONIOUS {
                break;
            }
            if shifted[i] {
                shifted[i] = false;
                harmonious += 1;
            }
        }
    }
    let keep: Vec<bool> = shapes
        .iter()
        .map(|s| shapes.iter().filter(|t| t.label == s.label).count() >= MIN_HARMONIOUS)
        .collect();
    let mut k = keep.iter();
    shapes.retain(|_| *k.next().unwrap());
    let mut k = keep.iter();
    shifted.retain(|_| *k.next().unwrap());

    // Scene colors.
    let sky_top = random_color(rng, 0.45, 0.95);
    let sky_bottom = random_color(rng, 0.35, 0.9);
    let ground = random_color(rng, 0.15, 0.6);
    let class_colors: Vec<[f64; 3]> = (0..NUM_CLASSES).map(|_| random_color(rng, 0.15, 0.85)).collect();
    let horizon = rng.gen_range(h as f64 / 3.0..h as f64 / 2.0);
    let freq = (rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let illum = 1.0 + rng.gen_range(-config.illumination..=config.illumination);

    let mut labels = vec![LABEL_SKY; hw];
    let mut base = vec![0.0; 3 * hw];
    for p in 0..hw {
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let color = if y < horizon {
            let t = y / horizon;
            [0, 1, 2].map(|c| sky_top[c] * (1.0 - t) + sky_bottom[c] * t)
        } else {
            labels[p] = LABEL_GROUND;
            let tex = config.texture * ((freq.0 * x + phase).sin() * (freq.1 * y).cos());
            ground.map(|v| v + tex)
        };
        for c in 0..3 {
            base[c * hw + p] = color[c];
        }
    }
    for s in &shapes {
        let col = class_colors[s.label as usize];
        let (y0, y1) = s.pixels.iter().fold((usize::MAX, 0), |(a, b), &p| (a.min(p / w), b.max(p / w)));
        let span = (y1 - y0).max(1) as f64;
        for &p in &s.pixels {
            // Light top-down shading shared by every shape.
            let shade = 1.05 - 0.1 * ((p / w - y0) as f64 / span);
            labels[p] = s.label;
            for c in 0..3 {
                base[c * hw + p] = col[c] * shade;
            }
        }
    }
    for v in base.iter_mut() {
        *v = quantize(*v * illum);
    }

    // Shift the planned inharmonious shapes that were placed, keeping the
    // area under half the image.
    let mut image = base.clone();
    let mut mask = vec![0.0; hw];
    let mut shifts = Vec::new();
    let mut area = 0;
    for (i, s) in shapes.iter().enumerate() {
        if !shifted[i] || 2 * (area + s.pixels.len()) >= hw {
            continue;
        }
        let found = (0..SHIFT_TRIES).find_map(|_| {
            let shift = ColorShift::sample(rng, config);
            if shift.is_degenerate() {
                return None;
            }
            let shifted: Vec<[f64; 3]> = s
                .pixels
                .iter()
                .map(|&p| [0, 1, 2].map(|c| quantize(shift.apply(c, base[c * hw + p]))))
                .collect();
            let all_changed = s
                .pixels
                .iter()
                .zip(&shifted)
                .all(|(&p, v)| (0..3).any(|c| v[c] != base[c * hw + p]));
            all_changed.then_some((shift, shifted))
        });
        let Some((shift, shifted)) = found else { continue };
        for (&p, v) in s.pixels.iter().zip(&shifted) {
            for c in 0..3 {
                image[c * hw + p] = v[c];
            }
            mask[p] = 1.0;
        }
        area += s.pixels.len();
        shifts.push(shift);
    }
    if shifts.is_empty() {
        return Ok(None);
    }
    let warning = shifts.len() < requested;
    Ok(Some(CompositeSample {
        image: ImagePlane::rgb(Tensor::new([3, h, w], image)?)?,
        base: ImagePlane::rgb(Tensor::new([3, h, w], base)?)?,
        gt_mask: RegionMask::new(h, w, mask)?,
        labels,
        meta: SampleMeta { seed, shifts, warning },
    }))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn components(mask: &RegionMask) -> usize {
        let grid: Vec<bool> = mask.data().iter().map(|&v| v == 1.0).collect();
        connected_components(&grid, mask.height(), mask.width()).0
    }

    #[test]
    fn identity_shift_is_degenerate() {
        assert!(ColorShift::IDENTITY.is_degenerate());
        let mut s = ColorShift::IDENTITY;
        s.offset[2] = 0.05;
        assert!(!s.is_degenerate());
        s.offset[2] = 0.0;
        s.scale[0] = 0.85;
        assert!(!s.is_degenerate());
        assert_eq!(ColorShift::IDENTITY.apply(1, 0.4), 0.4);
    }

    #[test]
    fn components_of_known_grid() {
        // x.x / x.x / xxx is one component; a lone pixel is another.
        let g = [
            true, false, true, false, //
            true, false, true, false, //
            true, true, true, false, //
            false, false, false, true,
        ];
        assert_eq!(connected_components(&g, 4, 4).0, 2);
        // Diagonal neighbors are not 4-connected.
        assert_eq!(connected_components(&[true, false, false, true], 2, 2).0, 2);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = GeneratorConfig { seed: 11, ..Default::default() };
        let a = generate(&cfg, 4).unwrap();
        let b = generate(&cfg, 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.gt_mask, y.gt_mask);
            assert_eq!(x.labels, y.labels);
        }
        let c = generate(&GeneratorConfig { seed: 12, ..cfg }, 1).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn sample_invariants_single_mode() {
        let cfg = GeneratorConfig { seed: 3, ..Default::default() };
        for s in generate(&cfg, 32).unwrap() {
            check_sample(&s, 1, 1);
        }
    }

    #[test]
    fn multi_region_components() {
        let cfg = GeneratorConfig {
            seed: 5,
            ..GeneratorConfig::multi_region()
        };
        let mut warned = 0;
        for s in generate(&cfg, 32).unwrap() {
            assert_eq!(components(&s.gt_mask), s.meta.shifts.len());
            if s.meta.warning {
                warned += 1;
            } else {
                assert!((2..=9).contains(&s.meta.shifts.len()));
            }
            check_sample(&s, 1, 9);
        }
        assert!(warned < 16, "{warned} of 32 samples fell short");
    }

    fn check_sample(s: &CompositeSample, lo: usize, hi: usize) {
        let (h, w) = (s.gt_mask.height(), s.gt_mask.width());
        let hw = h * w;
        assert!(s.gt_mask.is_binary());
        assert!(s.gt_mask.area_fraction() < 0.5);
        let n = s.meta.shifts.len();
        assert!((lo..=hi).contains(&n));
        assert_eq!(components(&s.gt_mask), n);
        let img = s.image.pixels().data();
        let base = s.base.pixels().data();
        for p in 0..hw {
            let differs = (0..3).any(|c| img[c * hw + p] != base[c * hw + p]);
            assert_eq!(differs, s.gt_mask.data()[p] == 1.0, "pixel {p}");
        }
        for v in img {
            assert_eq!(quantize(*v), *v);
        }
        // Each region sits on a single label.
        let grid: Vec<bool> = s.gt_mask.data().iter().map(|&v| v == 1.0).collect();
        let (count, comp) = connected_components(&grid, h, w);
        for c in 0..count {
            let mut ls: Vec<u8> = (0..hw).filter(|&p| comp[p] == c).map(|p| s.labels[p]).collect();
            ls.dedup();
            assert_eq!(ls.len(), 1);
            assert!(ls[0] >= LABEL_ELLIPSE);
            // Its class keeps a harmonious majority color.
            let rest: Vec<bool> = (0..hw).map(|p| s.labels[p] == ls[0] && !grid[p]).collect();
            assert!(connected_components(&rest, h, w).0 >= MIN_HARMONIOUS);
        }
        // No class is represented by a single shape.
        for label in [LABEL_ELLIPSE, LABEL_RECT, LABEL_BLOB] {
            let g: Vec<bool> = s.labels.iter().map(|&l| l == label).collect();
            assert_ne!(connected_components(&g, h, w).0, 1, "lone shape of class {label}");
        }
        for sh in &s.meta.shifts {
            assert!(!sh.is_degenerate());
        }
    }

    #[test]
    fn smallest_images_always_generate() {
        for mode in [GeneratorConfig::default(), GeneratorConfig::multi_region()] {
            let cfg = GeneratorConfig { height: 16, width: 16, seed: 21, ..mode };
            for s in generate(&cfg, 300).unwrap() {
                check_sample(&s, 1, 9);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&GeneratorConfig::default(), 0).is_err());
        let bad = GeneratorConfig { max_regions: 10, ..Default::default() };
        assert!(generate(&bad, 1).is_err());
        let bad = GeneratorConfig { min_regions: 3, max_regions: 2, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn any_seed_yields_valid_sample(seed in any::<u64>()) {
            let cfg = GeneratorConfig::default();
            let s = generate_one(&cfg, seed).unwrap();
            check_sample(&s, 1, 1);
        }
    }
}
