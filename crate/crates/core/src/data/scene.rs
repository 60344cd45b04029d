use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Click, ClickSet};
use crate::tensor::Array3;

use super::{mix_seed, ClassMask, Dataset, LabeledImage, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
}

/// Base colors of the first foreground classes; further classes get
/// seed-independent colors from [`class_color`].
const PALETTE: [[f64; 3]; 3] = [[0.78, 0.32, 0.30], [0.32, 0.70, 0.36], [0.30, 0.40, 0.80]];

fn class_color(class: u8) -> [f64; 3] {
    let k = class as usize - 1;
    if k < PALETTE.len() {
        return PALETTE[k];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(0xC0_10_25, class as u64));
    [0, 1, 2].map(|_| rng.random_range(0.2..0.85))
}

struct Placed {
    kind: ShapeKind,
    class: u8,
    cy: f64,
    cx: f64,
    /// Half extents (for discs both equal the radius).
    ry: f64,
    rx: f64,
    color: [f64; 3],
}

impl Placed {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.kind {
            ShapeKind::Disc => dy * dy + dx * dx <= self.ry * self.ry,
            ShapeKind::Rectangle => dy.abs() <= self.ry && dx.abs() <= self.rx,
            // apex at the top, base along the bottom edge
            ShapeKind::Triangle => {
                if dy < -self.ry || dy > self.ry {
                    return false;
                }
                let half = self.rx * (dy + self.ry) / (2.0 * self.ry);
                dx.abs() <= half
            }
        }
    }

    fn bounding_radius(&self) -> f64 {
        (self.ry * self.ry + self.rx * self.rx).sqrt()
    }
}

const PLACEMENT_TRIES: usize = 200;
const OBJECT_GAP: f64 = 2.0;

fn place_objects(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Vec<Placed> {
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..spec.classes) as u8;
        let kind = spec.shape_for(class);
        let base = class_color(class);
        let color = base.map(|c| c + rng.random_range(-1.0..=1.0) * spec.color_jitter);
        let mut size = rng.random_range(spec.min_size..=spec.max_size) as f64;
        let aspect = match kind {
            ShapeKind::Rectangle => rng.random_range(0.6..=1.0),
            _ => 1.0,
        };
        let wide = rng.random_bool(0.5);
        loop {
            let (ry, rx) = if wide { (size * aspect, size) } else { (size, size * aspect) };
            let mut found = None;
            for _ in 0..PLACEMENT_TRIES {
                let cy = rng.random_range(ry + 1.0..=h - 2.0 - ry);
                let cx = rng.random_range(rx + 1.0..=w - 2.0 - rx);
                let cand = Placed {
                    kind,
                    class,
                    cy,
                    cx,
                    ry,
                    rx,
                    color,
                };
                let clear = placed.iter().all(|p| {
                    let d = ((p.cy - cy).powi(2) + (p.cx - cx).powi(2)).sqrt();
                    d > p.bounding_radius() + cand.bounding_radius() + OBJECT_GAP
                });
                if clear {
                    found = Some(cand);
                    break;
                }
            }
            match found {
                Some(p) => {
                    placed.push(p);
                    break;
                }
                None if size > 3.0 => size -= 1.0,
                // nowhere left even for the smallest object
                None => break,
            }
        }
    }
    placed
}

/// Renders one deterministic scene.
pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Result<LabeledImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
    let (h, w) = (spec.height, spec.width);

    // smooth background: a tinted grey plus a few random plane waves per channel
    let bg: [f64; 3] = [0, 1, 2].map(|_| 0.5 + rng.random_range(-0.12..=0.12));
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let freq: f64 = rng.random_range(0.05..0.35);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            [freq * angle.cos(), freq * angle.sin(), phase, 0.0]
        })
        .collect();

    let objects = place_objects(&mut rng, spec);
    let mut mask = ClassMask::filled(h, w, 0);
    let mut owner = vec![usize::MAX; h * w];
    for (k, obj) in objects.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if obj.contains(y as f64, x as f64) {
                    mask.set(y, x, obj.class);
                    owner[y * w + x] = k;
                }
            }
        }
    }

    let mut image = Array3::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let o = owner[y * w + x];
            for ch in 0..3 {
                let base = if o == usize::MAX {
                    let t: f64 = waves[ch * 3..ch * 3 + 3]
                        .iter()
                        .map(|v| (v[0] * y as f64 + v[1] * x as f64 + v[2]).sin())
                        .sum::<f64>()
                        / 3.0;
                    bg[ch] + spec.texture_amplitude * t
                } else {
                    objects[o].color[ch]
                };
                let noise = rng.random_range(-1.0..=1.0) * spec.pixel_noise;
                image.set(y, x, ch, (base + noise).clamp(0.0, 1.0));
            }
        }
    }

    let clicks = sample_clicks(&mask, mix_seed(seed, 1), spec.background_clicks, spec.classes)?;
    Ok(LabeledImage {
        id: format!("scene-{seed}"),
        image,
        mask,
        clicks,
    })
}

/// 4-connected components of equal non-zero class, in scan order.
fn instances(mask: &ClassMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels[start] == 0 {
            continue;
        }
        let class = labels[start];
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && labels[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// One click inside every foreground instance plus `background_clicks` clicks
/// on background pixels.
pub fn sample_clicks(mask: &ClassMask, seed: u64, background_clicks: usize, classes: usize) -> Result<ClickSet> {
    let (h, w) = (mask.height(), mask.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let comps = instances(mask);
    if comps.is_empty() {
        return Err(Error::InvalidInput("mask has no foreground instance".into()));
    }
    for comp in &comps {
        let inside: Vec<usize> = {
            let member = |q: usize| comp.binary_search(&q).is_ok();
            comp.iter()
                .copied()
                .filter(|&p| {
                    let (y, x) = (p / w, p % w);
                    y > 0
                        && y + 1 < h
                        && x > 0
                        && x + 1 < w
                        && member(p - w)
                        && member(p + w)
                        && member(p - 1)
                        && member(p + 1)
                })
                .collect()
        };
        let pool = if inside.is_empty() { comp } else { &inside };
        let p = pool[rng.random_range(0..pool.len())];
        entries.push(Click {
            row: p / w,
            col: p % w,
            class: mask.labels()[p],
        });
    }
    let background: Vec<usize> = (0..h * w).filter(|&p| mask.labels()[p] == 0).collect();
    if background.len() < background_clicks {
        return Err(Error::InvalidInput(format!(
            "{background_clicks} background clicks requested but only {} background pixels",
            background.len()
        )));
    }
    for i in sample(&mut rng, background.len(), background_clicks) {
        let p = background[i];
        entries.push(Click {
            row: p / w,
            col: p % w,
            class: 0,
        });
    }
    ClickSet::new(h, w, classes, entries)
}

/// `count` scenes with ids `000000`, `000001`, …; item `i` uses seed
/// `mix_seed(seed, i)`.
pub fn generate_dataset(spec: &SceneSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let items = (0..count)
        .map(|i| {
            let mut item = gen_scene(mix_seed(seed, i as u64), spec)?;
            item.id = format!("{i:06}");
            Ok(item)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes: spec.classes,
        height: spec.height,
        width: spec.width,
        spec: Some(spec.clone()),
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(gen_scene(11, &spec).unwrap(), gen_scene(11, &spec).unwrap());
        assert_ne!(gen_scene(11, &spec).unwrap().image, gen_scene(12, &spec).unwrap().image);
    }

    #[test]
    fn fixed_object_count_gives_that_many_instances() {
        let spec = SceneSpec {
            min_objects: 2,
            max_objects: 2,
            ..SceneSpec::default()
        };
        for seed in 0..50 {
            let s = gen_scene(seed, &spec).unwrap();
            assert_eq!(instances(&s.mask).len(), 2, "seed {seed}");
        }
    }

    #[test]
    fn zero_objects_rejected() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            ..SceneSpec::default()
        };
        assert!(gen_scene(1, &spec).is_err());
    }

    #[test]
    fn single_disc_gets_one_interior_click() {
        let mut mask = ClassMask::filled(20, 20, 0);
        for y in 0..20 {
            for x in 0..20 {
                if (y as f64 - 9.0).powi(2) + (x as f64 - 10.0).powi(2) <= 16.0 {
                    mask.set(y, x, 2);
                }
            }
        }
        let clicks = sample_clicks(&mask, 3, 0, 4).unwrap();
        assert_eq!(clicks.len(), 1);
        let c = clicks.entries()[0];
        assert_eq!(c.class, 2);
        assert!((c.row as f64 - 9.0).powi(2) + (c.col as f64 - 10.0).powi(2) < 16.0);
        for (dy, dx) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
            assert_eq!(mask.get((c.row as i32 + dy) as usize, (c.col as i32 + dx) as usize), 2);
        }
    }

    #[test]
    fn three_instances_three_background() {
        let mut mask = ClassMask::filled(30, 30, 0);
        for (y0, x0, cls) in [(2, 2, 1u8), (2, 20, 1), (20, 10, 3)] {
            for y in y0..y0 + 5 {
                for x in x0..x0 + 5 {
                    mask.set(y, x, cls);
                }
            }
        }
        let clicks = sample_clicks(&mask, 9, 3, 4).unwrap();
        assert_eq!(clicks.len(), 6);
        for c in clicks.entries() {
            assert_eq!(mask.get(c.row, c.col), c.class);
        }
        assert_eq!(clicks.entries().iter().filter(|c| c.class == 0).count(), 3);
    }

    #[test]
    fn thin_instance_falls_back_to_any_pixel() {
        let mut mask = ClassMask::filled(10, 10, 0);
        for x in 2..7 {
            mask.set(4, x, 1);
        }
        let c = sample_clicks(&mask, 0, 1, 2).unwrap();
        assert_eq!(c.entries()[0].row, 4);
    }

    #[test]
    fn not_enough_background() {
        let mut mask = ClassMask::filled(4, 4, 1);
        mask.set(0, 0, 0);
        assert!(sample_clicks(&mask, 0, 2, 2).is_err());
    }

    #[test]
    fn generated_items_validate() {
        let d = generate_dataset(&SceneSpec::default(), 20, 4).unwrap();
        d.validate().unwrap();
        assert_eq!(d.items[3].id, "000003");
    }
}
