//! Procedural glyph concepts rendered into 16×16 grayscale latents.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{write_atomic, Container, NamedTensor};
use crate::diffusion::LatentImage;
use crate::error::{Error, Result};
use crate::rng::{derive, seeded};
use crate::vocab::{self, TokenId, TRIGGER_COUNT};

pub const SIDE: usize = 16;
const BACKGROUND: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Cross,
    Bar,
    Ring,
    Checker,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Disk, Shape::Cross, Shape::Bar, Shape::Ring, Shape::Checker];

    fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).expect("listed")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Smooth,
    Striped,
    Rippled,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Smooth, Texture::Striped, Texture::Rippled];

    fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).expect("listed")
    }
}

const SCALE_BUCKETS: [(f64, f64); 3] = [(2.6, 3.4), (4.1, 4.9), (5.6, 6.4)];
const INTENSITY_BUCKETS: [(f64, f64); 3] = [(0.3, 0.5), (0.55, 0.75), (0.8, 1.0)];

/// Number of distinct (shape, scale bucket, texture) cells.
pub const GRID_SIZE: usize = 5 * 3 * 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept_id: usize,
    pub shape: Shape,
    /// Glyph radius in pixels.
    pub scale: f64,
    pub scale_bucket: usize,
    pub texture: Texture,
    pub texture_phase: f64,
    pub intensity: f64,
    pub intensity_bucket: usize,
    /// Identity traits not captured by any attribute word: glyph center
    /// offset in pixels and rotation in radians.
    pub offset: (f64, f64),
    pub angle: f64,
    /// `None` for background concepts beyond the trigger vocabulary; their
    /// captions carry attribute words only.
    pub trigger: Option<TokenId>,
}

impl ConceptSpec {
    /// The true attribute words of this concept, in fixed order.
    pub fn attribute_tokens(&self) -> [TokenId; 4] {
        [
            vocab::SHAPE_TOKENS + self.shape.index() as TokenId,
            vocab::SCALE_TOKENS + self.scale_bucket as TokenId,
            vocab::TEXTURE_TOKENS + self.texture.index() as TokenId,
            vocab::INTENSITY_TOKENS + self.intensity_bucket as TokenId,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    /// Stable across runs; seeds every noise draw made for this image.
    pub id: u64,
    pub concept_id: usize,
    pub caption: Vec<TokenId>,
    pub split: Split,
    #[serde(skip, default = "blank")]
    pub image: LatentImage,
}

fn blank() -> LatentImage {
    LatentImage::zeros(SIDE)
}

pub fn image_id(concept: usize, index: usize) -> u64 {
    ((concept as u64) << 20) | index as u64
}

pub fn generate_concepts(n: usize, seed: u64) -> Result<Vec<ConceptSpec>> {
    if n < 2 {
        return Err(Error::arg("need at least 2 concepts"));
    }
    if n > GRID_SIZE {
        return Err(Error::arg(format!(
            "{n} concepts exceed the parameter grid of {GRID_SIZE} (5 shapes x 3 scales x 3 textures)"
        )));
    }
    let mut rng = seeded(derive(seed, &[0xC0]));
    let mut cells: Vec<(usize, usize, usize)> = (0..5)
        .flat_map(|s| (0..3).flat_map(move |c| (0..3).map(move |t| (s, c, t))))
        .collect();
    cells.shuffle(&mut rng);
    Ok(cells
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, (s, c, t))| {
            let (lo, hi) = SCALE_BUCKETS[c];
            let ib = rng.random_range(0..3);
            let (ilo, ihi) = INTENSITY_BUCKETS[ib];
            ConceptSpec {
                concept_id: i,
                shape: Shape::ALL[s],
                scale: rng.random_range(lo..hi),
                scale_bucket: c,
                texture: Texture::ALL[t],
                texture_phase: rng.random_range(0.0..std::f64::consts::TAU),
                intensity: rng.random_range(ilo..ihi),
                intensity_bucket: ib,
                offset: (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                angle: rng.random_range(0.0..std::f64::consts::FRAC_PI_2),
                trigger: (i < TRIGGER_COUNT).then(|| vocab::trigger(i)),
            }
        })
        .collect())
}

fn smoothstep(edge: f64) -> f64 {
    // soft inside-indicator for a signed distance (positive inside)
    (edge * 2.0).clamp(-1.0, 1.0) * 0.5 + 0.5
}

/// Renders one image; `jitter_seed = None` places the glyph exactly at the
/// concept's own center.
pub fn render(spec: &ConceptSpec, jitter_seed: Option<u64>) -> LatentImage {
    let (jx, jy, jp) = match jitter_seed {
        Some(s) => {
            let mut rng = seeded(s);
            (
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.4..0.4),
            )
        }
        None => (0.0, 0.0, 0.0),
    };
    let c = (SIDE as f64 - 1.0) / 2.0;
    let r_max = spec.scale;
    let phase = spec.texture_phase + jp;
    let (sin, cos) = spec.angle.sin_cos();
    let mut pixels = Vec::with_capacity(SIDE * SIDE);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let ux = x as f64 - c - spec.offset.0 - jx;
            let uy = y as f64 - c - spec.offset.1 - jy;
            let dx = cos * ux + sin * uy;
            let dy = cos * uy - sin * ux;
            let r = (dx * dx + dy * dy).sqrt();
            let mask = match spec.shape {
                Shape::Disk => smoothstep(r_max - r),
                Shape::Ring => smoothstep(1.3 - (r - r_max * 0.8).abs()),
                Shape::Cross => {
                    let arm = |a: f64, b: f64| smoothstep(1.3 - a.abs()).min(smoothstep(r_max - b.abs()));
                    arm(dx, dy).max(arm(dy, dx))
                }
                Shape::Bar => smoothstep(1.7 - dy.abs()).min(smoothstep(r_max - dx.abs())),
                Shape::Checker => {
                    let inside = smoothstep(r_max - dx.abs()).min(smoothstep(r_max - dy.abs()));
                    let cell = ((dx + 16.0) / 2.0).floor() as i64 + ((dy + 16.0) / 2.0).floor() as i64;
                    if cell % 2 == 0 {
                        inside
                    } else {
                        inside * 0.35
                    }
                }
            };
            let tex = match spec.texture {
                Texture::Smooth => 1.0,
                Texture::Striped => 0.5 + 0.5 * (std::f64::consts::TAU * dx / 3.0 + phase).cos(),
                Texture::Rippled => 0.5 + 0.5 * (std::f64::consts::TAU * r / 3.5 + phase).cos(),
            };
            let fg = (1.0 + spec.intensity) * (0.45 + 0.55 * tex);
            pixels.push((BACKGROUND + mask * fg).clamp(-1.0, 1.0));
        }
    }
    LatentImage::new(SIDE, pixels).expect("fixed geometry")
}

/// Trigger (if any) plus 2–4 of the concept's attribute words in random order.
fn caption(spec: &ConceptSpec, rng: &mut impl Rng) -> Vec<TokenId> {
    let mut attrs = spec.attribute_tokens().to_vec();
    attrs.shuffle(rng);
    attrs.truncate(rng.random_range(2..=4));
    let mut tokens = attrs;
    let at = rng.random_range(0..=tokens.len());
    if let Some(t) = spec.trigger {
        tokens.insert(at, t);
    }
    tokens
}

pub fn build_corpus(specs: &[ConceptSpec], per_concept: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if per_concept < 4 || per_concept % 2 != 0 {
        return Err(Error::arg(format!(
            "per-concept count {per_concept} must be even and at least 4"
        )));
    }
    let mut out = Vec::with_capacity(specs.len() * per_concept);
    for spec in specs {
        let mut rng = seeded(derive(seed, &[0xCA, spec.concept_id as u64]));
        for i in 0..per_concept {
            out.push(LabeledImage {
                id: image_id(spec.concept_id, i),
                concept_id: spec.concept_id,
                caption: caption(spec, &mut rng),
                split: if i < per_concept / 2 { Split::Train } else { Split::Test },
                image: render(spec, Some(derive(seed, &[0x1A, spec.concept_id as u64, i as u64]))),
            });
        }
    }
    Ok(out)
}

/// Reorders a corpus without touching its members.
pub fn shuffled(corpus: &[LabeledImage], seed: u64) -> Vec<LabeledImage> {
    let mut v = corpus.to_vec();
    v.shuffle(&mut seeded(derive(seed, &[0x5F])));
    v
}

pub fn select<'a>(corpus: &'a [LabeledImage], concepts: &[usize], split: Option<Split>) -> Vec<&'a LabeledImage> {
    corpus
        .iter()
        .filter(|im| concepts.contains(&im.concept_id) && split.is_none_or(|s| im.split == s))
        .collect()
}

/// Pixelwise mean image of a set.
pub fn mean_image<'a>(images: impl IntoIterator<Item = &'a LatentImage>) -> Result<LatentImage> {
    let mut acc: Option<Vec<f64>> = None;
    let mut side = 0;
    let mut n = 0usize;
    for im in images {
        side = im.side;
        let a = acc.get_or_insert_with(|| vec![0.0; im.pixels().len()]);
        if a.len() != im.pixels().len() {
            return Err(Error::arg("images of different sizes"));
        }
        for (s, v) in a.iter_mut().zip(im.pixels()) {
            *s += v;
        }
        n += 1;
    }
    let acc = acc.ok_or_else(|| Error::arg("mean of no images"))?;
    LatentImage::new(side, acc.into_iter().map(|v| v / n as f64).collect())
}

pub const CORPUS_MANIFEST: &str = "corpus.json";
pub const CORPUS_IMAGES: &str = "images.bin";
const CORPUS_KIND: &str = "corpus";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub seed: u64,
    pub specs: Vec<ConceptSpec>,
    pub images: Vec<LabeledImage>,
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    side: usize,
    count: usize,
}

impl Corpus {
    pub fn generate(concepts: usize, per_concept: usize, seed: u64) -> Result<Self> {
        let specs = generate_concepts(concepts, seed)?;
        let images = build_corpus(&specs, per_concept, seed)?;
        Ok(Self { seed, specs, images })
    }

    pub fn spec(&self, concept: usize) -> Result<&ConceptSpec> {
        self.specs
            .iter()
            .find(|s| s.concept_id == concept)
            .ok_or_else(|| Error::Integrity(format!("concept {concept} not in corpus")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Format(format!("corpus manifest: {e}")))?;
        write_atomic(&dir.join(CORPUS_MANIFEST), &manifest)?;
        let mut c = Container::new(
            CORPUS_KIND,
            &CorpusHeader {
                side: SIDE,
                count: self.images.len(),
            },
        )?;
        for im in &self.images {
            c.push(NamedTensor::from_matrix(im.id.to_string(), &im.image.matrix));
        }
        c.write(&dir.join(CORPUS_IMAGES))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join(CORPUS_MANIFEST);
        let bytes = std::fs::read(&mpath).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: mpath.clone(),
                hint: "run `paia gen-data` first".into(),
            },
            _ => Error::io(&mpath, e),
        })?;
        let mut corpus: Corpus = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        let c = Container::read(&dir.join(CORPUS_IMAGES))?;
        c.expect_kind(CORPUS_KIND)?;
        let h: CorpusHeader = c.header()?;
        if h.count != corpus.images.len() || c.tensors.len() != h.count {
            return Err(Error::Integrity("image container and manifest disagree".into()));
        }
        for (im, t) in corpus.images.iter_mut().zip(&c.tensors) {
            if t.name != im.id.to_string() {
                return Err(Error::Integrity(format!("image {} out of order", im.id)));
            }
            im.image = LatentImage {
                side: h.side,
                matrix: t.to_matrix()?,
            };
        }
        Ok(corpus)
    }
}
