//! Synthetic scenes, a deterministic toy joint encoder, and the binary
//! feature-file format.
//!
//! A scene places 1–3 coloured shapes on a 3×3 grid. Scenes and captions
//! are encoded into the same 64-dimensional space: attribute counts are
//! projected through a fixed random basis onto the first 63 coordinates,
//! and the last coordinate is reserved for captions that mention nothing.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::vocab::{tokenize, Vocabulary};

pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "orange", "black", "white",
];
pub const SHAPES: [&str; 6] = ["circle", "square", "triangle", "star", "heart", "cross"];
/// Grid cells in row-major order.
pub const CELLS: [&str; 9] = [
    "northwest",
    "north",
    "northeast",
    "west",
    "center",
    "east",
    "southwest",
    "south",
    "southeast",
];
const CONNECTIVES: [&str; 7] = ["a", "and", "at", "has", "there", "is", "in"];

pub const TOY_FEAT_DIM: usize = 64;
const BASIS_SEED: u64 = 0x5eed_ba5e;
const N_TRIPLES: usize = COLORS.len() * SHAPES.len() * CELLS.len();
const N_RAW: usize = N_TRIPLES + COLORS.len() + SHAPES.len() + CELLS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyScene {
    pub objects: Vec<SceneObject>,
}

impl ToyScene {
    pub fn is_valid(&self) -> bool {
        let cells: BTreeSet<usize> = self.objects.iter().map(|o| o.cell).collect();
        (1..=3).contains(&self.objects.len())
            && cells.len() == self.objects.len()
            && self
                .objects
                .iter()
                .all(|o| o.color < COLORS.len() && o.shape < SHAPES.len() && o.cell < CELLS.len())
    }

    /// Objects as an order-independent set.
    pub fn attribute_set(&self) -> BTreeSet<SceneObject> {
        self.objects.iter().copied().collect()
    }
}

pub fn gen_scene(seed: u64) -> ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=3);
    let mut cells: Vec<usize> = (0..CELLS.len()).collect();
    cells.shuffle(&mut rng);
    let objects = cells[..count]
        .iter()
        .map(|&cell| SceneObject {
            color: rng.random_range(0..COLORS.len()),
            shape: rng.random_range(0..SHAPES.len()),
            cell,
        })
        .collect();
    ToyScene { objects }
}

/// Raw attribute counts: one slot per (color, shape, cell) triple followed
/// by per-attribute marginals.
#[derive(Debug, Clone, PartialEq)]
struct RawAttributes(Vec<f64>);

impl RawAttributes {
    fn new() -> Self {
        Self(vec![0.0; N_RAW])
    }

    fn add_triple(&mut self, o: SceneObject) {
        self.0[(o.color * SHAPES.len() + o.shape) * CELLS.len() + o.cell] += 1.0;
        self.add_marginals(Some(o.color), Some(o.shape), Some(o.cell));
    }

    fn add_marginals(&mut self, color: Option<usize>, shape: Option<usize>, cell: Option<usize>) {
        let base = N_TRIPLES;
        if let Some(c) = color {
            self.0[base + c] += 1.0;
        }
        if let Some(s) = shape {
            self.0[base + COLORS.len() + s] += 1.0;
        }
        if let Some(p) = cell {
            self.0[base + COLORS.len() + SHAPES.len() + p] += 1.0;
        }
    }

    fn is_empty(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

fn projection_basis() -> &'static Array2<f64> {
    static BASIS: std::sync::OnceLock<Array2<f64>> = std::sync::OnceLock::new();
    BASIS.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED);
        Array2::from_shape_fn((N_RAW, TOY_FEAT_DIM - 1), |_| {
            StandardNormal.sample(&mut rng)
        })
    })
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn project(raw: &RawAttributes) -> Vec<f64> {
    if raw.is_empty() {
        let mut v = vec![0.0; TOY_FEAT_DIM];
        v[TOY_FEAT_DIM - 1] = 1.0;
        return v;
    }
    let basis = projection_basis();
    let mut out = vec![0.0; TOY_FEAT_DIM];
    for (i, &count) in raw.0.iter().enumerate() {
        if count != 0.0 {
            for (o, b) in out.iter_mut().zip(basis.row(i)) {
                *o += count * b;
            }
        }
    }
    normalize(out)
}

pub fn toy_encode_scene(scene: &ToyScene) -> Vec<f64> {
    let mut raw = RawAttributes::new();
    for &o in &scene.objects {
        raw.add_triple(o);
    }
    project(&raw)
}

/// Clause-level attribute mentions of a caption. Clauses are separated by
/// "and"; each contributes a full triple when it names a color, a shape
/// and a cell, and marginal counts for whatever it does name.
pub fn parse_caption(
    caption: &str,
) -> (
    Vec<SceneObject>,
    Vec<(Option<usize>, Option<usize>, Option<usize>)>,
) {
    let words = tokenize(caption);
    let mut triples = Vec::new();
    let mut partial = Vec::new();
    for clause in words.split(|w| w == "and") {
        let find = |set: &[&str]| clause.iter().find_map(|w| set.iter().position(|s| s == w));
        let (c, s, p) = (find(&COLORS), find(&SHAPES), find(&CELLS));
        match (c, s, p) {
            (Some(color), Some(shape), Some(cell)) => {
                triples.push(SceneObject { color, shape, cell })
            }
            (None, None, None) => {}
            other => partial.push(other),
        }
    }
    (triples, partial)
}

pub fn toy_encode_caption(caption: &str) -> Vec<f64> {
    let (triples, partial) = parse_caption(caption);
    let mut raw = RawAttributes::new();
    for o in triples {
        raw.add_triple(o);
    }
    for (c, s, p) in partial {
        raw.add_marginals(c, s, p);
    }
    project(&raw)
}

fn object_phrase(template: usize, o: &SceneObject, first: bool) -> String {
    let (c, s, p) = (COLORS[o.color], SHAPES[o.shape], CELLS[o.cell]);
    match template {
        0 => format!("{c} {s} {p}"),
        1 if first => format!("a {c} {s} at {p}"),
        1 => format!("{c} {s} at {p}"),
        2 if first => format!("{p} has a {c} {s}"),
        2 => format!("{p} has {c} {s}"),
        3 if first => format!("there is a {c} {s} {p}"),
        3 => format!("{c} {s} {p}"),
        _ => format!("{c} {s} in {p}"),
    }
}

/// Five distinct realizations of a scene, one per template, each listing
/// the objects in an independently shuffled order.
pub fn caption_templates(scene: &ToyScene, rng: &mut impl Rng) -> Vec<String> {
    (0..5)
        .map(|template| {
            let mut objs = scene.objects.clone();
            objs.shuffle(rng);
            objs.iter()
                .enumerate()
                .map(|(i, o)| object_phrase(template, o, i == 0))
                .collect::<Vec<_>>()
                .join(" and ")
        })
        .collect()
}

/// Every word the caption templates can produce.
pub fn toy_vocabulary() -> Vocabulary {
    Vocabulary::from_words(
        CONNECTIVES
            .iter()
            .chain(COLORS.iter())
            .chain(SHAPES.iter())
            .chain(CELLS.iter()),
    )
    .expect("static toy vocabulary is valid")
}

/// Image feature with its reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub feat: Vec<f64>,
    pub captions: Vec<String>,
}

impl FeatureRecord {
    pub fn validate(&self) -> Result<()> {
        let norm = self.feat.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-5 {
            return Err(
                Error::Malformed(format!("feature norm {norm} is not 1")).in_record(&self.id)
            );
        }
        if self.captions.is_empty() || self.captions.len() > u8::MAX as usize {
            return Err(
                Error::Malformed("caption count must be 1..=255".into()).in_record(&self.id)
            );
        }
        Ok(())
    }
}

/// Toy dataset of `count` scenes with ids `scene-{seed+i}`.
pub fn toy_dataset(count: usize, seed: u64) -> Vec<(ToyScene, FeatureRecord)> {
    (0..count as u64)
        .map(|i| {
            let scene_seed = seed.wrapping_add(i);
            let scene = gen_scene(scene_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0xca97_10de);
            let captions = caption_templates(&scene, &mut rng);
            let record = FeatureRecord {
                id: format!("scene-{scene_seed}"),
                feat: toy_encode_scene(&scene),
                captions,
            };
            (scene, record)
        })
        .collect()
}

pub const FEATURE_MAGIC: &[u8; 8] = b"PFXFEAT1";

pub fn encode_features(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.feat.len());
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        if r.feat.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: r.feat.len(),
            }
            .in_record(&r.id));
        }
        if r.id.len() > u16::MAX as usize {
            return Err(Error::Malformed("id longer than 65535 bytes".into()).in_record(&r.id));
        }
        out.extend_from_slice(&(r.id.len() as u16).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        for &v in &r.feat {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if r.captions.len() > u8::MAX as usize {
            return Err(Error::Malformed("more than 255 captions".into()).in_record(&r.id));
        }
        out.push(r.captions.len() as u8);
        for c in &r.captions {
            if c.len() > u16::MAX as usize {
                return Err(
                    Error::Malformed("caption longer than 65535 bytes".into()).in_record(&r.id)
                );
            }
            out.extend_from_slice(&(c.len() as u16).to_le_bytes());
            out.extend_from_slice(c.as_bytes());
        }
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedFile {
                offset: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn string(&mut self, len: usize) -> Result<String> {
        let offset = self.pos;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Malformed(format!("invalid UTF-8 at byte offset {offset}")))
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses a feature file, checking the magic, the layout, and every
/// record's invariants.
pub fn decode_features(buf: &[u8]) -> Result<Vec<FeatureRecord>> {
    if buf.len() >= 8 && &buf[..8] != FEATURE_MAGIC {
        if &buf[..7] == &FEATURE_MAGIC[..7] {
            return Err(Error::BadVersion);
        }
        return Err(Error::BadMagic {
            expected: "PFXFEAT1",
        });
    }
    let mut r = Reader::new(buf);
    r.take(8)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if count > 0 && dim == 0 {
        return Err(Error::DimMismatch {
            expected: 1,
            got: 0,
        });
    }
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let id = r.string(id_len)?;
        let feat = (0..dim)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let n_caps = r.u8()? as usize;
        let captions = (0..n_caps)
            .map(|_| {
                let len = r.u16()? as usize;
                r.string(len)
            })
            .collect::<Result<Vec<_>>>()?;
        let record = FeatureRecord { id, feat, captions };
        record.validate()?;
        records.push(record);
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after offset {}",
            r.remaining(),
            r.position()
        )));
    }
    let mut ids = BTreeSet::new();
    for rec in &records {
        if !ids.insert(rec.id.as_str()) {
            return Err(Error::Malformed(format!(
                "duplicate record id {:?}",
                rec.id
            )));
        }
    }
    Ok(records)
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let bytes = encode_features(records)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

/// `id<TAB>caption` lines, one per reference caption.
pub fn captions_tsv(records: &[FeatureRecord]) -> String {
    let mut out = String::new();
    for r in records {
        for c in &r.captions {
            out.push_str(&r.id);
            out.push('\t');
            out.push_str(c);
            out.push('\n');
        }
    }
    out
}

pub fn parse_captions_tsv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(id, c)| (id.to_string(), c.to_string()))
                .ok_or_else(|| Error::Malformed(format!("line {}: missing TAB", i + 1)))
        })
        .collect()
}
