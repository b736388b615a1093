//! Sample bundles and their JSON Lines wire format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{decode_f32_b64, encode_f32_b64, RleMask};
use crate::error::{Result, WishError};
use crate::numerics::{norm, Vecf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Left,
    Right,
}

impl HandSide {
    pub const ALL: [HandSide; 2] = [HandSide::Left, HandSide::Right];

    pub fn index(self) -> usize {
        match self {
            HandSide::Left => 0,
            HandSide::Right => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectProposal {
    pub mask: RleMask,
    pub embedding: Vecf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandEntry {
    pub side: HandSide,
    pub mask: RleMask,
    pub embedding: Vecf,
}

/// A noun phrase with its left- and right-hand template embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseEntry {
    pub text: String,
    pub emb_left: Vecf,
    pub emb_right: Vecf,
}

impl PhraseEntry {
    pub fn embedding(&self, side: HandSide) -> &Vecf {
        match side {
            HandSide::Left => &self.emb_left,
            HandSide::Right => &self.emb_right,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub left: Option<RleMask>,
    pub right: Option<RleMask>,
    pub both: Option<RleMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBundle {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub narration: String,
    pub objects: Vec<ObjectProposal>,
    /// Indexed by [`HandSide::index`].
    pub hands: [Option<HandEntry>; 2],
    pub phrases: Vec<PhraseEntry>,
    pub gt: Option<GroundTruth>,
}

/// The image-derived part of a bundle. Inference only ever sees this.
#[derive(Debug, Clone, Copy)]
pub struct VisualView<'a> {
    pub id: &'a str,
    pub width: u32,
    pub height: u32,
    pub objects: &'a [ObjectProposal],
    pub hands: &'a [Option<HandEntry>; 2],
}

impl SampleBundle {
    pub fn hand(&self, side: HandSide) -> Option<&HandEntry> {
        self.hands[side.index()].as_ref()
    }

    pub fn visual(&self) -> VisualView<'_> {
        VisualView {
            id: &self.id,
            width: self.width,
            height: self.height,
            objects: &self.objects,
            hands: &self.hands,
        }
    }

    /// Embedding dimension, if the bundle carries any embedding at all.
    pub fn embedding_dim(&self) -> Option<usize> {
        self.objects
            .first()
            .map(|o| o.embedding.len())
            .or_else(|| self.hands.iter().flatten().next().map(|h| h.embedding.len()))
            .or_else(|| self.phrases.first().map(|p| p.emb_left.len()))
    }

    pub fn validate(&self) -> Result<()> {
        let dims = (self.width, self.height);
        let check_mask = |m: &RleMask, what: &str| -> Result<()> {
            if m.dims() != dims {
                return Err(WishError::Shape(format!(
                    "{what} mask is {:?}, sample is {dims:?}",
                    m.dims()
                )));
            }
            Ok(())
        };
        let dim = self.embedding_dim();
        let check_emb = |e: &[f64], what: &str| -> Result<()> {
            if Some(e.len()) != dim {
                return Err(WishError::Shape(format!("{what} embedding has dim {}", e.len())));
            }
            if norm(e) == 0.0 {
                return Err(WishError::Domain(format!("{what} embedding has zero norm")));
            }
            Ok(())
        };
        if dim == Some(0) {
            return Err(WishError::Shape("zero-dimensional embeddings".into()));
        }
        for o in &self.objects {
            check_mask(&o.mask, "object")?;
            check_emb(&o.embedding, "object")?;
        }
        for (side, h) in HandSide::ALL.iter().zip(&self.hands) {
            if let Some(h) = h {
                if h.side != *side {
                    return Err(WishError::Domain("hand stored under the wrong side".into()));
                }
                check_mask(&h.mask, "hand")?;
                check_emb(&h.embedding, "hand")?;
            }
        }
        for p in &self.phrases {
            check_emb(&p.emb_left, "phrase")?;
            check_emb(&p.emb_right, "phrase")?;
        }
        if let Some(gt) = &self.gt {
            for m in [&gt.left, &gt.right, &gt.both].into_iter().flatten() {
                check_mask(m, "ground-truth")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RleWire {
    pub counts: Vec<u32>,
}

impl RleWire {
    pub fn from_mask(m: &RleMask) -> Self {
        Self {
            counts: m.counts().to_vec(),
        }
    }

    pub fn into_mask(self, width: u32, height: u32) -> Result<RleMask> {
        RleMask::new(width, height, self.counts)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionWire {
    rle: RleWire,
    emb: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct HandsWire {
    #[serde(default)]
    left: Option<RegionWire>,
    #[serde(default)]
    right: Option<RegionWire>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PhraseWire {
    text: String,
    emb_left: String,
    emb_right: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtWire {
    #[serde(default)]
    left: Option<RleWire>,
    #[serde(default)]
    right: Option<RleWire>,
    #[serde(default)]
    both: Option<RleWire>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleWire {
    id: String,
    width: u32,
    height: u32,
    #[serde(default)]
    narration: String,
    objects: Vec<RegionWire>,
    #[serde(default)]
    hands: HandsWire,
    #[serde(default)]
    phrases: Vec<PhraseWire>,
    #[serde(default)]
    gt: Option<GtWire>,
}

fn embedding(s: &str) -> Result<Vecf> {
    Vecf::new(decode_f32_b64(s)?)
}

impl BundleWire {
    fn into_bundle(self) -> Result<SampleBundle> {
        let (w, h) = (self.width, self.height);
        let objects = self
            .objects
            .into_iter()
            .map(|o| {
                Ok(ObjectProposal {
                    mask: o.rle.into_mask(w, h)?,
                    embedding: embedding(&o.emb)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let hand = |side: HandSide, r: Option<RegionWire>| -> Result<Option<HandEntry>> {
            r.map(|r| {
                Ok(HandEntry {
                    side,
                    mask: r.rle.into_mask(w, h)?,
                    embedding: embedding(&r.emb)?,
                })
            })
            .transpose()
        };
        let hands = [
            hand(HandSide::Left, self.hands.left)?,
            hand(HandSide::Right, self.hands.right)?,
        ];
        let phrases = self
            .phrases
            .into_iter()
            .map(|p| {
                Ok(PhraseEntry {
                    text: p.text,
                    emb_left: embedding(&p.emb_left)?,
                    emb_right: embedding(&p.emb_right)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = |r: Option<RleWire>| r.map(|r| r.into_mask(w, h)).transpose();
        let gt = self
            .gt
            .map(|g| -> Result<GroundTruth> {
                Ok(GroundTruth {
                    left: mask(g.left)?,
                    right: mask(g.right)?,
                    both: mask(g.both)?,
                })
            })
            .transpose()?;
        let bundle = SampleBundle {
            id: self.id,
            width: w,
            height: h,
            narration: self.narration,
            objects,
            hands,
            phrases,
            gt,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn from_bundle(b: &SampleBundle) -> Self {
        let region = |mask: &RleMask, emb: &[f64]| RegionWire {
            rle: RleWire::from_mask(mask),
            emb: encode_f32_b64(emb),
        };
        let hand = |side: HandSide| b.hand(side).map(|h| region(&h.mask, &h.embedding));
        Self {
            id: b.id.clone(),
            width: b.width,
            height: b.height,
            narration: b.narration.clone(),
            objects: b
                .objects
                .iter()
                .map(|o| region(&o.mask, &o.embedding))
                .collect(),
            hands: HandsWire {
                left: hand(HandSide::Left),
                right: hand(HandSide::Right),
            },
            phrases: b
                .phrases
                .iter()
                .map(|p| PhraseWire {
                    text: p.text.clone(),
                    emb_left: encode_f32_b64(&p.emb_left),
                    emb_right: encode_f32_b64(&p.emb_right),
                })
                .collect(),
            gt: b.gt.as_ref().map(|g| GtWire {
                left: g.left.as_ref().map(RleWire::from_mask),
                right: g.right.as_ref().map(RleWire::from_mask),
                both: g.both.as_ref().map(RleWire::from_mask),
            }),
        }
    }
}

/// Parses and validates a single bundle line.
pub fn parse_bundle(line: &str) -> Result<SampleBundle> {
    serde_json::from_str::<BundleWire>(line)?.into_bundle()
}

pub fn bundle_to_json(bundle: &SampleBundle) -> Result<String> {
    Ok(serde_json::to_string(&BundleWire::from_bundle(bundle))?)
}

/// Reads a JSON Lines stream of bundles. Blank lines are skipped; any
/// invalid line aborts the load with its 1-based line number.
pub fn load_bundles<R: BufRead>(reader: R) -> Result<Vec<SampleBundle>> {
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: WishError| WishError::Line {
            line: i + 1,
            message: e.to_string(),
        };
        let bundle = parse_bundle(&line).map_err(at)?;
        match (dim, bundle.embedding_dim()) {
            (Some(d), Some(e)) if d != e => {
                return Err(at(WishError::Shape(format!(
                    "embedding dim {e} differs from earlier lines ({d})"
                ))))
            }
            (None, Some(e)) => dim = Some(e),
            _ => {}
        }
        out.push(bundle);
    }
    Ok(out)
}

pub fn write_bundles<W: Write>(mut writer: W, bundles: &[SampleBundle]) -> Result<()> {
    for b in bundles {
        writeln!(writer, "{}", bundle_to_json(b)?)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_bundles_file(path: impl AsRef<std::path::Path>) -> Result<Vec<SampleBundle>> {
    let f = std::fs::File::open(path)?;
    load_bundles(std::io::BufReader::new(f))
}

pub fn write_bundles_file(path: impl AsRef<std::path::Path>, bundles: &[SampleBundle]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_bundles(std::io::BufWriter::new(f), bundles)
}
