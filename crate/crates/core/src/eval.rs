//! Caption metrics (corpus BLEU-4, CIDEr-D, slot accuracy) and evaluation
//! reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{caption_of, DatasetRecord, Relation, Scene, Tag};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::pipeline::{self, CaptionResult, GlanceMode};
use crate::Scalar;

/// Gaussian length-penalty width of CIDEr-D.
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;
pub const MAX_N: usize = 4;

/// One candidate with its references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub image_id: u64,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalCorpus {
    items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn new(items: Vec<EvalItem>) -> Result<Self> {
        for it in &items {
            if tokenize(&it.candidate).is_empty() {
                return Err(Error::Config(format!("image {}: empty candidate", it.image_id)));
            }
            if it.references.is_empty() || it.references.iter().any(|r| tokenize(r).is_empty()) {
                return Err(Error::Config(format!("image {}: needs at least one nonempty reference", it.image_id)));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[EvalItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-4 with uniform weights, per-n-gram clipping against the
/// maximum reference count, the closest reference length (shorter on ties)
/// for the brevity penalty, and no smoothing. Orders longer than every
/// candidate have no n-grams to score and are left out of the geometric mean.
pub fn bleu4(corpus: &EvalCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Config("BLEU of an empty corpus".into()));
    }
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for it in corpus.items() {
        let cand = tokenize(&it.candidate);
        let refs: Vec<Vec<String>> = it.references.iter().map(|r| tokenize(r)).collect();
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=MAX_N {
            let cc = ngrams(&cand, n);
            let mut max_ref: Counts<'_> = BTreeMap::new();
            for r in &refs {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cc {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let orders: Vec<usize> = (0..MAX_N).filter(|&i| total[i] > 0).collect();
    if orders.iter().any(|&i| matched[i] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = orders.iter().map(|&i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / orders.len() as f64;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * log_p.exp())
}

/// Per-image and mean CIDEr-D.
#[derive(Clone, Debug, PartialEq)]
pub struct CiderScores {
    pub mean: f64,
    pub per_image: Vec<f64>,
}

struct TfIdf<'a> {
    vec: Vec<BTreeMap<&'a [String], f64>>,
    norm: Vec<f64>,
    len: usize,
}

fn tf_idf<'a>(tokens: &'a [String], df: &BTreeMap<&[String], usize>, log_n: f64) -> TfIdf<'a> {
    let mut vec = Vec::with_capacity(MAX_N);
    let mut norm = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let v: BTreeMap<&[String], f64> = ngrams(tokens, n)
            .into_iter()
            .map(|(g, k)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g, k as f64 * (log_n - d.ln()))
            })
            .collect();
        norm.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vec.push(v);
    }
    TfIdf { vec, norm, len: tokens.len() }
}

/// CIDEr-D: for each n, TF-IDF vectors with document frequencies taken over
/// the per-image reference sets, clipped cosine between candidate and each
/// reference, Gaussian length penalty (σ = 6), averaged over references and
/// n-gram orders, scaled by 10. Orders for which neither side has an n-gram
/// carry no information and are left out of the average.
pub fn cider(corpus: &EvalCorpus) -> Result<CiderScores> {
    if corpus.len() < 2 {
        return Err(Error::Config("CIDEr needs at least two images (IDF is degenerate otherwise)".into()));
    }
    let cands: Vec<Vec<String>> = corpus.items().iter().map(|it| tokenize(&it.candidate)).collect();
    let refs: Vec<Vec<Vec<String>>> =
        corpus.items().iter().map(|it| it.references.iter().map(|r| tokenize(r)).collect()).collect();

    let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
    for rs in &refs {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in rs {
            for n in 1..=MAX_N {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    let vectorize = |tokens| tf_idf(tokens, &df, log_n);

    let mut per_image = Vec::with_capacity(corpus.len());
    for (cand, rs) in cands.iter().zip(&refs) {
        let vc = vectorize(cand);
        let mut sum = 0.0;
        for r in rs {
            let vr = vectorize(r);
            let delta = vc.len as f64 - vr.len as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            let mut orders = 0usize;
            let mut acc = 0.0;
            for n in 0..MAX_N {
                if vc.vec[n].is_empty() && vr.vec[n].is_empty() {
                    continue;
                }
                orders += 1;
                if vc.norm[n] == 0.0 || vr.norm[n] == 0.0 {
                    continue;
                }
                let dot: f64 = vc.vec[n]
                    .iter()
                    .filter_map(|(g, a)| vr.vec[n].get(g).map(|b| a.min(*b) * b))
                    .sum();
                acc += dot / (vc.norm[n] * vr.norm[n]) * penalty;
            }
            if orders > 0 {
                sum += acc / orders as f64;
            }
        }
        per_image.push(CIDER_SCALE * sum / rs.len() as f64);
    }
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(CiderScores { mean, per_image })
}

/// Slot accuracy of one candidate against a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAccuracy {
    pub entity: f64,
    pub attribute: f64,
    /// `None` when the scene has no relation slot (a single object).
    pub relation: Option<f64>,
    pub overall: f64,
    pub parse_failure: bool,
}

/// Correct / total slot counts per category; sums across images give the
/// corpus-level (slot-weighted) accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SlotCounts {
    pub entity: (usize, usize),
    pub attribute: (usize, usize),
    pub relation: (usize, usize),
    pub parse_failures: usize,
}

fn ratio((ok, n): (usize, usize)) -> Option<f64> {
    (n > 0).then(|| ok as f64 / n as f64)
}

impl SlotCounts {
    pub fn add(&mut self, o: &SlotCounts) {
        for (a, b) in [
            (&mut self.entity, o.entity),
            (&mut self.attribute, o.attribute),
            (&mut self.relation, o.relation),
        ] {
            a.0 += b.0;
            a.1 += b.1;
        }
        self.parse_failures += o.parse_failures;
    }

    pub fn overall(&self) -> (usize, usize) {
        (
            self.entity.0 + self.attribute.0 + self.relation.0,
            self.entity.1 + self.attribute.1 + self.relation.1,
        )
    }

    pub fn accuracy(&self) -> SlotAccuracy {
        SlotAccuracy {
            entity: ratio(self.entity).unwrap_or(0.0),
            attribute: ratio(self.attribute).unwrap_or(0.0),
            relation: ratio(self.relation),
            overall: ratio(self.overall()).unwrap_or(0.0),
            parse_failure: self.parse_failures > 0,
        }
    }
}

/// One parsed object phrase: size, color, shape words.
#[derive(Clone, Debug, PartialEq, Eq)]
struct ParsedObject<'a> {
    size: &'a str,
    color: &'a str,
    shape: &'a str,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Parsed<'a> {
    objects: Vec<ParsedObject<'a>>,
    relation: Option<&'a str>,
}

fn is_size(w: &str) -> bool {
    crate::data::Size::ALL.iter().any(|s| s.word() == w)
}

fn is_color(w: &str) -> bool {
    crate::data::Color::ALL.iter().any(|s| s.word() == w)
}

fn is_shape(w: &str) -> bool {
    crate::data::Shape::ALL.iter().any(|s| s.word() == w)
}

fn is_relation(w: &str) -> bool {
    Relation::ALL.iter().any(|r| r.word() == w)
}

/// Greedy left-to-right parse of `a SIZE COLOR SHAPE (REL a … (and a …)*)?`.
fn parse(tokens: &[String]) -> Option<Parsed<'_>> {
    let mut i = 0;
    let mut objects = Vec::new();
    let mut relation = None;
    loop {
        let t = tokens.get(i..i + 4)?;
        if t[0] != "a" || !is_size(&t[1]) || !is_color(&t[2]) || !is_shape(&t[3]) {
            return None;
        }
        objects.push(ParsedObject { size: &t[1], color: &t[2], shape: &t[3] });
        i += 4;
        let Some(next) = tokens.get(i) else { break };
        match objects.len() {
            1 if is_relation(next) => relation = Some(next.as_str()),
            n if n > 1 && next == "and" => {}
            _ => return None,
        }
        i += 1;
    }
    Some(Parsed { objects, relation })
}

/// Counts correctly verbalized ground-truth slots. Objects are aligned by
/// position; an unparseable candidate scores zero on every slot.
pub fn slot_counts(candidate: &str, scene: &Scene) -> SlotCounts {
    let truth = caption_of(scene);
    let mut c = SlotCounts::default();
    for t in &truth.tags {
        match t {
            Tag::Entity => c.entity.1 += 1,
            Tag::Attribute => c.attribute.1 += 1,
            Tag::Relation => c.relation.1 += 1,
            _ => {}
        }
    }
    let tokens = tokenize(candidate);
    let Some(p) = parse(&tokens) else {
        c.parse_failures = 1;
        return c;
    };
    for (k, o) in scene.objects.iter().enumerate() {
        let Some(q) = p.objects.get(k) else { break };
        c.attribute.0 += usize::from(q.size == o.size.word()) + usize::from(q.color == o.color.word());
        c.entity.0 += usize::from(q.shape == o.shape.word());
    }
    if scene.objects.len() > 1 {
        let rel = Relation::between(scene.objects[0].cell, scene.objects[1].cell);
        c.relation.0 += usize::from(p.relation == Some(rel.word()));
    }
    c
}

pub fn slot_accuracy(candidate: &str, scene: &Scene) -> SlotAccuracy {
    slot_counts(candidate, scene).accuracy()
}

/// Which caption an evaluation scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Glance output (MLP connector).
    #[default]
    Initial,
    /// Glance followed by refinement.
    Refined,
    /// One DeepLens pass without an initial caption.
    #[serde(rename = "single-glance-2")]
    SingleGlance2,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial" => Ok(Self::Initial),
            "refined" => Ok(Self::Refined),
            "single-glance-2" => Ok(Self::SingleGlance2),
            other => Err(Error::Config(format!("unknown eval mode {other:?} (initial|refined|single-glance-2)"))),
        }
    }
}

/// Per-image line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub candidate: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu4: Option<f64>,
    pub cider: f64,
    pub slots: SlotAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotSummary {
    pub entity: f64,
    pub attribute: f64,
    pub relation: Option<f64>,
    pub overall: f64,
    pub parse_failures: usize,
}

/// Last line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub summary: bool,
    pub mode: EvalMode,
    pub iterations: usize,
    pub images: usize,
    pub bleu4: f64,
    pub cider: f64,
    pub slots: SlotSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<ImageRecord>,
    pub summary: Summary,
}

impl EvalReport {
    /// Scores `candidates[i]` against the ground-truth caption of `scenes[i]`.
    pub fn score(scenes: &[&Scene], candidates: &[String], mode: EvalMode, iterations: usize) -> Result<Self> {
        if scenes.len() != candidates.len() {
            return Err(Error::Config("one candidate per scene required".into()));
        }
        // Empty captions are legal model output; a placeholder that matches no
        // reference n-gram keeps the corpus well-formed.
        let items = scenes
            .iter()
            .zip(candidates)
            .map(|(s, c)| EvalItem {
                image_id: s.id,
                candidate: if tokenize(c).is_empty() { EMPTY_PLACEHOLDER.into() } else { c.clone() },
                references: vec![caption_of(s).text()],
            })
            .collect();
        let corpus = EvalCorpus::new(items)?;
        let bleu = bleu4(&corpus)?;
        let cid = cider(&corpus)?;
        let mut total = SlotCounts::default();
        let mut records = Vec::with_capacity(scenes.len());
        for ((s, c), ci) in scenes.iter().zip(candidates).zip(&cid.per_image) {
            let counts = slot_counts(c, s);
            total.add(&counts);
            records.push(ImageRecord { image_id: s.id, candidate: c.clone(), bleu4: None, cider: *ci, slots: counts.accuracy() });
        }
        let acc = total.accuracy();
        let summary = Summary {
            summary: true,
            mode,
            iterations,
            images: scenes.len(),
            bleu4: bleu,
            cider: cid.mean,
            slots: SlotSummary {
                entity: acc.entity,
                attribute: acc.attribute,
                relation: acc.relation,
                overall: acc.overall,
                parse_failures: total.parse_failures,
            },
            config: None,
        };
        Ok(Self { records, summary })
    }

    /// Line-delimited JSON: one line per image, then the summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary)?);
        out.push('\n');
        Ok(out)
    }
}

const EMPTY_PLACEHOLDER: &str = "<empty>";

/// Runs the captioner over `records` and returns one [`CaptionResult`] per
/// record. `mode` selects the glance connector; refinement runs
/// `iterations` times.
pub fn caption_records<T: Scalar>(
    model: &ModelBundle<T>,
    records: &[DatasetRecord],
    glance: GlanceMode,
    iterations: usize,
) -> Result<Vec<CaptionResult>> {
    records
        .iter()
        .map(|r| pipeline::caption(model, &r.image().pixels, r.scene.id, iterations, glance))
        .collect()
}

/// Captions and scores `records` in the given mode.
pub fn evaluate<T: Scalar>(
    model: &ModelBundle<T>,
    records: &[DatasetRecord],
    mode: EvalMode,
    iterations: usize,
) -> Result<EvalReport> {
    let (glance, iters) = match mode {
        EvalMode::Initial => (GlanceMode::Mlp, 0),
        EvalMode::Refined => (GlanceMode::Mlp, iterations),
        EvalMode::SingleGlance2 => (GlanceMode::SingleGlanceDeepLens, 0),
    };
    let results = caption_records(model, records, glance, iters)?;
    let candidates: Vec<String> = results.iter().map(|r| r.final_caption().to_string()).collect();
    let scenes: Vec<&Scene> = records.iter().map(|r| &r.scene).collect();
    EvalReport::score(&scenes, &candidates, mode, iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Color, Object, Shape, Size};

    fn corpus(pairs: &[(&str, &[&str])]) -> EvalCorpus {
        EvalCorpus::new(
            pairs
                .iter()
                .enumerate()
                .map(|(i, (c, rs))| EvalItem {
                    image_id: i as u64,
                    candidate: c.to_string(),
                    references: rs.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bleu_hand_cases() {
        assert_eq!(bleu4(&corpus(&[("a b c d e", &["a b c d e"])])).unwrap(), 1.0);
        assert_eq!(bleu4(&corpus(&[("red circle", &["red circle"])])).unwrap(), 1.0);
        let bp = bleu4(&corpus(&[("a b c d e", &["a b c d e f"])])).unwrap();
        assert!((bp - (1.0f64 - 6.0 / 5.0).exp()).abs() < 1e-12);
        assert!((bp - 0.818731).abs() < 1e-6);
        assert_eq!(bleu4(&corpus(&[("a b c d", &["a b c e"])])).unwrap(), 0.0);
        assert!(bleu4(&EvalCorpus::default()).is_err());
    }

    #[test]
    fn cider_hand_cases() {
        let s = cider(&corpus(&[("red circle", &["red circle"]), ("green", &["blue square"])])).unwrap();
        assert!((s.per_image[0] - 10.0).abs() < 1e-12);
        assert_eq!(s.per_image[1], 0.0);
        assert!(cider(&corpus(&[("x", &["x"])])).is_err());
    }

    fn scene(objs: &[(Size, Color, Shape, u8)]) -> Scene {
        Scene {
            id: 0,
            objects: objs.iter().map(|&(size, color, shape, cell)| Object { shape, color, size, cell }).collect(),
        }
    }

    #[test]
    fn slot_accuracy_cases() {
        let s = scene(&[(Size::Small, Color::Red, Shape::Circle, 0), (Size::Large, Color::Blue, Shape::Square, 1)]);
        let truth = caption_of(&s).text();
        let full = slot_accuracy(&truth, &s);
        assert_eq!(full.overall, 1.0);
        assert_eq!(full.relation, Some(1.0));

        let wrong_shape = truth.replace("square", "triangle");
        let a = slot_accuracy(&wrong_shape, &s);
        assert_eq!(a.entity, 0.5);
        assert_eq!(a.attribute, 1.0);
        assert_eq!(a.relation, Some(1.0));
        assert!((a.overall - 6.0 / 7.0).abs() < 1e-12);

        let bad = slot_accuracy("circle red a", &s);
        assert!(bad.parse_failure);
        assert_eq!(bad.overall, 0.0);

        let single = scene(&[(Size::Small, Color::Red, Shape::Circle, 5)]);
        assert_eq!(slot_accuracy("a small red square", &single).relation, None);
    }

    #[test]
    fn eval_mode_parses() {
        assert_eq!("single-glance-2".parse::<EvalMode>().unwrap(), EvalMode::SingleGlance2);
        assert_eq!(serde_json::to_string(&EvalMode::SingleGlance2).unwrap(), "\"single-glance-2\"");
        assert!("both".parse::<EvalMode>().is_err());
    }
}
