//! Corpus metrics: BLEU-n, Dist-n, vocabulary usage, and the evaluation
//! report that ties them to a generator.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::FeatureRecord;
use crate::error::{Error, Result};
use crate::select::{Generator, TextEncoder};
use crate::vocab::{tokenize, Vocabulary};

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}

/// Distinct n-grams over total n-grams, pooled across the corpus.
pub fn distinct_n(captions: &[String], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::BadConfig("n must be at least 1".into()));
    }
    let tokenized: Vec<Vec<String>> = captions.iter().map(|c| tokenize(c)).collect();
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for t in &tokenized {
        for g in ngrams(t, n) {
            seen.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::NoNGrams(n));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Mean of per-group Dist-n, skipping groups without any n-gram.
pub fn distinct_n_per_image(groups: &[Vec<String>], n: usize) -> Result<f64> {
    let vals: Vec<f64> = groups
        .iter()
        .filter_map(|g| match distinct_n(g, n) {
            Err(Error::NoNGrams(_)) => None,
            other => Some(other),
        })
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::NoNGrams(n));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Percentage of non-reserved vocabulary words that occur in `captions`.
pub fn vocab_usage(captions: &[String], vocab: &Vocabulary) -> f64 {
    let words = vocab.content_words();
    if words.is_empty() {
        return 0.0;
    }
    let used: HashSet<String> = captions.iter().flat_map(|c| tokenize(c)).collect();
    let hits = words.iter().filter(|w| used.contains(*w)).count();
    100.0 * hits as f64 / words.len() as f64
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU with uniform weights over orders `1..=max_n`, clipped
/// counts, brevity penalty against the closest reference length (shorter
/// on ties) and add-one smoothing for orders two and up.
pub fn bleu_n(hypotheses: &[String], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if max_n == 0 {
        return Err(Error::BadConfig("max_n must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let h = tokenize(h);
        let refs: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
        hyp_len += h.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .expect("non-empty references");
        for n in 1..=max_n {
            let ref_counts: Vec<_> = refs.iter().map(|r| counts(r, n)).collect();
            for (g, c) in counts(&h, n) {
                let cap = ref_counts
                    .iter()
                    .map(|rc| rc.get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[n - 1] += c.min(cap);
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..max_n)
        .map(|i| {
            let (m, t) = if i == 0 {
                (matched[0] as f64, total[0] as f64)
            } else {
                (matched[i] as f64 + 1.0, total[i] as f64 + 1.0)
            };
            (m / t).ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu3: f64,
    /// `None` when no caption is long enough.
    pub dist2: Option<f64>,
    pub dist3: Option<f64>,
    /// Against the model's training vocabulary.
    pub voc_u: f64,
    pub mean_similarity: f64,
    pub records: usize,
    pub captions: usize,
    pub n_candidates: usize,
    pub eval_steps: usize,
    /// Per-image Dist-n over the full candidate sets, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dist2_per_image: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dist3_per_image: Option<f64>,
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NoNGrams(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl EvalReport {
    /// Report for already-selected captions, one per record.
    pub fn from_captions(
        selected: &[String],
        scores: &[f64],
        records: &[FeatureRecord],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if selected.len() != records.len() || scores.len() != records.len() {
            return Err(Error::LengthMismatch {
                hyps: selected.len(),
                refs: records.len(),
            });
        }
        if records.is_empty() {
            return Err(Error::EmptyInput);
        }
        let refs: Vec<Vec<String>> = records.iter().map(|r| r.captions.clone()).collect();
        Ok(Self {
            bleu1: bleu_n(selected, &refs, 1)?,
            bleu3: bleu_n(selected, &refs, 3)?,
            dist2: optional(distinct_n(selected, 2))?,
            dist3: optional(distinct_n(selected, 3))?,
            voc_u: vocab_usage(selected, vocab),
            mean_similarity: scores.iter().sum::<f64>() / scores.len() as f64,
            records: records.len(),
            captions: selected.len(),
            n_candidates: 1,
            eval_steps: 0,
            dist2_per_image: None,
            dist3_per_image: None,
        })
    }

    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let rows = [
            ("B@1", format!("{:.4}", self.bleu1)),
            ("B@3", format!("{:.4}", self.bleu3)),
            ("D@2", opt(self.dist2)),
            ("D@3", opt(self.dist3)),
            ("Voc-u (%)", format!("{:.2}", self.voc_u)),
            ("similarity", format!("{:.4}", self.mean_similarity)),
            ("records", self.records.to_string()),
            ("candidates", self.n_candidates.to_string()),
            ("eval steps", self.eval_steps.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<12} {v:>10}");
        }
        if self.dist2_per_image.is_some() || self.dist3_per_image.is_some() {
            let _ = writeln!(s, "{:<12} {:>10}", "D@2 image", opt(self.dist2_per_image));
            let _ = writeln!(s, "{:<12} {:>10}", "D@3 image", opt(self.dist3_per_image));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Selected caption per record.
    pub selected: Vec<String>,
    pub scores: Vec<f64>,
    /// Every candidate per record.
    pub candidates: Vec<Vec<String>>,
}

/// Generates `n_candidates` per record, keeps the best by cosine and
/// scores the result against the references.
pub fn evaluate<E: TextEncoder + ?Sized>(
    generator: &Generator,
    records: &[FeatureRecord],
    n_candidates: usize,
    eval_steps: usize,
    seed: u64,
    encoder: &E,
    per_image: bool,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let feats: Vec<&[f64]> = records.iter().map(|r| r.feat.as_slice()).collect();
    let cands = generator.generate_many(&feats, n_candidates, eval_steps, seed)?;
    let mut selected = Vec::with_capacity(records.len());
    let mut scores = Vec::with_capacity(records.len());
    let mut all = Vec::with_capacity(records.len());
    for (r, c) in records.iter().zip(cands) {
        let set = Generator::choose(&r.feat, c, encoder).map_err(|e| e.in_record(&r.id))?;
        let chosen = set.chosen();
        selected.push(chosen.caption.clone());
        scores.push(chosen.score.expect("chosen candidate has a score"));
        all.push(
            set.candidates
                .into_iter()
                .map(|c| c.caption)
                .collect::<Vec<_>>(),
        );
    }
    let mut report = EvalReport::from_captions(&selected, &scores, records, &generator.vocab)?;
    report.n_candidates = n_candidates;
    report.eval_steps = eval_steps;
    if per_image {
        report.dist2_per_image = optional(distinct_n_per_image(&all, 2))?;
        report.dist3_per_image = optional(distinct_n_per_image(&all, 3))?;
    }
    Ok(Evaluation {
        report,
        selected,
        scores,
        candidates: all,
    })
}

/// Distinct-caption count of each candidate list.
pub fn distinct_captions(groups: &[Vec<String>]) -> Vec<usize> {
    groups
        .iter()
        .map(|g| g.iter().collect::<BTreeSet<_>>().len())
        .collect()
}
