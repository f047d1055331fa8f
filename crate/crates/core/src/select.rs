//! Multi-candidate generation from distinct noise seeds and selection of
//! the candidate whose text encoding best matches the image feature.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::toy_encode_caption;
use crate::denoiser::DenoiserModel;
use crate::diffusion::{sample_chains, Parameterization, SampleOptions};
use crate::error::{Error, Result};
use crate::schedule::Schedule;
use crate::vocab::{detokenize, round_to_tokens, EmbeddingTable, TokenSequence, Vocabulary};

/// Chains per batched sampling call.
const CHAIN_BATCH: usize = 40;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (a, b) = (ArrayView1::from(a), ArrayView1::from(b));
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Maps caption text into the image-feature space.
pub trait TextEncoder {
    fn encode_text(&self, caption: &str) -> Result<Vec<f64>>;
}

/// The deterministic toy joint encoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyTextEncoder;

impl TextEncoder for ToyTextEncoder {
    fn encode_text(&self, caption: &str) -> Result<Vec<f64>> {
        Ok(toy_encode_caption(caption))
    }
}

impl<F> TextEncoder for F
where
    F: Fn(&str) -> Vec<f64>,
{
    fn encode_text(&self, caption: &str) -> Result<Vec<f64>> {
        Ok(self(caption))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub score: f64,
    /// Per-candidate cosine; `None` where the encoding was degenerate.
    pub scores: Vec<Option<f64>>,
}

/// Picks the candidate with the highest cosine against `feat`, lowest
/// index on ties. A single candidate is returned without comparison.
pub fn select_best<E: TextEncoder + ?Sized>(
    feat: &[f64],
    candidates: &[String],
    encoder: &E,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    if feat.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVector);
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let enc = encoder.encode_text(c)?;
        scores.push(match cosine_similarity(feat, &enc) {
            Ok(s) => Some(s),
            Err(Error::ZeroVector) => None,
            Err(e) => return Err(e),
        });
    }
    if candidates.len() == 1 {
        let score = scores[0].ok_or(Error::NoValidCandidate)?;
        return Ok(Selection {
            index: 0,
            score,
            scores,
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    let (index, score) = best.ok_or(Error::NoValidCandidate)?;
    Ok(Selection {
        index,
        score,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub caption: String,
    pub tokens: TokenSequence,
    /// Final `k × d1` latent before rounding.
    pub latent: Array2<f64>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub chosen: usize,
}

impl CandidateSet {
    pub fn chosen(&self) -> &Candidate {
        &self.candidates[self.chosen]
    }
}

/// A trained model ready for sampling.
#[derive(Debug, Clone)]
pub struct Generator {
    pub model: DenoiserModel,
    pub emb: EmbeddingTable,
    pub vocab: Vocabulary,
    pub sched: Schedule,
    pub parameterization: Parameterization,
    pub clamp: bool,
}

impl Generator {
    pub fn new(
        model: DenoiserModel,
        emb: EmbeddingTable,
        vocab: Vocabulary,
        sched: Schedule,
        parameterization: Parameterization,
        clamp: bool,
    ) -> Result<Self> {
        let c = model.config();
        if emb.dim() != c.d1 {
            return Err(Error::DimMismatch {
                expected: c.d1,
                got: emb.dim(),
            });
        }
        if emb.vocab_size() != vocab.len() {
            return Err(Error::DimMismatch {
                expected: vocab.len(),
                got: emb.vocab_size(),
            });
        }
        if sched.steps() != c.steps {
            return Err(Error::BadConfig(format!(
                "schedule has {} steps, model expects {}",
                sched.steps(),
                c.steps
            )));
        }
        Ok(Self {
            model,
            emb,
            vocab,
            sched,
            parameterization,
            clamp,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let sched = ck.meta.schedule()?;
        let vocab = ck.meta.vocabulary()?;
        Self::new(
            ck.model,
            ck.emb,
            vocab,
            sched,
            ck.meta.parameterization,
            ck.meta.clamp,
        )
    }

    fn options(&self) -> SampleOptions<'_> {
        SampleOptions {
            parameterization: self.parameterization,
            clamp: self.clamp.then_some(&self.emb),
        }
    }

    fn decode(&self, latent: Array2<f64>) -> Result<Candidate> {
        let tokens = round_to_tokens(latent.view(), &self.emb)?;
        Ok(Candidate {
            caption: detokenize(&tokens, &self.vocab),
            tokens,
            latent,
            score: None,
        })
    }

    /// `n` candidates per feature; candidate `i` of every feature uses seed
    /// `base_seed + i`. Chains are batched across features.
    pub fn generate_many(
        &self,
        feats: &[&[f64]],
        n: usize,
        eval_steps: usize,
        base_seed: u64,
    ) -> Result<Vec<Vec<Candidate>>> {
        if n == 0 {
            return Err(Error::BadConfig("n must be at least 1".into()));
        }
        let c = self.model.config();
        let jobs: Vec<(usize, u64)> = (0..feats.len())
            .flat_map(|f| (0..n as u64).map(move |i| (f, base_seed.wrapping_add(i))))
            .collect();
        let opts = self.options();
        let chunks: Vec<Vec<Candidate>> = jobs
            .par_chunks(CHAIN_BATCH)
            .map(|chunk| {
                let fs: Vec<&[f64]> = chunk.iter().map(|&(f, _)| feats[f]).collect();
                let seeds: Vec<u64> = chunk.iter().map(|&(_, s)| s).collect();
                sample_chains(
                    &self.model,
                    &fs,
                    (c.k, c.d1),
                    &self.sched,
                    eval_steps,
                    &seeds,
                    &opts,
                )?
                .into_iter()
                .map(|st| self.decode(st.x))
                .collect()
            })
            .collect::<Result<_>>()?;
        let mut out: Vec<Vec<Candidate>> = feats.iter().map(|_| Vec::with_capacity(n)).collect();
        for (&(f, _), cand) in jobs.iter().zip(chunks.into_iter().flatten()) {
            out[f].push(cand);
        }
        Ok(out)
    }

    pub fn generate_candidates(
        &self,
        feat: &[f64],
        n: usize,
        eval_steps: usize,
        base_seed: u64,
    ) -> Result<Vec<Candidate>> {
        Ok(self
            .generate_many(&[feat], n, eval_steps, base_seed)?
            .remove(0))
    }

    /// Scores `candidates` against `feat` and marks the best one.
    pub fn choose<E: TextEncoder + ?Sized>(
        feat: &[f64],
        mut candidates: Vec<Candidate>,
        encoder: &E,
    ) -> Result<CandidateSet> {
        let captions: Vec<String> = candidates.iter().map(|c| c.caption.clone()).collect();
        let sel = select_best(feat, &captions, encoder)?;
        for (c, s) in candidates.iter_mut().zip(sel.scores) {
            c.score = s;
        }
        Ok(CandidateSet {
            candidates,
            chosen: sel.index,
        })
    }

    pub fn caption<E: TextEncoder + ?Sized>(
        &self,
        feat: &[f64],
        n: usize,
        eval_steps: usize,
        base_seed: u64,
        encoder: &E,
    ) -> Result<CandidateSet> {
        Self::choose(
            feat,
            self.generate_candidates(feat, n, eval_steps, base_seed)?,
            encoder,
        )
    }
}
