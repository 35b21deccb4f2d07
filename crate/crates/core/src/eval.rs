//! Transcription of synthesized speech and caption metrics.
//!
//! Scores use the captioning conventions: corpus-level BLEU-1..4, exact-match
//! METEOR, ROUGE-L (β = 1.2) and CIDEr-D (σ = 6, ×10).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::audio::{AudioConfig, MelSpectrogram};
use crate::corpus::{distance, CorpusData, RegionFeatureSet, TokenSignatureBank};
use crate::error::{Result, SasError};
use crate::model::{synthesize, SasModel};

/// Maps a spectrogram to a token sequence.
pub trait Transcriber {
    fn transcribe(&self, mel: &MelSpectrogram, image_id: &str) -> Result<Vec<String>>;
}

/// Nearest-signature decoding of consecutive `K`-frame windows.
pub struct TemplateTranscriber {
    pub bank: TokenSignatureBank,
}

impl TemplateTranscriber {
    pub fn new(bank: TokenSignatureBank) -> Self {
        Self { bank }
    }

    /// Transcribes frames directly. A trailing partial window is dropped and a
    /// window closer to silence than to every token ends the transcript. Ties
    /// go to the lowest token index.
    pub fn transcribe_frames(&self, frames: &ndarray::Array2<f32>) -> Vec<String> {
        let k = self.bank.frames_per_token;
        let mut out = Vec::new();
        if frames.ncols() != self.bank.n_mels() {
            return out;
        }
        for w in 0..frames.nrows() / k {
            let window = frames.slice(ndarray::s![w * k..(w + 1) * k, ..]).to_owned();
            let mut best = (f64::INFINITY, 0usize);
            for (i, sig) in self.bank.signatures.iter().enumerate() {
                let d = distance(&window, sig);
                if d < best.0 {
                    best = (d, i);
                }
            }
            if distance(&window, &self.bank.silence_signature) < best.0 {
                break;
            }
            out.push(self.bank.vocab[best.1].clone());
        }
        out
    }
}

impl Transcriber for TemplateTranscriber {
    fn transcribe(&self, mel: &MelSpectrogram, _image_id: &str) -> Result<Vec<String>> {
        if mel.n_mels() != self.bank.n_mels() {
            return Err(SasError::Input(format!(
                "spectrogram has {} channels, signatures have {}",
                mel.n_mels(),
                self.bank.n_mels()
            )));
        }
        Ok(self.transcribe_frames(&mel.frames))
    }
}

/// Returns each image's first reference caption regardless of the audio;
/// an upper bound for the scoring pipeline.
pub struct OracleTranscriber {
    pub answers: HashMap<String, Vec<String>>,
}

impl Transcriber for OracleTranscriber {
    fn transcribe(&self, _mel: &MelSpectrogram, image_id: &str) -> Result<Vec<String>> {
        self.answers
            .get(image_id)
            .cloned()
            .ok_or_else(|| SasError::Input(format!("no reference for image {image_id}")))
    }
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    #[serde(rename = "B1")]
    pub b1: f64,
    #[serde(rename = "B2")]
    pub b2: f64,
    #[serde(rename = "B3")]
    pub b3: f64,
    #[serde(rename = "B4")]
    pub b4: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 7] {
        [self.b1, self.b2, self.b3, self.b4, self.m, self.r, self.c]
    }

    pub const HEADER: [&'static str; 7] = ["B1", "B2", "B3", "B4", "M", "R", "C"];

    pub fn header_line() -> String {
        Self::HEADER.iter().map(|h| format!("{h:>7}")).collect::<Vec<_>>().join("")
    }

    pub fn row_line(&self) -> String {
        self.values().iter().map(|v| format!("{v:>7.1}")).collect::<Vec<_>>().join("")
    }
}

type Sent = [String];

fn check_inputs(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(SasError::Input("no candidates to score".into()));
    }
    if candidates.len() != references.len() {
        return Err(SasError::Input("one reference set per candidate required".into()));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(SasError::Input("every candidate needs at least one reference".into()));
    }
    Ok(())
}

fn ngram_counts(s: &Sent, n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-1..`max_n` (×100) with clipped counts and the closest-length
/// brevity penalty (ties go to the shorter reference).
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], max_n: usize) -> Result<Vec<f64>> {
    check_inputs(candidates, references)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| ((l as isize - cand.len() as isize).abs(), l))
            .expect("nonempty references");
        for n in 1..=max_n {
            let counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        if matched[n - 1] == 0 || total[n - 1] == 0 {
            log_sum = f64::NEG_INFINITY;
        } else {
            log_sum += (matched[n - 1] as f64 / total[n - 1] as f64).ln();
        }
        let score = if log_sum.is_finite() { bp * (log_sum / n as f64).exp() } else { 0.0 };
        out.push(100.0 * score);
    }
    Ok(out)
}

/// Minimum number of chunks over all maximum exact unigram alignments,
/// together with the match count.
pub fn meteor_alignment(cand: &Sent, reference: &Sent) -> (usize, usize) {
    let mut cand_count: HashMap<&str, usize> = HashMap::new();
    let mut ref_count: HashMap<&str, usize> = HashMap::new();
    for w in cand {
        *cand_count.entry(w).or_insert(0) += 1;
    }
    for w in reference {
        *ref_count.entry(w).or_insert(0) += 1;
    }
    let matches: usize = cand_count
        .iter()
        .map(|(w, &c)| c.min(ref_count.get(w).copied().unwrap_or(0)))
        .sum();
    if matches == 0 {
        return (0, 0);
    }
    if reference.len() > 64 {
        return (matches, greedy_chunks(cand, reference));
    }
    // remaining[i]: candidate occurrences of cand[i]'s word at positions ≥ i
    let mut remaining = vec![0usize; cand.len()];
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for i in (0..cand.len()).rev() {
        let e = seen.entry(&cand[i]).or_insert(0);
        *e += 1;
        remaining[i] = *e;
    }
    let quota: HashMap<&str, usize> = cand_count
        .iter()
        .map(|(w, &c)| (*w, c.min(ref_count.get(w).copied().unwrap_or(0))))
        .collect();
    let mut memo = HashMap::new();
    let adjacent = best_adjacency(cand, reference, 0, 0, None, &remaining, &quota, &mut memo);
    (matches, matches - adjacent)
}

/// Maximum count of consecutive aligned pairs `(i, j) → (i + 1, j + 1)`
/// over maximum alignments of the suffix starting at candidate position `i`.
#[allow(clippy::too_many_arguments)]
fn best_adjacency(
    cand: &Sent,
    reference: &Sent,
    i: usize,
    used: u64,
    prev: Option<usize>,
    remaining: &[usize],
    quota: &HashMap<&str, usize>,
    memo: &mut HashMap<(usize, u64, Option<usize>), usize>,
) -> usize {
    if i == cand.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, used, prev)) {
        return v;
    }
    let word = cand[i].as_str();
    let used_for_word = (0..reference.len())
        .filter(|&j| used & (1 << j) != 0 && reference[j] == word)
        .count();
    let still_needed = quota.get(word).copied().unwrap_or(0) - used_for_word;
    let mut best: Option<usize> = None;
    if still_needed < remaining[i] {
        best = Some(best_adjacency(cand, reference, i + 1, used, None, remaining, quota, memo));
    }
    if still_needed > 0 {
        for j in 0..reference.len() {
            if used & (1 << j) == 0 && reference[j] == word {
                let bonus = usize::from(prev.is_some_and(|p| p + 1 == j));
                let v = bonus + best_adjacency(cand, reference, i + 1, used | (1 << j), Some(j), remaining, quota, memo);
                best = Some(best.map_or(v, |b| b.max(v)));
            }
        }
    }
    let v = best.expect("an alignment always exists");
    memo.insert((i, used, prev), v);
    v
}

fn greedy_chunks(cand: &Sent, reference: &Sent) -> usize {
    let mut used = vec![false; reference.len()];
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for w in cand {
        let pick = prev
            .map(|p| p + 1)
            .filter(|&j| j < reference.len() && !used[j] && &reference[j] == w)
            .or_else(|| (0..reference.len()).find(|&j| !used[j] && &reference[j] == w));
        match pick {
            Some(j) => {
                if prev != Some(j.wrapping_sub(1)) || j == 0 {
                    chunks += 1;
                }
                used[j] = true;
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    chunks
}

pub fn meteor_sentence(cand: &Sent, reference: &Sent) -> f64 {
    let (m, chunks) = meteor_alignment(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// Exact-match METEOR, best reference per item, mean over items, ×100.
pub fn meteor_exact(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| meteor_sentence(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(100.0 * total / candidates.len() as f64)
}

pub fn lcs_len(a: &Sent, b: &Sent) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_sentence(cand: &Sent, reference: &Sent, beta: f64) -> f64 {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    (1.0 + beta * beta) * p * r / (r + beta * beta * p)
}

/// ROUGE-L F-measure, best reference per item, mean over items, ×100.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], beta: f64) -> Result<f64> {
    check_inputs(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| rouge_l_sentence(c, r, beta)).fold(0.0, f64::max))
        .sum();
    Ok(100.0 * total / candidates.len() as f64)
}

type NgramVec = [BTreeMap<Vec<String>, f64>; 4];

/// CIDEr-D (σ = 6, clipped, ×10). Document frequencies come from each item's
/// reference set. For a one-item corpus every n-gram would get zero IDF, so
/// uniform weights are used instead.
pub fn cider_d(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    const SIGMA: f64 = 6.0;
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for refs in references {
        let mut present = std::collections::HashSet::new();
        for r in refs {
            for n in 1..=4 {
                for g in ngram_counts(r, n).into_keys() {
                    present.insert(g.to_vec());
                }
            }
        }
        for g in present {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let n_docs = references.len() as f64;
    let log_n = n_docs.ln();
    let weight = |g: &[String]| -> f64 {
        if references.len() == 1 {
            1.0
        } else {
            log_n - df.get(g).copied().unwrap_or(0.0).max(1.0).ln()
        }
    };
    let to_vec = |s: &Sent| -> (NgramVec, [f64; 4], usize) {
        let mut vec: NgramVec = Default::default();
        let mut norm = [0.0; 4];
        let mut length = 0;
        for n in 1..=4 {
            for (g, tf) in ngram_counts(s, n) {
                let v = tf as f64 * weight(g);
                norm[n - 1] += v * v;
                if n == 2 {
                    length += tf;
                }
                vec[n - 1].insert(g.to_vec(), v);
            }
        }
        (vec, norm.map(f64::sqrt), length)
    };
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let (cv, cn, cl) = to_vec(cand);
        let mut score = [0.0; 4];
        for r in refs {
            let (rv, rn, rl) = to_vec(r);
            let delta = cl as f64 - rl as f64;
            for n in 0..4 {
                let mut val: f64 = cv[n]
                    .iter()
                    .map(|(g, &v)| rv[n].get(g).map_or(0.0, |&w| v.min(w) * w))
                    .sum();
                if cn[n] != 0.0 && rn[n] != 0.0 {
                    val /= cn[n] * rn[n];
                }
                score[n] += val * (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            }
        }
        let mean_over_n = score.iter().sum::<f64>() / 4.0;
        total += mean_over_n / refs.len() as f64 * 10.0;
    }
    Ok(total / candidates.len() as f64)
}

pub fn score_corpus(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<MetricReport> {
    let b = bleu(candidates, references, 4)?;
    Ok(MetricReport {
        b1: b[0],
        b2: b[1],
        b3: b[2],
        b4: b[3],
        m: meteor_exact(candidates, references)?,
        r: rouge_l(candidates, references, 1.2)?,
        c: cider_d(candidates, references)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub image_id: String,
    pub candidate: String,
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub n_frames: usize,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub per_image: Vec<ItemResult>,
    pub report: MetricReport,
}

impl EvalOutput {
    /// Plain-text transcript listing, one image per block.
    pub fn transcript_dump(&self) -> String {
        let mut out = String::new();
        for item in &self.per_image {
            out.push_str(&format!("{}\n  ASR: {}\n", item.image_id, item.candidate));
            for r in &item.references {
                out.push_str(&format!("  REF: {r}\n"));
            }
        }
        out
    }
}

/// Synthesizes every image of `split`, transcribes the refined
/// spectrograms and scores them against the image's captions. A failing item
/// is recorded with an empty candidate instead of aborting the run.
pub fn evaluate(
    model: &SasModel<f32>,
    data: &CorpusData,
    split: &str,
    transcriber: &dyn Transcriber,
    audio: &AudioConfig,
    batch_size: usize,
) -> Result<EvalOutput> {
    let images = data.images(split)?;
    if images.is_empty() {
        return Err(SasError::Input(format!("split {split} has no images")));
    }
    let mut per_image = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let items: Vec<&RegionFeatureSet> = chunk.iter().map(|(f, _)| f.as_ref()).collect();
        let synth = synthesize(model, &items, None, false);
        for (i, (rfs, refs)) in chunk.iter().enumerate() {
            let references: Vec<String> = refs.iter().map(|r| r.join(" ")).collect();
            let mut item = ItemResult {
                image_id: rfs.image_id.clone(),
                candidate: String::new(),
                references,
                error: None,
                n_frames: 0,
                truncated: false,
            };
            match &synth {
                Ok(out) => {
                    item.n_frames = out.n_frames[i];
                    item.truncated = out.truncated[i];
                    let mel = MelSpectrogram::new(out.mel_post[i].clone(), audio);
                    match transcriber.transcribe(&mel, &rfs.image_id) {
                        Ok(tokens) => item.candidate = tokens.join(" "),
                        Err(e) => item.error = Some(e.to_string()),
                    }
                }
                Err(e) => item.error = Some(e.to_string()),
            }
            if let Some(e) = &item.error {
                tracing::warn!(image = %item.image_id, error = %e, "item failed");
            }
            per_image.push(item);
        }
    }
    let candidates: Vec<Vec<String>> = per_image.iter().map(|r| tokenize(&r.candidate)).collect();
    let references: Vec<Vec<Vec<String>>> = per_image
        .iter()
        .map(|r| r.references.iter().map(|s| tokenize(s)).collect())
        .collect();
    let report = score_corpus(&candidates, &references)?;
    Ok(EvalOutput { per_image, report })
}
