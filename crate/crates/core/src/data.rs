//! Text cleanup, hash vocabulary, TSV ingestion, synthetic tasks and batching.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenBatch;
use crate::error::{Error, Result};
use crate::heads::{Task, SST_CLASSES};
use crate::nn::fnv1a;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const RESERVED: usize = 3;

const KEPT_PUNCT: &str = ".,!?'\"-:;()";

/// Drop characters outside letters, digits, whitespace and basic punctuation,
/// then collapse whitespace runs and trim.
pub fn clean_text(s: &str) -> String {
    let kept: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || KEPT_PUNCT.contains(*c))
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Hash-bucket word vocabulary. Ids 0..3 are pad, unk and cls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size <= RESERVED {
            return Err(Error::Config(format!("vocab size must exceed {RESERVED}, got {size}")));
        }
        Ok(Self { size })
    }

    pub fn id(&self, word: &str) -> usize {
        if word.is_empty() {
            return UNK;
        }
        let h = fnv1a(word.to_lowercase().as_bytes());
        RESERVED + (h % (self.size - RESERVED) as u64) as usize
    }

    /// `[CLS] w1 w2 ...`, truncated to `max_len` ids.
    pub fn encode(&self, sentence: &str, max_len: usize) -> Vec<usize> {
        let cleaned = clean_text(sentence);
        let mut ids = vec![CLS];
        ids.extend(cleaned.split(' ').filter(|w| !w.is_empty()).map(|w| self.id(w)));
        ids.truncate(max_len.max(1));
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SstExample {
    pub sentence: String,
    pub label: usize,
}

/// A sentence pair. `label` is 0/1 for paraphrase and a score in [0, 5] for STS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub sentence1: String,
    pub sentence2: String,
    pub label: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub sst: Vec<SstExample>,
    pub para: Vec<PairExample>,
    pub sts: Vec<PairExample>,
}

impl TaskData {
    pub fn len(&self, task: Task) -> usize {
        match task {
            Task::Sst => self.sst.len(),
            Task::Para => self.para.len(),
            Task::Sts => self.sts.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsvLoad {
    pub data: TaskData,
    pub skipped: usize,
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Data {
        path: path.to_path_buf(),
        msg: format!("missing required column '{name}'"),
    })
}

/// Read a tab-separated task file with a header row. Columns are located by
/// name: `sentence`/`sentiment` for SST, `sentence1`/`sentence2`/`is_duplicate`
/// for paraphrase and `sentence1`/`sentence2`/`similarity` for STS. Malformed
/// rows are skipped and counted.
pub fn load_tsv(path: &Path, task: Task) -> Result<TsvLoad> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .quoting(false)
        .from_reader(file);
    let headers = rdr.headers()?.clone();
    let mut data = TaskData::default();
    let mut skipped = 0usize;
    let cols: Vec<usize> = match task {
        Task::Sst => vec![column(&headers, "sentence", path)?, column(&headers, "sentiment", path)?],
        Task::Para => vec![
            column(&headers, "sentence1", path)?,
            column(&headers, "sentence2", path)?,
            column(&headers, "is_duplicate", path)?,
        ],
        Task::Sts => vec![
            column(&headers, "sentence1", path)?,
            column(&headers, "sentence2", path)?,
            column(&headers, "similarity", path)?,
        ],
    };
    for rec in rdr.records() {
        let Ok(rec) = rec else {
            skipped += 1;
            continue;
        };
        let field = |i: usize| rec.get(cols[i]).map(str::trim);
        let ok = match task {
            Task::Sst => match (field(0).map(clean_text), field(1).and_then(|s| s.parse::<f32>().ok())) {
                (Some(s), Some(l)) if !s.is_empty() && l.fract() == 0.0 && (0.0..SST_CLASSES as f32).contains(&l) => {
                    data.sst.push(SstExample { sentence: s, label: l as usize });
                    true
                }
                _ => false,
            },
            Task::Para | Task::Sts => {
                let label = field(2).and_then(|s| s.parse::<f32>().ok());
                let valid = |l: f32| match task {
                    Task::Para => l == 0.0 || l == 1.0,
                    _ => (0.0..=5.0).contains(&l),
                };
                match (field(0).map(clean_text), field(1).map(clean_text), label) {
                    (Some(a), Some(b), Some(l)) if !a.is_empty() && !b.is_empty() && valid(l) => {
                        let ex = PairExample { sentence1: a, sentence2: b, label: l };
                        if task == Task::Para {
                            data.para.push(ex);
                        } else {
                            data.sts.push(ex);
                        }
                        true
                    }
                    _ => false,
                }
            }
        };
        if !ok {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} malformed {task} rows", path.display());
    }
    Ok(TsvLoad { data, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub sst: usize,
    pub para: usize,
    pub sts: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        Self { sst: 1000, para: 1000, sts: 1000 }
    }
}

const SENTIMENT_WORDS: usize = 6;
const FILLER_WORDS: usize = 150;
const CONTENT_WORDS: usize = 400;

fn words_of(s: &str) -> BTreeSet<&str> {
    s.split(' ').filter(|w| !w.is_empty()).collect()
}

/// Token-set Jaccard overlap.
pub fn jaccard(a: &str, b: &str) -> f32 {
    let (sa, sb) = (words_of(a), words_of(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f32 / union as f32
}

/// Paraphrase rule for synthetic pairs: duplicates share at least half their tokens.
pub fn synth_para_label(a: &str, b: &str) -> f32 {
    if jaccard(a, b) >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// STS rule for synthetic pairs: five times the token Jaccard.
pub fn synth_sts_score(a: &str, b: &str) -> f32 {
    5.0 * jaccard(a, b)
}

fn distinct_words(rng: &mut ChaCha8Rng, n: usize, avoid: &BTreeSet<usize>) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(n);
    while out.len() < n {
        let w = rng.random_range(0..CONTENT_WORDS);
        if !avoid.contains(&w) && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// A content sentence and a copy with `keep` of its positions retained and the
/// rest replaced by unseen words.
fn pair_with_overlap(rng: &mut ChaCha8Rng, len: usize, keep: usize) -> (String, String) {
    let base = distinct_words(rng, len, &BTreeSet::new());
    let used: BTreeSet<usize> = base.iter().copied().collect();
    let fresh = distinct_words(rng, len - keep, &used);
    let mut positions: Vec<usize> = (0..len).collect();
    positions.shuffle(rng);
    let replaced: BTreeSet<usize> = positions[..len - keep].iter().copied().collect();
    let mut other = base.clone();
    for (pos, w) in replaced.iter().zip(fresh) {
        other[*pos] = w;
    }
    let text = |ws: &[usize]| ws.iter().map(|w| format!("c{w}")).collect::<Vec<_>>().join(" ");
    (text(&base), text(&other))
}

/// Seeded desk-scale stand-ins for the three tasks. SST labels are set by
/// planted sentiment-word groups; paraphrase and STS labels follow from token
/// overlap via [`synth_para_label`] and [`synth_sts_score`].
pub fn synth_tasks(seed: u64, sizes: SynthSizes) -> Result<TaskData> {
    if sizes.sst < 10 || sizes.para < 10 || sizes.sts < 10 {
        return Err(Error::Config(format!("synthetic sizes must be at least 10, got {sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = TaskData::default();
    for _ in 0..sizes.sst {
        let label = rng.random_range(0..SST_CLASSES);
        let len = rng.random_range(5..=9);
        let mut words: Vec<String> = (0..len).map(|_| format!("f{}", rng.random_range(0..FILLER_WORDS))).collect();
        for _ in 0..2 {
            let pos = rng.random_range(0..len);
            words[pos] = format!("s{label}x{}", rng.random_range(0..SENTIMENT_WORDS));
        }
        data.sst.push(SstExample { sentence: words.join(" "), label });
    }
    for i in 0..sizes.para {
        let len = rng.random_range(6..=9);
        let keep = if i % 2 == 0 {
            rng.random_range(len - 1..=len)
        } else {
            rng.random_range(0..=1)
        };
        let (a, b) = pair_with_overlap(&mut rng, len, keep);
        let label = synth_para_label(&a, &b);
        data.para.push(PairExample { sentence1: a, sentence2: b, label });
    }
    for _ in 0..sizes.sts {
        let len = rng.random_range(5..=9);
        let keep = rng.random_range(0..=len);
        let (a, b) = pair_with_overlap(&mut rng, len, keep);
        let label = synth_sts_score(&a, &b);
        data.sts.push(PairExample { sentence1: a, sentence2: b, label });
    }
    Ok(data)
}

/// Seeded 80/10/10 train/dev/test split of every task.
pub fn split(data: &TaskData, seed: u64) -> (TaskData, TaskData, TaskData) {
    fn three<T: Clone>(v: &[T], rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.shuffle(rng);
        let n_train = v.len() * 8 / 10;
        let n_dev = v.len() / 10;
        let pick = |r: &[usize]| r.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        (pick(&idx[..n_train]), pick(&idx[n_train..n_train + n_dev]), pick(&idx[n_train + n_dev..]))
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5011);
    let (a, b, c) = three(&data.sst, &mut rng);
    let (d, e, f) = three(&data.para, &mut rng);
    let (g, h, i) = three(&data.sts, &mut rng);
    (
        TaskData { sst: a, para: d, sts: g },
        TaskData { sst: b, para: e, sts: h },
        TaskData { sst: c, para: f, sts: i },
    )
}

/// One batch of a task, already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Sst { ids: TokenBatch, labels: Vec<usize> },
    Pair { a: TokenBatch, b: TokenBatch, targets: Vec<f32> },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Sst { labels, .. } => labels.len(),
            Batch::Pair { targets, .. } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pre-tokenized examples for a task, batched on demand.
#[derive(Debug, Clone)]
pub struct TaskLoader {
    pub task: Task,
    pub batch_size: usize,
    sst: Vec<(Vec<usize>, usize)>,
    pairs: Vec<(Vec<usize>, Vec<usize>, f32)>,
}

impl TaskLoader {
    pub fn new(task: Task, data: &TaskData, vocab: &Vocab, max_len: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut cache: HashMap<&str, Vec<usize>> = HashMap::new();
        let enc = |s: &'_ str| -> Vec<usize> { vocab.encode(s, max_len) };
        let (sst, pairs) = match task {
            Task::Sst => (data.sst.iter().map(|e| (enc(&e.sentence), e.label)).collect(), Vec::new()),
            Task::Para | Task::Sts => {
                let src = if task == Task::Para { &data.para } else { &data.sts };
                let mut out = Vec::with_capacity(src.len());
                for e in src {
                    let a = cache.entry(&e.sentence1).or_insert_with(|| enc(&e.sentence1)).clone();
                    let b = cache.entry(&e.sentence2).or_insert_with(|| enc(&e.sentence2)).clone();
                    out.push((a, b, e.label));
                }
                (Vec::new(), out)
            }
        };
        Ok(Self { task, batch_size, sst, pairs })
    }

    pub fn len(&self) -> usize {
        self.sst.len().max(self.pairs.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_batches(&self) -> usize {
        self.len().div_ceil(self.batch_size)
    }

    /// Batches in order, or shuffled by `shuffle_seed`.
    pub fn batches(&self, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        }
        order
            .chunks(self.batch_size)
            .map(|chunk| match self.task {
                Task::Sst => {
                    let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| self.sst[i].0.clone()).collect();
                    let labels = chunk.iter().map(|&i| self.sst[i].1).collect();
                    Ok(Batch::Sst { ids: TokenBatch::from_sequences(&seqs)?, labels })
                }
                _ => {
                    let a: Vec<Vec<usize>> = chunk.iter().map(|&i| self.pairs[i].0.clone()).collect();
                    let b: Vec<Vec<usize>> = chunk.iter().map(|&i| self.pairs[i].1.clone()).collect();
                    let targets = chunk.iter().map(|&i| self.pairs[i].2).collect();
                    Ok(Batch::Pair {
                        a: TokenBatch::from_sequences(&a)?,
                        b: TokenBatch::from_sequences(&b)?,
                        targets,
                    })
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cleaning() {
        assert_eq!(clean_text("hello   world "), "hello world");
        assert_eq!(clean_text("a✨b"), "ab");
        let s = "  it's\tgreat!!  (really) ✨ ";
        assert_eq!(clean_text(&clean_text(s)), clean_text(s));
    }

    #[test]
    fn vocab_is_stable() {
        let v = Vocab::new(4096).unwrap();
        assert_eq!(v.id("Hello"), v.id("hello"));
        let ids = v.encode("a b c", 3);
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[0], CLS);
        assert!(ids.iter().all(|&i| i < 4096));
    }

    #[test]
    fn synthetic_rules() {
        let a = synth_tasks(3, SynthSizes { sst: 20, para: 20, sts: 20 }).unwrap();
        let b = synth_tasks(3, SynthSizes { sst: 20, para: 20, sts: 20 }).unwrap();
        assert_eq!(a, b);
        let s = &a.sts[0].sentence1;
        assert_eq!(synth_para_label(s, s), 1.0);
        assert_eq!(synth_sts_score(s, s), 5.0);
        assert_eq!(synth_sts_score("c1 c2", "c3 c4"), 0.0);
        assert!(a.sts.iter().all(|e| (0.0..=5.0).contains(&e.label)));
        assert!(synth_tasks(3, SynthSizes { sst: 5, para: 20, sts: 20 }).is_err());
    }
}
