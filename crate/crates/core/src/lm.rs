//! Decoder-only language model over `[visual prefix ‖ text tokens]`, with a
//! KV cache for incremental greedy decoding.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Color, Relation, Shape, Size};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerKv, LayerNorm};
use crate::numerics::{kernels, Tape, Tensor, Var};
use crate::params::{normal, Bind, ParamGroup, ParamId, ParamStore};
use crate::Scalar;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const CAPTION_TASK: &str = "<caption>";
pub const REFINE_TASK: &str = "<refine>";
pub const SEP: &str = "<sep>";

/// Token string ↔ id bijection with the special ids broken out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub bos: usize,
    pub eos: usize,
    pub caption_task: usize,
    pub refine_task: usize,
    pub sep: usize,
}

impl Vocabulary {
    /// Specials first, then `words` in order. Duplicate words are rejected.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = [BOS, EOS, CAPTION_TASK, REFINE_TASK, SEP].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index, bos: 0, eos: 1, caption_task: 2, refine_task: 3, sep: 4 })
    }

    pub fn shapes_world() -> Self {
        let mut words: Vec<&str> = vec!["a", "and"];
        words.extend(Size::ALL.iter().map(|s| s.word()));
        words.extend(Color::ALL.iter().map(|c| c.word()));
        words.extend(Shape::ALL.iter().map(|s| s.word()));
        words.extend(Relation::ALL.iter().map(|r| r.word()));
        Self::new(&words).expect("shapes-world words are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::TokenIdOutOfRange { id, vocab: self.tokens.len() })
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Lowercase whitespace tokenization followed by [`Self::encode`].
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        self.encode(&words)
    }

    /// Words for `ids`, stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().take_while(|&&i| i != self.eos).map(|&i| self.token(i).map(str::to_string)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { vocab_size: Vocabulary::shapes_world().len(), d_lm: 128, layers: 4, heads: 4, max_seq: 112 }
    }
}

impl LmConfig {
    pub fn validate(&self, n_v: usize, t_max: usize) -> Result<()> {
        if self.heads == 0 || self.d_lm % self.heads != 0 {
            return Err(Error::Config(format!("d_lm {} is not divisible by {} heads", self.d_lm, self.heads)));
        }
        let need = n_v + 2 * t_max + 4;
        if self.max_seq < need {
            return Err(Error::Config(format!(
                "max_seq {} is below N_v + 2·T_max + 4 = {need}",
                self.max_seq
            )));
        }
        Ok(())
    }
}

/// Per-layer appended keys and values of one decode.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    pub layers: Vec<LayerKv<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(layers: usize) -> Self {
        Self { layers: (0..layers).map(|_| LayerKv::default()).collect() }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Taped forward outputs.
#[derive(Clone, Debug)]
pub struct LmOut {
    /// `T × V` logits for the text positions.
    pub logits: Var,
    /// Attention weights of every block (`heads × S × S` each).
    pub attn: Vec<Var>,
}

/// Greedy decode result.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded<T> {
    /// Generated ids, including the terminating EOS when one was produced.
    pub ids: Vec<usize>,
    /// Sum of the log-probabilities of the generated ids.
    pub logprob: T,
    /// Final-block attention rows (head-averaged, over all keys so far) at
    /// each generating position, when requested.
    pub attention: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl LanguageModel {
    pub fn new<T: Scalar>(cfg: &LmConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Lm;
        let embed = store.add("lm.embed", g, normal(vec![cfg.vocab_size, cfg.d_lm], 0.1, rng));
        let pos = store.add("lm.pos", g, normal(vec![cfg.max_seq, cfg.d_lm], 0.02, rng));
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("lm.block{}", i + 1), g, cfg.d_lm, cfg.heads, true, cfg.layers, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "lm.ln_f", g, cfg.d_lm);
        Self { cfg: cfg.clone(), embed, pos, blocks, ln_f }
    }

    pub fn d(&self) -> usize {
        self.cfg.d_lm
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            Some(&id) => Err(Error::TokenIdOutOfRange { id, vocab: self.cfg.vocab_size }),
            None => Ok(()),
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_seq {
            return Err(Error::SequenceOverflow { len, max: self.cfg.max_seq });
        }
        Ok(())
    }

    /// Embedding rows of `ids` (no positions), `len × d_lm`.
    pub fn embed_rows<T: Scalar>(&self, store: &ParamStore<T>, ids: &[usize]) -> Result<Vec<T>> {
        self.check_ids(ids)?;
        let table = store.get(self.embed);
        Ok(ids.iter().flat_map(|&i| table.row(i).iter().copied()).collect())
    }

    /// Taped token-embedding lookup (shares the tied table).
    pub fn embed_var<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Bind<'_, T>, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let table = bind.var(tape, self.embed)?;
        Ok(tape.gather(table, ids)?)
    }

    /// Taped forward over `[prefix ‖ tokens]`; logits are returned for the
    /// text positions only.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Bind<'_, T>, prefix: Var, tokens: &[usize]) -> Result<LmOut> {
        let n_v = tape.value(prefix).rows();
        if tape.value(prefix).cols() != self.d() {
            return Err(crate::NumericsError::ShapeMismatch {
                op: "lm prefix",
                detail: format!("expected width {}, got {}", self.d(), tape.value(prefix).cols()),
            }
            .into());
        }
        if tokens.is_empty() {
            return Err(Error::Config("language model needs at least one text token".into()));
        }
        let total = n_v + tokens.len();
        self.check_len(total)?;
        let emb = self.embed_var(tape, bind, tokens)?;
        let x = tape.concat_rows(&[prefix, emb])?;
        let pos = bind.var(tape, self.pos)?;
        let pos = tape.slice_rows(pos, 0, total)?;
        let mut x = tape.add(x, pos)?;
        let mut attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(tape, bind, x)?;
            attn.push(out.attn);
            x = out.out;
        }
        let text = tape.slice_rows(x, n_v, tokens.len())?;
        let h = self.ln_f.forward(tape, bind, text)?;
        let table = bind.var(tape, self.embed)?;
        let logits = tape.matmul_nt(h, table)?;
        Ok(LmOut { logits, attn })
    }

    /// Adds position embeddings for positions `start..` to row-major `x`.
    fn add_positions<T: Scalar>(&self, store: &ParamStore<T>, x: &mut [T], start: usize) {
        let d = self.d();
        let pos = store.get(self.pos).data();
        for (i, e) in x.iter_mut().enumerate() {
            *e = *e + pos[start * d + i];
        }
    }

    /// Pushes `rows` already-embedded rows through every block, extending
    /// the cache. Returns the final hidden rows and the head-averaged
    /// final-block attention (`rows × total`).
    fn extend<T: Scalar>(&self, store: &ParamStore<T>, cache: &mut KvCache<T>, mut x: Vec<T>, rows: usize) -> Result<(Vec<T>, Vec<T>)> {
        let start = cache.len();
        self.check_len(start + rows)?;
        self.add_positions(store, &mut x, start);
        let mut last_probs = Vec::new();
        for (block, kv) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            let (out, probs) = block.forward_cached(store, &x, rows, kv);
            x = out;
            last_probs = probs;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(crate::NumericsError::NonFinite { op: "lm forward" }.into());
        }
        let total = start + rows;
        let heads = self.cfg.heads;
        let mut avg = vec![T::zero(); rows * total];
        for h in 0..heads {
            for (a, p) in avg.iter_mut().zip(&last_probs[h * rows * total..(h + 1) * rows * total]) {
                *a = *a + *p;
            }
        }
        let inv = T::one() / T::from_usize(heads).unwrap();
        avg.iter_mut().for_each(|a| *a = *a * inv);
        Ok((x, avg))
    }

    /// Tied-embedding logits for hidden rows.
    fn logits<T: Scalar>(&self, store: &ParamStore<T>, h: &[T], rows: usize) -> Vec<T> {
        let h = self.ln_f.infer(store, h);
        kernels::matmul_nt(&h, store.get(self.embed).data(), rows, self.d(), self.cfg.vocab_size)
    }

    /// Feeds the visual prefix into an empty cache.
    pub fn start<T: Scalar>(&self, store: &ParamStore<T>, prefix: &Tensor<T>) -> Result<KvCache<T>> {
        if prefix.cols() != self.d() {
            return Err(crate::NumericsError::ShapeMismatch {
                op: "lm prefix",
                detail: format!("expected width {}, got {}", self.d(), prefix.cols()),
            }
            .into());
        }
        let mut cache = KvCache::new(self.blocks.len());
        self.extend(store, &mut cache, prefix.data().to_vec(), prefix.rows())?;
        Ok(cache)
    }

    /// Appends `ids` to a started cache and returns their logits
    /// (`len × V`) plus final-block head-averaged attention (`len × total`).
    pub fn feed<T: Scalar>(&self, store: &ParamStore<T>, cache: &mut KvCache<T>, ids: &[usize]) -> Result<(Vec<T>, Vec<T>)> {
        let x = self.embed_rows(store, ids)?;
        let (h, attn) = self.extend(store, cache, x, ids.len())?;
        Ok((self.logits(store, &h, ids.len()), attn))
    }

    /// Untaped forward: logits `T × V` for the text positions.
    pub fn forward_infer<T: Scalar>(&self, store: &ParamStore<T>, prefix: &Tensor<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        self.check_len(prefix.rows() + tokens.len())?;
        let mut cache = self.start(store, prefix)?;
        let (logits, _) = self.feed(store, &mut cache, tokens)?;
        Ok(Tensor::matrix(tokens.len(), self.cfg.vocab_size, logits)?)
    }

    /// Greedy decoding after `prompt`, stopping at EOS or `max_new` tokens.
    /// Without the cache every step recomputes the whole sequence.
    pub fn decode_greedy<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prefix: &Tensor<T>,
        prompt: &[usize],
        max_new: usize,
        eos: usize,
        use_cache: bool,
    ) -> Result<Decoded<T>> {
        self.decode_inner(store, prefix, prompt, max_new, eos, use_cache, false)
    }

    /// As [`Self::decode_greedy`] (cached), also recording attention rows.
    pub fn decode_with_attention<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prefix: &Tensor<T>,
        prompt: &[usize],
        max_new: usize,
        eos: usize,
    ) -> Result<Decoded<T>> {
        self.decode_inner(store, prefix, prompt, max_new, eos, true, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_inner<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prefix: &Tensor<T>,
        prompt: &[usize],
        max_new: usize,
        eos: usize,
        use_cache: bool,
        record: bool,
    ) -> Result<Decoded<T>> {
        self.check_ids(prompt)?;
        self.check_len(prefix.rows() + prompt.len() + max_new)?;
        let mut out = Decoded { ids: Vec::new(), logprob: T::zero(), attention: Vec::new() };
        if max_new == 0 {
            return Ok(out);
        }
        if prompt.is_empty() {
            return Err(Error::Config("decoding needs a non-empty prompt".into()));
        }
        let v = self.cfg.vocab_size;
        let mut seq = prompt.to_vec();
        let mut cache = self.start(store, prefix)?;
        let (mut logits, mut attn) = self.feed(store, &mut cache, prompt)?;
        loop {
            let rows = logits.len() / v;
            let last = &logits[(rows - 1) * v..];
            let next = kernels::argmax(last);
            out.logprob = out.logprob + kernels::log_softmax_at(last, next);
            if record {
                let total = attn.len() / rows;
                out.attention.push(attn[(rows - 1) * total..].to_vec());
            }
            out.ids.push(next);
            if next == eos || out.ids.len() == max_new {
                break;
            }
            seq.push(next);
            if use_cache {
                (logits, attn) = self.feed(store, &mut cache, &[next])?;
            } else {
                cache = self.start(store, prefix)?;
                (logits, attn) = self.feed(store, &mut cache, &seq)?;
            }
        }
        Ok(out)
    }

    /// Teacher-forced `Σⱼ log p(continuationⱼ | prefix, context, continuation<ⱼ)`.
    pub fn sequence_logprob<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prefix: &Tensor<T>,
        context: &[usize],
        continuation: &[usize],
    ) -> Result<T> {
        if continuation.is_empty() {
            return Ok(T::zero());
        }
        if context.is_empty() {
            return Err(Error::Config("sequence_logprob needs a non-empty context".into()));
        }
        self.check_ids(continuation)?;
        let mut input = context.to_vec();
        input.extend_from_slice(&continuation[..continuation.len() - 1]);
        let logits = self.forward_infer(store, prefix, &input)?;
        let first = context.len() - 1;
        Ok(continuation
            .iter()
            .enumerate()
            .map(|(j, &c)| kernels::log_softmax_at(logits.row(first + j), c))
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_a_bijection_with_distinct_specials() {
        let v = Vocabulary::shapes_world();
        assert_eq!(v.len(), 5 + 15);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t).unwrap(), i);
        }
        let specials = [v.bos, v.eos, v.caption_task, v.refine_task, v.sep];
        let mut s = specials.to_vec();
        s.dedup();
        assert_eq!(s.len(), 5);
        assert!(matches!(v.id("dog"), Err(Error::UnknownToken(_))));
        assert_eq!(v.decode(&[5, 6, v.eos, 7]).unwrap().len(), 2);
    }
}
