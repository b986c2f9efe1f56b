//! Saliency-driven textual grounding.
//!
//! The saliency-masked image goes through a frozen auxiliary encoder `E`. Its
//! output `z_a` and the pooled classifier features `z_i` are projected to `m`
//! prefix embeddings each and summed: `V = W_I z_i + W_A z_a`. A small causal
//! transformer decodes the rationale after that prefix.
//!
//! Parameter names:
//!
//! | name | shape | trainable |
//! |------|-------|-----------|
//! | `aux.conv0.w`, `aux.conv0.b` | `[16, C*9]`, `[16]` | no |
//! | `aux.conv1.w`, `aux.conv1.b` | `[32, 16*9]`, `[32]` | no |
//! | `aux.proj.w`, `aux.proj.b` | `[A, 32]`, `[A]` | no |
//! | `txt.proj_i.w` | `[m*D, K]` | yes |
//! | `txt.proj_a.w` | `[m*D, A]` | yes |
//! | `txt.tok_emb`, `txt.pos_emb` | `[V, D]`, `[m+L, D]` | yes |
//! | `txt.layer{l}.*` | pre-norm attention and MLP block | yes |
//! | `txt.ln_f.*`, `txt.head.w`, `txt.head.b` | `[D]`, `[V, D]`, `[V]` | yes |

use std::collections::{BTreeMap, HashMap};

use megl_autodiff::{no_grad, Tensor};

use crate::config::{ExperimentConfig, SeedBank, TextReduction};
use crate::error::{MeglError, Result};
use crate::nn;
use crate::params::{Bound, Init, ParamStore};
use crate::saliency::mask_images;
use crate::types::ImageTensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const AUX_CHANNELS: [usize; 2] = [16, 32];
const MLP_MULT: usize = 2;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from a corpus: most frequent words first, ties broken
    /// lexicographically, keeping at most `cap` entries including reserved ids.
    pub fn build<S: AsRef<str>>(corpus: &[S], cap: usize) -> Self {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in corpus {
            for t in tokenize(text.as_ref()) {
                *freq.entry(t).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = cap.saturating_sub(RESERVED.len());
        Self::from_words(words.into_iter().take(keep).map(|(w, _)| w).collect())
    }

    fn from_words(words: Vec<String>) -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[BOS, words.., EOS]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(tokenize(text).iter().map(|t| self.id(t)))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Joins the non-reserved tokens of `ids`, stopping at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Words only (one per line); line `n` (from 0) holds id `n + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        let mut seen = std::collections::HashSet::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.split_whitespace().count() != 1 || !seen.insert(w.as_str()) {
                return Err(MeglError::Parse { line: i + 1, column: 1, message: format!("bad vocabulary entry {w:?}") });
            }
        }
        Ok(Self::from_words(words))
    }
}

/// `m x embed_dim` prefix embeddings for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    pub vectors: Vec<f64>,
    pub len: usize,
    pub embed_dim: usize,
}

impl TokenEmbeddingSequence {
    fn tensor(&self) -> Tensor {
        Tensor::new(self.vectors.clone(), &[1, self.len, self.embed_dim])
    }
}

/// Which inputs of the prefix keep their gradient connection to the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextRoutes {
    /// `z_i`, the pooled classifier features.
    pub features: bool,
    /// The saliency map used to mask the image for `E`.
    pub saliency: bool,
}

impl Default for TextRoutes {
    fn default() -> Self {
        TextRoutes { features: true, saliency: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grounder {
    pub in_channels: usize,
    pub image_size: usize,
    pub feature_dim: usize,
    pub aux_dim: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub prefix_tokens: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
}

impl Grounder {
    pub fn from_config(cfg: &ExperimentConfig, vocab_size: usize) -> Self {
        Grounder {
            in_channels: 3,
            image_size: cfg.image_size,
            feature_dim: cfg.feature_dim(),
            aux_dim: cfg.aux_feature_dim,
            embed_dim: cfg.embed_dim,
            num_heads: cfg.num_heads,
            num_layers: cfg.num_layers,
            prefix_tokens: cfg.prefix_tokens,
            max_text_len: cfg.max_text_len,
            vocab_size,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seeds: &SeedBank) {
        let (d, m, v) = (self.embed_dim, self.prefix_tokens, self.vocab_size);
        let mut cin = self.in_channels;
        for (i, &c) in AUX_CHANNELS.iter().enumerate() {
            store.init(seeds, &format!("aux.conv{i}.w"), &[c, cin * 9], Init::He(cin * 9), false);
            store.init(seeds, &format!("aux.conv{i}.b"), &[c], Init::Normal(0.1), false);
            cin = c;
        }
        store.init(seeds, "aux.proj.w", &[self.aux_dim, cin], Init::Normal(1.0 / (cin as f64).sqrt()), false);
        store.init(seeds, "aux.proj.b", &[self.aux_dim], Init::Normal(0.1), false);

        let proj_std = |fan: usize| Init::Normal(1.0 / (fan as f64).sqrt());
        store.init(seeds, "txt.proj_i.w", &[m * d, self.feature_dim], proj_std(self.feature_dim), true);
        store.init(seeds, "txt.proj_a.w", &[m * d, self.aux_dim], proj_std(self.aux_dim), true);
        store.init(seeds, "txt.tok_emb", &[v, d], Init::Normal(0.1), true);
        store.init(seeds, "txt.pos_emb", &[m + self.max_text_len, d], Init::Normal(0.02), true);
        let std = Init::Normal(0.02);
        for l in 0..self.num_layers {
            let p = format!("txt.layer{l}");
            store.init(seeds, &format!("{p}.ln1.g"), &[d], Init::Ones, true);
            store.init(seeds, &format!("{p}.ln1.b"), &[d], Init::Zeros, true);
            store.init(seeds, &format!("{p}.attn.qkv.w"), &[3 * d, d], std, true);
            store.init(seeds, &format!("{p}.attn.qkv.b"), &[3 * d], Init::Zeros, true);
            store.init(seeds, &format!("{p}.attn.out.w"), &[d, d], std, true);
            store.init(seeds, &format!("{p}.attn.out.b"), &[d], Init::Zeros, true);
            store.init(seeds, &format!("{p}.ln2.g"), &[d], Init::Ones, true);
            store.init(seeds, &format!("{p}.ln2.b"), &[d], Init::Zeros, true);
            store.init(seeds, &format!("{p}.mlp.fc1.w"), &[MLP_MULT * d, d], std, true);
            store.init(seeds, &format!("{p}.mlp.fc1.b"), &[MLP_MULT * d], Init::Zeros, true);
            store.init(seeds, &format!("{p}.mlp.fc2.w"), &[d, MLP_MULT * d], std, true);
            store.init(seeds, &format!("{p}.mlp.fc2.b"), &[d], Init::Zeros, true);
        }
        store.init(seeds, "txt.ln_f.g", &[d], Init::Ones, true);
        store.init(seeds, "txt.ln_f.b", &[d], Init::Zeros, true);
        store.init(seeds, "txt.head.w", &[v, d], proj_std(d), true);
        store.init(seeds, "txt.head.b", &[v], Init::Zeros, true);
    }

    /// Frozen encoder on `[B, C, H, W]` images, giving `[B, A]`.
    pub fn aux_features(&self, params: &Bound, images: &Tensor) -> Tensor {
        let mut x = images.clone();
        for i in 0..AUX_CHANNELS.len() {
            x = nn::conv3x3(&x, params.get(&format!("aux.conv{i}.w")), params.get(&format!("aux.conv{i}.b")));
            x = nn::avg_pool2(&x.relu());
        }
        nn::linear(&nn::global_avg_pool(&x), params.get("aux.proj.w"), Some(params.get("aux.proj.b")))
    }

    /// `V = W_I z_i + W_A z_a` as `[B, m, D]`.
    pub fn fuse(&self, params: &Bound, z_i: &Tensor, z_a: &Tensor) -> Tensor {
        let b = z_i.shape()[0];
        let v_i = nn::linear(z_i, params.get("txt.proj_i.w"), None);
        let v_a = nn::linear(z_a, params.get("txt.proj_a.w"), None);
        v_i.add(&v_a).reshape(&[b, self.prefix_tokens, self.embed_dim])
    }

    /// Full grounding path: pools the classifier features for `z_i`, masks
    /// the images with the `[B, H, W]` saliency maps and encodes them for `z_a`.
    pub fn prefix_from(&self, params: &Bound, features: &Tensor, images: &Tensor, maps: &Tensor, routes: TextRoutes) -> Tensor {
        let features = if routes.features { features.clone() } else { features.detach() };
        let maps = if routes.saliency { maps.clone() } else { maps.detach() };
        let z_i = nn::global_avg_pool(&features);
        let z_a = self.aux_features(params, &mask_images(images, &maps));
        self.fuse(params, &z_i, &z_a)
    }

    /// Decoder logits `[B, T, V]` for the token inputs after the prefix.
    /// `inputs` must all have length `T`.
    pub fn token_logits(&self, params: &Bound, prefix: &Tensor, inputs: &[Vec<usize>]) -> Tensor {
        let (b, m, d) = (prefix.shape()[0], self.prefix_tokens, self.embed_dim);
        let t = inputs[0].len();
        let s = m + t;
        let flat: Vec<usize> = inputs.iter().flatten().copied().collect();
        let tok = params.get("txt.tok_emb").gather_rows(&flat).reshape(&[b, t, d]);
        let pos = params.get("txt.pos_emb").narrow(0, 0, s).reshape(&[1, s, d]);
        let mut x = Tensor::concat(&[prefix.clone(), tok], 1).add(&pos).reshape(&[b * s, d]);
        let mask = causal_mask(s);
        for l in 0..self.num_layers {
            let p = format!("txt.layer{l}");
            let g = |n: &str| params.get(&format!("{p}.{n}"));
            let h = nn::layer_norm(&x, g("ln1.g"), g("ln1.b"));
            x = x.add(&self.attention(&h, b, s, &mask, g("attn.qkv.w"), g("attn.qkv.b"), g("attn.out.w"), g("attn.out.b")));
            let h = nn::layer_norm(&x, g("ln2.g"), g("ln2.b"));
            let h = nn::linear(&h, g("mlp.fc1.w"), Some(g("mlp.fc1.b"))).relu();
            x = x.add(&nn::linear(&h, g("mlp.fc2.w"), Some(g("mlp.fc2.b"))));
        }
        let x = nn::layer_norm(&x, params.get("txt.ln_f.g"), params.get("txt.ln_f.b"));
        let logits = nn::linear(&x, params.get("txt.head.w"), Some(params.get("txt.head.b")));
        logits.reshape(&[b, s, self.vocab_size]).narrow(1, m, t)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(&self, x: &Tensor, b: usize, s: usize, mask: &Tensor, wqkv: &Tensor, bqkv: &Tensor, wo: &Tensor, bo: &Tensor) -> Tensor {
        let (d, nh) = (self.embed_dim, self.num_heads);
        let dh = d / nh;
        // [B*S, 3D] -> [3, B, H, S, dh]
        let qkv = nn::linear(x, wqkv, Some(bqkv)).reshape(&[b, s, 3, nh, dh]).permute(&[2, 0, 3, 1, 4]);
        let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[b * nh, s, dh]);
        let (q, k, v) = (part(0), part(1), part(2));
        let scores = q.matmul_t(&k, false, true).scale(1.0 / (dh as f64).sqrt()).add(mask);
        let ctx = scores.softmax().matmul(&v); // [B*H, S, dh]
        let merged = ctx.reshape(&[b, nh, s, dh]).permute(&[0, 2, 1, 3]).reshape(&[b * s, d]);
        nn::linear(&merged, wo, Some(bo))
    }

    /// Checks a target sequence against the vocabulary and length limits.
    pub fn check_target(&self, target: &[usize]) -> Result<()> {
        if target.len() > self.max_text_len {
            return Err(MeglError::LengthExceeded { len: target.len(), max: self.max_text_len });
        }
        if let Some(&t) = target.iter().find(|&&t| t >= self.vocab_size) {
            return Err(MeglError::TokenOutOfVocab { token: t, vocab: self.vocab_size });
        }
        if target.len() < 2 || target[0] != BOS || target[target.len() - 1] != EOS {
            return Err(MeglError::Domain("target must start with BOS and end with EOS".into()));
        }
        Ok(())
    }

    /// Teacher-forced negative log-likelihood per sample, `[B]`. Every token
    /// after BOS is scored; padding is not.
    pub fn textual_losses(&self, params: &Bound, prefix: &Tensor, targets: &[Vec<usize>], reduction: TextReduction) -> Result<Tensor> {
        for t in targets {
            self.check_target(t)?;
        }
        let b = targets.len();
        let t = targets.iter().map(|x| x.len() - 1).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(b);
        let mut gold = Vec::with_capacity(b * t);
        let mut weight = Vec::with_capacity(b * t);
        for seq in targets {
            let n = seq.len() - 1;
            let scale = match reduction {
                TextReduction::Mean => 1.0 / n as f64,
                TextReduction::Sum => 1.0,
            };
            let mut inp = seq[..n].to_vec();
            inp.resize(t, PAD);
            inputs.push(inp);
            for j in 0..t {
                let (g, w) = if j < n && seq[j + 1] != PAD { (seq[j + 1], scale) } else { (PAD, 0.0) };
                gold.push(g);
                weight.push(w);
            }
        }
        let logp = self.token_logits(params, prefix, &inputs).reshape(&[b * t, self.vocab_size]).log_softmax();
        let nll = logp.pick(&gold).neg().mul(&Tensor::new(weight, &[b * t]));
        Ok(nll.reshape(&[b, t]).sum_axis(1).reshape(&[b]))
    }

    /// Greedy decoding from BOS until EOS or `max_len` tokens in total.
    pub fn generate_tensor(&self, params: &Bound, prefix: &Tensor, max_len: usize) -> Vec<usize> {
        let max_len = max_len.min(self.max_text_len);
        let mut seq = vec![BOS];
        no_grad(|| {
            while seq.len() < max_len {
                let logits = self.token_logits(params, prefix, std::slice::from_ref(&seq));
                let last = &logits.data()[(seq.len() - 1) * self.vocab_size..];
                let next = argmax(last);
                seq.push(next);
                if next == EOS {
                    break;
                }
            }
        });
        seq
    }

    pub fn encode_aux(&self, store: &ParamStore, masked: &ImageTensor) -> Result<Vec<f64>> {
        let (c, s) = (self.in_channels, self.image_size);
        if masked.channels() != c || masked.height() != s || masked.width() != s {
            return Err(MeglError::ShapeMismatch(format!(
                "auxiliary encoder expects {c}x{s}x{s}, got {}x{}x{}",
                masked.channels(),
                masked.height(),
                masked.width()
            )));
        }
        Ok(no_grad(|| {
            let x = Tensor::new(masked.data().to_vec(), &[1, c, s, s]);
            self.aux_features(&store.bind_frozen(), &x).to_vec()
        }))
    }

    pub fn project_and_fuse(&self, store: &ParamStore, z_i: &[f64], z_a: &[f64]) -> Result<TokenEmbeddingSequence> {
        if z_i.len() != self.feature_dim || z_a.len() != self.aux_dim {
            return Err(MeglError::ShapeMismatch(format!(
                "expected z_i of {} and z_a of {}, got {} and {}",
                self.feature_dim,
                self.aux_dim,
                z_i.len(),
                z_a.len()
            )));
        }
        let v = no_grad(|| {
            let p = store.bind_frozen();
            self.fuse(&p, &Tensor::new(z_i.to_vec(), &[1, z_i.len()]), &Tensor::new(z_a.to_vec(), &[1, z_a.len()]))
        });
        Ok(TokenEmbeddingSequence { vectors: v.to_vec(), len: self.prefix_tokens, embed_dim: self.embed_dim })
    }

    pub fn textual_loss(&self, store: &ParamStore, prefix: &TokenEmbeddingSequence, target: &[usize], reduction: TextReduction) -> Result<f64> {
        let p = store.bind_frozen();
        no_grad(|| Ok(self.textual_losses(&p, &prefix.tensor(), &[target.to_vec()], reduction)?.item()))
    }

    pub fn generate(&self, store: &ParamStore, prefix: &TokenEmbeddingSequence, max_len: usize) -> Vec<usize> {
        self.generate_tensor(&store.bind_frozen(), &prefix.tensor(), max_len)
    }
}

/// Additive mask `[S, S]`: zero on and below the diagonal, very negative above.
fn causal_mask(s: usize) -> Tensor {
    let mut m = vec![0.0; s * s];
    for i in 0..s {
        for j in i + 1..s {
            m[i * s + j] = -1e9;
        }
    }
    Tensor::new(m, &[s, s])
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::seed_everything;
    use megl_autodiff::{backward, finite_difference, max_relative_error};

    fn tiny(vocab: usize, d: usize, m: usize) -> (Grounder, ParamStore) {
        let g = Grounder {
            in_channels: 3,
            image_size: 8,
            feature_dim: 4,
            aux_dim: 3,
            embed_dim: d,
            num_heads: 2,
            num_layers: 1,
            prefix_tokens: m,
            max_text_len: 6,
            vocab_size: vocab,
        };
        let mut s = ParamStore::new();
        g.register(&mut s, &seed_everything(3));
        (g, s)
    }

    fn set(s: &mut ParamStore, name: &str, f: impl Fn(usize) -> f64) {
        let p = s.get_mut(name).unwrap();
        for (i, v) in p.value.iter_mut().enumerate() {
            *v = f(i);
        }
    }

    fn prefix_zero(g: &Grounder) -> TokenEmbeddingSequence {
        TokenEmbeddingSequence { vectors: vec![0.0; g.prefix_tokens * g.embed_dim], len: g.prefix_tokens, embed_dim: g.embed_dim }
    }

    #[test]
    fn tokenizer_and_vocab() {
        assert_eq!(tokenize("It's a Red, circle!"), vec!["its", "a", "red", "circle"]);
        let v = Vocabulary::build(&["b a a", "c a b"], 100);
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.token(5), Some("b"));
        assert_eq!(v.token(6), Some("c"));
        assert_eq!(v.encode("a z"), vec![BOS, 4, UNK, EOS]);
        assert_eq!(v.decode(&[BOS, 4, 6, EOS, 5]), "a c");
        let capped = Vocabulary::build(&["b a a", "c a b"], 5);
        assert_eq!(capped.len(), 5);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\na\n").is_err());
    }

    #[test]
    fn fuse_examples() {
        let (mut g, mut s) = tiny(8, 2, 1);
        g.feature_dim = 2;
        s.insert("txt.proj_i.w", &[2, 2], vec![1.0, 0.0, 0.0, 1.0], true);
        set(&mut s, "txt.proj_a.w", |_| 0.0);
        let v = g.project_and_fuse(&s, &[1.0, 2.0], &[0.3, -1.0, 4.0]).unwrap();
        assert_eq!(v.vectors, vec![1.0, 2.0]);
        set(&mut s, "txt.proj_i.w", |_| 0.0);
        let v = g.project_and_fuse(&s, &[1.0, 2.0], &[0.3, -1.0, 4.0]).unwrap();
        assert_eq!(v.vectors, vec![0.0, 0.0]);
        assert!(matches!(g.project_and_fuse(&s, &[1.0], &[0.0; 3]), Err(MeglError::ShapeMismatch(_))));
    }

    #[test]
    fn aux_encoder_is_deterministic_with_bias_response() {
        let (g, s) = tiny(8, 4, 2);
        let zero = ImageTensor::zeros(3, 8, 8);
        let a = g.encode_aux(&s, &zero).unwrap();
        assert_eq!(a, g.encode_aux(&s, &zero).unwrap());
        assert!(a.iter().any(|v| *v != 0.0));
        let (_, s2) = tiny(8, 4, 2);
        assert_eq!(a, g.encode_aux(&s2, &zero).unwrap());
        assert!(s.iter().filter(|(k, _)| k.starts_with("aux.")).all(|(_, p)| !p.trainable));
        assert!(matches!(g.encode_aux(&s, &ImageTensor::zeros(3, 4, 4)), Err(MeglError::ShapeMismatch(_))));
    }

    #[test]
    fn uniform_decoder_gives_ln_vocab() {
        let (g, mut s) = tiny(10, 4, 2);
        set(&mut s, "txt.head.w", |_| 0.0);
        let l = g.textual_loss(&s, &prefix_zero(&g), &[BOS, 5, 7, EOS], TextReduction::Mean).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let l = g.textual_loss(&s, &prefix_zero(&g), &[BOS, 5, 7, EOS], TextReduction::Sum).unwrap();
        assert!((l - 3.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_decoder_gives_zero_loss_and_stops() {
        let (g, mut s) = tiny(10, 4, 2);
        set(&mut s, "txt.head.w", |_| 0.0);
        set(&mut s, "txt.head.b", |i| if i == EOS { 100.0 } else { 0.0 });
        let l = g.textual_loss(&s, &prefix_zero(&g), &[BOS, EOS], TextReduction::Mean).unwrap();
        assert!(l >= 0.0 && l < 1e-6);
        assert_eq!(g.generate(&s, &prefix_zero(&g), 6), vec![BOS, EOS]);
    }

    #[test]
    fn loss_matches_probability_chain() {
        let (g, s) = tiny(10, 4, 2);
        let prefix = TokenEmbeddingSequence {
            vectors: (0..8).map(|i| (i as f64 * 0.7).sin()).collect(),
            len: 2,
            embed_dim: 4,
        };
        let target = [BOS, 6, 4, EOS];
        let got = g.textual_loss(&s, &prefix, &target, TextReduction::Sum).unwrap();
        // Product of step probabilities, each step re-run from scratch.
        let p = s.bind_frozen();
        let mut prod = 1.0;
        for i in 1..target.len() {
            let logits = no_grad(|| g.token_logits(&p, &prefix.tensor(), &[target[..i].to_vec()]));
            let last = &logits.data()[(i - 1) * 10..i * 10];
            let mx = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = last.iter().map(|v| (v - mx).exp()).sum();
            prod *= (last[target[i]] - mx).exp() / z;
        }
        assert!((got + prod.ln()).abs() < 1e-6);
    }

    #[test]
    fn target_errors() {
        let (g, s) = tiny(10, 4, 2);
        let p = prefix_zero(&g);
        assert!(matches!(
            g.textual_loss(&s, &p, &[BOS, 12, EOS], TextReduction::Mean),
            Err(MeglError::TokenOutOfVocab { token: 12, vocab: 10 })
        ));
        assert!(matches!(
            g.textual_loss(&s, &p, &[BOS, 4, 4, 4, 4, 4, EOS], TextReduction::Mean),
            Err(MeglError::LengthExceeded { len: 7, max: 6 })
        ));
    }

    #[test]
    fn padding_does_not_change_per_sample_loss() {
        let (g, s) = tiny(10, 4, 2);
        let p = s.bind_frozen();
        let prefix = Tensor::new((0..16).map(|i| (i as f64).cos() * 0.3).collect(), &[2, 2, 4]);
        let short = vec![BOS, 5, EOS];
        let long = vec![BOS, 7, 8, 9, EOS];
        let both = no_grad(|| g.textual_losses(&p, &prefix, &[short.clone(), long], TextReduction::Mean).unwrap());
        let alone = no_grad(|| g.textual_losses(&p, &prefix.narrow(0, 0, 1), &[short], TextReduction::Mean).unwrap());
        assert!((both.data()[0] - alone.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let (g, s) = tiny(10, 4, 2);
        let prefix = TokenEmbeddingSequence { vectors: vec![0.5; 8], len: 2, embed_dim: 4 };
        let a = g.generate(&s, &prefix, 6);
        assert_eq!(a, g.generate(&s, &prefix, 6));
        assert!(a.len() <= 6 && a[0] == BOS);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let (g, s) = tiny(10, 4, 2);
        let target = vec![BOS, 6, 4, EOS];
        let pre: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = s.bind_frozen();
        let loss = |x: &[f64]| {
            no_grad(|| {
                g.textual_losses(&p, &Tensor::new(x.to_vec(), &[1, 2, 4]), &[target.clone()], TextReduction::Mean)
                    .unwrap()
                    .item()
            })
        };
        let t = Tensor::param(pre.clone(), &[1, 2, 4]);
        let l = g.textual_losses(&p, &t, &[target.clone()], TextReduction::Mean).unwrap().sum();
        let gr = backward(&l, &[t])[0].clone().unwrap();
        let fd = finite_difference(&pre, 1e-6, loss);
        assert!(max_relative_error(gr.data(), &fd, 1e-8) < 1e-4);
    }
}
