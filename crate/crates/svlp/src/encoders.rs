//! Miniature dual encoder: a patch-transformer image encoder that accepts
//! prepended visual prompt tokens, and a token-transformer text encoder that
//! accepts composed prompt sequences. Both project into a shared output space.
//!
//! The encoders are pure functions of (weights, inputs). All weights live in
//! the flat parameter store; a `Binding` decides, per forward pass, which
//! entries enter the tape as trainable leaves and which as constants.
//!
//! Conventions fixed here:
//! * positional embeddings are indexed by slot position after concatenation,
//!   so prompt slots own their learned positional rows;
//! * the text feature is read at the [eos] position (the last slot);
//! * attention is bidirectional in both encoders;
//! * init is Normal(0, 0.02) everywhere except layer-norm gains (1) and
//!   biases (0), drawn from per-tensor seed streams.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numcore::store::ParameterStore;
use crate::numcore::tape::{BufId, Tape};
use crate::numcore::tensor::{Real, Tensor};
use crate::rng::{derive_seed, SplitMix64};

/// Images are grayscale throughout.
pub const IMG_CHANNELS: usize = 1;

/// Class index convention: 0 = spoof, 1 = real, everywhere.
pub const CLASS_NAMES: [&str; 2] = ["spoof", "real"];
pub const N_CLS: usize = 2;

/// Store entry holding the frozen class-name embeddings.
pub const ECLS_ENTRY: &str = "ecls";
/// Store entry holding the learnable log-temperature.
pub const LOGIT_SCALE_ENTRY: &str = "logit_scale";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Token width.
    pub c: usize,
    /// Shared embedding width.
    pub c_out: usize,
    /// Transformer blocks per encoder.
    pub depth: usize,
    /// Attention heads.
    pub heads: usize,
    /// Patch side length.
    pub patch: usize,
    /// Input image side length.
    pub image_side: usize,
    /// Fixed token table size.
    pub vocab: usize,
    /// Maximum sequence length (shared by both positional tables).
    pub max_seq: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            c: 64,
            c_out: 64,
            depth: 2,
            heads: 4,
            patch: 8,
            image_side: 32,
            vocab: TokenTable::VOCAB,
            max_seq: 35,
        }
    }
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * IMG_CHANNELS
    }

    /// Validate against the prompt lengths this run will use.
    pub fn validate(&self, visual_prompt_len: usize, ctx_len: usize) -> Result<()> {
        if self.c == 0 || self.heads == 0 || self.c % self.heads != 0 {
            return Err(Error::Config(format!(
                "token width {} must be a positive multiple of heads {}",
                self.c, self.heads
            )));
        }
        if self.patch == 0 || self.image_side % self.patch != 0 {
            return Err(Error::Config(format!(
                "image side {} must be divisible by patch {}",
                self.image_side, self.patch
            )));
        }
        if self.vocab != TokenTable::VOCAB {
            return Err(Error::Config(format!(
                "vocab {} does not match the fixed token table size {}",
                self.vocab,
                TokenTable::VOCAB
            )));
        }
        let img_need = 1 + visual_prompt_len + self.num_patches();
        let txt_need = 2 * ctx_len + 3;
        if self.max_seq < img_need || self.max_seq < txt_need {
            return Err(Error::Config(format!(
                "max_seq {} too small: image sequences need {img_need}, text sequences need {txt_need}",
                self.max_seq
            )));
        }
        Ok(())
    }
}

/// Fixed word-level token table covering the template sentence and the class
/// names. Punctuation is stripped; tokenization is whitespace-based.
#[derive(Debug, Clone)]
pub struct TokenTable {
    ids: BTreeMap<String, usize>,
}

impl Default for TokenTable {
    fn default() -> Self {
        Self::new()
    }
}

impl TokenTable {
    pub const VOCAB: usize = 10;
    pub const SOS: usize = 0;
    pub const EOS: usize = 1;

    const WORDS: [&'static str; 10] = [
        "[sos]", "[eos]", "this", "is", "a", "photo", "of", "real", "spoof", "face",
    ];

    pub fn new() -> Self {
        let mut ids = BTreeMap::new();
        for (i, w) in Self::WORDS.iter().enumerate() {
            ids.insert((*w).to_string(), i);
        }
        TokenTable { ids }
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    /// Token ids for the template sentence with the class name substituted:
    /// `[sos] this is a photo of {class} face [eos]`.
    pub fn tokenize_fixed(&self, class_name: &str) -> Result<Vec<usize>> {
        if !CLASS_NAMES.contains(&class_name) {
            return Err(Error::UnknownClass(class_name.to_string()));
        }
        let mut out = vec![Self::SOS];
        for word in ["this", "is", "a", "photo", "of", class_name, "face"] {
            out.push(self.id(word)?);
        }
        out.push(Self::EOS);
        Ok(out)
    }

    /// Sidecar text block persisted inside checkpoints: `word<TAB>id` lines.
    pub fn to_sidecar_text(&self) -> String {
        let mut lines: Vec<String> = Self::WORDS
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{w}\t{i}"))
            .collect();
        lines.push(String::new());
        lines.join("\n")
    }
}

/// Per-forward-pass map from store entry names to tape buffers. Names in the
/// trainable set enter as parameter leaves (they receive gradients); all
/// other entries enter as constants, so frozen parameters never join the tape
/// as differentiable leaves.
pub struct Binding<'a, T: Real> {
    store: &'a ParameterStore<T>,
    trainable: BTreeSet<String>,
    ids: BTreeMap<String, BufId>,
}

impl<'a, T: Real> Binding<'a, T> {
    pub fn new(store: &'a ParameterStore<T>, trainable: BTreeSet<String>) -> Self {
        Binding {
            store,
            trainable,
            ids: BTreeMap::new(),
        }
    }

    /// Bind every entry as a constant (inference).
    pub fn frozen(store: &'a ParameterStore<T>) -> Self {
        Binding::new(store, BTreeSet::new())
    }

    pub fn store(&self) -> &ParameterStore<T> {
        self.store
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn buf(&mut self, tape: &mut Tape<T>, name: &str) -> Result<BufId> {
        if let Some(id) = self.ids.get(name) {
            return Ok(*id);
        }
        let id = if self.trainable.contains(name) {
            tape.param(self.store, name)?
        } else {
            tape.constant(self.store.get(name)?.clone())
        };
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }
}

/// The dual encoder: stateless driver over store-resident weights.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub cfg: EncoderConfig,
    pub tokens: TokenTable,
}

impl DualEncoder {
    /// Register all backbone weights (penalizable) plus the frozen class
    /// embeddings and the learnable temperature (both non-penalizable).
    pub fn init<T: Real>(
        store: &mut ParameterStore<T>,
        cfg: EncoderConfig,
        seed: u64,
    ) -> Result<Self> {
        let tokens = TokenTable::new();
        let normal = |name: &str, shape: Vec<usize>, std: f64| -> Tensor<T> {
            let mut rng = SplitMix64::new(derive_seed(seed, name));
            let numel: usize = shape.iter().product();
            let data: Vec<T> = (0..numel)
                .map(|_| T::from_f64(rng.normal() * std))
                .collect();
            Tensor::new(shape, data).expect("finite init")
        };
        let ones = |shape: Vec<usize>| {
            let numel: usize = shape.iter().product();
            Tensor::new(shape, vec![T::one(); numel]).expect("finite init")
        };
        let zeros = |shape: Vec<usize>| Tensor::<T>::zeros(shape);

        let c = cfg.c;
        let hidden = 4 * c;
        let mut reg = |name: String, t: Tensor<T>| store.register(&name, t, true);

        reg("img.cls".into(), normal("img.cls", vec![1, c], 0.02))?;
        reg(
            "img.patch.w".into(),
            normal("img.patch.w", vec![cfg.patch_dim(), c], 0.02),
        )?;
        reg("img.patch.b".into(), zeros(vec![c]))?;
        reg(
            "img.pos".into(),
            normal("img.pos", vec![cfg.max_seq, c], 0.02),
        )?;
        for enc in ["img", "txt"] {
            if enc == "txt" {
                reg(
                    "txt.tok".into(),
                    normal("txt.tok", vec![cfg.vocab, c], 0.02),
                )?;
                reg(
                    "txt.pos".into(),
                    normal("txt.pos", vec![cfg.max_seq, c], 0.02),
                )?;
            }
            for blk in 0..cfg.depth {
                let p = format!("{enc}.blk{blk}");
                reg(format!("{p}.ln1.g"), ones(vec![c]))?;
                reg(format!("{p}.ln1.b"), zeros(vec![c]))?;
                for w in ["wq", "wk", "wv", "wo"] {
                    reg(
                        format!("{p}.attn.{w}"),
                        normal(&format!("{p}.attn.{w}"), vec![c, c], 0.02),
                    )?;
                    reg(format!("{p}.attn.b{}", &w[1..]), zeros(vec![c]))?;
                }
                reg(format!("{p}.ln2.g"), ones(vec![c]))?;
                reg(format!("{p}.ln2.b"), zeros(vec![c]))?;
                reg(
                    format!("{p}.mlp.w1"),
                    normal(&format!("{p}.mlp.w1"), vec![c, hidden], 0.02),
                )?;
                reg(format!("{p}.mlp.b1"), zeros(vec![hidden]))?;
                reg(
                    format!("{p}.mlp.w2"),
                    normal(&format!("{p}.mlp.w2"), vec![hidden, c], 0.02),
                )?;
                reg(format!("{p}.mlp.b2"), zeros(vec![c]))?;
            }
            reg(format!("{enc}.ln_out.g"), ones(vec![c]))?;
            reg(format!("{enc}.ln_out.b"), zeros(vec![c]))?;
            reg(
                format!("{enc}.proj"),
                normal(&format!("{enc}.proj"), vec![c, cfg.c_out], 0.02),
            )?;
        }

        // Frozen class-name embeddings: copies of the class-word rows of the
        // token table at init time, rescaled to unit norm so the two class
        // anchors are well separated from the start, never updated afterwards.
        let tok = store.get("txt.tok")?.clone();
        let mut ecls = Vec::with_capacity(N_CLS * c);
        for class in CLASS_NAMES {
            let row = tokens.id(class)?;
            let slice = &tok.data()[row * c..(row + 1) * c];
            let norm = slice
                .iter()
                .fold(T::zero(), |acc, v| acc + *v * *v)
                .sqrt();
            ecls.extend(slice.iter().map(|v| *v / norm));
        }
        store.register(ECLS_ENTRY, Tensor::new(vec![N_CLS, c], ecls)?, false)?;
        store.register(
            LOGIT_SCALE_ENTRY,
            Tensor::new(vec![1], vec![T::from_f64(10.0f64.ln())])?,
            false,
        )?;

        Ok(DualEncoder { cfg, tokens })
    }

    /// Attach to an already-populated store (after checkpoint load).
    pub fn attach<T: Real>(store: &ParameterStore<T>, cfg: EncoderConfig) -> Result<Self> {
        for required in ["img.cls", "txt.tok", "img.proj", "txt.proj", ECLS_ENTRY] {
            if !store.contains(required) {
                return Err(Error::Checkpoint(format!(
                    "store is missing encoder entry `{required}`"
                )));
            }
        }
        Ok(DualEncoder {
            cfg,
            tokens: TokenTable::new(),
        })
    }

    /// Cut a raster image into per-patch rows (row-major patches, row-major
    /// pixels within a patch).
    pub fn patchify<T: Real>(&self, pixels: &[f32]) -> Result<Tensor<T>> {
        let side = self.cfg.image_side;
        let patch = self.cfg.patch;
        if pixels.len() != IMG_CHANNELS * side * side {
            return Err(Error::Shape {
                op: "patchify",
                detail: format!(
                    "expected {} pixels for a {side}x{side} image, got {}",
                    IMG_CHANNELS * side * side,
                    pixels.len()
                ),
            });
        }
        let per_side = side / patch;
        let mut data = Vec::with_capacity(pixels.len());
        for py in 0..per_side {
            for px in 0..per_side {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let y = py * patch + dy;
                        let x = px * patch + dx;
                        data.push(T::from_f64(pixels[y * side + x] as f64));
                    }
                }
            }
        }
        Tensor::new(vec![per_side * per_side, patch * patch], data)
    }

    fn block<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &mut Binding<T>,
        prefix: &str,
        x: BufId,
    ) -> Result<BufId> {
        let c = self.cfg.c;
        let heads = self.cfg.heads;
        let dk = c / heads;

        let ln1 = self.affine_ln(tape, binding, &format!("{prefix}.ln1"), x)?;
        let q = self.linear(tape, binding, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"), ln1)?;
        let k = self.linear(tape, binding, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"), ln1)?;
        let v = self.linear(tape, binding, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"), ln1)?;

        let mut head_outs = Vec::with_capacity(heads);
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let attn = tape.softmax(scores)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&head_outs)?;
        let o = self.linear(tape, binding, &format!("{prefix}.attn.wo"), &format!("{prefix}.attn.bo"), ctx)?;
        let x = tape.add(x, o)?;

        let ln2 = self.affine_ln(tape, binding, &format!("{prefix}.ln2"), x)?;
        let h1 = self.linear(tape, binding, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"), ln2)?;
        let h1 = tape.gelu(h1)?;
        let h2 = self.linear(tape, binding, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"), h1)?;
        tape.add(x, h2)
    }

    fn affine_ln<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &mut Binding<T>,
        prefix: &str,
        x: BufId,
    ) -> Result<BufId> {
        let normed = tape.layer_norm(x)?;
        let g = binding.buf(tape, &format!("{prefix}.g"))?;
        let b = binding.buf(tape, &format!("{prefix}.b"))?;
        let scaled = tape.mul(normed, g)?;
        tape.add(scaled, b)
    }

    fn linear<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &mut Binding<T>,
        w_name: &str,
        b_name: &str,
        x: BufId,
    ) -> Result<BufId> {
        let w = binding.buf(tape, w_name)?;
        let b = binding.buf(tape, b_name)?;
        let h = tape.matmul(x, w)?;
        tape.add(h, b)
    }

    fn run_encoder<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &mut Binding<T>,
        enc: &str,
        seq: BufId,
        read_row: usize,
    ) -> Result<BufId> {
        let n = tape.value(seq).rows();
        let pos_table = binding.buf(tape, &format!("{enc}.pos"))?;
        let slots: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(pos_table, &slots)?;
        let mut x = tape.add(seq, pos)?;
        for blk in 0..self.cfg.depth {
            x = self.block(tape, binding, &format!("{enc}.blk{blk}"), x)?;
        }
        let x = self.affine_ln(tape, binding, &format!("{enc}.ln_out"), x)?;
        let picked = tape.select_row(x, read_row)?;
        let proj = binding.buf(tape, &format!("{enc}.proj"))?;
        tape.matmul(picked, proj)
    }

    /// Image pathway. The input sequence is [CLS] tokens, then the visual
    /// prompt rows when present, then the patch embeddings. Output is the
    /// projected [CLS] slot, not yet normalized.
    pub fn encode_image<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &mut Binding<T>,
        pixels: &[f32],
        visual_prompt: Option<BufId>,
    ) -> Result<BufId> {
        if let Some(p) = visual_prompt {
            let v = tape.value(p);
            if v.cols() != self.cfg.c {
                return Err(Error::Shape {
                    op: "encode_image",
                    detail: format!("visual prompt width {} != token width {}", v.cols(), self.cfg.c),
                });
            }
        }
        let patches = self.patchify::<T>(pixels)?;
        let patches = tape.constant(patches);
        let emb = self.linear(tape, binding, "img.patch.w", "img.patch.b", patches)?;
        let cls = binding.buf(tape, "img.cls")?;
        let seq = match visual_prompt {
            Some(p) => tape.concat_rows(&[cls, p, emb])?,
            None => tape.concat_rows(&[cls, emb])?,
        };
        let n = tape.value(seq).rows();
        if n > self.cfg.max_seq {
            return Err(Error::Shape {
                op: "encode_image",
                detail: format!("sequence length {n} exceeds max_seq {}", self.cfg.max_seq),
            });
        }
        self.run_encoder(tape, binding, "img", seq, 0)
    }

    /// Text pathway over a pre-composed sequence of row blocks. The parts must
    /// start with the [sos] embedding and end with the [eos] embedding; the
    /// output is read at the [eos] slot and projected.
    pub fn encode_text<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &mut Binding<T>,
        parts: &[BufId],
    ) -> Result<BufId> {
        let seq = tape.concat_rows(parts)?;
        let n = tape.value(seq).rows();
        if n > self.cfg.max_seq {
            return Err(Error::Shape {
                op: "encode_text",
                detail: format!("sequence length {n} exceeds max_seq {}", self.cfg.max_seq),
            });
        }
        self.run_encoder(tape, binding, "txt", seq, n - 1)
    }

    /// Embedding rows for a token id sequence.
    pub fn token_rows<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binding: &mut Binding<T>,
        ids: &[usize],
    ) -> Result<BufId> {
        let table = binding.buf(tape, "txt.tok")?;
        tape.gather_rows(table, ids)
    }
}
