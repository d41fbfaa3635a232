//! Multi-aspect prompting: the prompt bank, the four text prompt families,
//! per-family cosine logits, learned softmax aggregation, and the prompting
//! loss.
//!
//! Family order is fixed as (domain-agnostic, domain-specific, mixed, fixed)
//! everywhere, including the stored aggregation logits. Per-domain entries
//! freeze once their domain finishes training; the domain-agnostic context
//! and the temperature keep training across domains.

use std::collections::BTreeSet;

use crate::encoders::{Binding, DualEncoder, TokenTable, ECLS_ENTRY, LOGIT_SCALE_ENTRY, N_CLS};
use crate::error::{Error, Result};
use crate::numcore::store::ParameterStore;
use crate::numcore::tape::{BufId, Tape};
use crate::numcore::tensor::{Real, Tensor};
use crate::rng::{derive_seed, SplitMix64};

/// Store entry holding the shared domain-agnostic context.
pub const DA_ENTRY: &str = "prompt.da";

/// Text prompt families, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    DomainAgnostic,
    DomainSpecific,
    Mixed,
    Fixed,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::DomainAgnostic,
        Family::DomainSpecific,
        Family::Mixed,
        Family::Fixed,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Family::DomainAgnostic => "da",
            Family::DomainSpecific => "ds",
            Family::Mixed => "mix",
            Family::Fixed => "fixed",
        }
    }
}

/// Ablation switches over the prompting head. Each flag removes exactly one
/// family (or the visual prompt) while leaving the rest intact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FamilyFlags {
    pub no_da: bool,
    pub no_ds: bool,
    pub no_mix: bool,
    pub no_fixed: bool,
    pub no_visual: bool,
}

impl FamilyFlags {
    pub fn active_families(&self) -> Vec<Family> {
        Family::ALL
            .into_iter()
            .filter(|f| match f {
                Family::DomainAgnostic => !self.no_da,
                Family::DomainSpecific => !self.no_ds,
                Family::Mixed => !self.no_mix,
                Family::Fixed => !self.no_fixed,
            })
            .collect()
    }

    pub fn uses_visual_prompt(&self) -> bool {
        !self.no_visual
    }

    pub fn uses_agnostic_ctx(&self) -> bool {
        !self.no_da || !self.no_mix
    }

    pub fn uses_specific_ctx(&self) -> bool {
        !self.no_ds || !self.no_mix
    }
}

/// Bookkeeping over the prompt entries of the parameter store. Domain ids are
/// 1-based in entry names (`prompt.visual.1`, ...).
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub visual_len: usize,
    pub ctx_len: usize,
    /// Number of registered domains.
    pub domains: usize,
    pub flags: FamilyFlags,
}

impl PromptBank {
    pub fn new(visual_len: usize, ctx_len: usize, flags: FamilyFlags) -> Self {
        PromptBank {
            visual_len,
            ctx_len,
            domains: 0,
            flags,
        }
    }

    pub fn visual_name(t: usize) -> String {
        format!("prompt.visual.{t}")
    }

    pub fn ds_name(t: usize) -> String {
        format!("prompt.ds.{t}")
    }

    pub fn alpha_name(t: usize) -> String {
        format!("alpha.{t}")
    }

    /// Recover bank bookkeeping from a populated store.
    pub fn detect<T: Real>(
        store: &ParameterStore<T>,
        visual_len: usize,
        ctx_len: usize,
        flags: FamilyFlags,
    ) -> Self {
        let mut domains = 0;
        while store.contains(&Self::visual_name(domains + 1))
            || store.contains(&Self::ds_name(domains + 1))
            || store.contains(&Self::alpha_name(domains + 1))
        {
            domains += 1;
        }
        PromptBank {
            visual_len,
            ctx_len,
            domains,
            flags,
        }
    }

    /// Register entries for the next domain. The aggregation logits start at
    /// zero (uniform weights). Prompts warm-start from the previous domain's
    /// frozen values when requested, otherwise draw a fresh Normal(0, 0.02).
    pub fn register_domain<T: Real>(
        &mut self,
        store: &mut ParameterStore<T>,
        c: usize,
        seed: u64,
        warm_start: bool,
    ) -> Result<usize> {
        let t = self.domains + 1;
        let fresh = |name: &str, rows: usize| -> Tensor<T> {
            let mut rng = SplitMix64::new(derive_seed(seed, name));
            let data: Vec<T> = (0..rows * c)
                .map(|_| T::from_f64(rng.normal() * 0.02))
                .collect();
            Tensor::new(vec![rows, c], data).expect("finite init")
        };
        if t == 1 && self.flags.uses_agnostic_ctx() {
            store.register(DA_ENTRY, fresh(DA_ENTRY, self.ctx_len), false)?;
        }
        if self.flags.uses_visual_prompt() {
            let name = Self::visual_name(t);
            let init = if warm_start && t > 1 {
                store.get(&Self::visual_name(t - 1))?.clone()
            } else {
                fresh(&name, self.visual_len)
            };
            store.register(&name, init, false)?;
        }
        if self.flags.uses_specific_ctx() {
            let name = Self::ds_name(t);
            let init = if warm_start && t > 1 {
                store.get(&Self::ds_name(t - 1))?.clone()
            } else {
                fresh(&name, self.ctx_len)
            };
            store.register(&name, init, false)?;
        }
        let n_families = self.flags.active_families().len();
        store.register(
            &Self::alpha_name(t),
            Tensor::zeros(vec![1, n_families]),
            false,
        )?;
        self.domains = t;
        Ok(t)
    }

    /// Prompt-side entries that train while domain `t` is active: the shared
    /// context, the domain-t entries, and the temperature. Entries of earlier
    /// domains stay off this list and therefore never enter the tape.
    pub fn trainable_names(&self, t: usize) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        if self.flags.uses_agnostic_ctx() {
            names.insert(DA_ENTRY.to_string());
        }
        if self.flags.uses_visual_prompt() {
            names.insert(Self::visual_name(t));
        }
        if self.flags.uses_specific_ctx() {
            names.insert(Self::ds_name(t));
        }
        names.insert(Self::alpha_name(t));
        names.insert(LOGIT_SCALE_ENTRY.to_string());
        names
    }

    fn check_domain(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.domains {
            return Err(Error::UnknownDomain(t));
        }
        Ok(())
    }
}

/// Per-class text features for each active family, in canonical family order.
pub struct TextFeatures {
    pub per_family: Vec<(Family, [BufId; N_CLS])>,
}

/// Compose the token/context row blocks for one family and class.
fn family_parts<T: Real>(
    tape: &mut Tape<T>,
    binding: &mut Binding<T>,
    enc: &DualEncoder,
    t: usize,
    family: Family,
    class: usize,
) -> Result<Vec<BufId>> {
    let sos = enc.token_rows(tape, binding, &[TokenTable::SOS])?;
    let eos = enc.token_rows(tape, binding, &[TokenTable::EOS])?;
    let ecls = binding.buf(tape, ECLS_ENTRY)?;
    let class_row = tape.select_row(ecls, class)?;
    let parts = match family {
        Family::DomainAgnostic => {
            let da = binding.buf(tape, DA_ENTRY)?;
            vec![sos, da, class_row, eos]
        }
        Family::DomainSpecific => {
            let ds = binding.buf(tape, &PromptBank::ds_name(t))?;
            vec![sos, ds, class_row, eos]
        }
        Family::Mixed => {
            let da = binding.buf(tape, DA_ENTRY)?;
            let ds = binding.buf(tape, &PromptBank::ds_name(t))?;
            vec![sos, da, ds, class_row, eos]
        }
        Family::Fixed => {
            let ids = enc
                .tokens
                .tokenize_fixed(crate::encoders::CLASS_NAMES[class])?;
            let rows = enc.token_rows(tape, binding, &ids)?;
            vec![rows]
        }
    };
    Ok(parts)
}

/// Encode the per-class prompt sequences of every active family for domain
/// `t`. The fixed family is identical across domains by construction: its
/// sequence contains no learned context.
pub fn text_features<T: Real>(
    tape: &mut Tape<T>,
    binding: &mut Binding<T>,
    enc: &DualEncoder,
    bank: &PromptBank,
    t: usize,
) -> Result<TextFeatures> {
    bank.check_domain(t)?;
    let mut per_family = Vec::new();
    for family in bank.flags.active_families() {
        let mut feats = Vec::with_capacity(N_CLS);
        for class in 0..N_CLS {
            let parts = family_parts(tape, binding, enc, t, family, class)?;
            feats.push(enc.encode_text(tape, binding, &parts)?);
        }
        per_family.push((family, [feats[0], feats[1]]));
    }
    Ok(TextFeatures { per_family })
}

/// Image feature under domain `t`'s visual prompt (or none when ablated).
pub fn image_feature<T: Real>(
    tape: &mut Tape<T>,
    binding: &mut Binding<T>,
    enc: &DualEncoder,
    bank: &PromptBank,
    t: usize,
    pixels: &[f32],
) -> Result<BufId> {
    bank.check_domain(t)?;
    let prompt = if bank.flags.uses_visual_prompt() {
        Some(binding.buf(tape, &PromptBank::visual_name(t))?)
    } else {
        None
    };
    enc.encode_image(tape, binding, pixels, prompt)
}

/// Cosine logits for one family: both sides are L2-normalized, then scaled by
/// the exponentiated log-temperature.
pub fn family_logit<T: Real>(
    tape: &mut Tape<T>,
    f_img: BufId,
    f_txt: &[BufId; N_CLS],
    logit_scale: BufId,
) -> Result<BufId> {
    let tau = tape.exp(logit_scale)?;
    let img_n = tape.l2_normalize(f_img)?;
    let mut per_class = Vec::with_capacity(N_CLS);
    for f in f_txt {
        let txt_n = tape.l2_normalize(*f)?;
        let cos = tape.dot(img_n, txt_n)?;
        per_class.push(tape.mul(cos, tau)?);
    }
    tape.concat_cols(&per_class)
}

/// Blend per-family logits with softmax weights over the aggregation logits.
pub fn aggregate<T: Real>(
    tape: &mut Tape<T>,
    family_logits: &[BufId],
    alpha: BufId,
) -> Result<BufId> {
    if family_logits.is_empty() {
        return Err(Error::Empty("family logits"));
    }
    let k = tape.value(alpha).numel();
    if k != family_logits.len() {
        return Err(Error::Shape {
            op: "aggregate",
            detail: format!("{} aggregation logits vs {} families", k, family_logits.len()),
        });
    }
    let weights = tape.softmax(alpha)?;
    let mut agg: Option<BufId> = None;
    for (i, logit) in family_logits.iter().enumerate() {
        let w = tape.slice_cols(weights, i, 1)?;
        let scaled = tape.mul(*logit, w)?;
        agg = Some(match agg {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(agg.expect("at least one family"))
}

/// Aggregated logits for one image under domain `t`'s prompts, given the
/// precomputed text features for that domain.
pub fn logits_from_features<T: Real>(
    tape: &mut Tape<T>,
    binding: &mut Binding<T>,
    bank: &PromptBank,
    t: usize,
    f_img: BufId,
    text: &TextFeatures,
) -> Result<BufId> {
    bank.check_domain(t)?;
    let scale = binding.buf(tape, LOGIT_SCALE_ENTRY)?;
    let mut per_family = Vec::with_capacity(text.per_family.len());
    for (_, feats) in &text.per_family {
        per_family.push(family_logit(tape, f_img, feats, scale)?);
    }
    let alpha = binding.buf(tape, &PromptBank::alpha_name(t))?;
    aggregate(tape, &per_family, alpha)
}

/// Cross-entropy of the aggregated logits against the binary label
/// (0 = spoof, 1 = real).
pub fn map_loss<T: Real>(tape: &mut Tape<T>, agg_logits: BufId, label: usize) -> Result<BufId> {
    if label >= N_CLS {
        return Err(Error::LabelRange(label));
    }
    tape.cross_entropy(agg_logits, label)
}
