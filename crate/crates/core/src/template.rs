//! Tokenization and prompt-template construction.
//!
//! A layout string such as `"P:4 A1 P:4 MASK P:4 SEP P:4 A2 P:4"` describes
//! where soft-prompt runs, the two arguments, the mask, and the separator go.
//! [`apply_template`] turns an argument pair into token ids with the prompt
//! slots recorded, truncating arguments (longest first) when the result would
//! exceed the maximum length. Prompt, mask, and separator are never truncated.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MASK_TOKEN: &str = "<mask>";
pub const SEP_TOKEN: &str = "<sep>";

/// The layout used when a run configuration does not override it.
pub const DEFAULT_LAYOUT: &str = "P:4 A1 P:4 MASK P:4 SEP P:4 A2 P:4";

/// Lowercased word vocabulary with dense ids and four special tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const MASK_ID: usize = 2;
    pub const SEP_ID: usize = 3;

    /// Builds a vocabulary from a text corpus. Tokens are lowercased runs of
    /// alphanumeric characters; anything else separates tokens. Tokens seen
    /// fewer than `min_count` times are dropped. Ordering is deterministic:
    /// specials first, then by descending frequency, ties lexicographic.
    pub fn build(corpus: impl IntoIterator<Item = impl AsRef<str>>, min_count: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut saw_text = false;
        for line in corpus {
            saw_text = true;
            for tok in tokenize(line.as_ref()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_text || counts.is_empty() {
            return Err(Error::data("empty corpus: no tokens to build a vocabulary"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN, SEP_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id of a token, falling back to the unknown id.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.token_to_id
            .get(token)
            .copied()
            .unwrap_or_else(|| self.unk_id())
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        Self::PAD_ID
    }

    pub fn unk_id(&self) -> usize {
        Self::UNK_ID
    }

    pub fn mask_id(&self) -> usize {
        Self::MASK_ID
    }

    pub fn sep_id(&self) -> usize {
        Self::SEP_ID
    }

    /// Serializes as UTF-8 lines `token<TAB>id`, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            let _ = writeln!(out, "{tok}\t{id}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut id_to_token: Vec<String> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::data_at(lineno + 1, "vocab line missing tab separator"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::data_at(lineno + 1, format!("bad vocab id {id:?}")))?;
            if id != id_to_token.len() {
                return Err(Error::data_at(
                    lineno + 1,
                    format!("vocab ids must be dense, expected {} got {id}", id_to_token.len()),
                ));
            }
            id_to_token.push(tok.to_string());
        }
        if id_to_token.len() < 4 {
            return Err(Error::data("vocab file missing special tokens"));
        }
        for (want, got) in [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN, SEP_TOKEN]
            .iter()
            .zip(&id_to_token)
        {
            if want != got {
                return Err(Error::data(format!(
                    "vocab special token mismatch: expected {want}, found {got}"
                )));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tsv(&text)
    }
}

/// Lowercased alphanumeric tokens; punctuation and whitespace separate.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// One slot of a parsed layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Slot {
    /// A run of `count` soft-prompt positions.
    PromptRun(usize),
    Arg1,
    Arg2,
    Mask,
    Sep,
}

/// Parsed template layout: slot order plus the total prompt count K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    slots: Vec<Slot>,
    prompt_count: usize,
    source: String,
}

impl PromptTemplate {
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Total number of soft-prompt positions, K.
    pub fn prompt_count(&self) -> usize {
        self.prompt_count
    }

    /// The layout string this template was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Fixed positions the template contributes beyond the two arguments
    /// (prompts + mask + sep).
    pub fn overhead(&self) -> usize {
        self.prompt_count + 2
    }
}

/// Parses a layout string of whitespace-separated atoms from
/// `{P:<n>, A1, A2, MASK, SEP}`. Exactly one each of A1, A2, MASK, SEP.
pub fn parse_layout(spec: &str) -> Result<PromptTemplate> {
    let mut slots = Vec::new();
    let mut prompt_count = 0usize;
    let mut seen = (0usize, 0usize, 0usize, 0usize); // a1, a2, mask, sep
    for (pos, atom) in spec.split_whitespace().enumerate() {
        let position = pos + 1;
        let slot = match atom {
            "A1" => {
                seen.0 += 1;
                Slot::Arg1
            }
            "A2" => {
                seen.1 += 1;
                Slot::Arg2
            }
            "MASK" => {
                seen.2 += 1;
                Slot::Mask
            }
            "SEP" => {
                seen.3 += 1;
                Slot::Sep
            }
            _ => {
                let count = atom
                    .strip_prefix("P:")
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::Layout {
                        position,
                        message: format!("unrecognized atom {atom:?}"),
                    })?;
                prompt_count += count;
                Slot::PromptRun(count)
            }
        };
        slots.push(slot);
    }
    let check = |count: usize, what: &str| -> Result<()> {
        match count {
            1 => Ok(()),
            0 => Err(Error::Layout {
                position: slots.len(),
                message: format!("missing {what}"),
            }),
            _ => Err(Error::Layout {
                position: slots.len(),
                message: format!("duplicate {what}"),
            }),
        }
    };
    check(seen.0, "A1")?;
    check(seen.1, "A2")?;
    check(seen.2, "MASK")?;
    check(seen.3, "SEP")?;
    Ok(PromptTemplate {
        slots,
        prompt_count,
        source: spec.split_whitespace().collect::<Vec<_>>().join(" "),
    })
}

/// The templated input: token ids with the pad id standing in at prompt
/// slots, plus the recorded prompt positions and the mask position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModifiedInput {
    pub ids: Vec<usize>,
    pub prompt_slots: Vec<usize>,
    pub mask_position: usize,
}

impl ModifiedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Projects an argument pair through the template. Arguments are tokenized,
/// mapped through the vocabulary (unknowns to the unk id), and truncated
/// from the tail, longest argument first, until the result fits `max_len`.
pub fn apply_template(
    template: &PromptTemplate,
    arg1: &str,
    arg2: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<ModifiedInput> {
    let mut ids1: Vec<usize> = tokenize(arg1).iter().map(|t| vocab.id_or_unk(t)).collect();
    let mut ids2: Vec<usize> = tokenize(arg2).iter().map(|t| vocab.id_or_unk(t)).collect();
    if ids1.is_empty() || ids2.is_empty() {
        let which = if ids1.is_empty() { "arg1" } else { "arg2" };
        return Err(Error::data(format!("{which} is empty after tokenization")));
    }
    let overhead = template.overhead();
    if overhead + 2 > max_len {
        return Err(Error::Length(format!(
            "template needs {} positions plus both arguments, but max_len is {max_len}",
            overhead
        )));
    }
    let budget = max_len - overhead;
    while ids1.len() + ids2.len() > budget {
        if ids1.len() >= ids2.len() {
            ids1.pop();
        } else {
            ids2.pop();
        }
    }

    let mut ids = Vec::with_capacity(overhead + ids1.len() + ids2.len());
    let mut prompt_slots = Vec::with_capacity(template.prompt_count());
    let mut mask_position = 0usize;
    for slot in template.slots() {
        match slot {
            Slot::PromptRun(count) => {
                for _ in 0..*count {
                    prompt_slots.push(ids.len());
                    ids.push(vocab.pad_id());
                }
            }
            Slot::Arg1 => ids.extend_from_slice(&ids1),
            Slot::Arg2 => ids.extend_from_slice(&ids2),
            Slot::Mask => {
                mask_position = ids.len();
                ids.push(vocab.mask_id());
            }
            Slot::Sep => ids.push(vocab.sep_id()),
        }
    }
    Ok(ModifiedInput {
        ids,
        prompt_slots,
        mask_position,
    })
}
