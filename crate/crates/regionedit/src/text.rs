//! Rule-based captioner, instruction grammar, and word-level tokenizer.
//!
//! Captions enumerate scene objects in list order; instructions follow a
//! closed four-production grammar. Both paths operate on the same
//! `EditOp`, so editing the caption and editing the scene commute.


use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::synth::{
    sample_edit_op, Accessory, Color, EditOp, SceneGraph, ShapeKind, SizeClass, ACCESSORIES,
    COLORS, SHAPES, SIZES,
};

pub const MAX_TOKENS: usize = 24;
pub const EMPTY_CAPTION: &str = "an empty gray canvas";

pub const START: usize = 0;
pub const END: usize = 1;
pub const PAD: usize = 2;

/// Closed vocabulary; line number in the vocab file = token id.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words: Vec<String> = ["<s>", "</s>", "<pad>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for w in [
            "a", "an", "and", "the", "empty", "gray", "canvas", "with", "to", "add", "remove",
            "change", "give",
        ] {
            words.push(w.to_string());
        }
        for c in COLORS {
            words.push(c.word().to_string());
        }
        for s in SHAPES {
            words.push(s.word().to_string());
        }
        for s in SIZES {
            words.push(s.word().to_string());
        }
        for a in ACCESSORIES {
            words.push(a.word().to_string());
        }
        Vocab { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocab(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    /// `[START, words..., END]`; errors on out-of-vocabulary words.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![START];
        for w in text.split_whitespace() {
            ids.push(self.id(w)?);
        }
        ids.push(END);
        Ok(ids)
    }

    /// Drops sentinels and joins the remaining words.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == START || id == END || id == PAD {
                continue;
            }
            words.push(
                self.word(id)
                    .ok_or_else(|| Error::Vocab(format!("id {id}")))?,
            );
        }
        Ok(words.join(" "))
    }

    /// Pad with PAD up to `MAX_TOKENS`; also returns the PAD mask.
    pub fn pad(&self, mut ids: Vec<usize>) -> Result<(Vec<usize>, Vec<bool>)> {
        if ids.len() > MAX_TOKENS {
            return Err(Error::Contract(format!(
                "token sequence of length {} exceeds {MAX_TOKENS}",
                ids.len()
            )));
        }
        let mut mask = vec![false; MAX_TOKENS];
        for m in mask.iter_mut().skip(ids.len()) {
            *m = true;
        }
        ids.resize(MAX_TOKENS, PAD);
        Ok((ids, mask))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let words: Vec<String> = s.lines().map(|l| l.to_string()).collect();
        if words.len() < 3 || words[0] != "<s>" {
            return Err(Error::Data("malformed vocabulary file".into()));
        }
        Ok(Vocab { words })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub text: String,
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub text: String,
    pub parsed: EditOp,
}

fn object_phrase(size: SizeClass, color: Color, kind: ShapeKind, acc: Option<Accessory>) -> String {
    let mut p = format!("a {} {} {}", size.word(), color.word(), kind.word());
    if let Some(a) = acc {
        p.push_str(&format!(" with {}", a.word()));
    }
    p
}

/// Deterministic template caption (the MLLM stand-in).
pub fn describe(vocab: &Vocab, scene: &SceneGraph) -> Result<Caption> {
    let text = if scene.objects.is_empty() {
        EMPTY_CAPTION.to_string()
    } else {
        scene
            .objects
            .iter()
            .map(|o| object_phrase(o.size, o.color, o.kind, o.accessory))
            .collect::<Vec<_>>()
            .join(" and ")
    };
    let ids = vocab.tokenize(&text)?;
    Ok(Caption { text, ids })
}

pub fn render_instruction(op: &EditOp) -> String {
    match op {
        EditOp::Add {
            size,
            color,
            kind,
            accessory,
        } => {
            let mut t = format!("add a {} {} {}", size.word(), color.word(), kind.word());
            if let Some(a) = accessory {
                t.push_str(&format!(" with a {}", a.word()));
            }
            t
        }
        EditOp::Remove { color, kind } => {
            format!("remove the {} {}", color.word(), kind.word())
        }
        EditOp::ChangeColor {
            color,
            kind,
            new_color,
        } => format!(
            "change the {} {} to {}",
            color.word(),
            kind.word(),
            new_color.word()
        ),
        EditOp::GiveAccessory {
            color,
            kind,
            accessory,
        } => format!(
            "give the {} {} a {}",
            color.word(),
            kind.word(),
            accessory.word()
        ),
    }
}

const GRAMMAR_HELP: &str = "expected one of: \
`add a <size> <color> <shape> [with a <accessory>]` | \
`remove the <color> <shape>` | \
`change the <color> <shape> to <color>` | \
`give the <color> <shape> a <accessory>`";

pub fn parse_instruction(text: &str) -> Result<Instruction> {
    let w: Vec<&str> = text.split_whitespace().collect();
    let fail = || Error::Grammar(format!("cannot parse `{text}`; {GRAMMAR_HELP}"));
    let color = |s: &str| Color::from_word(s).ok_or_else(fail);
    let shape = |s: &str| ShapeKind::from_word(s).ok_or_else(fail);
    let parsed = match w.as_slice() {
        ["add", "a", sz, c, k] => EditOp::Add {
            size: SizeClass::from_word(sz).ok_or_else(fail)?,
            color: color(c)?,
            kind: shape(k)?,
            accessory: None,
        },
        ["add", "a", sz, c, k, "with", "a", acc] => EditOp::Add {
            size: SizeClass::from_word(sz).ok_or_else(fail)?,
            color: color(c)?,
            kind: shape(k)?,
            accessory: Some(Accessory::from_word(acc).ok_or_else(fail)?),
        },
        ["remove", "the", c, k] => EditOp::Remove {
            color: color(c)?,
            kind: shape(k)?,
        },
        ["change", "the", c, k, "to", nc] => EditOp::ChangeColor {
            color: color(c)?,
            kind: shape(k)?,
            new_color: color(nc)?,
        },
        ["give", "the", c, k, "a", acc] => EditOp::GiveAccessory {
            color: color(c)?,
            kind: shape(k)?,
            accessory: Accessory::from_word(acc).ok_or_else(fail)?,
        },
        _ => return Err(fail()),
    };
    Ok(Instruction {
        text: text.to_string(),
        parsed,
    })
}

/// Sample a feasible, grammatical instruction (the LLM stand-in).
pub fn propose_instruction(scene: &SceneGraph, seed: u64) -> Result<Instruction> {
    let mut rng = rng::substream(seed, "propose-instruction");
    propose_instruction_with(scene, &mut rng)
}

pub fn propose_instruction_with(scene: &SceneGraph, rng: &mut Prng) -> Result<Instruction> {
    // reject edits whose caption would overflow the token budget
    for _ in 0..64 {
        let op = sample_edit_op(scene, None, rng)?;
        if let EditOp::Add { accessory, .. } = &op {
            let phrase_words = if accessory.is_some() { 6 } else { 4 };
            let current: usize = caption_word_count(scene);
            if current + 1 + phrase_words + 2 > MAX_TOKENS {
                continue;
            }
        }
        let text = render_instruction(&op);
        return Ok(Instruction { text, parsed: op });
    }
    Err(Error::InfeasibleEdit(
        "no instruction fits this scene".into(),
    ))
}

fn caption_word_count(scene: &SceneGraph) -> usize {
    if scene.objects.is_empty() {
        return 4;
    }
    scene
        .objects
        .iter()
        .map(|o| if o.accessory.is_some() { 6 } else { 4 })
        .sum::<usize>()
        + scene.objects.len()
        - 1
}

#[derive(Debug, Clone)]
struct Phrase {
    size: SizeClass,
    color: Color,
    kind: ShapeKind,
    accessory: Option<Accessory>,
}

fn parse_phrase(p: &str) -> Result<Phrase> {
    let w: Vec<&str> = p.split_whitespace().collect();
    let fail = || Error::Data(format!("unparseable caption phrase `{p}`"));
    match w.as_slice() {
        ["a", sz, c, k] => Ok(Phrase {
            size: SizeClass::from_word(sz).ok_or_else(fail)?,
            color: Color::from_word(c).ok_or_else(fail)?,
            kind: ShapeKind::from_word(k).ok_or_else(fail)?,
            accessory: None,
        }),
        ["a", sz, c, k, "with", acc] => Ok(Phrase {
            size: SizeClass::from_word(sz).ok_or_else(fail)?,
            color: Color::from_word(c).ok_or_else(fail)?,
            kind: ShapeKind::from_word(k).ok_or_else(fail)?,
            accessory: Some(Accessory::from_word(acc).ok_or_else(fail)?),
        }),
        _ => Err(fail()),
    }
}

/// Rewrite the caption under the instruction (the LLM stand-in).
pub fn apply_instruction(vocab: &Vocab, t_o: &Caption, t_ins: &Instruction) -> Result<Caption> {
    let mut phrases: Vec<Phrase> = if t_o.text == EMPTY_CAPTION {
        Vec::new()
    } else {
        t_o.text
            .split(" and ")
            .map(parse_phrase)
            .collect::<Result<_>>()?
    };
    let find = |phrases: &[Phrase], color: Color, kind: ShapeKind| -> Result<usize> {
        phrases
            .iter()
            .position(|p| p.color == color && p.kind == kind)
            .ok_or_else(|| {
                Error::UnresolvedTarget(format!(
                    "caption has no {} {}",
                    color.word(),
                    kind.word()
                ))
            })
    };
    match &t_ins.parsed {
        EditOp::Add {
            size,
            color,
            kind,
            accessory,
        } => phrases.push(Phrase {
            size: *size,
            color: *color,
            kind: *kind,
            accessory: *accessory,
        }),
        EditOp::Remove { color, kind } => {
            let i = find(&phrases, *color, *kind)?;
            phrases.remove(i);
        }
        EditOp::ChangeColor {
            color,
            kind,
            new_color,
        } => {
            let i = find(&phrases, *color, *kind)?;
            phrases[i].color = *new_color;
        }
        EditOp::GiveAccessory {
            color,
            kind,
            accessory,
        } => {
            let i = find(&phrases, *color, *kind)?;
            phrases[i].accessory = Some(*accessory);
        }
    }
    let text = if phrases.is_empty() {
        EMPTY_CAPTION.to_string()
    } else {
        phrases
            .iter()
            .map(|p| object_phrase(p.size, p.color, p.kind, p.accessory))
            .collect::<Vec<_>>()
            .join(" and ")
    };
    let ids = vocab.tokenize(&text)?;
    Ok(Caption { text, ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, apply_edit, generate_corpus};
    use rand::Rng;

    #[test]
    fn vocab_stays_closed_and_small() {
        let v = Vocab::default();
        assert!(v.len() <= 256);
    }

    #[test]
    fn tokenize_empty_is_sentinels_only() {
        let v = Vocab::default();
        assert_eq!(v.tokenize("").unwrap(), vec![START, END]);
    }

    #[test]
    fn tokenize_round_trip() {
        let v = Vocab::default();
        let text = "a small red circle and a large blue square";
        let ids = v.tokenize(text).unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), text);
        assert_eq!(v.tokenize(&v.detokenize(&ids).unwrap()).unwrap(), ids);
    }

    #[test]
    fn out_of_vocabulary_is_an_error() {
        let v = Vocab::default();
        assert!(matches!(v.tokenize("a crimson dodecahedron"), Err(Error::Vocab(_))));
    }

    #[test]
    fn pad_marks_pad_positions() {
        let v = Vocab::default();
        let (ids, mask) = v.pad(v.tokenize("remove the red circle").unwrap()).unwrap();
        assert_eq!(ids.len(), MAX_TOKENS);
        assert_eq!(mask.iter().filter(|&&m| m).count(), MAX_TOKENS - 6);
        assert!(ids[6..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn describe_empty_scene() {
        let v = Vocab::default();
        let c = describe(&v, &SceneGraph::empty()).unwrap();
        assert_eq!(c.text, EMPTY_CAPTION);
    }

    #[test]
    fn captions_fit_token_budget() {
        let v = Vocab::default();
        for s in generate_corpus(500, 13).unwrap() {
            let c = describe(&v, &s.scene).unwrap();
            assert!(c.ids.len() <= MAX_TOKENS, "caption too long: {}", c.text);
        }
    }

    #[test]
    fn instructions_reparse_under_grammar() {
        for s in generate_corpus(100, 21).unwrap() {
            let ins = propose_instruction(&s.scene, s.id).unwrap();
            let re = parse_instruction(&ins.text).unwrap();
            assert_eq!(re.parsed, ins.parsed);
        }
    }

    #[test]
    fn all_op_kinds_occur_on_two_object_scene() {
        let corpus = generate_corpus(30, 2).unwrap();
        let scene = &corpus
            .iter()
            .find(|s| s.scene.objects.len() == 2)
            .unwrap()
            .scene;
        let mut seen = [false; 4];
        for seed in 0..1000u64 {
            let ins = propose_instruction(scene, seed).unwrap();
            let k = match ins.parsed {
                EditOp::Add { .. } => 0,
                EditOp::Remove { .. } => 1,
                EditOp::ChangeColor { .. } => 2,
                EditOp::GiveAccessory { .. } => 3,
            };
            seen[k] = true;
        }
        assert_eq!(seen, [true; 4]);
    }

    #[test]
    fn apply_instruction_basic_cases() {
        let v = Vocab::default();
        let cap = |t: &str| Caption {
            text: t.into(),
            ids: v.tokenize(t).unwrap(),
        };
        let change = parse_instruction("change the red circle to blue").unwrap();
        assert_eq!(
            apply_instruction(&v, &cap("a medium red circle"), &change)
                .unwrap()
                .text,
            "a medium blue circle"
        );
        let remove = parse_instruction("remove the red circle").unwrap();
        assert_eq!(
            apply_instruction(&v, &cap("a medium red circle"), &remove)
                .unwrap()
                .text,
            EMPTY_CAPTION
        );
        let add = parse_instruction("add a small green square").unwrap();
        assert_eq!(
            apply_instruction(&v, &cap("a medium red circle"), &add)
                .unwrap()
                .text,
            "a medium red circle and a small green square"
        );
        let missing = parse_instruction("remove the blue triangle").unwrap();
        assert!(matches!(
            apply_instruction(&v, &cap("a medium red circle"), &missing),
            Err(Error::UnresolvedTarget(_))
        ));
    }

    #[test]
    fn text_and_scene_paths_commute() {
        let v = Vocab::default();
        let mut rng = crate::rng::seeded(77);
        for s in generate_corpus(300, 4).unwrap() {
            let seed: u64 = rng.gen();
            let t_o = describe(&v, &s.scene).unwrap();
            let ins = propose_instruction(&s.scene, seed).unwrap();
            let via_text = apply_instruction(&v, &t_o, &ins).unwrap();
            let edited = apply_edit(&s.scene, &ins.parsed).unwrap();
            let via_scene = describe(&v, &edited).unwrap();
            assert_eq!(via_text, via_scene, "instruction: {}", ins.text);
        }
    }

    #[test]
    fn edited_captions_fit_token_budget() {
        let v = Vocab::default();
        for s in generate_corpus(400, 31).unwrap() {
            let ins = propose_instruction(&s.scene, s.id ^ 5).unwrap();
            let edited = apply_edit(&s.scene, &ins.parsed).unwrap();
            let c = describe(&v, &edited).unwrap();
            assert!(c.ids.len() <= MAX_TOKENS, "edited caption too long: {}", c.text);
        }
        let _ = synth::GENERATOR_VERSION;
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::default();
        let s = v.to_file_string();
        let back = Vocab::from_file_string(&s).unwrap();
        assert_eq!(v.len(), back.len());
        assert_eq!(back.id("triangle").unwrap(), v.id("triangle").unwrap());
    }
}
